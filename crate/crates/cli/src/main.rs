use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use cmggib::analysis::{
    feature_matrix, inspect, relevance, relevance_buckets, trajectory_report, write_buckets_csv, EntropyHeads,
    FeatureStage,
};
use cmggib::checkpoint;
use cmggib::corpus::{load_corpus, write_corpus, Instance, RelationSet};
use cmggib::lamo::{topic_records, write_topic_dump};
use cmggib::model::Model;
use cmggib::synth::{synth_corpus, write_annotations};
use cmggib::train::{evaluate, excluded_label, predict_all, run_schedule, EpochLog, Schedule};
use cmggib::Config;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "cmggib", version, about = "Multimodal relation extraction with refined cross-modal graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-signal corpus
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train with the warm-start schedule
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with train.jsonl and dev.jsonl; synthesized when absent
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Count the None relation in precision and recall
        #[arg(long)]
        include_none: bool,
    },
    /// Dump refined and pruned graphs
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "id", required = true)]
        ids: Vec<String>,
    },
    /// Top words of each topic
    Topics {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        keywords: Option<usize>,
    },
    /// Entropy, trajectory and relevance reports
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory with train.jsonl and test.jsonl
        #[arg(long)]
        data: PathBuf,
        /// Training log written by `train`
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        buckets: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_split(dir: &Path, name: &str, relations: &RelationSet) -> Result<Vec<Instance>> {
    let path = dir.join(format!("{name}.jsonl"));
    load_corpus(&path, relations).with_context(|| format!("reading {}", path.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut text = String::new();
    for l in logs {
        text.push_str(&serde_json::to_string(l)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn synth(config: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let config = Config::load(config.as_deref())?;
    let corpus = synth_corpus(&config)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join("train.jsonl"), write_corpus(&corpus.train))?;
    fs::write(out.join("dev.jsonl"), write_corpus(&corpus.dev))?;
    fs::write(out.join("test.jsonl"), write_corpus(&corpus.test))?;
    fs::write(out.join("annotations.jsonl"), write_annotations(&corpus.annotations))?;
    println!(
        "wrote {} / {} / {} instances to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        out.display()
    );
    Ok(())
}

fn train(config: Option<PathBuf>, data: Option<PathBuf>, out: PathBuf) -> Result<()> {
    let config = Config::load(config.as_deref())?;
    let relations = RelationSet::default();
    let (train, dev) = match &data {
        Some(dir) => (read_split(dir, "train", &relations)?, read_split(dir, "dev", &relations)?),
        None => {
            let c = synth_corpus(&config)?;
            (c.train, c.dev)
        }
    };
    let mut model = Model::build(&config, relations, &train, &dev)?;
    let train_p = model.prepare_all(&train)?;
    let dev_p = model.prepare_all(&dev)?;
    fs::create_dir_all(&out)?;
    let mut logs = Vec::new();
    let result = run_schedule(&mut model, &train_p, &dev_p, &Schedule::from_config(&config), &mut logs);
    checkpoint::save(&model, &out.join("checkpoint.json"))?;
    write_log(&out.join("train_log.jsonl"), &logs)?;
    fs::write(out.join("trajectory.csv"), trajectory_report(&logs)?)?;
    result.context("training aborted; last good parameters saved")?;
    let ev = evaluate(&model, &dev_p)?;
    println!("dev accuracy {:.4} f1 {:.4}", ev.metrics.accuracy, ev.metrics.f1);
    Ok(())
}

fn eval(checkpoint: PathBuf, data: PathBuf, include_none: bool) -> Result<()> {
    let mut model = load_model(&checkpoint)?;
    if include_none {
        model.config.include_none = true;
    }
    let insts = load_corpus(&data, &model.relations)?;
    let prepared = model.prepare_all(&insts)?;
    let ev = evaluate(&model, &prepared)?;
    println!("{}", serde_json::to_string_pretty(&ev.metrics)?);
    println!(
        "accuracy {:.4} precision {:.4} recall {:.4} f1 {:.4}",
        ev.metrics.accuracy, ev.metrics.precision, ev.metrics.recall, ev.metrics.f1
    );
    Ok(())
}

fn inspect_cmd(checkpoint: PathBuf, data: PathBuf, ids: Vec<String>) -> Result<()> {
    let model = load_model(&checkpoint)?;
    let insts = load_corpus(&data, &model.relations)?;
    for id in &ids {
        let inst = insts
            .iter()
            .find(|i| &i.id == id)
            .with_context(|| format!("no instance `{id}` in {}", data.display()))?;
        let rec = inspect(&model, &model.prepare(inst)?)?;
        println!("{}", serde_json::to_string(&rec)?);
    }
    Ok(())
}

fn topics(checkpoint: PathBuf, keywords: Option<usize>) -> Result<()> {
    let model = load_model(&checkpoint)?;
    let l = keywords.unwrap_or(model.config.keywords);
    let records = topic_records(
        model.store.get(model.params.lamo.chi),
        model.store.get(model.params.lamo.psi),
        &model.vocab,
        l,
    );
    print!("{}", write_topic_dump(&records)?);
    Ok(())
}

fn write_features(path: &Path, m: &ndarray::Array2<f64>, ids: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (id, row) in ids.iter().zip(m.rows()) {
        let mut rec = vec![id.clone()];
        rec.extend(row.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn analyze(checkpoint: PathBuf, data: PathBuf, log: Option<PathBuf>, buckets: Option<usize>, out: PathBuf) -> Result<()> {
    let model = load_model(&checkpoint)?;
    let k = buckets.unwrap_or(model.config.buckets);
    if k == 0 {
        bail!("--buckets must be positive");
    }
    let train = read_split(&data, "train", &model.relations)?;
    let test = read_split(&data, "test", &model.relations)?;
    let train_pred = predict_all(&model, &model.prepare_all(&train)?)?;
    let test_pred = predict_all(&model, &model.prepare_all(&test)?)?;
    fs::create_dir_all(&out)?;

    let heads = EntropyHeads::fit(&model, &train_pred)?;
    let mut entropy = serde_json::Map::new();
    for (name, stage) in [("h", FeatureStage::H), ("z", FeatureStage::Z), ("s", FeatureStage::S)] {
        let e = heads.task_entropy(stage, &test_pred)?;
        println!("entropy {name} {e:.4}");
        entropy.insert(name.into(), e.into());
    }
    fs::write(out.join("entropy.json"), serde_json::to_string_pretty(&entropy)?)?;

    let scores = test
        .iter()
        .map(|i| Ok((i.id.clone(), relevance(i, &model.provider)?)))
        .collect::<cmggib::Result<Vec<_>>>()?;
    let bs = relevance_buckets(&scores, &test_pred, k, model.relations.len(), excluded_label(&model))?;
    for b in &bs {
        println!(
            "bucket [{:.2}, {:.2}) {} instances f1 {}",
            b.lo,
            b.hi,
            b.ids.len(),
            b.metrics.as_ref().map_or("-".into(), |m| format!("{:.4}", m.f1))
        );
    }
    fs::write(out.join("buckets.csv"), write_buckets_csv(&bs)?)?;

    let ids: Vec<String> = test_pred.iter().map(|p| p.id.clone()).collect();
    write_features(&out.join("features_z.csv"), &feature_matrix(&test_pred, FeatureStage::Z), &ids)?;
    write_features(&out.join("features_s.csv"), &feature_matrix(&test_pred, FeatureStage::S), &ids)?;

    if let Some(log) = log {
        let logs = read_log(&log)?;
        fs::write(out.join("trajectory.csv"), trajectory_report(&logs)?)?;
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out } => synth(config, out),
        Command::Train { config, data, out } => train(config, data, out),
        Command::Eval {
            checkpoint,
            data,
            include_none,
        } => eval(checkpoint, data, include_none),
        Command::Inspect { checkpoint, data, ids } => inspect_cmd(checkpoint, data, ids),
        Command::Topics { checkpoint, keywords } => topics(checkpoint, keywords),
        Command::Analyze {
            checkpoint,
            data,
            log,
            buckets,
            out,
        } => analyze(checkpoint, data, log, buckets, out),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
