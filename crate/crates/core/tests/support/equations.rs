//! One check per worked example of the model's equations and operations.

use super::{desk_config, planted_run, train_pipeline};
use cmggib::analysis::{entropy, relevance_from_embeddings, EntropyHeads, FeatureStage};
use cmggib::autograd::Mat;
use cmggib::cmg::{build_cmg, cosine, gat_attention, gat_forward, GatLayer, GatLayerVars, GatParams};
use cmggib::corpus::{load_corpus, parse_corpus, RelationSet};
use cmggib::error::Error;
use cmggib::fusion::{classify, integrate_modality, predict, resolve_entity_reps, total_loss, LossWeights};
use cmggib::gene::{
    concrete_sample, gib_loss, hard_adjacency, hard_prune, kl_gaussian, refine, GateProbe, GateStructure, GeneConfig,
    GeneNoise, GeneParams,
};
use cmggib::lamo::{
    argmax, assign_visual_words, build_codebook, encode_topics, lamo_loss, reconstruct, reconstruction_loglik,
    sample_theta, top_indices, top_keywords, TopicEncoder, TopicState,
};
use cmggib::metrics::compute_metrics;
use cmggib::model::{Model, Stage};
use cmggib::nn::{LrGroup, ParamStore, Session};
use cmggib::sg::{
    fuse_visual_features, parse_scene_graph, span_mean, BBox, Modality, NodeKind, Rule, SceneGraph, SgNode, Span,
};
use cmggib::synth::{build_provider, oracle_accuracy, synth_corpus};
use cmggib::train::{evaluate, predict_all, run_schedule, Schedule};
use cmggib::Config;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

const TOL: f64 = 1e-6;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < TOL
}

fn node(id: u32, kind: NodeKind, modality: Modality) -> SgNode {
    SgNode {
        id,
        kind,
        label: format!("n{id}"),
        region: (modality == Modality::Visual && kind != NodeKind::Relation).then(|| BBox::from([0.0, 0.0, 1.0, 1.0])),
        span: (modality == Modality::Textual).then(|| Span::new(id as usize, id as usize + 1)),
    }
}

fn objects(modality: Modality, n: usize, edges: Vec<(u32, u32)>) -> SceneGraph {
    SceneGraph {
        modality,
        nodes: (0..n as u32).map(|i| node(i, NodeKind::Object, modality)).collect(),
        edges,
    }
}

fn triple() -> serde_json::Value {
    json!({
        "modality": "visual",
        "nodes": [
            {"id": 0, "kind": "object", "label": "man", "region": [0, 0, 10, 10]},
            {"id": 1, "kind": "object", "label": "horse", "region": [5, 5, 20, 20]},
            {"id": 2, "kind": "relation", "label": "riding"}
        ],
        "edges": [[0, 2], [2, 1]]
    })
}

fn parse_examples() {
    let g = parse_scene_graph(&json!({"modality": "textual", "nodes": [], "edges": []})).unwrap();
    assert!(g.is_empty() && g.validate().is_empty());
    assert!(parse_scene_graph(&triple()).unwrap().validate().is_empty());
    let mut doc = triple();
    doc["edges"] = json!([[2, 0], [2, 1]]);
    assert!(matches!(parse_scene_graph(&doc), Err(Error::Validation(_))));
}

fn visual_embedding_examples() {
    let out = fuse_visual_features(&Array2::zeros((3, 5)), &[0.3, -0.2, 0.9], &[1.0, 2.0]).unwrap();
    assert_eq!(out, vec![0.0; 3]);
    let out = fuse_visual_features(&array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[0.0, 0.0], &[5.0]).unwrap();
    assert_eq!(out, vec![0.0, 0.0]);
    let out = fuse_visual_features(&array![[1.0, 1.0]], &[0.5], &[0.5]).unwrap();
    assert!((out[0] - 0.7616).abs() < 5e-5);
    assert!((out[0] - 1f64.tanh()).abs() < 1e-12);
}

fn textual_embedding_examples() {
    let toks = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert_eq!(span_mean(&toks, 1, 2).unwrap(), vec![0.0, 1.0]);
    assert_eq!(span_mean(&toks, 0, 2).unwrap(), vec![0.5, 0.5]);
    assert!(span_mean(&toks, 1, 1).is_err());
}

fn validate_examples() {
    let g = parse_scene_graph(&triple()).unwrap();
    assert!(g.validate().is_empty());
    let mut dangling = g.clone();
    dangling.edges.push((0, 99));
    let v = dangling.validate();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].rule, Rule::DanglingEdge);
    let mut attr = g;
    attr.nodes.push(SgNode {
        id: 3,
        kind: NodeKind::Attribute,
        label: "brown".into(),
        region: None,
        span: None,
    });
    attr.edges.extend([(3, 0), (3, 1)]);
    let v = attr.validate();
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].rule, Rule::AttributeDegree);
}

fn cosine_examples() {
    assert!(close(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0));
    assert!(close(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0));
    assert!(close(cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap(), std::f64::consts::FRAC_1_SQRT_2));
}

fn cmg_examples() {
    let vsg = objects(Modality::Visual, 3, vec![]);
    let tsg = objects(Modality::Textual, 3, vec![]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
    let t = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
    assert!(build_cmg(&v, &t, &vsg, &tsg, 1.01).unwrap().hyper_edges.is_empty());
    assert_eq!(build_cmg(&v, &t, &vsg, &tsg, -1.0).unwrap().hyper_edges.len(), 9);
    let g = build_cmg(&v, &t, &vsg, &tsg, 0.25).unwrap();
    let mut want = vec![];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = (v.row(i), t.row(j));
            let c = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
            if c >= 0.25 {
                want.push((3 + i, j));
            }
        }
    }
    assert_eq!(g.hyper_edges, want);
}

fn gat_examples() {
    let vsg = objects(Modality::Visual, 1, vec![]);
    let tsg = objects(Modality::Textual, 1, vec![]);
    let x = array![[0.4, -0.3]];
    let g = build_cmg(&x, &x, &vsg, &tsg, 0.25).unwrap();
    let layer = GatLayer {
        attn: array![[0.3, -1.2, 0.7, 2.0]],
        value: array![[1.0, 0.5], [-0.2, 0.9]],
    };
    assert!(gat_attention(&g, &g.features, &layer).iter().all(|a| close(*a, 0.5)));
    let zero = GatParams {
        layers: vec![GatLayer {
            attn: layer.attn.clone(),
            value: Array2::zeros((2, 2)),
        }],
    };
    assert!(gat_forward(&g, &g.features, &zero).unwrap().iter().all(|&h| h == 0.0));

    // 3-node path t0 - v - t1
    let tsg = objects(Modality::Textual, 2, vec![]);
    let g = build_cmg(&array![[1.0, 1.0]], &array![[1.0, 0.0], [0.0, 1.0]], &vsg, &tsg, 0.5).unwrap();
    assert_eq!(g.undirected_edges(), vec![(0, 2), (1, 2)]);
    let params = GatParams {
        layers: vec![GatLayer {
            attn: array![[0.5, -1.0, 1.0, 0.25]],
            value: array![[1.0, -1.0], [0.5, 2.0]],
        }],
    };
    let h = gat_forward(&g, &g.features, &params).unwrap();
    // node 0 attends to {0, 2} with logits 1.5 and 1.75; values (1, 0.5), (0, 2.5)
    let a = 1.5f64.exp() / (1.5f64.exp() + 1.75f64.exp());
    assert!(close(h[[0, 0]], a));
    assert!(close(h[[0, 1]], 0.5 * a + 2.5 * (1.0 - a)));
    // node 2 attends to {0, 1, 2}: logits LReLU(0.5·1 - 1·1 + ·) on each neighbour
    let own = 0.5 - 1.0;
    let logits = [own + 1.0, own + 0.25, own + 1.25].map(|s: f64| if s > 0.0 { s } else { 0.2 * s });
    let e = logits.map(f64::exp);
    let z: f64 = e.iter().sum();
    let vals = [[1.0, 0.5], [-1.0, 2.0], [0.0, 2.5]];
    let want0: f64 = (0..3).map(|k| e[k] / z * vals[k][0]).sum::<f64>().max(0.0);
    let want1: f64 = (0..3).map(|k| e[k] / z * vals[k][1]).sum::<f64>().max(0.0);
    assert!(close(h[[2, 0]], want0) && close(h[[2, 1]], want1));
}

fn concrete_examples() {
    for tau in [0.1, 1.0, 5.0] {
        assert!(close(concrete_sample(0.5, tau, 0.5).unwrap(), 0.5));
    }
    let hi = concrete_sample(0.9, 0.1, 0.5).unwrap();
    assert!(1.0 - hi < 1e-9);
    let lo = concrete_sample(0.1, 0.1, 0.5).unwrap();
    assert!(lo < 1e-9);
}

fn gene_setup(d: usize) -> (ParamStore, GeneParams) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = GeneParams::register(&mut store, &mut rng, d, d, 3);
    (store, params)
}

fn text_graph(n: usize, edges: Vec<(u32, u32)>) -> SceneGraph {
    objects(Modality::Textual, n, edges)
}

fn gate_examples() {
    let (mut store, params) = gene_setup(2);
    let h = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [-1.0, 0.5]];
    let tsg = text_graph(4, vec![(0, 1), (1, 2), (2, 3)]);
    let vsg = SceneGraph::empty(Modality::Visual);
    let g = build_cmg(&Array2::zeros((0, 2)), &h, &vsg, &tsg, 0.25).unwrap();
    {
        let st = GateStructure::new(&g, 2);
        let probe = GateProbe {
            store: &store,
            params: &params,
            config: GeneConfig::default(),
        };
        for i in 0..4 {
            let (pi, rho) = probe.node_gate(i, &h, &[0.3, 0.1], &[0.0, 1.0], &st, 0.5).unwrap();
            assert_eq!(pi, 0.5);
            assert!(close(rho, 0.5));
        }
        assert!(matches!(
            probe.edge_gate(0, 3, &h, &[0.0, 0.0], &[0.0, 0.0], &st, 0.5),
            Err(Error::Contract(_))
        ));
    }

    // singleton neighbourhood: r = tanh(W₅ h)
    *store.get_mut(params.node_value) = array![[1.0, 2.0], [-0.5, 0.3]];
    let lone = build_cmg(&Array2::zeros((0, 2)), &h.slice(ndarray::s![..2, ..]).to_owned(), &vsg, &text_graph(2, vec![]), 0.25).unwrap();
    let probe = GateProbe {
        store: &store,
        params: &params,
        config: GeneConfig::default(),
    };
    let r = probe.node_context(&lone.features, &GateStructure::new(&lone, 2));
    assert!(close(r[[0, 0]], 1f64.tanh()) && close(r[[0, 1]], (-0.5f64).tanh()));

    // 4-node path, order-1 context of node 1 is {0, 1, 2}
    *store.get_mut(params.node_attn) = array![[0.5, -1.0, 1.0, 0.25]];
    *store.get_mut(params.node_value) = array![[1.0, 0.0], [0.5, -1.0]];
    let probe = GateProbe {
        store: &store,
        params: &params,
        config: GeneConfig::default(),
    };
    let r = probe.node_context(&h, &GateStructure::new(&g, 1));
    let ctx: [[f64; 2]; 3] = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
    let e: Vec<f64> = ctx.iter().map(|k| (-1.0 + k[0] + 0.25 * k[1]).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut acc = [0f64; 2];
    for (w, k) in e.iter().zip(ctx) {
        acc[0] += w / z * k[0];
        acc[1] += w / z * (0.5 * k[0] - k[1]);
    }
    assert!(close(r[[1, 0]], acc[0].tanh()) && close(r[[1, 1]], acc[1].tanh()));
}

fn edge_gate_examples() {
    let edges = vec![(0, 1), (1, 2), (0, 2)];
    let closed = hard_adjacency(3, &edges, &[0.0, 1.0, 1.0], &[1.0, 1.0, 1.0]);
    assert_eq!(closed.row(0).sum(), 0.0);
    assert_eq!(closed[[1, 2]], 1.0);
    let open = hard_adjacency(3, &edges, &[1.0; 3], &[1.0; 3]);
    let mut orig = Array2::zeros((3, 3));
    for &(i, j) in &edges {
        orig[[i, j]] = 1.0;
        orig[[j, i]] = 1.0;
    }
    assert_eq!(open, orig);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rv: Vec<f64> = (0..5).map(|_| rng.random()).collect();
    let all: Vec<(usize, usize)> = (0..5).flat_map(|i| (i + 1..5).map(move |j| (i, j))).filter(|_| rng.random_bool(0.6)).collect();
    let re: Vec<f64> = all.iter().map(|_| rng.random()).collect();
    let p = hard_prune(&all, &rv, &re);
    let want: Vec<(usize, usize)> = all
        .iter()
        .zip(&re)
        .filter(|(&(i, j), &r)| r >= 0.5 && rv[i] >= 0.5 && rv[j] >= 0.5)
        .map(|(e, _)| *e)
        .collect();
    assert_eq!(p.kept_edges, want);
}

/// Tape-level refinement on a small textual graph with one GAT layer.
fn refine_once(n: usize, iterations: usize) -> (Mat, Mat, Mat, Option<Vec<f64>>, Vec<f64>) {
    let d = 2;
    let (mut store, params) = gene_setup(d);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let attn = store.add("attn", LrGroup::Other, Array2::from_shape_fn((1, 2 * d), |_| rng.random_range(-1.0..1.0)));
    let value = store.add("value", LrGroup::Other, Array2::from_shape_fn((d, d), |_| rng.random_range(-1.0..1.0)));
    *store.get_mut(params.node_gate) = Array2::from_shape_fn(store.get(params.node_gate).dim(), |_| rng.random_range(-1.0..1.0));
    let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let edges = (1..n as u32).map(|i| (i - 1, i)).collect();
    let g = build_cmg(&Array2::zeros((0, d)), &x, &SceneGraph::empty(Modality::Visual), &text_graph(n, edges), 0.25).unwrap();
    let st = GateStructure::new(&g, 2);
    let sess = Session::new(&store);
    let t = &sess.tape;
    let gat = [GatLayerVars {
        attn: sess.param(attn),
        value: sess.param(value),
    }];
    let xv = t.leaf(x.clone());
    let h = cmggib::cmg::gat_stack(t, xv, t.leaf(g.message_adjacency()), &gat);
    let vars = params.bind(&sess);
    let config = GeneConfig {
        iterations,
        ..GeneConfig::default()
    };
    let noise = GeneNoise::deterministic(&st, iterations, d);
    let r = refine(t, xv, h, &st, &gat, &[0], &[n - 1], &vars, &noise, &config);
    let rho = r.rho_v.map(|v| t.value(v).iter().copied().collect());
    let out = (
        t.value(h).to_owned(),
        t.value(r.h_refined).to_owned(),
        t.value(r.pooled).to_owned(),
        rho,
        t.value(r.z).iter().copied().collect(),
    );
    out
}

fn refine_examples() {
    let (h, hr, g, rho, _) = refine_once(3, 0);
    assert_eq!(h, hr);
    assert!(rho.is_none());
    let mean = h.mean_axis(ndarray::Axis(0)).unwrap();
    assert!(g.iter().zip(mean.iter()).all(|(a, b)| close(*a, *b)));
    let (.., z1) = refine_once(3, 2);
    let (.., z2) = refine_once(3, 2);
    assert_eq!(z1, z2);
    let (_, hr, g, rho, _) = refine_once(1, 2);
    let rho = rho.unwrap()[0];
    // ρ·h / (ρ + 1e-12)
    for (a, b) in g.iter().zip(hr.iter()) {
        assert!(close(*a, rho * b / (rho + 1e-12)));
    }
}

fn kl_examples() {
    assert_eq!(kl_gaussian(&[0.0; 5], &[1.0; 5]).unwrap(), 0.0);
    assert!(close(kl_gaussian(&[1.0], &[1.0]).unwrap(), 0.5));
    assert!(close(kl_gaussian(&[0.0], &[2.0]).unwrap(), 0.5 * (3.0 - 2.0 * 2f64.ln())));
    assert!((kl_gaussian(&[0.0], &[2.0]).unwrap() - 0.8069).abs() < 1e-4);
}

fn gib_examples() {
    let l = gib_loss(&[0.3, -1.0, 2.0], 1, &[0.5], &[2.0], 0.0).unwrap();
    assert_eq!(l.total, l.ce);
    let u = gib_loss(&[0.0; 23], 4, &[0.0], &[1.0], 0.01).unwrap();
    assert!(close(u.ce, 23f64.ln()) && (u.ce - 3.1355).abs() < 1e-4);
    let ce = -(1f64.exp() / (1f64.exp() + 2f64.exp() + 1.0)).ln();
    let kl = 0.5 * ((0.25 + 0.25 - 1.0 - 2.0 * 0.5f64.ln()) + (1.0 + 4.0 - 1.0 - 2.0 * 2f64.ln()));
    let got = gib_loss(&[1.0, 2.0, 0.0], 0, &[0.5, -1.0], &[0.5, 2.0], 0.01).unwrap();
    assert!(close(got.total, ce + 0.01 * kl));
}

fn codebook_examples() {
    let x = array![[0.0, 1.0], [5.0, 5.0], [-3.0, 2.0]];
    let cb = build_codebook(&x, 3, 2).unwrap();
    let mut got: Vec<Vec<f64>> = cb.centroids.rows().into_iter().map(|r| r.to_vec()).collect();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, vec![vec![-3.0, 2.0], vec![0.0, 1.0], vec![5.0, 5.0]]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let means = [[-3.0, 1.0], [3.0, -2.0]];
    let blobs = Array2::from_shape_fn((100, 2), |(i, k)| means[i % 2][k] + rng.random_range(-0.3..0.3));
    let cb = build_codebook(&blobs, 2, 6).unwrap();
    for m in means {
        assert!(cb.centroids.rows().into_iter().any(|c| ((c[0] - m[0]).powi(2) + (c[1] - m[1]).powi(2)).sqrt() < 0.1));
    }
    assert_eq!(cb, build_codebook(&blobs, 2, 6).unwrap());
}

fn visual_word_examples() {
    let c = array![[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [5.0, 5.0]];
    assert_eq!(assign_visual_words(&array![[5.0, 5.0]], &c), vec![0.0, 0.0, 0.0, 1.0]);
    assert_eq!(assign_visual_words(&array![[1.0, 0.0]], &c), vec![1.0, 0.0, 0.0, 0.0]);
    let c3 = array![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
    let f = array![[0.1, 0.2], [3.0, 0.5], [0.4, 3.9], [1.0, 1.5], [2.5, 2.0]];
    let mut want = vec![0.0; 3];
    for r in f.rows() {
        let d: Vec<f64> = c3.rows().into_iter().map(|c| (&c - &r).mapv(|v| v * v).sum()).collect();
        let best = (0..3).fold(0, |b, k| if d[k] < d[b] { k } else { b });
        want[best] += 1.0;
    }
    assert_eq!(assign_visual_words(&f, &c3), want);
}

fn topic_encoder_examples() {
    let zero = TopicEncoder {
        mu_w: Array2::zeros((2, 2)),
        mu_b: vec![0.0; 2],
        sigma_w: Array2::zeros((2, 2)),
        sigma_b: vec![0.0; 2],
    };
    let s = encode_topics(&array![[1.0, 2.0]], &zero).unwrap();
    assert_eq!((s.mu, s.sigma), (vec![0.0; 2], vec![1.0; 2]));
    let enc = TopicEncoder {
        mu_w: array![[1.0, 2.0], [0.5, -1.0]],
        mu_b: vec![0.0, 0.1],
        sigma_w: Array2::zeros((2, 2)),
        sigma_b: vec![0.0; 2],
    };
    let one = encode_topics(&array![[0.3, 0.7]], &enc).unwrap();
    assert!(close(one.mu[0], 1.7) && close(one.mu[1], 0.15 - 0.7 + 0.1));
    let two = encode_topics(&array![[1.0, 0.0], [1.0, 1.0]], &enc).unwrap();
    assert!(close(two.mu[0], 2.0) && close(two.mu[1], 0.1));
}

fn theta_examples() {
    let st = TopicState {
        mu: vec![0.3, -0.2, 1.0],
        sigma: vec![1.0; 3],
    };
    let flat = sample_theta(&st, &[0.0; 3], &Array2::zeros((3, 3)), &[0.4; 3]).unwrap();
    assert!(flat.iter().all(|t| close(*t, 1.0 / 3.0)));
    let w = array![[1.0, 0.0, 2.0], [0.0, 1.0, 0.0], [1.0, 1.0, 1.0]];
    let a = sample_theta(&st, &[0.0; 3], &w, &[0.0; 3]).unwrap();
    let b = sample_theta(&TopicState { sigma: vec![3.0; 3], ..st }, &[0.0; 3], &w, &[0.0; 3]).unwrap();
    assert_eq!(a, b);
    let zero = TopicState {
        mu: vec![0.0; 3],
        sigma: vec![1.0; 3],
    };
    let t = sample_theta(&zero, &[0.0; 3], &Array2::zeros((3, 3)), &[0.0, 2f64.ln(), 3f64.ln()]).unwrap();
    assert!(close(t[0], 1.0 / 6.0) && close(t[1], 2.0 / 6.0) && close(t[2], 0.5));
}

fn reconstruct_examples() {
    let m = array![[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]];
    let p = reconstruct(&[1.0, 0.0], &m);
    let z = 1f64.exp() + 1.0 + (-1f64).exp();
    assert!(close(p[0], 1f64.exp() / z) && close(p[2], (-1f64).exp() / z));
    assert!(reconstruct(&[0.3, 0.7], &Array2::zeros((2, 3))).iter().all(|x| close(*x, 1.0 / 3.0)));
    let p = reconstruct(&[0.5, 0.5], &m);
    let z = 0.75f64.exp() + 1f64.exp() + (-0.5f64).exp();
    assert!(close(p[0], 0.75f64.exp() / z));
    let ll = reconstruction_loglik(&p, &[2.0, 0.0, 1.0]);
    assert!(close(ll, 2.0 * (0.75 - z.ln()) + (-0.5 - z.ln())));
}

fn lamo_loss_examples() {
    let chi = array![[1.0, 0.0, -1.0], [0.5, 2.0, 0.0]];
    let psi = array![[0.0, 1.0], [1.0, 0.0]];
    let prior = TopicState {
        mu: vec![0.0; 2],
        sigma: vec![1.0; 2],
    };
    let l = lamo_loss(&prior, &[0.5, 0.5], &[1.0, 0.0, 0.0], &[0.0, 0.0], &chi, &psi).unwrap();
    assert_eq!((l.kl, l.rec_i), (0.0, 0.0));
    let st = TopicState {
        mu: vec![0.5, -1.0],
        sigma: vec![0.5, 2.0],
    };
    let l = lamo_loss(&st, &[0.25, 0.75], &[1.0, 2.0, 0.0], &[3.0, 1.0], &chi, &psi).unwrap();
    let kl = 0.5 * ((0.25 + 0.25 - 1.0 - 2.0 * 0.5f64.ln()) + (1.0 + 4.0 - 1.0 - 2.0 * 2f64.ln()));
    let zt = 0.625f64.exp() + 1.5f64.exp() + (-0.25f64).exp();
    let rec_t = -((0.625 - zt.ln()) + 2.0 * (1.5 - zt.ln()));
    let zi = 0.75f64.exp() + 0.25f64.exp();
    let rec_i = -(3.0 * (0.75 - zi.ln()) + (0.25 - zi.ln()));
    assert!(close(l.total, kl + rec_t + rec_i));
}

fn keyword_examples() {
    assert_eq!(top_indices(&[3.0, 1.0, 2.0], 3), vec![0, 2, 1]);
    assert_eq!(top_indices(&[3.0, 1.0, 5.0], 1), vec![2]);
    assert_eq!(argmax(&[0.5, 0.5]), 0);
    let chi = array![[3.0, 1.0, 2.0], [0.0, 9.0, 0.0]];
    let psi = array![[0.0, 1.0], [1.0, 0.0]];
    assert_eq!(top_keywords(&[0.5, 0.5], &chi, &psi, 3).0, vec![0, 2, 1]);
}

fn entity_examples() {
    let spans = [Span::new(0, 1), Span::new(1, 2), Span::new(3, 4)];
    let h = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
    let (s, o) = resolve_entity_reps(&h, &spans, Span::new(3, 4), Span::new(0, 2)).unwrap();
    assert_eq!((s, o), (vec![2.0, 2.0], vec![0.5, 0.5]));
    assert!(matches!(
        resolve_entity_reps(&h, &spans, Span::new(2, 2), Span::new(0, 1)),
        Err(Error::Skip(_))
    ));
}

fn integrate_examples() {
    let z = [0.3, -0.1];
    let (o, _) = integrate_modality(&z, &array![[0.5, 0.25]], &[1.0, 2.0, 3.0, 4.0], 0.5);
    assert_eq!(o, vec![0.5, 0.25]);
    let (o, _) = integrate_modality(&z, &array![[1.0, 0.0], [0.0, 1.0], [3.0, 3.0]], &[0.0; 4], 0.2);
    assert!(close(o[0], 4.0 / 3.0) && close(o[1], 4.0 / 3.0));
    let u = array![[0.0, 1.0], [2f64.ln(), 0.0], [3f64.ln(), -1.0]];
    let (o, a) = integrate_modality(&[0.0, 0.0], &u, &[1.0, 0.0, 0.0, 0.0], 0.0);
    assert!(close(a[0], 1.0 / 6.0) && close(a[1], 2.0 / 6.0) && close(a[2], 0.5));
    assert!(close(o[1], 1.0 / 6.0 - 0.5));
}

fn classify_examples() {
    assert!(classify(&[0.0; 23]).iter().all(|p| close(*p, 1.0 / 23.0)));
    assert!(close(classify(&[0.3, -2.0, 1.1, 4.0]).iter().sum::<f64>(), 1.0));
    let p = classify(&[0.0, 3f64.ln()]);
    assert!(close(p[0], 0.25) && close(p[1], 0.75));
    assert_eq!(predict(&[0.1, 0.45, 0.45]), 1);
}

fn total_loss_examples() {
    let none = LossWeights { eta1: 0.0, eta2: 0.0 };
    assert_eq!(total_loss(0.7, 2.0, 3.0, none).unwrap(), 0.7);
    assert_eq!(total_loss(1.0, 2.0, 3.0, LossWeights::default()).unwrap(), 6.0);
    let w = LossWeights::default();
    assert_eq!((w.eta1, w.eta2), (1.0, 1.0));
    assert!(close(total_loss(0.4, 1.3, 7.9, w).unwrap(), 0.4 + 1.3 + 7.9));
}

fn schedule_examples() {
    let mut cfg = desk_config();
    cfg.synth_instances = 50;
    let corpus = synth_corpus(&cfg).unwrap();
    let mut model = Model::build(&cfg, RelationSet::default(), &corpus.train, &corpus.dev).unwrap();
    let train = model.prepare_all(&corpus.train).unwrap();
    let dev = model.prepare_all(&corpus.dev).unwrap();

    let before = model.store.clone();
    let mut logs = vec![];
    let none = Schedule::new(vec![(Stage::GeneWarmup, 0), (Stage::LamoPretrain, 0), (Stage::Joint, 0)]).unwrap();
    run_schedule(&mut model, &train, &dev, &none, &mut logs).unwrap();
    assert!(logs.is_empty() && model.store == before);

    let bad = Schedule::new(vec![(Stage::LamoPretrain, 1), (Stage::GeneWarmup, 1)]);
    assert!(matches!(bad, Err(Error::Config(_))));

    let three = Schedule::new(vec![(Stage::GeneWarmup, 3)]).unwrap();
    run_schedule(&mut model, &train, &dev, &three, &mut logs).unwrap();
    let gib: Vec<f64> = logs.iter().filter(|l| l.epoch > 0).map(|l| l.train.gib).collect();
    assert_eq!(gib.len(), 3);
    assert!(gib[2] < gib[0], "{gib:?}");
}

fn corpus_examples() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let rel = RelationSet::default();
    assert!(load_corpus(&empty, &rel).unwrap().is_empty());
    assert_eq!(cmggib::corpus::summarize(&[]).instances, 0);
    let mut cfg = desk_config();
    cfg.synth_instances = 1;
    let inst = synth_corpus(&cfg).unwrap().train.remove(0);
    let mut v = inst.to_json();
    v["token"] = json!(["a", "b", "c", "d"]);
    v["h"]["pos"] = json!([5, 9]);
    assert!(parse_corpus(&v.to_string(), &rel).is_err());
}

fn synth_examples() {
    let cfg = desk_config();
    let a = synth_corpus(&cfg).unwrap();
    assert_eq!(a, synth_corpus(&cfg).unwrap());
    let provider = build_provider(&cfg);
    let acc = oracle_accuracy(&a, &provider);
    assert!(acc >= 0.95, "{acc}");
    let chance = oracle_accuracy(&synth_corpus(&Config { plant_strength: 0.0, ..cfg.clone() }).unwrap(), &provider);
    assert!((chance - 0.25).abs() < 0.1, "{chance}");
}

fn metrics_examples() {
    let g = [1, 2, 3, 1];
    let m = compute_metrics(&g, &g, 4, Some(0)).unwrap();
    assert_eq!((m.accuracy, m.precision, m.recall, m.f1), (1.0, 1.0, 1.0, 1.0));
    let m = compute_metrics(&[0, 0, 0], &[1, 2, 3], 4, Some(0)).unwrap();
    assert_eq!((m.recall, m.f1), (0.0, 0.0));
    let m = compute_metrics(&[1, 0, 1, 0], &[1, 2, 0, 0], 3, Some(0)).unwrap();
    assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
}

fn relevance_examples() {
    let e = vec![vec![0.6, 0.8]];
    assert!(close(relevance_from_embeddings(&e, &e).unwrap(), 1.0));
    let a = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let b = vec![vec![0.0, 0.0, 1.0]];
    assert_eq!(relevance_from_embeddings(&a, &b), Some(0.0));
    let s = 0.5f64.sqrt();
    let v = vec![vec![1.0, 0.0], vec![s, s]];
    let t = vec![vec![0.0, 1.0], vec![-1.0, 0.0]];
    let mut sum = 0.0;
    for x in &v {
        for y in &t {
            let c: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            sum += c.max(0.0);
        }
    }
    assert!(close(relevance_from_embeddings(&v, &t).unwrap(), sum / 4.0));
}

fn entropy_examples() {
    assert!((entropy(&[1.0 / 23.0; 23]) - 3.1355).abs() < 1e-4);
    assert_eq!(entropy(&[0.0, 1.0]), 0.0);
    let run = planted_run();
    let train = predict_all(&run.model, &run.train).unwrap();
    let test = predict_all(&run.model, &run.test).unwrap();
    let heads = EntropyHeads::fit(&run.model, &train).unwrap();
    let s = heads.task_entropy(FeatureStage::S, &test).unwrap();
    let h = heads.task_entropy(FeatureStage::H, &test).unwrap();
    assert!(s <= h, "s {s} h {h}");
}

fn trajectory_examples() {
    let run = planted_run();
    let first = &run.logs[0];
    assert!(close(first.node_keep, 0.5) && close(first.edge_keep, 0.5));
    let last = run.logs.last().unwrap();
    assert!(last.node_keep < first.node_keep, "{} vs {}", last.node_keep, first.node_keep);
    assert!(last.dev_f1 > first.dev_f1);

    let mut open = Model::build(&desk_config(), RelationSet::default(), &run.corpus.train, &[]).unwrap();
    let g = open.params.gene.clone();
    for id in [g.node_gate, g.edge_gate] {
        open.store.get_mut(id).fill(0.0);
    }
    for id in [g.node_gate_bias, g.edge_gate_bias] {
        open.store.get_mut(id).fill(50.0);
    }
    let dev = open.prepare_all(&run.corpus.dev).unwrap();
    let ev = evaluate(&open, &dev).unwrap();
    assert!(close(ev.node_keep, 1.0) && close(ev.edge_keep, 1.0));
}

/// Every check, by name. Each panics on failure.
pub fn all() -> Vec<(&'static str, fn())> {
    vec![
        ("parse_scene_graph", parse_examples),
        ("embed_visual_node", visual_embedding_examples),
        ("embed_textual_nodes", textual_embedding_examples),
        ("validate", validate_examples),
        ("cosine", cosine_examples),
        ("build_cmg", cmg_examples),
        ("gat_forward", gat_examples),
        ("concrete_sample", concrete_examples),
        ("node_gate", gate_examples),
        ("edge_gate", edge_gate_examples),
        ("refine", refine_examples),
        ("kl_gaussian", kl_examples),
        ("gib_loss", gib_examples),
        ("build_codebook", codebook_examples),
        ("assign_visual_words", visual_word_examples),
        ("encode_topics", topic_encoder_examples),
        ("sample_theta", theta_examples),
        ("reconstruct", reconstruct_examples),
        ("lamo_loss", lamo_loss_examples),
        ("top_keywords", keyword_examples),
        ("resolve_entity_reps", entity_examples),
        ("integrate_topics", integrate_examples),
        ("classify", classify_examples),
        ("total_loss", total_loss_examples),
        ("run_schedule", schedule_examples),
        ("load_corpus", corpus_examples),
        ("synth_corpus", synth_examples),
        ("compute_metrics", metrics_examples),
        ("relevance", relevance_examples),
        ("task_entropy", entropy_examples),
        ("trajectory_report", trajectory_examples),
    ]
}

#[allow(unused)]
fn unused(_: Config, _: fn() -> super::Trained) {
    let _ = train_pipeline;
}
