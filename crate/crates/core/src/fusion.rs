//! Topic-feature integration, the relation classifier and the joint loss.

use crate::autograd::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_init, xavier, LrGroup, ParamId, ParamStore, Session};
use crate::sg::Span;
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Rows of `h` whose textual span lies inside `entity`.
pub fn entity_rows(textual_spans: &[Span], entity: Span) -> Result<Vec<usize>> {
    if entity.is_empty() {
        return Err(Error::Skip(format!(
            "empty entity span [{}, {})",
            entity.start, entity.end
        )));
    }
    let rows: Vec<usize> = textual_spans
        .iter()
        .enumerate()
        .filter(|(_, s)| entity.contains(s))
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(Error::Skip(format!(
            "entity span [{}, {}) covers no textual node",
            entity.start, entity.end
        )));
    }
    Ok(rows)
}

fn mean_of_rows(h: &Mat, rows: &[usize]) -> Vec<f64> {
    let mut out = vec![0.0; h.ncols()];
    for &r in rows {
        out.iter_mut().zip(h.row(r)).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= rows.len() as f64);
    out
}

/// `(h_s, h_o)`: mean of the textual-node rows covered by each entity span.
/// Textual nodes occupy the first `textual_spans.len()` rows of `h`.
pub fn resolve_entity_reps(
    h: &Mat,
    textual_spans: &[Span],
    subject: Span,
    object: Span,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let s = entity_rows(textual_spans, subject)?;
    let o = entity_rows(textual_spans, object)?;
    Ok((mean_of_rows(h, &s), mean_of_rows(h, &o)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    /// Keyword attention over `[u_i; z]`, one per modality.
    pub text_attn: ParamId,
    pub text_attn_bias: ParamId,
    pub visual_attn: ParamId,
    pub visual_attn_bias: ParamId,
    /// `C × (d_z + 2d)`.
    pub classifier: ParamId,
    pub classifier_bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub text_attn: Var,
    pub text_attn_bias: Var,
    pub visual_attn: Var,
    pub visual_attn_bias: Var,
    pub classifier: Var,
    pub classifier_bias: Var,
}

impl FusionParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        dim: usize,
        z_dim: usize,
        classes: usize,
    ) -> Self {
        let o = LrGroup::Other;
        FusionParams {
            text_attn: store.add("fusion.text_attn", o, normal_init(rng, 1, dim + z_dim, 0.1)),
            text_attn_bias: store.add("fusion.text_attn_bias", o, Array2::zeros((1, 1))),
            visual_attn: store.add("fusion.visual_attn", o, normal_init(rng, 1, dim + z_dim, 0.1)),
            visual_attn_bias: store.add("fusion.visual_attn_bias", o, Array2::zeros((1, 1))),
            classifier: store.add("fusion.classifier", o, xavier(rng, classes, z_dim + 2 * dim)),
            classifier_bias: store.add("fusion.classifier_bias", o, Array2::zeros((1, classes))),
        }
    }

    pub fn bind(&self, s: &Session) -> FusionVars {
        FusionVars {
            text_attn: s.param(self.text_attn),
            text_attn_bias: s.param(self.text_attn_bias),
            visual_attn: s.param(self.visual_attn),
            visual_attn_bias: s.param(self.visual_attn_bias),
            classifier: s.param(self.classifier),
            classifier_bias: s.param(self.classifier_bias),
        }
    }
}

/// `(o, α)` for one modality. `u` is `L×d`; with no keywords `o` is zero
/// and `α` is `None`.
pub fn keyword_summary_tape(tape: &Tape, z: Var, u: &Mat, w: Var, b: Var) -> (Var, Option<Var>) {
    let d = u.ncols();
    if u.nrows() == 0 {
        log::debug!("no keywords for this modality; topic summary is zero");
        return (tape.leaf(Array2::zeros((1, d))), None);
    }
    let uv = tape.leaf(u.clone());
    let w_u = tape.slice_cols(w, 0, d);
    let w_z = tape.slice_cols(w, d, tape.shape(w).1);
    // scores as a 1×L row
    let scores = tape.add(tape.matmul_nt(w_u, uv), tape.add(tape.matmul_nt(z, w_z), b));
    let alpha = tape.softmax_rows(scores);
    (tape.matmul(alpha, uv), Some(alpha))
}

#[derive(Clone, Copy, Debug)]
pub struct Integrated {
    pub s: Var,
    pub text_alpha: Option<Var>,
    pub visual_alpha: Option<Var>,
}

/// `s = [z; o^T; o^I]`.
pub fn integrate_topics_tape(tape: &Tape, z: Var, u_text: &Mat, u_visual: &Mat, vars: &FusionVars) -> Integrated {
    let (o_t, a_t) = keyword_summary_tape(tape, z, u_text, vars.text_attn, vars.text_attn_bias);
    let (o_i, a_i) = keyword_summary_tape(tape, z, u_visual, vars.visual_attn, vars.visual_attn_bias);
    Integrated {
        s: tape.concat_cols(&[z, o_t, o_i]),
        text_alpha: a_t,
        visual_alpha: a_i,
    }
}

pub fn classify_tape(tape: &Tape, s: Var, vars: &FusionVars) -> Var {
    tape.add(tape.matmul_nt(s, vars.classifier), vars.classifier_bias)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Plain-value keyword attention: `α = softmax(w·[u_i; z] + b)`,
/// `o = Σ α_i u_i`.
pub fn integrate_modality(z: &[f64], u: &Mat, w: &[f64], b: f64) -> (Vec<f64>, Vec<f64>) {
    let d = u.ncols();
    if u.nrows() == 0 {
        return (vec![0.0; d], Vec::new());
    }
    let scores: Vec<f64> = u
        .rows()
        .into_iter()
        .map(|row| {
            let su: f64 = row.iter().zip(&w[..d]).map(|(a, b)| a * b).sum();
            let sz: f64 = z.iter().zip(&w[d..]).map(|(a, b)| a * b).sum();
            su + sz + b
        })
        .collect();
    let alpha = softmax(&scores);
    let mut o = vec![0.0; d];
    for (a, row) in alpha.iter().zip(u.rows()) {
        o.iter_mut().zip(row).for_each(|(o, x)| *o += a * x);
    }
    (o, alpha)
}

/// Softmax over class logits.
pub fn classify(logits: &[f64]) -> Vec<f64> {
    softmax(logits)
}

/// Argmax with ties to the lowest label index.
pub fn predict(probs: &[f64]) -> usize {
    crate::lamo::argmax(probs)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub eta1: f64,
    pub eta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { eta1: 1.0, eta2: 1.0 }
    }
}

fn check_finite(component: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            component: component.to_string(),
            value,
        })
    }
}

/// `L = L_CE + η₁·L_GIB + η₂·L_LAMO`.
pub fn total_loss(ce: f64, gib: f64, lamo: f64, w: LossWeights) -> Result<f64> {
    check_finite("ce", ce)?;
    check_finite("gib", gib)?;
    check_finite("lamo", lamo)?;
    Ok(ce + w.eta1 * gib + w.eta2 * lamo)
}
