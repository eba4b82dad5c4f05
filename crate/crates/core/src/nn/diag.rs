//! Gradient verification and diagnostic maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::model::{Model, Normalization};
use super::{Backbone, ModelConfig};
use crate::data::{Frame, RED};
use crate::error::{Error, Result};

/// Denominator floor of the relative error. Entries whose true gradient
/// vanishes (e.g. key biases, which softmax ignores) leave only round-off
/// in the difference quotient, so they are compared in absolute terms.
const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub max_rel_err: f64,
    pub n_params: usize,
    /// Parameter tensor holding the worst entry.
    pub worst: String,
}

/// Down-scaled copy of `cfg` sized for exhaustive finite differences.
fn reduced_config(cfg: &ModelConfig, side: usize) -> ModelConfig {
    let heads = cfg.heads_attn.clamp(1, 2);
    let mut out = ModelConfig {
        embed_dim: 4 * heads,
        heads_attn: heads,
        layers: cfg.layers.clamp(1, 2),
        augment: false,
        ..cfg.clone()
    };
    if cfg.backbone == Backbone::AttentionSmall {
        out.patch = if side.is_multiple_of(4) { 4 } else { side };
    }
    out
}

/// Normalization for a single frame with the whole grid treated as film.
fn frame_norm(frame: &Frame) -> Normalization {
    let p = frame.width * frame.height;
    let mean = (0..p).map(|i| frame.value(i, RED)).sum::<f64>() / p.max(1) as f64;
    Normalization {
        width: frame.width,
        height: frame.height,
        channels: frame.channels,
        s_ref: if mean > 0.0 { mean } else { 1.0 },
        k_ref: 0.01,
        do_max: frame.do_gt.max(1.0),
        bio_min: 0.0,
        bio_max: 1.0,
        film_mask: vec![true; p],
    }
}

/// Randomly initialized down-scaled model for `frame`; every tensor,
/// including those that start at zero in training, gets random entries.
pub fn check_model(cfg: &ModelConfig, frame: &Frame) -> Result<Model<f64>> {
    let rc = reduced_config(cfg, frame.width.min(frame.height));
    let mut m = Model::<f64>::new(rc, frame_norm(frame), None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6ad);
    let d = Normal::new(0.0, 0.3).expect("valid std");
    for p in m.params.iter_mut().flatten() {
        *p += d.sample(&mut rng);
    }
    Ok(m)
}

/// Max relative error between tape gradients of `l_total` and central
/// differences, over every parameter of a down-scaled model.
pub fn gradient_check(cfg: &ModelConfig, frame: &Frame, epsilon: f64) -> Result<GradientCheck> {
    let m = check_model(cfg, frame)?;
    gradient_check_model(&m, frame, 0.5, epsilon)
}

/// Same check on an explicit model.
pub fn gradient_check_model(model: &Model<f64>, frame: &Frame, bio_score: f64, epsilon: f64) -> Result<GradientCheck> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::Precondition(format!("epsilon {epsilon} outside [1e-7, 1e-3]")));
    }
    let inp = model.prepare(frame, Some(bio_score), None)?;
    let (_, _, grads) = model.loss_and_grads(&inp, None, true);
    let mut probe = model.clone();
    let mut worst = (0.0f64, String::new());
    for k in 0..model.params.len() {
        for i in 0..model.params[k].len() {
            let orig = model.params[k][i];
            let mut at = |d: f64| {
                probe.params[k][i] = orig + d;
                probe.loss(&inp, true)
            };
            // fourth-order central stencil
            let (p1, m1, p2, m2) = (at(epsilon), at(-epsilon), at(2.0 * epsilon), at(-2.0 * epsilon));
            probe.params[k][i] = orig;
            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * epsilon);
            let a = grads[k][i];
            if !(fd.is_finite() && a.is_finite()) {
                return Ok(GradientCheck {
                    max_rel_err: f64::INFINITY,
                    n_params: model.n_params(),
                    worst: model.specs[k].name.clone(),
                });
            }
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            if rel > worst.0 {
                worst = (rel, model.specs[k].name.clone());
            }
        }
    }
    Ok(GradientCheck { max_rel_err: worst.0, n_params: model.n_params(), worst: worst.1 })
}

/// Per-pixel physics residual `i0_hat/I − 1 − k_hat·DO` of the frame; NaN
/// where the pixel is masked (off film, non-positive intensity, invalid map).
pub fn residual_map(model: &Model<f64>, frame: &Frame) -> Result<Vec<f64>> {
    let out = model.forward(frame)?;
    Ok(residuals_from(&out.sv_maps, &out.physics_mask, frame))
}

/// Residual, attention and confidence maps of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticMaps {
    pub width: usize,
    pub height: usize,
    /// NaN where the pixel is masked.
    pub residual: Vec<f64>,
    pub attention: Vec<f64>,
    pub confidence: Vec<f64>,
    pub physics_mask: Vec<bool>,
}

pub fn diagnostic_maps(model: &Model<f64>, frame: &Frame) -> Result<DiagnosticMaps> {
    let out = model.forward(frame)?;
    Ok(DiagnosticMaps {
        width: out.width,
        height: out.height,
        residual: residuals_from(&out.sv_maps, &out.physics_mask, frame),
        attention: out.attention,
        confidence: out.confidence,
        physics_mask: out.physics_mask,
    })
}

pub(crate) fn residuals_from(sv: &[(f64, f64)], mask: &[bool], frame: &Frame) -> Vec<f64> {
    sv.iter()
        .zip(mask)
        .enumerate()
        .map(|(p, (&(i0, k), &m))| {
            let i = frame.value(p, RED);
            if m && i > 0.0 {
                i0 / i - 1.0 - k * frame.do_gt
            } else {
                f64::NAN
            }
        })
        .collect()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share the average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 3 {
        return Err(Error::Precondition(format!(
            "spearman needs two equal-length series of >= 3 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::Precondition("spearman input contains non-finite values".into()));
    }
    crate::stats::pearson(&ranks(a), &ranks(b))
}
