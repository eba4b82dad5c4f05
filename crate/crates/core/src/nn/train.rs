//! Mini-batch AdamW training with best-validation checkpointing.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{FrozenMaps, Model, Normalization, Prepared};
use super::ModelConfig;
use crate::data::{DatasetMeta, DayDataset, Frame};
use crate::error::{Error, Result};
use crate::pixel_fit::ParameterMaps;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
/// Final learning rate as a fraction of the initial one (cosine schedule).
const LR_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_data: f64,
    pub l_physics: f64,
    pub l_biofouling: f64,
    pub l_total: f64,
    /// NaN when no validation days were given.
    pub val_mae: f64,
    /// Frames whose mean confidence hit the floor.
    pub floored_frames: usize,
    /// MAE on the monitor days, which never influence training; NaN
    /// without monitor days.
    pub monitor_mae: f64,
}

/// Bitwise comparison, so records with NaN scores compare equal to their
/// exact copies.
impl PartialEq for EpochRecord {
    fn eq(&self, o: &Self) -> bool {
        let f =
            |r: &Self| [r.l_data, r.l_physics, r.l_biofouling, r.l_total, r.val_mae, r.monitor_mae].map(f64::to_bits);
        self.epoch == o.epoch && self.floored_frames == o.floored_frames && f(self) == f(o)
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    /// Weights of the best validation epoch (last epoch without validation).
    pub model: Model<f64>,
    pub history: Vec<EpochRecord>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

impl Model<f64> {
    /// DO predictions for a batch of frames; evaluation runs in parallel.
    pub fn predict(&self, frames: &[Frame]) -> Result<Vec<f64>> {
        frames.par_iter().map(|f| self.forward(f).map(|o| o.do_pred)).collect()
    }

    pub fn predict_day(&self, day: &DayDataset) -> Result<Vec<f64>> {
        self.predict(&day.frames)
    }
}

/// Which network variant to train.
#[derive(Debug, Clone, Copy)]
pub enum TrainKind<'a> {
    /// End-to-end physics-informed.
    Pinn,
    /// Data and biofouling terms only.
    Plain,
    /// Frozen per-pixel fits replace the learned maps.
    Pgnn(&'a ParameterMaps<f64>),
}

/// End-to-end physics-informed training.
pub fn train(
    cfg: &ModelConfig,
    meta: &DatasetMeta,
    train_days: &[&DayDataset],
    val_days: &[&DayDataset],
) -> Result<TrainedModel> {
    train_with(TrainKind::Pinn, cfg, meta, train_days, val_days, &[])
}

/// Same network trained on the data and biofouling terms only.
pub fn train_plain(
    cfg: &ModelConfig,
    meta: &DatasetMeta,
    train_days: &[&DayDataset],
    val_days: &[&DayDataset],
) -> Result<TrainedModel> {
    train_with(TrainKind::Plain, cfg, meta, train_days, val_days, &[])
}

/// PGNN: frozen per-pixel fits replace the learned maps.
pub fn train_pgnn(
    cfg: &ModelConfig,
    meta: &DatasetMeta,
    train_days: &[&DayDataset],
    val_days: &[&DayDataset],
    maps: &ParameterMaps<f64>,
) -> Result<TrainedModel> {
    train_with(TrainKind::Pgnn(maps), cfg, meta, train_days, val_days, &[])
}

/// Training with optional monitor days scored after every epoch. Monitor
/// scores are recorded only; they never feed back into the weights or the
/// checkpoint choice.
pub fn train_with(
    kind: TrainKind<'_>,
    cfg: &ModelConfig,
    meta: &DatasetMeta,
    train_days: &[&DayDataset],
    val_days: &[&DayDataset],
    monitor_days: &[&DayDataset],
) -> Result<TrainedModel> {
    let norm = Normalization::from_training(meta, train_days)?;
    let (frozen, physics) = match kind {
        TrainKind::Pinn => (None, true),
        TrainKind::Plain => (None, false),
        TrainKind::Pgnn(maps) => {
            if maps.width != meta.width || maps.height != meta.height {
                return Err(Error::Dimension(format!(
                    "parameter maps are {}x{}, dataset grid is {}x{}",
                    maps.width, maps.height, meta.width, meta.height
                )));
            }
            (Some(FrozenMaps::from_maps(maps)), true)
        }
    };
    let model = Model::new(cfg.clone(), norm, frozen)?;
    fit(model, train_days, val_days, monitor_days, physics)
}

fn check_disjoint(train: &[&DayDataset], val: &[&DayDataset]) -> Result<()> {
    let t: BTreeSet<usize> = train.iter().map(|d| d.day_index).collect();
    if let Some(d) = val.iter().find(|d| t.contains(&d.day_index)) {
        return Err(Error::Precondition(format!("day {} is used by two roles of the same run", d.day_index)));
    }
    Ok(())
}

/// Pixel permutations for no flip, horizontal, vertical and both.
fn flip_perms(w: usize, h: usize) -> [Arc<Vec<usize>>; 4] {
    std::array::from_fn(|k| {
        let (fx, fy) = (k & 1 == 1, k & 2 == 2);
        let mut idx = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let sx = if fx { w - 1 - x } else { x };
                let sy = if fy { h - 1 - y } else { y };
                idx.push(sy * w + sx);
            }
        }
        Arc::new(idx)
    })
}

struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    fn new(params: &[Vec<f64>]) -> Self {
        let z: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { m: z.clone(), v: z, t: 0 }
    }

    fn step(&mut self, model: &mut Model<f64>, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let wd = model.config.weight_decay;
        for (k, spec) in model.specs.iter().enumerate() {
            let lr_k = lr * spec.lr_scale;
            let (p, g) = (&mut model.params[k], &grads[k]);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                if spec.decay {
                    p[i] -= lr * wd * p[i];
                }
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr_k * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn mae(model: &Model<f64>, days: &[&DayDataset]) -> Result<f64> {
    let frames: Vec<&Frame> = days.iter().flat_map(|d| &d.frames).collect();
    if frames.is_empty() {
        return Ok(f64::NAN);
    }
    let errs: Vec<f64> =
        frames.par_iter().map(|f| model.forward(f).map(|o| (o.do_pred - f.do_gt).abs())).collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

fn fit(
    mut model: Model<f64>,
    train_days: &[&DayDataset],
    val_days: &[&DayDataset],
    monitor_days: &[&DayDataset],
    physics: bool,
) -> Result<TrainedModel> {
    check_disjoint(train_days, val_days)?;
    check_disjoint(train_days, monitor_days)?;
    check_disjoint(val_days, monitor_days)?;
    let cfg = model.config.clone();
    let mut prepared: Vec<Prepared<f64>> = Vec::new();
    for day in train_days {
        day.validate()?;
        for f in &day.frames {
            prepared.push(model.prepare(f, Some(day.biofouling_score), None)?);
        }
    }
    if prepared.is_empty() {
        return Err(Error::Precondition("training days contain no frames".into()));
    }
    let perms = flip_perms(model.norm.width, model.norm.height);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0x7a1);
    let mut opt = AdamW::new(&model.params);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Vec<f64>>)> = None;
    let n = prepared.len();

    for epoch in 1..=cfg.epochs {
        let progress = (epoch - 1) as f64 / cfg.epochs.max(2).saturating_sub(1) as f64;
        let lr = cfg.lr * (LR_FLOOR + (1.0 - LR_FLOOR) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut floored = 0;
        for batch in order.chunks(cfg.batch_size) {
            let flips: Vec<usize> =
                batch.iter().map(|_| if cfg.augment { rng.random_range(0..4) } else { 0 }).collect();
            let results: Vec<_> = batch
                .par_iter()
                .zip(&flips)
                .map(|(&i, &fl)| {
                    if fl == 0 {
                        model.loss_and_grads(&prepared[i], None, physics)
                    } else {
                        let inp = prepared[i].permuted(&perms[fl]);
                        model.loss_and_grads(&inp, Some(&perms[fl]), physics)
                    }
                })
                .collect();
            let mut grads: Vec<Vec<f64>> = model.params.iter().map(|p| vec![0.0; p.len()]).collect();
            for (br, _, g) in &results {
                if !br.l_total.is_finite() {
                    return Err(diverged(epoch, cfg.lr, "loss"));
                }
                sums[0] += br.l_data;
                sums[1] += br.l_physics;
                sums[2] += br.l_biofouling;
                sums[3] += br.l_total;
                floored += br.confidence_floored as usize;
                for (acc, gk) in grads.iter_mut().zip(g) {
                    for (a, &x) in acc.iter_mut().zip(gk) {
                        *a += x;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                *g *= inv;
                if !g.is_finite() {
                    return Err(diverged(epoch, cfg.lr, "gradient"));
                }
            }
            opt.step(&mut model, &grads, lr);
        }
        let val_mae = mae(&model, val_days)?;
        let monitor_mae = mae(&model, monitor_days)?;
        let nf = n as f64;
        let rec = EpochRecord {
            epoch,
            l_data: sums[0] / nf,
            l_physics: sums[1] / nf,
            l_biofouling: sums[2] / nf,
            l_total: sums[3] / nf,
            val_mae,
            floored_frames: floored,
            monitor_mae,
        };
        log::info!(
            "epoch {epoch}: total {:.5} data {:.5} physics {:.5} bio {:.5} val_mae {:.3}",
            rec.l_total,
            rec.l_data,
            rec.l_physics,
            rec.l_biofouling,
            rec.val_mae
        );
        history.push(rec);
        let better = match &best {
            None => true,
            Some((b, _, _)) => val_mae.is_finite() && val_mae < *b,
        };
        if better && (val_mae.is_finite() || val_days.is_empty()) {
            best = Some((val_mae, epoch, model.params.clone()));
        }
    }
    let (best_val_mae, best_epoch) = match best {
        Some((v, e, params)) if !val_days.is_empty() => {
            model.params = params;
            (v, e)
        }
        _ => (f64::NAN, cfg.epochs),
    };
    Ok(TrainedModel { model, history, best_epoch, best_val_mae })
}

fn diverged(epoch: usize, lr: f64, what: &str) -> Error {
    Error::Diverged { epoch, detail: format!("non-finite {what} (lr {lr:e}); lower the learning rate") }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Backbone;
    use crate::sim::{simulate, SimConfig};

    fn tiny() -> (crate::data::Dataset, ModelConfig) {
        let mut sc = SimConfig::reduced();
        sc.width = 16;
        sc.height = 16;
        sc.days = 3;
        let ds = simulate(&sc).unwrap();
        let cfg = ModelConfig { embed_dim: 16, epochs: 5, ..Default::default() };
        (ds, cfg)
    }

    #[test]
    fn tiny_run_decreases_loss() {
        let (ds, cfg) = tiny();
        for bb in [Backbone::ConvSmall, Backbone::AttentionSmall] {
            let cfg = ModelConfig { backbone: bb, patch: 4, heads_attn: 2, ..cfg.clone() };
            let t = train(&cfg, &ds.meta, &[&ds.days[0]], &[]).unwrap();
            let drops = t.history.windows(2).filter(|w| w[1].l_total < w[0].l_total).count();
            assert!(drops >= 3, "{bb:?}: {:?}", t.history.iter().map(|r| r.l_total).collect::<Vec<_>>());
            assert!(t.history.last().unwrap().l_physics < t.history[0].l_physics);
        }
    }

    #[test]
    fn training_is_reproducible_and_seed_sensitive() {
        let (ds, cfg) = tiny();
        let cfg = ModelConfig { epochs: 2, ..cfg };
        let a = train(&cfg, &ds.meta, &[&ds.days[0]], &[&ds.days[1]]).unwrap();
        let b = train(&cfg, &ds.meta, &[&ds.days[0]], &[&ds.days[1]]).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert_eq!(a.history, b.history);
        let c = train(&ModelConfig { seed: 9, ..cfg }, &ds.meta, &[&ds.days[0]], &[&ds.days[1]]).unwrap();
        assert_ne!(a.model.params, c.model.params);
        assert_eq!(a.model.n_params(), c.model.n_params());
    }

    #[test]
    fn zero_physics_weight_matches_plain_training() {
        let (ds, cfg) = tiny();
        let cfg = ModelConfig { lambda_physics: 0.0, epochs: 3, ..cfg };
        let a = train(&cfg, &ds.meta, &[&ds.days[0]], &[]).unwrap();
        let b = train_plain(&cfg, &ds.meta, &[&ds.days[0]], &[]).unwrap();
        assert_eq!(a.model.params, b.model.params);
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.l_total.to_bits(), y.l_total.to_bits());
        }
    }

    #[test]
    fn overlapping_days_are_rejected() {
        let (ds, cfg) = tiny();
        let err = train(&cfg, &ds.meta, &[&ds.days[0]], &[&ds.days[0]]).unwrap_err();
        assert!(matches!(err, Error::Precondition(_)));
    }

    #[test]
    fn huge_learning_rate_aborts() {
        let (ds, cfg) = tiny();
        let cfg = ModelConfig { lr: 1e12, epochs: 5, ..cfg };
        match train(&cfg, &ds.meta, &[&ds.days[0]], &[]) {
            Err(Error::Diverged { detail, .. }) => assert!(detail.contains("learning rate")),
            other => panic!("expected divergence, got {:?}", other.map(|t| t.history)),
        }
    }

    #[test]
    fn best_validation_epoch_is_kept() {
        let (ds, cfg) = tiny();
        let t = train(&ModelConfig { epochs: 4, ..cfg }, &ds.meta, &[&ds.days[0]], &[&ds.days[1]]).unwrap();
        let min = t.history.iter().map(|r| r.val_mae).fold(f64::INFINITY, f64::min);
        assert_eq!(t.best_val_mae, min);
        let again = mae(&t.model, &[&ds.days[1]]).unwrap();
        assert!((again - min).abs() < 1e-9);
    }
}
