//! Deep ensembles: seeded members, mean/spread aggregation, uncertainty
//! calibration checks and rejection curves.

use std::io::Write;

use rayon::prelude::*;

use crate::data::{DatasetMeta, DayDataset, Frame};
use crate::error::{Error, Result};
use crate::nn::{train, ModelConfig, TrainedModel};
use crate::stats;

pub const DEFAULT_SIZE: usize = 3;

/// Largest rejection fraction accepted by [`rejection_curve`].
pub const MAX_REJECTION: f64 = 0.95;

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub members: Vec<TrainedModel>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionWithUncertainty {
    pub mean: f64,
    /// Population standard deviation over members.
    pub std: f64,
    pub member_preds: Vec<f64>,
}

/// How the single "best member" is picked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemberSelection {
    /// Lowest validation MAE; the only choice available in deployment.
    Validation,
    /// Lowest test MAE, reproducing best-case reporting. Leaks test labels.
    OracleTest,
}

/// Seed of member `i`, a fixed function of the base seed.
pub fn member_seed(base_seed: u64, i: usize) -> u64 {
    let mut z = base_seed ^ (i as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Trains `size` PINN members whose configs differ only in the seed.
pub fn train_ensemble(
    cfg: &ModelConfig,
    size: usize,
    base_seed: u64,
    meta: &DatasetMeta,
    train_days: &[&DayDataset],
    val_days: &[&DayDataset],
) -> Result<Ensemble> {
    if size < 2 {
        return Err(Error::Precondition(format!("an ensemble needs at least 2 members, got {size}")));
    }
    let seeds: Vec<u64> = (0..size).map(|i| member_seed(base_seed, i)).collect();
    train_members(&seeds, |seed| train(&ModelConfig { seed, ..cfg.clone() }, meta, train_days, val_days))
}

/// Trains one member per seed with `fit`; seeds may repeat.
pub fn train_members<F>(seeds: &[u64], fit: F) -> Result<Ensemble>
where
    F: Fn(u64) -> Result<TrainedModel> + Sync,
{
    if seeds.len() < 2 {
        return Err(Error::Precondition(format!("an ensemble needs at least 2 members, got {}", seeds.len())));
    }
    let members = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &s)| fit(s).map_err(|e| Error::Member { member: i, source: Box::new(e) }))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { members, seeds: seeds.to_vec() })
}

/// Mean and population std of member predictions. Values are summed in
/// sorted order so the result does not depend on member order.
pub fn aggregate(member_preds: &[f64]) -> PredictionWithUncertainty {
    let mut s = member_preds.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = s.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    let std = (dev.iter().sum::<f64>() / n).sqrt();
    PredictionWithUncertainty { mean, std, member_preds: member_preds.to_vec() }
}

impl Ensemble {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn predict(&self, frame: &Frame) -> Result<PredictionWithUncertainty> {
        let preds =
            self.members.iter().map(|m| m.model.forward(frame).map(|o| o.do_pred)).collect::<Result<Vec<_>>>()?;
        Ok(aggregate(&preds))
    }

    pub fn predict_frames(&self, frames: &[Frame]) -> Result<Vec<PredictionWithUncertainty>> {
        let per_member = self.members.iter().map(|m| m.model.predict(frames)).collect::<Result<Vec<_>>>()?;
        Ok((0..frames.len()).map(|i| aggregate(&per_member.iter().map(|p| p[i]).collect::<Vec<_>>())).collect())
    }

    pub fn predict_day(&self, day: &DayDataset) -> Result<Vec<PredictionWithUncertainty>> {
        self.predict_frames(&day.frames)
    }

    /// Index and score of the best member. Validation selection uses each
    /// member's best validation MAE; oracle selection scores on `test_days`.
    pub fn best_member(&self, selection: MemberSelection, test_days: &[&DayDataset]) -> Result<(usize, f64)> {
        let scores: Vec<f64> = match selection {
            MemberSelection::Validation => self.members.iter().map(|m| m.best_val_mae).collect(),
            MemberSelection::OracleTest => {
                let frames: Vec<Frame> = test_days.iter().flat_map(|d| d.frames.iter().cloned()).collect();
                if frames.is_empty() {
                    return Err(Error::Precondition("oracle selection needs test frames".into()));
                }
                let gts: Vec<f64> = frames.iter().map(|f| f.do_gt).collect();
                self.members
                    .iter()
                    .map(|m| m.model.predict(&frames).map(|p| stats::mae(&p, &gts)))
                    .collect::<Result<_>>()?
            }
        };
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Precondition(
                "member selection needs a finite score for every member (train with validation days)".into(),
            ));
        }
        let best = (0..scores.len())
            .min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)))
            .expect("ensemble is non-empty");
        Ok((best, scores[best]))
    }
}

/// Pearson correlation between predictive std and absolute error.
pub fn uncertainty_error_correlation(preds: &[PredictionWithUncertainty], gts: &[f64]) -> Result<f64> {
    if preds.len() != gts.len() || preds.len() < 3 {
        return Err(Error::Precondition(format!(
            "correlation needs equal-length series of >= 3 samples, got {} predictions and {} targets",
            preds.len(),
            gts.len()
        )));
    }
    let std: Vec<f64> = preds.iter().map(|p| p.std).collect();
    let err: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| (p.mean - g).abs()).collect();
    stats::pearson(&std, &err).map_err(|_| Error::UndefinedVariance("std or absolute error is constant"))
}

/// MAE after discarding the `⌈f·N⌉` most uncertain predictions, for each
/// fraction `f`. Equal stds are discarded in order of decreasing index, so
/// earlier samples are kept longer.
pub fn rejection_curve(preds: &[PredictionWithUncertainty], gts: &[f64], fractions: &[f64]) -> Result<Vec<(f64, f64)>> {
    let n = preds.len();
    if n == 0 || n != gts.len() {
        return Err(Error::Precondition(format!(
            "rejection curve needs equal non-empty series, got {n} and {}",
            gts.len()
        )));
    }
    if fractions.first() != Some(&0.0) {
        return Err(Error::Precondition("rejection fractions must start at 0".into()));
    }
    if fractions.windows(2).any(|w| !(w[1] > w[0])) || fractions.iter().any(|f| !(0.0..=MAX_REJECTION).contains(f)) {
        return Err(Error::Precondition(format!(
            "rejection fractions must be strictly increasing within [0, {MAX_REJECTION}]"
        )));
    }
    // most uncertain first
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| preds[b].std.total_cmp(&preds[a].std).then(b.cmp(&a)));
    let mean: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    fractions
        .iter()
        .map(|&f| {
            let drop = (f * n as f64).ceil() as usize;
            if drop >= n {
                return Err(Error::Precondition(format!("fraction {f} leaves no samples out of {n}")));
            }
            let mut keep = vec![true; n];
            order[..drop].iter().for_each(|&i| keep[i] = false);
            let (p, g): (Vec<f64>, Vec<f64>) = (0..n).filter(|&i| keep[i]).map(|i| (mean[i], gts[i])).unzip();
            Ok((f, stats::mae(&p, &g)))
        })
        .collect()
}

/// Evenly spaced fractions `0, step, 2·step, …` up to 0.95.
pub fn default_fractions(step: f64) -> Vec<f64> {
    let n = (MAX_REJECTION / step + 1e-9).floor() as usize;
    (0..=n).map(|i| (i as f64 * step).min(MAX_REJECTION)).collect()
}

pub fn write_rejection_csv<W: Write>(mut w: W, curve: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(w, "fraction,mae")?;
    for (f, m) in curve {
        writeln!(w, "{f},{m}")?;
    }
    Ok(())
}

pub fn write_scatter_csv<W: Write>(mut w: W, preds: &[PredictionWithUncertainty], gts: &[f64]) -> std::io::Result<()> {
    writeln!(w, "std,abs_error")?;
    for (p, g) in preds.iter().zip(gts) {
        writeln!(w, "{},{}", p.std, (p.mean - g).abs())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pwu(mean: f64, std: f64) -> PredictionWithUncertainty {
        PredictionWithUncertainty { mean, std, member_preds: vec![mean] }
    }

    #[test]
    fn aggregate_hand_values() {
        let p = aggregate(&[10.0, 20.0, 30.0]);
        assert_eq!(p.mean, 20.0);
        assert!((p.std - (200.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((p.std - 8.1650).abs() < 1e-4);
        assert_eq!(aggregate(&[4.5, 4.5, 4.5]).std, 0.0);
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(v in prop::collection::vec(-300.0f64..300.0, 2..8), rot in 0usize..8) {
            let a = aggregate(&v);
            let mut w = v.clone();
            w.rotate_left(rot % v.len());
            w.reverse();
            let b = aggregate(&w);
            prop_assert_eq!(a.mean, b.mean);
            prop_assert_eq!(a.std, b.std);
            prop_assert!(a.std >= 0.0);
        }

        #[test]
        fn pcc_affine_invariant(seed in 0u64..500, scale in 0.01f64..50.0, shift in 0.0f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..250.0)).collect();
            let preds: Vec<_> = gts.iter().map(|g| pwu(g + rng.random_range(-9.0..9.0), rng.random_range(0.0..5.0))).collect();
            let scaled: Vec<_> = preds.iter().map(|p| pwu(p.mean, scale * p.std + shift)).collect();
            let a = uncertainty_error_correlation(&preds, &gts).unwrap();
            let b = uncertainty_error_correlation(&scaled, &gts).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pcc_of_proportional_std_is_one() {
        let gts = [0.0, 50.0, 100.0, 150.0];
        let preds: Vec<_> =
            [3.0, -1.0, 7.0, 2.0].iter().zip(&gts).map(|(e, g)| pwu(g + e, 0.5 * f64::abs(*e))).collect();
        assert!((uncertainty_error_correlation(&preds, &gts).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pcc_of_independent_std_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gts: Vec<f64> = (0..1000).map(|_| rng.random_range(0.0..250.0)).collect();
        let preds: Vec<_> =
            gts.iter().map(|g| pwu(g + rng.random_range(-10.0..10.0), rng.random_range(0.0..5.0))).collect();
        assert!(uncertainty_error_correlation(&preds, &gts).unwrap().abs() < 0.2);
    }

    #[test]
    fn pcc_zero_variance_is_an_error() {
        let gts = [1.0, 2.0, 3.0];
        let preds: Vec<_> = gts.iter().map(|g| pwu(g + 1.0, 0.3)).collect();
        assert!(matches!(uncertainty_error_correlation(&preds, &gts), Err(Error::UndefinedVariance(_))));
    }

    #[test]
    fn rejection_at_zero_is_full_mae() {
        let gts = [0.0, 10.0, 20.0, 30.0, 40.0];
        let preds: Vec<_> = [1.5, 9.0, 26.0, 30.5, 33.0].iter().enumerate().map(|(i, &m)| pwu(m, i as f64)).collect();
        let c = rejection_curve(&preds, &gts, &[0.0, 0.2, 0.5]).unwrap();
        let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
        assert_eq!(c[0].1, stats::mae(&means, &gts));
        // drop index 4 (|e| 7), then ⌈2.5⌉ = 3: indices 4, 3, 2 leave 0 and 1
        assert_eq!(c[1].1, (1.5 + 1.0 + 6.0 + 0.5) / 4.0);
        assert_eq!(c[2].1, (1.5 + 1.0) / 2.0);
    }

    #[test]
    fn rejection_with_exact_std_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gts: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..250.0)).collect();
        let preds: Vec<_> = gts
            .iter()
            .map(|g| {
                let e = rng.random_range(-20.0..20.0);
                pwu(g + e, f64::abs(e))
            })
            .collect();
        let c = rejection_curve(&preds, &gts, &default_fractions(0.05)).unwrap();
        assert_eq!(c.len(), 20);
        assert!(c.windows(2).all(|w| w[1].1 <= w[0].1));
    }

    #[test]
    fn rejection_ties_drop_later_samples_first() {
        let gts = [0.0, 0.0, 0.0];
        let preds = vec![pwu(1.0, 1.0), pwu(2.0, 1.0), pwu(4.0, 1.0)];
        let c = rejection_curve(&preds, &gts, &[0.0, 0.3]).unwrap();
        assert_eq!(c[1].1, 1.5);
    }

    #[test]
    fn rejection_preconditions() {
        let preds = vec![pwu(1.0, 1.0), pwu(2.0, 2.0)];
        let gts = [0.0, 0.0];
        assert!(rejection_curve(&preds, &gts, &[0.1]).is_err());
        assert!(rejection_curve(&preds, &gts, &[0.0, 0.5, 0.4]).is_err());
        assert!(rejection_curve(&preds, &gts, &[0.0, 0.96]).is_err());
        assert!(rejection_curve(&preds, &gts, &[0.0, 0.95]).is_err());
        assert!(rejection_curve(&preds, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn member_seeds_are_distinct_and_stable() {
        let a: Vec<u64> = (0..5).map(|i| member_seed(7, i)).collect();
        let b: Vec<u64> = (0..5).map(|i| member_seed(7, i)).collect();
        assert_eq!(a, b);
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 5);
        assert_ne!(member_seed(8, 0), a[0]);
    }

    #[test]
    fn csv_exports() {
        let mut buf = Vec::new();
        write_rejection_csv(&mut buf, &[(0.0, 3.5), (0.5, 2.0)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "fraction,mae\n0,3.5\n0.5,2\n");
        let mut buf = Vec::new();
        write_scatter_csv(&mut buf, &[pwu(12.0, 1.5)], &[10.0]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "std,abs_error\n1.5,2\n");
    }

    mod trained {
        use super::*;
        use crate::nn::model::tests::small_setup;
        use crate::nn::Backbone;

        fn tiny() -> (crate::data::Dataset, ModelConfig) {
            let (ds, cfg, _) = small_setup(Backbone::ConvSmall);
            (ds, ModelConfig { epochs: 2, ..cfg })
        }

        #[test]
        fn same_base_seed_gives_identical_ensembles() {
            let (ds, cfg) = tiny();
            let tr = ds.select(&[1]).unwrap();
            let va = ds.select(&[2]).unwrap();
            let a = train_ensemble(&cfg, 2, 3, &ds.meta, &tr, &va).unwrap();
            let b = train_ensemble(&cfg, 2, 3, &ds.meta, &tr, &va).unwrap();
            assert_eq!(a.seeds, b.seeds);
            for (x, y) in a.members.iter().zip(&b.members) {
                assert_eq!(x.model.params, y.model.params);
            }
            let f = &ds.days[1].frames[0];
            let p = a.predict(f).unwrap();
            assert!(p.std > 0.0);
            assert_eq!(p, b.predict(f).unwrap());
            let (i, s) = a.best_member(MemberSelection::Validation, &[]).unwrap();
            assert_eq!(s, a.members[i].best_val_mae);
        }

        #[test]
        fn forced_identical_seeds_have_zero_spread() {
            let (ds, cfg) = tiny();
            let tr = ds.select(&[1]).unwrap();
            let e =
                train_members(&[9, 9], |seed| train(&ModelConfig { seed, ..cfg.clone() }, &ds.meta, &tr, &[])).unwrap();
            let p = e.predict_day(&ds.days[1]).unwrap();
            assert!(p.iter().all(|q| q.std == 0.0));
            // no validation days: only oracle selection is possible
            assert!(e.best_member(MemberSelection::Validation, &[]).is_err());
            assert!(e.best_member(MemberSelection::OracleTest, &[&ds.days[1]]).is_ok());
        }

        #[test]
        fn member_failure_is_reported() {
            let (ds, cfg) = tiny();
            let tr = ds.select(&[1]).unwrap();
            let bad = ModelConfig { lr: 1e9, ..cfg };
            let err = train_ensemble(&bad, 2, 0, &ds.meta, &tr, &[]).unwrap_err();
            assert!(matches!(err, Error::Member { .. }), "{err:?}");
        }

        #[test]
        fn size_one_is_rejected() {
            let (ds, cfg) = tiny();
            let tr = ds.select(&[1]).unwrap();
            assert!(train_ensemble(&cfg, 1, 0, &ds.meta, &tr, &[]).is_err());
        }
    }
}
