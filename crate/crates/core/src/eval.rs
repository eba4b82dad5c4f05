//! Evaluation protocols: day-level splits, leakage guards, error reports and
//! learning curves.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineKind, Calibrator};
use crate::data::{Dataset, DatasetMeta, DayDataset};
use crate::error::{Error, Result};
use crate::nn::{train_with, ModelConfig, TrainKind, TrainedModel};
use crate::pixel_fit::{fit_all_pixels, FitOptions, PlateauStack, RankMetric, SvModel};
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    LoocvDay,
    Chronological,
    Sequential,
}

impl SplitKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::LoocvDay => "loocv_day",
            SplitKind::Chronological => "chronological",
            SplitKind::Sequential => "sequential",
        }
    }
}

/// Day-index sets of one train/validate/test run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub kind: SplitKind,
    pub train_days: Vec<usize>,
    pub val_days: Vec<usize>,
    pub test_days: Vec<usize>,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Precondition(m));
        if self.test_days.is_empty() {
            return bad("split has no test days".into());
        }
        let sets = [&self.train_days, &self.val_days, &self.test_days];
        let mut seen = BTreeSet::new();
        for s in sets {
            for &d in s {
                if !seen.insert(d) {
                    return bad(format!("day {d} appears in more than one role"));
                }
            }
        }
        if matches!(self.kind, SplitKind::Chronological | SplitKind::Sequential) {
            let max = |v: &[usize]| v.iter().copied().max();
            let min = |v: &[usize]| v.iter().copied().min();
            let ordered = match (max(&self.train_days), min(&self.val_days), max(&self.val_days), min(&self.test_days))
            {
                (Some(tr), Some(v0), Some(v1), Some(te)) => tr < v0 && v1 < te,
                (Some(tr), None, None, Some(te)) => tr < te,
                _ => false,
            };
            if !ordered {
                return bad("chronological split must order train < validation < test".into());
            }
        }
        Ok(())
    }
}

/// Options of [`make_splits`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitParams {
    /// LOOCV folds also hold out a validation day: the day before the test
    /// day, or day 2 when day 1 is tested.
    pub loocv_validation: bool,
}

/// Plans over days `1..=n_days`.
pub fn make_splits(kind: SplitKind, n_days: usize, params: SplitParams) -> Result<Vec<SplitPlan>> {
    let need = match kind {
        SplitKind::LoocvDay if !params.loocv_validation => 2,
        _ => 3,
    };
    if n_days < need {
        return Err(Error::Precondition(format!("{} splits need at least {need} days, got {n_days}", kind.as_str())));
    }
    let days = 1..=n_days;
    let plans = match kind {
        SplitKind::LoocvDay => days
            .clone()
            .map(|t| {
                let val: Vec<usize> =
                    if params.loocv_validation { vec![if t > 1 { t - 1 } else { 2 }] } else { vec![] };
                SplitPlan {
                    kind,
                    train_days: days.clone().filter(|d| *d != t && !val.contains(d)).collect(),
                    val_days: val,
                    test_days: vec![t],
                }
            })
            .collect(),
        SplitKind::Chronological => vec![SplitPlan {
            kind,
            train_days: (1..=n_days - 2).collect(),
            val_days: vec![n_days - 1],
            test_days: vec![n_days],
        }],
        SplitKind::Sequential => (1..=n_days - 2)
            .map(|n| SplitPlan {
                kind,
                train_days: (1..=n).collect(),
                val_days: vec![n + 1],
                test_days: (n + 2..=n_days).collect(),
            })
            .collect(),
    };
    for p in &plans {
        p.validate()?;
    }
    Ok(plans)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Train,
    Val,
    Test,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Train => "train",
            Role::Val => "val",
            Role::Test => "test",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "train" => Role::Train,
            "val" => Role::Val,
            "test" => Role::Test,
            _ => return None,
        })
    }
}

/// One frame touched during a run. `timestamp` is the frame's acquisition
/// time within its day, so logs of identical runs are identical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageEntry {
    pub timestamp: f64,
    pub day: usize,
    pub frame: usize,
    pub role: Role,
}

/// Append-only record of frame usage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct UsageLog {
    entries: Vec<UsageEntry>,
}

impl UsageLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[UsageEntry] {
        &self.entries
    }

    pub fn record(&mut self, entry: UsageEntry) {
        self.entries.push(entry);
    }

    /// Every frame of `day` under `role`.
    pub fn record_day(&mut self, day: &DayDataset, role: Role) {
        for (i, f) in day.frames.iter().enumerate() {
            self.record(UsageEntry { timestamp: f.timestamp, day: day.day_index, frame: i, role });
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{},{}", e.timestamp, e.day, e.frame, e.role.as_str());
        }
        s
    }

    /// Appends the entries to `path`, creating it if needed.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut log = Self::new();
        for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::format(path, format!("line {}: expected timestamp,day,frame,role", n + 1));
            let parts: Vec<&str> = line.split(',').collect();
            let [ts, day, frame, role] = parts[..] else { return Err(bad()) };
            log.record(UsageEntry {
                timestamp: ts.parse().map_err(|_| bad())?,
                day: day.parse().map_err(|_| bad())?,
                frame: frame.parse().map_err(|_| bad())?,
                role: Role::parse(role).ok_or_else(bad)?,
            });
        }
        Ok(log)
    }
}

/// Outcome of [`leakage_guard`]; empty `violations` means pass.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LeakageReport {
    pub violations: Vec<String>,
}

impl LeakageReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that no test-day frame was used for fitting or selection, that
/// train/val frames come from their assigned days, and, for chronological
/// plans, that no training frame postdates a test frame.
pub fn leakage_guard(plan: &SplitPlan, log: &UsageLog) -> LeakageReport {
    let mut v = Vec::new();
    let test: BTreeSet<usize> = plan.test_days.iter().copied().collect();
    for e in log.entries() {
        let allowed = match e.role {
            Role::Train => &plan.train_days,
            Role::Val => &plan.val_days,
            Role::Test => &plan.test_days,
        };
        if e.role != Role::Test && test.contains(&e.day) {
            v.push(format!("test day {} frame {} used as {}", e.day, e.frame, e.role.as_str()));
        } else if !allowed.contains(&e.day) {
            v.push(format!("day {} frame {} used as {} outside the plan", e.day, e.frame, e.role.as_str()));
        }
    }
    if matches!(plan.kind, SplitKind::Chronological | SplitKind::Sequential) {
        let key = |e: &UsageEntry| (e.day, e.timestamp);
        let first_test = log
            .entries()
            .iter()
            .filter(|e| e.role == Role::Test)
            .min_by(|a, b| key(a).0.cmp(&key(b).0).then(key(a).1.total_cmp(&key(b).1)));
        if let Some(t) = first_test {
            for e in log.entries().iter().filter(|e| e.role == Role::Train) {
                if e.day > t.day || (e.day == t.day && e.timestamp > t.timestamp) {
                    v.push(format!(
                        "training frame day {} frame {} postdates test frame day {} frame {}",
                        e.day, e.frame, t.day, t.frame
                    ));
                }
            }
        }
    }
    LeakageReport { violations: v }
}

/// Half-open DO interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoBin {
    pub lo: f64,
    pub hi: f64,
}

/// One bin per plateau, edges halfway between neighbours and mirrored at
/// the ends.
pub fn default_bins(plateaus: &[f64]) -> Result<Vec<DoBin>> {
    if plateaus.len() < 2 || plateaus.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Precondition("bins need at least two strictly increasing plateaus".into()));
    }
    let n = plateaus.len();
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(plateaus[0] - 0.5 * (plateaus[1] - plateaus[0]));
    for w in plateaus.windows(2) {
        edges.push(0.5 * (w[0] + w[1]));
    }
    edges.push(plateaus[n - 1] + 0.5 * (plateaus[n - 1] - plateaus[n - 2]));
    Ok(edges.windows(2).map(|w| DoBin { lo: w[0], hi: w[1] }).collect())
}

/// Ground-truth values outside the outer edges are counted in the nearest
/// end bin.
fn bin_of(bins: &[DoBin], x: f64) -> usize {
    bins.iter().position(|b| x < b.hi).unwrap_or(bins.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStat {
    pub bin: DoBin,
    pub n: usize,
    /// NaN for an empty bin.
    pub mae: f64,
    /// Population std of absolute errors in the bin.
    pub std: f64,
}

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorHistogram {
    /// Mean signed error `pred − gt`.
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub mae: f64,
    /// NaN when the ground truth is constant.
    pub r2: f64,
    pub binned_mae: Vec<BinStat>,
    pub per_day: Vec<(usize, f64)>,
    pub error_histogram: ErrorHistogram,
}

pub fn evaluate(preds: &[f64], gts: &[f64], bins: &[DoBin]) -> Result<EvalReport> {
    if preds.is_empty() || preds.len() != gts.len() {
        return Err(Error::Precondition(format!(
            "evaluation needs equal non-empty series, got {} predictions and {} targets",
            preds.len(),
            gts.len()
        )));
    }
    if bins.is_empty() {
        return Err(Error::Precondition("at least one DO bin is required".into()));
    }
    let mae = stats::mae(preds, gts);
    let r2 = match crate::sv::r_squared(gts, preds) {
        Ok(r) => r,
        Err(Error::UndefinedVariance(_)) | Err(Error::Precondition(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::new(); bins.len()];
    for (p, g) in preds.iter().zip(gts) {
        per_bin[bin_of(bins, *g)].push((p - g).abs());
    }
    let binned_mae = bins
        .iter()
        .zip(&per_bin)
        .map(|(b, e)| BinStat {
            bin: *b,
            n: e.len(),
            mae: if e.is_empty() { f64::NAN } else { stats::mean(e) },
            std: if e.is_empty() { f64::NAN } else { stats::std_pop(e) },
        })
        .collect();
    let err: Vec<f64> = preds.iter().zip(gts).map(|(p, g)| p - g).collect();
    let lo = err.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = err.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut counts = vec![0; HISTOGRAM_BINS];
    for e in &err {
        let k = if hi > lo { (((e - lo) / (hi - lo)) * HISTOGRAM_BINS as f64) as usize } else { 0 };
        counts[k.min(HISTOGRAM_BINS - 1)] += 1;
    }
    Ok(EvalReport {
        n: preds.len(),
        mae,
        r2,
        binned_mae,
        per_day: Vec::new(),
        error_histogram: ErrorHistogram { mean: stats::mean(&err), std: stats::std_pop(&err), lo, hi, counts },
    })
}

/// [`evaluate`] over several days, filling the per-day table.
pub fn evaluate_days(days: &[(usize, Vec<f64>, Vec<f64>)], bins: &[DoBin]) -> Result<EvalReport> {
    let preds: Vec<f64> = days.iter().flat_map(|d| d.1.iter().copied()).collect();
    let gts: Vec<f64> = days.iter().flat_map(|d| d.2.iter().copied()).collect();
    let mut r = evaluate(&preds, &gts, bins)?;
    r.per_day = days.iter().map(|(d, p, g)| (*d, stats::mae(p, g))).collect();
    Ok(r)
}

impl EvalReport {
    pub fn summary_csv(&self) -> String {
        let h = &self.error_histogram;
        format!(
            "metric,value\nn,{}\nmae,{}\nr2,{}\nerror_mean,{}\nerror_std,{}\n",
            self.n, self.mae, self.r2, h.mean, h.std
        )
    }

    pub fn bins_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,n,mae,std\n");
        for b in &self.binned_mae {
            let _ = writeln!(s, "{},{},{},{},{}", b.bin.lo, b.bin.hi, b.n, b.mae, b.std);
        }
        s
    }

    pub fn per_day_csv(&self) -> String {
        let mut s = String::from("day,mae\n");
        for (d, m) in &self.per_day {
            let _ = writeln!(s, "{d},{m}");
        }
        s
    }

    pub fn histogram_csv(&self) -> String {
        let h = &self.error_histogram;
        let w = (h.hi - h.lo) / HISTOGRAM_BINS as f64;
        let mut s = String::from("lo,hi,count\n");
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", h.lo + i as f64 * w, h.lo + (i + 1) as f64 * w, c);
        }
        s
    }

    pub fn text_summary(&self) -> String {
        let mut s = format!(
            "samples {}\nMAE {:.3} µmol/L\nR² {}\nerror µ {:.3} σ {:.3}\n",
            self.n,
            self.mae,
            if self.r2.is_nan() { "undefined".to_string() } else { format!("{:.4}", self.r2) },
            self.error_histogram.mean,
            self.error_histogram.std
        );
        for b in &self.binned_mae {
            let _ =
                writeln!(s, "  DO [{:.1}, {:.1}): n {:4}  MAE {:.3}  std {:.3}", b.bin.lo, b.bin.hi, b.n, b.mae, b.std);
        }
        for (d, m) in &self.per_day {
            let _ = writeln!(s, "  day {d}: MAE {m:.3}");
        }
        s
    }
}

/// Best-pixel grid searched when the cohort is chosen on validation data.
pub const BEST_PIXEL_SIZES: [usize; 3] = [10, 100, 1000];

/// A calibration method that can be fitted on a plan's training days.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Baseline(BaselineKind),
    /// Best-pixels cohort, metric and SV model picked by validation MAE.
    BestPixelsSelected,
    Pinn(ModelConfig),
    /// The PINN network without the physics term.
    Plain(ModelConfig),
    Pgnn(ModelConfig),
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Baseline(BaselineKind::GlobalAverage) => "global_average".into(),
            Method::Baseline(BaselineKind::BestPixels { metric, model, n }) => {
                format!("best_pixels_{}_{}_{}", metric.as_str(), model.as_str(), n)
            }
            Method::Baseline(BaselineKind::FeatureRidge { .. }) => "feature_ridge".into(),
            Method::BestPixelsSelected => "best_pixels".into(),
            Method::Pinn(_) => "pinn".into(),
            Method::Plain(_) => "pinn_no_physics".into(),
            Method::Pgnn(_) => "pgnn".into(),
        }
    }
}

/// Result of running one plan.
#[derive(Debug, Clone)]
pub struct PlanOutcome {
    /// `(day, predictions, ground truth)` for each test day.
    pub test: Vec<(usize, Vec<f64>, Vec<f64>)>,
    pub report: EvalReport,
    /// Validation MAE of the selected model; NaN without validation days.
    pub val_mae: f64,
    /// Lowest per-epoch test MAE (neural methods with `monitor_test`).
    pub oracle_test_mae: Option<f64>,
    pub trained: Option<TrainedModel>,
    /// Description of the selected baseline, when one was chosen.
    pub selected: Option<String>,
}

fn days_mae<F: Fn(&DayDataset) -> Result<Vec<f64>>>(days: &[&DayDataset], predict: F) -> Result<f64> {
    let mut p = Vec::new();
    let mut g = Vec::new();
    for d in days {
        p.extend(predict(d)?);
        g.extend(d.frames.iter().map(|f| f.do_gt));
    }
    Ok(if p.is_empty() { f64::NAN } else { stats::mae(&p, &g) })
}

/// Fits `method` on the plan's training days, selects on its validation
/// days and predicts its test days, logging every frame it touches.
/// `monitor_test` additionally scores test days after each training epoch
/// for oracle reporting; the scores never influence the returned model.
pub fn run_plan(
    method: &Method,
    ds: &Dataset,
    plan: &SplitPlan,
    bins: &[DoBin],
    monitor_test: bool,
    log: &mut UsageLog,
) -> Result<PlanOutcome> {
    plan.validate()?;
    let train = ds.select(&plan.train_days)?;
    let val = ds.select(&plan.val_days)?;
    let test = ds.select(&plan.test_days)?;
    for d in &train {
        log.record_day(d, Role::Train);
    }
    for d in &val {
        log.record_day(d, Role::Val);
    }
    let meta = &ds.meta;
    let opts = FitOptions::default();
    let mut trained = None;
    let mut selected = None;
    let mut oracle = None;
    let (val_mae, preds): (f64, Vec<Vec<f64>>) = match method {
        Method::Baseline(kind) => {
            let c = Calibrator::<f64>::fit(kind, meta, &train, &opts)?;
            let v = days_mae(&val, |d| c.predict_day(meta, d))?;
            (v, test.iter().map(|d| c.predict_day(meta, d)).collect::<Result<_>>()?)
        }
        Method::BestPixelsSelected => {
            if val.is_empty() {
                return Err(Error::Precondition("best-pixel selection needs a validation day".into()));
            }
            let (c, v, kind) = select_best_pixels(meta, &train, &val, &opts)?;
            selected = Some(Method::Baseline(kind).name());
            (v, test.iter().map(|d| c.predict_day(meta, d)).collect::<Result<_>>()?)
        }
        Method::Pinn(cfg) | Method::Plain(cfg) | Method::Pgnn(cfg) => {
            let maps;
            let kind = match method {
                Method::Pinn(_) => TrainKind::Pinn,
                Method::Plain(_) => TrainKind::Plain,
                _ => {
                    maps = fit_all_pixels(&PlateauStack::from_days(meta, &train)?, &opts)?;
                    TrainKind::Pgnn(&maps)
                }
            };
            let monitor: &[&DayDataset] = if monitor_test { &test } else { &[] };
            let t = train_with(kind, cfg, meta, &train, &val, monitor)?;
            if monitor_test {
                oracle = t.history.iter().map(|r| r.monitor_mae).min_by(f64::total_cmp);
            }
            let p = test.iter().map(|d| t.model.predict_day(d)).collect::<Result<_>>()?;
            let v = t.best_val_mae;
            trained = Some(t);
            (v, p)
        }
    };
    let mut rows = Vec::with_capacity(test.len());
    for (d, p) in test.iter().zip(preds) {
        log.record_day(d, Role::Test);
        rows.push((d.day_index, p, d.frames.iter().map(|f| f.do_gt).collect()));
    }
    let report = evaluate_days(&rows, bins)?;
    Ok(PlanOutcome { test: rows, report, val_mae, oracle_test_mae: oracle, trained, selected })
}

/// Best-pixel calibrator with the lowest validation MAE over metrics, SV
/// models and cohort sizes. Configurations that fail to fit are skipped.
pub fn select_best_pixels(
    meta: &DatasetMeta,
    train: &[&DayDataset],
    val: &[&DayDataset],
    opts: &FitOptions,
) -> Result<(Calibrator<f64>, f64, BaselineKind)> {
    let mut best: Option<(Calibrator<f64>, f64, BaselineKind)> = None;
    for model in [SvModel::Linear, SvModel::TwoSite] {
        for metric in RankMetric::ALL {
            for n in BEST_PIXEL_SIZES {
                let kind = BaselineKind::BestPixels { metric, model, n };
                let Ok(c) = Calibrator::<f64>::fit(&kind, meta, train, opts) else { continue };
                let Ok(v) = days_mae(val, |d| c.predict_day(meta, d)) else { continue };
                if v.is_finite() && best.as_ref().is_none_or(|b| v < b.1) {
                    best = Some((c, v, kind));
                }
            }
        }
    }
    best.ok_or_else(|| Error::Precondition("no best-pixel configuration could be fitted".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveMode {
    RandomOrder,
    Chronological,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub train_size: usize,
    pub plan: SplitPlan,
    /// Test MAE of the lowest-validation-MAE checkpoint.
    pub test_mae: f64,
    pub val_mae: f64,
    /// Lowest test MAE over epochs; uses test labels for selection.
    pub oracle_test_mae: f64,
}

/// Plans of a learning curve. Chronological mode follows
/// [`SplitKind::Sequential`]; random order applies the same shape to a
/// seeded permutation of the days.
pub fn curve_plans(n_days: usize, mode: CurveMode, seed: u64) -> Result<Vec<SplitPlan>> {
    let seq = make_splits(SplitKind::Sequential, n_days, SplitParams::default())?;
    Ok(match mode {
        CurveMode::Chronological => seq,
        CurveMode::RandomOrder => {
            let mut order: Vec<usize> = (1..=n_days).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de));
            let map = |v: &[usize]| {
                let mut m: Vec<usize> = v.iter().map(|&d| order[d - 1]).collect();
                m.sort_unstable();
                m
            };
            seq.iter()
                .map(|p| SplitPlan {
                    kind: SplitKind::LoocvDay,
                    train_days: map(&p.train_days),
                    val_days: map(&p.val_days),
                    test_days: map(&p.test_days),
                })
                .collect()
        }
    })
}

/// Test MAE against training-set size for a neural method.
pub fn sequential_learning_curve(
    method: &Method,
    ds: &Dataset,
    mode: CurveMode,
    seed: u64,
    log_sink: &mut Vec<(SplitPlan, UsageLog)>,
) -> Result<Vec<CurvePoint>> {
    if !matches!(method, Method::Pinn(_) | Method::Plain(_) | Method::Pgnn(_)) {
        return Err(Error::Precondition("learning curves are defined for neural methods".into()));
    }
    let days = ds.day_indices();
    if days != (1..=days.len()).collect::<Vec<_>>() {
        return Err(Error::Precondition("learning curves need days numbered 1..n".into()));
    }
    let bins = default_bins_for(ds)?;
    let mut out = Vec::new();
    for plan in curve_plans(days.len(), mode, seed)? {
        let mut log = UsageLog::new();
        let r = run_plan(method, ds, &plan, &bins, true, &mut log)?;
        out.push(CurvePoint {
            train_size: plan.train_days.len(),
            test_mae: r.report.mae,
            val_mae: r.val_mae,
            oracle_test_mae: r.oracle_test_mae.unwrap_or(f64::NAN),
            plan: plan.clone(),
        });
        log_sink.push((plan, log));
    }
    Ok(out)
}

/// Plateau bins of a simulated dataset, or plateau set-points read from the
/// first day otherwise.
pub fn default_bins_for(ds: &Dataset) -> Result<Vec<DoBin>> {
    let day = ds.days.first().ok_or_else(|| Error::Precondition("dataset has no days".into()))?;
    let p: Vec<f64> = day.plateau_windows.iter().map(|w| w.o2).collect();
    default_bins(&p)
}

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("train_size,val_mae,test_mae,oracle_test_mae\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.train_size, p.val_mae, p.test_mae, p.oracle_test_mae);
    }
    s
}

/// Candidate whose run has the lowest validation MAE; ties keep the
/// earlier candidate.
pub fn select_by_validation<F>(candidates: &[ModelConfig], mut run: F) -> Result<(usize, f64)>
where
    F: FnMut(&ModelConfig) -> Result<f64>,
{
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let v = run(c)?;
        if v.is_finite() && best.is_none_or(|b| v < b.1) {
            best = Some((i, v));
        }
    }
    best.ok_or_else(|| Error::Precondition("no candidate produced a finite validation MAE".into()))
}
