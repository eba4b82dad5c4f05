//! Classical calibrators: frame-averaged Stern–Volmer ("global average"),
//! best-pixel super-pixels and a standardized ridge regressor on aggregated
//! physics features.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetMeta, DayDataset, Frame};
use crate::error::{Error, Result};
use crate::linalg::solve_dense;
use crate::pixel_fit::{
    fit_all_pixels, fit_two_site_pixel, rank_pixels, two_site_init, FitOptions, FitStatus, ParameterMaps, PixelSeries,
    PlateauStack, RankMetric, SvModel,
};
use crate::scalar::Scalar;
use crate::sv::{self, Inversion, SvLinear, SvTwoSite};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_MAGIC: &str = "optode-calibrator";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SuperPixelModel<T> {
    Linear(SvLinear<T>),
    TwoSite(SvTwoSite<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperPixelCalibrator<T> {
    /// Row-major pixel indices, sorted ascending.
    pub cohort: Vec<usize>,
    pub fitted: SuperPixelModel<T>,
}

impl<T: Scalar> SuperPixelCalibrator<T> {
    pub fn model(&self) -> SvModel {
        match self.fitted {
            SuperPixelModel::Linear(_) => SvModel::Linear,
            SuperPixelModel::TwoSite(_) => SvModel::TwoSite,
        }
    }
}

fn checked_cohort(mut cohort: Vec<usize>, n_pixels: usize) -> Result<Vec<usize>> {
    cohort.sort_unstable();
    if cohort.is_empty() {
        return Err(Error::Precondition("empty pixel cohort".into()));
    }
    if cohort.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Precondition("duplicate pixel in cohort".into()));
    }
    if cohort[cohort.len() - 1] >= n_pixels {
        return Err(Error::Precondition("cohort pixel outside the grid".into()));
    }
    Ok(cohort)
}

/// Mean red intensity over a sorted cohort.
pub fn cohort_mean<T: Scalar>(cohort: &[usize], frame: &Frame) -> T {
    let s: f64 = cohort.iter().map(|&p| frame.red(p)).sum();
    T::lit(s / cohort.len() as f64)
}

/// Pooled one-site fit of a cohort signal against per-frame ground truth:
/// `I0` from the zero-oxygen frames, slope through the origin on `I0/I − 1`.
fn fit_cohort_linear<T: Scalar>(cohort: &[usize], days: &[&DayDataset]) -> Result<SvLinear<T>> {
    let mut zero_sum = T::zero();
    let mut zero_n = 0usize;
    let mut samples: Vec<(T, T)> = Vec::new();
    for day in days {
        if !day.plateau_windows.iter().any(|w| w.o2 == 0.0) {
            return Err(Error::MissingZeroPlateau(format!("day {} has no 0 µmol/L plateau", day.day_index)));
        }
        for (i, f) in day.frames.iter().enumerate() {
            let Some(w) = day.window_of(i) else { continue };
            let m = cohort_mean::<T>(cohort, f);
            if w.o2 == 0.0 {
                zero_sum += m;
                zero_n += 1;
            } else {
                samples.push((m, T::lit(f.do_gt)));
            }
        }
    }
    if zero_n == 0 {
        return Err(Error::MissingZeroPlateau("no training days".into()));
    }
    let i0 = zero_sum / T::from_usize_lossy(zero_n);
    if !(i0 > T::zero()) {
        return Err(Error::InvalidIntensity(i0.to_f64_lossy()));
    }
    if samples.is_empty() {
        return Err(Error::Precondition("need at least one non-zero plateau to fit a slope".into()));
    }
    let (mut sxy, mut sxx) = (T::zero(), T::zero());
    for &(m, c) in &samples {
        if !(m > T::zero()) {
            return Err(Error::InvalidIntensity(m.to_f64_lossy()));
        }
        sxy += (i0 / m - T::one()) * c;
        sxx += c * c;
    }
    if !(sxx > T::zero()) {
        return Err(Error::Precondition("ground truth is zero on every quenched frame".into()));
    }
    Ok(SvLinear { i0, k_sv: (sxy / sxx).max(T::zero()) })
}

/// Plateau means of the cohort signal averaged over days, for the two-site fit.
fn cohort_series<T: Scalar>(cohort: &[usize], days: &[&DayDataset]) -> Result<PixelSeries<T>> {
    let conc: Vec<f64> = days[0].plateau_windows.iter().map(|w| w.o2).collect();
    let mut means = vec![T::zero(); conc.len()];
    let mut zero_vals = Vec::new();
    for day in days {
        if day.plateau_windows.iter().map(|w| w.o2).ne(conc.iter().copied()) {
            return Err(Error::Precondition("training days use different plateau sequences".into()));
        }
        for (k, w) in day.plateau_windows.iter().enumerate() {
            let vals: Vec<T> = day.frames[w.start..w.end].iter().map(|f| cohort_mean(cohort, f)).collect();
            let m = vals.iter().copied().sum::<T>() / T::from_usize_lossy(vals.len());
            means[k] += m / T::from_usize_lossy(days.len());
            if k == 0 {
                zero_vals.extend(vals.iter().map(|&v| v - m));
            }
        }
    }
    let n0 = T::from_usize_lossy(zero_vals.len().max(2) - 1);
    let sigma_zero = (zero_vals.iter().map(|&v| v * v).sum::<T>() / n0).sqrt();
    Ok(PixelSeries { intensities: means, concentrations: conc.iter().map(|&c| T::lit(c)).collect(), sigma_zero })
}

fn fit_cohort<T: Scalar>(
    cohort: Vec<usize>,
    meta: &DatasetMeta,
    train: &[&DayDataset],
    model: SvModel,
    opts: &FitOptions,
) -> Result<SuperPixelCalibrator<T>> {
    if train.is_empty() {
        return Err(Error::Precondition("no training days".into()));
    }
    let cohort = checked_cohort(cohort, meta.n_pixels())?;
    let linear = fit_cohort_linear::<T>(&cohort, train)?;
    let fitted = match model {
        SvModel::Linear => SuperPixelModel::Linear(linear),
        SvModel::TwoSite => {
            let series = cohort_series::<T>(&cohort, train)?;
            let fit = fit_two_site_pixel(&series, &two_site_init(&linear), opts)?;
            if fit.status == FitStatus::Degenerate {
                return Err(Error::NonInvertible("two-site super-pixel fit is degenerate"));
            }
            SuperPixelModel::TwoSite(fit.params)
        }
    };
    Ok(SuperPixelCalibrator { cohort, fitted })
}

/// Single pooled one-site calibration of the all-pixel mean red intensity.
pub fn global_average_fit<T: Scalar>(meta: &DatasetMeta, train: &[&DayDataset]) -> Result<SuperPixelCalibrator<T>> {
    fit_cohort((0..meta.n_pixels()).collect(), meta, train, SvModel::Linear, &FitOptions::default())
}

/// Ranks pixels on the training days and calibrates the top-`n` cohort as one
/// super-pixel.
pub fn best_pixels_fit<T: Scalar>(
    meta: &DatasetMeta,
    train: &[&DayDataset],
    metric: RankMetric,
    model: SvModel,
    n: usize,
    opts: &FitOptions,
) -> Result<(SuperPixelCalibrator<T>, ParameterMaps<T>)> {
    let stack = PlateauStack::<T>::from_days(meta, train)?;
    let maps = fit_all_pixels(&stack, opts)?;
    let ranking = rank_pixels(&maps, metric, model, n)?;
    let cal = fit_cohort(ranking.pixels, meta, train, model, opts)?;
    Ok((cal, maps))
}

/// Cohort-mean red intensity inverted through the fitted model.
pub fn predict_super_pixel<T: Scalar>(c: &SuperPixelCalibrator<T>, frame: &Frame) -> Result<Inversion<T>> {
    if c.cohort.last().is_some_and(|&p| p >= frame.n_pixels()) {
        return Err(Error::Dimension("cohort index outside frame grid".into()));
    }
    let m = cohort_mean::<T>(&c.cohort, frame);
    match &c.fitted {
        SuperPixelModel::Linear(p) => sv::sv_invert_linear(p, m),
        SuperPixelModel::TwoSite(p) => sv::sv_invert_two_site(p, m, T::lit(sv::DEFAULT_INVERT_TOL)),
    }
}

pub const FEATURE_NAMES: [&str; 8] =
    ["mean_red", "std_red_window", "temperature", "mean_i0", "mean_k_sv", "mean_lod", "mean_dr", "mean_r2"];

/// Per-pixel statistics from the training-day linear fits, kept for feature
/// extraction on new frames. Non-`ok` and off-film pixels carry weight 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps<T> {
    pub usable: Vec<bool>,
    pub i0: Vec<T>,
    pub k_sv: Vec<T>,
    pub lod: Vec<T>,
    pub dr: Vec<T>,
    pub r2: Vec<T>,
}

impl<T: Scalar> FeatureMaps<T> {
    pub fn from_maps(maps: &ParameterMaps<T>, film_mask: &[bool]) -> Self {
        let n = maps.n_pixels();
        let usable: Vec<bool> = (0..n)
            .map(|p| film_mask[p] && maps.linear[p].status == FitStatus::Ok && maps.linear[p].metrics.lod.is_finite())
            .collect();
        let pick =
            |f: &dyn Fn(usize) -> T| (0..n).map(|p| if usable[p] { f(p) } else { T::zero() }).collect::<Vec<T>>();
        Self {
            i0: pick(&|p| maps.linear[p].metrics.i0),
            k_sv: pick(&|p| maps.linear[p].metrics.k_sv),
            lod: pick(&|p| maps.linear[p].metrics.lod),
            dr: pick(&|p| maps.linear[p].metrics.dr),
            r2: pick(&|p| maps.linear[p].metrics.r2),
            usable,
        }
    }
}

/// Feature vectors for every frame of a day, in frame order.
///
/// Map statistics are weighted by each pixel's red intensity in the frame, so
/// they are unchanged by a global gain and follow the oxygen-dependent
/// brightness pattern of the film.
pub fn day_features<T: Scalar>(maps: &FeatureMaps<T>, meta: &DatasetMeta, day: &DayDataset) -> Result<Vec<[T; 8]>> {
    let film = meta.film_pixels();
    if film.is_empty() {
        return Err(Error::Precondition("film mask is empty".into()));
    }
    let means: Vec<f64> = day
        .frames
        .iter()
        .map(|f| -> Result<f64> {
            f.check_grid(meta.width, meta.height)?;
            Ok(film.iter().map(|&p| f.red(p)).sum::<f64>() / film.len() as f64)
        })
        .collect::<Result<_>>()?;
    let mut window_std = vec![0.0; day.frames.len()];
    for w in &day.plateau_windows {
        let v = &means[w.start..w.end];
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        window_std[w.start..w.end].iter_mut().for_each(|s| *s = sd);
    }
    let usable: Vec<usize> = (0..meta.n_pixels()).filter(|&p| maps.usable[p]).collect();
    if usable.is_empty() {
        return Err(Error::Precondition("no usable pixels in the training maps".into()));
    }
    day.frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut acc = [T::zero(); 6];
            for &p in &usable {
                let w = T::lit(f.red(p).max(0.0));
                acc[0] += w;
                acc[1] += w * maps.i0[p];
                acc[2] += w * maps.k_sv[p];
                acc[3] += w * maps.lod[p];
                acc[4] += w * maps.dr[p];
                acc[5] += w * maps.r2[p];
            }
            if !(acc[0] > T::zero()) {
                return Err(Error::InvalidIntensity(0.0));
            }
            let wm = |k: usize| acc[k] / acc[0];
            Ok([T::lit(means[i]), T::lit(window_std[i]), T::lit(f.temperature), wm(1), wm(2), wm(3), wm(4), wm(5)])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRegressor<T> {
    pub ridge_lambda: T,
    pub maps: FeatureMaps<T>,
    pub mean: [T; 8],
    pub scale: [T; 8],
    pub coef: [T; 8],
    pub intercept: T,
}

/// Standardization constants; constant features keep scale 1.
pub fn standardization<T: Scalar>(rows: &[[T; 8]]) -> ([T; 8], [T; 8]) {
    let n = T::from_usize_lossy(rows.len());
    let mut mean = [T::zero(); 8];
    let mut scale = [T::one(); 8];
    for j in 0..8 {
        mean[j] = rows.iter().map(|r| r[j]).sum::<T>() / n;
        let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<T>() / n;
        if var > T::zero() {
            scale[j] = var.sqrt();
        }
    }
    (mean, scale)
}

/// Closed-form ridge on standardized features with an unpenalized intercept:
/// `(XᵀX/n + λI)β = Xᵀ(y − ȳ)/n`.
pub fn ridge_solve<T: Scalar>(rows: &[[T; 8]], y: &[T], lambda: T) -> Result<([T; 8], [T; 8], [T; 8], T)> {
    if rows.len() != y.len() || rows.is_empty() {
        return Err(Error::Dimension(format!("{} feature rows vs {} targets", rows.len(), y.len())));
    }
    if !(lambda >= T::zero()) {
        return Err(Error::Precondition("ridge_lambda must be >= 0".into()));
    }
    let (mean, scale) = standardization(rows);
    let n = T::from_usize_lossy(rows.len());
    let y_mean = y.iter().copied().sum::<T>() / n;
    let mut a = vec![T::zero(); 64];
    let mut b = vec![T::zero(); 8];
    for (r, &yv) in rows.iter().zip(y) {
        let z: Vec<T> = (0..8).map(|j| (r[j] - mean[j]) / scale[j]).collect();
        for i in 0..8 {
            b[i] += z[i] * (yv - y_mean) / n;
            for j in 0..8 {
                a[i * 8 + j] += z[i] * z[j] / n;
            }
        }
    }
    for i in 0..8 {
        a[i * 8 + i] += lambda;
    }
    solve_dense(&mut a, &mut b, T::lit(1e-12))?;
    let mut coef = [T::zero(); 8];
    coef.copy_from_slice(&b);
    Ok((mean, scale, coef, y_mean))
}

pub fn feature_regressor_fit<T: Scalar>(
    meta: &DatasetMeta,
    train: &[&DayDataset],
    ridge_lambda: T,
    opts: &FitOptions,
) -> Result<FeatureRegressor<T>> {
    let stack = PlateauStack::<T>::from_days(meta, train)?;
    let maps = FeatureMaps::from_maps(&fit_all_pixels(&stack, opts)?, &meta.film_mask);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for day in train {
        rows.extend(day_features(&maps, meta, day)?);
        y.extend(day.frames.iter().map(|f| T::lit(f.do_gt)));
    }
    let (mean, scale, coef, intercept) = ridge_solve(&rows, &y, ridge_lambda)?;
    Ok(FeatureRegressor { ridge_lambda, maps, mean, scale, coef, intercept })
}

impl<T: Scalar> FeatureRegressor<T> {
    pub fn predict_features(&self, x: &[T; 8]) -> T {
        let mut out = self.intercept;
        for j in 0..8 {
            out += self.coef[j] * (x[j] - self.mean[j]) / self.scale[j];
        }
        out
    }

    pub fn predict_day(&self, meta: &DatasetMeta, day: &DayDataset) -> Result<Vec<T>> {
        Ok(day_features(&self.maps, meta, day)?.iter().map(|x| self.predict_features(x)).collect())
    }
}

/// Which classical method a baseline run uses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineKind {
    GlobalAverage,
    BestPixels { metric: RankMetric, model: SvModel, n: usize },
    FeatureRidge { lambda: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Calibrator<T> {
    SuperPixel(SuperPixelCalibrator<T>),
    Ridge(FeatureRegressor<T>),
}

impl<T: Scalar> Calibrator<T> {
    pub fn fit(kind: &BaselineKind, meta: &DatasetMeta, train: &[&DayDataset], opts: &FitOptions) -> Result<Self> {
        Ok(match *kind {
            BaselineKind::GlobalAverage => Calibrator::SuperPixel(global_average_fit(meta, train)?),
            BaselineKind::BestPixels { metric, model, n } => {
                Calibrator::SuperPixel(best_pixels_fit(meta, train, metric, model, n, opts)?.0)
            }
            BaselineKind::FeatureRidge { lambda } => {
                Calibrator::Ridge(feature_regressor_fit(meta, train, T::lit(lambda), opts)?)
            }
        })
    }

    /// One prediction per frame of `day`. Clamped inversions report 0.
    pub fn predict_day(&self, meta: &DatasetMeta, day: &DayDataset) -> Result<Vec<T>> {
        match self {
            Calibrator::SuperPixel(c) => {
                day.frames.iter().map(|f| predict_super_pixel(c, f).map(|inv| inv.o2)).collect()
            }
            Calibrator::Ridge(r) => r.predict_day(meta, day),
        }
    }

    pub fn to_manifest(&self) -> String {
        let mut s = format!("{MANIFEST_MAGIC} v{MANIFEST_VERSION}\n");
        let join = |v: &[T]| v.iter().map(|x| x.to_f64_lossy().to_string()).collect::<Vec<_>>().join(" ");
        match self {
            Calibrator::SuperPixel(c) => {
                s.push_str("kind super_pixel\n");
                let _ = writeln!(s, "model {}", c.model().as_str());
                let cohort: Vec<String> = c.cohort.iter().map(|p| p.to_string()).collect();
                let _ = writeln!(s, "cohort {}", cohort.join(" "));
                match c.fitted {
                    SuperPixelModel::Linear(p) => {
                        let _ = writeln!(s, "params {}", join(&[p.i0, p.k_sv]));
                    }
                    SuperPixelModel::TwoSite(p) => {
                        let _ = writeln!(s, "params {}", join(&[p.i0, p.a, p.k1, p.k2]));
                    }
                }
            }
            Calibrator::Ridge(r) => {
                s.push_str("kind feature_ridge\n");
                let _ = writeln!(s, "features {}", FEATURE_NAMES.join(" "));
                let _ = writeln!(s, "lambda {}", join(&[r.ridge_lambda]));
                let _ = writeln!(s, "mean {}", join(&r.mean));
                let _ = writeln!(s, "scale {}", join(&r.scale));
                let _ = writeln!(s, "coef {}", join(&r.coef));
                let _ = writeln!(s, "intercept {}", join(&[r.intercept]));
                let usable: Vec<&str> = r.maps.usable.iter().map(|&u| if u { "1" } else { "0" }).collect();
                let _ = writeln!(s, "map_usable {}", usable.join(" "));
                for (name, v) in [
                    ("map_i0", &r.maps.i0),
                    ("map_k_sv", &r.maps.k_sv),
                    ("map_lod", &r.maps.lod),
                    ("map_dr", &r.maps.dr),
                    ("map_r2", &r.maps.r2),
                ] {
                    let _ = writeln!(s, "{name} {}", join(v));
                }
            }
        }
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("<calibrator manifest>", d);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty manifest".into()))?;
        let version = header
            .strip_prefix(MANIFEST_MAGIC)
            .and_then(|v| v.trim().strip_prefix('v'))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| bad(format!("bad header {header:?}")))?;
        if version != MANIFEST_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: MANIFEST_VERSION });
        }
        let mut fields = std::collections::HashMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once(' ').unwrap_or((line, ""));
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| fields.get(k).cloned().ok_or_else(|| bad(format!("missing field {k}")));
        let nums = |k: &str| -> Result<Vec<T>> {
            get(k)?
                .split_whitespace()
                .map(|t| t.parse::<f64>().map(T::lit).map_err(|e| bad(format!("{k}: {e}"))))
                .collect()
        };
        let arr8 = |k: &str| -> Result<[T; 8]> {
            let v = nums(k)?;
            v.try_into().map_err(|_| bad(format!("{k} must hold 8 values")))
        };
        let one = |k: &str| -> Result<T> { nums(k)?.first().copied().ok_or_else(|| bad(format!("{k} is empty"))) };
        match get("kind")?.as_str() {
            "super_pixel" => {
                let cohort: Vec<usize> = get("cohort")?
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|e| bad(format!("cohort: {e}"))))
                    .collect::<Result<_>>()?;
                let p = nums("params")?;
                let fitted = match (get("model")?.as_str(), p.as_slice()) {
                    ("linear", &[i0, k_sv]) => SuperPixelModel::Linear(SvLinear::new(i0, k_sv)?),
                    ("two_site", &[i0, a, k1, k2]) => SuperPixelModel::TwoSite(SvTwoSite::new(i0, a, k1, k2)?),
                    (m, _) => return Err(bad(format!("model {m} with {} params", p.len()))),
                };
                Ok(Calibrator::SuperPixel(SuperPixelCalibrator { cohort, fitted }))
            }
            "feature_ridge" => {
                let usable: Vec<bool> = get("map_usable")?.split_whitespace().map(|t| t == "1").collect();
                let maps = FeatureMaps {
                    i0: nums("map_i0")?,
                    k_sv: nums("map_k_sv")?,
                    lod: nums("map_lod")?,
                    dr: nums("map_dr")?,
                    r2: nums("map_r2")?,
                    usable,
                };
                let n = maps.usable.len();
                if [&maps.i0, &maps.k_sv, &maps.lod, &maps.dr, &maps.r2].iter().any(|m| m.len() != n) {
                    return Err(bad("map lengths differ".into()));
                }
                Ok(Calibrator::Ridge(FeatureRegressor {
                    ridge_lambda: one("lambda")?,
                    maps,
                    mean: arr8("mean")?,
                    scale: arr8("scale")?,
                    coef: arr8("coef")?,
                    intercept: one("intercept")?,
                }))
            }
            k => Err(bad(format!("unknown calibrator kind {k}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, simulate_with_truth, SimConfig};

    fn homogeneous() -> SimConfig {
        let mut cfg = SimConfig::noiseless();
        cfg.width = 12;
        cfg.height = 12;
        cfg.days = 3;
        cfg.frames_per_plateau = 2;
        cfg.response.i0_std = 0.0;
        cfg.response.k_std = 0.0;
        cfg.response.background = 200.0;
        cfg.film = crate::sim::FilmShape::Full;
        cfg.illumination = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        cfg
    }

    #[test]
    fn global_average_is_exact_on_homogeneous_data() {
        let ds = simulate(&homogeneous()).unwrap();
        let train = ds.select(&[1, 2]).unwrap();
        let cal = global_average_fit::<f64>(&ds.meta, &train).unwrap();
        for f in &ds.days[2].frames {
            let o2 = predict_super_pixel(&cal, f).unwrap().o2;
            assert!((o2 - f.do_gt).abs() < 1e-4, "{o2} vs {}", f.do_gt);
        }
    }

    #[test]
    fn global_average_needs_two_plateaus_and_a_zero() {
        let mut cfg = homogeneous();
        cfg.plateaus = vec![0.0];
        let ds = simulate(&cfg).unwrap();
        assert!(global_average_fit::<f64>(&ds.meta, &ds.select(&[1]).unwrap()).is_err());
        let mut ds = simulate(&homogeneous()).unwrap();
        ds.days[0].plateau_windows.remove(0);
        assert!(matches!(
            global_average_fit::<f64>(&ds.meta, &ds.select(&[1]).unwrap()),
            Err(Error::MissingZeroPlateau(_))
        ));
    }

    #[test]
    fn duplicated_day_gives_same_calibrator() {
        let ds = simulate(&SimConfig { width: 12, height: 12, days: 1, frames_per_plateau: 3, ..SimConfig::default() })
            .unwrap();
        let one = global_average_fit::<f64>(&ds.meta, &[&ds.days[0]]).unwrap();
        let two = global_average_fit::<f64>(&ds.meta, &[&ds.days[0], &ds.days[0]]).unwrap();
        let (SuperPixelModel::Linear(a), SuperPixelModel::Linear(b)) = (one.fitted, two.fitted) else { panic!() };
        assert!((a.i0 - b.i0).abs() <= 1e-12 * a.i0);
        assert!((a.k_sv - b.k_sv).abs() <= 1e-12 * a.k_sv);
    }

    #[test]
    fn all_pixel_cohort_reproduces_global_average() {
        let cfg = SimConfig {
            width: 12,
            height: 12,
            days: 2,
            frames_per_plateau: 3,
            film: crate::sim::FilmShape::Full,
            ..SimConfig::default()
        };
        let ds = simulate(&cfg).unwrap();
        let train = ds.select(&[1]).unwrap();
        let ga = global_average_fit::<f64>(&ds.meta, &train).unwrap();
        let (bp, maps) =
            best_pixels_fit::<f64>(&ds.meta, &train, RankMetric::Lod, SvModel::Linear, 144, &FitOptions::default())
                .unwrap();
        assert_eq!(maps.ok_count(SvModel::Linear), 144);
        assert_eq!(ga, bp);
    }

    #[test]
    fn planted_cohort_beats_noise() {
        let mut cfg = homogeneous();
        cfg.noise_sigma = 0.0;
        let ds = simulate(&cfg).unwrap();
        let planted: Vec<usize> = vec![5, 17, 30, 44, 61, 70, 88, 99, 120, 131];
        // heavy noise everywhere except the planted pixels
        let mut noisy = ds.clone();
        let mut state = 12345u64;
        for day in noisy.days.iter_mut() {
            for f in day.frames.iter_mut() {
                for p in 0..144 {
                    if planted.contains(&p) {
                        continue;
                    }
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let u = (state >> 11) as f64 / (1u64 << 53) as f64;
                    f.pixels[p * 3] *= 0.6 + 0.8 * u;
                }
            }
        }
        let train = noisy.select(&[1, 2]).unwrap();
        let (bp, _) =
            best_pixels_fit::<f64>(&noisy.meta, &train, RankMetric::R2, SvModel::Linear, 10, &FitOptions::default())
                .unwrap();
        assert_eq!(bp.cohort, planted);
        let ga = global_average_fit::<f64>(&noisy.meta, &train).unwrap();
        let test = &noisy.days[2];
        let mae = |c: &SuperPixelCalibrator<f64>| {
            test.frames.iter().map(|f| (predict_super_pixel(c, f).unwrap().o2 - f.do_gt).abs()).sum::<f64>()
                / test.frames.len() as f64
        };
        assert!(mae(&bp) < mae(&ga));
        assert!(mae(&bp) < 1e-3);
    }

    #[test]
    fn cohort_order_does_not_matter() {
        let ds = simulate(&SimConfig { width: 12, height: 12, days: 1, frames_per_plateau: 2, ..SimConfig::default() })
            .unwrap();
        let train = ds.select(&[1]).unwrap();
        let a =
            fit_cohort::<f64>(vec![3, 50, 7, 90], &ds.meta, &train, SvModel::Linear, &FitOptions::default()).unwrap();
        let b =
            fit_cohort::<f64>(vec![90, 7, 50, 3], &ds.meta, &train, SvModel::Linear, &FitOptions::default()).unwrap();
        assert_eq!(a, b);
        for f in &ds.days[0].frames {
            assert_eq!(predict_super_pixel(&a, f).unwrap(), predict_super_pixel(&b, f).unwrap());
        }
        assert!(fit_cohort::<f64>(vec![3, 3], &ds.meta, &train, SvModel::Linear, &FitOptions::default()).is_err());
        assert!(fit_cohort::<f64>(vec![], &ds.meta, &train, SvModel::Linear, &FitOptions::default()).is_err());
    }

    #[test]
    fn occluded_cohort_is_rejected() {
        let ds = simulate(&homogeneous()).unwrap();
        let cal = global_average_fit::<f64>(&ds.meta, &ds.select(&[1]).unwrap()).unwrap();
        let mut f = ds.days[0].frames[0].clone();
        f.pixels.iter_mut().for_each(|v| *v = 0.0);
        assert!(matches!(predict_super_pixel(&cal, &f), Err(Error::InvalidIntensity(_))));
        let zero = &ds.days[0].frames[0];
        assert!(predict_super_pixel(&cal, zero).unwrap().o2.abs() < 1e-6);
    }

    #[test]
    fn two_site_super_pixel_round_trips() {
        let mut cfg = homogeneous();
        cfg.plateaus = vec![0.0, 40.0, 80.0, 120.0, 160.0, 200.0, 250.0];
        cfg.response.two_site_fraction = 1.0;
        let (ds, truth) = simulate_with_truth(&cfg).unwrap();
        let train = ds.select(&[1, 2]).unwrap();
        let (bp, _) =
            best_pixels_fit::<f64>(&ds.meta, &train, RankMetric::R2, SvModel::TwoSite, 20, &FitOptions::default())
                .unwrap();
        assert_eq!(bp.model(), SvModel::TwoSite);
        assert!(truth.two_site.iter().all(|t| t.is_some()));
        for f in &ds.days[2].frames {
            let o2 = predict_super_pixel(&bp, f).unwrap().o2;
            assert!((o2 - f.do_gt).abs() < 0.5, "{o2} vs {}", f.do_gt);
        }
    }

    #[test]
    fn standardization_constants_are_exact() {
        let ds = simulate(&SimConfig { width: 16, height: 16, days: 3, frames_per_plateau: 3, ..SimConfig::default() })
            .unwrap();
        let train = ds.select(&[1, 2]).unwrap();
        let r = feature_regressor_fit::<f64>(&ds.meta, &train, 1e-2, &FitOptions::default()).unwrap();
        let rows: Vec<[f64; 8]> = train.iter().flat_map(|d| day_features(&r.maps, &ds.meta, d).unwrap()).collect();
        let n = rows.len() as f64;
        for j in 0..8 {
            let z: Vec<f64> = rows.iter().map(|x| (x[j] - r.mean[j]) / r.scale[j]).collect();
            let m = z.iter().sum::<f64>() / n;
            let v = z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            assert!(m.abs() < 1e-12, "feature {j} mean {m}");
            assert!((v - 1.0).abs() < 1e-12, "feature {j} var {v}");
        }
    }

    #[test]
    fn ridge_limits() {
        // exactly linear target on a full-rank design
        let rows: Vec<[f64; 8]> = (0..40)
            .map(|i| {
                let t = i as f64;
                [
                    t,
                    (t * 0.7).sin(),
                    (t * 1.3).cos(),
                    t * t / 40.0,
                    (t * 0.2).exp(),
                    (t * 2.1).sin(),
                    (t * 0.37).cos(),
                    (t + 1.0).ln(),
                ]
            })
            .collect();
        let y: Vec<f64> = rows.iter().map(|r| 3.0 * r[0] - 2.0 * r[1] + 0.5 * r[4] + 7.0).collect();
        let (mean, scale, coef, b0) = ridge_solve(&rows, &y, 0.0).unwrap();
        for (r, yv) in rows.iter().zip(&y) {
            let pred: f64 = b0 + (0..8).map(|j| coef[j] * (r[j] - mean[j]) / scale[j]).sum::<f64>();
            assert!((pred - yv).abs() < 1e-8);
        }
        let (_, _, coef, b0) = ridge_solve(&rows, &y, 1e12).unwrap();
        assert!(coef.iter().all(|c| c.abs() < 1e-9));
        assert!((b0 - y.iter().sum::<f64>() / 40.0).abs() < 1e-12);
        let mut collinear = rows.clone();
        collinear.iter_mut().for_each(|r| r[7] = 2.0 * r[0]);
        assert!(matches!(ridge_solve(&collinear, &y, 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn manifests_round_trip() {
        let ds = simulate(&SimConfig { width: 12, height: 12, days: 2, frames_per_plateau: 3, ..SimConfig::default() })
            .unwrap();
        let train = ds.select(&[1]).unwrap();
        let opts = FitOptions::default();
        for kind in [
            BaselineKind::GlobalAverage,
            BaselineKind::BestPixels { metric: RankMetric::R2, model: SvModel::TwoSite, n: 10 },
            BaselineKind::FeatureRidge { lambda: 1e-2 },
        ] {
            let c = Calibrator::<f64>::fit(&kind, &ds.meta, &train, &opts).unwrap();
            let back = Calibrator::<f64>::from_manifest(&c.to_manifest()).unwrap();
            assert_eq!(c, back);
            assert_eq!(c.predict_day(&ds.meta, &ds.days[1]).unwrap(), back.predict_day(&ds.meta, &ds.days[1]).unwrap());
        }
        let bumped = Calibrator::<f64>::fit(&BaselineKind::GlobalAverage, &ds.meta, &train, &opts)
            .unwrap()
            .to_manifest()
            .replace("v1", "v9");
        assert!(matches!(Calibrator::<f64>::from_manifest(&bumped), Err(Error::UnsupportedVersion { found: 9, .. })));
    }
}
