//! Per-pixel Stern–Volmer fitting and pixel ranking.
//!
//! Every pixel's plateau-mean intensities are fitted independently to the
//! one-site and two-site models. The resulting [`ParameterMaps`] drive the
//! "best pixels" cohorts and the physics-guided network variant.

pub mod lm;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use lm::FitOptions;
use lm::{LeastSquares, LmOutcome};

use crate::data::{DatasetMeta, DayDataset};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sv::{self, PixelMetrics, SvLinear, SvTwoSite};

/// Plateau-averaged red intensities of one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSeries<T> {
    pub intensities: Vec<T>,
    /// Strictly increasing, starting at 0.
    pub concentrations: Vec<T>,
    /// Standard deviation of the raw intensity on the zero-oxygen plateau.
    pub sigma_zero: T,
}

impl<T: Scalar> PixelSeries<T> {
    pub fn validate(&self, min_len: usize) -> Result<()> {
        if self.intensities.len() != self.concentrations.len() {
            return Err(Error::Precondition(format!(
                "{} intensities vs {} concentrations",
                self.intensities.len(),
                self.concentrations.len()
            )));
        }
        if self.concentrations.len() < min_len {
            return Err(Error::Precondition(format!(
                "need at least {min_len} plateaus, got {}",
                self.concentrations.len()
            )));
        }
        if self.concentrations[0] != T::zero() {
            return Err(Error::MissingZeroPlateau("first plateau is not 0 µmol/L".into()));
        }
        if self.concentrations.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Precondition("concentrations must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Ok,
    Degenerate,
    Failed,
}

impl FitStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            FitStatus::Ok => "ok",
            FitStatus::Degenerate => "degenerate",
            FitStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit<T> {
    pub params: SvLinear<T>,
    pub metrics: PixelMetrics<T>,
    pub sse: T,
    pub status: FitStatus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoSiteFit<T> {
    pub params: SvTwoSite<T>,
    pub metrics: PixelMetrics<T>,
    pub sse: T,
    pub status: FitStatus,
}

fn plateau_dr<T: Scalar>(s: &PixelSeries<T>) -> Option<T> {
    let first = s.intensities[0];
    let last = *s.intensities.last()?;
    sv::dynamic_range(first, last).ok()
}

/// Zero-intercept least squares of `y = I0/I − 1` against concentration, with
/// `I0` pinned to the zero-oxygen plateau mean.
pub fn fit_linear_pixel<T: Scalar>(s: &PixelSeries<T>) -> Result<LinearFit<T>> {
    s.validate(3)?;
    let i0 = s.intensities[0];
    let degenerate = |i0: T| {
        let safe_i0 = if i0 > T::zero() { i0 } else { T::min_positive_value() };
        LinearFit {
            params: SvLinear { i0: safe_i0, k_sv: T::zero() },
            metrics: PixelMetrics::degenerate(safe_i0, plateau_dr(s).unwrap_or(T::zero())),
            sse: T::nan(),
            status: FitStatus::Degenerate,
        }
    };
    if !(i0 > T::zero()) || s.intensities.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
        return Ok(degenerate(i0));
    }
    let y: Vec<T> = s.intensities.iter().map(|&v| i0 / v - T::one()).collect();
    let sxy: T = y.iter().zip(&s.concentrations).map(|(&y, &c)| y * c).sum();
    let sxx: T = s.concentrations.iter().map(|&c| c * c).sum();
    let slope = sxy / sxx;
    let Some(dr) = plateau_dr(s) else {
        return Ok(degenerate(i0));
    };
    if !(slope > T::zero()) {
        return Ok(degenerate(i0));
    }
    let pred: Vec<T> = s.concentrations.iter().map(|&c| slope * c).collect();
    let r2 = match sv::r_squared(&y, &pred) {
        Ok(r2) => r2,
        Err(_) => return Ok(degenerate(i0)),
    };
    let params = SvLinear { i0, k_sv: slope };
    let sse = s
        .intensities
        .iter()
        .zip(&s.concentrations)
        .map(|(&obs, &c)| {
            let d = sv::sv_forward_linear(&params, c) - obs;
            d * d
        })
        .sum();
    let lod = sv::lod(s.sigma_zero / i0, slope)?;
    Ok(LinearFit { params, metrics: PixelMetrics { k_sv: slope, i0, dr, lod, r2 }, sse, status: FitStatus::Ok })
}

struct TwoSiteProblem<'a, T> {
    series: &'a PixelSeries<T>,
}

impl<T: Scalar> LeastSquares<T> for TwoSiteProblem<'_, T> {
    fn n_params(&self) -> usize {
        4
    }
    fn n_residuals(&self) -> usize {
        self.series.intensities.len()
    }
    fn residuals(&self, t: &[T], out: &mut [T]) {
        let p = SvTwoSite { i0: t[0], a: t[1], k1: t[2], k2: t[3] };
        for (o, (&c, &obs)) in out.iter_mut().zip(self.series.concentrations.iter().zip(&self.series.intensities)) {
            *o = sv::sv_forward_two_site(&p, c) - obs;
        }
    }
    fn jacobian(&self, t: &[T], out: &mut [T]) {
        let (i0, a, k1, k2) = (t[0], t[1], t[2], t[3]);
        let one = T::one();
        for (row, &c) in self.series.concentrations.iter().enumerate() {
            let d1 = one / (one + k1 * c);
            let d2 = one / (one + k2 * c);
            let j = &mut out[row * 4..row * 4 + 4];
            j[0] = a * d1 + (one - a) * d2;
            j[1] = i0 * (d1 - d2);
            j[2] = -i0 * a * c * d1 * d1;
            j[3] = -i0 * (one - a) * c * d2 * d2;
        }
    }
    fn project(&self, t: &mut [T]) {
        t[0] = t[0].max(T::lit(1e-12));
        t[1] = t[1].max(T::zero()).min(T::one());
        t[2] = t[2].max(T::zero());
        t[3] = t[3].max(T::zero());
    }
}

/// Default two-site starting point derived from the one-site fit.
pub fn two_site_init<T: Scalar>(linear: &SvLinear<T>) -> SvTwoSite<T> {
    SvTwoSite { i0: linear.i0, a: T::lit(0.8), k1: linear.k_sv, k2: linear.k_sv / T::lit(10.0) }
}

/// Bounded Levenberg–Marquardt fit of the two-site model in the intensity
/// domain. R² is reported on the `I0/I − 1` ratio.
pub fn fit_two_site_pixel<T: Scalar>(
    s: &PixelSeries<T>,
    init: &SvTwoSite<T>,
    opts: &FitOptions,
) -> Result<TwoSiteFit<T>> {
    s.validate(4)?;
    init.validate()?;
    let i0_obs = s.intensities[0];
    let dr = plateau_dr(s);
    let degenerate = |p: SvTwoSite<T>| TwoSiteFit {
        params: p,
        metrics: PixelMetrics::degenerate(p.i0, dr.unwrap_or(T::zero())),
        sse: T::nan(),
        status: FitStatus::Degenerate,
    };
    if !(i0_obs > T::zero()) || s.intensities.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
        return Ok(degenerate(*init));
    }
    let Some(dr) = dr else {
        return Ok(degenerate(*init));
    };

    let problem = TwoSiteProblem { series: s };
    let mut rep = lm::minimize(&problem, &[init.i0, init.a, init.k1, init.k2], opts);
    // second start on the nested one-site solution, so the result never loses to it
    let lin = fit_linear_pixel(s)?;
    if lin.status == FitStatus::Ok {
        let k = lin.params.k_sv;
        let alt = lm::minimize(&problem, &[lin.params.i0, T::one(), k, k / T::lit(10.0)], opts);
        if alt.sse < rep.sse {
            rep = alt;
        }
    }
    let t = &rep.theta;
    let params = SvTwoSite::canonical(t[0], t[1], t[2], t[3]);
    let status = match rep.outcome {
        LmOutcome::Converged => FitStatus::Ok,
        LmOutcome::MaxIterations => FitStatus::Failed,
        LmOutcome::RankDeficient => FitStatus::Degenerate,
    };
    let k_eff = params.effective_k_sv();
    if status == FitStatus::Degenerate || !(k_eff > T::zero()) {
        return Ok(TwoSiteFit { status: FitStatus::Degenerate, sse: rep.sse, ..degenerate(params) });
    }

    let y: Vec<T> = s.intensities.iter().map(|&v| i0_obs / v - T::one()).collect();
    let yhat: Vec<T> =
        s.concentrations.iter().map(|&c| params.i0 / sv::sv_forward_two_site(&params, c) - T::one()).collect();
    let r2 = match sv::r_squared(&y, &yhat) {
        Ok(v) => v,
        Err(_) => return Ok(TwoSiteFit { sse: rep.sse, ..degenerate(params) }),
    };
    let lod = sv::lod(s.sigma_zero / params.i0, k_eff)?;
    Ok(TwoSiteFit { params, metrics: PixelMetrics { k_sv: k_eff, i0: params.i0, dr, lod, r2 }, sse: rep.sse, status })
}

/// Per-pixel plateau means on a grid, averaged over the days they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauStack<T> {
    pub width: usize,
    pub height: usize,
    pub concentrations: Vec<T>,
    /// `[pixel][plateau]`, row-major pixels.
    pub means: Vec<T>,
    pub sigma_zero: Vec<T>,
}

impl<T: Scalar> PlateauStack<T> {
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn series(&self, pixel: usize) -> PixelSeries<T> {
        let np = self.concentrations.len();
        PixelSeries {
            intensities: self.means[pixel * np..(pixel + 1) * np].to_vec(),
            concentrations: self.concentrations.clone(),
            sigma_zero: self.sigma_zero[pixel],
        }
    }

    /// Red-channel plateau means per pixel, averaged with equal weight over
    /// `days`. Every day must share the same set-point sequence.
    pub fn from_days(meta: &DatasetMeta, days: &[&DayDataset]) -> Result<Self> {
        let first = days.first().ok_or_else(|| Error::Precondition("no days to aggregate".into()))?;
        let concentrations: Vec<f64> = first.plateau_windows.iter().map(|w| w.o2).collect();
        if concentrations.first() != Some(&0.0) {
            return Err(Error::MissingZeroPlateau(format!("day {}", first.day_index)));
        }
        let n_pix = meta.n_pixels();
        let np = concentrations.len();
        let mut means = vec![0.0f64; n_pix * np];
        let mut var0 = vec![0.0f64; n_pix];
        for day in days {
            let sp: Vec<f64> = day.plateau_windows.iter().map(|w| w.o2).collect();
            if sp != concentrations {
                return Err(Error::Precondition(format!("day {} has a different plateau sequence", day.day_index)));
            }
            for (k, w) in day.plateau_windows.iter().enumerate() {
                let frames = &day.frames[w.start..w.end];
                let n = frames.len() as f64;
                for f in frames {
                    f.check_grid(meta.width, meta.height)?;
                }
                for p in 0..n_pix {
                    let m = frames.iter().map(|f| f.red(p)).sum::<f64>() / n;
                    means[p * np + k] += m;
                    if k == 0 && frames.len() > 1 {
                        let v = frames.iter().map(|f| (f.red(p) - m).powi(2)).sum::<f64>() / (n - 1.0);
                        var0[p] += v;
                    }
                }
            }
        }
        let nd = days.len() as f64;
        Ok(Self {
            width: meta.width,
            height: meta.height,
            concentrations: concentrations.iter().map(|&c| T::lit(c)).collect(),
            means: means.iter().map(|&m| T::lit(m / nd)).collect(),
            sigma_zero: var0.iter().map(|&v| T::lit((v / nd).sqrt())).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterMaps<T> {
    pub width: usize,
    pub height: usize,
    pub linear: Vec<LinearFit<T>>,
    pub two_site: Vec<TwoSiteFit<T>>,
}

impl<T: Scalar> ParameterMaps<T> {
    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn status(&self, model: SvModel, pixel: usize) -> FitStatus {
        match model {
            SvModel::Linear => self.linear[pixel].status,
            SvModel::TwoSite => self.two_site[pixel].status,
        }
    }

    pub fn metrics(&self, model: SvModel, pixel: usize) -> &PixelMetrics<T> {
        match model {
            SvModel::Linear => &self.linear[pixel].metrics,
            SvModel::TwoSite => &self.two_site[pixel].metrics,
        }
    }

    pub fn ok_count(&self, model: SvModel) -> usize {
        (0..self.n_pixels()).filter(|&p| self.status(model, p) == FitStatus::Ok).count()
    }
}

/// Fits both models on every pixel. Output order is row-major regardless of
/// how rayon schedules the work.
pub fn fit_all_pixels<T: Scalar>(stack: &PlateauStack<T>, opts: &FitOptions) -> Result<ParameterMaps<T>> {
    if stack.means.len() != stack.n_pixels() * stack.concentrations.len() || stack.sigma_zero.len() != stack.n_pixels()
    {
        return Err(Error::Dimension("plateau stack does not match its grid".into()));
    }
    let fits: Vec<(LinearFit<T>, TwoSiteFit<T>)> = (0..stack.n_pixels())
        .into_par_iter()
        .map(|p| -> Result<_> {
            let s = stack.series(p);
            let lin = fit_linear_pixel(&s)?;
            let two = if lin.status == FitStatus::Ok && s.intensities.len() >= 4 {
                fit_two_site_pixel(&s, &two_site_init(&lin.params), opts)?
            } else {
                TwoSiteFit {
                    params: SvTwoSite { i0: lin.params.i0, a: T::one(), k1: T::zero(), k2: T::zero() },
                    metrics: PixelMetrics::degenerate(lin.params.i0, lin.metrics.dr),
                    sse: T::nan(),
                    status: FitStatus::Degenerate,
                }
            };
            Ok((lin, two))
        })
        .collect::<Result<_>>()?;
    let (linear, two_site) = fits.into_iter().unzip();
    Ok(ParameterMaps { width: stack.width, height: stack.height, linear, two_site })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SvModel {
    Linear,
    TwoSite,
}

impl SvModel {
    pub fn as_str(self) -> &'static str {
        match self {
            SvModel::Linear => "linear",
            SvModel::TwoSite => "two_site",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankMetric {
    KSv,
    Dr,
    I0,
    Lod,
    R2,
}

impl RankMetric {
    pub const ALL: [RankMetric; 5] = [RankMetric::KSv, RankMetric::Dr, RankMetric::I0, RankMetric::Lod, RankMetric::R2];

    pub fn higher_is_better(self) -> bool {
        !matches!(self, RankMetric::Lod)
    }

    pub fn value<T: Scalar>(self, m: &PixelMetrics<T>) -> T {
        match self {
            RankMetric::KSv => m.k_sv,
            RankMetric::Dr => m.dr,
            RankMetric::I0 => m.i0,
            RankMetric::Lod => m.lod,
            RankMetric::R2 => m.r2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RankMetric::KSv => "k_sv",
            RankMetric::Dr => "dr",
            RankMetric::I0 => "i0",
            RankMetric::Lod => "lod",
            RankMetric::R2 => "r2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    pub pixels: Vec<usize>,
    /// Fewer usable pixels than requested; the list holds all of them.
    pub truncated: bool,
}

/// Top-`n` usable pixels by `metric`; ties go to the lower row-major index.
pub fn rank_pixels<T: Scalar>(
    maps: &ParameterMaps<T>,
    metric: RankMetric,
    model: SvModel,
    n: usize,
) -> Result<Ranking> {
    if n == 0 {
        return Err(Error::Precondition("rank_pixels needs n >= 1".into()));
    }
    let mut cands: Vec<(usize, T)> = (0..maps.n_pixels())
        .filter(|&p| maps.status(model, p) == FitStatus::Ok)
        .map(|p| (p, metric.value(maps.metrics(model, p))))
        .filter(|(_, v)| !v.is_nan())
        .collect();
    let higher = metric.higher_is_better();
    cands.sort_by(|a, b| {
        let ord = a.1.partial_cmp(&b.1).expect("NaN filtered");
        let ord = if higher { ord.reverse() } else { ord };
        ord.then(a.0.cmp(&b.0))
    });
    let truncated = cands.len() < n;
    if truncated {
        log::warn!("rank_pixels: requested {n} pixels, only {} usable", cands.len());
    }
    Ok(Ranking { pixels: cands.into_iter().take(n).map(|(p, _)| p).collect(), truncated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn series_from(mut f: impl FnMut(f64) -> f64, conc: &[f64], sigma: f64) -> PixelSeries<f64> {
        PixelSeries {
            intensities: conc.iter().map(|&c| f(c)).collect(),
            concentrations: conc.to_vec(),
            sigma_zero: sigma,
        }
    }

    fn five() -> Vec<f64> {
        vec![0.0, 62.5, 125.0, 187.5, 250.0]
    }

    fn eight() -> Vec<f64> {
        (0..8).map(|i| i as f64 * 40.0).collect()
    }

    #[test]
    fn linear_noiseless_recovery() {
        let p = SvLinear::new(120.0, 0.008).unwrap();
        let s = series_from(|c| sv::sv_forward_linear(&p, c), &five(), 0.5);
        let fit = fit_linear_pixel(&s).unwrap();
        assert_eq!(fit.status, FitStatus::Ok);
        assert!((fit.params.k_sv - 0.008).abs() <= 1e-9 * 0.008);
        assert!((fit.metrics.r2 - 1.0).abs() < 1e-12);
        assert!((fit.metrics.dr - (120.0 - 120.0 / 3.0)).abs() < 1e-9);
        // σ on the ratio is 0.5/120, LOD = 3σ/k
        assert!((fit.metrics.lod - 3.0 * (0.5 / 120.0) / 0.008).abs() < 1e-9);
    }

    #[test]
    fn linear_constant_is_degenerate() {
        let s = series_from(|_| 80.0, &five(), 0.0);
        let fit = fit_linear_pixel(&s).unwrap();
        assert_eq!(fit.status, FitStatus::Degenerate);
        assert_eq!(fit.params.k_sv, 0.0);
        assert!(fit.metrics.r2.is_nan());
        let zero = series_from(|_| 0.0, &five(), 0.0);
        assert_eq!(fit_linear_pixel(&zero).unwrap().status, FitStatus::Degenerate);
    }

    #[test]
    fn linear_rejects_bad_series() {
        let mut s = series_from(|c| 100.0 / (1.0 + 0.01 * c), &five(), 0.0);
        s.concentrations[2] = s.concentrations[1];
        assert!(fit_linear_pixel(&s).is_err());
        let short = series_from(|c| 100.0 / (1.0 + 0.01 * c), &[0.0, 10.0], 0.0);
        assert!(fit_linear_pixel(&short).is_err());
        let no_zero = series_from(|c| 100.0 / (1.0 + 0.01 * c), &[5.0, 10.0, 20.0], 0.0);
        assert!(matches!(fit_linear_pixel(&no_zero), Err(Error::MissingZeroPlateau(_))));
    }

    /// Monte-Carlo oracle: the slope estimator is unbiased to within sampling error.
    #[test]
    fn linear_noisy_recovery_is_unbiased() {
        let truth = SvLinear::new(120.0, 0.008).unwrap();
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ks: Vec<f64> = (0..100)
            .map(|_| {
                let s = series_from(|c| sv::sv_forward_linear(&truth, c) + noise.sample(&mut rng), &five(), 1.0);
                fit_linear_pixel(&s).unwrap().params.k_sv
            })
            .collect();
        let mean = ks.iter().sum::<f64>() / ks.len() as f64;
        let sd = (ks.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (ks.len() - 1) as f64).sqrt();
        let se = sd / (ks.len() as f64).sqrt();
        assert!((mean - 0.008).abs() <= 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn two_site_noiseless_recovery() {
        let truth = SvTwoSite::new(100.0, 0.7, 0.015, 0.002).unwrap();
        let s = series_from(|c| sv::sv_forward_two_site(&truth, c), &eight(), 0.1);
        let lin = fit_linear_pixel(&s).unwrap();
        let fit = fit_two_site_pixel(&s, &two_site_init(&lin.params), &FitOptions::default()).unwrap();
        assert_eq!(fit.status, FitStatus::Ok);
        let p = fit.params;
        for (got, want) in [(p.i0, 100.0), (p.a, 0.7), (p.k1, 0.015), (p.k2, 0.002)] {
            assert!((got - want).abs() <= 1e-6 * want, "{p:?}");
        }
    }

    #[test]
    fn two_site_on_linear_data_collapses() {
        let truth = SvLinear::new(150.0, 0.006).unwrap();
        let s = series_from(|c| sv::sv_forward_linear(&truth, c), &eight(), 0.1);
        let lin = fit_linear_pixel(&s).unwrap();
        let fit = fit_two_site_pixel(&s, &two_site_init(&lin.params), &FitOptions::default()).unwrap();
        assert_ne!(fit.status, FitStatus::Degenerate);
        let p = fit.params;
        let collapsed = (p.a - 1.0).abs() < 1e-4 || (p.k1 - p.k2).abs() < 1e-4 * p.k1 || p.a < 1e-4;
        assert!(collapsed, "{p:?}");
        assert!((fit.metrics.r2 - lin.metrics.r2).abs() <= 1e-9);
    }

    #[test]
    fn two_site_rejects_bad_init() {
        let truth = SvLinear::new(150.0, 0.006).unwrap();
        let s = series_from(|c| sv::sv_forward_linear(&truth, c), &five(), 0.1);
        let bad = SvTwoSite { i0: 150.0, a: 1.5, k1: 0.01, k2: 0.001 };
        assert!(matches!(fit_two_site_pixel(&s, &bad, &FitOptions::default()), Err(Error::Precondition(_))));
    }

    fn stack_from(fields: &[(f64, f64)], w: usize, h: usize, noise_sd: f64, seed: u64) -> PlateauStack<f64> {
        let conc = five();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, noise_sd.max(1e-300)).unwrap();
        let mut means = Vec::new();
        for &(i0, k) in fields {
            for &c in &conc {
                let e = if noise_sd > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                means.push(if i0 > 0.0 { i0 / (1.0 + k * c) + e } else { 0.0 });
            }
        }
        PlateauStack { width: w, height: h, concentrations: conc, means, sigma_zero: vec![noise_sd; w * h] }
    }

    #[test]
    fn all_pixels_recover_heterogeneous_fields() {
        let fields: Vec<(f64, f64)> =
            (0..64).map(|p| (80.0 + 3.0 * p as f64, 0.004 + 0.0002 * (p % 13) as f64)).collect();
        let maps = fit_all_pixels(&stack_from(&fields, 8, 8, 0.0, 0), &FitOptions::default()).unwrap();
        for (p, &(i0, k)) in fields.iter().enumerate() {
            assert_eq!(maps.linear[p].status, FitStatus::Ok);
            assert!((maps.linear[p].params.k_sv - k).abs() <= 1e-9 * k);
            assert!((maps.linear[p].params.i0 - i0).abs() <= 1e-9 * i0);
        }
    }

    #[test]
    fn occluded_pixel_is_flagged() {
        let mut fields = vec![(100.0, 0.01); 64];
        fields[27] = (0.0, 0.0);
        let maps = fit_all_pixels(&stack_from(&fields, 8, 8, 0.0, 0), &FitOptions::default()).unwrap();
        let flagged: Vec<usize> = (0..64).filter(|&p| maps.linear[p].status != FitStatus::Ok).collect();
        assert_eq!(flagged, vec![27]);
        assert_eq!(maps.two_site[27].status, FitStatus::Degenerate);
    }

    #[test]
    fn identical_pixels_fit_identically() {
        let fields = vec![(100.0, 0.01); 16];
        let maps = fit_all_pixels(&stack_from(&fields, 4, 4, 0.0, 0), &FitOptions::default()).unwrap();
        assert!(maps.linear.iter().all(|f| *f == maps.linear[0]));
        assert!(maps.two_site.iter().all(|f| *f == maps.two_site[0]));
    }

    #[test]
    fn fit_is_deterministic_and_two_site_nests_linear() {
        let fields: Vec<(f64, f64)> = (0..36).map(|p| (90.0 + p as f64, 0.006 + 0.0001 * p as f64)).collect();
        let stack = stack_from(&fields, 6, 6, 1.0, 5);
        let a = fit_all_pixels(&stack, &FitOptions::default()).unwrap();
        let b = fit_all_pixels(&stack, &FitOptions::default()).unwrap();
        assert_eq!(format!("{a:?}"), format!("{b:?}"));
        for p in 0..36 {
            if a.two_site[p].status == FitStatus::Ok {
                assert!(a.two_site[p].sse <= a.linear[p].sse * (1.0 + 1e-9) + 1e-12, "pixel {p}");
            }
        }
    }

    #[test]
    fn ranking_finds_planted_cohort() {
        let mut fields = vec![(100.0, 0.01); 100];
        let planted = [3, 17, 22, 40, 41, 58, 66, 77, 90, 99];
        let mut stack = stack_from(&fields, 10, 10, 2.0, 9);
        fields.clear();
        let clean = stack_from(&vec![(100.0, 0.01); 100], 10, 10, 0.0, 0);
        for &p in &planted {
            for k in 0..5 {
                stack.means[p * 5 + k] = clean.means[p * 5 + k];
            }
        }
        let maps = fit_all_pixels(&stack, &FitOptions::default()).unwrap();
        let top = rank_pixels(&maps, RankMetric::R2, SvModel::Linear, 10).unwrap();
        let mut got = top.pixels.clone();
        got.sort();
        assert_eq!(got, planted.to_vec());
        assert!(!top.truncated);
    }

    #[test]
    fn ranking_tie_break_and_truncation() {
        let maps = fit_all_pixels(&stack_from(&vec![(100.0, 0.01); 16], 4, 4, 0.0, 0), &FitOptions::default()).unwrap();
        for metric in RankMetric::ALL {
            assert_eq!(rank_pixels(&maps, metric, SvModel::Linear, 5).unwrap().pixels, vec![0, 1, 2, 3, 4]);
        }
        let all = rank_pixels(&maps, RankMetric::KSv, SvModel::Linear, 40).unwrap();
        assert!(all.truncated);
        assert_eq!(all.pixels, (0..16).collect::<Vec<_>>());
        assert!(rank_pixels(&maps, RankMetric::KSv, SvModel::Linear, 0).is_err());
    }

    #[test]
    fn ranking_prefixes_are_consistent() {
        let fields: Vec<(f64, f64)> =
            (0..49).map(|p| (90.0 + (p * 7 % 11) as f64, 0.006 + 0.0001 * (p % 5) as f64)).collect();
        let maps = fit_all_pixels(&stack_from(&fields, 7, 7, 0.5, 3), &FitOptions::default()).unwrap();
        for model in [SvModel::Linear, SvModel::TwoSite] {
            for metric in RankMetric::ALL {
                let ok = maps.ok_count(model);
                let full = rank_pixels(&maps, metric, model, ok).unwrap().pixels;
                for n in 1..ok {
                    assert_eq!(rank_pixels(&maps, metric, model, n).unwrap().pixels, full[..n]);
                }
            }
        }
    }
}
