//! Deterministic synthetic planar-optode generator.
//!
//! Each pixel follows
//! `I = g_d · L · B · I0 · (1 − bleach)^d / (1 + K(T)·[O2]) + ε`
//! with a polynomial illumination field `L`, a fouling transmission `B`,
//! a per-day LED gain `g_d` and Gaussian read noise. Fouling has two layers:
//! an anchored biofilm that only grows, and transient aggregates that drift
//! across the film within a day.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetMeta, DayDataset, Frame, PlateauWindow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FilmShape {
    Full,
    /// Centered ellipse; semi-axes as fractions of the grid width / height.
    Ellipse {
        semi_x: f64,
        semi_y: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResponseConfig {
    pub i0_mean: f64,
    /// log-space std of the I0 field
    pub i0_std: f64,
    pub k_mean: f64,
    /// log-space std of the K_SV field
    pub k_std: f64,
    /// share of the log-variance carried by the spatially smooth component
    pub smooth_fraction: f64,
    /// Gaussian correlation length of the smooth component, pixels
    pub smooth_scale: f64,
    /// fraction of film pixels with a two-site response
    pub two_site_fraction: f64,
    /// relative change of K_SV per °C around 20 °C
    pub temp_coeff: f64,
    /// off-film background level before illumination and gain
    pub background: f64,
}

impl Default for ResponseConfig {
    fn default() -> Self {
        Self {
            i0_mean: 200.0,
            i0_std: 0.15,
            k_mean: 0.005,
            k_std: 0.4,
            smooth_fraction: 0.7,
            smooth_scale: 4.0,
            two_site_fraction: 0.0,
            temp_coeff: 0.005,
            background: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoulingConfig {
    /// biofilm colonies present before day 1
    pub initial_blobs: usize,
    /// new colonies per day (Poisson mean)
    pub birth_rate: f64,
    pub radius_mean: f64,
    /// pixels per day
    pub radius_growth: f64,
    pub opacity_init: f64,
    /// absolute opacity per day
    pub opacity_growth: f64,
    pub opacity_max: f64,
    /// transient aggregates per day (Poisson mean)
    pub aggregates_per_day: f64,
    pub aggregate_radius: f64,
    pub aggregate_opacity: f64,
    /// aggregate drift speed, pixels per frame
    pub drift: f64,
    /// 1-based day receiving an out-of-distribution aggregate load
    pub ood_day: Option<usize>,
    /// aggregate count multiplier on the out-of-distribution day
    pub ood_factor: f64,
}

impl Default for FoulingConfig {
    fn default() -> Self {
        Self {
            initial_blobs: 4,
            birth_rate: 0.3,
            radius_mean: 2.5,
            radius_growth: 0.25,
            opacity_init: 0.1,
            opacity_growth: 0.05,
            opacity_max: 0.9,
            aggregates_per_day: 2.0,
            aggregate_radius: 2.5,
            aggregate_opacity: 0.5,
            drift: 0.15,
            ood_day: None,
            ood_factor: 6.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TempProfile {
    pub mean: f64,
    /// std of the per-day base temperature
    pub day_std: f64,
    /// std of the start-to-end drift within a day
    pub drift_std: f64,
    pub frame_noise: f64,
}

impl Default for TempProfile {
    fn default() -> Self {
        Self { mean: 20.0, day_std: 2.0, drift_std: 0.5, frame_noise: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// reference probe noise, µmol/L
    pub sigma: f64,
    /// probe sampling interval, s
    pub sample_interval: f64,
    /// ground-truth step-averaging window, s
    pub window: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { sigma: 1.5, sample_interval: 1.0, window: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub days: usize,
    /// µmol/L, starting at 0 and strictly increasing
    pub plateaus: Vec<f64>,
    pub frames_per_plateau: usize,
    /// s between frames inside a plateau
    pub frame_interval: f64,
    /// s of settling between plateaus, not recorded
    pub plateau_gap: f64,
    pub film: FilmShape,
    pub response: ResponseConfig,
    /// `[c, x, y, x², y², xy]` on coordinates normalized to [−1, 1]
    pub illumination: [f64; 6],
    pub fouling: FoulingConfig,
    pub bleach_rate: f64,
    /// log-std of the per-day LED gain
    pub gain_jitter: f64,
    /// log-std of frame-to-frame LED flicker
    pub flicker: f64,
    pub noise_sigma: f64,
    pub temperature: TempProfile,
    pub probe: ProbeConfig,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            width: 48,
            height: 48,
            channels: 3,
            days: 8,
            plateaus: vec![0.0, 62.5, 125.0, 187.5, 250.0],
            frames_per_plateau: 8,
            frame_interval: 2.5,
            plateau_gap: 60.0,
            film: FilmShape::Ellipse { semi_x: 0.46, semi_y: 0.42 },
            response: ResponseConfig::default(),
            illumination: [1.0, 0.08, -0.05, -0.12, -0.06, 0.03],
            fouling: FoulingConfig::default(),
            bleach_rate: 0.02,
            gain_jitter: 0.01,
            flicker: 0.003,
            noise_sigma: 2.0,
            temperature: TempProfile::default(),
            probe: ProbeConfig::default(),
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Down-sized configuration for smoke runs and quick tests.
    pub fn reduced() -> Self {
        Self { width: 24, height: 24, days: 4, frames_per_plateau: 4, ..Self::default() }
    }

    /// Everything switched off except the planted fields: no noise, no fouling,
    /// constant gain and temperature.
    pub fn noiseless() -> Self {
        Self {
            fouling: FoulingConfig {
                initial_blobs: 0,
                birth_rate: 0.0,
                aggregates_per_day: 0.0,
                ..FoulingConfig::default()
            },
            bleach_rate: 0.0,
            gain_jitter: 0.0,
            flicker: 0.0,
            noise_sigma: 0.0,
            temperature: TempProfile { mean: 20.0, day_std: 0.0, drift_std: 0.0, frame_noise: 0.0 },
            probe: ProbeConfig { sigma: 0.0, ..ProbeConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.width < 4 || self.height < 4 {
            return bad(format!("grid {}×{} is too small", self.width, self.height));
        }
        if self.channels == 0 {
            return bad("channels must be >= 1".into());
        }
        if self.days == 0 || self.frames_per_plateau == 0 {
            return bad("days and frames_per_plateau must be >= 1".into());
        }
        if self.plateaus.first() != Some(&0.0) {
            return bad("plateaus must start at 0".into());
        }
        if self.plateaus.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("plateaus must be strictly increasing".into());
        }
        let r = &self.response;
        let f = &self.fouling;
        let non_neg = [
            ("frame_interval", self.frame_interval),
            ("plateau_gap", self.plateau_gap),
            ("bleach_rate", self.bleach_rate),
            ("gain_jitter", self.gain_jitter),
            ("flicker", self.flicker),
            ("noise_sigma", self.noise_sigma),
            ("response.i0_std", r.i0_std),
            ("response.k_mean", r.k_mean),
            ("response.k_std", r.k_std),
            ("response.smooth_scale", r.smooth_scale),
            ("response.temp_coeff", r.temp_coeff),
            ("response.background", r.background),
            ("fouling.birth_rate", f.birth_rate),
            ("fouling.radius_mean", f.radius_mean),
            ("fouling.radius_growth", f.radius_growth),
            ("fouling.opacity_growth", f.opacity_growth),
            ("fouling.aggregates_per_day", f.aggregates_per_day),
            ("fouling.aggregate_radius", f.aggregate_radius),
            ("fouling.drift", f.drift),
            ("fouling.ood_factor", f.ood_factor),
            ("temperature.day_std", self.temperature.day_std),
            ("temperature.drift_std", self.temperature.drift_std),
            ("temperature.frame_noise", self.temperature.frame_noise),
            ("probe.sigma", self.probe.sigma),
        ];
        for (name, v) in non_neg {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(self.frame_interval > 0.0) || !(self.probe.window > 0.0) || !(self.probe.sample_interval > 0.0) {
            return bad("frame_interval, probe.window and probe.sample_interval must be > 0".into());
        }
        if !(r.i0_mean > 0.0) {
            return bad("response.i0_mean must be > 0".into());
        }
        if self.bleach_rate >= 1.0 {
            return bad("bleach_rate must be < 1".into());
        }
        for (name, v) in [
            ("response.smooth_fraction", r.smooth_fraction),
            ("response.two_site_fraction", r.two_site_fraction),
            ("fouling.opacity_init", f.opacity_init),
            ("fouling.opacity_max", f.opacity_max),
            ("fouling.aggregate_opacity", f.aggregate_opacity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if let Some(d) = f.ood_day {
            if d == 0 || d > self.days {
                return bad(format!("fouling.ood_day {d} outside 1..={}", self.days));
            }
        }
        if let FilmShape::Ellipse { semi_x, semi_y } = self.film {
            if !(semi_x > 0.0 && semi_y > 0.0) {
                return bad("film ellipse semi-axes must be > 0".into());
            }
        }
        let min_l = illumination_field(self).into_iter().fold(f64::INFINITY, f64::min);
        if !(min_l > 0.0) {
            return bad(format!("illumination field must stay positive, minimum {min_l}"));
        }
        Ok(())
    }

    pub fn frames_per_day(&self) -> usize {
        self.plateaus.len() * self.frames_per_plateau
    }

    fn plateau_period(&self) -> f64 {
        self.frames_per_plateau as f64 * self.frame_interval + self.plateau_gap
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream derived from the master seed and a tag.
fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(tag)))
}

const TAG_FIELDS: u64 = 1;
const TAG_BIOFILM: u64 = 2;
const TAG_DAY: u64 = 1000;

pub fn film_mask(cfg: &SimConfig) -> Vec<bool> {
    let (w, h) = (cfg.width, cfg.height);
    let mut mask = vec![true; w * h];
    if let FilmShape::Ellipse { semi_x, semi_y } = cfg.film {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 - cx) / (semi_x * w as f64);
                let dy = (y as f64 - cy) / (semi_y * h as f64);
                mask[y * w + x] = dx * dx + dy * dy <= 1.0;
            }
        }
    }
    mask
}

fn illumination_field(cfg: &SimConfig) -> Vec<f64> {
    let (w, h) = (cfg.width, cfg.height);
    let c = &cfg.illumination;
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let u = 2.0 * x as f64 / (w - 1) as f64 - 1.0;
            let v = 2.0 * y as f64 / (h - 1) as f64 - 1.0;
            out.push(c[0] + c[1] * u + c[2] * v + c[3] * u * u + c[4] * v * v + c[5] * u * v);
        }
    }
    out
}

fn blur_axis(src: &[f64], w: usize, h: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let o = k as isize - r;
                let (sx, sy) =
                    if horizontal { (reflect(x as isize + o, w), y) } else { (x, reflect(y as isize + o, h)) };
                s += kv * src[sy * w + sx];
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in v.iter_mut() {
        *x = if sd > 0.0 { (*x - mean) / sd } else { 0.0 };
    }
}

/// Zero-mean unit-variance field mixing a Gaussian-blurred and an iid component.
fn correlated_field(rng: &mut ChaCha8Rng, w: usize, h: usize, scale: f64, smooth_fraction: f64) -> Vec<f64> {
    let iid: Vec<f64> = (0..w * h).map(|_| rng.sample(StandardNormal)).collect();
    let mut smooth: Vec<f64> = (0..w * h).map(|_| rng.sample(StandardNormal)).collect();
    if scale > 0.0 {
        let r = (3.0 * scale).ceil() as isize;
        let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * scale * scale)).exp()).collect();
        let ks: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|k| *k /= ks);
        smooth = blur_axis(&smooth, w, h, &kernel, true);
        smooth = blur_axis(&smooth, w, h, &kernel, false);
    }
    standardize(&mut smooth);
    let (a, b) = (smooth_fraction.sqrt(), (1.0 - smooth_fraction).sqrt());
    let mut out: Vec<f64> = smooth.iter().zip(&iid).map(|(s, i)| a * s + b * i).collect();
    standardize(&mut out);
    out
}

/// Gaussian-profile opacity disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub x: f64,
    pub y: f64,
    pub radius: f64,
    pub opacity: f64,
}

impl Blob {
    #[inline]
    fn attenuation(&self, x: f64, y: f64) -> f64 {
        let d2 = (x - self.x).powi(2) + (y - self.y).powi(2);
        let cutoff = 9.0 * self.radius * self.radius;
        if d2 > cutoff {
            return 1.0;
        }
        1.0 - self.opacity * (-d2 / (2.0 * self.radius * self.radius)).exp()
    }
}

/// Transient aggregate drifting linearly across the frames of one day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub start: Blob,
    /// pixels per frame
    pub vx: f64,
    pub vy: f64,
}

impl Aggregate {
    fn at(&self, frame: usize) -> Blob {
        Blob { x: self.start.x + self.vx * frame as f64, y: self.start.y + self.vy * frame as f64, ..self.start }
    }
}

fn transmission(w: usize, h: usize, blobs: impl Iterator<Item = Blob> + Clone) -> Vec<f64> {
    let mut out = vec![1.0; w * h];
    for b in blobs {
        let r = (3.0 * b.radius).ceil() as isize;
        let (x0, x1) = ((b.x.floor() as isize - r).max(0), (b.x.ceil() as isize + r).min(w as isize - 1));
        let (y0, y1) = ((b.y.floor() as isize - r).max(0), (b.y.ceil() as isize + r).min(h as isize - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                out[y as usize * w + x as usize] *= b.attenuation(x as f64, y as f64);
            }
        }
    }
    out
}

/// Hidden state behind a simulated dataset, for oracle checks.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub width: usize,
    pub height: usize,
    pub film_mask: Vec<bool>,
    pub illumination: Vec<f64>,
    /// I0 field before illumination, gain and bleaching
    pub i0: Vec<f64>,
    /// K_SV field at 20 °C (effective slope for two-site pixels)
    pub k_sv: Vec<f64>,
    /// `(a, k1, k2)` at 20 °C for planted two-site pixels
    pub two_site: Vec<Option<(f64, f64, f64)>>,
    pub days: Vec<DayTruth>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DayTruth {
    pub gain: f64,
    pub decay: f64,
    pub biofilm: Vec<Blob>,
    pub aggregates: Vec<Aggregate>,
    /// anchored biofilm transmission, constant over the day
    pub biofilm_transmission: Vec<f64>,
}

impl SimTruth {
    /// Combined fouling transmission for a frame of a 0-based day ordinal.
    pub fn transmission(&self, day: usize, frame: usize) -> Vec<f64> {
        let d = &self.days[day];
        let agg = transmission(self.width, self.height, d.aggregates.iter().map(|a| a.at(frame)));
        d.biofilm_transmission.iter().zip(&agg).map(|(a, b)| a * b).collect()
    }
}

fn biofilm_history(cfg: &SimConfig) -> Vec<Vec<Blob>> {
    let f = &cfg.fouling;
    let mut rng = stream(cfg.seed, TAG_BIOFILM);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let (sx, sy) = match cfg.film {
        FilmShape::Full => (0.5, 0.5),
        FilmShape::Ellipse { semi_x, semi_y } => (semi_x, semi_y),
    };
    let spawn = |rng: &mut ChaCha8Rng| -> Blob {
        // uniform over the film's bounding ellipse
        let th = rng.random::<f64>() * std::f64::consts::TAU;
        let rr = rng.random::<f64>().sqrt();
        Blob {
            x: (w - 1.0) / 2.0 + rr * th.cos() * sx * w,
            y: (h - 1.0) / 2.0 + rr * th.sin() * sy * h,
            radius: f.radius_mean * rng.random_range(0.5..1.5),
            opacity: (f.opacity_init * rng.random_range(0.5..1.5)).min(f.opacity_max),
        }
    };
    let births = (f.birth_rate > 0.0).then(|| Poisson::new(f.birth_rate).expect("rate > 0"));
    let mut blobs: Vec<Blob> = (0..f.initial_blobs).map(|_| spawn(&mut rng)).collect();
    let mut out = Vec::with_capacity(cfg.days);
    for d in 0..cfg.days {
        if d > 0 {
            for b in blobs.iter_mut() {
                b.radius += f.radius_growth;
                b.opacity = (b.opacity + f.opacity_growth).min(f.opacity_max);
            }
        }
        let n_new = births.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        for _ in 0..n_new {
            let b = spawn(&mut rng);
            blobs.push(b);
        }
        out.push(blobs.clone());
    }
    out
}

/// Step-averages `(timestamp, value)` samples into consecutive windows of
/// `window` seconds starting at the first timestamp. The final sample joins the
/// last window, so the output holds `ceil(span / window)` entries (at least
/// one). Each entry is `(window start, mean)`.
pub fn condition_ground_truth(raw: &[(f64, f64)], window: f64) -> Result<Vec<(f64, f64)>> {
    if raw.is_empty() {
        return Err(Error::Precondition("empty ground-truth series".into()));
    }
    if !(window > 0.0) {
        return Err(Error::Precondition(format!("window must be > 0, got {window}")));
    }
    if raw.windows(2).any(|p| !(p[1].0 > p[0].0)) {
        return Err(Error::Precondition("timestamps must be strictly increasing".into()));
    }
    let t0 = raw[0].0;
    let span = raw[raw.len() - 1].0 - t0;
    let n = ((span / window).ceil() as usize).max(1);
    let mut sums = vec![(0.0, 0usize); n];
    for &(t, v) in raw {
        let idx = (((t - t0) / window).floor() as usize).min(n - 1);
        sums[idx].0 += v;
        sums[idx].1 += 1;
    }
    let mut out = Vec::with_capacity(n);
    let mut last = f64::NAN;
    for (i, (s, c)) in sums.into_iter().enumerate() {
        if c > 0 {
            last = s / c as f64;
        }
        out.push((t0 + i as f64 * window, last));
    }
    // a leading gap takes the first populated window's value
    if let Some(first) = out.iter().map(|o| o.1).find(|v| !v.is_nan()) {
        for o in out.iter_mut().take_while(|o| o.1.is_nan()) {
            o.1 = first;
        }
    }
    Ok(out)
}

struct Fields {
    mask: Vec<bool>,
    illum: Vec<f64>,
    i0: Vec<f64>,
    k: Vec<f64>,
    two_site: Vec<Option<(f64, f64, f64)>>,
}

fn static_fields(cfg: &SimConfig) -> Fields {
    let (w, h) = (cfg.width, cfg.height);
    let r = &cfg.response;
    let mut rng = stream(cfg.seed, TAG_FIELDS);
    let zi = correlated_field(&mut rng, w, h, r.smooth_scale, r.smooth_fraction);
    let zk = correlated_field(&mut rng, w, h, r.smooth_scale, r.smooth_fraction);
    let i0: Vec<f64> = zi.iter().map(|z| r.i0_mean * (r.i0_std * z - 0.5 * r.i0_std * r.i0_std).exp()).collect();
    let k: Vec<f64> = zk.iter().map(|z| r.k_mean * (r.k_std * z - 0.5 * r.k_std * r.k_std).exp()).collect();
    let mask = film_mask(cfg);
    let two_site = (0..w * h)
        .map(|p| {
            let draw = rng.random::<f64>();
            let a = rng.random_range(0.6..0.85);
            if mask[p] && draw < r.two_site_fraction {
                let k2 = 0.15 * k[p];
                let k1 = (k[p] - (1.0 - a) * k2) / a;
                Some((a, k1, k2))
            } else {
                None
            }
        })
        .collect();
    Fields { mask, illum: illumination_field(cfg), i0, k, two_site }
}

fn simulate_day(cfg: &SimConfig, fields: &Fields, d: usize, biofilm: &[Blob]) -> (DayDataset, DayTruth) {
    let (w, h) = (cfg.width, cfg.height);
    let n_pix = w * h;
    let f = &cfg.fouling;
    let day_index = d + 1;
    let mut rng = stream(cfg.seed, TAG_DAY + d as u64);

    let gain = (cfg.gain_jitter * rng.sample::<f64, _>(StandardNormal)).exp();
    let decay = (1.0 - cfg.bleach_rate).powi(d as i32);
    let t = &cfg.temperature;
    let t_base = t.mean + t.day_std * rng.sample::<f64, _>(StandardNormal);
    let t_drift = t.drift_std * rng.sample::<f64, _>(StandardNormal);

    let ood = f.ood_day == Some(day_index);
    let agg_rate = f.aggregates_per_day * if ood { f.ood_factor } else { 1.0 };
    let n_agg = if agg_rate > 0.0 { Poisson::new(agg_rate).expect("rate > 0").sample(&mut rng) as usize } else { 0 };
    let aggregates: Vec<Aggregate> = (0..n_agg)
        .map(|_| {
            let th = rng.random::<f64>() * std::f64::consts::TAU;
            let speed = f.drift * rng.random_range(0.5..1.5);
            let opacity = f.aggregate_opacity * rng.random_range(0.5..1.0) * if ood { 1.5 } else { 1.0 };
            Aggregate {
                start: Blob {
                    x: rng.random::<f64>() * (w - 1) as f64,
                    y: rng.random::<f64>() * (h - 1) as f64,
                    radius: f.aggregate_radius * rng.random_range(0.6..1.4),
                    opacity: opacity.min(0.95),
                },
                vx: speed * th.cos(),
                vy: speed * th.sin(),
            }
        })
        .collect();
    let biofilm_tr = transmission(w, h, biofilm.iter().copied());

    let film_px = fields.mask.iter().filter(|&&m| m).count().max(1) as f64;
    let biofouling_score =
        1.0 - biofilm_tr.iter().zip(&fields.mask).filter(|(_, &m)| m).map(|(b, _)| b).sum::<f64>() / film_px;

    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma > 0");
    let has_noise = cfg.noise_sigma > 0.0;
    let probe = Normal::new(0.0, cfg.probe.sigma.max(f64::MIN_POSITIVE)).expect("sigma > 0");
    let period = cfg.plateau_period();
    let fpp = cfg.frames_per_plateau;
    let n_frames = cfg.frames_per_day();
    let r = &cfg.response;

    let mut frames = Vec::with_capacity(n_frames);
    let mut windows = Vec::with_capacity(cfg.plateaus.len());
    for (k, &o2) in cfg.plateaus.iter().enumerate() {
        let t_start = k as f64 * period;
        let t_span = fpp as f64 * cfg.frame_interval;
        let n_probe = (t_span / cfg.probe.sample_interval).ceil().max(1.0) as usize;
        let raw: Vec<(f64, f64)> = (0..n_probe)
            .map(|i| {
                let e = if cfg.probe.sigma > 0.0 { probe.sample(&mut rng) } else { 0.0 };
                (t_start + i as f64 * cfg.probe.sample_interval, (o2 + e).max(0.0))
            })
            .collect();
        let gt = condition_ground_truth(&raw, cfg.probe.window).expect("non-empty probe series");
        windows.push(PlateauWindow { start: frames.len(), end: frames.len() + fpp, o2 });
        for j in 0..fpp {
            let fi = frames.len();
            let ts = t_start + j as f64 * cfg.frame_interval;
            let do_gt = gt.iter().rev().find(|(ws, _)| *ws <= ts).map_or(gt[0].1, |(_, v)| *v);
            let progress = if n_frames > 1 { fi as f64 / (n_frames - 1) as f64 - 0.5 } else { 0.0 };
            let temp = t_base + t_drift * progress + t.frame_noise * rng.sample::<f64, _>(StandardNormal);
            let k_scale = (1.0 + r.temp_coeff * (temp - 20.0)).max(0.0);
            let flick = (cfg.flicker * rng.sample::<f64, _>(StandardNormal)).exp();
            let agg_tr = transmission(w, h, aggregates.iter().map(|a| a.at(fi)));
            let mut pixels = vec![0.0; n_pix * cfg.channels];
            for p in 0..n_pix {
                let light = gain * flick * fields.illum[p];
                let clean = if fields.mask[p] {
                    let q = match fields.two_site[p] {
                        Some((a, k1, k2)) => a / (1.0 + k1 * k_scale * o2) + (1.0 - a) / (1.0 + k2 * k_scale * o2),
                        None => 1.0 / (1.0 + fields.k[p] * k_scale * o2),
                    };
                    light * biofilm_tr[p] * agg_tr[p] * fields.i0[p] * decay * q
                } else {
                    light * biofilm_tr[p] * agg_tr[p] * r.background
                };
                let red = if has_noise { clean + noise.sample(&mut rng) } else { clean };
                let red = red.max(0.0);
                pixels[p * cfg.channels] = red;
                for c in 1..cfg.channels {
                    let e = if has_noise { noise.sample(&mut rng) } else { 0.0 };
                    pixels[p * cfg.channels + c] = (0.2 * red + e).max(0.0);
                }
            }
            frames.push(Frame {
                width: w,
                height: h,
                channels: cfg.channels,
                pixels,
                temperature: temp,
                timestamp: ts,
                do_gt,
            });
        }
    }
    let day = DayDataset { day_index, frames, plateau_windows: windows, biofouling_score };
    let truth = DayTruth { gain, decay, biofilm: biofilm.to_vec(), aggregates, biofilm_transmission: biofilm_tr };
    (day, truth)
}

/// Generates a dataset together with the hidden fields that produced it.
pub fn simulate_with_truth(cfg: &SimConfig) -> Result<(Dataset, SimTruth)> {
    cfg.validate()?;
    let fields = static_fields(cfg);
    let history = biofilm_history(cfg);
    let days: Vec<(DayDataset, DayTruth)> =
        (0..cfg.days).into_par_iter().map(|d| simulate_day(cfg, &fields, d, &history[d])).collect();
    let (days, day_truth): (Vec<_>, Vec<_>) = days.into_iter().unzip();
    let meta = DatasetMeta {
        width: cfg.width,
        height: cfg.height,
        channels: cfg.channels,
        film_mask: fields.mask.clone(),
        seed: Some(cfg.seed),
        generator: Some(serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?),
    };
    let truth = SimTruth {
        width: cfg.width,
        height: cfg.height,
        film_mask: fields.mask,
        illumination: fields.illum,
        i0: fields.i0,
        k_sv: fields.k,
        two_site: fields.two_site,
        days: day_truth,
    };
    Ok((Dataset { meta, days }, truth))
}

pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    simulate_with_truth(cfg).map(|(d, _)| d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pixel_fit::{fit_linear_pixel, FitStatus, PlateauStack};
    use crate::sv;

    fn small() -> SimConfig {
        SimConfig { width: 16, height: 16, days: 3, frames_per_plateau: 3, ..SimConfig::default() }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = simulate(&small()).unwrap();
        let b = simulate(&small()).unwrap();
        assert_eq!(a, b);
        let c = simulate(&SimConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a.days[0].frames[0].pixels, c.days[0].frames[0].pixels);
    }

    #[test]
    fn layout_matches_config() {
        let cfg = small();
        let ds = simulate(&cfg).unwrap();
        assert_eq!(ds.days.len(), 3);
        for day in &ds.days {
            day.validate().unwrap();
            assert_eq!(day.frames.len(), cfg.frames_per_day());
            assert_eq!(day.plateau_windows.len(), 5);
            for f in &day.frames {
                assert_eq!(f.pixels.len(), 16 * 16 * 3);
                assert!(f.pixels.iter().all(|v| v.is_finite() && *v >= 0.0));
                assert!(f.do_gt >= 0.0);
            }
        }
    }

    #[test]
    fn noiseless_homogeneous_is_on_curve() {
        let mut cfg = SimConfig::noiseless();
        cfg.width = 12;
        cfg.height = 12;
        cfg.days = 2;
        cfg.frames_per_plateau = 2;
        cfg.response.i0_std = 0.0;
        cfg.response.k_std = 0.0;
        cfg.illumination = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let ds = simulate(&cfg).unwrap();
        for day in &ds.days {
            for f in &day.frames {
                for p in ds.meta.film_pixels() {
                    let r = sv::physics_residual(cfg.response.i0_mean, cfg.response.k_mean, f.red(p), f.do_gt)
                        .unwrap();
                    assert!(r.abs() < 1e-6, "residual {r}");
                }
            }
        }
    }

    #[test]
    fn noiseless_fit_recovers_planted_field() {
        let mut cfg = SimConfig::noiseless();
        cfg.width = 16;
        cfg.height = 16;
        cfg.days = 2;
        cfg.frames_per_plateau = 2;
        cfg.fouling.initial_blobs = 2;
        cfg.fouling.birth_rate = 1.0;
        cfg.bleach_rate = 0.03;
        cfg.gain_jitter = 0.05;
        let (ds, truth) = simulate_with_truth(&cfg).unwrap();
        let days: Vec<&DayDataset> = ds.days.iter().collect();
        let stack = PlateauStack::<f64>::from_days(&ds.meta, &days).unwrap();
        for p in ds.meta.film_pixels() {
            let fit = fit_linear_pixel(&stack.series(p)).unwrap();
            assert_eq!(fit.status, FitStatus::Ok);
            let rel = (fit.params.k_sv - truth.k_sv[p]).abs() / truth.k_sv[p];
            assert!(rel <= 1e-6, "pixel {p}: rel err {rel}");
        }
    }

    #[test]
    fn biofouling_score_strictly_increases() {
        for seed in 0..20 {
            let cfg = SimConfig { width: 16, height: 16, days: 5, frames_per_plateau: 1, seed, ..SimConfig::default() };
            let ds = simulate(&cfg).unwrap();
            let s: Vec<f64> = ds.days.iter().map(|d| d.biofouling_score).collect();
            assert!(s.windows(2).all(|w| w[1] > w[0]), "seed {seed}: {s:?}");
            assert!(s.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn transmission_is_reproducible_from_truth() {
        let mut cfg = small();
        cfg.noise_sigma = 0.0;
        cfg.flicker = 0.0;
        let (ds, truth) = simulate_with_truth(&cfg).unwrap();
        let tr = truth.transmission(1, 4);
        assert!(tr.iter().all(|t| (0.0..=1.0).contains(t)));
        // off-film pixels carry illumination × gain × transmission × background
        let f = &ds.days[1].frames[4];
        let p = ds.meta.film_mask.iter().position(|m| !m).unwrap();
        let want = truth.days[1].gain * truth.illumination[p] * tr[p] * cfg.response.background;
        assert!((f.red(p) - want).abs() < 1e-4 * want);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            SimConfig { plateaus: vec![10.0, 20.0, 30.0], ..SimConfig::default() },
            SimConfig { plateaus: vec![0.0, 20.0, 20.0], ..SimConfig::default() },
            SimConfig { bleach_rate: -0.1, ..SimConfig::default() },
            SimConfig { illumination: [0.1, 1.0, 0.0, 0.0, 0.0, 0.0], ..SimConfig::default() },
            SimConfig {
                fouling: FoulingConfig { ood_day: Some(9), ..FoulingConfig::default() },
                ..SimConfig::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(simulate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn conditioning_examples() {
        let c = condition_ground_truth(&[(0.0, 4.0), (1.0, 4.0), (2.0, 4.0)], 10.0).unwrap();
        assert_eq!(c, vec![(0.0, 4.0)]);
        let c = condition_ground_truth(&[(0.0, 0.0), (10.0, 10.0)], 10.0).unwrap();
        assert_eq!(c, vec![(0.0, 5.0)]);
        assert!(condition_ground_truth(&[], 10.0).is_err());
        assert!(condition_ground_truth(&[(0.0, 1.0)], 0.0).is_err());
        let c = condition_ground_truth(&(0..25).map(|i| (i as f64, i as f64)).collect::<Vec<_>>(), 10.0).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c[0], (0.0, 4.5));
    }

    /// Monte-Carlo oracle: window means of noisy plateau samples stay within 3σ/√k.
    #[test]
    fn conditioning_tightens_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let noise = Normal::new(0.0, 2.0).unwrap();
        let raw: Vec<(f64, f64)> = (0..200).map(|i| (i as f64, 125.0 + noise.sample(&mut rng))).collect();
        let c = condition_ground_truth(&raw, 10.0).unwrap();
        assert_eq!(c.len(), 20);
        let bound = 3.0 * 2.0 / 10f64.sqrt();
        let inside = c.iter().filter(|(_, v)| (v - 125.0).abs() <= bound).count();
        assert!(inside >= 19, "{inside}/20 windows inside ±{bound}");
    }

    #[test]
    fn drifting_aggregates_reshuffle_best_pixels() {
        use crate::pixel_fit::{fit_all_pixels, rank_pixels, FitOptions, RankMetric, SvModel};
        let mut differ = 0;
        for seed in 0..3 {
            let cfg = SimConfig { width: 24, height: 24, days: 4, frames_per_plateau: 3, seed, ..SimConfig::default() };
            let ds = simulate(&cfg).unwrap();
            let top = |d: usize| {
                let stack = PlateauStack::<f64>::from_days(&ds.meta, &[&ds.days[d]]).unwrap();
                let maps = fit_all_pixels(&stack, &FitOptions::default()).unwrap();
                let mut t = rank_pixels(&maps, RankMetric::R2, SvModel::Linear, 10).unwrap().pixels;
                t.sort();
                t
            };
            if top(0) != top(3) {
                differ += 1;
            }
        }
        assert_eq!(differ, 3);
    }
}
