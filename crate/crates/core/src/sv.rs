//! Stern–Volmer quenching models, their inverses and calibration quality metrics.
//!
//! Intensities are in arbitrary camera units, concentrations in µmol/L and
//! quenching constants in L/µmol. Every function here is pure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default relative tolerance for the two-site bisection inverse.
pub const DEFAULT_INVERT_TOL: f64 = 1e-9;
/// Hard iteration cap shared by bracket expansion and bisection.
pub const MAX_BISECTION_ITERS: usize = 200;

/// One-site model `I0 / I = 1 + K_SV·[O2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvLinear<T> {
    pub i0: T,
    pub k_sv: T,
}

impl<T: Scalar> SvLinear<T> {
    pub fn new(i0: T, k_sv: T) -> Result<Self> {
        let p = Self { i0, k_sv };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.i0 > T::zero()) || !self.i0.is_finite() {
            return Err(Error::Precondition(format!("i0 must be > 0, got {}", self.i0)));
        }
        if !(self.k_sv >= T::zero()) || !self.k_sv.is_finite() {
            return Err(Error::Precondition(format!("k_sv must be >= 0, got {}", self.k_sv)));
        }
        Ok(())
    }
}

/// Two-site (Demas) model `I / I0 = a/(1 + K1·[O2]) + (1 − a)/(1 + K2·[O2])`.
///
/// Canonical form keeps `k1 >= k2` so that `(a, k1, k2)` and `(1 − a, k2, k1)`
/// are not both representable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvTwoSite<T> {
    pub i0: T,
    pub a: T,
    pub k1: T,
    pub k2: T,
}

impl<T: Scalar> SvTwoSite<T> {
    pub fn new(i0: T, a: T, k1: T, k2: T) -> Result<Self> {
        let p = Self { i0, a, k1, k2 };
        p.validate()?;
        Ok(p)
    }

    /// Builds a model from possibly swapped sites, reordering to `k1 >= k2`.
    pub fn canonical(i0: T, a: T, k1: T, k2: T) -> Self {
        if k1 >= k2 {
            Self { i0, a, k1, k2 }
        } else {
            Self { i0, a: T::one() - a, k1: k2, k2: k1 }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.i0 > T::zero()) || !self.i0.is_finite() {
            return Err(Error::Precondition(format!("i0 must be > 0, got {}", self.i0)));
        }
        if !(self.a >= T::zero() && self.a <= T::one()) {
            return Err(Error::Precondition(format!("a must lie in [0, 1], got {}", self.a)));
        }
        if !(self.k2 >= T::zero()) || !(self.k1 >= self.k2) || !self.k1.is_finite() {
            return Err(Error::Precondition(format!(
                "quenching constants must satisfy k1 >= k2 >= 0, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        Ok(())
    }

    /// Initial slope of `I0/I − 1` at zero oxygen, `a·k1 + (1 − a)·k2`.
    pub fn effective_k_sv(&self) -> T {
        self.a * self.k1 + (T::one() - self.a) * self.k2
    }

    /// Quenched fraction that can never be reached as `[O2] → ∞`.
    fn asymptote(&self) -> T {
        let mut floor = T::zero();
        if self.k1 == T::zero() {
            floor += self.a;
        }
        if self.k2 == T::zero() {
            floor += T::one() - self.a;
        }
        floor * self.i0
    }
}

/// Per-pixel (or per-cohort) calibration quality figures.
///
/// `r2` is NaN when the fit is degenerate and the coefficient is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics<T> {
    pub k_sv: T,
    pub i0: T,
    pub dr: T,
    pub lod: T,
    pub r2: T,
}

impl<T: Scalar> PixelMetrics<T> {
    pub fn degenerate(i0: T, dr: T) -> Self {
        Self { k_sv: T::zero(), i0, dr, lod: T::infinity(), r2: T::nan() }
    }
}

/// Result of inverting an intensity to a concentration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inversion<T> {
    pub o2: T,
    /// Set when the intensity exceeded `I0` and the concentration was pinned to 0.
    pub clamped: bool,
}

pub fn sv_forward_linear<T: Scalar>(p: &SvLinear<T>, o2: T) -> T {
    debug_assert!(o2 >= T::zero(), "negative concentration");
    p.i0 / (T::one() + p.k_sv * o2)
}

pub fn sv_invert_linear<T: Scalar>(p: &SvLinear<T>, i: T) -> Result<Inversion<T>> {
    if !(i > T::zero()) || !i.is_finite() {
        return Err(Error::InvalidIntensity(i.to_f64_lossy()));
    }
    if !(p.k_sv > T::zero()) {
        return Err(Error::NonInvertible("k_sv = 0"));
    }
    if i > p.i0 {
        return Ok(Inversion { o2: T::zero(), clamped: true });
    }
    Ok(Inversion { o2: (p.i0 / i - T::one()) / p.k_sv, clamped: false })
}

pub fn sv_forward_two_site<T: Scalar>(p: &SvTwoSite<T>, o2: T) -> T {
    debug_assert!(o2 >= T::zero(), "negative concentration");
    let one = T::one();
    p.i0 * (p.a / (one + p.k1 * o2) + (one - p.a) / (one + p.k2 * o2))
}

/// Numerical inverse of the two-site model by bisection on the monotone
/// forward map. The bracket starts at `1/max(k)` and doubles until it
/// encloses the target.
pub fn sv_invert_two_site<T: Scalar>(p: &SvTwoSite<T>, i: T, tol: T) -> Result<Inversion<T>> {
    if !(i > T::zero()) || !i.is_finite() {
        return Err(Error::InvalidIntensity(i.to_f64_lossy()));
    }
    if !(tol > T::zero()) {
        return Err(Error::Precondition(format!("tolerance must be > 0, got {tol}")));
    }
    let k_max = p.k1.max(p.k2);
    if !(k_max > T::zero()) {
        return Err(Error::NonInvertible("k1 = k2 = 0"));
    }
    if i >= p.i0 {
        return Ok(Inversion { o2: T::zero(), clamped: i > p.i0 });
    }
    if i <= p.asymptote() {
        return Err(Error::NonInvertible("intensity below the unquenchable fraction"));
    }

    let target_tol = tol * p.i0;
    let mut lo = T::zero();
    let mut hi = T::one() / k_max;
    let mut expansions = 0;
    while sv_forward_two_site(p, hi) >= i {
        lo = hi;
        hi = hi + hi;
        expansions += 1;
        if expansions >= MAX_BISECTION_ITERS || !hi.is_finite() {
            return Err(Error::NonInvertible("bracket expansion did not enclose the intensity"));
        }
    }

    let two = T::lit(2.0);
    let mut mid = (lo + hi) / two;
    for _ in 0..MAX_BISECTION_ITERS {
        mid = (lo + hi) / two;
        let f = sv_forward_two_site(p, mid);
        if (f - i).abs() <= target_tol && (hi - lo) <= tol * (T::one() + mid) {
            break;
        }
        // forward is decreasing: too bright means not enough oxygen yet
        if f > i {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Inversion { o2: mid, clamped: false })
}

/// Pixel-wise residual `(I0/I) − 1 − K_SV·[O2]_gt`.
pub fn physics_residual<T: Scalar>(i0: T, k_sv: T, i: T, o2_gt: T) -> Result<T> {
    if !(i > T::zero()) || !i.is_finite() {
        return Err(Error::InvalidIntensity(i.to_f64_lossy()));
    }
    Ok(i0 / i - T::one() - k_sv * o2_gt)
}

/// Limit of detection `3σ/m`, with σ taken on the `I0/I − 1` signal at zero
/// oxygen and `m` the Stern–Volmer slope.
pub fn lod<T: Scalar>(sigma_zero: T, slope: T) -> Result<T> {
    if !(slope > T::zero()) {
        return Err(Error::DegenerateSensitivity(slope.to_f64_lossy()));
    }
    if !(sigma_zero >= T::zero()) {
        return Err(Error::Precondition(format!("sigma must be >= 0, got {sigma_zero}")));
    }
    Ok(T::lit(3.0) * sigma_zero / slope)
}

pub fn dynamic_range<T: Scalar>(i_max: T, i_min: T) -> Result<T> {
    if i_max < i_min {
        return Err(Error::Ordering { i_max: i_max.to_f64_lossy(), i_min: i_min.to_f64_lossy() });
    }
    if !(i_min >= T::zero()) {
        return Err(Error::Precondition(format!("i_min must be >= 0, got {i_min}")));
    }
    Ok(i_max - i_min)
}

/// Coefficient of determination `1 − SS_res/SS_tot`; negative for fits worse
/// than the mean.
pub fn r_squared<T: Scalar>(observed: &[T], predicted: &[T]) -> Result<T> {
    if observed.len() != predicted.len() {
        return Err(Error::Precondition(format!("series lengths differ: {} vs {}", observed.len(), predicted.len())));
    }
    if observed.len() < 2 {
        return Err(Error::Precondition("r_squared needs at least 2 points".into()));
    }
    let n = T::from_usize_lossy(observed.len());
    let mean = observed.iter().copied().sum::<T>() / n;
    let ss_tot: T = observed.iter().map(|&y| (y - mean) * (y - mean)).sum();
    if !(ss_tot > T::zero()) {
        return Err(Error::UndefinedVariance("observations are constant"));
    }
    let ss_res: T = observed.iter().zip(predicted).map(|(&y, &yh)| (y - yh) * (y - yh)).sum();
    Ok(T::one() - ss_res / ss_tot)
}
