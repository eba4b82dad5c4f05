//! Network definition, forward pass and composite loss.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{ConvGeom, Graph, Var};
use super::{Backbone, ModelConfig, DO_SCALE};
use crate::data::{DatasetMeta, DayDataset, Frame, RED};
use crate::error::{Error, Result};
use crate::pixel_fit::{FitStatus, ParameterMaps};
use crate::scalar::Scalar;

/// Ridge weight pulling the pooled oxygen term towards mid-range; only
/// matters when every weight vanishes.
const WLS_PRIOR: f64 = 1e-6;
/// Log-gain head output is multiplied by this before exponentiation.
const GAIN_SCALE: f64 = 1.0;
const T_REF: f64 = 20.0;
const T_SCALE: f64 = 5.0;
/// Temperature coefficient parameter is stored in percent per kelvin.
const BETA_SCALE: f64 = 0.01;
/// Pixels darker than this fraction of the reference intensity are masked.
const INTENSITY_FLOOR: f64 = 1e-3;
const CONF_FLOOR: f64 = 1e-3;
/// Lower bound of the confidence head. The normalized physics loss is
/// minimized by piling all weight onto the single best-fitting pixel; a
/// bounded dynamic range keeps every film pixel in play.
const CONF_MIN: f64 = 0.3;
const CONF_HIDDEN: usize = 8;
const REG_HIDDEN: usize = 16;
const MAP_FEATURE_SCALE: f64 = 10.0;
const LN_EPS: f64 = 1e-5;
/// Reweighting passes of the physics layer after the initial solve.
const IRLS_STEPS: usize = 2;
/// Misfit scale of the Cauchy weights (dimensionless, on `I0/I`).
const ROBUST_SCALE: f64 = 0.05;
/// µmol/L per unit of the regression correction head. Kept well below the
/// DO range so the correction stays a small residual on the physics estimate.
const REG_OUTPUT_SCALE: f64 = 30.0;

/// Data-derived constants fixed when a model is created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Mean film red intensity at the lowest DO of each training day.
    pub s_ref: f64,
    /// Pooled quenching constant of the film-average signal.
    pub k_ref: f64,
    /// Largest training DO.
    pub do_max: f64,
    pub bio_min: f64,
    pub bio_max: f64,
    pub film_mask: Vec<bool>,
}

impl Normalization {
    pub fn from_training(meta: &DatasetMeta, train: &[&DayDataset]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Precondition("at least one training day is required".into()));
        }
        let film = meta.film_pixels();
        if film.is_empty() {
            return Err(Error::Precondition("film mask is empty".into()));
        }
        let film_mean = |f: &Frame| film.iter().map(|&p| f.red(p)).sum::<f64>() / film.len() as f64;
        let mut zero = Vec::new();
        let mut pairs = Vec::new();
        let mut do_max: f64 = 0.0;
        for day in train {
            let lo = day.frames.iter().map(|f| f.do_gt).fold(f64::INFINITY, f64::min);
            for f in &day.frames {
                f.check_grid(meta.width, meta.height)?;
                let m = film_mean(f);
                if f.do_gt <= lo {
                    zero.push(m);
                }
                pairs.push((m, f.do_gt));
                do_max = do_max.max(f.do_gt);
            }
        }
        let s_ref = zero.iter().sum::<f64>() / zero.len() as f64;
        if !(s_ref > 0.0) {
            return Err(Error::Precondition("training frames have no positive intensity".into()));
        }
        // slope of (s_ref/I - 1) against DO through the origin
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for &(m, o2) in &pairs {
            if m > 0.0 {
                sxy += o2 * (s_ref / m - 1.0);
                sxx += o2 * o2;
            }
        }
        let k_ref = if sxx > 0.0 { (sxy / sxx).max(1e-6) } else { 1e-3 };
        let scores: Vec<f64> = train.iter().map(|d| d.biofouling_score).collect();
        let bio_min = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let bio_max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            width: meta.width,
            height: meta.height,
            channels: meta.channels,
            s_ref,
            k_ref,
            do_max: do_max.max(1.0),
            bio_min,
            bio_max,
            film_mask: meta.film_mask.clone(),
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Min-max normalized biofouling target; a single training level maps to 0.
    pub fn bio_target(&self, score: f64) -> f64 {
        let span = self.bio_max - self.bio_min;
        if span > 1e-12 {
            (score - self.bio_min) / span
        } else {
            0.0
        }
    }

    fn q_mid(&self) -> f64 {
        0.5 * self.k_ref * self.do_max
    }
}

/// Frozen per-pixel linear fits fed to the PGNN variant.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenMaps {
    pub i0: Vec<f64>,
    pub k_sv: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FrozenMaps {
    pub fn from_maps(maps: &ParameterMaps<f64>) -> Self {
        let mut out = Self { i0: Vec::new(), k_sv: Vec::new(), valid: Vec::new() };
        for fit in &maps.linear {
            let ok = fit.status == FitStatus::Ok && fit.params.i0 > 0.0 && fit.params.k_sv.is_finite();
            out.valid.push(ok);
            out.i0.push(if ok { fit.params.i0 } else { 0.0 });
            out.k_sv.push(if ok { fit.params.k_sv } else { 0.0 });
        }
        out
    }

    pub fn n_pixels(&self) -> usize {
        self.valid.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutputs {
    pub width: usize,
    pub height: usize,
    pub do_pred: f64,
    /// Per pixel `(i0_hat, k_sv_hat)` for the current frame.
    pub sv_maps: Vec<(f64, f64)>,
    pub confidence: Vec<f64>,
    pub biofouling_pred: f64,
    /// Min-max scaled weights of the physics layer; zero outside the mask.
    pub attention: Vec<f64>,
    /// Pixels entering the physics layer and loss.
    pub physics_mask: Vec<bool>,
    /// Per-frame gain estimated by the physics layer.
    pub gain: f64,
    /// DO from the physics layer before the regression correction.
    pub do_physics: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_data: f64,
    pub l_physics: f64,
    pub l_biofouling: f64,
    pub l_total: f64,
    /// Mean confidence hit the floor.
    pub confidence_floored: bool,
}

impl LossBreakdown {
    pub fn combine(l_data: f64, l_physics: f64, l_biofouling: f64, lp: f64, lb: f64, floored: bool) -> Self {
        let mut l_total = l_data;
        if lp != 0.0 {
            l_total += lp * l_physics;
        }
        if lb != 0.0 {
            l_total += lb * l_biofouling;
        }
        Self { l_data, l_physics, l_biofouling, l_total, confidence_floored: floored }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub decay: bool,
    pub lr_scale: f64,
    init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (usize, usize),
    qkv: (usize, usize),
    out: (usize, usize),
    ln2: (usize, usize),
    fc1: (usize, usize),
    fc2: (usize, usize),
}

#[derive(Debug, Clone)]
enum BackboneLayout {
    Conv(Vec<(usize, usize, ConvGeom)>),
    Attn {
        embed: (usize, usize, ConvGeom),
        cls: usize,
        pos: usize,
        blocks: Vec<Block>,
        head_idx: Vec<[Arc<Vec<usize>>; 3]>,
        row_idx: (Arc<Vec<usize>>, Arc<Vec<usize>>),
        lnf: (usize, usize),
    },
}

#[derive(Debug, Clone)]
struct Layout {
    backbone: BackboneLayout,
    tokens: usize,
    reg1: (usize, usize),
    reg2: (usize, usize),
    gain: (usize, usize),
    bio: (usize, usize),
    conf1: (usize, usize),
    conf2: (usize, usize),
    conf3: (usize, usize),
    conf_bias: usize,
    /// `(theta_s, theta_k, beta)`; absent for the PGNN.
    sv: Option<(usize, usize, usize)>,
    up_idx: Arc<Vec<usize>>,
}

struct Registry {
    specs: Vec<ParamSpec>,
}

impl Registry {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init, decay: bool, lr_scale: f64) -> usize {
        self.specs.push(ParamSpec { name, rows, cols, decay, lr_scale, init });
        self.specs.len() - 1
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64) -> (usize, usize) {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let w = self.add(format!("{name}.w"), fan_in, fan_out, Init::Normal(std), true, 1.0);
        let b = self.add(format!("{name}.b"), 1, fan_out, Init::Zeros, false, 1.0);
        (w, b)
    }

    fn zero_dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (usize, usize) {
        let w = self.add(format!("{name}.w"), fan_in, fan_out, Init::Zeros, true, 1.0);
        let b = self.add(format!("{name}.b"), 1, fan_out, Init::Zeros, false, 1.0);
        (w, b)
    }

    fn conv(&mut self, name: &str, g: ConvGeom) -> (usize, usize, ConvGeom) {
        let fan_in = g.cin * g.k * g.k;
        let std = (2.0 / fan_in as f64).sqrt();
        let w = self.add(format!("{name}.w"), g.cout, fan_in, Init::Normal(std), true, 1.0);
        let b = self.add(format!("{name}.b"), 1, g.cout, Init::Zeros, false, 1.0);
        (w, b, g)
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> (usize, usize) {
        let g = self.add(format!("{name}.g"), 1, dim, Init::Const(1.0), false, 1.0);
        let b = self.add(format!("{name}.b"), 1, dim, Init::Zeros, false, 1.0);
        (g, b)
    }
}

fn build_layout(cfg: &ModelConfig, norm: &Normalization, pgnn: bool) -> (Layout, Vec<ParamSpec>) {
    let (w, h) = (norm.width, norm.height);
    let p = w * h;
    let e = cfg.embed_dim;
    let cin = norm.channels + if pgnn { 2 } else { 0 };
    let mut reg = Registry { specs: Vec::new() };
    let (backbone, th, tw) = match cfg.backbone {
        Backbone::ConvSmall => {
            let widths = [e / 4, e / 2, e];
            let (mut ch, mut cw, mut c) = (h, w, cin);
            let mut convs = Vec::new();
            for (i, &co) in widths.iter().enumerate() {
                let g = ConvGeom { cin: c, h: ch, w: cw, cout: co, k: 3, stride: 2, pad: 1 };
                convs.push(reg.conv(&format!("conv{i}"), g));
                ch = g.out_h();
                cw = g.out_w();
                c = co;
            }
            (BackboneLayout::Conv(convs), ch, cw)
        }
        Backbone::AttentionSmall => {
            let pt = cfg.patch;
            let g = ConvGeom { cin, h, w, cout: e, k: pt, stride: pt, pad: 0 };
            let embed = reg.conv("patch_embed", g);
            let n = g.out_h() * g.out_w();
            let cls = reg.add("cls".into(), e, 1, Init::Normal(0.02), false, 1.0);
            let pos = reg.add("pos".into(), n + 1, e, Init::Normal(0.02), false, 1.0);
            let mut blocks = Vec::new();
            for l in 0..cfg.layers {
                let ln1 = reg.layer_norm(&format!("blk{l}.ln1"), e);
                let qkv = reg.dense(&format!("blk{l}.qkv"), e, 3 * e, 0.7);
                let out = reg.dense(&format!("blk{l}.proj"), e, e, 0.5);
                let ln2 = reg.layer_norm(&format!("blk{l}.ln2"), e);
                let fc1 = reg.dense(&format!("blk{l}.fc1"), e, 2 * e, 1.0);
                let fc2 = reg.dense(&format!("blk{l}.fc2"), 2 * e, e, 0.5);
                blocks.push(Block { ln1, qkv, out, ln2, fc1, fc2 });
            }
            let lnf = reg.layer_norm("ln_final", e);
            let n1 = n + 1;
            let d = e / cfg.heads_attn;
            let head_idx = (0..cfg.heads_attn)
                .map(|hd| {
                    std::array::from_fn(|sect| {
                        let mut idx = Vec::with_capacity(n1 * d);
                        for i in 0..n1 {
                            for j in 0..d {
                                idx.push(i * 3 * e + sect * e + hd * d + j);
                            }
                        }
                        Arc::new(idx)
                    })
                })
                .collect();
            let cls_rows = Arc::new((0..e).collect());
            let tok_rows = Arc::new((e..n1 * e).collect());
            let layout = BackboneLayout::Attn { embed, cls, pos, blocks, head_idx, row_idx: (cls_rows, tok_rows), lnf };
            (layout, g.out_h(), g.out_w())
        }
    };
    let tokens = th * tw;
    let reg1 = reg.dense("reg1", e + 3, REG_HIDDEN, 1.0);
    let reg2 = reg.zero_dense("reg2", REG_HIDDEN, 1);
    let gain = reg.zero_dense("gain", REG_HIDDEN, 1);
    let bio = reg.dense("bio", e, 1, 0.3);
    let conf1 = reg.dense("conf1", e, CONF_HIDDEN, 1.0);
    let conf2 = reg.dense("conf2", CONF_HIDDEN + 1, CONF_HIDDEN, 1.0);
    let conf3 = reg.zero_dense("conf3", CONF_HIDDEN, 1);
    let map_lr = cfg.map_lr_scale;
    let conf_bias = reg.add("conf_bias".into(), p, 1, Init::Zeros, false, map_lr);
    let sv = (!pgnn).then(|| {
        let ts = reg.add("theta_s".into(), p, 1, Init::Zeros, false, map_lr);
        let tk = reg.add("theta_k".into(), p, 1, Init::Zeros, false, map_lr);
        let beta = reg.add("beta".into(), 1, 1, Init::Zeros, false, 1.0);
        (ts, tk, beta)
    });
    let mut up = Vec::with_capacity(p * CONF_HIDDEN);
    for y in 0..h {
        for x in 0..w {
            let t = (y * th / h) * tw + x * tw / w;
            up.extend((0..CONF_HIDDEN).map(|j| t * CONF_HIDDEN + j));
        }
    }
    let layout =
        Layout { backbone, tokens, reg1, reg2, gain, bio, conf1, conf2, conf3, conf_bias, sv, up_idx: Arc::new(up) };
    (layout, reg.specs)
}

/// Physics-informed calibrator with its parameters and normalization.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub norm: Normalization,
    pub frozen: Option<FrozenMaps>,
    pub params: Vec<Vec<T>>,
    pub specs: Vec<ParamSpec>,
    layout: Layout,
}

/// A frame converted to model inputs.
#[derive(Debug, Clone)]
pub(crate) struct Prepared<T> {
    chans: Vec<T>,
    intensity: Vec<T>,
    ln_intensity: Vec<T>,
    mask: Vec<T>,
    mask_bool: Vec<bool>,
    n_mask: usize,
    weight_base: Vec<T>,
    frozen_s: Option<Vec<T>>,
    frozen_kt: Option<Vec<T>>,
    t_offset: f64,
    pub do_gt: f64,
    pub bio_target: f64,
}

impl<T: Scalar> Prepared<T> {
    /// Copy with every per-pixel array permuted by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pm = |v: &[T]| perm.iter().map(|&i| v[i]).collect::<Vec<T>>();
        let p = perm.len();
        let c = self.chans.len() / p;
        let mut chans = Vec::with_capacity(self.chans.len());
        for ch in 0..c {
            chans.extend(pm(&self.chans[ch * p..(ch + 1) * p]));
        }
        Self {
            chans,
            intensity: pm(&self.intensity),
            ln_intensity: pm(&self.ln_intensity),
            mask: pm(&self.mask),
            mask_bool: perm.iter().map(|&i| self.mask_bool[i]).collect(),
            n_mask: self.n_mask,
            weight_base: pm(&self.weight_base),
            frozen_s: self.frozen_s.as_deref().map(pm),
            frozen_kt: self.frozen_kt.as_deref().map(pm),
            t_offset: self.t_offset,
            do_gt: self.do_gt,
            bio_target: self.bio_target,
        }
    }
}

/// Graph nodes of one evaluation.
pub(crate) struct Built {
    pub params: Vec<Var>,
    pub do_pred: Var,
    pub i0_hat: Var,
    pub k_sv: Var,
    pub conf: Var,
    pub bio: Var,
    pub weights: Var,
    pub gain: Var,
    pub do_physics: Var,
}

pub(crate) struct LossVars {
    pub total: Var,
    pub data: Var,
    pub physics: Var,
    pub bio: Var,
    pub floored: bool,
}

impl<T: Scalar> Model<T> {
    /// Fresh model; `frozen` selects the PGNN variant.
    pub fn new(config: ModelConfig, norm: Normalization, frozen: Option<FrozenMaps>) -> Result<Self> {
        config.validate(norm.width, norm.height)?;
        if norm.film_mask.len() != norm.n_pixels() {
            return Err(Error::Dimension("film mask does not match the grid".into()));
        }
        if let Some(f) = &frozen {
            if f.n_pixels() != norm.n_pixels() {
                return Err(Error::Dimension(format!(
                    "parameter maps cover {} pixels, grid has {}",
                    f.n_pixels(),
                    norm.n_pixels()
                )));
            }
        }
        let (layout, specs) = build_layout(&config, &norm, frozen.is_some());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5_eed0_f0b7);
        let params = specs
            .iter()
            .map(|s| {
                let n = s.rows * s.cols;
                match s.init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Const(v) => vec![T::lit(v); n],
                    Init::Normal(std) => {
                        let d = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| T::lit(d.sample(&mut rng))).collect()
                    }
                }
            })
            .collect();
        Ok(Self { config, norm, frozen, params, specs, layout })
    }

    pub fn is_pgnn(&self) -> bool {
        self.frozen.is_some()
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn param_names(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.specs.iter().map(|s| (s.name.as_str(), s.rows, s.cols))
    }

    /// Learned temperature coefficient of K_SV (fraction per kelvin).
    pub fn temperature_coefficient(&self) -> Option<f64> {
        self.layout.sv.map(|(_, _, b)| self.params[b][0].to_f64_lossy() * BETA_SCALE)
    }

    pub(crate) fn prepare(
        &self,
        frame: &Frame,
        day_score: Option<f64>,
        maps: Option<&FrozenMaps>,
    ) -> Result<Prepared<T>> {
        let n = &self.norm;
        frame.check_grid(n.width, n.height)?;
        if frame.channels != n.channels {
            return Err(Error::Dimension(format!(
                "frame has {} channels, model expects {}",
                frame.channels, n.channels
            )));
        }
        let p = n.n_pixels();
        let maps = maps.or(self.frozen.as_ref());
        if let Some(m) = maps {
            if m.n_pixels() != p {
                return Err(Error::Dimension(format!("parameter maps cover {} pixels, grid has {p}", m.n_pixels())));
            }
        }
        let floor = INTENSITY_FLOOR * n.s_ref;
        let mut chans = Vec::with_capacity((n.channels + 2) * p);
        for c in 0..n.channels {
            chans.extend((0..p).map(|i| T::lit(frame.value(i, c) / n.s_ref)));
        }
        let mut mask_bool = vec![false; p];
        let mut intensity = vec![T::zero(); p];
        for i in 0..p {
            let raw = frame.red(i);
            let valid = maps.is_none_or(|m| m.valid[i]);
            mask_bool[i] = n.film_mask[i] && raw > floor && raw.is_finite() && valid;
            intensity[i] = T::lit(if raw.is_finite() { raw.max(floor) } else { floor });
        }
        let n_mask = mask_bool.iter().filter(|&&m| m).count();
        let ibar = if n_mask > 0 {
            (0..p).filter(|&i| mask_bool[i]).map(|i| intensity[i].to_f64_lossy()).sum::<f64>() / n_mask as f64
        } else {
            1.0
        };
        let weight_base = (0..p)
            .map(|i| {
                if mask_bool[i] {
                    let r = intensity[i].to_f64_lossy() / ibar;
                    T::lit(r * r)
                } else {
                    T::zero()
                }
            })
            .collect();
        let (mut frozen_s, mut frozen_kt) = (None, None);
        if let Some(m) = maps {
            let s: Vec<T> = (0..p).map(|i| T::lit(if m.valid[i] { m.i0[i] } else { n.s_ref })).collect();
            let k: Vec<T> = (0..p).map(|i| T::lit(if m.valid[i] { m.k_sv[i] / n.k_ref } else { 1.0 })).collect();
            chans.extend(s.iter().map(|&v| v / T::lit(n.s_ref)));
            chans.extend(k.iter().copied());
            frozen_s = Some(s);
            frozen_kt = Some(k);
        }
        Ok(Prepared {
            chans,
            ln_intensity: intensity.iter().map(|v| v.ln()).collect(),
            intensity,
            mask: mask_bool.iter().map(|&m| if m { T::one() } else { T::zero() }).collect(),
            mask_bool,
            n_mask,
            weight_base,
            frozen_s,
            frozen_kt,
            t_offset: frame.temperature - T_REF,
            do_gt: frame.do_gt,
            bio_target: day_score.map_or(0.0, |s| n.bio_target(s)),
        })
    }

    /// Builds the forward graph. `perm` maps pixel positions of the (flipped)
    /// input back to physical pixels for the per-pixel parameters.
    pub(crate) fn build(&self, g: &mut Graph<T>, inp: &Prepared<T>, perm: Option<&Arc<Vec<usize>>>) -> Built {
        let n = &self.norm;
        let (w, h) = (n.width, n.height);
        let p = w * h;
        let e = self.config.embed_dim;
        let params: Vec<Var> =
            self.specs.iter().zip(&self.params).map(|(s, v)| g.leaf(v.clone(), s.rows, s.cols)).collect();
        let pv = |i: usize| params[i];
        let pixel_param = |g: &mut Graph<T>, v: Var| match perm {
            Some(idx) => g.gather(v, idx.clone(), p, 1),
            None => v,
        };
        let dense = |g: &mut Graph<T>, x: Var, (wi, bi): (usize, usize)| {
            let y = g.matmul(x, params[wi]);
            g.add_row(y, params[bi])
        };
        let layer_norm = |g: &mut Graph<T>, x: Var, (gi, bi): (usize, usize)| {
            let y = g.layer_norm_rows(x, T::lit(LN_EPS));
            let y = g.mul_row(y, params[gi]);
            g.add_row(y, params[bi])
        };

        let cin = inp.chans.len() / p;
        let x = g.leaf(inp.chans.clone(), cin, p);
        let (tokens, gfeat) = match &self.layout.backbone {
            BackboneLayout::Conv(convs) => {
                let mut y = x;
                for &(wi, bi, geo) in convs {
                    let c = g.conv2d(y, pv(wi), pv(bi), geo);
                    y = g.silu(c);
                }
                let tok = g.transpose(y);
                let s = g.sum_rows(tok);
                let nt = self.layout.tokens as f64;
                let gf = g.affine(s, T::lit(1.0 / nt), T::zero());
                (tok, gf)
            }
            BackboneLayout::Attn { embed, cls, pos, blocks, head_idx, row_idx, lnf } => {
                let emb = g.conv2d(x, pv(embed.0), pv(embed.1), embed.2);
                let cat = g.concat_cols(&[pv(*cls), emb]);
                let seq = g.transpose(cat);
                let mut xs = g.add(seq, pv(*pos));
                let n1 = self.layout.tokens + 1;
                let d = e / self.config.heads_attn;
                let scale = T::lit(1.0 / (d as f64).sqrt());
                for blk in blocks {
                    let hn = layer_norm(g, xs, blk.ln1);
                    let qkv = dense(g, hn, blk.qkv);
                    let mut outs = Vec::with_capacity(head_idx.len());
                    for [qi, ki, vi] in head_idx {
                        let q = g.gather(qkv, qi.clone(), n1, d);
                        let k = g.gather(qkv, ki.clone(), n1, d);
                        let v = g.gather(qkv, vi.clone(), n1, d);
                        let kt = g.transpose(k);
                        let sc = g.matmul(q, kt);
                        let sc = g.affine(sc, scale, T::zero());
                        let a = g.softmax_rows(sc);
                        outs.push(g.matmul(a, v));
                    }
                    let att = g.concat_cols(&outs);
                    let proj = dense(g, att, blk.out);
                    xs = g.add(xs, proj);
                    let hn = layer_norm(g, xs, blk.ln2);
                    let f1 = dense(g, hn, blk.fc1);
                    let f1 = g.silu(f1);
                    let f2 = dense(g, f1, blk.fc2);
                    xs = g.add(xs, f2);
                }
                let xs = layer_norm(g, xs, *lnf);
                let gf = g.gather(xs, row_idx.0.clone(), 1, e);
                let tok = g.gather(xs, row_idx.1.clone(), self.layout.tokens, e);
                (tok, gf)
            }
        };

        // Stern–Volmer maps
        let i_leaf = g.leaf(inp.intensity.clone(), p, 1);
        let (s, kt, ln_s) = match (self.layout.sv, &inp.frozen_s, &inp.frozen_kt) {
            (Some((ts, tk, beta)), _, _) => {
                let ts = pixel_param(g, pv(ts));
                let tk = pixel_param(g, pv(tk));
                let es = g.exp(ts);
                let s = g.affine(es, T::lit(n.s_ref), T::zero());
                let ln_s = g.affine(ts, T::one(), T::lit(n.s_ref.ln()));
                let ek = g.exp(tk);
                let tf = g.affine(pv(beta), T::lit(BETA_SCALE * inp.t_offset), T::one());
                let kt = g.mul_scalar(ek, tf);
                (s, kt, ln_s)
            }
            (None, Some(fs), Some(fk)) => {
                let s = g.leaf(fs.clone(), p, 1);
                let kt = g.leaf(fk.clone(), p, 1);
                let ln_s = g.leaf(fs.iter().map(|v| v.ln()).collect(), p, 1);
                (s, kt, ln_s)
            }
            _ => unreachable!("PGNN inputs prepared without frozen maps"),
        };

        // confidence head
        let mask = g.leaf(inp.mask.clone(), p, 1);
        let ln_i = g.leaf(inp.ln_intensity.clone(), p, 1);
        let z = g.sub(ln_i, ln_s);
        let zm = g.mul(z, mask);
        let zsum = g.sum(zm);
        let zmean = g.affine(zsum, T::lit(-1.0 / inp.n_mask.max(1) as f64), T::zero());
        let zc = g.add_scalar(z, zmean);
        let d = dense(g, tokens, self.layout.conf1);
        let d = g.silu(d);
        let up = g.gather(d, self.layout.up_idx.clone(), p, CONF_HIDDEN);
        let cat = g.concat_cols(&[up, zc]);
        let hc = dense(g, cat, self.layout.conf2);
        let hc = g.silu(hc);
        let o = dense(g, hc, self.layout.conf3);
        let cb = pixel_param(g, pv(self.layout.conf_bias));
        let o = g.add(o, cb);
        let conf = g.sigmoid(o);
        let conf = g.affine(conf, T::lit(1.0 - CONF_MIN), T::lit(CONF_MIN));
        let conf_head = conf;

        // global representation and temperature drive the frame gain and
        // the regression correction
        let tl = g.leaf(vec![T::lit(inp.t_offset / T_SCALE)], 1, 1);
        // brightness-weighted map statistics, invariant to a global gain
        let wi = g.mul(i_leaf, mask);
        let wis = g.sum(wi);
        let wis = g.affine(wis, T::one(), T::lit(1e-12));
        let inv_wis = g.recip(wis);
        let inv_n = T::lit(1.0 / inp.n_mask.max(1) as f64);
        let mut feats = vec![gfeat, tl];
        for m in [kt, ln_s] {
            let a = g.mul(wi, m);
            let a = g.sum(a);
            let a = g.mul(a, inv_wis);
            let b = g.mul(mask, m);
            let b = g.sum(b);
            let b = g.affine(b, -inv_n, T::zero());
            let f = g.add(a, b);
            feats.push(g.affine(f, T::lit(MAP_FEATURE_SCALE), T::zero()));
        }
        let rin = g.concat_cols(&feats);
        let r1 = dense(g, rin, self.layout.reg1);
        let r1 = g.silu(r1);
        let lg = dense(g, r1, self.layout.gain);
        let lg = g.affine(lg, T::lit(GAIN_SCALE), T::zero());
        let gain = g.exp(lg);

        // iteratively reweighted pooling of q = k_ref·DO over film pixels
        let wb = g.leaf(inp.weight_base.clone(), p, 1);
        let base = g.mul(conf, wb);
        let u = g.div(s, i_leaf);
        let gu = g.mul_scalar(u, gain);
        let y = g.affine(gu, T::one(), -T::one());
        let q_mid = T::lit(n.q_mid());
        let mut q = wls_solve(g, base, y, kt, q_mid);
        let mut wts = base;
        let mut psi = base;
        let inv_scale = T::lit(1.0 / ROBUST_SCALE);
        for _ in 0..IRLS_STEPS {
            // Cauchy weights on the current per-pixel misfit
            let kq = g.mul_scalar(kt, q);
            let e = g.sub(y, kq);
            let e = g.affine(e, inv_scale, T::zero());
            let e2 = g.square(e);
            let den = g.affine(e2, T::one(), T::one());
            psi = g.recip(den);
            wts = g.mul(base, psi);
            q = wls_solve(g, wts, y, kt, q_mid);
        }
        let conf = if IRLS_STEPS > 0 { g.mul(conf_head, psi) } else { conf_head };
        let do_wls = g.affine(q, T::lit(1.0 / n.k_ref), T::zero());

        let delta = dense(g, r1, self.layout.reg2);
        let delta = g.affine(delta, T::lit(REG_OUTPUT_SCALE), T::zero());
        let do_pred = g.add(do_wls, delta);

        let bl = dense(g, gfeat, self.layout.bio);
        let bio = g.sigmoid(bl);

        let i0_hat = g.mul_scalar(s, gain);
        let k_sv = g.affine(kt, T::lit(n.k_ref), T::zero());
        Built { params, do_pred, i0_hat, k_sv, conf, bio, weights: wts, gain, do_physics: do_wls }
    }

    /// Appends the composite loss; `physics` false drops the physics term
    /// entirely (plain supervised objective).
    pub(crate) fn loss_vars(&self, g: &mut Graph<T>, b: &Built, inp: &Prepared<T>, physics: bool) -> LossVars {
        let p = self.norm.n_pixels();
        let cfg = &self.config;
        let err = g.affine(b.do_pred, T::lit(1.0 / DO_SCALE), T::lit(-inp.do_gt / DO_SCALE));
        let data = g.square(err);

        let i_leaf = g.leaf(inp.intensity.clone(), p, 1);
        let mask = g.leaf(inp.mask.clone(), p, 1);
        let ratio = g.div(b.i0_hat, i_leaf);
        let kd = g.affine(b.k_sv, T::lit(inp.do_gt), T::one());
        let r = g.sub(ratio, kd);
        let r2 = g.square(r);
        let cr2 = g.mul(b.conf, r2);
        let cr2 = g.mul(cr2, mask);
        let num = g.sum(cr2);
        let cm = g.mul(b.conf, mask);
        let den = g.sum(cm);
        let nm = T::lit(inp.n_mask.max(1) as f64);
        let mean_c = g.scalar(den) / nm;
        let floored = !(mean_c > T::lit(CONF_FLOOR));
        let physics_var = if inp.n_mask == 0 {
            g.constant(T::zero())
        } else if floored {
            g.affine(num, T::one() / (nm * T::lit(CONF_FLOOR)), T::zero())
        } else {
            g.div(num, den)
        };

        let bt = g.affine(b.bio, T::one(), T::lit(-inp.bio_target));
        let bio = g.square(bt);

        let mut total = data;
        if physics && cfg.lambda_physics != 0.0 {
            let t = g.affine(physics_var, T::lit(cfg.lambda_physics), T::zero());
            total = g.add(total, t);
        }
        if cfg.lambda_biofouling != 0.0 {
            let t = g.affine(bio, T::lit(cfg.lambda_biofouling), T::zero());
            total = g.add(total, t);
        }
        LossVars { total, data, physics: physics_var, bio, floored }
    }

    pub(crate) fn outputs(&self, g: &Graph<T>, b: &Built, inp: &Prepared<T>) -> ModelOutputs {
        let f = |v: Var| g.value(v).iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
        let i0 = f(b.i0_hat);
        let k = f(b.k_sv);
        let wts = f(b.weights);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, &m) in inp.mask_bool.iter().enumerate() {
            if m {
                lo = lo.min(wts[i]);
                hi = hi.max(wts[i]);
            }
        }
        let span = hi - lo;
        let attention = wts
            .iter()
            .zip(&inp.mask_bool)
            .map(|(&w, &m)| {
                if !m {
                    0.0
                } else if span > 0.0 {
                    (w - lo) / span
                } else {
                    1.0
                }
            })
            .collect();
        ModelOutputs {
            width: self.norm.width,
            height: self.norm.height,
            do_pred: g.scalar(b.do_pred).to_f64_lossy(),
            sv_maps: i0.into_iter().zip(k).collect(),
            confidence: f(b.conf),
            biofouling_pred: g.scalar(b.bio).to_f64_lossy(),
            attention,
            physics_mask: inp.mask_bool.clone(),
            gain: g.scalar(b.gain).to_f64_lossy(),
            do_physics: g.scalar(b.do_physics).to_f64_lossy(),
        }
    }

    pub fn forward(&self, frame: &Frame) -> Result<ModelOutputs> {
        let inp = self.prepare(frame, None, None)?;
        let mut g = Graph::new();
        let b = self.build(&mut g, &inp, None);
        Ok(self.outputs(&g, &b, &inp))
    }

    /// Loss of one frame with gradients for every parameter.
    pub(crate) fn loss_and_grads(
        &self,
        inp: &Prepared<T>,
        perm: Option<&Arc<Vec<usize>>>,
        physics: bool,
    ) -> (LossBreakdown, ModelOutputs, Vec<Vec<T>>) {
        let mut g = Graph::new();
        let b = self.build(&mut g, inp, perm);
        let l = self.loss_vars(&mut g, &b, inp, physics);
        let mut grads = g.backward(l.total);
        let pg = b
            .params
            .iter()
            .zip(&self.params)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| vec![T::zero(); p.len()]))
            .collect();
        let lp = if physics { self.config.lambda_physics } else { 0.0 };
        let sc = |v: Var| g.scalar(v).to_f64_lossy();
        let mut br =
            LossBreakdown::combine(sc(l.data), sc(l.physics), sc(l.bio), lp, self.config.lambda_biofouling, l.floored);
        br.l_total = sc(l.total);
        (br, self.outputs(&g, &b, inp), pg)
    }

    /// Loss value only.
    pub(crate) fn loss(&self, inp: &Prepared<T>, physics: bool) -> T {
        let mut g = Graph::new();
        let b = self.build(&mut g, inp, None);
        let l = self.loss_vars(&mut g, &b, inp, physics);
        g.scalar(l.total)
    }
}

/// Weighted least squares for `q` minimizing
/// `Σ w (y − k̃·q)² + ρ(q − q_mid)²` with normalized weights.
fn wls_solve<T: Scalar>(g: &mut Graph<T>, w: Var, y: Var, kt: Var, q_mid: T) -> Var {
    let wsum = g.sum(w);
    let wsum = g.affine(wsum, T::one(), T::lit(1e-12));
    let winv = g.recip(wsum);
    let wn = g.mul_scalar(w, winv);
    let wk = g.mul(wn, kt);
    let wky = g.mul(wk, y);
    let sky = g.sum(wky);
    let wkk = g.mul(wk, kt);
    let skk = g.sum(wkk);
    let rho = T::lit(WLS_PRIOR);
    let num = g.affine(sky, T::one(), rho * q_mid);
    let den = g.affine(skk, T::one(), rho);
    g.div(num, den)
}

/// Forward pass of a PGNN model with explicitly supplied frozen maps.
pub fn pgnn_forward(model: &Model<f64>, frame: &Frame, maps: &ParameterMaps<f64>) -> Result<ModelOutputs> {
    if !model.is_pgnn() {
        return Err(Error::Precondition("model was not built as a PGNN".into()));
    }
    if maps.width != model.norm.width || maps.height != model.norm.height {
        return Err(Error::Dimension(format!(
            "parameter maps are {}x{}, model grid is {}x{}",
            maps.width, maps.height, model.norm.width, model.norm.height
        )));
    }
    let frozen = FrozenMaps::from_maps(maps);
    let inp = model.prepare(frame, None, Some(&frozen))?;
    let mut g = Graph::new();
    let b = model.build(&mut g, &inp, None);
    Ok(model.outputs(&g, &b, &inp))
}

/// Composite loss recomputed from materialized outputs.
pub fn composite_loss(
    out: &ModelOutputs,
    frame: &Frame,
    day: &DayDataset,
    cfg: &ModelConfig,
    norm: &Normalization,
) -> Result<LossBreakdown> {
    frame.check_grid(out.width, out.height)?;
    let p = out.width * out.height;
    if out.sv_maps.len() != p || out.confidence.len() != p || out.physics_mask.len() != p {
        return Err(Error::Dimension("output maps do not match the frame grid".into()));
    }
    let err = (out.do_pred - frame.do_gt) / DO_SCALE;
    let l_data = err * err;
    let floor = INTENSITY_FLOOR * norm.s_ref;
    let (mut num, mut den, mut n) = (0.0, 0.0, 0usize);
    for i in 0..p {
        if !out.physics_mask[i] {
            continue;
        }
        let intensity = frame.value(i, RED).max(floor);
        let (i0, k) = out.sv_maps[i];
        let r = i0 / intensity - 1.0 - k * frame.do_gt;
        num += out.confidence[i] * r * r;
        den += out.confidence[i];
        n += 1;
    }
    let (l_physics, floored) = if n == 0 {
        (0.0, true)
    } else if den / n as f64 > CONF_FLOOR {
        (num / den, false)
    } else {
        (num / (n as f64 * CONF_FLOOR), true)
    };
    let b = out.biofouling_pred - norm.bio_target(day.biofouling_score);
    Ok(LossBreakdown::combine(l_data, l_physics, b * b, cfg.lambda_physics, cfg.lambda_biofouling, floored))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::sim::{simulate, SimConfig};

    pub(crate) fn small_setup(backbone: Backbone) -> (crate::data::Dataset, ModelConfig, Normalization) {
        let mut sc = SimConfig::reduced();
        sc.width = 16;
        sc.height = 16;
        sc.days = 2;
        let ds = simulate(&sc).unwrap();
        let cfg = ModelConfig { backbone, embed_dim: 16, heads_attn: 2, layers: 1, patch: 4, ..Default::default() };
        let train: Vec<&DayDataset> = ds.days.iter().collect();
        let norm = Normalization::from_training(&ds.meta, &train).unwrap();
        (ds, cfg, norm)
    }

    #[test]
    fn forward_is_finite_and_deterministic() {
        for bb in [Backbone::ConvSmall, Backbone::AttentionSmall] {
            let (ds, cfg, norm) = small_setup(bb);
            let m = Model::<f64>::new(cfg, norm, None).unwrap();
            let f = &ds.days[0].frames[5];
            let a = m.forward(f).unwrap();
            let b = m.forward(f).unwrap();
            assert_eq!(a, b);
            assert!(a.do_pred.is_finite() && a.biofouling_pred.is_finite() && a.gain.is_finite());
            assert!(a.confidence.iter().all(|c| (0.0..=1.0).contains(c)));
            assert!(a.attention.iter().all(|c| (0.0..=1.0).contains(c)));
            let hi = a.attention.iter().copied().fold(0.0, f64::max);
            assert_eq!(hi, 1.0);
            assert!(a.sv_maps.iter().all(|(i, k)| i.is_finite() && k.is_finite()));
        }
    }

    #[test]
    fn wrong_grid_is_rejected() {
        let (ds, cfg, norm) = small_setup(Backbone::ConvSmall);
        let m = Model::<f64>::new(cfg, norm, None).unwrap();
        let mut f = ds.days[0].frames[0].clone();
        f.width = 8;
        f.height = 32;
        assert!(matches!(m.forward(&f), Err(Error::Dimension(_))));
    }

    #[test]
    fn graph_loss_matches_materialized_loss() {
        let (ds, mut cfg, norm) = small_setup(Backbone::AttentionSmall);
        cfg.lambda_physics = 0.7;
        cfg.lambda_biofouling = 0.3;
        let m = Model::<f64>::new(cfg.clone(), norm.clone(), None).unwrap();
        let day = &ds.days[1];
        let f = &day.frames[12];
        let inp = m.prepare(f, Some(day.biofouling_score), None).unwrap();
        let (br, out, _) = m.loss_and_grads(&inp, None, true);
        let re = composite_loss(&out, f, day, &cfg, &norm).unwrap();
        for (a, b) in [
            (br.l_data, re.l_data),
            (br.l_physics, re.l_physics),
            (br.l_biofouling, re.l_biofouling),
            (br.l_total, re.l_total),
        ] {
            assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()), "{a} vs {b}");
        }
        let sum = br.l_data + 0.7 * br.l_physics + 0.3 * br.l_biofouling;
        assert!((br.l_total - sum).abs() <= 1e-9);
    }

    fn hand_outputs(i0: f64, k: f64, conf: f64, do_pred: f64) -> ModelOutputs {
        ModelOutputs {
            width: 2,
            height: 2,
            do_pred,
            sv_maps: vec![(i0, k); 4],
            confidence: vec![conf; 4],
            biofouling_pred: 0.0,
            attention: vec![0.0; 4],
            physics_mask: vec![true; 4],
            gain: 1.0,
            do_physics: do_pred,
        }
    }

    fn hand_frame(i: f64, do_gt: f64) -> (Frame, DayDataset, Normalization) {
        let f =
            Frame { width: 2, height: 2, channels: 1, pixels: vec![i; 4], temperature: 20.0, timestamp: 0.0, do_gt };
        let day = DayDataset { day_index: 1, frames: vec![f.clone()], plateau_windows: vec![], biofouling_score: 0.0 };
        let norm = Normalization {
            width: 2,
            height: 2,
            channels: 1,
            s_ref: 100.0,
            k_ref: 0.01,
            do_max: 100.0,
            bio_min: 0.0,
            bio_max: 0.0,
            film_mask: vec![true; 4],
        };
        (f, day, norm)
    }

    #[test]
    fn hand_built_physics_loss() {
        // r = 100/50 - 1 - 0.01·50 = 0.5
        let (f, day, norm) = hand_frame(50.0, 50.0);
        let cfg = ModelConfig { lambda_physics: 1.0, lambda_biofouling: 0.0, ..Default::default() };
        let l = composite_loss(&hand_outputs(100.0, 0.01, 1.0, 50.0), &f, &day, &cfg, &norm).unwrap();
        assert!((l.l_physics - 0.25).abs() < 1e-12);
        assert_eq!(l.l_data, 0.0);
        assert!((l.l_total - 0.25).abs() < 1e-12);
        assert!(!l.confidence_floored);
    }

    #[test]
    fn on_curve_frame_has_zero_physics_loss() {
        let (f, day, norm) = hand_frame(50.0, 100.0);
        let cfg = ModelConfig::default();
        let l = composite_loss(&hand_outputs(100.0, 0.01, 1.0, 90.0), &f, &day, &cfg, &norm).unwrap();
        assert!(l.l_physics.abs() < 1e-15);
    }

    #[test]
    fn zero_lambdas_reduce_to_data_loss() {
        let (f, day, norm) = hand_frame(50.0, 50.0);
        let cfg = ModelConfig { lambda_physics: 0.0, lambda_biofouling: 0.0, ..Default::default() };
        let l = composite_loss(&hand_outputs(120.0, 0.02, 0.5, 80.0), &f, &day, &cfg, &norm).unwrap();
        assert_eq!(l.l_total, l.l_data);
        assert!((l.l_data - 0.09).abs() < 1e-15);
    }

    #[test]
    fn zero_confidence_is_floored_and_flagged() {
        let (f, day, norm) = hand_frame(50.0, 50.0);
        let cfg = ModelConfig::default();
        let l = composite_loss(&hand_outputs(100.0, 0.01, 0.0, 50.0), &f, &day, &cfg, &norm).unwrap();
        assert!(l.confidence_floored);
        assert_eq!(l.l_physics, 0.0);
    }

    #[test]
    fn pgnn_with_planted_maps_is_on_curve() {
        let mut sc = SimConfig::noiseless();
        sc.width = 16;
        sc.height = 16;
        sc.days = 1;
        let (ds, truth) = crate::sim::simulate_with_truth(&sc).unwrap();
        let day = &ds.days[0];
        let norm = Normalization::from_training(&ds.meta, &[day]).unwrap();
        let frozen = FrozenMaps {
            i0: (0..256).map(|p| truth.i0[p] * truth.illumination[p]).collect(),
            k_sv: truth.k_sv.clone(),
            valid: vec![true; 256],
        };
        let cfg = ModelConfig { embed_dim: 16, ..Default::default() };
        let m = Model::<f64>::new(cfg.clone(), norm.clone(), Some(frozen)).unwrap();
        for f in &day.frames {
            let out = m.forward(f).unwrap();
            let l = composite_loss(&out, f, day, &cfg, &norm).unwrap();
            assert!(l.l_physics < 1e-9, "physics loss {}", l.l_physics);
            assert!((out.do_pred - f.do_gt).abs() < 1e-2, "{} vs {}", out.do_pred, f.do_gt);
        }
    }

    #[test]
    fn pgnn_masks_degenerate_pixels() {
        let (ds, cfg, norm) = small_setup(Backbone::ConvSmall);
        let p = norm.n_pixels();
        let mut frozen = FrozenMaps { i0: vec![200.0; p], k_sv: vec![0.005; p], valid: vec![true; p] };
        let film = norm.film_mask.iter().position(|&m| m).unwrap();
        frozen.valid[film] = false;
        let m = Model::<f64>::new(cfg, norm, Some(frozen)).unwrap();
        let out = m.forward(&ds.days[0].frames[3]).unwrap();
        assert!(!out.physics_mask[film]);
        assert_eq!(out.attention[film], 0.0);
    }
}
