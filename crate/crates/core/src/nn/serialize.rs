//! Versioned model files: a UTF-8 header followed by little-endian `f32`
//! tensors in header order.

use std::collections::BTreeMap;
use std::path::Path;

use super::model::{FrozenMaps, Model, Normalization};
use super::ModelConfig;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &str = "optode-model";
pub const MODEL_VERSION: u32 = 1;

/// Bookkeeping stored next to the weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelHeader {
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("<model>", detail)
}

pub fn to_bytes(model: &Model<f64>, header: &ModelHeader) -> Vec<u8> {
    let mut tensors: Vec<(String, usize, usize, Vec<f32>)> = model
        .param_names()
        .zip(&model.params)
        .map(|((n, r, c), v)| (n.to_string(), r, c, v.iter().map(|&x| x as f32).collect()))
        .collect();
    if let Some(f) = &model.frozen {
        let p = f.n_pixels();
        tensors.push(("frozen.i0".into(), p, 1, f.i0.iter().map(|&x| x as f32).collect()));
        tensors.push(("frozen.k_sv".into(), p, 1, f.k_sv.iter().map(|&x| x as f32).collect()));
        tensors.push(("frozen.valid".into(), p, 1, f.valid.iter().map(|&b| b as u8 as f32).collect()));
    }
    let metrics = serde_json::to_string(&header.metrics).expect("metrics serialize");
    let mut text = String::new();
    text.push_str(&format!("{MODEL_MAGIC} {MODEL_VERSION}\n"));
    text.push_str("endianness little\ndtype f32\n");
    text.push_str(&format!("backbone {}\n", model.config.backbone.as_str()));
    text.push_str(&format!("seed {}\n", model.config.seed));
    text.push_str(&format!("epoch {}\n", header.epoch));
    text.push_str(&format!("config {}\n", serde_json::to_string(&model.config).expect("config serialize")));
    text.push_str(&format!("normalization {}\n", serde_json::to_string(&model.norm).expect("norm serialize")));
    text.push_str(&format!("metrics {metrics}\n"));
    text.push_str(&format!("pgnn {}\n", model.frozen.is_some() as u8));
    for (n, r, c, _) in &tensors {
        text.push_str(&format!("tensor {n} {r} {c}\n"));
    }
    text.push_str("end\n");
    let mut out = text.into_bytes();
    for (_, _, _, v) in &tensors {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Model<f64>, ModelHeader)> {
    let end = bytes.windows(4).position(|w| w == b"end\n").ok_or_else(|| bad("missing header terminator"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut body = &bytes[end + 4..];
    let mut lines = text.lines();
    let first = lines.next().ok_or_else(|| bad("empty header"))?;
    let mut it = first.split_whitespace();
    if it.next() != Some(MODEL_MAGIC) {
        return Err(bad("not a model file"));
    }
    let version: u32 = it.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing version"))?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: MODEL_VERSION });
    }
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    let mut tensors = Vec::new();
    for line in lines {
        let (key, rest) = line.split_once(' ').ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
        if key == "tensor" {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let [name, r, c] = parts[..] else {
                return Err(bad(format!("malformed tensor line `{line}`")));
            };
            let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad dimension in `{line}`")));
            tensors.push((name.to_string(), dim(r)?, dim(c)?));
        } else {
            fields.insert(key, rest);
        }
    }
    let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing `{k}`")));
    if get("endianness")? != "little" || get("dtype")? != "f32" {
        return Err(bad("only little-endian f32 payloads are supported"));
    }
    let config: ModelConfig = serde_json::from_str(get("config")?).map_err(|e| bad(format!("config: {e}")))?;
    let norm: Normalization =
        serde_json::from_str(get("normalization")?).map_err(|e| bad(format!("normalization: {e}")))?;
    let metrics: BTreeMap<String, f64> =
        serde_json::from_str(get("metrics")?).map_err(|e| bad(format!("metrics: {e}")))?;
    let epoch: usize = get("epoch")?.parse().map_err(|_| bad("bad epoch"))?;
    let pgnn = get("pgnn")? == "1";

    let mut data: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut order = Vec::new();
    for (name, r, c) in &tensors {
        let n = r * c;
        if body.len() < 4 * n {
            return Err(bad(format!("payload truncated in tensor {name}")));
        }
        let v = body[..4 * n].chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        body = &body[4 * n..];
        data.insert(name.clone(), v);
        order.push((name.clone(), *r, *c));
    }
    if !body.is_empty() {
        return Err(bad(format!("{} trailing bytes after the last tensor", body.len())));
    }
    let frozen = if pgnn {
        let mut take = |k: &str| data.remove(k).ok_or_else(|| bad(format!("missing tensor {k}")));
        let i0 = take("frozen.i0")?;
        let k = take("frozen.k_sv")?;
        let valid = take("frozen.valid")?;
        Some(FrozenMaps {
            i0: i0.into_iter().map(f64::from).collect(),
            k_sv: k.into_iter().map(f64::from).collect(),
            valid: valid.into_iter().map(|v| v != 0.0).collect(),
        })
    } else {
        None
    };
    let mut model = Model::<f64>::new(config, norm, frozen)?;
    let expected: Vec<(String, usize, usize)> = model.param_names().map(|(n, r, c)| (n.to_string(), r, c)).collect();
    let stored: Vec<&(String, usize, usize)> = order.iter().filter(|(n, _, _)| !n.starts_with("frozen.")).collect();
    if stored.len() != expected.len() || stored.iter().zip(&expected).any(|(a, b)| *a != b) {
        return Err(bad("tensor layout does not match the stored configuration"));
    }
    for (k, (name, _, _)) in expected.iter().enumerate() {
        model.params[k] = data[name].iter().map(|&x| f64::from(x)).collect();
    }
    Ok((model, ModelHeader { epoch, metrics }))
}

pub fn save(path: &Path, model: &Model<f64>, header: &ModelHeader) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(model, header))
}

pub fn load(path: &Path) -> Result<(Model<f64>, ModelHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Format { detail, .. } => Error::format(path, detail),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Backbone;

    fn model(bb: Backbone, pgnn: bool) -> Model<f64> {
        let p = 64;
        let norm = Normalization {
            width: 8,
            height: 8,
            channels: 3,
            s_ref: 150.0,
            k_ref: 0.006,
            do_max: 250.0,
            bio_min: 0.1,
            bio_max: 0.4,
            film_mask: (0..p).map(|i| i % 5 != 0).collect(),
        };
        let frozen = pgnn.then(|| FrozenMaps {
            i0: (0..p).map(|i| 100.0 + i as f64).collect(),
            k_sv: vec![0.004; p],
            valid: (0..p).map(|i| i % 7 != 0).collect(),
        });
        let cfg = ModelConfig {
            backbone: bb,
            embed_dim: 8,
            heads_attn: 2,
            patch: 4,
            layers: 1,
            seed: 3,
            ..Default::default()
        };
        Model::new(cfg, norm, frozen).unwrap()
    }

    #[test]
    fn round_trip_preserves_f32_weights() {
        for (bb, pgnn) in [(Backbone::ConvSmall, false), (Backbone::AttentionSmall, true)] {
            let m = model(bb, pgnn);
            let h = ModelHeader { epoch: 7, metrics: [("val_mae".to_string(), 3.5)].into() };
            let bytes = to_bytes(&m, &h);
            let (back, h2) = from_bytes(&bytes).unwrap();
            assert_eq!(h, h2);
            assert_eq!(back.config, m.config);
            assert_eq!(back.norm, m.norm);
            for (a, b) in back.params.iter().flatten().zip(m.params.iter().flatten()) {
                assert_eq!(*a, *b as f32 as f64);
            }
            assert_eq!(back.frozen.as_ref().map(|f| f.valid.clone()), m.frozen.as_ref().map(|f| f.valid.clone()));
            // re-serializing the loaded model is byte-identical
            assert_eq!(to_bytes(&back, &h2), bytes);
        }
    }

    #[test]
    fn version_bump_is_rejected() {
        let bytes = to_bytes(&model(Backbone::ConvSmall, false), &ModelHeader::default());
        let text = String::from_utf8_lossy(&bytes).replacen("optode-model 1", "optode-model 2", 1);
        let err = from_bytes(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 2, supported: 1 }));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = to_bytes(&model(Backbone::ConvSmall, false), &ModelHeader::default());
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
    }
}
