//! Dataset, map and report files.
//!
//! A dataset directory holds `manifest.json`, one little-endian `f32` blob
//! of interleaved frames per day (frames are `f64` in memory and rounded on
//! write) and two CSV series per day (temperature and
//! ground-truth DO, both keyed by frame index and timestamp).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, DatasetMeta, DayDataset, Frame, PlateauWindow};
use crate::error::{Error, Result};
use crate::nn::diag::DiagnosticMaps;
use crate::pixel_fit::ParameterMaps;
use crate::scalar::Scalar;

pub const DATASET_FORMAT: &str = "optode-dataset";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PROVENANCE_FILE: &str = "provenance.json";

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::format(path, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Run identity recorded next to every pipeline output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the canonical JSON of the effective configuration.
    pub config_digest: String,
    /// Digests of inputs the run read, keyed by role.
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> Result<Self> {
        Ok(Self {
            tool: "optode".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config_digest: config_digest(config)?,
            inputs: BTreeMap::new(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        write_atomic(&dir.join(PROVENANCE_FILE), format!("{text}\n").as_bytes())
    }
}

pub fn config_digest<C: Serialize>(config: &C) -> Result<String> {
    // serde_json::Value keeps object keys sorted, which makes the text canonical
    let v = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    let text = serde_json::to_string(&v).map_err(|e| Error::Config(e.to_string()))?;
    Ok(sha256_hex(text.as_bytes()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over every regular file below `dir`: sorted relative paths, each
/// followed by its length and contents.
pub fn dir_digest(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        let bytes = std::fs::read(dir.join(&rel)).map_err(|e| Error::io(dir.join(&rel), e))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let ft = entry.file_type().map_err(|e| Error::io(&path, e))?;
        if ft.is_dir() {
            collect_files(root, &path, out)?;
        } else if ft.is_file() {
            let rel = path.strip_prefix(root).expect("walk stays below root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DayEntry {
    pub day_index: usize,
    pub frame_count: usize,
    pub plateau_windows: Vec<PlateauWindow>,
    pub biofouling_score: f64,
    pub temperature_series: String,
    pub do_gt_series: String,
    pub frames_blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub endianness: String,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major film mask, one `0`/`1` character per pixel.
    pub film_mask: String,
    pub seed: Option<u64>,
    pub generator: Option<serde_json::Value>,
    pub days: Vec<DayEntry>,
}

fn day_files(d: usize) -> (String, String, String) {
    (format!("day{d:02}_temperature.csv"), format!("day{d:02}_do.csv"), format!("day{d:02}_frames.f32"))
}

/// Writes `ds` into a new directory `dir`. Files are assembled in a temp
/// sibling directory that is renamed into place, so a failed write leaves
/// nothing behind. `dir` must not exist or be empty.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    if dir.exists() {
        let mut it = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if it.next().is_some() {
            return Err(Error::Precondition(format!("refusing to write into non-empty directory {}", dir.display())));
        }
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir.file_name().ok_or_else(|| Error::format(dir, "path has no directory name"))?;
    let tmp = parent.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let res = write_dataset_files(ds, &tmp).and_then(|m| {
        if dir.exists() {
            std::fs::remove_dir(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        Ok(m)
    });
    if res.is_err() {
        let _ = std::fs::remove_dir_all(&tmp);
    }
    res.map(|_| dir.join(MANIFEST_FILE))
}

fn write_dataset_files(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    let m = &ds.meta;
    let mut days = Vec::with_capacity(ds.days.len());
    for day in &ds.days {
        let (tf, df, bf) = day_files(day.day_index);
        let mut blob = Vec::with_capacity(day.frames.len() * m.n_pixels() * m.channels * 4);
        let mut temp = String::from("frame,timestamp,temperature_c\n");
        let mut gt = String::from("frame,timestamp,do_umol_per_l\n");
        for (i, f) in day.frames.iter().enumerate() {
            f.check_grid(m.width, m.height)?;
            if f.channels != m.channels || f.pixels.len() != m.n_pixels() * m.channels {
                return Err(Error::Dimension(format!("day {} frame {i} has the wrong channel layout", day.day_index)));
            }
            for v in &f.pixels {
                blob.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            let _ = writeln!(temp, "{i},{},{}", f.timestamp, f.temperature);
            let _ = writeln!(gt, "{i},{},{}", f.timestamp, f.do_gt);
        }
        std::fs::write(dir.join(&bf), &blob).map_err(|e| Error::io(dir.join(&bf), e))?;
        std::fs::write(dir.join(&tf), temp).map_err(|e| Error::io(dir.join(&tf), e))?;
        std::fs::write(dir.join(&df), gt).map_err(|e| Error::io(dir.join(&df), e))?;
        days.push(DayEntry {
            day_index: day.day_index,
            frame_count: day.frames.len(),
            plateau_windows: day.plateau_windows.clone(),
            biofouling_score: day.biofouling_score,
            temperature_series: tf,
            do_gt_series: df,
            frames_blob: bf,
        });
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        endianness: "little".into(),
        width: m.width,
        height: m.height,
        channels: m.channels,
        film_mask: m.film_mask.iter().map(|&b| if b { '1' } else { '0' }).collect(),
        seed: m.seed,
        generator: m.generator.clone(),
        days,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_FILE), format!("{text}\n")).map_err(|e| Error::io(dir.join(MANIFEST_FILE), e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if v.get("format").and_then(|f| f.as_str()) != Some(DATASET_FORMAT) {
        return Err(Error::format(&path, "not a dataset manifest"));
    }
    let version = v.get("version").and_then(|x| x.as_u64()).ok_or_else(|| Error::format(&path, "missing version"))?;
    if version != DATASET_VERSION as u64 {
        return Err(Error::UnsupportedVersion {
            found: version.min(u32::MAX as u64) as u32,
            supported: DATASET_VERSION,
        });
    }
    let m: DatasetManifest = serde_json::from_value(v).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.endianness != "little" {
        return Err(Error::format(&path, format!("unsupported endianness `{}`", m.endianness)));
    }
    if m.film_mask.len() != m.width * m.height || m.film_mask.chars().any(|c| c != '0' && c != '1') {
        return Err(Error::format(&path, "film mask must hold one 0/1 character per pixel"));
    }
    Ok(m)
}

fn read_series(path: &Path, n: usize) -> Result<Vec<(f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let mut out = Vec::with_capacity(n);
    for (k, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let bad = || Error::format(path, format!("row {}: expected frame,timestamp,value", k + 1));
        let parts: Vec<&str> = line.split(',').collect();
        let [i, ts, v] = parts[..] else { return Err(bad()) };
        if i.trim().parse::<usize>().map_err(|_| bad())? != k {
            return Err(Error::format(path, format!("row {}: frame indices must be consecutive from 0", k + 1)));
        }
        out.push((ts.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?));
    }
    if out.len() != n {
        return Err(Error::format(path, format!("expected {n} rows, found {}", out.len())));
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let frame_len = m.width * m.height * m.channels;
    let mut days = Vec::with_capacity(m.days.len());
    for e in &m.days {
        let bp = dir.join(&e.frames_blob);
        let expected = (frame_len * e.frame_count * 4) as u64;
        let found = std::fs::metadata(&bp).map_err(|err| Error::io(&bp, err))?.len();
        if found != expected {
            return Err(Error::BlobSize { day: e.day_index, expected, found });
        }
        let bytes = std::fs::read(&bp).map_err(|err| Error::io(&bp, err))?;
        let temps = read_series(&dir.join(&e.temperature_series), e.frame_count)?;
        let gts = read_series(&dir.join(&e.do_gt_series), e.frame_count)?;
        let frames = (0..e.frame_count)
            .map(|i| -> Result<Frame> {
                if temps[i].0.to_bits() != gts[i].0.to_bits() {
                    return Err(Error::format(
                        dir.join(&e.do_gt_series),
                        format!("frame {i}: timestamp differs from the temperature series"),
                    ));
                }
                let chunk = &bytes[i * frame_len * 4..(i + 1) * frame_len * 4];
                Ok(Frame {
                    width: m.width,
                    height: m.height,
                    channels: m.channels,
                    pixels: chunk
                        .chunks_exact(4)
                        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                        .collect(),
                    temperature: temps[i].1,
                    timestamp: temps[i].0,
                    do_gt: gts[i].1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let day = DayDataset {
            day_index: e.day_index,
            frames,
            plateau_windows: e.plateau_windows.clone(),
            biofouling_score: e.biofouling_score,
        };
        day.validate()?;
        days.push(day);
    }
    Ok(Dataset {
        meta: DatasetMeta {
            width: m.width,
            height: m.height,
            channels: m.channels,
            film_mask: m.film_mask.chars().map(|c| c == '1').collect(),
            seed: m.seed,
            generator: m.generator,
        },
        days,
    })
}

/// Plain-text PGM (P2) with 16-bit levels, min–max scaled over the finite
/// values; non-finite entries map to 0.
pub fn pgm_p2(width: usize, height: usize, values: &[f64]) -> Result<String> {
    if values.len() != width * height {
        return Err(Error::Dimension(format!("{} values for a {width}×{height} image", values.len())));
    }
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let mut s = format!("P2\n{width} {height}\n65535\n");
    for row in values.chunks(width.max(1)) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let q = if !v.is_finite() {
                    0
                } else if hi > lo {
                    ((v - lo) / (hi - lo) * 65535.0).round() as u32
                } else {
                    0
                };
                q.to_string()
            })
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    Ok(s)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    write_atomic(path, pgm_p2(width, height, values)?.as_bytes())
}

/// Parses a P2 image back into raw levels.
pub fn parse_pgm_p2(text: &str) -> Result<(usize, usize, u32, Vec<u32>)> {
    let bad = |m: &str| Error::format("<pgm>", m.to_string());
    let mut tok = text.lines().filter(|l| !l.starts_with('#')).flat_map(str::split_whitespace);
    if tok.next() != Some("P2") {
        return Err(bad("missing P2 magic"));
    }
    let mut num = || -> Result<u32> {
        tok.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("truncated header or pixel data"))
    };
    let (w, h, max) = (num()? as usize, num()? as usize, num()?);
    let px = (0..w * h).map(|_| num()).collect::<Result<Vec<_>>>()?;
    Ok((w, h, max, px))
}

/// Per-pixel fits as CSV rows `x,y,model,params,metrics,status`; parameter
/// and metric fields are `name=value` pairs joined by `;`.
pub fn maps_csv<T: Scalar>(maps: &ParameterMaps<T>) -> String {
    let f = |x: T| x.to_f64_lossy();
    let mut s = String::from("x,y,model,params,metrics,status\n");
    for p in 0..maps.n_pixels() {
        let (x, y) = (p % maps.width, p / maps.width);
        let metrics = |m: &crate::sv::PixelMetrics<T>| {
            format!("k_sv={};i0={};dr={};lod={};r2={}", f(m.k_sv), f(m.i0), f(m.dr), f(m.lod), f(m.r2))
        };
        let l = &maps.linear[p];
        let _ = writeln!(
            s,
            "{x},{y},linear,i0={};k_sv={},{},{}",
            f(l.params.i0),
            f(l.params.k_sv),
            metrics(&l.metrics),
            l.status.as_str()
        );
        let t = &maps.two_site[p];
        let _ = writeln!(
            s,
            "{x},{y},two_site,i0={};a={};k1={};k2={},{},{}",
            f(t.params.i0),
            f(t.params.a),
            f(t.params.k1),
            f(t.params.k2),
            metrics(&t.metrics),
            t.status.as_str()
        );
    }
    s
}

/// Diagnostic maps as CSV rows `x,y,in_mask,residual,attention,confidence`;
/// masked residuals are written as `NaN`.
pub fn diagnostics_csv(maps: &DiagnosticMaps) -> String {
    let mut s = String::from("x,y,in_mask,residual,attention,confidence\n");
    for p in 0..maps.width * maps.height {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            p % maps.width,
            p / maps.width,
            u8::from(maps.physics_mask[p]),
            maps.residual[p],
            maps.attention[p],
            maps.confidence[p]
        );
    }
    s
}

/// Writes `<stem>.csv` plus `<stem>_residual.pgm`, `<stem>_attention.pgm`
/// and `<stem>_confidence.pgm` into `dir`.
pub fn write_diagnostics(dir: &Path, stem: &str, maps: &DiagnosticMaps) -> Result<()> {
    write_atomic(&dir.join(format!("{stem}.csv")), diagnostics_csv(maps).as_bytes())?;
    for (name, values) in
        [("residual", &maps.residual), ("attention", &maps.attention), ("confidence", &maps.confidence)]
    {
        write_pgm(&dir.join(format!("{stem}_{name}.pgm")), maps.width, maps.height, values)?;
    }
    Ok(())
}

/// Reads a TOML or JSON configuration; JSON is chosen by a `.json`
/// extension.
pub fn load_config<C: serde::de::DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))).map_err(|e| match e {
        Error::Config(d) => Error::Config(format!("{}: {d}", path.display())),
        other => other,
    })
}

pub fn parse_config<C: serde::de::DeserializeOwned>(text: &str, json: bool) -> Result<C> {
    if json {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    } else {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{simulate, SimConfig};

    fn small() -> Dataset {
        simulate(&SimConfig { width: 8, height: 6, days: 2, frames_per_plateau: 2, ..SimConfig::default() }).unwrap()
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let ds = small();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("d");
        write_dataset(&ds, &dir).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.days.len(), ds.days.len());
        for (a, b) in back.days.iter().zip(&ds.days) {
            assert_eq!(a.plateau_windows, b.plateau_windows);
            assert_eq!(a.biofouling_score.to_bits(), b.biofouling_score.to_bits());
            for (fa, fb) in a.frames.iter().zip(&b.frames) {
                let stored: Vec<f64> = fb.pixels.iter().map(|&v| f64::from(v as f32)).collect();
                assert_eq!(fa.pixels, stored);
                assert_eq!(fa.temperature.to_bits(), fb.temperature.to_bits());
                assert_eq!(fa.do_gt.to_bits(), fb.do_gt.to_bits());
                assert_eq!(fa.timestamp.to_bits(), fb.timestamp.to_bits());
            }
        }
        // a second write is byte-identical
        let dir2 = tmp.path().join("e");
        write_dataset(&back, &dir2).unwrap();
        assert_eq!(dir_digest(&dir).unwrap(), dir_digest(&dir2).unwrap());
    }

    #[test]
    fn truncated_blob_names_the_day() {
        let ds = small();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("d");
        write_dataset(&ds, &dir).unwrap();
        let blob = dir.join("day02_frames.f32");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        match read_dataset(&dir) {
            Err(Error::BlobSize { day: 2, expected, found }) => assert_eq!(expected - 4, found),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let ds = small();
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("d");
        write_dataset(&ds, &dir).unwrap();
        let mp = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mp).unwrap().replace("\"version\": 1", "\"version\": 7");
        std::fs::write(&mp, text).unwrap();
        assert!(matches!(read_dataset(&dir), Err(Error::UnsupportedVersion { found: 7, supported: 1 })));
    }

    #[test]
    fn non_empty_target_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("x"), "keep").unwrap();
        assert!(write_dataset(&small(), tmp.path()).is_err());
        assert_eq!(std::fs::read_to_string(tmp.path().join("x")).unwrap(), "keep");
        // empty existing directory is fine
        let empty = tmp.path().join("empty");
        std::fs::create_dir(&empty).unwrap();
        write_dataset(&small(), &empty).unwrap();
    }

    #[test]
    fn pgm_scaling() {
        let s = pgm_p2(3, 1, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s, "P2\n3 1\n65535\n0 32768 65535\n");
        let (w, h, max, px) = parse_pgm_p2(&s).unwrap();
        assert_eq!((w, h, max), (3, 1, 65535));
        assert_eq!(px, vec![0, 32768, 65535]);
        assert_eq!(pgm_p2(2, 1, &[f64::NAN, 5.0]).unwrap(), "P2\n2 1\n65535\n0 0\n");
        assert!(pgm_p2(2, 2, &[1.0]).is_err());
    }

    #[test]
    fn config_formats() {
        let t: SimConfig = parse_config("days = 3\nseed = 9\n[response]\nk_std = 0.5\n", false).unwrap();
        assert_eq!((t.days, t.seed, t.response.k_std), (3, 9, 0.5));
        let j: SimConfig = parse_config("{\"days\": 3, \"seed\": 9, \"response\": {\"k_std\": 0.5}}", true).unwrap();
        assert_eq!(t, j);
        assert!(matches!(parse_config::<SimConfig>("dayz = 3", false), Err(Error::Config(_))));
    }

    #[test]
    fn digests_are_stable() {
        let a = config_digest(&SimConfig::default()).unwrap();
        assert_eq!(a, config_digest(&SimConfig::default()).unwrap());
        assert_ne!(a, config_digest(&SimConfig { seed: 1, ..SimConfig::default() }).unwrap());
        let tmp = tempfile::tempdir().unwrap();
        std::fs::write(tmp.path().join("a.txt"), "1").unwrap();
        let d1 = dir_digest(tmp.path()).unwrap();
        std::fs::write(tmp.path().join("a.txt"), "2").unwrap();
        assert_ne!(d1, dir_digest(tmp.path()).unwrap());
    }

    #[test]
    fn maps_csv_layout() {
        use crate::pixel_fit::{fit_all_pixels, FitOptions, PlateauStack};
        let ds = small();
        let days: Vec<&DayDataset> = ds.days.iter().collect();
        let maps =
            fit_all_pixels(&PlateauStack::<f64>::from_days(&ds.meta, &days).unwrap(), &FitOptions::default()).unwrap();
        let csv = maps_csv(&maps);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "x,y,model,params,metrics,status");
        assert_eq!(lines.len(), 1 + 2 * 48);
        assert!(lines[1].starts_with("0,0,linear,i0="));
        assert!(lines[2].starts_with("0,0,two_site,i0="));
        assert_eq!(lines[1].split(',').count(), 6);
    }

    #[test]
    fn diagnostics_files() {
        let maps = DiagnosticMaps {
            width: 2,
            height: 1,
            residual: vec![f64::NAN, 0.5],
            attention: vec![0.0, 1.0],
            confidence: vec![0.3, 0.9],
            physics_mask: vec![false, true],
        };
        let csv = diagnostics_csv(&maps);
        assert_eq!(csv, "x,y,in_mask,residual,attention,confidence\n0,0,0,NaN,0,0.3\n1,0,1,0.5,1,0.9\n");
        let t = tempfile::tempdir().unwrap();
        write_diagnostics(t.path(), "d", &maps).unwrap();
        let (w, h, _, px) = parse_pgm_p2(&std::fs::read_to_string(t.path().join("d_residual.pgm")).unwrap()).unwrap();
        assert_eq!((w, h), (2, 1));
        // a single finite value has no range and maps to 0
        assert_eq!(px, vec![0, 0]);
        assert!(t.path().join("d_attention.pgm").exists() && t.path().join("d_confidence.pgm").exists());
    }
}
