//! File formats: profile CSVs, heatmap images, parameter checkpoints,
//! dataset bundles and TOML manifests. Every writer goes through
//! [`write_atomic`].

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{FeatureScaling, MlpSpec, UdeParams};
use crate::synthetic::{Dataset, DatasetSpec};

/// Writes `bytes` to a temporary sibling and renames it over `path`, so a
/// failed write never leaves a truncated file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> Result<String> {
    fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| Error::io(path, e))
}

/// Nine significant digits in scientific notation.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::invalid(format!("serialising TOML: {e}")))
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_toml(value)?.as_bytes())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::parse(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileTable {
    pub z: Vec<f64>,
    pub truth: Vec<f64>,
    pub pred: Vec<f64>,
    pub residual: Vec<f64>,
}

pub const PROFILE_HEADER: &str = "z,true,pred,residual";

pub fn profile_csv(z: &[f64], truth: &[f64], pred: &[f64]) -> Result<String> {
    if truth.len() != z.len() || pred.len() != z.len() {
        return Err(Error::invalid(format!(
            "profile columns differ in length: z {}, true {}, pred {}",
            z.len(),
            truth.len(),
            pred.len()
        )));
    }
    let mut s = String::from(PROFILE_HEADER);
    s.push('\n');
    for i in 0..z.len() {
        let row = [z[i], truth[i], pred[i], pred[i] - truth[i]];
        s.push_str(&row.map(sig9).join(","));
        s.push('\n');
    }
    Ok(s)
}

pub fn write_profile_csv(path: &Path, z: &[f64], truth: &[f64], pred: &[f64]) -> Result<()> {
    write_atomic(path, profile_csv(z, truth, pred)?.as_bytes())
}

pub fn read_profile_csv(path: &Path) -> Result<ProfileTable> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(PROFILE_HEADER) {
        return Err(Error::parse(path, format!("expected header `{PROFILE_HEADER}`")));
    }
    let mut t = ProfileTable {
        z: vec![],
        truth: vec![],
        pred: vec![],
        residual: vec![],
    };
    for (n, line) in lines.enumerate() {
        let cols: Vec<f64> = line
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 2)))?;
        if cols.len() != 4 {
            return Err(Error::parse(path, format!("line {}: expected 4 columns", n + 2)));
        }
        t.z.push(cols[0]);
        t.truth.push(cols[1]);
        t.pred.push(cols[2]);
        t.residual.push(cols[3]);
    }
    Ok(t)
}

/// Colour-scale bounds written next to a heatmap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapBounds {
    pub true_min: f64,
    pub true_max: f64,
    pub pred_min: f64,
    pub pred_max: f64,
    /// Shared scale of the first two panels.
    pub value_min: f64,
    pub value_max: f64,
    pub residual_min: f64,
    pub residual_max: f64,
    /// The residual panel maps `[-residual_abs, residual_abs]`.
    pub residual_abs: f64,
    pub scale: usize,
}

const SEQUENTIAL: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];
const DIVERGING: [[f64; 3]; 3] = [[59.0, 76.0, 192.0], [255.0, 255.0, 255.0], [180.0, 4.0, 38.0]];

fn ramp(stops: &[[f64; 3]], s: f64) -> [u8; 3] {
    let s = if s.is_finite() { s.clamp(0.0, 1.0) } else { 0.5 };
    let x = s * (stops.len() - 1) as f64;
    let i = (x.floor() as usize).min(stops.len() - 2);
    let w = x - i as f64;
    let mut c = [0u8; 3];
    for k in 0..3 {
        c[k] = ((1.0 - w) * stops[i][k] + w * stops[i + 1][k]).round() as u8;
    }
    c
}

fn unit(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        (v - lo) / (hi - lo)
    } else {
        0.5
    }
}

/// Pixel upscaling so that each panel spans at least about 160 pixels.
fn upscale(rows: usize, cols: usize) -> usize {
    (160 / rows.max(cols)).max(1)
}

/// Renders the `[true | pred | residual]` triptych as a binary PPM.
/// Matrix rows run top to bottom and columns left to right.
pub fn render_heatmap(truth: &Matrix, pred: &Matrix) -> Result<(Vec<u8>, HeatmapBounds)> {
    if truth.shape() != pred.shape() {
        return Err(Error::invalid(format!(
            "heatmap panels differ in shape: {:?} vs {:?}",
            truth.shape(),
            pred.shape()
        )));
    }
    let (rows, cols) = truth.shape();
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("heatmap needs a non-empty matrix"));
    }
    let residual = pred.zip_map(truth, |p, t| p - t);
    let (value_min, value_max) = (truth.min().min(pred.min()), truth.max().max(pred.max()));
    let residual_abs = residual.min().abs().max(residual.max().abs());
    let scale = upscale(rows, cols);
    let bounds = HeatmapBounds {
        true_min: truth.min(),
        true_max: truth.max(),
        pred_min: pred.min(),
        pred_max: pred.max(),
        value_min,
        value_max,
        residual_min: residual.min(),
        residual_max: residual.max(),
        residual_abs,
        scale,
    };
    let (w, h) = (3 * cols * scale, rows * scale);
    let mut img = format!("P6\n{w} {h}\n255\n").into_bytes();
    img.reserve(w * h * 3);
    for r in 0..rows {
        let mut line = Vec::with_capacity(w * 3);
        for panel in 0..3 {
            for c in 0..cols {
                let px = match panel {
                    0 => ramp(&SEQUENTIAL, unit(truth.get(r, c), value_min, value_max)),
                    1 => ramp(&SEQUENTIAL, unit(pred.get(r, c), value_min, value_max)),
                    _ => ramp(&DIVERGING, unit(residual.get(r, c), -residual_abs, residual_abs)),
                };
                for _ in 0..scale {
                    line.extend_from_slice(&px);
                }
            }
        }
        for _ in 0..scale {
            img.extend_from_slice(&line);
        }
    }
    Ok((img, bounds))
}

pub fn bounds_path(image: &Path) -> PathBuf {
    image.with_extension("bounds.toml")
}

/// Writes the heatmap image and its bounds sidecar.
pub fn write_heatmap(path: &Path, truth: &Matrix, pred: &Matrix) -> Result<HeatmapBounds> {
    let (img, bounds) = render_heatmap(truth, pred)?;
    write_atomic(path, &img)?;
    write_toml(&bounds_path(path), &bounds)?;
    Ok(bounds)
}

/// Width, height and RGB bytes of a binary PPM written by [`render_heatmap`].
pub fn parse_ppm(bytes: &[u8]) -> Option<(usize, usize, &[u8])> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).ok()?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return None;
    }
    let (w, h) = (fields[1].parse().ok()?, fields[2].parse().ok()?);
    let data = bytes.get(pos + 1..)?;
    (data.len() == w * h * 3).then_some((w, h, data))
}

/// Text header of a parameter checkpoint; the values live in a sibling
/// binary file of little-endian f64 (`theta_p` then `theta_r`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub spec: MlpSpec,
    pub params_per_network: usize,
    pub scaling: FeatureScaling,
    pub rate_scale: f64,
    pub values_file: String,
    pub values_sha256: String,
}

const CHECKPOINT_FORMAT: &str = "soc-ude-params/1";

/// Writes `<stem>.toml` and `<stem>.bin` into `dir`.
pub fn write_checkpoint(dir: &Path, stem: &str, params: &UdeParams) -> Result<PathBuf> {
    let bytes: Vec<u8> = params.flat().iter().flat_map(|v| v.to_le_bytes()).collect();
    let bin = format!("{stem}.bin");
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        spec: params.spec,
        params_per_network: params.spec.param_count(),
        scaling: params.scaling.clone(),
        rate_scale: params.rate_scale,
        values_file: bin.clone(),
        values_sha256: sha256_hex(&bytes),
    };
    write_atomic(&dir.join(&bin), &bytes)?;
    let path = dir.join(format!("{stem}.toml"));
    write_toml(&path, &header)?;
    Ok(path)
}

pub fn read_checkpoint(header_path: &Path) -> Result<UdeParams> {
    let h: CheckpointHeader = read_toml(header_path)?;
    if h.format != CHECKPOINT_FORMAT {
        return Err(Error::parse(header_path, format!("unknown checkpoint format {:?}", h.format)));
    }
    if h.params_per_network != h.spec.param_count() {
        return Err(Error::parse(header_path, "parameter count does not match the network shape"));
    }
    let bin = header_path.parent().unwrap_or(Path::new(".")).join(&h.values_file);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if sha256_hex(&bytes) != h.values_sha256 {
        return Err(Error::parse(&bin, "checksum mismatch"));
    }
    if bytes.len() != 16 * h.params_per_network {
        return Err(Error::parse(&bin, format!("expected {} bytes, found {}", 16 * h.params_per_network, bytes.len())));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    UdeParams::zeros(h.spec)
        .with_scaling(h.scaling)
        .with_rate_scale(h.rate_scale)
        .with_flat(&flat)
}

/// Frozen dataset: the generating spec plus the exact arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetBundle {
    spec: DatasetSpec,
    dataset: Dataset,
}

pub const DATASET_FILE: &str = "dataset.toml";
pub const DATASET_PROFILES: &str = "dataset_profiles.csv";
pub const DATASET_DRIVERS: &str = "dataset_drivers.csv";

/// Writes the dataset as `dataset.toml` (exact, reloadable) plus two
/// human-readable CSVs: nodal profiles and the driver lattice.
pub fn write_dataset_bundle(dir: &Path, spec: &DatasetSpec, dataset: &Dataset) -> Result<Vec<PathBuf>> {
    let mut profiles = String::from("z,initial,target,clean_target\n");
    for (i, z) in dataset.grid.nodes().iter().enumerate() {
        let row = [
            *z,
            dataset.initial_profile.values[i],
            dataset.target_profile.values[i],
            dataset.clean_target.values[i],
        ];
        profiles.push_str(&row.map(|v| v.to_string()).join(","));
        profiles.push('\n');
    }
    let mut drivers = String::from("t,z,ph,cec,clay\n");
    let d = &dataset.drivers;
    for (r, t) in d.times().iter().enumerate() {
        for (c, z) in d.grid().nodes().iter().enumerate() {
            let row = [*t, *z, d.ph().get(r, c), d.cec().get(r, c), d.clay().get(r, c)];
            drivers.push_str(&row.map(|v| v.to_string()).join(","));
            drivers.push('\n');
        }
    }
    let bundle = DatasetBundle {
        spec: spec.clone(),
        dataset: dataset.clone(),
    };
    let paths = [dir.join(DATASET_FILE), dir.join(DATASET_PROFILES), dir.join(DATASET_DRIVERS)];
    write_toml(&paths[0], &bundle)?;
    write_atomic(&paths[1], profiles.as_bytes())?;
    write_atomic(&paths[2], drivers.as_bytes())?;
    Ok(paths.to_vec())
}

/// Reloads a bundle written by [`write_dataset_bundle`].
pub fn read_dataset_bundle(path: &Path) -> Result<(DatasetSpec, Dataset)> {
    let file = if path.is_dir() { path.join(DATASET_FILE) } else { path.to_path_buf() };
    let mut b: DatasetBundle = read_toml(&file)?;
    b.dataset.drivers = b.dataset.drivers.restore();
    Ok((b.spec, b.dataset))
}
