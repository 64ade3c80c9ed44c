//! Volumetric data model and file I/O.
//!
//! Volumes are stored on disk as a pair of files sharing one stem: a JSON
//! header (`<stem>.json`) carrying dims/spacing/dtype/order and a raw
//! little-endian f32 payload (`<stem>.raw`) in x-fastest linear order, so
//! `data[x + W*(y + H*z)]` addresses voxel (x, y, z). Round trips are
//! bit-exact.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    dtype: String,
    order: String,
}

/// A 3D scalar image with voxel spacing in millimeters.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArg(format!("zero volume dim in {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArg(format!("spacing must be > 0, got {spacing:?}")));
        }
        if data.len() != n {
            return Err(Error::PayloadSize {
                expected: n,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "volume data".into(),
            });
        }
        Ok(Volume { dims, spacing, data })
    }

    /// Constant-valued volume.
    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        Volume::new(dims, spacing, vec![value; n])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Per-volume min-max rescale to [0, 1]; constant volumes map to 0.
    pub fn min_max_normalized(&self) -> Volume {
        let lo = self.data.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        let data = if span > 0.0 {
            self.data.iter().map(|&v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data,
        }
    }
}

/// A segmentation mask sharing a `Volume`'s geometry. Values live in [0, 1]:
/// binary on load, possibly soft after warping.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl MaskVolume {
    /// Wrap values already in [0, 1] (soft masks allowed).
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        let v = Volume::new(dims, spacing, data)?;
        if v.data.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::InvalidArg("mask values must lie in [0,1]".into()));
        }
        Ok(MaskVolume {
            dims: v.dims,
            spacing: v.spacing,
            data: v.data,
        })
    }

    /// Binarize a volume at the given threshold.
    pub fn from_volume(v: &Volume, threshold: f32) -> MaskVolume {
        MaskVolume {
            dims: v.dims,
            spacing: v.spacing,
            data: v
                .data
                .iter()
                .map(|&x| if x >= threshold { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Re-binarize at 0.5 (used by metrics, never by the Dice loss).
    pub fn binarized(&self) -> MaskVolume {
        MaskVolume {
            dims: self.dims,
            spacing: self.spacing,
            data: self
                .data
                .iter()
                .map(|&x| if x >= 0.5 { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn as_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.clone(),
        }
    }
}

/// Named landmark points in continuous voxel coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    ids: Vec<String>,
    points: Vec<[f64; 3]>,
}

impl LandmarkSet {
    pub fn new(ids: Vec<String>, points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArg("landmark set must hold K ≥ 1 points".into()));
        }
        if ids.len() != points.len() {
            return Err(Error::InvalidArg(format!(
                "{} ids for {} points",
                ids.len(),
                points.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id.clone()) {
                return Err(Error::InvalidArg(format!("duplicate landmark id `{id}`")));
            }
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "landmark coordinates".into(),
            });
        }
        Ok(LandmarkSet { ids, points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Check all points against volume bounds. `strict` turns violations
    /// into errors; otherwise they are returned as warnings.
    pub fn validate_bounds(&self, dims: [usize; 3], strict: bool) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        for (id, p) in self.ids.iter().zip(&self.points) {
            let inside = (0..3).all(|a| p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64);
            if !inside {
                if strict {
                    return Err(Error::LandmarkOutOfBounds {
                        id: id.clone(),
                        point: *p,
                        dims,
                    });
                }
                warnings.push(format!("landmark {id} at {p:?} outside bounds {dims:?}"));
            }
        }
        Ok(warnings)
    }
}

/// Resolve `<stem>.json` / `<stem>.raw` from a path that may carry either
/// extension or none.
fn stem_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (stem.with_extension("json"), stem.with_extension("raw"))
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (header_path, raw_path) = stem_paths(path.as_ref());
    let header = VolumeHeader {
        dims: v.dims,
        spacing: v.spacing,
        dtype: "f32".into(),
        order: "x-fastest".into(),
    };
    let text = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Header {
            path: header_path.clone(),
            reason: e.to_string(),
        })?;
    fs::write(&header_path, text).map_err(|e| Error::io(&header_path, e))?;
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for value in &v.data {
        bytes.extend_from_slice(&value.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (header_path, raw_path) = stem_paths(path.as_ref());
    let text = fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::Header {
        path: header_path.clone(),
        reason: e.to_string(),
    })?;
    if header.dtype != "f32" {
        return Err(Error::Header {
            path: header_path.clone(),
            reason: format!("unsupported dtype `{}`", header.dtype),
        });
    }
    if header.order != "x-fastest" {
        return Err(Error::Header {
            path: header_path,
            reason: format!("unsupported order `{}`", header.order),
        });
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.dims[0] * header.dims[1] * header.dims[2];
    if bytes.len() != expected * 4 {
        return Err(Error::PayloadSize {
            expected,
            actual: bytes.len() / 4,
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(header.dims, header.spacing, data)
}

/// Load a volume and binarize it at 0.5.
pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let v = load_volume(path)?;
    Ok(MaskVolume::from_volume(&v, 0.5))
}

pub fn save_mask(m: &MaskVolume, path: impl AsRef<Path>) -> Result<()> {
    save_volume(&m.as_volume(), path)
}

/// Parse a landmark CSV (`id,x,y,z`). The header row is optional and
/// detected by a non-numeric second field.
pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::Landmark {
                path: path.into(),
                line: lineno + 1,
                reason: format!("expected 4 fields `id,x,y,z`, got {}", fields.len()),
            });
        }
        if lineno == 0 && fields[1].parse::<f64>().is_err() {
            continue; // header row
        }
        let mut p = [0.0; 3];
        for (a, f) in fields[1..].iter().enumerate() {
            p[a] = f.parse::<f64>().map_err(|e| Error::Landmark {
                path: path.into(),
                line: lineno + 1,
                reason: format!("bad coordinate `{f}`: {e}"),
            })?;
        }
        ids.push(fields[0].to_string());
        points.push(p);
    }
    LandmarkSet::new(ids, points)
}

pub fn save_landmarks(set: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("id,x,y,z\n");
    for (id, p) in set.ids().iter().zip(set.points()) {
        out.push_str(&format!("{},{},{},{}\n", id, p[0], p[1], p[2]));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
