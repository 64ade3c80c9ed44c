//! Registration quality and deformation-regularity metrics, plus paired
//! one-sided t-tests with Benjamini–Hochberg FDR correction.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::gridfield::DenseField;
use crate::volume::{LandmarkSet, MaskVolume};

/// Statistics of the deformation Jacobian `J = I + ∇u` over interior voxels.
///
/// The log-determinant summary covers only voxels with `det > 0`; folding is
/// reported separately as the percentage of voxels with `det < 0`, and
/// `excluded` counts everything left out of the log summary (det ≤ 0).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct JacobianReport {
    pub logdet_mean: f64,
    pub logdet_std: f64,
    /// Percentage of interior voxels with a negative determinant, in [0,100].
    pub folding_pct: f64,
    pub excluded: usize,
    pub interior_voxels: usize,
}

/// Aggregate quality report for one registered pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: Option<f64>,
    /// Mask-centroid distance in millimeters.
    pub centroid_mask_mm: Option<f64>,
    /// Mean landmark distance in millimeters.
    pub centroid_landmark_mm: Option<f64>,
    pub jacobian: Option<JacobianReport>,
}

impl MetricReport {
    pub fn empty() -> Self {
        MetricReport {
            dice: None,
            centroid_mask_mm: None,
            centroid_landmark_mm: None,
            jacobian: None,
        }
    }
}

fn check_dims(what: &str, a: [usize; 3], b: [usize; 3]) -> Result<()> {
    if a != b {
        return Err(Error::DimsMismatch {
            what: what.into(),
            lhs: a,
            rhs: b,
        });
    }
    Ok(())
}

/// Dice similarity of two masks after binarizing at 0.5; defined as 1 when
/// both are empty.
pub fn dice_score(a: &MaskVolume, b: &MaskVolume) -> Result<f64> {
    check_dims("dice_score", a.dims(), b.dims())?;
    let mut inter = 0u64;
    let mut ca = 0u64;
    let mut cb = 0u64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let xa = *x >= 0.5;
        let xb = *y >= 0.5;
        ca += u64::from(xa);
        cb += u64::from(xb);
        inter += u64::from(xa && xb);
    }
    if ca + cb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (ca + cb) as f64)
}

/// Intensity-weighted centroid of a mask, in voxel coordinates.
pub fn mask_centroid(m: &MaskVolume) -> Result<[f64; 3]> {
    let [w, h, d] = m.dims();
    let mut acc = [0.0f64; 3];
    let mut total = 0.0f64;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = f64::from(m.get(x, y, z));
                acc[0] += v * x as f64;
                acc[1] += v * y as f64;
                acc[2] += v * z as f64;
                total += v;
            }
        }
    }
    if total <= 0.0 {
        return Err(Error::InvalidArg("centroid of an empty mask".into()));
    }
    Ok([acc[0] / total, acc[1] / total, acc[2] / total])
}

/// Euclidean distance between mask centroids, with voxel offsets scaled by
/// the spacing (millimeters).
pub fn centroid_distance_masks(a: &MaskVolume, b: &MaskVolume, spacing: [f64; 3]) -> Result<f64> {
    check_dims("centroid_distance", a.dims(), b.dims())?;
    let ca = mask_centroid(a)?;
    let cb = mask_centroid(b)?;
    let mut acc = 0.0;
    for i in 0..3 {
        let d = (ca[i] - cb[i]) * spacing[i];
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// Mean Euclidean distance between corresponding landmarks (paired by
/// index), in millimeters.
pub fn centroid_distance_landmarks(
    a: &LandmarkSet,
    b: &LandmarkSet,
    spacing: [f64; 3],
) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArg(format!(
            "landmark count mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0.0;
    for (p, q) in a.points().iter().zip(b.points()) {
        let mut d2 = 0.0;
        for i in 0..3 {
            let d = (p[i] - q[i]) * spacing[i];
            d2 += d * d;
        }
        acc += d2.sqrt();
    }
    Ok(acc / a.len() as f64)
}

/// Map fixed-space landmarks through the field: `p' = p + u(p)` with
/// trilinear sampling of the field.
pub fn landmark_transfer(points: &LandmarkSet, field: &DenseField) -> Result<LandmarkSet> {
    let dims = field.dims;
    let mut out = Vec::with_capacity(points.len());
    for (id, p) in points.ids().iter().zip(points.points()) {
        let inside = (0..3).all(|a| p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64);
        if !inside {
            return Err(Error::LandmarkOutOfBounds {
                id: id.clone(),
                point: *p,
                dims,
            });
        }
        let u = field.sample(*p);
        out.push([p[0] + u[0], p[1] + u[1], p[2] + u[2]]);
    }
    LandmarkSet::new(points.ids().to_vec(), out)
}

/// Jacobian statistics of `φ(x) = x + u(x)` by central differences on
/// interior voxels.
pub fn jacobian_stats(field: &DenseField) -> Result<JacobianReport> {
    let [w, h, d] = field.dims;
    if w < 3 || h < 3 || d < 3 {
        return Err(Error::InvalidArg(format!(
            "jacobian stats need dims ≥ 3 per axis, got {:?}",
            field.dims
        )));
    }
    let idx = |x: usize, y: usize, z: usize| x + w * (y + h * z);
    let mut neg = 0usize;
    let mut zero = 0usize;
    let mut logs = Vec::with_capacity((w - 2) * (h - 2) * (d - 2));
    for z in 1..d - 1 {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut j = [[0.0f64; 3]; 3];
                for c in 0..3 {
                    let u = &field.comps[c];
                    j[c][0] = (u[idx(x + 1, y, z)] - u[idx(x - 1, y, z)]) / 2.0;
                    j[c][1] = (u[idx(x, y + 1, z)] - u[idx(x, y - 1, z)]) / 2.0;
                    j[c][2] = (u[idx(x, y, z + 1)] - u[idx(x, y, z - 1)]) / 2.0;
                    j[c][c] += 1.0;
                }
                let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
                    - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                    + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
                if det > 0.0 {
                    logs.push(det.ln());
                } else if det < 0.0 {
                    neg += 1;
                } else {
                    zero += 1;
                }
            }
        }
    }
    let interior = (w - 2) * (h - 2) * (d - 2);
    // Two-pass variance avoids cancellation on near-constant fields.
    let (mean, std) = if !logs.is_empty() {
        let n = logs.len() as f64;
        let m = logs.iter().sum::<f64>() / n;
        let var = logs.iter().map(|l| (l - m) * (l - m)).sum::<f64>() / n;
        (m, var.sqrt())
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(JacobianReport {
        logdet_mean: mean,
        logdet_std: std,
        folding_pct: 100.0 * neg as f64 / interior as f64,
        excluded: neg + zero,
        interior_voxels: interior,
    })
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df).expect("df > 0").cdf(t)
}

/// One-sided paired t-test of H1: mean(a - b) > 0.
///
/// Zero-variance convention: if all differences are equal, p = 0 when the
/// common difference is positive and p = 1 otherwise.
pub fn paired_t_one_sided(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArg(format!(
            "paired test length mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::InvalidArg("paired test needs ≥ 2 cases".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 {
        return Ok(if mean > 0.0 { 0.0 } else { 1.0 });
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    Ok(1.0 - student_t_cdf(t, (n - 1) as f64))
}

/// Benjamini–Hochberg step-up q-values: `q_(i) = min_{j ≥ i} p_(j)·m/j`,
/// clamped to 1, reported in the input order.
pub fn bh_fdr(pvalues: &[f64]) -> Vec<f64> {
    let m = pvalues.len();
    if m == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| pvalues[i].partial_cmp(&pvalues[j]).unwrap());
    let mut q = vec![0.0; m];
    let mut running = f64::INFINITY;
    for rank in (0..m).rev() {
        let i = order[rank];
        let candidate = pvalues[i] * m as f64 / (rank + 1) as f64;
        running = running.min(candidate).min(1.0);
        q[i] = running;
    }
    q
}

/// One paired comparison within a multiplicity family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedComparison {
    pub family: String,
    pub name: String,
    pub scores_a: Vec<f64>,
    pub scores_b: Vec<f64>,
}

/// Result of one comparison: the one-sided p-value and its BH-FDR q-value
/// corrected within the comparison's family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub family: String,
    pub name: String,
    pub n: usize,
    pub mean_diff: f64,
    pub p: f64,
    pub q: f64,
}

/// Run all paired one-sided tests, controlling multiplicity with BH-FDR
/// within each family.
pub fn paired_tests(comparisons: &[PairedComparison]) -> Result<Vec<TestResult>> {
    let mut results = Vec::with_capacity(comparisons.len());
    for c in comparisons {
        let p = paired_t_one_sided(&c.scores_a, &c.scores_b)?;
        let mean_diff = c
            .scores_a
            .iter()
            .zip(&c.scores_b)
            .map(|(a, b)| a - b)
            .sum::<f64>()
            / c.scores_a.len() as f64;
        results.push(TestResult {
            family: c.family.clone(),
            name: c.name.clone(),
            n: c.scores_a.len(),
            mean_diff,
            p,
            q: f64::NAN,
        });
    }
    let mut families: Vec<String> = results.iter().map(|r| r.family.clone()).collect();
    families.sort();
    families.dedup();
    for fam in families {
        let idxs: Vec<usize> = results
            .iter()
            .enumerate()
            .filter(|(_, r)| r.family == fam)
            .map(|(i, _)| i)
            .collect();
        let ps: Vec<f64> = idxs.iter().map(|&i| results[i].p).collect();
        let qs = bh_fdr(&ps);
        for (&i, q) in idxs.iter().zip(qs) {
            results[i].q = q;
        }
    }
    Ok(results)
}
