//! Synthetic phantoms with known ground-truth deformations, masks, and
//! landmarks, making quantitative recovery experiments possible.
//!
//! A phantom is a band-limited cosine texture over the whole field of view
//! (so image gradients carry information everywhere) with an ellipsoidal
//! "organ" adding contrast. A pair is built by warping the phantom with a
//! ground-truth gridded field: the phantom is the moving image and the
//! pulled-back result is the fixed image, so the ground-truth field is an
//! exact minimizer of the similarity and is representable on its own grid.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridfield::{upsample, ControlGrid, DenseField, GridVec3, GriddedField, InterpKernel};
use crate::metrics::jacobian_stats;
use crate::volume::{LandmarkSet, MaskVolume, Volume};
use crate::warp::{warp_mask, warp_volume, BoundaryPolicy};

/// One synthetic registration case with its generating transformation.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub fixed: Volume,
    pub fixed_mask: MaskVolume,
    pub fixed_landmarks: LandmarkSet,
    pub moving: Volume,
    pub moving_mask: MaskVolume,
    pub moving_landmarks: LandmarkSet,
    pub gt_field: GriddedField,
    pub gt_dense: DenseField,
    pub seed: u64,
    pub intensity_noise: f64,
    pub label_noise: f64,
}

/// Generation knobs for a synthetic suite.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthConfig {
    pub dims: [usize; 3],
    pub grid_dims: [usize; 3],
    pub max_disp: f64,
    pub intensity_noise: f64,
    pub label_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: [32, 32, 32],
            grid_dims: [5, 5, 5],
            max_disp: 2.0,
            intensity_noise: 0.0,
            label_noise: 0.0,
        }
    }
}

struct Texture {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl Texture {
    fn random(rng: &mut impl Rng) -> Self {
        let waves = (0..8)
            .map(|_| {
                let f = [
                    rng.gen_range(0.8..3.0),
                    rng.gen_range(0.8..3.0),
                    rng.gen_range(0.8..3.0),
                ];
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = rng.gen_range(0.5..1.0);
                (f, phase, amp)
            })
            .collect();
        Texture { waves }
    }

    fn eval(&self, dims: [usize; 3], x: usize, y: usize, z: usize) -> f64 {
        let p = [
            x as f64 / dims[0] as f64,
            y as f64 / dims[1] as f64,
            z as f64 / dims[2] as f64,
        ];
        let mut acc = 0.0;
        let mut norm = 0.0;
        for (f, phase, amp) in &self.waves {
            let arg =
                std::f64::consts::TAU * (f[0] * p[0] + f[1] * p[1] + f[2] * p[2]) + phase;
            acc += amp * arg.cos();
            norm += amp;
        }
        acc / norm
    }
}

/// Greedy selection of well-separated extrema of `|score|` among candidate
/// voxels.
fn pick_extrema(
    candidates: &mut Vec<([usize; 3], f64)>,
    count: usize,
    min_sep: f64,
) -> Vec<[usize; 3]> {
    candidates.sort_by(|a, b| b.1.abs().partial_cmp(&a.1.abs()).unwrap());
    let mut picked: Vec<[usize; 3]> = Vec::new();
    for (p, _) in candidates.iter() {
        if picked.len() >= count {
            break;
        }
        let far_enough = picked.iter().all(|q| {
            let d2: f64 = (0..3).map(|a| (p[a] as f64 - q[a] as f64).powi(2)).sum();
            d2.sqrt() >= min_sep
        });
        if far_enough {
            picked.push(*p);
        }
    }
    picked
}

/// Smooth ellipsoidal organ with band-limited texture, a binary organ mask,
/// and 8 landmarks at texture extrema inside the mask. Deterministic per
/// seed; requires dims ≥ 16 per axis.
pub fn make_phantom(dims: [usize; 3], seed: u64) -> Result<(Volume, MaskVolume, LandmarkSet)> {
    if dims.iter().any(|&d| d < 16) {
        return Err(Error::InvalidArg(format!(
            "phantom dims must be ≥ 16 per axis, got {dims:?}"
        )));
    }
    let mut rng = crate::rng::stream(seed, "synth.phantom", 0);
    let texture = Texture::random(&mut rng);
    // Semi-axes in [0.30, 0.38] of the half-extent keep the organ volume
    // fraction within [0.1, 0.5] of the field of view.
    let axes = [
        rng.gen_range(0.30..0.38) * dims[0] as f64,
        rng.gen_range(0.30..0.38) * dims[1] as f64,
        rng.gen_range(0.30..0.38) * dims[2] as f64,
    ];
    let center = [
        (dims[0] - 1) as f64 / 2.0 + rng.gen_range(-1.5..1.5),
        (dims[1] - 1) as f64 / 2.0 + rng.gen_range(-1.5..1.5),
        (dims[2] - 1) as f64 / 2.0 + rng.gen_range(-1.5..1.5),
    ];
    let [w, h, d] = dims;
    let n = w * h * d;
    let mut vol = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    let mut inner: Vec<([usize; 3], f64)> = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let rho = (((x as f64 - center[0]) / axes[0]).powi(2)
                    + ((y as f64 - center[1]) / axes[1]).powi(2)
                    + ((z as f64 - center[2]) / axes[2]).powi(2))
                .sqrt();
                let edge = 1.0 / (1.0 + (8.0 * (rho - 1.0)).exp());
                let t = texture.eval(dims, x, y, z);
                let v = 0.2 + 0.25 * (t + 1.0) / 2.0 + 0.35 * edge;
                vol.push(v.clamp(0.0, 1.0) as f32);
                mask.push(if rho <= 1.0 { 1.0f32 } else { 0.0 });
                if rho <= 0.8 {
                    inner.push(([x, y, z], t));
                }
            }
        }
    }
    let min_sep = (w.min(h).min(d) as f64) / 6.0;
    let points = pick_extrema(&mut inner, 8, min_sep);
    if points.len() < 8 {
        return Err(Error::InvalidArg(
            "phantom interior too small for 8 landmarks".into(),
        ));
    }
    let ids = (0..8).map(|i| format!("L{i}")).collect();
    let pts = points
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    Ok((
        Volume::new(dims, [1.0; 3], vol)?,
        MaskVolume::new(dims, [1.0; 3], mask)?,
        LandmarkSet::new(ids, pts)?,
    ))
}

/// Random gridded field: i.i.d. uniform control displacements in
/// `[-max_disp, max_disp]³` followed by one neighbor-averaging smoothing
/// pass. `max_disp` may not exceed a third of the control spacing (folding
/// risk); the resulting dense field is verified fold-free at generation.
pub fn make_gt_field(
    grid_dims: [usize; 3],
    image_dims: [usize; 3],
    max_disp: f64,
    seed: u64,
) -> Result<GriddedField> {
    if max_disp < 0.0 {
        return Err(Error::InvalidArg("max_disp must be ≥ 0".into()));
    }
    let grid = ControlGrid::new(image_dims, grid_dims)?;
    let min_spacing = (0..3).map(|a| grid.cell_width(a)).fold(f64::INFINITY, f64::min);
    if max_disp > min_spacing / 3.0 {
        return Err(Error::InvalidArg(format!(
            "max_disp {max_disp} exceeds a third of the control spacing ({:.3}); smaller \
             displacements or a coarser grid are required to stay fold-free",
            min_spacing / 3.0
        )));
    }
    let mut rng = crate::rng::stream(seed, "synth.gtfield", 0);
    let [gx, gy, gz] = grid_dims;
    let g = gx * gy * gz;
    let mut raw = GridVec3::zeros(grid_dims);
    for c in 0..3 {
        for i in 0..g {
            raw.comps[c][i] = rng.gen_range(-max_disp..=max_disp);
        }
    }
    // One smoothing pass: average each point with its lattice neighbors.
    let mut mu = GridVec3::zeros(grid_dims);
    for c in 0..3 {
        for k in 0..gz {
            for j in 0..gy {
                for i in 0..gx {
                    let mut acc = raw.comps[c][raw.index(i, j, k)];
                    let mut cnt = 1.0;
                    let neighbors: [(isize, isize, isize); 6] = [
                        (-1, 0, 0),
                        (1, 0, 0),
                        (0, -1, 0),
                        (0, 1, 0),
                        (0, 0, -1),
                        (0, 0, 1),
                    ];
                    for (dx, dy, dz) in neighbors {
                        let (ni, nj, nk) = (i as isize + dx, j as isize + dy, k as isize + dz);
                        if ni >= 0
                            && nj >= 0
                            && nk >= 0
                            && (ni as usize) < gx
                            && (nj as usize) < gy
                            && (nk as usize) < gz
                        {
                            acc += raw.comps[c][raw.index(ni as usize, nj as usize, nk as usize)];
                            cnt += 1.0;
                        }
                    }
                    let dst = mu.index(i, j, k);
                    mu.comps[c][dst] = acc / cnt;
                }
            }
        }
    }
    let field = GriddedField::new(grid, mu, None)?;
    let dense = upsample(&field, &InterpKernel::Trilinear)?;
    let report = jacobian_stats(&dense)?;
    if report.folding_pct > 0.0 {
        return Err(Error::InvalidArg(format!(
            "generated field folds ({}%) despite the spacing guard",
            report.folding_pct
        )));
    }
    Ok(field)
}

/// Flip the given fraction of mask boundary voxels (6-neighborhood
/// boundary), deterministically per rng stream.
fn flip_boundary(mask: &MaskVolume, rate: f64, rng: &mut impl Rng) -> MaskVolume {
    let [w, h, d] = mask.dims();
    let mut boundary = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = mask.get(x, y, z) >= 0.5;
                let mut is_boundary = false;
                let neighbors: [(isize, isize, isize); 6] = [
                    (-1, 0, 0),
                    (1, 0, 0),
                    (0, -1, 0),
                    (0, 1, 0),
                    (0, 0, -1),
                    (0, 0, 1),
                ];
                for (dx, dy, dz) in neighbors {
                    let (nx, ny, nz) = (x as isize + dx, y as isize + dy, z as isize + dz);
                    if nx < 0 || ny < 0 || nz < 0 {
                        continue;
                    }
                    let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                    if nx >= w || ny >= h || nz >= d {
                        continue;
                    }
                    if (mask.get(nx, ny, nz) >= 0.5) != v {
                        is_boundary = true;
                        break;
                    }
                }
                if is_boundary {
                    boundary.push(mask.index(x, y, z));
                }
            }
        }
    }
    let mut data = mask.data().to_vec();
    for idx in boundary {
        if rng.gen_bool(rate) {
            data[idx] = 1.0 - data[idx];
        }
    }
    MaskVolume::new(mask.dims(), mask.spacing(), data).expect("flipped mask stays binary")
}

fn add_noise(v: &Volume, sigma: f64, rng: &mut impl Rng) -> Volume {
    if sigma == 0.0 {
        return v.clone();
    }
    let data = v
        .data()
        .iter()
        .map(|&x| {
            let n: f64 = StandardNormal.sample(rng);
            (f64::from(x) + sigma * n) as f32
        })
        .collect();
    Volume::new(v.dims(), v.spacing(), data).expect("noisy volume stays finite")
}

/// Build a registration pair from a phantom and a ground-truth field.
///
/// The phantom is the moving image; the fixed image is its pull-back under
/// the field, so registering moving onto fixed should recover the field
/// exactly (up to noise). Fixed-space landmarks are texture extrema of the
/// clean fixed image; their moving-space partners are transferred exactly
/// through the field.
pub fn make_pair(
    phantom: &(Volume, MaskVolume, LandmarkSet),
    gt_field: &GriddedField,
    intensity_noise: f64,
    label_noise: f64,
    seed: u64,
) -> Result<SynthPair> {
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(Error::InvalidArg(format!(
            "label noise rate must lie in [0,1], got {label_noise}"
        )));
    }
    if intensity_noise < 0.0 {
        return Err(Error::InvalidArg("intensity noise must be ≥ 0".into()));
    }
    let (moving, moving_mask, _) = phantom;
    let dims = moving.dims();
    if gt_field.grid.image_dims() != dims {
        return Err(Error::DimsMismatch {
            what: "make_pair".into(),
            lhs: gt_field.grid.image_dims(),
            rhs: dims,
        });
    }
    let gt_dense = upsample(gt_field, &InterpKernel::Trilinear)?;
    let fixed_clean = warp_volume(moving, &gt_dense, BoundaryPolicy::Clamp)?;
    let fixed_mask_clean = warp_mask(moving_mask, &gt_dense, BoundaryPolicy::Clamp)?.binarized();

    // Landmarks on the fixed image: texture extrema inside the (eroded)
    // fixed mask whose transferred positions stay in bounds.
    let [w, h, d] = dims;
    let fixed_f64 = fixed_clean.to_f64();
    let mean: f64 = fixed_f64.iter().sum::<f64>() / fixed_f64.len() as f64;
    let mut candidates: Vec<([usize; 3], f64)> = Vec::new();
    let margin = 1.0;
    for z in 2..d - 2 {
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                if fixed_mask_clean.get(x, y, z) < 0.5 {
                    continue;
                }
                let p = [x as f64, y as f64, z as f64];
                let u = gt_dense.sample(p);
                let q = [p[0] + u[0], p[1] + u[1], p[2] + u[2]];
                let ok = (0..3).all(|a| q[a] >= margin && q[a] <= (dims[a] - 1) as f64 - margin);
                if !ok {
                    continue;
                }
                let i = x + w * (y + h * z);
                candidates.push(([x, y, z], fixed_f64[i] - mean));
            }
        }
    }
    let min_sep = (w.min(h).min(d) as f64) / 6.0;
    let picked = pick_extrema(&mut candidates, 8, min_sep);
    if picked.len() < 8 {
        return Err(Error::InvalidArg(
            "too few in-bounds landmark candidates on the fixed image".into(),
        ));
    }
    let ids: Vec<String> = (0..picked.len()).map(|i| format!("L{i}")).collect();
    let fixed_points: Vec<[f64; 3]> = picked
        .iter()
        .map(|p| [p[0] as f64, p[1] as f64, p[2] as f64])
        .collect();
    let moving_points: Vec<[f64; 3]> = fixed_points
        .iter()
        .map(|p| {
            let u = gt_dense.sample(*p);
            [p[0] + u[0], p[1] + u[1], p[2] + u[2]]
        })
        .collect();
    let fixed_landmarks = LandmarkSet::new(ids.clone(), fixed_points)?;
    let moving_landmarks = LandmarkSet::new(ids, moving_points)?;

    let mut noise_rng = crate::rng::stream(seed, "synth.pairnoise", 0);
    let fixed = add_noise(&fixed_clean, intensity_noise, &mut noise_rng);
    let moving_noisy = add_noise(moving, intensity_noise, &mut noise_rng);
    let (fixed_mask, moving_mask_noisy) = if label_noise > 0.0 {
        (
            flip_boundary(&fixed_mask_clean, label_noise, &mut noise_rng),
            flip_boundary(moving_mask, label_noise, &mut noise_rng),
        )
    } else {
        (fixed_mask_clean, moving_mask.clone())
    };

    Ok(SynthPair {
        fixed,
        fixed_mask,
        fixed_landmarks,
        moving: moving_noisy,
        moving_mask: moving_mask_noisy,
        moving_landmarks,
        gt_field: gt_field.clone(),
        gt_dense,
        seed,
        intensity_noise,
        label_noise,
    })
}

/// Generate a suite of pairs with per-pair derived seeds: a fresh phantom
/// and a fresh ground-truth field per pair.
pub fn make_suite(cfg: &SynthConfig, count: usize, seed: u64) -> Result<Vec<SynthPair>> {
    (0..count)
        .map(|i| {
            let pair_seed = seed.wrapping_add(i as u64);
            let phantom = make_phantom(cfg.dims, pair_seed)?;
            let gt = make_gt_field(cfg.grid_dims, cfg.dims, cfg.max_disp, pair_seed)?;
            make_pair(
                &phantom,
                &gt,
                cfg.intensity_noise,
                cfg.label_noise,
                pair_seed,
            )
        })
        .collect()
}

/// Longitudinal suite: one anatomy (phantom) deformed by a fresh
/// ground-truth field per pair, mirroring intra-subject registration where
/// the same anatomy is observed under different deformations.
pub fn make_longitudinal_suite(
    cfg: &SynthConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<SynthPair>> {
    let phantom = make_phantom(cfg.dims, seed)?;
    (0..count)
        .map(|i| {
            let pair_seed = seed.wrapping_add(1 + i as u64);
            let gt = make_gt_field(cfg.grid_dims, cfg.dims, cfg.max_disp, pair_seed)?;
            make_pair(
                &phantom,
                &gt,
                cfg.intensity_noise,
                cfg.label_noise,
                pair_seed,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::mse_sim;

    #[test]
    fn phantom_is_deterministic() {
        let a = make_phantom([24, 24, 24], 7).unwrap();
        let b = make_phantom([24, 24, 24], 7).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
        let c = make_phantom([24, 24, 24], 8).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn phantom_mask_fraction_in_range() {
        for seed in 0..20 {
            let (_, mask, _) = make_phantom([24, 24, 24], seed).unwrap();
            let frac =
                mask.data().iter().map(|&v| f64::from(v)).sum::<f64>() / mask.data().len() as f64;
            assert!(
                (0.1..=0.5).contains(&frac),
                "seed {seed}: fraction {frac}"
            );
        }
    }

    #[test]
    fn phantom_landmarks_inside_mask() {
        for seed in [1, 5, 9] {
            let (_, mask, landmarks) = make_phantom([24, 24, 24], seed).unwrap();
            assert_eq!(landmarks.len(), 8);
            for p in landmarks.points() {
                assert_eq!(mask.get(p[0] as usize, p[1] as usize, p[2] as usize), 1.0);
            }
        }
    }

    #[test]
    fn phantom_rejects_small_dims() {
        assert!(make_phantom([15, 24, 24], 0).is_err());
    }

    #[test]
    fn gt_field_basics() {
        let zero = make_gt_field([5, 5, 5], [32, 32, 32], 0.0, 3).unwrap();
        assert!(zero.mu.comps.iter().flatten().all(|&v| v == 0.0));

        let f1 = make_gt_field([5, 5, 5], [32, 32, 32], 2.0, 4).unwrap();
        let f2 = make_gt_field([5, 5, 5], [32, 32, 32], 2.0, 4).unwrap();
        assert_eq!(f1, f2);
        let dense = upsample(&f1, &InterpKernel::Trilinear).unwrap();
        let report = jacobian_stats(&dense).unwrap();
        assert_eq!(report.folding_pct, 0.0);

        // Spacing for 5^3 on 32^3 is 31/4; a third of that is ~2.58.
        assert!(make_gt_field([5, 5, 5], [32, 32, 32], 2.6, 5).is_err());
    }

    #[test]
    fn pair_is_exactly_representable_without_noise() {
        let phantom = make_phantom([24, 24, 24], 11).unwrap();
        let gt = make_gt_field([5, 5, 5], [24, 24, 24], 1.5, 11).unwrap();
        let pair = make_pair(&phantom, &gt, 0.0, 0.0, 11).unwrap();
        // Warping the moving image by the GT field reproduces the fixed image.
        let warped = warp_volume(&pair.moving, &pair.gt_dense, BoundaryPolicy::Clamp).unwrap();
        let mse = mse_sim(&warped, &pair.fixed).unwrap();
        assert!(mse < 1e-12, "{mse}");
    }

    #[test]
    fn identity_tre_equals_mean_gt_displacement_at_landmarks() {
        let phantom = make_phantom([24, 24, 24], 13).unwrap();
        let gt = make_gt_field([5, 5, 5], [24, 24, 24], 1.5, 13).unwrap();
        let pair = make_pair(&phantom, &gt, 0.0, 0.0, 13).unwrap();
        let d = crate::metrics::centroid_distance_landmarks(
            &pair.fixed_landmarks,
            &pair.moving_landmarks,
            [1.0; 3],
        )
        .unwrap();
        let want: f64 = pair
            .fixed_landmarks
            .points()
            .iter()
            .map(|p| {
                let u = pair.gt_dense.sample(*p);
                (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()
            })
            .sum::<f64>()
            / pair.fixed_landmarks.len() as f64;
        assert!((d - want).abs() < 1e-9);
    }

    #[test]
    fn pair_regeneration_is_identical() {
        let cfg = SynthConfig::default();
        let a = make_suite(&cfg, 2, 99).unwrap();
        let b = make_suite(&cfg, 2, 99).unwrap();
        assert_eq!(a[0].fixed, b[0].fixed);
        assert_eq!(a[1].moving_mask, b[1].moving_mask);
        assert_eq!(a[0].gt_field, b[0].gt_field);
    }

    #[test]
    fn label_noise_flips_only_boundary_voxels() {
        let phantom = make_phantom([24, 24, 24], 17).unwrap();
        let gt = make_gt_field([5, 5, 5], [24, 24, 24], 1.0, 17).unwrap();
        let clean = make_pair(&phantom, &gt, 0.0, 0.0, 17).unwrap();
        let noisy = make_pair(&phantom, &gt, 0.0, 0.3, 17).unwrap();
        let a = clean.moving_mask.data();
        let b = noisy.moving_mask.data();
        let flipped: usize = a.iter().zip(b).filter(|(x, y)| x != y).count();
        assert!(flipped > 0);
        // All flips are restricted to the boundary shell; interior deep
        // voxels are untouched. Spot-check the mask centroid region.
        let c = crate::metrics::mask_centroid(&clean.moving_mask).unwrap();
        let (cx, cy, cz) = (c[0] as usize, c[1] as usize, c[2] as usize);
        assert_eq!(
            clean.moving_mask.get(cx, cy, cz),
            noisy.moving_mask.get(cx, cy, cz)
        );
        assert!(make_pair(&phantom, &gt, 0.0, 1.5, 17).is_err());
    }
}
