//! Spatial transformation of volumes and masks by a dense displacement
//! field, using pull-back sampling: `output(x) = input(x + u(x))` with
//! trilinear interpolation of the input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridfield::DenseField;
use crate::volume::{MaskVolume, Volume};

/// What a sample outside the input domain evaluates to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryPolicy {
    /// Clamp sample coordinates to `[0, dim-1]`.
    Clamp,
    /// Zero padding outside the domain.
    Zero,
}

impl Default for BoundaryPolicy {
    fn default() -> Self {
        BoundaryPolicy::Clamp
    }
}

/// Trilinear sample of `data` (dims `[W,H,D]`, x-fastest) at a continuous
/// coordinate, returning the value and its gradient with respect to the
/// coordinate. Under `Clamp` the gradient is zero along axes where the raw
/// coordinate fell outside the domain.
pub fn sample_trilinear(
    data: &[f64],
    dims: [usize; 3],
    p: [f64; 3],
    policy: BoundaryPolicy,
) -> (f64, [f64; 3]) {
    let [w, h, d] = dims;
    match policy {
        BoundaryPolicy::Clamp => {
            let mut clamped = [false; 3];
            let mut q = [0.0f64; 3];
            for a in 0..3 {
                let hi = (dims[a] - 1) as f64;
                q[a] = p[a];
                if q[a] < 0.0 {
                    q[a] = 0.0;
                    clamped[a] = true;
                } else if q[a] > hi {
                    q[a] = hi;
                    clamped[a] = true;
                }
            }
            let x0 = (q[0].floor() as usize).min(w.saturating_sub(2));
            let y0 = (q[1].floor() as usize).min(h.saturating_sub(2));
            let z0 = (q[2].floor() as usize).min(d.saturating_sub(2));
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let z1 = (z0 + 1).min(d - 1);
            let (fx, fy, fz) = (q[0] - x0 as f64, q[1] - y0 as f64, q[2] - z0 as f64);
            let idx = |x: usize, y: usize, z: usize| data[x + w * (y + h * z)];
            let v000 = idx(x0, y0, z0);
            let v100 = idx(x1, y0, z0);
            let v010 = idx(x0, y1, z0);
            let v110 = idx(x1, y1, z0);
            let v001 = idx(x0, y0, z1);
            let v101 = idx(x1, y0, z1);
            let v011 = idx(x0, y1, z1);
            let v111 = idx(x1, y1, z1);
            let c00 = v000 * (1.0 - fx) + v100 * fx;
            let c10 = v010 * (1.0 - fx) + v110 * fx;
            let c01 = v001 * (1.0 - fx) + v101 * fx;
            let c11 = v011 * (1.0 - fx) + v111 * fx;
            let c0 = c00 * (1.0 - fy) + c10 * fy;
            let c1 = c01 * (1.0 - fy) + c11 * fy;
            let value = c0 * (1.0 - fz) + c1 * fz;

            let gx = ((v100 - v000) * (1.0 - fy) + (v110 - v010) * fy) * (1.0 - fz)
                + ((v101 - v001) * (1.0 - fy) + (v111 - v011) * fy) * fz;
            let gy = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz;
            let gz = c1 - c0;
            let grad = [
                if clamped[0] { 0.0 } else { gx },
                if clamped[1] { 0.0 } else { gy },
                if clamped[2] { 0.0 } else { gz },
            ];
            (value, grad)
        }
        BoundaryPolicy::Zero => {
            let x0 = p[0].floor();
            let y0 = p[1].floor();
            let z0 = p[2].floor();
            let (fx, fy, fz) = (p[0] - x0, p[1] - y0, p[2] - z0);
            let fetch = |xi: f64, yi: f64, zi: f64| -> f64 {
                if xi < 0.0 || yi < 0.0 || zi < 0.0 {
                    return 0.0;
                }
                let (x, y, z) = (xi as usize, yi as usize, zi as usize);
                if x >= w || y >= h || z >= d {
                    return 0.0;
                }
                data[x + w * (y + h * z)]
            };
            let v000 = fetch(x0, y0, z0);
            let v100 = fetch(x0 + 1.0, y0, z0);
            let v010 = fetch(x0, y0 + 1.0, z0);
            let v110 = fetch(x0 + 1.0, y0 + 1.0, z0);
            let v001 = fetch(x0, y0, z0 + 1.0);
            let v101 = fetch(x0 + 1.0, y0, z0 + 1.0);
            let v011 = fetch(x0, y0 + 1.0, z0 + 1.0);
            let v111 = fetch(x0 + 1.0, y0 + 1.0, z0 + 1.0);
            let c00 = v000 * (1.0 - fx) + v100 * fx;
            let c10 = v010 * (1.0 - fx) + v110 * fx;
            let c01 = v001 * (1.0 - fx) + v101 * fx;
            let c11 = v011 * (1.0 - fx) + v111 * fx;
            let c0 = c00 * (1.0 - fy) + c10 * fy;
            let c1 = c01 * (1.0 - fy) + c11 * fy;
            let value = c0 * (1.0 - fz) + c1 * fz;
            let gx = ((v100 - v000) * (1.0 - fy) + (v110 - v010) * fy) * (1.0 - fz)
                + ((v101 - v001) * (1.0 - fy) + (v111 - v011) * fy) * fz;
            let gy = (c10 - c00) * (1.0 - fz) + (c11 - c01) * fz;
            let gz = c1 - c0;
            (value, [gx, gy, gz])
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

/// Warp f64 data, returning per-voxel values and the sampling gradient
/// `d output / d u_c` for each displacement component.
pub fn warp_with_grad(
    data: &[f64],
    dims: [usize; 3],
    field: &DenseField,
    policy: BoundaryPolicy,
) -> (Vec<f64>, [Vec<f64>; 3]) {
    let [w, h, d] = dims;
    let n = w * h * d;
    let mut out = vec![0.0; n];
    let mut grads = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = x + w * (y + h * z);
                let p = [
                    x as f64 + field.comps[0][i],
                    y as f64 + field.comps[1][i],
                    z as f64 + field.comps[2][i],
                ];
                let (v, g) = sample_trilinear(data, dims, p, policy);
                out[i] = v;
                grads[0][i] = g[0];
                grads[1][i] = g[1];
                grads[2][i] = g[2];
            }
        }
    }
    (out, grads)
}

/// Warp f64 data without gradients.
pub fn warp_values(
    data: &[f64],
    dims: [usize; 3],
    field: &DenseField,
    policy: BoundaryPolicy,
) -> Vec<f64> {
    let [w, h, d] = dims;
    let n = w * h * d;
    let mut out = vec![0.0; n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = x + w * (y + h * z);
                let p = [
                    x as f64 + field.comps[0][i],
                    y as f64 + field.comps[1][i],
                    z as f64 + field.comps[2][i],
                ];
                out[i] = sample_trilinear(data, dims, p, policy).0;
            }
        }
    }
    out
}

/// Warp a volume by the field: `output(x) = moving(x + u(x))`.
pub fn warp_volume(m: &Volume, field: &DenseField, policy: BoundaryPolicy) -> Result<Volume> {
    check_dims("warp_volume", m.dims(), field.dims)?;
    let data = warp_values(&m.to_f64(), m.dims(), field, policy);
    Volume::new(m.dims(), m.spacing(), data.iter().map(|&v| v as f32).collect())
}

/// Warp a mask; values stay in [0,1] by trilinear convexity (clamped under
/// zero padding too) and are NOT re-binarized.
pub fn warp_mask(s: &MaskVolume, field: &DenseField, policy: BoundaryPolicy) -> Result<MaskVolume> {
    check_dims("warp_mask", s.dims(), field.dims)?;
    let data = warp_values(&s.to_f64(), s.dims(), field, policy);
    MaskVolume::new(
        s.dims(),
        s.spacing(),
        data.iter().map(|&v| (v as f32).clamp(0.0, 1.0)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn ramp_volume(dims: [usize; 3]) -> Volume {
        let [w, h, d] = dims;
        let mut data = Vec::with_capacity(w * h * d);
        for _z in 0..d {
            for _y in 0..h {
                for x in 0..w {
                    data.push(x as f32);
                }
            }
        }
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = crate::rng::stream(seed, "warp.test", 0);
        let n = dims[0] * dims[1] * dims[2];
        let data = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    fn constant_field(dims: [usize; 3], v: [f64; 3]) -> DenseField {
        let mut f = DenseField::zeros(dims);
        for c in 0..3 {
            f.comps[c].iter_mut().for_each(|x| *x = v[c]);
        }
        f
    }

    #[test]
    fn zero_field_is_identity_bit_exact() {
        let v = random_volume([6, 5, 4], 1);
        let f = DenseField::zeros([6, 5, 4]);
        for policy in [BoundaryPolicy::Clamp, BoundaryPolicy::Zero] {
            let w = warp_volume(&v, &f, policy).unwrap();
            assert_eq!(v.data(), w.data());
        }
    }

    #[test]
    fn unit_shift_with_clamp_matches_index_oracle() {
        let v = random_volume([7, 5, 6], 2);
        let f = constant_field([7, 5, 6], [1.0, 0.0, 0.0]);
        let w = warp_volume(&v, &f, BoundaryPolicy::Clamp).unwrap();
        for z in 0..6 {
            for y in 0..5 {
                for x in 0..7 {
                    let want = v.get((x + 1).min(6), y, z);
                    assert_eq!(w.get(x, y, z), want);
                }
            }
        }
    }

    #[test]
    fn half_voxel_shift_on_ramp() {
        let v = ramp_volume([8, 4, 4]);
        let f = constant_field([8, 4, 4], [0.5, 0.0, 0.0]);
        let w = warp_volume(&v, &f, BoundaryPolicy::Clamp).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..7 {
                    // interior of the ramp: f(x) = x, so output = x + 0.5
                    assert!((f64::from(w.get(x, y, z)) - (x as f64 + 0.5)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_policy_pads_with_zero() {
        let v = Volume::filled([4, 4, 4], [1.0; 3], 1.0).unwrap();
        let f = constant_field([4, 4, 4], [10.0, 0.0, 0.0]);
        let w = warp_volume(&v, &f, BoundaryPolicy::Zero).unwrap();
        assert!(w.data().iter().all(|&x| x == 0.0));
        // Clamp keeps the constant.
        let w = warp_volume(&v, &f, BoundaryPolicy::Clamp).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn all_ones_mask_stays_ones_under_clamp() {
        let m = MaskVolume::new([5, 5, 5], [1.0; 3], vec![1.0; 125]).unwrap();
        let mut rng = crate::rng::stream(4, "warp.mask", 0);
        let mut f = DenseField::zeros([5, 5, 5]);
        for c in 0..3 {
            f.comps[c].iter_mut().for_each(|x| *x = rng.gen_range(-3.0..3.0));
        }
        let w = warp_mask(&m, &f, BoundaryPolicy::Clamp).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn integer_shift_moves_binary_cube_exactly() {
        let mut data = vec![0.0f32; 8 * 8 * 8];
        for z in 2..5 {
            for y in 2..5 {
                for x in 2..5 {
                    data[x + 8 * (y + 8 * z)] = 1.0;
                }
            }
        }
        let m = MaskVolume::new([8, 8, 8], [1.0; 3], data).unwrap();
        let f = constant_field([8, 8, 8], [2.0, 0.0, 0.0]);
        let w = warp_mask(&m, &f, BoundaryPolicy::Zero).unwrap();
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    // Pull-back by +2 moves the cube towards the origin.
                    let want = if (2..5).contains(&(x + 2)) && (2..5).contains(&y) && (2..5).contains(&z)
                    {
                        1.0
                    } else {
                        0.0
                    };
                    assert_eq!(w.get(x, y, z), want, "at ({x},{y},{z})");
                }
            }
        }
    }

    #[test]
    fn range_preservation_under_clamp() {
        let v = random_volume([6, 6, 6], 7);
        let lo = v.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = v.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut rng = crate::rng::stream(8, "warp.range", 0);
        let mut f = DenseField::zeros([6, 6, 6]);
        for c in 0..3 {
            f.comps[c].iter_mut().for_each(|x| *x = rng.gen_range(-4.0..4.0));
        }
        let w = warp_volume(&v, &f, BoundaryPolicy::Clamp).unwrap();
        for &x in w.data() {
            assert!(x >= lo - 1e-6 && x <= hi + 1e-6);
        }
    }

    #[test]
    fn sampling_gradient_matches_finite_differences() {
        let v = random_volume([8, 8, 8], 9);
        let data = v.to_f64();
        let mut rng = crate::rng::stream(10, "warp.grad", 0);
        let eps = 1e-5;
        let mut checked = 0;
        while checked < 30 {
            // Stay away from clamp boundaries and integer crossings.
            let p = [
                rng.gen_range(1.0..6.0),
                rng.gen_range(1.0..6.0),
                rng.gen_range(1.0..6.0),
            ];
            if p.iter().any(|&c: &f64| (c - c.round()).abs() < 1e-3) {
                continue;
            }
            let (_, g) = sample_trilinear(&data, [8, 8, 8], p, BoundaryPolicy::Clamp);
            for a in 0..3 {
                let mut hi = p;
                hi[a] += eps;
                let mut lo = p;
                lo[a] -= eps;
                let fd = (sample_trilinear(&data, [8, 8, 8], hi, BoundaryPolicy::Clamp).0
                    - sample_trilinear(&data, [8, 8, 8], lo, BoundaryPolicy::Clamp).0)
                    / (2.0 * eps);
                let denom = g[a].abs().max(fd.abs()).max(1e-8);
                assert!(
                    ((g[a] - fd) / denom).abs() <= 1e-4,
                    "axis {a} at {p:?}: analytic {} vs fd {fd}",
                    g[a]
                );
            }
            checked += 1;
        }
    }

    #[test]
    fn dims_mismatch_is_an_error() {
        let v = random_volume([4, 4, 4], 11);
        let f = DenseField::zeros([5, 4, 4]);
        assert!(matches!(
            warp_volume(&v, &f, BoundaryPolicy::Clamp),
            Err(Error::DimsMismatch { .. })
        ));
    }
}
