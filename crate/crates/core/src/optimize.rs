//! Pairwise iterative registration: Adam on the control-point parameters,
//! driven by the analytic loss gradients.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridfield::{ControlGrid, DenseField, GridVec3, GriddedField, InterpKernel, Upsampler};
use crate::losses::{bending_energy, grad_total_wrt_grid, LossWeights, RegProblem};
use crate::metrics::{
    centroid_distance_masks, dice_score, jacobian_stats, MetricReport,
};
use crate::synth::SynthPair;
use crate::volume::{MaskVolume, Volume};
use crate::warp::{warp_mask, BoundaryPolicy};

/// Adam optimizer over a flat parameter vector. One implementation serves
/// both pairwise registration and network training.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    m: Vec<F>,
    v: Vec<F>,
    t: i32,
}

impl<F: num_traits::Float> Adam<F> {
    pub fn new(len: usize, lr: F) -> Self {
        Adam {
            lr,
            beta1: F::from(0.9).unwrap(),
            beta2: F::from(0.999).unwrap(),
            eps: F::from(1e-8).unwrap(),
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            t: 0,
        }
    }

    pub fn with_betas(mut self, beta1: F, beta2: F, eps: F) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps = eps;
        self
    }

    /// One update step: `p -= lr * m̂ / (sqrt(v̂) + eps)` with bias-corrected
    /// moment estimates.
    pub fn step(&mut self, params: &mut [F], grads: &[F]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] = params[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Configuration of one pairwise registration run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub grid_dims: [usize; 3],
    pub kernel: InterpKernel,
    pub bayesian: bool,
    pub weights: LossWeights,
    /// Step size on displacements, in voxels. The network trainer uses a
    /// much smaller rate on weights; this default targets direct
    /// displacement optimization.
    pub lr: f64,
    pub max_iters: usize,
    /// Stop when the relative loss decrease over 10 iterations falls below
    /// this.
    pub tol: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            grid_dims: [5, 5, 5],
            kernel: InterpKernel::Trilinear,
            bayesian: false,
            weights: LossWeights::default(),
            lr: 0.5,
            max_iters: 300,
            tol: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArg(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.max_iters < 1 {
            return Err(Error::InvalidArg("max_iters must be ≥ 1".into()));
        }
        if self.tol < 0.0 {
            return Err(Error::InvalidArg("tol must be ≥ 0".into()));
        }
        self.weights.validate()
    }
}

/// Outcome of a pairwise registration.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub field: GriddedField,
    pub dense: DenseField,
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    pub report: MetricReport,
}

fn flatten(field: &GriddedField) -> Vec<f64> {
    let mut out = Vec::new();
    for c in 0..3 {
        out.extend_from_slice(&field.mu.comps[c]);
    }
    if let Some(eta) = &field.eta {
        for c in 0..3 {
            out.extend_from_slice(&eta.comps[c]);
        }
    }
    out
}

fn unflatten(params: &[f64], grid_dims: [usize; 3], bayesian: bool) -> (GridVec3, Option<GridVec3>) {
    let g: usize = grid_dims.iter().product();
    let take = |offset: usize| GridVec3 {
        dims: grid_dims,
        comps: [
            params[offset..offset + g].to_vec(),
            params[offset + g..offset + 2 * g].to_vec(),
            params[offset + 2 * g..offset + 3 * g].to_vec(),
        ],
    };
    let mu = take(0);
    let eta = bayesian.then(|| take(3 * g));
    (mu, eta)
}

fn flatten_grad(grad_mu: &GridVec3, grad_eta: Option<&GridVec3>) -> Vec<f64> {
    let mut out = Vec::new();
    for c in 0..3 {
        out.extend_from_slice(&grad_mu.comps[c]);
    }
    if let Some(eta) = grad_eta {
        for c in 0..3 {
            out.extend_from_slice(&eta.comps[c]);
        }
    }
    out
}

fn first_nonfinite_term(b: &crate::losses::LossBreakdown) -> Option<&'static str> {
    if !b.similarity.is_finite() {
        Some("similarity")
    } else if !b.dice.is_finite() {
        Some("dice")
    } else if !b.bending.is_finite() {
        Some("bending")
    } else if !b.total.is_finite() {
        Some("total")
    } else {
        None
    }
}

fn standard_normal_grid(dims: [usize; 3], rng: &mut impl rand::Rng) -> GridVec3 {
    let n: usize = dims.iter().product();
    GridVec3 {
        dims,
        comps: [
            (0..n).map(|_| StandardNormal.sample(rng)).collect(),
            (0..n).map(|_| StandardNormal.sample(rng)).collect(),
            (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        ],
    }
}

/// Register `moving` onto `fixed` by gradient descent on the control grid.
///
/// The field starts at the identity (and, in Bayesian mode, at
/// `σ² = softplus(0)`). Monte-Carlo noise is redrawn every iteration from a
/// per-iteration stream, so runs are reproducible given the seed.
pub fn register_pair(
    fixed: &Volume,
    moving: &Volume,
    masks: Option<(&MaskVolume, &MaskVolume)>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    if fixed.dims() != moving.dims() {
        return Err(Error::DimsMismatch {
            what: "register_pair".into(),
            lhs: fixed.dims(),
            rhs: moving.dims(),
        });
    }
    let grid = ControlGrid::new(fixed.dims(), cfg.grid_dims)?;
    let mut prob = RegProblem::new(fixed, moving);
    if let Some((fm, mm)) = masks {
        prob = prob.with_masks(fm, mm);
    }
    let field0 = GriddedField::identity(grid.clone(), cfg.bayesian);
    let mut params = flatten(&field0);
    let mut adam =
        Adam::new(params.len(), cfg.lr).with_betas(cfg.beta1, cfg.beta2, cfg.eps);
    let mut trace = Vec::with_capacity(cfg.max_iters);
    // Adam can overshoot early (its first steps move every parameter by
    // ±lr), so the accepted result is the best evaluated iterate.
    let mut best_params = params.clone();
    let mut best_loss = f64::INFINITY;

    for iter in 0..cfg.max_iters {
        let (mu, eta) = unflatten(&params, cfg.grid_dims, cfg.bayesian);
        let field = GriddedField::new(grid.clone(), mu, eta)?;
        let noise: Option<Vec<GridVec3>> = cfg.bayesian.then(|| {
            let mut rng = crate::rng::stream(cfg.seed, "optimize.mc", iter as u64);
            (0..cfg.weights.mc_samples)
                .map(|_| standard_normal_grid(cfg.grid_dims, &mut rng))
                .collect()
        });
        let (breakdown, grad) =
            grad_total_wrt_grid(&prob, &field, &cfg.kernel, &cfg.weights, noise.as_deref())?;
        if let Some(term) = first_nonfinite_term(&breakdown) {
            return Err(Error::NonFiniteLoss {
                term: term.into(),
                iteration: iter,
            });
        }
        trace.push(breakdown.total);
        if breakdown.total < best_loss {
            best_loss = breakdown.total;
            best_params.copy_from_slice(&params);
        }
        // Plateau detection: stop when the best loss seen has not improved
        // relatively by tol within the last 10 iterations. Checks start
        // after a warmup of 30; Adam's first steps move every parameter by
        // ±lr and need a few iterations to settle back.
        if trace.len() > 30 {
            let head = &trace[..trace.len() - 10];
            let best_before = head.iter().copied().fold(f64::INFINITY, f64::min);
            let rel = (best_before - best_loss) / best_before.abs().max(1e-30);
            if rel < cfg.tol {
                break;
            }
        }
        let g = flatten_grad(&grad.mu, grad.eta.as_ref());
        adam.step(&mut params, &g);
    }

    let (mu, eta) = unflatten(&best_params, cfg.grid_dims, cfg.bayesian);
    let field = GriddedField::new(grid, mu, eta)?;
    let up = Upsampler::new(&field.grid, &cfg.kernel)?;
    let dense = up.apply(&field.mu);
    if !dense.is_finite() {
        return Err(Error::NonFinite {
            what: "final dense field".into(),
        });
    }

    let mut report = MetricReport::empty();
    report.jacobian = Some(jacobian_stats(&dense)?);
    if let Some((fm, mm)) = masks {
        let warped = warp_mask(mm, &dense, BoundaryPolicy::Clamp)?;
        report.dice = Some(dice_score(&warped, fm)?);
        report.centroid_mask_mm =
            centroid_distance_masks(&warped.binarized(), fm, fixed.spacing()).ok();
    }

    let iterations = trace.len();
    Ok(RegistrationResult {
        field,
        dense,
        loss_trace: trace,
        iterations,
        report,
    })
}

/// Mean Euclidean distance between two dense fields, in voxels.
pub fn mean_endpoint_error(a: &DenseField, b: &DenseField) -> Result<f64> {
    if a.dims != b.dims {
        return Err(Error::DimsMismatch {
            what: "endpoint error".into(),
            lhs: a.dims,
            rhs: b.dims,
        });
    }
    let n = a.num_voxels();
    let mut acc = 0.0;
    for i in 0..n {
        let dx = a.comps[0][i] - b.comps[0][i];
        let dy = a.comps[1][i] - b.comps[1][i];
        let dz = a.comps[2][i] - b.comps[2][i];
        acc += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    Ok(acc / n as f64)
}

/// One row of the accuracy-vs-grid table, averaged over pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DofSweepRow {
    pub grid_dims: [usize; 3],
    pub label_noise: f64,
    pub dice: f64,
    pub endpoint_error_vox: f64,
    pub folding_pct: f64,
    pub bending: f64,
    pub final_loss: f64,
}

/// Register every pair at every grid size and tabulate accuracy and
/// regularity per grid.
pub fn dof_sweep(
    pairs: &[SynthPair],
    grids: &[[usize; 3]],
    base_cfg: &RegistrationConfig,
) -> Result<Vec<DofSweepRow>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArg("dof_sweep needs at least one pair".into()));
    }
    if grids.is_empty() {
        return Err(Error::InvalidArg("dof_sweep needs at least one grid".into()));
    }
    let mut rows = Vec::with_capacity(grids.len());
    for &grid_dims in grids {
        let mut dice = 0.0;
        let mut epe = 0.0;
        let mut folding: f64 = 0.0;
        let mut bending = 0.0;
        let mut final_loss = 0.0;
        for pair in pairs {
            let cfg = RegistrationConfig {
                grid_dims,
                ..base_cfg.clone()
            };
            let result = register_pair(
                &pair.fixed,
                &pair.moving,
                Some((&pair.fixed_mask, &pair.moving_mask)),
                &cfg,
            )?;
            dice += result.report.dice.unwrap_or(f64::NAN);
            epe += mean_endpoint_error(&result.dense, &pair.gt_dense)?;
            folding += result
                .report
                .jacobian
                .map(|j| j.folding_pct)
                .unwrap_or(f64::NAN);
            bending += bending_energy(&result.dense)?;
            final_loss += result.loss_trace.last().copied().unwrap_or(f64::NAN);
        }
        let n = pairs.len() as f64;
        rows.push(DofSweepRow {
            grid_dims,
            label_noise: pairs[0].label_noise,
            dice: dice / n,
            endpoint_error_vox: epe / n,
            folding_pct: folding / n,
            bending: bending / n,
            final_loss: final_loss / n,
        });
    }
    Ok(rows)
}
