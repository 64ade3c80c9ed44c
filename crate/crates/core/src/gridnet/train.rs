//! Grid-adaptive training of the decoder network and validation-driven
//! grid selection.
//!
//! Each step draws one grid size uniformly from the configured set, runs a
//! fresh tape per batch item, computes the registration objective and its
//! gradient with respect to the predicted control parameters analytically,
//! and seeds the reverse sweep with it. Gradients are summed in item order,
//! so serial runs are bit-reproducible.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{gridvec_to_seed, node_to_gridvec, GridNet};
use crate::autodiff::{Tape, TapeFloat};
use crate::error::{Error, Result};
use crate::gridfield::{upsample, ControlGrid, GridVec3, GriddedField, InterpKernel};
use crate::losses::{grad_total_wrt_grid, total_loss, LossWeights, RegProblem};
use crate::metrics::dice_score;
use crate::optimize::Adam;
use crate::synth::SynthPair;
use crate::warp::{warp_mask, BoundaryPolicy};

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Grid sizes drawn uniformly per step.
    pub grid_set: Vec<[usize; 3]>,
    pub kernel: InterpKernel,
    pub weights: LossWeights,
    /// Use the masks' Dice term during training.
    pub use_masks: bool,
    /// Grid used for the per-epoch validation loss.
    pub val_grid: [usize; 3],
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 4,
            epochs: 10,
            grid_set: vec![[5, 5, 5], [8, 8, 8], [10, 10, 10], [15, 15, 15]],
            kernel: InterpKernel::Trilinear,
            weights: LossWeights::default(),
            use_masks: false,
            val_grid: [8, 8, 8],
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidArg("lr must be > 0".into()));
        }
        if self.batch_size < 1 || self.epochs < 1 {
            return Err(Error::InvalidArg("batch and epochs must be ≥ 1".into()));
        }
        if self.grid_set.is_empty() {
            return Err(Error::InvalidArg("grid set must be nonempty".into()));
        }
        self.weights.validate()
    }
}

/// Loss curves of one training run. `val_losses[0]` is the pre-training
/// baseline; one entry follows per epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub step_losses: Vec<f64>,
    pub step_grids: Vec<[usize; 3]>,
    pub val_losses: Vec<f64>,
    pub steps: usize,
}

fn standard_normal_grid(dims: [usize; 3], rng: &mut impl Rng) -> GridVec3 {
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

fn pair_problem<'a>(pair: &'a SynthPair, use_masks: bool) -> RegProblem<'a> {
    let mut prob = RegProblem::new(&pair.fixed, &pair.moving);
    if use_masks {
        prob = prob.with_masks(&pair.fixed_mask, &pair.moving_mask);
    }
    prob
}

/// Mean objective over pairs at a fixed grid with deterministic (zero)
/// Monte-Carlo noise; used for validation curves.
pub fn validation_loss<F: TapeFloat>(
    net: &GridNet<F>,
    pairs: &[SynthPair],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut acc = 0.0;
    for pair in pairs {
        let field = net.forward(&pair.fixed, &pair.moving, cfg.val_grid)?;
        let noise_store;
        let noise = if field.is_bayesian() {
            noise_store = vec![GridVec3::zeros(cfg.val_grid)];
            Some(noise_store.as_slice())
        } else {
            None
        };
        let b = total_loss(
            &pair_problem(pair, cfg.use_masks),
            &field,
            &cfg.kernel,
            &cfg.weights,
            noise,
        )?;
        acc += b.total;
    }
    Ok(acc / pairs.len() as f64)
}

/// Grid-adaptive training. Requires at least 8 training pairs; validation
/// pairs may be any nonempty set.
pub fn train<F: TapeFloat>(
    net: &mut GridNet<F>,
    train_pairs: &[SynthPair],
    val_pairs: &[SynthPair],
    cfg: &TrainConfig,
) -> Result<TrainStats> {
    cfg.validate()?;
    if train_pairs.len() < 8 {
        return Err(Error::InvalidArg(format!(
            "training needs ≥ 8 pairs, got {}",
            train_pairs.len()
        )));
    }
    if val_pairs.is_empty() {
        return Err(Error::InvalidArg("validation set must be nonempty".into()));
    }
    let dims = train_pairs[0].fixed.dims();
    for pair in train_pairs.iter().chain(val_pairs) {
        if pair.fixed.dims() != dims {
            return Err(Error::DimsMismatch {
                what: "training pair dims".into(),
                lhs: pair.fixed.dims(),
                rhs: dims,
            });
        }
    }

    let mut adam = Adam::new(net.params.data.len(), F::from(cfg.lr).unwrap());
    let steps_per_epoch = train_pairs.len().div_ceil(cfg.batch_size);
    let mut stats = TrainStats {
        step_losses: Vec::new(),
        step_grids: Vec::new(),
        val_losses: Vec::new(),
        steps: 0,
    };
    stats.val_losses.push(validation_loss(net, val_pairs, cfg)?);

    let mut global_step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        let mut shuffle_rng = crate::rng::stream(cfg.seed, "train.shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut step_rng = crate::rng::stream(cfg.seed, "train.grid", global_step);
            let grid_dims = cfg.grid_set[step_rng.gen_range(0..cfg.grid_set.len())];
            let mut grad_acc = vec![F::zero(); net.params.data.len()];
            let mut batch_loss = 0.0;
            for (item, &pair_idx) in chunk.iter().enumerate() {
                let pair = &train_pairs[pair_idx];
                let input = net.stack_pair(&pair.fixed, &pair.moving)?;
                let mut tape = Tape::new();
                let handles = net.build_forward(&mut tape, input, grid_dims)?;
                let grid = ControlGrid::new(dims, grid_dims)?;
                let mu = node_to_gridvec(&tape, handles.mu, grid_dims);
                let eta = handles
                    .eta
                    .map(|id| node_to_gridvec(&tape, id, grid_dims));
                let field = GriddedField::new(grid, mu, eta)?;

                let noise: Option<Vec<GridVec3>> = field.is_bayesian().then(|| {
                    let mut rng = crate::rng::stream(
                        cfg.seed,
                        "train.mc",
                        global_step * 1000 + item as u64,
                    );
                    (0..cfg.weights.mc_samples)
                        .map(|_| standard_normal_grid(grid_dims, &mut rng))
                        .collect()
                });
                let (breakdown, grad) = grad_total_wrt_grid(
                    &pair_problem(pair, cfg.use_masks),
                    &field,
                    &cfg.kernel,
                    &cfg.weights,
                    noise.as_deref(),
                )?;
                if !breakdown.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        term: "training objective".into(),
                        iteration: global_step as usize,
                    });
                }
                batch_loss += breakdown.total;

                let mut seeds = vec![(handles.mu, gridvec_to_seed::<F>(&grad.mu))];
                if let (Some(eta_node), Some(eta_grad)) = (handles.eta, grad.eta.as_ref()) {
                    seeds.push((eta_node, gridvec_to_seed::<F>(eta_grad)));
                }
                tape.backward_seeded(&seeds)?;
                for (spec, node) in net.params.specs.iter().zip(&handles.params) {
                    if let Some(g) = tape.grad(*node) {
                        for (dst, src) in grad_acc[spec.offset..spec.offset + spec.len()]
                            .iter_mut()
                            .zip(g.iter())
                        {
                            *dst = *dst + *src;
                        }
                    }
                }
            }
            let scale = F::from(1.0 / chunk.len() as f64).unwrap();
            for g in &mut grad_acc {
                *g = *g * scale;
            }
            let mut params = std::mem::take(&mut net.params.data);
            adam.step(&mut params, &grad_acc);
            net.params.data = params;

            stats.step_losses.push(batch_loss / chunk.len() as f64);
            stats.step_grids.push(grid_dims);
            global_step += 1;
        }
        stats.val_losses.push(validation_loss(net, val_pairs, cfg)?);
        let _ = steps_per_epoch;
    }
    stats.steps = global_step as usize;
    Ok(stats)
}

/// Per-grid validation metrics for grid selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSelectionRow {
    pub grid_dims: [usize; 3],
    pub mean_dice: f64,
    pub mean_loss: f64,
}

/// Evaluate a checkpoint at each candidate grid on validation pairs and
/// pick the grid with the best mean Dice; exact ties go to the coarser
/// grid.
pub fn select_grid<F: TapeFloat>(
    net: &GridNet<F>,
    val_pairs: &[SynthPair],
    grids: &[[usize; 3]],
    cfg: &TrainConfig,
) -> Result<([usize; 3], Vec<GridSelectionRow>)> {
    if val_pairs.is_empty() {
        return Err(Error::InvalidArg("validation set must be nonempty".into()));
    }
    if grids.is_empty() {
        return Err(Error::InvalidArg("grid list must be nonempty".into()));
    }
    let mut sorted: Vec<[usize; 3]> = grids.to_vec();
    sorted.sort_by_key(|g| g.iter().product::<usize>());
    let mut rows = Vec::with_capacity(sorted.len());
    for &grid_dims in &sorted {
        let mut dice_acc = 0.0;
        let mut loss_acc = 0.0;
        for pair in val_pairs {
            let field = net.forward(&pair.fixed, &pair.moving, grid_dims)?;
            let dense = upsample(&field, &cfg.kernel)?;
            let warped = warp_mask(&pair.moving_mask, &dense, BoundaryPolicy::Clamp)?;
            dice_acc += dice_score(&warped, &pair.fixed_mask)?;
            let noise_store;
            let noise = if field.is_bayesian() {
                noise_store = vec![GridVec3::zeros(grid_dims)];
                Some(noise_store.as_slice())
            } else {
                None
            };
            loss_acc += total_loss(
                &pair_problem(pair, cfg.use_masks),
                &field,
                &cfg.kernel,
                &cfg.weights,
                noise,
            )?
            .total;
        }
        rows.push(GridSelectionRow {
            grid_dims,
            mean_dice: dice_acc / val_pairs.len() as f64,
            mean_loss: loss_acc / val_pairs.len() as f64,
        });
    }
    // First strict maximum, scanning coarse to fine: ties stay coarse.
    let mut best = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.mean_dice > rows[best].mean_dice {
            best = i;
        }
    }
    Ok((rows[best].grid_dims, rows))
}
