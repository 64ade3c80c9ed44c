//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};

use regrid_core::gridfield::{
    load_dense_field, load_field, save_dense_field, save_field, upsample, DenseField,
    GriddedField, InterpKernel,
};
use regrid_core::gridnet::train::{select_grid, train, TrainConfig};
use regrid_core::gridnet::{load_checkpoint, save_checkpoint, GridNet, NetConfig};
use regrid_core::losses::LossWeights;
use regrid_core::metrics::{
    centroid_distance_landmarks, centroid_distance_masks, dice_score, jacobian_stats,
    landmark_transfer, paired_tests, MetricReport, PairedComparison,
};
use regrid_core::optimize::{dof_sweep, register_pair, RegistrationConfig};
use regrid_core::synth::{make_longitudinal_suite, make_suite, SynthConfig, SynthPair};
use regrid_core::volume::{
    load_landmarks, load_mask, load_volume, save_landmarks, save_mask, save_volume,
};
use regrid_core::warp::{warp_mask, warp_volume, BoundaryPolicy};

use crate::manifest::ManifestBuilder;
use crate::UsageError;

pub fn kernel_from(name: &str, gaussian_sigma: f64) -> Result<InterpKernel> {
    match name {
        "trilinear" => Ok(InterpKernel::Trilinear),
        "bspline" => Ok(InterpKernel::Bspline3),
        "gaussian" => Ok(InterpKernel::Gaussian {
            sigma_cells: gaussian_sigma,
        }),
        other => Err(UsageError::new(format!(
            "unknown kernel `{other}` (expected trilinear|bspline|gaussian)"
        ))
        .into()),
    }
}

pub fn validate_grid(grid: [usize; 3]) -> Result<()> {
    for g in grid {
        if g < 2 {
            return Err(UsageError::new("grid_dim must be ≥ 2".to_string()).into());
        }
    }
    Ok(())
}

/// Load a field file as a dense field, upsampling gridded files with the
/// given kernel.
pub fn load_any_field(path: &Path, kernel: &InterpKernel) -> Result<DenseField> {
    let header_path = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        path.to_path_buf()
    } else {
        path.with_extension("json")
    };
    let text = fs::read_to_string(&header_path)
        .with_context(|| format!("reading {}", header_path.display()))?;
    let header: Value = serde_json::from_str(&text)?;
    if header.get("grid_dims").is_some() {
        let field = load_field(path)?;
        Ok(upsample(&field, kernel)?)
    } else if header.get("components").is_some() {
        Ok(load_dense_field(path)?)
    } else {
        bail!("{} is neither a gridded nor a dense field", path.display())
    }
}

fn load_pair_dir(dir: &Path) -> Result<SynthPair> {
    let fixed = load_volume(dir.join("fixed"))?;
    let fixed_mask = load_mask(dir.join("fixed_mask"))?;
    let moving = load_volume(dir.join("moving"))?;
    let moving_mask = load_mask(dir.join("moving_mask"))?;
    let fixed_landmarks = load_landmarks(dir.join("fixed_landmarks.csv"))?;
    let moving_landmarks = load_landmarks(dir.join("moving_landmarks.csv"))?;
    let gt_field = load_field(dir.join("gt_field"))?;
    let gt_dense = upsample(&gt_field, &InterpKernel::Trilinear)?;
    Ok(SynthPair {
        fixed,
        fixed_mask,
        fixed_landmarks,
        moving,
        moving_mask,
        moving_landmarks,
        gt_field,
        gt_dense,
        seed: 0,
        intensity_noise: 0.0,
        label_noise: 0.0,
    })
}

pub fn load_pairs_dir(dir: &Path) -> Result<Vec<SynthPair>> {
    let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        bail!("no pair subdirectories under {}", dir.display());
    }
    subdirs.iter().map(|d| load_pair_dir(d)).collect()
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub struct SynthArgs {
    pub out_dir: PathBuf,
    pub dims: [usize; 3],
    pub grid: [usize; 3],
    pub max_disp: f64,
    pub intensity_noise: f64,
    pub label_noise: f64,
    pub pairs: usize,
    pub longitudinal: bool,
    pub seed: u64,
}

pub fn run_synth(args: &SynthArgs, argv: &[String]) -> Result<()> {
    validate_grid(args.grid)?;
    let cfg = SynthConfig {
        dims: args.dims,
        grid_dims: args.grid,
        max_disp: args.max_disp,
        intensity_noise: args.intensity_noise,
        label_noise: args.label_noise,
    };
    let suite = if args.longitudinal {
        make_longitudinal_suite(&cfg, args.pairs, args.seed)?
    } else {
        make_suite(&cfg, args.pairs, args.seed)?
    };
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let mut manifest = ManifestBuilder::new("synth", argv);
    manifest.seed(args.seed).config(json!({
        "out-dir": args.out_dir,
        "dims": args.dims,
        "grid": args.grid,
        "max-disp": args.max_disp,
        "intensity-noise": args.intensity_noise,
        "label-noise": args.label_noise,
        "pairs": args.pairs,
        "longitudinal": args.longitudinal,
        "seed": args.seed,
    }));
    for (i, pair) in suite.iter().enumerate() {
        let dir = args.out_dir.join(format!("pair_{i:03}"));
        fs::create_dir_all(&dir)?;
        save_volume(&pair.fixed, dir.join("fixed"))?;
        save_mask(&pair.fixed_mask, dir.join("fixed_mask"))?;
        save_volume(&pair.moving, dir.join("moving"))?;
        save_mask(&pair.moving_mask, dir.join("moving_mask"))?;
        save_landmarks(&pair.fixed_landmarks, dir.join("fixed_landmarks.csv"))?;
        save_landmarks(&pair.moving_landmarks, dir.join("moving_landmarks.csv"))?;
        save_field(&pair.gt_field, dir.join("gt_field"))?;
        manifest.output(&dir);
    }
    let path = manifest.write(args.out_dir.join("suite"))?;
    println!(
        "wrote {} pair(s) under {} (manifest {})",
        suite.len(),
        args.out_dir.display(),
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// register
// ---------------------------------------------------------------------------

pub struct RegisterArgs {
    pub fixed: PathBuf,
    pub moving: PathBuf,
    pub fixed_mask: Option<PathBuf>,
    pub moving_mask: Option<PathBuf>,
    pub grid: [usize; 3],
    pub kernel: String,
    pub gaussian_sigma: f64,
    pub bayesian: bool,
    pub iters: usize,
    pub lr: f64,
    pub tol: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub normalize: bool,
    pub out_field: PathBuf,
    pub out_warped: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub quiet: bool,
}

pub fn run_register(args: &RegisterArgs, argv: &[String]) -> Result<()> {
    validate_grid(args.grid)?;
    let kernel = kernel_from(&args.kernel, args.gaussian_sigma)?;
    let mut fixed = load_volume(&args.fixed)?;
    let mut moving = load_volume(&args.moving)?;
    if args.normalize {
        fixed = fixed.min_max_normalized();
        moving = moving.min_max_normalized();
    }
    let masks = match (&args.fixed_mask, &args.moving_mask) {
        (Some(f), Some(m)) => Some((load_mask(f)?, load_mask(m)?)),
        (None, None) => None,
        _ => {
            return Err(UsageError::new(
                "either both or neither of --fixed-mask/--moving-mask".to_string(),
            )
            .into())
        }
    };
    let cfg = RegistrationConfig {
        grid_dims: args.grid,
        kernel,
        bayesian: args.bayesian,
        weights: args.weights,
        lr: args.lr,
        max_iters: args.iters,
        tol: args.tol,
        seed: args.seed,
        ..Default::default()
    };
    let result = register_pair(
        &fixed,
        &moving,
        masks.as_ref().map(|(f, m)| (f, m)),
        &cfg,
    )?;
    if !args.quiet {
        for (i, loss) in result.loss_trace.iter().enumerate() {
            if i % 25 == 0 || i + 1 == result.loss_trace.len() {
                println!("iter {i:4}  loss {loss:.6e}");
            }
        }
    }
    save_field(&result.field, &args.out_field)?;
    let mut manifest = ManifestBuilder::new("register", argv);
    manifest
        .seed(args.seed)
        .config(serde_json::to_value(&cfg)?)
        .input(&args.fixed)
        .input(&args.moving)
        .output(&args.out_field);
    if let Some(out) = &args.out_warped {
        let warped = warp_volume(&moving, &result.dense, BoundaryPolicy::Clamp)?;
        save_volume(&warped, out)?;
        manifest.output(out);
    }
    if let Some(report) = &args.report {
        fs::write(report, serde_json::to_string_pretty(&result.report)?)?;
        manifest.output(report);
    }
    manifest.write(&args.out_field)?;
    println!(
        "registered in {} iterations, final loss {:.6e}",
        result.iterations,
        result.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// warp / upsample
// ---------------------------------------------------------------------------

pub struct WarpArgs {
    pub moving: PathBuf,
    pub field: PathBuf,
    pub out: PathBuf,
    pub boundary: String,
    pub upsample: String,
    pub gaussian_sigma: f64,
    pub mask: bool,
}

pub fn run_warp(args: &WarpArgs, argv: &[String]) -> Result<()> {
    let policy = match args.boundary.as_str() {
        "clamp" => BoundaryPolicy::Clamp,
        "zero" => BoundaryPolicy::Zero,
        other => {
            return Err(
                UsageError::new(format!("unknown boundary `{other}` (clamp|zero)")).into(),
            )
        }
    };
    let kernel = kernel_from(&args.upsample, args.gaussian_sigma)?;
    let dense = load_any_field(&args.field, &kernel)?;
    if args.mask {
        let m = load_mask(&args.moving)?;
        let warped = warp_mask(&m, &dense, policy)?;
        save_mask(&warped, &args.out)?;
    } else {
        let v = load_volume(&args.moving)?;
        let warped = warp_volume(&v, &dense, policy)?;
        save_volume(&warped, &args.out)?;
    }
    let mut manifest = ManifestBuilder::new("warp", argv);
    manifest
        .config(json!({
            "moving": args.moving,
            "field": args.field,
            "out": args.out,
            "boundary": args.boundary,
            "upsample": args.upsample,
            "gaussian-sigma": args.gaussian_sigma,
            "mask": args.mask,
        }))
        .input(&args.moving)
        .input(&args.field)
        .output(&args.out);
    manifest.write(&args.out)?;
    println!("warped {} -> {}", args.moving.display(), args.out.display());
    Ok(())
}

pub struct UpsampleArgs {
    pub field: PathBuf,
    pub out: PathBuf,
    pub upsample: String,
    pub gaussian_sigma: f64,
}

pub fn run_upsample(args: &UpsampleArgs, argv: &[String]) -> Result<()> {
    let kernel = kernel_from(&args.upsample, args.gaussian_sigma)?;
    let field: GriddedField = load_field(&args.field)?;
    let dense = upsample(&field, &kernel)?;
    save_dense_field(&dense, &args.out)?;
    let mut manifest = ManifestBuilder::new("upsample", argv);
    manifest
        .config(json!({
            "field": args.field,
            "out": args.out,
            "upsample": args.upsample,
            "gaussian-sigma": args.gaussian_sigma,
        }))
        .input(&args.field)
        .output(&args.out);
    manifest.write(&args.out)?;
    println!(
        "upsampled {} to dense {}",
        args.field.display(),
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train / infer / select-grid
// ---------------------------------------------------------------------------

pub struct TrainArgs {
    pub train_dir: PathBuf,
    pub val_dir: PathBuf,
    pub out: PathBuf,
    pub curves: Option<PathBuf>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub grids: Vec<[usize; 3]>,
    pub kernel: String,
    pub gaussian_sigma: f64,
    pub base_channels: usize,
    pub levels: usize,
    pub bayesian: bool,
    pub use_masks: bool,
    pub weights: LossWeights,
    pub val_grid: [usize; 3],
    pub seed: u64,
}

pub fn run_train(args: &TrainArgs, argv: &[String]) -> Result<()> {
    for &g in &args.grids {
        validate_grid(g)?;
    }
    let kernel = kernel_from(&args.kernel, args.gaussian_sigma)?;
    let train_pairs = load_pairs_dir(&args.train_dir)?;
    let val_pairs = load_pairs_dir(&args.val_dir)?;
    let net_cfg = NetConfig {
        levels: args.levels,
        base_channels: args.base_channels,
        bayesian: args.bayesian,
        ..Default::default()
    };
    let mut net = GridNet::<f32>::new(net_cfg, args.seed)?;
    let cfg = TrainConfig {
        lr: args.lr,
        batch_size: args.batch,
        epochs: args.epochs,
        grid_set: args.grids.clone(),
        kernel,
        weights: args.weights,
        use_masks: args.use_masks,
        val_grid: args.val_grid,
        seed: args.seed,
    };
    let stats = train(&mut net, &train_pairs, &val_pairs, &cfg)?;
    for (epoch, v) in stats.val_losses.iter().enumerate() {
        if epoch == 0 {
            println!("epoch  - (baseline)  val {v:.6e}");
        } else {
            println!("epoch {epoch:3}  val {v:.6e}");
        }
    }
    save_checkpoint(&net, &args.out)?;
    let mut manifest = ManifestBuilder::new("train", argv);
    manifest
        .seed(args.seed)
        .config(json!({
            "train-dir": args.train_dir,
            "val-dir": args.val_dir,
            "out": args.out,
            "epochs": args.epochs,
            "batch": args.batch,
            "lr": args.lr,
            "grids": args.grids,
            "kernel": args.kernel,
            "base-channels": args.base_channels,
            "levels": args.levels,
            "bayesian": args.bayesian,
            "use-masks": args.use_masks,
            "weights": serde_json::to_value(args.weights)?,
            "val-grid": args.val_grid,
            "seed": args.seed,
        }))
        .input(&args.train_dir)
        .input(&args.val_dir)
        .output(&args.out);
    if let Some(curves) = &args.curves {
        let mut text = String::from("step,grid,loss\n");
        for (i, (loss, grid)) in stats
            .step_losses
            .iter()
            .zip(&stats.step_grids)
            .enumerate()
        {
            text.push_str(&format!("{i},{},{loss}\n", grid[0]));
        }
        text.push_str("\nepoch,val_loss\n");
        for (e, v) in stats.val_losses.iter().enumerate() {
            text.push_str(&format!("{e},{v}\n"));
        }
        fs::write(curves, text)?;
        manifest.output(curves);
    }
    manifest.write(&args.out)?;
    println!(
        "trained {} steps; checkpoint at {}",
        stats.steps,
        args.out.display()
    );
    Ok(())
}

pub struct InferArgs {
    pub checkpoint: PathBuf,
    pub fixed: PathBuf,
    pub moving: PathBuf,
    pub grid: [usize; 3],
    pub out_field: PathBuf,
    pub out_warped: Option<PathBuf>,
    pub upsample: String,
    pub gaussian_sigma: f64,
    pub normalize: bool,
}

pub fn run_infer(args: &InferArgs, argv: &[String]) -> Result<()> {
    validate_grid(args.grid)?;
    let net: GridNet<f32> = load_checkpoint(&args.checkpoint)?;
    let mut fixed = load_volume(&args.fixed)?;
    let mut moving = load_volume(&args.moving)?;
    if args.normalize {
        fixed = fixed.min_max_normalized();
        moving = moving.min_max_normalized();
    }
    let field = net.forward(&fixed, &moving, args.grid)?;
    save_field(&field, &args.out_field)?;
    let mut manifest = ManifestBuilder::new("infer", argv);
    manifest
        .config(json!({
            "checkpoint": args.checkpoint,
            "fixed": args.fixed,
            "moving": args.moving,
            "grid": args.grid,
            "out-field": args.out_field,
            "upsample": args.upsample,
            "gaussian-sigma": args.gaussian_sigma,
            "normalize": args.normalize,
        }))
        .input(&args.checkpoint)
        .input(&args.fixed)
        .input(&args.moving)
        .output(&args.out_field);
    if let Some(out) = &args.out_warped {
        let kernel = kernel_from(&args.upsample, args.gaussian_sigma)?;
        let dense = upsample(&field, &kernel)?;
        let warped = warp_volume(&moving, &dense, BoundaryPolicy::Clamp)?;
        save_volume(&warped, out)?;
        manifest.output(out);
    }
    manifest.write(&args.out_field)?;
    println!("predicted field written to {}", args.out_field.display());
    Ok(())
}

pub struct SelectGridArgs {
    pub checkpoint: PathBuf,
    pub val_dir: PathBuf,
    pub grids: Vec<[usize; 3]>,
    pub kernel: String,
    pub gaussian_sigma: f64,
    pub out: Option<PathBuf>,
}

pub fn run_select_grid(args: &SelectGridArgs, argv: &[String]) -> Result<()> {
    for &g in &args.grids {
        validate_grid(g)?;
    }
    let kernel = kernel_from(&args.kernel, args.gaussian_sigma)?;
    let net: GridNet<f32> = load_checkpoint(&args.checkpoint)?;
    let val_pairs = load_pairs_dir(&args.val_dir)?;
    let cfg = TrainConfig {
        kernel,
        ..Default::default()
    };
    let (chosen, rows) = select_grid(&net, &val_pairs, &args.grids, &cfg)?;
    println!("grid      mean_dice   mean_loss");
    for row in &rows {
        println!(
            "{:?}  {:.4}     {:.6e}",
            row.grid_dims, row.mean_dice, row.mean_loss
        );
    }
    println!("selected grid: {chosen:?}");
    if let Some(out) = &args.out {
        fs::write(
            out,
            serde_json::to_string_pretty(&json!({"selected": chosen, "table": rows}))?,
        )?;
        let mut manifest = ManifestBuilder::new("select-grid", argv);
        manifest
            .config(json!({
                "checkpoint": args.checkpoint,
                "val-dir": args.val_dir,
                "grids": args.grids,
                "kernel": args.kernel,
            }))
            .input(&args.checkpoint)
            .input(&args.val_dir)
            .output(out);
        manifest.write(out)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval / stats / dof-sweep
// ---------------------------------------------------------------------------

pub struct EvalArgs {
    pub field: PathBuf,
    pub upsample: String,
    pub gaussian_sigma: f64,
    pub fixed_mask: Option<PathBuf>,
    pub moving_mask: Option<PathBuf>,
    pub fixed_landmarks: Option<PathBuf>,
    pub moving_landmarks: Option<PathBuf>,
    pub out: PathBuf,
}

pub fn run_eval(args: &EvalArgs, argv: &[String]) -> Result<()> {
    let kernel = kernel_from(&args.upsample, args.gaussian_sigma)?;
    let dense = load_any_field(&args.field, &kernel)?;
    let mut report = MetricReport::empty();
    report.jacobian = Some(jacobian_stats(&dense)?);
    if let (Some(fm), Some(mm)) = (&args.fixed_mask, &args.moving_mask) {
        let fixed_mask = load_mask(fm)?;
        let moving_mask = load_mask(mm)?;
        let warped = warp_mask(&moving_mask, &dense, BoundaryPolicy::Clamp)?;
        report.dice = Some(dice_score(&warped, &fixed_mask)?);
        report.centroid_mask_mm = Some(centroid_distance_masks(
            &warped.binarized(),
            &fixed_mask,
            fixed_mask.spacing(),
        )?);
    }
    if let (Some(fl), Some(ml)) = (&args.fixed_landmarks, &args.moving_landmarks) {
        let fixed_lm = load_landmarks(fl)?;
        let moving_lm = load_landmarks(ml)?;
        let transferred = landmark_transfer(&fixed_lm, &dense)?;
        report.centroid_landmark_mm = Some(centroid_distance_landmarks(
            &transferred,
            &moving_lm,
            [1.0, 1.0, 1.0],
        )?);
    }
    fs::write(&args.out, serde_json::to_string_pretty(&report)?)?;
    let mut manifest = ManifestBuilder::new("eval", argv);
    manifest
        .config(json!({
            "field": args.field,
            "upsample": args.upsample,
        }))
        .input(&args.field)
        .output(&args.out);
    manifest.write(&args.out)?;
    println!("report written to {}", args.out.display());
    Ok(())
}

pub struct StatsArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    pub format: String,
}

/// Input CSV: `family,name,case,score_a,score_b` with a header row.
pub fn run_stats(args: &StatsArgs, argv: &[String]) -> Result<()> {
    let text = fs::read_to_string(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let mut groups: Vec<((String, String), (Vec<f64>, Vec<f64>))> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            bail!(
                "{} line {}: expected `family,name,case,score_a,score_b`",
                args.input.display(),
                lineno + 1
            );
        }
        if lineno == 0 && fields[3].parse::<f64>().is_err() {
            continue; // header
        }
        let key = (fields[0].to_string(), fields[1].to_string());
        let a: f64 = fields[3]
            .parse()
            .with_context(|| format!("line {}: bad score_a", lineno + 1))?;
        let b: f64 = fields[4]
            .parse()
            .with_context(|| format!("line {}: bad score_b", lineno + 1))?;
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, (va, vb))) => {
                va.push(a);
                vb.push(b);
            }
            None => groups.push((key, (vec![a], vec![b]))),
        }
    }
    let comparisons: Vec<PairedComparison> = groups
        .into_iter()
        .map(|((family, name), (scores_a, scores_b))| PairedComparison {
            family,
            name,
            scores_a,
            scores_b,
        })
        .collect();
    if comparisons.is_empty() {
        bail!("no comparisons found in {}", args.input.display());
    }
    let results = paired_tests(&comparisons)?;
    let payload = match args.format.as_str() {
        "json" => serde_json::to_string_pretty(&results)?,
        "csv" => {
            let mut out = String::from("family,name,n,mean_diff,p,q\n");
            for r in &results {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    r.family, r.name, r.n, r.mean_diff, r.p, r.q
                ));
            }
            out
        }
        other => {
            return Err(UsageError::new(format!("unknown report format `{other}`")).into())
        }
    };
    fs::write(&args.out, payload)?;
    let mut manifest = ManifestBuilder::new("stats", argv);
    manifest
        .config(json!({"input": args.input, "format": args.format}))
        .input(&args.input)
        .output(&args.out);
    manifest.write(&args.out)?;
    println!("{} comparisons written to {}", results.len(), args.out.display());
    Ok(())
}

pub struct DofSweepArgs {
    pub grids: Vec<[usize; 3]>,
    pub noise: f64,
    pub pairs: usize,
    pub dims: [usize; 3],
    pub gt_grid: [usize; 3],
    pub max_disp: f64,
    pub iters: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub kernel: String,
    pub gaussian_sigma: f64,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn run_dof_sweep(args: &DofSweepArgs, argv: &[String]) -> Result<()> {
    for &g in &args.grids {
        validate_grid(g)?;
    }
    let kernel = kernel_from(&args.kernel, args.gaussian_sigma)?;
    let synth_cfg = SynthConfig {
        dims: args.dims,
        grid_dims: args.gt_grid,
        max_disp: args.max_disp,
        intensity_noise: 0.0,
        label_noise: args.noise,
    };
    let pairs = make_suite(&synth_cfg, args.pairs, args.seed)?;
    let base = RegistrationConfig {
        kernel,
        weights: args.weights,
        lr: args.lr,
        max_iters: args.iters,
        seed: args.seed,
        ..Default::default()
    };
    let rows = dof_sweep(&pairs, &args.grids, &base)?;
    let mut text =
        String::from("grid,label_noise,dice,endpoint_error_vox,folding_pct,bending,final_loss\n");
    for row in &rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.grid_dims[0],
            row.label_noise,
            row.dice,
            row.endpoint_error_vox,
            row.folding_pct,
            row.bending,
            row.final_loss
        ));
    }
    fs::write(&args.out, &text)?;
    let mut manifest = ManifestBuilder::new("dof-sweep", argv);
    manifest
        .seed(args.seed)
        .config(json!({
            "grids": args.grids,
            "noise": args.noise,
            "pairs": args.pairs,
            "dims": args.dims,
            "gt-grid": args.gt_grid,
            "max-disp": args.max_disp,
            "iters": args.iters,
            "lr": args.lr,
            "kernel": args.kernel,
            "seed": args.seed,
        }))
        .output(&args.out);
    manifest.write(&args.out)?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// replay
// ---------------------------------------------------------------------------

pub fn run_replay(manifest_path: &Path) -> Result<()> {
    let manifest = crate::manifest::load_manifest(manifest_path)?;
    if manifest.argv.is_empty() {
        bail!("manifest has no argv to replay");
    }
    println!("replaying: regrid {}", manifest.argv.join(" "));
    crate::dispatch_args(&manifest.argv).map_err(|e| anyhow!("{e}"))
}
