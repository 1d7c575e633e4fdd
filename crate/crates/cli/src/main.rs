//! Batch front end for the shape-modeling pipeline:
//! synth -> optimize -> lds-fit -> eval / modes.
//!
//! Exit codes: 0 success, 2 configuration error, 3 optimizer failure,
//! 4 model-fit failure, 5 metric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use stssm_core::eval::{
    full_sequence_generalization, modes_of_variation, partial_sequence_reconstruction,
    specificity, FitArgs, MetricsReport,
};
use stssm_core::io;
use stssm_core::lds::{em_fit, EmOptions, ObservationMask, Scaler};
use stssm_core::psm::{
    optimize_from, AlphaSchedule, ObjectiveMode, OptimizerConfig, OptimizerState, SamplingKernel,
};
use stssm_core::surfaces::{generate_synthetic_cohort, SynthSpec};
use stssm_core::{seed, Cohort};

#[derive(Parser)]
#[command(name = "stssm", version, about = "Spatiotemporal shape model pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file (TOML). Command-line flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every stage derives its own stream from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap (0 = automatic).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the effective configuration and exit without writing anything.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort: surface domains plus ground-truth particles.
    Synth(Common),
    /// Optimize correspondence particles over a cohort manifest.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Fit the linear dynamical system to an optimized particle model.
    LdsFit(Common),
    /// Evaluate generalization, partial reconstruction, and specificity.
    Eval(Common),
    /// Export PCA modes of variation of a particle model.
    Modes(Common),
}

// Configuration file schema. Unknown keys are rejected everywhere.

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    seed: u64,
    threads: usize,
    out: Option<PathBuf>,
    synth: SynthSection,
    optimize: OptimizeSection,
    lds: LdsSection,
    eval: EvalSection,
    modes: ModesSection,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SynthSection {
    n_subjects: usize,
    n_timepoints: usize,
    n_truth_points: usize,
    radii_mean: [f64; 3],
    radii_stdev: [f64; 3],
    modulation_amplitude: [f64; 3],
    modulation_phase: [f64; 3],
    noise_stdev: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n_subjects: 8,
            n_timepoints: 10,
            n_truth_points: 64,
            radii_mean: [10.0, 8.0, 6.0],
            radii_stdev: [1.0, 0.8, 0.6],
            modulation_amplitude: [0.12, 0.12, 0.12],
            modulation_phase: [0.0, 0.0, 0.0],
            noise_stdev: 0.0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct OptimizeSection {
    manifest: Option<PathBuf>,
    mode: String,
    target_particles: usize,
    iterations_per_split: usize,
    alpha_start: f64,
    alpha_end: f64,
    alpha_schedule: String,
    step_size: f64,
    step_decay: f64,
    procrustes_cadence: usize,
    neighbors: usize,
    split_offset_fraction: f64,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        let c = OptimizerConfig::default();
        Self {
            manifest: None,
            mode: "spatiotemporal".into(),
            target_particles: c.target_particles,
            iterations_per_split: c.iterations_per_split,
            alpha_start: c.alpha_start,
            alpha_end: c.alpha_end,
            alpha_schedule: "geometric".into(),
            step_size: c.step_size,
            step_decay: c.step_decay,
            procrustes_cadence: c.procrustes_cadence,
            neighbors: c.sampling_kernel.neighbors,
            split_offset_fraction: c.split_offset_fraction,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LdsSection {
    manifest: Option<PathBuf>,
    latent_dim: usize,
    iterations: usize,
}

impl Default for LdsSection {
    fn default() -> Self {
        Self { manifest: None, latent_dim: 64, iterations: 50 }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalSection {
    manifest: Option<PathBuf>,
    /// Optional second particle model for a side-by-side comparison row.
    baseline_manifest: Option<PathBuf>,
    folds: usize,
    latent_dim: usize,
    em_iterations: usize,
    mask_fractions: Vec<f64>,
    trials: usize,
    specificity_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            manifest: None,
            baseline_manifest: None,
            folds: 5,
            latent_dim: 64,
            em_iterations: 50,
            mask_fractions: vec![0.1, 0.3, 0.5],
            trials: 20,
            specificity_samples: 100,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModesSection {
    manifest: Option<PathBuf>,
    k: usize,
}

impl Default for ModesSection {
    fn default() -> Self {
        Self { manifest: None, k: 2 }
    }
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
    fn stage(code: u8, err: stssm_core::Error) -> Self {
        Self { code, message: err.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    let mut config = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::config(format!("cannot read config {}: {e}", path.display()))
            })?;
            toml::from_str(&text).map_err(|e| {
                CliError::config(format!("invalid config {}: {e}", path.display()))
            })?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(threads) = common.threads {
        config.threads = threads;
    }
    if let Some(out) = &common.out {
        config.out = Some(out.clone());
    }
    if config.threads > 0 {
        // A failure here means a pool already exists; the cap still applies
        // to everything started afterwards, so it is not fatal in-process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(config.threads).build_global();
    }
    Ok(config)
}

fn out_dir(config: &RunConfig) -> CliResult<PathBuf> {
    config.out.clone().ok_or_else(|| CliError::config("no output directory (--out or `out`)"))
}

fn echo_config(config: &RunConfig) -> CliResult<()> {
    let text = toml::to_string_pretty(config)
        .map_err(|e| CliError::config(format!("cannot serialize config: {e}")))?;
    print!("{text}");
    Ok(())
}

fn optimizer_config(config: &RunConfig) -> CliResult<OptimizerConfig> {
    let s = &config.optimize;
    let mode = match s.mode.as_str() {
        "spatiotemporal" => ObjectiveMode::Spatiotemporal,
        "cross_sectional" => ObjectiveMode::CrossSectional,
        other => return Err(CliError::config(format!("unknown optimize.mode `{other}`"))),
    };
    let alpha_schedule = match s.alpha_schedule.as_str() {
        "geometric" => AlphaSchedule::Geometric,
        "linear" => AlphaSchedule::Linear,
        other => {
            return Err(CliError::config(format!("unknown optimize.alpha_schedule `{other}`")))
        }
    };
    let cfg = OptimizerConfig {
        alpha_start: s.alpha_start,
        alpha_end: s.alpha_end,
        alpha_schedule,
        iterations_per_split: s.iterations_per_split,
        target_particles: s.target_particles,
        step_size: s.step_size,
        step_decay: s.step_decay,
        sampling_kernel: SamplingKernel { neighbors: s.neighbors, ..Default::default() },
        procrustes_cadence: s.procrustes_cadence,
        mode,
        rng_seed: seed::derive(config.seed, "optimize"),
        split_offset_fraction: s.split_offset_fraction,
    };
    cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(cfg)
}

fn cmd_synth(common: &Common) -> CliResult<()> {
    let config = load_config(common)?;
    let s = &config.synth;
    let spec = SynthSpec {
        n_subjects: s.n_subjects,
        n_timepoints: s.n_timepoints,
        n_truth_points: s.n_truth_points,
        radii_mean: s.radii_mean,
        radii_stdev: s.radii_stdev,
        modulation_amplitude: s.modulation_amplitude,
        modulation_phase: s.modulation_phase,
        noise_stdev: s.noise_stdev,
        seed: seed::derive(config.seed, "synth"),
    };
    spec.validate().map_err(|e| CliError::config(e.to_string()))?;
    if common.dry_run {
        return echo_config(&config);
    }
    let dir = out_dir(&config)?;
    let cohort = generate_synthetic_cohort(&spec).map_err(|e| CliError::stage(3, e))?;
    let manifest = io::save_cohort(&dir, &cohort.truth, &cohort.domains)
        .map_err(|e| CliError::stage(3, e))?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_optimize(common: &Common, resume: bool) -> CliResult<()> {
    let config = load_config(common)?;
    let opt = optimizer_config(&config)?;
    if common.dry_run {
        return echo_config(&config);
    }
    let manifest = config
        .optimize
        .manifest
        .clone()
        .ok_or_else(|| CliError::config("optimize.manifest is required"))?;
    let (_, domains) = io::load_cohort(&manifest).map_err(|e| CliError::config(e.to_string()))?;
    let dir = out_dir(&config)?;
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;

    let checkpoint_path = dir.join("checkpoint.json");
    let state = if resume && checkpoint_path.exists() {
        let text = fs::read_to_string(&checkpoint_path)
            .map_err(|e| CliError::config(format!("cannot read checkpoint: {e}")))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("invalid checkpoint: {e}")))?
    } else {
        OptimizerState {
            particles: stssm_core::psm::initial_particles(&domains)
                .map_err(|e| CliError::stage(3, e))?,
            level: 0,
        }
    };

    let outcome = optimize_from(&domains, &opt, state, |s| {
        if let Ok(text) = serde_json::to_string(s) {
            let _ = fs::write(&checkpoint_path, text);
        }
    })
    .map_err(|e| CliError::stage(3, e))?;

    io::save_cohort(&dir, &outcome.pdm, &domains).map_err(|e| CliError::stage(3, e))?;
    io::write_trace_csv(&dir.join("trace.csv"), &outcome.trace)
        .map_err(|e| CliError::stage(3, e))?;
    let summary = serde_json::json!({
        "mode": config.optimize.mode,
        "final": outcome.trace.last(),
    });
    fs::write(dir.join("summary.json"), summary.to_string() + "\n")
        .map_err(|e| CliError::stage(3, stssm_core::Error::Io(e)))?;
    println!("wrote particle model to {}", dir.display());
    Ok(())
}

fn scaled_observations(pdm: &Cohort) -> (Vec<Vec<DVector<f64>>>, Scaler) {
    let obs = stssm_core::eval::cohort_observations(pdm);
    let scaler = Scaler::fit(&obs);
    let scaled = scaler.scale_all(&obs);
    (scaled, scaler)
}

fn cmd_lds_fit(common: &Common) -> CliResult<()> {
    let config = load_config(common)?;
    if config.lds.iterations == 0 || config.lds.latent_dim == 0 {
        return Err(CliError::config("lds.iterations and lds.latent_dim must be >= 1"));
    }
    if common.dry_run {
        return echo_config(&config);
    }
    let manifest = config
        .lds
        .manifest
        .clone()
        .ok_or_else(|| CliError::config("lds.manifest is required"))?;
    let (pdm, _) = io::load_cohort(&manifest).map_err(|e| CliError::config(e.to_string()))?;
    let dir = out_dir(&config)?;
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;

    let (scaled, scaler) = scaled_observations(&pdm);
    let mask = ObservationMask::all_observed(pdm.n_subjects(), pdm.n_timepoints());
    let opts = EmOptions {
        latent_dim: config.lds.latent_dim,
        iterations: config.lds.iterations,
        init_seed: seed::derive(config.seed, "lds-fit"),
        ..Default::default()
    };
    let (params, trace) = em_fit(&scaled, &mask, &opts).map_err(|e| CliError::stage(4, e))?;
    io::write_model(&dir.join("model.json"), &io::ModelContainer { params, scaler })
        .map_err(|e| CliError::stage(4, e))?;
    io::write_loglik_csv(&dir.join("loglik.csv"), &trace).map_err(|e| CliError::stage(4, e))?;
    println!("wrote model to {}", dir.display());
    Ok(())
}

fn eval_one(
    label: &str,
    manifest: &Path,
    config: &RunConfig,
) -> CliResult<(Vec<MetricsReport>, serde_json::Value)> {
    let (pdm, _) = io::load_cohort(manifest).map_err(|e| CliError::config(e.to_string()))?;
    let e = &config.eval;
    let args = FitArgs {
        latent_dim: e.latent_dim,
        em_iterations: e.em_iterations,
        folds: e.folds,
    };
    let master = config.seed;

    let mut reports = full_sequence_generalization(&pdm, &args, master)
        .map_err(|err| CliError::stage(5, err))?;
    reports.extend(
        partial_sequence_reconstruction(&pdm, &e.mask_fractions, e.trials, &args, master)
            .map_err(|err| CliError::stage(5, err))?,
    );

    // Specificity uses one model fit on every sequence.
    let (scaled, _) = scaled_observations(&pdm);
    let mask = ObservationMask::all_observed(pdm.n_subjects(), pdm.n_timepoints());
    let opts = EmOptions {
        latent_dim: e.latent_dim,
        iterations: e.em_iterations,
        init_seed: seed::derive(master, "em-init"),
        ..Default::default()
    };
    let (params, _) = em_fit(&scaled, &mask, &opts).map_err(|err| CliError::stage(5, err))?;
    reports.push(
        specificity(&params, &scaled, e.specificity_samples, seed::derive(master, "specificity"))
            .map_err(|err| CliError::stage(5, err))?,
    );

    let gen: Vec<f64> = reports
        .iter()
        .filter(|r| r.fold_id.is_some())
        .filter_map(|r| r.overall_rmse)
        .collect();
    let gen_mean = gen.iter().sum::<f64>() / gen.len() as f64;
    let gen_std = (gen.iter().map(|v| (v - gen_mean).powi(2)).sum::<f64>() / gen.len() as f64)
        .sqrt();
    let partial: Vec<f64> = reports
        .iter()
        .filter(|r| r.mask_fraction.is_some())
        .filter_map(|r| r.overall_rmse)
        .collect();
    let partial_mean = partial.iter().sum::<f64>() / partial.len().max(1) as f64;
    let spec_row = reports.iter().find(|r| r.n_samples.is_some()).unwrap();

    let summary = serde_json::json!({
        "approach": label,
        "full_sequence_rmse": gen_mean,
        "full_sequence_std": gen_std,
        "partial_sequence_rmse": partial_mean,
        "specificity": spec_row.overall_rmse,
        "specificity_std": spec_row.overall_std,
    });
    Ok((reports, summary))
}

fn cmd_eval(common: &Common) -> CliResult<()> {
    let config = load_config(common)?;
    let e = &config.eval;
    if e.folds < 2 {
        return Err(CliError::config("eval.folds must be >= 2"));
    }
    for &f in &e.mask_fractions {
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::config(format!("eval.mask_fractions entry {f} not in (0,1)")));
        }
    }
    if common.dry_run {
        return echo_config(&config);
    }
    let manifest = e
        .manifest
        .clone()
        .ok_or_else(|| CliError::config("eval.manifest is required"))?;
    let dir = out_dir(&config)?;
    fs::create_dir_all(&dir)
        .map_err(|err| CliError::config(format!("cannot create {}: {err}", dir.display())))?;

    let (mut reports, proposed) = eval_one("proposed", &manifest, &config)?;
    let mut rows = vec![proposed];
    if let Some(baseline) = &e.baseline_manifest {
        let (baseline_reports, row) = eval_one("baseline", baseline, &config)?;
        reports.extend(baseline_reports);
        rows.push(row);
    }

    io::write_metrics_csv(&dir.join("metrics.csv"), &reports)
        .map_err(|err| CliError::stage(5, err))?;
    let summary = serde_json::json!({ "rows": rows });
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary).unwrap() + "\n")
        .map_err(|err| CliError::stage(5, stssm_core::Error::Io(err)))?;
    println!("wrote metrics to {}", dir.display());
    Ok(())
}

fn cmd_modes(common: &Common) -> CliResult<()> {
    let config = load_config(common)?;
    if config.modes.k == 0 {
        return Err(CliError::config("modes.k must be >= 1"));
    }
    if common.dry_run {
        return echo_config(&config);
    }
    let manifest = config
        .modes
        .manifest
        .clone()
        .ok_or_else(|| CliError::config("modes.manifest is required"))?;
    let (pdm, _) = io::load_cohort(&manifest).map_err(|e| CliError::config(e.to_string()))?;
    let dir = out_dir(&config)?;
    fs::create_dir_all(&dir)
        .map_err(|e| CliError::config(format!("cannot create {}: {e}", dir.display())))?;

    let modes = modes_of_variation(&pdm, config.modes.k).map_err(|e| CliError::stage(5, e))?;
    let mut eig = String::from("mode,eigenvalue\n");
    for (i, lam) in modes.eigenvalues.iter().enumerate() {
        eig.push_str(&format!("{},{}\n", i + 1, lam));
    }
    fs::write(dir.join("eigenvalues.csv"), eig)
        .map_err(|e| CliError::stage(5, stssm_core::Error::Io(e)))?;
    let mean = stssm_core::PointSet::from_flat(&modes.mean_shape)
        .map_err(|e| CliError::stage(5, e))?;
    io::write_particles(&dir.join("mean.particles"), &mean)
        .map_err(|e| CliError::stage(5, e))?;
    for (i, sweep) in modes.sweep.iter().enumerate() {
        for (j, shape) in sweep.iter().enumerate() {
            let ps = stssm_core::PointSet::from_flat(shape).map_err(|e| CliError::stage(5, e))?;
            let name = format!("mode{}_sweep{}.particles", i + 1, j as i64 - 2);
            io::write_particles(&dir.join(name), &ps).map_err(|e| CliError::stage(5, e))?;
        }
    }
    println!("wrote modes to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(common) => cmd_synth(common),
        Command::Optimize { common, resume } => cmd_optimize(common, *resume),
        Command::LdsFit(common) => cmd_lds_fit(common),
        Command::Eval(common) => cmd_eval(common),
        Command::Modes(common) => cmd_modes(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
