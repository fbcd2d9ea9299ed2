//! Command-line driver: forward simulation, single inversions, and full
//! Monte-Carlo experiment reproduction, configured by a TOML file.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::Parser;
use sha2::{Digest, Sha256};

use cableinv::csv::{
    column_names, format_sig, write_field_csv, write_nodes_csv, write_profile_csv,
    write_residuals_csv, write_table_csv, TableRow,
};
use cableinv::{
    add_noise, minimal_error_run, restrict_to_gamma, run_experiment, ConductanceField, Geometry,
    InverseProblem, NoiseSpec, Observation, ObservationDomain, StopReason, TrialSummary,
};

use config::{parse_config, InvertSource, Mode, ResolvedRun};

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_NO_TERMINATION: u8 = 4;

/// Conductance recovery in the passive cable equation: forward solves,
/// minimal-error inversions and Monte-Carlo experiments.
#[derive(Parser, Debug)]
#[command(name = "cableinv", version, subcommand_required = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand, Debug)]
enum Command {
    /// Solve the cable equation for a given conductance and write V.csv.
    Forward(RunArgs),
    /// Recover conductances from observed (or synthesized) voltage data.
    Invert(RunArgs),
    /// Reproduce a full Monte-Carlo noise experiment.
    Experiment(RunArgs),
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// Path to the TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides io.output_dir).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Base RNG seed (overrides noise.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Monte-Carlo trial count (overrides experiment.trials).
    #[arg(long)]
    trials: Option<usize>,
    /// Worker threads for the trial pool (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Suppress the table printed to standard output.
    #[arg(long)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, args) = match &cli.command {
        Command::Forward(a) => (Mode::Forward, a),
        Command::Invert(a) => (Mode::Invert, a),
        Command::Experiment(a) => (Mode::Experiment, a),
    };
    match run(mode, args) {
        Ok(code) => code,
        Err(RunError::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(RunError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

enum RunError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn run(mode: Mode, args: &RunArgs) -> Result<ExitCode, RunError> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("cannot read config {}", args.config.display()))
        .map_err(RunError::Config)?;
    let config_sha = hex_digest(text.as_bytes());
    let config_dir = args
        .config
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut resolved = parse_config(&text, &config_dir).map_err(RunError::Config)?;
    if resolved.mode != mode {
        return Err(RunError::Config(anyhow!(
            "config mode is {:?} but the {:?} subcommand was invoked",
            resolved.mode,
            mode
        )));
    }
    if let Some(out) = &args.output {
        resolved.output_dir = out.clone();
    }
    if let Some(seed) = args.seed {
        resolved.spec.base_seed = seed;
        if let Some(InvertSource::Synthesized { seed: s, .. }) = &mut resolved.invert {
            *s = seed;
        }
    }
    if let Some(trials) = args.trials {
        if trials == 0 {
            return Err(RunError::Config(anyhow!("--trials must be at least 1")));
        }
        resolved.spec.trials = trials;
    }
    if let Some(source) = &resolved.invert {
        if let InvertSource::Csv { path, .. } = source {
            if !path.exists() {
                return Err(RunError::Config(anyhow!("data file not found: {}", path.display())));
            }
        }
    }
    std::fs::create_dir_all(&resolved.output_dir)
        .with_context(|| format!("cannot create {}", resolved.output_dir.display()))
        .map_err(RunError::Runtime)?;

    let pool = {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = args.threads {
            builder = builder.num_threads(n);
        }
        builder.build().map_err(|e| RunError::Runtime(anyhow!("{e}")))
    }?;

    let outcome = pool.install(|| match mode {
        Mode::Forward => cmd_forward(&resolved),
        Mode::Invert => cmd_invert(&resolved, args.quiet),
        Mode::Experiment => cmd_experiment(&resolved, args.quiet),
    });
    let code = outcome.map_err(RunError::Runtime)?;
    write_manifest(&resolved, &config_sha, args).map_err(RunError::Runtime)?;
    Ok(code)
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write_manifest(run: &ResolvedRun, config_sha: &str, args: &RunArgs) -> anyhow::Result<()> {
    #[derive(serde::Serialize)]
    struct Manifest<'a> {
        schema_version: u32,
        version: &'a str,
        mode: &'a str,
        run_name: &'a str,
        config_sha256: &'a str,
        base_seed: u64,
        trials: usize,
        delta_levels: &'a [f64],
        tau: f64,
        max_iter: usize,
        horizon_multiplier: u32,
        cli_seed_override: Option<u64>,
        cli_trials_override: Option<usize>,
    }
    let manifest = Manifest {
        schema_version: config::SCHEMA_VERSION,
        version: env!("CARGO_PKG_VERSION"),
        mode: match run.mode {
            Mode::Forward => "forward",
            Mode::Invert => "invert",
            Mode::Experiment => "experiment",
        },
        run_name: &run.spec.name,
        config_sha256: config_sha,
        base_seed: run.spec.base_seed,
        trials: run.spec.trials,
        delta_levels: &run.spec.delta_levels,
        tau: run.spec.tau,
        max_iter: run.spec.max_iter,
        horizon_multiplier: run.spec.horizon_multiplier,
        cli_seed_override: args.seed,
        cli_trials_override: args.trials,
    };
    let text = toml::to_string_pretty(&manifest)?;
    std::fs::write(run.output_dir.join("manifest.toml"), text)?;
    Ok(())
}

fn ion_suffixes(spec: &cableinv::ExperimentSpec) -> Vec<String> {
    if spec.params.n_ions() == 1 {
        vec![String::new()]
    } else {
        spec.params.ions.iter().map(|i| format!("_{}", i.name)).collect()
    }
}

fn cmd_forward(run: &ResolvedRun) -> anyhow::Result<ExitCode> {
    let spec = &run.spec;
    let truth = (spec.g_true)(&spec.base_tgrid);
    let problem = spec_problem(run, Observation {
        domain: spec.obs,
        values: ndarray::Array2::zeros((spec.base_tgrid.n_steps(), obs_cols(spec))),
    }, 0.0, spec.base_tgrid.clone());
    let v = problem.forward(&truth).map_err(|e| anyhow!("{e}"))?;
    let cols = column_names(&spec.geometry);
    write_field_csv(&run.output_dir.join("V.csv"), &v.values, &spec.base_tgrid, &cols, run.precision)
        .map_err(|e| anyhow!("{e}"))?;
    if let Geometry::Tree(tree) = &spec.geometry {
        write_nodes_csv(&run.output_dir.join("nodes.csv"), tree, run.precision)
            .map_err(|e| anyhow!("{e}"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn obs_cols(spec: &cableinv::ExperimentSpec) -> usize {
    match spec.obs {
        ObservationDomain::FullDomain => spec.geometry.n_nodes(),
        ObservationDomain::Endpoints => 2,
    }
}

fn spec_problem(
    run: &ResolvedRun,
    data: Observation,
    delta: f64,
    tgrid: cableinv::TimeGrid,
) -> InverseProblem {
    let spec = &run.spec;
    InverseProblem {
        params: spec.params.clone(),
        geometry: spec.geometry.clone(),
        tgrid,
        boundary: spec.boundary.clone(),
        data,
        delta,
        tau: spec.tau,
        time_dependent: spec.time_dependent,
        denominator_norm: spec.denominator_norm,
        scheme: spec.scheme,
        clip_negative: spec.clip_negative,
    }
}

fn cmd_invert(run: &ResolvedRun, quiet: bool) -> anyhow::Result<ExitCode> {
    let spec = &run.spec;
    let run_tgrid = spec.run_tgrid().map_err(|e| anyhow!("{e}"))?;
    let (data, delta) = match run.invert.as_ref().expect("invert source") {
        InvertSource::Csv { path, delta } => {
            let (_, values) = cableinv::csv::read_field_csv(path).map_err(|e| anyhow!("{e}"))?;
            let want = (run_tgrid.n_steps(), obs_cols(spec));
            if values.dim() != want {
                bail!(
                    "data file {}: expected {want:?} (rows x cols), found {:?}",
                    path.display(),
                    values.dim()
                );
            }
            (Observation { domain: spec.obs, values }, *delta)
        }
        InvertSource::Synthesized { delta_rel, seed } => {
            let truth = (spec.g_true)(&run_tgrid);
            let shaped = spec_problem(
                run,
                Observation {
                    domain: spec.obs,
                    values: ndarray::Array2::zeros((run_tgrid.n_steps(), obs_cols(spec))),
                },
                0.0,
                run_tgrid.clone(),
            );
            let v = shaped.forward(&truth).map_err(|e| anyhow!("{e}"))?;
            let v_gamma =
                restrict_to_gamma(&v, spec.obs, &spec.geometry).map_err(|e| anyhow!("{e}"))?;
            let noise = NoiseSpec { a: spec.noise_a, b: spec.noise_b, delta_rel: *delta_rel, seed: *seed };
            add_noise(&v_gamma, &noise, &run_tgrid, &spec.geometry)
        }
    };

    let problem = spec_problem(run, data, delta, run_tgrid.clone());
    let g0 = problem.zero_initial_guess();
    let result = minimal_error_run(&problem, g0, spec.max_iter).map_err(|e| anyhow!("{e}"))?;

    let suffixes = ion_suffixes(spec);
    let cols = column_names(&spec.geometry);
    for (i, suffix) in suffixes.iter().enumerate() {
        let path = run.output_dir.join(format!("G_star{suffix}.csv"));
        write_conductance_csv(&path, &result.g_star, i, &run_tgrid, &cols, run.precision)?;
    }
    write_residuals_csv(&run.output_dir.join("residuals.csv"), &result.residual_history, run.precision)
        .map_err(|e| anyhow!("{e}"))?;
    write_invert_summary(run, &result, delta)?;
    if !quiet {
        println!(
            "stopped after k* = {} ({:?}), final residual {} vs tau*delta {}",
            result.k_star,
            result.stop_reason,
            format_sig(*result.residual_history.last().unwrap(), 6),
            format_sig(problem.tau * problem.effective_delta(), 6),
        );
    }
    Ok(if result.stop_reason == StopReason::Discrepancy {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_NO_TERMINATION)
    })
}

fn write_invert_summary(
    run: &ResolvedRun,
    result: &cableinv::InversionResult,
    delta: f64,
) -> anyhow::Result<()> {
    #[derive(serde::Serialize)]
    struct InvertSummary<'a> {
        stop_reason: &'a str,
        k_star: usize,
        delta: f64,
        tau: f64,
        final_residual: f64,
    }
    let text = toml::to_string_pretty(&InvertSummary {
        stop_reason: match result.stop_reason {
            StopReason::Discrepancy => "discrepancy",
            StopReason::MaxIterations => "max_iterations",
            StopReason::StagnantResidual => "stagnant_residual",
        },
        k_star: result.k_star,
        delta,
        tau: run.spec.tau,
        final_residual: *result.residual_history.last().unwrap(),
    })?;
    std::fs::write(run.output_dir.join("inversion.toml"), text)?;
    Ok(())
}

fn write_conductance_csv(
    path: &Path,
    g: &ConductanceField,
    ion: usize,
    tgrid: &cableinv::TimeGrid,
    cols: &[String],
    precision: usize,
) -> anyhow::Result<()> {
    if g.is_time_dependent() {
        write_field_csv(path, g.ion(ion), tgrid, cols, precision).map_err(|e| anyhow!("{e}"))?;
    } else {
        let profile: Vec<f64> = g.ion_row(ion, 0).to_vec();
        write_profile_csv(path, &profile, cols, precision).map_err(|e| anyhow!("{e}"))?;
    }
    Ok(())
}

fn delta_dir_name(delta_rel: f64) -> String {
    format!("delta_{}pct", 100.0 * delta_rel)
}

fn cmd_experiment(run: &ResolvedRun, quiet: bool) -> anyhow::Result<ExitCode> {
    let spec = &run.spec;
    let summaries = run_experiment(spec).map_err(|e| anyhow!("{e}"))?;
    let rows: Vec<TableRow> = summaries
        .iter()
        .map(|s| TableRow {
            delta_rel: s.delta_rel,
            error_g_percent: s.error_g_percent,
            error_v_percent: s.error_v_percent,
            mean_iterations: s.mean_iterations,
            failed_trials: s.failed_trials,
        })
        .collect();
    write_table_csv(&run.output_dir.join("table.csv"), &rows, run.precision)
        .map_err(|e| anyhow!("{e}"))?;
    if !quiet {
        println!("{:<10} {:>14} {:>14} {:>12} {:>8}", "Delta", "Error_G %", "Error_V %", "mean iters", "failed");
        for s in &summaries {
            println!(
                "{:<10} {:>14.6} {:>14.6} {:>12.1} {:>8}",
                format!("{}%", 100.0 * s.delta_rel),
                s.error_g_percent,
                s.error_v_percent,
                s.mean_iterations,
                s.failed_trials
            );
        }
    }
    for summary in &summaries {
        write_summary_fields(run, summary)?;
    }
    let all_failed = summaries.iter().any(|s| s.failed_trials == spec.trials);
    Ok(if all_failed { ExitCode::from(EXIT_RUNTIME) } else { ExitCode::SUCCESS })
}

fn write_summary_fields(run: &ResolvedRun, summary: &TrialSummary) -> anyhow::Result<()> {
    let spec = &run.spec;
    let dir = run.output_dir.join(delta_dir_name(summary.delta_rel));
    std::fs::create_dir_all(&dir)?;
    let cols = column_names(&spec.geometry);
    let tgrid = &spec.base_tgrid;
    let precision = run.precision;

    let v_cols: Vec<String> = match summary.mu_v.domain {
        ObservationDomain::FullDomain => cols.clone(),
        ObservationDomain::Endpoints => vec!["x=0".into(), "x=L".into()],
    };
    write_field_csv(&dir.join("mu_V.csv"), &summary.mu_v.values, tgrid, &v_cols, precision)
        .map_err(|e| anyhow!("{e}"))?;
    write_field_csv(&dir.join("sigma_V.csv"), &summary.sigma_v.values, tgrid, &v_cols, precision)
        .map_err(|e| anyhow!("{e}"))?;
    let diff_v = &summary.v_true.values - &summary.mu_v.values;
    write_field_csv(&dir.join("diff_V.csv"), &diff_v, tgrid, &v_cols, precision)
        .map_err(|e| anyhow!("{e}"))?;

    let suffixes = ion_suffixes(spec);
    if let (Some(mu_g), Some(sigma_g)) = (&summary.mu_g, &summary.sigma_g) {
        for (i, suffix) in suffixes.iter().enumerate() {
            write_conductance_csv(&dir.join(format!("mu_G{suffix}.csv")), mu_g, i, tgrid, &cols, precision)?;
            write_conductance_csv(&dir.join(format!("sigma_G{suffix}.csv")), sigma_g, i, tgrid, &cols, precision)?;
            let diff = ConductanceField::new_dynamic(vec![&summary.g_true.ion(i).view() - &mu_g.ion(i).view()]);
            let diff = if summary.g_true.is_time_dependent() {
                diff
            } else {
                ConductanceField::new_static(vec![diff.ion(0).row(0).to_owned()])
            };
            write_conductance_csv(&dir.join(format!("diff_G{suffix}.csv")), &diff, 0, tgrid, &cols, precision)?;
        }
    }

    // per-edge slices mirroring the paper's per-edge tree figures
    if let Geometry::Tree(tree) = &spec.geometry {
        for (e_idx, edge) in tree.edges().iter().enumerate() {
            let globals: Vec<usize> = (0..edge.n_points).map(|l| tree.global(e_idx, l)).collect();
            let e_cols: Vec<String> =
                (0..edge.n_points).map(|l| format!("s={}", l as f64 * tree.dx())).collect();
            let slice = |m: &ndarray::Array2<f64>| -> ndarray::Array2<f64> {
                ndarray::Array2::from_shape_fn((m.nrows(), globals.len()), |(r, c)| m[[r, globals[c]]])
            };
            write_field_csv(
                &dir.join(format!("mu_V_e{}.csv", edge.id)),
                &slice(&summary.mu_v.values),
                tgrid,
                &e_cols,
                precision,
            )
            .map_err(|e| anyhow!("{e}"))?;
            if let Some(mu_g) = &summary.mu_g {
                for (i, suffix) in suffixes.iter().enumerate() {
                    let sliced = slice(mu_g.ion(i));
                    let path = dir.join(format!("mu_G{suffix}_e{}.csv", edge.id));
                    if mu_g.is_time_dependent() {
                        write_field_csv(&path, &sliced, tgrid, &e_cols, precision)
                            .map_err(|e| anyhow!("{e}"))?;
                    } else {
                        write_profile_csv(&path, sliced.row(0).as_slice().unwrap(), &e_cols, precision)
                            .map_err(|e| anyhow!("{e}"))?;
                    }
                }
            }
        }
    }

    // stopping-rule audit trail
    let mut records = String::from("trial,seed,outcome,k_star,final_residual,threshold,discrepancy_ok\n");
    for r in &summary.records {
        let outcome = match &r.outcome {
            Ok(StopReason::Discrepancy) => "discrepancy".to_string(),
            Ok(StopReason::MaxIterations) => "max_iterations".to_string(),
            Ok(StopReason::StagnantResidual) => "stagnant_residual".to_string(),
            Err(e) => format!("error: {}", e.replace(',', ";")),
        };
        records.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.trial,
            r.seed,
            outcome,
            r.k_star,
            format_sig(r.final_residual, precision),
            format_sig(r.threshold, precision),
            r.discrepancy_ok
        ));
    }
    std::fs::write(dir.join("records.csv"), records)?;
    Ok(())
}
