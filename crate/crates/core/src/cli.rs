//! Config-driven command-line front end. Every subcommand resolves the
//! layered configuration, checks the standing assumptions, and emits CSV
//! files (plus optional SVG plots) into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{self, ConfigError, ResolvedConfig};
use crate::graph::{
    format_graph_file, laplacian, left_eigenvector, parse_graph_file, GraphError, Laplacian,
    LeftEigenvector,
};
use crate::harness::{
    compare_rules, comparison_csv, generate_measurements, metric_csv, run_ensemble, runs_csv,
    summary_text, sweep_csv, sweep_deltas, sweep_detail_csv, EnsembleConfig, HarnessError,
    RunMetrics,
};
use crate::plot::{log_log_plot, Series};
use crate::protocol::{stage1_run, ProtocolError, UpdateContext};
use crate::quantizer::QuantizerKind;
use crate::spectral::{
    alpha_upper_bound, almost_sure_bound, covariance_budget_cap, ms_bound_stage1, ms_bound_stage2,
    spectral_report, NoiseRegime, SpectralError, DEFAULT_DECAY_HORIZON,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ASSUMPTION: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "quorum-ra",
    version,
    about = "Laboratory for two-stage distributed estimation over digraphs with quantized links"
)]
pub struct Cli {
    /// TOML config file; every key has a default when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory for emitted files.
    #[arg(long, default_value = "results", global = true)]
    pub out: PathBuf,
    /// Dotted key=value config override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Also render SVG plots next to the CSV files.
    #[arg(long, global = true)]
    pub plot: bool,
    /// Exit 0 even when some runs fail; the failures stay in the outputs.
    #[arg(long, global = true)]
    pub allow_failures: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the configured graph (generated or loaded) as a graph file.
    GraphGen,
    /// Validate a graph file and print its spectral summary.
    GraphCheck { file: PathBuf },
    /// Write the spectral report and the bound constants.
    Bounds,
    /// Run stage 1 alone and write the eigenvector estimates.
    Eigvec,
    /// Run the full two-stage ensemble and write every metric.
    Estimate,
    /// Run one ensemble per configured rule and write the comparison table.
    Compare,
    /// Repeat the comparison across the configured step sizes.
    Sweep,
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("stage-1 run failed: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Assumption(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Config(e) => match e {
                ConfigError::Graph(GraphError::NotStronglyConnected) => EXIT_ASSUMPTION,
                _ => EXIT_CONFIG,
            },
            CliError::Harness(e) => match e {
                HarnessError::Graph(GraphError::NotStronglyConnected) => EXIT_ASSUMPTION,
                HarnessError::Spectral(
                    SpectralError::RhoNotLessThanOne { .. } | SpectralError::SingularIminusQ,
                ) => EXIT_ASSUMPTION,
                _ => EXIT_CONFIG,
            },
            CliError::Protocol(_) | CliError::Io(_) | CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Assumption(_) => EXIT_ASSUMPTION,
        }
    }
}

/// Tracks emitted files so a failed invocation leaves no partial output.
struct OutputSession {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl OutputSession {
    fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir)
            .map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, content: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, content)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(path);
        Ok(())
    }

    fn discard(&self) {
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
    }

    fn done(self) -> usize {
        self.files.len()
    }
}

/// Runs a parsed invocation and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::GraphCheck { file } => return graph_check(file),
        _ => {}
    }
    let cfg = config::load(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::GraphGen => graph_gen(cli, &cfg),
        Command::Bounds => bounds(cli, &cfg),
        Command::Eigvec => eigvec(cli, &cfg),
        Command::Estimate => estimate(cli, &cfg),
        Command::Compare => compare(cli, &cfg),
        Command::Sweep => sweep(cli, &cfg),
        Command::GraphCheck { .. } => unreachable!("handled above"),
    }
}

/// Mixing-rate gate shared by every dynamics-running subcommand.
fn check_assumptions(cfg: &ResolvedConfig) -> Result<(Laplacian, LeftEigenvector), CliError> {
    let lap = laplacian(&cfg.ensemble.graph);
    let bounds = alpha_upper_bound(&lap);
    if cfg.ensemble.alpha >= bounds.exact {
        return Err(CliError::Assumption(format!(
            "alpha = {} violates the mixing-stability requirement alpha < {:.6e} \
             (degree-based guarantee: alpha < {:.6e})",
            cfg.ensemble.alpha, bounds.exact, bounds.crude
        )));
    }
    let eig = left_eigenvector(&lap).map_err(|e| match e {
        GraphError::NotStronglyConnected => CliError::Assumption(e.to_string()),
        other => CliError::Config(ConfigError::Graph(other)),
    })?;
    Ok((lap, eig))
}

fn graph_check(file: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(file).map_err(|e| {
        CliError::Config(ConfigError::Io { path: file.display().to_string(), err: e.to_string() })
    })?;
    let graph = parse_graph_file(&text).map_err(|e| match e {
        GraphError::NotStronglyConnected => CliError::Assumption(format!(
            "{}; the protocol requires it on every input graph",
            GraphError::NotStronglyConnected
        )),
        other => CliError::Config(ConfigError::Graph(other)),
    })?;
    let lap = laplacian(&graph);
    let eig = left_eigenvector(&lap).map_err(|e| CliError::Config(ConfigError::Graph(e)))?;
    let bounds = alpha_upper_bound(&lap);
    println!("nodes={}", graph.n());
    println!("edges={}", graph.edge_count());
    println!("unit_weighted={}", graph.is_unit_weighted());
    println!("max_degree={:e}", lap.max_degree);
    println!("alpha_bound_exact={:e}", bounds.exact);
    println!("alpha_bound_crude={:e}", bounds.crude);
    println!("omega_min={:e}", eig.omega.min());
    println!("omega_max={:e}", eig.omega.max());
    println!("omega_residual={:e}", eig.residual);
    println!("strongly_connected=true");
    Ok(())
}

fn graph_gen(cli: &Cli, cfg: &ResolvedConfig) -> Result<(), CliError> {
    let mut out = OutputSession::create(&cli.out)?;
    let g = &cfg.ensemble.graph;
    let text = format_graph_file(g, g.is_unit_weighted());
    out.write("graph.txt", &text)?;
    println!(
        "graph.txt: {} nodes, {} edges ({})",
        g.n(),
        g.edge_count(),
        cfg.graph_source
    );
    out.done();
    Ok(())
}

fn bounds_text(cfg: &EnsembleConfig, lap: &Laplacian, eig: &LeftEigenvector) -> Result<String, CliError> {
    let n = cfg.graph.n();
    let delta = cfg.effective_quant(cfg.rule).delta;
    let mut y_prime = 0.0f64;
    let mut y_double_prime = 0.0f64;
    for run in 0..cfg.runs as u64 {
        let (y, _) = generate_measurements(n, cfg.theta, cfg.sigma, cfg.seed, run);
        let (a, b) = crate::spectral::measurement_magnitudes(&y, &eig.omega);
        y_prime = y_prime.max(a);
        y_double_prime = y_double_prime.max(b);
    }
    let (y0, _) = generate_measurements(n, cfg.theta, cfg.sigma, cfg.seed, 0);
    let mut report = spectral_report(lap, eig, cfg.alpha, delta, &y0, 0.0, DEFAULT_DECAY_HORIZON)
        .map_err(HarnessError::from)?;
    report.set_measurement_magnitudes(y_prime, y_double_prime);

    let ab = alpha_upper_bound(lap);
    let k_far = cfg.steps.max(3);
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    };
    kv("n", n.to_string());
    kv("alpha", format!("{:e}", cfg.alpha));
    kv("alpha_bound_exact", format!("{:e}", ab.exact));
    kv("alpha_bound_crude", format!("{:e}", ab.crude));
    kv("delta", format!("{delta:e}"));
    kv("eta", format!("{:e}", cfg.eta));
    kv("rho_q", format!("{:e}", report.rho_q));
    kv("jordan_q", report.jordan_q.to_string());
    kv("c_q", format!("{:e}", report.c_q));
    kv("c_qn", format!("{:e}", report.c_qn));
    kv("c_q_prime", format!("{:e}", report.c_q_prime));
    kv("norm_q_tilde", format!("{:e}", report.norm_q_tilde));
    kv("norm_l_tilde", format!("{:e}", report.norm_l_tilde));
    kv("nu", format!("{:e}", report.nu));
    kv("mu_zero_noise", format!("{:e}", report.mu));
    kv("y_prime", format!("{y_prime:e}"));
    kv("y_double_prime", format!("{y_double_prime:e}"));
    kv("varpi", format!("{:e}", report.varpi));
    kv("stage1_bound_k500", format!("{:e}", ms_bound_stage1(&report, 500)));
    kv("stage1_bound_k5000", format!("{:e}", ms_bound_stage1(&report, 5000)));
    let s2 = |k: usize| -> Result<String, CliError> {
        Ok(format!("{:e}", ms_bound_stage2(&report, cfg.eta, k).map_err(HarnessError::from)?))
    };
    kv("stage2_bound_k500", s2(500)?);
    kv("stage2_bound_k5000", s2(5000)?);
    let r_u = covariance_budget_cap(n, delta, k_far);
    let r_v = covariance_budget_cap(n, delta, k_far);
    kv("covariance_cap_final", format!("{r_u:e}"));
    for (name, regime) in [
        ("as_bound_both_bounded", NoiseRegime::BothBounded),
        ("as_bound_unbounded_u", NoiseRegime::UnboundedU),
        ("as_bound_unbounded_v", NoiseRegime::UnboundedV),
        ("as_bound_both_unbounded", NoiseRegime::BothUnbounded),
    ] {
        let b = almost_sure_bound(&report, cfg.eta, k_far as f64, regime, r_u, r_v)
            .map_err(HarnessError::from)?;
        kv(name, format!("{:e}{}", b.value, if b.loglog_clamped { " (loglog clamped)" } else { "" }));
    }
    Ok(out)
}

fn bounds(cli: &Cli, cfg: &ResolvedConfig) -> Result<(), CliError> {
    let (lap, eig) = check_assumptions(cfg)?;
    let text = bounds_text(&cfg.ensemble, &lap, &eig)?;
    let mut out = OutputSession::create(&cli.out)?;
    if let Err(e) = out.write("bounds.txt", &text) {
        out.discard();
        return Err(e);
    }
    println!("bounds.txt written to {}", cli.out.display());
    out.done();
    Ok(())
}

fn eigvec(cli: &Cli, cfg: &ResolvedConfig) -> Result<(), CliError> {
    let (lap, eig) = check_assumptions(cfg)?;
    let e = &cfg.ensemble;
    let ctx = UpdateContext::new(e.graph.weights().clone(), lap, e.alpha);
    let quant = e.effective_quant(e.rule);
    let sr = stage1_run(
        &ctx,
        &eig.omega,
        e.rule.update,
        &quant,
        e.kappa,
        e.k0,
        e.steps,
        e.seed,
        0,
    )?;
    let final_z = sr.zbar_scaled.last().expect("stage-1 run has samples");
    let mut nodes = String::from("node,omega_exact,omega_estimate,abs_error\n");
    for i in 0..e.graph.n() {
        let est = final_z[(i, i)];
        nodes.push_str(&format!(
            "{},{:e},{est:e},{:e}\n",
            i + 1,
            eig.omega[i],
            (est - eig.omega[i]).abs()
        ));
    }
    let mut curve = String::from("t,K,error\n");
    for (idx, err) in sr.errors.iter().enumerate() {
        curve.push_str(&format!("{},{},{err:e}\n", e.k0 + 1 + idx, idx + 1));
    }
    let mut out = OutputSession::create(&cli.out)?;
    let result = (|| {
        out.write("eigvec.csv", &nodes)?;
        out.write("stage1_error.csv", &curve)?;
        if cli.plot {
            let pts: Vec<(f64, f64)> =
                sr.errors.iter().enumerate().map(|(i, v)| ((i + 1) as f64, *v)).collect();
            let svg = log_log_plot(
                "stage-1 running-average error",
                "K",
                "Frobenius error",
                &[Series { label: "measured", color: "#1f6fb2", points: pts }],
            );
            out.write("stage1_error.svg", &svg)?;
        }
        Ok(())
    })();
    if let Err(e) = result {
        out.discard();
        return Err(e);
    }
    println!("eigvec.csv, stage1_error.csv written to {}", cli.out.display());
    out.done();
    Ok(())
}

fn metric_points(values: &[f64], k_offset: usize) -> Vec<(f64, f64)> {
    values.iter().enumerate().map(|(i, v)| ((i + 1 + k_offset) as f64, *v)).collect()
}

fn emit_metrics(
    cli: &Cli,
    cfg: &EnsembleConfig,
    metrics: &RunMetrics,
) -> Result<usize, CliError> {
    let mut out = OutputSession::create(&cli.out)?;
    let result = (|| {
        for name in ["mse_z", "mse_zbar", "mse_x", "mse_xbar", "ru", "rv"] {
            if let Some(csv) = metric_csv(cfg, metrics, name) {
                out.write(&format!("{name}.csv"), &csv)?;
            }
        }
        out.write("runs.csv", &runs_csv(metrics))?;
        out.write("summary.txt", &summary_text(cfg, metrics))?;
        if cli.plot {
            let k0_gap = 0;
            let zbar = log_log_plot(
                "stage-1 running-average MSE",
                "K",
                "MSE",
                &[
                    Series {
                        label: "empirical",
                        color: "#1f6fb2",
                        points: metric_points(&metrics.mse_zbar[cfg.k0..], k0_gap),
                    },
                    Series {
                        label: "bound",
                        color: "#c0392b",
                        points: metric_points(&metrics.bound_zbar[cfg.k0..], k0_gap),
                    },
                ],
            );
            out.write("mse_zbar.svg", &zbar)?;
            let xbar = log_log_plot(
                "stage-2 running-average MSE",
                "K",
                "MSE",
                &[
                    Series {
                        label: "empirical",
                        color: "#1f6fb2",
                        points: metric_points(&metrics.mse_xbar, 0),
                    },
                    Series {
                        label: "bound (measured eta)",
                        color: "#c0392b",
                        points: metric_points(&metrics.bound_xbar_measured, 0),
                    },
                    Series {
                        label: "bound (fixed eta)",
                        color: "#e67e22",
                        points: metric_points(&metrics.bound_xbar_fixed, 0),
                    },
                ],
            );
            out.write("mse_xbar.svg", &xbar)?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => Ok(out.done()),
        Err(e) => {
            out.discard();
            Err(e)
        }
    }
}

fn estimate(cli: &Cli, cfg: &ResolvedConfig) -> Result<(), CliError> {
    check_assumptions(cfg)?;
    let metrics = run_ensemble(&cfg.ensemble)?;
    let count = emit_metrics(cli, &cfg.ensemble, &metrics)?;
    println!(
        "{count} files written to {}; {} of {} runs failed",
        cli.out.display(),
        metrics.failures,
        cfg.ensemble.runs
    );
    if metrics.failures > 0 && !cli.allow_failures {
        return Err(CliError::Runtime(format!(
            "{} of {} runs failed (first: run {}: {}); pass --allow-failures to keep going",
            metrics.failures,
            cfg.ensemble.runs,
            metrics.failed_runs[0].0,
            metrics.failed_runs[0].1
        )));
    }
    Ok(())
}

fn compare(cli: &Cli, cfg: &ResolvedConfig) -> Result<(), CliError> {
    check_assumptions(cfg)?;
    let cmp = compare_rules(&cfg.ensemble, &cfg.compare_rules)?;
    let mut out = OutputSession::create(&cli.out)?;
    if let Err(e) = out.write("comparison.csv", &comparison_csv(&cmp)) {
        out.discard();
        return Err(e);
    }
    for row in &cmp.rows {
        println!(
            "{:<8} delta={:<6} mse_last150={} failures={}",
            row.rule.name(),
            row.delta,
            if row.mse_last150.is_nan() { "NaN".into() } else { format!("{:.3e}", row.mse_last150) },
            row.failures
        );
    }
    out.done();
    Ok(())
}

fn sweep(cli: &Cli, cfg: &ResolvedConfig) -> Result<(), CliError> {
    check_assumptions(cfg)?;
    if cfg.ensemble.quant.kind == QuantizerKind::Identity {
        return Err(CliError::Config(ConfigError::Validation(
            "sweep needs a quantizing kind; set quantizer.kind to \"prob\" or \"unif\"".into(),
        )));
    }
    let table = sweep_deltas(&cfg.ensemble, &cfg.sweep_deltas, &cfg.compare_rules)?;
    let mut out = OutputSession::create(&cli.out)?;
    let result = (|| {
        out.write("sweep.csv", &sweep_csv(&table))?;
        out.write("sweep_detail.csv", &sweep_detail_csv(&table))
    })();
    if let Err(e) = result {
        out.discard();
        return Err(e);
    }
    println!(
        "sweep.csv, sweep_detail.csv written to {} ({} step sizes x {} rules)",
        cli.out.display(),
        table.deltas.len(),
        table.rules.len()
    );
    out.done();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn graph_check_maps_connectivity_to_assumption_exit() {
        let dir = std::env::temp_dir().join("quorum-ra-cli-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("disconnected.txt");
        fs::write(&path, "n 3\n1 2\n2 1\n").unwrap();
        let err = graph_check(&path).unwrap_err();
        assert_eq!(err.code(), EXIT_ASSUMPTION);
        assert!(err.to_string().contains("strongly connected"));
        fs::remove_file(&path).unwrap();

        let missing = dir.join("nope.txt");
        let err = graph_check(&missing).unwrap_err();
        assert_eq!(err.code(), EXIT_CONFIG);
    }

    #[test]
    fn alpha_gate_names_the_requirement() {
        let file = config::parse_config_text("alpha = 50.0\n", &[]).unwrap();
        let cfg = config::resolve(&file).unwrap();
        let err = check_assumptions(&cfg).unwrap_err();
        assert_eq!(err.code(), EXIT_ASSUMPTION);
        assert!(err.to_string().contains("mixing-stability"));
    }
}
