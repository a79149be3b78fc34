//! Monte-Carlo ensemble driver: fans independent runs across a worker pool,
//! folds their metrics deterministically by run index, and attaches the
//! theoretical bound curves evaluated at both a measured and a fixed η.
//!
//! Aggregation is worker-count independent: runs are collected in index
//! order and every reduction is a sequential fold, so the same config and
//! seed produce bit-identical metrics whether one thread runs or sixteen.

use nalgebra::DVector;
use rayon::prelude::*;
use thiserror::Error;

use crate::graph::{laplacian, left_eigenvector, Digraph, GraphError, Laplacian, LeftEigenvector};
use crate::protocol::{
    measurements, run_experiment, ExperimentSetup, InitMode, ProtocolError, Rule, RunRecord,
    UpdateContext,
};
use crate::quantizer::{QuantizerError, QuantizerKind, QuantizerSpec};
use crate::spectral::{
    covariance_budget_cap, measurement_magnitudes, ms_bound_stage1, ms_bound_stage2,
    spectral_report, RunningCovariance, SpectralError, SpectralReport, DEFAULT_DECAY_HORIZON,
    MIN_COVARIANCE_RUNS,
};

/// Iterations averaged into the tail summary statistic.
pub const SUMMARY_WINDOW: usize = 150;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

/// Resolved experiment description; everything `run_ensemble` needs.
#[derive(Debug, Clone)]
pub struct EnsembleConfig {
    pub graph: Digraph,
    pub theta: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub k0: usize,
    pub t0: usize,
    /// Stage-2 horizon T; stage 1 runs T+1 rounds.
    pub steps: usize,
    pub runs: usize,
    pub seed: u64,
    pub rule: Rule,
    /// Configured quantizer; `Identity` disables quantization for every
    /// rule, any other kind is overridden by the rule's own family.
    pub quant: QuantizerSpec,
    /// Fixed η for the second bound curve.
    pub eta: f64,
    pub init: InitMode,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Whether to run the sequential covariance replay pass.
    pub rstats: bool,
}

impl EnsembleConfig {
    /// Quantizer a rule actually runs with under this config.
    pub fn effective_quant(&self, rule: Rule) -> QuantizerSpec {
        if self.quant.kind == QuantizerKind::Identity {
            QuantizerSpec::identity()
        } else {
            QuantizerSpec { kind: rule.quantizer, delta: self.quant.delta }
        }
    }
}

/// Measurements for one run plus their sample mean, the run's target.
pub fn generate_measurements(
    n: usize,
    theta: f64,
    sigma: f64,
    seed: u64,
    run: u64,
) -> (DVector<f64>, f64) {
    let y = measurements(n, theta, sigma, seed, run);
    let mean = y.sum() / n as f64;
    (y, mean)
}

/// Ensemble aggregates. Curves are pointwise means over the successful
/// runs; failed runs contribute only to the failure tally and keep their
/// slot in the per-run vectors.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    /// Mean (1/n)‖Z(t)/n^κ − 1ωᵀ‖²_F for t = 1..=T+1.
    pub mse_z: Vec<f64>,
    pub mse_zbar: Vec<f64>,
    /// Mean (1/n)‖x(t) − θ̂1‖² for t = t₀+1..=T.
    pub mse_x: Vec<f64>,
    pub mse_xbar: Vec<f64>,
    /// Per-run target θ̂ (sample mean of that run's measurements).
    pub theta_targets: Vec<f64>,
    /// Per-run delivered estimate; None marks a failed run.
    pub theta_estimates: Vec<Option<f64>>,
    pub failures: usize,
    pub failed_runs: Vec<(u64, ProtocolError)>,
    /// Smallest post-warmup diagonal ratio over the ensemble, clamped into
    /// (0, 1) for bound evaluation.
    pub eta_measured: f64,
    /// The same minimum before clamping.
    pub eta_min_raw: f64,
    /// One past the last step any node's ratio sat below the η threshold.
    pub t_eta: usize,
    /// Largest accumulated stage-1 error-row norm over the ensemble.
    pub c_u: f64,
    pub max_conservation_dev: f64,
    pub max_telescoping_rel_dev: f64,
    /// Largest single-step quantization error over the whole ensemble.
    pub max_quant_error: f64,
    /// Mean over successful runs of (estimate − target).
    pub bias_final: f64,
    /// Spectral report with the ensemble measurement envelope applied.
    pub report: SpectralReport,
    /// Stage-1 bound aligned with `mse_zbar`; NaN before averaging opens.
    pub bound_zbar: Vec<f64>,
    /// Stage-2 bounds aligned with `mse_xbar`; NaN where K < 2.
    pub bound_xbar_measured: Vec<f64>,
    pub bound_xbar_fixed: Vec<f64>,
    /// Accumulated covariance spectra from the replay pass, when run.
    pub ru_hat: Option<Vec<f64>>,
    pub rv_hat: Option<Vec<f64>>,
}

/// Runs the configured rule over the whole ensemble.
pub fn run_ensemble(config: &EnsembleConfig) -> Result<RunMetrics, HarnessError> {
    assert!(config.runs >= 1);
    assert!(config.steps > config.k0.max(config.t0) + 2);
    let lap = laplacian(&config.graph);
    let eig = left_eigenvector(&lap)?;
    let setup = ExperimentSetup {
        ctx: UpdateContext::new(config.graph.weights().clone(), lap.clone(), config.alpha),
        omega: eig.omega.clone(),
        alpha: config.alpha,
        kappa: config.kappa,
        k0: config.k0,
        t0: config.t0,
        steps: config.steps,
        theta: config.theta,
        sigma: config.sigma,
        rule: config.rule,
        quant: config.effective_quant(config.rule),
        init: config.init,
        seed: config.seed,
        record_errors: false,
    };

    let records = run_all(&setup, config.runs, config.workers);
    aggregate(config, &lap, &eig, &setup, records)
}

fn run_all(setup: &ExperimentSetup, runs: usize, workers: usize) -> Vec<RunRecord> {
    let job = || {
        (0..runs as u64)
            .into_par_iter()
            .map(|r| run_experiment(setup, r))
            .collect::<Vec<_>>()
    };
    if workers == 0 {
        job()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool");
        pool.install(job)
    }
}

fn aggregate(
    config: &EnsembleConfig,
    lap: &Laplacian,
    eig: &LeftEigenvector,
    setup: &ExperimentSetup,
    records: Vec<RunRecord>,
) -> Result<RunMetrics, HarnessError> {
    let len_z = config.steps + 1;
    let len_x = config.steps - config.t0;
    let mut mse_z = vec![0.0f64; len_z];
    let mut mse_zbar = vec![0.0f64; len_z];
    let mut mse_x = vec![0.0f64; len_x];
    let mut mse_xbar = vec![0.0f64; len_x];

    let mut theta_targets = Vec::with_capacity(records.len());
    let mut theta_estimates = Vec::with_capacity(records.len());
    let mut failed_runs = Vec::new();
    let mut successes = 0usize;
    let mut eta_min_raw = f64::INFINITY;
    let mut t_eta = config.k0 + 1;
    let mut c_u = 0.0f64;
    let mut max_conservation_dev = 0.0f64;
    let mut max_telescoping_rel_dev = 0.0f64;
    let mut max_quant_error = 0.0f64;
    let mut bias_sum = 0.0f64;
    let mut y_prime = 0.0f64;
    let mut y_double_prime = 0.0f64;

    for (idx, rec) in records.iter().enumerate() {
        theta_targets.push(rec.theta_target);
        theta_estimates.push(rec.theta_estimate);
        max_conservation_dev = max_conservation_dev.max(rec.max_conservation_dev);
        max_telescoping_rel_dev = max_telescoping_rel_dev.max(rec.max_telescoping_rel_dev);
        max_quant_error = max_quant_error.max(rec.max_quant_error);
        let (yp, ypp) = measurement_magnitudes(&rec.y, &eig.omega);
        y_prime = y_prime.max(yp);
        y_double_prime = y_double_prime.max(ypp);
        if let Some(err) = &rec.failure {
            failed_runs.push((idx as u64, err.clone()));
            continue;
        }
        successes += 1;
        debug_assert_eq!(rec.mse_z.len(), len_z);
        debug_assert_eq!(rec.mse_x.len(), len_x);
        for (a, b) in mse_z.iter_mut().zip(&rec.mse_z) {
            *a += b;
        }
        for (a, b) in mse_zbar.iter_mut().zip(&rec.mse_zbar) {
            *a += b;
        }
        for (a, b) in mse_x.iter_mut().zip(&rec.mse_x) {
            *a += b;
        }
        for (a, b) in mse_xbar.iter_mut().zip(&rec.mse_xbar) {
            *a += b;
        }
        eta_min_raw = eta_min_raw.min(rec.eta_min);
        t_eta = t_eta.max(rec.t_eta);
        c_u = c_u.max(rec.c_u_max);
        bias_sum += rec.theta_estimate.expect("successful run has an estimate") - rec.theta_target;
    }

    let scale = if successes > 0 { 1.0 / successes as f64 } else { f64::NAN };
    for curve in [&mut mse_z, &mut mse_zbar, &mut mse_x, &mut mse_xbar] {
        for v in curve.iter_mut() {
            *v *= scale;
        }
    }
    let bias_final = if successes > 0 { bias_sum / successes as f64 } else { f64::NAN };

    let eta_measured = if eta_min_raw.is_finite() {
        eta_min_raw.clamp(1e-6, 1.0 - 1e-6)
    } else {
        config.eta
    };

    let mut report = spectral_report(
        lap,
        eig,
        config.alpha,
        setup.quant.delta,
        &records[0].y,
        c_u,
        DEFAULT_DECAY_HORIZON,
    )?;
    report.set_measurement_magnitudes(y_prime, y_double_prime);

    let mut bound_zbar = Vec::with_capacity(len_z);
    for idx in 0..len_z {
        let t = idx + 1;
        bound_zbar.push(if t > config.k0 {
            ms_bound_stage1(&report, t - config.k0)
        } else {
            f64::NAN
        });
    }
    let mut bound_xbar_measured = Vec::with_capacity(len_x);
    let mut bound_xbar_fixed = Vec::with_capacity(len_x);
    for idx in 0..len_x {
        let k = idx + 1;
        if k >= 2 {
            bound_xbar_measured.push(ms_bound_stage2(&report, eta_measured, k)?);
            bound_xbar_fixed.push(ms_bound_stage2(&report, config.eta, k)?);
        } else {
            bound_xbar_measured.push(f64::NAN);
            bound_xbar_fixed.push(f64::NAN);
        }
    }

    let (ru_hat, rv_hat) = if config.rstats {
        replay_covariance(config, setup)?
    } else {
        (None, None)
    };

    Ok(RunMetrics {
        mse_z,
        mse_zbar,
        mse_x,
        mse_xbar,
        theta_targets,
        theta_estimates,
        failures: failed_runs.len(),
        failed_runs,
        eta_measured,
        eta_min_raw,
        t_eta,
        c_u,
        max_conservation_dev,
        max_telescoping_rel_dev,
        max_quant_error,
        bias_final,
        report,
        bound_zbar,
        bound_xbar_measured,
        bound_xbar_fixed,
        ru_hat,
        rv_hat,
    })
}

/// Sequentially re-executes the ensemble with error recording on and feeds
/// each node's per-step quantization errors into accumulated-covariance
/// estimators. Returns None when fewer successful runs completed than the
/// covariance machinery accepts.
fn replay_covariance(
    config: &EnsembleConfig,
    setup: &ExperimentSetup,
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>), HarnessError> {
    let n = setup.ctx.n();
    let mut setup = setup.clone();
    setup.record_errors = true;
    let len1 = config.steps + 1;
    let len2 = config.steps - config.t0;
    let mut cov_u: Vec<RunningCovariance> =
        (0..n).map(|_| RunningCovariance::new(n, len1)).collect();
    let mut cov_v: Vec<RunningCovariance> =
        (0..n).map(|_| RunningCovariance::new(1, len2)).collect();
    let mut recorded = 0usize;
    for r in 0..config.runs as u64 {
        let rec = run_experiment(&setup, r);
        if rec.failure.is_some() {
            continue;
        }
        let s1 = rec.stage1_errors.as_ref().expect("replay records errors");
        let s2 = rec.stage2_errors.as_ref().expect("replay records errors");
        for i in 0..n {
            let trace: Vec<DVector<f64>> = s1.iter().map(|m| m.row(i).transpose()).collect();
            cov_u[i].record_run(&trace);
            let trace: Vec<DVector<f64>> =
                s2.iter().map(|v| DVector::from_element(1, v[i])).collect();
            cov_v[i].record_run(&trace);
        }
        recorded += 1;
    }
    if recorded < MIN_COVARIANCE_RUNS {
        return Ok((None, None));
    }
    let mut ru = vec![0.0f64; len1];
    for cov in &cov_u {
        for (a, b) in ru.iter_mut().zip(cov.prefix_max_eigenvalues()?) {
            *a = a.max(b);
        }
    }
    let mut rv = vec![0.0f64; len2];
    for cov in &cov_v {
        for (a, b) in rv.iter_mut().zip(cov.prefix_max_eigenvalues()?) {
            *a = a.max(b);
        }
    }
    Ok((Some(ru), Some(rv)))
}

/// Mean of the last `SUMMARY_WINDOW` entries (all of them when shorter).
pub fn summary_statistic(curve: &[f64]) -> f64 {
    assert!(!curve.is_empty());
    let w = curve.len().min(SUMMARY_WINDOW);
    curve[curve.len() - w..].iter().sum::<f64>() / w as f64
}

#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub rule: Rule,
    pub delta: f64,
    pub mse_last150: f64,
    pub failures: usize,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub metrics: Vec<RunMetrics>,
}

/// One ensemble per rule under a shared graph, measurements, and seed.
/// A rule whose runs all fail reports NaN for the summary statistic and the
/// failure count carries the information.
pub fn compare_rules(config: &EnsembleConfig, rules: &[Rule]) -> Result<Comparison, HarnessError> {
    let mut rows = Vec::with_capacity(rules.len());
    let mut metrics = Vec::with_capacity(rules.len());
    for &rule in rules {
        let mut c = config.clone();
        c.rule = rule;
        c.rstats = false;
        let m = run_ensemble(&c)?;
        rows.push(ComparisonRow {
            rule,
            delta: c.effective_quant(rule).delta,
            mse_last150: summary_statistic(&m.mse_xbar),
            failures: m.failures,
        });
        metrics.push(m);
    }
    Ok(Comparison { rows, metrics })
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub deltas: Vec<f64>,
    pub rules: Vec<Rule>,
    /// values[d][r]: summary statistic at deltas[d] under rules[r].
    pub values: Vec<Vec<f64>>,
    pub failures: Vec<Vec<usize>>,
}

/// Repeats the rule comparison across a list of step sizes.
pub fn sweep_deltas(
    config: &EnsembleConfig,
    deltas: &[f64],
    rules: &[Rule],
) -> Result<SweepTable, HarnessError> {
    assert!(config.quant.kind != QuantizerKind::Identity);
    let mut values = Vec::with_capacity(deltas.len());
    let mut failures = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let mut c = config.clone();
        c.quant = QuantizerSpec::new(config.quant.kind, delta)?;
        let cmp = compare_rules(&c, rules)?;
        values.push(cmp.rows.iter().map(|r| r.mse_last150).collect());
        failures.push(cmp.rows.iter().map(|r| r.failures).collect());
    }
    Ok(SweepTable { deltas: deltas.to_vec(), rules: rules.to_vec(), values, failures })
}

fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v:e}")
    }
}

/// Shared header of the per-metric CSV files. Both the raw step index t and
/// the running-average sample count K are emitted; K is blank where no
/// average is defined yet.
pub const METRIC_HEADER: &str = "t,K,value,bound_measured_eta,bound_fixed_eta";

/// CSV for one of the four MSE curves or the two covariance statistics.
/// `name` picks the curve; returns None for an unknown name or a statistic
/// the replay pass did not produce.
pub fn metric_csv(config: &EnsembleConfig, metrics: &RunMetrics, name: &str) -> Option<String> {
    let n = config.graph.n();
    let rows: Vec<(usize, Option<usize>, f64, f64, f64)> = match name {
        "mse_z" => (0..metrics.mse_z.len())
            .map(|i| (i + 1, None, metrics.mse_z[i], f64::NAN, f64::NAN))
            .collect(),
        "mse_zbar" => (0..metrics.mse_zbar.len())
            .map(|i| {
                let t = i + 1;
                let k = (t > config.k0).then(|| t - config.k0);
                let b = metrics.bound_zbar[i];
                (t, k, metrics.mse_zbar[i], b, b)
            })
            .collect(),
        "mse_x" => (0..metrics.mse_x.len())
            .map(|i| (config.t0 + 1 + i, None, metrics.mse_x[i], f64::NAN, f64::NAN))
            .collect(),
        "mse_xbar" => (0..metrics.mse_xbar.len())
            .map(|i| {
                (
                    config.t0 + 1 + i,
                    Some(i + 1),
                    metrics.mse_xbar[i],
                    metrics.bound_xbar_measured[i],
                    metrics.bound_xbar_fixed[i],
                )
            })
            .collect(),
        "ru" => {
            let ru = metrics.ru_hat.as_ref()?;
            (0..ru.len())
                .map(|i| {
                    let cap = covariance_budget_cap(n, config.quant.delta, i + 1);
                    (i + 1, Some(i + 1), ru[i], cap, cap)
                })
                .collect()
        }
        "rv" => {
            let rv = metrics.rv_hat.as_ref()?;
            (0..rv.len())
                .map(|i| {
                    let cap = covariance_budget_cap(n, config.quant.delta, i + 1);
                    (config.t0 + 1 + i, Some(i + 1), rv[i], cap, cap)
                })
                .collect()
        }
        _ => return None,
    };
    let mut out = String::from(METRIC_HEADER);
    out.push('\n');
    for (t, k, v, bm, bf) in rows {
        let k = k.map(|k| k.to_string()).unwrap_or_default();
        out.push_str(&format!("{t},{k},{},{},{}\n", cell(v), cell(bm), cell(bf)));
    }
    Some(out)
}

/// Per-run outcomes: target, estimate, and failure coordinates.
pub fn runs_csv(metrics: &RunMetrics) -> String {
    let mut out = String::from("run,theta_target,theta_estimate,failed,failure_node,failure_step\n");
    for run in 0..metrics.theta_targets.len() {
        let failure = metrics
            .failed_runs
            .iter()
            .find(|(r, _)| *r == run as u64)
            .map(|(_, e)| e);
        let (node, step) = match failure {
            Some(ProtocolError::DenominatorUnderflow { node, step, .. })
            | Some(ProtocolError::NonFiniteState { node, step }) => {
                (node.to_string(), step.to_string())
            }
            None => (String::new(), String::new()),
        };
        let est = metrics.theta_estimates[run].map(|e| format!("{e:e}")).unwrap_or_default();
        out.push_str(&format!(
            "{run},{:e},{est},{},{node},{step}\n",
            metrics.theta_targets[run],
            u8::from(failure.is_some()),
        ));
    }
    out
}

fn comparison_value(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else {
        format!("{v:e}")
    }
}

pub fn comparison_csv(cmp: &Comparison) -> String {
    let mut out = String::from("rule,delta,mse_last150,failures\n");
    for row in &cmp.rows {
        out.push_str(&format!(
            "{},{:e},{},{}\n",
            row.rule.name(),
            row.delta,
            comparison_value(row.mse_last150),
            row.failures
        ));
    }
    out
}

/// Wide table: one row per step size, one column per rule.
pub fn sweep_csv(table: &SweepTable) -> String {
    let mut out = String::from("delta");
    for rule in &table.rules {
        out.push(',');
        out.push_str(rule.name());
    }
    out.push('\n');
    for (d, row) in table.deltas.iter().zip(&table.values) {
        out.push_str(&format!("{d:e}"));
        for v in row {
            out.push(',');
            out.push_str(&comparison_value(*v));
        }
        out.push('\n');
    }
    out
}

/// Long form of the sweep with the failure tallies.
pub fn sweep_detail_csv(table: &SweepTable) -> String {
    let mut out = String::from("rule,delta,mse_last150,failures\n");
    for (di, d) in table.deltas.iter().enumerate() {
        for (ri, rule) in table.rules.iter().enumerate() {
            out.push_str(&format!(
                "{},{d:e},{},{}\n",
                rule.name(),
                comparison_value(table.values[di][ri]),
                table.failures[di][ri]
            ));
        }
    }
    out
}

/// Key=value digest of an ensemble.
pub fn summary_text(config: &EnsembleConfig, metrics: &RunMetrics) -> String {
    let est_mean = {
        let vals: Vec<f64> = metrics.theta_estimates.iter().flatten().copied().collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let target_mean =
        metrics.theta_targets.iter().sum::<f64>() / metrics.theta_targets.len() as f64;
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        out.push_str(k);
        out.push('=');
        out.push_str(&v);
        out.push('\n');
    };
    kv("rule", config.rule.name().into());
    kv("n", config.graph.n().to_string());
    kv("runs", config.runs.to_string());
    kv("failures", metrics.failures.to_string());
    kv("steps", config.steps.to_string());
    kv("delta", format!("{:e}", config.effective_quant(config.rule).delta));
    kv("alpha", format!("{:e}", config.alpha));
    kv("kappa", format!("{:e}", config.kappa));
    kv("theta", format!("{:e}", config.theta));
    kv("sigma", format!("{:e}", config.sigma));
    kv("theta_target_mean", format!("{target_mean:e}"));
    kv("theta_estimate_mean", comparison_value(est_mean));
    kv("bias_final", comparison_value(metrics.bias_final));
    kv("eta_measured", format!("{:e}", metrics.eta_measured));
    kv("eta_min_raw", comparison_value(metrics.eta_min_raw));
    kv("t_eta", metrics.t_eta.to_string());
    kv("c_u", format!("{:e}", metrics.c_u));
    kv("max_conservation_dev", format!("{:e}", metrics.max_conservation_dev));
    kv("max_telescoping_rel_dev", format!("{:e}", metrics.max_telescoping_rel_dev));
    kv("max_quant_error", format!("{:e}", metrics.max_quant_error));
    kv("mse_xbar_last", comparison_value(*metrics.mse_xbar.last().unwrap()));
    kv("mse_xbar_last150", comparison_value(summary_statistic(&metrics.mse_xbar)));
    kv("rho_q", format!("{:e}", metrics.report.rho_q));
    kv("jordan_q", metrics.report.jordan_q.to_string());
    kv("nu", format!("{:e}", metrics.report.nu));
    kv("mu", format!("{:e}", metrics.report.mu));
    kv("varpi", format!("{:e}", metrics.report.varpi));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{metropolis_weights, random_strongly_connected};
    use crate::protocol::run_experiment;

    fn test_graph() -> Digraph {
        let g = random_strongly_connected(12, 0.2, 1);
        metropolis_weights(
            12,
            &g.edges().iter().map(|&(f, t, _)| (f, t)).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    fn base_config(steps: usize, runs: usize) -> EnsembleConfig {
        EnsembleConfig {
            graph: test_graph(),
            theta: 2.0,
            sigma: 1.0,
            alpha: 1.0,
            kappa: 1.15,
            k0: 25,
            t0: 25,
            steps,
            runs,
            seed: 42,
            rule: "prob-ra".parse().unwrap(),
            quant: QuantizerSpec::new(QuantizerKind::Probabilistic, 1.0).unwrap(),
            eta: 0.9,
            init: InitMode::Measurement,
            workers: 0,
            rstats: false,
        }
    }

    #[test]
    fn measurements_have_exact_sample_mean_target() {
        let (y, mean) = generate_measurements(12, 2.0, 1.0, 9, 3);
        assert_eq!(y.len(), 12);
        assert!((y.sum() / 12.0 - mean).abs() < 1e-15);
        let (y2, _) = generate_measurements(12, 2.0, 1.0, 9, 3);
        assert_eq!(y, y2);
        assert!((mean - 2.0).abs() < 3.0 / 12f64.sqrt() * 4.0);
    }

    #[test]
    fn zero_noise_measurements_equal_theta() {
        let (y, mean) = generate_measurements(8, 2.0, 0.0, 5, 0);
        assert_eq!(mean, 2.0);
        assert!(y.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn single_run_ensemble_reproduces_the_run() {
        let config = base_config(120, 1);
        let m = run_ensemble(&config).unwrap();
        let lap = laplacian(&config.graph);
        let eig = left_eigenvector(&lap).unwrap();
        let setup = ExperimentSetup {
            ctx: UpdateContext::new(config.graph.weights().clone(), lap, config.alpha),
            omega: eig.omega,
            alpha: config.alpha,
            kappa: config.kappa,
            k0: config.k0,
            t0: config.t0,
            steps: config.steps,
            theta: config.theta,
            sigma: config.sigma,
            rule: config.rule,
            quant: config.effective_quant(config.rule),
            init: config.init,
            seed: config.seed,
            record_errors: false,
        };
        let rec = run_experiment(&setup, 0);
        assert_eq!(m.mse_z, rec.mse_z);
        assert_eq!(m.mse_xbar, rec.mse_xbar);
        assert_eq!(m.theta_estimates, vec![rec.theta_estimate]);
        assert_eq!(m.failures, 0);
    }

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn worker_count_does_not_change_metrics() {
        let mut config = base_config(150, 12);
        config.workers = 1;
        let a = run_ensemble(&config).unwrap();
        config.workers = 8;
        let b = run_ensemble(&config).unwrap();
        assert_eq!(bits(&a.mse_z), bits(&b.mse_z));
        assert_eq!(bits(&a.mse_zbar), bits(&b.mse_zbar));
        assert_eq!(bits(&a.mse_x), bits(&b.mse_x));
        assert_eq!(bits(&a.mse_xbar), bits(&b.mse_xbar));
        assert_eq!(a.theta_estimates, b.theta_estimates);
        assert_eq!(a.eta_measured, b.eta_measured);
        assert_eq!(a.c_u, b.c_u);
        assert_eq!(bits(&a.bound_xbar_measured), bits(&b.bound_xbar_measured));
    }

    #[test]
    fn averaged_error_decays_down_the_horizon() {
        let mut config = base_config(2030, 20);
        config.runs = 20;
        let m = run_ensemble(&config).unwrap();
        assert_eq!(m.failures, 0);
        // K indices are 1-based: entry K-1.
        assert!(m.mse_xbar[1999] < m.mse_xbar[199]);
        assert!(m.max_quant_error <= config.quant.delta + 1e-12);
    }

    #[test]
    fn bound_curves_dominate_the_tail_at_test_scale() {
        let mut config = base_config(1030, 40);
        config.rstats = true;
        let m = run_ensemble(&config).unwrap();
        assert_eq!(m.failures, 0);
        // Stage-1 bound from K = 100 on, both η variants for stage 2.
        for k in 100..=1000 {
            let idx = config.k0 + k - 1;
            assert!(
                m.mse_zbar[idx] <= m.bound_zbar[idx],
                "stage-1 bound crossed at K={k}"
            );
        }
        for k in 100..config.steps - config.t0 {
            assert!(m.mse_xbar[k] <= m.bound_xbar_measured[k]);
            assert!(m.mse_xbar[k] <= m.bound_xbar_fixed[k]);
        }
        let ru = m.ru_hat.as_ref().unwrap();
        let n = config.graph.n();
        for (i, v) in ru.iter().enumerate() {
            let cap = covariance_budget_cap(n, config.quant.delta, i + 1);
            assert!(*v <= cap * 1.05, "covariance budget crossed at K={}", i + 1);
            if i > 0 {
                assert!(*v >= ru[i - 1] - 1e-12);
            }
        }
        assert!(m.rv_hat.is_some());
    }

    #[test]
    fn ensemble_bias_sits_inside_the_monte_carlo_gate() {
        let config = base_config(1030, 40);
        let m = run_ensemble(&config).unwrap();
        let k_final = config.steps - config.t0;
        let gate = ms_bound_stage2(&m.report, m.eta_measured, k_final).unwrap();
        assert!(m.bias_final.abs() < 3.0 * (gate / config.runs as f64).sqrt());
    }

    #[test]
    fn identity_quantizer_collapses_compensating_variants() {
        let mut config = base_config(400, 5);
        config.quant = QuantizerSpec::identity();
        let rules: Vec<Rule> =
            ["prob-ra", "prob", "unif"].iter().map(|s| s.parse().unwrap()).collect();
        let cmp = compare_rules(&config, &rules).unwrap();
        // Raw-feed arms run bit-identical trajectories; the averaged-feed arm
        // differs only through its correction feed, far below noise scale.
        assert_eq!(cmp.rows[1].mse_last150, cmp.rows[2].mse_last150);
        assert_eq!(cmp.metrics[1].mse_x, cmp.metrics[2].mse_x);
        let rel = (cmp.rows[0].mse_last150 - cmp.rows[1].mse_last150).abs()
            / cmp.rows[1].mse_last150.max(1e-300);
        assert!(rel < 1e-3, "relative gap {rel:e}");
        for row in &cmp.rows {
            assert_eq!(row.failures, 0);
        }
    }

    #[test]
    fn comparison_orders_rules_at_moderate_step_size() {
        let mut config = base_config(800, 20);
        config.quant = QuantizerSpec::new(QuantizerKind::Probabilistic, 0.2).unwrap();
        let rules: Vec<Rule> = ["prob-ra", "prob", "pq-ra"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        let cmp = compare_rules(&config, &rules).unwrap();
        assert!(cmp.rows[0].mse_last150 < cmp.rows[1].mse_last150);
        assert!(cmp.rows[0].mse_last150 < cmp.rows[2].mse_last150);
    }

    #[test]
    fn totally_quantized_rule_reports_failures_at_unit_step() {
        let mut config = base_config(600, 20);
        config.rule = "tq-ra".parse().unwrap();
        let m = run_ensemble(&config).unwrap();
        assert!(m.failures > 0, "expected underflow failures, got none");
        assert_eq!(m.failed_runs.len(), m.failures);
        for (run, err) in &m.failed_runs {
            assert!(*run < config.runs as u64);
            assert!(matches!(
                err,
                ProtocolError::DenominatorUnderflow { .. } | ProtocolError::NonFiniteState { .. }
            ));
        }
    }

    #[test]
    fn sweep_table_covers_every_delta_rule_pair() {
        let mut config = base_config(400, 4);
        let rules: Vec<Rule> = ["prob-ra", "prob"].iter().map(|s| s.parse().unwrap()).collect();
        config.runs = 4;
        let table = sweep_deltas(&config, &[0.5, 1.0], &rules).unwrap();
        assert_eq!(table.values.len(), 2);
        assert_eq!(table.values[0].len(), 2);
        let csv = sweep_csv(&table);
        assert!(csv.starts_with("delta,prob-ra,prob\n"));
        assert_eq!(csv.lines().count(), 3);
        let detail = sweep_detail_csv(&table);
        assert_eq!(detail.lines().count(), 5);
    }

    #[test]
    fn metric_csv_rows_follow_the_shared_schema() {
        let mut config = base_config(200, 30);
        config.rstats = true;
        let m = run_ensemble(&config).unwrap();
        let csv = metric_csv(&config, &m, "mse_zbar").unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), METRIC_HEADER);
        assert_eq!(csv.lines().count(), config.steps + 2);
        // Row t = k0 has no K yet; row t = k0+1 opens at K = 1.
        let row: Vec<&str> = csv.lines().nth(config.k0).unwrap().split(',').collect();
        assert_eq!(row[0], config.k0.to_string());
        assert_eq!(row[1], "");
        assert_eq!(row[3], "");
        let row: Vec<&str> = csv.lines().nth(config.k0 + 1).unwrap().split(',').collect();
        assert_eq!(row[1], "1");
        assert!(row[2].parse::<f64>().is_ok());
        assert!(row[3].parse::<f64>().is_ok());
        assert_eq!(row[3], row[4]);

        let csv = metric_csv(&config, &m, "mse_xbar").unwrap();
        assert_eq!(csv.lines().count(), config.steps - config.t0 + 1);
        let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
        assert_eq!(row[0], (config.t0 + 1).to_string());
        assert_eq!(row[1], "1");
        assert_eq!(row[3], "");
        let row: Vec<&str> = csv.lines().nth(2).unwrap().split(',').collect();
        assert!(row[3].parse::<f64>().is_ok());
        assert!(row[4].parse::<f64>().is_ok());

        for name in ["mse_z", "mse_x", "ru", "rv"] {
            let csv = metric_csv(&config, &m, name).unwrap();
            assert_eq!(csv.lines().next().unwrap(), METRIC_HEADER);
            for line in csv.lines().skip(1) {
                assert_eq!(line.split(',').count(), 5);
            }
        }
        assert!(metric_csv(&config, &m, "nonsense").is_none());

        let runs = runs_csv(&m);
        assert_eq!(runs.lines().count(), config.runs + 1);
        let cmp = comparison_csv(&Comparison {
            rows: vec![ComparisonRow {
                rule: config.rule,
                delta: 1.0,
                mse_last150: f64::NAN,
                failures: 3,
            }],
            metrics: Vec::new(),
        });
        assert!(cmp.contains("prob-ra,1e0,NaN,3"));

        let text = summary_text(&config, &m);
        assert!(text.contains("rule=prob-ra"));
        assert!(text.contains("failures=0"));
        for line in text.lines() {
            assert_eq!(line.split('=').count(), 2);
        }
    }
}
