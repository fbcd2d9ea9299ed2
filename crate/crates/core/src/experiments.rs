//! Monte-Carlo harness: additive-multiplicative noise synthesis, trial
//! statistics, the paper's error metrics, and the four built-in examples.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::ConductanceField;
use crate::forward::{default_current, stimulus_neumann, BoundaryProtocol, Scheme, TreeBoundary};
use crate::grid::{build_segment_grid, Geometry, TimeGrid};
use crate::inverse::{
    minimal_error_run, DenominatorNorm, InverseProblem, ProblemBoundary, StopReason,
};
use crate::observation::{gamma_norm, Observation, ObservationDomain};
use crate::params::{CableParameters, Ion};
use crate::tree::paper_y_tree;

/// Additive-multiplicative noise V^d = V + (aV + b) rand_Delta with
/// rand_Delta i.i.d. uniform on [-Delta, Delta].
#[derive(Clone, Debug)]
pub struct NoiseSpec {
    pub a: f64,
    pub b: f64,
    pub delta_rel: f64,
    pub seed: u64,
}

/// Draws the perturbation and returns (noisy data, delta) with the noise
/// level calibrated as delta = ||aV + b||_{l2(Gamma)} * Delta.
pub fn add_noise(
    v_gamma: &Observation,
    spec: &NoiseSpec,
    tgrid: &TimeGrid,
    geometry: &Geometry,
) -> (Observation, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let amplitude = Observation {
        domain: v_gamma.domain,
        values: v_gamma.values.mapv(|v| spec.a * v + spec.b),
    };
    let delta = gamma_norm(&amplitude, tgrid, geometry) * spec.delta_rel;
    let mut noisy = v_gamma.values.clone();
    for (out, amp) in noisy.iter_mut().zip(amplitude.values.iter()) {
        let u: f64 = rng.gen();
        *out += amp * spec.delta_rel * (2.0 * u - 1.0);
    }
    (Observation { domain: v_gamma.domain, values: noisy }, delta)
}

/// Pointwise population mean and standard deviation (divisor M).
pub fn mean_std(fields: &[Array2<f64>]) -> Result<(Array2<f64>, Array2<f64>)> {
    let m = fields.len();
    if m == 0 {
        return Err(Error::Invalid("mean_std needs at least one field".into()));
    }
    let dim = fields[0].dim();
    if fields.iter().any(|f| f.dim() != dim) {
        return Err(Error::Shape("mean_std fields differ in shape".into()));
    }
    let mut mu = Array2::zeros(dim);
    for f in fields {
        mu += f;
    }
    mu.mapv_inplace(|v| v / m as f64);
    let mut var = Array2::zeros(dim);
    for f in fields {
        var += &(f - &mu).mapv(|d| d * d);
    }
    var.mapv_inplace(|v| (v / m as f64).sqrt());
    Ok((mu, var))
}

/// Mean-absolute-percentage error of a recovered conductance against the
/// truth, with the paper's weights: (T/N)(node weight) for time-dependent
/// fields and (node weight) alone for static ones, averaged over ions.
/// `averaged` replaces the measure weights by plain sample averaging.
pub fn error_g(
    g_true: &ConductanceField,
    mu_g: &ConductanceField,
    tgrid: &TimeGrid,
    geometry: &Geometry,
    averaged: bool,
) -> Result<f64> {
    if g_true.n_ions() != mu_g.n_ions()
        || g_true.is_time_dependent() != mu_g.is_time_dependent()
        || g_true.ion(0).dim() != mu_g.ion(0).dim()
    {
        return Err(Error::Shape("error_g needs matching conductance shapes".into()));
    }
    let (rows, nodes) = g_true.ion(0).dim();
    let weight = if averaged {
        1.0 / (rows * nodes) as f64
    } else if g_true.is_time_dependent() {
        tgrid.t_final() / tgrid.n_steps() as f64 * geometry.node_weight()
    } else {
        geometry.node_weight()
    };
    let mut total = 0.0;
    for i in 0..g_true.n_ions() {
        let gt = g_true.ion(i);
        let mu = mu_g.ion(i);
        for n in 0..rows {
            for j in 0..nodes {
                let t = gt[[n, j]];
                if t == 0.0 {
                    return Err(Error::Invalid(format!(
                        "error_g division by zero: G_true is zero at ion {i}, time row {n}, node {j}"
                    )));
                }
                total += (t - mu[[n, j]]).abs() / t.abs();
            }
        }
    }
    Ok(total * weight / g_true.n_ions() as f64 * 100.0)
}

/// Mean-absolute-percentage error of the mean measured voltage against the
/// exact one over Gamma, excluding samples where the exact voltage is zero
/// (the t = 0 row under the paper's resting start). Returns the error and
/// the excluded-sample count.
pub fn error_v(
    v_true: &Observation,
    mu_v: &Observation,
    tgrid: &TimeGrid,
    geometry: &Geometry,
    averaged: bool,
) -> Result<(f64, usize)> {
    if v_true.domain != mu_v.domain || v_true.values.dim() != mu_v.values.dim() {
        return Err(Error::Shape("error_v needs matching observations".into()));
    }
    let tw = tgrid.t_final() / tgrid.n_steps() as f64;
    let (rows, cols) = v_true.values.dim();
    let weight = if averaged {
        1.0 / (rows * cols) as f64
    } else {
        match v_true.domain {
            ObservationDomain::FullDomain => tw * geometry.node_weight(),
            ObservationDomain::Endpoints => 0.5 * tw,
        }
    };
    let mut total = 0.0;
    let mut excluded = 0usize;
    for (t, m) in v_true.values.iter().zip(mu_v.values.iter()) {
        if *t == 0.0 {
            excluded += 1;
        } else {
            total += (t - m).abs() / t.abs();
        }
    }
    Ok((total * weight * 100.0, excluded))
}

/// Builds the ground-truth conductance on the (possibly horizon-extended)
/// run grid.
pub type TruthFn = Arc<dyn Fn(&TimeGrid) -> ConductanceField + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExampleId {
    Ex31,
    Ex32,
    Ex33,
    Ex34,
}

impl std::str::FromStr for ExampleId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ex3.1" | "ex31" => Ok(ExampleId::Ex31),
            "ex3.2" | "ex32" => Ok(ExampleId::Ex32),
            "ex3.3" | "ex33" => Ok(ExampleId::Ex33),
            "ex3.4" | "ex34" => Ok(ExampleId::Ex34),
            other => Err(Error::Invalid(format!("unknown example id {other:?}"))),
        }
    }
}

/// A full Monte-Carlo experiment: ground truth, noise plan and the inverse
/// problem settings shared by all trials.
#[derive(Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub params: CableParameters,
    pub geometry: Geometry,
    pub base_tgrid: TimeGrid,
    pub horizon_multiplier: u32,
    pub boundary: ProblemBoundary,
    pub obs: ObservationDomain,
    pub g_true: TruthFn,
    pub time_dependent: bool,
    pub scheme: Scheme,
    pub tau: f64,
    pub max_iter: usize,
    pub denominator_norm: DenominatorNorm,
    pub clip_negative: bool,
    pub noise_a: f64,
    pub noise_b: f64,
    pub delta_levels: Vec<f64>,
    pub trials: usize,
    pub base_seed: u64,
}

impl ExperimentSpec {
    pub fn run_tgrid(&self) -> Result<TimeGrid> {
        self.base_tgrid.extended(self.horizon_multiplier)
    }
}

fn sigmoid(s: f64, base: f64, amp: f64, center: f64) -> f64 {
    base + amp / (1.0 + ((center - s) / 0.01).exp())
}

fn section3_params(ions: Vec<Ion>) -> CableParameters {
    CableParameters {
        c_m: 1.0,
        fiber_radius: 0.0238,
        axial_resistivity: 34.5,
        g_leak: 0.3,
        e_leak: 10.613,
        ions,
    }
}

pub const DEFAULT_SEED: u64 = 20200512;
pub const DEFAULT_DELTA_LEVELS: [f64; 4] = [0.25, 0.05, 0.01, 0.002];

/// The four worked examples with the physical constants of the paper's
/// numerical section.
pub fn builtin_example(id: ExampleId) -> Result<ExperimentSpec> {
    let common_tau = 1.01;
    let common_iters = 100_000;
    match id {
        ExampleId::Ex31 | ExampleId::Ex32 | ExampleId::Ex33 => {
            let xg = build_segment_grid(0.1, 0.001)?;
            let tg = TimeGrid::from_step(20.0, 0.2)?;
            let (name, ions, obs, time_dependent, horizon) = match id {
                ExampleId::Ex31 => ("ex3.1", vec![Ion::new("K", -12.0)], ObservationDomain::Endpoints, false, 1),
                ExampleId::Ex32 => ("ex3.2", vec![Ion::new("K", -12.0)], ObservationDomain::FullDomain, true, 2),
                _ => (
                    "ex3.3",
                    vec![Ion::new("K", -12.0), Ion::new("Na", 115.0)],
                    ObservationDomain::FullDomain,
                    false,
                    1,
                ),
            };
            let params = section3_params(ions);
            let xs: Vec<f64> = xg.nodes().collect();
            let g_true: TruthFn = match id {
                ExampleId::Ex31 => {
                    let xs = xs.clone();
                    Arc::new(move |_tg: &TimeGrid| {
                        ConductanceField::new_static(vec![Array1::from_iter(
                            xs.iter().map(|&x| sigmoid(x, 0.2, 0.2, 0.05)),
                        )])
                    })
                }
                ExampleId::Ex32 => {
                    let xs = xs.clone();
                    Arc::new(move |tg: &TimeGrid| {
                        let mut field = Array2::zeros((tg.n_steps(), xs.len()));
                        for n in 0..tg.n_steps() {
                            let t = tg.node(n);
                            for (j, &x) in xs.iter().enumerate() {
                                field[[n, j]] = sigmoid(x, 0.2, 0.2, 0.05) + t + 1.0;
                            }
                        }
                        ConductanceField::new_dynamic(vec![field])
                    })
                }
                _ => {
                    let xs = xs.clone();
                    Arc::new(move |_tg: &TimeGrid| {
                        ConductanceField::new_static(vec![
                            Array1::from_iter(xs.iter().map(|&x| sigmoid(x, 0.2, 0.2, 0.05))),
                            Array1::from_iter(xs.iter().map(|&x| sigmoid(x, 0.1, 0.1, 0.05))),
                        ])
                    })
                }
            };
            let boundary = ProblemBoundary::Segment(BoundaryProtocol::current_injection(&params, default_current));
            Ok(ExperimentSpec {
                name: name.into(),
                params,
                geometry: Geometry::Segment(xg),
                base_tgrid: tg,
                horizon_multiplier: horizon,
                boundary,
                obs,
                g_true,
                time_dependent,
                scheme: Scheme::Implicit,
                tau: common_tau,
                max_iter: common_iters,
                denominator_norm: DenominatorNorm::LInf,
                clip_negative: false,
                noise_a: 0.5,
                noise_b: 0.5,
                delta_levels: DEFAULT_DELTA_LEVELS.to_vec(),
                trials: 50,
                base_seed: DEFAULT_SEED,
            })
        }
        ExampleId::Ex34 => {
            let tree = paper_y_tree(0.01)?;
            let tg = TimeGrid::from_step(20.0, 0.01)?;
            let params = section3_params(vec![Ion::new("K", -12.0)]);
            let truth_tree = tree.clone();
            let g_true: TruthFn = Arc::new(move |_tg: &TimeGrid| {
                let mut profile = Array1::zeros(truth_tree.n_global());
                for g_idx in 0..truth_tree.n_global() {
                    let (e_idx, s) = truth_tree.node_arclength(g_idx);
                    profile[g_idx] = if e_idx == 0 {
                        sigmoid(s, 0.2, 0.2, 0.05)
                    } else {
                        sigmoid(s, 0.2, 0.2, 0.05 - 0.01)
                    };
                }
                ConductanceField::new_static(vec![profile])
            });
            let boundary = ProblemBoundary::Tree(TreeBoundary {
                fluxes: vec![(1, stimulus_neumann(&params, default_current))],
                initial: Arc::new(|_, _| 0.0),
            });
            Ok(ExperimentSpec {
                name: "ex3.4".into(),
                params,
                geometry: Geometry::Tree(tree),
                base_tgrid: tg,
                horizon_multiplier: 1,
                boundary,
                obs: ObservationDomain::FullDomain,
                g_true,
                time_dependent: false,
                scheme: Scheme::Explicit,
                tau: common_tau,
                max_iter: common_iters,
                denominator_norm: DenominatorNorm::LInf,
                clip_negative: false,
                noise_a: 0.5,
                noise_b: 0.5,
                delta_levels: DEFAULT_DELTA_LEVELS.to_vec(),
                trials: 50,
                base_seed: DEFAULT_SEED,
            })
        }
    }
}

/// One trial's bookkeeping for the stopping-rule audit.
#[derive(Clone, Debug)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub outcome: std::result::Result<StopReason, String>,
    pub k_star: usize,
    pub final_residual: f64,
    pub threshold: f64,
    /// Eq. 7 audit: last residual <= tau*delta and all earlier ones above it.
    pub discrepancy_ok: bool,
}

/// Per-noise-level aggregate over the Monte-Carlo trials.
#[derive(Clone, Debug)]
pub struct TrialSummary {
    pub delta_rel: f64,
    pub delta_abs: f64,
    pub mu_g: Option<ConductanceField>,
    pub sigma_g: Option<ConductanceField>,
    pub mu_v: Observation,
    pub sigma_v: Observation,
    pub g_true: ConductanceField,
    pub v_true: Observation,
    pub error_g_percent: f64,
    pub error_v_percent: f64,
    pub error_g_averaged: f64,
    pub error_v_averaged: f64,
    pub excluded_v_samples: usize,
    pub mean_iterations: f64,
    pub failed_trials: usize,
    pub records: Vec<TrialRecord>,
}

struct TrialOutcome {
    noisy: Observation,
    record: TrialRecord,
    g_star: Option<ConductanceField>,
}

fn run_trial(
    spec: &ExperimentSpec,
    run_tgrid: &TimeGrid,
    v_gamma: &Observation,
    delta_rel: f64,
    trial: usize,
) -> TrialOutcome {
    let seed = spec.base_seed.wrapping_add(trial as u64);
    let noise = NoiseSpec { a: spec.noise_a, b: spec.noise_b, delta_rel, seed };
    let (noisy, delta) = add_noise(v_gamma, &noise, run_tgrid, &spec.geometry);
    debug_assert!({
        let diff = noisy.sub(v_gamma).expect("same shape");
        gamma_norm(&diff, run_tgrid, &spec.geometry) <= delta * (1.0 + 1e-12)
    });
    let problem = InverseProblem {
        params: spec.params.clone(),
        geometry: spec.geometry.clone(),
        tgrid: run_tgrid.clone(),
        boundary: spec.boundary.clone(),
        data: noisy.clone(),
        delta,
        tau: spec.tau,
        time_dependent: spec.time_dependent,
        denominator_norm: spec.denominator_norm,
        scheme: spec.scheme,
        clip_negative: spec.clip_negative,
    };
    let threshold = problem.tau * problem.effective_delta();
    match minimal_error_run(&problem, problem.zero_initial_guess(), spec.max_iter) {
        Ok(res) => {
            let hist = &res.residual_history;
            let discrepancy_ok = res.stop_reason == StopReason::Discrepancy
                && hist.last().is_some_and(|&r| r <= threshold)
                && hist[..hist.len() - 1].iter().all(|&r| r > threshold);
            TrialOutcome {
                noisy,
                record: TrialRecord {
                    trial,
                    seed,
                    outcome: Ok(res.stop_reason),
                    k_star: res.k_star,
                    final_residual: *hist.last().expect("nonempty history"),
                    threshold,
                    discrepancy_ok,
                },
                g_star: Some(res.g_star),
            }
        }
        Err(e) => TrialOutcome {
            noisy,
            record: TrialRecord {
                trial,
                seed,
                outcome: Err(e.to_string()),
                k_star: 0,
                final_residual: f64::NAN,
                threshold,
                discrepancy_ok: false,
            },
            g_star: None,
        },
    }
}

/// Runs the full Monte-Carlo protocol: synthesize the ground truth once,
/// then for every noise level draw `trials` independent data sets, invert
/// each, and aggregate the statistics of Eq. for the mean/std together with
/// the error metrics on the base (reporting) window.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<TrialSummary>> {
    let run_tgrid = spec.run_tgrid()?;
    let g_true = (spec.g_true)(&run_tgrid);
    let problem_shape_rows = run_tgrid.n_steps();
    g_true.validate_for(spec.params.n_ions(), spec.geometry.n_nodes(), problem_shape_rows)?;
    let v_true = {
        let problem = InverseProblem {
            params: spec.params.clone(),
            geometry: spec.geometry.clone(),
            tgrid: run_tgrid.clone(),
            boundary: spec.boundary.clone(),
            data: Observation {
                domain: spec.obs,
                values: Array2::zeros((
                    run_tgrid.n_steps(),
                    match spec.obs {
                        ObservationDomain::FullDomain => spec.geometry.n_nodes(),
                        ObservationDomain::Endpoints => 2,
                    },
                )),
            },
            delta: 0.0,
            tau: spec.tau,
            time_dependent: spec.time_dependent,
            denominator_norm: spec.denominator_norm,
            scheme: spec.scheme,
            clip_negative: spec.clip_negative,
        };
        problem.forward(&g_true)?
    };
    let v_gamma = crate::forward::restrict_to_gamma(&v_true, spec.obs, &spec.geometry)?;

    let report_rows = spec.base_tgrid.n_steps();
    let g_true_report = g_true.truncated_rows(report_rows);
    let v_true_report = Observation {
        domain: v_gamma.domain,
        values: v_gamma.values.slice(ndarray::s![..report_rows, ..]).to_owned(),
    };

    let mut summaries = Vec::with_capacity(spec.delta_levels.len());
    for &delta_rel in &spec.delta_levels {
        let outcomes: Vec<TrialOutcome> = (0..spec.trials)
            .into_par_iter()
            .map(|trial| run_trial(spec, &run_tgrid, &v_gamma, delta_rel, trial))
            .collect();
        let delta_abs = {
            let noise = NoiseSpec {
                a: spec.noise_a,
                b: spec.noise_b,
                delta_rel,
                seed: spec.base_seed,
            };
            add_noise(&v_gamma, &noise, &run_tgrid, &spec.geometry).1
        };

        let noisy_report: Vec<Array2<f64>> = outcomes
            .iter()
            .map(|o| o.noisy.values.slice(ndarray::s![..report_rows, ..]).to_owned())
            .collect();
        let (mu_v_raw, sigma_v_raw) = mean_std(&noisy_report)?;
        let mu_v = Observation { domain: v_gamma.domain, values: mu_v_raw };
        let sigma_v = Observation { domain: v_gamma.domain, values: sigma_v_raw };

        let completed: Vec<&ConductanceField> =
            outcomes.iter().filter_map(|o| o.g_star.as_ref()).collect();
        let failed_trials = spec.trials - completed.len();
        let (mu_g, sigma_g) = if completed.is_empty() {
            (None, None)
        } else {
            let mut mu_ions = Vec::with_capacity(g_true.n_ions());
            let mut sig_ions = Vec::with_capacity(g_true.n_ions());
            for i in 0..g_true.n_ions() {
                let stack: Vec<Array2<f64>> = completed
                    .iter()
                    .map(|g| g.truncated_rows(report_rows).ion(i).clone())
                    .collect();
                let (mu, sig) = mean_std(&stack)?;
                mu_ions.push(mu);
                sig_ions.push(sig);
            }
            let td = g_true.is_time_dependent();
            let wrap = |arrs: Vec<Array2<f64>>| {
                if td {
                    ConductanceField::new_dynamic(arrs)
                } else {
                    ConductanceField::new_static(arrs.into_iter().map(|a| a.row(0).to_owned()).collect())
                }
            };
            (Some(wrap(mu_ions)), Some(wrap(sig_ions)))
        };

        let (error_g_percent, error_g_averaged) = match &mu_g {
            Some(mu) => (
                error_g(&g_true_report, mu, &spec.base_tgrid, &spec.geometry, false)?,
                error_g(&g_true_report, mu, &spec.base_tgrid, &spec.geometry, true)?,
            ),
            None => (f64::NAN, f64::NAN),
        };
        let (error_v_percent, excluded) =
            error_v(&v_true_report, &mu_v, &spec.base_tgrid, &spec.geometry, false)?;
        let (error_v_averaged, _) =
            error_v(&v_true_report, &mu_v, &spec.base_tgrid, &spec.geometry, true)?;

        let ks: Vec<usize> = outcomes
            .iter()
            .filter(|o| o.g_star.is_some())
            .map(|o| o.record.k_star)
            .collect();
        let mean_iterations = if ks.is_empty() {
            f64::NAN
        } else {
            ks.iter().sum::<usize>() as f64 / ks.len() as f64
        };

        summaries.push(TrialSummary {
            delta_rel,
            delta_abs,
            mu_g,
            sigma_g,
            mu_v,
            sigma_v,
            g_true: g_true_report.clone(),
            v_true: v_true_report.clone(),
            error_g_percent,
            error_v_percent,
            error_g_averaged,
            error_v_averaged,
            excluded_v_samples: excluded,
            mean_iterations,
            failed_trials,
            records: outcomes.into_iter().map(|o| o.record).collect(),
        });
    }
    Ok(summaries)
}
