//! The minimal-error iteration: residual evaluation, closed-form step size,
//! conductance update (time-dependent and time-independent variants) and
//! discrepancy-principle stopping.

use ndarray::{Array1, Array2};

use crate::adjoint::{adjoint_solve_segment, adjoint_solve_tree};
use crate::error::{Error, Result};
use crate::field::{AdjointField, ConductanceField, VoltageField};
use crate::forward::{forward_solve_segment, forward_solve_tree, restrict_to_gamma, BoundaryProtocol, Scheme, TreeBoundary};
use crate::grid::{Geometry, TimeGrid};
use crate::observation::{gamma_norm, Observation, ObservationDomain};
use crate::params::CableParameters;

/// Norm used on the per-ion gradient fields in the step-size denominator of
/// the time-dependent update. `LInf` is the paper's D(F) = (L^inf)^N_ion as
/// written; `L2` is the weighted L2(Omega) alternative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenominatorNorm {
    LInf,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Discrepancy,
    MaxIterations,
    StagnantResidual,
}

/// Boundary data matching the problem geometry.
#[derive(Clone)]
pub enum ProblemBoundary {
    Segment(BoundaryProtocol),
    Tree(TreeBoundary),
}

/// Everything the iteration needs: the fixed physics, grids, noisy data and
/// the stopping/stepping policy.
#[derive(Clone)]
pub struct InverseProblem {
    pub params: CableParameters,
    pub geometry: Geometry,
    pub tgrid: TimeGrid,
    pub boundary: ProblemBoundary,
    pub data: Observation,
    pub delta: f64,
    pub tau: f64,
    pub time_dependent: bool,
    pub denominator_norm: DenominatorNorm,
    pub scheme: Scheme,
    pub clip_negative: bool,
}

/// Residual threshold below which a residual that fails to improve for this
/// many consecutive iterations stops the run.
const STAGNATION_WINDOW: usize = 50;
const STAGNATION_RELATIVE: f64 = 1e-12;

impl InverseProblem {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !(self.tau > 1.0) {
            return Err(Error::Invalid(format!("tau must exceed 1, got {}", self.tau)));
        }
        if self.delta < 0.0 {
            return Err(Error::Invalid(format!("delta must be >= 0, got {}", self.delta)));
        }
        self.data.validate_for(&self.geometry, &self.tgrid)?;
        match (&self.geometry, &self.boundary) {
            (Geometry::Segment(_), ProblemBoundary::Segment(_)) => {}
            (Geometry::Tree(_), ProblemBoundary::Tree(_)) => {}
            _ => return Err(Error::Invalid("boundary data does not match the geometry kind".into())),
        }
        if matches!(self.geometry, Geometry::Tree(_)) && self.data.domain == ObservationDomain::Endpoints {
            return Err(Error::TreeEndpoints);
        }
        Ok(())
    }

    /// The discrepancy threshold uses delta, with a small floor so that
    /// noise-free runs terminate.
    pub fn effective_delta(&self) -> f64 {
        if self.delta > 0.0 {
            self.delta
        } else {
            1e-12 * gamma_norm(&self.data, &self.tgrid, &self.geometry)
        }
    }

    pub fn zero_initial_guess(&self) -> ConductanceField {
        let rows = if self.time_dependent { Some(self.tgrid.n_steps()) } else { None };
        ConductanceField::zeros(self.params.n_ions(), self.geometry.n_nodes(), rows)
    }

    pub fn forward(&self, g: &ConductanceField) -> Result<VoltageField> {
        match (&self.geometry, &self.boundary) {
            (Geometry::Segment(xg), ProblemBoundary::Segment(bc)) => {
                forward_solve_segment(&self.params, g, bc, &self.tgrid, xg, self.scheme)
            }
            (Geometry::Tree(tree), ProblemBoundary::Tree(bc)) => {
                forward_solve_tree(&self.params, g, bc, &self.tgrid, tree, self.scheme)
            }
            _ => Err(Error::Invalid("boundary data does not match the geometry kind".into())),
        }
    }

    pub fn adjoint(&self, g: &ConductanceField, residual: &Observation) -> Result<AdjointField> {
        match &self.geometry {
            Geometry::Segment(xg) => {
                adjoint_solve_segment(&self.params, g, residual, &self.tgrid, xg, self.scheme)
            }
            Geometry::Tree(tree) => {
                adjoint_solve_tree(&self.params, g, residual, &self.tgrid, tree, self.scheme)
            }
        }
    }
}

/// State carried between iterations of [`minimal_error_run`].
pub struct IterationState {
    pub k: usize,
    pub g: ConductanceField,
    pub v: VoltageField,
    pub residual_norm: f64,
}

#[derive(Clone, Debug)]
pub struct InversionResult {
    pub g_star: ConductanceField,
    pub k_star: usize,
    pub residual_history: Vec<f64>,
    pub stop_reason: StopReason,
}

/// Per-ion gradient image (V_k - E_i) U_k: the full space-time field for
/// time-dependent unknowns, its trapezoidal time average for static ones.
pub fn gradient_fields(
    params: &CableParameters,
    v: &VoltageField,
    u: &AdjointField,
    tgrid: &TimeGrid,
    time_dependent: bool,
) -> ConductanceField {
    let (rows, nodes) = v.values.dim();
    if time_dependent {
        let per_ion = params
            .ions
            .iter()
            .map(|ion| {
                let mut f = Array2::zeros((rows, nodes));
                for n in 0..rows {
                    for j in 0..nodes {
                        f[[n, j]] = (v.values[[n, j]] - ion.reversal) * u.values[[n, j]];
                    }
                }
                f
            })
            .collect();
        ConductanceField::new_dynamic(per_ion)
    } else {
        let dt = tgrid.dt();
        let t = tgrid.t_final();
        let per_ion = params
            .ions
            .iter()
            .map(|ion| {
                let mut avg = Array1::zeros(nodes);
                for j in 0..nodes {
                    let mut acc = 0.0;
                    for n in 0..rows {
                        let w = if n == 0 || n == rows - 1 { 0.5 } else { 1.0 };
                        acc += w * (v.values[[n, j]] - ion.reversal) * u.values[[n, j]];
                    }
                    avg[j] = acc * dt / t;
                }
                avg
            })
            .collect();
        ConductanceField::new_static(per_ion)
    }
}

/// The closed-form minimal-error step
/// w = ||residual||^2 / sum_i ||(V_k - E_i) U_k||^2 with the norm picked by
/// the time-dependence and `denominator_norm` (Remark 2's max-abs of the
/// time average in the static case).
pub fn step_size(
    residual_norm: f64,
    grad: &ConductanceField,
    denominator_norm: DenominatorNorm,
    tgrid: &TimeGrid,
    geometry: &Geometry,
) -> Result<f64> {
    if residual_norm == 0.0 {
        return Ok(0.0);
    }
    let mut denom = 0.0;
    for i in 0..grad.n_ions() {
        let field = grad.ion(i);
        denom += match (grad.is_time_dependent(), denominator_norm) {
            (true, DenominatorNorm::L2) => {
                let w = tgrid.t_final() / tgrid.n_steps() as f64 * geometry.node_weight();
                w * field.iter().map(|x| x * x).sum::<f64>()
            }
            _ => {
                let m = field.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
                m * m
            }
        };
    }
    if denom == 0.0 {
        return Err(Error::Stagnation { residual: residual_norm });
    }
    Ok(residual_norm * residual_norm / denom)
}

/// G - w * grad, optionally clipped at zero.
pub fn apply_update(g: &ConductanceField, grad: &ConductanceField, w: f64, clip_negative: bool) -> ConductanceField {
    let mut out = g.clone();
    for i in 0..g.n_ions() {
        let gi = out.ion_mut(i);
        let di = grad.ion(i);
        for (gv, &dv) in gi.iter_mut().zip(di.iter()) {
            *gv -= w * dv;
            if clip_negative && *gv < 0.0 {
                *gv = 0.0;
            }
        }
    }
    out
}

/// One update of Eq. 16 / Eq. 17: pointwise for time-dependent unknowns,
/// through the trapezoidal time average for static ones.
pub fn update_conductance(
    g: &ConductanceField,
    v: &VoltageField,
    u: &AdjointField,
    w: f64,
    problem: &InverseProblem,
) -> ConductanceField {
    let grad = gradient_fields(&problem.params, v, u, &problem.tgrid, g.is_time_dependent());
    apply_update(g, &grad, w, problem.clip_negative)
}

/// Runs the minimal-error iteration until the discrepancy principle fires,
/// the residual stagnates, or the iteration budget runs out. Two PDE solves
/// per iteration: the forward map and the adjoint.
pub fn minimal_error_run(
    problem: &InverseProblem,
    g_init: ConductanceField,
    max_iter: usize,
) -> Result<InversionResult> {
    problem.validate()?;
    let n_rows = problem.tgrid.n_steps();
    let rows = if problem.time_dependent { n_rows } else { 1 };
    g_init.validate_for(problem.params.n_ions(), problem.geometry.n_nodes(), n_rows)?;
    if g_init.is_time_dependent() != problem.time_dependent || g_init.n_rows() != rows {
        return Err(Error::Shape("initial guess does not match time_dependent".into()));
    }
    if max_iter == 0 {
        return Err(Error::Invalid("max_iter must be at least 1".into()));
    }
    let threshold = problem.tau * problem.effective_delta();
    let mut history = Vec::new();
    let mut best = f64::INFINITY;
    let mut stagnant = 0usize;

    let mut state = {
        let v = problem.forward(&g_init)?;
        let v_gamma = restrict_to_gamma(&v, problem.data.domain, &problem.geometry)?;
        let residual_norm = gamma_norm(&problem.data.sub(&v_gamma)?, &problem.tgrid, &problem.geometry);
        IterationState { k: 1, g: g_init, v, residual_norm }
    };

    loop {
        history.push(state.residual_norm);
        if state.residual_norm <= threshold {
            return Ok(InversionResult {
                g_star: state.g,
                k_star: state.k,
                residual_history: history,
                stop_reason: StopReason::Discrepancy,
            });
        }
        if state.residual_norm < best * (1.0 - STAGNATION_RELATIVE) {
            best = state.residual_norm;
            stagnant = 0;
        } else {
            stagnant += 1;
            if stagnant >= STAGNATION_WINDOW {
                return Ok(InversionResult {
                    g_star: state.g,
                    k_star: state.k,
                    residual_history: history,
                    stop_reason: StopReason::StagnantResidual,
                });
            }
        }
        if state.k == max_iter {
            return Ok(InversionResult {
                g_star: state.g,
                k_star: state.k,
                residual_history: history,
                stop_reason: StopReason::MaxIterations,
            });
        }

        let v_gamma = restrict_to_gamma(&state.v, problem.data.domain, &problem.geometry)?;
        let residual = problem.data.sub(&v_gamma)?;
        let u = problem.adjoint(&state.g, &residual)?;
        let grad = gradient_fields(&problem.params, &state.v, &u, &problem.tgrid, problem.time_dependent);
        let w = step_size(state.residual_norm, &grad, problem.denominator_norm, &problem.tgrid, &problem.geometry)?;
        let g_next = apply_update(&state.g, &grad, w, problem.clip_negative);

        let v_next = problem.forward(&g_next)?;
        let v_gamma_next = restrict_to_gamma(&v_next, problem.data.domain, &problem.geometry)?;
        let residual_norm = gamma_norm(&problem.data.sub(&v_gamma_next)?, &problem.tgrid, &problem.geometry);
        state = IterationState { k: state.k + 1, g: g_next, v: v_next, residual_norm };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_segment_grid, SegmentGrid};
    use crate::params::Ion;
    use ndarray::Array1;

    fn params_one_ion() -> CableParameters {
        CableParameters {
            c_m: 1.0,
            fiber_radius: 0.0238,
            axial_resistivity: 34.5,
            g_leak: 0.3,
            e_leak: 10.613,
            ions: vec![Ion::new("K", -12.0)],
        }
    }

    fn small_problem(delta: f64, data: Observation) -> InverseProblem {
        InverseProblem {
            params: params_one_ion(),
            geometry: Geometry::Segment(build_segment_grid(0.1, 0.01).unwrap()),
            tgrid: TimeGrid::from_step(2.0, 0.1).unwrap(),
            boundary: ProblemBoundary::Segment(BoundaryProtocol::current_injection(
                &params_one_ion(),
                crate::forward::default_current,
            )),
            data,
            delta,
            tau: 1.01,
            time_dependent: false,
            denominator_norm: DenominatorNorm::LInf,
            scheme: Scheme::Implicit,
            clip_negative: false,
        }
    }

    #[test]
    fn step_size_zero_residual() {
        let grad = ConductanceField::new_static(vec![Array1::from_elem(5, 3.0)]);
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let geo = Geometry::Segment(SegmentGrid::new(1.0, 5).unwrap());
        assert_eq!(step_size(0.0, &grad, DenominatorNorm::LInf, &tg, &geo).unwrap(), 0.0);
    }

    #[test]
    fn step_size_constant_field() {
        let c = 2.5;
        let grad = ConductanceField::new_static(vec![Array1::from_elem(7, c)]);
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let geo = Geometry::Segment(SegmentGrid::new(1.0, 7).unwrap());
        let rn = 0.4;
        let w = step_size(rn, &grad, DenominatorNorm::LInf, &tg, &geo).unwrap();
        assert!((w - rn * rn / (c * c)).abs() < 1e-15);
    }

    #[test]
    fn step_size_two_ion_brute_force() {
        // independent re-evaluation of the formula on a 3x3 grid
        let gk = Array2::from_shape_fn((3, 3), |(n, j)| 0.1 + 0.3 * n as f64 - 0.2 * j as f64);
        let gna = Array2::from_shape_fn((3, 3), |(n, j)| -0.4 + 0.1 * (n * j) as f64);
        let tg = TimeGrid::new(2.0, 3).unwrap();
        let geo = Geometry::Segment(SegmentGrid::new(0.3, 3).unwrap());
        let rn = 1.7;
        let grad = ConductanceField::new_dynamic(vec![gk.clone(), gna.clone()]);
        for norm in [DenominatorNorm::LInf, DenominatorNorm::L2] {
            let w = step_size(rn, &grad, norm, &tg, &geo).unwrap();
            let mut d = 0.0;
            for field in [&gk, &gna] {
                match norm {
                    DenominatorNorm::LInf => {
                        let mut m: f64 = 0.0;
                        for &x in field.iter() {
                            if x.abs() > m {
                                m = x.abs();
                            }
                        }
                        d += m * m;
                    }
                    DenominatorNorm::L2 => {
                        let weight = (2.0 / 3.0) * (0.3 / 3.0);
                        let mut acc = 0.0;
                        for &x in field.iter() {
                            acc += weight * x * x;
                        }
                        d += acc;
                    }
                }
            }
            assert!((w - rn * rn / d).abs() < 1e-14 * w.abs());
        }
    }

    #[test]
    fn step_size_vanished_gradient_is_stagnation() {
        let grad = ConductanceField::new_static(vec![Array1::zeros(5)]);
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let geo = Geometry::Segment(SegmentGrid::new(1.0, 5).unwrap());
        let err = step_size(1.0, &grad, DenominatorNorm::LInf, &tg, &geo).unwrap_err();
        assert!(matches!(err, Error::Stagnation { .. }));
    }

    #[test]
    fn update_zero_adjoint_keeps_g() {
        let p = params_one_ion();
        let tg = TimeGrid::new(2.0, 5).unwrap();
        let g = ConductanceField::new_static(vec![Array1::from_elem(4, 0.7)]);
        let v = VoltageField { values: Array2::from_elem((5, 4), 3.0) };
        let u = AdjointField { values: Array2::zeros((5, 4)) };
        let grad = gradient_fields(&p, &v, &u, &tg, false);
        let updated = apply_update(&g, &grad, 2.0, false);
        assert_eq!(updated, g);
    }

    #[test]
    fn update_final_time_frozen_bit_exact() {
        let p = params_one_ion();
        let tg = TimeGrid::new(2.0, 5).unwrap();
        let g = ConductanceField::new_dynamic(vec![Array2::from_shape_fn((5, 4), |(n, j)| {
            0.3 + 0.01 * (n as f64) + 0.001 * (j as f64)
        })]);
        let v = VoltageField { values: Array2::from_shape_fn((5, 4), |(n, j)| (n + j) as f64) };
        let mut u = Array2::from_elem((5, 4), 0.25);
        u.row_mut(4).fill(0.0);
        let u = AdjointField { values: u };
        let grad = gradient_fields(&p, &v, &u, &tg, true);
        let updated = apply_update(&g, &grad, 0.9, false);
        for j in 0..4 {
            assert_eq!(updated.ion(0)[[4, j]].to_bits(), g.ion(0)[[4, j]].to_bits());
        }
        assert_ne!(updated.ion(0)[[0, 0]], g.ion(0)[[0, 0]]);
    }

    #[test]
    fn update_time_average_exact_for_linear_integrand() {
        // V - E = 1, U = t, T = 2, w = 1: G decreases by (1/2) int_0^2 t dt = 1
        let p = params_one_ion();
        let e = p.ions[0].reversal;
        let tg = TimeGrid::new(2.0, 21).unwrap();
        let g = ConductanceField::new_static(vec![Array1::from_elem(3, 5.0)]);
        let v = VoltageField { values: Array2::from_elem((21, 3), e + 1.0) };
        let u = AdjointField {
            values: Array2::from_shape_fn((21, 3), |(n, _)| tg.node(n)),
        };
        let problem_like_grad = gradient_fields(&p, &v, &u, &tg, false);
        let updated = apply_update(&g, &problem_like_grad, 1.0, false);
        for &x in updated.ion(0).iter() {
            assert!((x - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_coherence_of_w() {
        let grad = ConductanceField::new_static(vec![Array1::from_elem(5, 1.3)]);
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let geo = Geometry::Segment(SegmentGrid::new(1.0, 5).unwrap());
        let w1 = step_size(0.7, &grad, DenominatorNorm::LInf, &tg, &geo).unwrap();
        let w3 = step_size(3.0 * 0.7, &grad, DenominatorNorm::LInf, &tg, &geo).unwrap();
        assert!((w3 - 9.0 * w1).abs() < 1e-14 * w3.abs());
    }

    #[test]
    fn immediate_discrepancy_returns_initial_guess() {
        let p = params_one_ion();
        let xg = build_segment_grid(0.1, 0.01).unwrap();
        let tg = TimeGrid::from_step(2.0, 0.1).unwrap();
        let g_true = ConductanceField::new_static(vec![Array1::from_elem(xg.n_points(), 0.25)]);
        let bc = BoundaryProtocol::current_injection(&p, crate::forward::default_current);
        let v = forward_solve_segment(&p, &g_true, &bc, &tg, &xg, Scheme::Implicit).unwrap();
        let geo = Geometry::Segment(xg);
        let data = restrict_to_gamma(&v, ObservationDomain::Endpoints, &geo).unwrap();
        // delta larger than the zero-guess residual: stops before any update
        let problem = small_problem(1e6, data);
        let g0 = problem.zero_initial_guess();
        let out = minimal_error_run(&problem, g0.clone(), 10).unwrap();
        assert_eq!(out.k_star, 1);
        assert_eq!(out.stop_reason, StopReason::Discrepancy);
        assert_eq!(out.g_star, g0);
        assert_eq!(out.residual_history.len(), 1);
    }

    #[test]
    fn zero_noise_exact_data_is_a_fixed_point() {
        let p = params_one_ion();
        let xg = build_segment_grid(0.1, 0.01).unwrap();
        let tg = TimeGrid::from_step(2.0, 0.1).unwrap();
        let g0 = ConductanceField::zeros(1, xg.n_points(), None);
        let bc = BoundaryProtocol::current_injection(&p, crate::forward::default_current);
        let v = forward_solve_segment(&p, &g0, &bc, &tg, &xg, Scheme::Implicit).unwrap();
        let geo = Geometry::Segment(xg);
        let data = restrict_to_gamma(&v, ObservationDomain::Endpoints, &geo).unwrap();
        let problem = small_problem(0.0, data);
        let out = minimal_error_run(&problem, g0.clone(), 10).unwrap();
        assert_eq!(out.k_star, 1);
        assert!(out.residual_history[0] <= problem.tau * problem.effective_delta());
        assert_eq!(out.g_star, g0);
    }

    #[test]
    fn noise_free_residual_decreases_monotonically() {
        let p = params_one_ion();
        let xg = build_segment_grid(0.1, 0.01).unwrap();
        let tg = TimeGrid::from_step(2.0, 0.1).unwrap();
        let g_true = ConductanceField::new_static(vec![Array1::from_elem(xg.n_points(), 0.3)]);
        let bc = BoundaryProtocol::current_injection(&p, crate::forward::default_current);
        let v = forward_solve_segment(&p, &g_true, &bc, &tg, &xg, Scheme::Implicit).unwrap();
        let geo = Geometry::Segment(xg);
        let data = restrict_to_gamma(&v, ObservationDomain::FullDomain, &geo).unwrap();
        let mut problem = small_problem(0.0, data);
        problem.delta = 0.0;
        let out = minimal_error_run(&problem, problem.zero_initial_guess(), 11).unwrap();
        assert!(out.residual_history.len() >= 11);
        for k in 1..10.min(out.residual_history.len()) {
            assert!(
                out.residual_history[k] < out.residual_history[k - 1],
                "residual rose at k={k}: {:?}",
                &out.residual_history[..=k]
            );
        }
    }

    #[test]
    fn tau_at_most_one_rejected() {
        let tg = TimeGrid::from_step(2.0, 0.1).unwrap();
        let data = Observation {
            domain: ObservationDomain::Endpoints,
            values: Array2::zeros((tg.n_steps(), 2)),
        };
        let mut problem = small_problem(0.1, data);
        problem.tau = 0.9;
        let err = minimal_error_run(&problem, problem.zero_initial_guess(), 5).unwrap_err();
        assert!(err.to_string().contains("tau must exceed 1"));
    }
}
