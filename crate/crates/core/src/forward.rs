//! Forward solves of the passive cable equation
//!     C_M V_t = (r_a/2R) V_xx - G_L (V - E_L) - sum_i G_i (V - E_i)
//! on segments and trees, plus restriction of solutions to an observation
//! domain.

use std::sync::Arc;

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::field::{ConductanceField, VoltageField};
use crate::grid::{SegmentGrid, TimeGrid};
use crate::observation::{Observation, ObservationDomain};
use crate::params::CableParameters;
use crate::solver::{march_segment_explicit, march_segment_implicit};
use crate::tree::{TreeGeometry, VertexKind};
use crate::tree_solver::{march_tree_explicit, march_tree_implicit};

pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type SpaceFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Time discretization scheme for the marches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Implicit,
    Explicit,
}

/// Neumann fluxes at both segment ends and the initial potential.
#[derive(Clone)]
pub struct BoundaryProtocol {
    pub flux_near: TimeFn,
    pub flux_far: TimeFn,
    pub initial: SpaceFn,
}

impl BoundaryProtocol {
    pub fn zero() -> Self {
        Self {
            flux_near: Arc::new(|_| 0.0),
            flux_far: Arc::new(|_| 0.0),
            initial: Arc::new(|_| 0.0),
        }
    }

    /// Current injection at x = 0, sealed far end, resting start.
    pub fn current_injection(params: &CableParameters, current: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            flux_near: stimulus_neumann(params, current),
            flux_far: Arc::new(|_| 0.0),
            initial: Arc::new(|_| 0.0),
        }
    }
}

/// Boundary data on a tree: one Neumann flux per terminal vertex (derivative
/// along the edge's own local coordinate at that end) and the initial
/// potential per (edge index, arclength).
#[derive(Clone)]
pub struct TreeBoundary {
    pub fluxes: Vec<(usize, TimeFn)>,
    pub initial: Arc<dyn Fn(usize, f64) -> f64 + Send + Sync>,
}

impl TreeBoundary {
    pub fn sealed() -> Self {
        Self { fluxes: Vec::new(), initial: Arc::new(|_, _| 0.0) }
    }
}

/// Neumann value corresponding to injecting the current I(t) at x = 0:
/// p(t) = -R I(t) / (pi r_a^2).
pub fn stimulus_neumann(params: &CableParameters, current: impl Fn(f64) -> f64 + Send + Sync + 'static) -> TimeFn {
    let scale = -params.axial_resistivity / (std::f64::consts::PI * params.fiber_radius * params.fiber_radius);
    Arc::new(move |t| scale * current(t))
}

/// The paper's default stimulus I(t) = 0.1 t^2 exp(-10 t) (mA).
pub fn default_current(t: f64) -> f64 {
    0.1 * t * t * (-10.0 * t).exp()
}

pub(crate) struct ReactionFill<'a> {
    g: &'a ConductanceField,
    reversals: Vec<f64>,
    g_leak: f64,
    e_leak: f64,
}

impl<'a> ReactionFill<'a> {
    pub fn new(params: &CableParameters, g: &'a ConductanceField) -> Self {
        Self {
            g,
            reversals: params.ions.iter().map(|i| i.reversal).collect(),
            g_leak: params.g_leak,
            e_leak: params.e_leak,
        }
    }

    /// c = G_L + sum_i G_i, s = G_L E_L + sum_i G_i E_i at time row `step`.
    pub fn fill(&self, step: usize, c: &mut [f64], s: &mut [f64]) {
        let base_c = self.g_leak;
        let base_s = self.g_leak * self.e_leak;
        c.iter_mut().for_each(|v| *v = base_c);
        s.iter_mut().for_each(|v| *v = base_s);
        for (i, &e_i) in self.reversals.iter().enumerate() {
            let row = self.g.ion_row(i, step);
            for (j, &gij) in row.iter().enumerate() {
                c[j] += gij;
                s[j] += gij * e_i;
            }
        }
    }

    /// Reaction profile only, for solves whose source is not the leak/ion one.
    pub fn fill_reaction(&self, step: usize, c: &mut [f64]) {
        c.iter_mut().for_each(|v| *v = self.g_leak);
        for i in 0..self.reversals.len() {
            let row = self.g.ion_row(i, step);
            for (j, &gij) in row.iter().enumerate() {
                c[j] += gij;
            }
        }
    }
}

pub fn forward_solve_segment(
    params: &CableParameters,
    g: &ConductanceField,
    bc: &BoundaryProtocol,
    tgrid: &TimeGrid,
    xgrid: &SegmentGrid,
    scheme: Scheme,
) -> Result<VoltageField> {
    params.validate()?;
    g.validate_for(params.n_ions(), xgrid.n_points(), tgrid.n_steps())?;
    let y0: Array1<f64> = xgrid.nodes().map(|x| (bc.initial)(x)).collect();
    let fill = ReactionFill::new(params, g);
    let mut coeffs = |step: usize, c: &mut [f64], s: &mut [f64]| fill.fill(step, c, s);
    let mut fluxes = |step: usize| {
        let t = tgrid.node(step);
        ((bc.flux_near)(t), (bc.flux_far)(t))
    };
    let march = match scheme {
        Scheme::Implicit => march_segment_implicit(
            tgrid.n_steps(),
            params.axial_coeff(),
            params.c_m,
            tgrid.dt(),
            xgrid.dx(),
            y0.as_slice().unwrap(),
            &mut coeffs,
            &mut fluxes,
            !g.is_time_dependent(),
            "forward solve",
        )?,
        Scheme::Explicit => march_segment_explicit(
            tgrid.n_steps(),
            params.axial_coeff(),
            params.c_m,
            tgrid.dt(),
            xgrid.dx(),
            y0.as_slice().unwrap(),
            &mut coeffs,
            &mut fluxes,
            "forward solve",
        )?,
    };
    Ok(VoltageField { values: march })
}

pub(crate) fn tree_initial_state(tree: &TreeGeometry, initial: &dyn Fn(usize, f64) -> f64) -> Vec<f64> {
    let mut y0 = vec![0.0; tree.n_global()];
    for (e_idx, e) in tree.edges().iter().enumerate() {
        for local in 0..e.n_points {
            y0[tree.global(e_idx, local)] = initial(e_idx, local as f64 * tree.dx());
        }
    }
    y0
}

/// Per-step flux values ordered like `tree.terminal_vertices()`. Terminals
/// without an entry in `bc.fluxes` are sealed (zero flux).
pub(crate) fn tree_flux_table(tree: &TreeGeometry, bc: &TreeBoundary) -> Result<Vec<Option<TimeFn>>> {
    for (vid, _) in &bc.fluxes {
        let idx = tree.vertex_idx(*vid)?;
        if tree.vertices()[idx].kind != VertexKind::Terminal {
            return Err(Error::Geometry(format!("vertex {vid} is not terminal; fluxes attach to terminals")));
        }
    }
    Ok(tree
        .terminal_vertices()
        .map(|(_, v)| bc.fluxes.iter().find(|(vid, _)| *vid == v.id).map(|(_, f)| f.clone()))
        .collect())
}

pub fn forward_solve_tree(
    params: &CableParameters,
    g: &ConductanceField,
    bc: &TreeBoundary,
    tgrid: &TimeGrid,
    tree: &TreeGeometry,
    scheme: Scheme,
) -> Result<VoltageField> {
    params.validate()?;
    g.validate_for(params.n_ions(), tree.n_global(), tgrid.n_steps())?;
    let y0 = tree_initial_state(tree, bc.initial.as_ref());
    let fill = ReactionFill::new(params, g);
    let mut coeffs = |step: usize, c: &mut [f64], s: &mut [f64]| fill.fill(step, c, s);
    let table = tree_flux_table(tree, bc)?;
    let mut fluxes = |step: usize, out: &mut [f64]| {
        let t = tgrid.node(step);
        for (slot, f) in out.iter_mut().zip(&table) {
            *slot = f.as_ref().map_or(0.0, |f| f(t));
        }
    };
    let march = match scheme {
        Scheme::Implicit => march_tree_implicit(
            tree,
            tgrid.n_steps(),
            params.axial_coeff(),
            params.c_m,
            tgrid.dt(),
            &y0,
            &mut coeffs,
            &mut fluxes,
            !g.is_time_dependent(),
            "forward solve",
        )?,
        Scheme::Explicit => march_tree_explicit(
            tree,
            tgrid.n_steps(),
            params.axial_coeff(),
            params.c_m,
            tgrid.dt(),
            &y0,
            &mut coeffs,
            &mut fluxes,
            "forward solve",
        )?,
    };
    Ok(VoltageField { values: march })
}

/// Restriction V|_Gamma. Case I keeps the whole field, Case II keeps the two
/// endpoint time series of a segment; endpoint data on trees is rejected.
pub fn restrict_to_gamma(
    v: &VoltageField,
    domain: ObservationDomain,
    geometry: &crate::grid::Geometry,
) -> Result<Observation> {
    match domain {
        ObservationDomain::FullDomain => Ok(Observation { domain, values: v.values.clone() }),
        ObservationDomain::Endpoints => match geometry {
            crate::grid::Geometry::Tree(_) => Err(Error::TreeEndpoints),
            crate::grid::Geometry::Segment(_) => {
                let n = v.values.ncols();
                let mut out = ndarray::Array2::zeros((v.values.nrows(), 2));
                for (i, row) in v.values.rows().into_iter().enumerate() {
                    out[[i, 0]] = row[0];
                    out[[i, 1]] = row[n - 1];
                }
                Ok(Observation { domain, values: out })
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_segment_grid, Geometry};
    use crate::tree::paper_y_tree;
    use ndarray::Array2;

    pub(crate) fn section3_params(ions: Vec<crate::params::Ion>) -> CableParameters {
        CableParameters {
            c_m: 1.0,
            fiber_radius: 0.0238,
            axial_resistivity: 34.5,
            g_leak: 0.3,
            e_leak: 10.613,
            ions,
        }
    }

    fn k_ion() -> Vec<crate::params::Ion> {
        vec![crate::params::Ion::new("K", -12.0)]
    }

    #[test]
    fn stimulus_zero_current() {
        let p = section3_params(k_ion());
        let f = stimulus_neumann(&p, |_| 0.0);
        assert_eq!(f(0.3), 0.0);
    }

    #[test]
    fn stimulus_paper_value_at_t2() {
        // frozen from a 40-digit scalar evaluation of
        // -34.5 * 0.1 * 4 * exp(-20) / (pi * 0.0238^2)
        let p = section3_params(k_ion());
        let f = stimulus_neumann(&p, default_current);
        let expect = -1.5984007016677862e-05;
        assert!((f(2.0) - expect).abs() <= 1e-15 * expect.abs());
    }

    #[test]
    fn zero_data_stays_zero() {
        let mut p = section3_params(k_ion());
        p.g_leak = 0.0;
        let tg = TimeGrid::from_step(2.0, 0.1).unwrap();
        let xg = build_segment_grid(0.1, 0.01).unwrap();
        let g = ConductanceField::zeros(1, xg.n_points(), None);
        let v = forward_solve_segment(&p, &g, &BoundaryProtocol::zero(), &tg, &xg, Scheme::Implicit).unwrap();
        assert!(v.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn leak_equilibrium_is_steady() {
        let p = section3_params(k_ion());
        let tg = TimeGrid::from_step(5.0, 0.25).unwrap();
        let xg = build_segment_grid(0.1, 0.005).unwrap();
        let g = ConductanceField::zeros(1, xg.n_points(), None);
        let e_leak = p.e_leak;
        let bc = BoundaryProtocol {
            flux_near: Arc::new(|_| 0.0),
            flux_far: Arc::new(|_| 0.0),
            initial: Arc::new(move |_| e_leak),
        };
        let v = forward_solve_segment(&p, &g, &bc, &tg, &xg, Scheme::Implicit).unwrap();
        for &x in v.values.iter() {
            assert!((x - e_leak).abs() < 1e-12 * e_leak.abs());
        }
    }

    /// Manufactured eigenfunction V = exp(-lambda t) cos(pi x / L) with
    /// lambda = kappa (pi/L)^2 / C_M, G = 0, G_L = 0, sealed ends.
    pub(crate) fn eigenfunction_error(n_steps: usize, n_points: usize, scheme: Scheme) -> f64 {
        let mut p = section3_params(k_ion());
        p.g_leak = 0.0;
        let l = 0.1;
        let t_final = 2.0;
        let lam = p.axial_coeff() * (std::f64::consts::PI / l).powi(2) / p.c_m;
        let tg = TimeGrid::new(t_final, n_steps).unwrap();
        let xg = SegmentGrid::new(l, n_points).unwrap();
        let g = ConductanceField::zeros(1, n_points, None);
        let bc = BoundaryProtocol {
            flux_near: Arc::new(|_| 0.0),
            flux_far: Arc::new(|_| 0.0),
            initial: Arc::new(move |x| (std::f64::consts::PI * x / l).cos()),
        };
        let v = forward_solve_segment(&p, &g, &bc, &tg, &xg, scheme).unwrap();
        let mut err: f64 = 0.0;
        for n in 0..n_steps {
            let t = tg.node(n);
            for j in 0..n_points {
                let exact = (-lam * t).exp() * (std::f64::consts::PI * xg.node(j) / l).cos();
                err = err.max((v.values[[n, j]] - exact).abs());
            }
        }
        err
    }

    #[test]
    fn manufactured_solution_is_tracked() {
        let err = eigenfunction_error(81, 81, Scheme::Implicit);
        assert!(err < 5e-3, "eigenfunction error {err}");
    }

    #[test]
    fn tree_zero_data_stays_zero() {
        let mut p = section3_params(k_ion());
        p.g_leak = 0.0;
        let tree = paper_y_tree(0.01).unwrap();
        let tg = TimeGrid::from_step(1.0, 0.01).unwrap();
        let g = ConductanceField::zeros(1, tree.n_global(), None);
        for scheme in [Scheme::Implicit, Scheme::Explicit] {
            let v = forward_solve_tree(&p, &g, &TreeBoundary::sealed(), &tg, &tree, scheme).unwrap();
            assert!(v.values.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn symmetric_y_tree_solution_mirrors() {
        use crate::tree::{build_tree, EdgeSpec, VertexKind};
        let tree = build_tree(
            &[
                EdgeSpec { id: 1, length: 0.1, near_vertex: 1, far_vertex: 2 },
                EdgeSpec { id: 2, length: 0.1, near_vertex: 2, far_vertex: 3 },
                EdgeSpec { id: 3, length: 0.1, near_vertex: 2, far_vertex: 4 },
            ],
            0.01,
            &[
                (1, VertexKind::Terminal),
                (2, VertexKind::Interior),
                (3, VertexKind::Terminal),
                (4, VertexKind::Terminal),
            ],
        )
        .unwrap();
        let p = section3_params(k_ion());
        let tg = TimeGrid::from_step(2.0, 0.01).unwrap();
        let mut profile = ndarray::Array1::zeros(tree.n_global());
        for g_idx in 0..tree.n_global() {
            let (e_idx, s) = tree.node_arclength(g_idx);
            profile[g_idx] = if e_idx == 0 { 0.25 + s } else { 0.2 + 0.5 * s };
        }
        let g = ConductanceField::new_static(vec![profile]);
        let bc = TreeBoundary {
            fluxes: vec![(1, stimulus_neumann(&p, default_current))],
            initial: Arc::new(|_, _| 0.0),
        };
        for scheme in [Scheme::Implicit, Scheme::Explicit] {
            let v = forward_solve_tree(&p, &g, &bc, &tg, &tree, scheme).unwrap();
            let scale = v.values.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            let e2 = &tree.edges()[1];
            for local in 0..e2.n_points {
                let g2 = tree.global(1, local);
                let g3 = tree.global(2, local);
                for n in 0..tg.n_steps() {
                    let d = (v.values[[n, g2]] - v.values[[n, g3]]).abs();
                    assert!(d <= 1e-13 * scale, "asymmetry {d} at local {local}");
                }
            }
        }
    }

    /// Comparison principle: with G >= 0, no stimulus, and the start value
    /// between the smallest and largest equilibrium potentials, the implicit
    /// solution stays inside that hull up to roundoff.
    #[test]
    fn comparison_principle_smoke() {
        use proptest::prelude::*;
        let mut runner = proptest::test_runner::TestRunner::default();
        runner
            .run(
                &(
                    proptest::collection::vec(0.0f64..2.0, 21),
                    proptest::collection::vec(0.0f64..2.0, 21),
                    0.0f64..1.0,
                ),
                |(gk, gna, mix)| {
                    let p = section3_params(vec![
                        crate::params::Ion::new("K", -12.0),
                        crate::params::Ion::new("Na", 115.0),
                    ]);
                    let lo = (-12.0f64).min(p.e_leak).min(115.0);
                    let hi = (-12.0f64).max(p.e_leak).max(115.0);
                    let r0 = lo + mix * (hi - lo);
                    let tg = TimeGrid::from_step(2.0, 0.2).unwrap();
                    let xg = SegmentGrid::new(0.1, 21).unwrap();
                    let g = ConductanceField::new_static(vec![
                        Array1::from_vec(gk),
                        Array1::from_vec(gna),
                    ]);
                    let bc = BoundaryProtocol {
                        flux_near: Arc::new(|_| 0.0),
                        flux_far: Arc::new(|_| 0.0),
                        initial: Arc::new(move |_| r0),
                    };
                    let v = forward_solve_segment(&p, &g, &bc, &tg, &xg, Scheme::Implicit).unwrap();
                    let eps = 10.0 * f64::EPSILON * hi.abs().max(lo.abs());
                    for &x in v.values.iter() {
                        prop_assert!(x >= lo - eps && x <= hi + eps, "out of hull: {x}");
                    }
                    Ok(())
                },
            )
            .unwrap();
    }

    #[test]
    fn restriction_shapes() {
        let tg = TimeGrid::new(1.0, 3).unwrap();
        let xg = SegmentGrid::new(1.0, 3).unwrap();
        let geo = Geometry::Segment(xg);
        let v = VoltageField {
            values: Array2::from_shape_fn((3, 3), |(i, j)| (3 * i + j) as f64),
        };
        let full = restrict_to_gamma(&v, ObservationDomain::FullDomain, &geo).unwrap();
        assert_eq!(full.values.len(), 9);
        let ends = restrict_to_gamma(&v, ObservationDomain::Endpoints, &geo).unwrap();
        assert_eq!(ends.values.dim(), (3, 2));
        assert_eq!(ends.values[[1, 0]], 3.0);
        assert_eq!(ends.values[[1, 1]], 5.0);
        let tree = paper_y_tree(0.01).unwrap();
        let vt = VoltageField { values: Array2::zeros((3, tree.n_global())) };
        let err = restrict_to_gamma(&vt, ObservationDomain::Endpoints, &Geometry::Tree(tree)).unwrap_err();
        assert!(matches!(err, Error::TreeEndpoints));
        let _ = tg;
    }
}
