//! Reverse-time adjoint solves and the forward Gateaux-derivative solve.
//!
//! The adjoint problem
//!     -(r_a/2R) U_xx - C_M U_t + G_L U + sum_i G_i U = alpha_1 (V^d - V)
//! with U(T, .) = 0 and residual-driven Neumann data in the endpoint case is
//! solved by substituting tau = T - t, which turns it into the same forward
//! parabolic march used by the cable solver (sources and coefficients
//! time-reversed), then flipping the time axis of the result.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::field::{AdjointField, ConductanceField, VoltageField};
use crate::forward::{ReactionFill, Scheme};
use crate::grid::{SegmentGrid, TimeGrid};
use crate::observation::{Observation, ObservationDomain};
use crate::params::CableParameters;
use crate::solver::{march_segment_explicit, march_segment_implicit};
use crate::tree::TreeGeometry;
use crate::tree_solver::{march_tree_explicit, march_tree_implicit};

fn reverse_rows(m: Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(m.dim());
    let n = m.nrows();
    for (i, row) in m.rows().into_iter().enumerate() {
        out.row_mut(n - 1 - i).assign(&row);
    }
    out
}

pub fn adjoint_solve_segment(
    params: &CableParameters,
    g: &ConductanceField,
    residual: &Observation,
    tgrid: &TimeGrid,
    xgrid: &SegmentGrid,
    scheme: Scheme,
) -> Result<AdjointField> {
    params.validate()?;
    g.validate_for(params.n_ions(), xgrid.n_points(), tgrid.n_steps())?;
    let n_steps = tgrid.n_steps();
    let n = xgrid.n_points();
    let cols = match residual.domain {
        ObservationDomain::FullDomain => n,
        ObservationDomain::Endpoints => 2,
    };
    if residual.values.dim() != (n_steps, cols) {
        return Err(Error::Shape(format!(
            "residual is {:?}, expected ({n_steps}, {cols})",
            residual.values.dim()
        )));
    }
    let (alpha1, alpha2) = residual.domain.alpha();
    let flux_scale = alpha2 * 2.0 * params.axial_resistivity / params.fiber_radius;
    let fill = ReactionFill::new(params, g);
    let rv = &residual.values;
    let mut coeffs = |step: usize, c: &mut [f64], s: &mut [f64]| {
        let orig = n_steps - 1 - step;
        fill.fill_reaction(orig, c);
        for (j, sv) in s.iter_mut().enumerate() {
            *sv = if alpha1 != 0.0 { rv[[orig, j]] } else { 0.0 };
        }
    };
    let mut fluxes = |step: usize| {
        let orig = n_steps - 1 - step;
        if alpha2 == 0.0 {
            (0.0, 0.0)
        } else {
            (-flux_scale * rv[[orig, 0]], flux_scale * rv[[orig, cols - 1]])
        }
    };
    let y0 = vec![0.0; n];
    let reversed = match scheme {
        Scheme::Implicit => march_segment_implicit(
            n_steps,
            params.axial_coeff(),
            params.c_m,
            tgrid.dt(),
            xgrid.dx(),
            &y0,
            &mut coeffs,
            &mut fluxes,
            !g.is_time_dependent(),
            "adjoint solve",
        )?,
        Scheme::Explicit => march_segment_explicit(
            n_steps,
            params.axial_coeff(),
            params.c_m,
            tgrid.dt(),
            xgrid.dx(),
            &y0,
            &mut coeffs,
            &mut fluxes,
            "adjoint solve",
        )?,
    };
    Ok(AdjointField { values: reverse_rows(reversed) })
}

/// Adjoint solve on a tree; full-domain observations only.
pub fn adjoint_solve_tree(
    params: &CableParameters,
    g: &ConductanceField,
    residual: &Observation,
    tgrid: &TimeGrid,
    tree: &TreeGeometry,
    scheme: Scheme,
) -> Result<AdjointField> {
    params.validate()?;
    g.validate_for(params.n_ions(), tree.n_global(), tgrid.n_steps())?;
    if residual.domain != ObservationDomain::FullDomain {
        return Err(Error::TreeEndpoints);
    }
    let n_steps = tgrid.n_steps();
    if residual.values.dim() != (n_steps, tree.n_global()) {
        return Err(Error::Shape(format!(
            "residual is {:?}, expected ({n_steps}, {})",
            residual.values.dim(),
            tree.n_global()
        )));
    }
    let fill = ReactionFill::new(params, g);
    let rv = &residual.values;
    let mut coeffs = |step: usize, c: &mut [f64], s: &mut [f64]| {
        let orig = n_steps - 1 - step;
        fill.fill_reaction(orig, c);
        for (j, sv) in s.iter_mut().enumerate() {
            *sv = rv[[orig, j]];
        }
    };
    let mut fluxes = |_step: usize, out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0);
    let y0 = vec![0.0; tree.n_global()];
    let reversed = match scheme {
        Scheme::Implicit => march_tree_implicit(
            tree,
            n_steps,
            params.axial_coeff(),
            params.c_m,
            tgrid.dt(),
            &y0,
            &mut coeffs,
            &mut fluxes,
            !g.is_time_dependent(),
            "adjoint solve",
        )?,
        Scheme::Explicit => march_tree_explicit(
            tree,
            n_steps,
            params.axial_coeff(),
            params.c_m,
            tgrid.dt(),
            &y0,
            &mut coeffs,
            &mut fluxes,
            "adjoint solve",
        )?,
    };
    Ok(AdjointField { values: reverse_rows(reversed) })
}

fn gateaux_source(
    params: &CableParameters,
    theta: &ConductanceField,
    v_k: &VoltageField,
    step: usize,
    s: &mut [f64],
) {
    s.iter_mut().for_each(|v| *v = 0.0);
    for (i, ion) in params.ions.iter().enumerate() {
        let row = theta.ion_row(i, step);
        for (j, &th) in row.iter().enumerate() {
            s[j] -= th * (v_k.values[[step + 1, j]] - ion.reversal);
        }
    }
}

/// Linearized forward solve W of the Gateaux derivative F'(G) theta: the same
/// parabolic march with zero initial data, zero fluxes, and source
/// -sum_i theta_i (V_k - E_i) (V_k sampled at each step's target row, which
/// makes W the exact derivative of the discrete forward map).
pub fn gateaux_solve_segment(
    params: &CableParameters,
    g: &ConductanceField,
    v_k: &VoltageField,
    theta: &ConductanceField,
    tgrid: &TimeGrid,
    xgrid: &SegmentGrid,
) -> Result<VoltageField> {
    params.validate()?;
    g.validate_for(params.n_ions(), xgrid.n_points(), tgrid.n_steps())?;
    theta.validate_for(params.n_ions(), xgrid.n_points(), tgrid.n_steps())?;
    if v_k.values.dim() != (tgrid.n_steps(), xgrid.n_points()) {
        return Err(Error::Shape("V_k does not match the grids".into()));
    }
    let fill = ReactionFill::new(params, g);
    let mut coeffs = |step: usize, c: &mut [f64], s: &mut [f64]| {
        fill.fill_reaction(step, c);
        gateaux_source(params, theta, v_k, step, s);
    };
    let mut fluxes = |_| (0.0, 0.0);
    let y0 = vec![0.0; xgrid.n_points()];
    let march = march_segment_implicit(
        tgrid.n_steps(),
        params.axial_coeff(),
        params.c_m,
        tgrid.dt(),
        xgrid.dx(),
        &y0,
        &mut coeffs,
        &mut fluxes,
        !g.is_time_dependent(),
        "gateaux solve",
    )?;
    Ok(VoltageField { values: march })
}

pub fn gateaux_solve_tree(
    params: &CableParameters,
    g: &ConductanceField,
    v_k: &VoltageField,
    theta: &ConductanceField,
    tgrid: &TimeGrid,
    tree: &TreeGeometry,
) -> Result<VoltageField> {
    params.validate()?;
    g.validate_for(params.n_ions(), tree.n_global(), tgrid.n_steps())?;
    theta.validate_for(params.n_ions(), tree.n_global(), tgrid.n_steps())?;
    if v_k.values.dim() != (tgrid.n_steps(), tree.n_global()) {
        return Err(Error::Shape("V_k does not match the grids".into()));
    }
    let fill = ReactionFill::new(params, g);
    let mut coeffs = |step: usize, c: &mut [f64], s: &mut [f64]| {
        fill.fill_reaction(step, c);
        gateaux_source(params, theta, v_k, step, s);
    };
    let mut fluxes = |_step: usize, out: &mut [f64]| out.iter_mut().for_each(|v| *v = 0.0);
    let y0 = vec![0.0; tree.n_global()];
    let march = march_tree_implicit(
        tree,
        tgrid.n_steps(),
        params.axial_coeff(),
        params.c_m,
        tgrid.dt(),
        &y0,
        &mut coeffs,
        &mut fluxes,
        !g.is_time_dependent(),
        "gateaux solve",
    )?;
    Ok(VoltageField { values: march })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{forward_solve_segment, restrict_to_gamma, BoundaryProtocol};
    use crate::grid::{build_segment_grid, Geometry};
    use crate::params::Ion;
    use ndarray::{Array1, Array2};

    fn params() -> CableParameters {
        CableParameters {
            c_m: 1.0,
            fiber_radius: 0.0238,
            axial_resistivity: 34.5,
            g_leak: 0.3,
            e_leak: 10.613,
            ions: vec![Ion::new("K", -12.0)],
        }
    }

    #[test]
    fn zero_residual_gives_zero_adjoint() {
        let p = params();
        let xg = build_segment_grid(0.1, 0.01).unwrap();
        let tg = TimeGrid::from_step(2.0, 0.1).unwrap();
        let g = ConductanceField::zeros(1, xg.n_points(), None);
        for domain in [ObservationDomain::FullDomain, ObservationDomain::Endpoints] {
            let cols = if domain == ObservationDomain::FullDomain { xg.n_points() } else { 2 };
            let residual = Observation { domain, values: Array2::zeros((tg.n_steps(), cols)) };
            let u = adjoint_solve_segment(&p, &g, &residual, &tg, &xg, Scheme::Implicit).unwrap();
            assert!(u.values.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn final_condition_is_exact() {
        let p = params();
        let xg = build_segment_grid(0.1, 0.01).unwrap();
        let tg = TimeGrid::from_step(2.0, 0.1).unwrap();
        let g = ConductanceField::new_static(vec![Array1::from_elem(xg.n_points(), 0.4)]);
        let residual = Observation {
            domain: ObservationDomain::FullDomain,
            values: Array2::from_shape_fn((tg.n_steps(), xg.n_points()), |(n, j)| {
                (n as f64 * 0.3).sin() + 0.1 * j as f64
            }),
        };
        let u = adjoint_solve_segment(&p, &g, &residual, &tg, &xg, Scheme::Implicit).unwrap();
        let last = tg.n_steps() - 1;
        for j in 0..xg.n_points() {
            assert_eq!(u.values[[last, j]], 0.0);
        }
    }

    #[test]
    fn constant_residual_matches_scalar_ode() {
        // Case I, residual = rho, G = 0, G_L > 0, zero flux: U is spatially
        // uniform and solves -C_M U_t + G_L U = rho, U(T) = 0, i.e.
        // U(t) = (rho/G_L)(1 - exp(G_L (t - T) / C_M)).
        let mut p = params();
        p.g_leak = 0.5;
        let rho = 0.8;
        let xg = build_segment_grid(0.1, 0.01).unwrap();
        let run = |n_steps: usize| {
            let tg = TimeGrid::new(2.0, n_steps).unwrap();
            let g = ConductanceField::zeros(1, xg.n_points(), None);
            let residual = Observation {
                domain: ObservationDomain::FullDomain,
                values: Array2::from_elem((tg.n_steps(), xg.n_points()), rho),
            };
            let u = adjoint_solve_segment(&p, &g, &residual, &tg, &xg, Scheme::Implicit).unwrap();
            let mut err: f64 = 0.0;
            for n in 0..tg.n_steps() {
                let t = tg.node(n);
                let exact = rho / p.g_leak * (1.0 - (p.g_leak * (t - 2.0) / p.c_m).exp());
                for j in 0..xg.n_points() {
                    err = err.max((u.values[[n, j]] - exact).abs());
                }
            }
            err
        };
        let coarse = run(21);
        let fine = run(41);
        assert!(coarse < 0.05, "O(dt) accuracy expected, got {coarse}");
        let order = (coarse / fine).log2();
        assert!(order > 0.8, "first order in dt expected, got {order}");
    }

    #[test]
    fn tree_path_graph_matches_segment() {
        use crate::tree::{build_tree, EdgeSpec, VertexKind};
        let p = params();
        let xg = build_segment_grid(0.1, 0.01).unwrap();
        let tg = TimeGrid::from_step(1.0, 0.05).unwrap();
        let tree = build_tree(
            &[EdgeSpec { id: 1, length: 0.1, near_vertex: 1, far_vertex: 2 }],
            0.01,
            &[(1, VertexKind::Terminal), (2, VertexKind::Terminal)],
        )
        .unwrap();
        let profile = Array1::from_iter(xg.nodes().map(|x| 0.2 + x));
        let g_seg = ConductanceField::new_static(vec![profile.clone()]);
        // map segment nodes onto the tree's global order
        let mut tree_profile = Array1::zeros(tree.n_global());
        for local in 0..11 {
            tree_profile[tree.global(0, local)] = profile[local];
        }
        let g_tree = ConductanceField::new_static(vec![tree_profile]);
        let mut res_seg = Array2::zeros((tg.n_steps(), xg.n_points()));
        for n in 0..tg.n_steps() {
            for j in 0..xg.n_points() {
                res_seg[[n, j]] = ((n + 1) as f64).ln() + 0.2 * j as f64;
            }
        }
        let mut res_tree = Array2::zeros((tg.n_steps(), tree.n_global()));
        for n in 0..tg.n_steps() {
            for local in 0..11 {
                res_tree[[n, tree.global(0, local)]] = res_seg[[n, local]];
            }
        }
        let u_seg = adjoint_solve_segment(
            &p,
            &g_seg,
            &Observation { domain: ObservationDomain::FullDomain, values: res_seg },
            &tg,
            &xg,
            Scheme::Implicit,
        )
        .unwrap();
        let u_tree = adjoint_solve_tree(
            &p,
            &g_tree,
            &Observation { domain: ObservationDomain::FullDomain, values: res_tree },
            &tg,
            &tree,
            Scheme::Implicit,
        )
        .unwrap();
        let scale = u_seg.values.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        for n in 0..tg.n_steps() {
            for local in 0..11 {
                let d = (u_seg.values[[n, local]] - u_tree.values[[n, tree.global(0, local)]]).abs();
                assert!(d <= 1e-12 * scale, "path-graph mismatch {d} at ({n}, {local})");
            }
        }
    }

    #[test]
    fn symmetric_tree_residual_gives_symmetric_adjoint() {
        use crate::tree::{build_tree, EdgeSpec, VertexKind};
        let p = params();
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
        let tg = TimeGrid::from_step(1.0, 0.05).unwrap();
        let g = ConductanceField::new_static(vec![Array1::from_elem(tree.n_global(), 0.3)]);
        let mut res = Array2::zeros((tg.n_steps(), tree.n_global()));
        for n in 0..tg.n_steps() {
            for e_idx in 0..3 {
                for local in 0..11 {
                    let v = (n as f64 * 0.1).cos() + local as f64 * 0.05;
                    res[[n, tree.global(e_idx, local)]] = if e_idx == 0 { 2.0 * v } else { v };
                }
            }
        }
        let u = adjoint_solve_tree(
            &p,
            &g,
            &Observation { domain: ObservationDomain::FullDomain, values: res },
            &tg,
            &tree,
            Scheme::Implicit,
        )
        .unwrap();
        let scale = u.values.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        for n in 0..tg.n_steps() {
            for local in 0..11 {
                let d = (u.values[[n, tree.global(1, local)]] - u.values[[n, tree.global(2, local)]]).abs();
                assert!(d <= 1e-13 * scale);
            }
        }
    }

    #[test]
    fn gateaux_zero_direction_and_initial_row() {
        let p = params();
        let xg = build_segment_grid(0.1, 0.01).unwrap();
        let tg = TimeGrid::from_step(1.0, 0.1).unwrap();
        let g = ConductanceField::new_static(vec![Array1::from_elem(xg.n_points(), 0.3)]);
        let bc = BoundaryProtocol::current_injection(&p, crate::forward::default_current);
        let v = forward_solve_segment(&p, &g, &bc, &tg, &xg, Scheme::Implicit).unwrap();
        let theta0 = ConductanceField::zeros(1, xg.n_points(), None);
        let w = gateaux_solve_segment(&p, &g, &v, &theta0, &tg, &xg).unwrap();
        assert!(w.values.iter().all(|&x| x == 0.0));
        let theta = ConductanceField::new_static(vec![Array1::from_elem(xg.n_points(), 0.2)]);
        let w = gateaux_solve_segment(&p, &g, &v, &theta, &tg, &xg).unwrap();
        assert!(w.values.row(0).iter().all(|&x| x == 0.0));
        assert!(w.values.row(5).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn gateaux_matches_directional_finite_difference() {
        // coarse 11-node x 11-step grid, lambda = 1e-6
        let p = params();
        let xg = build_segment_grid(0.1, 0.01).unwrap();
        let tg = TimeGrid::new(2.0, 11).unwrap();
        let g = ConductanceField::new_static(vec![Array1::from_iter(
            xg.nodes().map(|x| 0.25 + 2.0 * x),
        )]);
        let theta = ConductanceField::new_static(vec![Array1::from_iter(
            xg.nodes().map(|x| 0.6 - 3.0 * x),
        )]);
        let bc = BoundaryProtocol::current_injection(&p, crate::forward::default_current);
        let v = forward_solve_segment(&p, &g, &bc, &tg, &xg, Scheme::Implicit).unwrap();
        let w = gateaux_solve_segment(&p, &g, &v, &theta, &tg, &xg).unwrap();
        let lambda = 1e-6;
        let mut g_pert = g.clone();
        for (gv, &tv) in g_pert.ion_mut(0).iter_mut().zip(theta.ion(0).iter()) {
            *gv += lambda * tv;
        }
        let v_pert = forward_solve_segment(&p, &g_pert, &bc, &tg, &xg, Scheme::Implicit).unwrap();
        let geo = Geometry::Segment(xg.clone());
        let w_gamma = restrict_to_gamma(&w, ObservationDomain::FullDomain, &geo).unwrap();
        let fd = (&v_pert.values - &v.values) / lambda;
        let scale = w_gamma.values.iter().fold(1e-300f64, |m, &x| m.max(x.abs()));
        let mut worst = 0.0f64;
        for (a, b) in fd.iter().zip(w_gamma.values.iter()) {
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-4 * scale, "fd mismatch {worst} vs scale {scale}");
    }

    #[test]
    fn gateaux_is_linear() {
        let p = params();
        let xg = build_segment_grid(0.1, 0.02).unwrap();
        let tg = TimeGrid::new(1.0, 6).unwrap();
        let g = ConductanceField::new_static(vec![Array1::from_elem(xg.n_points(), 0.3)]);
        let bc = BoundaryProtocol::current_injection(&p, crate::forward::default_current);
        let v = forward_solve_segment(&p, &g, &bc, &tg, &xg, Scheme::Implicit).unwrap();
        let t1 = ConductanceField::new_static(vec![Array1::from_iter(xg.nodes().map(|x| x * 3.0))]);
        let t2 = ConductanceField::new_static(vec![Array1::from_iter(xg.nodes().map(|x| 1.0 - x))]);
        let sum = ConductanceField::new_static(vec![
            Array1::from_iter(xg.nodes().map(|x| x * 3.0 + 1.0 - x)),
        ]);
        let w1 = gateaux_solve_segment(&p, &g, &v, &t1, &tg, &xg).unwrap();
        let w2 = gateaux_solve_segment(&p, &g, &v, &t2, &tg, &xg).unwrap();
        let ws = gateaux_solve_segment(&p, &g, &v, &sum, &tg, &xg).unwrap();
        let scale = ws.values.iter().fold(1e-300f64, |m, &x| m.max(x.abs()));
        for ((a, b), c) in w1.values.iter().zip(w2.values.iter()).zip(ws.values.iter()) {
            assert!((a + b - c).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn adjoint_identity_single_level_sanity() {
        // |<rho, W>_Gamma + sum_i <theta_i, (V-E_i) U>_Omega| <= C (dx^2 + dt) * scale
        let p = CableParameters {
            ions: vec![Ion::new("K", -12.0), Ion::new("Na", 115.0)],
            ..params()
        };
        let xg = build_segment_grid(0.1, 0.0025).unwrap();
        let tg = TimeGrid::new(2.0, 81).unwrap();
        let geo = Geometry::Segment(xg.clone());
        let l = xg.length();
        let t_final = tg.t_final();
        let nx = xg.n_points();
        let nt = tg.n_steps();
        let g = ConductanceField::new_static(vec![
            Array1::from_iter(xg.nodes().map(|x| 0.3 + 0.2 * (std::f64::consts::PI * x / l).cos())),
            Array1::from_iter(xg.nodes().map(|x| 0.25 + 0.15 * (0.5 * std::f64::consts::PI * x / l).sin())),
        ]);
        let theta = ConductanceField::new_static(vec![
            Array1::from_iter(xg.nodes().map(|x| 0.5 + x / l)),
            Array1::from_iter(xg.nodes().map(|x| (std::f64::consts::PI * x / l).cos())),
        ]);
        let rho = Array2::from_shape_fn((nt, nx), |(n, j)| {
            let t = tg.node(n);
            let x = xg.node(j);
            (std::f64::consts::PI * t / t_final).sin()
                * (1.0 + (2.0 * std::f64::consts::PI * x / l).cos())
        });
        let bc = BoundaryProtocol::current_injection(&p, crate::forward::default_current);
        let v = forward_solve_segment(&p, &g, &bc, &tg, &xg, Scheme::Implicit).unwrap();
        for domain in [ObservationDomain::FullDomain, ObservationDomain::Endpoints] {
            let residual = match domain {
                ObservationDomain::FullDomain => {
                    Observation { domain, values: rho.clone() }
                }
                ObservationDomain::Endpoints => {
                    let mut ends = Array2::zeros((nt, 2));
                    for n in 0..nt {
                        ends[[n, 0]] = rho[[n, 0]];
                        ends[[n, 1]] = rho[[n, nx - 1]];
                    }
                    Observation { domain, values: ends }
                }
            };
            let u = adjoint_solve_segment(&p, &g, &residual, &tg, &xg, Scheme::Implicit).unwrap();
            let w = gateaux_solve_segment(&p, &g, &v, &theta, &tg, &xg).unwrap();
            let w_gamma = restrict_to_gamma(&w, domain, &geo).unwrap();
            let lhs = crate::observation::gamma_inner(&residual, &w_gamma, &tg, &geo).unwrap();
            let mut rhs = 0.0;
            for (i, ion) in p.ions.iter().enumerate() {
                let field = Array2::from_shape_fn((nt, nx), |(n, j)| {
                    theta.ion(i)[[0, j]] * (v.values[[n, j]] - ion.reversal) * u.values[[n, j]]
                });
                rhs += crate::observation::omega_inner(&field, &Array2::ones((nt, nx)), &tg, &geo).unwrap();
            }
            let mismatch = (lhs + rhs).abs() / lhs.abs().max(rhs.abs());
            let budget = 10.0 * (xg.dx() * xg.dx() + tg.dt());
            assert!(mismatch <= budget, "{domain:?}: mismatch {mismatch} > budget {budget}");
        }
    }
}
