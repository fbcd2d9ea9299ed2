//! Time steppers on branched trees.
//!
//! Each step solves the same linear parabolic problem as on a segment, with
//! continuity at shared vertex nodes, ghost-node Neumann rows at terminal
//! vertices, and the discrete Kirchhoff balance
//!     sum_e (-3 y_v + 4 y_a + (-1) y_b) = 0
//! at interior vertices, built from second-order one-sided differences along
//! each incident edge toward the vertex (a, b = first and second nodes into
//! the edge).
//!
//! The implicit step eliminates edge-interior unknowns onto the vertex values
//! (three tridiagonal solves per edge), solves the small dense vertex system,
//! and back-substitutes.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::solver::{explicit_stability_bound, Tridiag, TridiagFactors};
use crate::tree::{EdgeEnd, TreeGeometry, VertexKind};

/// Dense Gaussian elimination with partial pivoting for the vertex system.
fn dense_solve(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<()> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty");
        a.swap(col, piv);
        b.swap(col, piv);
        let p = a[col][col];
        if p == 0.0 || !p.is_finite() {
            return Err(Error::NonFinite("vertex system pivot"));
        }
        for row in col + 1..n {
            let f = a[row][col] / p;
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    for i in (0..n).rev() {
        let mut acc = b[i];
        for k in i + 1..n {
            acc -= a[i][k] * b[k];
        }
        b[i] = acc / a[i][i];
    }
    Ok(())
}

/// Value of a local node as an affine function of the edge's two vertex
/// unknowns: constant + coef_near * y_near + coef_far * y_far.
#[derive(Clone, Copy)]
struct Condensed {
    constant: f64,
    coef_near: f64,
    coef_far: f64,
}

struct EdgeScratch {
    globals: Vec<usize>,
    tri: Tridiag,
    fac: TridiagFactors,
    x0: Vec<f64>,
    xu: Vec<f64>,
    xv: Vec<f64>,
}

impl EdgeScratch {
    fn expr(&self, local: usize, n_points: usize) -> Condensed {
        if local == 0 {
            Condensed { constant: 0.0, coef_near: 1.0, coef_far: 0.0 }
        } else if local == n_points - 1 {
            Condensed { constant: 0.0, coef_near: 0.0, coef_far: 1.0 }
        } else {
            let i = local - 1;
            Condensed { constant: self.x0[i], coef_near: self.xu[i], coef_far: self.xv[i] }
        }
    }
}

pub(crate) fn march_tree_implicit(
    tree: &TreeGeometry,
    n_steps: usize,
    kappa: f64,
    c_m: f64,
    dt: f64,
    y0: &[f64],
    coeffs: &mut dyn FnMut(usize, &mut [f64], &mut [f64]),
    term_flux: &mut dyn FnMut(usize, &mut [f64]),
    coeffs_static: bool,
    label: &'static str,
) -> Result<Array2<f64>> {
    let dx = tree.dx();
    let beta = kappa / (dx * dx);
    let c_m_dt = c_m / dt;
    let n_global = tree.n_global();
    let n_vertices = tree.vertices().len();
    if y0.len() != n_global {
        return Err(Error::Shape(format!("initial state has {} nodes, tree has {n_global}", y0.len())));
    }

    let mut out = Array2::zeros((n_steps, n_global));
    out.row_mut(0).iter_mut().zip(y0).for_each(|(o, &v)| *o = v);
    if !y0.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(label));
    }

    let mut c = vec![0.0; n_global];
    let mut s = vec![0.0; n_global];
    let n_terminals = tree.terminal_vertices().count();
    let mut flux = vec![0.0; n_terminals];

    let mut edges: Vec<EdgeScratch> = tree
        .edges()
        .iter()
        .enumerate()
        .map(|(e_idx, e)| {
            let m = e.n_points - 2;
            EdgeScratch {
                globals: (0..e.n_points).map(|l| tree.global(e_idx, l)).collect(),
                tri: Tridiag::zeros(m),
                fac: TridiagFactors::zeros(m),
                x0: vec![0.0; m],
                xu: vec![0.0; m],
                xv: vec![0.0; m],
            }
        })
        .collect();

    let mut a_mat: Vec<Vec<f64>> = vec![vec![0.0; n_vertices]; n_vertices];
    let mut b_vec = vec![0.0; n_vertices];
    let mut new_row = vec![0.0; n_global];
    let mut factored = false;

    for step in 0..n_steps - 1 {
        coeffs(step, &mut c, &mut s);
        term_flux(step, &mut flux);
        let refresh = !coeffs_static || !factored;

        for (e, sc) in tree.edges().iter().zip(edges.iter_mut()) {
            let m = e.n_points - 2;
            if refresh {
                for i in 0..m {
                    sc.tri.diag[i] = c_m_dt + 2.0 * beta + c[sc.globals[i + 1]];
                }
                for i in 0..m - 1 {
                    sc.tri.lower[i] = -beta;
                    sc.tri.upper[i] = -beta;
                }
                sc.fac.factor(&sc.tri)?;
                sc.xu.iter_mut().for_each(|v| *v = 0.0);
                sc.xu[0] = beta;
                sc.fac.solve_in_place(&mut sc.xu);
                sc.xv.iter_mut().for_each(|v| *v = 0.0);
                sc.xv[m - 1] = beta;
                sc.fac.solve_in_place(&mut sc.xv);
            }
            let prev = out.row(step);
            for i in 0..m {
                let g = sc.globals[i + 1];
                sc.x0[i] = c_m_dt * prev[g] + s[g];
            }
            sc.fac.solve_in_place(&mut sc.x0);
        }
        factored = true;

        for row in a_mat.iter_mut() {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
        b_vec.iter_mut().for_each(|v| *v = 0.0);

        let mut terminal_order = 0usize;
        let prev = out.row(step);
        for (v_idx, vertex) in tree.vertices().iter().enumerate() {
            match vertex.kind {
                VertexKind::Terminal => {
                    let (e_idx, end) = vertex.incident[0];
                    let e = &tree.edges()[e_idx];
                    let sc = &edges[e_idx];
                    let gv = tree.index_map().vertex_global(v_idx);
                    let adj_local = match end {
                        EdgeEnd::Near => 1,
                        EdgeEnd::Far => e.n_points - 2,
                    };
                    let adj = sc.expr(adj_local, e.n_points);
                    let other = match end {
                        EdgeEnd::Near => e.far_vertex,
                        EdgeEnd::Far => e.near_vertex,
                    };
                    let (self_coef, other_coef) = match end {
                        EdgeEnd::Near => (adj.coef_near, adj.coef_far),
                        EdgeEnd::Far => (adj.coef_far, adj.coef_near),
                    };
                    a_mat[v_idx][v_idx] += c_m_dt + 2.0 * beta + c[gv] - 2.0 * beta * self_coef;
                    a_mat[v_idx][other] += -2.0 * beta * other_coef;
                    let flux_term = match end {
                        EdgeEnd::Near => -2.0 * kappa / dx * flux[terminal_order],
                        EdgeEnd::Far => 2.0 * kappa / dx * flux[terminal_order],
                    };
                    b_vec[v_idx] += c_m_dt * prev[gv] + s[gv] + flux_term + 2.0 * beta * adj.constant;
                    terminal_order += 1;
                }
                VertexKind::Interior => {
                    for &(e_idx, end) in &vertex.incident {
                        let e = &tree.edges()[e_idx];
                        let sc = &edges[e_idx];
                        let (la, lb) = match end {
                            EdgeEnd::Near => (1, 2),
                            EdgeEnd::Far => (e.n_points - 2, e.n_points - 3),
                        };
                        a_mat[v_idx][v_idx] += -3.0;
                        for (local, weight) in [(la, 4.0), (lb, -1.0)] {
                            let ex = sc.expr(local, e.n_points);
                            a_mat[v_idx][e.near_vertex] += weight * ex.coef_near;
                            a_mat[v_idx][e.far_vertex] += weight * ex.coef_far;
                            b_vec[v_idx] -= weight * ex.constant;
                        }
                    }
                }
            }
        }

        dense_solve(&mut a_mat, &mut b_vec)?;

        for (v_idx, &val) in b_vec.iter().enumerate() {
            new_row[tree.index_map().vertex_global(v_idx)] = val;
        }
        for (e, sc) in tree.edges().iter().zip(edges.iter()) {
            let yn = b_vec[e.near_vertex];
            let yf = b_vec[e.far_vertex];
            for i in 0..e.n_points - 2 {
                new_row[sc.globals[i + 1]] = sc.x0[i] + yn * sc.xu[i] + yf * sc.xv[i];
            }
        }
        if !new_row.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(label));
        }
        out.row_mut(step + 1).iter_mut().zip(&new_row).for_each(|(o, &v)| *o = v);
    }
    Ok(out)
}

pub(crate) fn march_tree_explicit(
    tree: &TreeGeometry,
    n_steps: usize,
    kappa: f64,
    c_m: f64,
    dt: f64,
    y0: &[f64],
    coeffs: &mut dyn FnMut(usize, &mut [f64], &mut [f64]),
    term_flux: &mut dyn FnMut(usize, &mut [f64]),
    label: &'static str,
) -> Result<Array2<f64>> {
    let dx = tree.dx();
    let bound = explicit_stability_bound(kappa, c_m, dx);
    if dt > bound * (1.0 + 1e-12) {
        return Err(Error::Unstable { dt, bound });
    }
    let inv_dx2 = 1.0 / (dx * dx);
    let n_global = tree.n_global();
    if y0.len() != n_global {
        return Err(Error::Shape(format!("initial state has {} nodes, tree has {n_global}", y0.len())));
    }
    let interiors: Vec<usize> = tree
        .vertices()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.kind == VertexKind::Interior)
        .map(|(i, _)| i)
        .collect();
    let interior_pos = {
        let mut pos = vec![usize::MAX; tree.vertices().len()];
        for (k, &v) in interiors.iter().enumerate() {
            pos[v] = k;
        }
        pos
    };
    let globals: Vec<Vec<usize>> = tree
        .edges()
        .iter()
        .enumerate()
        .map(|(e_idx, e)| (0..e.n_points).map(|l| tree.global(e_idx, l)).collect())
        .collect();

    let mut out = Array2::zeros((n_steps, n_global));
    out.row_mut(0).iter_mut().zip(y0).for_each(|(o, &v)| *o = v);
    if !y0.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(label));
    }

    let mut c = vec![0.0; n_global];
    let mut s = vec![0.0; n_global];
    let n_terminals = tree.terminal_vertices().count();
    let mut flux = vec![0.0; n_terminals];
    let mut next = vec![0.0; n_global];
    let n_int = interiors.len();
    let mut a_mat: Vec<Vec<f64>> = vec![vec![0.0; n_int]; n_int];
    let mut b_vec = vec![0.0; n_int];

    for step in 0..n_steps - 1 {
        coeffs(step, &mut c, &mut s);
        term_flux(step, &mut flux);
        let y = out.row(step);

        for (e_idx, e) in tree.edges().iter().enumerate() {
            let g = &globals[e_idx];
            for local in 1..e.n_points - 1 {
                let (gl, gc, gr) = (g[local - 1], g[local], g[local + 1]);
                let d2 = (y[gl] - 2.0 * y[gc] + y[gr]) * inv_dx2;
                next[gc] = y[gc] + dt / c_m * (kappa * d2 - c[gc] * y[gc] + s[gc]);
            }
        }
        let mut terminal_order = 0usize;
        for (v_idx, vertex) in tree.vertices().iter().enumerate() {
            if vertex.kind != VertexKind::Terminal {
                continue;
            }
            let (e_idx, end) = vertex.incident[0];
            let e = &tree.edges()[e_idx];
            let g = &globals[e_idx];
            let gv = tree.index_map().vertex_global(v_idx);
            let (adj, sign) = match end {
                EdgeEnd::Near => (g[1], -1.0),
                EdgeEnd::Far => (g[e.n_points - 2], 1.0),
            };
            let d2 = 2.0 * (y[adj] - y[gv]) * inv_dx2 + sign * 2.0 * flux[terminal_order] / dx;
            next[gv] = y[gv] + dt / c_m * (kappa * d2 - c[gv] * y[gv] + s[gv]);
            terminal_order += 1;
        }
        // interior vertices from the Kirchhoff balance on the updated values
        if n_int > 0 {
            for row in a_mat.iter_mut() {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
            b_vec.iter_mut().for_each(|v| *v = 0.0);
            for (k, &v_idx) in interiors.iter().enumerate() {
                for &(e_idx, end) in &tree.vertices()[v_idx].incident {
                    let e = &tree.edges()[e_idx];
                    let g = &globals[e_idx];
                    let (la, lb) = match end {
                        EdgeEnd::Near => (1, 2),
                        EdgeEnd::Far => (e.n_points - 2, e.n_points - 3),
                    };
                    a_mat[k][k] += -3.0;
                    for (local, weight) in [(la, 4.0), (lb, -1.0)] {
                        let vertex_at = if local == 0 {
                            Some(e.near_vertex)
                        } else if local == e.n_points - 1 {
                            Some(e.far_vertex)
                        } else {
                            None
                        };
                        match vertex_at {
                            Some(u) if interior_pos[u] != usize::MAX => {
                                a_mat[k][interior_pos[u]] += weight;
                            }
                            _ => b_vec[k] -= weight * next[g[local]],
                        }
                    }
                }
            }
            dense_solve(&mut a_mat, &mut b_vec)?;
            for (k, &v_idx) in interiors.iter().enumerate() {
                next[tree.index_map().vertex_global(v_idx)] = b_vec[k];
            }
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(label));
        }
        out.row_mut(step + 1).iter_mut().zip(&next).for_each(|(o, &v)| *o = v);
    }
    Ok(out)
}
