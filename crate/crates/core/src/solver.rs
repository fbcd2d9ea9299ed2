//! Time steppers for the segment: backward Euler with a tridiagonal solve
//! per step (Thomas algorithm, factorization reused when the coefficients
//! are time-independent) and forward Euler under the diffusion bound.
//!
//! Both march the linear parabolic problem
//!     C_M y_t = kappa y_xx - c(t,x) y + s(t,x)
//! with ghost-node Neumann conditions y_x(t,0) = p, y_x(t,L) = q.
//! Coefficients, sources and fluxes are sampled at the base level t_n of
//! each step t_n -> t_{n+1}.

use ndarray::Array2;

use crate::error::{Error, Result};

pub(crate) struct Tridiag {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Tridiag {
    pub fn zeros(n: usize) -> Self {
        Self { lower: vec![0.0; n - 1], diag: vec![0.0; n], upper: vec![0.0; n - 1] }
    }
}

/// LU factors of a tridiagonal matrix: row multipliers and pivot inverses.
pub(crate) struct TridiagFactors {
    mult: Vec<f64>,
    inv_piv: Vec<f64>,
    upper: Vec<f64>,
}

impl TridiagFactors {
    pub fn zeros(n: usize) -> Self {
        Self { mult: vec![0.0; n - 1], inv_piv: vec![0.0; n], upper: vec![0.0; n - 1] }
    }

    pub fn factor(&mut self, m: &Tridiag) -> Result<()> {
        let n = m.diag.len();
        let mut piv = m.diag[0];
        if piv == 0.0 || !piv.is_finite() {
            return Err(Error::NonFinite("tridiagonal pivot"));
        }
        self.inv_piv[0] = 1.0 / piv;
        for i in 1..n {
            let mult = m.lower[i - 1] * self.inv_piv[i - 1];
            self.mult[i - 1] = mult;
            self.upper[i - 1] = m.upper[i - 1];
            piv = m.diag[i] - mult * m.upper[i - 1];
            if piv == 0.0 || !piv.is_finite() {
                return Err(Error::NonFinite("tridiagonal pivot"));
            }
            self.inv_piv[i] = 1.0 / piv;
        }
        Ok(())
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = rhs.len();
        for i in 1..n {
            rhs[i] -= self.mult[i - 1] * rhs[i - 1];
        }
        rhs[n - 1] *= self.inv_piv[n - 1];
        for i in (0..n - 1).rev() {
            rhs[i] = (rhs[i] - self.upper[i] * rhs[i + 1]) * self.inv_piv[i];
        }
    }
}

/// Implicit-step matrix for reaction profile `c`: diagonal
/// C_M/dt + 2 beta + c_j, off-diagonals -beta, doubled at the ghost rows.
pub(crate) fn assemble_implicit(tri: &mut Tridiag, c: &[f64], c_m_dt: f64, beta: f64) {
    let n = c.len();
    for j in 0..n {
        tri.diag[j] = c_m_dt + 2.0 * beta + c[j];
    }
    for j in 0..n - 1 {
        tri.lower[j] = -beta;
        tri.upper[j] = -beta;
    }
    tri.upper[0] = -2.0 * beta;
    tri.lower[n - 2] = -2.0 * beta;
}

fn check_finite(row: &[f64], label: &'static str) -> Result<()> {
    if row.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(label))
    }
}

/// Fills per-step reaction and source profiles at the base level.
pub(crate) type CoeffFill<'a> = dyn FnMut(usize, &mut [f64], &mut [f64]) + 'a;
/// Per-step (near, far) Neumann flux values at the base level.
pub(crate) type FluxFill<'a> = dyn FnMut(usize) -> (f64, f64) + 'a;

pub(crate) fn march_segment_implicit(
    n_steps: usize,
    kappa: f64,
    c_m: f64,
    dt: f64,
    dx: f64,
    y0: &[f64],
    coeffs: &mut CoeffFill<'_>,
    fluxes: &mut FluxFill<'_>,
    coeffs_static: bool,
    label: &'static str,
) -> Result<Array2<f64>> {
    let n = y0.len();
    let beta = kappa / (dx * dx);
    let c_m_dt = c_m / dt;
    let mut out = Array2::zeros((n_steps, n));
    out.row_mut(0).iter_mut().zip(y0).for_each(|(o, &v)| *o = v);
    check_finite(y0, label)?;

    let mut c = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut tri = Tridiag::zeros(n);
    let mut fac = TridiagFactors::zeros(n);
    let mut rhs = vec![0.0; n];
    let mut factored = false;

    for step in 0..n_steps - 1 {
        if !coeffs_static || !factored {
            coeffs(step, &mut c, &mut s);
            assemble_implicit(&mut tri, &c, c_m_dt, beta);
            fac.factor(&tri)?;
            factored = true;
        } else {
            coeffs(step, &mut c, &mut s);
        }
        let (p, q) = fluxes(step);
        {
            let prev = out.row(step);
            for j in 0..n {
                rhs[j] = c_m_dt * prev[j] + s[j];
            }
        }
        rhs[0] -= 2.0 * kappa / dx * p;
        rhs[n - 1] += 2.0 * kappa / dx * q;
        fac.solve_in_place(&mut rhs);
        check_finite(&rhs, label)?;
        out.row_mut(step + 1).iter_mut().zip(&rhs).for_each(|(o, &v)| *o = v);
    }
    Ok(out)
}

/// Largest stable forward-Euler step for the diffusion part,
/// dt <= dx^2 C_M / (2 kappa) (the spec's dx^2 C_M R / r_a).
pub(crate) fn explicit_stability_bound(kappa: f64, c_m: f64, dx: f64) -> f64 {
    dx * dx * c_m / (2.0 * kappa)
}

pub(crate) fn march_segment_explicit(
    n_steps: usize,
    kappa: f64,
    c_m: f64,
    dt: f64,
    dx: f64,
    y0: &[f64],
    coeffs: &mut CoeffFill<'_>,
    fluxes: &mut FluxFill<'_>,
    label: &'static str,
) -> Result<Array2<f64>> {
    let bound = explicit_stability_bound(kappa, c_m, dx);
    if dt > bound * (1.0 + 1e-12) {
        return Err(Error::Unstable { dt, bound });
    }
    let n = y0.len();
    let inv_dx2 = 1.0 / (dx * dx);
    let mut out = Array2::zeros((n_steps, n));
    out.row_mut(0).iter_mut().zip(y0).for_each(|(o, &v)| *o = v);
    check_finite(y0, label)?;

    let mut c = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut next = vec![0.0; n];
    for step in 0..n_steps - 1 {
        coeffs(step, &mut c, &mut s);
        let (p, q) = fluxes(step);
        {
            let y = out.row(step);
            for j in 1..n - 1 {
                let d2 = (y[j - 1] - 2.0 * y[j] + y[j + 1]) * inv_dx2;
                next[j] = y[j] + dt / c_m * (kappa * d2 - c[j] * y[j] + s[j]);
            }
            let d2_near = 2.0 * (y[1] - y[0]) * inv_dx2 - 2.0 * p / dx;
            next[0] = y[0] + dt / c_m * (kappa * d2_near - c[0] * y[0] + s[0]);
            let d2_far = 2.0 * (y[n - 2] - y[n - 1]) * inv_dx2 + 2.0 * q / dx;
            next[n - 1] = y[n - 1] + dt / c_m * (kappa * d2_far - c[n - 1] * y[n - 1] + s[n - 1]);
        }
        check_finite(&next, label)?;
        out.row_mut(step + 1).iter_mut().zip(&next).for_each(|(o, &v)| *o = v);
    }
    Ok(out)
}
