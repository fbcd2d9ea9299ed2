//! Observation domains, restrictions of fields to them, and the discrete
//! norms and inner products weighted the way the paper's error formulas are.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{Geometry, TimeGrid};

/// Where voltage data are measured: the full space-time domain, or the two
/// segment endpoints over all time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservationDomain {
    FullDomain,
    Endpoints,
}

impl ObservationDomain {
    /// The weights (alpha_1, alpha_2) selecting the interior source and the
    /// boundary source of the adjoint problem.
    pub fn alpha(self) -> (f64, f64) {
        match self {
            ObservationDomain::FullDomain => (1.0, 0.0),
            ObservationDomain::Endpoints => (0.0, 1.0),
        }
    }
}

/// Voltage data restricted to an observation domain. For `FullDomain` the
/// columns are all global nodes; for `Endpoints` two columns (x = 0, x = L).
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub domain: ObservationDomain,
    pub values: Array2<f64>,
}

impl Observation {
    pub fn n_steps(&self) -> usize {
        self.values.nrows()
    }

    /// Pointwise difference, used for residuals.
    pub fn sub(&self, other: &Observation) -> Result<Observation> {
        if self.domain != other.domain || self.values.dim() != other.values.dim() {
            return Err(Error::Shape("observations differ in domain or shape".into()));
        }
        Ok(Observation { domain: self.domain, values: &self.values - &other.values })
    }

    pub fn validate_for(&self, geometry: &Geometry, tgrid: &TimeGrid) -> Result<()> {
        let cols = match self.domain {
            ObservationDomain::FullDomain => geometry.n_nodes(),
            ObservationDomain::Endpoints => match geometry {
                Geometry::Segment(_) => 2,
                Geometry::Tree(_) => return Err(Error::TreeEndpoints),
            },
        };
        if self.values.dim() != (tgrid.n_steps(), cols) {
            return Err(Error::Shape(format!(
                "observation is {:?}, expected ({}, {cols})",
                self.values.dim(),
                tgrid.n_steps()
            )));
        }
        Ok(())
    }
}

/// Discrete l2(Gamma) inner product: (T/N)(L/J) weights over the full domain,
/// (T/N) per endpoint sample for endpoint data.
pub fn gamma_inner(a: &Observation, b: &Observation, tgrid: &TimeGrid, geometry: &Geometry) -> Result<f64> {
    if a.domain != b.domain || a.values.dim() != b.values.dim() {
        return Err(Error::Shape("gamma inner product needs matching observations".into()));
    }
    let tw = tgrid.t_final() / tgrid.n_steps() as f64;
    let dot: f64 = a.values.iter().zip(b.values.iter()).map(|(x, y)| x * y).sum();
    let w = match a.domain {
        ObservationDomain::FullDomain => tw * geometry.node_weight(),
        ObservationDomain::Endpoints => tw,
    };
    Ok(w * dot)
}

/// Discrete l2(Gamma) norm of an observation (Eq. for the paper's ||.||_{l2}).
pub fn gamma_norm(f: &Observation, tgrid: &TimeGrid, geometry: &Geometry) -> f64 {
    gamma_inner(f, f, tgrid, geometry).map(f64::sqrt).expect("same observation")
}

/// Discrete L2(Omega) inner product over the full space-time grid with the
/// same (T/N) x node-weight quadrature.
pub fn omega_inner(a: &Array2<f64>, b: &Array2<f64>, tgrid: &TimeGrid, geometry: &Geometry) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape("omega inner product needs matching shapes".into()));
    }
    let w = tgrid.t_final() / tgrid.n_steps() as f64 * geometry.node_weight();
    Ok(w * a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>())
}
