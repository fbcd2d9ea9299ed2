//! Space(-time) fields on a geometry's global node set.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Per-ion conductance values, G_i >= 0 on a space grid or a space-time grid.
///
/// Each ion holds an array of shape (rows, n_nodes) where rows is 1 for a
/// time-independent field and n_steps otherwise. Tree fields live on global
/// nodes (vertices counted once).
#[derive(Clone, Debug, PartialEq)]
pub struct ConductanceField {
    per_ion: Vec<Array2<f64>>,
    time_dependent: bool,
}

impl ConductanceField {
    pub fn new_static(per_ion: Vec<Array1<f64>>) -> Self {
        let per_ion = per_ion
            .into_iter()
            .map(|a| {
                let n = a.len();
                a.into_shape_with_order((1, n)).expect("row reshape")
            })
            .collect();
        Self { per_ion, time_dependent: false }
    }

    pub fn new_dynamic(per_ion: Vec<Array2<f64>>) -> Self {
        Self { per_ion, time_dependent: true }
    }

    pub fn zeros(n_ions: usize, n_nodes: usize, n_steps: Option<usize>) -> Self {
        match n_steps {
            None => Self {
                per_ion: vec![Array2::zeros((1, n_nodes)); n_ions],
                time_dependent: false,
            },
            Some(rows) => Self {
                per_ion: vec![Array2::zeros((rows, n_nodes)); n_ions],
                time_dependent: true,
            },
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        self.time_dependent
    }

    pub fn n_ions(&self) -> usize {
        self.per_ion.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.per_ion[0].ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.per_ion[0].nrows()
    }

    pub fn ion(&self, i: usize) -> &Array2<f64> {
        &self.per_ion[i]
    }

    pub fn ion_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.per_ion[i]
    }

    /// Spatial profile of ion `i` at time row `step` (row 0 when static).
    pub fn ion_row(&self, i: usize, step: usize) -> ArrayView1<'_, f64> {
        let row = if self.time_dependent { step } else { 0 };
        self.per_ion[i].row(row)
    }

    pub fn value(&self, i: usize, step: usize, node: usize) -> f64 {
        let row = if self.time_dependent { step } else { 0 };
        self.per_ion[i][[row, node]]
    }

    /// Checks ion count and array shapes against a problem's grids.
    pub fn validate_for(&self, n_ions: usize, n_nodes: usize, n_steps: usize) -> Result<()> {
        if self.n_ions() != n_ions {
            return Err(Error::Shape(format!(
                "conductance has {} ions, parameters declare {n_ions}",
                self.n_ions()
            )));
        }
        let want_rows = if self.time_dependent { n_steps } else { 1 };
        for (i, a) in self.per_ion.iter().enumerate() {
            if a.dim() != (want_rows, n_nodes) {
                return Err(Error::Shape(format!(
                    "ion {i} field is {:?}, expected ({want_rows}, {n_nodes})",
                    a.dim()
                )));
            }
        }
        Ok(())
    }

    /// Keeps only the first `rows` time rows (no-op for static fields).
    pub fn truncated_rows(&self, rows: usize) -> Self {
        if !self.time_dependent {
            return self.clone();
        }
        Self {
            per_ion: self
                .per_ion
                .iter()
                .map(|a| a.slice(ndarray::s![..rows, ..]).to_owned())
                .collect(),
            time_dependent: true,
        }
    }
}

/// Membrane potential on the full (time x global node) index space.
#[derive(Clone, Debug, PartialEq)]
pub struct VoltageField {
    pub values: Array2<f64>,
}

/// Adjoint state on the full (time x global node) index space, U(T, .) = 0.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointField {
    pub values: Array2<f64>,
}
