//! Physical constants of the passive cable model.

use crate::error::{Error, Result};

/// An ion species with its Nernst reversal potential (mV).
#[derive(Clone, Debug, PartialEq)]
pub struct Ion {
    pub name: String,
    pub reversal: f64,
}

impl Ion {
    pub fn new(name: &str, reversal: f64) -> Self {
        Self { name: name.into(), reversal }
    }
}

/// Membrane and axial constants. Units follow the paper's tables:
/// capacitance in uF/cm^2, radius in cm, resistivity in Ohm*cm,
/// conductances in mS/cm^2, potentials in mV, current in mA.
#[derive(Clone, Debug, PartialEq)]
pub struct CableParameters {
    pub c_m: f64,
    pub fiber_radius: f64,
    pub axial_resistivity: f64,
    pub g_leak: f64,
    pub e_leak: f64,
    pub ions: Vec<Ion>,
}

impl CableParameters {
    pub fn validate(&self) -> Result<()> {
        if !(self.c_m > 0.0) || !(self.fiber_radius > 0.0) || !(self.axial_resistivity > 0.0) {
            return Err(Error::Invalid(format!(
                "C_M, r_a and R must be positive, got ({}, {}, {})",
                self.c_m, self.fiber_radius, self.axial_resistivity
            )));
        }
        if self.g_leak < 0.0 {
            return Err(Error::Invalid(format!("leak conductance must be >= 0, got {}", self.g_leak)));
        }
        if self.ions.is_empty() {
            return Err(Error::Invalid("at least one ion is required".into()));
        }
        for (i, ion) in self.ions.iter().enumerate() {
            if self.ions[..i].iter().any(|o| o.name == ion.name) {
                return Err(Error::Invalid(format!("duplicate ion name {:?}", ion.name)));
            }
        }
        Ok(())
    }

    /// Coefficient of V_xx in the cable equation, r_a / (2R).
    pub fn axial_coeff(&self) -> f64 {
        self.fiber_radius / (2.0 * self.axial_resistivity)
    }

    pub fn n_ions(&self) -> usize {
        self.ions.len()
    }
}
