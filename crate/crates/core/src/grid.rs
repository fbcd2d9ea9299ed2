//! Uniform discretizations of time and of the segment [0, L].
//!
//! Grids are node-centered and include both endpoints: `t_n = n*dt` for
//! `n = 0..n_steps-1` with `t_{n_steps-1} = t_final`, and likewise in space.

use crate::error::{Error, Result};
use crate::tree::TreeGeometry;

/// One unit in the last place of `x`, used for the exact-divisibility check.
fn ulp(x: f64) -> f64 {
    x.next_up() - x
}

/// Number of intervals `total/step`, required to be integral to 0.5 ulp.
pub(crate) fn divide_exact(total: f64, step: f64, what: &str) -> Result<usize> {
    if !(total > 0.0) || !(step > 0.0) {
        return Err(Error::Grid(format!(
            "{what}: extent {total} and step {step} must be positive"
        )));
    }
    let ratio = total / step;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 0.5 * ulp(ratio) {
        return Err(Error::Grid(format!(
            "{what}: {total} is not an integer multiple of step {step} (ratio {ratio})"
        )));
    }
    Ok(n as usize)
}

/// Uniform time grid on [0, t_final] with nodes t_n = n*dt.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    t_final: f64,
    n_steps: usize,
    dt: f64,
}

impl TimeGrid {
    /// Grid with `n_steps` nodes including both t = 0 and t = t_final.
    pub fn new(t_final: f64, n_steps: usize) -> Result<Self> {
        if !(t_final > 0.0) || n_steps < 2 {
            return Err(Error::Grid(format!(
                "time grid needs t_final > 0 and at least 2 nodes, got ({t_final}, {n_steps})"
            )));
        }
        let dt = t_final / (n_steps - 1) as f64;
        Ok(Self { t_final, n_steps, dt })
    }

    /// Grid built from a step size that must divide t_final exactly.
    pub fn from_step(t_final: f64, dt: f64) -> Result<Self> {
        let intervals = divide_exact(t_final, dt, "time grid")?;
        Self::new(t_final, intervals + 1)
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    /// Number of grid nodes (the paper's N).
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn node(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    /// Grid extended by an integer horizon multiplier, keeping dt.
    pub fn extended(&self, multiplier: u32) -> Result<Self> {
        if multiplier == 0 {
            return Err(Error::Grid("horizon multiplier must be at least 1".into()));
        }
        let m = multiplier as usize;
        Self::new(self.t_final * m as f64, (self.n_steps - 1) * m + 1)
    }
}

/// Uniform spatial grid on [0, length] with nodes x_j = j*dx.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentGrid {
    length: f64,
    n_points: usize,
    dx: f64,
}

impl SegmentGrid {
    pub fn new(length: f64, n_points: usize) -> Result<Self> {
        if !(length > 0.0) || n_points < 2 {
            return Err(Error::Grid(format!(
                "segment grid needs length > 0 and at least 2 nodes, got ({length}, {n_points})"
            )));
        }
        let dx = length / (n_points - 1) as f64;
        Ok(Self { length, n_points, dx })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    /// Number of grid nodes (the paper's J).
    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn node(&self, j: usize) -> f64 {
        j as f64 * self.dx
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points).map(|j| self.node(j))
    }
}

/// Grid built from a step size that must divide the length exactly.
pub fn build_segment_grid(length: f64, dx: f64) -> Result<SegmentGrid> {
    let intervals = divide_exact(length, dx, "segment grid")?;
    SegmentGrid::new(length, intervals + 1)
}

/// Spatial domain of a problem: a single segment or a branched tree.
#[derive(Clone, Debug)]
pub enum Geometry {
    Segment(SegmentGrid),
    Tree(TreeGeometry),
}

impl Geometry {
    /// Total number of spatial degrees of freedom (tree vertices counted once).
    pub fn n_nodes(&self) -> usize {
        match self {
            Geometry::Segment(g) => g.n_points(),
            Geometry::Tree(t) => t.n_global(),
        }
    }

    /// Per-node weight of the discrete spatial quadrature used by the error
    /// and residual norms: L/J on a segment, dx on a tree.
    pub fn node_weight(&self) -> f64 {
        match self {
            Geometry::Segment(g) => g.length() / g.n_points() as f64,
            Geometry::Tree(t) => t.dx(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn paper_segment_grid() {
        let g = build_segment_grid(0.1, 0.001).unwrap();
        assert_eq!(g.n_points(), 101);
        assert_eq!(g.node(0), 0.0);
        assert!((g.node(100) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn single_cell_grid() {
        let g = build_segment_grid(1.0, 1.0).unwrap();
        assert_eq!(g.n_points(), 2);
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(1), 1.0);
    }

    #[test]
    fn tree_edge_grid() {
        let g = build_segment_grid(0.2, 0.01).unwrap();
        assert_eq!(g.n_points(), 21);
    }

    #[test]
    fn non_divisible_step_rejected() {
        let err = build_segment_grid(0.1, 0.0003).unwrap_err();
        assert!(err.to_string().contains("not an integer multiple"));
    }

    #[test]
    fn time_grid_paper() {
        let t = TimeGrid::from_step(20.0, 0.2).unwrap();
        assert_eq!(t.n_steps(), 101);
        assert_eq!(t.node(0), 0.0);
        assert!((t.node(100) - 20.0).abs() < 1e-12);
        let ext = t.extended(2).unwrap();
        assert_eq!(ext.n_steps(), 201);
        assert_eq!(ext.dt(), t.dt());
    }

    proptest! {
        #[test]
        fn coordinate_index_roundtrip(n in 2usize..300, scale in 1e-3f64..1e3) {
            let g = SegmentGrid::new(scale, n).unwrap();
            for j in 0..g.n_points() {
                let x = g.node(j);
                let back = (x / g.dx()).round() as usize;
                prop_assert_eq!(back, j);
            }
        }

        #[test]
        fn exact_multiples_accepted(k in 1usize..500, e in -10i32..0) {
            // power-of-two steps make length = dx * k exact in f64
            let dx = (2.0f64).powi(e);
            let length = dx * k as f64;
            let g = build_segment_grid(length, dx).unwrap();
            prop_assert_eq!(g.n_points(), k + 1);
        }

        #[test]
        fn half_step_offsets_rejected(k in 1usize..500, e in -10i32..0) {
            let dx = (2.0f64).powi(e);
            let length = dx * (k as f64 + 0.5);
            prop_assert!(build_segment_grid(length, dx).is_err());
        }
    }
}
