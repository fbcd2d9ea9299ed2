//! Branched trees as metric graphs: edges with uniform grids, shared vertex
//! nodes, Neumann data at terminals and Kirchhoff flux balance at interiors.

use crate::error::{Error, Result};
use crate::grid::divide_exact;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VertexKind {
    Terminal,
    Interior,
}

/// Which end of an edge a vertex sits at. `Near` is the local coordinate
/// origin (s = 0), `Far` is s = length.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeEnd {
    Near,
    Far,
}

/// Edge declaration for [`build_tree`]: id, length, near and far vertex ids.
#[derive(Clone, Debug)]
pub struct EdgeSpec {
    pub id: usize,
    pub length: f64,
    pub near_vertex: usize,
    pub far_vertex: usize,
}

#[derive(Clone, Debug)]
pub struct TreeEdge {
    pub id: usize,
    pub length: f64,
    pub n_points: usize,
    pub near_vertex: usize,
    pub far_vertex: usize,
}

#[derive(Clone, Debug)]
pub struct TreeVertex {
    pub id: usize,
    pub kind: VertexKind,
    /// Incident edges as (edge index, which end touches this vertex).
    pub incident: Vec<(usize, EdgeEnd)>,
}

/// Bijection between (edge, local node) pairs and global degrees of freedom.
/// Nodes at a shared vertex map to a single global index.
#[derive(Clone, Debug)]
pub struct GridIndexMap {
    vertex_global: Vec<usize>,
    edge_interior_start: Vec<usize>,
    /// Owner of each global index: (edge index, local index) on the
    /// lowest-index incident edge.
    owners: Vec<(usize, usize)>,
}

impl GridIndexMap {
    pub fn n_global(&self) -> usize {
        self.owners.len()
    }

    pub fn vertex_global(&self, vertex_idx: usize) -> usize {
        self.vertex_global[vertex_idx]
    }

    /// Global index of local node `local` on edge `edge_idx`
    /// (local 0 = near vertex, local n_points-1 = far vertex).
    pub fn global(&self, edge: &TreeEdge, edge_idx: usize, local: usize) -> usize {
        if local == 0 {
            self.vertex_global[edge.near_vertex]
        } else if local == edge.n_points - 1 {
            self.vertex_global[edge.far_vertex]
        } else {
            self.edge_interior_start[edge_idx] + local - 1
        }
    }

    /// Owning (edge index, local index) of a global node.
    pub fn owner(&self, global: usize) -> (usize, usize) {
        self.owners[global]
    }
}

/// Validated tree geometry with one uniform dx across all edges.
#[derive(Clone, Debug)]
pub struct TreeGeometry {
    dx: f64,
    edges: Vec<TreeEdge>,
    vertices: Vec<TreeVertex>,
    index_map: GridIndexMap,
}

/// A point of the tree: a vertex or a grid node along an edge.
#[derive(Clone, Copy, Debug)]
pub enum TreeNode {
    Vertex(usize),
    EdgePoint { edge: usize, local: usize },
}

pub fn build_tree(
    edges: &[EdgeSpec],
    dx: f64,
    vertices: &[(usize, VertexKind)],
) -> Result<TreeGeometry> {
    TreeGeometry::build(edges, dx, vertices)
}

impl TreeGeometry {
    /// Validates the incidence structure and builds the shared index map.
    ///
    /// Requirements: connected, |E| = |V| - 1 (hence acyclic), terminal
    /// vertices of degree 1, interior vertices of degree >= 2, and at least
    /// 3 grid nodes per edge so the one-sided vertex stencils fit.
    pub fn build(edges: &[EdgeSpec], dx: f64, vertices: &[(usize, VertexKind)]) -> Result<Self> {
        if edges.is_empty() || vertices.is_empty() {
            return Err(Error::Geometry("tree needs at least one edge and two vertices".into()));
        }
        if edges.len() != vertices.len() - 1 {
            return Err(Error::Geometry(format!(
                "not a tree: {} edges and {} vertices (need |E| = |V| - 1)",
                edges.len(),
                vertices.len()
            )));
        }
        let mut vid_to_idx = std::collections::BTreeMap::new();
        for (i, (vid, _)) in vertices.iter().enumerate() {
            if vid_to_idx.insert(*vid, i).is_some() {
                return Err(Error::Geometry(format!("duplicate vertex id {vid}")));
            }
        }
        let mut tree_vertices: Vec<TreeVertex> = vertices
            .iter()
            .map(|(id, kind)| TreeVertex { id: *id, kind: *kind, incident: Vec::new() })
            .collect();
        let mut tree_edges = Vec::with_capacity(edges.len());
        let mut seen_ids = std::collections::BTreeSet::new();
        for (e_idx, spec) in edges.iter().enumerate() {
            if !seen_ids.insert(spec.id) {
                return Err(Error::Geometry(format!("duplicate edge id {}", spec.id)));
            }
            if spec.near_vertex == spec.far_vertex {
                return Err(Error::Geometry(format!(
                    "edge {} is a self-loop at vertex {}",
                    spec.id, spec.near_vertex
                )));
            }
            let near = *vid_to_idx.get(&spec.near_vertex).ok_or_else(|| {
                Error::Geometry(format!("edge {} references unknown vertex {}", spec.id, spec.near_vertex))
            })?;
            let far = *vid_to_idx.get(&spec.far_vertex).ok_or_else(|| {
                Error::Geometry(format!("edge {} references unknown vertex {}", spec.id, spec.far_vertex))
            })?;
            let n_points = divide_exact(spec.length, dx, "tree edge grid")? + 1;
            if n_points < 3 {
                return Err(Error::Geometry(format!(
                    "edge {} has only {} grid nodes; the vertex stencil needs at least 3",
                    spec.id, n_points
                )));
            }
            tree_vertices[near].incident.push((e_idx, EdgeEnd::Near));
            tree_vertices[far].incident.push((e_idx, EdgeEnd::Far));
            tree_edges.push(TreeEdge {
                id: spec.id,
                length: spec.length,
                n_points,
                near_vertex: near,
                far_vertex: far,
            });
        }
        for v in &tree_vertices {
            let degree = v.incident.len();
            match v.kind {
                VertexKind::Terminal if degree != 1 => {
                    return Err(Error::Geometry(format!(
                        "terminal vertex {} has degree {degree}",
                        v.id
                    )))
                }
                VertexKind::Interior if degree < 2 => {
                    return Err(Error::Geometry(format!(
                        "interior vertex {} has degree {degree}",
                        v.id
                    )))
                }
                _ => {}
            }
        }
        // connectivity; with |E| = |V| - 1 this also rules out cycles
        let mut reached = vec![false; tree_vertices.len()];
        let mut stack = vec![0usize];
        reached[0] = true;
        while let Some(v) = stack.pop() {
            for &(e_idx, _) in &tree_vertices[v].incident {
                let e = &tree_edges[e_idx];
                for u in [e.near_vertex, e.far_vertex] {
                    if !reached[u] {
                        reached[u] = true;
                        stack.push(u);
                    }
                }
            }
        }
        if reached.iter().any(|r| !r) {
            return Err(Error::Geometry("graph is disconnected or contains a cycle".into()));
        }

        let n_vertices = tree_vertices.len();
        let mut edge_interior_start = Vec::with_capacity(tree_edges.len());
        let mut next = n_vertices;
        for e in &tree_edges {
            edge_interior_start.push(next);
            next += e.n_points - 2;
        }
        let mut owners = vec![(usize::MAX, usize::MAX); next];
        let vertex_global: Vec<usize> = (0..n_vertices).collect();
        for (e_idx, e) in tree_edges.iter().enumerate() {
            for local in 0..e.n_points {
                let g = if local == 0 {
                    vertex_global[e.near_vertex]
                } else if local == e.n_points - 1 {
                    vertex_global[e.far_vertex]
                } else {
                    edge_interior_start[e_idx] + local - 1
                };
                if owners[g].0 == usize::MAX {
                    owners[g] = (e_idx, local);
                }
            }
        }
        Ok(Self {
            dx,
            edges: tree_edges,
            vertices: tree_vertices,
            index_map: GridIndexMap { vertex_global, edge_interior_start, owners },
        })
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn edges(&self) -> &[TreeEdge] {
        &self.edges
    }

    pub fn vertices(&self) -> &[TreeVertex] {
        &self.vertices
    }

    pub fn index_map(&self) -> &GridIndexMap {
        &self.index_map
    }

    pub fn n_global(&self) -> usize {
        self.index_map.n_global()
    }

    pub fn vertex_idx(&self, vertex_id: usize) -> Result<usize> {
        self.vertices
            .iter()
            .position(|v| v.id == vertex_id)
            .ok_or_else(|| Error::Geometry(format!("unknown vertex id {vertex_id}")))
    }

    pub fn terminal_vertices(&self) -> impl Iterator<Item = (usize, &TreeVertex)> {
        self.vertices
            .iter()
            .enumerate()
            .filter(|(_, v)| v.kind == VertexKind::Terminal)
    }

    pub fn global(&self, edge_idx: usize, local: usize) -> usize {
        self.index_map.global(&self.edges[edge_idx], edge_idx, local)
    }

    /// Arclength position of a global node on its owning edge.
    pub fn node_arclength(&self, global: usize) -> (usize, f64) {
        let (e_idx, local) = self.index_map.owner(global);
        (e_idx, local as f64 * self.dx)
    }

    fn node_to_edge_point(&self, node: TreeNode) -> Result<(usize, usize)> {
        match node {
            TreeNode::EdgePoint { edge, local } => {
                let e = self
                    .edges
                    .get(edge)
                    .ok_or_else(|| Error::Geometry(format!("edge index {edge} is off the tree")))?;
                if local >= e.n_points {
                    return Err(Error::Geometry(format!(
                        "local node {local} is off edge {} ({} nodes)",
                        e.id, e.n_points
                    )));
                }
                Ok((edge, local))
            }
            TreeNode::Vertex(vid) => {
                let v_idx = self.vertex_idx(vid)?;
                let &(e_idx, end) = &self.vertices[v_idx].incident[0];
                let local = match end {
                    EdgeEnd::Near => 0,
                    EdgeEnd::Far => self.edges[e_idx].n_points - 1,
                };
                Ok((e_idx, local))
            }
        }
    }

    /// Distances from every vertex to `from`, weighted by edge lengths.
    fn vertex_distances(&self, from: usize) -> Vec<f64> {
        let mut dist = vec![f64::INFINITY; self.vertices.len()];
        dist[from] = 0.0;
        let mut stack = vec![from];
        while let Some(v) = stack.pop() {
            for &(e_idx, _) in &self.vertices[v].incident {
                let e = &self.edges[e_idx];
                let u = if e.near_vertex == v { e.far_vertex } else { e.near_vertex };
                let d = dist[v] + e.length;
                if d < dist[u] {
                    dist[u] = d;
                    stack.push(u);
                }
            }
        }
        dist
    }

    /// Length of the unique path between two points of the tree.
    pub fn dist_along_tree(&self, a: TreeNode, b: TreeNode) -> Result<f64> {
        let (ea, la) = self.node_to_edge_point(a)?;
        let (eb, lb) = self.node_to_edge_point(b)?;
        let sa = la as f64 * self.dx;
        let sb = lb as f64 * self.dx;
        if ea == eb {
            return Ok((sa - sb).abs());
        }
        let edge_a = &self.edges[ea];
        let edge_b = &self.edges[eb];
        let ends_a = [(edge_a.near_vertex, sa), (edge_a.far_vertex, edge_a.length - sa)];
        let ends_b = [(edge_b.near_vertex, sb), (edge_b.far_vertex, edge_b.length - sb)];
        let mut best = f64::INFINITY;
        for &(va, da) in &ends_a {
            let dist = self.vertex_distances(va);
            for &(vb, db) in &ends_b {
                best = best.min(da + dist[vb] + db);
            }
        }
        Ok(best)
    }
}

/// The Y-tree of the paper's tree example: |e1| = |e2| = 0.1, |e3| = 0.2,
/// one interior vertex joining the three edges.
pub fn paper_y_tree(dx: f64) -> Result<TreeGeometry> {
    build_tree(
        &[
            EdgeSpec { id: 1, length: 0.1, near_vertex: 1, far_vertex: 2 },
            EdgeSpec { id: 2, length: 0.1, near_vertex: 2, far_vertex: 3 },
            EdgeSpec { id: 3, length: 0.2, near_vertex: 2, far_vertex: 4 },
        ],
        dx,
        &[
            (1, VertexKind::Terminal),
            (2, VertexKind::Interior),
            (3, VertexKind::Terminal),
            (4, VertexKind::Terminal),
        ],
    )
}
