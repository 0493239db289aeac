//! Disjoint-union batching of embedded graphs plus the message-passing view.
//! Scene edges are treated as bidirectional (both directions share the edge's
//! feature row); every ordinary node additionally receives the super-node
//! message through its super-link row, and the super node receives one
//! message per ordinary node through the same rows.

use std::ops::Range;

use ndarray::Array2;

use crate::embeddings::EmbeddedGraph;
use crate::error::{Error, Result};

/// One incident message into a node: (neighbor node index, edge feature row).
pub type Incident = (usize, usize);

#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub node_features: Array2<f64>,
    pub edge_features: Array2<f64>,
    /// Per node, the incident messages in a fixed deterministic order.
    pub incident: Vec<Vec<Incident>>,
    /// Node index ranges per graph; each segment ends with its super node.
    pub segments: Vec<Range<usize>>,
    /// Absolute node index of each graph's super node.
    pub super_nodes: Vec<usize>,
}

impl GraphBatch {
    pub fn from_graphs(graphs: &[&EmbeddedGraph]) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::EmptyGraph("graph batch"));
        }
        let d = graphs[0].node_features.ncols();
        let total_nodes: usize = graphs.iter().map(|g| g.n_nodes()).sum();
        let total_edges: usize = graphs.iter().map(|g| g.edge_features.nrows()).sum();

        let mut node_features = Array2::zeros((total_nodes, d));
        let mut edge_features = Array2::zeros((total_edges, d));
        let mut incident: Vec<Vec<Incident>> = vec![Vec::new(); total_nodes];
        let mut segments = Vec::with_capacity(graphs.len());
        let mut super_nodes = Vec::with_capacity(graphs.len());

        let mut node_off = 0usize;
        let mut edge_off = 0usize;
        for g in graphs {
            if g.node_features.ncols() != d {
                return Err(Error::Dimension(format!(
                    "graph feature width {} does not match batch width {d}",
                    g.node_features.ncols()
                )));
            }
            let n = g.n_ordinary;
            let m = g.scene_edges.len();
            node_features
                .slice_mut(ndarray::s![node_off..node_off + n + 1, ..])
                .assign(&g.node_features);
            edge_features
                .slice_mut(ndarray::s![edge_off..edge_off + m + n, ..])
                .assign(&g.edge_features);

            for (row, &(src, dst)) in g.scene_edges.iter().enumerate() {
                let e = edge_off + row;
                incident[node_off + src].push((node_off + dst, e));
                if src != dst {
                    incident[node_off + dst].push((node_off + src, e));
                }
            }
            let sn = node_off + n;
            for i in 0..n {
                let e = edge_off + m + i;
                incident[node_off + i].push((sn, e));
                incident[sn].push((node_off + i, e));
            }

            segments.push(node_off..node_off + n + 1);
            super_nodes.push(sn);
            node_off += n + 1;
            edge_off += m + n;
        }

        for (u, inc) in incident.iter().enumerate() {
            if inc.is_empty() {
                return Err(Error::Invalid(format!(
                    "node {u} has no incident message; graphs must be non-empty"
                )));
            }
        }

        Ok(Self {
            node_features,
            edge_features,
            incident,
            segments,
            super_nodes,
        })
    }

    pub fn single(graph: &EmbeddedGraph) -> Result<Self> {
        Self::from_graphs(&[graph])
    }

    pub fn n_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    pub fn n_graphs(&self) -> usize {
        self.segments.len()
    }

    pub fn dim(&self) -> usize {
        self.node_features.ncols()
    }
}
