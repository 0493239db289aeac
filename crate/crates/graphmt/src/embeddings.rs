//! Feature providers for node labels, relation labels, and whole-image /
//! whole-sentence keys. The deterministic stub hashes the label with FNV-1a,
//! draws from a splitmix64 stream, and L2-normalizes; a file-backed store
//! serves fixed vectors instead. Both sit behind one provider type so graphs
//! embed the same way regardless of where features come from.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_graph::{ExampleGraph, SuperKind, GLOBAL_RELATION};
use crate::util::{atomic_write, fnv1a64, read_to_string, SplitMix64};

/// Deterministic stand-in for a pretrained text encoder. The exact bit-level
/// procedure: seed = FNV-1a64 of the UTF-8 label, draw `dim` raw u64 values
/// from splitmix64, map each v to ((v >> 11) * 2^-52) * 2 - 1, L2-normalize.
pub fn stub_embed(label: &str, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Dimension("stub_embed requires dim >= 1".to_string()));
    }
    let mut sm = SplitMix64::new(fnv1a64(label.as_bytes()));
    let mut v: Vec<f64> = (0..dim).map(|_| sm.next_float()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    Ok(v)
}

/// Label-keyed vector store; vectors are 32-bit floats on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub records: BTreeMap<String, Vec<f32>>,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct StoreRecord {
    label: String,
    vector: Vec<f32>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, label: impl Into<String>, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Dimension(format!(
                "store dim is {}, vector has length {}",
                self.dim,
                vector.len()
            )));
        }
        self.records.insert(label.into(), vector);
        Ok(())
    }
}

/// Store file: JSONL, first line `{"dim": d}`, then one record per line.
pub fn save_store(store: &EmbeddingStore, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&serde_json::to_string(&StoreHeader { dim: store.dim }).unwrap());
    out.push('\n');
    for (label, vector) in &store.records {
        let rec = StoreRecord {
            label: label.clone(),
            vector: vector.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn load_store(path: &Path) -> Result<EmbeddingStore> {
    let text = read_to_string(path)?;
    parse_store(&text)
}

pub fn parse_store(text: &str) -> Result<EmbeddingStore> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| Error::Malformed {
            line: 1,
            reason: "missing store header".to_string(),
        })?;
    let header: StoreHeader = serde_json::from_str(header_line).map_err(|e| Error::Malformed {
        line: 1,
        reason: format!("bad store header: {e}"),
    })?;
    let mut store = EmbeddingStore::new(header.dim);
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let rec: StoreRecord = serde_json::from_str(line).map_err(|e| Error::Malformed {
            line: idx + 1,
            reason: format!("bad store record: {e}"),
        })?;
        if rec.vector.len() != header.dim {
            return Err(Error::Malformed {
                line: idx + 1,
                reason: format!(
                    "record dim {} does not match header dim {}",
                    rec.vector.len(),
                    header.dim
                ),
            });
        }
        store.records.insert(rec.label, rec.vector);
    }
    Ok(store)
}

#[derive(Debug, Clone)]
pub enum ProviderMode {
    DeterministicStub,
    FileStore(EmbeddingStore),
}

/// d-dimensional feature source for labels and embedding keys.
#[derive(Debug, Clone)]
pub struct EmbeddingProvider {
    pub dim: usize,
    pub mode: ProviderMode,
}

impl EmbeddingProvider {
    pub fn stub(dim: usize) -> Self {
        Self {
            dim,
            mode: ProviderMode::DeterministicStub,
        }
    }

    pub fn from_store(store: EmbeddingStore) -> Self {
        Self {
            dim: store.dim,
            mode: ProviderMode::FileStore(store),
        }
    }

    pub fn embed(&self, label: &str) -> Result<Vec<f64>> {
        match &self.mode {
            ProviderMode::DeterministicStub => stub_embed(label, self.dim),
            ProviderMode::FileStore(store) => store
                .records
                .get(label)
                .map(|v| v.iter().map(|&x| f64::from(x)).collect())
                .ok_or_else(|| Error::MissingLabel(label.to_string())),
        }
    }
}

/// Per-node and per-edge feature matrices ready for message passing.
/// Node row layout: ordinary nodes 0..n, super node at row n.
/// Edge row layout: scene edges 0..m, then one super-link row per node.
#[derive(Debug, Clone)]
pub struct EmbeddedGraph {
    pub node_features: Array2<f64>,
    pub edge_features: Array2<f64>,
    pub scene_edges: Vec<(usize, usize)>,
    pub n_ordinary: usize,
    pub kind: SuperKind,
}

impl EmbeddedGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_ordinary + 1
    }

    pub fn super_index(&self) -> usize {
        self.n_ordinary
    }
}

/// Embed an assembled MSG or LSG: ordinary rows from node labels, the super
/// row from the graph's embedding key, edge rows from relation labels, and
/// one shared-global row per super link.
pub fn embed_graph(graph: &ExampleGraph, provider: &EmbeddingProvider) -> Result<EmbeddedGraph> {
    let (ordinary, super_node, super_links) = graph.parts();
    let n = ordinary.nodes.len();
    let m = ordinary.edges.len();
    if n == 0 {
        return Err(Error::EmptyGraph("graph to embed"));
    }
    let d = provider.dim;

    let mut node_features = Array2::zeros((n + 1, d));
    for node in &ordinary.nodes {
        let v = provider.embed(&node.label)?;
        node_features
            .row_mut(node.id)
            .assign(&Array1::from_vec(v));
    }
    node_features
        .row_mut(n)
        .assign(&Array1::from_vec(provider.embed(&super_node.embedding_key)?));

    let mut edge_features = Array2::zeros((m + n, d));
    let mut scene_edges = Vec::with_capacity(m);
    for (row, edge) in ordinary.edges.iter().enumerate() {
        edge_features
            .row_mut(row)
            .assign(&Array1::from_vec(provider.embed(&edge.relation)?));
        scene_edges.push((edge.src, edge.dst));
    }
    for (i, link) in super_links.iter().enumerate() {
        debug_assert_eq!(link.node, i);
        edge_features
            .row_mut(m + i)
            .assign(&Array1::from_vec(provider.embed(&link.relation)?));
    }
    debug_assert_eq!(super_links.len(), n);
    let _ = GLOBAL_RELATION;

    Ok(EmbeddedGraph {
        node_features,
        edge_features,
        scene_edges,
        n_ordinary: n,
        kind: graph.kind(),
    })
}
