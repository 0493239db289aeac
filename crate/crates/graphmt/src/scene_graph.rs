//! Scene-graph ingestion and assembly.
//!
//! ISG and TSG files share one JSONL schema: each line is
//! `{"entities": [..strings..], "relations": [[subject, predicate, object], ..]}`.
//! Entities become labeled nodes, relation triplets become directed edges whose
//! endpoints are resolved by exact string match against the entity list.
//! A multimodal graph (MSG) is the disjoint union of an ISG and a TSG plus a
//! global super node linked to every ordinary node; the linguistic variant
//! (LSG) keeps only the TSG under a text-flavored super node.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relation label used for every super-node link.
pub const GLOBAL_RELATION: &str = "global";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Origin {
    #[serde(rename = "ISG")]
    Isg,
    #[serde(rename = "TSG")]
    Tsg,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneNode {
    pub id: usize,
    pub label: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: String,
}

/// Labeled directed graph of entities and relation triplets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SceneGraph {
    pub nodes: Vec<SceneNode>,
    pub edges: Vec<SceneEdge>,
}

impl SceneGraph {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Internal consistency: dense unique ids, resolvable endpoints,
    /// non-empty labels.
    pub fn check_invariants(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Invalid(format!(
                    "node ids must be dense 0..n-1, found {} at position {}",
                    n.id, i
                )));
            }
            if n.label.is_empty() {
                return Err(Error::Invalid(format!("node {} has an empty label", i)));
            }
        }
        for e in &self.edges {
            if e.src >= self.nodes.len() || e.dst >= self.nodes.len() {
                return Err(Error::Invalid(format!(
                    "edge {}->{} references a missing node",
                    e.src, e.dst
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SuperKind {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperNode {
    pub kind: SuperKind,
    pub embedding_key: String,
}

/// One link from the super node to an ordinary node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperLink {
    pub node: usize,
    pub relation: String,
}

/// ISG ∪ TSG plus an image super node wired to every ordinary node.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSceneGraph {
    pub ordinary: SceneGraph,
    pub super_node: SuperNode,
    pub super_links: Vec<SuperLink>,
}

/// TSG plus a text super node; the image-free counterpart of the MSG.
#[derive(Debug, Clone, PartialEq)]
pub struct LinguisticSceneGraph {
    pub ordinary: SceneGraph,
    pub super_node: SuperNode,
    pub super_links: Vec<SuperLink>,
}

/// Either graph flavor, as consumed by training examples.
#[derive(Debug, Clone, PartialEq)]
pub enum ExampleGraph {
    Msg(MultimodalSceneGraph),
    Lsg(LinguisticSceneGraph),
}

impl ExampleGraph {
    pub fn kind(&self) -> SuperKind {
        match self {
            ExampleGraph::Msg(_) => SuperKind::Image,
            ExampleGraph::Lsg(_) => SuperKind::Text,
        }
    }

    pub fn parts(&self) -> (&SceneGraph, &SuperNode, &[SuperLink]) {
        match self {
            ExampleGraph::Msg(g) => (&g.ordinary, &g.super_node, &g.super_links),
            ExampleGraph::Lsg(g) => (&g.ordinary, &g.super_node, &g.super_links),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedRecord {
    pub line: usize,
    pub reason: String,
}

/// Result of structural validation of one scene graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub connected: bool,
    pub isolated_node_ids: Vec<usize>,
    pub malformed_records: Vec<MalformedRecord>,
}

/// Graphs parsed from a JSONL document plus the lines that failed.
/// Malformed lines are skipped; surviving lines keep their relative order.
#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub graphs: Vec<SceneGraph>,
    pub malformed: Vec<MalformedRecord>,
    /// 1-based input line number for each parsed graph.
    pub lines: Vec<usize>,
}

#[derive(Deserialize)]
struct RawRecord {
    entities: Vec<String>,
    relations: Vec<(String, String, String)>,
}

#[derive(Serialize)]
struct RawRecordOut<'a> {
    entities: Vec<&'a str>,
    relations: Vec<[&'a str; 3]>,
}

fn parse_record(line: &str, origin: Origin) -> std::result::Result<SceneGraph, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| format!("bad JSON: {e}"))?;
    let mut nodes: Vec<SceneNode> = Vec::new();
    let mut by_label: HashMap<&str, usize> = HashMap::new();
    for ent in &raw.entities {
        if ent.is_empty() {
            return Err("empty entity label".to_string());
        }
        // duplicate entity strings merge onto one node
        by_label.entry(ent.as_str()).or_insert_with(|| {
            nodes.push(SceneNode {
                id: nodes.len(),
                label: ent.clone(),
                origin,
            });
            nodes.len() - 1
        });
    }
    let mut edges = Vec::with_capacity(raw.relations.len());
    for (subj, pred, obj) in &raw.relations {
        if pred.is_empty() {
            return Err("empty relation label".to_string());
        }
        let src = *by_label
            .get(subj.as_str())
            .ok_or_else(|| format!("unlisted entity: {subj:?}"))?;
        let dst = *by_label
            .get(obj.as_str())
            .ok_or_else(|| format!("unlisted entity: {obj:?}"))?;
        edges.push(SceneEdge {
            src,
            dst,
            relation: pred.clone(),
        });
    }
    Ok(SceneGraph { nodes, edges })
}

fn parse_jsonl(text: &str, origin: Origin) -> ParseOutcome {
    let mut out = ParseOutcome::default();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(line, origin) {
            Ok(g) => {
                out.graphs.push(g);
                out.lines.push(idx + 1);
            }
            Err(reason) => out.malformed.push(MalformedRecord {
                line: idx + 1,
                reason,
            }),
        }
    }
    out
}

/// Parse an image-scene-graph JSONL document (origin = ISG).
pub fn parse_isg_jsonl(text: &str) -> ParseOutcome {
    parse_jsonl(text, Origin::Isg)
}

/// Parse a textual-scene-graph JSONL document (origin = TSG). Attribute
/// annotations arrive as ordinary `has_attribute` triplets and pass through
/// unchanged.
pub fn parse_tsg_triplets(text: &str) -> ParseOutcome {
    parse_jsonl(text, Origin::Tsg)
}

/// Serialize one graph back into the JSONL record schema.
pub fn scene_graph_to_record(graph: &SceneGraph) -> String {
    let rec = RawRecordOut {
        entities: graph.nodes.iter().map(|n| n.label.as_str()).collect(),
        relations: graph
            .edges
            .iter()
            .map(|e| {
                [
                    graph.nodes[e.src].label.as_str(),
                    e.relation.as_str(),
                    graph.nodes[e.dst].label.as_str(),
                ]
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("record serialization cannot fail")
}

/// Undirected-view structural report: isolated nodes and connectivity.
/// Super links are not part of a `SceneGraph`, so they never count here.
pub fn validate(graph: &SceneGraph) -> ValidationReport {
    let n = graph.nodes.len();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for e in &graph.edges {
        adj[e.src].push(e.dst);
        adj[e.dst].push(e.src);
    }
    let isolated: Vec<usize> = (0..n).filter(|&i| adj[i].is_empty()).collect();

    let mut seen = vec![false; n];
    let mut components = 0usize;
    for start in 0..n {
        if seen[start] {
            continue;
        }
        components += 1;
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
    }

    ValidationReport {
        connected: isolated.is_empty() && components == 1,
        isolated_node_ids: isolated,
        malformed_records: Vec::new(),
    }
}

fn wire_super(ordinary: &SceneGraph) -> Vec<SuperLink> {
    ordinary
        .nodes
        .iter()
        .map(|n| SuperLink {
            node: n.id,
            relation: GLOBAL_RELATION.to_string(),
        })
        .collect()
}

/// Disjoint union of an ISG and a TSG under an image super node. ISG node
/// ids come first; TSG ids are shifted past them.
pub fn build_msg(
    isg: &SceneGraph,
    tsg: &SceneGraph,
    image_embedding_key: &str,
) -> Result<MultimodalSceneGraph> {
    if isg.is_empty() && tsg.is_empty() {
        return Err(Error::EmptyGraph("MSG"));
    }
    isg.check_invariants()?;
    tsg.check_invariants()?;
    let shift = isg.nodes.len();
    let mut nodes = isg.nodes.clone();
    nodes.extend(tsg.nodes.iter().map(|n| SceneNode {
        id: n.id + shift,
        label: n.label.clone(),
        origin: n.origin,
    }));
    let mut edges = isg.edges.clone();
    edges.extend(tsg.edges.iter().map(|e| SceneEdge {
        src: e.src + shift,
        dst: e.dst + shift,
        relation: e.relation.clone(),
    }));
    let ordinary = SceneGraph { nodes, edges };
    let super_links = wire_super(&ordinary);
    Ok(MultimodalSceneGraph {
        ordinary,
        super_node: SuperNode {
            kind: SuperKind::Image,
            embedding_key: image_embedding_key.to_string(),
        },
        super_links,
    })
}

/// TSG under a text super node; same wiring rule as `build_msg`.
pub fn build_lsg(tsg: &SceneGraph, text_embedding_key: &str) -> Result<LinguisticSceneGraph> {
    if tsg.is_empty() {
        return Err(Error::EmptyGraph("LSG"));
    }
    tsg.check_invariants()?;
    if tsg.nodes.iter().any(|n| n.origin == Origin::Isg) {
        return Err(Error::Invalid(
            "LSG ordinary nodes must all have TSG origin".to_string(),
        ));
    }
    let ordinary = tsg.clone();
    let super_links = wire_super(&ordinary);
    Ok(LinguisticSceneGraph {
        ordinary,
        super_node: SuperNode {
            kind: SuperKind::Text,
            embedding_key: text_embedding_key.to_string(),
        },
        super_links,
    })
}

/// On-disk form of an assembled MSG/LSG: a single JSON object. Super links
/// are implied (one per node with the global relation) and rebuilt on load.
#[derive(Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<SceneNode>,
    edges: Vec<SceneEdge>,
    #[serde(rename = "super")]
    super_node: SuperNode,
}

pub fn example_graph_to_json(graph: &ExampleGraph) -> String {
    let (ordinary, super_node, _) = graph.parts();
    let f = GraphFile {
        nodes: ordinary.nodes.clone(),
        edges: ordinary.edges.clone(),
        super_node: super_node.clone(),
    };
    serde_json::to_string(&f).expect("graph serialization cannot fail")
}

pub fn example_graph_from_json(text: &str) -> Result<ExampleGraph> {
    let f: GraphFile =
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("bad graph JSON: {e}")))?;
    let ordinary = SceneGraph {
        nodes: f.nodes,
        edges: f.edges,
    };
    if ordinary.is_empty() {
        return Err(Error::EmptyGraph("serialized graph"));
    }
    ordinary.check_invariants()?;
    let super_links = wire_super(&ordinary);
    Ok(match f.super_node.kind {
        SuperKind::Image => ExampleGraph::Msg(MultimodalSceneGraph {
            ordinary,
            super_node: f.super_node,
            super_links,
        }),
        SuperKind::Text => ExampleGraph::Lsg(LinguisticSceneGraph {
            ordinary,
            super_node: f.super_node,
            super_links,
        }),
    })
}
