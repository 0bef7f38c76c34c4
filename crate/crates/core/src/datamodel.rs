//! Shared domain types: QA instances, their per-choice contextualized KGs,
//! explanation units and saliency records, plus the JSON-lines dataset format.
//!
//! Node ids are dense per KG (`nodes[i].id == i`) and paths reference edges
//! by index, so units can be masked and aligned without lookups.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path as FsPath;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeType {
    Question,
    Answer,
    Intermediate,
}

impl NodeType {
    /// Question and answer nodes are the "QA nodes" of the heuristic baseline.
    pub fn is_qa(self) -> bool {
        matches!(self, NodeType::Question | NodeType::Answer)
    }
}

/// Serialized as `[id, label, type]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "(u32, String, NodeType)", into = "(u32, String, NodeType)")]
pub struct Node {
    pub id: u32,
    pub label: String,
    pub kind: NodeType,
}

impl From<(u32, String, NodeType)> for Node {
    fn from((id, label, kind): (u32, String, NodeType)) -> Self {
        Node { id, label, kind }
    }
}

impl From<Node> for (u32, String, NodeType) {
    fn from(n: Node) -> Self {
        (n.id, n.label, n.kind)
    }
}

/// Serialized as `[head, relation_index, tail]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "(u32, usize, u32)", into = "(u32, usize, u32)")]
pub struct Edge {
    pub head: u32,
    pub relation: usize,
    pub tail: u32,
}

impl From<(u32, usize, u32)> for Edge {
    fn from((head, relation, tail): (u32, usize, u32)) -> Self {
        Edge {
            head,
            relation,
            tail,
        }
    }
}

impl From<Edge> for (u32, usize, u32) {
    fn from(e: Edge) -> Self {
        (e.head, e.relation, e.tail)
    }
}

/// A 1-hop or 2-hop path, as a list of edge indices. 2-hop paths keep their
/// intermediate node explicitly (the tail of the first edge).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KgPath {
    pub edges: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextKg {
    pub nodes: Vec<Node>,
    pub relations: Vec<String>,
    pub edges: Vec<Edge>,
    #[serde(default)]
    pub paths: Vec<KgPath>,
}

/// Granularity of a fine unit, fixed by the graph encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum UnitKind {
    Graph,
    Node,
    Path,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ref", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Unit {
    Graph,
    Node(u32),
    Path(usize),
}

impl Unit {
    pub fn kind(self) -> UnitKind {
        match self {
            Unit::Graph => UnitKind::Graph,
            Unit::Node(_) => UnitKind::Node,
            Unit::Path(_) => UnitKind::Path,
        }
    }
}

impl ContextKg {
    pub fn unit_count(&self, kind: UnitKind) -> usize {
        match kind {
            UnitKind::Graph => 1,
            UnitKind::Node => self.nodes.len(),
            UnitKind::Path => self.paths.len(),
        }
    }

    /// Units of the given kind, in KG order.
    pub fn units(&self, kind: UnitKind) -> Vec<Unit> {
        match kind {
            UnitKind::Graph => vec![Unit::Graph],
            UnitKind::Node => self.nodes.iter().map(|n| Unit::Node(n.id)).collect(),
            UnitKind::Path => (0..self.paths.len()).map(Unit::Path).collect(),
        }
    }

    /// Node ids touched by a path, head first. Includes the intermediate node
    /// of a 2-hop path.
    pub fn path_nodes(&self, path: &KgPath) -> Vec<u32> {
        let mut out = Vec::with_capacity(path.edges.len() + 1);
        for (i, &e) in path.edges.iter().enumerate() {
            let edge = &self.edges[e];
            if i == 0 {
                out.push(edge.head);
            }
            out.push(edge.tail);
        }
        out
    }

    pub fn qa_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind.is_qa()).count()
    }

    /// Copy of the KG keeping only the units flagged in `keep`.
    ///
    /// Path units: dropped paths disappear, nodes and edges stay. Node units:
    /// dropped nodes take their incident edges and the paths through them
    /// along; surviving ids are renumbered densely in order.
    pub fn retain_units(&self, kind: UnitKind, keep: &[bool]) -> ContextKg {
        match kind {
            UnitKind::Graph => self.clone(),
            UnitKind::Path => ContextKg {
                paths: self
                    .paths
                    .iter()
                    .zip(keep)
                    .filter(|(_, &k)| k)
                    .map(|(p, _)| p.clone())
                    .collect(),
                ..self.clone()
            },
            UnitKind::Node => {
                let mut new_id = vec![None; self.nodes.len()];
                let mut nodes = Vec::new();
                for (n, _) in self.nodes.iter().zip(keep).filter(|(_, &k)| k) {
                    new_id[n.id as usize] = Some(nodes.len() as u32);
                    nodes.push(Node {
                        id: nodes.len() as u32,
                        ..n.clone()
                    });
                }
                let mut new_edge = vec![None; self.edges.len()];
                let mut edges = Vec::new();
                for (i, e) in self.edges.iter().enumerate() {
                    if let (Some(head), Some(tail)) =
                        (new_id[e.head as usize], new_id[e.tail as usize])
                    {
                        new_edge[i] = Some(edges.len());
                        edges.push(Edge { head, tail, ..*e });
                    }
                }
                let paths = self
                    .paths
                    .iter()
                    .filter_map(|p| {
                        let edges: Option<Vec<usize>> =
                            p.edges.iter().map(|&e| new_edge[e]).collect();
                        edges.map(|edges| KgPath { edges })
                    })
                    .collect();
                ContextKg {
                    nodes,
                    relations: self.relations.clone(),
                    edges,
                    paths,
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerChoice {
    pub text: Vec<String>,
    pub kg: ContextKg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaInstance {
    pub id: String,
    pub question: Vec<String>,
    pub choices: Vec<AnswerChoice>,
    #[serde(rename = "target")]
    pub target_index: usize,
}

impl QaInstance {
    /// Token sequence of the statement `q ⊕ a_i`.
    pub fn statement(&self, choice: usize) -> Vec<&str> {
        self.question
            .iter()
            .chain(self.choices[choice].text.iter())
            .map(String::as_str)
            .collect()
    }
}

/// Raw saliency `phi`, signed score `s` and binary label `y` for one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRecord {
    pub unit: Unit,
    pub phi: f64,
    pub s: f64,
    pub y: u8,
    /// Set when the score came from the empty-graph fallback.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl SaliencyRecord {
    /// `s` is `phi` for the correct choice and `-phi` otherwise.
    pub fn new(unit: Unit, phi: f64, is_correct: bool, y: bool) -> Self {
        let s = if is_correct { phi } else { -phi };
        SaliencyRecord {
            unit,
            phi,
            s,
            y: u8::from(y),
            degenerate: false,
        }
    }

    pub fn positive(&self) -> bool {
        self.y == 1
    }

    /// Checks `y ∈ {0,1}` and `s = ±phi`.
    pub fn is_consistent(&self) -> bool {
        self.y <= 1 && (self.s == self.phi || self.s == -self.phi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExplanationMethod {
    Ensemble,
    Grad,
    Occl,
    Random,
    Heuristic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Granularity {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    /// Coarse threshold on `s_c` (strict).
    T(f64),
    /// Percentage of top-scoring fine units kept per KG.
    K(f64),
    None,
}

pub type CacheKey = (String, usize);

/// Explanations for every (instance, choice) of one or more datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationCache {
    pub method: ExplanationMethod,
    pub granularity: Granularity,
    pub threshold: Threshold,
    /// Unit kind of fine records, `Graph` for coarse caches.
    pub unit_kind: UnitKind,
    /// Hashes of the checkpoints the explanations were derived from.
    pub model_hashes: Vec<String>,
    pub records: BTreeMap<CacheKey, Vec<SaliencyRecord>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    method: ExplanationMethod,
    granularity: Granularity,
    threshold: Threshold,
    unit_kind: UnitKind,
    model_hashes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    id: String,
    choice: usize,
    records: Vec<SaliencyRecord>,
}

impl ExplanationCache {
    pub fn new(
        method: ExplanationMethod,
        granularity: Granularity,
        threshold: Threshold,
        unit_kind: UnitKind,
    ) -> Self {
        ExplanationCache {
            method,
            granularity,
            threshold,
            unit_kind,
            model_hashes: Vec::new(),
            records: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: &str, choice: usize) -> Result<&[SaliencyRecord]> {
        self.records
            .get(&(id.to_string(), choice))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::CacheMiss {
                id: id.to_string(),
                choice,
            })
    }

    /// Binary labels of one (instance, choice) as `0.0`/`1.0` weights.
    pub fn mask(&self, id: &str, choice: usize) -> Result<Vec<f64>> {
        Ok(self
            .get(id, choice)?
            .iter()
            .map(|r| f64::from(r.y))
            .collect())
    }

    /// Per-instance, per-choice label vectors for `data`, in order.
    pub fn mask_table(&self, data: &[QaInstance]) -> Result<Vec<Vec<Vec<f64>>>> {
        data.iter()
            .map(|inst| {
                (0..inst.choices.len())
                    .map(|c| self.mask(&inst.id, c))
                    .collect()
            })
            .collect()
    }

    /// Per-instance, per-choice coarse labels as `0.0`/`1.0`.
    pub fn coarse_table(&self, data: &[QaInstance]) -> Result<Vec<Vec<f64>>> {
        data.iter()
            .map(|inst| {
                (0..inst.choices.len())
                    .map(|c| self.coarse_label(&inst.id, c).map(f64::from))
                    .collect()
            })
            .collect()
    }

    /// Coarse label `y_c` of one (instance, choice).
    pub fn coarse_label(&self, id: &str, choice: usize) -> Result<bool> {
        let recs = self.get(id, choice)?;
        match recs {
            [r] if r.unit == Unit::Graph => Ok(r.positive()),
            _ => Err(Error::Mismatch(format!(
                "({id}, {choice}) does not hold a single GRAPH record"
            ))),
        }
    }

    /// Checks cardinality invariants against a dataset.
    pub fn check_covers(&self, data: &[QaInstance]) -> Result<()> {
        for inst in data {
            for (c, choice) in inst.choices.iter().enumerate() {
                let recs = self.get(&inst.id, c)?;
                let expected = match self.granularity {
                    Granularity::Coarse => 1,
                    Granularity::Fine => choice.kg.unit_count(self.unit_kind),
                };
                if recs.len() != expected {
                    return Err(Error::Mismatch(format!(
                        "({}, {c}): {} records, expected {expected}",
                        inst.id,
                        recs.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: ExplanationCache) {
        self.records.extend(other.records);
    }

    pub fn write(&self, dest: &FsPath) -> Result<()> {
        let file = File::create(dest).map_err(|e| Error::io(dest, e))?;
        let mut w = BufWriter::new(file);
        let header = CacheHeader {
            method: self.method,
            granularity: self.granularity,
            threshold: self.threshold,
            unit_kind: self.unit_kind,
            model_hashes: self.model_hashes.clone(),
        };
        let mut emit = |line: String| -> Result<()> {
            w.write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .map_err(|e| Error::io(dest, e))
        };
        emit(serde_json::to_string(&header)?)?;
        for ((id, choice), records) in &self.records {
            emit(serde_json::to_string(&CacheLine {
                id: id.clone(),
                choice: *choice,
                records: records.clone(),
            })?)?;
        }
        w.flush().map_err(|e| Error::io(dest, e))
    }

    pub fn read(src: &FsPath) -> Result<Self> {
        let file = File::open(src).map_err(|e| Error::io(src, e))?;
        let mut lines = BufReader::new(file).lines();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: src.to_path_buf(),
            line,
            message,
        };
        let first = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing header line".into()))?
            .map_err(|e| Error::io(src, e))?;
        let header: CacheHeader =
            serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
        let mut cache = ExplanationCache::new(
            header.method,
            header.granularity,
            header.threshold,
            header.unit_kind,
        );
        cache.model_hashes = header.model_hashes;
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(src, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheLine =
                serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?;
            cache.records.insert((rec.id, rec.choice), rec.records);
        }
        Ok(cache)
    }
}

/// Returns every violated ContextKG invariant; empty iff the KG is well formed.
pub fn validate_kg(kg: &ContextKg) -> Vec<String> {
    let mut out = Vec::new();
    if kg.nodes.is_empty() {
        out.push("nodes: KG has no nodes".to_string());
    }
    let mut seen = HashSet::new();
    for (i, n) in kg.nodes.iter().enumerate() {
        if !seen.insert(n.id) {
            out.push(format!("nodes[{i}]: duplicate node id {}", n.id));
        } else if n.id as usize != i {
            out.push(format!(
                "nodes[{i}]: id {} is not dense (expected {i})",
                n.id
            ));
        }
    }
    let node_ok = |id: u32| (id as usize) < kg.nodes.len();
    for (i, e) in kg.edges.iter().enumerate() {
        if !node_ok(e.head) {
            out.push(format!("edges[{i}]: head node {} does not exist", e.head));
        }
        if !node_ok(e.tail) {
            out.push(format!("edges[{i}]: tail node {} does not exist", e.tail));
        }
        if e.relation >= kg.relations.len() {
            out.push(format!(
                "edges[{i}]: relation {} does not exist",
                e.relation
            ));
        }
    }
    for (i, p) in kg.paths.iter().enumerate() {
        if p.edges.is_empty() || p.edges.len() > 2 {
            out.push(format!(
                "paths[{i}]: has {} edges (must be 1 or 2)",
                p.edges.len()
            ));
            continue;
        }
        if let Some(&bad) = p.edges.iter().find(|&&e| e >= kg.edges.len()) {
            out.push(format!("paths[{i}]: edge {bad} does not exist"));
            continue;
        }
        if p.edges.len() == 2 && kg.edges[p.edges[0]].tail != kg.edges[p.edges[1]].head {
            out.push(format!("paths[{i}]: edges are not connected"));
        }
    }
    out
}

/// Instance-level invariants plus every choice's KG.
pub fn validate_instance(inst: &QaInstance) -> Vec<String> {
    let mut out = Vec::new();
    if inst.choices.len() < 2 {
        out.push(format!("choices: {} (need at least 2)", inst.choices.len()));
    }
    if inst.target_index >= inst.choices.len() {
        out.push(format!(
            "target: {} out of range for {} choices",
            inst.target_index,
            inst.choices.len()
        ));
    }
    for (c, choice) in inst.choices.iter().enumerate() {
        out.extend(
            validate_kg(&choice.kg)
                .into_iter()
                .map(|v| format!("choices[{c}].kg.{v}")),
        );
    }
    out
}

fn ensure_valid(inst: &QaInstance) -> Result<()> {
    let violations = validate_instance(inst);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid {
            id: inst.id.clone(),
            violations,
        })
    }
}

/// Writes one JSON object per line. Every instance is validated first; the
/// first invalid one aborts the write before the file is touched.
pub fn serialize_dataset(instances: &[QaInstance], dest: &FsPath) -> Result<()> {
    instances.iter().try_for_each(ensure_valid)?;
    let file = File::create(dest).map_err(|e| Error::io(dest, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst)?;
        w.write_all(line.as_bytes())
            .and_then(|_| w.write_all(b"\n"))
            .map_err(|e| Error::io(dest, e))?;
    }
    w.flush().map_err(|e| Error::io(dest, e))
}

/// Parses a JSON-lines dataset, validating every instance. Errors carry the
/// 1-based line number.
pub fn read_dataset(src: &FsPath) -> Result<Vec<QaInstance>> {
    let file = File::open(src).map_err(|e| Error::io(src, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(src, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: QaInstance = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: src.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let violations = validate_instance(&inst);
        if !violations.is_empty() {
            return Err(Error::Parse {
                path: src.to_path_buf(),
                line: i + 1,
                message: Error::Invalid {
                    id: inst.id,
                    violations,
                }
                .to_string(),
            });
        }
        out.push(inst);
    }
    Ok(out)
}
