//! Knowledge-graph ingestion and hyperbolic graph construction.
//!
//! Triples become a directed graph: one edge `s → o` per triple, a self-loop
//! on every node under a reserved relation type, node and edge features
//! mapped onto the Poincaré ball, per-node degree normalizers, and a
//! persistence gate per relation type.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyperbolic::{exp_map_origin, persistence_gate, BallPoint, Curvature};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl Triple {
    pub fn new(subject: impl Into<String>, relation: impl Into<String>, object: impl Into<String>) -> Result<Self> {
        let t = Triple { subject: subject.into(), relation: relation.into(), object: object.into() };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        if self.subject.is_empty() || self.relation.is_empty() || self.object.is_empty() {
            return Err(Error::InvalidArgument("triple fields must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TripleFormat {
    Tsv,
    Jsonl,
}

impl TripleFormat {
    /// Guess from a file extension; anything but `.jsonl`/`.json` is TSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => TripleFormat::Jsonl,
            _ => TripleFormat::Tsv,
        }
    }
}

/// Reads triples in input order. Blank lines are skipped; anything else
/// malformed is reported with its 1-based line number.
pub fn ingest_triples(source: impl Read, format: TripleFormat) -> Result<Vec<Triple>> {
    let reader = BufReader::new(source);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let triple = match format {
            TripleFormat::Tsv => {
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 3 {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected 3 tab-separated columns, found {}", cols.len()),
                    });
                }
                Triple { subject: cols[0].into(), relation: cols[1].into(), object: cols[2].into() }
            }
            TripleFormat::Jsonl => serde_json::from_str::<Triple>(line)
                .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?,
        };
        triple
            .validate()
            .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        out.push(triple);
    }
    Ok(out)
}

pub fn write_triples_tsv(triples: &[Triple]) -> String {
    triples
        .iter()
        .map(|t| format!("{}\t{}\t{}\n", t.subject, t.relation, t.object))
        .collect()
}

/// Named vectors in first-appearance order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingTable {
    names: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces.
    pub fn insert(&mut self, name: impl Into<String>, vector: Vec<f64>) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.vectors[i] = vector,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.vectors.push(vector);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&i| self.vectors[i].as_slice())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.names.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }
}

fn unique_in_order<'a>(items: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    items.filter(|s| seen.insert(*s)).map(str::to_owned).collect()
}

pub fn entities_of(triples: &[Triple]) -> Vec<String> {
    unique_in_order(triples.iter().flat_map(|t| [t.subject.as_str(), t.object.as_str()]))
}

pub fn relations_of(triples: &[Triple]) -> Vec<String> {
    unique_in_order(triples.iter().map(|t| t.relation.as_str()))
}

/// Seeded Euclidean embeddings for every entity and relation.
///
/// Each vector has a Gaussian direction and norm exactly `0.5/√c`, so its
/// exponential-map image sits well inside the ball.
pub fn seed_embeddings(
    triples: &[Triple],
    dim: usize,
    seed: u64,
    c: Curvature,
) -> Result<(EmbeddingTable, EmbeddingTable)> {
    if dim < 2 {
        return Err(Error::InvalidArgument(format!("embedding dim must be >= 2, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = 0.5 / c.sqrt();
    let mut draw = || loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::hyperbolic::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x * target / n).collect::<Vec<f64>>();
        }
    };
    let mut entities = EmbeddingTable::new();
    for e in entities_of(triples) {
        entities.insert(e, draw());
    }
    let mut relations = EmbeddingTable::new();
    for r in relations_of(triples) {
        relations.insert(r, draw());
    }
    Ok((entities, relations))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormRule {
    /// `deg(v)^-1`
    #[default]
    InverseDegree,
    /// `deg(v)^-1/2`
    InverseSqrtDegree,
}

impl NormRule {
    pub fn apply(self, in_degree: usize) -> f64 {
        let d = in_degree as f64;
        match self {
            NormRule::InverseDegree => 1.0 / d,
            NormRule::InverseSqrtDegree => 1.0 / d.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub curvature: Curvature,
    pub tau: f64,
    pub norm_rule: NormRule,
    /// Drop triple edges whose relation gate is below 0.5 instead of only
    /// down-weighting their messages.
    pub hard_prune: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { curvature: Curvature::default(), tau: 0.5, norm_rule: NormRule::InverseDegree, hard_prune: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub feature: BallPoint,
    pub in_degree: usize,
    pub degree_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelationEntry {
    pub name: String,
    pub type_index: usize,
    pub euclidean: Vec<f64>,
    pub hyperbolic: BallPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub relation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperbolicGraph {
    pub config: GraphConfig,
    pub dim: usize,
    pub nodes: Vec<Node>,
    pub relations: Vec<RelationEntry>,
    pub edges: Vec<Edge>,
    /// One gate per relation type; the last entry belongs to the self-loop type.
    pub gates: Vec<f64>,
    node_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
}

impl HyperbolicGraph {
    pub fn self_loop_type(&self) -> usize {
        self.relations.len()
    }

    pub fn node_id(&self, name: &str) -> Result<usize> {
        self.node_index.get(name).copied().ok_or_else(|| Error::unknown("entity", name))
    }

    pub fn relation_id(&self, name: &str) -> Result<usize> {
        self.relation_index.get(name).copied().ok_or_else(|| Error::unknown("relation", name))
    }

    /// Edge feature on the ball; self-loops sit at the origin.
    pub fn edge_feature(&self, edge: &Edge) -> BallPoint {
        match self.relations.get(edge.relation) {
            Some(r) => r.hyperbolic.clone(),
            None => BallPoint::origin(self.dim, self.config.curvature),
        }
    }

    pub fn self_loop_count(&self) -> usize {
        self.edges.iter().filter(|e| e.relation == self.self_loop_type()).count()
    }

    /// Weakly connected component id per node.
    pub fn components(&self) -> Vec<usize> {
        let n = self.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for e in &self.edges {
            let (a, b) = (find(&mut parent, e.source), find(&mut parent, e.target));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
        (0..n).map(|i| find(&mut parent, i)).collect()
    }

    /// Copy of the graph with the given relation's triple edges removed; node
    /// records (including degree normalizers) are kept as built.
    pub fn without_relation(&self, relation: usize) -> HyperbolicGraph {
        let mut g = self.clone();
        g.edges.retain(|e| e.relation != relation);
        g
    }

    pub fn summary(&self) -> GraphSummary {
        let mut histogram = vec![0usize; 10];
        for &g in &self.gates {
            histogram[((g * 10.0) as usize).min(9)] += 1;
        }
        GraphSummary {
            nodes: self.nodes.len(),
            edges: self.edges.len(),
            self_loops: self.self_loop_count(),
            triple_edges: self.edges.len() - self.self_loop_count(),
            relation_types: self.relations.len() + 1,
            gate_histogram: histogram
                .into_iter()
                .enumerate()
                .map(|(i, count)| GateBin { lo: i as f64 / 10.0, hi: (i + 1) as f64 / 10.0, count })
                .collect(),
        }
    }

    pub fn dump(&self) -> GraphDump {
        let sl = self.self_loop_type();
        GraphDump {
            config: self.config,
            dim: self.dim,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDump {
                    name: n.name.clone(),
                    feature: n.feature.coords().to_vec(),
                    in_degree: n.in_degree,
                    degree_norm: n.degree_norm,
                })
                .collect(),
            relations: self
                .relations
                .iter()
                .map(|r| RelationDump {
                    name: r.name.clone(),
                    type_index: r.type_index,
                    gate: self.gates[r.type_index],
                    hyperbolic: r.hyperbolic.coords().to_vec(),
                })
                .collect(),
            self_loop: SelfLoopDump { type_index: sl, gate: self.gates[sl] },
            edges: self
                .edges
                .iter()
                .map(|e| EdgeDump {
                    source: self.nodes[e.source].name.clone(),
                    target: self.nodes[e.target].name.clone(),
                    relation: e.relation,
                })
                .collect(),
            summary: self.summary(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GateBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GraphSummary {
    pub nodes: usize,
    pub edges: usize,
    pub self_loops: usize,
    pub triple_edges: usize,
    pub relation_types: usize,
    pub gate_histogram: Vec<GateBin>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeDump {
    pub name: String,
    pub feature: Vec<f64>,
    pub in_degree: usize,
    pub degree_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationDump {
    pub name: String,
    pub type_index: usize,
    pub gate: f64,
    pub hyperbolic: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelfLoopDump {
    pub type_index: usize,
    pub gate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EdgeDump {
    pub source: String,
    pub target: String,
    pub relation: usize,
}

/// Diagnostic JSON form of a graph. Field order is fixed by declaration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDump {
    pub config: GraphConfig,
    pub dim: usize,
    pub nodes: Vec<NodeDump>,
    pub relations: Vec<RelationDump>,
    pub self_loop: SelfLoopDump,
    pub edges: Vec<EdgeDump>,
    pub summary: GraphSummary,
}

pub fn build_graph(
    triples: &[Triple],
    entity_embeds: &EmbeddingTable,
    relation_embeds: &EmbeddingTable,
    config: GraphConfig,
) -> Result<HyperbolicGraph> {
    let c = config.curvature;
    let mut dim = None;
    let mut check_dim = |v: &[f64], name: &str| -> Result<()> {
        match dim {
            None => {
                dim = Some(v.len());
                Ok(())
            }
            Some(d) if d == v.len() => Ok(()),
            Some(d) => Err(Error::Config(format!("embedding `{name}` has dim {}, expected {d}", v.len()))),
        }
    };

    let mut nodes = Vec::new();
    let mut node_index = HashMap::new();
    for name in entities_of(triples) {
        let e = entity_embeds.get(&name).ok_or_else(|| Error::unknown("entity embedding", &name))?;
        check_dim(e, &name)?;
        node_index.insert(name.clone(), nodes.len());
        nodes.push(Node { name, feature: exp_map_origin(e, c)?, in_degree: 0, degree_norm: 0.0 });
    }

    let mut relations = Vec::new();
    let mut relation_index = HashMap::new();
    for name in relations_of(triples) {
        let r = relation_embeds.get(&name).ok_or_else(|| Error::unknown("relation embedding", &name))?;
        check_dim(r, &name)?;
        let type_index = relations.len();
        relation_index.insert(name.clone(), type_index);
        relations.push(RelationEntry { name, type_index, euclidean: r.to_vec(), hyperbolic: exp_map_origin(r, c)? });
    }
    let dim = dim.unwrap_or(0);

    let mut gates: Vec<f64> = relations.iter().map(|r| persistence_gate(r.hyperbolic.coords(), config.tau)).collect();
    gates.push(persistence_gate(&vec![0.0; dim], config.tau));

    let mut edges = Vec::with_capacity(triples.len() + nodes.len());
    for t in triples {
        let relation = relation_index[&t.relation];
        if config.hard_prune && gates[relation] < 0.5 {
            continue;
        }
        edges.push(Edge { source: node_index[&t.subject], target: node_index[&t.object], relation });
    }
    let self_type = relations.len();
    for i in 0..nodes.len() {
        edges.push(Edge { source: i, target: i, relation: self_type });
    }
    for e in &edges {
        nodes[e.target].in_degree += 1;
    }
    for n in &mut nodes {
        n.degree_norm = config.norm_rule.apply(n.in_degree);
    }

    Ok(HyperbolicGraph { config, dim, nodes, relations, edges, gates, node_index, relation_index })
}

/// Seeds embeddings and builds the graph in one step.
pub fn build_seeded_graph(triples: &[Triple], dim: usize, seed: u64, config: GraphConfig) -> Result<HyperbolicGraph> {
    let (ents, rels) = seed_embeddings(triples, dim, seed, config.curvature)?;
    build_graph(triples, &ents, &rels, config)
}
