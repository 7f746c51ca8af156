//! Knowledge graph over structured records.
//!
//! Record file format: one JSON object per line, either
//! `{"vertex": {"id", "label", "kind", "emb": [...]}}` or
//! `{"edge": {"src", "dst", "rel", "payload": number?}}`.
//! Kinds are `quantity`, `material`, or `relation-node`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ExtractError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VertexKind {
    Quantity,
    Material,
    RelationNode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vertex {
    pub id: String,
    pub label: String,
    pub kind: VertexKind,
    pub emb: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Edge {
    pub src: String,
    pub dst: String,
    pub rel: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vertex: Option<Vertex>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    edge: Option<Edge>,
}

/// Validated graph. Vertices are kept sorted by id and edges by
/// (src, dst, rel) so everything downstream is independent of record order.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    vertices: Vec<Vertex>,
    index: BTreeMap<String, usize>,
    edges: Vec<Edge>,
    /// (src, dst, rel) → payload of the first such edge.
    edge_lookup: BTreeMap<(String, String, String), Option<f64>>,
    embedding_dim: Option<usize>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_vertex(&mut self, v: Vertex) -> Result<(), ExtractError> {
        if self.index.contains_key(&v.id) {
            return Err(ExtractError::DuplicateVertex { id: v.id });
        }
        match self.embedding_dim {
            None => self.embedding_dim = Some(v.emb.len()),
            Some(d) if d != v.emb.len() => {
                return Err(ExtractError::EmbeddingDimension {
                    id: v.id,
                    expected: d,
                    got: v.emb.len(),
                })
            }
            _ => {}
        }
        if v.emb.iter().any(|e| !e.is_finite()) {
            return Err(ExtractError::NonFiniteEmbedding { id: v.id });
        }
        self.vertices.push(v);
        self.resort();
        Ok(())
    }

    pub fn add_edge(&mut self, e: Edge) -> Result<(), ExtractError> {
        if !self.index.contains_key(&e.src) || !self.index.contains_key(&e.dst) {
            return Err(ExtractError::DanglingEdge {
                src: e.src,
                dst: e.dst,
            });
        }
        self.edge_lookup
            .entry((e.src.clone(), e.dst.clone(), e.rel.clone()))
            .or_insert(e.payload);
        self.edges.push(e);
        self.edges
            .sort_by(|a, b| (&a.src, &a.dst, &a.rel).cmp(&(&b.src, &b.dst, &b.rel)));
        Ok(())
    }

    fn resort(&mut self) {
        self.vertices.sort_by(|a, b| a.id.cmp(&b.id));
        self.index = self
            .vertices
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.clone(), i))
            .collect();
    }

    pub fn vertices(&self) -> &[Vertex] {
        &self.vertices
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn vertex(&self, id: &str) -> Option<&Vertex> {
        self.index.get(id).map(|i| &self.vertices[*i])
    }

    pub fn has_edge(&self, src: &str, dst: &str, rel: &str) -> bool {
        self.edge_lookup
            .contains_key(&(src.to_string(), dst.to_string(), rel.to_string()))
    }

    pub fn edge_payload(&self, src: &str, dst: &str, rel: &str) -> Option<Option<f64>> {
        self.edge_lookup
            .get(&(src.to_string(), dst.to_string(), rel.to_string()))
            .copied()
    }

    pub fn embedding_dim(&self) -> Option<usize> {
        self.embedding_dim
    }

    /// Parse the line-oriented record format. Blank lines and `#` comments
    /// are skipped; errors carry the line number.
    pub fn from_records(text: &str) -> Result<Self, ExtractError> {
        let mut vertices = Vec::new();
        let mut edges = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let s = raw.trim();
            if s.is_empty() || s.starts_with('#') {
                continue;
            }
            let rec: Record = serde_json::from_str(s).map_err(|e| ExtractError::Record {
                line,
                message: e.to_string(),
            })?;
            match (rec.vertex, rec.edge) {
                (Some(v), None) => vertices.push((line, v)),
                (None, Some(e)) => edges.push((line, e)),
                _ => {
                    return Err(ExtractError::Record {
                        line,
                        message: "record must contain exactly one of `vertex` or `edge`"
                            .to_string(),
                    })
                }
            }
        }
        let mut g = KnowledgeGraph::new();
        for (_, v) in vertices {
            g.add_vertex(v)?;
        }
        for (_, e) in edges {
            g.add_edge(e)?;
        }
        Ok(g)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ExtractError> {
        let text = std::fs::read_to_string(path).map_err(|e| ExtractError::Record {
            line: 0,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::from_records(&text)
    }
}

/// Cosine similarity clamped to [0, 1]; zero-norm vectors score 0.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(0.0, 1.0)
}
