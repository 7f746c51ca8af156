//! Rule templates: typed slot patterns matched against the knowledge graph,
//! plus instantiation recipes turning matches into constraints.
//!
//! A template names its slots (each with a required vertex kind and an anchor
//! embedding), the edges that must hold between matched slots, and a recipe
//! reading numeric payloads off those edges. Output indices come from the
//! recipe's `targets` table, which binds concept labels to target columns of
//! the prediction task.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::{cosine_similarity, KnowledgeGraph, VertexKind};
use super::ExtractError;
use crate::expr::{Constraint, ConstraintKind, Hardness, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    Conservation,
    Bounds,
    LinearRelation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlotDescriptor {
    pub name: String,
    pub kind: VertexKind,
    pub anchor: Vec<f64>,
}

/// Required edge between two slots (self-pairs are allowed and match
/// self-loops in the graph).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatternEdge {
    pub from: String,
    pub to: String,
    pub rel: String,
}

/// Reference to a pattern edge by its slot pair.
pub type EdgeRef = (String, String);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TermRecipe {
    /// Quantity slot whose matched label resolves the output index.
    pub slot: String,
    /// Pattern edge carrying this term's coefficient payload.
    pub coefficient_edge: EdgeRef,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    Conservation {
        terms: Vec<TermRecipe>,
        /// Pattern edge carrying the conserved value.
        value_edge: EdgeRef,
        tolerance: f64,
        /// Concept label → output index.
        targets: BTreeMap<String, usize>,
    },
    Bounds {
        slot: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        upper_edge: Option<EdgeRef>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lower_edge: Option<EdgeRef>,
        targets: BTreeMap<String, usize>,
    },
    Linear {
        terms: Vec<TermRecipe>,
        /// Pattern edge carrying the inequality bound.
        bound_edge: EdgeRef,
        targets: BTreeMap<String, usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleTemplate {
    pub id: String,
    pub kind: TemplateKind,
    pub slots: Vec<SlotDescriptor>,
    pub edges: Vec<PatternEdge>,
    pub recipe: Recipe,
    /// Hardness of instantiated constraints; weight `None` means hard.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_weight: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TemplateFile {
    templates: Vec<RuleTemplate>,
}

/// Load a template library (JSON with a top-level `templates` array).
pub fn load_templates(path: &std::path::Path) -> Result<Vec<RuleTemplate>, ExtractError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ExtractError::TemplateFormat(format!("cannot read {}: {e}", path.display())))?;
    parse_templates(&text)
}

pub fn parse_templates(text: &str) -> Result<Vec<RuleTemplate>, ExtractError> {
    let file: TemplateFile =
        serde_json::from_str(text).map_err(|e| ExtractError::TemplateFormat(e.to_string()))?;
    for t in &file.templates {
        t.validate()?;
    }
    Ok(file.templates)
}

impl RuleTemplate {
    pub fn validate(&self) -> Result<(), ExtractError> {
        let mut seen = BTreeMap::new();
        for s in &self.slots {
            if seen.insert(s.name.clone(), ()).is_some() {
                return Err(ExtractError::TemplateFormat(format!(
                    "template `{}`: duplicate slot `{}`",
                    self.id, s.name
                )));
            }
        }
        let has_slot = |n: &str| self.slots.iter().any(|s| s.name == n);
        for e in &self.edges {
            if !has_slot(&e.from) || !has_slot(&e.to) {
                return Err(ExtractError::TemplateFormat(format!(
                    "template `{}`: edge references undeclared slot",
                    self.id
                )));
            }
        }
        let check_ref = |r: &EdgeRef| -> Result<(), ExtractError> {
            if self.edges.iter().any(|e| e.from == r.0 && e.to == r.1) {
                Ok(())
            } else {
                Err(ExtractError::TemplateFormat(format!(
                    "template `{}`: recipe references missing pattern edge {} -> {}",
                    self.id, r.0, r.1
                )))
            }
        };
        match &self.recipe {
            Recipe::Conservation {
                terms,
                value_edge,
                tolerance,
                ..
            } => {
                for t in terms {
                    if !has_slot(&t.slot) {
                        return Err(ExtractError::RecipeSlot {
                            template: self.id.clone(),
                            slot: t.slot.clone(),
                        });
                    }
                    check_ref(&t.coefficient_edge)?;
                }
                check_ref(value_edge)?;
                if *tolerance <= 0.0 {
                    return Err(ExtractError::TemplateFormat(format!(
                        "template `{}`: conservation tolerance must be positive",
                        self.id
                    )));
                }
            }
            Recipe::Bounds {
                slot,
                upper_edge,
                lower_edge,
                ..
            } => {
                if !has_slot(slot) {
                    return Err(ExtractError::RecipeSlot {
                        template: self.id.clone(),
                        slot: slot.clone(),
                    });
                }
                if upper_edge.is_none() && lower_edge.is_none() {
                    return Err(ExtractError::TemplateFormat(format!(
                        "template `{}`: bounds recipe needs at least one side",
                        self.id
                    )));
                }
                for r in [upper_edge, lower_edge].into_iter().flatten() {
                    check_ref(r)?;
                }
            }
            Recipe::Linear { terms, bound_edge, .. } => {
                for t in terms {
                    if !has_slot(&t.slot) {
                        return Err(ExtractError::RecipeSlot {
                            template: self.id.clone(),
                            slot: t.slot.clone(),
                        });
                    }
                    check_ref(&t.coefficient_edge)?;
                }
                check_ref(bound_edge)?;
            }
        }
        Ok(())
    }
}

/// One structural match: slot name → vertex id, with its similarity score.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateMatch {
    pub template_id: String,
    pub assignment: BTreeMap<String, String>,
    pub similarity: f64,
}

impl TemplateMatch {
    /// Canonical id: slot=vertex pairs in slot order.
    pub fn match_id(&self) -> String {
        let parts: Vec<String> = self
            .assignment
            .iter()
            .map(|(s, v)| format!("{s}={v}"))
            .collect();
        parts.join(",")
    }
}

/// Exhaustive typed subgraph matching. Every returned match satisfies the
/// template's structural pattern exactly and scores at least `sim_threshold`
/// (mean cosine similarity of slot anchors to assigned embeddings). Results
/// are sorted by descending similarity, ties broken by template id then the
/// lexicographically smallest assignment.
pub fn match_templates(
    graph: &KnowledgeGraph,
    templates: &[RuleTemplate],
    sim_threshold: f64,
) -> Result<Vec<TemplateMatch>, ExtractError> {
    if !(0.0..=1.0).contains(&sim_threshold) {
        return Err(ExtractError::BadThreshold(sim_threshold));
    }
    let mut out = Vec::new();
    for t in templates {
        t.validate()?;
        let mut assignment: Vec<Option<usize>> = vec![None; t.slots.len()];
        enumerate(graph, t, 0, &mut assignment, sim_threshold, &mut out);
    }
    out.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap()
            .then_with(|| a.template_id.cmp(&b.template_id))
            .then_with(|| a.match_id().cmp(&b.match_id()))
    });
    Ok(out)
}

fn enumerate(
    graph: &KnowledgeGraph,
    t: &RuleTemplate,
    depth: usize,
    assignment: &mut Vec<Option<usize>>,
    sim_threshold: f64,
    out: &mut Vec<TemplateMatch>,
) {
    if depth == t.slots.len() {
        let map: BTreeMap<String, String> = t
            .slots
            .iter()
            .zip(assignment.iter())
            .map(|(s, v)| (s.name.clone(), graph.vertices()[v.unwrap()].id.clone()))
            .collect();
        let mut sim = 0.0;
        for (s, v) in t.slots.iter().zip(assignment.iter()) {
            sim += cosine_similarity(&s.anchor, &graph.vertices()[v.unwrap()].emb);
        }
        sim /= t.slots.len() as f64;
        if sim >= sim_threshold {
            out.push(TemplateMatch {
                template_id: t.id.clone(),
                assignment: map,
                similarity: sim,
            });
        }
        return;
    }
    let slot = &t.slots[depth];
    for (vi, v) in graph.vertices().iter().enumerate() {
        if v.kind != slot.kind {
            continue;
        }
        // Injective over vertices.
        if assignment.iter().any(|a| *a == Some(vi)) {
            continue;
        }
        assignment[depth] = Some(vi);
        if edges_consistent(graph, t, assignment) {
            enumerate(graph, t, depth + 1, assignment, sim_threshold, out);
        }
        assignment[depth] = None;
    }
}

/// Check every pattern edge whose endpoints are both assigned.
fn edges_consistent(graph: &KnowledgeGraph, t: &RuleTemplate, assignment: &[Option<usize>]) -> bool {
    let slot_vertex = |name: &str| -> Option<&str> {
        t.slots
            .iter()
            .position(|s| s.name == name)
            .and_then(|i| assignment[i])
            .map(|vi| graph.vertices()[vi].id.as_str())
    };
    for e in &t.edges {
        if let (Some(src), Some(dst)) = (slot_vertex(&e.from), slot_vertex(&e.to)) {
            if !graph.has_edge(src, dst, &e.rel) {
                return false;
            }
        }
    }
    true
}

/// Apply the template's recipe to a match, reading payloads off the matched
/// edges. `d_y` sizes the dense coefficient rows.
pub fn instantiate(
    t: &RuleTemplate,
    m: &TemplateMatch,
    graph: &KnowledgeGraph,
    d_y: usize,
) -> Result<Constraint, ExtractError> {
    let vertex_of = |slot: &str| -> Result<&str, ExtractError> {
        m.assignment
            .get(slot)
            .map(|s| s.as_str())
            .ok_or_else(|| ExtractError::RecipeSlot {
                template: t.id.clone(),
                slot: slot.to_string(),
            })
    };
    let payload_of = |r: &EdgeRef| -> Result<f64, ExtractError> {
        let src = vertex_of(&r.0)?;
        let dst = vertex_of(&r.1)?;
        let rel = t
            .edges
            .iter()
            .find(|e| e.from == r.0 && e.to == r.1)
            .map(|e| e.rel.clone())
            .expect("recipe refs validated");
        graph
            .edge_payload(src, dst, &rel)
            .flatten()
            .ok_or_else(|| ExtractError::MissingPayload {
                template: t.id.clone(),
                from: r.0.clone(),
                to: r.1.clone(),
            })
    };
    let target_of = |targets: &BTreeMap<String, usize>, slot: &str| -> Result<usize, ExtractError> {
        let vid = vertex_of(slot)?;
        let label = &graph.vertex(vid).expect("matched vertex exists").label;
        let idx = *targets
            .get(label)
            .ok_or_else(|| ExtractError::UnboundTarget {
                template: t.id.clone(),
                label: label.clone(),
            })?;
        if idx >= d_y {
            return Err(ExtractError::DimensionMismatch(format!(
                "template `{}`: target index {idx} exceeds output dimension {d_y}",
                t.id
            )));
        }
        Ok(idx)
    };

    let kind = match &t.recipe {
        Recipe::Conservation {
            terms,
            value_edge,
            tolerance,
            targets,
        } => {
            let mut coefficients = vec![0.0; d_y];
            for term in terms {
                let idx = target_of(targets, &term.slot)?;
                coefficients[idx] += payload_of(&term.coefficient_edge)?;
            }
            ConstraintKind::Conservation {
                coefficients,
                value: payload_of(value_edge)?,
                tolerance: *tolerance,
            }
        }
        Recipe::Bounds {
            slot,
            upper_edge,
            lower_edge,
            targets,
        } => {
            let index = target_of(targets, slot)?;
            let upper = upper_edge.as_ref().map(|r| payload_of(r)).transpose()?;
            let lower = lower_edge.as_ref().map(|r| payload_of(r)).transpose()?;
            ConstraintKind::Bounds { index, lower, upper }
        }
        Recipe::Linear {
            terms,
            bound_edge,
            targets,
        } => {
            let mut row = vec![0.0; d_y];
            for term in terms {
                let idx = target_of(targets, &term.slot)?;
                row[idx] += payload_of(&term.coefficient_edge)?;
            }
            ConstraintKind::LinearInequality {
                row,
                bound: payload_of(bound_edge)?,
            }
        }
    };
    let hardness = match t.soft_weight {
        Some(weight) => Hardness::Soft { weight },
        None => Hardness::Hard,
    };
    let c = Constraint {
        id: format!("{}[{}]", t.id, m.match_id()),
        kind,
        hardness,
        score: None,
        provenance: Provenance::Extracted {
            template_id: t.id.clone(),
            match_id: m.match_id(),
        },
    };
    c.check().map_err(ExtractError::Constraint)?;
    Ok(c)
}
