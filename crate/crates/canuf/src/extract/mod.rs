//! Automated constraint extraction: match rule templates against a knowledge
//! graph of structured records, instantiate candidate constraints, verify
//! them against a dataset by weighted satisfaction rate, and keep the ones
//! scoring above threshold.
//!
//! Matching over templates may run concurrently — graph and templates are
//! immutable here and the output ordering is content-based, never
//! input-order-based.

mod graph;
mod template;

pub use graph::{cosine_similarity, Edge, KnowledgeGraph, Vertex, VertexKind};
pub use template::{
    instantiate, load_templates, match_templates, parse_templates, PatternEdge, Recipe,
    RuleTemplate, SlotDescriptor, TemplateKind, TemplateMatch, TermRecipe,
};

use thiserror::Error;

use crate::expr::{Constraint, ConstraintError};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("malformed record at line {line}: {message}")]
    Record { line: usize, message: String },
    #[error("duplicate vertex id `{id}`")]
    DuplicateVertex { id: String },
    #[error("edge references missing vertex (`{src}` -> `{dst}`)")]
    DanglingEdge { src: String, dst: String },
    #[error("vertex `{id}` has embedding dimension {got}, expected {expected}")]
    EmbeddingDimension {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("vertex `{id}` has a non-finite embedding component")]
    NonFiniteEmbedding { id: String },
    #[error("template library error: {0}")]
    TemplateFormat(String),
    #[error("template `{template}` recipe references undeclared slot `{slot}`")]
    RecipeSlot { template: String, slot: String },
    #[error("template `{template}`: pattern edge {from} -> {to} has no payload")]
    MissingPayload {
        template: String,
        from: String,
        to: String,
    },
    #[error("template `{template}`: no output binding for concept label `{label}`")]
    UnboundTarget { template: String, label: String },
    #[error("similarity threshold must lie in [0, 1], got {0}")]
    BadThreshold(f64),
    #[error("score threshold must lie in [0, 1], got {0}")]
    BadScoreThreshold(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

/// Constraint plus its verification score.
#[derive(Debug, Clone)]
pub struct ScoredConstraint {
    pub constraint: Constraint,
    pub score: f64,
}

/// Weighted satisfaction rate (1/N)·Σ c(yᵢ, xᵢ)·w(xᵢ). Note the division is
/// by N, not Σw: with non-uniform weights the score can exceed 1 and is not
/// comparable across datasets. With w ≡ 1 it is the satisfaction fraction.
/// Evaluation errors (e.g. domain violations) count as unsatisfied.
pub fn score_constraint(
    c: &Constraint,
    dataset: &[(Vec<f64>, Vec<f64>)],
    weights: Option<&[f64]>,
) -> Result<f64, ExtractError> {
    if dataset.is_empty() {
        return Err(ExtractError::DimensionMismatch(
            "verification dataset is empty".to_string(),
        ));
    }
    if let Some(w) = weights {
        if w.len() != dataset.len() {
            return Err(ExtractError::DimensionMismatch(format!(
                "{} weights for {} samples",
                w.len(),
                dataset.len()
            )));
        }
        if let Some(bad) = w.iter().find(|v| **v < 0.0 || !v.is_finite()) {
            return Err(ExtractError::DimensionMismatch(format!(
                "weights must be nonnegative and finite, got {bad}"
            )));
        }
    }
    let (x0, y0) = &dataset[0];
    c.check_dims(y0.len(), x0.len())
        .map_err(ExtractError::Constraint)?;
    let mut acc = 0.0;
    for (i, (x, y)) in dataset.iter().enumerate() {
        let sat = c.is_satisfied(y, x, 0.0).unwrap_or(false);
        if sat {
            acc += weights.map_or(1.0, |w| w[i]);
        }
    }
    Ok(acc / dataset.len() as f64)
}

/// End-to-end extraction: match templates, instantiate candidates (dropping
/// structural duplicates), score each against the dataset, and keep scores
/// ≥ `tau_score`. Output is ordered by descending score, then constraint id,
/// and is invariant to the input order of vertices and edges.
pub fn extract(
    graph: &KnowledgeGraph,
    templates: &[RuleTemplate],
    dataset: &[(Vec<f64>, Vec<f64>)],
    weights: Option<&[f64]>,
    d_y: usize,
    tau_score: f64,
    sim_threshold: f64,
) -> Result<Vec<ScoredConstraint>, ExtractError> {
    if !(0.0..=1.0).contains(&tau_score) {
        return Err(ExtractError::BadScoreThreshold(tau_score));
    }
    let matches = match_templates(graph, templates, sim_threshold)?;
    let mut candidates: Vec<Constraint> = Vec::new();
    for m in &matches {
        let t = templates
            .iter()
            .find(|t| t.id == m.template_id)
            .expect("match came from this template list");
        let c = instantiate(t, m, graph, d_y)?;
        // Candidate set semantics: symmetric slot assignments can produce
        // the same constraint; keep the first (matches are already in
        // canonical order).
        if !candidates.iter().any(|prev| prev.structurally_eq(&c, 0.0)) {
            candidates.push(c);
        }
    }
    let mut scored: Vec<ScoredConstraint> = Vec::new();
    for mut c in candidates {
        let score = score_constraint(&c, dataset, weights)?;
        if score >= tau_score {
            c.score = Some(score);
            scored.push(ScoredConstraint { constraint: c, score });
        }
    }
    scored.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.constraint.id.cmp(&b.constraint.id))
    });
    Ok(scored)
}

/// Precision/recall/F1 of extracted constraints against a gold set, with
/// structural equality at absolute tolerance 1e-9. Undefined ratios are
/// reported as 0 by convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractionMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn extraction_metrics(extracted: &[Constraint], gold: &[Constraint]) -> ExtractionMetrics {
    const TOL: f64 = 1e-9;
    let mut gold_used = vec![false; gold.len()];
    let mut matched = 0usize;
    for e in extracted {
        if let Some(k) = gold
            .iter()
            .enumerate()
            .position(|(k, g)| !gold_used[k] && e.structurally_eq(g, TOL))
        {
            gold_used[k] = true;
            matched += 1;
        }
    }
    let precision = if extracted.is_empty() {
        0.0
    } else {
        matched as f64 / extracted.len() as f64
    };
    let recall = if gold.is_empty() {
        0.0
    } else {
        matched as f64 / gold.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ExtractionMetrics {
        precision,
        recall,
        f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::{parse_constraint, ConstraintKind};
    use std::collections::BTreeMap;

    /// Fixture: a conservation motif over (q_in, q_out) with payloads
    /// (1, 1, C = 2), a bounds motif capping `gap` at 0, and a spurious
    /// conservation motif with a wrong conserved value.
    fn fixture_graph() -> KnowledgeGraph {
        let mut g = KnowledgeGraph::new();
        let vertices = [
            ("q_in", "energy_in", VertexKind::Quantity, vec![1.0, 0.0, 0.0]),
            ("q_out", "energy_out", VertexKind::Quantity, vec![0.95, 0.05, 0.0]),
            ("law", "balance", VertexKind::RelationNode, vec![0.0, 1.0, 0.0]),
            ("gap", "gap", VertexKind::Quantity, vec![0.0, 0.0, 1.0]),
            ("rule", "stability", VertexKind::RelationNode, vec![0.0, 0.9, 0.1]),
            // Spurious motif: structurally identical conservation with a
            // wrong conserved value.
            ("law2", "balance2", VertexKind::RelationNode, vec![0.0, 1.0, 0.0]),
        ];
        for (id, label, kind, emb) in vertices {
            g.add_vertex(Vertex {
                id: id.to_string(),
                label: label.to_string(),
                kind,
                emb,
            })
            .unwrap();
        }
        let edges = [
            ("law", "q_in", "involves", Some(1.0)),
            ("law", "q_out", "involves", Some(1.0)),
            ("law", "law", "conserved-value", Some(2.0)),
            ("rule", "gap", "upper-bound", Some(0.0)),
            ("law2", "q_in", "involves", Some(1.0)),
            ("law2", "q_out", "involves", Some(1.0)),
            ("law2", "law2", "conserved-value", Some(5.0)),
        ];
        for (src, dst, rel, payload) in edges {
            g.add_edge(Edge {
                src: src.to_string(),
                dst: dst.to_string(),
                rel: rel.to_string(),
                payload,
            })
            .unwrap();
        }
        g
    }

    fn conservation_template() -> RuleTemplate {
        let targets: BTreeMap<String, usize> =
            [("energy_in".to_string(), 0), ("energy_out".to_string(), 1)]
                .into_iter()
                .collect();
        RuleTemplate {
            id: "cons".to_string(),
            kind: TemplateKind::Conservation,
            slots: vec![
                SlotDescriptor {
                    name: "law".to_string(),
                    kind: VertexKind::RelationNode,
                    anchor: vec![0.0, 1.0, 0.0],
                },
                SlotDescriptor {
                    name: "a".to_string(),
                    kind: VertexKind::Quantity,
                    anchor: vec![1.0, 0.0, 0.0],
                },
                SlotDescriptor {
                    name: "b".to_string(),
                    kind: VertexKind::Quantity,
                    anchor: vec![1.0, 0.0, 0.0],
                },
            ],
            edges: vec![
                PatternEdge {
                    from: "law".to_string(),
                    to: "a".to_string(),
                    rel: "involves".to_string(),
                },
                PatternEdge {
                    from: "law".to_string(),
                    to: "b".to_string(),
                    rel: "involves".to_string(),
                },
                PatternEdge {
                    from: "law".to_string(),
                    to: "law".to_string(),
                    rel: "conserved-value".to_string(),
                },
            ],
            recipe: Recipe::Conservation {
                terms: vec![
                    TermRecipe {
                        slot: "a".to_string(),
                        coefficient_edge: ("law".to_string(), "a".to_string()),
                    },
                    TermRecipe {
                        slot: "b".to_string(),
                        coefficient_edge: ("law".to_string(), "b".to_string()),
                    },
                ],
                value_edge: ("law".to_string(), "law".to_string()),
                tolerance: 1e-6,
                targets,
            },
            soft_weight: None,
        }
    }

    fn bounds_template() -> RuleTemplate {
        RuleTemplate {
            id: "ubound".to_string(),
            kind: TemplateKind::Bounds,
            slots: vec![
                SlotDescriptor {
                    name: "rule".to_string(),
                    kind: VertexKind::RelationNode,
                    anchor: vec![0.0, 0.9, 0.1],
                },
                SlotDescriptor {
                    name: "q".to_string(),
                    kind: VertexKind::Quantity,
                    anchor: vec![0.0, 0.0, 1.0],
                },
            ],
            edges: vec![PatternEdge {
                from: "rule".to_string(),
                to: "q".to_string(),
                rel: "upper-bound".to_string(),
            }],
            recipe: Recipe::Bounds {
                slot: "q".to_string(),
                upper_edge: Some(("rule".to_string(), "q".to_string())),
                lower_edge: None,
                targets: [("gap".to_string(), 2)].into_iter().collect(),
            },
            soft_weight: None,
        }
    }

    /// Dataset over (x, y) with y = (e_in, e_out, gap): conservation
    /// e_in + e_out = 2 holds everywhere, gap ≤ 0 holds everywhere; the
    /// spurious value 5 is satisfied nowhere.
    fn fixture_dataset(n: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
        (0..n)
            .map(|i| {
                let t = i as f64 / n as f64;
                (vec![t], vec![1.0 + t, 1.0 - t, -t - 0.1])
            })
            .collect()
    }

    #[test]
    fn matching_finds_the_single_conservation_motif_at_high_threshold() {
        let g = fixture_graph();
        let templates = [conservation_template()];
        let matches = match_templates(&g, &templates, 0.85).unwrap();
        // Both (a=q_in, b=q_out) and the swap match structurally; law2 too.
        // At 0.85 the embeddings keep all of them; sanity-check structure.
        assert!(!matches.is_empty());
        for m in &matches {
            assert_eq!(m.template_id, "cons");
            assert!(m.similarity >= 0.85);
            let law = &m.assignment["law"];
            assert!(law == "law" || law == "law2");
        }
    }

    #[test]
    fn threshold_zero_yields_every_structural_assignment() {
        let g = fixture_graph();
        let templates = [conservation_template()];
        let got = match_templates(&g, &templates, 0.0).unwrap();
        // Brute-force recount: law slot ∈ {law, law2, rule}; (a, b) ordered
        // pairs of distinct quantities with the required edges.
        let mut count = 0;
        for law in ["law", "rule", "law2", "gap", "q_in", "q_out"] {
            let lv = g.vertex(law).unwrap();
            if lv.kind != VertexKind::RelationNode {
                continue;
            }
            for a in ["q_in", "q_out", "gap"] {
                for b in ["q_in", "q_out", "gap"] {
                    if a == b {
                        continue;
                    }
                    if g.has_edge(law, a, "involves")
                        && g.has_edge(law, b, "involves")
                        && g.has_edge(law, law, "conserved-value")
                    {
                        count += 1;
                    }
                }
            }
        }
        assert_eq!(got.len(), count);
        assert!(count >= 4, "fixture should have at least the two motifs × swap");
    }

    #[test]
    fn impossible_threshold_yields_nothing() {
        let g = fixture_graph();
        let mut t = conservation_template();
        // Anchors orthogonal to every embedding.
        for s in &mut t.slots {
            s.anchor = vec![0.0, 0.0, 0.0];
        }
        let matches = match_templates(&g, &[t], 1.0).unwrap();
        assert!(matches.is_empty());
    }

    #[test]
    fn matches_are_sorted_and_deterministic() {
        let g = fixture_graph();
        let templates = [conservation_template(), bounds_template()];
        let a = match_templates(&g, &templates, 0.0).unwrap();
        for w in a.windows(2) {
            assert!(w[0].similarity >= w[1].similarity);
        }
        let b = match_templates(&g, &templates, 0.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn instantiation_reads_payloads() {
        let g = fixture_graph();
        let t = conservation_template();
        let matches = match_templates(&g, &[t.clone()], 0.85).unwrap();
        let m = matches
            .iter()
            .find(|m| m.assignment["law"] == "law")
            .unwrap();
        let c = instantiate(&t, m, &g, 3).unwrap();
        match &c.kind {
            ConstraintKind::Conservation {
                coefficients,
                value,
                ..
            } => {
                assert_eq!(coefficients[0], 1.0);
                assert_eq!(coefficients[1], 1.0);
                assert_eq!(coefficients[2], 0.0);
                assert_eq!(*value, 2.0);
            }
            other => panic!("expected conservation, got {other:?}"),
        }
        assert!(matches!(
            c.provenance,
            crate::expr::Provenance::Extracted { .. }
        ));
    }

    #[test]
    fn instantiation_bounds_motif() {
        let g = fixture_graph();
        let t = bounds_template();
        let matches = match_templates(&g, &[t.clone()], 0.5).unwrap();
        let c = instantiate(&t, &matches[0], &g, 3).unwrap();
        assert_eq!(
            c.kind,
            ConstraintKind::Bounds {
                index: 2,
                lower: None,
                upper: Some(0.0)
            }
        );
    }

    #[test]
    fn missing_payload_is_an_error() {
        let mut g = fixture_graph();
        // Motif whose coefficient edge has no payload.
        g.add_vertex(Vertex {
            id: "law3".to_string(),
            label: "balance3".to_string(),
            kind: VertexKind::RelationNode,
            emb: vec![0.0, 1.0, 0.0],
        })
        .unwrap();
        for (dst, payload) in [("q_in", None), ("q_out", Some(1.0))] {
            g.add_edge(Edge {
                src: "law3".to_string(),
                dst: dst.to_string(),
                rel: "involves".to_string(),
                payload,
            })
            .unwrap();
        }
        g.add_edge(Edge {
            src: "law3".to_string(),
            dst: "law3".to_string(),
            rel: "conserved-value".to_string(),
            payload: Some(2.0),
        })
        .unwrap();
        let t = conservation_template();
        let matches = match_templates(&g, &[t.clone()], 0.0).unwrap();
        let m = matches
            .iter()
            .find(|m| m.assignment["law"] == "law3" && m.assignment["a"] == "q_in")
            .unwrap();
        assert!(matches!(
            instantiate(&t, m, &g, 3),
            Err(ExtractError::MissingPayload { .. })
        ));
    }

    #[test]
    fn score_is_the_satisfaction_fraction_under_uniform_weights() {
        let c = parse_constraint("hard: y[0] <= 1.0", 1, 1).unwrap();
        let dataset: Vec<(Vec<f64>, Vec<f64>)> = vec![
            (vec![0.0], vec![0.5]),
            (vec![0.0], vec![0.9]),
            (vec![0.0], vec![1.5]),
            (vec![0.0], vec![0.1]),
        ];
        assert_eq!(score_constraint(&c, &dataset, None).unwrap(), 0.75);
        let all = vec![(vec![0.0], vec![0.5]); 8];
        assert_eq!(score_constraint(&c, &all, None).unwrap(), 1.0);
    }

    #[test]
    fn score_matches_direct_recount_on_random_halfspace() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let c = parse_constraint("hard: 1.0*y[0] + -0.5*y[1] <= 0.25", 2, 1).unwrap();
        let dataset: Vec<(Vec<f64>, Vec<f64>)> = (0..1000)
            .map(|_| {
                (
                    vec![rng.gen_range(-1.0..1.0)],
                    vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                )
            })
            .collect();
        let got = score_constraint(&c, &dataset, None).unwrap();
        let count = dataset
            .iter()
            .filter(|(_, y)| y[0] - 0.5 * y[1] <= 0.25)
            .count();
        assert_eq!(got, count as f64 / 1000.0);
    }

    #[test]
    fn end_to_end_extraction_keeps_valid_and_drops_spurious() {
        let g = fixture_graph();
        let templates = [conservation_template(), bounds_template()];
        let dataset = fixture_dataset(40);
        let out = extract(&g, &templates, &dataset, None, 3, 0.9, 0.85).unwrap();
        // Valid conservation (C = 2) and the gap bound survive; the C = 5
        // motif scores 0 and is dropped.
        assert_eq!(out.len(), 2, "{:?}", out);
        assert!(out.iter().all(|s| s.score >= 0.9));
        for w in out.windows(2) {
            assert!(w[0].score >= w[1].score);
        }
    }

    #[test]
    fn zero_threshold_returns_all_candidates() {
        let g = fixture_graph();
        let templates = [conservation_template(), bounds_template()];
        let dataset = fixture_dataset(10);
        let out = extract(&g, &templates, &dataset, None, 3, 0.0, 0.85).unwrap();
        // Dedup keeps one constraint per distinct (kind, parameters):
        // valid conservation, spurious conservation, gap bound.
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn empty_template_list_gives_empty_result() {
        let g = fixture_graph();
        let out = extract(&g, &[], &fixture_dataset(5), None, 3, 0.5, 0.85).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn raising_tau_never_adds_constraints() {
        let g = fixture_graph();
        let templates = [conservation_template(), bounds_template()];
        let dataset = fixture_dataset(16);
        let mut prev: Option<Vec<String>> = None;
        for tau in [0.0, 0.25, 0.5, 0.75, 0.9, 1.0] {
            let ids: Vec<String> = extract(&g, &templates, &dataset, None, 3, tau, 0.0)
                .unwrap()
                .into_iter()
                .map(|s| s.constraint.id)
                .collect();
            if let Some(p) = &prev {
                assert!(ids.iter().all(|id| p.contains(id)), "tau {tau} added ids");
            }
            prev = Some(ids);
        }
    }

    #[test]
    fn extraction_is_invariant_to_record_order() {
        let g = fixture_graph();
        // Rebuild with vertices and edges inserted in reverse.
        let mut rev = KnowledgeGraph::new();
        for v in g.vertices().iter().rev() {
            rev.add_vertex(v.clone()).unwrap();
        }
        for e in g.edges().iter().rev() {
            rev.add_edge(e.clone()).unwrap();
        }
        let templates = [conservation_template(), bounds_template()];
        let dataset = fixture_dataset(12);
        let a = extract(&g, &templates, &dataset, None, 3, 0.0, 0.0).unwrap();
        let b = extract(&rev, &templates, &dataset, None, 3, 0.0, 0.0).unwrap();
        let ids_a: Vec<_> = a.iter().map(|s| s.constraint.id.clone()).collect();
        let ids_b: Vec<_> = b.iter().map(|s| s.constraint.id.clone()).collect();
        assert_eq!(ids_a, ids_b);
    }

    #[test]
    fn extracted_constraints_reparse_from_pretty_print() {
        let g = fixture_graph();
        let templates = [conservation_template(), bounds_template()];
        let dataset = fixture_dataset(12);
        for s in extract(&g, &templates, &dataset, None, 3, 0.0, 0.0).unwrap() {
            let printed = s.constraint.to_string();
            let reparsed = parse_constraint(&printed, 3, 1)
                .unwrap_or_else(|e| panic!("`{printed}`: {e}"));
            assert!(reparsed.structurally_eq(&s.constraint, 0.0));
        }
    }

    #[test]
    fn metrics_examples() {
        let gold: Vec<Constraint> = (0..4)
            .map(|i| {
                parse_constraint(&format!("hard: y[0] <= {}.0", i), 1, 0).unwrap()
            })
            .collect();
        let m = extraction_metrics(&gold, &gold);
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));

        let m = extraction_metrics(&[], &gold);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));

        // 2 correct of 3 extracted, gold size 4.
        let extracted = vec![
            gold[0].clone(),
            gold[1].clone(),
            parse_constraint("hard: y[0] <= 99.0", 1, 0).unwrap(),
        ];
        let m = extraction_metrics(&extracted, &gold);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 0.5).abs() < 1e-12);
        assert!((m.f1 - 0.5714285714285715).abs() < 1e-9);
    }
}
