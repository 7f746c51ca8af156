//! Natural-language explanations for predictions the constraint layer moved.
//!
//! Each active constraint's share of the projection displacement is measured
//! through its KKT multipliers (‖Σ λ·a‖ over the constraint's active rows);
//! constraints whose share exceeds the significance threshold are rendered
//! through per-kind text templates with `{placeholder:.precision}` syntax.
//!
//! Pure functions over immutable inputs; per-prediction generation can run
//! in parallel.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bnn::PredictiveDistribution;
use crate::csl::ProjectionResult;
use crate::expr::{Constraint, ConstraintKind};

/// Constraint kind bucket used for template lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintClass {
    Linear,
    Bounds,
    Conservation,
    Nonlinear,
}

impl ConstraintClass {
    pub fn of(kind: &ConstraintKind) -> Self {
        match kind {
            ConstraintKind::LinearInequality { .. } | ConstraintKind::LinearEquality { .. } => {
                ConstraintClass::Linear
            }
            ConstraintKind::Bounds { .. } => ConstraintClass::Bounds,
            ConstraintKind::Conservation { .. } => ConstraintClass::Conservation,
            ConstraintKind::NonlinearInequality { .. } => ConstraintClass::Nonlinear,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ConstraintClass::Linear => "linear",
            ConstraintClass::Bounds => "bounds",
            ConstraintClass::Conservation => "conservation",
            ConstraintClass::Nonlinear => "nonlinear",
        }
    }
}

/// Text pattern for one constraint kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplanationTemplate {
    pub pattern: String,
    /// Unit text spliced into `{unit}`; empty by default.
    #[serde(default)]
    pub unit: String,
}

/// Template library keyed by constraint class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExplanationTemplates {
    pub templates: BTreeMap<ConstraintClass, ExplanationTemplate>,
}

impl Default for ExplanationTemplates {
    fn default() -> Self {
        let mut templates = BTreeMap::new();
        templates.insert(
            ConstraintClass::Bounds,
            ExplanationTemplate {
                pattern: "The predicted value of {entity} was adjusted from {original:.3} to \
                          {projected:.3} {unit}to satisfy constraint `{name}` requiring values \
                          {direction} {threshold:.3}."
                    .to_string(),
                unit: String::new(),
            },
        );
        templates.insert(
            ConstraintClass::Conservation,
            ExplanationTemplate {
                pattern: "The predictions for {entity} were adjusted from {original:.3} to \
                          {projected:.3} {unit}so that constraint `{name}` conserves the total \
                          at {threshold:.3}."
                    .to_string(),
                unit: String::new(),
            },
        );
        templates.insert(
            ConstraintClass::Linear,
            ExplanationTemplate {
                pattern: "The predictions for {entity} were adjusted from {original:.3} to \
                          {projected:.3} {unit}to satisfy the linear constraint `{name}` with \
                          bound {threshold:.3}."
                    .to_string(),
                unit: String::new(),
            },
        );
        templates.insert(
            ConstraintClass::Nonlinear,
            ExplanationTemplate {
                pattern: "The predictions for {entity} were adjusted from {original:.3} to \
                          {projected:.3} {unit}to keep constraint `{name}` within its feasible \
                          region (threshold {threshold:.3})."
                    .to_string(),
                unit: String::new(),
            },
        );
        ExplanationTemplates { templates }
    }
}

impl ExplanationTemplates {
    pub fn parse(text: &str) -> Result<Self, ExplainError> {
        serde_json::from_str(text).map_err(|e| ExplainError::TemplateFormat(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ExplainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExplainError::TemplateFormat(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("template library serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub constraint_id: String,
    pub class: ConstraintClass,
    pub text: String,
    pub original: Vec<f64>,
    pub projected: Vec<f64>,
    /// This constraint's share of the projection displacement.
    pub magnitude: f64,
}

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("no explanation template for constraint kind `{0}`")]
    MissingTemplate(&'static str),
    #[error("active row cites unknown constraint `{0}`")]
    UnknownConstraint(String),
    #[error("template placeholder `{0}` is not bound")]
    UnboundPlaceholder(String),
    #[error("template library error: {0}")]
    TemplateFormat(String),
}

/// One explanation per active constraint whose displacement share exceeds
/// `delta`, ordered by descending share (ties by constraint id). Identical
/// inputs yield byte-identical texts.
pub fn generate(
    result: &ProjectionResult,
    raw_mean: &[f64],
    constraints: &[Constraint],
    templates: &ExplanationTemplates,
    delta: f64,
) -> Result<Vec<Explanation>, ExplainError> {
    // Displacement attribution: sum λ·a over each constraint's active rows.
    let d = raw_mean.len();
    let mut shares: BTreeMap<&str, DVector<f64>> = BTreeMap::new();
    for row in &result.active {
        let entry = shares
            .entry(row.source_id.as_str())
            .or_insert_with(|| DVector::zeros(d));
        *entry += row.multiplier * &row.row;
    }

    let mut out = Vec::new();
    for (id, displacement) in shares {
        let magnitude = displacement.norm();
        if magnitude <= delta {
            continue;
        }
        let c = constraints
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| ExplainError::UnknownConstraint(id.to_string()))?;
        let class = ConstraintClass::of(&c.kind);
        let template = templates
            .templates
            .get(&class)
            .ok_or(ExplainError::MissingTemplate(class.name()))?;

        let involved = involved_indices(&c.kind, d);
        let original: Vec<f64> = involved.iter().map(|i| raw_mean[*i]).collect();
        let projected: Vec<f64> = involved.iter().map(|i| result.point[*i]).collect();
        let entity = if involved.len() == 1 {
            format!("y[{}]", involved[0])
        } else {
            involved
                .iter()
                .map(|i| format!("y[{i}]"))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let (threshold, direction) = threshold_of(&c.kind, raw_mean, &result.point);
        let text = render(
            &template.pattern,
            &entity,
            &original,
            &projected,
            threshold,
            &template.unit,
            id,
            direction,
        )?;
        out.push(Explanation {
            constraint_id: id.to_string(),
            class,
            text,
            original,
            projected,
            magnitude,
        });
    }
    out.sort_by(|a, b| {
        b.magnitude
            .partial_cmp(&a.magnitude)
            .unwrap()
            .then_with(|| a.constraint_id.cmp(&b.constraint_id))
    });
    Ok(out)
}

fn involved_indices(kind: &ConstraintKind, d: usize) -> Vec<usize> {
    match kind {
        ConstraintKind::Bounds { index, .. } => vec![*index],
        ConstraintKind::LinearInequality { row, .. }
        | ConstraintKind::LinearEquality { row, .. } => {
            let idx: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                (0..d).collect()
            } else {
                idx
            }
        }
        ConstraintKind::Conservation { coefficients, .. } => {
            let idx: Vec<usize> = coefficients
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, _)| i)
                .collect();
            if idx.is_empty() {
                (0..d).collect()
            } else {
                idx
            }
        }
        ConstraintKind::NonlinearInequality { .. } => (0..d).collect(),
    }
}

/// Threshold/target value plus the bound direction word for bounds
/// constraints ("below"/"above"; empty otherwise).
fn threshold_of(kind: &ConstraintKind, raw: &[f64], projected: &DVector<f64>) -> (f64, &'static str) {
    match kind {
        ConstraintKind::Bounds { index, lower, upper } => {
            // Pick the side the raw prediction crossed; fall back to the
            // side the projection landed on.
            let v = raw[*index];
            match (lower, upper) {
                (_, Some(u)) if v > *u => (*u, "below"),
                (Some(l), _) if v < *l => (*l, "above"),
                (_, Some(u)) if (projected[*index] - u).abs() < 1e-9 => (*u, "below"),
                (Some(l), _) => (*l, "above"),
                (None, Some(u)) => (*u, "below"),
                (None, None) => (0.0, ""),
            }
        }
        ConstraintKind::LinearInequality { bound, .. } => (*bound, ""),
        ConstraintKind::LinearEquality { value, .. } => (*value, ""),
        ConstraintKind::Conservation { value, .. } => (*value, ""),
        ConstraintKind::NonlinearInequality { .. } => (0.0, ""),
    }
}

fn format_values(values: &[f64], precision: usize) -> String {
    if values.len() == 1 {
        format!("{:.*}", precision, values[0])
    } else {
        let parts: Vec<String> = values.iter().map(|v| format!("{:.*}", precision, v)).collect();
        format!("({})", parts.join(", "))
    }
}

#[allow(clippy::too_many_arguments)]
fn render(
    pattern: &str,
    entity: &str,
    original: &[f64],
    projected: &[f64],
    threshold: f64,
    unit: &str,
    name: &str,
    direction: &str,
) -> Result<String, ExplainError> {
    let mut out = String::with_capacity(pattern.len());
    let mut rest = pattern;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let end = rest[start..]
            .find('}')
            .ok_or_else(|| ExplainError::TemplateFormat("unterminated placeholder".to_string()))?
            + start;
        let inner = &rest[start + 1..end];
        let (key, precision) = match inner.split_once(":.") {
            Some((k, p)) => (
                k,
                p.parse::<usize>().map_err(|_| {
                    ExplainError::TemplateFormat(format!("bad precision in `{{{inner}}}`"))
                })?,
            ),
            None => (inner, 3),
        };
        match key {
            "entity" => out.push_str(entity),
            "original" => out.push_str(&format_values(original, precision)),
            "projected" => out.push_str(&format_values(projected, precision)),
            "threshold" => out.push_str(&format!("{:.*}", precision, threshold)),
            "unit" => {
                if !unit.is_empty() {
                    out.push_str(unit);
                    out.push(' ');
                }
            }
            "name" => out.push_str(name),
            "direction" => out.push_str(direction),
            other => return Err(ExplainError::UnboundPlaceholder(other.to_string())),
        }
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Fraction of predictions with displacement above `delta` that received at
/// least one explanation; 1 when nothing was significantly modified.
pub fn coverage_metric(
    explanations: &[Vec<Explanation>],
    predictions: &[PredictiveDistribution],
    delta: f64,
) -> f64 {
    let mut significant = 0usize;
    let mut covered = 0usize;
    for (ex, pred) in explanations.iter().zip(predictions) {
        let dist = pred.projection_distance_sq.unwrap_or(0.0).sqrt();
        if dist > delta {
            significant += 1;
            if !ex.is_empty() {
                covered += 1;
            }
        }
    }
    if significant == 0 {
        1.0
    } else {
        covered as f64 / significant as f64
    }
}

/// Fraction of explanations whose template class matches the gold kind.
pub fn template_accuracy(explanations: &[Explanation], gold: &[ConstraintClass]) -> f64 {
    if explanations.is_empty() {
        return 0.0;
    }
    let hits = explanations
        .iter()
        .zip(gold)
        .filter(|(e, g)| e.class == **g)
        .count();
    hits as f64 / explanations.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csl::FeasibleSet;
    use crate::expr::parse_constraint;

    fn project(
        constraints: &[Constraint],
        yhat: &[f64],
    ) -> (ProjectionResult, Vec<f64>) {
        let fs = FeasibleSet::build(constraints, yhat, &[]).unwrap();
        let res = fs.project(&DVector::from_column_slice(yhat)).unwrap();
        (res, yhat.to_vec())
    }

    #[test]
    fn bounds_explanation_fills_the_pattern() {
        let cs = [parse_constraint("hard: y[0] <= 0.0", 1, 0).unwrap()];
        let (res, raw) = project(&cs, &[0.3]);
        let templates = ExplanationTemplates::default();
        let out = generate(&res, &raw, &cs, &templates, 0.0).unwrap();
        assert_eq!(out.len(), 1);
        let text = &out[0].text;
        assert!(text.contains("from 0.300 to 0.000"), "{text}");
        assert!(text.contains("below 0.000"), "{text}");
        assert!(text.contains("`c1`"), "{text}");
    }

    #[test]
    fn no_active_constraints_no_explanations() {
        let cs = [parse_constraint("hard: y[0] <= 1.0", 1, 0).unwrap()];
        let (res, raw) = project(&cs, &[0.2]);
        let out = generate(&res, &raw, &cs, &ExplanationTemplates::default(), 0.0).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn larger_displacement_is_listed_first() {
        let mut a = parse_constraint("hard: y[0] <= 0.0", 2, 0).unwrap();
        a.id = "small".to_string();
        let mut b = parse_constraint("hard: y[1] <= 0.0", 2, 0).unwrap();
        b.id = "big".to_string();
        let cs = [a, b];
        let (res, raw) = project(&cs, &[0.1, 2.0]);
        let out = generate(&res, &raw, &cs, &ExplanationTemplates::default(), 0.0).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].constraint_id, "big");
        assert_eq!(out[1].constraint_id, "small");
        assert!(out[0].magnitude > out[1].magnitude);
    }

    #[test]
    fn missing_template_names_the_kind() {
        let cs = [parse_constraint("hard: y[0] <= 0.0", 1, 0).unwrap()];
        let (res, raw) = project(&cs, &[0.5]);
        let mut templates = ExplanationTemplates::default();
        templates.templates.remove(&ConstraintClass::Bounds);
        let err = generate(&res, &raw, &cs, &templates, 0.0).unwrap_err();
        assert!(matches!(err, ExplainError::MissingTemplate("bounds")));
    }

    #[test]
    fn generation_is_deterministic() {
        let cs = [parse_constraint("hard: sum(1.0*y[0] + 1.0*y[1]) == 1.0 tol 1e-9", 2, 0).unwrap()];
        let (res, raw) = project(&cs, &[2.0, 2.0]);
        let t = ExplanationTemplates::default();
        let a = generate(&res, &raw, &cs, &t, 0.0).unwrap();
        let b = generate(&res, &raw, &cs, &t, 0.0).unwrap();
        assert_eq!(a, b);
        assert!(a[0].text.contains("(2.000, 2.000)"), "{}", a[0].text);
        assert!(a[0].text.contains("(0.500, 0.500)"), "{}", a[0].text);
    }

    #[test]
    fn explanation_values_match_projection_output() {
        let cs = [parse_constraint("hard: y[0] in [-0.25, 0.25]", 1, 0).unwrap()];
        let (res, raw) = project(&cs, &[-1.4]);
        let out = generate(&res, &raw, &cs, &ExplanationTemplates::default(), 0.0).unwrap();
        assert_eq!(out[0].original, vec![-1.4]);
        assert_eq!(out[0].projected, vec![res.point[0]]);
        assert!(out[0].text.contains("above -0.250"), "{}", out[0].text);
    }

    #[test]
    fn coverage_metric_fractions() {
        let pred = |d2: f64| PredictiveDistribution {
            mean: vec![0.0],
            epistemic: vec![0.0],
            aleatoric: vec![1.0],
            total: vec![1.0],
            samples: 1,
            projected_mean: None,
            propagated_covariance: None,
            adjusted_variance: None,
            projection_distance_sq: Some(d2),
        };
        let dummy = Explanation {
            constraint_id: "c".to_string(),
            class: ConstraintClass::Bounds,
            text: String::new(),
            original: vec![],
            projected: vec![],
            magnitude: 1.0,
        };
        let preds = vec![pred(1.0), pred(1.0), pred(1.0), pred(1.0)];
        let all = vec![vec![dummy.clone()]; 4];
        assert_eq!(coverage_metric(&all, &preds, 0.01), 1.0);
        let none = vec![vec![]; 4];
        assert_eq!(coverage_metric(&none, &preds, 0.01), 0.0);
        let three = vec![vec![dummy.clone()], vec![dummy.clone()], vec![dummy], vec![]];
        assert_eq!(coverage_metric(&three, &preds, 0.01), 0.75);
        // Nothing significant: vacuously covered.
        let quiet = vec![pred(0.0)];
        assert_eq!(coverage_metric(&[vec![]], &quiet, 0.01), 1.0);
    }

    #[test]
    fn template_accuracy_fractions() {
        let e = |class| Explanation {
            constraint_id: "c".to_string(),
            class,
            text: String::new(),
            original: vec![],
            projected: vec![],
            magnitude: 1.0,
        };
        let exps = vec![e(ConstraintClass::Bounds), e(ConstraintClass::Linear)];
        assert_eq!(
            template_accuracy(&exps, &[ConstraintClass::Bounds, ConstraintClass::Linear]),
            1.0
        );
        assert_eq!(
            template_accuracy(&exps, &[ConstraintClass::Conservation, ConstraintClass::Nonlinear]),
            0.0
        );
        assert_eq!(
            template_accuracy(&exps, &[ConstraintClass::Bounds, ConstraintClass::Nonlinear]),
            0.5
        );
    }

    #[test]
    fn template_library_roundtrips_through_json() {
        let t = ExplanationTemplates::default();
        let text = t.to_json();
        let back = ExplanationTemplates::parse(&text).unwrap();
        assert_eq!(back.templates.len(), 4);
        assert_eq!(
            back.templates[&ConstraintClass::Bounds].pattern,
            t.templates[&ConstraintClass::Bounds].pattern
        );
    }
}
