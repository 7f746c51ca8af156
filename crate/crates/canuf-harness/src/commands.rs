//! CLI command implementations. Every command is a pure function of
//! (config, seed) writing deterministic files under the output directory:
//! no timestamps, sorted iteration everywhere, shortest-round-trip float
//! formatting.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use canuf::bnn::VariationalModel;
use canuf::expr::{parse_constraint_file, Constraint};
use canuf::explain::{coverage_metric, generate, template_accuracy, ConstraintClass, ExplanationTemplates};
use canuf::extract::{extract, extraction_metrics, load_templates, KnowledgeGraph, RuleTemplate};

use crate::config::ExperimentConfig;
use crate::dataset::{load_csv, split_dataset, Dataset, Split};
use crate::error::HarnessError;
use crate::evaluate::{evaluate_model, per_sample_csv, EvalSettings, EvaluationOutput};
use crate::seeds::mix;
use crate::stats::{mean, paired_t_less, std_dev};
use crate::synthetic::{self, GeneratorId};
use crate::train::{train_model, training_log_csv};

/// Everything a command needs about the task: data at a given severity plus
/// the constraint sets and the optional knowledge fixture.
pub struct TaskBundle {
    pub data: Dataset,
    /// Ground-truth hard constraints (CSR reference, fixed across ablations).
    pub gold: Vec<Constraint>,
    /// Manually specified hard constraints.
    pub manual_hard: Vec<Constraint>,
    pub soft: Vec<Constraint>,
    pub knowledge: Option<(KnowledgeGraph, Vec<RuleTemplate>, Vec<Constraint>)>,
}

pub fn load_task(
    cfg: &ExperimentConfig,
    base: &Path,
    severity: f64,
    seed: u64,
) -> Result<TaskBundle> {
    let mut bundle = match cfg.dataset.source.as_str() {
        "synthetic" => {
            let id = GeneratorId::parse(&cfg.dataset.generator)
                .map_err(|e| HarnessError::Usage(e.to_string()))?;
            let task =
                synthetic::generate(id, cfg.dataset.n_samples, cfg.dataset.noise, severity, seed);
            let knowledge = match id {
                GeneratorId::ConservationSum | GeneratorId::MisspecifiedShift => {
                    Some(synthetic::knowledge_fixture())
                }
                _ => None,
            };
            TaskBundle {
                data: task.data,
                gold: task.gold_constraints,
                manual_hard: task.manual_constraints,
                soft: task.soft_constraints,
                knowledge,
            }
        }
        "csv" => {
            let path = cfg
                .dataset
                .csv_path
                .as_ref()
                .ok_or_else(|| HarnessError::Usage("csv source needs csv_path".to_string()))?;
            let data = load_csv(&cfg.resolve(base, path))
                .map_err(|e| HarnessError::Data(format!("{e:#}")))?;
            TaskBundle {
                data,
                gold: Vec::new(),
                manual_hard: Vec::new(),
                soft: Vec::new(),
                knowledge: None,
            }
        }
        other => {
            return Err(HarnessError::Usage(format!("unknown dataset source `{other}`")).into())
        }
    };

    // Explicit files override the generator's builtin constraint sets.
    if let Some(path) = &cfg.constraints.file {
        let text = fs::read_to_string(cfg.resolve(base, path))
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        let all = parse_constraint_file(&text, bundle.data.d_y(), bundle.data.d_x())
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        bundle.manual_hard = all.iter().filter(|c| c.hardness.is_hard()).cloned().collect();
        bundle.soft = all.into_iter().filter(|c| !c.hardness.is_hard()).collect();
        if bundle.gold.is_empty() {
            bundle.gold = bundle.manual_hard.clone();
        }
    }
    if let (Some(k), Some(t)) = (&cfg.constraints.knowledge, &cfg.constraints.templates) {
        let graph = KnowledgeGraph::load(&cfg.resolve(base, k))
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        let templates = load_templates(&cfg.resolve(base, t))
            .map_err(|e| HarnessError::Data(e.to_string()))?;
        let gold = match &cfg.constraints.gold {
            Some(g) => {
                let text = fs::read_to_string(cfg.resolve(base, g))
                    .map_err(|e| HarnessError::Data(e.to_string()))?;
                parse_constraint_file(&text, bundle.data.d_y(), bundle.data.d_x())
                    .map_err(|e| HarnessError::Data(e.to_string()))?
            }
            None => bundle.gold.clone(),
        };
        bundle.knowledge = Some((graph, templates, gold));
    }
    Ok(bundle)
}

/// Hard constraints the projection layer enforces: the manual set, plus
/// extracted constraints when the toggle is on.
pub fn projection_set(
    cfg: &ExperimentConfig,
    bundle: &TaskBundle,
    train: &Dataset,
) -> Result<Vec<Constraint>> {
    let mut hard = bundle.manual_hard.clone();
    if cfg.ablation.use_extraction {
        if let Some((graph, templates, _)) = &bundle.knowledge {
            let scored = extract(
                graph,
                templates,
                &train.pairs(),
                Some(&train.weights),
                train.d_y(),
                cfg.extraction.tau_score,
                cfg.extraction.sim_threshold,
            )
            .map_err(|e| HarnessError::Data(e.to_string()))?;
            for sc in scored {
                if sc.constraint.hardness.is_hard()
                    && !hard.iter().any(|h| h.structurally_eq(&sc.constraint, 1e-12))
                {
                    hard.push(sc.constraint);
                }
            }
        }
    }
    Ok(hard)
}

fn write(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn eval_settings(cfg: &ExperimentConfig) -> EvalSettings {
    EvalSettings {
        use_csl: cfg.ablation.use_csl,
        use_adjustment: cfg.ablation.use_adjustment,
        lambda: cfg.loss.lambda,
        mc_samples: cfg.training.mc_samples,
        bins: cfg.harness.bins,
        max_outer: 5,
    }
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    seed: u64,
    epochs: usize,
    n_train: usize,
    hard_constraints: usize,
    soft_constraints: usize,
    projection_events: usize,
    final_total: f64,
    final_pred: f64,
    final_elbo: f64,
    final_ece: f64,
    final_constraint: f64,
}

pub fn cmd_train(cfg: &ExperimentConfig, base: &Path, seed: u64, out: &Path) -> Result<PathBuf> {
    let bundle = load_task(cfg, base, 0.0, seed)?;
    let split = split_dataset(&bundle.data, seed);
    let hard = projection_set(cfg, &bundle, &split.train)?;
    let outcome = train_model(cfg, &split.train, &hard, &bundle.soft, seed)?;

    let ckpt = out.join("checkpoint.json");
    fs::create_dir_all(out)?;
    outcome
        .model
        .save_checkpoint(&ckpt)
        .map_err(|e| HarnessError::Data(e.to_string()))?;
    write(&out.join("training_log.csv"), &training_log_csv(&outcome.log))?;
    let last = outcome.log.last().expect("at least one epoch");
    let summary = TrainSummary {
        seed,
        epochs: outcome.log.len(),
        n_train: split.train.len(),
        hard_constraints: hard.len(),
        soft_constraints: bundle.soft.len(),
        projection_events: outcome.projection_events,
        final_total: last.total,
        final_pred: last.pred,
        final_elbo: last.elbo,
        final_ece: last.ece,
        final_constraint: last.constraint,
    };
    write(
        &out.join("train_summary.json"),
        &serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(ckpt)
}

#[derive(Debug, Serialize)]
struct EvaluationReport {
    seed: u64,
    severity: f64,
    n_test: usize,
    hard_constraints: usize,
    rmse: f64,
    mae: f64,
    r2: f64,
    ece: f64,
    mce: f64,
    nll: f64,
    csr: f64,
    avm: f64,
}

fn split_at_severity(
    cfg: &ExperimentConfig,
    base: &Path,
    severity: f64,
    seed: u64,
) -> Result<(TaskBundle, Split)> {
    let bundle = load_task(cfg, base, severity, seed)?;
    let split = split_dataset(&bundle.data, seed);
    Ok((bundle, split))
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    base: &Path,
    checkpoint: &Path,
    seed: u64,
    out: &Path,
) -> Result<EvaluationOutput> {
    let model =
        VariationalModel::load_checkpoint(checkpoint).map_err(|e| HarnessError::Data(e.to_string()))?;
    // Constraints and extraction always come from the in-distribution data
    // the model was trained on; the test split shifts with the severity.
    let (bundle0, split0) = split_at_severity(cfg, base, 0.0, seed)?;
    let (_, split_s) = split_at_severity(cfg, base, cfg.dataset.shift_severity, seed)?;
    if model.input_dim() != bundle0.data.d_x() || model.d_y != bundle0.data.d_y() {
        return Err(HarnessError::Data(format!(
            "checkpoint/config mismatch: model is {}→{}, dataset is {}→{}",
            model.input_dim(),
            model.d_y,
            bundle0.data.d_x(),
            bundle0.data.d_y()
        ))
        .into());
    }
    let hard = projection_set(cfg, &bundle0, &split0.train)?;
    let eval = evaluate_model(
        &model,
        &split_s.test,
        &hard,
        &bundle0.gold,
        &eval_settings(cfg),
        mix(seed, 0xE7A1u64),
    )?;

    fs::create_dir_all(out)?;
    let report = EvaluationReport {
        seed,
        severity: cfg.dataset.shift_severity,
        n_test: split_s.test.len(),
        hard_constraints: hard.len(),
        rmse: eval.rmse,
        mae: eval.mae,
        r2: eval.r2,
        ece: eval.report.ece,
        mce: eval.report.mce,
        nll: eval.report.nll,
        csr: eval.report.csr,
        avm: eval.report.avm,
    };
    write(&out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    write(&out.join("reliability.csv"), &eval.report.to_reliability_csv())?;
    write(
        &out.join("per_sample.csv"),
        &per_sample_csv(&split_s.test, &eval.preds, &eval.projections),
    )?;
    Ok(eval)
}

#[derive(Debug, Serialize)]
struct ExtractionReport {
    candidates: usize,
    accepted: usize,
    precision: f64,
    recall: f64,
    f1: f64,
}

pub fn cmd_extract(cfg: &ExperimentConfig, base: &Path, seed: u64, out: &Path) -> Result<()> {
    let bundle = load_task(cfg, base, 0.0, seed)?;
    let Some((graph, templates, gold)) = &bundle.knowledge else {
        return Err(HarnessError::Data(
            "extraction needs knowledge/template files (or a conservation-style synthetic task)"
                .to_string(),
        )
        .into());
    };
    if graph.vertices().is_empty() {
        eprintln!("warning: knowledge graph is empty; writing an empty constraint file");
    }
    let split = split_dataset(&bundle.data, seed);
    let scored = extract(
        graph,
        templates,
        &split.train.pairs(),
        Some(&split.train.weights),
        split.train.d_y(),
        cfg.extraction.tau_score,
        cfg.extraction.sim_threshold,
    )
    .map_err(|e| HarnessError::Data(e.to_string()))?;

    let mut dsl = String::from("# extracted constraints, one statement per line\n");
    for sc in &scored {
        dsl.push_str(&format!(
            "{}  # score={} source={}\n",
            sc.constraint, sc.score, sc.constraint.id
        ));
    }
    fs::create_dir_all(out)?;
    write(&out.join("constraints.dsl"), &dsl)?;

    let extracted: Vec<Constraint> = scored.iter().map(|s| s.constraint.clone()).collect();
    if !gold.is_empty() {
        let m = extraction_metrics(&extracted, gold);
        let report = ExtractionReport {
            candidates: scored.len(),
            accepted: extracted.len(),
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
        };
        write(
            &out.join("extraction_report.json"),
            &serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(())
}

/// One ablation row: a named toggle configuration.
pub fn ablation_rows() -> Vec<(&'static str, fn(&mut ExperimentConfig))> {
    vec![
        ("full", |_| {}),
        ("no_extraction", |c| c.ablation.use_extraction = false),
        ("no_csl", |c| c.ablation.use_csl = false),
        ("no_adjustment", |c| c.ablation.use_adjustment = false),
        ("no_calibration_loss", |c| {
            c.ablation.use_calibration_loss = false
        }),
        ("no_bayesian", |c| c.ablation.use_bayesian = false),
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub configuration: String,
    pub seed: u64,
    pub ece: f64,
    pub csr: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn metric(&self, configuration: &str, pick: impl Fn(&AblationCell) -> f64) -> Vec<f64> {
        self.cells
            .iter()
            .filter(|c| c.configuration == configuration)
            .map(pick)
            .collect()
    }
}

/// Train + evaluate one toggle configuration for one seed.
pub fn run_configuration(
    cfg: &ExperimentConfig,
    base: &Path,
    seed: u64,
) -> Result<EvaluationOutput> {
    let (bundle0, split0) = split_at_severity(cfg, base, 0.0, seed)?;
    let (_, split_s) = split_at_severity(cfg, base, cfg.dataset.shift_severity, seed)?;
    let hard = projection_set(cfg, &bundle0, &split0.train)?;
    let outcome = train_model(cfg, &split0.train, &hard, &bundle0.soft, seed)?;
    evaluate_model(
        &outcome.model,
        &split_s.test,
        &hard,
        &bundle0.gold,
        &eval_settings(cfg),
        mix(seed, 0xE7A1u64),
    )
}

pub fn cmd_ablate(cfg: &ExperimentConfig, base: &Path, out: &Path) -> Result<AblationTable> {
    let mut cells = Vec::new();
    for (name, apply) in ablation_rows() {
        let mut row_cfg = cfg.clone();
        apply(&mut row_cfg);
        for k in 0..cfg.harness.seeds {
            let seed = cfg.harness.seed + k as u64;
            let eval = run_configuration(&row_cfg, base, seed)?;
            cells.push(AblationCell {
                configuration: name.to_string(),
                seed,
                ece: eval.report.ece,
                csr: eval.report.csr,
                rmse: eval.rmse,
            });
        }
    }
    let table = AblationTable { cells };

    fs::create_dir_all(out)?;
    let mut seeds_csv = String::from("configuration,seed,ece,csr,rmse\n");
    for c in &table.cells {
        seeds_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.configuration, c.seed, c.ece, c.csr, c.rmse
        ));
    }
    write(&out.join("ablation_seeds.csv"), &seeds_csv)?;

    let mut table_csv = String::from(
        "configuration,ece_mean,ece_std,csr_mean,csr_std,rmse_mean,rmse_std\n",
    );
    for (name, _) in ablation_rows() {
        let ece = table.metric(name, |c| c.ece);
        let csr = table.metric(name, |c| c.csr);
        let rmse = table.metric(name, |c| c.rmse);
        table_csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            name,
            mean(&ece),
            std_dev(&ece),
            mean(&csr),
            std_dev(&csr),
            mean(&rmse),
            std_dev(&rmse)
        ));
    }
    write(&out.join("ablation.csv"), &table_csv)?;

    // Paired ordering tests against the full configuration.
    let full_ece = table.metric("full", |c| c.ece);
    let mut tests = String::from("comparison,p_value\n");
    for name in ["no_adjustment", "no_csl"] {
        let other = table.metric(name, |c| c.ece);
        tests.push_str(&format!(
            "full_less_than_{name},{}\n",
            paired_t_less(&full_ece, &other)
        ));
    }
    let no_adj = table.metric("no_adjustment", |c| c.ece);
    let no_csl = table.metric("no_csl", |c| c.ece);
    tests.push_str(&format!(
        "no_adjustment_less_than_no_csl,{}\n",
        paired_t_less(&no_adj, &no_csl)
    ));
    write(&out.join("ablation_tests.csv"), &tests)?;
    Ok(table)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub configuration: String,
    pub severity: f64,
    pub seed: u64,
    pub ece: f64,
}

pub fn cmd_shift_sweep(
    cfg: &ExperimentConfig,
    base: &Path,
    severities: &[f64],
    out: &Path,
) -> Result<Vec<SweepCell>> {
    let configs: Vec<(&str, fn(&mut ExperimentConfig))> = vec![
        ("full", |_| {}),
        ("no_csl_no_adjustment", |c| {
            c.ablation.use_csl = false;
            c.ablation.use_adjustment = false;
        }),
    ];
    let mut cells = Vec::new();
    for (name, apply) in &configs {
        let mut row_cfg = cfg.clone();
        apply(&mut row_cfg);
        for k in 0..cfg.harness.seeds {
            let seed = cfg.harness.seed + k as u64;
            let (bundle0, split0) = split_at_severity(&row_cfg, base, 0.0, seed)?;
            let hard = projection_set(&row_cfg, &bundle0, &split0.train)?;
            let outcome = train_model(&row_cfg, &split0.train, &hard, &bundle0.soft, seed)?;
            for &severity in severities {
                let (_, split_s) = split_at_severity(&row_cfg, base, severity, seed)?;
                let eval = evaluate_model(
                    &outcome.model,
                    &split_s.test,
                    &hard,
                    &bundle0.gold,
                    &eval_settings(&row_cfg),
                    mix(seed, 0xE7A1u64),
                )?;
                cells.push(SweepCell {
                    configuration: name.to_string(),
                    severity,
                    seed,
                    ece: eval.report.ece,
                });
            }
        }
    }

    fs::create_dir_all(out)?;
    let mut seeds_csv = String::from("configuration,severity,seed,ece\n");
    for c in &cells {
        seeds_csv.push_str(&format!(
            "{},{},{},{}\n",
            c.configuration, c.severity, c.seed, c.ece
        ));
    }
    write(&out.join("shift_sweep_seeds.csv"), &seeds_csv)?;

    let mut summary = String::from("configuration,severity,ece_mean,ece_std\n");
    for (name, _) in &configs {
        for &severity in severities {
            let vals: Vec<f64> = cells
                .iter()
                .filter(|c| c.configuration == *name && c.severity == severity)
                .map(|c| c.ece)
                .collect();
            summary.push_str(&format!(
                "{},{},{},{}\n",
                name,
                severity,
                mean(&vals),
                std_dev(&vals)
            ));
        }
    }
    write(&out.join("shift_sweep.csv"), &summary)?;
    Ok(cells)
}

#[derive(Debug, Serialize)]
struct ExplainReport {
    n_test: usize,
    explained_predictions: usize,
    coverage: f64,
    template_accuracy: f64,
}

pub fn cmd_explain(
    cfg: &ExperimentConfig,
    base: &Path,
    checkpoint: &Path,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let model = VariationalModel::load_checkpoint(checkpoint)
        .map_err(|e| HarnessError::Data(e.to_string()))?;
    let (bundle0, split0) = split_at_severity(cfg, base, 0.0, seed)?;
    let (_, split_s) = split_at_severity(cfg, base, cfg.dataset.shift_severity, seed)?;
    let hard = projection_set(cfg, &bundle0, &split0.train)?;
    let eval = evaluate_model(
        &model,
        &split_s.test,
        &hard,
        &bundle0.gold,
        &eval_settings(cfg),
        mix(seed, 0xE7A1u64),
    )?;
    let templates = match &cfg.constraints.explanation_templates {
        Some(p) => ExplanationTemplates::load(&cfg.resolve(base, p))
            .map_err(|e| HarnessError::Data(e.to_string()))?,
        None => ExplanationTemplates::default(),
    };

    let mut per_pred = Vec::with_capacity(eval.preds.len());
    let mut text = String::new();
    let mut gold_classes = Vec::new();
    let mut flat = Vec::new();
    for (i, (pred, proj)) in eval.preds.iter().zip(&eval.projections).enumerate() {
        let explanations = match proj {
            Some(res) => generate(res, &pred.mean, &hard, &templates, 0.0)
                .map_err(|e| HarnessError::Data(e.to_string()))?,
            None => Vec::new(),
        };
        for e in &explanations {
            text.push_str(&format!("sample {i}: {}\n", e.text));
            let gold = hard
                .iter()
                .find(|c| c.id == e.constraint_id)
                .map(|c| ConstraintClass::of(&c.kind))
                .expect("explanation cites a known constraint");
            gold_classes.push(gold);
            flat.push(e.clone());
        }
        per_pred.push(explanations);
    }
    let coverage = coverage_metric(&per_pred, &eval.preds, 1e-9);
    let accuracy = template_accuracy(&flat, &gold_classes);

    fs::create_dir_all(out)?;
    write(&out.join("explanations.txt"), &text)?;
    let report = ExplainReport {
        n_test: split_s.test.len(),
        explained_predictions: per_pred.iter().filter(|e| !e.is_empty()).count(),
        coverage,
        template_accuracy: accuracy,
    };
    write(
        &out.join("explain_report.json"),
        &serde_json::to_string_pretty(&report)?,
    )?;
    Ok(())
}
