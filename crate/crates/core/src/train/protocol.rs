//! Multi-run harnesses: the k-shot ablation and the staged
//! cross-dataset training protocol.

use std::collections::BTreeSet;

use crate::dataset::{DatasetRegistry, SplitSpec};
use crate::metrics::MetricsReport;
use crate::model::ModelConfig;

use super::{
    evaluate, run_stage_label, train, AdamState, Checkpoint, EvalSettings, TrainConfig,
    TrainError, TrainOptions, TrainResult,
};

#[derive(Debug)]
pub struct KshotReport {
    pub k: usize,
    pub report: MetricsReport,
}

/// Train one model per k (same seed) and evaluate each at its own k on
/// `split.test`.
pub fn kshot_ablation(
    registry: &DatasetRegistry,
    split: &SplitSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    k_values: &[usize],
    eval: &EvalSettings,
) -> Result<Vec<KshotReport>, TrainError> {
    if k_values.is_empty() {
        return Err(TrainError::EmptyKValues);
    }
    let mut reports = Vec::with_capacity(k_values.len());
    for &k in k_values {
        let tc = TrainConfig {
            k_shot: k,
            ..*train_config
        };
        let result = train(registry, split, model_config, &tc, &TrainOptions::default())?;
        let settings = EvalSettings { k_shot: k, ..*eval };
        let (report, _) = evaluate(
            &result.checkpoint.params,
            model_config,
            registry,
            &split.test,
            &settings,
        )?;
        reports.push(KshotReport { k, report });
    }
    Ok(reports)
}

/// Per-superclass comparison table: one row per superclass plus a global
/// row, one column per k.
pub fn ablation_table_csv(reports: &[KshotReport]) -> String {
    let mut supers: BTreeSet<&str> = BTreeSet::new();
    for r in reports {
        supers.extend(r.report.per_super.keys().map(String::as_str));
    }
    let mut out = String::from("superclass");
    for r in reports {
        out.push_str(&format!(",k={}", r.k));
    }
    out.push('\n');
    for name in supers {
        out.push_str(name);
        for r in reports {
            match r.report.per_super.get(name) {
                Some(g) => out.push_str(&format!(",{:.6}", g.mean_iou)),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out.push_str("(global)");
    for r in reports {
        out.push_str(&format!(",{:.6}", r.report.macro_mean));
    }
    out.push('\n');
    out
}

/// One training stage: a registry plus its split.
pub struct TrainStage<'a> {
    pub name: String,
    pub registry: &'a DatasetRegistry,
    pub split: &'a SplitSpec,
}

/// One evaluation target: a registry and the classes to test on.
pub struct EvalSet<'a> {
    pub name: String,
    pub registry: &'a DatasetRegistry,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub name: String,
    pub lr0: f64,
    pub episodes: u64,
    pub final_loss: f32,
}

#[derive(Debug)]
pub struct ProtocolResult {
    pub stages: Vec<StageSummary>,
    pub reports: Vec<(String, MetricsReport)>,
    pub checkpoint: Checkpoint,
}

/// Train sequentially through `stages` (stage 2 onward fine-tunes the
/// previous weights at the fine-tune learning rate, with the halving
/// schedule restarted per stage), then evaluate on every eval set.
pub fn cross_dataset_protocol(
    stages: &[TrainStage<'_>],
    eval_sets: &[EvalSet<'_>],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    eval: &EvalSettings,
) -> Result<ProtocolResult, TrainError> {
    if stages.is_empty() {
        return Err(TrainError::EmptyStages);
    }

    let mut summaries = Vec::with_capacity(stages.len());
    let mut checkpoint: Option<Checkpoint> = None;
    for (idx, stage) in stages.iter().enumerate() {
        let lr0 = if idx == 0 {
            train_config.lr0
        } else {
            super::FINE_TUNE_LR
        };
        let tc = TrainConfig {
            lr0,
            ..*train_config
        };
        let result: TrainResult = match checkpoint.take() {
            None => train(
                stage.registry,
                stage.split,
                model_config,
                &tc,
                &TrainOptions::default(),
            )?,
            Some(prev) => {
                // fresh optimizer and episode counter, carried weights
                let state = Checkpoint {
                    model_config: model_config.clone(),
                    train_config: tc,
                    adam: AdamState::new(&prev.params),
                    params: prev.params,
                    episode: 0,
                };
                super::resume(state, stage.registry, stage.split, &TrainOptions::default())?
            }
        };
        summaries.push(StageSummary {
            name: run_stage_label(&stage.name, idx),
            lr0,
            episodes: tc.n_episodes,
            final_loss: result.trace.last().map(|r| r.loss).unwrap_or(f32::NAN),
        });
        checkpoint = Some(result.checkpoint);
    }
    let checkpoint = checkpoint.expect("at least one stage ran");

    let mut reports = Vec::with_capacity(eval_sets.len());
    for set in eval_sets {
        let (report, _) = evaluate(
            &checkpoint.params,
            model_config,
            set.registry,
            &set.classes,
            eval,
        )?;
        reports.push((set.name.clone(), report));
    }

    Ok(ProtocolResult {
        stages: summaries,
        reports,
        checkpoint,
    })
}
