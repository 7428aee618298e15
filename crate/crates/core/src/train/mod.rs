//! Episodic optimization: Adam updates at a halving learning-rate
//! schedule, divergence guarding, bit-exact checkpoint/resume, and the
//! evaluation harnesses built on top.

mod evaluate;
mod protocol;

pub use evaluate::{evaluate, evaluate_with, EvalSettings};
pub use protocol::{
    ablation_table_csv, cross_dataset_protocol, kshot_ablation, EvalSet, KshotReport,
    ProtocolResult, StageSummary, TrainStage,
};

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, DatasetRegistry, SplitSpec};
use crate::episodes::{Episode, EpisodeError, EpisodeSpec, Sampler};
use crate::metrics::MetricError;
use crate::model::{
    self, backward, forward, init_params, query_tensor, support_tensor, ModelConfig, ModelError,
    ModelParams,
};
use crate::objectives::{bce_loss, mse_loss, LossKind, ObjectiveError};

/// Learning rate used by fine-tuning stages in multi-stage protocols.
pub const FINE_TUNE_LR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("loss diverged (non-finite for 3 consecutive episodes, last at {episode})")]
    Diverged { episode: u64 },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("k_values must be non-empty")]
    EmptyKValues,
    #[error("at least one training stage required")]
    EmptyStages,
}

/// Step-halving schedule: `lr0 * 0.5^floor(episode / halve_every)`.
pub fn lr_schedule(lr0: f64, halve_every: u64, episode_index: u64) -> f64 {
    let halvings = episode_index / halve_every.max(1);
    lr0 * 0.5f64.powi(halvings.min(i32::MAX as u64) as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lr0: f64,
    pub halve_every: u64,
    pub n_episodes: u64,
    pub k_shot: usize,
    pub n_query: usize,
    pub seed: u64,
    /// Save a checkpoint every this many episodes (0 disables).
    pub checkpoint_every: u64,
    /// Evaluate on the validation split every this many episodes (0 disables).
    pub eval_every: u64,
    /// Validation episodes per class for periodic evaluation.
    pub eval_episodes_per_class: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Bce,
            lr0: 1e-3,
            halve_every: 50_000,
            n_episodes: 500_000,
            k_shot: 5,
            n_query: 1,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            eval_episodes_per_class: 2,
        }
    }
}

/// Adam with standard coefficients (β1=0.9, β2=0.999, ε=1e-8).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update over every named tensor, in deterministic name order.
    pub fn apply(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, lr: f64) {
        self.step += 1;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - (self.beta1).powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - (self.beta2).powi(self.step.min(i32::MAX as u64) as i32);
        let scale_m = 1.0 / bc1 as f32;
        let scale_v = 1.0 / bc2 as f32;
        let lr = lr as f32;
        let eps = self.eps as f32;

        for (p_set, g_set, m_set, v_set) in [
            (
                &mut params.encoder,
                &grads.encoder,
                &mut self.m.encoder,
                &mut self.v.encoder,
            ),
            (
                &mut params.relation,
                &grads.relation,
                &mut self.m.relation,
                &mut self.v.relation,
            ),
            (
                &mut params.decoder,
                &grads.decoder,
                &mut self.m.decoder,
                &mut self.v.decoder,
            ),
        ] {
            let names: Vec<String> = p_set.iter().map(|(n, _)| n.clone()).collect();
            for name in &names {
                let g = g_set.get(name).expect("grads share layout");
                let m = m_set.get_mut(name).expect("moments share layout");
                m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
                let v = v_set.get_mut(name).expect("moments share layout");
                v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
                let p = p_set.get_mut(name).expect("own layout");
                let m = m_set.get(name).expect("moments share layout");
                let v = v_set.get(name).expect("moments share layout");
                ndarray::Zip::from(p)
                    .and(m)
                    .and(v)
                    .for_each(|p, &m, &v| {
                        let m_hat = m * scale_m;
                        let v_hat = v * scale_v;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    });
            }
        }
    }
}

/// Loss value and loss gradient at the logit map for one query.
fn loss_and_dlogits(
    kind: LossKind,
    probs: &Array2<f32>,
    truth: &Array2<u8>,
) -> Result<(f32, Array2<f32>), TrainError> {
    let n = probs.len() as f32;
    match kind {
        LossKind::Bce => {
            let loss = bce_loss(probs, truth)?;
            let d = ndarray::Zip::from(probs)
                .and(truth)
                .map_collect(|&p, &t| (p - t as f32) / n);
            Ok((loss, d))
        }
        LossKind::Mse => {
            let loss = mse_loss(probs, truth)?;
            let d = ndarray::Zip::from(probs)
                .and(truth)
                .map_collect(|&p, &t| 2.0 * (p - t as f32) * p * (1.0 - p) / n);
            Ok((loss, d))
        }
    }
}

/// One optimization step on one episode: forward and backward per query,
/// gradients averaged over queries, then a single Adam update.
pub fn train_step(
    params: &mut ModelParams<f32>,
    adam: &mut AdamState,
    model_config: &ModelConfig,
    episode: &Episode,
    loss_kind: LossKind,
    lr: f64,
) -> Result<f32, TrainError> {
    let supports: Vec<_> = episode
        .support
        .iter()
        .map(|p| support_tensor::<f32>(p))
        .collect();
    let n_query = episode.query.len() as f32;

    let mut total_loss = 0.0f32;
    let mut accum: Option<ModelParams<f32>> = None;
    for query_pair in &episode.query {
        let query = query_tensor::<f32>(&query_pair.image);
        let trace = forward(params, model_config, &supports, &query)?;
        if trace.probs.iter().any(|v| !v.is_finite()) {
            // diverged forward; report a NaN loss and skip the update so
            // the caller's divergence guard can count it
            return Ok(f32::NAN);
        }
        let (loss, mut dlogits) = loss_and_dlogits(loss_kind, &trace.probs, &query_pair.mask)?;
        total_loss += loss / n_query;
        dlogits.mapv_inplace(|v| v / n_query);
        let grads = backward(params, &trace, &dlogits)?;
        match &mut accum {
            None => accum = Some(grads),
            Some(acc) => accumulate_params(acc, &grads),
        }
    }
    let grads = accum.expect("n_query >= 1");
    adam.apply(params, &grads, lr);
    Ok(total_loss)
}

fn accumulate_params(acc: &mut ModelParams<f32>, delta: &ModelParams<f32>) {
    for (a_set, d_set) in [
        (&mut acc.encoder, &delta.encoder),
        (&mut acc.relation, &delta.relation),
        (&mut acc.decoder, &delta.decoder),
    ] {
        for (name, tensor) in a_set.iter_mut() {
            let d = d_set.get(name).expect("same layout");
            *tensor += d;
        }
    }
}

/// Full training state: everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ModelParams<f32>,
    pub adam: AdamState,
    /// Next episode index; doubles as the RNG cursor since episodes are a
    /// pure function of (seed, index).
    pub episode: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let meta = serde_json::json!({
            "kind": "fewseg-train",
            "model_config": self.model_config,
            "train_config": self.train_config,
            "episode": self.episode,
            "adam": {
                "step": self.adam.step,
                "beta1": self.adam.beta1,
                "beta2": self.adam.beta2,
                "eps": self.adam.eps,
            },
        });
        let mut tensors = Vec::new();
        for (name, view) in self.params.named_tensors() {
            tensors.push((format!("param.{name}"), view));
        }
        for (name, view) in self.adam.m.named_tensors() {
            tensors.push((format!("adam_m.{name}"), view));
        }
        for (name, view) in self.adam.v.named_tensors() {
            tensors.push((format!("adam_v.{name}"), view));
        }
        model::checkpoint::write_container(path, &meta, &tensors)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let (meta, tensors) = model::checkpoint::read_container(path)?;
        let model_config: ModelConfig = serde_json::from_value(meta["model_config"].clone())
            .map_err(|e| ModelError::CheckpointFormat {
                reason: format!("model_config: {e}"),
            })?;
        let train_config: TrainConfig = serde_json::from_value(meta["train_config"].clone())
            .map_err(|e| ModelError::CheckpointFormat {
                reason: format!("train_config: {e}"),
            })?;
        let episode = meta["episode"].as_u64().ok_or_else(|| {
            ModelError::CheckpointFormat {
                reason: "missing episode counter".to_string(),
            }
        })?;

        let mut params: ModelParams<f32> = init_params(&model_config, 0)?;
        let mut adam = AdamState::new(&params);
        adam.step = meta["adam"]["step"].as_u64().unwrap_or(0);
        if let Some(b) = meta["adam"]["beta1"].as_f64() {
            adam.beta1 = b;
        }
        if let Some(b) = meta["adam"]["beta2"].as_f64() {
            adam.beta2 = b;
        }
        if let Some(e) = meta["adam"]["eps"].as_f64() {
            adam.eps = e;
        }

        for (name, tensor) in tensors {
            if let Some(rest) = name.strip_prefix("param.") {
                params.set(rest, tensor)?;
            } else if let Some(rest) = name.strip_prefix("adam_m.") {
                adam.m.set(rest, tensor)?;
            } else if let Some(rest) = name.strip_prefix("adam_v.") {
                adam.v.set(rest, tensor)?;
            } else {
                return Err(ModelError::CheckpointFormat {
                    reason: format!("unexpected tensor {name}"),
                }
                .into());
            }
        }
        Ok(Checkpoint {
            model_config,
            train_config,
            params,
            adam,
            episode,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub episode: u64,
    pub loss: f32,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// When set, the loss trace, periodic checkpoints and periodic
    /// validation reports are written here.
    pub out_dir: Option<PathBuf>,
    /// Print a progress line every this many episodes (0 disables).
    pub log_every: u64,
}

#[derive(Debug)]
pub struct TrainResult {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

/// Train from scratch on `split.train`.
pub fn train(
    registry: &DatasetRegistry,
    split: &SplitSpec,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainResult, TrainError> {
    let params: ModelParams<f32> = init_params(model_config, train_config.seed)?;
    let adam = AdamState::new(&params);
    let checkpoint = Checkpoint {
        model_config: model_config.clone(),
        train_config: *train_config,
        params,
        adam,
        episode: 0,
    };
    run(checkpoint, registry, split, options)
}

/// Continue an interrupted run; the trace picks up at the stored episode
/// and the continuation is bit-identical to an unbroken run.
pub fn resume(
    checkpoint: Checkpoint,
    registry: &DatasetRegistry,
    split: &SplitSpec,
    options: &TrainOptions,
) -> Result<TrainResult, TrainError> {
    run(checkpoint, registry, split, options)
}

fn run(
    mut state: Checkpoint,
    registry: &DatasetRegistry,
    split: &SplitSpec,
    options: &TrainOptions,
) -> Result<TrainResult, TrainError> {
    let tc = state.train_config;
    let spec = EpisodeSpec::new(tc.k_shot, tc.n_query, tc.seed);
    let sampler = Sampler::new(registry, &split.train, spec)?;
    sampler.preload()?;

    if let Some(dir) = &options.out_dir {
        std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
            path: dir.clone(),
            source,
        })?;
    }

    let mut trace = Vec::new();
    let mut consecutive_bad = 0u32;
    for episode_idx in state.episode..tc.n_episodes {
        let episode = sampler.episode(episode_idx)?;
        let lr = lr_schedule(tc.lr0, tc.halve_every, episode_idx);
        let loss = train_step(
            &mut state.params,
            &mut state.adam,
            &state.model_config,
            &episode,
            tc.loss,
            lr,
        )?;
        trace.push(TraceRow {
            episode: episode_idx,
            loss,
            lr,
        });

        // non-finite parameters count as divergence too: ReLU and the
        // clamp can otherwise mask a poisoned model behind a finite loss
        if loss.is_finite() && state.params.all_finite() {
            consecutive_bad = 0;
        } else {
            consecutive_bad += 1;
            if consecutive_bad >= 3 {
                return Err(TrainError::Diverged {
                    episode: episode_idx,
                });
            }
        }

        state.episode = episode_idx + 1;
        if options.log_every > 0 && (episode_idx + 1) % options.log_every == 0 {
            eprintln!("episode {:>8}  loss {loss:.5}  lr {lr:.2e}", episode_idx + 1);
        }
        if let Some(dir) = &options.out_dir {
            if tc.checkpoint_every > 0 && (episode_idx + 1) % tc.checkpoint_every == 0 {
                state.save(&dir.join(format!("checkpoint-{:08}.ckpt", episode_idx + 1)))?;
            }
            if tc.eval_every > 0
                && (episode_idx + 1) % tc.eval_every == 0
                && !split.val.is_empty()
            {
                let settings = EvalSettings {
                    k_shot: tc.k_shot,
                    episodes_per_class: tc.eval_episodes_per_class,
                    seed: tc.seed ^ 0x5eed,
                    threshold: 0.5,
                };
                let (report, _) = evaluate(
                    &state.params,
                    &state.model_config,
                    registry,
                    &split.val,
                    &settings,
                )?;
                let file = dir.join(format!("eval-{:08}.csv", episode_idx + 1));
                let out = std::fs::File::create(&file).map_err(|source| TrainError::Io {
                    path: file.clone(),
                    source,
                })?;
                report.write_csv(out)?;
            }
        }
    }

    if let Some(dir) = &options.out_dir {
        write_trace_csv(&dir.join("trace.csv"), &trace)?;
        state.save(&dir.join("checkpoint-final.ckpt"))?;
    }

    Ok(TrainResult {
        checkpoint: state,
        trace,
    })
}

pub(crate) fn run_stage_label(name: &str, idx: usize) -> String {
    if name.is_empty() {
        format!("stage{}", idx + 1)
    } else {
        name.to_string()
    }
}

/// Emit `episode,loss,lr` rows.
pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<(), TrainError> {
    let file = std::fs::File::create(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = csv::Writer::from_writer(file);
    out.write_record(["episode", "loss", "lr"])?;
    for row in trace {
        out.write_record([
            row.episode.to_string(),
            format!("{:.6}", row.loss),
            format!("{:.8e}", row.lr),
        ])?;
    }
    out.flush().map_err(csv::Error::from)?;
    Ok(())
}
