//! Episodic evaluation: per-class deterministic episodes, IoU at a fixed
//! threshold, aggregated into the mean-IoU report.

use ndarray::Array2;

use crate::dataset::DatasetRegistry;
use crate::episodes::{Episode, EpisodeSpec, Sampler};
use crate::metrics::{iou, mean_iou, threshold_mask, MetricsReport};
use crate::model::{predict, ModelConfig, ModelParams};
use crate::seed::mix;

use super::TrainError;

#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub k_shot: usize,
    pub episodes_per_class: usize,
    pub seed: u64,
    pub threshold: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k_shot: 5,
            episodes_per_class: 2,
            seed: 0,
            threshold: 0.5,
        }
    }
}

/// Evaluate an arbitrary predictor. `predict_fn` maps one episode to a
/// probability map per query; the harness thresholds, scores IoU against
/// the query truths and rolls the records up per class and superclass.
pub fn evaluate_with<P>(
    mut predict_fn: P,
    registry: &DatasetRegistry,
    class_list: &[String],
    settings: &EvalSettings,
) -> Result<(MetricsReport, Vec<(String, f64)>), TrainError>
where
    P: FnMut(&Episode) -> Result<Vec<Array2<f32>>, TrainError>,
{
    let mut classes = class_list.to_vec();
    classes.sort();
    classes.dedup();

    let mut records = Vec::new();
    for (class_idx, class) in classes.iter().enumerate() {
        let spec = EpisodeSpec::new(settings.k_shot, 1, mix(settings.seed, class_idx as u64));
        let single = [class.clone()];
        let sampler = Sampler::new(registry, &single, spec)?;
        for episode_idx in 0..settings.episodes_per_class as u64 {
            let episode = sampler.episode(episode_idx)?;
            let probs = predict_fn(&episode)?;
            for (query, prob) in episode.query.iter().zip(probs.iter()) {
                let mask = threshold_mask(prob, settings.threshold)?;
                let score = iou(&mask, &query.mask)?;
                records.push((class.clone(), score));
            }
        }
    }
    let report = mean_iou(&records, &registry.hierarchy)?;
    Ok((report, records))
}

/// Evaluate trained parameters over `class_list`.
pub fn evaluate(
    params: &ModelParams<f32>,
    model_config: &ModelConfig,
    registry: &DatasetRegistry,
    class_list: &[String],
    settings: &EvalSettings,
) -> Result<(MetricsReport, Vec<(String, f64)>), TrainError> {
    evaluate_with(
        |episode| {
            let supports: Vec<&crate::dataset::LoadedPair> =
                episode.support.iter().map(|arc| arc.as_ref()).collect();
            episode
                .query
                .iter()
                .map(|q| {
                    predict(params, model_config, &supports, &q.image)
                        .map(|p| p.probs)
                        .map_err(TrainError::from)
                })
                .collect()
        },
        registry,
        class_list,
        settings,
    )
}
