//! Novel-class workflow: label an unseen class from a handful of support
//! examples without retraining, mine the worst predictions for human
//! correction, and fold corrections back into a versioned support set.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{load_pair, DatasetError, LoadedPair};
use crate::metrics::{iou, threshold_mask, MetricError};
use crate::model::{predict, ModelConfig, ModelError, ModelParams};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("support set is empty")]
    EmptySupport,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corrected pair list is empty")]
    EmptyCorrections,
    #[error("{predictions} predictions but {truths} truths")]
    TruthCountMismatch { predictions: usize, truths: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Initial,
    Corrected,
}

/// Versioned support set; versions increase across merges.
#[derive(Debug, Clone)]
pub struct SupportSet {
    pub version: u32,
    pub pairs: Vec<(LoadedPair, Provenance)>,
}

impl SupportSet {
    pub fn initial(pairs: Vec<LoadedPair>) -> Result<Self, WorkflowError> {
        if pairs.is_empty() {
            return Err(WorkflowError::EmptySupport);
        }
        Ok(SupportSet {
            version: 1,
            pairs: pairs
                .into_iter()
                .map(|p| (p, Provenance::Initial))
                .collect(),
        })
    }

    pub fn loaded_pairs(&self) -> Vec<&LoadedPair> {
        self.pairs.iter().map(|(p, _)| p).collect()
    }
}

/// One prediction over a corpus image.
#[derive(Debug, Clone)]
pub struct LabelResult {
    pub index: usize,
    pub image_path: PathBuf,
    pub probs: Array2<f32>,
    pub mask: Array2<u8>,
}

/// Segment every corpus image with the given support set; no retraining
/// or fine-tuning involved. Results come back in corpus order.
pub fn auto_label(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    support: &SupportSet,
    corpus: &[PathBuf],
    threshold: f64,
    workers: usize,
) -> Result<Vec<LabelResult>, WorkflowError> {
    if support.pairs.is_empty() {
        return Err(WorkflowError::EmptySupport);
    }
    if corpus.is_empty() {
        return Err(WorkflowError::EmptyCorpus);
    }
    let supports = support.loaded_pairs();

    let run = |(index, path): (usize, &PathBuf)| -> Result<LabelResult, WorkflowError> {
        // support images appearing in the corpus are predicted like any
        // other image; no exclusion
        let pair = load_corpus_image(path)?;
        let pred = predict(params, config, &supports, &pair)?;
        let mask = threshold_mask(&pred.probs, threshold)?;
        Ok(LabelResult {
            index,
            image_path: path.clone(),
            probs: pred.probs,
            mask,
        })
    };

    let mut results: Vec<LabelResult> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("worker pool");
        pool.install(|| {
            corpus
                .par_iter()
                .enumerate()
                .map(run)
                .collect::<Result<Vec<_>, _>>()
        })?
    } else {
        corpus
            .iter()
            .enumerate()
            .map(run)
            .collect::<Result<Vec<_>, _>>()?
    };
    results.sort_by_key(|r| r.index);
    Ok(results)
}

/// Load a corpus image (no mask required): the standard collection
/// filters and 224-resize apply.
fn load_corpus_image(path: &Path) -> Result<ndarray::Array3<f32>, WorkflowError> {
    use image::GenericImageView;
    let img = image::open(path).map_err(|source| DatasetError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = img.dimensions();
    crate::dataset::validate_image(w, h).map_err(|rules| DatasetError::ImageFilter {
        path: path.to_path_buf(),
        rule: rules[0],
    })?;
    let side = crate::IMAGE_SIDE as u32;
    let rgb = img
        .resize_exact(side, side, image::imageops::FilterType::Triangle)
        .to_rgb8();
    Ok(crate::dataset::rgb_to_unit_array(&rgb))
}

/// Write predicted masks (0/255 PNGs) and red-overlay visualizations.
pub fn save_label_outputs(
    results: &[LabelResult],
    corpus_images: bool,
    out_dir: &Path,
) -> Result<Vec<(PathBuf, PathBuf)>, WorkflowError> {
    std::fs::create_dir_all(out_dir).map_err(|source| WorkflowError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut paths = Vec::with_capacity(results.len());
    for result in results {
        let stem = result
            .image_path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_string)
            .unwrap_or_else(|| format!("img{:04}", result.index));
        let mask_path = out_dir.join(format!("{stem}.mask.png"));
        let (h, w) = result.mask.dim();
        let mask_img = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([if result.mask[(y as usize, x as usize)] > 0 {
                255
            } else {
                0
            }])
        });
        mask_img
            .save(&mask_path)
            .map_err(|source| DatasetError::Decode {
                path: mask_path.clone(),
                source,
            })?;

        let overlay_path = out_dir.join(format!("{stem}.overlay.png"));
        if corpus_images {
            let image = load_corpus_image(&result.image_path)?;
            let overlay = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let (yy, xx) = (y as usize, x as usize);
                let mut rgb = [
                    image[(0, yy, xx)],
                    image[(1, yy, xx)],
                    image[(2, yy, xx)],
                ];
                if result.mask[(yy, xx)] > 0 {
                    rgb[0] = 0.5 * rgb[0] + 0.5;
                    rgb[1] *= 0.5;
                    rgb[2] *= 0.5;
                }
                image::Rgb([
                    (rgb[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (rgb[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (rgb[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ])
            });
            overlay
                .save(&overlay_path)
                .map_err(|source| DatasetError::Decode {
                    path: overlay_path.clone(),
                    source,
                })?;
        }
        paths.push((mask_path, overlay_path));
    }
    Ok(paths)
}

/// A prediction flagged for human correction. With ground truth the score
/// is IoU; without, the mean per-pixel probability margin `|p - 0.5|`
/// serves as a confidence proxy. Low score = hard case.
#[derive(Debug, Clone, PartialEq)]
pub struct HardCase {
    pub index: usize,
    pub image_path: PathBuf,
    pub score: f64,
}

/// Rank predictions ascending by score (ties by corpus index) and return
/// the first `n`.
pub fn mine_hard_cases(
    predictions: &[LabelResult],
    truths: Option<&[Array2<u8>]>,
    n: usize,
) -> Result<Vec<HardCase>, WorkflowError> {
    if let Some(truths) = truths {
        if truths.len() != predictions.len() {
            return Err(WorkflowError::TruthCountMismatch {
                predictions: predictions.len(),
                truths: truths.len(),
            });
        }
    }
    let mut scored: Vec<HardCase> = predictions
        .iter()
        .enumerate()
        .map(|(i, pred)| {
            let score = match truths {
                Some(truths) => iou(&pred.mask, &truths[i])?,
                None => {
                    let total: f64 = pred
                        .probs
                        .iter()
                        .map(|&p| f64::from((p - 0.5).abs()))
                        .sum();
                    total / pred.probs.len() as f64
                }
            };
            Ok(HardCase {
                index: pred.index,
                image_path: pred.image_path.clone(),
                score,
            })
        })
        .collect::<Result<_, WorkflowError>>()?;
    scored.sort_by(|a, b| {
        a.score
            .partial_cmp(&b.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.index.cmp(&b.index))
    });
    scored.truncate(n);
    Ok(scored)
}

/// Emit `rank,image_path,score` rows.
pub fn write_hard_case_csv<W: std::io::Write>(
    cases: &[HardCase],
    writer: W,
) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["rank", "image_path", "score"])?;
    for (rank, case) in cases.iter().enumerate() {
        out.write_record([
            (rank + 1).to_string(),
            case.image_path.display().to_string(),
            format!("{:.6}", case.score),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Fold corrected pairs into a support set: the version bumps, corrected
/// pairs are tagged, and a correction whose path matches an existing pair
/// replaces it.
pub fn merge_support_set(
    old: &SupportSet,
    corrected: Vec<LoadedPair>,
) -> Result<SupportSet, WorkflowError> {
    if corrected.is_empty() {
        return Err(WorkflowError::EmptyCorrections);
    }
    let mut pairs = old.pairs.clone();
    for pair in corrected {
        match pairs.iter_mut().find(|(p, _)| p.source_path == pair.source_path) {
            Some(slot) => *slot = (pair, Provenance::Corrected),
            None => pairs.push((pair, Provenance::Corrected)),
        }
    }
    Ok(SupportSet {
        version: old.version + 1,
        pairs,
    })
}

/// Read corrected masks from a directory mirroring corpus filenames:
/// `<dir>/<stem>.png` next to each corpus image.
pub fn read_corrections(
    corpus: &[PathBuf],
    corrections_dir: &Path,
) -> Result<Vec<LoadedPair>, WorkflowError> {
    let mut out = Vec::new();
    for image_path in corpus {
        let Some(stem) = image_path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let mask_path = corrections_dir.join(format!("{stem}.png"));
        if mask_path.exists() {
            out.push(load_pair(image_path, &mask_path)?);
        }
    }
    if out.is_empty() {
        return Err(WorkflowError::EmptyCorrections);
    }
    Ok(out)
}
