//! C-way-K-shot episode sampling.
//!
//! Episodes are a pure function of `(seed, episode_index)`: training is
//! resumable and any number of workers may prefetch disjoint index ranges
//! without shared sampler state.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{load_pair, DatasetError, DatasetRegistry, LoadedPair, PairRef};
use crate::seed::mix;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("split has no classes")]
    EmptySplit,
    #[error("class {class} has {available} pairs, episode needs {needed}")]
    ClassTooSmall {
        class: String,
        available: usize,
        needed: usize,
    },
    #[error("class {class} not present in the registry")]
    UnknownClass { class: String },
    #[error("episode spec invalid: {reason}")]
    InvalidSpec { reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Episode shape: `n_way` is fixed to 2 for the core binary pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub seed: u64,
}

impl EpisodeSpec {
    pub fn new(k_shot: usize, n_query: usize, seed: u64) -> Self {
        Self {
            n_way: 2,
            k_shot,
            n_query,
            seed,
        }
    }

    fn validate(&self) -> Result<(), EpisodeError> {
        if self.k_shot < 1 {
            return Err(EpisodeError::InvalidSpec {
                reason: "k_shot must be >= 1".into(),
            });
        }
        if self.n_query < 1 {
            return Err(EpisodeError::InvalidSpec {
                reason: "n_query must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// Pair selection for one episode, before any pixel is read.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodePlan {
    pub class_name: String,
    pub support: Vec<PairRef>,
    pub query: Vec<PairRef>,
}

/// One loaded few-shot task: K annotated supports plus queries of the same
/// class, support and query disjoint.
#[derive(Debug, Clone)]
pub struct Episode {
    pub class_name: String,
    pub support: Vec<Arc<LoadedPair>>,
    pub query: Vec<Arc<LoadedPair>>,
}

impl Episode {
    pub fn from_pairs(
        class_name: impl Into<String>,
        support: Vec<LoadedPair>,
        query: Vec<LoadedPair>,
    ) -> Self {
        Episode {
            class_name: class_name.into(),
            support: support.into_iter().map(Arc::new).collect(),
            query: query.into_iter().map(Arc::new).collect(),
        }
    }
}

/// Process-wide cache of decoded pairs, keyed by image path.
#[derive(Debug, Default)]
pub struct PixelStore {
    cache: RwLock<HashMap<PathBuf, Arc<LoadedPair>>>,
}

impl PixelStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, pair: &PairRef) -> Result<Arc<LoadedPair>, DatasetError> {
        if let Some(hit) = self.cache.read().unwrap().get(&pair.image_path) {
            return Ok(Arc::clone(hit));
        }
        let loaded = Arc::new(load_pair(&pair.image_path, &pair.mask_path)?);
        self.cache
            .write()
            .unwrap()
            .insert(pair.image_path.clone(), Arc::clone(&loaded));
        Ok(loaded)
    }

    pub fn len(&self) -> usize {
        self.cache.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Index-addressed episode sampler over one split.
pub struct Sampler<'a> {
    registry: &'a DatasetRegistry,
    classes: Vec<String>,
    spec: EpisodeSpec,
    store: Arc<PixelStore>,
}

impl<'a> Sampler<'a> {
    /// Checks every candidate class up front: each must hold at least
    /// `k_shot + n_query` pairs.
    pub fn new(
        registry: &'a DatasetRegistry,
        split_classes: &[String],
        spec: EpisodeSpec,
    ) -> Result<Self, EpisodeError> {
        Self::with_store(registry, split_classes, spec, Arc::new(PixelStore::new()))
    }

    pub fn with_store(
        registry: &'a DatasetRegistry,
        split_classes: &[String],
        spec: EpisodeSpec,
        store: Arc<PixelStore>,
    ) -> Result<Self, EpisodeError> {
        spec.validate()?;
        if split_classes.is_empty() {
            return Err(EpisodeError::EmptySplit);
        }
        let needed = spec.k_shot + spec.n_query;
        let mut classes: Vec<String> = split_classes.to_vec();
        classes.sort();
        classes.dedup();
        for class in &classes {
            let entry = registry
                .class(class)
                .ok_or_else(|| EpisodeError::UnknownClass {
                    class: class.clone(),
                })?;
            if entry.pairs.len() < needed {
                return Err(EpisodeError::ClassTooSmall {
                    class: class.clone(),
                    available: entry.pairs.len(),
                    needed,
                });
            }
        }
        Ok(Self {
            registry,
            classes,
            spec,
            store,
        })
    }

    pub fn spec(&self) -> &EpisodeSpec {
        &self.spec
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    /// Pure pair selection for `episode_index`; no I/O.
    pub fn plan(&self, episode_index: u64) -> EpisodePlan {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.spec.seed, episode_index));
        let class = &self.classes[rng.random_range(0..self.classes.len())];
        let entry = self.registry.class(class).expect("validated in new");
        let needed = self.spec.k_shot + self.spec.n_query;
        let picked = rand::seq::index::sample(&mut rng, entry.pairs.len(), needed);
        let refs: Vec<PairRef> = picked.into_iter().map(|i| entry.pairs[i].clone()).collect();
        let (support, query) = refs.split_at(self.spec.k_shot);
        EpisodePlan {
            class_name: class.clone(),
            support: support.to_vec(),
            query: query.to_vec(),
        }
    }

    /// Load the episode for `episode_index`.
    pub fn episode(&self, episode_index: u64) -> Result<Episode, EpisodeError> {
        let plan = self.plan(episode_index);
        let support = plan
            .support
            .iter()
            .map(|p| self.store.get(p))
            .collect::<Result<_, _>>()?;
        let query = plan
            .query
            .iter()
            .map(|p| self.store.get(p))
            .collect::<Result<_, _>>()?;
        Ok(Episode {
            class_name: plan.class_name,
            support,
            query,
        })
    }

    /// Episodes for indices `0..n_episodes`; restartable from any index.
    pub fn stream(
        &self,
        n_episodes: u64,
    ) -> impl Iterator<Item = Result<Episode, EpisodeError>> + '_ {
        (0..n_episodes).map(move |i| self.episode(i))
    }

    /// Decode every pair of every candidate class into the store.
    pub fn preload(&self) -> Result<(), EpisodeError> {
        for class in &self.classes {
            let entry = self.registry.class(class).expect("validated in new");
            for pair in &entry.pairs {
                self.store.get(pair)?;
            }
        }
        Ok(())
    }
}

/// Convenience for tests and tools: plan-only sampling over a registry
/// without touching pixel data.
pub fn plan_episode(
    registry: &DatasetRegistry,
    split_classes: &[String],
    spec: EpisodeSpec,
    episode_index: u64,
) -> Result<EpisodePlan, EpisodeError> {
    // Sampler::new never reads pixels, so this stays I/O free.
    let store = Arc::new(PixelStore::new());
    let sampler = Sampler::with_store(registry, split_classes, spec, store)?;
    Ok(sampler.plan(episode_index))
}

pub fn class_list_or_all(registry: &DatasetRegistry, subset: Option<&[String]>) -> Vec<String> {
    match subset {
        Some(list) => list.to_vec(),
        None => registry.class_names(),
    }
}
