//! FSS-style dataset model: registry scanning, loading, validation,
//! splits, statistics, multi-class binarization and synthetic corpora.
//!
//! On-disk layout: `<root>/<class>/<k>.jpg` with sibling `<k>.png` binary
//! mask (0/255), `k` in 1..=10, optional `<k>.inst.png` instance mask, and
//! `<root>/hierarchy.json` mapping every node to its level and parents.

mod binarize;
mod hierarchy;
mod load;
mod scan;
mod splits;
mod stats;
mod synth;
mod validate;

pub use binarize::{binarize_labelmap, binarize_multiclass_dataset, BinarizeOutcome};
pub use hierarchy::{HierarchyGraph, Level};
pub use load::{
    load_pair, read_image_dimensions, resize_mask_buffer, resize_rgb_buffer, rgb_to_unit_array,
    validate_image, write_pair,
};
pub use scan::scan_registry;
pub use splits::{build_splits, read_splits_file, write_splits_file, SplitSpec};
pub use stats::{compute_stats, DatasetStats};
pub use synth::{build_synthetic_dataset, synthetic_registry_structure, SHAPE_KINDS};
pub use validate::{validate_registry, validate_scanned, Finding, RuleId, Severity, ValidationReport};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("image {path} rejected by collection filter: {rule}")]
    ImageFilter { path: PathBuf, rule: RuleId },
    #[error("mask {path} has no foreground pixels after loading")]
    AllBackground { path: PathBuf },
    #[error("mask {mask} is {mask_w}x{mask_h} but image {image} is {image_w}x{image_h}")]
    DimensionMismatch {
        image: PathBuf,
        mask: PathBuf,
        image_w: u32,
        image_h: u32,
        mask_w: u32,
        mask_h: u32,
    },
    #[error("hierarchy node {name} is not defined")]
    UnknownHierarchyNode { name: String },
    #[error("hierarchy file is malformed: {0}")]
    HierarchyFormat(#[source] serde_json::Error),
    #[error("superclass {superclass} has {available} classes, {needed} needed for the split")]
    InsufficientClasses {
        superclass: String,
        available: usize,
        needed: usize,
    },
    #[error("registry has no classes")]
    EmptyRegistry,
    #[error("label {target} does not appear in the label vocabulary")]
    UnknownTargetClass { target: u16 },
    #[error("need at least 2 classes, got {got}")]
    TooFewClasses { got: usize },
    #[error("splits file is malformed at line {line}: {reason}")]
    SplitsFormat { line: usize, reason: String },
    #[error("pixel buffer holds {got} bytes, expected {expected}")]
    BufferSize { expected: usize, got: usize },
}

/// Paths of one image/mask pair inside a registry. Pixels are loaded on
/// demand via [`load_pair`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRef {
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub instance_path: Option<PathBuf>,
}

/// A decoded pair: RGB image as channel-major unit-interval floats plus a
/// {0,1} mask, both 224x224.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedPair {
    /// Shape `(3, 224, 224)`, values in `[0, 1]`.
    pub image: Array3<f32>,
    /// Shape `(224, 224)`, values in `{0, 1}`, at least one foreground pixel.
    pub mask: Array2<u8>,
    pub source_path: String,
}

#[derive(Debug, Clone, Default)]
pub struct ClassEntry {
    pub name: String,
    pub pairs: Vec<PairRef>,
}

/// In-memory model of an on-disk FSS-style corpus.
#[derive(Debug, Clone)]
pub struct DatasetRegistry {
    pub classes: BTreeMap<String, ClassEntry>,
    pub hierarchy: HierarchyGraph,
    pub root_path: PathBuf,
}

impl DatasetRegistry {
    pub fn new(
        classes: BTreeMap<String, ClassEntry>,
        hierarchy: HierarchyGraph,
        root_path: impl Into<PathBuf>,
    ) -> Self {
        Self {
            classes,
            hierarchy,
            root_path: root_path.into(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_pairs(&self) -> usize {
        self.classes.values().map(|c| c.pairs.len()).sum()
    }

    pub fn class(&self, name: &str) -> Option<&ClassEntry> {
        self.classes.get(name)
    }

    /// Class names in sorted order.
    pub fn class_names(&self) -> Vec<String> {
        self.classes.keys().cloned().collect()
    }
}

pub(crate) fn class_dir(root: &Path, class: &str) -> PathBuf {
    root.join(class)
}

pub(crate) fn pair_paths(root: &Path, class: &str, k: usize) -> (PathBuf, PathBuf, PathBuf) {
    let dir = class_dir(root, class);
    (
        dir.join(format!("{k}.jpg")),
        dir.join(format!("{k}.png")),
        dir.join(format!("{k}.inst.png")),
    )
}
