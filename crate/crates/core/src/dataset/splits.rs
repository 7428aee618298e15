//! Train/val/test split construction by per-superclass class sampling.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, DatasetRegistry};
use crate::seed::mix;

/// Disjoint class-name lists covering the whole registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn n_classes(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }
}

/// Sample `per_super_val` then `per_super_test` distinct classes from every
/// top-level superclass; the remainder is the training split.
///
/// Classes with multiple parents are accounted under their
/// lexicographically-first parent chain. Deterministic per seed.
pub fn build_splits(
    registry: &DatasetRegistry,
    per_super_val: usize,
    per_super_test: usize,
    seed: u64,
) -> Result<SplitSpec, DatasetError> {
    if registry.classes.is_empty() {
        return Err(DatasetError::EmptyRegistry);
    }

    // superclass -> classes assigned to it, in sorted order
    let mut by_super: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut unassigned: Vec<String> = Vec::new();
    for name in registry.classes.keys() {
        match registry.hierarchy.assigned_top(name) {
            Some(top) => by_super.entry(top).or_default().push(name.clone()),
            None => unassigned.push(name.clone()),
        }
    }

    let needed = per_super_val + per_super_test;
    for (superclass, members) in &by_super {
        if members.len() < needed {
            return Err(DatasetError::InsufficientClasses {
                superclass: superclass.clone(),
                available: members.len(),
                needed,
            });
        }
    }

    let mut train = unassigned;
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (super_idx, (superclass, members)) in by_super.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, super_idx as u64));
        let _ = superclass;
        let picked = rand::seq::index::sample(&mut rng, members.len(), needed);
        let picked: Vec<usize> = picked.into_iter().collect();
        let (val_idx, test_idx) = picked.split_at(per_super_val);
        val.extend(val_idx.iter().map(|&i| members[i].clone()));
        test.extend(test_idx.iter().map(|&i| members[i].clone()));
        train.extend(
            members
                .iter()
                .enumerate()
                .filter(|(i, _)| !picked.contains(i))
                .map(|(_, name)| name.clone()),
        );
    }

    train.sort();
    val.sort();
    test.sort();
    Ok(SplitSpec {
        train,
        val,
        test,
        seed,
    })
}

/// Write `split<TAB>class` lines with a seed header comment.
pub fn write_splits_file(path: &Path, spec: &SplitSpec) -> Result<(), DatasetError> {
    let mut out = String::new();
    out.push_str(&format!("# seed={}\n", spec.seed));
    for (split, classes) in [
        ("train", &spec.train),
        ("val", &spec.val),
        ("test", &spec.test),
    ] {
        for class in classes {
            out.push_str(split);
            out.push('\t');
            out.push_str(class);
            out.push('\n');
        }
    }
    std::fs::write(path, out).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_splits_file(path: &Path) -> Result<SplitSpec, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut spec = SplitSpec {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        seed: 0,
    };
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(value) = comment.trim().strip_prefix("seed=") {
                spec.seed = value.trim().parse().map_err(|_| DatasetError::SplitsFormat {
                    line: idx + 1,
                    reason: format!("bad seed value {value:?}"),
                })?;
            }
            continue;
        }
        let Some((split, class)) = line.split_once('\t') else {
            return Err(DatasetError::SplitsFormat {
                line: idx + 1,
                reason: "expected `split<TAB>class`".to_string(),
            });
        };
        match split {
            "train" => spec.train.push(class.to_string()),
            "val" => spec.val.push(class.to_string()),
            "test" => spec.test.push(class.to_string()),
            other => {
                return Err(DatasetError::SplitsFormat {
                    line: idx + 1,
                    reason: format!("unknown split {other:?}"),
                })
            }
        }
    }
    Ok(spec)
}
