//! Registry statistics: per-class counts and the per-superclass image
//! distribution, normalized to sum to 1.

use std::collections::BTreeMap;

use super::{DatasetError, DatasetRegistry};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub per_class: BTreeMap<String, usize>,
    pub mean: f64,
    /// Population standard deviation of per-class counts.
    pub stddev: f64,
    /// Fraction of all images per superclass; sums to 1.
    pub per_super: BTreeMap<String, f64>,
}

pub fn compute_stats(registry: &DatasetRegistry) -> Result<DatasetStats, DatasetError> {
    if registry.classes.is_empty() {
        return Err(DatasetError::EmptyRegistry);
    }

    let per_class: BTreeMap<String, usize> = registry
        .classes
        .iter()
        .map(|(name, entry)| (name.clone(), entry.pairs.len()))
        .collect();

    let n = per_class.len() as f64;
    let total: usize = per_class.values().sum();
    let mean = total as f64 / n;
    let var = per_class
        .values()
        .map(|&c| {
            let d = c as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let stddev = var.sqrt();

    let mut super_counts: BTreeMap<String, usize> = BTreeMap::new();
    for (name, count) in &per_class {
        let key = registry
            .hierarchy
            .assigned_top(name)
            .unwrap_or_else(|| "(unassigned)".to_string());
        *super_counts.entry(key).or_default() += count;
    }
    let per_super = if total == 0 {
        BTreeMap::new()
    } else {
        super_counts
            .into_iter()
            .map(|(name, count)| (name, count as f64 / total as f64))
            .collect()
    };

    Ok(DatasetStats {
        per_class,
        mean,
        stddev,
        per_super,
    })
}
