//! Evaluation metrics: thresholding, IoU of positive labels, and the
//! per-class / per-superclass / global mean-IoU rollup.

use std::collections::BTreeMap;

use ndarray::{Array2, NdFloat};
use thiserror::Error;

use crate::dataset::HierarchyGraph;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("mask shapes differ: {a_h}x{a_w} vs {b_h}x{b_w}")]
    ShapeMismatch {
        a_h: usize,
        a_w: usize,
        b_h: usize,
        b_w: usize,
    },
    #[error("mask contains value {value}, expected binary 0/1")]
    NonBinary { value: u8 },
    #[error("threshold {tau} outside (0, 1)")]
    InvalidThreshold { tau: f64 },
    #[error("no records to aggregate")]
    EmptyRecords,
    #[error("class {name} not present in the hierarchy")]
    UnknownClass { name: String },
}

/// Binarize probabilities: 1 where `prob >= tau`.
pub fn threshold_mask<F: NdFloat>(pred: &Array2<F>, tau: f64) -> Result<Array2<u8>, MetricError> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(MetricError::InvalidThreshold { tau });
    }
    let tau = F::from(tau).unwrap();
    Ok(pred.mapv(|p| u8::from(p >= tau)))
}

/// Intersection-over-union of positive labels. Two empty masks agree
/// perfectly on "no foreground" and score 1.0.
pub fn iou(pred: &Array2<u8>, truth: &Array2<u8>) -> Result<f64, MetricError> {
    if pred.dim() != truth.dim() {
        let (a_h, a_w) = pred.dim();
        let (b_h, b_w) = truth.dim();
        return Err(MetricError::ShapeMismatch { a_h, a_w, b_h, b_w });
    }
    if let Some(&v) = pred.iter().chain(truth.iter()).find(|&&v| v > 1) {
        return Err(MetricError::NonBinary { value: v });
    }
    let mut intersection = 0u64;
    let mut union = 0u64;
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        intersection += u64::from(p & t);
        union += u64::from(p | t);
    }
    if union == 0 {
        Ok(1.0)
    } else {
        Ok(intersection as f64 / union as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupIou {
    pub n: usize,
    pub mean_iou: f64,
}

/// Aggregated IoU report. Superclass means average their member classes'
/// means; the global macro mean averages per-class means; the micro mean
/// averages every record directly.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class: BTreeMap<String, GroupIou>,
    pub per_super: BTreeMap<String, GroupIou>,
    pub macro_mean: f64,
    pub micro_mean: f64,
    pub n_records: usize,
}

impl MetricsReport {
    /// Emit `level,name,n,mean_iou` rows for class/superclass/global.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["level", "name", "n", "mean_iou"])?;
        for (name, group) in &self.per_class {
            out.write_record([
                "class",
                name,
                &group.n.to_string(),
                &format!("{:.6}", group.mean_iou),
            ])?;
        }
        for (name, group) in &self.per_super {
            out.write_record([
                "superclass",
                name,
                &group.n.to_string(),
                &format!("{:.6}", group.mean_iou),
            ])?;
        }
        out.write_record([
            "global",
            "macro",
            &self.per_class.len().to_string(),
            &format!("{:.6}", self.macro_mean),
        ])?;
        out.write_record([
            "global",
            "micro",
            &self.n_records.to_string(),
            &format!("{:.6}", self.micro_mean),
        ])?;
        out.flush()?;
        Ok(())
    }
}

/// Aggregate `(class_name, iou)` records. A class with multiple top-level
/// ancestors contributes to each of those superclass means.
pub fn mean_iou(
    records: &[(String, f64)],
    hierarchy: &HierarchyGraph,
) -> Result<MetricsReport, MetricError> {
    if records.is_empty() {
        return Err(MetricError::EmptyRecords);
    }

    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (name, value) in records {
        if !hierarchy.contains(name) {
            return Err(MetricError::UnknownClass { name: name.clone() });
        }
        let entry = sums.entry(name.as_str()).or_insert((0.0, 0));
        entry.0 += value;
        entry.1 += 1;
    }

    let per_class: BTreeMap<String, GroupIou> = sums
        .iter()
        .map(|(name, (sum, n))| {
            (
                name.to_string(),
                GroupIou {
                    n: *n,
                    mean_iou: sum / *n as f64,
                },
            )
        })
        .collect();

    let mut super_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (name, group) in &per_class {
        for top in hierarchy.top_ancestors(name) {
            let entry = super_sums.entry(top).or_insert((0.0, 0));
            entry.0 += group.mean_iou;
            entry.1 += 1;
        }
    }
    let per_super: BTreeMap<String, GroupIou> = super_sums
        .into_iter()
        .map(|(name, (sum, n))| {
            (
                name,
                GroupIou {
                    n,
                    mean_iou: sum / n as f64,
                },
            )
        })
        .collect();

    let macro_mean =
        per_class.values().map(|g| g.mean_iou).sum::<f64>() / per_class.len() as f64;
    let micro_mean = records.iter().map(|(_, v)| v).sum::<f64>() / records.len() as f64;

    Ok(MetricsReport {
        per_class,
        per_super,
        macro_mean,
        micro_mean,
        n_records: records.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Level;
    use ndarray::array;
    use proptest::prelude::*;

    fn hierarchy() -> HierarchyGraph {
        let mut g = HierarchyGraph::new();
        g.add_node("animals", Level::Top);
        g.add_node("cat", Level::Bottom);
        g.add_node("dog", Level::Bottom);
        g.add_edge("cat", "animals").unwrap();
        g.add_edge("dog", "animals").unwrap();
        g
    }

    #[test]
    fn threshold_convention_is_geq() {
        let pred = array![[0.4f32, 0.6], [0.5, 0.1]];
        let mask = threshold_mask(&pred, 0.5).unwrap();
        assert_eq!(mask, array![[0u8, 1], [1, 0]]);
        assert!(matches!(
            threshold_mask(&pred, 1.2),
            Err(MetricError::InvalidThreshold { .. })
        ));
    }

    #[test]
    fn iou_basic_cases() {
        let a = array![[1u8, 1], [0, 0]];
        let b = array![[0u8, 0], [1, 1]];
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &b).unwrap(), 0.0);

        // pred = top half, truth = everything -> 0.5
        let pred = Array2::from_shape_fn((224, 224), |(y, _)| u8::from(y < 112));
        let truth = Array2::from_elem((224, 224), 1u8);
        assert_eq!(iou(&pred, &truth).unwrap(), 0.5);

        let empty = Array2::zeros((4, 4));
        assert_eq!(iou(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn iou_rejects_bad_inputs() {
        let a = array![[1u8, 1]];
        let b = array![[1u8], [1]];
        assert!(matches!(iou(&a, &b), Err(MetricError::ShapeMismatch { .. })));
        let c = array![[2u8, 0]];
        assert!(matches!(
            iou(&c, &array![[1u8, 0]]),
            Err(MetricError::NonBinary { value: 2 })
        ));
    }

    #[test]
    fn mean_iou_rollup() {
        let g = hierarchy();
        let records = vec![("cat".to_string(), 0.8), ("cat".to_string(), 0.6)];
        let report = mean_iou(&records, &g).unwrap();
        assert!((report.per_class["cat"].mean_iou - 0.7).abs() < 1e-12);
        assert!((report.macro_mean - 0.7).abs() < 1e-12);

        let records = vec![("cat".to_string(), 0.5), ("dog".to_string(), 0.9)];
        let report = mean_iou(&records, &g).unwrap();
        assert!((report.per_super["animals"].mean_iou - 0.7).abs() < 1e-12);

        let records = vec![("fox".to_string(), 0.5)];
        assert!(matches!(
            mean_iou(&records, &g),
            Err(MetricError::UnknownClass { .. })
        ));
    }

    #[test]
    fn identical_values_propagate_through_every_level() {
        let g = hierarchy();
        let records = vec![
            ("cat".to_string(), 0.42),
            ("dog".to_string(), 0.42),
            ("cat".to_string(), 0.42),
        ];
        let report = mean_iou(&records, &g).unwrap();
        assert!((report.per_class["cat"].mean_iou - 0.42).abs() < 1e-12);
        assert!((report.per_super["animals"].mean_iou - 0.42).abs() < 1e-12);
        assert!((report.macro_mean - 0.42).abs() < 1e-12);
        assert!((report.micro_mean - 0.42).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn iou_matches_pixel_count_oracle(bits_a in proptest::collection::vec(0u8..2, 64),
                                          bits_b in proptest::collection::vec(0u8..2, 64)) {
            let a = Array2::from_shape_vec((8, 8), bits_a).unwrap();
            let b = Array2::from_shape_vec((8, 8), bits_b).unwrap();

            let mut inter = 0u32;
            let mut uni = 0u32;
            for y in 0..8 {
                for x in 0..8 {
                    if a[(y, x)] == 1 && b[(y, x)] == 1 { inter += 1; }
                    if a[(y, x)] == 1 || b[(y, x)] == 1 { uni += 1; }
                }
            }
            let expected = if uni == 0 { 1.0 } else { f64::from(inter) / f64::from(uni) };
            prop_assert_eq!(iou(&a, &b).unwrap(), expected);
            // symmetry
            prop_assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
            // 1.0 iff equal (when either side is nonempty)
            if uni > 0 {
                prop_assert_eq!(iou(&a, &b).unwrap() == 1.0, a == b);
            }
        }
    }
}
