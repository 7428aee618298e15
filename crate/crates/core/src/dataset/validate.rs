//! Conformance validation for FSS-style registries.
//!
//! Violations are report entries, never hard failures: the only error is
//! an unreadable root. An empty error list is the definition of a
//! conforming registry.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{scan_registry, DatasetError, DatasetRegistry, Level};
use crate::{MAX_INSTANCE_LABEL, PAIRS_PER_CLASS, TOP_LEVEL_COUNT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RuleId {
    AspectRatio,
    MinSide,
    ClassCardinality,
    MaskBinarity,
    MaskEmpty,
    MaskMissing,
    InstanceRange,
    HierarchyCycle,
    HierarchyTopCount,
    HierarchyCoverage,
    HierarchyMissingClass,
    DuplicatePath,
    Unreadable,
    NonContiguousIndices,
}

impl RuleId {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleId::AspectRatio => "aspect-ratio",
            RuleId::MinSide => "min-side",
            RuleId::ClassCardinality => "class-cardinality",
            RuleId::MaskBinarity => "mask-binarity",
            RuleId::MaskEmpty => "mask-empty",
            RuleId::MaskMissing => "mask-missing",
            RuleId::InstanceRange => "instance-range",
            RuleId::HierarchyCycle => "hierarchy-cycle",
            RuleId::HierarchyTopCount => "hierarchy-top-count",
            RuleId::HierarchyCoverage => "hierarchy-coverage",
            RuleId::HierarchyMissingClass => "hierarchy-missing-class",
            RuleId::DuplicatePath => "duplicate-path",
            RuleId::Unreadable => "unreadable",
            RuleId::NonContiguousIndices => "non-contiguous-indices",
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

impl Severity {
    pub fn as_str(self) -> &'static str {
        match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Finding {
    pub path: PathBuf,
    pub rule: RuleId,
    pub severity: Severity,
    pub message: String,
}

impl Finding {
    fn error(path: impl Into<PathBuf>, rule: RuleId, message: impl Into<String>) -> Self {
        Finding {
            path: path.into(),
            rule,
            severity: Severity::Error,
            message: message.into(),
        }
    }

    fn warning(path: impl Into<PathBuf>, rule: RuleId, message: impl Into<String>) -> Self {
        Finding {
            path: path.into(),
            rule,
            severity: Severity::Warning,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn errors(&self) -> impl Iterator<Item = &Finding> {
        self.findings
            .iter()
            .filter(|f| f.severity == Severity::Error)
    }

    pub fn n_errors(&self) -> usize {
        self.errors().count()
    }

    pub fn n_warnings(&self) -> usize {
        self.findings.len() - self.n_errors()
    }

    /// The registry conforms iff there are no error findings.
    pub fn conforms(&self) -> bool {
        self.n_errors() == 0
    }

    /// Distinct rule ids present among error findings.
    pub fn error_rules(&self) -> Vec<RuleId> {
        let mut rules: Vec<RuleId> = self.errors().map(|f| f.rule).collect();
        rules.sort_unstable();
        rules.dedup();
        rules
    }

    /// Emit `path,rule_id,severity,message` rows.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["path", "rule_id", "severity", "message"])?;
        for f in &self.findings {
            out.write_record([
                f.path.display().to_string().as_str(),
                f.rule.as_str(),
                f.severity.as_str(),
                f.message.as_str(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Validate the corpus rooted at `root_path`.
pub fn validate_registry(root_path: &Path) -> Result<ValidationReport, DatasetError> {
    let registry = scan_registry(root_path)?;
    Ok(validate_scanned(&registry))
}

/// Validate an already-scanned registry (pixel checks read from disk).
pub fn validate_scanned(registry: &DatasetRegistry) -> ValidationReport {
    let mut findings = Vec::new();

    check_hierarchy(registry, &mut findings);
    check_duplicates(registry, &mut findings);

    for (name, entry) in &registry.classes {
        if entry.pairs.len() != PAIRS_PER_CLASS {
            findings.push(Finding::error(
                super::class_dir(&registry.root_path, name),
                RuleId::ClassCardinality,
                format!(
                    "class {name} has {} pairs, expected {PAIRS_PER_CLASS}",
                    entry.pairs.len()
                ),
            ));
        }
        let indices: Vec<usize> = entry
            .pairs
            .iter()
            .filter_map(|p| {
                p.image_path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.parse().ok())
            })
            .collect();
        let contiguous = indices.iter().enumerate().all(|(i, &k)| k == i + 1);
        if !indices.is_empty() && !contiguous {
            findings.push(Finding::warning(
                super::class_dir(&registry.root_path, name),
                RuleId::NonContiguousIndices,
                format!("pair indices {indices:?} are not 1..={}", indices.len()),
            ));
        }
    }

    // Per-pair pixel checks are pure per file; run them in parallel and
    // restore a deterministic order afterwards.
    let pairs: Vec<_> = registry
        .classes
        .values()
        .flat_map(|entry| entry.pairs.iter())
        .collect();
    let mut pair_findings: Vec<Finding> = pairs
        .par_iter()
        .flat_map_iter(|pair| check_pair(pair))
        .collect();
    findings.append(&mut pair_findings);

    findings.sort_by(|a, b| {
        (&a.path, a.rule, &a.message).cmp(&(&b.path, b.rule, &b.message))
    });
    ValidationReport { findings }
}

fn check_hierarchy(registry: &DatasetRegistry, findings: &mut Vec<Finding>) {
    let hierarchy = &registry.hierarchy;
    let hier_path = registry.root_path.join("hierarchy.json");

    let tops = hierarchy.top_nodes();
    if tops.len() != TOP_LEVEL_COUNT {
        findings.push(Finding::error(
            &hier_path,
            RuleId::HierarchyTopCount,
            format!(
                "{} top-level superclasses, expected {TOP_LEVEL_COUNT}",
                tops.len()
            ),
        ));
    }

    if let Some(cycle) = hierarchy.find_cycle() {
        findings.push(Finding::error(
            &hier_path,
            RuleId::HierarchyCycle,
            format!("cycle: {}", cycle.join(" -> ")),
        ));
        // reachability is not meaningful with a cycle present
        return;
    }

    for name in registry.classes.keys() {
        match hierarchy.level(name) {
            Some(Level::Bottom) => {
                if hierarchy.top_ancestors(name).is_empty() {
                    findings.push(Finding::error(
                        &hier_path,
                        RuleId::HierarchyCoverage,
                        format!("class {name} does not reach any top-level superclass"),
                    ));
                }
            }
            Some(_) => findings.push(Finding::error(
                &hier_path,
                RuleId::HierarchyMissingClass,
                format!("class {name} is present but not tagged bottom-level"),
            )),
            None => findings.push(Finding::error(
                &hier_path,
                RuleId::HierarchyMissingClass,
                format!("class {name} missing from the hierarchy"),
            )),
        }
    }

    for name in hierarchy.bottom_nodes() {
        if hierarchy.top_ancestors(name).is_empty() {
            let finding = Finding::error(
                &hier_path,
                RuleId::HierarchyCoverage,
                format!("bottom node {name} does not reach any top-level superclass"),
            );
            if !findings.contains(&finding) {
                findings.push(finding);
            }
        }
    }
}


fn check_duplicates(registry: &DatasetRegistry, findings: &mut Vec<Finding>) {
    let mut seen: BTreeMap<&Path, &str> = BTreeMap::new();
    for (name, entry) in &registry.classes {
        for pair in &entry.pairs {
            if let Some(first) = seen.insert(pair.image_path.as_path(), name) {
                findings.push(Finding::error(
                    &pair.image_path,
                    RuleId::DuplicatePath,
                    format!("image referenced by both {first} and {name}"),
                ));
            }
        }
    }
}

fn check_pair(pair: &super::PairRef) -> Vec<Finding> {
    let mut findings = Vec::new();

    match super::load::read_image_dimensions(&pair.image_path) {
        Ok((w, h)) => {
            if let Err(rules) = super::validate_image(w, h) {
                for rule in rules {
                    let detail = match rule {
                        RuleId::AspectRatio => {
                            format!("aspect ratio {:.3}", w as f64 / h as f64)
                        }
                        _ => format!("min side {}", w.min(h)),
                    };
                    findings.push(Finding::error(
                        &pair.image_path,
                        rule,
                        format!("{w}x{h}: {detail}"),
                    ));
                }
            }
        }
        Err(err) => findings.push(Finding::error(
            &pair.image_path,
            RuleId::Unreadable,
            err.to_string(),
        )),
    }

    if !pair.mask_path.exists() {
        findings.push(Finding::error(
            &pair.mask_path,
            RuleId::MaskMissing,
            "mask file missing",
        ));
    } else {
        match image::open(&pair.mask_path) {
            Ok(img) => {
                let gray = img.to_luma8();
                let mut non_binary = None;
                let mut foreground = 0usize;
                for pixel in gray.pixels() {
                    let v = pixel.0[0];
                    if v != 0 && v != 255 {
                        non_binary.get_or_insert(v);
                    }
                    if v == 255 {
                        foreground += 1;
                    }
                }
                if let Some(v) = non_binary {
                    findings.push(Finding::error(
                        &pair.mask_path,
                        RuleId::MaskBinarity,
                        format!("mask contains raw value {v}, expected only 0 and 255"),
                    ));
                }
                if foreground == 0 {
                    findings.push(Finding::error(
                        &pair.mask_path,
                        RuleId::MaskEmpty,
                        "mask has no foreground pixels",
                    ));
                }
            }
            Err(err) => findings.push(Finding::error(
                &pair.mask_path,
                RuleId::Unreadable,
                err.to_string(),
            )),
        }
    }

    if let Some(inst_path) = &pair.instance_path {
        match image::open(inst_path) {
            Ok(img) => {
                let gray = img.to_luma8();
                if let Some(bad) = gray
                    .pixels()
                    .map(|p| p.0[0])
                    .find(|&v| v > MAX_INSTANCE_LABEL)
                {
                    findings.push(Finding::error(
                        inst_path,
                        RuleId::InstanceRange,
                        format!("instance label {bad} exceeds {MAX_INSTANCE_LABEL}"),
                    ));
                }
            }
            Err(err) => findings.push(Finding::error(
                inst_path,
                RuleId::Unreadable,
                err.to_string(),
            )),
        }
    }

    findings
}
