//! Registry scanning: build a [`DatasetRegistry`] from the on-disk layout
//! without decoding any pixels.

use std::collections::BTreeMap;
use std::path::Path;

use super::{ClassEntry, DatasetError, DatasetRegistry, HierarchyGraph, PairRef};

/// Scan `<root>` for class directories and numbered pairs.
///
/// Pairs are collected for every `<k>.jpg`; the sibling mask path is
/// recorded even if the file is missing (the validator reports that).
/// A missing `hierarchy.json` yields an empty hierarchy, again left to
/// the validator to flag.
pub fn scan_registry(root: &Path) -> Result<DatasetRegistry, DatasetError> {
    let entries = std::fs::read_dir(root).map_err(|source| DatasetError::Io {
        path: root.to_path_buf(),
        source,
    })?;

    let mut classes: BTreeMap<String, ClassEntry> = BTreeMap::new();
    for entry in entries {
        let entry = entry.map_err(|source| DatasetError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let mut pairs = Vec::new();
        let mut indices: Vec<usize> = Vec::new();
        for file in std::fs::read_dir(&path).map_err(|source| DatasetError::Io {
            path: path.clone(),
            source,
        })? {
            let file = file.map_err(|source| DatasetError::Io {
                path: path.clone(),
                source,
            })?;
            let file_path = file.path();
            let Some(fname) = file_path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if let Some(stem) = fname.strip_suffix(".jpg") {
                if let Ok(k) = stem.parse::<usize>() {
                    indices.push(k);
                }
            }
        }
        indices.sort_unstable();
        for k in indices {
            let (image_path, mask_path, inst_path) = super::pair_paths(root, name, k);
            let instance_path = inst_path.exists().then_some(inst_path);
            pairs.push(PairRef {
                image_path,
                mask_path,
                instance_path,
            });
        }
        classes.insert(
            name.to_string(),
            ClassEntry {
                name: name.to_string(),
                pairs,
            },
        );
    }

    let hierarchy_path = root.join("hierarchy.json");
    let hierarchy = if hierarchy_path.exists() {
        HierarchyGraph::load(&hierarchy_path)?
    } else {
        HierarchyGraph::new()
    };

    Ok(DatasetRegistry::new(classes, hierarchy, root))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Level;
    use tempfile::TempDir;

    #[test]
    fn scan_collects_numbered_pairs_in_order() {
        let dir = TempDir::new().unwrap();
        let class = dir.path().join("widget");
        std::fs::create_dir(&class).unwrap();
        for k in [3, 1, 2] {
            std::fs::write(class.join(format!("{k}.jpg")), b"").unwrap();
            std::fs::write(class.join(format!("{k}.png")), b"").unwrap();
        }
        std::fs::write(class.join("notes.txt"), b"ignored").unwrap();

        let mut g = HierarchyGraph::new();
        g.add_node("things", Level::Top);
        g.add_node("widget", Level::Bottom);
        g.add_edge("widget", "things").unwrap();
        g.save(&dir.path().join("hierarchy.json")).unwrap();

        let registry = scan_registry(dir.path()).unwrap();
        assert_eq!(registry.n_classes(), 1);
        let entry = registry.class("widget").unwrap();
        assert_eq!(entry.pairs.len(), 3);
        assert!(entry.pairs[0].image_path.ends_with("1.jpg"));
        assert!(entry.pairs[2].image_path.ends_with("3.jpg"));
        assert!(registry.hierarchy.contains("things"));
    }

    #[test]
    fn scan_without_hierarchy_gives_empty_graph() {
        let dir = TempDir::new().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        let registry = scan_registry(dir.path()).unwrap();
        assert!(registry.hierarchy.is_empty());
    }

    #[test]
    fn scan_missing_root_errors() {
        assert!(scan_registry(Path::new("/nonexistent/nowhere")).is_err());
    }
}
