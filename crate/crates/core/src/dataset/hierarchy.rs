//! Three-level class hierarchy: a DAG, not a tree — a class may have
//! multiple parents (an apple is both fruit and food).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DatasetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Top,
    Middle,
    Bottom,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct NodeSpec {
    level: Level,
    #[serde(default)]
    parents: Vec<String>,
}

/// Class/superclass DAG with `top`/`middle`/`bottom` level tags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HierarchyGraph {
    nodes: BTreeMap<String, Level>,
    parents: BTreeMap<String, Vec<String>>,
}

impl HierarchyGraph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a node; parents of existing edges are kept.
    pub fn add_node(&mut self, name: &str, level: Level) {
        self.nodes.insert(name.to_string(), level);
    }

    /// Add a child→parent edge. Both endpoints must already be nodes.
    pub fn add_edge(&mut self, child: &str, parent: &str) -> Result<(), DatasetError> {
        if !self.nodes.contains_key(child) || !self.nodes.contains_key(parent) {
            return Err(DatasetError::UnknownHierarchyNode {
                name: if self.nodes.contains_key(child) {
                    parent.to_string()
                } else {
                    child.to_string()
                },
            });
        }
        let entry = self.parents.entry(child.to_string()).or_default();
        if !entry.iter().any(|p| p == parent) {
            entry.push(parent.to_string());
            entry.sort();
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.nodes.contains_key(name)
    }

    pub fn level(&self, name: &str) -> Option<Level> {
        self.nodes.get(name).copied()
    }

    pub fn parents_of(&self, name: &str) -> &[String] {
        self.parents.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn nodes(&self) -> impl Iterator<Item = (&str, Level)> {
        self.nodes.iter().map(|(n, l)| (n.as_str(), *l))
    }

    pub fn top_nodes(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|(_, l)| **l == Level::Top)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn bottom_nodes(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|(_, l)| **l == Level::Bottom)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Returns one edge chain forming a cycle, if any exists.
    pub fn find_cycle(&self) -> Option<Vec<String>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            InProgress,
            Done,
        }
        let mut marks: BTreeMap<&str, Mark> = BTreeMap::new();
        let mut stack: Vec<&str> = Vec::new();

        fn visit<'a>(
            graph: &'a HierarchyGraph,
            node: &'a str,
            marks: &mut BTreeMap<&'a str, Mark>,
            stack: &mut Vec<&'a str>,
        ) -> Option<Vec<String>> {
            match marks.get(node) {
                Some(Mark::Done) => return None,
                Some(Mark::InProgress) => {
                    let start = stack.iter().position(|n| *n == node).unwrap_or(0);
                    let mut cycle: Vec<String> =
                        stack[start..].iter().map(|s| s.to_string()).collect();
                    cycle.push(node.to_string());
                    return Some(cycle);
                }
                None => {}
            }
            marks.insert(node, Mark::InProgress);
            stack.push(node);
            for parent in graph.parents_of(node) {
                if let Some(cycle) = visit(graph, parent, marks, stack) {
                    return Some(cycle);
                }
            }
            stack.pop();
            marks.insert(node, Mark::Done);
            None
        }

        for node in self.nodes.keys() {
            if let Some(cycle) = visit(self, node, &mut marks, &mut stack) {
                return Some(cycle);
            }
        }
        None
    }

    /// All top-level nodes reachable from `name` (inclusive if `name` is top).
    pub fn top_ancestors(&self, name: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut seen = BTreeSet::new();
        let mut queue = vec![name.to_string()];
        while let Some(node) = queue.pop() {
            if !seen.insert(node.clone()) {
                continue;
            }
            if self.level(&node) == Some(Level::Top) {
                out.insert(node.clone());
            }
            for parent in self.parents_of(&node) {
                queue.push(parent.clone());
            }
        }
        out
    }

    /// The superclass a class is accounted under for split quotas and stats:
    /// climb through the lexicographically-first parent until a top node.
    pub fn assigned_top(&self, name: &str) -> Option<String> {
        let mut node = name.to_string();
        let mut hops = 0usize;
        loop {
            if self.level(&node) == Some(Level::Top) {
                return Some(node);
            }
            let parent = self.parents_of(&node).first()?.clone();
            node = parent;
            hops += 1;
            if hops > self.nodes.len() {
                return None; // cycle guard
            }
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<String, NodeSpec> = self
            .nodes
            .iter()
            .map(|(name, level)| {
                (
                    name.clone(),
                    NodeSpec {
                        level: *level,
                        parents: self.parents_of(name).to_vec(),
                    },
                )
            })
            .collect();
        serde_json::to_value(map).expect("hierarchy serializes")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, DatasetError> {
        let map: BTreeMap<String, NodeSpec> =
            serde_json::from_value(value).map_err(DatasetError::HierarchyFormat)?;
        let mut graph = Self::new();
        for (name, spec) in &map {
            graph.add_node(name, spec.level);
        }
        for (name, spec) in &map {
            for parent in &spec.parents {
                if !graph.contains(parent) {
                    return Err(DatasetError::UnknownHierarchyNode {
                        name: parent.clone(),
                    });
                }
                graph.add_edge(name, parent)?;
            }
        }
        Ok(graph)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let text = serde_json::to_string_pretty(&self.to_json())
            .map_err(DatasetError::HierarchyFormat)?;
        std::fs::write(path, text).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let value = serde_json::from_str(&text).map_err(DatasetError::HierarchyFormat)?;
        Self::from_json(value)
    }
}
