use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::{ClassId, ClassifierError};
use crate::features::FeatureId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TreeNode {
    Leaf(ClassId),
    Test {
        feature: FeatureId,
        present: usize,
        absent: usize,
    },
}

/// Binary decision tree of feature-presence tests; leaves are visual classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeClassifier {
    nodes: Vec<TreeNode>,
    parent: Vec<Option<usize>>,
    leaves: BTreeMap<ClassId, usize>,
    next_class: u32,
}

impl Default for TreeClassifier {
    fn default() -> Self {
        Self::new()
    }
}

impl TreeClassifier {
    /// One leaf: every percept falls in class 0.
    pub fn new() -> Self {
        Self {
            nodes: vec![TreeNode::Leaf(ClassId(0))],
            parent: vec![None],
            leaves: [(ClassId(0), 0)].into_iter().collect(),
            next_class: 1,
        }
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.leaves.keys().copied().collect()
    }

    pub fn n_classes(&self) -> usize {
        self.leaves.len()
    }

    pub fn next_class(&self) -> u32 {
        self.next_class
    }

    pub fn depth(&self) -> usize {
        self.leaves
            .values()
            .map(|&leaf| self.path(leaf).len())
            .max()
            .unwrap_or(0)
    }

    /// Features tested on the way from the root to `node`.
    fn path(&self, mut node: usize) -> Vec<FeatureId> {
        let mut out = Vec::new();
        while let Some(p) = self.parent[node] {
            if let TreeNode::Test { feature, .. } = self.nodes[p] {
                out.push(feature);
            }
            node = p;
        }
        out
    }

    pub fn classify_with<E>(
        &self,
        mut detector: impl FnMut(FeatureId) -> Result<bool, E>,
    ) -> Result<ClassId, E> {
        let mut node = 0;
        loop {
            match self.nodes[node] {
                TreeNode::Leaf(c) => return Ok(c),
                TreeNode::Test {
                    feature,
                    present,
                    absent,
                } => node = if detector(feature)? { present } else { absent },
            }
        }
    }

    /// Replaces leaf `v` by a test on `f`; returns the `(present, absent)` classes.
    pub fn refine(&mut self, v: ClassId, f: FeatureId) -> Result<(ClassId, ClassId), ClassifierError> {
        let leaf = *self
            .leaves
            .get(&v)
            .ok_or(ClassifierError::UnknownClass(v))?;
        if self.path(leaf).contains(&f) {
            return Err(ClassifierError::ConstantFeature { class: v, feature: f });
        }
        let present = ClassId(self.next_class);
        let absent = ClassId(self.next_class + 1);
        self.next_class += 2;
        let p = self.nodes.len();
        self.nodes.push(TreeNode::Leaf(present));
        self.parent.push(Some(leaf));
        self.nodes.push(TreeNode::Leaf(absent));
        self.parent.push(Some(leaf));
        self.nodes[leaf] = TreeNode::Test {
            feature: f,
            present: p,
            absent: p + 1,
        };
        self.leaves.remove(&v);
        self.leaves.insert(present, p);
        self.leaves.insert(absent, p + 1);
        Ok((present, absent))
    }

    /// Distinct features tested anywhere in the tree.
    pub fn features(&self) -> Vec<FeatureId> {
        let mut out: Vec<FeatureId> = self
            .nodes
            .iter()
            .filter_map(|n| match n {
                TreeNode::Test { feature, .. } => Some(*feature),
                TreeNode::Leaf(_) => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Preorder text, present branch first:
    ///
    /// ```text
    /// # rlvc tree v1
    /// next_class <n>
    /// test <feature>
    /// leaf <class>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::from("# rlvc tree v1\n");
        let _ = writeln!(out, "next_class {}", self.next_class);
        let mut stack = vec![0usize];
        while let Some(n) = stack.pop() {
            match self.nodes[n] {
                TreeNode::Leaf(c) => {
                    let _ = writeln!(out, "leaf {}", c.0);
                }
                TreeNode::Test {
                    feature,
                    present,
                    absent,
                } => {
                    let _ = writeln!(out, "test {}", feature.0);
                    stack.push(absent);
                    stack.push(present);
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ClassifierError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .peekable();
        let parse_err = |line: usize, msg: &str| ClassifierError::Parse {
            line,
            msg: msg.to_string(),
        };
        let (ln, first) = lines.next().ok_or_else(|| parse_err(1, "empty tree"))?;
        let next_class: u32 = first
            .strip_prefix("next_class ")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| parse_err(ln, "expected `next_class <n>`"))?;

        let mut tree = TreeClassifier {
            nodes: Vec::new(),
            parent: Vec::new(),
            leaves: BTreeMap::new(),
            next_class,
        };
        // (node index, which child slot of its parent remains to fill)
        let mut pending: Vec<(usize, bool)> = Vec::new();
        let mut last_line = ln;
        for (ln, line) in lines {
            last_line = ln;
            let (kind, value) = line
                .split_once(' ')
                .ok_or_else(|| parse_err(ln, "expected `test <f>` or `leaf <c>`"))?;
            let value: u32 = value.trim().parse().map_err(|_| parse_err(ln, "bad id"))?;
            let idx = tree.nodes.len();
            let parent = match pending.last_mut() {
                None if idx == 0 => None,
                None => return Err(parse_err(ln, "trailing nodes after a complete tree")),
                Some((p, present_done)) => {
                    let p = *p;
                    if let TreeNode::Test {
                        present, absent, ..
                    } = &mut tree.nodes[p]
                    {
                        if !*present_done {
                            *present = idx;
                            *present_done = true;
                        } else {
                            *absent = idx;
                            pending.pop();
                        }
                    }
                    Some(p)
                }
            };
            tree.parent.push(parent);
            match kind {
                "leaf" => {
                    let c = ClassId(value);
                    if value >= next_class || tree.leaves.insert(c, idx).is_some() {
                        return Err(parse_err(ln, "invalid or duplicate class id"));
                    }
                    tree.nodes.push(TreeNode::Leaf(c));
                }
                "test" => {
                    tree.nodes.push(TreeNode::Test {
                        feature: FeatureId(value),
                        present: usize::MAX,
                        absent: usize::MAX,
                    });
                    pending.push((idx, false));
                }
                _ => return Err(parse_err(ln, "expected `test` or `leaf`")),
            }
        }
        if tree.nodes.is_empty() || !pending.is_empty() {
            return Err(parse_err(last_line, "incomplete tree"));
        }
        Ok(tree)
    }
}
