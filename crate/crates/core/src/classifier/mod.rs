//! Percept-to-visual-class mappings.
//!
//! Two backends share one contract: a [`TreeClassifier`] whose leaves are the
//! classes, and a [`BddClassifier`] that attaches an arbitrary Boolean
//! function of feature presences to every class. Only the latter can merge
//! classes. Both allocate class ids the same way (refining hands out the
//! next two ids, present side first), so the same split sequence yields the
//! same labels on both backends.

pub mod bdd;
mod equivalence;
mod tree;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

pub use bdd::{BddManager, NodeRef, SiftLimits};
pub use equivalence::{find_equivalent_pairs, EquivalentPair, EquivalenceSpec};
pub use tree::TreeClassifier;

use crate::features::FeatureId;

/// Identifier of a visual class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub u32);

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "V{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("unknown class {0}")]
    UnknownClass(ClassId),
    #[error("feature {feature} is constant on class {class}")]
    ConstantFeature { class: ClassId, feature: FeatureId },
    #[error("cannot merge a class with itself ({0})")]
    SelfMerge(ClassId),
    #[error("class partition violated: no class accepts the percept")]
    PartitionViolation,
    #[error("the tree backend cannot merge classes")]
    MergeUnsupported,
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Tree,
    Bdd,
}

/// One BDD per visual class over a shared node store.
#[derive(Debug, Clone, PartialEq)]
pub struct BddClassifier {
    manager: BddManager,
    classes: BTreeMap<ClassId, NodeRef>,
    next_class: u32,
}

impl Default for BddClassifier {
    fn default() -> Self {
        Self::new()
    }
}

impl BddClassifier {
    /// A single class accepting everything.
    pub fn new() -> Self {
        Self {
            manager: BddManager::new(),
            classes: [(ClassId(0), NodeRef::TRUE)].into_iter().collect(),
            next_class: 1,
        }
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.keys().copied().collect()
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn manager(&self) -> &BddManager {
        &self.manager
    }

    pub fn function(&self, v: ClassId) -> Option<NodeRef> {
        self.classes.get(&v).copied()
    }

    pub fn node_count(&self) -> usize {
        let roots: Vec<NodeRef> = self.classes.values().copied().collect();
        self.manager.node_count(&roots)
    }

    pub fn classify_with<E>(
        &self,
        mut detector: impl FnMut(FeatureId) -> Result<bool, E>,
    ) -> Result<Result<ClassId, ClassifierError>, E> {
        // class functions share variables: detect each feature once per call
        let mut seen: Vec<Option<bool>> = Vec::new();
        for (&c, &root) in &self.classes {
            let accepted = self.manager.try_eval(root, |f| {
                let i = f.0 as usize;
                if i >= seen.len() {
                    seen.resize(i + 1, None);
                }
                if let Some(b) = seen[i] {
                    return Ok(b);
                }
                let b = detector(f)?;
                seen[i] = Some(b);
                Ok(b)
            })?;
            // classes are disjoint, so the first hit is the only one
            if accepted {
                return Ok(Ok(c));
            }
        }
        Ok(Err(ClassifierError::PartitionViolation))
    }

    /// `B(V1) = B(V) & f`, `B(V2) = B(V) & !f`.
    pub fn refine(&mut self, v: ClassId, f: FeatureId) -> Result<(ClassId, ClassId), ClassifierError> {
        let root = *self.classes.get(&v).ok_or(ClassifierError::UnknownClass(v))?;
        let x = self.manager.var(f);
        let nx = self.manager.not(x);
        let with = self.manager.and(root, x);
        let without = self.manager.and(root, nx);
        if with == NodeRef::FALSE || without == NodeRef::FALSE {
            return Err(ClassifierError::ConstantFeature { class: v, feature: f });
        }
        let present = ClassId(self.next_class);
        let absent = ClassId(self.next_class + 1);
        self.next_class += 2;
        self.classes.remove(&v);
        self.classes.insert(present, with);
        self.classes.insert(absent, without);
        Ok((present, absent))
    }

    /// Replaces `v1` and `v2` by one class with the disjunction of their
    /// functions, then reorders variables.
    pub fn merge(&mut self, v1: ClassId, v2: ClassId) -> Result<ClassId, ClassifierError> {
        let merged = self.merge_deferred(v1, v2)?;
        self.reorder_variables();
        Ok(merged)
    }

    /// [`BddClassifier::merge`] without the reordering pass.
    pub fn merge_deferred(&mut self, v1: ClassId, v2: ClassId) -> Result<ClassId, ClassifierError> {
        if v1 == v2 {
            return Err(ClassifierError::SelfMerge(v1));
        }
        let a = *self.classes.get(&v1).ok_or(ClassifierError::UnknownClass(v1))?;
        let b = *self.classes.get(&v2).ok_or(ClassifierError::UnknownClass(v2))?;
        let union = self.manager.or(a, b);
        let merged = ClassId(self.next_class);
        self.next_class += 1;
        self.classes.remove(&v1);
        self.classes.remove(&v2);
        self.classes.insert(merged, union);
        Ok(merged)
    }

    /// Sifting over all class functions; drops variables no class depends on.
    pub fn reorder_variables(&mut self) {
        let ids: Vec<ClassId> = self.classes.keys().copied().collect();
        let mut roots: Vec<NodeRef> = self.classes.values().copied().collect();
        self.manager.sift(&mut roots);
        for (id, r) in ids.into_iter().zip(roots) {
            self.classes.insert(id, r);
        }
    }

    pub fn variable_order(&self) -> &[FeatureId] {
        self.manager.order()
    }

    /// Features some class function depends on.
    pub fn features(&self) -> Vec<FeatureId> {
        let mut out: Vec<FeatureId> = self
            .classes
            .values()
            .flat_map(|&r| self.manager.support(r))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Text form (node table children first, terminals are 0 and 1):
    ///
    /// ```text
    /// # rlvc bdd v1
    /// next_class <n>
    /// order <f> <f> ...
    /// node <id> <feature> <low> <high>
    /// class <class> <root>
    /// ```
    pub fn to_text(&self) -> String {
        let mut this = self.clone();
        let ids: Vec<ClassId> = this.classes.keys().copied().collect();
        let mut roots: Vec<NodeRef> = this.classes.values().copied().collect();
        this.manager.collect_garbage(&mut roots);
        let mut out = String::from("# rlvc bdd v1\n");
        let _ = writeln!(out, "next_class {}", self.next_class);
        out.push_str("order");
        for v in this.manager.order() {
            let _ = write!(out, " {}", v.0);
        }
        out.push('\n');
        for (i, (var, low, high)) in this.manager.parts().into_iter().enumerate() {
            let _ = writeln!(out, "node {} {} {} {}", i + 2, var.0, low.0, high.0);
        }
        for (id, r) in ids.iter().zip(&roots) {
            let _ = writeln!(out, "class {} {}", id.0, r.0);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, ClassifierError> {
        let mut next_class = None;
        let mut order = Vec::new();
        let mut nodes = Vec::new();
        let mut classes = BTreeMap::new();
        let mut last = 0;
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            last = ln;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| ClassifierError::Parse {
                line: ln,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<u32>().map_err(|_| err("bad number"));
            match f[0] {
                "next_class" if f.len() == 2 => next_class = Some(num(f[1])?),
                "order" => {
                    for s in &f[1..] {
                        order.push(FeatureId(num(s)?));
                    }
                }
                "node" if f.len() == 5 => {
                    if num(f[1])? as usize != nodes.len() + 2 {
                        return Err(err("node ids must be consecutive from 2"));
                    }
                    nodes.push((FeatureId(num(f[2])?), NodeRef(num(f[3])?), NodeRef(num(f[4])?)));
                }
                "class" if f.len() == 3 => {
                    let r = NodeRef(num(f[2])?);
                    if r.0 as usize >= nodes.len() + 2 {
                        return Err(err("class root out of range"));
                    }
                    if classes.insert(ClassId(num(f[1])?), r).is_some() {
                        return Err(err("duplicate class"));
                    }
                }
                _ => return Err(err("unrecognized line")),
            }
        }
        let next_class = next_class.ok_or(ClassifierError::Parse {
            line: last,
            msg: "missing next_class".into(),
        })?;
        let manager = BddManager::from_parts(order, &nodes).map_err(|msg| ClassifierError::Parse {
            line: last,
            msg,
        })?;
        if classes.is_empty() || classes.keys().any(|c: &ClassId| c.0 >= next_class) {
            return Err(ClassifierError::Parse {
                line: last,
                msg: "invalid class table".into(),
            });
        }
        Ok(Self {
            manager,
            classes,
            next_class,
        })
    }
}

/// A percept classifier with either backend.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Tree(TreeClassifier),
    Bdd(BddClassifier),
}

impl Classifier {
    /// The initial classifier: one class containing every percept.
    pub fn new(backend: Backend) -> Self {
        match backend {
            Backend::Tree => Classifier::Tree(TreeClassifier::new()),
            Backend::Bdd => Classifier::Bdd(BddClassifier::new()),
        }
    }

    pub fn backend(&self) -> Backend {
        match self {
            Classifier::Tree(_) => Backend::Tree,
            Classifier::Bdd(_) => Backend::Bdd,
        }
    }

    /// Sorted class ids.
    pub fn class_ids(&self) -> Vec<ClassId> {
        match self {
            Classifier::Tree(t) => t.class_ids(),
            Classifier::Bdd(b) => b.class_ids(),
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            Classifier::Tree(t) => t.n_classes(),
            Classifier::Bdd(b) => b.n_classes(),
        }
    }

    /// Classifies a percept given its feature detector.
    ///
    /// The outer error comes from the detector; the inner one reports a
    /// corrupted BDD partition.
    pub fn classify_with<E>(
        &self,
        detector: impl FnMut(FeatureId) -> Result<bool, E>,
    ) -> Result<Result<ClassId, ClassifierError>, E> {
        match self {
            Classifier::Tree(t) => t.classify_with(detector).map(Ok),
            Classifier::Bdd(b) => b.classify_with(detector),
        }
    }

    pub fn refine(&mut self, v: ClassId, f: FeatureId) -> Result<(ClassId, ClassId), ClassifierError> {
        match self {
            Classifier::Tree(t) => t.refine(v, f),
            Classifier::Bdd(b) => b.refine(v, f),
        }
    }

    pub fn merge(&mut self, v1: ClassId, v2: ClassId) -> Result<ClassId, ClassifierError> {
        match self {
            Classifier::Tree(_) => Err(ClassifierError::MergeUnsupported),
            Classifier::Bdd(b) => b.merge(v1, v2),
        }
    }

    /// Features the classifier can test.
    pub fn features(&self) -> Vec<FeatureId> {
        match self {
            Classifier::Tree(t) => t.features(),
            Classifier::Bdd(b) => b.features(),
        }
    }

    pub fn to_text(&self) -> String {
        match self {
            Classifier::Tree(t) => t.to_text(),
            Classifier::Bdd(b) => b.to_text(),
        }
    }

    /// Parses either text form, dispatching on the header line.
    pub fn from_text(text: &str) -> Result<Self, ClassifierError> {
        let header = text.lines().next().unwrap_or_default().trim();
        match header {
            "# rlvc tree v1" => TreeClassifier::from_text(text).map(Classifier::Tree),
            "# rlvc bdd v1" => BddClassifier::from_text(text).map(Classifier::Bdd),
            _ => Err(ClassifierError::Parse {
                line: 1,
                msg: "unknown classifier header".into(),
            }),
        }
    }
}
