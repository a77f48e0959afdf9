//! The RLVC outer loop.
//!
//! Each iteration maps the interaction database through the current
//! classifier, solves the mapped MDP, estimates Bellman residuals, and
//! refines every class whose residuals vary too much under some action by
//! the feature that best explains that variation. Optionally, equivalent
//! classes are merged every few iterations (BDD backend only).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::classifier::{
    find_equivalent_pairs, Backend, ClassId, Classifier, ClassifierError, EquivalenceSpec,
};
use crate::features::{CompositeParams, Feature, FeatureError, FeatureGraph, FeatureId};
use crate::mdp::{
    estimate_mapped_mdp, greedy_policy, optimal_values, solve_optimal_q_with, Interaction,
    MappedMdp, MdpError, PerceptId, Policy, QFunction, SolverConfig,
};
use crate::percept::SymbolizedPercept;

#[derive(Debug, Error)]
pub enum RlvcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("interaction {index} references unknown percept {percept}")]
    UnknownPercept { index: usize, percept: u32 },
    #[error("empty interaction database")]
    EmptyDatabase,
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("model parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A static interaction database over symbolized percepts.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    /// Indexed by [`PerceptId`].
    pub percepts: Vec<SymbolizedPercept>,
    pub interactions: Vec<Interaction>,
    pub n_actions: usize,
    pub n_symbols: usize,
    pub discount: f64,
}

impl TrainingData {
    pub fn max_abs_reward(&self) -> f64 {
        self.interactions.iter().map(|i| i.r.abs()).fold(0.0, f64::max)
    }

    fn validate(&self) -> Result<(), RlvcError> {
        if self.interactions.is_empty() {
            return Err(RlvcError::EmptyDatabase);
        }
        let n = self.percepts.len();
        for (index, it) in self.interactions.iter().enumerate() {
            for p in [it.s, it.s_next] {
                if p.index() >= n {
                    return Err(RlvcError::UnknownPercept { index, percept: p.0 });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlvcConfig {
    /// Residual variance threshold; `(0.01 * max |r|)^2` when unset.
    pub tau: Option<f64>,
    /// Significance level of the Welch t-test.
    pub alpha: f64,
    pub max_splits_per_iteration: usize,
    /// Iterations between two compaction phases.
    pub compaction_period: usize,
    pub max_iterations: usize,
    pub backend: Backend,
    /// Try composite features when no primitive splits an aliased class.
    pub composites: bool,
    pub composite: CompositeParams,
    /// Per class, at most this many primitive candidates (most frequent first).
    pub candidate_cap: usize,
    /// Merge criteria; `eps = 0.05 * max |r|` with value and policy
    /// equivalence when unset.
    pub equivalence: Option<EquivalenceSpec>,
    pub solver_tolerance: f64,
}

impl Default for RlvcConfig {
    fn default() -> Self {
        Self {
            tau: None,
            alpha: 0.05,
            max_splits_per_iteration: 8,
            compaction_period: 10,
            max_iterations: 100,
            backend: Backend::Tree,
            composites: false,
            composite: CompositeParams::default(),
            candidate_cap: 512,
            equivalence: None,
            solver_tolerance: 1e-9,
        }
    }
}

impl RlvcConfig {
    pub fn validate(&self) -> Result<(), RlvcError> {
        let bad = |m: &str| Err(RlvcError::Config(m.to_string()));
        if let Some(t) = self.tau {
            if !(t >= 0.0 && t.is_finite()) {
                return bad("tau must be finite and >= 0");
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if self.max_splits_per_iteration == 0
            || self.compaction_period == 0
            || self.max_iterations == 0
            || self.candidate_cap == 0
        {
            return bad("counts must be positive");
        }
        if !(self.solver_tolerance > 0.0) {
            return bad("solver tolerance must be positive");
        }
        let c = &self.composite;
        if !(c.nu > 0.0 && c.nu <= 1.0) {
            return bad("nu must lie in (0, 1]");
        }
        if !(c.cluster_cut > 0.0 && c.sigma_floor > 0.0)
            || c.min_cooccurrence == 0
            || c.min_cluster_size == 0
            || c.max_percepts == 0
        {
            return bad("composite parameters must be positive");
        }
        if let Some(e) = &self.equivalence {
            if !(e.epsilon >= 0.0 && e.epsilon.is_finite()) {
                return bad("epsilon must be finite and >= 0");
            }
        }
        Ok(())
    }

    pub fn tau_for(&self, max_abs_reward: f64) -> f64 {
        self.tau.unwrap_or((0.01 * max_abs_reward).powi(2))
    }

    pub fn equivalence_for(&self, max_abs_reward: f64) -> EquivalenceSpec {
        self.equivalence
            .unwrap_or_else(|| EquivalenceSpec::for_reward_scale(max_abs_reward))
    }

    fn solver(&self) -> SolverConfig {
        SolverConfig {
            tolerance: self.solver_tolerance,
            ..SolverConfig::default()
        }
    }
}

/// Bellman residual estimate of one interaction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualSample {
    pub t: usize,
    /// Dense class index of `s_t`.
    pub class: usize,
    pub action: usize,
    pub delta: f64,
}

/// `Delta_t = r + gamma * max_a' Q(C(s'), a') - Q(C(s), a)`, terminal successors
/// contributing no future term.
pub fn residuals(
    interactions: &[Interaction],
    mut classify: impl FnMut(PerceptId) -> usize,
    q: &QFunction,
    discount: f64,
) -> Vec<ResidualSample> {
    interactions
        .iter()
        .enumerate()
        .map(|(t, it)| {
            let v = classify(it.s);
            let future = if it.terminal_next {
                0.0
            } else {
                q.max_value(classify(it.s_next))
            };
            ResidualSample {
                t,
                class: v,
                action: it.a,
                delta: it.r + discount * future - q.get(v, it.a),
            }
        })
        .collect()
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Whether some action's residuals vary by more than `tau`. Actions with
/// fewer than two samples are skipped.
pub fn aliased(by_action: &[Vec<f64>], tau: f64) -> bool {
    by_action.iter().any(|d| d.len() >= 2 && variance(d) > tau)
}

/// Two-sided Welch t-test. Each side needs two samples. Degenerate sides
/// with no spread differ exactly when their means differ.
pub fn welch_significant(a: &[f64], b: &[f64], alpha: f64) -> bool {
    welch_p_value(a, b).is_some_and(|p| p < alpha)
}

/// p-value of the two-sided Welch t-test, `None` when a side has fewer than
/// two samples.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let m1 = a.iter().sum::<f64>() / n1;
    let m2 = b.iter().sum::<f64>() / n2;
    let v1 = a.iter().map(|x| (x - m1).powi(2)).sum::<f64>() / (n1 - 1.0);
    let v2 = b.iter().map(|x| (x - m2).powi(2)).sum::<f64>() / (n2 - 1.0);
    let (e1, e2) = (v1 / n1, v2 / n2);
    let se2 = e1 + e2;
    let scale = m1.abs().max(m2.abs()).max(1.0);
    if se2 <= (1e-12 * scale).powi(2) {
        return Some(if (m1 - m2).abs() > 1e-12 * scale { 0.0 } else { 1.0 });
    }
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / (e1 * e1 / (n1 - 1.0) + e2 * e2 / (n2 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some((2.0 * dist.sf(t.abs())).min(1.0))
}

/// The feature chosen to refine one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitChoice {
    pub feature: FeatureId,
    pub action: usize,
    /// Weighted residual variance after the split.
    pub score: f64,
    /// Residual variance of `action` before the split.
    pub before: f64,
}

/// CART selection over the residuals of one class.
///
/// For every action, the samples are split by each candidate's presence in
/// `s_t`; the score is `p+ var(S+) + p- var(S-)`. The lowest score among
/// significant splits wins, ties going to the lower feature id.
pub fn select_feature(
    samples: &[ResidualSample],
    interactions: &[Interaction],
    candidates: &[FeatureId],
    mut exhibits: impl FnMut(FeatureId, PerceptId) -> bool,
    alpha: f64,
) -> Option<SplitChoice> {
    if candidates.is_empty() {
        return None;
    }
    let mut by_action: BTreeMap<usize, Vec<(f64, PerceptId)>> = BTreeMap::new();
    for s in samples {
        by_action
            .entry(s.action)
            .or_default()
            .push((s.delta, interactions[s.t].s));
    }
    let mut best: Option<SplitChoice> = None;
    let (mut plus, mut minus) = (Vec::new(), Vec::new());
    for (&action, group) in &by_action {
        if group.len() < 4 {
            continue;
        }
        let all: Vec<f64> = group.iter().map(|g| g.0).collect();
        let before = variance(&all);
        let n = group.len() as f64;
        for &f in candidates {
            plus.clear();
            minus.clear();
            for &(d, p) in group {
                if exhibits(f, p) {
                    plus.push(d);
                } else {
                    minus.push(d);
                }
            }
            if plus.is_empty() || minus.is_empty() {
                continue;
            }
            let score = plus.len() as f64 / n * variance(&plus) + minus.len() as f64 / n * variance(&minus);
            let better = best.is_none_or(|b| (score, f, action) < (b.score, b.feature, b.action));
            if better && welch_significant(&plus, &minus, alpha) {
                best = Some(SplitChoice {
                    feature: f,
                    action,
                    score,
                    before,
                });
            }
        }
    }
    best
}

/// Composite detection columns over the whole database.
#[derive(Debug, Default)]
struct DetectionCache {
    columns: HashMap<FeatureId, Vec<bool>>,
}

impl DetectionCache {
    fn ensure(
        &mut self,
        graph: &FeatureGraph,
        percepts: &[SymbolizedPercept],
        features: &[FeatureId],
        params: &CompositeParams,
    ) -> Result<(), FeatureError> {
        for &f in features {
            if graph.is_composite(f) && !self.columns.contains_key(&f) {
                let col = percepts
                    .iter()
                    .map(|p| graph.exhibits(f, p, params))
                    .collect::<Result<Vec<_>, _>>()?;
                self.columns.insert(f, col);
            }
        }
        Ok(())
    }

    /// Requires [`DetectionCache::ensure`] for composites.
    fn exhibits(&self, graph: &FeatureGraph, f: FeatureId, p: &SymbolizedPercept, pid: PerceptId) -> bool {
        match graph.get(f) {
            Ok(Feature::Primitive { symbol }) => p.has_symbol(*symbol),
            Ok(Feature::Composite(_)) => self.columns[&f][pid.index()],
            Err(_) => false,
        }
    }
}

/// A learned percept-to-action mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct RlvcModel {
    pub classifier: Classifier,
    pub graph: FeatureGraph,
    pub nu: f64,
    pub discount: f64,
    /// Class ids in dense-index order.
    pub class_ids: Vec<ClassId>,
    /// Optimal Q over the dense class indices.
    pub q: QFunction,
}

impl RlvcModel {
    pub fn n_classes(&self) -> usize {
        self.class_ids.len()
    }

    pub fn n_actions(&self) -> usize {
        self.q.n_actions()
    }

    pub fn classify(&self, p: &SymbolizedPercept) -> Result<ClassId, RlvcError> {
        let params = CompositeParams {
            nu: self.nu,
            ..CompositeParams::default()
        };
        Ok(self
            .classifier
            .classify_with(|f| self.graph.exhibits(f, p, &params))??)
    }

    pub fn class_index(&self, p: &SymbolizedPercept) -> Result<usize, RlvcError> {
        let c = self.classify(p)?;
        self.class_ids
            .binary_search(&c)
            .map_err(|_| RlvcError::Classifier(ClassifierError::UnknownClass(c)))
    }

    pub fn action(&self, p: &SymbolizedPercept) -> Result<usize, RlvcError> {
        Ok(self.q.best_action(self.class_index(p)?))
    }

    pub fn value(&self, p: &SymbolizedPercept) -> Result<f64, RlvcError> {
        Ok(self.q.max_value(self.class_index(p)?))
    }

    pub fn policy(&self) -> Policy {
        greedy_policy(&self.q)
    }

    /// Checkpoint text: header, scalars, then the feature graph, classifier
    /// and Q table as sections.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# rlvc model v1\n");
        let _ = writeln!(out, "nu {}", self.nu);
        let _ = writeln!(out, "discount {}", self.discount);
        let _ = writeln!(out, "actions {}", self.q.n_actions());
        out.push_str("[features]\n");
        out.push_str(&self.graph.to_text());
        out.push_str("[classifier]\n");
        out.push_str(&self.classifier.to_text());
        out.push_str("[q]\n");
        for (i, c) in self.class_ids.iter().enumerate() {
            let _ = write!(out, "{}", c.0);
            for a in 0..self.q.n_actions() {
                let _ = write!(out, " {}", self.q.get(i, a));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, RlvcError> {
        let perr = |line: usize, msg: &str| RlvcError::Parse {
            line,
            msg: msg.to_string(),
        };
        let mut sections: BTreeMap<&str, (usize, String)> = BTreeMap::new();
        let mut scalars: HashMap<&str, (usize, &str)> = HashMap::new();
        let mut current: Option<&str> = None;
        for (i, line) in text.lines().enumerate() {
            let ln = i + 1;
            let t = line.trim();
            if let Some(name) = t.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                if sections.insert(name, (ln + 1, String::new())).is_some() {
                    return Err(perr(ln, "duplicate section"));
                }
                current = Some(name);
                continue;
            }
            match current {
                Some(name) => {
                    let body = &mut sections.get_mut(name).expect("section exists").1;
                    body.push_str(line);
                    body.push('\n');
                }
                None if t.is_empty() || t.starts_with('#') => {}
                None => {
                    let (k, v) = t.split_once(' ').ok_or_else(|| perr(ln, "expected `key value`"))?;
                    scalars.insert(k, (ln, v.trim()));
                }
            }
        }
        let scalar = |k: &str| -> Result<f64, RlvcError> {
            let (ln, v) = scalars.get(k).ok_or_else(|| perr(1, &format!("missing `{k}`")))?;
            v.parse().map_err(|_| perr(*ln, &format!("bad `{k}`")))
        };
        let nu = scalar("nu")?;
        let discount = scalar("discount")?;
        let n_actions = scalar("actions")? as usize;
        let section = |name: &str| {
            sections
                .get(name)
                .ok_or_else(|| perr(1, &format!("missing [{name}] section")))
        };
        let graph = FeatureGraph::from_text(&section("features")?.1)?;
        let classifier = Classifier::from_text(&section("classifier")?.1)?;
        let (q_line, q_text) = section("q")?;
        let q_line = *q_line;
        let mut class_ids = Vec::new();
        let mut rows = Vec::new();
        for (i, line) in q_text.lines().enumerate() {
            let ln = q_line + i;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.is_empty() {
                continue;
            }
            if f.len() != n_actions + 1 {
                return Err(perr(ln, "wrong number of Q values"));
            }
            class_ids.push(ClassId(f[0].parse().map_err(|_| perr(ln, "bad class id"))?));
            rows.push(
                f[1..]
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|_| perr(ln, "bad Q value")))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        }
        if class_ids != classifier.class_ids() {
            return Err(perr(q_line, "Q table does not match the classifier's classes"));
        }
        let q = if rows.is_empty() {
            QFunction::zeros(0, n_actions)
        } else {
            QFunction::from_rows(&rows)
        };
        Ok(Self {
            classifier,
            graph,
            nu,
            discount,
            class_ids,
            q,
        })
    }
}

/// One row of the learning trace.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    /// `m_k`
    pub classes: usize,
    pub aliased: usize,
    pub splits: usize,
    pub merges: usize,
    pub composites_added: usize,
    pub classes_after: usize,
    /// Largest per-(class, action) residual variance under `C_k`.
    pub max_residual_variance: f64,
    pub learning_error: Option<f64>,
    pub test_error: Option<f64>,
    /// Features used to refine classes at this iteration.
    pub selected: Vec<FeatureId>,
}

pub const TRACE_HEADER: &str = "k,classes,aliased,splits,merges,composites_added,classes_after,max_residual_variance,learning_error,test_error,selected";

pub fn trace_to_csv(records: &[IterationRecord]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in records {
        let selected: Vec<String> = r.selected.iter().map(|f| f.0.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.k,
            r.classes,
            r.aliased,
            r.splits,
            r.merges,
            r.composites_added,
            r.classes_after,
            r.max_residual_variance,
            opt(r.learning_error),
            opt(r.test_error),
            selected.join(" ")
        );
    }
    out
}

/// Result of [`run_rlvc`].
#[derive(Debug, Clone)]
pub struct RlvcOutcome {
    pub model: RlvcModel,
    pub trace: Vec<IterationRecord>,
    /// Stopped because the classifier no longer changed, not at the cap.
    pub converged: bool,
    /// Largest per-(class, action) residual variance under the final model.
    pub final_max_variance: f64,
    pub tau: f64,
}

/// One structural change of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Change {
    Refine {
        class: ClassId,
        feature: FeatureId,
        present: ClassId,
        absent: ClassId,
    },
    Merge {
        first: ClassId,
        second: ClassId,
        merged: ClassId,
    },
    /// Variable reordering after a compaction phase.
    Reorder,
}

/// Per-iteration evaluation hook: receives the model of `C_k` and may fill
/// the error columns of the record.
pub trait Observer {
    fn observe(&mut self, model: &RlvcModel, record: &mut IterationRecord);

    /// Called after every refine, merge and reordering.
    fn changed(&mut self, _classifier: &Classifier, _change: Change) {}
}

impl<F: FnMut(&RlvcModel, &mut IterationRecord)> Observer for F {
    fn observe(&mut self, model: &RlvcModel, record: &mut IterationRecord) {
        self(model, record)
    }
}

struct Learner<'a> {
    data: &'a TrainingData,
    config: &'a RlvcConfig,
    graph: FeatureGraph,
    classifier: Classifier,
    cache: DetectionCache,
    /// Index of the first percept identical to each percept.
    canonical: Vec<usize>,
}

/// State of the data mapped through one classifier snapshot.
struct Snapshot {
    ids: Vec<ClassId>,
    /// Dense class index per percept.
    assignment: Vec<usize>,
    mapped: MappedMdp,
    /// Q over classes plus the sink.
    q: QFunction,
}

impl Snapshot {
    fn class_q(&self) -> QFunction {
        let rows: Vec<Vec<f64>> = (0..self.ids.len()).map(|i| self.q.row(i).to_vec()).collect();
        if rows.is_empty() {
            QFunction::zeros(0, self.q.n_actions())
        } else {
            QFunction::from_rows(&rows)
        }
    }
}

impl Learner<'_> {
    fn classify_all(&mut self) -> Result<(Vec<ClassId>, Vec<usize>), RlvcError> {
        let features = self.classifier.features();
        self.cache
            .ensure(&self.graph, &self.data.percepts, &features, &self.config.composite)?;
        let ids = self.classifier.class_ids();
        let mut assignment = Vec::with_capacity(self.data.percepts.len());
        for (i, p) in self.data.percepts.iter().enumerate() {
            let first = self.canonical[i];
            if first < i {
                let a = assignment[first];
                assignment.push(a);
                continue;
            }
            let pid = PerceptId(i as u32);
            let c = self
                .classifier
                .classify_with(|f| Ok::<_, ()>(self.cache.exhibits(&self.graph, f, p, pid)))
                .expect("cached detection is infallible")?;
            assignment.push(ids.binary_search(&c).expect("classifier returned a listed class"));
        }
        Ok((ids, assignment))
    }

    fn snapshot(&mut self) -> Result<Snapshot, RlvcError> {
        let (ids, assignment) = self.classify_all()?;
        solve_snapshot(self.data, self.config, ids, assignment)
    }

    fn model(&self, snap: &Snapshot) -> RlvcModel {
        RlvcModel {
            classifier: self.classifier.clone(),
            graph: self.graph.clone(),
            nu: self.config.composite.nu,
            discount: self.data.discount,
            class_ids: snap.ids.clone(),
            q: snap.class_q(),
        }
    }

    /// Primitive candidates of a class, most frequent among its samples first.
    fn primitive_candidates(&self, samples: &[ResidualSample]) -> Vec<FeatureId> {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for s in samples {
            for &sym in self.data.percepts[self.data.interactions[s.t].s.index()].symbols() {
                *counts.entry(sym).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut out: Vec<FeatureId> = ranked
            .into_iter()
            .filter_map(|(sym, _)| self.graph.primitive(sym))
            .take(self.config.candidate_cap)
            .collect();
        out.sort_unstable();
        out
    }

    /// Algorithm-6 style candidates for a class, evaluated on a scratch
    /// graph. Returns the selected composite inserted into the real graph.
    fn composite_split(
        &mut self,
        samples: &[ResidualSample],
    ) -> Result<Option<(SplitChoice, bool)>, RlvcError> {
        let mut percept_ids: Vec<PerceptId> = samples
            .iter()
            .map(|s| self.data.interactions[s.t].s)
            .collect();
        percept_ids.sort_unstable();
        percept_ids.dedup();
        let percepts: Vec<&SymbolizedPercept> = percept_ids
            .iter()
            .map(|p| &self.data.percepts[p.index()])
            .collect();
        let params = self.config.composite;
        let generated = self.graph.generate_composites(&percepts, &params)?;
        if generated.is_empty() {
            return Ok(None);
        }
        let mut scratch = self.graph.clone();
        let mut candidates = Vec::new();
        for c in &generated {
            let (id, _) = scratch.insert_composite(*c)?;
            candidates.push(id);
        }
        candidates.sort_unstable();
        candidates.dedup();
        let local: HashMap<PerceptId, usize> = percept_ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let mut columns: HashMap<FeatureId, Vec<bool>> = HashMap::new();
        for &f in &candidates {
            let col = percepts
                .iter()
                .map(|p| scratch.exhibits(f, p, &params))
                .collect::<Result<Vec<_>, _>>()?;
            columns.insert(f, col);
        }
        let choice = select_feature(
            samples,
            &self.data.interactions,
            &candidates,
            |f, p| columns[&f][local[&p]],
            self.config.alpha,
        );
        let Some(choice) = choice else {
            return Ok(None);
        };
        let Feature::Composite(c) = *scratch.get(choice.feature)? else {
            unreachable!("composite candidates are composites");
        };
        let (id, added) = self.graph.insert_composite(c)?;
        Ok(Some((SplitChoice { feature: id, ..choice }, added)))
    }

    /// Merges equivalent classes until none remain; returns the merge count.
    fn post_process(&mut self, mut snap: Snapshot, observer: &mut impl Observer) -> Result<(usize, Snapshot), RlvcError> {
        if !matches!(self.classifier, Classifier::Bdd(_)) {
            return Ok((0, snap));
        }
        let max_r = self.data.max_abs_reward();
        let spec = self.config.equivalence_for(max_r);
        let mut merges = 0;
        loop {
            let n = snap.ids.len();
            let q = snap.class_q();
            let v = optimal_values(&q);
            let pi = greedy_policy(&q);
            let all: Vec<usize> = (0..n).collect();
            let pairs = find_equivalent_pairs(&all, &v, &q, &pi, &spec, |i| snap.mapped.fully_observed(i));
            let Some(pair) = pairs.first() else { break };
            let (first, second) = (snap.ids[pair.first], snap.ids[pair.second]);
            let Classifier::Bdd(bdd) = &mut self.classifier else {
                unreachable!("checked above");
            };
            let merged = bdd.merge_deferred(first, second)?;
            observer.changed(&self.classifier, Change::Merge { first, second, merged });
            merges += 1;
            let ids = self.classifier.class_ids();
            let remap: Vec<usize> = snap
                .ids
                .iter()
                .map(|c| {
                    let c = if *c == first || *c == second {
                        merged
                    } else {
                        *c
                    };
                    ids.binary_search(&c).expect("surviving class")
                })
                .collect();
            let assignment = snap.assignment.iter().map(|&i| remap[i]).collect();
            snap = solve_snapshot(self.data, self.config, ids, assignment)?;
        }
        if let Classifier::Bdd(bdd) = &mut self.classifier {
            bdd.reorder_variables();
            observer.changed(&self.classifier, Change::Reorder);
        }
        Ok((merges, snap))
    }
}

fn solve_snapshot(
    data: &TrainingData,
    config: &RlvcConfig,
    ids: Vec<ClassId>,
    assignment: Vec<usize>,
) -> Result<Snapshot, RlvcError> {
    let mapped = estimate_mapped_mdp(
        &data.interactions,
        |p| assignment[p.index()],
        ids.len(),
        data.n_actions,
        data.discount,
    )?;
    let q = solve_optimal_q_with(mapped.mdp(), config.solver())?;
    Ok(Snapshot {
        ids,
        assignment,
        mapped,
        q,
    })
}

/// Maps each percept to the first one with the same points.
fn canonical_percepts(percepts: &[SymbolizedPercept]) -> Vec<usize> {
    let mut first: HashMap<Vec<(u64, u64, u32)>, usize> = HashMap::new();
    percepts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let key = p.points().iter().map(|q| (q.x.to_bits(), q.y.to_bits(), q.symbol)).collect();
            *first.entry(key).or_insert(i)
        })
        .collect()
}

fn max_variance(samples: &[ResidualSample], n_classes: usize, n_actions: usize) -> f64 {
    let mut groups = vec![Vec::new(); n_classes * n_actions];
    for s in samples {
        groups[s.class * n_actions + s.action].push(s.delta);
    }
    groups
        .iter()
        .filter(|g| g.len() >= 2)
        .map(|g| variance(g))
        .fold(0.0, f64::max)
}

/// Runs RLVC on a static database.
pub fn run_rlvc(data: &TrainingData, config: &RlvcConfig) -> Result<RlvcOutcome, RlvcError> {
    run_rlvc_observed(data, config, |_: &RlvcModel, _: &mut IterationRecord| {})
}

/// [`run_rlvc`] with a per-iteration evaluation hook.
pub fn run_rlvc_observed(
    data: &TrainingData,
    config: &RlvcConfig,
    mut observer: impl Observer,
) -> Result<RlvcOutcome, RlvcError> {
    config.validate()?;
    data.validate()?;
    let tau = config.tau_for(data.max_abs_reward());
    let mut learner = Learner {
        data,
        config,
        graph: FeatureGraph::with_primitives(data.n_symbols),
        classifier: Classifier::new(config.backend),
        cache: DetectionCache::default(),
        canonical: canonical_percepts(&data.percepts),
    };
    let mut trace = Vec::new();
    let mut converged = false;

    for k in 1..=config.max_iterations {
        let snap = learner.snapshot()?;
        let n = snap.ids.len();
        let res = residuals(&data.interactions, |p| snap.assignment[p.index()], &snap.q, data.discount);

        let mut by_class: Vec<Vec<ResidualSample>> = vec![Vec::new(); n];
        for s in &res {
            by_class[s.class].push(*s);
        }
        let mut aliased_classes: Vec<usize> = (0..n)
            .filter(|&v| {
                let mut per_action = vec![Vec::new(); data.n_actions];
                for s in &by_class[v] {
                    per_action[s.action].push(s.delta);
                }
                aliased(&per_action, tau)
            })
            .collect();
        aliased_classes.sort_by(|&a, &b| by_class[b].len().cmp(&by_class[a].len()).then(a.cmp(&b)));

        let mut record = IterationRecord {
            k,
            classes: n,
            aliased: aliased_classes.len(),
            splits: 0,
            merges: 0,
            composites_added: 0,
            classes_after: n,
            max_residual_variance: max_variance(&res, n, data.n_actions),
            learning_error: None,
            test_error: None,
            selected: Vec::new(),
        };
        observer.observe(&learner.model(&snap), &mut record);

        let mut splits = Vec::new();
        for &v in &aliased_classes {
            if splits.len() >= config.max_splits_per_iteration {
                break;
            }
            let samples = &by_class[v];
            let candidates = learner.primitive_candidates(samples);
            let choice = select_feature(
                samples,
                &data.interactions,
                &candidates,
                |f, p| learner.cache.exhibits(&learner.graph, f, &data.percepts[p.index()], p),
                config.alpha,
            );
            let choice = match choice {
                Some(c) => Some(c),
                None if config.composites => {
                    let found = learner.composite_split(samples)?;
                    if let Some((_, true)) = found {
                        record.composites_added += 1;
                    }
                    found.map(|(c, _)| c)
                }
                None => None,
            };
            if let Some(c) = choice {
                debug_assert!(c.score < c.before, "split does not reduce residual variance");
                splits.push((snap.ids[v], c.feature));
            }
        }
        for &(v, f) in &splits {
            let (present, absent) = learner.classifier.refine(v, f)?;
            observer.changed(
                &learner.classifier,
                Change::Refine {
                    class: v,
                    feature: f,
                    present,
                    absent,
                },
            );
            record.selected.push(f);
        }
        record.splits = splits.len();

        let compact = config.backend == Backend::Bdd && (splits.is_empty() || k % config.compaction_period == 0);
        if compact {
            let snap = learner.snapshot()?;
            let (merges, _) = learner.post_process(snap, &mut observer)?;
            record.merges = merges;
        }
        record.classes_after = learner.classifier.n_classes();
        trace.push(record);
        if splits.is_empty() {
            converged = true;
            break;
        }
    }

    let snap = learner.snapshot()?;
    let res = residuals(&data.interactions, |p| snap.assignment[p.index()], &snap.q, data.discount);
    let final_max_variance = max_variance(&res, snap.ids.len(), data.n_actions);
    Ok(RlvcOutcome {
        model: learner.model(&snap),
        trace,
        converged,
        final_max_variance,
        tau,
    })
}
