//! Finite Markov decision processes and their model-based solution.
//!
//! States and actions are dense indices. Terminal states are absorbing with
//! zero reward, so their state-action values are identically zero.
//!
//! [`estimate_mapped_mdp`] builds the MDP over visual classes from a database
//! of interactions by relative frequencies. The mapped MDP owns one extra
//! absorbing state that stands for "the episode ended".

use std::collections::BTreeMap;

use thiserror::Error;

/// Identifier of a percept inside an interaction database.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PerceptId(pub u32);

impl PerceptId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MdpError {
    #[error("discount factor {0} is outside [0, 1)")]
    InvalidDiscount(f64),
    #[error("state {state} out of range for an MDP with {n_states} states")]
    StateOutOfRange { state: usize, n_states: usize },
    #[error("action {action} out of range for an MDP with {n_actions} actions")]
    ActionOutOfRange { action: usize, n_actions: usize },
    #[error("transition row for ({state}, {action}) sums to {sum}, expected 1")]
    TransitionNotNormalized { state: usize, action: usize, sum: f64 },
    #[error("negative or non-finite probability {prob} in row ({state}, {action})")]
    InvalidProbability { state: usize, action: usize, prob: f64 },
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("value iteration did not converge after {sweeps} sweeps (residual {residual})")]
    NotConverged { sweeps: usize, residual: f64 },
    #[error("Q function has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
}

/// Tolerance on the sum of a transition row.
const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Default stopping tolerance of value iteration (sup-norm of successive sweeps).
pub const DEFAULT_TOLERANCE: f64 = 1e-9;
/// Default cap on the number of value-iteration sweeps.
pub const DEFAULT_MAX_SWEEPS: usize = 100_000;

/// A finite MDP `<S, A, T, R>` with discount factor.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    /// Sparse rows, indexed by `state * n_actions + action`, sorted by successor.
    transitions: Vec<Vec<(usize, f64)>>,
    rewards: Vec<f64>,
    terminal: Vec<bool>,
    discount: f64,
}

impl FiniteMdp {
    /// Creates an MDP in which every pair is a zero-reward self-loop.
    pub fn new(n_states: usize, n_actions: usize, discount: f64) -> Result<Self, MdpError> {
        if !(0.0..1.0).contains(&discount) {
            return Err(MdpError::InvalidDiscount(discount));
        }
        let mut transitions = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for _ in 0..n_actions {
                transitions.push(vec![(s, 1.0)]);
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transitions,
            rewards: vec![0.0; n_states * n_actions],
            terminal: vec![false; n_states],
            discount,
        })
    }

    /// Sets reward and successor distribution of one state-action pair.
    ///
    /// Duplicate successors in `distribution` are summed. Setting a row of a
    /// terminal state is accepted but has no effect on solving.
    pub fn set_transition(
        &mut self,
        state: usize,
        action: usize,
        reward: f64,
        distribution: &[(usize, f64)],
    ) -> Result<(), MdpError> {
        self.check_pair(state, action)?;
        if !reward.is_finite() {
            return Err(MdpError::NonFiniteReward(reward));
        }
        let mut row: BTreeMap<usize, f64> = BTreeMap::new();
        for &(next, prob) in distribution {
            if next >= self.n_states {
                return Err(MdpError::StateOutOfRange {
                    state: next,
                    n_states: self.n_states,
                });
            }
            if !prob.is_finite() || prob < 0.0 {
                return Err(MdpError::InvalidProbability { state, action, prob });
            }
            if prob > 0.0 {
                *row.entry(next).or_insert(0.0) += prob;
            }
        }
        let sum: f64 = row.values().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(MdpError::TransitionNotNormalized { state, action, sum });
        }
        let idx = state * self.n_actions + action;
        self.transitions[idx] = row.into_iter().collect();
        self.rewards[idx] = reward;
        Ok(())
    }

    /// Marks a state as absorbing with zero reward for every action.
    pub fn set_terminal(&mut self, state: usize) -> Result<(), MdpError> {
        if state >= self.n_states {
            return Err(MdpError::StateOutOfRange {
                state,
                n_states: self.n_states,
            });
        }
        self.terminal[state] = true;
        for a in 0..self.n_actions {
            let idx = state * self.n_actions + a;
            self.transitions[idx] = vec![(state, 1.0)];
            self.rewards[idx] = 0.0;
        }
        Ok(())
    }

    fn check_pair(&self, state: usize, action: usize) -> Result<(), MdpError> {
        if state >= self.n_states {
            return Err(MdpError::StateOutOfRange {
                state,
                n_states: self.n_states,
            });
        }
        if action >= self.n_actions {
            return Err(MdpError::ActionOutOfRange {
                action,
                n_actions: self.n_actions,
            });
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn is_terminal(&self, state: usize) -> bool {
        self.terminal[state]
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.rewards[state * self.n_actions + action]
    }

    /// Successor distribution of `(state, action)` as `(next, probability)` pairs.
    pub fn successors(&self, state: usize, action: usize) -> &[(usize, f64)] {
        &self.transitions[state * self.n_actions + action]
    }

    /// Probability `T(state, action, next)`.
    pub fn probability(&self, state: usize, action: usize, next: usize) -> f64 {
        self.successors(state, action)
            .iter()
            .find(|(s, _)| *s == next)
            .map_or(0.0, |(_, p)| *p)
    }
}

/// State-action value function, total over an `n_states x n_actions` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QFunction {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QFunction {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    /// Builds a Q function from row-major values (`values[s * n_actions + a]`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, Vec::len);
        assert!(
            rows.iter().all(|r| r.len() == n_actions),
            "ragged Q rows"
        );
        Self {
            n_states,
            n_actions,
            values: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, state: usize, action: usize) -> f64 {
        self.values[state * self.n_actions + action]
    }

    pub fn set(&mut self, state: usize, action: usize, value: f64) {
        self.values[state * self.n_actions + action] = value;
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.n_actions..(state + 1) * self.n_actions]
    }

    /// `max_a Q(state, a)`; zero when there are no actions.
    pub fn max_value(&self, state: usize) -> f64 {
        self.row(state)
            .iter()
            .copied()
            .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |m| m.max(v))))
            .unwrap_or(0.0)
    }

    /// Lowest-index maximizing action.
    pub fn best_action(&self, state: usize) -> usize {
        let row = self.row(state);
        let mut best = 0;
        for (a, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    /// Sup-norm distance to another Q function of the same shape.
    pub fn sup_distance(&self, other: &QFunction) -> f64 {
        assert_eq!(self.values.len(), other.values.len(), "Q shape mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// State value function.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction(pub Vec<f64>);

impl ValueFunction {
    pub fn get(&self, state: usize) -> f64 {
        self.0[state]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Deterministic policy: one action per state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Policy(pub Vec<usize>);

impl Policy {
    pub fn action(&self, state: usize) -> usize {
        self.0[state]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One step of experience `<s_t, a_t, r_{t+1}, s_{t+1}>`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub s: PerceptId,
    pub a: usize,
    pub r: f64,
    pub s_next: PerceptId,
    /// The successor is terminal: it contributes no future value.
    pub terminal_next: bool,
}

/// `sum_i discount^i * rewards[i]`.
pub fn discounted_return(rewards: &[f64], discount: f64) -> f64 {
    // Horner from the tail keeps the accumulation exact for short sequences.
    rewards.iter().rev().fold(0.0, |acc, &r| r + discount * acc)
}

/// The Bellman backup operator `H` on state-action value functions.
pub fn bellman_backup(q: &QFunction, mdp: &FiniteMdp) -> QFunction {
    assert_eq!(
        (q.n_states, q.n_actions),
        (mdp.n_states, mdp.n_actions),
        "Q function does not cover the MDP grid"
    );
    let maxes: Vec<f64> = (0..mdp.n_states)
        .map(|s| if mdp.terminal[s] { 0.0 } else { q.max_value(s) })
        .collect();
    let mut out = QFunction::zeros(mdp.n_states, mdp.n_actions);
    for s in 0..mdp.n_states {
        if mdp.terminal[s] {
            continue;
        }
        for a in 0..mdp.n_actions {
            let idx = s * mdp.n_actions + a;
            let future: f64 = mdp.transitions[idx]
                .iter()
                .map(|&(next, p)| p * maxes[next])
                .sum();
            out.values[idx] = mdp.rewards[idx] + mdp.discount * future;
        }
    }
    out
}

/// Stopping rule of value iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }
}

/// Value iteration from `Q = 0` until `||HQ - Q|| <= tolerance`.
pub fn solve_optimal_q(mdp: &FiniteMdp, tolerance: f64) -> Result<QFunction, MdpError> {
    solve_optimal_q_with(
        mdp,
        SolverConfig {
            tolerance,
            ..SolverConfig::default()
        },
    )
}

pub fn solve_optimal_q_with(mdp: &FiniteMdp, config: SolverConfig) -> Result<QFunction, MdpError> {
    if !(config.tolerance > 0.0) {
        return Err(MdpError::InvalidTolerance(config.tolerance));
    }
    let mut q = QFunction::zeros(mdp.n_states, mdp.n_actions);
    let mut residual = f64::INFINITY;
    for _ in 0..config.max_sweeps {
        let next = bellman_backup(&q, mdp);
        residual = next.sup_distance(&q);
        q = next;
        // ||H(HQ) - HQ|| <= gamma * ||HQ - Q|| <= tolerance
        if residual <= config.tolerance {
            return Ok(q);
        }
    }
    Err(MdpError::NotConverged {
        sweeps: config.max_sweeps,
        residual,
    })
}

pub fn greedy_policy(q: &QFunction) -> Policy {
    Policy((0..q.n_states).map(|s| q.best_action(s)).collect())
}

pub fn optimal_values(q: &QFunction) -> ValueFunction {
    ValueFunction((0..q.n_states).map(|s| q.max_value(s)).collect())
}

/// The MDP over visual classes estimated from a mapped interaction sequence.
///
/// States `0..n_classes` are the classes; state `n_classes` is the absorbing
/// sink reached by terminal transitions. Pairs that were never observed are
/// zero-reward self-loops and are reported by [`MappedMdp::is_observed`].
#[derive(Debug, Clone, PartialEq)]
pub struct MappedMdp {
    mdp: FiniteMdp,
    n_classes: usize,
    counts: Vec<usize>,
}

impl MappedMdp {
    pub fn mdp(&self) -> &FiniteMdp {
        &self.mdp
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Index of the absorbing end-of-episode state.
    pub fn terminal_state(&self) -> usize {
        self.n_classes
    }

    /// `eta(class, action)`.
    pub fn count(&self, class: usize, action: usize) -> usize {
        self.counts[class * self.mdp.n_actions + action]
    }

    pub fn is_observed(&self, class: usize, action: usize) -> bool {
        self.count(class, action) > 0
    }

    /// Every action of `class` has at least one sample.
    pub fn fully_observed(&self, class: usize) -> bool {
        (0..self.mdp.n_actions).all(|a| self.is_observed(class, a))
    }

    /// Number of interactions starting in `class`.
    pub fn class_count(&self, class: usize) -> usize {
        (0..self.mdp.n_actions).map(|a| self.count(class, a)).sum()
    }
}

/// Estimates the mapped MDP by relative frequencies.
///
/// `classify` maps a percept to its class index in `0..n_classes`.
pub fn estimate_mapped_mdp(
    interactions: &[Interaction],
    mut classify: impl FnMut(PerceptId) -> usize,
    n_classes: usize,
    n_actions: usize,
    discount: f64,
) -> Result<MappedMdp, MdpError> {
    let sink = n_classes;
    let mut mdp = FiniteMdp::new(n_classes + 1, n_actions, discount)?;
    mdp.set_terminal(sink)?;

    let n_pairs = n_classes * n_actions;
    let mut counts = vec![0usize; n_pairs];
    let mut reward_sums = vec![0.0f64; n_pairs];
    let mut successor_counts: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n_pairs];

    for it in interactions {
        if !it.r.is_finite() {
            return Err(MdpError::NonFiniteReward(it.r));
        }
        if it.a >= n_actions {
            return Err(MdpError::ActionOutOfRange {
                action: it.a,
                n_actions,
            });
        }
        let v = classify(it.s);
        if v >= n_classes {
            return Err(MdpError::StateOutOfRange {
                state: v,
                n_states: n_classes,
            });
        }
        let next = if it.terminal_next {
            sink
        } else {
            let w = classify(it.s_next);
            if w >= n_classes {
                return Err(MdpError::StateOutOfRange {
                    state: w,
                    n_states: n_classes,
                });
            }
            w
        };
        let idx = v * n_actions + it.a;
        counts[idx] += 1;
        reward_sums[idx] += it.r;
        *successor_counts[idx].entry(next).or_insert(0) += 1;
    }

    for v in 0..n_classes {
        for a in 0..n_actions {
            let idx = v * n_actions + a;
            let eta = counts[idx];
            if eta == 0 {
                continue;
            }
            let dist: Vec<(usize, f64)> = successor_counts[idx]
                .iter()
                .map(|(&next, &c)| (next, c as f64 / eta as f64))
                .collect();
            mdp.set_transition(v, a, reward_sums[idx] / eta as f64, &dist)?;
        }
    }

    Ok(MappedMdp {
        mdp,
        n_classes,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn it(s: u32, a: usize, r: f64, s_next: u32, terminal_next: bool) -> Interaction {
        Interaction {
            s: PerceptId(s),
            a,
            r,
            s_next: PerceptId(s_next),
            terminal_next,
        }
    }

    #[test]
    fn discounted_return_examples() {
        assert_eq!(discounted_return(&[], 0.9), 0.0);
        assert_eq!(discounted_return(&[100.0], 0.9), 100.0);
        let ones = vec![1.0; 50];
        let closed_form = 2.0 * (1.0 - 0.5f64.powi(50));
        assert_relative_eq!(discounted_return(&ones, 0.5), closed_form, epsilon = 1e-15);
    }

    #[test]
    fn backup_of_zero_is_reward() {
        let mut mdp = FiniteMdp::new(2, 2, 0.9).unwrap();
        assert_eq!(bellman_backup(&QFunction::zeros(2, 2), &mdp), QFunction::zeros(2, 2));
        for s in 0..2 {
            for a in 0..2 {
                mdp.set_transition(s, a, 7.0, &[(1 - s, 1.0)]).unwrap();
            }
        }
        let hq = bellman_backup(&QFunction::zeros(2, 2), &mdp);
        assert!(hq.values().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn backup_hand_evaluation() {
        // s=0 splits evenly to u=1 (max 10) and v=2 (max 20).
        let mut mdp = FiniteMdp::new(3, 2, 0.5).unwrap();
        mdp.set_transition(0, 0, 1.0, &[(1, 0.5), (2, 0.5)]).unwrap();
        let q = QFunction::from_rows(&[vec![0.0, 0.0], vec![10.0, 3.0], vec![-1.0, 20.0]]);
        let hq = bellman_backup(&q, &mdp);
        assert_relative_eq!(hq.get(0, 0), 8.5, epsilon = 1e-12);
    }

    #[test]
    fn terminal_rows_back_up_to_zero() {
        let mut mdp = FiniteMdp::new(2, 1, 0.9).unwrap();
        mdp.set_transition(0, 0, 100.0, &[(1, 1.0)]).unwrap();
        mdp.set_terminal(1).unwrap();
        let q = QFunction::from_rows(&[vec![5.0], vec![42.0]]);
        let hq = bellman_backup(&q, &mdp);
        assert_eq!(hq.get(1, 0), 0.0);
        assert_eq!(hq.get(0, 0), 100.0);
    }

    #[test]
    fn solver_examples() {
        let mut single = FiniteMdp::new(1, 2, 0.9).unwrap();
        single.set_terminal(0).unwrap();
        let q = solve_optimal_q(&single, 1e-9).unwrap();
        assert!(q.values().iter().all(|&v| v == 0.0));

        let mut chain = FiniteMdp::new(2, 1, 0.9).unwrap();
        chain.set_transition(0, 0, 100.0, &[(1, 1.0)]).unwrap();
        chain.set_terminal(1).unwrap();
        let q = solve_optimal_q(&chain, 1e-9).unwrap();
        assert_eq!(q.get(0, 0), 100.0);
        assert_eq!(greedy_policy(&q).action(0), 0);
        assert_eq!(optimal_values(&q).get(0), 100.0);

        let mut selfloop = FiniteMdp::new(1, 1, 0.5).unwrap();
        selfloop.set_transition(0, 0, 1.0, &[(0, 1.0)]).unwrap();
        let q = solve_optimal_q(&selfloop, 1e-12).unwrap();
        assert_relative_eq!(q.get(0, 0), 2.0, epsilon = 1e-11);
    }

    #[test]
    fn solver_rejects_bad_tolerance_and_reports_cap() {
        let mut selfloop = FiniteMdp::new(1, 1, 0.99).unwrap();
        selfloop.set_transition(0, 0, 1.0, &[(0, 1.0)]).unwrap();
        assert_eq!(
            solve_optimal_q(&selfloop, 0.0),
            Err(MdpError::InvalidTolerance(0.0))
        );
        let err = solve_optimal_q_with(
            &selfloop,
            SolverConfig {
                tolerance: 1e-9,
                max_sweeps: 3,
            },
        )
        .unwrap_err();
        assert!(matches!(err, MdpError::NotConverged { sweeps: 3, .. }));
    }

    #[test]
    fn greedy_and_values() {
        let q = QFunction::from_rows(&[vec![1.0, 0.0], vec![2.0, 2.0], vec![3.0, 5.0]]);
        let pi = greedy_policy(&q);
        assert_eq!(pi.0, vec![0, 0, 1]);
        assert_eq!(optimal_values(&q).0, vec![1.0, 2.0, 5.0]);
        let zero = QFunction::zeros(3, 2);
        assert_eq!(optimal_values(&zero).0, vec![0.0; 3]);
    }

    #[test]
    fn invalid_mdps_are_rejected() {
        assert_eq!(FiniteMdp::new(1, 1, 1.0), Err(MdpError::InvalidDiscount(1.0)));
        let mut mdp = FiniteMdp::new(2, 1, 0.5).unwrap();
        assert!(matches!(
            mdp.set_transition(0, 0, 0.0, &[(0, 0.5), (1, 0.4)]),
            Err(MdpError::TransitionNotNormalized { .. })
        ));
        assert!(matches!(
            mdp.set_transition(0, 0, 0.0, &[(0, 1.5), (1, -0.5)]),
            Err(MdpError::InvalidProbability { .. })
        ));
        assert!(matches!(
            mdp.set_transition(0, 1, 0.0, &[(0, 1.0)]),
            Err(MdpError::ActionOutOfRange { .. })
        ));
        assert!(matches!(
            mdp.set_transition(0, 0, f64::NAN, &[(0, 1.0)]),
            Err(MdpError::NonFiniteReward(_))
        ));
    }

    #[test]
    fn mapped_mdp_single_interaction() {
        let m = estimate_mapped_mdp(&[it(0, 0, 5.0, 1, false)], |p| p.index(), 2, 2, 0.9).unwrap();
        assert_eq!(m.mdp().probability(0, 0, 1), 1.0);
        assert_eq!(m.mdp().reward(0, 0), 5.0);
        assert_eq!(m.count(0, 0), 1);
        assert!(!m.is_observed(0, 1));
        // unobserved pair: zero-reward self loop
        assert_eq!(m.mdp().successors(0, 1), &[(0, 1.0)]);
        assert_eq!(m.mdp().reward(0, 1), 0.0);
    }

    #[test]
    fn mapped_mdp_relative_frequencies() {
        // class 0 = V, class 1 = W
        let db = [it(0, 0, 0.0, 0, false), it(0, 0, 10.0, 1, false)];
        let m = estimate_mapped_mdp(&db, |p| p.index(), 2, 1, 0.9).unwrap();
        assert_eq!(m.mdp().probability(0, 0, 0), 0.5);
        assert_eq!(m.mdp().probability(0, 0, 1), 0.5);
        assert_eq!(m.mdp().reward(0, 0), 5.0);
        assert_eq!(m.count(0, 0), 2);
    }

    #[test]
    fn mapped_mdp_routes_terminal_to_sink() {
        let db = [it(0, 0, 100.0, 7, true)];
        let m = estimate_mapped_mdp(&db, |_| 0, 1, 1, 0.9).unwrap();
        assert_eq!(m.mdp().probability(0, 0, m.terminal_state()), 1.0);
        assert!(m.mdp().is_terminal(m.terminal_state()));
        let q = solve_optimal_q(m.mdp(), 1e-9).unwrap();
        assert_eq!(q.get(0, 0), 100.0);
    }
}
