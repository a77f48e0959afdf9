use serde::{Deserialize, Serialize};

use crate::mdp::{Policy, QFunction, ValueFunction};

/// Which relations must hold for two classes to be considered equivalent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EquivalenceSpec {
    pub epsilon: f64,
    /// `|V*(V) - V*(V')| <= eps`
    pub value: bool,
    /// `|V*(V) - Q*(V', pi*(V))| <= eps` in both directions
    pub policy: bool,
    /// `|Q*(V, a) - Q*(V', a)| <= eps` for every action
    pub state_action: bool,
}

impl Default for EquivalenceSpec {
    fn default() -> Self {
        Self {
            epsilon: 0.0,
            value: true,
            policy: true,
            state_action: false,
        }
    }
}

impl EquivalenceSpec {
    /// Default relations with `eps = 0.05 * max |r|`.
    pub fn for_reward_scale(max_abs_reward: f64) -> Self {
        Self {
            epsilon: 0.05 * max_abs_reward,
            ..Self::default()
        }
    }

    pub fn holds(&self, i: usize, j: usize, v: &ValueFunction, q: &QFunction, pi: &Policy) -> bool {
        let eps = self.epsilon;
        if self.value && (v.get(i) - v.get(j)).abs() > eps {
            return false;
        }
        if self.policy
            && ((v.get(i) - q.get(j, pi.action(i))).abs() > eps
                || (v.get(j) - q.get(i, pi.action(j))).abs() > eps)
        {
            return false;
        }
        if self.state_action && (0..q.n_actions()).any(|a| (q.get(i, a) - q.get(j, a)).abs() > eps) {
            return false;
        }
        true
    }
}

/// An unordered pair of class indices, `first < second`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalentPair {
    pub first: usize,
    pub second: usize,
    /// `|V*(first) - V*(second)|`
    pub gap: f64,
}

/// All pairs among `candidates` satisfying `spec`, sorted by ascending value
/// gap then by indices. `eligible(i)` filters out classes whose Q row is not
/// fully backed by observations.
pub fn find_equivalent_pairs(
    candidates: &[usize],
    v: &ValueFunction,
    q: &QFunction,
    pi: &Policy,
    spec: &EquivalenceSpec,
    eligible: impl Fn(usize) -> bool,
) -> Vec<EquivalentPair> {
    let live: Vec<usize> = candidates.iter().copied().filter(|&i| eligible(i)).collect();
    let mut out = Vec::new();
    for (n, &i) in live.iter().enumerate() {
        for &j in &live[n + 1..] {
            if spec.holds(i, j, v, q, pi) {
                let (first, second) = if i < j { (i, j) } else { (j, i) };
                out.push(EquivalentPair {
                    first,
                    second,
                    gap: (v.get(i) - v.get(j)).abs(),
                });
            }
        }
    }
    out.sort_by(|a, b| {
        a.gap
            .total_cmp(&b.gap)
            .then(a.first.cmp(&b.first))
            .then(a.second.cmp(&b.second))
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{greedy_policy, optimal_values};

    fn all(q: &QFunction, spec: &EquivalenceSpec) -> Vec<(usize, usize)> {
        let v = optimal_values(q);
        let pi = greedy_policy(q);
        let ids: Vec<usize> = (0..q.n_states()).collect();
        find_equivalent_pairs(&ids, &v, q, &pi, spec, |_| true)
            .into_iter()
            .map(|p| (p.first, p.second))
            .collect()
    }

    #[test]
    fn identical_rows_match_under_every_relation() {
        let q = QFunction::from_rows(&[vec![3.0, 1.0], vec![3.0, 1.0]]);
        for (value, policy, state_action) in [(true, false, false), (false, true, false), (false, false, true)] {
            let spec = EquivalenceSpec {
                epsilon: 0.0,
                value,
                policy,
                state_action,
            };
            assert_eq!(all(&q, &spec), vec![(0, 1)]);
        }
    }

    #[test]
    fn value_gap_beyond_epsilon_is_rejected() {
        let q = QFunction::from_rows(&[vec![10.0], vec![5.0]]);
        let spec = EquivalenceSpec {
            epsilon: 1.0,
            value: true,
            policy: false,
            state_action: false,
        };
        assert!(all(&q, &spec).is_empty());
    }

    #[test]
    fn value_and_policy_example() {
        // V*(V)=10, V*(V')=10.4, Q*(V', pi(V))=9.8, Q*(V, pi(V'))=9.9
        let q = QFunction::from_rows(&[vec![10.0, 9.9], vec![9.8, 10.4]]);
        let spec = EquivalenceSpec {
            epsilon: 0.5,
            ..EquivalenceSpec::default()
        };
        assert_eq!(all(&q, &spec), vec![(0, 1)]);
        let tight = EquivalenceSpec {
            epsilon: 0.15,
            ..spec
        };
        assert!(all(&q, &tight).is_empty());
    }

    #[test]
    fn ineligible_classes_are_never_matched() {
        let q = QFunction::from_rows(&[vec![0.0], vec![0.0], vec![0.0]]);
        let v = optimal_values(&q);
        let pi = greedy_policy(&q);
        let pairs = find_equivalent_pairs(&[0, 1, 2], &v, &q, &pi, &EquivalenceSpec::default(), |i| i != 1);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].first, pairs[0].second), (0, 2));
    }

    #[test]
    fn pairs_are_sorted_by_gap() {
        let q = QFunction::from_rows(&[vec![0.0], vec![0.3], vec![0.1]]);
        let spec = EquivalenceSpec {
            epsilon: 1.0,
            ..EquivalenceSpec::default()
        };
        assert_eq!(all(&q, &spec), vec![(0, 2), (1, 2), (0, 1)]);
    }
}
