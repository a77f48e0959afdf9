//! Navigation on a small campus graph: 11 spots, 4 orientations each.
//!
//! The agent sees only a picture of what it faces. Every state owns a pool
//! of pictures generated from a base symbol set with dropout, borrowed
//! symbols from the other views of the same spot, and shared clutter.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, Transition};
use crate::mdp::{FiniteMdp, PerceptId};
use crate::percept::{jitter, FeatureDictionary, InterestPoint, Percept};

pub const ACTIONS: [&str; 3] = ["left", "right", "forward"];
pub const N_SPOTS: usize = 11;
pub const N_STATES: usize = N_SPOTS * 4;

/// Spot and orientation (0 north, 1 east, 2 south, 3 west).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CampusState {
    pub spot: usize,
    pub orientation: usize,
}

impl CampusState {
    pub fn index(self) -> usize {
        self.spot * 4 + self.orientation
    }

    pub fn from_index(i: usize) -> Self {
        Self {
            spot: i / 4,
            orientation: i % 4,
        }
    }
}

/// Directed moves `(from, orientation, to)`.
///
/// ```text
///  7 - 8 - 9 -10        north is up; the goal building lies north of 9
///  |   |       |
///  4 - 5       6
///  |   |       |
///  0 - 1 - 2 - 3
/// ```
const EDGES: [(usize, usize, usize); 26] = [
    (0, 1, 1), (1, 3, 0), (1, 1, 2), (2, 3, 1), (2, 1, 3), (3, 3, 2),
    (0, 0, 4), (4, 2, 0), (4, 0, 7), (7, 2, 4), (1, 0, 5), (5, 2, 1),
    (5, 0, 8), (8, 2, 5), (3, 0, 6), (6, 2, 3), (6, 0, 10), (10, 2, 6),
    (7, 1, 8), (8, 3, 7), (8, 1, 9), (9, 3, 8), (9, 1, 10), (10, 3, 9),
    (4, 1, 5), (5, 3, 4),
];

/// Facing this way from this spot, going forward enters the goal building.
pub const GOAL: CampusState = CampusState {
    spot: 9,
    orientation: 0,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pool {
    Learning,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampusConfig {
    pub learning_pool: usize,
    pub test_pool: usize,
    /// Symbols that characterize one view.
    pub base_symbols: usize,
    /// Probability that a base symbol is missing from a picture.
    pub dropout: f64,
    /// Symbols borrowed from another view of the same spot, per picture.
    pub borrowed: usize,
    /// Shared clutter symbols, and how many appear per picture.
    pub clutter_symbols: usize,
    pub clutter_per_picture: usize,
    pub descriptor_dim: usize,
    pub match_threshold: f64,
    pub descriptor_noise: f64,
    pub frame: (f64, f64),
    pub goal_reward: f64,
    pub turn_reward: f64,
    pub forward_reward: f64,
    pub discount: f64,
    pub max_episode_length: Option<usize>,
}

impl Default for CampusConfig {
    fn default() -> Self {
        Self {
            learning_pool: 18,
            test_pool: 6,
            base_symbols: 8,
            dropout: 0.15,
            borrowed: 2,
            clutter_symbols: 48,
            clutter_per_picture: 3,
            descriptor_dim: 8,
            match_threshold: 1.0,
            descriptor_noise: 0.4,
            frame: (320.0, 240.0),
            goal_reward: 100.0,
            turn_reward: -5.0,
            forward_reward: -10.0,
            discount: 0.8,
            max_episode_length: None,
        }
    }
}

impl CampusConfig {
    fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if self.learning_pool == 0 || self.test_pool == 0 || self.base_symbols == 0 {
            return bad("pools and base sets must be nonempty");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.clutter_per_picture > self.clutter_symbols {
            return bad("clutter_per_picture exceeds clutter_symbols");
        }
        if !(self.descriptor_noise >= 0.0 && self.descriptor_noise < self.match_threshold / 2.0) {
            return bad("descriptor_noise must lie in [0, match_threshold / 2)");
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Campus {
    config: CampusConfig,
    dictionary: FeatureDictionary,
    learning: Vec<Vec<Percept>>,
    test: Vec<Vec<Percept>>,
}

impl Campus {
    pub fn new(config: &CampusConfig, seed: u64) -> Result<Self, EnvError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_base = N_STATES * config.base_symbols;
        let dictionary = FeatureDictionary::random(
            n_base + config.clutter_symbols,
            config.descriptor_dim,
            config.match_threshold,
            &mut rng,
        )?;
        let mut campus = Self {
            config: config.clone(),
            dictionary,
            learning: Vec::new(),
            test: Vec::new(),
        };
        for s in 0..N_STATES {
            let learning = (0..config.learning_pool).map(|_| campus.picture(s, &mut rng)).collect();
            let test = (0..config.test_pool).map(|_| campus.picture(s, &mut rng)).collect();
            campus.learning.push(learning);
            campus.test.push(test);
        }
        Ok(campus)
    }

    fn base(&self, state: usize) -> std::ops::Range<u32> {
        let k = self.config.base_symbols as u32;
        state as u32 * k..(state as u32 + 1) * k
    }

    fn picture(&self, state: usize, rng: &mut ChaCha8Rng) -> Percept {
        let c = &self.config;
        let mut symbols: Vec<u32> = self.base(state).filter(|_| !rng.random_bool(c.dropout)).collect();
        let spot = state / 4;
        let other = spot * 4 + (state % 4 + rng.random_range(1..4)) % 4;
        let borrowed: Vec<u32> = self.base(other).collect();
        symbols.extend(borrowed.choose_multiple(rng, c.borrowed.min(borrowed.len())).copied());
        let clutter: Vec<u32> = (0..c.clutter_symbols as u32)
            .map(|i| (N_STATES * c.base_symbols) as u32 + i)
            .collect();
        symbols.extend(clutter.choose_multiple(rng, c.clutter_per_picture).copied());
        let points = symbols
            .into_iter()
            .map(|sym| InterestPoint {
                x: rng.random_range(0.0..c.frame.0),
                y: rng.random_range(0.0..c.frame.1),
                descriptor: jitter(
                    self.dictionary.prototype(sym).expect("symbol in dictionary"),
                    c.descriptor_noise,
                    rng,
                ),
            })
            .collect();
        Percept {
            id: PerceptId(0),
            width: c.frame.0,
            height: c.frame.1,
            points,
        }
    }

    pub fn config(&self) -> &CampusConfig {
        &self.config
    }

    pub fn pool(&self, s: CampusState, pool: Pool) -> &[Percept] {
        match pool {
            Pool::Learning => &self.learning[s.index()],
            Pool::Test => &self.test[s.index()],
        }
    }

    /// A uniformly drawn picture of `s` from the selected pool.
    pub fn campus_percept(&self, s: CampusState, pool: Pool, id: PerceptId, rng: &mut ChaCha8Rng) -> Percept {
        let pictures = self.pool(s, pool);
        let mut p = pictures[rng.random_range(0..pictures.len())].clone();
        p.id = id;
        p
    }

    pub fn forward_target(s: CampusState) -> Option<usize> {
        EDGES
            .iter()
            .find(|&&(from, o, _)| from == s.spot && o == s.orientation)
            .map(|&(_, _, to)| to)
    }

    /// Deterministic transition function.
    pub fn campus_step(&self, s: CampusState, a: usize) -> Transition<CampusState> {
        let c = &self.config;
        let turn = |o: usize| Transition {
            next: CampusState {
                spot: s.spot,
                orientation: o,
            },
            reward: c.turn_reward,
            terminal: false,
        };
        match a {
            0 => turn((s.orientation + 3) % 4),
            1 => turn((s.orientation + 1) % 4),
            _ if s == GOAL => Transition {
                next: s,
                reward: c.goal_reward,
                terminal: true,
            },
            _ => Transition {
                next: Self::forward_target(s).map_or(s, |spot| CampusState {
                    spot,
                    orientation: s.orientation,
                }),
                reward: c.forward_reward,
                terminal: false,
            },
        }
    }

    /// The true MDP over the 44 states.
    pub fn true_mdp(&self) -> FiniteMdp {
        let mut mdp = FiniteMdp::new(N_STATES + 1, 3, self.config.discount).expect("valid discount");
        let sink = N_STATES;
        mdp.set_terminal(sink).expect("sink in range");
        for i in 0..N_STATES {
            for a in 0..3 {
                let t = self.campus_step(CampusState::from_index(i), a);
                let next = if t.terminal { sink } else { t.next.index() };
                mdp.set_transition(i, a, t.reward, &[(next, 1.0)])
                    .expect("deterministic row");
            }
        }
        mdp
    }
}

impl Environment for Campus {
    type State = CampusState;

    fn n_actions(&self) -> usize {
        3
    }

    fn action_names(&self) -> &'static [&'static str] {
        &ACTIONS
    }

    fn discount(&self) -> f64 {
        self.config.discount
    }

    fn max_abs_reward(&self) -> f64 {
        let c = &self.config;
        c.goal_reward.abs().max(c.turn_reward.abs()).max(c.forward_reward.abs())
    }

    fn dictionary(&self) -> &FeatureDictionary {
        &self.dictionary
    }

    fn sample_start(&self, rng: &mut ChaCha8Rng) -> CampusState {
        CampusState::from_index(rng.random_range(0..N_STATES))
    }

    fn step(&self, s: &CampusState, a: usize, _rng: &mut ChaCha8Rng) -> Transition<CampusState> {
        self.campus_step(*s, a)
    }

    fn percept(&self, s: &CampusState, id: PerceptId, rng: &mut ChaCha8Rng) -> Percept {
        self.campus_percept(*s, Pool::Learning, id, rng)
    }

    fn coords(&self, s: &CampusState) -> Vec<f64> {
        vec![s.index() as f64]
    }

    fn max_episode_length(&self) -> Option<usize> {
        self.config.max_episode_length
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{greedy_policy, optimal_values, solve_optimal_q};

    fn campus() -> Campus {
        Campus::new(&CampusConfig::default(), 11).unwrap()
    }

    #[test]
    fn turns_and_blocked_moves() {
        let c = campus();
        let north = CampusState { spot: 0, orientation: 0 };
        let t = c.campus_step(north, 0);
        assert_eq!(t.next, CampusState { spot: 0, orientation: 3 });
        assert_eq!(t.reward, -5.0);
        // facing west from spot 0: no edge
        let west = CampusState { spot: 0, orientation: 3 };
        let t = c.campus_step(west, 2);
        assert_eq!(t.next, west);
        assert_eq!(t.reward, -10.0);
        let t = c.campus_step(GOAL, 2);
        assert_eq!((t.reward, t.terminal), (100.0, true));
        let t = c.campus_step(north, 2);
        assert_eq!(t.next, CampusState { spot: 4, orientation: 0 });
    }

    #[test]
    fn pools_have_the_configured_sizes() {
        let c = campus();
        for i in 0..N_STATES {
            let s = CampusState::from_index(i);
            assert_eq!(c.pool(s, Pool::Learning).len(), 18);
            assert_eq!(c.pool(s, Pool::Test).len(), 6);
        }
    }

    #[test]
    fn states_have_distinct_base_sets() {
        let c = campus();
        for a in 0..N_STATES {
            for b in a + 1..N_STATES {
                let (ra, rb) = (c.base(a), c.base(b));
                assert!(ra.end <= rb.start || rb.end <= ra.start);
            }
        }
        // every picture keeps most of its own base symbols on average
        let s = CampusState::from_index(5);
        let base = c.base(5);
        let kept: usize = c
            .pool(s, Pool::Learning)
            .iter()
            .map(|p| {
                let sp = c.dictionary().symbolize(p).unwrap();
                base.clone().filter(|&b| sp.has_symbol(b)).count()
            })
            .sum();
        assert!(kept as f64 / 18.0 > 3.0);
    }

    #[test]
    fn every_state_reaches_the_goal() {
        let c = campus();
        let q = solve_optimal_q(&c.true_mdp(), 1e-9).unwrap();
        let v = optimal_values(&q);
        assert_eq!(v.get(GOAL.index()), 100.0);
        for i in 0..N_STATES {
            assert!(v.get(i) > -50.0, "state {i} cannot reach the goal");
        }
        assert_eq!(greedy_policy(&q).action(GOAL.index()), 2);
    }
}
