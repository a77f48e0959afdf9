//! Continuous noisy navigation in a square maze with glass walls.
//!
//! The ground is a tapestry of interest points; the agent sees the square
//! window of it centred on its position. Walls block motion but not sight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EnvError, Environment, Tapestry, Transition};
use crate::mdp::PerceptId;
use crate::percept::{jitter, FeatureDictionary, InterestPoint, Percept, SymbolPoint, SymbolizedPercept};

pub const ACTIONS: [&str; 4] = ["up", "right", "down", "left"];
const DIRECTIONS: [(f64, f64); 4] = [(0.0, 1.0), (1.0, 0.0), (0.0, -1.0), (-1.0, 0.0)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MazeConfig {
    /// Side of the square maze, in image units.
    pub size: f64,
    pub move_step: f64,
    /// Standard deviation of the move noise as a fraction of `size`.
    pub noise_fraction: f64,
    /// Side of the square sensor window.
    pub sensor_window: f64,
    pub n_symbols: usize,
    pub descriptor_dim: usize,
    pub match_threshold: f64,
    /// Bound on the norm of descriptor jitter; below half the threshold.
    pub descriptor_noise: f64,
    pub point_dropout: f64,
    /// Minimum spacing of tapestry points.
    pub point_spacing: f64,
    pub discount: f64,
    pub exit_reward: f64,
    /// Segments `[x0, y0, x1, y1]`.
    pub walls: Vec<[f64; 4]>,
    /// Rectangles `[x0, y0, x1, y1]`.
    pub exits: Vec<[f64; 4]>,
    /// Exploration episodes restart after this many steps.
    pub max_episode_length: Option<usize>,
}

impl Default for MazeConfig {
    fn default() -> Self {
        Self {
            size: 640.0,
            move_step: 64.0,
            noise_fraction: 0.02,
            sensor_window: 160.0,
            n_symbols: 400,
            descriptor_dim: 8,
            match_threshold: 1.0,
            descriptor_noise: 0.4,
            point_dropout: 0.0,
            point_spacing: 36.0,
            discount: 0.9,
            exit_reward: 100.0,
            walls: vec![[213.0, 0.0, 213.0, 427.0], [427.0, 213.0, 427.0, 640.0]],
            exits: vec![[0.0, 560.0, 80.0, 640.0], [560.0, 0.0, 640.0, 80.0]],
            max_episode_length: Some(50),
        }
    }
}

impl MazeConfig {
    fn validate(&self) -> Result<(), EnvError> {
        let bad = |m: &str| Err(EnvError::Config(m.to_string()));
        if !(self.size > 0.0 && self.move_step > 0.0 && self.sensor_window > 0.0 && self.point_spacing > 0.0) {
            return bad("maze lengths must be positive");
        }
        if !(self.noise_fraction >= 0.0) {
            return bad("noise_fraction must be >= 0");
        }
        if !(0.0..1.0).contains(&self.discount) {
            return bad("discount must lie in [0, 1)");
        }
        if !(self.descriptor_noise >= 0.0 && self.descriptor_noise < self.match_threshold / 2.0) {
            return bad("descriptor_noise must lie in [0, match_threshold / 2)");
        }
        if !(0.0..1.0).contains(&self.point_dropout) {
            return bad("point_dropout must lie in [0, 1)");
        }
        if self.n_symbols == 0 || self.descriptor_dim == 0 {
            return bad("dictionary must be nonempty");
        }
        if self.exits.is_empty() {
            return bad("at least one exit is required");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Maze {
    config: MazeConfig,
    dictionary: FeatureDictionary,
    tapestry: Tapestry,
    noise: Option<Normal<f64>>,
}

const MAX_ATTEMPTS: usize = 50;

impl Maze {
    /// Generates the dictionary and tapestry. Layouts where some window sees
    /// fewer than three points, or where one percept signature spans too much
    /// ground, are redrawn.
    pub fn new(config: &MazeConfig, seed: u64) -> Result<Self, EnvError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dictionary = FeatureDictionary::random(
            config.n_symbols,
            config.descriptor_dim,
            config.match_threshold,
            &mut rng,
        )?;
        let sigma = config.noise_fraction * config.size;
        let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("finite sigma"));
        let half = config.sensor_window / 2.0;
        for _ in 0..MAX_ATTEMPTS {
            let tapestry = Tapestry::poisson(
                (-half, -half, config.size + half, config.size + half),
                config.point_spacing,
                0..config.n_symbols as u32,
                &mut rng,
            );
            let maze = Self {
                config: config.clone(),
                dictionary: dictionary.clone(),
                tapestry,
                noise,
            };
            if maze.layout_is_observable() {
                return Ok(maze);
            }
        }
        Err(EnvError::Generation(MAX_ATTEMPTS))
    }

    fn layout_is_observable(&self) -> bool {
        let c = &self.config;
        let step = c.move_step / 4.0;
        let n = (c.size / step).floor() as usize;
        let mut signatures: std::collections::HashMap<Vec<u32>, (f64, f64, f64, f64)> =
            std::collections::HashMap::new();
        for i in 0..=n {
            for j in 0..=n {
                let (x, y) = (i as f64 * step, j as f64 * step);
                let w = self.tapestry.window(x, y, c.sensor_window, c.sensor_window);
                if w.len() < 3 {
                    return false;
                }
                let mut sig: Vec<u32> = w.iter().map(|p| p.2).collect();
                sig.sort_unstable();
                sig.dedup();
                let e = signatures.entry(sig).or_insert((x, y, x, y));
                *e = (e.0.min(x), e.1.min(y), e.2.max(x), e.3.max(y));
            }
        }
        // a signature may only cover ground the agent cannot cross in one move
        let limit = 0.75 * c.move_step;
        signatures
            .values()
            .all(|b| (b.2 - b.0) <= limit && (b.3 - b.1) <= limit)
    }

    pub fn config(&self) -> &MazeConfig {
        &self.config
    }

    pub fn tapestry(&self) -> &Tapestry {
        &self.tapestry
    }

    pub fn in_exit(&self, x: f64, y: f64) -> bool {
        self.config
            .exits
            .iter()
            .any(|e| x >= e[0] && x <= e[2] && y >= e[1] && y <= e[3])
    }

    /// Whether moving in a straight line from `a` to `b` is forbidden.
    pub fn blocked(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        let s = self.config.size;
        if !(0.0..=s).contains(&b.0) || !(0.0..=s).contains(&b.1) {
            return true;
        }
        self.config
            .walls
            .iter()
            .any(|w| segments_intersect(a, b, (w[0], w[1]), (w[2], w[3])))
    }

    /// The move without noise; exposed for tests.
    pub fn step_with_offset(&self, s: (f64, f64), a: usize, offset: (f64, f64)) -> Transition<(f64, f64)> {
        let (dx, dy) = DIRECTIONS[a];
        let c = (
            s.0 + self.config.move_step * dx + offset.0,
            s.1 + self.config.move_step * dy + offset.1,
        );
        if self.blocked(s, c) {
            return Transition {
                next: s,
                reward: 0.0,
                terminal: false,
            };
        }
        let exit = self.in_exit(c.0, c.1);
        Transition {
            next: c,
            reward: if exit { self.config.exit_reward } else { 0.0 },
            terminal: exit,
        }
    }

    fn window(&self, s: (f64, f64)) -> Vec<(f64, f64, u32)> {
        let w = self.config.sensor_window;
        self.tapestry.window(s.0, s.1, w, w)
    }
}

/// Closed-segment intersection, touching included.
pub fn segments_intersect(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
        (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
    }
    fn on_segment(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> bool {
        c.0 >= a.0.min(b.0) && c.0 <= a.0.max(b.0) && c.1 >= a.1.min(b.1) && c.1 <= a.1.max(b.1)
    }
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

impl Environment for Maze {
    type State = (f64, f64);

    fn n_actions(&self) -> usize {
        4
    }

    fn action_names(&self) -> &'static [&'static str] {
        &ACTIONS
    }

    fn discount(&self) -> f64 {
        self.config.discount
    }

    fn max_abs_reward(&self) -> f64 {
        self.config.exit_reward.abs()
    }

    fn dictionary(&self) -> &FeatureDictionary {
        &self.dictionary
    }

    fn sample_start(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        loop {
            let s = self.config.size;
            let (x, y) = (rng.random_range(0.0..=s), rng.random_range(0.0..=s));
            if !self.in_exit(x, y) {
                return (x, y);
            }
        }
    }

    fn step(&self, s: &(f64, f64), a: usize, rng: &mut ChaCha8Rng) -> Transition<(f64, f64)> {
        let offset = match &self.noise {
            Some(n) => (n.sample(rng), n.sample(rng)),
            None => (0.0, 0.0),
        };
        self.step_with_offset(*s, a, offset)
    }

    fn percept(&self, s: &(f64, f64), id: PerceptId, rng: &mut ChaCha8Rng) -> Percept {
        let c = &self.config;
        let mut points = Vec::new();
        for (x, y, sym) in self.window(*s) {
            if c.point_dropout > 0.0 && rng.random_bool(c.point_dropout) {
                continue;
            }
            let proto = self.dictionary.prototype(sym).expect("tapestry symbols are in the dictionary");
            points.push(InterestPoint {
                x,
                y,
                descriptor: jitter(proto, c.descriptor_noise, rng),
            });
        }
        Percept {
            id,
            width: c.sensor_window,
            height: c.sensor_window,
            points,
        }
    }

    fn symbolized(&self, s: &(f64, f64), rng: &mut ChaCha8Rng) -> SymbolizedPercept {
        let dropout = self.config.point_dropout;
        SymbolizedPercept::new(
            self.window(*s)
                .into_iter()
                .filter(|_| dropout == 0.0 || !rng.random_bool(dropout))
                .map(|(x, y, symbol)| SymbolPoint { x, y, symbol })
                .collect(),
        )
    }

    fn coords(&self, s: &(f64, f64)) -> Vec<f64> {
        vec![s.0, s.1]
    }

    fn max_episode_length(&self) -> Option<usize> {
        self.config.max_episode_length
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environments::collect_interactions;

    fn maze() -> Maze {
        Maze::new(&MazeConfig::default(), 7).unwrap()
    }

    #[test]
    fn wall_blocks_motion() {
        let m = maze();
        // just left of the first wall, moving right
        let t = m.step_with_offset((200.0, 100.0), 1, (0.0, 0.0));
        assert_eq!(t.next, (200.0, 100.0));
        assert_eq!(t.reward, 0.0);
        assert!(!t.terminal);
        // leaving the maze
        let t = m.step_with_offset((10.0, 300.0), 3, (0.0, 0.0));
        assert_eq!(t.next, (10.0, 300.0));
    }

    #[test]
    fn reaching_an_exit_pays_and_ends() {
        let m = maze();
        let t = m.step_with_offset((40.0, 520.0), 0, (0.0, 0.0));
        assert_eq!(t.reward, 100.0);
        assert!(t.terminal);
    }

    #[test]
    fn noiseless_open_move_is_exact() {
        let m = maze();
        for (a, (dx, dy)) in DIRECTIONS.iter().enumerate() {
            let t = m.step_with_offset((320.0, 320.0), a, (0.0, 0.0));
            assert_eq!(t.next, (320.0 + 64.0 * dx, 320.0 + 64.0 * dy));
        }
    }

    #[test]
    fn glass_walls_are_invisible() {
        let m = maze();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // window straddling a wall still contains points on both sides
        let p = m.symbolized(&(213.0, 200.0), &mut rng);
        let xs: Vec<f64> = p.points().iter().map(|p| p.x).collect();
        assert!(xs.iter().any(|&x| x < 80.0) && xs.iter().any(|&x| x > 80.0));
    }

    #[test]
    fn percepts_match_symbolized_view() {
        let m = maze();
        assert!(m.tapestry().points().len() <= m.config().n_symbols);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in [(10.0, 10.0), (320.0, 500.0), (600.0, 100.0)] {
            let p = m.percept(&s, PerceptId(0), &mut rng);
            let a = m.dictionary().symbolize(&p).unwrap();
            let b = m.symbolized(&s, &mut rng);
            assert_eq!(a, b);
            assert!(a.points().len() >= 3);
        }
        // distant states see disjoint ground, hence disjoint symbols
        let a = m.symbolized(&(80.0, 80.0), &mut rng);
        let b = m.symbolized(&(560.0, 560.0), &mut rng);
        assert!(a.symbols().iter().all(|s| !b.has_symbol(*s)));
    }

    #[test]
    fn sampled_trajectories_never_cross_walls() {
        let m = maze();
        let db = collect_interactions(&m, 3000, 5);
        for it in &db.interactions {
            let (a, b) = (&db.coords[it.s.index()], &db.coords[it.s_next.index()]);
            if a != b {
                assert!(!m.blocked((a[0], a[1]), (b[0], b[1])));
            }
        }
        assert!(db.interactions.iter().any(|i| i.terminal_next && i.r == 100.0));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = MazeConfig {
            descriptor_noise: 0.6,
            ..MazeConfig::default()
        };
        assert!(matches!(Maze::new(&bad, 0), Err(EnvError::Config(_))));
    }
}
