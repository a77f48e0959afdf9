//! Hierarchy of visual features.
//!
//! The feature graph is a binary DAG: leaves are primitive features
//! (dictionary symbols), internal vertices are composites of two parts whose
//! separation follows a Gaussian law `(mu, sigma)`. A composite occurs at the
//! midpoint of every pair of part occurrences whose distance is likely enough
//! under that law.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{complete_linkage_1d, mean_std};
use crate::percept::SymbolizedPercept;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FeatureId(pub u32);

impl FeatureId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for FeatureId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "f{}", self.0)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("unknown feature {0}")]
    UnknownFeature(FeatureId),
    #[error("composite sigma must be positive and finite, got {0}")]
    InvalidSigma(f64),
    #[error("composite mu must be finite and non-negative, got {0}")]
    InvalidMu(f64),
    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// A spatial combination of two features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeFeature {
    pub part1: FeatureId,
    pub part2: FeatureId,
    pub mu: f64,
    pub sigma: f64,
}

impl CompositeFeature {
    /// Unordered part pair, smallest id first.
    pub fn parts(&self) -> (FeatureId, FeatureId) {
        if self.part1 <= self.part2 {
            (self.part1, self.part2)
        } else {
            (self.part2, self.part1)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Feature {
    Primitive { symbol: u32 },
    Composite(CompositeFeature),
}

/// Parameters of composite detection and generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompositeParams {
    /// Minimum peak-normalized likelihood of a part distance.
    pub nu: f64,
    /// Minimum number of percepts in which both parts must occur.
    pub min_cooccurrence: usize,
    /// Dendrogram cut height for distance clustering.
    pub cluster_cut: f64,
    pub min_cluster_size: usize,
    /// Lower bound on a generated sigma.
    pub sigma_floor: f64,
    /// Upper bound on the percepts scanned by one generation call.
    pub max_percepts: usize,
}

impl Default for CompositeParams {
    fn default() -> Self {
        Self {
            nu: 0.1,
            min_cooccurrence: 10,
            cluster_cut: 15.0,
            min_cluster_size: 5,
            sigma_floor: 0.5,
            max_percepts: 1000,
        }
    }
}

/// Peak-normalized Gaussian likelihood `exp(-(d - mu)^2 / (2 sigma^2))`.
pub fn distance_likelihood(d: f64, mu: f64, sigma: f64) -> f64 {
    let z = (d - mu) / sigma;
    (-0.5 * z * z).exp()
}

/// Append-only binary DAG of features.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureGraph {
    vertices: Vec<Feature>,
    by_symbol: HashMap<u32, FeatureId>,
}

impl FeatureGraph {
    /// A graph whose first `n_symbols` vertices are the primitives `0..n_symbols`,
    /// so that primitive symbol `k` has feature id `k`.
    pub fn with_primitives(n_symbols: usize) -> Self {
        let mut g = Self::default();
        for s in 0..n_symbols as u32 {
            g.add_primitive(s);
        }
        g
    }

    pub fn add_primitive(&mut self, symbol: u32) -> FeatureId {
        if let Some(&id) = self.by_symbol.get(&symbol) {
            return id;
        }
        let id = FeatureId(self.vertices.len() as u32);
        self.vertices.push(Feature::Primitive { symbol });
        self.by_symbol.insert(symbol, id);
        id
    }

    pub fn primitive(&self, symbol: u32) -> Option<FeatureId> {
        self.by_symbol.get(&symbol).copied()
    }

    /// Inserts a composite, unless an equivalent vertex exists: same parts,
    /// `|mu - mu'| < 1` and overlapping `mu +- sigma` ranges. Returns the id
    /// and whether a vertex was added.
    pub fn insert_composite(
        &mut self,
        c: CompositeFeature,
    ) -> Result<(FeatureId, bool), FeatureError> {
        self.get(c.part1)?;
        self.get(c.part2)?;
        if !(c.sigma > 0.0 && c.sigma.is_finite()) {
            return Err(FeatureError::InvalidSigma(c.sigma));
        }
        if !(c.mu >= 0.0 && c.mu.is_finite()) {
            return Err(FeatureError::InvalidMu(c.mu));
        }
        if let Some(id) = self.find_equivalent(&c) {
            return Ok((id, false));
        }
        let id = FeatureId(self.vertices.len() as u32);
        self.vertices.push(Feature::Composite(c));
        Ok((id, true))
    }

    pub fn find_equivalent(&self, c: &CompositeFeature) -> Option<FeatureId> {
        self.vertices.iter().enumerate().find_map(|(i, v)| match v {
            Feature::Composite(e)
                if e.parts() == c.parts()
                    && (e.mu - c.mu).abs() < 1.0
                    && (e.mu - e.sigma) <= (c.mu + c.sigma)
                    && (c.mu - c.sigma) <= (e.mu + e.sigma) =>
            {
                Some(FeatureId(i as u32))
            }
            _ => None,
        })
    }

    pub fn get(&self, id: FeatureId) -> Result<&Feature, FeatureError> {
        self.vertices
            .get(id.index())
            .ok_or(FeatureError::UnknownFeature(id))
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = FeatureId> + '_ {
        (0..self.vertices.len() as u32).map(FeatureId)
    }

    pub fn is_composite(&self, id: FeatureId) -> bool {
        matches!(self.vertices.get(id.index()), Some(Feature::Composite(_)))
    }

    pub fn composite_count(&self) -> usize {
        self.vertices
            .iter()
            .filter(|v| matches!(v, Feature::Composite(_)))
            .count()
    }

    /// Where `v` occurs in `s`.
    pub fn occurrences(
        &self,
        v: FeatureId,
        s: &SymbolizedPercept,
        params: &CompositeParams,
    ) -> Result<Vec<(f64, f64)>, FeatureError> {
        match *self.get(v)? {
            Feature::Primitive { symbol } => Ok(s.locations(symbol)),
            Feature::Composite(c) => {
                let o1 = self.occurrences(c.part1, s, params)?;
                if o1.is_empty() {
                    return Ok(o1);
                }
                let o2 = self.occurrences(c.part2, s, params)?;
                let same_part = c.part1 == c.part2;
                let mut out = Vec::new();
                for &(x1, y1) in &o1 {
                    for &(x2, y2) in &o2 {
                        if same_part && x1 == x2 && y1 == y2 {
                            continue;
                        }
                        let d = (x2 - x1).hypot(y2 - y1);
                        if distance_likelihood(d, c.mu, c.sigma) >= params.nu {
                            out.push(((x1 + x2) / 2.0, (y1 + y2) / 2.0));
                        }
                    }
                }
                dedup_points(&mut out);
                Ok(out)
            }
        }
    }

    /// `occurrences(v, s)` is nonempty.
    pub fn exhibits(
        &self,
        v: FeatureId,
        s: &SymbolizedPercept,
        params: &CompositeParams,
    ) -> Result<bool, FeatureError> {
        match *self.get(v)? {
            Feature::Primitive { symbol } => Ok(s.has_symbol(symbol)),
            Feature::Composite(_) => Ok(!self.occurrences(v, s, params)?.is_empty()),
        }
    }

    /// Proposes composites from the spatial statistics of feature pairs that
    /// co-occur often enough in `percepts`.
    ///
    /// Output is sorted by part pair, then by `mu`.
    pub fn generate_composites(
        &self,
        percepts: &[&SymbolizedPercept],
        params: &CompositeParams,
    ) -> Result<Vec<CompositeFeature>, FeatureError> {
        let stride = percepts.len().div_ceil(params.max_percepts.max(1)).max(1);
        let composite_ids: Vec<FeatureId> =
            self.ids().filter(|&id| self.is_composite(id)).collect();

        // occurrences of every exhibited feature, per percept
        let mut per_percept: Vec<Vec<(FeatureId, Vec<(f64, f64)>)>> = Vec::new();
        for s in percepts.iter().step_by(stride) {
            let mut occ = Vec::new();
            for &symbol in s.symbols() {
                if let Some(id) = self.primitive(symbol) {
                    occ.push((id, s.locations(symbol)));
                }
            }
            for &id in &composite_ids {
                let o = self.occurrences(id, s, params)?;
                if !o.is_empty() {
                    occ.push((id, o));
                }
            }
            occ.sort_by_key(|(id, _)| *id);
            per_percept.push(occ);
        }

        let mut cooccurrence: BTreeMap<(FeatureId, FeatureId), usize> = BTreeMap::new();
        for occ in &per_percept {
            for i in 0..occ.len() {
                for j in i..occ.len() {
                    // a feature pairs with itself only through distinct occurrences
                    if i == j && occ[i].1.len() < 2 {
                        continue;
                    }
                    *cooccurrence.entry((occ[i].0, occ[j].0)).or_insert(0) += 1;
                }
            }
        }

        let mut out = Vec::new();
        for (&(v1, v2), &count) in &cooccurrence {
            if count < params.min_cooccurrence {
                continue;
            }
            let mut distances = Vec::new();
            for occ in &per_percept {
                let find = |v: FeatureId| {
                    occ.binary_search_by_key(&v, |(id, _)| *id)
                        .ok()
                        .map(|k| &occ[k].1)
                };
                let (Some(o1), Some(o2)) = (find(v1), find(v2)) else {
                    continue;
                };
                if v1 == v2 {
                    for a in 0..o1.len() {
                        for b in a + 1..o1.len() {
                            distances.push(dist(o1[a], o1[b]));
                        }
                    }
                } else {
                    for &p1 in o1 {
                        for &p2 in o2 {
                            distances.push(dist(p1, p2));
                        }
                    }
                }
            }
            for cluster in complete_linkage_1d(&distances, params.cluster_cut) {
                if cluster.len() < params.min_cluster_size {
                    continue;
                }
                let (mu, sd) = mean_std(&cluster);
                out.push(CompositeFeature {
                    part1: v1,
                    part2: v2,
                    mu,
                    sigma: sd.max(params.sigma_floor),
                });
            }
        }
        Ok(out)
    }

    /// Text form, one vertex per line in id order:
    ///
    /// ```text
    /// # rlvc features v1
    /// <id> primitive <symbol>
    /// <id> composite <part1> <part2> <mu> <sigma>
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::from("# rlvc features v1\n");
        for (i, v) in self.vertices.iter().enumerate() {
            match v {
                Feature::Primitive { symbol } => {
                    let _ = writeln!(out, "{i} primitive {symbol}");
                }
                Feature::Composite(c) => {
                    let _ = writeln!(
                        out,
                        "{i} composite {} {} {} {}",
                        c.part1.0, c.part2.0, c.mu, c.sigma
                    );
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FeatureError> {
        let mut g = Self::default();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: &str| FeatureError::Parse {
                line: ln + 1,
                msg: msg.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            let id: usize = f
                .first()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("bad id"))?;
            if id != g.len() {
                return Err(err("vertex ids must be consecutive"));
            }
            match f.get(1).copied() {
                Some("primitive") if f.len() == 3 => {
                    let symbol = f[2].parse().map_err(|_| err("bad symbol"))?;
                    if g.by_symbol.contains_key(&symbol) {
                        return Err(err("duplicate primitive"));
                    }
                    g.add_primitive(symbol);
                }
                Some("composite") if f.len() == 6 => {
                    let part = |s: &str| s.parse().map(FeatureId).map_err(|_| err("bad part"));
                    let num = |s: &str| s.parse::<f64>().map_err(|_| err("bad number"));
                    let c = CompositeFeature {
                        part1: part(f[2])?,
                        part2: part(f[3])?,
                        mu: num(f[4])?,
                        sigma: num(f[5])?,
                    };
                    // parts must precede the vertex, which keeps the graph acyclic
                    g.get(c.part1)?;
                    g.get(c.part2)?;
                    if !(c.sigma > 0.0) {
                        return Err(FeatureError::InvalidSigma(c.sigma));
                    }
                    g.vertices.push(Feature::Composite(c));
                }
                _ => return Err(err("expected `primitive` or `composite` vertex")),
            }
        }
        Ok(g)
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (b.0 - a.0).hypot(b.1 - a.1)
}

fn dedup_points(points: &mut Vec<(f64, f64)>) {
    points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    points.dedup();
}
