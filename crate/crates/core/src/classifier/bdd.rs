//! Reduced ordered binary decision diagrams over feature variables.
//!
//! One [`BddManager`] hash-conses the nodes of every class function of a
//! classifier. Variable reordering swaps adjacent levels in place: every node
//! keeps denoting the same Boolean function, so external references stay
//! valid across a swap. Nodes that become unreachable are reclaimed by
//! [`BddManager::collect_garbage`], which renumbers the live nodes.

use std::collections::{BTreeSet, HashMap};

use crate::features::FeatureId;

/// Handle to a node of a [`BddManager`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeRef(pub u32);

impl NodeRef {
    pub const FALSE: NodeRef = NodeRef(0);
    pub const TRUE: NodeRef = NodeRef(1);

    pub fn is_terminal(self) -> bool {
        self.0 < 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct Node {
    var: FeatureId,
    low: NodeRef,
    high: NodeRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Op {
    And,
    Or,
}

#[derive(Debug, Clone, Default)]
pub struct BddManager {
    /// Slots 0 and 1 are the terminals; their contents are unused.
    nodes: Vec<Node>,
    unique: HashMap<Node, NodeRef>,
    by_var: HashMap<FeatureId, Vec<NodeRef>>,
    /// level -> variable
    order: Vec<FeatureId>,
    level: HashMap<FeatureId, usize>,
    cache: HashMap<(Op, NodeRef, NodeRef), NodeRef>,
    not_cache: HashMap<NodeRef, NodeRef>,
    /// Reference counts, maintained only while sifting: live parents plus
    /// external roots. Dead nodes hold no references on their children.
    refs: Option<Vec<u32>>,
    live: usize,
    swap_work: usize,
}

impl PartialEq for BddManager {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.order == other.order
    }
}

const TERMINAL_LEVEL: usize = usize::MAX;

/// Bounds on the work done by [`BddManager::sift_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiftLimits {
    /// Only this many variables, largest levels first, are moved.
    pub max_vars: usize,
    /// A walk stops once the node count exceeds this factor of the best.
    pub max_growth: f64,
    /// Node rebuilds allowed across all swaps; sifting stops once spent.
    pub max_work: usize,
}

impl Default for SiftLimits {
    fn default() -> Self {
        Self {
            max_vars: 1000,
            max_growth: 1.2,
            max_work: 20_000_000,
        }
    }
}

impl BddManager {
    pub fn new() -> Self {
        let dummy = Node {
            var: FeatureId(u32::MAX),
            low: NodeRef::FALSE,
            high: NodeRef::FALSE,
        };
        Self {
            nodes: vec![dummy, dummy],
            ..Self::default()
        }
    }

    /// Current variable order, top level first.
    pub fn order(&self) -> &[FeatureId] {
        &self.order
    }

    /// Appends `var` at the bottom of the order if it is new.
    pub fn declare(&mut self, var: FeatureId) {
        if !self.level.contains_key(&var) {
            self.level.insert(var, self.order.len());
            self.order.push(var);
        }
    }

    pub fn var(&mut self, var: FeatureId) -> NodeRef {
        self.declare(var);
        self.mk(var, NodeRef::FALSE, NodeRef::TRUE)
    }

    fn level_of(&self, r: NodeRef) -> usize {
        if r.is_terminal() {
            TERMINAL_LEVEL
        } else {
            self.level[&self.nodes[r.0 as usize].var]
        }
    }

    fn node(&self, r: NodeRef) -> Node {
        self.nodes[r.0 as usize]
    }

    fn mk(&mut self, var: FeatureId, low: NodeRef, high: NodeRef) -> NodeRef {
        if low == high {
            return low;
        }
        let node = Node { var, low, high };
        if let Some(&r) = self.unique.get(&node) {
            return r;
        }
        let r = NodeRef(self.nodes.len() as u32);
        self.nodes.push(node);
        if let Some(refs) = &mut self.refs {
            refs.push(0);
        }
        self.unique.insert(node, r);
        self.by_var.entry(var).or_default().push(r);
        r
    }

    pub fn and(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.apply(Op::And, a, b)
    }

    pub fn or(&mut self, a: NodeRef, b: NodeRef) -> NodeRef {
        self.apply(Op::Or, a, b)
    }

    pub fn not(&mut self, a: NodeRef) -> NodeRef {
        match a {
            NodeRef::FALSE => NodeRef::TRUE,
            NodeRef::TRUE => NodeRef::FALSE,
            _ => {
                if let Some(&r) = self.not_cache.get(&a) {
                    return r;
                }
                let n = self.node(a);
                let low = self.not(n.low);
                let high = self.not(n.high);
                let r = self.mk(n.var, low, high);
                self.not_cache.insert(a, r);
                r
            }
        }
    }

    fn apply(&mut self, op: Op, a: NodeRef, b: NodeRef) -> NodeRef {
        match (op, a, b) {
            (Op::And, NodeRef::FALSE, _) | (Op::And, _, NodeRef::FALSE) => return NodeRef::FALSE,
            (Op::And, NodeRef::TRUE, x) | (Op::And, x, NodeRef::TRUE) => return x,
            (Op::Or, NodeRef::TRUE, _) | (Op::Or, _, NodeRef::TRUE) => return NodeRef::TRUE,
            (Op::Or, NodeRef::FALSE, x) | (Op::Or, x, NodeRef::FALSE) => return x,
            _ if a == b => return a,
            _ => {}
        }
        let key = if a <= b { (op, a, b) } else { (op, b, a) };
        if let Some(&r) = self.cache.get(&key) {
            return r;
        }
        let (la, lb) = (self.level_of(a), self.level_of(b));
        let top = la.min(lb);
        let var = self.order[top];
        let (a0, a1) = if la == top {
            let n = self.node(a);
            (n.low, n.high)
        } else {
            (a, a)
        };
        let (b0, b1) = if lb == top {
            let n = self.node(b);
            (n.low, n.high)
        } else {
            (b, b)
        };
        let low = self.apply(op, a0, b0);
        let high = self.apply(op, a1, b1);
        let r = self.mk(var, low, high);
        self.cache.insert(key, r);
        r
    }

    /// Evaluates the function rooted at `r` under a variable assignment.
    pub fn eval(&self, mut r: NodeRef, mut assignment: impl FnMut(FeatureId) -> bool) -> bool {
        while !r.is_terminal() {
            let n = self.node(r);
            r = if assignment(n.var) { n.high } else { n.low };
        }
        r == NodeRef::TRUE
    }

    /// Like [`BddManager::eval`] with a fallible assignment.
    pub fn try_eval<E>(
        &self,
        mut r: NodeRef,
        mut assignment: impl FnMut(FeatureId) -> Result<bool, E>,
    ) -> Result<bool, E> {
        while !r.is_terminal() {
            let n = self.node(r);
            r = if assignment(n.var)? { n.high } else { n.low };
        }
        Ok(r == NodeRef::TRUE)
    }

    /// Variables the function rooted at `r` depends on.
    pub fn support(&self, r: NodeRef) -> BTreeSet<FeatureId> {
        let mut seen = BTreeSet::new();
        let mut vars = BTreeSet::new();
        let mut stack = vec![r];
        while let Some(x) = stack.pop() {
            if x.is_terminal() || !seen.insert(x) {
                continue;
            }
            let n = self.node(x);
            vars.insert(n.var);
            stack.push(n.low);
            stack.push(n.high);
        }
        vars
    }

    /// Number of distinct internal nodes reachable from `roots`.
    pub fn node_count(&self, roots: &[NodeRef]) -> usize {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeRef> = roots.to_vec();
        let mut count = 0;
        while let Some(x) = stack.pop() {
            if x.is_terminal() || seen[x.0 as usize] {
                continue;
            }
            seen[x.0 as usize] = true;
            count += 1;
            let n = self.node(x);
            stack.push(n.low);
            stack.push(n.high);
        }
        count
    }

    /// Copies the nodes reachable from `roots` into fresh tables and drops
    /// variables that no live node uses. Roots are rewritten in place.
    pub fn collect_garbage(&mut self, roots: &mut [NodeRef]) {
        let mut fresh = BddManager::new();
        fresh.order = self.order.clone();
        fresh.level = self.level.clone();
        let mut map: HashMap<NodeRef, NodeRef> = HashMap::new();
        map.insert(NodeRef::FALSE, NodeRef::FALSE);
        map.insert(NodeRef::TRUE, NodeRef::TRUE);
        for r in roots.iter_mut() {
            *r = self.copy_into(*r, &mut fresh, &mut map);
        }
        fresh.order.retain(|v| fresh.by_var.contains_key(v));
        fresh.level = fresh
            .order
            .iter()
            .enumerate()
            .map(|(i, &v)| (v, i))
            .collect();
        *self = fresh;
    }

    fn copy_into(
        &self,
        r: NodeRef,
        fresh: &mut BddManager,
        map: &mut HashMap<NodeRef, NodeRef>,
    ) -> NodeRef {
        if let Some(&m) = map.get(&r) {
            return m;
        }
        let n = self.node(r);
        let low = self.copy_into(n.low, fresh, map);
        let high = self.copy_into(n.high, fresh, map);
        let m = fresh.mk(n.var, low, high);
        map.insert(r, m);
        m
    }

    /// Exchanges the variables at levels `i` and `i + 1`.
    pub fn swap_levels(&mut self, i: usize) {
        assert!(i + 1 < self.order.len(), "swap beyond the last level");
        let x = self.order[i];
        let y = self.order[i + 1];
        self.cache.clear();
        self.not_cache.clear();

        // new levels take effect before rebuilding so that mk sees a
        // consistent order for freshly created x nodes
        self.order.swap(i, i + 1);
        self.level.insert(x, i + 1);
        self.level.insert(y, i);

        let old_x = self.by_var.remove(&x).unwrap_or_default();
        self.swap_work += old_x.len();
        let tracking = self.refs.is_some();
        for r in old_x {
            let n = self.node(r);
            if tracking && !self.is_live(r) {
                // unreachable; dropping it keeps a sifting walk linear
                self.unique.remove(&n);
                continue;
            }
            let low_is_y = !n.low.is_terminal() && self.node(n.low).var == y;
            let high_is_y = !n.high.is_terminal() && self.node(n.high).var == y;
            if !low_is_y && !high_is_y {
                self.by_var.entry(x).or_default().push(r);
                continue;
            }
            let (f00, f01) = if low_is_y {
                let c = self.node(n.low);
                (c.low, c.high)
            } else {
                (n.low, n.low)
            };
            let (f10, f11) = if high_is_y {
                let c = self.node(n.high);
                (c.low, c.high)
            } else {
                (n.high, n.high)
            };
            self.unique.remove(&n);
            let low = self.mk(x, f00, f10);
            let high = self.mk(x, f01, f11);
            if self.is_live(r) {
                self.inc(low);
                self.inc(high);
                self.dec(n.low);
                self.dec(n.high);
            }
            let swapped = Node { var: y, low, high };
            self.nodes[r.0 as usize] = swapped;
            self.unique.insert(swapped, r);
            self.by_var.entry(y).or_default().push(r);
        }
    }

    /// Greedy sifting with the default [`SiftLimits`].
    pub fn sift(&mut self, roots: &mut [NodeRef]) {
        self.sift_with(roots, SiftLimits::default());
    }

    /// Greedy sifting: each variable in turn walks to both ends of the order
    /// and is left at the position minimizing the node count of `roots`.
    /// A walk stops early once the count exceeds `max_growth` times the best
    /// seen. Garbage is collected afterwards, which drops unused variables
    /// from the order.
    pub fn sift_with(&mut self, roots: &mut [NodeRef], limits: SiftLimits) {
        self.collect_garbage(roots);
        let n_levels = self.order.len();
        if n_levels < 2 {
            return;
        }
        let mut vars: Vec<FeatureId> = self.order.clone();
        // largest levels first
        vars.sort_by_key(|v| std::cmp::Reverse(self.by_var.get(v).map_or(0, Vec::len)));
        vars.truncate(limits.max_vars);
        // every swap clears the operation caches; start them empty and small
        self.cache = HashMap::new();
        self.not_cache = HashMap::new();
        self.track(roots);
        self.swap_work = 0;
        let spent = |m: &Self| m.swap_work >= limits.max_work;
        for var in vars {
            if spent(self) {
                break;
            }
            let start = self.level[&var];
            let mut pos = start;
            let mut best = (self.live, start);
            let bound = |best: usize| (best as f64 * limits.max_growth).ceil() as usize;
            // nearest end first
            let down_first = start >= n_levels / 2;
            for phase in 0..2 {
                if (phase == 0) == down_first {
                    while pos + 1 < n_levels {
                        self.swap_levels(pos);
                        pos += 1;
                        let size = self.live;
                        if size < best.0 {
                            best = (size, pos);
                        } else if size > bound(best.0) || spent(self) {
                            break;
                        }
                    }
                } else {
                    while pos > 0 {
                        self.swap_levels(pos - 1);
                        pos -= 1;
                        let size = self.live;
                        if size < best.0 {
                            best = (size, pos);
                        } else if size > bound(best.0) || spent(self) {
                            break;
                        }
                    }
                }
            }
            while pos < best.1 {
                self.swap_levels(pos);
                pos += 1;
            }
            while pos > best.1 {
                self.swap_levels(pos - 1);
                pos -= 1;
            }
        }
        self.refs = None;
        self.collect_garbage(roots);
    }

    /// Starts reference counting from `roots`; every stored node must be
    /// reachable from them.
    fn track(&mut self, roots: &[NodeRef]) {
        self.refs = Some(vec![0; self.nodes.len()]);
        self.live = 0;
        for &r in roots {
            self.inc(r);
        }
    }

    fn is_live(&self, r: NodeRef) -> bool {
        self.refs.as_ref().is_some_and(|refs| refs[r.0 as usize] > 0)
    }

    fn inc(&mut self, r: NodeRef) {
        if r.is_terminal() {
            return;
        }
        let refs = self.refs.as_mut().expect("reference counting active");
        let slot = &mut refs[r.0 as usize];
        *slot += 1;
        if *slot == 1 {
            self.live += 1;
            let n = self.node(r);
            self.inc(n.low);
            self.inc(n.high);
        }
    }

    fn dec(&mut self, r: NodeRef) {
        if r.is_terminal() {
            return;
        }
        let refs = self.refs.as_mut().expect("reference counting active");
        let slot = &mut refs[r.0 as usize];
        *slot -= 1;
        if *slot == 0 {
            self.live -= 1;
            let n = self.node(r);
            self.dec(n.low);
            self.dec(n.high);
        }
    }

    /// `(var, low, high)` of an internal node.
    pub fn node_parts(&self, r: NodeRef) -> Option<(FeatureId, NodeRef, NodeRef)> {
        (!r.is_terminal()).then(|| {
            let n = self.node(r);
            (n.var, n.low, n.high)
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len() - 2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rebuilds a manager from serialized parts; nodes must be listed
    /// children first and be reduced.
    pub(crate) fn from_parts(
        order: Vec<FeatureId>,
        nodes: &[(FeatureId, NodeRef, NodeRef)],
    ) -> Result<Self, String> {
        let mut m = BddManager::new();
        for &v in &order {
            if m.level.contains_key(&v) {
                return Err(format!("variable {v} repeated in order"));
            }
            m.declare(v);
        }
        for (i, &(var, low, high)) in nodes.iter().enumerate() {
            let id = i as u32 + 2;
            for c in [low, high] {
                if c.0 >= id {
                    return Err(format!("node {id} references a later node"));
                }
            }
            let lv = *m
                .level
                .get(&var)
                .ok_or_else(|| format!("node {id} uses undeclared variable {var}"))?;
            if m.level_of(low).min(m.level_of(high)) <= lv {
                return Err(format!("node {id} violates the variable order"));
            }
            if low == high || m.unique.contains_key(&Node { var, low, high }) {
                return Err(format!("node {id} is not reduced"));
            }
            let r = m.mk(var, low, high);
            debug_assert_eq!(r.0, id);
        }
        Ok(m)
    }

    /// Live nodes in index order as `(var, low, high)`.
    pub(crate) fn parts(&self) -> Vec<(FeatureId, NodeRef, NodeRef)> {
        self.nodes[2..]
            .iter()
            .map(|n| (n.var, n.low, n.high))
            .collect()
    }
}
