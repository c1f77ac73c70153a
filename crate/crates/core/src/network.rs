//! Physical topologies and their compilation into a network automaton.
//!
//! Each directed link `i → j` becomes a virtual state that delivers to `j`
//! with probability `1 − λ_ij` and loses the packet to a shared dump state
//! otherwise. States are laid out physical nodes first (by id), then virtual
//! nodes in `(from, to)` order, then the dump.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pfsa::{Edge, Pfsa, StateId, SymbolId};

pub type NodeId = usize;

/// One directed link as it appears in topology files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub from: NodeId,
    pub to: NodeId,
    pub drop: f64,
}

#[derive(Serialize, Deserialize)]
struct TopologyFile {
    n: usize,
    sink: NodeId,
    links: Vec<Link>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkTopology {
    sink: NodeId,
    /// Sorted neighbor ids per node.
    neighbors: Vec<Vec<NodeId>>,
    /// `drops[i][k]` is λ for the link to `neighbors[i][k]`.
    drops: Vec<Vec<f64>>,
}

impl NetworkTopology {
    pub fn new(n: usize, sink: NodeId, links: &[Link]) -> Result<Self> {
        if sink >= n {
            return Err(Error::validation(format!("sink {sink} out of range for {n} nodes")));
        }
        let mut adj: Vec<Vec<(NodeId, f64)>> = vec![Vec::new(); n];
        for l in links {
            if l.from >= n || l.to >= n {
                return Err(Error::validation(format!(
                    "link {} -> {} references a node outside 0..{n}",
                    l.from, l.to
                )));
            }
            if l.from == l.to {
                return Err(Error::validation(format!("node {} lists itself as a neighbor", l.from)));
            }
            if !(0.0..=1.0).contains(&l.drop) {
                return Err(Error::validation(format!(
                    "drop probability {} on link {} -> {} outside [0,1]",
                    l.drop, l.from, l.to
                )));
            }
            adj[l.from].push((l.to, l.drop));
        }
        let mut neighbors = Vec::with_capacity(n);
        let mut drops = Vec::with_capacity(n);
        for (i, mut row) in adj.into_iter().enumerate() {
            row.sort_by_key(|&(j, _)| j);
            if let Some(w) = row.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::validation(format!("duplicate link {i} -> {}", w[0].0)));
            }
            neighbors.push(row.iter().map(|&(j, _)| j).collect());
            drops.push(row.iter().map(|&(_, d)| d).collect());
        }
        Ok(NetworkTopology {
            sink,
            neighbors,
            drops,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: TopologyFile = serde_json::from_str(text)?;
        Self::new(f.n, f.sink, &f.links)
    }

    pub fn to_json(&self) -> Result<String> {
        let f = TopologyFile {
            n: self.node_count(),
            sink: self.sink,
            links: self.links().collect(),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn sink(&self) -> NodeId {
        self.sink
    }

    pub fn neighbors(&self, i: NodeId) -> &[NodeId] {
        &self.neighbors[i]
    }

    pub fn drops(&self, i: NodeId) -> &[f64] {
        &self.drops[i]
    }

    pub fn degree(&self, i: NodeId) -> usize {
        self.neighbors[i].len()
    }

    pub fn max_degree(&self) -> usize {
        self.neighbors.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn link_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Position of `j` in `neighbors(i)`.
    pub fn neighbor_slot(&self, i: NodeId, j: NodeId) -> Option<usize> {
        self.neighbors[i].binary_search(&j).ok()
    }

    pub fn drop_prob(&self, i: NodeId, j: NodeId) -> Option<f64> {
        self.neighbor_slot(i, j).map(|k| self.drops[i][k])
    }

    pub fn set_drop(&mut self, i: NodeId, j: NodeId, drop: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&drop) {
            return Err(Error::validation(format!("drop probability {drop} outside [0,1]")));
        }
        let k = self
            .neighbor_slot(i, j)
            .ok_or_else(|| Error::validation(format!("no link {i} -> {j}")))?;
        self.drops[i][k] = drop;
        Ok(())
    }

    pub fn set_sink(&mut self, sink: NodeId) -> Result<()> {
        if sink >= self.node_count() {
            return Err(Error::validation(format!("sink {sink} out of range")));
        }
        self.sink = sink;
        Ok(())
    }

    /// All links in `(from, to)` order.
    pub fn links(&self) -> impl Iterator<Item = Link> + '_ {
        self.neighbors.iter().enumerate().flat_map(move |(i, row)| {
            row.iter().zip(&self.drops[i]).map(move |(&to, &drop)| Link {
                from: i,
                to,
                drop,
            })
        })
    }

    /// Nodes with a directed path to the sink (the sink included).
    pub fn reaches_sink(&self) -> Vec<bool> {
        let n = self.node_count();
        let mut preds: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for (i, row) in self.neighbors.iter().enumerate() {
            for &j in row {
                preds[j].push(i);
            }
        }
        let mut seen = vec![false; n];
        seen[self.sink] = true;
        let mut queue = VecDeque::from([self.sink]);
        while let Some(j) = queue.pop_front() {
            for &i in &preds[j] {
                if !seen[i] {
                    seen[i] = true;
                    queue.push_back(i);
                }
            }
        }
        seen
    }

    pub fn unreachable_from_sink_side(&self) -> Vec<NodeId> {
        self.reaches_sink()
            .iter()
            .enumerate()
            .filter(|(_, r)| !**r)
            .map(|(i, _)| i)
            .collect()
    }

    /// Hop distances over links in either direction, `usize::MAX` if unreachable.
    pub fn hop_distances(&self, from: NodeId) -> Vec<usize> {
        let n = self.node_count();
        let mut undirected: Vec<Vec<NodeId>> = self.neighbors.clone();
        for (i, row) in self.neighbors.iter().enumerate() {
            for &j in row {
                undirected[j].push(i);
            }
        }
        let mut dist = vec![usize::MAX; n];
        dist[from] = 0;
        let mut queue = VecDeque::from([from]);
        while let Some(v) = queue.pop_front() {
            for &w in &undirected[v] {
                if dist[w] == usize::MAX {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
            }
        }
        dist
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum StateKind {
    Physical(NodeId),
    Virtual { from: NodeId, to: NodeId },
    Dump,
}

/// Bijection between network entities and dense automaton state indices.
#[derive(Clone, Debug, PartialEq)]
pub struct StateIndex {
    kinds: Vec<StateKind>,
    /// First virtual state of each node; one extra entry marks the end.
    virtual_start: Vec<StateId>,
    neighbors: Vec<Vec<NodeId>>,
}

impl StateIndex {
    pub fn new(topo: &NetworkTopology) -> Self {
        let n = topo.node_count();
        let mut kinds: Vec<StateKind> = (0..n).map(StateKind::Physical).collect();
        let mut virtual_start = Vec::with_capacity(n + 1);
        for i in 0..n {
            virtual_start.push(kinds.len());
            for &j in topo.neighbors(i) {
                kinds.push(StateKind::Virtual { from: i, to: j });
            }
        }
        virtual_start.push(kinds.len());
        kinds.push(StateKind::Dump);
        StateIndex {
            kinds,
            virtual_start,
            neighbors: topo.neighbors.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn node_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn physical(&self, i: NodeId) -> StateId {
        i
    }

    /// Virtual state for the `k`-th neighbor of `i`.
    pub fn virtual_slot(&self, i: NodeId, k: usize) -> StateId {
        self.virtual_start[i] + k
    }

    pub fn virtual_state(&self, i: NodeId, j: NodeId) -> Option<StateId> {
        self.neighbors[i]
            .binary_search(&j)
            .ok()
            .map(|k| self.virtual_slot(i, k))
    }

    pub fn virtual_count(&self) -> usize {
        self.virtual_start[self.node_count()] - self.node_count()
    }

    pub fn dump(&self) -> StateId {
        self.kinds.len() - 1
    }

    pub fn kind(&self, s: StateId) -> StateKind {
        self.kinds[s]
    }

    pub fn state_of(&self, kind: StateKind) -> Option<StateId> {
        match kind {
            StateKind::Physical(i) => (i < self.node_count()).then_some(i),
            StateKind::Virtual { from, to } => self.virtual_state(from, to),
            StateKind::Dump => Some(self.dump()),
        }
    }

    pub fn name(&self, s: StateId) -> String {
        match self.kinds[s] {
            StateKind::Physical(i) => format!("q{i}"),
            StateKind::Virtual { from, to } => format!("v{from}_{to}"),
            StateKind::Dump => "dump".into(),
        }
    }
}

/// A compiled network automaton with its state layout.
#[derive(Clone, Debug)]
pub struct NetworkPfsa {
    pub pfsa: Pfsa,
    pub index: StateIndex,
    /// Symbol of the dump self-loop and of every drop transition.
    pub drop_symbol: SymbolId,
    /// Present only when some node has no neighbors.
    pub idle_symbol: Option<SymbolId>,
}

impl NetworkPfsa {
    /// Symbol `σ_ij` of the `k`-th link of node `i`; one symbol per directed link.
    pub fn link_symbol(&self, i: NodeId, k: usize) -> SymbolId {
        self.index.virtual_slot(i, k) - self.index.node_count()
    }

    pub fn state_count(&self) -> usize {
        self.index.len()
    }
}

pub fn build_pfsa(topo: &NetworkTopology) -> Result<NetworkPfsa> {
    let n = topo.node_count();
    let index = StateIndex::new(topo);
    let links = index.virtual_count();
    let needs_idle = (0..n).any(|i| topo.degree(i) == 0);

    let mut alphabet: Vec<String> = Vec::with_capacity(links + 2);
    for i in 0..n {
        for &j in topo.neighbors(i) {
            alphabet.push(format!("s{i}_{j}"));
        }
    }
    let drop_symbol = alphabet.len();
    alphabet.push("drop".into());
    let idle_symbol = needs_idle.then(|| {
        alphabet.push("idle".into());
        alphabet.len() - 1
    });

    let mut edges: Vec<Vec<Edge>> = Vec::with_capacity(index.len());
    let mut controllable = BTreeSet::new();
    for i in 0..n {
        let m = topo.degree(i);
        if m == 0 {
            edges.push(vec![Edge {
                symbol: idle_symbol.expect("idle symbol exists"),
                target: i,
                prob: 1.0,
            }]);
            continue;
        }
        let p = 1.0 / m as f64;
        let mut row = Vec::with_capacity(m);
        for k in 0..m {
            let symbol = index.virtual_slot(i, k) - n;
            row.push(Edge {
                symbol,
                target: index.virtual_slot(i, k),
                prob: p,
            });
            controllable.insert((i, symbol));
        }
        // Keep the row sum exact: the last entry takes whatever 1/m rounding left.
        let head: f64 = row[..m - 1].iter().map(|e| e.prob).sum();
        row[m - 1].prob = 1.0 - head;
        edges.push(row);
    }
    for i in 0..n {
        for (k, (&j, &lambda)) in topo.neighbors(i).iter().zip(topo.drops(i)).enumerate() {
            let symbol = index.virtual_slot(i, k) - n;
            let mut row = vec![Edge {
                symbol,
                target: j,
                prob: 1.0 - lambda,
            }];
            row.push(Edge {
                symbol: drop_symbol,
                target: index.dump(),
                prob: lambda,
            });
            edges.push(row);
        }
    }
    edges.push(vec![Edge {
        symbol: drop_symbol,
        target: index.dump(),
        prob: 1.0,
    }]);

    let mut chi = vec![0.0; index.len()];
    chi[topo.sink()] = 1.0;
    let states = (0..index.len()).map(|s| index.name(s)).collect();
    let pfsa = Pfsa::new(states, alphabet, edges, chi, controllable)?;
    Ok(NetworkPfsa {
        pfsa,
        index,
        drop_symbol,
        idle_symbol,
    })
}

/// Parameters of the random test-instance generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopologyParams {
    pub n: usize,
    pub max_degree: usize,
    pub drop_range: (f64, f64),
    /// Multiplier on the connectivity radius `sqrt(ln n / (π n))` of a
    /// random geometric graph in the unit square.
    pub connectivity: f64,
    pub seed: u64,
}

impl TopologyParams {
    pub fn new(n: usize, max_degree: usize, drop_range: (f64, f64), seed: u64) -> Self {
        TopologyParams {
            n,
            max_degree,
            drop_range,
            connectivity: 1.5,
            seed,
        }
    }
}

const GENERATOR_ATTEMPTS: u64 = 256;

/// Reproducible random topology with bidirectional links and independent
/// per-direction drop probabilities.
///
/// Nodes are scattered in the unit square and linked shortest-first within
/// the connectivity radius, respecting `max_degree`. Components cut off from
/// the sink are then bridged by their shortest admissible link. Attempts are
/// repeated with derived seeds until every node reaches the sink.
pub fn random_topology(params: &TopologyParams) -> Result<NetworkTopology> {
    let &TopologyParams {
        n,
        max_degree,
        drop_range: (lo, hi),
        connectivity,
        seed,
    } = params;
    if n == 0 {
        return Err(Error::validation("topology needs at least one node"));
    }
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        return Err(Error::validation(format!("drop range [{lo}, {hi}] is not inside [0,1]")));
    }
    if n == 1 {
        return NetworkTopology::new(1, 0, &[]);
    }
    if max_degree == 0 || connectivity <= 0.0 {
        return Err(Error::Generation {
            reason: format!(
                "{n} nodes cannot be connected with max_degree {max_degree} and connectivity {connectivity}"
            ),
            unreachable: (0..n).collect(),
        });
    }

    let mut last_unreachable = Vec::new();
    for attempt in 0..GENERATOR_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let topo = geometric_attempt(&mut rng, n, max_degree, lo, hi, connectivity)?;
        let unreachable = topo.unreachable_from_sink_side();
        if unreachable.is_empty() {
            return Ok(topo);
        }
        last_unreachable = unreachable;
    }
    Err(Error::Generation {
        reason: format!(
            "no attempt out of {GENERATOR_ATTEMPTS} connected every node to the sink"
        ),
        unreachable: last_unreachable,
    })
}

fn geometric_attempt(
    rng: &mut ChaCha8Rng,
    n: usize,
    max_degree: usize,
    lo: f64,
    hi: f64,
    connectivity: f64,
) -> Result<NetworkTopology> {
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
    let dist = |a: usize, b: usize| ((pts[a].0 - pts[b].0).powi(2) + (pts[a].1 - pts[b].1).powi(2)).sqrt();
    let radius = connectivity * ((n as f64).ln() / (std::f64::consts::PI * n as f64)).sqrt();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            pairs.push((dist(a, b), a, b));
        }
    }
    pairs.sort_by(|x, y| x.0.total_cmp(&y.0));

    let mut degree = vec![0usize; n];
    let mut uf = UnionFind::new(n);
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for &(d, a, b) in &pairs {
        if d > radius {
            break;
        }
        if degree[a] < max_degree && degree[b] < max_degree {
            degree[a] += 1;
            degree[b] += 1;
            uf.union(a, b);
            edges.push((a, b));
        }
    }
    let sink = rng.random_range(0..n);
    // Bridge stray components into the sink's component, shortest link first.
    loop {
        let root = uf.find(sink);
        let bridge = pairs.iter().find(|&&(_, a, b)| {
            let (ra, rb) = (uf.find(a), uf.find(b));
            ra != rb && (ra == root || rb == root) && degree[a] < max_degree && degree[b] < max_degree
        });
        match bridge {
            Some(&(_, a, b)) => {
                degree[a] += 1;
                degree[b] += 1;
                uf.union(a, b);
                edges.push((a, b));
            }
            None => break,
        }
    }
    edges.shuffle(rng);
    let mut links = Vec::with_capacity(edges.len() * 2);
    for (a, b) in edges {
        links.push(Link {
            from: a,
            to: b,
            drop: rng.random_range(lo..=hi),
        });
        links.push(Link {
            from: b,
            to: a,
            drop: rng.random_range(lo..=hi),
        });
    }
    NetworkTopology::new(n, sink, &links)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[rb] = ra;
        }
    }
}

/// Removes `victims`, re-indexing survivors densely in their original order.
///
/// The second value maps each old id to its new id (`None` for victims).
pub fn kill_nodes(
    topo: &NetworkTopology,
    victims: &BTreeSet<NodeId>,
) -> Result<(NetworkTopology, Vec<Option<NodeId>>)> {
    let n = topo.node_count();
    if victims.contains(&topo.sink()) {
        return Err(Error::contract(format!("cannot kill the sink (node {})", topo.sink())));
    }
    if let Some(&v) = victims.iter().find(|&&v| v >= n) {
        return Err(Error::validation(format!("victim {v} out of range for {n} nodes")));
    }
    let mut map = vec![None; n];
    let mut next = 0;
    for (i, slot) in map.iter_mut().enumerate() {
        if !victims.contains(&i) {
            *slot = Some(next);
            next += 1;
        }
    }
    let links: Vec<Link> = topo
        .links()
        .filter_map(|l| {
            Some(Link {
                from: map[l.from]?,
                to: map[l.to]?,
                drop: l.drop,
            })
        })
        .collect();
    let sink = map[topo.sink()].expect("sink survives");
    Ok((NetworkTopology::new(next, sink, &links)?, map))
}

/// Breadth-first balls of about `cluster_size` nodes around random centers
/// until `count` victims are chosen. `protected` nodes are never picked.
pub fn cluster_victims(
    topo: &NetworkTopology,
    count: usize,
    cluster_size: usize,
    protected: &BTreeSet<NodeId>,
    rng: &mut impl Rng,
) -> BTreeSet<NodeId> {
    let n = topo.node_count();
    let candidates: Vec<NodeId> = (0..n).filter(|i| !protected.contains(i)).collect();
    let count = count.min(candidates.len());
    let cluster_size = cluster_size.max(1);
    let mut undirected: Vec<Vec<NodeId>> = (0..n).map(|i| topo.neighbors(i).to_vec()).collect();
    for i in 0..n {
        for &j in topo.neighbors(i) {
            undirected[j].push(i);
        }
    }
    let mut victims = BTreeSet::new();
    while victims.len() < count {
        let free: Vec<NodeId> = candidates
            .iter()
            .copied()
            .filter(|c| !victims.contains(c))
            .collect();
        let center = free[rng.random_range(0..free.len())];
        let mut taken = 0;
        let mut seen = BTreeSet::from([center]);
        let mut queue = VecDeque::from([center]);
        while let Some(v) = queue.pop_front() {
            if taken == cluster_size || victims.len() == count {
                break;
            }
            if !protected.contains(&v) && victims.insert(v) {
                taken += 1;
            }
            for &w in &undirected[v] {
                if seen.insert(w) {
                    queue.push_back(w);
                }
            }
        }
    }
    victims
}
