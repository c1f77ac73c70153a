//! Distributed measure propagation.
//!
//! Every node keeps a table of its neighbors (last seen measure, drop
//! probability, forwarding bit, propagation bit) and repeatedly:
//! reads its neighbors' reported measures, disables links whose virtual node
//! would score below its own measure, and recomputes its measure from the
//! controlled row. The engine simulates the message layer deterministically
//! under one of three update schedules.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::central::Policy;
use crate::error::{Error, Result};
use crate::network::{kill_nodes, NetworkPfsa, NetworkTopology, NodeId};
use crate::pfsa::DisablingSet;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_QUIET_ROUNDS: usize = 3;
pub const DEFAULT_ROUND_CAP: u64 = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NeighborEntry {
    pub id: NodeId,
    pub last_seen: f64,
    pub drop_prob: f64,
    /// Packets may go this way: the virtual node strictly beats our measure.
    pub forwarding: bool,
    /// The link is not disabled for measure propagation.
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeState {
    pub id: NodeId,
    pub measure: f64,
    pub chi: f64,
    pub zeta: f64,
    pub table: Vec<NeighborEntry>,
}

/// What a neighbor tells us when queried.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeighborReport {
    pub id: NodeId,
    pub measure: f64,
    pub drop_prob: f64,
}

impl NodeState {
    pub fn new(id: NodeId, chi: f64, neighbors: &[NodeId], drops: &[f64]) -> Self {
        NodeState {
            id,
            measure: 0.0,
            chi,
            zeta: 1.0,
            table: neighbors
                .iter()
                .zip(drops)
                .map(|(&id, &drop_prob)| NeighborEntry {
                    id,
                    last_seen: 0.0,
                    drop_prob,
                    forwarding: false,
                    enabled: true,
                })
                .collect(),
        }
    }

    /// The value neighbors see: `ζ · ν`.
    pub fn reported_measure(&self) -> f64 {
        self.zeta * self.measure
    }

    /// Self-loop mass of the controlled row, from the disabled count.
    pub fn self_loop_mass(&self) -> f64 {
        if self.table.is_empty() {
            return 1.0;
        }
        let disabled = self.table.iter().filter(|e| !e.enabled).count();
        disabled as f64 / self.table.len() as f64
    }

    /// One update from already-collected neighbor values (aligned with the
    /// table). Returns `(|Δν|, forwarding bits flipped)`.
    fn update(&mut self, theta: f64, mut reported: impl FnMut(NodeId) -> f64) -> (f64, u32) {
        let old = self.measure;
        let m = self.table.len();
        if m == 0 {
            self.measure = self.chi;
            return ((self.measure - old).abs(), 0);
        }
        let keep = 1.0 - theta;
        let mut enabled_sum = 0.0;
        let mut disabled = 0usize;
        for e in &mut self.table {
            e.last_seen = reported(e.id);
            let virt = keep * (1.0 - e.drop_prob) * e.last_seen;
            e.enabled = !(virt < old);
            if e.enabled {
                enabled_sum += virt;
            } else {
                disabled += 1;
            }
        }
        let m = m as f64;
        let new = theta * self.chi + keep * (enabled_sum / m + disabled as f64 / m * old);
        self.measure = new.clamp(0.0, 1.0);
        let mut flips = 0;
        for e in &mut self.table {
            let fwd = keep * (1.0 - e.drop_prob) * e.last_seen > self.measure;
            if fwd != e.forwarding {
                e.forwarding = fwd;
                flips += 1;
            }
        }
        ((self.measure - old).abs(), flips)
    }
}

/// One asynchronous update of a single node from its neighbors' reports.
pub fn node_step(state: &NodeState, reports: &[NeighborReport], theta: f64) -> Result<NodeState> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::contract(format!("theta {theta} outside (0,1)")));
    }
    let mismatch = || Error::Protocol {
        node: state.id,
        reason: format!(
            "{} reports for {} neighbors, or ids differ",
            reports.len(),
            state.table.len()
        ),
    };
    if reports.len() != state.table.len() {
        return Err(mismatch());
    }
    let mut next = state.clone();
    for e in &mut next.table {
        let r = reports.iter().find(|r| r.id == e.id).ok_or_else(mismatch)?;
        e.drop_prob = r.drop_prob;
    }
    next.update(theta, |id| {
        reports
            .iter()
            .find(|r| r.id == id)
            .map(|r| r.measure)
            .expect("checked above")
    });
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// Everyone updates from the previous round's snapshot.
    Sync,
    /// Everyone updates once per round, in a fresh random order, reading live values.
    Perm,
    /// `N` firings of independent clocks per round, reading live values.
    Poisson,
}

impl FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sync" => Ok(ScheduleMode::Sync),
            "perm" => Ok(ScheduleMode::Perm),
            "poisson" => Ok(ScheduleMode::Poisson),
            other => Err(Error::validation(format!(
                "unknown schedule '{other}' (expected sync, perm or poisson)"
            ))),
        }
    }
}

impl fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleMode::Sync => "sync",
            ScheduleMode::Perm => "perm",
            ScheduleMode::Poisson => "poisson",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub mode: ScheduleMode,
    pub seed: u64,
}

impl Schedule {
    pub fn sync() -> Self {
        Schedule {
            mode: ScheduleMode::Sync,
            seed: 0,
        }
    }

    pub fn new(mode: ScheduleMode, seed: u64) -> Self {
        Schedule { mode, seed }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCriterion {
    pub tol: f64,
    pub quiet_rounds: usize,
    pub round_cap: u64,
}

impl Default for ConvergenceCriterion {
    fn default() -> Self {
        ConvergenceCriterion {
            tol: DEFAULT_TOL,
            quiet_rounds: DEFAULT_QUIET_ROUNDS,
            round_cap: DEFAULT_ROUND_CAP,
        }
    }
}

impl ConvergenceCriterion {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.quiet_rounds == 0 {
            return Err(Error::contract("convergence criterion needs tol > 0 and K >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RoundStats {
    pub round: u64,
    pub max_delta: f64,
    pub worst_node: Option<NodeId>,
    pub forwarding_changes: u64,
    /// Every node updated at least once since the last full coverage.
    pub covered: bool,
    /// Largest decrease of any node's measure in this round.
    pub max_decrease: f64,
}

/// Per-round physical-node measures and forwarding flips.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    /// Entry 0 is the initial state.
    pub measures: Vec<Vec<f64>>,
    pub forwarding_changes: Vec<Vec<u32>>,
}

impl Trace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("round,node_id,measure,num_forwarding_changes\n");
        for (r, (row, flips)) in self.measures.iter().zip(&self.forwarding_changes).enumerate() {
            for (i, (v, c)) in row.iter().zip(flips).enumerate() {
                s.push_str(&format!("{r},{i},{v},{c}\n"));
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct RunReport {
    /// First round of the final quiet streak.
    pub rounds_used: u64,
    pub rounds_run: u64,
    pub measures: Vec<f64>,
    pub policy: Policy,
    /// Largest single-update decrease seen during the run.
    pub max_decrease: f64,
    pub min_measure: f64,
    pub max_measure: f64,
    pub trace: Option<Trace>,
}

pub struct Engine {
    topo: NetworkTopology,
    theta: f64,
    nodes: Vec<NodeState>,
    schedule: Schedule,
    rng: ChaCha8Rng,
    round: u64,
    /// Nodes updated since coverage was last complete (poisson mode).
    pending: BTreeSet<NodeId>,
    firings_since_cover: usize,
    order: Vec<NodeId>,
    reported: Vec<f64>,
    flips: Vec<u32>,
}

impl Engine {
    pub fn new(topo: &NetworkTopology, theta: f64, schedule: Schedule, init: Option<&[f64]>) -> Result<Self> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::contract(format!("theta {theta} outside (0,1)")));
        }
        let n = topo.node_count();
        if let Some(init) = init {
            if init.len() != n {
                return Err(Error::contract(format!(
                    "initial measures for {} nodes, topology has {n}",
                    init.len()
                )));
            }
            if init.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::contract("initial measures must lie in [0,1]"));
            }
        }
        let nodes: Vec<NodeState> = (0..n)
            .map(|i| {
                let chi = if i == topo.sink() { 1.0 } else { 0.0 };
                let mut s = NodeState::new(i, chi, topo.neighbors(i), topo.drops(i));
                if let Some(init) = init {
                    s.measure = init[i];
                }
                s
            })
            .collect();
        let reported = nodes.iter().map(NodeState::reported_measure).collect();
        Ok(Engine {
            topo: topo.clone(),
            theta,
            nodes,
            schedule,
            rng: ChaCha8Rng::seed_from_u64(schedule.seed),
            round: 0,
            pending: (0..n).collect(),
            firings_since_cover: 0,
            order: (0..n).collect(),
            reported,
            flips: vec![0; n],
        })
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topo
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn measures(&self) -> Vec<f64> {
        self.nodes.iter().map(|s| s.measure).collect()
    }

    fn update_node(&mut self, i: NodeId, live: bool) -> (f64, u32) {
        let theta = self.theta;
        let reported = &self.reported;
        let (delta, flips) = self.nodes[i].update(theta, |j| reported[j]);
        if live {
            self.reported[i] = self.nodes[i].reported_measure();
        }
        self.flips[i] += flips;
        (delta, flips)
    }

    /// Advances one round of the schedule.
    pub fn step_round(&mut self) -> RoundStats {
        self.round += 1;
        self.flips.iter_mut().for_each(|f| *f = 0);
        let n = self.nodes.len();
        let mut stats = RoundStats {
            round: self.round,
            ..RoundStats::default()
        };
        let before: Vec<f64> = self.nodes.iter().map(|s| s.measure).collect();
        let note = |stats: &mut RoundStats, i: NodeId, delta: f64, flips: u32| {
            if delta > stats.max_delta || stats.worst_node.is_none() {
                stats.max_delta = stats.max_delta.max(delta);
                stats.worst_node = Some(i);
            }
            stats.forwarding_changes += flips as u64;
        };
        match self.schedule.mode {
            ScheduleMode::Sync => {
                for i in 0..n {
                    let (d, f) = self.update_node(i, false);
                    note(&mut stats, i, d, f);
                }
                for i in 0..n {
                    self.reported[i] = self.nodes[i].reported_measure();
                }
                stats.covered = true;
            }
            ScheduleMode::Perm => {
                let mut order = std::mem::take(&mut self.order);
                order.shuffle(&mut self.rng);
                for &i in &order {
                    let (d, f) = self.update_node(i, true);
                    note(&mut stats, i, d, f);
                }
                self.order = order;
                stats.covered = true;
            }
            ScheduleMode::Poisson => {
                // With i.i.d. exponential clocks every firing is a uniform node.
                let mut covered = false;
                for _ in 0..n {
                    let i = self.rng.random_range(0..n);
                    let (d, f) = self.update_node(i, true);
                    note(&mut stats, i, d, f);
                    covered |= self.mark_fired(i);
                    if self.firings_since_cover >= 3 * n {
                        // Fairness fallback: sweep the nodes that were starved.
                        let starved: Vec<NodeId> = self.pending.iter().copied().collect();
                        for j in starved {
                            let (d, f) = self.update_node(j, true);
                            note(&mut stats, j, d, f);
                            covered |= self.mark_fired(j);
                        }
                    }
                }
                stats.covered = covered || n == 0;
            }
        }
        stats.max_decrease = self
            .nodes
            .iter()
            .zip(&before)
            .fold(0.0, |acc, (s, b)| acc.max(b - s.measure));
        stats
    }

    /// Records a firing; true when it completes a full coverage of the nodes.
    fn mark_fired(&mut self, i: NodeId) -> bool {
        self.firings_since_cover += 1;
        self.pending.remove(&i);
        if self.pending.is_empty() {
            self.pending = (0..self.nodes.len()).collect();
            self.firings_since_cover = 0;
            true
        } else {
            false
        }
    }

    /// Iterates until `K` consecutive rounds move no node by `tol` or more.
    ///
    /// In poisson mode the quiet streak must also contain a full coverage,
    /// so a node that happened not to fire cannot hide a pending change.
    pub fn run_to_convergence(&mut self, crit: &ConvergenceCriterion, record_trace: bool) -> Result<RunReport> {
        crit.validate()?;
        let n = self.nodes.len();
        let mut trace = record_trace.then(|| Trace {
            measures: vec![self.measures()],
            forwarding_changes: vec![vec![0; n]],
        });
        let mut streak = 0usize;
        let mut streak_start = 0u64;
        let mut streak_covered = false;
        let mut max_decrease: f64 = 0.0;
        let mut min_measure = self.nodes.iter().map(|s| s.measure).fold(f64::INFINITY, f64::min);
        let mut max_measure = self.nodes.iter().map(|s| s.measure).fold(f64::NEG_INFINITY, f64::max);
        let start_round = self.round;
        let mut last = RoundStats::default();
        while self.round - start_round < crit.round_cap {
            let stats = self.step_round();
            max_decrease = max_decrease.max(stats.max_decrease);
            for s in &self.nodes {
                min_measure = min_measure.min(s.measure);
                max_measure = max_measure.max(s.measure);
            }
            if let Some(t) = trace.as_mut() {
                t.measures.push(self.measures());
                t.forwarding_changes.push(self.flips.clone());
            }
            if stats.max_delta < crit.tol {
                if streak == 0 {
                    streak_start = stats.round;
                    streak_covered = false;
                }
                streak += 1;
                streak_covered |= stats.covered;
                if streak >= crit.quiet_rounds && streak_covered {
                    return Ok(RunReport {
                        rounds_used: streak_start - start_round,
                        rounds_run: self.round - start_round,
                        measures: self.measures(),
                        policy: self.extract_policy(),
                        max_decrease,
                        min_measure: if n == 0 { 0.0 } else { min_measure },
                        max_measure: if n == 0 { 0.0 } else { max_measure },
                        trace,
                    });
                }
            } else {
                streak = 0;
            }
            last = stats;
        }
        Err(Error::NonConvergence {
            cap: crit.round_cap,
            detail: format!(
                "node {:?} still moved by {:.3e} in the last round",
                last.worst_node, last.max_delta
            ),
        })
    }

    /// Forwarding policy from one consistent snapshot of the current measures.
    pub fn extract_policy(&self) -> Policy {
        extract_policy(&self.nodes, self.theta)
    }

    /// Links currently enabled for propagation, as a disabling set of `net`.
    pub fn disabling(&self, net: &NetworkPfsa) -> DisablingSet {
        let mut pairs = Vec::new();
        for (i, s) in self.nodes.iter().enumerate() {
            for (k, e) in s.table.iter().enumerate() {
                if !e.enabled {
                    pairs.push((i, net.link_symbol(i, k)));
                }
            }
        }
        DisablingSet::from_pairs(pairs)
    }

    pub fn set_sink(&mut self, sink: NodeId) -> Result<()> {
        self.topo.set_sink(sink)?;
        for s in &mut self.nodes {
            s.chi = if s.id == sink { 1.0 } else { 0.0 };
        }
        Ok(())
    }

    pub fn set_zeta(&mut self, node: NodeId, zeta: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&zeta) {
            return Err(Error::validation(format!("zeta {zeta} outside [0,1]")));
        }
        let s = self
            .nodes
            .get_mut(node)
            .ok_or_else(|| Error::validation(format!("no node {node}")))?;
        s.zeta = zeta;
        self.reported[node] = s.reported_measure();
        Ok(())
    }

    /// Changes the drop probability the engine believes for link `i → j`.
    pub fn set_drop(&mut self, i: NodeId, j: NodeId, drop: f64) -> Result<()> {
        self.topo.set_drop(i, j, drop)?;
        let k = self.topo.neighbor_slot(i, j).expect("link exists");
        self.nodes[i].table[k].drop_prob = drop;
        Ok(())
    }

    /// Removes nodes, keeping survivors' measures and tables. Returns the id map.
    pub fn kill(&mut self, victims: &BTreeSet<NodeId>) -> Result<Vec<Option<NodeId>>> {
        let (topo, map) = kill_nodes(&self.topo, victims)?;
        let mut nodes = Vec::with_capacity(topo.node_count());
        for old in std::mem::take(&mut self.nodes) {
            let Some(new_id) = map[old.id] else { continue };
            let table = old
                .table
                .into_iter()
                .filter_map(|mut e| {
                    e.id = map[e.id]?;
                    Some(e)
                })
                .collect();
            nodes.push(NodeState {
                id: new_id,
                table,
                ..old
            });
        }
        self.nodes = nodes;
        self.topo = topo;
        let n = self.nodes.len();
        self.reported = self.nodes.iter().map(NodeState::reported_measure).collect();
        self.pending = (0..n).collect();
        self.firings_since_cover = 0;
        self.order = (0..n).collect();
        self.flips = vec![0; n];
        Ok(map)
    }
}

/// Per node, forward to `j` iff `(1−θ)(1−λ_ij)·r_j > ν_i` with `r_j` the
/// neighbor's reported measure, all read from the same snapshot.
pub fn extract_policy(states: &[NodeState], theta: f64) -> Policy {
    let keep = 1.0 - theta;
    Policy {
        enabled: states
            .iter()
            .map(|s| {
                s.table
                    .iter()
                    .filter(|e| keep * (1.0 - e.drop_prob) * states[e.id].reported_measure() > s.measure)
                    .map(|e| e.id)
                    .collect()
            })
            .collect(),
    }
}

/// Builds an engine, runs it to convergence, and returns the report.
pub fn run_to_convergence(
    topo: &NetworkTopology,
    theta: f64,
    schedule: Schedule,
    crit: &ConvergenceCriterion,
    init: Option<&[f64]>,
) -> Result<RunReport> {
    Engine::new(topo, theta, schedule, init)?.run_to_convergence(crit, false)
}

/// One row of a convergence-time sweep.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfileRow {
    pub n: usize,
    pub epsilon: f64,
    pub mean_rounds: f64,
    pub min: u64,
    pub max: u64,
}

/// Instance family used by sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSettings {
    pub max_degree: usize,
    pub drop_range: (f64, f64),
    pub schedule: ScheduleMode,
}

impl Default for ProfileSettings {
    fn default() -> Self {
        ProfileSettings {
            max_degree: 6,
            drop_range: (0.05, 0.6),
            schedule: ScheduleMode::Sync,
        }
    }
}

/// Mean/min/max rounds to convergence over `trials` random topologies for
/// every `(n, ε)` pair, with `θ = ε / m²`. Trial `t` at size `n` uses the
/// same topology for every `ε`.
pub fn convergence_rounds_profile(
    n_values: &[usize],
    epsilon_values: &[f64],
    trials: usize,
    seed: u64,
    settings: &ProfileSettings,
) -> Result<Vec<ProfileRow>> {
    if n_values.is_empty() || epsilon_values.is_empty() || trials == 0 {
        return Err(Error::validation("sweep needs non-empty n and epsilon grids and at least one trial"));
    }
    let mut rows = Vec::new();
    for &n in n_values {
        let topos: Vec<NetworkTopology> = (0..trials)
            .map(|t| {
                let s = seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add((n as u64) << 20)
                    .wrapping_add(t as u64);
                crate::network::random_topology(&crate::network::TopologyParams::new(
                    n,
                    settings.max_degree,
                    settings.drop_range,
                    s,
                ))
            })
            .collect::<Result<_>>()?;
        for &eps in epsilon_values {
            let trial = |t: usize| -> Result<u64> {
                let topo = &topos[t];
                let theta = crate::central::theta_for_epsilon(eps, topo)?;
                let schedule = Schedule::new(settings.schedule, seed.wrapping_add(t as u64));
                Ok(run_to_convergence(topo, theta, schedule, &ConvergenceCriterion::default(), None)?.rounds_used)
            };
            let rounds = parallel_map(trials, trial)?;
            rows.push(ProfileRow {
                n,
                epsilon: eps,
                mean_rounds: rounds.iter().sum::<u64>() as f64 / trials as f64,
                min: *rounds.iter().min().expect("trials > 0"),
                max: *rounds.iter().max().expect("trials > 0"),
            });
        }
    }
    Ok(rows)
}

/// Runs `f(0..count)` on scoped threads; results come back in index order.
fn parallel_map<T: Send>(count: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get());
    parallel_map_with(workers, count, f)
}

fn parallel_map_with<T: Send>(workers: usize, count: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = workers.min(count);
    if workers <= 1 {
        return (0..count).map(f).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = (0..count).map(|_| None).collect();
    std::thread::scope(|scope| {
        let f = &f;
        for (w, chunk) in slots.chunks_mut(count.div_ceil(workers)).enumerate() {
            let base = w * count.div_ceil(workers);
            scope.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(base + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

/// Random initial measures in `[0,1)`, one per node.
pub fn random_init(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::central::{optimize_centralized, performance_vector};
    use crate::network::{build_pfsa, random_topology, Link, TopologyParams};
    use crate::pfsa::compute_measure;
    use approx::assert_abs_diff_eq;

    fn link(from: NodeId, to: NodeId, drop: f64) -> Link {
        Link { from, to, drop }
    }

    fn report(id: NodeId, measure: f64, drop_prob: f64) -> NeighborReport {
        NeighborReport {
            id,
            measure,
            drop_prob,
        }
    }

    #[test]
    fn sink_first_update_is_theta() {
        let s = NodeState::new(0, 1.0, &[1, 2], &[0.1, 0.2]);
        let next = node_step(&s, &[report(1, 0.0, 0.1), report(2, 0.0, 0.2)], 0.05).unwrap();
        assert_abs_diff_eq!(next.measure, 0.05, epsilon = 1e-16);
    }

    #[test]
    fn zero_reports_keep_zero() {
        let s = NodeState::new(3, 0.0, &[1], &[0.1]);
        let next = node_step(&s, &[report(1, 0.0, 0.1)], 0.05).unwrap();
        assert_eq!(next.measure, 0.0);
        assert!(!next.table[0].forwarding);
    }

    #[test]
    fn virtual_measure_and_update_formula() {
        // One neighbor at 0.5, λ = 0.2, θ = 0.01: virtual node 0.99·0.8·0.5 = 0.396.
        let s = NodeState::new(0, 0.0, &[1], &[0.2]);
        let next = node_step(&s, &[report(1, 0.5, 0.2)], 0.01).unwrap();
        assert_abs_diff_eq!(next.measure, 0.99 * 0.396, epsilon = 1e-15);
        assert!(next.table[0].enabled);
        assert!(next.table[0].forwarding);

        // Two neighbors, one below our measure: it is disabled and its share
        // becomes self-loop mass.
        let mut s = NodeState::new(0, 0.0, &[1, 2], &[0.2, 0.0]);
        s.measure = 0.3;
        let next = node_step(&s, &[report(1, 0.5, 0.2), report(2, 0.1, 0.0)], 0.01).unwrap();
        assert!(next.table[0].enabled && !next.table[1].enabled);
        assert_eq!(next.self_loop_mass(), 0.5);
        let expected = 0.99 * (0.5 * 0.396 + 0.5 * 0.3);
        assert_abs_diff_eq!(next.measure, expected, epsilon = 1e-15);
    }

    #[test]
    fn report_mismatch_is_protocol_error() {
        let s = NodeState::new(4, 0.0, &[1, 2], &[0.1, 0.1]);
        assert!(matches!(
            node_step(&s, &[report(1, 0.1, 0.1)], 0.1),
            Err(Error::Protocol { node: 4, .. })
        ));
        assert!(matches!(
            node_step(&s, &[report(1, 0.1, 0.1), report(3, 0.1, 0.1)], 0.1),
            Err(Error::Protocol { .. })
        ));
    }

    #[test]
    fn reported_measure_scales_with_zeta() {
        let mut s = NodeState::new(0, 0.0, &[], &[]);
        s.measure = 0.8;
        assert_eq!(s.reported_measure(), 0.8);
        s.zeta = 0.5;
        assert_eq!(s.reported_measure(), 0.4);
        s.zeta = 0.0;
        assert_eq!(s.reported_measure(), 0.0);
    }

    #[test]
    fn attenuated_relay_loses_its_upstream_neighbor() {
        // Upstream node at 0.41 looking at a relay measured 0.8 over λ = 0.1.
        let theta = 0.01;
        let mut up = NodeState::new(0, 0.0, &[1], &[0.1]);
        up.measure = 0.41;
        let next = node_step(&up, &[report(1, 0.8, 0.1)], theta).unwrap();
        assert!(next.table[0].forwarding);
        let mut up2 = next.clone();
        up2.measure = 0.41;
        let next = node_step(&up2, &[report(1, 0.5 * 0.8, 0.1)], theta).unwrap();
        assert!(!next.table[0].forwarding);
        assert!(!next.table[0].enabled);
    }

    #[test]
    fn single_node_converges_in_two_rounds() {
        let t = NetworkTopology::new(1, 0, &[]).unwrap();
        let r = run_to_convergence(&t, 0.1, Schedule::sync(), &ConvergenceCriterion::default(), None).unwrap();
        assert!(r.rounds_used <= 2);
        assert_eq!(r.measures, vec![1.0]);
    }

    fn check_against_oracles(t: &NetworkTopology, theta: f64, mode: ScheduleMode) -> RunReport {
        let net = build_pfsa(t).unwrap();
        let mut engine = Engine::new(t, theta, Schedule::new(mode, 17), None).unwrap();
        let r = engine.run_to_convergence(&ConvergenceCriterion::default(), false).unwrap();
        let pi = net.pfsa.apply_disabling(&engine.disabling(&net)).unwrap().transition_matrix();
        let nu = compute_measure(&pi, net.pfsa.characteristic(), theta).unwrap();
        for i in 0..t.node_count() {
            assert!((nu.values[i] - r.measures[i]).abs() < 1e-9, "node {i}");
        }
        let central = optimize_centralized(&net, theta).unwrap();
        for i in 0..t.node_count() {
            assert!((central.measure.values[i] - r.measures[i]).abs() < 1e-9);
        }
        assert!(r.max_decrease <= 1e-12, "decrease {}", r.max_decrease);
        assert!(r.policy.find_loop().is_none());
        r
    }

    #[test]
    fn converges_to_the_centralized_fixpoint_under_every_schedule() {
        let t = random_topology(&TopologyParams::new(30, 5, (0.05, 0.6), 21)).unwrap();
        let a = check_against_oracles(&t, 0.05, ScheduleMode::Sync);
        let b = check_against_oracles(&t, 0.05, ScheduleMode::Perm);
        let c = check_against_oracles(&t, 0.05, ScheduleMode::Poisson);
        for i in 0..t.node_count() {
            assert!((a.measures[i] - b.measures[i]).abs() < 1e-8);
            assert!((a.measures[i] - c.measures[i]).abs() < 1e-8);
        }
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.policy, c.policy);
    }

    #[test]
    fn fifty_nodes_small_theta_matches_linear_solve() {
        let t = random_topology(&TopologyParams::new(50, 6, (0.05, 0.6), 3)).unwrap();
        check_against_oracles(&t, 0.01, ScheduleMode::Sync);
    }

    #[test]
    fn init_independence_and_decay() {
        let t = random_topology(&TopologyParams::new(25, 5, (0.05, 0.6), 8)).unwrap();
        let theta = 0.05;
        let alpha = random_init(25, 99);
        let l1: f64 = alpha.iter().sum();
        let mut zero = Engine::new(&t, theta, Schedule::sync(), None).unwrap();
        let mut rand = Engine::new(&t, theta, Schedule::sync(), Some(&alpha)).unwrap();
        for k in 1..=40u32 {
            zero.step_round();
            rand.step_round();
            let dev = zero
                .measures()
                .iter()
                .zip(rand.measures())
                .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
            assert!(dev <= (1.0 - theta).powi(k as i32) * l1 + 1e-15, "round {k}");
        }
        let crit = ConvergenceCriterion::default();
        let a = zero.run_to_convergence(&crit, false).unwrap();
        let b = rand.run_to_convergence(&crit, false).unwrap();
        for (x, y) in a.measures.iter().zip(&b.measures) {
            assert!((x - y).abs() < 1e-8);
        }
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn trace_is_monotone_from_zero_and_exports_csv() {
        let t = random_topology(&TopologyParams::new(8, 3, (0.1, 0.4), 2)).unwrap();
        let mut e = Engine::new(&t, 0.2, Schedule::sync(), None).unwrap();
        let r = e.run_to_convergence(&ConvergenceCriterion::default(), true).unwrap();
        let trace = r.trace.unwrap();
        assert_eq!(trace.measures.len() as u64, r.rounds_run + 1);
        for w in trace.measures.windows(2) {
            for (a, b) in w[0].iter().zip(&w[1]) {
                assert!(*b >= *a - 1e-12);
            }
        }
        let csv = trace.to_csv();
        assert!(csv.starts_with("round,node_id,measure,num_forwarding_changes\n"));
        assert_eq!(csv.lines().count(), 1 + 8 * trace.measures.len());
    }

    #[test]
    fn diamond_keeps_both_good_branches() {
        // Branch qualities within a factor of about (1 − mθ) of each other:
        // both virtual nodes beat the source, so both stay in use.
        let t = NetworkTopology::new(
            4,
            3,
            &[link(0, 1, 0.1), link(0, 2, 0.105), link(1, 3, 0.0), link(2, 3, 0.0)],
        )
        .unwrap();
        let theta = 0.01;
        let r = run_to_convergence(&t, theta, Schedule::sync(), &ConvergenceCriterion::default(), None).unwrap();
        assert_eq!(r.policy.enabled[0], vec![1, 2]);
        let net = build_pfsa(&t).unwrap();
        let central = optimize_centralized(&net, theta).unwrap();
        assert_eq!(central.forwarding_policy(&net, &t), r.policy);
        let rho = performance_vector(&net, &t, &r.policy).unwrap();
        assert_abs_diff_eq!(rho.rho[0], 0.5 * 0.9 + 0.5 * 0.895, epsilon = 1e-12);
    }

    #[test]
    fn equal_measures_do_not_forward() {
        let mut a = NodeState::new(0, 0.0, &[1], &[0.0]);
        let mut b = NodeState::new(1, 0.0, &[0], &[0.0]);
        a.measure = 0.3;
        b.measure = 0.3;
        let p = extract_policy(&[a, b], 0.01);
        assert!(p.enabled.iter().all(Vec::is_empty));
    }

    #[test]
    fn zero_zeta_drains_inbound_forwarding() {
        let t = random_topology(&TopologyParams::new(20, 4, (0.05, 0.3), 6)).unwrap();
        let theta = 0.05;
        let mut e = Engine::new(&t, theta, Schedule::sync(), None).unwrap();
        e.run_to_convergence(&ConvergenceCriterion::default(), false).unwrap();
        let relay = (0..20)
            .find(|&v| v != t.sink() && e.extract_policy().enabled.iter().any(|row| row.contains(&v)))
            .expect("some relay carries traffic");
        e.set_zeta(relay, 0.0).unwrap();
        e.run_to_convergence(&ConvergenceCriterion::default(), false).unwrap();
        let p = e.extract_policy();
        assert!(p.enabled.iter().all(|row| !row.contains(&relay)));
    }

    #[test]
    fn sink_move_and_kill_reconverge() {
        let t = random_topology(&TopologyParams::new(30, 5, (0.05, 0.5), 12)).unwrap();
        let theta = 0.05;
        let crit = ConvergenceCriterion::default();
        let mut e = Engine::new(&t, theta, Schedule::sync(), None).unwrap();
        e.run_to_convergence(&crit, false).unwrap();
        let new_sink = (t.sink() + 7) % 30;
        e.set_sink(new_sink).unwrap();
        let r = e.run_to_convergence(&crit, false).unwrap();
        let fresh = run_to_convergence(e.topology(), theta, Schedule::sync(), &crit, None).unwrap();
        for (a, b) in r.measures.iter().zip(&fresh.measures) {
            assert!((a - b).abs() < 1e-8);
        }
        assert_eq!(r.policy, fresh.policy);

        let victims: BTreeSet<NodeId> = (0..30).filter(|&v| v != new_sink && v % 3 == 0).collect();
        let map = e.kill(&victims).unwrap();
        assert_eq!(e.topology().sink(), map[new_sink].unwrap());
        let r = e.run_to_convergence(&crit, false).unwrap();
        let fresh = run_to_convergence(e.topology(), theta, Schedule::sync(), &crit, None).unwrap();
        for (a, b) in r.measures.iter().zip(&fresh.measures) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(r.policy.find_loop().is_none());
    }

    #[test]
    fn round_cap_reports_worst_node() {
        let t = random_topology(&TopologyParams::new(10, 3, (0.05, 0.5), 1)).unwrap();
        let crit = ConvergenceCriterion {
            round_cap: 5,
            ..ConvergenceCriterion::default()
        };
        match run_to_convergence(&t, 0.01, Schedule::sync(), &crit, None) {
            Err(Error::NonConvergence { cap: 5, detail }) => assert!(detail.contains("node")),
            other => panic!("expected cap error, got {other:?}"),
        }
    }

    #[test]
    fn schedule_modes_parse() {
        assert_eq!("poisson".parse::<ScheduleMode>().unwrap(), ScheduleMode::Poisson);
        assert!("fifo".parse::<ScheduleMode>().is_err());
        assert_eq!(ScheduleMode::Perm.to_string(), "perm");
    }

    #[test]
    fn parallel_map_keeps_index_order() {
        let out = parallel_map_with(4, 10, |k| Ok(k * k)).unwrap();
        assert_eq!(out, (0..10).map(|k| k * k).collect::<Vec<_>>());
        let err = parallel_map_with(3, 5, |k| if k == 3 { Err(Error::validation("x")) } else { Ok(k) });
        assert!(err.is_err());
    }

    #[test]
    fn profile_rejects_empty_grid_and_runs_small_grid() {
        let s = ProfileSettings::default();
        assert!(convergence_rounds_profile(&[], &[0.1], 2, 0, &s).is_err());
        let rows = convergence_rounds_profile(&[1, 10], &[0.2], 2, 0, &s).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].max <= 2);
    }
}
