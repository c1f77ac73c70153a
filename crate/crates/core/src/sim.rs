//! Packet-level simulation on top of the engine: empirical delivery,
//! windowed drop estimation, and scripted network events.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::central::{theta_for_epsilon, PerformanceVector, Policy};
use crate::engine::{ConvergenceCriterion, Engine, Schedule};
use crate::error::{Error, Result};
use crate::network::{cluster_victims, NetworkTopology, NodeId};

/// Noisy drop probabilities are clipped to this range.
pub const NOISE_CLIP: (f64, f64) = (0.01, 0.99);

/// Default estimator window. With one probe per link per round, shorter
/// windows let λ̂ overshoot often enough that nodes near the sink disable
/// every link, and their measures then recover only at rate θ per round.
pub const DEFAULT_WINDOW: usize = 500;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PacketOutcome {
    pub source: NodeId,
    pub path: Vec<NodeId>,
    pub delivered: bool,
    pub hops: usize,
}

#[derive(Clone, Debug)]
pub struct PacketStats {
    pub sources: Vec<NodeId>,
    pub sent: Vec<u64>,
    pub delivered: Vec<u64>,
    /// Kept only when requested.
    pub log: Vec<PacketOutcome>,
}

impl PacketStats {
    pub fn rate(&self, k: usize) -> f64 {
        self.delivered[k] as f64 / self.sent[k] as f64
    }

    pub fn rate_of(&self, source: NodeId) -> Option<f64> {
        self.sources.iter().position(|&s| s == source).map(|k| self.rate(k))
    }
}

/// Walks one packet from `source` under `policy`: uniform choice among the
/// enabled neighbors, survival `1 − λ` per hop, no retransmission.
pub fn route_packet(
    topo: &NetworkTopology,
    policy: &Policy,
    source: NodeId,
    rng: &mut impl Rng,
    keep_path: bool,
) -> PacketOutcome {
    let sink = topo.sink();
    let mut at = source;
    let mut path = vec![source];
    let mut hops = 0;
    loop {
        if at == sink {
            break;
        }
        let choices = &policy.enabled[at];
        if choices.is_empty() {
            break;
        }
        let next = choices[rng.random_range(0..choices.len())];
        hops += 1;
        let lambda = topo.drop_prob(at, next).expect("policy uses existing links");
        if rng.random::<f64>() < lambda {
            break;
        }
        at = next;
        if keep_path {
            path.push(at);
        }
    }
    if !keep_path && at != source {
        path.push(at);
    }
    PacketOutcome {
        source,
        delivered: at == sink,
        path,
        hops,
    }
}

pub fn simulate_packets(
    topo: &NetworkTopology,
    policy: &Policy,
    sources: &[NodeId],
    n_packets: u64,
    seed: u64,
    keep_log: bool,
) -> Result<PacketStats> {
    policy.validate(topo)?;
    if let Some(cycle) = policy.find_loop() {
        return Err(Error::contract(format!("policy has a forwarding loop through {cycle:?}")));
    }
    if n_packets == 0 {
        return Err(Error::validation("need at least one packet per source"));
    }
    if let Some(s) = sources.iter().find(|&&s| s >= topo.node_count()) {
        return Err(Error::validation(format!("source {s} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = PacketStats {
        sources: sources.to_vec(),
        sent: vec![0; sources.len()],
        delivered: vec![0; sources.len()],
        log: Vec::new(),
    };
    for (k, &s) in sources.iter().enumerate() {
        for _ in 0..n_packets {
            let out = route_packet(topo, policy, s, &mut rng, keep_log);
            stats.sent[k] += 1;
            stats.delivered[k] += out.delivered as u64;
            if keep_log {
                stats.log.push(out);
            }
        }
    }
    Ok(stats)
}

/// Fraction of packets whose path visits `node` after leaving the source.
pub fn inbound_share(log: &[PacketOutcome], node: NodeId) -> f64 {
    if log.is_empty() {
        return 0.0;
    }
    let hits = log.iter().filter(|p| p.path[1..].contains(&node)).count();
    hits as f64 / log.len() as f64
}

/// `ρ` of a loop-free forwarding policy, node by node in topological order.
///
/// Equivalent to the absorption solve of the controlled chain (disabled
/// links only add self-loop mass, which renormalizes away) but O(E).
pub fn forwarding_rho(topo: &NetworkTopology, policy: &Policy) -> Result<PerformanceVector> {
    let order = policy
        .reverse_topological_order()
        .ok_or_else(|| Error::contract("forwarding policy has a loop"))?;
    let sink = topo.sink();
    let mut rho = vec![0.0; topo.node_count()];
    for i in order {
        rho[i] = if i == sink {
            1.0
        } else {
            let row = &policy.enabled[i];
            if row.is_empty() {
                0.0
            } else {
                row.iter()
                    .map(|&j| (1.0 - topo.drop_prob(i, j).expect("existing link")) * rho[j])
                    .sum::<f64>()
                    / row.len() as f64
            }
        };
    }
    Ok(PerformanceVector { rho })
}

/// Sliding-window drop estimate per directed link.
#[derive(Clone, Debug)]
pub struct DropEstimator {
    window: usize,
    min_samples: usize,
    links: BTreeMap<(NodeId, NodeId), (VecDeque<bool>, usize)>,
}

impl DropEstimator {
    pub const PRIOR: f64 = 0.5;

    pub fn new(window: usize, min_samples: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::validation("estimator window must be at least 1"));
        }
        Ok(DropEstimator {
            window,
            min_samples: min_samples.clamp(1, window),
            links: BTreeMap::new(),
        })
    }

    pub fn record(&mut self, from: NodeId, to: NodeId, dropped: bool) {
        let (win, drops) = self.links.entry((from, to)).or_default();
        win.push_back(dropped);
        *drops += dropped as usize;
        if win.len() > self.window {
            *drops -= win.pop_front().expect("non-empty") as usize;
        }
    }

    pub fn samples(&self, from: NodeId, to: NodeId) -> usize {
        self.links.get(&(from, to)).map_or(0, |(w, _)| w.len())
    }

    /// Drops over the window, or the prior until enough samples exist.
    pub fn estimate(&self, from: NodeId, to: NodeId) -> f64 {
        match self.links.get(&(from, to)) {
            Some((win, drops)) if win.len() >= self.min_samples => *drops as f64 / win.len() as f64,
            _ => Self::PRIOR,
        }
    }

    /// Re-keys links after node removal; links touching a victim are dropped.
    pub fn remap(&mut self, map: &[Option<NodeId>]) {
        let old = std::mem::take(&mut self.links);
        for ((a, b), v) in old {
            if let (Some(a), Some(b)) = (map[a], map[b]) {
                self.links.insert((a, b), v);
            }
        }
    }
}

/// Final sliding-window estimate of each outcome stream (`true` = dropped).
pub fn estimate_drops(streams: &[Vec<bool>], window: usize) -> Result<Vec<f64>> {
    let mut est = DropEstimator::new(window, 1)?;
    for (k, s) in streams.iter().enumerate() {
        for &d in s {
            est.record(k, k, d);
        }
    }
    Ok((0..streams.len()).map(|k| est.estimate(k, k)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum Event {
    MoveSink {
        node: NodeId,
    },
    SetDropNoise {
        sigma: f64,
    },
    /// Explicit `victims`, or `fraction` of the current nodes in BFS clusters.
    KillNodes {
        #[serde(default)]
        victims: Vec<NodeId>,
        #[serde(default)]
        fraction: f64,
        #[serde(default = "default_cluster")]
        cluster_size: usize,
    },
    SetZeta {
        node: NodeId,
        value: f64,
    },
    InjectTraffic {
        sources: Vec<NodeId>,
        packets_per_round: u64,
    },
}

fn default_cluster() -> usize {
    10
}

impl Event {
    pub fn tag(&self) -> &'static str {
        match self {
            Event::MoveSink { .. } => "move_sink",
            Event::SetDropNoise { .. } => "set_drop_noise",
            Event::KillNodes { .. } => "kill_nodes",
            Event::SetZeta { .. } => "set_zeta",
            Event::InjectTraffic { .. } => "inject_traffic",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub round: u64,
    #[serde(flatten)]
    pub event: Event,
}

/// Timed events over a fixed horizon. Node ids refer to the original topology
/// throughout, even after removals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub horizon: u64,
    pub seed: u64,
    #[serde(default)]
    pub probes: Vec<NodeId>,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
    /// Feed windowed drop estimates (instead of the current true λ) to the engine.
    #[serde(default)]
    pub closed_loop: bool,
    #[serde(default = "default_window")]
    pub estimator_window: usize,
    /// Converge before round 1.
    #[serde(default = "default_true")]
    pub preconverge: bool,
}

fn default_window() -> usize {
    DEFAULT_WINDOW
}

fn default_true() -> bool {
    true
}

impl ScenarioScript {
    pub fn new(horizon: u64, seed: u64) -> Self {
        ScenarioScript {
            horizon,
            seed,
            probes: Vec::new(),
            events: Vec::new(),
            closed_loop: false,
            estimator_window: default_window(),
            preconverge: true,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Static checks; targets that depend on earlier events are checked when applied.
    pub fn validate(&self, topo: &NetworkTopology) -> Result<()> {
        let n = topo.node_count();
        let bad = |msg: String| Err(Error::Validation(format!("scenario: {msg}")));
        if self.estimator_window == 0 {
            return bad("estimator_window must be at least 1".into());
        }
        if let Some(p) = self.probes.iter().find(|&&p| p >= n) {
            return bad(format!("probe {p} out of range"));
        }
        if self.events.windows(2).any(|w| w[0].round > w[1].round) {
            return bad("event rounds must be non-decreasing".into());
        }
        for e in &self.events {
            if e.round == 0 || e.round > self.horizon {
                return bad(format!("event at round {} outside 1..={}", e.round, self.horizon));
            }
            match &e.event {
                Event::MoveSink { node } if *node >= n => return bad(format!("sink target {node} out of range")),
                Event::SetDropNoise { sigma } if !(*sigma >= 0.0) => return bad(format!("noise sigma {sigma} < 0")),
                Event::KillNodes {
                    victims,
                    fraction,
                    cluster_size,
                } => {
                    if !(0.0..=1.0).contains(fraction) {
                        return bad(format!("kill fraction {fraction} outside [0,1]"));
                    }
                    if *cluster_size == 0 {
                        return bad("cluster_size must be at least 1".into());
                    }
                    if let Some(v) = victims.iter().find(|&&v| v >= n) {
                        return bad(format!("victim {v} out of range"));
                    }
                    if let Some(v) = victims.iter().find(|v| self.probes.contains(v)) {
                        return bad(format!("victim {v} is a probe"));
                    }
                }
                Event::SetZeta { node, value } => {
                    if *node >= n || !(0.0..=1.0).contains(value) {
                        return bad(format!("zeta {value} for node {node} is invalid"));
                    }
                }
                Event::InjectTraffic { sources, .. } => {
                    if let Some(s) = sources.iter().find(|&&s| s >= n) {
                        return bad(format!("traffic source {s} out of range"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub round: u64,
    pub event_tag: String,
    pub rho_norm: f64,
    pub corrections: u64,
    /// `ρ` at each probe (original ids, script order).
    pub probes: Vec<f64>,
    pub loop_free: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventReport {
    pub round: u64,
    pub tag: String,
    /// Rounds from the event to its last forwarding correction; `None` if
    /// corrections had not stopped before the next event or the horizon.
    pub settle_rounds: Option<u64>,
    pub rho_norm_after: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub theta: f64,
    pub probes: Vec<NodeId>,
    pub rows: Vec<MetricsRow>,
    pub events: Vec<EventReport>,
    pub packets: Vec<PacketOutcome>,
    /// Engine state at the end of the horizon.
    pub final_policy: Policy,
    pub final_topology: NetworkTopology,
    /// Original id → final id.
    pub id_map: Vec<Option<NodeId>>,
}

impl ScenarioOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("round,event_tag,rho_norm,corrections");
        for p in &self.probes {
            s.push_str(&format!(",probe_{p}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}", r.round, r.event_tag, r.rho_norm, r.corrections));
            for v in &r.probes {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn packets_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for p in &self.packets {
            s.push_str(&serde_json::to_string(p)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn all_loop_free(&self) -> bool {
        self.rows.iter().all(|r| r.loop_free)
    }
}

const SETTLE_QUIET: usize = 3;

struct Sim {
    engine: Engine,
    /// True base λ (never noisy), with the engine's node ids.
    base: NetworkTopology,
    id_map: Vec<Option<NodeId>>,
    sigma: f64,
    estimator: DropEstimator,
    closed_loop: bool,
    traffic: Vec<(Vec<NodeId>, u64)>,
}

impl Sim {
    fn current(&self, orig: NodeId, what: &str) -> Result<NodeId> {
        self.id_map[orig].ok_or_else(|| Error::Validation(format!("scenario: {what} {orig} was removed earlier")))
    }

    fn apply(&mut self, ev: &Event, probes: &[NodeId], rng: &mut ChaCha8Rng) -> Result<()> {
        match ev {
            Event::MoveSink { node } => {
                let node = self.current(*node, "sink target")?;
                self.engine.set_sink(node)?;
                self.base.set_sink(node)?;
            }
            Event::SetDropNoise { sigma } => {
                self.sigma = *sigma;
                if *sigma == 0.0 {
                    // Back to the true model.
                    for l in self.base.links().collect::<Vec<_>>() {
                        self.engine.set_drop(l.from, l.to, l.drop)?;
                    }
                }
            }
            Event::KillNodes {
                victims,
                fraction,
                cluster_size,
            } => {
                let sink = self.base.sink();
                let mut protected: BTreeSet<NodeId> = BTreeSet::from([sink]);
                for &p in probes {
                    protected.insert(self.current(p, "probe")?);
                }
                let mut set = BTreeSet::new();
                for &v in victims {
                    let v = self.current(v, "victim")?;
                    if protected.contains(&v) {
                        return Err(Error::Validation(format!(
                            "scenario: victim {v} is the sink or a probe"
                        )));
                    }
                    set.insert(v);
                }
                let count = (fraction * self.base.node_count() as f64).round() as usize;
                if count > 0 {
                    set.extend(cluster_victims(&self.base, count, *cluster_size, &protected, rng));
                }
                let map = self.engine.kill(&set)?;
                let (base, _) = crate::network::kill_nodes(&self.base, &set)?;
                self.base = base;
                self.estimator.remap(&map);
                for slot in &mut self.id_map {
                    *slot = slot.and_then(|c| map[c]);
                }
                for (sources, _) in &mut self.traffic {
                    *sources = sources.iter().filter_map(|&s| map[s]).collect();
                }
            }
            Event::SetZeta { node, value } => {
                let node = self.current(*node, "zeta target")?;
                self.engine.set_zeta(node, *value)?;
            }
            Event::InjectTraffic {
                sources,
                packets_per_round,
            } => {
                let sources = sources
                    .iter()
                    .map(|&s| self.current(s, "traffic source"))
                    .collect::<Result<Vec<_>>>()?;
                self.traffic.push((sources, *packets_per_round));
            }
        }
        Ok(())
    }

    /// Draws this round's true λ, feeds probes to the estimator, and updates
    /// what the engine believes.
    fn perturb(&mut self, rng: &mut ChaCha8Rng) -> Result<Option<NetworkTopology>> {
        if self.sigma == 0.0 {
            return Ok(None);
        }
        let normal = Normal::new(0.0, self.sigma).map_err(|e| Error::validation(e.to_string()))?;
        let mut now = self.base.clone();
        for l in self.base.links().collect::<Vec<_>>() {
            let lambda = (l.drop + normal.sample(rng)).clamp(NOISE_CLIP.0, NOISE_CLIP.1);
            now.set_drop(l.from, l.to, lambda)?;
            let dropped = rng.random::<f64>() < lambda;
            self.estimator.record(l.from, l.to, dropped);
            let belief = if self.closed_loop {
                self.estimator.estimate(l.from, l.to)
            } else {
                lambda
            };
            self.engine.set_drop(l.from, l.to, belief)?;
        }
        Ok(Some(now))
    }
}

/// Runs a script: events apply at the start of their round, then every node
/// updates once (one engine round), then metrics are taken on the current
/// forwarding policy. `ρ` is always evaluated with the true base λ.
pub fn run_scenario(script: &ScenarioScript, topo: &NetworkTopology, theta: f64) -> Result<ScenarioOutcome> {
    script.validate(topo)?;
    let mut rng = ChaCha8Rng::seed_from_u64(script.seed);
    let mut engine = Engine::new(topo, theta, Schedule::sync(), None)?;
    if script.preconverge {
        engine.run_to_convergence(&ConvergenceCriterion::default(), false)?;
    }
    let mut sim = Sim {
        engine,
        base: topo.clone(),
        id_map: (0..topo.node_count()).map(Some).collect(),
        sigma: 0.0,
        estimator: DropEstimator::new(script.estimator_window, script.estimator_window / 5)?,
        closed_loop: script.closed_loop,
        traffic: Vec::new(),
    };
    let mut rows = Vec::with_capacity(script.horizon as usize);
    let mut packets = Vec::new();
    let mut next_event = 0;
    for round in 1..=script.horizon {
        let mut tags = Vec::new();
        while next_event < script.events.len() && script.events[next_event].round == round {
            let ev = &script.events[next_event].event;
            sim.apply(ev, &script.probes, &mut rng)?;
            tags.push(ev.tag());
            next_event += 1;
        }
        let now = sim.perturb(&mut rng)?;
        let stats = sim.engine.step_round();
        let policy = sim.engine.extract_policy();
        let loop_free = policy.find_loop().is_none();
        let rho = if loop_free {
            forwarding_rho(&sim.base, &policy)?
        } else {
            PerformanceVector {
                rho: vec![f64::NAN; sim.base.node_count()],
            }
        };
        if loop_free {
            let live = now.as_ref().unwrap_or(&sim.base);
            for (sources, count) in &sim.traffic {
                for &s in sources {
                    for _ in 0..*count {
                        let out = route_packet(live, &policy, s, &mut rng, true);
                        if script.closed_loop {
                            // Only successful hops are observable from the path.
                            for w in out.path.windows(2) {
                                sim.estimator.record(w[0], w[1], false);
                            }
                        }
                        packets.push(translate_packet(out, &sim.id_map));
                    }
                }
            }
        }
        let probes = script
            .probes
            .iter()
            .map(|&p| sim.id_map[p].map_or(f64::NAN, |c| rho.rho[c]))
            .collect();
        rows.push(MetricsRow {
            round,
            event_tag: if tags.is_empty() { "-".into() } else { tags.join("+") },
            rho_norm: rho.norm2(),
            corrections: stats.forwarding_changes,
            probes,
            loop_free,
        });
    }
    let events = script
        .events
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let end = script.events[k + 1..]
                .iter()
                .map(|n| n.round - 1)
                .find(|&r| r >= e.round)
                .unwrap_or(script.horizon);
            settle_report(&rows, e, end)
        })
        .collect();
    Ok(ScenarioOutcome {
        theta,
        probes: script.probes.clone(),
        rows,
        events,
        packets,
        final_policy: sim.engine.extract_policy(),
        final_topology: sim.base,
        id_map: sim.id_map,
    })
}

fn translate_packet(mut p: PacketOutcome, map: &[Option<NodeId>]) -> PacketOutcome {
    // Report original ids so logs stay comparable across removals.
    let mut back = vec![usize::MAX; map.iter().flatten().count()];
    for (orig, cur) in map.iter().enumerate() {
        if let Some(c) = cur {
            back[*c] = orig;
        }
    }
    p.source = back[p.source];
    p.path = p.path.into_iter().map(|v| back[v]).collect();
    p
}

/// Settling is measured up to the next event (or the horizon): the last round
/// with a forwarding correction, provided at least three quiet rounds follow.
fn settle_report(rows: &[MetricsRow], e: &TimedEvent, end: u64) -> EventReport {
    let start = (e.round - 1) as usize;
    let end = (end as usize).min(rows.len());
    let window = &rows[start..end];
    let last_change = window.iter().rposition(|r| r.corrections > 0);
    let quiet_tail = window.len() - last_change.map_or(0, |k| k + 1);
    let settled = quiet_tail >= SETTLE_QUIET;
    EventReport {
        round: e.round,
        tag: e.event.tag().into(),
        settle_rounds: settled.then(|| last_change.map_or(0, |k| k as u64 + 1)),
        rho_norm_after: settled.then(|| window[window.len() - 1].rho_norm),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct NoiseReport {
    pub corrections: Vec<u64>,
    pub rho_norm: Vec<f64>,
    /// Rounds excluded from the statistics below.
    pub warmup: usize,
    pub rho_norm_cv: f64,
    pub mean_corrections: f64,
    /// Range of every drop estimate handed to the engine.
    pub estimate_range: (f64, f64),
}

/// Converges on the true λ, then runs `rounds` rounds in which every link's
/// λ is redrawn as `clip(λ + N(0, σ²))`, probed once, and estimated by a
/// sliding window that the engine consumes. The first half is warmup.
pub fn noise_robustness_run(
    topo: &NetworkTopology,
    epsilon: f64,
    sigma: f64,
    rounds: usize,
    window: usize,
    seed: u64,
) -> Result<NoiseReport> {
    if !(sigma >= 0.0) {
        return Err(Error::validation(format!("noise sigma {sigma} < 0")));
    }
    let mut script = ScenarioScript::new(rounds as u64, seed);
    script.closed_loop = true;
    script.estimator_window = window;
    if sigma > 0.0 && rounds > 0 {
        script.events.push(TimedEvent {
            round: 1,
            event: Event::SetDropNoise { sigma },
        });
    }
    // Drive the run by hand to capture the estimates handed to the engine.
    script.validate(topo)?;
    let theta = theta_for_epsilon(epsilon, topo)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut engine = Engine::new(topo, theta, Schedule::sync(), None)?;
    engine.run_to_convergence(&ConvergenceCriterion::default(), false)?;
    let mut sim = Sim {
        engine,
        base: topo.clone(),
        id_map: (0..topo.node_count()).map(Some).collect(),
        sigma,
        estimator: DropEstimator::new(window, window / 5)?,
        closed_loop: true,
        traffic: Vec::new(),
    };
    let mut corrections = Vec::with_capacity(rounds);
    let mut rho_norm = Vec::with_capacity(rounds);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..rounds {
        sim.perturb(&mut rng)?;
        for s in sim.engine.nodes() {
            for e in &s.table {
                lo = lo.min(e.drop_prob);
                hi = hi.max(e.drop_prob);
            }
        }
        let stats = sim.engine.step_round();
        let policy = sim.engine.extract_policy();
        corrections.push(stats.forwarding_changes);
        rho_norm.push(forwarding_rho(&sim.base, &policy)?.norm2());
    }
    let warmup = rounds / 2;
    let tail = &rho_norm[warmup..];
    let (mean, sd) = mean_sd(tail);
    let tail_c = &corrections[warmup..];
    Ok(NoiseReport {
        warmup,
        rho_norm_cv: if mean > 0.0 { sd / mean } else { 0.0 },
        mean_corrections: tail_c.iter().sum::<u64>() as f64 / tail_c.len().max(1) as f64,
        corrections,
        rho_norm,
        estimate_range: (lo, hi),
    })
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::central::performance_vector;
    use crate::engine::run_to_convergence;
    use crate::network::{build_pfsa, random_topology, Link, TopologyParams};

    fn link(from: NodeId, to: NodeId, drop: f64) -> Link {
        Link { from, to, drop }
    }

    #[test]
    fn lossless_chain_always_delivers() {
        let t = NetworkTopology::new(4, 3, &[link(0, 1, 0.0), link(1, 2, 0.0), link(2, 3, 0.0)]).unwrap();
        let p = Policy::all_enabled(&t);
        let s = simulate_packets(&t, &p, &[0, 1], 1000, 1, true).unwrap();
        assert_eq!(s.rate(0), 1.0);
        assert_eq!(s.rate(1), 1.0);
        assert_eq!(s.log[0].path, vec![0, 1, 2, 3]);
        assert_eq!(s.log[0].hops, 3);
    }

    #[test]
    fn single_link_matches_binomial() {
        let t = NetworkTopology::new(2, 1, &[link(0, 1, 0.25)]).unwrap();
        let s = simulate_packets(&t, &Policy::all_enabled(&t), &[0], 100_000, 5, false).unwrap();
        let se = (0.75 * 0.25 / 1e5_f64).sqrt();
        assert!((s.rate(0) - 0.75).abs() <= 3.0 * se, "{}", s.rate(0));
    }

    #[test]
    fn diamond_with_both_branches_delivers_half() {
        let t = NetworkTopology::new(
            4,
            3,
            &[link(0, 1, 0.1), link(0, 2, 0.9), link(1, 3, 0.0), link(2, 3, 0.0)],
        )
        .unwrap();
        let s = simulate_packets(&t, &Policy::all_enabled(&t), &[0], 100_000, 9, false).unwrap();
        let se = (0.25 / 1e5_f64).sqrt();
        assert!((s.rate(0) - 0.5).abs() <= 3.0 * se);
    }

    #[test]
    fn loops_and_empty_sets() {
        let t = NetworkTopology::new(3, 2, &[link(0, 1, 0.0), link(1, 0, 0.0), link(1, 2, 0.0)]).unwrap();
        let looped = Policy {
            enabled: vec![vec![1], vec![0], vec![]],
        };
        assert!(matches!(
            simulate_packets(&t, &looped, &[0], 10, 0, false),
            Err(Error::Contract(_))
        ));
        let stuck = Policy {
            enabled: vec![vec![], vec![2], vec![]],
        };
        let s = simulate_packets(&t, &stuck, &[0], 10, 0, true).unwrap();
        assert_eq!(s.rate(0), 0.0);
        assert_eq!(s.log[0].hops, 0);
    }

    #[test]
    fn forwarding_rho_matches_absorption_solve() {
        for seed in 0..20 {
            let t = random_topology(&TopologyParams::new(25, 5, (0.05, 0.6), seed)).unwrap();
            let r = run_to_convergence(&t, 0.02, Schedule::sync(), &ConvergenceCriterion::default(), None).unwrap();
            let net = build_pfsa(&t).unwrap();
            let exact = performance_vector(&net, &t, &r.policy).unwrap();
            let fast = forwarding_rho(&t, &r.policy).unwrap();
            for (a, b) in exact.rho.iter().zip(&fast.rho) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn estimator_basics() {
        assert_eq!(estimate_drops(&[vec![false; 10]], 4).unwrap(), vec![0.0]);
        let alt: Vec<bool> = (0..20).map(|k| k % 2 == 1).collect();
        assert_eq!(estimate_drops(&[alt], 6).unwrap(), vec![0.5]);
        let mut e = DropEstimator::new(10, 5).unwrap();
        e.record(0, 1, true);
        assert_eq!(e.estimate(0, 1), DropEstimator::PRIOR);
        assert_eq!(e.estimate(3, 4), DropEstimator::PRIOR);
        assert!(DropEstimator::new(0, 0).is_err());
    }

    #[test]
    fn windowed_estimate_concentrates_on_true_drop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut e = DropEstimator::new(100, 100).unwrap();
        let mut acc = 0.0;
        let mut count = 0;
        for k in 0..10_000 {
            e.record(0, 1, rng.random::<f64>() < 0.3);
            if k >= 100 {
                acc += e.estimate(0, 1);
                count += 1;
            }
            assert!((0.0..=1.0).contains(&e.estimate(0, 1)));
        }
        assert!((acc / count as f64 - 0.3).abs() < 0.05);
    }

    #[test]
    fn scenario_script_json_and_validation() {
        let t = random_topology(&TopologyParams::new(20, 4, (0.05, 0.5), 1)).unwrap();
        let text = r#"{
            "horizon": 50, "seed": 4, "probes": [1, 2],
            "events": [
                {"round": 5, "type": "MoveSink", "node": 3},
                {"round": 9, "type": "KillNodes", "fraction": 0.25, "cluster_size": 3},
                {"round": 12, "type": "SetZeta", "node": 1, "value": 0.5}
            ]
        }"#;
        let s = ScenarioScript::from_json(text).unwrap();
        assert!(s.validate(&t).is_ok());
        assert_eq!(ScenarioScript::from_json(&s.to_json().unwrap()).unwrap(), s);

        let mut bad = s.clone();
        bad.events.swap(0, 1);
        assert!(bad.validate(&t).is_err());
        let mut bad = s.clone();
        bad.events[1].event = Event::KillNodes {
            victims: vec![],
            fraction: 1.5,
            cluster_size: 3,
        };
        assert!(bad.validate(&t).is_err());
    }

    #[test]
    fn empty_script_is_plain_convergence() {
        let t = random_topology(&TopologyParams::new(15, 4, (0.05, 0.5), 2)).unwrap();
        let mut s = ScenarioScript::new(3000, 1);
        s.preconverge = false;
        let out = run_scenario(&s, &t, 0.01).unwrap();
        assert!(out.all_loop_free());
        let tail = &out.rows[out.rows.len() - 100..];
        assert!(tail.iter().all(|r| r.corrections == 0));
        let fresh = run_to_convergence(&t, out.theta, Schedule::sync(), &ConvergenceCriterion::default(), None).unwrap();
        assert_eq!(out.final_policy, fresh.policy);
    }

    #[test]
    fn killing_the_sink_is_rejected_at_runtime() {
        let t = random_topology(&TopologyParams::new(15, 4, (0.05, 0.5), 2)).unwrap();
        let mut s = ScenarioScript::new(10, 1);
        s.events.push(TimedEvent {
            round: 2,
            event: Event::KillNodes {
                victims: vec![t.sink()],
                fraction: 0.0,
                cluster_size: 1,
            },
        });
        assert!(matches!(run_scenario(&s, &t, 0.01), Err(Error::Validation(_))));
    }

    #[test]
    fn scenario_is_reproducible_and_exports() {
        let t = random_topology(&TopologyParams::new(20, 4, (0.05, 0.5), 3)).unwrap();
        let mut s = ScenarioScript::new(200, 8);
        s.probes = vec![0];
        let probe_safe = (0..20).find(|&v| v != 0 && v != t.sink()).unwrap();
        s.events = vec![
            TimedEvent {
                round: 10,
                event: Event::InjectTraffic {
                    sources: vec![probe_safe],
                    packets_per_round: 2,
                },
            },
            TimedEvent {
                round: 20,
                event: Event::SetDropNoise { sigma: 0.1 },
            },
            TimedEvent {
                round: 60,
                event: Event::SetDropNoise { sigma: 0.0 },
            },
        ];
        let a = run_scenario(&s, &t, 0.01).unwrap();
        let b = run_scenario(&s, &t, 0.01).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.packets, b.packets);
        assert!(!a.packets.is_empty());
        let csv = a.metrics_csv();
        assert!(csv.starts_with("round,event_tag,rho_norm,corrections,probe_0\n"));
        assert_eq!(csv.lines().count(), 201);
        let jsonl = a.packets_jsonl().unwrap();
        let first: PacketOutcome = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(first.source, probe_safe);
    }

    #[test]
    fn zero_noise_run_is_quiet() {
        let t = random_topology(&TopologyParams::new(20, 4, (0.05, 0.5), 4)).unwrap();
        let r = noise_robustness_run(&t, 0.1, 0.0, 200, 50, 1).unwrap();
        assert!(r.corrections.iter().all(|&c| c == 0));
        assert!(r.rho_norm_cv < 1e-12);
    }

    #[test]
    fn noisy_estimates_stay_clipped() {
        let t = random_topology(&TopologyParams::new(20, 4, (0.05, 0.5), 4)).unwrap();
        let r = noise_robustness_run(&t, 0.1, 0.2, 400, 50, 1).unwrap();
        assert!(r.estimate_range.0 >= 0.0 && r.estimate_range.1 <= 1.0);
        assert!(r.mean_corrections > 0.0);
    }

    #[test]
    fn attenuation_sheds_inbound_traffic() {
        let t = random_topology(&TopologyParams::new(30, 5, (0.05, 0.4), 10)).unwrap();
        let theta = 0.02;
        let crit = ConvergenceCriterion::default();
        let mut e = Engine::new(&t, theta, Schedule::sync(), None).unwrap();
        e.run_to_convergence(&crit, false).unwrap();
        let sources: Vec<NodeId> = (0..30).filter(|&v| v != t.sink()).collect();
        // The busiest relay.
        let base = simulate_packets(&t, &e.extract_policy(), &sources, 3_000, 1, true).unwrap();
        let relay = (0..30)
            .filter(|&v| v != t.sink())
            .max_by(|&a, &b| inbound_share(&base.log, a).total_cmp(&inbound_share(&base.log, b)))
            .unwrap();
        let mut last = f64::INFINITY;
        for zeta in [1.0, 0.95, 0.8, 0.5, 0.0] {
            e.set_zeta(relay, zeta).unwrap();
            e.run_to_convergence(&crit, false).unwrap();
            let s = simulate_packets(&t, &e.extract_policy(), &sources, 100_000 / sources.len() as u64, 2, true).unwrap();
            let share = inbound_share(&s.log, relay);
            assert!(share <= last + 0.01, "zeta {zeta}: {share} after {last}");
            last = share;
        }
        assert_eq!(last, 0.0);
    }
}
