//! Centralized oracles: the supervision fixpoint, exact policy evaluation
//! and exhaustive policy enumeration.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::network::{build_pfsa, NetworkPfsa, NetworkTopology, NodeId};
use crate::pfsa::{absorption_probabilities, compute_measure, DisablingSet, MeasureVector, StateId};

/// Hard cap on the number of controllable transitions for enumeration.
pub const ENUMERATION_CAP: usize = 24;

/// Enabled neighbors per physical node, each list sorted.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy {
    pub enabled: Vec<Vec<NodeId>>,
}

impl Policy {
    pub fn all_enabled(topo: &NetworkTopology) -> Self {
        Policy {
            enabled: (0..topo.node_count())
                .map(|i| topo.neighbors(i).to_vec())
                .collect(),
        }
    }

    /// Bit `k` of `mask` disables the `k`-th link in `(from, to)` order.
    pub fn from_mask(topo: &NetworkTopology, mask: u64) -> Self {
        let mut k = 0;
        let mut enabled = Vec::with_capacity(topo.node_count());
        for i in 0..topo.node_count() {
            let mut row = Vec::new();
            for &j in topo.neighbors(i) {
                if mask >> k & 1 == 0 {
                    row.push(j);
                }
                k += 1;
            }
            enabled.push(row);
        }
        Policy { enabled }
    }

    pub fn from_disabling(net: &NetworkPfsa, topo: &NetworkTopology, d: &DisablingSet) -> Self {
        let enabled = (0..topo.node_count())
            .map(|i| {
                topo.neighbors(i)
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| !d.contains(i, net.link_symbol(i, k)))
                    .map(|(_, &j)| j)
                    .collect()
            })
            .collect();
        Policy { enabled }
    }

    pub fn to_disabling(&self, net: &NetworkPfsa, topo: &NetworkTopology) -> DisablingSet {
        let mut pairs = Vec::new();
        for i in 0..topo.node_count() {
            for (k, j) in topo.neighbors(i).iter().enumerate() {
                if self.enabled[i].binary_search(j).is_err() {
                    pairs.push((i, net.link_symbol(i, k)));
                }
            }
        }
        DisablingSet::from_pairs(pairs)
    }

    pub fn validate(&self, topo: &NetworkTopology) -> Result<()> {
        if self.enabled.len() != topo.node_count() {
            return Err(Error::contract(format!(
                "policy covers {} nodes, topology has {}",
                self.enabled.len(),
                topo.node_count()
            )));
        }
        for (i, row) in self.enabled.iter().enumerate() {
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::contract(format!("enabled list of node {i} is not sorted and unique")));
            }
            if let Some(j) = row.iter().find(|j| topo.neighbor_slot(i, **j).is_none()) {
                return Err(Error::contract(format!("node {i} enables non-neighbor {j}")));
            }
        }
        Ok(())
    }

    pub fn enabled_count(&self) -> usize {
        self.enabled.iter().map(Vec::len).sum()
    }

    pub fn disabled_count(&self, topo: &NetworkTopology) -> usize {
        topo.link_count() - self.enabled_count()
    }

    pub fn is_enabled(&self, i: NodeId, j: NodeId) -> bool {
        self.enabled[i].binary_search(&j).is_ok()
    }

    /// A directed cycle of enabled hops, if any.
    pub fn find_loop(&self) -> Option<Vec<NodeId>> {
        let n = self.enabled.len();
        let mut color = vec![0u8; n];
        let mut parent = vec![usize::MAX; n];
        for root in 0..n {
            if color[root] != 0 {
                continue;
            }
            color[root] = 1;
            let mut stack = vec![(root, 0usize)];
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                if let Some(&w) = self.enabled[v].get(*next) {
                    *next += 1;
                    match color[w] {
                        0 => {
                            color[w] = 1;
                            parent[w] = v;
                            stack.push((w, 0));
                        }
                        1 => {
                            let mut cycle = vec![v];
                            let mut x = v;
                            while x != w {
                                x = parent[x];
                                cycle.push(x);
                            }
                            cycle.reverse();
                            return Some(cycle);
                        }
                        _ => {}
                    }
                } else {
                    color[v] = 2;
                    stack.pop();
                }
            }
        }
        None
    }

    /// Nodes ordered so that every enabled hop goes from a later to an earlier
    /// entry (sinks of the forwarding graph first). `None` if there is a loop.
    pub fn reverse_topological_order(&self) -> Option<Vec<NodeId>> {
        let n = self.enabled.len();
        let mut out_deg: Vec<usize> = self.enabled.iter().map(Vec::len).collect();
        let mut preds: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for (i, row) in self.enabled.iter().enumerate() {
            for &j in row {
                preds[j].push(i);
            }
        }
        let mut order: Vec<NodeId> = (0..n).filter(|&i| out_deg[i] == 0).collect();
        let mut head = 0;
        while head < order.len() {
            let j = order[head];
            head += 1;
            for &i in &preds[j] {
                out_deg[i] -= 1;
                if out_deg[i] == 0 {
                    order.push(i);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Probability that a packet from each physical node eventually reaches the sink.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PerformanceVector {
    pub rho: Vec<f64>,
}

impl PerformanceVector {
    pub fn norm2(&self) -> f64 {
        self.rho.iter().map(|r| r * r).sum::<f64>().sqrt()
    }

    pub fn max_gap_below(&self, upper: &PerformanceVector) -> f64 {
        upper
            .rho
            .iter()
            .zip(&self.rho)
            .fold(0.0, |acc, (u, r)| acc.max(u - r))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("node_id,rho\n");
        for (i, r) in self.rho.iter().enumerate() {
            s.push_str(&format!("{i},{r}\n"));
        }
        s
    }
}

/// Result of the iterative supervision fixpoint.
#[derive(Clone, Debug)]
pub struct CentralSolution {
    pub theta: f64,
    pub disabling: DisablingSet,
    /// Measure of every automaton state under `disabling`.
    pub measure: MeasureVector,
    /// Passes until the disabling set stopped changing.
    pub iterations: usize,
    /// Measure after each pass, starting from the uncontrolled chain.
    pub history: Vec<MeasureVector>,
}

impl CentralSolution {
    pub fn physical_measures(&self, net: &NetworkPfsa) -> Vec<f64> {
        self.measure.values[..net.index.node_count()].to_vec()
    }

    /// Links carried by the propagation policy (not disabled).
    pub fn propagation_policy(&self, net: &NetworkPfsa, topo: &NetworkTopology) -> Policy {
        Policy::from_disabling(net, topo, &self.disabling)
    }

    /// Packet forwarding: only toward virtual nodes whose measure strictly
    /// exceeds the node's own.
    pub fn forwarding_policy(&self, net: &NetworkPfsa, topo: &NetworkTopology) -> Policy {
        let nu = &self.measure.values;
        let enabled = (0..topo.node_count())
            .map(|i| {
                topo.neighbors(i)
                    .iter()
                    .enumerate()
                    .filter(|&(k, _)| nu[net.index.virtual_slot(i, k)] > nu[i])
                    .map(|(_, &j)| j)
                    .collect()
            })
            .collect();
        Policy { enabled }
    }
}

/// Iterates "solve the measure, disable every controllable link whose
/// virtual node scores below its source" until the disabling set repeats.
pub fn optimize_centralized(net: &NetworkPfsa, theta: f64) -> Result<CentralSolution> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::contract(format!("theta {theta} outside (0,1)")));
    }
    let pfsa = &net.pfsa;
    let controllable: Vec<(StateId, usize)> = pfsa.controllable().iter().copied().collect();
    let cap = (10 * controllable.len()).max(10);
    let mut disabling = DisablingSet::empty();
    let mut history = Vec::new();
    for iteration in 1..=cap {
        let pi = pfsa.apply_disabling(&disabling)?.transition_matrix();
        let nu = compute_measure(&pi, pfsa.characteristic(), theta)?;
        let next = DisablingSet::from_pairs(controllable.iter().copied().filter(|&(q, s)| {
            let v = pfsa.target(q, s).expect("controllable pair is defined");
            nu.values[v] < nu.values[q]
        }));
        history.push(nu.clone());
        if next == disabling {
            return Ok(CentralSolution {
                theta,
                disabling,
                measure: nu,
                iterations: iteration,
                history,
            });
        }
        disabling = next;
    }
    Err(Error::NonConvergence {
        cap: cap as u64,
        detail: "supervision fixpoint kept changing its disabling set".into(),
    })
}

/// The controlled chain of a policy with the sink made absorbing.
///
/// States that can reach no pure self-loop (closed loss-free loops away from
/// the sink) are turned into self-loops too; they never reach the sink, so
/// this leaves every sink-absorption probability unchanged.
fn evaluation_chain(
    net: &NetworkPfsa,
    topo: &NetworkTopology,
    policy: &Policy,
) -> Result<crate::pfsa::StochasticMatrix> {
    policy.validate(topo)?;
    let d = policy.to_disabling(net, topo);
    let pi = net.pfsa.apply_disabling(&d)?.transition_matrix();
    let pi = pi.with_absorbing(&[topo.sink()]);
    let reaches = pi.reaches(&pi.self_loop_states());
    let closed: Vec<StateId> = (0..pi.dim()).filter(|&s| !reaches[s]).collect();
    Ok(if closed.is_empty() {
        pi
    } else {
        pi.with_absorbing(&closed)
    })
}

/// Exact `ρ` from the full automaton via absorption probabilities at the sink.
pub fn performance_vector(
    net: &NetworkPfsa,
    topo: &NetworkTopology,
    policy: &Policy,
) -> Result<PerformanceVector> {
    let pi = evaluation_chain(net, topo, policy)?;
    let tab = absorption_probabilities(&pi, &pi.self_loop_states())?;
    let sink = topo.sink();
    Ok(PerformanceVector {
        rho: (0..topo.node_count()).map(|i| tab.prob(i, sink)).collect(),
    })
}

/// `ρ` from the node-level equations, with virtual and dump states
/// eliminated: `ρ_i = Σ_{j enabled} (1−λ_ij) ρ_j / m_i + (disabled_i / m_i) ρ_i`.
///
/// Same values as [`performance_vector`], at a fraction of the cost; used by
/// enumeration.
pub fn performance_vector_reduced(topo: &NetworkTopology, policy: &Policy) -> Result<PerformanceVector> {
    let n = topo.node_count();
    let sink = topo.sink();
    // Nodes with a positive-probability enabled route to the sink.
    let mut preds: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    for i in 0..n {
        if i == sink {
            continue;
        }
        for &j in &policy.enabled[i] {
            if topo.drop_prob(i, j).expect("policy validated") < 1.0 {
                preds[j].push(i);
            }
        }
    }
    let mut live = vec![false; n];
    live[sink] = true;
    let mut stack = vec![sink];
    while let Some(j) = stack.pop() {
        for &i in &preds[j] {
            if !live[i] {
                live[i] = true;
                stack.push(i);
            }
        }
    }
    let unknowns: Vec<NodeId> = (0..n).filter(|&i| live[i] && i != sink).collect();
    let mut pos = vec![usize::MAX; n];
    for (k, &i) in unknowns.iter().enumerate() {
        pos[i] = k;
    }
    let u = unknowns.len();
    let mut a = DMatrix::<f64>::identity(u, u);
    let mut b = DVector::<f64>::zeros(u);
    for (r, &i) in unknowns.iter().enumerate() {
        let m = topo.degree(i) as f64;
        let disabled = topo.degree(i) - policy.enabled[i].len();
        a[(r, r)] -= disabled as f64 / m;
        for &j in &policy.enabled[i] {
            let w = (1.0 - topo.drop_prob(i, j).expect("policy validated")) / m;
            if j == sink {
                b[r] += w;
            } else if live[j] {
                a[(r, pos[j])] -= w;
            }
        }
    }
    let x = if u > 0 { linalg::solve(&a, &b)? } else { b };
    let mut rho = vec![0.0; n];
    rho[sink] = 1.0;
    for (r, &i) in unknowns.iter().enumerate() {
        rho[i] = x[r];
    }
    Ok(PerformanceVector { rho })
}

/// Physical-node measures of a policy from the node-level equations
/// `ν_i = θχ_i + (1−θ)[Σ_{j enabled} (1−θ)(1−λ_ij) ν_j / m_i + (disabled_i / m_i) ν_i]`.
/// Virtual-node measures follow as `(1−θ)(1−λ_ij)ν_j`.
pub fn policy_measure_reduced(topo: &NetworkTopology, policy: &Policy, theta: f64) -> Result<Vec<f64>> {
    let n = topo.node_count();
    let mut a = DMatrix::<f64>::identity(n, n);
    let mut b = DVector::<f64>::zeros(n);
    b[topo.sink()] = theta;
    for i in 0..n {
        let m = topo.degree(i);
        if m == 0 {
            // Idle self-loop.
            a[(i, i)] -= 1.0 - theta;
            continue;
        }
        let m = m as f64;
        let disabled = topo.degree(i) - policy.enabled[i].len();
        a[(i, i)] -= (1.0 - theta) * disabled as f64 / m;
        for &j in &policy.enabled[i] {
            let lambda = topo.drop_prob(i, j).expect("policy validated");
            a[(i, j)] -= (1.0 - theta) * (1.0 - theta) * (1.0 - lambda) / m;
        }
    }
    Ok(linalg::solve(&a, &b)?.iter().copied().collect())
}

/// Visits every subset of the controllable links, as masks in increasing order.
pub fn for_each_policy(
    topo: &NetworkTopology,
    mut visit: impl FnMut(u64, &Policy) -> Result<()>,
) -> Result<usize> {
    let count = topo.link_count();
    if count > ENUMERATION_CAP {
        return Err(Error::EnumerationCap {
            count,
            cap: ENUMERATION_CAP,
        });
    }
    let total = 1u64 << count;
    for mask in 0..total {
        visit(mask, &Policy::from_mask(topo, mask))?;
    }
    Ok(total as usize)
}

#[derive(Clone, Debug)]
pub struct Enumeration {
    /// Elementwise maximum of `ρ` over every policy.
    pub envelope: PerformanceVector,
    /// Per node, the first policy (lowest mask) attaining its envelope value.
    pub argmax: Vec<Policy>,
    pub evaluated: usize,
}

pub fn enumerate_policies(topo: &NetworkTopology) -> Result<Enumeration> {
    let n = topo.node_count();
    let mut envelope = vec![f64::NEG_INFINITY; n];
    let mut argmax: Vec<Option<Policy>> = vec![None; n];
    let evaluated = for_each_policy(topo, |_, policy| {
        let rho = performance_vector_reduced(topo, policy)?;
        for i in 0..n {
            if rho.rho[i] > envelope[i] {
                envelope[i] = rho.rho[i];
                argmax[i] = Some(policy.clone());
            }
        }
        Ok(())
    })?;
    Ok(Enumeration {
        envelope: PerformanceVector { rho: envelope },
        argmax: argmax.into_iter().map(|p| p.expect("at least one policy")).collect(),
        evaluated,
    })
}

/// Smallest number of disabled links among all policies whose physical-node
/// measure vector is within `tol` of `target`, with the lowest-mask witness.
pub fn fewest_disabled_matching(
    topo: &NetworkTopology,
    theta: f64,
    target: &[f64],
    tol: f64,
) -> Result<Option<(usize, Policy)>> {
    let mut best: Option<(usize, Policy)> = None;
    for_each_policy(topo, |mask, policy| {
        let disabled = mask.count_ones() as usize;
        if best.as_ref().is_some_and(|(d, _)| *d <= disabled) {
            return Ok(());
        }
        let nu = policy_measure_reduced(topo, policy, theta)?;
        if nu.iter().zip(target).all(|(a, b)| (a - b).abs() <= tol) {
            best = Some((disabled, policy.clone()));
        }
        Ok(())
    })?;
    Ok(best)
}

/// `θ = ε / m²`, `m` the maximum node degree. Degree-free topologies get 0.5.
pub fn theta_for_epsilon(epsilon: f64, topo: &NetworkTopology) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::contract(format!("epsilon {epsilon} outside (0,1)")));
    }
    let m = topo.max_degree();
    if m == 0 {
        log::warn!("topology has no links; any theta works, using 0.5");
        return Ok(0.5);
    }
    Ok((epsilon / (m * m) as f64).min(0.5))
}

/// Convenience for tests and the CLI: compile, optimize, and evaluate.
pub fn solve_topology(topo: &NetworkTopology, theta: f64) -> Result<(NetworkPfsa, CentralSolution)> {
    let net = build_pfsa(topo)?;
    let sol = optimize_centralized(&net, theta)?;
    Ok((net, sol))
}

/// Enabled sets as a set of `(from, to)` pairs; handy for comparisons.
pub fn policy_edges(policy: &Policy) -> BTreeSet<(NodeId, NodeId)> {
    policy
        .enabled
        .iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
        .collect()
}
