//! Probabilistic finite state automata, their language measure, and the
//! absorbing-chain machinery used to check it.
//!
//! A [`Pfsa`] carries a partial transition map over an alphabet, a morph
//! (per-state symbol probabilities), a characteristic weight per state and
//! the set of controllable `(state, symbol)` pairs. Everything numeric is
//! dense; the automata handled here have at most a few thousand states.

use std::collections::{BTreeSet, VecDeque};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;

pub type StateId = usize;
pub type SymbolId = usize;

/// Row sums and morph rows must be within this of 1.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Eigenvalues within this distance of 1 count as unity.
pub const UNITY_TOL: f64 = 1e-9;
/// Residual bound on the measure solve.
pub const MEASURE_RESIDUAL_TOL: f64 = 1e-10;

/// One defined transition: emitting `symbol` moves to `target` with probability `prob`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Edge {
    pub symbol: SymbolId,
    pub target: StateId,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pfsa {
    states: Vec<String>,
    alphabet: Vec<String>,
    edges: Vec<Vec<Edge>>,
    characteristic: Vec<f64>,
    controllable: BTreeSet<(StateId, SymbolId)>,
}

impl Pfsa {
    /// Builds an automaton, checking every structural invariant.
    ///
    /// `edges[q]` lists the defined symbols of state `q`; each symbol may
    /// appear at most once per state.
    pub fn new(
        states: Vec<String>,
        alphabet: Vec<String>,
        mut edges: Vec<Vec<Edge>>,
        characteristic: Vec<f64>,
        controllable: BTreeSet<(StateId, SymbolId)>,
    ) -> Result<Self> {
        let n = states.len();
        if edges.len() != n || characteristic.len() != n {
            return Err(Error::validation(format!(
                "{n} states but {} edge rows and {} characteristic values",
                edges.len(),
                characteristic.len()
            )));
        }
        for (q, row) in edges.iter_mut().enumerate() {
            row.sort_by_key(|e| e.symbol);
            if row.is_empty() {
                return Err(Error::validation(format!(
                    "state {} has no defined symbol; its morph row cannot sum to 1",
                    states[q]
                )));
            }
            let mut sum = 0.0;
            for (k, e) in row.iter().enumerate() {
                if k > 0 && row[k - 1].symbol == e.symbol {
                    return Err(Error::validation(format!(
                        "state {} defines symbol {} twice",
                        states[q], alphabet.get(e.symbol).map_or("?", String::as_str)
                    )));
                }
                if e.symbol >= alphabet.len() || e.target >= n {
                    return Err(Error::validation(format!(
                        "state {} has an edge outside the alphabet or state set",
                        states[q]
                    )));
                }
                if !(0.0..=1.0).contains(&e.prob) {
                    return Err(Error::validation(format!(
                        "state {} has morph probability {} outside [0,1]",
                        states[q], e.prob
                    )));
                }
                sum += e.prob;
            }
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::validation(format!(
                    "morph row of state {} sums to {sum}, not 1",
                    states[q]
                )));
            }
        }
        for (q, &c) in characteristic.iter().enumerate() {
            if !(-1.0..=1.0).contains(&c) {
                return Err(Error::validation(format!(
                    "characteristic {c} of state {} outside [-1,1]",
                    states[q]
                )));
            }
        }
        let pfsa = Pfsa {
            states,
            alphabet,
            edges,
            characteristic,
            controllable,
        };
        for &(q, s) in &pfsa.controllable {
            if q >= n || pfsa.target(q, s).is_none() {
                return Err(Error::validation(format!(
                    "controllable pair ({q}, {s}) is not in the transition map"
                )));
            }
        }
        Ok(pfsa)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn alphabet(&self) -> &[String] {
        &self.alphabet
    }

    pub fn edges(&self, q: StateId) -> &[Edge] {
        &self.edges[q]
    }

    pub fn characteristic(&self) -> &[f64] {
        &self.characteristic
    }

    pub fn controllable(&self) -> &BTreeSet<(StateId, SymbolId)> {
        &self.controllable
    }

    pub fn target(&self, q: StateId, symbol: SymbolId) -> Option<StateId> {
        self.edge(q, symbol).map(|e| e.target)
    }

    pub fn morph(&self, q: StateId, symbol: SymbolId) -> f64 {
        self.edge(q, symbol).map_or(0.0, |e| e.prob)
    }

    fn edge(&self, q: StateId, symbol: SymbolId) -> Option<&Edge> {
        let row = &self.edges[q];
        row.binary_search_by_key(&symbol, |e| e.symbol)
            .ok()
            .map(|k| &row[k])
    }

    /// `Π_ij` = total morph probability of the symbols carrying `q_i` to `q_j`.
    pub fn transition_matrix(&self) -> StochasticMatrix {
        let n = self.len();
        let mut m = DMatrix::zeros(n, n);
        for (q, row) in self.edges.iter().enumerate() {
            for e in row {
                m[(q, e.target)] += e.prob;
            }
        }
        // Every morph row was validated at construction.
        StochasticMatrix { m }
    }

    /// Replaces each disabled transition by a self-loop of the same probability.
    pub fn apply_disabling(&self, d: &DisablingSet) -> Result<Pfsa> {
        d.check_against(self)?;
        let mut out = self.clone();
        for &(q, s) in &d.disabled {
            let row = &mut out.edges[q];
            let k = row
                .binary_search_by_key(&s, |e| e.symbol)
                .expect("controllable pair is defined");
            row[k].target = q;
        }
        Ok(out)
    }
}

/// A dense row-stochastic matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StochasticMatrix {
    m: DMatrix<f64>,
}

impl StochasticMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::validation("transition matrix is not square"));
        }
        for (i, row) in m.row_iter().enumerate() {
            if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
                return Err(Error::validation(format!("row {i} has an entry outside [0,1]")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::validation(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(StochasticMatrix { m })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::validation("transition matrix rows have unequal length"));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn is_self_loop(&self, i: usize) -> bool {
        self.m[(i, i)] == 1.0
    }

    pub fn self_loop_states(&self) -> Vec<StateId> {
        (0..self.dim()).filter(|&i| self.is_self_loop(i)).collect()
    }

    /// Copy with the listed rows replaced by pure self-loops.
    pub fn with_absorbing(&self, states: &[StateId]) -> StochasticMatrix {
        let mut m = self.m.clone();
        for &i in states {
            m.row_mut(i).fill(0.0);
            m[(i, i)] = 1.0;
        }
        StochasticMatrix { m }
    }

    /// Successors `j ≠ i` with `Π_ij > 0`.
    pub fn successors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.dim()).filter(move |&j| j != i && self.m[(i, j)] > 0.0)
    }

    /// States from which some state of `targets` is reachable (targets included).
    pub fn reaches(&self, targets: &[StateId]) -> Vec<bool> {
        let n = self.dim();
        let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            for j in self.successors(i) {
                preds[j].push(i);
            }
        }
        let mut seen = vec![false; n];
        let mut queue: VecDeque<usize> = VecDeque::new();
        for &t in targets {
            if !seen[t] {
                seen[t] = true;
                queue.push_back(t);
            }
        }
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
}

/// Per-state language measure for one value of θ.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeasureVector {
    pub theta: f64,
    pub values: Vec<f64>,
}

impl MeasureVector {
    pub fn get(&self, q: StateId) -> f64 {
        self.values[q]
    }

    /// Elementwise `self ≥ other − tol`.
    pub fn dominates(&self, other: &MeasureVector, tol: f64) -> bool {
        self.values
            .iter()
            .zip(&other.values)
            .all(|(a, b)| *a >= *b - tol)
    }

    pub fn max_abs_diff(&self, other: &MeasureVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }
}

/// A set of disabled controllable transitions.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct DisablingSet {
    pub disabled: BTreeSet<(StateId, SymbolId)>,
}

impl DisablingSet {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (StateId, SymbolId)>) -> Self {
        DisablingSet {
            disabled: pairs.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.disabled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.disabled.is_empty()
    }

    pub fn contains(&self, q: StateId, s: SymbolId) -> bool {
        self.disabled.contains(&(q, s))
    }

    pub fn check_against(&self, pfsa: &Pfsa) -> Result<()> {
        match self.disabled.iter().find(|p| !pfsa.controllable.contains(p)) {
            Some(&(q, s)) => Err(Error::contract(format!(
                "cannot disable non-controllable transition ({}, {})",
                pfsa.states.get(q).map_or("?", String::as_str),
                pfsa.alphabet.get(s).map_or("?", String::as_str)
            ))),
            None => Ok(()),
        }
    }
}

/// `I − (1−θ)Π`, assembled as `θI + (1−θ)(I − Π)` so that pure self-loop
/// rows come out as exactly `θ` on the diagonal even for tiny θ.
fn resolvent_operator(pi: &StochasticMatrix, theta: f64) -> DMatrix<f64> {
    let n = pi.dim();
    let m = pi.as_matrix();
    DMatrix::from_fn(n, n, |i, j| {
        let delta = if i == j { 1.0 } else { 0.0 };
        let d = delta - m[(i, j)];
        theta * delta + (1.0 - theta) * d
    })
}

/// `ν_θ = θ [I − (1−θ)Π]⁻¹ χ`, solved densely.
pub fn compute_measure(pi: &StochasticMatrix, chi: &[f64], theta: f64) -> Result<MeasureVector> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::contract(format!("theta {theta} outside (0,1]")));
    }
    let n = pi.dim();
    if chi.len() != n {
        return Err(Error::contract(format!(
            "characteristic vector has {} entries for {n} states",
            chi.len()
        )));
    }
    let a = resolvent_operator(pi, theta);
    let chi_v = DVector::from_column_slice(chi);
    let x = linalg::solve(&a, &chi_v)?;
    let residual = linalg::vec_inf_norm((&a * &x - &chi_v).as_slice());
    if !(residual < MEASURE_RESIDUAL_TOL) {
        return Err(Error::Numeric {
            reason: format!("measure residual {residual:.3e} above {MEASURE_RESIDUAL_TOL:e}"),
            condition: linalg::condition_estimate(&a),
        });
    }
    Ok(MeasureVector {
        theta,
        values: x.iter().map(|v| theta * v).collect(),
    })
}

/// Eventual absorption probabilities of a chain.
#[derive(Clone, Debug)]
pub struct AbsorptionTable {
    /// Absorbing states, in the order of `probs`' columns.
    pub absorbing: Vec<StateId>,
    /// `probs[(i, k)]` is the probability of ending in `absorbing[k]` from state `i`.
    pub probs: DMatrix<f64>,
}

impl AbsorptionTable {
    pub fn column_of(&self, state: StateId) -> Option<usize> {
        self.absorbing.iter().position(|&a| a == state)
    }

    pub fn prob(&self, from: StateId, absorbing_state: StateId) -> f64 {
        self.column_of(absorbing_state)
            .map_or(0.0, |k| self.probs[(from, k)])
    }

    /// The Cesaro limit written as a full square matrix.
    pub fn as_cesaro_matrix(&self) -> DMatrix<f64> {
        let n = self.probs.nrows();
        let mut p = DMatrix::zeros(n, n);
        for (k, &a) in self.absorbing.iter().enumerate() {
            p.set_column(a, &self.probs.column(k));
        }
        p
    }
}

/// Solves the first-step equations `(I − Q) B = R` on the transient states.
pub fn absorption_probabilities(
    pi: &StochasticMatrix,
    absorbing_states: &[StateId],
) -> Result<AbsorptionTable> {
    let n = pi.dim();
    let mut absorbing: Vec<StateId> = absorbing_states.to_vec();
    absorbing.sort_unstable();
    absorbing.dedup();
    for &a in &absorbing {
        if a >= n || !pi.is_self_loop(a) {
            return Err(Error::contract(format!(
                "state {a} is listed as absorbing but is not a pure self-loop"
            )));
        }
    }
    let reaches = pi.reaches(&absorbing);
    if let Some(q) = reaches.iter().position(|r| !r) {
        return Err(Error::Structural {
            state: q.to_string(),
            reason: "no path to any absorbing state".into(),
        });
    }

    let mut is_abs = vec![false; n];
    for &a in &absorbing {
        is_abs[a] = true;
    }
    let transient: Vec<StateId> = (0..n).filter(|&i| !is_abs[i]).collect();
    let t = transient.len();
    let mut probs = DMatrix::zeros(n, absorbing.len());
    for (k, &a) in absorbing.iter().enumerate() {
        probs[(a, k)] = 1.0;
    }
    if t > 0 {
        let m = pi.as_matrix();
        let lhs = DMatrix::from_fn(t, t, |r, c| {
            let v = -m[(transient[r], transient[c])];
            if r == c {
                1.0 + v
            } else {
                v
            }
        });
        let rhs = DMatrix::from_fn(t, absorbing.len(), |r, k| m[(transient[r], absorbing[k])]);
        let sol = linalg::solve_many(&lhs, &rhs)?;
        for (r, &i) in transient.iter().enumerate() {
            for k in 0..absorbing.len() {
                probs[(i, k)] = sol[(r, k)];
            }
        }
    }
    for i in 0..n {
        let s: f64 = probs.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::Numeric {
                reason: format!("absorption row {i} sums to {s}"),
                condition: f64::NAN,
            });
        }
    }
    Ok(AbsorptionTable { absorbing, probs })
}

/// Which condition of the strongly-absorbing definition failed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum SaViolation {
    /// No pure self-loop state exists.
    NoAbsorbingState,
    /// This state cannot reach any absorbing state.
    Unreachable { state: StateId },
    /// A directed cycle through distinct states (self-loops ignored).
    Cycle { states: Vec<StateId> },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SaReport {
    pub absorbing: Vec<StateId>,
    pub violation: Option<SaViolation>,
}

impl SaReport {
    pub fn holds(&self) -> bool {
        self.violation.is_none()
    }
}

pub fn is_strongly_absorbing(pi: &StochasticMatrix) -> SaReport {
    let absorbing = pi.self_loop_states();
    if absorbing.is_empty() {
        return SaReport {
            absorbing,
            violation: Some(SaViolation::NoAbsorbingState),
        };
    }
    let reaches = pi.reaches(&absorbing);
    if let Some(state) = reaches.iter().position(|r| !r) {
        return SaReport {
            absorbing,
            violation: Some(SaViolation::Unreachable { state }),
        };
    }
    let violation = find_cycle(pi).map(|states| SaViolation::Cycle { states });
    SaReport {
        absorbing,
        violation,
    }
}

/// A directed cycle among distinct states, if one exists.
fn find_cycle(pi: &StochasticMatrix) -> Option<Vec<StateId>> {
    let n = pi.dim();
    let succ: Vec<Vec<usize>> = (0..n).map(|i| pi.successors(i).collect()).collect();
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut color = vec![0u8; n];
    let mut parent = vec![usize::MAX; n];
    for root in 0..n {
        if color[root] != 0 {
            continue;
        }
        let mut stack = vec![(root, 0usize)];
        color[root] = 1;
        while let Some(&mut (v, ref mut next)) = stack.last_mut() {
            if *next < succ[v].len() {
                let w = succ[v][*next];
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

#[derive(Clone, Debug, Serialize)]
pub struct SpectralReport {
    /// Largest `|μ|` over eigenvalues with `|μ − 1| > UNITY_TOL`; 0 if none.
    pub max_nonunity_eigenvalue: f64,
    /// Largest diagonal entry strictly below 1; 0 if none.
    pub max_nonunity_diagonal: f64,
    pub holds: bool,
}

/// Compares non-unity eigenvalue magnitudes with the largest non-unity
/// diagonal entry. Only defined for strongly absorbing chains.
pub fn spectral_bound_report(pi: &StochasticMatrix) -> Result<SpectralReport> {
    let sa = is_strongly_absorbing(pi);
    if let Some(v) = sa.violation {
        return Err(Error::contract(format!(
            "spectral bound needs a strongly absorbing chain ({v:?})"
        )));
    }
    let mu = max_nonunity_eigenvalue(pi)?;
    let diag = (0..pi.dim())
        .map(|i| pi.get(i, i))
        .filter(|&d| d < 1.0)
        .fold(0.0, f64::max);
    Ok(SpectralReport {
        max_nonunity_eigenvalue: mu,
        max_nonunity_diagonal: diag,
        holds: mu <= diag + UNITY_TOL,
    })
}

pub fn max_nonunity_eigenvalue(pi: &StochasticMatrix) -> Result<f64> {
    let ev = linalg::eigenvalues(pi.as_matrix())?;
    Ok(ev
        .iter()
        .filter(|z| (*z - nalgebra::Complex::new(1.0, 0.0)).norm() > UNITY_TOL)
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// The Cesaro limit `𝒫` of a chain.
///
/// Strongly absorbing chains go through the absorption solve. Anything else
/// falls back to averaging powers of `Π` (at most `10⁵` of them), which is
/// only meant for diagnostics.
pub fn cesaro_limit(pi: &StochasticMatrix) -> Result<DMatrix<f64>> {
    let sa = is_strongly_absorbing(pi);
    if sa.holds() {
        return Ok(absorption_probabilities(pi, &sa.absorbing)?.as_cesaro_matrix());
    }
    cesaro_power_average(pi, 100_000, 1e-8)
}

pub fn cesaro_power_average(
    pi: &StochasticMatrix,
    max_terms: usize,
    tol: f64,
) -> Result<DMatrix<f64>> {
    let n = pi.dim();
    let m = pi.as_matrix();
    let mut power = DMatrix::identity(n, n);
    let mut sum = DMatrix::zeros(n, n);
    for k in 1..=max_terms {
        sum += &power;
        let next = &power * m;
        // Aperiodic chains: the powers themselves converge to the same limit.
        if linalg::inf_norm(&(&next - &power)) < tol {
            return Ok(next);
        }
        power = next;
        if k == max_terms {
            log::warn!("Cesaro average stopped after {max_terms} terms; error is O(1/{max_terms})");
        }
    }
    Ok(sum / max_terms.max(1) as f64)
}

#[derive(Clone, Debug, Serialize)]
pub struct DeviationReport {
    pub theta: f64,
    /// `||θ[I − (1−θ)Π]⁻¹ − 𝒫||∞`
    pub deviation: f64,
    /// `θ / (1 − |μ|)`
    pub bound: f64,
    pub max_nonunity_eigenvalue: f64,
    pub holds: bool,
}

/// Checks `||θ[I − (1−θ)Π]⁻¹ − 𝒫||∞ ≤ θ / (1 − |μ|)` numerically.
pub fn cesaro_deviation_bound_check(pi: &StochasticMatrix, theta: f64) -> Result<DeviationReport> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::contract(format!("theta {theta} outside (0,1)")));
    }
    let sa = is_strongly_absorbing(pi);
    if let Some(v) = sa.violation {
        return Err(Error::contract(format!(
            "deviation bound needs a strongly absorbing chain ({v:?})"
        )));
    }
    let n = pi.dim();
    let cesaro = absorption_probabilities(pi, &sa.absorbing)?.as_cesaro_matrix();
    let a = resolvent_operator(pi, theta);
    let resolvent = linalg::solve_many(&a, &DMatrix::identity(n, n))? * theta;
    let deviation = linalg::inf_norm(&(resolvent - cesaro));
    let mu = max_nonunity_eigenvalue(pi)?;
    let bound = theta / (1.0 - mu);
    Ok(DeviationReport {
        theta,
        deviation,
        bound,
        max_nonunity_eigenvalue: mu,
        holds: deviation <= bound + UNITY_TOL,
    })
}

/// Measure-vector form: `||ν_θ − 𝒫χ||∞` against `θ ||χ||∞ / (1 − |μ|)`.
pub fn cesaro_measure_deviation(
    pi: &StochasticMatrix,
    chi: &[f64],
    theta: f64,
) -> Result<DeviationReport> {
    let sa = is_strongly_absorbing(pi);
    if let Some(v) = sa.violation {
        return Err(Error::contract(format!(
            "deviation bound needs a strongly absorbing chain ({v:?})"
        )));
    }
    let nu = compute_measure(pi, chi, theta)?;
    let cesaro = absorption_probabilities(pi, &sa.absorbing)?.as_cesaro_matrix();
    let limit = &cesaro * DVector::from_column_slice(chi);
    let deviation = nu
        .values
        .iter()
        .zip(limit.iter())
        .fold(0.0_f64, |acc, (a, b)| acc.max((a - b).abs()));
    let mu = max_nonunity_eigenvalue(pi)?;
    let bound = theta * linalg::vec_inf_norm(chi) / (1.0 - mu);
    Ok(DeviationReport {
        theta,
        deviation,
        bound,
        max_nonunity_eigenvalue: mu,
        holds: deviation <= bound + UNITY_TOL,
    })
}

/// State-indexed JSON dump of `Π`, `χ` and `ν` for golden-file comparisons.
#[derive(Clone, Debug, Serialize)]
pub struct DebugDump {
    pub states: Vec<String>,
    pub theta: f64,
    /// Row-major.
    pub pi: Vec<Vec<f64>>,
    pub chi: Vec<f64>,
    pub nu: Vec<f64>,
}

impl DebugDump {
    pub fn new(pfsa: &Pfsa, pi: &StochasticMatrix, nu: &MeasureVector) -> Self {
        let n = pi.dim();
        DebugDump {
            states: pfsa.states().to_vec(),
            theta: nu.theta,
            pi: (0..n).map(|i| (0..n).map(|j| pi.get(i, j)).collect()).collect(),
            chi: pfsa.characteristic().to_vec(),
            nu: nu.values.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
