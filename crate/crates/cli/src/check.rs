//! One-shot invariant battery behind `mroute check`.

use mroute_core::central::{enumerate_policies, performance_vector, theta_for_epsilon, ENUMERATION_CAP};
use mroute_core::engine::random_init;
use mroute_core::network::{build_pfsa, random_topology, TopologyParams};
use mroute_core::pfsa::{compute_measure, spectral_bound_report};
use mroute_core::{ConvergenceCriterion, Engine, Error, NetworkTopology, Schedule};
use serde::Serialize;

use crate::commands::CmdResult;
use crate::{Failure, OutArgs};

const DROP_RANGE: (f64, f64) = (0.05, 0.6);

#[derive(Serialize)]
struct Property {
    name: &'static str,
    passed: bool,
    /// Instances that exercised the property ("seed N" or "topology file").
    instances: Vec<String>,
    /// Worst observed value of the checked quantity.
    worst: f64,
    limit: f64,
    failure: Option<String>,
}

impl Property {
    fn new(name: &'static str, limit: f64) -> Self {
        Property {
            name,
            passed: true,
            instances: Vec::new(),
            worst: 0.0,
            limit,
            failure: None,
        }
    }

    fn observe(&mut self, instance: &str, value: f64) {
        self.worst = self.worst.max(value);
        if !(value <= self.limit) && self.failure.is_none() {
            self.passed = false;
            self.failure = Some(format!("{instance}: {value:.3e} exceeds {:.1e}", self.limit));
        }
    }

    fn line(&self) -> String {
        let first = self.instances.first().map_or("-", String::as_str);
        let last = self.instances.last().map_or("-", String::as_str);
        let span = if self.instances.len() > 1 {
            format!("{first} .. {last} ({} instances)", self.instances.len())
        } else {
            first.to_string()
        };
        match &self.failure {
            None => format!("PASS {:<22} {span}; worst {:.3e} (limit {:.1e})", self.name, self.worst, self.limit),
            Some(f) => format!("FAIL {:<22} {f}", self.name),
        }
    }
}

struct Instance {
    label: String,
    topo: NetworkTopology,
    theta: f64,
}

pub fn run(extra: Option<&NetworkTopology>, seed: u64, trials: usize, out: &OutArgs) -> CmdResult<u8> {
    if trials == 0 {
        return Err(Failure::usage("--trials must be at least 1"));
    }
    let mut instances = Vec::new();
    if let Some(t) = extra {
        instances.push(Instance {
            label: "topology file".into(),
            topo: t.clone(),
            theta: 0.01,
        });
    }
    for k in 0..trials as u64 {
        let s = seed.wrapping_add(k);
        let n = 5 + (s as usize * 7) % 36;
        let topo = random_topology(&TopologyParams::new(n, 3 + (s as usize % 4), DROP_RANGE, s))?;
        instances.push(Instance {
            label: format!("seed {s}"),
            topo,
            theta: if k % 2 == 0 { 0.1 } else { 0.01 },
        });
    }

    let mut oracle = Property::new("oracle_equivalence", 1e-9);
    let mut bounds = Property::new("bounds", 0.0);
    let mut monotone = Property::new("monotone_from_zero", 1e-12);
    let mut init = Property::new("init_independence", 1e-8);
    let mut loops = Property::new("loop_freedom", 0.0);
    let mut spectral = Property::new("spectral_bound", 1e-9);
    let crit = ConvergenceCriterion::default();

    for inst in &instances {
        let (t, theta, label) = (&inst.topo, inst.theta, inst.label.as_str());
        let mut engine = Engine::new(t, theta, Schedule::sync(), None)?;
        let report = engine.run_to_convergence(&crit, true)?;

        let net = build_pfsa(t)?;
        let ctrl = net.pfsa.apply_disabling(&engine.disabling(&net))?;
        let pi = ctrl.transition_matrix();
        let nu = compute_measure(&pi, ctrl.characteristic(), theta)?;
        let gap = (0..t.node_count())
            .map(|i| (report.measures[i] - nu.values[net.index.physical(i)]).abs())
            .fold(0.0, f64::max);
        oracle.instances.push(label.into());
        oracle.observe(label, gap);

        let trace = report.trace.as_ref().expect("trace requested");
        let outside = trace
            .measures
            .iter()
            .flatten()
            .map(|&v| (-v).max(v - 1.0).max(0.0))
            .fold(0.0, f64::max);
        bounds.instances.push(label.into());
        bounds.observe(label, outside);
        let decrease = trace
            .measures
            .windows(2)
            .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| a - b))
            .fold(0.0, f64::max);
        monotone.instances.push(label.into());
        monotone.observe(label, decrease);

        let mut from_random = Engine::new(t, theta, Schedule::sync(), Some(&random_init(t.node_count(), 1)))?;
        from_random.run_to_convergence(&crit, false)?;
        let diff = from_random
            .measures()
            .iter()
            .zip(&report.measures)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        init.instances.push(label.into());
        init.observe(label, diff);

        let bad_hops = report
            .policy
            .enabled
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&j| (i, j)))
            .filter(|&(i, j)| report.measures[j] <= report.measures[i])
            .count();
        let cyclic = report.policy.find_loop().is_some() as usize;
        loops.instances.push(label.into());
        loops.observe(label, (bad_hops + cyclic) as f64);

        let s = spectral_bound_report(&pi)?;
        spectral.instances.push(label.into());
        spectral.observe(label, (s.max_nonunity_eigenvalue - s.max_nonunity_diagonal).max(0.0));
    }

    let eps = 0.05;
    let mut optimal = Property::new("epsilon_optimality", eps);
    let mut s = seed;
    while optimal.instances.len() < trials.min(10) {
        s = s.wrapping_add(1);
        let Ok(t) = random_topology(&TopologyParams::new(4 + (s as usize % 4), 3, DROP_RANGE, s)) else {
            continue;
        };
        if t.link_count() > 16 {
            continue;
        }
        let label = format!("seed {s}");
        let theta = theta_for_epsilon(eps, &t)?;
        let mut engine = Engine::new(&t, theta, Schedule::sync(), None)?;
        let report = engine.run_to_convergence(&crit, false)?;
        let rho = performance_vector(&build_pfsa(&t)?, &t, &report.policy)?;
        let env = enumerate_policies(&t)?;
        optimal.instances.push(label.clone());
        optimal.observe(&label, rho.max_gap_below(&env.envelope));
    }

    let mut cap = Property::new("enumeration_cap", 0.0);
    let big = random_topology(&TopologyParams::new(30, 6, DROP_RANGE, seed))?;
    let label = format!("seed {seed} ({} links)", big.link_count());
    cap.instances.push(label.clone());
    let refused = big.link_count() > ENUMERATION_CAP
        && matches!(enumerate_policies(&big), Err(Error::EnumerationCap { .. }));
    cap.observe(&label, if refused { 0.0 } else { 1.0 });

    let props = [oracle, bounds, monotone, init, loops, spectral, optimal, cap];
    for p in &props {
        println!("{}", p.line());
    }
    let failed = props.iter().filter(|p| !p.passed).count();
    println!("{} properties, {failed} failed", props.len());
    std::fs::create_dir_all(&out.out)?;
    let mut report = serde_json::to_string_pretty(&props)?;
    report.push('\n');
    std::fs::write(out.out.join("check_report.json"), report)?;
    Ok(if failed == 0 { 0 } else { 4 })
}
