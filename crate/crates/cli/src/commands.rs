use std::fs;
use std::path::Path;

use mroute_core::central::{enumerate_policies, performance_vector, solve_topology, theta_for_epsilon};
use mroute_core::engine::{convergence_rounds_profile, random_init, ProfileSettings};
use mroute_core::network::{build_pfsa, random_topology, TopologyParams};
use mroute_core::sim::{run_scenario, ScenarioScript};
use mroute_core::{ConvergenceCriterion, Engine, NetworkTopology, Policy, Schedule};
use serde_json::{json, Value};

use crate::{check, Command, Failure, Format, OutArgs};

pub type CmdResult<T> = Result<T, Failure>;

pub fn run(cmd: Command) -> CmdResult<u8> {
    match cmd {
        Command::Solve { common, theta } => {
            let topo = load_topology(&common.topology)?;
            let (theta, eps) = resolve_theta(theta.epsilon, theta.theta, &topo)?;
            solve(&topo, theta, eps, &common.out)
        }
        Command::Distribute {
            common,
            theta,
            run,
            init,
        } => {
            let topo = load_topology(&common.topology)?;
            let (theta, eps) = resolve_theta(theta.epsilon, theta.theta, &topo)?;
            let init = parse_init(&init, topo.node_count())?;
            distribute(&topo, theta, eps, Schedule::new(run.schedule, run.seed), init, &common.out)
        }
        Command::Enumerate { common, theta } => {
            let topo = load_topology(&common.topology)?;
            let theta = match (theta.epsilon, theta.theta) {
                (None, None) => None,
                (e, t) => Some(resolve_theta(e, t, &topo)?),
            };
            enumerate(&topo, theta, &common.out)
        }
        Command::Scenario {
            common,
            theta,
            scenario,
        } => {
            let topo = load_topology(&common.topology)?;
            let (theta, eps) = resolve_theta(theta.epsilon, theta.theta, &topo)?;
            let text = read(&scenario)?;
            let script = ScenarioScript::from_json(&text)?;
            scenario_cmd(&topo, theta, eps, &script, &common.out)
        }
        Command::Sweep {
            grid_n,
            grid_eps,
            trials,
            max_degree,
            run,
            out,
        } => {
            let settings = ProfileSettings {
                max_degree,
                schedule: run.schedule,
                ..ProfileSettings::default()
            };
            sweep(&grid_n, &grid_eps, trials, run.seed, &settings, &out)
        }
        Command::Check {
            topology,
            seed,
            trials,
            out,
        } => {
            let extra = topology.as_deref().map(load_topology).transpose()?;
            check::run(extra.as_ref(), seed, trials, &out)
        }
        Command::Generate {
            n,
            max_degree,
            drop_min,
            drop_max,
            seed,
            output,
        } => {
            let topo = random_topology(&TopologyParams::new(n, max_degree, (drop_min, drop_max), seed))?;
            topo.save(&output)?;
            println!("wrote {} ({} nodes, {} links, sink {})", output.display(), n, topo.link_count(), topo.sink());
            Ok(0)
        }
    }
}

fn read(path: &Path) -> CmdResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))
}

pub fn load_topology(path: &Path) -> CmdResult<NetworkTopology> {
    let text = read(path)?;
    NetworkTopology::from_json(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn resolve_theta(epsilon: Option<f64>, theta: Option<f64>, topo: &NetworkTopology) -> CmdResult<(f64, Option<f64>)> {
    match (epsilon, theta) {
        (Some(eps), None) => Ok((theta_for_epsilon(eps, topo)?, Some(eps))),
        (None, Some(t)) if t > 0.0 && t < 1.0 => Ok((t, None)),
        (None, Some(t)) => Err(Failure::usage(format!("theta {t} outside (0,1)"))),
        _ => Err(Failure::usage("give exactly one of --epsilon and --theta")),
    }
}

fn parse_init(spec: &str, n: usize) -> CmdResult<Option<Vec<f64>>> {
    if spec == "zero" {
        return Ok(None);
    }
    let seed = spec
        .strip_prefix("random:")
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| Failure::usage(format!("--init must be `zero` or `random:SEED`, got `{spec}`")))?;
    Ok(Some(random_init(n, seed)))
}

fn header(topo: &NetworkTopology, theta: f64, eps: Option<f64>) -> CmdResult<()> {
    let states = build_pfsa(topo)?.state_count();
    println!(
        "model: {} nodes, {} links, {} states, sink {}",
        topo.node_count(),
        topo.link_count(),
        states,
        topo.sink()
    );
    let shown = if theta < 1e-6 { format!("{theta:e}") } else { theta.to_string() };
    match eps {
        Some(e) => println!("theta = {shown} (epsilon = {e}, max degree {})", topo.max_degree()),
        None => println!("theta = {shown}"),
    }
    Ok(())
}

fn prepare(out: &OutArgs) -> CmdResult<()> {
    fs::create_dir_all(&out.out)
        .map_err(|e| Failure::usage(format!("cannot create {}: {e}", out.out.display())))
}

fn write(out: &OutArgs, name: &str, contents: &str) -> CmdResult<()> {
    let path = out.out.join(name);
    fs::write(&path, contents).map_err(|e| Failure::usage(format!("cannot write {}: {e}", path.display())))
}

/// Writes `stem.csv` or `stem.json` (an array of row objects).
fn write_table(out: &OutArgs, stem: &str, columns: &[&str], rows: &[Vec<Value>]) -> CmdResult<()> {
    match out.format {
        Format::Csv => {
            let mut s = columns.join(",");
            s.push('\n');
            for r in rows {
                let cells: Vec<String> = r
                    .iter()
                    .map(|v| match v {
                        Value::String(s) => s.clone(),
                        other => other.to_string(),
                    })
                    .collect();
                s.push_str(&cells.join(","));
                s.push('\n');
            }
            write(out, &format!("{stem}.csv"), &s)
        }
        Format::Json => {
            let objs: Vec<Value> = rows
                .iter()
                .map(|r| Value::Object(columns.iter().map(|c| c.to_string()).zip(r.iter().cloned()).collect()))
                .collect();
            write(out, &format!("{stem}.json"), &pretty(&Value::Array(objs)))
        }
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("values serialize");
    s.push('\n');
    s
}

fn per_node(values: &[f64]) -> Vec<Vec<Value>> {
    values.iter().enumerate().map(|(i, v)| vec![json!(i), json!(v)]).collect()
}

fn write_policy(out: &OutArgs, policy: &Policy) -> CmdResult<()> {
    let mut s = policy.to_json()?;
    s.push('\n');
    write(out, "policy.json", &s)
}

fn solve(topo: &NetworkTopology, theta: f64, eps: Option<f64>, out: &OutArgs) -> CmdResult<u8> {
    header(topo, theta, eps)?;
    prepare(out)?;
    let (net, sol) = solve_topology(topo, theta)?;
    let measures = sol.physical_measures(&net);
    let policy = sol.forwarding_policy(&net, topo);
    let rho = performance_vector(&net, topo, &policy)?;
    write_table(out, "measures", &["node_id", "measure"], &per_node(&measures))?;
    write_table(out, "rho", &["node_id", "rho"], &per_node(&rho.rho))?;
    write_policy(out, &policy)?;
    println!(
        "centralized fixpoint after {} passes: {} links disabled, ||rho||_2 = {:.6}",
        sol.iterations,
        policy.disabled_count(topo),
        rho.norm2()
    );
    Ok(0)
}

fn distribute(
    topo: &NetworkTopology,
    theta: f64,
    eps: Option<f64>,
    schedule: Schedule,
    init: Option<Vec<f64>>,
    out: &OutArgs,
) -> CmdResult<u8> {
    header(topo, theta, eps)?;
    prepare(out)?;
    let crit = ConvergenceCriterion::default();
    let mut engine = Engine::new(topo, theta, schedule, init.as_deref())?;
    let report = engine.run_to_convergence(&crit, true)?;
    let (net, sol) = solve_topology(topo, theta)?;
    let central = sol.physical_measures(&net);
    let gap = report
        .measures
        .iter()
        .zip(&central)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let rho = performance_vector(&net, topo, &report.policy)?;

    let trace = report.trace.as_ref().expect("trace requested");
    match out.format {
        Format::Csv => write(out, "trace.csv", &trace.to_csv())?,
        Format::Json => {
            let rows: Vec<Vec<Value>> = trace
                .measures
                .iter()
                .zip(&trace.forwarding_changes)
                .enumerate()
                .flat_map(|(r, (m, f))| {
                    m.iter()
                        .zip(f)
                        .enumerate()
                        .map(move |(i, (v, c))| vec![json!(r), json!(i), json!(v), json!(c)])
                })
                .collect();
            write_table(out, "trace", &["round", "node_id", "measure", "num_forwarding_changes"], &rows)?;
        }
    }
    write_table(out, "measures", &["node_id", "measure"], &per_node(&report.measures))?;
    write_policy(out, &report.policy)?;
    let summary = json!({
        "theta": theta,
        "epsilon": eps,
        "schedule": schedule.mode.to_string(),
        "seed": schedule.seed,
        "tol": crit.tol,
        "quiet_rounds": crit.quiet_rounds,
        "rounds_used": report.rounds_used,
        "rounds_run": report.rounds_run,
        "max_gap_to_centralized": gap,
        "min_measure": report.min_measure,
        "max_measure": report.max_measure,
        "max_decrease": report.max_decrease,
        "rho_norm": rho.norm2(),
        "disabled_links": report.policy.disabled_count(topo),
    });
    write(out, "convergence_report.json", &pretty(&summary))?;
    println!(
        "converged in {} rounds ({} run); max |distributed - centralized| = {gap:.3e}",
        report.rounds_used, report.rounds_run
    );
    Ok(0)
}

fn enumerate(topo: &NetworkTopology, theta: Option<(f64, Option<f64>)>, out: &OutArgs) -> CmdResult<u8> {
    let states = build_pfsa(topo)?.state_count();
    println!("model: {} nodes, {} links, {} states", topo.node_count(), topo.link_count(), states);
    let env = enumerate_policies(topo)?;
    prepare(out)?;
    write_table(out, "rho", &["node_id", "rho"], &per_node(&env.envelope.rho))?;
    let mut summary = json!({
        "links": topo.link_count(),
        "evaluated": env.evaluated,
        "envelope": env.envelope.rho,
        "argmax": env.argmax,
    });
    println!("{} policies evaluated", env.evaluated);
    if let Some((theta, eps)) = theta {
        let mut engine = Engine::new(topo, theta, Schedule::sync(), None)?;
        let report = engine.run_to_convergence(&ConvergenceCriterion::default(), false)?;
        let net = build_pfsa(topo)?;
        let rho = performance_vector(&net, topo, &report.policy)?;
        let gap = rho.max_gap_below(&env.envelope);
        summary["theta"] = json!(theta);
        summary["epsilon"] = json!(eps);
        summary["converged_rho"] = json!(rho.rho);
        summary["gap_below_envelope"] = json!(gap);
        println!("theta = {theta}: converged policy is {gap:.3e} below the envelope");
    }
    write(out, "enumeration.json", &pretty(&summary))?;
    Ok(0)
}

fn scenario_cmd(
    topo: &NetworkTopology,
    theta: f64,
    eps: Option<f64>,
    script: &ScenarioScript,
    out: &OutArgs,
) -> CmdResult<u8> {
    header(topo, theta, eps)?;
    let outcome = run_scenario(script, topo, theta)?;
    prepare(out)?;
    match out.format {
        Format::Csv => write(out, "metrics.csv", &outcome.metrics_csv())?,
        Format::Json => write(out, "metrics.json", &pretty(&serde_json::to_value(&outcome.rows)?))?,
    }
    write(out, "events.json", &pretty(&serde_json::to_value(&outcome.events)?))?;
    write_policy(out, &outcome.final_policy)?;
    if !outcome.packets.is_empty() {
        write(out, "packets.jsonl", &outcome.packets_jsonl()?)?;
    }
    for e in &outcome.events {
        match (e.settle_rounds, e.rho_norm_after) {
            (Some(r), Some(norm)) => println!("round {}: {} settled after {r} rounds, ||rho|| = {norm:.6}", e.round, e.tag),
            _ => println!("round {}: {} had not settled", e.round, e.tag),
        }
    }
    if !outcome.all_loop_free() {
        println!("warning: some snapshot policies contained loops");
    }
    Ok(0)
}

fn sweep(
    grid_n: &[usize],
    grid_eps: &[f64],
    trials: usize,
    seed: u64,
    settings: &ProfileSettings,
    out: &OutArgs,
) -> CmdResult<u8> {
    let mut ns = grid_n.to_vec();
    ns.sort_unstable();
    ns.dedup();
    let mut eps = grid_eps.to_vec();
    eps.sort_by(|a, b| b.total_cmp(a));
    eps.dedup();
    let rows = convergence_rounds_profile(&ns, &eps, trials, seed, settings)?;
    prepare(out)?;
    let table: Vec<Vec<Value>> = rows
        .iter()
        .map(|r| vec![json!(r.n), json!(r.epsilon), json!(r.mean_rounds), json!(r.min), json!(r.max)])
        .collect();
    write_table(out, "sweep", &["n", "epsilon", "mean_rounds", "min", "max"], &table)?;
    for r in &rows {
        println!("n = {:>5}  epsilon = {:<8}  mean rounds = {:.1}", r.n, r.epsilon, r.mean_rounds);
    }
    Ok(0)
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        mroute_core::Error::from(e).into()
    }
}
