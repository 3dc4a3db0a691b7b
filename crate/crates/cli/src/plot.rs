use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use qnetopt::{integrate_mean, Costate, NetworkState};

use crate::{
    config, load_costate, load_policy, numerical, write_file, CmdResult, Failure, PlotArgs,
};

fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(config(anyhow!("missing artifact {}", path.display())))
    }
}

fn header(prefix: &[&str], name: &str, count: usize) -> String {
    let mut cols: Vec<String> = prefix.iter().map(|s| s.to_string()).collect();
    cols.extend((1..=count).map(|i| format!("{name}_{i}")));
    cols.join(",")
}

/// Jump rows of a trajectory CSV as `time,x_1..x_n`; the initial row is
/// dropped.
fn jump_rows(text: &str, n: usize) -> Result<String, Failure> {
    let mut out = header(&["time"], "x", n);
    out.push('\n');
    for (line_no, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n + 2 {
            return Err(config(anyhow!(
                "trajectory line {}: expected {} fields",
                line_no + 1,
                n + 2
            )));
        }
        if fields[1].is_empty() {
            continue;
        }
        out.push_str(fields[0]);
        for f in &fields[2..] {
            out.push(',');
            out.push_str(f);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Every state of `{0..=max}^n` in lexicographic order.
fn grid_states(n: usize, max: u64) -> Vec<Vec<u64>> {
    let mut all = vec![vec![]];
    for _ in 0..n {
        all = all
            .into_iter()
            .flat_map(|prefix: Vec<u64>| {
                (0..=max).map(move |v| {
                    let mut x = prefix.clone();
                    x.push(v);
                    x
                })
            })
            .collect();
    }
    all
}

pub(crate) fn run(args: &PlotArgs) -> CmdResult {
    let common = &args.common;
    let costate_path = common.default_path(&args.costate, "costate.json");
    let policy_path = common.default_path(&args.policy, "policy.json");
    let traj_path = common.default_path(&args.trajectory, "trajectory_0.csv");
    for path in [&costate_path, &policy_path, &traj_path] {
        require(path)?;
    }
    let p = common.load()?;
    let policy = load_policy(&policy_path)?;
    let costate = load_costate(&costate_path)?;
    if policy.m_u() != p.net.m_u() {
        return Err(config(anyhow!("policy does not match the network")));
    }
    let horizon = policy.horizon().unwrap_or(p.costs.horizon);
    let dir = common.output_dir()?;

    let mut times: Vec<f64> = (0..=args.samples)
        .map(|i| (horizon * i as f64 / args.samples.max(1) as f64).min(horizon))
        .collect();
    times.extend(policy.breakpoints(horizon));
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut csv = header(&["time"], "u", policy.m_u());
    csv.push('\n');
    for t in times {
        let u = policy.evaluate(t).map_err(numerical)?;
        write!(csv, "{t}").unwrap();
        for v in u {
            write!(csv, ",{v}").unwrap();
        }
        csv.push('\n');
    }
    write_file(&dir.join("policy_vs_time.csv"), csv.as_bytes())?;

    let text = fs::read_to_string(&traj_path)
        .with_context(|| format!("reading {}", traj_path.display()))
        .map_err(config)?;
    write_file(
        &dir.join("states.csv"),
        jump_rows(&text, p.net.n())?.as_bytes(),
    )?;

    let dt = args.dt.unwrap_or(1e-3 * horizon);
    let mean = integrate_mean(&p.net, &policy, &p.x0.to_f64(), horizon, dt).map_err(numerical)?;
    let mut buf = Vec::new();
    mean.write_csv(&mut buf).map_err(config)?;
    write_file(&dir.join("mean.csv"), &buf)?;

    let n = p.net.n();
    if n > 3 {
        log::warn!("value grid skipped: {n} queues");
        return Ok(());
    }
    let y0 = match &costate {
        Costate::FiniteHorizon(traj) => traj.initial().to_vec(),
        Costate::InfiniteHorizon(sol) => sol.y.clone(),
    };
    if y0.len() != n {
        return Err(config(anyhow!("costate does not match the network")));
    }
    let mut csv = header(&[], "x", n);
    csv.push_str(",V\n");
    for x in grid_states(n, args.grid_max) {
        let v = NetworkState::new(x.clone()).dot(&y0);
        for c in &x {
            write!(csv, "{c},").unwrap();
        }
        writeln!(csv, "{v}").unwrap();
    }
    write_file(&dir.join("value_grid.csv"), csv.as_bytes())?;
    Ok(())
}
