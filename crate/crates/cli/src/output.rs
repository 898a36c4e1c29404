//! Artifact writers. Numbers in CSV files carry 17 significant digits.
//!
//! `report.json` is a flat object: string keys mapped to numbers, booleans or
//! strings. Keys common to every task are `task`, `kind` and `seed`; solved
//! tasks add `converged`, `iterations`, `cost`, `gap_norm` and `termination`
//! (prefixed with the actuation label in the energy study).

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use nalgebra::DVector;

use crate::tasks::{RunRecord, TaskOutcome, Variant};

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

fn suffix(i: usize, run: &RunRecord) -> String {
    if i == 0 {
        String::new()
    } else {
        format!("_{}", run.label)
    }
}

pub fn state_header(run: &RunRecord) -> Vec<String> {
    let (n, m) = (run.n_links, run.n_motors);
    let mut h: Vec<String> = (0..n).map(|i| format!("q{i}")).collect();
    h.extend((0..n).map(|i| format!("qdot{i}")));
    if run.variant != Variant::Rigid {
        h.extend((0..m).map(|i| format!("theta{i}")));
        h.extend((0..m).map(|i| format!("thetadot{i}")));
    }
    h
}

pub fn control_header(run: &RunRecord) -> Vec<String> {
    let m = run.n_motors;
    let mut h: Vec<String> = (0..m).map(|i| format!("tau{i}")).collect();
    if run.variant == Variant::Vsa {
        h.extend((0..m).map(|i| format!("sigma{i}")));
    }
    h
}

fn push_row(out: &mut String, t: f64, values: impl Iterator<Item = String>) {
    out.push_str(&num(t));
    for v in values {
        out.push(',');
        out.push_str(&v);
    }
    out.push('\n');
}

/// One row per knot; the final knot has empty control columns.
pub fn trajectory_csv(run: &RunRecord) -> String {
    let mut s = String::from("t");
    for h in state_header(run).iter().chain(&control_header(run)) {
        s.push(',');
        s.push_str(h);
    }
    s.push('\n');
    let nu = control_header(run).len();
    for (k, x) in run.xs.iter().enumerate() {
        let controls: Vec<String> = match run.us.get(k) {
            Some(u) => u.iter().map(|v| num(*v)).collect(),
            None => vec![String::new(); nu],
        };
        push_row(
            &mut s,
            k as f64 * run.dt,
            x.iter().map(|v| num(*v)).chain(controls),
        );
    }
    s
}

pub fn controls_csv(run: &RunRecord) -> String {
    let mut s = String::from("t");
    for h in control_header(run) {
        s.push(',');
        s.push_str(&h);
    }
    s.push('\n');
    for (k, u) in run.us.iter().enumerate() {
        push_row(&mut s, k as f64 * run.dt, u.iter().map(|v| num(*v)));
    }
    s
}

fn norm(v: &DVector<f64>) -> f64 {
    v.norm()
}

/// Per-node feed-forward and feedback gain norms.
pub fn gains_csv(run: &RunRecord) -> Option<String> {
    let sol = run.solution.as_ref()?;
    let mut s = String::from("node,t,k_ff_norm,k_fb_frobenius,k_fb_max_abs\n");
    for (k, (kff, kfb)) in sol.k_ff.iter().zip(&sol.k_fb).enumerate() {
        let _ = writeln!(
            s,
            "{k},{},{},{},{}",
            num(k as f64 * run.dt),
            num(norm(kff)),
            num(kfb.norm()),
            num(kfb.amax())
        );
    }
    Some(s)
}

pub fn report_json(outcome: &TaskOutcome) -> String {
    let map: serde_json::Map<String, serde_json::Value> = outcome
        .report
        .iter()
        .map(|(k, v)| (k.clone(), sanitize(v)))
        .collect();
    let mut s =
        serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("serializable");
    s.push('\n');
    s
}

/// JSON has no infinities or NaN; those become strings.
fn sanitize(v: &serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Null => serde_json::Value::String("nan".into()),
        other => other.clone(),
    }
}

pub fn summary_txt(outcome: &TaskOutcome) -> String {
    let mut s = format!("task: {}\n", outcome.name);
    for line in &outcome.summary {
        s.push_str(line);
        s.push('\n');
    }
    s
}

pub fn write_all(outcome: &TaskOutcome, dir: &Path) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (i, run) in outcome.runs.iter().enumerate() {
        let sfx = suffix(i, run);
        fs::write(
            dir.join(format!("trajectory{sfx}.csv")),
            trajectory_csv(run),
        )?;
        fs::write(dir.join(format!("controls{sfx}.csv")), controls_csv(run))?;
        if let Some(g) = gains_csv(run) {
            fs::write(dir.join(format!("gains{sfx}.csv")), g)?;
        }
    }
    for (name, contents) in &outcome.tables {
        fs::write(dir.join(name), contents)?;
    }
    fs::write(dir.join("summary.txt"), summary_txt(outcome))?;
    fs::write(dir.join("report.json"), report_json(outcome))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(variant: Variant) -> RunRecord {
        RunRecord {
            label: "x".into(),
            variant,
            n_links: 1,
            n_motors: 1,
            dt: 0.5,
            xs: vec![DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]); 2],
            us: vec![DVector::from_vec(vec![1.0, 2.0])],
            solution: None,
        }
    }

    #[test]
    fn trajectory_layout() {
        let csv = trajectory_csv(&run(Variant::Vsa));
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "t,q0,qdot0,theta0,thetadot0,tau0,sigma0");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1].split(',').count(), 7);
        assert!(lines[2].ends_with(",,"));
    }

    #[test]
    fn numbers_round_trip_exactly() {
        for v in [
            0.1,
            1.0 / 3.0,
            -2.5e-300,
            123456789.123456789,
            f64::MIN_POSITIVE,
        ] {
            let back: f64 = num(v).parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn sea_has_no_sigma_column() {
        assert_eq!(control_header(&run(Variant::Sea)), vec!["tau0"]);
        let r = run(Variant::Rigid);
        assert_eq!(state_header(&r), vec!["q0", "qdot0"]);
    }
}
