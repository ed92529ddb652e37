//! Renders run records into artifacts: plain-text activation-history and
//! comparison tables, comma-separated trajectory and zone geometry files for
//! external plotting, and a machine-readable record that re-parses to an
//! equal report. Column orders are documented in the repository README.

use crate::compare::{PipelineReport, RunReport, SetWindows};
use crate::problems::BenchProblemSpec;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// Writes every artifact for `report` into `out_dir`, creating it if
/// needed, and returns the written paths.
pub fn emit_reports(report: &RunReport, out_dir: &Path) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let emit = |name: &str, text: String, written: &mut Vec<PathBuf>| -> io::Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, text)?;
        written.push(path);
        Ok(())
    };

    emit("record.toml", render_record(report)?, &mut written)?;
    emit("comparison.txt", comparison_table(report), &mut written)?;

    let horizon = (report.problem.t0, report.problem.tf);
    if let Some(p) = report.ech.as_ref().or(report.standard.as_ref()) {
        emit("history.txt", history_table(p, horizon.0, horizon.1), &mut written)?;
    }
    for p in [&report.standard, &report.ech].into_iter().flatten() {
        let name = format!("trajectory_{}.csv", p.label);
        emit(&name, trajectory_csv(p), &mut written)?;
    }
    emit("zones.csv", zones_csv(&report.problem), &mut written)?;
    Ok(written)
}

/// Serializes the full record; parsing the result with [`parse_record`]
/// reproduces `report` exactly, including every float bit pattern.
pub fn render_record(report: &RunReport) -> io::Result<String> {
    toml::to_string_pretty(report).map_err(io::Error::other)
}

pub fn parse_record(text: &str) -> Result<RunReport, toml::de::Error> {
    toml::from_str(text)
}

pub fn load_record(path: &Path) -> io::Result<RunReport> {
    let text = fs::read_to_string(path)?;
    parse_record(&text).map_err(io::Error::other)
}

/// Activation history as one row per constraint set and one column per
/// refinement round. A cell holds the time windows the round implemented:
/// the full horizon, an interval union, or `∅` for a dropped set.
pub fn history_table(report: &PipelineReport, t0: f64, tf: f64) -> String {
    let rounds = report.iterations.len();
    let mut rows = Vec::with_capacity(report.history.len() + 1);
    let mut header = vec!["set".to_string()];
    header.extend((1..=rounds).map(|i| i.to_string()));
    rows.push(header);
    for h in &report.history {
        let mut row = vec![h.set.clone()];
        row.extend(h.per_iteration.iter().map(|w| window_cell(w, t0, tf)));
        rows.push(row);
    }
    render_table(&rows)
}

fn window_cell(w: &SetWindows, t0: f64, tf: f64) -> String {
    match w {
        SetWindows::All => format!("[{} {}]", fmt_bound(t0), fmt_bound(tf)),
        SetWindows::None => "∅".to_string(),
        SetWindows::Windows(ws) => ws
            .iter()
            .map(|w| format!("[{} {}]", fmt_bound(w[0]), fmt_bound(w[1])))
            .collect::<Vec<_>>()
            .join(" ∪ "),
    }
}

/// Side-by-side pipeline metrics. Row labels are stable; tooling may match
/// on them.
pub fn comparison_table(report: &RunReport) -> String {
    let pipelines: Vec<&PipelineReport> =
        [&report.standard, &report.ech].into_iter().flatten().collect();
    let mut rows = Vec::new();
    let mut header = vec!["metric".to_string()];
    header.extend(pipelines.iter().map(|p| p.label.clone()));
    rows.push(header);

    let metric = |label: &str, f: &dyn Fn(&PipelineReport) -> String| {
        let mut row = vec![label.to_string()];
        row.extend(pipelines.iter().map(|p| f(p)));
        row
    };
    rows.push(metric("Total Computation Time", &|p| format!("{:.4} s", p.total_time_s)));
    rows.push(metric("No. of Mesh Refinement Iterations", &|p| p.iterations.len().to_string()));
    rows.push(metric("Re-computation Time", &|p| format!("{:.4} s", p.recompute_time_s)));
    rows.push(metric("Objective", &|p| format!("{:.6}", p.objective)));
    rows.push(metric("Final Inequality Rows", &|p| p.final_ineq_rows.to_string()));
    rows.push(metric("Feasibility Repairs", &|p| p.afp_invocations.to_string()));

    let mut out = render_table(&rows);
    if let Some(failure) = &report.failure {
        out.push_str(&format!("\nstatus: {failure}\n"));
    }
    out
}

/// Columns: t, pos_north, pos_east, vel_north, vel_east, acc_north,
/// acc_east. Floats print in shortest round-trip form.
pub fn trajectory_csv(report: &PipelineReport) -> String {
    let mut out = String::from("t,pos_north,pos_east,vel_north,vel_east,acc_north,acc_east\n");
    for s in &report.trajectory {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.t, s.pos_north, s.pos_east, s.vel_north, s.vel_east, s.acc_north, s.acc_east
        ));
    }
    out
}

/// Columns: name, north, east, radius.
pub fn zones_csv(spec: &BenchProblemSpec) -> String {
    let mut out = String::from("name,north,east,radius\n");
    for (i, z) in spec.nfzs.iter().enumerate() {
        out.push_str(&format!("nfz{},{},{},{}\n", i + 1, z.north, z.east, z.radius));
    }
    out
}

/// Two-decimal time bound with trailing zeros trimmed.
fn fmt_bound(v: f64) -> String {
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Left-aligned columns padded to the widest cell, two spaces between
/// columns. Widths count characters, not bytes, for the sake of `∅` and `∪`.
fn render_table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut width = vec![0usize; cols];
    for row in rows {
        for (j, cell) in row.iter().enumerate() {
            width[j] = width[j].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for row in rows {
        let mut line = String::new();
        for (j, cell) in row.iter().enumerate() {
            line.push_str(cell);
            if j + 1 < row.len() {
                let pad = width[j] - cell.chars().count() + 2;
                line.extend(std::iter::repeat_n(' ', pad));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
