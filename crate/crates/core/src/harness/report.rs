use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::run::{write_file, RunArtifacts, StrategyRun};
use super::HarnessError;

pub const CSV_HEADER: &str = "strategy,loss,dataset,seed,session,classes_seen,alpha_base,alpha_new,alpha_all";
pub const OMEGA_HEADER: &str = "strategy,loss,dataset,seed,omega_base,omega_new,omega_all,failed";

/// Paths written by [`emit_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub sessions_csv: PathBuf,
    pub omega_csv: PathBuf,
    pub svg: PathBuf,
}

/// One row per evaluated session (session 0 is the base model). Runs with
/// no incremental sessions contribute no rows. Values use the shortest
/// representation that parses back to the same `f64`.
pub fn sessions_csv(artifacts: &RunArtifacts) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for run in &artifacts.runs {
        if run.planned_sessions == 0 {
            continue;
        }
        for r in &run.log.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                run.strategy,
                run.loss,
                run.dataset,
                run.seed,
                r.session,
                r.classes_seen,
                r.alpha_base,
                r.alpha_new,
                r.alpha_all
            );
        }
    }
    out
}

pub fn omega_csv(artifacts: &RunArtifacts) -> String {
    let mut out = format!("{OMEGA_HEADER}\n");
    for run in &artifacts.runs {
        let (b, n, a) = match run.omega {
            Some(o) => (
                o.omega_base.to_string(),
                o.omega_new.to_string(),
                o.omega_all.to_string(),
            ),
            None => Default::default(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{b},{n},{a},{}",
            run.strategy,
            run.loss,
            run.dataset,
            run.seed,
            run.failure.is_some()
        );
    }
    out
}

const PALETTE: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

/// Base-test mAP@R against classes trained, one polyline per strategy
/// (mean over seeds), with the mean offline ideal dashed.
pub fn base_curve_svg(artifacts: &RunArtifacts) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let mut series: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut ideals = Vec::new();
    for run in &artifacts.runs {
        let s = series.entry(run.strategy.to_string()).or_default();
        for r in &run.log.records {
            s.entry(r.classes_seen).or_default().push(r.alpha_base);
        }
        ideals.push(run.log.ideal_base);
    }
    let xs: Vec<usize> = series.values().flat_map(|s| s.keys().copied()).collect();
    let (x0, x1) = match (xs.iter().min(), xs.iter().max()) {
        (Some(&a), Some(&b)) => (a as f64, (b as f64).max(a as f64 + 1.0)),
        _ => (0.0, 1.0),
    };
    let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
    let py = |y: f64| h - pad - y.clamp(0.0, 1.0) * (h - 2.0 * pad);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ty}\" text-anchor=\"middle\" font-size=\"12\">classes trained</text>\n\
         <text x=\"14\" y=\"{cy}\" font-size=\"12\" transform=\"rotate(-90 14 {cy})\" text-anchor=\"middle\">base-test mAP@R</text>\n",
        b = h - pad,
        r = w - pad,
        cx = w / 2.0,
        ty = h - 12.0,
        cy = h / 2.0,
    );
    for tick in 0..=4 {
        let y = tick as f64 / 4.0;
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"end\">{y:.2}</text>",
            pad - 4.0,
            py(y) + 3.0
        );
    }
    for x in x0 as usize..=x1 as usize {
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{x}</text>",
            px(x as f64),
            h - pad + 14.0
        );
    }
    if !ideals.is_empty() {
        let y = py(ideals.iter().sum::<f64>() / ideals.len() as f64);
        let _ = writeln!(
            svg,
            "<line class=\"ideal\" x1=\"{pad}\" y1=\"{y:.2}\" x2=\"{}\" y2=\"{y:.2}\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>",
            w - pad
        );
    }
    for (i, (name, points)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = points
            .iter()
            .map(|(&x, ys)| {
                format!(
                    "{:.2},{:.2}",
                    px(x as f64),
                    py(ys.iter().sum::<f64>() / ys.len() as f64)
                )
            })
            .collect();
        let _ = writeln!(
            svg,
            "<polyline data-strategy=\"{name}\" points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>",
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" fill=\"{colour}\">{name}</text>",
            w - pad - 60.0,
            pad + 14.0 * i as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `sessions.csv`, `omega.csv` and `base_map.svg` into `dir`.
pub fn emit_report(artifacts: &RunArtifacts, dir: &Path) -> Result<ReportFiles, HarnessError> {
    let files = ReportFiles {
        sessions_csv: dir.join("sessions.csv"),
        omega_csv: dir.join("omega.csv"),
        svg: dir.join("base_map.svg"),
    };
    write_file(&files.sessions_csv, &sessions_csv(artifacts))?;
    write_file(&files.omega_csv, &omega_csv(artifacts))?;
    write_file(&files.svg, &base_curve_svg(artifacts))?;
    Ok(files)
}

/// `(strategy, seed, session, [alpha_base, alpha_new, alpha_all])`
pub type SessionRow = (String, u64, usize, [f64; 3]);

/// Parses `sessions.csv` back into rows.
pub fn parse_sessions_csv(text: &str) -> Result<Vec<SessionRow>, HarnessError> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(HarnessError::Config("sessions csv has an unexpected header".into()));
    }
    let bad = |l: &str| HarnessError::Config(format!("bad sessions csv row `{l}`"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 9 {
                return Err(bad(l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(l));
            Ok((
                f[0].to_string(),
                f[3].parse().map_err(|_| bad(l))?,
                f[4].parse().map_err(|_| bad(l))?,
                [num(f[6])?, num(f[7])?, num(f[8])?],
            ))
        })
        .collect()
}

/// Convenience for callers holding a single run.
pub fn single(run: StrategyRun) -> RunArtifacts {
    RunArtifacts { runs: vec![run] }
}
