//! CSV tables and SVG charts from the results log.
//!
//! Known languages are reported by anchor status (`anchor`, `non_anchor`)
//! rather than by name; the grouped directions are listed in every table and
//! chart header.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::mean_std;
use crate::experiment::{ResultRow, RunRecord, RunStatus, Workspace};
use crate::lingua::{LanguageSuite, Role, Task};

/// Key of one curve point before aggregation.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct PlanKey {
    method: String,
    strategy: String,
    label: String,
    k: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Panel {
    task: Task,
    group: String,
}

/// One aggregated CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub method: String,
    pub strategy: String,
    pub plan: String,
    pub k: usize,
    pub step: usize,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Files written by a report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportFiles {
    pub tables: Vec<PathBuf>,
    pub figures: Vec<PathBuf>,
}

fn side(suite: &LanguageSuite, anchor: &str, name: &str) -> String {
    match suite.languages.iter().find(|l| l.name == name) {
        Some(l) if l.role == Role::Unknown => "unknown".into(),
        Some(_) if name == anchor => "anchor".into(),
        Some(_) => "non_anchor".into(),
        None => name.to_string(),
    }
}

/// Direction group such as `anchor-to-unknown`.
pub fn direction_group(suite: &LanguageSuite, anchor: &str, direction: &str) -> String {
    match direction.split_once("->") {
        Some((s, t)) => format!("{}-to-{}", side(suite, anchor, s), side(suite, anchor, t)),
        None => direction.to_string(),
    }
}

fn method_of(run_id: &str) -> String {
    run_id.split('/').nth(1).unwrap_or("full").to_string()
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Aggregate the results log into per-panel tables of mean and std per plan and step.
fn tables(
    ws: &Workspace,
    runs: &[RunRecord],
    rows: &[ResultRow],
) -> Result<BTreeMap<Panel, (BTreeSet<String>, BTreeMap<(PlanKey, usize), Vec<f64>>)>> {
    let completed: BTreeSet<&str> = runs
        .iter()
        .filter(|r| r.status == RunStatus::Completed)
        .map(|r| r.run_id.as_str())
        .collect();
    let mut out: BTreeMap<Panel, (BTreeSet<String>, BTreeMap<(PlanKey, usize), Vec<f64>>)> = BTreeMap::new();
    for r in rows {
        if !completed.contains(r.run_id.as_str()) {
            return Err(Error::Consistency(format!("result row for `{}` has no completed run record", r.run_id)));
        }
        let panel = Panel {
            task: r.task,
            group: direction_group(&ws.suite, &ws.config.suite.anchor, &r.direction),
        };
        let key = PlanKey {
            method: method_of(&r.run_id),
            strategy: r.strategy.clone(),
            label: r.plan_label.clone(),
            k: r.k,
        };
        let entry = out.entry(panel).or_default();
        entry.0.insert(r.direction.clone());
        entry.1.entry((key, r.step)).or_default().push(r.value);
    }
    Ok(out)
}

/// Final-step mean of a reference run in a panel.
fn baseline(cells: &BTreeMap<(PlanKey, usize), Vec<f64>>, label: &str) -> Option<(f64, f64, usize)> {
    let last = cells
        .iter()
        .filter(|((k, _), _)| k.strategy == "reference" && k.label == label)
        .max_by_key(|((_, step), _)| *step)?;
    let values: Vec<f64> = cells
        .iter()
        .filter(|((k, step), _)| k.strategy == "reference" && k.label == label && *step == last.0 .1)
        .flat_map(|(_, v)| v.iter().copied())
        .collect();
    let a = mean_std(&values);
    Some((a.mean, a.std, values.len()))
}

/// Write every table and figure under `out`.
pub fn cmd_report(ws: &Workspace, out: &Path) -> Result<ReportFiles> {
    let runs = ws.registry()?;
    if runs.is_empty() {
        return Err(Error::State("registry is empty; run `sweep` first".into()));
    }
    let rows = ws.results()?;
    let panels = tables(ws, &runs, &rows)?;
    std::fs::create_dir_all(out)?;
    let mut files = ReportFiles::default();
    let mut baselines = String::from("task,group,baseline,mean,std,n\n");

    for (panel, (directions, cells)) in &panels {
        let stem = format!("{}__{}", panel.task.name(), panel.group);
        let members = directions.iter().cloned().collect::<Vec<_>>().join(" ");
        let (Some(full), Some(base)) = (baseline(cells, "full"), baseline(cells, "base")) else {
            return Err(Error::State(format!(
                "{stem}: reference runs (base and full) are missing; run a sweep so both references are executed"
            )));
        };
        for (name, (m, s, n)) in [("full", full), ("base", base)] {
            writeln!(baselines, "{},{},{name},{},{},{n}", panel.task.name(), panel.group, fmt(m), fmt(s)).unwrap();
        }

        // Table of mean and std per plan and checkpoint.
        let mut table = String::from("directions,method,strategy,plan,k,step,mean,std,n\n");
        let mut agg: Vec<TableRow> = Vec::new();
        for ((key, step), values) in cells {
            if key.strategy == "reference" {
                continue;
            }
            let a = mean_std(values);
            agg.push(TableRow {
                method: key.method.clone(),
                strategy: key.strategy.clone(),
                plan: key.label.clone(),
                k: key.k,
                step: *step,
                mean: a.mean,
                std: a.std,
                n: values.len(),
            });
        }
        for r in &agg {
            writeln!(
                table,
                "{members},{},{},{},{},{},{},{},{}",
                r.method,
                r.strategy,
                r.plan,
                r.k,
                r.step,
                fmt(r.mean),
                fmt(r.std),
                r.n
            )
            .unwrap();
        }
        let path = out.join(format!("{stem}.csv"));
        std::fs::write(&path, table)?;
        files.tables.push(path);

        // Final checkpoint of each plan.
        let mut finals: BTreeMap<(String, String, String), (usize, usize, f64)> = BTreeMap::new();
        for r in &agg {
            let e = finals
                .entry((r.method.clone(), r.strategy.clone(), r.plan.clone()))
                .or_insert((r.k, r.step, r.mean));
            if r.step >= e.1 {
                *e = (r.k, r.step, r.mean);
            }
        }
        let mut by_strategy: BTreeMap<(String, String), Vec<(String, usize, f64)>> = BTreeMap::new();
        for ((method, strategy, plan), (k, _, mean)) in &finals {
            by_strategy
                .entry((method.clone(), strategy.clone()))
                .or_default()
                .push((plan.clone(), *k, *mean));
        }
        let mut series = Vec::new();
        let mut budget = Vec::new();
        for ((method, strategy), mut points) in by_strategy {
            points.sort_by_key(|p| p.1);
            let prefix = if method == "full" { String::new() } else { format!("{method}:") };
            let distinct: BTreeSet<usize> = points.iter().map(|p| p.1).collect();
            if distinct.len() == points.len() {
                let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.1 as f64, p.2)).collect();
                let per_region = match strategy.as_str() {
                    "front" | "rear" => Some(1.0),
                    "cogsym" => Some(0.5),
                    _ => None,
                };
                if let Some(f) = per_region {
                    let xy: Vec<(f64, f64)> = xy.iter().map(|&(x, y)| (x * f, y)).collect();
                    budget.push((format!("{prefix}{strategy}"), xy.clone()));
                }
                series.push((format!("{prefix}{strategy}"), xy));
            } else {
                for (plan, k, mean) in points {
                    series.push((format!("{prefix}{plan}"), vec![(k as f64, mean)]));
                }
            }
        }
        let title = format!("{} {} [{members}]", panel.task.name(), panel.group);
        let path = out.join(format!("{stem}.svg"));
        std::fs::write(&path, svg_chart(&title, "trained layers k", &series, full.0, base.0))?;
        files.figures.push(path);
        if !budget.is_empty() {
            let path = out.join(format!("{stem}__budget.svg"));
            std::fs::write(&path, svg_chart(&title, "singular region budget k", &budget, full.0, base.0))?;
            files.figures.push(path);
        }

        // Steps by k per strategy.
        let strategies: BTreeSet<(String, String)> = agg.iter().map(|r| (r.method.clone(), r.strategy.clone())).collect();
        for (method, strategy) in strategies {
            let sub: Vec<&TableRow> = agg.iter().filter(|r| r.method == method && r.strategy == strategy).collect();
            let ks: BTreeSet<usize> = sub.iter().map(|r| r.k).collect();
            let steps: BTreeSet<usize> = sub.iter().map(|r| r.step).collect();
            let mut grid: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
            for r in &sub {
                grid.entry((r.step, r.k)).or_default().push(r.mean);
            }
            let mut t = String::from("step");
            for k in &ks {
                write!(t, ",k={k}").unwrap();
            }
            t.push('\n');
            for step in &steps {
                write!(t, "{step}").unwrap();
                for k in &ks {
                    match grid.get(&(*step, *k)) {
                        Some(v) => write!(t, ",{}", fmt(v.iter().sum::<f64>() / v.len() as f64)).unwrap(),
                        None => t.push(','),
                    }
                }
                t.push('\n');
            }
            let path = out.join(format!("{stem}__steps__{method}_{strategy}.csv"));
            std::fs::write(&path, t)?;
            files.tables.push(path);
        }
    }
    let path = out.join("baselines.csv");
    std::fs::write(&path, baselines)?;
    files.tables.push(path);
    Ok(files)
}

const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#7f7f7f", "#bcbd22"];

/// Static line chart on a [0, 1] y axis with dashed full (red) and base (green) lines.
pub fn svg_chart(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)], full: f64, base: f64) -> String {
    let (w, h, left, right, top, bottom) = (720.0, 420.0, 60.0, 180.0, 40.0, 50.0);
    let xs: Vec<f64> = series.iter().flat_map(|s| s.1.iter().map(|p| p.0)).collect();
    let (x0, x1) = match (xs.iter().cloned().reduce(f64::min), xs.iter().cloned().reduce(f64::max)) {
        (Some(a), Some(b)) if b > a => (a, b),
        (Some(a), _) => (a - 1.0, a + 1.0),
        _ => (0.0, 1.0),
    };
    let px = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let py = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * (h - top - bottom);
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#).unwrap();
    writeln!(s, "<!-- {} -->", escape(title)).unwrap();
    writeln!(s, "<!-- data: series,x,y -->").unwrap();
    for (name, pts) in series {
        for (x, y) in pts {
            writeln!(s, "<!-- {},{x},{} -->", escape(name), fmt(*y)).unwrap();
        }
    }
    writeln!(s, "<!-- baseline,full,{} -->", fmt(full)).unwrap();
    writeln!(s, "<!-- baseline,base,{} -->", fmt(base)).unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        (left + w - right) / 2.0,
        escape(title)
    )
    .unwrap();
    let (xa, ya) = (h - bottom, w - right);
    writeln!(s, r#"<line x1="{left}" y1="{xa}" x2="{ya}" y2="{xa}" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{xa}" stroke="black"/>"#).unwrap();
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        writeln!(
            s,
            r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{y:.1}</text>"#,
            left - 6.0,
            py(y) + 4.0
        )
        .unwrap();
    }
    let ticks: BTreeSet<u64> = xs.iter().map(|x| x.to_bits()).collect();
    for t in ticks {
        let x = f64::from_bits(t);
        writeln!(
            s,
            r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{x}</text>"#,
            px(x),
            xa + 16.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        (left + ya) / 2.0,
        h - 12.0,
        escape(x_label)
    )
    .unwrap();
    for (y, color) in [(full, "red"), (base, "green")] {
        writeln!(
            s,
            r#"<line x1="{left}" y1="{0:.2}" x2="{ya}" y2="{0:.2}" stroke="{color}" stroke-dasharray="6,4"/>"#,
            py(y)
        )
        .unwrap();
    }
    let mut legend = vec![("full finetune".to_string(), "red", true), ("base model".to_string(), "green", true)];
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        if pts.len() > 1 {
            writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, path.join(" ")).unwrap();
        }
        for &(x, y) in pts {
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y)).unwrap();
        }
        legend.push((name.clone(), color, false));
    }
    for (i, (name, color, dashed)) in legend.iter().enumerate() {
        let y = top + 10.0 + 18.0 * i as f64;
        let dash = if *dashed { r#" stroke-dasharray="6,4""# } else { "" };
        writeln!(
            s,
            r#"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"{dash}/>"#,
            ya + 10.0,
            ya + 34.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            ya + 40.0,
            y + 4.0,
            escape(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace("--", "- -")
}
