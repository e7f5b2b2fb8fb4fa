use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{CsadError, Result};
use crate::eval::ResultRecord;
use crate::io::write_atomic;
use crate::strategy::StrategyName;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub files: Vec<PathBuf>,
}

/// Every result record below `dir`, in path order. Files that are not
/// result records are skipped with a warning.
pub fn collect_records(dir: &Path) -> Result<Vec<ResultRecord>> {
    let mut paths = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CsadError::format(dir.display().to_string(), e.to_string()))?;
        let p = entry.path();
        if entry.file_type().is_file()
            && p.extension().is_some_and(|x| x == "json")
            && p.file_name().is_some_and(|n| n != "failures.json")
        {
            paths.push(p.to_path_buf());
        }
    }
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        match ResultRecord::read(&p) {
            Ok(r) => out.push(r),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    Ok(out)
}

fn strategy_rank(s: &str) -> (usize, String) {
    let pos = s
        .parse::<StrategyName>()
        .ok()
        .and_then(|n| StrategyName::ALL.iter().position(|&m| m == n))
        .unwrap_or(usize::MAX);
    (pos, s.to_string())
}

fn strategy_label(s: &str) -> String {
    s.parse::<StrategyName>().map(|n| n.label().to_string()).unwrap_or_else(|_| s.to_string())
}

fn dataset_rank(d: &str) -> (usize, String) {
    let pos = ["mnist", "fashion-mnist", "cifar10", "synthetic"]
        .iter()
        .position(|&x| x == d)
        .unwrap_or(usize::MAX);
    (pos, d.to_string())
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

/// Rows by columns of optional values; the largest value in each column is
/// bold.
fn table(corner: &str, cols: &[String], rows: &[(String, Vec<Option<f64>>)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| {corner} | {} |", cols.join(" | "));
    let _ = writeln!(s, "|---|{}", "---|".repeat(cols.len()));
    let best: Vec<Option<String>> = (0..cols.len())
        .map(|j| {
            rows.iter()
                .filter_map(|r| r.1[j])
                .max_by(f64::total_cmp)
                .map(|b| fmt_auc(Some(b)))
        })
        .collect();
    for (label, vals) in rows {
        let cells: Vec<String> = vals
            .iter()
            .zip(&best)
            .map(|(v, b)| {
                let t = fmt_auc(*v);
                if v.is_some() && b.as_deref() == Some(t.as_str()) {
                    format!("**{t}**")
                } else {
                    t
                }
            })
            .collect();
        let _ = writeln!(s, "| {label} | {} |", cells.join(" | "));
    }
    s
}

struct Grouped<'a> {
    /// experiment → dataset → strategy → records
    cells: BTreeMap<u32, BTreeMap<(usize, String), BTreeMap<(usize, String), Vec<&'a ResultRecord>>>>,
    titles: BTreeMap<u32, (String, String)>,
}

fn group(records: &[ResultRecord]) -> Grouped<'_> {
    let mut cells: BTreeMap<u32, BTreeMap<_, BTreeMap<_, Vec<&ResultRecord>>>> = BTreeMap::new();
    let mut titles = BTreeMap::new();
    for r in records {
        cells
            .entry(r.experiment_id)
            .or_default()
            .entry(dataset_rank(&r.dataset))
            .or_default()
            .entry(strategy_rank(&r.strategy))
            .or_default()
            .push(r);
        let field = |k: &str| r.config.get(k).and_then(|v| v.as_str()).map(str::to_string);
        if let (Some(a), Some(v)) = (field("ablation"), field("value")) {
            titles.entry(r.experiment_id).or_insert((a, v));
        }
    }
    Grouped { cells, titles }
}

fn cell_mean(rs: &[&ResultRecord]) -> Option<f64> {
    mean(&rs.iter().filter_map(|r| r.mean_auc).collect::<Vec<_>>())
}

fn experiment_title(g: &Grouped<'_>, id: u32) -> String {
    match g.titles.get(&id) {
        Some((a, v)) => format!("Experiment {id}: {a} = {v}"),
        None => format!("Experiment {id}"),
    }
}

fn main_table(g: &Grouped<'_>, id: u32) -> String {
    let datasets = &g.cells[&id];
    let cols: Vec<String> = datasets.keys().map(|d| d.1.clone()).collect();
    let mut strategies: Vec<(usize, String)> = datasets.values().flat_map(|m| m.keys().cloned()).collect();
    strategies.sort();
    strategies.dedup();
    let rows: Vec<(String, Vec<Option<f64>>)> = strategies
        .iter()
        .map(|s| {
            let vals = datasets
                .values()
                .map(|m| m.get(s).and_then(|rs| cell_mean(rs)))
                .collect();
            (strategy_label(&s.1), vals)
        })
        .collect();
    table("Strategy", &cols, &rows)
}

fn episode_table(by_strategy: &BTreeMap<(usize, String), Vec<&ResultRecord>>) -> String {
    let n = by_strategy
        .values()
        .flat_map(|rs| rs.iter().map(|r| r.episodes.len()))
        .max()
        .unwrap_or(0);
    let cols: Vec<String> = (0..n).map(|i| (i + 1).to_string()).collect();
    let rows: Vec<(String, Vec<Option<f64>>)> = by_strategy
        .iter()
        .map(|(s, rs)| {
            let vals = (0..n)
                .map(|i| mean(&rs.iter().filter_map(|r| r.episodes.get(i).and_then(|e| e.auc)).collect::<Vec<_>>()))
                .collect();
            (strategy_label(&s.1), vals)
        })
        .collect();
    table("Strategy / episode", &cols, &rows)
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped vertical bar chart of AUC values in [0, 1] as a standalone SVG.
pub fn render_bar_chart(title: &str, groups: &[String], series: &[(String, Vec<Option<f64>>)]) -> String {
    let (bar, gap, left, top, plot_h) = (16.0, 28.0, 56.0, 40.0, 220.0);
    let group_w = bar * series.len().max(1) as f64 + gap;
    let width = left + group_w * groups.len().max(1) as f64 + 140.0;
    let height = top + plot_h + 60.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{left:.1}" y="20" font-size="13">{}</text>"#,
        xml_escape(title)
    );
    for k in 0..=4 {
        let v = k as f64 / 4.0;
        let y = top + plot_h * (1.0 - v);
        let _ = writeln!(
            s,
            r##"<line x1="{left:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            left + group_w * groups.len() as f64
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 6.0, y + 4.0);
    }
    for (gi, g) in groups.iter().enumerate() {
        let x0 = left + gap / 2.0 + group_w * gi as f64;
        for (si, (_, vals)) in series.iter().enumerate() {
            if let Some(v) = vals.get(gi).copied().flatten() {
                let h = plot_h * v.clamp(0.0, 1.0);
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.1}" y="{:.1}" width="{bar:.1}" height="{h:.1}" fill="{}"><title>{v:.3}</title></rect>"#,
                    x0 + bar * si as f64,
                    top + plot_h - h,
                    PALETTE[si % PALETTE.len()]
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + bar * series.len() as f64 / 2.0,
            top + plot_h + 16.0,
            xml_escape(g)
        );
    }
    let lx = left + group_w * groups.len() as f64 + 16.0;
    for (si, (name, _)) in series.iter().enumerate() {
        let y = top + 16.0 * si as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.1}" y="{y:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            PALETTE[si % PALETTE.len()],
            lx + 14.0,
            y + 9.0,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Charts per (ablation, dataset): one bar group per experiment, one bar
/// per strategy.
fn charts(g: &Grouped<'_>) -> Vec<(String, String)> {
    let mut by_ablation: BTreeMap<String, Vec<u32>> = BTreeMap::new();
    for (&id, (a, _)) in &g.titles {
        by_ablation.entry(a.clone()).or_default().push(id);
    }
    let mut out = Vec::new();
    for (ablation, ids) in by_ablation {
        let mut datasets: Vec<(usize, String)> = ids.iter().flat_map(|id| g.cells[id].keys().cloned()).collect();
        datasets.sort();
        datasets.dedup();
        for d in datasets {
            let mut strategies: Vec<(usize, String)> = ids
                .iter()
                .filter_map(|id| g.cells[id].get(&d))
                .flat_map(|m| m.keys().cloned())
                .collect();
            strategies.sort();
            strategies.dedup();
            let groups: Vec<String> = ids.iter().map(|id| g.titles[id].1.clone()).collect();
            let series: Vec<(String, Vec<Option<f64>>)> = strategies
                .iter()
                .map(|s| {
                    let vals = ids
                        .iter()
                        .map(|id| g.cells[id].get(&d).and_then(|m| m.get(s)).and_then(|rs| cell_mean(rs)))
                        .collect();
                    (strategy_label(&s.1), vals)
                })
                .collect();
            let title = format!("{} ablation, {}: mean AUC", ablation, d.1);
            out.push((
                format!("ablation-{ablation}-{}.svg", d.1),
                render_bar_chart(&title, &groups, &series),
            ));
        }
    }
    out
}

/// The markdown report for a set of records.
pub fn render_markdown(records: &[ResultRecord]) -> String {
    let g = group(records);
    let mut s = String::from("# Results\n\nMean AUC-ROC over seeds; the best value in each column is bold.\n\n");
    let Some(&main) = g.cells.keys().find(|&&id| id == 2).or_else(|| g.cells.keys().next()) else {
        return s;
    };
    let _ = writeln!(s, "## Main results ({})\n", experiment_title(&g, main).to_lowercase());
    s.push_str(&main_table(&g, main));
    for &id in g.cells.keys() {
        let _ = writeln!(s, "\n## {}\n", experiment_title(&g, id));
        s.push_str(&main_table(&g, id));
        for (d, by_strategy) in &g.cells[&id] {
            let _ = writeln!(s, "\n### Per-episode AUC, {}\n", d.1);
            s.push_str(&episode_table(by_strategy));
        }
    }
    let figures = charts(&g);
    if !figures.is_empty() {
        s.push_str("\n## Figures\n\n");
        for (name, _) in &figures {
            let _ = writeln!(s, "![{name}]({name})");
        }
    }
    s
}

/// Write `report.md` and the bar charts into `out`.
pub fn emit_report(records: &[ResultRecord], out: &Path) -> Result<ReportBundle> {
    if records.is_empty() {
        return Err(CsadError::Validation("no result records to report".into()));
    }
    let mut files = Vec::new();
    let md = out.join("report.md");
    write_atomic(&md, render_markdown(records).as_bytes())?;
    files.push(md);
    for (name, svg) in charts(&group(records)) {
        let p = out.join(name);
        write_atomic(&p, svg.as_bytes())?;
        files.push(p);
    }
    Ok(ReportBundle { files })
}
