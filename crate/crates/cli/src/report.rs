//! Renders a finished run from its manifest. Reads only the files the
//! manifest lists, after checking their digests.

use std::fmt::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use crate::manifest::{write_atomic, RunManifest};
use crate::svg;

pub const PLOT: &str = "report.svg";

#[derive(Debug)]
pub struct Report {
    pub text: String,
    pub svg_path: PathBuf,
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Table> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("malformed table {}", path.display()))?;
        Ok(Table { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("table has no `{name}` column"))
    }
}

fn num(cell: &str) -> Option<f64> {
    cell.parse().ok()
}

/// `mean` or `mean ± std`, scaled by `scale`; `-` when absent.
fn cell(mean: &str, std: Option<&str>, scale: f64) -> String {
    match (num(mean), std.and_then(num)) {
        (Some(m), Some(s)) => format!("{:.2} ± {:.2}", scale * m, scale * s),
        (Some(m), None) => format!("{:.2}", scale * m),
        _ => "-".to_string(),
    }
}

fn render_rows(out: &mut String, header: &[&str], rows: &[Vec<String>]) {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i == 0 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    writeln!(out, "{}", line(header.to_vec())).unwrap();
    writeln!(out, "{}", widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ")).unwrap();
    for r in rows {
        writeln!(out, "{}", line(r.iter().map(String::as_str).collect())).unwrap();
    }
}

fn render_pipeline(out: &mut String, table: &Table) -> Result<String> {
    let method = table.col("method")?;
    let seed = table.col("seed")?;
    let metrics = [
        ("acc_source", "Source %", 100.0),
        ("acc_target", "Target %", 100.0),
        ("acc_expanded", "Expanded %", 100.0),
        ("acc_consistent", "Consistent %", 100.0),
        ("acc_inconsistent", "Inconsistent %", 100.0),
        ("ambiguity_s_to_t", "Amb s->t %", 1.0),
        ("ambiguity_t_to_s", "Amb t->s %", 1.0),
    ];
    let cols: Vec<usize> = metrics.iter().map(|(c, _, _)| table.col(c)).collect::<Result<_>>()?;

    let mut methods: Vec<&str> = Vec::new();
    for r in &table.rows {
        if !methods.contains(&r[method].as_str()) {
            methods.push(&r[method]);
        }
    }
    let mut rows = Vec::new();
    let mut bars = Vec::new();
    let mut any_std = false;
    for m in &methods {
        let mine: Vec<&Vec<String>> = table.rows.iter().filter(|r| r[method] == *m).collect();
        let mean = mine
            .iter()
            .find(|r| r[seed] == "mean")
            .ok_or_else(|| anyhow!("no mean row for `{m}`"))?;
        let std = mine.iter().find(|r| r[seed] == "std");
        any_std |= std.is_some();
        let n = mine.iter().filter(|r| r[seed].parse::<u64>().is_ok()).count();
        let mut row = vec![m.to_string(), n.to_string()];
        for (&c, (_, _, scale)) in cols.iter().zip(&metrics) {
            row.push(cell(&mean[c], std.map(|s| s[c].as_str()), *scale));
        }
        rows.push(row);
        bars.push((
            m.to_string(),
            cols[..3].iter().map(|&c| 100.0 * num(&mean[c]).unwrap_or(0.0)).collect(),
        ));
    }
    let mut header = vec!["Method", "Seeds"];
    header.extend(metrics.iter().map(|(_, h, _)| *h));
    render_rows(out, &header, &rows);
    if any_std {
        writeln!(out, "\nCells are mean ± sample standard deviation over seeds.").unwrap();
    }
    Ok(svg::bar_chart("Accuracy by method (seed mean)", &["source", "target", "expanded"], &bars))
}

fn render_ablation(out: &mut String, table: &Table) -> Result<String> {
    let setting = table.col("setting")?;
    let seed = table.col("seed")?;
    let cols = [table.col("acc_source")?, table.col("acc_target")?, table.col("acc_expanded")?];
    let mut rows = Vec::new();
    let mut bars = Vec::new();
    for r in table.rows.iter().filter(|r| r[seed] == "mean") {
        let n = table
            .rows
            .iter()
            .filter(|x| x[setting] == r[setting] && x[seed] != "mean")
            .count();
        let mut row = vec![r[setting].clone(), n.to_string()];
        row.extend(cols.iter().map(|&c| cell(&r[c], None, 100.0)));
        rows.push(row);
        bars.push((r[setting].clone(), cols.iter().map(|&c| 100.0 * num(&r[c]).unwrap_or(0.0)).collect()));
    }
    render_rows(out, &["Gamma", "Seeds", "Source %", "Target %", "Expanded %"], &rows);
    Ok(svg::bar_chart("Accuracy by gamma setting (seed mean)", &["source", "target", "expanded"], &bars))
}

/// Verifies the manifest, renders its table as text and writes an
/// accuracy-bars SVG to `svg_out` (default: `report.svg` beside the
/// manifest).
pub fn cmd_report(manifest_path: &Path, svg_out: Option<&Path>) -> Result<Report> {
    let manifest = RunManifest::load(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    manifest.verify(root)?;
    let table_rel = manifest
        .table
        .as_deref()
        .ok_or_else(|| anyhow!("manifest {} lists no result table", manifest_path.display()))?;
    let table = Table::read(&root.join(table_rel))?;

    let mut out = String::new();
    let ok = manifest.seeds.iter().filter(|s| s.ok).count();
    writeln!(
        out,
        "{} run: {ok}/{} seeds completed, config {}",
        manifest.command,
        manifest.seeds.len(),
        &manifest.config_digest[..12.min(manifest.config_digest.len())]
    )
    .unwrap();
    for s in manifest.seeds.iter().filter(|s| !s.ok) {
        writeln!(out, "  seed {} failed: {}", s.seed, s.error.as_deref().unwrap_or("unknown error")).unwrap();
    }
    writeln!(out).unwrap();
    let svg = match manifest.command.as_str() {
        "pipeline" => render_pipeline(&mut out, &table)?,
        "ablate-gamma" => render_ablation(&mut out, &table)?,
        other => bail!("unknown command `{other}` in manifest"),
    };
    let svg_path = svg_out.map(Path::to_path_buf).unwrap_or_else(|| root.join(PLOT));
    write_atomic(&svg_path, svg.as_bytes())?;
    Ok(Report { text: out, svg_path })
}
