//! Ablation grid: parse, run every (cell, seed), summarize.
//!
//! Grid files are plain text:
//!
//! ```text
//! # applied to every cell
//! set epochs = 30
//! # cartesian product over listed values
//! axis query_scheme = naive, hierarchical, hybrid
//! # extra cells, each a named set of overrides
//! cell no_attn: mask = off
//! cell before_cross: placement = before_cross; fusion = mean
//! ```
//!
//! Scores are reported in percentage points.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;
use vecmap_core::detector::{self, evaluate_model, load_trained, split, DetectorConfig};
use vecmap_core::queries::QueryScheme;
use vecmap_core::synthgen::{read_dataset, Scene};

use crate::commands::check_compatible;
use crate::manifest::{manifest_path, ManifestBuilder};
use crate::{CliError, CliResult};

pub const CSV_HEADER: &str = "config,seed,mAP,TOPO_f1";
pub const CSV_FILE: &str = "ablation.csv";
pub const SVG_FILE: &str = "ablation.svg";
pub const TABLE_FILE: &str = "ablation.md";
const RESULT_FILE: &str = "result.json";

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Grid spec file.
    #[arg(long)]
    pub grid: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridSpec {
    pub base: Vec<(String, String)>,
    pub axes: Vec<(String, Vec<String>)>,
    pub cells: Vec<Cell>,
}

fn kv(s: &str, lineno: usize) -> CliResult<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("grid line {lineno}: expected `key = value`, got {s:?}")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl GridSpec {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut g = GridSpec::default();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (word, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            match word {
                "set" => g.base.push(kv(rest, n)?),
                "axis" => {
                    let (k, v) = kv(rest, n)?;
                    let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
                    if values.iter().any(String::is_empty) {
                        return Err(CliError::usage(format!("grid line {n}: empty axis value")));
                    }
                    g.axes.push((k, values));
                }
                "cell" => {
                    let (name, body) = rest
                        .split_once(':')
                        .ok_or_else(|| CliError::usage(format!("grid line {n}: expected `cell NAME: k = v; ...`")))?;
                    let overrides = body
                        .split(';')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| kv(s, n))
                        .collect::<CliResult<Vec<_>>>()?;
                    g.cells.push(Cell {
                        name: name.trim().to_string(),
                        overrides,
                    });
                }
                other => {
                    return Err(CliError::usage(format!(
                        "grid line {n}: unknown directive {other:?} (expected set, axis or cell)"
                    )))
                }
            }
        }
        Ok(g)
    }

    /// Axis product first, then the explicit cells.
    pub fn expand(&self) -> Vec<Cell> {
        let mut product: Vec<Cell> = if self.axes.is_empty() {
            Vec::new()
        } else {
            vec![Cell {
                name: String::new(),
                overrides: Vec::new(),
            }]
        };
        for (key, values) in &self.axes {
            product = product
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        if !c.name.is_empty() {
                            c.name.push('+');
                        }
                        c.name.push_str(v);
                        c.overrides.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        product.extend(self.cells.iter().cloned());
        product
    }

    /// Resolved and validated config per cell.
    pub fn configs(&self) -> CliResult<Vec<(String, DetectorConfig)>> {
        let cells = self.expand();
        if cells.is_empty() {
            return Err(CliError::usage("grid defines no cells"));
        }
        let mut out: Vec<(String, DetectorConfig)> = Vec::new();
        for cell in cells {
            if cell.name.is_empty()
                || !cell.name.chars().all(|c| c.is_ascii_alphanumeric() || "_-+.".contains(c))
            {
                return Err(CliError::usage(format!(
                    "cell name {:?} must be non-empty and use only [A-Za-z0-9_.+-]",
                    cell.name
                )));
            }
            if out.iter().any(|(n, _)| *n == cell.name) {
                return Err(CliError::usage(format!("duplicate cell {:?}", cell.name)));
            }
            let mut cfg = DetectorConfig::default();
            for (k, v) in self.base.iter().chain(&cell.overrides) {
                cfg.set(k, v).map_err(|e| CliError::usage(format!("cell {}: {e}", cell.name)))?;
            }
            cfg.validate().map_err(|e| CliError::usage(format!("cell {}: {e}", cell.name)))?;
            out.push((cell.name, cfg));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "TOPO_f1")]
    pub topo_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellStats {
    pub config: String,
    pub runs: usize,
    pub map_mean: f64,
    pub map_sd: f64,
    pub topo_mean: f64,
    pub topo_sd: f64,
    /// For hybrid cells: mean mAP minus that of the otherwise identical hierarchical cell.
    pub hybrid_minus_hierarchical: Option<f64>,
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Hash of a config with the seed factored out, to pair up cells.
fn shape_hash(cfg: &DetectorConfig, scheme: QueryScheme) -> String {
    let mut c = cfg.clone();
    c.seed = 0;
    c.query_scheme = scheme;
    c.hash_hex()
}

pub fn summarize(cells: &[(String, DetectorConfig)], results: &[RunResult]) -> Vec<CellStats> {
    let means: Vec<(f64, f64, f64, f64, usize)> = cells
        .iter()
        .map(|(name, _)| {
            let rs: Vec<&RunResult> = results.iter().filter(|r| &r.config == name).collect();
            let (mm, ms) = mean_sd(&rs.iter().map(|r| r.map).collect::<Vec<_>>());
            let (tm, ts) = mean_sd(&rs.iter().map(|r| r.topo_f1).collect::<Vec<_>>());
            (mm, ms, tm, ts, rs.len())
        })
        .collect();
    cells
        .iter()
        .zip(&means)
        .map(|((name, cfg), &(mm, ms, tm, ts, n))| {
            let delta = (cfg.query_scheme == QueryScheme::Hybrid)
                .then(|| {
                    let want = shape_hash(cfg, QueryScheme::Hierarchical);
                    cells
                        .iter()
                        .position(|(_, c)| {
                            c.query_scheme == QueryScheme::Hierarchical
                                && shape_hash(c, QueryScheme::Hierarchical) == want
                        })
                        .map(|j| mm - means[j].0)
                })
                .flatten();
            CellStats {
                config: name.clone(),
                runs: n,
                map_mean: mm,
                map_sd: ms,
                topo_mean: tm,
                topo_sd: ts,
                hybrid_minus_hierarchical: delta,
            }
        })
        .collect()
}

pub fn render_csv(results: &[RunResult]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in results {
        writeln!(s, "{},{},{:.4},{:.4}", r.config, r.seed, r.map, r.topo_f1).unwrap();
    }
    s
}

pub fn render_table(stats: &[CellStats]) -> String {
    let mut s = String::from("| config | runs | mAP | TOPO F1 | Δ mAP hybrid − hierarchical |\n|---|---:|---:|---:|---:|\n");
    for c in stats {
        writeln!(
            s,
            "| {} | {} | {:.2} ± {:.2} | {:.2} ± {:.2} | {} |",
            c.config,
            c.runs,
            c.map_mean,
            c.map_sd,
            c.topo_mean,
            c.topo_sd,
            c.hybrid_minus_hierarchical.map_or(String::new(), |d| format!("{d:+.2}"))
        )
        .unwrap();
    }
    s
}

/// Grouped bar chart of mean mAP and TOPO F1 per cell, with ±sd whiskers.
pub fn render_svg(stats: &[CellStats]) -> String {
    let (group_w, bar_w, plot_h, left, top) = (110.0, 36.0, 260.0, 50.0, 30.0);
    let width = left + group_w * stats.len() as f64 + 20.0;
    let height = top + plot_h + 70.0;
    let ymax = stats
        .iter()
        .flat_map(|c| [c.map_mean + c.map_sd, c.topo_mean + c.topo_sd])
        .filter(|v| v.is_finite())
        .fold(1.0, f64::max);
    let ymax = (ymax / 10.0).ceil() * 10.0;
    let y = |v: f64| top + plot_h * (1.0 - v / ymax);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    for t in 0..=5 {
        let v = ymax * t as f64 / 5.0;
        writeln!(
            s,
            r##"<line x1="{left}" x2="{x2}" y1="{yy:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{tx}" y="{ty:.1}" text-anchor="end">{v:.0}</text>"##,
            x2 = width - 20.0,
            yy = y(v),
            tx = left - 6.0,
            ty = y(v) + 4.0
        )
        .unwrap();
    }
    for (i, c) in stats.iter().enumerate() {
        let x0 = left + group_w * i as f64 + 14.0;
        for (k, (mean, sd, color)) in [(c.map_mean, c.map_sd, "#3b6ea8"), (c.topo_mean, c.topo_sd, "#d08b2c")]
            .into_iter()
            .enumerate()
        {
            if !mean.is_finite() {
                continue;
            }
            let x = x0 + k as f64 * (bar_w + 4.0);
            writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="{bar_w}" height="{:.1}" fill="{color}"/>"#,
                y(mean),
                y(0.0) - y(mean)
            )
            .unwrap();
            let cx = x + bar_w / 2.0;
            writeln!(
                s,
                r#"<line x1="{cx:.1}" x2="{cx:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
                y((mean - sd).max(0.0)),
                y(mean + sd)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x0 + bar_w + 2.0,
            top + plot_h + 16.0,
            c.config
        )
        .unwrap();
    }
    let ly = top + plot_h + 40.0;
    writeln!(
        s,
        r##"<rect x="{left}" y="{ly}" width="12" height="12" fill="#3b6ea8"/><text x="{}" y="{}">mAP</text><rect x="{}" y="{ly}" width="12" height="12" fill="#d08b2c"/><text x="{}" y="{}">TOPO F1</text>"##,
        left + 16.0,
        ly + 10.0,
        left + 70.0,
        left + 86.0,
        ly + 10.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{left}" y="18">mean ± sd over seeds (percentage points)</text>"#
    )
    .unwrap();
    s.push_str("</svg>\n");
    s
}

/// Trains and scores one (cell, seed) run, reusing a finished result in `dir`.
pub fn run_cell(scenes: &[Scene], name: &str, cfg: &DetectorConfig, dir: &Path) -> CliResult<RunResult> {
    let result_path = dir.join(RESULT_FILE);
    if let Ok(text) = fs::read_to_string(&result_path) {
        if let Ok(r) = serde_json::from_str::<RunResult>(&text) {
            if r.config_hash == cfg.hash_hex() && r.config == name {
                return Ok(r);
            }
        }
    }
    let summary = detector::train(scenes, cfg, dir, |_| {})?;
    let report = match summary.final_report {
        Some(r) => r,
        None => {
            let (det, store) = load_trained(&summary.checkpoint)?;
            evaluate_model(&det, &store, &split(scenes, cfg)?.1)?
        }
    };
    let r = RunResult {
        config: name.to_string(),
        config_hash: cfg.hash_hex(),
        seed: cfg.seed,
        map: 100.0 * report.map,
        topo_f1: 100.0 * report.topo.f1,
    };
    fs::write(&result_path, serde_json::to_string_pretty(&r).expect("result serializes"))
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", result_path.display())))?;
    Ok(r)
}

/// Runs every cell for `seeds` seeds (cell seed, cell seed + 1, ...).
pub fn run_grid(
    scenes: &[Scene],
    cells: &[(String, DetectorConfig)],
    seeds: u64,
    out: &Path,
    mut progress: impl FnMut(&RunResult),
) -> CliResult<Vec<RunResult>> {
    let mut results = Vec::new();
    for (name, base) in cells {
        for k in 0..seeds {
            let mut cfg = base.clone();
            cfg.seed = base.seed + k;
            let dir = out.join("runs").join(name).join(format!("seed{}", cfg.seed));
            let r = run_cell(scenes, name, &cfg, &dir)?;
            progress(&r);
            results.push(r);
        }
    }
    Ok(results)
}

pub fn ablate(a: &AblateArgs) -> CliResult<Vec<CellStats>> {
    let mut m = ManifestBuilder::start("ablate");
    let text = fs::read_to_string(&a.grid)
        .map_err(|e| CliError::usage(format!("cannot read grid {}: {e}", a.grid.display())))?;
    let cells = GridSpec::parse(&text)?.configs()?;
    let (meta, scenes) = read_dataset(&a.data)?;
    for (_, cfg) in &cells {
        check_compatible(&meta, cfg)?;
    }
    fs::create_dir_all(&a.out).map_err(|e| CliError::usage(format!("cannot create {}: {e}", a.out.display())))?;
    m.config(json!({
        "grid": text,
        "seeds": a.seeds,
        "cells": cells.iter().map(|(n, c)| (n.clone(), crate::commands::config_json(c))).collect::<serde_json::Map<_, _>>(),
    }))
    .input(&a.data)
    .input(&a.grid);

    let results = run_grid(&scenes, &cells, a.seeds, &a.out, |r| {
        eprintln!("{:<28} seed {:>3}  mAP {:6.2}  TOPO {:6.2}", r.config, r.seed, r.map, r.topo_f1);
    })?;
    let stats = summarize(&cells, &results);
    let write = |name: &str, body: String| -> CliResult<PathBuf> {
        let p = a.out.join(name);
        fs::write(&p, body).map_err(|e| CliError::usage(format!("cannot write {}: {e}", p.display())))?;
        Ok(p)
    };
    m.output(&write(CSV_FILE, render_csv(&results))?);
    m.output(&write(SVG_FILE, render_svg(&stats))?);
    let table = render_table(&stats);
    m.output(&write(TABLE_FILE, table.clone())?);
    m.finish().write(&manifest_path(&a.out, "ablate"))?;
    print!("{table}");
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_product_and_cells() {
        let g = GridSpec::parse(
            "set epochs = 2\naxis query_scheme = naive, hybrid\naxis mask = off, masked\ncell extra: placement = before_cross; fusion = mean\n",
        )
        .unwrap();
        let names: Vec<String> = g.expand().into_iter().map(|c| c.name).collect();
        assert_eq!(names, ["naive+off", "naive+masked", "hybrid+off", "hybrid+masked", "extra"]);
        let cfgs = g.configs().unwrap();
        assert!(cfgs.iter().all(|(_, c)| c.epochs == 2));
        assert_eq!(cfgs[4].1.fusion.name(), "mean");
    }

    #[test]
    fn bad_values_are_usage_errors() {
        for text in ["axis query_scheme = bogus", "cell x: nope = 1", "frob a = b", "cell a b: mask = off", ""] {
            let r = GridSpec::parse(text).and_then(|g| g.configs());
            assert_eq!(r.unwrap_err().code, crate::EXIT_USAGE, "{text}");
        }
        let e = GridSpec::parse("axis query_scheme = bogus").unwrap().configs().unwrap_err();
        assert!(e.message.contains("hybrid"), "{}", e.message);
    }

    #[test]
    fn mean_and_sample_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_sd(&[7.0]), (7.0, 0.0));
    }

    fn result(config: &str, seed: u64, map: f64) -> RunResult {
        RunResult {
            config: config.into(),
            config_hash: String::new(),
            seed,
            map,
            topo_f1: map / 2.0,
        }
    }

    #[test]
    fn delta_pairs_hybrid_with_matching_hierarchical() {
        let cells = GridSpec::parse("axis query_scheme = naive, hierarchical, hybrid\ncell other: query_scheme = hybrid; mask = off")
            .unwrap()
            .configs()
            .unwrap();
        let rs = vec![
            result("naive", 0, 10.0),
            result("hierarchical", 0, 20.0),
            result("hierarchical", 1, 22.0),
            result("hybrid", 0, 30.0),
            result("hybrid", 1, 26.0),
            result("other", 0, 5.0),
        ];
        let st = summarize(&cells, &rs);
        assert_eq!(st[2].hybrid_minus_hierarchical, Some(7.0));
        assert_eq!(st[0].hybrid_minus_hierarchical, None);
        // no hierarchical cell with mask = off
        assert_eq!(st[3].hybrid_minus_hierarchical, None);
        let table = render_table(&st);
        assert!(table.contains("| hybrid | 2 | 28.00 ± 2.83 |"), "{table}");
        assert!(table.contains("+7.00"));
    }

    #[test]
    fn csv_has_header_and_one_row_per_run() {
        let rs = vec![result("a", 0, 1.0), result("a", 1, 2.0), result("b", 0, 3.0)];
        let csv = render_csv(&rs);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[3], "b,0,3.0000,1.5000");
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let cells = GridSpec::parse("axis query_scheme = naive, hybrid").unwrap().configs().unwrap();
        let st = summarize(&cells, &[result("naive", 0, 12.0), result("hybrid", 0, 40.0)]);
        let svg = render_svg(&st);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<rect").count(), 1 + 4 + 2);
        assert!(svg.contains(">hybrid</text>"));
    }
}
