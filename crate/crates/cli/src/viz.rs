//! Scatter plots of projected items and the anchor, as minimal SVG plus a
//! CSV of exact coordinates. A 3-D probe gets two orthographic panels
//! (x–y and x–z).

use std::fmt::Write as _;
use std::fs;

use anyhow::{Context, Result};
use rankprobe::archive::RankedInstance;
use rankprobe::order::{decode_order, project_for_viz, OrderProbe};
use rankprobe::probe::Probe;
use rankprobe::Error;
use serde::Serialize;

use crate::commands::{resolve_layer, UsageError};
use crate::output::{ensure_dir, write_csv};
use crate::VizArgs;

const PANEL: f64 = 360.0;
const PAD: f64 = 36.0;
const ROW_GAP: f64 = 28.0;

#[derive(Serialize)]
struct PointRow {
    instance: String,
    item: String,
    gold_rank: Option<usize>,
    predicted_rank: Option<usize>,
    x: f64,
    y: f64,
    z: Option<f64>,
}

struct Panel {
    title: String,
    /// (x, y, gold rank or None for the anchor)
    points: Vec<(f64, f64, Option<usize>)>,
    labels: Vec<String>,
}

pub fn run(a: &VizArgs) -> Result<()> {
    let probe = match Probe::load(&a.probe)? {
        Probe::Order(p) => p,
        other => {
            return Err(UsageError(format!("viz needs an order probe, got {}", other.kind())).into());
        }
    };
    let d = probe.probe_dim();
    if !(2..=3).contains(&d) {
        return Err(Error::NotVisualizable(d).into());
    }
    let archive = rankprobe::archive::read_archive(&a.archive)?;
    if archive.hidden_dim() != probe.hidden_dim() {
        return Err(Error::DimensionMismatch {
            expected: probe.hidden_dim(),
            found: archive.hidden_dim(),
        }
        .into());
    }
    let layer = match &a.layer {
        Some(t) => resolve_layer(&archive, t)?,
        None => probe.layer_id,
    };
    let ranked = archive.slice_layer(layer, None)?.ranked();
    let chosen: Vec<&RankedInstance> = if a.instances.is_empty() {
        ranked.first().into_iter().collect()
    } else {
        a.instances
            .iter()
            .map(|id| {
                ranked
                    .iter()
                    .find(|r| &r.id == id)
                    .ok_or_else(|| Error::InvalidManifest(format!("no ranked instance '{id}' in layer {layer}")))
            })
            .collect::<Result<_, _>>()?
    };
    if chosen.is_empty() {
        return Err(Error::EmptyDataset.into());
    }

    let mut rows = Vec::new();
    let mut panel_rows = Vec::new();
    for inst in chosen {
        let (inst_rows, panels) = instance_panels(&probe, inst)?;
        rows.extend(inst_rows);
        panel_rows.push(panels);
    }
    ensure_dir(&a.out)?;
    write_csv(&a.out.join("viz.csv"), &rows)?;
    let svg_path = a.out.join("viz.svg");
    fs::write(&svg_path, render(&panel_rows)).with_context(|| format!("writing {}", svg_path.display()))?;
    println!("{}", svg_path.display());
    Ok(())
}

fn instance_panels(probe: &OrderProbe, inst: &RankedInstance) -> Result<(Vec<PointRow>, Vec<Panel>)> {
    let proj = project_for_viz(probe, &inst.embeddings)?;
    let predicted = decode_order(probe, &inst.embeddings)?;
    let d = proj.points.ncols();
    let coord = |r: usize, c: usize| proj.points[(r, c)];
    let mut rows: Vec<PointRow> = (0..proj.points.nrows())
        .map(|j| PointRow {
            instance: inst.id.clone(),
            item: j.to_string(),
            gold_rank: Some(inst.gold_ranks[j]),
            predicted_rank: Some(predicted[j]),
            x: coord(j, 0),
            y: coord(j, 1),
            z: (d == 3).then(|| coord(j, 2)),
        })
        .collect();
    rows.push(PointRow {
        instance: inst.id.clone(),
        item: "anchor".into(),
        gold_rank: None,
        predicted_rank: None,
        x: proj.anchor[0],
        y: proj.anchor[1],
        z: (d == 3).then(|| proj.anchor[2]),
    });
    let axes: &[(usize, usize, &str)] = if d == 2 {
        &[(0, 1, "x–y")]
    } else {
        &[(0, 1, "x–y"), (0, 2, "x–z")]
    };
    let panels = axes
        .iter()
        .map(|&(u, v, name)| {
            let mut points: Vec<_> = (0..proj.points.nrows())
                .map(|j| (coord(j, u), coord(j, v), Some(inst.gold_ranks[j])))
                .collect();
            points.push((proj.anchor[u], proj.anchor[v], None));
            Panel {
                title: format!("{} ({name})", inst.id),
                labels: (0..proj.points.nrows()).map(|j| inst.gold_ranks[j].to_string()).collect(),
                points,
            }
        })
        .collect();
    Ok((rows, panels))
}

/// Blue for rank 1 through red for rank W.
fn rank_color(rank: usize, w: usize) -> String {
    let t = if w > 1 { (rank - 1) as f64 / (w - 1) as f64 } else { 0.0 };
    let r = (40.0 + 200.0 * t).round() as u8;
    let b = (240.0 - 200.0 * t).round() as u8;
    format!("#{r:02x}50{b:02x}")
}

fn render(rows: &[Vec<Panel>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1);
    let cell = PANEL + 2.0 * PAD;
    let width = cols as f64 * cell;
    let height = rows.len() as f64 * (cell + ROW_GAP);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (ri, panels) in rows.iter().enumerate() {
        for (ci, panel) in panels.iter().enumerate() {
            let ox = ci as f64 * cell + PAD;
            let oy = ri as f64 * (cell + ROW_GAP) + PAD + ROW_GAP;
            render_panel(&mut svg, panel, ox, oy);
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn render_panel(svg: &mut String, panel: &Panel, ox: f64, oy: f64) {
    // origin is always in frame so the probe vector can be drawn from it
    let (mut x0, mut x1, mut y0, mut y1) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &(x, y, _) in &panel.points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12) * 1.1;
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    let sx = |x: f64| ox + PANEL / 2.0 + (x - cx) / span * PANEL;
    let sy = |y: f64| oy + PANEL / 2.0 - (y - cy) / span * PANEL;
    let w = panel.labels.len();

    let _ = writeln!(
        svg,
        r##"<rect x="{ox:.2}" y="{oy:.2}" width="{PANEL}" height="{PANEL}" fill="none" stroke="#999"/>"##
    );
    let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, ox, oy - 8.0, escape(&panel.title));
    let (zx, zy) = (sx(0.0), sy(0.0));
    let _ = writeln!(svg, r##"<circle cx="{zx:.2}" cy="{zy:.2}" r="2" fill="#666"/>"##);
    for (k, &(x, y, rank)) in panel.points.iter().enumerate() {
        let (px, py) = (sx(x), sy(y));
        match rank {
            Some(r) => {
                let _ = writeln!(
                    svg,
                    r#"<circle cx="{px:.2}" cy="{py:.2}" r="5" fill="{}"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                    rank_color(r, w),
                    px + 7.0,
                    py + 4.0,
                    escape(&panel.labels[k])
                );
            }
            None => {
                let _ = writeln!(
                    svg,
                    r##"<line x1="{zx:.2}" y1="{zy:.2}" x2="{px:.2}" y2="{py:.2}" stroke="#d4a017" stroke-width="2"/><rect x="{:.2}" y="{:.2}" width="10" height="10" fill="#d4a017"/><text x="{:.2}" y="{:.2}">anchor</text>"##,
                    px - 5.0,
                    py - 5.0,
                    px + 8.0,
                    py - 6.0
                );
            }
        }
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
