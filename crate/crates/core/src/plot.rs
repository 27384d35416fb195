//! SVG charts for ablation tables.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::ablation::AblationTable;
use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn frame(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN);
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", (x0 + x1) / 2.0, H - 18.0, escape(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
    s
}

/// Maps `v` in `[lo, hi]` onto `[a, b]`.
fn lerp(v: f64, lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    if hi == lo {
        (a + b) / 2.0
    } else {
        a + (v - lo) / (hi - lo) * (b - a)
    }
}

fn padded_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let pad = ((hi - lo) * 0.1).max(0.02);
    (lo - pad, hi + pad)
}

/// mAP against head stages per frame; the x axis runs from many stages
/// (left) to few (right), so cheaper settings sit further right.
pub fn scatter_svg(table: &AblationTable) -> String {
    let rows: Vec<_> = table.rows.iter().filter(|r| r.skipped.is_none()).collect();
    let mut s = frame(&format!("{}: toy-mAP vs head stages/frame", table.suite), "mean head stages per frame (descending)", "toy-mAP@0.5");
    let (xlo, xhi) = padded_range(rows.iter().map(|r| r.stages_per_frame));
    let (ylo, yhi) = padded_range(rows.iter().map(|r| r.map));
    let (left, right, bottom, top) = (MARGIN, W - MARGIN / 2.0, H - MARGIN, MARGIN);
    for i in 0..=4 {
        let xv = xhi - (xhi - xlo) * i as f64 / 4.0;
        let x = lerp(xv, xhi, xlo, left, right);
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{}\" text-anchor=\"middle\">{xv:.2}</text>", bottom + 16.0);
        let yv = ylo + (yhi - ylo) * i as f64 / 4.0;
        let y = lerp(yv, ylo, yhi, bottom, top);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y:.1}\" text-anchor=\"end\">{yv:.3}</text>", left - 6.0);
    }
    for r in rows {
        let x = lerp(r.stages_per_frame, xhi, xlo, left, right);
        let y = lerp(r.map, ylo, yhi, bottom, top);
        let _ = writeln!(s, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"4\" fill=\"steelblue\"/>");
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>", x + 6.0, y - 6.0, escape(&r.name));
    }
    s.push_str("</svg>\n");
    s
}

/// One bar of mAP per evaluated row.
pub fn bars_svg(table: &AblationTable) -> String {
    let rows: Vec<_> = table.rows.iter().filter(|r| r.skipped.is_none()).collect();
    let mut s = frame(&format!("{}: toy-mAP per row", table.suite), "", "toy-mAP@0.5");
    let (left, right, bottom, top) = (MARGIN, W - MARGIN / 2.0, H - MARGIN, MARGIN);
    let n = rows.len().max(1) as f64;
    let slot = (right - left) / n;
    for (i, r) in rows.iter().enumerate() {
        let x = left + slot * i as f64 + slot * 0.15;
        let y = lerp(r.map, 0.0, 1.0, bottom, top);
        let _ = writeln!(s, "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"steelblue\"/>", slot * 0.7, bottom - y);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>", x + slot * 0.35, y - 4.0, r.map);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"9\">{}</text>", x + slot * 0.35, bottom + 14.0, escape(&r.name));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `<suite>_scatter.svg` and `<suite>_bars.svg` for every table.
pub fn emit_plots(tables: &[AblationTable], dir: &Path) -> Result<Vec<PathBuf>> {
    if tables.is_empty() {
        return Err(Error::Config("no reports to plot".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for t in tables {
        for (kind, svg) in [("scatter", scatter_svg(t)), ("bars", bars_svg(t))] {
            let path = dir.join(format!("{}_{kind}.svg", t.suite));
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            out.push(path);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::{AblationRow, Suite};

    fn table() -> AblationTable {
        let rows = (0..5)
            .map(|i| AblationRow {
                name: format!("row <{i}>"),
                weights: "full".into(),
                map: 0.5 + 0.1 * i as f64,
                split_map: Default::default(),
                stages_per_frame: 6.0 - i as f64,
                mean_key_interval: 1.0,
                skipped: None,
            })
            .collect();
        AblationTable { suite: Suite::T2, rows, config_digest: "abc".into() }
    }

    #[test]
    fn scatter_has_one_point_per_row() {
        let svg = scatter_svg(&table());
        assert_eq!(svg.matches("<circle").count(), 5);
        assert!(svg.contains("row &lt;3&gt;"));
    }

    #[test]
    fn x_axis_is_descending() {
        let svg = scatter_svg(&table());
        let xs: Vec<f64> = svg
            .lines()
            .filter(|l| l.starts_with("<circle"))
            .map(|l| l.split("cx=\"").nth(1).unwrap().split('"').next().unwrap().parse().unwrap())
            .collect();
        // stages/frame decrease along the rows, so points move right
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn file_names_follow_suite() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plots(&[table()], dir.path()).unwrap();
        let names: Vec<_> = files.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect();
        assert_eq!(names, vec!["t2_scatter.svg", "t2_bars.svg"]);
        assert!(emit_plots(&[], dir.path()).is_err());
    }
}
