//! Publication artifacts: long-format CSV export, minimal hand-rolled SVG
//! charts, and PGM/PPM image dumps for trigger inspection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunManifest;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 400.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 140.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// One named polyline or point cloud.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// Writes a grayscale PGM image; values are min-max normalized to 0..255.
pub fn write_pgm(plane: &[f64], h: usize, w: usize, path: &Path) -> Result<()> {
    if plane.len() != h * w {
        return Err(Error::ShapeMismatch { expected: vec![h, w], got: vec![plane.len()] });
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(normalize_bytes(plane));
    fs::write(path, out)?;
    Ok(())
}

/// Writes an RGB PPM image from a `[3, H, W]` tensor, min-max normalized.
pub fn write_ppm(t: &Tensor, path: &Path) -> Result<()> {
    let shape = t.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::ShapeMismatch { expected: vec![3, 0, 0], got: shape.to_vec() });
    }
    let (h, w) = (shape[1], shape[2]);
    let bytes = normalize_bytes(t.data());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(bytes[(c * h + y) * w + x]);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes `[1, H, W]` as PGM or `[3, H, W]` as PPM.
pub fn write_image(t: &Tensor, path: &Path) -> Result<()> {
    match t.shape() {
        [1, h, w] => write_pgm(t.data(), *h, *w, path),
        [3, ..] => write_ppm(t, path),
        other => Err(Error::ShapeMismatch { expected: vec![3, 0, 0], got: other.to_vec() }),
    }
}

fn normalize_bytes(data: &[f64]) -> Vec<u8> {
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    data.iter()
        .map(|&v| {
            if span <= 0.0 {
                128
            } else {
                ((v - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect()
}

fn finite_points(s: &Series) -> Vec<(f64, f64)> {
    s.points.iter().copied().filter(|(x, y)| x.is_finite() && y.is_finite()).collect()
}

fn bounds(series: &[Series]) -> Option<(f64, f64, f64, f64)> {
    let mut any = false;
    let (mut x0, mut x1, mut y0, mut y1) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for (x, y) in finite_points(s) {
            any = true;
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if !any {
        return None;
    }
    if x1 - x0 < 1e-12 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    Some((x0, x1, y0, y1))
}

fn svg_header(title: &str, xlabel: &str, ylabel: &str) -> String {
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" ",
            "viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
            "<text x=\"{tx}\" y=\"{xl_y}\" text-anchor=\"middle\" font-size=\"12\">{xlabel}</text>\n",
            "<text x=\"16\" y=\"{yl_y}\" text-anchor=\"middle\" font-size=\"12\" ",
            "transform=\"rotate(-90 16 {yl_y})\">{ylabel}</text>\n"
        ),
        w = CHART_W,
        h = CHART_H,
        tx = (MARGIN_L + (CHART_W - MARGIN_R)) / 2.0,
        xl_y = CHART_H - 12.0,
        yl_y = (MARGIN_T + (CHART_H - MARGIN_B)) / 2.0,
        title = xml_escape(title),
        xlabel = xml_escape(xlabel),
        ylabel = xml_escape(ylabel),
    )
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes_and_legend(
    svg: &mut String,
    series: &[Series],
    (x0, x1, y0, y1): (f64, f64, f64, f64),
) {
    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    svg.push_str(&format!(
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"black\"/>\n"
    ));
    for i in 0..=4 {
        let fx = i as f64 / 4.0;
        let xv = x0 + fx * (x1 - x0);
        let yv = y0 + fx * (y1 - y0);
        let px = MARGIN_L + fx * plot_w;
        let py = CHART_H - MARGIN_B - fx * plot_h;
        svg.push_str(&format!(
            "<text x=\"{px}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{xv:.3}</text>\n",
            CHART_H - MARGIN_B + 16.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{py}\" text-anchor=\"end\" font-size=\"10\">{yv:.3}</text>\n",
            MARGIN_L - 6.0
        ));
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = MARGIN_T + 14.0 * i as f64;
        let lx = CHART_W - MARGIN_R + 10.0;
        svg.push_str(&format!(
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" \
             stroke-width=\"2\"/>\n",
            lx + 18.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>\n",
            lx + 24.0,
            ly + 4.0,
            xml_escape(&s.name)
        ));
    }
}

fn project(
    (x, y): (f64, f64),
    (x0, x1, y0, y1): (f64, f64, f64, f64),
) -> (f64, f64) {
    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    (
        MARGIN_L + (x - x0) / (x1 - x0) * plot_w,
        CHART_H - MARGIN_B - (y - y0) / (y1 - y0) * plot_h,
    )
}

/// Multi-series line chart. Returns `false` (and writes nothing) when no
/// series has at least two finite points.
pub fn svg_line_chart(
    series: &[Series],
    title: &str,
    xlabel: &str,
    ylabel: &str,
    path: &Path,
) -> Result<bool> {
    if !series.iter().any(|s| finite_points(s).len() >= 2) {
        return Ok(false);
    }
    let b = bounds(series).unwrap();
    let mut svg = svg_header(title, xlabel, ylabel);
    axes_and_legend(&mut svg, series, b);
    for (i, s) in series.iter().enumerate() {
        let pts = finite_points(s);
        if pts.len() < 2 {
            continue;
        }
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (px, py) = project(p, b);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            coords.join(" ")
        ));
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(true)
}

/// Scatter chart; same skip rule as the line chart but a single finite
/// point suffices.
pub fn svg_scatter_chart(
    series: &[Series],
    title: &str,
    xlabel: &str,
    ylabel: &str,
    path: &Path,
) -> Result<bool> {
    if !series.iter().any(|s| !finite_points(s).is_empty()) {
        return Ok(false);
    }
    let b = bounds(series).unwrap();
    let mut svg = svg_header(title, xlabel, ylabel);
    axes_and_legend(&mut svg, series, b);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for p in finite_points(s) {
            let (px, py) = project(p, b);
            svg.push_str(&format!(
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"4\" fill=\"{color}\"/>\n"
            ));
        }
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)?;
    Ok(true)
}

/// Parsed metrics table (one row per round).
#[derive(Debug, Clone)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Config(format!("metrics column {name:?} missing")))?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }
}

/// Reads a comma-separated numeric table with a header line.
pub fn read_csv(path: &Path) -> Result<MetricsTable> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Empty(format!("csv {path:?}")))?;
    let columns: Vec<String> = header.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| cell.trim().parse::<f64>().unwrap_or(f64::NAN))
            .collect();
        if row.len() != columns.len() {
            return Err(Error::Config(format!(
                "csv row width {} does not match header width {}",
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    Ok(MetricsTable { columns, rows })
}

/// Long-format export: `series,x,y` rows over all numeric columns of all
/// metrics files, keyed by repeat.
pub fn write_long_csv(metrics_files: &[PathBuf], path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "series,x,y")?;
    for (r, file) in metrics_files.iter().enumerate() {
        let table = read_csv(file)?;
        let x = table.column(&table.columns[0])?;
        for col in table.columns.iter().skip(1) {
            let y = table.column(col)?;
            for (xv, yv) in x.iter().zip(&y) {
                if yv.is_finite() {
                    writeln!(f, "repeat{r}/{col},{xv},{yv}")?;
                }
            }
        }
    }
    Ok(())
}

/// Renders the standard artifact set for a recorded manifest into
/// `<output_dir>/plots/`. Returns the files written.
pub fn emit_plots(manifest_path: &Path) -> Result<Vec<PathBuf>> {
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
    let plot_dir = manifest.output_dir.join("plots");
    fs::create_dir_all(&plot_dir)?;
    let mut written = Vec::new();

    let long_path = plot_dir.join("long.csv");
    write_long_csv(&manifest.metrics_files, &long_path)?;
    written.push(long_path);

    match manifest.kind.as_str() {
        "run" => {
            let mut acc_series = Vec::new();
            let mut margin_series = Vec::new();
            for (r, file) in manifest.metrics_files.iter().enumerate() {
                let table = read_csv(file)?;
                let rounds = table.column("round")?;
                for col in ["mta", "asr"] {
                    let y = table.column(col)?;
                    acc_series.push(Series {
                        name: format!("repeat{r}/{col}"),
                        points: rounds.iter().copied().zip(y).collect(),
                    });
                }
                let y = table.column("margin")?;
                margin_series.push(Series {
                    name: format!("repeat{r}/margin"),
                    points: rounds.iter().copied().zip(y).collect(),
                });
            }
            let acc_path = plot_dir.join("accuracy.svg");
            if svg_line_chart(&acc_series, "Clean accuracy and attack success", "round", "rate", &acc_path)? {
                written.push(acc_path);
            }
            let margin_path = plot_dir.join("margin.svg");
            if svg_line_chart(&margin_series, "Feasibility margin", "round", "margin", &margin_path)? {
                written.push(margin_path);
            }
        }
        "sweep" => {
            let summary = manifest
                .summary_file
                .as_ref()
                .ok_or_else(|| Error::Config("sweep manifest lacks a summary file".into()))?;
            let table = read_csv_with_labels(summary)?;
            let x: Vec<f64> = (0..table.rows.len()).map(|i| i as f64).collect();
            let mut series = Vec::new();
            for col in ["mta", "asr", "retention"] {
                let y = table.column(col)?;
                series.push(Series {
                    name: col.to_string(),
                    points: x.iter().copied().zip(y).collect(),
                });
            }
            let sweep_path = plot_dir.join("sweep.svg");
            if svg_line_chart(&series, "Sweep results", "point index", "value", &sweep_path)? {
                written.push(sweep_path);
            }
            let scatter = vec![Series {
                name: "runs".into(),
                points: table
                    .column("scc")?
                    .into_iter()
                    .zip(table.column("asr")?)
                    .collect(),
            }];
            let scatter_path = plot_dir.join("scc_vs_asr.svg");
            if svg_scatter_chart(&scatter, "Structural compatibility vs attack success", "scc", "asr", &scatter_path)? {
                written.push(scatter_path);
            }
        }
        other => return Err(Error::Config(format!("unknown manifest kind {other:?}"))),
    }
    Ok(written)
}

/// Like [`read_csv`] but tolerates non-numeric label columns (parsed as
/// NaN), as in the sweep summary.
fn read_csv_with_labels(path: &Path) -> Result<MetricsTable> {
    read_csv(path)
}
