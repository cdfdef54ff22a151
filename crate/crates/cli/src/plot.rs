//! SVG line plots of trace CSV files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Result;
use locodl::harness::CSV_HEADER;
use locodl::Error;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// One polyline: `(algorithm, compressor)` at the lowest seed present.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub seed: u64,
    pub points: Vec<(f64, f64)>,
}

pub fn load_series(paths: &[PathBuf], x: &str, y: &str) -> Result<Vec<Series>, Error> {
    let col = |name: &str| {
        CSV_HEADER
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Input(format!("unknown column `{name}`")))
    };
    let (xi, yi) = (col(x)?, col(y)?);
    let (ai, ci, si) = (col("algorithm")?, col("compressor")?, col("seed")?);
    let mut series: BTreeMap<String, Series> = BTreeMap::new();
    for path in paths {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        let header = reader.headers()?.clone();
        if header.iter().ne(CSV_HEADER.iter().copied()) {
            return Err(Error::Input(format!("{} does not have the trace CSV header", path.display())));
        }
        for record in reader.records() {
            let record = record?;
            let num = |i: usize| -> Result<f64, Error> {
                record[i].parse().map_err(|_| {
                    Error::Input(format!("{}: non-numeric `{}` in column {}", path.display(), &record[i], CSV_HEADER[i]))
                })
            };
            let seed: u64 = record[si]
                .parse()
                .map_err(|_| Error::Input(format!("{}: bad seed `{}`", path.display(), &record[si])))?;
            let label = format!("{} {}", &record[ai], &record[ci]);
            let point = (num(xi)?, num(yi)?);
            let entry = series.entry(label.clone()).or_insert_with(|| Series { label, seed, points: Vec::new() });
            if seed < entry.seed {
                entry.seed = seed;
                entry.points.clear();
            }
            if seed == entry.seed {
                entry.points.push(point);
            }
        }
    }
    Ok(series.into_values().collect())
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders the series with a linear x axis and a log10 y axis with one tick
/// per decade. Points with non-positive or non-finite y are dropped.
pub fn render_svg(series: &[Series], x_label: &str, y_label: &str) -> Result<String, Error> {
    let usable: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite() && *y > 0.0)
                .map(|&(x, y)| (x, y.log10()))
                .collect()
        })
        .collect();
    let all = usable.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(Error::Input(format!("no positive `{y_label}` values to plot on a log scale")));
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let (d0, mut d1) = (y0.floor(), y1.ceil());
    if d1 <= d0 {
        d1 = d0 + 1.0;
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (d1 - y) / (d1 - d0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for e in (d0 as i32)..=(d1 as i32) {
        let y = py(e as f64);
        let _ = writeln!(
            s,
            r##"<line class="ytick" x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{e}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0
        );
    }
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text class="xtick" x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            px(x),
            TOP + ph + 18.0,
            fmt_tick(x)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{} (log scale)</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(y_label)
    );
    for (i, (ser, pts)) in series.iter().zip(&usable).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = TOP + 10.0 + 20.0 * i as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{} (seed {})</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            esc(&ser.label),
            ser.seed
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn fmt_tick(x: f64) -> String {
    if x != 0.0 && (x.abs() >= 1e5 || x.abs() < 1e-2) {
        format!("{x:.1e}")
    } else if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.2}")
    }
}

pub fn cmd_plot(csvs: &[PathBuf], x: &str, y: &str, out: &Path) -> Result<()> {
    if csvs.is_empty() {
        return Err(Error::Input("no CSV files given".into()).into());
    }
    let series = load_series(csvs, x, y)?;
    let svg = render_svg(&series, x, y)?;
    crate::output::write_atomic(out, svg.as_bytes())?;
    println!("wrote {} ({} series)", out.display(), series.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decade_ticks_cover_the_range() {
        let s = Series { label: "a b".into(), seed: 0, points: vec![(0.0, 1.0), (10.0, 1e-3), (20.0, -1.0)] };
        let svg = render_svg(&[s], "t", "y").unwrap();
        assert_eq!(svg.matches(r#"class="ytick""#).count(), 4);
        assert!(svg.contains(">1e-3<") && svg.contains(">1e0<"));
        assert_eq!(svg.matches("<polyline").count(), 1);
    }

    #[test]
    fn all_nonpositive_is_an_input_error() {
        let s = Series { label: "a".into(), seed: 0, points: vec![(0.0, 0.0)] };
        assert!(matches!(render_svg(&[s], "t", "y"), Err(Error::Input(_))));
    }
}
