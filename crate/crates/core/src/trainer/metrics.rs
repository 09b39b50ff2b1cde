use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-update training metrics; the cumulative fields never decrease.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    /// 1-based update counter.
    pub update: u64,
    /// 1-based epoch the update belongs to.
    pub epoch: u64,
    pub train_loss: f64,
    /// Test-set error, present on the last update of each epoch.
    pub test_error: Option<f64>,
    /// Cumulative modelled time.
    pub sim_seconds: f64,
    /// Cumulative measured time; zero unless wall-clock timing was requested.
    pub wall_seconds: f64,
    /// Cumulative fabric traffic.
    pub ledger_bytes: u64,
}

pub const CSV_HEADER: [&str; 7] = [
    "update",
    "epoch",
    "train_loss",
    "test_error",
    "sim_seconds",
    "wall_seconds",
    "ledger_bytes",
];

/// Write records as CSV with a header row. Floats use the shortest
/// representation that round-trips, so identical runs give identical bytes.
pub fn write_csv(records: &[MetricsRecord], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for r in records {
        out.write_record([
            r.update.to_string(),
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.test_error.map(|e| e.to_string()).unwrap_or_default(),
            r.sim_seconds.to_string(),
            r.wall_seconds.to_string(),
            r.ledger_bytes.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn emit_csv(records: &[MetricsRecord], path: impl AsRef<Path>) -> Result<()> {
    write_csv(records, std::fs::File::create(path)?)
}

/// Parse CSV produced by [`write_csv`].
pub fn read_csv(r: impl std::io::Read) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_reader(r);
    if rdr.headers()?.iter().ne(CSV_HEADER) {
        return Err(Error::Format("metrics CSV header does not match".into()));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec?;
            let f = |i: usize| rec.get(i).unwrap_or("");
            let bad = |i: usize| Error::Format(format!("bad {} value {:?}", CSV_HEADER[i], f(i)));
            let num = |i: usize| f(i).parse::<f64>().map_err(|_| bad(i));
            let int = |i: usize| f(i).parse::<u64>().map_err(|_| bad(i));
            Ok(MetricsRecord {
                update: int(0)?,
                epoch: int(1)?,
                train_loss: num(2)?,
                test_error: if f(3).is_empty() { None } else { Some(num(3)?) },
                sim_seconds: num(4)?,
                wall_seconds: num(5)?,
                ledger_bytes: int(6)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XAxis {
    Updates,
    SimTime,
    WallTime,
}

impl XAxis {
    fn value(self, r: &MetricsRecord) -> f64 {
        match self {
            XAxis::Updates => r.update as f64,
            XAxis::SimTime => r.sim_seconds,
            XAxis::WallTime => r.wall_seconds,
        }
    }

    fn label(self) -> &'static str {
        match self {
            XAxis::Updates => "weight updates",
            XAxis::SimTime => "simulated time (s)",
            XAxis::WallTime => "wall-clock time (s)",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            XAxis::Updates => "updates",
            XAxis::SimTime => "sim_time",
            XAxis::WallTime => "wall_time",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum YAxis {
    TrainLoss,
    TestError,
}

impl YAxis {
    fn value(self, r: &MetricsRecord) -> Option<f64> {
        match self {
            YAxis::TrainLoss => Some(r.train_loss),
            YAxis::TestError => r.test_error,
        }
    }

    fn label(self) -> &'static str {
        match self {
            YAxis::TrainLoss => "training loss",
            YAxis::TestError => "test error rate",
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            YAxis::TrainLoss => "loss",
            YAxis::TestError => "test_error",
        }
    }
}

/// One labelled curve of a chart.
#[derive(Debug, Clone, Copy)]
pub struct Series<'a> {
    pub label: &'a str,
    pub records: &'a [MetricsRecord],
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Self-contained SVG line chart with one polyline per series.
pub fn render_svg(series: &[Series<'_>], x: XAxis, y: YAxis) -> String {
    let points: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            s.records
                .iter()
                .filter_map(|r| y.value(r).map(|v| (x.value(r), v)))
                .collect()
        })
        .collect();
    let all = points.iter().flatten();
    let x_max = all.clone().map(|p| p.0).fold(0.0, f64::max);
    let y_max = all.map(|p| p.1).fold(0.0, f64::max);
    let x_max = if x_max > 0.0 { x_max } else { 1.0 };
    let y_max = if y_max > 0.0 { y_max } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |v: f64| LEFT + plot_w * v / x_max;
    let py = |v: f64| TOP + plot_h * (1.0 - v / y_max);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for k in 0..=TICKS {
        let f = k as f64 / TICKS as f64;
        let (xv, yv) = (f * x_max, f * y_max);
        let _ = writeln!(
            svg,
            r#"<line x1="{0:.2}" y1="{1:.2}" x2="{0:.2}" y2="{2:.2}" stroke="black"/><text x="{0:.2}" y="{3:.2}" text-anchor="middle">{4}</text>"#,
            px(xv),
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{0:.2}" y1="{1:.2}" x2="{2:.2}" y2="{1:.2}" stroke="black"/><text x="{3:.2}" y="{4:.2}" text-anchor="end">{5}</text>"#,
            LEFT - 5.0,
            py(yv),
            LEFT,
            LEFT - 8.0,
            py(yv) + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0,
        x.label()
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{:.2}" text-anchor="middle" transform="rotate(-90 15 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        y.label()
    );
    for (i, (s, pts)) in series.iter().zip(&points).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(a, b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = TOP + 15.0 + 18.0 * i as f64;
        let lx = WIDTH - RIGHT + 15.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 25.0,
            ly + 4.0,
            escape(s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn tick_label(v: f64) -> String {
    if v == 0.0 || (1e-2..1e4).contains(&v.abs()) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

pub fn emit_svg(series: &[Series<'_>], x: XAxis, y: YAxis, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, render_svg(series, x, y))?;
    Ok(())
}
