//! SVG line charts and the variant summary table.
//!
//! Every series is drawn as a `<polyline>` inside a `<g class="series">`
//! whose `data-x` / `data-y` attributes hold the plotted values with the
//! same formatting as the TSV log, so a chart can be checked against the
//! log it came from.

use std::fmt::Write;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::metrics::{LogRow, MetricReport};
use crate::trainer::SweepRow;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 52.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Replaces the numeric x tick labels, e.g. for a categorical η axis.
    pub x_ticks: Option<Vec<(f64, String)>>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn join(values: impl Iterator<Item = f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

impl Chart {
    pub fn to_svg(&self) -> String {
        let xs = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
        let ys = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1));
        let (x0, x1) = bounds(xs);
        let (y0, y1) = bounds(ys);
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let mut s = String::new();
        writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        )
        .unwrap();
        writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
            LEFT + pw / 2.0,
            escape(&self.title)
        )
        .unwrap();
        writeln!(
            s,
            r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        )
        .unwrap();

        let x_ticks: Vec<(f64, String)> = match &self.x_ticks {
            Some(t) => t.clone(),
            None => (0..=4)
                .map(|i| {
                    let v = x0 + (x1 - x0) * i as f64 / 4.0;
                    (v, format!("{v:.3}"))
                })
                .collect(),
        };
        for (v, label) in &x_ticks {
            let x = sx(*v);
            writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 19.0,
                escape(label)
            )
            .unwrap();
        }
        for i in 0..=4 {
            let v = y0 + (y1 - y0) * i as f64 / 4.0;
            let y = sy(v);
            writeln!(
                s,
                r#"<line x1="{}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
                LEFT - 5.0,
                LEFT - 8.0,
                y + 4.0
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            TOP + ph / 2.0,
            escape(&self.y_label)
        )
        .unwrap();

        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let points: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            writeln!(
                s,
                r#"<g class="series" data-label="{}" data-x="{}" data-y="{}">"#,
                escape(&series.label),
                join(series.points.iter().map(|p| p.0)),
                join(series.points.iter().map(|p| p.1))
            )
            .unwrap();
            writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                points.join(" ")
            )
            .unwrap();
            let ly = TOP + 12.0 + 18.0 * i as f64;
            let lx = WIDTH - RIGHT + 12.0;
            writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&series.label)
            )
            .unwrap();
            s.push_str("</g>\n");
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Reads the series back out of a chart written by [`Chart::to_svg`].
pub fn parse_svg_series(svg: &str) -> Result<Vec<Series>> {
    let attr = |tag: &str, name: &str| -> Result<String> {
        let key = format!("{name}=\"");
        let start = tag
            .find(&key)
            .ok_or_else(|| Error::Format(format!("series without {name}")))?
            + key.len();
        let len = tag[start..]
            .find('"')
            .ok_or_else(|| Error::Format(format!("unterminated {name}")))?;
        Ok(tag[start..start + len].to_string())
    };
    let numbers = |text: String| -> Result<Vec<f64>> {
        text.split_whitespace()
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad number {v:?} in chart"))))
            .collect()
    };
    svg.lines()
        .filter(|l| l.starts_with(r#"<g class="series""#))
        .map(|tag| {
            let label = attr(tag, "data-label")?
                .replace("&quot;", "\"")
                .replace("&gt;", ">")
                .replace("&lt;", "<")
                .replace("&amp;", "&");
            let xs = numbers(attr(tag, "data-x")?)?;
            let ys = numbers(attr(tag, "data-y")?)?;
            if xs.len() != ys.len() {
                return Err(Error::Format(format!("series {label:?}: {} x values, {} y values", xs.len(), ys.len())));
            }
            Ok(Series {
                label,
                points: xs.into_iter().zip(ys).collect(),
            })
        })
        .collect()
}

/// One series per variant label, in order of first appearance.
pub fn metric_series(rows: &[LogRow], pick: impl Fn(&MetricReport) -> f64) -> Vec<Series> {
    let mut by_label: IndexMap<&str, Vec<(f64, f64)>> = IndexMap::new();
    for r in rows {
        by_label
            .entry(&r.variant)
            .or_default()
            .push((r.epoch as f64, pick(&r.report)));
    }
    by_label
        .into_iter()
        .map(|(label, points)| Series {
            label: label.to_string(),
            points,
        })
        .collect()
}

pub fn entropy_chart(rows: &[LogRow]) -> Chart {
    Chart {
        title: "Attention entropy".into(),
        x_label: "epoch".into(),
        y_label: "entropy (nats)".into(),
        series: metric_series(rows, |m| m.entropy),
        x_ticks: None,
    }
}

pub fn rc_chart(rows: &[LogRow]) -> Chart {
    Chart {
        title: "Rank correlation with reference attention".into(),
        x_label: "epoch".into(),
        y_label: "RC".into(),
        series: metric_series(rows, |m| m.rank_correlation),
        x_ticks: None,
    }
}

/// RC against η, one evenly spaced category per distinct η in ascending order.
pub fn eta_chart(rows: &[SweepRow]) -> Chart {
    let mut etas: Vec<f64> = rows.iter().map(|r| r.eta).collect();
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    let slot = |eta: f64| etas.iter().position(|&e| e == eta).unwrap_or(0) as f64;
    let mut points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (slot(r.eta), r.metrics.rank_correlation))
        .collect();
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    Chart {
        title: "Rank correlation against η".into(),
        x_label: "η".into(),
        y_label: "RC".into(),
        series: vec![Series {
            label: "rc".into(),
            points,
        }],
        x_ticks: Some(etas.iter().enumerate().map(|(i, e)| (i as f64, e.to_string())).collect()),
    }
}

/// Trailing moving average: entry `i` averages `values[i+1-w ..= i]`,
/// with a shorter window near the start.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let part = &values[lo..=i];
            part.iter().sum::<f64>() / part.len() as f64
        })
        .collect()
}

/// Averages rows sharing a `(variant, epoch)` across runs, keeping the order
/// in which each pair first appears.
pub fn mean_log(runs: &[Vec<LogRow>]) -> Vec<LogRow> {
    let mut acc: IndexMap<(String, usize), (usize, MetricReport)> = IndexMap::new();
    for r in runs.iter().flatten() {
        let (n, m) = acc.entry((r.variant.clone(), r.epoch)).or_default();
        *n += 1;
        m.rank_correlation += r.report.rank_correlation;
        m.emd += r.report.emd;
        m.entropy += r.report.entropy;
        m.overlap += r.report.overlap;
        m.accuracy += r.report.accuracy;
    }
    acc.into_iter()
        .map(|((variant, epoch), (n, m))| {
            let k = n as f64;
            LogRow {
                epoch,
                variant,
                report: MetricReport {
                    rank_correlation: m.rank_correlation / k,
                    emd: m.emd / k,
                    entropy: m.entropy / k,
                    overlap: m.overlap / k,
                    accuracy: m.accuracy / k,
                },
            }
        })
        .collect()
}

/// Row order of the summary table.
pub const TABLE_ORDER: [&str; 6] = ["baseline", "mse", "mmd", "coral", "aan", "paan"];

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub label: String,
    /// Runs averaged into this row.
    pub runs: usize,
    pub metrics: MetricReport,
}

/// Averages the final-epoch metrics of every run sharing a label.
///
/// Each element of `runs` is the log of one run. Rows follow
/// [`TABLE_ORDER`], then the remaining labels alphabetically.
pub fn summary_rows(runs: &[Vec<LogRow>]) -> Vec<TableRow> {
    let mut acc: IndexMap<String, (usize, MetricReport)> = IndexMap::new();
    for log in runs {
        let mut last: IndexMap<&str, &LogRow> = IndexMap::new();
        for r in log {
            match last.get(r.variant.as_str()) {
                Some(prev) if prev.epoch > r.epoch => {}
                _ => {
                    last.insert(&r.variant, r);
                }
            }
        }
        for (label, r) in last {
            let e = acc.entry(label.to_string()).or_default();
            e.0 += 1;
            let m = &mut e.1;
            m.rank_correlation += r.report.rank_correlation;
            m.emd += r.report.emd;
            m.entropy += r.report.entropy;
            m.overlap += r.report.overlap;
            m.accuracy += r.report.accuracy;
        }
    }
    let rank = |label: &str| {
        TABLE_ORDER
            .iter()
            .position(|&l| l == label)
            .unwrap_or(TABLE_ORDER.len())
    };
    let mut rows: Vec<TableRow> = acc
        .into_iter()
        .map(|(label, (n, m))| {
            let k = n as f64;
            TableRow {
                label,
                runs: n,
                metrics: MetricReport {
                    rank_correlation: m.rank_correlation / k,
                    emd: m.emd / k,
                    entropy: m.entropy / k,
                    overlap: m.overlap / k,
                    accuracy: m.accuracy / k,
                },
            }
        })
        .collect();
    rows.sort_by(|a, b| rank(&a.label).cmp(&rank(&b.label)).then_with(|| a.label.cmp(&b.label)));
    rows
}

/// Fixed-width text table: variant, RC↑, EMD↓, accuracy, runs.
pub fn format_summary(rows: &[TableRow]) -> String {
    let mut s = format!("{:<22} {:>8} {:>8} {:>8} {:>5}\n", "variant", "RC(↑)", "EMD(↓)", "acc", "runs");
    for r in rows {
        writeln!(
            s,
            "{:<22} {:>8.4} {:>8.4} {:>8.4} {:>5}",
            r.label, r.metrics.rank_correlation, r.metrics.emd, r.metrics.accuracy, r.runs
        )
        .unwrap();
    }
    s
}

pub const SWEEP_HEADER: &str = "eta\trc\temd\tentropy\toverlap\taccuracy";

pub fn format_sweep_tsv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let m = &r.metrics;
        writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.eta, m.rank_correlation, m.emd, m.entropy, m.overlap, m.accuracy
        )
        .unwrap();
    }
    s
}

pub fn parse_sweep_tsv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim_end) != Some(SWEEP_HEADER) {
        return Err(Error::Format(format!("expected sweep header {SWEEP_HEADER:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<f64> = line
                .trim_end()
                .split('\t')
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("sweep row {}: {e}", i + 1)))?;
            if f.len() != 6 {
                return Err(Error::Format(format!("sweep row {}: {} fields, expected 6", i + 1, f.len())));
            }
            Ok(SweepRow {
                eta: f[0],
                metrics: MetricReport {
                    rank_correlation: f[1],
                    emd: f[2],
                    entropy: f[3],
                    overlap: f[4],
                    accuracy: f[5],
                },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, variant: &str, rc: f64, entropy: f64) -> LogRow {
        LogRow {
            epoch,
            variant: variant.into(),
            report: MetricReport {
                rank_correlation: rc,
                emd: 1.0 - rc,
                entropy,
                overlap: 0.1,
                accuracy: 0.5,
            },
        }
    }

    #[test]
    fn mean_log_averages_matching_epochs() {
        let a = vec![row(0, "paan", 0.1, 3.0), row(1, "paan", 0.3, 2.0)];
        let b = vec![row(0, "paan", 0.3, 4.0), row(1, "paan", 0.5, 1.0)];
        let mean = mean_log(&[a.clone(), b]);
        assert_eq!(mean.len(), 2);
        assert!((mean[0].report.rank_correlation - 0.2).abs() < 1e-15);
        assert_eq!(mean[1].report.entropy, 1.5);
        assert_eq!(mean_log(&[a.clone()]), a);
    }

    #[test]
    fn chart_series_read_back_exactly() {
        let rows = vec![
            row(0, "paan", 0.1, 3.8918202981106265),
            row(1, "paan", 0.2, 3.1),
            row(0, "baseline", 0.05, 3.0000000000000004),
            row(1, "baseline", -0.1, 2.7),
        ];
        let svg = entropy_chart(&rows).to_svg();
        let back = parse_svg_series(&svg).unwrap();
        assert_eq!(back, metric_series(&rows, |m| m.entropy));
        assert_eq!(back[0].points[0].1, 3.8918202981106265);
    }

    #[test]
    fn labels_are_escaped() {
        let chart = Chart {
            title: "a < b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                label: "p&q \"r\"".into(),
                points: vec![(0.0, 1.0)],
            }],
            x_ticks: None,
        };
        let svg = chart.to_svg();
        assert!(svg.contains("a &lt; b"));
        assert_eq!(parse_svg_series(&svg).unwrap()[0].label, "p&q \"r\"");
    }

    #[test]
    fn moving_average_uses_a_trailing_window() {
        let m = moving_average(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3);
        assert_eq!(m, vec![1.0, 1.5, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(moving_average(&[], 5), Vec::<f64>::new());
    }

    #[test]
    fn summary_averages_final_epochs_in_table_order() {
        let a = vec![row(0, "paan", 0.0, 3.0), row(2, "paan", 0.4, 2.0), row(2, "baseline", 0.1, 3.0)];
        let b = vec![row(2, "paan", 0.2, 2.0), row(2, "paan_random0.07", -0.1, 3.0)];
        let rows = summary_rows(&[a, b]);
        let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["baseline", "paan", "paan_random0.07"]);
        assert_eq!(rows[1].runs, 2);
        assert!((rows[1].metrics.rank_correlation - 0.3).abs() < 1e-15);
        assert!(format_summary(&rows).lines().count() == 4);
    }

    #[test]
    fn sweep_tsv_round_trips() {
        let rows = vec![
            SweepRow {
                eta: 0.0,
                metrics: MetricReport::default(),
            },
            SweepRow {
                eta: 0.01,
                metrics: MetricReport {
                    rank_correlation: 0.123456789,
                    emd: 2.0,
                    entropy: 3.0,
                    overlap: 0.25,
                    accuracy: 0.75,
                },
            },
        ];
        assert_eq!(parse_sweep_tsv(&format_sweep_tsv(&rows)).unwrap(), rows);
        assert!(parse_sweep_tsv("eta\trc\n").is_err());
        let chart = eta_chart(&rows);
        assert_eq!(chart.x_ticks.unwrap()[1].1, "0.01");
    }
}
