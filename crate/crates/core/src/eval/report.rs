//! Metric tables, score dumps and static SVG plots.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::stats::{auc, bootstrap_env, decidability, ks_statistic, DecisionEnvironment};
use crate::error::{Error, Result};

/// One `metric,protocol,mean,sd` row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub protocol: String,
    pub mean: f64,
    pub sd: f64,
}

/// d′, AUC (bootstrapped over 50 resamples of 90 %) and the KS statistic
/// and p-value between genuine and impostor scores.
pub fn environment_rows(protocol: &str, env: &DecisionEnvironment, seed: u64) -> Result<Vec<MetricRow>> {
    let row = |metric: &str, (mean, sd): (f64, f64)| MetricRow {
        metric: metric.into(),
        protocol: protocol.into(),
        mean,
        sd,
    };
    let (d, p) = ks_statistic(&env.genuine, &env.impostor)?;
    Ok(vec![
        row("d_prime", bootstrap_env(env, 0.9, 50, seed, decidability)?),
        row("auc", bootstrap_env(env, 0.9, 50, seed, auc)?),
        row("ks_d", (d, 0.0)),
        row("ks_p", (p, 0.0)),
    ])
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("metric,protocol,mean,sd\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.metric, r.protocol, r.mean, r.sd).expect("writing to a string");
    }
    out
}

/// One score per line.
pub fn scores_text(scores: &[f64]) -> String {
    scores.iter().map(|s| format!("{s}\n")).collect()
}

/// Writes `text`, creating parent directories.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .expect("writing to a string");
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).expect("writing to a string");
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title))
        .expect("writing to a string");
    writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD / 2.0
    )
    .expect("writing to a string");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

/// Overlaid genuine (green) and impostor (red) score histograms, each
/// normalised to unit mass.
pub fn histogram_svg(title: &str, env: &DecisionEnvironment, bins: usize) -> String {
    let bins = bins.max(1);
    let (lo, hi) = range(env.genuine.iter().chain(&env.impostor).copied());
    let count = |v: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in v {
            let b = (((x - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
            h[b] += 1.0 / v.len().max(1) as f64;
        }
        h
    };
    let (g, i) = (count(&env.genuine), count(&env.impostor));
    let top = g.iter().chain(&i).fold(0.0f64, |a, &b| a.max(b)).max(1e-9);
    let bw = (W - 1.5 * PAD) / bins as f64;
    let mut s = svg_open(title);
    for (hist, colour) in [(&i, "#d62728"), (&g, "#2ca02c")] {
        for (k, &v) in hist.iter().enumerate() {
            let h = v / top * (H - 2.0 * PAD);
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{colour}" fill-opacity="0.5"/>"#,
                PAD + k as f64 * bw,
                H - PAD - h,
                bw,
                h
            )
            .expect("writing to a string");
        }
    }
    writeln!(s, r#"<text x="{PAD}" y="{}">{lo:.3}</text>"#, H - PAD + 15.0).expect("writing to a string");
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{hi:.3}</text>"#, W - PAD / 2.0, H - PAD + 15.0)
        .expect("writing to a string");
    s.push_str("</svg>\n");
    s
}

/// Scatter of paired values, e.g. detector confidence before and after
/// de-identification.
pub fn scatter_svg(title: &str, points: &[(f64, f64)]) -> String {
    let (xl, xh) = range(points.iter().map(|p| p.0));
    let (yl, yh) = range(points.iter().map(|p| p.1));
    let mut s = svg_open(title);
    for &(x, y) in points {
        let px = PAD + (x - xl) / (xh - xl) * (W - 1.5 * PAD);
        let py = H - PAD - (y - yl) / (yh - yl) * (H - 2.0 * PAD);
        writeln!(s, r##"<circle cx="{px:.2}" cy="{py:.2}" r="2" fill="#1f77b4"/>"##).expect("writing to a string");
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env() -> DecisionEnvironment {
        DecisionEnvironment::new((0..20).map(|i| 0.5 + i as f64 / 40.0).collect(), (0..50).map(|i| i as f64 / 100.0).collect())
    }

    #[test]
    fn report_has_required_metrics() {
        let rows = environment_rows("xx", &env(), 1).unwrap();
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with("metric,protocol,mean,sd\n"));
        for m in ["d_prime,xx,", "auc,xx,", "ks_d,xx,", "ks_p,xx,"] {
            assert!(csv.contains(m), "{m} missing");
        }
    }

    #[test]
    fn svgs_are_well_formed() {
        let h = histogram_svg("a<b", &env(), 20);
        assert!(h.starts_with("<svg") && h.trim_end().ends_with("</svg>"));
        assert!(h.contains("a&lt;b"));
        assert_eq!(h.matches("<rect").count(), 41);
        let s = scatter_svg("s", &[(0.0, 1.0), (1.0, 0.0)]);
        assert_eq!(s.matches("<circle").count(), 2);
        assert!(scatter_svg("empty", &[]).ends_with("</svg>\n"));
    }

    #[test]
    fn score_dump_is_one_per_line() {
        assert_eq!(scores_text(&[1.0, 0.5]), "1\n0.5\n");
    }
}
