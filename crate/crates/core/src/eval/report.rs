use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{to_megabytes, LodoRecord, RankRow, SplitRow};
use crate::finetune::Strategy;

const ZERO_DIVISION_NOTE: &str =
    "Precision, recall and F1 of a class with no predictions or no samples are 0 and count in the macro mean.";

/// Fixed-width text table.
fn render(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

fn strategies_in(records: &[LodoRecord]) -> Vec<Strategy> {
    let mut s: Vec<Strategy> = records.iter().map(|r| r.strategy).collect();
    s.sort();
    s.dedup();
    s
}

/// Recognition performance per target domain and strategy, with per-strategy
/// means.
pub fn lodo_table(records: &[LodoRecord]) -> String {
    let header = strings(&["Target", "Strategy", "Accuracy", "Macro-F1", "Precision", "Recall"]);
    let mut rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.target_domain.clone(),
                r.strategy.to_string(),
                format!("{:.4}", r.metrics.accuracy),
                format!("{:.4}", r.metrics.macro_f1),
                format!("{:.4}", r.metrics.macro_precision),
                format!("{:.4}", r.metrics.macro_recall),
            ]
        })
        .collect();
    for s in strategies_in(records) {
        let sel: Vec<&LodoRecord> = records.iter().filter(|r| r.strategy == s).collect();
        let n = sel.len() as f64;
        let mean = |f: fn(&LodoRecord) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n;
        rows.push(vec![
            "mean".into(),
            s.to_string(),
            format!("{:.4}", mean(|r| r.metrics.accuracy)),
            format!("{:.4}", mean(|r| r.metrics.macro_f1)),
            format!("{:.4}", mean(|r| r.metrics.macro_precision)),
            format!("{:.4}", mean(|r| r.metrics.macro_recall)),
        ]);
    }
    format!("{}{ZERO_DIVISION_NOTE}\n", render(&header, &rows))
}

pub fn lodo_csv(records: &[LodoRecord]) -> String {
    let rows: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            vec![
                r.fold.to_string(),
                r.target_domain.clone(),
                r.strategy.to_string(),
                format!("{}", r.metrics.accuracy),
                format!("{}", r.metrics.macro_f1),
                format!("{}", r.metrics.macro_precision),
                format!("{}", r.metrics.macro_recall),
                r.resources.trainable_params.to_string(),
                r.resources.total_params.to_string(),
                format!("{:.3}", r.log.wall_seconds),
            ]
        })
        .collect();
    csv(
        &[
            "fold",
            "target",
            "strategy",
            "accuracy",
            "macro_f1",
            "macro_precision",
            "macro_recall",
            "trainable_params",
            "total_params",
            "train_seconds",
        ],
        &rows,
    )
}

fn first_per_strategy(records: &[LodoRecord]) -> BTreeMap<Strategy, &LodoRecord> {
    let mut m = BTreeMap::new();
    for r in records {
        m.entry(r.strategy).or_insert(r);
    }
    m
}

/// Trainable and total parameters per strategy.
pub fn params_table(records: &[LodoRecord]) -> String {
    let rows: Vec<Vec<String>> = first_per_strategy(records)
        .values()
        .map(|r| {
            vec![
                r.strategy.to_string(),
                r.resources.trainable_params.to_string(),
                r.resources.total_params.to_string(),
            ]
        })
        .collect();
    render(&strings(&["Strategy", "Trainable", "Total"]), &rows)
}

/// Frozen, trainable and buffer memory per strategy.
pub fn memory_table(records: &[LodoRecord]) -> String {
    let rows: Vec<Vec<String>> = first_per_strategy(records)
        .values()
        .map(|r| {
            let m = &r.resources;
            vec![
                r.strategy.to_string(),
                format!("{:.3}", to_megabytes(m.frozen_param_bytes_f32)),
                format!("{:.3}", to_megabytes(m.frozen_param_bytes)),
                format!("{:.3}", to_megabytes(m.trainable_param_bytes_f32)),
                format!("{:.3}", to_megabytes(m.buffer_bytes_peak_f32)),
            ]
        })
        .collect();
    format!(
        "{}Dense values counted at 4 bytes except in the as-stored column (8 bytes).\n",
        render(
            &strings(&[
                "Strategy",
                "Frozen MB (4-byte)",
                "Frozen MB (stored)",
                "Trainable MB",
                "Buffer MB",
            ]),
            &rows
        )
    )
}

/// Fine-tuning wall-clock seconds per target and strategy.
pub fn time_table(records: &[LodoRecord]) -> String {
    let strategies = strategies_in(records);
    let mut targets: Vec<(usize, &str)> = records.iter().map(|r| (r.fold, r.target_domain.as_str())).collect();
    targets.dedup();
    let mut header = vec!["Target".to_string()];
    header.extend(strategies.iter().map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = targets
        .iter()
        .map(|(fold, name)| {
            let mut row = vec![name.to_string()];
            for s in &strategies {
                let cell = records
                    .iter()
                    .find(|r| r.fold == *fold && r.strategy == *s)
                    .map_or("-".to_string(), |r| format!("{:.2}", r.log.wall_seconds));
                row.push(cell);
            }
            row
        })
        .collect();
    render(&header, &rows)
}

pub fn rank_table(rows: &[RankRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.rank.to_string(),
                format!("{:.4}", r.macro_f1),
                format!("{:.2}", r.seconds),
                r.trainable.to_string(),
            ]
        })
        .collect();
    render(&strings(&["Rank", "Macro-F1", "Seconds", "Trainable"]), &body)
}

pub fn rank_csv(rows: &[RankRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.rank.to_string(),
                format!("{}", r.macro_f1),
                format!("{}", r.accuracy),
                format!("{:.3}", r.seconds),
                r.trainable.to_string(),
            ]
        })
        .collect();
    csv(&["rank", "macro_f1", "accuracy", "seconds", "trainable"], &body)
}

fn split_label(f: f64) -> String {
    let train = (f * 100.0).round() as i64;
    format!("{train}/{}", 100 - train)
}

pub fn split_table(rows: &[SplitRow]) -> String {
    let strategies: Vec<Strategy> = rows
        .first()
        .map(|r| r.accuracy.iter().map(|(s, _)| *s).collect())
        .unwrap_or_default();
    let mut header = vec!["Train/Test".to_string()];
    header.extend(strategies.iter().map(|s| s.to_string()));
    header.push("LoRA/Full".into());
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut row = vec![split_label(r.fraction)];
            row.extend(
                strategies
                    .iter()
                    .map(|s| r.accuracy_of(*s).map_or("-".into(), |a| format!("{a:.4}"))),
            );
            row.push(r.lora_full_ratio.map_or("-".into(), |v| format!("{v:.4}")));
            row
        })
        .collect();
    render(&header, &body)
}

pub fn split_csv(rows: &[SplitRow]) -> String {
    let mut body = Vec::new();
    for r in rows {
        for (s, a) in &r.accuracy {
            body.push(vec![
                format!("{}", r.fraction),
                s.to_string(),
                format!("{a}"),
                r.lora_full_ratio.map_or(String::new(), |v| format!("{v}")),
            ]);
        }
    }
    csv(&["train_fraction", "strategy", "accuracy", "lora_full_ratio"], &body)
}

/// F1 (left axis) and training seconds (right axis) against rank.
pub fn rank_plot_svg(rows: &[RankRow]) -> String {
    let (w, h, pad) = (480.0, 300.0, 50.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    if rows.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let rmin = rows.iter().map(|r| r.rank).min().unwrap_or(0) as f64;
    let rmax = rows.iter().map(|r| r.rank).max().unwrap_or(1) as f64;
    let span = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let (rmin, rmax) = span(rmin, rmax);
    let (fmin, fmax) = span(
        rows.iter().map(|r| r.macro_f1).fold(f64::INFINITY, f64::min),
        rows.iter().map(|r| r.macro_f1).fold(f64::NEG_INFINITY, f64::max),
    );
    let (smin, smax) = span(
        rows.iter().map(|r| r.seconds).fold(f64::INFINITY, f64::min),
        rows.iter().map(|r| r.seconds).fold(f64::NEG_INFINITY, f64::max),
    );
    let x = |r: f64| pad + (r - rmin) / (rmax - rmin) * (w - 2.0 * pad);
    let y = |v: f64, lo: f64, hi: f64| h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);
    let _ = writeln!(
        svg,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(svg, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    let _ = writeln!(
        svg,
        r#"<line x1="{}" y1="{pad}" x2="{}" y2="{}" stroke="black"/>"#,
        w - pad,
        w - pad,
        h - pad
    );
    let series = |vals: Vec<(f64, f64)>, color: &str| {
        let pts: Vec<String> = vals.iter().map(|(a, b)| format!("{a:.1},{b:.1}")).collect();
        let mut s = format!(
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        s.push('\n');
        for (a, b) in vals {
            let _ = writeln!(s, r#"<circle cx="{a:.1}" cy="{b:.1}" r="3" fill="{color}"/>"#);
        }
        s
    };
    svg.push_str(&series(
        rows.iter().map(|r| (x(r.rank as f64), y(r.macro_f1, fmin, fmax))).collect(),
        "#1f77b4",
    ));
    svg.push_str(&series(
        rows.iter().map(|r| (x(r.rank as f64), y(r.seconds, smin, smax))).collect(),
        "#d62728",
    ));
    for r in rows {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x(r.rank as f64),
            h - pad + 15.0,
            r.rank
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">LoRA rank</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(svg, r##"<text x="8" y="{}" fill="#1f77b4">F1 {fmin:.3}-{fmax:.3}</text>"##, pad - 20.0);
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="{}" fill="#d62728" text-anchor="end">seconds {smin:.1}-{smax:.1}</text>"##,
        w - 8.0,
        pad - 20.0
    );
    svg.push_str("</svg>\n");
    svg
}

/// Aggregated results rendered as the text tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub lodo: Vec<LodoRecord>,
    pub ranks: Vec<RankRow>,
    pub splits: Vec<SplitRow>,
}

impl Report {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        if !self.lodo.is_empty() {
            out.push_str("== Cross-domain recognition ==\n");
            out.push_str(&lodo_table(&self.lodo));
            out.push_str("\n== Parameters ==\n");
            out.push_str(&params_table(&self.lodo));
            out.push_str("\n== Memory ==\n");
            out.push_str(&memory_table(&self.lodo));
            out.push_str("\n== Training time (s) ==\n");
            out.push_str(&time_table(&self.lodo));
        }
        if !self.ranks.is_empty() {
            out.push_str("\n== LoRA rank ==\n");
            out.push_str(&rank_table(&self.ranks));
        }
        if !self.splits.is_empty() {
            out.push_str("\n== Train/test split ==\n");
            out.push_str(&split_table(&self.splits));
        }
        out
    }
}
