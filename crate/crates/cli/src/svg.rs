//! Four stacked time-series panels rendered as plain SVG.

use std::fmt::Write;

use locoman::sim::{SimLog, SimRecord};

const WIDTH: f64 = 900.0;
const PANEL_H: f64 = 210.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const PLOT_H: f64 = 160.0;
const PLOT_TOP: f64 = 30.0;
/// Samples kept per series; longer logs are decimated.
const MAX_POINTS: usize = 1500;
const COLORS: [&str; 3] = ["#d62728", "#2ca02c", "#1f77b4"];

struct Series {
    label: String,
    color: &'static str,
    dashed: bool,
    values: Vec<f64>,
}

struct Panel {
    title: &'static str,
    series: Vec<Series>,
}

fn axis_series(
    recs: &[&SimRecord],
    name: &str,
    axes: [&str; 3],
    dashed: bool,
    get: impl Fn(&SimRecord) -> [f64; 3],
) -> Vec<Series> {
    (0..3)
        .map(|a| Series {
            label: format!("{name} {}", axes[a]),
            color: COLORS[a],
            dashed,
            values: recs.iter().map(|r| get(r)[a]).collect(),
        })
        .collect()
}

fn panels(recs: &[&SimRecord]) -> Vec<Panel> {
    let xyz = ["x", "y", "z"];
    let pose = ["x", "y", "phi"];
    let mut base = axis_series(recs, "learned", pose, true, |r| r.q_b_d.into());
    base.extend(axis_series(recs, "optimal", pose, false, |r| {
        r.q_b_star.into()
    }));
    base.extend(axis_series(recs, "actual", pose, false, |r| {
        r.q_b_act.into()
    }));
    for s in base.iter_mut().skip(6) {
        // actual drawn lighter to separate it from the optimal pose
        s.color = match s.color {
            "#d62728" => "#ff9896",
            "#2ca02c" => "#98df8a",
            _ => "#aec7e8",
        };
    }
    let mut pos = axis_series(recs, "desired", xyz, true, |r| r.x_d.into());
    pos.extend(axis_series(recs, "actual", xyz, false, |r| r.x_a.into()));
    let mut vel = axis_series(recs, "desired", xyz, true, |r| r.xdot_d.into());
    vel.extend(axis_series(recs, "actual", xyz, false, |r| r.xdot_a.into()));
    vec![
        Panel {
            title: "EE position, desired vs actual [m]",
            series: pos,
        },
        Panel {
            title: "EE position in the arm frame [m]",
            series: axis_series(recs, "arm", xyz, false, |r| r.ee_arm.into()),
        },
        Panel {
            title: "Base pose: learned, optimal, actual [m, rad]",
            series: base,
        },
        Panel {
            title: "EE velocity, desired vs actual [m/s]",
            series: vel,
        },
    ]
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
        (l.min(v), h.max(v))
    });
    if !lo.is_finite() || !hi.is_finite() {
        return (-1.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

pub fn render(log: &SimLog) -> String {
    let all = log.records();
    let stride = all.len().div_ceil(MAX_POINTS).max(1);
    let mut recs: Vec<&SimRecord> = all.iter().step_by(stride).collect();
    if let Some(last) = all.last() {
        if !std::ptr::eq(*recs.last().unwrap(), last) {
            recs.push(last);
        }
    }
    let times: Vec<f64> = recs.iter().map(|r| r.t).collect();
    let (t0, t1) = range(times.iter().copied());
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let ps = panels(&recs);

    let mut s = String::new();
    let height = PANEL_H * ps.len() as f64;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    for (k, p) in ps.iter().enumerate() {
        let (lo, hi) = range(p.series.iter().flat_map(|se| se.values.iter().copied()));
        let sx = |t: f64| MARGIN_L + (t - t0) / (t1 - t0) * plot_w;
        let sy = |v: f64| PLOT_TOP + (hi - v) / (hi - lo) * PLOT_H;
        let _ = writeln!(
            s,
            r#"<g class="panel" transform="translate(0,{})">"#,
            k as f64 * PANEL_H
        );
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN_L}" y="18" font-weight="bold">{}</text>"#,
            p.title
        );
        let _ = writeln!(
            s,
            r##"<rect x="{MARGIN_L}" y="{PLOT_TOP}" width="{plot_w}" height="{PLOT_H}" fill="none" stroke="#888"/>"##
        );
        let _ = writeln!(s, r#"<text x="4" y="{}">{hi:.3}</text>"#, PLOT_TOP + 10.0);
        let _ = writeln!(s, r#"<text x="4" y="{}">{lo:.3}</text>"#, PLOT_TOP + PLOT_H);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">t = {t1:.2} s</text>"#,
            WIDTH - MARGIN_R,
            PLOT_TOP + PLOT_H + 14.0
        );
        for (i, se) in p.series.iter().enumerate() {
            let pts: Vec<String> = times
                .iter()
                .zip(&se.values)
                .map(|(&t, &v)| format!("{:.2},{:.2}", sx(t), sy(v)))
                .collect();
            let dash = if se.dashed {
                r#" stroke-dasharray="5,3""#
            } else {
                ""
            };
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{}" stroke-width="1.2"{dash} points="{}"><title>{}</title></polyline>"#,
                se.color,
                pts.join(" "),
                se.label
            );
            let lx = MARGIN_L + 330.0 + (i / 3) as f64 * 150.0;
            let ly = 10.0 + (i % 3) as f64 * 9.0;
            let _ = writeln!(
                s,
                r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{}"{dash}/><text x="{}" y="{}" font-size="8">{}</text>"#,
                lx + 14.0,
                se.color,
                lx + 17.0,
                ly + 3.0,
                se.label
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
