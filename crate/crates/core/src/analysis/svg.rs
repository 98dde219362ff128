use std::fmt::Write;

use super::{AggregateTable, Histogram};

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD / 2.0,
        H - PAD
    );
    let _ = writeln!(out, "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>", PAD / 2.0, H - PAD);
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 10.0, escape(x_label));
    let _ = writeln!(
        out,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

/// Win-rate against dataset size, one line with error bars per strategy.
pub fn winrate_svg(table: &AggregateTable) -> String {
    let mut out = header("Win-rate vs acquired dataset size");
    axes(&mut out, "dataset size", "win-rate");
    let waypoints = table.waypoints();
    let max_x = waypoints.iter().copied().max().unwrap_or(1).max(1) as f64;
    let (lo, hi) = table
        .cells
        .iter()
        .filter(|c| c.mean.is_finite())
        .fold((0.4f64, 0.6f64), |(lo, hi), c| {
            let se = c.stderr.unwrap_or(0.0);
            (lo.min(c.mean - se), hi.max(c.mean + se))
        });
    let x = |v: f64| PAD + (W - 1.5 * PAD) * v / max_x;
    let y = |v: f64| H - PAD - (H - 1.5 * PAD) * (v - lo) / (hi - lo).max(1e-9);
    for t in 0..=4 {
        let v = lo + (hi - lo) * t as f64 / 4.0;
        let _ = writeln!(out, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.2}</text>", PAD - 4.0, y(v) + 4.0);
    }
    for w in &waypoints {
        let _ = writeln!(out, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{w}</text>", x(*w as f64), H - PAD + 14.0);
    }
    for (k, s) in table.strategies().iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<_> = table
            .cells
            .iter()
            .filter(|c| &c.strategy == s && c.mean.is_finite())
            .collect();
        let line: Vec<String> = pts
            .iter()
            .map(|c| format!("{:.1},{:.1}", x(c.waypoint as f64), y(c.mean)))
            .collect();
        let _ = writeln!(out, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", line.join(" "));
        for c in &pts {
            let se = c.stderr.unwrap_or(0.0);
            let cx = x(c.waypoint as f64);
            let _ = writeln!(
                out,
                "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"{color}\"/>",
                y(c.mean - se),
                y(c.mean + se)
            );
            let _ = writeln!(out, "<circle cx=\"{cx:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", y(c.mean));
        }
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>",
            PAD + 8.0,
            PAD / 2.0 + 14.0 * (k + 1) as f64,
            escape(s)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Bars of the BT-probability histogram; red below 0.5, green at or above.
pub fn histogram_svg(strategy: &str, hist: &Histogram) -> String {
    let mut out = header(&format!("Implicit-model probability of the oracle choice ({strategy})"));
    axes(&mut out, "p(preferred beats rejected)", "count");
    let max = hist.bins.iter().map(|b| b.count).max().unwrap_or(1).max(1) as f64;
    let n = hist.bins.len().max(1) as f64;
    let bw = (W - 1.5 * PAD) / n;
    for (i, b) in hist.bins.iter().enumerate() {
        let h = (H - 1.5 * PAD) * b.count as f64 / max;
        let color = if b.correct { "#2ca02c" } else { "#d62728" };
        let _ = writeln!(
            out,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{color}\" stroke=\"white\"/>",
            PAD + bw * i as f64,
            H - PAD - h,
            bw
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{:.1}</text>",
            PAD + bw * i as f64,
            H - PAD + 14.0,
            b.lo
        );
    }
    out.push_str("</svg>\n");
    out
}
