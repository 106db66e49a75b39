//! SVG plot of a cell trace, drawn from the trace CSV text itself.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 56.0;

/// Log-scale `KL(π*|π^{n,n})` against `n`, with the envelope
/// `KL₂·rateⁿ⁻²` when a rate is given.
pub fn kl_svg(trace_csv: &str, rate: Option<f64>, title: &str) -> Result<String, String> {
    let body: String = trace_csv.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let mut points = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        let n: f64 = rec.get(0).and_then(|v| v.parse().ok()).ok_or("bad iteration column")?;
        let kl: f64 = rec.get(1).and_then(|v| v.parse().ok()).ok_or("bad KL column")?;
        if kl > 0.0 && kl.is_finite() {
            points.push((n, kl.log10()));
        }
    }
    let mut envelope = Vec::new();
    if let (Some(r), Some(&(n2, l2))) = (rate.filter(|r| *r > 0.0 && *r < 1.0), points.iter().find(|p| p.0 >= 2.0)) {
        let last = points.last().map_or(n2, |p| p.0);
        let steps = (last - n2).max(1.0) as usize;
        envelope = (0..=steps).map(|k| (n2 + k as f64, l2 + k as f64 * r.log10())).collect();
    }

    let n_max = points.last().map_or(1.0, |p| p.0).max(1.0);
    let lo = points.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).floor();
    let hi = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).ceil();
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (-1.0, 0.0) };
    let sx = |n: f64| PAD + (W - 2.0 * PAD) * n / n_max;
    let sy = |l: f64| H - PAD - (H - 2.0 * PAD) * (l.clamp(lo, hi) - lo) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{PAD}" y="24">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let mut decade = lo;
    while decade <= hi {
        let y = sy(decade);
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.1}" x2="{PAD}" y2="{y:.1}" stroke="black"/>"#, PAD - 4.0);
        let _ = writeln!(s, r#"<text x="4" y="{:.1}">1e{decade}</text>"#, y + 4.0);
        decade += 1.0;
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}">n = {n_max}</text>"#, W - PAD - 40.0, H - PAD + 20.0);
    let _ = writeln!(s, r#"<text x="{PAD}" y="{}">KL(π*|π^(n,n)), log scale</text>"#, H - 12.0);
    let polyline = |pts: &[(f64, f64)], style: &str| {
        let coords: Vec<String> = pts.iter().map(|&(n, l)| format!("{:.1},{:.1}", sx(n), sy(l))).collect();
        format!("<polyline points=\"{}\" fill=\"none\" {style}/>\n", coords.join(" "))
    };
    if !points.is_empty() {
        s.push_str(&polyline(&points, r#"stroke="steelblue" stroke-width="2""#));
    }
    if !envelope.is_empty() {
        s.push_str(&polyline(&envelope, r#"stroke="firebrick" stroke-dasharray="6 4""#));
        let _ = writeln!(s, r#"<text x="{}" y="40" fill="firebrick">predicted rate {:.4}</text>"#, W - 220.0, rate.unwrap_or(f64::NAN));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
