//! Static HTML attribution heatmaps.
//!
//! Every token becomes a `<span class="tok">`. Tokens with non-zero
//! attribution get an inline background colour: green for positive, red for
//! negative, with opacity `|a| / max |a|` over the essay.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionVector;
use crate::corpus::TokenizedEssay;
use crate::scorer::ScaledScore;

const POSITIVE_RGB: (u8, u8, u8) = (0, 160, 60);
const NEGATIVE_RGB: (u8, u8, u8) = (210, 30, 30);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeatmapDocument {
    pub essay_id: String,
    pub html: String,
}

pub fn escape_html(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Inline style for one token, or `None` when the token stays unhighlighted.
pub fn token_style(value: f64, max_abs: f64) -> Option<String> {
    if value == 0.0 || max_abs == 0.0 || !value.is_finite() {
        return None;
    }
    let alpha = (value.abs() / max_abs).min(1.0);
    let (r, g, b) = if value > 0.0 { POSITIVE_RGB } else { NEGATIVE_RGB };
    Some(format!("background-color: rgba({r}, {g}, {b}, {alpha:.3})"))
}

fn page(title: &str, body: &str) -> String {
    format!(
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n\
         <style>body {{ font-family: sans-serif; max-width: 60em; margin: 2em auto; line-height: 1.8; }} \
         .tok {{ padding: 0.1em 0.15em; border-radius: 0.2em; }} table {{ border-collapse: collapse; }} \
         td, th {{ padding: 0.2em 0.8em; text-align: left; }}</style>\n</head>\n<body>\n{}</body>\n</html>\n",
        escape_html(title),
        body
    )
}

/// Heatmap page for one essay.
///
/// # Panics
/// If `attr` and `essay` disagree on the number of tokens.
pub fn render_heatmap(attr: &AttributionVector, essay: &TokenizedEssay, score: &ScaledScore) -> HeatmapDocument {
    assert_eq!(attr.len(), essay.len(), "attribution and essay lengths differ");
    let max_abs = attr.per_token.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut body = String::new();
    let _ = writeln!(body, "<h1>Essay {}</h1>", escape_html(&essay.essay_id));
    let _ = writeln!(
        body,
        "<p class=\"meta\">prompt {} | score {:.3} (category {}, rubric {}..{}) | completeness error {:.3e}</p>",
        escape_html(&essay.prompt_id),
        score.scaled,
        score.category(),
        score.rubric.min_score,
        score.rubric.max_score,
        attr.completeness_error
    );
    body.push_str("<p class=\"essay\">\n");
    for (tok, &a) in essay.tokens().iter().zip(&attr.per_token) {
        let text = escape_html(tok);
        match token_style(a, max_abs) {
            Some(style) => {
                let _ = writeln!(
                    body,
                    "<span class=\"tok\" title=\"{a:.6}\" style=\"{style}\">{text}</span>"
                );
            }
            None => {
                let _ = writeln!(body, "<span class=\"tok\" title=\"{a:.6}\">{text}</span>");
            }
        }
    }
    body.push_str("</p>\n");
    HeatmapDocument {
        essay_id: essay.essay_id.clone(),
        html: page(&format!("Attribution heatmap: {}", essay.essay_id), &body),
    }
}

/// One row of the report index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub essay_id: String,
    pub prompt_id: String,
    pub href: String,
    pub score: f64,
    pub completeness_error: f64,
}

/// Inline SVG line chart of `(x, y)` points.
pub fn render_curve_svg(title: &str, points: &[(f64, f64)]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 240.0;
    const PAD: f64 = 30.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <title>{}</title>\n<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\" stroke=\"#999\"/>\n",
        escape_html(title)
    );
    if !points.is_empty() {
        let (x0, x1) = bounds(points.iter().map(|p| p.0));
        let (y0, y1) = bounds(points.iter().map(|p| p.1).chain([0.0, 1.0]));
        let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
        let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
        let pts: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline fill=\"none\" stroke=\"#1f5fbf\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        for &(x, y) in points {
            let _ = writeln!(
                svg,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"#1f5fbf\"/>",
                px(x),
                py(y)
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{PAD}\" y=\"{}\" font-size=\"11\">{x0:.2}</text>\n<text x=\"{}\" y=\"{}\" font-size=\"11\">{x1:.2}</text>\n\
             <text x=\"2\" y=\"{}\" font-size=\"11\">{y1:.2}</text>\n<text x=\"2\" y=\"{}\" font-size=\"11\">{y0:.2}</text>",
            H - 10.0,
            W - PAD - 20.0,
            H - 10.0,
            PAD,
            H - PAD
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

/// Summary page linking every heatmap, optionally with a relative-QWK curve.
pub fn render_index(entries: &[IndexEntry], curve: Option<(&str, &[(f64, f64)])>) -> String {
    let mut body = String::from("<h1>Attribution report</h1>\n");
    if let Some((title, points)) = curve {
        let _ = writeln!(body, "<h2>{}</h2>", escape_html(title));
        body.push_str(&render_curve_svg(title, points));
    }
    body.push_str("<table>\n<tr><th>essay</th><th>prompt</th><th>score</th><th>completeness error</th></tr>\n");
    for e in entries {
        let _ = writeln!(
            body,
            "<tr><td><a href=\"{}\">{}</a></td><td>{}</td><td>{:.3}</td><td>{:.3e}</td></tr>",
            escape_html(&e.href),
            escape_html(&e.essay_id),
            escape_html(&e.prompt_id),
            e.score,
            e.completeness_error
        );
    }
    body.push_str("</table>\n");
    page("Attribution report", &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::IGConfig;
    use crate::corpus::{tokenize, Rubric};

    const VOID: &[&str] = &["meta", "br", "hr", "img", "input", "link"];

    /// Checks that every opening tag is closed in order. Self-closing tags,
    /// void elements and the doctype are skipped.
    fn balanced(html: &str) -> bool {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = html;
        while let Some(start) = rest.find('<') {
            let Some(len) = rest[start..].find('>') else {
                return false;
            };
            let tag = &rest[start + 1..start + len];
            rest = &rest[start + len + 1..];
            if tag.starts_with('!') || tag.ends_with('/') {
                continue;
            }
            if let Some(name) = tag.strip_prefix('/') {
                if stack.pop().as_deref() != Some(name.trim()) {
                    return false;
                }
            } else {
                let name = tag.split_whitespace().next().unwrap_or("").to_string();
                if !VOID.contains(&name.as_str()) {
                    stack.push(name);
                }
            }
        }
        stack.is_empty()
    }

    fn attr(per_token: Vec<f64>) -> AttributionVector {
        AttributionVector {
            raw_delta: per_token.iter().sum(),
            per_token,
            input_score: 0.0,
            baseline_score: 0.0,
            completeness_error: 0.001,
            config: IGConfig::default(),
        }
    }

    fn fixture() -> (TokenizedEssay, ScaledScore) {
        let r = Rubric::new("P1", 2, 12).unwrap();
        (
            tokenize("the <cat> sat & \"purred\" . it slept .").unwrap(),
            ScaledScore::new(0.5, &r),
        )
    }

    #[test]
    fn zero_attributions_are_unhighlighted() {
        let (e, s) = fixture();
        let doc = render_heatmap(&attr(vec![0.0; e.len()]), &e, &s);
        assert!(!doc.html.contains("background-color"));
        assert_eq!(doc.html.matches("class=\"tok\"").count(), e.len());
        assert!(balanced(&doc.html));
    }

    #[test]
    fn single_max_token_is_the_only_saturated_one() {
        let (e, s) = fixture();
        let mut a = vec![0.0; e.len()];
        a[1] = 0.8;
        a[3] = 0.2;
        a[5] = -0.4;
        let doc = render_heatmap(&attr(a), &e, &s);
        assert_eq!(doc.html.matches("rgba(0, 160, 60, 1.000)").count(), 1);
        assert_eq!(doc.html.matches("rgba(0, 160, 60, 0.250)").count(), 1);
        assert_eq!(doc.html.matches("rgba(210, 30, 30, 0.500)").count(), 1);
        assert_eq!(doc.html.matches("background-color").count(), 3);
        assert!(balanced(&doc.html));
    }

    #[test]
    fn tokens_are_escaped_and_ordered() {
        let (e, s) = fixture();
        let doc = render_heatmap(&attr(vec![0.1; e.len()]), &e, &s);
        assert!(doc.html.contains("&lt;cat&gt;"));
        assert!(doc.html.contains("&amp;"));
        assert!(!doc.html.contains("<cat>"));
        let cat = doc.html.find("&lt;cat&gt;").unwrap();
        let slept = doc.html.find(">slept<").unwrap();
        assert!(cat < slept);
        assert!(doc.html.contains("score 7.000"));
        assert!(doc.html.contains("completeness error 1.000e-3"));
    }

    #[test]
    fn no_external_resources() {
        let (e, s) = fixture();
        let doc = render_heatmap(&attr(vec![0.3; e.len()]), &e, &s);
        for needle in ["http://", "https://", "<script", "<link"] {
            assert!(!doc.html.contains(needle), "{needle}");
        }
    }

    #[test]
    fn index_page_is_balanced() {
        let entries = vec![IndexEntry {
            essay_id: "e<1>".into(),
            prompt_id: "P1".into(),
            href: "essays/e1.html".into(),
            score: 7.0,
            completeness_error: 0.01,
        }];
        let html = render_index(&entries, Some(("deletion", &[(0.1, 1.0), (0.5, 0.9), (0.9, 0.4)])));
        assert!(balanced(&html));
        assert!(html.contains("<polyline"));
        assert!(html.contains("e&lt;1&gt;"));
        assert!(balanced(&render_index(&[], None)));
        assert!(balanced(&render_curve_svg("flat", &[(0.5, 0.5)])));
    }
}
