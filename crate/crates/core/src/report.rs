//! Result tables: CSV storage, markdown and SVG rendering.
//!
//! Accuracies are kept as percentage text so that values read from a CSV are
//! rendered exactly as written (`9` stays `9%`, `1.0` stays `1.0%`).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PUBLISHED_GOOGLEAP_CSV: &str = include_str!("../data/published_googleap.csv");
pub const PUBLISHED_LAVAN_CSV: &str = include_str!("../data/published_lavan.csv");
pub const PUBLISHED_COMPARISON_CSV: &str = include_str!("../data/published_comparison.csv");

/// A percentage in [0, 100] that remembers its decimal text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Percent(String);

impl Percent {
    /// From a fraction in [0, 1], printed with at most four decimals.
    pub fn from_fraction(f: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Report(format!("fraction {f} outside [0, 1]")));
        }
        let text = format!("{:.4}", f * 100.0);
        let text = text.trim_end_matches('0').trim_end_matches('.');
        Ok(Percent(if text.is_empty() { "0".into() } else { text.to_string() }))
    }

    pub fn text(&self) -> &str {
        &self.0
    }

    /// Value in percentage points.
    pub fn value(&self) -> f64 {
        self.0.parse().expect("validated on construction")
    }

    pub fn fraction(&self) -> f64 {
        self.value() / 100.0
    }
}

impl FromStr for Percent {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let t = t.strip_suffix('%').unwrap_or(t).trim();
        let v: f64 = t.parse().map_err(|_| Error::Report(format!("not a percentage: {s:?}")))?;
        if !(0.0..=100.0).contains(&v) || t.contains(['e', 'E']) {
            return Err(Error::Report(format!("percentage {s:?} outside [0, 100]")));
        }
        Ok(Percent(t.to_string()))
    }
}

impl TryFrom<String> for Percent {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Percent> for String {
    fn from(p: Percent) -> String {
        p.0
    }
}

impl fmt::Display for Percent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}%", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub patch_size: usize,
    pub model: String,
    pub method: String,
    pub clean_acc: Percent,
    pub attacked_acc: Percent,
    pub info: Percent,
    pub robust_with_patch: Percent,
    pub robust_without_patch: Percent,
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Csv,
    Svg,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(Error::invalid(format!("unknown report format {other:?}"))),
        }
    }
}

fn method_label(method: &str) -> &str {
    match method {
        "svd" => "SVD",
        "tsne" => "t-SNE",
        "identity" => "No defense",
        other => other,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        EvalReport { rows }
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let rows = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ReportRow>, _>>()
            .map_err(|e| Error::Report(format!("bad report CSV: {e}")))?;
        Ok(EvalReport { rows })
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            writer.serialize(row)?;
        }
        let bytes = writer.into_inner().map_err(|e| Error::Report(format!("CSV flush failed: {e}")))?;
        if self.rows.is_empty() {
            return Ok(String::new());
        }
        String::from_utf8(bytes).map_err(|e| Error::Report(e.to_string()))
    }

    /// Methods in order of first appearance.
    pub fn methods(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.method.as_str()) {
                seen.push(&r.method);
            }
        }
        seen
    }

    /// The hash shared by all rows; rows disagreeing with each other are an
    /// error.
    pub fn config_hash(&self) -> Result<Option<&str>> {
        let mut hash: Option<&str> = None;
        for r in &self.rows {
            match hash {
                None => hash = Some(&r.config_hash),
                Some(h) if h != r.config_hash => {
                    return Err(Error::Report("report rows carry different config hashes".into()))
                }
                _ => {}
            }
        }
        Ok(hash.filter(|h| !h.is_empty()))
    }

    /// Refuses a report whose recorded hash differs from `expected`, unless
    /// `force` is set.
    pub fn check_config_hash(&self, expected: &str, force: bool) -> Result<()> {
        if force {
            return Ok(());
        }
        match self.config_hash()? {
            Some(h) if h == expected => Ok(()),
            Some(h) => Err(Error::Report(format!(
                "report was produced by config {h}, not {expected} (use --force to render anyway)"
            ))),
            None => Err(Error::Report("report carries no config hash (use --force to render anyway)".into())),
        }
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        if self.rows.is_empty() {
            return Err(Error::Report("cannot render an empty report".into()));
        }
        match format {
            ReportFormat::Markdown => Ok(self.render_markdown()),
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Svg => Ok(self.render_svg()),
        }
    }

    fn render_markdown(&self) -> String {
        let mut out = String::new();
        for method in self.methods() {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("### {}\n\n", method_label(method)));
            out.push_str(
                "| Patch Size | Model | Clean Acc | Adv Patch Attack | Info % | Robust (w/ patch) | Robust (w/o patch) |\n",
            );
            out.push_str("|---|---|---|---|---|---|---|\n");
            for r in self.rows.iter().filter(|r| r.method == method) {
                out.push_str(&format!(
                    "| {s}×{s} | {} | {} | {} | {} | {} | {} |\n",
                    r.model,
                    r.clean_acc,
                    r.attacked_acc,
                    r.info,
                    r.robust_with_patch,
                    r.robust_without_patch,
                    s = r.patch_size,
                ));
            }
        }
        if let Ok(Some(h)) = self.config_hash() {
            out.push_str(&format!("\nConfig hash: `{h}`\n"));
        }
        out
    }

    fn render_svg(&self) -> String {
        const BAR: f64 = 14.0;
        const GAP: f64 = 18.0;
        const PLOT_H: f64 = 200.0;
        const TOP: f64 = 30.0;
        const LEFT: f64 = 40.0;
        let palette = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];
        let methods = self.methods();
        let mut series: Vec<String> = vec!["Clean".into(), "Attacked".into()];
        series.extend(methods.iter().map(|m| format!("{} (w/ patch)", method_label(m))));

        let mut groups: Vec<(usize, &str)> = Vec::new();
        for r in &self.rows {
            if !groups.contains(&(r.patch_size, r.model.as_str())) {
                groups.push((r.patch_size, &r.model));
            }
        }
        let group_w = BAR * series.len() as f64 + GAP;
        let width = LEFT + group_w * groups.len() as f64 + 20.0;
        let height = TOP + PLOT_H + 40.0 + 18.0 * series.len() as f64;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" font-family=\"sans-serif\" font-size=\"10\">\n"
        );
        if let Ok(Some(h)) = self.config_hash() {
            s.push_str(&format!("<desc>config hash {h}</desc>\n"));
        }
        s.push_str(&format!("<text x=\"{LEFT}\" y=\"16\" font-size=\"12\">Accuracy (%) by patch size</text>\n"));
        for tick in [0, 25, 50, 75, 100] {
            let y = TOP + PLOT_H * (1.0 - tick as f64 / 100.0);
            s.push_str(&format!(
                "<line x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{tick}</text>\n",
                width - 20.0,
                LEFT - 4.0,
                y + 3.0
            ));
        }
        for (g, (size, model)) in groups.iter().enumerate() {
            let rows: Vec<&ReportRow> =
                self.rows.iter().filter(|r| r.patch_size == *size && r.model == *model).collect();
            let mut values = vec![Some(rows[0].clean_acc.value()), Some(rows[0].attacked_acc.value())];
            values.extend(
                methods.iter().map(|m| rows.iter().find(|r| r.method == *m).map(|r| r.robust_with_patch.value())),
            );
            let x0 = LEFT + GAP / 2.0 + g as f64 * group_w;
            for (k, v) in values.iter().enumerate() {
                if let Some(v) = v {
                    let h = PLOT_H * v / 100.0;
                    s.push_str(&format!(
                        "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{BAR}\" height=\"{h:.1}\" fill=\"{}\"/>\n",
                        x0 + k as f64 * BAR,
                        TOP + PLOT_H - h,
                        palette[k % palette.len()]
                    ));
                }
            }
            let label = if groups.iter().any(|(sz, m)| sz == size && m != model) {
                format!("{size}×{size} {model}")
            } else {
                format!("{size}×{size}")
            };
            s.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
                x0 + BAR * series.len() as f64 / 2.0,
                TOP + PLOT_H + 14.0,
                xml_escape(&label)
            ));
        }
        for (k, name) in series.iter().enumerate() {
            let y = TOP + PLOT_H + 30.0 + 18.0 * k as f64;
            s.push_str(&format!(
                "<rect x=\"{LEFT}\" y=\"{y:.1}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
                palette[k % palette.len()],
                LEFT + 14.0,
                y + 9.0,
                xml_escape(name)
            ));
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
struct ComparisonRow {
    defense: String,
    robust_accuracy: Percent,
}

/// Renders the shipped comparison of published robust accuracies.
pub fn render_published_comparison() -> Result<String> {
    let mut reader = csv::Reader::from_reader(PUBLISHED_COMPARISON_CSV.as_bytes());
    let mut out = String::from(
        "### Published robust accuracy of other patch defenses (reported figures, not reproduced here)\n\n| Defense | Robust Accuracy |\n|---|---|\n",
    );
    for row in reader.deserialize() {
        let row: ComparisonRow = row?;
        out.push_str(&format!("| {} | {} |\n", row.defense, row.robust_accuracy));
    }
    Ok(out)
}
