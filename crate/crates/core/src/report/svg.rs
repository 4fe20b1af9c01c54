//! Static SVG 1.1 renderings. Elements carry class names so tests and
//! stylesheets can find them; coordinates are printed with two decimals so
//! output is stable across platforms.

use std::fmt::Write as _;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;

use crate::attack::{perturbation_map, SweepResult};
use crate::data::LabeledImage;
use crate::defense::{format_percent, MitigationReport};
use crate::error::{Error, Result};
use crate::lingua::{DriftProfile, Register};
use crate::model::TrainingTrace;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 24.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn open(width: f64, height: f64, title: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
         <svg xmlns=\"http://www.w3.org/2000/svg\" xmlns:xlink=\"http://www.w3.org/1999/xlink\" version=\"1.1\" \
         width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect class=\"background\" x=\"0\" y=\"0\" width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>\n\
         <text class=\"title\" x=\"{:.2}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        width / 2.0,
        esc(title)
    )
}

/// Plot-area mapping for x in `[x0, x1]` and y in `[0, 1]`.
struct Frame {
    x0: f64,
    x1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = if self.x1 > self.x0 { self.x1 - self.x0 } else { 1.0 };
        LEFT + (x - self.x0) / span * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        TOP + (1.0 - y.clamp(0.0, 1.0)) * (H - TOP - BOTTOM)
    }

    fn axes(&self, out: &mut String, x_label: &str, y_label: &str, x_ticks: &[f64]) {
        let (bx, by) = (LEFT, H - BOTTOM);
        let _ = writeln!(out, "<line class=\"axis\" x1=\"{bx:.2}\" y1=\"{by:.2}\" x2=\"{:.2}\" y2=\"{by:.2}\" stroke=\"black\"/>", W - RIGHT);
        let _ = writeln!(out, "<line class=\"axis\" x1=\"{bx:.2}\" y1=\"{TOP:.2}\" x2=\"{bx:.2}\" y2=\"{by:.2}\" stroke=\"black\"/>");
        for i in 0..=5 {
            let v = i as f64 / 5.0;
            let _ = writeln!(
                out,
                "<text class=\"tick\" x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{:.0}%</text>",
                bx - 6.0,
                self.py(v) + 4.0,
                v * 100.0
            );
        }
        for &t in x_ticks {
            let _ = writeln!(
                out,
                "<text class=\"tick\" x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{t:.3}</text>",
                self.px(t),
                by + 16.0
            );
        }
        let _ = writeln!(out, "<text class=\"axis-label\" x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", (LEFT + W - RIGHT) / 2.0, H - 12.0, esc(x_label));
        let _ = writeln!(
            out,
            "<text class=\"axis-label\" x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">{}</text>",
            H / 2.0,
            H / 2.0,
            esc(y_label)
        );
    }
}

/// Accuracy against epsilon with the interval band, a baseline line at the
/// clean accuracy and a chance line at `1/K`.
pub fn decay_curve_svg(sweep: &SweepResult) -> Result<String> {
    let clean = sweep.clean().ok_or_else(|| Error::validation("sweep has no clean row"))?;
    let k = clean.confusion.labels.len().max(1);
    let x1 = sweep.rows.iter().map(|r| r.epsilon).fold(0.0, f64::max);
    let f = Frame { x0: 0.0, x1 };
    let mut out = open(W, H, "Robustness decay");
    let ticks: Vec<f64> = sweep.rows.iter().step_by(2).map(|r| r.epsilon).collect();
    f.axes(&mut out, "epsilon (pixel-space L-infinity budget)", "accuracy", &ticks);

    let upper: Vec<String> = sweep.rows.iter().map(|r| format!("{:.2},{:.2}", f.px(r.epsilon), f.py(r.ci.upper))).collect();
    let lower: Vec<String> = sweep.rows.iter().rev().map(|r| format!("{:.2},{:.2}", f.px(r.epsilon), f.py(r.ci.lower))).collect();
    let _ = writeln!(
        out,
        "<path class=\"ci-band\" d=\"M {} L {} Z\" fill=\"#4a7fb5\" fill-opacity=\"0.2\" stroke=\"none\"/>",
        upper.join(" L "),
        lower.join(" L ")
    );
    for (name, y, color) in [("baseline", clean.accuracy, "#2a9d4b"), ("chance", 1.0 / k as f64, "#888888")] {
        let _ = writeln!(
            out,
            "<line class=\"reference-line {name}\" x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-dasharray=\"6 4\"/>",
            f.px(0.0),
            f.py(y),
            f.px(x1),
            f.py(y)
        );
    }
    let pts: Vec<String> = sweep.rows.iter().map(|r| format!("{:.2},{:.2}", f.px(r.epsilon), f.py(r.accuracy))).collect();
    let _ = writeln!(out, "<polyline class=\"accuracy-line\" points=\"{}\" fill=\"none\" stroke=\"#1f4e79\" stroke-width=\"2\"/>", pts.join(" "));
    for r in &sweep.rows {
        let _ = writeln!(
            out,
            "<circle class=\"data-point\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"#1f4e79\" data-epsilon=\"{:.4}\" data-accuracy=\"{:.4}\"/>",
            f.px(r.epsilon),
            f.py(r.accuracy),
            r.epsilon,
            r.accuracy
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Grouped bars: per-class accuracy clean against the first attacked level.
pub fn per_class_svg(sweep: &SweepResult) -> Result<String> {
    let clean = sweep.clean().ok_or_else(|| Error::validation("sweep has no clean row"))?;
    let attacked = sweep
        .rows
        .iter()
        .find(|r| r.epsilon > 0.0)
        .ok_or_else(|| Error::validation("sweep has no attacked level"))?;
    let names = clean.confusion.labels.names();
    let mut out = open(W, H, &format!("Per-class accuracy, clean vs epsilon {:.3}", attacked.epsilon));
    let f = Frame { x0: 0.0, x1: 1.0 };
    f.axes(&mut out, "class", "accuracy", &[]);
    let group = (W - LEFT - RIGHT) / names.len() as f64;
    let bar = group * 0.35;
    for (i, name) in names.iter().enumerate() {
        let gx = LEFT + group * i as f64 + group * 0.15;
        for (j, (class, row)) in [("clean", clean), ("adversarial", attacked)].into_iter().enumerate() {
            let v = row.per_class_accuracy.get(i).copied().flatten().unwrap_or(0.0);
            let x = gx + bar * j as f64;
            let color = if j == 0 { "#4a7fb5" } else { "#c0392b" };
            let _ = writeln!(
                out,
                "<rect class=\"bar {class}\" x=\"{x:.2}\" y=\"{:.2}\" width=\"{bar:.2}\" height=\"{:.2}\" fill=\"{color}\" data-value=\"{v:.4}\"/>",
                f.py(v),
                f.py(0.0) - f.py(v)
            );
        }
        let _ = writeln!(out, "<text class=\"category\" x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", gx + bar, H - BOTTOM + 16.0, esc(name));
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Horizontal bars per condition over a shaded sub-50% zone.
pub fn mitigation_svg(report: &MitigationReport) -> String {
    let rows = report.rows.len().max(1) as f64;
    let left = 200.0;
    let plot_w = W - left - RIGHT;
    let x = |v: f64| left + v.clamp(0.0, 1.0) * plot_w;
    let mut out = open(W, H, &format!("Mitigation stress test at epsilon {:.3}", report.epsilon));
    let _ = writeln!(
        out,
        "<rect class=\"danger-zone\" x=\"{:.2}\" y=\"{TOP:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#e74c3c\" fill-opacity=\"0.15\"/>",
        x(0.0),
        x(0.5) - x(0.0),
        H - TOP - BOTTOM
    );
    let band = (H - TOP - BOTTOM) / rows;
    for (i, r) in report.rows.iter().enumerate() {
        let y = TOP + band * i as f64 + band * 0.2;
        let _ = writeln!(
            out,
            "<rect class=\"bar {}\" x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#4a7fb5\" data-value=\"{:.4}\"/>",
            r.condition.key(),
            x(0.0),
            x(r.accuracy) - x(0.0),
            band * 0.6,
            r.accuracy
        );
        let _ = writeln!(
            out,
            "<text class=\"category\" x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>",
            left - 8.0,
            y + band * 0.35,
            esc(r.condition.display_name())
        );
        let _ = writeln!(
            out,
            "<text class=\"value\" x=\"{:.2}\" y=\"{:.2}\">{}%</text>",
            x(r.accuracy) + 4.0,
            y + band * 0.35,
            format_percent(r.accuracy)
        );
    }
    let _ = writeln!(out, "<line class=\"axis\" x1=\"{:.2}\" y1=\"{TOP:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>", x(0.0), x(0.0), H - BOTTOM);
    out.push_str("</svg>\n");
    out
}

/// One block per model: registers down, cases across.
pub fn drift_heatmap_svg(profiles: &[DriftProfile]) -> Result<String> {
    if profiles.is_empty() {
        return Err(Error::validation("heatmap needs at least one drift profile"));
    }
    let cell = 22.0;
    let left = 190.0;
    let mut cases: Vec<u32> = profiles[0].outcomes.iter().map(|o| o.case_id).collect();
    cases.sort_unstable();
    cases.dedup();
    let block_h = cell * Register::ALL.len() as f64 + 40.0;
    let width = left + cell * cases.len() as f64 + RIGHT;
    let height = TOP + block_h * profiles.len() as f64 + 20.0;
    let mut out = open(width, height, "Per-case correctness by register");
    for (m, p) in profiles.iter().enumerate() {
        let y0 = TOP + block_h * m as f64;
        let _ = writeln!(out, "<g class=\"heatmap\" data-model=\"{}\">", esc(&p.model_name));
        let _ = writeln!(out, "<text class=\"model-name\" x=\"{left:.2}\" y=\"{:.2}\">{}</text>", y0 + 14.0, esc(&p.model_name));
        for (r, reg) in Register::ALL.iter().enumerate() {
            let y = y0 + 22.0 + cell * r as f64;
            let _ = writeln!(out, "<text class=\"register\" x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>", left - 6.0, y + cell * 0.7, reg.display_name());
            for (c, &case_id) in cases.iter().enumerate() {
                let (state, color) = match p.outcome(case_id, *reg) {
                    Some(o) if o.correct => ("correct", "#2a9d4b"),
                    Some(o) if o.parsed.label().is_none() => ("unparseable", "#999999"),
                    Some(_) => ("incorrect", "#c0392b"),
                    None => ("missing", "#ffffff"),
                };
                let _ = writeln!(
                    out,
                    "<rect class=\"heatmap-cell {state}\" x=\"{:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{color}\" stroke=\"white\" data-case=\"{case_id}\" data-register=\"{reg}\"/>",
                    left + cell * c as f64,
                    cell,
                    cell
                );
            }
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn png_data_uri(pixels: &[f32], channels: usize, h: usize, w: usize) -> Result<String> {
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut bytes = Vec::new();
    let encoded = if channels == 3 {
        let buf: Vec<u8> = (0..h * w).flat_map(|i| (0..3).map(move |c| to_u8(pixels[c * h * w + i]))).collect();
        image::RgbImage::from_raw(w as u32, h as u32, buf).map(image::DynamicImage::ImageRgb8)
    } else {
        let buf: Vec<u8> = pixels[..h * w].iter().map(|&v| to_u8(v)).collect();
        image::GrayImage::from_raw(w as u32, h as u32, buf).map(image::DynamicImage::ImageLuma8)
    }
    .ok_or_else(|| Error::validation("image buffer does not match its dimensions"))?;
    encoded
        .write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::validation(format!("png encoding failed: {e}")))?;
    Ok(format!("data:image/png;base64,{}", B64.encode(bytes)))
}

/// Rows of clean image, adversarial image and amplified perturbation map.
pub fn triptych_svg(pairs: &[(LabeledImage, LabeledImage)], amplification: f64) -> Result<String> {
    if pairs.is_empty() {
        return Err(Error::validation("triptych needs at least one image pair"));
    }
    let panel = 128.0;
    let gap = 16.0;
    let width = 3.0 * panel + 4.0 * gap;
    let height = TOP + 20.0 + (panel + gap + 18.0) * pairs.len() as f64;
    let mut out = open(width, height, "Clean, adversarial and perturbation");
    let titles = ["clean", "adversarial", &format!("perturbation x{amplification}")];
    for (i, (clean, adv)) in pairs.iter().enumerate() {
        let (c, h, w) = clean.dims();
        let map = perturbation_map(clean, adv, amplification)?;
        let y = TOP + 20.0 + (panel + gap + 18.0) * i as f64;
        let _ = writeln!(out, "<g class=\"triptych\" data-source=\"{}\">", esc(&clean.source_id));
        for (j, data) in [clean.pixels.data(), adv.pixels.data(), map.data()].into_iter().enumerate() {
            let x = gap + (panel + gap) * j as f64;
            let _ = writeln!(out, "<g class=\"panel\">");
            let _ = writeln!(out, "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>", x + panel / 2.0, y - 4.0, esc(titles[j]));
            let _ = writeln!(
                out,
                "<image x=\"{x:.2}\" y=\"{y:.2}\" width=\"{panel:.0}\" height=\"{panel:.0}\" style=\"image-rendering:pixelated\" xlink:href=\"{}\"/>",
                png_data_uri(data, c, h, w)?
            );
            out.push_str("</g>\n");
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Loss and accuracy per epoch. Loss is scaled by the largest epoch loss.
pub fn training_curve_svg(trace: &TrainingTrace) -> Result<String> {
    if trace.is_empty() {
        return Err(Error::validation("training trace is empty"));
    }
    let n = trace.len() as f64;
    let f = Frame { x0: 1.0, x1: n };
    let max_loss = trace.epochs.iter().map(|e| e.loss).fold(f64::MIN_POSITIVE, f64::max);
    let mut out = open(W, H, "Training curve");
    let ticks: Vec<f64> = trace.epochs.iter().map(|e| e.epoch as f64).collect();
    f.axes(&mut out, "epoch", "accuracy / relative loss", &[]);
    for &t in &ticks {
        let _ = writeln!(out, "<text class=\"tick\" x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{t:.0}</text>", f.px(t), H - BOTTOM + 16.0);
    }
    let loss: Vec<f64> = trace.epochs.iter().map(|e| e.loss / max_loss).collect();
    let acc: Vec<f64> = trace.epochs.iter().map(|e| e.train_accuracy).collect();
    for (class, color, values) in [("loss", "#c0392b", loss), ("accuracy", "#1f4e79", acc)] {
        let xy: Vec<(f64, f64)> = trace.epochs.iter().zip(&values).map(|(e, &v)| (f.px(e.epoch as f64), f.py(v))).collect();
        let pts: Vec<String> = xy.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(out, "<polyline class=\"{class}-line\" points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", pts.join(" "));
        for (x, y) in xy {
            let _ = writeln!(out, "<circle class=\"epoch-point {class}\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{color}\"/>");
        }
    }
    out.push_str("</svg>\n");
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FigureInputs<'a> {
    pub sweep: Option<&'a SweepResult>,
    pub mitigation: Option<&'a MitigationReport>,
    pub drift: &'a [DriftProfile],
    pub image_pairs: &'a [(LabeledImage, LabeledImage)],
    pub amplification: f64,
    pub trace: Option<&'a TrainingTrace>,
}

/// Write every figure whose inputs are present. Returns the paths written.
pub fn emit_figures(inputs: &FigureInputs<'_>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut docs: Vec<(&str, String)> = Vec::new();
    if let Some(sweep) = inputs.sweep {
        docs.push(("decay_curve.svg", decay_curve_svg(sweep)?));
        docs.push(("per_class_collapse.svg", per_class_svg(sweep)?));
    }
    if let Some(m) = inputs.mitigation {
        docs.push(("mitigation.svg", mitigation_svg(m)));
    }
    if !inputs.drift.is_empty() {
        docs.push(("drift_heatmap.svg", drift_heatmap_svg(inputs.drift)?));
    }
    if !inputs.image_pairs.is_empty() {
        let amp = if inputs.amplification > 0.0 { inputs.amplification } else { 10.0 };
        docs.push(("perturbation_triptych.svg", triptych_svg(inputs.image_pairs, amp)?));
    }
    if let Some(t) = inputs.trace {
        docs.push(("training_curve.svg", training_curve_svg(t)?));
    }
    docs.into_iter()
        .map(|(name, body)| {
            let path = out_dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSet;
    use crate::defense::Condition;
    use crate::lingua::{run_drift_audit, sample_corpus, AuditOptions, MockScript, SAMPLE_SCRIPT_LLAMA, SAMPLE_SCRIPT_NATLAS};
    use crate::tensor::Tensor;

    fn count_class(doc: &roxmltree::Document, class: &str) -> usize {
        doc.descendants()
            .filter(|n| n.attribute("class").is_some_and(|c| c.split_whitespace().any(|t| t == class)))
            .count()
    }

    #[test]
    fn decay_curve_contract() {
        let svg = decay_curve_svg(&super::super::tests::fake_sweep()).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(count_class(&doc, "data-point"), 15);
        assert_eq!(count_class(&doc, "reference-line"), 2);
        assert_eq!(count_class(&doc, "ci-band"), 1);
    }

    #[test]
    fn per_class_and_mitigation_parse() {
        let svg = per_class_svg(&super::super::tests::fake_sweep()).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(count_class(&doc, "bar"), 6);
        let report = MitigationReport::from_accuracies(0.021, &[(Condition::Clean, 0.893), (Condition::Adversarial, 0.613)]).unwrap();
        let svg = mitigation_svg(&report);
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(count_class(&doc, "danger-zone"), 1);
        assert_eq!(count_class(&doc, "bar"), 2);
    }

    /// Offline backend answering straight from a mock script.
    struct Replay(MockScript, &'static str);

    impl crate::lingua::CompletionBackend for Replay {
        fn model_name(&self) -> &str {
            self.1
        }
        fn temperature(&self) -> f64 {
            0.0
        }
        fn complete(&self, prompt: &str) -> std::result::Result<crate::lingua::Completion, crate::lingua::EndpointError> {
            let corpus = sample_corpus();
            let v = corpus
                .vignettes()
                .iter()
                .find(|v| crate::lingua::build_prompt(v, corpus.labels()) == prompt)
                .unwrap();
            Ok(crate::lingua::Completion {
                text: self.0.get(v.case_id, v.register).unwrap().to_string(),
                attempts: 1,
            })
        }
    }

    #[test]
    fn heatmap_has_three_by_twenty_cells_per_model() {
        let corpus = sample_corpus();
        let profiles: Vec<DriftProfile> = [(SAMPLE_SCRIPT_LLAMA, "llama"), (SAMPLE_SCRIPT_NATLAS, "natlas")]
            .into_iter()
            .map(|(s, name)| run_drift_audit(&Replay(MockScript::from_json(s).unwrap(), name), &corpus, &AuditOptions::default()).unwrap())
            .collect();
        let svg = drift_heatmap_svg(&profiles).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let groups: Vec<_> = doc.descendants().filter(|n| n.attribute("class") == Some("heatmap")).collect();
        assert_eq!(groups.len(), 2);
        for g in groups {
            let cells = g
                .descendants()
                .filter(|n| n.attribute("class").is_some_and(|c| c.starts_with("heatmap-cell")))
                .count();
            assert_eq!(cells, 60);
        }
    }

    #[test]
    fn triptych_has_three_panels_per_pair() {
        let label = LabelSet::clinical().get(0).unwrap();
        let clean = LabeledImage::new(Tensor::full(&[1, 8, 8], 0.5), label.clone(), "a").unwrap();
        let adv = LabeledImage::new(Tensor::full(&[1, 8, 8], 0.52), label, "a").unwrap();
        let svg = triptych_svg(&[(clean.clone(), adv.clone()), (clean, adv)], 10.0).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(count_class(&doc, "triptych"), 2);
        assert_eq!(count_class(&doc, "panel"), 6);
    }

    #[test]
    fn figures_are_deterministic() {
        let sweep = super::super::tests::fake_sweep();
        assert_eq!(decay_curve_svg(&sweep).unwrap(), decay_curve_svg(&sweep).unwrap());
    }
}
