//! CSV, SVG and JSON artifacts built from sweep, mitigation and drift results.

mod bundle;
mod svg;

pub use bundle::{
    emit_audit_bundle, load_drift_document, load_robustness_map, summary_text, BundlePaths, ClassCollapse, DriftProfileDocument,
    EndpointMetadata, ModelFingerprint, RobustnessMap, SCHEMA_VERSION,
};
pub use svg::{
    decay_curve_svg, drift_heatmap_svg, emit_figures, mitigation_svg, per_class_svg, training_curve_svg, triptych_svg, FigureInputs,
};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::SweepResult;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateFormat {
    /// `0.8933`
    #[default]
    Fraction,
    /// `89.3`
    Percent,
}

impl RateFormat {
    fn render(self, v: f64) -> String {
        match self {
            RateFormat::Fraction => format!("{v:.4}"),
            RateFormat::Percent => format!("{:.1}", v * 100.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayRow {
    pub epsilon: f64,
    pub accuracy: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

pub const DECAY_HEADER: &str = "epsilon,accuracy,ci_lower,ci_upper";

pub fn decay_csv(sweep: &SweepResult, format: RateFormat) -> String {
    let mut out = format!("{DECAY_HEADER}\n");
    for r in &sweep.rows {
        let _ = writeln!(
            out,
            "{:.3},{},{},{}",
            r.epsilon,
            format.render(r.accuracy),
            format.render(r.ci.lower),
            format.render(r.ci.upper)
        );
    }
    out
}

pub fn emit_decay_csv(sweep: &SweepResult, path: &Path, format: RateFormat) -> Result<()> {
    if sweep.rows.is_empty() {
        return Err(Error::validation("sweep has no rows"));
    }
    std::fs::write(path, decay_csv(sweep, format)).map_err(|e| Error::io(path, e))
}

/// Read a decay CSV back. Percent files are detected by the caller's
/// `format`; values come back as fractions either way.
pub fn parse_decay_csv(text: &str, format: RateFormat) -> Result<Vec<DecayRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| Error::format("<decay csv>", e))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != DECAY_HEADER {
        return Err(Error::format("<decay csv>", format!("unexpected header {headers:?}")));
    }
    let scale = match format {
        RateFormat::Fraction => 1.0,
        RateFormat::Percent => 0.01,
    };
    reader
        .records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::format("<decay csv>", e))?;
            let num = |i: usize| -> Result<f64> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| Error::format("<decay csv>", format!("field {i}: {e}")))
            };
            Ok(DecayRow {
                epsilon: num(0)?,
                accuracy: num(1)? * scale,
                ci_lower: num(2)? * scale,
                ci_upper: num(3)? * scale,
            })
        })
        .collect()
}
