use super::corpus::Vignette;
use crate::data::LabelSet;

const PREAMBLE: &str = "You are supporting a primary care triage exercise. \
Read the patient case below and decide on the single most likely diagnosis.";

/// Zero-shot, single-turn prompt. Each label string appears once, in the
/// answer instruction.
pub fn build_prompt(vignette: &Vignette, labels: &LabelSet) -> String {
    let options: Vec<String> = labels.names().iter().map(|n| format!("\"{n}\"")).collect();
    format!(
        "{PREAMBLE}\n\nCase:\n{}\n\nAnswer with exactly one label from this list: {}. Reply with the label only.",
        vignette.text,
        options.join(", ")
    )
}
