use serde::{Deserialize, Serialize};

/// Prompt text sent to remote backends. Placeholders in braces are filled by
/// [`fill`]; anything else is passed through verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptTemplates {
    /// `{image_id}`, `{round}`, `{fanout}`, `{history}`, `{hard_negatives}`
    pub refine: String,
    /// `{image_id}`, `{candidates}`
    pub select: String,
    /// `{caption}`
    pub qa: String,
    /// `{ir_caption}`, `{rgb_reference}`
    pub judge: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            refine: "Image {image_id}, round {round}. Previous captions with similarity scores:\n{history}\n\
                     Low-scoring captions to avoid:\n{hard_negatives}\n\
                     Write {fanout} new captions, one per line."
                .into(),
            select: "Image {image_id}. Scored candidate captions:\n{candidates}\n\
                     Reply with the single best final caption."
                .into(),
            qa: "Caption: {caption}\nWrite 2 to 4 question/answer pairs as a JSON array of objects with \
                 fields question, answer and modality (IR or RGB)."
                .into(),
            judge: "Infrared caption: {ir_caption}\nReference caption: {rgb_reference}\n\
                    Rate accuracy and detail as Very Good, Good, Fair or Poor. Reply with JSON \
                    {\"accuracy\": ..., \"detail\": ...}."
                .into(),
        }
    }
}

/// Replaces each `{key}` with its value. Unknown placeholders are left alone.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}
