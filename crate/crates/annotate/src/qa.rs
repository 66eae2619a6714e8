use lxfuse::harness::Modality;
use serde::Serialize;
use serde_json::Value;

use crate::error::{AnnotateError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
    pub modality: Modality,
}

/// Turns a caption into raw QA text (a JSON array, see [`parse_qa_pairs`]).
pub trait QaGenerator {
    fn qa_text(&mut self, caption: &str) -> Result<String>;
}

pub const MIN_PAIRS: usize = 2;
pub const MAX_PAIRS: usize = 4;

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str, i: usize) -> Result<&'a str> {
    match obj.get(name) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.trim()),
        Some(Value::String(_)) | None | Some(Value::Null) => Err(AnnotateError::MissingField {
            field: name.into(),
            context: format!("QA pair {i}"),
        }),
        Some(other) => Err(AnnotateError::Malformed(format!(
            "QA pair {i}: `{name}` is not a string: {other}"
        ))),
    }
}

/// Parses `[{"question": .., "answer": .., "modality": "IR" | "RGB"}, ...]`.
/// Surrounding prose is tolerated; the first `[` through the last `]` is parsed.
pub fn parse_qa_pairs(text: &str) -> Result<Vec<QaPair>> {
    let (Some(a), Some(b)) = (text.find('['), text.rfind(']')) else {
        return Err(AnnotateError::Malformed("no JSON array in QA output".into()));
    };
    if b < a {
        return Err(AnnotateError::Malformed("no JSON array in QA output".into()));
    }
    let items: Vec<Value> =
        serde_json::from_str(&text[a..=b]).map_err(|e| AnnotateError::Malformed(format!("QA output: {e}")))?;
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let obj = item
                .as_object()
                .ok_or_else(|| AnnotateError::Malformed(format!("QA pair {i} is not an object")))?;
            let modality = field(obj, "modality", i)?;
            Ok(QaPair {
                question: field(obj, "question", i)?.to_string(),
                answer: field(obj, "answer", i)?.to_string(),
                modality: modality
                    .to_ascii_uppercase()
                    .parse()
                    .map_err(|_| AnnotateError::Malformed(format!("QA pair {i}: unknown modality {modality:?}")))?,
            })
        })
        .collect()
}

/// Asks the backend for 2 to 4 tagged pairs. A count outside that range is
/// retried once; malformed output fails immediately.
pub fn qa_from_caption<G: QaGenerator + ?Sized>(gen: &mut G, caption: &str) -> Result<Vec<QaPair>> {
    if caption.trim().is_empty() {
        return Err(AnnotateError::InvalidArgument("empty caption".into()));
    }
    let mut last = 0;
    for _ in 0..2 {
        let pairs = parse_qa_pairs(&gen.qa_text(caption)?)?;
        if (MIN_PAIRS..=MAX_PAIRS).contains(&pairs.len()) {
            return Ok(pairs);
        }
        last = pairs.len();
    }
    Err(AnnotateError::Malformed(format!(
        "expected {MIN_PAIRS} to {MAX_PAIRS} QA pairs, got {last} on both attempts"
    )))
}
