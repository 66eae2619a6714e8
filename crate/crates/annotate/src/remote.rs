//! HTTP backends: a chat-completion client usable as generator, selector, QA
//! writer and judge, and a text-image similarity scorer.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use ureq::Agent;

use crate::error::{AnnotateError, Result};
use crate::judge::Judge;
use crate::prompt::{fill, PromptTemplates};
use crate::qa::QaGenerator;
use crate::refine::{AnnotationState, GenContext, Generator, ImageRef, Scorer, Selector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RemoteConfig {
    /// Endpoint root, e.g. `https://host/v1`; `/chat/completions` or `/score` is appended.
    pub base_url: String,
    pub model: String,
    /// Environment variable holding a bearer token, if any.
    pub token_env: Option<String>,
    pub timeout_secs: u64,
    /// Extra attempts after the first failure.
    pub retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "default".into(),
            token_env: None,
            timeout_secs: 60,
            retries: 2,
            backoff_ms: 500,
        }
    }
}

struct Http {
    cfg: RemoteConfig,
    agent: Agent,
}

impl Http {
    fn new(cfg: RemoteConfig) -> Self {
        let agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { cfg, agent }
    }

    fn token(&self) -> Result<Option<String>> {
        match &self.cfg.token_env {
            None => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| AnnotateError::InvalidArgument(format!("token variable {var} is not set"))),
        }
    }

    fn attempt(&self, url: &str, token: Option<&str>, body: &str) -> std::result::Result<Value, String> {
        let mut req = self.agent.post(url).header("content-type", "application/json");
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!(
                "HTTP {}: {}",
                status.as_u16(),
                text.chars().take(200).collect::<String>()
            ));
        }
        serde_json::from_str(&text).map_err(|e| format!("response is not JSON: {e}"))
    }

    /// POSTs `body` to `base_url + path`, retrying with exponential backoff.
    fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}{path}", self.cfg.base_url.trim_end_matches('/'));
        let token = self.token()?;
        let body = body.to_string();
        let attempts = self.cfg.retries + 1;
        let mut detail = String::new();
        for i in 0..attempts {
            if i > 0 {
                thread::sleep(Duration::from_millis(self.cfg.backoff_ms << (i - 1)));
            }
            match self.attempt(&url, token.as_deref(), &body) {
                Ok(v) => return Ok(v),
                Err(e) => detail = e,
            }
        }
        Err(AnnotateError::Backend {
            backend: url,
            attempts,
            detail,
        })
    }
}

/// Chat-completion client. Requests carry `{model, messages: [{role, content}]}`
/// and the reply text is read from `choices[0].message.content`.
pub struct ChatClient {
    http: Http,
    pub prompts: PromptTemplates,
}

impl ChatClient {
    pub fn new(cfg: RemoteConfig, prompts: PromptTemplates) -> Self {
        Self {
            http: Http::new(cfg),
            prompts,
        }
    }

    pub fn complete(&self, prompt: &str) -> Result<String> {
        let body = json!({
            "model": self.http.cfg.model,
            "messages": [{"role": "user", "content": prompt}],
        });
        let v = self.http.post("/chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| AnnotateError::MissingField {
                field: "choices[0].message.content".into(),
                context: "chat completion response".into(),
            })
    }
}

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim();
    let t = t.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 && t[digits..].starts_with(['.', ')']) {
        t[digits + 1..].trim_start()
    } else {
        t
    }
}

fn history_text(state: &AnnotationState) -> String {
    let lines: Vec<String> = state
        .candidates
        .iter()
        .map(|c| format!("[{:.4}] {}", c.score, c.text))
        .collect();
    if lines.is_empty() {
        "(none)".into()
    } else {
        lines.join("\n")
    }
}

impl Generator for ChatClient {
    fn generate(&mut self, ctx: &GenContext<'_>) -> Result<Vec<String>> {
        let negs = ctx.state.hard_negative_texts();
        let negs = if negs.is_empty() {
            "(none)".to_string()
        } else {
            negs.join("\n")
        };
        let prompt = fill(
            &self.prompts.refine,
            &[
                ("image_id", &ctx.state.image.id),
                ("round", &ctx.round.to_string()),
                ("fanout", &ctx.fanout.to_string()),
                ("history", &history_text(ctx.state)),
                ("hard_negatives", &negs),
            ],
        );
        let reply = self.complete(&prompt)?;
        Ok(reply
            .lines()
            .map(strip_list_marker)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect())
    }
}

impl Selector for ChatClient {
    fn select(&mut self, state: &AnnotationState) -> Result<String> {
        let prompt = fill(
            &self.prompts.select,
            &[("image_id", &state.image.id), ("candidates", &history_text(state))],
        );
        let reply = self.complete(&prompt)?;
        let text = reply.trim();
        if text.is_empty() {
            return Err(AnnotateError::Malformed("selector returned an empty caption".into()));
        }
        Ok(text.to_string())
    }
}

impl QaGenerator for ChatClient {
    fn qa_text(&mut self, caption: &str) -> Result<String> {
        self.complete(&fill(&self.prompts.qa, &[("caption", caption)]))
    }
}

impl Judge for ChatClient {
    fn judge(&mut self, ir_caption: &str, rgb_reference: &str) -> Result<(String, String)> {
        let prompt = fill(
            &self.prompts.judge,
            &[("ir_caption", ir_caption), ("rgb_reference", rgb_reference)],
        );
        let reply = self.complete(&prompt)?;
        let (Some(a), Some(b)) = (reply.find('{'), reply.rfind('}')) else {
            return Err(AnnotateError::Malformed("judge reply has no JSON object".into()));
        };
        let v: Value = serde_json::from_str(reply.get(a..=b).unwrap_or_default())
            .map_err(|e| AnnotateError::Malformed(format!("judge reply: {e}")))?;
        let get = |k: &str| {
            v.get(k)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| AnnotateError::MissingField {
                    field: k.into(),
                    context: "judge reply".into(),
                })
        };
        Ok((get("accuracy")?, get("detail")?))
    }
}

/// Similarity endpoint: POST `{text, image_id, image_path}` to `/score`,
/// expecting `{"score": <number>}` back.
pub struct RemoteScorer {
    http: Http,
}

impl RemoteScorer {
    pub fn new(cfg: RemoteConfig) -> Self {
        Self { http: Http::new(cfg) }
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, text: &str, image: &ImageRef) -> Result<f64> {
        let body = json!({
            "text": text,
            "image_id": image.id,
            "image_path": image.path.as_ref().map(|p| p.display().to_string()),
        });
        let v = self.http.post("/score", &body)?;
        v.get("score")
            .and_then(Value::as_f64)
            .ok_or_else(|| AnnotateError::MissingField {
                field: "score".into(),
                context: "similarity response".into(),
            })
    }
}
