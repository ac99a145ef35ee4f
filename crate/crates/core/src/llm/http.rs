use std::time::Duration;

use serde_json::json;

use super::{ChatBackend, CompletionRequest, RawCompletion, TransportError, Usage};

/// Chat-completions over HTTP with a bearer token read from an environment
/// variable at request time.
pub struct HttpBackend {
    endpoint: String,
    model: String,
    auth_env: String,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(endpoint: String, model: String, auth_env: String, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        HttpBackend {
            endpoint,
            model,
            auth_env,
            agent,
        }
    }

    fn body(&self, req: &CompletionRequest) -> serde_json::Value {
        json!({
            "model": self.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
    }
}

fn classify_status(code: u16, body: String) -> TransportError {
    let msg = format!("HTTP {code}: {}", body.chars().take(200).collect::<String>());
    match code {
        401 | 403 => TransportError::Auth(msg),
        408 => TransportError::Timeout(msg),
        429 | 500..=599 => TransportError::Transient(msg),
        _ => TransportError::Fatal(msg),
    }
}

fn parse_reply(body: &serde_json::Value) -> Result<RawCompletion, TransportError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .ok_or_else(|| TransportError::Transient("reply lacks choices[0].message.content".into()))?;
    let usage = body.get("usage").and_then(|u| {
        Some(Usage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok(RawCompletion {
        text: text.to_string(),
        usage,
    })
}

impl ChatBackend for HttpBackend {
    fn send(&self, req: &CompletionRequest) -> Result<RawCompletion, TransportError> {
        let token = std::env::var(&self.auth_env)
            .map_err(|_| TransportError::Auth(format!("environment variable {} is not set", self.auth_env)))?;
        let resp = self
            .agent
            .post(&self.endpoint)
            .set("Authorization", &format!("Bearer {token}"))
            .send_json(self.body(req));
        match resp {
            Ok(r) => {
                let body: serde_json::Value = r
                    .into_json()
                    .map_err(|e| TransportError::Transient(format!("unreadable reply: {e}")))?;
                parse_reply(&body)
            }
            Err(ureq::Error::Status(code, r)) => Err(classify_status(code, r.into_string().unwrap_or_default())),
            Err(ureq::Error::Transport(t)) => {
                let msg = t.to_string();
                if msg.contains("timed out") || msg.contains("Timeout") {
                    Err(TransportError::Timeout(msg))
                } else {
                    Err(TransportError::Transient(msg))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_classes() {
        assert!(matches!(classify_status(500, String::new()), TransportError::Transient(_)));
        assert!(matches!(classify_status(429, String::new()), TransportError::Transient(_)));
        assert!(matches!(classify_status(401, String::new()), TransportError::Auth(_)));
        assert!(matches!(classify_status(408, String::new()), TransportError::Timeout(_)));
        assert!(matches!(classify_status(400, String::new()), TransportError::Fatal(_)));
    }

    #[test]
    fn parses_chat_reply() {
        let body = json!({
            "choices": [{"message": {"role": "assistant", "content": "hi"}}],
            "usage": {"prompt_tokens": 3, "completion_tokens": 1}
        });
        let r = parse_reply(&body).unwrap();
        assert_eq!(r.text, "hi");
        assert_eq!(r.usage.unwrap().prompt_tokens, 3);
        assert!(parse_reply(&json!({"choices": []})).is_err());
    }
}
