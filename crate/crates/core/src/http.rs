//! Thin blocking HTTP helpers used by the remote backends.

use std::io::Read;
use std::time::Duration;

use crate::retry::BackendError;

/// Environment variable holding the bearer token sent to remote services.
pub const API_KEY_ENV: &str = "C2I_API_KEY";

fn agent(timeout: Duration) -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(timeout).build()
}

fn with_auth(req: ureq::Request) -> ureq::Request {
    match std::env::var(API_KEY_ENV) {
        Ok(key) if !key.is_empty() => req.set("Authorization", &format!("Bearer {key}")),
        _ => req,
    }
}

fn classify(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Status(code, resp) => {
            let body = resp.into_string().unwrap_or_default();
            let msg = format!("HTTP {code}: {}", body.trim());
            if code == 429 || code >= 500 {
                BackendError::Transient(msg)
            } else {
                BackendError::Fatal(msg)
            }
        }
        ureq::Error::Transport(t) => BackendError::Transient(t.to_string()),
    }
}

fn read_body(resp: ureq::Response) -> Result<Vec<u8>, BackendError> {
    let mut buf = Vec::new();
    resp.into_reader()
        .take(256 * 1024 * 1024)
        .read_to_end(&mut buf)
        .map_err(|e| BackendError::Transient(format!("reading response: {e}")))?;
    Ok(buf)
}

pub(crate) fn post_json(url: &str, body: &serde_json::Value, timeout: Duration) -> Result<Vec<u8>, BackendError> {
    let req = with_auth(agent(timeout).post(url));
    let resp = req.send_json(body.clone()).map_err(classify)?;
    read_body(resp)
}

pub(crate) fn post_bytes(
    url: &str,
    content_type: &str,
    bytes: &[u8],
    timeout: Duration,
) -> Result<Vec<u8>, BackendError> {
    let req = with_auth(agent(timeout).post(url)).set("Content-Type", content_type);
    let resp = req.send_bytes(bytes).map_err(classify)?;
    read_body(resp)
}
