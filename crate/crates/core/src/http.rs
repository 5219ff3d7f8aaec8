//! Minimal JSON-over-HTTP plumbing shared by the embeddings and chat clients.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use thiserror::Error;

/// Environment variable holding the bearer token for remote endpoints.
pub const API_KEY_ENV: &str = "POLEVENT_API_KEY";

const BODY_EXCERPT_CHARS: usize = 512;

#[derive(Debug, Error)]
pub enum HttpError {
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("request timed out")]
    Timeout,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Decode(String),
}

pub(crate) fn client(timeout: Duration) -> Result<Client, HttpError> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| HttpError::Transport(redact(&e.to_string())))
}

pub(crate) fn join_url(endpoint: &str, path: &str) -> String {
    let base = endpoint.trim_end_matches('/');
    // Accept endpoints configured with or without the /v1 prefix.
    match base.strip_suffix("/v1") {
        Some(stripped) => format!("{stripped}{path}"),
        None => format!("{base}{path}"),
    }
}

pub(crate) fn api_key() -> Option<String> {
    std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty())
}

/// Replaces any occurrence of the configured API key with a placeholder.
pub fn redact(text: &str) -> String {
    match api_key() {
        Some(key) => text.replace(&key, "[REDACTED]"),
        None => text.to_owned(),
    }
}

fn excerpt(body: &str) -> String {
    let redacted = redact(body);
    match redacted.char_indices().nth(BODY_EXCERPT_CHARS) {
        Some((cut, _)) => format!("{}…", &redacted[..cut]),
        None => redacted,
    }
}

fn classify(err: reqwest::Error) -> HttpError {
    // reqwest's Display includes the URL but never headers.
    let message = redact(&err.to_string());
    if err.is_timeout() {
        HttpError::Timeout
    } else if err.is_connect() {
        HttpError::Connect(message)
    } else if err.is_decode() {
        HttpError::Decode(message)
    } else {
        HttpError::Transport(message)
    }
}

pub(crate) fn post_json<T: DeserializeOwned>(
    client: &Client,
    url: &str,
    body: &serde_json::Value,
) -> Result<T, HttpError> {
    let mut request = client.post(url).json(body);
    if let Some(key) = api_key() {
        request = request.bearer_auth(key);
    }
    let response = request.send().map_err(classify)?;
    let status = response.status();
    let text = response.text().map_err(classify)?;
    if !status.is_success() {
        return Err(HttpError::Status {
            status: status.as_u16(),
            body: excerpt(&text),
        });
    }
    serde_json::from_str(&text).map_err(|e| HttpError::Decode(format!("{e}: {}", excerpt(&text))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joins_with_and_without_v1() {
        assert_eq!(
            join_url("http://h:1/", "/v1/embeddings"),
            "http://h:1/v1/embeddings"
        );
        assert_eq!(
            join_url("http://h:1/v1", "/v1/chat/completions"),
            "http://h:1/v1/chat/completions"
        );
    }

    #[test]
    fn excerpt_is_bounded() {
        let long = "x".repeat(5000);
        assert!(excerpt(&long).chars().count() <= BODY_EXCERPT_CHARS + 1);
    }
}
