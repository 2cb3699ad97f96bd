//! Request fingerprints: SHA-256 over a canonical JSON serialization.
//!
//! Canonical form: object keys sorted bytewise at every depth, no
//! whitespace, optional fields present as `null`, plus a top-level `kind`
//! discriminator (`chat` or `embedding`). Key order is imposed here rather
//! than relying on the map type behind `serde_json::Value`.

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::types::{ChatRequest, EmbeddingRequest};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RequestFingerprint(String);

impl RequestFingerprint {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Accepts exactly 64 lowercase hex characters.
    pub fn parse(s: &str) -> Option<Self> {
        let ok = s.len() == 64 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        ok.then(|| Self(s.to_string()))
    }
}

impl fmt::Display for RequestFingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn chat_request_value(req: &ChatRequest) -> Value {
    let mut v = serde_json::to_value(req).expect("chat request serializes");
    v.as_object_mut().expect("object").insert("kind".into(), Value::from("chat"));
    v
}

pub fn embedding_request_value(req: &EmbeddingRequest) -> Value {
    let mut v = serde_json::to_value(req).expect("embedding request serializes");
    v.as_object_mut().expect("object").insert("kind".into(), Value::from("embedding"));
    v
}

pub fn fingerprint_chat(req: &ChatRequest) -> RequestFingerprint {
    fingerprint_value(&chat_request_value(req))
}

pub fn fingerprint_embedding(req: &EmbeddingRequest) -> RequestFingerprint {
    fingerprint_value(&embedding_request_value(req))
}

/// Fingerprint of an already-serialized request value (as stored in fixtures).
pub fn fingerprint_value(value: &Value) -> RequestFingerprint {
    let canonical = canonical_json(value);
    RequestFingerprint(hex::encode(Sha256::digest(canonical.as_bytes())))
}

pub fn canonical_json(value: &Value) -> String {
    let mut out = String::new();
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut String) {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(key).expect("string serializes"));
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&serde_json::to_string(scalar).expect("scalar serializes")),
    }
}
