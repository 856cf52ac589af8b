//! Canonical JSON encoding.
//!
//! Every digest and signature in the system is computed over bytes produced
//! here, so the encoding has to be a pure function of the value:
//!
//! - object keys sorted by their UTF-8 bytes,
//! - no whitespace between tokens,
//! - integers only (floats are rejected),
//! - binary data is carried as lowercase hex strings by the types themselves.
//!
//! [`decode`] is strict: it accepts only bytes that [`encode`] would have
//! produced, so `encode(decode(b)) == b` holds for every accepted input.

use std::fmt;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Errors raised while producing or parsing canonical bytes.
#[derive(Debug, thiserror::Error)]
pub enum EncodingError {
    #[error("floating-point number at {path} is not encodable")]
    Float { path: String },
    #[error("value could not be serialized: {0}")]
    Serialize(String),
    #[error("malformed JSON: {0}")]
    Malformed(String),
    #[error("input is valid JSON but not in canonical form")]
    NonCanonical,
    #[error("canonical value does not match expected shape: {0}")]
    Shape(String),
}

/// Bytes produced by the canonical encoder.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct CanonicalBytes(Vec<u8>);

impl CanonicalBytes {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl AsRef<[u8]> for CanonicalBytes {
    fn as_ref(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for CanonicalBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match std::str::from_utf8(&self.0) {
            Ok(s) => write!(f, "CanonicalBytes({s})"),
            Err(_) => write!(f, "CanonicalBytes({} bytes)", self.0.len()),
        }
    }
}

impl fmt::Display for CanonicalBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&String::from_utf8_lossy(&self.0))
    }
}

/// Encode any serializable value canonically.
pub fn encode<T: Serialize + ?Sized>(value: &T) -> Result<CanonicalBytes, EncodingError> {
    let value = serde_json::to_value(value).map_err(|e| EncodingError::Serialize(e.to_string()))?;
    encode_value(&value)
}

/// Encode an already-built JSON value canonically.
pub fn encode_value(value: &Value) -> Result<CanonicalBytes, EncodingError> {
    let mut out = Vec::with_capacity(128);
    write_value(value, &mut out, &mut String::from("$"))?;
    Ok(CanonicalBytes(out))
}

/// Parse canonical bytes into a JSON value, rejecting anything non-canonical.
pub fn decode_value(bytes: &[u8]) -> Result<Value, EncodingError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| EncodingError::Malformed(e.to_string()))?;
    let again = encode_value(&value)?;
    if again.as_bytes() != bytes {
        return Err(EncodingError::NonCanonical);
    }
    Ok(value)
}

/// Parse canonical bytes into a typed value.
pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, EncodingError> {
    let value = decode_value(bytes)?;
    serde_json::from_value(value).map_err(|e| EncodingError::Shape(e.to_string()))
}

/// Strictest parse: canonical bytes that also re-encode identically from the
/// typed value, so unknown fields and non-normalized values are refused.
pub fn decode_exact<T: DeserializeOwned + Serialize>(bytes: &[u8]) -> Result<T, EncodingError> {
    // The typed re-encode is canonical by construction, so comparing it to
    // the input also covers key order, whitespace and escaping.
    let value: T =
        serde_json::from_slice(bytes).map_err(|e| EncodingError::Malformed(e.to_string()))?;
    if encode(&value)?.as_bytes() != bytes {
        return Err(EncodingError::NonCanonical);
    }
    Ok(value)
}

/// Parse any JSON (not necessarily canonical) into a typed value, still
/// rejecting floats. Used for hand-edited configuration files.
pub fn parse_relaxed<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, EncodingError> {
    let value: Value =
        serde_json::from_slice(bytes).map_err(|e| EncodingError::Malformed(e.to_string()))?;
    check_no_floats(&value, &mut String::from("$"))?;
    serde_json::from_value(value).map_err(|e| EncodingError::Shape(e.to_string()))
}

fn check_no_floats(value: &Value, path: &mut String) -> Result<(), EncodingError> {
    match value {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => {
            Err(EncodingError::Float { path: path.clone() })
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                let len = path.len();
                path.push_str(&format!("[{i}]"));
                check_no_floats(item, path)?;
                path.truncate(len);
            }
            Ok(())
        }
        Value::Object(map) => {
            for (k, v) in map {
                let len = path.len();
                path.push('.');
                path.push_str(k);
                check_no_floats(v, path)?;
                path.truncate(len);
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

fn write_value(value: &Value, out: &mut Vec<u8>, path: &mut String) -> Result<(), EncodingError> {
    match value {
        Value::Null => out.extend_from_slice(b"null"),
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.extend_from_slice(i.to_string().as_bytes());
            } else if let Some(u) = n.as_u64() {
                out.extend_from_slice(u.to_string().as_bytes());
            } else {
                return Err(EncodingError::Float { path: path.clone() });
            }
        }
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                let len = path.len();
                path.push_str(&format!("[{i}]"));
                write_value(item, out, path)?;
                path.truncate(len);
            }
            out.push(b']');
        }
        Value::Object(map) => {
            // serde_json's map order depends on crate features; sort explicitly.
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(k, out);
                out.push(b':');
                let len = path.len();
                path.push('.');
                path.push_str(k);
                write_value(v, out, path)?;
                path.truncate(len);
            }
            out.push(b'}');
        }
    }
    Ok(())
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    out.push(b'"');
    for c in s.chars() {
        match c {
            '"' => out.extend_from_slice(b"\\\""),
            '\\' => out.extend_from_slice(b"\\\\"),
            '\n' => out.extend_from_slice(b"\\n"),
            '\r' => out.extend_from_slice(b"\\r"),
            '\t' => out.extend_from_slice(b"\\t"),
            '\u{08}' => out.extend_from_slice(b"\\b"),
            '\u{0c}' => out.extend_from_slice(b"\\f"),
            c if (c as u32) < 0x20 => {
                out.extend_from_slice(format!("\\u{:04x}", c as u32).as_bytes());
            }
            c => {
                let mut buf = [0u8; 4];
                out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            }
        }
    }
    out.push(b'"');
}
