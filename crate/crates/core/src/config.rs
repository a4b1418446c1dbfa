//! Content hashing of serializable configurations.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Result;

/// Hex SHA-256 of the canonical JSON form (object keys sorted, no whitespace).
pub fn content_hash<T: Serialize>(value: &T) -> Result<String> {
    // `Value` keeps objects in a sorted map, which canonicalizes key order.
    let canonical = serde_json::to_string(&serde_json::to_value(value)?)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}
