//! Canonical serialization and content addresses.
//!
//! Every cacheable node is described by a [`NodeDescriptor`]
//! `{kind, name: "", version, args, inputs}`. Its fingerprint is the SHA-256
//! of the descriptor's canonical bytes: JSON with keys sorted by UTF-8 bytes,
//! no whitespace, minimal string escaping, and floats encoded as
//! `"f64:<16 hex digits of the big-endian bit pattern>"` so the bytes are
//! identical on every platform.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Containers may nest at most this deep inside a canonical value.
pub const MAX_CANONICAL_DEPTH: usize = 16;

/// A 32-byte SHA-256 content address, displayed as 64 lowercase hex chars.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Fingerprint([u8; 32]);

impl Fingerprint {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        Fingerprint(Sha256::digest(bytes).into())
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Fingerprint(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First `n` hex characters, used in folder suffixes and listings.
    pub fn short(&self, n: usize) -> String {
        let mut hex = self.to_hex();
        hex.truncate(n);
        hex
    }
}

impl FromStr for Fingerprint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let valid = s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if !valid {
            return Err(Error::malformed("fingerprint", format!("`{s}` is not 64 lowercase hex chars")));
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(s, &mut out).map_err(|e| Error::malformed("fingerprint", e))?;
        Ok(Fingerprint(out))
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", self.short(12))
    }
}

impl Serialize for Fingerprint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Fingerprint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// The value model that enters fingerprints.
#[derive(Clone, Debug, PartialEq)]
pub enum CanonicalValue {
    Null,
    Bool(bool),
    Int(i64),
    /// Unsigned integers above `i64::MAX` (seeds, counters).
    UInt(u64),
    Float(f64),
    Text(String),
    List(Vec<CanonicalValue>),
    Map(BTreeMap<String, CanonicalValue>),
    Fp(Fingerprint),
}

impl CanonicalValue {
    pub fn map<K: Into<String>>(entries: impl IntoIterator<Item = (K, CanonicalValue)>) -> Self {
        CanonicalValue::Map(entries.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            CanonicalValue::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, CanonicalValue>> {
        match self {
            CanonicalValue::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        match *self {
            CanonicalValue::Int(i) if i >= 0 => Some(i as u64),
            CanonicalValue::UInt(u) => Some(u),
            _ => None,
        }
    }

    /// Floats come back as `f64:` text after a JSON round trip.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            CanonicalValue::Float(f) => Some(*f),
            CanonicalValue::Text(s) => parse_tagged_float(s),
            _ => None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        canonical_bytes(self)
    }

    /// Canonical bytes as a string (they are always valid UTF-8).
    pub fn to_canonical_string(&self) -> Result<String> {
        Ok(String::from_utf8(canonical_bytes(self)?).expect("canonical bytes are UTF-8"))
    }

    /// Parses JSON text produced by [`canonical_bytes`]. Tagged floats stay
    /// text, which re-serializes to the same bytes.
    pub fn from_json_str(s: &str) -> Result<Self> {
        let json: serde_json::Value =
            serde_json::from_str(s).map_err(|e| Error::malformed("canonical json", e))?;
        Self::from_json(&json)
    }

    pub fn from_json(json: &serde_json::Value) -> Result<Self> {
        Ok(match json {
            serde_json::Value::Null => CanonicalValue::Null,
            serde_json::Value::Bool(b) => CanonicalValue::Bool(*b),
            serde_json::Value::Number(n) => {
                if let Some(i) = n.as_i64() {
                    CanonicalValue::Int(i)
                } else if let Some(u) = n.as_u64() {
                    CanonicalValue::UInt(u)
                } else {
                    return Err(Error::malformed(
                        "canonical json",
                        format!("bare float {n}; floats must be f64-tagged"),
                    ));
                }
            }
            serde_json::Value::String(s) => CanonicalValue::Text(s.clone()),
            serde_json::Value::Array(items) => {
                CanonicalValue::List(items.iter().map(Self::from_json).collect::<Result<_>>()?)
            }
            serde_json::Value::Object(obj) => {
                if obj.len() == 1 {
                    if let Some(serde_json::Value::String(h)) = obj.get("$fp") {
                        return Ok(CanonicalValue::Fp(h.parse()?));
                    }
                }
                CanonicalValue::Map(
                    obj.iter()
                        .map(|(k, v)| Ok((k.clone(), Self::from_json(v)?)))
                        .collect::<Result<_>>()?,
                )
            }
        })
    }
}

impl From<&str> for CanonicalValue {
    fn from(s: &str) -> Self {
        CanonicalValue::Text(s.to_string())
    }
}

impl From<String> for CanonicalValue {
    fn from(s: String) -> Self {
        CanonicalValue::Text(s)
    }
}

impl From<i64> for CanonicalValue {
    fn from(i: i64) -> Self {
        CanonicalValue::Int(i)
    }
}

impl From<u64> for CanonicalValue {
    fn from(u: u64) -> Self {
        match i64::try_from(u) {
            Ok(i) => CanonicalValue::Int(i),
            Err(_) => CanonicalValue::UInt(u),
        }
    }
}

impl From<u32> for CanonicalValue {
    fn from(u: u32) -> Self {
        CanonicalValue::Int(u as i64)
    }
}

impl From<usize> for CanonicalValue {
    fn from(u: usize) -> Self {
        CanonicalValue::from(u as u64)
    }
}

impl From<f64> for CanonicalValue {
    fn from(f: f64) -> Self {
        CanonicalValue::Float(f)
    }
}

impl From<bool> for CanonicalValue {
    fn from(b: bool) -> Self {
        CanonicalValue::Bool(b)
    }
}

impl From<Fingerprint> for CanonicalValue {
    fn from(fp: Fingerprint) -> Self {
        CanonicalValue::Fp(fp)
    }
}

impl<T: Into<CanonicalValue>> From<Option<T>> for CanonicalValue {
    fn from(o: Option<T>) -> Self {
        o.map_or(CanonicalValue::Null, Into::into)
    }
}

impl<T: Into<CanonicalValue>> From<Vec<T>> for CanonicalValue {
    fn from(v: Vec<T>) -> Self {
        CanonicalValue::List(v.into_iter().map(Into::into).collect())
    }
}

pub fn tagged_float(f: f64) -> String {
    format!("f64:{:016x}", f.to_bits())
}

pub fn parse_tagged_float(s: &str) -> Option<f64> {
    let hex = s.strip_prefix("f64:")?;
    if hex.len() != 16 {
        return None;
    }
    u64::from_str_radix(hex, 16).ok().map(f64::from_bits)
}

/// JSON string literal with only `"`, `\` and control characters escaped.
pub(crate) fn write_json_string(out: &mut Vec<u8>, s: &str) {
    out.push(b'"');
    for ch in s.chars() {
        match ch {
            '"' => out.extend_from_slice(b"\\\""),
            '\\' => out.extend_from_slice(b"\\\\"),
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

pub fn canonical_bytes(v: &CanonicalValue) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_canonical(&mut out, v, 0)?;
    Ok(out)
}

fn write_canonical(out: &mut Vec<u8>, v: &CanonicalValue, depth: usize) -> Result<()> {
    match v {
        CanonicalValue::Null => out.extend_from_slice(b"null"),
        CanonicalValue::Bool(true) => out.extend_from_slice(b"true"),
        CanonicalValue::Bool(false) => out.extend_from_slice(b"false"),
        CanonicalValue::Int(i) => out.extend_from_slice(i.to_string().as_bytes()),
        CanonicalValue::UInt(u) => out.extend_from_slice(u.to_string().as_bytes()),
        CanonicalValue::Float(f) => {
            if !f.is_finite() {
                return Err(Error::InvalidValue(format!("non-finite float {f}")));
            }
            write_json_string(out, &tagged_float(*f));
        }
        CanonicalValue::Text(s) => write_json_string(out, s),
        CanonicalValue::Fp(fp) => {
            out.extend_from_slice(b"{\"$fp\":\"");
            out.extend_from_slice(fp.to_hex().as_bytes());
            out.extend_from_slice(b"\"}");
        }
        CanonicalValue::List(items) => {
            check_depth(depth)?;
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(out, item, depth + 1)?;
            }
            out.push(b']');
        }
        CanonicalValue::Map(entries) => {
            check_depth(depth)?;
            out.push(b'{');
            // BTreeMap<String, _> iterates in UTF-8 byte order.
            for (i, (k, item)) in entries.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_json_string(out, k);
                out.push(b':');
                write_canonical(out, item, depth + 1)?;
            }
            out.push(b'}');
        }
    }
    Ok(())
}

fn check_depth(depth: usize) -> Result<()> {
    if depth >= MAX_CANONICAL_DEPTH {
        Err(Error::DepthExceeded(MAX_CANONICAL_DEPTH))
    } else {
        Ok(())
    }
}

/// SHA-256 over the canonical bytes of `node`.
pub fn fingerprint(node: &CanonicalValue) -> Result<Fingerprint> {
    Ok(Fingerprint::of_bytes(&canonical_bytes(node)?))
}

/// The canonical description of a workflow node. The user-visible name is
/// deliberately absent: renaming a step never changes its fingerprint.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeDescriptor {
    pub kind: String,
    pub version: u32,
    pub args: BTreeMap<String, CanonicalValue>,
    pub inputs: Vec<Fingerprint>,
}

impl NodeDescriptor {
    pub fn new(kind: impl Into<String>, version: u32, args: BTreeMap<String, CanonicalValue>, inputs: Vec<Fingerprint>) -> Self {
        NodeDescriptor {
            kind: kind.into(),
            version,
            args,
            inputs,
        }
    }

    pub fn to_canonical(&self) -> CanonicalValue {
        CanonicalValue::map([
            ("kind", CanonicalValue::Text(self.kind.clone())),
            ("name", CanonicalValue::Text(String::new())),
            ("version", CanonicalValue::Int(self.version as i64)),
            ("args", CanonicalValue::Map(self.args.clone())),
            (
                "inputs",
                CanonicalValue::List(self.inputs.iter().copied().map(CanonicalValue::Fp).collect()),
            ),
        ])
    }

    pub fn fingerprint(&self) -> Result<Fingerprint> {
        fingerprint(&self.to_canonical())
    }

    pub fn from_canonical(v: &CanonicalValue) -> Result<Self> {
        let bad = |detail: &str| Error::malformed("node descriptor", detail);
        let map = v.as_map().ok_or_else(|| bad("not a map"))?;
        let kind = map.get("kind").and_then(CanonicalValue::as_str).ok_or_else(|| bad("missing kind"))?;
        let version = map
            .get("version")
            .and_then(CanonicalValue::as_u64)
            .and_then(|v| u32::try_from(v).ok())
            .ok_or_else(|| bad("missing version"))?;
        let args = map.get("args").and_then(CanonicalValue::as_map).ok_or_else(|| bad("missing args"))?;
        let inputs = match map.get("inputs") {
            Some(CanonicalValue::List(items)) => items
                .iter()
                .map(|i| match i {
                    CanonicalValue::Fp(fp) => Ok(*fp),
                    _ => Err(bad("input is not a fingerprint")),
                })
                .collect::<Result<Vec<_>>>()?,
            _ => return Err(bad("missing inputs")),
        };
        Ok(NodeDescriptor::new(kind, version, args.clone(), inputs))
    }

    /// Contents of `fingerprint.json`: canonical JSON plus a trailing newline.
    pub fn fingerprint_file(&self) -> Result<(Fingerprint, Vec<u8>)> {
        let fp = self.fingerprint()?;
        let doc = CanonicalValue::map([
            ("fingerprint", CanonicalValue::Text(fp.to_hex())),
            ("node", self.to_canonical()),
        ]);
        let mut bytes = canonical_bytes(&doc)?;
        bytes.push(b'\n');
        Ok((fp, bytes))
    }

    /// Parses a `fingerprint.json` document, checking that the stored hash
    /// matches the stored node.
    pub fn parse_fingerprint_file(text: &str) -> Result<(Fingerprint, NodeDescriptor)> {
        let doc = CanonicalValue::from_json_str(text)?;
        let map = doc.as_map().ok_or_else(|| Error::malformed("fingerprint.json", "not an object"))?;
        let stored: Fingerprint = map
            .get("fingerprint")
            .and_then(CanonicalValue::as_str)
            .ok_or_else(|| Error::malformed("fingerprint.json", "missing fingerprint"))?
            .parse()?;
        let node = NodeDescriptor::from_canonical(
            map.get("node").ok_or_else(|| Error::malformed("fingerprint.json", "missing node"))?,
        )?;
        let actual = node.fingerprint()?;
        if actual != stored {
            return Err(Error::malformed(
                "fingerprint.json",
                format!("stored {stored} but node hashes to {actual}"),
            ));
        }
        Ok((stored, node))
    }
}

/// Aggregate fingerprint over the terminal nodes of a workflow: nodes that
/// are no other node's input. `nodes` yields each node's fingerprint with
/// its input fingerprints.
pub fn workflow_fingerprint_of<'a, I>(format_version: u32, nodes: I) -> Fingerprint
where
    I: IntoIterator<Item = (Fingerprint, &'a [Fingerprint])>,
{
    let nodes: Vec<(Fingerprint, &[Fingerprint])> = nodes.into_iter().collect();
    let consumed: std::collections::HashSet<Fingerprint> =
        nodes.iter().flat_map(|(_, inputs)| inputs.iter().copied()).collect();
    let mut terminals: Vec<Fingerprint> =
        nodes.iter().map(|(fp, _)| *fp).filter(|fp| !consumed.contains(fp)).collect();
    terminals.sort();
    terminals.dedup();
    let node = NodeDescriptor::new("workflow", format_version, BTreeMap::new(), terminals);
    node.fingerprint().expect("workflow node is always canonicalizable")
}

/// Workflow fingerprint of a live session's completed nodes.
pub fn workflow_fingerprint(session: &crate::Session) -> Fingerprint {
    session.workflow_fingerprint()
}
