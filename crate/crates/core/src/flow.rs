//! Flow records: one captured outbound request per line of newline-delimited
//! JSON, and the key/value view used to tabularise them.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::net::Ipv4Addr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, RecordError, RecordErrorKind, Result};

pub const FIXED_FIELDS: [&str; 4] = ["domain", "dst_port", "method", "uri_path"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub app_id: String,
    pub domain: String,
    pub dst_ip: String,
    pub dst_port: u16,
    pub method: String,
    pub uri: String,
    pub headers: IndexMap<String, String>,
    pub body_kv: IndexMap<String, String>,
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pii_types: Option<BTreeSet<String>>,
}

impl FlowRecord {
    pub fn is_leak(&self) -> bool {
        self.label.unwrap_or(false)
    }

    pub fn type_set(&self) -> BTreeSet<String> {
        self.pii_types.clone().unwrap_or_default()
    }

    fn validate(&self) -> std::result::Result<(), (RecordErrorKind, String)> {
        if !self.dst_ip.is_empty() && self.dst_ip.parse::<Ipv4Addr>().is_err() {
            return Err((
                RecordErrorKind::InvalidField,
                format!("dst_ip {:?} is not a dotted quad", self.dst_ip),
            ));
        }
        if self
            .headers
            .keys()
            .chain(self.body_kv.keys())
            .any(|k| k.is_empty())
        {
            return Err((
                RecordErrorKind::InvalidField,
                "empty header or body key".into(),
            ));
        }
        if self.label == Some(false) && self.pii_types.as_ref().is_some_and(|t| !t.is_empty()) {
            return Err((
                RecordErrorKind::InvalidField,
                "pii_types present on a non-leak record".into(),
            ));
        }
        Ok(())
    }
}

/// Same shape as [`FlowRecord`] but with a wide port type so that range
/// violations are reported as such rather than as a type error.
#[derive(Deserialize)]
struct WireRecord {
    app_id: String,
    domain: String,
    dst_ip: String,
    dst_port: i64,
    method: String,
    uri: String,
    headers: IndexMap<String, String>,
    body_kv: IndexMap<String, String>,
    timestamp_ms: u64,
    #[serde(default)]
    label: Option<bool>,
    #[serde(default)]
    pii_types: Option<BTreeSet<String>>,
}

fn parse_line(line: &str) -> std::result::Result<FlowRecord, (RecordErrorKind, String)> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| (RecordErrorKind::Syntax, e.to_string()))?;
    let wire: WireRecord = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        let kind = if msg.starts_with("missing field") {
            RecordErrorKind::MissingField
        } else {
            RecordErrorKind::InvalidField
        };
        (kind, msg)
    })?;
    if !(0..=65535).contains(&wire.dst_port) {
        return Err((
            RecordErrorKind::PortOutOfRange,
            format!("port out of range: {}", wire.dst_port),
        ));
    }
    let record = FlowRecord {
        app_id: wire.app_id,
        domain: wire.domain,
        dst_ip: wire.dst_ip,
        dst_port: wire.dst_port as u16,
        method: wire.method,
        uri: wire.uri,
        headers: wire.headers,
        body_kv: wire.body_kv,
        timestamp_ms: wire.timestamp_ms,
        label: wire.label,
        pii_types: wire.pii_types,
    };
    record.validate()?;
    Ok(record)
}

/// Parses newline-delimited JSON records. Blank lines are skipped; every
/// invalid line is reported with its 1-based line number.
pub fn parse_flow_stream<R: BufRead>(source: R) -> Result<Vec<FlowRecord>> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(&line) {
            Ok(r) => records.push(r),
            Err((kind, message)) => errors.push(RecordError {
                line: i + 1,
                kind,
                message,
            }),
        }
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(Error::Records(errors))
    }
}

pub fn write_records<W: Write>(records: &[FlowRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Splits a URI into its path and `key=value` query pairs. Segments without
/// `=` or with an empty key are dropped.
pub fn split_uri(uri: &str) -> (&str, Vec<(&str, &str)>) {
    let (path, query) = match uri.split_once('?') {
        Some((p, q)) => (p, q),
        None => (uri, ""),
    };
    let pairs = query
        .split('&')
        .filter_map(|seg| seg.split_once('='))
        .filter(|(k, _)| !k.is_empty())
        .collect();
    (path, pairs)
}

/// Flattens a record into one ordered key/value map: the fixed fields first,
/// then query (`q.`), header (`h.`) and body (`b.`) entries.
pub fn extract_key_values(record: &FlowRecord) -> IndexMap<String, String> {
    let mut kv = IndexMap::new();
    let (path, query) = split_uri(&record.uri);
    kv.insert("domain".to_string(), record.domain.clone());
    kv.insert("dst_port".to_string(), record.dst_port.to_string());
    kv.insert("method".to_string(), record.method.clone());
    kv.insert("uri_path".to_string(), path.to_string());
    for (k, v) in query {
        kv.entry(format!("q.{k}")).or_insert_with(|| v.to_string());
    }
    for (k, v) in &record.headers {
        kv.insert(format!("h.{k}"), v.clone());
    }
    for (k, v) in &record.body_kv {
        kv.insert(format!("b.{k}"), v.clone());
    }
    kv
}
