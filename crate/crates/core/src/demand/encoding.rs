//! Canonical demand encoding.
//!
//! Compact UTF-8 JSON with a fixed field order:
//! `sig`, `kind`, `payload`, `state`, then for computed demands `result`,
//! `worker_id`, `compute_millis`. Encoding goes through borrowed serde structs
//! (field order = declaration order); decoding walks a `serde_json::Value` so
//! every failure names the field it came from.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use num_bigint::BigInt;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use super::{
    Completion, ContextTag, Demand, DemandError, DemandId, DemandKind, DemandPayload,
    DemandSignature, DemandState, NodeId, ResultValue, SystemCommand,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("malformed demand encoding: {0}")]
    Malformed(String),
    #[error("invalid field `{field}`: {reason}")]
    Field { field: &'static str, reason: String },
}

impl DecodeError {
    /// The offending field, when the failure is attributable to one.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            DecodeError::Field { field, .. } => Some(field),
            DecodeError::Malformed(_) => None,
        }
    }
}

fn field_err(field: &'static str, reason: impl Into<String>) -> DecodeError {
    DecodeError::Field {
        field,
        reason: reason.into(),
    }
}

#[derive(Serialize)]
struct SigOut<'a> {
    id: String,
    origin: &'a str,
    created_at: u64,
}

#[derive(Serialize)]
struct TagOut<'a> {
    dimension: &'a str,
    tag: i64,
}

#[derive(Serialize)]
#[serde(untagged)]
enum PayloadOut<'a> {
    Procedural {
        method: &'a str,
        args: &'a [i64],
    },
    Intensional {
        identifier: &'a str,
        context: Vec<TagOut<'a>>,
    },
    Resource {
        resource_name: &'a str,
    },
    System {
        command: &'static str,
    },
}

#[derive(Serialize)]
#[serde(tag = "t", content = "v", rename_all = "lowercase")]
enum ResultOut<'a> {
    Text(&'a str),
    Int(String),
    Bytes(String),
    Fault(&'a str),
}

#[derive(Serialize)]
struct DemandOut<'a> {
    sig: SigOut<'a>,
    kind: &'static str,
    payload: PayloadOut<'a>,
    state: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<ResultOut<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    worker_id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    compute_millis: Option<u64>,
}

pub(super) fn encode(d: &Demand) -> Vec<u8> {
    let payload = match &d.payload {
        DemandPayload::Procedural { method, args } => PayloadOut::Procedural { method, args },
        DemandPayload::Intensional {
            identifier,
            context,
        } => PayloadOut::Intensional {
            identifier,
            context: context
                .iter()
                .map(|c| TagOut {
                    dimension: &c.dimension,
                    tag: c.tag,
                })
                .collect(),
        },
        DemandPayload::Resource { resource_name } => PayloadOut::Resource { resource_name },
        DemandPayload::System { command } => PayloadOut::System {
            command: command.as_str(),
        },
    };
    let completion = d.completion();
    let out = DemandOut {
        sig: SigOut {
            id: d.signature.id.to_string(),
            origin: d.signature.origin.as_str(),
            created_at: d.signature.created_at,
        },
        kind: d.kind().as_str(),
        payload,
        state: d.lifecycle().as_str(),
        result: completion.map(|c| match &c.result {
            ResultValue::Text(s) => ResultOut::Text(s),
            ResultValue::Integer(i) => ResultOut::Int(i.to_string()),
            ResultValue::Bytes(b) => ResultOut::Bytes(BASE64.encode(b)),
            ResultValue::Fault(s) => ResultOut::Fault(s),
        }),
        worker_id: completion.map(|c| c.worker_id.as_str()),
        compute_millis: completion.map(|c| c.compute_millis),
    };
    serde_json::to_vec(&out).expect("demand encoding cannot fail")
}

struct Obj {
    map: Map<String, Value>,
}

impl Obj {
    fn new(v: Value, field: &'static str) -> Result<Obj, DecodeError> {
        match v {
            Value::Object(map) => Ok(Obj { map }),
            _ => Err(field_err(field, "expected an object")),
        }
    }

    fn take(&mut self, key: &str, field: &'static str) -> Result<Value, DecodeError> {
        self.map
            .remove(key)
            .ok_or_else(|| field_err(field, "missing"))
    }

    fn str(&mut self, key: &str, field: &'static str) -> Result<String, DecodeError> {
        match self.take(key, field)? {
            Value::String(s) => Ok(s),
            _ => Err(field_err(field, "expected a string")),
        }
    }

    fn u64(&mut self, key: &str, field: &'static str) -> Result<u64, DecodeError> {
        self.take(key, field)?
            .as_u64()
            .ok_or_else(|| field_err(field, "expected a non-negative integer"))
    }

    fn finish(self, field: &'static str) -> Result<(), DecodeError> {
        match self.map.keys().next() {
            None => Ok(()),
            Some(k) => Err(field_err(field, format!("unexpected key {k:?}"))),
        }
    }
}

fn as_i64(v: &Value, field: &'static str) -> Result<i64, DecodeError> {
    v.as_i64()
        .ok_or_else(|| field_err(field, "expected a 64-bit integer"))
}

fn node_id(s: String, field: &'static str) -> Result<NodeId, DecodeError> {
    NodeId::new(s).map_err(|e| field_err(field, e.to_string()))
}

fn decode_payload(kind: DemandKind, v: Value) -> Result<DemandPayload, DecodeError> {
    let mut o = Obj::new(v, "payload")?;
    let payload = match kind {
        DemandKind::Procedural => {
            let method = o.str("method", "payload.method")?;
            let args = match o.take("args", "payload.args")? {
                Value::Array(items) => items
                    .iter()
                    .map(|a| as_i64(a, "payload.args"))
                    .collect::<Result<Vec<_>, _>>()?,
                _ => return Err(field_err("payload.args", "expected an array")),
            };
            DemandPayload::Procedural { method, args }
        }
        DemandKind::Intensional => {
            let identifier = o.str("identifier", "payload.identifier")?;
            let context = match o.take("context", "payload.context")? {
                Value::Array(items) => items
                    .into_iter()
                    .map(|item| {
                        let mut t = Obj::new(item, "payload.context")?;
                        let dimension = t.str("dimension", "payload.context")?;
                        let tag = as_i64(&t.take("tag", "payload.context")?, "payload.context")?;
                        t.finish("payload.context")?;
                        Ok(ContextTag { dimension, tag })
                    })
                    .collect::<Result<Vec<_>, DecodeError>>()?,
                _ => return Err(field_err("payload.context", "expected an array")),
            };
            DemandPayload::Intensional {
                identifier,
                context,
            }
        }
        DemandKind::Resource => DemandPayload::Resource {
            resource_name: o.str("resource_name", "payload.resource_name")?,
        },
        DemandKind::System => {
            let cmd = o.str("command", "payload.command")?;
            let command = SystemCommand::parse(&cmd)
                .ok_or_else(|| field_err("payload.command", format!("unknown command {cmd:?}")))?;
            DemandPayload::System { command }
        }
    };
    o.finish("payload")?;
    payload
        .validate()
        .map_err(|e| field_err("payload", e.to_string()))?;
    Ok(payload)
}

fn decode_result(v: Value) -> Result<ResultValue, DecodeError> {
    let mut o = Obj::new(v, "result")?;
    let tag = o.str("t", "result.t")?;
    let value = o.take("v", "result.v")?;
    o.finish("result")?;
    let as_str = |v: Value| match v {
        Value::String(s) => Ok(s),
        _ => Err(field_err("result.v", "expected a string")),
    };
    match tag.as_str() {
        "text" => Ok(ResultValue::Text(as_str(value)?)),
        "fault" => Ok(ResultValue::Fault(as_str(value)?)),
        "int" => {
            let s = as_str(value)?;
            s.parse::<BigInt>()
                .map(ResultValue::Integer)
                .map_err(|_| field_err("result.v", "expected a decimal integer"))
        }
        "bytes" => BASE64
            .decode(as_str(value)?)
            .map(ResultValue::Bytes)
            .map_err(|e| field_err("result.v", format!("bad base64: {e}"))),
        other => Err(field_err(
            "result.t",
            format!("unknown result tag {other:?}"),
        )),
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<Demand, DecodeError> {
    let root: Value =
        serde_json::from_slice(bytes).map_err(|e| DecodeError::Malformed(e.to_string()))?;
    let mut o = Obj::new(root, "demand")?;

    let mut sig = Obj::new(o.take("sig", "sig")?, "sig")?;
    let id_hex = sig.str("id", "sig.id")?;
    let id = DemandId::parse_hex(&id_hex)
        .ok_or_else(|| field_err("sig.id", "expected 32 lowercase hex digits"))?;
    let origin = node_id(sig.str("origin", "sig.origin")?, "sig.origin")?;
    let created_at = sig.u64("created_at", "sig.created_at")?;
    sig.finish("sig")?;
    let signature = DemandSignature {
        id,
        origin,
        created_at,
    };

    let kind_s = o.str("kind", "kind")?;
    let kind = DemandKind::parse(&kind_s)
        .ok_or_else(|| field_err("kind", format!("unknown kind {kind_s:?}")))?;
    let payload = decode_payload(kind, o.take("payload", "payload")?)?;

    let state = match o.str("state", "state")?.as_str() {
        "pending" => {
            for key in ["result", "worker_id", "compute_millis"] {
                if o.map.contains_key(key) {
                    return Err(field_err(key, "must be absent for a pending demand"));
                }
            }
            DemandState::Pending
        }
        "computed" => {
            let result = decode_result(o.take("result", "result")?)?;
            let worker_id = node_id(o.str("worker_id", "worker_id")?, "worker_id")?;
            let compute_millis = o.u64("compute_millis", "compute_millis")?;
            DemandState::Computed(Completion {
                result,
                worker_id,
                compute_millis,
            })
        }
        other => return Err(field_err("state", format!("unknown state {other:?}"))),
    };
    o.finish("demand")?;

    let demand = Demand::pending_with_signature(kind, payload, signature)
        .map_err(|e: DemandError| field_err("payload", e.to_string()))?;
    Ok(Demand { state, ..demand })
}
