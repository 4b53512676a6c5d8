//! Demands: the unit of work that migrates between generators and workers.
//!
//! A demand is created `Pending` by a generator, taken by exactly one worker,
//! and turned into a `Computed` demand carrying a [`ResultValue`]. The
//! signature is fixed at creation and is the only correlation key between the
//! two states.

mod encoding;

use std::collections::HashSet;
use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use num_bigint::BigInt;
use thiserror::Error;

pub use encoding::DecodeError;

/// Registered procedure names and their arity.
///
/// A procedural demand is only constructible for one of these.
pub const PROCEDURES: &[(&str, usize)] = &[("pi_digits", 1)];

/// Looks up the arity of a registered procedure.
pub fn procedure_arity(method: &str) -> Option<usize> {
    PROCEDURES
        .iter()
        .find(|(name, _)| *name == method)
        .map(|(_, arity)| *arity)
}

/// Milliseconds since the Unix epoch from the local clock.
pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Identifier of a generator or worker node. Never empty.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Result<Self, DemandError> {
        let id = id.into();
        if id.is_empty() {
            return Err(DemandError::EmptyNodeId);
        }
        Ok(NodeId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// 128-bit demand identifier, rendered as 32 lowercase hex characters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DemandId(u128);

impl DemandId {
    pub fn random() -> Self {
        DemandId(uuid::Uuid::new_v4().as_u128())
    }

    pub fn from_u128(v: u128) -> Self {
        DemandId(v)
    }

    pub fn as_u128(self) -> u128 {
        self.0
    }

    /// Parses exactly 32 lowercase hex digits.
    pub fn parse_hex(s: &str) -> Option<Self> {
        if s.len() != 32 || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return None;
        }
        u128::from_str_radix(s, 16).ok().map(DemandId)
    }
}

impl fmt::Display for DemandId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

/// Identity of a demand: stays the same across Pending → Computed.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DemandSignature {
    pub id: DemandId,
    pub origin: NodeId,
    pub created_at: u64,
}

impl DemandSignature {
    pub fn fresh(origin: NodeId) -> Self {
        DemandSignature {
            id: DemandId::random(),
            origin,
            created_at: now_millis(),
        }
    }
}

impl fmt::Display for DemandSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.id, self.origin)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DemandKind {
    Procedural,
    Intensional,
    Resource,
    System,
}

impl DemandKind {
    pub const ALL: [DemandKind; 4] = [
        DemandKind::Procedural,
        DemandKind::Intensional,
        DemandKind::Resource,
        DemandKind::System,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DemandKind::Procedural => "procedural",
            DemandKind::Intensional => "intensional",
            DemandKind::Resource => "resource",
            DemandKind::System => "system",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        DemandKind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

impl fmt::Display for DemandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SystemCommand {
    Ping,
    Shutdown,
    ReportStats,
}

impl SystemCommand {
    pub fn as_str(self) -> &'static str {
        match self {
            SystemCommand::Ping => "ping",
            SystemCommand::Shutdown => "shutdown",
            SystemCommand::ReportStats => "report_stats",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            SystemCommand::Ping,
            SystemCommand::Shutdown,
            SystemCommand::ReportStats,
        ]
        .into_iter()
        .find(|c| c.as_str() == s)
    }
}

/// One `(dimension, tag)` coordinate of an intensional context.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ContextTag {
    pub dimension: String,
    pub tag: i64,
}

impl ContextTag {
    pub fn new(dimension: impl Into<String>, tag: i64) -> Self {
        ContextTag {
            dimension: dimension.into(),
            tag,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum DemandPayload {
    Procedural {
        method: String,
        args: Vec<i64>,
    },
    Intensional {
        identifier: String,
        context: Vec<ContextTag>,
    },
    Resource {
        resource_name: String,
    },
    System {
        command: SystemCommand,
    },
}

impl DemandPayload {
    pub fn pi_digits(n: i64) -> Self {
        DemandPayload::Procedural {
            method: "pi_digits".to_string(),
            args: vec![n],
        }
    }

    pub fn system(command: SystemCommand) -> Self {
        DemandPayload::System { command }
    }

    pub fn kind(&self) -> DemandKind {
        match self {
            DemandPayload::Procedural { .. } => DemandKind::Procedural,
            DemandPayload::Intensional { .. } => DemandKind::Intensional,
            DemandPayload::Resource { .. } => DemandKind::Resource,
            DemandPayload::System { .. } => DemandKind::System,
        }
    }

    /// Checks the payload-level invariants.
    pub fn validate(&self) -> Result<(), DemandError> {
        match self {
            DemandPayload::Procedural { method, args } => match procedure_arity(method) {
                None => Err(DemandError::UnknownProcedure(method.clone())),
                Some(arity) if arity != args.len() => Err(DemandError::Arity {
                    method: method.clone(),
                    expected: arity,
                    got: args.len(),
                }),
                Some(_) => Ok(()),
            },
            DemandPayload::Intensional { context, .. } => {
                let mut seen = HashSet::new();
                for c in context {
                    if !seen.insert(c.dimension.as_str()) {
                        return Err(DemandError::DuplicateDimension(c.dimension.clone()));
                    }
                }
                Ok(())
            }
            DemandPayload::Resource { .. } | DemandPayload::System { .. } => Ok(()),
        }
    }
}

/// Outcome of evaluating a demand.
///
/// `Fault` is a computed outcome (the evaluation failed on the worker), not a
/// transport failure.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum ResultValue {
    Text(String),
    Integer(BigInt),
    Bytes(Vec<u8>),
    Fault(String),
}

impl ResultValue {
    pub fn text(s: impl Into<String>) -> Self {
        ResultValue::Text(s.into())
    }

    pub fn fault(s: impl Into<String>) -> Self {
        ResultValue::Fault(s.into())
    }

    pub fn is_fault(&self) -> bool {
        matches!(self, ResultValue::Fault(_))
    }
}

/// Result fields carried only by computed demands.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Completion {
    pub result: ResultValue,
    pub worker_id: NodeId,
    pub compute_millis: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum DemandState {
    Pending,
    Computed(Completion),
}

/// The two lifecycle states without their data, used for indexing and
/// template matching.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Lifecycle {
    Pending,
    Computed,
}

impl Lifecycle {
    pub fn as_str(self) -> &'static str {
        match self {
            Lifecycle::Pending => "pending",
            Lifecycle::Computed => "computed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pending" => Some(Lifecycle::Pending),
            "computed" => Some(Lifecycle::Computed),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DemandError {
    #[error("node id must be non-empty")]
    EmptyNodeId,
    #[error("payload of kind {payload} does not match demand kind {kind}")]
    KindMismatch {
        kind: DemandKind,
        payload: DemandKind,
    },
    #[error("unknown procedure {0:?}")]
    UnknownProcedure(String),
    #[error("arity mismatch for {method}: expected {expected} argument(s), got {got}")]
    Arity {
        method: String,
        expected: usize,
        got: usize,
    },
    #[error("duplicate context dimension {0:?}")]
    DuplicateDimension(String),
    #[error("demand {0} is already computed")]
    AlreadyComputed(DemandId),
    #[error("demand {0} is still pending")]
    NotComputed(DemandId),
}

/// A demand in either lifecycle state. The state carries the result fields,
/// so "result present iff computed" holds by construction.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Demand {
    signature: DemandSignature,
    payload: DemandPayload,
    state: DemandState,
}

impl Demand {
    /// Creates a pending demand with a fresh signature.
    pub fn new_pending(
        kind: DemandKind,
        payload: DemandPayload,
        origin: NodeId,
    ) -> Result<Demand, DemandError> {
        Demand::pending_with_signature(kind, payload, DemandSignature::fresh(origin))
    }

    /// Like [`Demand::new_pending`] with a caller-chosen signature.
    pub fn pending_with_signature(
        kind: DemandKind,
        payload: DemandPayload,
        signature: DemandSignature,
    ) -> Result<Demand, DemandError> {
        if payload.kind() != kind {
            return Err(DemandError::KindMismatch {
                kind,
                payload: payload.kind(),
            });
        }
        payload.validate()?;
        Ok(Demand {
            signature,
            payload,
            state: DemandState::Pending,
        })
    }

    /// Attaches a result. The signature, kind and payload are carried over
    /// unchanged.
    pub fn into_computed(
        self,
        result: ResultValue,
        worker_id: NodeId,
        compute_millis: u64,
    ) -> Result<Demand, DemandError> {
        if let DemandState::Computed(_) = self.state {
            return Err(DemandError::AlreadyComputed(self.signature.id));
        }
        Ok(Demand {
            state: DemandState::Computed(Completion {
                result,
                worker_id,
                compute_millis,
            }),
            ..self
        })
    }

    pub fn signature(&self) -> &DemandSignature {
        &self.signature
    }

    pub fn id(&self) -> DemandId {
        self.signature.id
    }

    pub fn kind(&self) -> DemandKind {
        self.payload.kind()
    }

    pub fn payload(&self) -> &DemandPayload {
        &self.payload
    }

    pub fn state(&self) -> &DemandState {
        &self.state
    }

    pub fn lifecycle(&self) -> Lifecycle {
        match self.state {
            DemandState::Pending => Lifecycle::Pending,
            DemandState::Computed(_) => Lifecycle::Computed,
        }
    }

    pub fn is_pending(&self) -> bool {
        self.lifecycle() == Lifecycle::Pending
    }

    pub fn completion(&self) -> Option<&Completion> {
        match &self.state {
            DemandState::Pending => None,
            DemandState::Computed(c) => Some(c),
        }
    }

    pub fn result(&self) -> Option<&ResultValue> {
        self.completion().map(|c| &c.result)
    }

    /// Canonical wire and persistence encoding.
    pub fn serialize(&self) -> Vec<u8> {
        encoding::encode(self)
    }

    /// Canonical encoding as a string; the encoding is always UTF-8.
    pub fn to_canonical_string(&self) -> String {
        String::from_utf8(self.serialize()).expect("canonical encoding is UTF-8")
    }

    pub fn deserialize(bytes: &[u8]) -> Result<Demand, DecodeError> {
        encoding::decode(bytes)
    }
}
