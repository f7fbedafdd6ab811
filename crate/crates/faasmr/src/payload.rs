//! The wire envelope delivered to each worker invocation.
//!
//! One canonical JSON codec is used in both directions: the request payload
//! (range + script + token + headers + dataset handle) and the worker's
//! response. Binary fields ride as base64. Field order is fixed by the
//! struct definitions, so encoding is deterministic and two payloads from
//! the same run differ only in their range (and retry attempt) fields.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetDescriptor, EntryRange};
use crate::monitor::ExecutionTrace;

pub const PAYLOAD_VERSION: u32 = 1;

/// Datasets small enough are shipped inline in every payload; larger ones go
/// by manifest reference for the worker to resolve.
pub const INLINE_DATASET_LIMIT: usize = 256 * 1024;

mod b64_bytes {
    use super::*;
    use serde::Deserializer;

    pub fn serialize<S: serde::Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

mod b64_bytes_opt {
    use super::*;
    use serde::Deserializer;

    pub fn serialize<S: serde::Serializer>(v: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(b) => s.serialize_some(&B64.encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let s = Option::<String>::deserialize(d)?;
        match s {
            Some(s) => B64
                .decode(s.as_bytes())
                .map(Some)
                .map_err(serde::de::Error::custom),
            None => Ok(None),
        }
    }
}

/// Auxiliary file shipped to the worker and materialized before execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Header {
    /// Virtual path, relative to the worker scratch directory.
    pub path: String,
    #[serde(with = "b64_bytes")]
    pub content: Vec<u8>,
}

/// How the worker obtains the dataset description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "by", rename_all = "snake_case")]
pub enum DatasetRef {
    Inline { descriptor: DatasetDescriptor },
    /// Path of a manifest file the worker can read (local backend) or that
    /// was pre-registered with its environment.
    Manifest { path: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    /// Normal range execution.
    Work,
    /// Container warmup; runs no user code and stores nothing.
    Warmup,
}

/// The envelope sent to one worker invocation.
///
/// Across the invocations of one run, `range` is the only varying field
/// (retries additionally bump `attempt`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Payload {
    pub version: u32,
    pub kind: PayloadKind,
    pub run_id: String,
    pub attempt: u32,
    pub range: EntryRange,
    /// Mapper script in the graph text format.
    pub script: String,
    #[serde(with = "b64_bytes_opt", skip_serializing_if = "Option::is_none", default)]
    pub token: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub headers: Vec<Header>,
    pub dataset: DatasetRef,
}

impl Payload {
    /// Envelope for one partition attempt. The dataset goes inline unless
    /// its serialized form exceeds [`INLINE_DATASET_LIMIT`]; callers with a
    /// manifest on shared storage pass `manifest_path` for the spill case.
    #[allow(clippy::too_many_arguments)]
    pub fn for_range(
        run_id: &str,
        attempt: u32,
        range: EntryRange,
        script: &str,
        token: Option<&[u8]>,
        headers: &[Header],
        dataset: &DatasetDescriptor,
        manifest_path: Option<&str>,
    ) -> Payload {
        let inline = serde_json::to_vec(dataset).expect("descriptor serializes");
        let dataset = match manifest_path {
            Some(path) if inline.len() > INLINE_DATASET_LIMIT => {
                DatasetRef::Manifest { path: path.to_string() }
            }
            _ => DatasetRef::Inline { descriptor: dataset.clone() },
        };
        Payload {
            version: PAYLOAD_VERSION,
            kind: PayloadKind::Work,
            run_id: run_id.to_string(),
            attempt,
            range,
            script: script.to_string(),
            token: token.map(<[u8]>::to_vec),
            headers: headers.to_vec(),
            dataset,
        }
    }

    pub fn warmup(run_id: &str, index: u32) -> Payload {
        Payload {
            version: PAYLOAD_VERSION,
            kind: PayloadKind::Warmup,
            run_id: run_id.to_string(),
            attempt: 0,
            range: EntryRange { partition_id: index, begin: 0, end: 1, cluster_ids: vec![] },
            script: String::new(),
            token: None,
            headers: Vec::new(),
            dataset: DatasetRef::Inline {
                descriptor: crate::dataset::uniform_dataset(
                    "warmup",
                    crate::dataset::DatasetKind::Synthetic,
                    0,
                    &["c0"],
                    1,
                    1,
                    1,
                    1,
                    false,
                ),
            },
        }
    }

    /// Canonical byte encoding; deterministic for equal payloads.
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("payload serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Payload, DecodeError> {
        let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| DecodeError::Malformed {
            line: e.line(),
            column: e.column(),
            reason: e.to_string(),
        })?;
        let version = value
            .get("version")
            .and_then(serde_json::Value::as_u64)
            .ok_or(DecodeError::MissingVersion)?;
        if version != u64::from(PAYLOAD_VERSION) {
            return Err(DecodeError::Version { got: version, supported: PAYLOAD_VERSION });
        }
        serde_json::from_value(value).map_err(|e| DecodeError::Malformed {
            line: 0,
            column: 0,
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("malformed payload at {line}:{column}: {reason}")]
    Malformed { line: usize, column: usize, reason: String },
    #[error("payload has no version field")]
    MissingVersion,
    #[error("unsupported payload version {got}, supported: {supported}")]
    Version { got: u64, supported: u32 },
}

// ---------------------------------------------------------------------------
// Worker response
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Success,
    Failure,
}

/// Category of a failed attempt, as reported to the client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WorkerErrorKind {
    DecodeError,
    TokenError,
    ParseError,
    TypeError,
    FetchError,
    StoreError,
    Timeout,
    InjectedFault,
    TransportError,
}

impl std::fmt::Display for WorkerErrorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

/// What one invocation sends back. The partial result itself stays in the
/// object store; the response carries only its key plus the monitoring data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerResponse {
    pub status: ResponseStatus,
    pub partition_id: Option<u32>,
    pub attempt: u32,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub result_ref: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error_kind: Option<WorkerErrorKind>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error_message: Option<String>,
    /// Present whenever the worker actually started.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub monitoring: Option<ExecutionTrace>,
}

impl WorkerResponse {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("response serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<WorkerResponse, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    pub fn is_success(&self) -> bool {
        self.status == ResponseStatus::Success
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{uniform_dataset, DatasetKind};

    fn sample_dataset() -> DatasetDescriptor {
        uniform_dataset("p", DatasetKind::Synthetic, 7, &["c0", "c1"], 1, 100, 50, 64, false)
    }

    fn sample_range(pid: u32) -> EntryRange {
        EntryRange { partition_id: pid, begin: 0, end: 50, cluster_ids: vec![(0, 0)] }
    }

    fn sample_payload(pid: u32) -> Payload {
        Payload::for_range(
            "run-1",
            0,
            sample_range(pid),
            "count 0;",
            Some(b"secret"),
            &[Header { path: "helpers.txt".into(), content: b"def sq(a) = a*a;".to_vec() }],
            &sample_dataset(),
            None,
        )
    }

    #[test]
    fn decode_encode_is_identity_on_canonical_bytes() {
        let p = sample_payload(3);
        let bytes = p.encode();
        let back = Payload::decode(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn payloads_differ_only_in_range() {
        let a = sample_payload(1);
        let b = sample_payload(2);
        let mut va: serde_json::Value = serde_json::from_slice(&a.encode()).unwrap();
        let mut vb: serde_json::Value = serde_json::from_slice(&b.encode()).unwrap();
        assert_ne!(va["range"], vb["range"]);
        va.as_object_mut().unwrap().remove("range");
        vb.as_object_mut().unwrap().remove("range");
        assert_eq!(va, vb);
    }

    #[test]
    fn missing_token_omits_the_key() {
        let mut p = sample_payload(0);
        p.token = None;
        let text = String::from_utf8(p.encode()).unwrap();
        assert!(!text.contains("\"token\""));
        let back = Payload::decode(text.as_bytes()).unwrap();
        assert_eq!(back.token, None);
    }

    #[test]
    fn truncated_document_is_decode_error() {
        let bytes = sample_payload(0).encode();
        let err = Payload::decode(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, DecodeError::Malformed { .. }));
    }

    #[test]
    fn unknown_version_rejected() {
        let mut v: serde_json::Value = serde_json::from_slice(&sample_payload(0).encode()).unwrap();
        v["version"] = serde_json::json!(99);
        let err = Payload::decode(v.to_string().as_bytes()).unwrap_err();
        assert_eq!(err, DecodeError::Version { got: 99, supported: 1 });
    }

    #[test]
    fn minimal_payload_defaults_optionals() {
        // Hand-written document without token/headers keys.
        let d = sample_dataset();
        let doc = serde_json::json!({
            "version": 1,
            "kind": "work",
            "run_id": "r",
            "attempt": 0,
            "range": { "partition_id": 0, "begin": 0, "end": 50, "cluster_ids": [[0, 0]] },
            "script": "count 0;",
            "dataset": { "by": "inline", "descriptor": serde_json::to_value(&d).unwrap() },
        });
        let p = Payload::decode(doc.to_string().as_bytes()).unwrap();
        assert_eq!(p.token, None);
        assert!(p.headers.is_empty());
        assert_eq!(p.script, "count 0;");
    }

    #[test]
    fn large_dataset_spills_to_manifest_reference() {
        let d = uniform_dataset("big", DatasetKind::Synthetic, 1, &["c0"], 64, 200_000, 50, 8, false);
        assert!(serde_json::to_vec(&d).unwrap().len() > INLINE_DATASET_LIMIT);
        let p = Payload::for_range(
            "r",
            0,
            sample_range(0),
            "count 0;",
            None,
            &[],
            &d,
            Some("/data/big.manifest.json"),
        );
        assert_eq!(p.dataset, DatasetRef::Manifest { path: "/data/big.manifest.json".into() });
        // Without a manifest path the descriptor stays inline regardless.
        let q = Payload::for_range("r", 0, sample_range(0), "count 0;", None, &[], &d, None);
        assert!(matches!(q.dataset, DatasetRef::Inline { .. }));
    }

    #[test]
    fn response_round_trip() {
        let r = WorkerResponse {
            status: ResponseStatus::Failure,
            partition_id: Some(4),
            attempt: 2,
            result_ref: None,
            error_kind: Some(WorkerErrorKind::FetchError),
            error_message: Some("boom".into()),
            monitoring: None,
        };
        assert_eq!(WorkerResponse::decode(&r.encode()).unwrap(), r);
    }
}
