use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Composition, Origin, Stream, StreamKind, StreamSpec};
use crate::error::{CsadError, Result};
use crate::scalar::Scalar;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperienceManifest {
    #[serde(flatten)]
    pub counts: Composition,
    pub gamma_hat: f64,
    pub zeta_hat: f64,
    pub labelled: Vec<Origin>,
    pub unlabelled: Vec<Origin>,
}

/// JSON description of a built stream: spec echo, per-experience counts and
/// sample provenance, and a hash over all of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamManifest {
    pub schema_version: u32,
    pub kind: StreamKind,
    pub spec: StreamSpec,
    pub dataset_hash: String,
    pub experiences: Vec<ExperienceManifest>,
    pub notes: Vec<String>,
    pub content_hash: String,
}

impl StreamManifest {
    pub fn of<A: Scalar>(stream: &Stream<A>) -> Self {
        let experiences = stream
            .experiences
            .iter()
            .map(|e| {
                let counts = Composition::of(e);
                ExperienceManifest {
                    gamma_hat: counts.gamma_hat(),
                    zeta_hat: counts.zeta_hat(),
                    counts,
                    labelled: e.labelled_origin().to_vec(),
                    unlabelled: e.unlabelled_origin().to_vec(),
                }
            })
            .collect();
        let mut m = Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            kind: stream.kind,
            spec: stream.spec.clone(),
            dataset_hash: stream.dataset_hash.clone(),
            experiences,
            notes: stream.notes.clone(),
            content_hash: String::new(),
        };
        m.content_hash = m.compute_hash();
        m
    }

    fn compute_hash(&self) -> String {
        let mut unhashed = self.clone();
        unhashed.content_hash.clear();
        let bytes = serde_json::to_vec(&unhashed).expect("manifest serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn verify_hash(&self) -> bool {
        self.compute_hash() == self.content_hash
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CsadError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CsadError::format(path.display().to_string(), e.to_string()))
    }
}
