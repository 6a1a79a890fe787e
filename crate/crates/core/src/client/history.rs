use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ModelSpec, ParamVector};

/// Where a selection candidate came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateSource {
    /// The model a fine-tuning run started from.
    Initial,
    /// A client's model right after its local epoch.
    LocalIntermediate,
    /// The server's model after aggregating a round.
    GlobalAfterAggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub round: u32,
    /// `None` when kappa is undefined on the validation split.
    pub val_kappa: Option<f64>,
    pub params_digest: String,
    pub source: CandidateSource,
}

/// Candidate models in the order they were produced.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn push(&mut self, record: HistoryRecord) {
        self.records.push(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index of the record with the highest validation kappa; the earliest
    /// record wins ties and undefined kappas rank last.
    pub fn best_index(&self) -> Option<usize> {
        let key = |r: &HistoryRecord| r.val_kappa.unwrap_or(f64::NEG_INFINITY);
        let mut best: Option<usize> = None;
        for (i, r) in self.records.iter().enumerate() {
            if best.is_none_or(|b| key(r) > key(&self.records[b])) {
                best = Some(i);
            }
        }
        best
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Malformed(format!("history line: {e}"))))
            .collect::<Result<_>>()?;
        Ok(TrainHistory { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }
}

/// Parameter vectors addressed by digest, in memory and optionally on disk
/// as `<dir>/<digest>.fkpv`.
#[derive(Debug, Clone, Default)]
pub struct CheckpointStore {
    dir: Option<PathBuf>,
    models: BTreeMap<String, ParamVector>,
}

impl CheckpointStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(CheckpointStore {
            dir: Some(dir.to_path_buf()),
            models: BTreeMap::new(),
        })
    }

    pub fn path_for(&self, digest: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{digest}.fkpv")))
    }

    pub fn put(&mut self, params: &ParamVector) -> Result<String> {
        let digest = params.digest();
        if !self.models.contains_key(&digest) {
            if let Some(path) = self.path_for(&digest) {
                params.save(&path)?;
            }
            self.models.insert(digest.clone(), params.clone());
        }
        Ok(digest)
    }

    pub fn get(&self, digest: &str) -> Result<ParamVector> {
        if let Some(p) = self.models.get(digest) {
            return Ok(p.clone());
        }
        match self.path_for(digest) {
            Some(path) => ParamVector::load(&path),
            None => Err(Error::Malformed(format!("no checkpoint with digest {digest}"))),
        }
    }

    /// Drops the in-memory copies; disk-backed stores reload on demand.
    pub fn release_memory(&mut self) {
        if self.dir.is_some() {
            self.models.clear();
        }
    }
}

/// The validation-best candidate of `history`.
pub fn select_best_model(
    history: &TrainHistory,
    store: &CheckpointStore,
    spec: &ModelSpec,
) -> Result<(ParamVector, u32, Option<f64>)> {
    let i = history.best_index().ok_or(Error::NoCandidates)?;
    let r = &history.records[i];
    let params = store.get(&r.params_digest)?;
    params.check(spec)?;
    Ok((params, r.round, r.val_kappa))
}

/// Appends one line to a JSON-lines file.
pub(crate) fn append_jsonl<T: Serialize>(file: &mut std::fs::File, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).expect("record serializes");
    writeln!(file, "{line}").map_err(|e| Error::io(path, e))
}
