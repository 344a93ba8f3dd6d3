//! Resumable stages. Each stage owns a directory under the run directory and
//! leaves a `stage.json` naming the hash of its inputs and the hash of every
//! file it wrote. A later run skips the stage when both still match.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use forgetedit::{Error, Result};

pub const STAGE_FILE: &str = "stage.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a list of labelled parts; order matters.
pub fn hash_parts(parts: &[(&str, String)]) -> String {
    let mut h = Sha256::new();
    for (label, value) in parts {
        h.update(label.as_bytes());
        h.update([0u8]);
        h.update(value.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

pub fn json_of<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("configuration types serialize")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Directory relative to the run directory.
    pub dir: PathBuf,
    pub input_hash: String,
    /// File path relative to the run directory → sha256.
    pub files: BTreeMap<PathBuf, String>,
    /// Wall-clock seconds of the run that produced the stage.
    pub seconds: f64,
    /// True when this run reused the stage instead of producing it.
    #[serde(default)]
    pub resumed: bool,
}

impl StageRecord {
    /// Re-hash every listed file.
    pub fn verify(&self, root: &Path) -> Result<()> {
        for (rel, expected) in &self.files {
            let path = root.join(rel);
            if !path.exists() {
                return Err(Error::ResumeMismatch(format!("stage {}: missing file {}", self.name, rel.display())));
            }
            if &hash_file(&path)? != expected {
                return Err(Error::ResumeMismatch(format!("stage {}: file {} changed", self.name, rel.display())));
            }
        }
        Ok(())
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != STAGE_FILE) {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

fn read_record(path: &Path) -> Result<StageRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        reason: e.to_string(),
    })
}

/// Run `produce` in `root/dir` unless a matching earlier result exists.
///
/// A stage left by different inputs, or whose files changed since, is an
/// error unless `force` is set, in which case it is rebuilt.
pub fn run_stage<F>(root: &Path, name: &str, dir: &Path, input_hash: &str, force: bool, produce: F) -> Result<StageRecord>
where
    F: FnOnce(&Path) -> Result<()>,
{
    let abs = root.join(dir);
    let record_path = abs.join(STAGE_FILE);
    if record_path.exists() {
        let check = read_record(&record_path).and_then(|rec| {
            if rec.input_hash != input_hash {
                Err(Error::ResumeMismatch(format!(
                    "stage {name} in {} was produced from different inputs; rerun with --force to rebuild it",
                    abs.display()
                )))
            } else {
                rec.verify(root).map(|_| rec)
            }
        });
        match check {
            Ok(mut rec) => {
                log::info!("stage {name}: up to date, skipped");
                rec.resumed = true;
                return Ok(rec);
            }
            Err(e) if !force => return Err(e),
            Err(e) => log::warn!("stage {name}: rebuilding ({e})"),
        }
    }
    if abs.exists() {
        fs::remove_dir_all(&abs).map_err(|e| Error::io(&abs, e))?;
    }
    fs::create_dir_all(&abs).map_err(|e| Error::io(&abs, e))?;
    log::info!("stage {name}: running");
    let t = Instant::now();
    produce(&abs).map_err(|e| Error::stage(name, e))?;
    let seconds = t.elapsed().as_secs_f64();
    let mut rels = Vec::new();
    collect_files(root, &abs, &mut rels)?;
    let files = rels
        .into_iter()
        .map(|rel| {
            let h = hash_file(&root.join(&rel))?;
            Ok((rel, h))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let rec = StageRecord {
        name: name.to_string(),
        dir: dir.to_path_buf(),
        input_hash: input_hash.to_string(),
        files,
        seconds,
        resumed: false,
    };
    let json = serde_json::to_string_pretty(&rec)?;
    fs::write(&record_path, json).map_err(|e| Error::io(&record_path, e))?;
    log::info!("stage {name}: done in {seconds:.1}s");
    Ok(rec)
}
