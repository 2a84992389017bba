//! Database of child-model training experiments.
//!
//! Stored as JSON lines: a header object carrying the arch-space
//! fingerprint, then one [`ExperimentRecord`] per line.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::child::{ArchEncoding, ArchFingerprint, ArchSpace, PerfBackend};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::tasks::TaskDataset;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecord {
    pub task_id: String,
    pub encoding: Vec<f64>,
    pub performance: f64,
    pub seed: u64,
    pub backend: String,
    pub created_at: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    arch_space: ArchFingerprint,
}

/// Records grouped by task, insertion order preserved within a task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentDB {
    fingerprint: Option<ArchFingerprint>,
    records: BTreeMap<String, Vec<ExperimentRecord>>,
}

fn encoding_dim(fp: &ArchFingerprint) -> usize {
    fp.feature_modules + fp.layers * fp.base_count + 2 * fp.layers
}

impl ExperimentDB {
    pub fn new(fingerprint: ArchFingerprint) -> Self {
        ExperimentDB {
            fingerprint: Some(fingerprint),
            records: BTreeMap::new(),
        }
    }

    pub fn fingerprint(&self) -> Option<&ArchFingerprint> {
        self.fingerprint.as_ref()
    }

    pub fn insert(&mut self, record: ExperimentRecord) -> Result<()> {
        let fp = self
            .fingerprint
            .as_ref()
            .ok_or_else(|| Error::invalid("database has no arch-space fingerprint"))?;
        if record.encoding.len() != encoding_dim(fp) {
            return Err(Error::shape(
                "ExperimentDB::insert",
                format!(
                    "encoding of length {} for arch space {fp}",
                    record.encoding.len()
                ),
            ));
        }
        if !(0.0..=1.0).contains(&record.performance) {
            return Err(Error::invalid(format!(
                "performance {} outside [0, 1]",
                record.performance
            )));
        }
        if !record.encoding.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite encoding"));
        }
        self.records
            .entry(record.task_id.clone())
            .or_default()
            .push(record);
        Ok(())
    }

    pub fn task_ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn contains_task(&self, task_id: &str) -> bool {
        self.records.contains_key(task_id)
    }

    pub fn records(&self, task_id: &str) -> Result<&[ExperimentRecord]> {
        self.records
            .get(task_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &ExperimentRecord> {
        self.records.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.records.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy of the database with one task's records removed.
    pub fn without_task(&self, task_id: &str) -> ExperimentDB {
        let mut out = self.clone();
        out.records.remove(task_id);
        out
    }

    pub fn check_fingerprint(&self, expected: &ArchFingerprint) -> Result<()> {
        match &self.fingerprint {
            Some(fp) if fp != expected => Err(Error::FingerprintMismatch {
                expected: expected.to_string(),
                found: fp.to_string(),
            }),
            _ => Ok(()),
        }
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let fp = self
            .fingerprint
            .clone()
            .ok_or_else(|| Error::invalid("cannot save a database without fingerprint"))?;
        serde_json::to_writer(
            &mut out,
            &Header {
                version: FORMAT_VERSION,
                arch_space: fp,
            },
        )?;
        out.write_all(b"\n")?;
        for r in self.iter() {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Parses a JSON-lines database. An empty input yields an empty DB.
    pub fn read_jsonl(
        input: impl BufRead,
        path: &Path,
        expected: Option<&ArchFingerprint>,
    ) -> Result<ExperimentDB> {
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut db = ExperimentDB {
            fingerprint: expected.cloned(),
            records: BTreeMap::new(),
        };
        let mut saw_header = false;
        for (k, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = k + 1;
            if line.trim().is_empty() {
                continue;
            }
            if !saw_header {
                let h: Header =
                    serde_json::from_str(&line).map_err(|e| parse_err(lineno, format!("header: {e}")))?;
                if h.version != FORMAT_VERSION {
                    return Err(parse_err(lineno, format!("unsupported version {}", h.version)));
                }
                if let Some(exp) = expected {
                    if *exp != h.arch_space {
                        return Err(Error::FingerprintMismatch {
                            expected: exp.to_string(),
                            found: h.arch_space.to_string(),
                        });
                    }
                }
                db.fingerprint = Some(h.arch_space);
                saw_header = true;
                continue;
            }
            let rec: ExperimentRecord =
                serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
            db.insert(rec).map_err(|e| parse_err(lineno, e.to_string()))?;
        }
        Ok(db)
    }

    pub fn load(path: &Path, expected: Option<&ArchFingerprint>) -> Result<ExperimentDB> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        ExperimentDB::read_jsonl(f, path, expected)
    }
}

/// Draws `n_per_task` random encodings per task (i.i.d. N(0,1) logits) and
/// measures each with `backend`. Measurements run in parallel; each has its
/// own derived seed, so the result does not depend on scheduling.
pub fn populate(
    tasks: &[TaskDataset],
    arch: &ArchSpace,
    backend: &PerfBackend,
    n_per_task: usize,
    seed: u64,
) -> Result<ExperimentDB> {
    if n_per_task < 2 {
        return Err(Error::invalid("need at least 2 records per task"));
    }
    let mut db = ExperimentDB::new(arch.fingerprint());
    for task in tasks {
        let label = seed::label(task.task_id());
        let mut rng = seed::rng_from(seed, &[0xdb, label]);
        let jobs: Vec<(ArchEncoding, u64)> = (0..n_per_task as u64)
            .map(|k| {
                (
                    ArchEncoding::random(arch, &mut rng),
                    seed::derive_seed(seed, &[0xdb5eed, label, k]),
                )
            })
            .collect();
        let measured: Vec<Result<f64>> = jobs
            .par_iter()
            .map(|(enc, s)| backend.measure(enc, task, *s))
            .collect();
        let created_at = chrono::Utc::now().to_rfc3339();
        let mut survivors = 0;
        for ((enc, s), p) in jobs.into_iter().zip(measured) {
            match p {
                Ok(p) => {
                    db.insert(ExperimentRecord {
                        task_id: task.task_id().to_string(),
                        encoding: enc.flatten(),
                        performance: p,
                        seed: s,
                        backend: backend.name().to_string(),
                        created_at: created_at.clone(),
                    })?;
                    survivors += 1;
                }
                Err(e) => log::warn!("skipping record for {}: {e}", task.task_id()),
            }
        }
        if survivors < 2 {
            return Err(Error::DegenerateTask {
                task: task.task_id().to_string(),
                reason: format!("only {survivors} successful measurements"),
            });
        }
    }
    Ok(db)
}

/// Uniform sample without replacement of one task's records; all of them
/// (shuffled) when the task has fewer than `batch_size`.
pub fn batch_for_task<'a>(
    db: &'a ExperimentDB,
    task_id: &str,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<&'a ExperimentRecord>> {
    let recs = db.records(task_id)?;
    let k = batch_size.min(recs.len());
    Ok(index::sample(rng, recs.len(), k)
        .into_iter()
        .map(|i| &recs[i])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::child::{AnalyticBackend, SurrogateConfig};
    use crate::tasks::{generate_tasks, TaskFamilyConfig};
    use rand::SeedableRng;

    fn setup(k: usize, noise: f64) -> (Vec<TaskDataset>, ArchSpace, PerfBackend) {
        let tasks = generate_tasks(&TaskFamilyConfig {
            num_tasks: k,
            seed: 1,
            ..TaskFamilyConfig::default()
        })
        .unwrap();
        let arch = ArchSpace::desk();
        let cfg = SurrogateConfig {
            noise_sigma: noise,
            ..SurrogateConfig::default()
        };
        let b = AnalyticBackend::for_tasks(&tasks, &arch, &cfg, 2).unwrap();
        (tasks, arch, PerfBackend::Analytic(b))
    }

    #[test]
    fn two_records_are_distinct() {
        let (tasks, arch, backend) = setup(1, 0.01);
        let db = populate(&tasks, &arch, &backend, 2, 3).unwrap();
        assert_eq!(db.len(), 2);
        let r = db.records("task-00").unwrap();
        assert_ne!(r[0].encoding, r[1].encoding);
        assert!(populate(&tasks, &arch, &backend, 1, 3).is_err());
    }

    #[test]
    fn noiseless_population_is_deterministic() {
        let (tasks, arch, backend) = setup(2, 0.0);
        let a = populate(&tasks, &arch, &backend, 20, 8).unwrap();
        let b = populate(&tasks, &arch, &backend, 20, 8).unwrap();
        let pa: Vec<u64> = a.iter().map(|r| r.performance.to_bits()).collect();
        let pb: Vec<u64> = b.iter().map(|r| r.performance.to_bits()).collect();
        assert_eq!(pa, pb);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let (tasks, arch, backend) = setup(2, 0.01);
        let db = populate(&tasks, &arch, &backend, 10, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.jsonl");
        db.save(&path).unwrap();
        let back = ExperimentDB::load(&path, Some(&arch.fingerprint())).unwrap();
        assert_eq!(back, db);
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let (tasks, arch, backend) = setup(1, 0.01);
        let db = populate(&tasks, &arch, &backend, 3, 4).unwrap();
        let mut buf = Vec::new();
        db.write_jsonl(&mut buf).unwrap();
        let other = ArchSpace::paper_shape().fingerprint();
        let err = ExperimentDB::read_jsonl(&buf[..], Path::new("db"), Some(&other)).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }));
    }

    #[test]
    fn corrupt_line_reports_its_number() {
        let (tasks, arch, backend) = setup(1, 0.01);
        let db = populate(&tasks, &arch, &backend, 3, 4).unwrap();
        let mut buf = Vec::new();
        db.write_jsonl(&mut buf).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        text = text.replacen("\"performance\"", "\"perf\"", 2);
        let err = ExperimentDB::read_jsonl(text.as_bytes(), Path::new("db"), None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");

        let bad_p = text.replace("\"perf\"", "\"performance\"").replacen("\"performance\":", "\"performance\":1.5,\"x\":", 1);
        assert!(ExperimentDB::read_jsonl(bad_p.as_bytes(), Path::new("db"), None).is_err());
    }

    #[test]
    fn empty_file_is_an_empty_db() {
        let db = ExperimentDB::read_jsonl(&b""[..], Path::new("db"), None).unwrap();
        assert!(db.is_empty());
    }

    #[test]
    fn batches() {
        let (tasks, arch, backend) = setup(1, 0.01);
        let db = populate(&tasks, &arch, &backend, 12, 4).unwrap();
        let mut rng = Rng::seed_from_u64(0);
        let all = batch_for_task(&db, "task-00", 100, &mut rng).unwrap();
        assert_eq!(all.len(), 12);
        let mut seeds: Vec<u64> = all.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        let mut expect: Vec<u64> = db.records("task-00").unwrap().iter().map(|r| r.seed).collect();
        expect.sort_unstable();
        assert_eq!(seeds, expect);

        let draw = |s| {
            let mut rng = Rng::seed_from_u64(s);
            batch_for_task(&db, "task-00", 5, &mut rng)
                .unwrap()
                .iter()
                .map(|r| r.seed)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        assert!(matches!(
            batch_for_task(&db, "missing", 2, &mut rng),
            Err(Error::UnknownTask(_))
        ));
    }
}
