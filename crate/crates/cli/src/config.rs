//! Run configuration: one TOML file with a section per pipeline stage.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use archrank_core::child::{ArchSpace, RealTrainConfig, SurrogateConfig};
use archrank_core::eval::LooConfig;
use archrank_core::losses::{LossConfig, LossKind, TrainConfig};
use archrank_core::ranker::RankerConfig;
use archrank_core::search::SearchConfig;
use archrank_core::tasks::TaskFamilyConfig;

pub const DESK_PRESET: &str = include_str!("../presets/desk.cfg");
pub const PAPER_SHAPE_PRESET: &str = include_str!("../presets/paper-shape.cfg");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "analytic")]
    Analytic,
    #[serde(rename = "real_train", alias = "real-train")]
    RealTrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbSection {
    pub records_per_task: usize,
    pub backend: BackendKind,
}

impl Default for DbSection {
    fn default() -> Self {
        DbSection {
            records_per_task: 300,
            backend: BackendKind::Analytic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub kind: LossKind,
    pub margin: f64,
    pub gap: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::new(LossKind::LinearRank);
        LossSection {
            kind: d.kind,
            margin: d.margin,
            gap: d.gap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptSection {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub record_batch: usize,
}

impl Default for OptSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        OptSection {
            lr: d.learning_rate,
            momentum: d.momentum,
            steps: d.steps,
            record_batch: d.record_batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_repeats: usize,
    pub losses: Vec<LossKind>,
    pub run_search: bool,
    pub pca_batches: usize,
    pub pca_batch_size: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_repeats: 10,
            losses: LossKind::ALL.to_vec(),
            run_search: true,
            pca_batches: 10,
            pca_batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Default directory for inputs and outputs not given on the command line.
    pub out_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub tasks: TaskFamilyConfig,
    pub arch: ArchSpace,
    pub surrogate: SurrogateConfig,
    pub real_train: RealTrainConfig,
    pub db: DbSection,
    pub ranker: RankerConfig,
    pub loss: LossSection,
    pub opt: OptSection,
    pub search: SearchConfig,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

/// Keys that are valid but absent from the serialized defaults.
const OPTIONAL_KEYS: &[&str] = &["ranker.meta_batch"];

fn collect_keys(prefix: &str, value: &toml::Value, out: &mut BTreeSet<String>) {
    if let toml::Value::Table(t) = value {
        for (k, v) in t {
            let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            out.insert(key.clone());
            // Tables inside arrays and tagged enums are checked by serde.
            collect_keys(&key, v, out);
        }
    }
}

/// Every key in `value` that the config schema does not know.
pub fn unknown_keys(value: &toml::Value) -> Vec<String> {
    let defaults = toml::Value::try_from(RunConfig::default()).expect("defaults serialize");
    let mut known = BTreeSet::new();
    collect_keys("", &defaults, &mut known);
    known.extend(OPTIONAL_KEYS.iter().map(|s| s.to_string()));
    let mut given = BTreeSet::new();
    collect_keys("", value, &mut given);
    given
        .into_iter()
        .filter(|k| {
            !known.contains(k)
                && !known.iter().any(|p| k.starts_with(&format!("{p}.")) && is_leaf_table(p))
        })
        .collect()
}

fn is_leaf_table(key: &str) -> bool {
    // Tagged-enum and range tables whose inner keys serde validates.
    key == "ranker.init"
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &str) -> anyhow::Result<Self> {
        let value: toml::Value = toml::from_str(text).with_context(|| format!("{origin}: not valid TOML"))?;
        let unknown = unknown_keys(&value);
        if !unknown.is_empty() {
            bail!("{origin}: unknown config keys: {}", unknown.join(", "));
        }
        let cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| anyhow::anyhow!("{origin}: {}", e.message()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        RunConfig::from_toml_str(&text, &path.display().to_string())
    }

    pub fn preset(name: &str) -> anyhow::Result<Self> {
        match name {
            "desk" => RunConfig::from_toml_str(DESK_PRESET, "preset desk"),
            "paper-shape" | "paper_shape" => RunConfig::from_toml_str(PAPER_SHAPE_PRESET, "preset paper-shape"),
            other => bail!("unknown preset `{other}` (expected desk or paper-shape)"),
        }
    }

    /// Every problem found, one per entry, prefixed with its key.
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let mut check = |key: &str, r: archrank_core::Result<()>| {
            if let Err(e) = r {
                bad.push(format!("{key}: {e}"));
            }
        };
        check("tasks", self.tasks.validate());
        check("arch", self.arch.validate());
        check("surrogate", self.surrogate.validate());
        check("ranker", self.ranker.validate());
        check("loss", self.loss_config(self.loss.kind).validate());
        check("opt", self.train_config().validate());
        check("search", self.search.validate());
        if self.db.records_per_task < 2 {
            bad.push("db.records_per_task: must be at least 2".into());
        }
        let rt = &self.real_train;
        if rt.epochs == 0 || rt.batch_size == 0 || !(rt.learning_rate > 0.0) {
            bad.push("real_train: epochs, batch_size and learning_rate must be positive".into());
        }
        if self.eval.n_repeats == 0 {
            bad.push("eval.n_repeats: must be at least 1".into());
        }
        if self.eval.losses.is_empty() {
            bad.push("eval.losses: must name at least one loss".into());
        }
        if self.eval.pca_batches == 0 || self.eval.pca_batch_size == 0 {
            bad.push("eval.pca_batches / eval.pca_batch_size: must be positive".into());
        }
        bad
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            bail!("invalid configuration: {}", bad.join("; "))
        }
    }

    pub fn loss_config(&self, kind: LossKind) -> LossConfig {
        LossConfig {
            kind,
            margin: self.loss.margin,
            gap: self.loss.gap,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.opt.steps,
            record_batch: self.opt.record_batch,
            learning_rate: self.opt.lr,
            momentum: self.opt.momentum,
        }
    }

    pub fn loo_config(&self) -> LooConfig {
        LooConfig {
            losses: self.eval.losses.iter().map(|&k| self.loss_config(k)).collect(),
            ranker: self.ranker.clone(),
            train: self.train_config(),
            search: self.search.clone(),
            n_repeats: self.eval.n_repeats,
            run_search: self.eval.run_search,
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        let desk = RunConfig::preset("desk").unwrap();
        desk.validate().unwrap();
        assert_eq!(desk.tasks.num_tasks, 6);
        assert_eq!(desk.db.records_per_task, 300);
        assert_eq!(desk.arch.encoding_dim(), 21);
        let paper = RunConfig::preset("paper-shape").unwrap();
        paper.validate().unwrap();
        assert_eq!(paper.arch.encoding_dim(), 105);
        assert_eq!(paper.db.records_per_task, 500);
        assert_eq!(paper.db.backend, BackendKind::RealTrain);
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, "t").unwrap(), cfg);
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let err = RunConfig::from_toml_str("bogus = 1\n[loss]\nmargn = 0.3\n[opt]\nlr = 1e-4\nstep = 5\n", "t")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bogus") && err.contains("loss.margn") && err.contains("opt.step"), "{err}");
        assert!(!err.contains("opt.lr"));
    }

    #[test]
    fn every_invalid_value_is_listed() {
        let cfg = RunConfig::from_toml_str("[loss]\nmargin = 0.0\n[search]\neta = -1.0\n[eval]\nn_repeats = 0\n", "t").unwrap();
        let bad = cfg.problems();
        assert_eq!(bad.len(), 3, "{bad:?}");
    }

    #[test]
    fn optional_and_enum_keys_are_accepted() {
        let cfg = RunConfig::from_toml_str(
            "[ranker]\nmeta_batch = 64\ninit = { kind = \"glorot\" }\n[db]\nbackend = \"real-train\"\n",
            "t",
        )
        .unwrap();
        assert_eq!(cfg.ranker.meta_batch, Some(64));
        assert_eq!(cfg.db.backend, BackendKind::RealTrain);
    }
}
