//! Synthetic classification tasks.
//!
//! Each task is a Gaussian mixture with its own center, per-dimension
//! spread, class separation and label noise. A single per-task difficulty
//! scalar interpolates separation, spread and noise between the configured
//! ranges, so tasks differ both in how hard they are and in where their
//! samples live (which is what the meta-feature tower has to pick up).

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};

// 80/10/10 train/val/test, stratified by label.
const VAL_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    task_id: String,
    num_classes: usize,
    samples: Vec<Sample>,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

impl TaskDataset {
    /// Validates and assembles a dataset. Split index lists are sorted.
    pub fn new(
        task_id: impl Into<String>,
        num_classes: usize,
        samples: Vec<Sample>,
        mut train: Vec<usize>,
        mut val: Vec<usize>,
        mut test: Vec<usize>,
    ) -> Result<Self> {
        let task_id = task_id.into();
        let bad = |reason: String| Error::DegenerateTask {
            task: task_id.clone(),
            reason,
        };
        if num_classes < 2 {
            return Err(bad(format!("{num_classes} classes")));
        }
        let dim = samples.first().map(|s| s.x.len()).unwrap_or(0);
        if dim == 0 {
            return Err(bad("no samples or zero-dimensional inputs".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.x.len() != dim {
                return Err(bad(format!("sample {i} has dimension {}", s.x.len())));
            }
            if !s.x.iter().all(|v| v.is_finite()) {
                return Err(bad(format!("sample {i} is not finite")));
            }
            if s.y >= num_classes {
                return Err(bad(format!("sample {i} label {} out of range", s.y)));
            }
        }
        let mut seen = vec![false; samples.len()];
        for &i in train.iter().chain(&val).chain(&test) {
            if i >= samples.len() || std::mem::replace(&mut seen[i], true) {
                return Err(bad(format!("split index {i} out of range or repeated")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(bad("splits do not cover all samples".into()));
        }
        let mut in_train = vec![false; num_classes];
        for &i in &train {
            in_train[samples[i].y] = true;
        }
        if let Some(c) = in_train.iter().position(|p| !p) {
            return Err(bad(format!("class {c} missing from the train split")));
        }
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        Ok(TaskDataset {
            task_id,
            num_classes,
            samples,
            train,
            val,
            test,
        })
    }

    pub fn task_id(&self) -> &str {
        &self.task_id
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.samples[0].x.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn split_indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn split_samples(&self, split: Split) -> impl Iterator<Item = &Sample> + '_ {
        self.split_indices(split).iter().map(move |&i| &self.samples[i])
    }

    pub fn split_of(&self, index: usize) -> Option<Split> {
        [Split::Train, Split::Val, Split::Test]
            .into_iter()
            .find(|&s| self.split_indices(s).binary_search(&index).is_ok())
    }
}

/// Inclusive range of a generator parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Range<T> {
    pub min: T,
    pub max: T,
}

impl<T> Range<T> {
    pub const fn new(min: T, max: T) -> Self {
        Range { min, max }
    }
}

impl Range<f64> {
    fn lerp(&self, t: f64) -> f64 {
        self.min + t * (self.max - self.min)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskFamilyConfig {
    pub num_tasks: usize,
    pub input_dim: usize,
    pub classes: Range<usize>,
    pub samples: Range<usize>,
    /// Distance scale between class means; easy tasks get `max`.
    pub class_separation: Range<f64>,
    /// Within-class standard deviation; easy tasks get `min`.
    pub cluster_spread: Range<f64>,
    /// Relative jitter of per-dimension standard deviations, in [0, 1).
    pub spread_jitter: f64,
    /// Probability that a label is replaced by a different class.
    pub label_noise: Range<f64>,
    /// Standard deviation of per-task centers.
    pub task_shift: f64,
    pub seed: u64,
}

impl Default for TaskFamilyConfig {
    fn default() -> Self {
        TaskFamilyConfig {
            num_tasks: 6,
            input_dim: 8,
            classes: Range::new(2, 4),
            samples: Range::new(600, 2000),
            class_separation: Range::new(1.0, 3.0),
            cluster_spread: Range::new(0.8, 1.5),
            spread_jitter: 0.3,
            label_noise: Range::new(0.0, 0.15),
            task_shift: 1.5,
            seed: 0,
        }
    }
}

impl TaskFamilyConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.num_tasks == 0 {
            problems.push("num_tasks must be >= 1".to_string());
        }
        if self.input_dim == 0 {
            problems.push("input_dim must be >= 1".into());
        }
        if self.classes.min < 2 || self.classes.min > self.classes.max {
            problems.push(format!("classes range {:?} invalid", self.classes));
        }
        if self.samples.min > self.samples.max {
            problems.push(format!("samples range {:?} invalid", self.samples));
        }
        if self.samples.min < 10 * self.classes.max {
            problems.push(format!(
                "need at least 10 samples per class: samples.min {} < 10 x {} classes",
                self.samples.min, self.classes.max
            ));
        }
        for (name, r) in [
            ("class_separation", self.class_separation),
            ("cluster_spread", self.cluster_spread),
            ("label_noise", self.label_noise),
        ] {
            if !(r.min.is_finite() && r.max.is_finite() && r.min >= 0.0 && r.min <= r.max) {
                problems.push(format!("{name} range {r:?} invalid"));
            }
        }
        if self.cluster_spread.min <= 0.0 {
            problems.push("cluster_spread must be positive".into());
        }
        if self.label_noise.max > 1.0 {
            problems.push("label_noise must be <= 1".into());
        }
        if !(0.0..1.0).contains(&self.spread_jitter) {
            problems.push("spread_jitter must be in [0, 1)".into());
        }
        if !(self.task_shift >= 0.0 && self.task_shift.is_finite()) {
            problems.push("task_shift must be >= 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Infeasible(problems.join("; ")))
        }
    }
}

pub fn task_id(index: usize) -> String {
    format!("task-{index:02}")
}

/// Generates `cfg.num_tasks` datasets; a pure function of `cfg`.
pub fn generate_tasks(cfg: &TaskFamilyConfig) -> Result<Vec<TaskDataset>> {
    cfg.validate()?;
    (0..cfg.num_tasks)
        .map(|t| {
            let mut rng = seed::rng_from(cfg.seed, &[0x7a5c, t as u64]);
            generate_one(cfg, task_id(t), &mut rng)
        })
        .collect()
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn generate_one(cfg: &TaskFamilyConfig, id: String, rng: &mut Rng) -> Result<TaskDataset> {
    let d = cfg.input_dim;
    let n = rng.random_range(cfg.samples.min..=cfg.samples.max);
    let classes = rng.random_range(cfg.classes.min..=cfg.classes.max);
    let difficulty: f64 = rng.random();

    let separation = cfg.class_separation.lerp(1.0 - difficulty);
    let spread = cfg.cluster_spread.lerp(difficulty);
    let noise = cfg.label_noise.lerp(difficulty);

    let center: Vec<f64> = (0..d).map(|_| cfg.task_shift * normal(rng)).collect();
    let scales: Vec<f64> = (0..d)
        .map(|_| spread * (1.0 + cfg.spread_jitter * rng.random_range(-1.0..1.0)))
        .collect();
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let dir: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            center
                .iter()
                .zip(&dir)
                .map(|(c, u)| c + separation * u / norm)
                .collect()
        })
        .collect();

    let mut truth: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for i in (1..n).rev() {
        truth.swap(i, rng.random_range(0..=i));
    }
    let samples: Vec<Sample> = truth
        .iter()
        .map(|&c| {
            let x = means[c]
                .iter()
                .zip(&scales)
                .map(|(m, s)| m + s * normal(rng))
                .collect();
            let y = if rng.random::<f64>() < noise {
                let other = rng.random_range(0..classes - 1);
                if other >= c {
                    other + 1
                } else {
                    other
                }
            } else {
                c
            };
            Sample { x, y }
        })
        .collect();

    let (train, val, test) = stratified_split(&samples, classes, rng);
    TaskDataset::new(id, classes, samples, train, val, test).map_err(|e| match e {
        Error::DegenerateTask { task, reason } => {
            Error::Infeasible(format!("task {task}: {reason}"))
        }
        other => other,
    })
}

fn stratified_split(
    samples: &[Sample],
    classes: usize,
    rng: &mut Rng,
) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut by_class = vec![Vec::new(); classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.y].push(i);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut idx in by_class {
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let n = idx.len();
        let n_val = ((n as f64 * VAL_FRACTION).round() as usize).max(1).min(n / 3);
        let n_test = n_val;
        let n_train = n - n_val - n_test;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..n_train + n_val]);
        test.extend_from_slice(&idx[n_train + n_val..]);
    }
    (train, val, test)
}

/// Uniform sample without replacement from one split.
pub fn sample_batch<'a>(
    task: &'a TaskDataset,
    split: Split,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<&'a Sample>> {
    let idx = task.split_indices(split);
    if batch_size == 0 || batch_size > idx.len() {
        return Err(Error::invalid(format!(
            "batch of {batch_size} from a {:?} split of {} samples",
            split,
            idx.len()
        )));
    }
    Ok(index::sample(rng, idx.len(), batch_size)
        .into_iter()
        .map(|k| &task.samples[idx[k]])
        .collect())
}

#[derive(Serialize, Deserialize)]
struct SampleLine<'a> {
    task_id: std::borrow::Cow<'a, str>,
    split: Split,
    x: std::borrow::Cow<'a, [f64]>,
    y: usize,
}

/// Writes tasks as JSON lines, one sample per line in sample order.
pub fn write_tasks_jsonl(tasks: &[TaskDataset], mut out: impl Write) -> Result<()> {
    for t in tasks {
        for (i, s) in t.samples.iter().enumerate() {
            let split = t.split_of(i).expect("every sample belongs to a split");
            let line = SampleLine {
                task_id: t.task_id.as_str().into(),
                split,
                x: s.x.as_slice().into(),
                y: s.y,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn save_tasks(tasks: &[TaskDataset], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tasks_jsonl(tasks, &mut f)?;
    f.flush()?;
    Ok(())
}

/// Reads tasks written by [`write_tasks_jsonl`]. Tasks keep first-seen order;
/// `num_classes` is one more than the largest label.
pub fn read_tasks_jsonl(input: impl BufRead, path: &Path) -> Result<Vec<TaskDataset>> {
    struct Partial {
        samples: Vec<Sample>,
        splits: BTreeMap<Split, Vec<usize>>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut partial: BTreeMap<String, Partial> = BTreeMap::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message: e.to_string(),
        })?;
        let id = rec.task_id.into_owned();
        let p = partial.entry(id.clone()).or_insert_with(|| {
            order.push(id);
            Partial {
                samples: Vec::new(),
                splits: BTreeMap::new(),
            }
        });
        p.splits.entry(rec.split).or_default().push(p.samples.len());
        p.samples.push(Sample {
            x: rec.x.into_owned(),
            y: rec.y,
        });
    }
    order
        .into_iter()
        .map(|id| {
            let mut p = partial.remove(&id).expect("recorded id");
            let classes = p.samples.iter().map(|s| s.y).max().map_or(0, |m| m + 1);
            let mut take = |s| p.splits.remove(&s).unwrap_or_default();
            let (train, val, test) = (take(Split::Train), take(Split::Val), take(Split::Test));
            TaskDataset::new(id, classes, p.samples, train, val, test)
        })
        .collect()
}

pub fn load_tasks(path: &Path) -> Result<Vec<TaskDataset>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tasks_jsonl(f, path)
}
