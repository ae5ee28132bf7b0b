//! Task datasets, group-pure splitting, the per-epoch train/validation
//! exchange, batching, and a synthetic correlated-task generator.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{GateError, Result};
use crate::model::TaskId;

/// Deterministic RNG for a named stream, derived from a base seed.
pub fn derived_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut h = splitmix(seed);
    for &p in parts {
        h = splitmix(h ^ splitmix(p));
    }
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub group: String,
    pub x: Vec<f64>,
    pub y: f64,
}

/// Label standardization statistics (population std).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelNorm {
    pub mean: f64,
    pub std: f64,
}

impl LabelNorm {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        if labels.len() < 2 {
            return Err(GateError::InvalidArgument(
                "label normalization needs at least 2 points".into(),
            ));
        }
        let n = labels.len() as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(GateError::InvalidArgument("labels have zero variance".into()));
        }
        Ok(Self {
            mean,
            std: var.sqrt(),
        })
    }

    pub fn apply(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn inverse(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task: TaskId,
    pub records: Vec<Record>,
    /// set once labels have been standardized
    pub norm: Option<LabelNorm>,
}

impl TaskDataset {
    pub fn new(task: TaskId, records: Vec<Record>) -> Result<Self> {
        let Some(first) = records.first() else {
            return Err(GateError::InvalidArgument(format!("task `{task}` has no records")));
        };
        let d_x = first.x.len();
        if d_x == 0 {
            return Err(GateError::InvalidArgument(format!("task `{task}` has no features")));
        }
        if let Some(i) = records.iter().position(|r| r.x.len() != d_x) {
            return Err(GateError::InvalidArgument(format!(
                "task `{task}` record {i} has {} features, expected {d_x}",
                records[i].x.len()
            )));
        }
        Ok(Self {
            task,
            records,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d_x(&self) -> usize {
        self.records[0].x.len()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y).collect()
    }

    /// `[n, d_x]` features and `[n, 1]` labels for the given rows.
    pub fn tensors(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let d = self.d_x();
        let mut xs = Vec::with_capacity(indices.len() * d);
        let mut ys = Vec::with_capacity(indices.len());
        for &i in indices {
            let r = &self.records[i];
            xs.extend_from_slice(&r.x);
            ys.push(r.y);
        }
        Ok((
            Tensor::matrix(indices.len(), d, xs)?,
            Tensor::matrix(indices.len(), 1, ys)?,
        ))
    }
}

/// Parse `group_key,f0,...,f{d-1},label` with a header row.
pub fn load_task_csv(path: &Path, task: TaskId) -> Result<TaskDataset> {
    let parse_err = |line: u64, message: String| GateError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| GateError::Csv {
            context: path.display().to_string(),
            source: e,
        })?;
    let header_len = reader
        .headers()
        .map_err(|e| GateError::Csv {
            context: path.display().to_string(),
            source: e,
        })?
        .len();
    if header_len < 3 {
        return Err(parse_err(
            1,
            "header must be group_key,f0,...,label with at least one feature".into(),
        ));
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != header_len {
            return Err(parse_err(
                line,
                format!("expected {header_len} fields, found {}", row.len()),
            ));
        }
        let number = |k: usize| -> Result<f64> {
            let v: f64 = row[k]
                .parse()
                .map_err(|_| parse_err(line, format!("field {} is not a number: {:?}", k + 1, &row[k])))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("field {} is not finite", k + 1)));
            }
            Ok(v)
        };
        let x = (1..header_len - 1).map(number).collect::<Result<Vec<_>>>()?;
        let y = number(header_len - 1)?;
        records.push(Record {
            group: row[0].to_string(),
            x,
            y,
        });
    }
    if records.is_empty() {
        return Err(parse_err(1, "file has no data rows".into()));
    }
    TaskDataset::new(task, records)
}

/// Write a dataset in the task CSV layout (raw labels).
pub fn write_task_csv(path: &Path, ds: &TaskDataset) -> Result<()> {
    let mut out = String::from("group_key");
    for k in 0..ds.d_x() {
        out.push_str(&format!(",f{k}"));
    }
    out.push_str(",label\n");
    for r in &ds.records {
        out.push_str(&r.group);
        for v in &r.x {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", r.y));
    }
    fs::write(path, out).map_err(|e| GateError::io(format!("writing {}", path.display()), e))
}

/// Standardize labels with statistics from `train` rows only.
pub fn normalize_labels(ds: &TaskDataset, train: &[usize]) -> Result<TaskDataset> {
    let labels: Vec<f64> = train.iter().map(|&i| ds.records[i].y).collect();
    let norm = LabelNorm::fit(&labels)?;
    let records = ds
        .records
        .iter()
        .map(|r| Record {
            y: norm.apply(r.y),
            ..r.clone()
        })
        .collect();
    Ok(TaskDataset {
        task: ds.task.clone(),
        records,
        norm: Some(norm),
    })
}

/// One row of a task manifest: full property name, short id, expected count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub abbreviation: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub tasks: Vec<ManifestEntry>,
}

impl TaskManifest {
    /// Loads `.json` (`{"tasks": [...]}`) or CSV (`name,abbreviation,count`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| GateError::io(format!("reading {}", path.display()), e))?;
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            let m: TaskManifest = serde_json::from_str(&text).map_err(|e| GateError::Json {
                context: path.display().to_string(),
                source: e,
            })?;
            m.validate()?;
            return Ok(m);
        }
        Self::parse_csv(&text, path)
    }

    pub fn parse_csv(text: &str, path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut tasks = Vec::new();
        for row in reader.deserialize::<ManifestEntry>() {
            let entry = row.map_err(|e| GateError::Parse {
                path: path.to_path_buf(),
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })?;
            tasks.push(entry);
        }
        let m = Self { tasks };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for (i, e) in self.tasks.iter().enumerate() {
            TaskId::new(e.abbreviation.as_str())?;
            if self.tasks[..i].iter().any(|o| o.abbreviation == e.abbreviation) {
                return Err(GateError::InvalidArgument(format!(
                    "duplicate manifest abbreviation `{}`",
                    e.abbreviation
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train, self.val, self.test];
        if f.iter().any(|v| !(*v > 0.0)) || ((f.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(GateError::InvalidArgument(format!(
                "split fractions must be positive and sum to 1, got {f:?}"
            )));
        }
        Ok(())
    }
}

/// Row indices of one task's three partitions, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

impl TaskSplit {
    pub fn part(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.train,
            Part::Val => &self.val,
            Part::Test => &self.test,
        }
    }

    /// Disjointness, coverage of `0..n`, and group purity.
    pub fn check(&self, ds: &TaskDataset) -> Result<()> {
        let n = ds.len();
        let mut owner: Vec<Option<u8>> = vec![None; n];
        for (tag, part) in [(0u8, &self.train), (1, &self.val), (2, &self.test)] {
            for &i in part {
                if i >= n || owner[i].is_some() {
                    return Err(GateError::InvalidArgument(format!(
                        "index {i} out of range or assigned twice"
                    )));
                }
                owner[i] = Some(tag);
            }
        }
        if owner.iter().any(Option::is_none) {
            return Err(GateError::InvalidArgument("split does not cover all records".into()));
        }
        let mut group_owner: BTreeMap<&str, u8> = BTreeMap::new();
        for (r, o) in ds.records.iter().zip(&owner) {
            let o = o.expect("covered");
            if *group_owner.entry(&r.group).or_insert(o) != o {
                return Err(GateError::InvalidArgument(format!(
                    "group `{}` straddles partitions",
                    r.group
                )));
            }
        }
        Ok(())
    }
}

/// Per-task splits, indexed like the task registry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitState {
    pub tasks: Vec<TaskSplit>,
}

/// Group key -> row indices, keys sorted.
fn groups_of(ds: &TaskDataset, rows: Option<&[usize]>) -> BTreeMap<String, Vec<usize>> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut add = |i: usize| {
        groups
            .entry(ds.records[i].group.clone())
            .or_default()
            .push(i)
    };
    match rows {
        Some(rows) => rows.iter().for_each(|&i| add(i)),
        None => (0..ds.len()).for_each(add),
    }
    groups
}

/// Shuffle whole groups and assign each to the partition furthest below its
/// target size. The shuffle depends only on the sorted key set and `seed`, so
/// tasks sharing a key set get the same assignment.
pub fn group_split(ds: &TaskDataset, fractions: SplitFractions, seed: u64) -> Result<TaskSplit> {
    fractions.validate()?;
    let groups = groups_of(ds, None);
    if groups.len() < 3 {
        return Err(GateError::InvalidArgument(format!(
            "task `{}` has {} distinct groups, need at least 3",
            ds.task,
            groups.len()
        )));
    }
    let mut order: Vec<(&String, &Vec<usize>)> = groups.iter().collect();
    order.shuffle(&mut derived_rng(seed, &[0x5171]));

    let n = ds.len() as f64;
    let targets = [fractions.train * n, fractions.val * n, fractions.test * n];
    let mut parts: [Vec<usize>; 3] = Default::default();
    let mut group_counts = [0usize; 3];
    for (_, rows) in order {
        let k = (0..3)
            .max_by(|&a, &b| {
                let da = targets[a] - parts[a].len() as f64;
                let db = targets[b] - parts[b].len() as f64;
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .expect("three parts");
        parts[k].extend_from_slice(rows);
        group_counts[k] += 1;
    }
    // keep every partition nonempty: borrow the smallest group from the
    // partition holding the most groups
    for k in 0..3 {
        if parts[k].is_empty() {
            let donor = (0..3).max_by_key(|&d| group_counts[d]).expect("three parts");
            let donor_groups = groups_of(ds, Some(&parts[donor]));
            let (_, smallest) = donor_groups
                .iter()
                .min_by_key(|(key, rows)| (rows.len(), key.as_str()))
                .expect("donor has groups");
            parts[donor].retain(|i| !smallest.contains(i));
            parts[k].extend_from_slice(smallest);
            group_counts[donor] -= 1;
            group_counts[k] += 1;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(TaskSplit { train, val, test })
}

/// Exchange `fraction` of the validation groups (rounded down, capped by the
/// train group count) with an equal number of train groups. The draw depends
/// on `(seed, epoch)` and the group keys only; the test partition is untouched.
pub fn swap_train_val(
    split: &TaskSplit,
    ds: &TaskDataset,
    fraction: f64,
    seed: u64,
    epoch: u64,
) -> Result<TaskSplit> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(GateError::InvalidArgument(format!(
            "swap fraction must be in (0, 0.5], got {fraction}"
        )));
    }
    let train_groups = groups_of(ds, Some(&split.train));
    let val_groups = groups_of(ds, Some(&split.val));
    let k = ((fraction * val_groups.len().min(train_groups.len()) as f64) + 1e-9).floor() as usize;
    if k == 0 {
        return Ok(split.clone());
    }
    let mut rng = derived_rng(seed, &[0x5a4b, epoch]);
    let mut t_keys: Vec<&String> = train_groups.keys().collect();
    let mut v_keys: Vec<&String> = val_groups.keys().collect();
    t_keys.shuffle(&mut rng);
    v_keys.shuffle(&mut rng);

    let mut train: Vec<usize> = Vec::with_capacity(split.train.len());
    let mut val: Vec<usize> = Vec::with_capacity(split.val.len());
    for (i, key) in t_keys.iter().enumerate() {
        let dest = if i < k { &mut val } else { &mut train };
        dest.extend_from_slice(&train_groups[*key]);
    }
    for (i, key) in v_keys.iter().enumerate() {
        let dest = if i < k { &mut train } else { &mut val };
        dest.extend_from_slice(&val_groups[*key]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(TaskSplit {
        train,
        val,
        test: split.test.clone(),
    })
}

/// A batch of rows from one target task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub target: usize,
    pub indices: Vec<usize>,
}

/// Shuffled batches of `part` for every task in `targets`. Each task's rows are
/// shuffled and chunked, then the batch order across tasks is shuffled.
/// Every row of every target appears exactly once.
pub fn multi_task_batches(
    split: &SplitState,
    targets: &[usize],
    part: Part,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(GateError::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut rng = derived_rng(seed, &[0xba7c, epoch, part as u64]);
    let mut batches = Vec::new();
    for &t in targets {
        let mut rows = split.tasks[t].part(part).to_vec();
        if rows.is_empty() {
            return Err(GateError::InvalidArgument(format!(
                "task {t} has an empty {part:?} partition"
            )));
        }
        rows.shuffle(&mut rng);
        for chunk in rows.chunks(batch_size) {
            batches.push(Batch {
                target: t,
                indices: chunk.to_vec(),
            });
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Generative description of a synthetic multi-task suite.
///
/// Each molecule draws `u ~ N(0, I_k)`; features are `A·u` plus Gaussian noise
/// and task `j` labels are `w_j·u + noise_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub task_names: Vec<String>,
    pub d_x: usize,
    pub latent_dim: usize,
    /// one row of length `latent_dim` per task
    pub loadings: Vec<Vec<f64>>,
    /// label noise std per task
    pub noise_std: Vec<f64>,
    #[serde(default = "default_feature_noise")]
    pub feature_noise: f64,
    /// molecules drawn; every task labels the first `samples_per_task[j]`
    pub samples: usize,
    #[serde(default)]
    pub samples_per_task: Option<Vec<usize>>,
    /// passes the linear latent signal through `tanh` before the label map
    #[serde(default)]
    pub nonlinear: bool,
}

fn default_feature_noise() -> f64 {
    0.05
}

impl SyntheticSpec {
    pub fn n_tasks(&self) -> usize {
        self.loadings.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.loadings.len();
        let bad = |m: String| Err(GateError::config("data.synthetic", m));
        if n == 0 {
            return bad("at least one task is required".into());
        }
        if self.task_names.len() != n || self.noise_std.len() != n {
            return bad(format!(
                "{n} loading rows but {} names and {} noise entries",
                self.task_names.len(),
                self.noise_std.len()
            ));
        }
        if self.latent_dim == 0 || self.d_x < self.latent_dim {
            return bad("need 0 < latent_dim <= d_x".into());
        }
        if self.loadings.iter().any(|w| w.len() != self.latent_dim) {
            return bad("every loading row needs latent_dim entries".into());
        }
        if self.noise_std.iter().any(|s| !(*s >= 0.0)) || !(self.feature_noise >= 0.0) {
            return bad("noise std must be >= 0".into());
        }
        if self.samples < 3 {
            return bad("samples must be >= 3".into());
        }
        if let Some(per) = &self.samples_per_task {
            if per.len() != n || per.iter().any(|&c| c < 3 || c > self.samples) {
                return bad("samples_per_task entries must be in 3..=samples".into());
            }
        }
        for name in &self.task_names {
            TaskId::new(name.as_str()).map_err(|e| GateError::config("data.synthetic.task_names", e.to_string()))?;
        }
        Ok(())
    }

    /// Label correlation implied by the loadings and noise (linear case).
    pub fn implied_correlation(&self) -> Vec<Vec<f64>> {
        let n = self.n_tasks();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let var: Vec<f64> = (0..n)
            .map(|i| dot(&self.loadings[i], &self.loadings[i]) + self.noise_std[i].powi(2))
            .collect();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if i == j {
                            1.0
                        } else {
                            dot(&self.loadings[i], &self.loadings[j]) / (var[i] * var[j]).sqrt()
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    let mut rng = derived_rng(seed, &[0x5e7d]);
    let k = spec.latent_dim;
    let scale = 1.0 / (k as f64).sqrt();
    let mixing: Vec<f64> = (0..spec.d_x * k)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut latents = Vec::with_capacity(spec.samples);
    let mut features = Vec::with_capacity(spec.samples);
    for _ in 0..spec.samples {
        let u: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let x: Vec<f64> = (0..spec.d_x)
            .map(|r| {
                let clean: f64 = (0..k).map(|c| mixing[r * k + c] * u[c]).sum();
                clean + spec.feature_noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        latents.push(u);
        features.push(x);
    }

    let mut out = Vec::with_capacity(spec.n_tasks());
    for (j, w) in spec.loadings.iter().enumerate() {
        let count = spec
            .samples_per_task
            .as_ref()
            .map_or(spec.samples, |per| per[j]);
        let mut task_rng = derived_rng(seed, &[0x1abe1, j as u64]);
        let records = (0..count)
            .map(|m| {
                let signal: f64 = w
                    .iter()
                    .zip(&latents[m])
                    .map(|(a, u)| if spec.nonlinear { a * u.tanh() } else { a * u })
                    .sum();
                Record {
                    group: format!("m{m}"),
                    x: features[m].clone(),
                    y: signal + spec.noise_std[j] * task_rng.sample::<f64, _>(StandardNormal),
                }
            })
            .collect();
        out.push(TaskDataset::new(TaskId::new(spec.task_names[j].as_str())?, records)?);
    }
    Ok(out)
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}
