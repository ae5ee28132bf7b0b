//! Experiment drivers behind the CLI: training runs, fixed-ratio grids,
//! baseline-vs-learned comparisons, ratio diagnostics and curve export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bilevel::{quadratic_variation, EpochRecord};
use crate::config::RunConfig;
use crate::data::{write_task_csv, Part};
use crate::error::{GateError, Result};
use crate::losses::LossBreakdown;
use crate::runstore::{checkpoint_path, load_for_resume, save, Checkpoint};

pub const METRICS_HEADER: &str = "epoch,task,val_rmse,l_reg,l_map,l_ae,l_cons,l_dis,l_tot,seconds";
pub const LAMBDA_HEADER: &str = "epoch,source,target,lambda";

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub task: String,
    pub val_rmse: f64,
    /// mean training losses over this task's batches
    pub losses: LossBreakdown,
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaRow {
    pub epoch: usize,
    pub source: String,
    pub target: String,
    pub lambda: f64,
}

pub fn metrics_rows(tasks: &[String], history: &[EpochRecord]) -> Vec<MetricsRow> {
    history
        .iter()
        .flat_map(|rec| {
            tasks.iter().enumerate().map(move |(i, task)| MetricsRow {
                epoch: rec.epoch,
                task: task.clone(),
                val_rmse: rec.val_rmse[i],
                losses: rec.train_losses[i],
                seconds: rec.seconds,
            })
        })
        .collect()
}

/// Ratio snapshots with the initial matrix as epoch 0.
pub fn lambda_rows(tasks: &[String], initial: &[f64], history: &[EpochRecord]) -> Vec<LambdaRow> {
    let n = tasks.len();
    std::iter::once((0, initial))
        .chain(history.iter().map(|r| (r.epoch, r.lambda.as_slice())))
        .flat_map(|(epoch, values)| {
            (0..n).flat_map(move |s| {
                (0..n).filter(move |&t| t != s).map(move |t| LambdaRow {
                    epoch,
                    source: tasks[s].clone(),
                    target: tasks[t].clone(),
                    lambda: values[s * n + t],
                })
            })
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| GateError::io(format!("writing {}", path.display()), e))
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let l = &r.losses;
        let secs = r.seconds.map(|s| s.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.task, r.val_rmse, l.reg, l.map, l.ae, l.cons, l.dis, l.tot, secs
        ));
    }
    write_text(path, &out)
}

pub fn write_lambda(path: &Path, rows: &[LambdaRow]) -> Result<()> {
    let mut out = format!("{LAMBDA_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.source, r.target, r.lambda));
    }
    write_text(path, &out)
}

fn open_csv(path: &Path, header: &str) -> Result<csv::Reader<fs::File>> {
    let mut reader = csv::ReaderBuilder::new().from_path(path).map_err(|e| GateError::Csv {
        context: path.display().to_string(),
        source: e,
    })?;
    let found = reader
        .headers()
        .map_err(|e| GateError::Csv {
            context: path.display().to_string(),
            source: e,
        })?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    if found != header {
        return Err(GateError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("schema mismatch: expected `{header}`, found `{found}`"),
        });
    }
    Ok(reader)
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, k: usize) -> Result<T> {
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    rec.get(k)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| GateError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("bad value in column {}", k + 1),
        })
}

fn records(path: &Path, header: &str) -> Result<Vec<csv::StringRecord>> {
    open_csv(path, header)?
        .records()
        .map(|r| {
            r.map_err(|e| GateError::Csv {
                context: path.display().to_string(),
                source: e,
            })
        })
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    records(path, METRICS_HEADER)?
        .iter()
        .map(|rec| {
            let f = |k| field::<f64>(path, rec, k);
            Ok(MetricsRow {
                epoch: field(path, rec, 0)?,
                task: rec[1].to_string(),
                val_rmse: f(2)?,
                losses: LossBreakdown {
                    reg: f(3)?,
                    map: f(4)?,
                    ae: f(5)?,
                    cons: f(6)?,
                    dis: f(7)?,
                    tot: f(8)?,
                },
                seconds: if rec[9].is_empty() { None } else { Some(f(9)?) },
            })
        })
        .collect()
}

pub fn read_lambda(path: &Path) -> Result<Vec<LambdaRow>> {
    records(path, LAMBDA_HEADER)?
        .iter()
        .map(|rec| {
            Ok(LambdaRow {
                epoch: field(path, rec, 0)?,
                source: rec[1].to_string(),
                target: rec[2].to_string(),
                lambda: field(path, rec, 3)?,
            })
        })
        .collect()
}

/// JSON summary written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tasks: Vec<String>,
    pub epochs_completed: usize,
    pub stopped_early: bool,
    pub config_hash: String,
    pub initial_checksum: String,
    pub final_checksum: String,
    pub final_val_rmse: Vec<f64>,
    pub test_rmse: Vec<f64>,
    /// source-major rows
    pub initial_lambda: Vec<Vec<f64>>,
    pub final_lambda: Vec<Vec<f64>>,
}

/// A finished training run held in memory.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub summary: RunSummary,
    pub history: Vec<EpochRecord>,
}

impl RunResult {
    /// Cross-task mean validation loss per epoch.
    pub fn val_curve(&self) -> Vec<f64> {
        self.history.iter().map(EpochRecord::mean_val_loss).collect()
    }
}

fn rows_of(values: &[f64], n: usize) -> Vec<Vec<f64>> {
    values.chunks(n.max(1)).map(<[f64]>::to_vec).collect()
}

/// Train per `cfg`. With `out`, writes metrics, ratio snapshots, checkpoints
/// and a summary there; on failure the metrics so far are still written.
pub fn execute(cfg: &RunConfig, out: Option<&Path>, resume: Option<&Path>) -> Result<RunResult> {
    let mut trainer = cfg.build_trainer()?;
    let tasks: Vec<String> = trainer
        .params()
        .registry()
        .ids()
        .iter()
        .map(|t| t.to_string())
        .collect();
    let n = tasks.len();
    let hash = cfg.config_hash();
    let initial_checksum = trainer.params().checksum();
    let initial_lambda = trainer.lambda().values().to_vec();
    if let Some(path) = resume {
        let ckpt = load_for_resume(path, &hash)?;
        trainer.restore(ckpt.state)?;
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| GateError::io(format!("creating {}", dir.display()), e))?;
    }

    let write_logs = |history: &[EpochRecord]| -> Result<()> {
        if let Some(dir) = out {
            write_metrics(&dir.join("metrics.csv"), &metrics_rows(&tasks, history))?;
            write_lambda(&dir.join("lambda.csv"), &lambda_rows(&tasks, &initial_lambda, history))?;
        }
        Ok(())
    };
    let every = cfg.output.checkpoint_every;
    while !trainer.finished() {
        if let Err(e) = trainer.run_epoch(&mut |_: crate::bilevel::StepEvent<'_>| {}) {
            write_logs(trainer.history())?;
            return Err(e);
        }
        let epoch = trainer.epoch();
        if let Some(dir) = out {
            if trainer.finished() || (every > 0 && epoch % every == 0) {
                let ckpt = Checkpoint {
                    epoch,
                    config_hash: hash.clone(),
                    state: trainer.state().clone(),
                };
                save(&ckpt, &checkpoint_path(dir, epoch))?;
            }
        }
    }
    write_logs(trainer.history())?;

    let history = trainer.history().to_vec();
    let summary = RunSummary {
        tasks: tasks.clone(),
        epochs_completed: trainer.epoch(),
        stopped_early: trainer.state().stopped,
        config_hash: hash,
        initial_checksum,
        final_checksum: trainer.params().checksum(),
        final_val_rmse: history.last().map(|r| r.val_rmse.clone()).unwrap_or_default(),
        test_rmse: trainer.split_rmse(Part::Test)?,
        initial_lambda: rows_of(&initial_lambda, n),
        final_lambda: rows_of(trainer.lambda().values(), n),
    };
    if let Some(dir) = out {
        write_json(&dir.join("summary.json"), &summary)?;
        write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    }
    Ok(RunResult { summary, history })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| GateError::Json {
        context: path.display().to_string(),
        source: e,
    })?;
    text.push('\n');
    write_text(path, &text)
}

/// `train`: one run written to `out`.
pub fn run_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    execute(cfg, Some(out), resume).map(|r| r.summary)
}

/// Copy of `cfg` training with fixed ratios `value` everywhere.
pub fn with_fixed_lambda(cfg: &RunConfig, value: f64) -> RunConfig {
    let mut c = cfg.clone();
    c.bilevel.enabled = false;
    c.bilevel.lambda_init = value;
    c.bilevel.lambda_matrix = None;
    c.bilevel.lambda_min = c.bilevel.lambda_min.min(value);
    c
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    /// one value per unordered pair
    pub lambdas: Vec<f64>,
    /// held-out test RMSE per task
    pub rmse: Vec<f64>,
    pub mean_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub tasks: Vec<String>,
    pub pairs: Vec<(String, String)>,
    pub rows: Vec<GridRow>,
    /// index of the row with the lowest mean RMSE
    pub best: usize,
}

/// Cartesian product of the axes, last axis fastest.
fn product(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![vec![]], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect()
    })
}

/// Map `f` over `items` on up to `available_parallelism` threads; output
/// order matches input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let done = std::sync::Mutex::new(Vec::with_capacity(items.len()));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if k >= items.len() {
                    break;
                }
                let r = f(&items[k]);
                done.lock().expect("worker panicked").push((k, r));
            });
        }
    });
    for (k, r) in done.into_inner().expect("worker panicked") {
        slots[k] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every item mapped")).collect()
}

/// `grid`: fixed symmetric ratios for every combination of the axes.
pub fn run_grid(cfg: &RunConfig, out: Option<&Path>) -> Result<GridReport> {
    let tasks: Vec<String> = cfg
        .load_datasets()?
        .iter()
        .map(|d| d.task.to_string())
        .collect();
    let n = tasks.len();
    if n < 2 {
        return Err(GateError::config("grid", "needs at least two tasks"));
    }
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let axes = match &cfg.grid.axes {
        Some(a) if a.len() != pairs.len() => {
            return Err(GateError::config(
                "grid.axes",
                format!("{} axes given for {} task pairs", a.len(), pairs.len()),
            ))
        }
        Some(a) => a.clone(),
        None => vec![cfg.grid.values.clone(); pairs.len()],
    };
    if axes.iter().any(Vec::is_empty) {
        return Err(GateError::config("grid.axes", "empty axis"));
    }

    let combos = product(&axes);
    let rows = parallel_map(&combos, |combo| -> Result<GridRow> {
        let mut matrix = vec![vec![0.0; n]; n];
        for (&(i, j), &v) in pairs.iter().zip(combo) {
            matrix[i][j] = v;
            matrix[j][i] = v;
        }
        let mut c = cfg.clone();
        c.bilevel.enabled = false;
        c.bilevel.symmetric = true;
        c.bilevel.lambda_min = 0.0;
        c.bilevel.lambda_init = 0.0;
        c.bilevel.lambda_matrix = Some(matrix);
        let rmse = execute(&c, None, None)?.summary.test_rmse;
        let mean_rmse = rmse.iter().sum::<f64>() / n as f64;
        Ok(GridRow {
            lambdas: combo.clone(),
            rmse,
            mean_rmse,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let best = rows
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.mean_rmse.total_cmp(&b.1.mean_rmse))
        .map(|(i, _)| i)
        .expect("nonempty grid");
    let report = GridReport {
        pairs: pairs
            .iter()
            .map(|&(i, j)| (tasks[i].clone(), tasks[j].clone()))
            .collect(),
        tasks,
        rows,
        best,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| GateError::io(format!("creating {}", dir.display()), e))?;
        write_text(&dir.join("grid.csv"), &grid_csv(&report))?;
    }
    Ok(report)
}

pub fn grid_csv(report: &GridReport) -> String {
    let mut head = vec!["run".to_string()];
    head.extend(report.pairs.iter().map(|(a, b)| format!("lambda_{a}_{b}")));
    head.extend(report.tasks.iter().map(|t| format!("rmse_{t}")));
    head.push("mean_rmse".into());
    head.push("best".into());
    let mut out = head.join(",") + "\n";
    for (k, row) in report.rows.iter().enumerate() {
        let mut cells = vec![k.to_string()];
        cells.extend(row.lambdas.iter().map(f64::to_string));
        cells.extend(row.rmse.iter().map(f64::to_string));
        cells.push(row.mean_rmse.to_string());
        cells.push(if k == report.best { "*".into() } else { String::new() });
        out.push_str(&(cells.join(",") + "\n"));
    }
    out
}

/// Per-seed outcome of both arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub initial_checksum: String,
    pub baseline_rmse: Vec<f64>,
    pub bilevel_rmse: Vec<f64>,
    /// cross-task mean validation loss per epoch
    pub baseline_curve: Vec<f64>,
    pub bilevel_curve: Vec<f64>,
    pub bilevel_final_lambda: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub tasks: Vec<String>,
    pub fixed_lambda: f64,
    /// final validation RMSE per task, averaged over seeds
    pub baseline_rmse: Vec<f64>,
    pub bilevel_rmse: Vec<f64>,
    /// tasks where the learned-ratio arm has the lower RMSE
    pub improved: usize,
    /// mean over tasks of bilevel/baseline (1.0 = parity)
    pub mean_ratio: f64,
    /// mean bilevel RMSE over mean baseline RMSE
    pub ratio_of_means: f64,
    pub seeds: Vec<SeedComparison>,
}

/// `compare`: fixed-ratio baseline against learned ratios on the same seeds.
pub fn run_compare(
    cfg: &RunConfig,
    seeds: &[u64],
    fixed_lambda: f64,
    out: Option<&Path>,
) -> Result<ComparisonReport> {
    if seeds.is_empty() {
        return Err(GateError::InvalidArgument("compare needs at least one seed".into()));
    }
    let per_seed = parallel_map(seeds, |&seed| -> Result<(Vec<String>, SeedComparison)> {
        let mut base_cfg = with_fixed_lambda(cfg, fixed_lambda);
        base_cfg.train.seed = seed;
        let mut bi_cfg = cfg.clone();
        bi_cfg.bilevel.enabled = true;
        bi_cfg.bilevel.lambda_init = fixed_lambda;
        bi_cfg.bilevel.lambda_matrix = None;
        bi_cfg.train.seed = seed;
        let base = execute(&base_cfg, None, None)?;
        let bi = execute(&bi_cfg, None, None)?;
        if base.summary.initial_checksum != bi.summary.initial_checksum {
            return Err(GateError::InvalidArgument(
                "compare arms started from different parameters".into(),
            ));
        }
        Ok((
            base.summary.tasks.clone(),
            SeedComparison {
                seed,
                initial_checksum: base.summary.initial_checksum.clone(),
                baseline_curve: base.val_curve(),
                bilevel_curve: bi.val_curve(),
                baseline_rmse: base.summary.final_val_rmse,
                bilevel_rmse: bi.summary.final_val_rmse,
                bilevel_final_lambda: bi.summary.final_lambda,
            },
        ))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let tasks = per_seed[0].0.clone();
    let per_seed: Vec<SeedComparison> = per_seed.into_iter().map(|(_, s)| s).collect();
    let n = tasks.len();
    let avg = |f: &dyn Fn(&SeedComparison) -> &Vec<f64>| -> Vec<f64> {
        (0..n)
            .map(|i| per_seed.iter().map(|s| f(s)[i]).sum::<f64>() / per_seed.len() as f64)
            .collect()
    };
    let baseline_rmse = avg(&|s| &s.baseline_rmse);
    let bilevel_rmse = avg(&|s| &s.bilevel_rmse);
    let report = comparison_from(tasks, fixed_lambda, baseline_rmse, bilevel_rmse, per_seed);
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| GateError::io(format!("creating {}", dir.display()), e))?;
        let mut csv = String::from("task,baseline_rmse,bilevel_rmse,ratio\n");
        for i in 0..n {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                report.tasks[i],
                report.baseline_rmse[i],
                report.bilevel_rmse[i],
                report.bilevel_rmse[i] / report.baseline_rmse[i]
            ));
        }
        write_text(&dir.join("compare.csv"), &csv)?;
        write_json(&dir.join("compare.json"), &report)?;
    }
    Ok(report)
}

/// Assemble the aggregate columns from per-task RMSE.
pub fn comparison_from(
    tasks: Vec<String>,
    fixed_lambda: f64,
    baseline_rmse: Vec<f64>,
    bilevel_rmse: Vec<f64>,
    seeds: Vec<SeedComparison>,
) -> ComparisonReport {
    let n = tasks.len() as f64;
    let improved = baseline_rmse
        .iter()
        .zip(&bilevel_rmse)
        .filter(|(b, g)| g < b)
        .count();
    let mean_ratio = baseline_rmse
        .iter()
        .zip(&bilevel_rmse)
        .map(|(b, g)| g / b)
        .sum::<f64>()
        / n;
    let ratio_of_means = bilevel_rmse.iter().sum::<f64>() / baseline_rmse.iter().sum::<f64>();
    ComparisonReport {
        tasks,
        fixed_lambda,
        baseline_rmse,
        bilevel_rmse,
        improved,
        mean_ratio,
        ratio_of_means,
        seeds,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub source: String,
    pub target: String,
    pub quadratic_variation: f64,
    pub final_lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaReport {
    pub threshold: f64,
    pub pairs: Vec<PairDiagnostics>,
    /// share of pairs whose quadratic variation is below the threshold
    pub fraction_below: f64,
}

/// `(source, target)` with its `(epoch, lambda)` points.
pub type Trajectory = ((String, String), Vec<(usize, f64)>);

/// Per-pair trajectories from a run's `lambda.csv`, ordered by epoch.
pub fn lambda_trajectories(run_dir: &Path) -> Result<Vec<Trajectory>> {
    let rows = read_lambda(&run_dir.join("lambda.csv"))?;
    let mut pairs: Vec<Trajectory> = Vec::new();
    for r in rows {
        let key = (r.source, r.target);
        match pairs.iter_mut().find(|(k, _)| *k == key) {
            Some((_, traj)) => traj.push((r.epoch, r.lambda)),
            None => pairs.push((key, vec![(r.epoch, r.lambda)])),
        }
    }
    for (_, traj) in &mut pairs {
        traj.sort_by_key(|&(e, _)| e);
    }
    Ok(pairs)
}

/// `lambda-report`: quadratic variation per pair of a finished run.
pub fn report_lambda(run_dir: &Path, threshold: f64, out: Option<&Path>) -> Result<LambdaReport> {
    if !(threshold >= 0.0) {
        return Err(GateError::InvalidArgument(format!("threshold must be >= 0, got {threshold}")));
    }
    let trajectories = lambda_trajectories(run_dir)?;
    if trajectories.is_empty() {
        return Err(GateError::InvalidArgument(format!(
            "{} has no ratio snapshots",
            run_dir.display()
        )));
    }
    let mut pairs = Vec::with_capacity(trajectories.len());
    for ((source, target), traj) in &trajectories {
        let values: Vec<f64> = traj.iter().map(|&(_, v)| v).collect();
        let qv = quadratic_variation(&values).map_err(|_| {
            GateError::InvalidArgument(format!(
                "pair {source} -> {target} has fewer than 2 snapshots"
            ))
        })?;
        pairs.push(PairDiagnostics {
            source: source.clone(),
            target: target.clone(),
            quadratic_variation: qv,
            final_lambda: *values.last().expect("nonempty"),
        });
    }
    let below = pairs.iter().filter(|p| p.quadratic_variation < threshold).count();
    let report = LambdaReport {
        threshold,
        fraction_below: below as f64 / pairs.len() as f64,
        pairs,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| GateError::io(format!("creating {}", dir.display()), e))?;
        let mut csv = String::from("source,target,quadratic_variation,final_lambda\n");
        for p in &report.pairs {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                p.source, p.target, p.quadratic_variation, p.final_lambda
            ));
        }
        write_text(&dir.join("lambda_report.csv"), &csv)?;
        let mut traj = String::from("source,target,epoch,lambda\n");
        for ((s, t), points) in &trajectories {
            for (e, v) in points {
                traj.push_str(&format!("{s},{t},{e},{v}\n"));
            }
        }
        write_text(&dir.join("lambda_trajectories.csv"), &traj)?;
        write_json(&dir.join("lambda_report.json"), &report)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub run: String,
    pub epoch: usize,
    pub task: String,
    /// validation MSE (squared RMSE)
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveSummary {
    pub run: String,
    pub epoch: usize,
    pub mean: f64,
    /// population std across tasks
    pub std: f64,
}

/// `curves`: merge runs into long-format validation curves plus the
/// per-epoch mean and spread across tasks.
pub fn emit_curves(runs: &[PathBuf], out: Option<&Path>) -> Result<(Vec<CurvePoint>, Vec<CurveSummary>)> {
    if runs.is_empty() {
        return Err(GateError::InvalidArgument("curves needs at least one run".into()));
    }
    let mut points = Vec::new();
    let mut task_set: Option<Vec<String>> = None;
    for dir in runs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let path = dir.join("metrics.csv");
        let rows = read_metrics(&path)?;
        let mut tasks: Vec<String> = rows.iter().map(|r| r.task.clone()).collect();
        tasks.sort();
        tasks.dedup();
        match &task_set {
            None => task_set = Some(tasks),
            Some(t) if *t != tasks => {
                return Err(GateError::Parse {
                    path,
                    line: 1,
                    message: format!("schema mismatch: tasks {tasks:?} differ from {t:?}"),
                })
            }
            Some(_) => {}
        }
        points.extend(rows.into_iter().map(|r| CurvePoint {
            run: name.clone(),
            epoch: r.epoch,
            task: r.task,
            val_loss: r.val_rmse * r.val_rmse,
        }));
    }
    points.sort_by(|a, b| {
        (&a.run, a.epoch, &a.task).cmp(&(&b.run, b.epoch, &b.task))
    });

    let mut summary = Vec::new();
    for chunk in points.chunk_by(|a, b| a.run == b.run && a.epoch == b.epoch) {
        let k = chunk.len() as f64;
        let mean = chunk.iter().map(|p| p.val_loss).sum::<f64>() / k;
        let var = chunk.iter().map(|p| (p.val_loss - mean).powi(2)).sum::<f64>() / k;
        summary.push(CurveSummary {
            run: chunk[0].run.clone(),
            epoch: chunk[0].epoch,
            mean,
            std: var.sqrt(),
        });
    }

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| GateError::io(format!("creating {}", dir.display()), e))?;
        let mut long = String::from("run,epoch,task,val_loss\n");
        for p in &points {
            long.push_str(&format!("{},{},{},{}\n", p.run, p.epoch, p.task, p.val_loss));
        }
        write_text(&dir.join("curves.csv"), &long)?;
        let mut agg = String::from("run,epoch,mean_val_loss,std_val_loss\n");
        for s in &summary {
            agg.push_str(&format!("{},{},{},{}\n", s.run, s.epoch, s.mean, s.std));
        }
        write_text(&dir.join("curves_summary.csv"), &agg)?;
    }
    Ok((points, summary))
}

/// `synth`: write the configured synthetic suite as task CSVs plus a manifest.
pub fn synth(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    if cfg.data.synthetic.is_none() {
        return Err(GateError::config("data.synthetic", "synth needs a synthetic spec"));
    }
    let datasets = cfg.load_datasets()?;
    fs::create_dir_all(out).map_err(|e| GateError::io(format!("creating {}", out.display()), e))?;
    let mut written = Vec::new();
    let mut manifest = String::from("name,abbreviation,count\n");
    for ds in &datasets {
        let path = out.join(format!("{}.csv", ds.task));
        write_task_csv(&path, ds)?;
        manifest.push_str(&format!("synthetic {},{},{}\n", ds.task, ds.task, ds.len()));
        written.push(path);
    }
    let mpath = out.join("manifest.csv");
    write_text(&mpath, &manifest)?;
    written.push(mpath);
    Ok(written)
}
