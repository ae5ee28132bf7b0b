use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gate_core::config::RunConfig;
use gate_core::harness;
use gate_core::Result;

#[derive(Parser)]
#[command(name = "gate", version, about = "Multi-task regression with learned transfer ratios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, ratio snapshots and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// overrides train.seed
        #[arg(long)]
        seed: Option<u64>,
        /// train with every ratio fixed at this value (outer loop off)
        #[arg(long)]
        fixed_lambda: Option<f64>,
        /// overrides output.dir
        #[arg(long)]
        out: Option<PathBuf>,
        /// checkpoint file to continue from
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fixed symmetric ratios over the grid axes.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fixed-ratio baseline against learned ratios; repeat --seed for several seeds.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long, default_value_t = 1.0)]
        fixed_lambda: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Quadratic variation of each ratio trajectory in a run directory.
    LambdaReport {
        run: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        threshold: f64,
        /// defaults to the run directory
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge validation curves of one or more run directories.
    Curves {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured synthetic suite as CSV files.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// overrides data.seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            seed,
            fixed_lambda,
            out,
            resume,
        } => {
            let mut cfg = load(&config, seed)?;
            if let Some(v) = fixed_lambda {
                cfg = harness::with_fixed_lambda(&cfg, v);
                cfg.validate()?;
            }
            let out = out.unwrap_or_else(|| cfg.output.dir.clone());
            let s = harness::run_train(&cfg, &out, resume.as_deref())?;
            println!("trained {} epochs -> {}", s.epochs_completed, out.display());
            for (task, rmse) in s.tasks.iter().zip(&s.test_rmse) {
                println!("  {task}: test rmse {rmse:.6}");
            }
        }
        Command::Grid { config, seed, out } => {
            let cfg = load(&config, seed)?;
            let out = out.unwrap_or_else(|| cfg.output.dir.clone());
            let r = harness::run_grid(&cfg, Some(&out))?;
            let best = &r.rows[r.best];
            println!(
                "{} grid points; best {:?} mean rmse {:.6} -> {}",
                r.rows.len(),
                best.lambdas,
                best.mean_rmse,
                out.join("grid.csv").display()
            );
        }
        Command::Compare {
            config,
            seed,
            fixed_lambda,
            out,
        } => {
            let cfg = load(&config, None)?;
            let seeds = if seed.is_empty() { vec![cfg.train.seed] } else { seed };
            let out = out.unwrap_or_else(|| cfg.output.dir.clone());
            let r = harness::run_compare(&cfg, &seeds, fixed_lambda, Some(&out))?;
            println!(
                "improved {}/{} tasks; mean rmse ratio {:.4}; ratio of means {:.4}",
                r.improved,
                r.tasks.len(),
                r.mean_ratio,
                r.ratio_of_means
            );
        }
        Command::LambdaReport { run, threshold, out } => {
            let out = out.unwrap_or_else(|| run.clone());
            let r = harness::report_lambda(&run, threshold, Some(&out))?;
            println!(
                "{:.3} of {} pairs have quadratic variation below {}",
                r.fraction_below,
                r.pairs.len(),
                r.threshold
            );
        }
        Command::Curves { runs, out } => {
            let (points, _) = harness::emit_curves(&runs, Some(&out))?;
            println!("{} curve rows -> {}", points.len(), out.join("curves.csv").display());
        }
        Command::Synth { config, seed, out } => {
            let mut cfg = RunConfig::from_path(&config)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            for p in harness::synth(&cfg, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use std::fs;

    use gate_core::harness::{read_lambda, METRICS_HEADER};

    use super::*;

    const TWO_TASKS: &str = r#"
[model]
d_x = 4
d_z = 4
d_m = 2
embed_hidden = [8]
map_hidden = []

[train]
epochs = 4
batch_size = 16
seed = 3

[data]
seed = 1

[data.synthetic]
task_names = ["a", "b"]
d_x = 4
latent_dim = 2
loadings = [[1.0, 0.0], [0.8, 0.6]]
noise_std = [0.1, 0.1]
samples = 60
"#;

    fn gate(args: &[&str]) -> Result<()> {
        run(Cli::try_parse_from(std::iter::once("gate").chain(args.iter().copied())).unwrap())
    }

    fn write_config(dir: &Path, text: &str) -> String {
        let path = dir.join("run.toml");
        fs::write(&path, text).unwrap();
        path.to_str().unwrap().to_string()
    }

    #[test]
    fn train_fixed_lambda_has_constant_column() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_config(tmp.path(), TWO_TASKS);
        let out = tmp.path().join("fixed");
        gate(&["train", "--config", &cfg, "--fixed-lambda", "1.0", "--out", out.to_str().unwrap()]).unwrap();
        let rows = read_lambda(&out.join("lambda.csv")).unwrap();
        assert_eq!(rows.len(), 5 * 2);
        assert!(rows.iter().all(|r| r.lambda == 1.0));
    }

    #[test]
    fn rerun_is_bitwise_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_config(tmp.path(), TWO_TASKS);
        let mut files = Vec::new();
        for name in ["one", "two"] {
            let out = tmp.path().join(name);
            gate(&["train", "--seed", "11", "--config", &cfg, "--out", out.to_str().unwrap()]).unwrap();
            files.push((
                fs::read(out.join("metrics.csv")).unwrap(),
                fs::read(out.join("lambda.csv")).unwrap(),
                fs::read(out.join("summary.json")).unwrap(),
            ));
        }
        assert!(files[0] == files[1]);
    }

    #[test]
    fn exit_codes() {
        let tmp = tempfile::tempdir().unwrap();
        let bad = write_config(tmp.path(), &TWO_TASKS.replace("batch_size = 16", "batch_size = -1"));
        let err = gate(&["train", "--config", &bad]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("train.batch_size"));

        let err = gate(&["train", "--config", "/nonexistent/run.toml"]).unwrap_err();
        assert_eq!(err.exit_code(), 4);

        let diverging = write_config(tmp.path(), &TWO_TASKS.replace("seed = 3", "seed = 3\ndivergence_threshold = 1e-3"));
        let out = tmp.path().join("diverged");
        let err = gate(&["train", "--config", &diverging, "--out", out.to_str().unwrap()]).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let text = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
    }

    #[test]
    fn every_verb_writes_its_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let text = TWO_TASKS.replace("epochs = 4", "epochs = 2") + "\n[grid]\nvalues = [0.5]\n";
        let cfg = write_config(tmp.path(), &text);
        let dir = |n: &str| tmp.path().join(n).to_str().unwrap().to_string();

        gate(&["train", "--config", &cfg, "--out", &dir("run")]).unwrap();
        gate(&["lambda-report", &dir("run"), "--threshold", "0.5"]).unwrap();
        assert!(tmp.path().join("run/lambda_report.json").exists());
        gate(&["curves", &dir("run"), "--out", &dir("curves")]).unwrap();
        assert!(tmp.path().join("curves/curves_summary.csv").exists());
        gate(&["grid", "--config", &cfg, "--out", &dir("grid")]).unwrap();
        assert!(tmp.path().join("grid/grid.csv").exists());
        gate(&["compare", "--config", &cfg, "--seed", "1", "--seed", "2", "--out", &dir("cmp")]).unwrap();
        assert!(tmp.path().join("cmp/compare.json").exists());
        gate(&["synth", "--config", &cfg, "--seed", "9", "--out", &dir("data")]).unwrap();
        assert!(tmp.path().join("data/manifest.csv").exists());
    }
}
