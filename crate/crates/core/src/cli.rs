//! Command-line front end: `train`, `compare`, `verify`, `merge`, `bench`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::{Map, Value};

use crate::adapter::checkpoint::{decode_layer, decode_section, encode_layer, SectionKind};
use crate::adapter::{AdapterConfig, AdapterLayer, Mode};
use crate::error::{Error, Result};
use crate::linalg::{derive_seed, gaussian_from, matmul_calls, rng_from_seed, Matrix};
use crate::model::{decode_net, encode_net, merge_all};
use crate::optim::OptimConfig;
use crate::train::{compare_variants, run_task, RunConfig, TaskSpec};
use crate::verify;

pub const THREADS_ENV: &str = "D2LORA_THREADS";

pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "adapter.d2la";

#[derive(Debug, Parser)]
#[command(name = "d2lora", version, about = "Signed low-rank adapters with directional projection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one adapter and write its trace, report and checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; falls back to `run.out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train LoRA, DoRA-like and the signed adapter over several seeds; CSV to stdout.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Run property checks and print a JSON report.
    Verify {
        #[arg(long, default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fold the adapter of a checkpoint into its base weights.
    Merge {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time merged against unmerged evaluation; CSV to stdout.
    Bench {
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 20)]
        iters: usize,
    },
}

/// Fully resolved configuration of a train or compare run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CliConfig {
    pub task: TaskSpec,
    pub adapter: AdapterConfig,
    pub optim: OptimConfig,
    pub run: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

const SECTIONS: [&str; 4] = ["task", "adapter", "optim", "run"];

fn section<T: serde::de::DeserializeOwned>(name: &str, value: Value) -> Result<T> {
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{name}: {e}")))
}

impl CliConfig {
    /// Parse a config document. Missing sections and keys take defaults; unknown
    /// keys are rejected. Optimiser defaults are sized to the run: `lr = 1e-2`,
    /// `total_steps` from epochs and batch size, warmup a tenth of that.
    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let Value::Object(mut root) = root else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        if let Some(key) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown config section {key:?}")));
        }
        let mut take = |name: &str| -> Result<Map<String, Value>> {
            match root.remove(name) {
                None => Ok(Map::new()),
                Some(Value::Object(m)) => Ok(m),
                Some(_) => Err(Error::Config(format!("{name}: expected an object"))),
            }
        };
        let task: TaskSpec = section("task", Value::Object(take("task")?))?;
        let adapter: AdapterConfig = section("adapter", Value::Object(take("adapter")?))?;
        let mut run_map = take("run")?;
        let out_dir = match run_map.remove("out_dir") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(PathBuf::from(s)),
            Some(_) => return Err(Error::Config("run.out_dir: expected a string".into())),
        };
        let run: RunConfig = section("run", Value::Object(run_map))?;
        task.validate()?;
        adapter.validate()?;
        run.validate()?;

        let total = run.total_steps(task.n - task.holdout).max(1);
        let desk =
            OptimConfig { lr: 1e-2, warmup_steps: (total / 10).max(1), total_steps: total, ..OptimConfig::default() };
        let Value::Object(mut optim_map) = serde_json::to_value(&desk)? else {
            unreachable!("OptimConfig serializes to an object")
        };
        optim_map.extend(take("optim")?);
        let optim: OptimConfig = section("optim", Value::Object(optim_map))?;
        optim.validate()?;
        Ok(Self { task, adapter, optim, run, out_dir })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Adapter config for a run: the init seed follows `run.seed`.
    pub fn seeded_adapter(&self) -> AdapterConfig {
        AdapterConfig { seed: self.run.seed, ..self.adapter.clone() }
    }
}

/// Write through a temporary file in the destination directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn cmd_train(config: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let cfg = CliConfig::load(config)?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("no output directory: pass --out or set run.out_dir".into()))?;
    let (student, report) = run_task(&cfg.task, &cfg.seeded_adapter(), &cfg.optim, &cfg.run)?;

    let mut csv = String::from("step,lr,loss,eval_loss\n");
    for (k, ((loss, eval), lr)) in report.trace.iter().zip(&report.eval_trace).zip(&report.learning_rates).enumerate() {
        writeln!(csv, "{},{lr:e},{loss:e},{eval:e}", k + 1).expect("write to String");
    }
    std::fs::create_dir_all(&out)?;
    write_atomic(&out.join(TRACE_FILE), csv.as_bytes())?;
    write_atomic(&out.join(REPORT_FILE), serde_json::to_string_pretty(&report)?.as_bytes())?;
    write_atomic(&out.join(CONFIG_FILE), serde_json::to_string_pretty(&cfg)?.as_bytes())?;
    write_atomic(&out.join(CHECKPOINT_FILE), &student.encode()?)?;
    eprintln!(
        "steps {} final_loss {:.6e} sigma_diff {:.6e} clamp_events {} -> {}",
        report.steps,
        report.final_loss,
        report.sigma_diff,
        report.clamp_events,
        out.display()
    );
    Ok(out)
}

/// Variant CSV for seeds `run.seed .. run.seed + seeds`.
pub fn cmd_compare(config: &Path, seeds: usize) -> Result<String> {
    let cfg = CliConfig::load(config)?;
    let seeds: Vec<u64> = (0..seeds as u64).map(|i| cfg.run.seed + i).collect();
    let cmp = compare_variants(&cfg.task, &seeds, &cfg.adapter, &cfg.optim, &cfg.run, threads_from_env()?)?;
    for s in &cmp.summary {
        eprintln!(
            "{:<6} median final_loss {:.6e} median sigma_diff {:.6e}",
            s.variant.name(),
            s.median_final_loss,
            s.median_sigma_diff
        );
    }
    Ok(cmp.to_csv())
}

pub fn cmd_merge(ckpt: &Path, out: &Path) -> Result<()> {
    let bytes = std::fs::read(ckpt)?;
    let (header, _, _) = decode_section(&bytes)?;
    let merged = match header.kind {
        SectionKind::Network => {
            let mut net = decode_net(&bytes)?;
            merge_all(&mut net)?;
            encode_net(&net)?
        }
        SectionKind::Adapter => {
            let mut layer = decode_layer(&bytes)?;
            layer.merge()?;
            encode_layer(&layer)?
        }
        SectionKind::Linear => return Err(Error::Format("a bare linear section has no adapter to merge".into())),
    };
    write_atomic(out, &merged)
}

pub const BENCH_HEADER: &str = "iter,unmerged_us,merged_us";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub iter: usize,
    pub unmerged_us: f64,
    pub merged_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Total unmerged time over total merged time; `None` without iterations.
    pub speedup: Option<f64>,
    /// Matrix products per merged call, from the operation counter.
    pub merged_matmuls_per_call: u64,
    pub unmerged_matmuls_per_call: u64,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{BENCH_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{},{:.3},{:.3}", r.iter, r.unmerged_us, r.merged_us).expect("write to String");
        }
        s
    }
}

/// One `dim × dim` adapted layer with trained-looking factors, timed in eval
/// mode unmerged and merged on the same `batch × dim` input.
pub fn run_bench(dim: usize, batch: usize, iters: usize) -> Result<BenchReport> {
    if dim == 0 || batch == 0 {
        return Err(Error::Config("bench needs dim > 0 and batch > 0".into()));
    }
    let mut rng = rng_from_seed(derive_seed(0, 7));
    let cfg = AdapterConfig { rank_plus: 4.min(dim), rank_minus: 4.min(dim), ..Default::default() };
    let w0 = gaussian_from(&mut rng, dim, dim, 1.0 / (dim as f64).sqrt());
    let mut layer = AdapterLayer::new(w0, crate::linalg::Vector::zeros(dim), cfg.clone())?;
    let a_plus = gaussian_from(&mut rng, dim, cfg.rank_plus, 0.05);
    let b_plus = gaussian_from(&mut rng, cfg.rank_plus, dim, 0.05);
    let minus = crate::adapter::MinusBranch {
        a: gaussian_from(&mut rng, dim, cfg.rank_minus, 0.05),
        b: gaussian_from(&mut rng, cfg.rank_minus, dim, 0.05),
    };
    layer.set_factors(a_plus, b_plus, Some(minus))?;
    let x = gaussian_from(&mut rng, batch, dim, 1.0);
    let mut merged = layer.clone();
    merged.merge()?;

    let count = |f: &dyn Fn() -> Result<Matrix>| -> Result<u64> {
        let before = matmul_calls();
        f()?;
        Ok(matmul_calls() - before)
    };
    let unmerged_call = || layer.forward(&x, Mode::Eval, &mut rng_from_seed(0)).map(|(y, _)| y);
    let merged_call = || merged.merged_forward(&x);
    let unmerged_matmuls_per_call = count(&unmerged_call)?;
    let merged_matmuls_per_call = count(&merged_call)?;

    let time = |f: &dyn Fn() -> Result<Matrix>| -> Result<f64> {
        let start = Instant::now();
        std::hint::black_box(f()?);
        Ok(start.elapsed().as_secs_f64() * 1e6)
    };
    let mut rows = Vec::with_capacity(iters);
    for iter in 0..iters {
        let unmerged_us = time(&unmerged_call)?;
        let merged_us = time(&merged_call)?;
        rows.push(BenchRow { iter, unmerged_us, merged_us });
    }
    let speedup = (!rows.is_empty())
        .then(|| rows.iter().map(|r| r.unmerged_us).sum::<f64>() / rows.iter().map(|r| r.merged_us).sum::<f64>());
    Ok(BenchReport { rows, speedup, merged_matmuls_per_call, unmerged_matmuls_per_call })
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, out } => {
            cmd_train(&config, out.as_deref())?;
            Ok(EXIT_OK)
        }
        Command::Compare { config, seeds } => {
            print!("{}", cmd_compare(&config, seeds)?);
            Ok(EXIT_OK)
        }
        Command::Verify { suite, seed } => {
            let report = verify::run_suite(&suite, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.pass { EXIT_OK } else { EXIT_FAILED })
        }
        Command::Merge { ckpt, out } => {
            cmd_merge(&ckpt, &out)?;
            Ok(EXIT_OK)
        }
        Command::Bench { dim, batch, iters } => {
            let report = run_bench(dim, batch, iters)?;
            print!("{}", report.to_csv());
            match report.speedup {
                Some(s) => eprintln!(
                    "speedup {s:.3} (unmerged/merged), matmuls per call {} unmerged, {} merged",
                    report.unmerged_matmuls_per_call, report.merged_matmuls_per_call
                ),
                None => eprintln!("no iterations"),
            }
            Ok(EXIT_OK)
        }
    }
}

/// Parse arguments, run, and map the outcome to an exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let threads = match threads_from_env() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USAGE;
        }
    };
    if let Some(n) = threads {
        // Only fails if a global pool already exists, which leaves its size unchanged.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NonFinite { .. } => EXIT_FAILED,
                _ => EXIT_USAGE,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_run_length() {
        let cfg = CliConfig::from_json("{}").unwrap();
        assert_eq!(cfg.optim.total_steps, 28);
        assert_eq!(cfg.optim.warmup_steps, 2);
        assert_eq!(cfg.optim.lr, 1e-2);
        assert_eq!(cfg.optim.weight_decay, 0.01);
        assert_eq!(cfg.adapter, AdapterConfig::default());
    }

    #[test]
    fn explicit_optim_keys_win() {
        let cfg = CliConfig::from_json(r#"{"optim": {"lr": 5e-5, "warmup_steps": 100, "total_steps": 1000}}"#).unwrap();
        assert_eq!((cfg.optim.lr, cfg.optim.warmup_steps, cfg.optim.total_steps), (5e-5, 100, 1000));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in [
            r#"{"tsak": {}}"#,
            r#"{"task": {"noize": 0.1}}"#,
            r#"{"adapter": {"rank": 4}}"#,
            r#"{"optim": {"learning_rate": 1.0}}"#,
            r#"{"run": {"epoch": 1}}"#,
            r#"[1]"#,
        ] {
            assert!(matches!(CliConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn out_dir_is_read_from_run() {
        let cfg = CliConfig::from_json(r#"{"run": {"out_dir": "runs/a", "seed": 3}}"#).unwrap();
        assert_eq!(cfg.out_dir, Some(PathBuf::from("runs/a")));
        assert_eq!(cfg.seeded_adapter().seed, 3);
    }

    #[test]
    fn missing_config_names_the_path() {
        let err = CliConfig::load(Path::new("/no/such/config.json")).unwrap_err();
        assert!(err.to_string().contains("/no/such/config.json"), "{err}");
    }

    #[test]
    fn bench_shapes() {
        let r = run_bench(32, 4, 0).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.speedup, None);
        assert_eq!(r.to_csv(), format!("{BENCH_HEADER}\n"));
        assert_eq!(r.merged_matmuls_per_call, 1);
        assert!(r.unmerged_matmuls_per_call > 1);
        assert_eq!(run_bench(16, 2, 3).unwrap().rows.len(), 3);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["d2lora", "verify", "--suite", "nope"]), EXIT_USAGE);
        assert_eq!(run(["d2lora", "verify", "--suite", "forced_failure"]), EXIT_FAILED);
        assert_eq!(run(["d2lora", "verify", "--suite", "lora_reduction"]), EXIT_OK);
        assert_eq!(run(["d2lora", "train", "--config", "/no/such.json", "--out", "/tmp/x"]), EXIT_USAGE);
        assert_eq!(run(["d2lora", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn atomic_write_replaces_contents() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"second");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
