//! Command-line surface.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::cache::{self, CacheExpectation};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{self, Method};
use crate::expert;
use crate::policy::{self, Policy};
use crate::runtime::{self, TrialSpec};

#[derive(Debug, Parser)]
#[command(name = "promptgrasp", about = "Prompt-conditioned grasping: data, training and evaluation")]
struct Cli {
    /// JSON configuration document.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override: dataset seed, training seed or first evaluation seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out the scripted expert and write a demonstration dataset.
    GenDemos {
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Run a dataset through a frozen extractor and cache the features.
    CacheFeatures {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        method: Method,
    },
    /// Train an action head on a feature cache.
    Train {
        #[arg(long)]
        cache: PathBuf,
        /// Also write the per-epoch loss curve as CSV.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Success rate of one checkpoint at one occlusion level.
    Eval {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        p: f64,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// All methods at p = 0 on shared seeds.
    Compare {
        /// `method=path`, repeated.
        #[arg(long = "checkpoint", value_parser = parse_pair, required = true)]
        checkpoints: Vec<(Method, PathBuf)>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Method × occlusion-level grid.
    SweepOcclusion {
        #[arg(long = "checkpoint", value_parser = parse_pair, required = true)]
        checkpoints: Vec<(Method, PathBuf)>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<f64>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// One episode with its full command log.
    RunEpisode {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene_seed: u64,
        #[arg(long, default_value_t = 0.0)]
        p: f64,
        /// Use the two-thread scheduler instead of lockstep.
        #[arg(long)]
        threaded: bool,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(Method, PathBuf), String> {
    let (m, p) = s
        .split_once('=')
        .ok_or_else(|| format!("expected method=path, got {s:?}"))?;
    let method = m.parse::<Method>().map_err(|e| e.to_string())?;
    Ok((method, PathBuf::from(p)))
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn require_out(out: &Option<PathBuf>) -> Result<&Path> {
    out.as_deref()
        .ok_or_else(|| Error::InvalidArgument("--out is required for this command".into()))
}

fn load_policies(pairs: &[(Method, PathBuf)], cfg: &Config) -> Result<Vec<(Method, Policy)>> {
    let width = cfg.perception.feature_width();
    pairs
        .iter()
        .map(|(m, path)| Ok((*m, policy::load_checkpoint(path, Some((m.kind(), width)))?)))
        .collect()
}

fn write_report(dir: &Path, stem: &str, report: &eval::Report) -> Result<()> {
    write_atomic(&dir.join(format!("{stem}.csv")), report.to_csv()?.as_bytes())?;
    write_atomic(&dir.join(format!("{stem}.json")), report.to_json().as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    match cli.command {
        Command::GenDemos { episodes } => {
            let out = require_out(&cli.out)?;
            let n = episodes.unwrap_or(cfg.eval.n_demos);
            let ds = expert::generate_dataset(&cfg.sim, &cfg.expert, n, cli.seed.unwrap_or(0))?;
            write_atomic(out, &ds.to_bytes())?;
            log::info!("wrote {} episodes to {}", ds.episodes.len(), out.display());
        }
        Command::CacheFeatures { dataset, method } => {
            let out = require_out(&cli.out)?;
            let c = cache::extract_and_cache_file(&dataset, method.kind(), &cfg.cache_options())?;
            write_atomic(out, &c.to_bytes())?;
            log::info!("cached {} records to {}", c.records.len(), out.display());
        }
        Command::Train { cache: cache_path, loss_csv } => {
            let out = require_out(&cli.out)?;
            let mut train_cfg = cfg.train.clone();
            if let Some(s) = cli.seed {
                train_cfg.seed = s;
            }
            let expect = CacheExpectation {
                k: Some(train_cfg.chunk_len),
                ..CacheExpectation::default()
            };
            let c = cache::read_cache(&cache_path, &expect)?;
            if c.header.feature_dim != cfg.perception.feature_width() {
                return Err(Error::Dimension(format!(
                    "cache feature width {} != configured {}",
                    c.header.feature_dim,
                    cfg.perception.feature_width()
                )));
            }
            let (policy, curve) = policy::train(&c, &train_cfg)?;
            policy::save_checkpoint(&policy, out)?;
            if let Some(p) = loss_csv {
                write_atomic(&p, policy::loss_curve_csv(&curve).as_bytes())?;
            }
            log::info!("final loss {:.4e}", curve.last().copied().unwrap_or(f64::NAN));
        }
        Command::Eval {
            method,
            checkpoint,
            p,
            trials,
        } => {
            let out = require_out(&cli.out)?;
            let policy = policy::load_checkpoint(&checkpoint, Some((method.kind(), cfg.perception.feature_width())))?;
            let n = trials.unwrap_or(cfg.eval.n_trials);
            let base = cli.seed.unwrap_or(cfg.eval.base_seed);
            let (row, t) = eval::run_eval(&cfg.eval_context(), method, &policy, n, base, p)?;
            let report = eval::Report {
                config_fingerprint: cfg.fingerprint(),
                rows: vec![row],
                trials: vec![t],
            };
            write_atomic(out, report.to_csv()?.as_bytes())?;
            write_atomic(&out.with_extension("json"), report.to_json().as_bytes())?;
        }
        Command::Compare { checkpoints, trials } => {
            let out = require_out(&cli.out)?;
            let loaded = load_policies(&checkpoints, &cfg)?;
            let refs: Vec<(Method, &Policy)> = loaded.iter().map(|(m, p)| (*m, p)).collect();
            let report = eval::compare_methods(
                &cfg.eval_context(),
                &refs,
                trials.unwrap_or(cfg.eval.n_trials),
                cli.seed.unwrap_or(cfg.eval.base_seed),
                &cfg.fingerprint(),
            )?;
            write_report(out, "compare", &report)?;
        }
        Command::SweepOcclusion {
            checkpoints,
            levels,
            trials,
        } => {
            let out = require_out(&cli.out)?;
            let loaded = load_policies(&checkpoints, &cfg)?;
            let refs: Vec<(Method, &Policy)> = loaded.iter().map(|(m, p)| (*m, p)).collect();
            let levels = levels.unwrap_or_else(|| cfg.eval.occlusion_levels.clone());
            let report = eval::occlusion_sweep(
                &cfg.eval_context(),
                &refs,
                trials.unwrap_or(cfg.eval.n_trials),
                cli.seed.unwrap_or(cfg.eval.base_seed),
                &levels,
                &cfg.fingerprint(),
            )?;
            write_report(out, "sweep", &report)?;
        }
        Command::RunEpisode {
            method,
            checkpoint,
            scene_seed,
            p,
            threaded,
        } => {
            let out = require_out(&cli.out)?;
            let policy = policy::load_checkpoint(&checkpoint, Some((method.kind(), cfg.perception.feature_width())))?;
            let spec = TrialSpec::from_seed(&cfg.sim, cfg.expert.prompt_jitter, scene_seed, p)?;
            let run = if threaded {
                runtime::run_episode_threaded
            } else {
                runtime::run_episode
            };
            let outcome = run(&policy, method.kind(), &spec, &cfg.sim, &cfg.perception, &cfg.runtime)?;
            let json = serde_json::to_string_pretty(&outcome)?;
            write_atomic(out, json.as_bytes())?;
        }
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 2 on a usage error, 1 otherwise.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
