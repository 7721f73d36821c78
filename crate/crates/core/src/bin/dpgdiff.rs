use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dpgdiff::checkpoint::{load_checkpoint, load_model, save_checkpoint};
use dpgdiff::config::{self, KvMap};
use dpgdiff::dataset::{
    filter_and_split, ingest_log, read_split, write_log, write_split, DatasetSplit, DomainLabels, FilterConfig, LogFormat,
};
use dpgdiff::eval::{
    evaluate, noise_robustness, run_ablation, split_part, step_sweep, write_report_csv, write_robust_csv, write_sweep_csv,
    write_tidy_csv, EvalConfig, EvalReport, GuidedScorer,
};
use dpgdiff::network::{ModelConfig, Variant};
use dpgdiff::synthetic::{generate_synthetic, write_ground_truth, SyntheticConfig};
use dpgdiff::trainer::{fit_with, format_metrics, FitOptions, TrainConfig, TrainState};
use dpgdiff::{DpgError, Result};

const REPORT_HELP: &str = "Report CSV columns: domain,metric,value,value_x100 (domain is x, y or all; metric is one of MRR, N@5, N@10, H@5, H@10).";
const TIDY_HELP: &str = "Tidy CSV columns: <key>,domain,metric,value where <key> is the noise rate, the step count, or the variant and seed.";

#[derive(Parser)]
#[command(name = "dpgdiff", version, about = "Guided diffusion recommender for two-domain interaction sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter an interaction log and write a leave-one-out split.
    Prepare(PrepareArgs),
    /// Generate a synthetic two-domain log with known interests.
    Synth(SynthArgs),
    /// Train a model on a prepared split.
    Train(TrainArgs),
    /// Evaluate a checkpoint with sampled ranking metrics.
    #[command(after_help = REPORT_HELP)]
    Eval(EvalArgs),
    /// Train and evaluate each model variant.
    #[command(after_help = TIDY_HELP)]
    Ablate(AblateArgs),
    /// Evaluate a checkpoint on noise-perturbed histories.
    #[command(after_help = TIDY_HELP)]
    Robust(RobustArgs),
    /// Evaluate a checkpoint with shortened reverse schedules.
    #[command(after_help = TIDY_HELP)]
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (`key=value`); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    /// File entries, then `DPG_*` environment entries, then `--set` flags.
    fn entries(&self) -> Result<(KvMap, KvMap)> {
        let mut kv = match &self.config {
            Some(p) => config::load_kv(p)?,
            None => KvMap::new(),
        };
        let env = config::env_overrides();
        kv.extend(env.clone());
        kv.extend(config::parse_sets(&self.sets)?);
        Ok((kv, env))
    }
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "tsv")]
    format: LogFormat,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    min_interactions: usize,
    #[arg(long, default_value_t = 3)]
    min_per_domain: usize,
    #[arg(long, default_value_t = 15)]
    max_seq_len: usize,
    /// Domain label in the log that maps to domain X.
    #[arg(long, default_value = "x")]
    domain_x: String,
    #[arg(long, default_value = "y")]
    domain_y: String,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
    /// Start from the benchmark preset instead of the plain defaults.
    #[arg(long)]
    benchmark: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "tsv")]
    format: LogFormat,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    /// Stop (and checkpoint) once this many optimizer steps are done.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct EvalCommon {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Held-out part: test or valid.
    #[arg(long, default_value = "test")]
    part: String,
    #[arg(long, default_value_t = 999)]
    negatives: usize,
    /// Reverse steps (defaults to the full schedule).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep history items among the negative candidates.
    #[arg(long)]
    keep_history: bool,
    /// Use the final parameters instead of the best validated ones.
    #[arg(long = "final")]
    use_final: bool,
    /// Output directory (defaults to a subdirectory of the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl EvalCommon {
    fn eval_cfg(&self) -> EvalConfig {
        EvalConfig {
            n_negatives: self.negatives,
            exclude_history: !self.keep_history,
            n_steps: self.steps,
            seed: self.seed,
        }
    }

    fn out_dir(&self, name: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| self.ckpt.join(name))
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: EvalCommon,
}

#[derive(Args)]
struct RobustArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.2, 0.3])]
    rates: Vec<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long = "step-counts", value_delimiter = ',', default_values_t = vec![1, 2, 5, 10, 20, 50])]
    step_counts: Vec<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = Variant::ALL.map(|v| v.to_string()).to_vec())]
    variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0])]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 999)]
    negatives: usize,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config_hash: String,
    data_fingerprint: String,
    seeds: Vec<u64>,
    code_version: String,
    started_at: u64,
    finished_at: u64,
    outputs: Vec<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn fingerprint_files(paths: &[PathBuf]) -> Result<String> {
    let mut bytes = Vec::new();
    for p in paths {
        bytes.extend(fs::read(p).map_err(|e| DpgError::io(p, e))?);
    }
    Ok(config::sha256_hex(&bytes))
}

fn split_fingerprint(dir: &Path) -> Result<String> {
    let files: Vec<PathBuf> = ["vocab.tsv", "users.tsv", "train.tsv", "valid.tsv", "test.tsv"]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    fingerprint_files(&files)
}

struct Run {
    command: String,
    started_at: u64,
}

impl Run {
    fn start(command: &str) -> Self {
        Run {
            command: command.to_string(),
            started_at: now(),
        }
    }

    fn finish(self, dir: &Path, config_repr: &str, data_fingerprint: String, seeds: Vec<u64>, outputs: &[PathBuf]) -> Result<()> {
        for o in outputs {
            if !o.exists() {
                return Err(DpgError::InvalidArgument(format!("expected output {} was not written", o.display())));
            }
        }
        let manifest = RunManifest {
            command: self.command,
            config_hash: config::sha256_hex(config_repr.as_bytes()),
            data_fingerprint,
            seeds,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at,
            finished_at: now(),
            outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        };
        let path = dir.join("run.json");
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| DpgError::Parse(e.to_string()))?;
        fs::write(&path, json + "\n").map_err(|e| DpgError::io(&path, e))
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DpgError::io(dir, e))
}

fn cmd_prepare(a: &PrepareArgs) -> Result<()> {
    let run = Run::start("prepare");
    let labels = DomainLabels {
        x: a.domain_x.clone(),
        y: a.domain_y.clone(),
    };
    let report = ingest_log(&a.input, a.format, &labels)?;
    for e in &report.errors {
        eprintln!("warning: {}: line {}: {}", a.input.display(), e.line, e.message);
    }
    let filter = FilterConfig {
        min_user_interactions: a.min_interactions,
        min_per_domain: a.min_per_domain,
        max_seq_len: a.max_seq_len,
    };
    let split = filter_and_split(&report.events, &filter)?;
    write_split(&a.out, &split)?;
    println!("{}", split.stats());
    let repr = format!(
        "min_interactions={}\nmin_per_domain={}\nmax_seq_len={}\n",
        a.min_interactions, a.min_per_domain, a.max_seq_len
    );
    let outputs: Vec<PathBuf> = ["vocab.tsv", "users.tsv", "train.tsv", "valid.tsv", "test.tsv"]
        .iter()
        .map(|f| a.out.join(f))
        .collect();
    let data = fingerprint_files(std::slice::from_ref(&a.input))?;
    run.finish(&a.out, &repr, data, vec![], &outputs)
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let run = Run::start("synth");
    let (kv, _) = a.cfg.entries()?;
    let base = if a.benchmark {
        SyntheticConfig::benchmark(0)
    } else {
        SyntheticConfig::default()
    };
    let mut used = BTreeSet::new();
    let mut cfg = config::apply(&base, &kv, &mut used)?;
    config::reject_unknown(&kv, &used)?;
    if let Some(s) = a.seed {
        cfg.rng_seed = s;
    }
    let (events, truth) = generate_synthetic(&cfg)?;
    mkdir(&a.out)?;
    let ext = match a.format {
        LogFormat::Tsv => "tsv",
        LogFormat::Csv => "csv",
    };
    let events_path = a.out.join(format!("events.{ext}"));
    let truth_path = a.out.join("ground_truth.tsv");
    write_log(&events_path, &events, a.format, &DomainLabels::default())?;
    write_ground_truth(&truth_path, &truth)?;
    println!("wrote {} events for {} users to {}", events.len(), cfg.n_users, events_path.display());
    run.finish(&a.out, &config::to_kv(&cfg), String::new(), vec![cfg.rng_seed], &[events_path, truth_path])
}

fn load_configs(cfg: &ConfigArgs, split: &DatasetSplit) -> Result<(ModelConfig, TrainConfig)> {
    let (kv, env) = cfg.entries()?;
    let mut used = BTreeSet::new();
    let model = config::apply(&ModelConfig::default(), &kv, &mut used)?;
    let train = config::apply(&TrainConfig::default(), &kv, &mut used)?;
    let file_keys: KvMap = kv.into_iter().filter(|(k, _)| !env.contains_key(k)).collect();
    config::reject_unknown(&file_keys, &used)?;
    Ok((model.with_tables(split.table_sizes()), train))
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| DpgError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| DpgError::io(path, e))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let run = Run::start("train");
    let split = read_split(&a.data)?;
    let (mut state, train_cfg) = if a.resume {
        let (state, cfg) = load_checkpoint(&a.out)?;
        (state, cfg)
    } else {
        let (model_cfg, mut train_cfg) = load_configs(&a.cfg, &split)?;
        if let Some(s) = a.seed {
            train_cfg.seed = s;
        }
        let state = TrainState::new(&model_cfg, &train_cfg)?;
        mkdir(&a.out)?;
        fs::write(a.out.join("metrics.csv"), format_metrics(&[], true)).map_err(|e| DpgError::io(&a.out, e))?;
        fs::write(a.out.join("validation.csv"), "epoch,domain,metric,value\n").map_err(|e| DpgError::io(&a.out, e))?;
        (state, train_cfg)
    };
    let metrics_path = a.out.join("metrics.csv");
    let valid_path = a.out.join("validation.csv");
    let mut written_steps = 0;
    let mut written_valid = 0;
    let mut flush = |state: &TrainState, log: &dpgdiff::trainer::FitLog| -> Result<()> {
        append(&metrics_path, &format_metrics(&log.steps[written_steps..], false))?;
        written_steps = log.steps.len();
        for (epoch, report) in &log.validation[written_valid..] {
            let mut rows = String::new();
            for (d, m) in [("x", report.x), ("y", report.y), ("all", Some(report.all))] {
                if let Some(m) = m {
                    for (name, v) in dpgdiff::eval::MetricReport::NAMES.iter().zip(m.values()) {
                        rows.push_str(&format!("{epoch},{d},{name},{v:.6}\n"));
                    }
                }
            }
            append(&valid_path, &rows)?;
            println!("epoch {epoch}: validation NDCG@10 {:.4}", report.mean_ndcg10());
        }
        written_valid = log.validation.len();
        save_checkpoint(&a.out, state, &train_cfg)
    };
    let opts = FitOptions { max_steps: a.max_steps };
    let log = fit_with(&split, &mut state, &train_cfg, &opts, &mut flush)?;
    flush(&state, &log)?;
    if let Some(last) = log.steps.last() {
        println!(
            "step {}: l_total {:.4} (diff {:.4}, rec {:.4}, tri_cl {:.4})",
            last.step, last.losses.l_total, last.losses.l_diff, last.losses.l_rec, last.losses.l_tri_cl
        );
    }
    let repr = format!("{}{}", config::to_kv(&state.model.cfg), config::to_kv(&train_cfg));
    let outputs = vec![a.out.join("manifest.json"), a.out.join("params.bin"), a.out.join("optimizer.bin"), metrics_path.clone()];
    run.finish(&a.out, &repr, split_fingerprint(&a.data)?, vec![train_cfg.seed], &outputs)
}

fn eval_setup(c: &EvalCommon) -> Result<(DatasetSplit, dpgdiff::network::Model)> {
    let split = read_split(&c.data)?;
    let model = load_model(&c.ckpt, !c.use_final)?;
    if model.cfg.table_sizes() != split.table_sizes() {
        return Err(DpgError::InvalidArgument(format!(
            "checkpoint {} was trained on different vocabularies than {}",
            c.ckpt.display(),
            c.data.display()
        )));
    }
    Ok((split, model))
}

fn eval_repr(c: &EvalCommon, extra: &str) -> String {
    format!(
        "part={}\nnegatives={}\nsteps={:?}\nkeep_history={}\nfinal={}\n{extra}",
        c.part, c.negatives, c.steps, c.keep_history, c.use_final
    )
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let c = &a.common;
    let run = Run::start("eval");
    let (split, model) = eval_setup(c)?;
    let scorer = GuidedScorer::new(&model)?;
    let report = evaluate(&scorer, split_part(&split, &c.part)?, &split.table_sizes(), &c.eval_cfg())?;
    print!("{report}");
    let dir = c.out_dir("eval");
    mkdir(&dir)?;
    let out = dir.join("report.csv");
    write_report_csv(&out, &report)?;
    run.finish(&dir, &eval_repr(c, ""), split_fingerprint(&c.data)?, vec![c.seed], &[out])
}

fn cmd_robust(a: &RobustArgs) -> Result<()> {
    let c = &a.common;
    let run = Run::start("robust");
    let (split, model) = eval_setup(c)?;
    let scorer = GuidedScorer::new(&model)?;
    let rows = noise_robustness(
        &scorer,
        split_part(&split, &c.part)?,
        &a.rates,
        &split.table_sizes(),
        model.cfg.max_seq_len,
        &c.eval_cfg(),
    )?;
    for r in &rows {
        println!("rate {:.2}: NDCG@10 {:.4} retained {:.4}", r.rate, r.report.all.ndcg10, r.retained_fraction);
    }
    let dir = c.out_dir("robust");
    mkdir(&dir)?;
    let out = dir.join("robust.csv");
    write_robust_csv(&out, &rows)?;
    run.finish(&dir, &eval_repr(c, &format!("rates={:?}", a.rates)), split_fingerprint(&c.data)?, vec![c.seed], &[out])
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let c = &a.common;
    let run = Run::start("sweep");
    let (split, model) = eval_setup(c)?;
    let scorer = GuidedScorer::new(&model)?;
    let reports = step_sweep(&scorer, split_part(&split, &c.part)?, &a.step_counts, &split.table_sizes(), &c.eval_cfg())?;
    for r in &reports {
        println!("steps {:>3}: NDCG@10 {:.4}", r.n_steps, r.all.ndcg10);
    }
    let dir = c.out_dir("sweep");
    mkdir(&dir)?;
    let out = dir.join("sweep.csv");
    write_sweep_csv(&out, &reports)?;
    run.finish(&dir, &eval_repr(c, &format!("step_counts={:?}", a.step_counts)), split_fingerprint(&c.data)?, vec![c.seed], &[out])
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let run = Run::start("ablate");
    let split = read_split(&a.data)?;
    let (model_cfg, train_cfg) = load_configs(&a.cfg, &split)?;
    let variants = a
        .variants
        .iter()
        .map(|s| s.parse::<Variant>())
        .collect::<Result<Vec<_>>>()?;
    let mut results: Vec<(String, EvalReport)> = Vec::new();
    for v in &variants {
        for &seed in &a.seeds {
            let tc = TrainConfig {
                seed,
                ..train_cfg.clone()
            };
            let ec = EvalConfig {
                n_negatives: a.negatives,
                exclude_history: true,
                n_steps: a.steps,
                seed,
            };
            let report = run_ablation(*v, &split, &model_cfg, &tc, &ec)?;
            println!("{v:<14} seed {seed}: NDCG@10 {:.4}", report.all.ndcg10);
            results.push((format!("{v},{seed}"), report));
        }
    }
    mkdir(&a.out)?;
    let out = a.out.join("ablation.csv");
    let rows: Vec<_> = results.iter().map(|(k, r)| (k.clone(), r, Vec::new())).collect();
    write_tidy_csv(&out, "variant,seed", &rows)?;
    let repr = format!("{}{}", config::to_kv(&model_cfg), config::to_kv(&train_cfg));
    run.finish(&a.out, &repr, split_fingerprint(&a.data)?, a.seeds.clone(), &[out])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Prepare(a) => cmd_prepare(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Robust(a) => cmd_robust(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
