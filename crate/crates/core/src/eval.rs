//! Guided-inference scoring, sampled ranking metrics, and the experiment
//! harnesses (ablation, noise robustness, inference-step sweep).

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentOp, AugmentationSpec};
use crate::dataset::{DatasetSplit, Domain, HeldOut, TableSizes, Token, FIRST_ITEM_INDEX};
use crate::diffusion::{guided_sample, DiffusionSchedule};
use crate::error::{DpgError, Result};
use crate::network::{item_softmax, Forward, GuidanceBundle, Model, ModelConfig, Variant};
use crate::trainer::{fit, TrainConfig, TrainState};
use crate::rng::{self, StreamRng};
use crate::tensor::{dot, Mat};

/// Anything that maps a history to a score per row of the target table.
pub trait Scorer {
    fn score(&self, user_index: usize, seq: &[Token], target: Domain, n_steps: usize, seed: u64) -> Result<Vec<f64>>;

    /// Number of diffusion steps of a full reverse pass.
    fn full_steps(&self) -> usize;
}

/// A model with its noise schedule, ready for guided inference.
pub struct GuidedScorer<'m> {
    pub model: &'m Model,
    pub sched: DiffusionSchedule,
}

impl<'m> GuidedScorer<'m> {
    pub fn new(model: &'m Model) -> Result<Self> {
        Ok(GuidedScorer {
            model,
            sched: DiffusionSchedule::build(model.cfg.schedule())?,
        })
    }

    pub fn guidance(&self, seq: &[Token]) -> Result<GuidanceBundle> {
        let mut tape = self.model.tape();
        let mut f = Forward::new(self.model, &mut tape);
        let g = f.guidance(seq)?;
        Ok(GuidanceBundle::from_tape(&tape, &g))
    }

    /// Runs the reverse process conditioned on `memory`.
    pub fn sample_x0(&self, memory: &Mat, n_steps: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let denoiser = |x_t: &[f64], t: usize| -> Result<Vec<f64>> {
            let mut tape = self.model.tape();
            let x = tape.constant(Mat::row_vector(x_t.to_vec()));
            let m = tape.constant(memory.clone());
            let mut f = Forward::new(self.model, &mut tape);
            let out = f.denoise(x, t, m)?;
            Ok(tape.value(out).data.clone())
        };
        guided_sample(&denoiser, &self.sched, self.model.cfg.d, n_steps, rng)
    }

    /// Pre-softmax scores `(x0_hat + g_target) E_target^T`.
    pub fn logits(&self, seq: &[Token], target: Domain, n_steps: usize, rng: &mut StreamRng) -> Result<Vec<f64>> {
        let g = self.guidance(seq)?;
        let x0 = self.sample_x0(&g.memory, n_steps, rng)?;
        let q: Vec<f64> = x0.iter().zip(g.last(target)).map(|(a, b)| a + b).collect();
        let table = &self.model.params.values[self.model.layout.emb(target)];
        Ok((0..table.rows).map(|i| dot(&q, table.row(i))).collect())
    }
}

impl Scorer for GuidedScorer<'_> {
    /// Softmax over the real items of the target domain; reserved rows score 0.
    fn score(&self, user_index: usize, seq: &[Token], target: Domain, n_steps: usize, seed: u64) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(DpgError::InvalidArgument("cannot score an empty history".into()));
        }
        let mut r = rng::stream(seed, "score", user_index as u64);
        let logits = self.logits(seq, target, n_steps, &mut r)?;
        let probs = item_softmax(&logits);
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(DpgError::NonFinite(format!("scores of user {user_index}")));
        }
        Ok(probs)
    }

    fn full_steps(&self) -> usize {
        self.sched.steps()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_negatives: usize,
    pub exclude_history: bool,
    /// Reverse steps; `None` means the full schedule.
    pub n_steps: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_negatives: 999,
            exclude_history: true,
            n_steps: None,
            seed: 0,
        }
    }
}

/// `k` distinct negatives drawn uniformly from the real items of a table of
/// `table_size` rows, excluding the positive and optionally the history.
pub fn sample_negatives(
    positive: usize,
    table_size: usize,
    history: &[usize],
    k: usize,
    exclude_history: bool,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    let eligible: Vec<usize> = (FIRST_ITEM_INDEX..table_size)
        .filter(|&i| i != positive && !(exclude_history && history.contains(&i)))
        .collect();
    if eligible.len() < k {
        return Err(DpgError::InvalidArgument(format!(
            "need {k} negatives but only {} eligible items",
            eligible.len()
        )));
    }
    Ok(rand::seq::index::sample(rng, eligible.len(), k)
        .into_iter()
        .map(|i| eligible[i])
        .collect())
}

/// Candidate list of one held-out case with the rank of its positive.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedCandidates {
    pub target_domain: Domain,
    /// Positive first, then the negatives.
    pub candidate_indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub rank_of_positive: usize,
}

/// Ranks the first candidate among all, counting ties against it.
pub fn rank_of_first(scores: &[f64]) -> usize {
    let pos = scores[0];
    1 + scores[1..].iter().filter(|&&s| s >= pos || s.is_nan()).count()
}

pub fn rank_candidates(target_domain: Domain, candidates: Vec<usize>, full_scores: &[f64]) -> RankedCandidates {
    let scores: Vec<f64> = candidates.iter().map(|&c| full_scores[c]).collect();
    RankedCandidates {
        target_domain,
        rank_of_positive: rank_of_first(&scores),
        candidate_indices: candidates,
        scores,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub hr5: f64,
    pub hr10: f64,
    pub n_users: usize,
}

impl MetricReport {
    pub const NAMES: [&'static str; 5] = ["MRR", "N@5", "N@10", "H@5", "H@10"];

    pub fn values(&self) -> [f64; 5] {
        [self.mrr, self.ndcg5, self.ndcg10, self.hr5, self.hr10]
    }

    pub fn invariants_hold(&self) -> bool {
        self.hr5 <= self.hr10 && self.ndcg5 <= self.ndcg10 && self.mrr <= self.hr10
    }
}

pub fn compute_metrics(ranks: &[usize]) -> Result<MetricReport> {
    if ranks.is_empty() {
        return Err(DpgError::InvalidArgument("no ranks to aggregate".into()));
    }
    if ranks.contains(&0) {
        return Err(DpgError::InvalidArgument("ranks start at 1".into()));
    }
    let n = ranks.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
    let hit = |k: usize| move |r: usize| if r <= k { 1.0 } else { 0.0 };
    let ndcg = |k: usize| move |r: usize| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 };
    Ok(MetricReport {
        mrr: mean(&|r| if r <= 10 { 1.0 / r as f64 } else { 0.0 }),
        ndcg5: mean(&ndcg(5)),
        ndcg10: mean(&ndcg(10)),
        hr5: mean(&hit(5)),
        hr10: mean(&hit(10)),
        n_users: ranks.len(),
    })
}

/// Metrics per target domain plus the pooled "all" row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub x: Option<MetricReport>,
    pub y: Option<MetricReport>,
    pub all: MetricReport,
    pub n_steps: usize,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn get(&self, d: Domain) -> Option<&MetricReport> {
        match d {
            Domain::X => self.x.as_ref(),
            Domain::Y => self.y.as_ref(),
        }
    }

    /// NDCG@10 averaged over the domains that have test cases.
    pub fn mean_ndcg10(&self) -> f64 {
        let v: Vec<f64> = [self.x, self.y].iter().flatten().map(|m| m.ndcg10).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    fn rows(&self) -> Vec<(String, &MetricReport)> {
        let mut rows = Vec::new();
        for d in Domain::BOTH {
            if let Some(m) = self.get(d) {
                rows.push((d.to_string(), m));
            }
        }
        rows.push(("all".into(), &self.all));
        rows
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<8}", "domain")?;
        for n in MetricReport::NAMES {
            write!(f, "{n:>9}")?;
        }
        writeln!(f, "{:>8}", "users")?;
        for (d, m) in self.rows() {
            write!(f, "{d:<8}")?;
            for v in m.values() {
                write!(f, "{:>9.2}", 100.0 * v)?;
            }
            writeln!(f, "{:>8}", m.n_users)?;
        }
        Ok(())
    }
}

/// Ranks of each case's positive, in input order.
pub fn rank_cases<S: Scorer + ?Sized>(scorer: &S, cases: &[HeldOut], sizes: &TableSizes, cfg: &EvalConfig) -> Result<Vec<RankedCandidates>> {
    let n_steps = cfg.n_steps.unwrap_or_else(|| scorer.full_steps());
    cases
        .iter()
        .map(|case| {
            let d = case.target.domain;
            let history: Vec<usize> = case.seq.items.iter().filter(|t| t.domain == d).map(|t| t.item).collect();
            let mut r = rng::stream(cfg.seed, "negatives", case.seq.user_index as u64);
            let negs = sample_negatives(case.target.item, sizes.get(d), &history, cfg.n_negatives, cfg.exclude_history, &mut r)?;
            let scores = scorer.score(case.seq.user_index, &case.seq.items, d, n_steps, cfg.seed)?;
            let mut cands = Vec::with_capacity(negs.len() + 1);
            cands.push(case.target.item);
            cands.extend(negs);
            Ok(rank_candidates(d, cands, &scores))
        })
        .collect()
}

pub fn evaluate<S: Scorer + ?Sized>(scorer: &S, cases: &[HeldOut], sizes: &TableSizes, cfg: &EvalConfig) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(DpgError::InvalidArgument("no held-out cases to evaluate".into()));
    }
    let ranked = rank_cases(scorer, cases, sizes, cfg)?;
    let per = |d: Domain| -> Result<Option<MetricReport>> {
        let ranks: Vec<usize> = ranked.iter().filter(|r| r.target_domain == d).map(|r| r.rank_of_positive).collect();
        if ranks.is_empty() {
            Ok(None)
        } else {
            compute_metrics(&ranks).map(Some)
        }
    };
    let all: Vec<usize> = ranked.iter().map(|r| r.rank_of_positive).collect();
    let n_steps = cfg.n_steps.unwrap_or_else(|| scorer.full_steps());
    Ok(EvalReport {
        x: per(Domain::X)?,
        y: per(Domain::Y)?,
        all: compute_metrics(&all)?,
        n_steps,
        fingerprint: format!(
            "negatives={};exclude_history={};steps={};seed={};cases={}",
            cfg.n_negatives,
            cfg.exclude_history,
            n_steps,
            cfg.seed,
            cases.len()
        ),
    })
}

/// Perturbs a history with Insert or Substitute (even odds) at `rate`.
/// Rate zero returns the history unchanged.
pub fn perturb(items: &[Token], rate: f64, seed: u64, user_index: usize, sizes: &TableSizes, max_seq_len: usize) -> Result<Vec<Token>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(DpgError::InvalidArgument(format!("noise rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(items.to_vec());
    }
    let mut r = rng::stream(seed, "noise", user_index as u64);
    let op = if r.random_bool(0.5) { AugmentOp::Insert } else { AugmentOp::Substitute };
    let spec = AugmentationSpec {
        op,
        rate,
        rng_seed: r.random(),
    };
    augment(items, &spec, sizes, max_seq_len)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustRow {
    pub rate: f64,
    pub report: EvalReport,
    pub retained_fraction: f64,
}

/// Evaluates on perturbed histories at each rate. Retained fraction is the
/// pooled NDCG@10 relative to the unperturbed run.
pub fn noise_robustness<S: Scorer + ?Sized>(
    scorer: &S,
    cases: &[HeldOut],
    rates: &[f64],
    sizes: &TableSizes,
    max_seq_len: usize,
    cfg: &EvalConfig,
) -> Result<Vec<RobustRow>> {
    let baseline = evaluate(scorer, cases, sizes, cfg)?;
    rates
        .iter()
        .map(|&rate| {
            let report = if rate == 0.0 {
                baseline.clone()
            } else {
                let noisy = cases
                    .iter()
                    .map(|c| {
                        Ok(HeldOut {
                            seq: crate::dataset::UserSequence::new(
                                c.seq.user_index,
                                perturb(&c.seq.items, rate, cfg.seed, c.seq.user_index, sizes, max_seq_len)?,
                            ),
                            target: c.target,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                evaluate(scorer, &noisy, sizes, cfg)?
            };
            let retained_fraction = if baseline.all.ndcg10 > 0.0 {
                report.all.ndcg10 / baseline.all.ndcg10
            } else {
                1.0
            };
            Ok(RobustRow {
                rate,
                report,
                retained_fraction,
            })
        })
        .collect()
}

pub fn step_sweep<S: Scorer + ?Sized>(scorer: &S, cases: &[HeldOut], step_counts: &[usize], sizes: &TableSizes, cfg: &EvalConfig) -> Result<Vec<EvalReport>> {
    step_counts
        .iter()
        .map(|&n| {
            if n == 0 || n > scorer.full_steps() {
                return Err(DpgError::InvalidArgument(format!("step count {n} outside 1..={}", scorer.full_steps())));
            }
            evaluate(scorer, cases, sizes, &EvalConfig { n_steps: Some(n), ..cfg.clone() })
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| DpgError::io(parent, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| DpgError::io(path, e))?))
}

/// One row per domain and metric: `domain,metric,value,value_x100`.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| DpgError::io(path, e);
    writeln!(w, "domain,metric,value,value_x100").map_err(io)?;
    for (d, m) in report.rows() {
        for (name, v) in MetricReport::NAMES.iter().zip(m.values()) {
            writeln!(w, "{d},{name},{v:.6},{:.4}", 100.0 * v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Tidy `key,domain,metric,value` rows for a sweep over `key_name`.
pub fn write_tidy_csv(path: &Path, key_name: &str, rows: &[(String, &EvalReport, Vec<(&str, f64)>)]) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| DpgError::io(path, e);
    writeln!(w, "{key_name},domain,metric,value").map_err(io)?;
    for (key, report, extra) in rows {
        for (d, m) in report.rows() {
            for (name, v) in MetricReport::NAMES.iter().zip(m.values()) {
                writeln!(w, "{key},{d},{name},{v:.6}").map_err(io)?;
            }
        }
        for (name, v) in extra {
            writeln!(w, "{key},all,{name},{v:.6}").map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn write_robust_csv(path: &Path, rows: &[RobustRow]) -> Result<()> {
    let rows: Vec<_> = rows
        .iter()
        .map(|r| (format!("{}", r.rate), &r.report, vec![("retained_fraction", r.retained_fraction)]))
        .collect();
    write_tidy_csv(path, "rate", &rows)
}

pub fn write_sweep_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let rows: Vec<_> = reports.iter().map(|r| (r.n_steps.to_string(), r, Vec::new())).collect();
    write_tidy_csv(path, "steps", &rows)
}

/// Trains `variant` on the split and evaluates it on the test cases.
pub fn run_ablation(
    variant: Variant,
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
) -> Result<EvalReport> {
    let cfg = ModelConfig {
        variant,
        ..model_cfg.clone()
    }
    .with_tables(split.table_sizes());
    let mut state = TrainState::new(&cfg, train_cfg)?;
    fit(split, &mut state, train_cfg)?;
    let model = state.best_model();
    let scorer = GuidedScorer::new(&model)?;
    evaluate(&scorer, &split.test, &split.table_sizes(), eval_cfg)
}

/// Held-out cases of a split by name.
pub fn split_part<'a>(split: &'a DatasetSplit, part: &str) -> Result<&'a [HeldOut]> {
    match part {
        "test" => Ok(&split.test),
        "valid" | "validation" => Ok(&split.validation),
        _ => Err(DpgError::InvalidArgument(format!("unknown split part {part:?}"))),
    }
}
