//! Learnable components and their forward passes.
//!
//! All forward passes are recorded on a [`Tape`] so the same code serves
//! training (with a backward sweep) and inference (values only).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::dataset::{split_domain_views, Domain, TableSizes, Token, FIRST_ITEM_INDEX, PAD_INDEX};
use crate::diffusion::ScheduleSpec;
use crate::error::{DpgError, Result};
use crate::rng;
use crate::tensor::Mat;

/// Which components are active; `Full` is the complete model, the others are
/// the ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Single shared encoder over the merged sequence, its encoding used as
    /// the denoiser's cross-attention memory; no contrastive term.
    Diff,
    /// Adds per-domain encoders trained by the single-domain loss only.
    #[serde(rename = "Diff+DE")]
    DiffDe,
    /// Routes the fused per-domain guidance into cross-attention.
    #[serde(rename = "Diff+DE+G")]
    DiffDeG,
    /// Per-domain encoders plus the contrastive term, shared-encoder guidance.
    #[serde(rename = "Diff+DE+TriCL")]
    DiffDeTriCl,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Diff,
        Variant::DiffDe,
        Variant::DiffDeG,
        Variant::DiffDeTriCl,
        Variant::Full,
    ];

    pub fn per_domain_encoders(self) -> bool {
        self != Variant::Diff
    }

    pub fn fused_guidance(self) -> bool {
        matches!(self, Variant::DiffDeG | Variant::Full)
    }

    pub fn shared_encoder(self) -> bool {
        !self.fused_guidance()
    }

    pub fn contrastive(self) -> bool {
        matches!(self, Variant::DiffDeTriCl | Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Diff => "Diff",
            Variant::DiffDe => "Diff+DE",
            Variant::DiffDeG => "Diff+DE+G",
            Variant::DiffDeTriCl => "Diff+DE+TriCL",
            Variant::Full => "Full",
        })
    }
}

impl FromStr for Variant {
    type Err = DpgError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '_', ' '], "+");
        Variant::ALL
            .into_iter()
            .find(|v| v.to_string().to_ascii_lowercase() == norm)
            .ok_or_else(|| DpgError::InvalidArgument(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub n_heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub max_seq_len: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Embedding table rows (reserved rows included) of domain X.
    pub vocab_x: usize,
    pub vocab_y: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let s = ScheduleSpec::default();
        ModelConfig {
            d: 256,
            n_heads: 1,
            enc_layers: 2,
            dec_layers: 1,
            max_seq_len: 15,
            diffusion_steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            vocab_x: 0,
            vocab_y: 0,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DpgError::InvalidArgument(m));
        if self.d == 0 || self.n_heads == 0 || self.enc_layers == 0 || self.dec_layers == 0 {
            return bad("model dimensions and layer counts must be positive".into());
        }
        if !self.d.is_multiple_of(self.n_heads) {
            return bad(format!("d={} not divisible by n_heads={}", self.d, self.n_heads));
        }
        if self.max_seq_len == 0 || self.diffusion_steps == 0 {
            return bad("max_seq_len and diffusion_steps must be positive".into());
        }
        if self.vocab_x <= FIRST_ITEM_INDEX || self.vocab_y <= FIRST_ITEM_INDEX {
            return bad("each vocabulary needs at least one real item".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> ScheduleSpec {
        ScheduleSpec {
            steps: self.diffusion_steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            ..ScheduleSpec::default()
        }
    }

    pub fn table_sizes(&self) -> TableSizes {
        TableSizes {
            x: self.vocab_x,
            y: self.vocab_y,
        }
    }

    pub fn with_tables(mut self, sizes: TableSizes) -> Self {
        self.vocab_x = sizes.x;
        self.vocab_y = sizes.y;
        self
    }
}

// ---------------------------------------------------------------------------
// Parameter layout

#[derive(Clone, Debug, PartialEq)]
pub struct AttnIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpIds {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockIds {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub attn: AttnIds,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub mlp: MlpIds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackIds {
    pub blocks: Vec<BlockIds>,
    pub lnf_g: usize,
    pub lnf_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub emb_x: usize,
    pub emb_y: usize,
    pub pos: usize,
    pub step_emb: usize,
    pub enc_x: Option<StackIds>,
    pub enc_y: Option<StackIds>,
    pub fuse_w: Option<usize>,
    pub fuse_b: Option<usize>,
    pub enc_s: Option<StackIds>,
    pub enc_c: StackIds,
    pub decoder: StackIds,
}

impl Layout {
    pub fn emb(&self, d: Domain) -> usize {
        match d {
            Domain::X => self.emb_x,
            Domain::Y => self.emb_y,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Embedding,
    Xavier,
    Zeros,
    Ones,
    Identity,
}

/// Named parameter arrays in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub names: Vec<String>,
    pub values: Vec<Mat>,
}

impl ParameterSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

struct Registry {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Registry {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn attn(&mut self, p: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.add(format!("{p}.wq"), d, d, Init::Xavier),
            bq: self.add(format!("{p}.bq"), 1, d, Init::Zeros),
            wk: self.add(format!("{p}.wk"), d, d, Init::Xavier),
            bk: self.add(format!("{p}.bk"), 1, d, Init::Zeros),
            wv: self.add(format!("{p}.wv"), d, d, Init::Xavier),
            bv: self.add(format!("{p}.bv"), 1, d, Init::Zeros),
            wo: self.add(format!("{p}.wo"), d, d, Init::Xavier),
            bo: self.add(format!("{p}.bo"), 1, d, Init::Zeros),
        }
    }

    fn stack(&mut self, p: &str, d: usize, layers: usize) -> StackIds {
        let blocks = (0..layers)
            .map(|l| {
                let b = format!("{p}.{l}");
                BlockIds {
                    ln1_g: self.add(format!("{b}.ln1.g"), 1, d, Init::Ones),
                    ln1_b: self.add(format!("{b}.ln1.b"), 1, d, Init::Zeros),
                    attn: self.attn(&format!("{b}.attn"), d),
                    ln2_g: self.add(format!("{b}.ln2.g"), 1, d, Init::Ones),
                    ln2_b: self.add(format!("{b}.ln2.b"), 1, d, Init::Zeros),
                    mlp: MlpIds {
                        w1: self.add(format!("{b}.mlp.w1"), d, 4 * d, Init::Xavier),
                        b1: self.add(format!("{b}.mlp.b1"), 1, 4 * d, Init::Zeros),
                        w2: self.add(format!("{b}.mlp.w2"), 4 * d, d, Init::Xavier),
                        b2: self.add(format!("{b}.mlp.b2"), 1, d, Init::Zeros),
                    },
                }
            })
            .collect();
        StackIds {
            blocks,
            lnf_g: self.add(format!("{p}.lnf.g"), 1, d, Init::Ones),
            lnf_b: self.add(format!("{p}.lnf.b"), 1, d, Init::Zeros),
        }
    }
}

fn register(cfg: &ModelConfig) -> (Layout, Registry) {
    let d = cfg.d;
    let mut r = Registry {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let emb_x = r.add("emb_x".into(), cfg.vocab_x, d, Init::Embedding);
    let emb_y = r.add("emb_y".into(), cfg.vocab_y, d, Init::Embedding);
    let pos = r.add("pos".into(), cfg.max_seq_len, d, Init::Embedding);
    let step_emb = r.add("step_emb".into(), cfg.diffusion_steps, d, Init::Embedding);
    let (enc_x, enc_y, fuse_w, fuse_b) = if cfg.variant.per_domain_encoders() {
        (
            Some(r.stack("enc_x", d, cfg.enc_layers)),
            Some(r.stack("enc_y", d, cfg.enc_layers)),
            Some(r.add("fuse.w".into(), d, d, Init::Identity)),
            Some(r.add("fuse.b".into(), 1, d, Init::Zeros)),
        )
    } else {
        (None, None, None, None)
    };
    let enc_s = cfg
        .variant
        .shared_encoder()
        .then(|| r.stack("enc_s", d, cfg.enc_layers));
    let enc_c = r.stack("enc_c", d, cfg.enc_layers);
    let decoder = r.stack("dec", d, cfg.dec_layers);
    (
        Layout {
            emb_x,
            emb_y,
            pos,
            step_emb,
            enc_x,
            enc_y,
            fuse_w,
            fuse_b,
            enc_s,
            enc_c,
            decoder,
        },
        r,
    )
}

/// Parameter layout and shapes implied by `cfg`, in registration order.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, (usize, usize))> {
    let (_, r) = register(cfg);
    r.names.into_iter().zip(r.shapes).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: ParameterSet,
}

/// Embeddings ~ N(0, 0.02^2) with zero pad rows; projections Xavier-uniform;
/// layer-norm gains one and biases zero; fusion starts as the identity.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let (layout, reg) = register(cfg);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    let values = reg
        .shapes
        .iter()
        .zip(&reg.inits)
        .enumerate()
        .map(|(id, (&(rows, cols), init))| {
            let mut r = rng::stream(seed, "init", id as u64);
            match init {
                Init::Embedding => {
                    let mut m = Mat::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut r)).collect());
                    if id == layout.emb_x || id == layout.emb_y {
                        m.row_mut(PAD_INDEX).fill(0.0);
                    }
                    m
                }
                Init::Xavier => {
                    let bound = (6.0 / (rows + cols) as f64).sqrt();
                    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-bound..bound)).collect())
                }
                Init::Zeros => Mat::zeros(rows, cols),
                Init::Ones => Mat::filled(rows, cols, 1.0),
                Init::Identity => Mat::identity(rows),
            }
        })
        .collect();
    Ok(Model {
        cfg: cfg.clone(),
        layout,
        params: ParameterSet {
            names: reg.names,
            values,
        },
    })
}

impl Model {
    /// Rebuilds a model from stored arrays, checking names and shapes.
    pub fn from_parts(cfg: ModelConfig, params: ParameterSet) -> Result<Model> {
        cfg.validate()?;
        let (layout, reg) = register(&cfg);
        if reg.names != params.names {
            return Err(DpgError::Checkpoint("parameter names do not match the configuration".into()));
        }
        for ((name, shape), v) in reg.names.iter().zip(&reg.shapes).zip(&params.values) {
            if v.shape() != *shape {
                return Err(DpgError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    v.shape()
                )));
            }
        }
        Ok(Model { cfg, layout, params })
    }

    /// Ids of rows that never train: the pad row of each item table.
    pub fn frozen_rows(&self) -> [(usize, usize); 2] {
        [(self.layout.emb_x, PAD_INDEX), (self.layout.emb_y, PAD_INDEX)]
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::with_params(&self.params.values)
    }
}

// ---------------------------------------------------------------------------
// Forward passes

/// Guidance representations of one sequence, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct GuidanceVars {
    /// Encoded domain-X subsequence (`L_x x d`, one pad row when empty).
    pub g_x: Var,
    pub g_y: Var,
    /// Fused guidance over the merged order (`(L_x + L_y) x d`).
    pub g_d: Var,
    pub gx_last: Var,
    pub gy_last: Var,
    pub gd_last: Var,
    /// Rows the denoiser cross-attends to; `g_d` unless the variant uses the
    /// shared encoder instead.
    pub memory: Var,
}

impl GuidanceVars {
    pub fn last(&self, d: Domain) -> Var {
        match d {
            Domain::X => self.gx_last,
            Domain::Y => self.gy_last,
        }
    }
}

/// Plain-value copy of [`GuidanceVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceBundle {
    pub g_x: Mat,
    pub g_y: Mat,
    pub g_d: Mat,
    pub g_x_last: Vec<f64>,
    pub g_y_last: Vec<f64>,
    pub g_d_pooled: Vec<f64>,
    pub memory: Mat,
}

impl GuidanceBundle {
    pub fn from_tape(tape: &Tape<'_>, g: &GuidanceVars) -> Self {
        GuidanceBundle {
            g_x: tape.value(g.g_x).clone(),
            g_y: tape.value(g.g_y).clone(),
            g_d: tape.value(g.g_d).clone(),
            g_x_last: tape.value(g.gx_last).data.clone(),
            g_y_last: tape.value(g.gy_last).data.clone(),
            g_d_pooled: tape.value(g.gd_last).data.clone(),
            memory: tape.value(g.memory).clone(),
        }
    }

    pub fn last(&self, d: Domain) -> &[f64] {
        match d {
            Domain::X => &self.g_x_last,
            Domain::Y => &self.g_y_last,
        }
    }
}

/// Output of one denoiser call.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseOutput {
    pub x0_hat: Vec<f64>,
}

impl DenoiseOutput {
    /// The cross-domain user view used by the contrastive objective.
    pub fn h_c(&self) -> &[f64] {
        &self.x0_hat
    }
}

/// Borrowed model plus the tape the forward pass is recorded on.
pub struct Forward<'m, 't> {
    pub model: &'m Model,
    pub tape: &'t mut Tape<'m>,
}

impl<'m, 't> Forward<'m, 't> {
    pub fn new(model: &'m Model, tape: &'t mut Tape<'m>) -> Self {
        Forward { model, tape }
    }

    fn p(&mut self, id: usize) -> Var {
        self.tape.param(id)
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        if tokens.len() > self.model.cfg.max_seq_len {
            return Err(DpgError::InvalidArgument(format!(
                "sequence of length {} exceeds max_seq_len {}",
                tokens.len(),
                self.model.cfg.max_seq_len
            )));
        }
        let sizes = self.model.cfg.table_sizes();
        for t in tokens {
            if t.item >= sizes.get(t.domain) {
                return Err(DpgError::IndexOutOfRange {
                    what: "item embedding",
                    index: t.item,
                    size: sizes.get(t.domain),
                });
            }
        }
        Ok(())
    }

    /// `row i = E_domain[item_i] + Pos[i]` for a possibly mixed-domain
    /// sequence.
    pub fn embed(&mut self, tokens: &[Token]) -> Result<Var> {
        if tokens.is_empty() {
            return Err(DpgError::InvalidArgument("cannot embed an empty sequence".into()));
        }
        self.check_tokens(tokens)?;
        let layout = &self.model.layout;
        let mut parts = Vec::new();
        let mut order = vec![0usize; tokens.len()];
        let mut offset = 0;
        for d in Domain::BOTH {
            let idx: Vec<(usize, usize)> = tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| t.domain == d)
                .map(|(i, t)| (i, t.item))
                .collect();
            if idx.is_empty() {
                continue;
            }
            for (k, (i, _)) in idx.iter().enumerate() {
                order[*i] = offset + k;
            }
            offset += idx.len();
            let table = self.p(layout.emb(d));
            parts.push(self.tape.gather(table, idx.into_iter().map(|(_, it)| it).collect()));
        }
        let items = if parts.len() == 1 {
            parts[0]
        } else {
            let stacked = self.tape.concat_rows(parts);
            self.tape.gather(stacked, order)
        };
        let pos_table = self.p(layout.pos);
        let pos = self.tape.gather(pos_table, (0..tokens.len()).collect());
        Ok(self.tape.add(items, pos))
    }

    /// Multi-head attention of `query_in` rows over `kv_in` rows;
    /// `allowed[i * n_kv + j]` gates query `i` attending to key `j`.
    fn attention(&mut self, ids: &AttnIds, query_in: Var, kv_in: Var, allowed: &[bool]) -> Var {
        let d = self.model.cfg.d;
        let heads = self.model.cfg.n_heads;
        let dh = d / heads;
        let (wq, bq, wk, bk, wv, bv, wo, bo) = (
            self.p(ids.wq),
            self.p(ids.bq),
            self.p(ids.wk),
            self.p(ids.bk),
            self.p(ids.wv),
            self.p(ids.bv),
            self.p(ids.wo),
            self.p(ids.bo),
        );
        let q = self.tape.matmul(query_in, wq);
        let q = self.tape.add_row(q, bq);
        let k = self.tape.matmul(kv_in, wk);
        let k = self.tape.add_row(k, bk);
        let v = self.tape.matmul(kv_in, wv);
        let v = self.tape.add_row(v, bv);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.tape.slice_cols(q, h * dh, dh),
                    self.tape.slice_cols(k, h * dh, dh),
                    self.tape.slice_cols(v, h * dh, dh),
                )
            };
            let scores = self.tape.matmul_t(qh, kh);
            let scores = self.tape.scale(scores, scale);
            let probs = self.tape.masked_softmax(scores, allowed.to_vec());
            outs.push(self.tape.matmul(probs, vh));
        }
        let merged = if heads == 1 { outs[0] } else { self.tape.concat_cols(outs) };
        let o = self.tape.matmul(merged, wo);
        self.tape.add_row(o, bo)
    }

    fn mlp(&mut self, ids: &MlpIds, x: Var) -> Var {
        let (w1, b1, w2, b2) = (self.p(ids.w1), self.p(ids.b1), self.p(ids.w2), self.p(ids.b2));
        let h = self.tape.matmul(x, w1);
        let h = self.tape.add_row(h, b1);
        let h = self.tape.gelu(h);
        let h = self.tape.matmul(h, w2);
        self.tape.add_row(h, b2)
    }

    fn norm(&mut self, x: Var, g: usize, b: usize) -> Var {
        let (g, b) = (self.p(g), self.p(b));
        self.tape.layer_norm(x, g, b)
    }

    /// Pre-norm residual blocks. With `memory == None` the attention is causal
    /// self-attention over `valid` keys; otherwise it is cross-attention from
    /// `x` onto every row of `memory`.
    fn stack(&mut self, ids: &StackIds, x: Var, valid: &[bool], memory: Option<Var>) -> Var {
        let n = self.tape.value(x).rows;
        let allowed: Vec<bool> = match memory {
            None => (0..n * n).map(|k| k % n <= k / n && valid[k % n]).collect(),
            Some(m) => vec![true; n * self.tape.value(m).rows],
        };
        let mut h = x;
        for b in &ids.blocks {
            let a = self.norm(h, b.ln1_g, b.ln1_b);
            let kv = memory.unwrap_or(a);
            let att = self.attention(&b.attn, a, kv, &allowed);
            h = self.tape.add(h, att);
            let a = self.norm(h, b.ln2_g, b.ln2_b);
            let m = self.mlp(&b.mlp, a);
            h = self.tape.add(h, m);
        }
        self.norm(h, ids.lnf_g, ids.lnf_b)
    }

    /// Causal encoder over a sequence; a lone pad token is fully masked.
    pub fn encode(&mut self, ids: &StackIds, tokens: &[Token]) -> Result<Var> {
        let h = self.embed(tokens)?;
        let valid: Vec<bool> = tokens.iter().map(|t| t.item != PAD_INDEX).collect();
        Ok(self.stack(ids, h, &valid, None))
    }

    fn encode_domain(&mut self, d: Domain, tokens: &[Token]) -> Result<Var> {
        let layout = &self.model.layout;
        let ids = match d {
            Domain::X => layout.enc_x.as_ref(),
            Domain::Y => layout.enc_y.as_ref(),
        }
        .ok_or_else(|| DpgError::InvalidArgument("variant has no per-domain encoders".into()))?;
        if tokens.is_empty() {
            self.encode(ids, &[Token::new(PAD_INDEX, d)])
        } else {
            self.encode(ids, tokens)
        }
    }

    fn last_row(&mut self, x: Var) -> Var {
        let n = self.tape.value(x).rows;
        self.tape.gather(x, vec![n - 1])
    }

    /// Encodes both domain views and fuses them back into merged order.
    pub fn guidance(&mut self, tokens: &[Token]) -> Result<GuidanceVars> {
        if tokens.is_empty() {
            return Err(DpgError::InvalidArgument("guidance needs a non-empty sequence".into()));
        }
        self.check_tokens(tokens)?;
        let variant = self.model.cfg.variant;
        let shared = match &self.model.layout.enc_s {
            Some(ids) => Some(self.encode(ids, tokens)?),
            None => None,
        };
        if !variant.per_domain_encoders() {
            let s = shared.expect("shared encoder present");
            let last = self.last_row(s);
            return Ok(GuidanceVars {
                g_x: s,
                g_y: s,
                g_d: s,
                gx_last: last,
                gy_last: last,
                gd_last: last,
                memory: s,
            });
        }
        let views = split_domain_views(tokens);
        let g_x = self.encode_domain(Domain::X, &views.x)?;
        let g_y = self.encode_domain(Domain::Y, &views.y)?;
        let interleaved = interleave_rows(self.tape, g_x, g_y, &views.x_pos, &views.y_pos);
        let (fw, fb) = (
            self.p(self.model.layout.fuse_w.expect("fusion present")),
            self.p(self.model.layout.fuse_b.expect("fusion present")),
        );
        let g_d = self.tape.matmul(interleaved, fw);
        let g_d = self.tape.add_row(g_d, fb);
        let gx_last = self.last_row(g_x);
        let gy_last = self.last_row(g_y);
        let gd_last = self.last_row(g_d);
        Ok(GuidanceVars {
            g_x,
            g_y,
            g_d,
            gx_last,
            gy_last,
            gd_last,
            memory: shared.unwrap_or(g_d),
        })
    }

    /// `x0_hat = Decoder(Encoder_c(x_t + StepEmb[t]), memory)`.
    pub fn denoise(&mut self, x_t: Var, t: usize, memory: Var) -> Result<Var> {
        let cfg = &self.model.cfg;
        if t == 0 || t > cfg.diffusion_steps {
            return Err(DpgError::InvalidArgument(format!("timestep {t} outside 1..={}", cfg.diffusion_steps)));
        }
        if self.tape.value(memory).rows == 0 {
            return Err(DpgError::InvalidArgument("empty guidance".into()));
        }
        let layout = &self.model.layout;
        let table = self.p(layout.step_emb);
        let step = self.tape.gather(table, vec![t - 1]);
        let u = self.tape.add(x_t, step);
        let enc = self.stack(&layout.enc_c, u, &[true], None);
        Ok(self.stack(&layout.decoder, enc, &[], Some(memory)))
    }

    /// Encoder_c over an augmented sequence (no step embedding), pooled at the
    /// last non-pad position.
    pub fn encode_aug(&mut self, tokens: &[Token]) -> Result<Var> {
        let h = self.encode(&self.model.layout.enc_c, tokens)?;
        let last = tokens.iter().rposition(|t| t.item != PAD_INDEX).unwrap_or(tokens.len() - 1);
        Ok(self.tape.gather(h, vec![last]))
    }

    /// Logits `(query) E_d^T` over the full table of domain `d`.
    pub fn logits(&mut self, query: Var, d: Domain) -> Var {
        let table = self.p(self.model.layout.emb(d));
        self.tape.matmul_t(query, table)
    }

    /// Row `item` of the item table of `d`, as a node.
    pub fn item_embedding(&mut self, t: Token) -> Var {
        let table = self.p(self.model.layout.emb(t.domain));
        self.tape.gather(table, vec![t.item])
    }
}

/// Places the rows of `g_x` and `g_y` at their original positions. Pad rows
/// of an empty view (no positions) are left out.
fn interleave_rows(tape: &mut Tape<'_>, g_x: Var, g_y: Var, x_pos: &[usize], y_pos: &[usize]) -> Var {
    let n = x_pos.len() + y_pos.len();
    match (x_pos.is_empty(), y_pos.is_empty()) {
        (false, true) => g_x,
        (true, false) => g_y,
        _ => {
            let stacked = tape.concat_rows(vec![g_x, g_y]);
            let mut order = vec![0usize; n];
            for (k, &p) in x_pos.iter().enumerate() {
                order[p] = k;
            }
            for (k, &p) in y_pos.iter().enumerate() {
                order[p] = x_pos.len() + k;
            }
            tape.gather(stacked, order)
        }
    }
}

/// Softmax over the real items of a logit row; reserved rows get zero.
pub fn item_softmax(logits: &[f64]) -> Vec<f64> {
    let real = &logits[FIRST_ITEM_INDEX..];
    let max = real.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = real.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut out = vec![0.0; FIRST_ITEM_INDEX];
    out.extend(exps.into_iter().map(|e| e / total));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            d: 8,
            n_heads: 2,
            enc_layers: 2,
            dec_layers: 1,
            max_seq_len: 6,
            diffusion_steps: 10,
            vocab_x: 9,
            vocab_y: 7,
            variant,
            ..ModelConfig::default()
        }
    }

    fn x(i: usize) -> Token {
        Token::new(i, Domain::X)
    }

    fn y(i: usize) -> Token {
        Token::new(i, Domain::Y)
    }

    #[test]
    fn init_is_deterministic_and_pad_rows_zero() {
        let cfg = tiny_cfg(Variant::Full);
        let a = init_parameters(&cfg, 3).unwrap();
        let b = init_parameters(&cfg, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_parameters(&cfg, 4).unwrap());
        for (id, row) in a.frozen_rows() {
            assert!(a.params.values[id].row(row).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for variant in Variant::ALL {
            let cfg = tiny_cfg(variant);
            let m = init_parameters(&cfg, 0).unwrap();
            let d = cfg.d;
            let block = 4 * d + 4 * (d * d + d) + (d * 4 * d + 4 * d) + (4 * d * d + d);
            let stack = |layers: usize| layers * block + 2 * d;
            let mut expected = (cfg.vocab_x + cfg.vocab_y + cfg.max_seq_len + cfg.diffusion_steps) * d
                + stack(cfg.enc_layers)
                + stack(cfg.dec_layers);
            if variant != Variant::Diff {
                expected += 2 * stack(cfg.enc_layers) + d * d + d;
            }
            if !matches!(variant, Variant::DiffDeG | Variant::Full) {
                expected += stack(cfg.enc_layers);
            }
            assert_eq!(m.params.n_scalars(), expected, "{variant}");
        }
    }

    #[test]
    fn embedding_rules() {
        let cfg = tiny_cfg(Variant::Full);
        let mut m = init_parameters(&cfg, 1).unwrap();
        let mut tape = m.tape();
        let mut f = Forward::new(&m, &mut tape);
        let h = f.embed(&[x(3)]).unwrap();
        let e = &m.params.values[m.layout.emb_x];
        let p = &m.params.values[m.layout.pos];
        let expect: Vec<f64> = e.row(3).iter().zip(p.row(0)).map(|(a, b)| a + b).collect();
        assert_eq!(tape.value(h).data, expect);

        let ex = tape.value(h).data.clone();
        let mut tape = m.tape();
        let mut f = Forward::new(&m, &mut tape);
        let hy = f.embed(&[y(4)]).unwrap();
        let ey = &m.params.values[m.layout.emb_y];
        for c in 0..cfg.d {
            let lhs = ex[c] - tape.value(hy).data[c];
            let rhs = e.at(3, c) - ey.at(4, c);
            assert!((lhs - rhs).abs() < 1e-15);
        }

        let pos = m.layout.pos;
        m.params.values[pos] = Mat::zeros(cfg.max_seq_len, cfg.d);
        let mut tape = m.tape();
        let mut f = Forward::new(&m, &mut tape);
        let h = f.embed(&[x(3), y(2), x(5)]).unwrap();
        let v = tape.value(h);
        assert_eq!(v.row(0), m.params.values[m.layout.emb_x].row(3));
        assert_eq!(v.row(1), m.params.values[m.layout.emb_y].row(2));
        assert_eq!(v.row(2), m.params.values[m.layout.emb_x].row(5));
    }

    #[test]
    fn embed_rejects_out_of_range() {
        let m = init_parameters(&tiny_cfg(Variant::Full), 1).unwrap();
        let mut tape = m.tape();
        let mut f = Forward::new(&m, &mut tape);
        assert!(matches!(f.embed(&[x(9)]), Err(DpgError::IndexOutOfRange { .. })));
    }

    #[test]
    fn encoder_is_causal_and_shape_preserving() {
        let m = init_parameters(&tiny_cfg(Variant::Full), 2).unwrap();
        let ids = m.layout.enc_x.clone().unwrap();
        let run = |tokens: &[Token]| {
            let mut tape = m.tape();
            let mut f = Forward::new(&m, &mut tape);
            let out = f.encode(&ids, tokens).unwrap();
            tape.value(out).clone()
        };
        let a = run(&[x(2), x(3), x(4), x(5)]);
        let b = run(&[x(2), x(3), x(7), x(8)]);
        assert_eq!(a.shape(), (4, 8));
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
        let pad = run(&[Token::new(PAD_INDEX, Domain::X)]);
        assert!(pad.is_finite());
    }

    #[test]
    fn fusion_interleaves_in_original_order() {
        let m = init_parameters(&tiny_cfg(Variant::Full), 5).unwrap();
        let seq = [x(2), y(3), x(4), y(5), y(2)];
        let mut tape = m.tape();
        let mut f = Forward::new(&m, &mut tape);
        let g = f.guidance(&seq).unwrap();
        let b = GuidanceBundle::from_tape(&tape, &g);
        // Fusion projection starts as the identity with zero bias.
        assert_eq!(b.g_d.row(0), b.g_x.row(0));
        assert_eq!(b.g_d.row(1), b.g_y.row(0));
        assert_eq!(b.g_d.row(2), b.g_x.row(1));
        assert_eq!(b.g_d.row(3), b.g_y.row(1));
        assert_eq!(b.g_d.row(4), b.g_y.row(2));
        assert_eq!(b.g_d_pooled, b.g_d.row(4));
        assert_eq!(b.g_x_last, b.g_x.row(1));

        let mut tape = m.tape();
        let mut f = Forward::new(&m, &mut tape);
        let g = f.guidance(&[x(2), x(3)]).unwrap();
        let b = GuidanceBundle::from_tape(&tape, &g);
        assert_eq!(b.g_d, b.g_x);
        assert_eq!(b.g_y.rows, 1);
        assert!(b.g_y.is_finite());
    }

    #[test]
    fn denoiser_contracts() {
        let m = init_parameters(&tiny_cfg(Variant::Full), 6).unwrap();
        let x_t = Mat::row_vector((0..8).map(|i| (i as f64 * 0.3).sin()).collect());
        let memory = Mat::from_vec(3, 8, (0..24).map(|i| (i as f64 * 0.7).cos()).collect());
        let run = |model: &Model, mem: &Mat| {
            let mut tape = model.tape();
            let xv = tape.constant(x_t.clone());
            let mv = tape.constant(mem.clone());
            let mut f = Forward::new(model, &mut tape);
            let out = f.denoise(xv, 4, mv).unwrap();
            tape.value(out).clone()
        };
        let base = run(&m, &memory);
        assert_eq!(base.shape(), (1, 8));

        let mut dup = Mat::zeros(6, 8);
        for r in 0..6 {
            dup.row_mut(r).copy_from_slice(memory.row(r % 3));
        }
        let out = run(&m, &dup);
        for (a, b) in out.data.iter().zip(&base.data) {
            assert!((a - b).abs() < 1e-12);
        }

        // Without value weights the output cannot depend on the guidance.
        let mut z = m.clone();
        let attn = z.layout.decoder.blocks[0].attn.clone();
        z.params.values[attn.wv] = Mat::zeros(8, 8);
        z.params.values[attn.bv] = Mat::zeros(1, 8);
        let other = Mat::from_vec(2, 8, (0..16).map(|i| i as f64).collect());
        assert_eq!(run(&z, &memory), run(&z, &other));
    }

    #[test]
    fn encode_aug_matches_single_token_denoise_path() {
        let mut m = init_parameters(&tiny_cfg(Variant::Full), 8).unwrap();
        let step = m.layout.step_emb;
        m.params.values[step] = Mat::zeros(10, 8);
        let pos = m.layout.pos;
        m.params.values[pos] = Mat::zeros(6, 8);
        let mut tape = m.tape();
        let mut f = Forward::new(&m, &mut tape);
        let h = f.encode_aug(&[x(4)]).unwrap();
        let e = f.item_embedding(x(4));
        let enc = f.stack(&m.layout.enc_c, e, &[true], None);
        assert_eq!(tape.value(h), tape.value(enc));
    }

    #[test]
    fn encode_aug_ignores_trailing_pad_positions() {
        let m = init_parameters(&tiny_cfg(Variant::Full), 8).unwrap();
        let pad = Token::new(PAD_INDEX, Domain::Y);
        let run = |tokens: &[Token]| {
            let mut tape = m.tape();
            let mut f = Forward::new(&m, &mut tape);
            let out = f.encode_aug(tokens).unwrap();
            tape.value(out).clone()
        };
        let a = run(&[x(2), y(3), pad, pad]);
        let b = run(&[x(2), y(3), Token::new(PAD_INDEX, Domain::X), pad]);
        assert_eq!(a, b);
        assert_eq!(a, run(&[x(2), y(3)]));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("diff-de-g".parse::<Variant>().unwrap(), Variant::DiffDeG);
    }
}
