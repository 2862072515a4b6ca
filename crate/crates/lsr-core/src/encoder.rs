//! Stacked transformer encoder with optional bottleneck adapter sublayers.
//!
//! The backbone is the usual post-norm layout: per layer, multi-head
//! attention and a GELU feed-forward block, each followed by residual and
//! layer norm. An adapter is a small down-project / GELU / up-project block
//! with its own residual, inserted after the attention and/or feed-forward
//! output, before the sublayer residual and norm. Freshly initialized
//! adapters (zero up-projection) are exact identities, so inserting them
//! does not perturb the backbone.
//!
//! Because backbone pretraining is out of scope, the "pretrained" weights
//! are seeded random values that get frozen; what is under test is the
//! structure: freezing, near-identity initialization, adapter-set routing
//! and parameter accounting.
//!
//! Parameter names (all matrices, row-major):
//!
//! ```text
//! embed.token          |V| x d      embed.pos           max_seq_len x d
//! embed.ln.gain/.bias  1 x d        embed.segment       2 x d (cross-encoder only)
//! layer.{i}.attn.wq/.wk/.wv/.wo     d x d (no bias terms)
//! layer.{i}.attn_ln.gain/.bias      1 x d
//! layer.{i}.ffn.w1     d x ffn      layer.{i}.ffn.b1    1 x ffn
//! layer.{i}.ffn.w2     ffn x d      layer.{i}.ffn.b2    1 x d
//! layer.{i}.ffn_ln.gain/.bias       1 x d
//! adapter.{set}.{i}.{attn|ffn}.down_w  d x r   .down_b  1 x r
//! adapter.{set}.{i}.{attn|ffn}.up_w    r x d   .up_b    1 x d
//! head.transform.w     d x d        head.transform.b    1 x d
//! head.ln.gain/.bias   1 x d        head.vocab_bias     1 x |V|
//! cls.w                d x 1        cls.b               1 x 1 (cross-encoder only)
//! ```

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::linalg::{Matrix, Precision, LAYER_NORM_EPS, MASK_NEG};
use crate::tape::{NodeId, ParameterStore, Tape};
use crate::{Error, Result};

/// Std-dev for backbone weight initialization.
pub const BACKBONE_INIT_STD: f64 = 0.02;
/// Std-dev for adapter down-projection initialization.
pub const ADAPTER_INIT_STD: f64 = 0.01;

/// Which adapter set a forward pass routes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterSet {
    Shared,
    Query,
    Document,
}

impl AdapterSet {
    pub fn key(self) -> &'static str {
        match self {
            AdapterSet::Shared => "shared",
            AdapterSet::Query => "query",
            AdapterSet::Document => "document",
        }
    }
}

impl std::fmt::Display for AdapterSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

/// Mono-adapter (one shared set) vs bi-adapter (distinct query and document
/// sets on the same frozen backbone).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdapterSets {
    #[default]
    Shared,
    QueryDocument,
}

impl AdapterSets {
    pub fn members(self) -> &'static [AdapterSet] {
        match self {
            AdapterSets::Shared => &[AdapterSet::Shared],
            AdapterSets::QueryDocument => &[AdapterSet::Query, AdapterSet::Document],
        }
    }

    pub fn contains(self, set: AdapterSet) -> bool {
        self.members().contains(&set)
    }
}

/// Backbone dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Inference-time numeric width; training always runs f64.
    pub precision: Precision,
}

impl EncoderConfig {
    /// Toy config used across tests: 2 layers, d=16, 2 heads.
    pub fn tiny(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size,
            max_seq_len: 32,
            precision: Precision::F64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Adapter placement, ablation set and freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    /// Bottleneck is `hidden_dim / reduction_factor`.
    pub reduction_factor: usize,
    pub after_attention: bool,
    pub after_ffn: bool,
    /// Layers that carry adapters; ablation removes a prefix.
    pub active_layers: BTreeSet<usize>,
    pub adapter_sets: AdapterSets,
    /// Train sublayer layer norms alongside adapters.
    pub train_layernorms: bool,
    /// Train the term-weight head alongside adapters.
    pub train_lm_head: bool,
}

impl AdapterConfig {
    /// Both placements, all layers active, one shared set.
    pub fn houlsby(num_layers: usize, reduction_factor: usize) -> Self {
        AdapterConfig {
            reduction_factor,
            after_attention: true,
            after_ffn: true,
            active_layers: (0..num_layers).collect(),
            adapter_sets: AdapterSets::Shared,
            train_layernorms: true,
            train_lm_head: true,
        }
    }

    /// No adapters anywhere (plain backbone).
    pub fn none() -> Self {
        AdapterConfig {
            reduction_factor: 16,
            after_attention: true,
            after_ffn: true,
            active_layers: BTreeSet::new(),
            adapter_sets: AdapterSets::Shared,
            train_layernorms: true,
            train_lm_head: true,
        }
    }

    pub fn bottleneck_dim(&self, hidden_dim: usize) -> Result<usize> {
        if self.reduction_factor == 0 {
            return Err(Error::Config("reduction_factor must be >= 1".into()));
        }
        let r = hidden_dim / self.reduction_factor;
        if r == 0 {
            return Err(Error::Config(format!(
                "reduction_factor {} leaves no bottleneck for hidden_dim {}",
                self.reduction_factor, hidden_dim
            )));
        }
        Ok(r)
    }

    pub fn placements(&self) -> Vec<&'static str> {
        let mut p = Vec::new();
        if self.after_attention {
            p.push("attn");
        }
        if self.after_ffn {
            p.push("ffn");
        }
        p
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        self.bottleneck_dim(enc.hidden_dim)?;
        if let Some(&max) = self.active_layers.iter().max() {
            if max >= enc.num_layers {
                return Err(Error::Config(format!(
                    "active adapter layer {max} out of range for {} layers",
                    enc.num_layers
                )));
            }
        }
        Ok(())
    }
}

/// Removes adapters from the first `k` layers: active set becomes
/// `{k, ..., num_layers-1}`. With `k = num_layers` no adapters remain and
/// training falls back to whatever the head/layer-norm flags allow.
pub fn ablate(config: &AdapterConfig, num_layers: usize, k: usize) -> Result<AdapterConfig> {
    if k > num_layers {
        return Err(Error::Contract(format!(
            "ablation prefix {k} out of range for {num_layers} layers"
        )));
    }
    let mut out = config.clone();
    out.active_layers = (k..num_layers).collect();
    Ok(out)
}

/// Token ids plus the attention mask (1 = real token, 0 = padding).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>, mask: Vec<u8>) -> Result<Self> {
        if ids.len() != mask.len() {
            return Err(Error::Shape(format!(
                "token/mask length mismatch: {} vs {}",
                ids.len(),
                mask.len()
            )));
        }
        Ok(TokenSequence { ids, mask })
    }

    /// All positions unmasked.
    pub fn unpadded(ids: Vec<u32>) -> Self {
        let mask = vec![1; ids.len()];
        TokenSequence { ids, mask }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Indices of unmasked positions.
    pub fn active_positions(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0)
            .map(|(i, _)| i)
            .collect()
    }

    fn truncated(&self, max_len: usize) -> TokenSequence {
        if self.len() <= max_len {
            self.clone()
        } else {
            TokenSequence {
                ids: self.ids[..max_len].to_vec(),
                mask: self.mask[..max_len].to_vec(),
            }
        }
    }
}

#[derive(Clone, Copy)]
enum InitKind {
    Normal(f64),
    Zeros,
    Ones,
}

/// (name, rows, cols, init) for every backbone and head parameter.
fn backbone_spec(config: &EncoderConfig) -> Vec<(String, usize, usize, InitKind)> {
    let d = config.hidden_dim;
    let ffn = config.ffn_dim;
    let v = config.vocab_size;
    let mut spec = vec![
        ("embed.token".into(), v, d, InitKind::Normal(BACKBONE_INIT_STD)),
        (
            "embed.pos".into(),
            config.max_seq_len,
            d,
            InitKind::Normal(BACKBONE_INIT_STD),
        ),
        ("embed.ln.gain".into(), 1, d, InitKind::Ones),
        ("embed.ln.bias".into(), 1, d, InitKind::Zeros),
    ];
    for i in 0..config.num_layers {
        // Attention projections carry no bias terms: a key-side bias is
        // exactly cancelled by the softmax (row-constant logit shift), and
        // the remaining ones are redundant with the sublayer layer norm.
        for w in ["wq", "wk", "wv", "wo"] {
            spec.push((
                format!("layer.{i}.attn.{w}"),
                d,
                d,
                InitKind::Normal(BACKBONE_INIT_STD),
            ));
        }
        spec.push((format!("layer.{i}.attn_ln.gain"), 1, d, InitKind::Ones));
        spec.push((format!("layer.{i}.attn_ln.bias"), 1, d, InitKind::Zeros));
        spec.push((
            format!("layer.{i}.ffn.w1"),
            d,
            ffn,
            InitKind::Normal(BACKBONE_INIT_STD),
        ));
        spec.push((format!("layer.{i}.ffn.b1"), 1, ffn, InitKind::Zeros));
        spec.push((
            format!("layer.{i}.ffn.w2"),
            ffn,
            d,
            InitKind::Normal(BACKBONE_INIT_STD),
        ));
        spec.push((format!("layer.{i}.ffn.b2"), 1, d, InitKind::Zeros));
        spec.push((format!("layer.{i}.ffn_ln.gain"), 1, d, InitKind::Ones));
        spec.push((format!("layer.{i}.ffn_ln.bias"), 1, d, InitKind::Zeros));
    }
    spec.push((
        "head.transform.w".into(),
        d,
        d,
        InitKind::Normal(BACKBONE_INIT_STD),
    ));
    spec.push(("head.transform.b".into(), 1, d, InitKind::Zeros));
    spec.push(("head.ln.gain".into(), 1, d, InitKind::Ones));
    spec.push(("head.ln.bias".into(), 1, d, InitKind::Zeros));
    spec.push(("head.vocab_bias".into(), 1, v, InitKind::Zeros));
    spec
}

fn adapter_spec(
    enc: &EncoderConfig,
    acfg: &AdapterConfig,
) -> Result<Vec<(String, usize, usize, InitKind)>> {
    let d = enc.hidden_dim;
    let r = acfg.bottleneck_dim(d)?;
    let mut spec = Vec::new();
    for set in acfg.adapter_sets.members() {
        for &layer in &acfg.active_layers {
            for place in acfg.placements() {
                let base = format!("adapter.{}.{layer}.{place}", set.key());
                spec.push((
                    format!("{base}.down_w"),
                    d,
                    r,
                    InitKind::Normal(ADAPTER_INIT_STD),
                ));
                spec.push((format!("{base}.down_b"), 1, r, InitKind::Zeros));
                spec.push((format!("{base}.up_w"), r, d, InitKind::Zeros));
                spec.push((format!("{base}.up_b"), 1, d, InitKind::Zeros));
            }
        }
    }
    Ok(spec)
}

/// Derives a per-parameter RNG seed so initialization is independent of
/// insertion order (FNV-1a over the name, mixed with the run seed).
pub fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9e3779b97f4a7c15)
}

fn init_matrix(name: &str, rows: usize, cols: usize, kind: InitKind, seed: u64) -> Matrix {
    match kind {
        InitKind::Zeros => Matrix::zeros(rows, cols),
        InitKind::Ones => {
            Matrix::from_vec(rows, cols, vec![1.0; rows * cols]).expect("shape is consistent")
        }
        InitKind::Normal(std) => {
            let mut rng = ChaCha12Rng::seed_from_u64(param_seed(seed, name));
            let dist = Normal::new(0.0, std).expect("std is positive");
            let data = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
            Matrix::from_vec(rows, cols, data).expect("shape is consistent")
        }
    }
}

/// Random backbone + term-weight head, everything marked trainable.
/// Apply [`set_trainable`] afterwards to install a freeze policy.
pub fn init_backbone(config: &EncoderConfig, seed: u64) -> Result<ParameterStore> {
    config.validate()?;
    let mut store = ParameterStore::new();
    for (name, rows, cols, kind) in backbone_spec(config) {
        let m = init_matrix(&name, rows, cols, kind, seed);
        store.insert(name, m, true);
    }
    Ok(store)
}

/// Adds near-identity adapters for every active layer and placement of every
/// configured set: down-projection ~ N(0, 0.01^2), up-projection and biases
/// zero, so the block is an exact identity until trained.
pub fn init_adapters(
    store: &mut ParameterStore,
    enc: &EncoderConfig,
    acfg: &AdapterConfig,
    seed: u64,
) -> Result<()> {
    for (name, rows, cols, kind) in adapter_spec(enc, acfg)? {
        let m = init_matrix(&name, rows, cols, kind, seed);
        store.insert(name, m, true);
    }
    Ok(())
}

/// Scalar parameter count of the backbone + head for a config, without
/// allocating anything.
pub fn backbone_param_count(config: &EncoderConfig) -> usize {
    backbone_spec(config).iter().map(|(_, r, c, _)| r * c).sum()
}

/// Scalar parameter count of all adapters for a config, without allocating.
pub fn adapter_param_count(enc: &EncoderConfig, acfg: &AdapterConfig) -> Result<usize> {
    Ok(adapter_spec(enc, acfg)?
        .iter()
        .map(|(_, r, c, _)| r * c)
        .sum())
}

/// Closed-form count of the adapter matrices alone:
/// `layers * placements * (d*r + r + r*d + d)` per adapter set.
pub fn adapter_matrix_count(d: usize, r: usize, layers: usize, placements: usize) -> usize {
    layers * placements * (d * r + r + r * d + d)
}

/// Freeze policy applied before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    FinetuneAll,
    AdapterTune,
    HeadOnly,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "finetune-all" | "finetune" => Ok(TrainMode::FinetuneAll),
            "adapter-tune" | "adapter" => Ok(TrainMode::AdapterTune),
            "head-only" | "head" => Ok(TrainMode::HeadOnly),
            other => Err(Error::Config(format!("unknown train mode `{other}`"))),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            TrainMode::FinetuneAll => "finetune-all",
            TrainMode::AdapterTune => "adapter-tune",
            TrainMode::HeadOnly => "head-only",
        }
    }
}

fn is_sublayer_norm(name: &str) -> bool {
    name.starts_with("layer.") && (name.contains(".attn_ln.") || name.contains(".ffn_ln."))
}

/// Layer norms train only where adapters are active, so the fully ablated
/// configuration really is "head only".
pub(crate) fn is_sublayer_norm_of_active_layer(name: &str, acfg: &AdapterConfig) -> bool {
    if !is_sublayer_norm(name) {
        return false;
    }
    let layer = name
        .strip_prefix("layer.")
        .and_then(|rest| rest.split('.').next())
        .and_then(|s| s.parse::<usize>().ok());
    layer.is_some_and(|l| acfg.active_layers.contains(&l))
}

pub(crate) fn is_adapter_of_active_layer(name: &str, acfg: &AdapterConfig) -> bool {
    let Some(rest) = name.strip_prefix("adapter.") else {
        return false;
    };
    // adapter.{set}.{layer}.{place}.{tensor}
    let mut parts = rest.split('.');
    let _set = parts.next();
    let Some(layer) = parts.next().and_then(|s| s.parse::<usize>().ok()) else {
        return false;
    };
    acfg.active_layers.contains(&layer)
}

/// Installs the trainable mask for a mode:
///
/// - `FinetuneAll`: everything trains.
/// - `AdapterTune`: adapters of active layers, plus sublayer layer norms and
///   the head when the config flags say so; the backbone stays frozen.
/// - `HeadOnly`: just the term-weight head.
pub fn set_trainable(store: &mut ParameterStore, acfg: &AdapterConfig, mode: TrainMode) {
    match mode {
        TrainMode::FinetuneAll => store.set_all_trainable(true),
        TrainMode::AdapterTune => {
            let names: Vec<String> = store.names().map(str::to_string).collect();
            for name in names {
                let on = is_adapter_of_active_layer(&name, acfg)
                    || (acfg.train_layernorms && is_sublayer_norm_of_active_layer(&name, acfg))
                    || (acfg.train_lm_head && name.starts_with("head."));
                store.set_trainable(&name, on).expect("name from iteration");
            }
        }
        TrainMode::HeadOnly => {
            let names: Vec<String> = store.names().map(str::to_string).collect();
            for name in names {
                let on = name.starts_with("head.");
                store.set_trainable(&name, on).expect("name from iteration");
            }
        }
    }
}

/// Exact trainable/total accounting from parameter shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCounts {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}

pub fn count_params(store: &ParameterStore) -> ParamCounts {
    ParamCounts {
        trainable: store.trainable_scalars(),
        total: store.total_scalars(),
    }
}

/// Forward passes over a parameter store. The store is borrowed immutably,
/// so concurrent read-only encodes are allowed by construction.
pub struct Encoder<'a> {
    pub config: &'a EncoderConfig,
    pub adapters: &'a AdapterConfig,
    pub store: &'a ParameterStore,
}

impl<'a> Encoder<'a> {
    pub fn new(
        config: &'a EncoderConfig,
        adapters: &'a AdapterConfig,
        store: &'a ParameterStore,
    ) -> Result<Self> {
        config.validate()?;
        adapters.validate(config)?;
        Ok(Encoder {
            config,
            adapters,
            store,
        })
    }

    fn check_set(&self, set: AdapterSet) -> Result<()> {
        if !self.adapters.adapter_sets.contains(set) {
            return Err(Error::Contract(format!(
                "unknown adapter set `{set}` for this config"
            )));
        }
        Ok(())
    }

    /// Additive attention mask: column j is 0 for real tokens and -1e9 for
    /// padding, replicated across rows.
    fn attention_mask(seq: &TokenSequence) -> Matrix {
        let n = seq.len();
        let mut m = Matrix::zeros(n, n);
        for j in 0..n {
            if seq.mask[j] == 0 {
                for i in 0..n {
                    m.set(i, j, MASK_NEG);
                }
            }
        }
        m
    }

    /// Token + position (+ optional segment) embeddings followed by the
    /// embedding layer norm.
    fn embed(
        &self,
        tape: &mut Tape,
        seq: &TokenSequence,
        segments: Option<&[u8]>,
    ) -> Result<NodeId> {
        let token_table = tape.param(self.store, "embed.token")?;
        let pos_table = tape.param(self.store, "embed.pos")?;
        let ids: Vec<usize> = seq.ids.iter().map(|&t| t as usize).collect();
        for &t in &ids {
            if t >= self.config.vocab_size {
                return Err(Error::Contract(format!(
                    "token id {t} out of range for vocab size {}",
                    self.config.vocab_size
                )));
            }
        }
        let tok = tape.gather_rows(token_table, &ids)?;
        let positions: Vec<usize> = (0..seq.len()).collect();
        let pos = tape.gather_rows(pos_table, &positions)?;
        let mut x = tape.add(tok, pos)?;
        if let Some(seg) = segments {
            if seg.len() != seq.len() {
                return Err(Error::Shape(format!(
                    "segment length {} does not match sequence length {}",
                    seg.len(),
                    seq.len()
                )));
            }
            let seg_table = tape.param(self.store, "embed.segment")?;
            let seg_ids: Vec<usize> = seg.iter().map(|&s| s as usize).collect();
            let seg_emb = tape.gather_rows(seg_table, &seg_ids)?;
            x = tape.add(x, seg_emb)?;
        }
        let gain = tape.param(self.store, "embed.ln.gain")?;
        let bias = tape.param(self.store, "embed.ln.bias")?;
        tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }

    /// Bottleneck adapter with residual: `h + gelu(h W_down + b_down) W_up + b_up`.
    ///
    /// Skipped entirely (returns `h`) when the layer is not in the active
    /// set or the placement is disabled.
    pub fn adapter_forward(
        &self,
        tape: &mut Tape,
        h: NodeId,
        layer: usize,
        set: AdapterSet,
        placement: &str,
    ) -> Result<NodeId> {
        self.check_set(set)?;
        if !self.adapters.active_layers.contains(&layer) {
            return Ok(h);
        }
        let enabled = match placement {
            "attn" => self.adapters.after_attention,
            "ffn" => self.adapters.after_ffn,
            other => {
                return Err(Error::Contract(format!(
                    "unknown adapter placement `{other}`"
                )))
            }
        };
        if !enabled {
            return Ok(h);
        }
        let base = format!("adapter.{}.{layer}.{placement}", set.key());
        let down_w = tape.param(self.store, &format!("{base}.down_w"))?;
        let down_b = tape.param(self.store, &format!("{base}.down_b"))?;
        let up_w = tape.param(self.store, &format!("{base}.up_w"))?;
        let up_b = tape.param(self.store, &format!("{base}.up_b"))?;
        let down = tape.matmul(h, down_w)?;
        let down = tape.add_row_broadcast(down, down_b)?;
        let act = tape.gelu(down);
        let up = tape.matmul(act, up_w)?;
        let up = tape.add_row_broadcast(up, up_b)?;
        tape.add(h, up)
    }

    /// Multi-head self-attention sublayer with residual + layer norm, with
    /// the adapter (when present) inserted before the residual.
    pub fn attention_layer(
        &self,
        tape: &mut Tape,
        x: NodeId,
        layer: usize,
        mask: NodeId,
        set: AdapterSet,
    ) -> Result<NodeId> {
        if layer >= self.config.num_layers {
            return Err(Error::Contract(format!(
                "layer {layer} out of range for {} layers",
                self.config.num_layers
            )));
        }
        let d_k = self.config.head_dim();
        let prefix = format!("layer.{layer}.attn");
        let wq = tape.param(self.store, &format!("{prefix}.wq"))?;
        let wk = tape.param(self.store, &format!("{prefix}.wk"))?;
        let wv = tape.param(self.store, &format!("{prefix}.wv"))?;
        let wo = tape.param(self.store, &format!("{prefix}.wo"))?;

        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;

        let scale = 1.0 / (d_k as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.num_heads);
        for h in 0..self.config.num_heads {
            let start = h * d_k;
            let qh = tape.slice_cols(q, start, d_k)?;
            let kh = tape.slice_cols(k, start, d_k)?;
            let vh = tape.slice_cols(v, start, d_k)?;
            let logits = tape.matmul_transpose_b(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let logits = tape.add(logits, mask)?;
            let probs = tape.softmax_rows(logits);
            heads.push(tape.matmul(probs, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        let proj = tape.matmul(cat, wo)?;

        let adapted = self.adapter_forward(tape, proj, layer, set, "attn")?;
        let res = tape.add(x, adapted)?;
        let gain = tape.param(self.store, &format!("layer.{layer}.attn_ln.gain"))?;
        let bias = tape.param(self.store, &format!("layer.{layer}.attn_ln.bias"))?;
        tape.layer_norm(res, gain, bias, LAYER_NORM_EPS)
    }

    /// Feed-forward sublayer `gelu(x W1 + b1) W2 + b2` with residual + layer
    /// norm, with the adapter (when present) inserted before the residual.
    pub fn ffn_layer(
        &self,
        tape: &mut Tape,
        x: NodeId,
        layer: usize,
        set: AdapterSet,
    ) -> Result<NodeId> {
        if layer >= self.config.num_layers {
            return Err(Error::Contract(format!(
                "layer {layer} out of range for {} layers",
                self.config.num_layers
            )));
        }
        let prefix = format!("layer.{layer}.ffn");
        let w1 = tape.param(self.store, &format!("{prefix}.w1"))?;
        let b1 = tape.param(self.store, &format!("{prefix}.b1"))?;
        let w2 = tape.param(self.store, &format!("{prefix}.w2"))?;
        let b2 = tape.param(self.store, &format!("{prefix}.b2"))?;

        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_broadcast(h, b1)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, w2)?;
        let h = tape.add_row_broadcast(h, b2)?;

        let adapted = self.adapter_forward(tape, h, layer, set, "ffn")?;
        let res = tape.add(x, adapted)?;
        let gain = tape.param(self.store, &format!("layer.{layer}.ffn_ln.gain"))?;
        let bias = tape.param(self.store, &format!("layer.{layer}.ffn_ln.bias"))?;
        tape.layer_norm(res, gain, bias, LAYER_NORM_EPS)
    }

    /// Full forward pass to the final hidden states (n x d). Sequences
    /// longer than `max_seq_len` are truncated, not rejected.
    pub fn encode(&self, tape: &mut Tape, seq: &TokenSequence, set: AdapterSet) -> Result<NodeId> {
        self.encode_with_segments(tape, seq, None, set)
    }

    /// Forward pass with optional segment markers (cross-encoder input).
    /// Segment slices must match the sequence before truncation.
    pub fn encode_with_segments(
        &self,
        tape: &mut Tape,
        seq: &TokenSequence,
        segments: Option<&[u8]>,
        set: AdapterSet,
    ) -> Result<NodeId> {
        self.check_set(set)?;
        if seq.is_empty() {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        let seq = seq.truncated(self.config.max_seq_len);
        let truncated_segments: Option<Vec<u8>> =
            segments.map(|s| s[..s.len().min(self.config.max_seq_len)].to_vec());
        let mut x = self.embed(tape, &seq, truncated_segments.as_deref())?;
        let mask = tape.constant(Self::attention_mask(&seq));
        for layer in 0..self.config.num_layers {
            x = self.attention_layer(tape, x, layer, mask, set)?;
            x = self.ffn_layer(tape, x, layer, set)?;
        }
        Ok(x)
    }
}
