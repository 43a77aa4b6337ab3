//! Cross-depth aggregation at block boundaries.
//!
//! Covers the fixed-query baseline and the input-adaptive form, plus every
//! variant axis: modality conditioning, projection sharing, bottleneck rank,
//! bottleneck nonlinearity, pooling, sequence- vs token-level granularity,
//! gate modes, and the two cross-attention parameterizations.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::backbone::ModalitySplit;
use crate::params::{Binding, Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Graph, NumericError, Result, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryMode {
    Fixed,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conditioning {
    SelfModal,
    CrossModal,
    SharedNoSplit,
    TextOnly,
    VisionOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionSharing {
    SeparatePerModality,
    SharedProjection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bottleneck {
    Rank(usize),
    FullRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Linear,
    Gelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    AttentionProbe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    SequenceLevel,
    TokenLevel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Global,
    PerBlock,
    InputAdaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionParameterization {
    ParameterFree,
    LearnedProjections,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorConfig {
    pub query_mode: QueryMode,
    pub conditioning: Conditioning,
    pub projection_sharing: ProjectionSharing,
    pub bottleneck: Bottleneck,
    pub bottleneck_nonlinearity: Nonlinearity,
    pub pooling: Pooling,
    pub granularity: Granularity,
    pub gate_mode: GateMode,
    pub gate_init: f64,
    pub attention_parameterization: AttentionParameterization,
    pub per_boundary_params: bool,
    pub context_norm: bool,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            query_mode: QueryMode::Adaptive,
            conditioning: Conditioning::SelfModal,
            projection_sharing: ProjectionSharing::SeparatePerModality,
            bottleneck: Bottleneck::Rank(16),
            bottleneck_nonlinearity: Nonlinearity::Linear,
            pooling: Pooling::Mean,
            granularity: Granularity::SequenceLevel,
            gate_mode: GateMode::PerBlock,
            gate_init: -12.0,
            attention_parameterization: AttentionParameterization::ParameterFree,
            per_boundary_params: false,
            context_norm: true,
        }
    }
}

impl AggregatorConfig {
    pub fn fixed_baseline() -> Self {
        AggregatorConfig {
            query_mode: QueryMode::Fixed,
            conditioning: Conditioning::SharedNoSplit,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.bottleneck == Bottleneck::FullRank
            && self.bottleneck_nonlinearity == Nonlinearity::Gelu
        {
            return Err("full_rank bottleneck excludes gelu nonlinearity".into());
        }
        if let Bottleneck::Rank(r) = self.bottleneck {
            if r == 0 {
                return Err("bottleneck rank must be at least 1".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Shared,
    Visual,
    Text,
}

impl StreamKind {
    fn tag(self) -> &'static str {
        match self {
            StreamKind::Shared => "s",
            StreamKind::Visual => "v",
            StreamKind::Text => "t",
        }
    }
}

fn streams_for(cond: Conditioning) -> Vec<StreamKind> {
    match cond {
        Conditioning::SharedNoSplit => vec![StreamKind::Shared],
        Conditioning::SelfModal | Conditioning::CrossModal => {
            vec![StreamKind::Visual, StreamKind::Text]
        }
        Conditioning::TextOnly => vec![StreamKind::Text],
        Conditioning::VisionOnly => vec![StreamKind::Visual],
    }
}

// ── parameter counting ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    /// Stream-owned parameters: projections, context norms, probes, fixed queries.
    pub streams: usize,
    /// Shared cross-attention projections (zero in parameter-free mode).
    pub attention: usize,
    /// Gate logits (and the gate weight vector in input-adaptive mode).
    pub gate: usize,
    pub total: usize,
    /// The headline figure used for table accounting: everything except gates.
    pub excl_gates: usize,
}

/// Closed-form count of aggregator-owned parameters for a hidden width `d`
/// and `k_blocks` boundaries.
pub fn param_count(cfg: &AggregatorConfig, d: usize, k_blocks: usize) -> ParamCount {
    let per_stream = match cfg.query_mode {
        QueryMode::Fixed => d,
        QueryMode::Adaptive => {
            let proj = match cfg.bottleneck {
                Bottleneck::Rank(r) => 2 * r * d,
                Bottleneck::FullRank => d * d,
            };
            let norm = if cfg.context_norm { 2 * d } else { 0 };
            let probe = if cfg.pooling == Pooling::AttentionProbe
                && cfg.granularity == Granularity::SequenceLevel
            {
                d
            } else {
                0
            };
            proj + norm + probe
        }
    };
    let n_streams = streams_for(cfg.conditioning).len();
    let effective_streams = if cfg.projection_sharing == ProjectionSharing::SharedProjection {
        1
    } else {
        n_streams
    };
    let boundary_factor = if cfg.per_boundary_params { k_blocks } else { 1 };
    let streams = per_stream * effective_streams * boundary_factor;
    let attention = match cfg.attention_parameterization {
        AttentionParameterization::ParameterFree => 0,
        AttentionParameterization::LearnedProjections => 4 * d * d,
    };
    let gate = match cfg.gate_mode {
        GateMode::Global => 1,
        GateMode::PerBlock => k_blocks,
        GateMode::InputAdaptive => d + 1,
    };
    ParamCount {
        streams,
        attention,
        gate,
        total: streams + attention + gate,
        excl_gates: streams + attention,
    }
}

// ── parameters and forward pass ──────────────────────────────────────

#[derive(Debug, Clone)]
struct StreamSlot {
    norm_scale: Option<ParamId>,
    norm_bias: Option<ParamId>,
    down: Option<ParamId>,
    up: Option<ParamId>,
    full: Option<ParamId>,
    probe: Option<ParamId>,
    fixed_q: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct Stream {
    kind: StreamKind,
    /// One slot, or `k_blocks` slots when parameters are per boundary.
    slots: Vec<StreamSlot>,
}

#[derive(Debug, Clone)]
pub struct Aggregator {
    pub cfg: AggregatorConfig,
    pub d: usize,
    pub heads: usize,
    pub k_blocks: usize,
    streams: Vec<Stream>,
    gate: ParamId,
    gate_weight: Option<ParamId>,
    attn_wq: Vec<ParamId>,
    attn_wk: Vec<ParamId>,
    attn_wv: Vec<ParamId>,
    attn_wo: Option<ParamId>,
}

/// Residual produced by one stream at one boundary.
pub struct StreamResidual {
    pub kind: StreamKind,
    pub indices: Vec<u32>,
    /// `None` for an empty modality stream or a non-adaptive stream in the
    /// text-only / vision-only variants with no tokens.
    pub residual: Option<Var>,
    /// Pooled context, kept for the input-adaptive gate.
    pub context: Option<Var>,
}

impl Aggregator {
    pub fn new(
        cfg: AggregatorConfig,
        d: usize,
        heads: usize,
        k_blocks: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(cfg.validate().is_ok(), "invalid aggregator config");
        assert_eq!(d % heads, 0, "hidden width must divide into heads");
        let n_slots = if cfg.per_boundary_params { k_blocks } else { 1 };
        let kinds = streams_for(cfg.conditioning);
        let shared = cfg.projection_sharing == ProjectionSharing::SharedProjection;
        let mut streams: Vec<Stream> = Vec::new();
        for (si, &kind) in kinds.iter().enumerate() {
            if shared && si > 0 {
                // both modalities reference the first stream's storage
                let slots = streams[0].slots.clone();
                streams.push(Stream { kind, slots });
                continue;
            }
            let tag = if shared { "m" } else { kind.tag() };
            let mut slots = Vec::new();
            for slot in 0..n_slots {
                let name = |p: &str| {
                    if n_slots == 1 {
                        format!("agg.{tag}.{p}")
                    } else {
                        format!("agg.{tag}.k{}.{p}", slot + 1)
                    }
                };
                let std = 1.0 / (d as f64).sqrt();
                let mut s = StreamSlot {
                    norm_scale: None,
                    norm_bias: None,
                    down: None,
                    up: None,
                    full: None,
                    probe: None,
                    fixed_q: None,
                };
                match cfg.query_mode {
                    QueryMode::Fixed => {
                        s.fixed_q = Some(store.add(
                            name("q"),
                            1,
                            d,
                            ParamGroup::Aggregator,
                            Init::Normal(std),
                            rng,
                        ));
                    }
                    QueryMode::Adaptive => {
                        if cfg.context_norm {
                            s.norm_scale = Some(store.add(
                                name("norm_scale"),
                                1,
                                d,
                                ParamGroup::Aggregator,
                                Init::Ones,
                                rng,
                            ));
                            s.norm_bias = Some(store.add(
                                name("norm_bias"),
                                1,
                                d,
                                ParamGroup::Aggregator,
                                Init::Zeros,
                                rng,
                            ));
                        }
                        match cfg.bottleneck {
                            Bottleneck::Rank(r) => {
                                s.down = Some(store.add(
                                    name("down"),
                                    r,
                                    d,
                                    ParamGroup::Aggregator,
                                    Init::Normal(std),
                                    rng,
                                ));
                                s.up = Some(store.add(
                                    name("up"),
                                    d,
                                    r,
                                    ParamGroup::Aggregator,
                                    Init::Normal(1.0 / (r as f64).sqrt()),
                                    rng,
                                ));
                            }
                            Bottleneck::FullRank => {
                                s.full = Some(store.add(
                                    name("full"),
                                    d,
                                    d,
                                    ParamGroup::Aggregator,
                                    Init::Normal(std),
                                    rng,
                                ));
                            }
                        }
                        if cfg.pooling == Pooling::AttentionProbe
                            && cfg.granularity == Granularity::SequenceLevel
                        {
                            s.probe = Some(store.add(
                                name("probe"),
                                1,
                                d,
                                ParamGroup::Aggregator,
                                Init::Normal(std),
                                rng,
                            ));
                        }
                    }
                }
                slots.push(s);
            }
            streams.push(Stream { kind, slots });
        }
        let gate = match cfg.gate_mode {
            GateMode::Global => store.add(
                "agg.gate",
                1,
                1,
                ParamGroup::Aggregator,
                Init::Const(cfg.gate_init),
                rng,
            ),
            GateMode::PerBlock => store.add(
                "agg.gate",
                1,
                k_blocks,
                ParamGroup::Aggregator,
                Init::Const(cfg.gate_init),
                rng,
            ),
            GateMode::InputAdaptive => store.add(
                "agg.gate",
                1,
                1,
                ParamGroup::Aggregator,
                Init::Const(cfg.gate_init),
                rng,
            ),
        };
        let gate_weight = match cfg.gate_mode {
            GateMode::InputAdaptive => Some(store.add(
                "agg.gate_w",
                1,
                d,
                ParamGroup::Aggregator,
                Init::Normal(1.0 / (d as f64).sqrt()),
                rng,
            )),
            _ => None,
        };
        let (mut attn_wq, mut attn_wk, mut attn_wv, mut attn_wo) =
            (Vec::new(), Vec::new(), Vec::new(), None);
        if cfg.attention_parameterization == AttentionParameterization::LearnedProjections {
            let dh = d / heads;
            let std = 1.0 / (d as f64).sqrt();
            for h in 0..heads {
                attn_wq.push(store.add(
                    format!("agg.attn.wq{h}"),
                    d,
                    dh,
                    ParamGroup::Aggregator,
                    Init::Normal(std),
                    rng,
                ));
                attn_wk.push(store.add(
                    format!("agg.attn.wk{h}"),
                    d,
                    dh,
                    ParamGroup::Aggregator,
                    Init::Normal(std),
                    rng,
                ));
                attn_wv.push(store.add(
                    format!("agg.attn.wv{h}"),
                    d,
                    dh,
                    ParamGroup::Aggregator,
                    Init::Normal(std),
                    rng,
                ));
            }
            attn_wo = Some(store.add(
                "agg.attn.wo",
                d,
                d,
                ParamGroup::Aggregator,
                Init::Normal(std),
                rng,
            ));
        }
        Aggregator {
            cfg,
            d,
            heads,
            k_blocks,
            streams,
            gate,
            gate_weight,
            attn_wq,
            attn_wk,
            attn_wv,
            attn_wo,
        }
    }

    fn slot(&self, stream_idx: usize, k: usize) -> &StreamSlot {
        let s = &self.streams[stream_idx];
        if s.slots.len() == 1 {
            &s.slots[0]
        } else {
            &s.slots[k - 1]
        }
    }

    fn stream_indices(&self, kind: StreamKind, split: &ModalitySplit) -> Vec<u32> {
        match kind {
            StreamKind::Shared => (0..split.n as u32).collect(),
            StreamKind::Visual => split.visual.clone(),
            StreamKind::Text => split.text.clone(),
        }
    }

    /// Pooled context vector of one stream's current rows (`n_m x d -> 1 x d`).
    pub fn pool_context(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        store: &ParamStore,
        rows: Var,
        stream_idx: usize,
        k: usize,
        apply_norm: bool,
    ) -> Result<Var> {
        let pooled = match self.cfg.pooling {
            Pooling::Mean => g.mean_rows(rows)?,
            Pooling::AttentionProbe => {
                let slot = self.slot(stream_idx, k);
                match slot.probe {
                    Some(pid) => {
                        let p = bind.var(g, store, pid)?;
                        let logits = g.matmul_nt(rows, p)?; // n x 1
                        let scaled = g.scale(logits, 1.0 / (self.d as f64).sqrt())?;
                        let lt = g.transpose(scaled)?; // 1 x n
                        let w = g.softmax_rows(lt)?;
                        g.matmul(w, rows)? // 1 x d
                    }
                    // probe-less streams (fixed query) fall back to the mean
                    None => g.mean_rows(rows)?,
                }
            }
        };
        if apply_norm && self.cfg.context_norm {
            let slot = self.slot(stream_idx, k);
            if let (Some(sid), Some(bid)) = (slot.norm_scale, slot.norm_bias) {
                let scale = bind.var(g, store, sid)?;
                let bias = bind.var(g, store, bid)?;
                return g.row_norm(pooled, scale, bias);
            }
        }
        Ok(pooled)
    }

    /// Map a context (or per-token rows) to aggregation queries.
    pub fn gen_query(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        store: &ParamStore,
        context: Var,
        stream_idx: usize,
        k: usize,
    ) -> Result<Var> {
        let slot = self.slot(stream_idx, k);
        match self.cfg.query_mode {
            QueryMode::Fixed => bind.var(g, store, slot.fixed_q.expect("fixed query param")),
            QueryMode::Adaptive => match self.cfg.bottleneck {
                Bottleneck::Rank(_) => {
                    let down = bind.var(g, store, slot.down.expect("down map"))?;
                    let up = bind.var(g, store, slot.up.expect("up map"))?;
                    let mut mid = g.matmul_nt(context, down)?;
                    if self.cfg.bottleneck_nonlinearity == Nonlinearity::Gelu {
                        mid = g.gelu(mid)?;
                    }
                    g.matmul_nt(mid, up)
                }
                Bottleneck::FullRank => {
                    let m = bind.var(g, store, slot.full.expect("full-rank map"))?;
                    g.matmul(context, m)
                }
            },
        }
    }

    /// Multi-head cross-attention of queries over a memory of cached rows.
    pub fn cross_attn(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        store: &ParamStore,
        queries: Var,
        memory: Var,
    ) -> Result<Var> {
        let (nx, _) = g.shape(memory);
        if nx == 0 {
            return Err(NumericError::EmptyInput { op: "cross_attn" });
        }
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        match self.cfg.attention_parameterization {
            AttentionParameterization::ParameterFree => {
                let mut heads = Vec::new();
                for h in 0..self.heads {
                    let qh = g.slice_cols(queries, h * dh, dh)?;
                    let xh = g.slice_cols(memory, h * dh, dh)?;
                    let scores = g.matmul_nt(qh, xh)?;
                    let scaled = g.scale(scores, scale)?;
                    let attn = g.softmax_rows(scaled)?;
                    heads.push(g.matmul(attn, xh)?);
                }
                g.concat_cols(&heads)
            }
            AttentionParameterization::LearnedProjections => {
                let mut heads = Vec::new();
                for h in 0..self.heads {
                    let wq = bind.var(g, store, self.attn_wq[h])?;
                    let wk = bind.var(g, store, self.attn_wk[h])?;
                    let wv = bind.var(g, store, self.attn_wv[h])?;
                    let qh = g.matmul(queries, wq)?;
                    let kh = g.matmul(memory, wk)?;
                    let vh = g.matmul(memory, wv)?;
                    let scores = g.matmul_nt(qh, kh)?;
                    let scaled = g.scale(scores, scale)?;
                    let attn = g.softmax_rows(scaled)?;
                    heads.push(g.matmul(attn, vh)?);
                }
                let cat = g.concat_cols(&heads)?;
                let wo = bind.var(g, store, self.attn_wo.expect("output projection"))?;
                g.matmul(cat, wo)
            }
        }
    }

    /// Residuals for every stream at boundary `k`. `cache` holds the boundary
    /// states `0..=k`; the memory for each stream is built from entries
    /// `0..k` and the query from entry `k`.
    pub fn aggregate(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        store: &ParamStore,
        cache: &[Var],
        split: &ModalitySplit,
        k: usize,
    ) -> Result<Vec<StreamResidual>> {
        if k == 0 || cache.len() <= k {
            return Err(NumericError::EmptyInput { op: "aggregate" });
        }
        let current = cache[k];
        // first pass: contexts (needed before queries for cross-modal routing)
        let mut contexts: Vec<Option<Var>> = Vec::new();
        let mut index_sets: Vec<Vec<u32>> = Vec::new();
        let need_context = self.cfg.query_mode == QueryMode::Adaptive
            || self.cfg.gate_mode == GateMode::InputAdaptive;
        for (si, stream) in self.streams.iter().enumerate() {
            let idx = self.stream_indices(stream.kind, split);
            let ctx = if need_context && !idx.is_empty() {
                let rows = g.gather_rows(current, &idx)?;
                Some(self.pool_context(g, bind, store, rows, si, k, true)?)
            } else {
                None
            };
            contexts.push(ctx);
            index_sets.push(idx);
        }
        let mut out = Vec::new();
        for (si, stream) in self.streams.iter().enumerate() {
            let idx = index_sets[si].clone();
            if idx.is_empty() {
                out.push(StreamResidual {
                    kind: stream.kind,
                    indices: idx,
                    residual: None,
                    context: None,
                });
                continue;
            }
            let mut memory_parts = Vec::new();
            for entry in &cache[0..k] {
                memory_parts.push(g.gather_rows(*entry, &idx)?);
            }
            let memory = g.concat_rows(&memory_parts)?;
            let queries = match self.cfg.granularity {
                Granularity::SequenceLevel => {
                    let ctx = match self.conditioning_source(si, &contexts, g)? {
                        Some(c) => c,
                        None => {
                            // fixed query ignores the context entirely
                            g.constant(vec![0.0; self.d], 1, self.d)?
                        }
                    };
                    self.gen_query(g, bind, store, ctx, si, k)?
                }
                Granularity::TokenLevel => {
                    let rows = g.gather_rows(current, &idx)?;
                    let rows =
                        if self.cfg.context_norm && self.cfg.query_mode == QueryMode::Adaptive {
                            let slot = self.slot(si, k);
                            match (slot.norm_scale, slot.norm_bias) {
                                (Some(sid), Some(bid)) => {
                                    let scale = bind.var(g, store, sid)?;
                                    let bias = bind.var(g, store, bid)?;
                                    g.row_norm(rows, scale, bias)?
                                }
                                _ => rows,
                            }
                        } else {
                            rows
                        };
                    self.gen_query(g, bind, store, rows, si, k)?
                }
            };
            let residual = self.cross_attn(g, bind, store, queries, memory)?;
            out.push(StreamResidual {
                kind: stream.kind,
                indices: idx,
                residual: Some(residual),
                context: contexts[si],
            });
        }
        Ok(out)
    }

    /// The context a stream's query is conditioned on (its own, or the other
    /// modality's for cross-modal routing). An empty source yields zeros.
    fn conditioning_source(
        &self,
        si: usize,
        contexts: &[Option<Var>],
        g: &mut Graph,
    ) -> Result<Option<Var>> {
        if self.cfg.query_mode == QueryMode::Fixed {
            return Ok(None);
        }
        let source = match self.cfg.conditioning {
            Conditioning::CrossModal => {
                let other = 1 - si;
                match contexts[other] {
                    Some(c) => Some(c),
                    None => Some(g.constant(vec![0.0; self.d], 1, self.d)?),
                }
            }
            _ => contexts[si],
        };
        Ok(source)
    }

    /// Inject residuals into `h` through the gated, modality-scattered path.
    pub fn gated_inject(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        store: &ParamStore,
        h: Var,
        residuals: &[StreamResidual],
        k: usize,
    ) -> Result<Var> {
        let (n, _) = g.shape(h);
        let mut out = h;
        for sr in residuals {
            let Some(res) = sr.residual else { continue };
            let alpha = self.gate_value(g, bind, store, sr, k)?;
            let scaled = g.mul_scalar(res, alpha)?;
            let placed = g.scatter_rows(scaled, &sr.indices, n)?;
            out = g.add(out, placed)?;
        }
        Ok(out)
    }

    fn gate_value(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        store: &ParamStore,
        sr: &StreamResidual,
        k: usize,
    ) -> Result<Var> {
        let gate = bind.var(g, store, self.gate)?;
        let logit = match self.cfg.gate_mode {
            GateMode::Global => gate,
            GateMode::PerBlock => g.slice_cols(gate, k - 1, 1)?,
            GateMode::InputAdaptive => {
                let w = bind.var(g, store, self.gate_weight.expect("gate weight"))?;
                let ctx = match sr.context {
                    Some(c) => c,
                    None => g.constant(vec![0.0; self.d], 1, self.d)?,
                };
                let dot = g.matmul_nt(w, ctx)?;
                g.add(dot, gate)?
            }
        };
        g.sigmoid(logit)
    }

    /// Full boundary update: aggregate then inject. `cache` holds entries `0..=k`.
    pub fn apply(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        store: &ParamStore,
        cache: &[Var],
        split: &ModalitySplit,
        k: usize,
    ) -> Result<Var> {
        let residuals = self.aggregate(g, bind, store, cache, split, k)?;
        self.gated_inject(g, bind, store, cache[k], &residuals, k)
    }

    pub fn param_count(&self) -> ParamCount {
        param_count(&self.cfg, self.d, self.k_blocks)
    }
}

// ── enum parsing / printing (config file surface) ────────────────────

macro_rules! enum_str {
    ($ty:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self { $($ty::$var => $s),+ };
                f.write_str(s)
            }
        }
        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($s => Ok($ty::$var),)+
                    other => Err(format!(
                        "unknown {} value '{}' (expected one of: {})",
                        stringify!($ty), other, [$($s),+].join(", ")
                    )),
                }
            }
        }
    };
}

enum_str!(QueryMode { Fixed => "fixed", Adaptive => "adaptive" });
enum_str!(Conditioning {
    SelfModal => "self_modal",
    CrossModal => "cross_modal",
    SharedNoSplit => "shared_no_split",
    TextOnly => "text_only",
    VisionOnly => "vision_only",
});
enum_str!(ProjectionSharing {
    SeparatePerModality => "separate_per_modality",
    SharedProjection => "shared_projection",
});
enum_str!(Nonlinearity { Linear => "linear", Gelu => "gelu" });
enum_str!(Pooling { Mean => "mean", AttentionProbe => "attention_probe" });
enum_str!(Granularity { SequenceLevel => "sequence_level", TokenLevel => "token_level" });
enum_str!(GateMode { Global => "global", PerBlock => "per_block", InputAdaptive => "input_adaptive" });
enum_str!(AttentionParameterization {
    ParameterFree => "parameter_free",
    LearnedProjections => "learned_projections",
});

impl fmt::Display for Bottleneck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bottleneck::Rank(r) => write!(f, "{r}"),
            Bottleneck::FullRank => f.write_str("full"),
        }
    }
}

impl FromStr for Bottleneck {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "full" || s == "full_rank" {
            return Ok(Bottleneck::FullRank);
        }
        s.parse::<usize>()
            .map(Bottleneck::Rank)
            .map_err(|_| format!("rank must be an integer or 'full', got '{s}'"))
    }
}
