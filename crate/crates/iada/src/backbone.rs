//! Toy decoder-style multimodal transformer.
//!
//! Pre-norm blocks, learned positional embeddings, H-head causal
//! self-attention over the full interleaved sequence, gelu feed-forward.
//! The network is partitioned into `blocks` blocks of `block_size` layers;
//! hidden states are captured at every block boundary (including the
//! post-embedding state) and an optional aggregator is applied at each
//! boundary after caching, so the next block consumes the injected state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agg::{Aggregator, AggregatorConfig};
use crate::params::{Binding, Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{Graph, NumericError, Precision, Result, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub heads: usize,
    pub text_vocab: usize,
    pub visual_vocab: usize,
    pub max_seq: usize,
    /// Feed-forward hidden width as a multiple of `hidden`.
    pub ff_mult: usize,
}

impl BackboneConfig {
    pub fn block_size(&self) -> usize {
        self.layers / self.blocks
    }

    pub fn vocab(&self) -> usize {
        self.text_vocab + self.visual_vocab
    }

    /// Closed-form element count of the low-rank adapters at a given rank:
    /// six adapted maps per layer (four d->d, one d->ff, one ff->d).
    pub fn adapter_param_count(&self, rank: usize) -> usize {
        if rank == 0 {
            return 0;
        }
        let d = self.hidden;
        let ff = self.ff_mult * d;
        self.layers * (4 * 2 * rank * d + 2 * (rank * d + rank * ff))
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.blocks == 0 || self.layers % self.blocks != 0 {
            return Err(format!(
                "layers ({}) must be a multiple of blocks ({})",
                self.layers, self.blocks
            ));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(format!(
                "hidden ({}) must be divisible by heads ({})",
                self.hidden, self.heads
            ));
        }
        Ok(())
    }
}

impl Default for BackboneConfig {
    fn default() -> Self {
        // desk-scale default: L=8, K=4, B=2, d=64, H=4
        BackboneConfig {
            layers: 8,
            blocks: 4,
            hidden: 64,
            heads: 4,
            text_vocab: 48,
            visual_vocab: 16,
            max_seq: 64,
            ff_mult: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 16,
            alpha: 32.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<Modality>,
    pub targets: Vec<(usize, u32)>,
}

impl TokenSequence {
    pub fn split(&self) -> ModalitySplit {
        let mut visual = Vec::new();
        let mut text = Vec::new();
        for (i, m) in self.mask.iter().enumerate() {
            match m {
                Modality::Visual => visual.push(i as u32),
                Modality::Text => text.push(i as u32),
            }
        }
        ModalitySplit {
            n: self.ids.len(),
            visual,
            text,
        }
    }
}

/// Index view of the per-token modality mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySplit {
    pub n: usize,
    pub visual: Vec<u32>,
    pub text: Vec<u32>,
}

/// Hidden states captured at block boundaries: `h^0` (post-embedding) plus
/// one entry per block, each cached before any aggregation injection.
pub struct BlockBoundaryCache {
    pub layer_indices: Vec<usize>,
    pub entries: Vec<Var>,
}

/// One low-rank adapter pair on a frozen linear map.
#[derive(Debug, Clone, Copy)]
pub struct LoraHandles {
    pub down: ParamId,
    pub up: ParamId,
}

#[derive(Debug, Clone)]
struct LayerHandles {
    ln1_scale: ParamId,
    ln1_bias: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_scale: ParamId,
    ln2_bias: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    lora: Vec<Option<LoraHandles>>, // q, k, v, o, w1, w2
}

pub struct Model {
    pub cfg: BackboneConfig,
    pub adapter_cfg: AdapterConfig,
    pub store: ParamStore,
    pub aggregator: Option<Aggregator>,
    emb: ParamId,
    pos: ParamId,
    layers: Vec<LayerHandles>,
    lnf_scale: ParamId,
    lnf_bias: ParamId,
    unembed: ParamId,
}

impl Model {
    pub fn new(
        cfg: BackboneConfig,
        adapter_cfg: AdapterConfig,
        agg_cfg: Option<AggregatorConfig>,
        seed: u64,
    ) -> Self {
        cfg.validate().expect("invalid backbone config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.hidden;
        let ff = cfg.ff_mult * d;
        let std = 0.02;
        let emb = store.add(
            "emb",
            cfg.vocab(),
            d,
            ParamGroup::Backbone,
            Init::Normal(std),
            &mut rng,
        );
        let pos = store.add(
            "pos",
            cfg.max_seq,
            d,
            ParamGroup::Backbone,
            Init::Normal(std),
            &mut rng,
        );
        let mut layers = Vec::new();
        for l in 0..cfg.layers {
            let p = |n: &str| format!("layer{l}.{n}");
            let mut lh = LayerHandles {
                ln1_scale: store.add(
                    p("ln1.scale"),
                    1,
                    d,
                    ParamGroup::Backbone,
                    Init::Ones,
                    &mut rng,
                ),
                ln1_bias: store.add(
                    p("ln1.bias"),
                    1,
                    d,
                    ParamGroup::Backbone,
                    Init::Zeros,
                    &mut rng,
                ),
                wq: store.add(
                    p("wq"),
                    d,
                    d,
                    ParamGroup::Backbone,
                    Init::Normal(std),
                    &mut rng,
                ),
                wk: store.add(
                    p("wk"),
                    d,
                    d,
                    ParamGroup::Backbone,
                    Init::Normal(std),
                    &mut rng,
                ),
                wv: store.add(
                    p("wv"),
                    d,
                    d,
                    ParamGroup::Backbone,
                    Init::Normal(std),
                    &mut rng,
                ),
                wo: store.add(
                    p("wo"),
                    d,
                    d,
                    ParamGroup::Backbone,
                    Init::Normal(std),
                    &mut rng,
                ),
                ln2_scale: store.add(
                    p("ln2.scale"),
                    1,
                    d,
                    ParamGroup::Backbone,
                    Init::Ones,
                    &mut rng,
                ),
                ln2_bias: store.add(
                    p("ln2.bias"),
                    1,
                    d,
                    ParamGroup::Backbone,
                    Init::Zeros,
                    &mut rng,
                ),
                w1: store.add(
                    p("w1"),
                    d,
                    ff,
                    ParamGroup::Backbone,
                    Init::Normal(std),
                    &mut rng,
                ),
                b1: store.add(p("b1"), 1, ff, ParamGroup::Backbone, Init::Zeros, &mut rng),
                w2: store.add(
                    p("w2"),
                    ff,
                    d,
                    ParamGroup::Backbone,
                    Init::Normal(std),
                    &mut rng,
                ),
                b2: store.add(p("b2"), 1, d, ParamGroup::Backbone, Init::Zeros, &mut rng),
                lora: vec![None; 6],
            };
            if adapter_cfg.rank > 0 {
                // adapters on all linear maps; up map zero so adapted == base at init
                let dims = [(d, d), (d, d), (d, d), (d, d), (d, ff), (ff, d)];
                let names = ["wq", "wk", "wv", "wo", "w1", "w2"];
                for (i, ((din, dout), nm)) in dims.iter().zip(names).enumerate() {
                    let r = adapter_cfg.rank;
                    let down = store.add(
                        p(&format!("{nm}.lora_a")),
                        r,
                        *din,
                        ParamGroup::Adapter,
                        Init::Normal(1.0 / (*din as f64).sqrt()),
                        &mut rng,
                    );
                    let up = store.add(
                        p(&format!("{nm}.lora_b")),
                        *dout,
                        r,
                        ParamGroup::Adapter,
                        Init::Zeros,
                        &mut rng,
                    );
                    lh.lora[i] = Some(LoraHandles { down, up });
                }
            }
            layers.push(lh);
        }
        let lnf_scale = store.add(
            "lnf.scale",
            1,
            d,
            ParamGroup::Backbone,
            Init::Ones,
            &mut rng,
        );
        let lnf_bias = store.add(
            "lnf.bias",
            1,
            d,
            ParamGroup::Backbone,
            Init::Zeros,
            &mut rng,
        );
        let unembed = store.add(
            "unembed",
            d,
            cfg.vocab(),
            ParamGroup::Backbone,
            Init::Normal(std),
            &mut rng,
        );
        let aggregator =
            agg_cfg.map(|ac| Aggregator::new(ac, d, cfg.heads, cfg.blocks, &mut store, &mut rng));
        Model {
            cfg,
            adapter_cfg,
            store,
            aggregator,
            emb,
            pos,
            layers,
            lnf_scale,
            lnf_bias,
            unembed,
        }
    }

    /// Base linear map plus the scaled low-rank adapter path.
    pub fn lora_apply(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        x: Var,
        weight: ParamId,
        lora: Option<LoraHandles>,
    ) -> Result<Var> {
        let w = bind.var(g, &self.store, weight)?;
        let base = g.matmul(x, w)?;
        match lora {
            None => Ok(base),
            Some(h) => {
                if self.adapter_cfg.rank == 0 {
                    return Err(NumericError::EmptyInput { op: "lora_apply" });
                }
                let a = bind.var(g, &self.store, h.down)?;
                let b = bind.var(g, &self.store, h.up)?;
                let xa = g.matmul_nt(x, a)?;
                let xab = g.matmul_nt(xa, b)?;
                let scaled = g.scale(xab, self.adapter_cfg.alpha / self.adapter_cfg.rank as f64)?;
                g.add(base, scaled)
            }
        }
    }

    /// Token embedding plus learned positional embedding.
    pub fn embed(&self, g: &mut Graph, bind: &mut Binding, seq: &TokenSequence) -> Result<Var> {
        if seq.ids.is_empty() {
            return Err(NumericError::EmptyInput { op: "embed" });
        }
        let n = seq.ids.len();
        if n > self.cfg.max_seq {
            return Err(NumericError::IndexOutOfRange {
                op: "embed",
                index: n,
                limit: self.cfg.max_seq,
            });
        }
        let emb = bind.var(g, &self.store, self.emb)?;
        let pos = bind.var(g, &self.store, self.pos)?;
        let tok = g.gather_rows(emb, &seq.ids)?;
        let pidx: Vec<u32> = (0..n as u32).collect();
        let pe = g.gather_rows(pos, &pidx)?;
        g.add(tok, pe)
    }

    fn causal_mask(&self, g: &mut Graph, n: usize) -> Result<Var> {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                m[i * n + j] = -1e30;
            }
        }
        g.constant(m, n, n)
    }

    /// One pre-norm transformer layer with causal self-attention.
    pub fn transformer_layer(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        h: Var,
        layer: usize,
        mask: Var,
    ) -> Result<Var> {
        let lh = &self.layers[layer];
        let d = self.cfg.hidden;
        let dh = d / self.cfg.heads;
        let (n, _) = g.shape(h);

        let s1 = bind.var(g, &self.store, lh.ln1_scale)?;
        let b1n = bind.var(g, &self.store, lh.ln1_bias)?;
        let hn = g.row_norm(h, s1, b1n)?;
        let q = self.lora_apply(g, bind, hn, lh.wq, lh.lora[0])?;
        let k = self.lora_apply(g, bind, hn, lh.wk, lh.lora[1])?;
        let v = self.lora_apply(g, bind, hn, lh.wv, lh.lora[2])?;
        let mut heads = Vec::new();
        for hd in 0..self.cfg.heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let masked = g.add(scaled, mask)?;
            let attn = g.softmax_rows(masked)?;
            heads.push(g.matmul(attn, vh)?);
        }
        let cat = g.concat_cols(&heads)?;
        let attn_out = self.lora_apply(g, bind, cat, lh.wo, lh.lora[3])?;
        let h = g.add(h, attn_out)?;

        let s2 = bind.var(g, &self.store, lh.ln2_scale)?;
        let b2n = bind.var(g, &self.store, lh.ln2_bias)?;
        let hn2 = g.row_norm(h, s2, b2n)?;
        let f1 = self.lora_apply(g, bind, hn2, lh.w1, lh.lora[4])?;
        let fb1 = bind.var(g, &self.store, lh.b1)?;
        let f1 = g.add_row_broadcast(f1, fb1)?;
        let f1 = g.gelu(f1)?;
        let f2 = self.lora_apply(g, bind, f1, lh.w2, lh.lora[5])?;
        let fb2 = bind.var(g, &self.store, lh.b2)?;
        let f2 = g.add_row_broadcast(f2, fb2)?;
        debug_assert_eq!(g.shape(f2), (n, d));
        g.add(h, f2)
    }

    /// Forward pass with block-boundary capture and optional aggregation.
    pub fn forward_with_boundaries(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        seq: &TokenSequence,
        with_aggregator: bool,
    ) -> Result<(Var, BlockBoundaryCache)> {
        let mut h = self.embed(g, bind, seq)?;
        let n = seq.ids.len();
        let mask = self.causal_mask(g, n)?;
        let split = seq.split();
        let block_size = self.cfg.block_size();
        let mut cache = BlockBoundaryCache {
            layer_indices: vec![0],
            entries: vec![h],
        };
        for k in 1..=self.cfg.blocks {
            for l in 0..block_size {
                let layer = (k - 1) * block_size + l;
                h = self.transformer_layer(g, bind, h, layer, mask)?;
            }
            cache.layer_indices.push(k * block_size);
            cache.entries.push(h);
            if with_aggregator {
                if let Some(agg) = &self.aggregator {
                    // injection happens after caching, before the final norm at k = K
                    h = agg.apply(g, bind, &self.store, &cache.entries, &split, k)?;
                }
            }
        }
        let s = bind.var(g, &self.store, self.lnf_scale)?;
        let b = bind.var(g, &self.store, self.lnf_bias)?;
        let hn = g.row_norm(h, s, b)?;
        let u = bind.var(g, &self.store, self.unembed)?;
        let logits = g.matmul(hn, u)?;
        Ok((logits, cache))
    }

    /// Mean cross-entropy over the sequence's supervised target positions.
    pub fn loss(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        seq: &TokenSequence,
        with_aggregator: bool,
    ) -> Result<Var> {
        let (logits, _) = self.forward_with_boundaries(g, bind, seq, with_aggregator)?;
        let mut acc: Option<Var> = None;
        for &(pos, id) in &seq.targets {
            let l = g.cross_entropy_row(logits, pos, id as usize)?;
            acc = Some(match acc {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        let total = acc.ok_or(NumericError::EmptyInput { op: "loss" })?;
        g.scale(total, 1.0 / seq.targets.len() as f64)
    }

    /// Convenience: loss value on a fresh graph.
    pub fn loss_value(
        &self,
        seq: &TokenSequence,
        precision: Precision,
        with_aggregator: bool,
    ) -> Result<f64> {
        let mut g = Graph::new(precision);
        let mut bind = Binding::new();
        let l = self.loss(&mut g, &mut bind, seq, with_aggregator)?;
        Ok(g.scalar(l))
    }

    /// Loss, backward, and gradient accumulation into the store.
    pub fn loss_and_grad(
        &mut self,
        seq: &TokenSequence,
        precision: Precision,
        with_aggregator: bool,
    ) -> Result<f64> {
        let mut g = Graph::new(precision);
        let mut bind = Binding::new();
        let l = self.loss(&mut g, &mut bind, seq, with_aggregator)?;
        g.backward(l)?;
        bind.accumulate(&g, &mut self.store);
        Ok(g.scalar(l))
    }

    /// Greedy prediction at each supervised position.
    pub fn predict(
        &self,
        seq: &TokenSequence,
        precision: Precision,
        with_aggregator: bool,
    ) -> Result<Vec<u32>> {
        let mut g = Graph::new(precision);
        let mut bind = Binding::new();
        let (logits, _) = self.forward_with_boundaries(&mut g, &mut bind, seq, with_aggregator)?;
        let (_, v) = g.shape(logits);
        let data = g.data(logits);
        let mut out = Vec::new();
        for &(pos, _) in &seq.targets {
            let row = &data[pos * v..(pos + 1) * v];
            let mut best = 0;
            for j in 1..v {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out.push(best as u32);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::AggregatorConfig;
    use crate::check::max_rel_err;
    use crate::tensor::Precision;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            layers: 2,
            blocks: 2,
            hidden: 8,
            heads: 2,
            text_vocab: 12,
            visual_vocab: 4,
            max_seq: 16,
            ff_mult: 2,
        }
    }

    fn demo_seq(n: usize) -> TokenSequence {
        let mut ids = Vec::new();
        let mut mask = Vec::new();
        for i in 0..n {
            if i < n / 2 {
                ids.push(12 + (i % 4) as u32); // visual region
                mask.push(Modality::Visual);
            } else {
                ids.push((i % 12) as u32);
                mask.push(Modality::Text);
            }
        }
        TokenSequence {
            ids,
            mask,
            targets: vec![(n - 1, 3)],
        }
    }

    #[test]
    fn boundary_cache_layer_indices() {
        let cfg = BackboneConfig {
            layers: 8,
            blocks: 4,
            hidden: 8,
            heads: 2,
            ..tiny_cfg()
        };
        let m = Model::new(
            cfg,
            AdapterConfig {
                rank: 0,
                alpha: 0.0,
            },
            None,
            1,
        );
        let mut g = Graph::new(Precision::F64);
        let mut bind = Binding::new();
        let (_, cache) = m
            .forward_with_boundaries(&mut g, &mut bind, &demo_seq(6), false)
            .unwrap();
        assert_eq!(cache.layer_indices, vec![0, 2, 4, 6, 8]);
        assert_eq!(cache.entries.len(), 5);
    }

    #[test]
    fn zeroed_output_maps_make_layers_identity() {
        let mut m = Model::new(tiny_cfg(), AdapterConfig::default(), None, 2);
        for l in 0..2 {
            for nm in ["wo", "w2"] {
                let id = m.store.by_name(&format!("layer{l}.{nm}")).unwrap();
                m.store.get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut g = Graph::new(Precision::F64);
        let mut bind = Binding::new();
        let (_, cache) = m
            .forward_with_boundaries(&mut g, &mut bind, &demo_seq(6), false)
            .unwrap();
        let h0 = g.data(cache.entries[0]).to_vec();
        let hk = g.data(cache.entries[2]).to_vec();
        assert_eq!(
            h0, hk,
            "residual branches must vanish when wo and w2 are zero"
        );
    }

    #[test]
    fn attention_is_causal() {
        let m = Model::new(
            tiny_cfg(),
            AdapterConfig {
                rank: 0,
                alpha: 0.0,
            },
            None,
            3,
        );
        let seq_a = demo_seq(6);
        let mut seq_b = seq_a.clone();
        seq_b.ids[5] = (seq_b.ids[5] + 1) % 12;
        let logits = |s: &TokenSequence| {
            let mut g = Graph::new(Precision::F64);
            let mut bind = Binding::new();
            let (l, _) = m
                .forward_with_boundaries(&mut g, &mut bind, s, false)
                .unwrap();
            let (_, v) = g.shape(l);
            (g.data(l).to_vec(), v)
        };
        let (la, v) = logits(&seq_a);
        let (lb, _) = logits(&seq_b);
        assert_eq!(
            la[..5 * v],
            lb[..5 * v],
            "positions before the edit must be unaffected"
        );
        assert_ne!(
            la[5 * v..],
            lb[5 * v..],
            "the edited position must be affected"
        );
    }

    #[test]
    fn zero_init_adapters_are_inert() {
        let mut m = Model::new(tiny_cfg(), AdapterConfig::default(), None, 4);
        let seq = demo_seq(6);
        let before = m.predict(&seq, Precision::F64, false).unwrap();
        let l_before = m.loss_value(&seq, Precision::F64, false).unwrap();
        // scrambling the down maps must not matter while the up maps are zero
        for (_, p) in m.store.iter_mut() {
            if p.name.ends_with("lora_a") {
                p.data.iter_mut().for_each(|v| *v = 7.5 - *v);
            }
        }
        assert_eq!(m.predict(&seq, Precision::F64, false).unwrap(), before);
        assert_eq!(m.loss_value(&seq, Precision::F64, false).unwrap(), l_before);
        // a nonzero up map must change the output
        let id = m.store.by_name("layer0.wq.lora_b").unwrap();
        m.store.get_mut(id).data[0] = 0.3;
        assert_ne!(m.loss_value(&seq, Precision::F64, false).unwrap(), l_before);
    }

    #[test]
    fn embed_rejects_empty_and_overlong_input() {
        let m = Model::new(tiny_cfg(), AdapterConfig::default(), None, 5);
        let empty = TokenSequence {
            ids: vec![],
            mask: vec![],
            targets: vec![],
        };
        let long = demo_seq(17);
        let mut g = Graph::new(Precision::F64);
        let mut bind = Binding::new();
        assert!(m.embed(&mut g, &mut bind, &empty).is_err());
        assert!(m.embed(&mut g, &mut bind, &long).is_err());
    }

    #[test]
    fn near_closed_gate_leaves_forward_almost_unchanged() {
        let cfg = tiny_cfg();
        let no_agg = Model::new(cfg.clone(), AdapterConfig::default(), None, 6);
        let with_agg = Model::new(
            cfg,
            AdapterConfig::default(),
            Some(AggregatorConfig::default()),
            6,
        );
        let seq = demo_seq(8);
        // same seed but different rng consumption, so compare within one model
        let off = with_agg.loss_value(&seq, Precision::F64, false).unwrap();
        let on = with_agg.loss_value(&seq, Precision::F64, true).unwrap();
        assert!(
            (off - on).abs() < 1e-3,
            "sigma(-12) injection should be tiny: {off} vs {on}"
        );
        assert_ne!(off, on, "the gate is closed but not exactly zero");
        drop(no_agg);
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        // open the gate so the aggregator path carries signal the finite
        // difference can resolve
        let agg_cfg = AggregatorConfig {
            gate_init: 0.0,
            ..Default::default()
        };
        let mut m = Model::new(
            tiny_cfg(),
            AdapterConfig {
                rank: 2,
                alpha: 4.0,
            },
            Some(agg_cfg),
            7,
        );
        let seq = demo_seq(8);
        m.store.zero_grad();
        m.loss_and_grad(&seq, Precision::F64, true).unwrap();
        let probes = [
            ("emb", 0usize),
            ("layer0.wq", 3),
            ("layer1.w1", 10),
            ("layer0.wv.lora_a", 1),
            ("agg.v.down", 2),
            ("agg.t.up", 5),
            ("agg.gate", 0),
            ("unembed", 9),
        ];
        let h = 1e-5;
        for (name, elem) in probes {
            let id = m.store.by_name(name).unwrap();
            let analytic = m.store.get(id).grad[elem];
            let orig = m.store.get(id).data[elem];
            m.store.get_mut(id).data[elem] = orig + h;
            let lp = m.loss_value(&seq, Precision::F64, true).unwrap();
            m.store.get_mut(id).data[elem] = orig - h;
            let lm = m.loss_value(&seq, Precision::F64, true).unwrap();
            m.store.get_mut(id).data[elem] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = max_rel_err(&[analytic], &[fd]);
            assert!(err < 1e-4, "{name}[{elem}]: analytic {analytic} vs fd {fd}");
        }
    }
}
