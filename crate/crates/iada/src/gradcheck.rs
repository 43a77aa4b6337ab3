//! End-to-end gradient verification over the aggregator design space.
//!
//! Exhaustively checking every axis combination is wasteful; instead a greedy
//! pairwise-covering set is built so that every pair of axis levels appears in
//! at least one checked configuration. For each selected configuration a small
//! model runs one analytic backward pass and every adapter and aggregator
//! parameter element (plus a stride of backbone elements) is compared against
//! a central finite difference of the loss.

use crate::agg::{
    AggregatorConfig, AttentionParameterization, Bottleneck, Conditioning, GateMode, Granularity,
    Nonlinearity, Pooling, ProjectionSharing, QueryMode,
};
use crate::backbone::{AdapterConfig, BackboneConfig, Model};
use crate::params::ParamGroup;
use crate::tasks::{generate, TaskKind, TaskSpec};
use crate::tensor::Precision;

const AXES: usize = 11;

fn axis_levels() -> [usize; AXES] {
    // query, conditioning, sharing, bottleneck, nonlinearity, pooling,
    // granularity, gate, attention, per-boundary, context-norm
    [2, 5, 2, 3, 2, 2, 2, 3, 2, 2, 2]
}

fn decode(levels: &[usize; AXES]) -> AggregatorConfig {
    AggregatorConfig {
        query_mode: [QueryMode::Fixed, QueryMode::Adaptive][levels[0]],
        conditioning: [
            Conditioning::SelfModal,
            Conditioning::CrossModal,
            Conditioning::SharedNoSplit,
            Conditioning::TextOnly,
            Conditioning::VisionOnly,
        ][levels[1]],
        projection_sharing: [
            ProjectionSharing::SeparatePerModality,
            ProjectionSharing::SharedProjection,
        ][levels[2]],
        bottleneck: [
            Bottleneck::Rank(2),
            Bottleneck::Rank(4),
            Bottleneck::FullRank,
        ][levels[3]],
        bottleneck_nonlinearity: [Nonlinearity::Linear, Nonlinearity::Gelu][levels[4]],
        pooling: [Pooling::Mean, Pooling::AttentionProbe][levels[5]],
        granularity: [Granularity::SequenceLevel, Granularity::TokenLevel][levels[6]],
        gate_mode: [
            GateMode::Global,
            GateMode::PerBlock,
            GateMode::InputAdaptive,
        ][levels[7]],
        // an open gate keeps the aggregator path large enough for finite
        // differences to resolve
        gate_init: 0.0,
        attention_parameterization: [
            AttentionParameterization::ParameterFree,
            AttentionParameterization::LearnedProjections,
        ][levels[8]],
        per_boundary_params: levels[9] == 1,
        context_norm: levels[10] == 1,
    }
}

fn enumerate_valid() -> Vec<[usize; AXES]> {
    let dims = axis_levels();
    let mut out = Vec::new();
    let mut idx = [0usize; AXES];
    loop {
        if decode(&idx).validate().is_ok() {
            out.push(idx);
        }
        let mut a = AXES;
        loop {
            if a == 0 {
                return out;
            }
            a -= 1;
            idx[a] += 1;
            if idx[a] < dims[a] {
                break;
            }
            idx[a] = 0;
        }
    }
}

fn pair_key(a: usize, la: usize, b: usize, lb: usize) -> usize {
    ((a * AXES + b) * 8 + la) * 8 + lb
}

/// Greedy pairwise-covering subset of the valid configuration space: every
/// (axis level, axis level) pair occurs in at least one returned config.
pub fn covering_configs() -> Vec<AggregatorConfig> {
    let all = enumerate_valid();
    let mut uncovered = std::collections::HashSet::new();
    for cand in &all {
        for a in 0..AXES {
            for b in (a + 1)..AXES {
                uncovered.insert(pair_key(a, cand[a], b, cand[b]));
            }
        }
    }
    let mut picked = Vec::new();
    while !uncovered.is_empty() {
        let mut best = None;
        let mut best_gain = 0usize;
        for cand in &all {
            let mut gain = 0;
            for a in 0..AXES {
                for b in (a + 1)..AXES {
                    if uncovered.contains(&pair_key(a, cand[a], b, cand[b])) {
                        gain += 1;
                    }
                }
            }
            if gain > best_gain {
                best_gain = gain;
                best = Some(*cand);
            }
        }
        let chosen = best.expect("uncovered pairs must be reachable");
        for a in 0..AXES {
            for b in (a + 1)..AXES {
                uncovered.remove(&pair_key(a, chosen[a], b, chosen[b]));
            }
        }
        picked.push(decode(&chosen));
    }
    picked
}

#[derive(Debug, Clone)]
pub struct ConfigResult {
    pub config: AggregatorConfig,
    pub elements: usize,
    pub worst: f64,
    pub worst_param: String,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub results: Vec<ConfigResult>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.worst < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.results.iter().map(|r| r.worst).fold(0.0, f64::max)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-6)
}

/// Check one configuration on a small model; returns the worst relative error.
pub fn check_config(cfg: &AggregatorConfig, seed: u64) -> ConfigResult {
    let bcfg = BackboneConfig {
        layers: 6,
        blocks: 3,
        hidden: 8,
        heads: 2,
        text_vocab: 24,
        visual_vocab: 4,
        max_seq: 16,
        ff_mult: 2,
    };
    let mut m = Model::new(
        bcfg,
        AdapterConfig {
            rank: 2,
            alpha: 4.0,
        },
        Some(cfg.clone()),
        seed,
    );
    let spec = TaskSpec {
        kind: TaskKind::Composition,
        visual_vocab: 4,
        text_vocab: 24,
        seq_len: 10,
        fact_pairs: 2,
        distractors: 0,
    };
    let seq = generate(&spec, seed).expect("toy example").seq;
    m.store.zero_grad();
    m.loss_and_grad(&seq, Precision::F64, true)
        .expect("analytic pass");
    // five-point stencil with a larger step: rounding noise in the loss is
    // divided by h, so a plain central difference at h=1e-5 bottoms out near
    // 1e-4 relative on small gradients; the O(h^4) stencil lets h grow
    let h = 3e-4;
    let mut worst = 0.0;
    let mut worst_param = String::new();
    let mut elements = 0;
    let ids: Vec<_> = m
        .store
        .iter()
        .map(|(id, p)| (id, p.group, p.data.len()))
        .collect();
    for (id, group, len) in ids {
        // adapters and the aggregator are checked exhaustively, the frozen
        // backbone on a stride
        let stride = match group {
            ParamGroup::Backbone => 37,
            _ => 1,
        };
        let mut e = 0;
        while e < len {
            let analytic = m.store.get(id).grad[e];
            let orig = m.store.get(id).data[e];
            let mut at = |delta: f64| {
                m.store.get_mut(id).data[e] = orig + delta;
                m.loss_value(&seq, Precision::F64, true).expect("fd pass")
            };
            let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            m.store.get_mut(id).data[e] = orig;
            let err = rel_err(analytic, fd);
            if err > worst {
                worst = err;
                worst_param = format!("{}[{e}]", m.store.get(id).name);
            }
            elements += 1;
            e += stride;
        }
    }
    ConfigResult {
        config: cfg.clone(),
        elements,
        worst,
        worst_param,
    }
}

pub fn run(tolerance: f64) -> GradCheckReport {
    let configs = covering_configs();
    let results = configs
        .iter()
        .enumerate()
        .map(|(i, c)| check_config(c, 1000 + i as u64))
        .collect();
    GradCheckReport { results, tolerance }
}
