//! Training and evaluation engine: pretraining, the four fine-tuning
//! conditions, the reasoning-tax protocol, and axis sweeps.
//!
//! Conditions:
//!   A — the pretrained model, evaluated as-is;
//!   B — low-rank adapters only;
//!   C — adapters plus the fixed-query aggregation baseline;
//!   D — adapters plus the input-adaptive aggregator.
//!
//! Pretraining is full-parameter on a 50/50 surface/composition mixture.
//! Fine-tuning freezes the backbone and trains two optimizer groups at
//! separate rates on a finite, epoch-shuffled surface-only dataset.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agg::AggregatorConfig;
use crate::backbone::{AdapterConfig, Model};
use crate::config::ExperimentConfig;
use crate::optim::{AdamHyper, AdamW, GroupRates};
use crate::params::ParamGroup;
use crate::report::MetricRecord;
use crate::tasks::{generate, Example, TaskKind, TaskSpec};
use crate::tensor::{NumericError, Precision};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    A,
    B,
    C,
    D,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::A, Condition::B, Condition::C, Condition::D];

    pub fn describe(self) -> &'static str {
        match self {
            Condition::A => "pretrained, no fine-tuning",
            Condition::B => "adapters only",
            Condition::C => "adapters + fixed-query aggregation",
            Condition::D => "adapters + input-adaptive aggregation",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::A => "A",
            Condition::B => "B",
            Condition::C => "C",
            Condition::D => "D",
        })
    }
}

impl FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "A" | "a" => Ok(Condition::A),
            "B" | "b" => Ok(Condition::B),
            "C" | "c" => Ok(Condition::C),
            "D" | "d" => Ok(Condition::D),
            other => Err(format!(
                "unknown condition '{other}' (expected A, B, C, or D)"
            )),
        }
    }
}

#[derive(Debug)]
pub enum HarnessError {
    Diverged { step: usize, detail: String },
    Numeric(NumericError),
    Invalid(String),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Diverged { step, detail } => {
                write!(f, "training diverged at step {step}: {detail}")
            }
            HarnessError::Numeric(e) => write!(f, "numerical failure: {e}"),
            HarnessError::Invalid(m) => write!(f, "harness misuse: {m}"),
        }
    }
}

impl std::error::Error for HarnessError {}

impl From<NumericError> for HarnessError {
    fn from(e: NumericError) -> Self {
        HarnessError::Numeric(e)
    }
}

type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub surface_acc: f64,
    pub composition_acc: f64,
    pub overall: f64,
    pub loss_curve: Vec<(usize, f64)>,
    pub adapter_params: usize,
    pub aggregator_params: usize,
    pub trainable_params: usize,
}

pub fn surface_spec(cfg: &ExperimentConfig) -> TaskSpec {
    TaskSpec {
        kind: TaskKind::Surface,
        visual_vocab: cfg.backbone.visual_vocab,
        text_vocab: cfg.backbone.text_vocab,
        seq_len: cfg.tasks.seq_len,
        fact_pairs: 0,
        distractors: 0,
    }
}

pub fn composition_spec(cfg: &ExperimentConfig) -> TaskSpec {
    TaskSpec {
        kind: TaskKind::Composition,
        visual_vocab: cfg.backbone.visual_vocab,
        text_vocab: cfg.backbone.text_vocab,
        seq_len: cfg.tasks.seq_len,
        fact_pairs: cfg.tasks.fact_pairs,
        distractors: cfg.tasks.distractors,
    }
}

pub fn precision_of(cfg: &ExperimentConfig) -> Precision {
    if cfg.train.precision == 64 {
        Precision::F64
    } else {
        Precision::F32
    }
}

/// The aggregator the given condition trains, if any.
fn condition_aggregator(cfg: &ExperimentConfig, cond: Condition) -> Option<AggregatorConfig> {
    match cond {
        Condition::A | Condition::B => None,
        Condition::C => Some(AggregatorConfig {
            gate_init: cfg.aggregator.gate_init,
            ..AggregatorConfig::fixed_baseline()
        }),
        Condition::D => Some(cfg.aggregator.clone()),
    }
}

fn warmup_scale(step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}

fn scale_grads(model: &mut Model, factor: f64) {
    for (_, p) in model.store.iter_mut() {
        for g in &mut p.grad {
            *g *= factor;
        }
    }
}

struct LossCurve {
    every: usize,
    points: Vec<(usize, f64)>,
}

impl LossCurve {
    fn new(steps: usize) -> Self {
        LossCurve {
            every: (steps / 50).max(1),
            points: Vec::new(),
        }
    }

    fn record(&mut self, step: usize, steps: usize, loss: f64) {
        if step % self.every == 0 || step + 1 == steps {
            self.points.push((step, loss));
        }
    }
}

fn train_batch(
    model: &mut Model,
    batch: &[Example],
    precision: Precision,
    with_aggregator: bool,
    step: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in batch {
        let l = model
            .loss_and_grad(&ex.seq, precision, with_aggregator)
            .map_err(|e| match e {
                NumericError::NonFinite { .. } => HarnessError::Diverged {
                    step,
                    detail: e.to_string(),
                },
                other => HarnessError::Numeric(other),
            })?;
        total += l;
    }
    let mean = total / batch.len() as f64;
    if !mean.is_finite() {
        return Err(HarnessError::Diverged {
            step,
            detail: format!("mean loss {mean}"),
        });
    }
    Ok(mean)
}

/// Full-parameter pretraining of a fresh backbone (no adapters, no
/// aggregator) on the 50/50 surface/composition mixture.
pub fn pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<(Model, Vec<(usize, f64)>)> {
    let mut model = Model::new(
        cfg.backbone.clone(),
        AdapterConfig {
            rank: 0,
            alpha: 0.0,
        },
        None,
        seed,
    );
    let precision = precision_of(cfg);
    let hyper = AdamHyper {
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.eps,
        weight_decay: cfg.train.weight_decay,
    };
    let mut opt = AdamW::new(&model.store, hyper);
    let rates = GroupRates {
        backbone: Some(cfg.train.backbone_lr),
        ..Default::default()
    };
    let s_spec = surface_spec(cfg);
    let c_spec = composition_spec(cfg);
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 0x11);
    let steps = cfg.train.pretrain_steps;
    let mut curve = LossCurve::new(steps);
    for step in 0..steps {
        let batch: Vec<Example> = (0..cfg.train.batch)
            .map(|_| {
                let spec = if data_rng.gen_bool(0.5) {
                    &s_spec
                } else {
                    &c_spec
                };
                generate(spec, data_rng.gen::<u64>()).expect("valid task spec")
            })
            .collect();
        model.store.zero_grad();
        let loss = train_batch(&mut model, &batch, precision, false, step)?;
        scale_grads(&mut model, 1.0 / batch.len() as f64);
        opt.step(
            &mut model.store,
            &rates,
            warmup_scale(step, cfg.train.warmup),
        );
        curve.record(step, steps, loss);
    }
    Ok((model, curve.points))
}

/// Fine-tune from a pretrained backbone under one condition. The backbone is
/// copied into a fresh model carrying the condition's adapters and
/// aggregator, then frozen; only adapter and aggregator groups update.
pub fn finetune(
    pretrained: &Model,
    cond: Condition,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<(Model, Vec<(usize, f64)>)> {
    if cond == Condition::A {
        return Err(HarnessError::Invalid(
            "condition A is the untrained reference; it rejects fine-tuning".into(),
        ));
    }
    let mut model = Model::new(
        cfg.backbone.clone(),
        cfg.adapter,
        condition_aggregator(cfg, cond),
        seed.wrapping_add(match cond {
            Condition::B => 0xb0,
            Condition::C => 0xc0,
            Condition::D => 0xd0,
            Condition::A => unreachable!(),
        }),
    );
    for (_, p) in pretrained.store.iter() {
        let id = model.store.by_name(&p.name).ok_or_else(|| {
            HarnessError::Invalid(format!("backbone shape drift at '{}'", p.name))
        })?;
        model.store.get_mut(id).data.copy_from_slice(&p.data);
    }
    let precision = precision_of(cfg);
    let hyper = AdamHyper {
        beta1: cfg.train.beta1,
        beta2: cfg.train.beta2,
        eps: cfg.train.eps,
        weight_decay: cfg.train.weight_decay,
    };
    let mut opt = AdamW::new(&model.store, hyper);
    let rates = GroupRates {
        backbone: None, // frozen
        adapter: Some(cfg.train.adapter_lr),
        aggregator: Some(cfg.train.aggregator_lr),
    };
    // finite surface-only dataset, reshuffled every epoch
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ 0x22);
    let s_spec = surface_spec(cfg);
    let dataset: Vec<Example> = (0..cfg.train.train_examples)
        .map(|_| generate(&s_spec, data_rng.gen::<u64>()).expect("valid task spec"))
        .collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = dataset.len(); // force an initial shuffle
    let steps = cfg.train.finetune_steps;
    let mut curve = LossCurve::new(steps);
    let with_agg = model.aggregator.is_some();
    for step in 0..steps {
        let mut batch = Vec::with_capacity(cfg.train.batch);
        for _ in 0..cfg.train.batch {
            if cursor >= order.len() {
                for i in (1..order.len()).rev() {
                    let j = data_rng.gen_range(0..=i);
                    order.swap(i, j);
                }
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        model.store.zero_grad();
        let loss = train_batch(&mut model, &batch, precision, with_agg, step)?;
        scale_grads(&mut model, 1.0 / batch.len() as f64);
        opt.step(
            &mut model.store,
            &rates,
            warmup_scale(step, cfg.train.warmup),
        );
        curve.record(step, steps, loss);
    }
    Ok((model, curve.points))
}

/// Greedy-argmax accuracy on fixed evaluation sets for both tasks.
pub fn evaluate(model: &Model, cfg: &ExperimentConfig) -> Result<Metrics> {
    let n = cfg.train.eval_examples;
    if n == 0 {
        return Err(HarnessError::Invalid("empty evaluation set".into()));
    }
    let precision = precision_of(cfg);
    let with_agg = model.aggregator.is_some();
    let mut accs = [0.0f64; 2];
    for (ti, spec) in [surface_spec(cfg), composition_spec(cfg)]
        .iter()
        .enumerate()
    {
        let mut correct = 0usize;
        for i in 0..n {
            // a seed range disjoint from training draws (those are full u64s)
            let ex = generate(spec, 0xe7a1_0000 + i as u64).expect("valid task spec");
            let pred = model.predict(&ex.seq, precision, with_agg)?;
            if pred[0] == ex.answer {
                correct += 1;
            }
        }
        accs[ti] = correct as f64 / n as f64;
    }
    let adapter_params = model.store.total_elements(Some(ParamGroup::Adapter));
    let aggregator_params = model.store.total_elements(Some(ParamGroup::Aggregator));
    Ok(Metrics {
        surface_acc: accs[0],
        composition_acc: accs[1],
        overall: (accs[0] + accs[1]) / 2.0,
        loss_curve: Vec::new(),
        adapter_params,
        aggregator_params,
        trainable_params: adapter_params + aggregator_params,
    })
}

// ── reasoning-tax protocol ───────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TaxRun {
    pub seed: u64,
    pub metrics: Vec<(Condition, Metrics)>,
}

impl TaxRun {
    pub fn metrics_for(&self, c: Condition) -> &Metrics {
        &self
            .metrics
            .iter()
            .find(|(k, _)| *k == c)
            .expect("all conditions present")
            .1
    }
}

/// One full A/B/C/D protocol at one seed: pretrain once, fine-tune each
/// trainable condition from the same backbone, evaluate everything on the
/// same fixed sets.
pub fn tax_run(cfg: &ExperimentConfig, seed: u64) -> Result<TaxRun> {
    let (pre, pre_curve) = pretrain(cfg, seed)?;
    let mut metrics = Vec::new();
    let mut a = evaluate(&pre, cfg)?;
    a.loss_curve = pre_curve;
    metrics.push((Condition::A, a));
    for cond in [Condition::B, Condition::C, Condition::D] {
        let (m, curve) = finetune(&pre, cond, cfg, seed)?;
        let mut e = evaluate(&m, cfg)?;
        e.loss_curve = curve;
        metrics.push((cond, e));
    }
    Ok(TaxRun { seed, metrics })
}

pub fn tax_records(run: &TaxRun, run_id: &str, cfg: &ExperimentConfig) -> Vec<MetricRecord> {
    let mut out = Vec::new();
    let step_of = |c: Condition| match c {
        Condition::A => cfg.train.pretrain_steps,
        _ => cfg.train.finetune_steps,
    };
    for (cond, m) in &run.metrics {
        for (task, v) in [
            ("surface", m.surface_acc),
            ("composition", m.composition_acc),
            ("overall", m.overall),
        ] {
            out.push(MetricRecord {
                run_id: run_id.to_string(),
                condition: cond.to_string(),
                seed: run.seed,
                step: step_of(*cond),
                task: task.to_string(),
                metric: "accuracy".to_string(),
                value: v,
            });
        }
        for &(step, loss) in &m.loss_curve {
            out.push(MetricRecord {
                run_id: run_id.to_string(),
                condition: cond.to_string(),
                seed: run.seed,
                step,
                task: "train".to_string(),
                metric: "loss".to_string(),
                value: loss,
            });
        }
    }
    out
}

/// Aggregated multi-seed deltas mirroring the Δ(D−A) / Δ(D−B) rows.
#[derive(Debug, Clone)]
pub struct TaxSummary {
    pub seeds: Vec<u64>,
    /// (seed, B−A composition): the tax itself.
    pub tax_b_minus_a: Vec<f64>,
    /// (seed, D−B composition): the recovery.
    pub recovery_d_minus_b: Vec<f64>,
    /// (seed, D−B surface): the perception cost of the recovery.
    pub surface_d_minus_b: Vec<f64>,
    pub mean_d_minus_a_comp: f64,
    pub mean_d_minus_b_comp: f64,
}

pub fn summarize(runs: &[TaxRun]) -> TaxSummary {
    let comp = |r: &TaxRun, c| r.metrics_for(c).composition_acc;
    let surf = |r: &TaxRun, c| r.metrics_for(c).surface_acc;
    let n = runs.len().max(1) as f64;
    TaxSummary {
        seeds: runs.iter().map(|r| r.seed).collect(),
        tax_b_minus_a: runs
            .iter()
            .map(|r| comp(r, Condition::B) - comp(r, Condition::A))
            .collect(),
        recovery_d_minus_b: runs
            .iter()
            .map(|r| comp(r, Condition::D) - comp(r, Condition::B))
            .collect(),
        surface_d_minus_b: runs
            .iter()
            .map(|r| surf(r, Condition::D) - surf(r, Condition::B))
            .collect(),
        mean_d_minus_a_comp: runs
            .iter()
            .map(|r| comp(r, Condition::D) - comp(r, Condition::A))
            .sum::<f64>()
            / n,
        mean_d_minus_b_comp: runs
            .iter()
            .map(|r| comp(r, Condition::D) - comp(r, Condition::B))
            .sum::<f64>()
            / n,
    }
}

impl TaxSummary {
    fn at_least_two_thirds(values: &[f64], pred: impl Fn(f64) -> bool) -> bool {
        let hits = values.iter().filter(|v| pred(**v)).count();
        3 * hits >= 2 * values.len()
    }

    /// (a) composition drops by >= 5 points under B on at least 2/3 seeds.
    pub fn tax_exists(&self) -> bool {
        Self::at_least_two_thirds(&self.tax_b_minus_a, |v| v <= -0.05)
    }

    /// (b) D recovers composition over B on at least 2/3 seeds while keeping
    /// surface within 3 points of B.
    pub fn recovery_holds(&self) -> bool {
        let comp_ok = Self::at_least_two_thirds(&self.recovery_d_minus_b, |v| v > 0.0);
        let surf_ok = Self::at_least_two_thirds(&self.surface_d_minus_b, |v| v >= -0.03);
        comp_ok && surf_ok
    }
}

/// Per-seed accuracy tables with delta rows, plus a cross-seed summary.
pub fn tax_table(runs: &[TaxRun]) -> String {
    let mut out = String::new();
    for run in runs {
        let mut t = crate::report::Table::new(
            format!("seed {}", run.seed),
            &["surface", "composition", "overall"],
        );
        for (cond, m) in &run.metrics {
            t.row(
                cond.to_string(),
                vec![m.surface_acc, m.composition_acc, m.overall],
            );
        }
        t.delta_row("D", "A");
        t.delta_row("D", "B");
        out.push_str(&t.render());
        out.push('\n');
    }
    if runs.len() > 1 {
        let s = summarize(runs);
        let mut t =
            crate::report::Table::new(format!("mean over {} seeds", runs.len()), &["composition"]);
        t.row("D-A", vec![s.mean_d_minus_a_comp]);
        t.row("D-B", vec![s.mean_d_minus_b_comp]);
        out.push_str(&t.render());
        let signs: Vec<String> = s
            .recovery_d_minus_b
            .iter()
            .map(|v| {
                if *v > 0.0 {
                    "+".into()
                } else {
                    "-".to_string()
                }
            })
            .collect();
        out.push_str(&format!(
            "per-seed sign of D-B composition: {}\n",
            signs.join(" ")
        ));
    }
    out
}

// ── sweeps ───────────────────────────────────────────────────────────

/// Run (or count) one configuration per axis value. In count-only mode no
/// model is built; aggregator and adapter parameter counts are reported at
/// width `d`, which lets full-scale accounting run instantly.
pub fn sweep(
    base: &ExperimentConfig,
    axis: &str,
    values: &[String],
    seed: u64,
    count_only: bool,
    d_override: Option<usize>,
) -> Result<String> {
    let mut table = if count_only {
        crate::report::Table::new(
            format!("{axis} (counts)"),
            &["agg params", "adapter params"],
        )
    } else {
        crate::report::Table::new(axis.to_string(), &["surface", "composition", "overall"])
    };
    for value in values {
        let mut cfg = base.clone();
        cfg.set_key(axis, value)
            .and_then(|()| cfg.validate())
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
        if count_only {
            let d = d_override.unwrap_or(cfg.backbone.hidden);
            let k = cfg.backbone.blocks;
            let agg = crate::agg::param_count(&cfg.aggregator, d, k);
            let mut b = cfg.backbone.clone();
            b.hidden = d;
            let adapters = b.adapter_param_count(cfg.adapter.rank);
            table.row(value.clone(), vec![agg.excl_gates as f64, adapters as f64]);
        } else {
            let (pre, _) = pretrain(&cfg, seed)?;
            let (m, _) = finetune(&pre, Condition::D, &cfg, seed)?;
            let e = evaluate(&m, &cfg)?;
            table.row(
                value.clone(),
                vec![e.surface_acc, e.composition_acc, e.overall],
            );
        }
    }
    Ok(table.render())
}
