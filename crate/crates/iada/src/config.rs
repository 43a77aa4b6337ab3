//! Experiment configuration: a plain-text sectioned key=value format.
//!
//! Five sections — [backbone], [aggregator], [adapter], [train], [tasks] —
//! each a flat list of `key = value` lines. Unknown sections or keys are
//! errors with line numbers; missing keys take the documented defaults. The
//! fully resolved config serializes back out for provenance, and parsing the
//! serialized form reproduces it exactly.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::agg::AggregatorConfig;
use crate::backbone::{AdapterConfig, BackboneConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSettings {
    pub seq_len: usize,
    pub fact_pairs: usize,
    pub distractors: usize,
}

impl Default for TaskSettings {
    fn default() -> Self {
        TaskSettings {
            seq_len: 24,
            fact_pairs: 4,
            distractors: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub batch: usize,
    pub backbone_lr: f64,
    pub adapter_lr: f64,
    pub aggregator_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    /// Size of the finite fine-tuning dataset (epoch-shuffled).
    pub train_examples: usize,
    pub eval_examples: usize,
    pub seed: u64,
    /// 32 or 64.
    pub precision: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pretrain_steps: 6000,
            finetune_steps: 2000,
            batch: 32,
            backbone_lr: 3e-3,
            adapter_lr: 1e-3,
            // the aggregator trains 50x faster than the adapters
            aggregator_lr: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup: 100,
            train_examples: 256,
            eval_examples: 200,
            seed: 1,
            precision: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub backbone: BackboneConfig,
    pub aggregator: AggregatorConfig,
    pub adapter: AdapterConfig,
    pub train: TrainConfig,
    pub tasks: TaskSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            backbone: BackboneConfig::default(),
            aggregator: AggregatorConfig::default(),
            adapter: AdapterConfig::default(),
            train: TrainConfig::default(),
            tasks: TaskSettings::default(),
        }
    }
}

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Parse { line: usize, message: String },
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(m) => write!(f, "config i/o error: {m}"),
            ConfigError::Parse { line, message } => write!(f, "config line {line}: {message}"),
            ConfigError::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn set<T: FromStr>(target: &mut T, value: &str, line: usize) -> Result<(), ConfigError>
where
    T::Err: fmt::Display,
{
    *target = value.parse().map_err(|e| ConfigError::Parse {
        line,
        message: format!("bad value '{value}': {e}"),
    })?;
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or(ConfigError::Parse {
                    line: line_no,
                    message: "unterminated section header".into(),
                })?;
                match name {
                    "backbone" | "aggregator" | "adapter" | "train" | "tasks" => {
                        section = Some(name.to_string());
                    }
                    other => {
                        return Err(ConfigError::Parse {
                            line: line_no,
                            message: format!("unknown section [{other}]"),
                        })
                    }
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("expected `key = value`, got '{line}'"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let Some(sec) = &section else {
                return Err(ConfigError::Parse {
                    line: line_no,
                    message: format!("key '{key}' appears before any section header"),
                });
            };
            cfg.apply(sec, key, value, line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, sec: &str, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let unknown = || ConfigError::Parse {
            line,
            message: format!("unknown key '{key}' in section [{sec}]"),
        };
        match sec {
            "backbone" => match key {
                "layers" => set(&mut self.backbone.layers, value, line),
                "blocks" => set(&mut self.backbone.blocks, value, line),
                "hidden" => set(&mut self.backbone.hidden, value, line),
                "heads" => set(&mut self.backbone.heads, value, line),
                "text_vocab" => set(&mut self.backbone.text_vocab, value, line),
                "visual_vocab" => set(&mut self.backbone.visual_vocab, value, line),
                "max_seq" => set(&mut self.backbone.max_seq, value, line),
                "ff_mult" => set(&mut self.backbone.ff_mult, value, line),
                _ => Err(unknown()),
            },
            "aggregator" => match key {
                "query_mode" => set(&mut self.aggregator.query_mode, value, line),
                "conditioning" => set(&mut self.aggregator.conditioning, value, line),
                "projection_sharing" => set(&mut self.aggregator.projection_sharing, value, line),
                "bottleneck" => set(&mut self.aggregator.bottleneck, value, line),
                "bottleneck_nonlinearity" => {
                    set(&mut self.aggregator.bottleneck_nonlinearity, value, line)
                }
                "pooling" => set(&mut self.aggregator.pooling, value, line),
                "granularity" => set(&mut self.aggregator.granularity, value, line),
                "gate_mode" => set(&mut self.aggregator.gate_mode, value, line),
                "gate_init" => set(&mut self.aggregator.gate_init, value, line),
                "attention_parameterization" => {
                    set(&mut self.aggregator.attention_parameterization, value, line)
                }
                "per_boundary_params" => set(&mut self.aggregator.per_boundary_params, value, line),
                "context_norm" => set(&mut self.aggregator.context_norm, value, line),
                _ => Err(unknown()),
            },
            "adapter" => match key {
                "rank" => set(&mut self.adapter.rank, value, line),
                "alpha" => set(&mut self.adapter.alpha, value, line),
                _ => Err(unknown()),
            },
            "train" => match key {
                "pretrain_steps" => set(&mut self.train.pretrain_steps, value, line),
                "finetune_steps" => set(&mut self.train.finetune_steps, value, line),
                "batch" => set(&mut self.train.batch, value, line),
                "backbone_lr" => set(&mut self.train.backbone_lr, value, line),
                "adapter_lr" => set(&mut self.train.adapter_lr, value, line),
                "aggregator_lr" => set(&mut self.train.aggregator_lr, value, line),
                "beta1" => set(&mut self.train.beta1, value, line),
                "beta2" => set(&mut self.train.beta2, value, line),
                "eps" => set(&mut self.train.eps, value, line),
                "weight_decay" => set(&mut self.train.weight_decay, value, line),
                "warmup" => set(&mut self.train.warmup, value, line),
                "train_examples" => set(&mut self.train.train_examples, value, line),
                "eval_examples" => set(&mut self.train.eval_examples, value, line),
                "seed" => set(&mut self.train.seed, value, line),
                "precision" => set(&mut self.train.precision, value, line),
                _ => Err(unknown()),
            },
            "tasks" => match key {
                "seq_len" => set(&mut self.tasks.seq_len, value, line),
                "fact_pairs" => set(&mut self.tasks.fact_pairs, value, line),
                "distractors" => set(&mut self.tasks.distractors, value, line),
                _ => Err(unknown()),
            },
            _ => unreachable!("section names are validated at the header"),
        }
    }

    /// Set one field by `section.key` path, e.g. `aggregator.bottleneck`.
    pub fn set_key(&mut self, path: &str, value: &str) -> Result<(), ConfigError> {
        let (sec, key) = path
            .split_once('.')
            .ok_or_else(|| ConfigError::Invalid(format!("expected section.key, got '{path}'")))?;
        match sec {
            "backbone" | "aggregator" | "adapter" | "train" | "tasks" => {
                self.apply(sec, key, value, 0)
            }
            other => Err(ConfigError::Invalid(format!("unknown section '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.backbone.validate().map_err(ConfigError::Invalid)?;
        self.aggregator.validate().map_err(ConfigError::Invalid)?;
        if self.train.precision != 32 && self.train.precision != 64 {
            return Err(ConfigError::Invalid(format!(
                "precision must be 32 or 64, got {}",
                self.train.precision
            )));
        }
        if self.tasks.seq_len > self.backbone.max_seq {
            return Err(ConfigError::Invalid(format!(
                "task seq_len {} exceeds backbone max_seq {}",
                self.tasks.seq_len, self.backbone.max_seq
            )));
        }
        Ok(())
    }

    /// Serialize the fully resolved config; `parse` of the output reproduces it.
    pub fn serialize(&self) -> String {
        let b = &self.backbone;
        let a = &self.aggregator;
        let t = &self.train;
        let k = &self.tasks;
        format!(
            "[backbone]\n\
             layers = {}\nblocks = {}\nhidden = {}\nheads = {}\n\
             text_vocab = {}\nvisual_vocab = {}\nmax_seq = {}\nff_mult = {}\n\
             \n[aggregator]\n\
             query_mode = {}\nconditioning = {}\nprojection_sharing = {}\n\
             bottleneck = {}\nbottleneck_nonlinearity = {}\npooling = {}\n\
             granularity = {}\ngate_mode = {}\ngate_init = {}\n\
             attention_parameterization = {}\nper_boundary_params = {}\ncontext_norm = {}\n\
             \n[adapter]\nrank = {}\nalpha = {}\n\
             \n[train]\n\
             pretrain_steps = {}\nfinetune_steps = {}\nbatch = {}\n\
             backbone_lr = {}\nadapter_lr = {}\naggregator_lr = {}\n\
             beta1 = {}\nbeta2 = {}\neps = {}\nweight_decay = {}\nwarmup = {}\n\
             train_examples = {}\neval_examples = {}\nseed = {}\nprecision = {}\n\
             \n[tasks]\nseq_len = {}\nfact_pairs = {}\ndistractors = {}\n",
            b.layers,
            b.blocks,
            b.hidden,
            b.heads,
            b.text_vocab,
            b.visual_vocab,
            b.max_seq,
            b.ff_mult,
            a.query_mode,
            a.conditioning,
            a.projection_sharing,
            a.bottleneck,
            a.bottleneck_nonlinearity,
            a.pooling,
            a.granularity,
            a.gate_mode,
            a.gate_init,
            a.attention_parameterization,
            a.per_boundary_params,
            a.context_norm,
            self.adapter.rank,
            self.adapter.alpha,
            t.pretrain_steps,
            t.finetune_steps,
            t.batch,
            t.backbone_lr,
            t.adapter_lr,
            t.aggregator_lr,
            t.beta1,
            t.beta2,
            t.eps,
            t.weight_decay,
            t.warmup,
            t.train_examples,
            t.eval_examples,
            t.seed,
            t.precision,
            k.seq_len,
            k.fact_pairs,
            k.distractors,
        )
    }

    /// A built-in preset by name, if one exists.
    pub fn preset(name: &str) -> Option<Self> {
        let mut cfg = ExperimentConfig::default();
        match name {
            // calibrated so the full A-D protocol shows the tax and fits a
            // desk budget on one core; see README for the measured numbers
            "toy" => {
                cfg.backbone.text_vocab = 32;
                cfg.tasks = TaskSettings {
                    seq_len: 16,
                    fact_pairs: 2,
                    distractors: 2,
                };
                cfg.train.pretrain_steps = 2400;
                cfg.train.finetune_steps = 800;
                cfg.train.batch = 8;
                cfg.train.adapter_lr = 3e-3;
                cfg.train.aggregator_lr = 1.5e-1;
            }
            "iada_r16" => {}
            "iada_r4" => cfg.aggregator.bottleneck = crate::agg::Bottleneck::Rank(4),
            "iada_r8" => cfg.aggregator.bottleneck = crate::agg::Bottleneck::Rank(8),
            "iada_r64" => cfg.aggregator.bottleneck = crate::agg::Bottleneck::Rank(64),
            "iada_r256" => cfg.aggregator.bottleneck = crate::agg::Bottleneck::Rank(256),
            "iada_full" => cfg.aggregator.bottleneck = crate::agg::Bottleneck::FullRank,
            "fixed_baseline" => cfg.aggregator = AggregatorConfig::fixed_baseline(),
            "adaptive_no_split" => {
                cfg.aggregator.conditioning = crate::agg::Conditioning::SharedNoSplit;
            }
            _ => return None,
        }
        Some(cfg)
    }

    /// Load from a preset name or a file path.
    pub fn load(spec: &str) -> Result<Self, ConfigError> {
        if let Some(p) = Self::preset(spec) {
            return Ok(p);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("cannot read '{spec}': {e}")))?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::{Bottleneck, Conditioning, QueryMode};

    #[test]
    fn defaults_round_trip_through_serialization() {
        let cfg = ExperimentConfig::default();
        let text = cfg.serialize();
        let back = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn presets_round_trip_and_differ() {
        for name in [
            "toy",
            "iada_r4",
            "iada_r8",
            "iada_r16",
            "iada_r64",
            "iada_r256",
            "iada_full",
            "fixed_baseline",
            "adaptive_no_split",
        ] {
            let cfg = ExperimentConfig::preset(name).unwrap();
            let back = ExperimentConfig::parse(&cfg.serialize()).unwrap();
            assert_eq!(cfg, back, "{name}");
        }
        assert!(ExperimentConfig::preset("nope").is_none());
        let fixed = ExperimentConfig::preset("fixed_baseline").unwrap();
        assert_eq!(fixed.aggregator.query_mode, QueryMode::Fixed);
        assert_eq!(fixed.aggregator.conditioning, Conditioning::SharedNoSplit);
        let full = ExperimentConfig::preset("iada_full").unwrap();
        assert_eq!(full.aggregator.bottleneck, Bottleneck::FullRank);
    }

    #[test]
    fn partial_files_take_defaults() {
        let cfg = ExperimentConfig::parse(
            "# comment\n[aggregator]\nbottleneck = 64\n\n[train]\nbatch = 8 # inline\n",
        )
        .unwrap();
        assert_eq!(cfg.aggregator.bottleneck, Bottleneck::Rank(64));
        assert_eq!(cfg.train.batch, 8);
        assert_eq!(cfg.backbone, BackboneConfig::default());
        assert_eq!(
            cfg.train.pretrain_steps,
            TrainConfig::default().pretrain_steps
        );
    }

    #[test]
    fn errors_carry_line_numbers() {
        let err = ExperimentConfig::parse("[backbone]\nlayers = 8\nbogus_key = 1\n").unwrap_err();
        match err {
            ConfigError::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus_key"));
            }
            other => panic!("wrong error {other}"),
        }
        let err = ExperimentConfig::parse("[nope]\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
        let err = ExperimentConfig::parse("layers = 8\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 1, .. }));
        let err = ExperimentConfig::parse("[train]\nbatch ten\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }));
        let err = ExperimentConfig::parse("[train]\nbatch = ten\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }));
    }

    #[test]
    fn cross_field_validation() {
        let err = ExperimentConfig::parse("[backbone]\nlayers = 7\nblocks = 4\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        let err = ExperimentConfig::parse("[train]\nprecision = 16\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
        let err = ExperimentConfig::parse("[tasks]\nseq_len = 9999\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid(_)));
    }
}
