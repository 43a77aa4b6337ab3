use iada::agg::AggregatorConfig;
use iada::backbone::{AdapterConfig, BackboneConfig, Model};
use iada::tasks::{generate, TaskKind, TaskSpec};
use iada::tensor::Precision;
use std::time::Instant;

fn main() {
    let cfg = BackboneConfig::default(); // d=64 L=8
    let mut m = Model::new(
        cfg,
        AdapterConfig::default(),
        Some(AggregatorConfig::default()),
        1,
    );
    let spec = TaskSpec {
        kind: TaskKind::Composition,
        visual_vocab: 16,
        text_vocab: 48,
        seq_len: 24,
        fact_pairs: 4,
        distractors: 4,
    };
    let seq = generate(&spec, 0).unwrap().seq;
    // warm
    for _ in 0..3 {
        m.loss_and_grad(&seq, Precision::F32, true).unwrap();
    }
    let t = Instant::now();
    let n = 50;
    for _ in 0..n {
        m.loss_and_grad(&seq, Precision::F32, true).unwrap();
    }
    println!(
        "loss_and_grad (agg on): {:.3} ms",
        t.elapsed().as_secs_f64() * 1000.0 / n as f64
    );
    let t = Instant::now();
    for _ in 0..n {
        m.loss_and_grad(&seq, Precision::F32, false).unwrap();
    }
    println!(
        "loss_and_grad (agg off): {:.3} ms",
        t.elapsed().as_secs_f64() * 1000.0 / n as f64
    );
    let t = Instant::now();
    for _ in 0..n {
        m.predict(&seq, Precision::F32, true).unwrap();
    }
    println!(
        "predict: {:.3} ms",
        t.elapsed().as_secs_f64() * 1000.0 / n as f64
    );
}
