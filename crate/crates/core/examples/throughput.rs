//! Measures forward/backward throughput of the baseline model.

use std::time::Instant;

use amcee::models::{build_baseline, ModelSpec};
use amcee::tensor::{Tape, Tensor};

fn main() {
    let spec = ModelSpec::default();
    let model = build_baseline(&spec, 0).unwrap();
    let input: Vec<f32> = (0..1024).map(|i| ((i * 37) % 17) as f32 / 17.0 - 0.5).collect();
    let x = Tensor::new(vec![512, 2], input).unwrap();
    let n = 20;

    let t = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::inference(&model.params);
        let v = tape.input(x.clone());
        model.logits(&mut tape, v).unwrap();
    }
    let fwd = t.elapsed().as_secs_f64() / n as f64;

    let t = Instant::now();
    for _ in 0..n {
        let mut tape = Tape::new(&model.params);
        let v = tape.input(x.clone());
        let z = model.logits(&mut tape, v).unwrap();
        let loss = tape.softmax_cross_entropy(z, 1).unwrap();
        tape.backward(loss).unwrap();
    }
    let train = t.elapsed().as_secs_f64() / n as f64;
    println!(
        "forward {:.2} ms ({:.2} GFLOP/s), forward+backward {:.2} ms",
        fwd * 1e3,
        13.573 / fwd / 1e3,
        train * 1e3
    );
}
