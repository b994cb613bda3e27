// Randomized gradient trials: small random graphs built on the tape and
// re-evaluated by the f64 oracle with central differences.

use amcee::models::{build_composite, iq_tensor, CompositeSpec, ResidualStackConfig};
use amcee::tensor::{ParamStore, Tape, Tensor};
use amcee::training::joint_loss;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::{self, Params};

pub const STEP: f64 = 1e-6;
pub const FLOOR: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    len: usize,
    c_in: usize,
    filters: usize,
    kernel: usize,
    residual: bool,
    skip_concat: bool,
    pool: usize,
    label: usize,
}

fn oracle_loss(p: &Params, s: Shape) -> f64 {
    let x = &p["x"];
    let mut h = oracle::relu(&oracle::conv(x, s.len, s.c_in, &p["c1.w"], &p["c1.b"], s.kernel));
    if s.residual {
        let t = oracle::conv(&h, s.len, s.filters, &p["c2.w"], &p["c2.b"], s.kernel);
        h = oracle::relu(&t.iter().zip(&h).map(|(a, b)| a + b).collect::<Vec<_>>());
    }
    let mut flat = oracle::maxpool(&h, s.len, s.filters, s.pool);
    if s.skip_concat {
        flat.extend_from_slice(x);
    }
    let z = oracle::dense(&flat, &p["d.w"], &p["d.b"]);
    oracle::cross_entropy(&z, s.label)
}

/// Worst relative error over every parameter and input entry of one random
/// conv/residual/pool/concat/dense/softmax graph.
pub fn random_graph_trial(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = *[1usize, 2, 3].choose(&mut rng).unwrap();
    let s = Shape {
        len: pool * rng.gen_range(2..6),
        c_in: rng.gen_range(1..4),
        filters: rng.gen_range(2..6),
        kernel: *[1usize, 3, 5].choose(&mut rng).unwrap(),
        residual: rng.gen_bool(0.5),
        skip_concat: rng.gen_bool(0.5),
        pool,
        label: rng.gen_range(0..6),
    };
    let mut store = ParamStore::new();
    let t = |shape: Vec<usize>, rng: &mut ChaCha8Rng| {
        let n = shape.iter().product();
        Tensor::new(shape, uniform(rng, n, 0.6)).unwrap()
    };
    let c1w = store.register("c1.w", t(vec![s.kernel, s.c_in, s.filters], &mut rng));
    let c1b = store.register("c1.b", t(vec![s.filters], &mut rng));
    let c2 = s.residual.then(|| {
        (
            store.register("c2.w", t(vec![s.kernel, s.filters, s.filters], &mut rng)),
            store.register("c2.b", t(vec![s.filters], &mut rng)),
        )
    });
    let flat_len = s.len / s.pool * s.filters + if s.skip_concat { s.len * s.c_in } else { 0 };
    let dw = store.register("d.w", t(vec![flat_len, 6], &mut rng));
    let db = store.register("d.b", t(vec![6], &mut rng));
    let x = t(vec![s.len, s.c_in], &mut rng);

    let mut tape = Tape::new(&store);
    let xv = tape.input_with_grad(x.clone());
    let (w, b) = (tape.param(c1w), tape.param(c1b));
    let c = tape.conv1d(xv, w, b).unwrap();
    let mut h = tape.relu(c);
    if let Some((w2, b2)) = c2 {
        let (w, b) = (tape.param(w2), tape.param(b2));
        let t = tape.conv1d(h, w, b).unwrap();
        let sum = tape.add(t, h).unwrap();
        h = tape.relu(sum);
    }
    let pooled = tape.maxpool1d(h, s.pool).unwrap();
    let mut flat = tape.flatten(pooled);
    if s.skip_concat {
        let fx = tape.flatten(xv);
        flat = tape.concat(&[flat, fx]).unwrap();
    }
    let (w, b) = (tape.param(dw), tape.param(db));
    let z = tape.dense(flat, w, b).unwrap();
    let loss = tape.softmax_cross_entropy(z, s.label).unwrap();
    let g = tape.backward(loss).unwrap();

    let mut p = oracle::params_f64(&store);
    p.insert("x".into(), x.data().iter().map(|&v| v as f64).collect());
    let mut worst = 0.0f64;
    let mut check = |name: &str, analytic: &[f32]| {
        for (i, &a) in analytic.iter().enumerate() {
            let n = oracle::numeric_grad(&p, name, i, STEP, |q| oracle_loss(q, s));
            worst = worst.max(oracle::rel_error(a as f64, n, FLOOR));
        }
    };
    for id in store.ids() {
        check(store.name(id), g.param_or_zeros(id, &store).data());
    }
    check("x", g.input(xv).unwrap().data());
    worst
}

/// Worst relative error over `per_param` random entries of every parameter
/// of a small composite under the three-exit joint loss.
pub fn joint_loss_trial(seed: u64, per_param: usize) -> f64 {
    let spec = CompositeSpec {
        model_input_len: 64,
        segment_lens: [16, 16, 32],
        stack: ResidualStackConfig { filters: 4, ..ResidualStackConfig::default() },
        decision_widths: vec![8, 8],
        ..CompositeSpec::default()
    };
    let mut model = build_composite(&spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // zero biases put dead units exactly on the ReLU kink
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if model.params.name(id).ends_with(".b") {
            let n = model.params.get(id).len();
            model.params.get_mut(id).data_mut().copy_from_slice(&uniform(&mut rng, n, 0.1));
        }
    }
    let raw = uniform(&mut rng, 2 * spec.model_input_len, 1.0);
    let label = rng.gen_range(0..6);
    let mut tape = Tape::new(&model.params);
    let (loss, _, _) = joint_loss(&model, &mut tape, &iq_tensor(&raw), label).unwrap();
    let g = tape.backward(loss).unwrap();
    let p = oracle::params_f64(&model.params);
    let x64: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
    let mut worst = 0.0f64;
    for id in model.params.ids() {
        let grad = g.param_or_zeros(id, &model.params);
        let name = model.params.name(id);
        for _ in 0..per_param {
            let i = rng.gen_range(0..grad.len());
            let n = oracle::numeric_grad(&p, name, i, STEP, |q| oracle::joint_loss(q, &spec, &x64, label));
            worst = worst.max(oracle::rel_error(grad.data()[i] as f64, n, FLOOR));
        }
    }
    worst
}
