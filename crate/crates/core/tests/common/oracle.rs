// Straightforward f64 re-implementation of the network forward pass, used as
// an independent reference for finite-difference gradients.

use std::collections::BTreeMap;

use amcee::models::{CompositeSpec, ModelSpec};
use amcee::tensor::ParamStore;

pub type Params = BTreeMap<String, Vec<f64>>;

pub fn params_f64(store: &ParamStore) -> Params {
    store
        .ids()
        .map(|id| {
            let v = store.get(id).data().iter().map(|&x| x as f64).collect();
            (store.name(id).to_owned(), v)
        })
        .collect()
}

/// Same-padded conv of `x: [len, c_in]` with `w: [k, c_in, c_out]`.
pub fn conv(x: &[f64], len: usize, c_in: usize, w: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let c_out = b.len();
    let half = (k / 2) as isize;
    let mut out = vec![0.0; len * c_out];
    for l in 0..len {
        for o in 0..c_out {
            let mut acc = b[o];
            for t in 0..k {
                let src = l as isize + t as isize - half;
                if src < 0 || src >= len as isize {
                    continue;
                }
                for c in 0..c_in {
                    acc += x[src as usize * c_in + c] * w[(t * c_in + c) * c_out + o];
                }
            }
            out[l * c_out + o] = acc;
        }
    }
    out
}

pub fn dense(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let d_out = b.len();
    (0..d_out)
        .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * d_out + o]).sum::<f64>())
        .collect()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.max(0.0)).collect()
}

pub fn maxpool(x: &[f64], len: usize, ch: usize, window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(len / window * ch);
    for l in 0..len / window {
        for c in 0..ch {
            let m = (0..window).map(|w| x[(l * window + w) * ch + c]).fold(f64::NEG_INFINITY, f64::max);
            out.push(m);
        }
    }
    out
}

pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn conv_named(p: &Params, name: &str, x: &[f64], len: usize, c_in: usize, k: usize) -> Vec<f64> {
    conv(x, len, c_in, &p[&format!("{name}.w")], &p[&format!("{name}.b")], k)
}

pub fn features(p: &Params, prefix: &str, spec: &ModelSpec, x: &[f64]) -> Vec<f64> {
    let cfg = &spec.stack;
    let (mut h, mut len, mut ch) = (x.to_vec(), spec.input_len, spec.input_channels);
    for s in 0..spec.num_stacks {
        let name = format!("{prefix}features.stack{s}");
        h = conv_named(p, &format!("{name}.entry"), &h, len, ch, cfg.entry_kernel);
        ch = cfg.filters;
        for u in 0..cfg.units_per_stack {
            let t = relu(&conv_named(p, &format!("{name}.unit{u}.a"), &h, len, ch, cfg.kernel));
            let t = conv_named(p, &format!("{name}.unit{u}.b"), &t, len, ch, cfg.kernel);
            h = relu(&t.iter().zip(&h).map(|(a, b)| a + b).collect::<Vec<_>>());
        }
        h = maxpool(&h, len, ch, cfg.pool);
        len /= cfg.pool;
    }
    h
}

pub fn decide(p: &Params, prefix: &str, spec: &ModelSpec, input: &[f64]) -> Vec<f64> {
    let mut h = input.to_vec();
    for i in 0..spec.decision_widths.len() {
        let name = format!("{prefix}decision.dense{i}");
        h = relu(&dense(&h, &p[&format!("{name}.w")], &p[&format!("{name}.b")]));
    }
    dense(&h, &p[&format!("{prefix}decision.out.w")], &p[&format!("{prefix}decision.out.b")])
}

pub fn baseline_loss(p: &Params, spec: &ModelSpec, x: &[f64], label: usize) -> f64 {
    let f = features(p, "", spec, x);
    cross_entropy(&decide(p, "", spec, &f), label)
}

/// Sum of the three exit cross-entropies, upstream features concatenated
/// ahead of each expert's own.
pub fn joint_loss(p: &Params, spec: &CompositeSpec, window: &[f64], label: usize) -> f64 {
    let ch = spec.input_channels;
    let mut feats: Vec<f64> = Vec::new();
    let mut total = 0.0;
    for e in 0..3 {
        let seg = spec.segment(e);
        let es = spec.expert_spec(e);
        let prefix = format!("expert{e}.");
        let own = features(p, &prefix, &es, &window[seg.start * ch..seg.end * ch]);
        feats.extend_from_slice(&own);
        total += cross_entropy(&decide(p, &prefix, &es, &feats), label);
    }
    total
}

/// Central difference of `f` with respect to `p[name][idx]`.
pub fn numeric_grad(p: &Params, name: &str, idx: usize, step: f64, f: impl Fn(&Params) -> f64) -> f64 {
    let mut q = p.clone();
    let orig = q[name][idx];
    q.get_mut(name).unwrap()[idx] = orig + step;
    let up = f(&q);
    q.get_mut(name).unwrap()[idx] = orig - step;
    let down = f(&q);
    (up - down) / (2.0 * step)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
