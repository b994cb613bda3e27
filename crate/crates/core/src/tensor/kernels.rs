// Raw slice kernels. Layouts are row-major:
//   conv input [L, C_in], weights [K, C_in, C_out], output [L, C_out]
//   dense input [D_in], weights [D_in, D_out], output [D_out]

#[inline]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// Channel width with register-resident accumulators.
const BLOCK: usize = 32;

fn conv1d_forward_blocked(
    input: &[f32],
    weights: &[f32],
    bias: &[f32],
    len: usize,
    c_in: usize,
    kernel: usize,
    out: &mut [f32],
) {
    let half = kernel / 2;
    for l in 0..len {
        let mut acc = [0.0f32; BLOCK];
        acc.copy_from_slice(bias);
        for k in 0..kernel {
            let src = l + k;
            if src < half || src - half >= len {
                continue;
            }
            let src = src - half;
            let irow = &input[src * c_in..(src + 1) * c_in];
            let wk = &weights[k * c_in * BLOCK..(k + 1) * c_in * BLOCK];
            for (&x, w) in irow.iter().zip(wk.chunks_exact(BLOCK)) {
                for o in 0..BLOCK {
                    acc[o] += x * w[o];
                }
            }
        }
        out[l * BLOCK..(l + 1) * BLOCK].copy_from_slice(&acc);
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_forward(
    input: &[f32],
    weights: &[f32],
    bias: &[f32],
    len: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    out: &mut [f32],
) {
    if c_out == BLOCK {
        return conv1d_forward_blocked(input, weights, bias, len, c_in, kernel, out);
    }
    let half = kernel / 2;
    for l in 0..len {
        let orow = &mut out[l * c_out..(l + 1) * c_out];
        orow.copy_from_slice(bias);
        for k in 0..kernel {
            let src = l + k;
            if src < half || src - half >= len {
                continue;
            }
            let src = src - half;
            let irow = &input[src * c_in..(src + 1) * c_in];
            let wk = &weights[k * c_in * c_out..(k + 1) * c_in * c_out];
            for (c, &x) in irow.iter().enumerate() {
                axpy(orow, x, &wk[c * c_out..(c + 1) * c_out]);
            }
        }
    }
}

/// Accumulates into `grad_w`, `grad_b` and, when given, `grad_in`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    input: &[f32],
    weights: &[f32],
    grad_out: &[f32],
    len: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    grad_in: Option<&mut [f32]>,
    grad_w: Option<&mut [f32]>,
    grad_b: Option<&mut [f32]>,
) {
    let half = kernel / 2;
    if let Some(gb) = grad_b {
        for l in 0..len {
            for (b, g) in gb.iter_mut().zip(&grad_out[l * c_out..(l + 1) * c_out]) {
                *b += g;
            }
        }
    }
    if let Some(gw) = grad_w {
        if c_out == BLOCK {
            for k in 0..kernel {
                // output rows whose tap k lands inside the input
                let l_lo = half.saturating_sub(k);
                let l_hi = (len + half).saturating_sub(k).min(len);
                for c in 0..c_in {
                    let mut acc = [0.0f32; BLOCK];
                    for l in l_lo..l_hi {
                        let x = input[(l + k - half) * c_in + c];
                        let grow = &grad_out[l * BLOCK..(l + 1) * BLOCK];
                        for o in 0..BLOCK {
                            acc[o] += x * grow[o];
                        }
                    }
                    let dst = &mut gw[(k * c_in + c) * BLOCK..(k * c_in + c + 1) * BLOCK];
                    for o in 0..BLOCK {
                        dst[o] += acc[o];
                    }
                }
            }
        } else {
            for l in 0..len {
                let grow = &grad_out[l * c_out..(l + 1) * c_out];
                for k in 0..kernel {
                    let src = l + k;
                    if src < half || src - half >= len {
                        continue;
                    }
                    let src = src - half;
                    let irow = &input[src * c_in..(src + 1) * c_in];
                    let gwk = &mut gw[k * c_in * c_out..(k + 1) * c_in * c_out];
                    for (c, &x) in irow.iter().enumerate() {
                        axpy(&mut gwk[c * c_out..(c + 1) * c_out], x, grow);
                    }
                }
            }
        }
    }
    if let Some(gi) = grad_in {
        // transposed weights [K, C_out, C_in] turn the input gradient into axpys
        let mut wt = vec![0.0f32; kernel * c_in * c_out];
        for k in 0..kernel {
            for c in 0..c_in {
                for o in 0..c_out {
                    wt[(k * c_out + o) * c_in + c] = weights[(k * c_in + c) * c_out + o];
                }
            }
        }
        if c_in == BLOCK {
            for src in 0..len {
                let mut acc = [0.0f32; BLOCK];
                acc.copy_from_slice(&gi[src * BLOCK..(src + 1) * BLOCK]);
                for k in 0..kernel {
                    // output row l reads input row src through tap k
                    let l = src + half;
                    if l < k || l - k >= len {
                        continue;
                    }
                    let l = l - k;
                    let grow = &grad_out[l * c_out..(l + 1) * c_out];
                    let wtk = &wt[k * c_out * BLOCK..(k + 1) * c_out * BLOCK];
                    for (&g, w) in grow.iter().zip(wtk.chunks_exact(BLOCK)) {
                        for c in 0..BLOCK {
                            acc[c] += g * w[c];
                        }
                    }
                }
                gi[src * BLOCK..(src + 1) * BLOCK].copy_from_slice(&acc);
            }
            return;
        }
        for l in 0..len {
            let grow = &grad_out[l * c_out..(l + 1) * c_out];
            for k in 0..kernel {
                let src = l + k;
                if src < half || src - half >= len {
                    continue;
                }
                let src = src - half;
                let girow = &mut gi[src * c_in..(src + 1) * c_in];
                let wtk = &wt[k * c_out * c_in..(k + 1) * c_out * c_in];
                for (o, &g) in grow.iter().enumerate() {
                    axpy(girow, g, &wtk[o * c_in..(o + 1) * c_in]);
                }
            }
        }
    }
}

pub(crate) fn dense_forward(input: &[f32], weights: &[f32], bias: &[f32], out: &mut [f32]) {
    let d_out = bias.len();
    out.copy_from_slice(bias);
    for (i, &x) in input.iter().enumerate() {
        axpy(out, x, &weights[i * d_out..(i + 1) * d_out]);
    }
}

pub(crate) fn dense_backward(
    input: &[f32],
    weights: &[f32],
    grad_out: &[f32],
    grad_in: Option<&mut [f32]>,
    grad_w: Option<&mut [f32]>,
    grad_b: Option<&mut [f32]>,
) {
    let d_out = grad_out.len();
    if let Some(gb) = grad_b {
        axpy(gb, 1.0, grad_out);
    }
    if let Some(gw) = grad_w {
        for (i, &x) in input.iter().enumerate() {
            axpy(&mut gw[i * d_out..(i + 1) * d_out], x, grad_out);
        }
    }
    if let Some(gi) = grad_in {
        for (i, g) in gi.iter_mut().enumerate() {
            *g += dot(&weights[i * d_out..(i + 1) * d_out], grad_out);
        }
    }
}

/// Non-overlapping max pooling along the length axis. Returns the flat
/// source index of each output element; ties keep the first element.
pub(crate) fn maxpool_forward(
    input: &[f32],
    len: usize,
    channels: usize,
    window: usize,
    out: &mut [f32],
) -> Vec<u32> {
    let out_len = len / window;
    let mut argmax = vec![0u32; out_len * channels];
    for l in 0..out_len {
        for c in 0..channels {
            let mut best = (l * window) * channels + c;
            for w in 1..window {
                let idx = (l * window + w) * channels + c;
                if input[idx] > input[best] {
                    best = idx;
                }
            }
            out[l * channels + c] = input[best];
            argmax[l * channels + c] = best as u32;
        }
    }
    argmax
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
