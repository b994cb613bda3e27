use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Root-raised-cosine taps spanning `span` symbols at `sps` samples per
/// symbol (`span * sps + 1` taps), normalised to unit energy.
pub fn rrc_taps(sps: usize, rolloff: f64, span: usize) -> Vec<f64> {
    let n = span * sps;
    let beta = rolloff;
    let mut taps: Vec<f64> = (0..=n)
        .map(|i| {
            let t = (i as f64 - n as f64 / 2.0) / sps as f64;
            rrc_at(t, beta)
        })
        .collect();
    let energy: f64 = taps.iter().map(|h| h * h).sum();
    let norm = energy.sqrt();
    taps.iter_mut().for_each(|h| *h /= norm);
    taps
}

fn rrc_at(t: f64, beta: f64) -> f64 {
    if t.abs() < 1e-12 {
        return 1.0 - beta + 4.0 * beta / PI;
    }
    if beta > 0.0 && ((4.0 * beta * t).abs() - 1.0).abs() < 1e-9 {
        let a = PI / (4.0 * beta);
        return beta / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos());
    }
    let num = (PI * t * (1.0 - beta)).sin() + 4.0 * beta * t * (PI * t * (1.0 + beta)).cos();
    let den = PI * t * (1.0 - (4.0 * beta * t).powi(2));
    num / den
}

/// Upsamples `symbols` by `sps`, filters with an RRC pulse and removes the
/// filter delay, giving exactly `symbols.len() * sps` samples rescaled to
/// unit average power.
pub fn synthesize_baseband(
    symbols: &[Complex64],
    sps: usize,
    rolloff: f64,
    span: usize,
) -> Result<Vec<Complex64>> {
    if sps < 2 {
        return Err(Error::InvalidArgument(format!("sps must be >= 2, got {sps}")));
    }
    if span < 4 {
        return Err(Error::InvalidArgument(format!("span must be >= 4, got {span}")));
    }
    if !(rolloff > 0.0 && rolloff < 1.0) {
        return Err(Error::InvalidArgument(format!("rolloff must lie in (0, 1), got {rolloff}")));
    }
    let taps = rrc_taps(sps, rolloff, span);
    let delay = (taps.len() - 1) / 2;
    let out_len = symbols.len() * sps;
    let mut out = vec![Complex64::new(0.0, 0.0); out_len];
    // out[n] = sum_s sym[s] * taps[n - s*sps + delay]
    for (s, &sym) in symbols.iter().enumerate() {
        let centre = s * sps;
        let lo = centre.saturating_sub(delay);
        let hi = (centre + delay + 1).min(out_len);
        for (n, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
            *o += sym * taps[n + delay - centre];
        }
    }
    normalize_power(&mut out);
    Ok(out)
}

pub(crate) fn normalize_power(samples: &mut [Complex64]) {
    let p = samples.iter().map(|c| c.norm_sqr()).sum::<f64>() / samples.len().max(1) as f64;
    if p > 0.0 {
        let g = 1.0 / p.sqrt();
        samples.iter_mut().for_each(|c| *c *= g);
    }
}
