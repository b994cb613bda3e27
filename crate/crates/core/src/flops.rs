//! Analytic FLOP accounting.
//!
//! Convention: one FLOP per multiply-accumulate plus one per bias add, for
//! convolutions and dense layers. Activations, pooling, concatenation and
//! softmax count zero. Everything here is a pure function of the specs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CompositeSpec, LayerDesc, ModelSpec};

pub const CONVENTION: &str = "1 FLOP per MAC + bias adds; relu/pool/concat/softmax = 0";

pub fn layer_flops(layer: &LayerDesc) -> u64 {
    match *layer {
        LayerDesc::Conv1d { len, c_in, c_out, kernel } => (kernel * c_in * c_out * len + c_out * len) as u64,
        LayerDesc::Dense { d_in, d_out } => (d_in * d_out + d_out) as u64,
        LayerDesc::MaxPool { .. }
        | LayerDesc::Relu { .. }
        | LayerDesc::Add { .. }
        | LayerDesc::Flatten { .. }
        | LayerDesc::Concat { .. }
        | LayerDesc::Softmax { .. } => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub kind: String,
    pub shape: String,
    pub flops: u64,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFlops {
    pub layers: Vec<LayerFlops>,
    pub feature_extraction: u64,
    pub decision: u64,
    pub total: u64,
    pub params: usize,
}

fn describe(layer: &LayerDesc) -> String {
    match *layer {
        LayerDesc::Conv1d { len, c_in, c_out, kernel } => {
            format!("k={kernel} [{len},{c_in}]->[{len},{c_out}]")
        }
        LayerDesc::Dense { d_in, d_out } => format!("{d_in}->{d_out}"),
        LayerDesc::MaxPool { len, channels, window } => format!("[{len},{channels}]/{window}"),
        LayerDesc::Relu { size }
        | LayerDesc::Add { size }
        | LayerDesc::Flatten { size }
        | LayerDesc::Concat { size } => format!("{size}"),
        LayerDesc::Softmax { classes } => format!("{classes}"),
    }
}

pub fn model_flops(spec: &ModelSpec) -> Result<ModelFlops> {
    let fe = spec.feature_layers()?;
    let dec = spec.decision_layers();
    let sum = |ls: &[LayerDesc]| ls.iter().map(layer_flops).sum::<u64>();
    let (feature_extraction, decision) = (sum(&fe), sum(&dec));
    let layers: Vec<LayerFlops> = fe
        .iter()
        .chain(&dec)
        .map(|l| LayerFlops {
            kind: l.kind().to_owned(),
            shape: describe(l),
            flops: layer_flops(l),
            params: l.params(),
        })
        .collect();
    let params = layers.iter().map(|l| l.params).sum();
    Ok(ModelFlops { layers, feature_extraction, decision, total: feature_extraction + decision, params })
}

/// FLOPs spent by a frame that leaves at `exit_index`: every expert up to
/// and including that exit runs its feature extraction and decision layer.
pub fn cumulative_exit_flops(spec: &CompositeSpec, exit_index: usize) -> Result<u64> {
    if exit_index > 2 {
        return Err(Error::InvalidArgument(format!("exit index {exit_index} out of range 0..=2")));
    }
    spec.validate()?;
    (0..=exit_index).map(|e| model_flops(&spec.expert_spec(e)).map(|m| m.total)).sum()
}

/// Expected FLOPs per frame, `sum_i p_i * f_i`.
pub fn average_load(exit_flops: &[f64], exit_fractions: &[f64]) -> Result<f64> {
    if exit_flops.len() != exit_fractions.len() || exit_flops.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} exit costs vs {} fractions",
            exit_flops.len(),
            exit_fractions.len()
        )));
    }
    if exit_fractions.iter().any(|&p| !(p >= 0.0)) {
        return Err(Error::InvalidArgument("negative exit fraction".into()));
    }
    let total: f64 = exit_fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("exit fractions sum to {total}, not 1")));
    }
    Ok(exit_flops.iter().zip(exit_fractions).map(|(f, p)| f * p).sum())
}

/// Relative saving against a fixed-cost model; negative means extra cost.
pub fn reduction(load: f64, baseline: f64) -> f64 {
    1.0 - load / baseline
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub convention: String,
    pub baseline: ModelFlops,
    pub experts: Vec<ModelFlops>,
    pub cumulative_exit: [u64; 3],
    pub cumulative_params: [usize; 3],
}

pub fn flop_report(spec: &CompositeSpec) -> Result<FlopReport> {
    let baseline = model_flops(&spec.baseline_spec())?;
    let experts = (0..3).map(|e| model_flops(&spec.expert_spec(e))).collect::<Result<Vec<_>>>()?;
    let mut cumulative_exit = [0u64; 3];
    let mut cumulative_params = [0usize; 3];
    let (mut f, mut p) = (0, 0);
    for e in 0..3 {
        f += experts[e].total;
        p += experts[e].params;
        cumulative_exit[e] = f;
        cumulative_params[e] = p;
    }
    Ok(FlopReport {
        convention: CONVENTION.to_owned(),
        baseline,
        experts,
        cumulative_exit,
        cumulative_params,
    })
}

impl FlopReport {
    /// Plain-text table with MFLOPs to two decimals.
    pub fn to_table(&self) -> String {
        let mut s = format!("# convention: {}\n", self.convention);
        s.push_str(&format!(
            "{:<10} {:>14} {:>14} {:>12} {:>10}\n",
            "model", "features", "decision", "MFLOPs", "params"
        ));
        let row = |name: &str, m: &ModelFlops| {
            format!(
                "{:<10} {:>14} {:>14} {:>12.2} {:>10}\n",
                name,
                m.feature_extraction,
                m.decision,
                m.total as f64 / 1e6,
                m.params
            )
        };
        s.push_str(&row("baseline", &self.baseline));
        for (e, m) in self.experts.iter().enumerate() {
            s.push_str(&row(&format!("expert{e}"), m));
        }
        s.push_str("\nexit  cumulative_MFLOPs  cumulative_params\n");
        for e in 0..3 {
            s.push_str(&format!(
                "{e:<5} {:>18.2} {:>18}\n",
                self.cumulative_exit[e] as f64 / 1e6,
                self.cumulative_params[e]
            ));
        }
        s
    }
}
