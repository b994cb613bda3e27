use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualStackConfig {
    pub filters: usize,
    pub kernel: usize,
    /// Kernel of the linear entry convolution (3 or 1).
    #[serde(default = "default_kernel")]
    pub entry_kernel: usize,
    pub units_per_stack: usize,
    pub pool: usize,
}

fn default_kernel() -> usize {
    3
}

impl Default for ResidualStackConfig {
    fn default() -> Self {
        Self { filters: 32, kernel: 3, entry_kernel: 3, units_per_stack: 2, pool: 2 }
    }
}

impl ResidualStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) || self.entry_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernels must be odd, got {} / {}",
                self.kernel, self.entry_kernel
            )));
        }
        if self.filters == 0 || self.pool == 0 {
            return Err(Error::Config("filters and pool must be positive".into()));
        }
        Ok(())
    }
}

/// Static description of one layer together with the shapes it sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerDesc {
    Conv1d { len: usize, c_in: usize, c_out: usize, kernel: usize },
    Dense { d_in: usize, d_out: usize },
    MaxPool { len: usize, channels: usize, window: usize },
    Relu { size: usize },
    Add { size: usize },
    Flatten { size: usize },
    Concat { size: usize },
    Softmax { classes: usize },
}

impl LayerDesc {
    pub fn params(&self) -> usize {
        match *self {
            LayerDesc::Conv1d { c_in, c_out, kernel, .. } => kernel * c_in * c_out + c_out,
            LayerDesc::Dense { d_in, d_out } => d_in * d_out + d_out,
            _ => 0,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerDesc::Conv1d { .. } => "conv1d",
            LayerDesc::Dense { .. } => "dense",
            LayerDesc::MaxPool { .. } => "maxpool1d",
            LayerDesc::Relu { .. } => "relu",
            LayerDesc::Add { .. } => "add",
            LayerDesc::Flatten { .. } => "flatten",
            LayerDesc::Concat { .. } => "concat",
            LayerDesc::Softmax { .. } => "softmax",
        }
    }
}

/// Layer plan of a single residual stack fed `len` samples of `c_in` channels.
pub fn residual_stack_layers(cfg: &ResidualStackConfig, len: usize, c_in: usize) -> Result<Vec<LayerDesc>> {
    cfg.validate()?;
    if !len.is_multiple_of(cfg.pool) {
        return Err(Error::Config(format!("stack input length {len} not divisible by pool {}", cfg.pool)));
    }
    let f = cfg.filters;
    let mut layers = vec![LayerDesc::Conv1d { len, c_in, c_out: f, kernel: cfg.entry_kernel }];
    for _ in 0..cfg.units_per_stack {
        let conv = LayerDesc::Conv1d { len, c_in: f, c_out: f, kernel: cfg.kernel };
        layers.extend([
            conv,
            LayerDesc::Relu { size: len * f },
            conv,
            LayerDesc::Add { size: len * f },
            LayerDesc::Relu { size: len * f },
        ]);
    }
    layers.push(LayerDesc::MaxPool { len, channels: f, window: cfg.pool });
    Ok(layers)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_len: usize,
    pub input_channels: usize,
    pub num_stacks: usize,
    pub stack: ResidualStackConfig,
    pub decision_widths: Vec<usize>,
    pub num_classes: usize,
    /// Width of upstream features concatenated before the decision layer.
    pub extra_feature_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            input_len: 512,
            input_channels: 2,
            num_stacks: 4,
            stack: ResidualStackConfig::default(),
            decision_widths: vec![128, 128],
            num_classes: 6,
            extra_feature_dim: 0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.stack.validate()?;
        let divisor = self.stack.pool.pow(self.num_stacks as u32);
        if self.input_len == 0 || !self.input_len.is_multiple_of(divisor) {
            return Err(Error::Config(format!(
                "input length {} not divisible by pool^stacks = {divisor}",
                self.input_len
            )));
        }
        if self.num_classes < 2 || self.input_channels == 0 {
            return Err(Error::Config("need at least two classes and one input channel".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.input_len / self.stack.pool.pow(self.num_stacks as u32) * self.stack.filters
    }

    pub fn decision_input_dim(&self) -> usize {
        self.feature_dim() + self.extra_feature_dim
    }

    pub fn feature_layers(&self) -> Result<Vec<LayerDesc>> {
        self.validate()?;
        let mut layers = Vec::new();
        let (mut len, mut ch) = (self.input_len, self.input_channels);
        for _ in 0..self.num_stacks {
            layers.extend(residual_stack_layers(&self.stack, len, ch)?);
            len /= self.stack.pool;
            ch = self.stack.filters;
        }
        layers.push(LayerDesc::Flatten { size: len * ch });
        Ok(layers)
    }

    pub fn decision_layers(&self) -> Vec<LayerDesc> {
        let mut layers = Vec::new();
        if self.extra_feature_dim > 0 {
            layers.push(LayerDesc::Concat { size: self.decision_input_dim() });
        }
        let mut d_in = self.decision_input_dim();
        for &w in &self.decision_widths {
            layers.push(LayerDesc::Dense { d_in, d_out: w });
            layers.push(LayerDesc::Relu { size: w });
            d_in = w;
        }
        layers.push(LayerDesc::Dense { d_in, d_out: self.num_classes });
        layers.push(LayerDesc::Softmax { classes: self.num_classes });
        layers
    }

    pub fn layers(&self) -> Result<Vec<LayerDesc>> {
        let mut l = self.feature_layers()?;
        l.extend(self.decision_layers());
        Ok(l)
    }

    /// Closed-form parameter count from the layer plan.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self.layers()?.iter().map(LayerDesc::params).sum())
    }
}

/// Three experts over contiguous segments of one input window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompositeSpec {
    pub model_input_len: usize,
    pub segment_lens: [usize; 3],
    pub input_channels: usize,
    pub num_stacks: usize,
    pub stack: ResidualStackConfig,
    pub decision_widths: Vec<usize>,
    pub num_classes: usize,
}

impl Default for CompositeSpec {
    fn default() -> Self {
        let base = ModelSpec::default();
        Self {
            model_input_len: 512,
            segment_lens: [32, 160, 320],
            input_channels: base.input_channels,
            num_stacks: base.num_stacks,
            stack: base.stack,
            decision_widths: base.decision_widths,
            num_classes: base.num_classes,
        }
    }
}

impl CompositeSpec {
    /// Composite whose experts mirror `base` and split its input window.
    pub fn from_baseline(base: &ModelSpec, segment_lens: [usize; 3]) -> Self {
        Self {
            model_input_len: base.input_len,
            segment_lens,
            input_channels: base.input_channels,
            num_stacks: base.num_stacks,
            stack: base.stack.clone(),
            decision_widths: base.decision_widths.clone(),
            num_classes: base.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: usize = self.segment_lens.iter().sum();
        if total != self.model_input_len {
            return Err(Error::Config(format!(
                "segments {:?} sum to {total}, model input is {}",
                self.segment_lens, self.model_input_len
            )));
        }
        for i in 0..3 {
            self.expert_spec(i).validate()?;
        }
        Ok(())
    }

    /// Sample range `[start, end)` of segment `i` within the model window.
    pub fn segment(&self, i: usize) -> std::ops::Range<usize> {
        let start: usize = self.segment_lens[..i].iter().sum();
        start..start + self.segment_lens[i]
    }

    fn expert_feature_dim(&self, i: usize) -> usize {
        self.segment_lens[i] / self.stack.pool.pow(self.num_stacks as u32) * self.stack.filters
    }

    pub fn expert_spec(&self, i: usize) -> ModelSpec {
        ModelSpec {
            input_len: self.segment_lens[i],
            input_channels: self.input_channels,
            num_stacks: self.num_stacks,
            stack: self.stack.clone(),
            decision_widths: self.decision_widths.clone(),
            num_classes: self.num_classes,
            extra_feature_dim: (0..i).map(|j| self.expert_feature_dim(j)).sum(),
        }
    }

    /// The single-path model with the same total window.
    pub fn baseline_spec(&self) -> ModelSpec {
        ModelSpec {
            input_len: self.model_input_len,
            input_channels: self.input_channels,
            num_stacks: self.num_stacks,
            stack: self.stack.clone(),
            decision_widths: self.decision_widths.clone(),
            num_classes: self.num_classes,
            extra_feature_dim: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stack_param_count_by_hand() {
        let layers = residual_stack_layers(&ResidualStackConfig::default(), 64, 32).unwrap();
        let p: usize = layers.iter().map(LayerDesc::params).sum();
        assert_eq!(p, 5 * (3 * 32 * 32 + 32));
        assert_eq!(p, 15_520);
    }

    #[test]
    fn baseline_closed_form() {
        // 12,640 + 3 * 15,520 conv + 131,200 + 16,512 + 774 dense
        assert_eq!(ModelSpec::default().param_count().unwrap(), 207_686);
        assert_eq!(ModelSpec::default().feature_dim(), 1024);
    }

    #[test]
    fn expert_decision_dims() {
        let c = CompositeSpec::default();
        let dims: Vec<(usize, usize)> = (0..3)
            .map(|i| {
                let s = c.expert_spec(i);
                (s.feature_dim(), s.decision_input_dim())
            })
            .collect();
        assert_eq!(dims, vec![(64, 64), (320, 384), (640, 1024)]);
    }

    #[test]
    fn segments_are_contiguous() {
        let c = CompositeSpec::default();
        assert_eq!(c.segment(0), 0..32);
        assert_eq!(c.segment(1), 32..192);
        assert_eq!(c.segment(2), 192..512);
    }

    #[test]
    fn invalid_specs() {
        let mut c = CompositeSpec::default();
        c.segment_lens = [32, 160, 300];
        assert!(c.validate().is_err());
        c.segment_lens = [24, 168, 320];
        assert!(c.validate().is_err());
        let small =
            CompositeSpec { model_input_len: 64, segment_lens: [16, 16, 32], ..CompositeSpec::default() };
        assert!(small.validate().is_ok());
        let mut s = ModelSpec::default();
        s.stack.kernel = 4;
        assert!(s.validate().is_err());
        assert!(residual_stack_layers(&ResidualStackConfig::default(), 33, 2).is_err());
    }
}
