use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{CompositeSpec, ModelSpec, ResidualStackConfig};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

impl Conv {
    fn build(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let w = glorot(rng, vec![kernel, c_in, c_out], kernel * c_in, kernel * c_out);
        Self {
            w: store.register(format!("{name}.w"), w),
            b: store.register(format!("{name}.b"), Tensor::zeros(vec![c_out])),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.conv1d(x, w, b)
    }
}

impl Dense {
    fn build(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = glorot(rng, vec![d_in, d_out], d_in, d_out);
        Self {
            w: store.register(format!("{name}.w"), w),
            b: store.register(format!("{name}.b"), Tensor::zeros(vec![d_out])),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.dense(x, w, b)
    }
}

/// Conv(linear) -> [Conv(ReLU) -> Conv(linear) -> +skip -> ReLU] x units -> MaxPool.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStack {
    entry: Conv,
    units: Vec<(Conv, Conv)>,
    pool: usize,
}

impl ResidualStack {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = self.entry.forward(tape, x)?;
        for (a, b) in &self.units {
            let t = a.forward(tape, h)?;
            let t = tape.relu(t);
            let t = b.forward(tape, t)?;
            let t = tape.add(t, h)?;
            h = tape.relu(t);
        }
        tape.maxpool1d(h, self.pool)
    }
}

pub fn build_residual_stack(
    cfg: &ResidualStackConfig,
    in_channels: usize,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
) -> Result<ResidualStack> {
    cfg.validate()?;
    let f = cfg.filters;
    let entry = Conv::build(store, rng, &format!("{name}.entry"), cfg.entry_kernel, in_channels, f);
    let units = (0..cfg.units_per_stack)
        .map(|u| {
            (
                Conv::build(store, rng, &format!("{name}.unit{u}.a"), cfg.kernel, f, f),
                Conv::build(store, rng, &format!("{name}.unit{u}.b"), cfg.kernel, f, f),
            )
        })
        .collect();
    Ok(ResidualStack { entry, units, pool: cfg.pool })
}

/// Feature extraction plus decision layer of one classifier path.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    spec: ModelSpec,
    stacks: Vec<ResidualStack>,
    hidden: Vec<Dense>,
    out: Dense,
}

impl Classifier {
    fn build(spec: &ModelSpec, store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str) -> Result<Self> {
        spec.validate()?;
        let mut stacks = Vec::with_capacity(spec.num_stacks);
        let mut ch = spec.input_channels;
        for s in 0..spec.num_stacks {
            stacks.push(build_residual_stack(
                &spec.stack,
                ch,
                store,
                rng,
                &format!("{prefix}features.stack{s}"),
            )?);
            ch = spec.stack.filters;
        }
        let mut hidden = Vec::new();
        let mut d_in = spec.decision_input_dim();
        for (i, &w) in spec.decision_widths.iter().enumerate() {
            hidden.push(Dense::build(store, rng, &format!("{prefix}decision.dense{i}"), d_in, w));
            d_in = w;
        }
        let out = Dense::build(store, rng, &format!("{prefix}decision.out"), d_in, spec.num_classes);
        Ok(Self { spec: spec.clone(), stacks, hidden, out })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Runs the residual stacks on `[len, channels]` input and flattens.
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape != [self.spec.input_len, self.spec.input_channels] {
            return Err(Error::shape(
                "classifier input",
                format!("expected [{}, {}], got {shape:?}", self.spec.input_len, self.spec.input_channels),
            ));
        }
        let mut h = x;
        for stack in &self.stacks {
            h = stack.forward(tape, h)?;
        }
        let flat = tape.flatten(h);
        debug_assert_eq!(tape.value(flat).len(), self.spec.feature_dim());
        Ok(flat)
    }

    /// Decision layer on `upstream ++ own` features; returns logits.
    pub fn decide(&self, tape: &mut Tape, upstream: &[Var], own: Var) -> Result<Var> {
        let mut h = if upstream.is_empty() {
            own
        } else {
            let mut parts = upstream.to_vec();
            parts.push(own);
            tape.concat(&parts)?
        };
        if tape.value(h).len() != self.spec.decision_input_dim() {
            return Err(Error::shape(
                "decision input",
                format!("expected {}, got {}", self.spec.decision_input_dim(), tape.value(h).len()),
            ));
        }
        for d in &self.hidden {
            h = d.forward(tape, h)?;
            h = tape.relu(h);
        }
        self.out.forward(tape, h)
    }
}

/// Reshapes `count` interleaved IQ pairs into a `[count, 2]` tensor.
pub fn iq_tensor(interleaved: &[f32]) -> Tensor {
    Tensor::new(vec![interleaved.len() / 2, 2], interleaved.to_vec()).expect("even length")
}

/// The single-path ResNet classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ParamStore,
    net: Classifier,
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.net.spec
    }

    /// Logits for one `[input_len, 2]` input.
    pub fn logits(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        let f = self.net.features(tape, input)?;
        self.net.decide(tape, &[], f)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }
}

pub fn build_baseline(spec: &ModelSpec, seed: u64) -> Result<Model> {
    if spec.extra_feature_dim != 0 {
        return Err(Error::Config("baseline cannot take upstream features".into()));
    }
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = Classifier::build(spec, &mut params, &mut rng, "")?;
    Ok(Model { params, net })
}

/// Builds expert `index` into `store`, parameters prefixed `expert{index}.`.
pub fn build_expert(
    spec: &ModelSpec,
    index: usize,
    upstream_feature_dim: usize,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> Result<Classifier> {
    if spec.extra_feature_dim != upstream_feature_dim {
        return Err(Error::Config(format!(
            "expert {index}: spec expects {} upstream features, wiring provides {upstream_feature_dim}",
            spec.extra_feature_dim
        )));
    }
    if index == 0 && upstream_feature_dim != 0 {
        return Err(Error::Config("expert 0 has no upstream features".into()));
    }
    Classifier::build(spec, store, rng, &expert_prefix(index))
}

pub fn expert_prefix(index: usize) -> String {
    format!("expert{index}.")
}

/// Splitting layer plus three chained experts.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeModel {
    pub params: ParamStore,
    spec: CompositeSpec,
    experts: Vec<Classifier>,
}

impl CompositeModel {
    pub fn spec(&self) -> &CompositeSpec {
        &self.spec
    }

    pub fn expert(&self, e: usize) -> &Classifier {
        &self.experts[e]
    }

    /// Flattened features of expert `e` computed from its own segment of
    /// `window`, a `[model_input_len, 2]` input.
    pub fn expert_features(&self, tape: &mut Tape, e: usize, window: &Tensor) -> Result<Var> {
        let ch = self.spec.input_channels;
        if window.shape() != [self.spec.model_input_len, ch] {
            return Err(Error::shape(
                "composite input",
                format!("expected [{}, {ch}], got {:?}", self.spec.model_input_len, window.shape()),
            ));
        }
        let seg = self.spec.segment(e);
        let slice = window.data()[seg.start * ch..seg.end * ch].to_vec();
        let x = tape.input(Tensor::new(vec![seg.len(), ch], slice)?);
        self.experts[e].features(tape, x)
    }

    /// Logits of exit `e` given the features of experts `0..=e`.
    pub fn exit_logits(&self, tape: &mut Tape, e: usize, features: &[Var]) -> Result<Var> {
        if features.len() != e + 1 {
            return Err(Error::InvalidArgument(format!(
                "exit {e} needs {} feature vectors, got {}",
                e + 1,
                features.len()
            )));
        }
        self.experts[e].decide(tape, &features[..e], features[e])
    }

    /// Logits of every exit, no gating.
    pub fn forward_all(&self, tape: &mut Tape, window: &Tensor) -> Result<[Var; 3]> {
        let mut feats = Vec::with_capacity(3);
        let mut logits = Vec::with_capacity(3);
        for e in 0..3 {
            feats.push(self.expert_features(tape, e, window)?);
            logits.push(self.exit_logits(tape, e, &feats)?);
        }
        Ok([logits[0], logits[1], logits[2]])
    }

    pub fn expert_params(&self, e: usize) -> usize {
        self.params.num_scalars_with_prefix(&expert_prefix(e))
    }

    /// Parameters touched by a frame leaving at exit `e`.
    pub fn cumulative_params(&self, e: usize) -> usize {
        (0..=e).map(|i| self.expert_params(i)).sum()
    }

    pub fn freeze_expert(&mut self, e: usize, frozen: bool) {
        self.params.set_frozen_prefix(&expert_prefix(e), frozen);
    }

    /// Makes expert `e` the only trainable group.
    pub fn train_only_expert(&mut self, e: usize) {
        self.params.freeze_all(true);
        self.freeze_expert(e, false);
    }

    /// Re-draws the parameters of expert `e` from a fresh initialisation.
    pub fn reinitialize_expert(&mut self, e: usize, seed: u64) -> Result<()> {
        let fresh = build_composite(&self.spec, seed)?;
        let prefix = expert_prefix(e);
        for id in self.params.ids().collect::<Vec<_>>() {
            if self.params.name(id).starts_with(&prefix) {
                *self.params.get_mut(id) = fresh.params.get(id).clone();
            }
        }
        Ok(())
    }
}

pub fn build_composite(spec: &CompositeSpec, seed: u64) -> Result<CompositeModel> {
    spec.validate()?;
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut experts = Vec::with_capacity(3);
    let mut upstream = 0;
    for e in 0..3 {
        let es = spec.expert_spec(e);
        experts.push(build_expert(&es, e, upstream, &mut params, &mut rng)?);
        upstream += es.feature_dim();
    }
    Ok(CompositeModel { params, spec: spec.clone(), experts })
}

pub fn count_params(store: &ParamStore) -> usize {
    store.num_scalars()
}
