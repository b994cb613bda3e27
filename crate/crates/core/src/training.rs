//! Mini-batch training with early stopping, the summed-exit joint loss and
//! the sequential retrain / freeze / threshold procedure for the composite.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::exit_policy::{
    entropy, partition_frames, select_exit_threshold, sweep_threshold_curve, ExitCriterion, ThresholdCurve,
    DEFAULT_ACC_TARGET, DEFAULT_EXIT_TARGET,
};
use crate::inference::exit_decisions;
use crate::models::{expert_prefix, CompositeModel, Model};
use crate::tensor::{Gradients, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// Continue from the joint-phase weights.
    FineTune,
    /// Re-draw the expert's weights before retraining.
    Reinitialize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs_per_step: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub retrain_subset_fraction: f64,
    pub retrain_mode: RetrainMode,
    pub acc_target: f64,
    pub exit_target: f64,
    /// Back-to-back model-length windows taken from each training frame.
    pub train_windows_per_frame: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_step: 40,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            early_stop_patience: 5,
            seed: 0,
            retrain_subset_fraction: 1.0,
            retrain_mode: RetrainMode::FineTune,
            acc_target: DEFAULT_ACC_TARGET,
            exit_target: DEFAULT_EXIT_TARGET,
            train_windows_per_frame: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs_per_step == 0
            || self.batch_size == 0
            || self.early_stop_patience == 0
            || self.train_windows_per_frame == 0
        {
            return Err(Error::Config(
                "epochs, batch size, patience and windows per frame must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.learning_rate)));
        }
        if !(self.retrain_subset_fraction > 0.0 && self.retrain_subset_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "retrain fraction {} outside (0, 1]",
                self.retrain_subset_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc
            ));
        }
        s
    }
}

/// Something whose parameters can be fitted on labelled samples.
pub trait Objective: Sync {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Records the loss of one sample; also returns the predicted class.
    fn loss(&self, tape: &mut Tape, sample: &Sample) -> Result<(Var, usize)>;
}

impl Objective for Model {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn loss(&self, tape: &mut Tape, sample: &Sample) -> Result<(Var, usize)> {
        let x = tape.input(sample.input.clone());
        let logits = self.logits(tape, x)?;
        let pred = tape.value(logits).argmax();
        Ok((tape.softmax_cross_entropy(logits, sample.label)?, pred))
    }
}

/// Sum of the three per-exit cross-entropies for one sample; also returns
/// the per-exit loss nodes.
pub fn joint_loss(
    model: &CompositeModel,
    tape: &mut Tape,
    window: &Tensor,
    label: usize,
) -> Result<(Var, [Var; 3], [Var; 3])> {
    let logits = model.forward_all(tape, window)?;
    let mut terms = [logits[0]; 3];
    for (t, &z) in terms.iter_mut().zip(&logits) {
        *t = tape.softmax_cross_entropy(z, label)?;
    }
    let ab = tape.add(terms[0], terms[1])?;
    Ok((tape.add(ab, terms[2])?, terms, logits))
}

/// All exits trained together on the summed loss, no gating.
pub struct JointObjective<'a>(pub &'a mut CompositeModel);

impl Objective for JointObjective<'_> {
    fn params(&self) -> &ParamStore {
        &self.0.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.0.params
    }

    fn loss(&self, tape: &mut Tape, sample: &Sample) -> Result<(Var, usize)> {
        let (loss, _, logits) = joint_loss(self.0, tape, &sample.input, sample.label)?;
        let pred = tape.value(logits[2]).argmax();
        Ok((loss, pred))
    }
}

/// Cross-entropy at a single exit. Upstream experts are expected to be
/// frozen, so their features enter as constants.
pub struct ExpertObjective<'a> {
    pub model: &'a mut CompositeModel,
    pub exit: usize,
}

impl Objective for ExpertObjective<'_> {
    fn params(&self) -> &ParamStore {
        &self.model.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.model.params
    }

    fn loss(&self, tape: &mut Tape, sample: &Sample) -> Result<(Var, usize)> {
        let mut feats = Vec::with_capacity(self.exit + 1);
        for e in 0..=self.exit {
            feats.push(self.model.expert_features(tape, e, &sample.input)?);
        }
        let logits = self.model.exit_logits(tape, self.exit, &feats)?;
        let pred = tape.value(logits).argmax();
        Ok((tape.softmax_cross_entropy(logits, sample.label)?, pred))
    }
}

struct Optimizer {
    kind: OptimizerKind,
    lr: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPSILON: f32 = 1e-7;

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| vec![0.0; params.get(id).len()]).collect();
        Self { kind, lr: lr as f32, step: 0, m: zeros(), v: zeros() }
    }

    fn apply(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step);
        let bc2 = 1.0 - BETA2.powi(self.step);
        for id in params.ids().collect::<Vec<_>>() {
            if params.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.param(id) else {
                if self.kind == OptimizerKind::Sgd {
                    continue;
                }
                // zero gradient still advances Adam's moment decay
                let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
                for ((p, m), v) in params.get_mut(id).data_mut().iter_mut().zip(m).zip(v) {
                    *m *= BETA1;
                    *v *= BETA2;
                    *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + EPSILON);
                }
                continue;
            };
            let p = params.get_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, g) in p.iter_mut().zip(g.data()) {
                        *p -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
                    for (((p, g), m), v) in p.iter_mut().zip(g.data()).zip(m).zip(v) {
                        *m = BETA1 * *m + (1.0 - BETA1) * g;
                        *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                        *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + EPSILON);
                    }
                }
            }
        }
    }
}

// Fixed chunking makes the gradient sum independent of the thread count.
const GRAD_CHUNK: usize = 8;

fn batch_gradients<O: Objective>(obj: &O, batch: &[&Sample]) -> Result<(Gradients, f64, usize)> {
    let parts: Vec<(Gradients, f64, usize)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut acc = Gradients::default();
            let (mut loss_sum, mut hits) = (0.0f64, 0usize);
            for s in chunk {
                let mut tape = Tape::new(obj.params());
                let (loss, pred) = obj.loss(&mut tape, s)?;
                loss_sum += tape.value(loss).data()[0] as f64;
                hits += (pred == s.label) as usize;
                acc.accumulate(&tape.backward(loss)?);
            }
            Ok((acc, loss_sum, hits))
        })
        .collect::<Result<_>>()?;
    let mut total = Gradients::default();
    let (mut loss, mut hits) = (0.0, 0);
    for (g, l, h) in &parts {
        total.accumulate(g);
        loss += l;
        hits += h;
    }
    total.scale(1.0 / batch.len() as f32);
    Ok((total, loss, hits))
}

/// Mean loss and accuracy over `samples` without recording gradients.
pub fn evaluate_objective<O: Objective>(obj: &O, samples: &[&Sample]) -> Result<(f64, f64)> {
    let per: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|s| {
            let mut tape = Tape::inference(obj.params());
            let (loss, pred) = obj.loss(&mut tape, s)?;
            Ok((tape.value(loss).data()[0] as f64, pred == s.label))
        })
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    Ok((per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().filter(|p| p.1).count() as f64 / n))
}

/// Trains the unfrozen parameters of `obj`; the returned model holds the
/// parameters of the epoch with the lowest validation loss.
pub fn train_model<O: Objective>(
    obj: &mut O,
    train: &[&Sample],
    val: &[&Sample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Training(format!(
            "empty split: {} training / {} validation frames",
            train.len(),
            val.len()
        )));
    }
    if obj.params().ids().all(|id| obj.params().is_frozen(id)) {
        return Err(Error::Training("every parameter is frozen".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, obj.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;

    for epoch in 0..cfg.epochs_per_step {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0);
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = batch_idx.iter().map(|&i| train[i]).collect();
            let (grads, l, h) = batch_gradients(obj, &batch)?;
            loss_sum += l;
            hits += h;
            opt.apply(obj.params_mut(), &grads);
        }
        let (val_loss, val_acc) = evaluate_objective(obj, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Training(format!("validation loss diverged at epoch {epoch}")));
        }
        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            val_loss,
            val_acc,
        });
        history.stopped_epoch = epoch;
        log::debug!(
            "epoch {epoch}: train {:.4} val {val_loss:.4} acc {val_acc:.3}",
            loss_sum / train.len() as f64
        );
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, obj.params().clone()));
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    if let Some((_, params)) = best {
        *obj.params_mut() = params;
    }
    Ok(history)
}

/// Outcome of one phase-2 step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertStep {
    pub expert: usize,
    pub history: TrainHistory,
    /// `(frame_id, offset)` of the training windows the expert was retrained on.
    pub trained_on: Vec<(usize, usize)>,
    pub curve: Option<ThresholdCurve>,
    pub criterion: Option<ExitCriterion>,
    /// Training windows leaving at this exit (empty for the last expert).
    pub exited: Vec<(usize, usize)>,
    /// Parameter checksums of all three experts after the step.
    pub checksums: [u64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPhaseReport {
    pub joint: TrainHistory,
    pub steps: Vec<ExpertStep>,
}

impl TwoPhaseReport {
    pub fn criteria(&self) -> Vec<ExitCriterion> {
        self.steps.iter().filter_map(|s| s.criterion).collect()
    }
}

fn checksums(model: &CompositeModel) -> [u64; 3] {
    [0, 1, 2].map(|e| model.params.checksum(&expert_prefix(e)))
}

fn entropies_at(model: &CompositeModel, samples: &[&Sample], exit: usize) -> Result<Vec<(f64, bool)>> {
    samples
        .par_iter()
        .map(|s| {
            let sd = exit_decisions(model, s, exit)?;
            let last = &sd[exit];
            Ok((entropy(last), last.argmax() == s.label))
        })
        .collect()
}

/// Joint training followed by sequential per-expert retraining, freezing and
/// exit-threshold selection on the frames that still reach each exit.
pub fn two_phase_train(
    model: &mut CompositeModel,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TwoPhaseReport> {
    cfg.validate()?;
    let train_refs: Vec<&Sample> = train.iter().collect();
    let val_refs: Vec<&Sample> = val.iter().collect();

    model.params.freeze_all(false);
    let joint = train_model(&mut JointObjective(model), &train_refs, &val_refs, cfg)?;
    log::info!("joint phase done after {} epochs", joint.epochs.len());

    let mut remaining = train_refs;
    let mut remaining_val = val_refs.clone();
    let mut steps = Vec::with_capacity(3);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7e7a_1ee7);
    for e in 0..3 {
        if remaining.is_empty() {
            return Err(Error::Training(format!(
                "no training frames left for expert {e}; exit thresholds are too permissive"
            )));
        }
        model.train_only_expert(e);
        if cfg.retrain_mode == RetrainMode::Reinitialize {
            model.reinitialize_expert(e, cfg.seed.wrapping_add(1 + e as u64))?;
        }
        let mut subset = remaining.clone();
        if cfg.retrain_subset_fraction < 1.0 {
            subset.shuffle(&mut rng);
            let keep = ((subset.len() as f64 * cfg.retrain_subset_fraction).ceil() as usize).max(1);
            subset.truncate(keep);
            subset.sort_by_key(|s| s.key());
        }
        // validation follows the same gating; fall back to all frames if it empties
        let val_pool = if remaining_val.is_empty() { &val_refs } else { &remaining_val };
        let step_cfg = TrainConfig { seed: cfg.seed.wrapping_add(100 + e as u64), ..cfg.clone() };
        let history = train_model(&mut ExpertObjective { model, exit: e }, &subset, val_pool, &step_cfg)?;
        model.freeze_expert(e, true);

        let mut step = ExpertStep {
            expert: e,
            history,
            trained_on: subset.iter().map(|s| s.key()).collect(),
            curve: None,
            criterion: None,
            exited: Vec::new(),
            checksums: [0; 3],
        };
        if e < 2 {
            let scored = entropies_at(model, &remaining, e)?;
            let (h, correct): (Vec<f64>, Vec<bool>) = scored.into_iter().unzip();
            let curve = sweep_threshold_curve(&h, &correct)?;
            let crit = select_exit_threshold(&curve, cfg.acc_target, cfg.exit_target)?;
            let (exited, rest) = partition_frames(&remaining, &h, &crit);
            log::info!(
                "exit {e}: h_acc {:.4} h_exits {:.4} h_th {:.4}, {} of {} frames exit",
                crit.h_acc,
                crit.h_exits,
                crit.h_th,
                exited.len(),
                remaining.len()
            );
            let val_h: Vec<f64> = entropies_at(model, &remaining_val, e)?.into_iter().map(|p| p.0).collect();
            remaining_val = partition_frames(&remaining_val, &val_h, &crit).1;
            step.exited = exited.iter().map(|s| s.key()).collect();
            step.curve = Some(curve);
            step.criterion = Some(crit);
            remaining = rest;
        }
        step.checksums = checksums(model);
        steps.push(step);
    }
    Ok(TwoPhaseReport { joint, steps })
}
