//! Early-exit inference: experts run in order and a frame leaves at the
//! first exit whose soft-decision entropy is within that exit's threshold.
//! Experts after the exit are never evaluated.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::{Modulation, Sample};
use crate::error::{Error, Result};
use crate::exit_policy::{entropy, exits, ExitCriterion, SoftDecision};
use crate::models::{CompositeModel, Model};
use crate::tensor::{softmax, Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ExitRecord {
    pub frame_id: usize,
    pub label: usize,
    pub pred: usize,
    pub exit: usize,
    /// Entropy (bits) at each evaluated exit, `exit + 1` entries.
    pub entropies: Vec<f64>,
    pub flops: u64,
    pub snr_db: f64,
}

impl ExitRecord {
    pub fn correct(&self) -> bool {
        self.label == self.pred
    }
}

fn soft_decision(tape: &Tape, logits: Var) -> Result<SoftDecision> {
    let p = softmax(tape.value(logits).data());
    // renormalise in f64 so f32 rounding never trips validation
    let sum: f64 = p.iter().map(|&v| v as f64).sum();
    SoftDecision::new(p.iter().map(|&v| v as f64 / sum).collect())
}

/// Soft decisions at exits `0..=upto`, evaluated without gating.
pub fn exit_decisions(model: &CompositeModel, sample: &Sample, upto: usize) -> Result<Vec<SoftDecision>> {
    let mut tape = Tape::inference(&model.params);
    let mut feats = Vec::with_capacity(upto + 1);
    let mut out = Vec::with_capacity(upto + 1);
    for e in 0..=upto.min(2) {
        feats.push(model.expert_features(&mut tape, e, &sample.input)?);
        let logits = model.exit_logits(&mut tape, e, &feats)?;
        out.push(soft_decision(&tape, logits)?);
    }
    Ok(out)
}

/// Gated classification of one frame; FLOPs are metered as layers execute.
pub fn classify_frame(
    model: &CompositeModel,
    criteria: &[ExitCriterion],
    sample: &Sample,
) -> Result<ExitRecord> {
    if criteria.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need exit criteria for exits 0 and 1, got {}",
            criteria.len()
        )));
    }
    let mut tape = Tape::inference(&model.params);
    let mut feats = Vec::with_capacity(3);
    let mut entropies = Vec::with_capacity(3);
    for e in 0..3 {
        feats.push(model.expert_features(&mut tape, e, &sample.input)?);
        let logits = model.exit_logits(&mut tape, e, &feats)?;
        let sd = soft_decision(&tape, logits)?;
        let h = entropy(&sd);
        entropies.push(h);
        if e == 2 || exits(h, criteria[e].h_th) {
            return Ok(ExitRecord {
                frame_id: sample.frame_id,
                label: sample.label,
                pred: sd.argmax(),
                exit: e,
                entropies,
                flops: tape.flops(),
                snr_db: sample.snr_db,
            });
        }
    }
    unreachable!("the last expert always classifies")
}

pub fn evaluate_dataset(
    model: &CompositeModel,
    criteria: &[ExitCriterion],
    samples: &[Sample],
) -> Result<Vec<ExitRecord>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no frames to evaluate".into()));
    }
    samples.par_iter().map(|s| classify_frame(model, criteria, s)).collect()
}

/// Baseline classification recorded in the same shape (always exit 0).
pub fn classify_baseline(model: &Model, sample: &Sample) -> Result<ExitRecord> {
    let mut tape = Tape::inference(&model.params);
    let x = tape.input(sample.input.clone());
    let logits = model.logits(&mut tape, x)?;
    let sd = soft_decision(&tape, logits)?;
    Ok(ExitRecord {
        frame_id: sample.frame_id,
        label: sample.label,
        pred: sd.argmax(),
        exit: 0,
        entropies: vec![entropy(&sd)],
        flops: tape.flops(),
        snr_db: sample.snr_db,
    })
}

pub fn evaluate_baseline(model: &Model, samples: &[Sample]) -> Result<Vec<ExitRecord>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no frames to evaluate".into()));
    }
    samples.par_iter().map(|s| classify_baseline(model, s)).collect()
}

pub const RECORD_COLUMNS: [&str; 9] =
    ["frame_id", "label", "pred", "exit", "entropy0", "entropy1", "entropy2", "flops", "snr_db"];

fn class_name(idx: usize) -> String {
    Modulation::from_class_index(idx).map(|m| m.name().to_owned()).unwrap_or_else(|| idx.to_string())
}

fn parse_class(s: &str) -> Result<usize> {
    s.parse::<Modulation>()
        .map(Modulation::class_index)
        .or_else(|_| s.parse::<usize>().map_err(|_| Error::Format(format!("bad class {s:?}"))))
}

pub fn records_to_csv(records: &[ExitRecord]) -> String {
    let mut out = RECORD_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let h = |i: usize| r.entropies.get(i).map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.frame_id,
            class_name(r.label),
            class_name(r.pred),
            r.exit,
            h(0),
            h(1),
            h(2),
            r.flops,
            r.snr_db
        ));
    }
    out
}

pub fn records_from_csv(text: &str) -> Result<Vec<ExitRecord>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty records file".into()))?;
    if header.trim() != RECORD_COLUMNS.join(",") {
        return Err(Error::Format(format!("unexpected header {header:?}")));
    }
    let bad = |line: &str| Error::Format(format!("malformed record line {line:?}"));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != RECORD_COLUMNS.len() {
                return Err(bad(line));
            }
            let exit: usize = f[3].parse().map_err(|_| bad(line))?;
            let entropies = f[4..7]
                .iter()
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|_| bad(line)))
                .collect::<Result<Vec<_>>>()?;
            Ok(ExitRecord {
                frame_id: f[0].parse().map_err(|_| bad(line))?,
                label: parse_class(f[1])?,
                pred: parse_class(f[2])?,
                exit,
                entropies,
                flops: f[7].parse().map_err(|_| bad(line))?,
                snr_db: f[8].parse().map_err(|_| bad(line))?,
            })
        })
        .collect()
}

pub fn write_records(records: &[ExitRecord], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, records_to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<ExitRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    records_from_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flops::cumulative_exit_flops;
    use crate::models::{build_composite, CompositeSpec, ResidualStackConfig};
    use crate::tensor::Tensor;

    fn small() -> CompositeModel {
        build_composite(
            &CompositeSpec {
                model_input_len: 64,
                segment_lens: [16, 16, 32],
                stack: ResidualStackConfig { filters: 4, ..ResidualStackConfig::default() },
                decision_widths: vec![8, 8],
                ..CompositeSpec::default()
            },
            11,
        )
        .unwrap()
    }

    fn sample(id: usize) -> Sample {
        let data = (0..128).map(|i| ((i * 7 + id * 13) % 11) as f32 / 5.0 - 1.0).collect();
        Sample {
            frame_id: id,
            offset: 0,
            input: Tensor::new(vec![64, 2], data).unwrap(),
            label: id % 6,
            snr_db: 0.0,
        }
    }

    #[test]
    fn permissive_threshold_exits_first() {
        let m = small();
        let crit = vec![ExitCriterion::fixed(6f64.log2()); 2];
        let r = classify_frame(&m, &crit, &sample(0)).unwrap();
        assert_eq!(r.exit, 0);
        assert_eq!(r.entropies.len(), 1);
        assert_eq!(r.flops, cumulative_exit_flops(m.spec(), 0).unwrap());
    }

    #[test]
    fn negative_threshold_reaches_last_expert() {
        let m = small();
        let crit = vec![ExitCriterion::fixed(-1.0); 2];
        let r = classify_frame(&m, &crit, &sample(1)).unwrap();
        assert_eq!(r.exit, 2);
        assert_eq!(r.entropies.len(), 3);
        assert_eq!(r.flops, cumulative_exit_flops(m.spec(), 2).unwrap());
    }

    #[test]
    fn dynamic_meter_matches_analytic_per_path() {
        let m = small();
        for exit in 0..3 {
            let crit: Vec<ExitCriterion> =
                (0..2).map(|e| ExitCriterion::fixed(if e == exit { 10.0 } else { -1.0 })).collect();
            let r = classify_frame(&m, &crit, &sample(2)).unwrap();
            assert_eq!(r.exit, exit);
            assert_eq!(r.flops, cumulative_exit_flops(m.spec(), exit).unwrap());
        }
    }

    #[test]
    fn missing_criteria_is_an_error() {
        assert!(classify_frame(&small(), &[ExitCriterion::fixed(1.0)], &sample(0)).is_err());
        assert!(evaluate_dataset(&small(), &[ExitCriterion::fixed(1.0); 2], &[]).is_err());
    }

    #[test]
    fn gated_entropies_match_ungated_decisions() {
        let m = small();
        let crit = vec![ExitCriterion::fixed(-1.0); 2];
        let s = sample(3);
        let r = classify_frame(&m, &crit, &s).unwrap();
        let all = exit_decisions(&m, &s, 2).unwrap();
        let h: Vec<f64> = all.iter().map(entropy).collect();
        assert_eq!(r.entropies, h);
        assert_eq!(r.pred, all[2].argmax());
    }

    #[test]
    fn csv_round_trip_and_columns() {
        let m = small();
        let crit = vec![ExitCriterion::fixed(1.5), ExitCriterion::fixed(2.0)];
        let samples: Vec<Sample> = (0..8).map(sample).collect();
        let recs = evaluate_dataset(&m, &crit, &samples).unwrap();
        let csv = records_to_csv(&recs);
        for line in csv.lines() {
            assert_eq!(line.split(',').count(), RECORD_COLUMNS.len());
        }
        assert_eq!(records_from_csv(&csv).unwrap(), recs);
        assert!(records_from_csv("nope\n").is_err());
    }
}
