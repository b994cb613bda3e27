// End-to-end acceptance checks. Every criterion prints one PASS/FAIL line;
// the test fails afterwards if any of them did.
//
//   cargo test -p amcee-core --test acceptance -- --nocapture

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use amcee::dataset::{generate_dataset, DatasetConfig, Split};
use amcee::evaluation::{spearman, MetricsTable};
use amcee::exit_policy::{
    entropy, select_exit_threshold, sweep_threshold_curve, ExitCriterion, SoftDecision,
};
use amcee::flops::{average_load, cumulative_exit_flops, flop_report, reduction};
use amcee::inference::classify_frame;
use amcee::models::{build_composite, CompositeSpec, ResidualStackConfig};
use amcee::pipeline::{run_pipeline, PipelineConfig};
use amcee::training::{two_phase_train, TrainConfig};
use common::trials;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(value: f64, reference: f64, rel: f64) -> bool {
    (value - reference).abs() <= rel * reference
}

fn entropy_values() -> Outcome {
    let h = |p: &[f64]| entropy(&SoftDecision::new(p.to_vec()).unwrap());
    let one_hot = h(&[0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    let uniform = h(&[1.0 / 6.0; 6]);
    let half = h(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0]);
    check(
        one_hot == 0.0 && (uniform - 6f64.log2()).abs() < 1e-9 && (half - 1.0).abs() < 1e-12,
        format!("one-hot {one_hot}, uniform {uniform:.12}, half {half:.15}"),
    )
}

fn published_load_arithmetic() -> Outcome {
    let load = average_load(&[0.80e6, 4.73e6, 12.62e6], &[0.207, 0.118, 0.675]).map_err(|e| e.to_string())?;
    let pct = 100.0 * reduction(load, 12.53e6);
    check((pct - 26.2).abs() <= 0.2, format!("load {:.4} MFLOPs, reduction {pct:.3}%", load / 1e6))
}

fn conservation() -> Outcome {
    let spec = CompositeSpec::default();
    let r = flop_report(&spec).map_err(|e| e.to_string())?;
    let experts: u64 = r.experts.iter().map(|m| m.feature_extraction).sum();
    check(
        spec.segment_lens == [32, 160, 320] && experts == r.baseline.feature_extraction,
        format!("experts {experts} vs baseline {}", r.baseline.feature_extraction),
    )
}

fn calibration() -> Outcome {
    let r = flop_report(&CompositeSpec::default()).map_err(|e| e.to_string())?;
    let base = r.baseline.total as f64;
    let exit0 = r.cumulative_exit[0] as f64;
    let exit2 = r.cumulative_exit[2] as f64;
    // the published per-exit parameter counts are cumulative
    let published = [79_558.0, 200_076.0, 402_514.0];
    let params_ok = within(r.baseline.params as f64, 202_438.0, 0.15)
        && r.cumulative_params.iter().zip(published).all(|(&p, q)| within(p as f64, q, 0.25));
    check(
        within(base, 12.53e6, 0.15) && within(exit0, 0.80e6, 0.20) && exit2 > base && params_ok,
        format!(
            "baseline {:.3} MFLOPs / {} params, exits {:?} FLOPs, exit params {:?}",
            base / 1e6,
            r.baseline.params,
            r.cumulative_exit,
            r.cumulative_params
        ),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut count = 0;
    for seed in 0..100 {
        worst = worst.max(trials::random_graph_trial(1000 + seed));
        count += 1;
    }
    for seed in 0..4 {
        worst = worst.max(trials::joint_loss_trial(seed, 2));
        count += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst < 1e-3 && count >= 100 && secs < 60.0,
        format!("{count} trials, max relative error {worst:.2e}, {secs:.1}s"),
    )
}

/// Direct reading of the selection rule, one candidate at a time.
fn brute_force_threshold(h: &[f64], correct: &[bool], acc_target: f64, exit_target: f64) -> (f64, f64) {
    let mut candidates = h.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let n = h.len();
    let stats = |t: f64| {
        let exiting: Vec<usize> = (0..n).filter(|&i| h[i] <= t).collect();
        let hits = exiting.iter().filter(|&&i| correct[i]).count();
        (exiting.len() as f64 / n as f64, hits as f64 / exiting.len() as f64)
    };
    let h_acc = candidates.iter().rev().copied().find(|&t| stats(t).1 >= acc_target).unwrap_or(0.0);
    let h_exits = candidates
        .iter()
        .copied()
        .find(|&t| stats(t).0 >= exit_target)
        .unwrap_or(*candidates.last().unwrap());
    (h_acc, h_exits)
}

fn threshold_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for fixture in 0..50 {
        let n = rng.gen_range(1..80);
        // a coarse grid forces repeated entropies
        let h: Vec<f64> = (0..n).map(|_| rng.gen_range(0..40) as f64 * 0.0625).collect();
        let bias = rng.gen_range(0.2..1.0);
        let correct: Vec<bool> =
            h.iter().map(|&v| rng.gen_bool((bias - v * 0.15).clamp(0.05, 0.99))).collect();
        let (acc_t, exit_t) = (rng.gen_range(0.5..1.0), rng.gen_range(0.05..0.9));
        let got = sweep_threshold_curve(&h, &correct)
            .and_then(|c| select_exit_threshold(&c, acc_t, exit_t))
            .map_err(|e| e.to_string())?;
        let (h_acc, h_exits) = brute_force_threshold(&h, &correct, acc_t, exit_t);
        if got.h_acc != h_acc || got.h_exits != h_exits || got.h_th != (h_acc + h_exits) / 2.0 {
            return Err(format!("fixture {fixture}: {got:?} vs ({h_acc}, {h_exits})"));
        }
    }
    // 16 frames at 0.1..1.6: correct up to 0.8, a quarter exit at 0.4
    let h: Vec<f64> = (1..=16).map(|i| i as f64 / 10.0).collect();
    let correct: Vec<bool> = h.iter().map(|&v| v <= 0.8).collect();
    let c = sweep_threshold_curve(&h, &correct)
        .and_then(|c| select_exit_threshold(&c, 0.95, 0.25))
        .map_err(|e| e.to_string())?;
    check(
        c.h_acc == 0.8 && c.h_exits == 0.4 && (c.h_th - 0.6).abs() < 1e-12,
        format!("50 fixtures exact; constructed h_acc {} h_exits {} h_th {}", c.h_acc, c.h_exits, c.h_th),
    )
}

fn tiny_dataset(seed: u64) -> DatasetConfig {
    serde_json::from_value(serde_json::json!({
        "modulations": ["BPSK", "QPSK", "QAM16"],
        "snr_grid_db": [0.0, 10.0],
        "frames_per_pair": 12,
        "frame_len": 128,
        "master_seed": seed,
        "split_counts": { "train": 8, "val": 2, "test": 2 },
        "fading": { "mode": "none" }
    }))
    .unwrap()
}

fn tiny_spec() -> CompositeSpec {
    CompositeSpec {
        model_input_len: 64,
        segment_lens: [16, 16, 32],
        stack: ResidualStackConfig { filters: 4, ..ResidualStackConfig::default() },
        decision_widths: vec![8, 8],
        ..CompositeSpec::default()
    }
}

fn gating_consistency() -> Outcome {
    let data = generate_dataset(&tiny_dataset(5)).map_err(|e| e.to_string())?;
    let spec = tiny_spec();
    let train = data.windowed_samples(Split::Train, 64, 2).map_err(|e| e.to_string())?;
    let val = data.samples(Split::Val, 0, 64).map_err(|e| e.to_string())?;
    let cfg =
        TrainConfig { epochs_per_step: 3, batch_size: 8, acc_target: 0.4, seed: 2, ..TrainConfig::default() };
    let mut model = build_composite(&spec, 2).map_err(|e| e.to_string())?;
    let report = two_phase_train(&mut model, &train, &val, &cfg).map_err(|e| e.to_string())?;
    let criteria = report.criteria();

    let mut by_exit: [Vec<(usize, usize)>; 3] = Default::default();
    for s in &train {
        let r = classify_frame(&model, &criteria, s).map_err(|e| e.to_string())?;
        let expected = cumulative_exit_flops(&spec, r.exit).map_err(|e| e.to_string())?;
        if r.flops != expected {
            return Err(format!("window {:?} metered {} FLOPs, analytic {expected}", s.key(), r.flops));
        }
        by_exit[r.exit].push(s.key());
    }
    let sorted = |v: &[(usize, usize)]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    let partition_ok = sorted(&by_exit[0]) == sorted(&report.steps[0].exited)
        && sorted(&by_exit[1]) == sorted(&report.steps[1].exited)
        && sorted(&by_exit[2]) == sorted(&report.steps[2].trained_on);

    // force each path once so every meter reading is exercised
    let mut paths_ok = true;
    for exit in 0..3 {
        let forced: Vec<ExitCriterion> =
            (0..2).map(|e| ExitCriterion::fixed(if e == exit { 10.0 } else { -1.0 })).collect();
        let r = classify_frame(&model, &forced, &train[0]).map_err(|e| e.to_string())?;
        paths_ok &=
            r.exit == exit && r.flops == cumulative_exit_flops(&spec, exit).map_err(|e| e.to_string())?;
    }
    check(
        partition_ok && paths_ok,
        format!(
            "{} windows replayed, exits {}/{}/{}, forced paths {}",
            train.len(),
            by_exit[0].len(),
            by_exit[1].len(),
            by_exit[2].len(),
            if paths_ok { "metered exactly" } else { "mismatch" }
        ),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn write_tiny_pipeline(dir: &Path) {
    let put = |name: &str, v: serde_json::Value| fs::write(dir.join(name), v.to_string()).unwrap();
    put("dataset.json", serde_json::to_value(tiny_dataset(9)).unwrap());
    put(
        "train.json",
        serde_json::json!({ "epochs_per_step": 2, "batch_size": 8, "train_windows_per_frame": 2 }),
    );
    put("model.json", serde_json::to_value(tiny_spec()).unwrap());
    put(
        "pipeline.json",
        serde_json::json!({
            "dataset_config": "dataset.json",
            "train_config": "train.json",
            "model_config": "model.json",
            "seeds": [1, 2],
            "output_dir": "out"
        }),
    );
}

fn determinism() -> Outcome {
    let mut snaps = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        write_tiny_pipeline(tmp.path());
        let p = PipelineConfig::load(&tmp.path().join("pipeline.json")).map_err(|e| e.to_string())?;
        run_pipeline(&p).map_err(|e| e.to_string())?;
        snaps.push(snapshot(&tmp.path().join("out")));
    }
    let (a, b) = (&snaps[0], &snaps[1]);
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    let has = |needle: &str| a.keys().any(|k| k.contains(needle));
    check(
        a.len() == b.len()
            && differing.is_empty()
            && has("dataset")
            && has("history.csv")
            && has("composite_by_snr.csv"),
        format!("{} files compared, differing: {differing:?}", a.len()),
    )
}

struct DeskResults {
    lines: Vec<(usize, Outcome)>,
}

fn desk_run() -> DeskResults {
    let fail_all = |msg: String| DeskResults { lines: (9..=12).map(|c| (c, Err(msg.clone()))).collect() };
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk/pipeline.json");
    let mut p = match PipelineConfig::load(Path::new(cfg)) {
        Ok(p) => p,
        Err(e) => return fail_all(e.to_string()),
    };
    let tmp = tempfile::tempdir().unwrap();
    p.output_dir = tmp.path().join("desk");
    p.dataset_dir = tmp.path().join("dataset");
    let start = Instant::now();
    let outcome = match run_pipeline(&p) {
        Ok(o) => o,
        Err(e) => return fail_all(e.to_string()),
    };
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let report = &outcome.report;
    let flops = report.baseline_flops as f64;
    let pooled = &report.pooled;
    let comp = &pooled.composite_by_snr;
    let base = pooled.baseline_by_snr.as_ref().expect("baseline records present");
    let acc = |t: &MetricsTable, snr: f64| t.snr_row(snr).map_or(f64::NAN, |r| r.accuracy);
    let early = |snr: f64| comp.snr_row(snr).map_or(f64::NAN, |r| r.exit_fractions[0] + r.exit_fractions[1]);
    let red = |snr: f64| comp.snr_row(snr).and_then(|r| r.reduction).unwrap_or(f64::NAN);

    let (b_lo, b_hi, c_lo, c_hi) = (acc(base, -10.0), acc(base, 10.0), acc(comp, -10.0), acc(comp, 10.0));
    let c9 = check(
        b_hi - b_lo >= 0.20 && c_hi - c_lo >= 0.20,
        format!(
            "baseline {:.1}% -> {:.1}%, composite {:.1}% -> {:.1}% ({} runs, {minutes:.1} min)",
            100.0 * b_lo,
            100.0 * b_hi,
            100.0 * c_lo,
            100.0 * c_hi,
            report.runs.len()
        ),
    );

    let rho = pooled.snr_early_exit_spearman.unwrap_or(f64::NAN);
    let snrs: Vec<f64> = comp.snr_rows().filter_map(|r| r.snr_db).collect();
    let fractions: Vec<f64> = snrs.iter().map(|&s| early(s)).collect();
    let per_snr_rho = spearman(&snrs, &fractions).unwrap_or(f64::NAN);
    let c10 = check(
        early(10.0) > early(-10.0) && rho > 0.5,
        format!(
            "early exits {:.1}% at -10 dB vs {:.1}% at +10 dB, frame-level Spearman {rho:.3} (per-SNR fractions {per_snr_rho:.3})",
            100.0 * early(-10.0),
            100.0 * early(10.0)
        ),
    );

    let (r_lo, r_hi) = (red(-10.0), red(10.0));
    let c11 = check(
        r_hi > 0.0 && r_hi - r_lo > 0.10,
        format!(
            "reduction {:.1}% at -10 dB, {:.1}% at +10 dB (baseline {flops} FLOPs)",
            100.0 * r_lo,
            100.0 * r_hi
        ),
    );

    let (b_all, c_all) =
        (base.overall().map_or(f64::NAN, |r| r.accuracy), comp.overall().map_or(f64::NAN, |r| r.accuracy));
    let c12 = check(
        b_all - c_all <= 0.05,
        format!(
            "baseline {:.1}%, composite {:.1}%, gap {:.2} pp",
            100.0 * b_all,
            100.0 * c_all,
            100.0 * (b_all - c_all)
        ),
    );
    DeskResults { lines: vec![(9, c9), (10, c10), (11, c11), (12, c12)] }
}

#[test]
fn acceptance() {
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "entropy reference values", entropy_values()),
        (2, "published load arithmetic", published_load_arithmetic()),
        (3, "feature FLOP conservation", conservation()),
        (4, "FLOP and parameter calibration", calibration()),
        (5, "gradient suite", gradient_suite()),
        (6, "threshold oracle", threshold_oracle()),
        (7, "gating and partition consistency", gating_consistency()),
        (8, "determinism", determinism()),
    ];
    let names = ["accuracy rises with SNR", "early exits track SNR", "load reduction by SNR", "accuracy gap"];
    for ((n, outcome), name) in desk_run().lines.into_iter().zip(names) {
        results.push((n, name, outcome));
    }
    let mut failed = Vec::new();
    for (n, name, outcome) in &results {
        match outcome {
            Ok(d) => println!("PASS criterion {n:>2} ({name}): {d}"),
            Err(d) => {
                println!("FAIL criterion {n:>2} ({name}): {d}");
                failed.push(*n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
