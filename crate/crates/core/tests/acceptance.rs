//! Acceptance checks, one PASS/FAIL line each.
//!
//! Run with `cargo test -p lanecast --test acceptance`; pass a substring to
//! run only matching checks (`... -- learning`). Exits nonzero when any
//! check fails.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use lanecast::features::FEATURE_COUNT;
use lanecast::models::{
    lstm_cell_step, lstm_layer_forward, model_grad_check, multi_head_attention, positional_encoding,
    AttentionParams, LstmCellParams, Model, CONFIG_NAMES,
};
use lanecast::nn::{Graph, Tensor};
use lanecast::prepared::prepare_cell;
use lanecast::rng::{self, tag};
use lanecast::segmentation::{
    balance_classes, balanced_lk_count, build_dataset, detect_lc_instants, extract_segments, seconds_to_frames,
    split_sizes, write_manifest, ClassCounts, DatasetConfig, Label, Split,
};
use lanecast::synthetic::{generate_separable_toy, synthesize, SyntheticSpec};
use lanecast::train_eval::{
    accuracy, evaluate, evaluate_samples, per_class_metrics, prediction_time_histogram, run_cell, sweep, confusion_of,
    parse_grid, train, ConfusionMatrix, SweepConfig, TrainConfig, DEFAULT_BIN_WIDTH_S,
};
use rand::Rng as _;

/// Percentage points.
const METRIC_TOL: f64 = 0.01;
const GRAD_TOL: f64 = 1e-4;
const GRAD_COORDS: usize = 20;
const LSTM_TOL: f64 = 1e-12;
const ATTENTION_TOL: f64 = 1e-10;
const PE_TOL: f64 = 1e-9;
const LEARN_MIN_ACC: f64 = 85.0;
const TOY_MIN_ACC: f64 = 99.0;
const LEARN_BUDGET: Duration = Duration::from_secs(600);
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const PIPELINE_BUDGET: Duration = Duration::from_secs(60);

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn within(budget: Duration, elapsed: Duration, what: &str) -> Result<(), String> {
    check(elapsed <= budget, || format!("{what} took {elapsed:.1?}, budget {budget:?}"))
}

fn metric_oracle() -> Outcome {
    // (matrix, Acc, F1 LK/LLC/RLC) for TN 2, Δt_o = 2 s, Δt_p,MAX = 3..6 s.
    let published: [([[u64; 3]; 3], f64, [f64; 3]); 4] = [
        ([[1607, 17, 27], [28, 728, 0], [39, 0, 919]], 96.70, [96.66, 97.00, 96.53]),
        ([[1369, 30, 32], [63, 603, 0], [92, 0, 716]], 92.53, [92.66, 92.84, 92.03]),
        ([[1098, 43, 78], [65, 486, 7], [103, 3, 557]], 87.75, [88.37, 89.17, 85.36]),
        ([[849, 50, 98], [69, 398, 7], [88, 5, 407]], 83.92, [84.77, 85.87, 80.43]),
    ];
    let mut worst: f64 = 0.0;
    for (i, (counts, acc, f1)) in published.iter().enumerate() {
        let cm = ConfusionMatrix::from_counts(*counts);
        let a = accuracy(&cm).map_err(|e| e.to_string())?;
        let m = per_class_metrics(&cm);
        for (got, want) in std::iter::once((a, *acc)).chain(m.f1.iter().copied().zip(f1.iter().copied())) {
            let err = (got - want).abs();
            worst = worst.max(err);
            check(err <= METRIC_TOL, || format!("matrix {}: got {got:.4}, published {want}", i + 3))?;
        }
    }
    Ok(format!("4 matrices, max deviation {worst:.4} pp (tol {METRIC_TOL})"))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (n, batch) = (8, 3);
    let mut worst: f64 = 0.0;
    for (i, name) in CONFIG_NAMES.iter().enumerate() {
        let model = Model::from_name(name, n, FEATURE_COUNT, 100 + i as u64).map_err(|e| e.to_string())?;
        let mut r = rng::stream(7, &[i as u64]);
        let data: Vec<f64> = (0..batch * n * FEATURE_COUNT).map(|_| r.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![batch, n, FEATURE_COUNT], data).map_err(|e| e.to_string())?;
        let labels = [0, 1, 2];
        let err = model_grad_check(&model, &x, &labels, GRAD_COORDS, 11).map_err(|e| e.to_string())?;
        worst = worst.max(err);
        check(err < GRAD_TOL, || format!("{name}: relative error {err:e}"))?;
    }
    within(GRAD_BUDGET, start.elapsed(), "gradient checks")?;
    Ok(format!(
        "9 configs x {GRAD_COORDS} coords, max rel err {worst:.2e} (tol {GRAD_TOL:e}), {:.1?}",
        start.elapsed()
    ))
}

fn random_tensor(shape: &[usize], r: &mut rng::Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| r.gen_range(-0.8..0.8)).collect()).expect("shape")
}

fn forward_oracles() -> Outcome {
    // LSTM layer against the stepwise cell composition.
    let mut r = rng::stream(3, &[]);
    let (n, d_in, d_h) = (7, 5, 3);
    let p = LstmCellParams {
        wx: std::array::from_fn(|_| random_tensor(&[d_h, d_in], &mut r)),
        wh: std::array::from_fn(|_| random_tensor(&[d_h, d_h], &mut r)),
        b: std::array::from_fn(|_| random_tensor(&[d_h], &mut r)),
    };
    let x = random_tensor(&[n, d_in], &mut r);
    let layer = lstm_layer_forward(&x, &p, false).map_err(|e| e.to_string())?;
    let (mut h, mut s) = (vec![0.0; d_h], vec![0.0; d_h]);
    let mut lstm_err: f64 = 0.0;
    for t in 0..n {
        (h, s) = lstm_cell_step(&x.data[t * d_in..(t + 1) * d_in], &h, &s, &p).map_err(|e| e.to_string())?;
        for (a, b) in h.iter().zip(&layer.data[t * d_h..(t + 1) * d_h]) {
            lstm_err = lstm_err.max((a - b).abs());
        }
    }
    check(lstm_err < LSTM_TOL, || format!("LSTM layer deviates by {lstm_err:e}"))?;

    // Single-head attention against values computed independently with numpy.
    let m = |rows: &[[f64; 2]]| Tensor::new(vec![rows.len(), 2], rows.concat()).expect("shape");
    let params = AttentionParams {
        w_q: m(&[[0.2, -0.4], [0.9, 0.1]]),
        w_k: m(&[[-0.5, 0.3], [0.6, 0.8]]),
        w_v: m(&[[1.1, 0.0], [-0.2, 0.7]]),
        w_qh: m(&[[1.0, 0.2], [0.0, 0.5]]),
        w_kh: m(&[[0.3, -0.1], [0.4, 1.0]]),
        w_vh: m(&[[0.9, 0.3], [-0.6, 0.2]]),
        w_a: m(&[[0.5, -1.0], [0.25, 0.75]]),
    };
    let xa = m(&[[1.0, 0.5], [-0.3, 2.0], [0.7, -1.2]]);
    let want_weights = [
        0.3379416180931557, 0.4689138937665483, 0.1931444881402961,
        0.3530245506598668, 0.2892427864358656, 0.35773266290426764,
        0.32171302900549836, 0.43518072591211854, 0.24310624508238313,
    ];
    let want_out = [
        0.3567000269071331, 0.04056940764182373,
        0.5905140814127612, -0.099823701485057,
        0.39507099142181923, 0.010779793409992133,
    ];
    let (out, weights) = multi_head_attention(&xa, &params, &[2]).map_err(|e| e.to_string())?;
    let att_err = out
        .data
        .iter()
        .zip(want_out)
        .chain(weights[0].data.iter().zip(want_weights))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(att_err < ATTENTION_TOL, || format!("attention deviates by {att_err:e}"))?;

    // A centred delta kernel leaves the input unchanged.
    let input = random_tensor(&[2, 1, 9, 4], &mut r);
    let mut kernel = Tensor::zeros(&[1, 1, 5, 1]);
    kernel.data[2] = 1.0;
    let mut g = Graph::new();
    let (xv, kv) = (g.input(input.clone()), g.input(kernel));
    let y = g.conv_time(xv, kv).map_err(|e| e.to_string())?;
    check(g.value(y) == &input, || "delta convolution changed its input".into())?;
    Ok(format!("lstm err {lstm_err:.1e}, attention err {att_err:.1e}, delta conv exact"))
}

fn pipeline_properties() -> Outcome {
    let start = Instant::now();
    let spec = SyntheticSpec {
        n_tracks: 300,
        tracks_per_recording: 150,
        recording_duration_s: 40.0,
        seed: 21,
        ..SyntheticSpec::default()
    };
    let corpus = synthesize(&spec).map_err(|e| e.to_string())?;
    let recs = &corpus.recordings;
    let mut instants = HashMap::new();
    for rec in recs {
        for t in &rec.tracks {
            let lcs = detect_lc_instants(t).map_err(|e| e.to_string())?;
            instants.insert((rec.meta.recording_id, t.track_id), lcs);
        }
    }
    let fps = spec.frame_rate_hz;
    let mut segments_seen = 0;
    for cell in parse_grid("1,2,3x3,4,5,6").map_err(|e| e.to_string())? {
        let cfg = DatasetConfig::new(cell.obs_window_s, cell.max_pred_time_s, 5).map_err(|e| e.to_string())?;
        let segments = extract_segments(recs, &cfg).map_err(|e| e.to_string())?;
        segments_seen += segments.len();
        for s in &segments {
            let lcs = &instants[&(s.recording_id, s.track_id)];
            check(!lcs.iter().any(|lc| s.contains_frame(lc.frame)), || {
                format!("segment {s:?} contains an LC instant")
            })?;
            if let Some(dt) = s.prediction_time_s {
                let lc_frame = s.end_frame + seconds_to_frames(dt, fps);
                check(lcs.iter().any(|lc| lc.frame == lc_frame && Label::from(lc.maneuver) == s.label), || {
                    format!("LC segment {s:?} does not end round(dt*f) before its instant")
                })?;
            }
        }
        let balanced = balance_classes(segments, &mut rng::stream(cfg.seed, &[tag::BALANCE]));
        let c = ClassCounts::of(&balanced);
        check(c.lk == c.llc + c.rlc, || format!("{cell:?}: unbalanced {c:?}"))?;
        let ds = build_dataset(recs, &cfg).map_err(|e| e.to_string())?;
        let total = ds.train.len() + ds.val.len() + ds.test.len();
        check(ds.sizes() == split_sizes(total), || format!("{cell:?}: split {:?} of {total}", ds.sizes()))?;
        check(total >= 10, || format!("{cell:?}: only {total} samples"))?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
        write_manifest(&a, &ds).map_err(|e| e.to_string())?;
        let again = build_dataset(recs, &cfg).map_err(|e| e.to_string())?;
        write_manifest(&b, &again).map_err(|e| e.to_string())?;
        let same = std::fs::read(&a).map_err(|e| e.to_string())? == std::fs::read(&b).map_err(|e| e.to_string())?;
        check(same, || format!("{cell:?}: manifests differ between runs"))?;
    }
    within(PIPELINE_BUDGET, start.elapsed(), "pipeline checks")?;
    Ok(format!(
        "300 tracks, 12 cells, {segments_seen} segments checked, {:.1?}",
        start.elapsed()
    ))
}

fn balancing_arithmetic() -> Outcome {
    // (Δt_o, Δt_p,MAX, LK, LLC, RLC) as published.
    let table = [
        (1, 3, 9517, 4276, 5241),
        (2, 3, 8412, 3773, 4639),
        (3, 3, 7261, 3293, 3968),
        (1, 4, 8412, 3773, 4639),
        (2, 4, 7261, 3298, 3968),
        (3, 4, 6099, 2781, 3318),
        (1, 5, 7261, 3293, 3968),
        (2, 5, 6099, 2781, 3318),
        (3, 5, 4927, 2299, 2628),
        (1, 6, 6099, 2781, 3318),
        (2, 6, 4927, 2299, 2628),
        (3, 6, 3835, 1820, 2015),
    ];
    let mismatches: Vec<String> = table
        .iter()
        .filter_map(|&(o, p, lk, llc, rlc)| {
            // Plenty of raw LK windows, as in the real data.
            let got = balanced_lk_count(ClassCounts {
                lk: 10 * (llc + rlc),
                llc,
                rlc,
            });
            (got != lk).then(|| format!("({o} s, {p} s): balanced LK {got}, table {lk}"))
        })
        .collect();
    if mismatches.is_empty() {
        Ok("12/12 cells".into())
    } else {
        Err(format!("{}/12 cells; {}", 12 - mismatches.len(), mismatches.join("; ")))
    }
}

fn learning_sanity() -> Outcome {
    let spec = SyntheticSpec {
        seed: 1,
        ..SyntheticSpec::default()
    };
    let corpus = synthesize(&spec).map_err(|e| e.to_string())?;
    let cfg = DatasetConfig::new(2.0, 3.0, 1).map_err(|e| e.to_string())?;
    let cell = prepare_cell(&corpus.recordings, &cfg).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    // One worker: the budget is for a single desktop core.
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    let mut failures = Vec::new();
    for name in ["lstm2", "cnn3", "tn2"] {
        let start = Instant::now();
        let out = pool
            .install(|| run_cell(&cell, name, &tc, 1, DEFAULT_BIN_WIDTH_S))
            .map_err(|e| format!("{name}: {e}"))?;
        let elapsed = start.elapsed();
        let r = &out.report;
        summary.push(format!("{name} {:.2}% ({} ep, {:.0?})", r.acc, r.epochs_run, elapsed));
        if r.acc < LEARN_MIN_ACC || elapsed > LEARN_BUDGET {
            failures.push(format!("{name}: {:.2}% in {elapsed:.0?}", r.acc));
        }
    }
    let toy = generate_separable_toy(100, 10, 9);
    let toy_tc = TrainConfig {
        batch_size: 32,
        max_epochs: 50,
        patience: 50,
        seed: 2,
        lr: Some(1e-2),
        weight_decay: None,
    };
    let mut model = Model::from_name("lstm2", 10, FEATURE_COUNT, 3).map_err(|e| e.to_string())?;
    train(&mut model, &toy, &[], &toy_tc).map_err(|e| e.to_string())?;
    let toy_acc = accuracy(&evaluate(&model, &toy).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    summary.push(format!("toy {toy_acc:.2}%"));
    if toy_acc < TOY_MIN_ACC {
        failures.push(format!("toy: {toy_acc:.2}%"));
    }
    let sizes = cell.sizes();
    let line = format!(
        "split {}/{}/{}; {}",
        sizes.train,
        sizes.val,
        sizes.test,
        summary.join(", ")
    );
    if failures.is_empty() {
        Ok(line)
    } else {
        Err(format!("{line}; below {LEARN_MIN_ACC}% or over budget: {}", failures.join(", ")))
    }
}

fn histogram_conservation() -> Outcome {
    let spec = SyntheticSpec {
        n_tracks: 240,
        tracks_per_recording: 120,
        recording_duration_s: 40.0,
        seed: 8,
        ..SyntheticSpec::default()
    };
    let corpus = synthesize(&spec).map_err(|e| e.to_string())?;
    let mut evaluations = 0;
    for (p, name) in [(3.0, "lstm3"), (4.0, "cnn3"), (6.0, "tn1")] {
        let cfg = DatasetConfig::new(1.0, p, 4).map_err(|e| e.to_string())?;
        let cell = prepare_cell(&corpus.recordings, &cfg).map_err(|e| e.to_string())?;
        let mut model = Model::from_name(name, cell.rows(), FEATURE_COUNT, 6).map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            max_epochs: 3,
            seed: 2,
            ..TrainConfig::default()
        };
        train(&mut model, &cell.normalized(Split::Train), &cell.normalized(Split::Val), &tc)
            .map_err(|e| e.to_string())?;
        for split in Split::ALL {
            let results = evaluate_samples(&model, &cell.normalized(split)).map_err(|e| e.to_string())?;
            let cm = confusion_of(&results);
            for width in [DEFAULT_BIN_WIDTH_S, 0.4, 1.0] {
                let h = prediction_time_histogram(&results, p, width).map_err(|e| e.to_string())?;
                check(h.correct() == cm.correct_lane_changes(), || {
                    format!("{name} {split:?} width {width}: {} vs E+I {}", h.correct(), cm.correct_lane_changes())
                })?;
                check(
                    h.correct_counts.iter().zip(&h.total_counts).all(|(c, t)| c <= t),
                    || format!("{name} {split:?}: a bin has more correct than total"),
                )?;
                let lc = (cm.row_total(1) + cm.row_total(2)) as u64;
                check(h.total() == lc, || format!("{name} {split:?}: {} binned of {lc} LC", h.total()))?;
                evaluations += 1;
            }
        }
    }
    Ok(format!("{evaluations} histograms conserve E+I"))
}

fn positional_encoding_spots() -> Outcome {
    let pe = positional_encoding(4, 8);
    let at = |i: usize, j: usize| pe.data[(i - 1) * 8 + (j - 1)];
    check(at(1, 1) == 0.0, || format!("pe[1][1] = {}", at(1, 1)))?;
    check(at(1, 2) == 1.0, || format!("pe[1][2] = {}", at(1, 2)))?;
    let err = (at(2, 1) - 1f64.sin()).abs();
    check(err <= PE_TOL, || format!("pe[2][1] = {}", at(2, 1)))?;
    let base_1000 = (at(2, 3) - (1.0 / 1000f64.powf(2.0 / 8.0)).sin()).abs();
    check(base_1000 <= PE_TOL, || format!("pe[2][3] = {} does not use base 1000", at(2, 3)))?;
    Ok(format!("pe[1][1]=0, pe[1][2]=1, |pe[2][1]-sin 1|={err:.1e}, base 1000"))
}

fn determinism() -> Outcome {
    let spec = SyntheticSpec {
        n_tracks: 120,
        tracks_per_recording: 60,
        recording_duration_s: 30.0,
        seed: 13,
        ..SyntheticSpec::default()
    };
    let corpus = synthesize(&spec).map_err(|e| e.to_string())?;
    let mut cfg = SweepConfig::new(
        vec!["lstm2".into(), "cnn3".into(), "tn1".into()],
        parse_grid("1,2x3,4").map_err(|e| e.to_string())?,
        17,
    );
    cfg.train.max_epochs = 2;
    cfg.workers = 4;
    let run = || -> Result<String, String> {
        let reports = sweep(&corpus.recordings, &cfg).map_err(|e| e.to_string())?;
        serde_json::to_string_pretty(&reports).map_err(|e| e.to_string())
    };
    let (a, b) = (run()?, run()?);
    check(a == b, || "two sweeps with the same seed differ".into())?;
    Ok(format!("12 reports, {} identical JSON bytes", a.len()))
}

type Check = (&'static str, fn() -> Outcome);

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let checks: [Check; 9] = [
        ("metric_oracle", metric_oracle),
        ("gradient_correctness", gradient_correctness),
        ("forward_oracles", forward_oracles),
        ("pipeline_properties", pipeline_properties),
        ("balancing_arithmetic", balancing_arithmetic),
        ("learning_sanity", learning_sanity),
        ("histogram_conservation", histogram_conservation),
        ("positional_encoding", positional_encoding_spots),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in checks {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
