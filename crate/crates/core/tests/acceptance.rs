//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use cpmn::ccm::{compute_tcas, erase_features, make_mask, CcmHyper, CcmTrainer};
use cpmn::data::{generate_synthetic, GtSegment, Modality, SyntheticSpec, VideoRecord};
use cpmn::eval::{average_precision, evaluate, IoUThresholds, ScoredInterval};
use cpmn::interval::Interval;
use cpmn::localization::{extract_runs, nms, Detection, DetectionSet, Proposal};
use cpmn::nn::{global_avg_pool, Dense, LrSchedule};
use cpmn::pam::{assemble_heatmap, pam_forward, plan_windows, upsample_repeat, LabelMapSet, PamParams};
use cpmn::pipeline::{component_rows, detections_json, evaluate_models, paired_segment_benchmark, train, RunConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADIENT_TOL: f64 = 1e-4;
const GRADIENT_CONFIGS: usize = 50;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const IDENTITY_PAIRS: usize = 1000;
const IDENTITY_TOL: f64 = 1e-6;
const RUN_VECTORS: usize = 1000;
const NMS_MAX_SET: usize = 8;
const AP_BENCHES: usize = 100;
const AP_TOL: f64 = 1e-9;
const END_TO_END_MAP: f64 = 0.90;
const END_TO_END_BUDGET: Duration = Duration::from_secs(600);
const ABLATION_SEEDS: u64 = 5;
const ABLATION_MAJORITY: usize = 3;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut redrawn = 0;
    for _ in 0..GRADIENT_CONFIGS {
        let (dim, width, classes) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=4));
        let lambda = r.random_range(0.0..0.01);
        // central differences are meaningless across a ReLU kink
        let (p, x) = loop {
            let len = r.random_range(3..=32);
            let p = ccm_params(&mut r, dim, width, classes);
            let x = random_map(&mut r, len, dim);
            if ccm_clear_of_kinks(&p, &x) {
                break (p, x);
            }
            redrawn += 1;
        };
        let y = random_labels(&mut r, classes);
        let g = ccm_gradient(&p, &x, &y, lambda);
        worst = worst.max(max_fd_error(&p, &g, |q| ccm_objective(q, &x, &y, lambda)));

        let len = 8 * r.random_range(1..=4);
        let p = pam_params(&mut r, dim, width, classes);
        let x = random_map(&mut r, len, dim);
        let g = pam_gradient(&p, &x, &y, lambda);
        worst = worst.max(max_fd_error(&p, &g, |q| pam_objective(q, &x, &y, lambda)));
    }
    let took = start.elapsed();
    check!(worst < GRADIENT_TOL, "worst relative error {worst:.3e}");
    check!(took < GRADIENT_BUDGET, "took {took:.1?}");
    Ok(format!("{GRADIENT_CONFIGS}+{GRADIENT_CONFIGS} configs ({redrawn} redrawn near a kink), worst {worst:.2e}, {took:.1?}"))
}

fn class_sum_identity() -> Outcome {
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for _ in 0..IDENTITY_PAIRS {
        let len = r.random_range(1..=64);
        let width = r.random_range(1..=16);
        let classes = r.random_range(1..=6);
        let mut z = random_map(&mut r, len, width);
        z.map_inplace(f64::abs);
        let dense = Dense::xavier(&mut r, width, classes);
        let m = compute_tcas(&z, &dense).map_err(|e| e.to_string())?;
        let logits = dense.forward(&global_avg_pool(&z)).map_err(|e| e.to_string())?;
        for (c, &s) in logits.iter().enumerate() {
            let total: f64 = m.column(c).iter().sum();
            let err = (total - len as f64 * s).abs() / len as f64;
            worst = worst.max(err);
        }
    }
    check!(worst <= IDENTITY_TOL, "worst error {worst:.3e} per unit");
    Ok(format!("{IDENTITY_PAIRS} pairs, worst {worst:.2e} per unit"))
}

fn erasure_mechanics() -> Outcome {
    let mut r = rng(3);
    for _ in 0..500 {
        let len = r.random_range(1..=40);
        let classes = r.random_range(1..=4);
        let m = random_map(&mut r, len, classes);
        let x = random_map(&mut r, len, 6);
        let all: Vec<usize> = (0..classes).collect();
        let mut zetas = [r.random_range(0.01..0.99), r.random_range(0.01..0.99)];
        zetas.sort_by(f64::total_cmp);
        let loose = make_mask(&m, zetas[0], &all, true).unwrap();
        let tight = make_mask(&m, zetas[1], &all, true).unwrap();
        check!(tight.is_subset_of(&loose), "mask grew when raising the threshold");
        let once = erase_features(&x, &loose).unwrap();
        check!(erase_features(&once, &loose).unwrap() == once, "erasure not idempotent");
        for t in 0..len {
            let kept = once.row(t).iter().zip(x.row(t)).all(|(a, b)| a.to_bits() == b.to_bits());
            let zeroed = once.row(t).iter().all(|&v| v == 0.0);
            check!(if loose.fires(t) { zeroed } else { kept }, "unit {t} altered wrongly");
        }
    }

    let spec = SyntheticSpec { train_videos: 12, test_videos: 1, ..Default::default() };
    let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let videos = data.train.weak();
    let hyper = CcmHyper { width: 16, schedule: LrSchedule::constant(5, 0.01), seed: 5, ..Default::default() };
    let mut both = CcmTrainer::new(hyper.clone(), Modality::Rgb, spec.feature_dim, spec.num_classes).unwrap();
    let mut alone = CcmTrainer::new(hyper, Modality::Rgb, spec.feature_dim, spec.num_classes).unwrap();
    alone.train_stage_b = false;
    for _ in 0..5 {
        let a = both.run_epoch(&videos).map_err(|e| e.to_string())?;
        let b = alone.run_epoch(&videos).map_err(|e| e.to_string())?;
        check!(a.loss_a.to_bits() == b.loss_a.to_bits(), "stage A loss diverged at epoch {}", a.epoch);
        check!(both.model.stage_a == alone.model.stage_a, "stage A weights diverged at epoch {}", a.epoch);
    }
    Ok("500 masks, 5 epochs with and without stage B".into())
}

fn pyramid_laws() -> Outcome {
    let mut r = rng(4);
    for _ in 0..200 {
        let window = 8 * r.random_range(1..=16);
        let units = r.random_range(1..=300);
        let classes = r.random_range(1..=4);
        let p = PamParams::xavier(&mut r, 4, 4, classes);
        let x = random_map(&mut r, units, 4);
        let plan = plan_windows(units, window).map_err(|e| e.to_string())?;
        let mut sets: Vec<LabelMapSet> = Vec::new();
        for w in &plan.windows {
            let fwd = pam_forward(&x.window(w.start, w.end), &p).map_err(|e| e.to_string())?;
            let lens: Vec<usize> = fwd.label_maps.iter().map(|m| m.len()).collect();
            check!(lens == [window, window / 2, window / 4, window / 8], "level lengths {lens:?} for window {window}");
            for (l, map) in fwd.label_maps.iter().enumerate() {
                let up = upsample_repeat(map, 1 << l, window).map_err(|e| e.to_string())?;
                check!(up.len() == window, "level {l} upsampled to {}", up.len());
            }
            sets.push(fwd.label_map_set(w.start));
        }
        let h = assemble_heatmap(&sets, &plan, Modality::Rgb).map_err(|e| e.to_string())?;
        for c in 0..classes {
            let col = h.values.column(c);
            check!(col.iter().all(|v| (0.0..=1.0).contains(v)), "heatmap outside [0, 1]");
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let constant = col.iter().all(|&v| v == 0.0);
            check!(constant || (lo == 0.0 && hi == 1.0), "extremes {lo} and {hi}");
        }
    }
    Ok("200 random videos".into())
}

fn proposal(r: &mut ChaCha8Rng) -> Proposal {
    let start = r.random_range(0..24);
    let conf = r.random_range(0..5) as f64 / 4.0;
    Proposal {
        interval: Interval::new(start, start + r.random_range(0..10)),
        class: r.random_range(0..2),
        p_act: conf,
        p_class: 1.0,
        p_conf: conf,
        modality: Modality::Rgb,
    }
}

fn random_records(r: &mut ChaCha8Rng, videos: usize, classes: usize) -> Vec<VideoRecord> {
    (0..videos)
        .map(|v| {
            let segs: Vec<GtSegment> = (0..r.random_range(1..4))
                .map(|_| {
                    let s = r.random_range(0..60);
                    GtSegment::new(s, s + r.random_range(0..12), r.random_range(0..classes))
                })
                .collect();
            let mut labels: Vec<usize> = segs.iter().map(|s| s.class).collect();
            labels.sort();
            labels.dedup();
            VideoRecord { video_id: format!("v{v}"), labels, segments: Some(segs) }
        })
        .collect()
}

fn localization_oracles() -> Outcome {
    let mut r = rng(5);
    for _ in 0..RUN_VECTORS {
        let len = r.random_range(1..=64);
        let values: Vec<f64> = (0..len).map(|_| r.random_range(0.0..1.0)).collect();
        let peak = values.iter().copied().fold(0.0, f64::max);
        let thr = 0.2 * peak;
        check!(extract_runs(&values, thr) == runs_by_scan(&values, thr), "runs differ on {values:?}");
    }

    let mut nms_sets = 0;
    for size in 0..=NMS_MAX_SET {
        for _ in 0..100 {
            let props: Vec<Proposal> = (0..size).map(|_| proposal(&mut r)).collect();
            let thr = r.random_range(0.0..1.0);
            let expected: Vec<Proposal> = nms_by_subsets(&props, thr).into_iter().map(|i| props[i]).collect();
            check!(nms(&props, thr) == expected, "suppression differs on a set of {size}");
            nms_sets += 1;
        }
    }

    let mut worst: f64 = 0.0;
    for _ in 0..AP_BENCHES {
        let classes = r.random_range(1..=3);
        let videos = r.random_range(1..=4);
        let truth = random_records(&mut r, videos, classes);
        let sets: Vec<DetectionSet> = truth
            .iter()
            .map(|rec| DetectionSet {
                video_id: rec.video_id.clone(),
                detections: (0..r.random_range(0..8))
                    .map(|_| {
                        let s = r.random_range(0..60);
                        let score = r.random_range(0.0..1.0);
                        Detection {
                            start_unit: s,
                            end_unit: s + r.random_range(0..12),
                            start_sec: 0.0,
                            end_sec: 0.0,
                            class: r.random_range(0..classes),
                            p_act: score,
                            p_class: 1.0,
                            p_conf: score,
                        }
                    })
                    .collect(),
                config_hash: None,
            })
            .collect();
        let thresholds = IoUThresholds::thumos();
        let report = evaluate(&sets, &truth, classes, &thresholds).map_err(|e| e.to_string())?;
        for (i, &alpha) in thresholds.values.iter().enumerate() {
            let mut aps = Vec::new();
            for c in 0..classes {
                let gts: Vec<Vec<Interval>> = truth
                    .iter()
                    .map(|rec| {
                        rec.segments.iter().flatten().filter(|s| s.class == c).map(|s| Interval::new(s.start, s.end)).collect()
                    })
                    .collect();
                let dets: Vec<(usize, Interval, f64)> = sets
                    .iter()
                    .enumerate()
                    .flat_map(|(v, set)| {
                        set.detections
                            .iter()
                            .filter(|d| d.class == c)
                            .map(move |d| (v, Interval::new(d.start_unit, d.end_unit), d.p_conf))
                    })
                    .collect();
                let expected = brute_ap(&dets, &gts, alpha);
                let scored: Vec<ScoredInterval> =
                    dets.iter().map(|&(video, interval, score)| ScoredInterval { video, interval, score }).collect();
                let got = average_precision(&scored, &gts, alpha);
                match (got, expected) {
                    (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
                    (None, None) => {}
                    _ => return Err(format!("class {c} skipped on one side only")),
                }
                let reported = report.classes[c].ap.as_ref().map(|v| v[i]);
                check!(reported == got, "report AP {reported:?} vs direct {got:?}");
                aps.extend(expected);
            }
            if !aps.is_empty() {
                let map = aps.iter().sum::<f64>() / aps.len() as f64;
                worst = worst.max((report.map[i] - map).abs());
            }
        }
    }
    check!(worst < AP_TOL, "worst AP error {worst:.3e}");
    Ok(format!("{RUN_VECTORS} vectors, {nms_sets} suppression sets, {AP_BENCHES} AP benches (worst {worst:.1e})"))
}

struct EndToEnd {
    map_at_05: f64,
    took: Duration,
    json: String,
}

fn end_to_end_run() -> Result<EndToEnd, String> {
    let start = Instant::now();
    let spec = SyntheticSpec::default();
    let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let config = RunConfig::desk(spec.seed);
    let (models, _) = train(&config, &data.train).map_err(|e| e.to_string())?;
    let thresholds = IoUThresholds::new(vec![0.5]).map_err(|e| e.to_string())?;
    let (results, report) =
        evaluate_models(&models, &config, config.components, &data.test, &thresholds).map_err(|e| e.to_string())?;
    Ok(EndToEnd {
        map_at_05: report.map[0],
        took: start.elapsed(),
        json: detections_json(&results).map_err(|e| e.to_string())?,
    })
}

static FIRST_RUN: OnceLock<Result<EndToEnd, String>> = OnceLock::new();

fn first_run() -> Result<&'static EndToEnd, String> {
    FIRST_RUN.get_or_init(end_to_end_run).as_ref().map_err(Clone::clone)
}

fn end_to_end() -> Outcome {
    let run = first_run()?;
    check!(run.map_at_05 >= END_TO_END_MAP, "mAP@0.5 {:.3}", run.map_at_05);
    check!(run.took < END_TO_END_BUDGET, "took {:.1?}", run.took);
    Ok(format!("mAP@0.5 {:.3} in {:.1?}", run.map_at_05, run.took))
}

fn ablation_direction() -> Outcome {
    let mut held = 0;
    let mut lines = Vec::new();
    for seed in 0..ABLATION_SEEDS {
        let (spec, config) = paired_segment_benchmark(seed);
        let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
        let (models, _) = train(&config, &data.train).map_err(|e| e.to_string())?;
        let rows = component_rows(&models, &config, &data.test).map_err(|e| e.to_string())?;
        let maps: Vec<f64> = rows.iter().map(|row| row.map_at_05).collect();
        let ordered = maps.windows(2).all(|w| w[0] <= w[1]);
        held += ordered as usize;
        lines.push(format!("seed {seed}: {:.3}/{:.3}/{:.3}", maps[0], maps[1], maps[2]));
    }
    let detail = format!("ordering held on {held}/{ABLATION_SEEDS} [{}]", lines.join(", "));
    check!(held >= ABLATION_MAJORITY, "{detail}");
    Ok(detail)
}

fn determinism() -> Outcome {
    let first = first_run()?;
    let second = end_to_end_run()?;
    check!(first.json.as_bytes() == second.json.as_bytes(), "detection JSON differs between runs");
    Ok(format!("{} bytes identical", first.json.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradients),
        ("class-sum identity", class_sum_identity),
        ("erasure mechanics", erasure_mechanics),
        ("pyramid laws", pyramid_laws),
        ("localization oracles", localization_oracles),
        ("end-to-end synthetic", end_to_end),
        ("ablation direction", ablation_direction),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {}. {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
