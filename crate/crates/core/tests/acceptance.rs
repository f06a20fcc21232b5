//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 6, 7 and 9 train bench-scale models and take tens of minutes on
//! one core. A FAIL line is a measured result, not a harness error, so the
//! process still exits 0. It panics only when a check cannot run at all.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use common::attention::{random_setup, run_case};
use common::losses::{exhaustive_min, hinges, loss_of, random_triplets, Triplets};
use common::temporal::{input, random_frame, stage_with_zero_offsets};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vepe::config::{RunConfig, Split, TemporalConfig};
use vepe::gradsuite;
use vepe::harness::{self, SweepTable, TrainRequest};
use vepe::matching::hungarian_match;
use vepe::model::Vepe;
use vepe::synth::{generate_clip, VideoClip};
use vepe::temporal::FrameInput;
use vepe::train::{evaluate, link_accuracy, train, EvalMode, Mode};
use vepe_tensor::params::Ctx;
use vepe_tensor::Graph;

/// Bench protocol sizes.
const TRAIN_CLIPS: u64 = 1200;
const BENCH_CLIPS: u64 = 200;
const SPATIAL_EPOCHS: usize = 4;
const TEMPORAL_EPOCHS: usize = 6;
const TRACK_CLIPS: u64 = 300;
const TRACK_EVAL_CLIPS: u64 = 50;
const TRACK_EPOCHS: usize = 3;
const BENCH_SEED0: u64 = 20_000;
const TRACK_SEED0: u64 = 30_000;
const TRACK_EVAL_SEED0: u64 = 40_000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let cases = gradsuite::suite();
    let mut failed = Vec::new();
    let mut worst: f64 = 0.0;
    for case in &cases {
        match case.run() {
            Ok(r) => {
                worst = worst.max(r.max_rel_err() / case.tol);
                if !r.passed() {
                    failed.push(case.name);
                }
            }
            Err(_) => failed.push(case.name),
        }
    }
    let elapsed = start.elapsed();
    // The deliberately wrong backward must be caught, or the suite proves nothing.
    let fixture_caught = !gradsuite::corrupted_case().run().is_ok_and(|r| r.passed());
    verdict(
        failed.is_empty() && fixture_caught && elapsed < Duration::from_secs(300),
        format!(
            "{} cases, failed {:?}, worst error {:.1e} of tolerance, fixture caught {fixture_caught}, {:.1}s",
            cases.len(),
            failed,
            worst,
            elapsed.as_secs_f64()
        ),
    )
}

fn deformable_invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc2);
    let (mut worst_sum, mut worst_single): (f64, f64) = (0.0, 0.0);
    for case in 0..100 {
        let setup = random_setup(&mut rng);
        let r = run_case(&setup, 10_000 + case);
        let s = setup.frames * setup.cfg.levels * setup.cfg.points;
        for group in r.weights.chunks(s) {
            worst_sum = worst_sum.max((group.iter().sum::<f64>() - 1.0).abs());
        }
        let mut single = random_setup(&mut rng);
        single.frames = 1;
        let r = run_case(&single, 20_000 + case);
        worst_single = worst_single.max(r.out.iter().zip(&r.oracle_out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    verdict(worst_sum <= 1e-12 && worst_single <= 1e-12, format!("100 configs, max |sum-1| {worst_sum:.1e}, max T=1 deviation {worst_single:.1e}"))
}

fn matching_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc3);
    let mut mismatches = 0;
    for _ in 0..500 {
        let (rows, cols) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.0..10.0)).collect();
        let got = hungarian_match(&cost, rows, cols).total_cost(&cost, cols);
        if (got - exhaustive_min(&cost, rows, cols)).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("500 matrices up to 8x8, {mismatches} mismatches"))
}

fn zero_offset_fixed_point() -> Verdict {
    let cfg = TemporalConfig { min_keep: 2, ..TemporalConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc4);
    let mut moved = 0;
    let mut layers = 0;
    for seed in 0..20 {
        let (store, stage) = stage_with_zero_offsets(seed, &cfg);
        let frames: Vec<_> = (0..3).map(|_| random_frame(&mut rng, stage.attention.d_model)).collect();
        let mut g = Graph::new();
        let inputs: Vec<FrameInput> = frames.iter().map(|f| input(&mut g, f)).collect();
        let mut ctx = Ctx::new(&mut g, &store, false);
        let out = stage.forward(&mut ctx, &inputs[0], &inputs[1..], cfg.pqs_threshold, false).expect("temporal forward");
        for layer in &out.layers {
            layers += 1;
            let kp = g.value(layer.keypoints);
            moved += out.selected[0].iter().enumerate().filter(|&(r, &slot)| kp.row(r) != frames[0].keypoints.row(slot)).count();
        }
    }
    // A freshly built bench model on a real clip, through the public inference path.
    let model = Vepe::new(&RunConfig::bench()).expect("bench config");
    let clip = generate_clip(&RunConfig::bench().synth, 7);
    let cache = model.spatial_clip(&clip).expect("spatial pass");
    for t in 0..clip.len() {
        let p = model.temporal_frame(&cache, t, model.config.temporal.pqs_threshold).expect("temporal pass");
        for kp in &p.layer_keypoints {
            layers += 1;
            moved += p.selected[0].iter().enumerate().filter(|&(r, &slot)| kp.row(r) != cache[t].keypoints.row(slot)).count();
        }
    }
    let expected = 3 * (20 + clip.len());
    verdict(moved == 0 && layers == expected, format!("{layers} decoder layer outputs, {moved} keypoint rows moved"))
}

fn triplet_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xacc5);
    let (mut negative, mut zero_mismatch, mut scale_drift) = (0, 0, 0.0f64);
    let mut zeros = 0;
    for case in 0..1000 {
        let (rows, dim) = (1, rng.random_range(2..8));
        let margin = rng.random_range(0.0..1.0);
        let mut t = random_triplets(&mut rng, rows, dim);
        if case % 3 == 0 {
            // Positive along the anchor, negative opposite: the margin holds.
            let a = t.a.data().to_vec();
            t.p.data_mut().iter_mut().zip(&a).for_each(|(p, v)| *p = 3.0 * v);
            t.n.data_mut().iter_mut().zip(&a).for_each(|(n, v)| *n = -v);
        }
        let loss = loss_of(&t, margin);
        negative += (loss < 0.0) as usize;
        let satisfied = hinges(&t, margin).iter().all(|&h| h == 0.0);
        zeros += satisfied as usize;
        zero_mismatch += ((loss == 0.0) != satisfied) as usize;
        let mut scaled = Triplets { a: t.a.clone(), p: t.p.clone(), n: t.n.clone() };
        let which = rng.random_range(0..3);
        let s = rng.random_range(1e-3..1e3);
        [&mut scaled.a, &mut scaled.p, &mut scaled.n][which].data_mut().iter_mut().for_each(|v| *v *= s);
        scale_drift = scale_drift.max((loss_of(&scaled, margin) - loss).abs());
    }
    verdict(
        negative == 0 && zero_mismatch == 0 && scale_drift <= 1e-12 && zeros > 0,
        format!("1000 triplets, {negative} negative, {zero_mismatch} zero-iff violations ({zeros} satisfied), max scaling drift {scale_drift:.1e}"),
    )
}

fn mixed_clips(cfg: &RunConfig, seeds: std::ops::Range<u64>) -> Vec<VideoClip> {
    let splits = [Split::Occlusion, Split::Blur, Split::Fast];
    seeds.enumerate().map(|(i, s)| generate_clip(&cfg.synth.with_split(splits[i % 3]), s)).collect()
}

/// Models trained once for criteria 6 to 9.
struct Bench {
    bench: Vec<VideoClip>,
    baseline: f64,
    stpe_only: f64,
    full: f64,
    full_model: Vepe,
    spatial_ckpt: tempfile::NamedTempFile,
    elapsed: Duration,
}

fn with_variant(base: &RunConfig, full: bool) -> RunConfig {
    let mut c = base.clone();
    if !full {
        c.temporal.use_instance_mask = false;
        c.temporal.use_stdme = false;
        c.temporal.use_stpd = false;
        c.loss.ic = 0.0;
    }
    c
}

fn train_bench() -> Bench {
    let start = Instant::now();
    let cfg = RunConfig::bench();
    let clips = mixed_clips(&cfg, 0..TRAIN_CLIPS);
    let bench = mixed_clips(&cfg, BENCH_SEED0..BENCH_SEED0 + BENCH_CLIPS);
    let thr = cfg.temporal.pqs_threshold;

    let mut spatial = Vepe::new(&cfg).expect("bench config");
    train(&mut spatial, &clips, &[], Mode::Spatial, SPATIAL_EPOCHS, |r| eprintln!("  spatial {}", r.log_line())).expect("spatial training");
    let spatial_ckpt = tempfile::NamedTempFile::new().expect("temp file");
    spatial.save(spatial_ckpt.path()).expect("save spatial checkpoint");
    let baseline = evaluate(&spatial, &bench, EvalMode::Spatial, thr).expect("baseline eval").mean;
    drop(spatial);

    let temporal = |full: bool| {
        let mut m = Vepe::new(&with_variant(&cfg, full)).expect("variant config");
        m.load(spatial_ckpt.path()).expect("load spatial checkpoint");
        let name = if full { "full" } else { "stpe-only" };
        train(&mut m, &clips, &[], Mode::Temporal, TEMPORAL_EPOCHS, |r| eprintln!("  {name} {}", r.log_line())).expect("temporal training");
        let ap = evaluate(&m, &bench, EvalMode::Temporal, thr).expect("temporal eval").mean;
        (m, ap)
    };
    let (_, stpe_only) = temporal(false);
    let (full_model, full) = temporal(true);
    Bench { bench, baseline, stpe_only, full, full_model, spatial_ckpt, elapsed: start.elapsed() }
}

fn directional_ablation(b: &Bench) -> Verdict {
    let gain = 100.0 * (b.full - b.baseline);
    verdict(
        b.full > b.stpe_only && b.stpe_only > b.baseline && gain >= 3.0 && b.elapsed <= Duration::from_secs(7200),
        format!(
            "AP baseline {:.1}, stpe-only {:.1}, full {:.1} (full - baseline {gain:+.1} points) on {} clips, train+eval {:.0}s",
            100.0 * b.baseline,
            100.0 * b.stpe_only,
            100.0 * b.full,
            b.bench.len(),
            b.elapsed.as_secs_f64()
        ),
    )
}

fn threshold_sweep(b: &Bench) -> Verdict {
    let thresholds = [0.1, 0.2, 0.3, 0.4, 0.5];
    let table = harness::sweep_threshold(&b.full_model, &b.bench, &thresholds).expect("sweep");
    let text = table.to_text();
    let schema_ok = text.lines().nth(1) == Some("threshold mAP(%) retained")
        && SweepTable::parse(&text).is_ok_and(|t| t.rows.len() == thresholds.len() && t.rows.iter().zip(thresholds).all(|(r, th)| r.threshold == th));
    let map: Vec<f64> = table.rows.iter().map(|r| 100.0 * r.map).collect();
    let floor = map[0].min(map[4]) - 1.0;
    let interior_ok = map[1..4].iter().all(|&m| m >= floor);
    let cells: Vec<String> = table.rows.iter().map(|r| format!("{:.1}@{:.1} ({:.1} kept)", 100.0 * r.map, r.threshold, r.retained)).collect();
    verdict(schema_ok && interior_ok, format!("schema ok {schema_ok}, mAP {}", cells.join(" ")))
}

fn efficiency(b: &Bench) -> Verdict {
    let table = harness::probe_runtime(&b.full_model, &[2, 12], 7).expect("probe");
    let ratio = table.ratio();
    let cells: Vec<String> = table.rows.iter().map(|r| format!("{} persons {:.1}ms", r.instances, r.median_ms)).collect();
    verdict(ratio < 1.2, format!("{}, ratio {ratio:.3}", cells.join(", ")))
}

fn instance_tracking(b: &Bench) -> Verdict {
    let mut cfg = RunConfig::bench();
    cfg.synth.persons_min = 2;
    cfg.synth.persons_max = 2;
    let clips: Vec<VideoClip> = (TRACK_SEED0..TRACK_SEED0 + TRACK_CLIPS).map(|s| generate_clip(&cfg.synth, s)).collect();
    let held_out: Vec<VideoClip> = (TRACK_EVAL_SEED0..TRACK_EVAL_SEED0 + TRACK_EVAL_CLIPS).map(|s| generate_clip(&cfg.synth, s)).collect();
    let mut m = Vepe::new(&cfg).expect("tracking config");
    m.load(b.spatial_ckpt.path()).expect("load spatial checkpoint");
    train(&mut m, &clips, &[], Mode::Temporal, TRACK_EPOCHS, |r| eprintln!("  tracking {}", r.log_line())).expect("tracking training");
    let (correct, total) = link_accuracy(&m, &held_out, cfg.temporal.pqs_threshold).expect("link accuracy");
    let acc = correct as f64 / total.max(1) as f64;
    verdict(total > 0 && acc >= 0.9, format!("{correct}/{total} links agree ({:.1}%) on {} held-out 2-person clips", 100.0 * acc, held_out.len()))
}

fn tiny(seed: u64) -> RunConfig {
    let mut c = RunConfig::bench();
    c.seed = seed;
    c.model.queries = 10;
    c.model.backbone_channels = [8, 8, 12, 16];
    c.model.attention.d_model = 16;
    c.model.attention.heads = 2;
    c.model.attention.points = 2;
    c.model.attention.ffn_width = 24;
    c.temporal.min_keep = 2;
    c.optim.batch_size = 4;
    c.optim.epochs = 2;
    c
}

/// Every artifact of a generate/train/eval/sweep/infer pipeline, in order.
fn pipeline_artifacts(dir: &Path, cfg: &RunConfig) -> Vec<(String, Vec<u8>)> {
    let data = dir.join("data");
    harness::cmd_generate(cfg, 3, &data, &[Split::Clean, Split::Occlusion, Split::Fast]).expect("generate");
    let (sp, tp) = (dir.join("spatial.ckpt"), dir.join("temporal.ckpt"));
    let req = |out, mode, init| TrainRequest { data_dir: &data, out_ckpt: out, mode, init, val_dir: None };
    harness::cmd_train(cfg, &req(&sp, Mode::Spatial, None), |_| {}).expect("spatial train");
    harness::cmd_train(cfg, &req(&tp, Mode::Temporal, Some(&sp)), |_| {}).expect("temporal train");
    let mut out = Vec::new();
    for name in ["data/manifest.txt", "spatial.ckpt", "spatial.log", "temporal.ckpt", "temporal.log"] {
        out.push((name.to_string(), std::fs::read(dir.join(name)).expect("artifact")));
    }
    let report = harness::cmd_eval(cfg, &tp, &data, EvalMode::Temporal).expect("eval").to_text();
    out.push(("report".into(), report.into_bytes()));
    let sweep = harness::cmd_sweep_threshold(cfg, &tp, &data, &[0.1, 0.3, 0.5]).expect("sweep").to_text();
    out.push(("sweep".into(), sweep.into_bytes()));
    let inf = harness::cmd_infer(cfg, &tp, &data.join("clip-00000.clip"), &dir.join("infer")).expect("infer");
    for p in inf.overlays.iter().chain([&inf.poses, &inf.diagnostics]) {
        out.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).expect("inference artifact")));
    }
    out
}

fn determinism() -> Verdict {
    let cfg = tiny(0xacc10);
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().expect("temp dir");
            pipeline_artifacts(dir.path(), &cfg)
        })
        .collect();
    let differing: Vec<&str> = runs[0].iter().zip(&runs[1]).filter(|(a, b)| a != b).map(|(a, _)| a.0.as_str()).collect();
    let other = pipeline_artifacts(tempfile::tempdir().expect("temp dir").path(), &tiny(0xacc11));
    let seed_matters = other.iter().zip(&runs[0]).any(|(a, b)| a.0.ends_with(".ckpt") && a != b);
    verdict(
        differing.is_empty() && seed_matters,
        format!("{} artifacts compared, differing {:?}, different seed changes checkpoints {seed_matters}", runs[0].len(), differing),
    )
}

fn main() {
    let mut lines = Vec::new();
    let mut report = |id: usize, name: &str, v: Verdict| {
        let line = format!("{} {:>2} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, id, v.detail);
        println!("{line}");
        lines.push(line);
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "deformable attention invariants", deformable_invariants());
    report(3, "matching oracle", matching_oracle());
    report(4, "zero-offset fixed point", zero_offset_fixed_point());
    report(5, "triplet loss properties", triplet_properties());
    eprintln!("training bench models ({TRAIN_CLIPS} clips, {SPATIAL_EPOCHS}+{TEMPORAL_EPOCHS} epochs); this takes a while");
    let bench = train_bench();
    report(6, "directional ablation", directional_ablation(&bench));
    report(7, "threshold sweep", threshold_sweep(&bench));
    report(8, "efficiency", efficiency(&bench));
    report(9, "instance tracking", instance_tracking(&bench));
    report(10, "determinism", determinism());
    let passed = lines.iter().filter(|l| l.starts_with("PASS")).count();
    println!("acceptance: {passed}/{} criteria pass", lines.len());
}
