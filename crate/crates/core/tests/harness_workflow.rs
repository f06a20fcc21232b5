use std::path::Path;

use vepe::config::{AttentionConfig, RunConfig, Split};
use vepe::harness::{self, HarnessError, Manifest, SweepTable, TrainRequest, OVERLAY_JOINT};
use vepe::metrics::PosePrediction;
use vepe::synth::{generate_clip, generate_scene};
use vepe::train::{EvalMode, Mode};

fn tiny(seed: u64) -> RunConfig {
    let mut c = RunConfig::bench();
    c.seed = seed;
    c.model.queries = 8;
    c.model.backbone_channels = [8, 8, 12, 16];
    c.model.attention = AttentionConfig { d_model: 16, heads: 2, levels: 3, points: 2, frames: 3, ffn_width: 24 };
    c.temporal.min_keep = 2;
    c.optim.batch_size = 3;
    c.optim.epochs = 2;
    c
}

fn train(cfg: &RunConfig, data: &Path, out: &Path, mode: Mode, init: Option<&Path>) -> Result<harness::TrainSummary, HarnessError> {
    let req = TrainRequest { data_dir: data, out_ckpt: out, mode, init, val_dir: None };
    harness::cmd_train(cfg, &req, |_| {})
}

#[test]
fn zero_count_writes_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = harness::cmd_generate(&tiny(1), 0, dir.path(), &[Split::Clean]).unwrap();
    assert!(m.entries.is_empty());
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec![std::ffi::OsString::from(harness::MANIFEST_FILE)]);
    assert!(harness::load_dataset(dir.path()).unwrap().is_empty());
}

#[test]
fn generation_is_a_function_of_the_seed() {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let splits = [Split::Clean, Split::Fast, Split::Occlusion, Split::Blur];
    for (d, seed) in dirs.iter().zip([4, 4, 5]) {
        harness::cmd_generate(&tiny(seed), 5, d.path(), &splits).unwrap();
    }
    let manifest = |d: &tempfile::TempDir| std::fs::read(d.path().join(harness::MANIFEST_FILE)).unwrap();
    assert_eq!(manifest(&dirs[0]), manifest(&dirs[1]));
    assert_ne!(manifest(&dirs[0]), manifest(&dirs[2]));
    let m = harness::read_manifest(dirs[0].path()).unwrap();
    let got: Vec<Split> = m.entries.iter().map(|e| e.split).collect();
    assert_eq!(got, [Split::Clean, Split::Fast, Split::Occlusion, Split::Blur, Split::Clean]);
    assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
}

#[test]
fn tampered_clip_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = harness::cmd_generate(&tiny(2), 2, dir.path(), &[Split::Clean]).unwrap();
    let path = dir.path().join(&m.entries[1].file);
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(harness::load_dataset(dir.path()), Err(HarnessError::Manifest { .. })));
}

#[test]
fn temporal_training_requires_a_starting_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(3);
    harness::cmd_generate(&cfg, 1, dir.path(), &[Split::Clean]).unwrap();
    let err = train(&cfg, dir.path(), &dir.path().join("t.ckpt"), Mode::Temporal, None).err().unwrap();
    assert!(matches!(err, HarnessError::Usage(_)));
}

#[test]
fn mismatched_image_size_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut small = tiny(3);
    small.synth.image_size = 32;
    small.model.image_size = 32;
    harness::cmd_generate(&small, 1, dir.path(), &[Split::Clean]).unwrap();
    let err = train(&tiny(3), dir.path(), &dir.path().join("s.ckpt"), Mode::Spatial, None).err().unwrap();
    assert!(matches!(err, HarnessError::Usage(_)));
}

/// Spatial then temporal training on two clean clips; shared by the tests below.
struct Trained {
    dir: tempfile::TempDir,
    cfg: RunConfig,
}

impl Trained {
    fn new(seed: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny(seed);
        harness::cmd_generate(&cfg, 2, &dir.path().join("data"), &[Split::Clean]).unwrap();
        let data = dir.path().join("data");
        let s = train(&cfg, &data, &dir.path().join("spatial.ckpt"), Mode::Spatial, None).unwrap();
        assert_eq!(s.records.len(), 2);
        let init = dir.path().join("spatial.ckpt");
        train(&cfg, &data, &dir.path().join("temporal.ckpt"), Mode::Temporal, Some(&init)).unwrap();
        Self { dir, cfg }
    }

    fn path(&self, name: &str) -> std::path::PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints_logs_and_reports() {
    let (a, b) = (Trained::new(9), Trained::new(9));
    for name in ["spatial.ckpt", "spatial.log", "temporal.ckpt", "temporal.log"] {
        assert_eq!(std::fs::read(a.path(name)).unwrap(), std::fs::read(b.path(name)).unwrap(), "{name}");
    }
    for mode in [EvalMode::Spatial, EvalMode::Temporal] {
        let ra = harness::cmd_eval(&a.cfg, &a.path("temporal.ckpt"), &a.path("data"), mode).unwrap();
        let rb = harness::cmd_eval(&b.cfg, &b.path("temporal.ckpt"), &b.path("data"), mode).unwrap();
        assert_eq!(ra.to_text(), rb.to_text());
        // Evaluating again in the same process changes nothing either.
        let again = harness::cmd_eval(&a.cfg, &a.path("temporal.ckpt"), &a.path("data"), mode).unwrap();
        assert_eq!(ra.to_text(), again.to_text());
    }
}

#[test]
fn training_writes_a_loadable_checkpoint_and_a_log() {
    let t = Trained::new(10);
    harness::load_model(&t.cfg, &t.path("spatial.ckpt")).unwrap();
    harness::load_model(&t.cfg, &t.path("temporal.ckpt")).unwrap();
    let log = std::fs::read_to_string(t.path("spatial.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("mode=spatial clips=2 epochs=2 seed=10"));
    let loss = |l: &str| vepe::train::EpochRecord::parse(l).unwrap().loss;
    assert!(loss(lines[2]) < loss(lines[1]), "{log}");
}

#[test]
fn sweep_rows_follow_the_thresholds() {
    let t = Trained::new(11);
    let (ckpt, data) = (t.path("temporal.ckpt"), t.path("data"));
    let one = harness::cmd_sweep_threshold(&t.cfg, &ckpt, &data, &[0.3]).unwrap();
    assert_eq!(one.rows.len(), 1);

    let thresholds = [0.1, 0.2, 0.3, 0.4, 0.5];
    let table = harness::cmd_sweep_threshold(&t.cfg, &ckpt, &data, &thresholds).unwrap();
    let got: Vec<f64> = table.rows.iter().map(|r| r.threshold).collect();
    assert_eq!(got, thresholds);
    assert!(table.rows.windows(2).all(|w| w[1].retained <= w[0].retained));
    assert!(table.rows.iter().all(|r| (0.0..=1.0).contains(&r.map)));
    let text = table.to_text();
    assert!(text.starts_with(harness::SWEEP_HEADER));
    assert_eq!(SweepTable::parse(&text).unwrap().to_text(), text);
}

#[test]
fn single_frame_clips_evaluate_temporally() {
    let t = Trained::new(12);
    let mut cfg = t.cfg.clone();
    cfg.synth.frames = 1;
    let data = t.path("single");
    harness::cmd_generate(&cfg, 2, &data, &[Split::Clean]).unwrap();
    let report = harness::cmd_eval(&cfg, &t.path("temporal.ckpt"), &data, EvalMode::Temporal).unwrap();
    assert_eq!(report.frames, 2);
    assert!(report.mean.is_finite());
}

#[test]
fn inference_links_follow_the_similarity_argmax() {
    let t = Trained::new(13);
    let mut cfg = t.cfg.clone();
    cfg.synth.frames = 4;
    cfg.synth.persons_min = 2;
    let clip_dir = t.path("clip");
    harness::cmd_generate(&cfg, 1, &clip_dir, &[Split::Clean]).unwrap();
    let out_dir = t.path("infer");
    let out = harness::cmd_infer(&t.cfg, &t.path("temporal.ckpt"), &clip_dir.join("clip-00000.clip"), &out_dir).unwrap();
    assert_eq!(out.overlays.len(), 4);
    for f in &out.inference.frames {
        assert_eq!(f.links.len(), f.refs.len());
        for (links, sim) in f.links.iter().zip(&f.similarity) {
            for (row, &l) in links.iter().enumerate() {
                let r = sim.row(row);
                let best = (0..r.len()).fold(0, |b, j| if r[j] > r[b] { j } else { b });
                assert_eq!(l, best);
            }
        }
        let mut ids = f.track_ids.clone();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), f.track_ids.len(), "track ids repeat within a frame");
    }
    let poses = std::fs::read_to_string(&out.poses).unwrap();
    assert!(poses.starts_with(harness::POSES_HEADER));
    let diag = std::fs::read_to_string(&out.diagnostics).unwrap();
    assert!(diag.starts_with(harness::DIAG_HEADER));
    let ppm = std::fs::read(&out.overlays[0]).unwrap();
    assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(ppm.len(), "P6\n64 64\n255\n".len() + 64 * 64 * 3);
}

fn ground_truth_as_predictions(cfg: &RunConfig, seed: u64, score: f64) -> (vepe::synth::VideoClip, Vec<PosePrediction>) {
    let clip = generate_clip(&cfg.synth, seed);
    let preds = clip.annotations[0].iter().map(|a| PosePrediction { keypoints: a.keypoints, score }).collect();
    (clip, preds)
}

#[test]
fn overlays_skip_low_scores_and_empty_frames() {
    let cfg = tiny(0);
    let (clip, low) = ground_truth_as_predictions(&cfg, 3, harness::OVERLAY_MIN_SCORE - 1e-9);
    let frame = &clip.frames[0];
    assert_eq!(&harness::draw_overlay(frame, 64, 64, &[]), frame);
    assert_eq!(&harness::draw_overlay(frame, 64, 64, &low), frame);
    let mut empty = cfg.synth.clone();
    empty.persons_min = 0;
    empty.persons_max = 0;
    let (clip, preds) = ground_truth_as_predictions(&RunConfig { synth: empty, ..cfg }, 3, 1.0);
    assert!(preds.is_empty());
    assert_eq!(harness::draw_overlay(&clip.frames[0], 64, 64, &preds), clip.frames[0]);
}

/// Centroid of pixels equal to `colour` within `radius` of pixel position `p`.
fn colour_centroid(img: &[u8], size: usize, p: [f64; 2], radius: i64, colour: [u8; 3]) -> Option<[f64; 2]> {
    let (cx, cy) = (p[0].floor() as i64, p[1].floor() as i64);
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in cy - radius..=cy + radius {
        for x in cx - radius..=cx + radius {
            if x < 0 || y < 0 || x >= size as i64 || y >= size as i64 {
                continue;
            }
            let i = (y as usize * size + x as usize) * 3;
            if img[i..i + 3] == colour {
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
                n += 1.0;
            }
        }
    }
    (n > 0.0).then(|| [sx / n, sy / n])
}

#[test]
fn overlay_markers_render_back_onto_their_keypoints() {
    let mut cfg = tiny(0);
    cfg.synth.persons_min = 1;
    cfg.synth.persons_max = 1;
    for seed in 0..10 {
        let (clip, preds) = ground_truth_as_predictions(&cfg, seed, 1.0);
        let img = harness::draw_overlay(&clip.frames[0], 64, 64, &preds);
        for (j, kp) in preds[0].keypoints.iter().enumerate() {
            let p = [kp[0] * 64.0, kp[1] * 64.0];
            let c = colour_centroid(&img, 64, p, 1, OVERLAY_JOINT).unwrap_or_else(|| panic!("seed {seed} joint {j}: no marker"));
            let err = ((c[0] - p[0]).powi(2) + (c[1] - p[1]).powi(2)).sqrt();
            assert!(err <= 1.0, "seed {seed} joint {j}: {err} px");
        }
    }
}

#[test]
fn synthetic_joint_markers_sit_on_their_annotations() {
    let mut synth = tiny(0).synth;
    synth.persons_min = 1;
    synth.persons_max = 3;
    for seed in 0..10 {
        let scene = generate_scene(&synth, seed);
        let full = scene.render(0, None);
        for (pi, person) in scene.persons.iter().enumerate() {
            for j in 0..vepe::skeleton::NUM_JOINTS {
                if !scene.visible(pi, 0, j) {
                    continue;
                }
                // The marker is whatever changes when it is left out.
                let without = scene.render(0, Some((pi, j)));
                let (mut sx, mut sy, mut w) = (0.0, 0.0, 0.0);
                for (i, (a, b)) in full.chunks(3).zip(without.chunks(3)).enumerate() {
                    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
                    sx += d * ((i % scene.size) as f64 + 0.5);
                    sy += d * ((i / scene.size) as f64 + 0.5);
                    w += d;
                }
                if w == 0.0 {
                    continue;
                }
                let p = person.poses[0][j];
                let err = ((sx / w - p[0]).powi(2) + (sy / w - p[1]).powi(2)).sqrt();
                assert!(err <= 1.0, "seed {seed} person {pi} joint {j}: {err} px");
            }
        }
    }
}
