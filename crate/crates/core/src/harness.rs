//! Command implementations behind the CLI: dataset generation, training,
//! evaluation, threshold sweeps, inference with overlays, and the gradient suite.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use vepe_tensor::checkpoint::CheckpointError;
use vepe_tensor::TensorError;

use crate::clipfile::{load_clip, save_clip, ClipError};
use crate::config::{ConfigError, RunConfig, Split};
use crate::gradsuite;
use crate::metrics::{EvalReport, PosePrediction};
use crate::model::{CachedFrame, InstanceLinks, Vepe};
use crate::skeleton::LIMBS;
use crate::synth::{generate_clip, VideoClip};
use crate::train::{evaluate, train, EpochRecord, EvalMode, Mode};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_HEADER: &str = "VEPE-MANIFEST-1";
pub const SWEEP_HEADER: &str = "VEPE-SWEEP-1";
pub const POSES_HEADER: &str = "VEPE-POSES-1";
pub const DIAG_HEADER: &str = "VEPE-DIAG-1";
/// Predictions at or above this score are drawn on overlays.
pub const OVERLAY_MIN_SCORE: f64 = 0.5;
/// Environment variable that pins every command to one worker.
pub const DETERMINISTIC_ENV: &str = "VEPE_DETERMINISTIC";

const SEED_SALT: u64 = 0x636c_6970_7365_6564;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Clip { path: PathBuf, source: ClipError },
    #[error("checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

pub fn deterministic_mode() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| !v.is_empty() && v != "0")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Per-clip seeds derived from the config seed.
pub fn clip_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SEED_SALT);
    (0..count).map(|_| rng.next_u64()).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
    pub seed: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub config_sha256: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{MANIFEST_HEADER}").unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "config {}", self.config_sha256).unwrap();
        writeln!(s, "count {}", self.entries.len()).unwrap();
        for e in &self.entries {
            writeln!(s, "clip {} {} {} {}", e.file, e.split.name(), e.seed, e.sha256).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().enumerate();
        let mut next = |key: &str| -> Result<(usize, Vec<&str>), String> {
            let (n, line) = lines.next().ok_or_else(|| format!("missing `{key}` line"))?;
            let mut parts = line.split(' ');
            if parts.next() != Some(key) {
                return Err(format!("line {}: expected `{key}`", n + 1));
            }
            Ok((n + 1, parts.collect()))
        };
        let (_, rest) = next(MANIFEST_HEADER)?;
        if !rest.is_empty() {
            return Err("line 1: trailing text after header".into());
        }
        let field = |(n, f): (usize, Vec<&str>), want: usize| -> Result<Vec<String>, String> {
            if f.len() != want {
                return Err(format!("line {n}: expected {want} fields, found {}", f.len()));
            }
            Ok(f.into_iter().map(str::to_string).collect())
        };
        let seed = field(next("seed")?, 1)?[0].parse().map_err(|_| "bad seed".to_string())?;
        let config_sha256 = field(next("config")?, 1)?.remove(0);
        let count: usize = field(next("count")?, 1)?[0].parse().map_err(|_| "bad count".to_string())?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let (n, f) = next("clip")?;
            let f = field((n, f), 4)?;
            let split = Split::parse(&f[1]).ok_or_else(|| format!("line {n}: unknown split `{}`", f[1]))?;
            let seed = f[2].parse().map_err(|_| format!("line {n}: bad seed"))?;
            if f[0].is_empty() || f[0].contains(['/', '\\']) || f[0].starts_with('.') {
                return Err(format!("line {n}: clip file must be a plain name"));
            }
            if f[3].len() != 64 || !f[3].bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(format!("line {n}: bad digest"));
            }
            entries.push(ManifestEntry { file: f[0].clone(), split, seed, sha256: f[3].clone() });
        }
        if let Some((n, _)) = lines.next() {
            return Err(format!("line {}: trailing text", n + 1));
        }
        Ok(Self { seed, config_sha256, entries })
    }
}

pub fn config_digest(cfg: &RunConfig) -> String {
    sha256_hex(cfg.to_toml().as_bytes())
}

/// Writes `count` clips to `out_dir`, cycling through `splits`, plus a manifest.
pub fn cmd_generate(cfg: &RunConfig, count: usize, out_dir: &Path, splits: &[Split]) -> Result<Manifest, HarnessError> {
    cfg.validate()?;
    if splits.is_empty() {
        return Err(HarnessError::Usage("at least one split is required".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut entries = Vec::with_capacity(count);
    for (i, seed) in clip_seeds(cfg.seed, count).into_iter().enumerate() {
        let split = splits[i % splits.len()];
        let clip = generate_clip(&cfg.synth.with_split(split), seed);
        let file = format!("clip-{i:05}.clip");
        let path = out_dir.join(&file);
        save_clip(&clip, &path).map_err(|source| HarnessError::Clip { path: path.clone(), source })?;
        let bytes = std::fs::read(&path).map_err(io(&path))?;
        entries.push(ManifestEntry { file, split, seed, sha256: sha256_hex(&bytes) });
    }
    let manifest = Manifest { seed: cfg.seed, config_sha256: config_digest(cfg), entries };
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest.to_text()).map_err(io(&path))?;
    Ok(manifest)
}

pub fn read_manifest(data_dir: &Path) -> Result<Manifest, HarnessError> {
    let path = data_dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(io(&path))?;
    Manifest::parse(&text).map_err(|reason| HarnessError::Manifest { path, reason })
}

/// Loads every clip listed in the manifest, checking digests.
pub fn load_dataset(data_dir: &Path) -> Result<Vec<VideoClip>, HarnessError> {
    let manifest = read_manifest(data_dir)?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let path = data_dir.join(&e.file);
            let bytes = std::fs::read(&path).map_err(io(&path))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(HarnessError::Manifest { path: data_dir.join(MANIFEST_FILE), reason: format!("digest mismatch for {}", e.file) });
            }
            crate::clipfile::decode_clip(&bytes).map_err(|source| HarnessError::Clip { path, source })
        })
        .collect()
}

fn check_size(cfg: &RunConfig, clips: &[VideoClip]) -> Result<(), HarnessError> {
    match clips.iter().find(|c| c.width != cfg.model.image_size || c.height != cfg.model.image_size) {
        Some(c) => Err(HarnessError::Usage(format!(
            "clip {} is {}x{}, model expects {}x{}",
            c.clip_id, c.width, c.height, cfg.model.image_size, cfg.model.image_size
        ))),
        None => Ok(()),
    }
}

pub fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<Vepe, HarnessError> {
    let mut model = Vepe::new(cfg)?;
    model.load(ckpt).map_err(|source| HarnessError::Checkpoint { path: ckpt.to_path_buf(), source })?;
    Ok(model)
}

pub struct TrainRequest<'a> {
    pub data_dir: &'a Path,
    pub out_ckpt: &'a Path,
    pub mode: Mode,
    /// Starting weights; required for temporal mode.
    pub init: Option<&'a Path>,
    /// Clips evaluated after each epoch; the training set when absent.
    pub val_dir: Option<&'a Path>,
}

pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub log_path: PathBuf,
}

/// Trains for `cfg.optim.epochs` epochs, then writes the checkpoint and a log
/// next to it with one header line and one line per epoch.
pub fn cmd_train(cfg: &RunConfig, req: &TrainRequest, mut progress: impl FnMut(&EpochRecord)) -> Result<TrainSummary, HarnessError> {
    cfg.validate()?;
    let mut model = match (req.init, req.mode) {
        (Some(p), _) => load_model(cfg, p)?,
        (None, Mode::Temporal) => return Err(HarnessError::Usage("temporal mode needs a trained spatial checkpoint (--init)".into())),
        (None, _) => Vepe::new(cfg)?,
    };
    let clips = load_dataset(req.data_dir)?;
    check_size(cfg, &clips)?;
    let val = match req.val_dir {
        Some(d) => load_dataset(d)?,
        None => clips.clone(),
    };
    check_size(cfg, &val)?;
    let outcome = train(&mut model, &clips, &val, req.mode, cfg.optim.epochs, &mut progress)?;
    model.save(req.out_ckpt).map_err(|source| HarnessError::Checkpoint { path: req.out_ckpt.to_path_buf(), source })?;
    let mut log = format!("mode={} clips={} epochs={} seed={}\n", req.mode.name(), clips.len(), cfg.optim.epochs, cfg.seed);
    for r in &outcome.records {
        log.push_str(&r.log_line());
        log.push('\n');
    }
    let log_path = req.out_ckpt.with_extension("log");
    std::fs::write(&log_path, log).map_err(io(&log_path))?;
    Ok(TrainSummary { records: outcome.records, log_path })
}

pub fn cmd_eval(cfg: &RunConfig, ckpt: &Path, data_dir: &Path, mode: EvalMode) -> Result<EvalReport, HarnessError> {
    cfg.validate()?;
    let model = load_model(cfg, ckpt)?;
    let clips = load_dataset(data_dir)?;
    check_size(cfg, &clips)?;
    Ok(evaluate(&model, &clips, mode, cfg.temporal.pqs_threshold)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub map: f64,
    /// Mean number of keyframe queries kept by selection.
    pub retained: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\nthreshold mAP(%) retained\n");
        for r in &self.rows {
            writeln!(s, "{:.2} {:.1} {:.3}", r.threshold, 100.0 * r.map, r.retained).unwrap();
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines();
        if lines.next() != Some(SWEEP_HEADER) {
            return Err(format!("expected header `{SWEEP_HEADER}`"));
        }
        if lines.next() != Some("threshold mAP(%) retained") {
            return Err("expected column line".into());
        }
        let rows = lines
            .enumerate()
            .map(|(i, line)| {
                let f: Vec<f64> = line.split(' ').map(str::parse).collect::<Result<_, _>>().map_err(|_| format!("row {}: bad number", i + 1))?;
                match f[..] {
                    [threshold, map, retained] => Ok(SweepRow { threshold, map: map / 100.0, retained }),
                    _ => Err(format!("row {}: expected 3 fields", i + 1)),
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { rows })
    }

    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.iter().max_by(|a, b| a.map.total_cmp(&b.map))
    }
}

/// Temporal evaluation at each selection threshold, sharing one spatial pass.
pub fn sweep_threshold(model: &Vepe, clips: &[VideoClip], thresholds: &[f64]) -> Result<SweepTable, HarnessError> {
    let caches: Vec<Vec<CachedFrame>> = clips.iter().map(|c| model.spatial_clip(c)).collect::<Result<_, _>>()?;
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(HarnessError::Usage(format!("threshold {threshold} outside [0,1]")));
        }
        let mut frames = Vec::new();
        let mut kept = 0usize;
        for (clip, cache) in clips.iter().zip(&caches) {
            for t in 0..clip.len() {
                let p = model.temporal_frame(cache, t, threshold)?;
                kept += p.selected[0].len();
                frames.push(crate::metrics::EvalFrame { predictions: p.predictions, ground_truth: clip.annotations[t].clone(), image_size: clip.width });
            }
        }
        let report = crate::metrics::compute_ap(&frames, model.config.eval.tau, clips.len());
        rows.push(SweepRow { threshold, map: report.mean, retained: kept as f64 / frames.len().max(1) as f64 });
    }
    Ok(SweepTable { rows })
}

pub fn cmd_sweep_threshold(cfg: &RunConfig, ckpt: &Path, data_dir: &Path, thresholds: &[f64]) -> Result<SweepTable, HarnessError> {
    cfg.validate()?;
    let model = load_model(cfg, ckpt)?;
    let clips = load_dataset(data_dir)?;
    check_size(cfg, &clips)?;
    sweep_threshold(&model, &clips, thresholds)
}

/// Per-frame temporal predictions plus cross-frame links for one clip.
#[derive(Clone, Debug)]
pub struct ClipInference {
    pub frames: Vec<FrameInference>,
}

#[derive(Clone, Debug)]
pub struct FrameInference {
    /// Selected spatial query slot of each prediction.
    pub slots: Vec<usize>,
    pub predictions: Vec<PosePrediction>,
    /// Track id of each prediction, propagated along links from the previous frame.
    pub track_ids: Vec<u32>,
    pub refs: Vec<usize>,
    /// Per reference frame, the linked prediction row in that frame.
    pub links: Vec<Vec<usize>>,
    pub similarity: Vec<vepe_tensor::Tensor>,
    pub layer_keypoints: Vec<vepe_tensor::Tensor>,
}

pub fn infer_clip(model: &Vepe, clip: &VideoClip) -> Result<ClipInference, HarnessError> {
    let threshold = model.config.temporal.pqs_threshold;
    let cache = model.spatial_clip(clip)?;
    let mut frames: Vec<FrameInference> = Vec::with_capacity(clip.len());
    let mut next_id = 1u32;
    for t in 0..clip.len() {
        let p = model.temporal_frame(&cache, t, threshold)?;
        let InstanceLinks { refs, links, similarity, .. } = model.instance_links(&cache, t, threshold)?;
        let n = p.predictions.len();
        let mut track_ids = vec![0u32; n];
        let prev = refs.iter().position(|&r| t > 0 && r == t - 1);
        let mut used = Vec::new();
        for (row, id) in track_ids.iter_mut().enumerate() {
            let inherited = prev.map(|k| frames[t - 1].track_ids[links[k][row]]).filter(|i| !used.contains(i));
            *id = inherited.unwrap_or_else(|| {
                next_id += 1;
                next_id - 1
            });
            used.push(*id);
        }
        frames.push(FrameInference {
            slots: p.selected[0].clone(),
            predictions: p.predictions,
            track_ids,
            refs,
            links,
            similarity,
            layer_keypoints: p.layer_keypoints,
        });
    }
    Ok(ClipInference { frames })
}

impl ClipInference {
    pub fn poses_text(&self, clip_id: &str) -> String {
        let mut s = format!("{POSES_HEADER}\nclip_id {clip_id}\nframes {}\n", self.frames.len());
        for (t, f) in self.frames.iter().enumerate() {
            writeln!(s, "frame {t} {}", f.predictions.len()).unwrap();
            for (row, p) in f.predictions.iter().enumerate() {
                write!(s, "pose {row} id {} score {:.6}", f.track_ids[row], p.score).unwrap();
                for kp in &p.keypoints {
                    write!(s, " {:.6} {:.6}", kp[0], kp[1]).unwrap();
                }
                s.push('\n');
            }
            for (k, r) in f.refs.iter().enumerate() {
                let rows: Vec<String> = f.links[k].iter().map(usize::to_string).collect();
                writeln!(s, "links {r} {}", rows.join(" ")).unwrap();
            }
        }
        s
    }

    pub fn diagnostics_text(&self, clip_id: &str) -> String {
        let mut s = format!("{DIAG_HEADER}\nclip_id {clip_id}\n");
        for (t, f) in self.frames.iter().enumerate() {
            let refs: Vec<String> = f.refs.iter().map(usize::to_string).collect();
            let slots: Vec<String> = f.slots.iter().map(usize::to_string).collect();
            writeln!(s, "frame {t} refs {} slots {}", refs.join(" "), slots.join(" ")).unwrap();
            for (k, sim) in f.similarity.iter().enumerate() {
                let shape = sim.shape();
                writeln!(s, "similarity {} {} {}", f.refs[k], shape[0], shape.get(1).copied().unwrap_or(0)).unwrap();
                write_rows(&mut s, sim);
            }
            for (l, kp) in f.layer_keypoints.iter().enumerate() {
                writeln!(s, "layer {l} {}", kp.shape()[0]).unwrap();
                write_rows(&mut s, kp);
            }
        }
        s
    }
}

fn write_rows(s: &mut String, t: &vepe_tensor::Tensor) {
    let shape = t.shape();
    if shape.len() < 2 || shape[1] == 0 {
        return;
    }
    for row in t.data().chunks(shape[1]) {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&vals.join(" "));
        s.push('\n');
    }
}

/// Colour of overlay markers, distinct from every synthetic joint colour.
pub const OVERLAY_JOINT: [u8; 3] = [0, 255, 0];
pub const OVERLAY_LIMB: [u8; 3] = [255, 0, 255];

/// Pixel containing normalized coordinate `v` on a `size`-pixel axis.
pub fn to_pixel(v: f64, size: usize) -> Option<usize> {
    let p = (v * size as f64).floor();
    (p >= 0.0 && p < size as f64).then_some(p as usize)
}

/// Draws limbs, then a 3×3 marker centred on every joint pixel, for each
/// prediction scoring at least [`OVERLAY_MIN_SCORE`].
pub fn draw_overlay(frame: &[u8], width: usize, height: usize, predictions: &[PosePrediction]) -> Vec<u8> {
    let mut img = frame.to_vec();
    let put = |img: &mut Vec<u8>, x: i64, y: i64, c: [u8; 3]| {
        if (0..width as i64).contains(&x) && (0..height as i64).contains(&y) {
            let i = (y as usize * width + x as usize) * 3;
            img[i..i + 3].copy_from_slice(&c);
        }
    };
    let shown: Vec<&PosePrediction> = predictions.iter().filter(|p| p.score >= OVERLAY_MIN_SCORE).collect();
    for p in &shown {
        for &(a, b, _) in LIMBS.iter() {
            let (pa, pb) = (p.keypoints[a], p.keypoints[b]);
            let steps = ((pb[0] - pa[0]).abs() * width as f64).max((pb[1] - pa[1]).abs() * height as f64).ceil() as usize + 1;
            for s in 0..=steps {
                let f = s as f64 / steps as f64;
                let x = ((pa[0] + (pb[0] - pa[0]) * f) * width as f64).floor() as i64;
                let y = ((pa[1] + (pb[1] - pa[1]) * f) * height as f64).floor() as i64;
                put(&mut img, x, y, OVERLAY_LIMB);
            }
        }
    }
    for p in &shown {
        for kp in &p.keypoints {
            let x = (kp[0] * width as f64).floor() as i64;
            let y = (kp[1] * height as f64).floor() as i64;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    put(&mut img, x + dx, y + dy, OVERLAY_JOINT);
                }
            }
        }
    }
    img
}

pub fn encode_ppm(rgb: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

pub struct InferOutput {
    pub inference: ClipInference,
    pub overlays: Vec<PathBuf>,
    pub poses: PathBuf,
    pub diagnostics: PathBuf,
}

/// Writes one PPM overlay per frame, a pose file, and a diagnostics file.
pub fn cmd_infer(cfg: &RunConfig, ckpt: &Path, clip_path: &Path, out_dir: &Path) -> Result<InferOutput, HarnessError> {
    cfg.validate()?;
    let model = load_model(cfg, ckpt)?;
    let clip = load_clip(clip_path).map_err(|source| HarnessError::Clip { path: clip_path.to_path_buf(), source })?;
    check_size(cfg, std::slice::from_ref(&clip))?;
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let inference = infer_clip(&model, &clip)?;
    let mut overlays = Vec::new();
    for (t, f) in inference.frames.iter().enumerate() {
        let img = draw_overlay(&clip.frames[t], clip.width, clip.height, &f.predictions);
        let path = out_dir.join(format!("frame-{t:03}.ppm"));
        std::fs::write(&path, encode_ppm(&img, clip.width, clip.height)).map_err(io(&path))?;
        overlays.push(path);
    }
    let poses = out_dir.join("poses.txt");
    std::fs::write(&poses, inference.poses_text(&clip.clip_id)).map_err(io(&poses))?;
    let diagnostics = out_dir.join("diagnostics.txt");
    std::fs::write(&diagnostics, inference.diagnostics_text(&clip.clip_id)).map_err(io(&diagnostics))?;
    Ok(InferOutput { inference, overlays, poses, diagnostics })
}

pub struct GradcheckSummary {
    pub lines: Vec<String>,
    pub failures: usize,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Runs the gradient suite, one report line per case. `with_fixture` appends
/// the deliberately broken op as a negative control.
pub fn cmd_gradcheck(with_fixture: bool) -> GradcheckSummary {
    let mut cases = gradsuite::suite();
    if with_fixture {
        cases.push(gradsuite::corrupted_case());
    }
    let mut lines = Vec::with_capacity(cases.len());
    let mut failures = 0;
    for case in &cases {
        match case.run() {
            Ok(r) => {
                failures += (!r.passed()) as usize;
                lines.push(r.to_string());
            }
            Err(e) => {
                failures += 1;
                lines.push(format!("FAIL {:<28} {e}", case.name));
            }
        }
    }
    lines.push(format!("{} checks, {} failed", cases.len(), failures));
    GradcheckSummary { lines, failures }
}

/// Median full-pipeline forward time for the middle keyframe of a clip with
/// each person count; the spatial pass covers every frame of the window.
pub fn probe_runtime(model: &Vepe, counts: &[usize], repeats: usize) -> Result<crate::metrics::ProbeTable, HarnessError> {
    let cfg = &model.config.synth;
    let clips: Vec<VideoClip> = counts
        .iter()
        .map(|&n| {
            let c = crate::config::SynthConfig { persons_min: n, persons_max: n, ..cfg.clone() };
            generate_clip(&c, n as u64)
        })
        .collect();
    let mut failure = None;
    let table = crate::metrics::runtime_probe(counts, repeats, |n| {
        let clip = &clips[counts.iter().position(|&c| c == n).expect("count listed")];
        let run = || -> Result<(), TensorError> {
            let cache = model.spatial_clip(clip)?;
            model.temporal_frame(&cache, clip.len() / 2, model.config.temporal.pqs_threshold)?;
            Ok(())
        };
        if let Err(e) = run() {
            failure.get_or_insert(e);
        }
    });
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(table),
    }
}

