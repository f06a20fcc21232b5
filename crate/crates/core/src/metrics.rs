//! Per-joint average precision and the instance-count runtime probe.

use std::fmt::Write as _;
use std::time::Instant;

use crate::skeleton::{PersonAnnotation, JOINT_NAMES, NUM_JOINTS, TABLE_GROUPS};

pub const REPORT_HEADER: &str = "VEPE-EVAL-1";
/// Predictions farther than this (mean distance / person scale) never match.
pub const MATCH_GATE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PosePrediction {
    pub keypoints: [[f64; 2]; NUM_JOINTS],
    pub score: f64,
}

impl PosePrediction {
    /// From a flat `[x0, y0, x1, y1, ...]` row.
    pub fn from_row(row: &[f64], score: f64) -> Self {
        let mut keypoints = [[0.0; 2]; NUM_JOINTS];
        for (j, k) in keypoints.iter_mut().enumerate() {
            *k = [row[2 * j], row[2 * j + 1]];
        }
        Self { keypoints, score }
    }
}

/// Predictions and ground truth for one evaluated frame.
#[derive(Clone, Debug)]
pub struct EvalFrame {
    pub predictions: Vec<PosePrediction>,
    pub ground_truth: Vec<PersonAnnotation>,
    /// Image side in pixels; sets the one-pixel floor on person scale.
    pub image_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tau: f64,
    pub per_joint: [f64; NUM_JOINTS],
    pub mean: f64,
    pub instances: usize,
    pub frames: usize,
    pub clips: usize,
}

impl EvalReport {
    /// Column values in table order, each the mean of its joints.
    pub fn groups(&self) -> Vec<(&'static str, f64)> {
        TABLE_GROUPS.iter().map(|(name, joints)| (*name, joints.iter().map(|&j| self.per_joint[j]).sum::<f64>() / joints.len() as f64)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{REPORT_HEADER}").unwrap();
        writeln!(s, "tau {}", self.tau).unwrap();
        writeln!(s, "clips {}", self.clips).unwrap();
        writeln!(s, "frames {}", self.frames).unwrap();
        writeln!(s, "instances {}", self.instances).unwrap();
        let groups = self.groups();
        let names: Vec<&str> = groups.iter().map(|g| g.0).chain(["Mean"]).collect();
        writeln!(s, "{}", names.join(" ")).unwrap();
        let values: Vec<String> = groups.iter().map(|g| g.1).chain([self.mean]).map(|v| format!("{:.1}", 100.0 * v)).collect();
        writeln!(s, "{}", values.join(" ")).unwrap();
        for j in 0..NUM_JOINTS {
            writeln!(s, "joint {} {}", JOINT_NAMES[j], self.per_joint[j]).unwrap();
        }
        writeln!(s, "mean {}", self.mean).unwrap();
        s
    }

    /// Parses [`EvalReport::to_text`] output; the summary rows are recomputed, not trusted.
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| lines.next().ok_or_else(|| format!("missing {what} line"));
        let (_, head) = next("header")?;
        if head != REPORT_HEADER {
            return Err(format!("line 1: expected `{REPORT_HEADER}`"));
        }
        fn value<T: std::str::FromStr>(line: (usize, &str), key: &str) -> Result<T, String> {
            let (n, l) = line;
            let rest = l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')).ok_or_else(|| format!("line {}: expected `{key}`", n + 1))?;
            rest.parse().map_err(|_| format!("line {}: bad `{key}` value", n + 1))
        }
        let tau: f64 = value(next("tau")?, "tau")?;
        let clips = value(next("clips")?, "clips")?;
        let frames = value(next("frames")?, "frames")?;
        let instances = value(next("instances")?, "instances")?;
        next("column")?;
        next("table")?;
        let mut per_joint = [0.0; NUM_JOINTS];
        for (j, slot) in per_joint.iter_mut().enumerate() {
            let v: f64 = value(next("joint")?, &format!("joint {}", JOINT_NAMES[j]))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("joint {} AP {v} outside [0,1]", JOINT_NAMES[j]));
            }
            *slot = v;
        }
        let mean: f64 = value(next("mean")?, "mean")?;
        if !tau.is_finite() || tau <= 0.0 {
            return Err("tau must be positive".into());
        }
        let expect = per_joint.iter().sum::<f64>() / NUM_JOINTS as f64;
        if (mean - expect).abs() > 1e-9 {
            return Err(format!("mean {mean} disagrees with per-joint mean {expect}"));
        }
        Ok(Self { tau, per_joint, mean, instances, frames, clips })
    }
}

/// Step-wise area under the precision/recall curve.
///
/// `hits` are `(score, true positive)` detections; thresholds are the distinct
/// scores. With no positives, AP is 1 when there are no detections either.
pub fn average_precision(hits: &mut [(f64, bool)], positives: usize) -> f64 {
    if positives == 0 {
        return if hits.is_empty() { 1.0 } else { 0.0 };
    }
    hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp, mut ap, mut last_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < hits.len() {
        let s = hits[i].0;
        while i < hits.len() && hits[i].0 == s {
            if hits[i].1 { tp += 1 } else { fp += 1 }
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - last_recall) * tp as f64 / (tp + fp) as f64;
        last_recall = recall;
    }
    ap
}

/// Greedy score-ordered matching; returns the ground-truth index per prediction.
pub fn greedy_match(preds: &[PosePrediction], gts: &[PersonAnnotation], scale_floor: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; preds.len()];
    for p in order {
        let mut best: Option<(f64, usize)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let Some(d) = normalized_distance(&preds[p], gt, scale_floor) else { continue };
            if d < MATCH_GATE && best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, g));
            }
        }
        if let Some((_, g)) = best {
            taken[g] = true;
            out[p] = Some(g);
        }
    }
    out
}

pub fn person_scale(gt: &PersonAnnotation, floor: f64) -> Option<f64> {
    gt.visible_diagonal().map(|d| d.max(floor))
}

/// Mean visible-joint distance over person scale; `None` without visible joints.
pub fn normalized_distance(pred: &PosePrediction, gt: &PersonAnnotation, floor: f64) -> Option<f64> {
    let scale = person_scale(gt, floor)?;
    let (mut sum, mut n) = (0.0, 0);
    for j in 0..NUM_JOINTS {
        if gt.visible[j] {
            sum += joint_distance(pred, gt, j);
            n += 1;
        }
    }
    Some(sum / n as f64 / scale)
}

fn joint_distance(pred: &PosePrediction, gt: &PersonAnnotation, j: usize) -> f64 {
    (pred.keypoints[j][0] - gt.keypoints[j][0]).hypot(pred.keypoints[j][1] - gt.keypoints[j][1])
}

/// Per-joint detections and positive counts, before AP integration.
pub fn collect_hits(frames: &[EvalFrame], tau: f64) -> (Vec<Vec<(f64, bool)>>, [usize; NUM_JOINTS]) {
    let mut hits = vec![Vec::new(); NUM_JOINTS];
    let mut positives = [0usize; NUM_JOINTS];
    for f in frames {
        let floor = 1.0 / f.image_size.max(1) as f64;
        let gts: Vec<&PersonAnnotation> = f.ground_truth.iter().filter(|g| g.visible_count() > 0).collect();
        for g in &gts {
            for j in 0..NUM_JOINTS {
                positives[j] += g.visible[j] as usize;
            }
        }
        let owned: Vec<PersonAnnotation> = gts.iter().map(|g| (*g).clone()).collect();
        let matched = greedy_match(&f.predictions, &owned, floor);
        for (p, m) in f.predictions.iter().zip(matched) {
            for j in 0..NUM_JOINTS {
                match m {
                    None => hits[j].push((p.score, false)),
                    Some(g) if owned[g].visible[j] => {
                        let scale = person_scale(&owned[g], floor).expect("visible person");
                        hits[j].push((p.score, joint_distance(p, &owned[g], j) <= tau * scale));
                    }
                    Some(_) => {}
                }
            }
        }
    }
    (hits, positives)
}

/// Evaluates `frames` at correctness radius `tau` (fraction of person scale).
pub fn compute_ap(frames: &[EvalFrame], tau: f64, clips: usize) -> EvalReport {
    assert!(tau > 0.0, "tau must be positive");
    let (mut hits, positives) = collect_hits(frames, tau);
    let mut per_joint = [0.0; NUM_JOINTS];
    for j in 0..NUM_JOINTS {
        per_joint[j] = average_precision(&mut hits[j], positives[j]);
    }
    let mean = per_joint.iter().sum::<f64>() / NUM_JOINTS as f64;
    let instances = frames.iter().map(|f| f.ground_truth.iter().filter(|g| g.visible_count() > 0).count()).sum();
    EvalReport { tau, per_joint, mean, instances, frames: frames.len(), clips }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub instances: usize,
    pub median_ms: f64,
    pub repeats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeTable {
    pub rows: Vec<ProbeRow>,
}

impl ProbeTable {
    /// Largest over smallest median.
    pub fn ratio(&self) -> f64 {
        let max = self.rows.iter().map(|r| r.median_ms).fold(f64::MIN, f64::max);
        let min = self.rows.iter().map(|r| r.median_ms).fold(f64::MAX, f64::min);
        max / min
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("instances,median_ms,repeats\n");
        for r in &self.rows {
            writeln!(s, "{},{:.3},{}", r.instances, r.median_ms, r.repeats).unwrap();
        }
        s
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 }
}

/// Median wall-clock time of `run(count)` per instance count, after one warmup call each.
pub fn runtime_probe(counts: &[usize], repeats: usize, mut run: impl FnMut(usize)) -> ProbeTable {
    let repeats = repeats.max(1);
    let rows = counts
        .iter()
        .map(|&n| {
            run(n);
            let mut times: Vec<f64> = (0..repeats)
                .map(|_| {
                    let t = Instant::now();
                    run(n);
                    t.elapsed().as_secs_f64() * 1e3
                })
                .collect();
            ProbeRow { instances: n, median_ms: median(&mut times), repeats }
        })
        .collect();
    ProbeTable { rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn person(x: f64, track: u32) -> PersonAnnotation {
        let mut keypoints = [[0.0; 2]; NUM_JOINTS];
        for (j, k) in keypoints.iter_mut().enumerate() {
            *k = [x + 0.01 * (j % 4) as f64, 0.2 + 0.04 * j as f64];
        }
        PersonAnnotation { track_id: track, keypoints, visible: [true; NUM_JOINTS] }
    }

    fn exact(gt: &PersonAnnotation, score: f64) -> PosePrediction {
        PosePrediction { keypoints: gt.keypoints, score }
    }

    #[test]
    fn perfect_and_empty_predictors() {
        let gts = vec![person(0.2, 1), person(0.6, 2)];
        let perfect = EvalFrame { predictions: gts.iter().map(|g| exact(g, 1.0)).collect(), ground_truth: gts.clone(), image_size: 64 };
        let r = compute_ap(&[perfect], 0.1, 1);
        assert!(r.per_joint.iter().all(|v| *v == 1.0) && r.mean == 1.0);
        let empty = EvalFrame { predictions: vec![], ground_truth: gts, image_size: 64 };
        assert!(compute_ap(&[empty], 0.1, 1).per_joint.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step_ap_by_hand() {
        // ranks: TP, FP, TP with 2 positives -> 1·0.5 + (2/3)·0.5
        let mut hits = vec![(0.9, true), (0.8, false), (0.7, true)];
        assert!((average_precision(&mut hits, 2) - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
        let mut tied = vec![(0.5, true), (0.5, false)];
        assert!((average_precision(&mut tied, 1) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn invisible_people_and_joints_are_ignored() {
        let mut hidden = person(0.2, 1);
        hidden.visible = [false; NUM_JOINTS];
        let mut partial = person(0.6, 2);
        partial.visible[0] = false;
        let mut pred = exact(&partial, 0.9);
        pred.keypoints[0] = [0.99, 0.99];
        let f = EvalFrame { predictions: vec![pred], ground_truth: vec![hidden, partial], image_size: 64 };
        let r = compute_ap(&[f], 0.1, 1);
        assert_eq!(r.instances, 1);
        assert!(r.per_joint.iter().all(|v| *v == 1.0), "{:?}", r.per_joint);
    }

    #[test]
    fn report_text_round_trips() {
        let gts = vec![person(0.3, 1)];
        let f = EvalFrame { predictions: vec![exact(&gts[0], 0.4)], ground_truth: gts, image_size: 64 };
        let r = compute_ap(&[f], 0.1, 1);
        let text = r.to_text();
        assert!(text.contains("Shoulder Head Elbow Wrist Hip Ankle Knee Mean"));
        assert_eq!(EvalReport::parse(&text).unwrap(), r);
    }

    #[test]
    fn probe_schema_does_not_depend_on_repeats() {
        let one = runtime_probe(&[2, 12], 1, |_| {});
        let many = runtime_probe(&[2, 12], 20, |_| {});
        assert_eq!(one.to_csv().lines().next(), many.to_csv().lines().next());
        assert_eq!(one.rows.len(), many.rows.len());
    }
}
