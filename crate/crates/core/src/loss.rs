//! Training losses: keypoint regression, confidence, and the triplet-based
//! instance consistency loss over cross-frame instance queries.

use rand::Rng;
use vepe_tensor::{Graph, Tensor, TensorError, Var};

use crate::matching::MatchAssignment;
use crate::skeleton::{PersonAnnotation, NUM_JOINTS};

/// Mean `|dx| + |dy|` over visible joints of matched pairs; zero without matches.
///
/// `keypoints` is the `[P×30]` prediction tensor.
pub fn keypoint_loss(g: &mut Graph, keypoints: Var, assignment: &MatchAssignment, gts: &[PersonAnnotation]) -> Result<Var, TensorError> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    let mut count = 0usize;
    for &(p, gi) in &assignment.pairs {
        let gt = &gts[gi];
        rows.push(p);
        for j in 0..NUM_JOINTS {
            let w = if gt.visible[j] { 1.0 } else { 0.0 };
            count += gt.visible[j] as usize;
            targets.extend_from_slice(&gt.keypoints[j]);
            weights.extend_from_slice(&[w, w]);
        }
    }
    if count == 0 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let shape = [rows.len(), 2 * NUM_JOINTS];
    let picked = g.gather_rows(keypoints, &rows)?;
    let target = g.constant(Tensor::new(&shape, targets)?);
    let diff = g.sub(picked, target)?;
    let diff = g.abs(diff);
    let mask = g.constant(Tensor::new(&shape, weights)?);
    let masked = g.mul(diff, mask)?;
    let total = g.sum(masked);
    Ok(g.scale(total, 1.0 / count as f64))
}

/// Binary cross-entropy on score logits: matched predictions target 1, the rest 0.
pub fn classification_loss(g: &mut Graph, logits: Var, assignment: &MatchAssignment) -> Result<Var, TensorError> {
    let n = g.shape(logits)[0];
    let mut targets = vec![0.0; n];
    for &(p, _) in &assignment.pairs {
        targets[p] = 1.0;
    }
    g.bce_with_logits(logits, &targets)
}

/// A row of one frame's instance-query matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct InstanceRef {
    pub frame: usize,
    pub row: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: InstanceRef,
    pub positive: InstanceRef,
    pub negative: InstanceRef,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
    pub margin: f64,
}

impl TripletBatch {
    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }
}

/// Labelled instances per frame: `(row in the frame's instance matrix, track id)`.
pub fn labelled_instances(assignments: &[MatchAssignment], gts: &[&[PersonAnnotation]], rows: &[Vec<usize>]) -> Vec<Vec<(usize, u32)>> {
    assignments
        .iter()
        .zip(gts)
        .zip(rows)
        .map(|((a, gt), rows)| {
            a.pairs
                .iter()
                .filter_map(|&(p, g)| rows.iter().position(|&r| r == p).map(|local| (local, gt[g].track_id)))
                .collect()
        })
        .collect()
}

/// One triplet per matched anchor that has a cross-frame positive and some negative.
///
/// Positive and negative are drawn uniformly from the legal candidates.
pub fn build_triplets(labelled: &[Vec<(usize, u32)>], margin: f64, rng: &mut impl Rng) -> TripletBatch {
    let all: Vec<(InstanceRef, u32)> = labelled
        .iter()
        .enumerate()
        .flat_map(|(frame, items)| items.iter().map(move |&(row, track)| (InstanceRef { frame, row }, track)))
        .collect();
    let mut triplets = Vec::new();
    for &(anchor, track) in &all {
        let positives: Vec<InstanceRef> = all.iter().filter(|(r, t)| *t == track && r.frame != anchor.frame).map(|(r, _)| *r).collect();
        let negatives: Vec<InstanceRef> = all.iter().filter(|(_, t)| *t != track).map(|(r, _)| *r).collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        let positive = positives[rng.random_range(0..positives.len())];
        let negative = negatives[rng.random_range(0..negatives.len())];
        triplets.push(Triplet { anchor, positive, negative });
    }
    TripletBatch { triplets, margin }
}

/// Mean over rows of `max(0, d(a,p) − d(a,n) + margin)` with `d = 1 − cos`.
///
/// Rows are normalized internally, so any positive rescaling is irrelevant; a
/// zero row is an error naming its index within its matrix.
pub fn triplet_loss(g: &mut Graph, anchors: Var, positives: Var, negatives: Var, margin: f64) -> Result<Var, TensorError> {
    let a = g.l2_normalize_rows(anchors)?;
    let p = g.l2_normalize_rows(positives)?;
    let n = g.l2_normalize_rows(negatives)?;
    let cos_ap = g.row_dot(a, p)?;
    let cos_an = g.row_dot(a, n)?;
    // d(a,p) − d(a,n) = cos(a,n) − cos(a,p)
    let gap = g.sub(cos_an, cos_ap)?;
    let rows = g.shape(gap)[0];
    let m = g.constant(Tensor::full(&[rows], margin));
    let hinge = g.add(gap, m)?;
    let hinge = g.relu(hinge);
    Ok(g.mean(hinge))
}

/// Triplet loss over instance matrices per frame; zero for an empty batch.
pub fn instance_consistency_loss(g: &mut Graph, instances: &[Var], batch: &TripletBatch) -> Result<Var, TensorError> {
    if batch.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mut offsets = Vec::with_capacity(instances.len());
    let mut total = 0;
    for v in instances {
        offsets.push(total);
        total += g.shape(*v)[0];
    }
    let stacked = g.concat_rows(instances)?;
    let index = |r: InstanceRef| offsets[r.frame] + r.row;
    let a = g.gather_rows(stacked, &batch.triplets.iter().map(|t| index(t.anchor)).collect::<Vec<_>>())?;
    let p = g.gather_rows(stacked, &batch.triplets.iter().map(|t| index(t.positive)).collect::<Vec<_>>())?;
    let n = g.gather_rows(stacked, &batch.triplets.iter().map(|t| index(t.negative)).collect::<Vec<_>>())?;
    triplet_loss(g, a, p, n, batch.margin)
}

/// Host-side distance `1 − cos(x, y)`.
pub fn cosine_distance(x: &[f64], y: &[f64]) -> f64 {
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    1.0 - dot / (nx * ny)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub kpt: f64,
    pub cls: f64,
    pub ic: f64,
}

/// `w_kpt·kpt + w_cls·cls + w_ic·ic`; a zero weight drops its term from the graph.
pub fn total_loss(g: &mut Graph, w: LossWeights, kpt: Var, cls: Var, ic: Option<Var>) -> Result<Var, TensorError> {
    let mut acc = g.scale(kpt, w.kpt);
    let c = g.scale(cls, w.cls);
    acc = g.add(acc, c)?;
    if let Some(ic) = ic.filter(|_| w.ic != 0.0) {
        let i = g.scale(ic, w.ic);
        acc = g.add(acc, i)?;
    }
    Ok(acc)
}
