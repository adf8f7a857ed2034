//! Activity and group-detection scores.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{GroupingSource, ModelError, Prediction, SpdpModel};
use crate::relation::GroupAssignment;
use crate::synthdata::SceneSample;

pub const SCORE_COLUMNS: [&str; 13] = [
    "P_i", "R_i", "F_i", "P_p", "R_p", "F_p", "P_g", "R_g", "F_g", "F_a", "IoU@0.5", "IoU@AUC", "Mat.IoU",
];

/// IoU thresholds 0.50, 0.55, ..., 1.00.
pub fn iou_thresholds() -> [f64; 11] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Precision and recall of one multi-label instance; empty sets score 0.
pub fn instance_pr(pred: &[usize], gt: &[usize]) -> (f64, f64) {
    let p: BTreeSet<usize> = pred.iter().copied().collect();
    let g: BTreeSet<usize> = gt.iter().copied().collect();
    let hit = p.intersection(&g).count() as f64;
    let prec = if p.is_empty() { 0.0 } else { hit / p.len() as f64 };
    let rec = if g.is_empty() { 0.0 } else { hit / g.len() as f64 };
    (prec, rec)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "F")]
    pub f: f64,
}

/// Running mean of per-instance precision and recall.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrfAccumulator {
    sum_p: f64,
    sum_r: f64,
    count: usize,
}

impl PrfAccumulator {
    pub fn add(&mut self, pred: &[usize], gt: &[usize]) {
        let (p, r) = instance_pr(pred, gt);
        self.add_scores(p, r);
    }

    pub fn add_scores(&mut self, p: f64, r: f64) {
        self.sum_p += p;
        self.sum_r += r;
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean P and R over instances; F is their harmonic mean.
    pub fn finish(&self) -> Prf {
        if self.count == 0 {
            return Prf::default();
        }
        let p = self.sum_p / self.count as f64;
        let r = self.sum_r / self.count as f64;
        Prf { p, r, f: f1(p, r) }
    }
}

pub fn multilabel_prf(pred: &[Vec<usize>], gt: &[Vec<usize>]) -> Result<Prf, String> {
    if pred.len() != gt.len() {
        return Err(format!("{} predictions for {} instances", pred.len(), gt.len()));
    }
    let mut acc = PrfAccumulator::default();
    for (p, g) in pred.iter().zip(gt) {
        acc.add(p, g);
    }
    Ok(acc.finish())
}

pub fn group_set_iou(a: &[usize], b: &[usize]) -> f64 {
    let a: BTreeSet<usize> = a.iter().copied().collect();
    let b: BTreeSet<usize> = b.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Maximum-weight assignment on a rectangular matrix (`rows x cols`,
/// row-major). Returns the column assigned to each row, if any.
pub fn hungarian_max(weights: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    let n = rows.max(cols);
    if n == 0 {
        return vec![None; rows];
    }
    let max = weights.iter().copied().fold(0.0, f64::max);
    // Square cost matrix, 1-based with a dummy row/column 0; padding costs `max`.
    let cost = |i: usize, j: usize| -> f64 {
        if i <= rows && j <= cols {
            max - weights[(i - 1) * cols + (j - 1)]
        } else {
            max
        }
    };
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=cols {
        let i = owner[j];
        if i >= 1 && i <= rows {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

/// One matched (ground-truth group, predicted group) pair, 0-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupMatch {
    pub gt: usize,
    pub pred: usize,
    pub iou: f64,
}

/// One-to-one matching maximizing total member-set IoU; pairs with zero
/// overlap are left unmatched.
pub fn match_groups(pred: &GroupAssignment, gt: &GroupAssignment) -> Vec<GroupMatch> {
    let pg = pred.groups();
    let gg = gt.groups();
    let mut w = vec![0.0; gg.len() * pg.len()];
    for (i, a) in gg.iter().enumerate() {
        for (j, b) in pg.iter().enumerate() {
            w[i * pg.len() + j] = group_set_iou(a, b);
        }
    }
    hungarian_max(&w, gg.len(), pg.len())
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| {
            let j = j?;
            let iou = w[i * pg.len() + j];
            (iou > 0.0).then_some(GroupMatch { gt: i, pred: j, iou })
        })
        .collect()
}

/// Off-diagonal co-membership IoU; two all-singleton partitions score 1.
pub fn mat_iou(pred: &GroupAssignment, gt: &GroupAssignment) -> f64 {
    let (a, b) = (pred.labels(), gt.labels());
    let mut inter = 0usize;
    let mut union = 0usize;
    for i in 0..a.len() {
        for j in 0..a.len() {
            if i == j {
                continue;
            }
            let x = a[i] == a[j];
            let y = b[i] == b[j];
            inter += (x && y) as usize;
            union += (x || y) as usize;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupDetScores {
    #[serde(rename = "IoU@0.5")]
    pub iou_at_half: f64,
    #[serde(rename = "IoU@AUC")]
    pub iou_auc: f64,
    #[serde(rename = "Mat.IoU")]
    pub mat_iou: f64,
}

/// Group counts pooled over scenes, plus the per-scene Mat.IoU mean.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GroupDetAccumulator {
    pred: usize,
    gt: usize,
    correct: [usize; 11],
    mat_sum: f64,
    scenes: usize,
}

impl GroupDetAccumulator {
    pub fn add(&mut self, pred: &GroupAssignment, gt: &GroupAssignment) {
        self.pred += pred.num_groups();
        self.gt += gt.num_groups();
        let matches = match_groups(pred, gt);
        for (c, k) in self.correct.iter_mut().zip(iou_thresholds()) {
            *c += matches.iter().filter(|m| m.iou >= k).count();
        }
        self.mat_sum += mat_iou(pred, gt);
        self.scenes += 1;
    }

    fn f_at(&self, idx: usize) -> f64 {
        let c = self.correct[idx] as f64;
        let p = if self.pred == 0 { 0.0 } else { c / self.pred as f64 };
        let r = if self.gt == 0 { 0.0 } else { c / self.gt as f64 };
        f1(p, r)
    }

    pub fn finish(&self) -> GroupDetScores {
        if self.scenes == 0 {
            return GroupDetScores::default();
        }
        GroupDetScores {
            iou_at_half: self.f_at(0),
            iou_auc: (0..11).map(|i| self.f_at(i)).sum::<f64>() / 11.0,
            mat_iou: self.mat_sum / self.scenes as f64,
        }
    }
}

pub fn group_detection_scores(pred: &GroupAssignment, gt: &GroupAssignment) -> GroupDetScores {
    let mut acc = GroupDetAccumulator::default();
    acc.add(pred, gt);
    acc.finish()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParScores {
    pub individual: Prf,
    pub social: Prf,
    pub global: Prf,
    #[serde(rename = "F_a")]
    pub f_a: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub activity: ParScores,
    pub group_detection: GroupDetScores,
}

impl Scores {
    /// Values in [`SCORE_COLUMNS`] order.
    pub fn values(&self) -> [f64; 13] {
        let a = &self.activity;
        let g = &self.group_detection;
        [
            a.individual.p,
            a.individual.r,
            a.individual.f,
            a.social.p,
            a.social.r,
            a.social.f,
            a.global.p,
            a.global.r,
            a.global.f,
            a.f_a,
            g.iou_at_half,
            g.iou_auc,
            g.mat_iou,
        ]
    }

    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn csv_header() -> String {
        SCORE_COLUMNS.join(",")
    }
}

/// Accumulates scene-level predictions into dataset scores.
#[derive(Clone, Debug, Default)]
pub struct ScoreAccumulator {
    individual: PrfAccumulator,
    social: PrfAccumulator,
    global: PrfAccumulator,
    groups: GroupDetAccumulator,
}

impl ScoreAccumulator {
    pub fn add(&mut self, sample: &SceneSample, pred: &Prediction) {
        for (p, g) in pred.individual.iter().zip(&sample.individual_labels) {
            self.individual.add(p, g);
        }
        let matches = match_groups(&pred.groups, &sample.groups);
        for m in &matches {
            self.social.add(&pred.social[m.pred], &sample.social_labels[m.gt]);
        }
        let unmatched = (sample.groups.num_groups() - matches.len()) + (pred.groups.num_groups() - matches.len());
        for _ in 0..unmatched {
            self.social.add_scores(0.0, 0.0);
        }
        self.global.add(&pred.global, &sample.global_labels);
        self.groups.add(&pred.groups, &sample.groups);
    }

    pub fn finish(&self) -> Scores {
        let (i, s, g) = (self.individual.finish(), self.social.finish(), self.global.finish());
        Scores {
            activity: ParScores {
                individual: i,
                social: s,
                global: g,
                f_a: (i.f + s.f + g.f) / 3.0,
            },
            group_detection: self.groups.finish(),
        }
    }
}

/// Anything that turns a scene into thresholded predictions.
pub trait ParModel {
    fn predict_scene(&self, sample: &SceneSample, source: GroupingSource) -> Result<Prediction, ModelError>;
}

impl ParModel for SpdpModel {
    fn predict_scene(&self, sample: &SceneSample, source: GroupingSource) -> Result<Prediction, ModelError> {
        self.predict(sample, source)
    }
}

pub fn evaluate(model: &impl ParModel, samples: &[SceneSample], source: GroupingSource) -> Result<Scores, ModelError> {
    let mut acc = ScoreAccumulator::default();
    for s in samples {
        let pred = model.predict_scene(s, source)?;
        acc.add(s, &pred);
    }
    Ok(acc.finish())
}

/// Majority-class reference: each granularity predicts its single most
/// frequent training class, with ground-truth groups.
pub fn majority_baseline(train: &[SceneSample], eval: &[SceneSample]) -> Scores {
    let most_common = |sets: Vec<&Vec<usize>>| -> Vec<usize> {
        let mut counts = std::collections::BTreeMap::new();
        for s in sets {
            for &c in s {
                *counts.entry(c).or_insert(0usize) += 1;
            }
        }
        let best = counts
            .iter()
            .fold(None, |best: Option<(usize, usize)>, (&c, &n)| match best {
                Some((_, bn)) if bn >= n => best,
                _ => Some((c, n)),
            });
        best.map(|(c, _)| vec![c]).unwrap_or_default()
    };
    let idv = most_common(train.iter().flat_map(|s| &s.individual_labels).collect());
    let sg = most_common(train.iter().flat_map(|s| &s.social_labels).collect());
    let glb = most_common(train.iter().map(|s| &s.global_labels).collect());
    let mut acc = ScoreAccumulator::default();
    for s in eval {
        let pred = Prediction {
            groups: s.groups.clone(),
            individual: vec![idv.clone(); s.individuals()],
            social: vec![sg.clone(); s.groups.num_groups()],
            global: glb.clone(),
            count_fraction: s.groups.num_groups() as f64 / s.individuals() as f64,
        };
        acc.add(s, &pred);
    }
    acc.finish()
}
