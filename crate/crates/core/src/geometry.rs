//! Normalized boxes, GIoU-family and Euclidean proximity, and the pairwise
//! proximity matrix used as the physical relation between individuals.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error(
        "invalid box ({x1}, {y1}, {x2}, {y2}): coordinates must satisfy 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1"
    )]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("tracks must have at least one frame")]
    EmptyTrack,
    #[error("track lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("box track has {got} boxes, expected {n} x {t}")]
    TrackShape { n: usize, t: usize, got: usize },
    #[error("unknown proximity metric `{0}` (expected euclid_s, euclid_st, giou_s or tgiou)")]
    UnknownMetric(String),
}

/// Axis-aligned box in normalized scene coordinates (top-left, bottom-right).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let ok = [self.x1, self.y1, self.x2, self.y2].iter().all(|&v| in_unit(v))
            && self.x1 <= self.x2
            && self.y1 <= self.y2;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidBox {
                x1: self.x1,
                y1: self.y1,
                x2: self.x2,
                y2: self.y2,
            })
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self {
            x1: cx - w / 2.0,
            y1: cy - h / 2.0,
            x2: cx + w / 2.0,
            y2: cy + h / 2.0,
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Smallest box containing both.
    pub fn enclosing(&self, other: &Self) -> Self {
        Self {
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
            x2: self.x2.max(other.x2),
            y2: self.y2.max(other.y2),
        }
    }
}

/// Generalized IoU: `IoU - |C \ (A u B)| / |C|` with `C` the enclosing box.
///
/// Zero-area unions: identical boxes score 1, distinct ones have IoU 0. A
/// zero-area enclosing box contributes no penalty.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 {
        inter / union
    } else if a == b {
        1.0
    } else {
        0.0
    };
    let hull = a.enclosing(b).area();
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

/// Mean per-frame GIoU of two equally long tracks.
pub fn tgiou(a: &[BBox], b: &[BBox]) -> Result<f64, GeometryError> {
    if a.len() != b.len() {
        return Err(GeometryError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(GeometryError::EmptyTrack);
    }
    Ok(a.iter().zip(b).map(|(p, q)| giou(p, q)).sum::<f64>() / a.len() as f64)
}

fn center_distance(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Negated center distance: first frame only, or averaged over all frames
/// when `spatio_temporal` is set. Larger means closer.
pub fn euclid_proximity(a: &[BBox], b: &[BBox], spatio_temporal: bool) -> Result<f64, GeometryError> {
    if a.len() != b.len() {
        return Err(GeometryError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(GeometryError::EmptyTrack);
    }
    if spatio_temporal {
        Ok(-(a.iter().zip(b).map(|(p, q)| center_distance(p, q)).sum::<f64>() / a.len() as f64))
    } else {
        Ok(-center_distance(&a[0], &b[0]))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProximityMetric {
    #[serde(rename = "euclid_s")]
    EuclidS,
    #[serde(rename = "euclid_st")]
    EuclidSt,
    #[serde(rename = "giou_s")]
    GiouS,
    #[default]
    #[serde(rename = "tgiou")]
    Tgiou,
}

impl ProximityMetric {
    pub const ALL: [ProximityMetric; 4] = [Self::EuclidS, Self::EuclidSt, Self::GiouS, Self::Tgiou];

    pub fn name(self) -> &'static str {
        match self {
            Self::EuclidS => "euclid_s",
            Self::EuclidSt => "euclid_st",
            Self::GiouS => "giou_s",
            Self::Tgiou => "tgiou",
        }
    }

    pub fn pair(self, a: &[BBox], b: &[BBox]) -> Result<f64, GeometryError> {
        match self {
            Self::EuclidS => euclid_proximity(a, b, false),
            Self::EuclidSt => euclid_proximity(a, b, true),
            Self::GiouS => {
                if a.is_empty() || b.is_empty() {
                    Err(GeometryError::EmptyTrack)
                } else {
                    Ok(giou(&a[0], &b[0]))
                }
            }
            Self::Tgiou => tgiou(a, b),
        }
    }
}

impl fmt::Display for ProximityMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ProximityMetric {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| GeometryError::UnknownMetric(s.to_string()))
    }
}

/// Boxes of `n` individuals over `t` frames, individual-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxTrack {
    n: usize,
    t: usize,
    boxes: Vec<BBox>,
}

impl BoxTrack {
    pub fn new(n: usize, t: usize, boxes: Vec<BBox>) -> Result<Self, GeometryError> {
        if boxes.len() != n * t {
            return Err(GeometryError::TrackShape { n, t, got: boxes.len() });
        }
        if t == 0 {
            return Err(GeometryError::EmptyTrack);
        }
        for b in &boxes {
            b.validate()?;
        }
        Ok(Self { n, t, boxes })
    }

    pub fn individuals(&self) -> usize {
        self.n
    }

    pub fn frames(&self) -> usize {
        self.t
    }

    /// All frames of individual `i`.
    pub fn track(&self, i: usize) -> &[BBox] {
        &self.boxes[i * self.t..(i + 1) * self.t]
    }

    pub fn get(&self, i: usize, frame: usize) -> &BBox {
        &self.boxes[i * self.t + frame]
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    /// Same individuals in a new order: row `k` of the result is row `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        let boxes = order.iter().flat_map(|&i| self.track(i).iter().copied()).collect();
        Self {
            n: order.len(),
            t: self.t,
            boxes,
        }
    }
}

/// Symmetric `n x n` matrix of pairwise proximities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProximityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    pub metric: ProximityMetric,
}

impl ProximityMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

pub fn proximity_matrix(track: &BoxTrack, metric: ProximityMetric) -> ProximityMatrix {
    let n = track.individuals();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            // Tracks inside a BoxTrack share length and are non-empty.
            let v = metric.pair(track.track(i), track.track(j)).expect("validated track");
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    ProximityMatrix { n, values, metric }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn giou_examples() {
        let a = b(0.0, 0.0, 0.5, 0.5);
        assert_eq!(giou(&a, &a), 1.0);

        // Half-overlapping unit boxes scaled into the unit square.
        let a = b(0.0, 0.0, 0.5, 0.5);
        let c = b(0.25, 0.0, 0.75, 0.5);
        assert!((giou(&a, &c) - 1.0 / 3.0).abs() < 1e-15);

        let a = b(0.0, 0.0, 0.25, 0.25);
        let c = b(0.5, 0.0, 0.75, 0.25);
        assert!((giou(&a, &c) + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_boxes() {
        let p = b(0.3, 0.3, 0.3, 0.3);
        assert_eq!(giou(&p, &p), 1.0);
        let q = b(0.6, 0.6, 0.6, 0.6);
        // Distinct points: IoU 0, enclosing box fully uncovered.
        assert_eq!(giou(&p, &q), -1.0);
        // Collinear points give a zero-area hull and no penalty.
        let r = b(0.3, 0.6, 0.3, 0.6);
        assert_eq!(giou(&p, &r), 0.0);
    }

    #[test]
    fn invalid_boxes_are_rejected() {
        assert!(BBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        assert!(BBox::new(-0.1, 0.0, 0.5, 1.0).is_err());
    }

    #[test]
    fn tgiou_is_mean_of_frames() {
        let a = [b(0.0, 0.0, 0.5, 0.5), b(0.0, 0.0, 0.5, 0.5), b(0.0, 0.0, 0.25, 0.25)];
        let c = [b(0.0, 0.0, 0.5, 0.5), b(0.25, 0.0, 0.75, 0.5), b(0.5, 0.0, 0.75, 0.25)];
        let v = tgiou(&a, &c).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(tgiou(&a, &a).unwrap(), 1.0);
        assert_eq!(tgiou(&[], &[]), Err(GeometryError::EmptyTrack));
        assert!(tgiou(&a, &c[..2]).is_err());
    }

    #[test]
    fn euclid_examples() {
        let a = [b(0.1, 0.1, 0.2, 0.2); 2];
        assert_eq!(euclid_proximity(&a, &a, true).unwrap(), 0.0);
        let c = [b(0.4, 0.1, 0.5, 0.2); 2];
        assert!((euclid_proximity(&a, &c, false).unwrap() + 0.3).abs() < 1e-12);
        assert!((euclid_proximity(&a, &c, true).unwrap() + 0.3).abs() < 1e-12);
    }

    #[test]
    fn metric_names_round_trip() {
        for m in ProximityMetric::ALL {
            assert_eq!(m.name().parse::<ProximityMetric>().unwrap(), m);
        }
        assert!("iou".parse::<ProximityMetric>().is_err());
    }

    #[test]
    fn single_individual_matrix() {
        let t = BoxTrack::new(1, 2, vec![b(0.1, 0.1, 0.2, 0.3); 2]).unwrap();
        assert_eq!(proximity_matrix(&t, ProximityMetric::Tgiou).values, vec![1.0]);
    }

    #[test]
    fn co_moving_pair_is_closest_under_tgiou() {
        // Individuals 0 and 1 walk together; 2 starts next to 0 and leaves.
        let frames = |xs: [f64; 3]| -> Vec<BBox> { xs.iter().map(|&x| b(x, 0.4, x + 0.05, 0.6)).collect() };
        let mut boxes = frames([0.10, 0.15, 0.20]);
        boxes.extend(frames([0.13, 0.18, 0.23]));
        boxes.extend(frames([0.075, 0.40, 0.70]));
        let track = BoxTrack::new(3, 3, boxes).unwrap();
        let st = proximity_matrix(&track, ProximityMetric::Tgiou);
        assert!(st.at(0, 1) > st.at(0, 2) && st.at(0, 1) > st.at(1, 2));
        // At frame 0 the leaver overlaps individual 0 more than its true partner.
        let s = proximity_matrix(&track, ProximityMetric::GiouS);
        assert!(s.at(0, 2) > s.at(0, 1));
    }
}
