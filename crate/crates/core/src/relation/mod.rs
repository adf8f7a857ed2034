//! Proximity-based relation encoding: RoI cropping, the panoramic positional
//! embedding, axial spatio-temporal attention, the visual similarity and
//! physical proximity relations, group counting and K-means grouping.

pub mod kmeans;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{proximity_matrix, BBox, BoxTrack, ProximityMetric};
use crate::tensor::nn::{self, Params};
use crate::tensor::{sinusoidal_embedding, Graph, ParamStore, Tensor, TensorError, Var};

pub use kmeans::{kmeans_best_of, kmeans_groups, GroupAssignment, KMeansResult, DEFAULT_MAX_ITERS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelationError {
    #[error("scene feature grid is empty: {0:?}")]
    EmptyGrid(Vec<usize>),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("cannot form {groups} groups from {individuals} individuals")]
    TooManyGroups { groups: usize, individuals: usize },
    #[error("unknown {axis} switch `{value}`")]
    UnknownSwitch { axis: &'static str, value: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

macro_rules! switch_enum {
    ($name:ident, $axis:literal, default $def:ident, { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        pub enum $name {
            $(
                #[serde(rename = $text)]
                $variant,
            )+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl Default for $name {
            fn default() -> Self {
                $name::$def
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = RelationError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| RelationError::UnknownSwitch {
                        axis: $axis,
                        value: s.to_string(),
                    })
            }
        }
    };
}

switch_enum!(PpeMode, "ppe", default Both, {
    Off => "off",
    Spatial => "spatial",
    Temporal => "temporal",
    Both => "both",
});

switch_enum!(RelationMode, "relation", default Both, {
    None => "none",
    RsOnly => "rs_only",
    RpOnly => "rp_only",
    Both => "both",
});

impl RelationMode {
    pub fn uses_similarity(self) -> bool {
        matches!(self, Self::RsOnly | Self::Both)
    }
}

/// Samples `grid` (`[channels, height, width]`, row-major) bilinearly at the
/// continuous cell coordinate `(cy, cx)`; coordinates clamp to the border.
fn bilinear(grid: &[f64], height: usize, width: usize, channel: usize, cy: f64, cx: f64) -> f64 {
    let cy = cy.clamp(0.0, (height - 1) as f64);
    let cx = cx.clamp(0.0, (width - 1) as f64);
    let y0 = cy.floor() as usize;
    let x0 = cx.floor() as usize;
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let fy = cy - y0 as f64;
    let fx = cx - x0 as f64;
    let at = |y: usize, x: usize| grid[(channel * height + y) * width + x];
    let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
    let bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
    (1.0 - fy) * top + fy * bottom
}

/// Crops one box out of a `[channels, height, width]` grid into
/// `[channels, out_h, out_w]`, one bilinear sample at each bin center.
///
/// Normalized coordinate `u` maps to cell coordinate `u * extent - 0.5`, so
/// cell `j` is centered at `(j + 0.5) / extent`.
pub fn roi_align_frame(
    grid: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    b: &BBox,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let x0 = b.x1 * width as f64;
    let y0 = b.y1 * height as f64;
    let bw = b.width() * width as f64 / out_w as f64;
    let bh = b.height() * height as f64 / out_h as f64;
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        for i in 0..out_h {
            let cy = y0 + (i as f64 + 0.5) * bh - 0.5;
            for j in 0..out_w {
                let cx = x0 + (j as f64 + 0.5) * bw - 0.5;
                out.push(bilinear(grid, height, width, c, cy, cx));
            }
        }
    }
    out
}

/// RoIAlign over a scene feature `[T, d, H, W]` for every individual and
/// frame, producing `[N, T, d, out_h, out_w]`.
pub fn roi_align(scene: &Tensor, track: &BoxTrack, out_h: usize, out_w: usize) -> Result<Tensor, RelationError> {
    let shape = scene.shape();
    if shape.len() != 4 || shape.contains(&0) {
        return Err(RelationError::EmptyGrid(shape.to_vec()));
    }
    if out_h == 0 || out_w == 0 {
        return Err(RelationError::Shape(format!("output size {out_h}x{out_w}")));
    }
    let (t, d, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if track.frames() != t {
        return Err(RelationError::Shape(format!(
            "scene has {t} frames, track has {}",
            track.frames()
        )));
    }
    let n = track.individuals();
    let frame_len = d * h * w;
    let mut data = Vec::with_capacity(n * t * d * out_h * out_w);
    for i in 0..n {
        for f in 0..t {
            let grid = &scene.data()[f * frame_len..(f + 1) * frame_len];
            data.extend(roi_align_frame(grid, d, h, w, track.get(i, f), out_h, out_w));
        }
    }
    Ok(Tensor::new(vec![n, t, d, out_h, out_w], data)?)
}

/// `[N, T, d, h, w]` -> `[N, T, h, w, d]`.
pub fn channels_last(t: &Tensor) -> Result<Tensor, RelationError> {
    let s = t.shape();
    if s.len() != 5 {
        return Err(RelationError::Shape(format!("expected rank 5, got {s:?}")));
    }
    let (n, tt, d, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let mut out = vec![0.0; t.numel()];
    let src = t.data();
    for a in 0..n * tt {
        for c in 0..d {
            for y in 0..h {
                for x in 0..w {
                    out[((a * h + y) * w + x) * d + c] = src[((a * d + c) * h + y) * w + x];
                }
            }
        }
    }
    Ok(Tensor::new(vec![n, tt, h, w, d], out)?)
}

/// Fixed sinusoidal embedding of the whole scene grid plus a temporal table.
///
/// Channels `0..d/2` encode the row index, `d/2..d` the column index.
#[derive(Clone, Debug, PartialEq)]
pub struct PanoramicEmbedding {
    /// `[d, H, W]`.
    pub grid: Tensor,
    /// `[T, d]`.
    pub temporal: Tensor,
}

impl PanoramicEmbedding {
    pub fn new(height: usize, width: usize, frames: usize, d: usize) -> Result<Self, RelationError> {
        if !d.is_multiple_of(4) {
            return Err(
                TensorError::Config(format!("panoramic embedding width must be a multiple of 4, got {d}")).into(),
            );
        }
        if height == 0 || width == 0 {
            return Err(RelationError::EmptyGrid(vec![height, width]));
        }
        let half = d / 2;
        let rows = sinusoidal_embedding(height, half)?;
        let cols = sinusoidal_embedding(width, half)?;
        let mut grid = vec![0.0; d * height * width];
        for c in 0..d {
            for y in 0..height {
                for x in 0..width {
                    grid[(c * height + y) * width + x] = if c < half {
                        rows.at(&[y, c])
                    } else {
                        cols.at(&[x, c - half])
                    };
                }
            }
        }
        Ok(Self {
            grid: Tensor::new(vec![d, height, width], grid)?,
            temporal: sinusoidal_embedding(frames, d)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.grid.shape()[0]
    }

    /// Spatial term `[N, T, d, out_h, out_w]` (the scene embedding cropped per
    /// box and frame) and the temporal table `[T, d]`.
    pub fn crop(&self, track: &BoxTrack, out_h: usize, out_w: usize) -> Result<PanoramicCrop, RelationError> {
        let s = self.grid.shape();
        let (d, h, w) = (s[0], s[1], s[2]);
        let t = track.frames();
        if self.temporal.shape()[0] != t {
            return Err(RelationError::Shape(format!(
                "embedding built for {} frames, track has {t}",
                self.temporal.shape()[0]
            )));
        }
        let n = track.individuals();
        let mut data = Vec::with_capacity(n * t * d * out_h * out_w);
        for i in 0..n {
            for f in 0..t {
                data.extend(roi_align_frame(
                    self.grid.data(),
                    d,
                    h,
                    w,
                    track.get(i, f),
                    out_h,
                    out_w,
                ));
            }
        }
        Ok(PanoramicCrop {
            spatial: Tensor::new(vec![n, t, d, out_h, out_w], data)?,
            temporal: self.temporal.clone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PanoramicCrop {
    pub spatial: Tensor,
    pub temporal: Tensor,
}

impl PanoramicCrop {
    /// Embedding added before every axial attention stage, channels-last
    /// `[N, T, h, w, d]`; `None` when the embedding is switched off.
    pub fn combined(&self, mode: PpeMode) -> Result<Option<Tensor>, RelationError> {
        if mode == PpeMode::Off {
            return Ok(None);
        }
        let mut e = channels_last(&self.spatial)?;
        let s = e.shape().to_vec();
        let (t, h, w, d) = (s[1], s[2], s[3], s[4]);
        let use_spatial = matches!(mode, PpeMode::Spatial | PpeMode::Both);
        let use_temporal = matches!(mode, PpeMode::Temporal | PpeMode::Both);
        let temporal = self.temporal.data();
        for (idx, v) in e.data_mut().iter_mut().enumerate() {
            let c = idx % d;
            let f = (idx / (d * w * h)) % t;
            let sp = if use_spatial { *v } else { 0.0 };
            let tp = if use_temporal { temporal[f * d + c] } else { 0.0 };
            *v = sp + tp;
        }
        Ok(Some(e))
    }
}

pub fn init_axial(store: &mut ParamStore, rng: &mut impl Rng, d: usize) {
    for axis in ["t", "h", "w"] {
        nn::init_attention(store, rng, &format!("axial.{axis}"), d);
    }
}

fn attend_along(
    g: &mut Graph,
    p: &Params,
    prefix: &str,
    x: Var,
    axes: &[usize; 5],
    heads: usize,
) -> Result<Var, RelationError> {
    let moved = g.permute(x, axes)?;
    let s = g.shape(moved).to_vec();
    let seq = g.reshape(moved, &[s[0] * s[1] * s[2], s[3], s[4]])?;
    let y = nn::multi_head_self_attention(g, p, prefix, seq, heads)?;
    let y = g.reshape(y, &s)?;
    let mut inverse = [0usize; 5];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    Ok(g.permute(y, &inverse)?)
}

/// `F̄ = A_w(A_h(A_t(F + e) + e) + e) + F` over channels-last `[N, T, h, w, d]`
/// features; each `A_*` attends along one axis with the other axes (and the
/// individual axis) as batch.
pub fn axial_attention(
    g: &mut Graph,
    p: &Params,
    features: Var,
    embedding: Option<Var>,
    heads: usize,
) -> Result<Var, RelationError> {
    if g.shape(features).len() != 5 {
        return Err(RelationError::Shape(format!(
            "axial attention expects [N, T, h, w, d], got {:?}",
            g.shape(features)
        )));
    }
    let inject = |g: &mut Graph, x: Var| -> Result<Var, RelationError> {
        match embedding {
            Some(e) => Ok(g.add(x, e)?),
            None => Ok(x),
        }
    };
    let x = inject(g, features)?;
    let x = attend_along(g, p, "axial.t", x, &[0, 2, 3, 1, 4], heads)?;
    let x = inject(g, x)?;
    let x = attend_along(g, p, "axial.h", x, &[0, 1, 3, 2, 4], heads)?;
    let x = inject(g, x)?;
    let x = attend_along(g, p, "axial.w", x, &[0, 1, 2, 3, 4], heads)?;
    Ok(g.add(x, features)?)
}

/// Mean over `(T, h, w)`: `[N, T, h, w, d]` -> `[N, d]`.
pub fn pool_individuals(g: &mut Graph, x: Var) -> Result<Var, RelationError> {
    let s = g.shape(x).to_vec();
    let flat = g.reshape(x, &[s[0], s[1] * s[2] * s[3], s[4]])?;
    Ok(g.mean_axis(flat, 1)?)
}

pub fn init_similarity(store: &mut ParamStore, rng: &mut impl Rng, d: usize) {
    nn::init_linear(store, rng, "relation.theta", d, d, false);
    nn::init_linear(store, rng, "relation.phi", d, d, false);
}

/// Row-wise `softmax((P W_theta)(P W_phi)^T)` over pooled features `[N, d]`.
pub fn similarity_matrix(g: &mut Graph, p: &Params, pooled: Var) -> Result<Var, RelationError> {
    let a = nn::linear(g, p, "relation.theta", pooled)?;
    let b = nn::linear(g, p, "relation.phi", pooled)?;
    let bt = g.transpose(b)?;
    let logits = g.matmul(a, bt)?;
    Ok(g.softmax(logits, 1)?)
}

/// Physical proximity relation as a constant `[N, N]` tensor.
pub fn proximity_relation(track: &BoxTrack, metric: ProximityMetric) -> Tensor {
    let m = proximity_matrix(track, metric);
    Tensor::new(vec![m.n, m.n], m.values).expect("square matrix")
}

/// `R = (R_s + R_p) / 2`.
pub fn fuse_relations(g: &mut Graph, rs: Var, rp: Var) -> Result<Var, RelationError> {
    let s = g.add(rs, rp)?;
    Ok(g.scale(s, 0.5))
}

/// The relation actually used for counting and clustering under `mode`;
/// `none` falls back to the identity so `R F̄ = F̄`.
pub fn relation_for_mode(g: &mut Graph, mode: RelationMode, rs: Var, rp: Var) -> Result<Var, RelationError> {
    match mode {
        RelationMode::Both => fuse_relations(g, rs, rp),
        RelationMode::RsOnly => Ok(rs),
        RelationMode::RpOnly => Ok(rp),
        RelationMode::None => {
            let n = g.shape(rs)[0];
            Ok(g.constant(Tensor::eye(n)))
        }
    }
}

pub fn init_count_head(store: &mut ParamStore, rng: &mut impl Rng, d: usize) {
    nn::init_linear(store, rng, "count.fc1", d, d, true);
    nn::init_linear(store, rng, "count.fc2", d, 1, true);
}

/// `n_g = sigmoid(fc2(relu(fc1(mean_i (R P)_i))))`, a scalar in (0, 1).
pub fn group_count_head(g: &mut Graph, p: &Params, relation_features: Var) -> Result<Var, RelationError> {
    let avg = g.mean_axis(relation_features, 0)?;
    let d = g.shape(avg)[0];
    let avg = g.reshape(avg, &[1, d])?;
    let h = nn::linear(g, p, "count.fc1", avg)?;
    let h = g.relu(h);
    let o = nn::linear(g, p, "count.fc2", h)?;
    let o = g.sigmoid(o);
    Ok(g.reshape(o, &[])?)
}

/// `clamp(round_half_up(individuals * fraction), 1, individuals)`.
pub fn group_count(individuals: usize, fraction: f64) -> usize {
    let raw = (individuals as f64 * fraction + 0.5).floor();
    (raw.max(1.0) as usize).min(individuals.max(1))
}
