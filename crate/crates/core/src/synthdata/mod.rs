//! Synthetic panoramic scenes with known groups and three-level labels.
//!
//! Each group walks, stands, converges or diverges inside its own horizontal
//! slot of the panorama. Distractors stand next to a foreign group in the
//! first frame and rejoin their own group afterwards.

mod io;

pub use io::{blob_path, read_dataset, write_dataset, DATASET_FORMAT};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpatr::{C_GLB, C_IDV, C_SG};
use crate::geometry::{BBox, BoxTrack, GeometryError};
use crate::relation::{roi_align, GroupAssignment, RelationError};
use crate::tensor::{Tensor, TensorError};

pub const BOX_W: f64 = 0.03;
pub const BOX_H: f64 = 0.15;
pub const SPACING: f64 = 0.03;
const SPREAD: f64 = 0.015;
const WALK_STEP: f64 = 0.02;
const SLOT_MARGIN: f64 = 0.005;
const PROTOTYPE_SEED: u64 = 0x0005_eed0_f9e0;
const MAX_ATTEMPTS: usize = 32;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{0}")]
    Spec(String),
    #[error("group {group} does not fit its slot in frame {frame}")]
    Overcrowded { group: usize, frame: usize },
    #[error("individual {individual}: rendered features have cosine {cosine:.4} with their prototype")]
    Fidelity { individual: usize, cosine: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {detail}")]
    Parse { path: String, line: usize, detail: String },
    #[error("sample {index}: {detail}")]
    Sample { index: usize, detail: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Walk,
    Stand,
    Converge,
    Diverge,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [Self::Walk, Self::Stand, Self::Converge, Self::Diverge];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_moving(self) -> bool {
        self != Self::Stand
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    /// Pre-cropped individual stacks `[N, T, d, h, w]`.
    #[default]
    Cropped,
    /// Whole-scene feature grids `[T, d, H, W]`.
    Grid,
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cropped => "cropped",
            Self::Grid => "grid",
        })
    }
}

impl FromStr for Flavor {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cropped" => Ok(Self::Cropped),
            "grid" => Ok(Self::Grid),
            _ => Err(DataError::Spec(format!(
                "unknown flavor `{s}` (expected cropped or grid)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    pub individuals: usize,
    pub groups: usize,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub d: usize,
    pub sigma: f64,
    pub distractors: usize,
    /// One per group; sampled when empty.
    pub archetypes: Vec<Archetype>,
    pub crop_h: usize,
    pub crop_w: usize,
    pub flavor: Flavor,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            individuals: 6,
            groups: 2,
            frames: 3,
            grid_h: 16,
            grid_w: 192,
            d: 32,
            sigma: 0.1,
            distractors: 0,
            archetypes: Vec::new(),
            crop_h: 2,
            crop_w: 2,
            flavor: Flavor::Cropped,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |m: String| Err(DataError::Spec(m));
        if self.groups == 0 || self.groups > self.individuals {
            return fail(format!("{} groups for {} individuals", self.groups, self.individuals));
        }
        if self.frames == 0 || self.d == 0 || self.crop_h == 0 || self.crop_w == 0 {
            return fail("frames, d and crop size must be positive".into());
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return fail("empty scene grid".into());
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return fail(format!("invalid sigma {}", self.sigma));
        }
        if self.distractors > 0 && self.groups < 2 {
            return fail("distractors need at least two groups".into());
        }
        if self.distractors > self.individuals - self.groups {
            return fail(format!(
                "{} distractors leave some group without a regular member",
                self.distractors
            ));
        }
        if !self.archetypes.is_empty() && self.archetypes.len() != self.groups {
            return fail(format!(
                "{} archetypes for {} groups",
                self.archetypes.len(),
                self.groups
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SceneFeatures {
    Cropped(Tensor),
    Grid(Tensor),
}

impl SceneFeatures {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Self::Cropped(t) | Self::Grid(t) => t,
        }
    }

    pub fn flavor(&self) -> Flavor {
        match self {
            Self::Cropped(_) => Flavor::Cropped,
            Self::Grid(_) => Flavor::Grid,
        }
    }

    /// Feature width `d`.
    pub fn dim(&self) -> usize {
        match self {
            Self::Cropped(t) => t.shape()[2],
            Self::Grid(t) => t.shape()[1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub features: SceneFeatures,
    pub track: BoxTrack,
    pub groups: GroupAssignment,
    /// Sorted positive classes per individual.
    pub individual_labels: Vec<Vec<usize>>,
    /// Sorted positive classes per ground-truth group, in group-id order.
    pub social_labels: Vec<Vec<usize>>,
    pub global_labels: Vec<usize>,
    pub distractors: Vec<usize>,
}

impl SceneSample {
    pub fn individuals(&self) -> usize {
        self.track.individuals()
    }

    /// Individual feature stack `[N, T, d, crop_h, crop_w]`, cropping the scene
    /// grid when needed.
    pub fn individual_stack(&self, crop_h: usize, crop_w: usize) -> Result<Tensor, DataError> {
        match &self.features {
            SceneFeatures::Cropped(t) => {
                let s = t.shape();
                if s[3] != crop_h || s[4] != crop_w {
                    return Err(DataError::Spec(format!(
                        "sample is cropped to {}x{}, model expects {crop_h}x{crop_w}",
                        s[3], s[4]
                    )));
                }
                Ok(t.clone())
            }
            SceneFeatures::Grid(t) => Ok(roi_align(t, &self.track, crop_h, crop_w)?),
        }
    }

    /// Structural consistency of groups and label sets.
    pub fn check_labels(&self) -> Result<(), String> {
        let n = self.individuals();
        if self.groups.len() != n || self.individual_labels.len() != n {
            return Err(format!("{n} individuals but {} group ids", self.groups.len()));
        }
        if self.social_labels.len() != self.groups.num_groups() {
            return Err(format!(
                "{} groups but {} social label sets",
                self.groups.num_groups(),
                self.social_labels.len()
            ));
        }
        let sets = [
            (&self.individual_labels, C_IDV),
            (&self.social_labels, C_SG),
            (&vec![self.global_labels.clone()], C_GLB),
        ];
        for (labels, classes) in sets {
            for l in labels.iter() {
                if l.is_empty() {
                    return Err("label set without positives".into());
                }
                if let Some(c) = l.iter().find(|&&c| c >= classes) {
                    return Err(format!("class {c} out of range 0..{classes}"));
                }
            }
        }
        Ok(())
    }
}

pub fn multi_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    for &c in labels {
        v[c] = 1.0;
    }
    v
}

/// Fixed prototype vectors, independent of any scene seed. Above 32 channels norms grow with
/// `sqrt(d / 32)` so the per-channel signal stays level against per-channel noise.
#[derive(Clone, Debug)]
pub struct Prototypes {
    pub archetype: Vec<Vec<f64>>,
    pub action: Vec<Vec<f64>>,
}

impl Prototypes {
    pub fn new(d: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PROTOTYPE_SEED);
        let mut draw = |scale: f64| -> Vec<f64> {
            let n = Normal::new(0.0, 1.0).expect("unit normal");
            let v: Vec<f64> = (0..d).map(|_| n.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let target = scale * (d.max(32) as f64 / 32.0).sqrt();
            v.into_iter().map(|x| x / norm * target).collect()
        };
        let archetype = (0..Archetype::ALL.len()).map(|_| draw(2.5)).collect();
        let action = (0..C_IDV).map(|_| draw(1.5)).collect();
        Self { archetype, action }
    }

    /// Noise-free appearance of one individual, rounded to f32.
    pub fn appearance(&self, archetype: Archetype, actions: &[usize]) -> Vec<f64> {
        let mut v = self.archetype[archetype.index()].clone();
        for &a in actions {
            for (x, p) in v.iter_mut().zip(&self.action[a]) {
                *x += p;
            }
        }
        v.into_iter().map(round_f32).collect()
    }
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-300)
}

/// Social classes: the archetype plus moving (4) or static (5).
pub fn social_classes(archetype: Archetype) -> Vec<usize> {
    vec![archetype.index(), if archetype.is_moving() { 4 } else { 5 }]
}

/// Global classes: the archetype with the most members (lowest index on ties)
/// plus uniform (4) or mixed (5).
pub fn global_classes(archetypes: &[Archetype], sizes: &[usize]) -> Vec<usize> {
    let mut members = [0usize; 4];
    for (a, &s) in archetypes.iter().zip(sizes) {
        members[a.index()] += s;
    }
    let dominant = (0..4).fold(0, |best, k| if members[k] > members[best] { k } else { best });
    let uniform = archetypes.iter().all(|&a| a == archetypes[0]);
    vec![dominant, if uniform { 4 } else { 5 }]
}

/// Row spacing of an archetype in `frame` of `frames`.
fn spacing(archetype: Archetype, frame: usize, frames: usize) -> f64 {
    let progress = if frames > 1 {
        frame as f64 / (frames - 1) as f64
    } else {
        0.0
    };
    match archetype {
        Archetype::Converge => SPACING + SPREAD * (1.0 - progress),
        Archetype::Diverge => SPACING + SPREAD * progress,
        Archetype::Walk | Archetype::Stand => SPACING,
    }
}

struct Layout {
    /// Raw group index per generated individual.
    group_of: Vec<usize>,
    archetypes: Vec<Archetype>,
    /// Foreign group each distractor visits in frame 0.
    visits: Vec<Option<usize>>,
    boxes: Vec<BBox>,
}

fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Layout, DataError> {
    let (n, k, t) = (spec.individuals, spec.groups, spec.frames);
    let archetypes: Vec<Archetype> = if spec.archetypes.is_empty() {
        (0..k).map(|_| Archetype::ALL[rng.random_range(0..4)]).collect()
    } else {
        spec.archetypes.clone()
    };

    // Sizes differ by at most one; a random subset of groups takes the remainder.
    let mut sizes = vec![n / k; k];
    let mut extra: Vec<usize> = (0..k).collect();
    extra.shuffle(rng);
    for &g in extra.iter().take(n % k) {
        sizes[g] += 1;
    }
    let group_of: Vec<usize> = (0..k).flat_map(|g| vec![g; sizes[g]]).collect();

    // Distractors are dealt round-robin over groups in random order, never
    // taking a group's first member.
    let mut visits = vec![None; n];
    let mut pools: Vec<Vec<usize>> = (0..k)
        .map(|g| {
            let mut members: Vec<usize> = (0..n).filter(|&i| group_of[i] == g).skip(1).collect();
            members.shuffle(rng);
            members
        })
        .collect();
    let mut deal: Vec<usize> = (0..k).collect();
    deal.shuffle(rng);
    let mut candidates = Vec::with_capacity(spec.distractors);
    while candidates.len() < spec.distractors {
        let before = candidates.len();
        for &g in &deal {
            if candidates.len() < spec.distractors {
                candidates.extend(pools[g].pop());
            }
        }
        if candidates.len() == before {
            break;
        }
    }
    for &i in &candidates {
        let mut foreign = rng.random_range(0..k - 1);
        if foreign >= group_of[i] {
            foreign += 1;
        }
        visits[i] = Some(foreign);
    }

    let slot = 1.0 / k as f64;
    let centre_y: Vec<f64> = (0..k)
        .map(|g| if g % 2 == 0 { 0.3 } else { 0.7 } + rng.random_range(-0.03..0.03))
        .collect();
    let walk: Vec<f64> = (0..k)
        .map(|_| if rng.random_bool(0.5) { WALK_STEP } else { -WALK_STEP })
        .collect();

    let mut boxes: Vec<Option<BBox>> = vec![None; n * t];
    for f in 0..t {
        for g in 0..k {
            // Regular members first, then visitors (frame 0) or returning distractors.
            let mut row: Vec<usize> = (0..n)
                .filter(|&i| group_of[i] == g && (f > 0 || visits[i].is_none()))
                .collect();
            row.sort_by_key(|&i| visits[i].is_some());
            if f == 0 {
                row.extend((0..n).filter(|&i| visits[i] == Some(g)));
            }
            let s = spacing(archetypes[g], f, t);
            let shift = if archetypes[g] == Archetype::Walk {
                walk[g] * (f as f64 - (t - 1) as f64 / 2.0)
            } else {
                0.0
            };
            let cx = (g as f64 + 0.5) * slot + shift;
            let lo = g as f64 * slot + SLOT_MARGIN;
            let hi = (g + 1) as f64 * slot - SLOT_MARGIN;
            for (j, &i) in row.iter().enumerate() {
                let x = cx + (j as f64 - (row.len() - 1) as f64 / 2.0) * s;
                let y = centre_y[g] + rng.random_range(-0.01..0.01);
                let b = BBox::from_center(x, y, BOX_W, BOX_H);
                if b.x1 < lo || b.x2 > hi || b.y1 < 0.0 || b.y2 > 1.0 {
                    return Err(DataError::Overcrowded { group: g, frame: f });
                }
                boxes[i * t + f] = Some(b);
            }
        }
    }
    Ok(Layout {
        group_of,
        archetypes,
        visits,
        // Every individual sits in exactly one row per frame.
        boxes: boxes.into_iter().map(|b| b.expect("placed")).collect(),
    })
}

/// Grid cells the bilinear crop of `b` reads from.
fn footprint(b: &BBox, grid_h: usize, grid_w: usize, crop_h: usize, crop_w: usize) -> Vec<(usize, usize)> {
    let axis = |lo: f64, len: f64, bins: usize, extent: usize| -> Vec<usize> {
        let mut cells = Vec::new();
        for j in 0..bins {
            let u = lo + (j as f64 + 0.5) / bins as f64 * len;
            let c = (u * extent as f64 - 0.5).clamp(0.0, (extent - 1) as f64);
            let c0 = c.floor() as usize;
            cells.push(c0);
            cells.push((c0 + 1).min(extent - 1));
        }
        cells.sort_unstable();
        cells.dedup();
        cells
    };
    let ys = axis(b.y1, b.height(), crop_h, grid_h);
    let xs = axis(b.x1, b.width(), crop_w, grid_w);
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect()
}

/// Generates one scene; overcrowded layouts are an error.
pub fn generate_scene(spec: &SceneSpec) -> Result<SceneSample, DataError> {
    spec.validate()?;
    let protos = Prototypes::new(spec.d);
    generate_with(spec, &protos)
}

fn generate_with(spec: &SceneSpec, protos: &Prototypes) -> Result<SceneSample, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lay = layout(spec, &mut rng)?;
    let (n, k, t, d) = (spec.individuals, spec.groups, spec.frames, spec.d);

    let mut actions = Vec::with_capacity(n);
    for i in 0..n {
        let arch = lay.archetypes[lay.group_of[i]];
        let role = 2 * arch.index() + rng.random_range(0..2);
        let count = rng.random_range(1..=3);
        let mut allowed = vec![3 * role, 3 * role + 1, 3 * role + 2];
        allowed.shuffle(&mut rng);
        let mut chosen: Vec<usize> = allowed.into_iter().take(count).collect();
        chosen.sort_unstable();
        actions.push(chosen);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let appearance: Vec<Vec<f64>> = order
        .iter()
        .map(|&i| protos.appearance(lay.archetypes[lay.group_of[i]], &actions[i]))
        .collect();
    let raw_track = BoxTrack::new(n, t, lay.boxes.clone())?;
    let track = raw_track.permuted(&order);

    let noise = Normal::new(0.0, spec.sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let sample_noise = |rng: &mut ChaCha8Rng| if spec.sigma > 0.0 { noise.sample(rng) } else { 0.0 };
    let (h, w) = (spec.crop_h, spec.crop_w);
    let features = match spec.flavor {
        Flavor::Cropped => {
            let mut data = Vec::with_capacity(n * t * d * h * w);
            for app in &appearance {
                for _ in 0..t {
                    for &v in app {
                        for _ in 0..h * w {
                            data.push(round_f32(v + sample_noise(&mut rng)));
                        }
                    }
                }
            }
            SceneFeatures::Cropped(Tensor::new(vec![n, t, d, h, w], data)?)
        }
        Flavor::Grid => {
            let (gh, gw) = (spec.grid_h, spec.grid_w);
            let mut data = vec![0.0; t * d * gh * gw];
            for f in 0..t {
                for (i, app) in appearance.iter().enumerate() {
                    for (y, x) in footprint(track.get(i, f), gh, gw, h, w) {
                        for (c, &v) in app.iter().enumerate() {
                            data[((f * d + c) * gh + y) * gw + x] = v;
                        }
                    }
                }
            }
            for v in data.iter_mut() {
                *v = round_f32(*v + sample_noise(&mut rng));
            }
            SceneFeatures::Grid(Tensor::new(vec![t, d, gh, gw], data)?)
        }
    };

    let raw_groups: Vec<usize> = order.iter().map(|&i| lay.group_of[i]).collect();
    let groups = GroupAssignment::from_labels(&raw_groups);
    // Dense id `j + 1` corresponds to raw group `first[j]`.
    let mut first: Vec<usize> = Vec::with_capacity(k);
    for &g in &raw_groups {
        if !first.contains(&g) {
            first.push(g);
        }
    }
    let social_labels = first.iter().map(|&g| social_classes(lay.archetypes[g])).collect();
    let sizes: Vec<usize> = (0..k)
        .map(|g| lay.group_of.iter().filter(|&&x| x == g).count())
        .collect();
    let global_labels = global_classes(&lay.archetypes, &sizes);
    let individual_labels = order.iter().map(|&i| actions[i].clone()).collect();
    let distractors = (0..n).filter(|&p| lay.visits[order[p]].is_some()).collect();

    let sample = SceneSample {
        features,
        track,
        groups,
        individual_labels,
        social_labels,
        global_labels,
        distractors,
    };
    if spec.sigma <= 0.1 {
        check_fidelity(&sample, &appearance, h, w)?;
    }
    Ok(sample)
}

fn check_fidelity(sample: &SceneSample, appearance: &[Vec<f64>], h: usize, w: usize) -> Result<(), DataError> {
    let stack = sample.individual_stack(h, w)?;
    let s = stack.shape().to_vec();
    let (t, d) = (s[1], s[2]);
    for (i, app) in appearance.iter().enumerate() {
        for f in 0..t {
            for cell in 0..h * w {
                let v: Vec<f64> = (0..d).map(|c| stack.at(&[i, f, c, cell / w, cell % w])).collect();
                let cosine = cosine(&v, app);
                if cosine <= 0.9 {
                    return Err(DataError::Fidelity { individual: i, cosine });
                }
            }
        }
    }
    Ok(())
}

/// Settings for a whole dataset; per-scene sizes are drawn from the ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub scenes: usize,
    pub seed: u64,
    pub individuals: [usize; 2],
    pub groups: [usize; 2],
    pub distractors: usize,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub d: usize,
    pub sigma: f64,
    pub crop_h: usize,
    pub crop_w: usize,
    pub flavor: Flavor,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        let s = SceneSpec::default();
        Self {
            scenes: 200,
            seed: 0,
            individuals: [4, 8],
            groups: [2, 3],
            distractors: 0,
            frames: s.frames,
            grid_h: s.grid_h,
            grid_w: s.grid_w,
            d: s.d,
            sigma: s.sigma,
            crop_h: s.crop_h,
            crop_w: s.crop_w,
            flavor: s.flavor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub samples: Vec<SceneSample>,
}

/// Split streams never share scene seeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Generates `spec.scenes` scenes from the split's seed stream, redrawing a
/// scene's seed when its layout is overcrowded.
pub fn generate_dataset(spec: &DatasetSpec, split: Split) -> Result<Dataset, DataError> {
    let [n_lo, n_hi] = spec.individuals;
    let [g_lo, g_hi] = spec.groups;
    if n_lo == 0 || n_lo > n_hi || g_lo == 0 || g_lo > g_hi || g_lo > n_lo {
        return Err(DataError::Spec(format!(
            "invalid ranges: individuals {:?}, groups {:?}",
            spec.individuals, spec.groups
        )));
    }
    let protos = Prototypes::new(spec.d);
    let mut stream = ChaCha8Rng::seed_from_u64(spec.seed);
    stream.set_stream(match split {
        Split::Train => 1,
        Split::Val => 2,
    });
    let mut samples = Vec::with_capacity(spec.scenes);
    for index in 0..spec.scenes {
        let mut last = None;
        for _ in 0..MAX_ATTEMPTS {
            let seed = stream.random::<u64>();
            let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_a5a5);
            let individuals = pick.random_range(n_lo..=n_hi);
            let groups = pick.random_range(g_lo..=g_hi.min(individuals));
            let scene = SceneSpec {
                seed,
                individuals,
                groups,
                frames: spec.frames,
                grid_h: spec.grid_h,
                grid_w: spec.grid_w,
                d: spec.d,
                sigma: spec.sigma,
                distractors: if groups >= 2 {
                    spec.distractors.min(individuals - groups)
                } else {
                    0
                },
                archetypes: Vec::new(),
                crop_h: spec.crop_h,
                crop_w: spec.crop_w,
                flavor: spec.flavor,
            };
            scene.validate()?;
            match generate_with(&scene, &protos) {
                Ok(s) => {
                    last = Some(Ok(s));
                    break;
                }
                Err(e @ DataError::Overcrowded { .. }) => last = Some(Err(e)),
                Err(e) => return Err(e),
            }
        }
        match last {
            Some(Ok(s)) => samples.push(s),
            Some(Err(e)) => {
                return Err(DataError::Sample {
                    index,
                    detail: format!("no valid layout in {MAX_ATTEMPTS} attempts: {e}"),
                })
            }
            None => unreachable!("at least one attempt"),
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{giou, tgiou};

    fn spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn noiseless_pair_matches_prototype() {
        for flavor in [Flavor::Cropped, Flavor::Grid] {
            let s = SceneSpec {
                individuals: 2,
                groups: 1,
                sigma: 0.0,
                flavor,
                ..spec(3)
            };
            let sample = generate_scene(&s).unwrap();
            let protos = Prototypes::new(s.d);
            let stack = sample.individual_stack(2, 2).unwrap();
            for i in 0..2 {
                let arch = Archetype::ALL[sample.social_labels[0][0]];
                let app = protos.appearance(arch, &sample.individual_labels[i]);
                for f in 0..s.frames {
                    for c in 0..s.d {
                        for cell in 0..4 {
                            assert_eq!(stack.at(&[i, f, c, cell / 2, cell % 2]), app[c], "{flavor}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn same_seed_same_sample() {
        for flavor in [Flavor::Cropped, Flavor::Grid] {
            let s = SceneSpec { flavor, ..spec(9) };
            assert_eq!(generate_scene(&s).unwrap(), generate_scene(&s).unwrap());
        }
    }

    #[test]
    fn labels_are_consistent() {
        for seed in 0..20 {
            let s = generate_scene(&spec(seed)).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
            s.check_labels().unwrap();
            for (i, labels) in s.individual_labels.iter().enumerate() {
                let arch = s.social_labels[s.groups.labels()[i] - 1][0];
                assert!((1..=3).contains(&labels.len()));
                assert!(labels.iter().all(|&a| a / 6 == arch));
            }
        }
    }

    #[test]
    fn distractor_separates_only_over_time() {
        let s = SceneSpec {
            individuals: 6,
            groups: 2,
            distractors: 1,
            archetypes: vec![Archetype::Stand, Archetype::Stand],
            ..spec(5)
        };
        let sample = generate_scene(&s).unwrap();
        let dx = sample.distractors[0];
        let own = sample.groups.labels()[dx];
        let labels = sample.groups.labels();
        let foreign: Vec<usize> = (0..6).filter(|&j| labels[j] != own).collect();
        let mates: Vec<usize> = (0..6).filter(|&j| labels[j] == own && j != dx).collect();
        let tr = &sample.track;
        let best_foreign = foreign
            .iter()
            .map(|&j| tgiou(tr.track(dx), tr.track(j)).unwrap())
            .fold(f64::MIN, f64::max);
        let best_mate = mates
            .iter()
            .map(|&j| tgiou(tr.track(dx), tr.track(j)).unwrap())
            .fold(f64::MIN, f64::max);
        assert!(best_mate > best_foreign);
        let frame0_foreign = foreign
            .iter()
            .map(|&j| giou(tr.get(dx, 0), tr.get(j, 0)))
            .fold(f64::MIN, f64::max);
        let frame0_mate = mates
            .iter()
            .map(|&j| giou(tr.get(dx, 0), tr.get(j, 0)))
            .fold(f64::MIN, f64::max);
        assert!(frame0_foreign > frame0_mate);
    }

    #[test]
    fn overcrowding_is_reported() {
        let s = SceneSpec {
            individuals: 24,
            groups: 4,
            ..spec(1)
        };
        assert!(matches!(generate_scene(&s), Err(DataError::Overcrowded { .. })));
    }

    #[test]
    fn invalid_specs() {
        assert!(generate_scene(&SceneSpec { groups: 7, ..spec(0) }).is_err());
        assert!(generate_scene(&SceneSpec {
            groups: 1,
            distractors: 1,
            ..spec(0)
        })
        .is_err());
    }

    #[test]
    fn splits_use_disjoint_seeds() {
        let ds = DatasetSpec {
            scenes: 4,
            ..DatasetSpec::default()
        };
        let a = generate_dataset(&ds, Split::Train).unwrap();
        let b = generate_dataset(&ds, Split::Val).unwrap();
        assert_eq!(a.samples.len(), 4);
        assert!(a.samples.iter().all(|s| !b.samples.contains(s)));
        assert_eq!(a, generate_dataset(&ds, Split::Train).unwrap());
    }

    #[test]
    fn wide_features_pass_fidelity() {
        for flavor in [Flavor::Cropped, Flavor::Grid] {
            let ds = DatasetSpec {
                scenes: 5,
                d: 256,
                flavor,
                ..DatasetSpec::default()
            };
            generate_dataset(&ds, Split::Train).unwrap();
        }
    }

    #[test]
    fn global_label_rule() {
        use Archetype::*;
        assert_eq!(global_classes(&[Walk, Stand], &[2, 3]), vec![1, 5]);
        assert_eq!(global_classes(&[Diverge, Diverge], &[2, 2]), vec![3, 4]);
        assert_eq!(global_classes(&[Converge, Walk], &[2, 2]), vec![0, 5]);
    }
}
