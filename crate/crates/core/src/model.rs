//! The full network: axial relation encoding, grouping, DPATr and the three
//! classifiers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpatr::{self, ActivityScores, DpatrConfig, DpatrError, Structure, C_GLB, C_IDV, C_SG};
use crate::geometry::ProximityMetric;
use crate::relation::{self, kmeans, GroupAssignment, PanoramicEmbedding, PpeMode, RelationError, RelationMode};
use crate::synthdata::{DataError, SceneSample};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::nn::Params;
use crate::tensor::{AdamState, Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Relation(#[from] RelationError),
    #[error(transparent)]
    Dpatr(#[from] DpatrError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingSource {
    #[default]
    Predicted,
    GtGroups,
    GtCount,
}

impl GroupingSource {
    pub const ALL: [GroupingSource; 3] = [Self::Predicted, Self::GtGroups, Self::GtCount];

    pub fn name(self) -> &'static str {
        match self {
            Self::Predicted => "predicted",
            Self::GtGroups => "gt_groups",
            Self::GtCount => "gt_count",
        }
    }
}

impl std::fmt::Display for GroupingSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GroupingSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown grouping `{s}` (expected predicted, gt_groups or gt_count)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub frames: usize,
    /// Scene grid the panoramic embedding is built on.
    pub grid_h: usize,
    pub grid_w: usize,
    pub ppe: PpeMode,
    pub proximity: ProximityMetric,
    pub relation: RelationMode,
    pub structure: Structure,
    pub kmeans_restarts: u64,
    pub kmeans_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 256,
            heads: 4,
            layers: 4,
            crop_h: 2,
            crop_w: 2,
            frames: 3,
            grid_h: 16,
            grid_w: 96,
            ppe: PpeMode::Both,
            proximity: ProximityMetric::Tgiou,
            relation: RelationMode::Both,
            structure: Structure::Dpatr,
            kmeans_restarts: 5,
            kmeans_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn dpatr(&self) -> DpatrConfig {
        DpatrConfig {
            d: self.d,
            layers: self.layers,
            heads: self.heads,
            structure: self.structure,
        }
    }
}

/// How the social path obtains its groups.
#[derive(Clone, Copy, Debug)]
pub enum Grouping<'a> {
    Given(&'a GroupAssignment),
    Predicted,
    /// K-means with a fixed number of groups.
    Count(usize),
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub pooled: Var,
    pub rs: Var,
    pub rp: Var,
    pub relation: Var,
    pub relation_features: Var,
    pub count: Var,
    pub groups: GroupAssignment,
    pub scores: ActivityScores,
    pub aux: Var,
}

/// Thresholded labels of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub groups: GroupAssignment,
    pub individual: Vec<Vec<usize>>,
    pub social: Vec<Vec<usize>>,
    pub global: Vec<usize>,
    pub count_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct SpdpModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    embedding: PanoramicEmbedding,
}

impl SpdpModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d;
        relation::init_axial(&mut params, &mut rng, d);
        relation::init_similarity(&mut params, &mut rng, d);
        relation::init_count_head(&mut params, &mut rng, d);
        dpatr::init_dpatr(&mut params, &mut rng, &config.dpatr());
        dpatr::init_heads(&mut params, &mut rng, d, [C_IDV, C_SG, C_GLB]);
        Self::with_params(config, params)
    }

    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self, ModelError> {
        if !config.d.is_multiple_of(config.heads.max(1)) || config.heads == 0 {
            return Err(ModelError::DimMismatch(format!(
                "d = {} is not divisible by {} heads",
                config.d, config.heads
            )));
        }
        let embedding = PanoramicEmbedding::new(config.grid_h, config.grid_w, config.frames, config.d)?;
        Ok(Self {
            config,
            params,
            embedding,
        })
    }

    fn check_sample(&self, sample: &SceneSample) -> Result<(), ModelError> {
        let d = sample.features.dim();
        if d != self.config.d {
            return Err(ModelError::DimMismatch(format!(
                "dataset features have width {d}, model expects {}",
                self.config.d
            )));
        }
        if sample.track.frames() != self.config.frames {
            return Err(ModelError::DimMismatch(format!(
                "sample has {} frames, model expects {}",
                sample.track.frames(),
                self.config.frames
            )));
        }
        Ok(())
    }

    /// Runs the network on one scene inside `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Params,
        sample: &SceneSample,
        grouping: Grouping,
    ) -> Result<Forward, ModelError> {
        self.check_sample(sample)?;
        let cfg = &self.config;
        let stack = sample.individual_stack(cfg.crop_h, cfg.crop_w)?;
        let features = g.constant(relation::channels_last(&stack)?);
        let embedding = self
            .embedding
            .crop(&sample.track, cfg.crop_h, cfg.crop_w)?
            .combined(cfg.ppe)?
            .map(|e| g.constant(e));
        let fbar = relation::axial_attention(g, p, features, embedding, cfg.heads)?;
        let pooled = relation::pool_individuals(g, fbar)?;
        let rs = relation::similarity_matrix(g, p, pooled)?;
        let rp = g.constant(relation::proximity_relation(&sample.track, cfg.proximity));
        let rel = relation::relation_for_mode(g, cfg.relation, rs, rp)?;
        let relation_features = g.matmul(rel, pooled)?;
        let count = relation::group_count_head(g, p, relation_features)?;

        let n = sample.individuals();
        let groups = match grouping {
            Grouping::Given(gt) => gt.clone(),
            Grouping::Predicted => {
                let k = relation::group_count(n, g.value(count).item());
                self.cluster(g.value(relation_features), k)?
            }
            Grouping::Count(k) => self.cluster(g.value(relation_features), k.clamp(1, n))?,
        };
        let out = dpatr::dpatr_forward(g, p, &cfg.dpatr(), pooled, &groups)?;
        let scores = dpatr::classify(g, p, &out)?;
        let aux = dpatr::classify_aux(g, p, pooled)?;
        Ok(Forward {
            pooled,
            rs,
            rp,
            relation: rel,
            relation_features,
            count,
            groups,
            scores,
            aux,
        })
    }

    fn cluster(&self, rows: &Tensor, k: usize) -> Result<GroupAssignment, ModelError> {
        let seeds = self.config.kmeans_seed..self.config.kmeans_seed + self.config.kmeans_restarts.max(1);
        let d = rows.shape()[1];
        let r = kmeans::kmeans_best_of(rows.data(), d, k, seeds, kmeans::DEFAULT_MAX_ITERS)?;
        Ok(r.assignment)
    }

    /// Inference on one scene with the given grouping source.
    pub fn predict(&self, sample: &SceneSample, source: GroupingSource) -> Result<Prediction, ModelError> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let grouping = match source {
            GroupingSource::Predicted => Grouping::Predicted,
            GroupingSource::GtGroups => Grouping::Given(&sample.groups),
            GroupingSource::GtCount => Grouping::Count(sample.groups.num_groups()),
        };
        let f = self.forward(&mut g, &p, sample, grouping)?;
        let rows = |v: Var| -> Vec<Vec<usize>> {
            let t = g.value(v);
            (0..t.shape()[0]).map(|i| dpatr::predict_labels(t.row(i))).collect()
        };
        Ok(Prediction {
            individual: rows(f.scores.individual),
            social: rows(f.scores.social),
            global: dpatr::predict_labels(g.value(f.scores.global).data()),
            count_fraction: g.value(f.count).item(),
            groups: f.groups,
        })
    }

    /// Parameters, plus Adam moments when given, as a checkpoint. The
    /// config and optimizer step go into the metadata.
    pub fn to_checkpoint(&self, adam: Option<&AdamState>, extra: serde_json::Value) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        if let Some(a) = adam {
            for ((name, _), (m, v)) in self.params.iter().zip(a.first.iter().zip(&a.second)) {
                tensors.push((format!("adam.m.{name}"), m.clone()));
                tensors.push((format!("adam.v.{name}"), v.clone()));
            }
        }
        let meta = serde_json::json!({
            "model": self.config,
            "adam": adam.map(|a| serde_json::json!({"step": a.step, "config": a.config})),
            "extra": extra,
        });
        Checkpoint { tensors, meta }
    }

    /// Rebuilds a model (and optimizer state, if stored) from a checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<AdamState>), ModelError> {
        let config: ModelConfig = serde_json::from_value(ck.meta["model"].clone())
            .map_err(|e| ModelError::Checkpoint(format!("model config: {e}")))?;
        let template = Self::new(config.clone(), 0)?;
        let mut params = ParamStore::new();
        for (name, t) in template.params.iter() {
            let stored = ck
                .get(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter `{name}`")))?;
            if stored.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            params.insert(name, stored.clone());
        }
        let adam = match &ck.meta["adam"] {
            serde_json::Value::Null => None,
            a => {
                let mut state = AdamState::new(
                    &params,
                    serde_json::from_value(a["config"].clone())
                        .map_err(|e| ModelError::Checkpoint(format!("adam config: {e}")))?,
                );
                state.step = a["step"]
                    .as_u64()
                    .ok_or_else(|| ModelError::Checkpoint("adam step".into()))?;
                for (k, (name, _)) in params.iter().enumerate() {
                    let moment = |kind: &str| {
                        ck.get(&format!("adam.{kind}.{name}"))
                            .cloned()
                            .ok_or_else(|| ModelError::Checkpoint(format!("missing adam.{kind}.{name}")))
                    };
                    state.first[k] = moment("m")?;
                    state.second[k] = moment("v")?;
                }
                Some(state)
            }
        };
        Ok((Self::with_params(config, params)?, adam))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_scene, SceneSpec};

    fn small_config() -> ModelConfig {
        ModelConfig {
            d: 8,
            heads: 2,
            layers: 1,
            ..ModelConfig::default()
        }
    }

    fn scene(seed: u64) -> SceneSample {
        generate_scene(&SceneSpec {
            seed,
            d: 8,
            sigma: 0.3,
            ..SceneSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn shapes_and_ranges() {
        let model = SpdpModel::new(small_config(), 1).unwrap();
        let s = scene(2);
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let f = model.forward(&mut g, &p, &s, Grouping::Given(&s.groups)).unwrap();
        let n = s.individuals();
        assert_eq!(g.shape(f.scores.individual), &[n, C_IDV]);
        assert_eq!(g.shape(f.scores.social), &[s.groups.num_groups(), C_SG]);
        assert_eq!(g.shape(f.scores.global), &[1, C_GLB]);
        let rs = g.value(f.rs);
        for i in 0..n {
            assert!((rs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let r = g.value(f.relation);
        let expect = (g.value(f.rs).data()[1] + g.value(f.rp).data()[1]) / 2.0;
        assert!((r.data()[1] - expect).abs() < 1e-12);
        let c = g.value(f.count).item();
        assert!(c > 0.0 && c < 1.0);
    }

    #[test]
    fn coinciding_groups_give_identical_outputs() {
        let model = SpdpModel::new(small_config(), 3).unwrap();
        let s = scene(4);
        let predicted = model.predict(&s, GroupingSource::Predicted).unwrap();
        let mut fixed = s.clone();
        fixed.groups = predicted.groups.clone();
        let given = model.predict(&fixed, GroupingSource::GtGroups).unwrap();
        assert_eq!(predicted, given);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let model = SpdpModel::new(
            ModelConfig {
                d: 16,
                ..small_config()
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            model.predict(&scene(0), GroupingSource::GtGroups),
            Err(ModelError::DimMismatch(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = SpdpModel::new(small_config(), 5).unwrap();
        let mut adam = AdamState::new(&model.params, Default::default());
        adam.step = 7;
        adam.first[0].data_mut()[0] = 0.25;
        let ck = model.to_checkpoint(Some(&adam), serde_json::json!({"epoch": 2}));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let (m2, a2) = SpdpModel::from_checkpoint(&back).unwrap();
        assert_eq!(m2.params.iter().count(), model.params.iter().count());
        for ((n1, t1), (n2, t2)) in model.params.iter().zip(m2.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1, t2);
        }
        assert_eq!(a2.unwrap(), adam);
    }

    #[test]
    fn ppe_off_identical_stacks_give_identical_rows() {
        let cfg = ModelConfig {
            ppe: PpeMode::Off,
            ..small_config()
        };
        let model = SpdpModel::new(cfg, 8).unwrap();
        let mut s = scene(6);
        if let crate::synthdata::SceneFeatures::Cropped(t) = &mut s.features {
            let per = t.numel() / t.shape()[0];
            let first: Vec<f64> = t.data()[..per].to_vec();
            t.data_mut()[per..2 * per].copy_from_slice(&first);
        }
        let mut g = Graph::new();
        let p = model.params.bind(&mut g);
        let f = model.forward(&mut g, &p, &s, Grouping::Given(&s.groups)).unwrap();
        let pooled = g.value(f.pooled);
        assert_eq!(pooled.row(0), pooled.row(1));
    }
}
