//! Multi-task loss, warm-up schedule and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpatr::{C_GLB, C_IDV, C_SG};
use crate::evaluation::{evaluate, match_groups, Scores};
use crate::model::{Grouping, GroupingSource, ModelError, SpdpModel};
use crate::relation::GroupAssignment;
use crate::synthdata::{multi_hot, SceneSample};
use crate::tensor::nn::Params;
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, TensorError, Var};

pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite value at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: u64, detail: String },
    #[error("empty training set")]
    Empty,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Callback(String),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub idv: f64,
    pub relation: f64,
    pub aux: f64,
    pub sg: f64,
    pub glb: f64,
    pub count: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            idv: 1.0,
            relation: 1.0,
            aux: 1.0,
            sg: 3.0,
            glb: 2.0,
            count: 5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub seed: u64,
    /// Group source for the social path during training.
    pub grouping: GroupingSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            warmup_epochs: 15,
            lr: 4e-5,
            weight_decay: 1e-2,
            batch: 4,
            seed: 0,
            grouping: GroupingSource::GtGroups,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_epochs > self.epochs {
            return Err(TrainError::Config(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch == 0 || self.lr.is_nan() || self.lr < 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0
        {
            return Err(TrainError::Config(
                "batch must be positive, lr and weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Linear ramp from 0 over `warmup_steps`, then constant `lr`.
pub fn lr_schedule(step: u64, warmup_steps: u64, lr: f64) -> f64 {
    if step >= warmup_steps {
        lr
    } else {
        lr * step as f64 / warmup_steps as f64
    }
}

/// Mean binary cross-entropy with scores clipped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(g: &mut Graph, scores: Var, targets: &Tensor) -> Result<Var, TensorError> {
    if g.shape(scores) != targets.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "bce_loss",
            lhs: g.shape(scores).to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let weighted = bce_terms(g, scores, targets)?;
    Ok(g.mean(weighted))
}

/// Elementwise `-(y log s + (1 - y) log(1 - s))`.
fn bce_terms(g: &mut Graph, scores: Var, targets: &Tensor) -> Result<Var, TensorError> {
    let s = g.clamp(scores, PROB_CLIP, 1.0 - PROB_CLIP);
    let log_s = g.log(s);
    let neg = g.scale(s, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let log_1s = g.log(one_minus);
    let y = g.constant(targets.clone());
    let y_neg: Vec<f64> = targets.data().iter().map(|v| 1.0 - v).collect();
    let y_neg = g.constant(Tensor::new(targets.shape().to_vec(), y_neg)?);
    let a = g.mul(y, log_s)?;
    let b = g.mul(y_neg, log_1s)?;
    let sum = g.add(a, b)?;
    Ok(g.scale(sum, -1.0))
}

/// BCE between `R_s` and the co-membership matrix over off-diagonal entries;
/// zero for a single individual.
pub fn relation_loss(g: &mut Graph, rs: Var, groups: &GroupAssignment) -> Result<Var, TensorError> {
    let n = groups.len();
    if g.shape(rs) != [n, n] {
        return Err(TensorError::ShapeMismatch {
            op: "relation_loss",
            lhs: g.shape(rs).to_vec(),
            rhs: vec![n, n],
        });
    }
    if n < 2 {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let target = Tensor::new(vec![n, n], groups.relation_matrix())?;
    let terms = bce_terms(g, rs, &target)?;
    let mut mask = Tensor::full(&[n, n], 1.0 / (n * (n - 1)) as f64);
    for i in 0..n {
        mask.data_mut()[i * n + i] = 0.0;
    }
    let mask = g.constant(mask);
    let masked = g.mul(terms, mask)?;
    Ok(g.sum(masked))
}

/// `(n_g - gt_groups / N)^2`.
pub fn count_loss(g: &mut Graph, n_g: Var, gt_groups: usize, individuals: usize) -> Result<Var, TensorError> {
    let target = g.constant(Tensor::scalar(gt_groups as f64 / individuals as f64));
    let diff = g.sub(n_g, target)?;
    g.mul(diff, diff)
}

/// Graph handles of the six loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub idv: Var,
    pub relation: Var,
    pub aux: Var,
    pub sg: Var,
    pub glb: Var,
    pub count: Var,
}

pub fn total_loss(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<Var, TensorError> {
    let parts = [
        (terms.idv, w.idv),
        (terms.relation, w.relation),
        (terms.aux, w.aux),
        (terms.sg, w.sg),
        (terms.glb, w.glb),
        (terms.count, w.count),
    ];
    let mut acc: Option<Var> = None;
    for (v, weight) in parts {
        let v = g.reshape(v, &[])?;
        let scaled = g.scale(v, weight);
        acc = Some(match acc {
            None => scaled,
            Some(a) => g.add(a, scaled)?,
        });
    }
    Ok(acc.expect("six terms"))
}

/// Loss values of one scene (or averaged over several).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub total: f64,
    pub idv: f64,
    pub relation: f64,
    pub aux: f64,
    pub sg: f64,
    pub glb: f64,
    pub count: f64,
}

impl LossValues {
    fn add_scaled(&mut self, o: &LossValues, c: f64) {
        self.total += c * o.total;
        self.idv += c * o.idv;
        self.relation += c * o.relation;
        self.aux += c * o.aux;
        self.sg += c * o.sg;
        self.glb += c * o.glb;
        self.count += c * o.count;
    }
}

fn targets(rows: &[Vec<usize>], classes: usize) -> Result<Tensor, TensorError> {
    Tensor::from_rows(&rows.iter().map(|r| multi_hot(r, classes)).collect::<Vec<_>>())
}

/// Builds the full loss of one scene in `g`.
pub fn scene_loss(
    model: &SpdpModel,
    g: &mut Graph,
    p: &Params,
    sample: &SceneSample,
    weights: &LossWeights,
    grouping: GroupingSource,
) -> Result<(Var, LossTerms), ModelError> {
    let grp = match grouping {
        GroupingSource::GtGroups => Grouping::Given(&sample.groups),
        GroupingSource::Predicted => Grouping::Predicted,
        GroupingSource::GtCount => Grouping::Count(sample.groups.num_groups()),
    };
    let f = model.forward(g, p, sample, grp)?;
    let idv_t = targets(&sample.individual_labels, C_IDV)?;
    let idv = bce_loss(g, f.scores.individual, &idv_t)?;
    let aux = bce_loss(g, f.aux, &idv_t)?;
    let social_rows: Vec<Vec<usize>> = if f.groups == sample.groups {
        sample.social_labels.clone()
    } else {
        // Matched predicted groups learn their GT group's labels, the rest all-negative.
        let mut rows = vec![Vec::new(); f.groups.num_groups()];
        for m in match_groups(&f.groups, &sample.groups) {
            rows[m.pred] = sample.social_labels[m.gt].clone();
        }
        rows
    };
    let sg = bce_loss(g, f.scores.social, &targets(&social_rows, C_SG)?)?;
    let glb = bce_loss(
        g,
        f.scores.global,
        &targets(std::slice::from_ref(&sample.global_labels), C_GLB)?,
    )?;
    let relation = if model.config.relation.uses_similarity() {
        relation_loss(g, f.rs, &sample.groups)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let count = count_loss(g, f.count, sample.groups.num_groups(), sample.individuals())?;
    let terms = LossTerms {
        idv,
        relation,
        aux,
        sg,
        glb,
        count,
    };
    Ok((total_loss(g, &terms, weights)?, terms))
}

fn loss_values(g: &Graph, total: Var, t: &LossTerms) -> LossValues {
    let v = |x: Var| g.value(x).item();
    LossValues {
        total: v(total),
        idv: v(t.idv),
        relation: v(t.relation),
        aux: v(t.aux),
        sg: v(t.sg),
        glb: v(t.glb),
        count: v(t.count),
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: LossValues,
    #[serde(rename = "F_i")]
    pub f_i: f64,
    #[serde(rename = "F_p")]
    pub f_p: f64,
    #[serde(rename = "F_g")]
    pub f_g: f64,
    #[serde(rename = "F_a")]
    pub f_a: f64,
    #[serde(rename = "IoU@0.5")]
    pub iou_half: f64,
    #[serde(rename = "Mat.IoU")]
    pub mat_iou: f64,
}

impl EpochLog {
    fn new(epoch: usize, step: u64, lr: f64, loss: LossValues, s: &Scores) -> Self {
        Self {
            epoch,
            step,
            lr,
            loss,
            f_i: s.activity.individual.f,
            f_p: s.activity.social.f,
            f_g: s.activity.global.f,
            f_a: s.activity.f_a,
            iou_half: s.group_detection.iou_at_half,
            mat_iou: s.group_detection.mat_iou,
        }
    }
}

/// What the loop hands to its observer after each epoch.
pub struct EpochReport<'a> {
    pub log: &'a EpochLog,
    pub model: &'a SpdpModel,
    pub adam: &'a AdamState,
    pub is_best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SpdpModel,
    pub adam: AdamState,
    pub logs: Vec<EpochLog>,
    /// Mean total loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub best_f_a: f64,
}

/// Trains from `start_epoch` (0 for a fresh run) to `cfg.epochs`.
///
/// Data order is reshuffled every epoch from `(seed, epoch)`, so a resumed
/// run sees the same batches as an uninterrupted one.
pub fn train(
    mut model: SpdpModel,
    adam: Option<AdamState>,
    start_epoch: usize,
    train_set: &[SceneSample],
    val_set: &[SceneSample],
    cfg: &TrainConfig,
    weights: &LossWeights,
    mut observe: impl FnMut(EpochReport) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut adam = adam.unwrap_or_else(|| {
        AdamState::new(
            &model.params,
            AdamConfig {
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            },
        )
    });
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch) as u64;
    let warmup = cfg.warmup_epochs as u64 * steps_per_epoch;
    let eval_set = if val_set.is_empty() { train_set } else { val_set };

    let mut logs = Vec::new();
    let mut step_losses = Vec::new();
    let mut best_f_a = f64::NEG_INFINITY;
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = LossValues::default();
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch) {
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Option<Vec<Tensor>> = None;
            let mut batch_loss = LossValues::default();
            for &i in batch {
                let mut g = Graph::new();
                let p = model.params.bind(&mut g);
                let (loss, terms) = scene_loss(&model, &mut g, &p, &train_set[i], weights, cfg.grouping)?;
                let values = loss_values(&g, loss, &terms);
                if !values.total.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step: adam.step,
                        detail: format!("loss {values:?} on scene {i}"),
                    });
                }
                let grads = g.backward(loss).map_err(|e| TrainError::NonFinite {
                    epoch,
                    step: adam.step,
                    detail: format!("backward on scene {i}: {e}"),
                })?;
                let grads = p.grads(&grads);
                batch_loss.add_scaled(&values, scale);
                let grads = grads.into_iter().map(|t| t.expect("dense gradients"));
                acc = Some(match acc {
                    None => grads
                        .map(|mut t| {
                            t.data_mut().iter_mut().for_each(|v| *v *= scale);
                            t
                        })
                        .collect(),
                    Some(mut sum) => {
                        for (s, t) in sum.iter_mut().zip(grads) {
                            for (a, b) in s.data_mut().iter_mut().zip(t.data()) {
                                *a += scale * b;
                            }
                        }
                        sum
                    }
                });
            }
            lr = lr_schedule(adam.step, warmup, cfg.lr);
            let grads: Vec<Option<Tensor>> = acc.expect("non-empty batch").into_iter().map(Some).collect();
            adam.step(&mut model.params, &grads, lr)
                .map_err(|e| TrainError::NonFinite {
                    epoch,
                    step: adam.step,
                    detail: e.to_string(),
                })?;
            step_losses.push(batch_loss.total);
            epoch_loss.add_scaled(&batch_loss, 1.0 / steps_per_epoch as f64);
        }

        let scores = evaluate(&model, eval_set, GroupingSource::Predicted)?;
        let log = EpochLog::new(epoch, adam.step, lr, epoch_loss, &scores);
        let is_best = log.f_a > best_f_a;
        if is_best {
            best_f_a = log.f_a;
        }
        observe(EpochReport {
            log: &log,
            model: &model,
            adam: &adam,
            is_best,
        })?;
        logs.push(log);
    }
    Ok(TrainOutcome {
        model,
        adam,
        logs,
        step_losses,
        best_f_a,
    })
}

/// Mean of the first and last `window` entries.
pub fn smoothed_ends(values: &[f64], window: usize) -> Option<(f64, f64)> {
    if values.len() < window || window == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..window]), mean(&values[values.len() - window..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{generate_dataset, DatasetSpec, Split};

    fn scalar_loss(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).item()
    }

    #[test]
    fn bce_examples() {
        let half = scalar_loss(|g| {
            let s = g.constant(Tensor::full(&[2, 3], 0.5));
            bce_loss(
                g,
                s,
                &Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap(),
            )
            .unwrap()
        });
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
        let v = scalar_loss(|g| {
            let s = g.constant(Tensor::new(vec![1], vec![0.75]).unwrap());
            bce_loss(g, s, &Tensor::new(vec![1], vec![1.0]).unwrap()).unwrap()
        });
        assert!((v + 0.75f64.ln()).abs() < 1e-15);
        let perfect = scalar_loss(|g| {
            let s = g.constant(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
            bce_loss(g, s, &Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()).unwrap()
        });
        assert!(perfect > 0.0 && perfect < 2e-7);
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[2]));
        assert!(bce_loss(&mut g, s, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn relation_loss_examples() {
        let one = scalar_loss(|g| {
            let rs = g.constant(Tensor::scalar(1.0).reshape(&[1, 1]).unwrap());
            relation_loss(g, rs, &GroupAssignment::from_labels(&[1])).unwrap()
        });
        assert_eq!(one, 0.0);
        let pair = scalar_loss(|g| {
            let rs = g.constant(Tensor::full(&[2, 2], 0.5));
            relation_loss(g, rs, &GroupAssignment::from_labels(&[1, 1])).unwrap()
        });
        assert!((pair - std::f64::consts::LN_2).abs() < 1e-15);
        let rs = [0.5, 0.3, 0.2, 0.1, 0.6, 0.3, 0.25, 0.25, 0.5];
        let labels = [1, 1, 2];
        let v = scalar_loss(|g| {
            let r = g.constant(Tensor::new(vec![3, 3], rs.to_vec()).unwrap());
            relation_loss(g, r, &GroupAssignment::from_labels(&labels)).unwrap()
        });
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let y = if labels[i] == labels[j] { 1.0 } else { 0.0 };
                    let s: f64 = rs[i * 3 + j];
                    oracle -= y * s.ln() + (1.0 - y) * (1.0 - s).ln();
                }
            }
        }
        assert!((v - oracle / 6.0).abs() < 1e-14);
    }

    #[test]
    fn count_loss_examples() {
        let v = scalar_loss(|g| {
            let n = g.constant(Tensor::scalar(0.5));
            count_loss(g, n, 3, 10).unwrap()
        });
        assert!((v - 0.04).abs() < 1e-15);
        let v = scalar_loss(|g| {
            let n = g.constant(Tensor::scalar(0.25));
            count_loss(g, n, 1, 4).unwrap()
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn weighted_sum() {
        let mut g = Graph::new();
        let one = g.constant(Tensor::scalar(1.0));
        let terms = LossTerms {
            idv: one,
            relation: one,
            aux: one,
            sg: one,
            glb: one,
            count: one,
        };
        let t = total_loss(&mut g, &terms, &LossWeights::default()).unwrap();
        assert_eq!(g.value(t).item(), 13.0);
        let only_count = LossWeights {
            idv: 0.0,
            relation: 0.0,
            aux: 0.0,
            sg: 0.0,
            glb: 0.0,
            count: 1.0,
        };
        let c = g.constant(Tensor::scalar(0.04));
        let terms = LossTerms { count: c, ..terms };
        let t = total_loss(&mut g, &terms, &only_count).unwrap();
        assert_eq!(g.value(t).item(), 0.04);
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_schedule(0, 100, 4e-5), 0.0);
        assert_eq!(lr_schedule(50, 100, 4e-5), 2e-5);
        assert_eq!(lr_schedule(100, 100, 4e-5), 4e-5);
        assert_eq!(lr_schedule(500, 100, 4e-5), 4e-5);
        assert_eq!(lr_schedule(3, 0, 1e-3), 1e-3);
    }

    fn tiny() -> (SpdpModel, Vec<SceneSample>) {
        let ds = generate_dataset(
            &DatasetSpec {
                scenes: 4,
                d: 8,
                ..DatasetSpec::default()
            },
            Split::Train,
        )
        .unwrap();
        let model = SpdpModel::new(
            ModelConfig {
                d: 8,
                heads: 2,
                layers: 1,
                ..ModelConfig::default()
            },
            1,
        )
        .unwrap();
        (model, ds.samples)
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (model, data) = tiny();
        let cfg = TrainConfig {
            epochs: 1,
            warmup_epochs: 0,
            lr: 0.0,
            batch: 2,
            ..TrainConfig::default()
        };
        let out = train(
            model.clone(),
            None,
            0,
            &data,
            &[],
            &cfg,
            &LossWeights::default(),
            |_| Ok(()),
        )
        .unwrap();
        for ((_, a), (_, b)) in out.model.params.iter().zip(model.params.iter()) {
            assert_eq!(a, b);
        }
        assert_eq!(out.adam.step, 2);
    }

    #[test]
    fn same_seed_same_log_and_resume_matches() {
        let (model, data) = tiny();
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            lr: 1e-3,
            batch: 2,
            ..TrainConfig::default()
        };
        let w = LossWeights::default();
        let a = train(model.clone(), None, 0, &data, &[], &cfg, &w, |_| Ok(())).unwrap();
        let b = train(model.clone(), None, 0, &data, &[], &cfg, &w, |_| Ok(())).unwrap();
        assert_eq!(a.logs, b.logs);

        let first = train(
            model,
            None,
            0,
            &data,
            &[],
            &TrainConfig { epochs: 1, ..cfg },
            &w,
            |_| Ok(()),
        )
        .unwrap();
        let resumed = train(first.model, Some(first.adam), 1, &data, &[], &cfg, &w, |_| Ok(())).unwrap();
        assert_eq!(resumed.logs[0], a.logs[1]);
        assert_eq!(resumed.adam.step, 4);
    }

    #[test]
    fn warmup_longer_than_training_is_rejected() {
        let (model, data) = tiny();
        let cfg = TrainConfig {
            epochs: 1,
            warmup_epochs: 2,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(model, None, 0, &data, &[], &cfg, &LossWeights::default(), |_| Ok(())),
            Err(TrainError::Config(_))
        ));
    }
}
