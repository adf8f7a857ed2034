//! Dual-path activity transformer, the comparison structures, and the three
//! granularity classifiers.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::relation::GroupAssignment;
use crate::tensor::nn::{self, Params};
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

pub const C_IDV: usize = 27;
pub const C_SG: usize = 11;
pub const C_GLB: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpatrError {
    #[error("unknown structure `{0}` (expected dpatr, parallel, hierarchical or reverse)")]
    UnknownStructure(String),
    #[error("group {group} has no members")]
    EmptyGroup { group: usize },
    #[error("group assignment covers {groups} individuals but features have {features}")]
    GroupSize { groups: usize, features: usize },
    #[error("need at least one layer")]
    NoLayers,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    #[default]
    Dpatr,
    Parallel,
    Hierarchical,
    Reverse,
}

impl Structure {
    pub const ALL: [Structure; 4] = [Self::Dpatr, Self::Parallel, Self::Hierarchical, Self::Reverse];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dpatr => "dpatr",
            Self::Parallel => "parallel",
            Self::Hierarchical => "hierarchical",
            Self::Reverse => "reverse",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Structure {
    type Err = DpatrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DpatrError::UnknownStructure(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpatrConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub structure: Structure,
}

pub fn init_dpatr(store: &mut ParamStore, rng: &mut impl Rng, cfg: &DpatrConfig) {
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    for name in ["tokens.global", "tokens.social"] {
        let data = (0..cfg.d).map(|_| normal.sample(rng)).collect();
        store.insert(name, Tensor::new(vec![1, cfg.d], data).expect("shape"));
    }
    for l in 0..cfg.layers {
        nn::init_encoder_block(store, rng, &format!("dpatr.{l}.global"), cfg.d);
        nn::init_encoder_block(store, rng, &format!("dpatr.{l}.social"), cfg.d);
        if cfg.structure != Structure::Dpatr {
            nn::init_encoder_block(store, rng, &format!("dpatr.{l}.individual"), cfg.d);
        }
    }
}

/// Final features: individuals `[N, d]`, social groups `[N_g, d]`, global `[1, d]`.
#[derive(Clone, Copy, Debug)]
pub struct DpatrOutput {
    pub individuals: Var,
    pub social: Var,
    pub global: Var,
}

fn check_groups(g: &Graph, x: Var, groups: &GroupAssignment) -> Result<Vec<Vec<usize>>, DpatrError> {
    let n = g.shape(x)[0];
    if groups.len() != n {
        return Err(DpatrError::GroupSize {
            groups: groups.len(),
            features: n,
        });
    }
    let members = groups.groups();
    if let Some(k) = members.iter().position(Vec::is_empty) {
        return Err(DpatrError::EmptyGroup { group: k + 1 });
    }
    Ok(members)
}

/// Token-prefixed sequence through one block: returns (token', rest').
fn prefixed_block(
    g: &mut Graph,
    p: &Params,
    prefix: &str,
    tokens: Var,
    rest: Var,
    heads: usize,
) -> Result<(Var, Var), DpatrError> {
    let k = g.shape(tokens)[0];
    let n = g.shape(rest)[0];
    let seq = g.concat(&[tokens, rest], 0)?;
    let out = nn::encoder_block(g, p, prefix, seq, heads)?;
    let t = g.slice(out, 0, 0, k)?;
    let r = g.slice(out, 0, k, k + n)?;
    Ok((t, r))
}

/// Individual-to-global path: `[g; x]` through one encoder block.
pub fn global_path(
    g: &mut Graph,
    p: &Params,
    prefix: &str,
    token: Var,
    x: Var,
    heads: usize,
) -> Result<(Var, Var), DpatrError> {
    prefixed_block(g, p, prefix, token, x, heads)
}

/// Individual-to-social path: each group's members, prefixed with that
/// group's social token, through a shared encoder block. Members never attend
/// across groups.
pub fn social_path(
    g: &mut Graph,
    p: &Params,
    prefix: &str,
    social: Var,
    x: Var,
    members: &[Vec<usize>],
    heads: usize,
) -> Result<(Var, Var), DpatrError> {
    let mut tokens = Vec::with_capacity(members.len());
    let mut outs = Vec::with_capacity(members.len());
    let mut order = Vec::with_capacity(g.shape(x)[0]);
    for (k, m) in members.iter().enumerate() {
        let s = g.slice(social, 0, k, k + 1)?;
        let xs = g.index_select(x, m)?;
        let (t, r) = prefixed_block(g, p, prefix, s, xs, heads)?;
        tokens.push(t);
        outs.push(r);
        order.extend_from_slice(m);
    }
    let mut inverse = vec![0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        inverse[i] = pos;
    }
    let stacked = g.concat(&outs, 0)?;
    let x_out = g.index_select(stacked, &inverse)?;
    let s_out = g.concat(&tokens, 0)?;
    Ok((s_out, x_out))
}

/// One dual-path layer: global path over `[g; x]`, then the social path over
/// the global path's individual outputs.
#[allow(clippy::too_many_arguments)]
pub fn dpatr_layer(
    g: &mut Graph,
    p: &Params,
    layer: usize,
    x: Var,
    global: Var,
    social: Var,
    groups: &GroupAssignment,
    heads: usize,
) -> Result<(Var, Var, Var), DpatrError> {
    let members = check_groups(g, x, groups)?;
    let (g1, x1) = global_path(g, p, &format!("dpatr.{layer}.global"), global, x, heads)?;
    let (s1, x2) = social_path(g, p, &format!("dpatr.{layer}.social"), social, x1, &members, heads)?;
    Ok((x2, g1, s1))
}

fn initial_tokens(g: &mut Graph, p: &Params, num_groups: usize) -> Result<(Var, Var), DpatrError> {
    let global = p.var("tokens.global")?;
    let social = p.var("tokens.social")?;
    let rows = vec![0; num_groups];
    let social = g.index_select(social, &rows)?;
    Ok((global, social))
}

/// Runs `cfg.layers` layers of the configured structure over pooled
/// individual features `[N, d]`.
pub fn dpatr_forward(
    g: &mut Graph,
    p: &Params,
    cfg: &DpatrConfig,
    pooled: Var,
    groups: &GroupAssignment,
) -> Result<DpatrOutput, DpatrError> {
    if cfg.layers == 0 {
        return Err(DpatrError::NoLayers);
    }
    if cfg.structure != Structure::Dpatr {
        return alt_structure_forward(g, p, cfg, pooled, groups);
    }
    let (mut global, mut social) = initial_tokens(g, p, groups.num_groups())?;
    let mut x = pooled;
    for l in 0..cfg.layers {
        let (x2, g2, s2) = dpatr_layer(g, p, l, x, global, social, groups, cfg.heads)?;
        x = x2;
        global = g2;
        social = s2;
    }
    Ok(DpatrOutput {
        individuals: x,
        social,
        global,
    })
}

/// Three dedicated blocks per layer (individual, social, global) wired in
/// parallel, individual -> social -> global, or global -> social -> individual.
pub fn alt_structure_forward(
    g: &mut Graph,
    p: &Params,
    cfg: &DpatrConfig,
    pooled: Var,
    groups: &GroupAssignment,
) -> Result<DpatrOutput, DpatrError> {
    if cfg.layers == 0 {
        return Err(DpatrError::NoLayers);
    }
    let members = check_groups(g, pooled, groups)?;
    let (mut global, mut social) = initial_tokens(g, p, groups.num_groups())?;
    let heads = cfg.heads;
    let block = |l: usize, kind: &str| format!("dpatr.{l}.{kind}");
    match cfg.structure {
        Structure::Dpatr => dpatr_forward(g, p, cfg, pooled, groups),
        Structure::Parallel => {
            let (mut xi, mut xs, mut xg) = (pooled, pooled, pooled);
            for l in 0..cfg.layers {
                xi = nn::encoder_block(g, p, &block(l, "individual"), xi, heads)?;
                (social, xs) = social_path(g, p, &block(l, "social"), social, xs, &members, heads)?;
                (global, xg) = global_path(g, p, &block(l, "global"), global, xg, heads)?;
            }
            Ok(DpatrOutput {
                individuals: xi,
                social,
                global,
            })
        }
        Structure::Hierarchical => {
            let mut x = pooled;
            let n = g.shape(pooled)[0];
            for l in 0..cfg.layers {
                let x1 = nn::encoder_block(g, p, &block(l, "individual"), x, heads)?;
                let (s1, x2) = social_path(g, p, &block(l, "social"), social, x1, &members, heads)?;
                let k = g.shape(s1)[0];
                let rest = g.concat(&[s1, x2], 0)?;
                let (g1, rest_out) = global_path(g, p, &block(l, "global"), global, rest, heads)?;
                x = g.slice(rest_out, 0, k, k + n)?;
                social = s1;
                global = g1;
            }
            Ok(DpatrOutput {
                individuals: x,
                social,
                global,
            })
        }
        Structure::Reverse => {
            let mut x = pooled;
            for l in 0..cfg.layers {
                let (g1, x1) = global_path(g, p, &block(l, "global"), global, x, heads)?;
                let (s1, x2) = social_path(g, p, &block(l, "social"), social, x1, &members, heads)?;
                x = nn::encoder_block(g, p, &block(l, "individual"), x2, heads)?;
                global = g1;
                social = s1;
            }
            Ok(DpatrOutput {
                individuals: x,
                social,
                global,
            })
        }
    }
}

pub fn init_heads(store: &mut ParamStore, rng: &mut impl Rng, d: usize, classes: [usize; 3]) {
    nn::init_linear(store, rng, "heads.idv", d, classes[0], true);
    nn::init_linear(store, rng, "heads.sg", d, classes[1], true);
    nn::init_linear(store, rng, "heads.glb", d, classes[2], true);
    nn::init_linear(store, rng, "heads.aux", d, classes[0], true);
}

#[derive(Clone, Copy, Debug)]
pub struct ActivityScores {
    pub individual: Var,
    pub social: Var,
    pub global: Var,
}

/// Sigmoid scores of the three classifiers.
pub fn classify(g: &mut Graph, p: &Params, features: &DpatrOutput) -> Result<ActivityScores, DpatrError> {
    let mut head = |name: &str, x: Var| -> Result<Var, DpatrError> {
        let logits = nn::linear(g, p, name, x)?;
        Ok(g.sigmoid(logits))
    };
    Ok(ActivityScores {
        individual: head("heads.idv", features.individuals)?,
        social: head("heads.sg", features.social)?,
        global: head("heads.glb", features.global)?,
    })
}

/// Auxiliary individual-action scores from the pooled relation-encoder features.
pub fn classify_aux(g: &mut Graph, p: &Params, pooled: Var) -> Result<Var, DpatrError> {
    let logits = nn::linear(g, p, "heads.aux", pooled)?;
    Ok(g.sigmoid(logits))
}

/// Multi-label decision rule: strictly above 0.5.
pub fn predict_labels(scores: &[f64]) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.5)
        .map(|(i, _)| i)
        .collect()
}
