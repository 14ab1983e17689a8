//! Assignment of newly detected objects to groups.
//!
//! Every staged object is scored against the start-of-step groups; it
//! joins its argmax group when the score clears the threshold, and all
//! leftovers of the step form one single new group (detection order).
//! Scores come either from a partial forward of the tiny transformer
//! (mean post-softmax attention on each group's cached keys) or from a
//! softmax over embedding similarities, which mirrors the attention
//! normalization by reserving one slot for "none of the groups".

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{KVBlock, TinyModel, Tokenizer};
use crate::navmap::{Assignment, GroupId, NavigationMap, ObjectId};
use crate::retrieval::{cosine, EmbeddingCache, EmbeddingProvider};

/// Softmax sharpness over embedding similarities. Sharp enough that an
/// object pulled at by a one-off stray label inside a foreign group
/// (similarity near 0.3) stays under the default join threshold, while
/// a themed match (similarity 0.7+) lands well above it.
const SIMILARITY_SHARPNESS: f64 = 6.0;
/// Pseudo-similarity of the "new group" slot in the embedding softmax;
/// halfway between a themed match and an unrelated room.
const NEW_GROUP_LEVEL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterProvider {
    TinyTransformer,
    EmbeddingSimilarity,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterConfig {
    /// Join threshold on the mean attention score, in (0, 1).
    pub attention_threshold: f64,
    /// Fraction of model layers the clustering forward runs.
    pub layer_fraction: f64,
    pub provider: ClusterProvider,
    /// Groups at this rendered-token capacity stop accepting members.
    pub max_group_tokens: u32,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            attention_threshold: 0.25,
            layer_fraction: 0.1,
            provider: ClusterProvider::EmbeddingSimilarity,
            max_group_tokens: 256,
        }
    }
}

impl ClusterConfig {
    pub fn layers_used(&self, num_layers: usize) -> usize {
        ((self.layer_fraction * num_layers as f64).ceil() as usize).clamp(1, num_layers)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.attention_threshold > 0.0 && self.attention_threshold < 1.0)
            && self.attention_threshold != 0.0
        {
            return Err(crate::Error::InvalidConfig(format!(
                "attention_threshold {} outside [0, 1)",
                self.attention_threshold
            )));
        }
        if !(self.layer_fraction > 0.0 && self.layer_fraction <= 1.0) {
            return Err(crate::Error::InvalidConfig(format!(
                "layer_fraction {} outside (0, 1]",
                self.layer_fraction
            )));
        }
        Ok(())
    }
}

/// Resources for whichever scoring path the config picked.
pub enum AttentionBackend<'a> {
    /// `blocks[i]` is the cached (possibly first-layers-only) KV of
    /// `map.groups()[i]`.
    TinyTransformer {
        model: &'a TinyModel,
        blocks: Vec<&'a KVBlock>,
    },
    /// Group vectors come from the retrieval cache, valid for the
    /// start-of-step groups.
    EmbeddingSimilarity {
        provider: &'a dyn EmbeddingProvider,
        cache: &'a EmbeddingCache,
    },
}

/// One object's routing decision plus the scores behind it, for logs.
#[derive(Debug, Clone, Serialize)]
pub struct ClusterDecision {
    pub object_id: ObjectId,
    pub target: Assignment,
    pub scores: Vec<(GroupId, f64)>,
}

/// Score staged objects against the start-of-step groups and route each
/// to its argmax group (score > threshold, ties to the lowest group id)
/// or to the step's shared new group. Groups at token capacity are not
/// candidates.
pub fn assign(
    map: &NavigationMap,
    staged: &[ObjectId],
    cfg: &ClusterConfig,
    backend: &AttentionBackend<'_>,
    tokenizer: &Tokenizer,
) -> Result<Vec<ClusterDecision>> {
    let mut candidates: Vec<(usize, GroupId)> = Vec::new();
    for (idx, g) in map.groups().iter().enumerate() {
        let tokens = tokenizer.count(&map.render_group(g.group_id)?) as u32;
        if tokens < cfg.max_group_tokens {
            candidates.push((idx, g.group_id));
        }
    }

    let mut decisions = Vec::with_capacity(staged.len());
    for &oid in staged {
        let scores = match backend {
            AttentionBackend::TinyTransformer { model, blocks } => {
                let probe = tokenizer.tokenize(&map.render_member(oid)?);
                let picked: Vec<&KVBlock> =
                    candidates.iter().map(|&(idx, _)| blocks[idx]).collect();
                let layers = cfg.layers_used(model.config().num_layers);
                model
                    .partial_forward_attention(&picked, &probe, layers)?
                    .per_group
            }
            AttentionBackend::EmbeddingSimilarity { provider, cache } => {
                let obj_vec = provider.embed(&map.object(oid)?.label);
                let sims: Vec<f64> = candidates
                    .iter()
                    .map(|&(_, gid)| match cache.group_vector(gid) {
                        Some(gv) => cosine(&obj_vec, gv),
                        None => 0.0,
                    })
                    .collect();
                similarity_softmax(&sims)
            }
        };

        let mut best: Option<(GroupId, f64)> = None;
        for (&(_, gid), &score) in candidates.iter().zip(&scores) {
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((gid, score));
            }
        }
        let target = match best {
            Some((gid, score)) if score > cfg.attention_threshold => Assignment::ExistingGroup(gid),
            _ => Assignment::NewGroup,
        };
        decisions.push(ClusterDecision {
            object_id: oid,
            target,
            scores: candidates
                .iter()
                .map(|&(_, gid)| gid)
                .zip(scores.iter().copied())
                .collect(),
        });
    }
    Ok(decisions)
}

/// Softmax over sharpened similarities with one reserved slot standing
/// for a fresh group, so a lone unrelated group cannot absorb everything
/// by default. Returns the group entries only; they sum to less than 1.
fn similarity_softmax(sims: &[f64]) -> Vec<f64> {
    let mut exps: Vec<f64> = sims
        .iter()
        .map(|s| (SIMILARITY_SHARPNESS * s).exp())
        .collect();
    let denom: f64 =
        exps.iter().sum::<f64>() + (SIMILARITY_SHARPNESS * NEW_GROUP_LEVEL).exp();
    for e in exps.iter_mut() {
        *e /= denom;
    }
    exps
}

/// Position-only baseline: join the group with the nearest member
/// centroid when it is within `radius`, otherwise the step's new group.
pub fn assign_by_position(
    map: &NavigationMap,
    staged: &[ObjectId],
    radius: f64,
) -> Result<Vec<ClusterDecision>> {
    let mut centroids: Vec<(GroupId, [f64; 3])> = Vec::new();
    for g in map.groups() {
        if g.members.is_empty() {
            continue;
        }
        let mut c = [0.0f64; 3];
        for m in &g.members {
            let p = map.object(*m)?.position;
            for (axis, slot) in c.iter_mut().enumerate() {
                *slot += f64::from(p[axis]);
            }
        }
        for slot in c.iter_mut() {
            *slot /= g.members.len() as f64;
        }
        centroids.push((g.group_id, c));
    }

    let mut decisions = Vec::with_capacity(staged.len());
    for &oid in staged {
        let p = map.object(oid)?.position;
        let mut scored: Vec<(GroupId, f64)> = Vec::with_capacity(centroids.len());
        let mut best: Option<(GroupId, f64)> = None;
        for &(gid, c) in &centroids {
            let d = ((c[0] - f64::from(p[0])).powi(2)
                + (c[1] - f64::from(p[1])).powi(2)
                + (c[2] - f64::from(p[2])).powi(2))
            .sqrt();
            scored.push((gid, d));
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((gid, d));
            }
        }
        let target = match best {
            Some((gid, d)) if d <= radius => Assignment::ExistingGroup(gid),
            _ => Assignment::NewGroup,
        };
        decisions.push(ClusterDecision {
            object_id: oid,
            target,
            scores: scored,
        });
    }
    Ok(decisions)
}
