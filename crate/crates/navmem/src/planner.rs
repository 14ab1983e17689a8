//! Per-step sub-goal decision.
//!
//! If the final goal is already in the map it is chosen outright, no
//! model involved. Otherwise a backend ranks the unvisited objects of
//! the retrieved groups: `semantic-oracle` compares theme-context
//! embeddings against the goal (the stand-in for a large model's
//! world knowledge), `tiny-llm` scores rendered answer lines over the
//! cached KV blocks, exercising the full discrete-attention path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KVBlock, TinyModel, TokenSeq};
use crate::navmap::{NavigationMap, ObjectId, DEFAULT_DEDUP_RADIUS};
use crate::retrieval::{cosine, EmbeddingProvider, RetrievalPlan};
use crate::themes::ThemeTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlannerBackend {
    SemanticOracle,
    TinyLlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubGoalDecision {
    pub object_id: ObjectId,
    pub label: String,
    pub position: [i32; 3],
    pub is_final_goal: bool,
    pub raw_answer: String,
}

/// What the planner decided. With no candidates at all the episode falls
/// back to frontier exploration; the grid search lives with the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PlanOutcome {
    SubGoal(SubGoalDecision),
    Frontier,
}

/// Backend resources for one planning call.
pub enum Backend<'a> {
    SemanticOracle {
        provider: &'a dyn EmbeddingProvider,
        themes: &'a ThemeTable,
    },
    TinyLlm {
        model: &'a TinyModel,
        blocks: Vec<&'a KVBlock>,
        prompt_suffix: &'a TokenSeq,
    },
}

/// Decide the step's sub-goal. Returns the outcome and the candidate
/// scores that produced it (empty for the goal shortcut), for logging.
pub fn plan(
    map: &NavigationMap,
    retrieval: &RetrievalPlan,
    goal: &str,
    backend: &Backend<'_>,
) -> Result<(PlanOutcome, Vec<(ObjectId, f64)>)> {
    if let Some(goal_id) = map.find_goal(goal) {
        let o = map.object(goal_id)?;
        return Ok((
            PlanOutcome::SubGoal(SubGoalDecision {
                object_id: o.id,
                label: o.label.clone(),
                position: o.position,
                is_final_goal: true,
                raw_answer: answer_line(&o.label, o.position),
            }),
            Vec::new(),
        ));
    }

    // Unvisited objects of the selected groups, lowest id first so that
    // score ties resolve to the lowest object id.
    let mut candidates: Vec<ObjectId> = Vec::new();
    for g in map.groups() {
        if !retrieval.selected.contains(&g.group_id) {
            continue;
        }
        for m in &g.members {
            if !map.object(*m)?.visited {
                candidates.push(*m);
            }
        }
    }
    candidates.sort_unstable();
    if candidates.is_empty() {
        return Ok((PlanOutcome::Frontier, Vec::new()));
    }

    let scores: Vec<f64> = match backend {
        Backend::SemanticOracle { provider, themes } => {
            let goal_vec = provider.embed(&themes.context_text(goal));
            candidates
                .iter()
                .map(|&id| {
                    let label = &map.object(id).expect("candidate exists").label;
                    cosine(&goal_vec, &provider.embed(&themes.context_text(label)))
                })
                .collect()
        }
        Backend::TinyLlm {
            model,
            blocks,
            prompt_suffix,
        } => {
            let lines: Vec<TokenSeq> = candidates
                .iter()
                .map(|&id| {
                    let o = map.object(id).expect("candidate exists");
                    model.tokenize(&answer_line(&o.label, o.position))
                })
                .collect();
            model.score_candidates(blocks, prompt_suffix, &lines)?
        }
    };

    let mut best = 0usize;
    for i in 1..candidates.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    let o = map.object(candidates[best])?;
    Ok((
        PlanOutcome::SubGoal(SubGoalDecision {
            object_id: o.id,
            label: o.label.clone(),
            position: o.position,
            is_final_goal: false,
            raw_answer: answer_line(&o.label, o.position),
        }),
        candidates.into_iter().zip(scores).collect(),
    ))
}

/// Candidates sorted by `score_candidates` log-probability, descending,
/// stable on ties. Returns (input index, score) pairs.
pub fn rank_with_model(
    model: &TinyModel,
    blocks: &[&KVBlock],
    prompt_suffix: &TokenSeq,
    candidates: &[&str],
) -> Result<Vec<(usize, f64)>> {
    let seqs: Vec<TokenSeq> = candidates.iter().map(|c| model.tokenize(c)).collect();
    let scores = model.score_candidates(blocks, prompt_suffix, &seqs)?;
    let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    Ok(ranked)
}

fn answer_line(label: &str, position: [i32; 3]) -> String {
    format!(
        "The next subgoal is {label} at position ({},{},{}).",
        position[0], position[1], position[2]
    )
}

/// `The next subgoal is <label> at position (<x>,<y>,<z>).`
pub fn render_answer(decision: &SubGoalDecision) -> String {
    answer_line(&decision.label, decision.position)
}

/// Strict inverse of `render_answer`, resolved against the map: exact
/// label and position when possible, otherwise the nearest object of
/// that label within the dedup radius.
pub fn parse_answer(text: &str, map: &NavigationMap) -> Result<SubGoalDecision> {
    let bad = || Error::BadAnswer(text.to_string());
    let rest = text.strip_prefix("The next subgoal is ").ok_or_else(bad)?;
    let at = rest.rfind(" at position (").ok_or_else(bad)?;
    let label = &rest[..at];
    let tail = &rest[at + " at position (".len()..];
    let inner = tail.strip_suffix(").").ok_or_else(bad)?;
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != 3 || label.is_empty() {
        return Err(bad());
    }
    let mut position = [0i32; 3];
    for (slot, part) in position.iter_mut().zip(&parts) {
        *slot = part.trim().parse::<i32>().map_err(|_| bad())?;
    }

    let mut exact: Option<ObjectId> = None;
    let mut nearest: Option<(f64, ObjectId)> = None;
    for o in map.objects() {
        if !o.label.eq_ignore_ascii_case(label) {
            continue;
        }
        if o.position == position && exact.is_none() {
            exact = Some(o.id);
        }
        let d = distance(o.position, position);
        if d <= DEFAULT_DEDUP_RADIUS && nearest.is_none_or(|(nd, _)| d < nd) {
            nearest = Some((d, o.id));
        }
    }
    let id = exact
        .or(nearest.map(|(_, id)| id))
        .ok_or_else(|| Error::UnresolvedAnswer(text.to_string()))?;
    let o = map.object(id)?;
    Ok(SubGoalDecision {
        object_id: o.id,
        label: o.label.clone(),
        position: o.position,
        is_final_goal: false,
        raw_answer: text.to_string(),
    })
}

fn distance(a: [i32; 3], b: [i32; 3]) -> f64 {
    let dx = f64::from(a[0] - b[0]);
    let dy = f64::from(a[1] - b[1]);
    let dz = f64::from(a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}
