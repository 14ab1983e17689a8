//! The per-episode loop: detect, map, cluster, cache, retrieve, plan,
//! move — until the goal is reached or a cap trips.
//!
//! Group KV is extended lazily: newly assigned objects are registered as
//! pending tokens, and their rows are computed and saved the first time
//! the group is selected for planning (while it is device-resident
//! anyway). Unselected groups therefore never cost KV computation, and
//! loading a group moves only the bytes that exist on disk.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clusterer::{self, AttentionBackend, ClusterConfig, ClusterProvider};
use crate::costmodel::{LatencyParams, Mode, StepReport};
use crate::error::Result;
use crate::kvstore::{KvLayout, Store};
use crate::model::{KVBlock, ModelConfig, TinyModel};
use crate::navmap::{Assignment, GroupId, MapSnapshot, NavigationMap, ObjectId};
use crate::planner::{self, Backend, PlanOutcome, PlannerBackend};
use crate::retrieval::{self, EmbeddingCache, EmbeddingProvider, RetrievalConfig, RetrievalPlan};
use crate::simworld::{bfs_distances, detect, line_of_sight, move_to, AgentState, Scene};
use crate::themes::ThemeTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMethod {
    Attention,
    Position,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalMethod {
    Knapsack,
    DistanceBaseline,
    AllGroups,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub model: ModelConfig,
    pub mode: Mode,
    pub backend: PlannerBackend,
    pub cluster_method: ClusterMethod,
    pub cluster: ClusterConfig,
    /// Centroid radius for position-based clustering, grid units.
    pub position_radius: f64,
    pub retrieval_method: RetrievalMethod,
    pub retrieval: RetrievalConfig,
    pub budget_bytes: u64,
    pub latency: LatencyParams,
    pub detection_range: f64,
    pub success_radius: f64,
    pub step_cap: u32,
    /// Path cap as a multiple of the grid diagonal.
    pub path_cap_factor: f64,
    /// Visited objects named in the prompt's trajectory block.
    pub trajectory_window: usize,
    pub dedup_radius: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            model: ModelConfig::default(),
            mode: Mode::EfficientNav,
            backend: PlannerBackend::SemanticOracle,
            cluster_method: ClusterMethod::Attention,
            cluster: ClusterConfig::default(),
            position_radius: 10.0,
            retrieval_method: RetrievalMethod::Knapsack,
            retrieval: RetrievalConfig::default(),
            budget_bytes: 8 << 20,
            latency: LatencyParams::default(),
            detection_range: 8.0,
            success_radius: 1.0,
            step_cap: 50,
            path_cap_factor: 10.0,
            trajectory_window: 5,
            dedup_radius: crate::navmap::DEFAULT_DEDUP_RADIUS,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.cluster.validate()?;
        self.latency.validate()?;
        if self.step_cap == 0 {
            return Err(crate::Error::InvalidConfig("step_cap must be >= 1".into()));
        }
        Ok(())
    }

    /// First-layers slice pinned in device memory for clustering probes;
    /// zero unless transformer-attention clustering is active.
    pub fn probe_layers(&self) -> usize {
        match (self.cluster_method, self.cluster.provider) {
            (ClusterMethod::Attention, ClusterProvider::TinyTransformer) => {
                self.cluster.layers_used(self.model.num_layers)
            }
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    GoalReached,
    StepCap,
    PathCap,
    Exhausted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub agent_path_length: f64,
    /// Start to the nearest cell satisfying the success condition; 0
    /// when the goal is absent from the scene.
    pub shortest_path_length: f64,
    pub steps: u32,
    pub reports: Vec<StepReport>,
    pub termination: Termination,
}

/// JSONL record per clustering decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterLogRecord {
    pub step: u32,
    pub object_id: ObjectId,
    pub target: String,
    pub scores: Vec<(GroupId, f64)>,
}

/// JSONL record per planning decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionLogRecord {
    pub step: u32,
    pub goal: String,
    pub selected_groups: Vec<GroupId>,
    pub candidate_scores: Vec<(ObjectId, f64)>,
    pub decision: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeLogs {
    pub start: (i32, i32),
    pub cluster: Vec<ClusterLogRecord>,
    pub decisions: Vec<DecisionLogRecord>,
    pub map: MapSnapshot,
    /// Wall-clock seconds per step, reported next to modeled time and
    /// never mixed into it. Excluded from replay comparisons.
    pub wall_seconds: Vec<f64>,
    pub store_stats: crate::kvstore::StoreStats,
}

#[derive(Debug)]
pub struct EpisodeOutput {
    pub result: EpisodeResult,
    pub logs: EpisodeLogs,
}

struct CountingProvider<'a> {
    inner: &'a dyn EmbeddingProvider,
    calls: AtomicU64,
}

impl EmbeddingProvider for CountingProvider<'_> {
    fn embed(&self, text: &str) -> Vec<f32> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.embed(text)
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
}

/// Run one episode. `episode_seed` only picks the start cell; everything
/// downstream is deterministic in (scene, goal, config).
pub fn run_episode(
    scene: &Scene,
    goal: &str,
    cfg: &SystemConfig,
    model: &TinyModel,
    provider: &dyn EmbeddingProvider,
    episode_seed: u64,
    kv_dir: &Path,
) -> Result<EpisodeOutput> {
    run_episode_impl(scene, goal, cfg, model, provider, episode_seed, kv_dir, None)
}

/// Benchmark variant: the full planning pipeline runs every step, but
/// motion follows the fixed waypoint route (cyclically) and decisions
/// are only logged. No visited-marking, no termination checks — the
/// trace runs for exactly `step_cap` steps of controlled map growth.
#[allow(clippy::too_many_arguments)]
pub fn run_surveyed_episode(
    scene: &Scene,
    goal: &str,
    cfg: &SystemConfig,
    model: &TinyModel,
    provider: &dyn EmbeddingProvider,
    episode_seed: u64,
    kv_dir: &Path,
    route: &[(i32, i32)],
) -> Result<EpisodeOutput> {
    assert!(!route.is_empty(), "survey route needs at least one waypoint");
    run_episode_impl(scene, goal, cfg, model, provider, episode_seed, kv_dir, Some(route))
}

#[allow(clippy::too_many_arguments)]
fn run_episode_impl(
    scene: &Scene,
    goal: &str,
    cfg: &SystemConfig,
    model: &TinyModel,
    provider: &dyn EmbeddingProvider,
    episode_seed: u64,
    kv_dir: &Path,
    route: Option<&[(i32, i32)]>,
) -> Result<EpisodeOutput> {
    cfg.validate()?;
    let provider = CountingProvider {
        inner: provider,
        calls: AtomicU64::new(0),
    };
    let tokenizer = model.tokenizer();
    let themes = ThemeTable::builtin();

    let mut map = NavigationMap::new(cfg.dedup_radius);
    let mut store = Store::new(kv_dir, KvLayout::of(&cfg.model), cfg.probe_layers())?;
    let mut cache = EmbeddingCache::new();
    // Rendered group text already covered by the store (stale + pending);
    // the unmaterialized tail is kept by group.
    let mut rendered: BTreeMap<GroupId, String> = BTreeMap::new();
    let mut pending_text: BTreeMap<GroupId, String> = BTreeMap::new();
    // Groups changed since the last embedding refresh.
    let mut unrefreshed: Vec<GroupId> = Vec::new();

    let start = match route {
        Some(route) => route[0],
        None => pick_start(scene, episode_seed),
    };
    let mut agent = AgentState::at(start);
    let shortest = shortest_to_success(scene, start, goal, cfg.success_radius);
    let path_cap = cfg.path_cap_factor * scene.diagonal();

    let mut explored = vec![false; scene.cell_count()];
    let mut reports: Vec<StepReport> = Vec::new();
    let mut wall_seconds: Vec<f64> = Vec::new();
    let mut cluster_log: Vec<ClusterLogRecord> = Vec::new();
    let mut decision_log: Vec<DecisionLogRecord> = Vec::new();

    let mut success = false;
    let mut termination = Termination::StepCap;

    for step in 1..=cfg.step_cap {
        let t0 = Instant::now();
        agent.step_index = step;
        let mut report = StepReport::zeroed(step, cfg.mode);
        let embed_calls_at = provider.calls.load(Ordering::Relaxed);
        let mut frontier_focus: Option<(f64, f64)> = None;

        // Perception and map update.
        mark_explored(scene, &mut explored, agent.position, cfg.detection_range);
        let detections = detect(scene, agent.position, cfg.detection_range);
        map.add_detections(step, &detections);

        // Clustering of staged objects against start-of-step groups.
        let staged = map.staged().to_vec();
        if !staged.is_empty() {
            let decisions = match cfg.cluster_method {
                ClusterMethod::Position => {
                    clusterer::assign_by_position(&map, &staged, cfg.position_radius)?
                }
                ClusterMethod::Attention => match cfg.cluster.provider {
                    ClusterProvider::EmbeddingSimilarity => clusterer::assign(
                        &map,
                        &staged,
                        &cfg.cluster,
                        &AttentionBackend::EmbeddingSimilarity {
                            provider: &provider,
                            cache: &cache,
                        },
                        tokenizer,
                    )?,
                    ClusterProvider::TinyTransformer => {
                        let probes: Vec<KVBlock> = map
                            .groups()
                            .iter()
                            .map(|g| {
                                Ok(store
                                    .probe_block(g.group_id)?
                                    .expect("probe slices configured"))
                            })
                            .collect::<Result<_>>()?;
                        let layers = cfg.cluster.layers_used(cfg.model.num_layers);
                        for &oid in &staged {
                            let probe_tokens =
                                tokenizer.count(&map.render_member(oid)?) as u64;
                            report.cluster_token_layers += probe_tokens * layers as u64;
                        }
                        clusterer::assign(
                            &map,
                            &staged,
                            &cfg.cluster,
                            &AttentionBackend::TinyTransformer {
                                model,
                                blocks: probes.iter().collect(),
                            },
                            tokenizer,
                        )?
                    }
                },
            };
            for d in &decisions {
                cluster_log.push(ClusterLogRecord {
                    step,
                    object_id: d.object_id,
                    target: match d.target {
                        Assignment::ExistingGroup(g) => format!("group:{g}"),
                        Assignment::NewGroup => "new".into(),
                    },
                    scores: d.scores.clone(),
                });
            }
            let assignments: Vec<(ObjectId, Assignment)> =
                decisions.iter().map(|d| (d.object_id, d.target)).collect();
            let applied = map.apply_assignments(step, &assignments)?;

            let mut changed = applied.extended.clone();
            changed.extend(applied.new_group);
            for gid in changed {
                let new_render = map.render_group(gid)?;
                let old_len = rendered.get(&gid).map_or(0, String::len);
                debug_assert!(new_render.as_bytes()[..old_len]
                    == rendered.get(&gid).map_or(&[] as &[u8], |s| s.as_bytes())[..]);
                let delta = new_render[old_len..].to_string();
                if !store.contains(gid) {
                    store.put(
                        gid,
                        KVBlock::empty(
                            gid,
                            0,
                            cfg.model.num_layers,
                            cfg.model.num_heads as u32,
                            cfg.model.head_dim() as u32,
                        ),
                    )?;
                }
                let pending = pending_text.entry(gid).or_default();
                let before = tokenizer.count(pending) as u32;
                pending.push_str(&delta);
                let after = tokenizer.count(pending) as u32;
                store.register_pending(gid, after - before)?;
                rendered.insert(gid, new_render);
                if !unrefreshed.contains(&gid) {
                    unrefreshed.push(gid);
                }
            }
        }

        // Goal shortcut: no retrieval, no planner call.
        let outcome = if let Some(goal_id) = map.find_goal(goal) {
            let o = map.object(goal_id)?;
            decision_log.push(DecisionLogRecord {
                step,
                goal: goal.to_string(),
                selected_groups: Vec::new(),
                candidate_scores: Vec::new(),
                decision: format!("goal:{}", planner::render_answer(&planner::SubGoalDecision {
                    object_id: o.id,
                    label: o.label.clone(),
                    position: o.position,
                    is_final_goal: true,
                    raw_answer: String::new(),
                })),
            });
            PlanOutcome::SubGoal(planner::SubGoalDecision {
                object_id: o.id,
                label: o.label.clone(),
                position: o.position,
                is_final_goal: true,
                raw_answer: String::new(),
            })
        } else {
            // Retrieval.
            let plan = match cfg.retrieval_method {
                RetrievalMethod::Knapsack => {
                    let plan = retrieval::plan_step(
                        &map,
                        goal,
                        &store,
                        cfg.budget_bytes,
                        &provider,
                        &mut cache,
                        &unrefreshed,
                        &cfg.retrieval,
                    )?;
                    unrefreshed.clear();
                    plan
                }
                RetrievalMethod::DistanceBaseline => {
                    self_refresh_if_needed(cfg, &mut cache, &provider, &map, &mut unrefreshed)?;
                    retrieval::select_by_distance(&map, agent.position, &store, cfg.budget_bytes)?
                }
                RetrievalMethod::AllGroups => {
                    self_refresh_if_needed(cfg, &mut cache, &provider, &map, &mut unrefreshed)?;
                    retrieval::select_all(&map, &store)?
                }
            };

            let candidates = unvisited_in_selection(&map, &plan)?;
            if candidates.is_empty() {
                // Relevant groups with nothing left to visit still say
                // where the goal's neighborhood is; objects of one theme
                // cluster spatially, so unexplored space next to them is
                // the promising frontier.
                frontier_focus = selection_centroid(&map, &plan)?;
                decision_log.push(DecisionLogRecord {
                    step,
                    goal: goal.to_string(),
                    selected_groups: plan.selected.clone(),
                    candidate_scores: Vec::new(),
                    decision: "frontier".into(),
                });
                PlanOutcome::Frontier
            } else {
                let cached = cfg.mode != Mode::BaselineRecompute;
                if cached {
                    let eff_budget = match cfg.retrieval_method {
                        RetrievalMethod::AllGroups => cfg
                            .budget_bytes
                            .max(plan.total_bytes + store.probe_overhead_bytes()),
                        _ => cfg.budget_bytes,
                    };
                    let load = store.ensure_resident(&plan.selected, eff_budget, step)?;
                    report.kv_bytes_loaded = load.loaded_bytes;
                    report.hits = load.hits;
                    report.misses = load.misses;
                    // Materialize pending rows of the selected groups.
                    for &gid in &plan.selected {
                        let text = pending_text.remove(&gid).unwrap_or_default();
                        if text.is_empty() {
                            continue;
                        }
                        let delta_seq = tokenizer.tokenize(&text);
                        let old = store.get_block(gid)?;
                        let extended = model.extend_group_kv(&old, &delta_seq)?;
                        let rows = tail_rows(&extended, old.token_count());
                        store.append(gid, &rows, delta_seq.len() as u32)?;
                        report.tokens_newly_cached += delta_seq.len() as u64;
                    }
                }

                let trajectory = trailing_window(map.trajectory(), cfg.trajectory_window);
                let suffix_text = map.render_prompt(&[], goal, &trajectory)?;
                let suffix_tokens = tokenizer.count(&suffix_text) as u64;
                let mut group_tokens = 0u64;
                for &gid in &plan.selected {
                    group_tokens += u64::from(store.stale_tokens(gid)?)
                        + u64::from(store.pending_tokens(gid)?);
                }
                report.prompt_tokens_total = group_tokens + suffix_tokens;
                report.tokens_recomputed = if cached {
                    suffix_tokens + report.tokens_newly_cached
                } else {
                    report.prompt_tokens_total
                };
                report.decode_tokens = cfg.latency.decode_tokens_per_plan;

                let (outcome, scores) = match cfg.backend {
                    PlannerBackend::SemanticOracle => planner::plan(
                        &map,
                        &plan,
                        goal,
                        &Backend::SemanticOracle {
                            provider: &provider,
                            themes,
                        },
                    )?,
                    PlannerBackend::TinyLlm => {
                        let blocks: Vec<KVBlock> = plan
                            .selected
                            .iter()
                            .map(|&gid| store.get_block(gid))
                            .collect::<Result<_>>()?;
                        let suffix_seq = tokenizer.tokenize(&suffix_text);
                        planner::plan(
                            &map,
                            &plan,
                            goal,
                            &Backend::TinyLlm {
                                model,
                                blocks: blocks.iter().collect(),
                                prompt_suffix: &suffix_seq,
                            },
                        )?
                    }
                };
                if cfg.mode == Mode::OffloadPerDecode {
                    store.demote_all()?;
                }
                decision_log.push(DecisionLogRecord {
                    step,
                    goal: goal.to_string(),
                    selected_groups: plan.selected.clone(),
                    candidate_scores: scores,
                    decision: match &outcome {
                        PlanOutcome::SubGoal(d) => d.raw_answer.clone(),
                        PlanOutcome::Frontier => "frontier".into(),
                    },
                });
                outcome
            }
        };

        report.embed_calls =
            (provider.calls.load(Ordering::Relaxed) - embed_calls_at) as u32;

        // Motion.
        if let Some(route) = route {
            let target = route[(step as usize - 1) % route.len()];
            report.distance_moved = move_to(scene, &mut agent, target)?;
            report.check();
            reports.push(report);
            wall_seconds.push(t0.elapsed().as_secs_f64());
            continue;
        }
        match outcome {
            PlanOutcome::SubGoal(decision) => {
                let target = (decision.position[0], decision.position[1]);
                report.distance_moved = move_to(scene, &mut agent, target)?;
                map.mark_visited(decision.object_id)?;
            }
            PlanOutcome::Frontier => {
                match pick_frontier(scene, &explored, agent.position, frontier_focus) {
                    Some(target) => {
                        report.distance_moved = move_to(scene, &mut agent, target)?;
                    }
                    None => {
                        report.check();
                        reports.push(report);
                        wall_seconds.push(t0.elapsed().as_secs_f64());
                        termination = Termination::Exhausted;
                        break;
                    }
                }
            }
        }

        report.check();
        reports.push(report);
        wall_seconds.push(t0.elapsed().as_secs_f64());

        if within_success_radius(scene, agent.position, goal, cfg.success_radius) {
            success = true;
            termination = Termination::GoalReached;
            break;
        }
        if agent.path_length >= path_cap {
            termination = Termination::PathCap;
            break;
        }
    }

    let steps = reports.len() as u32;
    Ok(EpisodeOutput {
        result: EpisodeResult {
            success,
            agent_path_length: agent.path_length,
            shortest_path_length: shortest,
            steps,
            reports,
            termination,
        },
        logs: EpisodeLogs {
            start,
            cluster: cluster_log,
            decisions: decision_log,
            map: map.snapshot(),
            wall_seconds,
            store_stats: store.stats().clone(),
        },
    })
}

/// Embedding-similarity clustering needs current group vectors even when
/// the retrieval method never calls the encoder.
fn self_refresh_if_needed(
    cfg: &SystemConfig,
    cache: &mut EmbeddingCache,
    provider: &dyn EmbeddingProvider,
    map: &NavigationMap,
    unrefreshed: &mut Vec<GroupId>,
) -> Result<()> {
    if cfg.cluster_method == ClusterMethod::Attention
        && cfg.cluster.provider == ClusterProvider::EmbeddingSimilarity
    {
        cache.refresh(unrefreshed, provider, map)?;
        unrefreshed.clear();
    }
    Ok(())
}

fn pick_start(scene: &Scene, episode_seed: u64) -> (i32, i32) {
    use rand::{Rng, SeedableRng};
    let pool = scene.start_pool();
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(episode_seed);
    pool[rng.gen_range(0..pool.len())]
}

fn within_success_radius(scene: &Scene, pos: (i32, i32), goal: &str, radius: f64) -> bool {
    scene.objects_with_label(goal).iter().any(|o| {
        let dx = f64::from(o.position[0] - pos.0);
        let dy = f64::from(o.position[1] - pos.1);
        (dx * dx + dy * dy).sqrt() <= radius
    })
}

/// Moves from `start` to the nearest cell whose position satisfies the
/// success condition; 0 when no goal instance exists.
fn shortest_to_success(scene: &Scene, start: (i32, i32), goal: &str, radius: f64) -> f64 {
    let instances = scene.objects_with_label(goal);
    if instances.is_empty() {
        return 0.0;
    }
    let dist = bfs_distances(scene, start);
    let mut best = u32::MAX;
    for y in 0..scene.height {
        for x in 0..scene.width {
            if !scene.is_free(x, y) {
                continue;
            }
            let d = dist[scene.cell_index(x, y)];
            if d == u32::MAX || d >= best {
                continue;
            }
            if within_success_radius(scene, (x, y), goal, radius) {
                best = d;
            }
        }
    }
    if best == u32::MAX {
        0.0
    } else {
        f64::from(best)
    }
}

fn mark_explored(scene: &Scene, explored: &mut [bool], pos: (i32, i32), range: f64) {
    let r = range.ceil() as i32;
    for dy in -r..=r {
        for dx in -r..=r {
            let (x, y) = (pos.0 + dx, pos.1 + dy);
            if !scene.is_free(x, y) {
                continue;
            }
            if f64::from(dx * dx + dy * dy).sqrt() > range {
                continue;
            }
            if line_of_sight(scene, pos, (x, y)) {
                explored[scene.cell_index(x, y)] = true;
            }
        }
    }
}

/// How far a frontier cell looks when counting the unexplored area it
/// opens up.
const FRONTIER_GAIN_RADIUS: i32 = 6;

/// Mean member position of the selected groups, the hint for where
/// goal-relevant unexplored space lies.
fn selection_centroid(map: &NavigationMap, plan: &RetrievalPlan) -> Result<Option<(f64, f64)>> {
    let (mut cx, mut cy, mut n) = (0.0f64, 0.0f64, 0usize);
    for g in map.groups() {
        if !plan.selected.contains(&g.group_id) {
            continue;
        }
        for m in &g.members {
            let p = map.object(*m)?.position;
            cx += f64::from(p[0]);
            cy += f64::from(p[1]);
            n += 1;
        }
    }
    Ok((n > 0).then(|| (cx / n as f64, cy / n as f64)))
}

/// Next exploration target among frontier cells (explored, free,
/// adjacent to unexplored free space). With a focus point the nearest
/// frontier to it wins — the goal's neighborhood deserves the sweep.
/// Otherwise the cell opening the largest unexplored area wins, which
/// keeps exploration moving room to room instead of nibbling corners.
fn pick_frontier(
    scene: &Scene,
    explored: &[bool],
    from: (i32, i32),
    focus: Option<(f64, f64)>,
) -> Option<(i32, i32)> {
    let dist = bfs_distances(scene, from);
    // (primary score: bigger is better, dist, row-major cell)
    let mut best: Option<(f64, u32, (i32, i32))> = None;
    for y in 0..scene.height {
        for x in 0..scene.width {
            if !scene.is_free(x, y) || !explored[scene.cell_index(x, y)] || (x, y) == from {
                continue;
            }
            let d = dist[scene.cell_index(x, y)];
            if d == u32::MAX {
                continue;
            }
            let fringe = [(x, y - 1), (x, y + 1), (x - 1, y), (x + 1, y)]
                .into_iter()
                .any(|(nx, ny)| scene.is_free(nx, ny) && !explored[scene.cell_index(nx, ny)]);
            if !fringe {
                continue;
            }
            let score = match focus {
                Some((fx, fy)) => {
                    let dx = f64::from(x) - fx;
                    let dy = f64::from(y) - fy;
                    -(dx * dx + dy * dy)
                }
                None => {
                    let mut gain = 0u32;
                    for dy in -FRONTIER_GAIN_RADIUS..=FRONTIER_GAIN_RADIUS {
                        for dx in -FRONTIER_GAIN_RADIUS..=FRONTIER_GAIN_RADIUS {
                            let (nx, ny) = (x + dx, y + dy);
                            if scene.is_free(nx, ny) && !explored[scene.cell_index(nx, ny)] {
                                gain += 1;
                            }
                        }
                    }
                    f64::from(gain)
                }
            };
            let better = match best {
                None => true,
                Some((bs, bd, bc)) => {
                    score > bs || (score == bs && (d, (y, x)) < (bd, (bc.1, bc.0)))
                }
            };
            if better {
                best = Some((score, d, (x, y)));
            }
        }
    }
    best.map(|(_, _, c)| c)
}

fn unvisited_in_selection(map: &NavigationMap, plan: &RetrievalPlan) -> Result<Vec<ObjectId>> {
    let mut out = Vec::new();
    for g in map.groups() {
        if !plan.selected.contains(&g.group_id) {
            continue;
        }
        for m in &g.members {
            if !map.object(*m)?.visited {
                out.push(*m);
            }
        }
    }
    Ok(out)
}

fn trailing_window(trajectory: &[ObjectId], window: usize) -> Vec<ObjectId> {
    let from = trajectory.len().saturating_sub(window);
    trajectory[from..].to_vec()
}

/// Per-layer rows of the tokens past `from_token`.
fn tail_rows(block: &KVBlock, from_token: u32) -> Vec<crate::model::LayerKv> {
    let width = block.row_width();
    block
        .layers
        .iter()
        .map(|l| crate::model::LayerKv {
            k: l.k[from_token as usize * width..].to_vec(),
            v: l.v[from_token as usize * width..].to_vec(),
        })
        .collect()
}
