//! Semantics-aware memory retrieval: per-group relevance probabilities
//! from an embedding provider and group selection under the device byte
//! budget as a 0/1 knapsack maximizing `sum (P_i - threshold) * x_i`
//! subject to `sum M_i * x_i <= M`.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kvstore::Store;
use crate::navmap::{GroupId, NavigationMap};

pub const DEFAULT_THRESHOLD: f64 = 0.55;
pub const DEFAULT_QUANTUM: u64 = 1024;
pub const EMBED_DIM: usize = 256;

/// Deterministic text-to-unit-vector encoder. The seam where a real
/// encoder service can be substituted.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f32>;
    fn dim(&self) -> usize;
}

/// Character-trigram hashed bag-of-features, L2-normalized. Dependency
/// free and near-orthogonal across disjoint vocabularies.
#[derive(Debug, Clone)]
pub struct ReferenceProvider {
    dim: usize,
    seed: u64,
}

impl Default for ReferenceProvider {
    fn default() -> Self {
        ReferenceProvider {
            dim: EMBED_DIM,
            seed: 0x5eed,
        }
    }
}

impl ReferenceProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 1);
        ReferenceProvider { dim, seed }
    }
}

impl EmbeddingProvider for ReferenceProvider {
    fn embed(&self, text: &str) -> Vec<f32> {
        let mut counts = vec![0.0f32; self.dim];
        let norm = text.to_lowercase();
        let words: Vec<&str> = norm.split_whitespace().collect();
        if words.is_empty() {
            return counts;
        }
        let padded = format!(" {} ", words.join(" "));
        let chars: Vec<char> = padded.chars().collect();
        let mut buf = String::new();
        for win in chars.windows(3) {
            buf.clear();
            buf.extend(win.iter());
            let h = crate::model::stable_hash(self.seed, buf.as_bytes());
            counts[(h % self.dim as u64) as usize] += 1.0;
        }
        l2_normalize(&mut counts);
        counts
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

fn l2_normalize(v: &mut [f32]) {
    let mut ss = 0.0f32;
    for &x in v.iter() {
        ss += x * x;
    }
    if ss > 0.0 {
        let inv = 1.0 / ss.sqrt();
        for x in v.iter_mut() {
            *x *= inv;
        }
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..a.len().min(b.len()) {
        dot += f64::from(a[i]) * f64::from(b[i]);
        na += f64::from(a[i]) * f64::from(a[i]);
        nb += f64::from(b[i]) * f64::from(b[i]);
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

#[derive(Debug, Serialize)]
struct EmbedRequest<'a> {
    texts: Vec<&'a str>,
}

#[derive(Debug, Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
    dim: usize,
}

/// Client for a remote embedding service speaking
/// `POST /embed {"texts":[...]} -> {"vectors":[[...]], "dim":E}`.
/// Responses are checked for dimension and unit norm; any failure
/// (including the 2 s timeout) falls back to the reference provider and
/// is logged and counted.
pub struct RemoteProvider {
    endpoint: String,
    client: reqwest::blocking::Client,
    fallback: ReferenceProvider,
    fallbacks: AtomicU64,
}

impl RemoteProvider {
    pub fn new(endpoint: impl Into<String>) -> Self {
        RemoteProvider {
            endpoint: endpoint.into(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(2))
                .build()
                .expect("client construction cannot fail"),
            fallback: ReferenceProvider::default(),
            fallbacks: AtomicU64::new(0),
        }
    }

    pub fn fallback_count(&self) -> u64 {
        self.fallbacks.load(Ordering::Relaxed)
    }

    fn try_remote(&self, text: &str) -> std::result::Result<Vec<f32>, String> {
        let url = format!("{}/embed", self.endpoint.trim_end_matches('/'));
        let resp = self
            .client
            .post(&url)
            .json(&EmbedRequest { texts: vec![text] })
            .send()
            .map_err(|e| e.to_string())?;
        if !resp.status().is_success() {
            return Err(format!("status {}", resp.status()));
        }
        let body: EmbedResponse = resp.json().map_err(|e| e.to_string())?;
        if body.dim != self.fallback.dim() {
            return Err(format!("dim {} != expected {}", body.dim, self.fallback.dim()));
        }
        let v = body
            .vectors
            .into_iter()
            .next()
            .ok_or_else(|| "empty vectors".to_string())?;
        if v.len() != body.dim {
            return Err(format!("vector length {} != dim {}", v.len(), body.dim));
        }
        let norm: f64 = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(format!("vector norm {norm} is not unit"));
        }
        Ok(v)
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn embed(&self, text: &str) -> Vec<f32> {
        match self.try_remote(text) {
            Ok(v) => v,
            Err(why) => {
                self.fallbacks.fetch_add(1, Ordering::Relaxed);
                log::warn!(
                    "remote embedding at {} failed ({why}); using reference provider",
                    self.endpoint
                );
                self.fallback.embed(text)
            }
        }
    }

    fn dim(&self) -> usize {
        self.fallback.dim()
    }
}

/// Text a group is encoded from: space-joined member labels, semantics
/// only, no positions.
pub fn group_text(map: &NavigationMap, group_id: GroupId) -> Result<String> {
    let group = map.group(group_id)?;
    let mut labels = Vec::with_capacity(group.members.len());
    for m in &group.members {
        labels.push(map.object(*m)?.label.clone());
    }
    Ok(labels.join(" "))
}

/// Relevance probability of a group for a goal: `(1 + cos) / 2`.
/// Empty group text is never relevant.
pub fn group_probability(provider: &dyn EmbeddingProvider, goal: &str, group_text: &str) -> f64 {
    if group_text.trim().is_empty() {
        return 0.0;
    }
    let g = provider.embed(goal);
    let t = provider.embed(group_text);
    (1.0 + cosine(&g, &t)) / 2.0
}

/// How a group's probability is computed from its members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupScoring {
    /// One group-level encoding of the joined labels.
    GroupLevel,
    /// Max over per-member label probabilities.
    PerObjectMax,
}

/// Cached encoder outputs. Only groups with newly detected objects are
/// re-encoded; everything else is served from the cache bit-identically.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    groups: BTreeMap<GroupId, Vec<f32>>,
    labels: BTreeMap<String, Vec<f32>>,
    goal: Option<(String, Vec<f32>)>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Re-encode the changed groups and any group not seen before.
    pub fn refresh(
        &mut self,
        changed_group_ids: &[GroupId],
        provider: &dyn EmbeddingProvider,
        map: &NavigationMap,
    ) -> Result<()> {
        for gid in changed_group_ids {
            let text = group_text(map, *gid)?;
            self.groups.insert(*gid, provider.embed(&text));
        }
        for g in map.groups() {
            if let std::collections::btree_map::Entry::Vacant(e) = self.groups.entry(g.group_id) {
                let text = group_text(map, g.group_id)?;
                e.insert(provider.embed(&text));
            }
        }
        Ok(())
    }

    pub fn group_vector(&self, group_id: GroupId) -> Option<&[f32]> {
        self.groups.get(&group_id).map(Vec::as_slice)
    }

    pub fn goal_vector(&mut self, goal: &str, provider: &dyn EmbeddingProvider) -> &[f32] {
        let stale = match &self.goal {
            Some((g, _)) => g != goal,
            None => true,
        };
        if stale {
            self.goal = Some((goal.to_string(), provider.embed(goal)));
        }
        &self.goal.as_ref().unwrap().1
    }

    pub fn label_vector(&mut self, label: &str, provider: &dyn EmbeddingProvider) -> &[f32] {
        if !self.labels.contains_key(label) {
            self.labels.insert(label.to_string(), provider.embed(label));
        }
        self.labels.get(label).unwrap()
    }
}

/// One group-selection problem. Holds every symbol of the selection
/// objective: probabilities `P`, the relevance `threshold`, per-group
/// byte sizes `M_i`, the byte budget `M`, and the DP size unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnapsackInstance {
    pub group_ids: Vec<GroupId>,
    pub probabilities: Vec<f64>,
    pub threshold: f64,
    pub sizes: Vec<u64>,
    pub budget: u64,
    pub quantum: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPlan {
    /// Selected group ids, ascending.
    pub selected: Vec<GroupId>,
    /// `sum (P_i - threshold)` over the selection, accumulated in
    /// ascending-id order.
    pub objective_value: f64,
    pub total_bytes: u64,
    /// True when the greedy fallback decided instead of the exact DP.
    pub approximate: bool,
}

impl RetrievalPlan {
    pub fn empty() -> Self {
        RetrievalPlan {
            selected: Vec::new(),
            objective_value: 0.0,
            total_bytes: 0,
            approximate: false,
        }
    }
}

/// Past this many positive-value items the exact DP gives way to a
/// density greedy with one swap-improvement pass.
const EXACT_ITEM_LIMIT: usize = 30;
/// Cap on DP table width; wider tables fall back to greedy.
const DP_WIDTH_LIMIT: u64 = 4_000_000;

struct Item {
    gid: GroupId,
    value: f64,
    size: u64,
}

/// Solve the selection knapsack. Items at or below the threshold are
/// never selected; ties between equal-objective solutions break to the
/// lexicographically smallest selected-id set.
pub fn select_groups(inst: &KnapsackInstance) -> RetrievalPlan {
    assert_eq!(inst.group_ids.len(), inst.probabilities.len());
    assert_eq!(inst.group_ids.len(), inst.sizes.len());
    let quantum = inst.quantum.max(1);

    let mut items: Vec<Item> = Vec::new();
    for i in 0..inst.group_ids.len() {
        assert!(inst.sizes[i] > 0, "group sizes are positive");
        let value = inst.probabilities[i] - inst.threshold;
        if value > 0.0 && inst.sizes[i] <= inst.budget {
            items.push(Item {
                gid: inst.group_ids[i],
                value,
                size: inst.sizes[i],
            });
        }
    }
    items.sort_by_key(|it| it.gid);

    if items.is_empty() {
        return RetrievalPlan::empty();
    }

    // Unconstrained case: everything above the threshold fits.
    let total: u64 = items.iter().map(|it| it.size).sum();
    if total <= inst.budget {
        return plan_from(&items, (0..items.len()).collect());
    }

    let width = inst.budget / quantum;
    if items.len() <= EXACT_ITEM_LIMIT && width <= DP_WIDTH_LIMIT {
        exact_select(&items, inst.budget, quantum)
    } else {
        greedy_select(&items, inst.budget)
    }
}

fn plan_from(items: &[Item], chosen: Vec<usize>) -> RetrievalPlan {
    let mut objective = 0.0f64;
    let mut bytes = 0u64;
    let mut selected = Vec::with_capacity(chosen.len());
    for &i in &chosen {
        objective += items[i].value;
        bytes += items[i].size;
        selected.push(items[i].gid);
    }
    RetrievalPlan {
        selected,
        objective_value: objective,
        total_bytes: bytes,
        approximate: false,
    }
}

/// `a` precedes `b` lexicographically as a sorted id set. Equal-value
/// sets are never subset-related here (all values are positive), so the
/// lowest differing member decides.
fn lex_smaller(a: u64, b: u64) -> bool {
    let d = a ^ b;
    d != 0 && (a & d & d.wrapping_neg()) != 0
}

fn exact_select(items: &[Item], budget: u64, quantum: u64) -> RetrievalPlan {
    // Ceil-quantized weights keep every DP-feasible set feasible in real
    // bytes.
    let width = (budget / quantum) as usize;
    let weights: Vec<usize> = items
        .iter()
        .map(|it| it.size.div_ceil(quantum) as usize)
        .collect();

    let mut dp: Vec<Option<(f64, u64)>> = vec![None; width + 1];
    dp[0] = Some((0.0, 0));
    for (i, item) in items.iter().enumerate() {
        let w = weights[i];
        if w > width {
            continue;
        }
        for cap in (w..=width).rev() {
            if let Some((value, mask)) = dp[cap - w] {
                let cand = (value + item.value, mask | (1u64 << i));
                let better = match dp[cap] {
                    None => true,
                    Some((v, m)) => cand.0 > v || (cand.0 == v && lex_smaller(cand.1, m)),
                };
                if better {
                    dp[cap] = Some(cand);
                }
            }
        }
    }

    let mut best = (0.0f64, 0u64);
    for slot in dp.iter().flatten() {
        if slot.0 > best.0 || (slot.0 == best.0 && lex_smaller(slot.1, best.1)) {
            best = *slot;
        }
    }
    let chosen: Vec<usize> = (0..items.len()).filter(|i| best.1 & (1 << i) != 0).collect();
    plan_from(items, chosen)
}

fn greedy_select(items: &[Item], budget: u64) -> RetrievalPlan {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| {
        let da = items[a].value / items[a].size as f64;
        let db = items[b].value / items[b].size as f64;
        db.partial_cmp(&da)
            .unwrap()
            .then(items[a].gid.cmp(&items[b].gid))
    });

    let mut chosen: Vec<bool> = vec![false; items.len()];
    let mut used = 0u64;
    for &i in &order {
        if used + items[i].size <= budget {
            chosen[i] = true;
            used += items[i].size;
        }
    }

    // One swap-improvement pass.
    for out in 0..items.len() {
        if chosen[out] {
            continue;
        }
        let mut best_swap: Option<usize> = None;
        for (inn, _) in items.iter().enumerate() {
            if !chosen[inn] || items[out].value <= items[inn].value {
                continue;
            }
            if used - items[inn].size + items[out].size <= budget
                && best_swap.is_none_or(|b| items[inn].value < items[b].value)
            {
                best_swap = Some(inn);
            }
        }
        if let Some(inn) = best_swap {
            chosen[inn] = false;
            chosen[out] = true;
            used = used - items[inn].size + items[out].size;
        }
    }

    let mut plan = plan_from(
        items,
        (0..items.len()).filter(|&i| chosen[i]).collect(),
    );
    plan.approximate = true;
    plan
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub threshold: f64,
    pub quantum: u64,
    pub scoring: GroupScoring,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            threshold: DEFAULT_THRESHOLD,
            quantum: DEFAULT_QUANTUM,
            scoring: GroupScoring::GroupLevel,
        }
    }
}

/// Build and solve the step's knapsack: refresh changed embeddings,
/// score every group against the goal, take byte sizes from the store,
/// and select under the budget (less the always-resident probe bytes).
/// The plan is what `kvstore::ensure_resident` is handed next.
#[allow(clippy::too_many_arguments)]
pub fn plan_step(
    map: &NavigationMap,
    goal: &str,
    store: &Store,
    budget_bytes: u64,
    provider: &dyn EmbeddingProvider,
    cache: &mut EmbeddingCache,
    changed_groups: &[GroupId],
    cfg: &RetrievalConfig,
) -> Result<RetrievalPlan> {
    cache.refresh(changed_groups, provider, map)?;
    let goal_vec = cache.goal_vector(goal, provider).to_vec();

    let mut inst = KnapsackInstance {
        group_ids: Vec::new(),
        probabilities: Vec::new(),
        threshold: cfg.threshold,
        sizes: Vec::new(),
        budget: budget_bytes.saturating_sub(store.probe_overhead_bytes()),
        quantum: cfg.quantum,
    };
    for g in map.groups() {
        let p = match cfg.scoring {
            GroupScoring::GroupLevel => {
                if g.members.is_empty() {
                    0.0
                } else {
                    let gv = cache.group_vector(g.group_id).expect("refreshed above");
                    (1.0 + cosine(&goal_vec, gv)) / 2.0
                }
            }
            GroupScoring::PerObjectMax => {
                let mut best = 0.0f64;
                for m in &g.members {
                    let label = map.object(*m)?.label.clone();
                    let lv = cache.label_vector(&label, provider);
                    best = best.max((1.0 + cosine(&goal_vec, lv)) / 2.0);
                }
                best
            }
        };
        inst.group_ids.push(g.group_id);
        inst.probabilities.push(p);
        inst.sizes.push(store.size_bytes(g.group_id)?);
    }
    Ok(select_groups(&inst))
}

/// Position-based selection baseline: nearest group centroids first,
/// greedily filling the budget. No semantics.
pub fn select_by_distance(
    map: &NavigationMap,
    agent_pos: (i32, i32),
    store: &Store,
    budget_bytes: u64,
) -> Result<RetrievalPlan> {
    let budget = budget_bytes.saturating_sub(store.probe_overhead_bytes());
    let mut order: Vec<(f64, GroupId, u64)> = Vec::new();
    for g in map.groups() {
        if g.members.is_empty() {
            continue;
        }
        let (mut cx, mut cy) = (0.0f64, 0.0f64);
        for m in &g.members {
            let p = map.object(*m)?.position;
            cx += f64::from(p[0]);
            cy += f64::from(p[1]);
        }
        let n = g.members.len() as f64;
        let dx = cx / n - f64::from(agent_pos.0);
        let dy = cy / n - f64::from(agent_pos.1);
        order.push((
            (dx * dx + dy * dy).sqrt(),
            g.group_id,
            store.size_bytes(g.group_id)?,
        ));
    }
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    let mut selected = Vec::new();
    let mut used = 0u64;
    for (_, gid, size) in order {
        if used + size <= budget {
            selected.push(gid);
            used += size;
        }
    }
    selected.sort_unstable();
    Ok(RetrievalPlan {
        selected,
        objective_value: 0.0,
        total_bytes: used,
        approximate: true,
    })
}

/// Select every non-empty group regardless of budget; the full-prompt
/// baseline.
pub fn select_all(map: &NavigationMap, store: &Store) -> Result<RetrievalPlan> {
    let mut selected = Vec::new();
    let mut used = 0u64;
    for g in map.groups() {
        if g.members.is_empty() {
            continue;
        }
        selected.push(g.group_id);
        used += store.size_bytes(g.group_id)?;
    }
    Ok(RetrievalPlan {
        selected,
        objective_value: 0.0,
        total_bytes: used,
        approximate: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn provider() -> ReferenceProvider {
        ReferenceProvider::default()
    }

    #[test]
    fn reference_embeddings_are_unit_length_and_deterministic() {
        let p = provider();
        for text in ["sofa", "kitchen sink kitchen stove", "a"] {
            let v = p.embed(text);
            let norm: f64 = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-6, "norm of {text:?} = {norm}");
            assert_eq!(v, p.embed(text), "deterministic across calls");
        }
        assert!(p.embed("").iter().all(|&x| x == 0.0));
        assert!(p.embed("   ").iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_texts_have_probability_one() {
        let p = provider();
        let prob = group_probability(&p, "sofa couch", "sofa couch");
        assert!((prob - 1.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_vectors_give_half() {
        struct Fixed;
        impl EmbeddingProvider for Fixed {
            fn embed(&self, text: &str) -> Vec<f32> {
                if text == "a" {
                    vec![1.0, 0.0]
                } else {
                    vec![0.0, 1.0]
                }
            }
            fn dim(&self) -> usize {
                2
            }
        }
        assert_eq!(group_probability(&Fixed, "a", "b"), 0.5);
    }

    #[test]
    fn empty_group_text_has_probability_zero() {
        assert_eq!(group_probability(&provider(), "tv", ""), 0.0);
        assert_eq!(group_probability(&provider(), "tv", "  "), 0.0);
    }

    #[test]
    fn goal_shares_features_with_the_right_room() {
        let p = provider();
        let living = group_probability(&p, "TV", "sofa couch tv stand lamp television");
        let kitchen = group_probability(&p, "TV", "oven stove pan kettle toaster");
        assert!(
            living > kitchen,
            "living room {living} should beat kitchen {kitchen}"
        );
    }

    struct Counting<'a> {
        inner: &'a ReferenceProvider,
        calls: std::cell::Cell<u64>,
    }
    // The cache tests run single-threaded; Cell is enough.
    unsafe impl Sync for Counting<'_> {}
    impl EmbeddingProvider for Counting<'_> {
        fn embed(&self, text: &str) -> Vec<f32> {
            self.calls.set(self.calls.get() + 1);
            self.inner.embed(text)
        }
        fn dim(&self) -> usize {
            self.inner.dim()
        }
    }

    fn themed_map() -> NavigationMap {
        use crate::navmap::Assignment;
        let mut map = NavigationMap::default();
        map.add_detections(
            1,
            &[
                ("kitchen sink".into(), [2, 2, 5]),
                ("kitchen stove".into(), [4, 2, 5]),
            ],
        );
        let staged: Vec<_> = map.staged().to_vec();
        map.apply_assignments(1, &staged.iter().map(|&s| (s, Assignment::NewGroup)).collect::<Vec<_>>())
            .unwrap();
        map.add_detections(
            2,
            &[
                ("bedroom bed".into(), [20, 20, 5]),
                ("bedroom lamp".into(), [22, 20, 5]),
            ],
        );
        let staged: Vec<_> = map.staged().to_vec();
        map.apply_assignments(2, &staged.iter().map(|&s| (s, Assignment::NewGroup)).collect::<Vec<_>>())
            .unwrap();
        map
    }

    #[test]
    fn refresh_touches_only_changed_groups() {
        let map = themed_map();
        let reference = provider();
        let counting = Counting {
            inner: &reference,
            calls: std::cell::Cell::new(0),
        };
        let mut cache = EmbeddingCache::new();
        cache.refresh(&[1, 2], &counting, &map).unwrap();
        assert_eq!(counting.calls.get(), 2);

        // No changes: zero provider calls.
        cache.refresh(&[], &counting, &map).unwrap();
        assert_eq!(counting.calls.get(), 2);

        // One changed group of two: exactly one call.
        cache.refresh(&[2], &counting, &map).unwrap();
        assert_eq!(counting.calls.get(), 3);

        // Cache contents equal a fresh full recompute.
        let mut fresh = EmbeddingCache::new();
        fresh.refresh(&[1, 2], &reference, &map).unwrap();
        assert_eq!(cache.group_vector(1), fresh.group_vector(1));
        assert_eq!(cache.group_vector(2), fresh.group_vector(2));
    }

    /// Minimal single-shot HTTP server for exercising the remote
    /// protocol: answers every request on the listener with `body`.
    fn serve_embeddings(listener: std::net::TcpListener, body: String, requests: usize) {
        use std::io::{Read, Write};
        std::thread::spawn(move || {
            for _ in 0..requests {
                let (mut sock, _) = match listener.accept() {
                    Ok(conn) => conn,
                    Err(_) => return,
                };
                let mut raw = Vec::new();
                let mut buf = [0u8; 4096];
                let header_end = loop {
                    let n = sock.read(&mut buf).unwrap();
                    if n == 0 {
                        break None;
                    }
                    raw.extend_from_slice(&buf[..n]);
                    if let Some(at) = raw.windows(4).position(|w| w == b"\r\n\r\n") {
                        break Some(at + 4);
                    }
                };
                let Some(header_end) = header_end else { continue };
                let headers = String::from_utf8_lossy(&raw[..header_end]).to_lowercase();
                let want: usize = headers
                    .lines()
                    .find_map(|l| l.strip_prefix("content-length:"))
                    .and_then(|v| v.trim().parse().ok())
                    .unwrap_or(0);
                while raw.len() - header_end < want {
                    let n = sock.read(&mut buf).unwrap();
                    if n == 0 {
                        break;
                    }
                    raw.extend_from_slice(&buf[..n]);
                }
                let resp = format!(
                    "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                    body.len(),
                    body
                );
                sock.write_all(resp.as_bytes()).unwrap();
            }
        });
    }

    #[test]
    fn remote_provider_uses_valid_service_vectors() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let mut unit = vec![0.0f32; EMBED_DIM];
        unit[3] = 1.0;
        let body = serde_json::json!({"vectors": [unit], "dim": EMBED_DIM}).to_string();
        serve_embeddings(listener, body, 1);

        let provider = RemoteProvider::new(format!("http://{addr}"));
        let v = provider.embed("sofa");
        assert_eq!(v.len(), EMBED_DIM);
        assert_eq!(v[3], 1.0);
        assert_eq!(provider.fallback_count(), 0);
    }

    #[test]
    fn remote_provider_falls_back_on_bad_dim_and_dead_endpoint() {
        // Self-consistent response with the wrong dimensionality.
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let body = serde_json::json!({"vectors": [[1.0, 0.0]], "dim": 2}).to_string();
        serve_embeddings(listener, body, 1);
        let provider = RemoteProvider::new(format!("http://{addr}"));
        let v = provider.embed("sofa");
        assert_eq!(v, ReferenceProvider::default().embed("sofa"));
        assert_eq!(provider.fallback_count(), 1);

        // Nothing listening: connection refused, immediate fallback.
        let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let dead_addr = dead.local_addr().unwrap();
        drop(dead);
        let provider = RemoteProvider::new(format!("http://{dead_addr}"));
        let v = provider.embed("kitchen pot");
        assert_eq!(v, ReferenceProvider::default().embed("kitchen pot"));
        assert_eq!(provider.fallback_count(), 1);
    }

    #[test]
    fn remote_provider_rejects_non_unit_vectors() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let mut long = vec![0.0f32; EMBED_DIM];
        long[0] = 2.0;
        let body = serde_json::json!({"vectors": [long], "dim": EMBED_DIM}).to_string();
        serve_embeddings(listener, body, 1);
        let provider = RemoteProvider::new(format!("http://{addr}"));
        let v = provider.embed("bed");
        assert_eq!(v, ReferenceProvider::default().embed("bed"));
        assert_eq!(provider.fallback_count(), 1);
    }

    fn inst(values: &[f64], sizes: &[u64], budget: u64) -> KnapsackInstance {
        KnapsackInstance {
            group_ids: (1..=values.len() as u64).collect(),
            probabilities: values.to_vec(),
            threshold: 0.0,
            sizes: sizes.to_vec(),
            budget,
            quantum: 1,
        }
    }

    #[test]
    fn below_threshold_items_are_never_selected() {
        let plan = select_groups(&KnapsackInstance {
            group_ids: vec![1, 2],
            probabilities: vec![0.4, 0.55],
            threshold: 0.55,
            sizes: vec![1, 1],
            budget: 100,
            quantum: 1,
        });
        assert!(plan.selected.is_empty());
        assert_eq!(plan.objective_value, 0.0);
    }

    #[test]
    fn ample_budget_selects_exactly_the_above_threshold_set() {
        let plan = select_groups(&KnapsackInstance {
            group_ids: vec![1, 2, 3],
            probabilities: vec![0.9, 0.2, 0.7],
            threshold: 0.55,
            sizes: vec![5, 5, 5],
            budget: 1000,
            quantum: 1,
        });
        assert_eq!(plan.selected, vec![1, 3]);
        assert!(!plan.approximate);
    }

    #[test]
    fn tight_budget_picks_the_brute_force_optimum() {
        // Values 0.30, 0.25, 0.35 with sizes 3, 4, 5 under budget 7:
        // {1,2} at 0.55 beats {3} and the infeasible {1,3}.
        let plan = select_groups(&inst(&[0.30, 0.25, 0.35], &[3, 4, 5], 7));
        assert_eq!(plan.selected, vec![1, 2]);
        assert!((plan.objective_value - 0.55).abs() < 1e-12);
        assert_eq!(plan.total_bytes, 7);
    }

    /// Exhaustive oracle; values summed in ascending-id order exactly
    /// like the solver reports them.
    fn brute_force(inst: &KnapsackInstance) -> (f64, Vec<GroupId>) {
        let n = inst.group_ids.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| inst.group_ids[i]);
        let mut best = (0.0f64, 0u64);
        for mask in 0u64..(1 << n) {
            let (mut value, mut weight) = (0.0f64, 0u64);
            for (bit, &i) in order.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    let v = inst.probabilities[i] - inst.threshold;
                    if v <= 0.0 {
                        weight = u64::MAX;
                        break;
                    }
                    value += v;
                    weight = weight.saturating_add(inst.sizes[i]);
                }
            }
            if weight <= inst.budget
                && (value > best.0 || (value == best.0 && lex_smaller(mask, best.1)))
            {
                best = (value, mask);
            }
        }
        let ids = order
            .iter()
            .enumerate()
            .filter(|(bit, _)| best.1 & (1 << bit) != 0)
            .map(|(_, &i)| inst.group_ids[i])
            .collect();
        (best.0, ids)
    }

    #[test]
    fn exact_mode_matches_brute_force_on_random_instances() {
        let mut rng = StdRng::seed_from_u64(99);
        for trial in 0..300 {
            let n = rng.gen_range(1..=10);
            let inst = KnapsackInstance {
                group_ids: (1..=n as u64).collect(),
                probabilities: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
                threshold: rng.gen_range(0.2..0.8),
                sizes: (0..n).map(|_| rng.gen_range(1..50)).collect(),
                budget: rng.gen_range(10..120),
                quantum: 1,
            };
            let plan = select_groups(&inst);
            let (opt, ids) = brute_force(&inst);
            assert_eq!(plan.objective_value, opt, "trial {trial}: {inst:?}");
            assert_eq!(plan.selected, ids, "trial {trial} tie-break");
            assert!(plan.total_bytes <= inst.budget);
        }
    }

    #[test]
    fn monotone_in_budget() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(1..=8);
            let mut inst = KnapsackInstance {
                group_ids: (1..=n as u64).collect(),
                probabilities: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
                threshold: 0.4,
                sizes: (0..n).map(|_| rng.gen_range(1..40)).collect(),
                budget: 0,
                quantum: 1,
            };
            let mut last = 0.0f64;
            for budget in [10u64, 30, 60, 120, 10_000] {
                inst.budget = budget;
                let plan = select_groups(&inst);
                assert!(plan.objective_value >= last - 1e-12);
                assert!(plan.selected.iter().all(|gid| {
                    let i = inst.group_ids.iter().position(|g| g == gid).unwrap();
                    inst.probabilities[i] > inst.threshold
                }));
                last = plan.objective_value;
            }
        }
    }

    #[test]
    fn greedy_mode_is_feasible_and_flagged() {
        let mut rng = StdRng::seed_from_u64(17);
        let n = 120;
        let inst = KnapsackInstance {
            group_ids: (1..=n as u64).collect(),
            probabilities: (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
            threshold: 0.3,
            sizes: (0..n).map(|_| rng.gen_range(100..5000)).collect(),
            budget: 40_000,
            quantum: 64,
        };
        let plan = select_groups(&inst);
        assert!(plan.approximate);
        assert!(plan.total_bytes <= inst.budget);
        assert!(!plan.selected.is_empty());
    }

    fn themed_store(map: &NavigationMap, dir: &std::path::Path) -> Store {
        use crate::kvstore::KvLayout;
        use crate::model::{KVBlock, LayerKv};
        let layout = KvLayout {
            num_layers: 1,
            num_heads: 1,
            head_dim: 2,
        };
        let mut store = Store::new(dir, layout, 0).unwrap();
        for g in map.groups() {
            let tokens = 10 * g.members.len() as u32;
            let mut block = KVBlock::empty(g.group_id, 0, 1, 1, 2);
            let width = (tokens * 2) as usize;
            block.append_rows(
                &[LayerKv {
                    k: vec![0.0; width],
                    v: vec![0.0; width],
                }],
                tokens,
            );
            store.put(g.group_id, block).unwrap();
        }
        store
    }

    #[test]
    fn plan_step_prefers_the_goal_theme_and_is_deterministic() {
        let map = themed_map();
        let dir = tempfile::tempdir().unwrap();
        let store = themed_store(&map, dir.path());
        let provider = provider();
        let mut cache = EmbeddingCache::new();
        let cfg = RetrievalConfig::default();

        let plan = plan_step(
            &map, "kitchen pot", &store, 1 << 20, &provider, &mut cache, &[1, 2], &cfg,
        )
        .unwrap();
        // The goal shares features with the kitchen group only; the
        // bedroom group sits at the orthogonal baseline, under the
        // threshold.
        assert_eq!(plan.selected, vec![1]);
        assert!(plan.total_bytes <= 1 << 20);

        // Repeating the identical step gives the identical plan.
        let again = plan_step(
            &map, "kitchen pot", &store, 1 << 20, &provider, &mut cache, &[], &cfg,
        )
        .unwrap();
        assert_eq!(plan, again);

        // A budget below the single relevant group yields an empty plan.
        let starved = plan_step(
            &map, "kitchen pot", &store, 64, &provider, &mut cache, &[], &cfg,
        )
        .unwrap();
        assert!(starved.selected.is_empty());
        assert_eq!(starved.objective_value, 0.0);
    }

    #[test]
    fn per_object_max_scoring_matches_best_member() {
        let map = themed_map();
        let dir = tempfile::tempdir().unwrap();
        let store = themed_store(&map, dir.path());
        let provider = provider();
        let mut cache = EmbeddingCache::new();
        let cfg = RetrievalConfig {
            scoring: GroupScoring::PerObjectMax,
            ..RetrievalConfig::default()
        };
        // Exact-label goal: the per-object max for group 1 is the
        // "kitchen stove" member at probability 1.
        let plan = plan_step(
            &map, "kitchen stove", &store, 1 << 20, &provider, &mut cache, &[1, 2], &cfg,
        )
        .unwrap();
        assert_eq!(plan.selected, vec![1]);
        let p_exact = group_probability(&provider, "kitchen stove", "kitchen stove");
        assert!(
            plan.objective_value > p_exact - cfg.threshold - 1e-6,
            "objective {} should reflect the exact-member match",
            plan.objective_value
        );
    }

    #[test]
    fn distance_baseline_and_select_all_respect_their_contracts() {
        let map = themed_map();
        let dir = tempfile::tempdir().unwrap();
        let store = themed_store(&map, dir.path());
        // Agent next to the bedroom group: it comes first, and the
        // budget only fits one group.
        let one_group = store.size_bytes(2).unwrap() + 8;
        let plan = select_by_distance(&map, (21, 20), &store, one_group).unwrap();
        assert_eq!(plan.selected, vec![2]);
        assert!(plan.approximate);

        let all = select_all(&map, &store).unwrap();
        assert_eq!(all.selected, vec![1, 2]);
        assert_eq!(
            all.total_bytes,
            store.size_bytes(1).unwrap() + store.size_bytes(2).unwrap()
        );
    }

    #[test]
    fn quantization_is_conservative() {
        // ceil-quantized weights can only shrink the feasible set, never
        // let real bytes exceed the budget.
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..100 {
            let n = rng.gen_range(1..=8);
            let inst = KnapsackInstance {
                group_ids: (1..=n as u64).collect(),
                probabilities: (0..n).map(|_| rng.gen_range(0.5..1.0)).collect(),
                threshold: 0.2,
                sizes: (0..n).map(|_| rng.gen_range(100..3000)).collect(),
                budget: rng.gen_range(500..6000),
                quantum: 256,
            };
            let plan = select_groups(&inst);
            assert!(plan.total_bytes <= inst.budget, "{inst:?} -> {plan:?}");
        }
    }
}
