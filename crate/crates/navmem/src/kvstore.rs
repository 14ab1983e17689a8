//! Two-tier, group-granular KV cache store.
//!
//! The device tier is a byte-budgeted in-memory map; the backing tier is
//! a directory of `group_<id>.kv` files in the block binary format.
//! Eviction is LRU over `last_used_step` and runs synchronously inside
//! `ensure_resident` and `append`. Blocks may carry *pending* tokens:
//! text already assigned to the group whose KV has not been computed yet.
//! Pending tokens count toward a group's budgeted size (the retrieval
//! budget must cover the group as it will be prompted) but are not bytes
//! on disk, so they never appear in transfer accounting.
//!
//! When attention-based clustering is active, the first `probe_layers`
//! layers of every group stay in device memory regardless of tier; those
//! bytes are charged against the device budget.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{KVBlock, LayerKv, ModelConfig};
use crate::navmap::GroupId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tier {
    Device,
    Backing,
}

/// KV tensor shape the store expects of every block.
#[derive(Debug, Clone, Copy)]
pub struct KvLayout {
    pub num_layers: usize,
    pub num_heads: u32,
    pub head_dim: u32,
}

impl KvLayout {
    pub fn of(cfg: &ModelConfig) -> Self {
        KvLayout {
            num_layers: cfg.num_layers,
            num_heads: cfg.num_heads as u32,
            head_dim: cfg.head_dim() as u32,
        }
    }

    fn size_for(&self, layers: usize, tokens: u64) -> u64 {
        KVBlock::serialized_size_for(layers, self.num_heads, self.head_dim, tokens)
    }
}

#[derive(Debug)]
struct Entry {
    tier: Tier,
    /// In-memory block; present exactly when tier is Device.
    block: Option<KVBlock>,
    /// Always-resident first-layers slice for clustering probes.
    probe: Option<KVBlock>,
    stale_tokens: u32,
    pending_tokens: u32,
    last_used_step: u32,
}

/// Outcome of one `ensure_resident` call.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub hits: u32,
    pub misses: u32,
    pub loaded_bytes: u64,
    pub evicted: Vec<GroupId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub step: u32,
    pub hits: u32,
    pub misses: u32,
    pub loaded_bytes: u64,
    pub device_bytes: u64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StoreStats {
    pub cumulative_hits: u64,
    pub cumulative_misses: u64,
    pub cumulative_loaded_bytes: u64,
    pub per_step: Vec<StepStats>,
}

impl StoreStats {
    /// Hit rate over the inclusive step window. A window with zero
    /// requests is undefined, not zero.
    pub fn hit_rate(&self, window: RangeInclusive<u32>) -> Option<f64> {
        let (mut hits, mut total) = (0u64, 0u64);
        for s in &self.per_step {
            if window.contains(&s.step) {
                hits += u64::from(s.hits);
                total += u64::from(s.hits) + u64::from(s.misses);
            }
        }
        (total > 0).then(|| hits as f64 / total as f64)
    }

    pub fn cumulative_hit_rate(&self) -> Option<f64> {
        let total = self.cumulative_hits + self.cumulative_misses;
        (total > 0).then(|| self.cumulative_hits as f64 / total as f64)
    }

    /// CSV columns: step, hits, misses, loaded_bytes, device_bytes.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "hits", "misses", "loaded_bytes", "device_bytes"])?;
        for s in &self.per_step {
            out.write_record([
                s.step.to_string(),
                s.hits.to_string(),
                s.misses.to_string(),
                s.loaded_bytes.to_string(),
                s.device_bytes.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    layout: KvLayout,
    probe_layers: usize,
    entries: BTreeMap<GroupId, Entry>,
    budget: u64,
    stats: StoreStats,
}

impl Store {
    pub fn new(dir: impl Into<PathBuf>, layout: KvLayout, probe_layers: usize) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        assert!(
            probe_layers <= layout.num_layers,
            "probe_layers must not exceed the model depth"
        );
        Ok(Store {
            dir,
            layout,
            probe_layers,
            entries: BTreeMap::new(),
            budget: u64::MAX,
            stats: StoreStats::default(),
        })
    }

    pub fn layout(&self) -> KvLayout {
        self.layout
    }

    pub fn set_budget(&mut self, budget_bytes: u64) {
        self.budget = budget_bytes;
        self.evict_to_budget(&[], &mut Vec::new());
    }

    pub fn stats(&self) -> &StoreStats {
        &self.stats
    }

    pub fn group_ids(&self) -> impl Iterator<Item = GroupId> + '_ {
        self.entries.keys().copied()
    }

    pub fn contains(&self, group_id: GroupId) -> bool {
        self.entries.contains_key(&group_id)
    }

    pub fn tier(&self, group_id: GroupId) -> Result<Tier> {
        Ok(self.entry(group_id)?.tier)
    }

    /// Budgeted size: serialized bytes of the block once its pending
    /// tokens are materialized.
    pub fn size_bytes(&self, group_id: GroupId) -> Result<u64> {
        let e = self.entry(group_id)?;
        Ok(self.prospective_size(e))
    }

    pub fn pending_tokens(&self, group_id: GroupId) -> Result<u32> {
        Ok(self.entry(group_id)?.pending_tokens)
    }

    pub fn stale_tokens(&self, group_id: GroupId) -> Result<u32> {
        Ok(self.entry(group_id)?.stale_tokens)
    }

    /// Device-tier footprint: full (prospective) size of resident blocks
    /// plus the always-resident probe slices of backing ones.
    pub fn device_bytes(&self) -> u64 {
        self.entries
            .values()
            .map(|e| match e.tier {
                Tier::Device => self.prospective_size(e),
                Tier::Backing => self.probe_size(e),
            })
            .sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.entries.values().map(|e| self.prospective_size(e)).sum()
    }

    /// Device bytes the probe slices of backing groups would still pin
    /// if everything else were evicted. Retrieval subtracts this from
    /// the budget it hands to the knapsack.
    pub fn probe_overhead_bytes(&self) -> u64 {
        self.entries.values().map(|e| self.probe_size(e)).sum()
    }

    /// Insert or replace a block. New entries land in the backing tier;
    /// an existing entry is replaced in place, keeping its tier.
    pub fn put(&mut self, group_id: GroupId, block: KVBlock) -> Result<()> {
        self.check_shape(&block)?;
        assert_eq!(block.group_id, group_id, "block is tagged with its group id");
        let probe = (self.probe_layers > 0).then(|| block.probe_prefix(self.probe_layers));
        match self.entries.get_mut(&group_id) {
            Some(e) => {
                e.stale_tokens = block.token_count();
                e.pending_tokens = 0;
                e.probe = probe;
                match e.tier {
                    Tier::Device => e.block = Some(block),
                    Tier::Backing => {
                        e.block = None;
                        write_block(&self.dir, group_id, &block)?;
                    }
                }
            }
            None => {
                write_block(&self.dir, group_id, &block)?;
                self.entries.insert(
                    group_id,
                    Entry {
                        tier: Tier::Backing,
                        block: None,
                        probe,
                        stale_tokens: block.token_count(),
                        pending_tokens: 0,
                        last_used_step: 0,
                    },
                );
            }
        }
        self.evict_to_budget(&[], &mut Vec::new());
        Ok(())
    }

    /// Record tokens assigned to the group whose KV is not computed yet.
    pub fn register_pending(&mut self, group_id: GroupId, extra_tokens: u32) -> Result<()> {
        self.entry_mut(group_id)?.pending_tokens += extra_tokens;
        self.evict_to_budget(&[], &mut Vec::new());
        Ok(())
    }

    /// Append computed KV rows to an existing entry. The tier is
    /// unchanged; if the device tier overflows, other groups are evicted
    /// but never the appended one.
    pub fn append(&mut self, group_id: GroupId, rows: &[LayerKv], extra_tokens: u32) -> Result<()> {
        let dir = self.dir.clone();
        let probe_layers = self.probe_layers;
        let e = self.entry_mut(group_id)?;
        if extra_tokens == 0 {
            return Ok(());
        }
        match e.tier {
            Tier::Device => {
                e.block
                    .as_mut()
                    .expect("device entry holds a block")
                    .append_rows(rows, extra_tokens);
            }
            Tier::Backing => {
                let mut block = read_block(&dir, group_id)?;
                block.append_rows(rows, extra_tokens);
                write_block(&dir, group_id, &block)?;
            }
        }
        if let Some(probe) = e.probe.as_mut() {
            probe.append_rows(&rows[..probe_layers], extra_tokens);
        }
        e.stale_tokens += extra_tokens;
        e.pending_tokens = e.pending_tokens.saturating_sub(extra_tokens);
        self.evict_to_budget(&[group_id], &mut Vec::new());
        Ok(())
    }

    /// Make every requested group device-resident under `budget_bytes`.
    /// Hits were already resident; misses are read from backing files.
    /// Evictions touch only non-requested groups, LRU first.
    pub fn ensure_resident(
        &mut self,
        requested: &[GroupId],
        budget_bytes: u64,
        step: u32,
    ) -> Result<LoadReport> {
        self.budget = budget_bytes;
        let mut unique: Vec<GroupId> = Vec::with_capacity(requested.len());
        for gid in requested {
            if !unique.contains(gid) {
                unique.push(*gid);
            }
        }

        let mut requested_bytes = 0u64;
        for gid in &unique {
            requested_bytes += self.size_bytes(*gid)?;
        }
        let overhead: u64 = self
            .entries
            .iter()
            .filter(|(gid, _)| !unique.contains(gid))
            .map(|(_, e)| self.probe_size(e))
            .sum();
        if requested_bytes + overhead > budget_bytes {
            return Err(Error::BudgetInfeasible {
                requested_bytes,
                overhead_bytes: overhead,
                budget_bytes,
            });
        }

        let mut report = LoadReport::default();
        for gid in &unique {
            let e = self.entries.get(gid).expect("checked above");
            match e.tier {
                Tier::Device => report.hits += 1,
                Tier::Backing => {
                    let block = read_block(&self.dir, *gid)?;
                    report.misses += 1;
                    report.loaded_bytes += block.serialized_size();
                    let e = self.entries.get_mut(gid).unwrap();
                    e.block = Some(block);
                    e.tier = Tier::Device;
                }
            }
            self.entries.get_mut(gid).unwrap().last_used_step = step;
        }

        self.evict_to_budget(&unique, &mut report.evicted);

        self.stats.cumulative_hits += u64::from(report.hits);
        self.stats.cumulative_misses += u64::from(report.misses);
        self.stats.cumulative_loaded_bytes += report.loaded_bytes;
        self.stats.per_step.push(StepStats {
            step,
            hits: report.hits,
            misses: report.misses,
            loaded_bytes: report.loaded_bytes,
            device_bytes: self.device_bytes(),
        });
        Ok(report)
    }

    /// Demote every device-resident group; used to model systems that
    /// retain nothing between planning steps.
    pub fn demote_all(&mut self) -> Result<()> {
        let ids: Vec<GroupId> = self.entries.keys().copied().collect();
        for gid in ids {
            if self.entries[&gid].tier == Tier::Device {
                self.demote(gid)?;
            }
        }
        Ok(())
    }

    /// Current block contents (without pending tokens), read from memory
    /// or disk. Not a planning-path load: no stats are touched.
    pub fn get_block(&self, group_id: GroupId) -> Result<KVBlock> {
        let e = self.entry(group_id)?;
        match e.tier {
            Tier::Device => Ok(e.block.clone().expect("device entry holds a block")),
            Tier::Backing => read_block(&self.dir, group_id),
        }
    }

    /// Always-resident first-layers slice for clustering, if configured.
    pub fn probe_block(&self, group_id: GroupId) -> Result<Option<KVBlock>> {
        Ok(self.entry(group_id)?.probe.clone())
    }

    fn entry(&self, group_id: GroupId) -> Result<&Entry> {
        self.entries.get(&group_id).ok_or(Error::UnknownGroup(group_id))
    }

    fn entry_mut(&mut self, group_id: GroupId) -> Result<&mut Entry> {
        self.entries
            .get_mut(&group_id)
            .ok_or(Error::UnknownGroup(group_id))
    }

    fn prospective_size(&self, e: &Entry) -> u64 {
        self.layout.size_for(
            self.layout.num_layers,
            u64::from(e.stale_tokens) + u64::from(e.pending_tokens),
        )
    }

    fn probe_size(&self, e: &Entry) -> u64 {
        if self.probe_layers == 0 {
            0
        } else {
            self.layout
                .size_for(self.probe_layers, u64::from(e.stale_tokens))
        }
    }

    fn check_shape(&self, block: &KVBlock) -> Result<()> {
        if block.layer_count() != self.layout.num_layers
            || block.num_heads() != self.layout.num_heads
            || block.head_dim() != self.layout.head_dim
        {
            return Err(Error::ModelMismatch {
                block_layers: block.layer_count(),
                block_head_dim: block.head_dim() as usize,
                model_layers: self.layout.num_layers,
                model_head_dim: self.layout.head_dim as usize,
            });
        }
        Ok(())
    }

    fn demote(&mut self, gid: GroupId) -> Result<()> {
        let e = self.entries.get_mut(&gid).expect("demote target exists");
        let block = e.block.take().expect("device entry holds a block");
        e.tier = Tier::Backing;
        write_block(&self.dir, gid, &block)
    }

    fn evict_to_budget(&mut self, protect: &[GroupId], evicted: &mut Vec<GroupId>) {
        while self.device_bytes() > self.budget {
            let victim = self
                .entries
                .iter()
                .filter(|(gid, e)| e.tier == Tier::Device && !protect.contains(gid))
                .min_by_key(|(gid, e)| (e.last_used_step, **gid))
                .map(|(gid, _)| *gid);
            match victim {
                Some(gid) => {
                    self.demote(gid).expect("backing dir is writable");
                    evicted.push(gid);
                }
                None => break,
            }
        }
    }
}

fn block_path(dir: &Path, gid: GroupId) -> PathBuf {
    dir.join(format!("group_{gid}.kv"))
}

fn write_block(dir: &Path, gid: GroupId, block: &KVBlock) -> Result<()> {
    std::fs::write(block_path(dir, gid), block.to_bytes())?;
    Ok(())
}

fn read_block(dir: &Path, gid: GroupId) -> Result<KVBlock> {
    let bytes = std::fs::read(block_path(dir, gid))?;
    KVBlock::from_bytes(&bytes)
}
