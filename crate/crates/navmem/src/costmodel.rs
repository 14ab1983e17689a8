//! Parameterized latency accounting: per-step counters in, modeled
//! planning time (RtL) and whole-task time (E2EL) out. Modeled time is
//! config-driven arithmetic; wall-clock timings are recorded next to it
//! and never mixed in.

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// How the step's caching behaved upstream.
///
/// `BaselineRecompute` prefills the whole prompt every step and loads
/// nothing. `OffloadPerDecode` keeps KV in slow storage and re-loads the
/// requested blocks once per decoded token. `EfficientNav` loads misses
/// once per step and reuses resident blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "baseline-recompute")]
    BaselineRecompute,
    #[serde(rename = "offload-per-decode")]
    OffloadPerDecode,
    #[serde(rename = "efficientnav")]
    EfficientNav,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::BaselineRecompute => "baseline-recompute",
            Mode::OffloadPerDecode => "offload-per-decode",
            Mode::EfficientNav => "efficientnav",
        };
        f.write_str(s)
    }
}

/// Cost-model coefficients, all seconds per unit. Defaults are
/// calibrated so the recompute-vs-cached planning-time ratio on the
/// bundled growth benchmark lands mid single digits; they are shape
/// parameters, not hardware claims.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyParams {
    pub prefill_per_token: f64,
    pub decode_per_token: f64,
    /// Slow-tier read bandwidth, seconds per MiB.
    pub transfer_per_mb: f64,
    pub embed_per_group: f64,
    pub cluster_per_token_layer: f64,
    pub move_per_cell: f64,
    /// Tokens the planner decodes per planning call.
    pub decode_tokens_per_plan: u32,
}

impl Default for LatencyParams {
    fn default() -> Self {
        LatencyParams {
            prefill_per_token: 0.002,
            decode_per_token: 0.0005,
            transfer_per_mb: 0.05,
            embed_per_group: 0.0005,
            cluster_per_token_layer: 2.0e-5,
            move_per_cell: 0.1,
            decode_tokens_per_plan: 40,
        }
    }
}

impl LatencyParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.prefill_per_token,
            self.decode_per_token,
            self.transfer_per_mb,
            self.embed_per_group,
            self.cluster_per_token_layer,
            self.move_per_cell,
        ];
        if fields.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(crate::Error::InvalidConfig(
                "latency coefficients must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step accounting produced by the episode loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u32,
    /// Tokens the planner prompt would occupy in full.
    pub prompt_tokens_total: u64,
    /// Prompt tokens whose KV was computed this step (suffix plus newly
    /// cached rows in cached modes; the whole prompt when recomputing).
    pub tokens_recomputed: u64,
    /// Group tokens computed and saved into the cache this step.
    pub tokens_newly_cached: u64,
    pub kv_bytes_loaded: u64,
    pub hits: u32,
    pub misses: u32,
    pub decode_tokens: u32,
    pub embed_calls: u32,
    /// Probe tokens times layers run by attention clustering.
    pub cluster_token_layers: u64,
    pub distance_moved: f64,
    pub mode: Mode,
}

impl StepReport {
    pub fn zeroed(step: u32, mode: Mode) -> Self {
        StepReport {
            step,
            prompt_tokens_total: 0,
            tokens_recomputed: 0,
            tokens_newly_cached: 0,
            kv_bytes_loaded: 0,
            hits: 0,
            misses: 0,
            decode_tokens: 0,
            embed_calls: 0,
            cluster_token_layers: 0,
            distance_moved: 0.0,
            mode,
        }
    }

    pub fn check(&self) {
        assert!(
            self.tokens_recomputed <= self.prompt_tokens_total,
            "recomputed tokens are part of the prompt"
        );
        assert!(self.distance_moved >= 0.0);
    }
}

/// Modeled planning latency of one step.
pub fn step_latency(report: &StepReport, params: &LatencyParams) -> f64 {
    let transfer_repeats = match report.mode {
        Mode::OffloadPerDecode => f64::from(report.decode_tokens.max(1)),
        _ => 1.0,
    };
    params.prefill_per_token * report.tokens_recomputed as f64
        + params.decode_per_token * f64::from(report.decode_tokens)
        + params.transfer_per_mb * (report.kv_bytes_loaded as f64 / (1 << 20) as f64)
            * transfer_repeats
        + params.embed_per_group * f64::from(report.embed_calls)
        + params.cluster_per_token_layer * report.cluster_token_layers as f64
}

/// Modeled whole-task latency: planning plus motion.
pub fn episode_latency(reports: &[StepReport], params: &LatencyParams) -> f64 {
    let planning: f64 = reports.iter().map(|r| step_latency(r, params)).sum();
    let moved: f64 = reports.iter().map(|r| r.distance_moved).sum();
    planning + params.move_per_cell * moved
}

/// One CSV row per step: every counter, the modeled RtL, and the
/// separately recorded wall-clock seconds.
pub fn write_step_csv<W: std::io::Write>(
    w: W,
    reports: &[StepReport],
    wall_seconds: &[f64],
    params: &LatencyParams,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "step",
        "mode",
        "prompt_tokens_total",
        "tokens_recomputed",
        "tokens_newly_cached",
        "kv_bytes_loaded",
        "hits",
        "misses",
        "decode_tokens",
        "embed_calls",
        "cluster_token_layers",
        "distance_moved",
        "rtl_modeled_s",
        "rtl_wall_s",
    ])?;
    for (i, r) in reports.iter().enumerate() {
        out.write_record([
            r.step.to_string(),
            r.mode.to_string(),
            r.prompt_tokens_total.to_string(),
            r.tokens_recomputed.to_string(),
            r.tokens_newly_cached.to_string(),
            r.kv_bytes_loaded.to_string(),
            r.hits.to_string(),
            r.misses.to_string(),
            r.decode_tokens.to_string(),
            r.embed_calls.to_string(),
            r.cluster_token_layers.to_string(),
            format!("{}", r.distance_moved),
            format!("{}", step_latency(r, params)),
            format!("{}", wall_seconds.get(i).copied().unwrap_or(0.0)),
        ])?;
    }
    out.flush()?;
    Ok(())
}
