//! Experiment front-end: reproducible multi-episode runs, budget sweeps,
//! mode comparisons, ablations, and byte-exact replay.
//!
//! Every output directory carries `config.json` with the fully resolved
//! configuration and build identifier; JSONL files start with a header
//! record naming the build and a config fingerprint (computed with the
//! output path blanked), so logs are self-describing and replays are
//! comparable byte for byte. Wall-clock timings appear only in
//! `steps.csv`, never in files a replay compares.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::costmodel::{self, Mode};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TinyModel};
use crate::retrieval::{EmbeddingProvider, ReferenceProvider, RemoteProvider};
use crate::simworld::{
    compute_spl, generate_scene, run_episode, EpisodeOutput, EpisodeResult, RetrievalMethod,
    Scene, SceneConfig, SystemConfig,
};

pub fn build_id() -> String {
    format!("navmem-{}", env!("CARGO_PKG_VERSION"))
}

/// Where episode scenes come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SceneSource {
    /// Episode `i` runs on `generate_scene(seed_base + i, config)`.
    Seeded { seed_base: u64, config: SceneConfig },
    /// Episode `i` runs on `paths[i % len]`.
    Files { paths: Vec<PathBuf> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneSource,
    pub goal: String,
    pub episodes: u32,
    /// Episode `i` picks its start cell with seed `episode_seed_base + i`.
    pub episode_seed_base: u64,
    pub system: SystemConfig,
    pub out_dir: PathBuf,
    /// Concurrent episodes; 0 means one per available core.
    #[serde(default)]
    pub jobs: usize,
    /// Remote embedding service; absent means the reference provider.
    #[serde(default)]
    pub embed_endpoint: Option<String>,
}

impl RunConfig {
    pub fn themed(out_dir: PathBuf, goal: &str, episodes: u32) -> RunConfig {
        RunConfig {
            scene: SceneSource::Seeded {
                seed_base: 1000,
                config: SceneConfig {
                    guarantee_goals: vec![goal.to_string()],
                    ..SceneConfig::default()
                },
            },
            goal: goal.to_string(),
            episodes,
            episode_seed_base: 1,
            system: SystemConfig::default(),
            out_dir,
            jobs: 0,
            embed_endpoint: None,
        }
    }

    /// Fingerprint of everything that determines behavior; the output
    /// directory does not.
    pub fn fingerprint(&self) -> String {
        let mut neutral = self.clone();
        neutral.out_dir = PathBuf::new();
        neutral.jobs = 0;
        let bytes = serde_json::to_vec(&neutral).expect("config serializes");
        hex_digest(&bytes)
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.episodes == 0 {
            return Err(Error::InvalidConfig("episodes must be >= 1".into()));
        }
        if self.goal.trim().is_empty() {
            return Err(Error::InvalidConfig("goal label is empty".into()));
        }
        if let SceneSource::Files { paths } = &self.scene {
            if paths.is_empty() {
                return Err(Error::InvalidConfig("scene file list is empty".into()));
            }
        }
        // A budget below a single small group can never select anything.
        if self.system.retrieval_method == RetrievalMethod::Knapsack {
            let min_group_tokens = 12u64;
            let floor = crate::model::KVBlock::serialized_size_for(
                self.system.model.num_layers,
                self.system.model.num_heads as u32,
                self.system.model.head_dim() as u32,
                min_group_tokens,
            );
            if self.system.budget_bytes < floor {
                return Err(Error::InfeasibleConfig(format!(
                    "budget {} B is below a single minimal group ({} B)",
                    self.system.budget_bytes, floor
                )));
            }
        }
        Ok(())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serialized KV bytes of the scene's full map with one group per room,
/// the reference point for expressing budgets as map fractions.
pub fn estimate_scene_kv_bytes(scene: &Scene, model: &ModelConfig) -> u64 {
    let tokenizer = crate::model::Tokenizer::new(model.vocab_size, model.seed);
    let mut total = 0u64;
    for (room_idx, _) in scene.rooms.iter().enumerate() {
        let mut text = format!("Object Group {}: ", room_idx + 1);
        let mut first = true;
        for o in scene.objects.iter().filter(|o| o.room == room_idx) {
            if !first {
                text.push_str(", ");
            }
            first = false;
            text.push_str(&format!(
                "{{object: {}, position:({},{},{})}}",
                o.label, o.position[0], o.position[1], o.position[2]
            ));
        }
        total += crate::model::KVBlock::serialized_size_for(
            model.num_layers,
            model.num_heads as u32,
            model.head_dim() as u32,
            tokenizer.count(&text) as u64,
        );
    }
    total
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub index: u32,
    pub scene_seed: Option<u64>,
    pub episode_seed: u64,
    pub success: bool,
    pub steps: u32,
    pub path_length: f64,
    pub shortest_path_length: f64,
    pub mean_rtl: f64,
    pub e2el: f64,
    pub hit_rate: Option<f64>,
    pub termination: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub episodes: u32,
    pub sr: f64,
    pub spl: f64,
    pub mean_rtl: f64,
    pub mean_e2el: f64,
    /// Cumulative device hit rate over all planning loads of the run.
    pub hit_rate: Option<f64>,
    pub rows: Vec<EpisodeRow>,
}

/// Run every episode of the config, write all artifacts, and return the
/// summary plus the in-memory results (reports included).
pub fn run_collect(cfg: &RunConfig) -> Result<(RunSummary, Vec<EpisodeResult>)> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_config(cfg)?;

    let provider: Box<dyn EmbeddingProvider> = match &cfg.embed_endpoint {
        Some(endpoint) => Box::new(RemoteProvider::new(endpoint.clone())),
        None => Box::new(ReferenceProvider::default()),
    };
    let model = TinyModel::new(cfg.system.model)?;

    let indices: Vec<u32> = (0..cfg.episodes).collect();
    let run_one = |&index: &u32| -> Result<(u32, Option<u64>, u64, EpisodeOutput)> {
        let (scene, scene_seed) = load_scene(cfg, index)?;
        let episode_seed = cfg.episode_seed_base + u64::from(index);
        let dir = cfg.out_dir.join(format!("episode_{index:03}"));
        std::fs::create_dir_all(&dir)?;
        let out = run_episode(
            &scene,
            &cfg.goal,
            &cfg.system,
            &model,
            provider.as_ref(),
            episode_seed,
            &dir.join("kv"),
        )?;
        write_episode_artifacts(cfg, &dir, &out)?;
        Ok((index, scene_seed, episode_seed, out))
    };

    let mut outputs: Vec<(u32, Option<u64>, u64, EpisodeOutput)> = if cfg.jobs == 1 {
        indices.iter().map(run_one).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| indices.par_iter().map(run_one).collect::<Result<_>>())?
    };
    outputs.sort_by_key(|(index, ..)| *index);

    let mut rows = Vec::with_capacity(outputs.len());
    let mut results = Vec::with_capacity(outputs.len());
    let (mut hits, mut misses) = (0u64, 0u64);
    for (index, scene_seed, episode_seed, out) in outputs {
        let r = &out.result;
        let mean_rtl = if r.reports.is_empty() {
            0.0
        } else {
            r.reports
                .iter()
                .map(|s| costmodel::step_latency(s, &cfg.system.latency))
                .sum::<f64>()
                / r.reports.len() as f64
        };
        rows.push(EpisodeRow {
            index,
            scene_seed,
            episode_seed,
            success: r.success,
            steps: r.steps,
            path_length: r.agent_path_length,
            shortest_path_length: r.shortest_path_length,
            mean_rtl,
            e2el: costmodel::episode_latency(&r.reports, &cfg.system.latency),
            hit_rate: out.logs.store_stats.cumulative_hit_rate(),
            termination: format!("{:?}", r.termination),
        });
        hits += out.logs.store_stats.cumulative_hits;
        misses += out.logs.store_stats.cumulative_misses;
        results.push(out.result);
    }

    let (sr, spl) = compute_spl(&results);
    let summary = RunSummary {
        episodes: cfg.episodes,
        sr,
        spl,
        mean_rtl: mean_of(rows.iter().map(|r| r.mean_rtl)),
        mean_e2el: mean_of(rows.iter().map(|r| r.e2el)),
        hit_rate: (hits + misses > 0).then(|| hits as f64 / (hits + misses) as f64),
        rows,
    };
    write_run_tables(cfg, &summary)?;
    Ok((summary, results))
}

pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    run_collect(cfg).map(|(summary, _)| summary)
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn load_scene(cfg: &RunConfig, index: u32) -> Result<(Scene, Option<u64>)> {
    match &cfg.scene {
        SceneSource::Seeded { seed_base, config } => {
            let seed = seed_base + u64::from(index);
            Ok((generate_scene(seed, config)?, Some(seed)))
        }
        SceneSource::Files { paths } => {
            let path = &paths[index as usize % paths.len()];
            Ok((Scene::from_file(path)?, None))
        }
    }
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Resolved<'a> {
        build: String,
        config_sha256: String,
        config: &'a RunConfig,
    }
    let doc = Resolved {
        build: build_id(),
        config_sha256: cfg.fingerprint(),
        config: cfg,
    };
    std::fs::write(
        cfg.out_dir.join("config.json"),
        serde_json::to_string_pretty(&doc)?,
    )?;
    Ok(())
}

#[derive(Serialize)]
struct JsonlHeader<'a> {
    build: &'a str,
    config_sha256: &'a str,
}

fn write_jsonl<T: Serialize>(path: &Path, fingerprint: &str, items: &[T]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(
        &mut f,
        &JsonlHeader {
            build: &build_id(),
            config_sha256: fingerprint,
        },
    )?;
    f.write_all(b"\n")?;
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn write_episode_artifacts(cfg: &RunConfig, dir: &Path, out: &EpisodeOutput) -> Result<()> {
    let fp = cfg.fingerprint();
    write_jsonl(&dir.join("steps.jsonl"), &fp, &out.result.reports)?;
    write_jsonl(&dir.join("decisions.jsonl"), &fp, &out.logs.decisions)?;
    write_jsonl(&dir.join("clusters.jsonl"), &fp, &out.logs.cluster)?;
    std::fs::write(
        dir.join("map.json"),
        serde_json::to_string_pretty(&out.logs.map)?,
    )?;

    let mut store_csv = Vec::new();
    out.logs.store_stats.write_csv(&mut store_csv)?;
    write_with_header(&dir.join("store.csv"), &fp, &store_csv)?;

    let mut steps_csv = Vec::new();
    costmodel::write_step_csv(
        &mut steps_csv,
        &out.result.reports,
        &out.logs.wall_seconds,
        &cfg.system.latency,
    )?;
    write_with_header(&dir.join("steps.csv"), &fp, &steps_csv)?;
    Ok(())
}

/// CSV files open with a `#` comment carrying the build id and config
/// fingerprint; consumers skip comment lines.
fn write_with_header(path: &Path, fingerprint: &str, body: &[u8]) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "# build={} config_sha256={}", build_id(), fingerprint)?;
    f.write_all(body)?;
    f.flush()?;
    Ok(())
}

fn write_run_tables(cfg: &RunConfig, summary: &RunSummary) -> Result<()> {
    let fp = cfg.fingerprint();
    let mut body = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut body);
        w.write_record([
            "episode",
            "scene_seed",
            "episode_seed",
            "success",
            "steps",
            "path_length",
            "shortest_path_length",
            "mean_rtl_s",
            "e2el_s",
            "hit_rate",
            "termination",
        ])?;
        for r in &summary.rows {
            w.write_record([
                r.index.to_string(),
                r.scene_seed.map_or(String::new(), |s| s.to_string()),
                r.episode_seed.to_string(),
                r.success.to_string(),
                r.steps.to_string(),
                format!("{}", r.path_length),
                format!("{}", r.shortest_path_length),
                format!("{}", r.mean_rtl),
                format!("{}", r.e2el),
                r.hit_rate.map_or(String::new(), |h| format!("{h}")),
                r.termination.clone(),
            ])?;
        }
        w.flush()?;
    }
    write_with_header(&cfg.out_dir.join("episodes.csv"), &fp, &body)?;

    let mut body = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut body);
        w.write_record(["episodes", "sr", "spl", "mean_rtl_s", "mean_e2el_s", "hit_rate"])?;
        w.write_record([
            summary.episodes.to_string(),
            format!("{}", summary.sr),
            format!("{}", summary.spl),
            format!("{}", summary.mean_rtl),
            format!("{}", summary.mean_e2el),
            summary.hit_rate.map_or(String::new(), |h| format!("{h}")),
        ])?;
        w.flush()?;
    }
    write_with_header(&cfg.out_dir.join("summary.csv"), &fp, &body)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifestEntry {
    pub seed: u64,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneManifest {
    pub build: String,
    pub scenes: Vec<SceneManifestEntry>,
}

/// Write `count` scene files plus a manifest with their seeds and
/// content hashes.
pub fn gen_scenes(
    out_dir: &Path,
    seed_base: u64,
    count: u32,
    cfg: &SceneConfig,
) -> Result<SceneManifest> {
    std::fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    for i in 0..count {
        let seed = seed_base + u64::from(i);
        let scene = generate_scene(seed, cfg)?;
        let path = out_dir.join(format!("scene_{seed}.json"));
        scene.to_file(&path)?;
        entries.push(SceneManifestEntry {
            seed,
            sha256: hex_digest(&std::fs::read(&path)?),
            path,
        });
    }
    let manifest = SceneManifest {
        build: build_id(),
        scenes: entries,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// The bundled map-growth benchmark: a fixed sixteen-room survey route
/// drives the map up step by step while the whole planning pipeline runs
/// (a goal label outside every vocabulary keeps the shortcut off, and a
/// selection threshold below the orthogonal baseline leaves the byte
/// budget as the only prompt limiter). The default latency calibration
/// refers to these traces.
pub fn growth_survey(
    mode: Mode,
    kv_root: &Path,
) -> Result<Vec<crate::simworld::EpisodeOutput>> {
    let scene_cfg = SceneConfig {
        rooms: 16,
        objects_per_room: 4,
        grid_size: (101, 101),
        ..SceneConfig::default()
    };
    let mut system = SystemConfig {
        model: ModelConfig::small(),
        mode,
        step_cap: 40,
        budget_bytes: 160 << 10,
        ..SystemConfig::default()
    };
    system.retrieval.threshold = 0.45;
    system.retrieval_method = match mode {
        Mode::BaselineRecompute => RetrievalMethod::AllGroups,
        _ => RetrievalMethod::Knapsack,
    };

    let provider = ReferenceProvider::default();
    let model = TinyModel::new(system.model)?;
    let mut outputs = Vec::new();
    for seed in 0..5u64 {
        let scene = generate_scene(7000 + seed, &scene_cfg)?;
        // Three waypoints per room, room order: steady discovery pacing.
        let mut route = Vec::new();
        for room in &scene.rooms {
            let [x, y, w, h] = room.rect;
            let (cx, cy) = (x + w / 2, y + h / 2);
            for (dx, dy) in [(0, 0), (w / 4, h / 4), (-(w / 4), -(h / 4))] {
                route.push((cx + dx, cy + dy));
            }
        }
        let out = crate::simworld::run_surveyed_episode(
            &scene,
            "telescope",
            &system,
            &model,
            &provider,
            seed,
            &kv_root.join(format!("survey_{mode}_{seed}")),
            &route,
        )?;
        outputs.push(out);
    }
    Ok(outputs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget_bytes: u64,
    pub hit_rate: Option<f64>,
    pub mean_rtl: f64,
    pub sr: f64,
    pub spl: f64,
}

/// Run the same episodes under each budget; one row per budget.
pub fn bench_budget(cfg: &RunConfig, budgets: &[u64]) -> Result<Vec<BudgetRow>> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut rows = Vec::new();
    for &budget in budgets {
        let mut sub = cfg.clone();
        sub.system.budget_bytes = budget;
        sub.out_dir = cfg.out_dir.join(format!("budget_{budget}"));
        let summary = run(&sub)?;
        rows.push(BudgetRow {
            budget_bytes: budget,
            hit_rate: summary.hit_rate,
            mean_rtl: summary.mean_rtl,
            sr: summary.sr,
            spl: summary.spl,
        });
    }

    let mut body = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut body);
        w.write_record(["budget_bytes", "hit_rate", "mean_rtl_s", "sr", "spl"])?;
        for r in &rows {
            w.write_record([
                r.budget_bytes.to_string(),
                r.hit_rate.map_or(String::new(), |h| format!("{h}")),
                format!("{}", r.mean_rtl),
                format!("{}", r.sr),
                format!("{}", r.spl),
            ])?;
        }
        w.flush()?;
    }
    write_with_header(&cfg.out_dir.join("budget_sweep.csv"), &cfg.fingerprint(), &body)?;
    Ok(rows)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: u32,
    pub label: String,
    pub sr: f64,
    pub spl: f64,
    pub mean_rtl: f64,
    pub mean_e2el: f64,
}

/// The four cumulative configurations, identical seeds throughout:
/// position clustering + distance selection + full recompute, then
/// discrete caching, then attention clustering, then knapsack retrieval.
pub fn ablate(cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    use crate::simworld::ClusterMethod;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let variants: [(&str, ClusterMethod, RetrievalMethod, Mode); 4] = [
        (
            "position-clustering+distance-selection+recompute",
            ClusterMethod::Position,
            RetrievalMethod::DistanceBaseline,
            Mode::BaselineRecompute,
        ),
        (
            "+discrete-memory-caching",
            ClusterMethod::Position,
            RetrievalMethod::DistanceBaseline,
            Mode::EfficientNav,
        ),
        (
            "+attention-memory-clustering",
            ClusterMethod::Attention,
            RetrievalMethod::DistanceBaseline,
            Mode::EfficientNav,
        ),
        (
            "+semantics-aware-retrieval",
            ClusterMethod::Attention,
            RetrievalMethod::Knapsack,
            Mode::EfficientNav,
        ),
    ];

    let mut rows = Vec::new();
    for (i, (label, cluster, retrieval_method, mode)) in variants.into_iter().enumerate() {
        let mut sub = cfg.clone();
        sub.system.cluster_method = cluster;
        sub.system.retrieval_method = retrieval_method;
        sub.system.mode = mode;
        sub.out_dir = cfg.out_dir.join(format!("row_{}", i + 1));
        let summary = run(&sub)?;
        rows.push(AblationRow {
            row: i as u32 + 1,
            label: label.to_string(),
            sr: summary.sr,
            spl: summary.spl,
            mean_rtl: summary.mean_rtl,
            mean_e2el: summary.mean_e2el,
        });
    }

    let mut body = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut body);
        w.write_record(["row", "method", "sr", "spl", "mean_rtl_s", "mean_e2el_s"])?;
        for r in &rows {
            w.write_record([
                r.row.to_string(),
                r.label.clone(),
                format!("{}", r.sr),
                format!("{}", r.spl),
                format!("{}", r.mean_rtl),
                format!("{}", r.mean_e2el),
            ])?;
        }
        w.flush()?;
    }
    write_with_header(&cfg.out_dir.join("ablation.csv"), &cfg.fingerprint(), &body)?;
    Ok(rows)
}

/// Files a replay must reproduce byte for byte. `steps.csv` is excluded
/// (wall-clock column); `config.json` is excluded (it names out_dir).
const REPLAY_COMPARED: [&str; 6] = [
    "steps.jsonl",
    "decisions.jsonl",
    "clusters.jsonl",
    "map.json",
    "store.csv",
    "episodes.csv",
];

#[derive(Debug, Clone, Serialize)]
pub struct ReplayReport {
    pub compared: Vec<(PathBuf, bool)>,
    pub matched: bool,
}

/// Re-run the config logged in `original_dir` into `fresh_dir` and
/// compare every deterministic artifact.
pub fn replay(original_dir: &Path, fresh_dir: &Path) -> Result<ReplayReport> {
    #[derive(Deserialize)]
    struct Resolved {
        config: RunConfig,
    }
    let doc: Resolved =
        serde_json::from_str(&std::fs::read_to_string(original_dir.join("config.json"))?)?;
    let mut cfg = doc.config;
    cfg.out_dir = fresh_dir.to_path_buf();
    run(&cfg)?;

    let mut compared = Vec::new();
    let mut matched = true;
    for index in 0..cfg.episodes {
        let sub = format!("episode_{index:03}");
        for name in REPLAY_COMPARED.iter().take(5) {
            let a = original_dir.join(&sub).join(name);
            let b = fresh_dir.join(&sub).join(name);
            let same = files_equal(&a, &b)?;
            matched &= same;
            compared.push((PathBuf::from(format!("{sub}/{name}")), same));
        }
    }
    for name in ["episodes.csv", "summary.csv"] {
        let same = files_equal(&original_dir.join(name), &fresh_dir.join(name))?;
        matched &= same;
        compared.push((PathBuf::from(name), same));
    }
    Ok(ReplayReport { compared, matched })
}

fn files_equal(a: &Path, b: &Path) -> Result<bool> {
    Ok(std::fs::read(a)? == std::fs::read(b)?)
}
