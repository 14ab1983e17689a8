//! navmem command line: scene generation, episode runs, budget sweeps,
//! ablations, and byte-exact replays.
//!
//! Exit codes: 0 success, 1 usage error, 2 infeasible configuration,
//! 3 internal invariant violation (including replay mismatches).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use navmem::costmodel::Mode;
use navmem::experiments::{self, RunConfig, SceneSource};
use navmem::model::ModelConfig;
use navmem::planner::PlannerBackend;
use navmem::simworld::{ClusterMethod, RetrievalMethod, SceneConfig};
use navmem::Error;

#[derive(Parser)]
#[command(name = "navmem", version, about = "Navigation-memory experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write N deterministic scene files and a manifest.
    GenScenes {
        #[arg(long, default_value = "navmem-out/scenes")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: u32,
        #[arg(long, default_value_t = 4)]
        rooms: usize,
        #[arg(long, default_value_t = 6)]
        objects_per_room: usize,
        /// Grid as WIDTHxHEIGHT.
        #[arg(long, default_value = "41x41")]
        grid: String,
        /// Labels guaranteed to appear (repeatable).
        #[arg(long = "goal")]
        goals: Vec<String>,
        /// Labels never placed (repeatable).
        #[arg(long = "exclude")]
        excludes: Vec<String>,
    },
    /// Run episodes and write logs plus a summary.
    Run(RunArgs),
    /// Run identical episodes across a list of device budgets.
    BenchBudget {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated budgets in bytes.
        #[arg(long)]
        budgets: String,
    },
    /// The four cumulative method configurations on identical seeds.
    Ablate(RunArgs),
    /// Re-run a logged config and compare artifacts byte for byte.
    Replay {
        /// Directory holding config.json and the original logs.
        dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    goal: Option<String>,
    #[arg(long)]
    episodes: Option<u32>,
    /// Episode seed base.
    #[arg(long)]
    seed: Option<u64>,
    /// Scene seed base (seeded scenes).
    #[arg(long)]
    scene_seed: Option<u64>,
    /// Scene files to cycle through instead of seeded generation.
    #[arg(long = "scene-file")]
    scene_files: Vec<PathBuf>,
    /// baseline-recompute | offload-per-decode | efficientnav
    #[arg(long)]
    mode: Option<String>,
    /// semantic-oracle | tiny-llm
    #[arg(long)]
    backend: Option<String>,
    /// attention | position
    #[arg(long)]
    cluster_method: Option<String>,
    /// knapsack | distance-baseline | all-groups
    #[arg(long)]
    retrieval: Option<String>,
    #[arg(long)]
    budget_bytes: Option<u64>,
    /// Relevance threshold for knapsack retrieval.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    step_cap: Option<u32>,
    #[arg(long)]
    rooms: Option<usize>,
    #[arg(long)]
    objects_per_room: Option<usize>,
    /// default | small
    #[arg(long)]
    model_scale: Option<String>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Remote embedding service URL (optional).
    #[arg(long)]
    embed_endpoint: Option<String>,
}

fn parse_enum<T: serde::de::DeserializeOwned>(what: &str, value: &str) -> Result<T, Error> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| Error::InvalidConfig(format!("unknown {what}: {value:?}")))
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str::<RunConfig>(&text)?
            }
            None => {
                let goal = self.goal.clone().unwrap_or_else(|| "lounge tv".into());
                RunConfig::themed(PathBuf::from("navmem-out/run"), &goal, 5)
            }
        };

        if let Some(v) = &self.out_dir {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = &self.goal {
            cfg.goal = v.clone();
            if let SceneSource::Seeded { config, .. } = &mut cfg.scene {
                if !config.guarantee_goals.contains(v) {
                    config.guarantee_goals = vec![v.clone()];
                }
            }
        }
        if let Some(v) = self.episodes {
            cfg.episodes = v;
        }
        if let Some(v) = self.seed {
            cfg.episode_seed_base = v;
        }
        if !self.scene_files.is_empty() {
            cfg.scene = SceneSource::Files {
                paths: self.scene_files.clone(),
            };
        } else if let Some(v) = self.scene_seed {
            match &mut cfg.scene {
                SceneSource::Seeded { seed_base, .. } => *seed_base = v,
                files @ SceneSource::Files { .. } => {
                    *files = SceneSource::Seeded {
                        seed_base: v,
                        config: SceneConfig::default(),
                    };
                }
            }
        }
        if let SceneSource::Seeded { config, .. } = &mut cfg.scene {
            if let Some(v) = self.rooms {
                config.rooms = v;
            }
            if let Some(v) = self.objects_per_room {
                config.objects_per_room = v;
            }
        }
        if let Some(v) = &self.mode {
            cfg.system.mode = parse_enum::<Mode>("mode", v)?;
        }
        if let Some(v) = &self.backend {
            cfg.system.backend = parse_enum::<PlannerBackend>("backend", v)?;
        }
        if let Some(v) = &self.cluster_method {
            cfg.system.cluster_method = parse_enum::<ClusterMethod>("cluster method", v)?;
        }
        if let Some(v) = &self.retrieval {
            cfg.system.retrieval_method = parse_enum::<RetrievalMethod>("retrieval method", v)?;
        }
        if let Some(v) = self.budget_bytes {
            cfg.system.budget_bytes = v;
        }
        if let Some(v) = self.threshold {
            cfg.system.retrieval.threshold = v;
        }
        if let Some(v) = self.step_cap {
            cfg.system.step_cap = v;
        }
        if let Some(v) = &self.model_scale {
            cfg.system.model = match v.as_str() {
                "default" => ModelConfig::default(),
                "small" => ModelConfig::small(),
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown model scale {other:?} (default|small)"
                    )))
                }
            };
        }
        if let Some(v) = self.jobs {
            cfg.jobs = v;
        }
        if let Some(v) = &self.embed_endpoint {
            cfg.embed_endpoint = Some(v.clone());
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::BadAnswer(_) => ExitCode::from(1),
                Error::InfeasibleConfig(_) | Error::BudgetInfeasible { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, Error> {
    match cli.cmd {
        Cmd::GenScenes {
            out_dir,
            seed,
            count,
            rooms,
            objects_per_room,
            grid,
            goals,
            excludes,
        } => {
            let (w, h) = grid
                .split_once('x')
                .and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?)))
                .ok_or_else(|| Error::InvalidConfig(format!("bad grid {grid:?}")))?;
            let cfg = SceneConfig {
                rooms,
                objects_per_room,
                grid_size: (w, h),
                guarantee_goals: goals,
                exclude_labels: excludes,
                ..SceneConfig::default()
            };
            let manifest = experiments::gen_scenes(&out_dir, seed, count, &cfg)?;
            println!("wrote {} scenes to {}", manifest.scenes.len(), out_dir.display());
            for s in &manifest.scenes {
                println!("  seed {:>6}  sha256 {}  {}", s.seed, &s.sha256[..16], s.path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Run(args) => {
            let cfg = args.resolve()?;
            let summary = experiments::run(&cfg)?;
            println!(
                "episodes {}  SR {:.3}  SPL {:.3}  mean RtL {:.4}s  mean E2EL {:.3}s  hit rate {}",
                summary.episodes,
                summary.sr,
                summary.spl,
                summary.mean_rtl,
                summary.mean_e2el,
                summary
                    .hit_rate
                    .map_or("n/a".into(), |h| format!("{h:.3}")),
            );
            println!("artifacts in {}", cfg.out_dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::BenchBudget { run, budgets } => {
            let cfg = run.resolve()?;
            let budgets: Vec<u64> = budgets
                .split(',')
                .map(|b| {
                    b.trim()
                        .parse::<u64>()
                        .map_err(|_| Error::InvalidConfig(format!("bad budget {b:?}")))
                })
                .collect::<Result<_, _>>()?;
            if budgets.is_empty() {
                return Err(Error::InvalidConfig("no budgets given".into()));
            }
            let rows = experiments::bench_budget(&cfg, &budgets)?;
            println!("budget_bytes,hit_rate,mean_rtl_s,sr,spl");
            for r in &rows {
                println!(
                    "{},{},{:.5},{:.3},{:.3}",
                    r.budget_bytes,
                    r.hit_rate.map_or("n/a".into(), |h| format!("{h:.4}")),
                    r.mean_rtl,
                    r.sr,
                    r.spl
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Ablate(args) => {
            let cfg = args.resolve()?;
            let rows = experiments::ablate(&cfg)?;
            println!("row,method,sr,spl,mean_rtl_s,mean_e2el_s");
            for r in &rows {
                println!(
                    "{},{},{:.3},{:.3},{:.4},{:.3}",
                    r.row, r.label, r.sr, r.spl, r.mean_rtl, r.mean_e2el
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Replay { dir, out_dir } => {
            let report = experiments::replay(&dir, &out_dir)?;
            for (path, same) in &report.compared {
                println!("{}  {}", if *same { "MATCH   " } else { "MISMATCH" }, path.display());
            }
            if report.matched {
                println!("replay reproduced {} files byte for byte", report.compared.len());
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("replay diverged");
                Ok(ExitCode::from(3))
            }
        }
    }
}
