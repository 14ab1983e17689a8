//! Deterministic synthetic indoor scenes on an occupancy grid, a
//! geometric detection stand-in, shortest-path motion, and episode
//! metrics. Rooms tile the grid with one-cell walls and two-cell doors
//! between neighbors, so every free cell stays reachable.

mod episode;

pub use episode::{
    run_episode, run_surveyed_episode, ClusterMethod, EpisodeLogs, EpisodeOutput, EpisodeResult,
    RetrievalMethod, SystemConfig, Termination,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::themes::ThemeTable;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub rooms: usize,
    pub objects_per_room: usize,
    pub grid_size: (i32, i32),
    /// Theme names cycled across rooms; defaults to the builtin table.
    pub themes: Vec<String>,
    /// Labels that must appear at least once (goal categories).
    pub guarantee_goals: Vec<String>,
    /// Labels never placed, for goal-absent traces.
    pub exclude_labels: Vec<String>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            rooms: 4,
            objects_per_room: 6,
            grid_size: (33, 33),
            themes: ThemeTable::builtin()
                .themes
                .iter()
                .map(|t| t.name.clone())
                .collect(),
            guarantee_goals: Vec::new(),
            exclude_labels: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Room {
    /// x, y, width, height of the interior.
    pub rect: [i32; 4],
    pub theme: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneObject {
    pub label: String,
    pub position: [i32; 3],
    #[serde(skip)]
    pub room: usize,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub seed: u64,
    pub width: i32,
    pub height: i32,
    walls: Vec<bool>,
    pub rooms: Vec<Room>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    pub fn in_bounds(&self, x: i32, y: i32) -> bool {
        x >= 0 && y >= 0 && x < self.width && y < self.height
    }

    pub fn is_wall(&self, x: i32, y: i32) -> bool {
        !self.in_bounds(x, y) || self.walls[(y * self.width + x) as usize]
    }

    pub fn is_free(&self, x: i32, y: i32) -> bool {
        self.in_bounds(x, y) && !self.is_wall(x, y)
    }

    pub fn cell_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn cell_index(&self, x: i32, y: i32) -> usize {
        (y * self.width + x) as usize
    }

    pub fn diagonal(&self) -> f64 {
        f64::from(self.width * self.width + self.height * self.height).sqrt()
    }

    pub fn free_cells(&self) -> Vec<(i32, i32)> {
        let mut cells = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.is_free(x, y) {
                    cells.push((x, y));
                }
            }
        }
        cells
    }

    /// Episode start candidates: free cells at least two cells from any
    /// wall, keeping starts out of doorways. Falls back to all free
    /// cells on degenerate grids.
    pub fn start_pool(&self) -> Vec<(i32, i32)> {
        let mut cells = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                let interior = (-2..=2i32).all(|dy| {
                    (-2..=2i32).all(|dx| self.is_free(x + dx, y + dy))
                });
                if interior {
                    cells.push((x, y));
                }
            }
        }
        if cells.is_empty() {
            self.free_cells()
        } else {
            cells
        }
    }

    pub fn objects_with_label(&self, label: &str) -> Vec<&SceneObject> {
        self.objects
            .iter()
            .filter(|o| o.label.eq_ignore_ascii_case(label))
            .collect()
    }

    pub fn from_file(path: &std::path::Path) -> Result<Scene> {
        let file: SceneFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(file.into_scene())
    }

    pub fn to_file(&self, path: &std::path::Path) -> Result<()> {
        let file = SceneFile::from_scene(self);
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }
}

/// On-disk scene document.
#[derive(Debug, Serialize, Deserialize)]
struct SceneFile {
    seed: u64,
    grid: GridFile,
    rooms: Vec<Room>,
    objects: Vec<SceneObject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridFile {
    width: i32,
    height: i32,
    walls: Vec<[i32; 2]>,
}

impl SceneFile {
    fn from_scene(scene: &Scene) -> SceneFile {
        let mut walls = Vec::new();
        for y in 0..scene.height {
            for x in 0..scene.width {
                if scene.walls[scene.cell_index(x, y)] {
                    walls.push([x, y]);
                }
            }
        }
        SceneFile {
            seed: scene.seed,
            grid: GridFile {
                width: scene.width,
                height: scene.height,
                walls,
            },
            rooms: scene.rooms.clone(),
            objects: scene.objects.clone(),
        }
    }

    fn into_scene(self) -> Scene {
        let mut walls = vec![false; (self.grid.width * self.grid.height) as usize];
        for [x, y] in &self.grid.walls {
            walls[(y * self.grid.width + x) as usize] = true;
        }
        let mut scene = Scene {
            seed: self.seed,
            width: self.grid.width,
            height: self.grid.height,
            walls,
            rooms: self.rooms,
            objects: self.objects,
        };
        // Recover room membership dropped by serialization.
        for i in 0..scene.objects.len() {
            let p = scene.objects[i].position;
            scene.objects[i].room = scene
                .rooms
                .iter()
                .position(|r| {
                    p[0] >= r.rect[0]
                        && p[0] < r.rect[0] + r.rect[2]
                        && p[1] >= r.rect[1]
                        && p[1] < r.rect[1] + r.rect[3]
                })
                .unwrap_or(0);
        }
        scene
    }
}

/// Same-label instances must sit farther apart than the map's dedup
/// radius or they would collapse into one object.
const SAME_LABEL_SEPARATION: f64 = 3.0;

pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    let (width, height) = cfg.grid_size;
    if cfg.rooms == 0 || width < 9 || height < 9 {
        return Err(Error::InvalidConfig(format!(
            "scene needs >= 1 room on a grid of at least 9x9, got {} rooms {}x{}",
            cfg.rooms, width, height
        )));
    }
    if cfg.themes.is_empty() {
        return Err(Error::InvalidConfig("scene needs at least one theme".into()));
    }
    let table = ThemeTable::builtin();
    for name in &cfg.themes {
        if table.theme(name).is_none() {
            return Err(Error::InvalidConfig(format!("unknown theme {name:?}")));
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let grid_rows = (cfg.rooms as f64).sqrt().floor().max(1.0) as usize;
    let grid_cols = cfg.rooms.div_ceil(grid_rows);

    // Border walls plus internal wall lines between room rows/columns.
    let col_spans = split_spans(width, grid_cols)?;
    let row_spans = split_spans(height, grid_rows)?;

    let mut walls = vec![true; (width * height) as usize];
    let mut rooms = Vec::new();
    for (r, &(y0, y1)) in row_spans.iter().enumerate() {
        for (c, &(x0, x1)) in col_spans.iter().enumerate() {
            if rooms.len() >= cfg.rooms {
                break;
            }
            for y in y0..=y1 {
                for x in x0..=x1 {
                    walls[(y * width + x) as usize] = false;
                }
            }
            let theme = cfg.themes[rooms.len() % cfg.themes.len()].clone();
            rooms.push(Room {
                rect: [x0, y0, x1 - x0 + 1, y1 - y0 + 1],
                theme,
            });
            // Four-cell door to the room on the left.
            if c > 0 {
                let wall_x = x0 - 1;
                let mid = (y0 + y1) / 2;
                for y in (mid - 1).max(y0)..=(mid + 2).min(y1) {
                    walls[(y * width + wall_x) as usize] = false;
                }
            }
            // Four-cell door to the room above.
            if r > 0 {
                let wall_y = y0 - 1;
                let mid = (x0 + x1) / 2;
                for x in (mid - 1).max(x0)..=(mid + 2).min(x1) {
                    walls[(wall_y * width + x) as usize] = false;
                }
            }
        }
    }

    let mut scene = Scene {
        seed,
        width,
        height,
        walls,
        rooms,
        objects: Vec::new(),
    };

    for room_idx in 0..scene.rooms.len() {
        let theme = table
            .theme(&scene.rooms[room_idx].theme)
            .expect("validated above");
        let mut labels: Vec<&String> = theme
            .labels
            .iter()
            .filter(|l| !cfg.exclude_labels.iter().any(|e| e.eq_ignore_ascii_case(l)))
            .collect();
        labels.shuffle(&mut rng);
        for i in 0..cfg.objects_per_room {
            let label = labels[i % labels.len()].clone();
            place_object(&mut scene, &mut rng, room_idx, &label);
        }
    }

    // Guarantee at least one instance of each requested goal category.
    for goal in &cfg.guarantee_goals {
        if cfg.exclude_labels.iter().any(|e| e.eq_ignore_ascii_case(goal)) {
            continue;
        }
        if scene.objects_with_label(goal).is_empty() {
            let theme_name = table.theme_of_label(goal).map(|t| t.name.clone());
            let room_idx = scene
                .rooms
                .iter()
                .position(|r| Some(&r.theme) == theme_name.as_ref())
                .unwrap_or(0);
            place_object(&mut scene, &mut rng, room_idx, goal);
        }
    }

    Ok(scene)
}

fn place_object(scene: &mut Scene, rng: &mut ChaCha20Rng, room_idx: usize, label: &str) {
    let rect = scene.rooms[room_idx].rect;
    for _ in 0..200 {
        let x = rng.gen_range(rect[0]..rect[0] + rect[2]);
        let y = rng.gen_range(rect[1]..rect[1] + rect[3]);
        let z = rng.gen_range(5..40);
        if !scene.is_free(x, y) {
            continue;
        }
        if scene.objects.iter().any(|o| o.position[0] == x && o.position[1] == y) {
            continue;
        }
        let too_close = scene.objects.iter().any(|o| {
            o.label.eq_ignore_ascii_case(label) && {
                let dx = f64::from(o.position[0] - x);
                let dy = f64::from(o.position[1] - y);
                (dx * dx + dy * dy).sqrt() < SAME_LABEL_SEPARATION
            }
        });
        if too_close {
            continue;
        }
        scene.objects.push(SceneObject {
            label: label.to_string(),
            position: [x, y, z],
            room: room_idx,
        });
        return;
    }
    // A saturated room simply holds one object fewer.
}

/// Split `total` cells into `parts` interior spans separated by one-cell
/// walls (borders included). Returns inclusive (start, end) pairs.
fn split_spans(total: i32, parts: usize) -> Result<Vec<(i32, i32)>> {
    let interior = total - 2 - (parts as i32 - 1);
    if interior < parts as i32 * 3 {
        return Err(Error::InvalidConfig(format!(
            "grid span {total} too small for {parts} rooms"
        )));
    }
    let base = interior / parts as i32;
    let mut extra = interior % parts as i32;
    let mut spans = Vec::with_capacity(parts);
    let mut x = 1;
    for _ in 0..parts {
        let mut w = base;
        if extra > 0 {
            w += 1;
            extra -= 1;
        }
        spans.push((x, x + w - 1));
        x += w + 1;
    }
    Ok(spans)
}

/// Objects within Euclidean `range` of `position` (grid plane) with an
/// unobstructed line of sight, in placement order.
pub fn detect(scene: &Scene, position: (i32, i32), range: f64) -> Vec<(String, [i32; 3])> {
    let mut out = Vec::new();
    for o in &scene.objects {
        let dx = f64::from(o.position[0] - position.0);
        let dy = f64::from(o.position[1] - position.1);
        if (dx * dx + dy * dy).sqrt() > range {
            continue;
        }
        if line_of_sight(scene, position, (o.position[0], o.position[1])) {
            out.push((o.label.clone(), o.position));
        }
    }
    out
}

/// Integer ray march; blocked when any strictly intermediate cell is a
/// wall.
pub fn line_of_sight(scene: &Scene, from: (i32, i32), to: (i32, i32)) -> bool {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = (to.1 - y).abs();
    let sx = if to.0 > x { 1 } else { -1 };
    let sy = if to.1 > y { 1 } else { -1 };
    let mut err = dx - dy;
    loop {
        if (x, y) == to {
            return true;
        }
        if (x, y) != from && scene.is_wall(x, y) {
            return false;
        }
        let e2 = 2 * err;
        if e2 > -dy {
            err -= dy;
            x += sx;
        }
        if e2 < dx {
            err += dx;
            y += sy;
        }
    }
}

/// Breadth-first distances (in moves) over free cells, 4-connected.
pub fn bfs_distances(scene: &Scene, from: (i32, i32)) -> Vec<u32> {
    let mut dist = vec![u32::MAX; scene.cell_count()];
    if !scene.is_free(from.0, from.1) {
        return dist;
    }
    let mut queue = std::collections::VecDeque::new();
    dist[scene.cell_index(from.0, from.1)] = 0;
    queue.push_back(from);
    while let Some((x, y)) = queue.pop_front() {
        let d = dist[scene.cell_index(x, y)];
        for (nx, ny) in [(x, y - 1), (x, y + 1), (x - 1, y), (x + 1, y)] {
            if scene.is_free(nx, ny) && dist[scene.cell_index(nx, ny)] == u32::MAX {
                dist[scene.cell_index(nx, ny)] = d + 1;
                queue.push_back((nx, ny));
            }
        }
    }
    dist
}

/// The agent's pose and odometer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentState {
    pub position: (i32, i32),
    pub path_length: f64,
    pub step_index: u32,
}

impl AgentState {
    pub fn at(position: (i32, i32)) -> Self {
        AgentState {
            position,
            path_length: 0.0,
            step_index: 0,
        }
    }
}

/// Walk the shortest 4-connected path to `target`; the agent ends on the
/// target cell and its odometer grows by the path length in cells.
pub fn move_to(scene: &Scene, agent: &mut AgentState, target: (i32, i32)) -> Result<f64> {
    if agent.position == target {
        return Ok(0.0);
    }
    let dist = bfs_distances(scene, agent.position);
    if !scene.is_free(target.0, target.1) {
        return Err(Error::Unreachable(target.0, target.1));
    }
    let d = dist[scene.cell_index(target.0, target.1)];
    if d == u32::MAX {
        return Err(Error::Unreachable(target.0, target.1));
    }
    agent.position = target;
    agent.path_length += f64::from(d);
    Ok(f64::from(d))
}

/// Success rate and success-weighted-by-path-length over a batch.
pub fn compute_spl(results: &[EpisodeResult]) -> (f64, f64) {
    if results.is_empty() {
        return (0.0, 0.0);
    }
    let mut sr = 0.0f64;
    let mut spl = 0.0f64;
    for r in results {
        if r.success {
            sr += 1.0;
            let p = r.shortest_path_length;
            let l = r.agent_path_length.max(p);
            spl += if p == 0.0 { 1.0 } else { p / l };
        }
    }
    let n = results.len() as f64;
    (sr / n, spl / n)
}
