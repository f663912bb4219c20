//! Procedural scenes with goal-directed walkers, a stand-in for annotated
//! drone footage when none is available.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::raster::GridGeometry;
use super::{Sample, Trajectory, TrajectorySet};
use crate::error::{Error, Result};
use crate::mapgrid::{SemanticClass, SemanticMap, DEFAULT_RESOLUTION};
use crate::seed;

/// Where the semantic layout comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum Layout {
    /// Procedurally generated from the scene seed.
    Random,
    /// Use this map as is; walkers still start and end on its entrances.
    Fixed(SemanticMap),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub layout: Layout,
    pub corridors: usize,
    pub roads: usize,
    pub buildings: usize,
    pub obstacles: usize,
    pub trees: usize,
    pub sitting_areas: usize,
    pub walkers: usize,
    /// Mean and standard deviation of walking speed (m/s).
    pub walker_speed: (f64, f64),
    /// Trajectory sample rate (Hz).
    pub sample_rate: f64,
    /// Chance that a walker detours to a sitting area and rests.
    pub sit_probability: f64,
    /// Rest duration at a sitting area (s).
    pub sit_duration: f64,
    /// Relative amplitude of the per-walker random cost field.
    pub cost_noise: f64,
    /// Attempts per walker before it is reported as unplaced.
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 128,
            width: 128,
            resolution: DEFAULT_RESOLUTION,
            layout: Layout::Random,
            corridors: 3,
            roads: 1,
            buildings: 3,
            obstacles: 6,
            trees: 8,
            sitting_areas: 3,
            walkers: 150,
            walker_speed: (1.3, 0.2),
            sample_rate: 2.5,
            sit_probability: 0.3,
            sit_duration: 4.0,
            cost_noise: 0.5,
            max_retries: 10,
            seed: 0,
        }
    }
}

impl SceneConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if let Layout::Fixed(map) = &self.layout {
            if !map.cells().iter().any(|&c| {
                SemanticClass::from_index(c)
                    .and_then(step_cost)
                    .is_some()
            }) {
                return bad("fixed layout has no walkable cell".into());
            }
        } else {
            if self.height < 16 || self.width < 16 {
                return bad(format!(
                    "scene must be at least 16x16, got {}x{}",
                    self.height, self.width
                ));
            }
            if self.corridors == 0 {
                return bad("a random layout needs at least one corridor".into());
            }
        }
        if !(self.resolution > 0.0) {
            return bad(format!("resolution must be positive, got {}", self.resolution));
        }
        let (mean, std) = self.walker_speed;
        if !(mean > 0.0) || !(std >= 0.0) {
            return bad(format!("invalid walker speed ({mean}, {std})"));
        }
        if !(self.sample_rate > 0.0) {
            return bad(format!("sample rate must be positive, got {}", self.sample_rate));
        }
        if !(0.0..=1.0).contains(&self.sit_probability) || !(self.sit_duration >= 0.0) {
            return bad("invalid sitting parameters".into());
        }
        if !(self.cost_noise >= 0.0) || self.max_retries == 0 {
            return bad("invalid cost noise or retry count".into());
        }
        Ok(())
    }
}

/// Cost of stepping onto a cell of the given class; `None` is impassable.
pub fn step_cost(class: SemanticClass) -> Option<f64> {
    use SemanticClass::*;
    match class {
        PedestrianArea | Entrance => Some(1.0),
        IntersectionZone | ShadedArea => Some(1.2),
        Stairs | SittingArea => Some(1.5),
        BicycleRoad => Some(3.0),
        Parking => Some(4.0),
        Grass => Some(5.0),
        TreeFoliage => Some(6.0),
        VehicleRoad => Some(10.0),
        Building | Obstacle => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub map: SemanticMap,
    pub trajectories: TrajectorySet,
    /// Walkers that found no route within the retry budget.
    pub unplaced: usize,
}

fn cell_cost(map: &SemanticMap, i: usize) -> Option<f64> {
    SemanticClass::from_index(map.cells()[i]).and_then(step_cost)
}

struct Painter<'a> {
    map: &'a mut SemanticMap,
}

impl Painter<'_> {
    fn rect(
        &mut self,
        r0: usize,
        c0: usize,
        h: usize,
        w: usize,
        mut f: impl FnMut(Option<SemanticClass>) -> Option<SemanticClass>,
    ) {
        let (mh, mw) = (self.map.height(), self.map.width());
        for r in r0..(r0 + h).min(mh) {
            for c in c0..(c0 + w).min(mw) {
                if let Some(k) = f(self.map.class_at(r, c)) {
                    self.map.set(r, c, k);
                }
            }
        }
    }

    fn all(&self, r0: usize, c0: usize, h: usize, w: usize, class: SemanticClass) -> bool {
        if r0 + h > self.map.height() || c0 + w > self.map.width() {
            return false;
        }
        (r0..r0 + h).all(|r| (c0..c0 + w).all(|c| self.map.class_at(r, c) == Some(class)))
    }
}

/// Straight band across the whole map; returns `(row0, col0, h, w)`.
fn band<R: Rng>(rng: &mut R, h: usize, w: usize, thickness: usize, horizontal: bool) -> (usize, usize, usize, usize) {
    if horizontal {
        let r = rng.random_range(h / 8..(7 * h / 8).saturating_sub(thickness).max(h / 8 + 1));
        (r, 0, thickness, w)
    } else {
        let c = rng.random_range(w / 8..(7 * w / 8).saturating_sub(thickness).max(w / 8 + 1));
        (0, c, h, thickness)
    }
}

fn random_layout<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Result<SemanticMap> {
    use SemanticClass::*;
    let (h, w) = (cfg.height, cfg.width);
    let mut map = SemanticMap::filled(h, w, Grass);
    let mut p = Painter { map: &mut map };

    for _ in 0..cfg.roads {
        let horizontal = rng.random_bool(0.5);
        let (r0, c0, bh, bw) = band(rng, h, w, 4, horizontal);
        p.rect(r0, c0, bh, bw, |_| Some(VehicleRoad));
        let (lr, lc, lh, lw) = if horizontal {
            (r0 + 4, 0, 2, w)
        } else {
            (0, c0 + 4, h, 2)
        };
        p.rect(lr, lc, lh, lw, |k| (k == Some(Grass)).then_some(BicycleRoad));
        // Parking lot beside the road.
        let (pr, pc) = if horizontal {
            (r0.saturating_sub(6), rng.random_range(0..w - 10))
        } else {
            (rng.random_range(0..h - 10), c0.saturating_sub(6))
        };
        let (ph, pw) = if horizontal { (6, 10) } else { (10, 6) };
        p.rect(pr, pc, ph, pw, |k| (k == Some(Grass)).then_some(Parking));
    }

    let mut corridors = Vec::with_capacity(cfg.corridors);
    for k in 0..cfg.corridors {
        let horizontal = if k < 2 { k == 0 } else { rng.random_bool(0.5) };
        let thickness = rng.random_range(2..=3);
        let b = band(rng, h, w, thickness, horizontal);
        p.rect(b.0, b.1, b.2, b.3, |k| match k {
            Some(VehicleRoad) | Some(BicycleRoad) | Some(IntersectionZone) => {
                Some(IntersectionZone)
            }
            _ => Some(PedestrianArea),
        });
        corridors.push((b, horizontal));
    }
    for &((r0, c0, bh, bw), horizontal) in &corridors {
        if horizontal {
            p.rect(r0, 0, bh, 1, |k| (k == Some(PedestrianArea)).then_some(Entrance));
            p.rect(r0, w - 1, bh, 1, |k| (k == Some(PedestrianArea)).then_some(Entrance));
        } else {
            p.rect(0, c0, 1, bw, |k| (k == Some(PedestrianArea)).then_some(Entrance));
            p.rect(h - 1, c0, 1, bw, |k| (k == Some(PedestrianArea)).then_some(Entrance));
        }
        // A short flight of stairs somewhere along the corridor.
        if horizontal {
            let c = rng.random_range(w / 4..3 * w / 4);
            p.rect(r0, c, bh, 2, |k| (k == Some(PedestrianArea)).then_some(Stairs));
        } else {
            let r = rng.random_range(h / 4..3 * h / 4);
            p.rect(r, c0, 2, bw, |k| (k == Some(PedestrianArea)).then_some(Stairs));
        }
    }

    for _ in 0..cfg.buildings {
        for _ in 0..30 {
            let bh = rng.random_range(6..=(h / 6).max(7));
            let bw = rng.random_range(6..=(w / 6).max(7));
            let r0 = rng.random_range(1..h - bh);
            let c0 = rng.random_range(1..w - bw);
            if p.all(r0 - 1, c0 - 1, bh + 2, bw + 2, Grass) {
                p.rect(r0, c0, bh, bw, |_| Some(Building));
                // Shade on the grass just south and east of the building.
                p.rect(r0 + bh, c0, 2, bw + 2, |k| (k == Some(Grass)).then_some(ShadedArea));
                p.rect(r0, c0 + bw, bh, 2, |k| (k == Some(Grass)).then_some(ShadedArea));
                break;
            }
        }
    }

    for _ in 0..cfg.trees {
        let rad = rng.random_range(1..=2i64);
        let (cr, cc) = (rng.random_range(0..h) as i64, rng.random_range(0..w) as i64);
        for r in (cr - rad).max(0)..=(cr + rad).min(h as i64 - 1) {
            for c in (cc - rad).max(0)..=(cc + rad).min(w as i64 - 1) {
                let (r, c) = (r as usize, c as usize);
                if (r as i64 - cr).pow(2) + (c as i64 - cc).pow(2) <= rad * rad
                    && p.map.class_at(r, c) == Some(Grass)
                {
                    p.map.set(r, c, TreeFoliage);
                }
            }
        }
    }

    // Sitting areas: 2x2 grass blocks touching a walkway.
    let touches_walkway = |m: &SemanticMap, r0: usize, c0: usize| {
        (r0.saturating_sub(1)..(r0 + 3).min(h)).any(|r| {
            (c0.saturating_sub(1)..(c0 + 3).min(w))
                .any(|c| m.class_at(r, c) == Some(PedestrianArea))
        })
    };
    for _ in 0..cfg.sitting_areas {
        for _ in 0..200 {
            let r0 = rng.random_range(0..h - 1);
            let c0 = rng.random_range(0..w - 1);
            if p.all(r0, c0, 2, 2, Grass) && touches_walkway(p.map, r0, c0) {
                p.rect(r0, c0, 2, 2, |_| Some(SittingArea));
                break;
            }
        }
    }

    for _ in 0..cfg.obstacles {
        for _ in 0..50 {
            let r = rng.random_range(1..h - 1);
            let c = rng.random_range(1..w - 1);
            if p.map.class_at(r, c) == Some(PedestrianArea) {
                p.map.set(r, c, Obstacle);
                break;
            }
        }
    }

    let resolution = cfg.resolution;
    let cells = map.cells().to_vec();
    SemanticMap::new(h, w, resolution, cells)
}

/// Cheapest 4-connected route from `from` to `to` (flat indices, both
/// inclusive), paying the entry cost of every cell after the first.
fn shortest_path(map: &SemanticMap, noise: &[f64], from: usize, to: usize) -> Option<Vec<usize>> {
    let (h, w) = (map.height(), map.width());
    let n = h * w;
    cell_cost(map, from)?;
    cell_cost(map, to)?;
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[from] = 0.0;
    // Nonnegative finite f64 bit patterns sort like their values.
    heap.push(Reverse((0f64.to_bits(), from)));
    while let Some(Reverse((bits, u))) = heap.pop() {
        let d = f64::from_bits(bits);
        if d > dist[u] {
            continue;
        }
        if u == to {
            break;
        }
        let (r, c) = (u / w, u % w);
        let mut nbrs = [usize::MAX; 4];
        if r > 0 {
            nbrs[0] = u - w;
        }
        if r + 1 < h {
            nbrs[1] = u + w;
        }
        if c > 0 {
            nbrs[2] = u - 1;
        }
        if c + 1 < w {
            nbrs[3] = u + 1;
        }
        for v in nbrs.into_iter().filter(|&v| v != usize::MAX) {
            let Some(cost) = cell_cost(map, v) else {
                continue;
            };
            let nd = d + cost * noise[v];
            if nd < dist[v] {
                dist[v] = nd;
                prev[v] = u;
                heap.push(Reverse((nd.to_bits(), v)));
            }
        }
    }
    if !dist[to].is_finite() {
        return None;
    }
    let mut path = vec![to];
    let mut u = to;
    while u != from {
        u = prev[u];
        path.push(u);
    }
    path.reverse();
    Some(path)
}

/// Samples a piecewise-linear timeline of `(t, x, y)` keyframes at `dt`.
fn sample_timeline(keys: &[(f64, f64, f64)], dt: f64) -> Vec<Sample> {
    let end = keys.last().map_or(0.0, |k| k.0);
    let mut out = Vec::new();
    let mut seg = 0;
    let mut k = 0u64;
    loop {
        let t = k as f64 * dt;
        if t > end {
            break;
        }
        while seg + 1 < keys.len() - 1 && keys[seg + 1].0 < t {
            seg += 1;
        }
        let (t0, x0, y0) = keys[seg];
        let (t1, x1, y1) = keys[(seg + 1).min(keys.len() - 1)];
        let a = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 0.0 };
        out.push(Sample {
            t,
            x: x0 + a * (x1 - x0),
            y: y0 + a * (y1 - y0),
        });
        k += 1;
    }
    out
}

fn place_walker<R: Rng>(
    cfg: &SceneConfig,
    map: &SemanticMap,
    geom: &GridGeometry,
    entrances: &[usize],
    seats: &[usize],
    rng: &mut R,
) -> Option<Vec<Sample>> {
    if entrances.len() < 2 {
        return None;
    }
    let w = map.width();
    let noise: Vec<f64> = (0..map.height() * w)
        .map(|_| 1.0 + cfg.cost_noise * rng.random::<f64>())
        .collect();
    let speed_dist = Normal::new(cfg.walker_speed.0, cfg.walker_speed.1).ok()?;
    for _ in 0..cfg.max_retries {
        let start = entrances[rng.random_range(0..entrances.len())];
        let mut goal = start;
        while goal == start {
            goal = entrances[rng.random_range(0..entrances.len())];
        }
        let seat = (!seats.is_empty() && rng.random_bool(cfg.sit_probability))
            .then(|| seats[rng.random_range(0..seats.len())]);
        let speed = speed_dist.sample(rng).clamp(0.4, 2.5);

        let legs = match seat {
            Some(s) => shortest_path(map, &noise, start, s).and_then(|a| {
                shortest_path(map, &noise, s, goal).map(|b| vec![a, b])
            }),
            None => shortest_path(map, &noise, start, goal).map(|p| vec![p]),
        };
        let Some(legs) = legs else {
            continue;
        };
        let step_time = cfg.resolution / speed;
        let mut keys: Vec<(f64, f64, f64)> = Vec::new();
        let mut t = 0.0;
        for (li, leg) in legs.iter().enumerate() {
            for (pi, &cell) in leg.iter().enumerate() {
                if li > 0 && pi == 0 {
                    continue;
                }
                if !keys.is_empty() {
                    t += step_time;
                }
                let (x, y) = geom.center(cell / w, cell % w);
                keys.push((t, x, y));
            }
            if li + 1 < legs.len() && cfg.sit_duration > 0.0 {
                let &(_, x, y) = keys.last().expect("leg has cells");
                t += cfg.sit_duration;
                keys.push((t, x, y));
            }
        }
        return Some(sample_timeline(&keys, 1.0 / cfg.sample_rate));
    }
    None
}

/// Builds a semantic map and walker trajectories, fully determined by the
/// config (including its seed).
pub fn generate_synthetic_scene(cfg: &SceneConfig) -> Result<SyntheticScene> {
    cfg.validate()?;
    let map = match &cfg.layout {
        Layout::Fixed(m) => m.clone(),
        Layout::Random => random_layout(cfg, &mut seed::stream(cfg.seed, "layout", 0))?,
    };
    let geom = GridGeometry {
        resolution: cfg.resolution,
        ..GridGeometry::of_map(&map)
    };
    let of_class = |k: SemanticClass| -> Vec<usize> {
        (0..map.cells().len())
            .filter(|&i| map.cells()[i] == k.index())
            .collect()
    };
    let entrances = of_class(SemanticClass::Entrance);
    let seats = of_class(SemanticClass::SittingArea);

    let mut agents = Vec::new();
    let mut unplaced = 0;
    for wi in 0..cfg.walkers {
        let mut rng = seed::stream(cfg.seed, "walker", wi as u64);
        match place_walker(cfg, &map, &geom, &entrances, &seats, &mut rng) {
            Some(samples) if !samples.is_empty() => agents.push(Trajectory {
                id: wi as u64,
                samples,
            }),
            _ => unplaced += 1,
        }
    }
    if unplaced > 0 {
        log::warn!("{unplaced} of {} synthetic walkers found no route", cfg.walkers);
    }

    for a in &agents {
        for s in &a.samples {
            let ok = geom
                .cell_of(s.x, s.y)
                .and_then(|i| cell_cost(&map, i))
                .is_some();
            if !ok {
                return Err(Error::Contract(format!(
                    "walker {} sampled an impassable cell at ({}, {})",
                    a.id, s.x, s.y
                )));
            }
        }
    }

    Ok(SyntheticScene {
        map,
        trajectories: TrajectorySet {
            agents,
            fps: cfg.sample_rate,
            lost_dropped: 0,
        },
        unplaced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::rasterize_occupancy;

    fn small() -> SceneConfig {
        SceneConfig {
            height: 48,
            width: 48,
            walkers: 20,
            seed: 11,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_synthetic_scene(&small()).unwrap();
        let b = generate_synthetic_scene(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(&SceneConfig { seed: 12, ..small() }).unwrap();
        assert_ne!(a.map, c.map);
    }

    #[test]
    fn zero_walkers() {
        let s = generate_synthetic_scene(&SceneConfig { walkers: 0, ..small() }).unwrap();
        assert!(s.trajectories.agents.is_empty());
        assert_eq!(s.map.height(), 48);
    }

    #[test]
    fn timestamps_strictly_increase() {
        let s = generate_synthetic_scene(&small()).unwrap();
        assert!(!s.trajectories.agents.is_empty());
        for a in &s.trajectories.agents {
            assert!(a.samples.windows(2).all(|w| w[0].t < w[1].t));
        }
    }

    #[test]
    fn single_corridor_carries_all_mass() {
        use SemanticClass::*;
        let mut map = SemanticMap::filled(5, 9, Building);
        for c in 0..9 {
            map.set(2, c, PedestrianArea);
        }
        map.set(2, 0, Entrance);
        map.set(2, 8, Entrance);
        let cfg = SceneConfig {
            layout: Layout::Fixed(map.clone()),
            walkers: 10,
            ..SceneConfig::default()
        };
        let s = generate_synthetic_scene(&cfg).unwrap();
        assert_eq!(s.unplaced, 0);
        let occ = rasterize_occupancy(&s.trajectories, &GridGeometry::of_map(&map));
        let p = occ.distribution.unwrap();
        let corridor: f64 = (0..9).map(|c| p.as_grid().get(2, c)).sum();
        assert!((corridor - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unreachable_goal_reported() {
        use SemanticClass::*;
        let mut map = SemanticMap::filled(3, 5, PedestrianArea);
        for r in 0..3 {
            map.set(r, 2, Building);
        }
        map.set(1, 0, Entrance);
        map.set(1, 4, Entrance);
        let cfg = SceneConfig {
            layout: Layout::Fixed(map),
            walkers: 3,
            max_retries: 2,
            ..SceneConfig::default()
        };
        let s = generate_synthetic_scene(&cfg).unwrap();
        assert_eq!(s.unplaced, 3);
        assert!(s.trajectories.agents.is_empty());
    }
}
