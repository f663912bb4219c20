//! Semantic maps, scalar grids and the crop geometry used for training.
//!
//! Maps are stored as one byte per cell holding a class index in `0..13` or
//! [`VOID`]. Crops never cross the map boundary; augmentation uses the eight
//! isometries of the square (dihedral group of order 8).

mod io;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use io::{
    parse_pgrid, parse_smap, pgrid_to_string, read_pgrid, read_smap, smap_to_string, write_pgrid,
    write_smap,
};

/// Cell value for unlabeled or out-of-map cells.
pub const VOID: u8 = 255;

/// Number of semantic classes.
pub const NUM_CLASSES: usize = 13;

/// Working resolution of every semantic map, meters per pixel.
pub const DEFAULT_RESOLUTION: f64 = 0.4;

/// The 13 semantic classes, in channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum SemanticClass {
    PedestrianArea = 0,
    VehicleRoad = 1,
    BicycleRoad = 2,
    Grass = 3,
    TreeFoliage = 4,
    Building = 5,
    Entrance = 6,
    Obstacle = 7,
    Parking = 8,
    SittingArea = 9,
    Stairs = 10,
    ShadedArea = 11,
    IntersectionZone = 12,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; NUM_CLASSES] = [
        SemanticClass::PedestrianArea,
        SemanticClass::VehicleRoad,
        SemanticClass::BicycleRoad,
        SemanticClass::Grass,
        SemanticClass::TreeFoliage,
        SemanticClass::Building,
        SemanticClass::Entrance,
        SemanticClass::Obstacle,
        SemanticClass::Parking,
        SemanticClass::SittingArea,
        SemanticClass::Stairs,
        SemanticClass::ShadedArea,
        SemanticClass::IntersectionZone,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn from_index(i: u8) -> Option<Self> {
        Self::ALL.get(i as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::PedestrianArea => "pedestrian area",
            SemanticClass::VehicleRoad => "vehicle road",
            SemanticClass::BicycleRoad => "bicycle road",
            SemanticClass::Grass => "grass",
            SemanticClass::TreeFoliage => "tree foliage",
            SemanticClass::Building => "building",
            SemanticClass::Entrance => "entrance",
            SemanticClass::Obstacle => "obstacle",
            SemanticClass::Parking => "parking",
            SemanticClass::SittingArea => "sitting area",
            SemanticClass::Stairs => "stairs",
            SemanticClass::ShadedArea => "shaded area",
            SemanticClass::IntersectionZone => "intersection zone",
        }
    }
}

/// H×W grid of class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    resolution: f64,
    cells: Vec<u8>,
}

impl SemanticMap {
    pub fn new(height: usize, width: usize, resolution: f64, cells: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("empty semantic map {height}x{width}")));
        }
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::Data(format!("invalid map resolution {resolution}")));
        }
        if cells.len() != height * width {
            return Err(Error::Data(format!(
                "semantic map has {} cells, expected {height}x{width}",
                cells.len()
            )));
        }
        if let Some(pos) = cells
            .iter()
            .position(|&c| c != VOID && c as usize >= NUM_CLASSES)
        {
            return Err(Error::Data(format!(
                "class index {} out of range at row {}, col {}",
                cells[pos],
                pos / width,
                pos % width
            )));
        }
        Ok(SemanticMap {
            height,
            width,
            resolution,
            cells,
        })
    }

    pub fn filled(height: usize, width: usize, class: SemanticClass) -> Self {
        SemanticMap {
            height,
            width,
            resolution: DEFAULT_RESOLUTION,
            cells: vec![class.index(); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: SemanticClass) {
        self.cells[row * self.width + col] = class.index();
    }

    pub fn class_at(&self, row: usize, col: usize) -> Option<SemanticClass> {
        SemanticClass::from_index(self.get(row, col))
    }

    /// S×S window with top-left corner at `origin`.
    pub fn crop(&self, origin: (usize, usize), size: usize) -> Result<SemanticMap> {
        let (r0, c0) = origin;
        if r0 + size > self.height || c0 + size > self.width {
            return Err(Error::Data(format!(
                "crop {size}x{size} at {origin:?} exceeds map {}x{}",
                self.height, self.width
            )));
        }
        let mut cells = Vec::with_capacity(size * size);
        for r in r0..r0 + size {
            cells.extend_from_slice(&self.cells[r * self.width + c0..r * self.width + c0 + size]);
        }
        Ok(SemanticMap {
            height: size,
            width: size,
            resolution: self.resolution,
            cells,
        })
    }

    /// One-hot channel tensor `[num_classes × H × W]`; void cells are all-zero.
    pub fn one_hot<T: Scalar>(&self, num_classes: usize) -> Result<Tensor<T>> {
        one_hot_encode(&self.cells, self.height, self.width, num_classes)
    }
}

/// One-hot encodes a row-major class grid into `[num_classes × H × W]`.
pub fn one_hot_encode<T: Scalar>(
    cells: &[u8],
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<Tensor<T>> {
    if cells.len() != height * width {
        return Err(Error::dim("one_hot_encode", &[height, width], &[cells.len()]));
    }
    let plane = height * width;
    let mut data = vec![T::zero(); num_classes * plane];
    for (i, &c) in cells.iter().enumerate() {
        if c == VOID {
            continue;
        }
        if c as usize >= num_classes {
            return Err(Error::Data(format!(
                "class index {c} out of range at row {}, col {}",
                i / width,
                i % width
            )));
        }
        data[c as usize * plane + i] = T::one();
    }
    Tensor::new(vec![num_classes, height, width], data)
}

/// Nonnegative-or-signed scalar field over the map grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Data(format!(
                "grid data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(ScalarGrid {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ScalarGrid {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn crop(&self, origin: (usize, usize), size: usize) -> Result<ScalarGrid> {
        let (r0, c0) = origin;
        if r0 + size > self.height || c0 + size > self.width {
            return Err(Error::Data(format!(
                "crop {size}x{size} at {origin:?} exceeds grid {}x{}",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(size * size);
        for r in r0..r0 + size {
            data.extend_from_slice(&self.data[r * self.width + c0..r * self.width + c0 + size]);
        }
        ScalarGrid::new(size, size, data)
    }

    /// Negative entries clamped to zero, then scaled to unit mass.
    /// `None` when nothing positive remains.
    pub fn to_distribution(&self) -> Option<ProbGrid> {
        let clamped: Vec<f64> = self
            .data
            .iter()
            .map(|&v| if v.is_finite() && v > 0.0 { v } else { 0.0 })
            .collect();
        let total: f64 = clamped.iter().sum();
        if total <= 0.0 {
            return None;
        }
        Some(ProbGrid(ScalarGrid {
            height: self.height,
            width: self.width,
            data: clamped.into_iter().map(|v| v / total).collect(),
        }))
    }
}

/// Nonnegative grid with unit total mass.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbGrid(ScalarGrid);

impl ProbGrid {
    /// Validates an already normalized grid (tolerance 1e-9 on the total).
    pub fn new(grid: ScalarGrid) -> Result<Self> {
        if grid.data.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Data("probability grid has negative or non-finite mass".into()));
        }
        let total = grid.total();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Data(format!("probability grid sums to {total}, expected 1")));
        }
        Ok(ProbGrid(grid))
    }

    pub fn from_vec(height: usize, width: usize, mass: Vec<f64>) -> Result<Self> {
        Self::new(ScalarGrid::new(height, width, mass)?)
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        let n = (height * width) as f64;
        ProbGrid(ScalarGrid {
            height,
            width,
            data: vec![1.0 / n; height * width],
        })
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn mass(&self) -> &[f64] {
        &self.0.data
    }

    pub fn as_grid(&self) -> &ScalarGrid {
        &self.0
    }

    pub fn into_grid(self) -> ScalarGrid {
        self.0
    }
}

/// How a raw ground-truth grid is rescaled into a regression target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScalePolicy {
    /// Divide by the parent-map total mass and multiply by the crop area
    /// `S²`, so a crop holding an S²-cell share of a uniform distribution
    /// over S² cells has value 1 everywhere.
    MassDensity { crop_size: usize },
    /// Divide by the parent-map maximum so values lie in `[0, 1]`.
    MaxNormalized,
}

/// A rescaled target and the factor that produced it (`target = raw · scale`).
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledTarget {
    pub grid: ScalarGrid,
    pub scale: f64,
    pub degenerate: bool,
}

impl ScaledTarget {
    /// Undo the scaling.
    pub fn invert(&self) -> ScalarGrid {
        let mut g = self.grid.clone();
        if self.scale > 0.0 {
            g.data.iter_mut().for_each(|v| *v /= self.scale);
        }
        g
    }
}

/// Rescale a nonnegative ground-truth grid for training.
pub fn normalize_target(gt: &ScalarGrid, policy: ScalePolicy) -> Result<ScaledTarget> {
    if let Some((i, v)) = gt.data.iter().enumerate().find(|(_, &v)| !(v >= 0.0)) {
        return Err(Error::Data(format!(
            "negative target value {v} at row {}, col {}",
            i / gt.width,
            i % gt.width
        )));
    }
    let denom = match policy {
        ScalePolicy::MassDensity { crop_size } => gt.total() / (crop_size * crop_size) as f64,
        ScalePolicy::MaxNormalized => gt.max(),
    };
    if denom <= 0.0 {
        return Ok(ScaledTarget {
            grid: ScalarGrid::zeros(gt.height, gt.width),
            scale: 0.0,
            degenerate: true,
        });
    }
    let scale = 1.0 / denom;
    Ok(ScaledTarget {
        grid: ScalarGrid::new(gt.height, gt.width, gt.data.iter().map(|v| v * scale).collect())?,
        scale,
        degenerate: false,
    })
}

/// A training crop: S×S semantic input plus one S×S target per prediction head.
#[derive(Clone, Debug, PartialEq)]
pub struct CropPair {
    pub input: SemanticMap,
    pub targets: Vec<Vec<f32>>,
    pub origin: (usize, usize),
    pub transform_id: u8,
}

impl CropPair {
    pub fn size(&self) -> usize {
        self.input.height
    }
}

/// Draws `count` crops with origins uniform over all valid positions.
pub fn sample_crops<R: Rng>(
    map: &SemanticMap,
    targets: &[&ScalarGrid],
    count: usize,
    size: usize,
    rng: &mut R,
) -> Result<Vec<CropPair>> {
    if size == 0 || map.height < size || map.width < size {
        return Err(Error::Data(format!(
            "map {}x{} is smaller than crop size {size}",
            map.height, map.width
        )));
    }
    for t in targets {
        if t.height != map.height || t.width != map.width {
            return Err(Error::Data(format!(
                "target grid {}x{} does not match map {}x{}",
                t.height, t.width, map.height, map.width
            )));
        }
    }
    let rows = map.height - size + 1;
    let cols = map.width - size + 1;
    (0..count)
        .map(|_| {
            let origin = (rng.random_range(0..rows), rng.random_range(0..cols));
            Ok(CropPair {
                input: map.crop(origin, size)?,
                targets: targets
                    .iter()
                    .map(|t| Ok(t.crop(origin, size)?.data.iter().map(|&v| v as f32).collect()))
                    .collect::<Result<_>>()?,
                origin,
                transform_id: 0,
            })
        })
        .collect()
}

/// `count` distinct non-identity dihedral transform ids.
pub fn choose_augmentations<R: Rng>(rng: &mut R, count: usize) -> Result<Vec<u8>> {
    if count > 7 {
        return Err(Error::Config(format!(
            "at most 7 distinct non-identity augmentations exist, {count} requested"
        )));
    }
    let mut ids: Vec<u8> = sample(rng, 7, count).into_iter().map(|i| i as u8 + 1).collect();
    ids.sort_unstable();
    Ok(ids)
}

/// Dihedral transform ids: `id = 4·mirror + quarter_turns`. The horizontal
/// mirror is applied first, then `quarter_turns` clockwise rotations.
pub fn inverse_transform(id: u8) -> Result<u8> {
    check_transform(id)?;
    Ok(if id < 4 { (4 - id) % 4 } else { id })
}

fn check_transform(id: u8) -> Result<()> {
    if id > 7 {
        return Err(Error::Contract(format!("invalid dihedral transform id {id}")));
    }
    Ok(())
}

/// Source coordinate read by output cell `(r, c)` under transform `id`.
fn source_of(id: u8, size: usize, r: usize, c: usize) -> (usize, usize) {
    let (mut r, mut c) = (r, c);
    // undo the rotations (each clockwise quarter turn reads in[S-1-c][r])
    for _ in 0..(id % 4) {
        (r, c) = (size - 1 - c, r);
    }
    if id >= 4 {
        c = size - 1 - c;
    }
    (r, c)
}

/// Applies transform `id` to a square row-major grid.
pub fn transform_square<V: Copy>(data: &[V], size: usize, id: u8) -> Result<Vec<V>> {
    check_transform(id)?;
    if data.len() != size * size {
        return Err(Error::dim("transform_square", &[size, size], &[data.len()]));
    }
    let mut out = Vec::with_capacity(data.len());
    for r in 0..size {
        for c in 0..size {
            let (sr, sc) = source_of(id, size, r, c);
            out.push(data[sr * size + sc]);
        }
    }
    Ok(out)
}

/// Applies the same isometry to the crop input and all its targets.
pub fn augment(crop: &CropPair, transform_id: u8) -> Result<CropPair> {
    check_transform(transform_id)?;
    let s = crop.size();
    let cells = transform_square(crop.input.cells(), s, transform_id)?;
    Ok(CropPair {
        input: SemanticMap {
            height: s,
            width: s,
            resolution: crop.input.resolution,
            cells,
        },
        targets: crop
            .targets
            .iter()
            .map(|t| transform_square(t, s, transform_id))
            .collect::<Result<_>>()?,
        origin: crop.origin,
        transform_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_examples() {
        let t: Tensor<f64> = one_hot_encode(&[4], 1, 1, NUM_CLASSES).unwrap();
        for c in 0..NUM_CLASSES {
            assert_eq!(t.data()[c], if c == 4 { 1.0 } else { 0.0 });
        }

        let t: Tensor<f64> = one_hot_encode(&[VOID; 4], 2, 2, NUM_CLASSES).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));

        let cells = [0, 12, VOID, 5];
        let t: Tensor<f64> = one_hot_encode(&cells, 2, 2, NUM_CLASSES).unwrap();
        for (i, &cell) in cells.iter().enumerate() {
            let s: f64 = (0..NUM_CLASSES).map(|c| t.data()[c * 4 + i]).sum();
            assert_eq!(s, if cell == VOID { 0.0 } else { 1.0 });
        }
    }

    #[test]
    fn one_hot_reports_cell_coordinates() {
        let err = one_hot_encode::<f32>(&[0, 0, 0, 13], 2, 2, NUM_CLASSES).unwrap_err();
        assert!(err.to_string().contains("row 1, col 1"), "{err}");
        assert!(SemanticMap::new(2, 2, 0.4, vec![0, 0, 20, 0]).is_err());
    }

    #[test]
    fn crops_on_exact_size_map_share_origin() {
        let map = SemanticMap::filled(64, 64, SemanticClass::Grass);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let crops = sample_crops(&map, &[], 500, 64, &mut rng).unwrap();
        assert_eq!(crops.len(), 500);
        assert!(crops.iter().all(|c| c.origin == (0, 0)));
    }

    #[test]
    fn crops_on_65_map_stay_in_support() {
        let map = SemanticMap::filled(65, 65, SemanticClass::Grass);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let crops = sample_crops(&map, &[], 500, 64, &mut rng).unwrap();
        assert!(crops.iter().all(|c| c.origin.0 <= 1 && c.origin.1 <= 1));
        let distinct: std::collections::HashSet<_> = crops.iter().map(|c| c.origin).collect();
        assert_eq!(distinct.len(), 4);
    }

    #[test]
    fn crops_are_deterministic_and_reject_small_maps() {
        let map = SemanticMap::filled(80, 70, SemanticClass::Grass);
        let a = sample_crops(&map, &[], 20, 64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = sample_crops(&map, &[], 20, 64, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let small = SemanticMap::filled(32, 80, SemanticClass::Grass);
        assert!(matches!(
            sample_crops(&small, &[], 1, 64, &mut ChaCha8Rng::seed_from_u64(3)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn crop_cuts_input_and_targets_congruently() {
        let mut map = SemanticMap::filled(6, 6, SemanticClass::Grass);
        map.set(3, 4, SemanticClass::Building);
        let mut gt = ScalarGrid::zeros(6, 6);
        gt.data_mut()[3 * 6 + 4] = 1.0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for crop in sample_crops(&map, &[&gt], 50, 3, &mut rng).unwrap() {
            for i in 0..9 {
                let is_building = crop.input.cells()[i] == SemanticClass::Building.index();
                assert_eq!(is_building, crop.targets[0][i] == 1.0);
            }
        }
    }

    fn two_by_two(id: u8) -> Vec<char> {
        transform_square(&['a', 'b', 'c', 'd'], 2, id).unwrap()
    }

    #[test]
    fn rotation_and_identity() {
        assert_eq!(two_by_two(1), vec!['c', 'a', 'd', 'b']);
        assert_eq!(two_by_two(0), vec!['a', 'b', 'c', 'd']);
        assert_eq!(two_by_two(4), vec!['b', 'a', 'd', 'c']);
        assert!(transform_square(&[0; 4], 2, 8).is_err());
    }

    #[test]
    fn every_transform_has_an_inverse() {
        let data: Vec<u32> = (0..25).collect();
        for id in 0..8 {
            let fwd = transform_square(&data, 5, id).unwrap();
            let back = transform_square(&fwd, 5, inverse_transform(id).unwrap()).unwrap();
            assert_eq!(back, data, "transform {id}");
        }
        let all: std::collections::HashSet<Vec<u32>> =
            (0..8).map(|id| transform_square(&data, 5, id).unwrap()).collect();
        assert_eq!(all.len(), 8);
    }

    #[test]
    fn augmentation_ids_are_distinct_non_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let ids = choose_augmentations(&mut rng, 5).unwrap();
            assert_eq!(ids.len(), 5);
            assert!(ids.iter().all(|&i| (1..8).contains(&i)));
            assert!(ids.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(choose_augmentations(&mut rng, 8).is_err());
    }

    #[test]
    fn normalize_target_examples() {
        let uniform = ScalarGrid::new(64, 64, vec![1.0 / 4096.0; 4096]).unwrap();
        let t = normalize_target(&uniform, ScalePolicy::MassDensity { crop_size: 64 }).unwrap();
        assert!(t.grid.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));

        let zero = ScalarGrid::zeros(4, 4);
        let t = normalize_target(&zero, ScalePolicy::MassDensity { crop_size: 64 }).unwrap();
        assert!(t.degenerate);
        assert!(t.grid.data().iter().all(|&v| v == 0.0));

        let raw = ScalarGrid::new(2, 2, vec![1.0, 3.0, 0.0, 4.0]).unwrap();
        let doubled = ScalarGrid::new(2, 2, vec![2.0, 6.0, 0.0, 8.0]).unwrap();
        let a = normalize_target(&raw, ScalePolicy::MassDensity { crop_size: 64 }).unwrap();
        let b = normalize_target(&doubled, ScalePolicy::MassDensity { crop_size: 64 }).unwrap();
        assert_eq!(a.grid, b.grid);
        let back = a.invert();
        for (x, y) in back.data().iter().zip(raw.data()) {
            assert!((x - y).abs() < 1e-12);
        }

        let m = normalize_target(&raw, ScalePolicy::MaxNormalized).unwrap();
        assert_eq!(m.grid.max(), 1.0);
    }

    #[test]
    fn prob_grid_validation() {
        assert!(ProbGrid::from_vec(1, 2, vec![0.5, 0.5]).is_ok());
        assert!(ProbGrid::from_vec(1, 2, vec![0.5, 0.6]).is_err());
        assert!(ProbGrid::from_vec(1, 2, vec![1.5, -0.5]).is_err());
        let g = ScalarGrid::new(1, 3, vec![-1.0, 1.0, 3.0]).unwrap();
        assert_eq!(g.to_distribution().unwrap().mass(), &[0.0, 0.25, 0.75]);
        assert!(ScalarGrid::zeros(2, 2).to_distribution().is_none());
    }
}
