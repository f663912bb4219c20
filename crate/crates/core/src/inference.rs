//! Full-map prediction by averaging overlapping crop predictions.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mapgrid::{write_pgrid, ProbGrid, ScalarGrid, SemanticMap};
use crate::model::{checkpoint_to_bytes, crop_tokens, unpatchify, ModelWeights, TargetKind};
use crate::tensor::{Scalar, Tensor};

/// Crops predicted per forward pass.
const CHUNK: usize = 8;

/// Where crops are placed on a map and how often each pixel is covered.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionPlan {
    pub height: usize,
    pub width: usize,
    pub size: usize,
    /// Stride of the sliding window; `None` for random placement.
    pub stride: Option<usize>,
    pub origins: Vec<(usize, usize)>,
    coverage: Vec<u32>,
}

/// `0, σ, 2σ, …` up to `len − size`, plus `len − size` itself when the
/// stride skips it.
fn axis_positions(len: usize, size: usize, stride: usize) -> Vec<usize> {
    let last = len - size;
    let mut v: Vec<usize> = (0..=last).step_by(stride).collect();
    if v.last() != Some(&last) {
        v.push(last);
    }
    v
}

impl ReconstructionPlan {
    /// Sliding window with edge-aligned final rows and columns.
    pub fn sliding(height: usize, width: usize, size: usize, stride: usize) -> Result<Self> {
        check_fits(height, width, size)?;
        if stride == 0 || stride > size {
            return Err(Error::Config(format!(
                "stride {stride} must be between 1 and the crop size {size}"
            )));
        }
        let rows = axis_positions(height, size, stride);
        let cols = axis_positions(width, size, stride);
        let origins = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .collect();
        Ok(Self::with_origins(height, width, size, Some(stride), origins))
    }

    /// `count` uniformly placed crops. Pixels they miss are then covered by
    /// the non-overlapping edge-aligned tiling crops that contain them.
    pub fn random<R: Rng>(
        height: usize,
        width: usize,
        size: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_fits(height, width, size)?;
        let mut origins: Vec<(usize, usize)> = (0..count)
            .map(|_| {
                (
                    rng.random_range(0..=height - size),
                    rng.random_range(0..=width - size),
                )
            })
            .collect();
        let partial = Self::with_origins(height, width, size, None, origins.clone());
        for r in axis_positions(height, size, size) {
            for c in axis_positions(width, size, size) {
                let uncovered = (r..r + size)
                    .any(|y| (c..c + size).any(|x| partial.coverage[y * width + x] == 0));
                if uncovered {
                    origins.push((r, c));
                }
            }
        }
        Ok(Self::with_origins(height, width, size, None, origins))
    }

    fn with_origins(
        height: usize,
        width: usize,
        size: usize,
        stride: Option<usize>,
        origins: Vec<(usize, usize)>,
    ) -> Self {
        let mut coverage = vec![0u32; height * width];
        for &(r0, c0) in &origins {
            for r in r0..r0 + size {
                coverage[r * width + c0..r * width + c0 + size]
                    .iter_mut()
                    .for_each(|v| *v += 1);
            }
        }
        ReconstructionPlan {
            height,
            width,
            size,
            stride,
            origins,
            coverage,
        }
    }

    /// Crops covering each pixel, row-major.
    pub fn coverage(&self) -> &[u32] {
        &self.coverage
    }
}

fn check_fits(height: usize, width: usize, size: usize) -> Result<()> {
    if size == 0 || height < size || width < size {
        return Err(Error::Data(format!(
            "map {height}x{width} is smaller than crop size {size}"
        )));
    }
    Ok(())
}

/// Unmasked prediction for a batch of crops: `out[crop][head]`, each S×S in
/// raw units (head output times its output scale).
pub fn predict_crops<T: Scalar>(
    weights: &ModelWeights<T>,
    crops: &[SemanticMap],
) -> Result<Vec<Vec<ScalarGrid>>> {
    let arch = weights.arch();
    let (s, p, n) = (arch.crop_size, arch.patch_size, arch.num_patches());
    if crops.is_empty() {
        return Ok(Vec::new());
    }
    let mut tokens = Vec::with_capacity(crops.len() * n * arch.token_dim());
    for c in crops {
        if c.height() != s || c.width() != s {
            return Err(Error::Contract(format!(
                "crop is {}x{}, model expects {s}x{s}",
                c.height(),
                c.width()
            )));
        }
        tokens.extend_from_slice(crop_tokens::<T>(c, p, arch.in_channels)?.data());
    }
    let tokens = Tensor::new(vec![crops.len() * n, arch.token_dim()], tokens)?;
    let heads = weights.predict(&tokens, crops.len())?;
    let mut out = vec![Vec::with_capacity(heads.len()); crops.len()];
    for (h, scale) in heads.iter().zip(weights.output_scales()) {
        let rows = h.data().chunks(n * p * p);
        for (b, chunk) in rows.enumerate() {
            let t = Tensor::new(vec![n, p * p], chunk.to_vec())?;
            let img = unpatchify(&t, 1, s, s, p)?;
            let data = img.data().iter().map(|v| v.as_f64() * scale).collect();
            out[b].push(ScalarGrid::new(s, s, data)?);
        }
    }
    Ok(out)
}

/// One crop, one grid per head.
pub fn predict_crop<T: Scalar>(weights: &ModelWeights<T>, crop: &SemanticMap) -> Result<Vec<ScalarGrid>> {
    Ok(predict_crops(weights, std::slice::from_ref(crop))?.remove(0))
}

/// Averaged prediction of one head over a full map.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadPrediction {
    pub target: TargetKind,
    /// Per-pixel mean over covering crops, in raw units.
    pub mean: ScalarGrid,
    /// Sum of the clamped mean before normalization.
    pub mass: f64,
    /// Normalized distribution for occupancy and stop heads; `None` for
    /// speeds or when nothing positive was predicted.
    pub distribution: Option<ProbGrid>,
}

/// Predicts every plan crop and averages per pixel. Accumulation follows
/// plan order, so the result does not depend on the thread count.
pub fn predict_map<T: Scalar>(
    weights: &ModelWeights<T>,
    map: &SemanticMap,
    plan: &ReconstructionPlan,
) -> Result<Vec<HeadPrediction>> {
    let size = weights.arch().crop_size;
    check_fits(map.height(), map.width(), size)?;
    if plan.size != size || plan.height != map.height() || plan.width != map.width() {
        return Err(Error::Contract(format!(
            "plan for {}x{} crops of {}x{} does not match model crop {size} on map {}x{}",
            plan.size,
            plan.size,
            plan.height,
            plan.width,
            map.height(),
            map.width()
        )));
    }
    let parts: Vec<Result<Vec<Vec<ScalarGrid>>>> = plan
        .origins
        .par_chunks(CHUNK)
        .map(|chunk| {
            let crops = chunk
                .iter()
                .map(|&o| map.crop(o, size))
                .collect::<Result<Vec<_>>>()?;
            predict_crops(weights, &crops)
        })
        .collect();
    let targets = &weights.arch().targets;
    let (h, w) = (map.height(), map.width());
    let mut sums = vec![vec![0.0f64; h * w]; targets.len()];
    let mut origins = plan.origins.iter();
    for part in parts {
        for crop in part? {
            let &(r0, c0) = origins.next().expect("one prediction per origin");
            for (acc, grid) in sums.iter_mut().zip(&crop) {
                for r in 0..size {
                    let row = &grid.data()[r * size..(r + 1) * size];
                    let dst = &mut acc[(r0 + r) * w + c0..(r0 + r) * w + c0 + size];
                    dst.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            }
        }
    }
    targets
        .iter()
        .zip(sums)
        .map(|(&target, sum)| {
            let mean: Vec<f64> = sum
                .iter()
                .zip(plan.coverage())
                .map(|(s, &c)| s / c as f64)
                .collect();
            let mean = ScalarGrid::new(h, w, mean)?;
            let mass: f64 = mean.data().iter().map(|v| v.max(0.0)).sum();
            let distribution = match target {
                TargetKind::Velocity => None,
                _ => mean.to_distribution(),
            };
            Ok(HeadPrediction {
                target,
                mean,
                mass,
                distribution,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapFormat {
    Pgrid,
    Pgm16,
}

impl HeatmapFormat {
    pub fn extension(self) -> &'static str {
        match self {
            HeatmapFormat::Pgrid => "pgrid",
            HeatmapFormat::Pgm16 => "pgm",
        }
    }
}

impl fmt::Display for HeatmapFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeatmapFormat::Pgrid => "pgrid",
            HeatmapFormat::Pgm16 => "pgm16",
        })
    }
}

impl FromStr for HeatmapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pgrid" => Ok(HeatmapFormat::Pgrid),
            "pgm16" => Ok(HeatmapFormat::Pgm16),
            _ => Err(Error::Config(format!("unknown heatmap format `{s}`"))),
        }
    }
}

/// Provenance written to the `.meta` sidecar.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExportMeta {
    pub stride: Option<usize>,
    pub weight_checksum: Option<u32>,
    pub seed: Option<u64>,
    pub extra: Vec<(String, String)>,
}

/// CRC-32 of the serialized weights.
pub fn weight_checksum<T: Scalar>(weights: &ModelWeights<T>) -> Result<u32> {
    Ok(crc32fast::hash(&checkpoint_to_bytes(weights)?))
}

/// Binary 16-bit PGM (`P5`, big-endian). Values map linearly from
/// `[min, max]` to `[0, 65535]`; a constant grid maps to 0. Returns the
/// bytes and the factor applied to `value − min`.
pub fn pgm16_bytes(grid: &ScalarGrid) -> Result<(Vec<u8>, f64)> {
    if let Some(v) = grid.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("cannot export non-finite value {v}")));
    }
    let min = grid.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = grid.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if max > min { 65535.0 / (max - min) } else { 0.0 };
    let mut out = format!("P5\n{} {}\n65535\n", grid.width(), grid.height()).into_bytes();
    for &v in grid.data() {
        let q = ((v - min) * scale).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok((out, scale))
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes `grid` to `path` and a `<path>.meta` key=value sidecar. Returns
/// both paths.
pub fn export_heatmap(
    grid: &ScalarGrid,
    path: impl AsRef<Path>,
    format: HeatmapFormat,
    meta: &ExportMeta,
) -> Result<[PathBuf; 2]> {
    let path = path.as_ref();
    if let Some(v) = grid.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("cannot export non-finite value {v}")));
    }
    let min = grid.data().iter().copied().fold(f64::INFINITY, f64::min);
    let max = grid.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lines = vec![
        format!("format={format}"),
        format!("height={}", grid.height()),
        format!("width={}", grid.width()),
        format!("min={min:?}"),
        format!("max={max:?}"),
    ];
    match format {
        HeatmapFormat::Pgrid => {
            write_pgrid(path, grid)?;
            lines.push("scale=1.0".into());
        }
        HeatmapFormat::Pgm16 => {
            let (bytes, scale) = pgm16_bytes(grid)?;
            std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
            lines.push(format!("scale={scale:?}"));
        }
    }
    if let Some(s) = meta.stride {
        lines.push(format!("stride={s}"));
    }
    if let Some(c) = meta.weight_checksum {
        lines.push(format!("weight_crc32={c:08x}"));
    }
    if let Some(s) = meta.seed {
        lines.push(format!("seed={s}"));
    }
    lines.extend(meta.extra.iter().map(|(k, v)| format!("{k}={v}")));
    let meta_file = meta_path(path);
    std::fs::write(&meta_file, lines.join("\n") + "\n").map_err(|e| Error::io(&meta_file, e))?;
    Ok([path.to_path_buf(), meta_file])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapgrid::{read_pgrid, SemanticClass};
    use crate::model::{ArchConfig, Backbone};
    use crate::seed;

    /// Coverage by direct enumeration of the sliding positions.
    fn oracle(h: usize, w: usize, s: usize, stride: usize) -> Vec<u32> {
        let pos = |len: usize| {
            let mut v = Vec::new();
            let mut x = 0;
            while x + s <= len {
                v.push(x);
                x += stride;
            }
            if *v.last().unwrap() != len - s {
                v.push(len - s);
            }
            v
        };
        let mut cov = vec![0; h * w];
        for y in 0..h {
            for x in 0..w {
                let rows = pos(h).iter().filter(|&&r| r <= y && y < r + s).count();
                let cols = pos(w).iter().filter(|&&c| c <= x && x < c + s).count();
                cov[y * w + x] = (rows * cols) as u32;
            }
        }
        cov
    }

    #[test]
    fn sliding_coverage_matches_oracle() {
        for (h, w, s, stride) in [(128, 96, 64, 32), (128, 96, 64, 64), (10, 7, 4, 1), (9, 9, 4, 3)] {
            let plan = ReconstructionPlan::sliding(h, w, s, stride).unwrap();
            assert_eq!(plan.coverage(), oracle(h, w, s, stride).as_slice(), "{h}x{w} s{stride}");
            assert!(plan.coverage().iter().all(|&c| c >= 1));
        }
        let plan = ReconstructionPlan::sliding(128, 96, 64, 64).unwrap();
        assert_eq!(plan.origins, vec![(0, 0), (0, 32), (64, 0), (64, 32)]);
        assert!(matches!(
            ReconstructionPlan::sliding(32, 96, 64, 32),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn random_plan_covers_everything() {
        let mut rng = seed::stream(2, "plan", 0);
        let plan = ReconstructionPlan::random(50, 70, 16, 3, &mut rng).unwrap();
        assert!(plan.origins.len() >= 3);
        assert!(plan.coverage().iter().all(|&c| c >= 1));
    }

    fn small_weights() -> ModelWeights<f64> {
        let mut arch = ArchConfig::preset(Backbone::Desk);
        arch.crop_size = 16;
        arch.patch_size = 4;
        arch.encoder.depth = 1;
        arch.targets = vec![TargetKind::Occupancy, TargetKind::Velocity];
        ModelWeights::init(&arch, &mut seed::stream(0, "init", 0)).unwrap()
    }

    fn zero_heads(w: &mut ModelWeights<f64>, bias: [f64; 2]) {
        for (t, b) in ["occupancy", "velocity"].iter().zip(bias) {
            w.get_mut(&format!("head.{t}.weight"))
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = 0.0);
            w.get_mut(&format!("head.{t}.bias"))
                .unwrap()
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = b);
        }
    }

    #[test]
    fn crop_prediction_contract() {
        let mut w = small_weights();
        let crop = SemanticMap::filled(16, 16, SemanticClass::Grass);
        let a = predict_crop(&w, &crop).unwrap();
        assert_eq!(a, predict_crop(&w, &crop).unwrap());
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|g| g.height() == 16 && g.width() == 16));
        zero_heads(&mut w, [0.0, 0.0]);
        assert!(predict_crop(&w, &crop).unwrap().iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        let big = SemanticMap::filled(20, 16, SemanticClass::Grass);
        assert!(matches!(predict_crop(&w, &big), Err(Error::Contract(_))));
    }

    #[test]
    fn constant_predictor_gives_constant_map() {
        let mut w = small_weights();
        zero_heads(&mut w, [0.5, 1.25]);
        w.set_output_scales(vec![1.0, 2.0]).unwrap();
        let map = SemanticMap::filled(40, 28, SemanticClass::PedestrianArea);
        for stride in [1, 5, 16] {
            let plan = ReconstructionPlan::sliding(40, 28, 16, stride).unwrap();
            let out = predict_map(&w, &map, &plan).unwrap();
            assert!(out[0].mean.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
            assert!((out[0].mass - 0.5 * 40.0 * 28.0).abs() < 1e-9);
            let d = out[0].distribution.as_ref().unwrap();
            assert!(d.mass().iter().all(|&v| (v - 1.0 / 1120.0).abs() < 1e-15));
            assert!(out[1].mean.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
            assert!(out[1].distribution.is_none());
        }
    }

    #[test]
    fn tiling_equals_crop_outputs() {
        let w = small_weights();
        let mut rng = seed::stream(9, "map", 0);
        let cells = (0..32 * 48).map(|_| rng.random_range(0..13u8)).collect();
        let map = SemanticMap::new(32, 48, 0.4, cells).unwrap();
        let plan = ReconstructionPlan::sliding(32, 48, 16, 16).unwrap();
        let out = predict_map(&w, &map, &plan).unwrap();
        for &(r0, c0) in &plan.origins {
            let crop = predict_crop(&w, &map.crop((r0, c0), 16).unwrap()).unwrap();
            for r in 0..16 {
                for c in 0..16 {
                    let v = out[0].mean.get(r0 + r, c0 + c);
                    assert!((v - crop[0].get(r, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn overlapping_average() {
        // Two crops overlapping in one column: that column gets their mean.
        let plan = ReconstructionPlan::sliding(2, 3, 2, 1).unwrap();
        assert_eq!(plan.coverage(), &[1, 2, 1, 1, 2, 1]);
    }

    #[test]
    fn export_formats() {
        let dir = tempfile::tempdir().unwrap();
        let g = ScalarGrid::new(2, 3, vec![0.0, 0.25, 1.0, 1.0 / 3.0, 0.5, 0.75]).unwrap();
        let meta = ExportMeta {
            stride: Some(32),
            weight_checksum: Some(0xdeadbeef),
            seed: Some(7),
            extra: vec![],
        };
        let [p, m] = export_heatmap(&g, dir.path().join("a.pgrid"), HeatmapFormat::Pgrid, &meta).unwrap();
        assert_eq!(read_pgrid(&p).unwrap(), g);
        let text = std::fs::read_to_string(m).unwrap();
        assert!(text.contains("stride=32\n") && text.contains("weight_crc32=deadbeef\n") && text.contains("seed=7\n"));

        let [p, m] = export_heatmap(&g, dir.path().join("a.pgm"), HeatmapFormat::Pgm16, &meta).unwrap();
        let bytes = std::fs::read(p).unwrap();
        let header = b"P5\n3 2\n65535\n";
        assert!(bytes.starts_with(header));
        let px: Vec<u16> = bytes[header.len()..]
            .chunks(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]))
            .collect();
        assert_eq!(px[0], 0);
        assert_eq!(px[2], 65535);
        assert_eq!(px.iter().max(), Some(&65535));
        assert!(std::fs::read_to_string(m).unwrap().contains("scale=65535.0\n"));

        let flat = ScalarGrid::new(2, 2, vec![3.0; 4]).unwrap();
        let (bytes, scale) = pgm16_bytes(&flat).unwrap();
        assert_eq!(scale, 0.0);
        assert!(bytes[bytes.len() - 8..].iter().all(|&b| b == 0));
        let bad = export_heatmap(&g, "/nonexistent-dir/x.pgrid", HeatmapFormat::Pgrid, &meta);
        assert!(matches!(bad, Err(Error::Io { .. })));
    }
}
