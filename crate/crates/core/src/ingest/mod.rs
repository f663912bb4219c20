//! Trajectory annotations, ground-truth rasterization and synthetic scenes.

mod raster;
mod synth;

pub use raster::{
    rasterize_occupancy, rasterize_stops, rasterize_velocity, GridGeometry, Raster, StopParams,
    VelocityRaster,
};
pub use synth::{
    generate_synthetic_scene, step_cost, Layout, SceneConfig, SyntheticScene,
};

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Agent classes annotated in SDD-style files.
pub const KNOWN_LABELS: [&str; 6] = ["Pedestrian", "Biker", "Skater", "Cart", "Car", "Bus"];

pub const DEFAULT_LABEL: &str = "Pedestrian";

/// One annotation line: a bounding box of one track in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackRecord {
    pub track_id: u64,
    /// `(xmin, ymin, xmax, ymax)` in source pixels.
    pub bbox: [f64; 4],
    pub frame: u64,
    pub lost: bool,
    pub occluded: bool,
    pub generated: bool,
    pub label: String,
}

impl TrackRecord {
    pub fn centroid(&self) -> (f64, f64) {
        let [x0, y0, x1, y1] = self.bbox;
        ((x0 + x1) / 2.0, (y0 + y1) / 2.0)
    }
}

fn parse_err(line: usize, token: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        token: token.to_string(),
        message: message.into(),
    }
}

fn parse_flag(line: usize, tok: &str, name: &str) -> Result<bool> {
    match tok {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(parse_err(line, tok, format!("{name} flag must be 0 or 1"))),
    }
}

/// Parses one annotation line (1-based `line` used in errors). Blank lines
/// yield `None`.
pub fn parse_sdd_line(text: &str, line: usize) -> Result<Option<TrackRecord>> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    if toks.is_empty() {
        return Ok(None);
    }
    if toks.len() != 10 {
        let tok = toks.get(10).or(toks.last()).copied().unwrap_or("");
        return Err(parse_err(
            line,
            tok,
            format!("expected 10 fields, found {}", toks.len()),
        ));
    }
    let track_id: u64 = toks[0]
        .parse()
        .map_err(|_| parse_err(line, toks[0], "invalid track id"))?;
    let mut bbox = [0.0; 4];
    for (k, slot) in bbox.iter_mut().enumerate() {
        let tok = toks[1 + k];
        let v: f64 = tok
            .parse()
            .map_err(|_| parse_err(line, tok, "invalid bounding box coordinate"))?;
        if !v.is_finite() {
            return Err(parse_err(line, tok, "non-finite bounding box coordinate"));
        }
        *slot = v;
    }
    if bbox[0] > bbox[2] {
        return Err(parse_err(line, toks[1], "xmin exceeds xmax"));
    }
    if bbox[1] > bbox[3] {
        return Err(parse_err(line, toks[2], "ymin exceeds ymax"));
    }
    let frame: u64 = toks[5]
        .parse()
        .map_err(|_| parse_err(line, toks[5], "frame must be a nonnegative integer"))?;
    let lost = parse_flag(line, toks[6], "lost")?;
    let occluded = parse_flag(line, toks[7], "occluded")?;
    let generated = parse_flag(line, toks[8], "generated")?;
    let raw = toks[9];
    let label = raw.trim_matches('"');
    if label.is_empty() || label.contains('"') {
        return Err(parse_err(line, raw, "malformed label"));
    }
    Ok(Some(TrackRecord {
        track_id,
        bbox,
        frame,
        lost,
        occluded,
        generated,
        label: label.to_string(),
    }))
}

/// Strict parse: stops at the first malformed line.
pub fn parse_sdd_annotations(text: &str) -> Result<Vec<TrackRecord>> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        if let Some(r) = parse_sdd_line(l, i + 1)? {
            out.push(r);
        }
    }
    Ok(out)
}

/// Lenient parse: keeps every good line and collects one error per bad line.
pub fn parse_sdd_report(text: &str) -> (Vec<TrackRecord>, Vec<Error>) {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, l) in text.lines().enumerate() {
        match parse_sdd_line(l, i + 1) {
            Ok(Some(r)) => records.push(r),
            Ok(None) => {}
            Err(e) => errors.push(e),
        }
    }
    (records, errors)
}

/// One timestamped position in meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub samples: Vec<Sample>,
}

impl Trajectory {
    /// Per-sample speed in m/s: central differences inside, one-sided at the
    /// ends, zero for a single sample.
    pub fn speeds(&self) -> Vec<f64> {
        let s = &self.samples;
        let n = s.len();
        if n < 2 {
            return vec![0.0; n];
        }
        let rate = |a: &Sample, b: &Sample| (b.x - a.x).hypot(b.y - a.y) / (b.t - a.t);
        (0..n)
            .map(|i| {
                let lo = i.saturating_sub(1);
                let hi = (i + 1).min(n - 1);
                rate(&s[lo], &s[hi])
            })
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectorySet {
    pub agents: Vec<Trajectory>,
    pub fps: f64,
    /// Samples discarded because their `lost` flag was set.
    pub lost_dropped: usize,
}

impl TrajectorySet {
    pub fn sample_count(&self) -> usize {
        self.agents.iter().map(|a| a.samples.len()).sum()
    }
}

/// Validates a label filter against [`KNOWN_LABELS`].
pub fn check_labels(labels: &[String]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Config("label filter is empty".into()));
    }
    for l in labels {
        if !KNOWN_LABELS.contains(&l.as_str()) {
            return Err(Error::Config(format!(
                "unknown agent label `{l}` (known: {})",
                KNOWN_LABELS.join(", ")
            )));
        }
    }
    Ok(())
}

/// Groups records into per-track metric trajectories.
///
/// Centroids are scaled by `meters_per_source_px`, `t = frame / fps`; records
/// with `lost` set are dropped and counted, and only labels in `labels` kept.
pub fn tracks_to_trajectories(
    records: &[TrackRecord],
    meters_per_source_px: f64,
    fps: f64,
    labels: &[String],
) -> Result<TrajectorySet> {
    if !(fps > 0.0) || !fps.is_finite() {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    if !(meters_per_source_px > 0.0) || !meters_per_source_px.is_finite() {
        return Err(Error::Config(format!(
            "meters per source pixel must be positive, got {meters_per_source_px}"
        )));
    }
    check_labels(labels)?;
    let mut tracks: BTreeMap<u64, Vec<&TrackRecord>> = BTreeMap::new();
    let mut lost_dropped = 0;
    for r in records {
        if !labels.contains(&r.label) {
            continue;
        }
        if r.lost {
            lost_dropped += 1;
            continue;
        }
        tracks.entry(r.track_id).or_default().push(r);
    }
    let mut agents = Vec::with_capacity(tracks.len());
    for (id, mut recs) in tracks {
        recs.sort_by_key(|r| r.frame);
        if let Some(w) = recs.windows(2).find(|w| w[0].frame == w[1].frame) {
            return Err(Error::Data(format!(
                "track {id} has two records for frame {}",
                w[0].frame
            )));
        }
        let samples = recs
            .iter()
            .map(|r| {
                let (cx, cy) = r.centroid();
                Sample {
                    t: r.frame as f64 / fps,
                    x: cx * meters_per_source_px,
                    y: cy * meters_per_source_px,
                }
            })
            .collect();
        agents.push(Trajectory { id, samples });
    }
    Ok(TrajectorySet {
        agents,
        fps,
        lost_dropped,
    })
}

/// Plain-text trajectory table:
///
/// ```text
/// # fps=<f64>
/// agent,t,x,y
/// <u64>,<s>,<m>,<m>
/// ```
/// Rows are grouped by agent in ascending time order.
pub fn trajectories_to_csv(set: &TrajectorySet) -> String {
    let mut out = format!("# fps={:?}\nagent,t,x,y\n", set.fps);
    for a in &set.agents {
        for s in &a.samples {
            out.push_str(&format!("{},{:?},{:?},{:?}\n", a.id, s.t, s.x, s.y));
        }
    }
    out
}

/// Reads the format written by [`trajectories_to_csv`].
pub fn parse_trajectories_csv(text: &str) -> Result<TrajectorySet> {
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, token: &str, message: &str| Error::Parse {
        line,
        token: token.to_string(),
        message: message.to_string(),
    };
    let (_, first) = lines.next().ok_or_else(|| bad(1, "", "empty trajectory file"))?;
    let fps = first
        .strip_prefix("# fps=")
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|f| *f > 0.0)
        .ok_or_else(|| bad(1, first, "expected `# fps=<rate>`"))?;
    match lines.next() {
        Some((_, "agent,t,x,y")) => {}
        Some((_, other)) => return Err(bad(2, other, "expected header `agent,t,x,y`")),
        None => return Err(bad(2, "", "missing header")),
    }
    let mut agents: Vec<Trajectory> = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(n, line, "expected 4 comma-separated fields"));
        }
        let id: u64 = f[0].trim().parse().map_err(|_| bad(n, f[0], "agent id is not an integer"))?;
        let mut v = [0.0; 3];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = f[k + 1]
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| bad(n, f[k + 1], "not a finite number"))?;
        }
        let sample = Sample { t: v[0], x: v[1], y: v[2] };
        match agents.last_mut() {
            Some(a) if a.id == id => {
                if a.samples.last().is_some_and(|p| p.t >= sample.t) {
                    return Err(bad(n, f[1], "timestamps must increase within an agent"));
                }
                a.samples.push(sample);
            }
            _ => {
                if agents.iter().any(|a| a.id == id) {
                    return Err(bad(n, f[0], "agent rows are not contiguous"));
                }
                agents.push(Trajectory { id, samples: vec![sample] });
            }
        }
    }
    Ok(TrajectorySet {
        agents,
        fps,
        lost_dropped: 0,
    })
}
