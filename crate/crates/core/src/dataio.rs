//! Trajectory ingestion, synthetic scenario generation, windowing into
//! prediction samples and case-level train/test splitting.
//!
//! The CSV layout follows the public INTERACTION release:
//! `case_id,track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,psi_rad,length,width`.
//! `case_id` is optional on input (absent means a single case `0`).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edn::{PredictionContext, STATE_DIM};
use crate::geom::EgoFrame;
use crate::numkit::Mat;

/// Sampling period of every trajectory.
pub const DT: f64 = 0.1;
pub const FRAME_MS: i64 = 100;

/// Below this speed the heading is carried over instead of read off velocity.
const HEADING_MIN_SPEED: f64 = 0.1;

const REQUIRED_COLUMNS: [&str; 11] = [
    "track_id",
    "frame_id",
    "timestamp_ms",
    "agent_type",
    "x",
    "y",
    "vx",
    "vy",
    "psi_rad",
    "length",
    "width",
];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: missing columns {missing:?}")]
    MissingColumns { path: String, missing: Vec<String> },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("invalid scenario spec: {0}")]
    InvalidSpec(String),
    #[error("split needs at least 2 cases, got {0}")]
    TooFewCases(usize),
    #[error("train fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameState {
    pub frame_id: i64,
    pub timestamp_ms: i64,
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
    pub psi: f64,
}

impl FrameState {
    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub case_id: u64,
    pub agent_id: u64,
    pub length: f64,
    pub width: f64,
    pub frames: Vec<FrameState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioTag {
    Trained,
    Transfer,
}

impl ScenarioTag {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioTag::Trained => "trained",
            ScenarioTag::Transfer => "transfer",
        }
    }
}

/// One prediction case anchored at frame `anchor` of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub case_id: u64,
    pub agent_id: u64,
    pub anchor: usize,
    pub timestamp_ms: i64,
    /// `T_h × 4` ego-frame `(x, y, vx, vy)`, oldest first.
    pub history: Mat,
    /// `T_f × 2` ego-frame ground-truth positions.
    pub future: Mat,
    /// World-frame `(x, y, vx, vy, psi)` at the anchor.
    pub current: [f64; 5],
    pub frame: EgoFrame,
    pub goal: [f64; 2],
    pub scenario: ScenarioTag,
}

impl Sample {
    pub fn context(&self) -> PredictionContext {
        PredictionContext {
            history: self.history.clone(),
            goal: self.goal,
            frame: self.frame,
        }
    }

    /// Ground-truth future in world coordinates.
    pub fn future_world(&self) -> Mat {
        let mut out = self.future.clone();
        for k in 0..out.rows() {
            let w = self.frame.to_world([out[(k, 0)], out[(k, 1)]]);
            out.row_mut(k).copy_from_slice(&w);
        }
        out
    }
}

fn parse_field<T: std::str::FromStr>(
    rec: &csv::StringRecord,
    idx: usize,
    name: &str,
    path: &str,
) -> Result<T, DataError> {
    let line = rec.position().map_or(0, |p| p.line());
    let raw = rec.get(idx).unwrap_or("").trim();
    raw.parse().map_err(|_| DataError::Parse {
        path: path.to_string(),
        line,
        message: format!("bad {name} '{raw}'"),
    })
}

/// Reads an INTERACTION-format CSV. Non-car agents are dropped, rows are
/// grouped by `(case_id, track_id)` and every gap in `frame_id` starts a new
/// trajectory.
pub fn load_csv(path: &Path) -> Result<Vec<Trajectory>, DataError> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<String> = REQUIRED_COLUMNS
        .iter()
        .filter(|c| col(c).is_none())
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(DataError::MissingColumns {
            path: path_str,
            missing,
        });
    }
    let idx: HashMap<&str, usize> = REQUIRED_COLUMNS
        .iter()
        .map(|&c| (c, col(c).unwrap()))
        .collect();
    let case_col = col("case_id");

    // (case, track) -> (length, width, frames) in first-seen order.
    let mut groups: BTreeMap<(u64, u64), (usize, f64, f64, Vec<FrameState>)> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec?;
        if rec.get(idx["agent_type"]).map(str::trim) != Some("car") {
            continue;
        }
        let case_id = match case_col {
            Some(c) => parse_field::<f64>(&rec, c, "case_id", &path_str)? as u64,
            None => 0,
        };
        let track_id: u64 = parse_field(&rec, idx["track_id"], "track_id", &path_str)?;
        let mut psi_raw = rec.get(idx["psi_rad"]).unwrap_or("").trim().to_string();
        if psi_raw.is_empty() {
            psi_raw = "nan".into();
        }
        let frame = FrameState {
            frame_id: parse_field(&rec, idx["frame_id"], "frame_id", &path_str)?,
            timestamp_ms: parse_field(&rec, idx["timestamp_ms"], "timestamp_ms", &path_str)?,
            x: parse_field(&rec, idx["x"], "x", &path_str)?,
            y: parse_field(&rec, idx["y"], "y", &path_str)?,
            vx: parse_field(&rec, idx["vx"], "vx", &path_str)?,
            vy: parse_field(&rec, idx["vy"], "vy", &path_str)?,
            psi: psi_raw.parse().unwrap_or(f64::NAN),
        };
        let finite = [frame.x, frame.y, frame.vx, frame.vy]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(DataError::Parse {
                path: path_str,
                line: rec.position().map_or(0, |p| p.line()),
                message: "non-finite state".into(),
            });
        }
        let length: f64 = parse_field(&rec, idx["length"], "length", &path_str).unwrap_or(0.0);
        let width: f64 = parse_field(&rec, idx["width"], "width", &path_str).unwrap_or(0.0);
        let order = groups.len();
        groups
            .entry((case_id, track_id))
            .or_insert_with(|| (order, length, width, Vec::new()))
            .3
            .push(frame);
    }

    let mut ordered: Vec<_> = groups.into_iter().collect();
    ordered.sort_by_key(|(_, (order, ..))| *order);
    let mut out = Vec::new();
    for ((case_id, agent_id), (_, length, width, mut frames)) in ordered {
        frames.sort_by_key(|f| f.frame_id);
        fill_missing_headings(&mut frames);
        let mut start = 0;
        for i in 1..=frames.len() {
            if i == frames.len() || frames[i].frame_id != frames[i - 1].frame_id + 1 {
                out.push(Trajectory {
                    case_id,
                    agent_id,
                    length,
                    width,
                    frames: frames[start..i].to_vec(),
                });
                start = i;
            }
        }
    }
    Ok(out)
}

fn fill_missing_headings(frames: &mut [FrameState]) {
    let mut prev = 0.0;
    for f in frames.iter_mut() {
        if !f.psi.is_finite() {
            f.psi = if f.speed() > HEADING_MIN_SPEED {
                f.vy.atan2(f.vx)
            } else {
                prev
            };
        }
        prev = f.psi;
    }
}

/// Writes trajectories in the same layout [`load_csv`] reads. Floats use the
/// shortest representation that parses back to the same bits.
pub fn write_csv(path: &Path, trajs: &[Trajectory]) -> Result<(), DataError> {
    write_csv_with_comments(path, &[], trajs)
}

/// As [`write_csv`], preceded by `# `-prefixed comment lines that
/// [`load_csv`] skips.
pub fn write_csv_with_comments(
    path: &Path,
    comments: &[String],
    trajs: &[Trajectory],
) -> Result<(), DataError> {
    use std::io::Write;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in comments {
        writeln!(file, "# {c}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(
        std::iter::once("case_id").chain(REQUIRED_COLUMNS.iter().copied()),
    )?;
    for t in trajs {
        for f in &t.frames {
            w.write_record([
                t.case_id.to_string(),
                t.agent_id.to_string(),
                f.frame_id.to_string(),
                f.timestamp_ms.to_string(),
                "car".to_string(),
                f.x.to_string(),
                f.y.to_string(),
                f.vx.to_string(),
                f.vy.to_string(),
                f.psi.to_string(),
                t.length.to_string(),
                t.width.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    IntersectionLike,
    RoundaboutLike,
}

/// Behaviour of one simulated driver.
///
/// The agent cruises toward `target_speed` (first-order response with gain
/// `accel_gain`), optionally modulated by a slow sinusoidal wobble. From frame
/// `maneuver_start` it follows curvature `curvature` until its heading has
/// turned by `maneuver_angle`; while turning, and for `brake_lead` frames
/// before, the target speed is scaled by `brake_ratio`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverParams {
    pub target_speed: f64,
    #[serde(default)]
    pub initial_speed: Option<f64>,
    pub accel_gain: f64,
    pub curvature: f64,
    pub noise_std: f64,
    #[serde(default)]
    pub maneuver_start: usize,
    #[serde(default = "default_angle")]
    pub maneuver_angle: f64,
    #[serde(default = "one")]
    pub brake_ratio: f64,
    #[serde(default)]
    pub brake_lead: usize,
    #[serde(default)]
    pub speed_wobble: f64,
    #[serde(default = "default_period")]
    pub wobble_period_s: f64,
    #[serde(default)]
    pub wobble_phase: f64,
    #[serde(default)]
    pub start: [f64; 2],
    #[serde(default)]
    pub heading: f64,
}

fn default_angle() -> f64 {
    f64::INFINITY
}

fn one() -> f64 {
    1.0
}

fn default_period() -> f64 {
    4.0
}

impl DriverParams {
    /// Constant-speed straight driving.
    pub fn straight(speed: f64) -> Self {
        Self {
            target_speed: speed,
            initial_speed: None,
            accel_gain: 1.0,
            curvature: 0.0,
            noise_std: 0.0,
            maneuver_start: 0,
            maneuver_angle: default_angle(),
            brake_ratio: 1.0,
            brake_lead: 0,
            speed_wobble: 0.0,
            wobble_period_s: default_period(),
            wobble_phase: 0.0,
            start: [0.0, 0.0],
            heading: 0.0,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        let ok = self.target_speed > 0.0
            && self.target_speed.is_finite()
            && self.initial_speed.is_none_or(|v| v >= 0.0 && v.is_finite())
            && self.accel_gain >= 0.0
            && self.curvature.is_finite()
            && self.noise_std >= 0.0
            && self.brake_ratio > 0.0
            && self.wobble_period_s > 0.0
            && self.speed_wobble >= 0.0
            && self.speed_wobble < 1.0
            && self.maneuver_angle >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(DataError::InvalidSpec(format!("bad driver parameters {self:?}")))
        }
    }
}

/// Inclusive range sampled uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range(pub f64, pub f64);

impl Range {
    fn sample(self, rng: &mut impl Rng) -> f64 {
        if self.1 > self.0 {
            rng.random_range(self.0..=self.1)
        } else {
            self.0
        }
    }

    fn valid(self) -> bool {
        self.0.is_finite() && self.1.is_finite() && self.0 <= self.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub kind: ScenarioKind,
    pub n_agents: usize,
    /// Frames per agent (10 Hz).
    pub frames: usize,
    pub target_speed: Range,
    pub accel_gain: Range,
    /// Curvature magnitude in 1/m.
    pub curvature: Range,
    pub noise_std: f64,
    pub speed_wobble: Range,
    pub brake_ratio: Range,
    pub seed: u64,
    /// Explicit per-agent parameters; overrides the ranges when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drivers: Option<Vec<DriverParams>>,
}

impl ScenarioSpec {
    pub fn intersection(n_agents: usize, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::IntersectionLike,
            n_agents,
            frames: 80,
            target_speed: Range(7.0, 13.0),
            accel_gain: Range(0.6, 2.0),
            curvature: Range(1.0 / 25.0, 1.0 / 10.0),
            noise_std: 0.05,
            speed_wobble: Range(0.0, 0.15),
            brake_ratio: Range(0.35, 0.9),
            seed,
            drivers: None,
        }
    }

    pub fn roundabout(n_agents: usize, seed: u64) -> Self {
        Self {
            kind: ScenarioKind::RoundaboutLike,
            n_agents,
            frames: 80,
            target_speed: Range(6.0, 12.0),
            accel_gain: Range(0.6, 2.0),
            curvature: Range(1.0 / 16.0, 1.0 / 7.0),
            noise_std: 0.05,
            speed_wobble: Range(0.05, 0.25),
            brake_ratio: Range(0.5, 1.0),
            seed,
            drivers: None,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_agents == 0 {
            return Err(DataError::InvalidSpec("n_agents must be positive".into()));
        }
        if self.frames < 2 {
            return Err(DataError::InvalidSpec("frames must be at least 2".into()));
        }
        let ranges = [
            self.target_speed,
            self.accel_gain,
            self.curvature,
            self.speed_wobble,
            self.brake_ratio,
        ];
        if !ranges.iter().all(|r| r.valid()) || self.target_speed.0 <= 0.0 {
            return Err(DataError::InvalidSpec(
                "ranges must be finite, ordered, with positive speeds".into(),
            ));
        }
        if !(self.noise_std >= 0.0) {
            return Err(DataError::InvalidSpec("noise_std must be >= 0".into()));
        }
        if let Some(d) = &self.drivers {
            if d.len() != self.n_agents {
                return Err(DataError::InvalidSpec(format!(
                    "{} drivers given for {} agents",
                    d.len(),
                    self.n_agents
                )));
            }
            d.iter().try_for_each(DriverParams::validate)?;
        }
        Ok(())
    }

    fn sample_driver(&self, rng: &mut impl Rng) -> DriverParams {
        let speed = self.target_speed.sample(rng);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let mut d = DriverParams {
            target_speed: speed,
            initial_speed: Some(speed * rng.random_range(0.85..=1.1)),
            accel_gain: self.accel_gain.sample(rng),
            curvature: 0.0,
            noise_std: self.noise_std,
            maneuver_start: 0,
            maneuver_angle: default_angle(),
            brake_ratio: self.brake_ratio.sample(rng),
            brake_lead: 0,
            speed_wobble: self.speed_wobble.sample(rng),
            wobble_period_s: rng.random_range(3.0..=6.0),
            wobble_phase: rng.random_range(0.0..std::f64::consts::TAU),
            start: [rng.random_range(-50.0..=50.0), rng.random_range(-50.0..=50.0)],
            heading: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
        };
        let n = self.frames;
        match self.kind {
            ScenarioKind::IntersectionLike => {
                // Left turn, right turn or straight through the junction.
                let choice = rng.random_range(0..3u8);
                d.maneuver_start = rng.random_range(n / 4..=n / 2);
                d.brake_lead = rng.random_range(8..=20);
                if choice < 2 {
                    d.curvature = sign * self.curvature.sample(rng);
                    d.maneuver_angle = std::f64::consts::FRAC_PI_2;
                } else {
                    d.curvature = 0.0;
                    d.maneuver_angle = 0.0;
                    if rng.random_bool(0.5) {
                        d.brake_ratio = 1.0;
                    }
                }
            }
            ScenarioKind::RoundaboutLike => {
                d.maneuver_start = rng.random_range(0..=n / 3);
                d.brake_lead = rng.random_range(5..=15);
                d.curvature = self.curvature.sample(rng);
                d.maneuver_angle =
                    rng.random_range(std::f64::consts::FRAC_PI_2..=1.5 * std::f64::consts::PI);
            }
        }
        d
    }
}

/// Integrates one driver at 10 Hz. Heading is read off the velocity when the
/// agent moves faster than 0.1 m/s and carried over otherwise.
pub fn simulate_driver(
    d: &DriverParams,
    frames: usize,
    case_id: u64,
    rng: &mut impl Rng,
) -> Trajectory {
    let noise = Normal::new(0.0, d.noise_std.max(0.0)).expect("finite std");
    let mut v = d.initial_speed.unwrap_or(d.target_speed);
    let mut psi = d.heading;
    let mut pos = d.start;
    let mut turned = 0.0f64;
    let mut recorded_psi = d.heading;
    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        let (vx, vy) = (v * psi.cos(), v * psi.sin());
        if v.abs() > HEADING_MIN_SPEED {
            recorded_psi = vy.atan2(vx);
        }
        let (nx, ny) = if d.noise_std > 0.0 {
            (noise.sample(rng), noise.sample(rng))
        } else {
            (0.0, 0.0)
        };
        out.push(FrameState {
            frame_id: i as i64 + 1,
            timestamp_ms: (i as i64 + 1) * FRAME_MS,
            x: pos[0] + nx,
            y: pos[1] + ny,
            vx,
            vy,
            psi: recorded_psi,
        });

        let turning = i >= d.maneuver_start && turned < d.maneuver_angle;
        let braking = turning || (i + d.brake_lead >= d.maneuver_start && turned < d.maneuver_angle);
        let t = i as f64 * DT;
        let wobble = 1.0
            + d.speed_wobble
                * (std::f64::consts::TAU * t / d.wobble_period_s + d.wobble_phase).sin();
        let target = d.target_speed * wobble * if braking { d.brake_ratio } else { 1.0 };
        v = (v + d.accel_gain * (target - v) * DT).max(0.0);
        if turning {
            let dpsi = v * d.curvature * DT;
            psi += dpsi;
            turned += dpsi.abs();
        }
        pos[0] += v * psi.cos() * DT;
        pos[1] += v * psi.sin() * DT;
    }
    Trajectory {
        case_id,
        agent_id: 1,
        length: 4.5,
        width: 1.8,
        frames: out,
    }
}

/// Deterministic synthetic scenario; agent `i` becomes case `i + 1`.
pub fn synthesize(spec: &ScenarioSpec) -> Result<Vec<Trajectory>, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let drivers: Vec<DriverParams> = match &spec.drivers {
        Some(d) => d.clone(),
        None => (0..spec.n_agents).map(|_| spec.sample_driver(&mut rng)).collect(),
    };
    Ok(drivers
        .iter()
        .enumerate()
        .map(|(i, d)| simulate_driver(d, spec.frames, i as u64 + 1, &mut rng))
        .collect())
}

/// Number of complete windows a trajectory of `len` frames yields at stride 1.
pub fn window_count(len: usize, t_h: usize, t_f: usize) -> usize {
    (len + 1).saturating_sub(t_h + t_f)
}

/// Cuts every trajectory into samples with `t_h` history rows (ending at the
/// anchor) and `t_f` future rows, in the anchor's ego frame.
pub fn window(
    trajs: &[Trajectory],
    t_h: usize,
    t_f: usize,
    stride: usize,
    scenario: ScenarioTag,
) -> Vec<Sample> {
    assert!(t_h >= 1 && t_f >= 1, "window lengths must be positive");
    let stride = stride.max(1);
    let mut out = Vec::new();
    for traj in trajs {
        let n = window_count(traj.frames.len(), t_h, t_f);
        for w in (0..n).step_by(stride) {
            let anchor = w + t_h - 1;
            out.push(make_sample(traj, anchor, t_h, t_f, scenario));
        }
    }
    out
}

fn make_sample(
    traj: &Trajectory,
    anchor: usize,
    t_h: usize,
    t_f: usize,
    scenario: ScenarioTag,
) -> Sample {
    let cur = traj.frames[anchor];
    let frame = EgoFrame::new(cur.position(), cur.psi);
    let mut history = Mat::zeros(t_h, STATE_DIM);
    for (r, f) in traj.frames[anchor + 1 - t_h..=anchor].iter().enumerate() {
        let p = frame.to_ego(f.position());
        let v = frame.vec_to_ego([f.vx, f.vy]);
        history.row_mut(r).copy_from_slice(&[p[0], p[1], v[0], v[1]]);
    }
    // The anchor maps to the origin by construction; pin it against rounding.
    history[(t_h - 1, 0)] = 0.0;
    history[(t_h - 1, 1)] = 0.0;
    let mut future = Mat::zeros(t_f, 2);
    for (r, f) in traj.frames[anchor + 1..=anchor + t_f].iter().enumerate() {
        future.row_mut(r).copy_from_slice(&frame.to_ego(f.position()));
    }
    Sample {
        case_id: traj.case_id,
        agent_id: traj.agent_id,
        anchor,
        timestamp_ms: cur.timestamp_ms,
        history,
        future,
        current: [cur.x, cur.y, cur.vx, cur.vy, cur.psi],
        frame,
        goal: [0.0; 2],
        scenario,
    }
}

/// Splits by case so that no case contributes to both sides. Cases are
/// shuffled with `seed` and assigned to the training side until it holds at
/// least `train_fraction` of the samples; at least one case always remains
/// for testing.
pub fn split(
    samples: Vec<Sample>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Sample>, Vec<Sample>), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidFraction(train_fraction));
    }
    let mut counts: BTreeMap<(u64, u64), usize> = BTreeMap::new();
    for s in &samples {
        *counts.entry((s.case_id, s.agent_id)).or_default() += 1;
    }
    let mut cases: Vec<((u64, u64), usize)> = counts.into_iter().collect();
    if cases.len() < 2 {
        return Err(DataError::TooFewCases(cases.len()));
    }
    cases.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let target = train_fraction * samples.len() as f64;
    let mut train_cases = std::collections::HashSet::new();
    let mut taken = 0usize;
    for (key, n) in &cases[..cases.len() - 1] {
        if taken as f64 + 1e-9 >= target {
            break;
        }
        train_cases.insert(*key);
        taken += n;
    }
    Ok(samples
        .into_iter()
        .partition(|s| train_cases.contains(&(s.case_id, s.agent_id))))
}

/// Groups samples into per-case runs ordered by anchor, the unit online
/// adaptation replays. Segments of one agent separated by a frame gap stay
/// apart; they are told apart by their start timestamp.
pub fn group_cases(samples: &[Sample]) -> Vec<Vec<Sample>> {
    let mut map: BTreeMap<(u64, u64, i64), Vec<Sample>> = BTreeMap::new();
    for s in samples {
        let segment_start = s.timestamp_ms - s.anchor as i64 * FRAME_MS;
        map.entry((s.case_id, s.agent_id, segment_start))
            .or_default()
            .push(s.clone());
    }
    map.into_values()
        .map(|mut v| {
            v.sort_by_key(|s| s.anchor);
            v
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioManifest {
    pub tag: ScenarioTag,
    pub file: String,
    pub trajectories: usize,
    pub frames: usize,
    pub samples: usize,
    pub seed: u64,
    pub spec: ScenarioSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub t_h: usize,
    pub t_f: usize,
    pub stride: usize,
    pub scenarios: Vec<ScenarioManifest>,
    pub config_hash: String,
    pub seed: u64,
    /// The full run configuration that produced the files.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}
