//! Possessions: ingestion, synthesis, windowing and channelized inputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{CourtSpec, MacroGoalBox};
use crate::seed;

pub const NUM_CHANNELS: usize = 4;
pub const OFFENSE_SIZE: usize = 5;
pub const DEFENSE_SIZE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Ball,
    Focal,
    Teammate,
    Opponent,
}

impl Role {
    pub fn is_offense(self) -> bool {
        matches!(self, Role::Focal | Role::Teammate)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTrack {
    pub agent_id: String,
    pub role: Role,
    pub points: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Possession {
    pub id: String,
    pub tracks: Vec<RawTrack>,
}

impl Possession {
    pub fn length_frames(&self) -> usize {
        self.tracks.first().map_or(0, |t| t.points.len())
    }

    pub fn ball(&self) -> Option<&RawTrack> {
        self.tracks.iter().find(|t| t.role == Role::Ball)
    }

    /// Offensive tracks in file order.
    pub fn offense(&self) -> impl Iterator<Item = &RawTrack> {
        self.tracks.iter().filter(|t| t.role.is_offense())
    }

    pub fn defense(&self) -> impl Iterator<Item = &RawTrack> {
        self.tracks.iter().filter(|t| t.role == Role::Opponent)
    }
}

/// Input channels of the occupancy encoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Channel {
    Ball = 0,
    Focal = 1,
    Teammates = 2,
    Opponents = 3,
}

/// Sparse occupancy of one step: per channel, `(cell index, count)` pairs
/// sorted by cell index.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepState {
    pub channels: [Vec<(u32, u16)>; NUM_CHANNELS],
}

impl StepState {
    pub fn occupied(&self, ch: Channel) -> usize {
        self.channels[ch as usize].len()
    }

    pub fn mass(&self, ch: Channel) -> usize {
        self.channels[ch as usize].iter().map(|&(_, c)| c as usize).sum()
    }

    pub fn total_mass(&self) -> usize {
        self.channels.iter().flatten().map(|&(_, c)| c as usize).sum()
    }

    /// Writes the dense `(4, rows, cols)` encoding into `out`, which must
    /// be zeroed and of length `4 · rows · cols`.
    pub fn fill_dense(&self, num_cells: usize, out: &mut [f64]) {
        for (c, cells) in self.channels.iter().enumerate() {
            for &(idx, n) in cells {
                out[c * num_cells + idx as usize] += n as f64;
            }
        }
    }
}

/// A non-focal agent at the subsampled rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPath {
    pub agent_id: String,
    pub channel: Channel,
    pub positions: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingSequence {
    pub possession_id: String,
    pub focal_agent: String,
    pub t0: usize,
    pub states: Vec<StepState>,
    pub raw_positions: Vec<[f64; 2]>,
    pub raw_frame_positions: Vec<[f64; 2]>,
    pub others: Vec<AgentPath>,
}

impl TrainingSequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOptions {
    pub court: CourtSpec,
    /// How far outside the court a point may lie before ingestion fails.
    pub tolerance_ft: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            court: CourtSpec::default(),
            tolerance_ft: 5.0,
        }
    }
}

pub fn ingest(path: &Path, opts: &IngestOptions) -> Result<Vec<Possession>> {
    parse_possessions(BufReader::new(File::open(path)?), opts)
}

pub fn parse_possessions<R: BufRead>(reader: R, opts: &IngestOptions) -> Result<Vec<Possession>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let p: Possession = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            reason: e.to_string(),
        })?;
        validate_possession(&p, opts).map_err(|e| match e {
            Error::Parse { reason, .. } => Error::Parse { line: lineno, reason },
            Error::Geometry { reason, .. } => Error::Geometry { line: lineno, reason },
            other => other,
        })?;
        let len = p.length_frames();
        if !(50..=300).contains(&len) {
            log::warn!("line {lineno}: possession {} has {len} frames, outside 50..=300", p.id);
        }
        out.push(p);
    }
    Ok(out)
}

fn parse_err(reason: impl Into<String>) -> Error {
    Error::Parse {
        line: 0,
        reason: reason.into(),
    }
}

pub fn validate_possession(p: &Possession, opts: &IngestOptions) -> Result<()> {
    let balls = p.tracks.iter().filter(|t| t.role == Role::Ball).count();
    match balls {
        0 => return Err(parse_err("missing ball track")),
        1 => {}
        _ => return Err(parse_err("multiple ball tracks")),
    }
    let focal = p.tracks.iter().filter(|t| t.role == Role::Focal).count();
    let offense = p.offense().count();
    let defense = p.defense().count();
    if offense != OFFENSE_SIZE || defense != DEFENSE_SIZE {
        return Err(parse_err(format!(
            "expected {OFFENSE_SIZE} offensive and {DEFENSE_SIZE} defensive players, found {offense} and {defense}"
        )));
    }
    if focal > OFFENSE_SIZE {
        return Err(parse_err("too many focal tracks"));
    }
    let mut ids = BTreeSet::new();
    for t in &p.tracks {
        if !ids.insert(t.agent_id.as_str()) {
            return Err(parse_err(format!("duplicate agent id {}", t.agent_id)));
        }
    }
    let len = p.length_frames();
    let c = &opts.court;
    let diag = c.width_ft.hypot(c.height_ft);
    let tol = opts.tolerance_ft;
    for t in &p.tracks {
        if t.points.is_empty() {
            return Err(parse_err(format!("track {} has no points", t.agent_id)));
        }
        if t.points.len() != len {
            return Err(parse_err(format!(
                "track {} has {} points, expected {len}",
                t.agent_id,
                t.points.len()
            )));
        }
        for (f, pt) in t.points.iter().enumerate() {
            if !(pt[0].is_finite() && pt[1].is_finite()) {
                return Err(parse_err(format!("track {} frame {f}: non-finite point", t.agent_id)));
            }
            if pt[0] < -tol || pt[0] > c.width_ft + tol || pt[1] < -tol || pt[1] > c.height_ft + tol {
                return Err(Error::Geometry {
                    line: 0,
                    reason: format!("track {} frame {f}: point ({}, {}) leaves the court", t.agent_id, pt[0], pt[1]),
                });
            }
        }
        for (f, w) in t.points.windows(2).enumerate() {
            if (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]) >= diag {
                return Err(Error::Geometry {
                    line: 0,
                    reason: format!("track {} frame {}: jump exceeds the court diagonal", t.agent_id, f + 1),
                });
            }
        }
    }
    Ok(())
}

/// One possession per line, in the ingest format.
pub fn write_possessions<W: Write>(w: W, possessions: &[Possession]) -> Result<()> {
    let mut w = BufWriter::new(w);
    for p in possessions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_possessions(path: &Path, possessions: &[Possession]) -> Result<()> {
    write_possessions(File::create(path)?, possessions)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub sequence_steps: usize,
    pub windows_per_player: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            sequence_steps: 50,
            windows_per_player: 1,
        }
    }
}

impl WindowConfig {
    pub fn window_frames(&self, spec: &CourtSpec) -> usize {
        self.sequence_steps * spec.subsample_stride
    }
}

fn channel_of(role: Role) -> Channel {
    match role {
        Role::Ball => Channel::Ball,
        Role::Focal | Role::Teammate => Channel::Teammates,
        Role::Opponent => Channel::Opponents,
    }
}

/// Windows every offensive player of `possession` as focal agent.
pub fn window<R: Rng>(possession: &Possession, spec: &CourtSpec, cfg: &WindowConfig, rng: &mut R) -> Vec<TrainingSequence> {
    let frames = cfg.window_frames(spec);
    let len = possession.length_frames();
    if len < frames || frames == 0 {
        return Vec::new();
    }
    let stride = spec.subsample_stride;
    let mut out = Vec::new();
    for focal in possession.offense() {
        for _ in 0..cfg.windows_per_player {
            let t0 = rng.gen_range(0..=len - frames);
            let raw_frame_positions = focal.points[t0..t0 + frames].to_vec();
            let raw_positions: Vec<[f64; 2]> = (0..cfg.sequence_steps).map(|k| raw_frame_positions[k * stride]).collect();
            let others: Vec<AgentPath> = possession
                .tracks
                .iter()
                .filter(|t| t.agent_id != focal.agent_id)
                .map(|t| AgentPath {
                    agent_id: t.agent_id.clone(),
                    channel: channel_of(t.role),
                    positions: (0..cfg.sequence_steps).map(|k| t.points[t0 + k * stride]).collect(),
                })
                .collect();
            let states = channelize(&raw_positions, &others, spec);
            out.push(TrainingSequence {
                possession_id: possession.id.clone(),
                focal_agent: focal.agent_id.clone(),
                t0,
                states,
                raw_positions,
                raw_frame_positions,
                others,
            });
        }
    }
    out
}

fn push_cell(cells: &mut Vec<(u32, u16)>, idx: u32) {
    match cells.binary_search_by_key(&idx, |&(c, _)| c) {
        Ok(i) => cells[i].1 += 1,
        Err(i) => cells.insert(i, (idx, 1)),
    }
}

/// Occupancy for a single step given the focal position and the others.
pub fn step_state(focal: [f64; 2], others: &[AgentPath], step: usize, spec: &CourtSpec) -> StepState {
    let mut s = StepState::default();
    let cell = |p: [f64; 2]| spec.cell_index(spec.pos_to_cell(p[0], p[1])) as u32;
    push_cell(&mut s.channels[Channel::Focal as usize], cell(focal));
    for a in others {
        let k = step.min(a.positions.len().saturating_sub(1));
        if let Some(&p) = a.positions.get(k) {
            push_cell(&mut s.channels[a.channel as usize], cell(p));
        }
    }
    s
}

/// Per-step occupancy: ball, focal player, teammates, opponents.
pub fn channelize(focal: &[[f64; 2]], others: &[AgentPath], spec: &CourtSpec) -> Vec<StepState> {
    focal.iter().enumerate().map(|(k, &p)| step_state(p, others, k, spec)).collect()
}

/// Windows a whole corpus. Each possession draws window starts from its own
/// stream so the result is independent of scheduling.
pub fn build_sequences(possessions: &[Possession], spec: &CourtSpec, cfg: &WindowConfig, seed: u64) -> Vec<TrainingSequence> {
    possessions
        .par_iter()
        .map(|p| {
            let mut rng = seed::rng(seed, &["window", &p.id]);
            window(p, spec, cfg, &mut rng)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_possessions: usize,
    pub seed: u64,
    pub length_frames: (usize, usize),
    pub waypoint_dwell_frames: (usize, usize),
    /// Heading relaxation gain; each frame the heading moves a fraction
    /// `1 − exp(−curvature)` of the way to the goal bearing.
    pub curvature: f64,
    pub speed_ft_per_frame: (f64, f64),
    pub noise_std: f64,
    /// Probability that a new goal is drawn from the common spots list
    /// rather than uniformly over all boxes.
    pub spot_bias: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_possessions: 440,
            seed: 0,
            length_frames: (200, 300),
            waypoint_dwell_frames: (60, 140),
            curvature: 0.3,
            speed_ft_per_frame: (0.6, 1.4),
            noise_std: 0.02,
            spot_bias: 0.6,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, spec: &CourtSpec) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.length_frames.0 == 0 || self.length_frames.0 > self.length_frames.1 {
            return bad("length_frames range is empty");
        }
        if self.waypoint_dwell_frames.0 > self.waypoint_dwell_frames.1 {
            return bad("waypoint_dwell_frames range is empty");
        }
        let (lo, hi) = self.speed_ft_per_frame;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("speed_ft_per_frame must be a nonempty positive range");
        }
        if hi > spec.velocity_radius_cells as f64 * spec.micro_cell_ft {
            return bad("speeds exceed the velocity grid");
        }
        if self.curvature.is_nan() || self.curvature < 0.0 {
            return bad("curvature must be nonnegative");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.spot_bias) {
            return bad("spot_bias must lie in [0, 1]");
        }
        Ok(())
    }
}

/// A stretch of frames where a synthetic player stood at a box center.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dwell {
    pub goal: MacroGoalBox,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlayerTruth {
    pub agent_id: String,
    pub dwells: Vec<Dwell>,
}

const BASKET: [f64; 2] = [25.0, 5.25];
const SPOTS: [[f64; 2]; 10] = [
    [3.0, 3.0],
    [47.0, 3.0],
    [8.0, 20.0],
    [42.0, 20.0],
    [25.0, 28.0],
    [17.0, 19.0],
    [33.0, 19.0],
    [19.0, 8.0],
    [31.0, 8.0],
    [25.0, 12.0],
];

fn sample_goal<R: Rng>(rng: &mut R, spec: &CourtSpec, cfg: &SynthConfig, avoid: Option<MacroGoalBox>) -> MacroGoalBox {
    loop {
        let g = if rng.gen::<f64>() < cfg.spot_bias {
            // Spots are given on a 50×45 court; scale to the actual extent.
            let s = SPOTS[rng.gen_range(0..SPOTS.len())];
            spec.pos_to_macro_box(s[0] * spec.width_ft / 50.0, s[1] * spec.height_ft / 45.0)
        } else {
            MacroGoalBox(rng.gen_range(0..spec.num_macro_boxes()))
        };
        if Some(g) != avoid {
            return g;
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let t = std::f64::consts::TAU;
    let mut a = a % t;
    if a > std::f64::consts::PI {
        a -= t;
    } else if a < -std::f64::consts::PI {
        a += t;
    }
    a
}

fn player_track<R: Rng>(rng: &mut R, len: usize, spec: &CourtSpec, cfg: &SynthConfig) -> (Vec<[f64; 2]>, Vec<Dwell>) {
    let alpha = if cfg.curvature.is_infinite() { 1.0 } else { 1.0 - (-cfg.curvature).exp() };
    let mut pts = Vec::with_capacity(len);
    let mut dwells = Vec::new();
    let mut goal = sample_goal(rng, spec, cfg, None);
    let c = spec.macro_box_center(goal).expect("sampled box is in range");
    let mut pos = [c.0, c.1];
    let mut dwell = rng.gen_range(cfg.waypoint_dwell_frames.0..=cfg.waypoint_dwell_frames.1);
    loop {
        if dwell > 0 {
            let start = pts.len();
            let n = dwell.min(len - pts.len());
            pts.extend(std::iter::repeat(pos).take(n));
            if n > 0 {
                dwells.push(Dwell {
                    goal,
                    start,
                    end: start + n - 1,
                });
            }
        }
        if pts.len() >= len {
            break;
        }
        goal = sample_goal(rng, spec, cfg, Some(goal));
        let target = spec.macro_box_center(goal).expect("sampled box is in range");
        let speed = rng.gen_range(cfg.speed_ft_per_frame.0..=cfg.speed_ft_per_frame.1);
        let bearing = (target.1 - pos[1]).atan2(target.0 - pos[0]);
        let mut heading = bearing + rng.gen_range(-1.2..1.2);
        let mut moving = 0usize;
        while pts.len() < len {
            let (dx, dy) = (target.0 - pos[0], target.1 - pos[1]);
            let dist = dx.hypot(dy);
            if dist <= speed {
                pos = [target.0, target.1];
                pts.push(pos);
                break;
            }
            // Tighten the turn close to the goal so the walker cannot orbit it.
            let mut a = alpha.max((2.0 * speed / dist).min(1.0));
            if moving > 300 {
                a = 1.0;
            }
            heading += a * wrap_angle(dy.atan2(dx) - heading);
            let ((x, y), _) = spec.clamp_pos(pos[0] + speed * heading.cos(), pos[1] + speed * heading.sin());
            pos = [x, y];
            pts.push(pos);
            moving += 1;
        }
        dwell = rng.gen_range(cfg.waypoint_dwell_frames.0..=cfg.waypoint_dwell_frames.1);
    }
    // The arrival frame already sits at the center; fold it into the dwell.
    for d in dwells.iter_mut() {
        if d.start > 0 && pts[d.start - 1] == pts[d.start] {
            d.start -= 1;
        }
    }
    (pts, dwells)
}

fn relax_toward(pos: &mut [f64; 2], target: [f64; 2], gain: f64) {
    pos[0] += gain * (target[0] - pos[0]);
    pos[1] += gain * (target[1] - pos[1]);
}

fn synth_one(cfg: &SynthConfig, spec: &CourtSpec, index: usize) -> (Possession, Vec<PlayerTruth>) {
    let id = format!("syn{}-{index:06}", cfg.seed);
    let mut rng = seed::rng(cfg.seed, &["synth", &id]);
    let len = rng.gen_range(cfg.length_frames.0..=cfg.length_frames.1);
    let mut offense = Vec::new();
    let mut truth = Vec::new();
    for j in 0..OFFENSE_SIZE {
        let (pts, dwells) = player_track(&mut rng, len, spec, cfg);
        let agent_id = format!("o{j}");
        truth.push(PlayerTruth {
            agent_id: agent_id.clone(),
            dwells,
        });
        offense.push((agent_id, pts));
    }
    let sx = spec.width_ft / 50.0;
    let sy = spec.height_ft / 45.0;
    let basket = [BASKET[0] * sx, BASKET[1] * sy];

    let mut defense = Vec::new();
    for (j, (_, off)) in offense.iter().enumerate() {
        let gain = rng.gen_range(0.15..0.35);
        let gap: f64 = rng.gen_range(2.0..4.0);
        let mut pts = Vec::with_capacity(len);
        let mut pos = off[0];
        for p in off {
            let (dx, dy) = (basket[0] - p[0], basket[1] - p[1]);
            let d = dx.hypot(dy).max(1e-9);
            let g = gap.min(d);
            relax_toward(&mut pos, [p[0] + g * dx / d, p[1] + g * dy / d], gain);
            pts.push(pos);
        }
        defense.push((format!("d{j}"), pts));
    }

    let mut ball = Vec::with_capacity(len);
    let mut handler = rng.gen_range(0..OFFENSE_SIZE);
    let mut next_switch = rng.gen_range(40..=100);
    let mut pos = offense[handler].1[0];
    for f in 0..len {
        if f == next_switch {
            handler = (handler + rng.gen_range(1..OFFENSE_SIZE)) % OFFENSE_SIZE;
            next_switch = f + rng.gen_range(40..=100);
        }
        let h = offense[handler].1[f];
        relax_toward(&mut pos, [h[0] + 0.5, h[1] + 0.5], 0.4);
        ball.push(pos);
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let jitter = |pts: Vec<[f64; 2]>, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<[f64; 2]> {
        if cfg.noise_std == 0.0 {
            return pts;
        }
        pts.into_iter()
            .map(|p| {
                let ((x, y), _) = spec.clamp_pos(p[0] + noise.sample(rng), p[1] + noise.sample(rng));
                [x, y]
            })
            .collect()
    };

    let mut tracks = Vec::with_capacity(11);
    tracks.push(RawTrack {
        agent_id: "ball".into(),
        role: Role::Ball,
        points: jitter(ball, &mut rng),
    });
    for (agent_id, pts) in offense {
        tracks.push(RawTrack {
            agent_id,
            role: Role::Teammate,
            points: jitter(pts, &mut rng),
        });
    }
    for (agent_id, pts) in defense {
        tracks.push(RawTrack {
            agent_id,
            role: Role::Opponent,
            points: jitter(pts, &mut rng),
        });
    }
    (Possession { id, tracks }, truth)
}

/// Synthetic possessions together with the generator's dwell records.
pub fn synthesize_with_truth(cfg: &SynthConfig, spec: &CourtSpec) -> Result<Vec<(Possession, Vec<PlayerTruth>)>> {
    spec.validate()?;
    cfg.validate(spec)?;
    Ok((0..cfg.n_possessions).into_par_iter().map(|i| synth_one(cfg, spec, i)).collect())
}

pub fn synthesize(cfg: &SynthConfig, spec: &CourtSpec) -> Result<Vec<Possession>> {
    Ok(synthesize_with_truth(cfg, spec)?.into_iter().map(|(p, _)| p).collect())
}

/// Partitions `items` by the possession key so no possession lands on both
/// sides. The holdout receives `round(fraction · possessions)` possessions.
pub fn split_by<T, F>(items: Vec<T>, key: F, holdout_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)>
where
    F: Fn(&T) -> &str,
{
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Config("holdout fraction must lie strictly between 0 and 1".into()));
    }
    let ids: BTreeSet<String> = items.iter().map(|t| key(t).to_string()).collect();
    let mut ids: Vec<String> = ids.into_iter().collect();
    let n_hold = (holdout_fraction * ids.len() as f64).round() as usize;
    if n_hold == 0 || n_hold >= ids.len() {
        return Err(Error::Data("degenerate split".into()));
    }
    ids.shuffle(&mut seed::rng(seed, &["split"]));
    let hold: BTreeMap<&str, ()> = ids[..n_hold].iter().map(|s| (s.as_str(), ())).collect();
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for it in items {
        if hold.contains_key(key(&it)) {
            holdout.push(it);
        } else {
            train.push(it);
        }
    }
    Ok((train, holdout))
}

pub fn split(sequences: Vec<TrainingSequence>, holdout_fraction: f64, seed: u64) -> Result<(Vec<TrainingSequence>, Vec<TrainingSequence>)> {
    split_by(sequences, |s| s.possession_id.as_str(), holdout_fraction, seed)
}
