//! Weak supervision extracted from focal tracks: micro actions, macro goals
//! from stationary-point segmentation, and straight-line attention targets.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{round_half_toward_zero, CourtSpec, MacroGoalBox, VelocityAction};
use crate::seed;
use crate::trajdata::TrainingSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub stationary_speed_ft_per_raw_frame: f64,
    pub min_segment_steps: usize,
    pub magnitude_range: (usize, usize),
    pub seed: u64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            stationary_speed_ft_per_raw_frame: 0.25,
            min_segment_steps: 15,
            magnitude_range: (1, 7),
            seed: 0,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self, spec: &CourtSpec) -> Result<()> {
        if !(self.stationary_speed_ft_per_raw_frame.is_finite() && self.stationary_speed_ft_per_raw_frame > 0.0) {
            return Err(Error::Config("labels: stationary threshold must be positive".into()));
        }
        if self.min_segment_steps == 0 {
            return Err(Error::Config("labels: min_segment_steps must be positive".into()));
        }
        let (lo, hi) = self.magnitude_range;
        if lo == 0 || lo > hi || hi > spec.velocity_radius_cells {
            return Err(Error::Config("labels: magnitude_range must lie within 1..=velocity radius".into()));
        }
        Ok(())
    }
}

/// Micro-action labels of one window. `actions[k][j]` is the flattened
/// action of raw frame `stride·k + j`; `padded[k][j]` marks labels that
/// repeat the last available displacement at the window end.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroLabels {
    pub actions: Vec<Vec<usize>>,
    pub padded: Vec<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakLabels {
    pub micro: Vec<Vec<usize>>,
    pub micro_padded: Vec<Vec<bool>>,
    pub macro_goals: Vec<MacroGoalBox>,
    pub attention: Vec<usize>,
    pub stationary: Vec<usize>,
}

impl WeakLabels {
    pub fn len(&self) -> usize {
        self.micro.len()
    }

    pub fn is_empty(&self) -> bool {
        self.micro.is_empty()
    }
}

pub fn micro_labels(raw_frame_positions: &[[f64; 2]], spec: &CourtSpec) -> MicroLabels {
    let stride = spec.subsample_stride;
    let heads = spec.lookahead_steps;
    let steps = raw_frame_positions.len() / stride;
    let n_disp = raw_frame_positions.len().saturating_sub(1);
    let mut actions = Vec::with_capacity(steps);
    let mut padded = Vec::with_capacity(steps);
    for k in 0..steps {
        let mut a = Vec::with_capacity(heads);
        let mut p = Vec::with_capacity(heads);
        for j in 0..heads {
            let t = k * stride + j;
            if n_disp == 0 {
                a.push(spec.stationary_index());
                p.push(true);
                continue;
            }
            let d = t.min(n_disp - 1);
            let (q, r) = (raw_frame_positions[d], raw_frame_positions[d + 1]);
            a.push(spec.action_index(spec.displacement_to_action(r[0] - q[0], r[1] - q[1])));
            p.push(d != t);
        }
        actions.push(a);
        padded.push(p);
    }
    MicroLabels { actions, padded }
}

/// Per-frame speed: backward difference, with frame 0 taking frame 1's value.
pub fn frame_speeds(positions: &[[f64; 2]]) -> Vec<f64> {
    let mut s: Vec<f64> = (0..positions.len())
        .map(|f| {
            if f == 0 {
                0.0
            } else {
                let (a, b) = (positions[f - 1], positions[f]);
                (b[0] - a[0]).hypot(b[1] - a[1])
            }
        })
        .collect();
    if s.len() > 1 {
        s[0] = s[1];
    }
    s
}

/// Midpoints of maximal slow runs, followed by the final frame.
pub fn find_stationary(raw_frame_positions: &[[f64; 2]], cfg: &SegmentationConfig) -> Vec<usize> {
    let speeds = frame_speeds(raw_frame_positions);
    let mut out = Vec::new();
    let mut run_start = None;
    for (f, &v) in speeds.iter().enumerate() {
        let slow = v < cfg.stationary_speed_ft_per_raw_frame;
        match (slow, run_start) {
            (true, None) => run_start = Some(f),
            (false, Some(s)) => {
                out.push((s + f - 1) / 2);
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        out.push((s + speeds.len() - 1) / 2);
    }
    if let Some(last) = raw_frame_positions.len().checked_sub(1) {
        if out.last() != Some(&last) {
            out.push(last);
        }
    }
    out
}

/// Runs of equal labels as `(label, length)`.
pub fn segments<T: PartialEq + Copy>(stream: &[T]) -> Vec<(T, usize)> {
    let mut out: Vec<(T, usize)> = Vec::new();
    for &v in stream {
        match out.last_mut() {
            Some((l, n)) if *l == v => *n += 1,
            _ => out.push((v, 1)),
        }
    }
    out
}

/// Merges pieces shorter than `min_len` into the following piece; a short
/// final piece is absorbed by its predecessor.
pub fn merge_short_segments<T: PartialEq + Copy>(stream: &[T], min_len: usize) -> Vec<T> {
    let mut runs = segments(stream);
    let mut i = 0;
    while i < runs.len() {
        if runs[i].1 < min_len && i + 1 < runs.len() {
            runs[i + 1].1 += runs[i].1;
            runs.remove(i);
            if i > 0 && runs[i - 1].0 == runs[i].0 {
                runs[i - 1].1 += runs[i].1;
                runs.remove(i);
                i -= 1;
            }
        } else {
            i += 1;
        }
    }
    if runs.len() > 1 && runs[runs.len() - 1].1 < min_len {
        let (_, n) = runs.pop().expect("nonempty");
        runs.last_mut().expect("nonempty").1 += n;
    }
    runs.into_iter().flat_map(|(l, n)| std::iter::repeat(l).take(n)).collect()
}

pub fn macro_labels(
    raw_frame_positions: &[[f64; 2]],
    stationary_points: &[usize],
    spec: &CourtSpec,
    cfg: &SegmentationConfig,
) -> Vec<MacroGoalBox> {
    let stride = spec.subsample_stride;
    let steps = raw_frame_positions.len() / stride;
    let Some(&last) = stationary_points.last() else {
        return Vec::new();
    };
    let raw: Vec<MacroGoalBox> = (0..steps)
        .map(|k| {
            let t = k * stride;
            let sp = stationary_points.iter().copied().find(|&s| s > t).unwrap_or(last);
            let p = raw_frame_positions[sp];
            spec.pos_to_macro_box(p[0], p[1])
        })
        .collect();
    merge_short_segments(&raw, cfg.min_segment_steps)
}

/// Straight-line action of `magnitude` cells from `pos` toward the center
/// of `goal`, or the stationary action inside the goal box.
pub fn attention_action(spec: &CourtSpec, pos: [f64; 2], goal: MacroGoalBox, magnitude: usize) -> VelocityAction {
    if spec.macro_box_contains(goal, pos[0], pos[1]) {
        return spec.stationary_action();
    }
    let Ok((cx, cy)) = spec.macro_box_center(goal) else {
        return spec.stationary_action();
    };
    let (dx, dy) = (cx - pos[0], cy - pos[1]);
    let d = dx.hypot(dy);
    if d == 0.0 {
        return spec.stationary_action();
    }
    let r = spec.velocity_radius_cells as i64;
    let m = magnitude as f64;
    VelocityAction {
        dx: round_half_toward_zero(m * dx / d).clamp(-r, r) as i32,
        dy: round_half_toward_zero(m * dy / d).clamp(-r, r) as i32,
    }
}

pub fn attention_labels<R: Rng>(
    raw_positions: &[[f64; 2]],
    macro_stream: &[MacroGoalBox],
    spec: &CourtSpec,
    cfg: &SegmentationConfig,
    rng: &mut R,
) -> Vec<usize> {
    let (lo, hi) = cfg.magnitude_range;
    raw_positions
        .iter()
        .zip(macro_stream)
        .map(|(&p, &g)| {
            let m = rng.gen_range(lo..=hi);
            spec.action_index(attention_action(spec, p, g, m))
        })
        .collect()
}

pub fn attention_rng(cfg: &SegmentationConfig, seq: &TrainingSequence) -> rand_chacha::ChaCha8Rng {
    seed::rng(cfg.seed, &["attention", &seq.possession_id, &seq.focal_agent])
}

pub fn label_sequence(seq: &TrainingSequence, spec: &CourtSpec, cfg: &SegmentationConfig) -> WeakLabels {
    let micro = micro_labels(&seq.raw_frame_positions, spec);
    let stationary = find_stationary(&seq.raw_frame_positions, cfg);
    let macro_goals = macro_labels(&seq.raw_frame_positions, &stationary, spec, cfg);
    let attention = attention_labels(&seq.raw_positions, &macro_goals, spec, cfg, &mut attention_rng(cfg, seq));
    WeakLabels {
        micro: micro.actions,
        micro_padded: micro.padded,
        macro_goals,
        attention,
        stationary,
    }
}

pub fn label_all(seqs: &[TrainingSequence], spec: &CourtSpec, cfg: &SegmentationConfig) -> Vec<WeakLabels> {
    seqs.par_iter().map(|s| label_sequence(s, spec, cfg)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub possession_id: String,
    pub focal_agent: String,
    pub t0: usize,
    #[serde(flatten)]
    pub labels: WeakLabels,
}

pub fn write_sidecar<W: Write>(w: W, seqs: &[TrainingSequence], labels: &[WeakLabels]) -> Result<()> {
    let mut w = BufWriter::new(w);
    for (s, l) in seqs.iter().zip(labels) {
        let rec = LabelRecord {
            possession_id: s.possession_id.clone(),
            focal_agent: s.focal_agent.clone(),
            t0: s.t0,
            labels: l.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_sidecar(path: &Path, seqs: &[TrainingSequence], labels: &[WeakLabels]) -> Result<()> {
    write_sidecar(File::create(path)?, seqs, labels)
}

pub fn read_sidecar(path: &Path) -> Result<Vec<LabelRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
