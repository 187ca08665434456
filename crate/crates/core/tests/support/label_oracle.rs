//! Hand-built focal tracks and brute-force label recomputations, shared by
//! the weak-label tests and the acceptance suite.

#![allow(dead_code)]

use hpn_core::grid::{CourtSpec, MacroGoalBox};
use hpn_core::weak_labels::{self, SegmentationConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FRAMES: usize = 200;

pub struct Case {
    pub name: &'static str,
    pub points: Vec<[f64; 2]>,
}

fn dwell(p: [f64; 2], n: usize) -> Vec<[f64; 2]> {
    vec![p; n]
}

/// Straight motion from `from` with per-frame step `v`, `n` frames.
fn glide(from: [f64; 2], v: [f64; 2], n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|f| [from[0] + v[0] * f as f64, from[1] + v[1] * f as f64]).collect()
}

fn concat(parts: Vec<Vec<[f64; 2]>>) -> Vec<[f64; 2]> {
    let out: Vec<_> = parts.into_iter().flatten().collect();
    assert_eq!(out.len(), FRAMES);
    out
}

fn zigzag(a: [f64; 2], b: [f64; 2], n: usize) -> Vec<[f64; 2]> {
    (0..n).map(|f| if f % 2 == 0 { a } else { b }).collect()
}

pub fn cases() -> Vec<Case> {
    let c = |name, points| Case { name, points };
    vec![
        c("dwell_center", dwell([25.0, 22.5], FRAMES)),
        c("dwell_box42", dwell([12.5, 20.0], FRAMES)),
        c("dwell_origin", dwell([0.0, 0.0], FRAMES)),
        c("dwell_far_corner", dwell([49.999, 44.999], FRAMES)),
        c("motion_east", glide([2.0, 10.0], [0.2, 0.0], FRAMES)),
        c("motion_north_fast", glide([10.0, 1.0], [0.0, 0.2], FRAMES)),
        c("motion_diagonal", glide([1.0, 1.0], [0.2, 0.2], FRAMES)),
        c("motion_west_1cell", glide([49.5, 30.5], [-0.24, 0.0], FRAMES)),
        c("motion_exact_cells", glide([0.5, 0.5], [1.0, 0.0], 45).into_iter().chain(glide([45.5, 0.5], [0.0, 1.0], 155).into_iter().map(|p| [p[0], p[1].min(44.5)])).collect()),
        c("motion_half_cell_ties", glide([1.0, 1.0], [0.5, -0.5], FRAMES).into_iter().map(|p| [p[0] * 0.2, p[1].abs() * 0.2]).collect()),
        c(
            "two_dwells",
            concat(vec![dwell([12.5, 2.5], 80), glide([12.5, 2.5], [0.75, 0.75], 25), dwell([31.25, 21.25], 95)]),
        ),
        c(
            "two_dwells_long_first",
            concat(vec![dwell([2.5, 2.5], 160), glide([2.5, 2.5], [1.0, 0.0], 20), dwell([22.5, 2.5], 20)]),
        ),
        c(
            "dwell_move_dwell_move",
            concat(vec![dwell([7.0, 7.0], 60), glide([7.0, 7.0], [1.0, 0.5], 20), dwell([27.0, 17.0], 70), glide([27.0, 17.0], [-0.5, 1.0], 50)]),
        ),
        c(
            "three_short_dwells",
            concat(vec![dwell([5.0, 40.0], 30), glide([5.0, 40.0], [1.0, 0.0], 10), dwell([15.0, 40.0], 30), glide([15.0, 40.0], [1.0, -1.0], 10), dwell([25.0, 30.0], 30), glide([25.0, 30.0], [0.0, -1.0], 90)]),
        ),
        c("clipped_fast_east", zigzag([0.5, 20.0], [12.0, 20.0], FRAMES)),
        c("clipped_diagonal", zigzag([3.0, 3.0], [40.0, 38.0], FRAMES)),
        c("boundary_left_edge", glide([0.0, 0.0], [0.0, 0.2], FRAMES)),
        c("boundary_right_edge", glide([50.0, 44.0], [0.0, -0.2], FRAMES)),
        c("boundary_box_edges", glide([4.999, 5.0], [0.025, 0.025], FRAMES)),
        c("near_threshold_jitter", (0..FRAMES).map(|f| [20.0 + if f % 2 == 0 { 0.0 } else { 0.249 }, 20.0]).collect()),
        c("above_threshold_jitter", (0..FRAMES).map(|f| [20.0 + if f % 2 == 0 { 0.0 } else { 0.251 }, 20.0]).collect()),
        c("single_moving_first_frame", concat(vec![vec![[30.0, 30.0]], dwell([30.6, 30.0], 199)])),
        c("stationary_last_frame_only", concat(vec![glide([5.0, 5.0], [0.3, 0.1], 199), vec![[5.0 + 0.3 * 198.0, 5.0 + 0.1 * 198.0]]])),
    ]
}

fn bf_round(v: f64) -> i64 {
    let t = v.trunc();
    let frac = (v - t).abs();
    if frac > 0.5 {
        (t + v.signum()) as i64
    } else {
        t as i64
    }
}

fn bf_action(spec: &CourtSpec, dx: f64, dy: f64) -> usize {
    let r = spec.velocity_radius_cells as i64;
    let side = 2 * r + 1;
    let ax = bf_round(dx / spec.micro_cell_ft).max(-r).min(r);
    let ay = bf_round(dy / spec.micro_cell_ft).max(-r).min(r);
    ((ay + r) * side + (ax + r)) as usize
}

pub fn bf_micro(spec: &CourtSpec, pts: &[[f64; 2]]) -> Vec<Vec<usize>> {
    let mut out = vec![];
    for k in 0..pts.len() / spec.subsample_stride {
        let mut row = vec![];
        for j in 0..spec.lookahead_steps {
            let mut t = k * spec.subsample_stride + j;
            while t + 1 >= pts.len() {
                t -= 1;
            }
            row.push(bf_action(spec, pts[t + 1][0] - pts[t][0], pts[t + 1][1] - pts[t][1]));
        }
        out.push(row);
    }
    out
}

pub fn bf_stationary(pts: &[[f64; 2]], thr: f64) -> Vec<usize> {
    let n = pts.len();
    let speed = |f: usize| {
        let f = if f == 0 { 1 } else { f };
        ((pts[f][0] - pts[f - 1][0]).powi(2) + (pts[f][1] - pts[f - 1][1]).powi(2)).sqrt()
    };
    let slow: Vec<bool> = (0..n).map(|f| speed(f) < thr).collect();
    let mut out = vec![];
    for s in 0..n {
        if slow[s] && (s == 0 || !slow[s - 1]) {
            let mut e = s;
            while e + 1 < n && slow[e + 1] {
                e += 1;
            }
            out.push((s + e) / 2);
        }
    }
    if out.last() != Some(&(n - 1)) {
        out.push(n - 1);
    }
    out
}

fn bf_box(spec: &CourtSpec, p: [f64; 2]) -> usize {
    let cols = (spec.width_ft / spec.macro_box_ft) as i64;
    let rows = (spec.height_ft / spec.macro_box_ft) as i64;
    let c = ((p[0] / spec.macro_box_ft).floor() as i64).max(0).min(cols - 1);
    let r = ((p[1] / spec.macro_box_ft).floor() as i64).max(0).min(rows - 1);
    (r * cols + c) as usize
}

fn bf_runs(v: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = vec![];
    let mut s = 0;
    for i in 1..=v.len() {
        if i == v.len() || v[i] != v[s] {
            out.push((v[s], s, i));
            s = i;
        }
    }
    out
}

pub fn bf_macro(spec: &CourtSpec, pts: &[[f64; 2]], stationary: &[usize], min_len: usize) -> Vec<usize> {
    let steps = pts.len() / spec.subsample_stride;
    let mut labels: Vec<usize> = (0..steps)
        .map(|k| {
            let t = k * spec.subsample_stride;
            let sp = stationary.iter().copied().filter(|&s| s > t).min().unwrap_or(*stationary.last().unwrap());
            bf_box(spec, pts[sp])
        })
        .collect();
    loop {
        let runs = bf_runs(&labels);
        let short = runs.iter().take(runs.len() - 1).position(|r| r.2 - r.1 < min_len);
        match short {
            Some(i) => {
                let next = runs[i + 1].0;
                for l in &mut labels[runs[i].1..runs[i].2] {
                    *l = next;
                }
            }
            None => break,
        }
    }
    let runs = bf_runs(&labels);
    if runs.len() > 1 {
        let last = runs[runs.len() - 1];
        if last.2 - last.1 < min_len {
            let prev = runs[runs.len() - 2].0;
            for l in &mut labels[last.1..last.2] {
                *l = prev;
            }
        }
    }
    labels
}

pub fn bf_attention(spec: &CourtSpec, pos: [f64; 2], goal: usize, m: usize) -> usize {
    let cols = (spec.width_ft / spec.macro_box_ft) as usize;
    let (c, r) = (goal % cols, goal / cols);
    let (x0, y0) = (c as f64 * spec.macro_box_ft, r as f64 * spec.macro_box_ft);
    let inside = pos[0] >= x0 && pos[0] < x0 + spec.macro_box_ft && pos[1] >= y0 && pos[1] < y0 + spec.macro_box_ft;
    let rr = spec.velocity_radius_cells as i64;
    let centre = ((rr) * (2 * rr + 1) + rr) as usize;
    if inside {
        return centre;
    }
    let (dx, dy) = (x0 + spec.macro_box_ft / 2.0 - pos[0], y0 + spec.macro_box_ft / 2.0 - pos[1]);
    let d = (dx * dx + dy * dy).sqrt();
    let ax = bf_round(m as f64 * dx / d).max(-rr).min(rr);
    let ay = bf_round(m as f64 * dy / d).max(-rr).min(rr);
    ((ay + rr) * (2 * rr + 1) + (ax + rr)) as usize
}

/// Runs every case through the library and the brute-force versions.
/// Returns the number of cases checked or the first disagreement.
pub fn run_suite() -> Result<usize, String> {
    let spec = CourtSpec::default();
    let cfg = SegmentationConfig::default();
    let all = cases();
    for case in &all {
        let pts = &case.points;
        let micro = weak_labels::micro_labels(pts, &spec);
        if micro.actions != bf_micro(&spec, pts) {
            return Err(format!("{}: micro labels differ", case.name));
        }
        let st = weak_labels::find_stationary(pts, &cfg);
        if st != bf_stationary(pts, cfg.stationary_speed_ft_per_raw_frame) {
            return Err(format!("{}: stationary points differ: {st:?}", case.name));
        }
        let mac: Vec<usize> = weak_labels::macro_labels(pts, &st, &spec, &cfg).iter().map(|b| b.0).collect();
        if mac != bf_macro(&spec, pts, &st, cfg.min_segment_steps) {
            return Err(format!("{}: macro labels differ", case.name));
        }
        let sub: Vec<[f64; 2]> = pts.iter().step_by(spec.subsample_stride).copied().collect();
        let goals: Vec<MacroGoalBox> = mac.iter().map(|&b| MacroGoalBox(b)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let att = weak_labels::attention_labels(&sub, &goals, &spec, &cfg, &mut rng);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (k, &a) in att.iter().enumerate() {
            let m = rand::Rng::gen_range(&mut rng, cfg.magnitude_range.0..=cfg.magnitude_range.1);
            if a != bf_attention(&spec, sub[k], mac[k], m) {
                return Err(format!("{}: attention label differs at step {k}", case.name));
            }
        }
        if micro.actions.len() != 50 || mac.len() != 50 || att.len() != 50 {
            return Err(format!("{}: streams are not aligned", case.name));
        }
    }
    Ok(all.len())
}
