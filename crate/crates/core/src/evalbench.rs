//! Teacher-forced benchmarks on held-out sequences and SVG rendering of
//! rollouts.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::CourtSpec;
use crate::policy_net::{argmax, predict_action_index, predict_attention, predict_macro, Policy, SelectMode};
use crate::rollout::RolloutResult;
use crate::trajdata::{Channel, TrainingSequence};
use crate::weak_labels::WeakLabels;

/// Streams evaluated together in one batched forward pass.
const EVAL_CHUNK: usize = 50;

/// Raw counts from a teacher-forced pass; all fractions derive from these.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub delta_correct: Vec<u64>,
    pub delta_total: Vec<u64>,
    /// Hits of the raw micro heads alone, over the same steps.
    #[serde(default)]
    pub raw_correct: Vec<u64>,
    pub macro_correct: u64,
    pub macro_total: u64,
    pub macro_correct_after_burn_in: u64,
    pub macro_total_after_burn_in: u64,
    pub attention_correct: u64,
    pub attention_total: u64,
    /// Sum over steps of the total-variation distance between the first
    /// raw head and the attention mask.
    pub tv_sum: f64,
    pub tv_steps: u64,
}

impl Counts {
    fn merge(&mut self, o: &Counts) {
        if self.delta_correct.len() < o.delta_correct.len() {
            self.delta_correct.resize(o.delta_correct.len(), 0);
            self.delta_total.resize(o.delta_total.len(), 0);
            self.raw_correct.resize(o.delta_total.len(), 0);
        }
        for (i, (&c, &t)) in o.delta_correct.iter().zip(&o.delta_total).enumerate() {
            self.delta_correct[i] += c;
            self.delta_total[i] += t;
        }
        for (i, &r) in o.raw_correct.iter().enumerate() {
            self.raw_correct[i] += r;
        }
        self.macro_correct += o.macro_correct;
        self.macro_total += o.macro_total;
        self.macro_correct_after_burn_in += o.macro_correct_after_burn_in;
        self.macro_total_after_burn_in += o.macro_total_after_burn_in;
        self.attention_correct += o.attention_correct;
        self.attention_total += o.attention_total;
        self.tv_sum += o.tv_sum;
        self.tv_steps += o.tv_steps;
    }

    pub fn lookahead(&self) -> Vec<f64> {
        self.delta_correct
            .iter()
            .zip(&self.delta_total)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect()
    }

    pub fn raw_lookahead(&self) -> Vec<f64> {
        self.raw_correct
            .iter()
            .zip(&self.delta_total)
            .map(|(&c, &t)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
            .collect()
    }

    pub fn macro_acc(&self) -> Option<f64> {
        (self.macro_total > 0).then(|| self.macro_correct as f64 / self.macro_total as f64)
    }

    pub fn macro_acc_after_burn_in(&self) -> Option<f64> {
        (self.macro_total_after_burn_in > 0).then(|| self.macro_correct_after_burn_in as f64 / self.macro_total_after_burn_in as f64)
    }

    pub fn attention_acc(&self) -> Option<f64> {
        (self.attention_total > 0).then(|| self.attention_correct as f64 / self.attention_total as f64)
    }

    pub fn tv_monitor(&self) -> Option<f64> {
        (self.tv_steps > 0).then(|| self.tv_sum / self.tv_steps as f64)
    }
}

fn check_inputs(seqs: &[TrainingSequence], labels: &[WeakLabels]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Data("empty holdout".into()));
    }
    if seqs.len() != labels.len() {
        return Err(Error::Data("every holdout sequence needs labels".into()));
    }
    Ok(())
}

fn eval_chunk<P: Policy + ?Sized>(policy: &P, seqs: &[TrainingSequence], labels: &[WeakLabels], keys: &[usize], burn_in: usize) -> Result<Counts> {
    let heads = policy.spec().lookahead_steps;
    let mut c = Counts {
        delta_correct: vec![0; heads],
        delta_total: vec![0; heads],
        raw_correct: vec![0; heads],
        ..Counts::default()
    };
    let mut mem = policy.begin(keys);
    let steps = keys.iter().map(|&i| seqs[i].len()).min().unwrap_or(0);
    // Argmax selection never touches the generator.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for t in 0..steps {
        let states: Vec<_> = keys.iter().map(|&i| &seqs[i].states[t]).collect();
        let outs = policy.step(&states, &mut mem)?;
        for (&i, out) in keys.iter().zip(&outs) {
            let l = &labels[i];
            for k in 0..heads {
                if k > 0 && l.micro_padded[t][k] {
                    continue;
                }
                c.delta_total[k] += 1;
                if predict_action_index(out, k, SelectMode::Argmax, &mut rng)? == l.micro[t][k] {
                    c.delta_correct[k] += 1;
                }
                if argmax(&out.p_raw[k]) == l.micro[t][k] {
                    c.raw_correct[k] += 1;
                }
            }
            if out.p_macro.is_some() {
                let hit = predict_macro(out)? == l.macro_goals[t];
                c.macro_total += 1;
                c.macro_correct += hit as u64;
                if t >= burn_in {
                    c.macro_total_after_burn_in += 1;
                    c.macro_correct_after_burn_in += hit as u64;
                }
            }
            if let Some(a) = &out.attention {
                c.attention_total += 1;
                c.attention_correct += (predict_attention(out)? == l.attention[t]) as u64;
                let tv: f64 = 0.5 * out.p_raw[0].iter().zip(a).map(|(p, q)| (p - q).abs()).sum::<f64>();
                c.tv_sum += tv;
                c.tv_steps += 1;
            }
        }
    }
    Ok(c)
}

/// One teacher-forced pass over every sequence; `burn_in` only affects the
/// burn-in-excluded macro accuracy.
pub fn evaluate<P: Policy + ?Sized>(policy: &P, seqs: &[TrainingSequence], labels: &[WeakLabels], burn_in: usize) -> Result<Counts> {
    check_inputs(seqs, labels)?;
    let keys: Vec<usize> = (0..seqs.len()).collect();
    let parts: Vec<Result<Counts>> = keys
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| eval_chunk(policy, seqs, labels, chunk, burn_in))
        .collect();
    let mut total = Counts::default();
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

pub fn lookahead_accuracy<P: Policy + ?Sized>(policy: &P, seqs: &[TrainingSequence], labels: &[WeakLabels]) -> Result<Vec<f64>> {
    Ok(evaluate(policy, seqs, labels, 0)?.lookahead())
}

pub fn macro_accuracy<P: Policy + ?Sized>(policy: &P, seqs: &[TrainingSequence], labels: &[WeakLabels], burn_in: usize) -> Result<f64> {
    if !policy.has_macro() {
        return Err(Error::Unsupported {
            variant: policy.name(),
            what: "macro accuracy".into(),
        });
    }
    let c = evaluate(policy, seqs, labels, burn_in)?;
    Ok(if burn_in == 0 { c.macro_acc() } else { c.macro_acc_after_burn_in() }.unwrap_or(0.0))
}

pub fn attention_accuracy<P: Policy + ?Sized>(policy: &P, seqs: &[TrainingSequence], labels: &[WeakLabels]) -> Result<f64> {
    if !policy.has_attention() {
        return Err(Error::Unsupported {
            variant: policy.name(),
            what: "attention accuracy".into(),
        });
    }
    Ok(evaluate(policy, seqs, labels, 0)?.attention_acc().unwrap_or(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkRow {
    pub model: String,
    pub acc_delta: Vec<f64>,
    pub macro_acc: Option<f64>,
    pub macro_acc_after_burn_in: Option<f64>,
    pub attention_acc: Option<f64>,
    pub n_eval: u64,
}

impl BenchmarkRow {
    pub fn from_counts(model: &str, c: &Counts) -> Self {
        BenchmarkRow {
            model: model.to_string(),
            acc_delta: c.lookahead(),
            macro_acc: c.macro_acc(),
            macro_acc_after_burn_in: c.macro_acc_after_burn_in(),
            attention_acc: c.attention_acc(),
            n_eval: c.delta_total.first().copied().unwrap_or(0),
        }
    }
}

/// One row per policy, in the order given.
pub fn benchmark(policies: &[&dyn Policy], seqs: &[TrainingSequence], labels: &[WeakLabels], burn_in: usize) -> Result<Vec<BenchmarkRow>> {
    let Some(first) = policies.first() else {
        return Ok(Vec::new());
    };
    let spec = first.spec();
    if policies.iter().any(|p| p.spec() != spec) {
        return Err(Error::Config("benchmarked models use different court specs".into()));
    }
    policies
        .iter()
        .map(|p| Ok(BenchmarkRow::from_counts(&p.name(), &evaluate(*p, seqs, labels, burn_in)?)))
        .collect()
}

pub const CSV_HEADER: [&str; 9] = [
    "model",
    "acc_delta0",
    "acc_delta1",
    "acc_delta2",
    "acc_delta3",
    "macro_acc",
    "macro_acc_after_burn_in",
    "attention_acc",
    "n_eval",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

/// Benchmark table as CSV. Fractions use six decimals; a dash marks
/// metrics the variant does not produce.
pub fn benchmark_csv(rows: &[BenchmarkRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in rows {
        let mut rec = vec![r.model.clone()];
        for i in 0..4 {
            rec.push(fmt_opt(r.acc_delta.get(i).copied()));
        }
        rec.push(fmt_opt(r.macro_acc));
        rec.push(fmt_opt(r.macro_acc_after_burn_in));
        rec.push(fmt_opt(r.attention_acc));
        rec.push(r.n_eval.to_string());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderSpec {
    /// Pixels per foot.
    pub scale: f64,
    pub court_fill: String,
    pub line_color: String,
    pub burn_in_color: String,
    pub rollout_color: String,
    pub ball_color: String,
    pub teammate_color: String,
    pub opponent_color: String,
    pub goal_color: String,
    /// Draw full trails for the other agents instead of final positions.
    pub other_trails: bool,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            scale: 12.0,
            court_fill: "#f4ead5".into(),
            line_color: "#555555".into(),
            burn_in_color: "#222222".into(),
            rollout_color: "#1f5fbf".into(),
            ball_color: "#e07b00".into(),
            teammate_color: "#3a9a3a".into(),
            opponent_color: "#c0392b".into(),
            goal_color: "#7b3fb0".into(),
            other_trails: true,
        }
    }
}

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn polyline(out: &mut String, pts: &[[f64; 2]], spec: &CourtSpec, rs: &RenderSpec, color: &str, width: f64, class: &str) {
    if pts.is_empty() {
        return;
    }
    let h = spec.height_ft;
    let coords: Vec<String> = pts
        .iter()
        .map(|p| format!("{},{}", num(p[0] * rs.scale), num((h - p[1]) * rs.scale)))
        .collect();
    let _ = writeln!(
        out,
        r#"  <polyline class="{class}" points="{}" fill="none" stroke="{color}" stroke-width="{}" stroke-linejoin="round"/>"#,
        coords.join(" "),
        num(width)
    );
}

fn dot(out: &mut String, p: [f64; 2], spec: &CourtSpec, rs: &RenderSpec, color: &str, r: f64, class: &str) {
    let _ = writeln!(
        out,
        r#"  <circle class="{class}" cx="{}" cy="{}" r="{}" fill="{color}"/>"#,
        num(p[0] * rs.scale),
        num((spec.height_ft - p[1]) * rs.scale),
        num(r)
    );
}

/// A standalone SVG 1.1 document for one rollout.
pub fn render_svg(rollout: &RolloutResult, seq: &TrainingSequence, spec: &CourtSpec, rs: &RenderSpec) -> String {
    let (w, h) = (spec.width_ft * rs.scale, spec.height_ft * rs.scale);
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        num(w),
        num(h),
        num(w),
        num(h)
    );
    let _ = writeln!(
        out,
        r#"  <rect class="court" x="0" y="0" width="{}" height="{}" fill="{}" stroke="{}" stroke-width="2"/>"#,
        num(w),
        num(h),
        rs.court_fill,
        rs.line_color
    );

    let n_boxes = spec.num_macro_boxes();
    let mut freq = vec![0usize; n_boxes];
    for g in rollout.macro_goals.iter().flatten() {
        if g.0 < n_boxes {
            freq[g.0] += 1;
        }
    }
    let max = freq.iter().copied().max().unwrap_or(0);
    if max > 0 {
        for (b, &f) in freq.iter().enumerate() {
            if f == 0 {
                continue;
            }
            let c = (b % spec.macro_cols()) as f64 * spec.macro_box_ft;
            let r = (b / spec.macro_cols()) as f64 * spec.macro_box_ft;
            let _ = writeln!(
                out,
                r#"  <rect class="goal" x="{}" y="{}" width="{}" height="{}" fill="{}" fill-opacity="{}"/>"#,
                num(c * rs.scale),
                num((spec.height_ft - r - spec.macro_box_ft) * rs.scale),
                num(spec.macro_box_ft * rs.scale),
                num(spec.macro_box_ft * rs.scale),
                rs.goal_color,
                num(f as f64 / max as f64)
            );
        }
    }

    let steps = rollout.path.len();
    for a in &seq.others {
        let color = match a.channel {
            Channel::Ball => &rs.ball_color,
            Channel::Opponents => &rs.opponent_color,
            _ => &rs.teammate_color,
        };
        let upto = steps.min(a.positions.len());
        if upto == 0 {
            continue;
        }
        if rs.other_trails {
            polyline(&mut out, &a.positions[..upto], spec, rs, color, 1.0, "other");
        }
        dot(&mut out, a.positions[upto - 1], spec, rs, color, 4.0, "other");
    }

    let b = rollout.burn_in.min(steps);
    polyline(&mut out, &rollout.path[..b], spec, rs, &rs.burn_in_color, 2.5, "burn-in");
    if steps > b {
        // Start the extrapolated trail at the last burn-in point so the
        // two trails connect.
        let from = b.saturating_sub(1);
        polyline(&mut out, &rollout.path[from..], spec, rs, &rs.rollout_color, 2.5, "rollout");
    }
    if let Some(&last) = rollout.path.last() {
        dot(&mut out, last, spec, rs, if steps > b { &rs.rollout_color } else { &rs.burn_in_color }, 5.0, "focal");
    }
    out.push_str("</svg>\n");
    out
}

pub fn render(rollouts: &[RolloutResult], seqs: &[TrainingSequence], spec: &CourtSpec, rs: &RenderSpec, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if rollouts.is_empty() {
        return Err(Error::Data("nothing to render".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(rollouts.len());
    for (i, (r, s)) in rollouts.iter().zip(seqs).enumerate() {
        let path = dir.join(format!("rollout_{i:04}.svg"));
        std::fs::write(&path, render_svg(r, s, spec, rs))?;
        paths.push(path);
    }
    Ok(paths)
}
