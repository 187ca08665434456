//! On-policy rollouts: ground-truth burn-in, then the focal player follows
//! its own predicted micro-actions while everyone else replays ground truth.

use std::io::{BufRead, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::MacroGoalBox;
use crate::policy_net::{predict_action_index, predict_attention, predict_macro, Policy, PolicyMemory, SelectMode, StepOutput};
use crate::seed;
use crate::trajdata::{step_state, TrainingSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub burn_in_steps: usize,
    pub horizon_steps: usize,
    pub mode: SelectMode,
    pub seed: u64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            burn_in_steps: 20,
            horizon_steps: 30,
            mode: SelectMode::Argmax,
            seed: 0,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in_steps == 0 {
            return Err(Error::Config("rollout.burn_in_steps must be at least 1".into()));
        }
        Ok(())
    }

    /// Checks that `seq` supplies enough ground truth.
    pub fn validate_for(&self, seq: &TrainingSequence) -> Result<()> {
        self.validate()?;
        let need = self.burn_in_steps + self.horizon_steps;
        if need > seq.len() {
            return Err(Error::Config(format!(
                "burn-in {} plus horizon {} exceeds the {} steps of {}/{}",
                self.burn_in_steps,
                self.horizon_steps,
                seq.len(),
                seq.possession_id,
                seq.focal_agent
            )));
        }
        Ok(())
    }
}

/// What the policy did at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    /// Selected action index per look-ahead head.
    pub actions: Vec<usize>,
    pub attention: Option<usize>,
    /// Largest renormalized combined score of head 0.
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub possession_id: String,
    pub focal_agent: String,
    pub t0: usize,
    pub model: String,
    pub burn_in: usize,
    pub path: Vec<[f64; 2]>,
    pub macro_goals: Vec<Option<MacroGoalBox>>,
    pub steps: Vec<StepSummary>,
    pub clamp_events: u64,
    pub zero_mass_fallbacks: u64,
}

impl RolloutResult {
    pub fn horizon(&self) -> usize {
        self.path.len() - self.burn_in
    }

    /// Number of changes in the predicted macro-goal along the rollout.
    pub fn macro_switches(&self) -> usize {
        let goals: Vec<_> = self.macro_goals.iter().flatten().collect();
        goals.windows(2).filter(|w| w[0] != w[1]).count()
    }
}

pub fn mean_macro_switches(results: &[RolloutResult]) -> Option<f64> {
    let with: Vec<_> = results.iter().filter(|r| r.macro_goals.iter().any(Option::is_some)).collect();
    if with.is_empty() {
        return None;
    }
    Some(with.iter().map(|r| r.macro_switches() as f64).sum::<f64>() / with.len() as f64)
}

/// A rollout in progress. Holds the policy memory so it can be extended
/// step by step.
pub struct Rollout<'a, P: Policy + ?Sized> {
    policy: &'a P,
    seq: &'a TrainingSequence,
    mode: SelectMode,
    mem: PolicyMemory,
    rng: ChaCha8Rng,
    last: StepOutput,
    result: RolloutResult,
}

impl<'a, P: Policy + ?Sized> Rollout<'a, P> {
    /// Runs the burn-in. `key` identifies the stream for policies that
    /// replay per-sequence data.
    pub fn start(policy: &'a P, seq: &'a TrainingSequence, key: usize, burn_in: usize, mode: SelectMode, seed: u64) -> Result<Self> {
        if burn_in == 0 || burn_in > seq.len() {
            return Err(Error::Config(format!("burn-in {burn_in} needs 1..={} ground-truth steps", seq.len())));
        }
        let t0 = seq.t0.to_string();
        let rng = seed::rng(seed, &["rollout", &seq.possession_id, &seq.focal_agent, &t0]);
        let mut mem = policy.begin(&[key]);
        let mut result = RolloutResult {
            possession_id: seq.possession_id.clone(),
            focal_agent: seq.focal_agent.clone(),
            t0: seq.t0,
            model: policy.name(),
            burn_in,
            path: Vec::with_capacity(burn_in),
            macro_goals: Vec::new(),
            steps: Vec::new(),
            clamp_events: 0,
            zero_mass_fallbacks: 0,
        };
        let mut last = None;
        for t in 0..burn_in {
            let out = policy.step(&[&seq.states[t]], &mut mem)?.pop().expect("one stream");
            result.path.push(seq.raw_positions[t]);
            result.macro_goals.push(predict_macro(&out).ok());
            last = Some(out);
        }
        let mut r = Rollout {
            policy,
            seq,
            mode,
            mem,
            rng,
            last: last.expect("burn-in is nonempty"),
            result,
        };
        // Only the final burn-in prediction is acted upon.
        r.result.steps = vec![
            StepSummary {
                actions: Vec::new(),
                attention: None,
                confidence: 0.0,
            };
            burn_in - 1
        ];
        let s = r.summarize()?;
        r.result.steps.push(s);
        Ok(r)
    }

    /// Selects actions from the last output without advancing.
    fn summarize(&mut self) -> Result<StepSummary> {
        let out = &self.last;
        let heads = self.policy.spec().lookahead_steps;
        let mut actions = Vec::with_capacity(heads);
        for k in 0..heads {
            let mass: f64 = out.p_combined[k].iter().sum();
            if !(mass > 0.0 && mass.is_finite()) {
                self.result.zero_mass_fallbacks += 1;
            }
            actions.push(predict_action_index(out, k, self.mode, &mut self.rng)?);
        }
        let head0 = &out.p_combined[0];
        let mass: f64 = head0.iter().sum();
        let confidence = if mass > 0.0 {
            head0.iter().cloned().fold(0.0, f64::max) / mass
        } else {
            0.0
        };
        Ok(StepSummary {
            actions,
            attention: predict_attention(out).ok(),
            confidence,
        })
    }

    /// Extrapolates `steps` more subsampled steps. Other agents hold their
    /// last ground-truth position once their tracks run out.
    pub fn extend(&mut self, steps: usize) -> Result<()> {
        let spec = self.policy.spec().clone();
        for _ in 0..steps {
            let actions = self.result.steps.last().expect("burn-in ran").actions.clone();
            let mut p = *self.result.path.last().expect("burn-in ran");
            for &a in &actions {
                let (dx, dy) = spec.action_to_displacement(spec.action_from_index(a)?);
                let ((x, y), clamped) = spec.clamp_pos(p[0] + dx, p[1] + dy);
                self.result.clamp_events += clamped as u64;
                p = [x, y];
            }
            let t = self.result.path.len();
            self.result.path.push(p);
            let state = step_state(p, &self.seq.others, t, &spec);
            self.last = self.policy.step(&[&state], &mut self.mem)?.pop().expect("one stream");
            self.result.macro_goals.push(predict_macro(&self.last).ok());
            let s = self.summarize()?;
            self.result.steps.push(s);
        }
        Ok(())
    }

    pub fn result(&self) -> &RolloutResult {
        &self.result
    }

    pub fn finish(self) -> RolloutResult {
        self.result
    }
}

pub fn rollout<P: Policy + ?Sized>(policy: &P, seq: &TrainingSequence, key: usize, cfg: &RolloutConfig) -> Result<RolloutResult> {
    cfg.validate_for(seq)?;
    let mut r = Rollout::start(policy, seq, key, cfg.burn_in_steps, cfg.mode, cfg.seed)?;
    r.extend(cfg.horizon_steps)?;
    Ok(r.finish())
}

/// Rolls out every sequence independently; stream keys are the indices
/// into `seqs`.
pub fn batch_rollout<P: Policy + ?Sized>(policy: &P, seqs: &[TrainingSequence], cfg: &RolloutConfig) -> Result<Vec<RolloutResult>> {
    if seqs.is_empty() {
        return Err(Error::Data("no sequences to roll out".into()));
    }
    seqs.par_iter().enumerate().map(|(i, s)| rollout(policy, s, i, cfg)).collect()
}

pub fn write_jsonl<W: Write>(mut w: W, results: &[RolloutResult]) -> Result<()> {
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_jsonl(path: &Path, results: &[RolloutResult]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(f), results)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RolloutResult>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}
