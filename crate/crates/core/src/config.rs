//! The run configuration document.
//!
//! A plain-text file of `section.key = value` lines. `#` starts a comment
//! outside double quotes, `[section]` headers let later lines drop the
//! section prefix, lists are comma separated and convolution layers are
//! written `filters x kernel / stride` (for example `8x3/1, 16x3/2`).
//! Unknown keys are rejected. Seeds are not part of the document; a single
//! global seed is injected into every section by [`RunConfig::with_seed`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::evalbench::RenderSpec;
use crate::grid::CourtSpec;
use crate::policy_net::{ArchitectureConfig, Variant};
use crate::rollout::RolloutConfig;
use crate::training::TrainConfig;
use crate::trajdata::{SynthConfig, WindowConfig};
use crate::weak_labels::SegmentationConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub holdout_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { holdout_fraction: 1.0 / 11.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Steps excluded from the burn-in-free macro accuracy.
    pub burn_in_steps: usize,
    /// Holdout sequences rolled out per model.
    pub rollout_count: usize,
    /// Rollouts rendered per model.
    pub render_count: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            burn_in_steps: 20,
            rollout_count: 16,
            render_count: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    /// Where every artifact of a run is written.
    pub out_dir: String,
    /// Possession file to ingest instead of the synthesized one.
    pub possessions: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out_dir: "hpn-run".into(),
            possessions: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproConfig {
    pub variants: Vec<Variant>,
}

impl Default for ReproConfig {
    fn default() -> Self {
        ReproConfig {
            variants: vec![Variant::Cnn, Variant::GruCnn, Variant::HCc, Variant::HAtt, Variant::HAux],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub court: CourtSpec,
    pub synth: SynthConfig,
    pub window: WindowConfig,
    pub split: SplitConfig,
    pub labels: SegmentationConfig,
    pub model: ArchitectureConfig,
    pub train: TrainConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
    pub render: RenderSpec,
    pub paths: PathsConfig,
    pub repro: ReproConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            court: CourtSpec::default(),
            synth: SynthConfig::default(),
            window: WindowConfig::default(),
            split: SplitConfig::default(),
            labels: SegmentationConfig::default(),
            model: ArchitectureConfig::desk(),
            train: TrainConfig::default(),
            rollout: RolloutConfig::default(),
            eval: EvalConfig::default(),
            render: RenderSpec::default(),
            paths: PathsConfig::default(),
            repro: ReproConfig::default(),
        }
    }
}

/// One `key = value` assignment with the line it came from (0 for
/// command-line overrides).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    pub line: usize,
}

fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

pub fn parse_document(text: &str) -> Result<Vec<Assignment>> {
    let mut section: Option<String> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let err = |reason: &str| Error::Parse {
            line: i + 1,
            reason: reason.into(),
        };
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest.strip_suffix(']').ok_or_else(|| err("unterminated section header"))?.trim();
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(err("bad section name"));
            }
            section = Some(name.to_string());
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| err("expected key = value"))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(err("empty key"));
        }
        let key = match (&section, k.contains('.')) {
            (_, true) => k.to_string(),
            (Some(s), false) => format!("{s}.{k}"),
            (None, false) => return Err(err("key needs a section")),
        };
        out.push(Assignment {
            key,
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Splits `section.key=value` as given on the command line.
pub fn parse_override(s: &str) -> Result<Assignment> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok(Assignment {
        key: k.trim().to_string(),
        value: v.trim().to_string(),
        line: 0,
    })
}

fn unquote(s: &str) -> &str {
    s.strip_prefix('"').and_then(|r| r.strip_suffix('"')).unwrap_or(s)
}

fn split_list(s: &str) -> Vec<&str> {
    if s.trim().is_empty() {
        return Vec::new();
    }
    s.split(',').map(str::trim).collect()
}

fn parse_conv(s: &str) -> Option<Value> {
    let (f, rest) = s.split_once(['x', 'X'])?;
    let (k, st) = rest.split_once('/').unwrap_or((rest, "1"));
    Some(serde_json::json!({
        "filters": f.trim().parse::<u64>().ok()?,
        "kernel": k.trim().parse::<u64>().ok()?,
        "stride": st.trim().parse::<u64>().ok()?,
    }))
}

fn infer_scalar(s: &str) -> Value {
    let s = unquote(s);
    if let Ok(u) = s.parse::<u64>() {
        return Value::from(u);
    }
    if let Ok(f) = s.parse::<f64>() {
        return Value::from(f);
    }
    match s {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => Value::String(s.to_string()),
    }
}

fn convert(template: &Value, raw: &str) -> std::result::Result<Value, String> {
    let v = raw.trim();
    match template {
        Value::Bool(_) => match v {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("expected true or false, got {v:?}")),
        },
        Value::Number(n) if n.is_u64() => v
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| format!("expected a non-negative integer, got {v:?}")),
        Value::Number(n) if n.is_i64() => v.parse::<i64>().map(Value::from).map_err(|_| format!("expected an integer, got {v:?}")),
        Value::Number(_) => v
            .parse::<f64>()
            .ok()
            .filter(|f| f.is_finite())
            .map(Value::from)
            .ok_or_else(|| format!("expected a number, got {v:?}")),
        Value::String(_) => Ok(Value::String(unquote(v).to_string())),
        Value::Array(items) => {
            let parts = split_list(v);
            match items.first() {
                Some(t @ Value::Object(_)) if t.get("filters").is_some() => parts
                    .iter()
                    .map(|p| parse_conv(p).ok_or_else(|| format!("expected FxK/S, got {p:?}")))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map(Value::Array),
                Some(t) => parts
                    .iter()
                    .map(|p| convert(t, p))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map(Value::Array),
                None => Ok(Value::Array(parts.iter().map(|p| infer_scalar(p)).collect())),
            }
        }
        Value::Null => {
            if v.is_empty() || v == "none" || v == "default" {
                Ok(Value::Null)
            } else {
                Ok(Value::Array(split_list(v).iter().map(|p| infer_scalar(p)).collect()))
            }
        }
        Value::Object(_) => Err("set the individual keys of this table".into()),
    }
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => format!("\"{s}\""),
        Value::Array(items) => items
            .iter()
            .map(|i| match i {
                Value::Object(o) if o.contains_key("filters") => {
                    format!("{}x{}/{}", o["filters"], o["kernel"], o["stride"])
                }
                Value::String(s) => s.clone(),
                other => render_value(other),
            })
            .collect::<Vec<_>>()
            .join(", "),
        other => other.to_string(),
    }
}

const SEED_KEYS: [&str; 4] = ["synth", "labels", "train", "rollout"];

impl RunConfig {
    /// Defaults overridden by `assignments`, in order.
    pub fn from_assignments(assignments: &[Assignment]) -> Result<Self> {
        Self::default().apply(assignments)
    }

    pub fn apply(&self, assignments: &[Assignment]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        let defaults = serde_json::to_value(RunConfig::default())?;
        let root = doc.as_object_mut().expect("struct serializes to a map");
        for a in assignments {
            let where_ = if a.line > 0 { format!("line {}: ", a.line) } else { String::new() };
            let bad = |m: String| Error::Config(format!("{where_}{m}"));
            let (section, field) = a.key.split_once('.').ok_or_else(|| bad(format!("key {:?} needs a section", a.key)))?;
            if field == "seed" {
                return Err(bad("seeds come from the global --seed flag".into()));
            }
            let table: &mut Map<String, Value> = root
                .get_mut(section)
                .and_then(Value::as_object_mut)
                .ok_or_else(|| bad(format!("unknown section {section:?}")))?;
            let slot = table.get_mut(field).ok_or_else(|| bad(format!("unknown key {:?}", a.key)))?;
            let optional = defaults[section][field].is_null();
            *slot = if optional && matches!(a.value.trim(), "" | "none" | "default") {
                Value::Null
            } else {
                convert(slot, &a.value).map_err(|m| bad(format!("{}: {m}", a.key)))?
            };
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn from_document(text: &str) -> Result<Self> {
        Self::from_assignments(&parse_document(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_document(&std::fs::read_to_string(path)?)
    }

    /// Copies the global seed into every seeded section.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.labels.seed = seed;
        self.train.seed = seed;
        self.rollout.seed = seed;
        self
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Checks every section.
    pub fn validate(&self) -> Result<()> {
        self.court.validate()?;
        self.synth.validate(&self.court)?;
        if self.window.sequence_steps == 0 || self.window.windows_per_player == 0 {
            return Err(Error::Config("window: sequence_steps and windows_per_player must be positive".into()));
        }
        if !(self.split.holdout_fraction > 0.0 && self.split.holdout_fraction < 1.0) {
            return Err(Error::Config("split: holdout_fraction must lie in (0, 1)".into()));
        }
        self.labels.validate(&self.court)?;
        self.model.validate(&self.court)?;
        self.train.validate()?;
        self.train.schedule_for(self.model.variant)?;
        self.rollout.validate()?;
        if self.rollout.burn_in_steps + self.rollout.horizon_steps > self.window.sequence_steps {
            return Err(Error::Config("rollout: burn-in plus horizon exceeds the window".into()));
        }
        if !(self.render.scale.is_finite() && self.render.scale > 0.0) {
            return Err(Error::Config("render: scale must be positive".into()));
        }
        if self.paths.out_dir.is_empty() {
            return Err(Error::Config("paths: out_dir must be set".into()));
        }
        if self.repro.variants.is_empty() {
            return Err(Error::Config("repro: no variants".into()));
        }
        Ok(())
    }

    /// The configuration as a document that parses back to `self` (seeds
    /// aside).
    pub fn to_document(&self) -> Result<String> {
        let doc = serde_json::to_value(self)?;
        let mut out = String::new();
        for (section, table) in doc.as_object().expect("map") {
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in table.as_object().expect("sections are tables") {
                if k == "seed" && SEED_KEYS.contains(&section.as_str()) {
                    continue;
                }
                out.push_str(&format!("{k} = {}\n", render_value(v)));
            }
            out.push('\n');
        }
        Ok(out)
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(&self.paths.out_dir)
    }
}
