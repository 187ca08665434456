//! The hierarchical policy network and its baselines.
//!
//! Every variant shares the same building blocks: a max-pool input pyramid,
//! convolutional branches with batchnorm, ReLU and Gaussian noise, a GRU
//! (or a dense layer for the memoryless CNN), and linear heads. The
//! attention variants multiply the raw micro distribution elementwise with
//! a mask produced from the macro-goal distribution by a two-layer transfer
//! net.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use hpn_tensor::{checkpoint, BufferId, Graph, Mode, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{CourtSpec, MacroGoalBox, VelocityAction};
use crate::seed;
use crate::trajdata::{StepState, NUM_CHANNELS};
use crate::weak_labels::WeakLabels;

pub const GROUP_MICRO: u32 = 0;
pub const GROUP_MACRO: u32 = 1;
pub const GROUP_TRANSFER: u32 = 2;
pub const GROUP_COMBINED: u32 = 3;

static ZERO_MASS_FALLBACKS: AtomicU64 = AtomicU64::new(0);

/// How often [`predict_action`] fell back to the raw distribution because
/// the combined scores carried no mass.
pub fn zero_mass_fallbacks() -> u64 {
    ZERO_MASS_FALLBACKS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "CNN")]
    Cnn,
    #[serde(rename = "GRU_CNN")]
    GruCnn,
    #[serde(rename = "H_CC")]
    HCc,
    #[serde(rename = "H_STACK")]
    HStack,
    #[serde(rename = "H_ATT")]
    HAtt,
    #[serde(rename = "H_AUX")]
    HAux,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Cnn,
        Variant::GruCnn,
        Variant::HCc,
        Variant::HStack,
        Variant::HAtt,
        Variant::HAux,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cnn => "CNN",
            Variant::GruCnn => "GRU_CNN",
            Variant::HCc => "H_CC",
            Variant::HStack => "H_STACK",
            Variant::HAtt => "H_ATT",
            Variant::HAux => "H_AUX",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }

    pub fn has_memory(self) -> bool {
        self != Variant::Cnn
    }

    pub fn is_hierarchical(self) -> bool {
        !matches!(self, Variant::Cnn | Variant::GruCnn)
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::HStack | Variant::HAtt | Variant::HAux)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub variant: Variant,
    /// Max-pool kernel sizes applied to the input in order; each pool's
    /// stride equals its kernel.
    pub pool_kernels: Vec<usize>,
    pub conv: Vec<ConvSpec>,
    pub gru_cells: usize,
    /// Width of the dense layer that stands in for the GRU in the CNN.
    pub cnn_hidden: usize,
    pub transfer_hidden: usize,
    pub shared_encoder: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            variant: Variant::HAtt,
            pool_kernels: vec![2, 2],
            conv: vec![
                ConvSpec {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                },
                ConvSpec {
                    filters: 16,
                    kernel: 3,
                    stride: 1,
                },
            ],
            gru_cells: 128,
            cnn_hidden: 128,
            transfer_hidden: 64,
            shared_encoder: false,
        }
    }
}

impl ArchitectureConfig {
    /// A lighter stack for single-core runs: the second convolution has
    /// stride 2 and the recurrent layer is narrower.
    pub fn desk() -> Self {
        let mut a = Self::default();
        a.conv[1].stride = 2;
        a.gru_cells = 64;
        a.cnn_hidden = 64;
        a
    }

    pub fn with_variant(mut self, v: Variant) -> Self {
        self.variant = v;
        self
    }

    pub fn validate(&self, spec: &CourtSpec) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("architecture: {m}")));
        if self.conv.is_empty() {
            return bad("at least one convolution is required".into());
        }
        if self.conv.iter().any(|c| c.filters == 0 || c.kernel == 0 || c.stride == 0) {
            return bad("convolution sizes must be positive".into());
        }
        if self.gru_cells == 0 || self.cnn_hidden == 0 || self.transfer_hidden == 0 {
            return bad("layer widths must be positive".into());
        }
        let (mut h, mut w) = (spec.micro_rows(), spec.micro_cols());
        for &k in &self.pool_kernels {
            if k == 0 || k > h || k > w {
                return bad(format!("pool kernel {k} does not fit a {h}x{w} map"));
            }
            h /= k;
            w /= k;
        }
        for c in &self.conv {
            let pad = c.kernel / 2;
            if h + 2 * pad < c.kernel || w + 2 * pad < c.kernel {
                return bad(format!("kernel {} does not fit a {h}x{w} map", c.kernel));
            }
            h = (h + 2 * pad - c.kernel) / c.stride + 1;
            w = (w + 2 * pad - c.kernel) / c.stride + 1;
        }
        Ok(())
    }

    /// Spatial size after the pyramid and the conv stack.
    pub fn feature_shape(&self, spec: &CourtSpec) -> (usize, usize, usize) {
        let (mut h, mut w) = (spec.micro_rows(), spec.micro_cols());
        for &k in &self.pool_kernels {
            h /= k;
            w /= k;
        }
        for c in &self.conv {
            let pad = c.kernel / 2;
            h = (h + 2 * pad - c.kernel) / c.stride + 1;
            w = (w + 2 * pad - c.kernel) / c.stride + 1;
        }
        (self.conv.last().map_or(NUM_CHANNELS, |c| c.filters), h, w)
    }
}

/// Hash of everything that determines parameter shapes and semantics.
pub fn config_hash(spec: &CourtSpec, arch: &ArchitectureConfig) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(spec).expect("serializable"));
    h.update(serde_json::to_vec(arch).expect("serializable"));
    h.finalize().to_vec()
}

/// Per-step predictions for one stream.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    /// One distribution over actions per look-ahead head.
    pub p_raw: Vec<Vec<f64>>,
    pub p_macro: Option<Vec<f64>>,
    pub attention: Option<Vec<f64>>,
    /// Unnormalized scores used for action selection.
    pub p_combined: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Argmax,
    Sample,
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Index drawn with probability proportional to `w`, or `None` when the
/// weights carry no mass.
pub fn sample_index<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &x) in w.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            last = Some(i);
            if u < acc {
                return Some(i);
            }
        }
    }
    last
}

/// Flat action index for head `k`.
pub fn predict_action_index<R: Rng + ?Sized>(out: &StepOutput, k: usize, mode: SelectMode, rng: &mut R) -> Result<usize> {
    let scores = out
        .p_combined
        .get(k)
        .ok_or_else(|| Error::Range(format!("head {k} out of range")))?;
    let mass: f64 = scores.iter().sum();
    let use_raw = !(mass > 0.0 && mass.is_finite());
    if use_raw {
        ZERO_MASS_FALLBACKS.fetch_add(1, Ordering::Relaxed);
    }
    let dist = if use_raw { &out.p_raw[k] } else { scores };
    Ok(match mode {
        SelectMode::Argmax => argmax(dist),
        SelectMode::Sample => sample_index(dist, rng).unwrap_or_else(|| argmax(dist)),
    })
}

pub fn predict_action<R: Rng + ?Sized>(spec: &CourtSpec, out: &StepOutput, k: usize, mode: SelectMode, rng: &mut R) -> Result<VelocityAction> {
    spec.action_from_index(predict_action_index(out, k, mode, rng)?)
}

pub fn predict_macro(out: &StepOutput) -> Result<MacroGoalBox> {
    match &out.p_macro {
        Some(p) => Ok(MacroGoalBox(argmax(p))),
        None => Err(Error::Unsupported {
            variant: "non-hierarchical".into(),
            what: "macro-goal prediction".into(),
        }),
    }
}

pub fn predict_attention(out: &StepOutput) -> Result<usize> {
    match &out.attention {
        Some(a) => Ok(argmax(a)),
        None => Err(Error::Unsupported {
            variant: "non-attention".into(),
            what: "attention prediction".into(),
        }),
    }
}

/// Recurrent state for a batch of independent streams.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PolicyMemory {
    /// Opaque per-stream keys supplied to [`Policy::begin`].
    pub keys: Vec<usize>,
    pub step: usize,
    pub micro: Option<Tensor>,
    pub macro_: Option<Tensor>,
}

impl PolicyMemory {
    pub fn is_empty(&self) -> bool {
        self.micro.is_none() && self.macro_.is_none()
    }
}

/// Anything that maps per-step occupancy to [`StepOutput`]s.
pub trait Policy: Sync {
    fn name(&self) -> String;
    fn spec(&self) -> &CourtSpec;
    fn has_macro(&self) -> bool;
    fn has_attention(&self) -> bool;
    /// Fresh memory for streams identified by `keys`.
    fn begin(&self, keys: &[usize]) -> PolicyMemory;
    fn step(&self, states: &[&StepState], mem: &mut PolicyMemory) -> Result<Vec<StepOutput>>;
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Clone, Debug)]
struct ConvUnit {
    w: ParamId,
    b: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running: (BufferId, BufferId),
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
enum Core {
    Gru { wx: ParamId, wh: ParamId, b: ParamId },
    Dense { w: ParamId, b: ParamId },
}

#[derive(Clone, Debug)]
struct Branch {
    convs: Vec<ConvUnit>,
    core: Core,
    /// `(w, b)` per head; the micro branch of most variants uses a single
    /// head producing all look-ahead logits at once.
    heads: Vec<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
struct Transfer {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Which parts of the network a forward pass has to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Need {
    pub micro: bool,
    pub macro_: bool,
    pub transfer: bool,
    pub combined: bool,
}

impl Need {
    pub fn all() -> Self {
        Need {
            micro: true,
            macro_: true,
            transfer: true,
            combined: true,
        }
    }
}

/// Graph nodes produced by one step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepVars {
    /// `(N·heads, K)` raw micro logits.
    pub raw: Option<Var>,
    /// `(N, G)` macro logits.
    pub macro_logits: Option<Var>,
    /// `(N, K)` attention logits.
    pub attention: Option<Var>,
    /// `(N·heads, K)` logits of the concatenation head.
    pub combined: Option<Var>,
    pub h_micro: Option<Var>,
    pub h_macro: Option<Var>,
}

pub struct Noise<'a> {
    pub sigma: f64,
    pub rng: &'a mut ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct HpnModel {
    pub spec: CourtSpec,
    pub arch: ArchitectureConfig,
    pub store: ParamStore,
    micro: Branch,
    macro_: Option<Branch>,
    transfer: Option<Transfer>,
    /// H_CC concatenation head.
    combined: Option<(ParamId, ParamId)>,
    /// H_STACK feed-forward links between consecutive heads.
    stack: Vec<ParamId>,
    buffer_groups: Vec<u32>,
    /// Every parameter id in declaration order.
    param_ids: Vec<ParamId>,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    buffer_groups: Vec<u32>,
    ids: Vec<ParamId>,
}

impl Builder<'_> {
    fn normal(&mut self, name: &str, group: u32, shape: &[usize], fan_in: usize, gain: f64) -> ParamId {
        let mut rng = seed::rng(self.seed, &["init", name]);
        let id = self.store.add_normal(name, group, shape, fan_in, gain, &mut rng);
        self.ids.push(id);
        id
    }

    fn constant(&mut self, name: &str, group: u32, shape: &[usize], v: f64) -> ParamId {
        let id = self.store.add(name, group, Tensor::full(shape, v));
        self.ids.push(id);
        id
    }

    fn buffer(&mut self, name: &str, group: u32, shape: &[usize], v: f64) -> BufferId {
        self.buffer_groups.push(group);
        self.store.add_buffer(name, Tensor::full(shape, v))
    }

    fn convs(&mut self, prefix: &str, group: u32, arch: &ArchitectureConfig) -> Vec<ConvUnit> {
        let mut cin = NUM_CHANNELS;
        let mut out = Vec::new();
        for (i, c) in arch.conv.iter().enumerate() {
            let p = format!("{prefix}.conv{i}");
            let fan = cin * c.kernel * c.kernel;
            out.push(ConvUnit {
                w: self.normal(&format!("{p}.w"), group, &[c.filters, cin, c.kernel, c.kernel], fan, 2.0),
                b: self.constant(&format!("{p}.b"), group, &[c.filters], 0.0),
                gamma: self.constant(&format!("{p}.gamma"), group, &[c.filters], 1.0),
                beta: self.constant(&format!("{p}.beta"), group, &[c.filters], 0.0),
                running: (
                    self.buffer(&format!("{p}.running_mean"), group, &[c.filters], 0.0),
                    self.buffer(&format!("{p}.running_var"), group, &[c.filters], 1.0),
                ),
                stride: c.stride,
                pad: c.kernel / 2,
            });
            cin = c.filters;
        }
        out
    }

    fn core(&mut self, prefix: &str, group: u32, features: usize, arch: &ArchitectureConfig, memory: bool) -> (Core, usize) {
        if memory {
            let h = arch.gru_cells;
            (
                Core::Gru {
                    wx: self.normal(&format!("{prefix}.gru.wx"), group, &[features, 3 * h], features, 1.0),
                    wh: self.normal(&format!("{prefix}.gru.wh"), group, &[h, 3 * h], h, 1.0),
                    b: self.constant(&format!("{prefix}.gru.b"), group, &[3 * h], 0.0),
                },
                h,
            )
        } else {
            let h = arch.cnn_hidden;
            (
                Core::Dense {
                    w: self.normal(&format!("{prefix}.dense.w"), group, &[features, h], features, 2.0),
                    b: self.constant(&format!("{prefix}.dense.b"), group, &[h], 0.0),
                },
                h,
            )
        }
    }

    fn head(&mut self, name: &str, group: u32, fan_in: usize, out: usize) -> (ParamId, ParamId) {
        (
            self.normal(&format!("{name}.w"), group, &[fan_in, out], fan_in, 1.0),
            self.constant(&format!("{name}.b"), group, &[out], 0.0),
        )
    }
}

fn dense_input(spec: &CourtSpec, states: &[&StepState]) -> Tensor {
    let n = spec.num_cells();
    let per = NUM_CHANNELS * n;
    let mut data = vec![0.0; states.len() * per];
    for (i, s) in states.iter().enumerate() {
        s.fill_dense(n, &mut data[i * per..(i + 1) * per]);
    }
    Tensor::from_vec(&[states.len(), NUM_CHANNELS, spec.micro_rows(), spec.micro_cols()], data).expect("consistent shape")
}

/// Dense `(N, 4, rows, cols)` encoding of a batch of steps.
pub fn encode_batch(spec: &CourtSpec, states: &[&StepState]) -> Tensor {
    dense_input(spec, states)
}

impl HpnModel {
    pub fn new(spec: &CourtSpec, arch: &ArchitectureConfig, seed: u64) -> Result<Self> {
        spec.validate()?;
        arch.validate(spec)?;
        let v = arch.variant;
        let (fc, fh, fw) = arch.feature_shape(spec);
        let features = fc * fh * fw;
        let k = spec.num_actions();
        let heads = spec.lookahead_steps;
        let g = spec.num_macro_boxes();
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            seed,
            buffer_groups: Vec::new(),
            ids: Vec::new(),
        };

        let convs = b.convs("micro", GROUP_MICRO, arch);
        let (core, hdim) = b.core("micro", GROUP_MICRO, features, arch, v.has_memory());
        let micro_heads = if v == Variant::HStack {
            (0..heads).map(|i| b.head(&format!("micro.head{i}"), GROUP_MICRO, hdim, k)).collect()
        } else {
            vec![b.head("micro.head", GROUP_MICRO, hdim, heads * k)]
        };
        let stack = if v == Variant::HStack {
            (1..heads)
                .map(|i| b.normal(&format!("micro.stack{i}"), GROUP_MICRO, &[k, k], k, 1.0))
                .collect()
        } else {
            Vec::new()
        };
        let micro = Branch {
            convs,
            core,
            heads: micro_heads,
        };

        let macro_ = if v.is_hierarchical() {
            let convs = if arch.shared_encoder {
                Vec::new()
            } else {
                b.convs("macro", GROUP_MACRO, arch)
            };
            let (core, hdim) = b.core("macro", GROUP_MACRO, features, arch, true);
            let head = b.head("macro.head", GROUP_MACRO, hdim, g);
            Some(Branch {
                convs,
                core,
                heads: vec![head],
            })
        } else {
            None
        };

        let transfer = if v.has_attention() {
            let t = arch.transfer_hidden;
            let (w1, b1) = b.head("transfer.l1", GROUP_TRANSFER, g, t);
            // A zero output layer starts the mask exactly uniform.
            let w2 = b.constant("transfer.l2.w", GROUP_TRANSFER, &[t, k], 0.0);
            let b2 = b.constant("transfer.l2.b", GROUP_TRANSFER, &[k], 0.0);
            Some(Transfer { w1, b1, w2, b2 })
        } else {
            None
        };

        let combined = if v == Variant::HCc {
            Some(b.head("combined.head", GROUP_COMBINED, hdim + g, heads * k))
        } else {
            None
        };
        let buffer_groups = b.buffer_groups;
        let param_ids = b.ids;

        Ok(HpnModel {
            spec: spec.clone(),
            arch: arch.clone(),
            store,
            micro,
            macro_,
            transfer,
            combined,
            stack,
            buffer_groups,
            param_ids,
        })
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn config_hash(&self) -> Vec<u8> {
        config_hash(&self.spec, &self.arch)
    }

    pub fn heads(&self) -> usize {
        self.spec.lookahead_steps
    }

    /// Group of every buffer, in buffer order.
    pub fn buffer_groups(&self) -> &[u32] {
        &self.buffer_groups
    }

    /// Parameter groups that exist in this variant.
    pub fn groups(&self) -> Vec<u32> {
        let mut g = vec![GROUP_MICRO];
        if self.macro_.is_some() {
            g.push(GROUP_MACRO);
        }
        if self.transfer.is_some() {
            g.push(GROUP_TRANSFER);
        }
        if self.combined.is_some() {
            g.push(GROUP_COMBINED);
        }
        g
    }

    pub fn param_ids_in(&self, group: u32) -> Vec<ParamId> {
        (0..self.store.len())
            .filter(|&i| self.store.params()[i].group == group)
            .map(|i| self.param_ids[i])
            .collect()
    }

    /// Zeroes the transfer net's output layer so the attention mask is
    /// exactly uniform.
    pub fn force_uniform_attention(&mut self) {
        if let Some(t) = &self.transfer {
            let (w2, b2) = (t.w2, t.b2);
            self.store.get_mut(w2).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            self.store.get_mut(b2).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Copies every micro-branch parameter and buffer from `other`, which
    /// must have an identically shaped micro branch.
    pub fn copy_micro_from(&mut self, other: &HpnModel) -> Result<()> {
        let src: Vec<_> = other.store.params().iter().filter(|p| p.group == GROUP_MICRO).collect();
        let dst: Vec<usize> = (0..self.store.len()).filter(|&i| self.store.params()[i].group == GROUP_MICRO).collect();
        if src.len() != dst.len() {
            return Err(Error::Config("micro branches differ".into()));
        }
        let ids = self.param_ids.clone();
        for (s, &d) in src.iter().zip(&dst) {
            let p = self.store.get_mut(ids[d]);
            if p.value.shape() != s.value.shape() || p.name != s.name {
                return Err(Error::Config(format!("micro parameter {} differs", s.name)));
            }
            p.value = s.value.clone();
        }
        let sb: Vec<_> = other
            .store
            .buffers()
            .iter()
            .zip(other.buffer_groups())
            .filter(|(_, &g)| g == GROUP_MICRO)
            .map(|(b, _)| b.value.clone())
            .collect();
        let db: Vec<usize> = (0..self.buffer_groups.len()).filter(|&i| self.buffer_groups[i] == GROUP_MICRO).collect();
        for (v, &i) in sb.into_iter().zip(&db) {
            self.store.buffers_mut()[i].value = v;
        }
        Ok(())
    }

    fn conv_stack(&self, g: &mut Graph, mut x: Var, convs: &[ConvUnit], noise: &mut Option<Noise>) -> Result<Var> {
        for c in convs {
            let (w, b, gamma, beta) = (g.param(c.w), g.param(c.b), g.param(c.gamma), g.param(c.beta));
            x = g.conv2d(x, w, b, c.stride, c.pad)?;
            x = g.batchnorm(x, gamma, beta, c.running)?;
            x = g.relu(x)?;
            if let Some(n) = noise.as_mut() {
                x = g.gaussian_noise(x, n.sigma, n.rng)?;
            }
        }
        Ok(x)
    }

    fn core_step(&self, g: &mut Graph, core: &Core, feat: Var, h: Option<Var>) -> Result<Var> {
        match *core {
            Core::Gru { wx, wh, b } => {
                let h = h.ok_or_else(|| Error::Config("recurrent branch needs a hidden state".into()))?;
                let (wx, wh, b) = (g.param(wx), g.param(wh), g.param(b));
                Ok(g.gru(feat, h, wx, wh, b)?)
            }
            Core::Dense { w, b } => {
                let (w, b) = (g.param(w), g.param(b));
                let y = g.linear(feat, w, Some(b))?;
                Ok(g.relu(y)?)
            }
        }
    }

    fn linear_head(&self, g: &mut Graph, h: Var, head: (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (g.param(head.0), g.param(head.1));
        Ok(g.linear(h, w, Some(b))?)
    }

    /// Pooled input shared by both branches.
    pub fn pyramid(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut x = x;
        for &k in &self.arch.pool_kernels {
            x = g.maxpool2d(x, k, k)?;
        }
        Ok(x)
    }

    /// One step of the network on the graph. `x` is the pooled input; the
    /// returned [`StepVars`] carry the new hidden states.
    pub fn step_graph(
        &self,
        g: &mut Graph,
        x: Var,
        h_micro: Option<Var>,
        h_macro: Option<Var>,
        need: Need,
        noise: &mut Option<Noise>,
    ) -> Result<StepVars> {
        let n = g.shape(x)[0];
        let k = self.spec.num_actions();
        let heads = self.heads();
        let mut out = StepVars::default();
        let need_micro = need.micro || (need.combined && self.combined.is_some());
        let need_macro = self.macro_.is_some() && (need.macro_ || need.transfer || (need.combined && self.combined.is_some()));

        let mut micro_feat = None;
        if need_micro || (need_macro && self.arch.shared_encoder) {
            let f = self.conv_stack(g, x, &self.micro.convs, noise)?;
            micro_feat = Some(f);
        }
        if need_micro {
            let f = micro_feat.expect("computed above");
            let len = g.value(f).len() / n;
            let flat = g.reshape(f, &[n, len])?;
            let h = self.core_step(g, &self.micro.core, flat, h_micro)?;
            out.h_micro = Some(h);
            let raw = if self.stack.is_empty() {
                let y = self.linear_head(g, h, self.micro.heads[0])?;
                g.reshape(y, &[n * heads, k])?
            } else {
                let mut prev = self.linear_head(g, h, self.micro.heads[0])?;
                let mut all = prev;
                for i in 1..heads {
                    let base = self.linear_head(g, h, self.micro.heads[i])?;
                    let p = g.softmax(prev)?;
                    let v = g.param(self.stack[i - 1]);
                    let link = g.linear(p, v, None)?;
                    prev = g.add(base, link)?;
                    all = g.concat(all, prev)?;
                }
                g.reshape(all, &[n * heads, k])?
            };
            out.raw = Some(raw);
        }
        if need_macro {
            let m = self.macro_.as_ref().expect("hierarchical");
            let f = if self.arch.shared_encoder {
                micro_feat.expect("shared encoder computed")
            } else {
                self.conv_stack(g, x, &m.convs, noise)?
            };
            let len = g.value(f).len() / n;
            let flat = g.reshape(f, &[n, len])?;
            let h = self.core_step(g, &m.core, flat, h_macro)?;
            out.h_macro = Some(h);
            let logits = self.linear_head(g, h, m.heads[0])?;
            out.macro_logits = Some(logits);
            if let (Some(t), true) = (&self.transfer, need.transfer) {
                let p = g.softmax(logits)?;
                let (w1, b1, w2, b2) = (g.param(t.w1), g.param(t.b1), g.param(t.w2), g.param(t.b2));
                let a = g.linear(p, w1, Some(b1))?;
                let a = g.relu(a)?;
                out.attention = Some(g.linear(a, w2, Some(b2))?);
            }
            if let (Some(c), true) = (self.combined, need.combined) {
                let p = g.softmax(logits)?;
                let cat = g.concat(out.h_micro.expect("micro computed"), p)?;
                let y = self.linear_head(g, cat, c)?;
                out.combined = Some(g.reshape(y, &[n * heads, k])?);
            }
        }
        Ok(out)
    }

    pub fn hidden_size(&self) -> usize {
        self.arch.gru_cells
    }

    fn zero_hidden(&self, batch: usize) -> Tensor {
        Tensor::zeros(&[batch, self.arch.gru_cells])
    }

    /// Zeroed recurrent state; empty for the memoryless CNN.
    pub fn reset_memory(&self, keys: &[usize]) -> PolicyMemory {
        PolicyMemory {
            keys: keys.to_vec(),
            step: 0,
            micro: self.variant().has_memory().then(|| self.zero_hidden(keys.len())),
            macro_: self.macro_.as_ref().map(|_| self.zero_hidden(keys.len())),
        }
    }

    /// Inference step for a batch of streams.
    pub fn forward_step(&self, states: &[&StepState], mem: &mut PolicyMemory) -> Result<Vec<StepOutput>> {
        let n = states.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.store, Mode::Eval);
        let x = g.input(dense_input(&self.spec, states))?;
        let x = self.pyramid(&mut g, x)?;
        let hm = match &mem.micro {
            Some(t) => Some(g.input(t.clone())?),
            None => None,
        };
        let hg = match &mem.macro_ {
            Some(t) => Some(g.input(t.clone())?),
            None => None,
        };
        let sv = self.step_graph(&mut g, x, hm, hg, Need::all(), &mut None)?;
        if let (Some(h), true) = (sv.h_micro, mem.micro.is_some()) {
            mem.micro = Some(g.value(h).clone());
        }
        if let (Some(h), true) = (sv.h_macro, mem.macro_.is_some()) {
            mem.macro_ = Some(g.value(h).clone());
        }
        mem.step += 1;
        let k = self.spec.num_actions();
        let heads = self.heads();
        let raw = g.value(sv.raw.expect("micro head")).data().to_vec();
        let macro_v = sv.macro_logits.map(|v| g.value(v).data().to_vec());
        let att_v = sv.attention.map(|v| g.value(v).data().to_vec());
        let comb_v = sv.combined.map(|v| g.value(v).data().to_vec());
        let gdim = self.spec.num_macro_boxes();
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let p_raw: Vec<Vec<f64>> = (0..heads).map(|h| softmax(&raw[(i * heads + h) * k..(i * heads + h + 1) * k])).collect();
            let p_macro = macro_v.as_ref().map(|m| softmax(&m[i * gdim..(i + 1) * gdim]));
            let attention = att_v.as_ref().map(|a| softmax(&a[i * k..(i + 1) * k]));
            let p_combined = if let Some(c) = &comb_v {
                (0..heads).map(|h| softmax(&c[(i * heads + h) * k..(i * heads + h + 1) * k])).collect()
            } else if let Some(a) = &attention {
                p_raw.iter().map(|p| p.iter().zip(a).map(|(x, y)| x * y).collect()).collect()
            } else {
                p_raw.clone()
            };
            outs.push(StepOutput {
                p_raw,
                p_macro,
                attention,
                p_combined,
            });
        }
        Ok(outs)
    }

    pub fn save(&self, path: &Path, meta: &[u8]) -> Result<()> {
        checkpoint::save(path, &self.store, &self.config_hash(), meta)?;
        Ok(())
    }

    /// Loads parameters saved from a model with the same configuration.
    pub fn load(&mut self, path: &Path) -> Result<Vec<u8>> {
        let hash = self.config_hash();
        Ok(checkpoint::load_into(path, &mut self.store, &hash)?)
    }
}

impl Policy for HpnModel {
    fn name(&self) -> String {
        self.variant().name().to_string()
    }

    fn spec(&self) -> &CourtSpec {
        &self.spec
    }

    fn has_macro(&self) -> bool {
        self.macro_.is_some()
    }

    fn has_attention(&self) -> bool {
        self.transfer.is_some()
    }

    fn begin(&self, keys: &[usize]) -> PolicyMemory {
        self.reset_memory(keys)
    }

    fn step(&self, states: &[&StepState], mem: &mut PolicyMemory) -> Result<Vec<StepOutput>> {
        self.forward_step(states, mem)
    }
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Replays weak labels as one-hot predictions. Stream keys index `labels`.
pub struct OraclePolicy {
    pub spec: CourtSpec,
    pub labels: Vec<WeakLabels>,
}

impl Policy for OraclePolicy {
    fn name(&self) -> String {
        "ORACLE".into()
    }

    fn spec(&self) -> &CourtSpec {
        &self.spec
    }

    fn has_macro(&self) -> bool {
        true
    }

    fn has_attention(&self) -> bool {
        true
    }

    fn begin(&self, keys: &[usize]) -> PolicyMemory {
        PolicyMemory {
            keys: keys.to_vec(),
            ..PolicyMemory::default()
        }
    }

    fn step(&self, states: &[&StepState], mem: &mut PolicyMemory) -> Result<Vec<StepOutput>> {
        let k = self.spec.num_actions();
        let t = mem.step;
        let mut out = Vec::with_capacity(states.len());
        for &key in mem.keys.iter().take(states.len()) {
            let l = self
                .labels
                .get(key)
                .ok_or_else(|| Error::Range(format!("no labels for stream {key}")))?;
            let t = t.min(l.len().saturating_sub(1));
            let p_raw: Vec<Vec<f64>> = l.micro[t].iter().map(|&a| one_hot(k, a)).collect();
            let attention = one_hot(k, l.attention[t]);
            let p_combined = p_raw.iter().map(|p| p.iter().zip(&attention).map(|(x, y)| x * y).collect()).collect();
            out.push(StepOutput {
                p_raw,
                p_macro: Some(one_hot(self.spec.num_macro_boxes(), l.macro_goals[t].0)),
                attention: Some(attention),
                p_combined,
            });
        }
        mem.step += 1;
        Ok(out)
    }
}

/// Emits the same action distribution at every step and for every head.
pub struct ConstantPolicy {
    pub spec: CourtSpec,
    pub action: VelocityAction,
}

impl Policy for ConstantPolicy {
    fn name(&self) -> String {
        "CONSTANT".into()
    }

    fn spec(&self) -> &CourtSpec {
        &self.spec
    }

    fn has_macro(&self) -> bool {
        false
    }

    fn has_attention(&self) -> bool {
        false
    }

    fn begin(&self, keys: &[usize]) -> PolicyMemory {
        PolicyMemory {
            keys: keys.to_vec(),
            ..PolicyMemory::default()
        }
    }

    fn step(&self, states: &[&StepState], mem: &mut PolicyMemory) -> Result<Vec<StepOutput>> {
        mem.step += 1;
        let p = one_hot(self.spec.num_actions(), self.spec.action_index(self.action));
        let heads = vec![p; self.spec.lookahead_steps];
        Ok(states
            .iter()
            .map(|_| StepOutput {
                p_raw: heads.clone(),
                p_macro: None,
                attention: None,
                p_combined: heads.clone(),
            })
            .collect())
    }
}
