//! Transformer gate: an encoder over one random walk and a decoder whose
//! single learned query token cross-attends to the encoded walk, followed by a
//! linear head of one logit per expert (or per class during imitation
//! pre-training).
//!
//! Layout of one walk's forward pass:
//!
//! ```text
//! walk L x 4 ──embed──▶ + positions ──▶ 8 × [x + MHA(LN x); x + FF(LN x)] ──▶ LN ──▶ memory
//! memory ──dec.embed──▶ M
//! query 1 x d ──▶ 8 × [q + MHA(LN q, M); q + FF(LN q)] ──▶ LN ──▶ head ──▶ logits
//! ```
//!
//! Per-mesh weights are the softmax of the walk logits averaged over walks.

use rand::seq::SliceRandom;

use crate::diff::loss::kl_divergence;
use crate::diff::nn::{self, ParamView};
use crate::diff::{Adam, Gradients, Graph, Mat, ParameterSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::rng::{chacha, derive_seed};
use crate::walk::{extract_walks, Walk};

pub const WALK_CHANNELS: usize = 4;
pub const EXPERT_HEAD: &str = "head.experts";
pub const CLASS_HEAD: &str = "head.classes";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    ExpertWeights,
    ClassImitation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub num_experts: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub head_mode: HeadMode,
    pub num_classes: usize,
}

impl GateConfig {
    /// Eight encoder and eight decoder blocks, `d_model = 64`, 4 heads, FF width 128.
    pub fn new(num_experts: usize, num_classes: usize) -> Self {
        Self {
            num_experts,
            encoder_layers: 8,
            decoder_layers: 8,
            d_model: 64,
            heads: 4,
            ff_width: 128,
            head_mode: HeadMode::ExpertWeights,
            num_classes,
        }
    }

    pub fn with_width(mut self, d_model: usize, heads: usize, ff_width: usize) -> Self {
        self.d_model = d_model;
        self.heads = heads;
        self.ff_width = ff_width;
        self
    }

    pub fn with_mode(mut self, mode: HeadMode) -> Self {
        self.head_mode = mode;
        self
    }

    pub fn output_len(&self) -> usize {
        match self.head_mode {
            HeadMode::ExpertWeights => self.num_experts,
            HeadMode::ClassImitation => self.num_classes,
        }
    }

    fn head_path(&self) -> &'static str {
        match self.head_mode {
            HeadMode::ExpertWeights => EXPERT_HEAD,
            HeadMode::ClassImitation => CLASS_HEAD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!("d_model {} not divisible by {} heads", self.d_model, self.heads)));
        }
        if self.output_len() == 0 || self.ff_width == 0 {
            return Err(Error::invalid("gate output and feed-forward widths must be positive"));
        }
        Ok(())
    }
}

impl GateConfig {
    /// Logits for one walk, `1 x output_len`.
    pub fn walk_logits(&self, g: &mut Graph, p: &ParamView, walk: &Walk) -> Result<Var> {
        let c = self;
        let len = walk.len();
        if len == 0 {
            return Err(Error::invalid("empty walk"));
        }
        let x = g.constant(Mat::new(len, WALK_CHANNELS, walk.features())?);
        let e = nn::linear(g, p, "embed", x)?;
        let pos = g.constant(nn::sinusoidal_positions(len, c.d_model));
        let mut h = g.add(e, pos)?;
        for i in 0..c.encoder_layers {
            h = nn::multi_head_attention(g, p, &format!("enc.{i}.attn"), h, c.heads)?;
            h = nn::feed_forward(g, p, &format!("enc.{i}.ff"), h)?;
        }
        let memory = nn::layer_norm(g, p, "enc.ln_f", h)?;
        let memory = nn::linear(g, p, "dec.embed", memory)?;
        let mut q = p.get(g, "dec.query")?;
        for i in 0..c.decoder_layers {
            q = nn::cross_attention(g, p, &format!("dec.{i}.xattn"), q, memory, c.heads)?;
            q = nn::feed_forward(g, p, &format!("dec.{i}.ff"), q)?;
        }
        let q = nn::layer_norm(g, p, "dec.ln_f", q)?;
        nn::linear(g, p, c.head_path(), q)
    }

    /// Mean of the walk logits, `1 x output_len`.
    pub fn walks_logits(&self, g: &mut Graph, p: &ParamView, walks: &[Walk]) -> Result<Var> {
        if walks.is_empty() {
            return Err(Error::invalid("at least one walk is required"));
        }
        let logits: Vec<Var> = walks
            .iter()
            .map(|w| self.walk_logits(g, p, w))
            .collect::<Result<_>>()?;
        if logits.len() == 1 {
            return Ok(logits[0]);
        }
        let stacked = g.concat_rows(&logits)?;
        Ok(g.mean_rows(stacked))
    }

}

/// Per-mesh softmax weights over the experts.
#[derive(Debug, Clone, PartialEq)]
pub struct GateWeights {
    pub per_expert: Vec<f64>,
}

impl GateWeights {
    /// Index of the largest weight; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.per_expert)
    }
}

/// First index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    pub config: GateConfig,
    pub params: ParameterSet,
}

fn init_head(params: &mut ParameterSet, config: &GateConfig, seed: u64) -> Result<()> {
    let mut rng = chacha(derive_seed(seed, &[0x4ead]));
    params.remove(&format!("{EXPERT_HEAD}.w"));
    params.remove(&format!("{EXPERT_HEAD}.b"));
    params.remove(&format!("{CLASS_HEAD}.w"));
    params.remove(&format!("{CLASS_HEAD}.b"));
    params.init_linear(&mut rng, config.head_path(), config.d_model, config.output_len())
}

fn is_head(path: &str) -> bool {
    path.starts_with("head.")
}

impl Gate {
    pub fn new(config: GateConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = chacha(seed);
        let mut p = ParameterSet::new();
        p.init_linear(&mut rng, "embed", WALK_CHANNELS, d)?;
        for i in 0..config.encoder_layers {
            nn::init_attention(&mut p, &mut rng, &format!("enc.{i}.attn"), d)?;
            nn::init_feed_forward(&mut p, &mut rng, &format!("enc.{i}.ff"), d, config.ff_width)?;
        }
        p.init_norm("enc.ln_f", d)?;
        p.init_linear(&mut rng, "dec.embed", d, d)?;
        p.insert("dec.query", crate::diff::xavier(&mut rng, 1, d))?;
        for i in 0..config.decoder_layers {
            nn::init_attention(&mut p, &mut rng, &format!("dec.{i}.xattn"), d)?;
            nn::init_feed_forward(&mut p, &mut rng, &format!("dec.{i}.ff"), d, config.ff_width)?;
        }
        p.init_norm("dec.ln_f", d)?;
        init_head(&mut p, &config, seed)?;
        Ok(Self { config, params: p })
    }

    /// Wraps existing parameters, checking the head matches the config.
    pub fn from_params(config: GateConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let w = params.get(&format!("{}.w", config.head_path()))?;
        if w.shape != vec![config.d_model, config.output_len()] {
            return Err(Error::shape(format!("gate head {:?} does not match config", w.shape)));
        }
        Ok(Self { config, params })
    }

    /// Same body, fresh head for `mode`.
    pub fn with_head(&self, mode: HeadMode, seed: u64) -> Result<Gate> {
        let config = self.config.clone().with_mode(mode);
        let mut params = self.params.clone();
        init_head(&mut params, &config, seed)?;
        Ok(Gate { config, params })
    }

    /// Logits for one walk, `1 x output_len`.
    pub fn forward_walk_graph(&self, g: &mut Graph, p: &ParamView, walk: &Walk) -> Result<Var> {
        self.config.walk_logits(g, p, walk)
    }

    /// Mean of the walk logits, `1 x output_len`.
    pub fn forward_walks_graph(&self, g: &mut Graph, p: &ParamView, walks: &[Walk]) -> Result<Var> {
        self.config.walks_logits(g, p, walks)
    }

    pub fn forward_walk(&self, walk: &Walk) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = ParamView::frozen(&self.params, "");
        let v = self.forward_walk_graph(&mut g, &p, walk)?;
        Ok(g.value(v).data.clone())
    }

    /// Averaged logits over `walk_count` walks drawn with `seed`.
    pub fn mesh_logits(&self, mesh: &Mesh, walk_count: usize, seed: u64) -> Result<Vec<f64>> {
        let walks = extract_walks(mesh, walk_count, seed)?;
        let mut g = Graph::new();
        let p = ParamView::frozen(&self.params, "");
        let v = self.forward_walks_graph(&mut g, &p, &walks)?;
        Ok(g.value(v).data.clone())
    }

    pub fn forward_mesh(&self, mesh: &Mesh, walk_count: usize, seed: u64) -> Result<GateWeights> {
        Ok(GateWeights { per_expert: softmax(&self.mesh_logits(mesh, walk_count, seed)?) })
    }
}

/// Standalone form of [`Gate::forward_walk`].
pub fn gate_forward_walk(gate: &Gate, walk: &Walk) -> Result<Vec<f64>> {
    gate.forward_walk(walk)
}

/// Standalone form of [`Gate::forward_mesh`].
pub fn gate_forward_mesh(gate: &Gate, mesh: &Mesh, walk_count: usize, seed: u64) -> Result<GateWeights> {
    gate.forward_mesh(mesh, walk_count, seed)
}

#[derive(Debug, Clone)]
pub struct ImitationConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub walks: usize,
    pub seed: u64,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-3, batch_size: 32, walks: crate::walk::TRAIN_WALKS, seed: 0 }
    }
}

/// Imitation loss for one mesh on a graph: `KL(target ‖ softmax(logits))`,
/// evaluated through log-softmax.
fn imitation_loss_graph(g: &mut Graph, logits: Var, target: &[f64]) -> Result<Var> {
    let logq = g.log_softmax_rows(logits);
    let p = g.constant(Mat::row_vector(target.to_vec()));
    let cross = g.mul(p, logq)?;
    let cross = g.sum(cross);
    let entropy: f64 = target
        .iter()
        .map(|&t| t * t.max(crate::diff::loss::PROB_FLOOR).ln())
        .sum();
    let neg = g.neg(cross);
    Ok(g.add_const(neg, entropy))
}

/// Mean `KL(expert ‖ gate)` over a set of meshes.
pub fn imitation_loss(gate: &Gate, data: &[(&Mesh, Vec<f64>)], walks: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    for (i, (mesh, target)) in data.iter().enumerate() {
        let logits = gate.mesh_logits(mesh, walks, derive_seed(seed, &[i as u64]))?;
        total += kl_divergence(target, &softmax(&logits))?;
    }
    Ok(total / data.len().max(1) as f64)
}

/// Trains a class-imitation gate to reproduce an expert's prediction vectors.
/// Returns the trained parameters and the mean training loss of each epoch.
pub fn pretrain_imitation(gate: &Gate, data: &[(&Mesh, Vec<f64>)], config: &ImitationConfig) -> Result<(ParameterSet, Vec<f64>)> {
    if gate.config.head_mode != HeadMode::ClassImitation {
        return Err(Error::invalid("imitation pre-training needs a class_imitation gate"));
    }
    for (m, t) in data {
        if t.len() != gate.config.num_classes {
            return Err(Error::shape(format!(
                "expert prediction for {} has length {}, expected {}",
                m.id,
                t.len(),
                gate.config.num_classes
            )));
        }
    }
    let mut params = gate.params.clone();
    let mut opt = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut chacha(derive_seed(config.seed, &[epoch as u64, 1])));
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size.max(1)).enumerate() {
            let mut grads = Gradients::new();
            for &i in batch {
                let (mesh, target) = &data[i];
                let walks = extract_walks(mesh, config.walks, derive_seed(config.seed, &[epoch as u64, b as u64, i as u64]))?;
                let mut g = Graph::new();
                let p = ParamView::tracked(&params, "");
                let logits = gate.config.walks_logits(&mut g, &p, &walks)?;
                let loss = imitation_loss_graph(&mut g, logits, target)?;
                let lv = g.value(loss).item();
                if !lv.is_finite() {
                    return Err(Error::NonFiniteLoss(format!("imitation loss on {}", mesh.id)));
                }
                epoch_loss += lv;
                let scaled = g.scale(loss, 1.0 / batch.len() as f64);
                grads.accumulate(&g.backward(scaled)?.params(&g));
            }
            opt.step(&mut params, &grads)?;
        }
        history.push(epoch_loss / data.len().max(1) as f64);
    }
    Ok((params, history))
}

/// Element-wise mean of the shared body of several pre-trained gates, with a
/// freshly initialized expert-weight head.
pub fn average_pretrained_gates(sets: &[ParameterSet], config: &GateConfig, seed: u64) -> Result<ParameterSet> {
    let first = sets.first().ok_or_else(|| Error::invalid("no gates to average"))?;
    let body: Vec<(&String, &Tensor)> = first.iter().filter(|(k, _)| !is_head(k)).collect();
    for s in &sets[1..] {
        let other: Vec<(&String, &Tensor)> = s.iter().filter(|(k, _)| !is_head(k)).collect();
        if other.len() != body.len() || other.iter().zip(&body).any(|(a, b)| a.0 != b.0 || a.1.shape != b.1.shape) {
            return Err(Error::shape("gate bodies differ in paths or shapes"));
        }
    }
    let n = sets.len() as f64;
    let mut out = ParameterSet::new();
    for (path, t) in body {
        let mut values = vec![0.0; t.values.len()];
        for s in sets {
            for (v, x) in values.iter_mut().zip(&s.get(path)?.values) {
                *v += x;
            }
        }
        values.iter_mut().for_each(|v| *v /= n);
        out.insert(path.clone(), Tensor::new(t.shape.clone(), values)?)?;
    }
    let head_config = config.clone().with_mode(HeadMode::ExpertWeights);
    init_head(&mut out, &head_config, seed)?;
    Ok(out)
}
