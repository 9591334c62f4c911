//! Mixture-of-experts training: the expert chooser, similarity and diversity
//! losses, one environment step per batch, and the epoch loop that asks a
//! λ policy for the similarity weight of the next batch.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::diff::loss::{cosine_distance_graph, cross_entropy, cross_entropy_graph, kl_divergence, kl_divergence_graph, mse_graph};
use crate::diff::nn::ParamView;
use crate::diff::{Adam, Gradients, Graph, Mat, ParameterSet, Var};
use crate::error::{Error, Result};
use crate::experts::Expert;
use crate::gate::{argmax, Gate, GateConfig, HeadMode, ImitationConfig};
use crate::mesh::{Mesh, Task};
use crate::metrics::{self, Descriptor};
use crate::rng::{chacha, derive_seed, hash_str};
use crate::walk::{extract_walks, INFER_WALKS, TRAIN_WALKS};

pub const GATE_PREFIX: &str = "gate.";

pub fn expert_prefix(j: usize) -> String {
    format!("expert.{j}.")
}

/// Pairwise divergence used by the similarity loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Kld,
    Cosine,
    Mse,
    None,
}

impl Similarity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Similarity::Kld => "kld",
            Similarity::Cosine => "cosine",
            Similarity::Mse => "mse",
            Similarity::None => "none",
        }
    }
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kld" => Ok(Similarity::Kld),
            "cosine" => Ok(Similarity::Cosine),
            "mse" => Ok(Similarity::Mse),
            "none" => Ok(Similarity::None),
            other => Err(Error::invalid(format!("unknown similarity loss {other}"))),
        }
    }
}

/// Index of the largest gate weight per mesh; ties go to the lowest index.
pub fn expert_chooser(per_mesh_weights: &[Vec<f64>]) -> Vec<usize> {
    per_mesh_weights.iter().map(|w| argmax(w)).collect()
}

/// Majority vote over the experts' argmax classes, ties to the lowest class.
/// `predictions` is indexed `[mesh][expert][class]`.
pub fn hard_voting_ensemble(predictions: &[Vec<Vec<f64>>]) -> Result<Vec<usize>> {
    predictions
        .iter()
        .map(|experts| {
            let classes = experts.first().ok_or_else(|| Error::invalid("ensemble needs at least one expert"))?.len();
            let mut votes = vec![0usize; classes];
            for p in experts {
                if p.len() != classes {
                    return Err(Error::shape("experts disagree on the class count"));
                }
                votes[argmax(p)] += 1;
            }
            let best = *votes.iter().max().unwrap_or(&0);
            Ok(votes.iter().position(|&v| v == best).unwrap_or(0))
        })
        .collect()
}

fn pair_divergence(p: &[f64], q: &[f64], kind: Similarity) -> Result<f64> {
    Ok(match kind {
        // Clamped so rounding cannot push a divergence below zero.
        Similarity::Kld => kl_divergence(p, q)?.max(0.0),
        Similarity::Cosine => {
            let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
            let np: f64 = p.iter().map(|a| a * a).sum();
            let nq: f64 = q.iter().map(|a| a * a).sum();
            (1.0 - dot / (np * nq).max(1e-24).sqrt()).max(0.0)
        }
        Similarity::Mse => p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64,
        Similarity::None => 0.0,
    })
}

/// `(1/B) Σ_i Σ_j Σ_{w≠j} D(V_j ‖ V_w)` over predictions indexed `[mesh][expert][class]`.
pub fn similarity_loss(predictions: &[Vec<Vec<f64>>], kind: Similarity) -> Result<f64> {
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for experts in predictions {
        for (j, vj) in experts.iter().enumerate() {
            for (w, vw) in experts.iter().enumerate() {
                if w != j {
                    total += pair_divergence(vj, vw, kind)?;
                }
            }
        }
    }
    Ok(total / predictions.len() as f64)
}

/// `(1/B) Σ_i Σ_j s_j^(i) CE(V_j^(i), T^(i))`.
pub fn diversity_loss(per_mesh_weights: &[Vec<f64>], predictions: &[Vec<Vec<f64>>], targets: &[usize]) -> Result<f64> {
    if per_mesh_weights.len() != predictions.len() || predictions.len() != targets.len() {
        return Err(Error::shape("weights, predictions and targets differ in batch size"));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ((w, experts), &t) in per_mesh_weights.iter().zip(predictions).zip(targets) {
        if w.len() != experts.len() {
            return Err(Error::shape("one gate weight per expert is required"));
        }
        for (s, v) in w.iter().zip(experts) {
            total += s * cross_entropy(v, t)?;
        }
    }
    Ok(total / predictions.len() as f64)
}

pub fn joint_loss(l_sim: f64, l_div: f64, lambda: f64) -> f64 {
    lambda * l_sim + l_div
}

/// Similarity loss of one mesh on a graph. Row-wise divergences are averaged
/// over rows, so per-edge predictions contribute a per-edge mean.
pub fn similarity_graph(g: &mut Graph, predictions: &[Var], kind: Similarity) -> Result<Var> {
    let mut terms = Vec::new();
    if kind != Similarity::None {
        for (j, &vj) in predictions.iter().enumerate() {
            for (w, &vw) in predictions.iter().enumerate() {
                if w == j {
                    continue;
                }
                terms.push(match kind {
                    Similarity::Kld => kl_divergence_graph(g, vj, vw)?,
                    Similarity::Cosine => cosine_distance_graph(g, vj, vw)?,
                    _ => mse_graph(g, vj, vw)?,
                });
            }
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Mat::scalar(0.0)));
    }
    let stacked = g.concat_rows(&terms)?;
    Ok(g.sum(stacked))
}

/// Diversity loss of one mesh on a graph: `Σ_j s_j CE(V_j, T)` with `weights` 1×J.
pub fn diversity_graph(g: &mut Graph, weights: Var, predictions: &[Var], targets: &[usize]) -> Result<Var> {
    if g.value(weights).cols != predictions.len() {
        return Err(Error::shape("one gate weight per expert is required"));
    }
    let mut terms = Vec::with_capacity(predictions.len());
    for (j, &v) in predictions.iter().enumerate() {
        let ce = cross_entropy_graph(g, v, targets)?;
        let s = g.slice_cols(weights, j, 1)?;
        terms.push(g.mul(ce, s)?);
    }
    let stacked = g.concat_rows(&terms)?;
    Ok(g.sum(stacked))
}

/// Gate and experts trained together.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeSystem {
    pub gate: Gate,
    pub experts: Vec<Expert>,
    pub task: Task,
}

impl MoeSystem {
    pub fn new(gate: Gate, experts: Vec<Expert>, task: Task) -> Result<Self> {
        if gate.config.head_mode != HeadMode::ExpertWeights {
            return Err(Error::invalid("the MoE gate must emit expert weights"));
        }
        if gate.config.num_experts != experts.len() {
            return Err(Error::shape(format!(
                "gate has {} outputs for {} experts",
                gate.config.num_experts,
                experts.len()
            )));
        }
        if let Some(e) = experts.iter().find(|e| e.num_outputs() != gate.config.num_classes) {
            return Err(Error::shape(format!("expert {} has {} outputs", e.name, e.num_outputs())));
        }
        Ok(Self { gate, experts, task })
    }

    pub fn num_classes(&self) -> usize {
        self.gate.config.num_classes
    }

    /// Every parameter, gate under `gate.` and expert `j` under `expert.j.`.
    pub fn to_params(&self) -> Result<ParameterSet> {
        let mut out = experts_to_params(&self.experts)?;
        out.extend_prefixed(GATE_PREFIX, &self.gate.params)?;
        Ok(out)
    }

    /// Replaces parameters from [`MoeSystem::to_params`] output. Paths and
    /// shapes must match the current system exactly.
    pub fn load_params(&mut self, set: &ParameterSet) -> Result<()> {
        check_layout(&self.to_params()?, set)?;
        self.gate.params = set.sub_set(GATE_PREFIX);
        assign_experts(&mut self.experts, set);
        Ok(())
    }
}

/// Trainable expert parameters, expert `j` under `expert.j.`.
pub fn experts_to_params(experts: &[Expert]) -> Result<ParameterSet> {
    let mut out = ParameterSet::new();
    for (j, e) in experts.iter().enumerate() {
        if let Some(p) = e.params() {
            out.extend_prefixed(&expert_prefix(j), p)?;
        }
    }
    Ok(out)
}

/// Inverse of [`experts_to_params`], with the same strictness as
/// [`MoeSystem::load_params`].
pub fn load_expert_params(experts: &mut [Expert], set: &ParameterSet) -> Result<()> {
    check_layout(&experts_to_params(experts)?, set)?;
    assign_experts(experts, set);
    Ok(())
}

fn assign_experts(experts: &mut [Expert], set: &ParameterSet) {
    for (j, e) in experts.iter_mut().enumerate() {
        if let Some(p) = e.params_mut() {
            *p = set.sub_set(&expert_prefix(j));
        }
    }
}

fn check_layout(expected: &ParameterSet, set: &ParameterSet) -> Result<()> {
    if expected.len() != set.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {}", expected.len(), set.len())));
    }
    for (path, t) in expected.iter() {
        let got = set.get(path).map_err(|_| Error::Checkpoint(format!("missing {path}")))?;
        if got.shape != t.shape {
            return Err(Error::Checkpoint(format!("{path}: shape {:?}, expected {:?}", got.shape, t.shape)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub gate_lr: f64,
    pub expert_lr: f64,
    pub walks_train: usize,
    pub walks_infer: usize,
    pub similarity: Similarity,
    /// Whether trainable experts are updated during MoE training.
    pub finetune_experts: bool,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            gate_lr: 1e-3,
            expert_lr: 1e-3,
            walks_train: TRAIN_WALKS,
            walks_infer: INFER_WALKS,
            similarity: Similarity::Kld,
            finetune_experts: true,
            seed: 0,
        }
    }
}

/// Optimizer state for the gate and each expert.
#[derive(Debug, Clone)]
pub struct MoeOptimizer {
    pub gate: Adam,
    pub experts: Vec<Adam>,
}

impl MoeOptimizer {
    pub fn new(system: &MoeSystem, config: &TrainerConfig) -> Self {
        Self {
            gate: Adam::new(config.gate_lr),
            experts: system.experts.iter().map(|_| Adam::new(config.expert_lr)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub sim: f64,
    pub div: f64,
    pub joint: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// Column mean of `per_mesh_weights`.
    pub state: Vec<f64>,
    pub reward: f64,
    pub chosen: Vec<usize>,
    pub per_mesh_weights: Vec<Vec<f64>>,
    pub loss_values: LossValues,
}

/// Supervision targets per output row: the class, or every edge label.
pub fn mesh_targets(task: Task, mesh: &Mesh) -> Result<Vec<usize>> {
    match task {
        Task::Segmentation => mesh
            .edge_labels
            .clone()
            .ok_or_else(|| Error::invalid(format!("mesh {} has no edge labels", mesh.id))),
        _ => mesh
            .class_label
            .map(|c| vec![c])
            .ok_or_else(|| Error::invalid(format!("mesh {} has no class label", mesh.id))),
    }
}

fn row_argmax(m: &Mat) -> Vec<usize> {
    (0..m.rows).map(|r| argmax(m.row(r))).collect()
}

/// Task reward of chosen predictions: instance accuracy, mAP within the batch,
/// or mean length-weighted edge accuracy.
pub fn task_reward(task: Task, meshes: &[&Mesh], predictions: &[Mat]) -> Result<f64> {
    if meshes.len() != predictions.len() || meshes.is_empty() {
        return Err(Error::shape("one prediction per mesh is required"));
    }
    match task {
        Task::Classification => {
            let pred: Vec<usize> = predictions.iter().map(|p| argmax(p.row(0))).collect();
            let truth = meshes.iter().map(|m| mesh_targets(task, m).map(|t| t[0])).collect::<Result<Vec<_>>>()?;
            metrics::mean_instance_accuracy(&pred, &truth)
        }
        Task::Retrieval => {
            let corpus = meshes
                .iter()
                .zip(predictions)
                .map(|(m, p)| {
                    Ok(Descriptor { id: m.id.clone(), class: mesh_targets(task, m)?[0], vector: p.row(0).to_vec() })
                })
                .collect::<Result<Vec<_>>>()?;
            let ranked: Vec<_> = metrics::rank_corpus(&corpus).into_iter().map(|(r, _)| r).collect();
            metrics::mean_average_precision(&ranked, metrics::DEFAULT_CUTOFF)
        }
        Task::Segmentation => {
            let mut total = 0.0;
            for (m, p) in meshes.iter().zip(predictions) {
                let lengths: Vec<f64> = m.edges.iter().map(|e| e.length).collect();
                total += metrics::edge_accuracy(&row_argmax(p), &mesh_targets(task, m)?, &lengths)?;
            }
            Ok(total / meshes.len() as f64)
        }
    }
}

fn check_finite(v: f64, what: &str, mesh: &Mesh) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss(format!("{what} on mesh {}", mesh.id)))
    }
}

/// Graph nodes of one mesh's contribution to the joint loss.
#[derive(Debug, Clone)]
pub struct MeshTerms {
    /// Gate weights, 1×J.
    pub weights: Var,
    pub predictions: Vec<Var>,
    pub l_sim: Var,
    pub l_div: Var,
    /// `λ L_sim + L_div`.
    pub joint: Var,
}

/// Builds the joint loss of one mesh. The gate reads its parameters through
/// `gate_view`; trainable experts are tracked under `expert.j.` when
/// fine-tuning is enabled and enter as constants otherwise.
pub fn mesh_terms(
    g: &mut Graph,
    system: &MoeSystem,
    gate_view: &ParamView,
    mesh: &Mesh,
    lambda: f64,
    config: &TrainerConfig,
    seed: u64,
) -> Result<MeshTerms> {
    let targets = mesh_targets(system.task, mesh)?;
    let walks = extract_walks(mesh, config.walks_train, derive_seed(seed, &[0]))?;
    let logits = system.gate.config.walks_logits(g, gate_view, &walks)?;
    let weights = g.softmax_rows(logits);
    let mut predictions = Vec::with_capacity(system.experts.len());
    for (j, e) in system.experts.iter().enumerate() {
        let prefix = expert_prefix(j);
        let track = (config.finetune_experts && e.is_trainable()).then_some(prefix.as_str());
        predictions.push(e.forward(g, mesh, derive_seed(seed, &[1, j as u64]), track)?);
    }
    let l_sim = similarity_graph(g, &predictions, config.similarity)?;
    let l_div = diversity_graph(g, weights, &predictions, &targets)?;
    let scaled_sim = g.scale(l_sim, lambda);
    let joint = g.add(scaled_sim, l_div)?;
    Ok(MeshTerms { weights, predictions, l_sim, l_div, joint })
}

/// One environment step: forward gate and experts on the batch, compute the
/// joint loss with weight `lambda`, backpropagate, and update the gate and
/// trainable experts. The reward uses the predictions before the update.
pub fn train_iteration(
    system: &mut MoeSystem,
    batch: &[&Mesh],
    lambda: f64,
    opt: &mut MoeOptimizer,
    config: &TrainerConfig,
    seed: u64,
) -> Result<BatchOutcome> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let b = batch.len() as f64;
    let mut grads = Gradients::new();
    let mut weights_out = Vec::with_capacity(batch.len());
    let mut chosen_preds = Vec::with_capacity(batch.len());
    let mut losses = LossValues { sim: 0.0, div: 0.0, joint: 0.0 };
    for (i, mesh) in batch.iter().enumerate() {
        let mut g = Graph::new();
        let view = ParamView::tracked(&system.gate.params, GATE_PREFIX);
        let seed = derive_seed(seed, &[i as u64, hash_str(&mesh.id)]);
        let MeshTerms { weights, predictions: preds, l_sim, l_div, joint } =
            mesh_terms(&mut g, system, &view, mesh, lambda, config, seed)?;
        let (vs, vd, vj) = (g.value(l_sim).item(), g.value(l_div).item(), g.value(joint).item());
        check_finite(vj, "joint loss", mesh)?;
        losses.sim += vs / b;
        losses.div += vd / b;
        losses.joint += vj / b;

        let w = g.value(weights).row(0).to_vec();
        chosen_preds.push(g.value(preds[argmax(&w)]).clone());
        weights_out.push(w);

        let loss = g.scale(joint, 1.0 / b);
        grads.accumulate(&g.backward(loss)?.params(&g));
    }
    let chosen = expert_chooser(&weights_out);
    let reward = task_reward(system.task, batch, &chosen_preds)?;

    opt.gate.step(&mut system.gate.params, &grads.sub_set(GATE_PREFIX))?;
    if config.finetune_experts {
        for (j, e) in system.experts.iter_mut().enumerate() {
            if let Some(p) = e.params_mut() {
                opt.experts[j].step(p, &grads.sub_set(&expert_prefix(j)))?;
            }
        }
    }

    let mut state = vec![0.0; system.experts.len()];
    for w in &weights_out {
        for (s, v) in state.iter_mut().zip(w) {
            *s += v / b;
        }
    }
    Ok(BatchOutcome { state, reward, chosen, per_mesh_weights: weights_out, loss_values: losses })
}

/// Source of the similarity weight λ for each batch.
pub trait LambdaPolicy {
    /// Observes the state and reward produced by the previous λ and returns
    /// the next one. `terminal` marks the last batch of an epoch.
    fn next_lambda(&mut self, state: &[f64], reward: f64, terminal: bool) -> Result<f64>;
}

/// Constant λ; λ = 0 is plain diversity-only MoE training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticLambda(pub f64);

impl LambdaPolicy for StaticLambda {
    fn next_lambda(&mut self, _: &[f64], _: f64, _: bool) -> Result<f64> {
        Ok(self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub lambda: f64,
    pub losses: LossValues,
    pub reward: f64,
    /// Fraction of the batch routed to each expert.
    pub selection: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub expert_names: Vec<String>,
    pub records: Vec<IterationRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,iteration,lambda,L_sim,L_div,L_joint,reward");
        for n in &self.expert_names {
            let _ = write!(out, ",select_{n}");
        }
        out.push('\n');
        for r in &self.records {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{}",
                r.epoch, r.iteration, r.lambda, r.losses.sim, r.losses.div, r.losses.joint, r.reward
            );
            for s in &r.selection {
                let _ = write!(out, ",{s}");
            }
            out.push('\n');
        }
        out
    }

    /// `iteration,lambda` pairs for plotting the λ trace.
    pub fn lambda_csv(&self) -> String {
        let mut out = String::from("iteration,lambda\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{}", r.iteration, r.lambda);
        }
        out
    }
}

/// Epoch loop: each batch consumes the current λ and the policy turns the
/// resulting (state, reward) into the next λ. After every epoch `on_epoch` is
/// called with the epoch index; returning `true` stops training.
pub fn train_run<P, F>(
    system: &mut MoeSystem,
    train: &[&Mesh],
    policy: &mut P,
    config: &TrainerConfig,
    epochs: usize,
    mut on_epoch: F,
) -> Result<TrainLog>
where
    P: LambdaPolicy + ?Sized,
    F: FnMut(usize, &MoeSystem) -> Result<bool>,
{
    let mut log = TrainLog { expert_names: system.experts.iter().map(|e| e.name.clone()).collect(), records: Vec::new() };
    if epochs == 0 {
        return Ok(log);
    }
    if train.is_empty() || config.batch_size == 0 {
        return Err(Error::invalid("training needs meshes and a positive batch size"));
    }
    let j = system.experts.len();
    let mut opt = MoeOptimizer::new(system, config);
    let mut lambda = policy.next_lambda(&vec![1.0 / j as f64; j], 0.0, false)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut iteration = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut chacha(derive_seed(config.seed, &[epoch as u64, 0x5eed])));
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for (k, idx) in batches.iter().enumerate() {
            let batch: Vec<&Mesh> = idx.iter().map(|&i| train[i]).collect();
            let seed = derive_seed(config.seed, &[epoch as u64, k as u64]);
            let out = train_iteration(system, &batch, lambda, &mut opt, config, seed)?;
            let mut selection = vec![0.0; j];
            for &c in &out.chosen {
                selection[c] += 1.0 / batch.len() as f64;
            }
            log.records.push(IterationRecord {
                epoch,
                iteration,
                lambda,
                losses: out.loss_values,
                reward: out.reward,
                selection,
            });
            iteration += 1;
            lambda = policy.next_lambda(&out.state, out.reward, k + 1 == batches.len())?;
        }
        if on_epoch(epoch, system)? {
            break;
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub weights: Vec<f64>,
    pub chosen: usize,
    /// The chosen expert's output: one row, or one row per edge.
    pub output: Mat,
}

/// Gate weights from `walks` walks, then the argmax expert's prediction.
pub fn inference(system: &MoeSystem, mesh: &Mesh, walks: usize, seed: u64) -> Result<Prediction> {
    let weights = system.gate.forward_mesh(mesh, walks, derive_seed(seed, &[0]))?.per_expert;
    let chosen = argmax(&weights);
    let output = system.experts[chosen].predict(mesh, derive_seed(seed, &[1, chosen as u64]))?;
    Ok(Prediction { weights, chosen, output })
}

fn mesh_seed(seed: u64, mesh: &Mesh) -> u64 {
    derive_seed(seed, &[hash_str(&mesh.id)])
}

/// Every expert's output on one mesh.
pub fn all_expert_predictions(system: &MoeSystem, mesh: &Mesh, seed: u64) -> Result<Vec<Mat>> {
    system
        .experts
        .iter()
        .enumerate()
        .map(|(j, e)| e.predict(mesh, derive_seed(seed, &[1, j as u64])))
        .collect()
}

/// Hard-voting prediction for one mesh: votes are taken per output row and
/// returned as one-hot rows.
pub fn ensemble_predict(system: &MoeSystem, mesh: &Mesh, seed: u64) -> Result<Mat> {
    let preds = all_expert_predictions(system, mesh, seed)?;
    let rows = preds[0].rows;
    let c = system.num_classes();
    let per_row: Vec<Vec<Vec<f64>>> =
        (0..rows).map(|r| preds.iter().map(|p| p.row(r).to_vec()).collect()).collect();
    let votes = hard_voting_ensemble(&per_row)?;
    let mut data = vec![0.0; rows * c];
    for (r, v) in votes.iter().enumerate() {
        data[r * c + v] = 1.0;
    }
    Mat::new(rows, c, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub method: String,
    pub metrics: Vec<(String, f64)>,
    /// Chosen expert per mesh; empty for the ensemble.
    pub chosen: Vec<usize>,
    pub outputs: Vec<Mat>,
}

impl Evaluation {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Task metrics of per-mesh outputs: accuracy; plus mAP and NDCG over the
/// evaluated meshes for retrieval; edge and face accuracy for segmentation.
pub fn score_outputs(task: Task, meshes: &[&Mesh], outputs: &[Mat]) -> Result<Vec<(String, f64)>> {
    match task {
        Task::Segmentation => {
            let (mut edge, mut face) = (0.0, 0.0);
            for (m, out) in meshes.iter().zip(outputs) {
                let pred = row_argmax(out);
                let lengths: Vec<f64> = m.edges.iter().map(|e| e.length).collect();
                edge += metrics::edge_accuracy(&pred, &mesh_targets(task, m)?, &lengths)?;
                let truth = m
                    .face_labels
                    .as_ref()
                    .ok_or_else(|| Error::invalid(format!("mesh {} has no face labels", m.id)))?;
                face += metrics::face_accuracy(&m.face_labels_from_edges(&pred)?, truth)?;
            }
            let n = meshes.len() as f64;
            Ok(vec![("edge_accuracy".into(), edge / n), ("face_accuracy".into(), face / n)])
        }
        _ => {
            let pred: Vec<usize> = outputs.iter().map(|o| argmax(o.row(0))).collect();
            let truth = meshes.iter().map(|m| mesh_targets(task, m).map(|t| t[0])).collect::<Result<Vec<_>>>()?;
            let mut out = vec![("accuracy".to_string(), metrics::mean_instance_accuracy(&pred, &truth)?)];
            if task == Task::Retrieval {
                let corpus: Vec<Descriptor> = meshes
                    .iter()
                    .zip(outputs)
                    .zip(&truth)
                    .map(|((m, o), &c)| Descriptor { id: m.id.clone(), class: c, vector: o.row(0).to_vec() })
                    .collect();
                let ranked: Vec<_> = metrics::rank_corpus(&corpus).into_iter().map(|(r, _)| r).collect();
                out.push(("mAP".into(), metrics::mean_average_precision(&ranked, metrics::DEFAULT_CUTOFF)?));
                out.push(("NDCG".into(), metrics::ndcg(&ranked, metrics::DEFAULT_CUTOFF)?));
            }
            Ok(out)
        }
    }
}

pub fn evaluate(system: &MoeSystem, meshes: &[&Mesh], walks: usize, seed: u64) -> Result<Evaluation> {
    if meshes.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let mut chosen = Vec::with_capacity(meshes.len());
    let mut outputs = Vec::with_capacity(meshes.len());
    for m in meshes {
        let p = inference(system, m, walks, mesh_seed(seed, m))?;
        chosen.push(p.chosen);
        outputs.push(p.output);
    }
    let metrics = score_outputs(system.task, meshes, &outputs)?;
    Ok(Evaluation { method: "moe".into(), metrics, chosen, outputs })
}

pub fn evaluate_ensemble(system: &MoeSystem, meshes: &[&Mesh], seed: u64) -> Result<Evaluation> {
    if meshes.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let outputs = meshes
        .iter()
        .map(|m| ensemble_predict(system, m, mesh_seed(seed, m)))
        .collect::<Result<Vec<_>>>()?;
    let metrics = score_outputs(system.task, meshes, &outputs)?;
    Ok(Evaluation { method: "ensemble".into(), metrics, chosen: Vec::new(), outputs })
}

/// Fraction of meshes of each class routed to each expert, `[class][expert]`.
pub fn selection_rates(meshes: &[&Mesh], chosen: &[usize], num_classes: usize, num_experts: usize) -> Vec<Vec<f64>> {
    let mut counts = vec![vec![0.0; num_experts]; num_classes];
    let mut totals = vec![0.0; num_classes];
    for (m, &c) in meshes.iter().zip(chosen) {
        if let Some(k) = m.class_label.filter(|&k| k < num_classes) {
            counts[k][c] += 1.0;
            totals[k] += 1.0;
        }
    }
    for (row, t) in counts.iter_mut().zip(totals) {
        if t > 0.0 {
            row.iter_mut().for_each(|v| *v /= t);
        }
    }
    counts
}

/// Imitation target of an expert on a mesh: its prediction, averaged over rows
/// for per-edge experts.
pub fn imitation_target(expert: &Expert, mesh: &Mesh, seed: u64) -> Result<Vec<f64>> {
    let p = expert.predict(mesh, seed)?;
    let mut out = vec![0.0; p.cols];
    for r in 0..p.rows {
        for (o, v) in out.iter_mut().zip(p.row(r)) {
            *o += v / p.rows as f64;
        }
    }
    Ok(out)
}

/// Pre-trains one class-imitation gate per expert from a shared initialization
/// and averages their bodies into an expert-weight gate. Also returns each
/// imitation run's loss history.
/// One imitation run per expert, all from the same class-imitation start.
/// Returns each expert's gate parameters with its loss history.
pub fn imitation_gates(
    config: &GateConfig,
    experts: &[Expert],
    meshes: &[&Mesh],
    imitation: &ImitationConfig,
    seed: u64,
) -> Result<Vec<(ParameterSet, Vec<f64>)>> {
    let start = Gate::new(config.clone().with_mode(HeadMode::ClassImitation), seed)?;
    experts
        .iter()
        .enumerate()
        .map(|(j, e)| {
            let data = meshes
                .iter()
                .map(|m| Ok((*m, imitation_target(e, m, derive_seed(seed, &[j as u64, hash_str(&m.id)]))?)))
                .collect::<Result<Vec<_>>>()?;
            let cfg = ImitationConfig { seed: derive_seed(imitation.seed, &[j as u64]), ..imitation.clone() };
            crate::gate::pretrain_imitation(&start, &data, &cfg)
        })
        .collect()
}

pub fn init_gate_from_experts(
    config: &GateConfig,
    experts: &[Expert],
    meshes: &[&Mesh],
    imitation: &ImitationConfig,
    seed: u64,
) -> Result<(Gate, Vec<Vec<f64>>)> {
    let (sets, histories): (Vec<_>, Vec<_>) = imitation_gates(config, experts, meshes, imitation, seed)?.into_iter().unzip();
    let weights_config = config.clone().with_mode(HeadMode::ExpertWeights);
    let params = crate::gate::average_pretrained_gates(&sets, &weights_config, seed)?;
    Ok((Gate::from_params(weights_config, params)?, histories))
}
