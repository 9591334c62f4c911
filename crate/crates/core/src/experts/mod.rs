//! Experts: frozen or trainable models that map a mesh to a distribution
//! over classes (one row) or over segment labels (one row per edge).

mod nets;
mod oracle;

use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::SliceRandom;

pub use nets::{walk_step_features, edge_features, face_features, EdgeSegmenter, FaceMlp, WalkRnn, DEFAULT_HIDDEN};
pub use oracle::{OffSpecialty, ScriptedOracle};

use crate::diff::loss::cross_entropy_graph;
use crate::diff::nn::ParamView;
use crate::diff::{Adam, Gradients, Graph, Mat, ParameterSet, Var};
use crate::error::{Error, Result};
use crate::mesh::{Mesh, Task};
use crate::rng::{chacha, derive_seed, hash_str};

#[derive(Debug, Clone, PartialEq)]
pub enum ExpertModel {
    WalkRnn(WalkRnn),
    FaceMlp(FaceMlp),
    EdgeSegmenter(EdgeSegmenter),
    Oracle(ScriptedOracle),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    pub name: String,
    pub model: ExpertModel,
}

impl Expert {
    pub fn new(name: impl Into<String>, model: ExpertModel) -> Self {
        Self { name: name.into(), model }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn params(&self) -> Option<&ParameterSet> {
        match &self.model {
            ExpertModel::WalkRnn(m) => Some(&m.params),
            ExpertModel::FaceMlp(m) => Some(&m.params),
            ExpertModel::EdgeSegmenter(m) => Some(&m.params),
            ExpertModel::Oracle(_) => None,
        }
    }

    pub fn params_mut(&mut self) -> Option<&mut ParameterSet> {
        match &mut self.model {
            ExpertModel::WalkRnn(m) => Some(&mut m.params),
            ExpertModel::FaceMlp(m) => Some(&mut m.params),
            ExpertModel::EdgeSegmenter(m) => Some(&mut m.params),
            ExpertModel::Oracle(_) => None,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.params().is_some()
    }

    pub fn num_outputs(&self) -> usize {
        match &self.model {
            ExpertModel::WalkRnn(m) => m.num_classes,
            ExpertModel::FaceMlp(m) => m.num_classes,
            ExpertModel::EdgeSegmenter(m) => m.num_labels,
            ExpertModel::Oracle(m) => m.num_classes,
        }
    }

    /// True when the output has one row per mesh edge.
    pub fn per_edge(&self) -> bool {
        matches!(self.model, ExpertModel::EdgeSegmenter(_))
    }

    /// Places the expert's prediction on `g`. With `prefix` set, parameters are
    /// tracked under `prefix + path`; otherwise they enter as constants.
    pub fn forward(&self, g: &mut Graph, mesh: &Mesh, seed: u64, prefix: Option<&str>) -> Result<Var> {
        let view = |set| match prefix {
            Some(p) => ParamView::tracked(set, p),
            None => ParamView::frozen(set, ""),
        };
        match &self.model {
            ExpertModel::WalkRnn(m) => m.forward(g, &view(&m.params), mesh, seed),
            ExpertModel::FaceMlp(m) => m.forward(g, &view(&m.params), mesh),
            ExpertModel::EdgeSegmenter(m) => m.forward(g, &view(&m.params), mesh),
            ExpertModel::Oracle(m) => Ok(g.constant(Mat::row_vector(m.predict(mesh)?))),
        }
    }

    pub fn predict(&self, mesh: &Mesh, seed: u64) -> Result<Mat> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, mesh, seed, None)?;
        Ok(g.value(out).clone())
    }
}

/// Registry entry parsed from a configuration id:
/// `walk_rnn`, `face_mlp`, `edge_seg` or `oracle:<class>[:<accuracy>[:uniform|onehot]]`.
#[derive(Debug, Clone, PartialEq)]
pub enum ExpertSpec {
    WalkRnn,
    FaceMlp,
    EdgeSegmenter,
    Oracle { specialty: usize, accuracy: f64, off_specialty: OffSpecialty },
}

impl ExpertSpec {
    pub fn base_name(&self) -> String {
        match self {
            ExpertSpec::WalkRnn => "walk_rnn".into(),
            ExpertSpec::FaceMlp => "face_mlp".into(),
            ExpertSpec::EdgeSegmenter => "edge_seg".into(),
            ExpertSpec::Oracle { specialty, .. } => format!("oracle_{specialty}"),
        }
    }

    pub fn build(&self, num_outputs: usize, hidden: usize, seed: u64) -> Result<ExpertModel> {
        Ok(match *self {
            ExpertSpec::WalkRnn => ExpertModel::WalkRnn(WalkRnn::new(num_outputs, hidden, seed)?),
            ExpertSpec::FaceMlp => ExpertModel::FaceMlp(FaceMlp::new(num_outputs, hidden, seed)?),
            ExpertSpec::EdgeSegmenter => ExpertModel::EdgeSegmenter(EdgeSegmenter::new(num_outputs, hidden, seed)?),
            ExpertSpec::Oracle { specialty, accuracy, off_specialty } => {
                ExpertModel::Oracle(ScriptedOracle::new(num_outputs, specialty, accuracy, off_specialty, seed)?)
            }
        })
    }
}

impl FromStr for ExpertSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown expert id {s:?}"));
        let mut parts = s.trim().split(':');
        match parts.next().ok_or_else(bad)? {
            "walk_rnn" => Ok(ExpertSpec::WalkRnn),
            "face_mlp" => Ok(ExpertSpec::FaceMlp),
            "edge_seg" => Ok(ExpertSpec::EdgeSegmenter),
            "oracle" => {
                let specialty = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
                let accuracy = match parts.next() {
                    Some(a) => a.parse().map_err(|_| bad())?,
                    None => 1.0,
                };
                let off_specialty = match parts.next() {
                    None | Some("onehot") => OffSpecialty::RandomOneHot,
                    Some("uniform") => OffSpecialty::Uniform,
                    Some(_) => return Err(bad()),
                };
                if parts.next().is_some() {
                    return Err(bad());
                }
                Ok(ExpertSpec::Oracle { specialty, accuracy, off_specialty })
            }
            _ => Err(bad()),
        }
    }
}

/// Builds experts from registry ids. Repeated names get a numeric suffix.
pub fn build_experts(ids: &[&str], num_outputs: usize, hidden: usize, seed: u64) -> Result<Vec<Expert>> {
    if ids.is_empty() {
        return Err(Error::invalid("at least one expert is required"));
    }
    let mut out: Vec<Expert> = Vec::with_capacity(ids.len());
    for (i, id) in ids.iter().enumerate() {
        let spec: ExpertSpec = id.parse()?;
        let base = spec.base_name();
        let mut name = base.clone();
        let mut k = 2;
        while out.iter().any(|e| e.name == name) {
            name = format!("{base}_{k}");
            k += 1;
        }
        let model = spec.build(num_outputs, hidden, derive_seed(seed, &[i as u64, hash_str(&name)]))?;
        out.push(Expert::new(name, model));
    }
    Ok(out)
}

/// The experts a task uses when none are configured.
pub fn default_expert_ids(task: Task) -> Vec<&'static str> {
    match task {
        Task::Segmentation => vec!["edge_seg", "edge_seg", "edge_seg"],
        _ => vec!["walk_rnn", "face_mlp", "walk_rnn"],
    }
}

/// Per-row targets for an expert: the class label, or every edge label.
pub fn expert_targets(expert: &Expert, mesh: &Mesh) -> Result<Vec<usize>> {
    if expert.per_edge() {
        mesh.edge_labels
            .clone()
            .ok_or_else(|| Error::invalid(format!("mesh {} has no edge labels", mesh.id)))
    } else {
        mesh.class_label
            .map(|c| vec![c])
            .ok_or_else(|| Error::invalid(format!("mesh {} has no class label", mesh.id)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-3, batch_size: 32, seed: 0 }
    }
}

/// Cross-entropy training of a single expert. Returns the mean loss of each epoch.
/// Frozen experts are left untouched and yield an empty history.
pub fn pretrain_expert(expert: &mut Expert, meshes: &[&Mesh], config: &SupervisedConfig) -> Result<Vec<f64>> {
    if !expert.is_trainable() {
        return Ok(Vec::new());
    }
    if meshes.is_empty() || config.batch_size == 0 {
        return Err(Error::invalid("supervised training needs meshes and a positive batch size"));
    }
    let targets = meshes.iter().map(|m| expert_targets(expert, m)).collect::<Result<Vec<_>>>()?;
    let mut rng = chacha(config.seed);
    let mut adam = Adam::new(config.lr);
    let mut order: Vec<usize> = (0..meshes.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::new();
            for &i in batch {
                let mut g = Graph::new();
                let seed = derive_seed(config.seed, &[epoch as u64, i as u64]);
                let probs = expert.forward(&mut g, meshes[i], seed, Some(""))?;
                let loss = cross_entropy_graph(&mut g, probs, &targets[i])?;
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss(format!("expert {}", expert.name)));
                }
                total += value;
                let scaled = g.scale(loss, 1.0 / batch.len() as f64);
                grads.accumulate(&g.backward(scaled)?.params(&g));
            }
            let params = expert.params_mut().expect("trainable expert has parameters");
            adam.step(params, &grads)?;
        }
        history.push(total / meshes.len() as f64);
    }
    Ok(history)
}

/// CSV of predictions: `mesh_id,row,p0,p1,...`, one line per output row.
pub fn prediction_csv(expert: &Expert, meshes: &[&Mesh], seed: u64) -> Result<String> {
    let mut out = String::from("mesh_id,row");
    for c in 0..expert.num_outputs() {
        let _ = write!(out, ",p{c}");
    }
    out.push('\n');
    for mesh in meshes {
        let pred = expert.predict(mesh, derive_seed(seed, &[hash_str(&mesh.id)]))?;
        for r in 0..pred.rows {
            let _ = write!(out, "{},{r}", mesh.id);
            for v in pred.row(r) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures::{icosahedron, tetrahedron};

    fn row_sums_to_one(m: &Mat) -> bool {
        (0..m.rows).all(|r| (m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9)
    }

    #[test]
    fn parse_ids() {
        assert_eq!("walk_rnn".parse::<ExpertSpec>().unwrap(), ExpertSpec::WalkRnn);
        assert_eq!(
            "oracle:2:0.9:uniform".parse::<ExpertSpec>().unwrap(),
            ExpertSpec::Oracle { specialty: 2, accuracy: 0.9, off_specialty: OffSpecialty::Uniform }
        );
        assert!("oracle".parse::<ExpertSpec>().is_err());
        assert!("oracle:1:0.5:maybe".parse::<ExpertSpec>().is_err());
        assert!("pointnet".parse::<ExpertSpec>().is_err());
    }

    #[test]
    fn duplicate_names_are_suffixed() {
        let ex = build_experts(&["walk_rnn", "walk_rnn", "oracle:1", "oracle:1"], 3, 8, 0).unwrap();
        let names: Vec<_> = ex.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, ["walk_rnn", "walk_rnn_2", "oracle_1", "oracle_1_2"]);
        assert_ne!(ex[0].params(), ex[1].params());
    }

    #[test]
    fn outputs_are_distributions() {
        let mesh = icosahedron().with_class(1);
        for id in ["walk_rnn", "face_mlp", "edge_seg", "oracle:1:0.5"] {
            let ex = &build_experts(&[id], 4, 8, 3).unwrap()[0];
            let p = ex.predict(&mesh, 5).unwrap();
            assert!(row_sums_to_one(&p), "{id}");
            let rows = if ex.per_edge() { mesh.edges.len() } else { 1 };
            assert_eq!((p.rows, p.cols), (rows, 4), "{id}");
        }
    }

    #[test]
    fn oracle_is_repeatable_and_exact_on_specialty() {
        let o = ScriptedOracle::new(3, 1, 1.0, OffSpecialty::Uniform, 9).unwrap();
        let m = tetrahedron().with_class(1);
        assert_eq!(o.predict(&m).unwrap(), vec![0.0, 1.0, 0.0]);
        let off = tetrahedron().with_class(2);
        assert_eq!(o.predict(&off).unwrap(), vec![1.0 / 3.0; 3]);

        let noisy = ScriptedOracle::new(3, 1, 0.0, OffSpecialty::RandomOneHot, 9).unwrap();
        let a = noisy.predict(&m).unwrap();
        assert_eq!(a, noisy.predict(&m).unwrap());
        assert_eq!(a.iter().sum::<f64>(), 1.0);
        assert!(ScriptedOracle::new(3, 3, 1.0, OffSpecialty::Uniform, 0).is_err());
        assert!(ScriptedOracle::new(3, 0, 1.5, OffSpecialty::Uniform, 0).is_err());
    }

    #[test]
    fn supervised_training_lowers_loss() {
        let a = icosahedron().with_class(0);
        let b = tetrahedron().with_class(1);
        let mut ex = build_experts(&["face_mlp"], 2, 8, 1).unwrap().remove(0);
        let cfg = SupervisedConfig { epochs: 60, lr: 1e-2, batch_size: 2, seed: 4 };
        let h = pretrain_expert(&mut ex, &[&a, &b], &cfg).unwrap();
        assert!(h.last().unwrap() < &(0.5 * h[0]), "{h:?}");
    }

    #[test]
    fn frozen_expert_is_untouched() {
        let mut ex = build_experts(&["oracle:0"], 2, 8, 1).unwrap().remove(0);
        let before = ex.clone();
        let m = tetrahedron().with_class(0);
        assert!(pretrain_expert(&mut ex, &[&m], &SupervisedConfig::default()).unwrap().is_empty());
        assert_eq!(ex, before);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let ex = build_experts(&["oracle:0"], 2, 8, 1).unwrap().remove(0);
        let m = tetrahedron().with_class(0);
        let csv = prediction_csv(&ex, &[&m], 0).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "mesh_id,row,p0,p1");
        assert_eq!(lines[1], format!("{},0,1,0", m.id));
    }
}
