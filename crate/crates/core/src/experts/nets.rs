//! Small trainable experts that read different views of a mesh.

use crate::diff::nn::{self, ParamView};
use crate::diff::{Graph, Mat, ParameterSet, Var};
use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::rng::chacha;
use crate::walk::{extract_walks, Walk, TRAIN_WALKS};

pub const DEFAULT_HIDDEN: usize = 32;

pub const WALK_STEP_CHANNELS: usize = 5;

/// Per step: displacement from the previous vertex (zero at the start and
/// after a jump), distance from the origin, and the jump flag.
pub fn walk_step_features(walk: &Walk) -> Result<Mat> {
    let mut data = Vec::with_capacity(walk.len() * WALK_STEP_CHANNELS);
    for (i, p) in walk.coordinates.iter().enumerate() {
        let jump = walk.jump_flags[i];
        let d = if i == 0 || jump {
            [0.0; 3]
        } else {
            let q = walk.coordinates[i - 1];
            [p[0] - q[0], p[1] - q[1], p[2] - q[2]]
        };
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        data.extend_from_slice(&[d[0], d[1], d[2], r, if jump { 1.0 } else { 0.0 }]);
    }
    Mat::new(walk.len(), WALK_STEP_CHANNELS, data)
}

/// Recurrent cell over random walks. Hidden states are mean-pooled along each
/// walk and class logits averaged over walks.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkRnn {
    pub num_classes: usize,
    pub hidden: usize,
    pub walks: usize,
    pub params: ParameterSet,
}

impl WalkRnn {
    pub fn new(num_classes: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = chacha(seed);
        let mut params = ParameterSet::new();
        params.init_linear(&mut rng, "embed", WALK_STEP_CHANNELS, hidden)?;
        nn::init_gru(&mut params, &mut rng, "rnn", hidden, hidden)?;
        params.init_linear(&mut rng, "head", hidden, num_classes)?;
        Ok(Self { num_classes, hidden, walks: TRAIN_WALKS, params })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamView, mesh: &Mesh, seed: u64) -> Result<Var> {
        let walks = extract_walks(mesh, self.walks, seed)?;
        let mut logits = Vec::with_capacity(walks.len());
        for w in &walks {
            let x = g.constant(walk_step_features(w)?);
            let x = nn::linear(g, p, "embed", x)?;
            let x = g.gelu(x);
            let states = nn::recurrent_states(g, p, "rnn", x)?;
            let h = g.mean_rows(states);
            logits.push(nn::linear(g, p, "head", h)?);
        }
        let stacked = g.concat_rows(&logits)?;
        let mean = g.mean_rows(stacked);
        Ok(g.softmax_rows(mean))
    }
}

/// Per-face features: centroid, unit normal, area relative to the mean face area.
pub fn face_features(mesh: &Mesh) -> Result<Mat> {
    if mesh.faces.is_empty() {
        return Err(Error::invalid(format!("mesh {} has no faces", mesh.id)));
    }
    let na: Vec<_> = (0..mesh.faces.len()).map(|f| mesh.face_normal_area(f)).collect();
    let mean_area = na.iter().map(|(_, a)| a).sum::<f64>() / na.len() as f64;
    let mut data = Vec::with_capacity(mesh.faces.len() * 7);
    for (f, (n, a)) in na.iter().enumerate() {
        data.extend_from_slice(&mesh.face_centroid(f));
        data.extend_from_slice(n);
        data.push(if mean_area > 0.0 { a / mean_area } else { 0.0 });
    }
    Mat::new(mesh.faces.len(), 7, data)
}

/// Shared two-layer perceptron over face features, mean-pooled, then a class head.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceMlp {
    pub num_classes: usize,
    pub hidden: usize,
    pub params: ParameterSet,
}

impl FaceMlp {
    pub fn new(num_classes: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = chacha(seed);
        let mut params = ParameterSet::new();
        params.init_linear(&mut rng, "fc1", 7, hidden)?;
        params.init_linear(&mut rng, "fc2", hidden, hidden)?;
        params.init_linear(&mut rng, "head", hidden, num_classes)?;
        Ok(Self { num_classes, hidden, params })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamView, mesh: &Mesh) -> Result<Var> {
        let x = g.constant(face_features(mesh)?);
        let h = nn::linear(g, p, "fc1", x)?;
        let h = g.gelu(h);
        let h = nn::linear(g, p, "fc2", h)?;
        let h = g.gelu(h);
        let pooled = g.mean_rows(h);
        let logits = nn::linear(g, p, "head", pooled)?;
        Ok(g.softmax_rows(logits))
    }
}

/// Per-edge features: length relative to the mean edge length, dihedral proxy
/// `1 - n1·n2` of the two incident faces (zero on boundary edges), and
/// midpoint height.
pub fn edge_features(mesh: &Mesh) -> Result<Mat> {
    if mesh.edges.is_empty() {
        return Err(Error::invalid(format!("mesh {} has no edges", mesh.id)));
    }
    let normals: Vec<_> = (0..mesh.faces.len()).map(|f| mesh.face_normal_area(f).0).collect();
    let incident = mesh.edge_faces();
    let mean_len = mesh.edges.iter().map(|e| e.length).sum::<f64>() / mesh.edges.len() as f64;
    let mut data = Vec::with_capacity(mesh.edges.len() * 3);
    for (e, edge) in mesh.edges.iter().enumerate() {
        let dihedral = match incident[e].as_slice() {
            [f1, f2, ..] => {
                let (a, b) = (normals[*f1], normals[*f2]);
                1.0 - (a[0] * b[0] + a[1] * b[1] + a[2] * b[2])
            }
            _ => 0.0,
        };
        let mid_z = 0.5 * (mesh.vertices[edge.a][2] + mesh.vertices[edge.b][2]);
        data.extend_from_slice(&[edge.length / mean_len, dihedral, mid_z]);
    }
    Mat::new(mesh.edges.len(), 3, data)
}

/// Shared perceptron applied to every edge, per-edge softmax over segment labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeSegmenter {
    pub num_labels: usize,
    pub hidden: usize,
    pub params: ParameterSet,
}

impl EdgeSegmenter {
    pub fn new(num_labels: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = chacha(seed);
        let mut params = ParameterSet::new();
        params.init_linear(&mut rng, "fc1", 3, hidden)?;
        params.init_linear(&mut rng, "fc2", hidden, hidden)?;
        params.init_linear(&mut rng, "head", hidden, num_labels)?;
        Ok(Self { num_labels, hidden, params })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamView, mesh: &Mesh) -> Result<Var> {
        let x = g.constant(edge_features(mesh)?);
        let h = nn::linear(g, p, "fc1", x)?;
        let h = g.gelu(h);
        let h = nn::linear(g, p, "fc2", h)?;
        let h = g.gelu(h);
        let logits = nn::linear(g, p, "head", h)?;
        Ok(g.softmax_rows(logits))
    }
}
