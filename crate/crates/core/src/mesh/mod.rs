//! Triangle meshes, their derived connectivity, and labeled datasets.

mod off;

pub use off::{load_labels, load_off, load_off_str, save_labels, save_off, write_off_string};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// An undirected edge with canonical `a < b` ordering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub length: f64,
}

/// A validated triangle mesh. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub id: String,
    pub vertices: Vec<Point>,
    pub faces: Vec<[usize; 3]>,
    /// Sorted neighbor lists, symmetric.
    pub adjacency: Vec<Vec<usize>>,
    /// Sorted by `(a, b)`; each undirected edge exactly once.
    pub edges: Vec<Edge>,
    pub class_label: Option<usize>,
    pub face_labels: Option<Vec<usize>>,
    pub edge_labels: Option<Vec<usize>>,
}

/// Connectivity derived from a face list.
#[derive(Debug, Clone, PartialEq)]
pub struct Connectivity {
    pub adjacency: Vec<Vec<usize>>,
    pub edges: Vec<(usize, usize)>,
}

/// Symmetric vertex adjacency and the deduplicated, canonically ordered edge list.
pub fn build_adjacency(faces: &[[usize; 3]], vertex_count: usize) -> Result<Connectivity> {
    let mut pairs = Vec::with_capacity(faces.len() * 3);
    for face in faces {
        for &v in face {
            if v >= vertex_count {
                return Err(Error::IndexOutOfRange { index: v, len: vertex_count });
            }
        }
        for k in 0..3 {
            let (u, v) = (face[k], face[(k + 1) % 3]);
            if u == v {
                return Err(Error::invalid(format!("degenerate face {face:?} repeats vertex {u}")));
            }
            pairs.push((u.min(v), u.max(v)));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();
    let mut adjacency = vec![Vec::new(); vertex_count];
    for &(a, b) in &pairs {
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    Ok(Connectivity { adjacency, edges: pairs })
}

fn distance(p: &Point, q: &Point) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

impl Mesh {
    /// Builds a mesh, deriving adjacency and edges. Rejects zero-length edges.
    pub fn new(id: impl Into<String>, vertices: Vec<Point>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let conn = build_adjacency(&faces, vertices.len())?;
        let mut edges = Vec::with_capacity(conn.edges.len());
        for &(a, b) in &conn.edges {
            let length = distance(&vertices[a], &vertices[b]);
            if !(length > 0.0) {
                return Err(Error::invalid(format!("edge ({a},{b}) has zero length")));
            }
            edges.push(Edge { a, b, length });
        }
        Ok(Self {
            id: id.into(),
            vertices,
            faces,
            adjacency: conn.adjacency,
            edges,
            class_label: None,
            face_labels: None,
            edge_labels: None,
        })
    }

    pub fn with_class(mut self, class: usize) -> Self {
        self.class_label = Some(class);
        self
    }

    pub fn with_face_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.faces.len() {
            return Err(Error::shape(format!(
                "{} face labels for {} faces",
                labels.len(),
                self.faces.len()
            )));
        }
        self.face_labels = Some(labels);
        Ok(self)
    }

    pub fn with_edge_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.edges.len() {
            return Err(Error::shape(format!(
                "{} edge labels for {} edges",
                labels.len(),
                self.edges.len()
            )));
        }
        self.edge_labels = Some(labels);
        Ok(self)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Position of edge `(u, v)` in `edges`, in either orientation.
    pub fn edge_index(&self, u: usize, v: usize) -> Option<usize> {
        let key = (u.min(v), u.max(v));
        self.edges.binary_search_by(|e| (e.a, e.b).cmp(&key)).ok()
    }

    /// Faces incident to each edge (one for boundary edges, two for manifold interior edges).
    pub fn edge_faces(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.edges.len()];
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                if let Some(e) = self.edge_index(f[k], f[(k + 1) % 3]) {
                    out[e].push(fi);
                }
            }
        }
        out
    }

    /// Unit normal and area of a face; zero normal for degenerate faces.
    pub fn face_normal_area(&self, face: usize) -> (Point, f64) {
        let [i, j, k] = self.faces[face];
        let (p, q, r) = (self.vertices[i], self.vertices[j], self.vertices[k]);
        let u = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
        let v = [r[0] - p[0], r[1] - p[1], r[2] - p[2]];
        let c = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
        let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        if norm == 0.0 {
            ([0.0; 3], 0.0)
        } else {
            ([c[0] / norm, c[1] / norm, c[2] / norm], norm / 2.0)
        }
    }

    pub fn face_centroid(&self, face: usize) -> Point {
        let [i, j, k] = self.faces[face];
        let mut c = [0.0; 3];
        for v in [i, j, k] {
            for d in 0..3 {
                c[d] += self.vertices[v][d] / 3.0;
            }
        }
        c
    }

    /// True when every vertex is reachable from vertex 0 through edges.
    pub fn is_connected(&self) -> bool {
        if self.vertices.is_empty() {
            return true;
        }
        let mut seen = vec![false; self.vertices.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &n in &self.adjacency[v] {
                if !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Checks every structural invariant; used by tests and after loading.
    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for f in &self.faces {
            for &v in f {
                if v >= n {
                    return Err(Error::IndexOutOfRange { index: v, len: n });
                }
            }
        }
        for (v, list) in self.adjacency.iter().enumerate() {
            for &u in list {
                if self.adjacency[u].binary_search(&v).is_err() {
                    return Err(Error::invalid(format!("adjacency not symmetric at ({v},{u})")));
                }
            }
        }
        for w in self.edges.windows(2) {
            if (w[0].a, w[0].b) >= (w[1].a, w[1].b) {
                return Err(Error::invalid("edge list not strictly sorted"));
            }
        }
        for e in &self.edges {
            if e.a >= e.b || !(e.length > 0.0) {
                return Err(Error::invalid(format!("bad edge ({},{})", e.a, e.b)));
            }
        }
        if let Some(l) = &self.edge_labels {
            if l.len() != self.edges.len() {
                return Err(Error::shape("edge label count"));
            }
        }
        if let Some(l) = &self.face_labels {
            if l.len() != self.faces.len() {
                return Err(Error::shape("face label count"));
            }
        }
        Ok(())
    }

    /// Face labels from edge labels: the majority label of each face's three
    /// edges, or the lowest label when all three differ.
    pub fn face_labels_from_edges(&self, edge_labels: &[usize]) -> Result<Vec<usize>> {
        if edge_labels.len() != self.edges.len() {
            return Err(Error::shape(format!("{} edge labels for {} edges", edge_labels.len(), self.edges.len())));
        }
        self.faces
            .iter()
            .map(|&[a, b, c]| {
                let mut l = [0; 3];
                for (k, (u, v)) in [(a, b), (b, c), (c, a)].into_iter().enumerate() {
                    l[k] = edge_labels[self.edge_index(u, v).ok_or_else(|| Error::invalid("face edge missing"))?];
                }
                Ok(match l {
                    [x, y, _] | [x, _, y] if x == y => x,
                    [_, x, y] if x == y => x,
                    _ => l[0].min(l[1]).min(l[2]),
                })
            })
            .collect()
    }

    /// Returns the mesh translated to a zero vertex centroid and scaled so the
    /// farthest vertex lies at distance 1. Topology and labels are unchanged.
    pub fn normalized(&self) -> Result<Mesh> {
        if self.vertices.is_empty() {
            return Err(Error::invalid("mesh has no vertices"));
        }
        let n = self.vertices.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.vertices {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        for v in &mut c {
            *v /= n;
        }
        let radius = self
            .vertices
            .iter()
            .map(|p| distance(p, &c))
            .fold(0.0_f64, f64::max);
        if !(radius > 0.0) {
            return Err(Error::ZeroExtent);
        }
        let vertices: Vec<Point> = self
            .vertices
            .iter()
            .map(|p| [(p[0] - c[0]) / radius, (p[1] - c[1]) / radius, (p[2] - c[2]) / radius])
            .collect();
        let mut out = self.clone();
        for (e, edge) in out.edges.iter_mut().enumerate() {
            edge.length = distance(&vertices[edge.a], &vertices[edge.b]);
            debug_assert!(edge.length > 0.0, "edge {e} collapsed");
        }
        out.vertices = vertices;
        Ok(out)
    }
}

/// Standalone form of [`Mesh::normalized`].
pub fn normalize_coordinates(mesh: &Mesh) -> Result<Mesh> {
    mesh.normalized()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Classification,
    Retrieval,
    Segmentation,
}

impl Task {
    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Classification => "classification",
            Task::Retrieval => "retrieval",
            Task::Segmentation => "segmentation",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(Task::Classification),
            "retrieval" => Ok(Task::Retrieval),
            "segmentation" => Ok(Task::Segmentation),
            other => Err(Error::invalid(format!("unknown task {other}"))),
        }
    }
}

/// A labeled collection of meshes with a train/test partition.
///
/// For segmentation, `num_classes` is the number of segment labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub meshes: Vec<Mesh>,
    pub num_classes: usize,
    pub task: Task,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn new(meshes: Vec<Mesh>, num_classes: usize, task: Task, train: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let ds = Self { meshes, num_classes, task, train, test };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        let n = self.meshes.len();
        let mut owner = vec![0u8; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n {
                return Err(Error::IndexOutOfRange { index: i, len: n });
            }
            owner[i] += 1;
        }
        if owner.iter().any(|&o| o != 1) {
            return Err(Error::invalid("train and test splits must be disjoint and cover all meshes"));
        }
        for m in &self.meshes {
            m.validate()?;
            // Segmentation class labels only group meshes; they are not segment labels.
            if let (Some(c), false) = (m.class_label, self.task == Task::Segmentation) {
                if c >= self.num_classes {
                    return Err(Error::invalid(format!("mesh {} has class {c} >= {}", m.id, self.num_classes)));
                }
            }
            for labels in m.edge_labels.iter().chain(&m.face_labels) {
                if labels.iter().any(|&l| l >= self.num_classes) {
                    return Err(Error::invalid(format!("mesh {} has a segment label out of range", m.id)));
                }
            }
        }
        Ok(())
    }

    pub fn train_meshes(&self) -> Vec<&Mesh> {
        self.train.iter().map(|&i| &self.meshes[i]).collect()
    }

    pub fn test_meshes(&self) -> Vec<&Mesh> {
        self.test.iter().map(|&i| &self.meshes[i]).collect()
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn triangle() -> Mesh {
        Mesh::new("tri", vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap()
    }

    pub fn tetrahedron() -> Mesh {
        Mesh::new(
            "tet",
            vec![[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]],
            vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
        )
        .unwrap()
    }

    pub fn icosahedron() -> Mesh {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let v = vec![
            [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
            [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
            [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
        ];
        let f = vec![
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ];
        Mesh::new("ico", v, f).unwrap()
    }

    /// Path graph 0-1-2 realized as a mesh-free connectivity (no faces).
    pub fn path3() -> Mesh {
        let mut m = Mesh::new("path", vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![]).unwrap();
        m.adjacency = vec![vec![1], vec![0, 2], vec![1]];
        m.edges = vec![Edge { a: 0, b: 1, length: 1.0 }, Edge { a: 1, b: 2, length: 1.0 }];
        m
    }
}
