//! Deterministic synthetic datasets: classed shape families for classification
//! and retrieval, and axially segmented cylinders for segmentation.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mesh::{load_labels, load_off, save_labels, save_off, Dataset, Mesh, Point, Task};
use crate::rng::{chacha, derive_seed};

pub const FAMILIES: [&str; 5] = ["sphere", "box", "torus", "cone", "cylinder"];
pub const VARIANTS: usize = 2;
pub const NOISE_SIGMA: f64 = 0.01;
pub const SCALE_RANGE: (f64, f64) = (0.7, 1.3);
pub const TRAIN_FRACTION: f64 = 0.8;
pub const MANIFEST: &str = "manifest.csv";

type Raw = (Vec<Point>, Vec<[usize; 3]>);

/// Merges coincident vertices and drops faces that collapse.
fn weld((vertices, faces): Raw) -> Raw {
    let key = |p: &Point| p.map(|c| (c * 1e9).round() as i64);
    let mut index = HashMap::new();
    let mut out = Vec::new();
    let remap: Vec<usize> = vertices
        .iter()
        .map(|p| {
            *index.entry(key(p)).or_insert_with(|| {
                out.push(*p);
                out.len() - 1
            })
        })
        .collect();
    let faces = faces
        .iter()
        .map(|f| f.map(|i| remap[i]))
        .filter(|[a, b, c]| a != b && b != c && a != c)
        .collect();
    (out, faces)
}

/// Surface of revolution about z. A profile point with zero radius is a pole.
/// Consecutive profile points are joined by quads (or fans at poles).
fn revolve(profile: &[(f64, f64)], sectors: usize) -> Raw {
    let mut vertices = Vec::new();
    let mut rings: Vec<Vec<usize>> = Vec::new();
    for &(r, z) in profile {
        if r == 0.0 {
            vertices.push([0.0, 0.0, z]);
            rings.push(vec![vertices.len() - 1]);
        } else {
            let start = vertices.len();
            for j in 0..sectors {
                let t = 2.0 * PI * j as f64 / sectors as f64;
                vertices.push([r * t.cos(), r * t.sin(), z]);
            }
            rings.push((start..start + sectors).collect());
        }
    }
    let mut faces = Vec::new();
    for w in rings.windows(2) {
        let (lo, hi) = (&w[0], &w[1]);
        for j in 0..sectors {
            let k = (j + 1) % sectors;
            match (lo.len(), hi.len()) {
                (1, 1) => {}
                (1, _) => faces.push([lo[0], hi[k], hi[j]]),
                (_, 1) => faces.push([lo[j], lo[k], hi[0]]),
                _ => {
                    faces.push([lo[j], lo[k], hi[k]]);
                    faces.push([lo[j], hi[k], hi[j]]);
                }
            }
        }
    }
    (vertices, faces)
}

fn icosphere() -> Raw {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Point> = vec![
        [-1.0, t, 0.0], [1.0, t, 0.0], [-1.0, -t, 0.0], [1.0, -t, 0.0],
        [0.0, -1.0, t], [0.0, 1.0, t], [0.0, -1.0, -t], [0.0, 1.0, -t],
        [t, 0.0, -1.0], [t, 0.0, 1.0], [-t, 0.0, -1.0], [-t, 0.0, 1.0],
    ];
    let f: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    let mut mid = HashMap::new();
    let mut midpoint = |a: usize, b: usize, v: &mut Vec<Point>| {
        *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
            v.push([0, 1, 2].map(|d| (v[a][d] + v[b][d]) / 2.0));
            v.len() - 1
        })
    };
    let mut faces = Vec::with_capacity(f.len() * 4);
    for [a, b, c] in f {
        let (ab, bc, ca) = (midpoint(a, b, &mut v), midpoint(b, c, &mut v), midpoint(c, a, &mut v));
        faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
    }
    for p in &mut v {
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        *p = p.map(|c| c / n);
    }
    (v, faces)
}

/// Axis-aligned box with every side split into an `n × n` grid.
fn grid_box(n: usize, half: Point) -> Raw {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (u, w) = ((axis + 1) % 3, (axis + 2) % 3);
            let start = vertices.len();
            for i in 0..=n {
                for j in 0..=n {
                    let mut p = [0.0; 3];
                    p[axis] = sign * half[axis];
                    p[u] = half[u] * (2.0 * i as f64 / n as f64 - 1.0);
                    p[w] = half[w] * (2.0 * j as f64 / n as f64 - 1.0);
                    vertices.push(p);
                }
            }
            let at = |i: usize, j: usize| start + i * (n + 1) + j;
            for i in 0..n {
                for j in 0..n {
                    let (a, b, c, d) = (at(i, j), at(i + 1, j), at(i + 1, j + 1), at(i, j + 1));
                    if sign > 0.0 {
                        faces.extend([[a, b, c], [a, c, d]]);
                    } else {
                        faces.extend([[a, c, b], [a, d, c]]);
                    }
                }
            }
        }
    }
    weld((vertices, faces))
}

fn torus(major: f64, minor: f64, sectors: usize, tube: usize) -> Raw {
    let mut vertices = Vec::with_capacity(sectors * tube);
    for i in 0..sectors {
        let u = 2.0 * PI * i as f64 / sectors as f64;
        for j in 0..tube {
            let v = 2.0 * PI * j as f64 / tube as f64;
            let r = major + minor * v.cos();
            vertices.push([r * u.cos(), r * u.sin(), minor * v.sin()]);
        }
    }
    let at = |i: usize, j: usize| (i % sectors) * tube + j % tube;
    let mut faces = Vec::with_capacity(2 * sectors * tube);
    for i in 0..sectors {
        for j in 0..tube {
            faces.push([at(i, j), at(i + 1, j), at(i + 1, j + 1)]);
            faces.push([at(i, j), at(i + 1, j + 1), at(i, j + 1)]);
        }
    }
    (vertices, faces)
}

fn side_profile(rings: usize, radius: impl Fn(f64) -> f64, half_height: f64) -> Vec<(f64, f64)> {
    let mut p = vec![(0.0, -half_height)];
    for i in 0..rings {
        let t = i as f64 / (rings - 1) as f64;
        p.push((radius(t), -half_height + 2.0 * half_height * t));
    }
    p
}

/// Base shape for a family and variant, before jitter.
fn family_shape(family: usize, variant: usize) -> Raw {
    match (family, variant) {
        (0, 0) => icosphere(),
        (0, _) => {
            let (v, f) = icosphere();
            (v.into_iter().map(|p| [p[0], p[1], 2.2 * p[2]]).collect(), f)
        }
        (1, 0) => grid_box(3, [1.0, 1.0, 1.0]),
        (1, _) => grid_box(3, [1.0, 1.0, 0.35]),
        (2, 0) => torus(1.0, 0.3, 10, 6),
        (2, _) => torus(1.0, 0.6, 10, 6),
        (3, 0) => revolve(&side_profile(5, |t| 1.0 - t, 1.0), 8),
        (3, _) => revolve(&[side_profile(5, |t| 1.0 - 0.6 * t, 0.8), vec![(0.0, 0.8)]].concat(), 8),
        (4, 0) => revolve(&[side_profile(5, |_| 1.0, 1.0), vec![(0.0, 1.0)]].concat(), 8),
        _ => revolve(&[side_profile(6, |_| 0.45, 1.6), vec![(0.0, 1.6)]].concat(), 8),
    }
}

pub fn family_name(class: usize) -> String {
    format!("{}{}", FAMILIES[class % FAMILIES.len()], class / FAMILIES.len())
}

/// Rotation about the z axis, anisotropic scale, then normalization to the unit
/// ball and Gaussian vertex noise.
fn jitter(id: String, raw: Raw, rng: &mut ChaCha8Rng) -> Result<Mesh> {
    let theta = rng.gen_range(0.0..2.0 * PI);
    let scale: [f64; 3] = [0; 3].map(|_| rng.gen_range(SCALE_RANGE.0..=SCALE_RANGE.1));
    let (c, s) = (theta.cos(), theta.sin());
    let vertices = raw
        .0
        .iter()
        .map(|p| [(c * p[0] - s * p[1]) * scale[0], (s * p[0] + c * p[1]) * scale[1], p[2] * scale[2]])
        .collect();
    let mut mesh = Mesh::new(id, vertices, raw.1)?.normalized()?;
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    for p in &mut mesh.vertices {
        for v in p.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    let mut out = Mesh::new(mesh.id, mesh.vertices, mesh.faces)?;
    out.class_label = mesh.class_label;
    Ok(out)
}

/// Per class, the first `round(0.8 n)` items of a seeded shuffle go to training.
fn stratified_split(labels: &[usize], num_classes: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let cut = (TRAIN_FRACTION * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn generate_classification_set(classes: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class < 4 {
        return Err(Error::invalid("need at least 2 classes and 4 meshes per class"));
    }
    if classes > FAMILIES.len() * VARIANTS {
        return Err(Error::invalid(format!(
            "{classes} classes requested, only {} shape families available",
            FAMILIES.len() * VARIANTS
        )));
    }
    let mut meshes = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let base = family_shape(class % FAMILIES.len(), class / FAMILIES.len());
        for i in 0..per_class {
            let mut rng = chacha(derive_seed(seed, &[class as u64, i as u64]));
            let id = format!("c{class}_{}_{i:03}", family_name(class));
            meshes.push(jitter(id, base.clone(), &mut rng)?.with_class(class));
        }
    }
    let labels: Vec<usize> = meshes.iter().map(|m| m.class_label.unwrap_or(0)).collect();
    let (train, test) = stratified_split(&labels, classes, &mut chacha(derive_seed(seed, &[u64::MAX])));
    Dataset::new(meshes, classes, Task::Classification, train, test)
}

/// Segment of every vertex of a cylinder whose side has `rings` rings; the
/// bottom pole comes first and the top pole last.
fn ring_segments(rings: usize, segments: usize) -> Vec<usize> {
    (0..rings + 2)
        .map(|r| match r {
            0 => 0,
            r if r == rings + 1 => segments - 1,
            r => (r - 1) * segments / rings,
        })
        .collect()
}

pub const SEGMENT_SIDE_RINGS: usize = 12;
pub const SEGMENT_SECTORS: usize = 8;

/// Cylinders split into `counts[k]` axial segments, `per_class` meshes per count.
/// The class label of a mesh is its index into `counts`.
pub fn generate_segmentation_set_with(per_class: usize, counts: &[usize], seed: u64) -> Result<Dataset> {
    if per_class < 4 || counts.is_empty() || counts.iter().any(|&s| s < 2 || s > SEGMENT_SIDE_RINGS) {
        return Err(Error::invalid("need at least 4 meshes per class and 2..=12 segments"));
    }
    let mut profile = side_profile(SEGMENT_SIDE_RINGS, |_| 0.5, 1.0);
    profile.push((0.0, 1.0));
    let base = revolve(&profile, SEGMENT_SECTORS);
    // Vertex v of the revolved cylinder lies on profile row (v - 1) / sectors + 1.
    let row = |v: usize| match v {
        0 => 0,
        v if v == base.0.len() - 1 => SEGMENT_SIDE_RINGS + 1,
        v => (v - 1) / SEGMENT_SECTORS + 1,
    };
    let mut meshes = Vec::new();
    for (k, &segments) in counts.iter().enumerate() {
        let by_row = ring_segments(SEGMENT_SIDE_RINGS, segments);
        let vertex_segment: Vec<usize> = (0..base.0.len()).map(|v| by_row[row(v)]).collect();
        for i in 0..per_class {
            let mut rng = chacha(derive_seed(seed, &[segments as u64, i as u64, 7]));
            let mesh = jitter(format!("seg{segments}_{i:03}"), base.clone(), &mut rng)?;
            // Each edge takes the lower segment of its endpoints.
            let edges: Vec<usize> =
                mesh.edges.iter().map(|e| vertex_segment[e.a].min(vertex_segment[e.b])).collect();
            let faces = mesh.face_labels_from_edges(&edges)?;
            meshes.push(mesh.with_class(k).with_edge_labels(edges)?.with_face_labels(faces)?);
        }
    }
    let labels: Vec<usize> = meshes.iter().map(|m| m.class_label.unwrap_or(0)).collect();
    let (train, test) = stratified_split(&labels, counts.len(), &mut chacha(derive_seed(seed, &[u64::MAX])));
    let num_labels = *counts.iter().max().expect("non-empty");
    Dataset::new(meshes, num_labels, Task::Segmentation, train, test)
}

/// Cylinders with 2, 3 and 4 segments.
pub fn generate_segmentation_set(per_class: usize, seed: u64) -> Result<Dataset> {
    generate_segmentation_set_with(per_class, &[2, 3, 4], seed)
}

/// Writes `<id>.off` (plus `.eseg`/`.fseg` when labeled) and a manifest
/// `mesh_id,file,class,split`. A leading comment line records task and label count.
pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = format!("# task={} num_classes={}\nmesh_id,file,class,split\n", ds.task.as_str(), ds.num_classes);
    let split_of = |i: usize| if ds.train.contains(&i) { "train" } else { "test" };
    for (i, m) in ds.meshes.iter().enumerate() {
        let file = format!("{}.off", m.id);
        save_off(m, dir.join(&file))?;
        if let Some(l) = &m.edge_labels {
            save_labels(l, dir.join(format!("{}.eseg", m.id)))?;
        }
        if let Some(l) = &m.face_labels {
            save_labels(l, dir.join(format!("{}.fseg", m.id)))?;
        }
        let class = m.class_label.map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(manifest, "{},{file},{class},{}", m.id, split_of(i));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let err = |line: usize, msg: &str| Error::Parse { path: path.clone(), line, msg: msg.into() };
    let (mut task, mut num_classes) = (Task::Classification, None);
    let (mut meshes, mut train, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if let Some(meta) = line.strip_prefix('#') {
            for kv in meta.split_whitespace() {
                match kv.split_once('=') {
                    Some(("task", t)) => task = t.parse()?,
                    Some(("num_classes", c)) => num_classes = Some(c.parse().map_err(|_| err(n + 1, "bad num_classes"))?),
                    _ => {}
                }
            }
            continue;
        }
        if line.is_empty() || line.starts_with("mesh_id,") {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let [_, file, class, split] = cols[..] else {
            return Err(err(n + 1, "expected 4 columns"));
        };
        let mut mesh = load_off(dir.join(file))?;
        if !class.is_empty() {
            mesh.class_label = Some(class.parse().map_err(|_| err(n + 1, "bad class"))?);
        }
        for (ext, face) in [("eseg", false), ("fseg", true)] {
            let p = dir.join(format!("{}.{ext}", mesh.id));
            if p.exists() {
                let labels = load_labels(&p)?;
                mesh = if face { mesh.with_face_labels(labels)? } else { mesh.with_edge_labels(labels)? };
            }
        }
        match split {
            "train" => train.push(meshes.len()),
            "test" => test.push(meshes.len()),
            _ => return Err(err(n + 1, "split must be train or test")),
        }
        meshes.push(mesh);
    }
    let num_classes = num_classes.ok_or_else(|| err(1, "missing num_classes"))?;
    Dataset::new(meshes, num_classes, task, train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_split() {
        let ds = generate_classification_set(3, 20, 1).unwrap();
        assert_eq!((ds.meshes.len(), ds.train.len(), ds.test.len()), (60, 48, 12));
        for c in 0..3 {
            let n = ds.test.iter().filter(|&&i| ds.meshes[i].class_label == Some(c)).count();
            assert_eq!(n, 4);
        }
        assert!(generate_classification_set(11, 4, 0).is_err());
        assert!(generate_classification_set(3, 3, 0).is_err());
    }

    #[test]
    fn every_family_is_a_valid_connected_mesh() {
        let ds = generate_classification_set(10, 4, 3).unwrap();
        for m in &ds.meshes {
            m.validate().unwrap();
            assert!(m.is_connected(), "{}", m.id);
            assert!((20..=120).contains(&m.vertex_count()), "{} {}", m.id, m.vertex_count());
        }
    }

    #[test]
    fn closed_families_satisfy_euler() {
        for class in 0..10 {
            let (v, f) = family_shape(class % 5, class / 5);
            let m = Mesh::new("x", v, f).unwrap();
            let chi = m.vertex_count() as i64 - m.edges.len() as i64 + m.faces.len() as i64;
            let expect = if FAMILIES[class % 5] == "torus" { 0 } else { 2 };
            assert_eq!(chi, expect, "{}", family_name(class));
        }
    }

    #[test]
    fn seeded_generation_is_repeatable() {
        let a = generate_classification_set(3, 4, 9).unwrap();
        let b = generate_classification_set(3, 4, 9).unwrap();
        let c = generate_classification_set(3, 4, 10).unwrap();
        assert_eq!(a.meshes, b.meshes);
        assert_ne!(a.meshes[0].vertices, c.meshes[0].vertices);
    }

    #[test]
    fn segmentation_labels() {
        let ds = generate_segmentation_set_with(4, &[2], 0).unwrap();
        for m in &ds.meshes {
            let e = m.edge_labels.as_ref().unwrap();
            assert_eq!(e.len(), m.edges.len());
            assert!(e.iter().all(|&l| l < 2) && e.contains(&0) && e.contains(&1));
            assert_eq!(m.face_labels.as_ref().unwrap().len(), m.faces.len());
            // Lower half (before noise) carries label 0.
            for (i, edge) in m.edges.iter().enumerate() {
                let z = 0.5 * (m.vertices[edge.a][2] + m.vertices[edge.b][2]);
                if z < -0.2 {
                    assert_eq!(e[i], 0);
                } else if z > 0.2 {
                    assert_eq!(e[i], 1);
                }
            }
        }
        let ds = generate_segmentation_set(4, 0).unwrap();
        assert_eq!(ds.num_classes, 4);
        assert_eq!(ds.meshes.len(), 12);
    }

    #[test]
    fn boundary_edges_take_the_lower_segment() {
        assert_eq!(ring_segments(4, 2), [0, 0, 0, 1, 1, 1]);
        let ds = generate_segmentation_set_with(4, &[2], 0).unwrap();
        let m = &ds.meshes[0];
        // Vertices 1..=8 lie on ring 0, the last side ring before the split is ring 5.
        let below = 1 + 5 * SEGMENT_SECTORS;
        let above = below + SEGMENT_SECTORS;
        let e = m.edge_index(below, above).unwrap();
        assert_eq!(m.edge_labels.as_ref().unwrap()[e], 0);
    }

    #[test]
    fn face_majority_ties_go_low() {
        // A face on the split has edge labels {0, 0, 1} → 0 and {0, 1, 1} → 1.
        let ds = generate_segmentation_set_with(4, &[2], 0).unwrap();
        let m = &ds.meshes[0];
        let e = m.edge_labels.as_ref().unwrap();
        for (f, &[a, b, c]) in m.faces.iter().enumerate() {
            let mut l = [(a, b), (b, c), (c, a)].map(|(u, v)| e[m.edge_index(u, v).unwrap()]);
            l.sort_unstable();
            assert_eq!(m.face_labels.as_ref().unwrap()[f], l[1]);
        }
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for ds in [generate_classification_set(2, 4, 0).unwrap(), generate_segmentation_set(4, 0).unwrap()] {
            write_dataset(&ds, dir.path()).unwrap();
            let back = read_dataset(dir.path()).unwrap();
            assert_eq!(back.meshes, ds.meshes);
            assert_eq!((back.train, back.test, back.task, back.num_classes), (ds.train.clone(), ds.test.clone(), ds.task, ds.num_classes));
            fs::remove_dir_all(dir.path()).unwrap();
        }
    }
}
