//! Random walks over mesh vertices: the gate's input representation.
//!
//! A walk visits `L = max(2, ceil(0.4 * V))` distinct vertices. Each step moves
//! to a uniformly chosen unvisited neighbor; when the current vertex has none
//! left, the walk jumps to a uniformly chosen unvisited vertex and flags that
//! position. Choices index into ascending-sorted candidate lists and are drawn
//! from [`SplitMix64`], so the outcome for a seed is fully specified.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Point};
use crate::rng::{derive_seed, SplitMix64};

/// Fraction of the mesh's vertices a walk covers.
pub const WALK_FRACTION: f64 = 0.4;
pub const TRAIN_WALKS: usize = 8;
pub const INFER_WALKS: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Walk {
    pub vertex_indices: Vec<usize>,
    pub coordinates: Vec<Point>,
    /// `true` where the position was reached by a jump rather than an edge.
    pub jump_flags: Vec<bool>,
    pub source_mesh_id: String,
}

impl Walk {
    pub fn len(&self) -> usize {
        self.vertex_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertex_indices.is_empty()
    }

    /// Row-major `L x 4` features: x, y, z and the jump flag as 0/1.
    pub fn features(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 4);
        for (p, &j) in self.coordinates.iter().zip(&self.jump_flags) {
            out.extend_from_slice(p);
            out.push(if j { 1.0 } else { 0.0 });
        }
        out
    }
}

/// `max(2, ceil(0.4 * V))`, computed in integers.
pub fn walk_length(vertex_count: usize) -> Result<usize> {
    if vertex_count < 2 {
        return Err(Error::MeshTooSmall);
    }
    // ceil(2V / 5)
    Ok(((2 * vertex_count + 4) / 5).max(2))
}

/// Core walk construction. `choose(n)` must return an index in `[0, n)`;
/// it is called once for the start vertex (with `n = V`, skipped when `start`
/// is given) and once per subsequent step.
pub fn extract_walk_with<F>(mesh: &Mesh, start: Option<usize>, length: usize, mut choose: F) -> Result<Walk>
where
    F: FnMut(usize) -> usize,
{
    let n = mesh.vertex_count();
    if n < 2 {
        return Err(Error::MeshTooSmall);
    }
    if length == 0 || length > n {
        return Err(Error::invalid(format!("walk length {length} for {n} vertices")));
    }
    let first = match start {
        Some(s) if s >= n => return Err(Error::IndexOutOfRange { index: s, len: n }),
        Some(s) => s,
        None => choose(n),
    };
    let mut visited = vec![false; n];
    let mut indices = Vec::with_capacity(length);
    let mut jumps = Vec::with_capacity(length);
    visited[first] = true;
    indices.push(first);
    jumps.push(false);
    let mut candidates = Vec::new();
    while indices.len() < length {
        let current = *indices.last().unwrap();
        candidates.clear();
        candidates.extend(mesh.adjacency[current].iter().copied().filter(|&v| !visited[v]));
        let jumped = candidates.is_empty();
        if jumped {
            candidates.extend((0..n).filter(|&v| !visited[v]));
        }
        let next = candidates[choose(candidates.len())];
        visited[next] = true;
        indices.push(next);
        jumps.push(jumped);
    }
    Ok(Walk {
        coordinates: indices.iter().map(|&v| mesh.vertices[v]).collect(),
        vertex_indices: indices,
        jump_flags: jumps,
        source_mesh_id: mesh.id.clone(),
    })
}

/// One walk of the standard length, driven by `rng`.
pub fn extract_walk(mesh: &Mesh, rng: &mut SplitMix64) -> Result<Walk> {
    let length = walk_length(mesh.vertex_count())?;
    extract_walk_with(mesh, None, length, |k| rng.below(k))
}

/// `count` walks; walk `w` uses its own stream seeded from `(seed, w)`, so a
/// prefix of a longer request equals a shorter request.
pub fn extract_walks(mesh: &Mesh, count: usize, seed: u64) -> Result<Vec<Walk>> {
    if count == 0 {
        return Err(Error::invalid("walk count must be at least 1"));
    }
    (0..count)
        .map(|w| {
            let mut rng = SplitMix64::new(derive_seed(seed, &[w as u64]));
            extract_walk(mesh, &mut rng)
        })
        .collect()
}

/// `mesh_id L i0 i1 ... i(L-1)` per walk, one per line.
pub fn format_walks(walks: &[Walk]) -> String {
    let mut s = String::new();
    for w in walks {
        let _ = write!(s, "{} {}", w.source_mesh_id, w.len());
        for v in &w.vertex_indices {
            let _ = write!(s, " {v}");
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures;
    use std::collections::BTreeSet;

    /// Runs the walk under every possible sequence of choices.
    fn enumerate(mesh: &Mesh, start: Option<usize>, length: usize) -> BTreeSet<(Vec<usize>, Vec<bool>)> {
        let mut out = BTreeSet::new();
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(prefix) = stack.pop() {
            let mut pos = 0;
            let mut branch: Option<usize> = None;
            let w = extract_walk_with(mesh, start, length, |n| {
                let c = if pos < prefix.len() {
                    prefix[pos]
                } else {
                    if branch.is_none() {
                        branch = Some(n);
                    }
                    0
                };
                pos += 1;
                c
            })
            .unwrap();
            if let Some(n) = branch {
                for c in 0..n {
                    let mut p = prefix.clone();
                    p.push(c);
                    stack.push(p);
                }
            } else {
                out.insert((w.vertex_indices, w.jump_flags));
            }
        }
        out
    }

    #[test]
    fn length_rule() {
        assert_eq!(walk_length(100).unwrap(), 40);
        assert_eq!(walk_length(4).unwrap(), 2);
        assert_eq!(walk_length(2).unwrap(), 2);
        assert_eq!(walk_length(3).unwrap(), 2);
        assert_eq!(walk_length(42).unwrap(), 17);
        assert!(matches!(walk_length(1), Err(Error::MeshTooSmall)));
        for v in 2..500 {
            let l = walk_length(v).unwrap();
            assert_eq!(l, 2.max((0.4 * v as f64 - 1e-9).ceil() as usize));
            assert!(l <= v);
        }
    }

    #[test]
    fn path_from_end_has_one_outcome() {
        let m = fixtures::path3();
        let all = enumerate(&m, Some(0), 2);
        assert_eq!(all.into_iter().collect::<Vec<_>>(), vec![(vec![0, 1], vec![false, false])]);
    }

    #[test]
    fn path_from_middle_must_jump() {
        let m = fixtures::path3();
        let all = enumerate(&m, Some(1), 3);
        let expect: BTreeSet<_> = [
            (vec![1, 0, 2], vec![false, false, true]),
            (vec![1, 2, 0], vec![false, false, true]),
        ]
        .into_iter()
        .collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn triangle_has_six_orderings() {
        let m = fixtures::triangle();
        let all = enumerate(&m, None, 3);
        assert_eq!(all.len(), 6);
        assert!(all.iter().all(|(_, j)| j.iter().all(|&f| !f)));
    }

    #[test]
    fn walks_are_deterministic_and_counted() {
        let m = fixtures::icosahedron();
        let a = extract_walks(&m, 8, 7).unwrap();
        let b = extract_walks(&m, 8, 7).unwrap();
        assert_eq!(a.len(), 8);
        assert_eq!(a, b);
        assert_eq!(extract_walks(&m, 32, 7).unwrap().len(), 32);
        assert_eq!(&extract_walks(&m, 32, 7).unwrap()[..8], &a[..]);
        assert_ne!(extract_walks(&m, 8, 8).unwrap(), a);
    }

    #[test]
    fn dump_format() {
        let m = fixtures::path3();
        let w = extract_walk_with(&m, Some(0), 2, |_| 0).unwrap();
        assert_eq!(format_walks(&[w]), "path 2 0 1\n");
    }

    #[test]
    fn features_layout() {
        let m = fixtures::path3();
        let w = extract_walk_with(&m, Some(1), 3, |_| 0).unwrap();
        assert_eq!(w.features(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 1.0]);
    }
}
