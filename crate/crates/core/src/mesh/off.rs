//! OFF reading/writing and segmentation label sidecars.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Mesh, Point};
use crate::error::{Error, Result};

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Self { inner: text.lines().enumerate(), last: 0 }
    }

    /// Next non-blank line with comments stripped, and its 1-based number.
    fn next_tokens(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (i, raw) in self.inner.by_ref() {
            self.last = i + 1;
            let body = raw.split('#').next().unwrap_or("");
            let tokens: Vec<&str> = body.split_whitespace().collect();
            if !tokens.is_empty() {
                return Some((i + 1, tokens));
            }
        }
        None
    }
}

/// Reads a triangle mesh from an OFF file. The mesh id is the file stem.
pub fn load_off(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("mesh").to_string();
    load_off_str(&text, &id, path)
}

/// Parses OFF text; `origin` is only used in error messages.
pub fn load_off_str(text: &str, id: &str, origin: &Path) -> Result<Mesh> {
    let err = |line: usize, msg: String| Error::Parse { path: PathBuf::from(origin), line, msg };
    let mut lines = Lines::new(text);

    let (hline, header) = lines.next_tokens().ok_or_else(|| err(1, "malformed header: empty file".into()))?;
    if header[0] != "OFF" {
        return Err(err(hline, format!("malformed header: expected OFF, found {:?}", header[0])));
    }
    let (cline, counts) = if header.len() > 1 {
        (hline, header[1..].to_vec())
    } else {
        lines
            .next_tokens()
            .ok_or_else(|| err(hline + 1, "malformed header: missing counts line".into()))?
    };
    if counts.len() < 2 {
        return Err(err(cline, "malformed header: counts line needs V F [E]".into()));
    }
    let parse_count = |s: &str| s.parse::<usize>().map_err(|_| err(cline, format!("malformed header: bad count {s:?}")));
    let nv = parse_count(counts[0])?;
    let nf = parse_count(counts[1])?;

    let mut vertices: Vec<Point> = Vec::with_capacity(nv);
    for k in 0..nv {
        let (ln, tok) = lines
            .next_tokens()
            .ok_or_else(|| err(lines.last, format!("fewer elements than declared: {k} of {nv} vertices")))?;
        if tok.len() < 3 {
            return Err(err(ln, format!("vertex needs 3 coordinates, found {}", tok.len())));
        }
        let mut p: Point = [0.0; 3];
        for d in 0..3 {
            p[d] = tok[d].parse().map_err(|_| err(ln, format!("bad coordinate {:?}", tok[d])))?;
            if !p[d].is_finite() {
                return Err(err(ln, format!("non-finite coordinate {:?}", tok[d])));
            }
        }
        vertices.push(p);
    }

    let mut faces = Vec::with_capacity(nf);
    for k in 0..nf {
        let (ln, tok) = lines
            .next_tokens()
            .ok_or_else(|| err(lines.last, format!("fewer elements than declared: {k} of {nf} faces")))?;
        let arity: usize = tok[0].parse().map_err(|_| err(ln, format!("bad face arity {:?}", tok[0])))?;
        if arity != 3 {
            return Err(err(ln, format!("non-triangular face with {arity} vertices")));
        }
        if tok.len() < 4 {
            return Err(err(ln, "non-triangular face: fewer than 3 indices".into()));
        }
        let mut f = [0usize; 3];
        for d in 0..3 {
            f[d] = tok[d + 1].parse().map_err(|_| err(ln, format!("bad vertex index {:?}", tok[d + 1])))?;
            if f[d] >= nv {
                return Err(err(ln, format!("index out of range: {} >= {nv}", f[d])));
            }
        }
        faces.push(f);
    }

    Mesh::new(id, vertices, faces).map_err(|e| err(cline, e.to_string()))
}

/// Serializes vertices and faces as OFF. Uses shortest round-trip float formatting,
/// so writing then reading reproduces coordinates exactly.
pub fn write_off_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    s.push_str("OFF\n");
    let _ = writeln!(s, "{} {} {}", mesh.vertices.len(), mesh.faces.len(), mesh.edges.len());
    for p in &mesh.vertices {
        let _ = writeln!(s, "{:?} {:?} {:?}", p[0], p[1], p[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn save_off(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_off_string(mesh))?;
    Ok(())
}

/// Reads one integer label per line (blank lines and `#` comments skipped).
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut lines = Lines::new(&text);
    let mut out = Vec::new();
    while let Some((ln, tok)) = lines.next_tokens() {
        let v = tok[0].parse().map_err(|_| Error::Parse {
            path: path.to_path_buf(),
            line: ln,
            msg: format!("bad label {:?}", tok[0]),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn save_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let mut s = String::with_capacity(labels.len() * 2);
    for l in labels {
        let _ = writeln!(s, "{l}");
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Mesh> {
        load_off_str(text, "t", Path::new("t.off"))
    }

    #[test]
    fn tetrahedron_has_six_edges() {
        let text = "OFF\n# a tetrahedron\n4 4 6\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 3 1\n3 0 2 3\n3 1 3 2\n";
        let m = parse(text).unwrap();
        assert_eq!(m.edges.len(), 6);
        assert_eq!(m.faces.len(), 4);
    }

    #[test]
    fn single_triangle_adjacency() {
        let m = parse("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(m.adjacency, vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
    }

    #[test]
    fn counts_on_header_line() {
        let m = parse("OFF 3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n").unwrap();
        assert_eq!(m.vertices.len(), 3);
    }

    #[test]
    fn quad_face_rejected_with_line() {
        let e = parse("OFF\n4 1 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("non-triangular face"), "{msg}");
        assert!(matches!(e, Error::Parse { line: 7, .. }), "{e:?}");
    }

    #[test]
    fn bad_header_rejected() {
        let e = parse("PLY\n3 1 0\n").unwrap_err();
        assert!(e.to_string().contains("malformed header"));
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn index_out_of_range_reported() {
        let e = parse("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 3\n").unwrap_err();
        assert!(e.to_string().contains("index out of range"));
        assert!(matches!(e, Error::Parse { line: 6, .. }));
    }

    #[test]
    fn truncated_file_reported() {
        let e = parse("OFF\n3 1 0\n0 0 0\n1 0 0\n").unwrap_err();
        assert!(e.to_string().contains("fewer elements than declared"), "{e}");
    }

    #[test]
    fn write_then_read_roundtrip() {
        let m = crate::mesh::fixtures::icosahedron().normalized().unwrap();
        let back = parse(&write_off_string(&m)).unwrap();
        assert_eq!(back.vertices, m.vertices);
        assert_eq!(back.faces, m.faces);
    }

    #[test]
    fn labels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.eseg");
        save_labels(&[0, 3, 1], &p).unwrap();
        assert_eq!(load_labels(&p).unwrap(), vec![0, 3, 1]);
    }
}
