//! Mesh file formats: the `.tet` ASCII format, a Medit `.mesh` subset, and
//! OBJ export of boundary surfaces.
//!
//! `.tet` grammar:
//!
//! ```text
//! tet 1
//! <N> <Z>
//! v <x> <y> <z>          (N lines)
//! t <i0> <i1> <i2> <i3>  (Z lines, 0-based)
//! ```
//!
//! Lines starting with `#` are comments. Numbers are written with 17
//! significant digits so a save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use super::TetMesh;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    TetAscii,
    MeditMesh,
}

impl MeshFormat {
    /// Guess from the file extension (`.tet` / `.mesh`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "tet" => Some(Self::TetAscii),
            "mesh" => Some(Self::MeditMesh),
            _ => None,
        }
    }
}

pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TetMesh> {
    let text = fs::read_to_string(path)?;
    match format {
        MeshFormat::TetAscii => parse_tet(&text),
        MeshFormat::MeditMesh => parse_medit(&text),
    }
}

fn parse_err(line: usize, reason: impl Into<String>) -> Error {
    Error::Parse { line, reason: reason.into() }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| parse_err(line, format!("missing {what}")))?;
    tok.parse().map_err(|_| parse_err(line, format!("invalid {what} `{tok}`")))
}

pub fn parse_tet(text: &str) -> Result<TetMesh> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (ln, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    if header.split_whitespace().collect::<Vec<_>>() != ["tet", "1"] {
        return Err(parse_err(ln, format!("expected header `tet 1`, found `{header}`")));
    }
    let (ln, counts) = lines.next().ok_or_else(|| parse_err(ln + 1, "missing counts line"))?;
    let mut toks = counts.split_whitespace();
    let n: usize = parse_num(toks.next(), ln, "vertex count")?;
    let z: usize = parse_num(toks.next(), ln, "tet count")?;
    if toks.next().is_some() {
        return Err(parse_err(ln, "trailing tokens after counts"));
    }

    let mut positions = Vec::with_capacity(n);
    let mut elements = Vec::with_capacity(z);
    let mut last = ln;
    for _ in 0..n {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(last + 1, "unexpected end of file in vertex block"))?;
        last = ln;
        let mut t = l.split_whitespace();
        if t.next() != Some("v") {
            return Err(parse_err(ln, "expected vertex line `v <x> <y> <z>`"));
        }
        let p = Vector3::new(
            parse_num(t.next(), ln, "x")?,
            parse_num(t.next(), ln, "y")?,
            parse_num(t.next(), ln, "z")?,
        );
        if t.next().is_some() {
            return Err(parse_err(ln, "trailing tokens on vertex line"));
        }
        positions.push(p);
    }
    for _ in 0..z {
        let (ln, l) = lines.next().ok_or_else(|| parse_err(last + 1, "unexpected end of file in tet block"))?;
        last = ln;
        let mut t = l.split_whitespace();
        if t.next() != Some("t") {
            return Err(parse_err(ln, "expected tet line `t <i0> <i1> <i2> <i3>`"));
        }
        let mut e = [0usize; 4];
        for slot in &mut e {
            *slot = parse_num(t.next(), ln, "vertex index")?;
        }
        if t.next().is_some() {
            return Err(parse_err(ln, "trailing tokens on tet line"));
        }
        elements.push(e);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(parse_err(ln, "unexpected content after tet block"));
    }
    TetMesh::new(positions, elements)
}

pub fn write_tet(mesh: &TetMesh) -> String {
    let mut s = String::with_capacity(64 * (mesh.num_vertices() + mesh.num_elements()));
    s.push_str("tet 1\n");
    let _ = writeln!(s, "{} {}", mesh.num_vertices(), mesh.num_elements());
    for p in mesh.positions() {
        let _ = writeln!(s, "v {:.16e} {:.16e} {:.16e}", p.x, p.y, p.z);
    }
    for e in mesh.elements() {
        let _ = writeln!(s, "t {} {} {} {}", e[0], e[1], e[2], e[3]);
    }
    s
}

pub fn save_tet(mesh: &TetMesh, path: &Path) -> Result<()> {
    fs::write(path, write_tet(mesh))?;
    Ok(())
}

/// Reads the `Vertices` and `Tetrahedra` sections of an ASCII Medit file
/// (version 2 or 3). Indices are converted from 1-based to 0-based; the
/// reference labels and every other section are ignored.
pub fn parse_medit(text: &str) -> Result<TetMesh> {
    let mut toks = text.lines().enumerate().flat_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("");
        l.split_whitespace().map(move |t| (i + 1, t))
    });

    let mut positions: Option<Vec<Vector3<f64>>> = None;
    let mut elements: Option<Vec<[usize; 4]>> = None;
    let mut version = None;

    while let Some((ln, tok)) = toks.next() {
        match tok {
            "MeshVersionFormatted" => {
                let v: u32 = parse_num(toks.next().map(|t| t.1), ln, "version")?;
                if !(v == 2 || v == 3) {
                    return Err(parse_err(ln, format!("unsupported Medit version {v}")));
                }
                version = Some(v);
            }
            "Dimension" => {
                let d: u32 = parse_num(toks.next().map(|t| t.1), ln, "dimension")?;
                if d != 3 {
                    return Err(parse_err(ln, format!("only 3D meshes are supported, got dimension {d}")));
                }
            }
            "Vertices" => {
                let (ln, t) = toks.next().ok_or_else(|| parse_err(ln, "missing vertex count"))?;
                let n: usize = parse_num(Some(t), ln, "vertex count")?;
                let mut pts = Vec::with_capacity(n);
                for _ in 0..n {
                    let mut c = [0.0; 3];
                    let mut at = ln;
                    for slot in &mut c {
                        let (l, t) = toks.next().ok_or_else(|| parse_err(at, "unexpected end in Vertices"))?;
                        at = l;
                        *slot = parse_num(Some(t), l, "coordinate")?;
                    }
                    let (l, t) = toks.next().ok_or_else(|| parse_err(at, "unexpected end in Vertices"))?;
                    let _: i64 = parse_num(Some(t), l, "vertex reference")?;
                    pts.push(Vector3::from(c));
                }
                positions = Some(pts);
            }
            "Tetrahedra" => {
                let (ln, t) = toks.next().ok_or_else(|| parse_err(ln, "missing tet count"))?;
                let z: usize = parse_num(Some(t), ln, "tet count")?;
                let mut tets = Vec::with_capacity(z);
                for _ in 0..z {
                    let mut e = [0usize; 4];
                    let mut at = ln;
                    for slot in &mut e {
                        let (l, t) = toks.next().ok_or_else(|| parse_err(at, "unexpected end in Tetrahedra"))?;
                        at = l;
                        let i: usize = parse_num(Some(t), l, "vertex index")?;
                        if i == 0 {
                            return Err(parse_err(l, "Medit indices are 1-based"));
                        }
                        *slot = i - 1;
                    }
                    let (l, t) = toks.next().ok_or_else(|| parse_err(at, "unexpected end in Tetrahedra"))?;
                    let _: i64 = parse_num(Some(t), l, "tet reference")?;
                    tets.push(e);
                }
                elements = Some(tets);
            }
            "End" => break,
            _ => {}
        }
    }
    if version.is_none() {
        return Err(parse_err(1, "missing MeshVersionFormatted"));
    }
    let positions = positions.ok_or_else(|| parse_err(1, "missing Vertices section"))?;
    let elements = elements.ok_or_else(|| parse_err(1, "missing Tetrahedra section"))?;
    TetMesh::new(positions, elements)
}

/// Medit `.mesh` text (version 2, 1-based indices, reference 0).
pub fn write_medit(mesh: &TetMesh) -> String {
    let mut s = String::from("MeshVersionFormatted 2\nDimension 3\n");
    let _ = writeln!(s, "Vertices\n{}", mesh.num_vertices());
    for p in mesh.positions() {
        let _ = writeln!(s, "{:.16e} {:.16e} {:.16e} 0", p.x, p.y, p.z);
    }
    let _ = writeln!(s, "Tetrahedra\n{}", mesh.num_elements());
    for e in mesh.elements() {
        let _ = writeln!(s, "{} {} {} {} 0", e[0] + 1, e[1] + 1, e[2] + 1, e[3] + 1);
    }
    s.push_str("End\n");
    s
}

/// OBJ text: every vertex of `mesh` (`v` lines), then 1-based `f` lines.
pub fn write_obj(mesh: &TetMesh, faces: &[[usize; 3]]) -> String {
    let mut s = String::new();
    for p in mesh.positions() {
        let _ = writeln!(s, "v {:.16e} {:.16e} {:.16e}", p.x, p.y, p.z);
    }
    for f in faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE_TET: &str = "tet 1\n# reference\n4 1\nv 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nt 0 1 2 3\n";

    #[test]
    fn medit_round_trip_is_exact() {
        let m = parse_tet("tet 1\n4 1\nv 0.1 0 0\nv 1 0.3 0\nv 0 1 0\nv 0 0 1.7\nt 0 1 2 3\n").unwrap();
        let back = parse_medit(&write_medit(&m)).unwrap();
        assert_eq!(back.positions(), m.positions());
        assert_eq!(back.elements(), m.elements());
    }

    #[test]
    fn minimal_tet_file() {
        let m = parse_tet(ONE_TET).unwrap();
        assert_eq!(m.num_vertices(), 4);
        assert_eq!(m.num_elements(), 1);
    }

    #[test]
    fn index_out_of_range() {
        let bad = ONE_TET.replace("t 0 1 2 3", "t 0 1 2 9");
        assert!(matches!(parse_tet(&bad), Err(Error::Index { index: 9, .. })));
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let bad = ONE_TET.replace("v 1 0 0", "v 1 zero 0");
        match parse_tet(&bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(parse_tet("tet 2\n4 1\n"), Err(Error::Parse { line: 1, .. })));
        let short = "tet 1\n4 1\nv 0 0 0\n";
        assert!(matches!(parse_tet(short), Err(Error::Parse { .. })));
    }

    #[test]
    fn two_tet_round_trip_is_bit_exact() {
        let m = TetMesh::new(
            vec![
                Vector3::new(0.1, 0.2, 0.3),
                Vector3::new(1.0 / 3.0, 0.0, 0.0),
                Vector3::new(0.0, 2.0f64.sqrt(), 0.0),
                Vector3::new(0.0, 0.0, std::f64::consts::PI),
                Vector3::new(1e-17, -7.25e8, 1.0),
            ],
            vec![[0, 1, 2, 3], [1, 2, 3, 4]],
        )
        .unwrap();
        let back = parse_tet(&write_tet(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(write_tet(&back), write_tet(&m));
    }

    #[test]
    fn medit_subset() {
        let text = "MeshVersionFormatted 2\nDimension 3\nVertices\n4\n0 0 0 1\n1 0 0 1\n0 1 0 1\n0 0 1 1\n\
                    Triangles\n1\n1 2 3 7\nTetrahedra\n1\n1 2 3 4 0\nEnd\n";
        let m = parse_medit(text).unwrap();
        assert_eq!(m.elements(), &[[0, 1, 2, 3]]);
        assert_eq!(m.positions()[3], Vector3::z());
        assert!(matches!(
            parse_medit(&text.replace("MeshVersionFormatted 2", "MeshVersionFormatted 7")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn obj_is_one_based() {
        let m = parse_tet(ONE_TET).unwrap();
        let obj = write_obj(&m, &m.boundary_surface().unwrap());
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 4);
        assert!(obj.lines().any(|l| l == "f 2 3 4"));
    }
}
