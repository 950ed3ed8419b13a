//! ASCII PLY point clouds and OBJ triangle meshes.
//!
//! The PLY writer emits a single `vertex` element with `double x y z`
//! properties; coordinates are printed in shortest round-trip form, so a
//! write/read cycle is lossless. The reader accepts any ASCII PLY whose
//! `vertex` element carries `x`, `y`, `z` (extra properties and elements
//! are skipped).

use std::fmt::Write as _;
use std::path::Path;

use super::{Point3, PointCloud, TriangleMesh};
use crate::error::{Error, Result};

pub fn read_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&text, path)
}

pub fn write_ply(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_ply(pc)).map_err(|e| Error::io(path, e))
}

pub fn format_ply(pc: &PointCloud) -> String {
    let mut s = String::with_capacity(64 + pc.len() * 60);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", pc.len());
    s.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
    for p in pc {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
    has_list: bool,
}

pub fn parse_ply(text: &str, path: &Path) -> Result<PointCloud> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(err(1, "missing 'ply' magic".into())),
    }
    let mut elements: Vec<Element> = Vec::new();
    let mut header_done = false;
    for (ln, line) in lines.by_ref() {
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(err(ln, "only 'format ascii 1.0' is supported".into()));
                }
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| err(ln, "element without name".into()))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| err(ln, "element count is not an integer".into()))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err(ln, "property before any element".into()))?;
                let rest: Vec<&str> = tok.collect();
                match rest.as_slice() {
                    ["list", _, _, name] => {
                        el.has_list = true;
                        el.props.push(name.to_string());
                    }
                    [_, name] => el.props.push(name.to_string()),
                    _ => return Err(err(ln, format!("malformed property '{line}'"))),
                }
            }
            Some("end_header") => {
                header_done = true;
                break;
            }
            Some(other) => return Err(err(ln, format!("unexpected header keyword '{other}'"))),
        }
    }
    if !header_done {
        return Err(err(text.lines().count(), "missing end_header".into()));
    }

    let mut points = Vec::new();
    let mut saw_vertex = false;
    for el in &elements {
        let is_vertex = el.name == "vertex";
        let axes = if is_vertex {
            saw_vertex = true;
            if el.has_list {
                return Err(err(0, "list properties on vertex are not supported".into()));
            }
            let find = |n: &str| el.props.iter().position(|p| p == n);
            match (find("x"), find("y"), find("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => return Err(err(0, "vertex element lacks x/y/z".into())),
            }
        } else {
            None
        };
        for _ in 0..el.count {
            let (ln, line) = lines
                .next()
                .ok_or_else(|| err(text.lines().count(), format!("truncated '{}' data", el.name)))?;
            let Some(axes) = axes else { continue };
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != el.props.len() {
                return Err(err(
                    ln,
                    format!("expected {} values, found {}", el.props.len(), vals.len()),
                ));
            }
            let mut xyz = [0.0; 3];
            for (slot, &a) in xyz.iter_mut().zip(&axes) {
                *slot = vals[a]
                    .parse::<f64>()
                    .map_err(|_| err(ln, format!("invalid number '{}'", vals[a])))?;
                if !slot.is_finite() {
                    return Err(err(ln, format!("non-finite coordinate '{}'", vals[a])));
                }
            }
            points.push(Point3::new(xyz[0], xyz[1], xyz[2]));
        }
    }
    if !saw_vertex {
        return Err(err(0, "no vertex element".into()));
    }
    Ok(PointCloud::from_vec_unchecked(points))
}

pub fn read_obj(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&text, path)
}

/// `v` and `f` records only; polygons are fan-triangulated, negative
/// indices are relative, and `v/vt/vn` index forms are accepted.
pub fn parse_obj(text: &str, path: &Path) -> Result<TriangleMesh> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let vals: Vec<f64> = tok
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| err(ln, "invalid vertex coordinate".into()))?;
                if vals.len() != 3 {
                    return Err(err(ln, "vertex needs three coordinates".into()));
                }
                vertices.push(Point3::new(vals[0], vals[1], vals[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = tok
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or("");
                        let raw: i64 = head
                            .parse()
                            .map_err(|_| err(ln, format!("invalid face index '{t}'")))?;
                        let resolved = match raw {
                            r if r > 0 => r - 1,
                            r if r < 0 => vertices.len() as i64 + r,
                            _ => return Err(err(ln, "face index 0 is invalid".into())),
                        };
                        if resolved < 0 || resolved as usize >= vertices.len() {
                            return Err(err(ln, format!("face index {raw} out of range")));
                        }
                        Ok(resolved as usize)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(err(ln, "face needs at least three vertices".into()));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem.ply")
    }

    #[test]
    fn reads_float_ply_with_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment test\nelement vertex 2\nproperty float x\n\
                    property float y\nproperty float z\nproperty uchar red\nelement face 1\n\
                    property list uchar int vertex_indices\nend_header\n1 2 3 255\n4 5 6 0\n3 0 1 1\n";
        let pc = parse_ply(text, p()).unwrap();
        assert_eq!(pc.to_rows(), vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
    }

    #[test]
    fn malformed_ply_reports_line() {
        let text = "ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nproperty double y\n\
                    property double z\nend_header\n1 2 3\n4 five 6\n";
        match parse_ply(text, p()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 9),
            e => panic!("unexpected {e}"),
        }
        let truncated = "ply\nformat ascii 1.0\nelement vertex 3\nproperty double x\nproperty double y\n\
                         property double z\nend_header\n1 2 3\n";
        assert!(matches!(parse_ply(truncated, p()), Err(Error::Parse { .. })));
        assert!(matches!(parse_ply("hello", p()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn obj_fan_triangulation_and_index_forms() {
        let text = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\nf -4 -3 -2\n";
        let mesh = parse_obj(text, Path::new("q.obj")).unwrap();
        assert_eq!(mesh.faces(), &[[0, 1, 2], [0, 2, 3], [0, 1, 2]]);
        assert!((mesh.total_area() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn obj_bad_index() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n";
        assert!(matches!(
            parse_obj(text, Path::new("b.obj")),
            Err(Error::Parse { line: 4, .. })
        ));
    }

    proptest! {
        #[test]
        fn ply_round_trip_is_lossless(rows in prop::collection::vec(prop::array::uniform3(-1e6f64..1e6), 1..40)) {
            let pc = PointCloud::from_rows(&rows).unwrap();
            let back = parse_ply(&format_ply(&pc), p()).unwrap();
            prop_assert_eq!(back, pc);
        }
    }
}
