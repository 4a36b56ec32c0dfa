//! Plain-text dump format.
//!
//! A field file starts with the header
//!
//! ```text
//! vws-field v1 <layout> <M> <N>
//! ```
//!
//! followed by one line per entity (vertex or triangle, in mesh order) holding
//! the entity's block as whitespace-separated decimals. Values are written in
//! Rust's shortest round-trip notation, so a dump reads back bit-exactly.
//!
//! A mesh file reuses the same header with the pseudo-layouts `mesh_vertices`
//! (records `x y boundary_flag`) and `mesh_triangles` (records `a b c`); both
//! sections appear in one file, vertices first.

use std::fmt::Write as _;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::{DomainKind, Layout, PiecewiseField, TriMesh};

const MAGIC: &str = "vws-field";
const VERSION: &str = "v1";

fn header(kind: &str, m: usize, n: usize) -> String {
    format!("{MAGIC} {VERSION} {kind} {m} {n}\n")
}

pub fn write_field(field: &PiecewiseField) -> String {
    let mut out = header(field.layout().name(), field.mesh().resolution(), field.n_comp());
    for block in field.values().chunks(field.block_len()) {
        let mut first = true;
        for v in block {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

struct Header {
    kind: String,
    m: usize,
    n: usize,
}

fn parse_header(line: &str, lineno: usize) -> Result<Header> {
    let err = |message: &str| Error::Parse {
        line: lineno,
        message: message.to_string(),
    };
    let parts: Vec<&str> = line.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != MAGIC {
        return Err(err("expected `vws-field v1 <layout> <M> <N>`"));
    }
    if parts[1] != VERSION {
        return Err(err("unsupported format version"));
    }
    let m = parts[3].parse().map_err(|_| err("bad resolution"))?;
    let n = parts[4].parse().map_err(|_| err("bad component count"))?;
    Ok(Header {
        kind: parts[2].to_string(),
        m,
        n,
    })
}

fn parse_record(line: &str, lineno: usize, want: usize) -> Result<Vec<f64>> {
    let vals: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| Error::Parse {
        line: lineno,
        message: e.to_string(),
    })?;
    if vals.len() != want {
        return Err(Error::Parse {
            line: lineno,
            message: format!("expected {want} values, found {}", vals.len()),
        });
    }
    Ok(vals)
}

/// Reads a field dump onto `mesh`, which must have the dump's resolution.
pub fn read_field(text: &str, mesh: Arc<TriMesh>) -> Result<PiecewiseField> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty input".into(),
    })?;
    let hdr = parse_header(first, 1)?;
    let layout = Layout::from_name(&hdr.kind).ok_or_else(|| Error::Parse {
        line: 1,
        message: format!("unknown layout `{}`", hdr.kind),
    })?;
    if hdr.m != mesh.resolution() {
        return Err(Error::Parse {
            line: 1,
            message: format!("dump has M={}, mesh has M={}", hdr.m, mesh.resolution()),
        });
    }
    let block = layout.block_len(hdr.n);
    let count = layout.entity_count(&mesh);
    let mut values = Vec::with_capacity(count * block);
    let mut records = 0;
    for (idx, line) in lines {
        values.extend(parse_record(line, idx + 1, block)?);
        records += 1;
    }
    if records != count {
        return Err(Error::Parse {
            line: 0,
            message: format!("expected {count} records, found {records}"),
        });
    }
    PiecewiseField::new(mesh, layout, hdr.n, values)
}

pub fn write_mesh(mesh: &TriMesh) -> String {
    let m = mesh.resolution();
    let mut out = header("mesh_vertices", m, 1);
    for (v, p) in mesh.vertices().iter().enumerate() {
        writeln!(out, "{} {} {}", p[0], p[1], u8::from(mesh.is_boundary(v))).unwrap();
    }
    out.push_str(&header("mesh_triangles", m, 1));
    for t in mesh.triangles() {
        writeln!(out, "{} {} {}", t[0], t[1], t[2]).unwrap();
    }
    out
}

/// Reads a mesh dump. The domain kind of the result is [`DomainKind::Loaded`].
pub fn read_mesh(text: &str) -> Result<TriMesh> {
    let mut vertices = Vec::new();
    let mut boundary = Vec::new();
    let mut triangles = Vec::new();
    let mut section = None;
    let mut m = 0;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if line.starts_with(MAGIC) {
            let hdr = parse_header(line, lineno)?;
            m = hdr.m;
            section = Some(hdr.kind);
            continue;
        }
        match section.as_deref() {
            Some("mesh_vertices") => {
                let r = parse_record(line, lineno, 3)?;
                vertices.push([r[0], r[1]]);
                boundary.push(r[2] != 0.0);
            }
            Some("mesh_triangles") => {
                let r = parse_record(line, lineno, 3)?;
                triangles.push([r[0] as usize, r[1] as usize, r[2] as usize]);
            }
            _ => {
                return Err(Error::Parse {
                    line: lineno,
                    message: "record outside a mesh section".into(),
                })
            }
        }
    }
    // the grid is M cells wide; its height follows from the triangle count
    if m == 0 || triangles.len() % (2 * m) != 0 {
        return Err(Error::Parse {
            line: 0,
            message: "triangle count does not fit the declared resolution".into(),
        });
    }
    let ny = triangles.len() / (2 * m);
    TriMesh::from_parts(m, m, ny, vertices, triangles, boundary, DomainKind::Loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::build_unit_square_mesh;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn field_dump_round_trips(vals in proptest::collection::vec(-1e6f64..1e6, 2 * 18)) {
            let mesh = Arc::new(build_unit_square_mesh(3).unwrap());
            let f = PiecewiseField::new(mesh.clone(), Layout::TriangleVector, 1, vals).unwrap();
            let back = read_field(&write_field(&f), mesh).unwrap();
            prop_assert_eq!(back.values(), f.values());
            prop_assert_eq!(back.layout(), f.layout());
        }
    }

    #[test]
    fn header_is_documented_form() {
        let mesh = Arc::new(build_unit_square_mesh(4).unwrap());
        let u = PiecewiseField::vertex_scalar(mesh, |x| x[0]).unwrap();
        let text = write_field(&u);
        assert!(text.starts_with("vws-field v1 vertex_scalar 4 1\n"));
        assert_eq!(text.lines().count(), 1 + 25);
    }

    #[test]
    fn mesh_round_trip() {
        let mesh = build_unit_square_mesh(5).unwrap();
        let back = read_mesh(&write_mesh(&mesh)).unwrap();
        assert_eq!(back.vertices(), mesh.vertices());
        assert_eq!(back.triangles(), mesh.triangles());
        assert_eq!(back.boundary_flags(), mesh.boundary_flags());
    }

    #[test]
    fn rejects_bad_input() {
        let mesh = Arc::new(build_unit_square_mesh(2).unwrap());
        assert!(read_field("", mesh.clone()).is_err());
        assert!(read_field("vws-field v2 vertex_scalar 2 1\n", mesh.clone()).is_err());
        assert!(read_field("vws-field v1 vertex_scalar 3 1\n", mesh.clone()).is_err());
        let short = "vws-field v1 vertex_scalar 2 1\n1\n2\n";
        assert!(read_field(short, mesh).is_err());
    }
}
