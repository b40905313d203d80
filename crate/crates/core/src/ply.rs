//! ASCII PLY export and import of point clouds with a per-point integer
//! `category` property.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::synthetic::{CategoryId, SegmentedShape};

/// A point and the part category it belongs to, if recorded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelledPoint {
    pub point: Point3<f64>,
    pub category: Option<CategoryId>,
}

/// Writes every part of `shape`, tagging each point with its category.
/// Coordinates use Rust's shortest round-trip formatting.
pub fn write_shape<W: Write>(out: &mut W, shape: &SegmentedShape) -> Result<()> {
    let count: usize = shape.parts.iter().map(|p| p.len()).sum();
    write!(
        out,
        "ply\nformat ascii 1.0\ncomment {}\nelement vertex {count}\nproperty double x\nproperty double y\nproperty double z\nproperty int category\nend_header\n",
        shape.id.replace(['\n', '\r'], " ")
    )?;
    for part in &shape.parts {
        for p in &part.points {
            writeln!(out, "{:?} {:?} {:?} {}", p.x, p.y, p.z, part.category)?;
        }
    }
    Ok(())
}

pub fn shape_to_string(shape: &SegmentedShape) -> String {
    let mut buf = Vec::new();
    write_shape(&mut buf, shape).expect("writing to memory");
    String::from_utf8(buf).expect("ASCII output")
}

/// Reads an ASCII PLY vertex element. `x`, `y`, `z` are required; an
/// integer `category` property is picked up when present. Other vertex
/// properties are ignored and other elements must be empty.
pub fn read_points<R: BufRead>(input: R) -> Result<Vec<LabelledPoint>> {
    let mut lines = input.lines();
    let mut next = || -> Result<Option<String>> { lines.next().transpose().map_err(Error::from) };
    if next()?.as_deref().map(str::trim) != Some("ply") {
        return Err(Error::Malformed("missing 'ply' magic".into()));
    }
    let mut vertices = None;
    let mut props: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let line = next()?.ok_or_else(|| Error::Malformed("header ends before end_header".into()))?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => {}
            ["format", other, ..] => return Err(Error::Malformed(format!("unsupported PLY format '{other}'"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                vertices = Some(
                    n.parse::<usize>()
                        .map_err(|_| Error::Malformed(format!("bad vertex count '{n}'")))?,
                );
                in_vertex = true;
            }
            ["element", name, n] => {
                if *n != "0" {
                    return Err(Error::Malformed(format!("unsupported non-empty element '{name}'")));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Malformed("list properties on vertices are not supported".into()))
            }
            ["property", "list", ..] => {}
            ["property", _, name] => {
                if in_vertex {
                    props.push(name.to_string());
                }
            }
            _ => return Err(Error::Malformed(format!("unrecognized header line '{line}'"))),
        }
    }
    let n = vertices.ok_or_else(|| Error::Malformed("no vertex element".into()))?;
    let find = |name: &str| props.iter().position(|p| p == name);
    let (ix, iy, iz) = match (find("x"), find("y"), find("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::Malformed("vertex element lacks x, y or z".into())),
    };
    let icat = find("category");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let line = next()?.ok_or_else(|| Error::Malformed(format!("expected {n} vertices, found {i}")))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != props.len() {
            return Err(Error::Malformed(format!(
                "vertex {i} has {} fields, expected {}",
                fields.len(),
                props.len()
            )));
        }
        let num = |k: usize| -> Result<f64> {
            let v: f64 = fields[k]
                .parse()
                .map_err(|_| Error::Malformed(format!("vertex {i}: '{}' is not a number", fields[k])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("vertex {i}")))
            }
        };
        let category = match icat {
            Some(k) => Some(
                fields[k]
                    .parse::<CategoryId>()
                    .map_err(|_| Error::Malformed(format!("vertex {i}: bad category '{}'", fields[k])))?,
            ),
            None => None,
        };
        out.push(LabelledPoint {
            point: Point3::new(num(ix)?, num(iy)?, num(iz)?),
            category,
        });
    }
    Ok(out)
}
