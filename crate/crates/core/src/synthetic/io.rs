//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.json`, `templates.bin` and one
//! binary file per shape. Binary files are little-endian:
//!
//! ```text
//! u32                 part_count
//! part_count times:
//!   u32               category id
//!   p * 3 f32         x, y, z of each point in template order
//! ```
//!
//! `templates.bin` uses the same layout with one part per category.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CategoryId, CorrespondedCloud, Dataset, PartCategory, SegmentedShape};
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

pub const MANIFEST_FILE: &str = "manifest.json";
const TEMPLATES_FILE: &str = "templates.bin";
const FORMAT: &str = "partlatent-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    name: String,
    m: usize,
    p: usize,
    categories: Vec<ManifestCategory>,
    templates: String,
    shapes: Vec<ManifestShape>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestCategory {
    id: CategoryId,
    name: String,
    parameter_count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestShape {
    id: String,
    file: String,
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = dataset.points_per_part;
    let templates: Vec<CorrespondedCloud> = dataset
        .categories
        .iter()
        .map(|c| CorrespondedCloud::new(c.id, c.template.points().to_vec()))
        .collect();
    fs::write(dir.join(TEMPLATES_FILE), encode_parts(&templates))?;
    let mut shapes = Vec::with_capacity(dataset.shapes.len());
    for shape in &dataset.shapes {
        shape.validate(dataset.m(), p)?;
        let file = format!("{}.bin", shape.id);
        fs::write(dir.join(&file), encode_parts(&shape.parts))?;
        shapes.push(ManifestShape {
            id: shape.id.clone(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        name: dataset.name.clone(),
        m: dataset.m(),
        p,
        categories: dataset
            .categories
            .iter()
            .map(|c| ManifestCategory {
                id: c.id,
                name: c.name.clone(),
                parameter_count: c.parameter_count,
            })
            .collect(),
        templates: TEMPLATES_FILE.into(),
        shapes,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(Error::MissingManifest(dir.to_path_buf()));
    }
    let manifest: Manifest =
        serde_json::from_slice(&fs::read(&manifest_path)?).map_err(|e| Error::Malformed(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::Malformed(format!("unknown format tag {:?}", manifest.format)));
    }
    if manifest.version != VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            expected: VERSION,
        });
    }
    let (m, p) = (manifest.m, manifest.p);
    if m == 0 || p == 0 || manifest.categories.len() != m {
        return Err(Error::Malformed(format!(
            "manifest declares m={m}, p={p} with {} categories",
            manifest.categories.len()
        )));
    }
    for (i, c) in manifest.categories.iter().enumerate() {
        if c.id as usize != i {
            return Err(Error::Malformed(format!(
                "category ids must be dense, found {} at {i}",
                c.id
            )));
        }
    }
    let templates = read_shape_file(&dir.join(&manifest.templates), m, p)?;
    if templates.len() != m {
        return Err(Error::Malformed(format!(
            "{} templates for {m} categories",
            templates.len()
        )));
    }
    let categories = manifest
        .categories
        .iter()
        .zip(templates)
        .map(|(c, t)| {
            if t.category != c.id {
                return Err(Error::Malformed(format!(
                    "template order: found category {}",
                    t.category
                )));
            }
            Ok(PartCategory {
                id: c.id,
                name: c.name.clone(),
                template: PointCloud::new(t.points)?,
                parameter_count: c.parameter_count,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let shapes = manifest
        .shapes
        .iter()
        .map(|s| {
            let shape = SegmentedShape {
                id: s.id.clone(),
                parts: read_shape_file(&dir.join(&s.file), m, p)?,
            };
            shape.validate(m, p)?;
            Ok(shape)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: manifest.name,
        points_per_part: p,
        categories,
        shapes,
    })
}

pub fn write_shape_file(path: &Path, parts: &[CorrespondedCloud]) -> Result<()> {
    fs::write(path, encode_parts(parts))?;
    Ok(())
}

fn encode_parts(parts: &[CorrespondedCloud]) -> Vec<u8> {
    let p = parts.first().map_or(0, |c| c.len());
    let mut buf = Vec::with_capacity(4 + parts.len() * (4 + 12 * p));
    buf.extend_from_slice(&(parts.len() as u32).to_le_bytes());
    for part in parts {
        buf.extend_from_slice(&part.category.to_le_bytes());
        for pt in &part.points {
            for v in [pt.x, pt.y, pt.z] {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    buf
}

/// Reads one binary part file, validating the point count against `p` and
/// category ids against `m`.
pub fn read_shape_file(path: &Path, m: usize, p: usize) -> Result<Vec<CorrespondedCloud>> {
    let bytes = fs::read(path)?;
    let name = path.display().to_string();
    let malformed = |msg: &str| Error::Malformed(format!("{name}: {msg}"));
    if bytes.len() < 4 {
        return Err(malformed("truncated header"));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if count == 0 || count > m {
        return Err(malformed(&format!("part count {count} outside 1..={m}")));
    }
    let body = bytes.len() - 4;
    let expected = count * (4 + 12 * p);
    if body != expected {
        let per_part = body / count;
        let found = if body % count == 0 && per_part >= 4 && (per_part - 4) % 12 == 0 {
            (per_part - 4) / 12
        } else {
            return Err(malformed(&format!("{body} payload bytes do not hold {count} parts")));
        };
        return Err(Error::PointCount {
            file: name,
            expected: p,
            found,
        });
    }
    let mut parts = Vec::with_capacity(count);
    let mut off = 4;
    let next_u32 = |off: &mut usize| {
        let v = u32::from_le_bytes(bytes[*off..*off + 4].try_into().unwrap());
        *off += 4;
        v
    };
    for _ in 0..count {
        let category = next_u32(&mut off);
        if category as usize >= m {
            return Err(Error::UnknownCategory(category));
        }
        let points = (0..p)
            .map(|_| {
                let mut c = [0.0f64; 3];
                for v in &mut c {
                    *v = f32::from_bits(next_u32(&mut off)) as f64;
                }
                Point3::new(c[0], c[1], c[2])
            })
            .collect();
        parts.push(CorrespondedCloud::new(category, points));
    }
    Ok(parts)
}
