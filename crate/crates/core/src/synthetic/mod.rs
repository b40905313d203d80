//! Procedural segmented chair-like shapes with exact point correspondence.
//!
//! Every part cloud is its category template plus a linear combination of
//! smooth displacement fields, so the true part manifold of each category is
//! a flat subspace whose dimension equals the number of fields. Width, depth
//! and seat height are drawn once per shape and shared by every part, which
//! couples the parts the way a real chair's parts are coupled.

mod correspond;
mod io;

pub use correspond::correspond_by_template;
pub use io::{read_dataset, read_shape_file, write_dataset, write_shape_file, MANIFEST_FILE};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

pub type CategoryId = u32;

/// Points of one part in template order: index `i` denotes the same location
/// on every part of the category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondedCloud {
    pub category: CategoryId,
    pub points: Vec<Point3<f64>>,
}

impl CorrespondedCloud {
    pub fn new(category: CategoryId, points: Vec<Point3<f64>>) -> Self {
        Self { category, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn to_cloud(&self) -> Result<PointCloud<f64>> {
        PointCloud::new(self.points.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartCategory {
    pub id: CategoryId,
    pub name: String,
    pub template: PointCloud<f64>,
    pub parameter_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentedShape {
    pub id: String,
    pub parts: Vec<CorrespondedCloud>,
}

impl SegmentedShape {
    pub fn part(&self, category: CategoryId) -> Option<&CorrespondedCloud> {
        self.parts.iter().find(|p| p.category == category)
    }

    /// Checks the shape invariants against a dataset layout.
    pub fn validate(&self, m: usize, p: usize) -> Result<()> {
        if self.parts.len() > m {
            return Err(Error::Malformed(format!(
                "shape {} has {} parts, at most {m} allowed",
                self.id,
                self.parts.len()
            )));
        }
        let mut seen = vec![false; m];
        for part in &self.parts {
            let c = part.category as usize;
            if c >= m {
                return Err(Error::UnknownCategory(part.category));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Malformed(format!("shape {} repeats category {c}", self.id)));
            }
            if part.len() != p {
                return Err(Error::PointCount {
                    file: self.id.clone(),
                    expected: p,
                    found: part.len(),
                });
            }
        }
        Ok(())
    }

    /// All part points concatenated in part order.
    pub fn to_cloud(&self) -> Result<PointCloud<f64>> {
        PointCloud::new(self.parts.iter().flat_map(|p| p.points.iter().copied()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub points_per_part: usize,
    pub categories: Vec<PartCategory>,
    pub shapes: Vec<SegmentedShape>,
}

impl Dataset {
    pub fn m(&self) -> usize {
        self.categories.len()
    }

    pub fn category_by_name(&self, name: &str) -> Option<&PartCategory> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Every part of one category, in shape order.
    pub fn parts_of(&self, category: CategoryId) -> Vec<CorrespondedCloud> {
        self.shapes.iter().filter_map(|s| s.part(category).cloned()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Seat,
    Back,
    LegGroup,
    ArmrestGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub kind: PartKind,
    /// Probability that a shape contains this part.
    pub presence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    pub name: String,
    pub points_per_part: usize,
    /// Multiplies every deformation standard deviation; zero yields templates.
    pub amplitude: f64,
    pub categories: Vec<CategorySpec>,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        let spec = |name: &str, kind, presence| CategorySpec {
            name: name.into(),
            kind,
            presence,
        };
        Self {
            name: "chairs".into(),
            points_per_part: 256,
            amplitude: 1.0,
            categories: vec![
                spec("seat", PartKind::Seat, 1.0),
                spec("back", PartKind::Back, 0.9),
                spec("leg_group", PartKind::LegGroup, 1.0),
                spec("armrest_group", PartKind::ArmrestGroup, 0.4),
            ],
        }
    }
}

impl FamilyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("family config: {msg}")));
        let m = self.categories.len();
        if m == 0 || m > 4 {
            return bad(format!("{m} categories, expected 1..=4"));
        }
        if self.points_per_part < 8 {
            return bad(format!("points_per_part {} < 8", self.points_per_part));
        }
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return bad(format!("amplitude {} must be finite and >= 0", self.amplitude));
        }
        for (i, c) in self.categories.iter().enumerate() {
            if !(0.0..=1.0).contains(&c.presence) {
                return bad(format!("presence of {} outside [0,1]", c.name));
            }
            if self.categories[..i]
                .iter()
                .any(|o| o.kind == c.kind || o.name == c.name)
            {
                return bad(format!("duplicate category {}", c.name));
            }
        }
        match self.categories.iter().find(|c| c.kind == PartKind::Seat) {
            Some(seat) if seat.presence == 1.0 => {}
            _ => return bad("a seat category with presence 1 is required".into()),
        }
        let always = self.categories.iter().filter(|c| c.presence == 1.0).count();
        if always < 2 {
            return bad("at least two categories must always be present".into());
        }
        Ok(())
    }
}

/// Ground-truth generator parameters of one shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTruth {
    /// Shared width, depth and seat-height offsets.
    pub shared: [f64; 3],
    /// Per part: category and the full coefficient vector of its fields.
    pub parts: Vec<(CategoryId, Vec<f64>)>,
}

/// Generated dataset plus the parameters that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub dataset: Dataset,
    pub truth: Vec<ShapeTruth>,
}

// Nominal chair layout in canonical coordinates.
const HALF_WIDTH: f64 = 0.5;
const HALF_DEPTH: f64 = 0.45;
const SEAT_Y: f64 = 0.0;
const FLOOR_Y: f64 = -0.85;
const BACK_HEIGHT: f64 = 0.75;
const LEG_INSET: f64 = 0.85;
const LEG_RADIUS: f64 = 0.04;
const ARM_RADIUS: f64 = 0.03;
const ARM_RISE: f64 = 0.28;
const RING: [(f64, f64); 4] = [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)];

const SHARED_STD: [f64; 3] = [0.08, 0.07, 0.06];

#[derive(Debug, Clone, Copy)]
enum Coef {
    Shared(usize),
    Local(f64),
}

/// Template, displacement fields and coefficient sources of one category.
#[derive(Debug, Clone)]
struct PartModel {
    template: Vec<Point3<f64>>,
    fields: Vec<Vec<Point3<f64>>>,
    coefs: Vec<Coef>,
}

impl PartModel {
    fn build(kind: PartKind, p: usize) -> Self {
        let mut template = Vec::with_capacity(p);
        let mut rows: Vec<Vec<Point3<f64>>> = Vec::with_capacity(p);
        let v3 = Point3::new;
        match kind {
            PartKind::Seat => {
                for (u, v) in grid(p) {
                    template.push(v3(HALF_WIDTH * u, SEAT_Y, HALF_DEPTH * v));
                    rows.push(vec![
                        v3(u, 0.0, 0.0),
                        v3(0.0, 0.0, v),
                        v3(0.0, 1.0, 0.0),
                        v3(0.0, (1.0 - u * u) * (1.0 - v * v), 0.0),
                        v3(0.0, v, 0.0),
                        v3(0.0, u, 0.0),
                        v3(u * v, 0.0, 0.0),
                    ]);
                }
            }
            PartKind::Back => {
                for (u, s) in grid(p) {
                    let s = 0.5 * (s + 1.0);
                    template.push(v3(HALF_WIDTH * u, SEAT_Y + BACK_HEIGHT * s, -HALF_DEPTH));
                    rows.push(vec![
                        v3(u, 0.0, 0.0),
                        v3(0.0, 0.0, -1.0),
                        v3(0.0, 1.0, 0.0),
                        v3(0.0, s, 0.0),
                        v3(0.0, 0.0, -s),
                        v3(0.0, 0.0, u * u),
                        v3(0.0, (1.0 - u * u) * s, 0.0),
                    ]);
                }
            }
            PartKind::LegGroup => {
                let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
                for (k, &(cx, cz)) in corners.iter().enumerate() {
                    let n = p / 4 + usize::from(k < p % 4);
                    let levels = n.div_ceil(4).max(2);
                    for j in 0..n {
                        let u = (j / 4) as f64 / (levels - 1) as f64;
                        let (ox, oz) = RING[j % 4];
                        template.push(v3(
                            LEG_INSET * HALF_WIDTH * cx + LEG_RADIUS * ox,
                            SEAT_Y + (FLOOR_Y - SEAT_Y) * u,
                            LEG_INSET * HALF_DEPTH * cz + LEG_RADIUS * oz,
                        ));
                        rows.push(vec![
                            v3(LEG_INSET * cx, 0.0, 0.0),
                            v3(0.0, 0.0, LEG_INSET * cz),
                            v3(0.0, 1.0 - u, 0.0),
                            v3(cx * u, 0.0, cz * u),
                            v3(ox, 0.0, oz),
                            v3(0.0, 0.0, u),
                        ]);
                    }
                }
            }
            PartKind::ArmrestGroup => {
                for (k, sx) in [-1.0, 1.0].into_iter().enumerate() {
                    let n = p / 2 + usize::from(k < p % 2);
                    let levels = n.div_ceil(4).max(2);
                    for j in 0..n {
                        let v = (j / 4) as f64 / (levels - 1) as f64;
                        let (ox, oy) = RING[j % 4];
                        let z = -HALF_DEPTH + 1.5 * HALF_DEPTH * v;
                        template.push(v3(
                            sx * (HALF_WIDTH + 0.06) + ARM_RADIUS * ox,
                            SEAT_Y + ARM_RISE + ARM_RADIUS * oy,
                            z,
                        ));
                        rows.push(vec![
                            v3(sx, 0.0, 0.0),
                            v3(0.0, 0.0, z / HALF_DEPTH),
                            v3(0.0, 1.0, 0.0),
                            v3(0.0, v, 0.0),
                            v3(0.0, 0.0, v),
                            v3(0.0, 4.0 * v * (1.0 - v), 0.0),
                            v3(sx * v, 0.0, 0.0),
                        ]);
                    }
                }
            }
        }
        let locals: &[f64] = match kind {
            PartKind::Seat => &[0.05, 0.05, 0.03, 0.05],
            PartKind::Back => &[0.1, 0.08, 0.06, 0.06],
            PartKind::LegGroup => &[0.06, 0.02, 0.04],
            PartKind::ArmrestGroup => &[0.06, 0.08, 0.04, 0.04],
        };
        let coefs = (0..3)
            .map(Coef::Shared)
            .chain(locals.iter().map(|&s| Coef::Local(s)))
            .collect::<Vec<_>>();
        let nf = coefs.len();
        let fields = (0..nf).map(|f| rows.iter().map(|r| r[f]).collect()).collect();
        Self {
            template,
            fields,
            coefs,
        }
    }

    fn deform(&self, coefs: &[f64]) -> Vec<Point3<f64>> {
        self.template
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let mut p = *t;
                for (field, &c) in self.fields.iter().zip(coefs) {
                    p = p + field[i] * c;
                }
                round_f32(p)
            })
            .collect()
    }
}

/// Scanline `(u, v)` grid over `[-1, 1]^2` with exactly `p` samples.
fn grid(p: usize) -> Vec<(f64, f64)> {
    let rows = ((p as f64).sqrt().round() as usize).max(2);
    let cols = p.div_ceil(rows).max(2);
    (0..p)
        .map(|k| {
            let (r, c) = (k / cols, k % cols);
            (
                -1.0 + 2.0 * c as f64 / (cols - 1) as f64,
                -1.0 + 2.0 * r as f64 / (rows - 1) as f64,
            )
        })
        .collect()
}

// Stored points are exactly representable in the float32 dataset format.
fn round_f32(p: Point3<f64>) -> Point3<f64> {
    Point3::new(p.x as f32 as f64, p.y as f32 as f64, p.z as f32 as f64)
}

pub fn family_categories(family: &FamilyConfig) -> Result<Vec<PartCategory>> {
    family.validate()?;
    family
        .categories
        .iter()
        .enumerate()
        .map(|(id, spec)| {
            let model = PartModel::build(spec.kind, family.points_per_part);
            Ok(PartCategory {
                id: id as CategoryId,
                name: spec.name.clone(),
                template: PointCloud::new(model.template.iter().copied().map(round_f32).collect())?,
                parameter_count: model.fields.len(),
            })
        })
        .collect()
}

/// Generates `n` shapes deterministically from `seed`.
pub fn generate_dataset(family: &FamilyConfig, n: usize, seed: u64) -> Result<SyntheticDataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("dataset size {n} < 2")));
    }
    let categories = family_categories(family)?;
    let models: Vec<PartModel> = family
        .categories
        .iter()
        .map(|c| PartModel::build(c.kind, family.points_per_part))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shapes = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for s in 0..n {
        let mut shared = [0.0; 3];
        for (k, v) in shared.iter_mut().enumerate() {
            let xi: f64 = rng.sample(StandardNormal);
            *v = family.amplitude * SHARED_STD[k] * xi;
        }
        let mut parts = Vec::new();
        let mut part_truth = Vec::new();
        for (c, (spec, model)) in family.categories.iter().zip(&models).enumerate() {
            // Always consume the same draws so presence does not shift later streams.
            let present = rng.random::<f64>() < spec.presence;
            let coefs: Vec<f64> = model
                .coefs
                .iter()
                .map(|coef| match *coef {
                    Coef::Shared(k) => shared[k],
                    Coef::Local(std) => {
                        let xi: f64 = rng.sample(StandardNormal);
                        family.amplitude * std * xi
                    }
                })
                .collect();
            if present {
                parts.push(CorrespondedCloud::new(c as CategoryId, model.deform(&coefs)));
                part_truth.push((c as CategoryId, coefs));
            }
        }
        shapes.push(SegmentedShape {
            id: format!("shape_{s:05}"),
            parts,
        });
        truth.push(ShapeTruth {
            shared,
            parts: part_truth,
        });
    }
    Ok(SyntheticDataset {
        dataset: Dataset {
            name: family.name.clone(),
            points_per_part: family.points_per_part,
            categories,
            shapes,
        },
        truth,
    })
}
