use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::semantics::LabelCodebook;
use crate::ssm::PartSsm;
use crate::synthetic::{CategoryId, CorrespondedCloud, SegmentedShape};

/// Column layout of a part latent row: geometry columns (`width` = the
/// largest per-category `q`) followed by `m + 1` label columns. Category `j`
/// uses the first `geometry_dims[j]` geometry columns; the rest stay zero.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentLayout {
    pub geometry_dims: Vec<usize>,
}

impl LatentLayout {
    pub fn new(geometry_dims: Vec<usize>) -> Result<Self> {
        if geometry_dims.is_empty() || geometry_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "every category needs at least one geometry dimension".into(),
            ));
        }
        Ok(Self { geometry_dims })
    }

    pub fn from_ssms(ssms: &[PartSsm]) -> Result<Self> {
        for (j, s) in ssms.iter().enumerate() {
            if s.category() as usize != j {
                return Err(Error::InvalidArgument(format!(
                    "shape model {j} has category {}",
                    s.category()
                )));
            }
        }
        Self::new(ssms.iter().map(PartSsm::q).collect())
    }

    pub fn m(&self) -> usize {
        self.geometry_dims.len()
    }

    pub fn classes(&self) -> usize {
        self.m() + 1
    }

    pub fn padding_class(&self) -> usize {
        self.m()
    }

    pub fn geometry_width(&self) -> usize {
        self.geometry_dims.iter().copied().max().unwrap_or(0)
    }

    pub fn row_width(&self) -> usize {
        self.geometry_width() + self.classes()
    }
}

/// One shape as `m` latent rows plus a mask of real (non-padding) rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeLatent {
    pub rows: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
}

impl ShapeLatent {
    /// All-padding latent: zero geometry, padding label mean.
    pub fn empty(layout: &LatentLayout, codebook: &LabelCodebook) -> Self {
        let row = padding_row(layout, codebook);
        Self {
            rows: vec![row; layout.m()],
            mask: vec![false; layout.m()],
        }
    }

    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn validate(&self, layout: &LatentLayout) -> Result<()> {
        if self.rows.len() != layout.m() || self.mask.len() != layout.m() {
            return Err(Error::ShapeMismatch(format!(
                "latent has {} rows and {} mask entries, expected {}",
                self.rows.len(),
                self.mask.len(),
                layout.m()
            )));
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.len() != layout.row_width() {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} values, expected {}",
                    r.len(),
                    layout.row_width()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("latent row {i}")));
            }
        }
        Ok(())
    }

    pub fn geometry<'a>(&'a self, layout: &LatentLayout, row: usize) -> &'a [f64] {
        &self.rows[row][..layout.geometry_width()]
    }

    pub fn labels<'a>(&'a self, layout: &LatentLayout, row: usize) -> &'a [f64] {
        &self.rows[row][layout.geometry_width()..]
    }

    /// Class of each row under the codebook.
    pub fn classes(&self, layout: &LatentLayout, codebook: &LabelCodebook) -> Result<Vec<usize>> {
        (0..self.m())
            .map(|r| codebook.classify(self.labels(layout, r)).map(|(c, _)| c))
            .collect()
    }

    /// Row holding `category` among the real rows, if any.
    pub fn find_category(
        &self,
        layout: &LatentLayout,
        codebook: &LabelCodebook,
        category: usize,
    ) -> Result<Option<usize>> {
        let classes = self.classes(layout, codebook)?;
        Ok((0..self.m()).find(|&r| self.mask[r] && classes[r] == category))
    }

    pub fn real_rows(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.rows.concat()
    }
}

pub(crate) fn padding_row(layout: &LatentLayout, codebook: &LabelCodebook) -> Vec<f64> {
    let mut row = vec![0.0; layout.geometry_width()];
    row.extend_from_slice(codebook.mean(codebook.padding_class()).expect("padding class"));
    row
}

/// Latent row for a part of `category` with whitened geometry `z`.
pub fn part_row(layout: &LatentLayout, codebook: &LabelCodebook, category: usize, z: &[f64]) -> Result<Vec<f64>> {
    let q = *layout
        .geometry_dims
        .get(category)
        .ok_or(Error::UnknownCategory(category as u32))?;
    if z.len() != q {
        return Err(Error::ShapeMismatch(format!(
            "category {category} takes {q} latent values, got {}",
            z.len()
        )));
    }
    let mut row = vec![0.0; layout.geometry_width()];
    row[..q].copy_from_slice(z);
    row.extend_from_slice(codebook.mean(category)?);
    Ok(row)
}

/// Encodes a segmented shape; row `j` holds category `j` or padding.
pub fn encode_shape(
    layout: &LatentLayout,
    codebook: &LabelCodebook,
    ssms: &[PartSsm],
    shape: &SegmentedShape,
) -> Result<ShapeLatent> {
    let mut latent = ShapeLatent::empty(layout, codebook);
    for part in &shape.parts {
        let j = part.category as usize;
        let ssm = ssms.get(j).ok_or(Error::UnknownCategory(part.category))?;
        let z = ssm.encode(part)?;
        latent.rows[j] = part_row(layout, codebook, j, &z)?;
        latent.mask[j] = true;
    }
    Ok(latent)
}

/// Decodes the real rows of a latent in row order. Rows are labelled by
/// codebook classification; a real row classified as padding is an error.
pub fn decode_shape(
    layout: &LatentLayout,
    codebook: &LabelCodebook,
    ssms: &[PartSsm],
    latent: &ShapeLatent,
    id: &str,
) -> Result<SegmentedShape> {
    latent.validate(layout)?;
    let classes = latent.classes(layout, codebook)?;
    let mut parts = Vec::new();
    for r in 0..latent.m() {
        if !latent.mask[r] {
            continue;
        }
        let c = classes[r];
        if c >= layout.m() {
            return Err(Error::Malformed(format!(
                "row {r} is marked real but labelled as padding"
            )));
        }
        parts.push(decode_row(layout, ssms, c, latent.geometry(layout, r))?);
    }
    Ok(SegmentedShape {
        id: id.to_string(),
        parts,
    })
}

pub fn decode_row(
    layout: &LatentLayout,
    ssms: &[PartSsm],
    category: usize,
    geometry: &[f64],
) -> Result<CorrespondedCloud> {
    let ssm = ssms.get(category).ok_or(Error::UnknownCategory(category as u32))?;
    let q = layout.geometry_dims[category];
    ssm.decode(&geometry[..q])
}

/// A decoded shape is structurally valid when the seat category (0) is
/// present and no category appears twice.
pub fn is_structurally_valid(layout: &LatentLayout, codebook: &LabelCodebook, latent: &ShapeLatent) -> bool {
    let Ok(classes) = latent.classes(layout, codebook) else {
        return false;
    };
    let mut seen = vec![false; layout.classes()];
    for r in 0..latent.m() {
        if !latent.mask[r] {
            continue;
        }
        let c = classes[r];
        if c >= layout.m() || seen[c] {
            return false;
        }
        seen[c] = true;
    }
    seen[0]
}

/// Category ids of the real rows.
pub fn real_categories(
    layout: &LatentLayout,
    codebook: &LabelCodebook,
    latent: &ShapeLatent,
) -> Result<Vec<CategoryId>> {
    let classes = latent.classes(layout, codebook)?;
    Ok((0..latent.m())
        .filter(|&r| latent.mask[r])
        .map(|r| classes[r] as CategoryId)
        .collect())
}
