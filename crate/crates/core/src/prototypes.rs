//! Class and spurious prototypes from a (template × class) text grid.
//!
//! A class prototype is the mean of one class's text features over all
//! templates; a spurious prototype is the mean of one template's features
//! over all classes. Both are optionally rescaled to unit norm afterwards.

use ndarray::{Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::embed_store::{ArchiveKind, EmbeddingArchive, PrototypeRole};
use crate::error::{Error, Result};

/// Text features arranged as `[template, class, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextGrid {
    features: Array3<f64>,
}

impl TextGrid {
    /// Builds the grid, requiring every (template, class) pair exactly once.
    pub fn from_archive(text: &EmbeddingArchive) -> Result<Self> {
        if text.kind() != ArchiveKind::Text {
            return Err(Error::IncompleteGrid("archive is not a text archive".into()));
        }
        let tids = text
            .template_ids()
            .ok_or_else(|| Error::IncompleteGrid("missing template ids".into()))?;
        let (m, c, d) = (text.templates().len(), text.classes().len(), text.dim());
        let mut features = Array3::zeros((m, c, d));
        let mut seen = vec![false; m * c];
        for (row, (&t, &y)) in tids.iter().zip(text.class_ids()).enumerate() {
            let (t, y) = (t as usize, y as usize);
            if std::mem::replace(&mut seen[t * c + y], true) {
                return Err(Error::IncompleteGrid(format!(
                    "duplicate pair (template {t}, class {y}) at row {row}"
                )));
            }
            features
                .slice_mut(ndarray::s![t, y, ..])
                .iter_mut()
                .zip(text.vectors().row(row))
                .for_each(|(o, &v)| *o = f64::from(v));
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::IncompleteGrid(format!(
                "missing pair (template {}, class {})",
                missing / c,
                missing % c
            )));
        }
        Ok(TextGrid { features })
    }

    pub fn from_array(features: Array3<f64>) -> Self {
        TextGrid { features }
    }

    pub fn templates(&self) -> usize {
        self.features.len_of(Axis(0))
    }

    pub fn classes(&self) -> usize {
        self.features.len_of(Axis(1))
    }

    pub fn dim(&self) -> usize {
        self.features.len_of(Axis(2))
    }

    pub fn features(&self) -> &Array3<f64> {
        &self.features
    }

    /// Swaps the template and class axes.
    pub fn transposed(&self) -> TextGrid {
        let swapped = self.features.view().permuted_axes([1, 0, 2]);
        TextGrid {
            features: swapped.as_standard_layout().into_owned(),
        }
    }

    /// One row per class: mean over templates.
    pub fn class_prototypes(&self, renormalize: bool) -> Result<Array2<f64>> {
        finish(mean_axis(&self.features, Axis(0)), renormalize)
    }

    /// One row per template: mean over classes.
    pub fn spurious_prototypes(&self, renormalize: bool) -> Result<Array2<f64>> {
        finish(mean_axis(&self.features, Axis(1)), renormalize)
    }
}

// Plain left-to-right accumulation, so results do not depend on ndarray's
// internal summation order.
fn mean_axis(features: &Array3<f64>, axis: Axis) -> Array2<f64> {
    let n = features.len_of(axis);
    let mut acc = features.index_axis(axis, 0).to_owned();
    for i in 1..n {
        acc += &features.index_axis(axis, i);
    }
    acc / n as f64
}

fn finish(mut protos: Array2<f64>, renormalize: bool) -> Result<Array2<f64>> {
    if renormalize {
        normalize_rows_inplace(&mut protos)?;
    }
    Ok(protos)
}

pub(crate) fn normalize_rows_inplace(m: &mut Array2<f64>) -> Result<()> {
    for (i, mut row) in m.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroNorm { row: i });
        }
        row /= norm;
    }
    Ok(())
}

/// Class prototypes `|classes| × D`.
pub fn compute_class_prototypes(text: &EmbeddingArchive, renormalize: bool) -> Result<Array2<f64>> {
    TextGrid::from_archive(text)?.class_prototypes(renormalize)
}

/// Spurious prototypes `|templates| × D`.
pub fn compute_spurious_prototypes(text: &EmbeddingArchive, renormalize: bool) -> Result<Array2<f64>> {
    TextGrid::from_archive(text)?.spurious_prototypes(renormalize)
}

/// Cosine similarity of two nonzero vectors.
pub fn cosine_similarity(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("lengths {} and {}", a.len(), b.len())));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 {
        return Err(Error::ZeroNorm { row: 0 });
    }
    if nb == 0.0 {
        return Err(Error::ZeroNorm { row: 1 });
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Identifies a spurious prototype row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "lowercase")]
pub enum SpuriousId {
    Template(usize),
    Cluster(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub class_protos: Array2<f64>,
    pub spurious_protos: Array2<f64>,
    pub class_names: Vec<String>,
    pub spurious_ids: Vec<SpuriousId>,
}

impl PrototypeSet {
    /// Class prototypes plus one spurious prototype per template (no correction).
    pub fn from_text(text: &EmbeddingArchive, renormalize: bool) -> Result<Self> {
        let grid = TextGrid::from_archive(text)?;
        let set = PrototypeSet {
            class_protos: grid.class_prototypes(renormalize)?,
            spurious_protos: grid.spurious_prototypes(renormalize)?,
            class_names: text.classes().to_vec(),
            spurious_ids: (0..grid.templates()).map(SpuriousId::Template).collect(),
        };
        set.validate()?;
        Ok(set)
    }

    /// Replaces the spurious rows, e.g. with corrected centroids.
    pub fn with_spurious(mut self, protos: Array2<f64>, ids: Vec<SpuriousId>) -> Result<Self> {
        self.spurious_protos = protos;
        self.spurious_ids = ids;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_protos.nrows() != self.class_names.len() {
            return Err(Error::Shape(format!(
                "{} class prototypes for {} names",
                self.class_protos.nrows(),
                self.class_names.len()
            )));
        }
        if self.spurious_protos.nrows() != self.spurious_ids.len() {
            return Err(Error::Shape(format!(
                "{} spurious prototypes for {} ids",
                self.spurious_protos.nrows(),
                self.spurious_ids.len()
            )));
        }
        if self.spurious_ids.len() < 2 {
            return Err(Error::Config("need at least two spurious prototypes".into()));
        }
        if self.class_protos.ncols() != self.spurious_protos.ncols() {
            return Err(Error::Shape("class and spurious prototype dims differ".into()));
        }
        if self
            .class_protos
            .iter()
            .chain(self.spurious_protos.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("prototype component".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.class_protos.ncols()
    }
}

/// Packs class prototypes as an image-kind archive labelled 0..C.
pub fn class_archive(set: &PrototypeSet) -> Result<EmbeddingArchive> {
    let n = set.class_protos.nrows();
    let archive = EmbeddingArchive::image(
        set.class_names.clone(),
        set.class_protos.mapv(|v| v as f32),
        (0..n as u32).collect(),
    )?;
    Ok(archive.with_prototype_role(PrototypeRole::Class))
}

/// Packs spurious prototypes as an image-kind archive whose "classes" are
/// the spurious row names (template text or `cluster-<i>`), labelled 0..M'.
pub fn spurious_archive(protos: &Array2<f64>, ids: &[SpuriousId], templates: &[String]) -> Result<EmbeddingArchive> {
    let names = ids
        .iter()
        .map(|id| match *id {
            SpuriousId::Template(t) => templates.get(t).cloned().unwrap_or_else(|| format!("template-{t}")),
            SpuriousId::Cluster(c) => format!("cluster-{c}"),
        })
        .collect();
    let archive = EmbeddingArchive::image(names, protos.mapv(|v| v as f32), (0..ids.len() as u32).collect())?
        .with_templates(templates.to_vec())?;
    Ok(archive.with_prototype_role(PrototypeRole::Spurious))
}
