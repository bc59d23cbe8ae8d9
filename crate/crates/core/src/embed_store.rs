//! Embedding archives.
//!
//! An archive is a pair of files sharing a path prefix:
//!
//! - `<prefix>.json`: UTF-8 JSON [`ArchiveManifest`]
//! - `<prefix>.bin`: the payload, all fields little-endian:
//!
//! ```text
//! magic      8 bytes   "FDEMB1\0\0"
//! dim        u32
//! count      u64
//! vectors    count * dim f32, row-major
//! class ids  count u32
//! template   count u32   (text archives only)
//! ```
//!
//! Image archives label each row with a class index. Text archives hold the
//! full (template × class) grid and label each row with both indices.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"FDEMB1\0\0";

/// Byte length of magic + dim + count.
pub const HEADER_LEN: usize = 8 + 4 + 8;

/// Allowed deviation from unit norm for archives flagged as normalized.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchiveKind {
    Image,
    Text,
}

/// Marks an archive as holding prototypes rather than raw features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeRole {
    Class,
    Spurious,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveManifest {
    pub dim: usize,
    pub count: usize,
    pub dtype: String,
    pub normalized: bool,
    pub classes: Vec<String>,
    #[serde(default)]
    pub templates: Vec<String>,
    pub kind: ArchiveKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype_role: Option<PrototypeRole>,
}

/// A validated, immutable matrix of embeddings with labels and manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingArchive {
    manifest: ArchiveManifest,
    vectors: Array2<f32>,
    class_ids: Vec<u32>,
    template_ids: Option<Vec<u32>>,
}

impl EmbeddingArchive {
    /// Builds an image archive. Rows are labelled with class indices.
    pub fn image(classes: Vec<String>, vectors: Array2<f32>, class_ids: Vec<u32>) -> Result<Self> {
        Self::from_parts(ArchiveKind::Image, classes, Vec::new(), vectors, class_ids, None)
    }

    /// Builds a text archive over a (template × class) grid.
    pub fn text(
        classes: Vec<String>,
        templates: Vec<String>,
        vectors: Array2<f32>,
        class_ids: Vec<u32>,
        template_ids: Vec<u32>,
    ) -> Result<Self> {
        Self::from_parts(
            ArchiveKind::Text,
            classes,
            templates,
            vectors,
            class_ids,
            Some(template_ids),
        )
    }

    fn from_parts(
        kind: ArchiveKind,
        classes: Vec<String>,
        templates: Vec<String>,
        vectors: Array2<f32>,
        class_ids: Vec<u32>,
        template_ids: Option<Vec<u32>>,
    ) -> Result<Self> {
        let manifest = ArchiveManifest {
            dim: vectors.ncols(),
            count: vectors.nrows(),
            dtype: "f32".to_string(),
            normalized: false,
            classes,
            templates,
            kind,
            prototype_role: None,
        };
        let archive = EmbeddingArchive {
            manifest,
            vectors,
            class_ids,
            template_ids,
        };
        archive.validate()?;
        Ok(archive)
    }

    /// Flags the archive as unit-normalized after checking every row norm.
    pub fn mark_normalized(mut self) -> Result<Self> {
        self.manifest.normalized = true;
        self.validate()?;
        Ok(self)
    }

    pub fn with_prototype_role(mut self, role: PrototypeRole) -> Self {
        self.manifest.prototype_role = Some(role);
        self
    }

    /// Replaces the template list, e.g. to carry provenance on prototype archives.
    pub fn with_templates(mut self, templates: Vec<String>) -> Result<Self> {
        self.manifest.templates = templates;
        self.validate()?;
        Ok(self)
    }

    pub fn manifest(&self) -> &ArchiveManifest {
        &self.manifest
    }

    pub fn kind(&self) -> ArchiveKind {
        self.manifest.kind
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn classes(&self) -> &[String] {
        &self.manifest.classes
    }

    pub fn templates(&self) -> &[String] {
        &self.manifest.templates
    }

    pub fn vectors(&self) -> &Array2<f32> {
        &self.vectors
    }

    pub fn class_ids(&self) -> &[u32] {
        &self.class_ids
    }

    pub fn template_ids(&self) -> Option<&[u32]> {
        self.template_ids.as_deref()
    }

    /// Row `i` widened to 64-bit.
    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.vectors.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// The whole matrix widened to 64-bit.
    pub fn to_f64(&self) -> Array2<f64> {
        self.vectors.mapv(f64::from)
    }

    /// Selected rows widened to 64-bit, in the given order.
    pub fn select_f64(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.dim()));
        for (dst, &src) in rows.iter().enumerate() {
            out.row_mut(dst)
                .iter_mut()
                .zip(self.vectors.row(src))
                .for_each(|(o, &v)| *o = f64::from(v));
        }
        out
    }

    /// Row indices grouped by class index.
    pub fn rows_by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.manifest.classes.len()];
        for (row, &c) in self.class_ids.iter().enumerate() {
            groups[c as usize].push(row);
        }
        groups
    }

    /// Checks every archive and manifest invariant.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.dtype != "f32" {
            return Err(Error::InvalidArchive(format!("unsupported dtype {:?}", m.dtype)));
        }
        if m.dim == 0 {
            return Err(Error::InvalidArchive("dim must be positive".into()));
        }
        if m.count == 0 {
            return Err(Error::InvalidArchive("archive has no rows".into()));
        }
        if self.vectors.dim() != (m.count, m.dim) {
            return Err(Error::Mismatch(format!(
                "manifest says {}x{}, matrix is {}x{}",
                m.count,
                m.dim,
                self.vectors.nrows(),
                self.vectors.ncols()
            )));
        }
        if m.classes.is_empty() {
            return Err(Error::InvalidArchive("class list is empty".into()));
        }
        for template in &m.templates {
            if template.matches("{}").count() != 1 {
                return Err(Error::InvalidArchive(format!(
                    "template {template:?} must contain exactly one \"{{}}\""
                )));
            }
        }
        if self.class_ids.len() != m.count {
            return Err(Error::Mismatch(format!(
                "{} class ids for {} rows",
                self.class_ids.len(),
                m.count
            )));
        }
        if let Some(row) = self.class_ids.iter().position(|&c| c as usize >= m.classes.len()) {
            return Err(Error::InvalidArchive(format!(
                "row {row}: class id {} out of range ({} classes)",
                self.class_ids[row],
                m.classes.len()
            )));
        }
        match (m.kind, &self.template_ids) {
            (ArchiveKind::Image, None) => {}
            (ArchiveKind::Image, Some(_)) => {
                return Err(Error::InvalidArchive("image archive carries template ids".into()))
            }
            (ArchiveKind::Text, None) => return Err(Error::InvalidArchive("text archive without template ids".into())),
            (ArchiveKind::Text, Some(tids)) => {
                if m.templates.is_empty() {
                    return Err(Error::InvalidArchive("text archive has no templates".into()));
                }
                if m.count != m.classes.len() * m.templates.len() {
                    return Err(Error::InvalidArchive(format!(
                        "text archive count {} != {} classes x {} templates",
                        m.count,
                        m.classes.len(),
                        m.templates.len()
                    )));
                }
                if tids.len() != m.count {
                    return Err(Error::Mismatch(format!(
                        "{} template ids for {} rows",
                        tids.len(),
                        m.count
                    )));
                }
                if let Some(row) = tids.iter().position(|&t| t as usize >= m.templates.len()) {
                    return Err(Error::InvalidArchive(format!(
                        "row {row}: template id {} out of range ({} templates)",
                        tids[row],
                        m.templates.len()
                    )));
                }
            }
        }
        for (i, row) in self.vectors.rows().into_iter().enumerate() {
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("row {i}, component {j}")));
            }
            if m.normalized {
                let norm = norm_f32(row);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(Error::InvalidArchive(format!(
                        "row {i} has norm {norm} but archive is flagged normalized"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn norm_f32(row: ArrayView1<'_, f32>) -> f64 {
    row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
}

/// `<prefix>.<ext>` without clobbering dots already in the prefix.
pub fn sidecar(prefix: &Path, ext: &str) -> PathBuf {
    let mut s: OsString = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

/// Encodes the binary payload.
pub fn encode_payload(archive: &EmbeddingArchive) -> Vec<u8> {
    let count = archive.len();
    let dim = archive.dim();
    let text = archive.template_ids.is_some();
    let mut buf = Vec::with_capacity(HEADER_LEN + count * dim * 4 + count * if text { 8 } else { 4 });
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(count as u64).to_le_bytes());
    for v in archive.vectors.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in &archive.class_ids {
        buf.extend_from_slice(&c.to_le_bytes());
    }
    if let Some(tids) = &archive.template_ids {
        for t in tids {
            buf.extend_from_slice(&t.to_le_bytes());
        }
    }
    buf
}

/// Writes `<path>.json` and `<path>.bin`. The archive is validated first;
/// nothing is written if validation fails.
pub fn write_archive(archive: &EmbeddingArchive, path: &Path) -> Result<()> {
    archive.validate()?;
    let json = serde_json::to_vec_pretty(&archive.manifest).map_err(|source| Error::Manifest {
        path: sidecar(path, "json"),
        source,
    })?;
    let payload = encode_payload(archive);
    write_file(&sidecar(path, "json"), &json)?;
    write_file(&sidecar(path, "bin"), &payload)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads and validates an archive written by [`write_archive`].
pub fn read_archive(path: &Path) -> Result<EmbeddingArchive> {
    let json_path = sidecar(path, "json");
    let bin_path = sidecar(path, "bin");
    let json = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let manifest: ArchiveManifest = serde_json::from_slice(&json).map_err(|source| Error::Manifest {
        path: json_path.clone(),
        source,
    })?;
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    decode_payload(manifest, &bytes, &bin_path)
}

/// Decodes a payload against its manifest and validates the result.
pub fn decode_payload(manifest: ArchiveManifest, bytes: &[u8], path: &Path) -> Result<EmbeddingArchive> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Mismatch(format!(
            "{}: payload is {} bytes, shorter than the header",
            path.display(),
            bytes.len()
        )));
    }
    let mut found = [0u8; 8];
    found.copy_from_slice(&bytes[..8]);
    if found != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: MAGIC,
            found,
        });
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if dim != manifest.dim || count != manifest.count {
        return Err(Error::Mismatch(format!(
            "manifest says count={} dim={}, binary says count={count} dim={dim}",
            manifest.count, manifest.dim
        )));
    }
    let text = manifest.kind == ArchiveKind::Text;
    let label_words = if text { 2 } else { 1 };
    let expected = count
        .checked_mul(dim)
        .and_then(|n| n.checked_add(label_words * count))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Mismatch("declared sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Mismatch(format!(
            "{}: expected {expected} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }

    let mut words = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| <[u8; 4]>::try_from(c).expect("4-byte chunk"));
    let floats: Vec<f32> = words.by_ref().take(count * dim).map(f32::from_le_bytes).collect();
    let class_ids: Vec<u32> = words.by_ref().take(count).map(u32::from_le_bytes).collect();
    let template_ids = text.then(|| words.by_ref().take(count).map(u32::from_le_bytes).collect());

    let vectors = Array2::from_shape_vec((count, dim), floats).map_err(|e| Error::Shape(e.to_string()))?;
    let archive = EmbeddingArchive {
        manifest,
        vectors,
        class_ids,
        template_ids,
    };
    archive.validate()?;
    Ok(archive)
}

/// Scales every row to unit Euclidean norm and flags the manifest.
pub fn l2_normalize_rows(archive: &EmbeddingArchive) -> Result<EmbeddingArchive> {
    let mut vectors = archive.vectors.clone();
    for (i, mut row) in vectors.rows_mut().into_iter().enumerate() {
        let norm = norm_f32(row.view());
        if norm == 0.0 {
            return Err(Error::ZeroNorm { row: i });
        }
        row.mapv_inplace(|v| (f64::from(v) / norm) as f32);
    }
    let mut out = EmbeddingArchive {
        manifest: archive.manifest.clone(),
        vectors,
        class_ids: archive.class_ids.clone(),
        template_ids: archive.template_ids.clone(),
    };
    out.manifest.normalized = true;
    out.validate()?;
    Ok(out)
}
