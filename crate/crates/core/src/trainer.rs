//! Fine-tuning loop, checkpoints and weight-space interpolation.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::adapter::{self, AdapterParams, Architecture, OptState};
use crate::embed_store::{sidecar, write_file, ArchiveKind, EmbeddingArchive};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::prototypes::{PrototypeSet, SpuriousId};
use crate::seed::{derive_seed, rng_for};
use crate::spc::{run_spc, SpcConfig, SpcReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    FdAlign,
    /// Cross-entropy only (the spurious weight is forced to zero).
    PlainFt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// `None` trains full-batch on the proxy set.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Correction settings. `spc.seed` is ignored; the stream is derived from `seed`.
    pub spc: SpcConfig,
    pub use_spc: bool,
    pub mode: Mode,
    pub shots_per_class: usize,
    pub architecture: Architecture,
    pub residual_scale: f64,
    pub renormalize_prototypes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 20.0,
            temperature: 0.01,
            lr: 1e-3,
            momentum: 0.9,
            epochs: 60,
            batch_size: None,
            seed: 0,
            spc: SpcConfig::default(),
            use_spc: true,
            mode: Mode::FdAlign,
            shots_per_class: 16,
            architecture: Architecture::Linear,
            residual_scale: 0.0,
            renormalize_prototypes: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.shots_per_class == 0 {
            return Err(Error::Config("shots_per_class must be >= 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("alpha and beta must be finite and >= 0".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.residual_scale) {
            return Err(Error::Config(format!(
                "residual_scale {} outside [0, 1]",
                self.residual_scale
            )));
        }
        Ok(())
    }

    /// Loss weights in effect; plain fine-tuning zeroes the spurious term.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: match self.mode {
                Mode::FdAlign => self.beta,
                Mode::PlainFt => 0.0,
            },
            temperature: self.temperature,
        }
    }

    /// The correction config actually run, with its seed derived from `seed`.
    pub fn spc_config(&self) -> SpcConfig {
        SpcConfig {
            seed: derive_seed(self.seed, "spc", 0),
            renormalize: self.renormalize_prototypes,
            ..self.spc.clone()
        }
    }
}

/// Builds class prototypes and spurious prototypes, running the correction
/// when `spc` is given. Returns the raw spurious prototypes alongside.
pub fn prototype_pipeline(
    text: &EmbeddingArchive,
    renormalize: bool,
    spc: Option<&SpcConfig>,
) -> Result<(PrototypeSet, Array2<f64>, Option<SpcReport>)> {
    let raw = PrototypeSet::from_text(text, renormalize)?;
    let raw_spurious = raw.spurious_protos.clone();
    match spc {
        None => Ok((raw, raw_spurious, None)),
        Some(cfg) => {
            let (corrected, report) = run_spc(&raw_spurious, cfg)?;
            let ids = (0..corrected.nrows()).map(SpuriousId::Cluster).collect();
            let set = raw.with_spurious(corrected, ids)?;
            Ok((set, raw_spurious, Some(report)))
        }
    }
}

/// Draws `shots_per_class` rows per class without replacement. The result
/// is sorted ascending.
pub fn sample_proxy_dataset(images: &EmbeddingArchive, shots_per_class: usize, seed: u64) -> Result<Vec<usize>> {
    if shots_per_class == 0 {
        return Err(Error::Config("shots_per_class must be >= 1".into()));
    }
    let mut picked = Vec::with_capacity(shots_per_class * images.classes().len());
    for (c, rows) in images.rows_by_class().iter().enumerate() {
        if rows.len() < shots_per_class {
            return Err(Error::InsufficientData(format!(
                "class {c} ({}) has {} samples, need {shots_per_class}",
                images.classes()[c],
                rows.len()
            )));
        }
        let mut rng = rng_for(seed, "proxy", c as u64);
        picked.extend(
            index::sample(&mut rng, rows.len(), shots_per_class)
                .into_iter()
                .map(|i| rows[i]),
        );
    }
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: AdapterParams,
    pub config: Option<TrainConfig>,
    pub loss_history: Vec<StepRecord>,
    pub epoch: usize,
    pub step_count: u64,
}

impl Checkpoint {
    /// A checkpoint wrapping untrained parameters.
    pub fn from_params(params: AdapterParams) -> Self {
        Checkpoint {
            params,
            config: None,
            loss_history: Vec::new(),
            epoch: 0,
            step_count: 0,
        }
    }
}

/// Inputs prepared for [`fit`]: proxy features, labels and prototypes.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub proxy_indices: Vec<usize>,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub prototypes: PrototypeSet,
    pub spc_report: Option<SpcReport>,
}

pub fn prepare(images: &EmbeddingArchive, text: &EmbeddingArchive, config: &TrainConfig) -> Result<PreparedData> {
    config.validate()?;
    if images.kind() != ArchiveKind::Image {
        return Err(Error::Config("training images must be an image archive".into()));
    }
    if images.dim() != text.dim() {
        return Err(Error::Shape(format!(
            "image dim {} vs text dim {}",
            images.dim(),
            text.dim()
        )));
    }
    if images.classes() != text.classes() {
        return Err(Error::Config(
            "image and text archives declare different class lists".into(),
        ));
    }
    let spc = config.use_spc.then(|| config.spc_config());
    let (prototypes, _, spc_report) = prototype_pipeline(text, config.renormalize_prototypes, spc.as_ref())?;
    let proxy_indices = sample_proxy_dataset(images, config.shots_per_class, derive_seed(config.seed, "proxy", 0))?;
    let features = images.select_f64(&proxy_indices);
    let labels = proxy_indices.iter().map(|&i| images.class_ids()[i] as usize).collect();
    Ok(PreparedData {
        proxy_indices,
        features,
        labels,
        prototypes,
        spc_report,
    })
}

/// Trains from the frozen head `frozen` (also the starting point). `on_step`
/// sees every step record as it is produced.
pub fn fit(
    frozen: &AdapterParams,
    data: &PreparedData,
    config: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Checkpoint> {
    config.validate()?;
    let n = data.features.nrows();
    if n == 0 {
        return Err(Error::InsufficientData("empty proxy dataset".into()));
    }
    let weights = config.loss_weights();
    let batch = config.batch_size.unwrap_or(n).min(n);
    let mut params = frozen.clone();
    let mut opt = OptState::new(&params, config.lr, config.momentum)?;
    let mut history = Vec::with_capacity(config.epochs * n.div_ceil(batch));

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(config.seed, "epoch-shuffle", epoch as u64));
        for rows in order.chunks(batch) {
            let step = history.len();
            let x = data.features.select(ndarray::Axis(0), rows);
            let labels: Vec<usize> = rows.iter().map(|&r| data.labels[r]).collect();
            let (feat_t, tape) = adapter::forward(&params, &x).map_err(|e| diverged(step, e))?;
            let (feat_0, _) = adapter::forward(frozen, &x)?;
            let (losses, grad) = losses::objective(&feat_t, &feat_0, &labels, &data.prototypes, weights)?;
            if !losses.total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss {}", losses.total),
                });
            }
            let grads = adapter::backward(&params, &tape, &grad)?;
            adapter::sgd_step(&mut params, &grads, &mut opt).map_err(|e| diverged(step, e))?;
            let record = StepRecord { step, epoch, losses };
            on_step(&record);
            history.push(record);
        }
    }
    Ok(Checkpoint {
        params,
        config: Some(config.clone()),
        loss_history: history,
        epoch: config.epochs,
        step_count: opt.step_count,
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Divergence { step, detail },
        other => other,
    }
}

/// The frozen head for `config` at feature dimension `dim`.
pub fn initial_params(config: &TrainConfig, dim: usize) -> Result<AdapterParams> {
    AdapterParams::init(
        config.architecture,
        dim,
        config.residual_scale,
        derive_seed(config.seed, "adapter-init", 0),
    )
}

/// Samples the proxy set, builds prototypes and trains.
pub fn train(images: &EmbeddingArchive, text: &EmbeddingArchive, config: &TrainConfig) -> Result<Checkpoint> {
    let data = prepare(images, text, config)?;
    let frozen = initial_params(config, images.dim())?;
    fit(&frozen, &data, config, |_| {})
}

/// `(1 − fusion)·p0 + fusion·pt` for every parameter. The endpoints return
/// exact copies of the inputs.
pub fn wise_ft_interpolate(params_0: &AdapterParams, params_t: &AdapterParams, fusion: f64) -> Result<AdapterParams> {
    if !(0.0..=1.0).contains(&fusion) {
        return Err(Error::Config(format!("fusion {fusion} outside [0, 1]")));
    }
    params_0.check_congruent(params_t)?;
    if fusion == 0.0 {
        return Ok(params_0.clone());
    }
    if fusion == 1.0 {
        return Ok(params_t.clone());
    }
    let mixed: Vec<f64> = params_0
        .values()
        .zip(params_t.values())
        .map(|(&a, &b)| (1.0 - fusion) * a + fusion * b)
        .collect();
    params_0.with_flat(&mixed)
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    architecture: Architecture,
    dim: usize,
    residual_scale: f64,
    step_count: u64,
    epoch: usize,
    dtype: String,
    param_count: usize,
    config: Option<TrainConfig>,
    loss_history: Vec<StepRecord>,
}

const CHECKPOINT_FORMAT: &str = "fdalign-checkpoint-v1";

/// Writes `<prefix>.json` (header) and `<prefix>.bin` (parameter blob).
pub fn write_checkpoint(ckpt: &Checkpoint, prefix: &Path) -> Result<()> {
    ckpt.params.validate()?;
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        architecture: ckpt.params.architecture,
        dim: ckpt.params.dim,
        residual_scale: ckpt.params.residual_scale,
        step_count: ckpt.step_count,
        epoch: ckpt.epoch,
        dtype: "f64".into(),
        param_count: ckpt.params.num_params(),
        config: ckpt.config.clone(),
        loss_history: ckpt.loss_history.clone(),
    };
    let json_path = sidecar(prefix, "json");
    let json = serde_json::to_vec_pretty(&header).map_err(|source| Error::Manifest {
        path: json_path.clone(),
        source,
    })?;
    write_file(&json_path, &json)?;
    write_file(&sidecar(prefix, "bin"), &adapter::encode_params(&ckpt.params))
}

pub fn read_checkpoint(prefix: &Path) -> Result<Checkpoint> {
    let json_path = sidecar(prefix, "json");
    let bin_path = sidecar(prefix, "bin");
    let json = fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|source| Error::Manifest {
        path: json_path.clone(),
        source,
    })?;
    if header.format != CHECKPOINT_FORMAT || header.dtype != "f64" {
        return Err(Error::Mismatch(format!(
            "unsupported checkpoint format {:?} / dtype {:?}",
            header.format, header.dtype
        )));
    }
    let template = AdapterParams::init(header.architecture, header.dim, header.residual_scale, 0)?;
    if template.num_params() != header.param_count {
        return Err(Error::Mismatch(format!(
            "header declares {} params, architecture has {}",
            header.param_count,
            template.num_params()
        )));
    }
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let params = adapter::decode_params(&template, &bytes)?;
    Ok(Checkpoint {
        params,
        config: header.config,
        loss_history: header.loss_history,
        epoch: header.epoch,
        step_count: header.step_count,
    })
}

/// One JSON object per line: step, epoch and the loss breakdown.
pub fn write_loss_log(records: &[StepRecord], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|source| Error::Manifest {
            path: path.to_path_buf(),
            source,
        })?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    write_file(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: Some(0),
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn defaults_mirror_method_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.alpha, c.beta, c.epochs), (1.0, 20.0, 60));
        assert_eq!((c.spc.n_keep, c.spc.k_clusters), (60, 20));
    }

    #[test]
    fn plain_ft_zeroes_beta() {
        let c = TrainConfig {
            mode: Mode::PlainFt,
            ..TrainConfig::default()
        };
        assert_eq!(c.loss_weights().beta, 0.0);
    }

    #[test]
    fn wise_ft_scalar_midpoint() {
        let mut a = AdapterParams::init(Architecture::Linear, 1, 0.0, 0).unwrap();
        let mut b = a.clone();
        a.layers[0].weight[[0, 0]] = 2.0;
        b.layers[0].weight[[0, 0]] = 4.0;
        let m = wise_ft_interpolate(&a, &b, 0.5).unwrap();
        assert_eq!(m.layers[0].weight[[0, 0]], 3.0);
        assert_eq!(wise_ft_interpolate(&a, &b, 0.0).unwrap(), a);
        assert_eq!(wise_ft_interpolate(&a, &b, 1.0).unwrap(), b);
        assert!(wise_ft_interpolate(&a, &b, 1.5).is_err());
    }

    #[test]
    fn wise_ft_rejects_mismatched_architectures() {
        let a = AdapterParams::init(Architecture::Linear, 2, 0.0, 0).unwrap();
        let b = AdapterParams::init(Architecture::Mlp { hidden: 2 }, 2, 0.5, 0).unwrap();
        assert!(matches!(
            wise_ft_interpolate(&a, &b, 0.5),
            Err(Error::ArchitectureMismatch(_))
        ));
        let c = AdapterParams::init(Architecture::Linear, 2, 0.5, 0).unwrap();
        assert!(wise_ft_interpolate(&a, &c, 0.5).is_err());
    }
}
