//! Synthetic class/context embeddings.
//!
//! Class identity and context live in disjoint coordinate blocks: the first
//! half of the dimensions carries class directions, the second half carries
//! context directions. Training images sit mostly in a per-class "home"
//! context (a class/context shortcut), and the held-out context used for the
//! out-of-distribution archive partially overlaps one of the training
//! contexts. Text features follow the same layout, one template family per
//! context, and their class directions are slightly misaligned with the
//! image class directions so there is something to learn.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::AdapterParams;
use crate::embed_store::{l2_normalize_rows, EmbeddingArchive};
use crate::error::{Error, Result};
use crate::eval::{accuracy, encode, mean_spurious_kl, zero_shot_classify};
use crate::seed::rng_for;
use crate::spc::SpcConfig;
use crate::trainer::{fit, initial_params, prepare, Mode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dim: usize,
    pub classes: usize,
    /// Total contexts; the last one is held out for the OOD archive.
    pub contexts: usize,
    pub templates: usize,
    pub train_per_class: usize,
    pub ood_per_class: usize,
    /// Fraction of a class's training images placed in its home context.
    pub home_fraction: f64,
    /// Cosine between the held-out context and training context 0.
    pub ood_overlap: f64,
    pub class_strength: f64,
    pub context_strength: f64,
    pub noise: f64,
    /// Perturbation of text class directions relative to image class directions.
    pub text_misalignment: f64,
    pub template_jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 32,
            classes: 8,
            contexts: 4,
            templates: 16,
            train_per_class: 40,
            ood_per_class: 30,
            home_fraction: 0.95,
            ood_overlap: 0.7,
            class_strength: 1.0,
            context_strength: 3.0,
            noise: 1.0,
            text_misalignment: 0.6,
            template_jitter: 0.3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    /// Training-context images (contexts `0..contexts-1`).
    pub train: EmbeddingArchive,
    /// Held-out-context images.
    pub ood: EmbeddingArchive,
    pub text: EmbeddingArchive,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || rng.sample(StandardNormal))
}

fn unit(v: Array1<f64>) -> Array1<f64> {
    let n = v.dot(&v).sqrt();
    v / n
}

/// Unit vector supported on `dims[block]`.
fn block_unit(rng: &mut ChaCha8Rng, dim: usize, block: std::ops::Range<usize>) -> Array1<f64> {
    let mut v = Array1::zeros(dim);
    let g = gaussian(rng, block.len());
    v.slice_mut(ndarray::s![block]).assign(&g);
    unit(v)
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 || !self.dim.is_multiple_of(2) {
            return Err(Error::Config("synthetic dim must be even and >= 4".into()));
        }
        if self.classes < 2 || self.contexts < 2 || self.templates < 2 {
            return Err(Error::Config("need >= 2 classes, contexts and templates".into()));
        }
        if self.train_per_class == 0 || self.ood_per_class == 0 {
            return Err(Error::Config("per-class counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.home_fraction) || !(-1.0..=1.0).contains(&self.ood_overlap) {
            return Err(Error::Config("home_fraction in [0,1], ood_overlap in [-1,1]".into()));
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<SynthDataset> {
        self.validate()?;
        let d = self.dim;
        let half = d / 2;
        let class_block = 0..half;
        let ctx_block = half..d;
        let mut rng = rng_for(self.seed, "synth-directions", 0);

        let class_dirs: Vec<Array1<f64>> = (0..self.classes)
            .map(|_| block_unit(&mut rng, d, class_block.clone()))
            .collect();
        let mut ctx_dirs: Vec<Array1<f64>> = (0..self.contexts)
            .map(|_| block_unit(&mut rng, d, ctx_block.clone()))
            .collect();
        let held_out = self.contexts - 1;
        let own = &ctx_dirs[held_out] - &(&ctx_dirs[0] * ctx_dirs[held_out].dot(&ctx_dirs[0]));
        let own = unit(own);
        let rho = self.ood_overlap;
        ctx_dirs[held_out] = unit(&ctx_dirs[0] * rho + &own * (1.0 - rho * rho).sqrt());

        let text_class_dirs: Vec<Array1<f64>> = class_dirs
            .iter()
            .map(|u| unit(u + &(block_unit(&mut rng, d, class_block.clone()) * self.text_misalignment)))
            .collect();
        let template_dirs: Vec<Array1<f64>> = (0..self.templates)
            .map(|j| {
                let jitter = block_unit(&mut rng, d, ctx_block.clone()) * self.template_jitter;
                unit(&ctx_dirs[j % self.contexts] + &jitter)
            })
            .collect();

        let image = |rng: &mut ChaCha8Rng, c: usize, k: usize| -> Array1<f64> {
            &class_dirs[c] * self.class_strength
                + &ctx_dirs[k] * self.context_strength
                + gaussian(rng, d) * (self.noise / (d as f64).sqrt())
        };

        let train_contexts = self.contexts - 1;
        let mut rng = rng_for(self.seed, "synth-train", 0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..self.classes {
            let home = c % train_contexts;
            for _ in 0..self.train_per_class {
                let k = if train_contexts == 1 || rng.random_bool(self.home_fraction) {
                    home
                } else {
                    let other = rng.random_range(0..train_contexts - 1);
                    if other >= home {
                        other + 1
                    } else {
                        other
                    }
                };
                rows.push(image(&mut rng, c, k));
                labels.push(c as u32);
            }
        }
        let class_names: Vec<String> = (0..self.classes).map(|c| format!("class{c}")).collect();
        let train = EmbeddingArchive::image(class_names.clone(), stack(&rows, d), labels)?;

        let mut rng = rng_for(self.seed, "synth-ood", 0);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..self.classes {
            for _ in 0..self.ood_per_class {
                rows.push(image(&mut rng, c, held_out));
                labels.push(c as u32);
            }
        }
        let ood = EmbeddingArchive::image(class_names.clone(), stack(&rows, d), labels)?;

        let mut rng = rng_for(self.seed, "synth-text", 0);
        let mut rows = Vec::new();
        let mut cids = Vec::new();
        let mut tids = Vec::new();
        for (j, w) in template_dirs.iter().enumerate() {
            for (c, u) in text_class_dirs.iter().enumerate() {
                rows.push(
                    u * self.class_strength
                        + w * self.context_strength
                        + gaussian(&mut rng, d) * (self.noise / (d as f64).sqrt()),
                );
                cids.push(c as u32);
                tids.push(j as u32);
            }
        }
        let templates = (0..self.templates)
            .map(|j| format!("context {} variant {}: {{}}", j % self.contexts, j / self.contexts))
            .collect();
        let text = EmbeddingArchive::text(class_names, templates, stack(&rows, d), cids, tids)?;

        Ok(SynthDataset {
            train: l2_normalize_rows(&train)?,
            ood: l2_normalize_rows(&ood)?,
            text: l2_normalize_rows(&text)?,
        })
    }
}

fn stack(rows: &[Array1<f64>], d: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j] as f32)
}

/// Training settings used for the paired comparison on synthetic data.
pub fn experiment_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 60,
        lr: 0.05,
        momentum: 0.9,
        batch_size: Some(32),
        shots_per_class: 16,
        spc: SpcConfig::new(12, 8, 0),
        ..TrainConfig::default()
    }
}

/// Held-out metrics for one trained head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeOutcome {
    /// Mean spurious KL to the frozen head on held-out training-context images.
    pub heldout_kl: f64,
    /// Zero-shot accuracy on the held-out context.
    pub ood_accuracy: f64,
    /// Zero-shot accuracy on held-out training-context images.
    pub id_accuracy: f64,
    pub final_class_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairedOutcome {
    pub seed: u64,
    pub fd_align: ModeOutcome,
    pub plain_ft: ModeOutcome,
    pub zero_shot_ood_accuracy: f64,
}

/// Trains the same proxy set with both modes and measures them on held-out data.
pub fn run_paired(data: &SynthDataset, config: &TrainConfig) -> Result<PairedOutcome> {
    let fd_cfg = TrainConfig {
        mode: Mode::FdAlign,
        ..config.clone()
    };
    let plain_cfg = TrainConfig {
        mode: Mode::PlainFt,
        ..config.clone()
    };
    let prepared = prepare(&data.train, &data.text, &fd_cfg)?;
    let frozen = initial_params(&fd_cfg, data.train.dim())?;

    let in_proxy: std::collections::HashSet<usize> = prepared.proxy_indices.iter().copied().collect();
    let heldout: Vec<usize> = (0..data.train.len()).filter(|i| !in_proxy.contains(i)).collect();
    let heldout_x = data.train.select_f64(&heldout);
    let heldout_y: Vec<usize> = heldout.iter().map(|&i| data.train.class_ids()[i] as usize).collect();
    let ood_x = data.ood.to_f64();
    let ood_y: Vec<usize> = data.ood.class_ids().iter().map(|&c| c as usize).collect();
    let protos = &prepared.prototypes;

    let measure = |params: &AdapterParams, final_class_loss: f64| -> Result<ModeOutcome> {
        let ood_pred = zero_shot_classify(&encode(params, &ood_x)?, &protos.class_protos, config.temperature)?;
        let id_pred = zero_shot_classify(&encode(params, &heldout_x)?, &protos.class_protos, config.temperature)?;
        Ok(ModeOutcome {
            heldout_kl: mean_spurious_kl(params, &frozen, &heldout_x, &protos.spurious_protos)?,
            ood_accuracy: accuracy(&ood_pred, &ood_y),
            id_accuracy: accuracy(&id_pred, &heldout_y),
            final_class_loss,
        })
    };

    let fd = fit(&frozen, &prepared, &fd_cfg, |_| {})?;
    let plain = fit(&frozen, &prepared, &plain_cfg, |_| {})?;
    let last = |h: &[crate::trainer::StepRecord]| h.last().map_or(f64::NAN, |r| r.losses.class_loss);
    let zs = zero_shot_classify(&encode(&frozen, &ood_x)?, &protos.class_protos, config.temperature)?;
    Ok(PairedOutcome {
        seed: config.seed,
        fd_align: measure(&fd.params, last(&fd.loss_history))?,
        plain_ft: measure(&plain.params, last(&plain.loss_history))?,
        zero_shot_ood_accuracy: accuracy(&zs, &ood_y),
    })
}
