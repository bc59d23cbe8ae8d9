//! Class cross-entropy, spurious-distribution KL, and their weighted sum.
//!
//! Inputs are unit-norm feature rows and unit-norm prototypes, so cosine
//! similarity is a plain dot product. Gradients are returned with respect to
//! the trainable features only; the frozen features never receive one.

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prototypes::PrototypeSet;

/// A scalar loss and its gradient with respect to the trainable features.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class_loss: f64,
    pub spurious_loss: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

fn check_cols(a: &Array2<f64>, b: &Array2<f64>, what: &str) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(Error::Shape(format!(
            "{what}: feature dim {} vs prototype dim {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(())
}

fn log_softmax_row(row: ArrayView1<'_, f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.mapv(|v| v - lse)
}

fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let ls = log_softmax_row(row.view());
        row.assign(&ls);
    }
    out
}

/// `logits[i][y] = <features_i, protos_y> / temperature`.
pub fn class_logits(features: &Array2<f64>, class_protos: &Array2<f64>, temperature: f64) -> Result<Array2<f64>> {
    check_cols(features, class_protos, "class logits")?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    Ok(features.dot(&class_protos.t()) / temperature)
}

/// Mean negative log-softmax of the true class.
pub fn class_loss(
    features: &Array2<f64>,
    labels: &[usize],
    class_protos: &Array2<f64>,
    temperature: f64,
) -> Result<LossWithGrad> {
    let b = features.nrows();
    if b == 0 {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} rows", labels.len())));
    }
    let c = class_protos.nrows();
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Shape(format!("label {bad} out of range for {c} classes")));
    }
    let logp = log_softmax(&class_logits(features, class_protos, temperature)?);
    let value = -labels.iter().enumerate().map(|(i, &y)| logp[[i, y]]).sum::<f64>() / b as f64;

    // d/dlogits = (softmax - onehot) / B, then chain through logits = F P^T / T
    let mut dlogits = logp.mapv(f64::exp);
    for (i, &y) in labels.iter().enumerate() {
        dlogits[[i, y]] -= 1.0;
    }
    dlogits /= b as f64 * temperature;
    Ok(LossWithGrad {
        value,
        grad: dlogits.dot(class_protos),
    })
}

/// Row-wise softmax over raw similarities to the spurious prototypes.
pub fn spurious_distribution(features: &Array2<f64>, spurious_protos: &Array2<f64>) -> Result<Array2<f64>> {
    if spurious_protos.nrows() < 2 {
        return Err(Error::Config("need at least two spurious prototypes".into()));
    }
    check_cols(features, spurious_protos, "spurious distribution")?;
    Ok(log_softmax(&features.dot(&spurious_protos.t())).mapv(f64::exp))
}

/// Mean `KL(P(x; f_t) ‖ P(x; f_0))` over the batch, with the gradient with
/// respect to `feat_t`.
pub fn spurious_kl_loss(
    feat_t: &Array2<f64>,
    feat_0: &Array2<f64>,
    spurious_protos: &Array2<f64>,
) -> Result<LossWithGrad> {
    if feat_t.dim() != feat_0.dim() {
        return Err(Error::Shape(format!(
            "trainable features {:?} vs frozen features {:?}",
            feat_t.dim(),
            feat_0.dim()
        )));
    }
    if spurious_protos.nrows() < 2 {
        return Err(Error::Config("need at least two spurious prototypes".into()));
    }
    check_cols(feat_t, spurious_protos, "spurious KL")?;
    let b = feat_t.nrows();
    if b == 0 {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let logp = log_softmax(&feat_t.dot(&spurious_protos.t()));
    let logq = log_softmax(&feat_0.dot(&spurious_protos.t()));

    let mut total = 0.0;
    let mut dlogits = Array2::zeros(logp.raw_dim());
    Zip::from(dlogits.rows_mut())
        .and(logp.rows())
        .and(logq.rows())
        .for_each(|mut d, lp, lq| {
            let p = lp.mapv(f64::exp);
            let kl: f64 = Zip::from(&p)
                .and(&lp)
                .and(&lq)
                .fold(0.0, |acc, &pk, &a, &b| if pk > 0.0 { acc + pk * (a - b) } else { acc });
            total += kl;
            // dKL/du_k = p_k (ln p_k - ln q_k - KL)
            Zip::from(&mut d)
                .and(&p)
                .and(&lp)
                .and(&lq)
                .for_each(|dk, &pk, &a, &b| *dk = pk * (a - b - kl));
        });
    dlogits /= b as f64;
    Ok(LossWithGrad {
        value: (total / b as f64).max(0.0),
        grad: dlogits.dot(spurious_protos),
    })
}

/// `total = alpha·class_loss + beta·spurious_loss`.
pub fn total_loss(
    class_loss: f64,
    spurious_loss: f64,
    alpha: f64,
    beta: f64,
    temperature: f64,
) -> Result<LossBreakdown> {
    if alpha < 0.0 || beta < 0.0 || !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::Config(format!(
            "loss weights must be finite and >= 0 (alpha {alpha}, beta {beta})"
        )));
    }
    Ok(LossBreakdown {
        class_loss,
        spurious_loss,
        total: alpha * class_loss + beta * spurious_loss,
        alpha,
        beta,
        temperature,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 20.0,
            temperature: 0.01,
        }
    }
}

/// The full objective on one batch and its gradient w.r.t. `feat_t`.
pub fn objective(
    feat_t: &Array2<f64>,
    feat_0: &Array2<f64>,
    labels: &[usize],
    prototypes: &PrototypeSet,
    weights: LossWeights,
) -> Result<(LossBreakdown, Array2<f64>)> {
    let class = class_loss(feat_t, labels, &prototypes.class_protos, weights.temperature)?;
    let spurious = spurious_kl_loss(feat_t, feat_0, &prototypes.spurious_protos)?;
    let breakdown = total_loss(
        class.value,
        spurious.value,
        weights.alpha,
        weights.beta,
        weights.temperature,
    )?;
    let mut grad = weights.alpha * class.grad;
    if weights.beta != 0.0 {
        grad.scaled_add(weights.beta, &spurious.grad);
    }
    Ok((breakdown, grad))
}

/// Argmax per row; ties go to the lower index.
pub(crate) fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                )
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn self_similarity_logit() {
        let p = array![[0.6, 0.8], [1.0, 0.0]];
        let l = class_logits(&array![[0.6, 0.8]], &p, 1.0).unwrap();
        assert!((l[[0, 0]] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn temperature_scales_logits() {
        let p = array![[0.6, 0.8], [1.0, 0.0]];
        let f = array![[0.0, 1.0], [0.8, -0.6]];
        let a = class_logits(&f, &p, 1.0).unwrap();
        let b = class_logits(&f, &p, 0.01).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((100.0 * x - y).abs() < 1e-12);
        }
        assert!(class_logits(&f, &p, 0.0).is_err());
    }

    #[test]
    fn two_class_cross_entropy_value() {
        let protos = array![[1.0, 0.0], [0.0, 1.0]];
        let l = class_loss(&array![[1.0, 0.0]], &[0], &protos, 1.0).unwrap();
        // log(1 + e^-1)
        assert!((l.value - 0.313_261_687_518_222_9).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let protos = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let f = array![[0.0, 0.0, 0.0]];
        for y in 0..3 {
            let l = class_loss(&f, &[y], &protos, 0.01).unwrap();
            assert!((l.value - 3f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let protos = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(class_loss(&Array2::zeros((0, 2)), &[], &protos, 1.0).is_err());
    }

    #[test]
    fn spurious_softmax_values() {
        let s = array![[1.0, 0.0], [0.0, 1.0]];
        let p = spurious_distribution(&array![[1.0, 0.0]], &s).unwrap();
        let e = std::f64::consts::E;
        assert!((p[[0, 0]] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[[0, 1]] - 1.0 / (e + 1.0)).abs() < 1e-15);
        let eq = spurious_distribution(&array![[0.5, 0.5]], &s).unwrap();
        assert!((eq[[0, 0]] - 0.5).abs() < 1e-15 && (eq[[0, 1]] - 0.5).abs() < 1e-15);
        assert!(spurious_distribution(&array![[1.0, 0.0]], &array![[1.0, 0.0]]).is_err());
    }

    #[test]
    fn kl_of_identical_inputs_is_zero() {
        let s = array![[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]];
        let f = array![[0.3, 0.9], [-0.5, 0.1]];
        let l = spurious_kl_loss(&f, &f, &s).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn kl_two_prototype_value() {
        // P_t = softmax(1, 0), P_0 = uniform
        let s = array![[1.0, 0.0], [0.0, 1.0]];
        let l = spurious_kl_loss(&array![[1.0, 0.0]], &array![[0.5, 0.5]], &s).unwrap();
        assert!((l.value - 0.110_944_071_671_727_35).abs() < 1e-12);
    }

    #[test]
    fn weighted_total() {
        let b = total_loss(0.313262, 0.110944, 1.0, 20.0, 1.0).unwrap();
        assert!((b.total - 2.532142).abs() < 1e-12);
        assert_eq!(total_loss(0.5, 7.0, 1.0, 0.0, 1.0).unwrap().total, 0.5);
        assert!(total_loss(0.5, 0.1, -1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax_rows(&array![[1.0, 3.0, 3.0], [2.0, 2.0, 1.0]]), vec![1, 0]);
    }
}
