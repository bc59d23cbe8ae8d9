//! Trainable embedding head over frozen backbone features.
//!
//! `f(x) = normalize(r·x + (1 − r)·net(x))` where `net` is the identity, a
//! `D → D` linear map, or a `D → H → D` tanh perceptron, and `r` is the
//! residual scale. Initialization makes `net(x) = x` (linear) or `net(x) = 0`
//! (perceptron), so a fresh head reproduces the frozen features exactly.

use std::hash::{DefaultHasher, Hash, Hasher};

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Architecture {
    Identity,
    Linear,
    Mlp { hidden: usize },
}

impl Architecture {
    fn shapes(self, dim: usize) -> Vec<(usize, usize)> {
        match self {
            Architecture::Identity => Vec::new(),
            Architecture::Linear => vec![(dim, dim)],
            Architecture::Mlp { hidden } => vec![(hidden, dim), (dim, hidden)],
        }
    }
}

/// Fully connected layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(out: usize, inp: usize) -> Self {
        Dense {
            weight: Array2::zeros((out, inp)),
            bias: Array1::zeros(out),
        }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter())
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.iter_mut().chain(self.bias.iter_mut())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub architecture: Architecture,
    pub dim: usize,
    pub residual_scale: f64,
    pub layers: Vec<Dense>,
}

impl AdapterParams {
    /// Identity-preserving initialization. Only the perceptron's hidden layer
    /// draws random weights (uniform in ±1/√fan-in, from `seed`).
    pub fn init(architecture: Architecture, dim: usize, residual_scale: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("adapter dim must be positive".into()));
        }
        let layers = match architecture {
            Architecture::Identity => Vec::new(),
            Architecture::Linear => vec![Dense {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
            }],
            Architecture::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::Config("hidden width must be positive".into()));
                }
                if residual_scale <= 0.0 {
                    return Err(Error::Config(
                        "mlp head starts at net(x) = 0 and needs residual_scale > 0".into(),
                    ));
                }
                let mut rng = rng_for(seed, "adapter-init", 0);
                let bound = 1.0 / (dim as f64).sqrt();
                let first = Dense {
                    weight: Array2::from_shape_simple_fn((hidden, dim), || rng.random_range(-bound..bound)),
                    bias: Array1::from_shape_simple_fn(hidden, || rng.random_range(-bound..bound)),
                };
                vec![first, Dense::zeros(dim, hidden)]
            }
        };
        let params = AdapterParams {
            architecture,
            dim,
            residual_scale,
            layers,
        };
        params.validate()?;
        Ok(params)
    }

    /// The pass-through head (frozen features, renormalized).
    pub fn identity(dim: usize) -> Result<Self> {
        Self::init(Architecture::Identity, dim, 1.0, 0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.residual_scale) {
            return Err(Error::Config(format!(
                "residual_scale {} outside [0, 1]",
                self.residual_scale
            )));
        }
        let shapes = self.architecture.shapes(self.dim);
        if shapes.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{:?} expects {} layers, found {}",
                self.architecture,
                shapes.len(),
                self.layers.len()
            )));
        }
        for (i, ((out, inp), layer)) in shapes.into_iter().zip(&self.layers).enumerate() {
            if layer.weight.dim() != (out, inp) || layer.bias.len() != out {
                return Err(Error::Shape(format!(
                    "layer {i}: expected {out}x{inp} weight and {out} bias, found {:?} and {}",
                    layer.weight.dim(),
                    layer.bias.len()
                )));
            }
        }
        if self.values().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("adapter parameter".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    /// All parameters, layer by layer, weight (row-major) then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(Dense::values)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values().copied().collect()
    }

    /// A copy of `self` with parameters taken from `flat` (same order as [`flatten`](Self::flatten)).
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        out.layers
            .iter_mut()
            .flat_map(Dense::values_mut)
            .zip(flat)
            .for_each(|(p, &v)| *p = v);
        out.validate()?;
        Ok(out)
    }

    /// Errors unless `other` has the same architecture, dim and residual scale.
    pub fn check_congruent(&self, other: &AdapterParams) -> Result<()> {
        if self.architecture != other.architecture || self.dim != other.dim {
            return Err(Error::ArchitectureMismatch(format!(
                "{:?}/dim {} vs {:?}/dim {}",
                self.architecture, self.dim, other.architecture, other.dim
            )));
        }
        if self.residual_scale.to_bits() != other.residual_scale.to_bits() {
            return Err(Error::ArchitectureMismatch(format!(
                "residual_scale {} vs {}",
                self.residual_scale, other.residual_scale
            )));
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.architecture.hash(&mut h);
        self.dim.hash(&mut h);
        self.residual_scale.to_bits().hash(&mut h);
        for v in self.values() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct Tape {
    fingerprint: u64,
    input: Array2<f64>,
    hidden: Option<Array2<f64>>,
    norms: Array1<f64>,
    output: Array2<f64>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

/// Parameter gradients, congruent with [`AdapterParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers.iter().flat_map(Dense::values).copied().collect()
    }
}

/// Runs the head on a `B × D` batch. Output rows are unit-norm.
pub fn forward(params: &AdapterParams, features: &Array2<f64>) -> Result<(Array2<f64>, Tape)> {
    if features.ncols() != params.dim {
        return Err(Error::Shape(format!(
            "features have dim {}, adapter expects {}",
            features.ncols(),
            params.dim
        )));
    }
    let r = params.residual_scale;
    let mut hidden = None;
    let z = match params.architecture {
        Architecture::Identity => features.clone(),
        Architecture::Linear => {
            let l = &params.layers[0];
            let net = features.dot(&l.weight.t()) + &l.bias;
            r * features + (1.0 - r) * net
        }
        Architecture::Mlp { .. } => {
            let (l1, l2) = (&params.layers[0], &params.layers[1]);
            let h = (features.dot(&l1.weight.t()) + &l1.bias).mapv(f64::tanh);
            let net = h.dot(&l2.weight.t()) + &l2.bias;
            hidden = Some(h);
            r * features + (1.0 - r) * net
        }
    };

    let norms: Array1<f64> = z.rows().into_iter().map(|row| row.dot(&row).sqrt()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::NonFinite(format!(
            "adapter activation norm {} at row {i}",
            norms[i]
        )));
    }
    let output = &z / &norms.view().insert_axis(Axis(1));
    let tape = Tape {
        fingerprint: params.fingerprint(),
        input: features.clone(),
        hidden,
        norms,
        output: output.clone(),
    };
    Ok((output, tape))
}

/// Reverse-mode gradients of a scalar loss with respect to the parameters,
/// given `output_gradient = dL/d(output)`.
pub fn backward(params: &AdapterParams, tape: &Tape, output_gradient: &Array2<f64>) -> Result<Gradients> {
    if tape.fingerprint != params.fingerprint() {
        return Err(Error::StaleTape);
    }
    if output_gradient.dim() != tape.output.dim() {
        return Err(Error::Shape(format!(
            "output gradient {:?} vs output {:?}",
            output_gradient.dim(),
            tape.output.dim()
        )));
    }

    // through y = z / |z|: dz = (g - y (y . g)) / |z|
    let mut dz = output_gradient.clone();
    Zip::from(dz.rows_mut())
        .and(tape.output.rows())
        .and(&tape.norms)
        .for_each(|mut g, y, &n| {
            let proj = y.dot(&g);
            g.zip_mut_with(&y, |gi, &yi| *gi = (*gi - yi * proj) / n);
        });
    let dnet = (1.0 - params.residual_scale) * dz;

    let layers = match params.architecture {
        Architecture::Identity => Vec::new(),
        Architecture::Linear => vec![Dense {
            weight: dnet.t().dot(&tape.input),
            bias: dnet.sum_axis(Axis(0)),
        }],
        Architecture::Mlp { .. } => {
            let h = tape.hidden.as_ref().ok_or(Error::StaleTape)?;
            let l2 = &params.layers[1];
            let second = Dense {
                weight: dnet.t().dot(h),
                bias: dnet.sum_axis(Axis(0)),
            };
            let mut dpre = dnet.dot(&l2.weight);
            dpre.zip_mut_with(h, |d, &a| *d *= 1.0 - a * a);
            let first = Dense {
                weight: dpre.t().dot(&tape.input),
                bias: dpre.sum_axis(Axis(0)),
            };
            vec![first, second]
        }
    };
    Ok(Gradients { layers })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Vec<Dense>,
    pub step_count: u64,
}

impl OptState {
    pub fn new(params: &AdapterParams, learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {learning_rate} must be finite and >= 0"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(OptState {
            learning_rate,
            momentum,
            velocity: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
            step_count: 0,
        })
    }
}

/// `v ← μ·v + g; p ← p − lr·v`. Parameters and velocity are left untouched
/// if any updated value would be non-finite.
pub fn sgd_step(params: &mut AdapterParams, grads: &Gradients, opt: &mut OptState) -> Result<()> {
    let congruent = grads.layers.len() == params.layers.len()
        && opt.velocity.len() == params.layers.len()
        && params
            .layers
            .iter()
            .zip(&grads.layers)
            .zip(&opt.velocity)
            .all(|((p, g), v)| {
                p.weight.dim() == g.weight.dim()
                    && p.bias.len() == g.bias.len()
                    && p.weight.dim() == v.weight.dim()
                    && p.bias.len() == v.bias.len()
            });
    if !congruent {
        return Err(Error::Shape("gradient/velocity shapes do not match parameters".into()));
    }

    let (mu, lr) = (opt.momentum, opt.learning_rate);
    let mut velocity = opt.velocity.clone();
    let mut updated = params.layers.clone();
    for ((p, g), v) in updated.iter_mut().zip(&grads.layers).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.values_mut().zip(g.values()).zip(v.values_mut()) {
            *vi = mu * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    if updated.iter().flat_map(Dense::values).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("sgd update at step {}", opt.step_count)));
    }
    params.layers = updated;
    opt.velocity = velocity;
    opt.step_count += 1;
    Ok(())
}

/// Parameter blob: magic, u32 model dim, u64 parameter count, then f64 LE values.
pub const PARAM_MAGIC: [u8; 8] = *b"FDPRM1\0\0";

pub fn encode_params(params: &AdapterParams) -> Vec<u8> {
    let n = params.num_params();
    let mut buf = Vec::with_capacity(20 + 8 * n);
    buf.extend_from_slice(&PARAM_MAGIC);
    buf.extend_from_slice(&(params.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for v in params.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

/// Decodes a blob into parameters shaped like `template`.
pub fn decode_params(template: &AdapterParams, bytes: &[u8]) -> Result<AdapterParams> {
    if bytes.len() < 20 || bytes[..8] != PARAM_MAGIC {
        let mut found = [0u8; 8];
        let n = bytes.len().min(8);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic {
            path: "<parameter blob>".into(),
            expected: PARAM_MAGIC,
            found,
        });
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if dim != template.dim || count != template.num_params() || bytes.len() != 20 + 8 * count {
        return Err(Error::Mismatch(format!(
            "blob declares dim {dim}, {count} params ({} bytes); header expects dim {}, {} params",
            bytes.len(),
            template.dim,
            template.num_params()
        )));
    }
    let flat: Vec<f64> = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    template.with_flat(&flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn normalized(x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.clone();
        for mut row in y.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        y
    }

    fn batch() -> Array2<f64> {
        array![[0.3, -1.2, 0.5, 2.0], [1.0, 0.0, -0.4, 0.1], [-0.7, 0.2, 0.9, -0.3]]
    }

    #[test]
    fn identity_head_normalizes() {
        let p = AdapterParams::identity(4).unwrap();
        let (y, _) = forward(&p, &batch()).unwrap();
        assert_eq!(y, normalized(&batch()));
    }

    #[test]
    fn fresh_linear_matches_identity() {
        let x = batch();
        for r in [0.0, 0.3, 1.0] {
            let lin = AdapterParams::init(Architecture::Linear, 4, r, 0).unwrap();
            let (y, _) = forward(&lin, &x).unwrap();
            let (y0, _) = forward(&AdapterParams::identity(4).unwrap(), &x).unwrap();
            for (a, b) in y.iter().zip(&y0) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fresh_mlp_matches_identity() {
        let p = AdapterParams::init(Architecture::Mlp { hidden: 6 }, 4, 0.5, 3).unwrap();
        let (y, _) = forward(&p, &batch()).unwrap();
        for (a, b) in y.iter().zip(&normalized(&batch())) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn random_params_give_unit_rows() {
        let base = AdapterParams::init(Architecture::Mlp { hidden: 5 }, 4, 0.2, 1).unwrap();
        let mut rng = rng_for(11, "test", 0);
        let flat: Vec<f64> = (0..base.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = base.with_flat(&flat).unwrap();
        let (y, _) = forward(&p, &batch()).unwrap();
        for row in y.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let p = AdapterParams::identity(3).unwrap();
        assert!(matches!(forward(&p, &batch()), Err(Error::Shape(_))));
    }

    #[test]
    fn mlp_without_residual_rejected() {
        let r = AdapterParams::init(Architecture::Mlp { hidden: 3 }, 4, 0.0, 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let p = AdapterParams::init(Architecture::Mlp { hidden: 3 }, 4, 0.4, 2).unwrap();
        let (y, tape) = forward(&p, &batch()).unwrap();
        let g = backward(&p, &tape, &Array2::zeros(y.raw_dim())).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_residual_has_dead_branch() {
        let p = AdapterParams::init(Architecture::Linear, 4, 1.0, 0).unwrap();
        let (y, tape) = forward(&p, &batch()).unwrap();
        let g = backward(&p, &tape, &y.mapv(|v| v + 0.5)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_tape_detected() {
        let mut p = AdapterParams::init(Architecture::Linear, 4, 0.0, 0).unwrap();
        let (y, tape) = forward(&p, &batch()).unwrap();
        p.layers[0].bias[0] = 0.1;
        assert!(matches!(backward(&p, &tape, &y), Err(Error::StaleTape)));
    }

    fn unit_grads(p: &AdapterParams, value: f64) -> Gradients {
        Gradients {
            layers: p
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Array2::from_elem(l.weight.raw_dim(), value),
                    bias: Array1::from_elem(l.bias.len(), value),
                })
                .collect(),
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = AdapterParams::init(Architecture::Linear, 3, 0.0, 0).unwrap();
        let before = p.clone();
        let mut opt = OptState::new(&p, 0.0, 0.9).unwrap();
        sgd_step(&mut p, &unit_grads(&before, 1.0), &mut opt).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn vanilla_sgd_step() {
        let mut p = AdapterParams::init(Architecture::Linear, 3, 0.0, 0).unwrap();
        let before = p.flatten();
        let mut opt = OptState::new(&p, 0.1, 0.0).unwrap();
        let g = unit_grads(&p, 1.0);
        sgd_step(&mut p, &g, &mut opt).unwrap();
        for (a, b) in p.flatten().iter().zip(&before) {
            assert!((b - a - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_second_displacement() {
        let mut p = AdapterParams::init(Architecture::Linear, 2, 0.0, 0).unwrap();
        let g = unit_grads(&p, 0.5);
        let mut opt = OptState::new(&p, 0.01, 0.9).unwrap();
        let p0 = p.flatten();
        sgd_step(&mut p, &g, &mut opt).unwrap();
        let p1 = p.flatten();
        sgd_step(&mut p, &g, &mut opt).unwrap();
        let p2 = p.flatten();
        for ((a, b), c) in p0.iter().zip(&p1).zip(&p2) {
            assert!((a - b - 0.01 * 0.5).abs() < 1e-15);
            assert!((b - c - 0.01 * 1.9 * 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_update_leaves_params_alone() {
        let mut p = AdapterParams::init(Architecture::Linear, 2, 0.0, 0).unwrap();
        let before = p.clone();
        let mut opt = OptState::new(&p, 1.0, 0.0).unwrap();
        let g = unit_grads(&p, f64::INFINITY);
        assert!(sgd_step(&mut p, &g, &mut opt).is_err());
        assert_eq!(p, before);
        assert_eq!(opt.step_count, 0);
    }

    #[test]
    fn sgd_shape_mismatch() {
        let mut p = AdapterParams::init(Architecture::Linear, 2, 0.0, 0).unwrap();
        let other = AdapterParams::init(Architecture::Linear, 3, 0.0, 0).unwrap();
        let mut opt = OptState::new(&p, 0.1, 0.0).unwrap();
        assert!(sgd_step(&mut p, &unit_grads(&other, 1.0), &mut opt).is_err());
    }

    #[test]
    fn blob_roundtrip_is_bit_exact() {
        let p = AdapterParams::init(Architecture::Mlp { hidden: 3 }, 4, 0.25, 9).unwrap();
        let q = decode_params(&p, &encode_params(&p)).unwrap();
        assert_eq!(p, q);
        assert!(decode_params(
            &AdapterParams::init(Architecture::Linear, 4, 0.25, 0).unwrap(),
            &encode_params(&p)
        )
        .is_err());
    }
}
