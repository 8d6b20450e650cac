//! The neural style field: a coordinate MLP mapping normalized vertex
//! positions to per-vertex color and displacement magnitude.
//!
//! Positions pass through a sinusoidal positional encoding, a tanh trunk, and
//! two heads: color = 0.5 + 0.5·tanh(·) ∈ [0,1]³ and displacement = tanh(·) ∈
//! [−1,1] (scaled by the mesh module when applied along normals). Both head
//! output layers start at zero, so a freshly initialized field is exactly the
//! identity style: uniform gray, no displacement. That makes run starts
//! deterministic and before/after comparisons meaningful.
//!
//! Training evaluates the field on a [`Tape`]; the plain evaluation reuses the
//! same recorded computation, so the two paths cannot disagree.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Tape, Var};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("hidden width {0} is below the minimum of 8")]
    WidthTooSmall(usize),
    #[error("trunk depth must be at least 1")]
    ZeroDepth,
    #[error("frequency scale {0} must be positive and finite")]
    BadFrequencyScale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub num_frequencies: usize,
    pub frequency_scale: f64,
    pub hidden_width: usize,
    /// Number of shared trunk layers.
    pub depth: usize,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { num_frequencies: 6, frequency_scale: 1.0, hidden_width: 256, depth: 4, seed: 0 }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        if self.hidden_width < 8 {
            return Err(FieldError::WidthTooSmall(self.hidden_width));
        }
        if self.depth == 0 {
            return Err(FieldError::ZeroDepth);
        }
        if !(self.frequency_scale > 0.0 && self.frequency_scale.is_finite()) {
            return Err(FieldError::BadFrequencyScale(self.frequency_scale));
        }
        Ok(())
    }

    /// Width of the positional encoding: raw xyz plus a sin and cos triple
    /// per frequency band.
    pub fn encoded_width(&self) -> usize {
        3 + 6 * self.num_frequencies
    }
}

/// Sinusoidal features: [p, sin(2⁰·s·p), cos(2⁰·s·p), sin(2¹·s·p), ...] with
/// the raw coordinates first and one sin/cos triple pair per band.
pub fn positional_encode(points: &Array2<f64>, config: &FieldConfig) -> Array2<f64> {
    assert_eq!(points.ncols(), 3, "positional_encode expects m x 3 points");
    let m = points.nrows();
    let mut out = Array2::zeros((m, config.encoded_width()));
    for r in 0..m {
        for ax in 0..3 {
            out[(r, ax)] = points[(r, ax)];
        }
        for k in 0..config.num_frequencies {
            let f = (2.0f64).powi(k as i32) * config.frequency_scale;
            let base = 3 + 6 * k;
            for ax in 0..3 {
                let v = f * points[(r, ax)];
                out[(r, base + ax)] = v.sin();
                out[(r, base + 3 + ax)] = v.cos();
            }
        }
    }
    out
}

/// One dense layer's parameters: weights (in×out) and a bias row (1×out).
#[derive(Debug, Clone, Serialize, Deserialize)]
struct DenseLayer {
    weights: Array2<f64>,
    bias: Array2<f64>,
}

/// The style field's parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleField {
    pub config: FieldConfig,
    trunk: Vec<DenseLayer>,
    color_head: DenseLayer,
    displacement_head: DenseLayer,
}

/// Tape handles of every field parameter, in [`StyleField::parameters`] order.
pub struct FieldVars {
    vars: Vec<Var>,
}

impl FieldVars {
    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

/// Deterministic field construction: the trunk draws uniform Xavier weights
/// from a stream seeded by `config.seed`; biases and both head output layers
/// start at zero, forcing the identity style.
pub fn init_field(config: &FieldConfig) -> Result<StyleField, FieldError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut xavier = |n_in: usize, n_out: usize| -> DenseLayer {
        let limit = (6.0 / (n_in + n_out) as f64).sqrt();
        DenseLayer {
            weights: Array2::from_shape_fn((n_in, n_out), |_| rng.gen_range(-limit..limit)),
            bias: Array2::zeros((1, n_out)),
        }
    };
    let mut trunk = Vec::with_capacity(config.depth);
    let mut n_in = config.encoded_width();
    for _ in 0..config.depth {
        trunk.push(xavier(n_in, config.hidden_width));
        n_in = config.hidden_width;
    }
    let zero = |n_in: usize, n_out: usize| DenseLayer {
        weights: Array2::zeros((n_in, n_out)),
        bias: Array2::zeros((1, n_out)),
    };
    Ok(StyleField {
        config: *config,
        trunk,
        color_head: zero(config.hidden_width, 3),
        displacement_head: zero(config.hidden_width, 1),
    })
}

impl StyleField {
    /// All parameter matrices in a stable order (trunk layers, color head,
    /// displacement head; weights before bias). Optimizers and checkpoints
    /// rely on this order.
    pub fn parameters(&self) -> Vec<&Array2<f64>> {
        let mut p = Vec::new();
        for layer in &self.trunk {
            p.push(&layer.weights);
            p.push(&layer.bias);
        }
        p.extend([&self.color_head.weights, &self.color_head.bias]);
        p.extend([&self.displacement_head.weights, &self.displacement_head.bias]);
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut p = Vec::new();
        for layer in &mut self.trunk {
            p.push(&mut layer.weights);
            p.push(&mut layer.bias);
        }
        p.extend([&mut self.color_head.weights, &mut self.color_head.bias]);
        p.extend([&mut self.displacement_head.weights, &mut self.displacement_head.bias]);
        p
    }

    /// SHA-256 over the parameter bytes; used to compare fields for identity.
    pub fn param_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for p in self.parameters() {
            for v in p.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        format!("{:x}", hasher.finalize())
    }

    /// Register every parameter as a tape leaf.
    pub fn leaves(&self, tape: &mut Tape) -> FieldVars {
        FieldVars { vars: self.parameters().into_iter().map(|p| tape.leaf(p.clone())).collect() }
    }

    /// Record the field over pre-encoded points (m×encoded_width) and return
    /// (colors m×3 in [0,1], displacements m×1 in [−1,1]).
    pub fn eval_on_tape(&self, tape: &mut Tape, vars: &FieldVars, encoded: Var) -> (Var, Var) {
        let mut i = 0;
        let mut next = || {
            let v = vars.vars[i];
            i += 1;
            v
        };
        let mut h = encoded;
        for _ in 0..self.trunk.len() {
            let w = next();
            let b = next();
            let z = tape.matmul(h, w);
            let zb = tape.add_row(z, b);
            h = tape.tanh(zb);
        }
        let (cw, cb) = (next(), next());
        let cz = tape.matmul(h, cw);
        let czb = tape.add_row(cz, cb);
        let ct = tape.tanh(czb);
        let colors = tape.affine(ct, 0.5, 0.5);

        let (dw, db) = (next(), next());
        let dz = tape.matmul(h, dw);
        let dzb = tape.add_row(dz, db);
        let displacements = tape.tanh(dzb);
        (colors, displacements)
    }

    /// Plain evaluation at raw vertex positions. Runs the same recorded
    /// computation as training on a scratch tape and extracts values.
    pub fn evaluate(&self, vertices: &Array2<f64>) -> (Vec<[f64; 3]>, Vec<f64>) {
        let encoded = positional_encode(vertices, &self.config);
        let mut tape = Tape::new();
        let vars = self.leaves(&mut tape);
        let enc = tape.leaf(encoded);
        let (colors, disps) = self.eval_on_tape(&mut tape, &vars, enc);
        let c = tape.value(colors);
        let d = tape.value(disps);
        let colors_out = (0..c.nrows()).map(|r| [c[(r, 0)], c[(r, 1)], c[(r, 2)]]).collect();
        let disps_out = (0..d.nrows()).map(|r| d[(r, 0)]).collect();
        (colors_out, disps_out)
    }

    /// Overwrite parameters from optimizer-updated matrices (same order as
    /// [`StyleField::parameters`]).
    pub fn set_parameters(&mut self, values: &[Array2<f64>]) {
        let mut params = self.parameters_mut();
        assert_eq!(params.len(), values.len(), "parameter count mismatch");
        for (dst, src) in params.iter_mut().zip(values) {
            assert_eq!(dst.dim(), src.dim(), "parameter shape mismatch");
            **dst = src.clone();
        }
    }
}
