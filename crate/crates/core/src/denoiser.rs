//! The conditional noise predictor ε_θ(x_t, t, c).
//!
//! A fully connected tanh network over the concatenation
//! `[x_t, sin(ω·t/T), cos(ω·t/T), c]`. Parameters live in one flat
//! [`ParamVector`]; layer `l` stores its weight matrix row-major
//! (`out × in`) followed by its bias vector. Gradients are computed by a
//! hand-written backward pass.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ApdmError, Result};

/// Flat parameter storage for a denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(n: usize) -> Self {
        ParamVector(vec![0.0; n])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self -= lr * grad`
    pub fn descend(&mut self, lr: f64, grad: &[f64]) {
        debug_assert_eq!(self.0.len(), grad.len());
        for (p, g) in self.0.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }

    /// Little-endian byte image, used for bit-exact comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.0.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Sinusoidal time feature `(sin(ω·t/T), cos(ω·t/T))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeEmbedding {
    pub steps: usize,
    pub frequency: f64,
}

impl TimeEmbedding {
    pub const DIM: usize = 2;

    pub fn features(&self, t: usize) -> [f64; 2] {
        let phase = self.frequency * t as f64 / self.steps as f64;
        [phase.sin(), phase.cos()]
    }
}

/// Layer-size descriptor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arch {
    pub sample_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub time: TimeEmbedding,
}

impl Arch {
    pub fn input_dim(&self) -> usize {
        self.sample_dim + TimeEmbedding::DIM + self.cond_dim
    }

    /// `[input, hidden..., output]`
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.input_dim());
        sizes.extend_from_slice(&self.hidden);
        sizes.push(self.sample_dim);
        sizes
    }

    pub fn n_params(&self) -> usize {
        self.layer_sizes()
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_dim == 0 {
            return Err(ApdmError::config("arch.sample_dim must be positive"));
        }
        if self.hidden.is_empty() {
            return Err(ApdmError::config("arch.hidden needs at least one layer"));
        }
        if let Some(i) = self.hidden.iter().position(|&w| w == 0) {
            return Err(ApdmError::config(format!("arch.hidden[{i}] has zero width")));
        }
        if self.time.steps == 0 {
            return Err(ApdmError::config("arch.time.steps must be positive"));
        }
        if !self.time.frequency.is_finite() {
            return Err(ApdmError::config("arch.time.frequency must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingTag {
    Identifier,
    Prior,
    Other,
}

/// Weight of the private identifier direction in the standard embeddings.
/// With unit weight the identifier barely separates from the class prompt
/// and personalization of a 2-D subject stays weak.
pub const IDENTIFIER_SCALE: f64 = 3.0;

/// Frozen conditioning vector (`c^per`, `c^pr`, or a spare identifier).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningEmbedding {
    pub vector: Vec<f64>,
    pub tag: EmbeddingTag,
}

impl ConditioningEmbedding {
    /// The default embeddings: the class prompt is `e0`; identifier
    /// prompts add a private direction of weight [`IDENTIFIER_SCALE`] on
    /// top of the class direction, so "[V] class" still shares `e0`.
    pub fn standard(tag: EmbeddingTag, dim: usize) -> Self {
        assert!(dim >= 3, "standard embeddings need dim >= 3");
        let mut vector = vec![0.0; dim];
        vector[0] = 1.0;
        match tag {
            EmbeddingTag::Prior => {}
            EmbeddingTag::Identifier => vector[1] = IDENTIFIER_SCALE,
            EmbeddingTag::Other => vector[2] = IDENTIFIER_SCALE,
        }
        ConditioningEmbedding { vector, tag }
    }
}

/// Anything that predicts noise and can backpropagate through itself.
pub trait NoisePredictor {
    type Tape;

    fn sample_dim(&self) -> usize;
    fn n_params(&self) -> usize;
    fn forward(&self, x_t: &[f64], t: usize, c: &ConditioningEmbedding)
        -> Result<(Vec<f64>, Self::Tape)>;
    /// Accumulates `Jᵀ · d_out` into `grad`, where `J` is the output
    /// Jacobian with respect to the parameters at the taped point.
    fn backward(&self, tape: &Self::Tape, d_out: &[f64], grad: &mut [f64]);

    fn predict(&self, x_t: &[f64], t: usize, c: &ConditioningEmbedding) -> Result<Vec<f64>> {
        self.forward(x_t, t, c).map(|(out, _)| out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalDenoiser {
    pub arch: Arch,
    pub params: ParamVector,
}

/// Per-layer activations: `acts[0]` is the network input, `acts[l]` the
/// output of layer `l` (tanh applied on hidden layers only).
pub struct MlpTape {
    acts: Vec<Vec<f64>>,
}

impl ConditionalDenoiser {
    /// Weights and biases drawn from `U(-1/√fan_in, 1/√fan_in)`, layer by
    /// layer, weights before biases.
    pub fn init<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut values = Vec::with_capacity(arch.n_params());
        for w in arch.layer_sizes().windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out + fan_out {
                values.push(rng.gen_range(-bound..bound));
            }
        }
        Ok(ConditionalDenoiser {
            arch,
            params: ParamVector(values),
        })
    }

    pub fn from_params(arch: Arch, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.n_params() {
            return Err(ApdmError::usage(format!(
                "parameter vector has {} entries, arch expects {}",
                params.len(),
                arch.n_params()
            )));
        }
        Ok(ConditionalDenoiser { arch, params })
    }

    pub fn with_params(&self, params: ParamVector) -> Self {
        assert_eq!(params.len(), self.params.len());
        ConditionalDenoiser {
            arch: self.arch.clone(),
            params,
        }
    }

    fn input(&self, x_t: &[f64], t: usize, c: &ConditioningEmbedding) -> Result<Vec<f64>> {
        let arch = &self.arch;
        if x_t.len() != arch.sample_dim {
            return Err(ApdmError::usage(format!(
                "sample has dimension {}, model expects {}",
                x_t.len(),
                arch.sample_dim
            )));
        }
        if c.vector.len() != arch.cond_dim {
            return Err(ApdmError::usage(format!(
                "conditioning has dimension {}, model expects {}",
                c.vector.len(),
                arch.cond_dim
            )));
        }
        if t == 0 || t > arch.time.steps {
            return Err(ApdmError::Index {
                what: "t",
                index: t,
                lo: 1,
                hi: arch.time.steps,
            });
        }
        let mut input = Vec::with_capacity(arch.input_dim());
        input.extend_from_slice(x_t);
        input.extend_from_slice(&arch.time.features(t));
        input.extend_from_slice(&c.vector);
        Ok(input)
    }
}

impl NoisePredictor for ConditionalDenoiser {
    type Tape = MlpTape;

    fn sample_dim(&self) -> usize {
        self.arch.sample_dim
    }

    fn n_params(&self) -> usize {
        self.params.len()
    }

    fn forward(
        &self,
        x_t: &[f64],
        t: usize,
        c: &ConditioningEmbedding,
    ) -> Result<(Vec<f64>, MlpTape)> {
        let sizes = self.arch.layer_sizes();
        let n_layers = sizes.len() - 1;
        let mut acts = Vec::with_capacity(sizes.len());
        acts.push(self.input(x_t, t, c)?);
        let mut offset = 0;
        for l in 0..n_layers {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let prev = &acts[l];
            let hidden = l + 1 < n_layers;
            let next: Vec<f64> = (0..n_out)
                .map(|o| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    let z = row.iter().zip(prev).fold(b[o], |acc, (wi, xi)| acc + wi * xi);
                    if hidden {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(next);
        }
        let out = acts[n_layers].clone();
        Ok((out, MlpTape { acts }))
    }

    fn backward(&self, tape: &MlpTape, d_out: &[f64], grad: &mut [f64]) {
        let sizes = self.arch.layer_sizes();
        let n_layers = sizes.len() - 1;
        debug_assert_eq!(grad.len(), self.params.len());
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            offset += sizes[l] * sizes[l + 1] + sizes[l + 1];
        }
        // delta = dL/dz for the current layer's pre-activation
        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let off = offsets[l];
            let prev = &tape.acts[l];
            for o in 0..n_out {
                let d = delta[o];
                let gw = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, x) in gw.iter_mut().zip(prev) {
                    *g += d * x;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let w = &self.params[off..off + n_in * n_out];
                let mut next = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    for (acc, wi) in next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *acc += wi * d;
                    }
                }
                for (acc, h) in next.iter_mut().zip(prev) {
                    *acc *= 1.0 - h * h;
                }
                delta = next;
            }
        }
    }
}

/// `predict_eps` as a free function.
pub fn predict_eps(
    model: &ConditionalDenoiser,
    x_t: &[f64],
    t: usize,
    c: &ConditioningEmbedding,
) -> Result<Vec<f64>> {
    model.predict(x_t, t, c)
}
