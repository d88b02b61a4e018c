use rand::Rng;

use super::{dot, glorot, l2_backward, Embedding, Modality};
use crate::error::{Error, Result};

pub const FEATURE_DIM: usize = 4096;

/// Affine projection `out x in` plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageParams {
    pub input_dim: usize,
    pub output_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ImageParams {
    pub fn init<R: Rng>(input_dim: usize, output_dim: usize, rng: &mut R) -> Self {
        ImageParams {
            input_dim,
            output_dim,
            weight: glorot(rng, input_dim * output_dim, input_dim, output_dim),
            bias: vec![0.0; output_dim],
        }
    }

    pub fn zeros(input_dim: usize, output_dim: usize) -> Self {
        ImageParams {
            input_dim,
            output_dim,
            weight: vec![0.0; input_dim * output_dim],
            bias: vec![0.0; output_dim],
        }
    }

    /// Copies the first `output_dim` inputs through unchanged.
    pub fn identity(input_dim: usize, output_dim: usize) -> Self {
        let mut p = Self::zeros(input_dim, output_dim);
        for i in 0..output_dim.min(input_dim) {
            p.weight[i * input_dim + i] = 1.0;
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim, self.output_dim)
    }

    fn row(&self, o: usize) -> &[f64] {
        &self.weight[o * self.input_dim..(o + 1) * self.input_dim]
    }
}

#[derive(Debug, Clone)]
pub struct ImageTrace {
    input: Vec<f64>,
    norm: f64,
    output: Vec<f64>,
}

pub fn image_forward(features: &[f64], params: &ImageParams) -> Result<Embedding> {
    image_forward_trace(features, params).map(|(e, _)| e)
}

pub fn image_forward_trace(features: &[f64], params: &ImageParams) -> Result<(Embedding, ImageTrace)> {
    if features.len() != params.input_dim {
        return Err(Error::FeatureDimension {
            expected: params.input_dim,
            got: features.len(),
        });
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Dimension("non-finite image feature".into()));
    }
    let raw: Vec<f64> = (0..params.output_dim)
        .map(|o| params.bias[o] + dot(params.row(o), features))
        .collect();
    let (emb, norm) = Embedding::normalize(raw, Modality::Image)?;
    let trace = ImageTrace {
        input: features.to_vec(),
        norm,
        output: emb.values().to_vec(),
    };
    Ok((emb, trace))
}

pub fn image_backward(trace: &ImageTrace, grad_embedding: &[f64], grads: &mut ImageParams) {
    let dz = l2_backward(&trace.output, trace.norm, grad_embedding);
    let n = grads.input_dim;
    for (o, &g) in dz.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grads.bias[o] += g;
        for (w, x) in grads.weight[o * n..(o + 1) * n].iter_mut().zip(&trace.input) {
            *w += g * x;
        }
    }
}
