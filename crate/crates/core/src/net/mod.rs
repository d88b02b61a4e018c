//! Two-branch embedding network.
//!
//! The audio branch is all-convolutional with a final mean pool, so any
//! caption long enough to survive the max pools maps to one vector. The image
//! branch is a trainable affine projection of precomputed CNN features. Both
//! outputs are L2-normalized and compared by inner product.

pub mod audio;
pub mod image;

use rand::Rng;

pub use audio::{audio_backward, audio_forward, audio_forward_trace, AudioConfig, AudioParams, AudioTrace, LayerSpec};
pub use image::{image_backward, image_forward, image_forward_trace, ImageParams, ImageTrace};

use crate::error::{Error, Result};
use crate::tensor::TensorContainer;

/// Pre-normalization norms below this are treated as a dead network.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Audio,
    Image,
}

/// A unit-norm point in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    modality: Modality,
}

impl Embedding {
    /// L2-normalize `raw`, returning the embedding and the original norm.
    pub fn normalize(raw: Vec<f64>, modality: Modality) -> Result<(Embedding, f64)> {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::DegenerateEmbedding(norm));
        }
        let values = raw.into_iter().map(|v| v / norm).collect();
        Ok((Embedding { values, modality }, norm))
    }

    /// Wrap values that are already unit norm (for example, read back from disk).
    pub fn from_unit(values: Vec<f64>, modality: Modality) -> Embedding {
        Embedding { values, modality }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("{} vs {}", a.dim(), b.dim())));
    }
    Ok(dot(&a.values, &b.values))
}

/// Gradient of `y = z / |z|` with respect to `z`, given `dL/dy`.
pub(crate) fn l2_backward(y: &[f64], norm: f64, grad_y: &[f64]) -> Vec<f64> {
    let proj = dot(y, grad_y);
    y.iter().zip(grad_y).map(|(yi, gi)| (gi - yi * proj) / norm).collect()
}

pub(crate) fn glorot<R: Rng>(rng: &mut R, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-s..=s)).collect()
}

/// Full trainable parameter set of both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub audio: AudioParams,
    pub image: ImageParams,
}

/// A named view of one parameter tensor.
pub struct ParamView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl NetworkParams {
    pub fn init<R: Rng>(audio: AudioConfig, feature_dim: usize, rng: &mut R) -> Result<Self> {
        let audio = AudioParams::init(audio, rng)?;
        let image = ImageParams::init(feature_dim, audio.config.embedding_dim(), rng);
        Ok(NetworkParams { audio, image })
    }

    pub fn zeros(audio: AudioConfig, feature_dim: usize) -> Result<Self> {
        let audio = AudioParams::zeros(audio)?;
        let image = ImageParams::zeros(feature_dim, audio.config.embedding_dim());
        Ok(NetworkParams { audio, image })
    }

    pub fn zeros_like(&self) -> Self {
        NetworkParams {
            audio: self.audio.zeros_like(),
            image: self.image.zeros_like(),
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.image.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.views().iter().map(|v| v.data.len()).sum()
    }

    pub fn views(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for (i, c) in self.audio.convs.iter().enumerate() {
            out.push(ParamView {
                name: format!("audio.conv{}.weight", i + 1),
                shape: vec![c.out_ch, c.in_ch, c.width],
                data: &c.weight,
            });
            out.push(ParamView {
                name: format!("audio.conv{}.bias", i + 1),
                shape: vec![c.out_ch],
                data: &c.bias,
            });
        }
        out.push(ParamView {
            name: "image.weight".into(),
            shape: vec![self.image.output_dim, self.image.input_dim],
            data: &self.image.weight,
        });
        out.push(ParamView {
            name: "image.bias".into(),
            shape: vec![self.image.output_dim],
            data: &self.image.bias,
        });
        out
    }

    /// Mutable parameter buffers in the same order as [`NetworkParams::views`].
    pub fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for c in &mut self.audio.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.image.weight);
        out.push(&mut self.image.bias);
        out
    }

    pub fn fill(&mut self, value: f64) {
        for b in self.buffers_mut() {
            b.iter_mut().for_each(|v| *v = value);
        }
    }

    pub fn write_to(&self, c: &mut TensorContainer) -> Result<()> {
        for v in self.views() {
            c.push_f64(v.name, v.shape, v.data)?;
        }
        Ok(())
    }

    /// Load every parameter tensor named by `views()` for the given architecture.
    pub fn read_from(c: &TensorContainer, audio: AudioConfig, feature_dim: usize) -> Result<Self> {
        let mut params = NetworkParams::zeros(audio, feature_dim)?;
        let names: Vec<(String, Vec<usize>)> =
            params.views().into_iter().map(|v| (v.name, v.shape)).collect();
        for ((name, shape), buf) in names.into_iter().zip(params.buffers_mut()) {
            let t = c.require(&name)?;
            if t.shape != shape {
                return Err(Error::Shape(format!(
                    "checkpoint tensor '{name}' has shape {:?}, architecture expects {shape:?}",
                    t.shape
                )));
            }
            *buf = t.to_f64();
        }
        Ok(params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, i: usize, sign: f64) -> Embedding {
        let mut v = vec![0.0; dim];
        v[i] = sign;
        Embedding::from_unit(v, Modality::Audio)
    }

    #[test]
    fn similarity_fixtures() {
        let a = unit(1024, 3, 1.0);
        assert_eq!(similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(similarity(&a, &unit(1024, 4, 1.0)).unwrap(), 0.0);
        assert_eq!(similarity(&a, &unit(1024, 3, -1.0)).unwrap(), -1.0);
        assert!(similarity(&a, &unit(8, 3, 1.0)).is_err());
    }

    #[test]
    fn zero_vector_is_degenerate() {
        assert!(matches!(
            Embedding::normalize(vec![0.0; 4], Modality::Image),
            Err(Error::DegenerateEmbedding(_))
        ));
    }
}
