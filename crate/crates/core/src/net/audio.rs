use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{glorot, l2_backward, Embedding, Modality};
use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    /// Same-padded temporal convolution followed by ReLU. The first layer's
    /// kernel spans every input band.
    Conv { filters: usize, width: usize },
    /// Valid max pooling along time: `T -> (T - width) / stride + 1`.
    MaxPool { width: usize, stride: usize },
}

/// Audio branch architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioConfig {
    pub bands: usize,
    pub layers: Vec<LayerSpec>,
    /// Shortest accepted input, never below the structural minimum.
    pub min_frames: usize,
}

impl AudioConfig {
    pub fn new(bands: usize, layers: Vec<LayerSpec>) -> Result<Self> {
        let mut cfg = AudioConfig {
            bands,
            layers,
            min_frames: 1,
        };
        cfg.validate()?;
        cfg.min_frames = cfg.structural_min_frames();
        Ok(cfg)
    }

    /// The five-convolution, three-pool architecture over 40 mel bands.
    pub fn full() -> Self {
        use LayerSpec::*;
        let pool = MaxPool { width: 3, stride: 2 };
        let mut cfg = AudioConfig::new(
            40,
            vec![
                Conv { filters: 128, width: 1 },
                Conv { filters: 256, width: 11 },
                pool,
                Conv { filters: 512, width: 17 },
                pool,
                Conv { filters: 512, width: 17 },
                pool,
                Conv { filters: 1024, width: 17 },
            ],
        )
        .expect("built-in architecture is valid");
        cfg.min_frames = 35;
        cfg
    }

    /// `bands`-band test network: a band-spanning convolution, one temporal
    /// convolution, then a pool.
    pub fn reduced(bands: usize, hidden: usize, width: usize, embedding_dim: usize) -> Self {
        use LayerSpec::*;
        AudioConfig::new(
            bands,
            vec![
                Conv { filters: hidden, width: 1 },
                Conv { filters: embedding_dim, width },
                MaxPool { width: 3, stride: 2 },
            ],
        )
        .expect("reduced architecture is valid")
    }

    fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::Config("audio architecture needs at least one band".into()));
        }
        if !matches!(self.layers.first(), Some(LayerSpec::Conv { .. })) {
            return Err(Error::Config("audio architecture must start with a convolution".into()));
        }
        for l in &self.layers {
            match *l {
                LayerSpec::Conv { filters, width } if filters == 0 || width == 0 => {
                    return Err(Error::Config("convolution with zero filters or width".into()))
                }
                LayerSpec::MaxPool { width, stride } if width == 0 || stride == 0 => {
                    return Err(Error::Config("pool with zero width or stride".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Conv { filters, .. } => Some(*filters),
                _ => None,
            })
            .expect("validated architecture has a convolution")
    }

    /// Temporal width after each max pool, or `None` if some pool has no output.
    pub fn pooled_widths(&self, frames: usize) -> Option<Vec<usize>> {
        let mut t = frames;
        let mut out = Vec::new();
        for l in &self.layers {
            if let LayerSpec::MaxPool { width, stride } = *l {
                if t < width {
                    return None;
                }
                t = (t - width) / stride + 1;
                out.push(t);
            }
        }
        if t == 0 {
            None
        } else {
            Some(out)
        }
    }

    pub fn structural_min_frames(&self) -> usize {
        (1..).find(|&t| self.pooled_widths(t).is_some()).unwrap()
    }
}

impl fmt::Display for AudioConfig {
    /// `bands:layer,layer,...;min=N` with layers `c<filters>x<width>` and
    /// `p<width>s<stride>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| match l {
                LayerSpec::Conv { filters, width } => format!("c{filters}x{width}"),
                LayerSpec::MaxPool { width, stride } => format!("p{width}s{stride}"),
            })
            .collect();
        write!(f, "{}:{};min={}", self.bands, layers.join(","), self.min_frames)
    }
}

impl FromStr for AudioConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => return Ok(AudioConfig::full()),
            "reduced" => return Ok(AudioConfig::reduced(8, 8, 3, 64)),
            _ => {}
        }
        let bad = || Error::Config(format!("invalid audio architecture '{s}'"));
        let (body, min) = match s.split_once(";min=") {
            Some((b, m)) => (b, Some(m.trim().parse::<usize>().map_err(|_| bad())?)),
            None => (s, None),
        };
        let (bands, layers) = body.split_once(':').ok_or_else(bad)?;
        let bands: usize = bands.trim().parse().map_err(|_| bad())?;
        let pair = |rest: &str, sep: char| -> Result<(usize, usize)> {
            let (a, b) = rest.split_once(sep).ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        };
        let layers = layers
            .split(',')
            .map(|l| {
                let l = l.trim();
                if let Some(rest) = l.strip_prefix('c') {
                    let (filters, width) = pair(rest, 'x')?;
                    Ok(LayerSpec::Conv { filters, width })
                } else if let Some(rest) = l.strip_prefix('p') {
                    let (width, stride) = pair(rest, 's')?;
                    Ok(LayerSpec::MaxPool { width, stride })
                } else {
                    Err(bad())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cfg = AudioConfig::new(bands, layers)?;
        if let Some(m) = min {
            cfg.min_frames = m.max(cfg.min_frames);
        }
        Ok(cfg)
    }
}

/// Weights are `out x in x width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_ch: usize,
    pub out_ch: usize,
    pub width: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    fn w(&self, o: usize, c: usize) -> &[f64] {
        let base = (o * self.in_ch + c) * self.width;
        &self.weight[base..base + self.width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioParams {
    pub config: AudioConfig,
    pub convs: Vec<ConvLayer>,
}

impl AudioParams {
    pub fn init<R: Rng>(config: AudioConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for c in &mut p.convs {
            c.weight = glorot(rng, c.weight.len(), c.in_ch * c.width, c.out_ch * c.width);
        }
        Ok(p)
    }

    pub fn zeros(config: AudioConfig) -> Result<Self> {
        config.validate()?;
        let mut in_ch = config.bands;
        let mut convs = Vec::new();
        for l in &config.layers {
            if let LayerSpec::Conv { filters, width } = *l {
                convs.push(ConvLayer {
                    in_ch,
                    out_ch: filters,
                    width,
                    weight: vec![0.0; filters * in_ch * width],
                    bias: vec![0.0; filters],
                });
                in_ch = filters;
            }
        }
        Ok(AudioParams { config, convs })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config.clone()).expect("config already validated")
    }

    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum()
    }
}

/// Channel-major activations: `channels x width`.
#[derive(Debug, Clone)]
struct Act {
    channels: usize,
    width: usize,
    data: Vec<f64>,
}

impl Act {
    fn row(&self, c: usize) -> &[f64] {
        &self.data[c * self.width..(c + 1) * self.width]
    }
}

#[derive(Debug, Clone)]
enum Step {
    /// Input to the convolution and its post-ReLU output.
    Conv { conv: usize, input: Act, output: Act },
    /// Input width and, per output cell, the flat index of the winning input.
    Pool { input_width: usize, argmax: Vec<usize>, channels: usize },
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AudioTrace {
    steps: Vec<Step>,
    final_width: usize,
    norm: f64,
    output: Vec<f64>,
}

impl AudioTrace {
    /// Temporal width after each pool, for shape checks.
    pub fn pooled_widths(&self) -> Vec<usize> {
        self.steps
            .iter()
            .filter_map(|s| match s {
                Step::Pool { argmax, channels, .. } => Some(argmax.len() / channels),
                Step::Conv { .. } => None,
            })
            .collect()
    }
}

fn conv_forward(layer: &ConvLayer, input: &Act) -> Act {
    let t = input.width;
    let pad = (layer.width - 1) / 2;
    let mut out = vec![0.0; layer.out_ch * t];
    for o in 0..layer.out_ch {
        let row = &mut out[o * t..(o + 1) * t];
        row.iter_mut().for_each(|v| *v = layer.bias[o]);
        for c in 0..layer.in_ch {
            let inp = input.row(c);
            for (k, &w) in layer.w(o, c).iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let shift = k as isize - pad as isize;
                let lo = (-shift).max(0) as usize;
                let hi = (t as isize - shift).min(t as isize).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                let src = &inp[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                for (d, s) in row[lo..hi].iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        row.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Act {
        channels: layer.out_ch,
        width: t,
        data: out,
    }
}

fn pool_forward(input: &Act, width: usize, stride: usize) -> (Act, Vec<usize>) {
    let out_w = (input.width - width) / stride + 1;
    let mut data = Vec::with_capacity(input.channels * out_w);
    let mut argmax = Vec::with_capacity(input.channels * out_w);
    for c in 0..input.channels {
        let row = input.row(c);
        for j in 0..out_w {
            let start = j * stride;
            let mut best = start;
            for i in start + 1..start + width {
                if row[i] > row[best] {
                    best = i;
                }
            }
            data.push(row[best]);
            argmax.push(c * input.width + best);
        }
    }
    (
        Act {
            channels: input.channels,
            width: out_w,
            data,
        },
        argmax,
    )
}

pub fn audio_forward(spec: &Spectrogram, params: &AudioParams) -> Result<Embedding> {
    audio_forward_trace(spec, params).map(|(e, _)| e)
}

pub fn audio_forward_trace(spec: &Spectrogram, params: &AudioParams) -> Result<(Embedding, AudioTrace)> {
    let cfg = &params.config;
    if spec.bands() != cfg.bands {
        return Err(Error::Dimension(format!(
            "spectrogram has {} bands, network expects {}",
            spec.bands(),
            cfg.bands
        )));
    }
    let t = spec.frames();
    if t < cfg.min_frames || cfg.pooled_widths(t).is_none() {
        return Err(Error::CaptionTooShort {
            frames: t,
            min: cfg.min_frames,
        });
    }
    let mut data = vec![0.0; cfg.bands * t];
    for f in 0..t {
        for (b, &v) in spec.frame(f).iter().enumerate() {
            data[b * t + f] = v as f64;
        }
    }
    let mut act = Act {
        channels: cfg.bands,
        width: t,
        data,
    };
    let mut steps = Vec::with_capacity(cfg.layers.len());
    let mut conv_idx = 0;
    for l in &cfg.layers {
        match *l {
            LayerSpec::Conv { .. } => {
                let out = conv_forward(&params.convs[conv_idx], &act);
                let input = std::mem::replace(&mut act, out);
                steps.push(Step::Conv {
                    conv: conv_idx,
                    input,
                    output: act.clone(),
                });
                conv_idx += 1;
            }
            LayerSpec::MaxPool { width, stride } => {
                let input_width = act.width;
                let (out, argmax) = pool_forward(&act, width, stride);
                steps.push(Step::Pool {
                    input_width,
                    argmax,
                    channels: act.channels,
                });
                act = out;
            }
        }
    }
    let pooled: Vec<f64> = (0..act.channels)
        .map(|c| act.row(c).iter().sum::<f64>() / act.width as f64)
        .collect();
    let (emb, norm) = Embedding::normalize(pooled, Modality::Audio)?;
    let trace = AudioTrace {
        steps,
        final_width: act.width,
        norm,
        output: emb.values().to_vec(),
    };
    Ok((emb, trace))
}

/// Accumulate parameter gradients into `grads` given `dL/d(embedding)`.
pub fn audio_backward(params: &AudioParams, trace: &AudioTrace, grad_embedding: &[f64], grads: &mut AudioParams) {
    let grad_pooled = l2_backward(&trace.output, trace.norm, grad_embedding);
    let channels = grad_pooled.len();
    let w = trace.final_width;
    let mut grad = Act {
        channels,
        width: w,
        data: grad_pooled
            .iter()
            .flat_map(|&g| std::iter::repeat_n(g / w as f64, w))
            .collect(),
    };
    for (i, step) in trace.steps.iter().enumerate().rev() {
        match step {
            Step::Pool {
                input_width,
                argmax,
                channels,
            } => {
                let mut data = vec![0.0; channels * input_width];
                for (g, &src) in grad.data.iter().zip(argmax) {
                    data[src] += g;
                }
                grad = Act {
                    channels: *channels,
                    width: *input_width,
                    data,
                };
            }
            Step::Conv { conv, input, output } => {
                let layer = &params.convs[*conv];
                let g = &mut grads.convs[*conv];
                let t = input.width;
                let pad = (layer.width - 1) / 2;
                // ReLU derivative
                for (d, &o) in grad.data.iter_mut().zip(&output.data) {
                    if o <= 0.0 {
                        *d = 0.0;
                    }
                }
                let need_input_grad = i > 0;
                let mut din = vec![0.0; if need_input_grad { layer.in_ch * t } else { 0 }];
                for o in 0..layer.out_ch {
                    let dout = &grad.data[o * t..(o + 1) * t];
                    if dout.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    g.bias[o] += dout.iter().sum::<f64>();
                    for c in 0..layer.in_ch {
                        let inp = input.row(c);
                        let base = (o * layer.in_ch + c) * layer.width;
                        for k in 0..layer.width {
                            let shift = k as isize - pad as isize;
                            let lo = (-shift).max(0) as usize;
                            let hi = (t as isize - shift).min(t as isize).max(0) as usize;
                            if lo >= hi {
                                continue;
                            }
                            let s_lo = (lo as isize + shift) as usize;
                            let s_hi = (hi as isize + shift) as usize;
                            let src = &inp[s_lo..s_hi];
                            g.weight[base + k] += dout[lo..hi].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            if need_input_grad {
                                let wv = layer.weight[base + k];
                                let dst = &mut din[c * t + s_lo..c * t + s_hi];
                                for (d, a) in dst.iter_mut().zip(&dout[lo..hi]) {
                                    *d += wv * a;
                                }
                            }
                        }
                    }
                }
                grad = Act {
                    channels: layer.in_ch,
                    width: t,
                    data: din,
                };
            }
        }
    }
}
