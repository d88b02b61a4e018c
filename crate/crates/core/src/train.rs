//! Margin ranking objective with in-batch impostors, and momentum SGD.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{mean_normalize, Spectrogram};
use crate::error::{Error, Result};
use crate::net::{
    audio_backward, audio_forward, audio_forward_trace, dot, image_backward, image_forward, image_forward_trace, AudioConfig,
    NetworkParams,
};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub learning_rate: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub epochs: usize,
    pub caption_frames: usize,
    pub margin: f64,
    /// Rescale a batch gradient whose global L2 norm exceeds this; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            momentum: 0.9,
            learning_rate: 1e-5,
            decay_factor: 3.0,
            decay_period: 7,
            epochs: 50,
            caption_frames: 1024,
            margin: 1.0,
            clip_norm: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.decay_factor > 0.0) || self.decay_period == 0 {
            return Err(Error::Config("learning rate, decay factor and decay period must be positive".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// `lr0 / factor^d` after `d = epoch / period` decays (epochs count from 0).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = (epoch / self.decay_period) as i32;
        self.learning_rate / self.decay_factor.powi(decays)
    }
}

/// Zero-pad or truncate at the end to exactly `target` frames.
pub fn pad_or_truncate(spec: &Spectrogram, target: usize) -> Spectrogram {
    let bands = spec.bands();
    let keep = spec.frames().min(target);
    let mut values = spec.values()[..keep * bands].to_vec();
    values.resize(target * bands, 0.0);
    Spectrogram::from_values(target, bands, values, spec.utterance_id.clone())
        .expect("padding preserves validity")
}

/// Per batch position: `(impostor image, impostor caption)`, each drawn
/// uniformly from the other positions.
pub fn sample_impostors<R: Rng>(batch: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if batch < 2 {
        return Err(Error::BatchTooSmall(batch));
    }
    let mut other = |j: usize| {
        let r = rng.gen_range(0..batch - 1);
        if r >= j {
            r + 1
        } else {
            r
        }
    };
    Ok((0..batch).map(|j| (other(j), other(j))).collect())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinibatchScores {
    /// Score of each true image/caption pair.
    pub positive: Vec<f64>,
    /// Image `j` against its impostor caption.
    pub impostor_caption: Vec<f64>,
    /// Caption `j` against its impostor image.
    pub impostor_image: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGradients {
    pub positive: Vec<f64>,
    pub impostor_caption: Vec<f64>,
    pub impostor_image: Vec<f64>,
}

pub fn ranking_loss(scores: &MinibatchScores, margin: f64) -> Result<f64> {
    ranking_loss_with_grad(scores, margin).map(|(l, _)| l)
}

/// Loss and its (sub)gradient; a hinge sitting exactly on its kink gets 0.
pub fn ranking_loss_with_grad(scores: &MinibatchScores, margin: f64) -> Result<(f64, ScoreGradients)> {
    let b = scores.positive.len();
    if scores.impostor_caption.len() != b || scores.impostor_image.len() != b {
        return Err(Error::Shape("score vectors differ in length".into()));
    }
    let mut loss = 0.0;
    let mut g = ScoreGradients {
        positive: vec![0.0; b],
        impostor_caption: vec![0.0; b],
        impostor_image: vec![0.0; b],
    };
    for j in 0..b {
        let (p, c, i) = (scores.positive[j], scores.impostor_caption[j], scores.impostor_image[j]);
        if !(p.is_finite() && c.is_finite() && i.is_finite()) {
            return Err(Error::InvalidScore(j));
        }
        let hc = c - p + margin;
        let hi = i - p + margin;
        if hc > 0.0 {
            loss += hc;
            g.impostor_caption[j] = 1.0;
            g.positive[j] -= 1.0;
        }
        if hi > 0.0 {
            loss += hi;
            g.impostor_image[j] = 1.0;
            g.positive[j] -= 1.0;
        }
    }
    Ok((loss, g))
}

/// Loss of one minibatch and the gradient of every parameter.
///
/// `captions` must already be normalized and sized; `features` must already
/// have the training mean removed.
pub fn minibatch_objective(
    params: &NetworkParams,
    captions: &[&Spectrogram],
    features: &[&[f64]],
    impostors: &[(usize, usize)],
    margin: f64,
) -> Result<(f64, NetworkParams)> {
    let b = captions.len();
    if features.len() != b || impostors.len() != b {
        return Err(Error::Shape("minibatch parts differ in length".into()));
    }
    let mut audio = Vec::with_capacity(b);
    let mut image = Vec::with_capacity(b);
    for j in 0..b {
        audio.push(audio_forward_trace(captions[j], &params.audio)?);
        image.push(image_forward_trace(features[j], &params.image)?);
    }
    let a = |j: usize| audio[j].0.values();
    let v = |j: usize| image[j].0.values();
    let mut scores = MinibatchScores::default();
    for (j, &(imp_image, imp_caption)) in impostors.iter().enumerate() {
        scores.positive.push(dot(a(j), v(j)));
        scores.impostor_caption.push(dot(v(j), a(imp_caption)));
        scores.impostor_image.push(dot(a(j), v(imp_image)));
    }
    let (loss, sg) = ranking_loss_with_grad(&scores, margin)?;

    let dim = params.embedding_dim();
    let mut ga = vec![vec![0.0; dim]; b];
    let mut gv = vec![vec![0.0; dim]; b];
    let axpy = |dst: &mut [f64], w: f64, src: &[f64]| {
        if w != 0.0 {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
        }
    };
    for (j, &(imp_image, imp_caption)) in impostors.iter().enumerate() {
        axpy(&mut ga[j], sg.positive[j], v(j));
        axpy(&mut gv[j], sg.positive[j], a(j));
        axpy(&mut gv[j], sg.impostor_caption[j], a(imp_caption));
        axpy(&mut ga[imp_caption], sg.impostor_caption[j], v(j));
        axpy(&mut ga[j], sg.impostor_image[j], v(imp_image));
        axpy(&mut gv[imp_image], sg.impostor_image[j], a(j));
    }
    let mut grads = params.zeros_like();
    for j in 0..b {
        if ga[j].iter().any(|&x| x != 0.0) {
            audio_backward(&params.audio, &audio[j].1, &ga[j], &mut grads.audio);
        }
        if gv[j].iter().any(|&x| x != 0.0) {
            image_backward(&image[j].1, &gv[j], &mut grads.image);
        }
    }
    Ok((loss, grads))
}

/// Momentum SGD state: `v <- momentum * v - lr * g; p <- p + v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &NetworkParams, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: params.views().iter().map(|v| vec![0.0; v.data.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut NetworkParams, grads: &NetworkParams, lr: f64) -> Result<()> {
        let gviews = grads.views();
        let buffers = params.buffers_mut();
        if gviews.len() != buffers.len() || buffers.len() != self.velocity.len() {
            return Err(Error::Shape("gradient and parameter lists differ".into()));
        }
        for ((p, g), v) in buffers.into_iter().zip(&gviews).zip(&mut self.velocity) {
            if p.len() != g.data.len() || p.len() != v.len() {
                return Err(Error::Shape(format!("tensor {} differs in size", g.name)));
            }
            for ((pi, gi), vi) in p.iter_mut().zip(g.data).zip(v.iter_mut()) {
                *vi = self.momentum * *vi - lr * gi;
                *pi += *vi;
            }
        }
        Ok(())
    }
}

/// Scale `grads` down to global L2 norm `max_norm` if it is larger.
pub fn clip_gradient(grads: &mut NetworkParams, max_norm: f64) -> f64 {
    let norm = grads.views().iter().flat_map(|v| v.data.iter()).map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for b in grads.buffers_mut() {
            b.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// Training inputs: raw caption spectrograms and raw image features.
#[derive(Debug, Clone, Default)]
pub struct TrainingSet {
    pub captions: Vec<Spectrogram>,
    pub features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub image_mean: Vec<f64>,
    pub history: Vec<EpochStats>,
}

pub fn feature_mean(features: &[Vec<f64>]) -> Vec<f64> {
    let dim = features.first().map_or(0, |f| f.len());
    let mut mean = vec![0.0; dim];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, x)| *m += x);
    }
    let n = features.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

pub fn subtract_mean(features: &[f64], mean: &[f64]) -> Vec<f64> {
    features.iter().zip(mean).map(|(x, m)| x - m).collect()
}

/// Caption preprocessing shared by training and retrieval: scalar mean
/// normalization, then padding or truncation.
pub fn prepare_caption(spec: &Spectrogram, frames: usize) -> Spectrogram {
    pad_or_truncate(&mean_normalize(spec), frames)
}

/// Train both branches. `on_epoch` runs after every epoch (for checkpoints).
pub fn train<F>(data: &TrainingSet, audio: AudioConfig, config: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochStats, &NetworkParams) -> Result<()>,
{
    config.validate()?;
    let n = data.captions.len();
    if n == 0 || data.features.len() != n {
        return Err(Error::CorruptManifest(format!(
            "{} captions but {} image features",
            n,
            data.features.len()
        )));
    }
    let feature_dim = data.features[0].len();
    if let Some(f) = data.features.iter().find(|f| f.len() != feature_dim) {
        return Err(Error::FeatureDimension {
            expected: feature_dim,
            got: f.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = NetworkParams::init(audio, feature_dim, &mut rng)?;
    let image_mean = feature_mean(&data.features);
    let features: Vec<Vec<f64>> = data.features.iter().map(|f| subtract_mean(f, &image_mean)).collect();
    let captions: Vec<Spectrogram> = data
        .captions
        .iter()
        .map(|c| prepare_caption(c, config.caption_frames))
        .collect();

    let mut sgd = Sgd::new(&params, config.momentum);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        let mut dropped = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let mut caps: Vec<&Spectrogram> = chunk.iter().map(|&i| &captions[i]).collect();
            let mut feats: Vec<&[f64]> = chunk.iter().map(|&i| features[i].as_slice()).collect();
            let impostors = sample_impostors(chunk.len(), &mut rng)?;
            let (loss, mut grads) = match minibatch_objective(&params, &caps, &feats, &impostors, config.margin) {
                Err(Error::DegenerateEmbedding(_)) => {
                    // Drop the dead pairs from this batch and go on; they get no gradient either way.
                    let live: Vec<usize> = (0..chunk.len())
                        .filter(|&j| {
                            audio_forward(caps[j], &params.audio).is_ok() && image_forward(feats[j], &params.image).is_ok()
                        })
                        .collect();
                    dropped += chunk.len() - live.len();
                    if live.len() < 2 {
                        continue;
                    }
                    caps = live.iter().map(|&j| caps[j]).collect();
                    feats = live.iter().map(|&j| feats[j]).collect();
                    let impostors = sample_impostors(live.len(), &mut rng)?;
                    minibatch_objective(&params, &caps, &feats, &impostors, config.margin)?
                }
                other => other?,
            };
            clip_gradient(&mut grads, config.clip_norm);
            if log::log_enabled!(log::Level::Debug) {
                let norms: Vec<String> = grads
                    .views()
                    .iter()
                    .map(|v| format!("{}={:.3e}", v.name, v.data.iter().map(|g| g * g).sum::<f64>().sqrt()))
                    .collect();
                log::debug!("epoch {} batch {batches} loss {loss:.3} grad norms {}", epoch + 1, norms.join(" "));
            }
            sgd.step(&mut params, &grads, lr)?;
            total += loss;
            batches += 1;
        }
        if dropped > 0 {
            log::warn!("epoch {}: {dropped} pairs skipped with a degenerate embedding", epoch + 1);
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: total / batches.max(1) as f64,
            learning_rate: lr,
        };
        log::info!("epoch {} mean loss {:.4} lr {:e}", stats.epoch, stats.mean_loss, lr);
        on_epoch(&stats, &params)?;
        history.push(stats);
    }
    Ok(TrainOutcome {
        params,
        image_mean,
        history,
    })
}
