//! Finite-difference gradient oracle with an independent reference forward.
//!
//! The reference forward is written from scratch (naive loops) so it shares
//! no code with the library's forward or backward. It can record the
//! piecewise-linear pattern at a base point (ReLU masks, max-pool winners,
//! active hinges) and later evaluate the loss with that pattern frozen. The
//! frozen function equals the true loss on the pattern's region and is smooth
//! across kinks, so central differences of it are a valid oracle for every
//! parameter even when a unit sits within one step of a kink.

use avlex::dsp::Spectrogram;
use avlex::net::{AudioConfig, LayerSpec, NetworkParams};
use avlex::train::{minibatch_objective, sample_impostors};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub params: NetworkParams,
    pub captions: Vec<Spectrogram>,
    pub features: Vec<Vec<f64>>,
    pub impostors: Vec<(usize, usize)>,
}

/// 8 mel bands, two convolutions, a pool, 64-d embedding; batch of 4.
pub fn reduced_fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AudioConfig::reduced(8, 8, 3, 64);
    let mut params = NetworkParams::init(cfg, 16, &mut rng).unwrap();
    for c in &mut params.audio.convs {
        c.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    }
    params.image.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.1..0.1));
    let batch = 4;
    let captions = (0..batch)
        .map(|i| {
            let t = 12 + 3 * i;
            let vals = (0..t * 8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
            Spectrogram::from_values(t, 8, vals, format!("c{i}")).unwrap()
        })
        .collect();
    let features = (0..batch)
        .map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let impostors = sample_impostors(batch, &mut rng).unwrap();
    Fixture {
        params,
        captions,
        features,
        impostors,
    }
}

#[derive(Default, Clone, PartialEq)]
pub struct Pattern {
    relu: Vec<bool>,
    pool: Vec<usize>,
    hinge: Vec<bool>,
}

struct Cursor<'a> {
    frozen: Option<&'a Pattern>,
    record: Pattern,
    relu_i: usize,
    pool_i: usize,
    hinge_i: usize,
}

impl Cursor<'_> {
    fn relu(&mut self, pre: f64) -> f64 {
        let on = match self.frozen {
            Some(p) => p.relu[self.relu_i],
            None => pre > 0.0,
        };
        self.relu_i += 1;
        self.record.relu.push(pre > 0.0);
        if on {
            pre
        } else {
            0.0
        }
    }

    fn pool(&mut self, window: &[f64]) -> f64 {
        let mut best = 0;
        for (i, &v) in window.iter().enumerate() {
            if v > window[best] {
                best = i;
            }
        }
        let pick = match self.frozen {
            Some(p) => p.pool[self.pool_i],
            None => best,
        };
        self.pool_i += 1;
        self.record.pool.push(best);
        window[pick]
    }

    fn hinge(&mut self, x: f64) -> f64 {
        let on = match self.frozen {
            Some(p) => p.hinge[self.hinge_i],
            None => x > 0.0,
        };
        self.hinge_i += 1;
        self.record.hinge.push(x > 0.0);
        if on {
            x
        } else {
            0.0
        }
    }
}

fn l2(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn reference_audio(spec: &Spectrogram, params: &NetworkParams, cur: &mut Cursor) -> Vec<f64> {
    let t0 = spec.frames();
    // x[c][t]
    let mut x: Vec<Vec<f64>> = (0..spec.bands())
        .map(|b| (0..t0).map(|t| spec.get(t, b) as f64).collect())
        .collect();
    let mut conv = 0;
    for layer in &params.audio.config.layers {
        match *layer {
            LayerSpec::Conv { .. } => {
                let l = &params.audio.convs[conv];
                conv += 1;
                let t = x[0].len();
                let pad = (l.width - 1) / 2;
                let mut y = vec![vec![0.0; t]; l.out_ch];
                for o in 0..l.out_ch {
                    for tt in 0..t {
                        let mut s = l.bias[o];
                        for c in 0..l.in_ch {
                            for k in 0..l.width {
                                let src = tt as isize + k as isize - pad as isize;
                                if src >= 0 && (src as usize) < t {
                                    s += l.weight[(o * l.in_ch + c) * l.width + k] * x[c][src as usize];
                                }
                            }
                        }
                        y[o][tt] = cur.relu(s);
                    }
                }
                x = y;
            }
            LayerSpec::MaxPool { width, stride } => {
                let t = x[0].len();
                let out_w = (t - width) / stride + 1;
                x = x
                    .iter()
                    .map(|row| (0..out_w).map(|j| cur.pool(&row[j * stride..j * stride + width])).collect())
                    .collect();
            }
        }
    }
    l2(x.iter().map(|row| row.iter().sum::<f64>() / row.len() as f64).collect())
}

fn reference_image(features: &[f64], params: &NetworkParams) -> Vec<f64> {
    let p = &params.image;
    l2((0..p.output_dim)
        .map(|o| p.bias[o] + (0..p.input_dim).map(|i| p.weight[o * p.input_dim + i] * features[i]).sum::<f64>())
        .collect())
}

/// Reference loss; returns the loss and the pattern observed at this point.
pub fn reference_loss(f: &Fixture, params: &NetworkParams, frozen: Option<&Pattern>) -> (f64, Pattern) {
    let mut cur = Cursor {
        frozen,
        record: Pattern::default(),
        relu_i: 0,
        pool_i: 0,
        hinge_i: 0,
    };
    let a: Vec<Vec<f64>> = f.captions.iter().map(|c| reference_audio(c, params, &mut cur)).collect();
    let v: Vec<Vec<f64>> = f.features.iter().map(|x| reference_image(x, params)).collect();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let mut loss = 0.0;
    for (j, &(imp_image, imp_caption)) in f.impostors.iter().enumerate() {
        let sp = dot(&a[j], &v[j]);
        let sc = dot(&v[j], &a[imp_caption]);
        let si = dot(&a[j], &v[imp_image]);
        loss += cur.hinge(sc - sp + 1.0);
        loss += cur.hinge(si - sp + 1.0);
    }
    (loss, cur.record)
}

pub struct CheckReport {
    pub params: usize,
    pub worst_relative_error: f64,
    /// Parameters whose +-h interval crosses a kink of the true loss.
    pub kink_straddling: usize,
    pub library_loss_matches_reference: bool,
}

/// Compare the library's analytic gradient with central differences of the
/// pattern-frozen reference loss at step `h`, for every parameter.
pub fn check(f: &Fixture, h: f64) -> CheckReport {
    let caps: Vec<&Spectrogram> = f.captions.iter().collect();
    let feats: Vec<&[f64]> = f.features.iter().map(|v| v.as_slice()).collect();
    let (lib_loss, grads) = minibatch_objective(&f.params, &caps, &feats, &f.impostors, 1.0).unwrap();
    let analytic: Vec<f64> = grads.views().iter().flat_map(|v| v.data.to_vec()).collect();
    let (ref_loss, base) = reference_loss(f, &f.params, None);

    let mut p = f.params.clone();
    let mut worst = 0.0f64;
    let mut straddling = 0;
    let mut k = 0;
    let n_buffers = p.buffers_mut().len();
    for b in 0..n_buffers {
        let len = p.buffers_mut()[b].len();
        for i in 0..len {
            let orig = p.buffers_mut()[b][i];
            p.buffers_mut()[b][i] = orig + h;
            let (up, pat_up) = reference_loss(f, &p, Some(&base));
            p.buffers_mut()[b][i] = orig - h;
            let (down, pat_down) = reference_loss(f, &p, Some(&base));
            p.buffers_mut()[b][i] = orig;
            if pat_up != base || pat_down != base {
                straddling += 1;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            k += 1;
        }
    }
    CheckReport {
        params: k,
        worst_relative_error: worst,
        kink_straddling: straddling,
        library_loss_matches_reference: (lib_loss - ref_loss).abs() <= 1e-12 * ref_loss.abs().max(1.0),
    }
}

