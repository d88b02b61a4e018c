//! Synthetic paired corpora with known ground truth.
//!
//! Every vocabulary word has a fixed spectral template and a 4096-d object
//! prototype. A caption speaks a few distinct words separated by silence, and
//! its image contains exactly those objects at random boxes. The image feature
//! is a background vector plus the prototypes of its objects plus noise; a
//! crop's feature is the background plus the prototypes of the objects with
//! at least half their area inside the crop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::KeyValues;
use crate::data::{
    write_atomic, write_jsonl, CropSource, ImageLayout, ImageRef, LayoutObject, Manifest, PairEntry, Split,
};
use crate::dsp::{Spectrogram, MEL_BANDS};
use crate::error::{Error, Result};
use crate::eval::{AlignedWord, AlignmentTranscript};
use crate::grounding::PixelBox;
use crate::tensor::TensorContainer;

/// Log-energy of silent cells before noise.
pub const SILENCE_LEVEL: f32 = -10.0;
/// Longest template that still fits the default maximum proposal length.
pub const MAX_TEMPLATE_FRAMES: usize = 100;
pub const MIN_GAP_FRAMES: usize = 20;
const FRAME_MS: u64 = 10;

const WORDS: [&str; 24] = [
    "dog", "boat", "tree", "house", "car", "bird", "lake", "chair", "table", "mountain", "bridge", "horse",
    "flower", "train", "beach", "church", "clock", "road", "tower", "window", "field", "river", "plane", "cat",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub vocab: usize,
    pub words_min: usize,
    pub words_max: usize,
    pub template_min: usize,
    pub template_max: usize,
    pub gap_min: usize,
    pub gap_max: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Standard deviation of additive noise on every spectrogram cell.
    pub noise: f64,
    /// Standard deviation of additive noise on every full-image feature.
    pub feature_noise: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub object_min_frac: f64,
    pub object_max_frac: f64,
    pub feature_dim: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab: 10,
            words_min: 1,
            words_max: 3,
            template_min: 50,
            template_max: 80,
            gap_min: 20,
            gap_max: 40,
            train_pairs: 2000,
            test_pairs: 100,
            noise: 0.5,
            feature_noise: 0.5,
            image_width: 500,
            image_height: 500,
            object_min_frac: 0.3,
            object_max_frac: 0.5,
            feature_dim: crate::net::image::FEATURE_DIM,
            seed: 0,
            out_dir: PathBuf::from("corpus"),
        }
    }
}

impl SynthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::read(path)?;
        Self::from_kv(&kv, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_kv(kv: &KeyValues, base: &Path) -> Result<Self> {
        let d = SynthSpec::default();
        let out: String = kv.get("out_dir", "corpus".to_string())?;
        let spec = SynthSpec {
            vocab: kv.get("vocab", d.vocab)?,
            words_min: kv.get("words_min", d.words_min)?,
            words_max: kv.get("words_max", d.words_max)?,
            template_min: kv.get("template_min", d.template_min)?,
            template_max: kv.get("template_max", d.template_max)?,
            gap_min: kv.get("gap_min", d.gap_min)?,
            gap_max: kv.get("gap_max", d.gap_max)?,
            train_pairs: kv.get("train_pairs", d.train_pairs)?,
            test_pairs: kv.get("test_pairs", d.test_pairs)?,
            noise: kv.get("noise", d.noise)?,
            feature_noise: kv.get("feature_noise", d.feature_noise)?,
            image_width: kv.get("image_width", d.image_width)?,
            image_height: kv.get("image_height", d.image_height)?,
            object_min_frac: kv.get("object_min_frac", d.object_min_frac)?,
            object_max_frac: kv.get("object_max_frac", d.object_max_frac)?,
            feature_dim: kv.get("feature_dim", d.feature_dim)?,
            seed: kv.get("seed", d.seed)?,
            out_dir: if Path::new(&out).is_absolute() {
                PathBuf::from(out)
            } else {
                base.join(out)
            },
        };
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.vocab < 2 {
            return bad(format!("vocabulary of {} words; need at least 2", self.vocab));
        }
        if self.words_min == 0 || self.words_min > self.words_max || self.words_max > self.vocab {
            return bad(format!(
                "words per caption {}..={} with {} distinct words",
                self.words_min, self.words_max, self.vocab
            ));
        }
        if self.template_min == 0 || self.template_min > self.template_max {
            return bad("template length range is empty".into());
        }
        if self.template_max > MAX_TEMPLATE_FRAMES {
            return bad(format!(
                "templates up to {} frames cannot fit a {MAX_TEMPLATE_FRAMES}-frame proposal",
                self.template_max
            ));
        }
        if self.gap_min < MIN_GAP_FRAMES || self.gap_min > self.gap_max {
            return bad(format!("silence gaps must be at least {MIN_GAP_FRAMES} frames and non-empty"));
        }
        if !(self.noise >= 0.0 && self.feature_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        let fracs_ok = self.object_min_frac > 0.0
            && self.object_min_frac <= self.object_max_frac
            && self.object_max_frac <= 1.0;
        if !fracs_ok {
            return bad("object size fractions must satisfy 0 < min <= max <= 1".into());
        }
        if self.image_width < 10 || self.image_height < 10 || self.feature_dim == 0 {
            return bad("images must be at least 10x10 with a positive feature dimension".into());
        }
        if self.train_pairs + self.test_pairs == 0 {
            return bad("no pairs requested".into());
        }
        Ok(())
    }
}

pub fn word_name(i: usize) -> String {
    WORDS.get(i).map_or_else(|| format!("word{i}"), |w| w.to_string())
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: Manifest,
    pub spectrograms: Vec<Spectrogram>,
    pub features: Vec<Vec<f32>>,
    pub alignments: Vec<AlignmentTranscript>,
    pub layouts: Vec<ImageLayout>,
    pub prototypes: Vec<Vec<f32>>,
    pub background: Vec<f32>,
    pub templates: Vec<Spectrogram>,
    pub names: Vec<String>,
}

fn template(rng: &mut ChaCha8Rng, frames: usize) -> Vec<f32> {
    // three stationary chunks, each a floor plus two spectral bumps
    let mut out = vec![0.0f32; frames * MEL_BANDS];
    let chunk = frames.div_ceil(3);
    for c in 0..3 {
        let bumps: Vec<(f64, f64, f64)> = (0..2)
            .map(|_| {
                (
                    rng.gen_range(2.0..5.0),
                    rng.gen_range(0.0..MEL_BANDS as f64),
                    rng.gen_range(1.5..5.0),
                )
            })
            .collect();
        for t in c * chunk..((c + 1) * chunk).min(frames) {
            for b in 0..MEL_BANDS {
                let mut v = -1.0;
                for &(amp, centre, width) in &bumps {
                    let z = (b as f64 - centre) / width;
                    v += amp * (-0.5 * z * z).exp();
                }
                out[t * MEL_BANDS + b] = v as f32;
            }
        }
    }
    out
}

pub fn generate(spec: &SynthSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // noise has its own streams so the corpus structure does not depend on
    // the noise levels
    let mut audio_noise = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6175_6469_6f00_0000);
    let mut image_noise = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x696d_6167_6500_0000);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let names: Vec<String> = (0..spec.vocab).map(word_name).collect();

    let templates: Vec<Spectrogram> = (0..spec.vocab)
        .map(|w| {
            let len = rng.gen_range(spec.template_min..=spec.template_max);
            Spectrogram::from_values(len, MEL_BANDS, template(&mut rng, len), names[w].clone())
        })
        .collect::<Result<_>>()?;
    let vector = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..spec.feature_dim).map(|_| std_normal.sample(rng) as f32).collect()
    };
    let prototypes: Vec<Vec<f32>> = (0..spec.vocab).map(|_| vector(&mut rng)).collect();
    let background = vector(&mut rng);

    let total = spec.train_pairs + spec.test_pairs;
    let mut pairs = Vec::with_capacity(total);
    let mut spectrograms = Vec::with_capacity(total);
    let mut features = Vec::with_capacity(total);
    let mut alignments = Vec::with_capacity(total);
    let mut layouts = Vec::with_capacity(total);
    let vocab: Vec<usize> = (0..spec.vocab).collect();
    for i in 0..total {
        let pair_id = format!("p{i:05}");
        let image_id = format!("img{i:05}");
        let n = rng.gen_range(spec.words_min..=spec.words_max);
        let mut words: Vec<usize> = vocab.choose_multiple(&mut rng, n).copied().collect();
        words.shuffle(&mut rng);

        let mut gaps: Vec<usize> = (0..=n).map(|_| rng.gen_range(spec.gap_min..=spec.gap_max)).collect();
        let frames = gaps.iter().sum::<usize>() + words.iter().map(|&w| templates[w].frames()).sum::<usize>();
        let mut values = vec![SILENCE_LEVEL; frames * MEL_BANDS];
        let mut aligned = Vec::with_capacity(n);
        let mut t = gaps.remove(0);
        for (j, &w) in words.iter().enumerate() {
            let tpl = &templates[w];
            values[t * MEL_BANDS..(t + tpl.frames()) * MEL_BANDS].copy_from_slice(tpl.values());
            aligned.push(AlignedWord {
                w: names[w].clone(),
                s_ms: t as u64 * FRAME_MS,
                e_ms: (t + tpl.frames()) as u64 * FRAME_MS,
            });
            t += tpl.frames() + gaps[j];
        }
        if spec.noise > 0.0 {
            for v in &mut values {
                *v += (spec.noise * std_normal.sample(&mut audio_noise)) as f32;
            }
        }
        spectrograms.push(Spectrogram::from_values(frames, MEL_BANDS, values, pair_id.clone())?);
        alignments.push(AlignmentTranscript {
            utt: pair_id.clone(),
            words: aligned,
        });

        let (w, h) = (spec.image_width, spec.image_height);
        let mut objects = Vec::with_capacity(n);
        for &o in &words {
            let bw = ((rng.gen_range(spec.object_min_frac..=spec.object_max_frac) * w as f64).round() as u32).clamp(1, w);
            let bh = ((rng.gen_range(spec.object_min_frac..=spec.object_max_frac) * h as f64).round() as u32).clamp(1, h);
            let x0 = rng.gen_range(0..=w - bw);
            let y0 = rng.gen_range(0..=h - bh);
            objects.push(LayoutObject {
                object: o,
                name: names[o].clone(),
                bbox: PixelBox {
                    x0,
                    y0,
                    x1: x0 + bw,
                    y1: y0 + bh,
                },
            });
        }
        let mut feat = background.clone();
        for &o in &words {
            feat.iter_mut().zip(&prototypes[o]).for_each(|(f, p)| *f += p);
        }
        if spec.feature_noise > 0.0 {
            for f in &mut feat {
                *f += (spec.feature_noise * std_normal.sample(&mut image_noise)) as f32;
            }
        }
        features.push(feat);
        layouts.push(ImageLayout {
            image: image_id.clone(),
            width: w,
            height: h,
            objects,
        });
        pairs.push(PairEntry {
            pair_id: pair_id.clone(),
            split: if i < spec.train_pairs { Split::Train } else { Split::Test },
            wav: None,
            spectrogram: Some(pair_id.clone()),
            image: ImageRef {
                id: image_id,
                row: i,
                width: w,
                height: h,
            },
            alignment: Some(pair_id),
        });
    }

    let manifest = Manifest {
        version: 1,
        features: "features.avtc".into(),
        spectrograms: Some("spectrograms.avtc".into()),
        alignments: Some("alignments.jsonl".into()),
        crop_source: CropSource::Synthetic,
        crop_features: None,
        layout: Some("layout.jsonl".into()),
        prototypes: Some("prototypes.avtc".into()),
        pairs,
    };
    Ok(Corpus {
        manifest,
        spectrograms,
        features,
        alignments,
        layouts,
        prototypes,
        background,
        templates,
        names,
    })
}

/// Crop feature under the half-area rule: background plus the prototypes of
/// the objects counted as inside the crop.
pub fn crop_feature(layout: &ImageLayout, crop: &PixelBox, prototypes: &[Vec<f32>], background: &[f32]) -> Vec<f64> {
    let mut f: Vec<f64> = background.iter().map(|&v| v as f64).collect();
    for o in layout.objects_in(crop) {
        f.iter_mut().zip(&prototypes[o]).for_each(|(a, &p)| *a += p as f64);
    }
    f
}

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut spec_c = TensorContainer::new();
    for s in &corpus.spectrograms {
        spec_c.push(s.utterance_id.clone(), vec![s.frames(), s.bands()], s.values().to_vec())?;
    }
    spec_c.write(dir.join("spectrograms.avtc"))?;

    let dim = corpus.background.len();
    let mut feat_c = TensorContainer::new();
    feat_c.push(
        "images",
        vec![corpus.features.len(), dim],
        corpus.features.iter().flatten().copied().collect(),
    )?;
    feat_c.write(dir.join("features.avtc"))?;

    let mut proto_c = TensorContainer::new();
    proto_c.push(
        "prototypes",
        vec![corpus.prototypes.len(), dim],
        corpus.prototypes.iter().flatten().copied().collect(),
    )?;
    proto_c.push("background", vec![dim], corpus.background.clone())?;
    proto_c.write(dir.join("prototypes.avtc"))?;

    write_jsonl(&dir.join("alignments.jsonl"), &corpus.alignments)?;
    write_jsonl(&dir.join("layout.jsonl"), &corpus.layouts)?;

    // flat two-level taxonomy: each word is its own synset under one of a
    // few groups, so equal words score 1 and siblings 1/3
    let mut edges = String::new();
    let mut senses = String::new();
    for (i, name) in corpus.names.iter().enumerate() {
        edges.push_str(&format!("{name}.n.01\tgroup{}.n.01\n", i % 3));
        senses.push_str(&format!("{name}\t{name}.n.01\n"));
    }
    for g in 0..3.min(corpus.names.len()) {
        edges.push_str(&format!("group{g}.n.01\tentity.n.01\n"));
    }
    write_atomic(&dir.join("taxonomy_edges.tsv"), edges.as_bytes())?;
    write_atomic(&dir.join("taxonomy_senses.tsv"), senses.as_bytes())?;
    corpus.manifest.write(dir)
}
