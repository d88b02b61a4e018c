//! Straight-line reference implementations used as oracles, plus random
//! instance generators for them.

use avlex::cluster::{ClusterModel, Link};
use avlex::dsp::VadMask;
use avlex::grounding::{Candidate, SelectConfig};
use avlex::span::Span;
use rand::Rng;

fn silent_fraction(span: Span, vad: &VadMask) -> f64 {
    let mut silent = 0;
    for t in span.start..span.end {
        if !vad.flags[t] {
            silent += 1;
        }
    }
    silent as f64 / (span.end - span.start) as f64
}

fn iou(a: Span, b: Span) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    let inter = hi.saturating_sub(lo);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    inter as f64 / union as f64
}

fn before(a: &Candidate, b: &Candidate) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    (a.span.start, a.crop, a.span.end) < (b.span.start, b.crop, b.span.end)
}

/// Greedy selection over every candidate, without the per-segment reduction
/// the library performs first.
pub fn select_reference(cands: &[Candidate], vad: &VadMask, cfg: &SelectConfig) -> Vec<Candidate> {
    let mut sorted = cands.to_vec();
    // insertion sort keeps this independent of the library's comparator
    for i in 1..sorted.len() {
        let mut j = i;
        while j > 0 && before(&sorted[j], &sorted[j - 1]) {
            sorted.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut keep: Vec<Candidate> = Vec::new();
    for c in sorted {
        if keep.len() == cfg.max_keep {
            break;
        }
        if silent_fraction(c.span, vad) >= cfg.max_silence {
            continue;
        }
        if keep.iter().any(|k| iou(k.span, c.span) > cfg.max_iou) {
            continue;
        }
        if c.score <= 0.0 {
            break;
        }
        if !keep.is_empty() && c.score < cfg.stop_ratio * keep[0].score {
            break;
        }
        keep.push(c);
    }
    keep
}

/// A random grounding problem: sliding-window spans over a random-length
/// utterance, a random speech mask, and scores with deliberate ties and
/// negative values.
pub fn random_selection_case<R: Rng>(rng: &mut R) -> (Vec<Candidate>, VadMask) {
    let frames = rng.gen_range(50..400);
    let mut flags = Vec::with_capacity(frames);
    let mut speech = rng.gen_bool(0.5);
    while flags.len() < frames {
        let run = rng.gen_range(5..60);
        for _ in 0..run.min(frames - flags.len()) {
            flags.push(speech);
        }
        speech = !speech;
    }
    let mut spans = Vec::new();
    for len in (50..=100).step_by(10) {
        let mut s = 0;
        while s + len <= frames {
            spans.push(Span::new(s, s + len));
            s += 10;
        }
    }
    let crops = rng.gen_range(1..12);
    let coarse = rng.gen_bool(0.5);
    let mut cands = Vec::new();
    for crop in 0..crops {
        for (segment, &span) in spans.iter().enumerate() {
            let raw: f64 = rng.gen_range(-0.3..1.0);
            let score = if coarse { (raw * 10.0).round() / 10.0 } else { raw };
            cands.push(Candidate {
                crop,
                segment,
                span,
                score,
            });
        }
    }
    (cands, VadMask { flags })
}

/// The affinity table as the literal double sum over cluster pairs with an
/// indicator on each link.
pub fn affinity_reference(
    links: &[Link],
    image_vectors: &[Vec<f64>],
    audio_vectors: &[Vec<f64>],
    image_model: &ClusterModel,
    audio_model: &ClusterModel,
) -> Vec<Vec<f64>> {
    let mut table = Vec::new();
    for big_i in 0..image_model.k() {
        let mut row = Vec::new();
        for big_a in 0..audio_model.k() {
            let mut total = 0.0;
            for l in links {
                let indicator =
                    image_model.assignments[l.image] == big_i && audio_model.assignments[l.audio] == big_a;
                let mut d = 0.0;
                for (x, y) in image_vectors[l.image].iter().zip(&audio_vectors[l.audio]) {
                    d += x * y;
                }
                total += if indicator { 1.0 } else { 0.0 } * d;
            }
            row.push(total);
        }
        table.push(row);
    }
    table
}
