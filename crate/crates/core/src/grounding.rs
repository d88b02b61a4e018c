//! Crop/segment proposal search for a single image-caption pair.
//!
//! Image crops are boxes on a regular grid, filtered by minimum size and
//! aspect ratio. Audio segments are frame intervals on a fixed step. Every
//! crop is scored against every segment and a greedy scan picks a small set
//! of non-overlapping, mostly-speech segments with their best crops.

use serde::{Deserialize, Serialize};

use crate::dsp::{silence_fraction, VadMask};
use crate::error::{Error, Result};
use crate::net::{dot, Embedding};
use crate::ratio::Ratio;
use crate::span::Span;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridConfig {
    pub cells: u32,
    pub min_width: Ratio,
    pub min_height: Ratio,
    pub aspect_min: Ratio,
    pub aspect_max: Ratio,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            cells: 10,
            min_width: Ratio::new(3, 10),
            min_height: Ratio::new(3, 10),
            aspect_min: Ratio::new(2, 3),
            aspect_max: Ratio::new(3, 2),
        }
    }
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }

    pub fn intersection_area(&self, other: &PixelBox) -> u64 {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w as u64 * h as u64
    }
}

/// A grid-aligned crop; `cells` is `(x1, y1, x2, y2)` in grid units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropProposal {
    pub cells: [u32; 4],
    pub pixels: PixelBox,
}

fn grid_line(i: u32, cells: u32, extent: u32) -> u32 {
    (i as u64 * extent as u64 / cells as u64) as u32
}

/// All grid boxes satisfying the size and aspect constraints, ordered
/// lexicographically by `(x1, y1, x2, y2)`.
///
/// Constraints are evaluated on exact cell geometry (`cells × extent/cells`),
/// so a box's aspect ratio is `wc·W / (hc·H)`. Pixel boxes floor the grid
/// lines.
pub fn enumerate_image_proposals(width: u32, height: u32, grid: &GridConfig) -> Result<Vec<CropProposal>> {
    if width < grid.cells || height < grid.cells || grid.cells == 0 {
        return Err(Error::DegenerateImage { width, height });
    }
    let n = grid.cells;
    let fits = |wc: u32, hc: u32| {
        grid.min_width.le_frac(wc as u64, n as u64)
            && grid.min_height.le_frac(hc as u64, n as u64)
            && grid.aspect_min.le_frac(wc as u64 * width as u64, hc as u64 * height as u64)
            && grid.aspect_max.ge_frac(wc as u64 * width as u64, hc as u64 * height as u64)
    };
    let mut out = Vec::new();
    for x1 in 0..n {
        for y1 in 0..n {
            for x2 in x1 + 1..=n {
                for y2 in y1 + 1..=n {
                    if fits(x2 - x1, y2 - y1) {
                        out.push(CropProposal {
                            cells: [x1, y1, x2, y2],
                            pixels: PixelBox {
                                x0: grid_line(x1, n, width),
                                y0: grid_line(y1, n, height),
                                x1: grid_line(x2, n, width),
                                y1: grid_line(y2, n, height),
                            },
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentConfig {
    pub step: usize,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            step: 10,
            min_frames: 50,
            max_frames: 100,
        }
    }
}

/// Every `[start, end)` on the step grid with a length in
/// `[min_frames, max_frames]` that fits in `frames`.
pub fn enumerate_audio_proposals(frames: usize, cfg: &SegmentConfig) -> Vec<Span> {
    let step = cfg.step.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start + cfg.min_frames <= frames {
        let mut end = start + step;
        while end <= frames && end - start <= cfg.max_frames {
            if end - start >= cfg.min_frames {
                out.push(Span::new(start, end));
            }
            end += step;
        }
        start += step;
    }
    out
}

pub fn interval_iou(a: Span, b: Span) -> Result<f64> {
    a.iou(&b)
}

/// One scored crop/segment combination. `crop` and `segment` index the
/// proposal lists the scores were computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub crop: usize,
    pub segment: usize,
    pub span: Span,
    pub score: f64,
}

/// Inner product of every crop embedding with every segment embedding,
/// crop-major.
pub fn score_pair(crops: &[Embedding], segments: &[Embedding], spans: &[Span]) -> Result<Vec<Candidate>> {
    if segments.len() != spans.len() {
        return Err(Error::Shape(format!(
            "{} segment embeddings for {} spans",
            segments.len(),
            spans.len()
        )));
    }
    let mut out = Vec::with_capacity(crops.len() * segments.len());
    for (ci, c) in crops.iter().enumerate() {
        for (si, s) in segments.iter().enumerate() {
            if c.dim() != s.dim() {
                return Err(Error::Dimension(format!("crop {} vs segment {}", c.dim(), s.dim())));
            }
            out.push(Candidate {
                crop: ci,
                segment: si,
                span: spans[si],
                score: dot(c.values(), s.values()),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectConfig {
    pub max_keep: usize,
    pub max_silence: f64,
    pub max_iou: f64,
    pub stop_ratio: f64,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            max_keep: 10,
            max_silence: 0.4,
            max_iou: 0.1,
            stop_ratio: 0.5,
        }
    }
}

/// Descending score, then segment start, crop index, segment end.
pub fn candidate_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.span.start.cmp(&b.span.start))
        .then(a.crop.cmp(&b.crop))
        .then(a.span.end.cmp(&b.span.end))
}

/// Greedy keep-list selection.
///
/// Walking candidates best first: skip any whose segment is at least
/// `max_silence` silent or overlaps an accepted segment with IOU above
/// `max_iou`; stop at `max_keep` entries or at the first surviving candidate
/// scoring below `stop_ratio` times the first accepted score. A non-positive
/// score also stops the scan, since the ratio rule has no meaning there.
pub fn select_groundings(candidates: &[Candidate], vad: &VadMask, cfg: &SelectConfig) -> Result<Vec<Candidate>> {
    if let Some(i) = candidates.iter().position(|c| !c.score.is_finite()) {
        return Err(Error::InvalidScore(i));
    }
    // Only the best crop of a segment can be accepted: later candidates on
    // the same segment have IOU 1 with it or share its silence fraction.
    let mut best: std::collections::HashMap<Span, Candidate> = std::collections::HashMap::new();
    for c in candidates {
        best.entry(c.span)
            .and_modify(|b| {
                if candidate_order(c, b).is_lt() {
                    *b = *c;
                }
            })
            .or_insert(*c);
    }
    let mut pool: Vec<Candidate> = best.into_values().collect();
    pool.sort_by(candidate_order);

    let mut keep: Vec<Candidate> = Vec::new();
    for c in pool {
        if keep.len() >= cfg.max_keep {
            break;
        }
        if silence_fraction(c.span, vad)? >= cfg.max_silence {
            continue;
        }
        let mut overlaps = false;
        for k in &keep {
            if c.span.iou(&k.span)? > cfg.max_iou {
                overlaps = true;
                break;
            }
        }
        if overlaps {
            continue;
        }
        let stop = match keep.first() {
            Some(top) => c.score < cfg.stop_ratio * top.score,
            None => false,
        };
        if stop || c.score <= 0.0 {
            break;
        }
        keep.push(c);
    }
    Ok(keep)
}

/// Checks every keep-list invariant; returns a description of the first
/// violation.
pub fn keep_list_violation(keep: &[Candidate], vad: &VadMask, cfg: &SelectConfig) -> Option<String> {
    if keep.len() > cfg.max_keep {
        return Some(format!("{} entries", keep.len()));
    }
    for w in keep.windows(2) {
        if w[1].score > w[0].score {
            return Some("scores increase".into());
        }
    }
    for (i, a) in keep.iter().enumerate() {
        match silence_fraction(a.span, vad) {
            Ok(f) if f < cfg.max_silence => {}
            _ => return Some(format!("entry {i} is too silent")),
        }
        for b in &keep[i + 1..] {
            if a.span.iou(&b.span).map_or(true, |v| v > cfg.max_iou) {
                return Some(format!("entry {i} overlaps"));
            }
        }
    }
    if let (Some(first), Some(last)) = (keep.first(), keep.last()) {
        if last.score < cfg.stop_ratio * first.score {
            return Some("last score below stop ratio".into());
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Modality;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent count: relative size via integer cross-multiplication
    /// written out longhand, positions counted by arithmetic.
    fn brute_force_count(w: u64, h: u64) -> usize {
        let mut n = 0;
        for wc in 1..=10u64 {
            for hc in 1..=10u64 {
                let wide_enough = 10 * wc >= 3 * 10;
                let tall_enough = 10 * hc >= 3 * 10;
                let (pw, ph) = (wc * w, hc * h);
                let aspect_ok = 3 * pw >= 2 * ph && 2 * pw <= 3 * ph;
                if wide_enough && tall_enough && aspect_ok {
                    n += ((11 - wc) * (11 - hc)) as usize;
                }
            }
        }
        n
    }

    fn brute_force_segments(t: usize) -> usize {
        let mut n = 0;
        for s in (0..=t).step_by(10) {
            for e in (0..=t).step_by(10) {
                if e > s && (50..=100).contains(&(e - s)) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn square_image_count() {
        let p = enumerate_image_proposals(500, 500, &GridConfig::default()).unwrap();
        assert_eq!(p.len(), 738);
        assert_eq!(brute_force_count(500, 500), 738);
    }

    #[test]
    fn full_size_minimum_keeps_only_whole_image() {
        let grid = GridConfig {
            min_width: Ratio::new(1, 1),
            min_height: Ratio::new(1, 1),
            ..GridConfig::default()
        };
        let p = enumerate_image_proposals(500, 500, &grid).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].cells, [0, 0, 10, 10]);
        assert_eq!(p[0].pixels, PixelBox { x0: 0, y0: 0, x1: 500, y1: 500 });
    }

    #[test]
    fn wide_image_aspect_uses_pixels() {
        let p = enumerate_image_proposals(300, 100, &GridConfig::default()).unwrap();
        assert!(p.iter().any(|c| c.cells == [0, 0, 3, 10]));
        assert!(!p.iter().any(|c| c.cells == [0, 0, 10, 3]));
    }

    #[test]
    fn approximate_aspect_bound_loses_boxes() {
        // 0.6667 sits just above 2/3 and drops every exact 2:3 box.
        let grid = GridConfig {
            aspect_min: "0.6667".parse().unwrap(),
            ..GridConfig::default()
        };
        assert_eq!(enumerate_image_proposals(500, 500, &grid).unwrap().len(), 693);
    }

    #[test]
    fn degenerate_image() {
        assert!(matches!(
            enumerate_image_proposals(9, 100, &GridConfig::default()),
            Err(Error::DegenerateImage { .. })
        ));
    }

    #[test]
    fn audio_counts() {
        let cfg = SegmentConfig::default();
        assert_eq!(enumerate_audio_proposals(50, &cfg), vec![Span::new(0, 50)]);
        assert_eq!(enumerate_audio_proposals(200, &cfg).len(), 81);
        assert_eq!(enumerate_audio_proposals(150, &cfg).len(), 51);
        assert!(enumerate_audio_proposals(49, &cfg).is_empty());
    }

    #[test]
    fn pixel_boxes_floor_grid_lines() {
        let p = enumerate_image_proposals(105, 105, &GridConfig::default()).unwrap();
        let c = p.iter().find(|c| c.cells == [1, 1, 4, 4]).unwrap();
        assert_eq!(c.pixels, PixelBox { x0: 10, y0: 10, x1: 42, y1: 42 });
    }

    fn unit(v: Vec<f64>) -> Embedding {
        Embedding::normalize(v, Modality::Image).unwrap().0
    }

    #[test]
    fn scores_are_inner_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let crops: Vec<Embedding> = (0..3).map(|_| unit((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        let segs: Vec<Embedding> = (0..4).map(|_| unit((0..8).map(|_| rng.gen_range(-1.0..1.0)).collect())).collect();
        let spans: Vec<Span> = (0..4).map(|i| Span::new(i * 10, i * 10 + 50)).collect();
        let g = score_pair(&crops, &segs, &spans).unwrap();
        assert_eq!(g.len(), 12);
        let mut k = 0;
        for (ci, c) in crops.iter().enumerate() {
            for (si, s) in segs.iter().enumerate() {
                let mut acc = 0.0;
                for d in 0..8 {
                    acc += c.values()[d] * s.values()[d];
                }
                assert_eq!((g[k].crop, g[k].segment), (ci, si));
                assert_eq!(g[k].score, acc);
                k += 1;
            }
        }
        let same = score_pair(&crops[..1], &crops[..1], &spans[..1]).unwrap();
        assert!((same[0].score - 1.0).abs() < 1e-12);
    }

    fn cand(s: usize, e: usize, score: f64) -> Candidate {
        Candidate {
            crop: 0,
            segment: 0,
            span: Span::new(s, e),
            score,
        }
    }

    fn speech(t: usize) -> VadMask {
        VadMask { flags: vec![true; t] }
    }

    #[test]
    fn selection_fixtures() {
        let cfg = SelectConfig::default();
        let vad = speech(300);
        let one = select_groundings(&[cand(0, 60, 0.7)], &vad, &cfg).unwrap();
        assert_eq!(one.len(), 1);

        let dup = [cand(0, 60, 0.7), cand(0, 60, 0.6)];
        let k = select_groundings(&dup, &vad, &cfg).unwrap();
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].score, 0.7);

        let c = [cand(0, 60, 1.0), cand(0, 50, 0.9), cand(100, 160, 0.8), cand(200, 260, 0.45)];
        let k = select_groundings(&c, &vad, &cfg).unwrap();
        let spans: Vec<Span> = k.iter().map(|c| c.span).collect();
        assert_eq!(spans, vec![Span::new(0, 60), Span::new(100, 160)]);
        assert!(select_groundings(&[], &vad, &cfg).unwrap().is_empty());
    }

    #[test]
    fn silent_candidates_do_not_set_the_top_score() {
        let mut flags = vec![true; 300];
        flags[0..30].iter_mut().for_each(|f| *f = false);
        let vad = VadMask { flags };
        let c = [cand(0, 60, 1.0), cand(100, 160, 0.45), cand(200, 260, 0.2)];
        let k = select_groundings(&c, &vad, &SelectConfig::default()).unwrap();
        let spans: Vec<Span> = k.iter().map(|c| c.span).collect();
        assert_eq!(spans, vec![Span::new(100, 160)]);
    }

    #[test]
    fn exactly_forty_percent_silence_is_discarded() {
        let mut flags = vec![true; 100];
        flags[0..20].iter_mut().for_each(|f| *f = false);
        let vad = VadMask { flags };
        let k = select_groundings(&[cand(0, 50, 0.9)], &vad, &SelectConfig::default()).unwrap();
        assert!(k.is_empty());
    }

    #[test]
    fn nan_score_is_rejected() {
        let r = select_groundings(&[cand(0, 50, 0.9), cand(0, 60, f64::NAN)], &speech(100), &SelectConfig::default());
        assert!(matches!(r, Err(Error::InvalidScore(1))));
    }

    proptest! {
        #[test]
        fn image_counts_match_brute_force(w in 10u32..2000, h in 10u32..2000) {
            let p = enumerate_image_proposals(w, h, &GridConfig::default()).unwrap();
            prop_assert_eq!(p.len(), brute_force_count(w as u64, h as u64));
            let set: std::collections::HashSet<_> = p.iter().map(|c| c.cells).collect();
            prop_assert_eq!(set.len(), p.len());
            for c in &p {
                let [x1, y1, x2, y2] = c.cells;
                prop_assert!(x1 < x2 && x2 <= 10 && y1 < y2 && y2 <= 10);
                prop_assert!(c.pixels.x1 <= w && c.pixels.y1 <= h);
            }
            prop_assert!(p.windows(2).all(|w| w[0].cells < w[1].cells));
        }

        #[test]
        fn audio_counts_match_brute_force(t in 0usize..3000) {
            let p = enumerate_audio_proposals(t, &SegmentConfig::default());
            prop_assert_eq!(p.len(), brute_force_segments(t));
            for s in &p {
                prop_assert!(s.start % 10 == 0 && s.end % 10 == 0 && s.end <= t);
                prop_assert!((50..=100).contains(&s.len()));
            }
            prop_assert!(p.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
