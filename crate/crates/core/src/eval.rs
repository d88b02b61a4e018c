//! Evaluation against word alignments: segment labels, cluster purity and
//! coverage, retrieval recall, sweep statistics and taxonomy similarity.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::dot;
use crate::span::Span;

pub const SILENCE: &str = "(silence)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedWord {
    pub w: String,
    pub s_ms: u64,
    pub e_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentTranscript {
    pub utt: String,
    pub words: Vec<AlignedWord>,
}

impl AlignmentTranscript {
    /// Words must have positive duration, be time-ordered and not overlap,
    /// and end within `duration_ms` when given.
    pub fn validate(&self, duration_ms: Option<u64>) -> Result<()> {
        let bad = |m: String| Err(Error::CorruptAlignment(format!("{}: {m}", self.utt)));
        let mut prev_end = 0;
        for (i, w) in self.words.iter().enumerate() {
            if w.e_ms <= w.s_ms {
                return bad(format!("word {i} has no duration"));
            }
            if w.s_ms < prev_end {
                return bad(format!("word {i} overlaps its predecessor"));
            }
            if w.w.split_whitespace().count() != 1 {
                return bad(format!("word {i} is not a single token"));
            }
            prev_end = w.e_ms;
        }
        match duration_ms {
            Some(d) if prev_end > d => bad(format!("words end at {prev_end} ms, beyond {d} ms")),
            _ => Ok(()),
        }
    }

    pub fn tokens(&self) -> Vec<&str> {
        self.words.iter().map(|w| w.w.as_str()).collect()
    }
}

pub fn read_alignments(path: &Path) -> Result<Vec<AlignmentTranscript>> {
    let file = std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: AlignmentTranscript = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        t.validate(None)?;
        out.push(t);
    }
    Ok(out)
}

/// Words of a transcript covered by a segment, by transcript index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLabel {
    pub words: Vec<usize>,
    pub tokens: Vec<String>,
}

impl SegmentLabel {
    /// Space-joined tokens, or `(silence)` when no word qualifies.
    pub fn render(&self) -> String {
        if self.tokens.is_empty() {
            SILENCE.to_string()
        } else {
            self.tokens.join(" ")
        }
    }
}

/// Words whose duration the segment overlaps by at least 30%, in order.
/// `frame_ms` converts segment frames to milliseconds.
pub fn segment_label(segment: Span, transcript: &AlignmentTranscript, frame_ms: u64) -> SegmentLabel {
    let s = segment.start as u64 * frame_ms;
    let e = segment.end as u64 * frame_ms;
    let mut label = SegmentLabel {
        words: Vec::new(),
        tokens: Vec::new(),
    };
    for (i, w) in transcript.words.iter().enumerate() {
        let overlap = e.min(w.e_ms).saturating_sub(s.max(w.s_ms));
        let duration = w.e_ms - w.s_ms;
        if duration > 0 && 10 * overlap >= 3 * duration {
            label.words.push(i);
            label.tokens.push(w.w.clone());
        }
    }
    label
}

/// Most frequent label string; ties go to the lexicographically smallest.
pub fn majority_vote_label<S: AsRef<str>>(labels: &[S]) -> Option<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_ref()).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    for (l, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((l, c));
        }
    }
    best.map(|(l, _)| l.to_string())
}

fn contains_run(hay: &[&str], needle: &[&str]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Whether the rendered label contains `cluster_label` as a contiguous run
/// of whole tokens.
pub fn label_matches(member: &str, cluster_label: &str) -> bool {
    let hay: Vec<&str> = member.split_whitespace().collect();
    let needle: Vec<&str> = cluster_label.split_whitespace().collect();
    contains_run(&hay, &needle)
}

pub fn purity<S: AsRef<str>>(members: &[S], cluster_label: &str) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let hits = members.iter().filter(|m| label_matches(m.as_ref(), cluster_label)).count();
    hits as f64 / members.len() as f64
}

/// Start positions of non-overlapping occurrences, scanning left to right.
pub fn occurrences(tokens: &[&str], needle: &[&str]) -> Vec<usize> {
    let mut out = Vec::new();
    if needle.is_empty() {
        return out;
    }
    let mut i = 0;
    while i + needle.len() <= tokens.len() {
        if &tokens[i..i + needle.len()] == needle {
            out.push(i);
            i += needle.len();
        } else {
            i += 1;
        }
    }
    out
}

/// Where a cluster member came from: a transcript and the word indices its
/// segment covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemberWords {
    pub transcript: usize,
    pub words: Vec<usize>,
}

/// Fraction of the corpus occurrences of `cluster_label` covered by some
/// member. `None` for silence clusters and for labels absent from the corpus.
pub fn coverage(members: &[MemberWords], cluster_label: &str, transcripts: &[AlignmentTranscript]) -> Option<f64> {
    if cluster_label == SILENCE {
        return None;
    }
    let needle: Vec<&str> = cluster_label.split_whitespace().collect();
    let mut occ: Vec<(usize, usize)> = Vec::new();
    for (t, tr) in transcripts.iter().enumerate() {
        occ.extend(occurrences(&tr.tokens(), &needle).into_iter().map(|p| (t, p)));
    }
    if occ.is_empty() {
        log::warn!("label '{cluster_label}' never occurs in the corpus; coverage undefined");
        return None;
    }
    let captured = occ
        .iter()
        .filter(|&&(t, p)| {
            members
                .iter()
                .any(|m| m.transcript == t && (p..p + needle.len()).all(|w| m.words.contains(&w)))
        })
        .count();
    Some(captured as f64 / occ.len() as f64)
}

fn is_zero(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// Fraction of queries whose paired target (same index) is among the `k`
/// highest inner products. Equal scores rank the lower target index first.
/// A pair with an all-zero (degenerate) side is a miss.
pub fn recall_at_k(queries: &[Vec<f64>], targets: &[Vec<f64>], k: usize) -> Result<f64> {
    let n = targets.len();
    if queries.len() != n {
        return Err(Error::Shape(format!("{} queries for {n} targets", queries.len())));
    }
    if k == 0 || k > n {
        return Err(Error::RecallCutoff { k, n });
    }
    let mut hits = 0;
    for (i, q) in queries.iter().enumerate() {
        if is_zero(q) || is_zero(&targets[i]) {
            continue;
        }
        let own = dot(q, &targets[i]);
        let mut rank = 0;
        for (j, t) in targets.iter().enumerate() {
            if j == i {
                continue;
            }
            let s = dot(q, t);
            if s > own || (s == own && j < i) {
                rank += 1;
                if rank >= k {
                    break;
                }
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterEval {
    pub cluster: usize,
    pub label: String,
    pub purity: f64,
    pub coverage: Option<f64>,
    pub size: usize,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub clusters: usize,
    pub points: usize,
    /// Member-weighted purity over surviving clusters.
    pub purity: Option<f64>,
    /// Distinct non-silence labels among surviving clusters.
    pub labels: usize,
    /// Mean coverage over surviving clusters that have one.
    pub coverage: Option<f64>,
}

pub fn sweep_stats(k: usize, clusters: &[ClusterEval], threshold: f64) -> SweepRow {
    let kept: Vec<&ClusterEval> = clusters.iter().filter(|c| c.variance < threshold).collect();
    let points: usize = kept.iter().map(|c| c.size).sum();
    let purity = (points > 0).then(|| kept.iter().map(|c| c.purity * c.size as f64).sum::<f64>() / points as f64);
    let mut labels: Vec<&str> = kept.iter().map(|c| c.label.as_str()).filter(|l| *l != SILENCE).collect();
    labels.sort_unstable();
    labels.dedup();
    let covs: Vec<f64> = kept.iter().filter_map(|c| c.coverage).collect();
    let coverage = (!covs.is_empty()).then(|| covs.iter().sum::<f64>() / covs.len() as f64);
    SweepRow {
        k,
        clusters: kept.len(),
        points,
        purity,
        labels: labels.len(),
        coverage,
    }
}

/// `(variance, purity · ln size)` per cluster.
pub fn purity_variance_scatter(clusters: &[ClusterEval]) -> Vec<(f64, f64)> {
    clusters
        .iter()
        .map(|c| (c.variance, c.purity * (c.size.max(1) as f64).ln()))
        .collect()
}

/// Hypernym graph plus a word-to-synset sense map.
#[derive(Debug, Clone, Default)]
pub struct Taxonomy {
    index: HashMap<String, usize>,
    names: Vec<String>,
    parents: Vec<Vec<usize>>,
    neighbours: Vec<Vec<usize>>,
    senses: HashMap<String, Vec<String>>,
}

impl Taxonomy {
    fn node(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.index.insert(name.to_string(), i);
        self.names.push(name.to_string());
        self.parents.push(Vec::new());
        self.neighbours.push(Vec::new());
        i
    }

    /// `edges` holds `child<TAB>parent` lines, `senses` holds
    /// `word<TAB>synset` lines. Blank lines and `#` comments are skipped.
    pub fn parse(edges: &str, senses: &str) -> Result<Self> {
        let mut t = Taxonomy::default();
        let pairs = |text: &str, what: &str| -> Result<Vec<(String, String)>> {
            let mut out = Vec::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.trim_end_matches('\r');
                if line.trim().is_empty() || line.starts_with('#') {
                    continue;
                }
                match line.split_once('\t') {
                    Some((a, b)) if !a.is_empty() && !b.is_empty() && !b.contains('\t') => {
                        out.push((a.to_string(), b.to_string()))
                    }
                    _ => return Err(Error::CorruptTaxonomy(format!("{what} line {}: '{line}'", n + 1))),
                }
            }
            Ok(out)
        };
        for (child, parent) in pairs(edges, "edge")? {
            let c = t.node(&child);
            let p = t.node(&parent);
            t.parents[c].push(p);
            t.neighbours[c].push(p);
            t.neighbours[p].push(c);
        }
        for (word, synset) in pairs(senses, "sense")? {
            t.node(&synset);
            t.senses.entry(word).or_default().push(synset);
        }
        t.check_acyclic()?;
        Ok(t)
    }

    pub fn load(edges: &Path, senses: &Path) -> Result<Self> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => Error::MissingArtifact(p.to_path_buf()),
                _ => Error::io(p, e),
            })
        };
        Self::parse(&read(edges)?, &read(senses)?)
    }

    fn check_acyclic(&self) -> Result<()> {
        // 0 unvisited, 1 on stack, 2 done
        let mut state = vec![0u8; self.names.len()];
        for root in 0..self.names.len() {
            if state[root] != 0 {
                continue;
            }
            let mut stack = vec![(root, 0usize)];
            state[root] = 1;
            while let Some(&mut (v, ref mut next)) = stack.last_mut() {
                if let Some(&p) = self.parents[v].get(*next) {
                    *next += 1;
                    match state[p] {
                        0 => {
                            state[p] = 1;
                            stack.push((p, 0));
                        }
                        1 => return Err(Error::TaxonomyCycle(self.names[p].clone())),
                        _ => {}
                    }
                } else {
                    state[v] = 2;
                    stack.pop();
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, synset: &str) -> bool {
        self.index.contains_key(synset)
    }

    pub fn senses(&self, word: &str) -> &[String] {
        self.senses.get(word).map_or(&[], |v| v.as_slice())
    }

    /// Edges on the shortest undirected path, `None` if disconnected or unknown.
    pub fn distance(&self, a: &str, b: &str) -> Option<usize> {
        let (&s, &t) = (self.index.get(a)?, self.index.get(b)?);
        let mut dist = vec![usize::MAX; self.names.len()];
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            if v == t {
                return Some(dist[v]);
            }
            for &u in &self.neighbours[v] {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        None
    }

    pub fn synset_similarity(&self, a: &str, b: &str) -> f64 {
        self.distance(a, b).map_or(0.0, |d| 1.0 / (1.0 + d as f64))
    }

    /// Best similarity between any sense of `label` and any class synset.
    /// Multi-word labels are looked up with spaces replaced by underscores.
    /// Unknown labels score 0.
    pub fn path_similarity(&self, label: &str, classes: &[String]) -> f64 {
        let key = label.split_whitespace().collect::<Vec<_>>().join("_");
        let mut best = 0.0f64;
        for s in self.senses(&key) {
            for c in classes {
                best = best.max(self.synset_similarity(s, c));
            }
        }
        best
    }
}
