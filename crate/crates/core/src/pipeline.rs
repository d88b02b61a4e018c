//! Pipeline stages. Each stage reads declared upstream artifacts from the
//! work directory (or the dataset directory) and writes its own outputs
//! there, so stages can be rerun independently.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{affinity_table, kmeans, link_clusters, ClusterModel, Link};
use crate::config::{stage_seed, RunConfig, SplitFilter};
use crate::data::{
    fmt_opt, read_csv, read_jsonl, write_atomic, write_csv, write_jsonl, AudioSource, CropSource, FeatureStore,
    ImageLayout, Manifest, PairEntry, Split,
};
use crate::dsp::{compute_vad_with, mean_normalize, silence_fraction};
use crate::error::{Error, Result};
use crate::eval::{
    coverage, majority_vote_label, purity, purity_variance_scatter, recall_at_k, segment_label, sweep_stats,
    AlignmentTranscript, ClusterEval, MemberWords, Taxonomy, SILENCE,
};
use crate::grounding::{
    enumerate_audio_proposals, enumerate_image_proposals, score_pair, select_groundings, CropProposal, PixelBox,
};
use crate::net::{audio_forward, image_forward, AudioConfig, Embedding, NetworkParams};
use crate::span::Span;
use crate::synth::crop_feature;
use crate::tensor::TensorContainer;
use crate::train::{prepare_caption, subtract_mean, train, TrainingSet};

pub const CHECKPOINT: &str = "checkpoint.avtc";
pub const CHECKPOINT_META: &str = "checkpoint.meta.json";
pub const LOSS_HISTORY: &str = "loss_history.csv";
pub const TEST_EMBEDDINGS: &str = "test_embeddings.avtc";
pub const PROPOSALS: &str = "proposals.jsonl";
pub const GROUNDINGS: &str = "groundings.jsonl";
pub const GROUNDING_EMBEDDINGS: &str = "grounding_embeddings.avtc";
pub const AUDIO_CLUSTERS: &str = "audio_clusters.avtc";
pub const IMAGE_CLUSTERS: &str = "image_clusters.avtc";
pub const AUDIO_ASSIGNMENTS: &str = "audio_assignments.jsonl";
pub const IMAGE_ASSIGNMENTS: &str = "image_assignments.jsonl";
pub const SWEEP_ASSIGNMENTS: &str = "sweep_assignments.jsonl";
pub const AFFINITY: &str = "affinity.csv";
pub const LINKAGE: &str = "linkage.csv";
pub const RECALL: &str = "recall.csv";
pub const CLUSTER_STATS: &str = "cluster_stats.csv";
pub const SWEEP: &str = "sweep.csv";
pub const PURITY_VARIANCE: &str = "purity_variance.csv";
pub const WORDS: &str = "words.csv";
pub const SUMMARY: &str = "summary.json";
pub const REPORT: &str = "report.csv";

const FRAME_MS: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Train,
    Embed,
    Propose,
    Ground,
    Cluster,
    Evaluate,
    Report,
}

impl Stage {
    pub const PIPELINE: [Stage; 6] = [
        Stage::Train,
        Stage::Embed,
        Stage::Ground,
        Stage::Cluster,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Train => "train",
            Stage::Embed => "embed",
            Stage::Propose => "propose",
            Stage::Ground => "ground",
            Stage::Cluster => "cluster",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.work_dir).map_err(|e| Error::io(&cfg.work_dir, e))?;
    log::info!("stage {}", stage.name());
    match stage {
        Stage::Train => run_train(cfg),
        Stage::Embed => run_embed(cfg),
        Stage::Propose => run_propose(cfg),
        Stage::Ground => run_ground(cfg),
        Stage::Cluster => run_cluster(cfg),
        Stage::Evaluate => run_evaluate(cfg),
        Stage::Report => run_report(cfg).map(|_| ()),
    }
}

/// Map over `items` on up to `workers` threads, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], workers: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = workers.max(1).min(items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

fn embeddings_tensor(c: &mut TensorContainer, name: &str, dim: usize, rows: &[&Embedding]) -> Result<()> {
    let data: Vec<f32> = rows.iter().flat_map(|e| e.values().iter().map(|&v| v as f32)).collect();
    c.push(name, vec![rows.len(), dim], data)
}

fn matrix(c: &TensorContainer, name: &str) -> Result<Vec<Vec<f64>>> {
    let t = c.require(name)?;
    if t.shape.len() != 2 {
        return Err(Error::Shape(format!("{name} has shape {:?}", t.shape)));
    }
    Ok((0..t.shape[0]).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect())
}

fn require_artifact(cfg: &RunConfig, name: &str) -> Result<std::path::PathBuf> {
    let p = cfg.artifact(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(Error::MissingArtifact(p))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: String,
    pub feature_dim: usize,
    pub embedding_dim: usize,
    pub epochs_completed: usize,
    pub tensors: Vec<TensorMeta>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_checkpoint(cfg: &RunConfig, params: &NetworkParams, image_mean: &[f64], epochs: usize) -> Result<()> {
    let mut c = TensorContainer::new();
    params.write_to(&mut c)?;
    c.push_f64("image_mean", vec![image_mean.len()], image_mean)?;
    let tensors = c
        .tensors()
        .iter()
        .map(|t| {
            let mut h = Sha256::new();
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
            TensorMeta {
                name: t.name.clone(),
                shape: t.shape.clone(),
                sha256: hex(&h.finalize()),
            }
        })
        .collect();
    let meta = CheckpointMeta {
        arch: params.audio.config.to_string(),
        feature_dim: params.image.input_dim,
        embedding_dim: params.embedding_dim(),
        epochs_completed: epochs,
        tensors,
    };
    let path = cfg.artifact(CHECKPOINT);
    write_atomic(&path, &c.to_bytes())?;
    let meta_path = cfg.artifact(CHECKPOINT_META);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&meta_path, e))?;
    write_atomic(&meta_path, format!("{text}\n").as_bytes())
}

pub fn load_checkpoint(cfg: &RunConfig) -> Result<(NetworkParams, Vec<f64>)> {
    let path = require_artifact(cfg, CHECKPOINT)?;
    let meta_path = require_artifact(cfg, CHECKPOINT_META)?;
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
    let arch: AudioConfig = meta.arch.parse()?;
    if arch != cfg.arch {
        return Err(Error::Config(format!(
            "checkpoint was trained with arch '{}', config asks for '{}'",
            meta.arch, cfg.arch
        )));
    }
    let c = TensorContainer::read(&path)?;
    let params = NetworkParams::read_from(&c, arch, meta.feature_dim)?;
    let mean = c.require("image_mean")?.to_f64();
    if mean.len() != meta.feature_dim {
        return Err(Error::Shape(format!("image_mean has {} entries", mean.len())));
    }
    Ok((params, mean))
}

fn split_filter(f: SplitFilter) -> Option<Split> {
    match f {
        SplitFilter::Train => Some(Split::Train),
        SplitFilter::Test => Some(Split::Test),
        SplitFilter::All => None,
    }
}

fn image_features(store: &FeatureStore, pair: &PairEntry) -> Result<Vec<f64>> {
    store
        .image(&pair.image.id)
        .ok_or_else(|| Error::CorruptManifest(format!("no features for image '{}'", pair.image.id)))
}

fn run_train(cfg: &RunConfig) -> Result<()> {
    let manifest = Manifest::load(&cfg.data_dir)?;
    let store = FeatureStore::load(&cfg.data_dir, &manifest, cfg.feature_dim)?;
    let audio = AudioSource::open(&cfg.data_dir, &manifest, cfg.resample)?;
    let pairs = manifest.select(Some(Split::Train));
    if cfg.train.caption_frames < cfg.arch.min_frames || cfg.arch.pooled_widths(cfg.train.caption_frames).is_none() {
        return Err(Error::Config(format!(
            "caption_frames = {} is below the network's minimum input",
            cfg.train.caption_frames
        )));
    }
    let captions = par_map(&pairs, cfg.workers, |p| audio.spectrogram(p)).into_iter().collect::<Result<Vec<_>>>()?;
    let features = pairs.iter().map(|p| image_features(&store, p)).collect::<Result<Vec<_>>>()?;
    let data = TrainingSet { captions, features };
    let mut tc = cfg.train.clone();
    tc.seed = stage_seed(cfg.seed, "train");

    let mean = crate::train::feature_mean(&data.features);
    let mut history = Vec::new();
    let out = train(&data, cfg.arch.clone(), &tc, |stats, params| {
        history.push(stats.clone());
        write_checkpoint(cfg, params, &mean, stats.epoch)
    })?;
    // with zero epochs this writes the freshly initialised network
    write_checkpoint(cfg, &out.params, &out.image_mean, tc.epochs)?;
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|s| vec![s.epoch.to_string(), s.mean_loss.to_string(), s.learning_rate.to_string()])
        .collect();
    write_csv(&cfg.artifact(LOSS_HISTORY), &["epoch", "mean_loss", "lr"], &rows)
}

fn run_embed(cfg: &RunConfig) -> Result<()> {
    let (params, mean) = load_checkpoint(cfg)?;
    let manifest = Manifest::load(&cfg.data_dir)?;
    let store = FeatureStore::load(&cfg.data_dir, &manifest, cfg.feature_dim)?;
    let audio = AudioSource::open(&cfg.data_dir, &manifest, cfg.resample)?;
    let pairs = manifest.select(Some(Split::Test));
    let d = params.embedding_dim();
    // A degenerate embedding is stored as a zero row, which retrieval counts as a miss.
    let or_zero = |e: Result<Embedding>, pair: &str| -> Result<Vec<f64>> {
        match e {
            Ok(e) => Ok(e.values().to_vec()),
            Err(Error::DegenerateEmbedding(_)) => {
                log::debug!("{pair}: degenerate embedding");
                Ok(vec![0.0; d])
            }
            Err(e) => Err(e),
        }
    };
    let embedded = par_map(&pairs, cfg.workers, |p| -> Result<(Vec<f64>, Vec<f64>)> {
        let spec = audio.spectrogram(p)?;
        let a = audio_forward(&prepare_caption(&spec, cfg.train.caption_frames), &params.audio);
        let v = image_forward(&subtract_mean(&image_features(&store, p)?, &mean), &params.image);
        Ok((or_zero(a, &p.pair_id)?, or_zero(v, &p.pair_id)?))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let zero = |row: &[f64]| row.iter().all(|&x| x == 0.0);
    let dead = embedded.iter().filter(|(a, v)| zero(a) || zero(v)).count();
    if dead > 0 {
        log::warn!("{dead} of {} held-out pairs have a degenerate embedding", embedded.len());
    }
    let mut c = TensorContainer::new();
    let audio_rows: Vec<f32> = embedded.iter().flat_map(|e| e.0.iter().map(|&x| x as f32)).collect();
    let image_rows: Vec<f32> = embedded.iter().flat_map(|e| e.1.iter().map(|&x| x as f32)).collect();
    c.push("audio", vec![embedded.len(), d], audio_rows)?;
    c.push("image", vec![embedded.len(), d], image_rows)?;
    c.write(cfg.artifact(TEST_EMBEDDINGS))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub crops: Vec<CropProposal>,
}

fn ground_pairs<'a>(cfg: &RunConfig, manifest: &'a Manifest) -> Vec<&'a PairEntry> {
    manifest.select(split_filter(cfg.ground_split))
}

fn run_propose(cfg: &RunConfig) -> Result<()> {
    let manifest = Manifest::load(&cfg.data_dir)?;
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::new();
    for p in ground_pairs(cfg, &manifest) {
        if seen.insert(p.image.id.clone()) {
            out.push(ProposalRecord {
                image: p.image.id.clone(),
                width: p.image.width,
                height: p.image.height,
                crops: enumerate_image_proposals(p.image.width, p.image.height, &cfg.grid)?,
            });
        }
    }
    write_jsonl(&cfg.artifact(PROPOSALS), &out)
}

/// One kept grounding as persisted. `row` indexes the embedding store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingRecord {
    pub row: usize,
    pub pair: String,
    pub image: String,
    pub rank: usize,
    pub cells: [u32; 4],
    pub pixels: PixelBox,
    pub segment: Span,
    pub score: f64,
}

struct Grounded {
    crop: CropProposal,
    segment: Span,
    score: f64,
    image: Embedding,
    audio: Embedding,
}

struct GroundContext<'a> {
    cfg: &'a RunConfig,
    params: &'a NetworkParams,
    mean: &'a [f64],
    audio: &'a AudioSource,
    store: &'a FeatureStore,
    crop_source: CropSource,
    layouts: HashMap<String, ImageLayout>,
    prototypes: Vec<Vec<f32>>,
    background: Vec<f32>,
}

fn load_synthetic_world(cfg: &RunConfig, manifest: &Manifest) -> Result<(HashMap<String, ImageLayout>, Vec<Vec<f32>>, Vec<f32>)> {
    let layouts = match &manifest.layout {
        Some(f) => read_jsonl::<ImageLayout>(&cfg.data(f))?
            .into_iter()
            .map(|l| (l.image.clone(), l))
            .collect(),
        None => HashMap::new(),
    };
    let (protos, background) = match &manifest.prototypes {
        Some(f) => {
            let c = TensorContainer::read(cfg.data(f))?;
            let p = c.require("prototypes")?;
            let rows = (0..p.shape[0]).map(|r| p.row(r).to_vec()).collect();
            (rows, c.require("background")?.data.clone())
        }
        None => (Vec::new(), Vec::new()),
    };
    Ok((layouts, protos, background))
}

/// Kept groundings of one pair, plus how many proposals had a zero
/// embedding and could not be scored.
fn ground_one(ctx: &GroundContext, pair: &PairEntry) -> Result<(Vec<Grounded>, usize)> {
    let cfg = ctx.cfg;
    let raw = ctx.audio.spectrogram(pair)?;
    let vad = compute_vad_with(&raw, &cfg.vad);
    let norm = mean_normalize(&raw);

    // Segments the silence gate would reject can never be kept, so they are
    // not embedded at all.
    let mut dropped = 0;
    let mut spans = Vec::new();
    let mut seg_embs = Vec::new();
    for span in enumerate_audio_proposals(raw.frames(), &cfg.segments) {
        if silence_fraction(span, &vad)? >= cfg.select.max_silence {
            continue;
        }
        match audio_forward(&norm.slice(span)?, &ctx.params.audio) {
            Ok(e) => {
                spans.push(span);
                seg_embs.push(e);
            }
            Err(Error::DegenerateEmbedding(_)) => {
                log::debug!("{}: segment {span:?} has no embedding", pair.pair_id);
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if spans.is_empty() {
        return Ok((Vec::new(), dropped));
    }

    let crops = enumerate_image_proposals(pair.image.width, pair.image.height, &cfg.grid)?;
    let features: Vec<Vec<f64>> = match ctx.crop_source {
        CropSource::Features => ctx.store.crops(&pair.image.id, crops.len())?,
        CropSource::Synthetic => {
            let layout = ctx
                .layouts
                .get(&pair.image.id)
                .ok_or_else(|| Error::CorruptManifest(format!("no layout for image '{}'", pair.image.id)))?;
            crops
                .iter()
                .map(|c| crop_feature(layout, &c.pixels, &ctx.prototypes, &ctx.background))
                .collect()
        }
    };
    // Identical crop features give identical scores; embed each once and let
    // the first (lowest-index) crop stand for the group, which is also the
    // crop the tie-break would pick.
    let mut seen: std::collections::HashSet<Vec<u64>> = std::collections::HashSet::new();
    let mut reps: Vec<usize> = Vec::new();
    let mut crop_embs: Vec<Embedding> = Vec::new();
    for (i, f) in features.iter().enumerate() {
        if !seen.insert(f.iter().map(|v| v.to_bits()).collect()) {
            continue;
        }
        match image_forward(&subtract_mean(f, ctx.mean), &ctx.params.image) {
            Ok(e) => {
                reps.push(i);
                crop_embs.push(e);
            }
            Err(Error::DegenerateEmbedding(_)) => {
                log::debug!("{}: crop {:?} has no embedding", pair.pair_id, crops[i].cells);
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    let mut candidates = score_pair(&crop_embs, &seg_embs, &spans)?;
    let unique_of: HashMap<usize, usize> = reps.iter().enumerate().map(|(u, &c)| (c, u)).collect();
    for c in &mut candidates {
        c.crop = reps[c.crop];
    }
    let keep = select_groundings(&candidates, &vad, &cfg.select)?;
    let kept = keep
        .iter()
        .map(|k| Grounded {
            crop: crops[k.crop],
            segment: k.span,
            score: k.score,
            image: crop_embs[unique_of[&k.crop]].clone(),
            audio: seg_embs[k.segment].clone(),
        })
        .collect();
    Ok((kept, dropped))
}

fn run_ground(cfg: &RunConfig) -> Result<()> {
    let (params, mean) = load_checkpoint(cfg)?;
    let manifest = Manifest::load(&cfg.data_dir)?;
    let store = FeatureStore::load(&cfg.data_dir, &manifest, cfg.feature_dim)?;
    let audio = AudioSource::open(&cfg.data_dir, &manifest, cfg.resample)?;
    let (layouts, prototypes, background) = load_synthetic_world(cfg, &manifest)?;
    let ctx = GroundContext {
        cfg,
        params: &params,
        mean: &mean,
        audio: &audio,
        store: &store,
        crop_source: manifest.crop_source,
        layouts,
        prototypes,
        background,
    };
    let pairs = ground_pairs(cfg, &manifest);
    let results = par_map(&pairs, cfg.workers, |p| ground_one(&ctx, p));

    let mut records = Vec::new();
    let mut audio_rows = Vec::new();
    let mut image_rows = Vec::new();
    let mut dropped = 0;
    for (pair, res) in pairs.iter().zip(results) {
        let (kept, d) = res?;
        dropped += d;
        for (rank, g) in kept.into_iter().enumerate() {
            records.push(GroundingRecord {
                row: records.len(),
                pair: pair.pair_id.clone(),
                image: pair.image.id.clone(),
                rank,
                cells: g.crop.cells,
                pixels: g.crop.pixels,
                segment: g.segment,
                score: g.score,
            });
            audio_rows.push(g.audio);
            image_rows.push(g.image);
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} proposals had a zero embedding and were not scored");
    }
    log::info!("{} groundings from {} pairs", records.len(), pairs.len());
    let d = params.embedding_dim();
    let mut c = TensorContainer::new();
    embeddings_tensor(&mut c, "audio", d, &audio_rows.iter().collect::<Vec<_>>())?;
    embeddings_tensor(&mut c, "image", d, &image_rows.iter().collect::<Vec<_>>())?;
    c.write(cfg.artifact(GROUNDING_EMBEDDINGS))?;
    write_jsonl(&cfg.artifact(GROUNDINGS), &records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub row: usize,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepModel {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub variances: Vec<Option<f64>>,
}

fn write_model(cfg: &RunConfig, model: &ClusterModel, tensors: &str, assignments: &str) -> Result<()> {
    let k = model.k();
    let d = model.centroids.first().map_or(0, |c| c.len());
    let mut c = TensorContainer::new();
    c.push_f64("centroids", vec![k, d], &model.centroids.concat())?;
    let vars: Vec<f64> = model.variances.iter().map(|v| v.unwrap_or(f64::NAN)).collect();
    c.push_f64("variances", vec![k], &vars)?;
    let counts: Vec<f64> = model.counts.iter().map(|&n| n as f64).collect();
    c.push_f64("counts", vec![k], &counts)?;
    c.write(cfg.artifact(tensors))?;
    let rows: Vec<Assignment> = model
        .assignments
        .iter()
        .enumerate()
        .map(|(row, &cluster)| Assignment { row, cluster })
        .collect();
    write_jsonl(&cfg.artifact(assignments), &rows)
}

fn run_cluster(cfg: &RunConfig) -> Result<()> {
    let path = require_artifact(cfg, GROUNDING_EMBEDDINGS)?;
    let c = TensorContainer::read(&path)?;
    let audio = matrix(&c, "audio")?;
    let image = matrix(&c, "image")?;
    if audio.len() != image.len() {
        return Err(Error::CorruptContainer("audio and image grounding rows differ".into()));
    }
    let seed = stage_seed(cfg.seed, "cluster");
    let it = cfg.kmeans_max_iter;
    let audio_model = kmeans(&audio, cfg.audio_k, seed, it, cfg.workers).inspect_err(|e| log::error!("audio clustering: {e}"))?;
    let image_model =
        kmeans(&image, cfg.image_k, seed.wrapping_add(1), it, cfg.workers).inspect_err(|e| log::error!("image clustering: {e}"))?;
    write_model(cfg, &audio_model, AUDIO_CLUSTERS, AUDIO_ASSIGNMENTS)?;
    write_model(cfg, &image_model, IMAGE_CLUSTERS, IMAGE_ASSIGNMENTS)?;

    let links: Vec<Link> = (0..audio.len()).map(|r| Link { image: r, audio: r }).collect();
    let table = affinity_table(&links, &image, &audio, &image_model, &audio_model);
    let mut touched = std::collections::BTreeSet::new();
    for l in &links {
        touched.insert((image_model.assignments[l.image], audio_model.assignments[l.audio]));
    }
    let rows: Vec<Vec<String>> = touched
        .iter()
        .map(|&(i, a)| vec![i.to_string(), a.to_string(), table[i][a].to_string()])
        .collect();
    write_csv(&cfg.artifact(AFFINITY), &["image_cluster", "audio_cluster", "affinity"], &rows)?;

    let linkage = link_clusters(&table);
    let mut rows = Vec::new();
    for (a, &i) in linkage.audio_to_image.iter().enumerate() {
        rows.push(vec!["audio".into(), a.to_string(), i.to_string(), table[i][a].to_string()]);
    }
    for (i, &a) in linkage.image_to_audio.iter().enumerate() {
        rows.push(vec!["image".into(), i.to_string(), a.to_string(), table[i][a].to_string()]);
    }
    write_csv(&cfg.artifact(LINKAGE), &["from", "cluster", "linked", "affinity"], &rows)?;

    let mut sweep = Vec::new();
    for &k in &cfg.sweep_k {
        let model = if k == cfg.audio_k {
            Some(audio_model.clone())
        } else {
            match kmeans(&audio, k, seed.wrapping_add(2 + k as u64), it, cfg.workers) {
                Ok(m) => Some(m),
                Err(Error::TooFewPoints { distinct, .. }) => {
                    log::warn!("sweep k = {k} skipped: only {distinct} distinct segments");
                    None
                }
                Err(e) => return Err(e),
            }
        };
        if let Some(m) = model {
            sweep.push(SweepModel {
                k,
                assignments: m.assignments,
                variances: m.variances,
            });
        }
    }
    write_jsonl(&cfg.artifact(SWEEP_ASSIGNMENTS), &sweep)
}

fn read_assignments(cfg: &RunConfig, name: &str) -> Result<Vec<usize>> {
    let rows: Vec<Assignment> = read_jsonl(&require_artifact(cfg, name)?)?;
    for (i, r) in rows.iter().enumerate() {
        if r.row != i {
            return Err(Error::CorruptContainer(format!("{name}: row {i} out of order")));
        }
    }
    Ok(rows.into_iter().map(|r| r.cluster).collect())
}

fn read_variances(cfg: &RunConfig, name: &str) -> Result<Vec<Option<f64>>> {
    let c = TensorContainer::read(require_artifact(cfg, name)?)?;
    Ok(c.require("variances")?
        .to_f64()
        .into_iter()
        .map(|v| (!v.is_nan()).then_some(v))
        .collect())
}

struct Labeled {
    rendered: String,
    words: MemberWords,
}

fn cluster_evals(
    k: usize,
    assignments: &[usize],
    variances: &[Option<f64>],
    labels: &[Labeled],
    transcripts: &[AlignmentTranscript],
) -> Vec<ClusterEval> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (row, &c) in assignments.iter().enumerate() {
        members[c].push(row);
    }
    (0..k)
        .filter(|&c| !members[c].is_empty())
        .map(|c| {
            let rendered: Vec<&str> = members[c].iter().map(|&r| labels[r].rendered.as_str()).collect();
            let label = majority_vote_label(&rendered).unwrap_or_else(|| SILENCE.to_string());
            let words: Vec<MemberWords> = members[c].iter().map(|&r| labels[r].words.clone()).collect();
            ClusterEval {
                cluster: c,
                purity: purity(&rendered, &label),
                coverage: coverage(&words, &label, transcripts),
                size: members[c].len(),
                variance: variances[c].unwrap_or(f64::NAN),
                label,
            }
        })
        .collect()
}

fn argmax_count(counts: &BTreeMap<usize, usize>) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (&key, &n) in counts {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((key, n));
        }
    }
    best.map(|(k, _)| k)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallEntry {
    pub direction: String,
    pub k: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub recall: Vec<RecallEntry>,
    pub groundings: usize,
    /// Member-weighted purity of the main audio clustering after pruning.
    pub pruned_purity: Option<f64>,
    pub pruned_clusters: usize,
    pub words: usize,
    pub words_linked: usize,
}

fn run_evaluate(cfg: &RunConfig) -> Result<()> {
    let manifest = Manifest::load(&cfg.data_dir)?;

    let emb = TensorContainer::read(require_artifact(cfg, TEST_EMBEDDINGS)?)?;
    let test_audio = matrix(&emb, "audio")?;
    let test_image = matrix(&emb, "image")?;
    let mut recall = Vec::new();
    for &k in &cfg.recall_k {
        if k > test_audio.len() {
            log::warn!("recall@{k} skipped: only {} test pairs", test_audio.len());
            continue;
        }
        recall.push(RecallEntry {
            direction: "search".into(),
            k,
            recall: recall_at_k(&test_audio, &test_image, k)?,
        });
        recall.push(RecallEntry {
            direction: "annotation".into(),
            k,
            recall: recall_at_k(&test_image, &test_audio, k)?,
        });
    }
    let rows: Vec<Vec<String>> = recall
        .iter()
        .map(|r| vec![r.direction.clone(), r.k.to_string(), r.recall.to_string()])
        .collect();
    write_csv(&cfg.artifact(RECALL), &["direction", "k", "recall"], &rows)?;

    let records: Vec<GroundingRecord> = read_jsonl(&require_artifact(cfg, GROUNDINGS)?)?;
    let audio_assign = read_assignments(cfg, AUDIO_ASSIGNMENTS)?;
    let image_assign = read_assignments(cfg, IMAGE_ASSIGNMENTS)?;
    if audio_assign.len() != records.len() || image_assign.len() != records.len() {
        return Err(Error::CorruptContainer("cluster assignments do not match the groundings".into()));
    }
    let audio_vars = read_variances(cfg, AUDIO_CLUSTERS)?;
    let image_k = read_variances(cfg, IMAGE_CLUSTERS)?.len();
    let (_, link_rows) = read_csv(&require_artifact(cfg, LINKAGE)?)?;
    let mut audio_to_image = vec![0usize; audio_vars.len()];
    for r in &link_rows {
        if r.len() == 4 && r[0] == "audio" {
            let a: usize = r[1].parse().map_err(|_| Error::CorruptContainer("bad linkage row".into()))?;
            let i: usize = r[2].parse().map_err(|_| Error::CorruptContainer("bad linkage row".into()))?;
            if a < audio_to_image.len() {
                audio_to_image[a] = i;
            }
        }
    }
    let mut image_sizes = vec![0usize; image_k];
    for &i in &image_assign {
        image_sizes[i] += 1;
    }

    let transcripts: Vec<AlignmentTranscript> = match &manifest.alignments {
        Some(f) => crate::eval::read_alignments(&cfg.data(f))?,
        None => Vec::new(),
    };
    let by_utt: HashMap<&str, usize> = transcripts.iter().enumerate().map(|(i, t)| (t.utt.as_str(), i)).collect();
    let pair_by_id: HashMap<&str, &PairEntry> = manifest.pairs.iter().map(|p| (p.pair_id.as_str(), p)).collect();
    let mut labels = Vec::with_capacity(records.len());
    for g in &records {
        let pair = pair_by_id
            .get(g.pair.as_str())
            .ok_or_else(|| Error::CorruptManifest(format!("grounding names unknown pair '{}'", g.pair)))?;
        let t = pair.alignment.as_deref().and_then(|u| by_utt.get(u).copied());
        let (rendered, words) = match t {
            Some(t) => {
                let l = segment_label(g.segment, &transcripts[t], FRAME_MS);
                (l.render(), MemberWords { transcript: t, words: l.words })
            }
            None => (
                SILENCE.to_string(),
                MemberWords {
                    transcript: usize::MAX,
                    words: Vec::new(),
                },
            ),
        };
        labels.push(Labeled { rendered, words });
    }
    let have_labels = !transcripts.is_empty();

    // which objects each image cluster's crops contain, when a layout exists
    let (layouts, _, _) = load_synthetic_world(cfg, &manifest)?;
    let mut object_names: BTreeMap<usize, String> = BTreeMap::new();
    let mut image_objects: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); image_k];
    for (g, &ic) in records.iter().zip(&image_assign) {
        if let Some(l) = layouts.get(&g.image) {
            for o in l.objects_in(&g.pixels) {
                *image_objects[ic].entry(o).or_default() += 1;
            }
        }
    }
    for l in layouts.values() {
        for o in &l.objects {
            object_names.insert(o.object, o.name.clone());
        }
    }
    let dominant: Vec<Option<usize>> = image_objects.iter().map(argmax_count).collect();

    let taxonomy = match (&cfg.taxonomy_edges, &cfg.taxonomy_senses) {
        (Some(e), Some(s)) => Some(Taxonomy::load(e, s)?),
        _ => None,
    };

    let evals = cluster_evals(audio_vars.len(), &audio_assign, &audio_vars, &labels, &transcripts);
    let mut rows = Vec::new();
    for e in &evals {
        let ic = audio_to_image[e.cluster];
        let object = dominant[ic].map(|o| object_names[&o].clone());
        let sim = taxonomy.as_ref().map(|t| {
            let classes: Vec<String> = if !cfg.taxonomy_classes.is_empty() {
                cfg.taxonomy_classes.clone()
            } else {
                object.as_deref().map_or(Vec::new(), |o| t.senses(o).to_vec())
            };
            t.path_similarity(&e.label, &classes)
        });
        rows.push(vec![
            e.cluster.to_string(),
            e.label.clone(),
            e.size.to_string(),
            if have_labels { e.purity.to_string() } else { String::new() },
            fmt_opt(e.coverage),
            e.variance.to_string(),
            ic.to_string(),
            image_sizes[ic].to_string(),
            object.unwrap_or_default(),
            fmt_opt(sim),
        ]);
    }
    write_csv(
        &cfg.artifact(CLUSTER_STATS),
        &[
            "cluster",
            "label",
            "size",
            "purity",
            "coverage",
            "variance",
            "image_cluster",
            "image_size",
            "image_object",
            "path_similarity",
        ],
        &rows,
    )?;
    let rows: Vec<Vec<String>> = evals
        .iter()
        .zip(purity_variance_scatter(&evals))
        .map(|(e, (v, w))| vec![e.cluster.to_string(), v.to_string(), w.to_string()])
        .collect();
    write_csv(&cfg.artifact(PURITY_VARIANCE), &["cluster", "variance", "weighted_purity"], &rows)?;

    let sweep: Vec<SweepModel> = read_jsonl(&require_artifact(cfg, SWEEP_ASSIGNMENTS)?)?;
    let mut rows = Vec::new();
    for m in &sweep {
        let ev = cluster_evals(m.k, &m.assignments, &m.variances, &labels, &transcripts);
        for &th in &cfg.sweep_thresholds {
            let r = sweep_stats(m.k, &ev, th);
            rows.push(vec![
                r.k.to_string(),
                th.to_string(),
                r.clusters.to_string(),
                r.points.to_string(),
                fmt_opt(r.purity),
                r.labels.to_string(),
                fmt_opt(r.coverage),
            ]);
        }
    }
    write_csv(
        &cfg.artifact(SWEEP),
        &["k", "threshold", "clusters", "points", "purity", "labels", "coverage"],
        &rows,
    )?;
    let pruned = sweep_stats(cfg.audio_k, &evals, cfg.variance_threshold);

    // per vocabulary word: the audio cluster holding most of its segments,
    // and whether that cluster links to the image cluster dominated by the
    // word's own object
    let mut words_linked = 0;
    if !layouts.is_empty() {
        let mut rows = Vec::new();
        for (&obj, name) in &object_names {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for (l, &a) in labels.iter().zip(&audio_assign) {
                if l.rendered.split_whitespace().any(|w| w == name) {
                    *counts.entry(a).or_default() += 1;
                }
            }
            let audio_c = argmax_count(&counts);
            let image_c = audio_c.map(|a| audio_to_image[a]);
            let object = image_c.and_then(|i| dominant[i]);
            let linked = object == Some(obj);
            words_linked += linked as usize;
            rows.push(vec![
                name.clone(),
                audio_c.map_or(String::new(), |a| a.to_string()),
                image_c.map_or(String::new(), |i| i.to_string()),
                object.map_or(String::new(), |o| object_names[&o].clone()),
                linked.to_string(),
            ]);
        }
        write_csv(
            &cfg.artifact(WORDS),
            &["word", "audio_cluster", "image_cluster", "image_object", "linked"],
            &rows,
        )?;
    }

    let summary = Summary {
        recall,
        groundings: records.len(),
        pruned_purity: if have_labels { pruned.purity } else { None },
        pruned_clusters: pruned.clusters,
        words: object_names.len(),
        words_linked,
    };
    let path = cfg.artifact(SUMMARY);
    let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::json(&path, e))?;
    write_atomic(&path, format!("{text}\n").as_bytes())
}

pub fn read_summary(cfg: &RunConfig) -> Result<Summary> {
    let path = require_artifact(cfg, SUMMARY)?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Concatenate the recall, sweep and per-cluster tables into one CSV with a
/// leading table column; written to the work directory and returned.
pub fn run_report(cfg: &RunConfig) -> Result<String> {
    let mut out = String::from("table,columns...\n");
    for (name, file) in [("recall", RECALL), ("sweep", SWEEP), ("clusters", CLUSTER_STATS)] {
        let (header, rows) = read_csv(&require_artifact(cfg, file)?)?;
        out.push_str(&format!("{name},{}\n", header.join(",")));
        for r in rows {
            out.push_str(&format!("{name},{}\n", r.join(",")));
        }
    }
    write_atomic(&cfg.artifact(REPORT), out.as_bytes())?;
    Ok(out)
}

/// Every stage of the main pipeline, in order.
pub fn run_all(cfg: &RunConfig) -> Result<()> {
    for s in Stage::PIPELINE {
        run_stage(s, cfg)?;
    }
    Ok(())
}
