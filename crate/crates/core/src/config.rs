//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dsp::VadConfig;
use crate::error::{Error, Result};
use crate::grounding::{GridConfig, SegmentConfig, SelectConfig};
use crate::net::AudioConfig;
use crate::ratio::Ratio;
use crate::train::TrainConfig;

/// Parsed `key = value` lines. Every key must be consumed by the caller;
/// [`KeyValues::finish`] reports the ones that were not.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
    used: std::cell::RefCell<std::collections::BTreeSet<String>>,
    source: String,
}

impl KeyValues {
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut kv = KeyValues {
            source: source.to_string(),
            ..Default::default()
        };
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("{source}:{}: expected key = value", n + 1)));
            };
            let k = k.trim().to_string();
            if k.is_empty() {
                return Err(Error::Config(format!("{source}:{}: empty key", n + 1)));
            }
            if kv.entries.insert(k.clone(), (n + 1, v.trim().to_string())).is_some() {
                return Err(Error::Config(format!("{source}:{}: duplicate key '{k}'", n + 1)));
            }
        }
        Ok(kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().insert(key.to_string());
        self.entries.get(key).map(|(_, v)| v.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| {
                let line = self.entries[key].0;
                Error::Config(format!("{}:{line}: bad value for '{key}': {e}", self.source))
            }),
        }
    }

    pub fn get_list<T: FromStr>(&self, key: &str, default: Vec<T>) -> Result<Vec<T>>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse()
                        .map_err(|e| Error::Config(format!("{}: bad item '{s}' in '{key}': {e}", self.source)))
                })
                .collect(),
        }
    }

    /// Errors on keys no caller asked for, which are almost always typos.
    pub fn finish(&self) -> Result<()> {
        let used = self.used.borrow();
        let unknown: Vec<&str> = self
            .entries
            .keys()
            .filter(|k| !used.contains(*k))
            .map(|k| k.as_str())
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("{}: unknown keys: {}", self.source, unknown.join(", "))))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitFilter {
    Train,
    Test,
    All,
}

impl FromStr for SplitFilter {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitFilter::Train),
            "test" => Ok(SplitFilter::Test),
            "all" => Ok(SplitFilter::All),
            _ => Err(format!("expected train, test or all, got '{s}'")),
        }
    }
}

/// Every knob of a pipeline run. Relative paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub work_dir: PathBuf,
    pub seed: u64,
    pub workers: usize,
    pub arch: AudioConfig,
    pub feature_dim: usize,
    pub train: TrainConfig,
    pub grid: GridConfig,
    pub segments: SegmentConfig,
    pub select: SelectConfig,
    pub vad: VadConfig,
    pub resample: bool,
    pub ground_split: SplitFilter,
    pub audio_k: usize,
    pub image_k: usize,
    pub kmeans_max_iter: usize,
    pub variance_threshold: f64,
    pub sweep_k: Vec<usize>,
    pub sweep_thresholds: Vec<f64>,
    pub recall_k: Vec<usize>,
    pub taxonomy_edges: Option<PathBuf>,
    pub taxonomy_senses: Option<PathBuf>,
    pub taxonomy_classes: Vec<String>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let kv = KeyValues::read(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(&kv, base)
    }

    pub fn from_kv(kv: &KeyValues, base: &Path) -> Result<Self> {
        let t = TrainConfig::default();
        let g = GridConfig::default();
        let s = SegmentConfig::default();
        let sel = SelectConfig::default();
        let vad = VadConfig::default();
        let min_crop: Ratio = kv.get("min_crop_frac", g.min_width)?;
        let arch_text: String = kv.get("arch", "full".to_string())?;
        let arch: AudioConfig = arch_text
            .parse()
            .map_err(|e| Error::Config(format!("bad arch '{arch_text}': {e}")))?;
        let k: usize = kv.get("k", 500)?;
        let optional_path = |key: &str| kv.raw(key).map(|p| resolve(base, p));
        let cfg = RunConfig {
            data_dir: resolve(base, &kv.get("data_dir", "data".to_string())?),
            work_dir: resolve(base, &kv.get("work_dir", "run".to_string())?),
            seed: kv.get("seed", 0)?,
            workers: kv.get("workers", 1)?,
            arch,
            feature_dim: kv.get("feature_dim", crate::net::image::FEATURE_DIM)?,
            train: TrainConfig {
                batch_size: kv.get("batch_size", t.batch_size)?,
                momentum: kv.get("momentum", t.momentum)?,
                learning_rate: kv.get("lr", t.learning_rate)?,
                decay_factor: kv.get("lr_decay_factor", t.decay_factor)?,
                decay_period: kv.get("lr_decay_period", t.decay_period)?,
                epochs: kv.get("epochs", t.epochs)?,
                caption_frames: kv.get("caption_frames", t.caption_frames)?,
                margin: kv.get("margin", t.margin)?,
                clip_norm: kv.get("clip_norm", t.clip_norm)?,
                seed: 0,
            },
            grid: GridConfig {
                cells: kv.get("grid", g.cells)?,
                min_width: min_crop,
                min_height: min_crop,
                aspect_min: kv.get("aspect_min", g.aspect_min)?,
                aspect_max: kv.get("aspect_max", g.aspect_max)?,
            },
            segments: SegmentConfig {
                step: kv.get("seg_step", s.step)?,
                min_frames: kv.get("min_seg", s.min_frames)?,
                max_frames: kv.get("max_seg", s.max_frames)?,
            },
            select: SelectConfig {
                max_keep: kv.get("max_keep", sel.max_keep)?,
                max_silence: kv.get("silence_gate", sel.max_silence)?,
                max_iou: kv.get("iou_threshold", sel.max_iou)?,
                stop_ratio: kv.get("stop_ratio", sel.stop_ratio)?,
            },
            vad: VadConfig {
                percentile: kv.get("vad_percentile", vad.percentile)?,
                margin: kv.get("vad_margin", vad.margin)?,
                median_width: kv.get("vad_smooth", vad.median_width)?,
            },
            resample: kv.get("resample", false)?,
            ground_split: kv.get("ground_split", SplitFilter::Train)?,
            audio_k: kv.get("audio_k", k)?,
            image_k: kv.get("image_k", k)?,
            kmeans_max_iter: kv.get("kmeans_max_iter", crate::cluster::MAX_ITERATIONS)?,
            variance_threshold: kv.get("variance_threshold", 0.65)?,
            sweep_k: kv.get_list("sweep_k", vec![250, 500, 1000, 2000])?,
            sweep_thresholds: kv.get_list("sweep_thresholds", vec![f64::INFINITY, 0.9, 0.65])?,
            recall_k: kv.get_list("recall_k", vec![1, 5, 10])?,
            taxonomy_edges: optional_path("taxonomy_edges"),
            taxonomy_senses: optional_path("taxonomy_senses"),
            taxonomy_classes: kv.get_list("taxonomy_classes", Vec::new())?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.workers == 0 {
            return bad("workers must be at least 1");
        }
        if self.train.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if self.grid.cells == 0 || self.segments.step == 0 {
            return bad("grid and seg_step must be positive");
        }
        if self.segments.min_frames > self.segments.max_frames || self.segments.min_frames == 0 {
            return bad("need 0 < min_seg <= max_seg");
        }
        if self.segments.min_frames < self.arch.min_frames {
            return bad("min_seg is shorter than the network's minimum input");
        }
        if self.audio_k == 0 || self.image_k == 0 || self.sweep_k.contains(&0) {
            return bad("cluster counts must be positive");
        }
        if self.taxonomy_edges.is_some() != self.taxonomy_senses.is_some() {
            return bad("taxonomy_edges and taxonomy_senses go together");
        }
        if !(0.0..=100.0).contains(&self.vad.percentile) || self.vad.median_width == 0 {
            return bad("vad_percentile must be <= 100 and vad_smooth positive");
        }
        Ok(())
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.work_dir.join(name)
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.data_dir.join(name)
    }
}

/// Per-stage seed: the root seed mixed with a 64-bit FNV-1a hash of the
/// stage name.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    root ^ h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_published_constants() {
        let c = RunConfig::from_kv(&KeyValues::parse("", "t").unwrap(), Path::new("/x")).unwrap();
        assert_eq!(c.grid, GridConfig::default());
        assert_eq!(c.grid.aspect_min, Ratio::new(2, 3));
        assert_eq!(c.select.max_iou, 0.1);
        assert_eq!(c.select.max_silence, 0.4);
        assert_eq!((c.segments.min_frames, c.segments.max_frames), (50, 100));
        assert_eq!(c.train.batch_size, 128);
        assert_eq!(c.train.caption_frames, 1024);
        assert_eq!(c.arch, AudioConfig::full());
        assert_eq!(c.work_dir, Path::new("/x/run"));
    }

    #[test]
    fn parse_errors() {
        assert!(KeyValues::parse("a = 1\na = 2", "t").is_err());
        assert!(KeyValues::parse("just words", "t").is_err());
        let kv = KeyValues::parse("epochs = many", "t").unwrap();
        assert!(matches!(RunConfig::from_kv(&kv, Path::new(".")), Err(Error::Config(_))));
        let kv = KeyValues::parse("epoch = 3", "t").unwrap();
        let e = RunConfig::from_kv(&kv, Path::new(".")).unwrap_err();
        assert!(e.to_string().contains("epoch"));
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn values_and_comments() {
        let kv = KeyValues::parse("# run\nk = 20 # clusters\naspect_min = 0.6667\nsweep_k = 5, 10\n", "t").unwrap();
        let c = RunConfig::from_kv(&kv, Path::new(".")).unwrap();
        assert_eq!(c.audio_k, 20);
        assert_eq!(c.image_k, 20);
        assert_eq!(c.grid.aspect_min, Ratio::new(6667, 10000));
        assert_eq!(c.sweep_k, vec![5, 10]);
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(0, "train"), stage_seed(0, "cluster"));
        assert_eq!(stage_seed(7, "train"), stage_seed(7, "train"));
    }
}
