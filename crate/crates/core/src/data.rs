//! Dataset manifest, image feature store and the on-disk record types shared
//! by the generator and the pipeline stages.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::dsp::{compute_spectrogram, Spectrogram, MEL_BANDS};
use crate::error::{Error, Result};
use crate::grounding::PixelBox;
use crate::tensor::TensorContainer;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    /// Row of this image in the `images` tensor of the feature container.
    pub row: usize,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub pair_id: String,
    pub split: Split,
    /// 16-bit PCM file, relative to the data directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wav: Option<String>,
    /// Tensor name in the spectrogram container, used instead of `wav`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrogram: Option<String>,
    pub image: ImageRef,
    /// Utterance id in the alignment file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<String>,
}

/// Where crop features come from during grounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropSource {
    /// `crops/<image id>` tensors in the crop feature container, one row per
    /// proposal in enumeration order.
    Features,
    /// Prototype sums over the object layout.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub features: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrograms: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignments: Option<String>,
    pub crop_source: CropSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototypes: Option<String>,
    pub pairs: Vec<PairEntry>,
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })
}

fn require_file(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

impl Manifest {
    pub fn load(data_dir: &Path) -> Result<Self> {
        let path = data_dir.join(MANIFEST_FILE);
        let m: Manifest = serde_json::from_reader(std::io::BufReader::new(open(&path)?))
            .map_err(|e| Error::CorruptManifest(format!("{}: {e}", path.display())))?;
        m.validate(data_dir)?;
        Ok(m)
    }

    /// Unique pair ids, an audio source for every pair, and every referenced
    /// file present.
    pub fn validate(&self, data_dir: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.pairs {
            if !seen.insert(p.pair_id.as_str()) {
                return Err(Error::CorruptManifest(format!("duplicate pair id '{}'", p.pair_id)));
            }
            match (&p.wav, &p.spectrogram) {
                (Some(w), _) => {
                    require_file(data_dir.join(w))?;
                }
                (None, Some(_)) if self.spectrograms.is_some() => {}
                _ => return Err(Error::CorruptManifest(format!("pair '{}' has no audio", p.pair_id))),
            }
        }
        require_file(data_dir.join(&self.features))?;
        for f in [&self.spectrograms, &self.alignments, &self.crop_features, &self.layout, &self.prototypes]
            .into_iter()
            .flatten()
        {
            require_file(data_dir.join(f))?;
        }
        match self.crop_source {
            CropSource::Synthetic if self.layout.is_none() || self.prototypes.is_none() => Err(
                Error::CorruptManifest("synthetic crop features need a layout and prototypes".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn write(&self, data_dir: &Path) -> Result<()> {
        let path = data_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        write_atomic(&path, format!("{text}\n").as_bytes())
    }

    pub fn select(&self, split: Option<Split>) -> Vec<&PairEntry> {
        self.pairs.iter().filter(|p| split.is_none_or(|s| p.split == s)).collect()
    }
}

/// Write through a temporary sibling and rename, so a crashed run never
/// leaves a half-written artifact under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::json(path, e))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in std::io::BufReader::new(open(path)?).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
        }
    }
    Ok(out)
}

/// Minimal CSV writer: a header and rows of already-formatted cells.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{}", header.join(",")).expect("write to memory");
    for r in rows {
        writeln!(buf, "{}", r.join(",")).expect("write to memory");
    }
    write_atomic(path, &buf)
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::CorruptContainer(format!("{} is empty", path.display())))?
        .split(',')
        .map(String::from)
        .collect();
    Ok((header, lines.map(|l| l.split(',').map(String::from).collect()).collect()))
}

/// Shortest round-trip decimal, empty for a missing value.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

/// Image features addressable by image id, checked against the expected
/// dimension on load.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    dim: usize,
    rows: HashMap<String, usize>,
    images: crate::tensor::Tensor,
    crops: Option<TensorContainer>,
}

impl FeatureStore {
    pub fn load(data_dir: &Path, manifest: &Manifest, expected_dim: usize) -> Result<Self> {
        let c = TensorContainer::read(data_dir.join(&manifest.features))?;
        let images = c.require("images")?.clone();
        if images.shape.len() != 2 {
            return Err(Error::CorruptContainer("images tensor must be two-dimensional".into()));
        }
        let dim = images.shape[1];
        if dim != expected_dim {
            return Err(Error::FeatureDimension {
                expected: expected_dim,
                got: dim,
            });
        }
        let mut rows = HashMap::new();
        for p in &manifest.pairs {
            if p.image.row >= images.shape[0] {
                return Err(Error::CorruptManifest(format!(
                    "image '{}' points at row {} of {}",
                    p.image.id, p.image.row, images.shape[0]
                )));
            }
            rows.insert(p.image.id.clone(), p.image.row);
        }
        let crops = match &manifest.crop_features {
            Some(f) => Some(TensorContainer::read(data_dir.join(f))?),
            None => None,
        };
        Ok(FeatureStore {
            dim,
            rows,
            images,
            crops,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn image(&self, id: &str) -> Option<Vec<f64>> {
        self.rows
            .get(id)
            .map(|&r| self.images.row(r).iter().map(|&v| v as f64).collect())
    }

    /// Externally computed crop features for `id`, one row per proposal.
    pub fn crops(&self, id: &str, expected_rows: usize) -> Result<Vec<Vec<f64>>> {
        let name = format!("crops/{id}");
        let c = self
            .crops
            .as_ref()
            .ok_or_else(|| Error::MissingArtifact(PathBuf::from("crop feature container")))?;
        let t = c.require(&name)?;
        if t.shape.len() != 2 || t.shape[0] != expected_rows {
            return Err(Error::Shape(format!(
                "{name} has shape {:?}, expected {expected_rows} rows",
                t.shape
            )));
        }
        if t.shape[1] != self.dim {
            return Err(Error::FeatureDimension {
                expected: self.dim,
                got: t.shape[1],
            });
        }
        Ok((0..expected_rows).map(|r| t.row(r).iter().map(|&v| v as f64).collect()).collect())
    }
}

/// Spectrograms for pairs, either from the spectrogram container or computed
/// from the referenced WAV files.
pub struct AudioSource {
    data_dir: PathBuf,
    container: Option<TensorContainer>,
    resample: bool,
}

impl AudioSource {
    pub fn open(data_dir: &Path, manifest: &Manifest, resample: bool) -> Result<Self> {
        let container = match &manifest.spectrograms {
            Some(f) => Some(TensorContainer::read(data_dir.join(f))?),
            None => None,
        };
        Ok(AudioSource {
            data_dir: data_dir.to_path_buf(),
            container,
            resample,
        })
    }

    pub fn spectrogram(&self, pair: &PairEntry) -> Result<Spectrogram> {
        if let (Some(name), Some(c)) = (&pair.spectrogram, &self.container) {
            let t = c.require(name)?;
            if t.shape.len() != 2 || t.shape[1] != MEL_BANDS {
                return Err(Error::Shape(format!("spectrogram '{name}' has shape {:?}", t.shape)));
            }
            return Spectrogram::from_values(t.shape[0], t.shape[1], t.data.clone(), pair.pair_id.clone());
        }
        let wav = pair
            .wav
            .as_ref()
            .ok_or_else(|| Error::CorruptManifest(format!("pair '{}' has no audio", pair.pair_id)))?;
        let w = crate::wav::read_wav(self.data_dir.join(wav), &pair.pair_id, self.resample)?;
        compute_spectrogram(&w)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutObject {
    pub object: usize,
    pub name: String,
    pub bbox: PixelBox,
}

/// Ground-truth object placement for one synthetic image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageLayout {
    pub image: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<LayoutObject>,
}

impl ImageLayout {
    /// Objects with at least half their area inside `crop`.
    pub fn objects_in(&self, crop: &PixelBox) -> Vec<usize> {
        self.objects
            .iter()
            .filter(|o| 2 * o.bbox.intersection_area(crop) >= o.bbox.area())
            .map(|o| o.object)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(ids: &[&str]) -> Manifest {
        Manifest {
            version: 1,
            features: "features.avtc".into(),
            spectrograms: Some("spectrograms.avtc".into()),
            alignments: None,
            crop_source: CropSource::Features,
            crop_features: None,
            layout: None,
            prototypes: None,
            pairs: ids
                .iter()
                .enumerate()
                .map(|(i, id)| PairEntry {
                    pair_id: id.to_string(),
                    split: Split::Train,
                    wav: None,
                    spectrogram: Some(id.to_string()),
                    image: ImageRef {
                        id: format!("img{i}"),
                        row: i,
                        width: 100,
                        height: 100,
                    },
                    alignment: None,
                })
                .collect(),
        }
    }

    fn write_features(dir: &Path, rows: usize, dim: usize) {
        let mut c = TensorContainer::new();
        c.push("images", vec![rows, dim], vec![0.5; rows * dim]).unwrap();
        c.write(dir.join("features.avtc")).unwrap();
        TensorContainer::new().write(dir.join("spectrograms.avtc")).unwrap();
    }

    #[test]
    fn feature_rows_resolve() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path(), 3, 4096);
        let m = manifest(&["a", "b", "c"]);
        m.write(dir.path()).unwrap();
        let m = Manifest::load(dir.path()).unwrap();
        let f = FeatureStore::load(dir.path(), &m, 4096).unwrap();
        assert_eq!(f.len(), 3);
        assert!(m.pairs.iter().all(|p| f.image(&p.image.id).is_some()));
    }

    #[test]
    fn short_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path(), 2, 4095);
        let m = manifest(&["a", "b"]);
        let r = FeatureStore::load(dir.path(), &m, 4096);
        assert!(matches!(r, Err(Error::FeatureDimension { expected: 4096, got: 4095 })));
    }

    #[test]
    fn corrupted_payload_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path(), 2, 4096);
        let path = dir.path().join("features.avtc");
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 9] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        let r = FeatureStore::load(dir.path(), &manifest(&["a", "b"]), 4096);
        match r {
            Err(Error::Checksum(name)) => assert_eq!(name, "images"),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        write_features(dir.path(), 2, 8);
        let m = manifest(&["a", "a"]);
        assert!(matches!(m.validate(dir.path()), Err(Error::CorruptManifest(_))));
        let mut m = manifest(&["a"]);
        m.pairs[0].wav = Some("missing.wav".into());
        assert!(matches!(m.validate(dir.path()), Err(Error::MissingArtifact(_))));
        assert!(matches!(Manifest::load(&dir.path().join("nope")), Err(Error::MissingArtifact(_))));
    }

    #[test]
    fn layout_half_area_rule() {
        let l = ImageLayout {
            image: "i".into(),
            width: 100,
            height: 100,
            objects: vec![LayoutObject {
                object: 4,
                name: "x".into(),
                bbox: PixelBox { x0: 0, y0: 0, x1: 40, y1: 40 },
            }],
        };
        assert_eq!(l.objects_in(&PixelBox { x0: 20, y0: 0, x1: 100, y1: 100 }), vec![4]);
        assert!(l.objects_in(&PixelBox { x0: 21, y0: 0, x1: 100, y1: 100 }).is_empty());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        let recs = vec![manifest(&["a"]).pairs[0].clone(); 3];
        write_jsonl(&p, &recs).unwrap();
        let back: Vec<PairEntry> = read_jsonl(&p).unwrap();
        assert_eq!(back, recs);
        let first = std::fs::read(&p).unwrap();
        write_jsonl(&p, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }
}
