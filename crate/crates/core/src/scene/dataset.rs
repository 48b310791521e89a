use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::codec::{decode_fmap, decode_png, encode_fmap, encode_png};
use super::render::{render_scene, BoxLabel, Domain, SceneSample, SceneSpec, CLASS_NAMES};
use super::DatasetError;
use crate::fog::TransmissionMap;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SEALED_DIR: &str = "sealed";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainSource,
    TrainTarget,
    TestTarget,
    TestClear,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::TrainSource, Split::TrainTarget, Split::TestTarget, Split::TestClear];

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainSource => "train_source",
            Split::TrainTarget => "train_target",
            Split::TestTarget => "test_target",
            Split::TestClear => "test_clear",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::TrainSource | Split::TestClear => Domain::Source,
            Split::TrainTarget | Split::TestTarget => Domain::Target,
        }
    }

    /// Whether the network sees the foggy rendering of this split.
    pub fn uses_foggy_input(self) -> bool {
        self.domain() == Domain::Target
    }

    /// Labels of the target training split never reach training code.
    pub fn labels_sealed(self) -> bool {
        self == Split::TrainTarget
    }

    /// Seed family; the two test splits share one so they hold the same
    /// scenes in clear and foggy form.
    fn seed_tag(self) -> u64 {
        match self {
            Split::TrainSource => 1,
            Split::TrainTarget => 2,
            Split::TestTarget | Split::TestClear => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitCounts {
    pub train_source: usize,
    pub train_target: usize,
    pub test_target: usize,
    pub test_clear: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self { train_source: 500, train_target: 500, test_target: 100, test_clear: 100 }
    }
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::TrainSource => self.train_source,
            Split::TrainTarget => self.train_target,
            Split::TestTarget => self.test_target,
            Split::TestClear => self.test_clear,
        }
    }

    pub fn total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.get(s)).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scene: SceneSpec,
    pub counts: SplitCounts,
    pub seed: u64,
}

/// Scene seed for item `index` of `split`: disjoint bit ranges per seed
/// family, so source and target never share a scene.
pub fn scene_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    assert!(index < 1 << 20, "split too large for the seed layout");
    (dataset_seed << 24) | (split.seed_tag() << 20) | index as u64
}

pub fn sample_id(split: Split, index: usize) -> String {
    format!("{}_{index:05}", split.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub sample_ids: Vec<String>,
    pub split: BTreeMap<Split, Vec<String>>,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub renderer_config_hash: String,
    pub seed: u64,
    pub renderer: SceneSpec,
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        self.split.get(&split).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.split.iter().find(|(_, ids)| ids.iter().any(|i| i == id)).map(|(s, _)| *s)
    }
}

/// Per-sample metadata stored next to the data files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub id: String,
    pub domain: Domain,
    pub beta: f64,
    pub airlight: [f64; 3],
    pub scene_seed: u64,
    /// SHA-256 of each data file, keyed by file name.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct LabelFile {
    boxes: Vec<BoxLabel>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    fs::write(path, bytes).map_err(|e| DatasetError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<Vec<u8>, DatasetError> {
    let bytes = serde_json::to_vec_pretty(value).expect("serializable");
    write_file(path, &bytes)?;
    Ok(bytes)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })
}

/// Writes every field of `sample` under `dir/id/`.
///
/// With `sealed_labels` set the labels go to `dir/../sealed/id.json` instead
/// of the sample directory.
pub fn save_sample(sample: &SceneSample, dir: &Path, id: &str, scene_seed: u64, sealed_labels: bool) -> Result<(), DatasetError> {
    let sample_dir = dir.join(id);
    fs::create_dir_all(&sample_dir).map_err(|e| DatasetError::io(&sample_dir, e))?;
    let mut files: Vec<(&str, Vec<u8>)> = vec![
        ("clear.png", encode_png(&sample.clear).map_err(|e| e.at(&sample_dir.join("clear.png")))?),
        ("foggy.png", encode_png(&sample.foggy).map_err(|e| e.at(&sample_dir.join("foggy.png")))?),
        ("depth.fmap", encode_fmap(&sample.depth)),
        ("transmission.fmap", encode_fmap(sample.t_gt.values())),
    ];
    let labels = serde_json::to_vec_pretty(&LabelFile { boxes: sample.labels.clone() }).expect("labels serialize");
    if sealed_labels {
        let sealed = dir.parent().unwrap_or(dir).join(SEALED_DIR);
        fs::create_dir_all(&sealed).map_err(|e| DatasetError::io(&sealed, e))?;
        write_file(&sealed.join(format!("{id}.json")), &labels)?;
    } else {
        files.push(("labels.json", labels));
    }
    let mut checksums = BTreeMap::new();
    for (name, bytes) in &files {
        write_file(&sample_dir.join(name), bytes)?;
        checksums.insert(name.to_string(), sha256_hex(bytes));
    }
    let meta = SampleMeta {
        id: id.to_string(),
        domain: sample.domain,
        beta: sample.beta,
        airlight: sample.airlight,
        scene_seed,
        checksums,
    };
    write_json(&sample_dir.join("meta.json"), &meta)?;
    Ok(())
}

/// Renders every split into `out_dir` and writes `manifest.json`.
pub fn synthesize_dataset(config: &DatasetConfig, out_dir: &Path, overwrite: bool) -> Result<DatasetManifest, DatasetError> {
    config.scene.validate().map_err(DatasetError::InvalidConfig)?;
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir).map_err(|e| DatasetError::io(out_dir, e))?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(DatasetError::OutDirNotEmpty(out_dir.to_path_buf()));
            }
            fs::remove_dir_all(out_dir).map_err(|e| DatasetError::io(out_dir, e))?;
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| DatasetError::io(out_dir, e))?;

    let mut manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        sample_ids: Vec::with_capacity(config.counts.total()),
        split: BTreeMap::new(),
        class_names: CLASS_NAMES[..config.scene.num_classes].iter().map(|s| s.to_string()).collect(),
        image_size: config.scene.image_size,
        renderer_config_hash: config.scene.config_hash(),
        seed: config.seed,
        renderer: config.scene.clone(),
    };
    for split in Split::ALL {
        let dir = out_dir.join(split.name());
        let mut ids = Vec::with_capacity(config.counts.get(split));
        for i in 0..config.counts.get(split) {
            let seed = scene_seed(config.seed, split, i);
            let mut sample = render_scene(&config.scene, seed);
            sample.domain = split.domain();
            let id = sample_id(split, i);
            save_sample(&sample, &dir, &id, seed, split.labels_sealed())?;
            ids.push(id);
        }
        manifest.sample_ids.extend(ids.iter().cloned());
        manifest.split.insert(split, ids);
    }
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A synthesized dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let root = root.into();
        let manifest: DatasetManifest = read_json(&root.join(MANIFEST_FILE))?;
        Ok(Self { root, manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn locate(&self, id: &str) -> Result<(Split, PathBuf), DatasetError> {
        let split = self.manifest.split_of(id).ok_or_else(|| DatasetError::NotFound(id.to_string()))?;
        Ok((split, self.root.join(split.name()).join(id)))
    }

    fn read_checked(&self, dir: &Path, name: &str, meta: &SampleMeta) -> Result<Vec<u8>, DatasetError> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| DatasetError::io(&path, e))?;
        if let Some(expected) = meta.checksums.get(name) {
            let actual = sha256_hex(&bytes);
            if &actual != expected {
                return Err(DatasetError::Checksum { path, expected: expected.clone(), actual });
            }
        }
        Ok(bytes)
    }

    /// Loads a sample. Target-train labels stay sealed: the returned label
    /// list is empty for that split.
    pub fn load_sample(&self, id: &str) -> Result<SceneSample, DatasetError> {
        let (split, dir) = self.locate(id)?;
        let meta: SampleMeta = read_json(&dir.join("meta.json"))?;
        let clear = decode_png(&self.read_checked(&dir, "clear.png", &meta)?, &dir.join("clear.png"))?;
        let foggy = decode_png(&self.read_checked(&dir, "foggy.png", &meta)?, &dir.join("foggy.png"))?;
        let depth = decode_fmap(&self.read_checked(&dir, "depth.fmap", &meta)?, &dir.join("depth.fmap"))?;
        let tpath = dir.join("transmission.fmap");
        let t = decode_fmap(&self.read_checked(&dir, "transmission.fmap", &meta)?, &tpath)?;
        let t_gt = TransmissionMap::new(t).map_err(|e| DatasetError::Corrupt { path: tpath, reason: e.to_string() })?;
        let labels = if split.labels_sealed() {
            Vec::new()
        } else {
            let bytes = self.read_checked(&dir, "labels.json", &meta)?;
            let file: LabelFile = serde_json::from_slice(&bytes)
                .map_err(|source| DatasetError::Json { path: dir.join("labels.json"), source })?;
            file.boxes
        };
        Ok(SceneSample { clear, foggy, depth, t_gt, labels, domain: meta.domain, beta: meta.beta, airlight: meta.airlight })
    }

    /// Labels of a target-train sample, for upper-bound and audit use only.
    pub fn load_sealed_labels(&self, id: &str) -> Result<Vec<BoxLabel>, DatasetError> {
        let (split, dir) = self.locate(id)?;
        let path = if split.labels_sealed() {
            self.root.join(SEALED_DIR).join(format!("{id}.json"))
        } else {
            dir.join("labels.json")
        };
        Ok(read_json::<LabelFile>(&path)?.boxes)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SceneSample>, DatasetError> {
        self.manifest.ids(split).iter().map(|id| self.load_sample(id)).collect()
    }
}
