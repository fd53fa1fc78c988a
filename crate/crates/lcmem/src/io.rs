//! On-disk layout: parameter files, atlases, corpus stores and JSON documents.

use std::fs;
use std::path::{Path, PathBuf};

use lcmem_core::atlas::{fingerprint, fingerprint_hex, Atlas, Fingerprint};
use lcmem_core::detector::Detector;
use lcmem_core::format::{self, Container};
use lcmem_core::model::ModelParams;
use lcmem_core::world::{Corpus, CorpusSpec, ImageSample, ImageShape, LatentNormalizer, Split, ToyAutoencoder};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DETECTOR_FILE: &str = "detector.json";

/// Low 48 bits of a stored corpus id hold the image id; the top 16 the dataset.
const DATASET_SHIFT: u32 = 48;
const IMAGE_ID_MASK: u64 = (1 << DATASET_SHIFT) - 1;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn save_params(path: &Path, params: &ModelParams) -> Result<()> {
    write_bytes(path, &format::encode_params(params))
}

pub fn load_params(path: &Path) -> Result<ModelParams> {
    Ok(format::decode_params(&read_bytes(path)?)?)
}

pub fn save_atlas(path: &Path, atlas: &Atlas) -> Result<()> {
    write_bytes(path, &atlas.encode())
}

pub fn load_atlas(path: &Path) -> Result<Atlas> {
    Ok(Atlas::decode(&read_bytes(path)?)?)
}

/// Everything besides the weights needed to turn an image into features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorManifest {
    pub schema_version: u32,
    pub image_shape: ImageShape,
    pub mixing_seed: u64,
    pub normalizer: LatentNormalizer,
}

/// A parameter file plus the latent pipeline it was trained behind.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub params: ModelParams,
    pub autoencoder: ToyAutoencoder,
    pub normalizer: LatentNormalizer,
    pub fingerprint: Fingerprint,
}

impl LoadedModel {
    pub fn new(params: ModelParams, autoencoder: ToyAutoencoder, normalizer: LatentNormalizer) -> Self {
        let fingerprint = fingerprint(&params);
        LoadedModel { params, autoencoder, normalizer, fingerprint }
    }

    pub fn detector(&self) -> Result<Detector<'_>> {
        Ok(Detector::new(&self.autoencoder, &self.normalizer, &self.params)?)
    }

    /// Reads `path` and the `detector.json` next to it.
    pub fn load(path: &Path) -> Result<Self> {
        let params = load_params(path)?;
        let manifest_path = sibling(path, DETECTOR_FILE);
        let m: DetectorManifest = read_json(&manifest_path)?;
        check_schema(&manifest_path, m.schema_version)?;
        let autoencoder = ToyAutoencoder::seeded(m.image_shape, m.mixing_seed);
        Ok(LoadedModel::new(params, autoencoder, m.normalizer))
    }
}

pub fn save_detector_manifest(dir: &Path, shape: ImageShape, mixing_seed: u64, normalizer: &LatentNormalizer) -> Result<()> {
    let m = DetectorManifest { schema_version: SCHEMA_VERSION, image_shape: shape, mixing_seed, normalizer: normalizer.clone() };
    write_json(&dir.join(DETECTOR_FILE), &m)
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map_or_else(|| PathBuf::from(name), |d| d.join(name))
}

pub fn check_schema(path: &Path, version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "{}: unsupported schema_version {version} (expected {SCHEMA_VERSION})",
            path.display()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub split: Split,
    pub file: String,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub spec: CorpusSpec,
    /// Hex SHA-256 of the spec's JSON; stored in every split file header.
    pub spec_digest: String,
    pub splits: Vec<SplitEntry>,
}

fn spec_digest(spec: &CorpusSpec) -> Fingerprint {
    let json = serde_json::to_vec(spec).expect("corpus spec serializes");
    Sha256::digest(json).into()
}

pub fn encode_split(images: &[ImageSample], shape: ImageShape, digest: Fingerprint) -> Result<Vec<u8>> {
    let mut c = Container {
        magic: format::CORPUS_MAGIC,
        dim: shape.len(),
        fingerprint: digest,
        ids: Vec::with_capacity(images.len()),
        identities: Vec::with_capacity(images.len()),
        payload: Vec::with_capacity(images.len() * shape.len()),
    };
    for x in images {
        if x.shape != shape {
            return Err(Error::Config(format!("image {} does not have the corpus shape", x.id)));
        }
        if x.id > IMAGE_ID_MASK {
            return Err(Error::Config(format!("image id {} exceeds 48 bits", x.id)));
        }
        c.ids.push(((x.dataset_id as u64) << DATASET_SHIFT) | x.id);
        c.identities.push(x.identity.map_or(-1, |i| i as i64));
        c.payload.extend_from_slice(&x.pixels);
    }
    Ok(c.encode())
}

pub fn decode_split(bytes: &[u8], shape: ImageShape, digest: &Fingerprint) -> Result<Vec<ImageSample>> {
    let c = Container::decode(bytes, format::CORPUS_MAGIC)?;
    if c.dim != shape.len() {
        return Err(Error::Validation(format!("split holds {}-pixel images, manifest says {}", c.dim, shape.len())));
    }
    if &c.fingerprint != digest {
        return Err(Error::Validation("split file does not belong to this corpus manifest".into()));
    }
    let images = c
        .ids
        .iter()
        .zip(&c.identities)
        .zip(c.payload.chunks_exact(c.dim.max(1)))
        .map(|((&raw, &identity), px)| ImageSample {
            shape,
            pixels: px.to_vec(),
            identity: u64::try_from(identity).ok(),
            dataset_id: (raw >> DATASET_SHIFT) as u16,
            id: raw & IMAGE_ID_MASK,
        })
        .collect();
    Ok(images)
}

/// Writes `manifest.json` and one `<split>.lcmc` file per split under `dir`.
pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<CorpusManifest> {
    let digest = spec_digest(&corpus.spec);
    let mut splits = Vec::new();
    for split in Split::ALL {
        let file = format!("{}.lcmc", split.name());
        let images = corpus.split(split);
        write_bytes(&dir.join(&file), &encode_split(images, corpus.spec.shape, digest)?)?;
        splits.push(SplitEntry { split, file, images: images.len() });
    }
    let manifest =
        CorpusManifest { schema_version: SCHEMA_VERSION, spec: corpus.spec.clone(), spec_digest: fingerprint_hex(&digest), splits };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let m: CorpusManifest = read_json(&manifest_path)?;
    check_schema(&manifest_path, m.schema_version)?;
    m.spec.validate()?;
    let digest = spec_digest(&m.spec);
    if fingerprint_hex(&digest) != m.spec_digest {
        return Err(Error::Validation(format!("{}: spec_digest does not match the spec", manifest_path.display())));
    }
    let mut corpus = Corpus { spec: m.spec.clone(), train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for entry in &m.splits {
        let path = dir.join(&entry.file);
        let images = decode_split(&read_bytes(&path)?, m.spec.shape, &digest)?;
        if images.len() != entry.images {
            return Err(Error::Validation(format!("{}: {} images, manifest says {}", path.display(), images.len(), entry.images)));
        }
        match entry.split {
            Split::Train => corpus.train = images,
            Split::Val => corpus.val = images,
            Split::Test => corpus.test = images,
        }
    }
    Ok(corpus)
}
