//! On-disk feature index: one directory holding a JSON header (backend
//! fingerprint, corpus hash, descriptor dim, entry count, id-to-file map)
//! plus one binary record per image. Record layout, little-endian:
//! `u32 N`, then `N x (f32 x, y, scale, response)`, then `N x D` f32
//! descriptor values.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{sanitize_id, Corpus};

use super::{extract_features, hex_digest, DescriptorSet, FeatureBackend, FeatureError, Keypoint};

const FORMAT_VERSION: u32 = 1;
const HEADER_FILE: &str = "header.json";

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("index i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupted index header {path}: {reason}")]
    CorruptHeader { path: PathBuf, reason: String },
    #[error("corrupted index record {path}: {reason}")]
    CorruptRecord { path: PathBuf, reason: String },
    #[error("stale index: {what} changed (expected {expected}, found {found})")]
    Stale { what: String, expected: String, found: String },
    #[error("index has no record for image `{id}`")]
    MissingRecord { id: String },
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Extracted features for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub keypoints: Vec<Keypoint>,
    pub descriptors: DescriptorSet,
}

/// In-memory feature index keyed by image id.
#[derive(Debug)]
pub struct FeatureIndex {
    backend_fingerprint: String,
    corpus_hash: String,
    dim: usize,
    map: BTreeMap<String, ImageFeatures>,
}

impl FeatureIndex {
    pub fn get(&self, id: &str) -> Option<&ImageFeatures> {
        self.map.get(id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn backend_fingerprint(&self) -> &str {
        &self.backend_fingerprint
    }

    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexHeader {
    format_version: u32,
    backend_fingerprint: String,
    corpus_hash: String,
    dim: usize,
    count: usize,
    files: BTreeMap<String, String>,
}

/// Hash of the image content the index was built from: ids, dimensions and
/// pixel data. Annotations and groups are excluded deliberately — features
/// depend only on pixels, so annotation edits never invalidate an index.
pub fn corpus_content_hash(corpus: &Corpus) -> String {
    let mut ids: Vec<&str> = corpus.images().iter().map(|r| r.id.as_str()).collect();
    ids.sort_unstable();
    let mut hasher = Sha256::new();
    hasher.update(b"corpus-content-v1\x00");
    for id in ids {
        let rec = corpus.image(id).expect("id from corpus");
        hasher.update(id.as_bytes());
        hasher.update([0u8]);
        hasher.update(rec.width().to_le_bytes());
        hasher.update(rec.height().to_le_bytes());
        for p in rec.image.pixels() {
            hasher.update(p.to_le_bytes());
        }
    }
    hex_digest(hasher)
}

/// Extract features for every corpus image (in parallel) and persist them.
pub fn build_index(
    corpus: &Corpus,
    backend: &FeatureBackend,
    index_path: &Path,
    workers: usize,
) -> Result<FeatureIndex, IndexError> {
    backend.validate()?;
    let fingerprint = backend.fingerprint()?;
    let corpus_hash = corpus_content_hash(corpus);

    let extracted: Vec<(String, ImageFeatures)> = run_pool(workers, || {
        corpus
            .images()
            .par_iter()
            .map(|rec| {
                let (keypoints, descriptors) = extract_features(&rec.image, backend)?;
                Ok((rec.id.clone(), ImageFeatures { keypoints, descriptors }))
            })
            .collect::<Result<_, FeatureError>>()
    })?;

    let dim = extracted
        .first()
        .map(|(_, f)| f.descriptors.dim())
        .unwrap_or(super::DESCRIPTOR_DIM);

    fs::create_dir_all(index_path).map_err(|e| IndexError::Io {
        path: index_path.to_path_buf(),
        source: e,
    })?;

    let mut files = BTreeMap::new();
    let mut used = std::collections::BTreeSet::new();
    let mut map = BTreeMap::new();
    for (id, feats) in extracted {
        let mut name = format!("{}.bin", sanitize_id(&id));
        let mut n = 1;
        while !used.insert(name.clone()) {
            name = format!("{}_{n}.bin", sanitize_id(&id));
            n += 1;
        }
        let path = index_path.join(&name);
        fs::write(&path, encode_record(&feats)).map_err(|e| IndexError::Io {
            path: path.clone(),
            source: e,
        })?;
        files.insert(id.clone(), name);
        map.insert(id, feats);
    }

    let header = IndexHeader {
        format_version: FORMAT_VERSION,
        backend_fingerprint: fingerprint.clone(),
        corpus_hash: corpus_hash.clone(),
        dim,
        count: map.len(),
        files,
    };
    let header_path = index_path.join(HEADER_FILE);
    let text = serde_json::to_string_pretty(&header).expect("header serialization");
    fs::write(&header_path, text).map_err(|e| IndexError::Io {
        path: header_path,
        source: e,
    })?;

    Ok(FeatureIndex {
        backend_fingerprint: fingerprint,
        corpus_hash,
        dim,
        map,
    })
}

/// Reload a persisted index, verifying the backend fingerprint and corpus
/// hash. A mismatch is an explicit error — never a silent recompute.
pub fn load_index(
    index_path: &Path,
    backend: &FeatureBackend,
    corpus: &Corpus,
) -> Result<FeatureIndex, IndexError> {
    let header = read_header(index_path)?;
    let fingerprint = backend.fingerprint()?;
    if header.backend_fingerprint != fingerprint {
        return Err(IndexError::Stale {
            what: "backend fingerprint".into(),
            expected: fingerprint,
            found: header.backend_fingerprint,
        });
    }
    let corpus_hash = corpus_content_hash(corpus);
    if header.corpus_hash != corpus_hash {
        return Err(IndexError::Stale {
            what: "corpus hash".into(),
            expected: corpus_hash,
            found: header.corpus_hash,
        });
    }

    let mut map = BTreeMap::new();
    for rec in corpus.images() {
        let file = header
            .files
            .get(&rec.id)
            .ok_or_else(|| IndexError::MissingRecord { id: rec.id.clone() })?;
        let path = index_path.join(file);
        let bytes = fs::read(&path).map_err(|e| IndexError::Io {
            path: path.clone(),
            source: e,
        })?;
        let feats = decode_record(&bytes, header.dim)
            .map_err(|reason| IndexError::CorruptRecord { path, reason })?;
        map.insert(rec.id.clone(), feats);
    }

    Ok(FeatureIndex {
        backend_fingerprint: header.backend_fingerprint,
        corpus_hash: header.corpus_hash,
        dim: header.dim,
        map,
    })
}

/// Read and parse only the index header (cheap freshness probe).
pub fn read_header_info(index_path: &Path) -> Result<(String, String, usize), IndexError> {
    let h = read_header(index_path)?;
    Ok((h.backend_fingerprint, h.corpus_hash, h.count))
}

fn read_header(index_path: &Path) -> Result<IndexHeader, IndexError> {
    let header_path = index_path.join(HEADER_FILE);
    let text = fs::read_to_string(&header_path).map_err(|e| IndexError::Io {
        path: header_path.clone(),
        source: e,
    })?;
    let header: IndexHeader =
        serde_json::from_str(&text).map_err(|e| IndexError::CorruptHeader {
            path: header_path.clone(),
            reason: e.to_string(),
        })?;
    if header.format_version != FORMAT_VERSION {
        return Err(IndexError::CorruptHeader {
            path: header_path,
            reason: format!("unsupported format version {}", header.format_version),
        });
    }
    Ok(header)
}

fn encode_record(feats: &ImageFeatures) -> Vec<u8> {
    let n = feats.keypoints.len();
    let dim = feats.descriptors.dim();
    let mut out = Vec::with_capacity(4 + n * 16 + n * dim * 4);
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for kp in &feats.keypoints {
        out.extend_from_slice(&kp.x.to_le_bytes());
        out.extend_from_slice(&kp.y.to_le_bytes());
        out.extend_from_slice(&kp.scale.to_le_bytes());
        out.extend_from_slice(&kp.response.to_le_bytes());
    }
    for v in feats.descriptors.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_record(bytes: &[u8], dim: usize) -> Result<ImageFeatures, String> {
    if bytes.len() < 4 {
        return Err("record shorter than its count field".into());
    }
    let n = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let expect = 4 + n * 16 + n * dim * 4;
    if bytes.len() != expect {
        return Err(format!("expected {expect} bytes for {n} keypoints, found {}", bytes.len()));
    }
    let mut off = 4;
    let mut read_f32 = |bytes: &[u8]| {
        let v = f32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"));
        off += 4;
        v
    };
    let mut keypoints = Vec::with_capacity(n);
    for _ in 0..n {
        keypoints.push(Keypoint {
            x: read_f32(bytes),
            y: read_f32(bytes),
            scale: read_f32(bytes),
            response: read_f32(bytes),
        });
    }
    let mut data = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        data.push(read_f32(bytes));
    }
    Ok(ImageFeatures {
        keypoints,
        descriptors: DescriptorSet::new(dim, data),
    })
}

/// Run a closure inside a rayon pool of the requested size (0 = rayon's
/// default).
pub(crate) fn run_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool construction");
    pool.install(f)
}
