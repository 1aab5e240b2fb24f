//! Chunks renderer documentation, embeds it, and serves top-k retrieval
//! for grounding the coding agent.
//!
//! The store is an exact-scan index: corpora here are a few hundred chunks
//! of documentation, so nearest-neighbor structures would be noise. The
//! embedding function is pluggable; the default is a deterministic hashed
//! bag-of-words vectorizer so retrieval is exact and offline.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RagError {
    #[error("corpus contains no text to index")]
    EmptyCorpus,
    #[error("index not built at {0}")]
    IndexNotBuilt(String),
    #[error("chunk_size must exceed overlap (got chunk_size={0}, overlap={1})")]
    InvalidChunking(usize, usize),
    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt index: {0}")]
    Corrupt(String),
}

/// One indexed chunk of documentation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocChunk {
    pub chunk_id: String,
    pub source: String,
    pub text: String,
    #[serde(skip)]
    pub vector: Vec<f32>,
}

/// Text-to-vector mapping. Must be deterministic for replayable retrieval.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f32>;
    /// Identifier persisted with the index so a mismatched embedder is
    /// detected at load time.
    fn id(&self) -> String;
}

/// Deterministic hashed bag-of-words embedding: tokens are lowercased
/// alphanumeric runs, hashed into a fixed number of buckets, counted, and
/// L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedBagOfWords {
    pub dim: usize,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        HashedBagOfWords { dim: 256 }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x1000_0000_01b3);
    }
    hash
}

impl Embedder for HashedBagOfWords {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let mut v = vec![0.0f32; self.dim];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            let lower = token.to_lowercase();
            let bucket = (fnv1a64(lower.as_bytes()) % self.dim as u64) as usize;
            v[bucket] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        }
        v
    }

    fn id(&self) -> String {
        format!("hashed_bow_{}", self.dim)
    }
}

/// Cosine similarity; zero when either vector is all-zero.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| f64::from(*x) * f64::from(*y))
        .sum();
    let na: f64 = a
        .iter()
        .map(|x| f64::from(*x) * f64::from(*x))
        .sum::<f64>()
        .sqrt();
    let nb: f64 = b
        .iter()
        .map(|x| f64::from(*x) * f64::from(*x))
        .sum::<f64>()
        .sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Character-window chunking that prefers blank-line boundaries. Windows
/// are `chunk_size` chars with `overlap` chars repeated between adjacent
/// chunks; a window is cut early at the last blank line past its midpoint.
pub fn chunk_text(text: &str, chunk_size: usize, overlap: usize) -> Vec<(usize, usize)> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let mut spans = Vec::new();
    let mut start = 0usize; // char offsets
    while start < n {
        let mut end = (start + chunk_size).min(n);
        if end < n {
            // Look for a blank-line boundary ("\n\n") inside the window,
            // past the midpoint so progress always exceeds the overlap.
            let floor = start + (chunk_size / 2).max(overlap + 1);
            let mut cut = None;
            let mut i = end;
            while i > floor && i >= 2 {
                if chars[i - 1].1 == '\n' && chars[i - 2].1 == '\n' {
                    cut = Some(i);
                    break;
                }
                i -= 1;
            }
            if let Some(c) = cut {
                end = c;
            }
        }
        let byte_start = chars[start].0;
        let byte_end = if end == n { text.len() } else { chars[end].0 };
        spans.push((byte_start, byte_end));
        if end == n {
            break;
        }
        start = end - overlap;
    }
    spans
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    embedder: String,
    dim: usize,
    chunk_size: usize,
    overlap: usize,
    chunks: Vec<ManifestChunk>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestChunk {
    chunk_id: String,
    source: String,
    len: usize,
}

/// An in-memory index over embedded chunks.
pub struct RagIndex {
    pub chunks: Vec<DocChunk>,
    embedder: Box<dyn Embedder>,
    chunk_size: usize,
    overlap: usize,
}

impl std::fmt::Debug for RagIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RagIndex")
            .field("chunks", &self.chunks.len())
            .field("embedder", &self.embedder.id())
            .field("chunk_size", &self.chunk_size)
            .field("overlap", &self.overlap)
            .finish()
    }
}

impl RagIndex {
    /// Chunks and embeds every document. Documents are `(source, text)`
    /// pairs; chunk ids are source-qualified ordinals, so identical texts
    /// from different sources stay distinct.
    pub fn build(
        docs: &[(String, String)],
        chunk_size: usize,
        overlap: usize,
        embedder: Box<dyn Embedder>,
    ) -> Result<RagIndex, RagError> {
        if chunk_size <= overlap {
            return Err(RagError::InvalidChunking(chunk_size, overlap));
        }
        let mut chunks = Vec::new();
        for (source, text) in docs {
            if text.trim().is_empty() {
                continue;
            }
            for (ordinal, (a, b)) in chunk_text(text, chunk_size, overlap).iter().enumerate() {
                let body = &text[*a..*b];
                chunks.push(DocChunk {
                    chunk_id: format!("{source}#{ordinal:04}"),
                    source: source.clone(),
                    text: body.to_string(),
                    vector: embedder.embed(body),
                });
            }
        }
        if chunks.is_empty() {
            return Err(RagError::EmptyCorpus);
        }
        Ok(RagIndex {
            chunks,
            embedder,
            chunk_size,
            overlap,
        })
    }

    /// Top-k chunks by descending cosine similarity to the query; ties
    /// break on ascending chunk id. Returns fewer than k only when the
    /// index is smaller than k.
    pub fn retrieve(&self, query: &str, k: usize) -> Vec<DocChunk> {
        let qv = self.embedder.embed(query);
        let mut scored: Vec<(f64, &DocChunk)> = self
            .chunks
            .iter()
            .map(|c| (cosine(&qv, &c.vector), c))
            .collect();
        scored.sort_by(|(sa, ca), (sb, cb)| {
            sb.total_cmp(sa).then_with(|| ca.chunk_id.cmp(&cb.chunk_id))
        });
        scored.into_iter().take(k).map(|(_, c)| c.clone()).collect()
    }

    /// Persists the index as a directory: manifest, chunk text files, and
    /// packed little-endian f32 vectors. The directory is replaced
    /// atomically via a sibling temp dir and rename.
    pub fn save(&self, dir: &Path) -> Result<(), RagError> {
        let tmp = dir.with_extension("tmp-index");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        fs::create_dir_all(tmp.join("chunks"))?;
        let manifest = Manifest {
            embedder: self.embedder.id(),
            dim: self.embedder.dimension(),
            chunk_size: self.chunk_size,
            overlap: self.overlap,
            chunks: self
                .chunks
                .iter()
                .map(|c| ManifestChunk {
                    chunk_id: c.chunk_id.clone(),
                    source: c.source.clone(),
                    len: c.text.len(),
                })
                .collect(),
        };
        fs::write(
            tmp.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
        )?;
        let mut vectors = Vec::with_capacity(self.chunks.len() * self.embedder.dimension() * 4);
        for (i, chunk) in self.chunks.iter().enumerate() {
            fs::write(tmp.join("chunks").join(format!("{i:06}.txt")), &chunk.text)?;
            for x in &chunk.vector {
                vectors.extend_from_slice(&x.to_le_bytes());
            }
        }
        fs::write(tmp.join("vectors.bin"), vectors)?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    /// Loads a persisted index, re-attaching the embedder used to build it.
    pub fn load(dir: &Path, embedder: Box<dyn Embedder>) -> Result<RagIndex, RagError> {
        let manifest_path = dir.join("manifest.json");
        if !manifest_path.exists() {
            return Err(RagError::IndexNotBuilt(dir.display().to_string()));
        }
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)
            .map_err(|e| RagError::Corrupt(e.to_string()))?;
        if manifest.embedder != embedder.id() {
            return Err(RagError::Corrupt(format!(
                "index built with embedder '{}', loaded with '{}'",
                manifest.embedder,
                embedder.id()
            )));
        }
        let vectors = fs::read(dir.join("vectors.bin"))?;
        let dim = manifest.dim;
        if vectors.len() != manifest.chunks.len() * dim * 4 {
            return Err(RagError::Corrupt("vector file length mismatch".to_string()));
        }
        let mut chunks = Vec::with_capacity(manifest.chunks.len());
        for (i, mc) in manifest.chunks.iter().enumerate() {
            let text = fs::read_to_string(dir.join("chunks").join(format!("{i:06}.txt")))?;
            let mut vector = Vec::with_capacity(dim);
            for j in 0..dim {
                let at = (i * dim + j) * 4;
                vector.push(f32::from_le_bytes([
                    vectors[at],
                    vectors[at + 1],
                    vectors[at + 2],
                    vectors[at + 3],
                ]));
            }
            chunks.push(DocChunk {
                chunk_id: mc.chunk_id.clone(),
                source: mc.source.clone(),
                text,
                vector,
            });
        }
        Ok(RagIndex {
            chunks,
            embedder,
            chunk_size: manifest.chunk_size,
            overlap: manifest.overlap,
        })
    }
}

/// Reads every `.md` / `.txt` / `.rst` file under a directory into
/// `(source, text)` pairs, sorted by relative path for stable chunk ids.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<(String, String)>, RagError> {
    let mut docs = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
            } else if matches!(
                path.extension().and_then(|e| e.to_str()),
                Some("md" | "txt" | "rst")
            ) {
                let rel = path
                    .strip_prefix(dir)
                    .unwrap_or(&path)
                    .to_string_lossy()
                    .to_string();
                docs.push((rel, fs::read_to_string(&path)?));
            }
        }
    }
    docs.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(docs)
}
