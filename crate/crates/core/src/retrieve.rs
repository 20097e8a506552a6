//! Tool index construction and exact inner-product retrieval: similarity
//! scoring, argmax selection with deterministic tie-break, and rank queries.

use crate::corpus::ToolCorpus;
use crate::embed::{Embedding, EmbeddingProvider};
use crate::scalar::Real;
use crate::tooldesc::{canonical_text_task, canonical_text_tool, DescFormat, TaskDescription};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("empty tool index")]
    EmptyCorpus,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown tool \"{0}\"")]
    UnknownTool(String),
    #[error("index provenance mismatch: {0}")]
    ProvenanceMismatch(String),
    #[error("embedding error: {0}")]
    Embed(#[from] crate::embed::EmbedError),
    #[error("index file error: {0}")]
    Io(#[from] std::io::Error),
    #[error("index file malformed: {0}")]
    Malformed(String),
}

/// What the index was built from; loading refuses silent mismatches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexProvenance {
    pub corpus_id: String,
    pub format: DescFormat,
    pub provider_id: String,
    pub model_id: String,
}

/// Immutable embedded tool collection. All entries share one dimension.
#[derive(Debug, Clone)]
pub struct ToolIndex<S> {
    dim: usize,
    tool_ids: Vec<String>,
    vectors: Vec<Vec<S>>,
    provenance: IndexProvenance,
}

/// Full descending ranking over the index plus the argmax selection.
#[derive(Debug, Clone)]
pub struct RetrievalResult<S> {
    /// (tool_id, score) in descending score order, ties broken by ascending
    /// tool_id.
    pub ranking: Vec<(String, S)>,
    pub selected: String,
}

/// Inner product of two equal-dimension vectors. Similarity is the raw dot
/// product; unit-normalized inputs make it cosine.
pub fn similarity<S: Real>(a: &Embedding<S>, b: &Embedding<S>) -> Result<S, RetrieveError> {
    if a.dim() != b.dim() {
        return Err(RetrieveError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(dot(&a.values, &b.values))
}

/// Blocked dot product: four independent accumulators over chunks of four,
/// which keeps the hot scan loop free of a single serial dependency chain.
fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let base = i * 4;
        acc[0] = acc[0] + a[base] * b[base];
        acc[1] = acc[1] + a[base + 1] * b[base + 1];
        acc[2] = acc[2] + a[base + 2] * b[base + 2];
        acc[3] = acc[3] + a[base + 3] * b[base + 3];
    }
    let mut tail = S::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

impl<S: Real> ToolIndex<S> {
    /// Embeds every tool's canonical text and builds the index.
    pub fn build(
        corpus: &ToolCorpus,
        provider: &dyn EmbeddingProvider<S>,
        format: DescFormat,
    ) -> Result<Self, RetrieveError> {
        if corpus.tools.is_empty() {
            return Err(RetrieveError::EmptyCorpus);
        }
        let texts: Vec<String> = corpus
            .tools
            .iter()
            .map(|t| canonical_text_tool(t, format))
            .collect();
        let mut tool_ids = Vec::with_capacity(texts.len());
        let mut vectors = Vec::with_capacity(texts.len());
        let mut dim = None;
        for (tool, text) in corpus.tools.iter().zip(&texts) {
            let v = provider.embed_one(text)?;
            match dim {
                None => dim = Some(v.dim()),
                Some(d) if d != v.dim() => {
                    return Err(RetrieveError::DimensionMismatch {
                        expected: d,
                        got: v.dim(),
                    })
                }
                _ => {}
            }
            tool_ids.push(tool.tool_id.clone());
            vectors.push(v.values);
        }
        Ok(ToolIndex {
            dim: dim.unwrap(),
            tool_ids,
            vectors,
            provenance: IndexProvenance {
                corpus_id: corpus.corpus_id.clone(),
                format,
                provider_id: provider.provider_id().to_string(),
                model_id: provider.model_id().to_string(),
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tool_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tool_ids.is_empty()
    }

    pub fn provenance(&self) -> &IndexProvenance {
        &self.provenance
    }

    pub fn contains(&self, tool_id: &str) -> bool {
        self.tool_ids.iter().any(|t| t == tool_id)
    }

    pub fn tool_ids(&self) -> &[String] {
        &self.tool_ids
    }

    /// Scores a pre-embedded query vector against every entry and returns the
    /// full descending ranking with the deterministic tie-break.
    pub fn rank_vector(&self, query: &Embedding<S>) -> Result<RetrievalResult<S>, RetrieveError> {
        if self.tool_ids.is_empty() {
            return Err(RetrieveError::EmptyCorpus);
        }
        if query.dim() != self.dim {
            return Err(RetrieveError::DimensionMismatch {
                expected: self.dim,
                got: query.dim(),
            });
        }
        let mut scored: Vec<(usize, S)> = self
            .vectors
            .iter()
            .map(|v| dot(&query.values, v))
            .enumerate()
            .collect();
        scored.sort_by(|(ia, sa), (ib, sb)| {
            sb.partial_cmp(sa)
                .expect("finite scores")
                .then_with(|| self.tool_ids[*ia].cmp(&self.tool_ids[*ib]))
        });
        let ranking: Vec<(String, S)> = scored
            .into_iter()
            .map(|(i, s)| (self.tool_ids[i].clone(), s))
            .collect();
        let selected = ranking[0].0.clone();
        Ok(RetrievalResult { ranking, selected })
    }

    /// Persists the index as JSONL: one header line, then one entry per tool.
    pub fn save(&self, path: &Path) -> Result<(), RetrieveError> {
        let mut w = BufWriter::new(File::create(path)?);
        let header = IndexHeader {
            version: INDEX_VERSION,
            dim: self.dim,
            provenance: self.provenance.clone(),
        };
        serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        for (tool_id, vector) in self.tool_ids.iter().zip(&self.vectors) {
            let values: Vec<f64> = vector
                .iter()
                .map(|v| v.to_f64().expect("scalar converts to f64"))
                .collect();
            let entry = IndexEntry {
                tool_id: tool_id.clone(),
                values,
            };
            serde_json::to_writer(&mut w, &entry).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads an index, verifying the header against the expected provenance.
    pub fn load(path: &Path, expected: Option<&IndexProvenance>) -> Result<Self, RetrieveError> {
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| RetrieveError::Malformed("empty index file".into()))??;
        let header: IndexHeader = serde_json::from_str(&header_line)
            .map_err(|e| RetrieveError::Malformed(format!("header: {e}")))?;
        if header.version != INDEX_VERSION {
            return Err(RetrieveError::Malformed(format!(
                "unsupported index version {}",
                header.version
            )));
        }
        if let Some(expected) = expected {
            if *expected != header.provenance {
                return Err(RetrieveError::ProvenanceMismatch(format!(
                    "expected {:?}, file has {:?}",
                    expected, header.provenance
                )));
            }
        }
        let mut tool_ids = Vec::new();
        let mut vectors = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: IndexEntry = serde_json::from_str(&line)
                .map_err(|e| RetrieveError::Malformed(format!("entry {}: {e}", i + 2)))?;
            if entry.values.len() != header.dim {
                return Err(RetrieveError::Malformed(format!(
                    "entry {} has dim {}, header says {}",
                    i + 2,
                    entry.values.len(),
                    header.dim
                )));
            }
            tool_ids.push(entry.tool_id);
            vectors.push(entry.values.iter().map(|&v| S::from_f64_lossy(v)).collect());
        }
        if tool_ids.is_empty() {
            return Err(RetrieveError::EmptyCorpus);
        }
        Ok(ToolIndex {
            dim: header.dim,
            tool_ids,
            vectors,
            provenance: header.provenance,
        })
    }
}

const INDEX_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct IndexHeader {
    version: u32,
    dim: usize,
    provenance: IndexProvenance,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    tool_id: String,
    values: Vec<f64>,
}

/// Embeds a task description and returns the argmax selection plus the full
/// descending ranking behind it.
pub fn select_tool<S: Real>(
    task: &TaskDescription,
    index: &ToolIndex<S>,
    provider: &dyn EmbeddingProvider<S>,
) -> Result<RetrievalResult<S>, RetrieveError> {
    let query = provider.embed_one(&canonical_text_task(task))?;
    index.rank_vector(&query)
}

/// 1-based position of `target_tool_id` in the ranking for `task`.
pub fn rank_of<S: Real>(
    task: &TaskDescription,
    index: &ToolIndex<S>,
    provider: &dyn EmbeddingProvider<S>,
    target_tool_id: &str,
) -> Result<usize, RetrieveError> {
    if !index.contains(target_tool_id) {
        return Err(RetrieveError::UnknownTool(target_tool_id.to_string()));
    }
    let result = select_tool(task, index, provider)?;
    Ok(result
        .ranking
        .iter()
        .position(|(id, _)| id == target_tool_id)
        .expect("target is in index")
        + 1)
}
