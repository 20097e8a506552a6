//! Corpus ingestion, cleaning, tool-level splitting, and dataset statistics,
//! plus the single-card model-card fetch primitive.

use crate::embed::RetryPolicy;
use crate::tooldesc::{canonical_text_tool, DescFormat, Modality, Query, SchemaError, ToolDescription};
use crate::util::{read_jsonl, write_jsonl};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use thiserror::Error;

/// The tool collection a retrieval index is built from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToolCorpus {
    pub corpus_id: String,
    pub tools: Vec<ToolDescription>,
}

impl ToolCorpus {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for tool in &self.tools {
            tool.validate().map_err(CorpusError::Schema)?;
            if !seen.insert(tool.tool_id.as_str()) {
                return Err(CorpusError::DuplicateId(tool.tool_id.clone()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, corpus_id: &str) -> Result<Self, CorpusError> {
        let tools = read_jsonl(path)?;
        let corpus = ToolCorpus {
            corpus_id: corpus_id.to_string(),
            tools,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        write_jsonl(path, &self.tools)?;
        Ok(())
    }

    pub fn tool(&self, tool_id: &str) -> Option<&ToolDescription> {
        self.tools.iter().find(|t| t.tool_id == tool_id)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuerySet {
    pub set_id: String,
    pub queries: Vec<Query>,
}

impl QuerySet {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut seen = HashSet::new();
        for q in &self.queries {
            q.validate().map_err(CorpusError::Schema)?;
            if !seen.insert(q.query_id.as_str()) {
                return Err(CorpusError::DuplicateId(q.query_id.clone()));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, set_id: &str) -> Result<Self, CorpusError> {
        let queries = read_jsonl(path)?;
        let set = QuerySet {
            set_id: set_id.to_string(),
            queries,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        write_jsonl(path, &self.queries)?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("schema error: {0}")]
    Schema(SchemaError),
    #[error("duplicate id \"{0}\"")]
    DuplicateId(String),
    #[error("modality {0:?} has fewer than 2 tools; cannot populate both splits")]
    EmptyModality(Modality),
    #[error("split ratio must be in (0, 1), got {0}")]
    BadRatio(f64),
    #[error("repository \"{0}\" not found")]
    NotFound(String),
    #[error("network error after retries: {0}")]
    Network(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Cleaning
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Removal {
    pub id: String,
    pub reason: String,
}

/// Every removal performed by [`clean`], with its reason.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CleanReport {
    pub duplicate_tools: Vec<Removal>,
    pub dangling_queries: Vec<Removal>,
    pub duplicate_queries: Vec<Removal>,
}

impl CleanReport {
    pub fn is_empty(&self) -> bool {
        self.duplicate_tools.is_empty()
            && self.dangling_queries.is_empty()
            && self.duplicate_queries.is_empty()
    }

    pub fn total_removals(&self) -> usize {
        self.duplicate_tools.len() + self.dangling_queries.len() + self.duplicate_queries.len()
    }
}

/// Collapses duplicate tools (identical canonical text) to the
/// lexicographically smallest tool_id, drops queries whose gt_tool_id is
/// absent from the cleaned corpus, and deduplicates exact-duplicate queries.
pub fn clean(tools: &ToolCorpus, queries: &QuerySet) -> (ToolCorpus, QuerySet, CleanReport) {
    let mut report = CleanReport::default();

    // Group tools by canonical description text; survivor = smallest tool_id.
    let mut groups: BTreeMap<String, Vec<&ToolDescription>> = BTreeMap::new();
    for tool in &tools.tools {
        groups
            .entry(canonical_text_tool(tool, DescFormat::Json))
            .or_default()
            .push(tool);
    }
    let mut survivors: Vec<ToolDescription> = Vec::new();
    for group in groups.values() {
        let keeper = group
            .iter()
            .min_by(|a, b| a.tool_id.cmp(&b.tool_id))
            .unwrap();
        for tool in group.iter() {
            if tool.tool_id != keeper.tool_id {
                report.duplicate_tools.push(Removal {
                    id: tool.tool_id.clone(),
                    reason: format!("duplicate description of \"{}\"", keeper.tool_id),
                });
            }
        }
        survivors.push((**keeper).clone());
    }
    // Preserve original corpus order among survivors.
    let surviving_ids: HashSet<&str> = survivors.iter().map(|t| t.tool_id.as_str()).collect();
    let ordered: Vec<ToolDescription> = tools
        .tools
        .iter()
        .filter(|t| surviving_ids.contains(t.tool_id.as_str()))
        .cloned()
        .collect();

    let tool_ids: HashSet<&str> = ordered.iter().map(|t| t.tool_id.as_str()).collect();

    // Drop dangling queries, then exact duplicates (keep smallest query_id).
    let mut by_content: HashMap<(String, Vec<u8>, Option<String>), String> = HashMap::new();
    let mut kept_ids: HashSet<String> = HashSet::new();
    let mut sorted_queries: Vec<&Query> = queries.queries.iter().collect();
    sorted_queries.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    for q in &sorted_queries {
        if let Some(gt) = &q.gt_tool_id {
            if !tool_ids.contains(gt.as_str()) {
                report.dangling_queries.push(Removal {
                    id: q.query_id.clone(),
                    reason: "dangling gt_tool_id".into(),
                });
                continue;
            }
        }
        let content_key = (
            q.text.clone(),
            serde_json::to_vec(&q.attachments).unwrap(),
            q.gt_tool_id.clone(),
        );
        match by_content.get(&content_key) {
            Some(keeper) => {
                report.duplicate_queries.push(Removal {
                    id: q.query_id.clone(),
                    reason: format!("duplicate of query \"{keeper}\""),
                });
            }
            None => {
                by_content.insert(content_key, q.query_id.clone());
                kept_ids.insert(q.query_id.clone());
            }
        }
    }
    let kept_queries: Vec<Query> = queries
        .queries
        .iter()
        .filter(|q| kept_ids.contains(&q.query_id))
        .cloned()
        .collect();

    (
        ToolCorpus {
            corpus_id: tools.corpus_id.clone(),
            tools: ordered,
        },
        QuerySet {
            set_id: queries.set_id.clone(),
            queries: kept_queries,
        },
        report,
    )
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Tool-level train/test assignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train_tool_ids: BTreeSet<String>,
    pub test_tool_ids: BTreeSet<String>,
    pub ratio: f64,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn split_of(&self, tool_id: &str) -> Option<SplitSide> {
        if self.train_tool_ids.contains(tool_id) {
            Some(SplitSide::Train)
        } else if self.test_tool_ids.contains(tool_id) {
            Some(SplitSide::Test)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitSide {
    Train,
    Test,
}

/// Splits tools per modality class: within each modality the tools are
/// shuffled by a seeded PRNG and the first `floor(ratio * n)` go to train.
/// Queries inherit the split of their gt_tool_id, so no test tool's queries
/// ever appear in train.
pub fn split_tools(
    corpus: &ToolCorpus,
    _queries: &QuerySet,
    ratio: f64,
    seed: u64,
) -> Result<SplitAssignment, CorpusError> {
    if !(0.0..1.0).contains(&ratio) || ratio == 0.0 {
        return Err(CorpusError::BadRatio(ratio));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for modality in Modality::ALL {
        let mut ids: Vec<&str> = corpus
            .tools
            .iter()
            .filter(|t| t.modality == modality)
            .map(|t| t.tool_id.as_str())
            .collect();
        if ids.is_empty() {
            continue;
        }
        if ids.len() < 2 {
            return Err(CorpusError::EmptyModality(modality));
        }
        // Sort before shuffling so the assignment depends only on the id set
        // and the seed, not on input file order.
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        // Tiny nudge guards the exact-integer boundary of the float product.
        let n_train = ((ratio * ids.len() as f64) + 1e-9).floor() as usize;
        for (i, id) in ids.iter().enumerate() {
            if i < n_train {
                train.insert((*id).to_string());
            } else {
                test.insert((*id).to_string());
            }
        }
    }
    Ok(SplitAssignment {
        train_tool_ids: train,
        test_tool_ids: test,
        ratio,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// One row of counts: per-modality and total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRow {
    pub text: usize,
    pub image: usize,
    pub audio: usize,
    pub all: usize,
}

impl CountRow {
    fn bump(&mut self, modality: Modality) {
        match modality {
            Modality::Text => self.text += 1,
            Modality::Image => self.image += 1,
            Modality::Audio => self.audio += 1,
        }
        self.all += 1;
    }

    fn add(&self, other: &CountRow) -> CountRow {
        CountRow {
            text: self.text + other.text,
            image: self.image + other.image,
            audio: self.audio + other.audio,
            all: self.all + other.all,
        }
    }
}

/// Per-split unique query and tool counts, per modality and overall.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub train_queries: CountRow,
    pub test_queries: CountRow,
    pub overall_queries: CountRow,
    pub train_tools: CountRow,
    pub test_tools: CountRow,
    pub overall_tools: CountRow,
}

/// Counts unique queries and tools per modality for each split. Queries are
/// assigned through their gt_tool_id; queries without a ground-truth tool are
/// not counted.
pub fn stats(corpus: &ToolCorpus, queries: &QuerySet, split: &SplitAssignment) -> DatasetStats {
    let mut out = DatasetStats::default();
    for tool in &corpus.tools {
        match split.split_of(&tool.tool_id) {
            Some(SplitSide::Train) => out.train_tools.bump(tool.modality),
            Some(SplitSide::Test) => out.test_tools.bump(tool.modality),
            None => {}
        }
    }
    for q in &queries.queries {
        let modality = match q.modality() {
            Ok(m) => m,
            Err(_) => continue,
        };
        let side = q.gt_tool_id.as_deref().and_then(|gt| split.split_of(gt));
        match side {
            Some(SplitSide::Train) => out.train_queries.bump(modality),
            Some(SplitSide::Test) => out.test_queries.bump(modality),
            None => {}
        }
    }
    out.overall_tools = out.train_tools.add(&out.test_tools);
    out.overall_queries = out.train_queries.add(&out.test_queries);
    out
}

impl DatasetStats {
    /// Aligned plain-text table: rows train/test/overall, query and tool
    /// columns per modality.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>28}   {:>28}\n",
            "", "Unique Queries", "Unique Tools"
        ));
        out.push_str(&format!(
            "{:<10} {:>6} {:>6} {:>6} {:>7}   {:>6} {:>6} {:>6} {:>7}\n",
            "", "Text", "Image", "Audio", "All", "Text", "Image", "Audio", "All"
        ));
        for (label, q, t) in [
            ("Training", &self.train_queries, &self.train_tools),
            ("Test", &self.test_queries, &self.test_tools),
            ("Overall", &self.overall_queries, &self.overall_tools),
        ] {
            out.push_str(&format!(
                "{:<10} {:>6} {:>6} {:>6} {:>7}   {:>6} {:>6} {:>6} {:>7}\n",
                label, q.text, q.image, q.audio, q.all, t.text, t.image, t.audio, t.all
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Model-card fetch
// ---------------------------------------------------------------------------

/// Fetches the raw README for a repository: GET
/// `<base>/<repo_id>/raw/main/README.md`, retried with exponential backoff.
pub fn fetch_model_card(
    repo_id: &str,
    base_url: &str,
    retry: &RetryPolicy,
) -> Result<String, CorpusError> {
    let url = format!("{}/{}/raw/main/README.md", base_url.trim_end_matches('/'), repo_id);
    let client = reqwest::blocking::Client::new();
    let mut last_err = String::new();
    for attempt in 0..retry.attempts {
        match client.get(&url).send() {
            Ok(resp) => {
                let status = resp.status().as_u16();
                if status == 404 {
                    return Err(CorpusError::NotFound(repo_id.to_string()));
                }
                if (200..300).contains(&status) {
                    return resp.text().map_err(|e| CorpusError::Network(e.to_string()));
                }
                last_err = format!("status {status}");
            }
            Err(e) => last_err = e.to_string(),
        }
        if attempt + 1 < retry.attempts {
            std::thread::sleep(retry.backoff(attempt));
        }
    }
    Err(CorpusError::Network(last_err))
}
