//! Preference-pair construction from per-query candidate descriptions:
//! candidates are ranked by where the ground-truth tool lands in retrieval,
//! the best-ranked candidate becomes the chosen response, and a rejected one
//! is sampled uniformly from the rest. All-equal-rank sets are discarded.

use crate::embed::EmbeddingProvider;
use crate::llmclient::GenerationRecord;
use crate::retrieve::{rank_of, RetrieveError, ToolIndex};
use crate::scalar::Real;
use crate::tooldesc::{DecodingStrategy, DescriptionBody, TaskDescription};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PrefError {
    #[error("unknown tool \"{0}\"")]
    UnknownTool(String),
    #[error("fewer than 2 parsed candidates remain ({0})")]
    TooFewCandidates(usize),
    #[error("duplicate decoding strategy in candidate set")]
    DuplicateStrategy,
    #[error("retrieval error: {0}")]
    Retrieve(#[from] RetrieveError),
    #[error("eval fraction must be in [0, 1), got {0}")]
    BadEvalFraction(f64),
}

/// Candidate descriptions generated for one query, one per decoding strategy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSet {
    pub query_id: String,
    pub gt_tool_id: String,
    pub candidates: Vec<GenerationRecord>,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<(), PrefError> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.candidates {
            if !seen.insert(c.strategy) {
                return Err(PrefError::DuplicateStrategy);
            }
        }
        Ok(())
    }
}

/// A chosen/rejected pair with the ranks that justified the choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub query_id: String,
    pub chosen: DescriptionBody,
    pub rejected: DescriptionBody,
    pub chosen_rank: usize,
    pub rejected_rank: usize,
    pub chosen_strategy: DecodingStrategy,
    pub rejected_strategy: DecodingStrategy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscardReason {
    AllRanksEqual,
    TooFewParsed,
}

#[derive(Debug)]
pub enum PairOutcome {
    Pair(PreferencePair),
    Discard(DiscardReason),
}

/// Build accounting; emitted pairs plus discards add up to the input sets.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PrefBuildReport {
    pub pairs_emitted: usize,
    pub sets_discarded_all_equal: usize,
    pub sets_discarded_parse_failures: usize,
    pub per_strategy_wins: BTreeMap<String, usize>,
}

/// A parsed candidate with its 1-based ground-truth rank.
#[derive(Debug, Clone)]
pub struct RankedCandidate {
    /// Index into the original candidate list.
    pub candidate_index: usize,
    pub strategy: DecodingStrategy,
    pub task: TaskDescription,
    pub rank: usize,
}

/// Ranks every parsed candidate by the ground-truth tool's retrieval rank.
/// Unparsed candidates are excluded; fewer than 2 parsed survivors is an
/// error.
pub fn rank_candidates<S: Real>(
    set: &CandidateSet,
    index: &ToolIndex<S>,
    provider: &dyn EmbeddingProvider<S>,
) -> Result<Vec<RankedCandidate>, PrefError> {
    set.validate()?;
    if !index.contains(&set.gt_tool_id) {
        return Err(PrefError::UnknownTool(set.gt_tool_id.clone()));
    }
    let parsed: Vec<(usize, &TaskDescription)> = set
        .candidates
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.parsed.as_ref().map(|t| (i, t)))
        .collect();
    if parsed.len() < 2 {
        return Err(PrefError::TooFewCandidates(parsed.len()));
    }
    let mut out = Vec::with_capacity(parsed.len());
    for (i, task) in parsed {
        let rank = rank_of(task, index, provider, &set.gt_tool_id)?;
        out.push(RankedCandidate {
            candidate_index: i,
            strategy: set.candidates[i].strategy,
            task: task.clone(),
            rank,
        });
    }
    Ok(out)
}

/// Forms one preference pair from ranked candidates: chosen = minimum rank
/// (ties broken by smallest candidate index), rejected drawn uniformly from
/// all remaining candidates. All-equal ranks discard the set.
pub fn build_pair<R: Rng>(
    query_id: &str,
    ranked: &[RankedCandidate],
    rng: &mut R,
) -> PairOutcome {
    debug_assert!(ranked.len() >= 2);
    let first = ranked[0].rank;
    if ranked.iter().all(|c| c.rank == first) {
        return PairOutcome::Discard(DiscardReason::AllRanksEqual);
    }
    let chosen_pos = ranked
        .iter()
        .enumerate()
        .min_by_key(|(_, c)| (c.rank, c.candidate_index))
        .map(|(pos, _)| pos)
        .unwrap();
    let remaining: Vec<usize> = (0..ranked.len()).filter(|&p| p != chosen_pos).collect();
    let rejected_pos = remaining[rng.gen_range(0..remaining.len())];
    let chosen = &ranked[chosen_pos];
    let rejected = &ranked[rejected_pos];
    PairOutcome::Pair(PreferencePair {
        query_id: query_id.to_string(),
        chosen: DescriptionBody {
            input: chosen.task.input.clone(),
            process: chosen.task.process.clone(),
            output: chosen.task.output.clone(),
        },
        rejected: DescriptionBody {
            input: rejected.task.input.clone(),
            process: rejected.task.process.clone(),
            output: rejected.task.output.clone(),
        },
        chosen_rank: chosen.rank,
        rejected_rank: rejected.rank,
        chosen_strategy: chosen.strategy,
        rejected_strategy: rejected.strategy,
    })
}

/// Builds the full preference dataset: one pair per usable set, seeded
/// shuffle, then the last `floor(eval_fraction * n)` pairs held out for
/// evaluation.
pub fn build_dataset<S: Real>(
    sets: &[CandidateSet],
    index: &ToolIndex<S>,
    provider: &dyn EmbeddingProvider<S>,
    seed: u64,
    eval_fraction: f64,
) -> Result<(Vec<PreferencePair>, Vec<PreferencePair>, PrefBuildReport), PrefError> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(PrefError::BadEvalFraction(eval_fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = PrefBuildReport::default();
    let mut pairs = Vec::new();
    for set in sets {
        let ranked = match rank_candidates(set, index, provider) {
            Ok(r) => r,
            Err(PrefError::TooFewCandidates(_)) => {
                report.sets_discarded_parse_failures += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        match build_pair(&set.query_id, &ranked, &mut rng) {
            PairOutcome::Pair(pair) => {
                *report
                    .per_strategy_wins
                    .entry(pair.chosen_strategy.label().to_string())
                    .or_insert(0) += 1;
                pairs.push(pair);
            }
            PairOutcome::Discard(DiscardReason::AllRanksEqual) => {
                report.sets_discarded_all_equal += 1;
            }
            PairOutcome::Discard(DiscardReason::TooFewParsed) => {
                report.sets_discarded_parse_failures += 1;
            }
        }
    }
    report.pairs_emitted = pairs.len();
    pairs.shuffle(&mut rng);
    // Tiny nudge guards the exact-integer boundary of the float product.
    let n_eval = ((eval_fraction * pairs.len() as f64) + 1e-9).floor() as usize;
    let eval = pairs.split_off(pairs.len() - n_eval);
    Ok((pairs, eval, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tooldesc::DescFormat;

    fn ranked(ranks: &[usize]) -> Vec<RankedCandidate> {
        ranks
            .iter()
            .enumerate()
            .map(|(i, &rank)| RankedCandidate {
                candidate_index: i,
                strategy: DecodingStrategy::ALL[i % 5],
                task: TaskDescription {
                    format: DescFormat::Json,
                    input: format!("in{i}"),
                    process: format!("proc{i}"),
                    output: format!("out{i}"),
                    strategy: DecodingStrategy::ALL[i % 5],
                    raw: String::new(),
                },
                rank,
            })
            .collect()
    }

    #[test]
    fn chosen_is_first_of_minimum_rank_ties() {
        // Ranks [3, 1, 5, 1, 2]: candidate index 1 wins (first rank-1 tie).
        let ranked = ranked(&[3, 1, 5, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        match build_pair("q", &ranked, &mut rng) {
            PairOutcome::Pair(pair) => {
                assert_eq!(pair.chosen_rank, 1);
                assert_eq!(pair.chosen.process, "proc1");
                assert_ne!(pair.rejected.process, "proc1");
            }
            other => panic!("expected pair, got {other:?}"),
        }
    }

    #[test]
    fn all_equal_ranks_discarded() {
        let ranked = ranked(&[2, 2, 2, 2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            build_pair("q", &ranked, &mut rng),
            PairOutcome::Discard(DiscardReason::AllRanksEqual)
        ));
    }

    #[test]
    fn two_candidates_forced_pair() {
        let ranked = ranked(&[1, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match build_pair("q", &ranked, &mut rng) {
            PairOutcome::Pair(pair) => {
                assert_eq!(pair.chosen.process, "proc0");
                assert_eq!(pair.rejected.process, "proc1");
                assert_eq!((pair.chosen_rank, pair.rejected_rank), (1, 4));
            }
            other => panic!("expected pair, got {other:?}"),
        }
    }

    #[test]
    fn rejected_rank_may_beat_ties_rule() {
        // y_l is sampled, not the worst: chosen_rank <= rejected_rank is NOT
        // required when ranks interleave, but chosen is always the minimum.
        let ranked = ranked(&[2, 1, 3]);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            if let PairOutcome::Pair(pair) = build_pair("q", &ranked, &mut rng) {
                assert_eq!(pair.chosen_rank, 1);
                assert!(pair.rejected_rank == 2 || pair.rejected_rank == 3);
            }
        }
    }

    #[test]
    fn seeded_draw_reproducible() {
        let ranked = ranked(&[3, 1, 5, 1, 2]);
        let pick = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match build_pair("q", &ranked, &mut rng) {
                PairOutcome::Pair(p) => p.rejected.process,
                _ => unreachable!(),
            }
        };
        assert_eq!(pick(42), pick(42));
    }

    #[test]
    fn rejected_draw_is_uniform() {
        // Chi-square over 10^4 seeded draws across the 4 remaining
        // candidates; critical value for df = 3 at p = 0.01 is 11.345.
        let ranked = ranked(&[3, 1, 5, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = std::collections::HashMap::new();
        let n = 10_000;
        for _ in 0..n {
            if let PairOutcome::Pair(pair) = build_pair("q", &ranked, &mut rng) {
                *counts.entry(pair.rejected.process.clone()).or_insert(0usize) += 1;
            }
        }
        assert_eq!(counts.len(), 4);
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 11.345, "chi2 = {chi2}");
        for &c in counts.values() {
            let frac = c as f64 / n as f64;
            assert!((frac - 0.25).abs() < 0.02, "fraction {frac}");
        }
    }

    #[test]
    fn candidate_set_rejects_duplicate_strategy() {
        let record = GenerationRecord {
            query_id: "q".into(),
            strategy: DecodingStrategy::Greedy,
            raw_output: String::new(),
            parsed: None,
            parse_error: Some("x".into()),
        };
        let set = CandidateSet {
            query_id: "q".into(),
            gt_tool_id: "t".into(),
            candidates: vec![record.clone(), record],
        };
        assert!(matches!(set.validate(), Err(PrefError::DuplicateStrategy)));
    }
}
