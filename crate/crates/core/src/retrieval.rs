//! Query-time retrieval over a store of mixed-granularity embeddings.
//!
//! 1. Each stored granularity is searched with a query embedding taken at
//!    that same depth; the best `k1` of each group survive.
//! 2. The groups are merged by score into at most `k2` distinct items. When
//!    an item shows up twice, the lower-scoring copy is discarded and its
//!    group offers its next candidate instead.
//! 3. Every surviving coarse candidate is resumed from its cached activation
//!    to full depth, upgraded in the store, and rescored against the
//!    full-depth query embedding.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::encoder::{EncoderStack, Modality};
use crate::error::{Error, Result};
use crate::numerics::cosine;
use crate::store::{EmbeddingStore, RecordState, Upgrade};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Candidate {
    pub item_id: u64,
    /// Store-side exit the item was matched at.
    pub granularity: usize,
    pub score: f32,
    pub rank: usize,
}

/// Descending score, ties to the smaller id.
fn by_score(a: &Candidate, b: &Candidate) -> Ordering {
    b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id))
}

/// Full ranking of one granularity; only the first `window` entries are
/// offered to the merge unless duplicates promote more.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup {
    pub granularity: usize,
    pub ranked: Vec<Candidate>,
    pub window: usize,
}

impl CandidateGroup {
    pub fn top(&self) -> &[Candidate] {
        &self.ranked[..self.window.min(self.ranked.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryOptions {
    pub k1: usize,
    pub k2: usize,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self { k1: 10, k2: 10 }
    }
}

/// One query embedding per requested exit from a single traversal: the
/// head is applied to the running hidden state as each exit is passed.
pub fn embed_query_multigranular(
    stack: &EncoderStack,
    modality: Modality,
    raw: &[f32],
    exits: &[usize],
) -> Result<BTreeMap<usize, Vec<f32>>> {
    let wanted: BTreeSet<usize> = exits.iter().copied().collect();
    let Some(&deepest) = wanted.last() else {
        return Err(Error::invalid("no granularities requested"));
    };
    if wanted.contains(&0) || deepest > stack.num_layers() {
        return Err(Error::OutOfRange(format!("exits {exits:?}")));
    }
    let mut out = BTreeMap::new();
    let mut h = stack.embed_input(modality, raw)?;
    for layer in 1..=deepest {
        h = stack.forward_layer(modality, layer, &h, true)?;
        if wanted.contains(&layer) {
            out.insert(layer, stack.apply_head(&h)?);
        }
    }
    Ok(out)
}

/// Ranks every record against the query embedding of its own granularity.
pub fn speculative_filter(
    store: &EmbeddingStore,
    queries: &BTreeMap<usize, Vec<f32>>,
    k1: usize,
) -> Result<Vec<CandidateGroup>> {
    if k1 == 0 {
        return Err(Error::invalid("k1 must be at least 1"));
    }
    let mut groups: BTreeMap<usize, Vec<Candidate>> = BTreeMap::new();
    for rec in store.records() {
        let g = store.granularity_of(&rec);
        let q = queries
            .get(&g)
            .ok_or_else(|| Error::invalid(format!("no query embedding for granularity {g}")))?;
        let score = cosine(q, &rec.embedding)?;
        groups.entry(g).or_default().push(Candidate { item_id: rec.item_id, granularity: g, score, rank: 0 });
    }
    Ok(groups
        .into_iter()
        .map(|(granularity, mut ranked)| {
            ranked.sort_by(by_score);
            for (i, c) in ranked.iter_mut().enumerate() {
                c.rank = i;
            }
            CandidateGroup { granularity, ranked, window: k1 }
        })
        .collect())
}

/// Merges groups by score into at most `k2` distinct items.
pub fn global_verify(groups: &[CandidateGroup], k2: usize) -> Result<Vec<Candidate>> {
    if k2 == 0 {
        return Err(Error::invalid("k2 must be at least 1"));
    }
    let mut cursor = vec![0usize; groups.len()];
    let mut limit: Vec<usize> = groups.iter().map(|g| g.window.min(g.ranked.len())).collect();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    while out.len() < k2 {
        let mut best: Option<usize> = None;
        for g in 0..groups.len() {
            if cursor[g] >= limit[g] {
                continue;
            }
            let c = &groups[g].ranked[cursor[g]];
            let better = match best {
                None => true,
                Some(b) => {
                    let o = &groups[b].ranked[cursor[b]];
                    by_score(c, o).then(c.granularity.cmp(&o.granularity)) == Ordering::Less
                }
            };
            if better {
                best = Some(g);
            }
        }
        let Some(g) = best else { break };
        let c = groups[g].ranked[cursor[g]];
        cursor[g] += 1;
        if seen.insert(c.item_id) {
            out.push(c);
        } else if limit[g] < groups[g].ranked.len() {
            // the losing copy's group offers its next candidate
            limit[g] += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorrectionStats {
    pub recomputed: usize,
    pub already_fine: usize,
}

/// Resumes coarse candidates to full depth, upgrades them in the store and
/// ranks everything by cosine against `fine_query`.
pub fn fine_correct(
    stack: &EncoderStack,
    store: &mut EmbeddingStore,
    candidates: &[Candidate],
    fine_query: &[f32],
) -> Result<(Vec<(u64, f32)>, CorrectionStats)> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidates to correct"));
    }
    let mut stats = CorrectionStats { recomputed: 0, already_fine: 0 };
    let mut ranking = Vec::with_capacity(candidates.len());
    for c in candidates {
        let (rec, cache) = store.get(c.item_id)?;
        let fine = match rec.state {
            RecordState::Fine => {
                stats.already_fine += 1;
                rec.embedding
            }
            RecordState::Coarse => {
                let entry = cache.ok_or_else(|| Error::Integrity(format!("coarse item {} has no cached activation", c.item_id)))?;
                let fine = stack.resume_to_fine(rec.modality, entry.layer, &entry.hidden())?;
                if store.upgrade_to_fine(c.item_id, &fine)? == Upgrade::Upgraded {
                    stats.recomputed += 1;
                }
                // score what the store now holds, so repeated queries see the
                // same values
                store.get(c.item_id)?.0.embedding
            }
        };
        ranking.push((c.item_id, cosine(fine_query, &fine)?));
    }
    ranking.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok((ranking, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct StageTimes {
    #[serde(serialize_with = "micros")]
    pub embed: Duration,
    #[serde(serialize_with = "micros")]
    pub filter: Duration,
    #[serde(serialize_with = "micros")]
    pub verify: Duration,
    #[serde(serialize_with = "micros")]
    pub correct: Duration,
}

fn micros<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_u64(d.as_micros() as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// Merged round-one candidates, best first.
    pub coarse: Vec<Candidate>,
    /// Final `(item_id, fine score)` ranking.
    pub ranking: Vec<(u64, f32)>,
    pub examined: usize,
    pub correction: CorrectionStats,
    pub times: StageTimes,
}

impl QueryResult {
    pub fn ids(&self) -> Vec<u64> {
        self.ranking.iter().map(|r| r.0).collect()
    }

    pub fn coarse_ids(&self) -> Vec<u64> {
        self.coarse.iter().map(|c| c.item_id).collect()
    }
}

pub fn query(
    stack: &EncoderStack,
    store: &mut EmbeddingStore,
    raw: &[f32],
    modality: Modality,
    opts: &QueryOptions,
) -> Result<QueryResult> {
    if store.is_empty() {
        return Err(Error::invalid("store is empty"));
    }
    let l = stack.num_layers();
    let t = Instant::now();
    let mut exits = store.list_exits();
    exits.push(l);
    let queries = embed_query_multigranular(stack, modality, raw, &exits)?;
    let embed = t.elapsed();

    let t = Instant::now();
    let groups = speculative_filter(store, &queries, opts.k1)?;
    let examined = groups.iter().map(|g| g.top().len()).sum();
    let filter = t.elapsed();

    let t = Instant::now();
    let coarse = global_verify(&groups, opts.k2)?;
    let verify = t.elapsed();

    let t = Instant::now();
    let (ranking, correction) = fine_correct(stack, store, &coarse, &queries[&l])?;
    let correct = t.elapsed();
    Ok(QueryResult { coarse, ranking, examined, correction, times: StageTimes { embed, filter, verify, correct } })
}

/// Fraction of queries whose true match is within the first `k` results.
pub fn recall_at(rankings: &[Vec<u64>], truth: &[u64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if rankings.len() != truth.len() {
        return Err(Error::DimensionMismatch { expected: truth.len(), got: rankings.len() });
    }
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let hits = rankings
        .iter()
        .zip(truth)
        .filter(|(r, t)| r.iter().take(k).any(|id| id == *t))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// One JSON line per query.
#[derive(Debug, Clone, Serialize)]
pub struct QueryReport {
    pub query_id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<u64>,
    /// Wall-clock stage times; left out when reports must be reproducible.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub times_us: Option<StageTimes>,
    pub examined: usize,
    pub verified: usize,
    pub recomputed: usize,
    pub ranking: Vec<RankedItem>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_at_1: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hit_at_k: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankedItem {
    pub item_id: u64,
    pub score: f32,
}

impl QueryReport {
    pub fn new(query_id: u64, truth: Option<u64>, result: &QueryResult) -> Self {
        let ids = result.ids();
        Self {
            query_id,
            truth,
            times_us: Some(result.times),
            examined: result.examined,
            verified: result.coarse.len(),
            recomputed: result.correction.recomputed,
            ranking: result.ranking.iter().map(|(id, s)| RankedItem { item_id: *id, score: *s }).collect(),
            hit_at_1: truth.map(|t| ids.first() == Some(&t)),
            hit_at_k: truth.map(|t| ids.contains(&t)),
        }
    }

    pub fn without_times(self) -> Self {
        Self { times_us: None, ..self }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report fields serialize")
    }
}
