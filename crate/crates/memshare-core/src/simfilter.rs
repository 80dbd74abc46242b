//! Two-stage reuse filter over steps and cache blocks.
//!
//! Stage 1 screens candidate steps cheaply: each step becomes a bag-of-words
//! count vector over its token ids and is compared to earlier steps by cosine
//! similarity. Stage 2 then measures the layer-averaged normalized Euclidean
//! distance between the candidate steps' cache blocks; block pairs under the
//! distance ceiling are proposed for sharing.
//!
//! Blocks live on the sequence-global grid (`block i` covers tokens
//! `[i*block_size, (i+1)*block_size)`). A step's full blocks are the grid
//! blocks wholly inside its token span; candidate steps are aligned full
//! block by full block, in order.

use std::collections::BTreeMap;

use crate::error::{invalid_arg, Result};
use crate::kvgen::{KVStates, StepRecord, TokenId, Trace};
use crate::tensorlab::frobenius_distance;

/// Bag-of-words count vector over token ids. Zero counts are never stored;
/// the L2 norm is cached at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseTokenVector {
    entries: BTreeMap<TokenId, u32>,
    norm_sq: u64,
}

impl SparseTokenVector {
    pub fn from_tokens(tokens: &[TokenId]) -> Self {
        let mut entries: BTreeMap<TokenId, u32> = BTreeMap::new();
        for &t in tokens {
            *entries.entry(t).or_insert(0) += 1;
        }
        let norm_sq = entries.values().map(|&c| (c as u64) * (c as u64)).sum();
        Self { entries, norm_sq }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, token: TokenId) -> u32 {
        self.entries.get(&token).copied().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn norm(&self) -> f64 {
        (self.norm_sq as f64).sqrt()
    }
}

/// Encodes a step as its token count vector; order-insensitive.
pub fn encode_step(step: &StepRecord) -> SparseTokenVector {
    SparseTokenVector::from_tokens(&step.tokens)
}

/// Cosine similarity between two count vectors. Counts are nonnegative, so
/// the result lies in `[0, 1]`; proportional vectors yield exactly 1.0.
pub fn cosine(a: &SparseTokenVector, b: &SparseTokenVector) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid_arg("cosine of an empty token vector is undefined"));
    }
    let mut dot: u64 = 0;
    for (token, &ca) in &a.entries {
        if let Some(&cb) = b.entries.get(token) {
            dot += (ca as u64) * (cb as u64);
        }
    }
    // Exact integer test for proportionality avoids sqrt rounding at 1.0.
    if (dot as u128) * (dot as u128) == (a.norm_sq as u128) * (b.norm_sq as u128) {
        return Ok(if dot == 0 { 0.0 } else { 1.0 });
    }
    let value = dot as f64 / (a.norm() * b.norm());
    Ok(value.clamp(0.0, 1.0))
}

/// Filter knobs: the Stage-1 cosine floor, the Stage-2 distance ceiling, and
/// the candidate budget carried from Stage 1 into Stage 2.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Thresholds {
    pub step_threshold: f64,
    pub block_distance_threshold: f64,
    pub top_k: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            step_threshold: 0.8,
            block_distance_threshold: 0.0,
            top_k: 8,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.step_threshold) {
            return Err(invalid_arg("step_threshold must be in [0, 1]"));
        }
        if self.block_distance_threshold.is_nan() || self.block_distance_threshold < 0.0 {
            return Err(invalid_arg("block_distance_threshold must be nonnegative"));
        }
        if self.top_k == 0 {
            return Err(invalid_arg("top_k must be at least 1"));
        }
        Ok(())
    }
}

/// A Stage-1 survivor: an earlier step whose cosine with the current step
/// clears the step threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMatch {
    pub curr_step: usize,
    pub cand_step: usize,
    pub cosine: f64,
}

/// A Stage-2 result: a later (target) block that can reuse an earlier
/// (source) block's physical storage.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMatch {
    pub target_block: usize,
    pub source_block: usize,
    pub distance: f64,
}

/// Stage 1: all earlier steps with cosine at or above the step threshold,
/// sorted by cosine descending (ties toward the smaller step index), then
/// truncated to the top-k budget.
pub fn stage1_candidates(
    curr: &StepRecord,
    history: &[StepRecord],
    th: &Thresholds,
) -> Result<Vec<CandidateMatch>> {
    th.validate()?;
    if curr.tokens.is_empty() {
        return Err(invalid_arg("current step has no tokens"));
    }
    let curr_vec = encode_step(curr);
    let mut out = Vec::new();
    for cand in history {
        if cand.step_index >= curr.step_index {
            return Err(invalid_arg("history must contain only earlier steps"));
        }
        let sim = cosine(&curr_vec, &encode_step(cand))?;
        if sim >= th.step_threshold {
            out.push(CandidateMatch {
                curr_step: curr.step_index,
                cand_step: cand.step_index,
                cosine: sim,
            });
        }
    }
    out.sort_by(|a, b| {
        b.cosine
            .partial_cmp(&a.cosine)
            .unwrap()
            .then(a.cand_step.cmp(&b.cand_step))
    });
    out.truncate(th.top_k);
    Ok(out)
}

/// Borrowed view of one cache block's worth of KV data.
#[derive(Debug, Clone, Copy)]
pub struct KvBlockView<'a> {
    kv: &'a KVStates,
    first_token: usize,
    num_tokens: usize,
}

impl<'a> KvBlockView<'a> {
    /// View of grid block `block_index`. The final block of a sequence may
    /// come back shorter than `block_size`.
    pub fn new(kv: &'a KVStates, block_index: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(invalid_arg("block_size must be positive"));
        }
        let first_token = block_index * block_size;
        if first_token >= kv.num_tokens {
            return Err(invalid_arg(format!(
                "block {block_index} starts past the last token"
            )));
        }
        let num_tokens = block_size.min(kv.num_tokens - first_token);
        Ok(Self {
            kv,
            first_token,
            num_tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.num_tokens
    }

    pub fn is_empty(&self) -> bool {
        self.num_tokens == 0
    }
}

fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|x| *x as f64).collect()
}

/// Stage 2: layer-averaged normalized Euclidean distance between two full
/// blocks. Per layer, the key and value Frobenius distances over the
/// `[block_size x heads x head_dim]` slices are summed and normalized by
/// `2 * block_size * heads`; the result is the mean over layers.
pub fn stage2_block_distance(
    a: &KvBlockView,
    b: &KvBlockView,
    block_size: usize,
) -> Result<f64> {
    let (ka, kb) = (a.kv, b.kv);
    if ka.num_layers != kb.num_layers
        || ka.num_heads != kb.num_heads
        || ka.head_dim != kb.head_dim
    {
        return Err(invalid_arg("block views have mismatched KV shapes"));
    }
    if a.len() != block_size || b.len() != block_size {
        return Err(invalid_arg(format!(
            "stage 2 requires fully filled blocks ({} and {} of {} tokens)",
            a.len(),
            b.len(),
            block_size
        )));
    }
    let denom = 2.0 * (block_size * ka.num_heads) as f64;
    let mut total = 0.0;
    for layer in 0..ka.num_layers {
        let dk = frobenius_distance(
            &to_f64(ka.layer_keys(layer, a.first_token, block_size)),
            &to_f64(kb.layer_keys(layer, b.first_token, block_size)),
        )?;
        let dv = frobenius_distance(
            &to_f64(ka.layer_values(layer, a.first_token, block_size)),
            &to_f64(kb.layer_values(layer, b.first_token, block_size)),
        )?;
        total += (dk + dv) / denom;
    }
    Ok(total / ka.num_layers as f64)
}

/// Grid blocks wholly contained in a step's token span.
pub fn full_blocks_of_step(step: &StepRecord, block_size: usize) -> Vec<usize> {
    let start = step.token_offset;
    let end = start + step.tokens.len();
    let first = start.div_ceil(block_size);
    let last_end = end / block_size;
    (first..last_end).collect()
}

/// Runs both stages for the latest step of `steps` against all prior steps.
/// Candidate pairs are aligned full block by full block; each target block is
/// reported at most once, matched to its minimum-distance source (ties toward
/// the earliest source block).
pub fn find_reusable_blocks(
    steps: &[StepRecord],
    kv: &KVStates,
    th: &Thresholds,
    block_size: usize,
) -> Result<Vec<BlockMatch>> {
    th.validate()?;
    let Some((curr, history)) = steps.split_last() else {
        return Err(invalid_arg("at least one step is required"));
    };
    if steps.iter().enumerate().any(|(i, s)| s.step_index != i) {
        return Err(invalid_arg(
            "steps must be a trace prefix starting at step 0",
        ));
    }
    if kv.num_tokens < curr.token_offset + curr.tokens.len() {
        return Err(invalid_arg("KV states do not cover the trace tokens"));
    }

    let candidates = stage1_candidates(curr, history, th)?;
    let target_blocks = full_blocks_of_step(curr, block_size);
    if target_blocks.is_empty() {
        return Ok(Vec::new());
    }

    // target block -> (distance, source block)
    let mut best: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for cand in &candidates {
        let source_blocks = full_blocks_of_step(&steps[cand.cand_step], block_size);
        for (tb, sb) in target_blocks.iter().zip(&source_blocks) {
            let d = stage2_block_distance(
                &KvBlockView::new(kv, *tb, block_size)?,
                &KvBlockView::new(kv, *sb, block_size)?,
                block_size,
            )?;
            if d <= th.block_distance_threshold {
                let better = match best.get(tb) {
                    None => true,
                    Some(&(bd, bs)) => d < bd || (d == bd && *sb < bs),
                };
                if better {
                    best.insert(*tb, (d, *sb));
                }
            }
        }
    }

    Ok(best
        .into_iter()
        .map(|(target_block, (distance, source_block))| BlockMatch {
            target_block,
            source_block,
            distance,
        })
        .collect())
}

/// Symmetric matrix of Stage-2 distances over every pair of full blocks.
/// Feeds heatmap exports and serves as the Stage-1 bypass oracle.
pub fn all_pairs_block_distance(kv: &KVStates, block_size: usize) -> Result<Vec<Vec<f64>>> {
    if block_size == 0 {
        return Err(invalid_arg("block_size must be positive"));
    }
    let num_blocks = kv.num_tokens / block_size;
    if num_blocks == 0 {
        return Err(invalid_arg("need at least one full block"));
    }
    let mut matrix = vec![vec![0.0; num_blocks]; num_blocks];
    for i in 0..num_blocks {
        for j in (i + 1)..num_blocks {
            let d = stage2_block_distance(
                &KvBlockView::new(kv, i, block_size)?,
                &KvBlockView::new(kv, j, block_size)?,
                block_size,
            )?;
            matrix[i][j] = d;
            matrix[j][i] = d;
        }
    }
    Ok(matrix)
}

/// Distance ceiling calibrated as a percentile of the all-pairs distance
/// distribution on a reference trace's KV states.
pub fn calibrate_block_threshold(
    kv: &KVStates,
    block_size: usize,
    percentile: f64,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&percentile) {
        return Err(invalid_arg("percentile must be in [0, 1]"));
    }
    let matrix = all_pairs_block_distance(kv, block_size)?;
    let mut distances: Vec<f64> = Vec::new();
    for (i, row) in matrix.iter().enumerate() {
        for &d in row.iter().skip(i + 1) {
            distances.push(d);
        }
    }
    if distances.is_empty() {
        return Err(invalid_arg("need at least two full blocks to calibrate"));
    }
    distances.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((distances.len() - 1) as f64 * percentile).round() as usize;
    Ok(distances[rank])
}

/// Fraction of steps (index >= 1) whose max cosine against any earlier step
/// strictly exceeds the threshold, over the total step count.
pub fn similarity_ratio(trace: &Trace, threshold: f64) -> Result<f64> {
    if trace.steps.is_empty() {
        return Err(invalid_arg("trace has no steps"));
    }
    let encoded: Vec<SparseTokenVector> = trace.steps.iter().map(encode_step).collect();
    let mut redundant = 0usize;
    for i in 1..encoded.len() {
        let mut max_sim: f64 = 0.0;
        for earlier in &encoded[..i] {
            max_sim = max_sim.max(cosine(&encoded[i], earlier)?);
        }
        if max_sim > threshold {
            redundant += 1;
        }
    }
    Ok(redundant as f64 / trace.steps.len() as f64)
}

/// Best earlier match per step: `(best_match_index, cosine)`, `None` for the
/// first step. Ties resolve to the smallest step index.
pub fn best_matches(trace: &Trace) -> Result<Vec<Option<(usize, f64)>>> {
    let encoded: Vec<SparseTokenVector> = trace.steps.iter().map(encode_step).collect();
    let mut out = vec![None; encoded.len()];
    for i in 1..encoded.len() {
        let mut best = (0usize, f64::NEG_INFINITY);
        for (j, earlier) in encoded[..i].iter().enumerate() {
            let sim = cosine(&encoded[i], earlier)?;
            if sim > best.1 {
                best = (j, sim);
            }
        }
        out[i] = Some(best);
    }
    Ok(out)
}

/// Per-step similarity report as CSV with columns
/// `seq_id,step_index,best_match_index,cosine,redundant@T...` for each
/// requested threshold. Redundancy is strict (`cosine > T`).
pub fn similarity_report_csv(traces: &[Trace], thresholds: &[f64]) -> Result<String> {
    let mut out = String::from("seq_id,step_index,best_match_index,cosine");
    for t in thresholds {
        out.push_str(&format!(",redundant@{t}"));
    }
    out.push('\n');
    for trace in traces {
        let matches = best_matches(trace)?;
        for (i, m) in matches.iter().enumerate() {
            match m {
                None => {
                    out.push_str(&format!("{},{},,", trace.seq_id, i));
                    for _ in thresholds {
                        out.push_str(",false");
                    }
                }
                Some((best, sim)) => {
                    out.push_str(&format!("{},{},{},{:.6}", trace.seq_id, i, best, sim));
                    for t in thresholds {
                        out.push_str(if sim > t { ",true" } else { ",false" });
                    }
                }
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Similarity-ratio summary as CSV: one row per trace per threshold plus an
/// `average` row per threshold.
pub fn similarity_ratio_csv(traces: &[Trace], thresholds: &[f64]) -> Result<String> {
    let mut out = String::from("seq_id,threshold,similarity_ratio\n");
    let mut sums = vec![0.0; thresholds.len()];
    for trace in traces {
        for (i, t) in thresholds.iter().enumerate() {
            let ratio = similarity_ratio(trace, *t)?;
            sums[i] += ratio;
            out.push_str(&format!("{},{},{:.6}\n", trace.seq_id, t, ratio));
        }
    }
    for (i, t) in thresholds.iter().enumerate() {
        out.push_str(&format!(
            "average,{},{:.6}\n",
            t,
            sums[i] / traces.len().max(1) as f64
        ));
    }
    Ok(out)
}

/// Distance matrix rendered as a bare CSV grid.
pub fn distance_matrix_csv(matrix: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in matrix {
        let cells: Vec<String> = row.iter().map(|d| format!("{d:.9}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
