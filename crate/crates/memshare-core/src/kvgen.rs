//! Deterministic synthetic workload generator.
//!
//! Produces delimiter-segmented token traces with planted step redundancy and
//! per-layer/per-head KV states derived from fixed pseudorandom projections.
//! Every output is a pure function of its inputs and seeds, so copied steps
//! carry ground-truth labels that downstream filters can be scored against.
//!
//! File formats owned by this module:
//! - Trace JSONL: one step per line,
//!   `{"seq_id", "step_index", "text", "tokens", "token_offset", "copy_of"}`.
//! - `MSKV1` KV dump: magic `MSKV`, version byte, four little-endian `u32`
//!   header fields `[num_layers, num_heads, head_dim, num_tokens]`, then all
//!   key data and all value data as little-endian `f32` in layer-major,
//!   token-major, head-major, dim-minor order.

use std::collections::HashMap;
use std::io::{BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::tensorlab::Vector;

pub type TokenId = u32;

/// Step delimiter used when rendering and segmenting trace text.
pub const STEP_DELIMITER: &str = "\n\n";

// ── Counter-based pseudorandom values ───────────────────────────────

const TAG_EMBED: u64 = 1;
const TAG_PROJ_K: u64 = 2;
const TAG_PROJ_V: u64 = 3;
const TAG_PROJ_Q: u64 = 4;
const TAG_NOISE_K: u64 = 5;
const TAG_NOISE_V: u64 = 6;
const TAG_SEED: u64 = 7;

fn mix(parts: &[u64]) -> u64 {
    // splitmix64-style finalizer folded over the tuple
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        h ^= h >> 29;
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 32;
    }
    h
}

fn unit_uniform(h: u64) -> f64 {
    // strictly inside (0, 1) so logs are safe
    (((h >> 11) as f64) + 0.5) / (1u64 << 53) as f64
}

/// Standard normal draw from a counter tuple via Box-Muller.
fn prf_gaussian(parts: &[u64]) -> f64 {
    let mut left = parts.to_vec();
    left.push(0x5058);
    let mut right = parts.to_vec();
    right.push(0x5059);
    let u1 = unit_uniform(mix(&left));
    let u2 = unit_uniform(mix(&right));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Deterministic stream seed derived from a base seed, for fanning out
/// independent generators.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    mix(&[TAG_SEED, base, stream])
}

// ── Traces ──────────────────────────────────────────────────────────

/// One delimiter-separated reasoning step of a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub seq_id: String,
    pub step_index: usize,
    pub text: String,
    pub tokens: Vec<TokenId>,
    /// Absolute position of the first token within the sequence.
    pub token_offset: usize,
}

/// A full generated sequence: ordered steps plus ground-truth redundancy
/// labels (`redundancy_labels[i]` is the earlier step that step `i` was
/// generated as a near-copy of, if any).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub seq_id: String,
    pub steps: Vec<StepRecord>,
    pub redundancy_labels: Vec<Option<usize>>,
}

impl Trace {
    pub fn total_tokens(&self) -> usize {
        self.steps.iter().map(|s| s.tokens.len()).sum()
    }

    /// Token id at an absolute position.
    pub fn token_at(&self, pos: usize) -> Option<TokenId> {
        for step in &self.steps {
            if pos < step.token_offset + step.tokens.len() {
                return step.tokens.get(pos - step.token_offset).copied();
            }
        }
        None
    }

    /// Full text with steps joined by the step delimiter.
    pub fn render_text(&self) -> String {
        self.steps
            .iter()
            .map(|s| s.text.as_str())
            .collect::<Vec<_>>()
            .join(STEP_DELIMITER)
    }
}

/// Parameters for [`generate_trace`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceConfig {
    pub seed: u64,
    pub num_steps: usize,
    /// Inclusive range of fresh-step lengths in tokens.
    pub step_len_range: (usize, usize),
    pub vocab_size: TokenId,
    /// Probability that a step (after the first) is a near-copy of an earlier one.
    pub redundancy_prob: f64,
    /// Per-token probability that a copied step's token is resampled.
    pub mutation_rate: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_steps: 16,
            step_len_range: (32, 48),
            vocab_size: 512,
            redundancy_prob: 0.3,
            mutation_rate: 0.0,
        }
    }
}

impl TraceConfig {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.redundancy_prob) {
            return Err(invalid_arg("redundancy_prob must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(invalid_arg("mutation_rate must be in [0, 1]"));
        }
        if self.vocab_size < 16 {
            return Err(invalid_arg("vocab_size must be at least 16"));
        }
        if self.num_steps == 0 {
            return Err(invalid_arg("num_steps must be at least 1"));
        }
        let (lo, hi) = self.step_len_range;
        if lo == 0 || lo > hi {
            return Err(invalid_arg("step_len_range must satisfy 1 <= lo <= hi"));
        }
        Ok(())
    }
}

fn render_step_text(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|t| format!("t{t}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates a step-segmented trace with planted redundancy. With probability
/// `redundancy_prob` each step after the first is a near-copy of a uniformly
/// chosen earlier step (a fraction `mutation_rate` of its tokens resampled)
/// and is labeled with its source. Fully deterministic given the seed.
pub fn generate_trace(cfg: &TraceConfig) -> Result<Trace> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let seq_id = format!("seq-{}", cfg.seed);
    let (lo, hi) = cfg.step_len_range;

    let mut steps: Vec<StepRecord> = Vec::with_capacity(cfg.num_steps);
    let mut labels: Vec<Option<usize>> = Vec::with_capacity(cfg.num_steps);
    let mut offset = 0usize;

    for index in 0..cfg.num_steps {
        let is_copy = index > 0 && rng.random_bool(cfg.redundancy_prob);
        let (tokens, label) = if is_copy {
            let src = rng.random_range(0..index);
            let mut tokens = steps[src].tokens.clone();
            if cfg.mutation_rate > 0.0 {
                for t in tokens.iter_mut() {
                    if rng.random_bool(cfg.mutation_rate) {
                        *t = rng.random_range(0..cfg.vocab_size);
                    }
                }
            }
            (tokens, Some(src))
        } else {
            let len = rng.random_range(lo..=hi);
            let tokens = (0..len)
                .map(|_| rng.random_range(0..cfg.vocab_size))
                .collect();
            (tokens, None)
        };

        let text = render_step_text(&tokens);
        let len = tokens.len();
        steps.push(StepRecord {
            seq_id: seq_id.clone(),
            step_index: index,
            text,
            tokens,
            token_offset: offset,
        });
        labels.push(label);
        offset += len;
    }

    Ok(Trace {
        seq_id,
        steps,
        redundancy_labels: labels,
    })
}

/// Splits raw text on a delimiter, dropping empty segments.
pub fn segment_steps(raw_text: &str, delimiter: &str) -> Result<Vec<String>> {
    if delimiter.is_empty() {
        return Err(invalid_arg("delimiter must be nonempty"));
    }
    Ok(raw_text
        .split(delimiter)
        .filter(|s| !s.is_empty())
        .map(str::to_owned)
        .collect())
}

// ── Trace JSONL ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct StepLine {
    seq_id: String,
    step_index: usize,
    text: String,
    tokens: Vec<TokenId>,
    token_offset: usize,
    copy_of: Option<usize>,
}

/// Writes traces as JSONL, one step per line, LF line endings.
pub fn write_traces_jsonl<W: Write>(w: &mut W, traces: &[Trace]) -> Result<()> {
    for trace in traces {
        for (step, label) in trace.steps.iter().zip(&trace.redundancy_labels) {
            let line = StepLine {
                seq_id: step.seq_id.clone(),
                step_index: step.step_index,
                text: step.text.clone(),
                tokens: step.tokens.clone(),
                token_offset: step.token_offset,
                copy_of: *label,
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads traces back from JSONL, grouping steps by `seq_id` in order of first
/// appearance. Malformed lines report their 1-based line number.
pub fn read_traces_jsonl<R: BufRead>(r: R) -> Result<Vec<Trace>> {
    let mut order: Vec<String> = Vec::new();
    let mut by_seq: HashMap<String, Trace> = HashMap::new();

    for (i, line) in r.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: StepLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        if parsed.tokens.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                msg: "step has no tokens".into(),
            });
        }
        if let Some(src) = parsed.copy_of {
            if src >= parsed.step_index {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!(
                        "copy_of {src} must point to a step before {}",
                        parsed.step_index
                    ),
                });
            }
        }
        let trace = by_seq.entry(parsed.seq_id.clone()).or_insert_with(|| {
            order.push(parsed.seq_id.clone());
            Trace {
                seq_id: parsed.seq_id.clone(),
                steps: Vec::new(),
                redundancy_labels: Vec::new(),
            }
        });
        if parsed.step_index != trace.steps.len() {
            return Err(Error::Parse {
                line: lineno,
                msg: format!(
                    "step_index {} out of order (expected {})",
                    parsed.step_index,
                    trace.steps.len()
                ),
            });
        }
        if let Some(prev) = trace.steps.last() {
            if parsed.token_offset != prev.token_offset + prev.tokens.len() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("token_offset {} is not contiguous", parsed.token_offset),
                });
            }
        }
        trace.steps.push(StepRecord {
            seq_id: parsed.seq_id,
            step_index: parsed.step_index,
            text: parsed.text,
            tokens: parsed.tokens,
            token_offset: parsed.token_offset,
        });
        trace.redundancy_labels.push(parsed.copy_of);
    }

    Ok(order.into_iter().map(|id| by_seq.remove(&id).unwrap()).collect())
}

// ── Projections and KV synthesis ────────────────────────────────────

/// Deterministic per-layer, per-head query/key/value projection matrices.
/// Each matrix is a pure function of `(seed, layer, head, role)`.
#[derive(Debug, Clone)]
pub struct ProjectionSet {
    pub seed: u64,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    // row-major [embed_dim x head_dim], indexed [layer][head]
    key_mats: Vec<Vec<f64>>,
    value_mats: Vec<Vec<f64>>,
    query_mats: Vec<Vec<f64>>,
}

impl ProjectionSet {
    pub fn new(
        seed: u64,
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        if num_layers == 0 || num_heads == 0 || head_dim == 0 || embed_dim == 0 {
            return Err(invalid_arg("projection dimensions must be positive"));
        }
        let build = |tag: u64| -> Vec<Vec<f64>> {
            let scale = 1.0 / (embed_dim as f64).sqrt();
            (0..num_layers * num_heads)
                .map(|lh| {
                    let layer = (lh / num_heads) as u64;
                    let head = (lh % num_heads) as u64;
                    (0..embed_dim * head_dim)
                        .map(|ij| {
                            prf_gaussian(&[tag, seed, layer, head, ij as u64]) * scale
                        })
                        .collect()
                })
                .collect()
        };
        Ok(Self {
            seed,
            num_layers,
            num_heads,
            head_dim,
            embed_dim,
            key_mats: build(TAG_PROJ_K),
            value_mats: build(TAG_PROJ_V),
            query_mats: build(TAG_PROJ_Q),
        })
    }

    fn mat<'a>(&self, mats: &'a [Vec<f64>], layer: usize, head: usize) -> &'a [f64] {
        &mats[layer * self.num_heads + head]
    }

    fn project(&self, mats: &[Vec<f64>], layer: usize, head: usize, embed: &[f64]) -> Vec<f64> {
        let mat = self.mat(mats, layer, head);
        let mut out = vec![0.0; self.head_dim];
        for (i, e) in embed.iter().enumerate() {
            let row = &mat[i * self.head_dim..(i + 1) * self.head_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += e * w;
            }
        }
        out
    }
}

/// Deterministic hash-derived unit embedding for a token id. Independent of
/// any user seed so traces reproduce across tools.
pub fn token_embedding(token: TokenId, embed_dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..embed_dim)
        .map(|i| prf_gaussian(&[TAG_EMBED, token as u64, i as u64]))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
    v
}

/// Per-layer, per-head, per-token key and value vectors for a trace, stored
/// as `f32` in layer-major, token-major, head-major, dim-minor order.
#[derive(Debug, Clone, PartialEq)]
pub struct KVStates {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub num_tokens: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl KVStates {
    /// Builds KV states from raw layer-major, token-major, head-major,
    /// dim-minor buffers.
    pub fn new(
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        num_tokens: usize,
        keys: Vec<f32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        let n = num_layers * num_heads * head_dim * num_tokens;
        if n == 0 {
            return Err(invalid_arg("KV dimensions must all be positive"));
        }
        if keys.len() != n || values.len() != n {
            return Err(invalid_arg(format!(
                "expected {n} key and value elements, got {} and {}",
                keys.len(),
                values.len()
            )));
        }
        if keys.iter().chain(values.iter()).any(|x| !x.is_finite()) {
            return Err(invalid_arg("KV entries must be finite"));
        }
        Ok(Self {
            num_layers,
            num_heads,
            head_dim,
            num_tokens,
            keys,
            values,
        })
    }

    fn flat_index(&self, layer: usize, token: usize, head: usize) -> usize {
        ((layer * self.num_tokens + token) * self.num_heads + head) * self.head_dim
    }

    /// Key vector for one (layer, token, head).
    pub fn key(&self, layer: usize, token: usize, head: usize) -> &[f32] {
        let i = self.flat_index(layer, token, head);
        &self.keys[i..i + self.head_dim]
    }

    /// Value vector for one (layer, token, head).
    pub fn value(&self, layer: usize, token: usize, head: usize) -> &[f32] {
        let i = self.flat_index(layer, token, head);
        &self.values[i..i + self.head_dim]
    }

    /// Contiguous `[len x num_heads x head_dim]` key slice for one layer.
    pub fn layer_keys(&self, layer: usize, first_token: usize, len: usize) -> &[f32] {
        let start = self.flat_index(layer, first_token, 0);
        &self.keys[start..start + len * self.num_heads * self.head_dim]
    }

    /// Contiguous `[len x num_heads x head_dim]` value slice for one layer.
    pub fn layer_values(&self, layer: usize, first_token: usize, len: usize) -> &[f32] {
        let start = self.flat_index(layer, first_token, 0);
        &self.values[start..start + len * self.num_heads * self.head_dim]
    }

    /// One token's keys and values flattened as `[num_layers x num_heads x
    /// head_dim]`, the shape consumed by the block store's append.
    pub fn token_kv(&self, token: usize) -> (Vec<f32>, Vec<f32>) {
        let per_layer = self.num_heads * self.head_dim;
        let mut k = Vec::with_capacity(self.num_layers * per_layer);
        let mut v = Vec::with_capacity(self.num_layers * per_layer);
        for layer in 0..self.num_layers {
            let i = self.flat_index(layer, token, 0);
            k.extend_from_slice(&self.keys[i..i + per_layer]);
            v.extend_from_slice(&self.values[i..i + per_layer]);
        }
        (k, v)
    }

    /// Writes the `MSKV1` binary dump.
    pub fn write_mskv1<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"MSKV")?;
        w.write_all(&[1u8])?;
        for field in [
            self.num_layers as u32,
            self.num_heads as u32,
            self.head_dim as u32,
            self.num_tokens as u32,
        ] {
            w.write_all(&field.to_le_bytes())?;
        }
        for x in &self.keys {
            w.write_all(&x.to_le_bytes())?;
        }
        for x in &self.values {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads an `MSKV1` binary dump.
    pub fn read_mskv1<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic[..4] != b"MSKV" {
            return Err(invalid_arg("bad magic: not an MSKV dump"));
        }
        if magic[4] != 1 {
            return Err(invalid_arg(format!("unsupported MSKV version {}", magic[4])));
        }
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        let mut fields = [0u32; 4];
        for (i, f) in fields.iter_mut().enumerate() {
            *f = u32::from_le_bytes(header[i * 4..i * 4 + 4].try_into().unwrap());
        }
        let [num_layers, num_heads, head_dim, num_tokens] = fields.map(|x| x as usize);
        let n = num_layers * num_tokens * num_heads * head_dim;
        let mut read_floats = |count: usize| -> Result<Vec<f32>> {
            let mut bytes = vec![0u8; count * 4];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let keys = read_floats(n)?;
        let values = read_floats(n)?;
        Ok(Self {
            num_layers,
            num_heads,
            head_dim,
            num_tokens,
            keys,
            values,
        })
    }
}

/// Synthesizes KV states for a trace: each token's key/value is the projection
/// of its deterministic embedding plus zero-mean Gaussian noise of scale
/// `noise_scale` drawn from `(seed, layer, head, position)`. At zero noise,
/// identical token subsequences yield exactly equal KV vectors.
pub fn kv_for_trace(
    trace: &Trace,
    proj: &ProjectionSet,
    noise_scale: f64,
    seed: u64,
) -> Result<KVStates> {
    if noise_scale.is_nan() || noise_scale < 0.0 {
        return Err(invalid_arg("noise_scale must be nonnegative"));
    }
    let num_tokens = trace.total_tokens();
    if num_tokens == 0 {
        return Err(invalid_arg("trace has no tokens"));
    }

    let mut embeddings: HashMap<TokenId, Vec<f64>> = HashMap::new();
    let tokens: Vec<TokenId> = trace
        .steps
        .iter()
        .flat_map(|s| s.tokens.iter().copied())
        .collect();

    let mut kv = KVStates {
        num_layers: proj.num_layers,
        num_heads: proj.num_heads,
        head_dim: proj.head_dim,
        num_tokens,
        keys: vec![0.0; proj.num_layers * num_tokens * proj.num_heads * proj.head_dim],
        values: vec![0.0; proj.num_layers * num_tokens * proj.num_heads * proj.head_dim],
    };

    for (pos, &token) in tokens.iter().enumerate() {
        let embed = embeddings
            .entry(token)
            .or_insert_with(|| token_embedding(token, proj.embed_dim))
            .clone();
        for layer in 0..proj.num_layers {
            for head in 0..proj.num_heads {
                let k = proj.project(&proj.key_mats, layer, head, &embed);
                let v = proj.project(&proj.value_mats, layer, head, &embed);
                let base = kv.flat_index(layer, pos, head);
                for d in 0..proj.head_dim {
                    let mut kx = k[d];
                    let mut vx = v[d];
                    if noise_scale > 0.0 {
                        let ctx = [
                            seed,
                            layer as u64,
                            head as u64,
                            pos as u64,
                            d as u64,
                        ];
                        let mut kctx = vec![TAG_NOISE_K];
                        kctx.extend_from_slice(&ctx);
                        let mut vctx = vec![TAG_NOISE_V];
                        vctx.extend_from_slice(&ctx);
                        kx += noise_scale * prf_gaussian(&kctx);
                        vx += noise_scale * prf_gaussian(&vctx);
                    }
                    kv.keys[base + d] = kx as f32;
                    kv.values[base + d] = vx as f32;
                }
            }
        }
    }

    Ok(kv)
}

/// Query vector for one (layer, head) given the token to attend from, built
/// from the same projection set as the keys and values.
pub fn query_for(proj: &ProjectionSet, layer: usize, head: usize, token: TokenId) -> Result<Vector> {
    if layer >= proj.num_layers || head >= proj.num_heads {
        return Err(invalid_arg("layer or head out of range"));
    }
    let embed = token_embedding(token, proj.embed_dim);
    Vector::new(proj.project(&proj.query_mats, layer, head, &embed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorlab::frobenius_distance;

    fn small_cfg(seed: u64) -> TraceConfig {
        TraceConfig {
            seed,
            num_steps: 8,
            step_len_range: (8, 16),
            vocab_size: 64,
            redundancy_prob: 0.4,
            mutation_rate: 0.1,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_trace(&small_cfg(7)).unwrap();
        let b = generate_trace(&small_cfg(7)).unwrap();
        assert_eq!(a, b);
        let mut ja = Vec::new();
        let mut jb = Vec::new();
        write_traces_jsonl(&mut ja, std::slice::from_ref(&a)).unwrap();
        write_traces_jsonl(&mut jb, std::slice::from_ref(&b)).unwrap();
        assert_eq!(ja, jb);
    }

    #[test]
    fn zero_redundancy_means_no_labels() {
        let cfg = TraceConfig {
            redundancy_prob: 0.0,
            ..small_cfg(3)
        };
        let trace = generate_trace(&cfg).unwrap();
        assert!(trace.redundancy_labels.iter().all(|l| l.is_none()));
    }

    #[test]
    fn forced_copying_reproduces_tokens_exactly() {
        let cfg = TraceConfig {
            seed: 11,
            num_steps: 5,
            step_len_range: (16, 16),
            vocab_size: 128,
            redundancy_prob: 1.0,
            mutation_rate: 0.0,
        };
        let trace = generate_trace(&cfg).unwrap();
        for i in 1..5 {
            let src = trace.redundancy_labels[i].expect("labeled");
            assert!(src < i);
            assert_eq!(trace.steps[i].tokens, trace.steps[src].tokens);
        }
        // every chain bottoms out at step 0
        assert_eq!(trace.steps[1].tokens, trace.steps[0].tokens);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_trace(&TraceConfig {
            redundancy_prob: 1.5,
            ..small_cfg(0)
        })
        .is_err());
        assert!(generate_trace(&TraceConfig {
            vocab_size: 8,
            ..small_cfg(0)
        })
        .is_err());
        assert!(generate_trace(&TraceConfig {
            step_len_range: (5, 3),
            ..small_cfg(0)
        })
        .is_err());
    }

    #[test]
    fn segment_examples() {
        assert_eq!(
            segment_steps("a\n\nb\n\nc", "\n\n").unwrap(),
            vec!["a", "b", "c"]
        );
        assert_eq!(segment_steps("a", "\n\n").unwrap(), vec!["a"]);
        assert_eq!(segment_steps("a\n\n\n\nb", "\n\n").unwrap(), vec!["a", "b"]);
        assert!(segment_steps("a", "").is_err());
    }

    #[test]
    fn step_text_contains_no_delimiter() {
        let trace = generate_trace(&small_cfg(5)).unwrap();
        for step in &trace.steps {
            assert!(!step.text.contains(STEP_DELIMITER));
        }
        let rendered = trace.render_text();
        let segs = segment_steps(&rendered, STEP_DELIMITER).unwrap();
        assert_eq!(segs.len(), trace.steps.len());
    }

    #[test]
    fn jsonl_round_trips() {
        let traces = vec![
            generate_trace(&small_cfg(1)).unwrap(),
            generate_trace(&small_cfg(2)).unwrap(),
        ];
        let mut buf = Vec::new();
        write_traces_jsonl(&mut buf, &traces).unwrap();
        let back = read_traces_jsonl(&buf[..]).unwrap();
        assert_eq!(back, traces);
    }

    #[test]
    fn jsonl_parse_error_names_line() {
        let text = "{\"seq_id\":\"s\",\"step_index\":0,\"text\":\"a\",\"tokens\":[1],\"token_offset\":0,\"copy_of\":null}\nnot json\n";
        let err = read_traces_jsonl(text.as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn default_proj(seed: u64) -> ProjectionSet {
        ProjectionSet::new(seed, 4, 2, 8, 32).unwrap()
    }

    #[test]
    fn noise_free_copies_have_identical_kv() {
        let cfg = TraceConfig {
            seed: 21,
            num_steps: 4,
            step_len_range: (16, 16),
            vocab_size: 64,
            redundancy_prob: 1.0,
            mutation_rate: 0.0,
        };
        let trace = generate_trace(&cfg).unwrap();
        let kv = kv_for_trace(&trace, &default_proj(9), 0.0, 123).unwrap();
        let (a, b) = (0usize, 1usize);
        let (off_a, off_b) = (
            trace.steps[a].token_offset,
            trace.steps[b].token_offset,
        );
        assert_eq!(trace.steps[a].tokens, trace.steps[b].tokens);
        for layer in 0..4 {
            for head in 0..2 {
                for t in 0..16 {
                    assert_eq!(
                        kv.key(layer, off_a + t, head),
                        kv.key(layer, off_b + t, head)
                    );
                }
                let fa: Vec<f64> = kv.layer_keys(layer, off_a, 16).iter().map(|x| *x as f64).collect();
                let fb: Vec<f64> = kv.layer_keys(layer, off_b, 16).iter().map(|x| *x as f64).collect();
                assert_eq!(frobenius_distance(&fa, &fb).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn aligned_block_distance_grows_with_noise() {
        let mean_at = |eta: f64| -> f64 {
            let mut total = 0.0;
            let mut count = 0;
            for seed in 0..20u64 {
                let cfg = TraceConfig {
                    seed,
                    num_steps: 3,
                    step_len_range: (16, 16),
                    vocab_size: 64,
                    redundancy_prob: 1.0,
                    mutation_rate: 0.0,
                };
                let trace = generate_trace(&cfg).unwrap();
                let kv = kv_for_trace(&trace, &default_proj(5), eta, seed).unwrap();
                let src = trace.redundancy_labels[1].unwrap();
                let (oa, ob) = (
                    trace.steps[src].token_offset,
                    trace.steps[1].token_offset,
                );
                for layer in 0..4 {
                    let fa: Vec<f64> =
                        kv.layer_keys(layer, oa, 16).iter().map(|x| *x as f64).collect();
                    let fb: Vec<f64> =
                        kv.layer_keys(layer, ob, 16).iter().map(|x| *x as f64).collect();
                    total += frobenius_distance(&fa, &fb).unwrap();
                    count += 1;
                }
            }
            total / count as f64
        };
        let d1 = mean_at(0.1);
        let d2 = mean_at(0.2);
        assert!(d1 > 0.0);
        assert!(d2 > d1, "distance should grow with noise: {d1} vs {d2}");
    }

    #[test]
    fn kv_generation_is_deterministic() {
        let trace = generate_trace(&small_cfg(2)).unwrap();
        let a = kv_for_trace(&trace, &default_proj(3), 0.25, 77).unwrap();
        let b = kv_for_trace(&trace, &default_proj(3), 0.25, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mskv1_round_trip_and_header() {
        let trace = generate_trace(&small_cfg(4)).unwrap();
        let kv = kv_for_trace(&trace, &default_proj(1), 0.1, 4).unwrap();
        let mut buf = Vec::new();
        kv.write_mskv1(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MSKV");
        assert_eq!(buf[4], 1);
        let header: Vec<u32> = (0..4)
            .map(|i| u32::from_le_bytes(buf[5 + i * 4..9 + i * 4].try_into().unwrap()))
            .collect();
        assert_eq!(
            header,
            vec![4, 2, 8, trace.total_tokens() as u32]
        );
        let back = KVStates::read_mskv1(&mut &buf[..]).unwrap();
        assert_eq!(back, kv);
    }

    mod roundtrip_props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn mskv1_round_trips_arbitrary_states(
                layers in 1usize..4,
                heads in 1usize..3,
                dim in 1usize..6,
                tokens in 1usize..12,
                fill in -1000.0f32..1000.0,
            ) {
                let n = layers * heads * dim * tokens;
                let keys: Vec<f32> = (0..n).map(|i| fill + i as f32).collect();
                let values: Vec<f32> = (0..n).map(|i| fill - i as f32).collect();
                let kv = KVStates::new(layers, heads, dim, tokens, keys, values).unwrap();
                let mut buf = Vec::new();
                kv.write_mskv1(&mut buf).unwrap();
                let back = KVStates::read_mskv1(&mut &buf[..]).unwrap();
                prop_assert_eq!(back, kv);
            }

            #[test]
            fn jsonl_round_trips_arbitrary_traces(
                seed in 0u64..1000,
                steps in 1usize..10,
                p in 0.0f64..1.0,
                m in 0.0f64..1.0,
            ) {
                let trace = generate_trace(&TraceConfig {
                    seed,
                    num_steps: steps,
                    step_len_range: (1, 20),
                    vocab_size: 64,
                    redundancy_prob: p,
                    mutation_rate: m,
                })
                .unwrap();
                let mut buf = Vec::new();
                write_traces_jsonl(&mut buf, std::slice::from_ref(&trace)).unwrap();
                let back = read_traces_jsonl(&buf[..]).unwrap();
                prop_assert_eq!(back, vec![trace]);
            }
        }
    }

    #[test]
    fn embeddings_are_unit_norm() {
        for token in [0u32, 1, 63, 511] {
            let e = token_embedding(token, 32);
            let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn queries_are_deterministic_and_sized() {
        let proj = default_proj(8);
        let a = query_for(&proj, 2, 1, 100).unwrap();
        let b = query_for(&proj, 2, 1, 100).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 8);
        assert!(query_for(&proj, 4, 0, 1).is_err());
    }
}
