//! Python bindings for the KV cache block-sharing engine.
//!
//! Exposes trace generation, the two-stage reuse filter, the paged block
//! store, the batching simulator, and the perturbation-bound sweep. Build
//! with `cargo build --release -p memshare-py`; see `python/smoke_test.py`
//! for loading the produced `memshare_rs` module.

use pyo3::exceptions::{PyIOError, PyMemoryError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use memshare_core::blockstore::{BlockStore as CoreBlockStore, CacheDims};
use memshare_core::bounds::{sweep_report, SweepConfig};
use memshare_core::kvgen::{self, KVStates, ProjectionSet, TraceConfig};
use memshare_core::schedsim::{compare_runs, scripted_requests, SimConfig, WorkloadConfig};
use memshare_core::simfilter::{self, SparseTokenVector, Thresholds};
use memshare_core::tensorlab;
use memshare_core::Error;

type KvView = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn to_py_err(err: Error) -> PyErr {
    match err {
        Error::InvalidArgument(msg) => PyValueError::new_err(msg),
        Error::OutOfMemory => PyMemoryError::new_err("block pool free list exhausted"),
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// A step-segmented token trace with ground-truth redundancy labels.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Trace {
    inner: kvgen::Trace,
}

#[pymethods]
impl Trace {
    #[getter]
    fn seq_id(&self) -> String {
        self.inner.seq_id.clone()
    }

    fn num_steps(&self) -> usize {
        self.inner.steps.len()
    }

    fn total_tokens(&self) -> usize {
        self.inner.total_tokens()
    }

    fn step_tokens(&self, index: usize) -> PyResult<Vec<u32>> {
        self.inner
            .steps
            .get(index)
            .map(|s| s.tokens.clone())
            .ok_or_else(|| PyValueError::new_err(format!("step {index} out of range")))
    }

    fn step_text(&self, index: usize) -> PyResult<String> {
        self.inner
            .steps
            .get(index)
            .map(|s| s.text.clone())
            .ok_or_else(|| PyValueError::new_err(format!("step {index} out of range")))
    }

    /// Index of the earlier step this step was generated as a copy of.
    fn copy_of(&self, index: usize) -> PyResult<Option<usize>> {
        self.inner
            .redundancy_labels
            .get(index)
            .copied()
            .ok_or_else(|| PyValueError::new_err(format!("step {index} out of range")))
    }

    fn to_jsonl(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        kvgen::write_traces_jsonl(&mut buf, std::slice::from_ref(&self.inner))
            .map_err(to_py_err)?;
        String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Vec<Trace>> {
        let traces = kvgen::read_traces_jsonl(text.as_bytes()).map_err(to_py_err)?;
        Ok(traces.into_iter().map(|inner| Trace { inner }).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Trace(seq_id='{}', steps={}, tokens={})",
            self.inner.seq_id,
            self.inner.steps.len(),
            self.inner.total_tokens()
        )
    }
}

/// Per-layer, per-head key/value states for one trace.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct KvStates {
    inner: KVStates,
}

#[pymethods]
impl KvStates {
    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.num_layers
    }

    #[getter]
    fn num_heads(&self) -> usize {
        self.inner.num_heads
    }

    #[getter]
    fn head_dim(&self) -> usize {
        self.inner.head_dim
    }

    #[getter]
    fn num_tokens(&self) -> usize {
        self.inner.num_tokens
    }

    fn key(&self, layer: usize, token: usize, head: usize) -> PyResult<Vec<f32>> {
        self.check_index(layer, token, head)?;
        Ok(self.inner.key(layer, token, head).to_vec())
    }

    fn value(&self, layer: usize, token: usize, head: usize) -> PyResult<Vec<f32>> {
        self.check_index(layer, token, head)?;
        Ok(self.inner.value(layer, token, head).to_vec())
    }

    /// Serializes to the MSKV1 binary dump format.
    fn to_mskv_bytes(&self) -> PyResult<Vec<u8>> {
        let mut buf = Vec::new();
        self.inner.write_mskv1(&mut buf).map_err(to_py_err)?;
        Ok(buf)
    }

    #[staticmethod]
    fn from_mskv_bytes(data: &[u8]) -> PyResult<KvStates> {
        let inner = KVStates::read_mskv1(&mut &data[..]).map_err(to_py_err)?;
        Ok(KvStates { inner })
    }

    fn __repr__(&self) -> String {
        format!(
            "KvStates(layers={}, heads={}, head_dim={}, tokens={})",
            self.inner.num_layers, self.inner.num_heads, self.inner.head_dim, self.inner.num_tokens
        )
    }
}

impl KvStates {
    fn check_index(&self, layer: usize, token: usize, head: usize) -> PyResult<()> {
        if layer >= self.inner.num_layers
            || token >= self.inner.num_tokens
            || head >= self.inner.num_heads
        {
            return Err(PyValueError::new_err("layer/token/head out of range"));
        }
        Ok(())
    }
}

#[pyfunction]
#[pyo3(signature = (seed, num_steps, step_len_min=32, step_len_max=48, vocab_size=512, redundancy=0.3, mutation=0.0))]
fn generate_trace(
    seed: u64,
    num_steps: usize,
    step_len_min: usize,
    step_len_max: usize,
    vocab_size: u32,
    redundancy: f64,
    mutation: f64,
) -> PyResult<Trace> {
    let cfg = TraceConfig {
        seed,
        num_steps,
        step_len_range: (step_len_min, step_len_max),
        vocab_size,
        redundancy_prob: redundancy,
        mutation_rate: mutation,
    };
    Ok(Trace {
        inner: kvgen::generate_trace(&cfg).map_err(to_py_err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (trace, seed=0, eta=0.0, num_layers=4, num_heads=2, head_dim=8, embed_dim=32))]
fn kv_for_trace(
    trace: &Trace,
    seed: u64,
    eta: f64,
    num_layers: usize,
    num_heads: usize,
    head_dim: usize,
    embed_dim: usize,
) -> PyResult<KvStates> {
    let proj =
        ProjectionSet::new(seed, num_layers, num_heads, head_dim, embed_dim).map_err(to_py_err)?;
    Ok(KvStates {
        inner: kvgen::kv_for_trace(&trace.inner, &proj, eta, seed).map_err(to_py_err)?,
    })
}

#[pyfunction]
fn softmax(scores: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(tensorlab::softmax(&scores)
        .map_err(to_py_err)?
        .as_slice()
        .to_vec())
}

#[pyfunction]
fn attention_output(
    query: Vec<f64>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
) -> PyResult<Vec<f64>> {
    let to_vectors = |vs: Vec<Vec<f64>>| -> Result<Vec<tensorlab::Vector>, Error> {
        vs.into_iter().map(tensorlab::Vector::new).collect()
    };
    let state = tensorlab::AttentionState::new(
        tensorlab::Vector::new(query).map_err(to_py_err)?,
        to_vectors(keys).map_err(to_py_err)?,
        to_vectors(values).map_err(to_py_err)?,
    )
    .map_err(to_py_err)?;
    Ok(tensorlab::attention_output(&state)
        .map_err(to_py_err)?
        .into())
}

/// Bag-of-words cosine between two token lists.
#[pyfunction]
fn token_cosine(a: Vec<u32>, b: Vec<u32>) -> PyResult<f64> {
    simfilter::cosine(
        &SparseTokenVector::from_tokens(&a),
        &SparseTokenVector::from_tokens(&b),
    )
    .map_err(to_py_err)
}

#[pyfunction]
fn similarity_ratio(trace: &Trace, threshold: f64) -> PyResult<f64> {
    simfilter::similarity_ratio(&trace.inner, threshold).map_err(to_py_err)
}

#[pyfunction]
#[pyo3(signature = (trace, kv, block_size=16, step_threshold=0.8, block_distance_threshold=1e-6, top_k=8))]
fn find_reusable_blocks(
    trace: &Trace,
    kv: &KvStates,
    block_size: usize,
    step_threshold: f64,
    block_distance_threshold: f64,
    top_k: usize,
) -> PyResult<Vec<(usize, usize, f64)>> {
    let th = Thresholds {
        step_threshold,
        block_distance_threshold,
        top_k,
    };
    let matches = simfilter::find_reusable_blocks(&trace.inner.steps, &kv.inner, &th, block_size)
        .map_err(to_py_err)?;
    Ok(matches
        .into_iter()
        .map(|m| (m.target_block, m.source_block, m.distance))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (kv, block_size=16))]
fn all_pairs_block_distance(kv: &KvStates, block_size: usize) -> PyResult<Vec<Vec<f64>>> {
    simfilter::all_pairs_block_distance(&kv.inner, block_size).map_err(to_py_err)
}

#[pyfunction]
#[pyo3(signature = (kv, block_size=16, percentile=0.1))]
fn calibrate_block_threshold(kv: &KvStates, block_size: usize, percentile: f64) -> PyResult<f64> {
    simfilter::calibrate_block_threshold(&kv.inner, block_size, percentile).map_err(to_py_err)
}

/// Paged KV cache with refcounted physical blocks and zero-copy sharing.
#[pyclass(skip_from_py_object)]
struct BlockStore {
    inner: CoreBlockStore,
}

#[pymethods]
impl BlockStore {
    #[new]
    #[pyo3(signature = (capacity_blocks, num_layers=4, num_heads=2, head_dim=8, block_size=16))]
    fn new(
        capacity_blocks: usize,
        num_layers: usize,
        num_heads: usize,
        head_dim: usize,
        block_size: usize,
    ) -> PyResult<Self> {
        let dims = CacheDims::new(num_layers, num_heads, head_dim, block_size);
        Ok(Self {
            inner: CoreBlockStore::new(capacity_blocks, dims).map_err(to_py_err)?,
        })
    }

    /// Appends one token's K/V (flattened layers x heads x head_dim).
    fn append_token(&mut self, seq_id: &str, keys: Vec<f32>, values: Vec<f32>) -> PyResult<usize> {
        self.inner
            .append_token(seq_id, &keys, &values)
            .map_err(to_py_err)
    }

    fn share_block(
        &mut self,
        target_seq: &str,
        target_block: usize,
        source_seq: &str,
        source_block: usize,
    ) -> PyResult<bool> {
        self.inner
            .share_block((target_seq, target_block), (source_seq, source_block))
            .map_err(to_py_err)
    }

    fn free_sequence(&mut self, seq_id: &str) -> PyResult<usize> {
        self.inner.free_sequence(seq_id).map_err(to_py_err)
    }

    fn free_blocks(&self) -> usize {
        self.inner.free_blocks()
    }

    fn allocated_blocks(&self) -> usize {
        self.inner.allocated_blocks()
    }

    fn block_table(&self, seq_id: &str) -> Option<Vec<usize>> {
        self.inner.table(seq_id).map(|t| t.to_vec())
    }

    fn gather(&self, seq_id: &str, layer: usize, head: usize) -> PyResult<KvView> {
        let (keys, values) = self
            .inner
            .gather_attention_view(seq_id, layer, head)
            .map_err(to_py_err)?;
        Ok((
            keys.into_iter().map(Vec::from).collect(),
            values.into_iter().map(Vec::from).collect(),
        ))
    }

    fn memory_stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let stats = self.inner.memory_stats();
        let dict = PyDict::new(py);
        dict.set_item("total_blocks", stats.total_blocks)?;
        dict.set_item("allocated_physical", stats.allocated_physical)?;
        dict.set_item("logical_blocks", stats.logical_blocks)?;
        dict.set_item("shared_tokens", stats.shared_tokens)?;
        dict.set_item("total_tokens", stats.total_tokens)?;
        dict.set_item("bytes_per_token", stats.bytes_per_token)?;
        dict.set_item("affected_ratio", stats.affected_ratio())?;
        Ok(dict)
    }

    /// Recounts refcounts and free-list membership, raising on mismatch.
    fn verify(&self) -> PyResult<()> {
        self.inner.verify_integrity().map_err(to_py_err)
    }

    fn snapshot_json(&self) -> String {
        self.inner.snapshot_json().to_string()
    }
}

#[pyfunction]
#[pyo3(signature = (trials_per_cell=5, seed=1))]
fn run_bound_sweep<'py>(
    py: Python<'py>,
    trials_per_cell: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SweepConfig {
        trials_per_cell,
        seed,
        ..SweepConfig::default()
    };
    let report = sweep_report(&cfg).map_err(to_py_err)?;
    let max_ratio = report
        .rows
        .iter()
        .map(|r| r.max_weight_ratio.max(r.max_output_ratio))
        .fold(0.0f64, f64::max);
    let dict = PyDict::new(py);
    dict.set_item("passed", report.passed())?;
    dict.set_item("total_trials", report.total_trials)?;
    dict.set_item("violations", report.violations.len())?;
    dict.set_item("max_ratio", max_ratio)?;
    Ok(dict)
}

#[pyfunction]
#[pyo3(signature = (seed, block_budget, num_requests=6, num_steps=8, step_len=32, redundancy=0.3, eta=0.0))]
#[allow(clippy::too_many_arguments)]
fn simulate_compare<'py>(
    py: Python<'py>,
    seed: u64,
    block_budget: usize,
    num_requests: usize,
    num_steps: usize,
    step_len: usize,
    redundancy: f64,
    eta: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let dims = CacheDims::new(4, 2, 8, 16);
    let workload = WorkloadConfig {
        num_requests,
        num_steps,
        step_len_min: step_len,
        step_len_max: step_len,
        redundancy_prob: redundancy,
        eta,
        ..WorkloadConfig::default()
    };
    let requests = scripted_requests(&workload, &dims, seed).map_err(to_py_err)?;
    let cfg = SimConfig {
        block_budget,
        dims,
        thresholds: Thresholds {
            step_threshold: 0.8,
            block_distance_threshold: 1e-6,
            top_k: 8,
        },
        sharing_enabled: true,
        max_ticks: 200_000,
        evaluator_period: 16,
    };
    let comparison = compare_runs(&cfg, &requests).map_err(to_py_err)?;
    let dict = PyDict::new(py);
    dict.set_item("baseline_throughput", comparison.baseline.throughput)?;
    dict.set_item("shared_throughput", comparison.shared.throughput)?;
    dict.set_item("throughput_gain", comparison.throughput_gain)?;
    dict.set_item(
        "baseline_peak_blocks",
        comparison.baseline.peak_allocated_blocks,
    )?;
    dict.set_item("shared_peak_blocks", comparison.shared.peak_allocated_blocks)?;
    dict.set_item("shares_applied", comparison.shared.shares_applied)?;
    dict.set_item("affected_ratio", comparison.shared.affected_ratio_final)?;
    Ok(dict)
}

#[pymodule]
fn memshare_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Trace>()?;
    m.add_class::<KvStates>()?;
    m.add_class::<BlockStore>()?;
    m.add_function(wrap_pyfunction!(generate_trace, m)?)?;
    m.add_function(wrap_pyfunction!(kv_for_trace, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(attention_output, m)?)?;
    m.add_function(wrap_pyfunction!(token_cosine, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(find_reusable_blocks, m)?)?;
    m.add_function(wrap_pyfunction!(all_pairs_block_distance, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_block_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(run_bound_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_compare, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
