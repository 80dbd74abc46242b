//! Paged KV cache with per-sequence block tables and zero-copy sharing.
//!
//! Physical blocks hold `block_size` token slots of per-layer, per-head K/V
//! data and carry reference counts. A sequence's logical blocks map onto
//! physical ids through its block table; sharing a block is a table remap
//! plus refcount updates, never a payload copy. Blocks referenced more than
//! once are immutable: appending past a shared tail allocates a fresh block.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::tensorlab::Vector;

fn default_elem_bytes() -> usize {
    4
}

/// Cache geometry. `elem_bytes` drives the byte accounting only — payloads
/// are stored as `f32` regardless, so FP16 deployments can be sized without
/// changing the storage type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheDims {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub block_size: usize,
    #[serde(default = "default_elem_bytes")]
    pub elem_bytes: usize,
}

impl CacheDims {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize, block_size: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            head_dim,
            block_size,
            elem_bytes: default_elem_bytes(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.num_heads == 0
            || self.head_dim == 0
            || self.block_size == 0
            || self.elem_bytes == 0
        {
            return Err(invalid_arg("cache dimensions must all be positive"));
        }
        Ok(())
    }

    /// Elements of K or V data per token: layers x heads x head_dim.
    pub fn entries_per_token(&self) -> usize {
        self.num_layers * self.num_heads * self.head_dim
    }

    /// Cache bytes per token: 2 (key/value) x hidden (heads x head_dim)
    /// x layers x element size.
    pub fn bytes_per_token(&self) -> u64 {
        2 * (self.num_heads * self.head_dim) as u64 * self.num_layers as u64 * self.elem_bytes as u64
    }

    /// Total cache bytes for a token count.
    pub fn kv_bytes_for_tokens(&self, tokens: u64) -> u64 {
        self.bytes_per_token() * tokens
    }
}

/// One fixed-size physical block: K/V payload for `block_size` token slots.
#[derive(Debug, Clone)]
pub struct PhysicalBlock {
    pub id: usize,
    pub refcount: usize,
    /// Token slots written so far.
    pub fill: usize,
    // [layer][slot][head][dim]
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl PhysicalBlock {
    fn new(id: usize, dims: &CacheDims) -> Self {
        let n = dims.num_layers * dims.block_size * dims.num_heads * dims.head_dim;
        Self {
            id,
            refcount: 0,
            fill: 0,
            keys: vec![0.0; n],
            values: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, Default)]
struct BlockTable {
    entries: Vec<usize>,
    /// Slots whose physical block was substituted by sharing.
    shared: Vec<bool>,
}

/// Memory accounting over all live sequences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryStats {
    pub total_blocks: usize,
    pub allocated_physical: usize,
    pub logical_blocks: usize,
    pub shared_tokens: u64,
    pub total_tokens: u64,
    pub bytes_per_token: u64,
}

impl MemoryStats {
    /// Fraction of tokens whose cache entries were substituted by sharing.
    pub fn affected_ratio(&self) -> f64 {
        if self.total_tokens == 0 {
            0.0
        } else {
            self.shared_tokens as f64 / self.total_tokens as f64
        }
    }

    /// Cache footprint implied by the live token count.
    pub fn total_kv_bytes(&self) -> u64 {
        self.bytes_per_token * self.total_tokens
    }
}

/// Fixed-capacity block pool plus per-sequence block tables.
#[derive(Debug, Clone)]
pub struct BlockStore {
    dims: CacheDims,
    capacity: usize,
    blocks: Vec<PhysicalBlock>,
    // LIFO free list
    free: Vec<usize>,
    tables: BTreeMap<String, BlockTable>,
}

impl BlockStore {
    pub fn new(capacity_blocks: usize, dims: CacheDims) -> Result<Self> {
        if capacity_blocks == 0 {
            return Err(invalid_arg("capacity must be at least one block"));
        }
        dims.validate()?;
        let blocks = (0..capacity_blocks)
            .map(|id| PhysicalBlock::new(id, &dims))
            .collect();
        // pop from the back, so lower ids hand out first
        let free = (0..capacity_blocks).rev().collect();
        Ok(Self {
            dims,
            capacity: capacity_blocks,
            blocks,
            free,
            tables: BTreeMap::new(),
        })
    }

    pub fn dims(&self) -> &CacheDims {
        &self.dims
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn free_blocks(&self) -> usize {
        self.free.len()
    }

    pub fn allocated_blocks(&self) -> usize {
        self.capacity - self.free.len()
    }

    /// Logical block ids for a sequence, in token order.
    pub fn table(&self, seq_id: &str) -> Option<&[usize]> {
        self.tables.get(seq_id).map(|t| t.entries.as_slice())
    }

    /// Physical id behind one logical slot.
    pub fn table_entry(&self, seq_id: &str, logical: usize) -> Result<usize> {
        let table = self
            .tables
            .get(seq_id)
            .ok_or_else(|| invalid_arg(format!("unknown sequence {seq_id}")))?;
        table
            .entries
            .get(logical)
            .copied()
            .ok_or_else(|| invalid_arg(format!("logical block {logical} out of range")))
    }

    /// Tokens stored for a sequence.
    pub fn sequence_tokens(&self, seq_id: &str) -> usize {
        self.tables
            .get(seq_id)
            .map(|t| self.table_tokens(t))
            .unwrap_or(0)
    }

    fn table_tokens(&self, table: &BlockTable) -> usize {
        table
            .entries
            .iter()
            .map(|&id| self.blocks[id].fill)
            .sum()
    }

    /// Raw payload of one physical block, for checksums and debugging.
    pub fn block_payload(&self, physical: usize) -> Result<(&[f32], &[f32])> {
        let block = self
            .blocks
            .get(physical)
            .ok_or_else(|| invalid_arg(format!("physical block {physical} out of range")))?;
        Ok((&block.keys, &block.values))
    }

    pub fn block_refcount(&self, physical: usize) -> Result<usize> {
        Ok(self
            .blocks
            .get(physical)
            .ok_or_else(|| invalid_arg(format!("physical block {physical} out of range")))?
            .refcount)
    }

    fn payload_slot_index(&self, layer: usize, slot: usize, head: usize) -> usize {
        ((layer * self.dims.block_size + slot) * self.dims.num_heads + head) * self.dims.head_dim
    }

    /// Appends one token's K/V (flattened `[layers x heads x head_dim]`) to a
    /// sequence, allocating a fresh block when the tail is full or shared.
    /// Returns the token's logical position. On out-of-memory the store is
    /// left unchanged.
    pub fn append_token(&mut self, seq_id: &str, keys: &[f32], values: &[f32]) -> Result<usize> {
        let per_token = self.dims.entries_per_token();
        if keys.len() != per_token || values.len() != per_token {
            return Err(invalid_arg(format!(
                "expected {per_token} key and value elements per token, got {} and {}",
                keys.len(),
                values.len()
            )));
        }

        let needs_new_block = match self.tables.get(seq_id) {
            None => true,
            Some(table) => match table.entries.last() {
                None => true,
                Some(&last) => {
                    let block = &self.blocks[last];
                    block.fill == self.dims.block_size || block.refcount > 1
                }
            },
        };

        if needs_new_block && self.free.is_empty() {
            return Err(Error::OutOfMemory);
        }

        let table = self.tables.entry(seq_id.to_string()).or_default();
        if needs_new_block {
            let id = self.free.pop().expect("checked non-empty");
            let block = &mut self.blocks[id];
            block.refcount = 1;
            block.fill = 0;
            table.entries.push(id);
            table.shared.push(false);
        }

        let physical = *table.entries.last().expect("tail exists");
        let logical_blocks = table.entries.len();
        let slot = self.blocks[physical].fill;
        for layer in 0..self.dims.num_layers {
            let src = layer * self.dims.num_heads * self.dims.head_dim;
            let dst = self.payload_slot_index(layer, slot, 0);
            let span = self.dims.num_heads * self.dims.head_dim;
            self.blocks[physical].keys[dst..dst + span].copy_from_slice(&keys[src..src + span]);
            self.blocks[physical].values[dst..dst + span]
                .copy_from_slice(&values[src..src + span]);
        }
        self.blocks[physical].fill += 1;
        Ok((logical_blocks - 1) * self.dims.block_size + slot)
    }

    /// Remaps the target's table entry onto the source's physical block.
    /// No payload bytes move; refcounts are adjusted and the displaced block
    /// returns to the free list if unreferenced. Returns whether a physical
    /// block was freed. Sharing the same pair again is a no-op.
    pub fn share_block(
        &mut self,
        target: (&str, usize),
        source: (&str, usize),
    ) -> Result<bool> {
        let target_phys = self.table_entry(target.0, target.1)?;
        let source_phys = self.table_entry(source.0, source.1)?;

        if self.blocks[target_phys].refcount == 0 || self.blocks[source_phys].refcount == 0 {
            return Err(Error::Corruption(format!(
                "table references a free block ({target_phys} or {source_phys})"
            )));
        }
        if target_phys == source_phys {
            return Ok(false);
        }
        let bs = self.dims.block_size;
        if self.blocks[target_phys].fill != bs || self.blocks[source_phys].fill != bs {
            return Err(invalid_arg(
                "only fully filled blocks can participate in sharing",
            ));
        }

        self.blocks[source_phys].refcount += 1;
        self.blocks[target_phys].refcount -= 1;
        let freed = self.blocks[target_phys].refcount == 0;
        if freed {
            self.free.push(target_phys);
        }

        let table = self.tables.get_mut(target.0).expect("resolved above");
        table.entries[target.1] = source_phys;
        table.shared[target.1] = true;
        Ok(freed)
    }

    /// Drops a sequence, decrementing every referenced block and reclaiming
    /// those that reach refcount zero. Returns the reclaimed block count.
    pub fn free_sequence(&mut self, seq_id: &str) -> Result<usize> {
        let table = self
            .tables
            .remove(seq_id)
            .ok_or_else(|| invalid_arg(format!("unknown sequence {seq_id}")))?;
        let mut reclaimed = 0;
        for id in table.entries {
            let block = &mut self.blocks[id];
            if block.refcount == 0 {
                return Err(Error::Corruption(format!(
                    "block {id} referenced with refcount 0"
                )));
            }
            block.refcount -= 1;
            if block.refcount == 0 {
                self.free.push(id);
                reclaimed += 1;
            }
        }
        Ok(reclaimed)
    }

    /// Keys and values for one (sequence, layer, head) in logical token
    /// order, following the block table through any remapped ids.
    pub fn gather_attention_view(
        &self,
        seq_id: &str,
        layer: usize,
        head: usize,
    ) -> Result<(Vec<Vector>, Vec<Vector>)> {
        if layer >= self.dims.num_layers || head >= self.dims.num_heads {
            return Err(invalid_arg("layer or head out of range"));
        }
        let table = self
            .tables
            .get(seq_id)
            .ok_or_else(|| invalid_arg(format!("unknown sequence {seq_id}")))?;
        let mut keys = Vec::new();
        let mut values = Vec::new();
        for &id in &table.entries {
            let block = &self.blocks[id];
            for slot in 0..block.fill {
                let i = self.payload_slot_index(layer, slot, head);
                let span = self.dims.head_dim;
                keys.push(Vector::new(
                    block.keys[i..i + span].iter().map(|x| *x as f64).collect(),
                )?);
                values.push(Vector::new(
                    block.values[i..i + span].iter().map(|x| *x as f64).collect(),
                )?);
            }
        }
        Ok((keys, values))
    }

    pub fn memory_stats(&self) -> MemoryStats {
        let logical_blocks = self.tables.values().map(|t| t.entries.len()).sum();
        let shared_slots: usize = self
            .tables
            .values()
            .map(|t| t.shared.iter().filter(|s| **s).count())
            .sum();
        let total_tokens: u64 = self
            .tables
            .values()
            .map(|t| self.table_tokens(t) as u64)
            .sum();
        MemoryStats {
            total_blocks: self.capacity,
            allocated_physical: self.allocated_blocks(),
            logical_blocks,
            shared_tokens: (shared_slots * self.dims.block_size) as u64,
            total_tokens,
            bytes_per_token: self.dims.bytes_per_token(),
        }
    }

    /// Recounts every reference and cross-checks the free list. Errors on
    /// any mismatch: stale refcounts, dangling entries, free blocks still
    /// referenced, or a broken allocated+free == capacity balance.
    pub fn verify_integrity(&self) -> Result<()> {
        let mut counted = vec![0usize; self.capacity];
        for (seq, table) in &self.tables {
            if table.entries.len() != table.shared.len() {
                return Err(Error::Corruption(format!(
                    "sequence {seq} has mismatched table metadata"
                )));
            }
            for (i, &id) in table.entries.iter().enumerate() {
                if id >= self.capacity {
                    return Err(Error::Corruption(format!(
                        "sequence {seq} references nonexistent block {id}"
                    )));
                }
                counted[id] += 1;
                let fill = self.blocks[id].fill;
                if i + 1 < table.entries.len() && fill != self.dims.block_size {
                    return Err(Error::Corruption(format!(
                        "sequence {seq} has a partially filled interior block {id}"
                    )));
                }
            }
        }
        for (id, block) in self.blocks.iter().enumerate() {
            if block.refcount != counted[id] {
                return Err(Error::Corruption(format!(
                    "block {id} refcount {} but {} table references",
                    block.refcount, counted[id]
                )));
            }
        }
        let mut in_free = vec![false; self.capacity];
        for &id in &self.free {
            if id >= self.capacity || in_free[id] {
                return Err(Error::Corruption(format!("free list corrupt at {id}")));
            }
            in_free[id] = true;
            if counted[id] != 0 {
                return Err(Error::Corruption(format!(
                    "free block {id} is still referenced"
                )));
            }
        }
        let allocated = counted.iter().filter(|c| **c > 0).count();
        if allocated + self.free.len() != self.capacity {
            return Err(Error::Corruption(format!(
                "allocated {allocated} + free {} != capacity {}",
                self.free.len(),
                self.capacity
            )));
        }
        Ok(())
    }

    /// JSON snapshot of the table/refcount state:
    /// `{capacity, dims, tables: {seq_id: [ids]}, refcounts: [..], fill: [..]}`.
    pub fn snapshot_json(&self) -> serde_json::Value {
        let tables: BTreeMap<&str, &Vec<usize>> = self
            .tables
            .iter()
            .map(|(k, v)| (k.as_str(), &v.entries))
            .collect();
        serde_json::json!({
            "capacity": self.capacity,
            "dims": self.dims,
            "tables": tables,
            "refcounts": self.blocks.iter().map(|b| b.refcount).collect::<Vec<_>>(),
            "fill": self.blocks.iter().map(|b| b.fill).collect::<Vec<_>>(),
        })
    }
}
