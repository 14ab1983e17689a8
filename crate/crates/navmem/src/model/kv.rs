//! Per-group KV cache blocks and their on-disk format.

use crate::error::{Error, Result};

pub const KV_HEADER_BYTES: u64 = 8 + 4 * 5;

/// Key/value rows for one transformer layer. Row-major over tokens:
/// index `(t, h, d)` lives at `(t * num_heads + h) * head_dim + d`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKv {
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

/// All-layer KV cache of one object group, computed in isolation at the
/// group's own rotary positions. Appending tokens extends each layer's
/// rows and leaves existing entries bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct KVBlock {
    pub group_id: u64,
    pub position_offset: u32,
    token_count: u32,
    num_heads: u32,
    head_dim: u32,
    pub layers: Vec<LayerKv>,
}

impl KVBlock {
    pub fn empty(
        group_id: u64,
        position_offset: u32,
        num_layers: usize,
        num_heads: u32,
        head_dim: u32,
    ) -> Self {
        KVBlock {
            group_id,
            position_offset,
            token_count: 0,
            num_heads,
            head_dim,
            layers: vec![
                LayerKv {
                    k: Vec::new(),
                    v: Vec::new()
                };
                num_layers
            ],
        }
    }

    pub fn token_count(&self) -> u32 {
        self.token_count
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> u32 {
        self.num_heads
    }

    pub fn head_dim(&self) -> u32 {
        self.head_dim
    }

    /// End position of the block in rotary coordinates.
    pub fn end_position(&self) -> u32 {
        self.position_offset + self.token_count
    }

    pub(crate) fn row_width(&self) -> usize {
        (self.num_heads * self.head_dim) as usize
    }

    /// Append per-layer rows produced for `extra_tokens` new tokens.
    pub fn append_rows(&mut self, rows: &[LayerKv], extra_tokens: u32) {
        assert_eq!(rows.len(), self.layers.len(), "layer count mismatch");
        let width = self.row_width() * extra_tokens as usize;
        for (layer, delta) in self.layers.iter_mut().zip(rows) {
            assert_eq!(delta.k.len(), width, "K row width mismatch");
            assert_eq!(delta.v.len(), width, "V row width mismatch");
            layer.k.extend_from_slice(&delta.k);
            layer.v.extend_from_slice(&delta.v);
        }
        self.token_count += extra_tokens;
    }

    /// Clone of the first `layers` layers, used as the always-resident
    /// clustering probe slice.
    pub fn probe_prefix(&self, layers: usize) -> KVBlock {
        let n = layers.min(self.layers.len());
        KVBlock {
            group_id: self.group_id,
            position_offset: self.position_offset,
            token_count: self.token_count,
            num_heads: self.num_heads,
            head_dim: self.head_dim,
            layers: self.layers[..n].to_vec(),
        }
    }

    /// Serialized size of a block with this shape holding `tokens` tokens.
    pub fn serialized_size_for(num_layers: usize, num_heads: u32, head_dim: u32, tokens: u64) -> u64 {
        KV_HEADER_BYTES + 2 * num_layers as u64 * tokens * u64::from(num_heads) * u64::from(head_dim) * 4
    }

    pub fn serialized_size(&self) -> u64 {
        Self::serialized_size_for(
            self.layers.len(),
            self.num_heads,
            self.head_dim,
            u64::from(self.token_count),
        )
    }

    /// Little-endian binary layout: header (group_id u64, L u32, H u32,
    /// head_dim u32, T u32, position_offset u32), then every layer's K
    /// rows, then every layer's V rows, row-major f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_size() as usize);
        out.extend_from_slice(&self.group_id.to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.num_heads.to_le_bytes());
        out.extend_from_slice(&self.head_dim.to_le_bytes());
        out.extend_from_slice(&self.token_count.to_le_bytes());
        out.extend_from_slice(&self.position_offset.to_le_bytes());
        for layer in &self.layers {
            for x in &layer.k {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        for layer in &self.layers {
            for x in &layer.v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<KVBlock> {
        if bytes.len() < KV_HEADER_BYTES as usize {
            return Err(Error::CorruptBlock(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let group_id = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let read_u32 =
            |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let num_layers = read_u32(8) as usize;
        let num_heads = read_u32(12);
        let head_dim = read_u32(16);
        let token_count = read_u32(20);
        let position_offset = read_u32(24);
        let expect = Self::serialized_size_for(num_layers, num_heads, head_dim, u64::from(token_count));
        if bytes.len() as u64 != expect {
            return Err(Error::CorruptBlock(format!(
                "expected {expect} bytes for shape L={num_layers} H={num_heads} d={head_dim} T={token_count}, got {}",
                bytes.len()
            )));
        }
        let width = (token_count * num_heads * head_dim) as usize;
        let mut at = KV_HEADER_BYTES as usize;
        let read_plane = |at: &mut usize| -> Vec<f32> {
            let mut plane = Vec::with_capacity(width);
            for _ in 0..width {
                plane.push(f32::from_le_bytes(bytes[*at..*at + 4].try_into().unwrap()));
                *at += 4;
            }
            plane
        };
        let mut ks = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            ks.push(read_plane(&mut at));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for k in ks {
            let v = read_plane(&mut at);
            layers.push(LayerKv { k, v });
        }
        Ok(KVBlock {
            group_id,
            position_offset,
            token_count,
            num_heads,
            head_dim,
            layers,
        })
    }
}
