//! Per-layer, per-row, per-position K/V storage with single-column
//! overwrite and deviation metrics.
//!
//! The cache is the only mutable state a decode run carries between steps,
//! so the repair policy's correctness argument rests on two properties
//! checked here: an overwrite touches exactly one (row, position) column in
//! every layer, and reads return bit-identical data to what was written.

use crate::error::{Error, Result};
use crate::numerics::Bf16;

/// K and V columns for one content position across all layers.
///
/// `k[layer]` and `v[layer]` are the flattened `[heads * head_dim]` column
/// vectors. This is the unit the verifier hands back for a repair and the
/// unit diagnostics compare against the reference trajectory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnSet {
    pub k: Vec<Vec<Bf16>>,
    pub v: Vec<Vec<Bf16>>,
}

impl ColumnSet {
    pub fn layers(&self) -> usize {
        self.k.len()
    }

    fn check_shape(&self, layers: usize, width: usize) -> Result<()> {
        if self.k.len() != layers || self.v.len() != layers {
            return Err(Error::InvalidArgument(format!(
                "column set has {}/{} K/V layers, cache has {layers}",
                self.k.len(),
                self.v.len()
            )));
        }
        for (l, (k, v)) in self.k.iter().zip(&self.v).enumerate() {
            if k.len() != width || v.len() != width {
                return Err(Error::InvalidArgument(format!(
                    "column set layer {l} has K/V widths {}/{}, cache has {width}",
                    k.len(),
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer (K, V) Euclidean deviations between two column sets.
///
/// Norms are taken over the flattened `[heads * head_dim]` difference,
/// accumulated in f32 after widening from BF16.
pub fn column_deviation(a: &ColumnSet, b: &ColumnSet) -> Result<Vec<(f32, f32)>> {
    if a.layers() != b.layers() {
        return Err(Error::InvalidArgument(format!(
            "column sets have {} vs {} layers",
            a.layers(),
            b.layers()
        )));
    }
    let mut out = Vec::with_capacity(a.layers());
    for layer in 0..a.layers() {
        let dk = norm_of_difference(&a.k[layer], &b.k[layer])?;
        let dv = norm_of_difference(&a.v[layer], &b.v[layer])?;
        out.push((dk, dv));
    }
    Ok(out)
}

fn norm_of_difference(a: &[Bf16], b: &[Bf16]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "column widths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = x.to_f32() - y.to_f32();
        acc += d * d;
    }
    Ok(acc.sqrt())
}

/// Key/value cache for one decode run.
///
/// Logically a pair of 5-dimensional BF16 arrays indexed
/// `[layer][row][position][head][head_dim]`; stored layer-major with the
/// trailing `[head][head_dim]` axes flattened into a `width`-length column.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers: usize,
    rows: usize,
    capacity: usize,
    width: usize,
    /// `k[layer][row]` is `filled[row] * width` values, position-major.
    k: Vec<Vec<Vec<Bf16>>>,
    v: Vec<Vec<Vec<Bf16>>>,
    filled: Vec<usize>,
}

impl KvCache {
    pub fn new(layers: usize, rows: usize, capacity: usize, width: usize) -> Result<KvCache> {
        if layers == 0 || rows == 0 || capacity == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "cache dimensions must be >= 1, got layers={layers} rows={rows} \
                 capacity={capacity} width={width}"
            )));
        }
        let make = || {
            (0..layers)
                .map(|_| (0..rows).map(|_| Vec::new()).collect())
                .collect()
        };
        Ok(KvCache {
            layers,
            rows,
            capacity,
            width,
            k: make(),
            v: make(),
            filled: vec![0; rows],
        })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn filled_length(&self, row: usize) -> usize {
        self.filled[row]
    }

    fn check_row(&self, row: usize) -> Result<()> {
        if row >= self.rows {
            return Err(Error::InvalidArgument(format!(
                "row {row} out of range (cache has {} rows)",
                self.rows
            )));
        }
        Ok(())
    }

    fn check_position(&self, row: usize, position: usize) -> Result<()> {
        self.check_row(row)?;
        if position >= self.filled[row] {
            return Err(Error::InvalidArgument(format!(
                "position {position} beyond filled length {} of row {row}",
                self.filled[row]
            )));
        }
        Ok(())
    }

    /// Append `columns` at the row's next free position.
    pub fn append_column(&mut self, row: usize, columns: &ColumnSet) -> Result<()> {
        self.check_row(row)?;
        columns.check_shape(self.layers, self.width)?;
        if self.filled[row] >= self.capacity {
            return Err(Error::Capacity(format!(
                "row {row} is full ({} positions)",
                self.capacity
            )));
        }
        for layer in 0..self.layers {
            self.k[layer][row].extend_from_slice(&columns.k[layer]);
            self.v[layer][row].extend_from_slice(&columns.v[layer]);
        }
        self.filled[row] += 1;
        Ok(())
    }

    /// Replace the column at an already-filled position, all layers, K and V.
    /// Nothing else changes.
    pub fn overwrite_column(
        &mut self,
        row: usize,
        position: usize,
        columns: &ColumnSet,
    ) -> Result<()> {
        self.check_position(row, position)?;
        columns.check_shape(self.layers, self.width)?;
        let (lo, hi) = (position * self.width, (position + 1) * self.width);
        for layer in 0..self.layers {
            self.k[layer][row][lo..hi].copy_from_slice(&columns.k[layer]);
            self.v[layer][row][lo..hi].copy_from_slice(&columns.v[layer]);
        }
        Ok(())
    }

    /// Copy out the column at a filled position.
    pub fn column_at(&self, row: usize, position: usize) -> Result<ColumnSet> {
        self.check_position(row, position)?;
        let (lo, hi) = (position * self.width, (position + 1) * self.width);
        let k = (0..self.layers)
            .map(|layer| self.k[layer][row][lo..hi].to_vec())
            .collect();
        let v = (0..self.layers)
            .map(|layer| self.v[layer][row][lo..hi].to_vec())
            .collect();
        Ok(ColumnSet { k, v })
    }

    /// K column at one (layer, row, position), as a `width`-length slice.
    pub fn k_at(&self, layer: usize, row: usize, position: usize) -> &[Bf16] {
        let lo = position * self.width;
        &self.k[layer][row][lo..lo + self.width]
    }

    /// V column at one (layer, row, position).
    pub fn v_at(&self, layer: usize, row: usize, position: usize) -> &[Bf16] {
        let lo = position * self.width;
        &self.v[layer][row][lo..lo + self.width]
    }

    /// Drop a row's columns beyond `len`. Test-harness reset only; the gate
    /// policy never truncates.
    pub fn truncate(&mut self, row: usize, len: usize) -> Result<()> {
        self.check_row(row)?;
        if len > self.filled[row] {
            return Err(Error::InvalidArgument(format!(
                "cannot truncate row {row} to {len}, filled length is {}",
                self.filled[row]
            )));
        }
        for layer in 0..self.layers {
            self.k[layer][row].truncate(len * self.width);
            self.v[layer][row].truncate(len * self.width);
        }
        self.filled[row] = len;
        Ok(())
    }

    /// FNV-1a digest over every stored bit plus the per-row filled lengths.
    pub fn digest(&self) -> u64 {
        self.digest_skipping(None)
    }

    /// Same digest, but skipping the column at `(row, position)` in every
    /// layer, K and V. Used to check that an overwrite touched nothing else.
    pub fn digest_excluding(&self, row: usize, position: usize) -> u64 {
        self.digest_skipping(Some((row, position)))
    }

    fn digest_skipping(&self, skip: Option<(usize, usize)>) -> u64 {
        const OFFSET: u64 = 0xCBF2_9CE4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01B3;
        let mut h = OFFSET;
        let mut eat = |bits: u16| {
            for byte in bits.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for layer in 0..self.layers {
            for row in 0..self.rows {
                for position in 0..self.filled[row] {
                    if skip == Some((row, position)) {
                        continue;
                    }
                    let lo = position * self.width;
                    for b in &self.k[layer][row][lo..lo + self.width] {
                        eat(b.to_bits());
                    }
                    for b in &self.v[layer][row][lo..lo + self.width] {
                        eat(b.to_bits());
                    }
                }
            }
        }
        for &len in &self.filled {
            eat(len as u16);
            eat((len >> 16) as u16);
        }
        h
    }
}
