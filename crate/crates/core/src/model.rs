//! Model parameters, last-layer segmentation and the canonical byte format.
//!
//! Only the last fully connected layer is segmented. Row `i` of that layer
//! (its weight row together with bias entry `i`) belongs to exactly one
//! [`SegmentSpec`]; lower layers are shared by every segment.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CANONICAL_MAGIC: [u8; 4] = *b"FBGM";
pub const CANONICAL_VERSION: u16 = 1;

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidInput(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A cluster's inclusive neuron range `[start, end]` in the last layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentSpec {
    pub cluster_id: usize,
    pub start: usize,
    pub end: usize,
}

impl SegmentSpec {
    pub fn contains(&self, row: usize) -> bool {
        self.start <= row && row <= self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rows(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

/// All trainable weights. The last layer is `num_output_units × hidden_dim`
/// with one bias per output unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    lower_layers: Vec<Tensor>,
    last_layer_weights: Tensor,
    last_layer_bias: Tensor,
}

/// Parameter deltas share the parameter layout.
pub type ModelDelta = ModelParams;

impl ModelParams {
    pub fn new(lower_layers: Vec<Tensor>, last_layer_weights: Tensor, last_layer_bias: Tensor) -> Result<Self> {
        if last_layer_weights.shape.len() != 2 {
            return Err(Error::InvalidInput("last layer weights must be a matrix".into()));
        }
        if last_layer_bias.shape.len() != 1 || last_layer_bias.shape[0] != last_layer_weights.shape[0] {
            return Err(Error::InvalidInput(format!(
                "last layer bias shape {:?} does not match {} output units",
                last_layer_bias.shape, last_layer_weights.shape[0]
            )));
        }
        if last_layer_weights.shape[0] == 0 {
            return Err(Error::InvalidInput("last layer has no output units".into()));
        }
        Ok(Self {
            lower_layers,
            last_layer_weights,
            last_layer_bias,
        })
    }

    pub fn lower_layers(&self) -> &[Tensor] {
        &self.lower_layers
    }

    pub fn lower_layers_mut(&mut self) -> &mut [Tensor] {
        &mut self.lower_layers
    }

    pub fn last_weights(&self) -> &Tensor {
        &self.last_layer_weights
    }

    pub fn last_weights_mut(&mut self) -> &mut Tensor {
        &mut self.last_layer_weights
    }

    pub fn last_bias(&self) -> &Tensor {
        &self.last_layer_bias
    }

    pub fn last_bias_mut(&mut self) -> &mut Tensor {
        &mut self.last_layer_bias
    }

    pub fn num_output_units(&self) -> usize {
        self.last_layer_weights.shape[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.last_layer_weights.shape[1]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            lower_layers: self.lower_layers.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
            last_layer_weights: Tensor::zeros(&self.last_layer_weights.shape),
            last_layer_bias: Tensor::zeros(&self.last_layer_bias.shape),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.lower_layers
            .iter()
            .chain(std::iter::once(&self.last_layer_weights))
            .chain(std::iter::once(&self.last_layer_bias))
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.lower_layers
            .iter_mut()
            .chain(std::iter::once(&mut self.last_layer_weights))
            .chain(std::iter::once(&mut self.last_layer_bias))
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.lower_layers.len() == other.lower_layers.len() && self.tensors().zip(other.tensors()).all(|(a, b)| a.shape == b.shape)
    }

    pub fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ContractViolation("model shapes differ".into()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    fn lower_len(&self) -> usize {
        self.lower_layers.iter().map(Tensor::len).sum()
    }

    /// Concatenates lower layers, last-layer weights (row-major) and bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Rebuilds parameters with this layout from a flat vector.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::ContractViolation(format!(
                "flat vector has {} values, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    /// Flat indices (see [`flatten`](Self::flatten)) a peer of `seg` may
    /// modify: every lower-layer coordinate plus the segment's rows and bias
    /// entries, in ascending order.
    pub fn owned_indices(&self, seg: &SegmentSpec) -> Result<Vec<usize>> {
        self.check_segment(seg)?;
        let lower = self.lower_len();
        let hidden = self.hidden_dim();
        let weights = self.last_layer_weights.len();
        let mut idx: Vec<usize> = (0..lower).collect();
        idx.extend(lower + seg.start * hidden..lower + (seg.end + 1) * hidden);
        idx.extend(lower + weights + seg.start..=lower + weights + seg.end);
        Ok(idx)
    }

    /// Flat indices of the segment's last-layer rows and bias entries only.
    pub fn segment_row_indices(&self, seg: &SegmentSpec) -> Result<Vec<usize>> {
        let lower = self.lower_len();
        Ok(self.owned_indices(seg)?.into_iter().filter(|&i| i >= lower).collect())
    }

    /// Flat indices of all lower-layer coordinates.
    pub fn lower_indices(&self) -> Vec<usize> {
        (0..self.lower_len()).collect()
    }

    fn check_segment(&self, seg: &SegmentSpec) -> Result<()> {
        if seg.start > seg.end || seg.end >= self.num_output_units() {
            return Err(Error::ContractViolation(format!(
                "segment [{}, {}] outside {} output units",
                seg.start,
                seg.end,
                self.num_output_units()
            )));
        }
        Ok(())
    }

    pub fn last_row(&self, row: usize) -> &[f64] {
        let h = self.hidden_dim();
        &self.last_layer_weights.data[row * h..(row + 1) * h]
    }

    fn row_is_zero(&self, row: usize) -> bool {
        self.last_row(row).iter().all(|&v| v == 0.0) && self.last_layer_bias.data[row] == 0.0
    }

    /// Element-wise `self + other`.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
        out
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_shape(other)?;
        let mut out = self.clone();
        for (t, o) in out.tensors_mut().zip(other.tensors()) {
            t.data.iter_mut().zip(&o.data).for_each(|(a, &b)| *a = f(*a, b));
        }
        Ok(out)
    }

    /// Adds `delta` to lower layers and to the rows of `seg` only; rows
    /// outside the segment are left untouched bit for bit.
    pub fn apply_in_segment(&self, delta: &ModelDelta, seg: &SegmentSpec) -> Result<Self> {
        self.check_shape(delta)?;
        let idx = self.owned_indices(seg)?;
        let mut flat = self.flatten();
        let d = delta.flatten();
        for i in idx {
            flat[i] += d[i];
        }
        self.unflatten_like(&flat)
    }

    /// Replaces the owned coordinates of `seg` with `base + values`, where
    /// `values` is ordered like [`owned_indices`](Self::owned_indices).
    pub fn with_owned_offsets(&self, seg: &SegmentSpec, values: &[f64]) -> Result<Self> {
        let idx = self.owned_indices(seg)?;
        if idx.len() != values.len() {
            return Err(Error::ContractViolation("owned coordinate count mismatch".into()));
        }
        let mut flat = self.flatten();
        for (i, v) in idx.into_iter().zip(values) {
            flat[i] += v;
        }
        self.unflatten_like(&flat)
    }
}

/// Splits `num_units` output neurons into `num_segments` contiguous ranges.
/// Sizes differ by at most one; the remainder goes to the lowest-indexed
/// segments.
pub fn segment_boundaries(num_units: usize, num_segments: usize) -> Result<Vec<SegmentSpec>> {
    if num_units == 0 || num_segments == 0 {
        return Err(Error::InvalidConfig("unit and segment counts must be positive".into()));
    }
    if num_segments > num_units {
        return Err(Error::InvalidConfig(format!(
            "{num_segments} segments cannot split {num_units} output units"
        )));
    }
    let base = num_units / num_segments;
    let extra = num_units % num_segments;
    let mut start = 0;
    Ok((0..num_segments)
        .map(|k| {
            let size = base + usize::from(k < extra);
            let spec = SegmentSpec {
                cluster_id: k,
                start,
                end: start + size - 1,
            };
            start += size;
            spec
        })
        .collect())
}

/// Zeroes every last-layer row (weights and bias) outside `seg`. Lower
/// layers pass through.
pub fn mask_to_segment(update: &ModelDelta, seg: &SegmentSpec) -> Result<ModelDelta> {
    update.check_segment(seg)?;
    let mut out = update.clone();
    let h = out.hidden_dim();
    for row in 0..out.num_output_units() {
        if !seg.contains(row) {
            out.last_layer_weights.data[row * h..(row + 1) * h].fill(0.0);
            out.last_layer_bias.data[row] = 0.0;
        }
    }
    Ok(out)
}

/// Rebuilds a full model from per-segment deltas.
///
/// Row `i` of the last layer becomes `base[i] + delta_k[i]` for the unique
/// segment `k` containing `i`; rows of segments without a delta keep the base
/// values. Lower layers become `base + lower_delta` when a combined
/// lower-layer delta is supplied.
pub fn assemble_global(
    base: &ModelParams,
    per_segment_deltas: &BTreeMap<usize, ModelDelta>,
    specs: &[SegmentSpec],
    lower_delta: Option<&ModelDelta>,
) -> Result<ModelParams> {
    let by_cluster: BTreeMap<usize, &SegmentSpec> = specs.iter().map(|s| (s.cluster_id, s)).collect();
    let mut out = base.clone();
    let h = base.hidden_dim();
    for (cluster, delta) in per_segment_deltas {
        let seg = by_cluster
            .get(cluster)
            .ok_or_else(|| Error::ContractViolation(format!("no segment spec for cluster {cluster}")))?;
        base.check_shape(delta)?;
        base.check_segment(seg)?;
        if let Some(row) = (0..delta.num_output_units()).find(|&r| !seg.contains(r) && !delta.row_is_zero(r)) {
            return Err(Error::Integrity(format!(
                "delta for cluster {cluster} writes row {row} outside its segment"
            )));
        }
        for row in seg.rows() {
            let w = &mut out.last_layer_weights.data[row * h..(row + 1) * h];
            w.iter_mut().zip(delta.last_row(row)).for_each(|(a, b)| *a += b);
            out.last_layer_bias.data[row] += delta.last_layer_bias.data[row];
        }
    }
    if let Some(lower) = lower_delta {
        base.check_shape(lower)?;
        for (t, d) in out.lower_layers.iter_mut().zip(&lower.lower_layers) {
            t.data.iter_mut().zip(&d.data).for_each(|(a, b)| *a += b);
        }
    }
    Ok(out)
}

/// Deterministic little-endian encoding:
/// magic, version (u16), tensor count (u32), then per tensor rank (u32) and
/// dims (u64 each), then every tensor's `f64` payload in order. The last two
/// tensors are the last-layer weights and bias.
pub fn canonical_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    if !params.is_finite() {
        return Err(Error::Serialization("parameters contain non-finite values".into()));
    }
    let tensors: Vec<&Tensor> = params.tensors().collect();
    let mut out = Vec::with_capacity(16 + params.num_params() * 8);
    out.extend_from_slice(&CANONICAL_MAGIC);
    out.extend_from_slice(&CANONICAL_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in &tensors {
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for t in &tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Serialization("truncated model bytes".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Inverse of [`canonical_bytes`].
pub fn decode_canonical(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CANONICAL_MAGIC {
        return Err(Error::Serialization("bad magic".into()));
    }
    let version = r.u16()?;
    if version != CANONICAL_VERSION {
        return Err(Error::Serialization(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    if count < 2 {
        return Err(Error::Serialization("model needs at least two tensors".into()));
    }
    let mut shapes = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Serialization("dimension overflow".into()))?);
        }
        shapes.push(shape);
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in shapes {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Serialization("tensor size overflow".into()))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Serialization("tensor size overflow".into()))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Serialization("non-finite value in payload".into()));
        }
        tensors.push(Tensor { shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::Serialization("trailing bytes after payload".into()));
    }
    let bias = tensors.pop().expect("count >= 2");
    let weights = tensors.pop().expect("count >= 2");
    ModelParams::new(tensors, weights, bias).map_err(|e| Error::Serialization(e.to_string()))
}
