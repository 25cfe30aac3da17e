//! Flat parameter vectors and the arithmetic shared by every aggregation step.
//!
//! A [`FlatParams`] is a single contiguous `f64` vector plus a layer table that
//! names contiguous slices of it. All aggregation, fusion and similarity code
//! operates on this representation so that layouts can be checked once and
//! the math stays a plain loop over slices.

use std::collections::BTreeSet;
use std::io::{self, Read, Write};
use std::ops::Range;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("parameter layouts differ")]
    LayoutMismatch,
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("no models supplied")]
    EmptyInput,
    #[error("total sample count is zero")]
    ZeroTotalWeight,
    #[error("layer partition does not match layout: {0}")]
    PartitionMismatch(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
}

/// One named contiguous slice of a parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl LayerSpec {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered layer table. Offsets are contiguous from zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Layout {
    layers: Vec<LayerSpec>,
}

impl Layout {
    /// Builds a layout from `(name, length)` pairs, assigning contiguous offsets.
    pub fn from_lengths<S: Into<String>>(
        layers: impl IntoIterator<Item = (S, usize)>,
    ) -> Result<Self, ParamError> {
        let mut offset = 0;
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for (name, len) in layers {
            let name = name.into();
            if !seen.insert(name.clone()) {
                return Err(ParamError::InvalidLayout(format!("duplicate layer `{name}`")));
            }
            out.push(LayerSpec { name, offset, len });
            offset += len;
        }
        Ok(Self { layers: out })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn total_len(&self) -> usize {
        self.layers.last().map_or(0, |l| l.offset + l.len)
    }

    pub fn get(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }
}

/// A model's full parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    values: Vec<f64>,
    layout: Layout,
    sample_count: u64,
}

impl FlatParams {
    pub fn new(values: Vec<f64>, layout: Layout, sample_count: u64) -> Result<Self, ParamError> {
        if values.len() != layout.total_len() {
            return Err(ParamError::InvalidLayout(format!(
                "layout covers {} values but vector has {}",
                layout.total_len(),
                values.len()
            )));
        }
        Ok(Self {
            values,
            layout,
            sample_count,
        })
    }

    /// A single-layer parameter vector; handy for tests and small examples.
    pub fn single(values: Vec<f64>, sample_count: u64) -> Self {
        let layout = Layout::from_lengths([("w", values.len())]).expect("single layer");
        Self {
            values,
            layout,
            sample_count,
        }
    }

    pub fn zeros(layout: Layout) -> Self {
        Self {
            values: vec![0.0; layout.total_len()],
            layout,
            sample_count: 0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn with_sample_count(mut self, n: u64) -> Self {
        self.sample_count = n;
        self
    }

    pub fn set_sample_count(&mut self, n: u64) {
        self.sample_count = n;
    }

    pub fn layer(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|l| &self.values[l.range()])
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.layout.get(name)?.range();
        Some(&mut self.values[range])
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_layout(&self, other: &FlatParams) -> Result<(), ParamError> {
        if self.layout != other.layout {
            return Err(ParamError::LayoutMismatch);
        }
        Ok(())
    }

    /// SHA-256 over the little-endian value bytes, hex encoded (first 16 bytes).
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for v in &self.values {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        digest[..16].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the binary checkpoint form: magic, layer table with
    /// length-prefixed UTF-8 names and offsets, sample count, then the
    /// values as little-endian `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.layout.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layout.layers {
            let name = layer.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(layer.offset as u64).to_le_bytes())?;
            w.write_all(&(layer.len as u64).to_le_bytes())?;
        }
        w.write_all(&self.sample_count.to_le_bytes())?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> io::Result<Self> {
        let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a parameter dump"));
        }
        let n_layers = read_u32(&mut r)? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        let mut expected_offset = 0usize;
        for _ in 0..n_layers {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("layer name is not UTF-8"))?;
            let offset = read_u64(&mut r)? as usize;
            let len = read_u64(&mut r)? as usize;
            if offset != expected_offset {
                return Err(bad("layer offsets are not contiguous"));
            }
            expected_offset += len;
            layers.push((name, len));
        }
        let layout = Layout::from_lengths(layers).map_err(|e| bad(&e.to_string()))?;
        let sample_count = read_u64(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        if n != layout.total_len() {
            return Err(bad("value count does not match layer table"));
        }
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        Ok(Self {
            values,
            layout,
            sample_count,
        })
    }
}

const MAGIC: &[u8; 8] = b"TFPARAM1";

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Cosine similarity `(a·b)/(‖a‖‖b‖)`, in `[-1, 1]`.
pub fn cosine_similarity(a: &FlatParams, b: &FlatParams) -> Result<f64, ParamError> {
    a.check_layout(b)?;
    cosine_slices(a.values(), b.values())
}

/// Cosine similarity over raw slices of equal length.
pub fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, ParamError> {
    if a.len() != b.len() {
        return Err(ParamError::LayoutMismatch);
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(ParamError::ZeroVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Sample-count weighted element-wise mean. The result carries the summed
/// sample count of its inputs.
pub fn weighted_average<'a, I>(models: I) -> Result<FlatParams, ParamError>
where
    I: IntoIterator<Item = &'a FlatParams>,
{
    let models: Vec<&FlatParams> = models.into_iter().collect();
    let first = *models.first().ok_or(ParamError::EmptyInput)?;
    for m in &models[1..] {
        first.check_layout(m)?;
    }
    let total: u64 = models.iter().map(|m| m.sample_count).sum();
    if total == 0 {
        return Err(ParamError::ZeroTotalWeight);
    }
    if models.len() == 1 {
        return Ok(first.clone());
    }
    let total_f = total as f64;
    let mut values = vec![0.0; first.values.len()];
    for m in &models {
        let w = m.sample_count as f64;
        for (acc, v) in values.iter_mut().zip(&m.values) {
            *acc += w * v;
        }
    }
    for v in &mut values {
        *v /= total_f;
    }
    // Equal inputs must come back bit-exact; the weighted sum above can be off
    // by an ulp for some weights.
    if models[1..].iter().all(|m| m.values == first.values) {
        values.clone_from(&first.values);
    }
    Ok(FlatParams {
        values,
        layout: first.layout.clone(),
        sample_count: total,
    })
}

/// Split of layer names into fixed (kept local during dissemination) and
/// variable (blended with the parent) groups.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LayerPartition {
    fixed: BTreeSet<String>,
    variable: BTreeSet<String>,
}

impl LayerPartition {
    pub fn new<S: Into<String>>(
        fixed: impl IntoIterator<Item = S>,
        variable: impl IntoIterator<Item = S>,
    ) -> Result<Self, ParamError> {
        let fixed: BTreeSet<String> = fixed.into_iter().map(Into::into).collect();
        let variable: BTreeSet<String> = variable.into_iter().map(Into::into).collect();
        if let Some(dup) = fixed.intersection(&variable).next() {
            return Err(ParamError::PartitionMismatch(format!(
                "layer `{dup}` is both fixed and variable"
            )));
        }
        Ok(Self { fixed, variable })
    }

    /// Marks `fixed` layers as fixed and every other layer of `layout` as variable.
    pub fn with_fixed<S: AsRef<str>>(layout: &Layout, fixed: &[S]) -> Result<Self, ParamError> {
        let fixed: BTreeSet<String> = fixed.iter().map(|s| s.as_ref().to_string()).collect();
        for name in &fixed {
            if layout.get(name).is_none() {
                return Err(ParamError::PartitionMismatch(format!("unknown layer `{name}`")));
            }
        }
        let variable = layout
            .names()
            .filter(|n| !fixed.contains(*n))
            .map(str::to_string)
            .collect();
        Ok(Self { fixed, variable })
    }

    pub fn all_variable(layout: &Layout) -> Self {
        Self {
            fixed: BTreeSet::new(),
            variable: layout.names().map(str::to_string).collect(),
        }
    }

    pub fn all_fixed(layout: &Layout) -> Self {
        Self {
            fixed: layout.names().map(str::to_string).collect(),
            variable: BTreeSet::new(),
        }
    }

    pub fn fixed_layers(&self) -> &BTreeSet<String> {
        &self.fixed
    }

    pub fn variable_layers(&self) -> &BTreeSet<String> {
        &self.variable
    }

    pub fn is_fixed(&self, layer: &str) -> bool {
        self.fixed.contains(layer)
    }

    /// Checks that the partition names exactly the layers of `layout`.
    pub fn validate(&self, layout: &Layout) -> Result<(), ParamError> {
        for name in self.fixed.iter().chain(&self.variable) {
            if layout.get(name).is_none() {
                return Err(ParamError::PartitionMismatch(format!("unknown layer `{name}`")));
            }
        }
        for name in layout.names() {
            if !self.fixed.contains(name) && !self.variable.contains(name) {
                return Err(ParamError::PartitionMismatch(format!("layer `{name}` not covered")));
            }
        }
        Ok(())
    }
}

/// Borrowed view of a subset of layers, in layout order.
#[derive(Debug, Clone)]
pub struct LayerView<'a> {
    values: &'a [f64],
    ranges: Vec<Range<usize>>,
}

impl<'a> LayerView<'a> {
    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.iter().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.ranges
            .iter()
            .flat_map(move |r| self.values[r.clone()].iter().copied())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.iter().collect()
    }
}

/// Splits `params` into its fixed and variable views.
pub fn split<'a>(
    params: &'a FlatParams,
    partition: &LayerPartition,
) -> Result<(LayerView<'a>, LayerView<'a>), ParamError> {
    partition.validate(params.layout())?;
    let mut fixed = Vec::new();
    let mut variable = Vec::new();
    for layer in params.layout().layers() {
        if partition.is_fixed(&layer.name) {
            fixed.push(layer.range());
        } else {
            variable.push(layer.range());
        }
    }
    Ok((
        LayerView {
            values: params.values(),
            ranges: fixed,
        },
        LayerView {
            values: params.values(),
            ranges: variable,
        },
    ))
}

/// Inverse of [`split`]: writes the two views' values back into a vector
/// with `layout`.
pub fn recombine(
    layout: &Layout,
    fixed: &LayerView<'_>,
    variable: &LayerView<'_>,
    sample_count: u64,
) -> Result<FlatParams, ParamError> {
    let mut out = FlatParams::zeros(layout.clone());
    let mut covered = vec![false; layout.total_len()];
    for view in [fixed, variable] {
        for r in &view.ranges {
            if r.end > covered.len() {
                return Err(ParamError::LayoutMismatch);
            }
            out.values[r.clone()].copy_from_slice(&view.values[r.clone()]);
            covered[r.clone()].iter_mut().for_each(|c| *c = true);
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(ParamError::PartitionMismatch("views do not cover layout".into()));
    }
    out.sample_count = sample_count;
    Ok(out)
}
