//! Dense row-major `f64` tensors of order at most four.

use std::fmt;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > MAX_ORDER {
        return Err(Error::shape(format!(
            "tensor order must be in 1..={MAX_ORDER}, got shape {shape:?}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::shape(format!("zero extent in shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n = check_shape(&shape)?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    /// Panics on an invalid shape; use [`Tensor::new`] for fallible construction.
    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    /// Collapse all axes after the first: `[B, ...] -> [B, rest]`.
    pub fn flatten_batch(self) -> Self {
        let b = self.shape[0];
        let rest = self.data.len() / b;
        Self {
            shape: vec![b, rest],
            data: self.data,
        }
    }

    /// Rows `start..end` of the leading (batch) axis.
    pub fn batch_slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.shape[0] {
            return Err(Error::shape(format!(
                "batch range {start}..{end} out of bounds for {:?}",
                self.shape
            )));
        }
        let row = self.data.len() / self.shape[0];
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * row..end * row].to_vec(),
        })
    }

    /// Gather rows of the leading axis in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let b = self.shape[0];
        let row = self.data.len() / b;
        let mut data = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= b {
                return Err(Error::shape(format!("row {r} out of bounds for {b} rows")));
            }
            data.extend_from_slice(&self.data[r * row..(r + 1) * row]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, data)
    }

    /// Concatenate along axis 1 (channels or features), in the given order.
    pub fn concat_axis1(parts: &[Tensor]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let b = first.shape[0];
        let tail = &first.shape[2..];
        for p in parts {
            if p.shape.len() != first.shape.len() || p.shape[0] != b || &p.shape[2..] != tail {
                return Err(Error::shape(format!(
                    "cannot concatenate {:?} with {:?} along axis 1",
                    first.shape, p.shape
                )));
            }
        }
        let inner: usize = tail.iter().product();
        let total_c: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(b * total_c * inner);
        for n in 0..b {
            for p in parts {
                let chunk = p.shape[1] * inner;
                data.extend_from_slice(&p.data[n * chunk..(n + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[1] = total_c;
        Tensor::new(shape, data)
    }

    /// Split axis 1 into `parts` equal pieces (inverse of [`Tensor::concat_axis1`]).
    pub fn split_axis1(&self, parts: usize) -> Result<Vec<Tensor>> {
        let c = self.shape.get(1).copied().unwrap_or(0);
        if parts == 0 || c % parts != 0 {
            return Err(Error::shape(format!(
                "axis 1 of {:?} does not split into {parts} parts",
                self.shape
            )));
        }
        let piece = c / parts;
        (0..parts)
            .map(|k| self.narrow_axis1(k * piece, piece))
            .collect()
    }

    /// `len` consecutive entries of axis 1 starting at `start`.
    pub fn narrow_axis1(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.shape.len() < 2 || len == 0 || start + len > self.shape[1] {
            return Err(Error::shape(format!(
                "axis-1 range {start}..{} out of bounds for {:?}",
                start + len,
                self.shape
            )));
        }
        let b = self.shape[0];
        let c = self.shape[1];
        let inner: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(b * len * inner);
        for n in 0..b {
            let base = n * c * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Tensor::new(shape, data)
    }

    /// `len` consecutive entries of the leading axis starting at `start`.
    pub fn narrow_axis0(&self, start: usize, len: usize) -> Result<Tensor> {
        if len == 0 || start + len > self.shape[0] {
            return Err(Error::shape(format!(
                "axis-0 range {start}..{} out of bounds for {:?}",
                start + len,
                self.shape
            )));
        }
        self.batch_slice(start, start + len)
    }

    /// Concatenate along the leading axis.
    pub fn concat_axis0(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        if parts.iter().any(|p| p.shape[1..] != first.shape[1..]) {
            return Err(Error::shape(format!(
                "cannot concatenate tensors with trailing shapes differing from {:?}",
                first.shape
            )));
        }
        let mut shape = first.shape.clone();
        shape[0] = parts.iter().map(|p| p.shape[0]).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Tensor::new(shape, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, k: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * k).collect(),
        }
    }

    fn same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Sum of tensors in the given order; the first term is copied, not added to zero.
    pub fn sum_ordered<'a>(terms: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
        let mut it = terms.into_iter();
        let mut acc = it
            .next()
            .ok_or_else(|| Error::shape("sum of zero tensors"))?
            .clone();
        for t in it {
            acc.add_assign(t)?;
        }
        Ok(acc)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `|self - other|_inf / |other|_inf`, the tensor-relative divergence used
    /// throughout the equivalence checks.
    pub fn rel_divergence(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "divergence of mismatched shapes");
        let diff = self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if diff == 0.0 {
            return 0.0;
        }
        diff / other.max_abs().max(f64::MIN_POSITIVE)
    }

    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Pack tensors into one flat vector tensor, in order.
pub fn pack(tensors: &[Tensor]) -> Tensor {
    let data: Vec<f64> = tensors.iter().flat_map(|t| t.data.iter().copied()).collect();
    let n = data.len();
    Tensor::new(vec![n], data).expect("packing empty tensor list")
}

/// Inverse of [`pack`] given the template shapes.
pub fn unpack(flat: &Tensor, like: &[Tensor]) -> Result<Vec<Tensor>> {
    let total: usize = like.iter().map(Tensor::len).sum();
    if flat.len() != total {
        return Err(Error::shape(format!(
            "packed tensor has {} elements, template needs {total}",
            flat.len()
        )));
    }
    let mut offset = 0;
    like.iter()
        .map(|t| {
            let n = t.len();
            let part = Tensor::new(t.shape.clone(), flat.data[offset..offset + n].to_vec());
            offset += n;
            part
        })
        .collect()
}
