use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Dense 5D activation tensor laid out as `[batch][channel][z][y][x]`.
///
/// `dims` is `(nx, ny, nz)` so each channel plane uses the same x-fastest
/// order as [`crate::Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    batch: usize,
    channels: usize,
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(batch: usize, channels: usize, dims: [usize; 3]) -> Self {
        let len = batch * channels * dims.iter().product::<usize>();
        Self {
            batch,
            channels,
            dims,
            data: vec![T::zero(); len],
        }
    }

    pub fn from_vec(batch: usize, channels: usize, dims: [usize; 3], data: Vec<T>) -> Result<Self> {
        let len = batch * channels * dims.iter().product::<usize>();
        if data.len() != len {
            return Err(Error::Shape(format!(
                "tensor ({batch}, {channels}, {dims:?}) needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            batch,
            channels,
            dims,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spatial(&self) -> usize {
        self.dims.iter().product()
    }

    /// Elements in one sample (all channels).
    pub fn sample_len(&self) -> usize {
        self.channels * self.spatial()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let s = self.spatial();
        let start = (n * self.channels + c) * s;
        &self.data[start..start + s]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let s = self.spatial();
        let start = (n * self.channels + c) * s;
        &mut self.data[start..start + s]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.batch == other.batch && self.channels == other.channels && self.dims == other.dims
    }

    pub fn shape_string(&self) -> String {
        format!("({}, {}, {:?})", self.batch, self.channels, self.dims)
    }

    /// Concatenates two tensors along the channel axis (`a` first).
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if a.batch != b.batch || a.dims != b.dims {
            return Err(Error::Shape(format!(
                "cannot concatenate {} with {}",
                a.shape_string(),
                b.shape_string()
            )));
        }
        let channels = a.channels + b.channels;
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for n in 0..a.batch {
            data.extend_from_slice(a.sample(n));
            data.extend_from_slice(b.sample(n));
        }
        Ok(Self {
            batch: a.batch,
            channels,
            dims: a.dims,
            data,
        })
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `first` channels and the rest.
    pub fn split_channels(&self, first: usize) -> (Self, Self) {
        assert!(first <= self.channels);
        let s = self.spatial();
        let rest = self.channels - first;
        let mut a = Vec::with_capacity(self.batch * first * s);
        let mut b = Vec::with_capacity(self.batch * rest * s);
        for n in 0..self.batch {
            let sample = self.sample(n);
            a.extend_from_slice(&sample[..first * s]);
            b.extend_from_slice(&sample[first * s..]);
        }
        (
            Self {
                batch: self.batch,
                channels: first,
                dims: self.dims,
                data: a,
            },
            Self {
                batch: self.batch,
                channels: rest,
                dims: self.dims,
                data: b,
            },
        )
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            batch: self.batch,
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert!(self.same_shape(other), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            batch: self.batch,
            channels: self.channels,
            dims: self.dims,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}
