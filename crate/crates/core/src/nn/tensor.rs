use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`. Shapes are `(batch, channels, length)` for
/// sequence activations, `(batch, features)` for dense ones, and whatever a
/// parameter needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::new", n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
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

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("Tensor::reshape", self.data.len(), n));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks `(batch, length)` rows from each channel source into
    /// `(batch, channels, length)`.
    pub fn stack_channels(channels: &[&[Vec<f64>]]) -> Result<Self> {
        let c = channels.len();
        let b = channels.first().map_or(0, |ch| ch.len());
        let l = channels.first().and_then(|ch| ch.first()).map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(b * c * l);
        for bi in 0..b {
            for ch in channels {
                let row = ch.get(bi).ok_or_else(|| Error::dim("stack_channels", b, ch.len()))?;
                if row.len() != l {
                    return Err(Error::dim("stack_channels", l, row.len()));
                }
                data.extend_from_slice(row);
            }
        }
        Tensor::new(vec![b, c, l], data)
    }

    /// Row `i` of a `(batch, ...)` tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let per = self.data.len() / self.shape[0].max(1);
        &self.data[i * per..(i + 1) * per]
    }
}
