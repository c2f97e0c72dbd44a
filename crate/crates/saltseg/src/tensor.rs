use crate::error::{Result, SaltError};

/// Dense row-major tensor of f64 values.
///
/// Feature maps use the canonical 4-axis order (batch, channels, height,
/// width); biases are rank-1 and scalars rank-0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(SaltError::Shape(format!("zero extent in dims {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(SaltError::Shape(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                dims,
                n
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat offset of (n, c) plane start for a rank-4 tensor.
    pub fn plane_offset(&self, n: usize, c: usize) -> usize {
        debug_assert_eq!(self.rank(), 4);
        let (ch, h, w) = (self.dims[1], self.dims[2], self.dims[3]);
        (n * ch + c) * h * w
    }

    /// Borrow the (n, c) spatial plane of a rank-4 tensor.
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let (h, w) = (self.dims[2], self.dims[3]);
        let off = self.plane_offset(n, c);
        &self.data[off..off + h * w]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let (h, w) = (self.dims[2], self.dims[3]);
        let off = self.plane_offset(n, c);
        &mut self.data[off..off + h * w]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_dims(&self, other: &Tensor) -> bool {
        self.dims == other.dims
    }
}

/// Integer index tensor recording, for each pooled output element, the
/// row-major offset (0..=3) of the window maximum inside its 2x2 window.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    pub dims: Vec<usize>,
    pub offsets: Vec<u8>,
}
