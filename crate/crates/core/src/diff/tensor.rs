use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} values for {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn same_shape(&self, other: &Mat) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

/// Named, shaped block of learned values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(format!("{} values for shape {shape:?}", values.len())));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, values: vec![0.0; n] }
    }

    /// View as a matrix: 1-d tensors become a single row; higher ranks fold
    /// leading dimensions into rows.
    pub fn to_mat(&self) -> Mat {
        let cols = *self.shape.last().unwrap_or(&1);
        let rows = self.values.len() / cols.max(1);
        Mat { rows, cols, data: self.values.clone() }
    }
}

/// Map from parameter path to tensor, ordered by path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor) -> Result<()> {
        let path = path.into();
        if path.is_empty() || path.chars().any(char::is_whitespace) {
            return Err(Error::invalid(format!("bad parameter path {path:?}")));
        }
        if self.tensors.contains_key(&path) {
            return Err(Error::invalid(format!("duplicate parameter path {path}")));
        }
        self.tensors.insert(path, t);
        Ok(())
    }

    /// Insert or overwrite.
    pub fn set(&mut self, path: impl Into<String>, t: Tensor) {
        self.tensors.insert(path.into(), t);
    }

    pub fn get(&self, path: &str) -> Result<&Tensor> {
        self.tensors.get(path).ok_or_else(|| Error::MissingParameter(path.to_string()))
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(path)
    }

    pub fn remove(&mut self, path: &str) -> Option<Tensor> {
        self.tensors.remove(path)
    }

    pub fn contains(&self, path: &str) -> bool {
        self.tensors.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(|t| t.values.len()).sum()
    }

    /// Copies every tensor under `prefix + path`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParameterSet) -> Result<()> {
        for (k, t) in other.iter() {
            self.insert(format!("{prefix}{k}"), t.clone())?;
        }
        Ok(())
    }

    /// Tensors whose path starts with `prefix`, with the prefix stripped.
    pub fn sub_set(&self, prefix: &str) -> ParameterSet {
        let tensors = self
            .tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect();
        ParameterSet { tensors }
    }

    /// Xavier-uniform weight matrix `fan_in x fan_out`.
    pub fn init_linear<R: Rng>(&mut self, rng: &mut R, path: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        self.insert(format!("{path}.w"), xavier(rng, fan_in, fan_out))?;
        self.insert(format!("{path}.b"), Tensor::zeros(vec![fan_out]))
    }

    /// Layer-norm gain (ones) and bias (zeros).
    pub fn init_norm(&mut self, path: &str, width: usize) -> Result<()> {
        self.insert(format!("{path}.g"), Tensor { shape: vec![width], values: vec![1.0; width] })?;
        self.insert(format!("{path}.b"), Tensor::zeros(vec![width]))
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let values = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape: vec![fan_in, fan_out], values }
}
