//! Dense multi-channel pixel fields.
//!
//! All fields are stored channel-major then row-major: the value for channel
//! `c`, row `i`, column `j` lives at `(c * height + i) * width + j`.

use crate::error::{Error, Result};

/// Shape of a `channels × height × width` field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidShape(format!(
                "dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        Ok(Shape {
            channels,
            height,
            width,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, i: usize, j: usize) -> usize {
        (c * self.height + i) * self.width + j
    }

    pub fn with_channels(&self, channels: usize) -> Shape {
        Shape { channels, ..*self }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A real scalar field with `C` channels over an `N1 × N2` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    shape: Shape,
    data: Vec<f64>,
}

impl Field3 {
    pub fn zeros(shape: Shape) -> Self {
        Field3 {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn filled(shape: Shape, value: f64) -> Self {
        Field3 {
            shape,
            data: vec![value; shape.len()],
        }
    }

    /// Wraps `data` after checking the length and that every entry is finite.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::InvalidShape(format!(
                "expected {} values for shape {shape}, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {pos} of field input")));
        }
        Ok(Field3 { shape, data })
    }

    /// Internal constructor that skips the finiteness scan; non-finite values
    /// produced mid-network are caught by the loss check instead.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        Field3 { shape, data }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for i in 0..shape.height {
                for j in 0..shape.width {
                    data.push(f(c, i, j));
                }
            }
        }
        Field3 { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape.width
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[self.shape.index(c, i, j)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: f64) {
        let k = self.shape.index(c, i, j);
        self.data[k] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Field3) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field3 {
        Field3 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Field3, f: impl Fn(f64, f64) -> f64) -> Field3 {
        debug_assert_eq!(self.shape, other.shape);
        Field3 {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Field3) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    pub fn max_abs_diff(&self, other: &Field3) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    pub(crate) fn check_shape(&self, expected: Shape, what: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                what: what.to_string(),
                expected: expected.to_string(),
                got: self.shape.to_string(),
            });
        }
        Ok(())
    }
}

/// A field of 2-vectors per channel per pixel. Component 1 runs along rows
/// (index `i`), component 2 along columns (index `j`).
#[derive(Debug, Clone, PartialEq)]
pub struct DualField {
    shape: Shape,
    rows: Vec<f64>,
    cols: Vec<f64>,
}

impl DualField {
    pub fn zeros(shape: Shape) -> Self {
        DualField {
            shape,
            rows: vec![0.0; shape.len()],
            cols: vec![0.0; shape.len()],
        }
    }

    pub fn from_components(shape: Shape, rows: Vec<f64>, cols: Vec<f64>) -> Result<Self> {
        if rows.len() != shape.len() || cols.len() != shape.len() {
            return Err(Error::InvalidShape(format!(
                "dual components must each hold {} values for shape {shape}",
                shape.len()
            )));
        }
        if rows.iter().chain(&cols).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dual field input".into()));
        }
        Ok(DualField { shape, rows, cols })
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    /// Component along rows (vertical differences).
    #[inline]
    pub fn rows(&self) -> &[f64] {
        &self.rows
    }

    /// Component along columns (horizontal differences).
    #[inline]
    pub fn cols(&self) -> &[f64] {
        &self.cols
    }

    #[inline]
    pub fn rows_mut(&mut self) -> &mut [f64] {
        &mut self.rows
    }

    #[inline]
    pub fn cols_mut(&mut self) -> &mut [f64] {
        &mut self.cols
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize, j: usize) -> (f64, f64) {
        let k = self.shape.index(c, i, j);
        (self.rows[k], self.cols[k])
    }

    #[inline]
    pub fn set(&mut self, c: usize, i: usize, j: usize, v: (f64, f64)) {
        let k = self.shape.index(c, i, j);
        self.rows[k] = v.0;
        self.cols[k] = v.1;
    }

    pub fn dot(&self, other: &DualField) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        let r: f64 = self.rows.iter().zip(&other.rows).map(|(a, b)| a * b).sum();
        let c: f64 = self.cols.iter().zip(&other.cols).map(|(a, b)| a * b).sum();
        r + c
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &DualField) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.rows.iter_mut().zip(&other.rows) {
            *a += alpha * b;
        }
        for (a, b) in self.cols.iter_mut().zip(&other.cols) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in self.rows.iter_mut().chain(self.cols.iter_mut()) {
            *v *= alpha;
        }
    }

    /// Largest per-pixel Euclidean norm.
    pub fn max_norm(&self) -> f64 {
        self.rows
            .iter()
            .zip(&self.cols)
            .map(|(a, b)| a.hypot(*b))
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &DualField) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.rows
            .iter()
            .zip(&other.rows)
            .chain(self.cols.iter().zip(&other.cols))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().chain(&self.cols).all(|v| v.is_finite())
    }
}

/// Integer class map over an `N1 × N2` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidShape("label map must be non-empty".into()));
        }
        if labels.len() != height * width {
            return Err(Error::InvalidShape(format!(
                "expected {} labels for {height}x{width}, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        LabelMap {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.labels[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: u8) {
        self.labels[i * self.width + j] = v;
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Per-pixel argmax over channels; ties go to the lowest class index.
    pub fn argmax(field: &Field3) -> LabelMap {
        let s = field.shape();
        let n = s.pixels();
        let data = field.as_slice();
        let labels = (0..n)
            .map(|p| {
                let mut best = 0usize;
                let mut best_v = data[p];
                for c in 1..s.channels {
                    let v = data[c * n + p];
                    if v > best_v {
                        best = c;
                        best_v = v;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap {
            height: s.height,
            width: s.width,
            labels,
        }
    }

    /// The raw class indices as a single-channel real field.
    pub fn to_field(&self) -> Field3 {
        Field3 {
            shape: Shape {
                channels: 1,
                height: self.height,
                width: self.width,
            },
            data: self.labels.iter().map(|&l| l as f64).collect(),
        }
    }

    /// Binary indicator per class, `classes` channels.
    pub fn one_hot(&self, classes: usize) -> Field3 {
        let shape = Shape {
            channels: classes,
            height: self.height,
            width: self.width,
        };
        let mut f = Field3::zeros(shape);
        let n = shape.pixels();
        for (p, &l) in self.labels.iter().enumerate() {
            if (l as usize) < classes {
                f.data[l as usize * n + p] = 1.0;
            }
        }
        f
    }
}
