//! Dense grid of per-cell feature vectors standing in for image features.

/// An `h x w` grid of feature vectors, stored row-major. Cell `(y, x)` maps
/// to flattened sequence position `y * w + x` when fed to an encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    h: usize,
    w: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn zeros(h: usize, w: usize, dim: usize) -> Self {
        Self { h, w, dim, data: vec![0.0; h * w * dim] }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.h * self.w
    }

    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let p = (y * self.w + x) * self.dim;
        &self.data[p..p + self.dim]
    }

    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let p = (y * self.w + x) * self.dim;
        &mut self.data[p..p + self.dim]
    }

    /// Feature vectors in flattened sequence order.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}
