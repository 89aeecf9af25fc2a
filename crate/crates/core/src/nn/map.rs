use crate::error::{ensure, Result};

/// Row-major `T x K` activation map, indexed by time then channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    len: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(len: usize, channels: usize) -> Self {
        Self {
            len,
            channels,
            data: vec![0.0; len * channels],
        }
    }

    pub fn from_vec(len: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(len >= 1 && channels >= 1, Shape, "feature map must be at least 1x1, got {len}x{channels}");
        ensure!(
            data.len() == len * channels,
            Shape,
            "expected {} values for a {len}x{channels} map, got {}",
            len * channels,
            data.len()
        );
        Ok(Self { len, channels, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), Shape, "feature map needs at least one row");
        let channels = rows[0].len();
        ensure!(rows.iter().all(|r| r.len() == channels), Shape, "ragged rows");
        Self::from_vec(rows.len(), channels, rows.concat())
    }

    /// Single-channel map from a plain sequence.
    pub fn from_column(values: &[f64]) -> Result<Self> {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, t: usize, k: usize) -> f64 {
        self.data[t * self.channels + k]
    }

    #[inline]
    pub fn set(&mut self, t: usize, k: usize, value: f64) {
        self.data[t * self.channels + k] = value;
    }

    #[inline]
    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    #[inline]
    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.len).map(|t| self.get(t, k)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    /// Rows `start..end`, padding with zero rows past the end of the map.
    pub fn window(&self, start: usize, end: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(end - start, self.channels);
        for t in start..end.min(self.len) {
            out.row_mut(t - start).copy_from_slice(self.row(t));
        }
        out
    }

    /// Gather rows by index.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureMap {
        let mut data = Vec::with_capacity(indices.len() * self.channels);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureMap {
            len: indices.len(),
            channels: self.channels,
            data,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_empty_and_ragged() {
        assert!(FeatureMap::from_vec(0, 3, vec![]).is_err());
        assert!(FeatureMap::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(FeatureMap::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn window_pads_with_zeros() {
        let m = FeatureMap::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let w = m.window(1, 4);
        assert_eq!(w.as_slice(), &[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
    }
}
