use crate::error::{Error, Result};

/// A square real image stored row-major in `f64`.
///
/// Pixel `(row, col)` sits at `data[row * side + col]`. Geometric operations
/// use the center `c = (side - 1) / 2` with `x = col - c` and `y = row - c`,
/// so angles are measured from the column axis towards the row axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn zeros(side: usize) -> Self {
        Self { side, data: vec![0.0; side * side] }
    }

    pub fn filled(side: usize, value: f64) -> Self {
        Self { side, data: vec![value; side * side] }
    }

    pub fn from_vec(side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixels", side * side),
                found: format!("{} pixels", data.len()),
            });
        }
        Ok(Self { side, data })
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(side * side);
        for r in 0..side {
            for c in 0..side {
                data.push(f(r, c));
            }
        }
        Self { side, data }
    }

    #[inline]
    pub fn side(&self) -> usize {
        self.side
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn center(&self) -> f64 {
        (self.side as f64 - 1.0) / 2.0
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.side + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.side + col] = value;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> Image {
        let mut out = self.clone();
        out.scale(factor);
        out
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Image, factor: f64) {
        debug_assert_eq!(self.side, other.side);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn sub(&self, other: &Image) -> Image {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Image { side: self.side, data }
    }

    /// Mirror about the horizontal axis through the center (`y -> -y`).
    pub fn mirrored(&self) -> Image {
        let n = self.side;
        Image::from_fn(n, |r, c| self.get(n - 1 - r, c))
    }

    /// Relative Euclidean distance `|self - other| / |other|`.
    pub fn relative_error(&self, reference: &Image) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let denom = reference.norm_sq();
        if denom == 0.0 {
            diff.sqrt()
        } else {
            (diff / denom).sqrt()
        }
    }

    /// Pearson correlation of the pixel values of two images.
    pub fn pearson(&self, other: &Image) -> f64 {
        let ma = self.mean();
        let mb = other.mean();
        let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
        for (a, b) in self.data.iter().zip(&other.data) {
            let (x, y) = (a - ma, b - mb);
            num += x * y;
            da += x * x;
            db += y * y;
        }
        if da == 0.0 || db == 0.0 {
            0.0
        } else {
            num / (da * db).sqrt()
        }
    }

    /// Pixels strictly outside the inscribed disk of the given radius.
    pub fn outside_disk(&self, radius: f64) -> impl Iterator<Item = f64> + '_ {
        let c = self.center();
        let n = self.side;
        let r2 = radius * radius;
        (0..n * n).filter_map(move |i| {
            let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
            (x * x + y * y > r2).then(|| self.data[i])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mirror_is_involution() {
        let img = Image::from_fn(5, |r, c| (r * 7 + c) as f64);
        assert_eq!(img.mirrored().mirrored(), img);
        assert_eq!(img.mirrored().get(0, 3), img.get(4, 3));
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Image::from_vec(3, vec![0.0; 8]).is_err());
    }

    #[test]
    fn outside_disk_counts_corners() {
        let img = Image::filled(4, 1.0);
        // center 1.5; corners at distance sqrt(4.5) > 2
        assert_eq!(img.outside_disk(2.0).count(), 4);
    }
}
