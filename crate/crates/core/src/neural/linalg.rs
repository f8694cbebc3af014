//! Dense row-major matrices and the few BLAS-1/2 kernels the model needs.

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.data[r * cols + c] = f(r, c);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// out += self · x
    pub fn gemv_add(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.cols, "gemv operand length");
        assert_eq!(out.len(), self.rows, "gemv result length");
        for (r, o) in out.iter_mut().enumerate() {
            let row = self.row(r);
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *o += acc;
        }
    }

    /// out += selfᵀ · y
    pub fn gemv_t_add(&self, y: &[f64], out: &mut [f64]) {
        assert_eq!(y.len(), self.rows, "gemvᵀ operand length");
        assert_eq!(out.len(), self.cols, "gemvᵀ result length");
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let row = self.row(r);
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * yr;
            }
        }
    }

    /// self += y ⊗ x (rank-1 update)
    pub fn ger_add(&mut self, y: &[f64], x: &[f64]) {
        assert_eq!(y.len(), self.rows, "ger row operand");
        assert_eq!(x.len(), self.cols, "ger col operand");
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &xv) in row.iter_mut().zip(x) {
                *w += yr * xv;
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_match_hand_arithmetic() {
        let m = Mat::from_fn(2, 3, |r, c| (r * 3 + c) as f64); // [[0,1,2],[3,4,5]]
        let mut y = vec![1.0, -1.0];
        m.gemv_add(&[1.0, 0.0, 2.0], &mut y);
        assert_eq!(y, vec![1.0 + 4.0, -1.0 + 13.0]);

        let mut x = vec![0.0; 3];
        m.gemv_t_add(&[1.0, 2.0], &mut x);
        assert_eq!(x, vec![6.0, 9.0, 12.0]);

        let mut g = Mat::zeros(2, 3);
        g.ger_add(&[2.0, 0.0], &[1.0, 2.0, 3.0]);
        assert_eq!(g.data, vec![2.0, 4.0, 6.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_is_a_distribution_and_shift_invariant() {
        let a = softmax(&[1.0, 2.0, 3.0]);
        let b = softmax(&[1001.0, 1002.0, 1003.0]);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
            assert!(*x > 0.0);
        }
        let u = softmax(&[0.0; 4]);
        assert_eq!(u, vec![0.25; 4]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-745.0) > 0.0);
        assert!(sigmoid(745.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
