use ndarray::{Array2, ArrayView2, ArrayViewMut2};

/// Streaming per-feature z-score statistics. Accumulation stops once frozen;
/// an empty normalizer acts as the identity. Reported std has a 1e-8 floor.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    count: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    frozen: bool,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Normalizer { count: 0.0, sum: vec![0.0; dim], sum_sq: vec![0.0; dim], frozen: false }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn accumulate_rows(&mut self, rows: ArrayView2<f64>) {
        if self.frozen {
            return;
        }
        assert_eq!(rows.ncols(), self.dim());
        for row in rows.rows() {
            self.count += 1.0;
            for (k, &v) in row.iter().enumerate() {
                self.sum[k] += v;
                self.sum_sq[k] += v * v;
            }
        }
    }

    pub fn mean(&self, k: usize) -> f64 {
        if self.count == 0.0 {
            0.0
        } else {
            self.sum[k] / self.count
        }
    }

    pub fn std(&self, k: usize) -> f64 {
        if self.count == 0.0 {
            return 1.0;
        }
        let mean = self.mean(k);
        let var = (self.sum_sq[k] / self.count - mean * mean).max(0.0);
        var.sqrt().max(STD_FLOOR)
    }

    pub fn normalize_value(&self, k: usize, x: f64) -> f64 {
        if self.count == 0.0 {
            return x;
        }
        (x - self.mean(k)) / self.std(k)
    }

    pub fn unnormalize_value(&self, k: usize, z: f64) -> f64 {
        if self.count == 0.0 {
            return z;
        }
        z * self.std(k) + self.mean(k)
    }

    pub fn normalize_rows_inplace(&self, mut rows: ArrayViewMut2<f64>) {
        if self.count == 0.0 {
            eprintln!("warning: normalizer used with zero observations; applying identity");
            return;
        }
        let stats: Vec<(f64, f64)> = (0..self.dim()).map(|k| (self.mean(k), self.std(k))).collect();
        for mut row in rows.rows_mut() {
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - stats[k].0) / stats[k].1;
            }
        }
    }

    pub fn normalize_rows(&self, rows: ArrayView2<f64>) -> Array2<f64> {
        let mut out = rows.to_owned();
        if self.count > 0.0 {
            self.normalize_rows_inplace(out.view_mut());
        }
        out
    }

    /// Serialized form: `[count, sum…, sum_sq…, frozen]`.
    pub fn to_raw(&self) -> Vec<f64> {
        let mut out = vec![self.count];
        out.extend(&self.sum);
        out.extend(&self.sum_sq);
        out.push(if self.frozen { 1.0 } else { 0.0 });
        out
    }

    pub fn from_raw(dim: usize, raw: &[f64]) -> crate::Result<Self> {
        if raw.len() != 2 * dim + 2 {
            return Err(crate::Error::Dataset(format!(
                "normalizer payload length {} does not match dim {dim}",
                raw.len()
            )));
        }
        Ok(Normalizer {
            count: raw[0],
            sum: raw[1..1 + dim].to_vec(),
            sum_sq: raw[1 + dim..1 + 2 * dim].to_vec(),
            frozen: raw[2 * dim + 1] != 0.0,
        })
    }
}
