use ndarray::{Array1, ArrayView2};

/// Neumaier-compensated accumulator. Results are independent of summation
/// order up to a final rounding, which keeps centroids stable under row
/// permutations.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = CompensatedSum::default();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}

/// Column means over the selected rows (all rows when `rows` is `None`).
pub fn column_means(m: ArrayView2<'_, f64>, rows: Option<&[usize]>) -> Array1<f64> {
    let d = m.ncols();
    let mut acc = vec![CompensatedSum::default(); d];
    let mut count = 0usize;
    let mut push = |i: usize| {
        for (a, &x) in acc.iter_mut().zip(m.row(i).iter()) {
            a.add(x);
        }
        count += 1;
    };
    match rows {
        Some(rows) => rows.iter().for_each(|&i| push(i)),
        None => (0..m.nrows()).for_each(&mut push),
    }
    let n = count.max(1) as f64;
    acc.iter().map(|a| a.value() / n).collect()
}

/// SplitMix64 finalizer; the fixed hash behind every derived seed.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensation_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    #[test]
    fn means_over_subset() {
        let m = ndarray::array![[1.0, 2.0], [3.0, 4.0], [100.0, 100.0]];
        let mu = column_means(m.view(), Some(&[0, 1]));
        assert_eq!(mu.to_vec(), vec![2.0, 3.0]);
    }
}
