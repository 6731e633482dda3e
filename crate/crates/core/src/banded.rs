//! Banded LU with partial pivoting.

/// Square matrix with `lower` sub-diagonals and `upper` super-diagonals.
/// Storage leaves room for the fill-in created by row exchanges.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    lower: usize,
    upper: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, lower: usize, upper: usize) -> Self {
        let width = 2 * lower + upper + 1;
        Self { n, lower, upper, width, data: vec![0.0; n * width] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn clear(&mut self) {
        self.data.fill(0.0);
    }

    #[inline]
    fn slot(&self, r: usize, c: usize) -> usize {
        debug_assert!(c + self.lower >= r && c <= r + self.lower + self.upper);
        r * self.width + (c + self.lower - r)
    }

    /// Adds `v` to entry `(r, c)`, which must lie inside the band.
    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        assert!(c + self.lower >= r && c <= r + self.upper, "entry ({r}, {c}) outside the band");
        let s = self.slot(r, c);
        self.data[s] += v;
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        if c + self.lower < r || c > r + self.lower + self.upper {
            return 0.0;
        }
        self.data[self.slot(r, c)]
    }

    /// `y = A x`.
    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|r| {
                let lo = r.saturating_sub(self.lower);
                let hi = (r + self.upper).min(self.n - 1);
                (lo..=hi).map(|c| self.get(r, c) * x[c]).sum()
            })
            .collect()
    }

    /// Solves `A x = b` in place, destroying the matrix. Returns `None` on a
    /// zero pivot.
    pub fn solve(mut self, b: &mut [f64]) -> Option<()> {
        let n = self.n;
        let reach = self.lower + self.upper;
        for c in 0..n {
            let last = (c + self.lower).min(n - 1);
            let mut piv = c;
            let mut best = self.get(c, c).abs();
            for r in c + 1..=last {
                let v = self.get(r, c).abs();
                if v > best {
                    best = v;
                    piv = r;
                }
            }
            if best == 0.0 || !best.is_finite() {
                return None;
            }
            let right = (c + reach).min(n - 1);
            if piv != c {
                for k in c..=right {
                    let a = self.slot(c, k);
                    let p = self.slot(piv, k);
                    self.data.swap(a, p);
                }
                b.swap(c, piv);
            }
            let d = self.data[self.slot(c, c)];
            for r in c + 1..=last {
                let s = self.slot(r, c);
                let f = self.data[s] / d;
                if f == 0.0 {
                    continue;
                }
                self.data[s] = 0.0;
                for k in c + 1..=right {
                    let src = self.data[self.slot(c, k)];
                    if src != 0.0 {
                        let dst = self.slot(r, k);
                        self.data[dst] -= f * src;
                    }
                }
                b[r] -= f * b[c];
            }
        }
        for c in (0..n).rev() {
            let right = (c + reach).min(n - 1);
            let mut acc = b[c];
            for k in c + 1..=right {
                acc -= self.data[self.slot(c, k)] * b[k];
            }
            b[c] = acc / self.data[self.slot(c, c)];
        }
        Some(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::dense_solve;

    #[test]
    fn matches_dense_solve() {
        let n = 9;
        let (kl, ku) = (2, 1);
        let mut band = BandMatrix::zeros(n, kl, ku);
        let mut dense = vec![0.0; n * n];
        let mut seed = 17u64;
        for r in 0..n {
            for c in r.saturating_sub(kl)..=(r + ku).min(n - 1) {
                seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let v = ((seed >> 33) as f64 / (1u64 << 31) as f64) - 0.5;
                band.add(r, c, v);
                dense[r * n + c] = v;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| i as f64 - 3.0).collect();
        let mut b1 = rhs.clone();
        let mut b2 = rhs.clone();
        let check = band.mul(&vec![1.0; n]);
        assert!((check[0] - (0..=ku).map(|c| dense[c]).sum::<f64>()).abs() < 1e-15);
        band.solve(&mut b1).unwrap();
        let x = dense_solve(&mut dense, &mut b2).unwrap();
        for (a, b) in b1.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10, "{a} {b}");
        }
    }

    #[test]
    fn singular_detected() {
        let mut band = BandMatrix::zeros(3, 1, 1);
        band.add(0, 0, 1.0);
        band.add(1, 1, 0.0);
        band.add(2, 2, 1.0);
        assert!(band.solve(&mut [1.0, 1.0, 1.0]).is_none());
    }
}
