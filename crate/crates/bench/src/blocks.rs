//! Dense blocks, the block-cyclic distribution and the four block kernels.
//!
//! A block is a `b × b` row-major `Vec<f64>`.

use bytes::Bytes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ptg_runtime::Rank;

/// `p × q` grid of ranks, `p` the largest divisor of `n_ranks` not above its
/// square root.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankGrid {
    pub p: usize,
    pub q: usize,
}

impl RankGrid {
    pub fn new(n_ranks: usize) -> RankGrid {
        assert!(n_ranks >= 1);
        let p = (1..=n_ranks)
            .take_while(|d| d * d <= n_ranks)
            .filter(|d| n_ranks.is_multiple_of(*d))
            .last()
            .unwrap_or(1);
        RankGrid { p, q: n_ranks / p }
    }

    pub fn n_ranks(&self) -> usize {
        self.p * self.q
    }

    /// Owner of block `(i, j)`.
    pub fn owner(&self, i: usize, j: usize) -> Rank {
        (i % self.p) * self.q + (j % self.q)
    }
}

/// Dense `n × n` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(n: usize) -> Dense {
        Dense {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Dense {
        let mut m = Dense::zeros(n);
        (0..n).for_each(|i| m.data[i * n + i] = 1.0);
        m
    }

    /// Entries uniform in `[-1, 1)`.
    pub fn random(n: usize, seed: u64) -> Dense {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dense {
            n,
            data: (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    /// `M·Mᵀ + n·I` for a random `M`: symmetric positive definite.
    pub fn random_spd(n: usize, seed: u64) -> Dense {
        let m = Dense::random(n, seed);
        let mut a = m.matmul_transposed(&m);
        (0..n).for_each(|i| a.data[i * n + i] += n as f64);
        a
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// `self · other`, plain triple loop.
    pub fn matmul(&self, other: &Dense) -> Dense {
        let n = self.n;
        let mut c = Dense::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                for j in 0..n {
                    c.data[i * n + j] += a * other.data[k * n + j];
                }
            }
        }
        c
    }

    /// `self · otherᵀ`.
    pub fn matmul_transposed(&self, other: &Dense) -> Dense {
        let n = self.n;
        let mut c = Dense::zeros(n);
        for i in 0..n {
            for j in 0..n {
                c.data[i * n + j] = (0..n)
                    .map(|k| self.data[i * n + k] * other.data[j * n + k])
                    .sum();
            }
        }
        c
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Dense) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Copy of block `(i, j)` of size `b`.
    pub fn block(&self, i: usize, j: usize, b: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(b * b);
        for r in 0..b {
            let row = (i * b + r) * self.n + j * b;
            out.extend_from_slice(&self.data[row..row + b]);
        }
        out
    }

    pub fn set_block(&mut self, i: usize, j: usize, b: usize, block: &[f64]) {
        for r in 0..b {
            let row = (i * b + r) * self.n + j * b;
            self.data[row..row + b].copy_from_slice(&block[r * b..(r + 1) * b]);
        }
    }
}

pub fn to_bytes(block: &[f64]) -> Bytes {
    let mut out = Vec::with_capacity(block.len() * 8);
    block
        .iter()
        .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    Bytes::from(out)
}

pub fn from_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

/// `c += a · b`.
pub fn gemm_acc(c: &mut [f64], a: &[f64], b: &[f64], n: usize) {
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            let row = &b[k * n..(k + 1) * n];
            for (cij, bkj) in c[i * n..(i + 1) * n].iter_mut().zip(row) {
                *cij += aik * bkj;
            }
        }
    }
}

/// In-place lower Cholesky factor of the lower triangle of `a`; the strict
/// upper triangle is zeroed. Fails on a non-positive pivot, with its index.
pub fn potrf(a: &mut [f64], n: usize) -> Result<(), usize> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d.is_nan() || d <= 0.0 {
            return Err(j);
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
        for k in j + 1..n {
            a[j * n + k] = 0.0;
        }
    }
    Ok(())
}

/// `a ← a · l⁻ᵀ` for lower triangular `l`.
pub fn trsm(a: &mut [f64], l: &[f64], n: usize) {
    for r in 0..n {
        for c in 0..n {
            let mut s = a[r * n + c];
            for m in 0..c {
                s -= a[r * n + m] * l[c * n + m];
            }
            a[r * n + c] = s / l[c * n + c];
        }
    }
}

/// `c ← c − a · bᵀ`.
pub fn gemm_nt_sub(c: &mut [f64], a: &[f64], b: &[f64], n: usize) {
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * b[j * n + k];
            }
            c[i * n + j] -= s;
        }
    }
}

/// Lower triangle of `c ← c − a · aᵀ`.
pub fn syrk_sub(c: &mut [f64], a: &[f64], n: usize) {
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in 0..n {
                s += a[i * n + k] * a[j * n + k];
            }
            c[i * n + j] -= s;
        }
    }
}
