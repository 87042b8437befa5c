//! The Shapley kernel distribution over coalitions and its samplers.

use nalgebra::{DMatrix, SymmetricEigen};
use num_traits::{FromPrimitive, Num};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::MaskVector;

/// `1 + 1/2 + … + 1/n`.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).map(|k| 1.0 / k as f64).sum()
}

pub fn binomial<N: Num + FromPrimitive + Clone>(n: usize, k: usize) -> N {
    if k > n {
        return N::zero();
    }
    let k = k.min(n - k);
    let mut c = N::one();
    for i in 0..k {
        c = c * N::from_usize(n - i).expect("representable") / N::from_usize(i + 1).expect("representable");
    }
    c
}

/// Per-subset probability of a coalition of size `k`, for `k = 0..=d`, in any
/// numeric field. Entries for `k = 0` and `k = d` are zero.
pub fn kernel_probabilities<N: Num + FromPrimitive + Clone>(d: usize) -> Result<Vec<N>> {
    if d < 2 {
        return Err(Error::contract(format!("the Shapley kernel needs at least 2 players, got {d}")));
    }
    let n = |v: usize| N::from_usize(v).expect("representable");
    let weight = |k: usize| n(d - 1) / (binomial::<N>(d, k) * n(k) * n(d - k));
    let mut total = N::zero();
    for k in 1..d {
        total = total + binomial::<N>(d, k) * weight(k);
    }
    let mut p = vec![N::zero(); d + 1];
    for (k, slot) in p.iter_mut().enumerate().take(d).skip(1) {
        *slot = weight(k) / total.clone();
    }
    Ok(p)
}

#[derive(Clone, Debug, Serialize)]
pub struct ShapleyKernelDist {
    pub d: usize,
    /// Probability of each individual subset of size `k`; zero at `k = 0` and `k = d`.
    pub subset_prob: Vec<f64>,
    /// Probability mass of size `k`, `C(d,k)·subset_prob[k]`.
    pub size_prob: Vec<f64>,
    /// `Q = Σ_k (d−1)/(k(d−k))`.
    pub normalizer: f64,
}

pub fn shapley_kernel(d: usize) -> Result<ShapleyKernelDist> {
    let subset_prob = kernel_probabilities::<f64>(d)?;
    let size_prob = (0..=d).map(|k| binomial::<f64>(d, k) * subset_prob[k]).collect();
    let normalizer = (1..d).map(|k| (d - 1) as f64 / (k * (d - k)) as f64).sum();
    Ok(ShapleyKernelDist { d, subset_prob, size_prob, normalizer })
}

/// A uniformly random subset of `{0..d}` with exactly `k` members.
fn subset_of_size(rng: &mut impl Rng, d: usize, k: usize) -> MaskVector {
    let mut idx: Vec<usize> = (0..d).collect();
    let (chosen, _) = idx.partial_shuffle(rng, k);
    let mut m = MaskVector::none(d);
    for &i in chosen.iter() {
        m.set(i, true);
    }
    m
}

impl ShapleyKernelDist {
    /// Draw `n` coalitions. When `paired`, every draw is followed by its complement.
    pub fn sample_with(&self, rng: &mut impl Rng, n: usize, paired: bool) -> Result<Vec<MaskVector>> {
        if paired && n % 2 != 0 {
            return Err(Error::contract(format!("paired sampling needs an even count, got {n}")));
        }
        let sizes = WeightedIndex::new(&self.size_prob).map_err(|e| Error::Invariant(e.to_string()))?;
        let draws = if paired { n / 2 } else { n };
        let mut out = Vec::with_capacity(n);
        for _ in 0..draws {
            let k = sizes.sample(rng);
            let m = subset_of_size(rng, self.d, k);
            if paired {
                let c = m.complement();
                out.push(m);
                out.push(c);
            } else {
                out.push(m);
            }
        }
        Ok(out)
    }
}

pub fn sample_subsets(dist: &ShapleyKernelDist, n: usize, paired: bool, seed: u64) -> Result<Vec<MaskVector>> {
    dist.sample_with(&mut ChaCha8Rng::seed_from_u64(seed), n, paired)
}

/// Masks whose size is uniform on `0..=d`, then a uniform subset of that size.
pub fn sample_equicardinal(rng: &mut impl Rng, d: usize, n: usize) -> Vec<MaskVector> {
    (0..n)
        .map(|_| {
            let k = rng.random_range(0..=d);
            subset_of_size(rng, d, k)
        })
        .collect()
}

/// All bitmasks over `d` players ordered by size, then lexicographically by member list.
pub fn enumerate_subsets(d: usize) -> Vec<u64> {
    assert!(d < 64, "enumeration needs d < 64");
    let mut all: Vec<u64> = (0..1u64 << d).collect();
    let key = |s: &u64| {
        let members: Vec<u32> = (0..d as u32).filter(|i| s >> i & 1 == 1).collect();
        (s.count_ones(), members)
    };
    all.sort_by_cached_key(key);
    all
}

#[derive(Clone, Debug, Serialize)]
pub struct SecondMomentMatrix {
    pub d: usize,
    /// Row-major `d×d` matrix `E[s sᵀ]`.
    pub a: Vec<f64>,
    /// `A_ii = b + c`.
    pub diagonal: f64,
    /// `A_ij = c` for `i ≠ j`.
    pub off_diagonal: f64,
    /// `b − c` from the structured form.
    pub lambda_closed: f64,
    /// Smallest eigenvalue from a dense symmetric eigensolve.
    pub lambda_eig: f64,
    /// Largest deviation of `A` from the `(b−c)I + c11ᵀ` structure.
    pub structure_residual: f64,
}

pub const MAX_MOMENT_PLAYERS: usize = 16;

/// `E[s sᵀ]` under the Shapley kernel by exact enumeration of all proper subsets.
pub fn second_moment_matrix(d: usize) -> Result<SecondMomentMatrix> {
    if d > MAX_MOMENT_PLAYERS {
        return Err(Error::Budget(format!("second moment enumeration limited to d ≤ {MAX_MOMENT_PLAYERS}, got {d}")));
    }
    let dist = shapley_kernel(d)?;
    let mut a = vec![0.0; d * d];
    for s in enumerate_subsets(d) {
        let p = dist.subset_prob[s.count_ones() as usize];
        if p == 0.0 {
            continue;
        }
        for i in (0..d).filter(|i| s >> i & 1 == 1) {
            for j in (0..d).filter(|j| s >> j & 1 == 1) {
                a[i * d + j] += p;
            }
        }
    }
    let diagonal = (0..d).map(|i| a[i * d + i]).sum::<f64>() / d as f64;
    let off_diagonal = (0..d)
        .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| a[i * d + j])
        .sum::<f64>()
        / (d * (d - 1)) as f64;
    let structure_residual = (0..d * d)
        .map(|ij| {
            let want = if ij / d == ij % d { diagonal } else { off_diagonal };
            (a[ij] - want).abs()
        })
        .fold(0.0, f64::max);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &a));
    let lambda_eig = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SecondMomentMatrix {
        d,
        a,
        diagonal,
        off_diagonal,
        lambda_closed: diagonal - off_diagonal,
        lambda_eig,
        structure_residual,
    })
}
