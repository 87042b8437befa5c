//! Reference games and a permutation-enumeration Shapley oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sidexplain::shapley::{exact_shapley, TableGame};

/// Average marginal contribution over all `d!` orderings.
pub fn permutation_shapley(d: usize, v: &dyn Fn(u64) -> f64) -> Vec<f64> {
    let mut phi = vec![0.0; d];
    let mut perm: Vec<usize> = (0..d).collect();
    let mut count = 0usize;
    let mut visit = |perm: &[usize]| {
        let mut s = 0u64;
        let mut prev = v(0);
        for &p in perm {
            s |= 1 << p;
            let cur = v(s);
            phi[p] += cur - prev;
            prev = cur;
        }
        count += 1;
    };
    // Heap's algorithm
    let mut c = vec![0usize; d];
    visit(&perm);
    let mut i = 0;
    while i < d {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    phi.iter().map(|x| x / count as f64).collect()
}

pub fn table(d: usize, values: &[f64]) -> TableGame {
    TableGame::new(d, values.iter().map(|&v| vec![v]).collect()).unwrap()
}

pub fn random_values(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    (0..1u64 << d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn shapley_of(d: usize, values: &[f64]) -> Vec<f64> {
    exact_shapley(&table(d, values)).unwrap().class(0)
}

/// Players 0 and 1 are interchangeable and player `d−1` is a null player.
pub fn structured_values(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    let u = random_values(rng, d);
    let swap = |s: u64| (s & !3) | ((s & 1) << 1) | ((s >> 1) & 1);
    let last = 1u64 << (d - 1);
    (0..1u64 << d)
        .map(|s| {
            let t = s & !last;
            0.5 * (u[t as usize] + u[swap(t) as usize])
        })
        .collect()
}

/// Largest violations of efficiency, symmetry, dummy and linearity on one game pair.
pub fn axiom_errors(seed: u64, d: usize) -> [f64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = structured_values(&mut rng, d);
    let w = random_values(&mut rng, d);
    let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
    let phi_v = shapley_of(d, &v);
    let phi_w = shapley_of(d, &w);
    let mix: Vec<f64> = v.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
    let phi_mix = shapley_of(d, &mix);
    let full = (1usize << d) - 1;
    let efficiency = (phi_v.iter().sum::<f64>() - (v[full] - v[0])).abs();
    let symmetry = (phi_v[0] - phi_v[1]).abs();
    let dummy = phi_v[d - 1].abs();
    let linearity = (0..d).map(|i| (phi_mix[i] - (a * phi_v[i] + b * phi_w[i])).abs()).fold(0.0, f64::max);
    [efficiency, symmetry, dummy, linearity]
}

pub fn majority(d: usize) -> impl Fn(u64) -> Vec<f64> {
    move |s: u64| vec![if 2 * s.count_ones() as usize > d { 1.0 } else { 0.0 }]
}

pub fn additive(w: Vec<f64>) -> impl Fn(u64) -> Vec<f64> {
    move |s: u64| vec![(0..w.len()).filter(|i| s >> i & 1 == 1).map(|i| w[i]).sum()]
}

/// Players 0 and 1 hold left gloves, player 2 a right glove.
pub fn glove(s: u64) -> Vec<f64> {
    let left = (s & 0b011).count_ones();
    let right = (s & 0b100).count_ones();
    vec![left.min(right) as f64]
}
