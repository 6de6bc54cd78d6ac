#![allow(dead_code)]

use secu_core::data_io::{gen_gaussian_mixture, Dataset};
use secu_core::numerics::{rng, Mat};

/// Central difference of `f` at every coordinate of `x`.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖b‖₂, floor)`.
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(floor)
}

pub fn random_unit_rows(k: usize, d: usize, seed: u64) -> Mat {
    let mut r = rng::seeded(seed);
    let rows: Vec<Vec<f64>> = (0..k).map(|_| rng::unit_vector(&mut r, d)).collect();
    Mat::from_rows(&rows).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Best matched count over every injective cluster→class map, by enumeration.
pub fn brute_force_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let kp = pred.iter().max().unwrap() + 1;
    let kt = truth.iter().max().unwrap() + 1;
    let n = kp.max(kt);
    let mut best = 0;
    for perm in permutations(n) {
        let hits = pred
            .iter()
            .zip(truth)
            .filter(|&(&p, &t)| perm[p] == t)
            .count();
        best = best.max(hits);
    }
    best as f64 / pred.len() as f64
}

/// Adjusted Rand index from explicit pair agreement counts.
pub fn brute_force_ari(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let (mut both, mut only_a, mut only_b, mut total) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            total += 1.0;
            if sa && sb {
                both += 1.0;
            }
            if sa {
                only_a += 1.0;
            }
            if sb {
                only_b += 1.0;
            }
        }
    }
    let expected = only_a * only_b / total;
    let max = 0.5 * (only_a + only_b);
    if max == expected {
        let same = (0..n).all(|i| (0..n).all(|j| (a[i] == a[j]) == (b[i] == b[j])));
        return if same { 1.0 } else { 0.0 };
    }
    (both - expected) / (max - expected)
}

/// The benchmark mixture: 10 components, 200 points each, 32 dimensions,
/// means at least 10 apart.
pub fn benchmark_mixture(seed: u64) -> Dataset {
    gen_gaussian_mixture(10, 200, 32, 10.0, &mut rng::stream(seed, rng::STREAM_DATA)).unwrap()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
