//! Shared helpers for the acceptance suite: a finite-difference gradient
//! oracle and tolerance predicates.

use q2l_core::tensor::{Scalar, Tensor};

/// Relative closeness with a small absolute floor so near-zero pairs compare.
pub fn rel_close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + 1e-8
}

/// Central finite differences of a scalar-valued function at `x`.
pub fn finite_difference<F>(x: &[f64], f: F) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let h = 1e-4;
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let keep = probe[i];
        probe[i] = keep + h;
        let up = f(&probe);
        probe[i] = keep - h;
        let down = f(&probe);
        probe[i] = keep;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Checks the reverse-mode gradient of `build` against the fd oracle.
///
/// `build` maps a leaf tensor to a scalar-valued graph output. The oracle
/// re-evaluates through plain (non-trainable) leaves so no tape grows.
pub fn check_grad<F>(x: &[f64], shape: &[usize], rtol: f64, build: F, name: &str)
where
    F: Fn(&Tensor<f64>) -> Tensor<f64>,
{
    let leaf = Tensor::<f64>::from_vec(shape, x.to_vec())
        .unwrap()
        .trainable();
    let out = build(&leaf);
    assert_eq!(out.numel(), 1, "{name}: build must produce a scalar");
    out.backward().expect("backward from scalar");
    let got = leaf.grad().unwrap_or_else(|| panic!("{name}: no grad reached the leaf"));

    let oracle = finite_difference(x, |probe| {
        let plain = Tensor::<f64>::from_vec(shape, probe.to_vec()).unwrap();
        build(&plain).item()
    });

    for i in 0..x.len() {
        assert!(
            rel_close(got[i], oracle[i], rtol),
            "{name}: grad[{i}] = {} but fd oracle = {} (rtol {rtol})",
            got[i],
            oracle[i]
        );
    }
}

/// Uniform sample in [lo, hi) from a simple splitmix generator, good enough
/// for test fixtures and independent of the crate's rng choices.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        TestRng(seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^ (z >> 31)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        lo + u * (hi - lo)
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn fill(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }

    /// Samples values in [lo, hi) keeping distance `margin` from each point
    /// in `kinks`, so fd stays valid for piecewise ops.
    pub fn fill_away_from(
        &mut self,
        n: usize,
        lo: f64,
        hi: f64,
        kinks: &[f64],
        margin: f64,
    ) -> Vec<f64> {
        (0..n)
            .map(|_| loop {
                let v = self.uniform(lo, hi);
                if kinks.iter().all(|k| (v - k).abs() >= margin) {
                    break v;
                }
            })
            .collect()
    }
}

/// Largest absolute elementwise difference between two slices.
pub fn max_abs_diff<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.to_f64() - y.to_f64()).abs())
        .fold(0.0, f64::max)
}
