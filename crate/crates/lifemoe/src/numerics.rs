//! Dense real-array substrate: row-major `f64` arrays, the elementwise and
//! matrix kernels every other module builds on, and a finite-difference
//! gradient-checking harness.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an explicit shape.
///
/// The product of `shape` always equals `data.len()`; constructors enforce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, data.len(), "shape {shape:?} does not match data length {}", data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    /// Seeded Gaussian entries with the given standard deviation.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| gaussian(rng) * std).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        Self::new(shape, self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Standard normal sample via Box-Muller; two uniform draws per call keeps
/// the stream layout independent of any cached second value.
pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

// ---------------------------------------------------------------------------
// Kernels. These are the single implementation shared by the public ops below
// and by the autodiff graph's forward pass.
// ---------------------------------------------------------------------------

/// `a [m×k] · b [k×n]`, plain accumulation over contiguous rows of `b`.
pub fn matmul_kernel(a: &RealArray, b: &RealArray) -> RealArray {
    let (m, k) = (a.shape[0], a.shape[1]);
    let (kb, n) = (b.shape[0], b.shape[1]);
    assert_eq!(k, kb, "matmul inner dims {k} vs {kb}");
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    RealArray::new(vec![m, n], out)
}

pub fn transpose_kernel(a: &RealArray) -> RealArray {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    RealArray::new(vec![n, m], out)
}

/// Max-subtracted softmax of a single slice, in place.
pub fn softmax_slice(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax_rows_kernel(a: &RealArray) -> RealArray {
    let mut out = a.clone();
    let n = a.shape[1];
    for r in 0..a.shape[0] {
        softmax_slice(&mut out.data[r * n..(r + 1) * n]);
    }
    out
}

pub fn mean_rows_kernel(a: &RealArray) -> RealArray {
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = vec![0.0; n];
    for r in 0..m {
        for (o, &v) in out.iter_mut().zip(&a.data[r * n..(r + 1) * n]) {
            *o += v;
        }
    }
    let inv = 1.0 / m as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    RealArray::new(vec![1, n], out)
}

// ---------------------------------------------------------------------------
// Public operations with the contracts the rest of the crate relies on.
// ---------------------------------------------------------------------------

/// Softmax of a vector. Shift-invariant (max subtraction), order-preserving,
/// outputs sum to 1.
pub fn softmax(v: &RealArray) -> Result<RealArray> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of empty input".into()));
    }
    let mut data = v.data.clone();
    softmax_slice(&mut data);
    let out = RealArray::new(v.shape.clone(), data);
    out.ensure_finite("softmax output")?;
    Ok(out)
}

/// Row mean of an `L×d` array: entry `j` is `(1/L)·Σᵢ a[i,j]`.
pub fn mean_pool_rows(a: &RealArray) -> Result<RealArray> {
    if a.shape.len() != 2 {
        return Err(Error::Shape(format!("mean_pool_rows expects 2-D, got {:?}", a.shape)));
    }
    if a.shape[0] == 0 {
        return Err(Error::Domain("mean_pool_rows over zero rows".into()));
    }
    let pooled = mean_rows_kernel(a);
    let d = pooled.cols();
    Ok(pooled.reshaped(vec![d]))
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub probe_count: usize,
}

/// Central-difference check of an analytic gradient.
///
/// Probes up to `max_probes` randomly chosen coordinates of `x` (all of them
/// when `x` is small) and reports the worst relative disagreement
/// `|g_a - g_fd| / max(1e-8, |g_a| + |g_fd|)`.
pub fn grad_check<F, R>(
    op_name: &str,
    f: F,
    analytic: &RealArray,
    x: &RealArray,
    eps: f64,
    max_probes: usize,
    rng: &mut R,
) -> Result<GradCheckReport>
where
    F: Fn(&RealArray) -> Result<f64>,
    R: Rng,
{
    if eps <= 0.0 {
        return Err(Error::Domain("grad_check eps must be positive".into()));
    }
    assert_eq!(analytic.shape(), x.shape(), "gradient/input shape mismatch");
    let n = x.len();
    let mut indices: Vec<usize> = (0..n).collect();
    if n > max_probes {
        // Fisher-Yates prefix shuffle, enough for max_probes draws.
        for i in 0..max_probes {
            let j = rng.gen_range(i..n);
            indices.swap(i, j);
        }
        indices.truncate(max_probes);
    }

    let mut max_rel_error: f64 = 0.0;
    let mut probe = x.clone();
    for &idx in &indices {
        let orig = probe.data[idx];
        probe.data[idx] = orig + eps;
        let fp = f(&probe)?;
        probe.data[idx] = orig - eps;
        let fm = f(&probe)?;
        probe.data[idx] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Eval(format!("non-finite value of {op_name} at probe index {idx}")));
        }
        let g_fd = (fp - fm) / (2.0 * eps);
        let g_a = analytic.data[idx];
        let rel = (g_a - g_fd).abs() / (1e-8_f64).max(g_a.abs() + g_fd.abs());
        max_rel_error = max_rel_error.max(rel);
    }

    Ok(GradCheckReport {
        op_name: op_name.to_string(),
        max_rel_error,
        probe_count: indices.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetry_and_single() {
        let out = softmax(&RealArray::new(vec![2], vec![0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
        for x in [-7.25, 0.0, 3.0, 1e6] {
            let out = softmax(&RealArray::new(vec![1], vec![x])).unwrap();
            assert_eq!(out.data(), &[1.0]);
        }
    }

    #[test]
    fn softmax_matches_high_precision_oracle() {
        // Frozen from an independent 40-digit exp/sum evaluation.
        let expected = [
            0.11116562230242113,
            0.8214090194651259,
            0.06742535823245292,
        ];
        let out = softmax(&RealArray::new(vec![3], vec![1.0, 3.0, 0.5])).unwrap();
        for (o, e) in out.data().iter().zip(&expected) {
            assert!((o - e).abs() < 1e-15, "{o} vs {e}");
        }
    }

    #[test]
    fn softmax_is_probability_vector_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let k = rng.gen_range(1..9);
            let v = RealArray::randn(&[k], 10.0, &mut rng);
            let s = softmax(&v).unwrap();
            let sum: f64 = s.data().iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(s.data().iter().all(|&p| p > 0.0 && p <= 1.0));
            // shift invariance
            let c = rng.gen_range(-50.0..50.0);
            let shifted =
                RealArray::new(vec![k], v.data().iter().map(|x| x + c).collect());
            let s2 = softmax(&shifted).unwrap();
            for (a, b) in s.data().iter().zip(s2.data()) {
                assert!((a - b).abs() < 1e-12);
            }
            // argmax preserved
            let argmax = |a: &RealArray| {
                a.data()
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                    .unwrap()
                    .0
            };
            assert_eq!(argmax(&v), argmax(&s));
        }
    }

    #[test]
    fn softmax_empty_is_domain_error() {
        assert!(matches!(
            softmax(&RealArray::new(vec![0], vec![])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn mean_pool_rows_cases() {
        // constant rows
        let a = RealArray::new(vec![3, 2], vec![4.0, -1.0, 4.0, -1.0, 4.0, -1.0]);
        assert_eq!(mean_pool_rows(&a).unwrap().data(), &[4.0, -1.0]);
        // arithmetic mean
        let a = RealArray::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(mean_pool_rows(&a).unwrap().data(), &[2.0, 3.0]);
        // empty
        assert!(matches!(
            mean_pool_rows(&RealArray::new(vec![0, 3], vec![])),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn mean_pool_rows_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = RealArray::randn(&[5, 3], 2.0, &mut rng);
        // independent naive summation oracle
        let mut expect = vec![0.0; 3];
        for i in 0..5 {
            for j in 0..3 {
                expect[j] += a.at2(i, j);
            }
        }
        for e in expect.iter_mut() {
            *e /= 5.0;
        }
        let got = mean_pool_rows(&a).unwrap();
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_check_linear_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = RealArray::randn(&[6], 1.0, &mut rng);
        let x = RealArray::randn(&[6], 1.0, &mut rng);
        let a2 = a.clone();
        let f = move |x: &RealArray| -> Result<f64> {
            Ok(x.data().iter().zip(a2.data()).map(|(x, a)| x * a).sum())
        };
        // linear: truncation error is exactly zero, so a wide step leaves
        // only negligible roundoff
        let rep = grad_check("linear", f, &a, &x, 1e-3, 32, &mut rng).unwrap();
        assert!(rep.max_rel_error <= 1e-10, "{}", rep.max_rel_error);

        let zero = RealArray::zeros(&[6]);
        let rep = grad_check("constant", |_| Ok(2.5), &zero, &x, 1e-5, 32, &mut rng).unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
    }

    #[test]
    fn grad_check_logsumexp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = RealArray::randn(&[8], 1.0, &mut rng);
        let grad = softmax(&x).unwrap();
        let f = |x: &RealArray| -> Result<f64> {
            let m = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(m + x.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln())
        };
        let rep = grad_check("logsumexp", f, &grad, &x, 1e-5, 32, &mut rng).unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{}", rep.max_rel_error);
        assert_eq!(rep.probe_count, 8);
    }

    #[test]
    fn grad_check_reports_non_finite_probe() {
        let x = RealArray::new(vec![2], vec![0.5, 0.5]);
        let g = RealArray::zeros(&[2]);
        let f = |x: &RealArray| -> Result<f64> { Ok(x.data()[0].ln() + x.data()[1]) };
        // push x[0] near zero so a probe crosses into ln of a negative number
        let bad = RealArray::new(vec![2], vec![1e-9, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = grad_check("ln-probe", f, &g, &bad, 1e-5, 8, &mut rng).unwrap_err();
        match err {
            Error::Eval(msg) => assert!(msg.contains("probe index"), "{msg}"),
            other => panic!("expected Eval error, got {other:?}"),
        }
        let _ = x;
    }

    #[test]
    fn matmul_and_transpose_agree_with_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let a = RealArray::randn(&[4, 3], 1.0, &mut rng);
        let b = RealArray::randn(&[3, 5], 1.0, &mut rng);
        let c = matmul_kernel(&a, &b);
        for i in 0..4 {
            for j in 0..5 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += a.at2(i, p) * b.at2(p, j);
                }
                assert!((c.at2(i, j) - s).abs() < 1e-12);
            }
        }
        let t = transpose_kernel(&a);
        for i in 0..4 {
            for j in 0..3 {
                assert_eq!(t.at2(j, i), a.at2(i, j));
            }
        }
    }
}
