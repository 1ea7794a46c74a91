//! Doubly finite, causal, second-order Volterra kernels.
//!
//! The forward model for memory length `R` is
//!
//! ```text
//! y[n] = h0 + Σ_j h1[j] x[n-j] + Σ_{k,l} h2[k][l] x[n-k] x[n-l]
//! ```
//!
//! with `x[q] = 0` outside `0..L`, so an input of length `L` produces an output
//! of length `L + R - 1`.
//!
//! `h2` is stored as the packed upper triangle of the symmetric matrix. The flat
//! [`CoefficientVector`] instead holds `c[a][b] = 2·h2[a][b]` for `a < b`, which
//! is what a regression over unordered products `x[n-a]·x[n-b]` estimates.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, write_json};
use crate::pulse::Pulse;

/// `M = 1 + R + R(R+1)/2`.
pub fn coefficient_count(memory_length: usize) -> usize {
    1 + memory_length + packed_len(memory_length)
}

pub(crate) fn packed_len(r: usize) -> usize {
    r * (r + 1) / 2
}

/// Position of `(a, b)`, `a <= b`, in the lexicographic packed upper triangle.
#[inline]
pub(crate) fn packed_index(r: usize, a: usize, b: usize) -> usize {
    debug_assert!(a <= b && b < r);
    a * (2 * r - a + 1) / 2 + (b - a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolterraKernel {
    h0: f64,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

impl VolterraKernel {
    /// `h2_packed` is the row-major upper triangle of the symmetric quadratic kernel.
    pub fn new(h0: f64, h1: Vec<f64>, h2_packed: Vec<f64>) -> Result<Self> {
        let r = h1.len();
        if r == 0 {
            return Err(Error::invalid("memory length must be at least 1"));
        }
        if h2_packed.len() != packed_len(r) {
            return Err(Error::invalid(format!(
                "packed quadratic kernel for R={r} needs {} entries, got {}",
                packed_len(r),
                h2_packed.len()
            )));
        }
        if !h0.is_finite() || h1.iter().chain(&h2_packed).any(|v| !v.is_finite()) {
            return Err(Error::validation("kernel coefficients must be finite"));
        }
        Ok(VolterraKernel {
            h0,
            h1,
            h2: h2_packed,
        })
    }

    pub fn from_symmetric(h0: f64, h1: Vec<f64>, h2: &DMatrix<f64>) -> Result<Self> {
        let r = h1.len();
        if h2.nrows() != r || h2.ncols() != r {
            return Err(Error::invalid(format!(
                "quadratic kernel must be {r}x{r}, got {}x{}",
                h2.nrows(),
                h2.ncols()
            )));
        }
        let mut packed = Vec::with_capacity(packed_len(r));
        for a in 0..r {
            for b in a..r {
                packed.push(0.5 * (h2[(a, b)] + h2[(b, a)]));
            }
        }
        VolterraKernel::new(h0, h1, packed)
    }

    /// `y = x`.
    pub fn identity() -> Self {
        VolterraKernel {
            h0: 0.0,
            h1: vec![1.0],
            h2: vec![0.0],
        }
    }

    pub fn zero(memory_length: usize) -> Result<Self> {
        VolterraKernel::new(
            0.0,
            vec![0.0; memory_length],
            vec![0.0; packed_len(memory_length)],
        )
    }

    pub fn memory_length(&self) -> usize {
        self.h1.len()
    }

    pub fn h0(&self) -> f64 {
        self.h0
    }

    pub fn h1(&self) -> &[f64] {
        &self.h1
    }

    pub fn h2_packed(&self) -> &[f64] {
        &self.h2
    }

    #[inline]
    pub fn h2(&self, k: usize, l: usize) -> f64 {
        let r = self.memory_length();
        let (a, b) = if k <= l { (k, l) } else { (l, k) };
        self.h2[packed_index(r, a, b)]
    }

    pub fn h2_matrix(&self) -> DMatrix<f64> {
        let r = self.memory_length();
        DMatrix::from_fn(r, r, |k, l| self.h2(k, l))
    }

    pub fn is_linear(&self) -> bool {
        self.h2.iter().all(|&v| v == 0.0)
    }

    /// Same kernel with zero-padded (or truncated) memory.
    pub fn with_memory_length(&self, r: usize) -> Result<Self> {
        let old = self.memory_length();
        let h1 = (0..r).map(|j| if j < old { self.h1[j] } else { 0.0 }).collect();
        let mut h2 = Vec::with_capacity(packed_len(r));
        for a in 0..r {
            for b in a..r {
                h2.push(if b < old { self.h2(a, b) } else { 0.0 });
            }
        }
        VolterraKernel::new(self.h0, h1, h2)
    }

    pub fn to_coefficients(&self) -> CoefficientVector {
        let r = self.memory_length();
        let mut v = Vec::with_capacity(coefficient_count(r));
        v.push(self.h0);
        v.extend_from_slice(&self.h1);
        for a in 0..r {
            for b in a..r {
                let h = self.h2[packed_index(r, a, b)];
                v.push(if a == b { h } else { 2.0 * h });
            }
        }
        CoefficientVector(v)
    }

    pub fn from_coefficients(v: &CoefficientVector, memory_length: usize) -> Result<Self> {
        let r = memory_length;
        let m = coefficient_count(r);
        if r == 0 {
            return Err(Error::invalid("memory length must be at least 1"));
        }
        if v.0.len() != m {
            return Err(Error::invalid(format!(
                "coefficient vector for R={r} must have M={m} entries, got {}",
                v.0.len()
            )));
        }
        let h1 = v.0[1..=r].to_vec();
        let mut h2 = Vec::with_capacity(packed_len(r));
        let mut it = v.0[r + 1..].iter();
        for a in 0..r {
            for b in a..r {
                let c = *it.next().expect("length checked");
                h2.push(if a == b { c } else { 0.5 * c });
            }
        }
        VolterraKernel::new(v.0[0], h1, h2)
    }

    /// Pushes `x` through the kernel. The output has `L + R - 1` samples and
    /// keeps `dt` and label of the input.
    pub fn apply(&self, x: &Pulse) -> Pulse {
        let y = self.apply_samples(x.samples());
        x.map_samples(y).expect("finite kernel on finite input")
    }

    pub fn apply_samples(&self, x: &[f64]) -> Vec<f64> {
        let r = self.memory_length();
        let n_out = x.len() + r - 1;
        let mut window = vec![0.0; r];
        let mut y = Vec::with_capacity(n_out);
        for n in 0..n_out {
            // window[j] = x[n - j]
            for (j, w) in window.iter_mut().enumerate() {
                *w = lagged(x, n, j);
            }
            y.push(self.h0 + self.linear_term(&window) + self.quadratic_term(&window));
        }
        y
    }

    fn linear_term(&self, window: &[f64]) -> f64 {
        self.h1.iter().zip(window).map(|(h, w)| h * w).sum()
    }

    fn quadratic_term(&self, window: &[f64]) -> f64 {
        let r = window.len();
        let mut acc = 0.0;
        let mut idx = 0;
        for a in 0..r {
            let wa = window[a];
            if wa == 0.0 {
                idx += r - a;
                continue;
            }
            let row = &self.h2[idx..idx + r - a];
            let mut inner = 0.5 * row[0] * wa;
            for (h, w) in row[1..].iter().zip(&window[a + 1..]) {
                inner += h * w;
            }
            acc += 2.0 * wa * inner;
            idx += r - a;
        }
        acc
    }

    /// `∂y[n]/∂x[j]`, an `(L+R-1) × L` matrix.
    pub fn jacobian(&self, x: &Pulse) -> DMatrix<f64> {
        self.jacobian_samples(x.samples())
    }

    pub fn jacobian_samples(&self, x: &[f64]) -> DMatrix<f64> {
        let r = self.memory_length();
        let l = x.len();
        let n_out = l + r - 1;
        let mut jac = DMatrix::zeros(n_out, l);
        for n in 0..n_out {
            for a in 0..r {
                if a > n || n - a >= l {
                    continue;
                }
                jac[(n, n - a)] = self.lag_sensitivity(x, n, a);
            }
        }
        jac
    }

    /// `h1[a] + 2 Σ_b h2[a][b] x[n-b]`, the derivative of `y[n]` with respect to `x[n-a]`.
    #[inline]
    fn lag_sensitivity(&self, x: &[f64], n: usize, a: usize) -> f64 {
        let r = self.memory_length();
        let mut s = 0.0;
        for b in 0..r {
            let xb = lagged(x, n, b);
            if xb != 0.0 {
                s += self.h2(a, b) * xb;
            }
        }
        self.h1[a] + 2.0 * s
    }

    /// Vector-Jacobian product `Jᵀ v` without materializing `J`.
    pub fn vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let r = self.memory_length();
        let l = x.len();
        if v.len() != l + r - 1 {
            return Err(Error::invalid(format!(
                "cotangent length {} does not match output length {} (L={l}, R={r})",
                v.len(),
                l + r - 1
            )));
        }
        let h2 = self.h2_matrix();
        let mut window = vec![0.0; r];
        let mut out = vec![0.0; l];
        for (n, &vn) in v.iter().enumerate() {
            if vn == 0.0 {
                continue;
            }
            for (j, w) in window.iter_mut().enumerate() {
                *w = lagged(x, n, j);
            }
            for a in 0..r.min(n + 1) {
                let j = n - a;
                if j >= l {
                    continue;
                }
                let row = h2.column(a);
                let quad: f64 = row.iter().zip(&window).map(|(h, w)| h * w).sum();
                out[j] += vn * (self.h1[a] + 2.0 * quad);
            }
        }
        Ok(out)
    }
}

#[inline]
fn lagged(x: &[f64], n: usize, lag: usize) -> f64 {
    if lag > n {
        0.0
    } else {
        x.get(n - lag).copied().unwrap_or(0.0)
    }
}

/// Flattened kernel in the canonical regression order
/// `[h0, h1[0..R], c00, c01, …, c(R-1)(R-1)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVector(pub Vec<f64>);

impl CoefficientVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Parameters of a kernel built from Gaussian profiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianKernelSpec {
    #[serde(rename = "R")]
    pub memory_length: usize,
    pub sigma1: f64,
    pub sigma2: f64,
    #[serde(rename = "J", default = "default_j")]
    pub j: f64,
    #[serde(default = "default_h0")]
    pub h0: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub mu1: f64,
    #[serde(default)]
    pub mu2: f64,
}

fn default_j() -> f64 {
    5e-6
}

fn default_h0() -> f64 {
    0.1
}

impl GaussianKernelSpec {
    /// Peaks at zero lag, `J = 5e-6`, `h0 = 0.1`.
    pub fn new(memory_length: usize, sigma1: f64, sigma2: f64) -> Self {
        GaussianKernelSpec {
            memory_length,
            sigma1,
            sigma2,
            j: default_j(),
            h0: default_h0(),
            mu: 0.0,
            mu1: 0.0,
            mu2: 0.0,
        }
    }

    pub fn build(&self) -> Result<VolterraKernel> {
        make_gaussian_kernel(self)
    }
}

/// Linear kernel: normalized Gaussian of width `sigma1` centred at `mu`.
/// Quadratic kernel: `J·exp(-((t1-mu1)² + (t2-mu2)²)/(2 sigma2²))`, symmetrized.
/// Both are truncated to lags `0..R` without renormalization.
pub fn make_gaussian_kernel(spec: &GaussianKernelSpec) -> Result<VolterraKernel> {
    let r = spec.memory_length;
    if r == 0 {
        return Err(Error::invalid("memory length must be at least 1"));
    }
    if !(spec.sigma1 > 0.0 && spec.sigma2 > 0.0) {
        return Err(Error::invalid("kernel widths must be positive"));
    }
    let norm = 1.0 / (spec.sigma1 * (2.0 * std::f64::consts::PI).sqrt());
    let h1 = (0..r)
        .map(|t| {
            let d = t as f64 - spec.mu;
            norm * (-d * d / (2.0 * spec.sigma1 * spec.sigma1)).exp()
        })
        .collect();
    let s2 = 2.0 * spec.sigma2 * spec.sigma2;
    let raw = |t1: usize, t2: usize| {
        let d1 = t1 as f64 - spec.mu1;
        let d2 = t2 as f64 - spec.mu2;
        spec.j * (-(d1 * d1 + d2 * d2) / s2).exp()
    };
    let mut h2 = Vec::with_capacity(packed_len(r));
    for a in 0..r {
        for b in a..r {
            h2.push(0.5 * (raw(a, b) + raw(b, a)));
        }
    }
    VolterraKernel::new(spec.h0, h1, h2)
}

/// Named synthetic distortions. A–C share `R = 50` and widen the Gaussians,
/// D–F keep the narrow widths and grow the memory.
pub fn preset(name: &str) -> Result<GaussianKernelSpec> {
    let (r, s1, s2) = match name.to_ascii_uppercase().as_str() {
        "A" => (50, 1.0, 4.25),
        "B" => (50, 6.0, 6.37),
        "C" => (50, 11.0, 8.50),
        "D" => (20, 1.0, 4.25),
        "E" => (40, 1.0, 4.25),
        "F" => (60, 1.0, 4.25),
        _ => {
            return Err(Error::invalid(format!(
                "unknown distortion preset '{name}'; valid presets: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(GaussianKernelSpec::new(r, s1, s2))
}

pub const PRESET_NAMES: [&str; 6] = ["A", "B", "C", "D", "E", "F"];

/// The small kernel used for the orthogonalization and training-data studies.
pub fn small_study_kernel() -> GaussianKernelSpec {
    GaussianKernelSpec::new(5, 0.1, 0.42)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelFile {
    #[serde(rename = "R")]
    r: usize,
    h0: f64,
    h1: Vec<f64>,
    h2_packed: Vec<f64>,
    convention: String,
}

pub const KERNEL_CONVENTION: &str = "symmetric-h2";

pub fn write_kernel(path: &Path, k: &VolterraKernel) -> Result<()> {
    write_json(
        path,
        &KernelFile {
            r: k.memory_length(),
            h0: k.h0,
            h1: k.h1.clone(),
            h2_packed: k.h2.clone(),
            convention: KERNEL_CONVENTION.to_string(),
        },
    )
}

pub fn read_kernel(path: &Path) -> Result<VolterraKernel> {
    let f: KernelFile = read_json(path)?;
    if f.convention != KERNEL_CONVENTION {
        return Err(Error::validation(format!(
            "{}: unsupported kernel convention '{}', expected '{KERNEL_CONVENTION}'",
            path.display(),
            f.convention
        )));
    }
    if f.h1.len() != f.r {
        return Err(Error::validation(format!(
            "{}: h1 has {} entries but R={}",
            path.display(),
            f.h1.len(),
            f.r
        )));
    }
    VolterraKernel::new(f.h0, f.h1, f.h2_packed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pulse::generate_random_noise;
    use proptest::prelude::*;
    use rand::Rng;

    /// Ordered double sum over a full symmetric matrix, no packing involved.
    fn brute_force(h0: f64, h1: &[f64], h2: &DMatrix<f64>, x: &[f64]) -> Vec<f64> {
        let r = h1.len();
        let at = |q: isize| {
            if q < 0 || q as usize >= x.len() {
                0.0
            } else {
                x[q as usize]
            }
        };
        (0..x.len() + r - 1)
            .map(|n| {
                let n = n as isize;
                let mut y = h0;
                for j in 0..r {
                    y += h1[j] * at(n - j as isize);
                }
                for k in 0..r {
                    for l in 0..r {
                        y += h2[(k, l)] * at(n - k as isize) * at(n - l as isize);
                    }
                }
                y
            })
            .collect()
    }

    fn random_symmetric(r: usize, seed: u64) -> (f64, Vec<f64>, DMatrix<f64>) {
        let mut rng = crate::pulse::rng_from_seed(seed);
        let h0 = rng.random_range(-1.0..1.0);
        let h1: Vec<f64> = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut h2 = DMatrix::zeros(r, r);
        for a in 0..r {
            for b in a..r {
                let v = rng.random_range(-0.5..0.5);
                h2[(a, b)] = v;
                h2[(b, a)] = v;
            }
        }
        (h0, h1, h2)
    }

    #[test]
    fn packed_index_is_lexicographic() {
        for r in 1..8 {
            let mut expected = 0;
            for a in 0..r {
                for b in a..r {
                    assert_eq!(packed_index(r, a, b), expected);
                    expected += 1;
                }
            }
            assert_eq!(expected, packed_len(r));
        }
    }

    #[test]
    fn constant_offset_kernel() {
        let k = VolterraKernel::new(0.1, vec![0.0; 4], vec![0.0; 10]).unwrap();
        let x = generate_random_noise(17, 1.0, 1).unwrap();
        let y = k.apply(&x);
        assert_eq!(y.len(), 17 + 3);
        assert!(y.samples().iter().all(|&v| v == 0.1));
    }

    #[test]
    fn identity_channel() {
        let x = generate_random_noise(33, 2.0, 4).unwrap();
        assert_eq!(VolterraKernel::identity().apply(&x), x);
    }

    #[test]
    fn worked_quadratic_example() {
        let k = VolterraKernel::new(0.0, vec![1.0, 0.0], vec![0.0, 0.5, 0.0]).unwrap();
        let y = k.apply_samples(&[2.0, 3.0]);
        assert_eq!(y, vec![2.0, 9.0, 0.0]);
    }

    #[test]
    fn apply_matches_ordered_double_sum() {
        for (r, l, seed) in [(1, 5, 1), (3, 9, 2), (6, 20, 3), (9, 4, 4)] {
            let (h0, h1, h2) = random_symmetric(r, seed);
            let k = VolterraKernel::from_symmetric(h0, h1.clone(), &h2).unwrap();
            let x = generate_random_noise(l, 1.5, seed + 10).unwrap();
            let expected = brute_force(h0, &h1, &h2, x.samples());
            for (a, b) in k.apply_samples(x.samples()).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn linear_jacobian_is_banded_convolution() {
        let h1 = vec![0.5, -0.25, 0.125];
        let k = VolterraKernel::new(0.3, h1.clone(), vec![0.0; 6]).unwrap();
        let x = generate_random_noise(6, 1.0, 2).unwrap();
        let jac = k.jacobian(&x);
        assert_eq!(jac.shape(), (8, 6));
        for n in 0..8 {
            for j in 0..6 {
                let expected = if n >= j && n - j < 3 { h1[n - j] } else { 0.0 };
                assert_eq!(jac[(n, j)], expected);
            }
        }
    }

    #[test]
    fn jacobian_at_zero_input_is_linear_part() {
        let (h0, h1, h2) = random_symmetric(4, 8);
        let k = VolterraKernel::from_symmetric(h0, h1.clone(), &h2).unwrap();
        let lin = VolterraKernel::new(h0, h1, vec![0.0; 10]).unwrap();
        let zero = vec![0.0; 7];
        assert_eq!(k.jacobian_samples(&zero), lin.jacobian_samples(&zero));
    }

    fn central_difference_jacobian(k: &VolterraKernel, x: &[f64], step: f64) -> DMatrix<f64> {
        let n_out = x.len() + k.memory_length() - 1;
        let mut fd = DMatrix::zeros(n_out, x.len());
        for j in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[j] += step;
            xm[j] -= step;
            let yp = k.apply_samples(&xp);
            let ym = k.apply_samples(&xm);
            for n in 0..n_out {
                fd[(n, j)] = (yp[n] - ym[n]) / (2.0 * step);
            }
        }
        fd
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let (h0, h1, h2) = random_symmetric(4, 21);
        let k = VolterraKernel::from_symmetric(h0, h1, &h2).unwrap();
        let x = generate_random_noise(12, 1.0, 22).unwrap();
        let jac = k.jacobian(&x);
        let fd = central_difference_jacobian(&k, x.samples(), 1e-6);
        let scale = 1.0 + jac.amax();
        assert!((&jac - &fd).amax() <= 1e-7 * scale);
    }

    #[test]
    fn vjp_matches_explicit_jacobian() {
        let (h0, h1, h2) = random_symmetric(5, 31);
        let k = VolterraKernel::from_symmetric(h0, h1, &h2).unwrap();
        let x = generate_random_noise(11, 1.0, 32).unwrap();
        let v = generate_random_noise(15, 1.0, 33).unwrap();
        let jt = k.jacobian(&x).transpose() * nalgebra::DVector::from_column_slice(v.samples());
        let got = k.vjp(x.samples(), v.samples()).unwrap();
        for (a, b) in got.iter().zip(jt.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(k.vjp(x.samples(), &v.samples()[..14]).is_err());
    }

    #[test]
    fn gaussian_kernel_distortion_c() {
        let k = preset("C").unwrap().build().unwrap();
        assert_eq!(k.memory_length(), 50);
        assert_eq!(k.to_coefficients().len(), 1326);
        assert_eq!(k.h0(), 0.1);
        let peak = 1.0 / (11.0 * (2.0 * std::f64::consts::PI).sqrt());
        assert!((k.h1()[0] - peak).abs() < 1e-15);
        assert!(k.h1().windows(2).all(|w| w[1] < w[0]));
        assert!((k.h2(0, 0) - 5e-6).abs() < 1e-20);
    }

    #[test]
    fn gaussian_kernel_peak_at_mu() {
        let mut spec = GaussianKernelSpec::new(20, 3.0, 2.0);
        spec.mu = 7.0;
        let k = spec.build().unwrap();
        let peak = 1.0 / (3.0 * (2.0 * std::f64::consts::PI).sqrt());
        assert_eq!(k.h1()[7], peak);
        assert!(k.h1().iter().all(|&v| v <= peak));
    }

    #[test]
    fn gaussian_kernel_without_quadratic_part() {
        let mut spec = GaussianKernelSpec::new(10, 1.0, 2.0);
        spec.j = 0.0;
        assert!(spec.build().unwrap().is_linear());
    }

    #[test]
    fn gaussian_kernel_symmetrized_with_offset_means() {
        let mut spec = GaussianKernelSpec::new(6, 1.0, 1.5);
        spec.mu1 = 1.0;
        spec.mu2 = 3.0;
        let k = spec.build().unwrap();
        let m = k.h2_matrix();
        let raw = |a: f64, b: f64| 5e-6 * (-((a - 1.0).powi(2) + (b - 3.0).powi(2)) / 4.5).exp();
        assert!((m[(0, 4)] - 0.5 * (raw(0.0, 4.0) + raw(4.0, 0.0))).abs() < 1e-20);
        assert_eq!(m, m.transpose());
    }

    #[test]
    fn presets() {
        let c = preset("C").unwrap();
        assert_eq!((c.memory_length, c.sigma1, c.sigma2), (50, 11.0, 8.50));
        let f = preset("f").unwrap();
        assert_eq!((f.memory_length, f.sigma1, f.sigma2), (60, 1.0, 4.25));
        for name in PRESET_NAMES {
            let p = preset(name).unwrap();
            assert_eq!((p.j, p.h0), (5e-6, 0.1));
        }
        let err = preset("Z").unwrap_err().to_string();
        assert!(err.contains("A, B, C, D, E, F"), "{err}");
    }

    #[test]
    fn coefficient_counts() {
        assert_eq!(coefficient_count(2), 6);
        assert_eq!(coefficient_count(50), 1326);
        assert_eq!(coefficient_count(60), 1891);
    }

    #[test]
    fn coefficient_order_r2() {
        let k = VolterraKernel::new(0.5, vec![1.0, 2.0], vec![3.0, 4.0, 5.0]).unwrap();
        assert_eq!(
            k.to_coefficients().0,
            vec![0.5, 1.0, 2.0, 3.0, 8.0, 5.0]
        );
    }

    #[test]
    fn coefficient_length_mismatch_names_m() {
        let err = VolterraKernel::from_coefficients(&CoefficientVector(vec![0.0; 5]), 2)
            .unwrap_err()
            .to_string();
        assert!(err.contains("M=6"), "{err}");
    }

    #[test]
    fn kernel_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.json");
        let k = preset("D").unwrap().build().unwrap();
        write_kernel(&path, &k).unwrap();
        assert_eq!(read_kernel(&path).unwrap(), k);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"convention\": \"symmetric-h2\""));
    }

    #[test]
    fn kernel_file_rejects_wrong_convention() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.json");
        std::fs::write(
            &path,
            r#"{"R":1,"h0":0,"h1":[1],"h2_packed":[0],"convention":"doubled"}"#,
        )
        .unwrap();
        assert!(read_kernel(&path).is_err());
    }

    fn kernel_strategy() -> impl Strategy<Value = (VolterraKernel, Vec<f64>)> {
        (1usize..8, 1usize..32, any::<u64>()).prop_map(|(r, l, seed)| {
            let (h0, h1, h2) = random_symmetric(r, seed);
            let k = VolterraKernel::from_symmetric(h0, h1, &h2).unwrap();
            let x = generate_random_noise(l, 1.0, seed ^ 0x5eed).unwrap().into_samples();
            (k, x)
        })
    }

    proptest! {
        #[test]
        fn output_length_law((k, x) in kernel_strategy()) {
            prop_assert_eq!(k.apply_samples(&x).len(), x.len() + k.memory_length() - 1);
        }

        #[test]
        fn coefficient_round_trip((k, x) in kernel_strategy()) {
            let back = VolterraKernel::from_coefficients(&k.to_coefficients(), k.memory_length()).unwrap();
            prop_assert_eq!(back.apply_samples(&x), k.apply_samples(&x));
        }

        #[test]
        fn jacobian_matches_fd((k, x) in kernel_strategy()) {
            let jac = k.jacobian_samples(&x);
            let fd = central_difference_jacobian(&k, &x, 1e-6);
            prop_assert!((&jac - &fd).amax() <= 1e-7 * (1.0 + jac.amax()));
        }

        #[test]
        fn causal_with_finite_memory((k, x) in kernel_strategy(), pick in any::<prop::sample::Index>()) {
            let j = pick.index(x.len());
            let mut xp = x.clone();
            xp[j] += 0.7;
            let y = k.apply_samples(&x);
            let yp = k.apply_samples(&xp);
            let r = k.memory_length();
            for n in 0..y.len() {
                if n < j || n >= j + r {
                    prop_assert_eq!(y[n], yp[n]);
                }
            }
        }

        #[test]
        fn exactly_quadratic_along_lines((k, x) in kernel_strategy(), seed in any::<u64>()) {
            let d = generate_random_noise(x.len(), 1.0, seed).unwrap().into_samples();
            let at = |t: f64| {
                let xt: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
                k.apply_samples(&xt)
            };
            let (y0, y1, y2, y3) = (at(0.0), at(1.0), at(2.0), at(3.0));
            for n in 0..y0.len() {
                let s1 = y2[n] - 2.0 * y1[n] + y0[n];
                let s2 = y3[n] - 2.0 * y2[n] + y1[n];
                prop_assert!((s1 - s2).abs() <= 1e-10 * (1.0 + s1.abs()));
            }
        }

        #[test]
        fn superposition_holds_only_for_linear_kernels((k, x1) in kernel_strategy(), seed in any::<u64>()) {
            let x2 = generate_random_noise(x1.len(), 1.0, seed).unwrap().into_samples();
            let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
            let lin = VolterraKernel::new(k.h0(), k.h1().to_vec(), vec![0.0; packed_len(k.memory_length())]).unwrap();
            let defect = |kk: &VolterraKernel| {
                let (ya, yb, ys) = (kk.apply_samples(&x1), kk.apply_samples(&x2), kk.apply_samples(&sum));
                ys.iter().zip(ya.iter().zip(&yb)).map(|(s, (a, b))| (s - a - b + kk.h0()).abs()).fold(0.0, f64::max)
            };
            prop_assert!(defect(&lin) < 1e-12);
            // cross term 2·Σ h2[k][l] x1[n-k] x2[n-l] survives for the quadratic kernel
            let cross: Vec<f64> = {
                let q = VolterraKernel::new(0.0, vec![0.0; k.memory_length()], k.h2_packed().to_vec()).unwrap();
                let (qa, qb, qs) = (q.apply_samples(&x1), q.apply_samples(&x2), q.apply_samples(&sum));
                qs.iter().zip(qa.iter().zip(&qb)).map(|(s, (a, b))| s - a - b).collect()
            };
            let max_cross = cross.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!((defect(&k) - max_cross).abs() < 1e-9);
        }
    }

    #[test]
    fn superposition_fails_for_quadratic_kernel() {
        let k = preset("D").unwrap().build().unwrap();
        let x1 = generate_random_noise(30, 1.0, 1).unwrap().into_samples();
        let x2 = generate_random_noise(30, 1.0, 2).unwrap().into_samples();
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let (ya, yb, ys) = (k.apply_samples(&x1), k.apply_samples(&x2), k.apply_samples(&sum));
        let defect = ys
            .iter()
            .zip(ya.iter().zip(&yb))
            .map(|(s, (a, b))| (s - a - b + k.h0()).abs())
            .fold(0.0, f64::max);
        assert!(defect > 1e-8);
    }
}
