//! Dense numerical kernels: column-pivoted Householder least squares and the
//! scaling-and-squaring matrix exponential with its Fréchet derivative.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Result of a least-squares solve through an orthogonal factorization.
#[derive(Debug, Clone)]
pub struct LeastSquares {
    pub solution: DVector<f64>,
    /// Numerical rank under the relative diagonal threshold.
    pub rank: usize,
    /// `|r_00| / |r_kk|` for the last retained pivot.
    pub condition_estimate: f64,
}

/// Minimizes `‖b - A x‖₂` by Householder QR with column pivoting.
///
/// Pivots whose diagonal magnitude falls below `rel_tol · |r_00|` are treated
/// as zero; the minimum-norm solution is then obtained from a second
/// factorization of the retained trapezoid (complete orthogonal decomposition).
/// `A` is never squared.
pub fn lstsq_qr(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: f64) -> Result<LeastSquares> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::invalid(format!(
            "least squares needs a non-empty system, got {m}x{n}"
        )));
    }
    if b.len() != m {
        return Err(Error::invalid(format!(
            "right-hand side has {} rows, matrix has {m}",
            b.len()
        )));
    }
    let mut qr = a.as_slice().to_vec();
    let mut rhs = b.as_slice().to_vec();
    let steps = m.min(n);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut norms: Vec<f64> = (0..n).map(|j| norm2(&qr[j * m..(j + 1) * m])).collect();
    let mut ref_norms = norms.clone();
    let mut diag = Vec::with_capacity(steps);

    for k in 0..steps {
        let p = (k..n)
            .max_by(|&i, &j| norms[i].total_cmp(&norms[j]))
            .expect("non-empty range");
        if p != k {
            for i in 0..m {
                qr.swap(k * m + i, p * m + i);
            }
            perm.swap(k, p);
            norms.swap(k, p);
            ref_norms.swap(k, p);
        }

        let (head, tail) = qr.split_at_mut((k + 1) * m);
        let col = &mut head[k * m + k..(k + 1) * m];
        let (beta, tau) = householder(col);
        diag.push(beta);
        if tau != 0.0 {
            let v = &*col;
            for j in 0..(n - k - 1) {
                let target = &mut tail[j * m + k..(j + 1) * m];
                reflect(v, tau, target);
            }
            reflect(v, tau, &mut rhs[k..]);
        }

        // downdate the remaining column norms, recomputing when cancellation bites
        for j in (k + 1)..n {
            if norms[j] == 0.0 {
                continue;
            }
            let r_kj = qr[j * m + k];
            let t = 1.0 - (r_kj / norms[j]).powi(2);
            let t = t.max(0.0);
            let ratio = norms[j] / ref_norms[j];
            if t * ratio * ratio <= f64::EPSILON.sqrt() {
                norms[j] = norm2(&qr[j * m + k + 1..(j + 1) * m]);
                ref_norms[j] = norms[j];
            } else {
                norms[j] *= t.sqrt();
            }
        }
    }

    let r00 = diag.first().map(|d| d.abs()).unwrap_or(0.0);
    let rank = if r00 == 0.0 {
        0
    } else {
        diag.iter().take_while(|d| d.abs() > rel_tol * r00).count()
    };
    let condition_estimate = if rank == 0 {
        f64::INFINITY
    } else {
        r00 / diag[rank - 1].abs()
    };

    let r_at = |i: usize, j: usize| if i == j { diag[i] } else { qr[j * m + i] };
    let mut z = vec![0.0; n];
    if rank == n {
        for i in (0..n).rev() {
            let mut s = rhs[i];
            for j in (i + 1)..n {
                s -= r_at(i, j) * z[j];
            }
            z[i] = s / diag[i];
        }
    } else if rank > 0 {
        // T = R[0..rank, 0..n] = Sᵀ Zᵀ with Tᵀ = Z S; then z = Z S⁻ᵀ c.
        let mut t = vec![0.0; n * rank]; // Tᵀ, n x rank, column-major
        for i in 0..rank {
            for j in i..n {
                t[i * n + j] = r_at(i, j);
            }
        }
        let mut taus = Vec::with_capacity(rank);
        let mut sdiag = Vec::with_capacity(rank);
        for k in 0..rank {
            let (head, tail) = t.split_at_mut((k + 1) * n);
            let col = &mut head[k * n + k..(k + 1) * n];
            let (beta, tau) = householder(col);
            sdiag.push(beta);
            taus.push(tau);
            if tau != 0.0 {
                let v = &*col;
                for j in 0..(rank - k - 1) {
                    reflect(v, tau, &mut tail[j * n + k..(j + 1) * n]);
                }
            }
        }
        // Sᵀ w = c (forward substitution, S upper triangular)
        let mut w = vec![0.0; rank];
        for i in 0..rank {
            let mut s = rhs[i];
            for j in 0..i {
                s -= t[i * n + j] * w[j];
            }
            w[i] = s / sdiag[i];
        }
        // z = H_0 H_1 … H_{rank-1} [w; 0]
        z[..rank].copy_from_slice(&w);
        for k in (0..rank).rev() {
            let tau = taus[k];
            if tau == 0.0 {
                continue;
            }
            let mut v = t[k * n + k..(k + 1) * n].to_vec();
            v[0] = 1.0;
            reflect_with_unit(&v, tau, &mut z[k..]);
        }
    }

    let mut solution = DVector::zeros(n);
    for (k, &p) in perm.iter().enumerate() {
        solution[p] = z[k];
    }
    Ok(LeastSquares {
        solution,
        rank,
        condition_estimate,
    })
}

/// Overwrites `x` with the Householder vector (implicit unit first entry,
/// stored below) and returns `(beta, tau)` such that `(I - tau v vᵀ) x = beta e₁`.
fn householder(x: &mut [f64]) -> (f64, f64) {
    let alpha = x[0];
    let tail_norm = norm2(&x[1..]);
    if tail_norm == 0.0 {
        return (alpha, 0.0);
    }
    let norm = alpha.hypot(tail_norm);
    let beta = if alpha >= 0.0 { -norm } else { norm };
    let tau = (beta - alpha) / beta;
    let scale = 1.0 / (alpha - beta);
    for v in &mut x[1..] {
        *v *= scale;
    }
    x[0] = beta;
    (beta, tau)
}

/// Applies `I - tau v vᵀ` to `target`, with `v[0]` implicitly 1.
#[inline]
fn reflect(v: &[f64], tau: f64, target: &mut [f64]) {
    let w = target[0] + dot(&v[1..], &target[1..]);
    let s = tau * w;
    target[0] -= s;
    axpy(-s, &v[1..], &mut target[1..]);
}

fn reflect_with_unit(v: &[f64], tau: f64, target: &mut [f64]) {
    let s = tau * dot(v, target);
    axpy(-s, v, target);
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn norm2(x: &[f64]) -> f64 {
    let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let s: f64 = x.iter().map(|v| (v / scale).powi(2)).sum();
    scale * s.sqrt()
}

pub type CMatrix = DMatrix<Complex64>;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.539398330063230e-1,
    9.504178996162932e-1,
    2.097847961257068e0,
    5.371920351148152e0,
];

fn norm1(a: &CMatrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn scale_add(terms: &[(&CMatrix, f64)], n: usize) -> CMatrix {
    let mut out = CMatrix::zeros(n, n);
    for (m, c) in terms {
        out += *m * Complex64::new(*c, 0.0);
    }
    out
}

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant of order 3–13 picked from the 1-norm.
pub fn expm(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    let id = CMatrix::identity(n, n);
    let nrm = norm1(a);
    let a2 = a * a;
    let (u, v, squarings) = if nrm <= THETA[0] {
        let (u, v) = pade_low(a, &a2, &id, &PADE_3);
        (u, v, 0)
    } else if nrm <= THETA[1] {
        let (u, v) = pade_low(a, &a2, &id, &PADE_5);
        (u, v, 0)
    } else if nrm <= THETA[2] {
        let (u, v) = pade_low(a, &a2, &id, &PADE_7);
        (u, v, 0)
    } else if nrm <= THETA[3] {
        let (u, v) = pade_low(a, &a2, &id, &PADE_9);
        (u, v, 0)
    } else {
        let s = ((nrm / THETA[4]).log2().ceil()).max(0.0) as i32;
        let scale = Complex64::new(2f64.powi(-s), 0.0);
        let a_s = a * scale;
        let a2_s = &a2 * (scale * scale);
        let (u, v) = pade_13(&a_s, &a2_s, &id);
        (u, v, s)
    };
    let p = &v + &u;
    let q = &v - &u;
    let mut r = q
        .lu()
        .solve(&p)
        .expect("Padé denominator is nonsingular for the selected order");
    for _ in 0..squarings {
        r = &r * &r;
    }
    r
}

fn pade_low(a: &CMatrix, a2: &CMatrix, id: &CMatrix, c: &[f64]) -> (CMatrix, CMatrix) {
    let n = a.nrows();
    // powers A^0, A^2, A^4, ...
    let mut even = vec![id.clone(), a2.clone()];
    while even.len() < c.len().div_ceil(2) {
        let next = even.last().unwrap() * a2;
        even.push(next);
    }
    let mut u_inner = CMatrix::zeros(n, n);
    let mut v = CMatrix::zeros(n, n);
    for (i, pow) in even.iter().enumerate() {
        if 2 * i + 1 < c.len() {
            u_inner += pow * Complex64::new(c[2 * i + 1], 0.0);
        }
        if 2 * i < c.len() {
            v += pow * Complex64::new(c[2 * i], 0.0);
        }
    }
    (a * u_inner, v)
}

fn pade_13(a: &CMatrix, a2: &CMatrix, id: &CMatrix) -> (CMatrix, CMatrix) {
    let n = a.nrows();
    let b = &PADE_13;
    let a4 = a2 * a2;
    let a6 = &a4 * a2;
    let u_high = scale_add(&[(&a6, b[13]), (&a4, b[11]), (a2, b[9])], n);
    let u_low = scale_add(&[(&a6, b[7]), (&a4, b[5]), (a2, b[3]), (id, b[1])], n);
    let u = a * (&a6 * u_high + u_low);
    let v_high = scale_add(&[(&a6, b[12]), (&a4, b[10]), (a2, b[8])], n);
    let v_low = scale_add(&[(&a6, b[6]), (&a4, b[4]), (a2, b[2]), (id, b[0])], n);
    let v = &a6 * v_high + v_low;
    (u, v)
}

/// Fréchet derivative `L(A, E)` of the exponential, read off the upper-right
/// block of `exp([[A, E], [0, A]])`. Also returns `exp(A)`.
pub fn expm_frechet_block(a: &CMatrix, e: &CMatrix) -> (CMatrix, CMatrix) {
    let n = a.nrows();
    let mut big = CMatrix::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(a);
    big.view_mut((n, n), (n, n)).copy_from(a);
    big.view_mut((0, n), (n, n)).copy_from(e);
    let ex = expm(&big);
    (
        ex.view((0, 0), (n, n)).into_owned(),
        ex.view((0, n), (n, n)).into_owned(),
    )
}

/// Action `[L(A,E) v; exp(A) v]` of `exp([[A, E], [0, A]])` on `[0; v]`,
/// evaluated by a Taylor series with scaling, without forming the block matrix.
pub fn expm_frechet_action(
    a: &CMatrix,
    e: &CMatrix,
    v: &DVector<Complex64>,
) -> (DVector<Complex64>, DVector<Complex64>) {
    let nrm = norm1(a) + norm1(e);
    let substeps = (nrm / 0.5).ceil().max(1.0) as usize;
    let inv = Complex64::new(1.0 / substeps as f64, 0.0);
    let a_s = a * inv;
    let e_s = e * inv;
    let mut top = DVector::zeros(v.len());
    let mut bottom = v.clone();
    for _ in 0..substeps {
        let mut term_top = top.clone();
        let mut term_bot = bottom.clone();
        let mut sum_top = top.clone();
        let mut sum_bot = bottom.clone();
        for k in 1..60 {
            let kf = Complex64::new(1.0 / k as f64, 0.0);
            let next_top = (&a_s * &term_top + &e_s * &term_bot) * kf;
            let next_bot = (&a_s * &term_bot) * kf;
            sum_top += &next_top;
            sum_bot += &next_bot;
            let small = next_top.camax() <= 1e-18 * sum_top.camax().max(1e-300)
                && next_bot.camax() <= 1e-18 * sum_bot.camax().max(1e-300);
            term_top = next_top;
            term_bot = next_bot;
            if small {
                break;
            }
        }
        top = sum_top;
        bottom = sum_bot;
    }
    (top, bottom)
}
