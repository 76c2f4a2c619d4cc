//! Small dense complex linear algebra.
//!
//! System dimensions are tiny (a spin-boson system has d = 2), so everything
//! here is a straightforward row-major implementation over `Vec<C<T>>`. The
//! hot loops of the hierarchy generator use the slice kernels at the bottom
//! of this file directly.

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_traits::{One, Zero};

use crate::error::{DeomError, Result};
use crate::scalar::{cr, Real, C};

/// Square complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix<T: Real> {
    dim: usize,
    data: Vec<C<T>>,
}

impl<T: Real> CMatrix<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![C::zero(); dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m[(i, i)] = C::one();
        }
        m
    }

    pub fn from_vec(dim: usize, data: Vec<C<T>>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(DeomError::Dimension(format!(
                "expected {} elements for a {dim}x{dim} matrix, got {}",
                dim * dim,
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    /// Builds a matrix from real rows.
    pub fn from_real_rows(rows: &[&[f64]]) -> Self {
        let dim = rows.len();
        let mut m = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(row.len(), dim, "row {i} has wrong length");
            for (j, &x) in row.iter().enumerate() {
                m[(i, j)] = cr(T::lit(x));
            }
        }
        m
    }

    pub fn from_diag(diag: &[C<T>]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &x) in diag.iter().enumerate() {
            m[(i, i)] = x;
        }
        m
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[C<T>] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [C<T>] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C<T>> {
        self.data
    }

    pub fn dagger(&self) -> Self {
        let d = self.dim;
        let mut out = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let d = self.dim;
        let mut out = Self::zeros(d);
        for i in 0..d {
            for j in 0..d {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn trace(&self) -> C<T> {
        (0..self.dim).map(|i| self[(i, i)]).fold(C::zero(), |a, b| a + b)
    }

    pub fn scale(&self, s: C<T>) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        crate::scalar::max_abs(&self.data)
    }

    /// Largest elementwise deviation from Hermiticity.
    pub fn hermiticity_defect(&self) -> T {
        let d = self.dim;
        let mut m = T::zero();
        for i in 0..d {
            for j in i..d {
                m = m.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        m
    }

    pub fn is_hermitian(&self, tol: T) -> bool {
        self.hermiticity_defect() <= tol
    }

    pub fn commutator(&self, other: &Self) -> Self {
        &(self * other) - &(other * self)
    }

    /// Tr[self · other].
    pub fn trace_product(&self, other: &Self) -> C<T> {
        trace_product(self.dim, &self.data, &other.data)
    }

    /// Eigen-decomposition of a Hermitian matrix by cyclic complex Jacobi
    /// rotations. Returns ascending eigenvalues and the unitary whose columns
    /// are the eigenvectors.
    pub fn eigh(&self) -> Result<(Vec<T>, CMatrix<T>)> {
        let d = self.dim;
        let scale = self.max_abs().max(T::min_positive_value());
        if !self.is_hermitian(T::lit(1e3) * T::epsilon() * scale) {
            return Err(DeomError::NotHermitian("eigh input".into()));
        }
        let mut a = self.clone();
        let mut v = CMatrix::identity(d);
        let tol = T::epsilon() * scale;
        for _sweep in 0..100 {
            let mut off = T::zero();
            for p in 0..d {
                for q in p + 1..d {
                    off = off.max(a[(p, q)].norm());
                }
            }
            if off <= tol {
                let mut pairs: Vec<(T, usize)> = (0..d).map(|i| (a[(i, i)].re, i)).collect();
                pairs.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(std::cmp::Ordering::Equal));
                let mut vs = CMatrix::zeros(d);
                for (new, &(_, old)) in pairs.iter().enumerate() {
                    for i in 0..d {
                        vs[(i, new)] = v[(i, old)];
                    }
                }
                return Ok((pairs.into_iter().map(|p| p.0).collect(), vs));
            }
            for p in 0..d {
                for q in p + 1..d {
                    let apq = a[(p, q)];
                    let r = apq.norm();
                    if r <= tol * T::lit(1e-3) {
                        continue;
                    }
                    let phase = apq / r;
                    let app = a[(p, p)].re;
                    let aqq = a[(q, q)].re;
                    let theta = (aqq - app) / (r + r);
                    let t = theta.signum() / (theta.abs() + (T::one() + theta * theta).sqrt());
                    let c = T::one() / (T::one() + t * t).sqrt();
                    let s = t * c;
                    // J = diag(1, e^{-i phi}) R restricted to (p, q).
                    let jpp = cr(c);
                    let jpq = cr(s);
                    let jqp = phase.conj() * (-s);
                    let jqq = phase.conj() * c;
                    for i in 0..d {
                        let aip = a[(i, p)];
                        let aiq = a[(i, q)];
                        a[(i, p)] = aip * jpp + aiq * jqp;
                        a[(i, q)] = aip * jpq + aiq * jqq;
                        let vip = v[(i, p)];
                        let viq = v[(i, q)];
                        v[(i, p)] = vip * jpp + viq * jqp;
                        v[(i, q)] = vip * jpq + viq * jqq;
                    }
                    for j in 0..d {
                        let apj = a[(p, j)];
                        let aqj = a[(q, j)];
                        a[(p, j)] = jpp.conj() * apj + jqp.conj() * aqj;
                        a[(q, j)] = jpq.conj() * apj + jqq.conj() * aqj;
                    }
                    a[(p, q)] = C::zero();
                    a[(q, p)] = C::zero();
                }
            }
        }
        Err(DeomError::NoConvergence {
            what: "Jacobi eigensolver".into(),
            detail: "off-diagonal mass did not vanish within 100 sweeps".into(),
        })
    }

    /// exp(s · H) for Hermitian H and real s, through the eigenbasis.
    pub fn expm_hermitian(&self, s: T) -> Result<Self> {
        let (vals, v) = self.eigh()?;
        let diag: Vec<C<T>> = vals.iter().map(|&e| cr((s * e).exp())).collect();
        Ok(&(&v * &CMatrix::from_diag(&diag)) * &v.dagger())
    }

    /// exp(-i H t) for Hermitian H.
    pub fn unitary_propagator(&self, t: T) -> Result<Self> {
        let (vals, v) = self.eigh()?;
        let diag: Vec<C<T>> = vals.iter().map(|&e| C::new((e * t).cos(), -(e * t).sin())).collect();
        Ok(&(&v * &CMatrix::from_diag(&diag)) * &v.dagger())
    }
}

impl<T: Real> Index<(usize, usize)> for CMatrix<T> {
    type Output = C<T>;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C<T> {
        &self.data[i * self.dim + j]
    }
}

impl<T: Real> IndexMut<(usize, usize)> for CMatrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C<T> {
        &mut self.data[i * self.dim + j]
    }
}

impl<'a, T: Real> Mul<&'a CMatrix<T>> for &'a CMatrix<T> {
    type Output = CMatrix<T>;
    fn mul(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        assert_eq!(self.dim, rhs.dim);
        let mut out = CMatrix::zeros(self.dim);
        gemm_acc(self.dim, C::one(), &self.data, &rhs.data, &mut out.data);
        out
    }
}

impl<'a, T: Real> Add<&'a CMatrix<T>> for &'a CMatrix<T> {
    type Output = CMatrix<T>;
    fn add(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        assert_eq!(self.dim, rhs.dim);
        CMatrix {
            dim: self.dim,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl<'a, T: Real> Sub<&'a CMatrix<T>> for &'a CMatrix<T> {
    type Output = CMatrix<T>;
    fn sub(self, rhs: &CMatrix<T>) -> CMatrix<T> {
        assert_eq!(self.dim, rhs.dim);
        CMatrix {
            dim: self.dim,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// LU factorization with partial pivoting of a general complex matrix.
#[derive(Clone, Debug)]
pub struct Lu<T: Real> {
    n: usize,
    lu: Vec<C<T>>,
    perm: Vec<usize>,
}

impl<T: Real> Lu<T> {
    /// Factors the n×n row-major matrix `a`. A pivot below
    /// `rel_tol · max|a|` is reported as singular.
    pub fn factor(n: usize, a: &[C<T>], rel_tol: T) -> Result<Self> {
        assert_eq!(a.len(), n * n);
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = crate::scalar::max_abs(a);
        let floor = rel_tol * scale;
        for col in 0..n {
            let (piv, pmax) = (col..n)
                .map(|r| (r, lu[r * n + col].norm()))
                .fold((col, T::zero()), |acc, x| if x.1 > acc.1 { x } else { acc });
            if pmax <= floor || pmax == T::zero() {
                return Err(DeomError::Singular(format!(
                    "pivot {pmax:e} at column {col} below {floor:e}"
                )));
            }
            if piv != col {
                for j in 0..n {
                    lu.swap(piv * n + j, col * n + j);
                }
                perm.swap(piv, col);
            }
            let inv: C<T> = C::<T>::one() / lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] * inv;
                lu[r * n + col] = f;
                if f != C::zero() {
                    for j in col + 1..n {
                        let u = lu[col * n + j];
                        lu[r * n + j] -= f * u;
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    /// Solves A x = b in place.
    pub fn solve_in_place(&self, b: &mut [C<T>]) {
        let n = self.n;
        let mut x: Vec<C<T>> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        b.copy_from_slice(&x);
    }
}

/// Eigenvalues of a real symmetric tridiagonal matrix with zero diagonal and
/// the given off-diagonal, ascending.
pub fn symmetric_tridiagonal_eigenvalues<T: Real>(off: &[T]) -> Result<Vec<T>> {
    let n = off.len() + 1;
    let mut m = CMatrix::<T>::zeros(n);
    for (i, &x) in off.iter().enumerate() {
        m[(i, i + 1)] = cr(x);
        m[(i + 1, i)] = cr(x);
    }
    Ok(m.eigh()?.0)
}

// ---------------------------------------------------------------------------
// slice kernels on d×d row-major blocks

/// out += alpha · a · b
#[inline]
pub fn gemm_acc<T: Real>(d: usize, alpha: C<T>, a: &[C<T>], b: &[C<T>], out: &mut [C<T>]) {
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k] * alpha;
            if aik == C::zero() {
                continue;
            }
            let brow = &b[k * d..k * d + d];
            let orow = &mut out[i * d..i * d + d];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

/// out += alpha · (a x a)
#[inline]
pub fn conj_acc<T: Real>(d: usize, alpha: C<T>, a: &[C<T>], x: &[C<T>], out: &mut [C<T>]) {
    for i in 0..d {
        for l in 0..d {
            let mut ax = C::<T>::zero();
            for k in 0..d {
                ax += a[i * d + k] * x[k * d + l];
            }
            if ax == C::<T>::zero() {
                continue;
            }
            let ax = ax * alpha;
            let orow = &mut out[i * d..i * d + d];
            for (o, &alj) in orow.iter_mut().zip(&a[l * d..l * d + d]) {
                *o += ax * alj;
            }
        }
    }
}

/// out += left · (a x) - right · (x a)
#[inline]
pub fn sandwich_acc<T: Real>(d: usize, left: C<T>, right: C<T>, a: &[C<T>], x: &[C<T>], out: &mut [C<T>]) {
    if left != C::zero() {
        gemm_acc(d, left, a, x, out);
    }
    if right != C::zero() {
        gemm_acc(d, -right, x, a, out);
    }
}

#[inline]
pub fn trace_of<T: Real>(d: usize, a: &[C<T>]) -> C<T> {
    (0..d).map(|i| a[i * d + i]).fold(C::zero(), |s, z| s + z)
}

/// Tr[a · b]
#[inline]
pub fn trace_product<T: Real>(d: usize, a: &[C<T>], b: &[C<T>]) -> C<T> {
    let mut s = C::zero();
    for i in 0..d {
        for k in 0..d {
            s += a[i * d + k] * b[k * d + i];
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_hermitian(d: usize, seed: u64) -> CMatrix<f64> {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
        };
        let mut m = CMatrix::zeros(d);
        for i in 0..d {
            m[(i, i)] = cr(next());
            for j in i + 1..d {
                let z = C::new(next(), next());
                m[(i, j)] = z;
                m[(j, i)] = z.conj();
            }
        }
        m
    }

    #[test]
    fn eigh_reconstructs() {
        for d in [1, 2, 3, 5, 8] {
            let h = random_hermitian(d, 7 + d as u64);
            let (vals, v) = h.eigh().unwrap();
            let back = &(&v * &CMatrix::from_diag(&vals.iter().map(|&x| cr(x)).collect::<Vec<_>>())) * &v.dagger();
            assert!((&back - &h).max_abs() < 1e-12, "d={d}");
            assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            let unit = &v.dagger() * &v;
            assert!((&unit - &CMatrix::identity(d)).max_abs() < 1e-12);
        }
    }

    #[test]
    fn eigh_rejects_non_hermitian() {
        let m = CMatrix::<f64>::from_real_rows(&[&[0.0, 1.0], &[0.0, 0.0]]);
        assert!(matches!(m.eigh(), Err(DeomError::NotHermitian(_))));
    }

    #[test]
    fn pauli_x_exponential() {
        let sx = CMatrix::<f64>::from_real_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let e = sx.expm_hermitian(-0.7).unwrap();
        assert!((e[(0, 0)].re - 0.7f64.cosh()).abs() < 1e-14);
        assert!((e[(0, 1)].re + 0.7f64.sinh()).abs() < 1e-14);
        let u = sx.unitary_propagator(0.3).unwrap();
        assert!((u[(0, 1)] - C::new(0.0, -0.3f64.sin())).norm() < 1e-14);
    }

    #[test]
    fn lu_solves_and_detects_singularity() {
        let n = 4;
        let h = random_hermitian(n, 3);
        let a: Vec<C<f64>> = h
            .as_slice()
            .iter()
            .enumerate()
            .map(|(k, &z)| if k % (n + 1) == 0 { z + C::new(2.0, 0.5) } else { z })
            .collect();
        let x0: Vec<C<f64>> = (0..n).map(|i| C::new(i as f64, 1.0 - i as f64)).collect();
        let mut b = vec![C::zero(); n];
        for i in 0..n {
            for j in 0..n {
                b[i] += a[i * n + j] * x0[j];
            }
        }
        let lu = Lu::factor(n, &a, 1e-14).unwrap();
        lu.solve_in_place(&mut b);
        for i in 0..n {
            assert!((b[i] - x0[i]).norm() < 1e-12);
        }
        let sing = vec![C::new(1.0, 0.0); 4];
        assert!(matches!(Lu::factor(2, &sing, 1e-14), Err(DeomError::Singular(_))));
    }

    #[test]
    fn tridiagonal_eigenvalues_pair_up() {
        let off = [1.0, 0.5, 0.25];
        let ev = symmetric_tridiagonal_eigenvalues::<f64>(&off).unwrap();
        assert_eq!(ev.len(), 4);
        assert!((ev[0] + ev[3]).abs() < 1e-14);
        assert!((ev[1] + ev[2]).abs() < 1e-14);
    }

    proptest::proptest! {
        #[test]
        fn eigh_and_propagator_for_random_hermitian(d in 1usize..7, seed in 0u64..10_000, t in -5.0f64..5.0) {
            let h = random_hermitian(d, seed);
            let (vals, v) = h.eigh().unwrap();
            let diag = CMatrix::from_diag(&vals.iter().map(|&x| cr(x)).collect::<Vec<_>>());
            let back = &(&v * &diag) * &v.dagger();
            proptest::prop_assert!((&back - &h).max_abs() < 1e-11);
            let u = h.unitary_propagator(t).unwrap();
            let id = &u.dagger() * &u;
            proptest::prop_assert!((&id - &CMatrix::identity(d)).max_abs() < 1e-11);
        }
    }
}
