//! Small dense linear-algebra helpers shared by the simulation engines.
//!
//! Everything here operates on `nalgebra` dynamic matrices over [`C64`].
//! The matrices involved are tiny (single-particle space, gate blocks), so
//! clarity and exactness win over performance.

use nalgebra::{DMatrix, DVector};

use crate::C64;

/// Eigendecomposition of a Hermitian matrix, returned as ascending real
/// eigenvalues and the matching orthonormal eigenvector columns.
///
/// Implemented through the real symmetric embedding
/// `[[Re H, -Im H], [Im H, Re H]]`, whose spectrum doubles that of `H`;
/// complex eigenvectors are recovered by Gram-Schmidt over the embedded
/// pairs. This keeps the hot path inside nalgebra's well-tested real
/// symmetric solver.
pub fn hermitian_eig(h: &DMatrix<C64>) -> (DVector<f64>, DMatrix<C64>) {
    let n = h.nrows();
    assert_eq!(n, h.ncols(), "hermitian_eig needs a square matrix");
    let hermiticity = (h - h.adjoint()).norm();
    assert!(
        hermiticity < 1e-9 * (1.0 + h.norm()),
        "matrix is not Hermitian (|H - H^dag| = {hermiticity:.3e})"
    );

    let mut m = DMatrix::<f64>::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            let z = h[(i, j)];
            m[(i, j)] = z.re;
            m[(i + n, j + n)] = z.re;
            m[(i, j + n)] = -z.im;
            m[(i + n, j)] = z.im;
        }
    }

    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..2 * n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let mut values = Vec::with_capacity(n);
    let mut vectors: Vec<DVector<C64>> = Vec::with_capacity(n);
    for &k in &order {
        if vectors.len() == n {
            break;
        }
        let col = eig.eigenvectors.column(k);
        let mut z = DVector::<C64>::zeros(n);
        for i in 0..n {
            z[i] = C64::new(col[i], col[i + n]);
        }
        // Each embedded eigenvector is either new or the i-multiple of one
        // we already kept; Gram-Schmidt separates the two cases.
        for v in &vectors {
            let overlap: C64 = v.dotc(&z);
            z -= v * overlap;
        }
        let norm = z.norm();
        if norm * norm > 0.25 {
            values.push(eig.eigenvalues[k]);
            vectors.push(z / C64::new(norm, 0.0));
        }
    }
    assert_eq!(
        vectors.len(),
        n,
        "embedded eigenbasis did not reduce to {n} complex vectors"
    );

    let mut v = DMatrix::<C64>::zeros(n, n);
    for (j, col) in vectors.iter().enumerate() {
        v.set_column(j, col);
    }
    (DVector::from_vec(values), v)
}

/// `exp(-i t H)` for Hermitian `H`, via [`hermitian_eig`].
pub fn expm_hermitian(h: &DMatrix<C64>, t: f64) -> DMatrix<C64> {
    let (values, v) = hermitian_eig(h);
    let phases = DVector::from_iterator(
        values.len(),
        values.iter().map(|&lambda| C64::from_polar(1.0, -lambda * t)),
    );
    let mut scaled = v.clone();
    for j in 0..values.len() {
        let p = phases[j];
        scaled.column_mut(j).apply(|x| *x *= p);
    }
    scaled * v.adjoint()
}

/// Determinant of a complex square matrix via LU.
pub fn det(m: &DMatrix<C64>) -> C64 {
    m.clone().lu().determinant()
}

/// Max-norm distance of `m` from unitarity.
pub fn unitarity_defect(m: &DMatrix<C64>) -> f64 {
    let n = m.nrows();
    let gram = m.adjoint() * m;
    let mut defect: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) };
            defect = defect.max((gram[(i, j)] - target).norm());
        }
    }
    defect
}

/// Kronecker product, with `a` on the high-order index block.
pub fn kron(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::<C64>::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let scale = a[(i, j)];
            if scale.norm() == 0.0 {
                continue;
            }
            for k in 0..br {
                for l in 0..bc {
                    out[(i * br + k, j * bc + l)] = scale * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Largest absolute entry of `a - b` after aligning global phase, i.e. the
/// distance between the two matrices as projective unitaries.
pub fn phase_aligned_distance(a: &DMatrix<C64>, b: &DMatrix<C64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    // Align on the largest entry of b to avoid dividing by noise.
    let mut best = (0usize, 0usize);
    let mut best_norm = 0.0;
    for i in 0..b.nrows() {
        for j in 0..b.ncols() {
            if b[(i, j)].norm() > best_norm {
                best_norm = b[(i, j)].norm();
                best = (i, j);
            }
        }
    }
    if best_norm == 0.0 {
        return a.norm();
    }
    let ratio = a[best] / b[best];
    let phase = if ratio.norm() == 0.0 { C64::new(1.0, 0.0) } else { ratio / ratio.norm() };
    let mut dist: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            dist = dist.max((a[(i, j)] - phase * b[(i, j)]).norm());
        }
    }
    dist
}

/// [`phase_aligned_distance`] for state vectors.
pub fn phase_aligned_distance_vec(a: &[C64], b: &[C64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let best = (0..b.len()).max_by(|&i, &j| b[i].norm().total_cmp(&b[j].norm())).unwrap();
    if b[best].norm() == 0.0 {
        return a.iter().map(|v| v.norm()).fold(0.0, f64::max);
    }
    let ratio = a[best] / b[best];
    let phase = if ratio.norm() == 0.0 { C64::new(1.0, 0.0) } else { ratio / ratio.norm() };
    a.iter().zip(b).map(|(x, y)| (x - phase * y).norm()).fold(0.0, f64::max)
}
