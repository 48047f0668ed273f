//! Small dense linear-algebra helpers shared by the kernel, operator and baseline code.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::C64;

/// Dimension up to which eigenpairs are computed with a full dense decomposition.
pub const DENSE_EIGEN_LIMIT: usize = 640;

/// Eigenpairs of a Hermitian matrix sorted by descending eigenvalue.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    /// Columns are unit-norm eigenvectors, in the order of `values`.
    pub vectors: DMatrix<C64>,
}

fn is_real(m: &DMatrix<C64>) -> bool {
    m.iter().all(|z| z.im == 0.0)
}

/// Full eigendecomposition of a Hermitian matrix.
///
/// Ties are broken by the decomposition's original index, and each eigenvector is rotated so
/// that its first non-negligible entry is real and positive, which makes the output
/// reproducible.
pub fn hermitian_eigen(m: &DMatrix<C64>) -> HermitianEigen {
    assert_eq!(m.nrows(), m.ncols(), "eigendecomposition needs a square matrix");
    let n = m.nrows();
    let (raw_values, raw_vectors): (Vec<f64>, DMatrix<C64>) = if is_real(m) {
        let re = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)].re + m[(j, i)].re));
        let eig = SymmetricEigen::new(re);
        (
            eig.eigenvalues.iter().copied().collect(),
            eig.eigenvectors.map(|x| C64::new(x, 0.0)),
        )
    } else {
        let h = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)].conj()));
        let eig = SymmetricEigen::new(h);
        (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
    };
    sort_descending(raw_values, raw_vectors)
}

fn sort_descending(values: Vec<f64>, vectors: DMatrix<C64>) -> HermitianEigen {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let n = vectors.nrows();
    let mut out = DMatrix::zeros(n, order.len());
    for (k, &src) in order.iter().enumerate() {
        let mut col = vectors.column(src).into_owned();
        normalize_phase(col.as_mut_slice());
        out.set_column(k, &col);
    }
    HermitianEigen {
        values: order.iter().map(|&i| values[i]).collect(),
        vectors: out,
    }
}

fn normalize_phase(v: &mut [C64]) {
    let max = v.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if max == 0.0 {
        return;
    }
    if let Some(pivot) = v.iter().find(|z| z.norm() > 1e-6 * max) {
        let rot = pivot.conj() / pivot.norm();
        for z in v.iter_mut() {
            *z *= rot;
        }
    }
}

/// The `k` dominant eigenpairs of a Hermitian positive semi-definite matrix.
///
/// Small matrices use the dense decomposition. Larger ones use block subspace iteration with
/// Rayleigh-Ritz extraction, which is accurate when the spectrum decays quickly past `k`
/// (as it does for the concentrated sinc kernels in this crate).
pub fn top_eigen(m: &DMatrix<C64>, k: usize) -> HermitianEigen {
    let n = m.nrows();
    assert!(k <= n);
    if n <= DENSE_EIGEN_LIMIT {
        let mut full = hermitian_eigen(m);
        full.values.truncate(k.max(1).min(n));
        let keep = full.values.len();
        full.vectors = full.vectors.columns(0, keep).into_owned();
        return full;
    }
    subspace_iteration(m, k)
}

fn subspace_iteration(m: &DMatrix<C64>, k: usize) -> HermitianEigen {
    let n = m.nrows();
    let p = (k + 6).min(n);
    // Deterministic, well-spread starting block.
    let mut q = DMatrix::from_fn(n, p, |i, j| {
        let phase = 2.0 * std::f64::consts::PI * ((i * (2 * j + 1)) as f64 * 0.618_033_988_749_895).fract();
        C64::from_polar(1.0, phase)
    });
    q = q.qr().q();
    let mut values = vec![0.0; p];
    for _ in 0..1000 {
        let z = m * &q;
        let h = q.adjoint() * &z;
        let ritz = hermitian_eigen(&h);
        let new_q = &q * &ritz.vectors;
        let mz = &z * &ritz.vectors;
        let scale = ritz.values[0].abs().max(f64::MIN_POSITIVE);
        let converged = (0..k).all(|i| {
            let resid = mz.column(i) - new_q.column(i) * C64::new(ritz.values[i], 0.0);
            resid.norm() <= 1e-13 * scale
        });
        values = ritz.values;
        if converged {
            q = new_q;
            break;
        }
        q = mz.qr().q();
    }
    let vectors = q.columns(0, k).into_owned();
    values.truncate(k);
    sort_descending(values, vectors)
}

/// Apply `line_op(input_line, output_line)` to every line of a 3-D tensor along `axis`.
///
/// `data` is stored with axis 0 slowest and axis 2 fastest; the output has `out_len` entries
/// along `axis` and the other two extents unchanged.
pub fn map_lines<F>(data: &[C64], dims: [usize; 3], axis: usize, out_len: usize, mut line_op: F) -> Vec<C64>
where
    F: FnMut(&[C64], &mut [C64]),
{
    assert_eq!(data.len(), dims[0] * dims[1] * dims[2]);
    let mut out_dims = dims;
    out_dims[axis] = out_len;
    let mut out = vec![C64::new(0.0, 0.0); out_dims[0] * out_dims[1] * out_dims[2]];
    let in_stride = stride(dims, axis);
    let out_stride = stride(out_dims, axis);
    let mut in_line = vec![C64::new(0.0, 0.0); dims[axis]];
    let mut out_line = vec![C64::new(0.0, 0.0); out_len];
    let (outer_a, outer_b) = other_axes(axis);
    for i in 0..dims[outer_a] {
        for j in 0..dims[outer_b] {
            let mut in_idx = [0usize; 3];
            in_idx[outer_a] = i;
            in_idx[outer_b] = j;
            let in_base = flat(dims, in_idx);
            let out_base = flat(out_dims, in_idx);
            if in_stride == 1 {
                in_line.copy_from_slice(&data[in_base..in_base + dims[axis]]);
            } else {
                for (k, v) in in_line.iter_mut().enumerate() {
                    *v = data[in_base + k * in_stride];
                }
            }
            line_op(&in_line, &mut out_line);
            if out_stride == 1 {
                out[out_base..out_base + out_len].copy_from_slice(&out_line);
            } else {
                for (k, v) in out_line.iter().enumerate() {
                    out[out_base + k * out_stride] = *v;
                }
            }
        }
    }
    out
}

/// Multiply every line along `axis` by `m` (which must have `dims[axis]` columns).
pub fn apply_along_axis(data: &[C64], dims: [usize; 3], axis: usize, m: &DMatrix<C64>) -> Vec<C64> {
    assert_eq!(m.ncols(), dims[axis]);
    map_lines(data, dims, axis, m.nrows(), |x, y| {
        for (r, out) in y.iter_mut().enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for (c, v) in x.iter().enumerate() {
                acc += m[(r, c)] * v;
            }
            *out = acc;
        }
    })
}

fn stride(dims: [usize; 3], axis: usize) -> usize {
    dims[axis + 1..].iter().product()
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        2 => (0, 1),
        _ => panic!("axis out of range"),
    }
}

fn flat(dims: [usize; 3], idx: [usize; 3]) -> usize {
    (idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]
}

/// Inner product `⟨a, b⟩ = Σ a_i conj(b_i)`.
pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x * y.conj()).sum()
}

pub fn norm_sqr(a: &[C64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// Kronecker product of dense complex matrices.
pub fn kron(a: &DMatrix<C64>, b: &DMatrix<C64>) -> DMatrix<C64> {
    a.kronecker(b)
}
