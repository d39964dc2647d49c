//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending. Each
/// eigenvector is signed so its largest-magnitude entry is positive.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = col.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        vecs.set_column(dst, &(col * sign));
    }
    (vals, vecs)
}

/// `(W W^T)^{-1/2} W`: the closest matrix with orthonormal rows.
pub fn symmetric_decorrelation(w: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen_desc(&(w * w.transpose()));
    let inv_sqrt = DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.max(f64::MIN_POSITIVE).sqrt()));
    &vecs * inv_sqrt * vecs.transpose() * w
}

/// Moore-Penrose pseudo-inverse. Fails on matrices without full column rank.
pub fn pinv_full_column_rank(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * f64::EPSILON * a.nrows().max(a.ncols()) as f64;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < a.ncols() {
        return Err(Error::RankDeficient {
            requested: a.ncols(),
            achievable: rank,
        });
    }
    svd.pseudo_inverse(tol).map_err(|e| Error::InvalidInput(e.to_string()))
}

/// Row means of a matrix.
pub fn row_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.ncols().max(1) as f64;
    DVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.sum() / n))
}

/// Subtracts `mean` from every column.
pub fn center_rows(m: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = m.clone();
    for mut col in c.column_iter_mut() {
        col -= mean;
    }
    c
}

/// Population standard deviation of a slice.
pub fn std_dev(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    (v.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Sample skewness (biased, population moments).
pub fn skewness(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let m2 = v.clone().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = v.map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    if m2 == 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decorrelation_gives_orthonormal_rows() {
        let w = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.5, 1.0, -0.2, 0.0, 0.7, 3.0]);
        let d = symmetric_decorrelation(&w);
        let gram = &d * d.transpose();
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 4.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert_eq!(vals.as_slice(), &[4.0, 1.0]);
        assert_eq!(vecs[(1, 0)], 1.0);
    }

    #[test]
    fn pinv_rejects_rank_deficiency() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(
            pinv_full_column_rank(&a),
            Err(Error::RankDeficient { achievable: 1, .. })
        ));
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let p = pinv_full_column_rank(&b).unwrap();
        assert!((p * b - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn skewness_sign() {
        let v = [0.0, 0.0, 0.0, 10.0];
        assert!(skewness(v.iter().copied()) > 0.0);
        assert!(skewness(v.iter().map(|x| -x)) < 0.0);
        assert_eq!(skewness([1.0, -1.0].iter().copied()), 0.0);
    }
}
