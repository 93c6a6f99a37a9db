use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{config_err, Result};

/// Principal axes of a sample matrix (rows are samples).
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: DVector<f64>,
    /// `n_components × D`, orthonormal rows.
    pub components: DMatrix<f64>,
    /// Sample variance along each component, non-increasing.
    pub variances: Vec<f64>,
    pub total_variance: f64,
}

impl Pca {
    pub fn fit(data: &DMatrix<f64>, n_components: usize) -> Result<Self> {
        let (n, dim) = data.shape();
        if n < 2 {
            return Err(config_err!("PCA needs at least 2 samples, got {n}"));
        }
        if n_components == 0 || n_components > dim {
            return Err(config_err!(
                "cannot take {n_components} principal components of {dim}-dimensional data"
            ));
        }
        let mean = data.row_mean().transpose();
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        let denom = (n - 1) as f64;
        let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / denom;

        // Eigenvectors of the smaller Gram matrix when samples are fewer than
        // dimensions; both routes give the same axes.
        let (values, axes) = if n < dim {
            let gram = &centered * centered.transpose();
            let eig = SymmetricEigen::new(gram);
            let order = descending(&eig.eigenvalues);
            let mut axes = DMatrix::zeros(dim, order.len());
            let mut values = Vec::with_capacity(order.len());
            for (c, &i) in order.iter().enumerate() {
                let lambda = eig.eigenvalues[i].max(0.0);
                let mut v = centered.transpose() * eig.eigenvectors.column(i);
                let norm = v.norm();
                if norm > 0.0 {
                    v /= norm;
                }
                axes.set_column(c, &v);
                values.push(lambda / denom);
            }
            (values, axes)
        } else {
            let cov = centered.transpose() * &centered / denom;
            let eig = SymmetricEigen::new(cov);
            let order = descending(&eig.eigenvalues);
            let mut axes = DMatrix::zeros(dim, order.len());
            for (c, &i) in order.iter().enumerate() {
                axes.set_column(c, &eig.eigenvectors.column(i));
            }
            (order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect(), axes)
        };
        if n_components > axes.ncols() {
            return Err(config_err!(
                "only {} principal components exist for {n} samples",
                axes.ncols()
            ));
        }

        let mut components = DMatrix::zeros(n_components, dim);
        for c in 0..n_components {
            let mut axis = axes.column(c).into_owned();
            let lead = axis.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if lead < 0.0 {
                axis = -axis;
            }
            components.set_row(c, &axis.transpose());
        }
        Ok(Self {
            mean,
            components,
            variances: values[..n_components].to_vec(),
            total_variance,
        })
    }

    /// Projects rows of `data` onto the components.
    pub fn transform(&self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        centered * self.components.transpose()
    }

    /// Share of total variance carried by each component.
    pub fn explained_ratio(&self) -> Vec<f64> {
        self.variances
            .iter()
            .map(|v| if self.total_variance > 0.0 { (v / self.total_variance).clamp(0.0, 1.0) } else { 0.0 })
            .collect()
    }
}

fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}
