//! The clustered dataset consumed by every estimation and inference routine.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Observations grouped into clusters: outcome `y`, a scalar endogenous
/// regressor `x`, exogenous controls `w` (an intercept column is prepended
/// by the constructors unless already supplied), excluded instruments `z`,
/// per-observation cluster labels, and nonnegative weights `v`.
///
/// Rows are stored sorted by cluster so per-cluster ranges are contiguous;
/// `cluster_rows` gives the row range of each cluster.
#[derive(Debug, Clone)]
pub struct ClusteredDataset {
    pub y: DVector<f64>,
    pub x: DVector<f64>,
    pub w: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// Contiguous cluster index per row, nondecreasing.
    pub cluster: Vec<usize>,
    pub v: DVector<f64>,
    cluster_rows: Vec<std::ops::Range<usize>>,
}

impl ClusteredDataset {
    /// Builds a dataset from raw columns. `labels` may be arbitrary integers;
    /// they are mapped to contiguous indices preserving first-appearance
    /// order. Rows are regrouped so each cluster is contiguous (stable, so
    /// within-cluster order is preserved).
    pub fn new(
        y: Vec<f64>,
        x: Vec<f64>,
        w: DMatrix<f64>,
        z: DMatrix<f64>,
        labels: &[i64],
        v: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if x.len() != n || w.nrows() != n || z.nrows() != n || labels.len() != n {
            return Err(Error::InvalidConfig(format!(
                "row count mismatch: y={}, x={}, w={}, z={}, cluster={}",
                n,
                x.len(),
                w.nrows(),
                z.nrows(),
                labels.len()
            )));
        }
        if n == 0 {
            return Err(Error::InvalidConfig("empty dataset".into()));
        }
        let v = v.unwrap_or_else(|| vec![1.0; n]);
        if v.len() != n {
            return Err(Error::InvalidConfig("weight vector length mismatch".into()));
        }
        for (name, col) in [("y", &y), ("x", &x), ("v", &v)] {
            if let Some(pos) = col.iter().position(|e| !e.is_finite()) {
                return Err(Error::NonFinite {
                    column: name.into(),
                    line: pos + 1,
                });
            }
        }
        if w.iter().any(|e| !e.is_finite()) || z.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite {
                column: "w/z".into(),
                line: 0,
            });
        }
        if v.iter().any(|&e| e < 0.0) {
            return Err(Error::InvalidConfig("negative weight".into()));
        }

        // Map labels to contiguous ids in first-appearance order.
        let mut seen: Vec<i64> = Vec::new();
        let mut ids = Vec::with_capacity(n);
        for &l in labels {
            let id = match seen.iter().position(|&s| s == l) {
                Some(p) => p,
                None => {
                    seen.push(l);
                    seen.len() - 1
                }
            };
            ids.push(id);
        }
        let n_clusters = seen.len();

        // Stable regroup by cluster id.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| ids[i]);

        let dw = w.ncols();
        let dz = z.ncols();
        let mut yo = Vec::with_capacity(n);
        let mut xo = Vec::with_capacity(n);
        let mut vo = Vec::with_capacity(n);
        let mut co = Vec::with_capacity(n);
        let mut wo = DMatrix::zeros(n, dw);
        let mut zo = DMatrix::zeros(n, dz);
        for (row, &i) in order.iter().enumerate() {
            yo.push(y[i]);
            xo.push(x[i]);
            vo.push(v[i]);
            co.push(ids[i]);
            for c in 0..dw {
                wo[(row, c)] = w[(i, c)];
            }
            for c in 0..dz {
                zo[(row, c)] = z[(i, c)];
            }
        }

        let mut cluster_rows = Vec::with_capacity(n_clusters);
        let mut start = 0usize;
        for j in 0..n_clusters {
            let end = start + co.iter().filter(|&&c| c == j).count();
            cluster_rows.push(start..end);
            start = end;
        }

        Ok(Self {
            y: DVector::from_vec(yo),
            x: DVector::from_vec(xo),
            w: wo,
            z: zo,
            cluster: co,
            v: DVector::from_vec(vo),
            cluster_rows,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_rows.len()
    }

    pub fn d_w(&self) -> usize {
        self.w.ncols()
    }

    pub fn d_z(&self) -> usize {
        self.z.ncols()
    }

    /// Row range of cluster `j`.
    pub fn cluster_range(&self, j: usize) -> std::ops::Range<usize> {
        self.cluster_rows[j].clone()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.cluster_rows.iter().map(|r| r.len()).collect()
    }

    /// A standalone dataset holding only cluster `j`'s rows (single cluster).
    pub fn restrict_to_cluster(&self, j: usize) -> ClusteredDataset {
        let r = self.cluster_range(j);
        let len = r.len();
        ClusteredDataset {
            y: DVector::from_fn(len, |i, _| self.y[r.start + i]),
            x: DVector::from_fn(len, |i, _| self.x[r.start + i]),
            w: self.w.rows(r.start, len).into_owned(),
            z: self.z.rows(r.start, len).into_owned(),
            cluster: vec![0; len],
            v: DVector::from_fn(len, |i, _| self.v[r.start + i]),
            cluster_rows: vec![0..len],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(labels: &[i64]) -> ClusteredDataset {
        let n = labels.len();
        ClusteredDataset::new(
            (0..n).map(|i| i as f64).collect(),
            vec![0.0; n],
            DMatrix::from_element(n, 1, 1.0),
            DMatrix::from_element(n, 1, 0.5),
            labels,
            None,
        )
        .unwrap()
    }

    #[test]
    fn labels_map_in_first_appearance_order() {
        let d = toy(&[7, 7, -2, 7, -2]);
        assert_eq!(d.n_clusters(), 2);
        // Cluster 0 is label 7 (appeared first), cluster 1 is label -2.
        assert_eq!(d.cluster_sizes(), vec![3, 2]);
        assert_eq!(d.cluster_range(0), 0..3);
        // Within-cluster order preserved: y values of label 7 were 0,1,3.
        assert_eq!(d.y.as_slice()[..3], [0.0, 1.0, 3.0]);
    }

    #[test]
    fn rejects_non_finite() {
        let r = ClusteredDataset::new(
            vec![1.0, f64::NAN],
            vec![0.0, 0.0],
            DMatrix::from_element(2, 1, 1.0),
            DMatrix::from_element(2, 1, 0.0),
            &[0, 1],
            None,
        );
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn restrict_to_cluster_extracts_rows() {
        let d = toy(&[1, 2, 2, 1]);
        let c1 = d.restrict_to_cluster(1);
        assert_eq!(c1.n(), 2);
        assert_eq!(c1.n_clusters(), 1);
        assert_eq!(c1.y.as_slice(), [1.0, 2.0]);
    }
}
