//! Region feature pooling and PCA.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::region::{RegionGrid, RegionId};

/// Per-pixel feature map of one image, stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapTensor {
    pub image_index: u32,
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl FeatureMapTensor {
    pub fn new(
        image_index: u32,
        dim: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        if dim == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("feature map has a zero dimension"));
        }
        if values.len() != dim * height * width {
            return Err(Error::invalid(format!(
                "feature map holds {} values, shape {dim}x{height}x{width} needs {}",
                values.len(),
                dim * height * width
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature at flat offset {i}"
            )));
        }
        Ok(FeatureMapTensor {
            image_index,
            dim,
            height,
            width,
            values,
        })
    }
}

/// One feature vector per region, rows sorted by [`RegionId`].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    ids: Vec<RegionId>,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    /// Builds a matrix from `(id, vector)` rows in any order.
    pub fn from_rows(rows: impl IntoIterator<Item = (RegionId, Vec<f64>)>) -> Result<Self> {
        let mut rows: Vec<(RegionId, Vec<f64>)> = rows.into_iter().collect();
        rows.sort_by_key(|(id, _)| *id);
        let dim = rows.first().map(|(_, v)| v.len()).unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, v) in rows {
            if v.len() != dim {
                return Err(Error::invalid(format!(
                    "row {id} has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            if ids.last() == Some(&id) {
                return Err(Error::invalid(format!("duplicate feature row {id}")));
            }
            ids.push(id);
            data.extend(v);
        }
        Self::from_parts(ids, dim, data)
    }

    /// Builds a matrix from sorted, unique ids and a row-major buffer.
    pub fn from_parts(ids: Vec<RegionId>, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != ids.len() * dim {
            return Err(Error::invalid(format!(
                "{} values for {} rows of dimension {dim}",
                data.len(),
                ids.len()
            )));
        }
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("feature ids must be strictly increasing"));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite feature in row {}",
                ids[i / dim.max(1)]
            )));
        }
        Ok(FeatureMatrix { ids, dim, data })
    }

    /// Concatenates matrices covering disjoint region sets.
    pub fn stack(parts: Vec<FeatureMatrix>) -> Result<Self> {
        let rows = parts.into_iter().flat_map(|m| {
            let dim = m.dim;
            m.ids.into_iter().zip(
                m.data
                    .chunks(dim.max(1))
                    .map(|c| c.to_vec())
                    .collect::<Vec<_>>(),
            )
        });
        Self::from_rows(rows)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[RegionId] {
        &self.ids
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_of(&self, id: RegionId) -> Option<&[f64]> {
        self.ids.binary_search(&id).ok().map(|i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// True when the rows correspond one-to-one, in order, to the grid's regions.
    pub fn is_aligned_with(&self, grid: &RegionGrid) -> bool {
        self.ids.len() == grid.len() && self.ids.iter().zip(grid.regions()).all(|(a, r)| *a == r.id)
    }
}

/// Per-channel mean of the feature map over each region of its image.
pub fn pool_region_features(map: &FeatureMapTensor, grid: &RegionGrid) -> Result<FeatureMatrix> {
    let dims = grid
        .image(map.image_index)
        .ok_or_else(|| Error::invalid(format!("image {} not in grid", map.image_index)))?;
    if dims.height as usize != map.height || dims.width as usize != map.width {
        return Err(Error::invalid(format!(
            "feature map is {}x{}, image {} is {}x{}",
            map.height, map.width, map.image_index, dims.height, dims.width
        )));
    }
    let regions = grid.regions_of_image(map.image_index).unwrap_or(&[]);
    let plane = map.height * map.width;
    let mut data = vec![0.0f64; regions.len() * map.dim];
    for (ri, r) in regions.iter().enumerate() {
        let count = r.pixel_count() as f64;
        for ch in 0..map.dim {
            let channel = &map.values[ch * plane..(ch + 1) * plane];
            let mut sum = 0.0f64;
            for y in r.rows() {
                sum += channel[y * map.width..(y + 1) * map.width][r.cols()]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            data[ri * map.dim + ch] = sum / count;
        }
    }
    FeatureMatrix::from_parts(regions.iter().map(|r| r.id).collect(), map.dim, data)
}

/// Principal components fitted on mean-centered data.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `target_dim × input_dim`, row-major. Rows are orthonormal except
    /// zero padding rows added when more components are requested than exist.
    pub components: Vec<f64>,
    pub explained_variance: Vec<f64>,
    pub input_dim: usize,
    pub target_dim: usize,
}

impl PcaModel {
    pub fn component(&self, k: usize) -> &[f64] {
        &self.components[k * self.input_dim..(k + 1) * self.input_dim]
    }

    /// Maps projected scores back into the input space.
    pub fn reconstruct(&self, scores: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (k, s) in scores.iter().enumerate().take(self.target_dim) {
            for (o, c) in out.iter_mut().zip(self.component(k)) {
                *o += s * c;
            }
        }
        out
    }
}

/// Quality of a PCA fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaStatus {
    Ok,
    /// The data spans fewer directions than requested; trailing components carry zero variance.
    RankDeficient {
        rank: usize,
        requested: usize,
    },
    /// More components requested than input dimensions; zero rows were appended.
    Padded {
        available: usize,
        requested: usize,
    },
}

/// Fits `target_dim` principal components from the covariance eigendecomposition.
///
/// Components are ordered by descending variance (ties by eigen index) and each
/// is signed so that its largest-magnitude entry is positive.
pub fn fit_pca(matrix: &FeatureMatrix, target_dim: usize) -> Result<(PcaModel, PcaStatus)> {
    let n = matrix.len();
    let d = matrix.dim();
    if n < 2 {
        return Err(Error::invalid(format!(
            "PCA needs at least 2 rows, got {n}"
        )));
    }
    if target_dim == 0 || d == 0 {
        return Err(Error::invalid("PCA dimensions must be positive"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(matrix.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered = DMatrix::from_fn(n, d, |i, j| matrix.row(i)[j] - mean[j]);
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let tol = top.max(f64::MIN_POSITIVE) * 1e-10 * d as f64;
    let rank = eig.eigenvalues.iter().filter(|&&v| v > tol).count();

    let kept = target_dim.min(d);
    let mut components = Vec::with_capacity(target_dim * d);
    let mut explained_variance = Vec::with_capacity(target_dim);
    for &k in order.iter().take(kept) {
        let col = eig.eigenvectors.column(k);
        let mut pivot = 0;
        for j in 1..d {
            if col[j].abs() > col[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| sign * v));
        let var = eig.eigenvalues[k];
        explained_variance.push(if var > tol { var } else { 0.0 });
    }
    components.resize(target_dim * d, 0.0);
    explained_variance.resize(target_dim, 0.0);

    let status = if target_dim > d {
        log::warn!("PCA asked for {target_dim} components from {d}-dimensional data; padding");
        PcaStatus::Padded {
            available: d,
            requested: target_dim,
        }
    } else if rank < target_dim {
        log::warn!(
            "PCA data has rank {rank} < {target_dim}; trailing components are zero-variance"
        );
        PcaStatus::RankDeficient {
            rank,
            requested: target_dim,
        }
    } else {
        PcaStatus::Ok
    };
    Ok((
        PcaModel {
            mean,
            components,
            explained_variance,
            input_dim: d,
            target_dim,
        },
        status,
    ))
}

/// Projects rows onto the model's components: `(x - mean) · componentsᵀ`.
pub fn pca_project(model: &PcaModel, matrix: &FeatureMatrix) -> Result<FeatureMatrix> {
    if matrix.dim() != model.input_dim {
        return Err(Error::invalid(format!(
            "matrix dimension {} does not match PCA input dimension {}",
            matrix.dim(),
            model.input_dim
        )));
    }
    let k = model.target_dim;
    let mut data = vec![0.0; matrix.len() * k];
    let mut centered = vec![0.0; model.input_dim];
    for i in 0..matrix.len() {
        for ((c, x), m) in centered.iter_mut().zip(matrix.row(i)).zip(&model.mean) {
            *c = x - m;
        }
        for j in 0..k {
            data[i * k + j] = centered
                .iter()
                .zip(model.component(j))
                .map(|(a, b)| a * b)
                .sum();
        }
    }
    FeatureMatrix::from_parts(matrix.ids().to_vec(), k, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diversity::feature_distance;
    use crate::region::ImageDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ids(n: usize) -> Vec<RegionId> {
        (0..n as u32).map(|i| RegionId::new(0, 0, i)).collect()
    }

    fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_parts(ids(rows.len()), rows[0].len(), rows.concat()).unwrap()
    }

    fn random_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect()
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let grid = RegionGrid::build(&[ImageDims::new(4, 9, 7)], 4).unwrap();
        let mut values = vec![0.25f32; 9 * 7];
        values.extend(vec![-2.0f32; 9 * 7]);
        let map = FeatureMapTensor::new(4, 2, 9, 7, values).unwrap();
        let m = pool_region_features(&map, &grid).unwrap();
        assert_eq!(m.len(), grid.len());
        for i in 0..m.len() {
            assert_eq!(m.row(i), &[0.25, -2.0]);
        }
    }

    #[test]
    fn two_by_two_mean() {
        let grid = RegionGrid::build(&[ImageDims::new(0, 2, 2)], 2).unwrap();
        let map = FeatureMapTensor::new(0, 1, 2, 2, vec![0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(pool_region_features(&map, &grid).unwrap().row(0), &[1.0]);
    }

    #[test]
    fn pooling_matches_naive_loop() {
        let (h, w, d) = (13usize, 10usize, 3usize);
        let grid = RegionGrid::build(&[ImageDims::new(1, h as u32, w as u32)], 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let values: Vec<f32> = (0..d * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let map = FeatureMapTensor::new(1, d, h, w, values.clone()).unwrap();
        let pooled = pool_region_features(&map, &grid).unwrap();
        for (ri, r) in grid.regions().iter().enumerate() {
            for ch in 0..d {
                let mut sum = 0.0f64;
                let mut count = 0usize;
                for y in 0..h {
                    for x in 0..w {
                        if r.rows().contains(&y) && r.cols().contains(&x) {
                            sum += values[ch * h * w + y * w + x] as f64;
                            count += 1;
                        }
                    }
                }
                assert!((pooled.row(ri)[ch] - sum / count as f64).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pooling_rejects_mismatched_map() {
        let grid = RegionGrid::build(&[ImageDims::new(0, 4, 4)], 2).unwrap();
        let map = FeatureMapTensor::new(0, 1, 4, 3, vec![0.0; 12]).unwrap();
        assert!(pool_region_features(&map, &grid).is_err());
    }

    #[test]
    fn points_on_diagonal_line() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, i as f64]).collect();
        let (model, status) = fit_pca(&matrix(&rows), 2).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let c0 = model.component(0);
        assert!((c0[0] - s).abs() < 1e-9 && (c0[1] - s).abs() < 1e-9);
        assert_eq!(model.explained_variance[1], 0.0);
        // sample variance of the projections along (1,1)/√2: 2 * var(0..6)
        assert!((model.explained_variance[0] - 2.0 * 3.5).abs() < 1e-9);
        assert_eq!(
            status,
            PcaStatus::RankDeficient {
                rank: 1,
                requested: 2
            }
        );
    }

    fn assert_orthonormal(model: &PcaModel, rows: usize) {
        for i in 0..rows {
            for j in 0..rows {
                let dot: f64 = model
                    .component(i)
                    .iter()
                    .zip(model.component(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-6, "({i},{j}) -> {dot}");
            }
        }
    }

    #[test]
    fn full_rank_projection_is_isometric() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows = random_rows(&mut rng, 40, 6);
        let m = matrix(&rows);
        let (model, status) = fit_pca(&m, 6).unwrap();
        assert_eq!(status, PcaStatus::Ok);
        assert_orthonormal(&model, 6);
        assert!(model.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        let p = pca_project(&model, &m).unwrap();
        for i in 0..m.len() {
            for j in 0..m.len() {
                let a = feature_distance(m.row(i), m.row(j));
                let b = feature_distance(p.row(i), p.row(j));
                assert!((a - b).abs() < 1e-6);
            }
            let back = model.reconstruct(p.row(i));
            for (x, y) in back.iter().zip(m.row(i)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn subspace_data_reconstructs_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let basis = random_rows(&mut rng, 2, 5);
        let offset: Vec<f64> = (0..5).map(|i| i as f64).collect();
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| {
                let (s, t): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                (0..5)
                    .map(|j| offset[j] + s * basis[0][j] + t * basis[1][j])
                    .collect()
            })
            .collect();
        let m = matrix(&rows);
        let (model, status) = fit_pca(&m, 2).unwrap();
        assert_eq!(status, PcaStatus::Ok);
        let p = pca_project(&model, &m).unwrap();
        for i in 0..m.len() {
            let back = model.reconstruct(p.row(i));
            for (x, y) in back.iter().zip(m.row(i)) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn projected_variance_never_exceeds_input_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows = random_rows(&mut rng, 50, 8);
        let m = matrix(&rows);
        let total = |mat: &FeatureMatrix| -> f64 {
            let n = mat.len() as f64;
            (0..mat.dim())
                .map(|j| {
                    let mean: f64 = (0..mat.len()).map(|i| mat.row(i)[j]).sum::<f64>() / n;
                    (0..mat.len())
                        .map(|i| (mat.row(i)[j] - mean).powi(2))
                        .sum::<f64>()
                        / (n - 1.0)
                })
                .sum()
        };
        let input = total(&m);
        for k in 1..=8 {
            let (model, _) = fit_pca(&m, k).unwrap();
            let proj = total(&pca_project(&model, &m).unwrap());
            assert!(proj <= input + 1e-9);
            let explained: f64 = model.explained_variance.iter().sum();
            assert!((proj - explained).abs() < 1e-6);
            if k == 8 {
                assert!((proj - input).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fit_is_deterministic_with_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = matrix(&random_rows(&mut rng, 25, 4));
        let (a, _) = fit_pca(&m, 3).unwrap();
        let (b, _) = fit_pca(&m, 3).unwrap();
        assert_eq!(a, b);
        for k in 0..3 {
            let c = a.component(k);
            let big = c
                .iter()
                .cloned()
                .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn oversized_target_is_padded() {
        let m = matrix(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]]);
        let (model, status) = fit_pca(&m, 4).unwrap();
        assert_eq!(
            status,
            PcaStatus::Padded {
                available: 2,
                requested: 4
            }
        );
        assert_eq!(model.component(3), &[0.0, 0.0]);
        assert_eq!(pca_project(&model, &m).unwrap().dim(), 4);
    }

    #[test]
    fn fit_rejects_tiny_inputs() {
        let m = matrix(&[vec![1.0, 2.0]]);
        assert!(fit_pca(&m, 1).is_err());
        let two = matrix(&[vec![1.0, 2.0], vec![0.0, 0.0]]);
        assert!(fit_pca(&two, 0).is_err());
        let (model, _) = fit_pca(&two, 1).unwrap();
        assert!(pca_project(&model, &matrix(&[vec![1.0, 2.0, 3.0]])).is_err());
    }

    #[test]
    fn stack_merges_and_sorts() {
        let a = FeatureMatrix::from_rows(vec![(RegionId::new(1, 0, 0), vec![1.0])]).unwrap();
        let b = FeatureMatrix::from_rows(vec![(RegionId::new(0, 0, 0), vec![2.0])]).unwrap();
        let s = FeatureMatrix::stack(vec![a, b.clone()]).unwrap();
        assert_eq!(s.ids()[0], RegionId::new(0, 0, 0));
        assert_eq!(s.row_of(RegionId::new(1, 0, 0)), Some(&[1.0][..]));
        assert!(FeatureMatrix::stack(vec![b.clone(), b]).is_err());
    }
}
