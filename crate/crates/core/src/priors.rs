//! Macro-level FOV correlation structure and the structured edge-selection
//! prior calculus.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{FovGeometry, SpatialDataset};
use crate::error::{Error, Result};
use crate::vb::probit::normal_cdf;

/// Prior pieces coupling edge-selection latents across FOVs.
#[derive(Debug, Clone)]
pub struct FovPrior {
    /// K x K unit-diagonal correlation matrix (power-decay, optionally
    /// zeroed across regions, PSD-repaired).
    pub v: Array2<f64>,
    /// Scalar latent-prior scale; prior covariance of a latent K-vector is
    /// sigma_lambda_sq * v.
    pub sigma_lambda_sq: f64,
    /// Scalar prior mean broadcast over FOVs and predictors.
    pub prior_mean: f64,
    /// Optional (p-1) x (p-1) SPD row covariance over predictor genes.
    /// Identity when absent. The per-(i,j) latent update couples FOVs
    /// through `v`; `u` enters marginal summaries through its diagonal.
    pub u: Option<Array2<f64>>,
}

/// Builds `V[k,k'] = rho_decay^{d_kk'}`, zeroing entries across region
/// boundaries, then repairs to PSD with a jittered unit-diagonal rescale.
pub fn build_fov_correlation(
    geometry: &FovGeometry,
    rho_decay: f64,
    region_labels: Option<&BTreeMap<u32, u32>>,
) -> Result<Array2<f64>> {
    if !(rho_decay > 0.0 && rho_decay < 1.0) {
        return Err(Error::InvalidRho(rho_decay));
    }
    let k = geometry.distances.nrows();
    let mut v = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in 0..k {
            v[[i, j]] = rho_decay.powf(geometry.distances[[i, j]]);
        }
        v[[i, i]] = 1.0;
    }
    if let Some(labels) = region_labels {
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let ri = labels.get(&geometry.fov_ids[i]);
                let rj = labels.get(&geometry.fov_ids[j]);
                if ri != rj {
                    v[[i, j]] = 0.0;
                }
            }
        }
    }
    let min_eig = crate::linalg::min_eigenvalue(&v)?;
    if min_eig < 0.0 {
        // add the deficit plus slack to the diagonal, then renormalize back
        // to unit diagonal
        let t = -min_eig + 1e-8;
        let denom = 1.0 + t;
        for i in 0..k {
            for j in 0..k {
                v[[i, j]] = if i == j { 1.0 } else { v[[i, j]] / denom };
            }
        }
    }
    Ok(v)
}

/// Moran's I on per-FOV mean expression with Gaussian-kernel weights
/// `w = exp(-d²/(2 bandwidth²))`, clamped to (0.01, 0.99) so the result is
/// always a usable decay parameter.
pub fn estimate_rho_decay(
    dataset: &SpatialDataset,
    geometry: &FovGeometry,
    bandwidth: f64,
) -> Result<f64> {
    let k = geometry.distances.nrows();
    if k < 3 {
        return Err(Error::DegenerateInput(format!(
            "Moran's I needs at least 3 FOVs, got {k}"
        )));
    }
    if bandwidth <= 0.0 {
        return Err(Error::DegenerateInput("bandwidth must be positive".into()));
    }
    let x = crate::data::fov_mean_expression(dataset);
    let mean = x.sum() / k as f64;
    let dev: Array1<f64> = &x - mean;
    let denom: f64 = dev.iter().map(|d| d * d).sum();
    if denom <= 0.0 {
        return Err(Error::DegenerateInput(
            "per-FOV mean expression is constant".into(),
        ));
    }
    let mut wsum = 0.0;
    let mut cross = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = geometry.distances[[i, j]];
            let w = (-d * d / (2.0 * bandwidth * bandwidth)).exp();
            wsum += w;
            cross += w * dev[i] * dev[j];
        }
    }
    if wsum <= 0.0 {
        return Err(Error::DegenerateInput(
            "spatial weights sum to zero; bandwidth too small".into(),
        ));
    }
    let moran = (k as f64 / wsum) * (cross / denom);
    Ok(moran.clamp(0.01, 0.99))
}

/// Marginal prior inclusion probability `Φ(m / sqrt(sigma_sq + 1))`.
pub fn marginal_inclusion_prob(m: f64, sigma_sq: f64) -> f64 {
    debug_assert!(sigma_sq >= 0.0);
    normal_cdf(m / (sigma_sq + 1.0).sqrt())
}

/// Monte-Carlo estimate of the joint prior inclusion probability
/// `E[Φ(λ_1) Φ(λ_2)]` for a bivariate Gaussian latent pair.
///
/// Returns the estimate and its standard error.
pub fn joint_inclusion_prob(
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
    n_mc: usize,
    seed: u64,
) -> (f64, f64) {
    // 2x2 Cholesky with PSD slack for perfectly correlated latents
    let l11 = cov[0][0].max(0.0).sqrt();
    let l21 = if l11 > 0.0 { cov[1][0] / l11 } else { 0.0 };
    let l22 = (cov[1][1] - l21 * l21).max(0.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = StandardNormal;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for _ in 0..n_mc {
        let z1: f64 = norm.sample(&mut rng);
        let z2: f64 = norm.sample(&mut rng);
        let l1 = mean[0] + l11 * z1;
        let l2 = mean[1] + l21 * z1 + l22 * z2;
        let v = normal_cdf(l1) * normal_cdf(l2);
        sum += v;
        sumsq += v * v;
    }
    let n = n_mc as f64;
    let est = sum / n;
    let var = (sumsq / n - est * est).max(0.0);
    (est, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{fov_geometry, FovBlock, SpatialDataset};
    use ndarray::array;

    fn geometry_from_centroids(cents: &[[f64; 2]]) -> FovGeometry {
        let k = cents.len();
        let mut centroids = Array2::<f64>::zeros((k, 2));
        let mut distances = Array2::<f64>::zeros((k, k));
        for (i, c) in cents.iter().enumerate() {
            centroids[[i, 0]] = c[0];
            centroids[[i, 1]] = c[1];
        }
        for i in 0..k {
            for j in 0..k {
                let dx = cents[i][0] - cents[j][0];
                let dy = cents[i][1] - cents[j][1];
                distances[[i, j]] = (dx * dx + dy * dy).sqrt();
            }
        }
        FovGeometry {
            fov_ids: (1..=k as u32).collect(),
            centroids,
            distances,
        }
    }

    #[test]
    fn correlation_reference_entries() {
        let geo = geometry_from_centroids(&[[0.0, 0.0], [2.0, 0.0]]);
        let v = build_fov_correlation(&geo, 0.6, None).unwrap();
        assert_eq!(v[[0, 0]], 1.0);
        assert!((v[[0, 1]] - 0.36).abs() < 1e-12);
    }

    #[test]
    fn cross_region_entries_are_zero() {
        let geo = geometry_from_centroids(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]);
        let labels: BTreeMap<u32, u32> = [(1, 0), (2, 0), (3, 1)].into_iter().collect();
        let v = build_fov_correlation(&geo, 0.6, Some(&labels)).unwrap();
        assert!(v[[0, 1]] > 0.0);
        assert_eq!(v[[0, 2]], 0.0);
        assert_eq!(v[[1, 2]], 0.0);
        assert!(crate::linalg::min_eigenvalue(&v).unwrap() > -1e-10);
    }

    #[test]
    fn invalid_rho_rejected() {
        let geo = geometry_from_centroids(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(matches!(
            build_fov_correlation(&geo, 1.0, None),
            Err(Error::InvalidRho(_))
        ));
        assert!(build_fov_correlation(&geo, 0.0, None).is_err());
    }

    #[test]
    fn correlation_permutation_equivariance() {
        let cents = [[0.0, 0.0], [1.0, 0.5], [2.5, 0.2], [0.3, 2.0]];
        let geo = geometry_from_centroids(&cents);
        let v = build_fov_correlation(&geo, 0.7, None).unwrap();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<[f64; 2]> = perm.iter().map(|&i| cents[i]).collect();
        let geo_p = geometry_from_centroids(&permuted);
        let v_p = build_fov_correlation(&geo_p, 0.7, None).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                assert!((v_p[[a, b]] - v[[perm[a], perm[b]]]).abs() < 1e-14);
            }
        }
    }

    fn dataset_with_fov_means(means: &[f64], cents: &[[f64; 2]]) -> SpatialDataset {
        let fovs = means
            .iter()
            .zip(cents)
            .enumerate()
            .map(|(i, (&m, &c))| {
                FovBlock::new(
                    i as u32 + 1,
                    array![[c[0], c[1]]],
                    array![[m, m]],
                    vec![i as u64],
                )
            })
            .collect();
        SpatialDataset::new(fovs, vec!["g1".into(), "g2".into()], None).unwrap()
    }

    #[test]
    fn moran_positive_for_linear_gradient() {
        let cents: Vec<[f64; 2]> = (0..9)
            .map(|i| [(i % 3) as f64, (i / 3) as f64])
            .collect();
        let means: Vec<f64> = cents.iter().map(|c| c[0]).collect();
        let ds = dataset_with_fov_means(&means, &cents);
        let geo = fov_geometry(&ds);
        let rho = estimate_rho_decay(&ds, &geo, 1.0).unwrap();
        assert!(rho > 0.2, "gradient should give strong positive I, got {rho}");
    }

    #[test]
    fn moran_near_null_for_iid_means() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 25usize;
        let cents: Vec<[f64; 2]> = (0..k)
            .map(|i| [(i % 5) as f64, (i / 5) as f64])
            .collect();
        let mut acc = 0.0;
        let reps = 200;
        for _ in 0..reps {
            let means: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ds = dataset_with_fov_means(&means, &cents);
            let geo = fov_geometry(&ds);
            acc += estimate_rho_decay(&ds, &geo, 1.0).unwrap();
        }
        let avg = acc / reps as f64;
        // E[I] under independence is -1/(K-1) ~ -0.04; clamp floor is 0.01
        assert!(avg < 0.08, "iid means should clamp near the floor, got {avg}");
    }

    #[test]
    fn moran_rejects_small_k_and_constant_means() {
        let cents = [[0.0, 0.0], [1.0, 0.0]];
        let ds = dataset_with_fov_means(&[1.0, 2.0], &cents);
        let geo = fov_geometry(&ds);
        assert!(matches!(
            estimate_rho_decay(&ds, &geo, 1.0),
            Err(Error::DegenerateInput(_))
        ));
        let cents3 = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        let ds3 = dataset_with_fov_means(&[1.0, 1.0, 1.0], &cents3);
        let geo3 = fov_geometry(&ds3);
        assert!(matches!(
            estimate_rho_decay(&ds3, &geo3, 1.0),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn marginal_inclusion_reference_values() {
        assert_eq!(marginal_inclusion_prob(0.0, 0.0), 0.5);
        assert_eq!(marginal_inclusion_prob(0.0, 17.3), 0.5);
        assert!((marginal_inclusion_prob(1.96, 0.0) - 0.975).abs() < 1e-4);
        assert!(marginal_inclusion_prob(-60.0, 0.0) < 1e-300);
    }

    #[test]
    fn marginal_inclusion_monotonicity() {
        let ms = [-3.0, -1.0, -0.3, 0.0, 0.4, 1.2, 3.0];
        for w in ms.windows(2) {
            assert!(marginal_inclusion_prob(w[0], 0.7) < marginal_inclusion_prob(w[1], 0.7));
        }
        // decreasing in sigma_sq for positive m
        let ss = [0.0, 0.5, 1.0, 3.0, 10.0];
        for w in ss.windows(2) {
            assert!(marginal_inclusion_prob(1.5, w[0]) > marginal_inclusion_prob(1.5, w[1]));
        }
    }

    #[test]
    fn joint_inclusion_independence_and_saturation() {
        let (est, se) = joint_inclusion_prob([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], 200_000, 1);
        assert!((est - 0.25).abs() < 4.0 * se + 1e-3, "est {est} se {se}");
        let (hi, _) = joint_inclusion_prob([10.0, 10.0], [[1.0, 0.2], [0.2, 1.0]], 50_000, 2);
        assert!(hi > 0.999);
    }

    #[test]
    fn joint_inclusion_positive_association() {
        let (ind, se1) = joint_inclusion_prob([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], 200_000, 3);
        let (cor, se2) = joint_inclusion_prob([0.0, 0.0], [[1.0, 0.9], [0.9, 1.0]], 200_000, 3);
        assert!(cor > ind + 0.02, "rho=0.9 should exceed independence");
        // lower bound: product of marginals, allowing 3 standard errors
        let lb = marginal_inclusion_prob(0.0, 1.0).powi(2);
        assert!(cor >= lb - 3.0 * (se1 + se2));
    }
}
