//! Truncated Karhunen–Loève eigenbasis of the modified squared-exponential
//! kernel, evaluated at cell locations.
//!
//! The 1-D kernel `exp{-a(x²+y²) - b(x-y)²}` admits analytic Mercer
//! eigenpairs: with `c = sqrt(a² + 2ab)` and `A = a + b + c`,
//!
//!   η_l   = sqrt(π/A) (b/A)^l
//!   ψ_l(x) = (2c/π)^{1/4} / sqrt(2^l l!) · exp(-c x²) · H_l(sqrt(2c) x)
//!
//! with H_l the physicists' Hermite polynomials; the 2-D basis is the tensor
//! product over axes. Basis columns are stored as B_l(s) = sqrt(η_l) ψ_l(s),
//! so `B Bᵀ` reconstructs the kernel matrix as the truncation degree grows.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::data::SpatialDataset;
use crate::error::{Error, Result};

/// MSE kernel value `exp{-a_gp(‖s‖² + ‖t‖²) - b_gp‖s-t‖²}`.
pub fn mse_kernel(s: [f64; 2], t: [f64; 2], a_gp: f64, b_gp: f64) -> f64 {
    let ns = s[0] * s[0] + s[1] * s[1];
    let nt = t[0] * t[0] + t[1] * t[1];
    let dx = s[0] - t[0];
    let dy = s[1] - t[1];
    (-a_gp * (ns + nt) - b_gp * (dx * dx + dy * dy)).exp()
}

/// Derived scale constants of the 1-D eigenproblem.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelScale {
    pub a_gp: f64,
    pub b_gp: f64,
    /// c = sqrt(a² + 2ab)
    pub c: f64,
    /// A = a + b + c
    pub big_a: f64,
}

impl KernelScale {
    pub fn new(a_gp: f64, b_gp: f64) -> Result<Self> {
        if a_gp <= 0.0 {
            return Err(Error::InvalidShape(format!(
                "analytic eigenpairs require a_gp > 0, got {a_gp}"
            )));
        }
        if b_gp <= 0.0 {
            return Err(Error::InvalidShape(format!(
                "analytic eigenpairs require b_gp > 0, got {b_gp}"
            )));
        }
        let c = (a_gp * a_gp + 2.0 * a_gp * b_gp).sqrt();
        Ok(KernelScale {
            a_gp,
            b_gp,
            c,
            big_a: a_gp + b_gp + c,
        })
    }

    /// Geometric decay ratio η_{l+1}/η_l = b/A.
    pub fn decay_ratio(&self) -> f64 {
        self.b_gp / self.big_a
    }

    /// 1-D eigenvalue η_l.
    pub fn eigenvalue_1d(&self, l: usize) -> f64 {
        (std::f64::consts::PI / self.big_a).sqrt() * self.decay_ratio().powi(l as i32)
    }

    /// 1-D eigenfunction ψ_l(x), orthonormal under Lebesgue measure.
    /// Uses the normalized Hermite recurrence
    /// h̃_{l+1}(u) = u sqrt(2/(l+1)) h̃_l(u) - sqrt(l/(l+1)) h̃_{l-1}(u).
    pub fn eigenfunction_1d(&self, l: usize, x: f64) -> f64 {
        let u = (2.0 * self.c).sqrt() * x;
        let mut h_prev = 0.0f64;
        let mut h = 1.0f64;
        for m in 0..l {
            let m = m as f64;
            let next = u * (2.0 / (m + 1.0)).sqrt() * h - (m / (m + 1.0)).sqrt() * h_prev;
            h_prev = h;
            h = next;
        }
        (2.0 * self.c / std::f64::consts::PI).powf(0.25) * (-self.c * x * x).exp() * h
    }
}

/// One 1-D eigenpair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EigenPair1d {
    pub index: usize,
    pub eigenvalue: f64,
    pub scale: KernelScale,
}

/// Analytic 1-D Mercer eigenpairs up to `max_degree`.
pub fn eigenpairs_1d(a_gp: f64, b_gp: f64, max_degree: usize) -> Result<Vec<EigenPair1d>> {
    let scale = KernelScale::new(a_gp, b_gp)?;
    Ok((0..=max_degree)
        .map(|l| EigenPair1d {
            index: l,
            eigenvalue: scale.eigenvalue_1d(l),
            scale,
        })
        .collect())
}

/// Eigenvalues and 2-D index pairs of the tensor-product basis, without
/// evaluated basis matrices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BasisSkeleton {
    pub scale: KernelScale,
    pub degree: usize,
    /// Length-L eigenvalues, descending; ties broken by (l1,l2) lex order.
    pub eigenvalues: Array1<f64>,
    /// Per-component 1-D degrees (l1, l2), aligned with `eigenvalues`.
    pub pair_indices: Vec<(usize, usize)>,
}

impl BasisSkeleton {
    pub fn truncation(&self) -> usize {
        self.pair_indices.len()
    }
}

/// Enumerates all tensor pairs with total degree ≤ `degree`
/// (L = (degree+1)(degree+2)/2), sorted by descending eigenvalue.
pub fn eigenpairs_2d(a_gp: f64, b_gp: f64, degree: usize) -> Result<BasisSkeleton> {
    let scale = KernelScale::new(a_gp, b_gp)?;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for l1 in 0..=degree {
        for l2 in 0..=(degree - l1) {
            pairs.push((l1, l2));
        }
    }
    // η depends only on l1+l2, so descending eigenvalue order is ascending
    // total degree; ties resolve lexicographically.
    pairs.sort_by_key(|&(l1, l2)| (l1 + l2, l1, l2));
    let eigenvalues = Array1::from_iter(
        pairs
            .iter()
            .map(|&(l1, l2)| scale.eigenvalue_1d(l1) * scale.eigenvalue_1d(l2)),
    );
    Ok(BasisSkeleton {
        scale,
        degree,
        eigenvalues,
        pair_indices: pairs,
    })
}

/// Evaluated KL basis: per-FOV matrices `B^k[n,l] = sqrt(η_l) ψ_l(s_n)` and
/// their entrywise sup-norms.
#[derive(Debug, Clone)]
pub struct GpBasis {
    pub skeleton: BasisSkeleton,
    /// fov_id -> N_k x L matrix of sqrt(η)-scaled eigenfunction values.
    pub matrices: BTreeMap<u32, Array2<f64>>,
    /// fov_id -> max |B^k| entry.
    pub sup_norms: BTreeMap<u32, f64>,
}

impl GpBasis {
    pub fn truncation(&self) -> usize {
        self.skeleton.truncation()
    }

    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.skeleton.eigenvalues
    }
}

/// Evaluates the basis at every (scaled) cell location of the dataset.
pub fn evaluate_basis(dataset: &SpatialDataset, skeleton: &BasisSkeleton) -> Result<GpBasis> {
    let l_total = skeleton.truncation();
    let deg = skeleton.degree;
    let mut matrices = BTreeMap::new();
    let mut sup_norms = BTreeMap::new();
    for fov in &dataset.fovs {
        let n = fov.n_cells();
        // 1-D eigenfunction values per axis, reused across tensor pairs
        let mut psi_x = Array2::<f64>::zeros((n, deg + 1));
        let mut psi_y = Array2::<f64>::zeros((n, deg + 1));
        for r in 0..n {
            for l in 0..=deg {
                psi_x[[r, l]] = skeleton.scale.eigenfunction_1d(l, fov.coordinates[[r, 0]]);
                psi_y[[r, l]] = skeleton.scale.eigenfunction_1d(l, fov.coordinates[[r, 1]]);
            }
        }
        let mut b = Array2::<f64>::zeros((n, l_total));
        let mut sup = 0.0f64;
        for (col, &(l1, l2)) in skeleton.pair_indices.iter().enumerate() {
            let root_eta = skeleton.eigenvalues[col].sqrt();
            for r in 0..n {
                let v = root_eta * psi_x[[r, l1]] * psi_y[[r, l2]];
                if !v.is_finite() {
                    return Err(Error::NonFiniteBasis {
                        fov_id: fov.fov_id,
                        cell: r,
                        component: col,
                    });
                }
                b[[r, col]] = v;
                sup = sup.max(v.abs());
            }
        }
        if sup <= 0.0 {
            return Err(Error::NonFiniteBasis {
                fov_id: fov.fov_id,
                cell: 0,
                component: 0,
            });
        }
        matrices.insert(fov.fov_id, b);
        sup_norms.insert(fov.fov_id, sup);
    }
    Ok(GpBasis {
        skeleton: skeleton.clone(),
        matrices,
        sup_norms,
    })
}
