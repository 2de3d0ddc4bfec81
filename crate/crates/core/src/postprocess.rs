//! Converts raw node-wise variational output into symmetric, FDR-thresholded,
//! positive-definite spatially varying networks.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::basis::GpBasis;
use crate::error::{Error, Result};
use crate::vb::FitResult;

/// Post-processed network: symmetric inclusion probabilities, the selection
/// threshold, selected edges, symmetrized rescaled coefficients, and the
/// noise-precision means entering the assembled precision diagonal.
#[derive(Debug, Clone)]
pub struct NetworkEstimate {
    /// Per-FOV p x p symmetric PIP matrices, zero diagonal.
    pub pip: Vec<Array2<f64>>,
    /// Selection threshold κ_α (a sentinel above 1 when nothing passes).
    pub kappa: f64,
    /// Per-FOV selected unordered pairs (i < j), ascending.
    pub edges: Vec<Vec<(usize, usize)>>,
    /// Symmetrized, rescaled coefficient vectors per (i, j, fov index),
    /// keyed with i < j.
    pub u_sym: BTreeMap<(usize, usize, usize), Array1<f64>>,
    /// Posterior precision means, genes x FOVs.
    pub omega_diag: Array2<f64>,
    pub fov_ids: Vec<u32>,
    pub alpha: f64,
    /// How many (node, fov) pairs needed the diagonal-dominance rescale.
    pub rescaled_rows: usize,
}

/// Symmetrized PIP matrices `p̂_ij = min(E δ_ij, E δ_ji)` per FOV.
pub fn pip_matrix(fit: &FitResult) -> Result<Vec<Array2<f64>>> {
    let p = fit.states.len();
    if p == 0 {
        return Err(Error::MissingNode(0));
    }
    let k_count = fit.states[0].n_fovs;
    for (i, st) in fit.states.iter().enumerate() {
        if st.node != i {
            return Err(Error::MissingNode(i));
        }
    }
    let mut out = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut m = Array2::<f64>::zeros((p, p));
        for i in 0..p {
            let st = &fit.states[i];
            for (jj, &j) in st.others.iter().enumerate() {
                // fill the directed value; symmetrize below
                m[[i, j]] = st.p_incl[[jj, k]];
            }
        }
        for i in 0..p {
            for j in (i + 1)..p {
                let v = m[[i, j]].min(m[[j, i]]);
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
            m[[i, i]] = 0.0;
        }
        out.push(m);
    }
    Ok(out)
}

/// Bayesian FDR threshold: sort q = 1 − p̂ ascending, take the longest
/// prefix whose running mean stays at or below α, and cut at that entry's
/// PIP. Returns a sentinel above 1 when no prefix qualifies.
pub fn bfdr_threshold(pips: &[f64], alpha: f64) -> f64 {
    let mut q: Vec<f64> = pips.iter().map(|p| 1.0 - p).collect();
    q.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut running = 0.0;
    let mut best: Option<f64> = None;
    for (t, qv) in q.iter().enumerate() {
        running += qv;
        if running / (t + 1) as f64 <= alpha {
            best = Some(*qv);
        }
    }
    match best {
        Some(qv) => 1.0 - qv,
        None => 1.0 + f64::EPSILON,
    }
}

fn selected_edges(pip: &[Array2<f64>], kappa: f64) -> Vec<Vec<(usize, usize)>> {
    pip.iter()
        .map(|m| {
            let p = m.nrows();
            let mut edges = Vec::new();
            for i in 0..p {
                for j in (i + 1)..p {
                    if m[[i, j]] >= kappa {
                        edges.push((i, j));
                    }
                }
            }
            edges
        })
        .collect()
}

/// ℓ1 norm of a coefficient vector.
fn l1(v: &Array1<f64>) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// For each selected edge, forms ũ = E(ω_ii) E(u) in both directions and
/// keeps the vector with the smaller ℓ1 norm (ties resolve to the
/// low-index direction).
fn symmetrize_edge(
    fit: &FitResult,
    sqrt_eta: &Array1<f64>,
    i: usize,
    j: usize,
    k: usize,
) -> Array1<f64> {
    let tilde = |from: usize, to: usize| -> Array1<f64> {
        let st = &fit.states[from];
        let jj = st
            .predictor_slot(to)
            .expect("predictor index must exist for a distinct gene pair");
        let slot = jj * st.n_fovs + k;
        let omega = st.omega_mean(k);
        // stored means are sqrt(η)-scaled; E(u) divides that back out
        let mut u = st.v_pos_mean[slot].clone();
        for (v, se) in u.iter_mut().zip(sqrt_eta.iter()) {
            *v = omega * *v / se;
        }
        u
    };
    let u_ij = tilde(i, j);
    let u_ji = tilde(j, i);
    if l1(&u_ij) <= l1(&u_ji) {
        u_ij
    } else {
        u_ji
    }
}

/// Public wrapper over the per-edge symmetrization rule.
pub fn symmetrize_coefficients(
    fit: &FitResult,
    basis: &GpBasis,
    edges: &[Vec<(usize, usize)>],
) -> BTreeMap<(usize, usize, usize), Array1<f64>> {
    let sqrt_eta = basis.eigenvalues().mapv(f64::sqrt);
    let mut map = BTreeMap::new();
    for (k, fov_edges) in edges.iter().enumerate() {
        for &(i, j) in fov_edges {
            map.insert((i, j, k), symmetrize_edge(fit, &sqrt_eta, i, j, k));
        }
    }
    map
}

/// Rescales symmetrized coefficients so each assembled precision row is
/// diagonally dominant at every observed location.
///
/// Per node and FOV, `c_ik = a_k Σ_{j≠i} Σ_l |û_ijl|`; rows with `c > 1`
/// are divided down, and an edge takes the larger of its two incident
/// divisors so the matrix stays symmetric. A second pass enforces the
/// dominance bound against E(ω_ii) directly for the rare case E(ω_ii) < 1.
pub fn pd_rescale(
    u_sym: &mut BTreeMap<(usize, usize, usize), Array1<f64>>,
    basis: &GpBasis,
    omega_diag: &Array2<f64>,
    fov_ids: &[u32],
) -> usize {
    let p = omega_diag.nrows();
    let k_count = fov_ids.len();
    let mut rescaled = 0usize;

    let row_sum = |u_sym: &BTreeMap<(usize, usize, usize), Array1<f64>>, i: usize, k: usize| {
        let mut s = 0.0;
        for ((a, b, kk), v) in u_sym.iter() {
            if *kk == k && (*a == i || *b == i) {
                s += l1(v);
            }
        }
        s
    };

    for pass in 0..2 {
        let mut divisors: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for k in 0..k_count {
            let a_k = basis.sup_norms[&fov_ids[k]];
            for i in 0..p {
                let omega = omega_diag[[i, k]];
                // the second pass only tightens rows whose diagonal sits
                // below the unit bound of the first pass
                let bound = if pass == 0 {
                    1.0
                } else if omega < 1.0 {
                    omega * (1.0 - 1e-12)
                } else {
                    continue;
                };
                let c_ik = a_k * row_sum(u_sym, i, k);
                if c_ik > bound {
                    divisors.insert((i, k), c_ik / bound);
                }
            }
        }
        if divisors.is_empty() {
            continue;
        }
        rescaled += divisors.len();
        for ((a, b, k), v) in u_sym.iter_mut() {
            let da = divisors.get(&(*a, *k)).copied().unwrap_or(1.0);
            let db = divisors.get(&(*b, *k)).copied().unwrap_or(1.0);
            let d = da.max(db);
            if d > 1.0 {
                v.mapv_inplace(|x| x / d);
            }
        }
    }
    rescaled
}

/// Full post-processing chain: symmetric PIPs, BFDR threshold, edge
/// selection, coefficient symmetrization, and diagonal-dominance rescaling.
pub fn postprocess(fit: &FitResult, basis: &GpBasis, alpha: f64) -> Result<NetworkEstimate> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must lie in (0,1], got {alpha}"
        )));
    }
    let pip = pip_matrix(fit)?;
    let p = fit.states.len();
    let k_count = fit.states[0].n_fovs;
    let mut flat = Vec::with_capacity(k_count * p * (p - 1) / 2);
    for m in &pip {
        for i in 0..p {
            for j in (i + 1)..p {
                flat.push(m[[i, j]]);
            }
        }
    }
    let kappa = bfdr_threshold(&flat, alpha);
    let edges = selected_edges(&pip, kappa);
    let fov_ids: Vec<u32> = basis.matrices.keys().copied().collect();
    let mut omega_diag = Array2::<f64>::zeros((p, k_count));
    for i in 0..p {
        for k in 0..k_count {
            omega_diag[[i, k]] = fit.states[i].omega_mean(k);
        }
    }
    let mut u_sym = symmetrize_coefficients(fit, basis, &edges);
    let rescaled_rows = pd_rescale(&mut u_sym, basis, &omega_diag, &fov_ids);
    Ok(NetworkEstimate {
        pip,
        kappa,
        edges,
        u_sym,
        omega_diag,
        fov_ids,
        alpha,
        rescaled_rows,
    })
}

/// Per-cell surface values for one selected edge.
#[derive(Debug, Clone)]
pub struct EdgeSurface {
    /// Symmetrized coefficient surface Σ_l û_l B_l(s).
    pub gamma: Array1<f64>,
    /// Off-diagonal precision surface, −gamma.
    pub omega_ij: Array1<f64>,
    /// Partial correlation −ω_ij(s)/sqrt(E ω_ii E ω_jj).
    pub rho_ij: Array1<f64>,
}

/// Evaluates γ, ω_ij, and ρ_ij at every cell of FOV `k` for edge (i, j).
///
/// Unselected pairs yield an error unless `zero_for_unselected` is set, in
/// which case identically-zero surfaces are returned.
pub fn assemble_surfaces(
    estimate: &NetworkEstimate,
    basis: &GpBasis,
    i: usize,
    j: usize,
    k: usize,
    zero_for_unselected: bool,
) -> Result<EdgeSurface> {
    let (a, b) = if i < j { (i, j) } else { (j, i) };
    let fov_id = estimate.fov_ids[k];
    let bmat = &basis.matrices[&fov_id];
    let n = bmat.nrows();
    match estimate.u_sym.get(&(a, b, k)) {
        None => {
            if zero_for_unselected {
                Ok(EdgeSurface {
                    gamma: Array1::zeros(n),
                    omega_ij: Array1::zeros(n),
                    rho_ij: Array1::zeros(n),
                })
            } else {
                Err(Error::EdgeNotSelected { i: a, j: b, fov_id })
            }
        }
        Some(u) => {
            let gamma = bmat.dot(u);
            let omega_ij = gamma.mapv(|g| -g);
            let denom = (estimate.omega_diag[[a, k]] * estimate.omega_diag[[b, k]]).sqrt();
            let rho_ij = omega_ij.mapv(|w| -w / denom);
            Ok(EdgeSurface {
                gamma,
                omega_ij,
                rho_ij,
            })
        }
    }
}

/// Assembles the full p x p precision matrix at one observed cell of one FOV.
pub fn assemble_precision_at(
    estimate: &NetworkEstimate,
    basis: &GpBasis,
    k: usize,
    cell: usize,
) -> Array2<f64> {
    let p = estimate.omega_diag.nrows();
    let fov_id = estimate.fov_ids[k];
    let bmat = &basis.matrices[&fov_id];
    let mut m = Array2::<f64>::zeros((p, p));
    for i in 0..p {
        m[[i, i]] = estimate.omega_diag[[i, k]];
    }
    for ((a, b, kk), u) in estimate.u_sym.iter() {
        if *kk != k {
            continue;
        }
        let mut g = 0.0;
        for (l, ul) in u.iter().enumerate() {
            g += ul * bmat[[cell, l]];
        }
        m[[*a, *b]] = -g;
        m[[*b, *a]] = -g;
    }
    m
}

/// Number of selected edges incident to each gene, per FOV.
pub fn connectivity_degree(estimate: &NetworkEstimate) -> Array2<usize> {
    let p = estimate.omega_diag.nrows();
    let k_count = estimate.fov_ids.len();
    let mut deg = Array2::<usize>::zeros((p, k_count));
    for (k, edges) in estimate.edges.iter().enumerate() {
        for &(i, j) in edges {
            deg[[i, k]] += 1;
            deg[[j, k]] += 1;
        }
    }
    deg
}

/// Connectivity score: 100 × selected edges within the subset / C(|subset|, 2).
pub fn connectivity_score(
    estimate: &NetworkEstimate,
    subset: &[usize],
    k: usize,
) -> Result<f64> {
    if subset.len() < 2 {
        return Err(Error::SubsetTooSmall(subset.len()));
    }
    let members: std::collections::BTreeSet<usize> = subset.iter().copied().collect();
    let possible = members.len() * (members.len() - 1) / 2;
    let hits = estimate.edges[k]
        .iter()
        .filter(|(i, j)| members.contains(i) && members.contains(j))
        .count();
    Ok(100.0 * hits as f64 / possible as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfdr_worked_example() {
        // q = {0.01, 0.05, 0.20}; running means {0.01, 0.03, 0.0867} all ≤ 0.1
        let kappa = bfdr_threshold(&[0.99, 0.95, 0.80], 0.1);
        assert!((kappa - 0.80).abs() < 1e-12);
    }

    #[test]
    fn bfdr_selects_nothing_when_all_weak() {
        let kappa = bfdr_threshold(&[0.5, 0.5, 0.5], 0.1);
        assert!(kappa > 1.0);
    }

    #[test]
    fn bfdr_alpha_one_selects_everything() {
        let pips = [0.9, 0.3, 0.05, 0.6];
        let kappa = bfdr_threshold(&pips, 1.0);
        assert!((kappa - 0.05).abs() < 1e-12);
        assert!(pips.iter().all(|&p| p >= kappa));
    }

    #[test]
    fn bfdr_monotone_in_alpha() {
        let pips: Vec<f64> = (0..50).map(|i| 0.02 * i as f64).collect();
        let mut prev_count = usize::MAX;
        for alpha in [0.2, 0.15, 0.1, 0.05] {
            let kappa = bfdr_threshold(&pips, alpha);
            let count = pips.iter().filter(|&&p| p >= kappa).count();
            assert!(count <= prev_count, "alpha {alpha} added edges");
            prev_count = count;
        }
    }

    #[test]
    fn connectivity_score_reference() {
        // 27 genes, 351 possible edges, 47 selected -> 13.39
        let p = 27;
        let mut edges = Vec::new();
        'outer: for i in 0..p {
            for j in (i + 1)..p {
                edges.push((i, j));
                if edges.len() == 47 {
                    break 'outer;
                }
            }
        }
        let estimate = NetworkEstimate {
            pip: vec![Array2::zeros((p, p))],
            kappa: 0.5,
            edges: vec![edges],
            u_sym: BTreeMap::new(),
            omega_diag: Array2::ones((p, 1)),
            fov_ids: vec![1],
            alpha: 0.1,
            rescaled_rows: 0,
        };
        let all: Vec<usize> = (0..p).collect();
        let cs = connectivity_score(&estimate, &all, 0).unwrap();
        assert!((cs - 100.0 * 47.0 / 351.0).abs() < 1e-12);
        assert!((cs - 13.39).abs() < 0.01);
        // complete graph on a 4-subset that happens to be fully selected
        let cs4 = connectivity_score(&estimate, &[0, 1, 2, 3], 0).unwrap();
        assert_eq!(cs4, 100.0);
        assert!(matches!(
            connectivity_score(&estimate, &[3], 0),
            Err(Error::SubsetTooSmall(1))
        ));
    }

    #[test]
    fn pd_rescale_worked_example() {
        // single coefficient û = 2 with a_k = 1 rescales to exactly 1
        let skeleton = crate::basis::eigenpairs_2d(1.0, 1.0, 0).unwrap();
        let mut matrices = BTreeMap::new();
        matrices.insert(1u32, ndarray::array![[1.0]]);
        let mut sup_norms = BTreeMap::new();
        sup_norms.insert(1u32, 1.0);
        let basis = GpBasis {
            skeleton,
            matrices,
            sup_norms,
        };
        let mut u_sym = BTreeMap::new();
        u_sym.insert((0usize, 1usize, 0usize), ndarray::array![2.0]);
        let omega_diag = Array2::ones((2, 1));
        let n = pd_rescale(&mut u_sym, &basis, &omega_diag, &[1]);
        assert!(n > 0);
        assert_eq!(u_sym[&(0, 1, 0)][0], 1.0);
        // already-dominant coefficients stay untouched
        let mut u_ok = BTreeMap::new();
        u_ok.insert((0usize, 1usize, 0usize), ndarray::array![0.4]);
        pd_rescale(&mut u_ok, &basis, &omega_diag, &[1]);
        assert_eq!(u_ok[&(0, 1, 0)][0], 0.4);
    }

    #[test]
    fn pd_rescale_second_pass_handles_small_diagonal() {
        let skeleton = crate::basis::eigenpairs_2d(1.0, 1.0, 0).unwrap();
        let mut matrices = BTreeMap::new();
        matrices.insert(1u32, ndarray::array![[1.0]]);
        let mut sup_norms = BTreeMap::new();
        sup_norms.insert(1u32, 1.0);
        let basis = GpBasis {
            skeleton,
            matrices,
            sup_norms,
        };
        let mut u_sym = BTreeMap::new();
        u_sym.insert((0usize, 1usize, 0usize), ndarray::array![0.9]);
        // diagonal below 1: the unit bound alone would not give dominance
        let omega_diag = Array2::from_elem((2, 1), 0.5);
        pd_rescale(&mut u_sym, &basis, &omega_diag, &[1]);
        assert!(u_sym[&(0, 1, 0)][0] <= 0.5);
        assert!(u_sym[&(0, 1, 0)][0] > 0.49);
    }

    #[test]
    fn degree_counts_empty_and_simple() {
        let estimate = NetworkEstimate {
            pip: vec![Array2::zeros((4, 4)); 2],
            kappa: 2.0,
            edges: vec![vec![(0, 2), (2, 3)], vec![]],
            u_sym: BTreeMap::new(),
            omega_diag: Array2::ones((4, 2)),
            fov_ids: vec![1, 2],
            alpha: 0.1,
            rescaled_rows: 0,
        };
        let deg = connectivity_degree(&estimate);
        assert_eq!(deg[[2, 0]], 2);
        assert_eq!(deg[[0, 0]], 1);
        assert_eq!(deg[[1, 0]], 0);
        assert!((0..4).all(|g| deg[[g, 1]] == 0));
    }
}
