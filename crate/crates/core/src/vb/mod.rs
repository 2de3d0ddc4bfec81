//! Augmented mean-field variational coordinate ascent for the node-wise
//! spatial graphical regressions, run independently (and in parallel) per
//! response gene.
//!
//! Per response node i, the factors are: a Gamma factor on each FOV's
//! residual precision, a Gaussian factor on each predictor's latent
//! selection K-vector, a two-branch Gaussian factor on the sqrt(η)-scaled
//! coefficient vector conditional on the selection latent's sign, and a
//! Bernoulli factor on the sign itself. All updates are closed form; damping
//! mixes each fresh value with the previous sweep's.

pub mod probit;

use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::basis::GpBasis;
use crate::data::{Hyperparams, SpatialDataset};
use crate::error::{Error, Result};
use crate::linalg;
use crate::priors::FovPrior;
use probit::{expected_z, inv_logit, logit_phi_stable};

/// Inclusion probabilities are kept inside [PROB_FLOOR, 1 - PROB_FLOOR] so
/// logits stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

/// Full recomputation period (in sweeps) for incrementally maintained
/// fitted-value caches.
const REFRESH_PERIOD: usize = 25;

/// Design pieces for one (predictor gene, FOV) pair, shared read-only by all
/// node regressions.
#[derive(Debug, Clone)]
pub struct DesignBlock {
    /// N_k x L matrix with columns Y_j ⊙ B_l (sqrt(η)-scaled basis).
    pub design_b: Array2<f64>,
    /// Gram of `design_b`; equals T (HᵀH) T for the eigenfunction design H
    /// and T = diag(sqrt(η)).
    pub gram_b: Array2<f64>,
    /// HᵀH itself, used in trace terms of the noise update.
    pub gram_psi: Array2<f64>,
    /// Eigenvectors / eigenvalues of `gram_b` (ascending order).
    pub q: Array2<f64>,
    pub dvals: Array1<f64>,
    /// diag(sqrt(η)) · q; maps eigen coordinates back to the scaled-
    /// coefficient parametrization.
    pub w: Array2<f64>,
}

/// All design blocks for a dataset/basis pair, indexed by (gene, fov index).
#[derive(Debug)]
pub struct DesignSet {
    pub blocks: Vec<DesignBlock>,
    pub n_genes: usize,
    pub n_fovs: usize,
    /// Per-FOV responses: responses[k] column j is gene j in FOV k.
    pub responses: Vec<Array2<f64>>,
    pub fov_ids: Vec<u32>,
    /// sqrt of the basis eigenvalues.
    pub sqrt_eta: Array1<f64>,
    pub eta: Array1<f64>,
}

impl DesignSet {
    /// Builds every per-(gene, FOV) design block once. The dataset must
    /// already be coordinate-scaled, matching the basis evaluation.
    pub fn build(dataset: &SpatialDataset, basis: &GpBasis) -> Result<DesignSet> {
        let p = dataset.n_genes();
        let k_count = dataset.n_fovs();
        let eta = basis.eigenvalues().clone();
        let sqrt_eta = eta.mapv(f64::sqrt);
        let l = eta.len();
        let mut responses = Vec::with_capacity(k_count);
        let mut fov_ids = Vec::with_capacity(k_count);
        for fov in &dataset.fovs {
            responses.push(fov.expression.clone());
            fov_ids.push(fov.fov_id);
        }
        // (gene, fov) blocks in parallel; indexes j * K + k
        let blocks: Vec<DesignBlock> = (0..p * k_count)
            .into_par_iter()
            .map(|slot| -> Result<DesignBlock> {
                let j = slot / k_count;
                let k = slot % k_count;
                let fov = &dataset.fovs[k];
                let b = &basis.matrices[&fov.fov_id];
                let n = fov.n_cells();
                let mut design_b = Array2::<f64>::zeros((n, l));
                for r in 0..n {
                    let yj = fov.expression[[r, j]];
                    for c in 0..l {
                        design_b[[r, c]] = yj * b[[r, c]];
                    }
                }
                let gram_b = design_b.t().dot(&design_b);
                let mut gram_psi = gram_b.clone();
                for a in 0..l {
                    for c in 0..l {
                        gram_psi[[a, c]] /= sqrt_eta[a] * sqrt_eta[c];
                    }
                }
                let (dvals_raw, q) = linalg::sym_eigh(&gram_b)?;
                let dvals = dvals_raw.mapv(|v| v.max(0.0));
                let mut w = q.clone();
                for a in 0..l {
                    for c in 0..l {
                        w[[a, c]] *= sqrt_eta[a];
                    }
                }
                Ok(DesignBlock {
                    design_b,
                    gram_b,
                    gram_psi,
                    q,
                    dvals,
                    w,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DesignSet {
            blocks,
            n_genes: p,
            n_fovs: k_count,
            responses,
            fov_ids,
            sqrt_eta,
            eta,
        })
    }

    pub fn block(&self, gene: usize, fov_idx: usize) -> &DesignBlock {
        &self.blocks[gene * self.n_fovs + fov_idx]
    }

    pub fn n_cells(&self, fov_idx: usize) -> usize {
        self.responses[fov_idx].nrows()
    }
}

/// Variational state of one node regression.
#[derive(Debug, Clone)]
pub struct NodeVariationalState {
    pub node: usize,
    /// Predictor gene indices (all genes except `node`), ascending.
    pub others: Vec<usize>,
    pub n_fovs: usize,
    /// Gamma factor per FOV.
    pub omega_shape: Array1<f64>,
    pub omega_rate: Array1<f64>,
    /// Per-predictor latent mean K-vectors, rows = predictor slot.
    pub lambda_mean: Array2<f64>,
    /// Shared latent covariance (identical across predictors).
    pub lambda_cov: Array2<f64>,
    /// Scaled-coefficient posterior mean per (predictor slot, fov):
    /// index slot = jj * n_fovs + k.
    pub v_pos_mean: Vec<Array1<f64>>,
    pub v_pos_cov: Vec<Array2<f64>>,
    /// Prior (selection-off) covariance diagonal sigma_gp_sq * η.
    pub v_neg_cov_diag: Array1<f64>,
    /// Inclusion probabilities, (p-1) x K.
    pub p_incl: Array2<f64>,
    /// Expected selection latents, (p-1) x K.
    pub ez: Array2<f64>,
}

impl NodeVariationalState {
    pub fn omega_mean(&self, k: usize) -> f64 {
        self.omega_shape[k] / self.omega_rate[k]
    }

    fn slot(&self, jj: usize, k: usize) -> usize {
        jj * self.n_fovs + k
    }

    /// Position of gene `j` among this node's predictors.
    pub fn predictor_slot(&self, j: usize) -> Option<usize> {
        self.others.iter().position(|&g| g == j)
    }
}

/// Per-node transient quantities maintained across a sweep.
#[derive(Debug)]
pub struct WorkBuffers {
    pub node: usize,
    /// Fitted values H μ̂ per (predictor slot, fov).
    pub yhat: Vec<Array1<f64>>,
    /// Per-FOV running sums Σ_j p_j ŷ_j.
    pub gtilde: Vec<Array1<f64>>,
}

impl WorkBuffers {
    /// Recomputes every fitted value from the current means (the periodic
    /// full refresh bounding incremental drift).
    fn refresh(&mut self, designs: &DesignSet, state: &NodeVariationalState) {
        let k_count = state.n_fovs;
        for (jj, &j) in state.others.iter().enumerate() {
            for k in 0..k_count {
                let slot = state.slot(jj, k);
                let block = designs.block(j, k);
                let m_b = u_scale(&state.v_pos_mean[slot], &designs.sqrt_eta);
                self.yhat[slot] = block.design_b.dot(&m_b);
            }
        }
        for k in 0..k_count {
            self.rebuild_gtilde(state, k);
        }
    }

    /// Rebuilds one FOV's running sum from the current inclusion
    /// probabilities and fitted values.
    fn rebuild_gtilde(&mut self, state: &NodeVariationalState, k: usize) {
        let n = self.gtilde[k].len();
        let mut g = Array1::<f64>::zeros(n);
        for jj in 0..state.others.len() {
            let slot = state.slot(jj, k);
            let p = state.p_incl[[jj, k]];
            g.scaled_add(p, &self.yhat[slot]);
        }
        self.gtilde[k] = g;
    }
}

/// Coefficient mean in the unscaled-u parametrization (divides out sqrt(η)).
fn u_scale(v_mean: &Array1<f64>, sqrt_eta: &Array1<f64>) -> Array1<f64> {
    let mut m = v_mean.clone();
    for (mi, se) in m.iter_mut().zip(sqrt_eta.iter()) {
        *mi /= se;
    }
    m
}

/// Builds the per-node design view and empty buffers.
///
/// Design columns follow the notational convention
/// `H[n, l] = Y_j(s_n) ψ_l(s_n)`; the sqrt(η)-scaled variant used in the
/// solver is `design_b`.
pub fn build_design(designs: &DesignSet, node: usize) -> WorkBuffers {
    let k_count = designs.n_fovs;
    let pm1 = designs.n_genes - 1;
    let mut yhat = Vec::with_capacity(pm1 * k_count);
    for _ in 0..pm1 {
        for k in 0..k_count {
            yhat.push(Array1::<f64>::zeros(designs.n_cells(k)));
        }
    }
    let gtilde = (0..k_count)
        .map(|k| Array1::<f64>::zeros(designs.n_cells(k)))
        .collect();
    WorkBuffers {
        node,
        yhat,
        gtilde,
    }
}

/// The eigenfunction design matrix `H[n,l] = Y_j ψ_l(s_n)` for one block
/// (test and diagnostic use; the engine works with the scaled variant).
pub fn eigenfunction_design(block: &DesignBlock, sqrt_eta: &Array1<f64>) -> Array2<f64> {
    let mut h = block.design_b.clone();
    for mut row in h.rows_mut() {
        for (v, se) in row.iter_mut().zip(sqrt_eta.iter()) {
            *v /= se;
        }
    }
    h
}

/// Closed-form conditional update of the scaled coefficient vector given the
/// selection latent's sign.
#[derive(Debug, Clone)]
pub struct VUpdate {
    /// Posterior mean under z > 0 (zero under z < 0).
    pub mean_pos: Array1<f64>,
    /// Posterior covariance under z > 0.
    pub cov_pos: Array2<f64>,
    /// Quadratic form μ̂ᵀ Σ̂⁻¹ μ̂ under z > 0.
    pub quad: f64,
    /// (log det Σ̂(z>0) − log det Σ̂(z<0)) / 2.
    pub half_logdet_diff: f64,
}

/// Conditional coefficient update:
/// `Σ̂(z>0) = [Eω HᵀH + σ_gp⁻² η̂⁻¹]⁻¹`, `μ̂(z>0) = Σ̂ Eω Hᵀ E[R]`, with the
/// z<0 branch fixed at the prior. Solved in the eigenbasis of the scaled
/// Gram so only diagonal shifts depend on Eω.
pub fn update_v_given_z(
    block: &DesignBlock,
    eta: &Array1<f64>,
    e_omega: f64,
    sigma_gp_sq: f64,
    e_resid: &Array1<f64>,
) -> VUpdate {
    let l = eta.len();
    let inv_sg2 = 1.0 / sigma_gp_sq;
    // rhs in the scaled parametrization: T Hᵀ E[R] = design_bᵀ E[R]
    let rhs_b = block.design_b.t().dot(e_resid) * e_omega;
    let wr = block.q.t().dot(&rhs_b);
    let mut dp = Array1::<f64>::zeros(l);
    let mut quad = 0.0;
    let mut half_logdet = 0.0;
    for i in 0..l {
        let denom = e_omega * block.dvals[i] + inv_sg2;
        dp[i] = 1.0 / denom;
        quad += wr[i] * wr[i] / denom;
        half_logdet -= 0.5 * (sigma_gp_sq * denom).ln();
    }
    // mean in scaled coordinates: W (dp ⊙ wr)
    let scaled = &wr * &dp;
    let mean_pos = block.w.dot(&scaled);
    // covariance: W diag(dp) Wᵀ
    let mut wd = block.w.clone();
    for a in 0..l {
        for c in 0..l {
            wd[[a, c]] *= dp[c];
        }
    }
    let cov_pos = wd.dot(&block.w.t());
    VUpdate {
        mean_pos,
        cov_pos,
        quad,
        half_logdet_diff: half_logdet,
    }
}

/// Latent selection K-vector update:
/// `Σ = (I + σ_Λ⁻² V⁻¹)⁻¹`, `mean = Σ (E[Z] + σ_Λ⁻² V⁻¹ m)`.
pub fn update_lambda(
    ez: &Array1<f64>,
    v: &Array2<f64>,
    sigma_lambda_sq: f64,
    prior_mean: f64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let pieces = LambdaPieces::new(v, sigma_lambda_sq, prior_mean)?;
    Ok((pieces.mean(ez), pieces.cov))
}

/// Precomputed latent-update pieces (constant across sweeps and predictors).
#[derive(Debug, Clone)]
struct LambdaPieces {
    cov: Array2<f64>,
    /// Σ σ_Λ⁻² V⁻¹ m 1 (constant prior pull).
    prior_pull: Array1<f64>,
}

impl LambdaPieces {
    fn new(v: &Array2<f64>, sigma_lambda_sq: f64, prior_mean: f64) -> Result<Self> {
        let k = v.nrows();
        let chol_v = linalg::cholesky(v)
            .or_else(|_| {
                let mut vj = v.clone();
                for i in 0..k {
                    vj[[i, i]] += 1e-8;
                }
                linalg::cholesky(&vj)
            })
            .map_err(|e| Error::SingularPrior(format!("FOV correlation not invertible: {e}")))?;
        let v_inv = linalg::cholesky_inverse(&chol_v);
        let inv_sl2 = 1.0 / sigma_lambda_sq;
        let mut prec = &v_inv * inv_sl2;
        for i in 0..k {
            prec[[i, i]] += 1.0;
        }
        let chol_prec = linalg::cholesky(&prec)
            .map_err(|e| Error::SingularPrior(format!("latent precision not PD: {e}")))?;
        let cov = linalg::cholesky_inverse(&chol_prec);
        let m_vec = Array1::from_elem(k, prior_mean);
        let prior_pull = cov.dot(&(v_inv.dot(&m_vec) * inv_sl2));
        Ok(LambdaPieces { cov, prior_pull })
    }

    fn mean(&self, ez: &Array1<f64>) -> Array1<f64> {
        self.cov.dot(ez) + &self.prior_pull
    }
}

/// Inclusion logit from the two coefficient branches and the latent mean:
/// `logit p = ½[logdet⁺ − logdet⁻] + ½ μ̂ᵀΣ̂⁻¹μ̂ + logit Φ(Eλ)`,
/// clamped away from 0 and 1.
pub fn update_inclusion(vupd: &VUpdate, lambda_mean: f64) -> f64 {
    let logit = vupd.half_logdet_diff + 0.5 * vupd.quad + logit_phi_stable(lambda_mean);
    inv_logit(logit).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

/// Gamma noise-precision update `(N_k/2 + a_ω, ½ E‖resid‖² + b_ω)`.
pub fn update_omega(
    n_k: usize,
    expected_sq_norm: f64,
    hp: &Hyperparams,
    node: usize,
    fov_id: u32,
) -> Result<(f64, f64)> {
    let shape = n_k as f64 / 2.0 + hp.a_omega;
    let rate = 0.5 * expected_sq_norm + hp.b_omega;
    if !(rate > 0.0) {
        return Err(Error::NonPositiveRate {
            node,
            fov_id,
            rate,
        });
    }
    Ok((shape, rate))
}

/// Expected squared residual norm
/// `E‖Y_i − Σ_j H ṽ I(z>0)‖² = ‖Y_i − G̃‖² + Σ_j [p_j(1−p_j)‖ŷ_j‖² + p_j tr(HᵀH Σ̂⁺_j)]`,
/// the exact expansion of the cross and trace terms.
pub fn expected_sq_norm(
    y: &Array1<f64>,
    gtilde: &Array1<f64>,
    terms: impl Iterator<Item = (f64, f64, f64)>,
) -> f64 {
    let mut base = 0.0;
    for (yv, gv) in y.iter().zip(gtilde.iter()) {
        let r = yv - gv;
        base += r * r;
    }
    for (p, yhat_sq, trace) in terms {
        base += p * (1.0 - p) * yhat_sq + p * trace;
    }
    base
}

/// Convex damping `lr·new + (1−lr)·old` applied elementwise.
pub fn damp(new: f64, old: f64, learning_rate: f64) -> f64 {
    learning_rate * new + (1.0 - learning_rate) * old
}

fn damp_arr1(new: &mut Array1<f64>, old: &Array1<f64>, lr: f64) {
    for (n, o) in new.iter_mut().zip(old.iter()) {
        *n = lr * *n + (1.0 - lr) * o;
    }
}

fn damp_arr2(new: &mut Array2<f64>, old: &Array2<f64>, lr: f64) {
    for (n, o) in new.iter_mut().zip(old.iter()) {
        *n = lr * *n + (1.0 - lr) * o;
    }
}

/// Node initialization: per FOV, a fixed-iteration mean-field Gaussian
/// ridge of Y_i on the joint design of all predictors, reshaped into the
/// per-predictor coefficient means. Solved through the dual (N x N)
/// eigendecomposition so the 50 noise/coefficient alternations are O(N).
pub fn init_node(
    node: usize,
    designs: &DesignSet,
    hp: &Hyperparams,
    prior: &FovPrior,
) -> Result<NodeVariationalState> {
    let p = designs.n_genes;
    let k_count = designs.n_fovs;
    let others: Vec<usize> = (0..p).filter(|&j| j != node).collect();
    let pm1 = others.len();
    let l = designs.eta.len();

    let mut v_pos_mean = vec![Array1::<f64>::zeros(l); pm1 * k_count];
    for k in 0..k_count {
        let n = designs.n_cells(k);
        let y = designs.responses[k].column(node).to_owned();
        // dual Gram X Xᵀ over the joint design X = [D_j1 ... D_jp-1]
        let mut xxt = Array2::<f64>::zeros((n, n));
        for &j in &others {
            let d = &designs.block(j, k).design_b;
            xxt = xxt + d.dot(&d.t());
        }
        let (lam_raw, u) = linalg::sym_eigh(&xxt)
            .map_err(|e| Error::SingularDesign(format!("node {node}, fov index {k}: {e}")))?;
        let lam = lam_raw.mapv(|v| v.max(0.0));
        // w = Λ^{1/2} Uᵀ y
        let uty = u.t().dot(&y);
        let w: Array1<f64> = Array1::from_iter(
            lam.iter()
                .zip(uty.iter())
                .map(|(&l2, &t)| l2.sqrt() * t),
        );
        let yty: f64 = y.iter().map(|v| v * v).sum();
        let c = 1.0 / hp.sigma_gp_sq;
        let mut e_tau = hp.a_omega / hp.b_omega;
        for _ in 0..50 {
            let mut mu_xty = 0.0;
            let mut mu_xtxmu = 0.0;
            // zero-eigenvalue directions contribute nothing to the traces
            let mut tr_xtx_sigma = 0.0;
            for i in 0..n {
                let denom = e_tau * lam[i] + c;
                mu_xty += e_tau * w[i] * w[i] / denom;
                mu_xtxmu += e_tau * e_tau * w[i] * w[i] * lam[i] / (denom * denom);
                tr_xtx_sigma += lam[i] / denom;
            }
            let e_ss = (yty - 2.0 * mu_xty + mu_xtxmu + tr_xtx_sigma).max(0.0);
            e_tau = (n as f64 / 2.0 + hp.a_omega) / (0.5 * e_ss + hp.b_omega);
        }
        // μ = Xᵀ U diag(Eτ λ^{-1/2} w / (Eτ λ + c)); zero-λ directions drop out
        let mut t = Array1::<f64>::zeros(n);
        for i in 0..n {
            if lam[i] > 1e-12 {
                t[i] = e_tau * w[i] / (lam[i].sqrt() * (e_tau * lam[i] + c));
            }
        }
        let ut = u.dot(&t);
        for (jj, &j) in others.iter().enumerate() {
            let d = &designs.block(j, k).design_b;
            let coef_u = d.t().dot(&ut);
            // scale u-coefficients into the sqrt(η) parametrization
            let mut v = coef_u;
            for (vi, se) in v.iter_mut().zip(designs.sqrt_eta.iter()) {
                *vi *= se;
            }
            v_pos_mean[jj * k_count + k] = v;
        }
    }

    let prior_cov_diag = designs.eta.mapv(|e| hp.sigma_gp_sq * e);
    let v_pos_cov = vec![Array2::from_diag(&prior_cov_diag); pm1 * k_count];
    let lambda_pieces = LambdaPieces::new(&prior.v, prior.sigma_lambda_sq, prior.prior_mean)?;
    let mut lambda_mean = Array2::<f64>::zeros((pm1, k_count));
    lambda_mean.fill(prior.prior_mean);
    Ok(NodeVariationalState {
        node,
        others,
        n_fovs: k_count,
        omega_shape: Array1::from_elem(k_count, hp.a_omega),
        omega_rate: Array1::from_elem(k_count, hp.b_omega),
        lambda_mean,
        lambda_cov: lambda_pieces.cov,
        v_pos_mean,
        v_pos_cov,
        v_neg_cov_diag: prior_cov_diag,
        p_incl: Array2::from_elem((pm1, k_count), 0.5),
        ez: Array2::zeros((pm1, k_count)),
    })
}

/// Result of fitting all node regressions.
#[derive(Debug)]
pub struct FitResult {
    pub states: Vec<NodeVariationalState>,
    pub iterations: Vec<usize>,
    pub final_change: Vec<f64>,
    pub converged: Vec<bool>,
    pub hyperparams: Hyperparams,
}

impl FitResult {
    pub fn n_genes(&self) -> usize {
        self.states.len()
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

/// Runs the coordinate ascent for one node until the sup-norm parameter
/// change falls below tolerance or `max_iter` sweeps elapse.
pub fn run_node(
    node: usize,
    designs: &DesignSet,
    prior: &FovPrior,
    hp: &Hyperparams,
    verbose: bool,
) -> Result<(NodeVariationalState, usize, f64, bool)> {
    let mut state = init_node(node, designs, hp, prior)?;
    let lambda_pieces = LambdaPieces::new(&prior.v, prior.sigma_lambda_sq, prior.prior_mean)?;
    let k_count = designs.n_fovs;
    let pm1 = state.others.len();
    let lr = hp.learning_rate;

    let mut buffers = build_design(designs, node);
    buffers.refresh(designs, &state);

    let mut change = f64::INFINITY;
    let mut converged = false;
    let mut sweeps = 0usize;
    for sweep in 0..hp.max_iter {
        sweeps = sweep + 1;
        let prev = state.clone();
        let prev_yhat = buffers.yhat.clone();

        for k in 0..k_count {
            let y = designs.responses[k].column(node).to_owned();
            let n = designs.n_cells(k);
            buffers.rebuild_gtilde(&state, k);

            // noise precision first, from the current (damped) factors
            let sq = expected_sq_norm(
                &y,
                &buffers.gtilde[k],
                (0..pm1).map(|jj| {
                    let slot = state.slot(jj, k);
                    let p = state.p_incl[[jj, k]];
                    let yhat_sq = buffers.yhat[slot].iter().map(|v| v * v).sum::<f64>();
                    let j = state.others[jj];
                    let trace = frob_dot(&designs.block(j, k).gram_psi, &state.v_pos_cov[slot]);
                    (p, yhat_sq, trace)
                }),
            );
            let (shape, rate) = update_omega(n, sq, hp, node, designs.fov_ids[k])?;
            state.omega_shape[k] = shape;
            state.omega_rate[k] = rate;
            let e_omega = shape / rate;

            let mut gtilde = buffers.gtilde[k].clone();
            for jj in 0..pm1 {
                let j = state.others[jj];
                let slot = state.slot(jj, k);
                let block = designs.block(j, k);

                // latent K-vector, from the freshest expected z row
                let ez_row = state.ez.row(jj).to_owned();
                let lam_mean = lambda_pieces.mean(&ez_row);
                for kk in 0..k_count {
                    state.lambda_mean[[jj, kk]] = lam_mean[kk];
                }

                // conditional coefficient branches
                let p_old = state.p_incl[[jj, k]];
                let mut e_resid = &y - &gtilde;
                e_resid.scaled_add(p_old, &buffers.yhat[slot]);
                let vupd = update_v_given_z(block, &designs.eta, e_omega, hp.sigma_gp_sq, &e_resid);

                // expected latent, then inclusion probability
                let lam_k = state.lambda_mean[[jj, k]];
                state.ez[[jj, k]] = expected_z(lam_k, p_old);
                let p_new = update_inclusion(&vupd, lam_k);

                let yhat_new = block.design_b.dot(&u_scale(&vupd.mean_pos, &designs.sqrt_eta));
                // G̃ ← G̃ − p_old ŷ_old + p_new ŷ_new
                gtilde.scaled_add(-p_old, &buffers.yhat[slot]);
                gtilde.scaled_add(p_new, &yhat_new);
                buffers.yhat[slot] = yhat_new;
                state.v_pos_mean[slot] = vupd.mean_pos;
                state.v_pos_cov[slot] = vupd.cov_pos;
                state.p_incl[[jj, k]] = p_new;
            }
            buffers.gtilde[k] = gtilde;
        }

        // damping toward the previous sweep, elementwise on every factor
        damp_arr1(&mut state.omega_shape, &prev.omega_shape, lr);
        damp_arr1(&mut state.omega_rate, &prev.omega_rate, lr);
        damp_arr2(&mut state.lambda_mean, &prev.lambda_mean, lr);
        damp_arr2(&mut state.p_incl, &prev.p_incl, lr);
        damp_arr2(&mut state.ez, &prev.ez, lr);
        for slot in 0..state.v_pos_mean.len() {
            damp_arr1(&mut state.v_pos_mean[slot], &prev.v_pos_mean[slot], lr);
            damp_arr2(&mut state.v_pos_cov[slot], &prev.v_pos_cov[slot], lr);
            // ŷ is linear in μ̂, so the damped cache stays consistent
            damp_arr1(&mut buffers.yhat[slot], &prev_yhat[slot], lr);
        }
        if sweep % REFRESH_PERIOD == REFRESH_PERIOD - 1 {
            buffers.refresh(designs, &state);
        }

        // sup-norm change over inclusion, coefficient means, noise means,
        // and latent means
        change = 0.0f64;
        for (a, b) in state.p_incl.iter().zip(prev.p_incl.iter()) {
            change = change.max((a - b).abs());
        }
        for slot in 0..state.v_pos_mean.len() {
            for (a, b) in state.v_pos_mean[slot]
                .iter()
                .zip(prev.v_pos_mean[slot].iter())
            {
                change = change.max((a - b).abs());
            }
        }
        for k in 0..k_count {
            let om_new = state.omega_shape[k] / state.omega_rate[k];
            let om_old = prev.omega_shape[k] / prev.omega_rate[k];
            change = change.max((om_new - om_old).abs());
        }
        for (a, b) in state.lambda_mean.iter().zip(prev.lambda_mean.iter()) {
            change = change.max((a - b).abs());
        }
        if verbose {
            eprintln!("node {node} sweep {sweeps} sup-change {change:.3e}");
        }
        if change < hp.tol {
            converged = true;
            break;
        }
    }
    Ok((state, sweeps, change, converged))
}

fn frob_dot(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Fits every node regression, in parallel across nodes. Results are
/// deterministic regardless of worker scheduling.
pub fn fit(
    dataset: &SpatialDataset,
    basis: &GpBasis,
    prior: &FovPrior,
    hp: &Hyperparams,
    verbose: bool,
) -> Result<FitResult> {
    hp.validate()?;
    let designs = DesignSet::build(dataset, basis)?;
    let p = dataset.n_genes();
    let outcomes: Vec<_> = (0..p)
        .into_par_iter()
        .map(|i| {
            run_node(i, &designs, prior, hp, verbose).map_err(|e| Error::NodeFailure {
                node: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut states = Vec::with_capacity(p);
    let mut iterations = Vec::with_capacity(p);
    let mut final_change = Vec::with_capacity(p);
    let mut converged = Vec::with_capacity(p);
    for (st, it, ch, cv) in outcomes {
        states.push(st);
        iterations.push(it);
        final_change.push(ch);
        converged.push(cv);
    }
    Ok(FitResult {
        states,
        iterations,
        final_change,
        converged,
        hyperparams: hp.clone(),
    })
}
