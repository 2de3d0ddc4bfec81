//! Synthetic data generation: grid geometry, spatially correlated edge
//! selection, spatially varying precision surfaces, and Gaussian sampling.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::prelude::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::basis::{eigenpairs_2d, evaluate_basis};
use crate::data::{fov_geometry, scale_coordinates, FovBlock, SpatialDataset};
use crate::error::{Error, Result};
use crate::linalg;

/// Which generation scenario to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Fixed bank of bounded smooth forms for the edge surfaces.
    I,
    /// GP-drawn edge-surface library (retained at max |f| > 0.5, scaled by 2)
    /// with incremental diagonal repair.
    II,
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(Scenario::I),
            "II" | "2" => Ok(Scenario::II),
            other => Err(Error::InvalidConfig(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Simulation configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub p: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Cells per FOV.
    pub n_cells: usize,
    pub rho_decay: f64,
    /// Target fraction of selected (pair, FOV) decisions.
    pub sparsity: f64,
    pub fov_size: f64,
    pub fov_spacing: f64,
    /// Candidate positions per axis within each FOV.
    pub candidate_grid: usize,
    pub scenario: Scenario,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            p: 30,
            grid_rows: 5,
            grid_cols: 5,
            n_cells: 1000,
            rho_decay: 0.6,
            sparsity: 0.05,
            fov_size: 0.4,
            fov_spacing: 0.6,
            candidate_grid: 40,
            scenario: Scenario::I,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn n_fovs(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.p < 2 {
            return Err(Error::InvalidConfig("p must be at least 2".into()));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::InvalidConfig("grid dimensions must be positive".into()));
        }
        if !(self.sparsity > 0.0 && self.sparsity < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sparsity must lie in (0,1), got {}",
                self.sparsity
            )));
        }
        if !(self.rho_decay > 0.0 && self.rho_decay < 1.0) {
            return Err(Error::InvalidRho(self.rho_decay));
        }
        if self.fov_size <= 0.0 || self.fov_spacing < 0.0 {
            return Err(Error::InvalidConfig("fov_size/fov_spacing invalid".into()));
        }
        if self.n_cells > self.candidate_grid * self.candidate_grid {
            return Err(Error::TooManyCells {
                requested: self.n_cells,
                available: self.candidate_grid * self.candidate_grid,
            });
        }
        Ok(())
    }
}

/// Simulated truth: selected edges per FOV, the latent draws that produced
/// them, and the per-cell precision entries.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Per-FOV selected unordered pairs (i < j), ascending.
    pub true_edges: Vec<Vec<(usize, usize)>>,
    /// Latent K-vectors per unordered pair, row order matches `pair_list`.
    pub latent_lambda: Array2<f64>,
    pub pair_list: Vec<(usize, usize)>,
    pub seed: u64,
    /// Edge-surface values at each cell: (pair index, fov) -> length-N_k.
    pub edge_values: BTreeMap<(usize, usize), Array1<f64>>,
    /// Per-FOV precision diagonals (p-vector each).
    pub diagonals: Vec<Array1<f64>>,
}

/// Deterministic sub-stream derivation: one user seed fans out to
/// independent ChaCha streams per purpose and index, so thread count and
/// evaluation order cannot change any draw.
pub fn substream(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    // splitmix64 finalizer over the packed identifiers
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(purpose.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index.wrapping_mul(0x94D0_49BB_1331_11EB));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

const STREAM_GEOMETRY: u64 = 1;
const STREAM_SELECTION: u64 = 2;
const STREAM_SURFACES: u64 = 3;
const STREAM_EXPRESSION: u64 = 4;

/// Grid-of-FOVs geometry with cells sampled without replacement from a
/// regular candidate lattice (cell-centered positions).
pub fn generate_geometry(config: &SimConfig) -> Result<Vec<FovBlock>> {
    config.validate()?;
    let m = config.candidate_grid;
    let pitch = config.fov_size + config.fov_spacing;
    let step = config.fov_size / m as f64;
    let mut fovs = Vec::with_capacity(config.n_fovs());
    let mut next_cell_id: u64 = 1;
    for r in 0..config.grid_rows {
        for c in 0..config.grid_cols {
            let fov_idx = (r * config.grid_cols + c) as u64;
            let origin = [c as f64 * pitch, r as f64 * pitch];
            let mut rng = substream(config.seed, STREAM_GEOMETRY, fov_idx);
            let mut chosen = sample_without_replacement(m * m, config.n_cells, &mut rng);
            chosen.sort_unstable();
            let mut coords = Array2::<f64>::zeros((config.n_cells, 2));
            let mut ids = Vec::with_capacity(config.n_cells);
            for (row, &cell) in chosen.iter().enumerate() {
                let gx = cell % m;
                let gy = cell / m;
                coords[[row, 0]] = origin[0] + (gx as f64 + 0.5) * step;
                coords[[row, 1]] = origin[1] + (gy as f64 + 0.5) * step;
                ids.push(next_cell_id);
                next_cell_id += 1;
            }
            fovs.push(FovBlock::new(
                fov_idx as u32 + 1,
                coords,
                Array2::zeros((config.n_cells, config.p)),
                ids,
            ));
        }
    }
    Ok(fovs)
}

fn sample_without_replacement(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    // partial Fisher-Yates over an index vector
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Draws latent pair vectors `Λ_ij ~ N(0, Ṽ)` with `Ṽ[k,k'] = ρ^{d_kk'}`
/// over the FOV centroids and selects the top fraction by the pooled
/// empirical quantile, so realized global density matches `sparsity`.
pub fn generate_selection(config: &SimConfig, fovs: &[FovBlock]) -> Result<GroundTruth> {
    let k_count = fovs.len();
    let p = config.p;
    let mut centroids = Array2::<f64>::zeros((k_count, k_count.max(2).min(2)));
    let mut v = Array2::<f64>::zeros((k_count, k_count));
    for (i, f) in fovs.iter().enumerate() {
        centroids[[i, 0]] = f.centroid[0];
        centroids[[i, 1]] = f.centroid[1];
    }
    for i in 0..k_count {
        for j in 0..k_count {
            let dx = fovs[i].centroid[0] - fovs[j].centroid[0];
            let dy = fovs[i].centroid[1] - fovs[j].centroid[1];
            v[[i, j]] = config.rho_decay.powf((dx * dx + dy * dy).sqrt());
        }
    }
    let chol = linalg::cholesky(&v).or_else(|_| {
        let mut vj = v.clone();
        for i in 0..k_count {
            vj[[i, i]] += 1e-10;
        }
        linalg::cholesky(&vj)
    })?;

    let pairs: Vec<(usize, usize)> = (0..p)
        .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
        .collect();
    let norm = StandardNormal;
    let mut latent = Array2::<f64>::zeros((pairs.len(), k_count));
    for (q, _) in pairs.iter().enumerate() {
        let mut rng = substream(config.seed, STREAM_SELECTION, q as u64);
        let z: Array1<f64> =
            Array1::from_iter((0..k_count).map(|_| <StandardNormal as Distribution<f64>>::sample(&norm, &mut rng)));
        // lower-triangular multiply gives correlated draws
        for k in 0..k_count {
            let mut acc = 0.0;
            for t in 0..=k {
                acc += chol[[k, t]] * z[t];
            }
            latent[[q, k]] = acc;
        }
    }
    let total = pairs.len() * k_count;
    let n_selected = ((config.sparsity * total as f64).round() as usize).max(1);
    let mut flat: Vec<f64> = latent.iter().copied().collect();
    flat.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let threshold = flat[n_selected - 1];
    let mut true_edges = vec![Vec::new(); k_count];
    for (q, &(i, j)) in pairs.iter().enumerate() {
        for k in 0..k_count {
            if latent[[q, k]] >= threshold {
                true_edges[k].push((i, j));
            }
        }
    }
    Ok(GroundTruth {
        true_edges,
        latent_lambda: latent,
        pair_list: pairs,
        seed: config.seed,
        edge_values: BTreeMap::new(),
        diagonals: Vec::new(),
    })
}

/// The Scenario-I bank of bounded smooth forms over the unit square of
/// FOV-local scaled coordinates; each is normalized to unit max modulus.
fn bank_value(which: usize, u: f64, v: f64, w: f64) -> f64 {
    use std::f64::consts::PI;
    match which % 6 {
        0 => (PI * (u + v) / (2.0 * w)).sin(),
        1 => (PI * (u - v) / (2.0 * w)).sin(),
        2 => (0.5 * PI * u / w).cos() * (0.5 * PI * v / w).cos(),
        3 => (u + v) / (2.0 * w),
        4 => (PI * u / w).sin() * (PI * v / w).sin(),
        _ => (0.5 * PI * u / w).cos() * (PI * v / w).sin(),
    }
}

/// Fills edge-surface values and dominant diagonals for the selected edges.
///
/// Scenario I assigns each selected pair one bank form with a seeded
/// amplitude; Scenario II draws a library of GP surfaces under the model
/// kernel, keeps draws whose max modulus exceeds 0.5, doubles them, and
/// repairs diagonals by +0.2 increments until every cell's matrix is PD.
pub fn build_precision_surfaces(
    truth: &mut GroundTruth,
    config: &SimConfig,
    fovs: &[FovBlock],
) -> Result<()> {
    let k_count = fovs.len();
    let p = config.p;
    // surfaces live on the same scaled coordinates the model sees
    let dataset = SpatialDataset::new(
        fovs.to_vec(),
        (0..p).map(|g| format!("g{}", g + 1)).collect(),
        None,
    )?;
    let scaled = scale_coordinates(&dataset)?;
    let max_abs_coord = scaled
        .fovs
        .iter()
        .flat_map(|f| f.coordinates.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-9);

    // which pairs are selected anywhere
    let selected: Vec<usize> = (0..truth.pair_list.len())
        .filter(|&q| {
            (0..k_count).any(|k| {
                truth.true_edges[k]
                    .binary_search(&truth.pair_list[q])
                    .is_ok()
            })
        })
        .collect();

    match config.scenario {
        Scenario::I => {
            let amp_dist = Uniform::new(1.5, 2.8).map_err(|e| {
                Error::InvalidConfig(format!("amplitude distribution: {e}"))
            })?;
            for (rank, &q) in selected.iter().enumerate() {
                let mut rng = substream(config.seed, STREAM_SURFACES, rank as u64);
                let amp: f64 = amp_dist.sample(&mut rng);
                let which: usize = rng.random_range(0..6);
                for k in 0..k_count {
                    if truth.true_edges[k]
                        .binary_search(&truth.pair_list[q])
                        .is_err()
                    {
                        continue;
                    }
                    let coords = &scaled.fovs[k].coordinates;
                    let vals = Array1::from_iter((0..coords.nrows()).map(|r| {
                        amp * bank_value(which, coords[[r, 0]], coords[[r, 1]], max_abs_coord)
                    }));
                    truth.edge_values.insert((q, k), vals);
                }
            }
            // diagonal: 1 + max over locations of the row absolute sum
            truth.diagonals = (0..k_count)
                .map(|k| scenario_one_diagonal(truth, p, k, fovs[k].n_cells()))
                .collect();
        }
        Scenario::II => {
            let skeleton = eigenpairs_2d(0.01, 0.5, 10)?;
            let basis = evaluate_basis(&scaled, &skeleton)?;
            let l = basis.truncation();
            let norm = StandardNormal;
            // library of retained, doubled GP draws (values per FOV)
            let lib_size = selected.len().max(10);
            let mut library: Vec<BTreeMap<usize, Array1<f64>>> = Vec::with_capacity(lib_size);
            let mut draw_idx = 0u64;
            while library.len() < lib_size {
                if draw_idx > 200 * lib_size as u64 {
                    return Err(Error::NonPd(
                        "GP library generation failed to retain enough draws".into(),
                    ));
                }
                let mut rng = substream(config.seed, STREAM_SURFACES, draw_idx);
                draw_idx += 1;
                let u: Array1<f64> = Array1::from_iter(
                    (0..l).map(|_| <StandardNormal as Distribution<f64>>::sample(&norm, &mut rng)),
                );
                let mut per_fov = BTreeMap::new();
                let mut max_abs = 0.0f64;
                for (k, fov) in scaled.fovs.iter().enumerate() {
                    let b = &basis.matrices[&fov.fov_id];
                    let vals = b.dot(&u);
                    max_abs = vals.iter().fold(max_abs, |m, v| m.max(v.abs()));
                    per_fov.insert(k, vals);
                }
                if max_abs > 0.5 {
                    for vals in per_fov.values_mut() {
                        vals.mapv_inplace(|x| 2.0 * x);
                    }
                    library.push(per_fov);
                }
            }
            let mut rng = substream(config.seed, STREAM_SURFACES, u64::MAX / 2);
            for &q in &selected {
                let pick = rng.random_range(0..library.len());
                for k in 0..k_count {
                    if truth.true_edges[k]
                        .binary_search(&truth.pair_list[q])
                        .is_ok()
                    {
                        truth.edge_values.insert((q, k), library[pick][&k].clone());
                    }
                }
            }
            // start at 1 and add 0.2 until every location is PD
            truth.diagonals = vec![Array1::ones(p); k_count];
            for k in 0..k_count {
                let n = fovs[k].n_cells();
                let mut increments = 0;
                while !all_cells_pd(truth, p, k, n) {
                    increments += 1;
                    if increments > 100 {
                        return Err(Error::NonPd(format!(
                            "fov index {k}: diagonal repair exceeded 100 increments"
                        )));
                    }
                    truth.diagonals[k].mapv_inplace(|d| d + 0.2);
                }
            }
        }
    }
    Ok(())
}

fn scenario_one_diagonal(truth: &GroundTruth, p: usize, k: usize, n: usize) -> Array1<f64> {
    let mut diag = Array1::<f64>::ones(p);
    let mut row_abs = Array2::<f64>::zeros((n, p));
    for (q, &(i, j)) in truth.pair_list.iter().enumerate() {
        if let Some(vals) = truth.edge_values.get(&(q, k)) {
            for r in 0..n {
                row_abs[[r, i]] += vals[r].abs();
                row_abs[[r, j]] += vals[r].abs();
            }
        }
    }
    for g in 0..p {
        let mx = (0..n).fold(0.0f64, |m, r| m.max(row_abs[[r, g]]));
        diag[g] = 1.0 + mx;
    }
    diag
}

/// Assembles the true precision matrix at one cell.
pub fn precision_at(truth: &GroundTruth, p: usize, k: usize, cell: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((p, p));
    for g in 0..p {
        m[[g, g]] = truth.diagonals[k][g];
    }
    for (q, &(i, j)) in truth.pair_list.iter().enumerate() {
        if let Some(vals) = truth.edge_values.get(&(q, k)) {
            m[[i, j]] = vals[cell];
            m[[j, i]] = vals[cell];
        }
    }
    m
}

fn all_cells_pd(truth: &GroundTruth, p: usize, k: usize, n: usize) -> bool {
    (0..n).all(|cell| linalg::is_positive_definite(&precision_at(truth, p, k, cell)))
}

/// Draws each cell's expression vector independently as N(0, Ω(s)⁻¹).
pub fn sample_expression(
    truth: &GroundTruth,
    config: &SimConfig,
    fovs: &[FovBlock],
) -> Result<SpatialDataset> {
    let p = config.p;
    let norm = StandardNormal;
    let mut out_fovs = Vec::with_capacity(fovs.len());
    for (k, fov) in fovs.iter().enumerate() {
        let n = fov.n_cells();
        let mut rng = substream(config.seed, STREAM_EXPRESSION, k as u64);
        let mut expr = Array2::<f64>::zeros((n, p));
        for cell in 0..n {
            let omega = precision_at(truth, p, k, cell);
            let l = linalg::cholesky(&omega)
                .map_err(|e| Error::NonPd(format!("fov {} cell {cell}: {e}", fov.fov_id)))?;
            // x = L^{-T} z has covariance (L Lᵀ)⁻¹ = Ω⁻¹
            let z: Vec<f64> = (0..p)
                .map(|_| <StandardNormal as Distribution<f64>>::sample(&norm, &mut rng))
                .collect();
            let mut x = z;
            for i in (0..p).rev() {
                let mut sum = x[i];
                for t in (i + 1)..p {
                    sum -= l[[t, i]] * x[t];
                }
                x[i] = sum / l[[i, i]];
            }
            for g in 0..p {
                expr[[cell, g]] = x[g];
            }
        }
        out_fovs.push(FovBlock::new(
            fov.fov_id,
            fov.coordinates.clone(),
            expr,
            fov.cell_ids.clone(),
        ));
    }
    SpatialDataset::new(
        out_fovs,
        (1..=p).map(|g| format!("g{g}")).collect(),
        None,
    )
}

/// End-to-end generation: geometry, selection, surfaces, expression.
pub fn simulate(config: &SimConfig) -> Result<(SpatialDataset, GroundTruth)> {
    let fovs = generate_geometry(config)?;
    let mut truth = generate_selection(config, &fovs)?;
    for edges in &mut truth.true_edges {
        edges.sort_unstable();
    }
    build_precision_surfaces(&mut truth, config, &fovs)?;
    let dataset = sample_expression(&truth, config, &fovs)?;
    Ok((dataset, truth))
}

/// Writes `fov,gene_i,gene_j` rows (1-based gene indices by name) for the
/// true edge set.
pub fn write_truth_edges(
    truth: &GroundTruth,
    dataset: &SpatialDataset,
    path: &std::path::Path,
) -> Result<()> {
    let path_s = path.display().to_string();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(&path_s, e))?;
    w.write_record(["fov", "gene_i", "gene_j"])
        .map_err(|e| Error::csv(&path_s, e))?;
    for (k, edges) in truth.true_edges.iter().enumerate() {
        let fov_id = dataset.fovs[k].fov_id;
        for &(i, j) in edges {
            w.write_record([
                fov_id.to_string(),
                dataset.gene_names[i].clone(),
                dataset.gene_names[j].clone(),
            ])
            .map_err(|e| Error::csv(&path_s, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&path_s, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> SimConfig {
        SimConfig {
            p: 6,
            grid_rows: 2,
            grid_cols: 2,
            n_cells: 40,
            rho_decay: 0.6,
            sparsity: 0.1,
            candidate_grid: 10,
            seed,
            ..SimConfig::default()
        }
    }

    #[test]
    fn geometry_counts_and_determinism() {
        let cfg = small_config(3);
        let fovs = generate_geometry(&cfg).unwrap();
        assert_eq!(fovs.len(), 4);
        assert!(fovs.iter().all(|f| f.n_cells() == 40));
        let fovs2 = generate_geometry(&cfg).unwrap();
        for (a, b) in fovs.iter().zip(fovs2.iter()) {
            assert_eq!(a.coordinates, b.coordinates);
        }
        // single-FOV grid
        let cfg1 = SimConfig {
            grid_rows: 1,
            grid_cols: 1,
            ..small_config(3)
        };
        assert_eq!(generate_geometry(&cfg1).unwrap().len(), 1);
    }

    #[test]
    fn too_many_cells_rejected() {
        let cfg = SimConfig {
            n_cells: 101,
            candidate_grid: 10,
            ..small_config(0)
        };
        assert!(matches!(
            cfg.validate(),
            Err(Error::TooManyCells { .. })
        ));
    }

    #[test]
    fn selection_density_tracks_sparsity() {
        let mut total = 0usize;
        let mut selected = 0usize;
        for seed in 0..20 {
            let cfg = SimConfig {
                p: 12,
                sparsity: 0.05,
                ..small_config(seed)
            };
            let fovs = generate_geometry(&cfg).unwrap();
            let truth = generate_selection(&cfg, &fovs).unwrap();
            selected += truth.true_edges.iter().map(|e| e.len()).sum::<usize>();
            total += cfg.n_fovs() * cfg.p * (cfg.p - 1) / 2;
        }
        let density = selected as f64 / total as f64;
        assert!(
            (density - 0.05).abs() < 0.02,
            "realized density {density} should be near 0.05"
        );
    }

    #[test]
    fn high_rho_gives_concordant_selection() {
        let cfg = SimConfig {
            rho_decay: 0.999_999,
            sparsity: 0.2,
            ..small_config(11)
        };
        let fovs = generate_geometry(&cfg).unwrap();
        let truth = generate_selection(&cfg, &fovs).unwrap();
        // in the rho -> 1 limit, latents are equal across FOVs up to
        // rounding, so each pair is selected everywhere or nowhere
        for (q, pair) in truth.pair_list.iter().enumerate() {
            let count = truth
                .true_edges
                .iter()
                .filter(|e| e.binary_search_by(|x| x.cmp(pair)).is_ok())
                .count();
            assert!(
                count == 0 || count == cfg.n_fovs(),
                "pair {q} selected in {count} FOVs"
            );
        }
    }

    #[test]
    fn low_rho_selection_nearly_independent() {
        // concordance between a specific FOV pair should be near marginal²
        let mut both = 0usize;
        let mut either = 0usize;
        let mut first = 0usize;
        let mut trials = 0usize;
        for seed in 0..40 {
            let cfg = SimConfig {
                rho_decay: 0.01,
                sparsity: 0.2,
                ..small_config(seed)
            };
            let fovs = generate_geometry(&cfg).unwrap();
            let truth = generate_selection(&cfg, &fovs).unwrap();
            for pair in &truth.pair_list {
                let in0 = truth.true_edges[0].binary_search(pair).is_ok();
                let in3 = truth.true_edges[3].binary_search(pair).is_ok();
                trials += 1;
                first += in0 as usize;
                both += (in0 && in3) as usize;
                either += (in0 || in3) as usize;
            }
        }
        let marginal = first as f64 / trials as f64;
        let joint = both as f64 / trials as f64;
        assert!(either > 0);
        // allow generous MC tolerance around independence
        assert!(
            (joint - marginal * marginal).abs() < 0.03,
            "joint {joint} vs marginal^2 {}",
            marginal * marginal
        );
    }

    #[test]
    fn scenario_one_precision_is_pd_everywhere() {
        let cfg = small_config(5);
        let fovs = generate_geometry(&cfg).unwrap();
        let mut truth = generate_selection(&cfg, &fovs).unwrap();
        for e in &mut truth.true_edges {
            e.sort_unstable();
        }
        build_precision_surfaces(&mut truth, &cfg, &fovs).unwrap();
        for k in 0..cfg.n_fovs() {
            assert!(all_cells_pd(&truth, cfg.p, k, fovs[k].n_cells()));
        }
    }

    #[test]
    fn scenario_two_retention_and_pd() {
        let cfg = SimConfig {
            scenario: Scenario::II,
            ..small_config(7)
        };
        let fovs = generate_geometry(&cfg).unwrap();
        let mut truth = generate_selection(&cfg, &fovs).unwrap();
        for e in &mut truth.true_edges {
            e.sort_unstable();
        }
        build_precision_surfaces(&mut truth, &cfg, &fovs).unwrap();
        // every edge surface came from a retained draw: |f| exceeds 0.5
        // somewhere before doubling, i.e. 1.0 after
        let mut by_pair: BTreeMap<usize, f64> = BTreeMap::new();
        for ((q, _), vals) in &truth.edge_values {
            let m = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let e = by_pair.entry(*q).or_insert(0.0);
            *e = e.max(m);
        }
        for (q, m) in by_pair {
            assert!(m > 1.0, "pair {q} max |f| {m} should exceed 1.0");
        }
        for k in 0..cfg.n_fovs() {
            assert!(all_cells_pd(&truth, cfg.p, k, fovs[k].n_cells()));
        }
    }

    #[test]
    fn expression_sampling_statistics() {
        // diagonal Ω with ω = 4 gives variance 0.25 per gene
        let cfg = SimConfig {
            p: 3,
            grid_rows: 1,
            grid_cols: 1,
            n_cells: 10_000,
            candidate_grid: 120,
            sparsity: 0.05,
            ..SimConfig::default()
        };
        let fovs = generate_geometry(&cfg).unwrap();
        let truth = GroundTruth {
            true_edges: vec![Vec::new()],
            latent_lambda: Array2::zeros((3, 1)),
            pair_list: vec![(0, 1), (0, 2), (1, 2)],
            seed: cfg.seed,
            edge_values: BTreeMap::new(),
            diagonals: vec![Array1::from_elem(3, 4.0)],
        };
        let ds = sample_expression(&truth, &cfg, &fovs).unwrap();
        for g in 0..3 {
            let col = ds.fovs[0].expression.column(g);
            let mean = col.sum() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / col.len() as f64;
            assert!((var - 0.25).abs() < 0.0125, "gene {g}: var {var}");
            // zero mean within 5 standard errors
            let se = (var / col.len() as f64).sqrt();
            assert!(mean.abs() < 5.0 * se);
        }
    }

    #[test]
    fn negative_offdiagonal_gives_positive_correlation() {
        let cfg = SimConfig {
            p: 2,
            grid_rows: 1,
            grid_cols: 1,
            n_cells: 8_000,
            candidate_grid: 100,
            ..SimConfig::default()
        };
        let fovs = generate_geometry(&cfg).unwrap();
        let n = fovs[0].n_cells();
        let mut edge_values = BTreeMap::new();
        edge_values.insert((0usize, 0usize), Array1::from_elem(n, -0.8));
        let truth = GroundTruth {
            true_edges: vec![vec![(0, 1)]],
            latent_lambda: Array2::zeros((1, 1)),
            pair_list: vec![(0, 1)],
            seed: 1,
            edge_values,
            diagonals: vec![Array1::from_elem(2, 2.0)],
        };
        let ds = sample_expression(&truth, &cfg, &fovs).unwrap();
        let a = ds.fovs[0].expression.column(0);
        let b = ds.fovs[0].expression.column(1);
        let ma = a.sum() / n as f64;
        let mb = b.sum() / n as f64;
        let cov = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n as f64;
        assert!(cov > 0.05, "negative ω_12 must induce positive covariance");
    }

    #[test]
    fn full_simulation_deterministic() {
        let cfg = small_config(9);
        let (d1, t1) = simulate(&cfg).unwrap();
        let (d2, t2) = simulate(&cfg).unwrap();
        assert_eq!(t1.true_edges, t2.true_edges);
        for (a, b) in d1.fovs.iter().zip(d2.fovs.iter()) {
            assert_eq!(a.expression, b.expression);
        }
    }
}
