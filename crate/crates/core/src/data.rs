//! Dataset, geometry, and configuration records shared by every stage, plus
//! CSV ingestion with validation.
//!
//! Expression files carry the header `cell_id,fov,<gene names...>`;
//! coordinate files carry `cell_id,fov,x,y`. Cells are joined on the shared
//! integer `cell_id`. Gene order is the expression file's column order and is
//! canonical everywhere downstream.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One field of view: coordinates and expression for its cells.
///
/// `centroid` is the arithmetic mean of the coordinates at construction time;
/// `scale_coordinates` preserves the original centroid so macro-level
/// geometry always refers to raw slide units.
#[derive(Debug, Clone)]
pub struct FovBlock {
    pub fov_id: u32,
    /// N_k x 2, arbitrary length units.
    pub coordinates: Array2<f64>,
    /// N_k x p, column order matches `SpatialDataset::gene_names`.
    pub expression: Array2<f64>,
    /// Centroid of the original (unscaled) coordinates.
    pub centroid: [f64; 2],
    pub cell_ids: Vec<u64>,
}

impl FovBlock {
    pub fn new(
        fov_id: u32,
        coordinates: Array2<f64>,
        expression: Array2<f64>,
        cell_ids: Vec<u64>,
    ) -> Self {
        let centroid = centroid_of(&coordinates);
        FovBlock {
            fov_id,
            coordinates,
            expression,
            centroid,
            cell_ids,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.coordinates.nrows()
    }
}

fn centroid_of(coords: &Array2<f64>) -> [f64; 2] {
    let n = coords.nrows().max(1) as f64;
    let mut c = [0.0, 0.0];
    for row in coords.rows() {
        c[0] += row[0];
        c[1] += row[1];
    }
    [c[0] / n, c[1] / n]
}

/// FOV-partitioned cells with expression, immutable after construction.
#[derive(Debug, Clone)]
pub struct SpatialDataset {
    pub fovs: Vec<FovBlock>,
    pub gene_names: Vec<String>,
    /// Optional FOV-id -> region-id map; FOVs in different regions are
    /// treated as a priori independent when building the FOV correlation.
    pub region_labels: Option<BTreeMap<u32, u32>>,
}

impl SpatialDataset {
    pub fn new(
        fovs: Vec<FovBlock>,
        gene_names: Vec<String>,
        region_labels: Option<BTreeMap<u32, u32>>,
    ) -> Result<Self> {
        let ds = SpatialDataset {
            fovs,
            gene_names,
            region_labels,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n_genes(&self) -> usize {
        self.gene_names.len()
    }

    pub fn n_fovs(&self) -> usize {
        self.fovs.len()
    }

    pub fn total_cells(&self) -> usize {
        self.fovs.iter().map(|f| f.n_cells()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.gene_names.len();
        if p < 2 {
            return Err(Error::ShapeMismatch(format!(
                "need at least 2 genes, got {p}"
            )));
        }
        if self.fovs.is_empty() {
            return Err(Error::ShapeMismatch("dataset has no FOVs".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for fov in &self.fovs {
            if !seen.insert(fov.fov_id) {
                return Err(Error::ShapeMismatch(format!(
                    "duplicate fov id {}",
                    fov.fov_id
                )));
            }
            if fov.n_cells() == 0 {
                return Err(Error::ShapeMismatch(format!("fov {} is empty", fov.fov_id)));
            }
            if fov.expression.nrows() != fov.coordinates.nrows() {
                return Err(Error::ShapeMismatch(format!(
                    "fov {}: {} coordinate rows vs {} expression rows",
                    fov.fov_id,
                    fov.coordinates.nrows(),
                    fov.expression.nrows()
                )));
            }
            if fov.expression.ncols() != p {
                return Err(Error::ShapeMismatch(format!(
                    "fov {}: expression has {} columns, expected {p}",
                    fov.fov_id,
                    fov.expression.ncols()
                )));
            }
            if fov.cell_ids.len() != fov.n_cells() {
                return Err(Error::ShapeMismatch(format!(
                    "fov {}: {} cell ids vs {} cells",
                    fov.fov_id,
                    fov.cell_ids.len(),
                    fov.n_cells()
                )));
            }
            for (r, row) in fov.coordinates.rows().into_iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::NonFiniteValue {
                            cell_id: fov.cell_ids[r],
                            fov_id: fov.fov_id,
                            column: if c == 0 { "x".into() } else { "y".into() },
                        });
                    }
                }
            }
            for (r, row) in fov.expression.rows().into_iter().enumerate() {
                for (c, v) in row.iter().enumerate() {
                    if !v.is_finite() {
                        return Err(Error::NonFiniteValue {
                            cell_id: fov.cell_ids[r],
                            fov_id: fov.fov_id,
                            column: self.gene_names[c].clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

/// FOV centroids (raw slide units) and their pairwise Euclidean distances.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FovGeometry {
    pub fov_ids: Vec<u32>,
    /// K x 2 centroid matrix in original coordinate units.
    pub centroids: Array2<f64>,
    /// K x K symmetric Euclidean distance matrix, zero diagonal.
    pub distances: Array2<f64>,
}

/// Centroids and distances from the original (unscaled) coordinates.
pub fn fov_geometry(dataset: &SpatialDataset) -> FovGeometry {
    let k = dataset.n_fovs();
    let mut centroids = Array2::<f64>::zeros((k, 2));
    let mut fov_ids = Vec::with_capacity(k);
    for (idx, fov) in dataset.fovs.iter().enumerate() {
        centroids[[idx, 0]] = fov.centroid[0];
        centroids[[idx, 1]] = fov.centroid[1];
        fov_ids.push(fov.fov_id);
    }
    let mut distances = Array2::<f64>::zeros((k, k));
    for i in 0..k {
        for j in (i + 1)..k {
            let dx = centroids[[i, 0]] - centroids[[j, 0]];
            let dy = centroids[[i, 1]] - centroids[[j, 1]];
            let d = (dx * dx + dy * dy).sqrt();
            distances[[i, j]] = d;
            distances[[j, i]] = d;
        }
    }
    FovGeometry {
        fov_ids,
        centroids,
        distances,
    }
}

/// Centers each FOV at its centroid and divides by the pooled standard
/// deviation of the centered coordinates (both axes pooled), so micro-scale
/// GP inputs have comparable ranges across FOVs. Original centroids are kept
/// for macro geometry.
pub fn scale_coordinates(dataset: &SpatialDataset) -> Result<SpatialDataset> {
    let mut centered: Vec<Array2<f64>> = Vec::with_capacity(dataset.n_fovs());
    let mut sumsq = 0.0;
    let mut count = 0usize;
    for fov in &dataset.fovs {
        let mut c = fov.coordinates.clone();
        for mut row in c.rows_mut() {
            row[0] -= fov.centroid[0];
            row[1] -= fov.centroid[1];
        }
        sumsq += c.iter().map(|v| v * v).sum::<f64>();
        count += c.len();
        centered.push(c);
    }
    let std = (sumsq / count as f64).sqrt();
    if std == 0.0 {
        // A single observed cell centers to the origin exactly; that is the
        // only degenerate layout we accept.
        if dataset.total_cells() > 1 {
            return Err(Error::DegenerateGeometry(
                "all cells coincide with their FOV centroid; coordinate spread is zero".into(),
            ));
        }
    }
    let divisor = if std == 0.0 { 1.0 } else { std };
    let fovs = dataset
        .fovs
        .iter()
        .zip(centered)
        .map(|(fov, mut c)| {
            c.mapv_inplace(|v| v / divisor);
            FovBlock {
                fov_id: fov.fov_id,
                coordinates: c,
                expression: fov.expression.clone(),
                centroid: fov.centroid,
                cell_ids: fov.cell_ids.clone(),
            }
        })
        .collect();
    Ok(SpatialDataset {
        fovs,
        gene_names: dataset.gene_names.clone(),
        region_labels: dataset.region_labels.clone(),
    })
}

/// Fixed model hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Gamma prior shape on the residual precisions.
    pub a_omega: f64,
    /// Gamma prior rate on the residual precisions.
    pub b_omega: f64,
    /// GP scale on the spatial coefficient surfaces.
    pub sigma_gp_sq: f64,
    /// Kernel origin-attenuation parameter.
    pub a_gp: f64,
    /// Kernel smoothness parameter.
    pub b_gp: f64,
    /// 2-D total polynomial degree of the basis; L = (degree+1)(degree+2)/2.
    pub degree: usize,
    /// Spatial decay of the FOV correlation, in (0,1).
    pub rho_decay: f64,
    /// Scale of the latent edge-selection prior.
    pub sigma_lambda_sq: f64,
    /// Scalar prior mean for the selection latents (broadcast over FOVs and
    /// predictors; 0 is non-informative).
    pub prior_mean: f64,
    /// Bayesian FDR level for edge selection.
    pub alpha_fdr: f64,
    /// Damping weight on fresh coordinate-ascent values, in (0,1].
    pub learning_rate: f64,
    /// Sup-norm convergence tolerance on parameter changes.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            a_omega: 10.0,
            b_omega: 10.0,
            sigma_gp_sq: 1.0,
            a_gp: 0.01,
            b_gp: 0.5,
            degree: 10,
            rho_decay: 0.6,
            sigma_lambda_sq: 1.0,
            prior_mean: 0.0,
            alpha_fdr: 0.1,
            learning_rate: 0.9,
            tol: 1e-3,
            max_iter: 200,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let mut check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidConfig(msg.into()))
            }
        };
        check(self.a_omega > 0.0, "a_omega must be positive")?;
        check(self.b_omega > 0.0, "b_omega must be positive")?;
        check(self.sigma_gp_sq > 0.0, "sigma_gp_sq must be positive")?;
        check(self.a_gp > 0.0, "a_gp must be positive")?;
        check(self.b_gp > 0.0, "b_gp must be positive")?;
        check(
            self.rho_decay > 0.0 && self.rho_decay < 1.0,
            "rho_decay must lie in (0,1)",
        )?;
        check(self.sigma_lambda_sq > 0.0, "sigma_lambda_sq must be positive")?;
        check(
            self.alpha_fdr > 0.0 && self.alpha_fdr <= 1.0,
            "alpha_fdr must lie in (0,1]",
        )?;
        check(
            self.learning_rate > 0.0 && self.learning_rate <= 1.0,
            "learning_rate must lie in (0,1]",
        )?;
        check(self.tol > 0.0, "tol must be positive")?;
        check(self.max_iter > 0, "max_iter must be positive")?;
        Ok(())
    }
}

/// Loads an expression/coordinates CSV pair, joining cells on `cell_id` and
/// grouping them by FOV in file order.
pub fn load_dataset(
    expression_path: &Path,
    coords_path: &Path,
    fov_column: &str,
) -> Result<SpatialDataset> {
    let expr_path_s = expression_path.display().to_string();
    let coord_path_s = coords_path.display().to_string();

    let mut rdr = csv::Reader::from_path(expression_path)
        .map_err(|e| Error::csv(&expr_path_s, e))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::csv(&expr_path_s, e))?
        .clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.into(),
                path: expr_path_s.clone(),
            })
    };
    let id_col = col_index("cell_id")?;
    let fov_col = col_index(fov_column)?;
    let gene_cols: Vec<usize> = (0..headers.len())
        .filter(|&i| i != id_col && i != fov_col)
        .collect();
    let gene_names: Vec<String> = gene_cols.iter().map(|&i| headers[i].to_string()).collect();

    struct ExprRow {
        fov: u32,
        values: Vec<f64>,
    }
    let mut expr_rows: BTreeMap<u64, ExprRow> = BTreeMap::new();
    let mut order: Vec<u64> = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(&expr_path_s, e))?;
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| {
                Error::ShapeMismatch(format!(
                    "{expr_path_s} row {}: cannot parse {what} `{s}`",
                    line + 2
                ))
            })
        };
        let cell_id = rec[id_col].trim().parse::<u64>().map_err(|_| {
            Error::ShapeMismatch(format!(
                "{expr_path_s} row {}: cell_id `{}` is not an integer",
                line + 2,
                &rec[id_col]
            ))
        })?;
        let fov = parse(&rec[fov_col], "fov id")? as u32;
        let mut values = Vec::with_capacity(gene_cols.len());
        for &c in &gene_cols {
            values.push(parse(&rec[c], &format!("`{}`", headers[c]))?);
        }
        if expr_rows
            .insert(cell_id, ExprRow { fov, values })
            .is_some()
        {
            return Err(Error::ShapeMismatch(format!(
                "duplicate cell_id {cell_id} in {expr_path_s}"
            )));
        }
        order.push(cell_id);
    }

    let mut rdr = csv::Reader::from_path(coords_path)
        .map_err(|e| Error::csv(&coord_path_s, e))?;
    let cheaders = rdr
        .headers()
        .map_err(|e| Error::csv(&coord_path_s, e))?
        .clone();
    let ccol = |name: &str| -> Result<usize> {
        cheaders
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.into(),
                path: coord_path_s.clone(),
            })
    };
    let cid = ccol("cell_id")?;
    let cx = ccol("x")?;
    let cy = ccol("y")?;
    let mut coord_rows: BTreeMap<u64, [f64; 2]> = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::csv(&coord_path_s, e))?;
        let cell_id = rec[cid].trim().parse::<u64>().map_err(|_| {
            Error::ShapeMismatch(format!(
                "{coord_path_s} row {}: cell_id `{}` is not an integer",
                line + 2,
                &rec[cid]
            ))
        })?;
        let fx = rec[cx].trim().parse::<f64>().map_err(|_| {
            Error::ShapeMismatch(format!("{coord_path_s} row {}: bad x", line + 2))
        })?;
        let fy = rec[cy].trim().parse::<f64>().map_err(|_| {
            Error::ShapeMismatch(format!("{coord_path_s} row {}: bad y", line + 2))
        })?;
        coord_rows.insert(cell_id, [fx, fy]);
    }
    if coord_rows.len() != expr_rows.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} expression rows vs {} coordinate rows",
            expr_rows.len(),
            coord_rows.len()
        )));
    }

    // group by FOV, preserving expression-file row order within each FOV
    let mut by_fov: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
    for &cell_id in &order {
        let fov = expr_rows[&cell_id].fov;
        by_fov.entry(fov).or_default().push(cell_id);
    }
    let p = gene_names.len();
    let mut fovs = Vec::with_capacity(by_fov.len());
    for (fov_id, cells) in by_fov {
        let n = cells.len();
        let mut coords = Array2::<f64>::zeros((n, 2));
        let mut expr = Array2::<f64>::zeros((n, p));
        for (r, cell_id) in cells.iter().enumerate() {
            let xy = coord_rows.get(cell_id).ok_or_else(|| {
                Error::ShapeMismatch(format!("cell_id {cell_id} missing from {coord_path_s}"))
            })?;
            coords[[r, 0]] = xy[0];
            coords[[r, 1]] = xy[1];
            for (c, v) in expr_rows[cell_id].values.iter().enumerate() {
                expr[[r, c]] = *v;
            }
        }
        fovs.push(FovBlock::new(fov_id, coords, expr, cells));
    }
    SpatialDataset::new(fovs, gene_names, None)
}

/// Writes the dataset back out in the canonical CSV pair format.
pub fn write_dataset(
    dataset: &SpatialDataset,
    expression_path: &Path,
    coords_path: &Path,
) -> Result<()> {
    let expr_path_s = expression_path.display().to_string();
    let coord_path_s = coords_path.display().to_string();
    let mut ew =
        csv::Writer::from_path(expression_path).map_err(|e| Error::csv(&expr_path_s, e))?;
    let mut header = vec!["cell_id".to_string(), "fov".to_string()];
    header.extend(dataset.gene_names.iter().cloned());
    ew.write_record(&header).map_err(|e| Error::csv(&expr_path_s, e))?;
    let mut cw = csv::Writer::from_path(coords_path).map_err(|e| Error::csv(&coord_path_s, e))?;
    cw.write_record(["cell_id", "fov", "x", "y"])
        .map_err(|e| Error::csv(&coord_path_s, e))?;
    for fov in &dataset.fovs {
        for r in 0..fov.n_cells() {
            let mut rec = vec![fov.cell_ids[r].to_string(), fov.fov_id.to_string()];
            for c in 0..dataset.n_genes() {
                rec.push(format!("{}", fov.expression[[r, c]]));
            }
            ew.write_record(&rec).map_err(|e| Error::csv(&expr_path_s, e))?;
            cw.write_record([
                fov.cell_ids[r].to_string(),
                fov.fov_id.to_string(),
                format!("{}", fov.coordinates[[r, 0]]),
                format!("{}", fov.coordinates[[r, 1]]),
            ])
            .map_err(|e| Error::csv(&coord_path_s, e))?;
        }
    }
    ew.flush().map_err(|e| Error::io(&expr_path_s, e))?;
    cw.flush().map_err(|e| Error::io(&coord_path_s, e))?;
    Ok(())
}

/// Reads an optional `fov,region` CSV into a region-label map.
pub fn load_region_labels(path: &Path) -> Result<BTreeMap<u32, u32>> {
    let path_s = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::csv(&path_s, e))?;
    let headers = rdr.headers().map_err(|e| Error::csv(&path_s, e))?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                column: name.into(),
                path: path_s.clone(),
            })
    };
    let fc = find("fov")?;
    let rc = find("region")?;
    let mut map = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::csv(&path_s, e))?;
        let fov: u32 = rec[fc].trim().parse().map_err(|_| {
            Error::ShapeMismatch(format!("{path_s}: bad fov `{}`", &rec[fc]))
        })?;
        let region: u32 = rec[rc].trim().parse().map_err(|_| {
            Error::ShapeMismatch(format!("{path_s}: bad region `{}`", &rec[rc]))
        })?;
        map.insert(fov, region);
    }
    Ok(map)
}

/// Mean expression over all cells and genes of one FOV; the macro-level
/// summary used for spatial autocorrelation.
pub fn fov_mean_expression(dataset: &SpatialDataset) -> Array1<f64> {
    Array1::from_iter(dataset.fovs.iter().map(|f| {
        f.expression.iter().sum::<f64>() / (f.expression.len() as f64)
    }))
}
