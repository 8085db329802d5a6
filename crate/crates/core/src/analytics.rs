//! Uncertainty, modality-gap, species-diversity and rank-correlation
//! analytics over a frozen model and dataset.

use std::collections::HashMap;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Dataset, EmbeddingRecord, LOCATION_MODALITY};
use crate::error::{Error, Result};
use crate::model::{ModelParams, VisibleSet};

/// L1 norm of the predicted standard deviations: `sum_d exp(0.5 * log_var_d)`.
/// Lower values mean the visible modalities pin the latent down more tightly.
pub fn sigma_l1(log_var: &[f64]) -> f64 {
    log_var.iter().map(|lv| (0.5 * lv).exp()).sum()
}

/// Euclidean distance between the centroids of two embedding sets.
pub fn modality_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("empty embedding set".into()));
    }
    let d = a[0].len();
    if b[0].len() != d {
        return Err(Error::ShapeMismatch {
            op: "modality_gap",
            lhs: (a.len(), d),
            rhs: (b.len(), b[0].len()),
        });
    }
    let centroid = |set: &[Vec<f64>]| {
        let mut c = vec![0.0; d];
        for v in set {
            for (ci, vi) in c.iter_mut().zip(v) {
                *ci += vi;
            }
        }
        c.iter_mut().for_each(|ci| *ci /= set.len() as f64);
        c
    };
    let (ca, cb) = (centroid(a), centroid(b));
    Ok(ca
        .iter()
        .zip(&cb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Shannon diversity index `-sum p ln p` of a species count vector.
/// Zero-count entries contribute nothing.
pub fn shannon_index(counts: &[u64]) -> Result<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::InvalidArgument("all species counts are zero".into()));
    }
    Ok(counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::InvalidArgument(
            "correlation needs two equal series of length >= 3".into(),
        ));
    }
    let n = x.len() as f64;
    let (mx, my) = (
        x.iter().sum::<f64>() / n,
        y.iter().sum::<f64>() / n,
    );
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in x.iter().zip(y) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx == 0.0 || dy == 0.0 {
        return Err(Error::InvalidArgument(
            "correlation undefined for a constant series".into(),
        ));
    }
    Ok(num / (dx * dy).sqrt())
}

/// Average ranks with ties sharing the mean of their positions.
fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average 1-based rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling, plus the
/// two-sided p-value from the t approximation
/// `t = rho sqrt((n - 2) / (1 - rho^2))`.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    let rho = pearson(&average_ranks(x), &average_ranks(y))?;
    let n = x.len() as f64;
    let p = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * ((n - 2.0) / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, n - 2.0)
            .map_err(|e| Error::InvalidArgument(format!("t distribution: {e}")))?;
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok((rho, p))
}

/// One visible set's aggregates over an evaluation split.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub visible: Vec<usize>,
    pub mean_sigma_l1: f64,
    /// Mean squared reconstruction error over the masked targets (eps = 0);
    /// NaN when nothing is masked.
    pub mean_recon_mse: f64,
}

#[derive(Clone, Debug)]
pub struct UncertaintyReport {
    pub rows: Vec<SweepRow>,
    /// Correlations between the per-set mean sigma-L1 and mean MSE series,
    /// over rows with a nonempty masked set.
    pub pearson: f64,
    pub spearman_rho: f64,
}

/// Encodes the evaluation split under each visible set and relates predicted
/// uncertainty to masked-target reconstruction error.
pub fn uncertainty_sweep(
    params: &ModelParams,
    eval_set: &Dataset,
    visible_sets: &[Vec<usize>],
) -> Result<UncertaintyReport> {
    let m = params.config.modality_count;
    let mut rows = Vec::with_capacity(visible_sets.len());
    for visible in visible_sets {
        let masked: Vec<usize> = (0..m).filter(|i| !visible.contains(i)).collect();
        let vs = if masked.is_empty() {
            VisibleSet::with_all_targets(visible.clone(), m)?
        } else {
            VisibleSet::new(visible.clone(), masked.clone())?
        };
        let out = params.infer(&eval_set.records, &vs)?;
        let mean_sigma = out
            .gaussians
            .iter()
            .map(|g| sigma_l1(&g.log_var))
            .sum::<f64>()
            / eval_set.len() as f64;
        let mean_mse = if masked.is_empty() {
            f64::NAN
        } else {
            let mut sum = 0.0;
            let mut count = 0usize;
            for (ti, &target) in vs.targets.iter().enumerate() {
                for (i, record) in eval_set.records.iter().enumerate() {
                    let truth = &record.embeddings[target];
                    let pred = &out.recons[ti][i];
                    sum += pred
                        .iter()
                        .zip(truth)
                        .map(|(p, t)| (p - t) * (p - t))
                        .sum::<f64>();
                    count += truth.len();
                }
            }
            sum / count as f64
        };
        rows.push(SweepRow {
            visible: visible.clone(),
            mean_sigma_l1: mean_sigma,
            mean_recon_mse: mean_mse,
        });
    }
    let xs: Vec<f64> = rows
        .iter()
        .filter(|r| r.mean_recon_mse.is_finite())
        .map(|r| r.mean_sigma_l1)
        .collect();
    let ys: Vec<f64> = rows
        .iter()
        .filter(|r| r.mean_recon_mse.is_finite())
        .map(|r| r.mean_recon_mse)
        .collect();
    let (pearson_c, spearman_c) = if xs.len() >= 3 {
        (pearson(&xs, &ys)?, spearman(&xs, &ys)?.0)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(UncertaintyReport {
        rows,
        pearson: pearson_c,
        spearman_rho: spearman_c,
    })
}

/// Centroid gap between one modality pair at the three representation
/// stages, for one context visible set.
#[derive(Clone, Debug)]
pub struct GapRow {
    pub context: Vec<usize>,
    pub input_gap: f64,
    pub projected_gap: f64,
    pub hidden_gap: f64,
}

#[derive(Clone, Debug)]
pub struct GapReport {
    pub pair: (usize, usize),
    pub rows: Vec<GapRow>,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-30);
    v.iter().map(|x| x / n).collect()
}

/// Measures the centroid gap between the pair's representations at the raw
/// input, projected-token, and encoder-hidden stages. Vectors are
/// L2-normalized per stage so widths and scales stay comparable across
/// stages; every context set must contain both pair members.
pub fn gap_sweep(
    params: &ModelParams,
    eval_set: &Dataset,
    pair: (usize, usize),
    context_sets: &[Vec<usize>],
) -> Result<GapReport> {
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let (a, b) = pair;
    let input_a: Vec<Vec<f64>> = eval_set
        .records
        .iter()
        .map(|r| unit(&r.embeddings[a]))
        .collect();
    let input_b: Vec<Vec<f64>> = eval_set
        .records
        .iter()
        .map(|r| unit(&r.embeddings[b]))
        .collect();
    let input_gap = modality_gap(&input_a, &input_b)?;

    let proj_a: Vec<Vec<f64>> = params
        .project_modality(&eval_set.records, a)?
        .iter()
        .map(|v| unit(v))
        .collect();
    let proj_b: Vec<Vec<f64>> = params
        .project_modality(&eval_set.records, b)?
        .iter()
        .map(|v| unit(v))
        .collect();
    let projected_gap = modality_gap(&proj_a, &proj_b)?;

    let e = params.config.encoder_dim;
    let r = params.config.registers;
    let mut rows = Vec::with_capacity(context_sets.len());
    for context in context_sets {
        if !context.contains(&a) || !context.contains(&b) {
            return Err(Error::InvalidArgument(format!(
                "context set {context:?} must contain the pair ({a}, {b})"
            )));
        }
        let vs = VisibleSet::with_all_targets(context.clone(), params.config.modality_count)?;
        let out = params.infer(&eval_set.records, &vs)?;
        let pos = |m: usize| 2 + r + vs.visible.iter().position(|&v| v == m).unwrap();
        let (pa, pb) = (pos(a), pos(b));
        let hid_a: Vec<Vec<f64>> = out
            .hidden
            .iter()
            .map(|h| unit(&h[pa * e..(pa + 1) * e]))
            .collect();
        let hid_b: Vec<Vec<f64>> = out
            .hidden
            .iter()
            .map(|h| unit(&h[pb * e..(pb + 1) * e]))
            .collect();
        rows.push(GapRow {
            context: vs.visible.clone(),
            input_gap,
            projected_gap,
            hidden_gap: modality_gap(&hid_a, &hid_b)?,
        });
    }
    Ok(GapReport { pair, rows })
}

/// Mean sigma-L1 of location-only encodings, one value per record.
pub fn location_sigma_l1(params: &ModelParams, records: &[EmbeddingRecord]) -> Result<Vec<f64>> {
    let vs = VisibleSet::with_all_targets(vec![LOCATION_MODALITY], params.config.modality_count)?;
    let out = params.infer(records, &vs)?;
    Ok(out.gaussians.iter().map(|g| sigma_l1(&g.log_var)).collect())
}

#[derive(Clone, Debug)]
pub struct GridCell {
    pub present: bool,
    pub observations: usize,
    pub shannon: f64,
    pub richness: f64,
    pub sigma_l1: f64,
}

/// Species diversity / richness / uncertainty maps over a lat-lon grid.
#[derive(Clone, Debug)]
pub struct DiversityGrid {
    pub rows: usize,
    pub cols: usize,
    /// (lat_min, lat_max, lon_min, lon_max)
    pub bbox: (f64, f64, f64, f64),
    pub smoothing_sigma: f64,
    /// Row-major; row 0 is the southernmost band.
    pub cells: Vec<GridCell>,
}

impl DiversityGrid {
    pub fn lat_center(&self, row: usize) -> f64 {
        let (lat_min, lat_max, _, _) = self.bbox;
        lat_min + (row as f64 + 0.5) * (lat_max - lat_min) / self.rows as f64
    }

    pub fn lon_center(&self, col: usize) -> f64 {
        let (_, _, lon_min, lon_max) = self.bbox;
        lon_min + (col as f64 + 0.5) * (lon_max - lon_min) / self.cols as f64
    }

    pub fn cell(&self, row: usize, col: usize) -> &GridCell {
        &self.cells[row * self.cols + col]
    }

    /// (shannon, sigma_l1) pairs over present cells, for correlation.
    pub fn present_series(&self) -> (Vec<f64>, Vec<f64>) {
        let mut s = Vec::new();
        let mut u = Vec::new();
        for c in &self.cells {
            if c.present {
                s.push(c.shannon);
                u.push(c.sigma_l1);
            }
        }
        (s, u)
    }
}

/// Bins records into a rows x cols grid over the bounding box, computes the
/// per-cell Shannon index, unique-species richness and mean sigma-L1, then
/// applies truncated Gaussian smoothing (radius 3 sigma, renormalized over
/// present cells). Cells without observations stay absent.
pub fn build_diversity_grid(
    records: &[EmbeddingRecord],
    sigma_per_record: &[f64],
    grid_dims: (usize, usize),
    bbox: (f64, f64, f64, f64),
    smoothing_sigma: f64,
) -> Result<DiversityGrid> {
    let (rows, cols) = grid_dims;
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("grid dims must be positive".into()));
    }
    let (lat_min, lat_max, lon_min, lon_max) = bbox;
    if !(lat_max > lat_min && lon_max > lon_min) {
        return Err(Error::InvalidArgument("invalid bounding box".into()));
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to grid".into()));
    }
    if sigma_per_record.len() != records.len() {
        return Err(Error::InvalidArgument(
            "sigma series must align with records".into(),
        ));
    }

    let mut species: Vec<HashMap<u32, u64>> = vec![HashMap::new(); rows * cols];
    let mut sigma_sum = vec![0.0; rows * cols];
    let mut counts = vec![0usize; rows * cols];
    for (rec, &sig) in records.iter().zip(sigma_per_record) {
        let r = (((rec.lat - lat_min) / (lat_max - lat_min) * rows as f64).floor() as isize)
            .clamp(0, rows as isize - 1) as usize;
        let c = (((rec.lon - lon_min) / (lon_max - lon_min) * cols as f64).floor() as isize)
            .clamp(0, cols as isize - 1) as usize;
        let idx = r * cols + c;
        *species[idx].entry(rec.species_id).or_insert(0) += 1;
        sigma_sum[idx] += sig;
        counts[idx] += 1;
    }

    let mut cells: Vec<GridCell> = (0..rows * cols)
        .map(|i| {
            if counts[i] == 0 {
                GridCell {
                    present: false,
                    observations: 0,
                    shannon: f64::NAN,
                    richness: f64::NAN,
                    sigma_l1: f64::NAN,
                }
            } else {
                let cts: Vec<u64> = species[i].values().copied().collect();
                GridCell {
                    present: true,
                    observations: counts[i],
                    shannon: shannon_index(&cts).expect("nonempty cell"),
                    richness: species[i].len() as f64,
                    sigma_l1: sigma_sum[i] / counts[i] as f64,
                }
            }
        })
        .collect();

    if smoothing_sigma > 0.0 {
        let radius = (3.0 * smoothing_sigma).ceil() as isize;
        let smooth = |value: &dyn Fn(&GridCell) -> f64| -> Vec<f64> {
            let mut out = vec![f64::NAN; rows * cols];
            for r in 0..rows as isize {
                for c in 0..cols as isize {
                    if !cells[(r as usize) * cols + c as usize].present {
                        continue;
                    }
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for dr in -radius..=radius {
                        for dc in -radius..=radius {
                            let (nr, nc) = (r + dr, c + dc);
                            if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                                continue;
                            }
                            let cell = &cells[(nr as usize) * cols + nc as usize];
                            if !cell.present {
                                continue;
                            }
                            let w = (-((dr * dr + dc * dc) as f64)
                                / (2.0 * smoothing_sigma * smoothing_sigma))
                                .exp();
                            num += w * value(cell);
                            den += w;
                        }
                    }
                    out[(r as usize) * cols + c as usize] = num / den;
                }
            }
            out
        };
        let sh = smooth(&|c: &GridCell| c.shannon);
        let ri = smooth(&|c: &GridCell| c.richness);
        let si = smooth(&|c: &GridCell| c.sigma_l1);
        for (i, cell) in cells.iter_mut().enumerate() {
            if cell.present {
                cell.shannon = sh[i];
                cell.richness = ri[i];
                cell.sigma_l1 = si[i];
            }
        }
    }

    Ok(DiversityGrid {
        rows,
        cols,
        bbox,
        smoothing_sigma,
        cells,
    })
}
