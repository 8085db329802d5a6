//! Hybrid cross-modal retrieval: mix the raw query embedding with the
//! model's reconstruction of the target modality, score the gallery by
//! cosine similarity, and report recall@k.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelParams, VisibleSet};

#[derive(Clone, Debug)]
pub struct RetrievalConfig {
    pub query_modality: usize,
    pub target_modality: usize,
    /// Mixing coefficient: 0 keeps the raw query, 1 uses the reconstruction.
    pub delta: f64,
    pub k_list: Vec<usize>,
}

impl RetrievalConfig {
    pub fn new(query_modality: usize, target_modality: usize, delta: f64) -> Result<Self> {
        if query_modality == target_modality {
            return Err(Error::InvalidArgument(
                "query and target modality must differ".into(),
            ));
        }
        if !(0.0..=1.0).contains(&delta) {
            return Err(Error::InvalidArgument(format!(
                "delta {delta} outside [0, 1]"
            )));
        }
        Ok(RetrievalConfig {
            query_modality,
            target_modality,
            delta,
            k_list: vec![1, 5, 10],
        })
    }
}

#[derive(Clone, Debug)]
pub struct RetrievalResult {
    /// (k, recall@k) in ascending k.
    pub recalls: Vec<(usize, f64)>,
    /// 1-based rank of the true target per query.
    pub ranks: Vec<usize>,
    pub delta: f64,
    pub gallery_size: usize,
}

/// `(1 - delta) * query + delta * reconstruction`, exact convex combination.
pub fn hybrid_query(f_q: &[f64], f_hat_t: &[f64], delta: f64) -> Result<Vec<f64>> {
    if f_q.len() != f_hat_t.len() {
        return Err(Error::ShapeMismatch {
            op: "hybrid_query",
            lhs: (1, f_q.len()),
            rhs: (1, f_hat_t.len()),
        });
    }
    Ok(f_q
        .iter()
        .zip(f_hat_t)
        .map(|(q, r)| (1.0 - delta) * q + delta * r)
        .collect())
}

/// Gallery indices in descending cosine similarity; ties break toward the
/// lower index. The query need not be normalized (cosine handles scale).
pub fn rank_gallery(query: &[f64], gallery: &[Vec<f64>]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument("empty gallery".into()));
    }
    let qn = query.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
    let mut scored: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let dot: f64 = query.iter().zip(row).map(|(a, b)| a * b).sum();
            let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
            (i, dot / (qn * rn))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().map(|(i, _)| i).collect())
}

/// Fraction of queries whose true target ranks within the top k.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if k < 1 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if ranks.is_empty() {
        return Err(Error::InvalidArgument("no queries".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Reconstructs the target modality for every record with only the query
/// modality visible (eps = 0), then evaluates paired retrieval against the
/// gallery of ground-truth target embeddings.
pub fn evaluate(
    params: &ModelParams,
    eval_set: &Dataset,
    cfg: &RetrievalConfig,
) -> Result<RetrievalResult> {
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let vs = VisibleSet::new(vec![cfg.query_modality], vec![cfg.target_modality])?;
    let out = params.infer(&eval_set.records, &vs)?;
    let recons = &out.recons[0];

    let gallery: Vec<Vec<f64>> = eval_set
        .records
        .iter()
        .map(|r| r.embeddings[cfg.target_modality].clone())
        .collect();

    let mut ranks = Vec::with_capacity(eval_set.len());
    for (i, record) in eval_set.records.iter().enumerate() {
        let q = hybrid_query(&record.embeddings[cfg.query_modality], &recons[i], cfg.delta)?;
        let order = rank_gallery(&q, &gallery)?;
        let rank = order.iter().position(|&g| g == i).expect("index present") + 1;
        ranks.push(rank);
    }
    let recalls = cfg
        .k_list
        .iter()
        .map(|&k| Ok((k, recall_at_k(&ranks, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RetrievalResult {
        recalls,
        ranks,
        delta: cfg.delta,
        gallery_size: gallery.len(),
    })
}

/// Grid-searches delta over {0, 0.05, ..., 1.0} on the validation set.
/// Best R@1 wins; ties go to higher R@5, then to the smaller delta.
pub fn tune_delta(
    params: &ModelParams,
    val_set: &Dataset,
    base: &RetrievalConfig,
) -> Result<(f64, RetrievalResult)> {
    let mut best: Option<(f64, RetrievalResult, f64, f64)> = None;
    for i in 0..=20 {
        let delta = i as f64 / 20.0;
        let cfg = RetrievalConfig {
            delta,
            ..base.clone()
        };
        let res = evaluate(params, val_set, &cfg)?;
        let r1 = recall_at_k(&res.ranks, 1)?;
        let r5 = recall_at_k(&res.ranks, 5)?;
        let better = match &best {
            None => true,
            Some((_, _, best_r1, best_r5)) => {
                r1 > *best_r1 || (r1 == *best_r1 && r5 > *best_r5)
            }
        };
        if better {
            best = Some((delta, res, r1, r5));
        }
    }
    let (delta, res, _, _) = best.expect("grid is nonempty");
    Ok((delta, res))
}
