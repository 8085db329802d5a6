//! Training objectives: contrastive embedding reconstruction, the KL
//! regularizer that keeps the latent variance from collapsing, their
//! weighted combination, and a plain MSE alternative for ablation.

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};

/// Pairwise Euclidean distances between predicted and ground-truth rows,
/// differentiable with respect to both sides. Entry (j, p) is the distance
/// between prediction j and truth p.
pub fn distance_matrix(g: &mut Graph, pred: TensorId, truth: TensorId) -> Result<TensorId> {
    g.pairwise_dist(pred, truth)
}

/// Contrastive reconstruction loss over a distance matrix:
/// `-(1/N) sum_j log softmax_row(alpha * d + beta)[j][j]`,
/// evaluated through a row log-sum-exp so no exponential overflows.
///
/// `alpha` must be negative so that a smaller distance means a larger logit.
/// `beta` adds the same constant to every logit in a row and therefore
/// cancels in the softmax; it is kept for parity with the learned scalars.
pub fn contrastive_recon_loss(
    g: &mut Graph,
    d: TensorId,
    alpha: TensorId,
    beta: TensorId,
) -> Result<TensorId> {
    let (r, c) = g.shape(d);
    if r != c {
        return Err(Error::ShapeMismatch {
            op: "contrastive_recon_loss",
            lhs: (r, c),
            rhs: (r, r),
        });
    }
    if g.value(d).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "distance matrix".into(),
        });
    }
    let a = g.scalar_value(alpha)?;
    if a >= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "alpha must be negative, got {a}"
        )));
    }
    let s = g.mul_scalar(d, alpha)?;
    let s = g.add_scalar(s, beta)?;
    let lse = g.row_log_sum_exp(s);
    let diag = g.diag(s)?;
    let per_row = g.sub(lse, diag)?;
    Ok(g.mean_all(per_row))
}

/// The raw softmax-ratio form of the contrastive objective, without the
/// logarithm: `(1/N) sum_j exp(s_jj - lse_j)`. Inspection only; minimizing
/// it pushes the matched distance up, not down.
pub fn softmax_ratio_loss(
    g: &mut Graph,
    d: TensorId,
    alpha: TensorId,
    beta: TensorId,
) -> Result<TensorId> {
    let s = g.mul_scalar(d, alpha)?;
    let s = g.add_scalar(s, beta)?;
    let lse = g.row_log_sum_exp(s);
    let diag = g.diag(s)?;
    let log_ratio = g.sub(diag, lse)?;
    let ratio = g.exp(log_ratio);
    Ok(g.mean_all(ratio))
}

/// KL divergence between N(mu, sigma^2) and N(0, 1), summed over latent
/// dimensions and averaged over the batch:
/// `mean_batch sum_dims -1/2 (1 + log sigma^2 - mu^2 - sigma^2)`.
pub fn vib_loss(g: &mut Graph, mu: TensorId, log_var: TensorId) -> Result<TensorId> {
    let (sm, sl) = (g.shape(mu), g.shape(log_var));
    if sm != sl {
        return Err(Error::ShapeMismatch {
            op: "vib_loss",
            lhs: sm,
            rhs: sl,
        });
    }
    let one_plus = g.add_const(log_var, 1.0);
    let mu_sq = g.mul(mu, mu)?;
    let t = g.sub(one_plus, mu_sq)?;
    let var = g.exp(log_var);
    let t = g.sub(t, var)?;
    let half = g.scale(t, -0.5);
    let per_record = g.row_sum(half);
    Ok(g.mean_all(per_record))
}

/// Mean of the per-modality reconstruction losses plus `lambda` times the
/// KL regularizer, applied exactly once.
pub fn total_loss(
    g: &mut Graph,
    recon_losses: &[TensorId],
    vib: TensorId,
    lambda: f64,
) -> Result<TensorId> {
    if recon_losses.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one reconstruction loss".into(),
        ));
    }
    let mut acc = recon_losses[0];
    for &l in &recon_losses[1..] {
        acc = g.add(acc, l)?;
    }
    let mean = g.scale(acc, 1.0 / recon_losses.len() as f64);
    let weighted = g.scale(vib, lambda);
    g.add(mean, weighted)
}

/// Mean squared error over all entries.
pub fn mse_loss(g: &mut Graph, pred: TensorId, truth: TensorId) -> Result<TensorId> {
    let d = g.sub(pred, truth)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean_all(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::stream_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn scalar_of(g: &Graph, id: TensorId) -> f64 {
        g.scalar_value(id).unwrap()
    }

    fn alpha_beta(g: &mut Graph, a: f64, b: f64) -> (TensorId, TensorId) {
        (
            g.leaf(1, 1, vec![a]).unwrap(),
            g.leaf(1, 1, vec![b]).unwrap(),
        )
    }

    #[test]
    fn distance_matrix_zero_diagonal_when_pred_equals_truth() {
        let mut g = Graph::new();
        let x = g.leaf(3, 2, vec![1.0, 2.0, -0.5, 0.25, 3.0, -1.0]).unwrap();
        let y = g.leaf(3, 2, vec![1.0, 2.0, -0.5, 0.25, 3.0, -1.0]).unwrap();
        let d = distance_matrix(&mut g, x, y).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(d)[i * 3 + i], 0.0);
        }
    }

    #[test]
    fn distance_matrix_zero_off_diagonal_for_matching_rows() {
        let mut g = Graph::new();
        let pred = g.leaf(2, 2, vec![1.0, 1.0, 5.0, 5.0]).unwrap();
        // truth row 1 equals pred row 0
        let truth = g.leaf(2, 2, vec![9.0, 9.0, 1.0, 1.0]).unwrap();
        let d = distance_matrix(&mut g, pred, truth).unwrap();
        assert_eq!(g.value(d)[1], 0.0); // entry (0, 1)
    }

    #[test]
    fn distance_matrix_matches_double_loop_oracle() {
        let mut rng = stream_rng(3, "dist-oracle");
        let pred: Vec<f64> = (0..15).map(|_| rng.sample(StandardNormal)).collect();
        let truth: Vec<f64> = (0..15).map(|_| rng.sample(StandardNormal)).collect();
        let mut g = Graph::new();
        let p = g.leaf(5, 3, pred.clone()).unwrap();
        let t = g.leaf(5, 3, truth.clone()).unwrap();
        let d = distance_matrix(&mut g, p, t).unwrap();
        for j in 0..5 {
            for q in 0..5 {
                let mut s = 0.0;
                for k in 0..3 {
                    let diff = pred[j * 3 + k] - truth[q * 3 + k];
                    s += diff * diff;
                }
                assert!((g.value(d)[j * 5 + q] - s.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn contrastive_on_constant_matrix_is_log_n() {
        for n in [2usize, 4, 7] {
            let mut g = Graph::new();
            let d = g.leaf(n, n, vec![3.7; n * n]).unwrap();
            let (a, b) = alpha_beta(&mut g, -5.0, 5.0);
            let loss = contrastive_recon_loss(&mut g, d, a, b).unwrap();
            assert!((scalar_of(&g, loss) - (n as f64).ln()).abs() < 1e-10);
        }
    }

    #[test]
    fn contrastive_single_candidate_is_zero() {
        let mut g = Graph::new();
        let d = g.leaf(1, 1, vec![2.5]).unwrap();
        let (a, b) = alpha_beta(&mut g, -2.0, 1.0);
        let loss = contrastive_recon_loss(&mut g, d, a, b).unwrap();
        assert_eq!(scalar_of(&g, loss), 0.0);
    }

    // Frozen from an independent scalar evaluation of the formula:
    // d has zero diagonal and 10 elsewhere, alpha = -5, beta = 5, N = 4.
    // Row logits are 5 on the diagonal and -45 off it, so each row's loss is
    // ln(1 + 3 e^{-50}) = 3e-50 up to f64 rounding, i.e. 0.0.
    #[test]
    fn contrastive_matches_direct_scalar_evaluation() {
        let n = 4;
        let mut dv = vec![10.0; n * n];
        for i in 0..n {
            dv[i * n + i] = 0.0;
        }
        // Direct evaluation with plain loops.
        let (alpha, beta) = (-5.0, 5.0);
        let mut direct = 0.0;
        for j in 0..n {
            let num = (alpha * dv[j * n + j] + beta as f64).exp();
            let den: f64 = (0..n).map(|p| (alpha * dv[j * n + p] + beta).exp()).sum();
            direct += -(num / den).ln();
        }
        direct /= n as f64;

        let mut g = Graph::new();
        let d = g.leaf(n, n, dv).unwrap();
        let (a, b) = alpha_beta(&mut g, alpha, beta);
        let loss = contrastive_recon_loss(&mut g, d, a, b).unwrap();
        assert!((scalar_of(&g, loss) - direct).abs() < 1e-12);
    }

    #[test]
    fn contrastive_is_invariant_to_beta() {
        let mut rng = stream_rng(8, "beta");
        let dv: Vec<f64> = (0..25).map(|_| rng.gen_range(0.0..4.0)).collect();
        let mut vals = Vec::new();
        for beta in [-40.0, 0.0, 5.0, 60.0] {
            let mut g = Graph::new();
            let d = g.leaf(5, 5, dv.clone()).unwrap();
            let (a, b) = alpha_beta(&mut g, -3.0, beta);
            let loss = contrastive_recon_loss(&mut g, d, a, b).unwrap();
            vals.push(scalar_of(&g, loss));
        }
        for v in &vals[1..] {
            assert!((v - vals[0]).abs() < 1e-10, "{vals:?}");
        }
    }

    #[test]
    fn contrastive_rejects_positive_alpha() {
        let mut g = Graph::new();
        let d = g.leaf(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (a, b) = alpha_beta(&mut g, 0.5, 0.0);
        assert!(contrastive_recon_loss(&mut g, d, a, b).is_err());
    }

    #[test]
    fn contrastive_rejects_non_finite_distances() {
        let mut g = Graph::new();
        let d = g.leaf(2, 2, vec![0.0, f64::NAN, 1.0, 0.0]).unwrap();
        let (a, b) = alpha_beta(&mut g, -1.0, 0.0);
        assert!(matches!(
            contrastive_recon_loss(&mut g, d, a, b),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn contrastive_decreases_when_a_diagonal_distance_shrinks() {
        let mut rng = stream_rng(12, "mono");
        for _ in 0..5 {
            let n = 4;
            let mut dv: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.5..3.0)).collect();
            let eval = |dv: &[f64]| {
                let mut g = Graph::new();
                let d = g.leaf(n, n, dv.to_vec()).unwrap();
                let (a, b) = alpha_beta(&mut g, -2.0, 1.0);
                let loss = contrastive_recon_loss(&mut g, d, a, b).unwrap();
                scalar_of(&g, loss)
            };
            let before = eval(&dv);
            dv[2 * n + 2] -= 0.3;
            let after = eval(&dv);
            assert!(after < before);
        }
    }

    #[test]
    fn contrastive_is_nonnegative() {
        let mut rng = stream_rng(4, "nonneg");
        for _ in 0..20 {
            let n = 3;
            let dv: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..5.0)).collect();
            let mut g = Graph::new();
            let d = g.leaf(n, n, dv).unwrap();
            let (a, b) = alpha_beta(&mut g, -rng.gen_range(0.1..6.0), rng.gen_range(-2.0..2.0));
            let loss = contrastive_recon_loss(&mut g, d, a, b).unwrap();
            assert!(scalar_of(&g, loss) >= 0.0);
        }
    }

    #[test]
    fn vib_zero_at_standard_normal() {
        let mut g = Graph::new();
        let mu = g.leaf_zeros(3, 4).unwrap();
        let lv = g.leaf_zeros(3, 4).unwrap();
        let loss = vib_loss(&mut g, mu, lv).unwrap();
        assert_eq!(scalar_of(&g, loss), 0.0);
    }

    #[test]
    fn vib_unit_mean_one_dim_is_half() {
        // -1/2 (1 + 0 - 1 - 1) = 1/2
        let mut g = Graph::new();
        let mu = g.leaf(1, 1, vec![1.0]).unwrap();
        let lv = g.leaf_zeros(1, 1).unwrap();
        let loss = vib_loss(&mut g, mu, lv).unwrap();
        assert_eq!(scalar_of(&g, loss), 0.5);
    }

    #[test]
    fn vib_positive_on_random_inputs() {
        let mut rng = stream_rng(5, "vibpos");
        for _ in 0..1000 {
            let mu_v: f64 = rng.sample::<f64, _>(StandardNormal);
            let lv_v: f64 = rng.sample::<f64, _>(StandardNormal);
            if mu_v == 0.0 && lv_v == 0.0 {
                continue;
            }
            let mut g = Graph::new();
            let mu = g.leaf(1, 1, vec![mu_v]).unwrap();
            let lv = g.leaf(1, 1, vec![lv_v]).unwrap();
            let loss = vib_loss(&mut g, mu, lv).unwrap();
            assert!(scalar_of(&g, loss) >= 0.0, "mu {mu_v} lv {lv_v}");
        }
    }

    #[test]
    fn vib_matches_monte_carlo_kl() {
        // KL(N(mu, s^2) || N(0,1)) estimated as E_z[log q(z) - log p(z)]
        // over draws z ~ N(mu, s^2).
        let mut rng = stream_rng(6, "vib-mc");
        let n = 1_000_000usize;
        for case in 0..3 {
            let mu_v: f64 = rng.gen_range(-1.5..1.5);
            let lv_v: f64 = rng.gen_range(-1.0..1.0);
            let sigma = (0.5 * lv_v).exp();
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let z = mu_v + sigma * rng.sample::<f64, _>(StandardNormal);
                // log q - log p with the common normalizer folded in.
                let lq = -0.5 * ((z - mu_v) / sigma).powi(2) - sigma.ln();
                let lp = -0.5 * z * z;
                let v = lq - lp;
                sum += v;
                sum_sq += v * v;
            }
            let mc = sum / n as f64;
            let se = ((sum_sq / n as f64 - mc * mc) / n as f64).sqrt();

            let mut g = Graph::new();
            let mu = g.leaf(1, 1, vec![mu_v]).unwrap();
            let lv = g.leaf(1, 1, vec![lv_v]).unwrap();
            let loss = vib_loss(&mut g, mu, lv).unwrap();
            let closed = scalar_of(&g, loss);
            assert!(
                (closed - mc).abs() < 3.0 * se,
                "case {case}: closed {closed} vs mc {mc} (se {se})"
            );
        }
    }

    #[test]
    fn total_loss_lambda_zero_is_pure_mean() {
        let mut g = Graph::new();
        let l1 = g.leaf(1, 1, vec![2.0]).unwrap();
        let l2 = g.leaf(1, 1, vec![4.0]).unwrap();
        let vib = g.leaf(1, 1, vec![100.0]).unwrap();
        let total = total_loss(&mut g, &[l1, l2], vib, 0.0).unwrap();
        assert_eq!(scalar_of(&g, total), 3.0);
    }

    #[test]
    fn total_loss_constant_recons() {
        let mut g = Graph::new();
        let c = 1.25;
        let ls: Vec<TensorId> = (0..6).map(|_| g.leaf(1, 1, vec![c]).unwrap()).collect();
        let vib = g.leaf(1, 1, vec![3.0]).unwrap();
        let total = total_loss(&mut g, &ls, vib, 0.001).unwrap();
        assert!((scalar_of(&g, total) - (c + 0.001 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn total_loss_matches_hand_sum() {
        let vals = [0.9, 1.7, 0.2, 2.4, 1.1, 0.6];
        let vib_v = 7.3;
        let lambda = 0.02;
        let mut g = Graph::new();
        let ls: Vec<TensorId> = vals.iter().map(|&v| g.leaf(1, 1, vec![v]).unwrap()).collect();
        let vib = g.leaf(1, 1, vec![vib_v]).unwrap();
        let total = total_loss(&mut g, &ls, vib, lambda).unwrap();
        let hand = vals.iter().sum::<f64>() / 6.0 + lambda * vib_v;
        assert!((scalar_of(&g, total) - hand).abs() < 1e-14);
    }

    #[test]
    fn mse_trivial_cases_and_oracle() {
        let mut g = Graph::new();
        let x = g.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let same = mse_loss(&mut g, x, x).unwrap();
        assert_eq!(scalar_of(&g, same), 0.0);

        let y = g.leaf(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap();
        let off = mse_loss(&mut g, x, y).unwrap();
        assert_eq!(scalar_of(&g, off), 1.0);

        let mut rng = stream_rng(7, "mse");
        let a: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.sample(StandardNormal)).collect();
        let mut g = Graph::new();
        let pa = g.leaf(4, 3, a.clone()).unwrap();
        let pb = g.leaf(4, 3, b.clone()).unwrap();
        let loss = mse_loss(&mut g, pa, pb).unwrap();
        let oracle = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / 12.0;
        assert!((scalar_of(&g, loss) - oracle).abs() < 1e-12);
    }

    #[test]
    fn ratio_form_rewards_large_matched_distance() {
        // The un-logged ratio drops when the matched distance grows, which is
        // why it is inspection-only.
        let eval = |diag: f64| {
            let mut g = Graph::new();
            let mut dv = vec![1.0; 4];
            dv[0] = diag;
            dv[3] = diag;
            let d = g.leaf(2, 2, dv).unwrap();
            let (a, b) = alpha_beta(&mut g, -2.0, 0.0);
            let loss = softmax_ratio_loss(&mut g, d, a, b).unwrap();
            scalar_of(&g, loss)
        };
        assert!(eval(3.0) < eval(0.1));
    }
}
