//! Linear probing of frozen model representations.
//!
//! Features come from a deterministic (eps = 0) pass; the classifier is
//! multinomial logistic regression trained by full-batch gradient descent
//! with a fixed recipe, so probe numbers are exactly reproducible.

use crate::data::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::model::{ModelParams, VisibleSet};

/// Which representation feeds the probe.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ProbeFeatureKind {
    /// Concatenated decoder outputs for all modalities.
    Reconstructed,
    /// The `[mu]` output token.
    MuToken,
    /// Concatenated visible-modality output tokens.
    ModalityTokens,
    /// Concatenated register output tokens.
    RegisterTokens,
    /// Every hidden token: `[mu]`, `[sigma]`, registers, visible modalities.
    AllHidden,
}

impl ProbeFeatureKind {
    pub const ALL: [ProbeFeatureKind; 5] = [
        ProbeFeatureKind::Reconstructed,
        ProbeFeatureKind::MuToken,
        ProbeFeatureKind::ModalityTokens,
        ProbeFeatureKind::RegisterTokens,
        ProbeFeatureKind::AllHidden,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ProbeFeatureKind::Reconstructed => "reconstructed",
            ProbeFeatureKind::MuToken => "mu_token",
            ProbeFeatureKind::ModalityTokens => "modality_tokens",
            ProbeFeatureKind::RegisterTokens => "register_tokens",
            ProbeFeatureKind::AllHidden => "all_hidden",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown feature kind {s:?}")))
    }
}

/// Deterministic probe features for every record, given the visible set.
pub fn extract_features(
    params: &ModelParams,
    records: &[EmbeddingRecord],
    visible: &[usize],
    kind: ProbeFeatureKind,
) -> Result<Vec<Vec<f64>>> {
    let m = params.config.modality_count;
    let vs = VisibleSet::with_all_targets(visible.to_vec(), m)?;
    if kind == ProbeFeatureKind::RegisterTokens && params.config.registers == 0 {
        return Err(Error::InvalidArgument(
            "model has no register tokens".into(),
        ));
    }
    let out = params.infer(records, &vs)?;
    let e = params.config.encoder_dim;
    let r = params.config.registers;
    let t = out.tokens_per_record;
    let features = (0..records.len())
        .map(|i| match kind {
            ProbeFeatureKind::Reconstructed => {
                let mut f = Vec::with_capacity(m * params.config.d_in);
                for target in &out.recons {
                    f.extend_from_slice(&target[i]);
                }
                f
            }
            ProbeFeatureKind::MuToken => out.gaussians[i].mu.clone(),
            ProbeFeatureKind::ModalityTokens => out.hidden[i][(2 + r) * e..t * e].to_vec(),
            ProbeFeatureKind::RegisterTokens => out.hidden[i][2 * e..(2 + r) * e].to_vec(),
            ProbeFeatureKind::AllHidden => out.hidden[i].clone(),
        })
        .collect();
    Ok(features)
}

/// A trained multinomial logistic-regression probe, including the feature
/// standardization fitted on its training split.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    /// classes x dim, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

const PROBE_ITERS: usize = 500;
const PROBE_LR: f64 = 0.1;

/// Full-batch gradient descent, 500 iterations at lr 0.1 on standardized
/// features, zero-initialized. Entirely deterministic.
pub fn train_linear_probe(
    features: &[Vec<f64>],
    labels: &[u32],
    l2_penalty: f64,
) -> Result<LinearProbe> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::InvalidArgument(
            "features and labels must be nonempty and aligned".into(),
        ));
    }
    let classes = (*labels.iter().max().unwrap() as usize) + 1;
    let distinct = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l as usize] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::InvalidArgument(
            "probe needs at least two classes".into(),
        ));
    }
    let n = features.len();
    let dim = features[0].len();

    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut std = vec![0.0; dim];
    for f in features {
        for (s, (v, m)) in std.iter_mut().zip(f.iter().zip(&mean)) {
            *s += (v - m) * (v - m);
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let z: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            f.iter()
                .zip(mean.iter().zip(&std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        })
        .collect();

    let mut weights = vec![0.0; classes * dim];
    let mut bias = vec![0.0; classes];
    let mut probs = vec![0.0; classes];
    let mut gw = vec![0.0; classes * dim];
    let mut gb = vec![0.0; classes];
    for _ in 0..PROBE_ITERS {
        gw.iter_mut().for_each(|g| *g = 0.0);
        gb.iter_mut().for_each(|g| *g = 0.0);
        for (zi, &label) in z.iter().zip(labels) {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..classes {
                let row = &weights[c * dim..(c + 1) * dim];
                let logit = bias[c] + row.iter().zip(zi).map(|(w, x)| w * x).sum::<f64>();
                probs[c] = logit;
                mx = mx.max(logit);
            }
            let mut sum = 0.0;
            for p in probs.iter_mut() {
                *p = (*p - mx).exp();
                sum += *p;
            }
            for (c, p) in probs.iter_mut().enumerate() {
                *p /= sum;
                let err = *p - f64::from(c == label as usize);
                gb[c] += err;
                for (g, x) in gw[c * dim..(c + 1) * dim].iter_mut().zip(zi) {
                    *g += err * x;
                }
            }
        }
        let inv_n = 1.0 / n as f64;
        for (w, g) in weights.iter_mut().zip(&gw) {
            *w -= PROBE_LR * (g * inv_n + l2_penalty * *w);
        }
        for (b, g) in bias.iter_mut().zip(&gb) {
            *b -= PROBE_LR * g * inv_n;
        }
    }

    Ok(LinearProbe {
        classes,
        dim,
        weights,
        bias,
        mean,
        std,
    })
}

impl LinearProbe {
    /// Predicted class via argmax of the logits; ties break toward the
    /// lowest class index.
    pub fn predict(&self, feature: &[f64]) -> u32 {
        let z: Vec<f64> = feature
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect();
        let mut best = 0usize;
        let mut best_logit = f64::NEG_INFINITY;
        for c in 0..self.classes {
            let row = &self.weights[c * self.dim..(c + 1) * self.dim];
            let logit = self.bias[c] + row.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>();
            if logit > best_logit {
                best_logit = logit;
                best = c;
            }
        }
        best as u32
    }
}

/// Exact top-1 accuracy of the probe on a labeled feature set.
pub fn evaluate_probe(probe: &LinearProbe, features: &[Vec<f64>], labels: &[u32]) -> Result<f64> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::InvalidArgument(
            "features and labels must be nonempty and aligned".into(),
        ));
    }
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(f, &l)| probe.predict(f) == l)
        .count();
    Ok(correct as f64 / features.len() as f64)
}

/// One row of the probe report: feature kind, dimension, top-1 accuracy.
#[derive(Clone, Debug)]
pub struct ProbeReportRow {
    pub kind: ProbeFeatureKind,
    pub dim: usize,
    pub top1: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::stream_rng;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn separable_clusters_reach_full_train_accuracy() {
        let mut rng = stream_rng(1, "probe");
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2u32 {
            for _ in 0..30 {
                let center = if c == 0 { -3.0 } else { 3.0 };
                features.push(vec![
                    center + 0.1 * rng.sample::<f64, _>(StandardNormal),
                    0.1 * rng.sample::<f64, _>(StandardNormal),
                ]);
                labels.push(c);
            }
        }
        let probe = train_linear_probe(&features, &labels, 1e-4).unwrap();
        assert_eq!(evaluate_probe(&probe, &features, &labels).unwrap(), 1.0);
    }

    #[test]
    fn shuffled_labels_score_at_chance() {
        let mut rng = stream_rng(2, "probe-chance");
        let n_train = 600;
        let n_test = 500;
        let dim = 16;
        let classes = 10u32;
        let gen = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| {
            (0..n)
                .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>())
                .collect::<Vec<_>>()
        };
        let train_f = gen(&mut rng, n_train);
        let test_f = gen(&mut rng, n_test);
        let mut train_l: Vec<u32> = (0..n_train).map(|i| (i as u32) % classes).collect();
        train_l.shuffle(&mut rng);
        let test_l: Vec<u32> = (0..n_test).map(|i| (i as u32) % classes).collect();
        let probe = train_linear_probe(&train_f, &train_l, 1e-4).unwrap();
        let acc = evaluate_probe(&probe, &test_f, &test_l).unwrap();
        assert!((acc - 0.1).abs() <= 0.03, "accuracy {acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = stream_rng(3, "probe-det");
        let features: Vec<Vec<f64>> = (0..40)
            .map(|_| (0..4).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let labels: Vec<u32> = (0..40).map(|i| (i % 3) as u32).collect();
        let a = train_linear_probe(&features, &labels, 1e-4).unwrap();
        let b = train_linear_probe(&features, &labels, 1e-4).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bias, b.bias);
    }

    #[test]
    fn all_zero_features_predict_majority_class() {
        // Bias-only logistic regression converges toward class frequencies,
        // so the prediction is the majority class everywhere.
        let features: Vec<Vec<f64>> = vec![vec![0.0; 3]; 60];
        let labels: Vec<u32> = (0..60).map(|i| if i < 35 { 1 } else { 0 }).collect();
        let probe = train_linear_probe(&features, &labels, 1e-4).unwrap();
        let acc = evaluate_probe(&probe, &features, &labels).unwrap();
        assert_eq!(acc, 35.0 / 60.0);
    }

    #[test]
    fn random_classifier_on_balanced_classes_is_near_chance() {
        let mut rng = stream_rng(4, "probe-rand");
        let dim = 6;
        let classes = 5usize;
        let probe = LinearProbe {
            classes,
            dim,
            weights: (0..classes * dim).map(|_| rng.sample(StandardNormal)).collect(),
            bias: vec![0.0; classes],
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        };
        let n = 2000;
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
        let acc = evaluate_probe(&probe, &features, &labels).unwrap();
        assert!((acc - 0.2).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn relabeling_consistency() {
        // Permuting classifier rows by pi and labels by pi leaves accuracy
        // unchanged.
        let mut rng = stream_rng(5, "probe-perm");
        let dim = 4;
        let classes = 3usize;
        let probe = LinearProbe {
            classes,
            dim,
            weights: (0..classes * dim).map(|_| rng.sample(StandardNormal)).collect(),
            bias: (0..classes).map(|_| rng.sample(StandardNormal)).collect(),
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        };
        let pi = [2u32, 0, 1];
        let mut permuted = probe.clone();
        for c in 0..classes {
            let dst = pi[c] as usize;
            permuted.weights[dst * dim..(dst + 1) * dim]
                .copy_from_slice(&probe.weights[c * dim..(c + 1) * dim]);
            permuted.bias[dst] = probe.bias[c];
        }
        let features: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..dim).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        let labels: Vec<u32> = (0..200).map(|i| (i % classes) as u32).collect();
        let relabeled: Vec<u32> = labels.iter().map(|&l| pi[l as usize]).collect();
        let a = evaluate_probe(&probe, &features, &labels).unwrap();
        let b = evaluate_probe(&permuted, &features, &relabeled).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_class_rejected() {
        let features = vec![vec![1.0], vec![2.0]];
        assert!(train_linear_probe(&features, &[0, 0], 1e-4).is_err());
    }
}
