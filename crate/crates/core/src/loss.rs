//! Segmentation losses with analytic logit gradients, and pseudo-label construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pixel softmax over the class axis of `N×K×H×W` logits.
pub fn softmax(logits: &Tensor) -> Tensor {
    let [n, k, h, w] = logits.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(logits.shape());
    for s in 0..n {
        let src = logits.sample(s);
        let dst = out.sample_mut(s);
        for i in 0..plane {
            let mut m = f32::NEG_INFINITY;
            for c in 0..k {
                m = m.max(src[c * plane + i]);
            }
            let mut z = 0.0f32;
            for c in 0..k {
                let e = (src[c * plane + i] - m).exp();
                dst[c * plane + i] = e;
                z += e;
            }
            for c in 0..k {
                dst[c * plane + i] /= z;
            }
        }
    }
    out
}

/// Backpropagates `grad_probs` through the softmax that produced `probs`.
fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Tensor {
    let [n, k, h, w] = probs.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(probs.shape());
    for s in 0..n {
        let p = probs.sample(s);
        let g = grad_probs.sample(s);
        let o = out.sample_mut(s);
        for i in 0..plane {
            let mut dot = 0.0f32;
            for c in 0..k {
                dot += p[c * plane + i] * g[c * plane + i];
            }
            for c in 0..k {
                o[c * plane + i] = p[c * plane + i] * (g[c * plane + i] - dot);
            }
        }
    }
    out
}

fn check_labels(logits: &Tensor, labels: &[u8]) -> Result<()> {
    let [n, k, h, w] = logits.shape();
    if labels.len() != n * h * w {
        return Err(Error::invalid(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::invalid(format!("label {bad} outside {k} classes")));
    }
    Ok(())
}

/// A scalar loss and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Tensor,
}

/// Mean pixelwise cross-entropy plus soft Dice (smooth 1, averaged over all classes).
/// `labels` is `N×H×W`, row-major per sample.
pub fn ce_dice(logits: &Tensor, labels: &[u8]) -> Result<LossGrad> {
    check_labels(logits, labels)?;
    let [n, k, h, w] = logits.shape();
    let plane = h * w;
    let total = (n * plane) as f64;
    let probs = softmax(logits);

    let mut ce = 0.0f64;
    let mut inter = vec![0.0f64; k];
    let mut psum = vec![0.0f64; k];
    let mut gsum = vec![0.0f64; k];
    for s in 0..n {
        let p = probs.sample(s);
        for i in 0..plane {
            let y = labels[s * plane + i] as usize;
            ce -= (p[y * plane + i].max(f32::MIN_POSITIVE) as f64).ln();
            inter[y] += p[y * plane + i] as f64;
            gsum[y] += 1.0;
            for c in 0..k {
                psum[c] += p[c * plane + i] as f64;
            }
        }
    }
    ce /= total;
    let mut dice = 0.0f64;
    let mut coef_g = vec![0.0f64; k];
    let mut coef_c = vec![0.0f64; k];
    for c in 0..k {
        let den = psum[c] + gsum[c] + 1.0;
        dice += 1.0 - (2.0 * inter[c] + 1.0) / den;
        // d/dp of the class term: (2I+1)/den² - 2g/den
        coef_g[c] = -2.0 / den / k as f64;
        coef_c[c] = (2.0 * inter[c] + 1.0) / (den * den) / k as f64;
    }
    dice /= k as f64;

    // Dice gradient with respect to probabilities, pushed through the softmax
    let mut grad_p = Tensor::zeros(logits.shape());
    for s in 0..n {
        let g = grad_p.sample_mut(s);
        for i in 0..plane {
            let y = labels[s * plane + i] as usize;
            for c in 0..k {
                g[c * plane + i] = coef_c[c] as f32;
            }
            g[y * plane + i] += coef_g[y] as f32;
        }
    }
    let mut grad = softmax_backward(&probs, &grad_p);
    // cross-entropy part: (p - onehot) / pixels
    let scale = (1.0 / total) as f32;
    for s in 0..n {
        let p = probs.sample(s);
        let g = grad.sample_mut(s);
        for i in 0..plane {
            let y = labels[s * plane + i] as usize;
            for c in 0..k {
                let onehot = if c == y { 1.0 } else { 0.0 };
                g[c * plane + i] += (p[c * plane + i] - onehot) * scale;
            }
        }
    }
    Ok(LossGrad {
        value: ce + dice,
        grad,
    })
}

/// Pseudo-labels with per-pixel confidence and retention mask, all `N×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelBatch {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub hard_labels: Vec<u8>,
    pub confidence: Vec<f32>,
    pub mask: Vec<bool>,
}

impl PseudoLabelBatch {
    /// Combines `t·p_if + (1 − t)·p_af` (or uses `p_if` alone), takes the argmax with
    /// ties to the lowest class, and keeps pixels whose confidence reaches `tau`.
    pub fn from_probs(p_if: &Tensor, p_af: Option<&Tensor>, t: f32, tau: f32) -> Result<Self> {
        if let Some(af) = p_af {
            if af.shape() != p_if.shape() {
                return Err(Error::invalid("ensemble members disagree in shape"));
            }
        }
        let [n, k, h, w] = p_if.shape();
        let plane = h * w;
        let mut hard_labels = Vec::with_capacity(n * plane);
        let mut confidence = Vec::with_capacity(n * plane);
        let mut mask = Vec::with_capacity(n * plane);
        for s in 0..n {
            let a = p_if.sample(s);
            let b = p_af.map(|t| t.sample(s));
            for i in 0..plane {
                let mut best = 0usize;
                let mut best_p = f32::NEG_INFINITY;
                for c in 0..k {
                    let v = match b {
                        Some(b) => t * a[c * plane + i] + (1.0 - t) * b[c * plane + i],
                        None => a[c * plane + i],
                    };
                    if v > best_p {
                        best_p = v;
                        best = c;
                    }
                }
                hard_labels.push(best as u8);
                confidence.push(best_p);
                mask.push(best_p >= tau);
            }
        }
        Ok(Self {
            n,
            height: h,
            width: w,
            hard_labels,
            confidence,
            mask,
        })
    }

    pub fn mask_rate(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    /// Re-thresholds at a different confidence level.
    pub fn with_threshold(&self, tau: f32) -> Self {
        Self {
            mask: self.confidence.iter().map(|&c| c >= tau).collect(),
            ..self.clone()
        }
    }
}

/// Normalizer of the masked cross-entropy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskedMean {
    /// Divide by every pixel, so a fully rejected batch contributes 0.
    #[default]
    Total,
    /// Divide by retained pixels only (0 when none are retained).
    Retained,
}

/// Cross-entropy against hard pseudo-labels on retained pixels.
pub fn masked_cross_entropy(logits: &Tensor, pseudo: &PseudoLabelBatch, mean: MaskedMean) -> Result<LossGrad> {
    check_labels(logits, &pseudo.hard_labels)?;
    let [n, k, h, w] = logits.shape();
    let plane = h * w;
    if pseudo.mask.len() != n * plane {
        return Err(Error::invalid("pseudo-label mask does not match the logits"));
    }
    let retained = pseudo.mask.iter().filter(|&&m| m).count();
    let denom = match mean {
        MaskedMean::Total => (n * plane) as f64,
        MaskedMean::Retained => retained as f64,
    };
    let mut grad = Tensor::zeros(logits.shape());
    if retained == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let probs = softmax(logits);
    let mut loss = 0.0f64;
    let scale = (1.0 / denom) as f32;
    for s in 0..n {
        let p = probs.sample(s);
        let g = grad.sample_mut(s);
        for i in 0..plane {
            let idx = s * plane + i;
            if !pseudo.mask[idx] {
                continue;
            }
            let y = pseudo.hard_labels[idx] as usize;
            loss -= (p[y * plane + i].max(f32::MIN_POSITIVE) as f64).ln();
            for c in 0..k {
                let onehot = if c == y { 1.0 } else { 0.0 };
                g[c * plane + i] = (p[c * plane + i] - onehot) * scale;
            }
        }
    }
    Ok(LossGrad {
        value: loss / denom,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_logits(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    fn check_gradient(f: impl Fn(&Tensor) -> LossGrad, logits: &Tensor) {
        let analytic = f(logits).grad;
        let eps = 1e-2f32;
        for i in 0..logits.numel() {
            let mut up = logits.clone();
            up.data_mut()[i] += eps;
            let mut down = logits.clone();
            down.data_mut()[i] -= eps;
            let numeric = (f(&up).value - f(&down).value) / (2.0 * eps as f64);
            let an = analytic.data()[i] as f64;
            assert!((numeric - an).abs() < 1e-3 * (1.0 + an.abs()), "index {i}: {numeric} vs {an}");
        }
    }

    #[test]
    fn one_pixel_closed_form() {
        let logits = Tensor::zeros([1, 2, 1, 1]);
        let out = ce_dice(&logits, &[0]).unwrap();
        // class 0: 1 - 2/2.5, class 1: 1 - 1/1.5
        let dice = (0.2 + 1.0 / 3.0) / 2.0;
        assert!((out.value - (std::f64::consts::LN_2 + dice)).abs() < 1e-6);
    }

    #[test]
    fn perfect_logits_give_small_loss() {
        let labels = [0u8, 1, 1, 0];
        let mut logits = Tensor::zeros([1, 2, 2, 2]);
        for (i, &y) in labels.iter().enumerate() {
            logits.data_mut()[y as usize * 4 + i] = 30.0;
        }
        let out = ce_dice(&logits, &labels).unwrap();
        assert!(out.value < 1e-2 && out.value > 0.0);
    }

    #[test]
    fn ce_dice_gradient_matches_finite_differences() {
        let logits = random_logits([2, 3, 3, 2], 1);
        let labels: Vec<u8> = (0..12).map(|i| (i % 3) as u8).collect();
        check_gradient(|l| ce_dice(l, &labels).unwrap(), &logits);
    }

    #[test]
    fn invalid_labels_are_rejected() {
        let logits = Tensor::zeros([1, 2, 1, 2]);
        assert!(ce_dice(&logits, &[0, 2]).is_err());
        assert!(ce_dice(&logits, &[0]).is_err());
    }

    fn full_mask(labels: Vec<u8>, mask: Vec<bool>, h: usize, w: usize) -> PseudoLabelBatch {
        PseudoLabelBatch {
            n: labels.len() / (h * w),
            height: h,
            width: w,
            confidence: vec![1.0; labels.len()],
            hard_labels: labels,
            mask,
        }
    }

    #[test]
    fn masked_ce_cases() {
        let uniform = Tensor::zeros([1, 2, 2, 2]);
        let pl = full_mask(vec![0, 1, 1, 0], vec![true; 4], 2, 2);
        let v = masked_cross_entropy(&uniform, &pl, MaskedMean::Total).unwrap().value;
        assert!((v - std::f64::consts::LN_2).abs() < 1e-7);

        let none = full_mask(vec![0, 1, 1, 0], vec![false; 4], 2, 2);
        let out = masked_cross_entropy(&uniform, &none, MaskedMean::Total).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(masked_cross_entropy(&uniform, &none, MaskedMean::Retained).unwrap().value, 0.0);

        let mut strong = Tensor::zeros([1, 2, 2, 2]);
        for (i, &y) in pl.hard_labels.iter().enumerate() {
            strong.data_mut()[y as usize * 4 + i] = 20.0;
        }
        assert!(masked_cross_entropy(&strong, &pl, MaskedMean::Total).unwrap().value < 1e-3);

        let half = full_mask(vec![0, 1, 1, 0], vec![true, false, true, false], 2, 2);
        let total = masked_cross_entropy(&uniform, &half, MaskedMean::Total).unwrap().value;
        let retained = masked_cross_entropy(&uniform, &half, MaskedMean::Retained).unwrap().value;
        assert!((total - std::f64::consts::LN_2 / 2.0).abs() < 1e-7);
        assert!((retained - std::f64::consts::LN_2).abs() < 1e-7);

        let bad = full_mask(vec![0, 3, 1, 0], vec![true; 4], 2, 2);
        assert!(masked_cross_entropy(&uniform, &bad, MaskedMean::Total).is_err());
    }

    #[test]
    fn masked_ce_gradient_matches_finite_differences() {
        let logits = random_logits([2, 3, 2, 2], 2);
        let pl = full_mask(
            (0..8).map(|i| (i % 3) as u8).collect(),
            (0..8).map(|i| i % 3 != 1).collect(),
            2,
            2,
        );
        check_gradient(|l| masked_cross_entropy(l, &pl, MaskedMean::Total).unwrap(), &logits);
    }

    #[test]
    fn ensemble_hand_example() {
        let p_if = Tensor::from_vec([1, 2, 1, 1], vec![0.9, 0.1]).unwrap();
        let p_af = Tensor::from_vec([1, 2, 1, 1], vec![0.7, 0.3]).unwrap();
        let pl = PseudoLabelBatch::from_probs(&p_if, Some(&p_af), 0.5, 0.95).unwrap();
        assert_eq!(pl.hard_labels, vec![0]);
        assert!((pl.confidence[0] - 0.8).abs() < 1e-6);
        assert_eq!(pl.mask, vec![false]);

        let same = PseudoLabelBatch::from_probs(&p_if, Some(&p_if), 0.5, 0.85).unwrap();
        let single = PseudoLabelBatch::from_probs(&p_if, None, 1.0, 0.85).unwrap();
        assert_eq!(same, single);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let p = Tensor::from_vec([1, 3, 1, 1], vec![0.25, 0.375, 0.375]).unwrap();
        let pl = PseudoLabelBatch::from_probs(&p, None, 1.0, 0.5).unwrap();
        assert_eq!(pl.hard_labels, vec![1]);
    }

    proptest! {
        #[test]
        fn mask_rate_monotone_in_tau(seed in 0u64..200) {
            let probs = softmax(&random_logits([2, 3, 4, 4], seed));
            let pl = PseudoLabelBatch::from_probs(&probs, None, 1.0, 0.0).unwrap();
            let mut prev = f64::INFINITY;
            for i in 0..=21 {
                let tau = i as f32 * 0.05;
                let rate = pl.with_threshold(tau).mask_rate();
                prop_assert!(rate <= prev);
                prev = rate;
            }
            prop_assert_eq!(pl.with_threshold(1.01).mask_rate(), 0.0);
        }

        #[test]
        fn softmax_rows_sum_to_one(seed in 0u64..200) {
            let p = softmax(&random_logits([1, 4, 3, 3], seed));
            for i in 0..9 {
                let s: f32 = (0..4).map(|c| p.data()[c * 9 + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
    }
}
