//! Pure numerical forms of the SFT cross-entropy objective and the DPO
//! objective over externally supplied log-probabilities. Natural-log
//! convention throughout.

use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("invalid log-probability {0} (must be finite and <= 0)")]
    InvalidLogProb(f64),
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("empty batch")]
    EmptyBatch,
    #[error("beta must be finite and positive")]
    BadBeta,
}

/// Per-token natural log-probabilities of one generated sequence.
#[derive(Debug, Clone)]
pub struct SequenceLogProb<S> {
    pub token_logps: Vec<S>,
}

impl<S: Real> SequenceLogProb<S> {
    pub fn new(token_logps: Vec<S>) -> Result<Self, AlignError> {
        if token_logps.is_empty() {
            return Err(AlignError::EmptyBatch);
        }
        for &lp in &token_logps {
            if !lp.is_finite() || lp > S::zero() {
                return Err(AlignError::InvalidLogProb(lp.to_f64().unwrap_or(f64::NAN)));
            }
        }
        Ok(SequenceLogProb { token_logps })
    }
}

/// Sequence-summed log-probs of the chosen/rejected pair under the policy and
/// the frozen reference.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DpoExample<S> {
    pub policy_logp_w: S,
    pub ref_logp_w: S,
    pub policy_logp_l: S,
    pub ref_logp_l: S,
}

impl<S: Real> DpoExample<S> {
    fn validate(&self) -> Result<(), AlignError> {
        for v in [
            self.policy_logp_w,
            self.ref_logp_w,
            self.policy_logp_l,
            self.ref_logp_l,
        ] {
            if !v.is_finite() {
                return Err(AlignError::NonFinite(v.to_f64().unwrap_or(f64::NAN)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DpoConfig<S> {
    pub beta: S,
}

impl<S: Real> Default for DpoConfig<S> {
    fn default() -> Self {
        DpoConfig {
            beta: S::from_f64_lossy(0.1),
        }
    }
}

impl<S: Real> DpoConfig<S> {
    pub fn new(beta: S) -> Result<Self, AlignError> {
        if !beta.is_finite() || beta <= S::zero() {
            return Err(AlignError::BadBeta);
        }
        Ok(DpoConfig { beta })
    }
}

/// Autoregressive cross-entropy: negative sum of per-token log-probs.
pub fn sft_loss<S: Real>(seq: &SequenceLogProb<S>) -> Result<S, AlignError> {
    let mut sum = S::zero();
    for &lp in &seq.token_logps {
        if !lp.is_finite() || lp > S::zero() {
            return Err(AlignError::InvalidLogProb(lp.to_f64().unwrap_or(f64::NAN)));
        }
        sum = sum + lp;
    }
    Ok(-sum)
}

/// The beta-scaled difference of policy-vs-reference log-ratios between the
/// chosen and rejected sequences; the argument of the sigmoid in the DPO loss.
pub fn dpo_margin<S: Real>(ex: &DpoExample<S>, cfg: &DpoConfig<S>) -> Result<S, AlignError> {
    ex.validate()?;
    let ratio_w = ex.policy_logp_w - ex.ref_logp_w;
    let ratio_l = ex.policy_logp_l - ex.ref_logp_l;
    Ok(cfg.beta * (ratio_w - ratio_l))
}

/// Numerically stable softplus: `ln(1 + e^x)` without overflow.
fn softplus<S: Real>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// `-ln sigma(margin)`, evaluated as `softplus(-margin)` so large negative
/// margins do not overflow.
pub fn dpo_loss<S: Real>(ex: &DpoExample<S>, cfg: &DpoConfig<S>) -> Result<S, AlignError> {
    Ok(softplus(-dpo_margin(ex, cfg)?))
}

/// Loss of a raw margin value, for diagnostics and finite-difference checks.
pub fn dpo_loss_of_margin<S: Real>(margin: S) -> S {
    softplus(-margin)
}

/// Exact derivative of `-ln sigma(m)` with respect to the margin:
/// `sigma(m) - 1`.
pub fn dpo_loss_grad_wrt_margin<S: Real>(margin: S) -> S {
    sigmoid(margin) - S::one()
}

/// Batch summary of the DPO objective over a preference dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpoBatchReport {
    pub count: usize,
    pub mean_loss: f64,
    pub mean_margin: f64,
    /// Fraction of examples with strictly positive margin.
    pub implicit_accuracy: f64,
}

pub fn batch_dpo_report<S: Real>(
    examples: &[DpoExample<S>],
    cfg: &DpoConfig<S>,
) -> Result<DpoBatchReport, AlignError> {
    if examples.is_empty() {
        return Err(AlignError::EmptyBatch);
    }
    let mut loss_sum = 0.0f64;
    let mut margin_sum = 0.0f64;
    let mut positive = 0usize;
    for ex in examples {
        let margin = dpo_margin(ex, cfg)?;
        loss_sum += dpo_loss_of_margin(margin).to_f64().unwrap();
        let m = margin.to_f64().unwrap();
        margin_sum += m;
        if m > 0.0 {
            positive += 1;
        }
    }
    let n = examples.len() as f64;
    Ok(DpoBatchReport {
        count: examples.len(),
        mean_loss: loss_sum / n,
        mean_margin: margin_sum / n,
        implicit_accuracy: positive as f64 / n,
    })
}

/// JSONL row shape for externally supplied preference log-probs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpoExampleRow {
    pub query_id: String,
    pub policy_logp_w: f64,
    pub ref_logp_w: f64,
    pub policy_logp_l: f64,
    pub ref_logp_l: f64,
}

impl DpoExampleRow {
    pub fn example<S: Real>(&self) -> DpoExample<S> {
        DpoExample {
            policy_logp_w: S::from_f64_lossy(self.policy_logp_w),
            ref_logp_w: S::from_f64_lossy(self.ref_logp_w),
            policy_logp_l: S::from_f64_lossy(self.policy_logp_l),
            ref_logp_l: S::from_f64_lossy(self.ref_logp_l),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn ex(w: f64, l: f64) -> DpoExample<f64> {
        // Log-ratios directly: reference at 0.
        DpoExample {
            policy_logp_w: w,
            ref_logp_w: 0.0,
            policy_logp_l: l,
            ref_logp_l: 0.0,
        }
    }

    #[test]
    fn sft_loss_known_values() {
        // token probs 0.5 and 0.25: ln 2 + ln 4.
        let seq = SequenceLogProb::new(vec![(0.5f64).ln(), (0.25f64).ln()]).unwrap();
        assert!((sft_loss(&seq).unwrap() - 2.079442).abs() < 1e-6);
        let perfect = SequenceLogProb::new(vec![0.0]).unwrap();
        assert_eq!(sft_loss(&perfect).unwrap(), 0.0);
    }

    #[test]
    fn sft_loss_rejects_positive_logp() {
        assert!(SequenceLogProb::new(vec![0.1]).is_err());
        assert!(SequenceLogProb::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn sft_loss_additive_over_concatenation() {
        let a = SequenceLogProb::new(vec![-0.3, -0.7]).unwrap();
        let b = SequenceLogProb::new(vec![-1.1]).unwrap();
        let joined = SequenceLogProb::new(vec![-0.3, -0.7, -1.1]).unwrap();
        let sum: f64 = sft_loss(&a).unwrap() + sft_loss(&b).unwrap();
        assert!((sft_loss(&joined).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn margin_zero_at_initialization() {
        // Policy initialized from the reference: all ratios vanish.
        let cfg = DpoConfig::default();
        assert_eq!(dpo_margin(&ex(0.0, 0.0), &cfg).unwrap(), 0.0);
    }

    #[test]
    fn margin_arithmetic_and_linearity_in_beta() {
        let cfg = DpoConfig::new(0.1).unwrap();
        let m = dpo_margin(&ex(2.0, -1.0), &cfg).unwrap();
        assert!((m - 0.3).abs() < 1e-12);
        let cfg2 = DpoConfig::new(0.2).unwrap();
        let m2 = dpo_margin(&ex(2.0, -1.0), &cfg2).unwrap();
        assert!((m2 - 2.0 * m).abs() < 1e-12);
    }

    #[test]
    fn loss_closed_forms() {
        assert!((dpo_loss_of_margin(0.0) - LN2).abs() < 1e-12);
        assert!((dpo_loss_of_margin(0.3f64) - 0.554355).abs() < 1e-6);
        // Asymptote: softplus(50) ~ 50 with no overflow.
        let big: f64 = dpo_loss_of_margin(-50.0);
        assert!(big.is_finite());
        assert!((big - 50.0).abs() < 1e-12);
        assert!(dpo_loss_of_margin(50.0) < 1e-20);
    }

    #[test]
    fn grad_matches_finite_differences() {
        let h = 1e-5;
        for m in [-5.0, -1.0, 0.0, 1.0, 5.0] {
            let fd: f64 = (dpo_loss_of_margin(m + h) - dpo_loss_of_margin(m - h)) / (2.0 * h);
            assert!((dpo_loss_grad_wrt_margin(m) - fd).abs() < 1e-6, "m = {m}");
        }
        assert_eq!(dpo_loss_grad_wrt_margin(0.0), -0.5);
        assert!(dpo_loss_grad_wrt_margin(100.0f64).abs() < 1e-12);
    }

    #[test]
    fn loss_strictly_decreasing_and_convex() {
        let margins = [-10.0, -2.0, -0.5, 0.0, 0.5, 2.0, 10.0];
        for pair in margins.windows(2) {
            assert!(dpo_loss_of_margin(pair[0]) > dpo_loss_of_margin(pair[1]));
        }
        for m in [0.1, 0.5, 1.0, 3.0] {
            let sym = dpo_loss_of_margin(m) + dpo_loss_of_margin(-m);
            assert!(sym > 2.0 * LN2);
        }
        let eq = dpo_loss_of_margin(0.0) + dpo_loss_of_margin(-0.0);
        assert!((eq - 2.0 * LN2).abs() < 1e-12);
    }

    #[test]
    fn batch_report_examples() {
        let cfg = DpoConfig::default();
        let zeros = vec![ex(0.0, 0.0); 3];
        let report = batch_dpo_report(&zeros, &cfg).unwrap();
        assert!((report.mean_loss - LN2).abs() < 1e-12);
        assert_eq!(report.implicit_accuracy, 0.0);

        let mixed = vec![ex(2.0, -1.0), ex(-1.0, 2.0)];
        let report = batch_dpo_report(&mixed, &cfg).unwrap();
        let expect =
            (dpo_loss(&mixed[0], &cfg).unwrap() + dpo_loss(&mixed[1], &cfg).unwrap()) / 2.0;
        assert!((report.mean_loss - expect).abs() < 1e-12);
        assert_eq!(report.implicit_accuracy, 0.5);

        let single = vec![ex(3.0, 0.0)];
        let report = batch_dpo_report(&single, &cfg).unwrap();
        assert!((report.mean_loss - dpo_loss(&single[0], &cfg).unwrap()).abs() < 1e-15);

        assert_eq!(
            batch_dpo_report::<f64>(&[], &cfg).unwrap_err(),
            AlignError::EmptyBatch
        );
    }

    #[test]
    fn f32_path_agrees_with_f64() {
        let cfg32 = DpoConfig::<f32>::new(0.1).unwrap();
        let e32 = DpoExample {
            policy_logp_w: 2.0f32,
            ref_logp_w: 0.0,
            policy_logp_l: -1.0,
            ref_logp_l: 0.0,
        };
        let loss32 = dpo_loss(&e32, &cfg32).unwrap();
        assert!((loss32 as f64 - 0.554355).abs() < 1e-5);
    }
}
