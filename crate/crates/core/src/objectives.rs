//! Preference objectives: the alignment measure `K`, its modulator `q(K)`,
//! the modulated-intervention loss, the DPO baseline and an optional SimPO
//! baseline.
//!
//! Everything is in nats. DPO works on summed response log-likelihoods while
//! the modulated loss works on length-averaged ones; the two paths are kept
//! separate on purpose and neither is normalized into the other.
//!
//! With `f` the policy's average log-likelihood margin between chosen and
//! rejected responses and `K` the same margin under the frozen reference:
//!
//! ```text
//! q(K)      = ln(1 + e^K)
//! loss      = -ln σ(β (f - q(K)))  = softplus(-β (f - q(K)))
//! dloss/df  = -β σ(-β (f - q(K)))
//! ```
//!
//! For large `K`, `q(K) → K` and the loss anchors `f` to the reference margin;
//! for very negative `K`, `q(K) → 0` and the reference drops out.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Var};
use crate::tinylm::SequenceLogLik;

/// Largest magnitude passed to `exp` inside the stable softplus.
pub const EXP_CLAMP: f64 = 700.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("beta must be > 0 (got {0})")]
    InvalidBeta(f64),
    #[error("gamma must be >= 0 (got {0})")]
    InvalidGamma(f64),
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Graph(#[from] DiffError),
}

/// Overflow-safe `ln(1 + e^x) = max(x, 0) + ln(1 + e^{-|x|})`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-(x.abs().min(EXP_CLAMP))).exp().ln_1p()
}

/// Logistic function evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x.min(EXP_CLAMP)).exp())
    } else {
        let e = x.max(-EXP_CLAMP).exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x) = -softplus(-x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// Reference-model statistics for one preference pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub id: String,
    pub ref_w: SequenceLogLik,
    pub ref_l: SequenceLogLik,
    pub k: f64,
}

impl PairStats {
    pub fn new(id: impl Into<String>, ref_w: SequenceLogLik, ref_l: SequenceLogLik) -> Self {
        let k = compute_k(&ref_w, &ref_l);
        Self {
            id: id.into(),
            ref_w,
            ref_l,
            k,
        }
    }

    /// Whether the stored `k` is exactly what the stored log-likelihoods give.
    pub fn is_consistent(&self) -> bool {
        self.k.is_finite() && compute_k(&self.ref_w, &self.ref_l).to_bits() == self.k.to_bits()
    }
}

/// Per-pair evaluation of the modulated loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub f_theta: f64,
    pub q_k: f64,
    pub loss: f64,
    pub dloss_df: f64,
    pub beta: f64,
}

/// Policy-minus-reference summed log-likelihood ratios used by DPO.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoMargins {
    pub dw: f64,
    pub dl: f64,
}

impl DpoMargins {
    pub fn from_sums(policy_w: f64, ref_w: f64, policy_l: f64, ref_l: f64) -> Self {
        Self {
            dw: policy_w - ref_w,
            dl: policy_l - ref_l,
        }
    }

    pub fn margin(&self) -> f64 {
        self.dw - self.dl
    }
}

/// How the reference margin enters the modulated loss.
///
/// `Softplus` is the real objective. `Identity` and `Zero` are its two
/// limiting forms, kept for loss-curve comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulator {
    Softplus,
    Identity,
    Zero,
}

impl Modulator {
    pub fn apply(self, k: f64) -> f64 {
        match self {
            Modulator::Softplus => q_of_k(k),
            Modulator::Identity => k,
            Modulator::Zero => 0.0,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Modulator::Softplus => "mipo",
            Modulator::Identity => "q_eq_k",
            Modulator::Zero => "q_zero",
        }
    }
}

/// Difference of average log-likelihoods of chosen and rejected responses
/// under the reference model.
pub fn compute_k(ref_w: &SequenceLogLik, ref_l: &SequenceLogLik) -> f64 {
    ref_w.avg_logp - ref_l.avg_logp
}

pub fn q_of_k(k: f64) -> f64 {
    softplus(k)
}

fn check_beta(beta: f64) -> Result<(), ObjectiveError> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::InvalidBeta(beta))
    }
}

pub fn mipo_loss(f_theta: f64, k: f64, beta: f64) -> Result<LossBreakdown, ObjectiveError> {
    mipo_loss_modulated(f_theta, k, beta, Modulator::Softplus)
}

pub fn mipo_loss_modulated(
    f_theta: f64,
    k: f64,
    beta: f64,
    modulator: Modulator,
) -> Result<LossBreakdown, ObjectiveError> {
    check_beta(beta)?;
    if !f_theta.is_finite() || !k.is_finite() {
        return Err(ObjectiveError::NonFinite("mipo_loss"));
    }
    let q_k = modulator.apply(k);
    let z = beta * (f_theta - q_k);
    Ok(LossBreakdown {
        f_theta,
        q_k,
        loss: softplus(-z),
        dloss_df: -beta * sigmoid(-z),
        beta,
    })
}

/// Differentiable form: gradient flows through `f_theta` only, `k` is a constant.
pub fn mipo_loss_var(g: &mut Graph, f_theta: Var, k: f64, beta: f64) -> Result<Var, ObjectiveError> {
    mipo_loss_var_modulated(g, f_theta, k, beta, Modulator::Softplus)
}

pub fn mipo_loss_var_modulated(
    g: &mut Graph,
    f_theta: Var,
    k: f64,
    beta: f64,
    modulator: Modulator,
) -> Result<Var, ObjectiveError> {
    check_beta(beta)?;
    if !k.is_finite() {
        return Err(ObjectiveError::NonFinite("mipo_loss"));
    }
    let neg = g.scale(f_theta, -beta);
    let arg = g.add_const(neg, beta * modulator.apply(k));
    Ok(g.softplus(arg))
}

/// `-ln σ(β (dw - dl))`.
pub fn dpo_loss(margins: DpoMargins, beta: f64) -> Result<f64, ObjectiveError> {
    check_beta(beta)?;
    if !margins.dw.is_finite() || !margins.dl.is_finite() {
        return Err(ObjectiveError::NonFinite("dpo_loss"));
    }
    Ok(softplus(-beta * margins.margin()))
}

/// Differentiable DPO loss from the policy's summed log-likelihoods and the
/// reference's (constant) summed log-likelihoods.
pub fn dpo_loss_var(
    g: &mut Graph,
    policy_w_sum: Var,
    policy_l_sum: Var,
    ref_w_sum: f64,
    ref_l_sum: f64,
    beta: f64,
) -> Result<Var, ObjectiveError> {
    check_beta(beta)?;
    let diff = g.sub(policy_w_sum, policy_l_sum)?;
    let neg = g.scale(diff, -beta);
    let arg = g.add_const(neg, beta * (ref_w_sum - ref_l_sum));
    Ok(g.softplus(arg))
}

fn check_gamma(gamma: f64) -> Result<(), ObjectiveError> {
    if gamma >= 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::InvalidGamma(gamma))
    }
}

/// Reference-free baseline on average log-likelihoods: `-ln σ(β f - γ)`.
///
/// Not part of the modulated method; provided for comparison runs.
pub fn simpo_loss(f_theta: f64, beta: f64, gamma: f64) -> Result<f64, ObjectiveError> {
    check_beta(beta)?;
    check_gamma(gamma)?;
    Ok(softplus(gamma - beta * f_theta))
}

pub fn simpo_loss_var(g: &mut Graph, f_theta: Var, beta: f64, gamma: f64) -> Result<Var, ObjectiveError> {
    check_beta(beta)?;
    check_gamma(gamma)?;
    let neg = g.scale(f_theta, -beta);
    let arg = g.add_const(neg, gamma);
    Ok(g.softplus(arg))
}

/// Closed-form derivative of the modulated loss with respect to `f`.
pub fn loss_grad_wrt_margin(b: &LossBreakdown) -> f64 {
    -b.beta * sigmoid(-b.beta * (b.f_theta - b.q_k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{gradcheck, Tensor};
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn ll(sum: f64, n: usize) -> SequenceLogLik {
        SequenceLogLik::new(sum, n).unwrap()
    }

    // no max/abs branching; accurate while e^x does not overflow
    fn naive_softplus(x: f64) -> f64 {
        x.exp().ln_1p()
    }

    #[test]
    fn k_from_forced_arithmetic() {
        let k = compute_k(&ll(-10.0, 5), &ll(-24.0, 8));
        assert_eq!(k, 1.0);
        assert_eq!(compute_k(&ll(-7.5, 3), &ll(-7.5, 3)), 0.0);
        let s = PairStats::new("p", ll(-10.0, 5), ll(-24.0, 8));
        assert!(s.is_consistent());
    }

    #[test]
    fn q_values() {
        assert!((q_of_k(0.0) - LN2).abs() < 1e-15);
        assert!((q_of_k(20.0) - 20.0).abs() < 1e-8);
        assert!(q_of_k(-20.0) < 2.1e-9);
        assert!(q_of_k(-20.0) > 0.0);
        // no overflow far out
        assert_eq!(q_of_k(800.0), 800.0);
        assert!(q_of_k(-800.0) >= 0.0);
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for i in -300..=300 {
            let x = i as f64 / 10.0;
            let a = softplus(x);
            let b = naive_softplus(x);
            assert!((a - b).abs() <= 1e-14 * b, "x={x}");
        }
        assert!((sigmoid(-10.0) - 4.539_786_870_243_44e-5).abs() < 1e-18);
        assert_eq!(sigmoid(1e6), 1.0);
        assert_eq!(sigmoid(-1e6), (-EXP_CLAMP).exp() / (1.0 + (-EXP_CLAMP).exp()));
        assert!((log_sigmoid(0.0) + LN2).abs() < 1e-15);
    }

    #[test]
    fn mipo_examples() {
        for &(k, beta) in &[(0.0, 1.0), (3.0, 10.0), (-4.0, 0.5)] {
            let b = mipo_loss(q_of_k(k), k, beta).unwrap();
            assert!((b.loss - LN2).abs() < 1e-15);
        }
        // policy = reference, beta 1, K 0
        let b = mipo_loss(0.0, 0.0, 1.0).unwrap();
        assert!((b.loss - 3f64.ln()).abs() < 1e-15);
        assert!((b.loss - 1.098612).abs() < 1e-6);
        // beta 10, f - q = 0.5
        let k = 1.3;
        let b = mipo_loss(q_of_k(k) + 0.5, k, 10.0).unwrap();
        assert!((b.loss - naive_softplus(-5.0)).abs() < 1e-12);
        assert!((b.loss - 6.7153e-3).abs() < 1e-7);
        assert!(b.q_k > 0.0 && b.q_k > k && b.loss >= 0.0 && b.dloss_df <= 0.0);
    }

    #[test]
    fn invalid_beta_rejected() {
        assert_eq!(
            mipo_loss(0.0, 0.0, 0.0).unwrap_err().to_string(),
            "beta must be > 0 (got 0)"
        );
        assert!(mipo_loss(0.0, 0.0, -1.0).is_err());
        assert!(dpo_loss(DpoMargins { dw: 0.0, dl: 0.0 }, 0.0).is_err());
        assert!(simpo_loss(0.0, 1.0, -0.1).is_err());
        assert!(mipo_loss(f64::NAN, 0.0, 1.0).is_err());
    }

    #[test]
    fn dpo_examples() {
        let init = DpoMargins::from_sums(-12.0, -12.0, -30.0, -30.0);
        assert_eq!(dpo_loss(init, 7.0).unwrap(), LN2);
        let a = DpoMargins::from_sums(-10.0 + 0.7, -10.0, -3.0, -3.0);
        let b = DpoMargins::from_sums(-40.0 + 0.7, -40.0, -90.0, -90.0);
        let (la, lb) = (dpo_loss(a, 2.0).unwrap(), dpo_loss(b, 2.0).unwrap());
        assert!((la - lb).abs() < 1e-12);
        let c = DpoMargins { dw: 2.0, dl: 0.0 };
        assert!((dpo_loss(c, 1.0).unwrap() - 0.126_928).abs() < 1e-6);
        assert!((dpo_loss(c, 1.0).unwrap() - naive_softplus(-2.0)).abs() < 1e-15);
    }

    #[test]
    fn simpo_examples() {
        assert!((simpo_loss(0.25, 2.0, 0.5).unwrap() - LN2).abs() < 1e-15);
        for &f in &[-1.0, 0.0, 0.4, 2.0] {
            let s = simpo_loss(f, 3.0, 0.0).unwrap();
            let m = mipo_loss(f, -50.0, 3.0).unwrap().loss;
            assert!((s - m).abs() < 1e-15, "f={f}");
        }
        let v = simpo_loss(1.0, 2.0, 0.5).unwrap();
        assert!((v - 0.201_413).abs() < 1e-6);
    }

    #[test]
    fn closed_form_margin_gradient() {
        let b = mipo_loss(q_of_k(0.7), 0.7, 4.0).unwrap();
        assert!((loss_grad_wrt_margin(&b) + 2.0).abs() < 1e-15);
        let b = mipo_loss(q_of_k(-1.0) + 10.0, -1.0, 1.0).unwrap();
        assert!((loss_grad_wrt_margin(&b) + 4.54e-5).abs() < 1e-7);
        assert_eq!(loss_grad_wrt_margin(&b), b.dloss_df);
    }

    #[test]
    fn var_forms_match_scalar_forms() {
        let mut g = Graph::new();
        let f = g.leaf(&Tensor::scalar(0.37).with_grad());
        let l = mipo_loss_var(&mut g, f, -0.4, 5.0).unwrap();
        let b = mipo_loss(0.37, -0.4, 5.0).unwrap();
        assert_eq!(g.scalar(l), b.loss);
        let grads = g.backward(l).unwrap();
        assert!((grads.get(f).unwrap()[0] - b.dloss_df).abs() < 1e-15);

        let mut g = Graph::new();
        let w = g.leaf(&Tensor::scalar(-4.0).with_grad());
        let lo = g.leaf(&Tensor::scalar(-6.0).with_grad());
        let l = dpo_loss_var(&mut g, w, lo, -5.0, -5.5, 2.0).unwrap();
        let expect = dpo_loss(DpoMargins::from_sums(-4.0, -5.0, -6.0, -5.5), 2.0).unwrap();
        assert!((g.scalar(l) - expect).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn margin_gradient_matches_finite_difference(
            f in -3.0f64..3.0, k in -6.0f64..6.0, beta in 0.1f64..20.0
        ) {
            let b = mipo_loss(f, k, beta).unwrap();
            let mut x = vec![f];
            let fd = gradcheck::central_difference(&mut x, 0, 1e-4 / beta, |v| {
                mipo_loss(v[0], k, beta).unwrap().loss
            });
            let rel = gradcheck::relative_error(loss_grad_wrt_margin(&b), fd);
            prop_assert!(rel < 1e-8 || (loss_grad_wrt_margin(&b) - fd).abs() < 1e-10, "rel {rel}");
        }

        #[test]
        fn q_dominates_and_is_increasing(k in -60.0f64..30.0, dk in 1e-3f64..5.0) {
            // beyond k ~ 37 the gap e^-k falls below one ulp of k
            prop_assert!(q_of_k(k) > k.max(0.0));
            prop_assert!(q_of_k(k + 40.0) >= k + 40.0);
            prop_assert!(q_of_k(k + dk) > q_of_k(k));
            // convexity along a chord
            let mid = q_of_k(k + dk / 2.0);
            prop_assert!(mid <= 0.5 * (q_of_k(k) + q_of_k(k + dk)) + 1e-12);
        }

        #[test]
        fn dpo_blind_to_shared_offset(
            pw in -80.0f64..0.0, rw in -80.0f64..0.0, pl in -80.0f64..0.0,
            rl in -80.0f64..0.0, c in -20.0f64..20.0, beta in 0.01f64..20.0
        ) {
            let base = dpo_loss(DpoMargins::from_sums(pw, rw, pl, rl), beta).unwrap();
            let shifted = dpo_loss(DpoMargins::from_sums(pw + c, rw + c, pl + c, rl + c), beta).unwrap();
            prop_assert!((base - shifted).abs() < 1e-12);
        }
    }
}
