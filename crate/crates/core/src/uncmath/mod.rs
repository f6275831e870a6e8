//! Probability and uncertainty primitives: categorical and Dirichlet
//! distributions, entropies, divergences and the total/data/knowledge
//! uncertainty split.
//!
//! All quantities are in nats and computed in `f64`.

mod special;

use serde::{Deserialize, Serialize};

pub use special::{digamma, ln_gamma, trigamma};
pub(crate) use special::{digamma_unchecked, ln_gamma_unchecked, trigamma_unchecked};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Tolerance on Σp = 1 accepted by [`Categorical::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A discrete distribution over `K ≥ 1` outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution("no outcomes".into()));
        }
        for (i, &p) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidDistribution(format!(
                    "probs[{i}] = {p} outside [0, 1]"
                )));
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("sums to {sum}")));
        }
        Ok(Self { probs })
    }

    /// Normalises non-negative weights into a distribution.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || !(total > 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weights must be finite, non-negative and not all zero: {weights:?}"
            )));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidDistribution("no outcomes".into()));
        }
        Ok(Self {
            probs: vec![1.0 / k as f64; k],
        })
    }

    pub fn one_hot(index: usize, k: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::IndexOutOfRange { index, len: k });
        }
        let mut probs = vec![0.0; k];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    /// Softmax of real-valued logits.
    pub fn softmax(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidDistribution("no outcomes".into()));
        }
        Self::new(softmax(logits))
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn k(&self) -> usize {
        self.probs.len()
    }

    /// Index of the most likely outcome (first on ties).
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn max_prob(&self) -> f64 {
        self.probs[self.argmax()]
    }

    /// Renormalised `p^(1/T)`.
    pub fn temper(&self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Domain(format!(
                "temperature must be > 0, got {temperature}"
            )));
        }
        let w: Vec<f64> = self
            .probs
            .iter()
            .map(|&p| {
                if p > 0.0 {
                    (p.ln() / temperature).exp()
                } else {
                    0.0
                }
            })
            .collect();
        Self::from_weights(&w)
    }

    /// `(1 − s·K)·p + s`, which keeps every entry at least `s`.
    pub fn smoothed(&self, smoothing: f64) -> Result<Self> {
        let k = self.k() as f64;
        if !(0.0..=1.0 / k).contains(&smoothing) {
            return Err(Error::Domain(format!(
                "distribution smoothing {smoothing} outside [0, 1/K]"
            )));
        }
        Self::new(
            self.probs
                .iter()
                .map(|&p| (1.0 - smoothing * k) * p + smoothing)
                .collect(),
        )
    }
}

impl TryFrom<Vec<f64>> for Categorical {
    type Error = Error;
    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Categorical> for Vec<f64> {
    fn from(c: Categorical) -> Self {
        c.probs
    }
}

/// Concentration parameters of a Dirichlet distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DirichletParams {
    alphas: Vec<f64>,
    alpha0: f64,
}

impl DirichletParams {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidDistribution("no concentrations".into()));
        }
        if let Some((i, a)) = alphas
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a > 0.0) || !a.is_finite())
        {
            return Err(Error::InvalidDistribution(format!(
                "alpha[{i}] = {a} is not a positive finite number"
            )));
        }
        let alpha0 = alphas.iter().sum();
        Ok(Self { alphas, alpha0 })
    }

    /// Clamps every concentration to at least `floor` before validating.
    pub fn floored(alphas: &[f64], floor: f64) -> Result<Self> {
        Self::new(alphas.iter().map(|a| a.max(floor)).collect())
    }

    /// Concentrations `α = exp(z)` from logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Self::new(logits.iter().map(|z| z.exp()).collect())
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn k(&self) -> usize {
        self.alphas.len()
    }
}

impl TryFrom<Vec<f64>> for DirichletParams {
    type Error = Error;
    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl From<DirichletParams> for Vec<f64> {
    fn from(d: DirichletParams) -> Self {
        d.alphas
    }
}

/// Total = data + knowledge uncertainty, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyDecomposition {
    pub total: f64,
    pub data: f64,
    pub knowledge: f64,
}

impl UncertaintyDecomposition {
    /// Builds the split with knowledge defined as `total − data`. The stored
    /// total is re-formed as `data + knowledge` so the identity holds exactly
    /// in floating point (it can move by one ulp).
    pub fn from_total_and_data(total: f64, data: f64) -> Self {
        let knowledge = total - data;
        Self {
            total: data + knowledge,
            data,
            knowledge,
        }
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shannon entropy `−Σ p ln p` with `0·ln 0 = 0`.
pub fn entropy(p: &Categorical) -> f64 {
    entropy_of(p.probs())
}

pub(crate) fn entropy_of(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.max(PROB_FLOOR).ln())
        .sum();
    h.max(0.0)
}

/// `KL[p ‖ q] = Σ p ln(p/q)`.
pub fn kl_categorical(p: &Categorical, q: &Categorical) -> Result<f64> {
    if p.k() != q.k() {
        return Err(Error::DimensionMismatch {
            expected: p.k(),
            got: q.k(),
        });
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.probs().iter().zip(q.probs()).enumerate() {
        if pi <= 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(Error::SupportMismatch { index: i, p: pi });
        }
        kl += pi * (pi.max(PROB_FLOOR).ln() - qi.max(PROB_FLOOR).ln());
    }
    Ok(kl.max(0.0))
}

/// Expected categorical `α / α₀`; equals softmax(z) when `α = e^z`.
pub fn dirichlet_mean(d: &DirichletParams) -> Categorical {
    let probs: Vec<f64> = d.alphas().iter().map(|a| a / d.alpha0()).collect();
    // Σ α_k/α₀ is 1 up to rounding, so this is always a valid distribution.
    Categorical { probs }
}

/// `E_{π∼Dir(α)}[H[π]] = ψ(α₀+1) − Σ (α_k/α₀) ψ(α_k+1)`.
pub fn dirichlet_expected_entropy(d: &DirichletParams) -> f64 {
    let a0 = d.alpha0();
    let mut h = digamma_unchecked(a0 + 1.0);
    for &a in d.alphas() {
        h -= a / a0 * digamma_unchecked(a + 1.0);
    }
    h.max(0.0)
}

/// Closed-form uncertainty split of a Dirichlet prior network output.
pub fn dirichlet_decompose(d: &DirichletParams) -> UncertaintyDecomposition {
    let total = entropy(&dirichlet_mean(d));
    let data = dirichlet_expected_entropy(d);
    UncertaintyDecomposition::from_total_and_data(total, data)
}

/// `KL[Dir(a) ‖ Dir(b)]`.
pub fn kl_dirichlet(a: &DirichletParams, b: &DirichletParams) -> Result<f64> {
    if a.k() != b.k() {
        return Err(Error::DimensionMismatch {
            expected: a.k(),
            got: b.k(),
        });
    }
    let psi_a0 = digamma_unchecked(a.alpha0());
    let mut kl = ln_gamma_unchecked(a.alpha0()) - ln_gamma_unchecked(b.alpha0());
    for (&ak, &bk) in a.alphas().iter().zip(b.alphas()) {
        kl += ln_gamma_unchecked(bk) - ln_gamma_unchecked(ak);
        kl += (ak - bk) * (digamma_unchecked(ak) - psi_a0);
    }
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cat(p: &[f64]) -> Categorical {
        Categorical::new(p.to_vec()).unwrap()
    }

    fn dir(a: &[f64]) -> DirichletParams {
        DirichletParams::new(a.to_vec()).unwrap()
    }

    #[test]
    fn categorical_validation() {
        assert!(Categorical::new(vec![]).is_err());
        assert!(Categorical::new(vec![0.5, 0.6]).is_err());
        assert!(Categorical::new(vec![-0.1, 1.1]).is_err());
        assert!(Categorical::new(vec![0.5, 0.5 + 5e-10]).is_ok());
        assert!(DirichletParams::new(vec![1.0, 0.0]).is_err());
        assert!(DirichletParams::new(vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn entropy_examples() {
        assert!((entropy(&Categorical::uniform(4).unwrap()) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&cat(&[1.0, 0.0, 0.0])), 0.0);
        // −(0.7 ln 0.7 + 0.3 ln 0.3)
        let oracle = -(0.7f64 * 0.7f64.ln() + 0.3f64 * 0.3f64.ln());
        assert!((entropy(&cat(&[0.7, 0.3])) - oracle).abs() < 1e-12);
        assert!((oracle - 0.610_864).abs() < 1e-6);
    }

    #[test]
    fn kl_examples() {
        assert_eq!(
            kl_categorical(&cat(&[0.5, 0.5]), &cat(&[0.5, 0.5])).unwrap(),
            0.0
        );
        let kl = kl_categorical(&cat(&[1.0, 0.0]), &cat(&[0.5, 0.5])).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);
        let err = kl_categorical(&cat(&[0.5, 0.5]), &cat(&[1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::SupportMismatch { index: 1, .. }));
        assert!(kl_categorical(&cat(&[1.0]), &cat(&[0.5, 0.5])).is_err());
    }

    #[test]
    fn dirichlet_mean_examples() {
        assert_eq!(dirichlet_mean(&dir(&[1.0, 1.0])).probs(), &[0.5, 0.5]);
        assert_eq!(dirichlet_mean(&dir(&[2.0, 6.0])).probs(), &[0.25, 0.75]);
        let z = [0.0, 1.0, 2.0];
        let mean = dirichlet_mean(&DirichletParams::from_logits(&z).unwrap());
        let oracle = softmax(&z);
        for (m, o) in mean.probs().iter().zip(&oracle) {
            assert!((m - o).abs() < 1e-12);
        }
        assert!((mean.probs()[2] - 0.6652).abs() < 1e-4);
    }

    #[test]
    fn expected_entropy_examples() {
        assert!((dirichlet_expected_entropy(&dir(&[1.0, 1.0])) - 0.5).abs() < 1e-12);
        let big = dirichlet_expected_entropy(&dir(&[1000.0, 1000.0]));
        assert!((big - 0.69290).abs() < 1e-5);
        assert!(big < std::f64::consts::LN_2);
        assert_eq!(dirichlet_expected_entropy(&dir(&[5.0])), 0.0);
    }

    #[test]
    fn decompose_examples() {
        let d = dirichlet_decompose(&dir(&[1.0, 1.0]));
        assert!((d.total - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((d.data - 0.5).abs() < 1e-12);
        assert!((d.knowledge - 0.193_147).abs() < 1e-6);
        let sharp = dirichlet_decompose(&dir(&[1e6, 1e6]));
        assert!(sharp.knowledge.abs() < 1e-3);
        let flat = dirichlet_decompose(&DirichletParams::floored(&[0.01, 0.0], 0.01).unwrap());
        assert!(flat.knowledge > 0.9 * flat.total);
    }

    #[test]
    fn kl_dirichlet_examples() {
        assert_eq!(
            kl_dirichlet(&dir(&[1.0, 1.0]), &dir(&[1.0, 1.0])).unwrap(),
            0.0
        );
        assert_eq!(kl_dirichlet(&dir(&[1.0; 3]), &dir(&[1.0; 3])).unwrap(), 0.0);
        // ln Γ(4) − 2 (ψ(4) − ψ(2)) = ln 6 − 5/3
        let exact = 6f64.ln() - 5.0 / 3.0;
        let kl = kl_dirichlet(&dir(&[2.0, 2.0]), &dir(&[1.0, 1.0])).unwrap();
        assert!((kl - exact).abs() < 1e-12);
        assert!((kl - 0.125_069).abs() < 1e-3);
    }

    #[test]
    fn temper_and_smooth() {
        let p = cat(&[0.7, 0.3]);
        assert_eq!(p.temper(1.0).unwrap(), p);
        let flat = p.temper(1e6).unwrap();
        assert!((flat.probs()[0] - 0.5).abs() < 1e-6);
        let s = cat(&[1.0, 0.0]).smoothed(1e-4).unwrap();
        assert!((s.probs()[1] - 1e-4).abs() < 1e-15);
    }

    fn arb_probs(max_k: usize) -> impl Strategy<Value = Categorical> {
        prop::collection::vec(1e-3f64..1.0, 1..=max_k)
            .prop_map(|w| Categorical::from_weights(&w).unwrap())
    }

    proptest! {
        #[test]
        fn entropy_bounded_by_log_k(p in arb_probs(8)) {
            let h = entropy(&p);
            let bound = (p.k() as f64).ln();
            prop_assert!(h >= 0.0);
            prop_assert!(h <= bound + 1e-12);
        }

        #[test]
        fn kl_non_negative_and_zero_on_self((p, q) in (2usize..8).prop_flat_map(|k| (
            prop::collection::vec(1e-3f64..1.0, k),
            prop::collection::vec(1e-3f64..1.0, k),
        ))) {
            let p = Categorical::from_weights(&p).unwrap();
            let q = Categorical::from_weights(&q).unwrap();
            prop_assert!(kl_categorical(&p, &q).unwrap() >= 0.0);
            prop_assert!(kl_categorical(&p, &p).unwrap().abs() < 1e-15);
        }

        #[test]
        fn decomposition_is_consistent(alphas in prop::collection::vec(0.05f64..200.0, 1..8)) {
            let d = dirichlet_decompose(&DirichletParams::new(alphas).unwrap());
            prop_assert_eq!(d.total, d.data + d.knowledge);
            prop_assert!(d.knowledge >= -1e-12);
            prop_assert!(d.data >= 0.0);
        }

        #[test]
        fn digamma_recurrence(x in 1e-3f64..100.0) {
            let lhs = digamma(x + 1.0).unwrap() - digamma(x).unwrap();
            prop_assert!((lhs - 1.0 / x).abs() <= 1e-9 * (1.0 / x).max(1.0));
        }
    }
}
