//! Training objectives: label smoothing for single models, ensemble
//! distillation (EnD) against the ensemble mean, and ensemble distribution
//! distillation (EnD²) against a proxy Dirichlet target.
//!
//! Every loss has a plain-value form used for evaluation and testing, and a
//! tape form that records it for backpropagation over a batch of rows.

use serde::{Deserialize, Serialize};

use crate::diffnet::{NodeId, Tape, Tensor};
use crate::ensemble::{predictive_posterior, EnsemblePrediction};
use crate::error::{Error, Result};
use crate::uncmath::{
    digamma_unchecked, kl_categorical, kl_dirichlet, ln_gamma_unchecked, Categorical,
    DirichletParams,
};

pub const LABEL_SMOOTHING: f64 = 0.05;
pub const DISTRIBUTION_SMOOTHING: f64 = 1e-4;
pub const BASE_TEMPERATURE: f64 = 2.5;
pub const ANNEAL_FRACTION: f64 = 0.1;
/// Logits are clamped to ±this before exponentiation into concentrations.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedTarget {
    pub probs: Categorical,
    pub epsilon: f64,
}

pub fn smooth_labels(class_index: usize, k: usize, epsilon: f64) -> Result<SmoothedTarget> {
    if class_index >= k {
        return Err(Error::IndexOutOfRange {
            index: class_index,
            len: k,
        });
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Domain(format!(
            "smoothing ε must lie in [0, 1), got {epsilon}"
        )));
    }
    let base = epsilon / k as f64;
    let mut probs = vec![base; k];
    probs[class_index] += 1.0 - epsilon;
    Ok(SmoothedTarget {
        probs: Categorical::new(probs)?,
        epsilon,
    })
}

/// KL[target ‖ pred].
pub fn label_smoothing_loss(pred: &Categorical, target: &SmoothedTarget) -> Result<f64> {
    kl_categorical(&target.probs, pred)
}

/// KL[temper(posterior, T) ‖ temper(student, T)].
pub fn end_loss(
    student: &Categorical,
    ensemble_posterior: &Categorical,
    temperature: f64,
) -> Result<f64> {
    if !(temperature >= 1.0) {
        return Err(Error::Domain(format!(
            "temperature must be ≥ 1, got {temperature}"
        )));
    }
    kl_categorical(
        &ensemble_posterior.temper(temperature)?,
        &student.temper(temperature)?,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyDirichletTarget {
    pub pi_hat: Categorical,
    pub beta: DirichletParams,
    pub beta_tilde0: f64,
}

impl ProxyDirichletTarget {
    pub fn beta0(&self) -> f64 {
        self.beta.alpha0()
    }
}

pub fn proxy_dirichlet_target(
    e: &EnsemblePrediction,
    smoothing: f64,
) -> Result<ProxyDirichletTarget> {
    let members: Vec<Categorical> = e
        .members()
        .iter()
        .map(|m| m.smoothed(smoothing))
        .collect::<Result<_>>()?;
    let smoothed = EnsemblePrediction::new(members)?;
    let pi_hat = predictive_posterior(&smoothed)?;
    let k = pi_hat.k();
    let m = smoothed.len() as f64;
    let mut denom = 0.0;
    for (j, &p) in pi_hat.probs().iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let mean_log: f64 = smoothed
            .members()
            .iter()
            .map(|c| c.probs()[j].ln())
            .sum::<f64>()
            / m;
        denom += p * (p.ln() - mean_log);
    }
    // Jensen guarantees denom ≥ 0; identical members make it ~0 up to rounding.
    let denom = denom.max(f64::MIN_POSITIVE);
    let beta_tilde0 = (k as f64 - 1.0) / (2.0 * denom);
    let beta_tilde0 = if k == 1 { 1.0 } else { beta_tilde0 };
    if !beta_tilde0.is_finite() {
        return Err(Error::DegenerateEnsemble(format!(
            "proxy precision is not finite (denominator {denom:e})"
        )));
    }
    let beta = pi_hat
        .probs()
        .iter()
        .map(|&p| p * beta_tilde0 + 1.0)
        .collect();
    Ok(ProxyDirichletTarget {
        pi_hat,
        beta: DirichletParams::new(beta)?,
        beta_tilde0,
    })
}

fn clamp_logits(logits: &[f64]) -> Vec<f64> {
    if logits.iter().any(|z| z.abs() > LOGIT_CLAMP) {
        log::debug!("Dirichlet logits clamped to ±{LOGIT_CLAMP}");
    }
    logits
        .iter()
        .map(|z| z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP))
        .collect()
}

/// −Σ π̂_k E[ln π_k] + KL[Dir(α) ‖ Dir(1)] / β_0 with α = exp(logits).
pub fn end2_loss(student_logits: &[f64], proxy: &ProxyDirichletTarget) -> Result<f64> {
    let k = proxy.pi_hat.k();
    if student_logits.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: student_logits.len(),
        });
    }
    let alpha = DirichletParams::new(
        clamp_logits(student_logits)
            .iter()
            .map(|z| z.exp())
            .collect(),
    )?;
    let psi0 = digamma_unchecked(alpha.alpha0());
    let expectation: f64 = proxy
        .pi_hat
        .probs()
        .iter()
        .zip(alpha.alphas())
        .map(|(p, &a)| p * (digamma_unchecked(a) - psi0))
        .sum();
    let flat = DirichletParams::new(vec![1.0; k])?;
    Ok(-expectation + kl_dirichlet(&alpha, &flat)? / proxy.beta0())
}

/// Linear decay from `base` to 1 over the first `anneal_fraction` of
/// training, constant 1 afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSchedule {
    pub base: f64,
    pub anneal_fraction: f64,
    pub total_steps: u64,
}

impl TemperatureSchedule {
    pub fn new(total_steps: u64) -> Self {
        Self {
            base: BASE_TEMPERATURE,
            anneal_fraction: ANNEAL_FRACTION,
            total_steps,
        }
    }

    pub fn temperature(&self, step: u64) -> f64 {
        let span = self.anneal_fraction * self.total_steps as f64;
        if span <= 0.0 || step as f64 >= span {
            return 1.0;
        }
        self.base + (1.0 - self.base) * (step as f64 / span)
    }
}

// ---- tape forms --------------------------------------------------------

fn rows_to_tensor(rows: &[&[f64]]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, |r| r.len());
    let mut data = Vec::with_capacity(rows.len() * cols);
    for r in rows {
        if r.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                got: r.len(),
            });
        }
        data.extend_from_slice(r);
    }
    Tensor::from_vec(rows.len(), cols, data)
}

fn neg_entropy_sum(rows: &[&[f64]]) -> f64 {
    rows.iter()
        .flat_map(|r| r.iter())
        .filter(|&&t| t > 0.0)
        .map(|&t| t * t.ln())
        .sum()
}

/// Σ_rows KL[target_row ‖ softmax(logits_row)] for `logits` n×K.
pub fn tape_kl_to_logits(tape: &mut Tape, logits: NodeId, targets: &[&[f64]]) -> Result<NodeId> {
    let t = rows_to_tensor(targets)?;
    if t.shape() != tape.shape(logits) {
        return Err(Error::ShapeMismatch {
            node: "kl_to_logits".into(),
            detail: format!("targets {:?} vs logits {:?}", t.shape(), tape.shape(logits)),
        });
    }
    let constant = neg_entropy_sum(targets);
    let tn = tape.input(t);
    let logp = tape.log_softmax_rows(logits);
    let cross = tape.mul(tn, logp)?;
    let cross = tape.sum_all(cross);
    let neg = tape.neg(cross);
    Ok(tape.offset(neg, constant))
}

/// Label-smoothing loss for a batch of class labels.
pub fn tape_label_smoothing(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    epsilon: f64,
) -> Result<NodeId> {
    let k = tape.shape(logits).1;
    let targets: Vec<SmoothedTarget> = labels
        .iter()
        .map(|&c| smooth_labels(c, k, epsilon))
        .collect::<Result<_>>()?;
    let rows: Vec<&[f64]> = targets.iter().map(|t| t.probs.probs()).collect();
    tape_kl_to_logits(tape, logits, &rows)
}

/// EnD loss at temperature `t`: the student's tempered distribution is
/// softmax(z / T) and the teacher posterior is tempered directly.
pub fn tape_end(
    tape: &mut Tape,
    logits: NodeId,
    posteriors: &[Categorical],
    temperature: f64,
) -> Result<NodeId> {
    let tempered: Vec<Categorical> = posteriors
        .iter()
        .map(|p| p.smoothed(0.0).and_then(|p| p.temper(temperature)))
        .collect::<Result<_>>()?;
    let rows: Vec<&[f64]> = tempered.iter().map(Categorical::probs).collect();
    let scaled = tape.scale(logits, 1.0 / temperature);
    tape_kl_to_logits(tape, scaled, &rows)
}

/// Σ over rows of KL[Bern(target) ‖ Bern(σ(logit))] for an n×1 logit column.
pub fn tape_binary_kl(tape: &mut Tape, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
    if tape.shape(logits) != (targets.len(), 1) {
        return Err(Error::ShapeMismatch {
            node: "binary_kl".into(),
            detail: format!(
                "{} targets for logits {:?}",
                targets.len(),
                tape.shape(logits)
            ),
        });
    }
    let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    let constant: f64 = targets.iter().map(|&t| xlogx(t) + xlogx(1.0 - t)).sum();
    let t = tape.input(Tensor::column(targets));
    let one_minus = tape.input(Tensor::column(
        &targets.iter().map(|t| 1.0 - t).collect::<Vec<_>>(),
    ));
    let lp = tape.log_sigmoid(logits);
    let neg_logits = tape.neg(logits);
    let lq = tape.log_sigmoid(neg_logits);
    let a = tape.mul(t, lp)?;
    let b = tape.mul(one_minus, lq)?;
    let s = tape.add(a, b)?;
    let s = tape.sum_all(s);
    let neg = tape.neg(s);
    Ok(tape.offset(neg, constant))
}

/// Smoothed binary target: (1 − ε)·y + ε/2.
pub fn smooth_binary(label: bool, epsilon: f64) -> f64 {
    (1.0 - epsilon) * f64::from(u8::from(label)) + epsilon / 2.0
}

/// Σ over rows of the EnD² loss for logits n×K against per-row proxies.
pub fn tape_end2(
    tape: &mut Tape,
    logits: NodeId,
    proxies: &[ProxyDirichletTarget],
) -> Result<NodeId> {
    let (n, k) = tape.shape(logits);
    if proxies.len() != n || proxies.iter().any(|p| p.pi_hat.k() != k) {
        return Err(Error::ShapeMismatch {
            node: "end2".into(),
            detail: format!("{} proxies for logits {n}x{k}", proxies.len()),
        });
    }
    let pi_rows: Vec<&[f64]> = proxies.iter().map(|p| p.pi_hat.probs()).collect();
    let pi = tape.input(rows_to_tensor(&pi_rows)?);
    let inv_b0 = tape.input(Tensor::column(
        &proxies.iter().map(|p| 1.0 / p.beta0()).collect::<Vec<_>>(),
    ));

    let z = tape.clamp(logits, -LOGIT_CLAMP, LOGIT_CLAMP);
    let alpha = tape.exp(z);
    let alpha0 = tape.sum_cols(alpha);
    let psi_a = tape.digamma(alpha)?;
    let psi_a0 = tape.digamma(alpha0)?;

    // −Σ π̂_k ψ(α_k) + ψ(α_0), using Σ π̂_k = 1
    let weighted = tape.mul(pi, psi_a)?;
    let weighted = tape.sum_all(weighted);
    let psi0_sum = tape.sum_all(psi_a0);
    let expectation = tape.sub(psi0_sum, weighted)?;

    // KL[Dir(α) ‖ Dir(1)] = lnΓ(α0) − Σ lnΓ(α_k) − lnΓ(K) + Σ (α_k − 1)ψ(α_k) − (α0 − K)ψ(α0)
    let lg0 = tape.ln_gamma(alpha0)?;
    let lga = tape.ln_gamma(alpha)?;
    let lga = tape.sum_cols(lga);
    let am1 = tape.offset(alpha, -1.0);
    let s1 = tape.mul(am1, psi_a)?;
    let s1 = tape.sum_cols(s1);
    let a0mk = tape.offset(alpha0, -(k as f64));
    let s2 = tape.mul(a0mk, psi_a0)?;
    let kl = tape.sub(lg0, lga)?;
    let kl = tape.add(kl, s1)?;
    let kl = tape.sub(kl, s2)?;
    let kl = tape.offset(kl, -ln_gamma_unchecked(k as f64));
    let kl = tape.mul(kl, inv_b0)?;
    let kl = tape.sum_all(kl);
    tape.add(expectation, kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{finite_diff_check, ParamStore};
    use proptest::prelude::*;

    fn cat(p: &[f64]) -> Categorical {
        Categorical::new(p.to_vec()).unwrap()
    }

    fn ens(members: &[&[f64]]) -> EnsemblePrediction {
        EnsemblePrediction::new(members.iter().map(|p| cat(p)).collect()).unwrap()
    }

    #[test]
    fn smooth_labels_examples() {
        assert_eq!(smooth_labels(0, 2, 0.0).unwrap().probs.probs(), &[1.0, 0.0]);
        let t = smooth_labels(1, 4, 0.05).unwrap();
        let expect = [0.0125, 0.9625, 0.0125, 0.0125];
        for (a, b) in t.probs.probs().iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(smooth_labels(0, 2, 1.0).is_err());
        assert!(matches!(
            smooth_labels(4, 4, 0.1),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn label_smoothing_examples() {
        let t = smooth_labels(0, 2, 0.1).unwrap();
        let l = label_smoothing_loss(&cat(&[0.5, 0.5]), &t).unwrap();
        let oracle = 0.95 * (0.95f64 / 0.5).ln() + 0.05 * (0.05f64 / 0.5).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.494632).abs() < 1e-6);
        assert!(label_smoothing_loss(&cat(&[0.95, 0.05]), &t).unwrap().abs() < 1e-15);
    }

    #[test]
    fn end_loss_examples() {
        let p = cat(&[0.7, 0.3]);
        assert!(end_loss(&p, &p, 2.5).unwrap().abs() < 1e-15);
        let l = end_loss(&cat(&[0.5, 0.5]), &p, 1.0).unwrap();
        let oracle = 0.7 * (0.7f64 / 0.5).ln() + 0.3 * (0.3f64 / 0.5).ln();
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.082282).abs() < 1e-6);
        let hot = end_loss(&cat(&[0.1, 0.9]), &p, 1e6).unwrap();
        assert!(hot < 1e-9);
    }

    #[test]
    fn proxy_hand_example() {
        let proxy = proxy_dirichlet_target(&ens(&[&[0.8, 0.2], &[0.6, 0.4]]), 0.0).unwrap();
        assert!((proxy.pi_hat.probs()[0] - 0.7).abs() < 1e-12);
        assert!((proxy.beta_tilde0 - 20.09).abs() < 0.01);
        assert!((proxy.beta.alphas()[0] - 15.06).abs() < 0.01);
        assert!((proxy.beta.alphas()[1] - 7.03).abs() < 0.01);
    }

    #[test]
    fn proxy_identical_members_is_finite() {
        let proxy =
            proxy_dirichlet_target(&ens(&[&[0.9f64, 0.1][..]; 5]), DISTRIBUTION_SMOOTHING).unwrap();
        assert!(proxy.beta_tilde0.is_finite() && proxy.beta_tilde0 > 1e6);
        assert_eq!(proxy.beta.alphas()[0] > proxy.beta.alphas()[1], true);
    }

    #[test]
    fn temperature_schedule_anneals() {
        let s = TemperatureSchedule::new(100);
        assert_eq!(s.temperature(0), 2.5);
        assert!((s.temperature(5) - 1.75).abs() < 1e-12);
        assert_eq!(s.temperature(10), 1.0);
        assert_eq!(s.temperature(99), 1.0);
    }

    fn logits_store(rows: &[Vec<f64>]) -> ParamStore {
        let mut ps = ParamStore::new();
        ps.add("z", Tensor::from_rows(rows).unwrap()).unwrap();
        ps
    }

    #[test]
    fn tape_losses_match_values() {
        let rows = vec![vec![0.3, -1.2, 0.8], vec![2.0, 0.1, -0.5]];
        let ps = logits_store(&rows);
        let z = ps.id("z").unwrap();

        let mut tape = Tape::new(&ps);
        let zn = tape.param(z);
        let l = tape_label_smoothing(&mut tape, zn, &[2, 0], 0.05).unwrap();
        let expect: f64 = rows
            .iter()
            .zip([2usize, 0])
            .map(|(r, c)| {
                label_smoothing_loss(
                    &Categorical::softmax(r).unwrap(),
                    &smooth_labels(c, 3, 0.05).unwrap(),
                )
                .unwrap()
            })
            .sum();
        assert!((tape.value(l).item() - expect).abs() < 1e-12);

        let posts = vec![cat(&[0.2, 0.5, 0.3]), cat(&[0.6, 0.3, 0.1])];
        let mut tape = Tape::new(&ps);
        let zn = tape.param(z);
        let l = tape_end(&mut tape, zn, &posts, 2.0).unwrap();
        let expect: f64 = rows
            .iter()
            .zip(&posts)
            .map(|(r, p)| end_loss(&Categorical::softmax(r).unwrap(), p, 2.0).unwrap())
            .sum();
        assert!((tape.value(l).item() - expect).abs() < 1e-12);

        let proxies = vec![
            proxy_dirichlet_target(&ens(&[&[0.2, 0.5, 0.3], &[0.1, 0.7, 0.2]]), 1e-4).unwrap(),
            proxy_dirichlet_target(&ens(&[&[0.6, 0.3, 0.1], &[0.5, 0.2, 0.3]]), 1e-4).unwrap(),
        ];
        let mut tape = Tape::new(&ps);
        let zn = tape.param(z);
        let l = tape_end2(&mut tape, zn, &proxies).unwrap();
        let expect: f64 = rows
            .iter()
            .zip(&proxies)
            .map(|(r, p)| end2_loss(r, p).unwrap())
            .sum();
        assert!((tape.value(l).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn tape_losses_pass_gradient_check() {
        let ps = logits_store(&[vec![0.3, -1.2, 0.8], vec![2.0, 0.1, -0.5]]);
        let z = ps.id("z").unwrap();
        let posts = vec![cat(&[0.2, 0.5, 0.3]), cat(&[0.6, 0.3, 0.1])];
        let proxies = vec![
            proxy_dirichlet_target(&ens(&[&[0.2, 0.5, 0.3], &[0.1, 0.7, 0.2]]), 1e-4).unwrap(),
            proxy_dirichlet_target(&ens(&[&[0.6, 0.3, 0.1], &[0.5, 0.2, 0.3]]), 1e-4).unwrap(),
        ];
        let r = finite_diff_check(
            &ps,
            |t| {
                let zn = t.param(z);
                tape_label_smoothing(t, zn, &[1, 2], 0.05)
            },
            1e-4,
            None,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = finite_diff_check(
            &ps,
            |t| {
                let zn = t.param(z);
                tape_end(t, zn, &posts, 2.5)
            },
            1e-4,
            None,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        let r = finite_diff_check(
            &ps,
            |t| {
                let zn = t.param(z);
                tape_end2(t, zn, &proxies)
            },
            1e-4,
            None,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");

        let col = logits_store(&[vec![0.4], vec![-1.3]]);
        let c = col.id("z").unwrap();
        let r = finite_diff_check(
            &col,
            |t| {
                let zn = t.param(c);
                tape_binary_kl(
                    t,
                    zn,
                    &[smooth_binary(true, 0.05), smooth_binary(false, 0.05)],
                )
            },
            1e-4,
            None,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn end2_two_term_tension() {
        // π̂ = [0.5, 0.5], β_0 = 2
        let proxy = ProxyDirichletTarget {
            pi_hat: cat(&[0.5, 0.5]),
            beta: DirichletParams::new(vec![1.0, 1.0]).unwrap(),
            beta_tilde0: 0.0,
        };
        let flat = DirichletParams::new(vec![1.0, 1.0]).unwrap();
        let mut prev_exp = f64::INFINITY;
        let mut prev_kl = -1.0;
        for a in [1.0f64, 2.0, 5.0, 20.0, 100.0] {
            let z = a.ln();
            let total = end2_loss(&[z, z], &proxy).unwrap();
            let alpha = DirichletParams::new(vec![a, a]).unwrap();
            let kl = kl_dirichlet(&alpha, &flat).unwrap();
            let exp_term = total - kl / 2.0;
            assert!(exp_term < prev_exp, "expectation term must fall as α grows");
            assert!(kl > prev_kl, "KL term must grow as α grows");
            prev_exp = exp_term;
            prev_kl = kl;
        }
    }

    #[test]
    fn end2_optimum_preserves_argmax() {
        let proxy =
            proxy_dirichlet_target(&ens(&[&[0.1f64, 0.8, 0.1][..]; 4]), DISTRIBUTION_SMOOTHING)
                .unwrap();
        let ps = logits_store(&[vec![0.0, 0.0, 0.0]]);
        let z = ps.id("z").unwrap();
        let mut ps = ps;
        let mut adam = crate::diffnet::Adam::new(&ps);
        for _ in 0..400 {
            let g = {
                let mut t = Tape::new(&ps);
                let zn = t.param(z);
                let l = tape_end2(&mut t, zn, std::slice::from_ref(&proxy)).unwrap();
                t.backward(l).unwrap()
            };
            adam.step(&mut ps, &g, 0.05).unwrap();
        }
        let alpha = DirichletParams::from_logits(ps.get(z).data()).unwrap();
        assert_eq!(
            crate::uncmath::dirichlet_mean(&alpha).argmax(),
            proxy.pi_hat.argmax()
        );
    }

    proptest! {
        #[test]
        fn proxy_invariants(raw in prop::collection::vec(prop::collection::vec(1e-6f64..1.0, 4), 1..8)) {
            let members: Vec<Categorical> = raw.iter().map(|w| Categorical::from_weights(w).unwrap()).collect();
            let e = EnsemblePrediction::new(members.clone()).unwrap();
            let p = proxy_dirichlet_target(&e, DISTRIBUTION_SMOOTHING).unwrap();
            prop_assert!(p.beta_tilde0.is_finite() && p.beta_tilde0 > 0.0);
            prop_assert!(p.beta.alphas().iter().all(|&b| b >= 1.0));
            prop_assert_eq!(p.beta.alphas().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                            p.beta.alphas()[p.pi_hat.argmax()]);
            // denominator equals mean KL(π̂ ‖ π^(m)) over smoothed members
            let sm: Vec<Categorical> = members.iter().map(|m| m.smoothed(DISTRIBUTION_SMOOTHING).unwrap()).collect();
            let mean_kl = sm.iter().map(|m| kl_categorical(&p.pi_hat, m).unwrap()).sum::<f64>() / sm.len() as f64;
            if mean_kl > 1e-9 {
                prop_assert!((3.0 / (2.0 * mean_kl) - p.beta_tilde0).abs() / p.beta_tilde0 < 1e-6);
            }
        }

        #[test]
        fn end2_shift_matches_recomputation(z in prop::collection::vec(-3.0f64..3.0, 3), c in -2.0f64..2.0) {
            let proxy = proxy_dirichlet_target(&ens(&[&[0.2, 0.5, 0.3], &[0.3, 0.4, 0.3]]), 1e-4).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let base = end2_loss(&z, &proxy).unwrap();
            let moved = end2_loss(&shifted, &proxy).unwrap();
            // independent recomputation of both terms at the shifted α
            let alpha: Vec<f64> = shifted.iter().map(|v| v.exp()).collect();
            let a0: f64 = alpha.iter().sum();
            let psi0 = crate::uncmath::digamma(a0).unwrap();
            let mut exp_term = 0.0;
            let mut kl = crate::uncmath::ln_gamma(a0).unwrap() - crate::uncmath::ln_gamma(3.0).unwrap();
            for (k, &a) in alpha.iter().enumerate() {
                let psi = crate::uncmath::digamma(a).unwrap();
                exp_term -= proxy.pi_hat.probs()[k] * (psi - psi0);
                kl += -crate::uncmath::ln_gamma(a).unwrap() + (a - 1.0) * (psi - psi0);
            }
            prop_assert!((moved - (exp_term + kl / proxy.beta0())).abs() < 1e-9);
            prop_assert!(base.is_finite());
        }
    }
}
