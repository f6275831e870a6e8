//! Ensembles of categorical predictors: predictive posterior, the
//! mutual-information uncertainty split, and bagged training subsets.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::uncmath::{entropy, Categorical, UncertaintyDecomposition};

/// One categorical prediction per ensemble member, all over the same K.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsemblePrediction {
    members: Vec<Categorical>,
}

impl EnsemblePrediction {
    pub fn new(members: Vec<Categorical>) -> Result<Self> {
        let first = members.first().ok_or(Error::EmptyEnsemble)?;
        let k = first.k();
        if let Some(bad) = members.iter().find(|m| m.k() != k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: bad.k(),
            });
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[Categorical] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn k(&self) -> usize {
        self.members[0].k()
    }
}

/// Elementwise mean of the member distributions.
pub fn predictive_posterior(e: &EnsemblePrediction) -> Result<Categorical> {
    if e.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let m = e.len() as f64;
    let mut mean = vec![0.0; e.k()];
    for member in e.members() {
        for (acc, p) in mean.iter_mut().zip(member.probs()) {
            *acc += p;
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    Categorical::new(mean)
}

/// Total uncertainty of the posterior, mean member entropy (data), and
/// their difference, the mutual information between prediction and model.
pub fn ensemble_decompose(e: &EnsemblePrediction) -> Result<UncertaintyDecomposition> {
    let posterior = predictive_posterior(e)?;
    if e.len() == 1 {
        let h = entropy(&posterior);
        return Ok(UncertaintyDecomposition::from_total_and_data(h, h));
    }
    let total = entropy(&posterior);
    let data = e.members().iter().map(entropy).sum::<f64>() / e.len() as f64;
    Ok(UncertaintyDecomposition::from_total_and_data(total, data))
}

/// Record ids assigned to one ensemble member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaggingPlan {
    pub member_index: usize,
    pub record_ids: Vec<usize>,
    pub seed: u64,
}

/// Draws `members` independent subsets of `⌈fraction · dataset_size⌉`
/// distinct record ids each. Ids within a plan are sorted.
pub fn make_bagged_subsets(
    dataset_size: usize,
    members: usize,
    fraction: f64,
    seed: u64,
) -> Result<Vec<BaggingPlan>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    if dataset_size == 0 {
        return Err(Error::EmptyInput("bagging needs a non-empty dataset"));
    }
    if members == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let size = ((fraction * dataset_size as f64).ceil() as usize).clamp(1, dataset_size);
    let plans = (0..members)
        .map(|member_index| {
            let member_seed = crate::rng::derive_seed(seed, &format!("bag/{member_index}"));
            let mut rng = ChaCha8Rng::seed_from_u64(member_seed);
            let mut record_ids = index::sample(&mut rng, dataset_size, size).into_vec();
            record_ids.sort_unstable();
            BaggingPlan {
                member_index,
                record_ids,
                seed: member_seed,
            }
        })
        .collect();
    Ok(plans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ens(members: &[&[f64]]) -> EnsemblePrediction {
        EnsemblePrediction::new(
            members
                .iter()
                .map(|p| Categorical::new(p.to_vec()).unwrap())
                .collect(),
        )
        .unwrap()
    }

    fn h(p: &[f64]) -> f64 {
        -p.iter()
            .filter(|&&x| x > 0.0)
            .map(|&x| x * x.ln())
            .sum::<f64>()
    }

    #[test]
    fn posterior_examples() {
        let p = predictive_posterior(&ens(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(p.probs(), &[0.5, 0.5]);
        let p = predictive_posterior(&ens(&[&[0.3, 0.7]])).unwrap();
        assert_eq!(p.probs(), &[0.3, 0.7]);
        let p = predictive_posterior(&ens(&[&[0.8, 0.2], &[0.6, 0.4]])).unwrap();
        assert!((p.probs()[0] - 0.7).abs() < 1e-15 && (p.probs()[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn empty_ensemble_rejected() {
        assert!(matches!(
            EnsemblePrediction::new(vec![]),
            Err(Error::EmptyEnsemble)
        ));
        let mixed = vec![
            Categorical::uniform(2).unwrap(),
            Categorical::uniform(3).unwrap(),
        ];
        assert!(EnsemblePrediction::new(mixed).is_err());
    }

    #[test]
    fn decompose_examples() {
        let d = ensemble_decompose(&ens(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert!((d.total - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(d.data, 0.0);
        assert!((d.knowledge - std::f64::consts::LN_2).abs() < 1e-12);

        let d = ensemble_decompose(&ens(&[&[0.2f64, 0.5, 0.3][..]; 4])).unwrap();
        assert!(d.knowledge.abs() < 1e-15);

        let d = ensemble_decompose(&ens(&[&[0.8, 0.2], &[0.6, 0.4]])).unwrap();
        let total = h(&[0.7, 0.3]);
        let data = (h(&[0.8, 0.2]) + h(&[0.6, 0.4])) / 2.0;
        assert!((d.total - total).abs() < 1e-12);
        assert!((d.data - data).abs() < 1e-12);
        assert!((d.knowledge - (total - data)).abs() < 1e-12);
        assert!((d.data - 0.586_707).abs() < 1e-6);
        assert!((d.knowledge - 0.024_157).abs() < 1e-6);
    }

    #[test]
    fn bagging_examples() {
        let plans = make_bagged_subsets(10, 2, 1.0, 0).unwrap();
        assert_eq!(plans.len(), 2);
        for p in &plans {
            assert_eq!(p.record_ids, (0..10).collect::<Vec<_>>());
        }
        let plans = make_bagged_subsets(100, 10, 0.7, 13).unwrap();
        for p in &plans {
            let mut ids = p.record_ids.clone();
            ids.dedup();
            assert_eq!(ids.len(), 70);
            assert!(ids.iter().all(|&i| i < 100));
        }
        assert_ne!(plans[0].record_ids, plans[1].record_ids);
        assert_eq!(plans, make_bagged_subsets(100, 10, 0.7, 13).unwrap());
        assert!(matches!(
            make_bagged_subsets(10, 2, 0.0, 1),
            Err(Error::InvalidFraction(_))
        ));
        assert!(make_bagged_subsets(10, 2, 1.5, 1).is_err());
    }

    proptest! {
        #[test]
        fn knowledge_non_negative_and_exact(
            (m, k, raw) in (1usize..6, 2usize..6).prop_flat_map(|(m, k)| (
                Just(m), Just(k), prop::collection::vec(1e-4f64..1.0, m * k)
            ))
        ) {
            let members: Vec<Categorical> = raw
                .chunks(k)
                .map(|w| Categorical::from_weights(w).unwrap())
                .collect();
            let e = EnsemblePrediction::new(members.clone()).unwrap();
            let d = ensemble_decompose(&e).unwrap();
            prop_assert!(d.knowledge >= -1e-12);
            prop_assert_eq!(d.data + d.knowledge, d.total);
            if m == 1 {
                prop_assert_eq!(d.knowledge, 0.0);
                prop_assert_eq!(d.data, d.total);
            }
            // independent recomputation from raw member probabilities
            let mean: Vec<f64> = (0..k)
                .map(|j| members.iter().map(|c| c.probs()[j]).sum::<f64>() / m as f64)
                .collect();
            let data = members.iter().map(|c| h(c.probs())).sum::<f64>() / m as f64;
            prop_assert!((d.knowledge - (h(&mean) - data)).abs() < 1e-12);
        }

        #[test]
        fn posterior_is_permutation_invariant(
            raw in prop::collection::vec(prop::collection::vec(1e-3f64..1.0, 3), 2..6),
            rot in 0usize..6,
        ) {
            let members: Vec<Categorical> =
                raw.iter().map(|w| Categorical::from_weights(w).unwrap()).collect();
            let mut rotated = members.clone();
            let len = rotated.len();
            rotated.rotate_left(rot % len);
            rotated.reverse();
            let a = predictive_posterior(&EnsemblePrediction::new(members).unwrap()).unwrap();
            let b = predictive_posterior(&EnsemblePrediction::new(rotated).unwrap()).unwrap();
            for (x, y) in a.probs().iter().zip(b.probs()) {
                prop_assert!((x - y).abs() < 1e-15);
            }
        }
    }
}
