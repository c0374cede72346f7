//! Action-type stratified batch construction.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GrpoError;
use crate::dataset::ActionKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Target share of each action kind; kinds not listed get 0.
    pub target: BTreeMap<ActionKind, f64>,
    pub batch_size: usize,
}

impl SamplerConfig {
    /// Uniform over the kinds that have at least one sample in `pool`.
    pub fn uniform_over<T>(pool: &BTreeMap<ActionKind, Vec<T>>, batch_size: usize) -> Self {
        let kinds: Vec<ActionKind> = pool.iter().filter(|(_, v)| !v.is_empty()).map(|(k, _)| *k).collect();
        let p = 1.0 / kinds.len().max(1) as f64;
        Self {
            target: kinds.into_iter().map(|k| (k, p)).collect(),
            batch_size,
        }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        if let Some((k, p)) = self.target.iter().find(|(_, p)| !(p.is_finite() && **p >= 0.0)) {
            return Err(GrpoError::InvalidConfig(format!("probability for `{k}` is {p}")));
        }
        let sum: f64 = self.target.values().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(GrpoError::InvalidConfig(format!(
                "target probabilities sum to {sum}, not 1"
            )));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `batch_size` seats.
///
/// Each kind first gets `floor(batch_size * p)`; the remaining seats go to the
/// largest fractional parts, ties to the earlier kind. Kinds with `p = 0`
/// always get 0.
pub fn apportion(target: &BTreeMap<ActionKind, f64>, batch_size: usize) -> BTreeMap<ActionKind, usize> {
    let b = batch_size as f64;
    let mut counts = BTreeMap::new();
    let mut remainders = Vec::new();
    for (&k, &p) in target {
        let quota = b * p;
        let base = quota.floor();
        counts.insert(k, base as usize);
        if p > 0.0 {
            remainders.push((quota - base, k));
        }
    }
    let assigned: usize = counts.values().sum();
    let mut left = batch_size.saturating_sub(assigned);
    // stable sort keeps kind order among equal remainders
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (_, k) in remainders.iter().cycle() {
        if left == 0 {
            break;
        }
        *counts.get_mut(k).expect("kind present") += 1;
        left -= 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch<T> {
    /// Selected samples in shuffled order, each tagged with its kind.
    pub items: Vec<(ActionKind, T)>,
    pub counts: BTreeMap<ActionKind, usize>,
    /// Kinds whose pool was smaller than their quota and were drawn with replacement.
    pub with_replacement: Vec<ActionKind>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Total variation distance between the batch's kind shares and `target`.
    pub fn tv_distance(&self, target: &BTreeMap<ActionKind, f64>) -> f64 {
        let n = self.items.len().max(1) as f64;
        let mut kinds: Vec<ActionKind> = target.keys().chain(self.counts.keys()).copied().collect();
        kinds.sort();
        kinds.dedup();
        0.5 * kinds
            .iter()
            .map(|k| {
                let emp = self.counts.get(k).copied().unwrap_or(0) as f64 / n;
                (emp - target.get(k).copied().unwrap_or(0.0)).abs()
            })
            .sum::<f64>()
    }
}

/// Draws a batch whose per-kind counts are the apportionment of the target
/// distribution. Within a kind, samples are chosen uniformly without
/// replacement, or with replacement when the pool is smaller than the quota.
pub fn stratified_sample<T: Clone>(
    pool: &BTreeMap<ActionKind, Vec<T>>,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Batch<T>, GrpoError> {
    cfg.validate()?;
    for (&k, &p) in &cfg.target {
        if p > 0.0 && pool.get(&k).is_none_or(Vec::is_empty) {
            return Err(GrpoError::EmptyStratum(k));
        }
    }
    let counts = apportion(&cfg.target, cfg.batch_size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(cfg.batch_size);
    let mut with_replacement = Vec::new();
    for (&k, &n) in &counts {
        if n == 0 {
            continue;
        }
        let stratum = &pool[&k];
        if n <= stratum.len() {
            for i in index::sample(&mut rng, stratum.len(), n) {
                items.push((k, stratum[i].clone()));
            }
        } else {
            tracing::warn!(kind = %k, quota = n, available = stratum.len(), "stratum too small; sampling with replacement");
            with_replacement.push(k);
            for _ in 0..n {
                items.push((k, stratum[rng.random_range(0..stratum.len())].clone()));
            }
        }
    }
    items.shuffle(&mut rng);
    Ok(Batch {
        items,
        counts: counts.into_iter().filter(|(_, n)| *n > 0).collect(),
        with_replacement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pool(sizes: &[(ActionKind, usize)]) -> BTreeMap<ActionKind, Vec<usize>> {
        sizes.iter().map(|&(k, n)| (k, (0..n).collect())).collect()
    }

    #[test]
    fn exact_apportionment_examples() {
        let target = BTreeMap::from([
            (ActionKind::Click, 0.5),
            (ActionKind::Type, 0.3),
            (ActionKind::Scroll, 0.2),
        ]);
        let c = apportion(&target, 10);
        assert_eq!(
            c,
            BTreeMap::from([(ActionKind::Click, 5), (ActionKind::Type, 3), (ActionKind::Scroll, 2)])
        );
        let p = pool(&[
            (ActionKind::Click, 50),
            (ActionKind::Type, 50),
            (ActionKind::Scroll, 50),
            (ActionKind::Wait, 50),
        ]);
        let cfg = SamplerConfig::uniform_over(&p, 100);
        let b = stratified_sample(&p, &cfg, 7).unwrap();
        assert!(b.counts.values().all(|&n| n == 25));
        assert!(b.with_replacement.is_empty());
    }

    #[test]
    fn remainders_go_to_largest_fractions() {
        let target = BTreeMap::from([
            (ActionKind::Click, 0.45),
            (ActionKind::Type, 0.35),
            (ActionKind::Wait, 0.2),
        ]);
        // quotas 1.35, 1.05, 0.6 -> floors 1, 1, 0, one seat left for Wait
        assert_eq!(
            apportion(&target, 3),
            BTreeMap::from([(ActionKind::Click, 1), (ActionKind::Type, 1), (ActionKind::Wait, 1)])
        );
    }

    #[test]
    fn empty_stratum_and_replacement() {
        let cfg = SamplerConfig {
            target: BTreeMap::from([(ActionKind::Click, 0.7), (ActionKind::Type, 0.3)]),
            batch_size: 10,
        };
        let p = pool(&[(ActionKind::Click, 100)]);
        assert_eq!(
            stratified_sample(&p, &cfg, 0),
            Err(GrpoError::EmptyStratum(ActionKind::Type))
        );
        let p = pool(&[(ActionKind::Click, 100), (ActionKind::Type, 2)]);
        let b = stratified_sample(&p, &cfg, 0).unwrap();
        assert_eq!(b.with_replacement, vec![ActionKind::Type]);
        assert_eq!(b.counts[&ActionKind::Type], 3);
    }

    #[test]
    fn deterministic_under_seed() {
        let p = pool(&[(ActionKind::Click, 40), (ActionKind::Type, 40)]);
        let cfg = SamplerConfig::uniform_over(&p, 16);
        assert_eq!(
            stratified_sample(&p, &cfg, 3).unwrap(),
            stratified_sample(&p, &cfg, 3).unwrap()
        );
        assert_ne!(
            stratified_sample(&p, &cfg, 3).unwrap(),
            stratified_sample(&p, &cfg, 4).unwrap()
        );
    }

    proptest! {
        #[test]
        fn tv_within_bound(weights in prop::collection::vec(0.0f64..1.0, 1..10), batch in 1usize..200, seed: u64) {
            let total: f64 = weights.iter().sum();
            prop_assume!(total > 1e-6);
            let target: BTreeMap<ActionKind, f64> =
                ActionKind::ALL.iter().zip(&weights).map(|(&k, &w)| (k, w / total)).collect();
            let p: BTreeMap<ActionKind, Vec<usize>> = target.keys().map(|&k| (k, (0..batch).collect())).collect();
            let cfg = SamplerConfig { target: target.clone(), batch_size: batch };
            let b = stratified_sample(&p, &cfg, seed).unwrap();
            prop_assert_eq!(b.len(), batch);
            let k = target.len() as f64;
            prop_assert!(b.tv_distance(&target) <= k / (2.0 * batch as f64) + 1e-12);
        }
    }
}
