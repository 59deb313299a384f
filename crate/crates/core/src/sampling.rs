//! Weighted random sampling with per-class inverse-frequency weights, so every
//! non-empty class carries the same total probability mass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::data_io::LabeledManifest;
use crate::error::{Error, Result};

pub fn class_counts(manifest: &LabeledManifest, classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for r in manifest.records() {
        counts[r.label] += 1;
    }
    counts
}

/// `1 / N_i` per class; classes with no samples get weight 0.
pub fn inverse_frequency_weights(counts: &[usize]) -> Vec<f64> {
    counts
        .iter()
        .map(|&n| if n == 0 { 0.0 } else { 1.0 / n as f64 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSpec {
    weights: Vec<f64>,
    replacement: bool,
    seed: u64,
}

impl SamplerSpec {
    pub fn new(weights: Vec<f64>, replacement: bool, seed: u64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("sampler needs at least one weight"));
        }
        if weights.iter().all(|&w| w == 0.0) {
            return Err(Error::invalid("all sampling weights are zero"));
        }
        if let Some(w) = weights.iter().find(|w| **w <= 0.0 || !w.is_finite()) {
            return Err(Error::invalid(format!(
                "sampling weights must be positive and finite, got {w}"
            )));
        }
        Ok(Self {
            weights,
            replacement,
            seed,
        })
    }

    /// Each record weighted by `1 / N_label`, drawn with replacement.
    pub fn balanced(manifest: &LabeledManifest, classes: usize, seed: u64) -> Result<Self> {
        let w = inverse_frequency_weights(&class_counts(manifest, classes));
        Self::new(manifest.records().iter().map(|r| w[r.label]).collect(), true, seed)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn replacement(&self) -> bool {
        self.replacement
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Vose's alias table: O(1) draws from a fixed discrete distribution.
#[derive(Debug, Clone)]
pub struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<usize>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        let n = weights.len();
        let total: f64 = weights.iter().sum();
        if n == 0 || total <= 0.0 || !total.is_finite() {
            return Err(Error::invalid("alias table needs a positive finite total weight"));
        }
        let mut scaled: Vec<f64> = weights.iter().map(|w| w * n as f64 / total).collect();
        let mut prob = vec![0.0; n];
        let mut alias = vec![0; n];
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(&s), Some(&l)) = (small.last(), large.last()) {
            small.pop();
            prob[s] = scaled[s];
            alias[s] = l;
            scaled[l] -= 1.0 - scaled[s];
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // Leftovers are 1 up to rounding.
        for i in large.into_iter().chain(small) {
            prob[i] = 1.0;
            alias[i] = i;
        }
        Ok(Self { prob, alias })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let i = rng.random_range(0..self.prob.len());
        if rng.random::<f64>() < self.prob[i] {
            i
        } else {
            self.alias[i]
        }
    }

    /// Exact probability of each outcome implied by the table.
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.prob.len() as f64;
        let mut p = vec![0.0; self.prob.len()];
        for (i, (&pi, &a)) in self.prob.iter().zip(&self.alias).enumerate() {
            p[i] += pi / n;
            p[a] += (1.0 - pi) / n;
        }
        p
    }
}

/// `n` record indices with `P(j) = w_j / sum(w)`. Without replacement, uses
/// weighted reservoir keys `ln(u) / w_j` and requires `n <= len`.
pub fn draw_epoch_indices(spec: &SamplerSpec, n: usize) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("must draw at least one index"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.replacement {
        let table = AliasTable::new(&spec.weights)?;
        return Ok((0..n).map(|_| table.sample(&mut rng)).collect());
    }
    if n > spec.weights.len() {
        return Err(Error::invalid(format!(
            "cannot draw {n} of {} records without replacement",
            spec.weights.len()
        )));
    }
    let mut keyed: Vec<(f64, usize)> = spec
        .weights
        .iter()
        .enumerate()
        .map(|(j, &w)| {
            let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / w, j)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().take(n).map(|(_, j)| j).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChiSquare {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
}

/// Pearson goodness-of-fit of observed counts against expected proportions.
/// Categories with zero expected probability must have zero observations and
/// are dropped.
pub fn chi_square(observed: &[u64], expected_prob: &[f64]) -> Result<ChiSquare> {
    if observed.len() != expected_prob.len() {
        return Err(Error::shape("observed and expected lengths differ"));
    }
    let n: u64 = observed.iter().sum();
    let mut stat = 0.0;
    let mut cats = 0usize;
    for (&o, &p) in observed.iter().zip(expected_prob) {
        if p == 0.0 {
            if o != 0 {
                return Err(Error::invalid("observation in a zero-probability category"));
            }
            continue;
        }
        let e = p * n as f64;
        stat += (o as f64 - e).powi(2) / e;
        cats += 1;
    }
    if cats < 2 {
        return Err(Error::invalid("chi-square needs at least two categories"));
    }
    let dof = cats - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(ChiSquare {
        statistic: stat,
        dof,
        p_value: dist.sf(stat),
    })
}

/// Per-class draw counts for sampled record indices.
pub fn drawn_class_counts(indices: &[usize], manifest: &LabeledManifest, classes: usize) -> Vec<u64> {
    let mut counts = vec![0u64; classes];
    for &i in indices {
        counts[manifest.records()[i].label] += 1;
    }
    counts
}

/// Equal mass on each non-empty class.
pub fn balanced_class_probabilities(counts: &[usize]) -> Vec<f64> {
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    counts
        .iter()
        .map(|&c| if c > 0 { 1.0 / present } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::ManifestRecord;

    fn manifest(labels: &[usize], classes: usize) -> LabeledManifest {
        let records = labels
            .iter()
            .enumerate()
            .map(|(i, &label)| ManifestRecord {
                image_id: format!("{i}.png"),
                label,
            })
            .collect();
        LabeledManifest::new(records, classes).unwrap()
    }

    #[test]
    fn counts() {
        assert_eq!(class_counts(&manifest(&[0, 0, 1], 2), 2), vec![2, 1]);
        assert_eq!(class_counts(&manifest(&[], 3), 3), vec![0, 0, 0]);
    }

    #[test]
    fn weights() {
        assert_eq!(inverse_frequency_weights(&[100, 10]), vec![0.01, 0.1]);
        assert_eq!(inverse_frequency_weights(&[1, 1, 1]), vec![1.0, 1.0, 1.0]);
        assert_eq!(inverse_frequency_weights(&[5, 0]), vec![0.2, 0.0]);
    }

    #[test]
    fn degenerate_specs() {
        assert!(SamplerSpec::new(vec![0.0, 0.0], true, 1).is_err());
        assert!(SamplerSpec::new(vec![1.0, f64::NAN], true, 1).is_err());
        assert!(SamplerSpec::new(vec![], true, 1).is_err());
        let spec = SamplerSpec::new(vec![2.0], true, 1).unwrap();
        assert!(draw_epoch_indices(&spec, 0).is_err());
        assert_eq!(draw_epoch_indices(&spec, 50).unwrap(), vec![0; 50]);
    }

    #[test]
    fn alias_probabilities_match_weights() {
        let w = [3.0, 1.0, 0.5, 10.0, 0.25];
        let t = AliasTable::new(&w).unwrap();
        let total: f64 = w.iter().sum();
        for (p, wi) in t.probabilities().iter().zip(w) {
            assert!((p - wi / total).abs() < 1e-12);
        }
    }

    #[test]
    fn alias_large_list_exhausted_by_rounding() {
        let w = [
            4.672424269015717,
            0.0,
            4.714916932720396,
            9.408709797873277,
            5.5542260334411395,
        ];
        let t = AliasTable::new(&w).unwrap();
        let total: f64 = w.iter().sum();
        for (p, wi) in t.probabilities().iter().zip(w) {
            assert!((p - wi / total).abs() < 1e-12);
        }
    }

    #[test]
    fn balanced_spec_has_equal_class_mass() {
        let labels: Vec<usize> = (0..1000).map(|i| if i < 900 { 0 } else { 1 }).collect();
        let m = manifest(&labels, 2);
        let spec = SamplerSpec::balanced(&m, 2, 0).unwrap();
        let table = AliasTable::new(spec.weights()).unwrap();
        let p = table.probabilities();
        let mass0: f64 = p[..900].iter().sum();
        assert!((mass0 - 0.5).abs() < 1e-9);
    }

    #[test]
    fn without_replacement_is_a_permutation_prefix() {
        let spec = SamplerSpec::new(vec![1.0, 5.0, 2.0, 0.1], false, 3).unwrap();
        let mut idx = draw_epoch_indices(&spec, 4).unwrap();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert!(draw_epoch_indices(&spec, 5).is_err());
    }

    #[test]
    fn deterministic() {
        let spec = SamplerSpec::new(vec![1.0, 2.0, 3.0], true, 11).unwrap();
        assert_eq!(
            draw_epoch_indices(&spec, 100).unwrap(),
            draw_epoch_indices(&spec, 100).unwrap()
        );
        assert_ne!(
            draw_epoch_indices(&spec, 100).unwrap(),
            draw_epoch_indices(&spec.with_seed(12), 100).unwrap()
        );
    }

    #[test]
    fn chi_square_known_value() {
        // (10-15)^2/15 + (20-15)^2/15 = 3.333..., dof 1, sf = 0.0679
        let c = chi_square(&[10, 20], &[0.5, 0.5]).unwrap();
        assert!((c.statistic - 10.0 / 3.0).abs() < 1e-12);
        assert!((c.p_value - 0.067_889_154).abs() < 1e-6);
    }
}
