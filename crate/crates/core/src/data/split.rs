use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Example, Sentiment};
use crate::error::{config_err, Error, Result};

/// Train/validation/test fractions. The default is 5000/2000/2947 out of 9947.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        let total = 9947.0;
        Self {
            train: 5000.0 / total,
            val: 2000.0 / total,
            test: 2947.0 / total,
        }
    }
}

impl SplitSpec {
    pub fn fractions(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|&x| !(x > 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_err(format!("split fractions {f:?} must be positive and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

/// Largest-remainder rounding of `n * fractions`; ties go to the earlier slot.
pub(crate) fn largest_remainder(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| n as f64 * f).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[k] += 1;
        left -= 1;
    }
    counts
}

/// Per-class allocation whose rows sum to the class sizes and whose columns sum
/// to the overall largest-remainder split sizes. Each cell is the floor of its
/// proportional quota, possibly plus one.
fn allocate(class_sizes: &[usize], fractions: &[f64; 3]) -> Vec<[usize; 3]> {
    let n: usize = class_sizes.iter().sum();
    let targets = largest_remainder(n, fractions);
    let mut cells: Vec<[usize; 3]> = Vec::with_capacity(class_sizes.len());
    let mut frac: Vec<(f64, usize, usize)> = Vec::new();
    let mut row_left = Vec::with_capacity(class_sizes.len());
    for (c, &nc) in class_sizes.iter().enumerate() {
        let mut row = [0usize; 3];
        for k in 0..3 {
            let q = nc as f64 * fractions[k];
            row[k] = q.floor() as usize;
            frac.push((q - q.floor(), c, k));
        }
        row_left.push(nc - row.iter().sum::<usize>());
        cells.push(row);
    }
    let mut col_left: Vec<usize> = (0..3)
        .map(|k| targets[k] - cells.iter().map(|r| r[k]).sum::<usize>())
        .collect();
    let mut bumped = vec![[false; 3]; class_sizes.len()];
    frac.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    for &(_, c, k) in &frac {
        if row_left[c] > 0 && col_left[k] > 0 {
            cells[c][k] += 1;
            bumped[c][k] = true;
            row_left[c] -= 1;
            col_left[k] -= 1;
        }
    }
    // greedy can strand a unit; place it in any column that still has room
    for c in 0..class_sizes.len() {
        while row_left[c] > 0 {
            let k = (0..3)
                .find(|&k| col_left[k] > 0 && !bumped[c][k])
                .or_else(|| (0..3).find(|&k| col_left[k] > 0))
                .expect("row and column totals agree");
            cells[c][k] += 1;
            bumped[c][k] = true;
            row_left[c] -= 1;
            col_left[k] -= 1;
        }
    }
    cells
}

/// Per-class shuffle and proportional allocation. Within each split examples
/// keep their corpus order.
pub fn stratified_split(corpus: &[Example], spec: &SplitSpec, seed: u64) -> Result<Splits> {
    spec.validate()?;
    let mut by_class: BTreeMap<Sentiment, Vec<usize>> = BTreeMap::new();
    for (i, ex) in corpus.iter().enumerate() {
        by_class.entry(ex.label).or_default().push(i);
    }
    if let Some((label, idx)) = by_class.iter().find(|(_, v)| v.len() < 3) {
        return Err(Error::Input(format!(
            "class {label} has {} examples; stratified splitting needs at least 3",
            idx.len()
        )));
    }
    let sizes: Vec<usize> = by_class.values().map(Vec::len).collect();
    let alloc = allocate(&sizes, &spec.fractions());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for (idx, counts) in by_class.values().zip(&alloc) {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        let mut start = 0;
        for (k, &cnt) in counts.iter().enumerate() {
            parts[k].extend_from_slice(&idx[start..start + cnt]);
            start += cnt;
        }
    }
    let [train, val, test] = parts.map(|mut p| {
        p.sort_unstable();
        p.into_iter().map(|i| corpus[i].clone()).collect::<Vec<_>>()
    });
    Ok(Splits { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(counts: [usize; 3]) -> Vec<Example> {
        let mut out = Vec::new();
        for (label, &n) in Sentiment::ALL.iter().zip(&counts) {
            for i in 0..n {
                out.push(Example::new(format!("{label}-{i}"), *label));
            }
        }
        out
    }

    #[test]
    fn hundred_examples_split_fifty_twenty_thirty() {
        let s = stratified_split(&corpus([37, 37, 26]), &SplitSpec::default(), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (50, 20, 30));
    }

    #[test]
    fn largest_remainder_matches_hand_arithmetic() {
        // 50.27 / 20.11 / 29.63 -> floors 50/20/29, the single leftover goes to the .63
        assert_eq!(largest_remainder(100, &SplitSpec::default().fractions()), vec![50, 20, 30]);
        assert_eq!(largest_remainder(9947, &SplitSpec::default().fractions()), vec![5000, 2000, 2947]);
    }

    #[test]
    fn class_proportions_within_one() {
        let data = corpus([123, 61, 40]);
        let spec = SplitSpec::default();
        let s = stratified_split(&data, &spec, 7).unwrap();
        for (part, f) in [&s.train, &s.val, &s.test].iter().zip(spec.fractions()) {
            for (label, n) in Sentiment::ALL.iter().zip([123.0, 61.0, 40.0]) {
                let got = part.iter().filter(|e| e.label == *label).count() as f64;
                assert!((got - n * f).abs() <= 1.0, "{label}: {got} vs {}", n * f);
            }
        }
    }

    #[test]
    fn disjoint_cover_and_deterministic() {
        let data = corpus([20, 13, 9]);
        let a = stratified_split(&data, &SplitSpec::default(), 3).unwrap();
        let b = stratified_split(&data, &SplitSpec::default(), 3).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<&String> = a.train.iter().chain(&a.val).chain(&a.test).map(|e| &e.text).collect();
        assert_eq!(all.len(), data.len());
        all.sort();
        all.dedup();
        assert_eq!(all.len(), data.len());
    }

    #[test]
    fn small_class_rejected() {
        assert!(stratified_split(&corpus([10, 2, 10]), &SplitSpec::default(), 0).is_err());
    }

    #[test]
    fn spec_validation() {
        let bad = SplitSpec {
            train: 0.5,
            val: 0.5,
            test: 0.1,
        };
        assert!(bad.validate().is_err());
    }
}
