//! Agreement and significance statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::hash::Hash;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::domain::{MiscCode, Speaker};

/// Largest effective sample size for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("chance agreement is 1; kappa is undefined")]
    DegenerateMarginals,
    #[error("all paired differences are zero")]
    AllZeroDifferences,
    #[error("empty input")]
    EmptyInput,
    #[error("invalid agreement matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("ratings table: {0}")]
    Ratings(String),
}

/// Cohen's κ for two raters over the same items.
pub fn cohen_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let n = a.len() as f64;
    let agree = a.iter().zip(b).filter(|(x, y)| x == y).count() as f64;
    let mut ma: HashMap<&T, f64> = HashMap::new();
    let mut mb: HashMap<&T, f64> = HashMap::new();
    for (x, y) in a.iter().zip(b) {
        *ma.entry(x).or_default() += 1.0;
        *mb.entry(y).or_default() += 1.0;
    }
    let po = agree / n;
    let pe: f64 = ma.iter().map(|(k, ca)| ca * mb.get(k).copied().unwrap_or(0.0)).sum::<f64>() / (n * n);
    if (1.0 - pe).abs() < 1e-15 {
        return if agree == n { Ok(1.0) } else { Err(StatsError::DegenerateMarginals) };
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Items × categories rating counts with a constant number of raters per item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    counts: Vec<Vec<u32>>,
    raters: u32,
}

impl AgreementMatrix {
    pub fn new(counts: Vec<Vec<u32>>) -> Result<Self, StatsError> {
        let first = counts.first().ok_or(StatsError::EmptyInput)?;
        let k = first.len();
        if k < 2 {
            return Err(StatsError::InvalidMatrix("need at least 2 categories".into()));
        }
        let raters: u32 = first.iter().sum();
        if raters < 2 {
            return Err(StatsError::InvalidMatrix("need at least 2 raters per item".into()));
        }
        for (i, row) in counts.iter().enumerate() {
            if row.len() != k {
                return Err(StatsError::InvalidMatrix(format!("row {i} has {} categories, expected {k}", row.len())));
            }
            let sum: u32 = row.iter().sum();
            if sum != raters {
                return Err(StatsError::InvalidMatrix(format!("row {i} sums to {sum}, expected {raters}")));
            }
        }
        Ok(AgreementMatrix { counts, raters })
    }

    /// Builds the matrix from per-item label lists; returns the category order used.
    pub fn from_ratings<T: Ord + Clone>(items: &[Vec<T>]) -> Result<(Self, Vec<T>), StatsError> {
        let cats: Vec<T> = items.iter().flatten().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let index: BTreeMap<&T, usize> = cats.iter().enumerate().map(|(i, c)| (c, i)).collect();
        let k = cats.len().max(2);
        let counts = items
            .iter()
            .map(|labels| {
                let mut row = vec![0u32; k];
                for l in labels {
                    row[index[l]] += 1;
                }
                row
            })
            .collect();
        Ok((Self::new(counts)?, cats))
    }

    pub fn items(&self) -> usize {
        self.counts.len()
    }

    pub fn raters(&self) -> u32 {
        self.raters
    }

    pub fn categories(&self) -> usize {
        self.counts[0].len()
    }

    pub fn counts(&self) -> &[Vec<u32>] {
        &self.counts
    }

    /// Overall proportion of ratings in each category.
    pub fn proportions(&self) -> Vec<f64> {
        let total = (self.items() as f64) * self.raters as f64;
        (0..self.categories())
            .map(|j| self.counts.iter().map(|r| r[j] as f64).sum::<f64>() / total)
            .collect()
    }
}

/// Fleiss' κ.
pub fn fleiss_kappa(m: &AgreementMatrix) -> Result<f64, StatsError> {
    let n = m.raters as f64;
    let p = m.proportions();
    let pe: f64 = p.iter().map(|x| x * x).sum();
    if (1.0 - pe).abs() < 1e-15 {
        return Err(StatsError::DegenerateMarginals);
    }
    let pbar = m
        .counts
        .iter()
        .map(|row| (row.iter().map(|&c| (c * c) as f64).sum::<f64>() - n) / (n * (n - 1.0)))
        .sum::<f64>()
        / m.items() as f64;
    Ok((pbar - pe) / (1.0 - pe))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FleissSignificance {
    pub kappa: f64,
    pub variance: f64,
    pub z: f64,
    pub p_two_sided: f64,
}

/// Asymptotic variance of Fleiss' κ under the null of chance agreement, with
/// the corresponding z statistic and two-sided normal p-value.
pub fn fleiss_significance(m: &AgreementMatrix) -> Result<FleissSignificance, StatsError> {
    let kappa = fleiss_kappa(m)?;
    let variance = fleiss_null_variance(m)?;
    let z = kappa / variance.sqrt();
    Ok(FleissSignificance { kappa, variance, z, p_two_sided: two_sided_p(z) })
}

pub fn fleiss_null_variance(m: &AgreementMatrix) -> Result<f64, StatsError> {
    let n = m.raters as f64;
    let big_n = m.items() as f64;
    let p = m.proportions();
    let spq: f64 = p.iter().map(|x| x * (1.0 - x)).sum();
    if spq <= 0.0 {
        return Err(StatsError::DegenerateMarginals);
    }
    let skew: f64 = p.iter().map(|x| x * (1.0 - x) * ((1.0 - x) - x)).sum();
    Ok(2.0 / (big_n * n * (n - 1.0)) * (spq * spq - skew) / (spq * spq))
}

fn two_sided_p(z: f64) -> f64 {
    clamp_p(erfc(z.abs() / std::f64::consts::SQRT_2))
}

fn upper_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn clamp_p(p: f64) -> f64 {
    p.clamp(f64::MIN_POSITIVE, 1.0)
}

/// Post-hoc power of the Fleiss significance test at the observed κ.
///
/// Simulated matrices keep the observed item count, rater count and category
/// proportions; each rating copies a latent item category with probability
/// √κ and is otherwise drawn from the proportions, giving expected κ equal to
/// the observed value.
pub fn posthoc_power(m: &AgreementMatrix, alpha: f64, n_sims: usize, seed: u64) -> Result<f64, StatsError> {
    let kappa = fleiss_kappa(m)?;
    if n_sims < 1000 {
        return Err(StatsError::InvalidArgument(format!("n_sims must be at least 1000, got {n_sims}")));
    }
    simulated_power(&m.proportions(), m.items(), m.raters, kappa, alpha, n_sims, seed)
}

/// Fraction of simulated matrices with true κ `kappa` whose test rejects at `alpha`.
pub fn simulated_power(
    proportions: &[f64],
    items: usize,
    raters: u32,
    kappa: f64,
    alpha: f64,
    n_sims: usize,
    seed: u64,
) -> Result<f64, StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidArgument(format!("alpha must be in (0, 1), got {alpha}")));
    }
    if n_sims == 0 || items == 0 || raters < 2 {
        return Err(StatsError::InvalidArgument("need replicates, items and at least 2 raters".into()));
    }
    let copy = kappa.max(0.0).sqrt();
    let cumulative: Vec<f64> = proportions
        .iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect();
    let k = proportions.len();
    let rejections: usize = (0..n_sims)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(rep as u64)));
            let draw = |rng: &mut ChaCha8Rng| {
                let u: f64 = rng.random();
                cumulative.iter().position(|&c| u < c).unwrap_or(k - 1)
            };
            let counts: Vec<Vec<u32>> = (0..items)
                .map(|_| {
                    let latent = draw(&mut rng);
                    let mut row = vec![0u32; k];
                    for _ in 0..raters {
                        let c = if rng.random::<f64>() < copy { latent } else { draw(&mut rng) };
                        row[c] += 1;
                    }
                    row
                })
                .collect();
            let sim = AgreementMatrix { counts, raters };
            match fleiss_significance(&sim) {
                Ok(s) if s.p_two_sided < alpha => 1,
                _ => 0,
            }
        })
        .sum();
    Ok(rejections as f64 / n_sims as f64)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    TwoSided,
    /// `after` tends to exceed `before`.
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodChoice {
    Auto,
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// Sum of ranks of positive differences.
    pub statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
    pub alternative: Alternative,
    pub n_effective: usize,
    /// Only set for the normal approximation.
    pub z: Option<f64>,
}

/// Ranks of |d| with midranks for ties, doubled so they are integers.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&i, &j| abs[i].total_cmp(&abs[j]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // positions i..=j share the mean of ranks i+1..=j+1; doubled: i+j+2
        for &o in &order[i..=j] {
            ranks[o] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Wilcoxon signed-rank test on paired samples (`after − before`).
pub fn wilcoxon_signed_rank(
    before: &[f64],
    after: &[f64],
    alternative: Alternative,
    method: MethodChoice,
) -> Result<TestResult, StatsError> {
    if before.len() != after.len() {
        return Err(StatsError::LengthMismatch(before.len(), after.len()));
    }
    if before.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    let d: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).filter(|x| *x != 0.0).collect();
    if d.is_empty() {
        return Err(StatsError::AllZeroDifferences);
    }
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let w2: u64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let statistic = w2 as f64 / 2.0;
    let use_exact = match method {
        MethodChoice::Auto => n <= EXACT_MAX_N,
        MethodChoice::Exact => true,
        MethodChoice::Normal => false,
    };
    if use_exact {
        let (le, ge) = exact_tails(&ranks, w2);
        let p = match alternative {
            Alternative::Greater => ge,
            Alternative::Less => le,
            Alternative::TwoSided => (2.0 * le.min(ge)).min(1.0),
        };
        return Ok(TestResult {
            statistic,
            p_value: clamp_p(p),
            method: TestMethod::Exact,
            alternative,
            n_effective: n,
            z: None,
        });
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let mut tie_sizes: HashMap<u64, f64> = HashMap::new();
    for r in &ranks {
        *tie_sizes.entry(*r).or_default() += 1.0;
    }
    let tie_term: f64 = tie_sizes.values().map(|t| t * t * t - t).sum::<f64>() / 48.0;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
    let diff = statistic - mean;
    let (z, p) = match alternative {
        Alternative::TwoSided => {
            let z = (diff.abs() - 0.5).max(0.0) / sd;
            (z * diff.signum(), 2.0 * upper_tail(z))
        }
        Alternative::Greater => {
            let z = (diff - 0.5) / sd;
            (z, upper_tail(z))
        }
        Alternative::Less => {
            let z = (diff + 0.5) / sd;
            (z, 1.0 - upper_tail(z))
        }
    };
    Ok(TestResult {
        statistic,
        p_value: clamp_p(p.min(1.0)),
        method: TestMethod::NormalApprox,
        alternative,
        n_effective: n,
        z: Some(z),
    })
}

/// P(W ≤ w) and P(W ≥ w) under the null, by dynamic programming over the
/// doubled-rank sums of all sign assignments.
fn exact_tails(ranks: &[u64], w2: u64) -> (f64, f64) {
    let total: u64 = ranks.iter().sum();
    let mut dist = vec![0f64; total as usize + 1];
    dist[0] = 1.0;
    let mut reach = 0usize;
    for &r in ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if dist[s] > 0.0 {
                dist[s + r] += dist[s];
            }
        }
        reach += r;
    }
    let all: f64 = dist.iter().sum();
    let le: f64 = dist[..=w2 as usize].iter().sum::<f64>() / all;
    let ge: f64 = dist[w2 as usize..].iter().sum::<f64>() / all;
    (le, ge)
}

/// Maps a counsellor code to its five-way label (MICO, MIIN, R, Q, Other);
/// client codes and unknown labels pass through unchanged.
pub fn collapse_label(label: &str) -> String {
    match MiscCode::parse_for(Speaker::Counsellor, label) {
        Ok(code) => code.counsellor_label().map_or(label.trim().to_string(), |l| l.as_str().to_string()),
        Err(_) => label.trim().to_string(),
    }
}

/// Long-format ratings: one `(item, rater, label)` triple per row.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingTable {
    ratings: BTreeMap<String, BTreeMap<String, String>>,
}

#[derive(Debug, Deserialize)]
struct RatingRow {
    item_id: String,
    rater_id: String,
    label: String,
}

impl RatingTable {
    pub fn insert(&mut self, item: impl Into<String>, rater: impl Into<String>, label: impl Into<String>) {
        self.ratings.entry(item.into()).or_default().insert(rater.into(), label.into());
    }

    /// Reads a CSV with `item_id,rater_id,label` headers.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, StatsError> {
        let mut table = RatingTable::default();
        let mut rdr = csv::Reader::from_reader(reader);
        for row in rdr.deserialize::<RatingRow>() {
            let row = row.map_err(|e| StatsError::Ratings(e.to_string()))?;
            table.insert(row.item_id, row.rater_id, row.label.trim());
        }
        if table.ratings.is_empty() {
            return Err(StatsError::EmptyInput);
        }
        Ok(table)
    }

    pub fn map_labels(&self, f: impl Fn(&str) -> String) -> Self {
        RatingTable {
            ratings: self
                .ratings
                .iter()
                .map(|(item, by)| (item.clone(), by.iter().map(|(r, l)| (r.clone(), f(l))).collect()))
                .collect(),
        }
    }

    pub fn raters(&self) -> Vec<String> {
        self.ratings.values().flat_map(|m| m.keys().cloned()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Items rated by every rater.
    fn complete_items(&self) -> Vec<&BTreeMap<String, String>> {
        let n = self.raters().len();
        self.ratings.values().filter(|m| m.len() == n).collect()
    }

    pub fn agreement_matrix(&self) -> Result<(AgreementMatrix, Vec<String>), StatsError> {
        let items: Vec<Vec<String>> = self.complete_items().iter().map(|m| m.values().cloned().collect()).collect();
        if items.is_empty() {
            return Err(StatsError::EmptyInput);
        }
        AgreementMatrix::from_ratings(&items)
    }

    /// Cohen's κ for every rater pair over the items both rated.
    pub fn pairwise_cohen(&self) -> Vec<PairwiseKappa> {
        let raters = self.raters();
        let mut out = Vec::new();
        for (i, a) in raters.iter().enumerate() {
            for b in &raters[i + 1..] {
                let (xs, ys): (Vec<&String>, Vec<&String>) = self
                    .ratings
                    .values()
                    .filter_map(|m| Some((m.get(a)?, m.get(b)?)))
                    .unzip();
                out.push(PairwiseKappa {
                    rater_a: a.clone(),
                    rater_b: b.clone(),
                    items: xs.len(),
                    kappa: cohen_kappa(&xs, &ys).ok(),
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseKappa {
    pub rater_a: String,
    pub rater_b: String,
    pub items: usize,
    pub kappa: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cohen_examples() {
        assert_eq!(cohen_kappa(&["X", "Y", "X", "Y"], &["X", "Y", "X", "Y"]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&["X", "X", "Y", "Y"], &["X", "Y", "X", "Y"]).unwrap(), 0.0);
        assert_eq!(cohen_kappa(&["X", "Y"], &["Y", "X"]).unwrap(), -1.0);
        assert_eq!(cohen_kappa(&["X", "X"], &["X", "X"]).unwrap(), 1.0);
        assert_eq!(cohen_kappa(&["X"], &["X", "Y"]), Err(StatsError::LengthMismatch(1, 2)));
        assert_eq!(cohen_kappa::<&str>(&[], &[]), Err(StatsError::EmptyInput));
    }

    #[test]
    fn fleiss_examples() {
        let m = AgreementMatrix::new(vec![vec![3, 0], vec![0, 3], vec![3, 0]]).unwrap();
        assert_eq!(fleiss_kappa(&m).unwrap(), 1.0);
        let m = AgreementMatrix::new(vec![vec![1, 1]; 4]).unwrap();
        assert_eq!(fleiss_kappa(&m).unwrap(), -1.0);
        let m = AgreementMatrix::new(vec![vec![2, 0]; 4]).unwrap();
        assert_eq!(fleiss_kappa(&m), Err(StatsError::DegenerateMarginals));
        assert!(AgreementMatrix::new(vec![vec![2, 0], vec![1, 0]]).is_err());
        assert!(AgreementMatrix::new(vec![vec![1, 0]]).is_err());
    }

    #[test]
    fn fleiss_textbook_value() {
        // Fleiss (1971) worked example: 10 items, 14 raters, 5 categories.
        let m = AgreementMatrix::new(vec![
            vec![0, 0, 0, 0, 14],
            vec![0, 2, 6, 4, 2],
            vec![0, 0, 3, 5, 6],
            vec![0, 3, 9, 2, 0],
            vec![2, 2, 8, 1, 1],
            vec![7, 7, 0, 0, 0],
            vec![3, 2, 6, 3, 0],
            vec![2, 5, 3, 2, 2],
            vec![6, 5, 2, 1, 0],
            vec![0, 2, 2, 3, 7],
        ])
        .unwrap();
        assert!((fleiss_kappa(&m).unwrap() - 0.210).abs() < 1e-3);
    }

    #[test]
    fn significance_is_positive_and_small_p_for_strong_agreement() {
        let rows: Vec<Vec<u32>> = (0..200).map(|i| if i % 3 == 0 { vec![5, 0, 0] } else if i % 3 == 1 { vec![0, 4, 1] } else { vec![0, 0, 5] }).collect();
        let s = fleiss_significance(&AgreementMatrix::new(rows).unwrap()).unwrap();
        assert!(s.variance > 0.0);
        assert!(s.p_two_sided > 0.0 && s.p_two_sided < 1e-3);
    }

    #[test]
    fn power_is_deterministic_and_bounded() {
        let rows: Vec<Vec<u32>> = (0..60).map(|i| if i % 2 == 0 { vec![3, 1] } else { vec![0, 4] }).collect();
        let m = AgreementMatrix::new(rows).unwrap();
        let a = posthoc_power(&m, 0.05, 1000, 7).unwrap();
        assert_eq!(a, posthoc_power(&m, 0.05, 1000, 7).unwrap());
        assert!(a > 0.9);
        assert_eq!(posthoc_power(&m, 1e-300, 1000, 7).unwrap(), 0.0);
        assert!(posthoc_power(&m, 0.05, 10, 7).is_err());
        assert!(posthoc_power(&m, 1.5, 1000, 7).is_err());
    }

    #[test]
    fn null_simulation_is_calibrated() {
        let power = simulated_power(&[0.4, 0.3, 0.2, 0.1], 300, 4, 0.0, 0.05, 4000, 11).unwrap();
        assert!((power - 0.05).abs() <= 0.02, "{power}");
    }

    #[test]
    fn wilcoxon_basics() {
        assert_eq!(
            wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0], Alternative::TwoSided, MethodChoice::Auto),
            Err(StatsError::AllZeroDifferences)
        );
        assert!(matches!(
            wilcoxon_signed_rank(&[1.0], &[1.0, 2.0], Alternative::TwoSided, MethodChoice::Auto),
            Err(StatsError::LengthMismatch(1, 2))
        ));
        // All eight differences positive: exact one-sided p = 1/256.
        let before = [0.0; 8];
        let after = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let r = wilcoxon_signed_rank(&before, &after, Alternative::Greater, MethodChoice::Auto).unwrap();
        assert_eq!(r.method, TestMethod::Exact);
        assert_eq!(r.statistic, 36.0);
        assert!((r.p_value - 1.0 / 256.0).abs() < 1e-15);
        let r = wilcoxon_signed_rank(&before, &after, Alternative::TwoSided, MethodChoice::Auto).unwrap();
        assert!((r.p_value - 2.0 / 256.0).abs() < 1e-15);
        let r = wilcoxon_signed_rank(&before, &after, Alternative::Less, MethodChoice::Auto).unwrap();
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn midranks() {
        assert_eq!(doubled_ranks(&[1.0, 2.0, 2.0, 3.0]), [2, 5, 5, 8]);
    }

    #[test]
    fn collapse_levels() {
        assert_eq!(collapse_label("AF"), "MICO");
        assert_eq!(collapse_label("CON"), "MIIN");
        assert_eq!(collapse_label("Q"), "Q");
        assert_eq!(collapse_label("GI"), "Other");
        assert_eq!(collapse_label("C"), "C");
    }

    #[test]
    fn rating_table() {
        let csv = "item_id,rater_id,label\n1,a,AF\n1,b,SU\n2,a,Q\n2,b,Q\n3,a,R\n3,b,GI\n4,a,R\n";
        let t = RatingTable::from_csv(csv.as_bytes()).unwrap();
        let (m, cats) = t.agreement_matrix().unwrap();
        assert_eq!(m.items(), 3);
        assert_eq!(cats, ["AF", "GI", "Q", "R", "SU"]);
        let collapsed = t.map_labels(collapse_label);
        let (m, _) = collapsed.agreement_matrix().unwrap();
        assert_eq!(m.counts()[0], [2, 0, 0, 0]);
        let pw = collapsed.pairwise_cohen();
        assert_eq!(pw.len(), 1);
        assert_eq!(pw[0].items, 3);
    }

    proptest! {
        #[test]
        fn cohen_relabel_invariant(pairs in prop::collection::vec((0u8..4, 0u8..4), 1..40), shift in 1u8..4) {
            let a: Vec<u8> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            let ra: Vec<u8> = a.iter().map(|x| (x + shift) % 4).collect();
            let rb: Vec<u8> = b.iter().map(|x| (x + shift) % 4).collect();
            match (cohen_kappa(&a, &b), cohen_kappa(&ra, &rb)) {
                (Ok(x), Ok(y)) => {
                    prop_assert!((x - y).abs() < 1e-12);
                    prop_assert!((-1.0..=1.0 + 1e-12).contains(&x));
                }
                (x, y) => prop_assert_eq!(x, y),
            }
        }

        #[test]
        fn cohen_self_agreement(a in prop::collection::vec(0u8..5, 2..30)) {
            prop_assume!(a.iter().collect::<BTreeSet<_>>().len() >= 2);
            prop_assert_eq!(cohen_kappa(&a, &a).unwrap(), 1.0);
        }

        #[test]
        fn fleiss_column_permutation_invariant(rows in prop::collection::vec(prop::collection::vec(0u32..4, 3), 2..20)) {
            let rows: Vec<Vec<u32>> = rows.into_iter().map(|mut r| { let s: u32 = r.iter().sum(); r[0] += 6 - s.min(6); let s: u32 = r.iter().sum(); if s > 6 { r = vec![2, 2, 2]; } r }).collect();
            let m = AgreementMatrix::new(rows.clone()).unwrap();
            let permuted = AgreementMatrix::new(rows.iter().map(|r| vec![r[2], r[0], r[1]]).collect()).unwrap();
            match (fleiss_kappa(&m), fleiss_kappa(&permuted)) {
                (Ok(x), Ok(y)) => {
                    prop_assert!((x - y).abs() < 1e-12);
                    prop_assert!((-1.0 / 5.0 - 1e-12..=1.0 + 1e-12).contains(&x));
                    prop_assert!(fleiss_null_variance(&m).unwrap() > 0.0);
                }
                (x, y) => prop_assert_eq!(x, y),
            }
        }

        #[test]
        fn wilcoxon_p_in_unit_interval(d in prop::collection::vec(-5i32..6, 1..40)) {
            prop_assume!(d.iter().any(|x| *x != 0));
            let before = vec![0.0; d.len()];
            let after: Vec<f64> = d.iter().map(|x| *x as f64).collect();
            for alt in [Alternative::TwoSided, Alternative::Greater, Alternative::Less] {
                for m in [MethodChoice::Exact, MethodChoice::Normal] {
                    let r = wilcoxon_signed_rank(&before, &after, alt, m).unwrap();
                    prop_assert!(r.p_value > 0.0 && r.p_value <= 1.0);
                }
            }
        }
    }
}
