//! Temporal association tests between presence series.
//!
//! For mode series `v1`, `v2` of length n and lag L, the stacked vectors are
//!
//! ```text
//! A = v1[0..n-L] ++ v2[0..n-L]     (predictor, own mode)
//! B = v1[L..n]   ++ v2[L..n]       (response)
//! C = v2[0..n-L] ++ v1[0..n-L]     (predictor, other mode)
//! ```
//!
//! Within-mode tests tabulate (A, B), cross-mode tests (C, B). The pooled
//! control uses a single series with A = v[0..n-L], B = v[L..n].
//!
//! Chi-square and log-odds are calibrated by shuffling each full series
//! independently and rebuilding the table. Permutations are drawn in fixed
//! batches, each from its own ChaCha stream of the test seed, so the result
//! depends only on (inputs, n_perm, seed).

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binning::CellKey;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AssocError {
    #[error("series of length {len} too short for lag {lag}")]
    SeriesTooShort { len: usize, lag: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("lag must be at least 1")]
    ZeroLag,
    #[error("need at least one permutation")]
    NoPermutations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Comparison {
    WithinModes,
    CrossModes,
    Pooled,
}

impl Comparison {
    pub const ALL: [Comparison; 3] = [Comparison::WithinModes, Comparison::CrossModes, Comparison::Pooled];

    pub fn as_str(self) -> &'static str {
        match self {
            Comparison::WithinModes => "within",
            Comparison::CrossModes => "cross",
            Comparison::Pooled => "pooled",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Comparison::ALL.into_iter().find(|c| c.as_str() == s)
    }

    fn tag(self) -> u64 {
        match self {
            Comparison::WithinModes => 1,
            Comparison::CrossModes => 2,
            Comparison::Pooled => 3,
        }
    }
}

/// Stacked lagged vectors for one pair of mode series.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaggedPair {
    pub a: Vec<bool>,
    pub b: Vec<bool>,
    pub c: Vec<bool>,
    pub lag: usize,
    pub n: usize,
}

fn check_lag(n: usize, lag: usize) -> Result<(), AssocError> {
    if lag == 0 {
        return Err(AssocError::ZeroLag);
    }
    if n <= lag + 1 {
        return Err(AssocError::SeriesTooShort { len: n, lag });
    }
    Ok(())
}

pub fn lagged_pair(v1: &[bool], v2: &[bool], lag: usize) -> Result<LaggedPair, AssocError> {
    if v1.len() != v2.len() {
        return Err(AssocError::LengthMismatch(v1.len(), v2.len()));
    }
    let n = v1.len();
    check_lag(n, lag)?;
    let head = n - lag;
    let a = [&v1[..head], &v2[..head]].concat();
    let b = [&v1[lag..], &v2[lag..]].concat();
    let c = [&v2[..head], &v1[..head]].concat();
    Ok(LaggedPair { a, b, c, lag, n })
}

impl LaggedPair {
    pub fn table(&self, comparison: Comparison) -> ContingencyTable {
        let x = match comparison {
            Comparison::CrossModes => &self.c,
            _ => &self.a,
        };
        contingency(x, &self.b).expect("stacked vectors have equal length")
    }
}

/// 2×2 counts of predictor X against response Y.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// Σ X·Y
    pub n11: u64,
    /// Σ X·(1−Y)
    pub n10: u64,
    /// Σ (1−X)·Y
    pub n01: u64,
    /// Σ (1−X)·(1−Y)
    pub n00: u64,
}

pub fn contingency(x: &[bool], y: &[bool]) -> Result<ContingencyTable, AssocError> {
    if x.len() != y.len() {
        return Err(AssocError::LengthMismatch(x.len(), y.len()));
    }
    let mut t = ContingencyTable { n11: 0, n10: 0, n01: 0, n00: 0 };
    for (&a, &b) in x.iter().zip(y) {
        match (a, b) {
            (true, true) => t.n11 += 1,
            (true, false) => t.n10 += 1,
            (false, true) => t.n01 += 1,
            (false, false) => t.n00 += 1,
        }
    }
    Ok(t)
}

impl ContingencyTable {
    pub fn from_counts(n11: u64, n10: u64, n01: u64, n00: u64) -> Self {
        Self { n11, n10, n01, n00 }
    }

    /// Builds the table from the predictor total, response total and overlap.
    fn from_margins(total: u64, x_ones: u64, y_ones: u64, both: u64) -> Self {
        let n10 = x_ones - both;
        let n01 = y_ones - both;
        Self {
            n11: both,
            n10,
            n01,
            n00: total - both - n10 - n01,
        }
    }

    pub fn total(&self) -> u64 {
        self.n11 + self.n10 + self.n01 + self.n00
    }

    /// (row 1, row 0, column 1, column 0)
    pub fn margins(&self) -> (u64, u64, u64, u64) {
        (
            self.n11 + self.n10,
            self.n01 + self.n00,
            self.n11 + self.n01,
            self.n10 + self.n00,
        )
    }

    /// Some margin is zero, so no association is measurable.
    pub fn is_degenerate(&self) -> bool {
        let (r1, r0, c1, c0) = self.margins();
        r1 == 0 || r0 == 0 || c1 == 0 || c0 == 0
    }

    /// Pearson statistic as the exact ratio N·(n11·n00 − n10·n01)² / (r1·r0·c1·c0);
    /// (0, 1) for degenerate tables.
    fn chi_square_ratio(&self) -> (u128, u128) {
        if self.is_degenerate() {
            return (0, 1);
        }
        let (r1, r0, c1, c0) = self.margins();
        let cross = (self.n11 as i128 * self.n00 as i128 - self.n10 as i128 * self.n01 as i128).unsigned_abs();
        let num = (self.total() as u128)
            .checked_mul(cross)
            .and_then(|v| v.checked_mul(cross));
        let den = (r1 as u128 * r0 as u128).checked_mul(c1 as u128 * c0 as u128);
        match (num, den) {
            (Some(n), Some(d)) => (n, d),
            _ => (u128::MAX, 0),
        }
    }

    pub fn chi_square(&self) -> f64 {
        chi_square(self)
    }

    pub fn log_odds(&self) -> f64 {
        log_odds(self)
    }

    /// Exact ordering of chi-square values (floating point only if the
    /// integer products overflow).
    pub fn cmp_chi_square(&self, other: &Self) -> Ordering {
        let (a, b) = (self.chi_square_ratio(), other.chi_square_ratio());
        if a.1 != 0 && b.1 != 0 {
            if let (Some(l), Some(r)) = (a.0.checked_mul(b.1), b.0.checked_mul(a.1)) {
                return l.cmp(&r);
            }
        }
        self.chi_square().total_cmp(&other.chi_square())
    }

    /// Exact ordering of ½-corrected log-odds:
    /// (2n11+1)(2n00+1)/((2n10+1)(2n01+1)).
    pub fn cmp_log_odds(&self, other: &Self) -> Ordering {
        let odd = |x: u64| 2 * x as u128 + 1;
        let l = odd(self.n11)
            .checked_mul(odd(self.n00))
            .and_then(|v| v.checked_mul(odd(other.n10)))
            .and_then(|v| v.checked_mul(odd(other.n01)));
        let r = odd(other.n11)
            .checked_mul(odd(other.n00))
            .and_then(|v| v.checked_mul(odd(self.n10)))
            .and_then(|v| v.checked_mul(odd(self.n01)));
        match (l, r) {
            (Some(l), Some(r)) => l.cmp(&r),
            _ => self.log_odds().total_cmp(&other.log_odds()),
        }
    }
}

/// Pearson Σ (O − E)²/E with expectations from the margins; 0 when any
/// margin is zero.
pub fn chi_square(t: &ContingencyTable) -> f64 {
    if t.is_degenerate() {
        return 0.0;
    }
    let n = t.total() as f64;
    let (r1, r0, c1, c0) = t.margins();
    let cells = [
        (t.n11, r1, c1),
        (t.n10, r1, c0),
        (t.n01, r0, c1),
        (t.n00, r0, c0),
    ];
    cells
        .iter()
        .map(|&(o, r, c)| {
            let e = r as f64 * c as f64 / n;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

/// ln((n11+½)(n00+½) / ((n10+½)(n01+½))), finite for every table.
pub fn log_odds(t: &ContingencyTable) -> f64 {
    let h = |x: u64| x as f64 + 0.5;
    ((h(t.n11) * h(t.n00)) / (h(t.n10) * h(t.n01))).ln()
}

/// Outcome of a permutation calibration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub table: ContingencyTable,
    pub chi_square: f64,
    pub log_odds: f64,
    /// #{χ²_perm ≥ χ²_obs} / n_perm
    pub p_value: f64,
    /// #{LO_perm < LO_obs} / n_perm
    pub log_odds_percentile: f64,
    pub n_permutations: usize,
    pub seed: u64,
    pub degenerate: bool,
}

/// One completed test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationResult {
    pub cell: CellKey,
    pub comparison: Comparison,
    pub lag: usize,
    pub periods_per_year: u32,
    pub calibration: Calibration,
}

impl AssociationResult {
    pub fn test_id(&self) -> String {
        test_id(self.cell, self.comparison, self.lag, self.periods_per_year)
    }
}

/// `r{region}-c{sub}-{comparison}-lag{lag}-p{periods_per_year}`
pub fn test_id(cell: CellKey, comparison: Comparison, lag: usize, periods_per_year: u32) -> String {
    format!(
        "r{}-c{}-{}-lag{}-p{}",
        cell.region_id,
        cell.sub_index,
        comparison.as_str(),
        lag,
        periods_per_year
    )
}

pub const RESULTS_CSV_HEADER: &str = "region_id,sub_index,comparison,lag,periods_per_year,n11,n10,n01,n00,chi_square,log_odds,p_value,log_odds_percentile,degenerate,seed";

pub fn results_csv_row(r: &AssociationResult) -> String {
    let c = &r.calibration;
    let t = &c.table;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.cell.region_id,
        r.cell.sub_index,
        r.comparison.as_str(),
        r.lag,
        r.periods_per_year,
        t.n11,
        t.n10,
        t.n01,
        t.n00,
        c.chi_square,
        c.log_odds,
        c.p_value,
        c.log_odds_percentile,
        c.degenerate,
        c.seed
    )
}

pub fn results_csv(results: &[AssociationResult]) -> String {
    let mut out = String::from(RESULTS_CSV_HEADER);
    out.push('\n');
    for r in results {
        out.push_str(&results_csv_row(r));
        out.push('\n');
    }
    out
}

/// Permutations per RNG stream.
pub const PERMUTATION_BATCH: usize = 1000;

/// Packed bit vector.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Bits {
    words: Vec<u64>,
    len: usize,
}

impl Bits {
    fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    #[cfg(test)]
    fn from_bools(v: &[bool]) -> Self {
        let mut b = Self::zeros(v.len());
        for (i, _) in v.iter().enumerate().filter(|(_, &x)| x) {
            b.set(i);
        }
        b
    }

    fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }

    fn invert(&mut self) {
        for w in self.words.iter_mut() {
            *w = !*w;
        }
        let tail = self.len % 64;
        if tail != 0 {
            let last = self.words.len() - 1;
            self.words[last] &= (1u64 << tail) - 1;
        }
    }

    fn get_word(&self, k: usize) -> u64 {
        self.words.get(k).copied().unwrap_or(0)
    }

    /// Word `k` of the vector shifted down by `shift` (bit t holds bit t+shift).
    fn shifted_word(&self, k: usize, shift: usize) -> u64 {
        let (q, r) = (shift / 64, shift % 64);
        let lo = self.get_word(k + q);
        if r == 0 {
            lo
        } else {
            (lo >> r) | (self.get_word(k + q + 1) << (64 - r))
        }
    }

    /// Ones among positions [from, from + count).
    fn count_range(&self, from: usize, count: usize) -> u64 {
        let mut total = 0u64;
        let words = count.div_ceil(64);
        for k in 0..words {
            let mut w = self.shifted_word(k, from);
            let remaining = count - 64 * k;
            if remaining < 64 {
                w &= (1u64 << remaining) - 1;
            }
            total += w.count_ones() as u64;
        }
        total
    }

    /// Σ_{t < count} x[t] · y[t + lag]
    fn lagged_overlap(x: &Bits, y: &Bits, lag: usize, count: usize) -> u64 {
        let words = count.div_ceil(64);
        let mut total = 0u64;
        for k in 0..words {
            let mut w = x.get_word(k) & y.shifted_word(k, lag);
            let remaining = count - 64 * k;
            if remaining < 64 {
                w &= (1u64 << remaining) - 1;
            }
            total += w.count_ones() as u64;
        }
        total
    }
}

/// Draws uniformly random arrangements of a fixed number of ones by partial
/// Fisher–Yates over a reusable index permutation.
struct ArrangementSampler {
    index: Vec<usize>,
    ones: usize,
}

impl ArrangementSampler {
    fn new(len: usize, ones: usize) -> Self {
        Self {
            index: (0..len).collect(),
            ones,
        }
    }

    fn sample<R: Rng>(&mut self, rng: &mut R, out: &mut Bits) {
        let n = self.index.len();
        let sample_zeros = self.ones > n / 2;
        let m = if sample_zeros { n - self.ones } else { self.ones };
        out.clear();
        for i in 0..m {
            let j = rng.random_range(i..n);
            self.index.swap(i, j);
            out.set(self.index[i]);
        }
        if sample_zeros {
            out.invert();
        }
    }
}

/// Table statistics for a pair of (possibly permuted) full series.
fn stacked_table(w1: &Bits, w2: &Bits, lag: usize, comparison: Comparison) -> ContingencyTable {
    let n = w1.len;
    let head = n - lag;
    let total = 2 * head as u64;
    let x_ones = w1.count_range(0, head) + w2.count_range(0, head);
    let y_ones = w1.count_range(lag, head) + w2.count_range(lag, head);
    let both = match comparison {
        Comparison::CrossModes => {
            Bits::lagged_overlap(w2, w1, lag, head) + Bits::lagged_overlap(w1, w2, lag, head)
        }
        _ => Bits::lagged_overlap(w1, w1, lag, head) + Bits::lagged_overlap(w2, w2, lag, head),
    };
    ContingencyTable::from_margins(total, x_ones, y_ones, both)
}

fn single_table(w: &Bits, lag: usize) -> ContingencyTable {
    let head = w.len - lag;
    ContingencyTable::from_margins(
        head as u64,
        w.count_range(0, head),
        w.count_range(lag, head),
        Bits::lagged_overlap(w, w, lag, head),
    )
}

#[derive(Default, Clone, Copy)]
struct Tally {
    chi_ge: u64,
    lo_below: u64,
}

enum Series<'a> {
    Pair(&'a [bool], &'a [bool], Comparison),
    Single(&'a [bool]),
}

fn run_permutations(series: &Series<'_>, lag: usize, observed: &ContingencyTable, n_perm: usize, seed: u64) -> Tally {
    let batches = n_perm.div_ceil(PERMUTATION_BATCH);
    let tallies = crate::par::map_range(batches, |b| {
        let count = PERMUTATION_BATCH.min(n_perm - b * PERMUTATION_BATCH);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(b as u64);
        let mut tally = Tally::default();
        let mut record = |t: ContingencyTable| {
            if t.cmp_chi_square(observed) != Ordering::Less {
                tally.chi_ge += 1;
            }
            if t.cmp_log_odds(observed) == Ordering::Less {
                tally.lo_below += 1;
            }
        };
        match *series {
            Series::Pair(v1, v2, comparison) => {
                let n = v1.len();
                let mut s1 = ArrangementSampler::new(n, v1.iter().filter(|&&x| x).count());
                let mut s2 = ArrangementSampler::new(n, v2.iter().filter(|&&x| x).count());
                let (mut w1, mut w2) = (Bits::zeros(n), Bits::zeros(n));
                for _ in 0..count {
                    s1.sample(&mut rng, &mut w1);
                    s2.sample(&mut rng, &mut w2);
                    record(stacked_table(&w1, &w2, lag, comparison));
                }
            }
            Series::Single(v) => {
                let n = v.len();
                let mut s = ArrangementSampler::new(n, v.iter().filter(|&&x| x).count());
                let mut w = Bits::zeros(n);
                for _ in 0..count {
                    s.sample(&mut rng, &mut w);
                    record(single_table(&w, lag));
                }
            }
        }
        tally
    });
    tallies.iter().fold(Tally::default(), |acc, t| Tally {
        chi_ge: acc.chi_ge + t.chi_ge,
        lo_below: acc.lo_below + t.lo_below,
    })
}

fn calibrate(series: Series<'_>, lag: usize, n_perm: usize, seed: u64) -> Result<Calibration, AssocError> {
    if n_perm == 0 {
        return Err(AssocError::NoPermutations);
    }
    let table = match series {
        Series::Pair(v1, v2, comparison) => lagged_pair(v1, v2, lag)?.table(comparison),
        Series::Single(v) => {
            check_lag(v.len(), lag)?;
            let head = v.len() - lag;
            contingency(&v[..head], &v[lag..])?
        }
    };
    let tally = run_permutations(&series, lag, &table, n_perm, seed);
    Ok(Calibration {
        table,
        chi_square: chi_square(&table),
        log_odds: log_odds(&table),
        p_value: tally.chi_ge as f64 / n_perm as f64,
        log_odds_percentile: tally.lo_below as f64 / n_perm as f64,
        n_permutations: n_perm,
        seed,
        degenerate: table.is_degenerate(),
    })
}

/// Permutation calibration of the within-mode or cross-mode table. A
/// `Pooled` comparison runs the pooled control on `v1 | v2`.
pub fn permutation_calibrate(
    v1: &[bool],
    v2: &[bool],
    lag: usize,
    comparison: Comparison,
    n_perm: usize,
    seed: u64,
) -> Result<Calibration, AssocError> {
    if v1.len() != v2.len() {
        return Err(AssocError::LengthMismatch(v1.len(), v2.len()));
    }
    match comparison {
        Comparison::Pooled => {
            let any: Vec<bool> = v1.iter().zip(v2).map(|(a, b)| *a || *b).collect();
            pooled_control(&any, lag, n_perm, seed)
        }
        _ => calibrate(Series::Pair(v1, v2, comparison), lag, n_perm, seed),
    }
}

/// Unstacked test of one series against its own lagged copy.
pub fn pooled_control(v: &[bool], lag: usize, n_perm: usize, seed: u64) -> Result<Calibration, AssocError> {
    calibrate(Series::Single(v), lag, n_perm, seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-test seed: SplitMix64 chained over (global seed, region, sub-cell,
/// comparison, lag, periods per year).
pub fn derive_seed(global: u64, cell: CellKey, comparison: Comparison, lag: usize, periods_per_year: u32) -> u64 {
    [
        cell.region_id as u64,
        cell.sub_index as u64,
        comparison.tag(),
        lag as u64,
        periods_per_year as u64,
    ]
    .iter()
    .fold(splitmix64(global), |h, &x| splitmix64(h ^ x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bits(s: &[u8]) -> Vec<bool> {
        s.iter().map(|&x| x == 1).collect()
    }

    #[test]
    fn lagged_pair_example() {
        let p = lagged_pair(&bits(&[1, 0, 1]), &bits(&[0, 1, 0]), 1).unwrap();
        assert_eq!(p.a, bits(&[1, 0, 0, 1]));
        assert_eq!(p.b, bits(&[0, 1, 1, 0]));
        assert_eq!(p.c, bits(&[0, 1, 1, 0]));
        assert_eq!(
            lagged_pair(&bits(&[1, 0, 1]), &bits(&[0, 1, 0]), 2),
            Err(AssocError::SeriesTooShort { len: 3, lag: 2 })
        );
        assert_eq!(
            lagged_pair(&bits(&[1, 0, 1]), &bits(&[0, 1]), 1),
            Err(AssocError::LengthMismatch(3, 2))
        );
    }

    #[test]
    fn swapping_modes_keeps_within_table() {
        for x in 0u32..16 {
            for y in 0u32..16 {
                let v1: Vec<bool> = (0..4).map(|i| x >> i & 1 == 1).collect();
                let v2: Vec<bool> = (0..4).map(|i| y >> i & 1 == 1).collect();
                let a = lagged_pair(&v1, &v2, 1).unwrap().table(Comparison::WithinModes);
                let b = lagged_pair(&v2, &v1, 1).unwrap().table(Comparison::WithinModes);
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn contingency_examples() {
        let t = |x: &[u8], y: &[u8]| contingency(&bits(x), &bits(y)).unwrap();
        assert_eq!(t(&[1, 1, 0, 0], &[1, 0, 1, 0]), ContingencyTable::from_counts(1, 1, 1, 1));
        assert_eq!(t(&[1, 0, 1, 0], &[1, 0, 1, 0]), ContingencyTable::from_counts(2, 0, 0, 2));
        assert_eq!(t(&[1, 1, 1, 1], &[0, 0, 0, 0]), ContingencyTable::from_counts(0, 4, 0, 0));
        assert_eq!(
            contingency(&bits(&[1]), &bits(&[1, 0])),
            Err(AssocError::LengthMismatch(1, 2))
        );
    }

    #[test]
    fn chi_square_examples() {
        // Margins 15 everywhere, expected 7.5: 4 · 2.5² / 7.5.
        let t = ContingencyTable::from_counts(10, 5, 5, 10);
        assert!((chi_square(&t) - 10.0 / 3.0).abs() < 1e-9);
        let perfect = ContingencyTable::from_counts(5, 0, 0, 5);
        assert!((chi_square(&perfect) - 10.0).abs() < 1e-12);
        assert_eq!(chi_square(&ContingencyTable::from_counts(0, 4, 0, 0)), 0.0);
        assert_eq!(chi_square(&ContingencyTable::from_counts(3, 0, 2, 0)), 0.0);
        assert!(ContingencyTable::from_counts(3, 0, 2, 0).is_degenerate());
    }

    #[test]
    fn log_odds_examples() {
        let t = ContingencyTable::from_counts(10, 5, 5, 10);
        assert!((log_odds(&t) - (110.25f64 / 30.25).ln()).abs() < 1e-12);
        assert!((log_odds(&t) - 1.2933).abs() < 1e-4);
        assert_eq!(log_odds(&ContingencyTable::from_counts(7, 7, 7, 7)), 0.0);
        assert!((log_odds(&ContingencyTable::from_counts(5, 0, 0, 5)) - 4.7958).abs() < 1e-4);
        assert!(log_odds(&ContingencyTable::from_counts(0, 9, 4, 0)).is_finite());
    }

    #[test]
    fn constant_ones_are_degenerate_with_p_one() {
        let ones = vec![true; 12];
        for comparison in Comparison::ALL {
            let c = permutation_calibrate(&ones, &ones, 1, comparison, 500, 3).unwrap();
            assert_eq!(c.chi_square, 0.0);
            assert!(c.degenerate);
            assert_eq!(c.p_value, 1.0);
        }
    }

    #[test]
    fn pooled_alternating_pattern() {
        let v: Vec<bool> = (0..20).map(|i| i % 2 == 0).collect();
        let c = pooled_control(&v, 1, 2000, 9).unwrap();
        assert_eq!(c.table, ContingencyTable::from_counts(0, 10, 9, 0));
        assert!((c.log_odds - (0.25f64 / (10.5 * 9.5)).ln()).abs() < 1e-12);
        assert!(c.log_odds < -5.0);
        let zeros = vec![false; 20];
        let z = pooled_control(&zeros, 1, 100, 9).unwrap();
        assert_eq!((z.chi_square, z.p_value), (0.0, 1.0));
    }

    #[test]
    fn errors_propagate() {
        assert_eq!(
            permutation_calibrate(&[true, false, true], &[false, true, false], 2, Comparison::WithinModes, 10, 0),
            Err(AssocError::SeriesTooShort { len: 3, lag: 2 })
        );
        assert_eq!(
            pooled_control(&[true, false, true, false], 1, 0, 0),
            Err(AssocError::NoPermutations)
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let v1: Vec<bool> = (0..200).map(|i| (i * 7) % 5 == 0).collect();
        let v2: Vec<bool> = (0..200).map(|i| (i * 3) % 4 == 0).collect();
        let a = permutation_calibrate(&v1, &v2, 1, Comparison::CrossModes, 2500, 77).unwrap();
        let b = permutation_calibrate(&v1, &v2, 1, Comparison::CrossModes, 2500, 77).unwrap();
        assert_eq!(a, b);
        let c = permutation_calibrate(&v1, &v2, 1, Comparison::CrossModes, 2500, 78).unwrap();
        assert_eq!(a.table, c.table);
    }

    #[test]
    fn seeds_differ_across_tests() {
        let cell = CellKey { region_id: 2, sub_index: 4 };
        let mut seen = std::collections::HashSet::new();
        for comparison in Comparison::ALL {
            for lag in [1, 2] {
                for ppy in [26, 6] {
                    assert!(seen.insert(derive_seed(42, cell, comparison, lag, ppy)));
                }
            }
        }
        assert_ne!(
            derive_seed(42, cell, Comparison::Pooled, 1, 26),
            derive_seed(43, cell, Comparison::Pooled, 1, 26)
        );
    }

    #[test]
    fn sampler_preserves_bit_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (n, k) in [(10, 0), (10, 10), (130, 3), (130, 127), (884, 200)] {
            let mut s = ArrangementSampler::new(n, k);
            let mut w = Bits::zeros(n);
            for _ in 0..50 {
                s.sample(&mut rng, &mut w);
                assert_eq!(w.count_range(0, n), k as u64);
            }
        }
    }

    #[test]
    fn sampler_is_uniform_over_arrangements() {
        // C(5,2) = 10 arrangements, each with probability 0.1.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ArrangementSampler::new(5, 2);
        let mut w = Bits::zeros(5);
        let mut counts = std::collections::HashMap::new();
        let draws = 100_000;
        for _ in 0..draws {
            s.sample(&mut rng, &mut w);
            *counts.entry(w.words[0]).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 10);
        for &c in counts.values() {
            let f = c as f64 / draws as f64;
            assert!((f - 0.1).abs() < 0.006, "{f}");
        }
    }

    proptest! {
        #[test]
        fn packed_tables_match_direct_construction(
            v1 in prop::collection::vec(any::<bool>(), 3..300),
            seed in any::<u64>(),
            lag in 1usize..3,
        ) {
            prop_assume!(v1.len() > lag + 1);
            let v2: Vec<bool> = v1.iter().enumerate().map(|(i, &b)| b ^ ((seed >> (i % 64)) & 1 == 1)).collect();
            let (w1, w2) = (Bits::from_bools(&v1), Bits::from_bools(&v2));
            let pair = lagged_pair(&v1, &v2, lag).unwrap();
            for comparison in [Comparison::WithinModes, Comparison::CrossModes] {
                prop_assert_eq!(stacked_table(&w1, &w2, lag, comparison), pair.table(comparison));
            }
            let head = v1.len() - lag;
            prop_assert_eq!(single_table(&w1, lag), contingency(&v1[..head], &v1[lag..]).unwrap());
        }

        #[test]
        fn exact_orderings_agree_with_floats(
            a in prop::array::uniform4(0u64..60),
            b in prop::array::uniform4(0u64..60),
        ) {
            let ta = ContingencyTable::from_counts(a[0], a[1], a[2], a[3]);
            let tb = ContingencyTable::from_counts(b[0], b[1], b[2], b[3]);
            prop_assume!(ta.total() > 0 && tb.total() > 0);
            let (x, y) = (chi_square(&ta), chi_square(&tb));
            if (x - y).abs() > 1e-9 * x.max(y).max(1.0) {
                prop_assert_eq!(ta.cmp_chi_square(&tb), x.total_cmp(&y));
            }
            let (x, y) = (log_odds(&ta), log_odds(&tb));
            if (x - y).abs() > 1e-12 {
                prop_assert_eq!(ta.cmp_log_odds(&tb), x.total_cmp(&y));
            }
            prop_assert_eq!(ta.cmp_chi_square(&ta), Ordering::Equal);
        }

        #[test]
        fn log_odds_sign_follows_cross_product(t in prop::array::uniform4(1u64..200)) {
            let table = ContingencyTable::from_counts(t[0], t[1], t[2], t[3]);
            let ad = t[0] * t[3];
            let bc = t[1] * t[2];
            // With the ½ correction the sign can only flip when ad and bc are close.
            let corrected = (2 * t[0] + 1) * (2 * t[3] + 1) > (2 * t[1] + 1) * (2 * t[2] + 1);
            prop_assert_eq!(log_odds(&table) > 0.0, corrected);
            if ad > bc + t.iter().sum::<u64>() {
                prop_assert!(log_odds(&table) > 0.0);
            }
        }

        #[test]
        fn p_value_and_percentile_are_proportions(
            v1 in prop::collection::vec(any::<bool>(), 6..60),
            v2 in prop::collection::vec(any::<bool>(), 60),
            n_perm in 1usize..2500,
            seed in any::<u64>(),
        ) {
            let v2 = &v2[..v1.len()];
            let c = permutation_calibrate(&v1, v2, 1, Comparison::WithinModes, n_perm, seed).unwrap();
            for x in [c.p_value, c.log_odds_percentile] {
                prop_assert!((0.0..=1.0).contains(&x));
                let k = x * n_perm as f64;
                prop_assert!((k - k.round()).abs() < 1e-6);
            }
        }
    }
}
