//! Mean-difference projection classifier.
//!
//! Shallow and deep events are projected onto the unit vector joining the
//! two class means (in raw degrees). A Gaussian KDE is fitted to each
//! class's projections, and the point where the two unit-mass densities
//! cross splits every depth class into a "1" side (below the threshold) and
//! a "2" side (at or above it).

use serde::{Deserialize, Serialize};

use crate::catalog::DepthClass;
use crate::tensor::FeatureVector;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClassifierError {
    #[error("{} class has no events", .0.as_str())]
    EmptyClass(DepthClass),
    #[error("class means coincide; projection direction is zero")]
    EmptyDirection,
    #[error("need at least {needed} samples for a density estimate, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("samples have zero spread; density estimate is degenerate")]
    ZeroVariance,
    #[error("non-finite sample value")]
    NonFinite,
}

pub const MIN_KDE_SAMPLES: usize = 10;

/// Class means and the unit direction from the shallow to the deep mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub mean_shallow: [f64; 4],
    pub mean_deep: [f64; 4],
    pub direction: [f64; 4],
}

fn mean4(features: &[FeatureVector]) -> [f64; 4] {
    let mut acc = [0.0; 4];
    for f in features {
        for (a, x) in acc.iter_mut().zip(f.to_array()) {
            *a += x;
        }
    }
    acc.map(|a| a / features.len() as f64)
}

pub fn fit_projection(
    shallow: &[FeatureVector],
    deep: &[FeatureVector],
) -> Result<Projection, ClassifierError> {
    if shallow.is_empty() {
        return Err(ClassifierError::EmptyClass(DepthClass::Shallow));
    }
    if deep.is_empty() {
        return Err(ClassifierError::EmptyClass(DepthClass::Deep));
    }
    let mean_shallow = mean4(shallow);
    let mean_deep = mean4(deep);
    let diff: [f64; 4] = std::array::from_fn(|i| mean_deep[i] - mean_shallow[i]);
    let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(ClassifierError::EmptyDirection);
    }
    Ok(Projection {
        mean_shallow,
        mean_deep,
        direction: diff.map(|d| d / norm),
    })
}

impl Projection {
    /// (feature − mean_shallow) · direction
    pub fn project(&self, feature: &FeatureVector) -> f64 {
        feature
            .to_array()
            .iter()
            .zip(self.mean_shallow.iter())
            .zip(self.direction.iter())
            .map(|((x, m), d)| (x - m) * d)
            .sum()
    }
}

/// Gaussian KDE tabulated on an equally spaced grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdeOptions {
    pub grid_size: usize,
    pub n_candidates: usize,
    /// Candidate bandwidths span these multiples of the normal-reference bandwidth.
    pub candidate_span: (f64, f64),
    /// Above this sample count the LSCV score uses binned pair distances.
    pub exact_limit: usize,
    pub n_bins: usize,
}

impl Default for KdeOptions {
    fn default() -> Self {
        Self {
            grid_size: 512,
            n_candidates: 64,
            candidate_span: (0.05, 5.0),
            exact_limit: 2000,
            n_bins: 1000,
        }
    }
}

const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 1.06 · min(sd, IQR/1.34) · n^(-1/5)
pub fn normal_reference_bandwidth(samples: &[f64]) -> Result<f64, ClassifierError> {
    let n = samples.len();
    if n < 2 {
        return Err(ClassifierError::TooFewSamples { needed: 2, got: n });
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd.is_nan() || sd <= 0.0 {
        return Err(ClassifierError::ZeroVariance);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(1.06 * spread * (n as f64).powf(-0.2))
}

/// Pairwise distances, either exact or binned.
enum PairDistances {
    Exact(Vec<f64>),
    /// (bin width, pair counts per bin offset)
    Binned(f64, Vec<f64>),
}

impl PairDistances {
    fn build(samples: &[f64], opts: &KdeOptions) -> Self {
        let n = samples.len();
        if n <= opts.exact_limit {
            let mut d = Vec::with_capacity(n * (n - 1) / 2);
            for i in 0..n {
                for j in i + 1..n {
                    d.push(samples[i] - samples[j]);
                }
            }
            return PairDistances::Exact(d);
        }
        let (lo, hi) = samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let nb = opts.n_bins;
        let width = (hi - lo) / nb as f64;
        let mut counts = vec![0.0f64; nb];
        for &x in samples {
            let b = (((x - lo) / width) as usize).min(nb - 1);
            counts[b] += 1.0;
        }
        let pairs = crate::par::map_range(nb, |k| {
            if k == 0 {
                counts.iter().map(|c| c * (c - 1.0) / 2.0).sum::<f64>()
            } else {
                (0..nb - k).map(|b| counts[b] * counts[b + k]).sum::<f64>()
            }
        });
        PairDistances::Binned(width, pairs)
    }

    /// (Σ_{i<j} exp(-δ²/4), Σ_{i<j} exp(-δ²/2)) with δ = distance / h.
    fn kernel_sums(&self, h: f64) -> (f64, f64) {
        match self {
            PairDistances::Exact(d) => {
                let chunks: Vec<&[f64]> = d.chunks(1 << 16).collect();
                let parts = crate::par::map(&chunks, |c| {
                    c.iter().fold((0.0, 0.0), |(a, b), x| {
                        let u = (x / h) * (x / h);
                        (a + (-u / 4.0).exp(), b + (-u / 2.0).exp())
                    })
                });
                parts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0, b + p.1))
            }
            PairDistances::Binned(width, pairs) => {
                pairs.iter().enumerate().fold((0.0, 0.0), |(a, b), (k, &c)| {
                    let u = (k as f64 * width / h).powi(2);
                    (a + c * (-u / 4.0).exp(), b + c * (-u / 2.0).exp())
                })
            }
        }
    }
}

/// Unbiased (least-squares) cross-validation score for a Gaussian kernel:
/// ∫f̂² − (2/n) Σ f̂₋ᵢ(xᵢ).
fn ucv_score(pairs: &PairDistances, n: usize, h: f64) -> f64 {
    let n = n as f64;
    let (s4, s2) = pairs.kernel_sums(h);
    INV_SQRT_PI / (2.0 * n * h) + INV_SQRT_PI * s4 / (n * n * h)
        - 4.0 * INV_SQRT_2PI * s2 / (n * (n - 1.0) * h)
}

/// Exact UCV score, for use as a reference.
pub fn ucv_exact(samples: &[f64], h: f64) -> f64 {
    let opts = KdeOptions {
        exact_limit: usize::MAX,
        ..KdeOptions::default()
    };
    ucv_score(&PairDistances::build(samples, &opts), samples.len(), h)
}

/// Log-spaced candidates between the span multiples of the reference bandwidth.
pub fn bandwidth_candidates(reference: f64, opts: &KdeOptions) -> Vec<f64> {
    let (lo, hi) = opts.candidate_span;
    let k = opts.n_candidates.max(2);
    (0..k)
        .map(|i| {
            let t = i as f64 / (k - 1) as f64;
            reference * (lo.ln() + t * (hi.ln() - lo.ln())).exp()
        })
        .collect()
}

/// Bandwidth minimising the UCV score over the candidate grid; the first
/// minimum wins on ties.
pub fn lscv_bandwidth(samples: &[f64], opts: &KdeOptions) -> Result<f64, ClassifierError> {
    check_samples(samples)?;
    let reference = normal_reference_bandwidth(samples)?;
    let pairs = PairDistances::build(samples, opts);
    let mut best = (f64::INFINITY, reference);
    for h in bandwidth_candidates(reference, opts) {
        let score = ucv_score(&pairs, samples.len(), h);
        if score < best.0 {
            best = (score, h);
        }
    }
    Ok(best.1)
}

fn check_samples(samples: &[f64]) -> Result<(), ClassifierError> {
    if samples.len() < MIN_KDE_SAMPLES {
        return Err(ClassifierError::TooFewSamples {
            needed: MIN_KDE_SAMPLES,
            got: samples.len(),
        });
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(ClassifierError::NonFinite);
    }
    Ok(())
}

pub fn fit_kde(samples: &[f64], grid_size: usize) -> Result<DensityEstimate, ClassifierError> {
    fit_kde_with(
        samples,
        &KdeOptions {
            grid_size,
            ..KdeOptions::default()
        },
    )
}

pub fn fit_kde_with(samples: &[f64], opts: &KdeOptions) -> Result<DensityEstimate, ClassifierError> {
    let h = lscv_bandwidth(samples, opts)?;
    Ok(kde_on_grid(samples, h, opts.grid_size.max(2)))
}

/// Tabulates the KDE with bandwidth `h` over data range ± 3h, normalized to
/// unit trapezoid mass.
pub fn kde_on_grid(samples: &[f64], h: f64, grid_size: usize) -> DensityEstimate {
    let (lo, hi) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (start, end) = (lo - 3.0 * h, hi + 3.0 * h);
    let step = (end - start) / (grid_size - 1) as f64;
    let grid: Vec<f64> = (0..grid_size).map(|i| start + step * i as f64).collect();
    let norm = INV_SQRT_2PI / (samples.len() as f64 * h);
    let mut values = crate::par::map(&grid, |&g| {
        norm * samples
            .iter()
            .map(|x| {
                let u = (g - x) / h;
                (-0.5 * u * u).exp()
            })
            .sum::<f64>()
    });
    let mass = trapezoid(&grid, &values);
    if mass > 0.0 {
        for v in values.iter_mut() {
            *v /= mass;
        }
    }
    DensityEstimate {
        grid,
        values,
        bandwidth: h,
    }
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

impl DensityEstimate {
    pub fn integral(&self) -> f64 {
        trapezoid(&self.grid, &self.values)
    }

    pub fn mean(&self) -> f64 {
        let xy: Vec<f64> = self.grid.iter().zip(&self.values).map(|(x, y)| x * y).collect();
        trapezoid(&self.grid, &xy) / self.integral()
    }

    /// Linear interpolation; zero outside the tabulated range.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.grid.len();
        if n == 0 || x < self.grid[0] || x > self.grid[n - 1] {
            return 0.0;
        }
        let step = (self.grid[n - 1] - self.grid[0]) / (n - 1) as f64;
        let pos = (x - self.grid[0]) / step;
        let i = (pos.floor() as usize).min(n - 2);
        let t = pos - i as f64;
        self.values[i] * (1.0 - t) + self.values[i + 1] * t
    }
}

/// The split point between the two densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub value: f64,
    /// False when the densities never cross and the midpoint of the class
    /// means was used instead.
    pub crossing_found: bool,
}

/// Points where `shallow − deep` changes sign, on a common grid. Runs of
/// exact zeros between opposite signs resolve to the run's midpoint.
pub fn density_crossings(shallow: &DensityEstimate, deep: &DensityEstimate) -> Vec<f64> {
    let lo = shallow.grid[0].min(deep.grid[0]);
    let hi = shallow.grid[shallow.grid.len() - 1].max(deep.grid[deep.grid.len() - 1]);
    let n = 4 * shallow.grid.len().max(deep.grid.len());
    let step = (hi - lo) / (n - 1) as f64;
    let xs: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
    let diff: Vec<f64> = xs.iter().map(|&x| shallow.eval(x) - deep.eval(x)).collect();

    let mut out = Vec::new();
    let mut last: Option<usize> = None;
    for (i, &d) in diff.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        if let Some(j) = last {
            if diff[j].signum() != d.signum() {
                if j + 1 == i {
                    let t = diff[j] / (diff[j] - d);
                    out.push(xs[j] + t * (xs[i] - xs[j]));
                } else {
                    out.push(0.5 * (xs[j + 1] + xs[i - 1]));
                }
            }
        }
        last = Some(i);
    }
    out
}

/// Crossing nearest the midpoint of the two density means, or that midpoint
/// when there is no crossing.
pub fn find_threshold(shallow: &DensityEstimate, deep: &DensityEstimate) -> Threshold {
    let mid = 0.5 * (shallow.mean() + deep.mean());
    let crossings = density_crossings(shallow, deep);
    match crossings
        .iter()
        .copied()
        .min_by(|a, b| (a - mid).abs().total_cmp(&(b - mid).abs()))
    {
        Some(value) => Threshold {
            value,
            crossing_found: true,
        },
        None => Threshold {
            value: mid,
            crossing_found: false,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModeLabel {
    Shallow1,
    Shallow2,
    Deep1,
    Deep2,
}

impl ModeLabel {
    pub const ALL: [ModeLabel; 4] = [
        ModeLabel::Shallow1,
        ModeLabel::Shallow2,
        ModeLabel::Deep1,
        ModeLabel::Deep2,
    ];

    pub fn new(depth: DepthClass, upper_side: bool) -> Self {
        match (depth, upper_side) {
            (DepthClass::Shallow, false) => ModeLabel::Shallow1,
            (DepthClass::Shallow, true) => ModeLabel::Shallow2,
            (DepthClass::Deep, false) => ModeLabel::Deep1,
            (DepthClass::Deep, true) => ModeLabel::Deep2,
        }
    }

    pub fn depth_class(self) -> DepthClass {
        match self {
            ModeLabel::Shallow1 | ModeLabel::Shallow2 => DepthClass::Shallow,
            ModeLabel::Deep1 | ModeLabel::Deep2 => DepthClass::Deep,
        }
    }

    pub fn is_upper_side(self) -> bool {
        matches!(self, ModeLabel::Shallow2 | ModeLabel::Deep2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModeLabel::Shallow1 => "shallow1",
            ModeLabel::Shallow2 => "shallow2",
            ModeLabel::Deep1 => "deep1",
            ModeLabel::Deep2 => "deep2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        ModeLabel::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl std::fmt::Display for ModeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub kernel: String,
    pub bandwidth_rule: String,
    pub kde: KdeOptions,
    pub n_shallow: usize,
    pub n_deep: usize,
    pub crossing_found: bool,
    pub projection_centre: String,
}

/// A fitted classifier. Serialized as the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionModel {
    pub mean_shallow: [f64; 4],
    pub mean_deep: [f64; 4],
    pub direction: [f64; 4],
    pub threshold: f64,
    pub bandwidth_shallow: f64,
    pub bandwidth_deep: f64,
    pub fit_metadata: FitMetadata,
}

/// A fitted model plus the densities behind it (for plotting).
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub model: ProjectionModel,
    pub density_shallow: DensityEstimate,
    pub density_deep: DensityEstimate,
}

pub fn fit_model(
    shallow: &[FeatureVector],
    deep: &[FeatureVector],
    opts: &KdeOptions,
) -> Result<ModelFit, ClassifierError> {
    let projection = fit_projection(shallow, deep)?;
    let ps: Vec<f64> = shallow.iter().map(|f| projection.project(f)).collect();
    let pd: Vec<f64> = deep.iter().map(|f| projection.project(f)).collect();
    let density_shallow = fit_kde_with(&ps, opts)?;
    let density_deep = fit_kde_with(&pd, opts)?;
    let threshold = find_threshold(&density_shallow, &density_deep);
    let model = ProjectionModel {
        mean_shallow: projection.mean_shallow,
        mean_deep: projection.mean_deep,
        direction: projection.direction,
        threshold: threshold.value,
        bandwidth_shallow: density_shallow.bandwidth,
        bandwidth_deep: density_deep.bandwidth,
        fit_metadata: FitMetadata {
            kernel: "gaussian".into(),
            bandwidth_rule: format!(
                "unbiased least-squares cross-validation over {} log-spaced candidates in [{}, {}] x normal-reference (1.06 min(sd, IQR/1.34) n^-1/5); pair distances binned into {} bins above {} samples",
                opts.n_candidates, opts.candidate_span.0, opts.candidate_span.1, opts.n_bins, opts.exact_limit
            ),
            kde: *opts,
            n_shallow: shallow.len(),
            n_deep: deep.len(),
            crossing_found: threshold.crossing_found,
            projection_centre: "mean_shallow".into(),
        },
    };
    Ok(ModelFit {
        model,
        density_shallow,
        density_deep,
    })
}

impl ProjectionModel {
    pub fn projection(&self) -> Projection {
        Projection {
            mean_shallow: self.mean_shallow,
            mean_deep: self.mean_deep,
            direction: self.direction,
        }
    }

    pub fn project(&self, feature: &FeatureVector) -> f64 {
        self.projection().project(feature)
    }

    /// Projection at or above the threshold goes to side 2.
    pub fn classify(&self, feature: &FeatureVector, depth: DepthClass) -> ModeLabel {
        classify_projection(self.project(feature), self.threshold, depth)
    }
}

pub fn classify_projection(projection: f64, threshold: f64, depth: DepthClass) -> ModeLabel {
    ModeLabel::new(depth, projection >= threshold)
}

/// Actual depth × predicted side. Side 2 reads as "predicted deep" unless
/// that would leave deep events majority-wrong, in which case the mapping
/// flips.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionTable {
    /// [[shallow→pred shallow, shallow→pred deep], [deep→pred shallow, deep→pred deep]]
    pub counts: [[u64; 2]; 2],
    pub upper_side_is_deep: bool,
}

pub fn confusion_table(labels: &[ModeLabel]) -> ConfusionTable {
    let count = |l: ModeLabel| labels.iter().filter(|&&x| x == l).count() as u64;
    let (s1, s2, d1, d2) = (
        count(ModeLabel::Shallow1),
        count(ModeLabel::Shallow2),
        count(ModeLabel::Deep1),
        count(ModeLabel::Deep2),
    );
    let upper_side_is_deep = d2 >= d1;
    let counts = if upper_side_is_deep {
        [[s1, s2], [d1, d2]]
    } else {
        [[s2, s1], [d2, d1]]
    };
    ConfusionTable {
        counts,
        upper_side_is_deep,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn fv(a: [f64; 4]) -> FeatureVector {
        FeatureVector::from_array(a)
    }

    fn normals(n: usize, mean: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mean, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn symmetric_difference_direction() {
        let p = fit_projection(&[fv([10., 20., 30., 40.])], &[fv([20., 30., 40., 50.])]).unwrap();
        for d in p.direction {
            assert!((d - 0.5).abs() < 1e-15);
        }
        assert_eq!(p.project(&fv([10., 20., 30., 40.])), 0.0);
        assert!((p.project(&fv([20., 30., 40., 50.])) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn identical_means_have_no_direction() {
        let f = fv([1., 2., 3., 4.]);
        assert_eq!(fit_projection(&[f], &[f]), Err(ClassifierError::EmptyDirection));
        assert_eq!(
            fit_projection(&[], &[f]),
            Err(ClassifierError::EmptyClass(DepthClass::Shallow))
        );
        assert_eq!(
            fit_projection(&[f], &[]),
            Err(ClassifierError::EmptyClass(DepthClass::Deep))
        );
    }

    #[test]
    fn projection_is_linear() {
        let p = fit_projection(&[fv([1., 7., 3., 9.])], &[fv([4., -2., 8., 1.])]).unwrap();
        let (a, b) = (fv([3., 1., 4., 1.]), fv([5., 9., 2., 6.]));
        let ms = p.mean_shallow;
        let sum = fv(std::array::from_fn(|i| a.to_array()[i] + b.to_array()[i] - ms[i]));
        assert!((p.project(&sum) - (p.project(&a) + p.project(&b))).abs() < 1e-12);
    }

    #[test]
    fn standard_normal_density_at_zero() {
        let d = fit_kde(&normals(1000, 0.0, 7), 512).unwrap();
        assert!((d.eval(0.0) - 0.398_942).abs() < 0.05, "{}", d.eval(0.0));
        assert!((d.integral() - 1.0).abs() < 1e-3);
        assert!(d.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn degenerate_samples_are_rejected() {
        assert_eq!(fit_kde(&[2.0; 50], 512), Err(ClassifierError::ZeroVariance));
        assert!(matches!(
            fit_kde(&[1.0, 2.0, 3.0], 512),
            Err(ClassifierError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn lscv_bandwidth_is_near_reference_for_gaussian_data() {
        let x = normals(500, 0.0, 3);
        let h = lscv_bandwidth(&x, &KdeOptions::default()).unwrap();
        let r = normal_reference_bandwidth(&x).unwrap();
        assert!(h > 0.3 * r && h < 3.0 * r, "h={h} ref={r}");
    }

    #[test]
    fn binned_score_tracks_exact_score() {
        let x = normals(1500, 0.0, 11);
        let binned = KdeOptions {
            exact_limit: 0,
            ..KdeOptions::default()
        };
        let exact = KdeOptions {
            exact_limit: usize::MAX,
            ..KdeOptions::default()
        };
        let hb = lscv_bandwidth(&x, &binned).unwrap();
        let he = lscv_bandwidth(&x, &exact).unwrap();
        let cands = bandwidth_candidates(normal_reference_bandwidth(&x).unwrap(), &exact);
        let pos = |h: f64| cands.iter().position(|&c| c == h).unwrap() as i64;
        assert!((pos(hb) - pos(he)).abs() <= 1, "binned {hb} exact {he}");
        // Brute-force score from the definition at the chosen bandwidth.
        let h = he;
        let n = x.len() as f64;
        let mut int_f2 = 0.0;
        let mut loo = 0.0;
        for i in 0..x.len() {
            for j in 0..x.len() {
                let d = (x[i] - x[j]) / h;
                int_f2 += (-d * d / 4.0).exp() / (2.0 * PI.sqrt());
                if i != j {
                    loo += (-d * d / 2.0).exp() / (2.0 * PI).sqrt();
                }
            }
        }
        let brute = int_f2 / (n * n * h) - 2.0 * loo / (n * (n - 1.0) * h);
        assert!((brute - ucv_exact(&x, h)).abs() < 1e-12 * brute.abs().max(1.0));
    }

    #[test]
    fn threshold_between_unit_gaussians() {
        let a = fit_kde(&normals(5000, 0.0, 1), 512).unwrap();
        let b = fit_kde(&normals(5000, 2.0, 2), 512).unwrap();
        let t = find_threshold(&a, &b);
        assert!(t.crossing_found);
        assert!((t.value - 1.0).abs() < 0.05, "{}", t.value);
    }

    #[test]
    fn identical_densities_fall_back_to_midpoint() {
        let a = fit_kde(&normals(200, 0.0, 1), 256).unwrap();
        let t = find_threshold(&a, &a);
        assert!(!t.crossing_found);
        assert!((t.value - a.mean()).abs() < 1e-9);
    }

    #[test]
    fn disjoint_supports_cross_in_the_gap() {
        let left: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let right: Vec<f64> = (0..50).map(|i| 10.0 + i as f64 / 49.0).collect();
        let a = fit_kde(&left, 512).unwrap();
        let b = fit_kde(&right, 512).unwrap();
        let t = find_threshold(&a, &b);
        assert!(t.crossing_found);
        assert!(t.value > 1.0 && t.value < 10.0, "{}", t.value);
    }

    #[test]
    fn boundary_goes_to_side_two() {
        let t = 1.5;
        let eps = 1e-9;
        assert_eq!(classify_projection(t - eps, t, DepthClass::Shallow), ModeLabel::Shallow1);
        assert_eq!(classify_projection(t, t, DepthClass::Shallow), ModeLabel::Shallow2);
        assert_eq!(classify_projection(t + eps, t, DepthClass::Deep), ModeLabel::Deep2);
        assert_eq!(classify_projection(t - eps, t, DepthClass::Deep), ModeLabel::Deep1);
    }

    #[test]
    fn confusion_counts() {
        let all = vec![ModeLabel::Shallow1; 7];
        assert_eq!(confusion_table(&all).counts, [[7, 0], [0, 0]]);
        let mixed = [
            ModeLabel::Shallow1,
            ModeLabel::Shallow2,
            ModeLabel::Shallow2,
            ModeLabel::Deep1,
            ModeLabel::Deep1,
            ModeLabel::Deep1,
            ModeLabel::Deep2,
        ];
        // Deep events sit mostly on side 1, so side 1 reads as "predicted deep".
        let t = confusion_table(&mixed);
        assert!(!t.upper_side_is_deep);
        assert_eq!(t.counts, [[2, 1], [1, 3]]);
    }

    #[test]
    fn well_separated_classes_are_mostly_correct() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut gen = |centre: f64, n: usize| -> Vec<FeatureVector> {
            (0..n)
                .map(|_| fv(std::array::from_fn(|_| centre + noise.sample(&mut rng))))
                .collect()
        };
        // Means 4σ apart along the projection direction (2 per coordinate).
        let shallow = gen(0.0, 2000);
        let deep = gen(2.0, 2000);
        let fit = fit_model(&shallow, &deep, &KdeOptions::default()).unwrap();
        let mut labels: Vec<ModeLabel> =
            shallow.iter().map(|f| fit.model.classify(f, DepthClass::Shallow)).collect();
        labels.extend(deep.iter().map(|f| fit.model.classify(f, DepthClass::Deep)));
        let t = confusion_table(&labels);
        assert!(t.upper_side_is_deep);
        assert!(t.counts[0][1] < 100 && t.counts[1][0] < 100, "{:?}", t.counts);
        assert_eq!(t.counts.iter().flatten().sum::<u64>(), 4000);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn density_integrates_to_one(
            xs in prop::collection::vec(-50.0f64..50.0, 10..200),
            grid in 16usize..600,
        ) {
            prop_assume!(xs.iter().any(|&x| x != xs[0]));
            let d = fit_kde(&xs, grid).unwrap();
            prop_assert!((d.integral() - 1.0).abs() < 1e-3);
            prop_assert!(d.values.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn labels_invariant_under_power_of_two_rescaling(seed in 0u64..1000, k in -3i32..4) {
            let c = 2f64.powi(k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, 10.0).unwrap();
            let mut gen = |centre: f64, n: usize| -> Vec<FeatureVector> {
                (0..n).map(|_| fv(std::array::from_fn(|_| centre + noise.sample(&mut rng)))).collect()
            };
            let shallow = gen(100.0, 150);
            let deep = gen(120.0, 60);
            let scale = |v: &[FeatureVector]| -> Vec<FeatureVector> {
                v.iter().map(|f| fv(f.to_array().map(|x| x * c))).collect()
            };
            let opts = KdeOptions::default();
            let a = fit_model(&shallow, &deep, &opts).unwrap().model;
            let (ss, sd) = (scale(&shallow), scale(&deep));
            let b = fit_model(&ss, &sd, &opts).unwrap().model;
            for (f, g) in shallow.iter().zip(&ss) {
                prop_assert_eq!(a.classify(f, DepthClass::Shallow), b.classify(g, DepthClass::Shallow));
            }
            for (f, g) in deep.iter().zip(&sd) {
                prop_assert_eq!(a.classify(f, DepthClass::Deep), b.classify(g, DepthClass::Deep));
            }
        }

        #[test]
        fn threshold_lies_between_class_means(seed in 0u64..500, gap in 1.0f64..6.0) {
            let a = fit_kde(&normals(400, 0.0, seed), 256).unwrap();
            let b = fit_kde(&normals(400, gap, seed + 1), 256).unwrap();
            let t = find_threshold(&a, &b);
            let (ma, mb) = (a.mean(), b.mean());
            let between = density_crossings(&a, &b).iter().any(|&x| x > ma && x < mb);
            if between {
                prop_assert!(t.value > ma && t.value < mb);
            }
        }
    }
}
