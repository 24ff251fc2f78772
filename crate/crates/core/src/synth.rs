//! Synthetic generators and exact oracles.

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::assoc::{contingency, lagged_pair, AssocError, Comparison, ContingencyTable};
use crate::binning::{make_grid, period_start, BinningError, RegionAnchor, Span};
use crate::catalog::{moment_magnitude, scalar_moment_from_magnitude, MomentTensorRecord};
use crate::tensor::{azimuth_plunge_to_vector, MomentTensor};

/// Coupled two-mode Bernoulli chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarkovPairSpec {
    pub length: usize,
    pub base_rate: f64,
    pub self_excite: f64,
    pub cross_inhibit: f64,
    pub seed: u64,
}

pub const PROBABILITY_FLOOR: f64 = 0.01;
pub const PROBABILITY_CEILING: f64 = 0.99;

/// P(vₖ[t] = 1) = clip(base + self·vₖ[t−1] − cross·v_other[t−1]); period 0
/// uses the base rate.
pub fn gen_markov_pair(spec: &MarkovPairSpec) -> (Vec<bool>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    markov_pair_from(&mut rng, spec)
}

fn markov_pair_from<R: Rng>(rng: &mut R, spec: &MarkovPairSpec) -> (Vec<bool>, Vec<bool>) {
    let mut v1 = Vec::with_capacity(spec.length);
    let mut v2 = Vec::with_capacity(spec.length);
    let (mut prev1, mut prev2) = (false, false);
    for _ in 0..spec.length {
        let p = |own: bool, other: bool| {
            let boost = if own { spec.self_excite } else { 0.0 };
            let damp = if other { spec.cross_inhibit } else { 0.0 };
            (spec.base_rate + boost - damp).clamp(PROBABILITY_FLOOR, PROBABILITY_CEILING)
        };
        let (p1, p2) = (p(prev1, prev2), p(prev2, prev1));
        let b1 = rng.random::<f64>() < p1;
        let b2 = rng.random::<f64>() < p2;
        v1.push(b1);
        v2.push(b2);
        (prev1, prev2) = (b1, b2);
    }
    (v1, v2)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("series of length {0} too long for exact enumeration (max {MAX_EXACT_LENGTH})")]
    TooLongForExact(usize),
    #[error(transparent)]
    Assoc(#[from] AssocError),
}

pub const MAX_EXACT_LENGTH: usize = 7;

/// Every distinct arrangement of `v`'s ones over its positions.
fn arrangements(v: &[bool]) -> Vec<Vec<bool>> {
    let n = v.len();
    let k = v.iter().filter(|&&b| b).count() as u32;
    (0u32..1 << n)
        .filter(|m| m.count_ones() == k)
        .map(|m| (0..n).map(|i| m >> i & 1 == 1).collect())
        .collect()
}

/// Chi-square as the ratio N(ad − bc)² : r1·r0·c1·c0, or None
/// when a margin is zero.
fn chi_ratio(t: &ContingencyTable) -> Option<(i128, i128)> {
    let (a, b, c, d) = (t.n11 as i128, t.n10 as i128, t.n01 as i128, t.n00 as i128);
    let den = (a + b) * (c + d) * (a + c) * (b + d);
    if den == 0 {
        return None;
    }
    let delta = a * d - b * c;
    Some(((a + b + c + d) * delta * delta, den))
}

fn chi_at_least(t: &ContingencyTable, observed: &ContingencyTable) -> bool {
    match (chi_ratio(t), chi_ratio(observed)) {
        (_, None) => true,
        (None, Some((n2, _))) => n2 == 0,
        (Some((n1, d1)), Some((n2, d2))) => n1 * d2 >= n2 * d1,
    }
}

fn table_for(v1: &[bool], v2: &[bool], lag: usize, comparison: Comparison) -> Result<ContingencyTable, AssocError> {
    match comparison {
        Comparison::Pooled => {
            let head = v1.len() - lag;
            contingency(&v1[..head], &v1[lag..])
        }
        _ => Ok(lagged_pair(v1, v2, lag)?.table(comparison)),
    }
}

/// Tables from every (v1, v2) arrangement pair, one entry per pair. Each
/// distinct arrangement stands for the same number of orderings, so the
/// entries are equally likely under independent shuffling. For `Pooled` only
/// `v1 | v2` is rearranged.
pub fn exact_null_tables(
    v1: &[bool],
    v2: &[bool],
    lag: usize,
    comparison: Comparison,
) -> Result<Vec<ContingencyTable>, OracleError> {
    let n = v1.len();
    if v2.len() != n {
        return Err(AssocError::LengthMismatch(n, v2.len()).into());
    }
    if n > MAX_EXACT_LENGTH {
        return Err(OracleError::TooLongForExact(n));
    }
    lagged_pair(v1, v2, lag)?;
    if comparison == Comparison::Pooled {
        let any: Vec<bool> = v1.iter().zip(v2).map(|(a, b)| *a || *b).collect();
        return arrangements(&any)
            .iter()
            .map(|p| table_for(p, p, lag, comparison).map_err(Into::into))
            .collect();
    }
    let (a1, a2) = (arrangements(v1), arrangements(v2));
    let mut tables = Vec::with_capacity(a1.len() * a2.len());
    for p1 in &a1 {
        for p2 in &a2 {
            tables.push(table_for(p1, p2, lag, comparison)?);
        }
    }
    Ok(tables)
}

/// Exact permutation p-value: the share of equally likely arrangement pairs
/// whose chi-square is at least the observed one.
pub fn exact_permutation_p(v1: &[bool], v2: &[bool], lag: usize, comparison: Comparison) -> Result<f64, OracleError> {
    let null = exact_null_tables(v1, v2, lag, comparison)?;
    let observed = if comparison == Comparison::Pooled {
        let any: Vec<bool> = v1.iter().zip(v2).map(|(a, b)| *a || *b).collect();
        table_for(&any, &any, lag, comparison)?
    } else {
        table_for(v1, v2, lag, comparison)?
    };
    let hits = null.iter().filter(|t| chi_at_least(t, &observed)).count();
    Ok(hits as f64 / null.len() as f64)
}

/// Synthetic catalog with two shallow failure orientations whose timing
/// follows a coupled Markov chain per cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthCatalogSpec {
    pub regions: Vec<RegionAnchor>,
    pub span: Span,
    /// Resolution at which the chain runs.
    pub periods_per_year: u32,
    pub base_rate: f64,
    pub self_excite: f64,
    pub cross_inhibit: f64,
    /// Probability of a deep event per cell and period.
    pub deep_rate: f64,
    /// Share of deep events with the second orientation.
    pub deep_mode2_share: f64,
    pub seed: u64,
}

impl Default for SynthCatalogSpec {
    fn default() -> Self {
        Self {
            regions: vec![RegionAnchor {
                id: 1,
                name: "synthetic".into(),
                lat_min: -15.0,
                lon_min: 150.0,
            }],
            span: Span::default(),
            periods_per_year: 26,
            base_rate: 0.2,
            self_excite: 0.4,
            cross_inhibit: 0.4,
            deep_rate: 0.05,
            deep_mode2_share: 0.85,
            seed: 1,
        }
    }
}

/// Mean rotation about the vertical for each orientation, degrees.
const MODE_ROTATION: [f64; 2] = [40.0, 130.0];
const ROTATION_SD: f64 = 8.0;
/// Eigenvalues per unit scale; trace zero.
const EIGEN_SHAPE: [f64; 3] = [1.0, 0.05, -1.05];
/// Keeps events clear of cell edges after the catalog's 2-decimal rounding.
const EDGE_MARGIN_DEG: f64 = 0.05;

fn add(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

fn scale(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Tensor with T at plunge 60 and P at plunge 30, rotated by `rotation`
/// about the vertical and by `tilt` about P.
fn oriented_tensor(rotation: f64, tilt: f64, m0: f64) -> MomentTensor {
    let t0 = azimuth_plunge_to_vector(180.0 + rotation, 60.0);
    let n0 = azimuth_plunge_to_vector(90.0 + rotation, 0.0);
    let p = azimuth_plunge_to_vector(rotation, 30.0);
    let (c, s) = (tilt.to_radians().cos(), tilt.to_radians().sin());
    let t = add(scale(t0, c), n0, -s);
    let n = add(scale(n0, c), t0, s);
    let unit = m0 / ((EIGEN_SHAPE[0] - EIGEN_SHAPE[2]) / 2.0);
    MomentTensor::from_eigen(EIGEN_SHAPE.map(|l| l * unit), [t, n, p])
}

fn synth_record<R: Rng>(
    rng: &mut R,
    id: usize,
    time: DateTime<Utc>,
    lat: f64,
    lon: f64,
    depth: f64,
    mode: usize,
) -> MomentTensorRecord {
    let rotation = Normal::new(MODE_ROTATION[mode], ROTATION_SD)
        .unwrap()
        .sample(rng)
        .clamp(MODE_ROTATION[mode] - 40.0, MODE_ROTATION[mode] + 40.0);
    let tilt = rng.random_range(3.0..8.0);
    let mw = rng.random_range(4.5..6.5);
    let m0 = scalar_moment_from_magnitude(mw);
    let tensor = oriented_tensor(rotation, tilt, m0);
    let max = tensor.components().iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let exponent = max.log10().floor() as i32;
    // Rounded as the catalog stores it, so written and parsed records agree.
    let m0 = (m0 / 10f64.powi(exponent) * 1000.0).round() / 1000.0 * 10f64.powi(exponent);
    MomentTensorRecord {
        event_id: format!("S{id:013}A"),
        origin_time: time,
        latitude: lat,
        longitude: lon,
        depth_km: depth,
        scalar_moment: m0,
        magnitude: moment_magnitude(m0),
        tensor,
        catalog_axes: None,
        source: "SYN".into(),
        region: "SYNTHETIC".into(),
        body_wave_magnitude: 0.0,
        surface_wave_magnitude: 0.0,
        exponent,
    }
}

fn random_time<R: Rng>(rng: &mut R, period: usize, ppy: u32, span: Span) -> DateTime<Utc> {
    let start = period_start(period, ppy, span);
    let end = period_start(period + 1, ppy, span);
    let secs = (end - start).num_seconds();
    start + Duration::seconds(rng.random_range(0..secs))
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Shallow events follow one Markov pair per cell (one event per set bit);
/// deep events arrive independently. Returned in time order.
pub fn synthetic_catalog(spec: &SynthCatalogSpec) -> Result<Vec<MomentTensorRecord>, BinningError> {
    let grid = make_grid(&spec.regions)?;
    let n = spec.span.n_periods(spec.periods_per_year);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::new();
    for cell in &grid {
        let (v1, v2) = markov_pair_from(
            &mut rng,
            &MarkovPairSpec {
                length: n,
                base_rate: spec.base_rate,
                self_excite: spec.self_excite,
                cross_inhibit: spec.cross_inhibit,
                seed: 0,
            },
        );
        for t in 0..n {
            let deep = rng.random::<f64>() < spec.deep_rate;
            let draws = [(v1[t], Some(0)), (v2[t], Some(1)), (deep, None)];
            for (present, mode) in draws {
                if !present {
                    continue;
                }
                let time = random_time(&mut rng, t, spec.periods_per_year, spec.span);
                let lat = round2(rng.random_range(cell.lat_min + EDGE_MARGIN_DEG..cell.lat_max - EDGE_MARGIN_DEG));
                let lon = round2(rng.random_range(cell.lon_min + EDGE_MARGIN_DEG..cell.lon_max - EDGE_MARGIN_DEG));
                let lon = crate::catalog::normalize_longitude(lon);
                let (depth, mode) = match mode {
                    Some(m) => (round1(rng.random_range(10.0..190.0)), m),
                    None => {
                        let m = usize::from(rng.random::<f64>() < spec.deep_mode2_share);
                        (round1(rng.random_range(250.0..650.0)), m)
                    }
                };
                let id = records.len();
                records.push(synth_record(&mut rng, id, time, lat, lon, depth, mode));
            }
        }
    }
    records.sort_by(|a, b| a.origin_time.cmp(&b.origin_time).then_with(|| a.event_id.cmp(&b.event_id)));
    Ok(records)
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}
