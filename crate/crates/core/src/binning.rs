//! Spatial tiling and time binning.
//!
//! Regions are 15°×15° squares given by their south-west anchor; each is cut
//! into a 3×3 block of 5° sub-cells numbered row-major from the south-west
//! corner. Cells and periods are half-open. Each calendar year is split into
//! `periods_per_year` slots of equal duration (to the second), so a period
//! never straddles a year boundary.

use std::path::Path;

use chrono::{DateTime, Datelike, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::classifier::ModeLabel;

pub const REGION_SIZE_DEG: f64 = 15.0;
pub const CELL_SIZE_DEG: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BinningError {
    #[error("regions {0} and {1} overlap")]
    OverlappingRegions(u32, u32),
    #[error("region {0} has an invalid anchor")]
    InvalidAnchor(u32),
    #[error("duplicate region id {0}")]
    DuplicateRegion(u32),
    #[error("time {time} outside {start}-{end}")]
    OutOfRange { time: DateTime<Utc>, start: i32, end: i32 },
    #[error("periods per year must be at least 1")]
    InvalidPeriods,
    #[error("region config: {0}")]
    Config(String),
}

/// South-west corner of a 15° region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnchor {
    pub id: u32,
    #[serde(default)]
    pub name: String,
    pub lat_min: f64,
    pub lon_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialCell {
    pub region_id: u32,
    pub sub_index: u8,
    pub lat_min: f64,
    pub lat_max: f64,
    /// In [-180, 180); `lon_max = lon_min + 5` may reach 180.
    pub lon_min: f64,
    pub lon_max: f64,
}

impl SpatialCell {
    pub fn contains(&self, lat: f64, lon: f64) -> bool {
        lat >= self.lat_min
            && lat < self.lat_max
            && (lon - self.lon_min).rem_euclid(360.0) < CELL_SIZE_DEG
    }

    pub fn key(&self) -> CellKey {
        CellKey {
            region_id: self.region_id,
            sub_index: self.sub_index,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub region_id: u32,
    pub sub_index: u8,
}

fn wrap_lon(lon: f64) -> f64 {
    crate::catalog::normalize_longitude(lon)
}

fn regions_overlap(a: &RegionAnchor, b: &RegionAnchor) -> bool {
    let lat = (a.lat_min - b.lat_min).abs() < REGION_SIZE_DEG;
    let d = (b.lon_min - a.lon_min).rem_euclid(360.0);
    let lon = !(REGION_SIZE_DEG..=360.0 - REGION_SIZE_DEG).contains(&d);
    lat && lon
}

/// Nine sub-cells per region, south→north then west→east.
pub fn make_grid(regions: &[RegionAnchor]) -> Result<Vec<SpatialCell>, BinningError> {
    for (i, a) in regions.iter().enumerate() {
        if !(a.lat_min.is_finite() && a.lon_min.is_finite())
            || a.lat_min < -90.0
            || a.lat_min + REGION_SIZE_DEG > 90.0
        {
            return Err(BinningError::InvalidAnchor(a.id));
        }
        for b in &regions[..i] {
            if a.id == b.id {
                return Err(BinningError::DuplicateRegion(a.id));
            }
            if regions_overlap(a, b) {
                return Err(BinningError::OverlappingRegions(b.id, a.id));
            }
        }
    }
    let mut cells = Vec::with_capacity(regions.len() * 9);
    for r in regions {
        for row in 0..3u8 {
            for col in 0..3u8 {
                let lat_min = r.lat_min + CELL_SIZE_DEG * row as f64;
                let lon_min = wrap_lon(r.lon_min + CELL_SIZE_DEG * col as f64);
                cells.push(SpatialCell {
                    region_id: r.id,
                    sub_index: row * 3 + col,
                    lat_min,
                    lat_max: lat_min + CELL_SIZE_DEG,
                    lon_min,
                    lon_max: lon_min + CELL_SIZE_DEG,
                });
            }
        }
    }
    Ok(cells)
}

/// Index into `grid` of the cell containing the point.
pub fn assign_cell(lat: f64, lon: f64, grid: &[SpatialCell]) -> Option<usize> {
    grid.iter().position(|c| c.contains(lat, lon))
}

/// Reconstructed circum-Pacific preset: eleven 15° regions over the major
/// subduction margins. The placement is a reconstruction, not a published
/// tiling.
pub fn ring_of_fire_preset() -> Vec<RegionAnchor> {
    let r = |id, name: &str, lat_min, lon_min| RegionAnchor {
        id,
        name: name.to_string(),
        lat_min,
        lon_min,
    };
    vec![
        r(1, "Aleutians", 45.0, -180.0),
        r(2, "Alaska", 50.0, -165.0),
        r(3, "Kuriles-Japan", 30.0, 135.0),
        r(4, "Marianas", 10.0, 138.0),
        r(5, "Philippines", 0.0, 120.0),
        r(6, "Indonesia", -15.0, 105.0),
        r(7, "Solomon-Vanuatu", -20.0, 153.0),
        r(8, "Tonga-Kermadec", -35.0, -180.0),
        r(9, "New Zealand", -50.0, 165.0),
        r(10, "Mexico-Central America", 5.0, -105.0),
        r(11, "Peru-Chile", -30.0, -80.0),
    ]
}

#[derive(Debug, Deserialize)]
struct RegionFile {
    regions: Vec<RegionAnchor>,
}

/// Resolves a preset name (`ring-of-fire`) or a TOML/JSON file with a
/// `regions` array of `{id, name, lat_min, lon_min}`.
pub fn load_regions(spec: &str) -> Result<Vec<RegionAnchor>, BinningError> {
    if spec == "ring-of-fire" || spec == "default" {
        return Ok(ring_of_fire_preset());
    }
    let path = Path::new(spec);
    let text = std::fs::read_to_string(path)
        .map_err(|e| BinningError::Config(format!("{spec}: {e}")))?;
    let parsed: RegionFile = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| BinningError::Config(e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| BinningError::Config(e.to_string()))?
    };
    Ok(parsed.regions)
}

/// Inclusive range of calendar years.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start_year: i32,
    pub end_year: i32,
}

impl Default for Span {
    fn default() -> Self {
        Self {
            start_year: 1977,
            end_year: 2010,
        }
    }
}

impl Span {
    pub fn years(&self) -> usize {
        (self.end_year - self.start_year + 1).max(0) as usize
    }

    pub fn n_periods(&self, periods_per_year: u32) -> usize {
        self.years() * periods_per_year as usize
    }

    pub fn start(&self) -> DateTime<Utc> {
        year_start(self.start_year)
    }

    /// Exclusive end: January 1 of the year after `end_year`.
    pub fn end(&self) -> DateTime<Utc> {
        year_start(self.end_year + 1)
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        t >= self.start() && t < self.end()
    }
}

impl std::str::FromStr for Span {
    type Err = String;

    /// `1977:2010`
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| format!("expected START:END, got {s:?}"))?;
        let span = Span {
            start_year: a.trim().parse().map_err(|_| format!("bad year {a:?}"))?,
            end_year: b.trim().parse().map_err(|_| format!("bad year {b:?}"))?,
        };
        if span.end_year < span.start_year {
            return Err(format!("empty span {s:?}"));
        }
        Ok(span)
    }
}

impl std::fmt::Display for Span {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.start_year, self.end_year)
    }
}

fn year_start(year: i32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(year, 1, 1, 0, 0, 0)
        .single()
        .expect("January 1 exists")
}

fn year_seconds(year: i32) -> i64 {
    (year_start(year + 1) - year_start(year)).num_seconds()
}

/// Period index of `t`: (year − start) × periods_per_year + slot, where the
/// slot is ⌊elapsed_seconds × periods_per_year / year_seconds⌋.
pub fn time_bin(t: DateTime<Utc>, periods_per_year: u32, span: Span) -> Result<usize, BinningError> {
    if periods_per_year == 0 {
        return Err(BinningError::InvalidPeriods);
    }
    let year = t.year();
    if year < span.start_year || year > span.end_year {
        return Err(BinningError::OutOfRange {
            time: t,
            start: span.start_year,
            end: span.end_year,
        });
    }
    let elapsed = (t - year_start(year)).num_seconds();
    let slot = (elapsed as i128 * periods_per_year as i128 / year_seconds(year) as i128) as usize;
    Ok((year - span.start_year) as usize * periods_per_year as usize + slot)
}

/// First second belonging to period `index` (inverse of [`time_bin`]).
pub fn period_start(index: usize, periods_per_year: u32, span: Span) -> DateTime<Utc> {
    let ppy = periods_per_year as usize;
    let year = span.start_year + (index / ppy) as i32;
    let slot = (index % ppy) as i64;
    let secs = year_seconds(year);
    // Smallest s with s·ppy ≥ slot·secs.
    let offset = (slot * secs + ppy as i64 - 1) / ppy as i64;
    year_start(year) + chrono::Duration::seconds(offset)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SeriesMode {
    Shallow1,
    Shallow2,
    /// Any shallow event, regardless of mode.
    Pooled,
}

impl SeriesMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SeriesMode::Shallow1 => "shallow1",
            SeriesMode::Shallow2 => "shallow2",
            SeriesMode::Pooled => "pooled",
        }
    }

    pub fn accepts(self, label: ModeLabel) -> bool {
        match self {
            SeriesMode::Shallow1 => label == ModeLabel::Shallow1,
            SeriesMode::Shallow2 => label == ModeLabel::Shallow2,
            SeriesMode::Pooled => label.depth_class() == crate::catalog::DepthClass::Shallow,
        }
    }
}

/// Binary occupancy of one cell and mode over equal periods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresenceSeries {
    pub cell: SpatialCell,
    pub mode: SeriesMode,
    pub periods_per_year: u32,
    pub span: Span,
    pub bits: Vec<bool>,
}

impl PresenceSeries {
    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Bit i is set iff at least one event time falls in period i.
pub fn build_presence<I>(
    times: I,
    cell: SpatialCell,
    mode: SeriesMode,
    periods_per_year: u32,
    span: Span,
) -> Result<PresenceSeries, BinningError>
where
    I: IntoIterator<Item = DateTime<Utc>>,
{
    let mut bits = vec![false; span.n_periods(periods_per_year)];
    for t in times {
        bits[time_bin(t, periods_per_year, span)?] = true;
    }
    Ok(PresenceSeries {
        cell,
        mode,
        periods_per_year,
        span,
        bits,
    })
}

/// Minimum count of each shallow mode is strictly more than this.
pub const ELIGIBILITY_MIN_EXCLUSIVE: usize = 5;

/// Per-cell (Shallow1, Shallow2) counts, indexed like `grid`.
pub fn shallow_mode_counts(grid: &[SpatialCell], events: &[(f64, f64, ModeLabel)]) -> Vec<(usize, usize)> {
    let mut counts = vec![(0, 0); grid.len()];
    for &(lat, lon, label) in events {
        if let Some(i) = assign_cell(lat, lon, grid) {
            match label {
                ModeLabel::Shallow1 => counts[i].0 += 1,
                ModeLabel::Shallow2 => counts[i].1 += 1,
                _ => {}
            }
        }
    }
    counts
}

/// Cells holding more than five events of each shallow mode, in grid order.
pub fn eligible_cells(grid: &[SpatialCell], events: &[(f64, f64, ModeLabel)]) -> Vec<SpatialCell> {
    shallow_mode_counts(grid, events)
        .into_iter()
        .zip(grid)
        .filter(|((a, b), _)| *a > ELIGIBILITY_MIN_EXCLUSIVE && *b > ELIGIBILITY_MIN_EXCLUSIVE)
        .map(|(_, c)| *c)
        .collect()
}
