//! Global CMT catalog ingestion.
//!
//! NDK files hold five 80-column lines per event:
//!
//! 1. hypocenter reference: catalog, date, time, lat, lon, depth, mb, MS, region
//! 2. CMT event name and inversion metadata
//! 3. centroid solution
//! 4. tensor exponent followed by six (value, sigma) pairs
//! 5. version, three principal axes (eigenvalue, plunge, azimuth), scalar
//!    moment, nodal planes
//!
//! Location, depth and time come from line 1 (the centroid depth is used
//! only when the hypocenter depth is not positive). Moment magnitude is
//! derived from the scalar moment.

use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::tensor::{symmetric_eig3, Axis, MomentTensor};

pub const DEFAULT_DEPTH_SPLIT_KM: f64 = 200.0;
pub const DEFAULT_MIN_MAGNITUDE: f64 = 3.05;

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error("malformed NDK block at line {line}: {reason}")]
    MalformedBlock { line: usize, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Strict mode aborts on the first malformed block; lenient mode skips it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParseMode {
    Strict,
    #[default]
    Lenient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DepthClass {
    Shallow,
    Deep,
}

impl DepthClass {
    /// Deep is strictly below the split; a depth equal to the split is Shallow.
    pub fn from_depth(depth_km: f64, split_km: f64) -> Self {
        if depth_km > split_km {
            DepthClass::Deep
        } else {
            DepthClass::Shallow
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            DepthClass::Shallow => "shallow",
            DepthClass::Deep => "deep",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shallow" => Some(DepthClass::Shallow),
            "deep" => Some(DepthClass::Deep),
            _ => None,
        }
    }
}

/// One catalog event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTensorRecord {
    pub event_id: String,
    pub origin_time: DateTime<Utc>,
    pub latitude: f64,
    /// Normalized to [-180, 180).
    pub longitude: f64,
    pub depth_km: f64,
    /// dyne-cm
    pub scalar_moment: f64,
    pub magnitude: f64,
    /// dyne-cm
    pub tensor: MomentTensor,
    /// Catalog principal axes, largest eigenvalue first (dyne-cm, degrees).
    pub catalog_axes: Option<[Axis; 3]>,
    /// Hypocenter reference catalog code (line 1, e.g. "PDE").
    pub source: String,
    pub region: String,
    pub body_wave_magnitude: f64,
    pub surface_wave_magnitude: f64,
    /// Power of ten the catalog applied to the tensor and moment.
    pub exponent: i32,
}

/// Mw = (2/3)(log10 M0 − 16.1), M0 in dyne-cm.
pub fn moment_magnitude(scalar_moment: f64) -> f64 {
    (2.0 / 3.0) * (scalar_moment.log10() - 16.1)
}

pub fn scalar_moment_from_magnitude(mw: f64) -> f64 {
    10f64.powf(1.5 * mw + 16.1)
}

pub fn normalize_longitude(lon: f64) -> f64 {
    if (-180.0..180.0).contains(&lon) {
        return lon;
    }
    let l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if l >= 180.0 {
        l - 360.0
    } else {
        l
    }
}

impl MomentTensorRecord {
    pub fn depth_class(&self, split_km: f64) -> DepthClass {
        DepthClass::from_depth(self.depth_km, split_km)
    }

    /// Checks the record invariants; returns a description of the first
    /// violation.
    pub fn validate(&self) -> Result<(), String> {
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(format!("latitude {} out of range", self.latitude));
        }
        if !(-180.0..180.0).contains(&self.longitude) {
            return Err(format!("longitude {} out of range", self.longitude));
        }
        if !(self.depth_km.is_finite() && self.depth_km > 0.0) {
            return Err(format!("depth {} not positive", self.depth_km));
        }
        if !self.tensor.is_finite() {
            return Err("non-finite tensor component".into());
        }
        if !(self.scalar_moment.is_finite() && self.scalar_moment > 0.0) {
            return Err(format!("scalar moment {} not positive", self.scalar_moment));
        }
        if (moment_magnitude(self.scalar_moment) - self.magnitude).abs() > 0.05 {
            return Err("magnitude inconsistent with scalar moment".into());
        }
        Ok(())
    }
}

/// Records plus the blocks skipped in lenient mode.
#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub records: Vec<MomentTensorRecord>,
    /// (first line of the block, reason)
    pub skipped: Vec<(usize, String)>,
}

fn field(line: &str, start: usize, end: usize) -> &str {
    let end = end.min(line.len());
    if start >= end {
        return "";
    }
    line.get(start..end).unwrap_or("").trim()
}

fn num(line: &str, start: usize, end: usize, what: &str) -> Result<f64, String> {
    let s = field(line, start, end);
    s.parse::<f64>()
        .map_err(|_| format!("cannot parse {what} from {s:?}"))
        .and_then(|v| {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format!("non-finite {what}"))
            }
        })
}

/// A hypocenter line carries a yyyy/mm/dd date in columns 6-15.
fn is_block_start(line: &str) -> bool {
    let b = line.as_bytes();
    if b.len() < 26 {
        return false;
    }
    let d = &b[5..15];
    d[4] == b'/' && d[7] == b'/' && d.iter().enumerate().all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit())
}

fn parse_time(date: &str, time: &str) -> Result<DateTime<Utc>, String> {
    let mut dp = date.split('/');
    let (y, m, d) = match (dp.next(), dp.next(), dp.next()) {
        (Some(y), Some(m), Some(d)) => (y, m, d),
        _ => return Err(format!("bad date {date:?}")),
    };
    let day = NaiveDate::from_ymd_opt(
        y.parse().map_err(|_| format!("bad year {y:?}"))?,
        m.parse().map_err(|_| format!("bad month {m:?}"))?,
        d.parse().map_err(|_| format!("bad day {d:?}"))?,
    )
    .ok_or_else(|| format!("invalid date {date:?}"))?;
    let mut tp = time.split(':');
    let (h, mi, s) = match (tp.next(), tp.next(), tp.next()) {
        (Some(h), Some(mi), Some(s)) => (h, mi, s),
        _ => return Err(format!("bad time {time:?}")),
    };
    let h: i64 = h.trim().parse().map_err(|_| format!("bad hour {h:?}"))?;
    let mi: i64 = mi.trim().parse().map_err(|_| format!("bad minute {mi:?}"))?;
    let s: f64 = s.trim().parse().map_err(|_| format!("bad second {s:?}"))?;
    if !(0..24).contains(&h) || !(0..60).contains(&mi) || !(0.0..61.0).contains(&s) {
        return Err(format!("time out of range {time:?}"));
    }
    // Seconds resolution; "60.0" seconds rolls over as the catalog intends.
    let secs = h * 3600 + mi * 60 + s.trunc() as i64;
    let midnight = Utc.from_utc_datetime(&day.and_hms_opt(0, 0, 0).expect("midnight"));
    Ok(midnight + Duration::seconds(secs))
}

fn parse_block(lines: &[&str]) -> Result<MomentTensorRecord, String> {
    if lines.len() != 5 {
        return Err(format!("expected 5 lines, found {}", lines.len()));
    }
    let l1 = lines[0];
    let source = field(l1, 0, 4).to_string();
    let origin_time = parse_time(field(l1, 5, 15), field(l1, 16, 26))?;
    let latitude = num(l1, 27, 33, "latitude")?;
    let longitude = num(l1, 33, 41, "longitude")?;
    let hypo_depth = num(l1, 41, 47, "depth")?;
    let body_wave_magnitude = num(l1, 47, 51, "mb").unwrap_or(0.0);
    let surface_wave_magnitude = num(l1, 51, 55, "MS").unwrap_or(0.0);
    let region = field(l1, 56, 80).to_string();

    let event_id = field(lines[1], 0, 16).to_string();
    if event_id.is_empty() {
        return Err("missing event name".into());
    }

    // Centroid depth is the 7th number after "CENTROID:".
    let centroid_depth = lines[2]
        .get(9..)
        .and_then(|rest| rest.split_whitespace().nth(6))
        .and_then(|s| s.parse::<f64>().ok());

    let l4 = lines[3];
    let exponent: i32 = field(l4, 0, 2)
        .parse()
        .map_err(|_| format!("bad exponent {:?}", field(l4, 0, 2)))?;
    let scale = 10f64.powi(exponent);
    let mut comps = [0.0; 6];
    for (k, c) in comps.iter_mut().enumerate() {
        let start = 2 + 13 * k;
        *c = num(l4, start, start + 7, "tensor component")? * scale;
    }

    let l5 = lines[4];
    let mut axes = [Axis {
        eigenvalue: 0.0,
        plunge: 0.0,
        azimuth: 0.0,
    }; 3];
    for (k, ax) in axes.iter_mut().enumerate() {
        let s = 3 + 15 * k;
        *ax = Axis {
            eigenvalue: num(l5, s, s + 8, "eigenvalue")? * scale,
            plunge: num(l5, s + 8, s + 11, "plunge")?,
            azimuth: num(l5, s + 11, s + 15, "azimuth")?,
        };
    }
    let scalar_moment = num(l5, 48, 56, "scalar moment")? * scale;

    let depth_km = match centroid_depth {
        Some(d) if hypo_depth <= 0.0 => d,
        _ => hypo_depth,
    };
    let record = MomentTensorRecord {
        event_id,
        origin_time,
        latitude,
        longitude: normalize_longitude(longitude),
        depth_km,
        scalar_moment,
        magnitude: moment_magnitude(scalar_moment),
        tensor: MomentTensor::from_components(comps),
        catalog_axes: Some(axes),
        source,
        region,
        body_wave_magnitude,
        surface_wave_magnitude,
        exponent,
    };
    record.validate()?;
    Ok(record)
}

/// Parses NDK text into records in file order.
pub fn parse_ndk(text: &str, mode: ParseMode) -> Result<ParseOutcome, CatalogError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect();
    let mut outcome = ParseOutcome::default();
    if lines.is_empty() {
        return Ok(outcome);
    }

    // Blocks run from one hypocenter line to the next; lenient parsing
    // resynchronises on the next hypocenter line after a bad block.
    let starts: Vec<usize> = lines
        .iter()
        .enumerate()
        .filter(|(_, (_, l))| is_block_start(l))
        .map(|(i, _)| i)
        .collect();
    let mut spans = Vec::with_capacity(starts.len() + 1);
    if starts.first() != Some(&0) {
        let end = starts.first().copied().unwrap_or(lines.len());
        spans.push((0, end, Some("block does not start with a hypocenter line")));
    }
    for (k, &s) in starts.iter().enumerate() {
        let end = starts.get(k + 1).copied().unwrap_or(lines.len());
        spans.push((s, end, None));
    }

    let parsed = crate::par::map(&spans, |&(s, e, bad)| {
        let first_line = lines[s].0;
        if let Some(reason) = bad {
            return Err((first_line, reason.to_string()));
        }
        let block: Vec<&str> = lines[s..e].iter().map(|(_, l)| *l).collect();
        parse_block(&block).map_err(|r| (first_line, r))
    });
    for p in parsed {
        match p {
            Ok(r) => outcome.records.push(r),
            Err((line, reason)) => match mode {
                ParseMode::Strict => return Err(CatalogError::MalformedBlock { line, reason }),
                ParseMode::Lenient => outcome.skipped.push((line, reason)),
            },
        }
    }
    Ok(outcome)
}

/// Reads an NDK file, transparently decompressing `.gz`.
pub fn read_ndk_file(path: &Path) -> Result<String, CatalogError> {
    let io_err = |source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    };
    let bytes = std::fs::read(path).map_err(io_err)?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut text = String::new();
        flate2::read::MultiGzDecoder::new(&bytes[..])
            .read_to_string(&mut text)
            .map_err(io_err)?;
        Ok(text)
    } else {
        String::from_utf8(bytes)
            .map_err(|e| io_err(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
    }
}

/// Keeps records with magnitude strictly above `min_magnitude` and origin
/// time in `[start, end)`, in input order.
pub fn filter_events(
    records: &[MomentTensorRecord],
    min_magnitude: f64,
    start: DateTime<Utc>,
    end: DateTime<Utc>,
) -> Vec<MomentTensorRecord> {
    records
        .iter()
        .filter(|r| r.magnitude > min_magnitude && r.origin_time >= start && r.origin_time < end)
        .cloned()
        .collect()
}

fn mantissa(value: f64, exponent: i32) -> f64 {
    value / 10f64.powi(exponent)
}

/// Serializes a record back to a 5-line NDK block (with trailing newline).
/// Fields the record does not carry (uncertainties, nodal planes, inversion
/// metadata) are written as zeros.
pub fn to_ndk(r: &MomentTensorRecord) -> String {
    let mut out = String::with_capacity(5 * 81);
    let t = r.origin_time;
    let _ = writeln!(
        out,
        "{:<4} {:04}/{:02}/{:02} {:02}:{:02}:{:02}.0 {:6.2} {:7.2} {:5.1} {:3.1} {:3.1} {:<24}",
        truncate(&r.source, 4),
        t.year(),
        t.month(),
        t.day(),
        t.hour(),
        t.minute(),
        t.second(),
        r.latitude,
        r.longitude,
        r.depth_km,
        r.body_wave_magnitude,
        r.surface_wave_magnitude,
        truncate(&r.region, 24),
    );
    let _ = writeln!(
        out,
        "{:<16} {:<63}",
        truncate(&r.event_id, 16),
        "B:  0    0   0 S:  0    0   0 M:  0    0   0 CMT: 1 BOXHD:  0.0"
    );
    let _ = writeln!(
        out,
        "CENTROID:{:9.1}{:4.1}{:7.2}{:5.2}{:8.2}{:5.2}{:6.1}{:5.1} {:<4} {:<16}",
        0.0, 0.0, r.latitude, 0.0, r.longitude, 0.0, r.depth_km, 0.0, "FREE", "O-00000000000000"
    );
    let _ = write!(out, "{:2}", r.exponent);
    for c in r.tensor.components() {
        let _ = write!(out, "{:7.3}{:6.3}", mantissa(c, r.exponent), 0.0);
    }
    out.push('\n');
    let axes = r
        .catalog_axes
        .unwrap_or_else(|| symmetric_eig3(&r.tensor).axes);
    let _ = write!(out, "V10");
    for a in axes {
        let _ = write!(
            out,
            "{:8.3}{:3}{:4}",
            mantissa(a.eigenvalue, r.exponent),
            a.plunge.round() as i64,
            (a.azimuth.round() as i64).rem_euclid(360)
        );
    }
    let _ = writeln!(
        out,
        "{:8.3}{:4}{:3}{:5}{:4}{:3}{:5}",
        mantissa(r.scalar_moment, r.exponent),
        0,
        0,
        0,
        0,
        0,
        0
    );
    out
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Header of the canonical event table.
pub const EVENTS_CSV_HEADER: &str = "event_id,origin_time,lat,lon,depth_km,mw,mrr,mtt,mpp,mrt,mrp,mtp";

/// Canonical CSV row; tensor components in dyne-cm with 6 significant digits.
pub fn events_csv_row(r: &MomentTensorRecord) -> String {
    let mut row = format!(
        "{},{},{},{},{},{:.4}",
        r.event_id,
        r.origin_time.format("%Y-%m-%dT%H:%M:%SZ"),
        r.latitude,
        r.longitude,
        r.depth_km,
        r.magnitude
    );
    for c in r.tensor.components() {
        let _ = write!(row, ",{:.5e}", c);
    }
    row
}

pub fn events_csv(records: &[MomentTensorRecord]) -> String {
    let mut s = String::from(EVENTS_CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&events_csv_row(r));
        s.push('\n');
    }
    s
}
