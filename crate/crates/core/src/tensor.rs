//! Principal axes of a moment tensor and the four classifier features.
//!
//! Tensors use the catalog's spherical convention: the basis is
//! (r, t, p) = (up, south, east). Axes are reported as azimuth (clockwise
//! from north) and plunge (downward dip), with every axis flipped to point
//! downward or horizontal.

use serde::{Deserialize, Serialize};

/// Relative eigenvalue gap below which the spectrum is flagged degenerate.
pub const DEGENERACY_TOL: f64 = 1e-9;

const HORIZONTAL_TOL: f64 = 1e-12;

/// Six independent components of a symmetric moment tensor, in dyne-cm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentTensor {
    pub mrr: f64,
    pub mtt: f64,
    pub mpp: f64,
    pub mrt: f64,
    pub mrp: f64,
    pub mtp: f64,
}

impl MomentTensor {
    pub fn from_components(c: [f64; 6]) -> Self {
        Self {
            mrr: c[0],
            mtt: c[1],
            mpp: c[2],
            mrt: c[3],
            mrp: c[4],
            mtp: c[5],
        }
    }

    /// Components in catalog order (Mrr, Mtt, Mpp, Mrt, Mrp, Mtp).
    pub fn components(&self) -> [f64; 6] {
        [self.mrr, self.mtt, self.mpp, self.mrt, self.mrp, self.mtp]
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.mrr, self.mrt, self.mrp],
            [self.mrt, self.mtt, self.mtp],
            [self.mrp, self.mtp, self.mpp],
        ]
    }

    /// Reads the upper triangle of `m`; the result is symmetric by construction.
    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Self {
        Self {
            mrr: m[0][0],
            mtt: m[1][1],
            mpp: m[2][2],
            mrt: m[0][1],
            mrp: m[0][2],
            mtp: m[1][2],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|c| c.is_finite())
    }

    /// Builds Σ λᵢ vᵢvᵢᵀ from eigenvalues and unit eigenvectors.
    pub fn from_eigen(values: [f64; 3], vectors: [[f64; 3]; 3]) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (lambda, v) in values.iter().zip(vectors.iter()) {
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += lambda * v[i] * v[j];
                }
            }
        }
        Self::from_matrix(&m)
    }

    pub fn frobenius_norm(&self) -> f64 {
        let m = self.matrix();
        m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// One principal axis as listed in a catalog.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub eigenvalue: f64,
    pub plunge: f64,
    pub azimuth: f64,
}

/// Eigen-decomposition of a moment tensor, largest eigenvalue first.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalAxes {
    pub axes: [Axis; 3],
    /// Unit eigenvectors in (up, south, east), flipped to point downward.
    pub vectors: [[f64; 3]; 3],
    /// Two or more eigenvalues coincide within [`DEGENERACY_TOL`].
    pub degenerate: bool,
}

impl PrincipalAxes {
    pub fn eigenvalues(&self) -> [f64; 3] {
        [
            self.axes[0].eigenvalue,
            self.axes[1].eigenvalue,
            self.axes[2].eigenvalue,
        ]
    }

    pub fn reconstruct(&self) -> MomentTensor {
        MomentTensor::from_eigen(self.eigenvalues(), self.vectors)
    }
}

/// Cyclic Jacobi rotations; returns eigenvalues and eigenvectors (as rows),
/// unordered.
fn jacobi3(m: &[[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut a = *m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..64 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        let diag = a[0][0].abs() + a[1][1].abs() + a[2][2].abs();
        if off == 0.0 || off <= f64::EPSILON * 1e-3 * diag {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            // A <- Jᵀ A J with J the (p, q) Givens rotation.
            for row in a.iter_mut() {
                let (akp, akq) = (row[p], row[q]);
                row[p] = c * akp - s * akq;
                row[q] = s * akp + c * akq;
            }
            #[allow(clippy::needless_range_loop)]
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let values = [a[0][0], a[1][1], a[2][2]];
    // Columns of v are eigenvectors; return them as rows.
    let mut vectors = [[0.0; 3]; 3];
    for (j, vec) in vectors.iter_mut().enumerate() {
        for i in 0..3 {
            vec[i] = v[i][j];
        }
    }
    (values, vectors)
}

/// Flips `v` to the downward-or-horizontal hemisphere. Exactly horizontal
/// vectors are canonicalised to azimuth in [0, 180).
fn canonical_sign(v: [f64; 3]) -> [f64; 3] {
    let down = -v[0];
    let flip = if down.abs() <= HORIZONTAL_TOL {
        let north = -v[1];
        let east = v[2];
        east < 0.0 || (east == 0.0 && north < 0.0)
    } else {
        down < 0.0
    };
    if flip {
        [-v[0], -v[1], -v[2]]
    } else {
        v
    }
}

/// Converts a unit vector in (up, south, east) to (azimuth, plunge) degrees.
pub fn vector_to_azimuth_plunge(v: [f64; 3]) -> (f64, f64) {
    let v = canonical_sign(v);
    let down = (-v[0]).clamp(-1.0, 1.0);
    let north = -v[1];
    let east = v[2];
    let plunge = down.asin().to_degrees().clamp(0.0, 90.0);
    if north.hypot(east) <= HORIZONTAL_TOL {
        return (0.0, plunge);
    }
    let mut az = east.atan2(north).to_degrees().rem_euclid(360.0);
    if az >= 360.0 {
        az = 0.0;
    }
    (az, plunge)
}

/// Inverse of [`vector_to_azimuth_plunge`]: unit vector in (up, south, east).
pub fn azimuth_plunge_to_vector(azimuth: f64, plunge: f64) -> [f64; 3] {
    let (az, pl) = (azimuth.to_radians(), plunge.to_radians());
    let north = pl.cos() * az.cos();
    let east = pl.cos() * az.sin();
    let down = pl.sin();
    [-down, -north, east]
}

/// Eigen-decomposition of the symmetric tensor, eigenvalues descending.
pub fn symmetric_eig3(tensor: &MomentTensor) -> PrincipalAxes {
    let (values, vectors) = jacobi3(&tensor.matrix());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));

    let scale = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let degenerate = scale == 0.0
        || (0..3).any(|i| {
            (i + 1..3).any(|j| (values[i] - values[j]).abs() < DEGENERACY_TOL * scale)
        });

    let mut axes = [Axis {
        eigenvalue: 0.0,
        plunge: 0.0,
        azimuth: 0.0,
    }; 3];
    let mut out_vectors = [[0.0; 3]; 3];
    for (slot, &k) in order.iter().enumerate() {
        let v = canonical_sign(vectors[k]);
        let (azimuth, plunge) = vector_to_azimuth_plunge(v);
        axes[slot] = Axis {
            eigenvalue: values[k],
            plunge,
            azimuth,
        };
        out_vectors[slot] = v;
    }
    PrincipalAxes {
        axes,
        vectors: out_vectors,
        degenerate,
    }
}

/// The four classifier variables: azimuths of the three principal axes and
/// the plunge of the smallest-eigenvalue axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub az1: f64,
    pub az2: f64,
    pub az3: f64,
    pub plunge3: f64,
}

impl FeatureVector {
    pub fn to_array(self) -> [f64; 4] {
        [self.az1, self.az2, self.az3, self.plunge3]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            az1: a[0],
            az2: a[1],
            az3: a[2],
            plunge3: a[3],
        }
    }

    pub fn from_axes(axes: &[Axis; 3]) -> Self {
        Self {
            az1: axes[0].azimuth,
            az2: axes[1].azimuth,
            az3: axes[2].azimuth,
            plunge3: axes[2].plunge,
        }
    }
}

/// Quality flags attached to a feature vector. Flagged events stay in the
/// feature table; classification skips degenerate spectra.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureQuality {
    pub degenerate_spectrum: bool,
    /// At least one axis is vertical, so its azimuth was set to 0.
    pub vertical_axis: bool,
}

impl FeatureQuality {
    pub fn is_ok(&self) -> bool {
        !self.degenerate_spectrum && !self.vertical_axis
    }

    pub fn as_str(&self) -> &'static str {
        match (self.degenerate_spectrum, self.vertical_axis) {
            (false, false) => "ok",
            (true, false) => "degenerate",
            (false, true) => "vertical",
            (true, true) => "degenerate+vertical",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let q = match s {
            "ok" => (false, false),
            "degenerate" => (true, false),
            "vertical" => (false, true),
            "degenerate+vertical" => (true, true),
            _ => return None,
        };
        Some(Self {
            degenerate_spectrum: q.0,
            vertical_axis: q.1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Features {
    pub vector: FeatureVector,
    pub quality: FeatureQuality,
}

fn vertical_flag(axes: &[Axis; 3]) -> bool {
    axes.iter().any(|a| a.plunge >= 90.0 - 1e-9)
}

/// Features from catalog axes when preferred and present, else from the
/// tensor's own eigenstructure.
pub fn extract_features(record: &crate::catalog::MomentTensorRecord, prefer_catalog_axes: bool) -> Features {
    if prefer_catalog_axes {
        if let Some(axes) = record.catalog_axes {
            let mut sorted = axes;
            sorted.sort_by(|a, b| b.eigenvalue.total_cmp(&a.eigenvalue));
            let scale = sorted.iter().fold(0.0f64, |m, a| m.max(a.eigenvalue.abs()));
            let degenerate = scale == 0.0
                || sorted
                    .windows(2)
                    .any(|w| (w[0].eigenvalue - w[1].eigenvalue).abs() < DEGENERACY_TOL * scale);
            return Features {
                vector: FeatureVector::from_axes(&sorted),
                quality: FeatureQuality {
                    degenerate_spectrum: degenerate,
                    vertical_axis: vertical_flag(&sorted),
                },
            };
        }
    }
    features_from_tensor(&record.tensor)
}

pub fn features_from_tensor(tensor: &MomentTensor) -> Features {
    let pa = symmetric_eig3(tensor);
    Features {
        vector: FeatureVector::from_axes(&pa.axes),
        quality: FeatureQuality {
            degenerate_spectrum: pa.degenerate,
            vertical_axis: vertical_flag(&pa.axes),
        },
    }
}

/// Angle in degrees between two axes, ignoring orientation sign.
pub fn axial_angle(a: (f64, f64), b: (f64, f64)) -> f64 {
    let u = azimuth_plunge_to_vector(a.0, a.1);
    let w = azimuth_plunge_to_vector(b.0, b.1);
    let dot: f64 = u.iter().zip(w.iter()).map(|(x, y)| x * y).sum();
    dot.abs().clamp(0.0, 1.0).acos().to_degrees()
}
