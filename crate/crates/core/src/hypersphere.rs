//! Geometry of the unit sphere: normalization, cosine distance, slerp and
//! spherical averaging. All operations work on [`UnitVector`]s in double
//! precision and are pure functions.

use crate::error::{Error, Result};

/// Norms at or below this threshold count as zero.
pub const NORM_EPS: f64 = 1e-12;

/// Angular tolerance: inputs closer than `PI - ANGLE_EPS` to antipodal are
/// rejected, inputs with separation below `ANGLE_EPS` use the linear fallback.
pub const ANGLE_EPS: f64 = 1e-6;

/// Tolerance on the unit-norm invariant of [`UnitVector`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// A vector of unit Euclidean norm with at least two components.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Wraps a vector that is already unit-norm (within `1e-9`).
    pub fn new(components: Vec<f64>) -> Result<Self> {
        if components.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "unit vector needs at least 2 components, got {}",
                components.len()
            )));
        }
        let norm = euclidean_norm(&components);
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidParameter(format!(
                "norm {norm} is not 1 within {UNIT_NORM_TOL:e}"
            )));
        }
        Ok(UnitVector(components))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Dot product; both vectors must share a dimension.
    pub fn dot(&self, other: &UnitVector) -> f64 {
        debug_assert_eq!(self.dim(), other.dim());
        dot(&self.0, &other.0)
    }

    pub(crate) fn check_dim(&self, other: &UnitVector) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: other.dim(),
            });
        }
        Ok(())
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn euclidean_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Divides `v` by its Euclidean norm.
pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    if v.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "normalize needs at least 2 components, got {}",
            v.len()
        )));
    }
    let norm = euclidean_norm(v);
    if !norm.is_finite() {
        return Err(Error::InvalidParameter(
            "vector has non-finite components".into(),
        ));
    }
    if norm <= NORM_EPS {
        return Err(Error::ZeroVector {
            norm,
            eps: NORM_EPS,
        });
    }
    Ok(UnitVector(v.iter().map(|x| x / norm).collect()))
}

/// Cosine distance `1 - <u, v>`, clamped to `[0, 2]` against rounding.
pub fn cosine_distance(u: &UnitVector, v: &UnitVector) -> Result<f64> {
    u.check_dim(v)?;
    Ok((1.0 - u.dot(v)).clamp(0.0, 2.0))
}

/// Angle between two unit vectors, in `[0, PI]`.
pub fn angle_between(u: &UnitVector, v: &UnitVector) -> Result<f64> {
    u.check_dim(v)?;
    Ok(u.dot(v).clamp(-1.0, 1.0).acos())
}

/// Spherical linear interpolation along the geodesic from `p0` to `p1`.
///
/// Endpoints are returned exactly. Near-parallel inputs (separation below
/// [`ANGLE_EPS`]) fall back to normalized linear interpolation; antipodal
/// inputs are an error since the geodesic is not unique.
pub fn slerp(p0: &UnitVector, p1: &UnitVector, lambda: f64) -> Result<UnitVector> {
    p0.check_dim(p1)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidParameter(format!(
            "interpolation weight {lambda} outside [0, 1]"
        )));
    }
    let omega = p0.dot(p1).clamp(-1.0, 1.0).acos();
    if omega > std::f64::consts::PI - ANGLE_EPS {
        return Err(Error::AntipodalInputs);
    }
    if lambda == 0.0 {
        return Ok(p0.clone());
    }
    if lambda == 1.0 {
        return Ok(p1.clone());
    }
    if omega < ANGLE_EPS {
        let mixed: Vec<f64> = p0
            .as_slice()
            .iter()
            .zip(p1.as_slice())
            .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
            .collect();
        return normalize(&mixed);
    }
    let sin_omega = omega.sin();
    let w0 = ((1.0 - lambda) * omega).sin() / sin_omega;
    let w1 = (lambda * omega).sin() / sin_omega;
    let mixed: Vec<f64> = p0
        .as_slice()
        .iter()
        .zip(p1.as_slice())
        .map(|(a, b)| w0 * a + w1 * b)
        .collect();
    UnitVector::new(mixed)
}

/// Arithmetic mean of the inputs, renormalized onto the sphere.
///
/// Summation runs per coordinate in sorted value order, so the result is
/// bitwise invariant under permutations of the input list.
pub fn spherical_average(vs: &[UnitVector]) -> Result<UnitVector> {
    let first = vs.first().ok_or(Error::EmptyInput)?;
    let dim = first.dim();
    for v in vs {
        first.check_dim(v)?;
    }
    if vs.len() == 1 {
        return Ok(first.clone());
    }
    let inv = 1.0 / vs.len() as f64;
    let mut mean = vec![0.0; dim];
    let mut column = vec![0.0; vs.len()];
    for (i, m) in mean.iter_mut().enumerate() {
        for (j, v) in vs.iter().enumerate() {
            column[j] = v.as_slice()[i];
        }
        column.sort_unstable_by(f64::total_cmp);
        *m = column.iter().sum::<f64>() * inv;
    }
    normalize(&mean)
}
