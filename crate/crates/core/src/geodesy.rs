//! WGS-84 coordinates, local tangent frames and line-of-sight angles.
//!
//! Altitudes are ellipsoidal. Bearings are measured clockwise from true
//! north, elevation positive upward.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// Flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// Semi-minor axis (m).
pub const WGS84_B: f64 = WGS84_A * (1.0 - WGS84_F);
/// First eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

/// Below this separation two fixes are treated as the same point.
pub const COINCIDENT_THRESHOLD_M: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside (-180, 180]")]
    Longitude(f64),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("negative sigma component")]
    NegativeSigma,
    #[error("points coincide within {COINCIDENT_THRESHOLD_M} m")]
    Degenerate,
}

/// A timestamped position with per-axis (east, north, up) 1-sigma uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoFix {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
    #[serde(default)]
    pub t_ns: i64,
    #[serde(default)]
    pub sigma_enu_m: [f64; 3],
    #[serde(default)]
    pub rtk_applied: bool,
}

impl GeoFix {
    /// A zero-uncertainty fix at time zero.
    pub fn new(lat_deg: f64, lon_deg: f64, alt_m: f64) -> Self {
        Self { lat_deg, lon_deg, alt_m, t_ns: 0, sigma_enu_m: [0.0; 3], rtk_applied: false }
    }

    pub fn at(mut self, t_ns: i64) -> Self {
        self.t_ns = t_ns;
        self
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.lat_deg.is_finite() && self.lon_deg.is_finite() && self.alt_m.is_finite()) {
            return Err(GeoError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&self.lat_deg) {
            return Err(GeoError::Latitude(self.lat_deg));
        }
        if !(self.lon_deg > -180.0 && self.lon_deg <= 180.0) {
            return Err(GeoError::Longitude(self.lon_deg));
        }
        if self.sigma_enu_m.iter().any(|s| *s < 0.0) {
            return Err(GeoError::NegativeSigma);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefPoint {
    pub x_m: f64,
    pub y_m: f64,
    pub z_m: f64,
}

impl EcefPoint {
    pub fn norm(&self) -> f64 {
        (self.x_m * self.x_m + self.y_m * self.y_m + self.z_m * self.z_m).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuVector {
    pub e_m: f64,
    pub n_m: f64,
    pub u_m: f64,
}

impl EnuVector {
    pub const ZERO: EnuVector = EnuVector { e_m: 0.0, n_m: 0.0, u_m: 0.0 };

    pub fn new(e_m: f64, n_m: f64, u_m: f64) -> Self {
        Self { e_m, n_m, u_m }
    }

    pub fn norm(&self) -> f64 {
        (self.e_m * self.e_m + self.n_m * self.n_m + self.u_m * self.u_m).sqrt()
    }

    pub fn horizontal(&self) -> f64 {
        self.e_m.hypot(self.n_m)
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.e_m * k, self.n_m * k, self.u_m * k)
    }

    pub fn add(&self, o: &EnuVector) -> Self {
        Self::new(self.e_m + o.e_m, self.n_m + o.n_m, self.u_m + o.u_m)
    }

    pub fn sub(&self, o: &EnuVector) -> Self {
        Self::new(self.e_m - o.e_m, self.n_m - o.n_m, self.u_m - o.u_m)
    }
}

/// Line-of-sight direction: azimuth in [0, 360), elevation in [-90, 90].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LosAngles {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
}

impl LosAngles {
    pub fn new(yaw_deg: f64, pitch_deg: f64) -> Self {
        Self { yaw_deg: normalize_deg(yaw_deg), pitch_deg }
    }
}

/// Wraps an angle into [0, 360).
pub fn normalize_deg(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    // rem_euclid can return 360.0 for tiny negative inputs
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

pub fn geodetic_to_ecef(fix: &GeoFix) -> Result<EcefPoint, GeoError> {
    fix.validate()?;
    let lat = fix.lat_deg.to_radians();
    let lon = fix.lon_deg.to_radians();
    let (slat, clat) = lat.sin_cos();
    let (slon, clon) = lon.sin_cos();
    let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
    Ok(EcefPoint { x_m: (n + fix.alt_m) * clat * clon, y_m: (n + fix.alt_m) * clat * slon, z_m: (n * (1.0 - WGS84_E2) + fix.alt_m) * slat })
}

/// Inverse of [`geodetic_to_ecef`]. Returns `(lat_deg, lon_deg, alt_m)`.
///
/// Bowring's initial guess refined by fixed-point iteration on latitude.
pub fn ecef_to_geodetic(p: &EcefPoint) -> (f64, f64, f64) {
    let rho = p.x_m.hypot(p.y_m);
    let lon = p.y_m.atan2(p.x_m);
    if rho < 1e-9 {
        let lat = if p.z_m >= 0.0 { 90.0 } else { -90.0 };
        return (lat, lon.to_degrees(), p.z_m.abs() - WGS84_B);
    }
    let ep2 = WGS84_E2 / (1.0 - WGS84_E2);
    let beta = (WGS84_A * p.z_m).atan2(WGS84_B * rho);
    let (sb, cb) = beta.sin_cos();
    let mut lat = (p.z_m + ep2 * WGS84_B * sb.powi(3)).atan2(rho - WGS84_E2 * WGS84_A * cb.powi(3));
    for _ in 0..8 {
        let slat = lat.sin();
        let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
        let alt = if lat.cos().abs() > 1e-3 { rho / lat.cos() - n } else { p.z_m / slat - n * (1.0 - WGS84_E2) };
        let next = p.z_m.atan2(rho * (1.0 - WGS84_E2 * n / (n + alt)));
        let done = (next - lat).abs() < 1e-15;
        lat = next;
        if done {
            break;
        }
    }
    let slat = lat.sin();
    let n = WGS84_A / (1.0 - WGS84_E2 * slat * slat).sqrt();
    let alt = if lat.cos().abs() > 1e-3 { rho / lat.cos() - n } else { p.z_m / slat - n * (1.0 - WGS84_E2) };
    let mut lon_deg = lon.to_degrees();
    if lon_deg <= -180.0 {
        lon_deg += 360.0;
    }
    (lat.to_degrees(), lon_deg, alt)
}

/// Rows of the ECEF-to-ENU rotation at the given geodetic latitude/longitude.
fn enu_basis(lat_deg: f64, lon_deg: f64) -> [[f64; 3]; 3] {
    let (slat, clat) = lat_deg.to_radians().sin_cos();
    let (slon, clon) = lon_deg.to_radians().sin_cos();
    [[-slon, clon, 0.0], [-slat * clon, -slat * slon, clat], [clat * clon, clat * slon, slat]]
}

pub fn ecef_to_enu(p: &EcefPoint, origin: &GeoFix) -> Result<EnuVector, GeoError> {
    let o = geodetic_to_ecef(origin)?;
    let d = [p.x_m - o.x_m, p.y_m - o.y_m, p.z_m - o.z_m];
    let r = enu_basis(origin.lat_deg, origin.lon_deg);
    let dot = |row: &[f64; 3]| row[0] * d[0] + row[1] * d[1] + row[2] * d[2];
    Ok(EnuVector::new(dot(&r[0]), dot(&r[1]), dot(&r[2])))
}

pub fn enu_to_ecef(v: &EnuVector, origin: &GeoFix) -> Result<EcefPoint, GeoError> {
    let o = geodetic_to_ecef(origin)?;
    let r = enu_basis(origin.lat_deg, origin.lon_deg);
    let col = |i: usize| r[0][i] * v.e_m + r[1][i] * v.n_m + r[2][i] * v.u_m;
    Ok(EcefPoint { x_m: o.x_m + col(0), y_m: o.y_m + col(1), z_m: o.z_m + col(2) })
}

/// ENU offset of `to` as seen from `from`.
pub fn enu_between(from: &GeoFix, to: &GeoFix) -> Result<EnuVector, GeoError> {
    ecef_to_enu(&geodetic_to_ecef(to)?, from)
}

/// Moves a fix by an ENU displacement, keeping its time and metadata.
pub fn offset_fix(fix: &GeoFix, delta: &EnuVector) -> Result<GeoFix, GeoError> {
    let p = enu_to_ecef(delta, fix)?;
    let (lat, lon, alt) = ecef_to_geodetic(&p);
    Ok(GeoFix { lat_deg: lat, lon_deg: lon, alt_m: alt, ..*fix })
}

/// Direction angles of an ENU vector.
pub fn los_from_enu(v: &EnuVector) -> LosAngles {
    let yaw = v.e_m.atan2(v.n_m).to_degrees();
    let pitch = v.u_m.atan2(v.horizontal()).to_degrees();
    LosAngles::new(yaw, pitch)
}

pub fn bearing_elevation(from: &GeoFix, to: &GeoFix) -> Result<LosAngles, GeoError> {
    let v = enu_between(from, to)?;
    if v.norm() <= COINCIDENT_THRESHOLD_M {
        return Err(GeoError::Degenerate);
    }
    Ok(los_from_enu(&v))
}

pub fn distance_3d(a: &GeoFix, b: &GeoFix) -> Result<f64, GeoError> {
    let pa = geodetic_to_ecef(a)?;
    let pb = geodetic_to_ecef(b)?;
    let d = EcefPoint { x_m: pa.x_m - pb.x_m, y_m: pa.y_m - pb.y_m, z_m: pa.z_m - pb.z_m };
    Ok(d.norm())
}

/// A correction message from the RTK stream, valid for the epoch `t_ns`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtkCorrection {
    pub t_ns: i64,
    /// Estimated error of the raw fix; subtracted from it.
    pub offset: EnuVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RtkConfig {
    pub residual_sigma_enu_m: [f64; 3],
    pub staleness_ns: i64,
}

impl Default for RtkConfig {
    fn default() -> Self {
        Self { residual_sigma_enu_m: [0.07, 0.07, 0.13], staleness_ns: 2_000_000_000 }
    }
}

/// Applies a correction to a raw fix.
///
/// Already-corrected fixes and stale corrections leave the fix unchanged.
pub fn apply_rtk(raw: &GeoFix, corr: &RtkCorrection, cfg: &RtkConfig) -> Result<GeoFix, GeoError> {
    if raw.rtk_applied {
        return Ok(*raw);
    }
    if (raw.t_ns - corr.t_ns).abs() > cfg.staleness_ns {
        return Ok(*raw);
    }
    let mut fixed = offset_fix(raw, &corr.offset.scale(-1.0))?;
    fixed.sigma_enu_m = cfg.residual_sigma_enu_m;
    fixed.rtk_applied = true;
    Ok(fixed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn slc() -> GeoFix {
        GeoFix::new(40.766, -111.846, 1400.0)
    }

    #[test]
    fn equator_and_pole() {
        let p = geodetic_to_ecef(&GeoFix::new(0.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(p.x_m, 6_378_137.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.y_m, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.z_m, 0.0, epsilon = 1e-6);
        let p = geodetic_to_ecef(&GeoFix::new(90.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(p.x_m, 0.0, epsilon = 1e-6);
        assert_abs_diff_eq!(p.z_m, 6_356_752.314_2, epsilon = 1e-4);
    }

    #[test]
    fn out_of_range_rejected() {
        assert_eq!(geodetic_to_ecef(&GeoFix::new(91.0, 0.0, 0.0)), Err(GeoError::Latitude(91.0)));
        assert_eq!(geodetic_to_ecef(&GeoFix::new(0.0, -180.0, 0.0)), Err(GeoError::Longitude(-180.0)));
        assert!(geodetic_to_ecef(&GeoFix::new(0.0, 180.0, 0.0)).is_ok());
    }

    #[test]
    fn enu_of_origin_is_zero() {
        let o = slc();
        let v = ecef_to_enu(&geodetic_to_ecef(&o).unwrap(), &o).unwrap();
        assert!(v.norm() < 1e-9);
    }

    #[test]
    fn vertical_offset_maps_to_up() {
        let o = slc();
        let up = GeoFix { alt_m: o.alt_m + 100.0, ..o };
        let v = enu_between(&o, &up).unwrap();
        assert_abs_diff_eq!(v.u_m, 100.0, epsilon = 1e-6);
        assert!(v.e_m.abs() < 1e-3 && v.n_m.abs() < 1e-3);
    }

    #[test]
    fn due_north_and_zenith() {
        let o = slc();
        let north = offset_fix(&o, &EnuVector::new(0.0, 100.0, 0.0)).unwrap();
        let los = bearing_elevation(&o, &north).unwrap();
        assert!(los.yaw_deg < 0.001 || los.yaw_deg > 359.999, "{}", los.yaw_deg);
        assert!(los.pitch_deg.abs() < 0.001);
        let above = GeoFix { alt_m: o.alt_m + 50.0, ..o };
        assert_abs_diff_eq!(bearing_elevation(&o, &above).unwrap().pitch_deg, 90.0, epsilon = 1e-6);
    }

    #[test]
    fn coincident_is_degenerate() {
        let o = slc();
        let near = offset_fix(&o, &EnuVector::new(0.0002, 0.0, 0.0)).unwrap();
        assert_eq!(bearing_elevation(&o, &near), Err(GeoError::Degenerate));
    }

    #[test]
    fn distance_properties() {
        let a = slc();
        assert_eq!(distance_3d(&a, &a).unwrap(), 0.0);
        let b = offset_fix(&a, &EnuVector::new(0.0, 100.0, 0.0)).unwrap();
        assert_abs_diff_eq!(distance_3d(&a, &b).unwrap(), 100.0, epsilon = 0.01);
        assert_eq!(distance_3d(&a, &b).unwrap(), distance_3d(&b, &a).unwrap());
    }

    #[test]
    fn rtk_zero_and_perfect_correction() {
        let cfg = RtkConfig::default();
        let mut raw = slc().at(5);
        raw.sigma_enu_m = [1.2, 1.2, 2.0];
        let out = apply_rtk(&raw, &RtkCorrection { t_ns: 5, offset: EnuVector::ZERO }, &cfg).unwrap();
        assert!(out.rtk_applied);
        assert_eq!(out.sigma_enu_m, cfg.residual_sigma_enu_m);
        assert!(distance_3d(&out, &raw).unwrap() < 1e-6);

        let truth = slc();
        let err = EnuVector::new(0.8, -1.1, 2.3);
        let noisy = GeoFix { sigma_enu_m: [1.2, 1.2, 2.0], ..offset_fix(&truth, &err).unwrap() };
        let fixed = apply_rtk(&noisy, &RtkCorrection { t_ns: 0, offset: err }, &cfg).unwrap();
        assert!(distance_3d(&fixed, &truth).unwrap() < 1e-6);
    }

    #[test]
    fn rtk_stale_and_idempotent() {
        let cfg = RtkConfig::default();
        let raw = slc().at(3_000_000_000);
        let corr = RtkCorrection { t_ns: 0, offset: EnuVector::new(1.0, 0.0, 0.0) };
        let out = apply_rtk(&raw, &corr, &cfg).unwrap();
        assert_eq!(out, raw);
        assert!(!out.rtk_applied);

        let fresh = RtkCorrection { t_ns: raw.t_ns, offset: EnuVector::new(1.0, 0.0, 0.0) };
        let once = apply_rtk(&raw, &fresh, &cfg).unwrap();
        let twice = apply_rtk(&once, &fresh, &cfg).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn normalize_wraps() {
        assert_eq!(normalize_deg(-1e-18), 0.0);
        assert_eq!(normalize_deg(360.0), 0.0);
        assert_eq!(normalize_deg(-90.0), 270.0);
    }
}
