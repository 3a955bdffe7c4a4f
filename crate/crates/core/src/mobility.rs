//! Ground-truth route replay and synthetic GNSS / IMU sensor streams.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{self, apply_rtk, enu_between, normalize_deg, offset_fix, EnuVector, GeoError, GeoFix, RtkConfig, RtkCorrection};
use crate::rng::{self, SimRng};

#[derive(Debug, Error)]
pub enum RouteError {
    #[error("malformed route document at line {line}, column {column}: {msg}")]
    Syntax { line: usize, column: usize, msg: String },
    #[error("waypoint {index}: field `{field}` {problem}")]
    Field { index: usize, field: &'static str, problem: String },
    #[error("waypoint {index}: timestamp not strictly increasing")]
    NonMonotonic { index: usize },
    #[error("route needs at least 2 waypoints, found {0}")]
    TooShort(usize),
    #[error("time {t_s} s outside route span [{start_s}, {end_s}]")]
    OutOfRange { t_s: f64, start_s: f64, end_s: f64 },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("reading route file: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub t_s: f64,
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub alt_m: f64,
}

impl Waypoint {
    fn fix(&self) -> GeoFix {
        GeoFix::new(self.lat_deg, self.lon_deg, self.alt_m)
    }
}

/// A validated, time-ordered trace interpolated linearly in the ENU frame of
/// its first waypoint.
#[derive(Debug, Clone)]
pub struct Route {
    waypoints: Vec<Waypoint>,
    enu: Vec<EnuVector>,
}

#[derive(Serialize)]
struct RouteDocument<'a> {
    waypoints: &'a [Waypoint],
}

impl Route {
    pub fn new(waypoints: Vec<Waypoint>) -> Result<Self, RouteError> {
        if waypoints.len() < 2 {
            return Err(RouteError::TooShort(waypoints.len()));
        }
        for (i, w) in waypoints.iter().enumerate() {
            w.fix().validate().map_err(|e| RouteError::Field {
                index: i,
                field: match e {
                    GeoError::Latitude(_) => "lat_deg",
                    GeoError::Longitude(_) => "lon_deg",
                    _ => "alt_m",
                },
                problem: e.to_string(),
            })?;
            if !w.t_s.is_finite() {
                return Err(RouteError::Field { index: i, field: "t_s", problem: "is not finite".into() });
            }
            if i > 0 && w.t_s <= waypoints[i - 1].t_s {
                return Err(RouteError::NonMonotonic { index: i });
            }
        }
        let origin = waypoints[0].fix();
        let enu = waypoints.iter().map(|w| enu_between(&origin, &w.fix())).collect::<Result<Vec<_>, _>>()?;
        Ok(Self { waypoints, enu })
    }

    pub fn from_json(doc: &str) -> Result<Self, RouteError> {
        let value: serde_json::Value =
            serde_json::from_str(doc).map_err(|e| RouteError::Syntax { line: e.line(), column: e.column(), msg: e.to_string() })?;
        let list = value.get("waypoints").and_then(|w| w.as_array()).ok_or_else(|| RouteError::Syntax {
            line: 1,
            column: 1,
            msg: "expected an object with a `waypoints` array".into(),
        })?;
        let mut waypoints = Vec::with_capacity(list.len());
        for (index, item) in list.iter().enumerate() {
            let field = |field: &'static str| -> Result<f64, RouteError> {
                item.get(field).ok_or(RouteError::Field { index, field, problem: "is missing".into() })?.as_f64().ok_or(RouteError::Field {
                    index,
                    field,
                    problem: "is not a number".into(),
                })
            };
            waypoints.push(Waypoint { t_s: field("t_s")?, lat_deg: field("lat_deg")?, lon_deg: field("lon_deg")?, alt_m: field("alt_m")? });
        }
        Self::new(waypoints)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, RouteError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&RouteDocument { waypoints: &self.waypoints }).expect("route serializes")
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn start_s(&self) -> f64 {
        self.waypoints[0].t_s
    }

    pub fn end_s(&self) -> f64 {
        self.waypoints[self.waypoints.len() - 1].t_s
    }

    /// Sum of straight-line segment lengths.
    pub fn path_length_m(&self) -> f64 {
        self.enu.windows(2).map(|w| w[1].sub(&w[0]).norm()).sum()
    }

    fn segment_heading(&self, seg: usize) -> f64 {
        // zero-length segments inherit the nearest moving segment's heading
        let moving = |i: usize| {
            let d = self.enu[i + 1].sub(&self.enu[i]);
            (d.horizontal() > 1e-9).then(|| normalize_deg(d.e_m.atan2(d.n_m).to_degrees()))
        };
        (0..=seg).rev().find_map(moving).or_else(|| (seg + 1..self.enu.len() - 1).find_map(moving)).unwrap_or(0.0)
    }

    pub fn sample(&self, t_s: f64) -> Result<TruePose, RouteError> {
        let (start_s, end_s) = (self.start_s(), self.end_s());
        if !(t_s >= start_s && t_s <= end_s) {
            return Err(RouteError::OutOfRange { t_s, start_s, end_s });
        }
        // segment index such that waypoints[seg].t_s <= t < waypoints[seg + 1].t_s;
        // at a knot the later segment applies
        let seg = match self.waypoints.partition_point(|w| w.t_s <= t_s) {
            0 => 0,
            k => (k - 1).min(self.waypoints.len() - 2),
        };
        let (w0, w1) = (&self.waypoints[seg], &self.waypoints[seg + 1]);
        let (p0, p1) = (self.enu[seg], self.enu[seg + 1]);
        let dt = w1.t_s - w0.t_s;
        let frac = ((t_s - w0.t_s) / dt).clamp(0.0, 1.0);
        let d = p1.sub(&p0);
        let here = p0.add(&d.scale(frac));
        let origin = self.waypoints[0].fix();
        let mut position = if frac == 0.0 {
            w0.fix()
        } else if frac == 1.0 {
            w1.fix()
        } else {
            offset_fix(&origin, &here)?
        };
        position.t_ns = (t_s * 1e9).round() as i64;
        let pitch_deg = if d.norm() > 1e-9 { d.u_m.atan2(d.horizontal()).to_degrees() } else { 0.0 };
        Ok(TruePose { position, heading_deg: self.segment_heading(seg), pitch_deg, speed_mps: d.norm() / dt })
    }
}

/// Ground-truth vehicle state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruePose {
    pub position: GeoFix,
    pub heading_deg: f64,
    /// Climb angle of travel; zero on level ground.
    pub pitch_deg: f64,
    pub speed_mps: f64,
}

impl TruePose {
    /// A motionless pose, e.g. a fixed rooftop transmitter.
    pub fn stationary(position: GeoFix, heading_deg: f64) -> Self {
        Self { position, heading_deg: normalize_deg(heading_deg), pitch_deg: 0.0, speed_mps: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub gnss_rate_hz: f64,
    pub imu_rate_hz: f64,
    /// 1-sigma of the correlated (Gauss-Markov) error per ENU axis.
    pub gnss_raw_sigma_enu_m: [f64; 3],
    pub gnss_gm_tau_s: f64,
    /// White noise left after correction, per ENU axis.
    pub rtk_residual_sigma_enu_m: [f64; 3],
    /// (yaw, pitch) 1-sigma.
    pub imu_sigma_deg: [f64; 2],
    pub seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            gnss_rate_hz: 10.0,
            imu_rate_hz: 50.0,
            gnss_raw_sigma_enu_m: [1.2, 1.2, 2.0],
            gnss_gm_tau_s: 60.0,
            rtk_residual_sigma_enu_m: [0.07, 0.07, 0.13],
            imu_sigma_deg: [0.7, 0.5],
            seed: 0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gnss_rate_hz > 0.0 && self.imu_rate_hz > 0.0) {
            return Err("sensor rates must be positive".into());
        }
        if !(self.gnss_gm_tau_s > 0.0) {
            return Err("gnss_gm_tau_s must be positive".into());
        }
        let sigmas = self.gnss_raw_sigma_enu_m.iter().chain(&self.rtk_residual_sigma_enu_m).chain(&self.imu_sigma_deg);
        if sigmas.into_iter().any(|s| !(*s >= 0.0)) {
            return Err("sigmas must be non-negative".into());
        }
        Ok(())
    }

    pub fn rtk(&self) -> RtkConfig {
        RtkConfig { residual_sigma_enu_m: self.rtk_residual_sigma_enu_m, ..RtkConfig::default() }
    }
}

fn normal(rng: &mut SimRng) -> f64 {
    rng.sample(StandardNormal)
}

/// Receiver error model: truth + first-order Gauss-Markov error + white noise.
/// The correction stream knows the Gauss-Markov component of each epoch.
#[derive(Debug, Clone)]
pub struct GnssSensor {
    cfg: SensorConfig,
    rng: SimRng,
    gm: Option<[f64; 3]>,
    last_t_ns: i64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnssSample {
    pub fix: GeoFix,
    /// Correction issued for this epoch by the reference station.
    pub correction: RtkCorrection,
}

impl GnssSensor {
    pub fn new(cfg: SensorConfig, stream_tag: u64) -> Self {
        Self { rng: rng::stream(cfg.seed, stream_tag), cfg, gm: None, last_t_ns: 0 }
    }

    pub fn sample(&mut self, pose: &TruePose, rtk_on: bool) -> Result<GnssSample, GeoError> {
        let t_ns = pose.position.t_ns;
        let sig = self.cfg.gnss_raw_sigma_enu_m;
        let draws: [f64; 3] = [normal(&mut self.rng), normal(&mut self.rng), normal(&mut self.rng)];
        let gm = match self.gm {
            None => [sig[0] * draws[0], sig[1] * draws[1], sig[2] * draws[2]],
            Some(prev) => {
                let dt = ((t_ns - self.last_t_ns) as f64 * 1e-9).max(0.0);
                let phi = (-dt / self.cfg.gnss_gm_tau_s).exp();
                let q = (1.0 - phi * phi).sqrt();
                [phi * prev[0] + sig[0] * q * draws[0], phi * prev[1] + sig[1] * q * draws[1], phi * prev[2] + sig[2] * q * draws[2]]
            }
        };
        self.gm = Some(gm);
        self.last_t_ns = t_ns;
        let res = self.cfg.rtk_residual_sigma_enu_m;
        let white = EnuVector::new(res[0] * normal(&mut self.rng), res[1] * normal(&mut self.rng), res[2] * normal(&mut self.rng));
        let correlated = EnuVector::new(gm[0], gm[1], gm[2]);
        let mut raw = offset_fix(&pose.position, &correlated.add(&white))?;
        raw.sigma_enu_m = std::array::from_fn(|i| sig[i].hypot(res[i]));
        raw.rtk_applied = false;
        let correction = RtkCorrection { t_ns, offset: correlated };
        let fix = if rtk_on { apply_rtk(&raw, &correction, &self.cfg.rtk())? } else { raw };
        Ok(GnssSample { fix, correction })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttitudeReading {
    pub yaw_deg: f64,
    pub pitch_deg: f64,
    pub t_ns: i64,
}

#[derive(Debug, Clone)]
pub struct ImuSensor {
    sigma_deg: [f64; 2],
    rng: SimRng,
}

impl ImuSensor {
    pub fn new(cfg: &SensorConfig, stream_tag: u64) -> Self {
        Self { sigma_deg: cfg.imu_sigma_deg, rng: rng::stream(cfg.seed, stream_tag) }
    }

    /// Reads the vehicle attitude.
    pub fn sample(&mut self, pose: &TruePose) -> AttitudeReading {
        self.read(pose.heading_deg, pose.pitch_deg, pose.position.t_ns)
    }

    /// Reads an arbitrary true attitude (e.g. of the antenna head).
    pub fn read(&mut self, yaw_deg: f64, pitch_deg: f64, t_ns: i64) -> AttitudeReading {
        let dy = self.sigma_deg[0] * normal(&mut self.rng);
        let dp = self.sigma_deg[1] * normal(&mut self.rng);
        AttitudeReading { yaw_deg: normalize_deg(yaw_deg + dy), pitch_deg: pitch_deg + dp, t_ns }
    }
}

/// 3D error of a fix against truth, in metres.
pub fn fix_error_m(fix: &GeoFix, truth: &GeoFix) -> Result<f64, GeoError> {
    geodesy::distance_3d(fix, truth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn straight_east() -> Route {
        let o = GeoFix::new(40.766, -111.846, 1400.0);
        let east = offset_fix(&o, &EnuVector::new(100.0, 0.0, 0.0)).unwrap();
        Route::new(vec![
            Waypoint { t_s: 0.0, lat_deg: o.lat_deg, lon_deg: o.lon_deg, alt_m: o.alt_m },
            Waypoint { t_s: 10.0, lat_deg: east.lat_deg, lon_deg: east.lon_deg, alt_m: east.alt_m },
        ])
        .unwrap()
    }

    #[test]
    fn two_waypoints_load() {
        let doc = r#"{"waypoints":[{"t_s":0,"lat_deg":40.0,"lon_deg":-111.0,"alt_m":1400},
                                    {"t_s":1,"lat_deg":40.0001,"lon_deg":-111.0,"alt_m":1400}]}"#;
        assert_eq!(Route::from_json(doc).unwrap().len(), 2);
    }

    #[test]
    fn rejects_bad_documents() {
        let doc = r#"{"waypoints":[{"t_s":0,"lat_deg":40.0,"lon_deg":-111.0,"alt_m":1400},
                                    {"t_s":2,"lat_deg":40.0,"lon_deg":-111.0,"alt_m":1400},
                                    {"t_s":1,"lat_deg":40.0,"lon_deg":-111.0,"alt_m":1400}]}"#;
        assert!(matches!(Route::from_json(doc), Err(RouteError::NonMonotonic { index: 2 })));
        let one = r#"{"waypoints":[{"t_s":0,"lat_deg":40.0,"lon_deg":-111.0,"alt_m":1400}]}"#;
        assert!(matches!(Route::from_json(one), Err(RouteError::TooShort(1))));
        let bad = r#"{"waypoints":[{"t_s":0,"lat_deg":"x","lon_deg":-111.0,"alt_m":1400},
                                    {"t_s":1,"lat_deg":40.0,"lon_deg":-111.0,"alt_m":1400}]}"#;
        match Route::from_json(bad) {
            Err(RouteError::Field { index: 0, field: "lat_deg", .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(Route::from_json("{\n  \"waypoints\": [,]}"), Err(RouteError::Syntax { line: 2, .. })));
    }

    #[test]
    fn sample_knots_midpoint_heading() {
        let r = straight_east();
        let p0 = r.sample(0.0).unwrap();
        assert_eq!(p0.position.lat_deg, r.waypoints()[0].lat_deg);
        let end = r.sample(10.0).unwrap();
        assert_eq!(end.position.lon_deg, r.waypoints()[1].lon_deg);
        let mid = r.sample(5.0).unwrap();
        let v = enu_between(&p0.position, &mid.position).unwrap();
        assert_abs_diff_eq!(v.e_m, 50.0, epsilon = 1e-6);
        assert_abs_diff_eq!(mid.heading_deg, 90.0, epsilon = 1e-6);
        assert_abs_diff_eq!(mid.speed_mps, 10.0, epsilon = 1e-6);
        assert!(matches!(r.sample(10.5), Err(RouteError::OutOfRange { .. })));
    }

    #[test]
    fn noiseless_gnss_is_truth() {
        let cfg = SensorConfig { gnss_raw_sigma_enu_m: [0.0; 3], rtk_residual_sigma_enu_m: [0.0; 3], ..SensorConfig::default() };
        let pose = straight_east().sample(3.0).unwrap();
        let mut s = GnssSensor::new(cfg, 1);
        for rtk in [false, true] {
            let fix = s.sample(&pose, rtk).unwrap().fix;
            assert!(fix_error_m(&fix, &pose.position).unwrap() < 1e-6);
            assert_eq!(fix.rtk_applied, rtk);
        }
    }

    #[test]
    fn noiseless_imu_is_truth() {
        let cfg = SensorConfig { imu_sigma_deg: [0.0, 0.0], ..SensorConfig::default() };
        let pose = straight_east().sample(3.0).unwrap();
        let r = ImuSensor::new(&cfg, 2).sample(&pose);
        assert_abs_diff_eq!(r.yaw_deg, 90.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.pitch_deg, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn identical_seed_identical_stream() {
        let cfg = SensorConfig { seed: 42, ..SensorConfig::default() };
        let route = straight_east();
        let run = || {
            let mut g = GnssSensor::new(cfg, 1);
            let mut i = ImuSensor::new(&cfg, 2);
            (0..50)
                .map(|k| {
                    let pose = route.sample(k as f64 * 0.1).unwrap();
                    let f = g.sample(&pose, k % 2 == 0).unwrap().fix;
                    let a = i.sample(&pose);
                    (f.lat_deg.to_bits(), f.lon_deg.to_bits(), f.alt_m.to_bits(), a.yaw_deg.to_bits())
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        assert!(SensorConfig::default().validate().is_ok());
        let bad = SensorConfig { imu_rate_hz: 0.0, ..SensorConfig::default() };
        assert!(bad.validate().is_err());
        let neg = SensorConfig { imu_sigma_deg: [-1.0, 0.0], ..SensorConfig::default() };
        assert!(neg.validate().is_err());
    }
}
