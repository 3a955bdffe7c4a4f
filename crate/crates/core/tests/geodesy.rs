use approx::assert_abs_diff_eq;
use beamtrack::geodesy::*;
use proptest::prelude::*;

/// Second WGS-84 converter, written from the semi-axes rather than the
/// eccentricity, with ENU built from explicit basis vectors.
mod oracle {
    const A: f64 = 6_378_137.0;
    const B: f64 = A * (1.0 - 1.0 / 298.257_223_563);

    pub fn ecef(lat: f64, lon: f64, h: f64) -> [f64; 3] {
        let (p, l) = (lat.to_radians(), lon.to_radians());
        let n = A * A / (A * A * p.cos().powi(2) + B * B * p.sin().powi(2)).sqrt();
        [(n + h) * p.cos() * l.cos(), (n + h) * p.cos() * l.sin(), (n * B * B / (A * A) + h) * p.sin()]
    }

    pub fn enu(from: (f64, f64, f64), to: (f64, f64, f64)) -> [f64; 3] {
        let a = ecef(from.0, from.1, from.2);
        let b = ecef(to.0, to.1, to.2);
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let (p, l) = (from.0.to_radians(), from.1.to_radians());
        let east = [-l.sin(), l.cos(), 0.0];
        let north = [-p.sin() * l.cos(), -p.sin() * l.sin(), p.cos()];
        let up = [p.cos() * l.cos(), p.cos() * l.sin(), p.sin()];
        let dot = |u: [f64; 3]| u[0] * d[0] + u[1] * d[1] + u[2] * d[2];
        [dot(east), dot(north), dot(up)]
    }

    /// (bearing, elevation) in degrees.
    pub fn look(from: (f64, f64, f64), to: (f64, f64, f64)) -> (f64, f64) {
        let [e, n, u] = enu(from, to);
        (e.atan2(n).to_degrees().rem_euclid(360.0), u.atan2(e.hypot(n)).to_degrees())
    }
}

fn f(p: (f64, f64, f64)) -> GeoFix {
    GeoFix::new(p.0, p.1, p.2)
}

const CAMPUS: (f64, f64, f64) = (40.766, -111.846, 1400.0);

#[test]
fn campus_point_matches_frozen_reference() {
    // 40-digit evaluation of the closed form, rounded to 0.1 mm
    let p = geodetic_to_ecef(&f(CAMPUS)).unwrap();
    assert_abs_diff_eq!(p.x_m, -1_800_528.898_2, epsilon = 1e-3);
    assert_abs_diff_eq!(p.y_m, -4_491_182.807_6, epsilon = 1e-3);
    assert_abs_diff_eq!(p.z_m, 4_143_690.654_2, epsilon = 1e-3);
    let o = oracle::ecef(CAMPUS.0, CAMPUS.1, CAMPUS.2);
    assert_abs_diff_eq!(p.x_m, o[0], epsilon = 1e-6);
    assert_abs_diff_eq!(p.y_m, o[1], epsilon = 1e-6);
    assert_abs_diff_eq!(p.z_m, o[2], epsilon = 1e-6);
}

#[test]
fn campus_pair_matches_frozen_reference() {
    let to = (40.7705, -111.8405, 1385.0);
    let v = enu_between(&f(CAMPUS), &f(to)).unwrap();
    assert_abs_diff_eq!(v.e_m, 464.445561, epsilon = 1e-6);
    assert_abs_diff_eq!(v.n_m, 499.845773, epsilon = 1e-6);
    assert_abs_diff_eq!(v.u_m, -15.036512, epsilon = 1e-6);
    let los = bearing_elevation(&f(CAMPUS), &f(to)).unwrap();
    assert_abs_diff_eq!(los.yaw_deg, 42.897552, epsilon = 1e-6);
    assert_abs_diff_eq!(los.pitch_deg, -1.262449, epsilon = 1e-6);
}

#[test]
fn rooftop_to_ground_pitch() {
    let tx = GeoFix::new(40.766, -111.846, 1460.0);
    let rx = offset_fix(&GeoFix::new(40.766, -111.846, 1430.0), &EnuVector::new(300.0, 400.0, 0.0)).unwrap();
    let los = bearing_elevation(&tx, &rx).unwrap();
    // curvature drop over 500 m is ~2 cm, far below the tolerance
    assert_abs_diff_eq!(los.pitch_deg, -(30.0f64).atan2(500.0).to_degrees(), epsilon = 0.01);
    assert_abs_diff_eq!(los.pitch_deg, -3.43, epsilon = 0.01);
    assert_abs_diff_eq!(los.yaw_deg, (300.0f64).atan2(400.0).to_degrees(), epsilon = 0.01);
}

#[test]
fn hundred_metres_north() {
    let a = GeoFix::new(40.766, -111.846, 1400.0);
    let b = offset_fix(&a, &EnuVector::new(0.0, 100.0, 0.0)).unwrap();
    assert_abs_diff_eq!(distance_3d(&a, &b).unwrap(), 100.0, epsilon = 0.01);
    let up = GeoFix::new(a.lat_deg, a.lon_deg, a.alt_m + 100.0);
    let v = enu_between(&a, &up).unwrap();
    assert_abs_diff_eq!(v.u_m, 100.0, epsilon = 1e-6);
    assert!(v.e_m.abs() < 1e-3 && v.n_m.abs() < 1e-3);
}

fn site() -> impl Strategy<Value = (f64, f64, f64)> {
    (-80.0f64..80.0, -179.0f64..179.0, -100.0f64..3000.0)
}

proptest! {
    #[test]
    fn ecef_matches_oracle(p in site()) {
        let got = geodetic_to_ecef(&f(p)).unwrap();
        let want = oracle::ecef(p.0, p.1, p.2);
        prop_assert!((got.x_m - want[0]).abs() < 1e-6 && (got.y_m - want[1]).abs() < 1e-6 && (got.z_m - want[2]).abs() < 1e-6);
    }

    #[test]
    fn ecef_round_trip(p in site()) {
        let (lat, lon, alt) = ecef_to_geodetic(&geodetic_to_ecef(&f(p)).unwrap());
        prop_assert!((lat - p.0).abs() < 1e-9 && (lon - p.1).abs() < 1e-9 && (alt - p.2).abs() < 1e-4);
    }

    #[test]
    fn kilometre_pairs_match_oracle(p in site(), e in -1000.0f64..1000.0, n in -1000.0f64..1000.0, u in -50.0f64..50.0) {
        prop_assume!(e.hypot(n) > 100.0);
        let from = f(p);
        let to = offset_fix(&from, &EnuVector::new(e, n, u)).unwrap();
        let q = (to.lat_deg, to.lon_deg, to.alt_m);
        let v = enu_between(&from, &to).unwrap();
        let w = oracle::enu(p, q);
        prop_assert!((v.e_m - w[0]).abs() < 1e-4 && (v.n_m - w[1]).abs() < 1e-4 && (v.u_m - w[2]).abs() < 1e-4);
        let los = bearing_elevation(&from, &to).unwrap();
        let (yaw, pitch) = oracle::look(p, q);
        let dyaw = (los.yaw_deg - yaw + 540.0).rem_euclid(360.0) - 180.0;
        prop_assert!(dyaw.abs() < 1e-3 && (los.pitch_deg - pitch).abs() < 1e-3, "{:?} vs {:?}", los, (yaw, pitch));
    }

    #[test]
    fn enu_offset_inverts(p in site(), e in -2000.0f64..2000.0, n in -2000.0f64..2000.0, u in -100.0f64..100.0) {
        let from = f(p);
        let v = enu_between(&from, &offset_fix(&from, &EnuVector::new(e, n, u)).unwrap()).unwrap();
        prop_assert!((v.e_m - e).abs() < 1e-5 && (v.n_m - n).abs() < 1e-5 && (v.u_m - u).abs() < 1e-5);
    }
}
