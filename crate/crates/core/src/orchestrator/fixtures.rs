//! Generators for the shipped routes. The JSON files under `scenarios/` are
//! their output; a test keeps the two in step.

use std::f64::consts::PI;

use crate::geodesy::{offset_fix, EnuVector};
use crate::mobility::{Route, Waypoint};

use super::scenario::TxSite;

/// Rooftop transmitter overlooking the loop.
pub const CAMPUS_TX: TxSite = TxSite { lat_deg: 40.766, lon_deg: -111.846, alt_m: 1460.0, heading_deg: 0.0 };

const GROUND_ALT_M: f64 = 1430.0;

/// Point at arclength `s` along a counter-clockwise
/// rounded rectangle centred on the origin, starting mid-way along the
/// southern edge.
fn rounded_rect(s: f64, half_w: f64, half_h: f64, r: f64) -> (f64, f64) {
    let sx = 2.0 * (half_w - r);
    let sy = 2.0 * (half_h - r);
    let arc = PI * r / 2.0;
    let perimeter = 2.0 * (sx + sy) + 4.0 * arc;
    let mut s = s.rem_euclid(perimeter);
    // pieces in travel order: half south edge, SE arc, east edge, NE arc,
    // north edge, NW arc, west edge, SW arc, half south edge
    let straight = |s: f64, x0: f64, y0: f64, dx: f64, dy: f64| (x0 + dx * s, y0 + dy * s);
    let corner = |s: f64, cx: f64, cy: f64, a0: f64| {
        let a = a0 + s / r;
        (cx + r * a.cos(), cy + r * a.sin())
    };
    let (cx, cy) = (half_w - r, half_h - r);
    if s < sx / 2.0 {
        return straight(s, 0.0, -half_h, 1.0, 0.0);
    }
    s -= sx / 2.0;
    if s < arc {
        return corner(s, cx, -cy, -PI / 2.0);
    }
    s -= arc;
    if s < sy {
        return straight(s, half_w, -cy, 0.0, 1.0);
    }
    s -= sy;
    if s < arc {
        return corner(s, cx, cy, 0.0);
    }
    s -= arc;
    if s < sx {
        return straight(s, cx, half_h, -1.0, 0.0);
    }
    s -= sx;
    if s < arc {
        return corner(s, -cx, cy, PI / 2.0);
    }
    s -= arc;
    if s < sy {
        return straight(s, -half_w, cy, 0.0, -1.0);
    }
    s -= sy;
    if s < arc {
        return corner(s, -cx, -cy, PI);
    }
    s -= arc;
    straight(s, -cx, -half_h, 1.0, 0.0)
}

fn round_to(x: f64, places: i32) -> f64 {
    let k = 10f64.powi(places);
    (x * k).round() / k
}

/// About 1.2 km around a 400 m x 250 m block north of the rooftop at a
/// steady 6 m/s, one waypoint every half second, long enough for one lap.
pub fn campus_loop() -> Route {
    let origin = CAMPUS_TX.fix();
    let (half_w, half_h, r, speed, dt) = (200.0, 125.0, 60.0, 6.0, 0.5);
    let centre_n = 205.0;
    let perimeter = 2.0 * (2.0 * (half_w - r) + 2.0 * (half_h - r)) + 2.0 * PI * r;
    let n = (perimeter / (speed * dt)).ceil() as usize;
    let waypoints = (0..=n)
        .map(|i| {
            let t = i as f64 * dt;
            let (e, nn) = rounded_rect(speed * t, half_w, half_h, r);
            let d = EnuVector::new(e, nn + centre_n, GROUND_ALT_M - origin.alt_m);
            let f = offset_fix(&origin, &d).expect("valid origin");
            Waypoint { t_s: t, lat_deg: round_to(f.lat_deg, 9), lon_deg: round_to(f.lon_deg, 9), alt_m: round_to(f.alt_m, 3) }
        })
        .collect();
    Route::new(waypoints).expect("generated route is valid")
}

/// A straight 500 m drive away from the rooftop and back at 8 m/s.
pub fn street_out_and_back() -> Route {
    let origin = CAMPUS_TX.fix();
    let (len, speed, dt): (f64, f64, f64) = (500.0, 8.0, 0.5);
    let leg = len / speed;
    let n = (2.0 * leg / dt).round() as usize;
    let waypoints = (0..=n)
        .map(|i| {
            let t = i as f64 * dt;
            let along = if t <= leg { speed * t } else { speed * (2.0 * leg - t) };
            let d = EnuVector::new(60.0 + along * 0.8, 40.0 + along * 0.6, GROUND_ALT_M - origin.alt_m);
            let f = offset_fix(&origin, &d).expect("valid origin");
            Waypoint { t_s: t, lat_deg: round_to(f.lat_deg, 9), lon_deg: round_to(f.lon_deg, 9), alt_m: round_to(f.alt_m, 3) }
        })
        .collect();
    Route::new(waypoints).expect("generated route is valid")
}
