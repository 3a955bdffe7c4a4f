//! C ABI over the beamtrack core.
//!
//! Every fallible call returns a [`BtStatus`]; on failure the message is kept
//! per thread and read back with [`bt_last_error`]. Text results are copied
//! into caller buffers: pass a capacity, get the required size (including
//! the terminating NUL) back, and retry with a larger buffer on
//! `BT_STATUS_BUFFER_TOO_SMALL`. Handles are opaque and must be released
//! with their `_free` function.

// These are C entry points; pointer validity is the caller's side of the
// contract documented on each function, as in any C library.
#![allow(clippy::not_unsafe_ptr_arg_deref)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use beamtrack::geodesy::{self, GeoFix, LosAngles};
use beamtrack::middleware::{sync_offset, SyncSample};
use beamtrack::orchestrator::{self, ApiCommand, OrchestratorError, RunStatus, Scenario, World};
use beamtrack::pointing::{self, AntennaPattern};
use beamtrack::sounder::{pn_sequence, slide_factor, PnConfig};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BtStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Parse = 5,
    Scenario = 6,
    Startup = 7,
    NotRunning = 8,
    Simulation = 9,
    Panic = 10,
}

/// Lifecycle of a world handle.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BtRunStatus {
    Idle = 0,
    Running = 1,
    Finished = 2,
}

/// A simulated campaign advanced under caller control.
pub struct BtWorld {
    inner: World,
}

struct Failure(BtStatus, String);

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        let code = match &e {
            OrchestratorError::Scenario(_) => BtStatus::Scenario,
            OrchestratorError::Startup(_) => BtStatus::Startup,
            OrchestratorError::NotRunning => BtStatus::NotRunning,
            OrchestratorError::Io(_) | OrchestratorError::MissingFiles(_) => BtStatus::Io,
            OrchestratorError::Json(_) => BtStatus::Parse,
            _ => BtStatus::Simulation,
        };
        Failure(code, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(BtStatus::InvalidArgument, msg.into())
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            BtStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            BtStatus::Panic
        }
    }
}

fn nonnull<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: callers pass either null or a valid, exclusive pointer
    unsafe { p.as_mut() }.ok_or_else(|| Failure(BtStatus::NullArgument, format!("{name} is null")))
}

fn cstr<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(BtStatus::NullArgument, format!("{name} is null")));
    }
    // SAFETY: non-null and NUL-terminated per the API contract
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| invalid(format!("{name} is not UTF-8")))
}

/// Copies `s` plus a NUL into `buf`; always reports the size needed.
fn write_str(s: &str, buf: *mut c_char, cap: usize, needed: *mut usize) -> Result<(), Failure> {
    let n = s.len() + 1;
    if !needed.is_null() {
        // SAFETY: non-null pointer supplied by the caller
        unsafe { *needed = n };
    }
    if buf.is_null() || cap < n {
        return Err(Failure(BtStatus::BufferTooSmall, format!("need {n} bytes, have {cap}")));
    }
    // SAFETY: buf holds at least cap >= n bytes
    unsafe {
        ptr::copy_nonoverlapping(s.as_ptr(), buf.cast::<u8>(), s.len());
        *buf.add(s.len()) = 0;
    }
    Ok(())
}

fn fix(lat_deg: f64, lon_deg: f64, alt_m: f64) -> Result<GeoFix, Failure> {
    let f = GeoFix::new(lat_deg, lon_deg, alt_m);
    f.validate().map_err(|e| invalid(e.to_string()))?;
    Ok(f)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message (empty after a success).
#[no_mangle]
pub extern "C" fn bt_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> BtStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    match write_str(&msg, buf, cap, needed) {
        Ok(()) => BtStatus::Ok,
        Err(Failure(code, _)) => code,
    }
}

// ---- stateless helpers -------------------------------------------------

/// WGS-84 geodetic to ECEF metres; `xyz` receives three values.
#[no_mangle]
pub extern "C" fn bt_geodetic_to_ecef(lat_deg: f64, lon_deg: f64, alt_m: f64, xyz: *mut f64) -> BtStatus {
    guard(|| {
        if xyz.is_null() {
            return Err(Failure(BtStatus::NullArgument, "xyz is null".into()));
        }
        let p = geodesy::geodetic_to_ecef(&fix(lat_deg, lon_deg, alt_m)?).map_err(|e| invalid(e.to_string()))?;
        // SAFETY: caller provides room for three doubles
        unsafe { ptr::copy_nonoverlapping([p.x_m, p.y_m, p.z_m].as_ptr(), xyz, 3) };
        Ok(())
    })
}

/// East/north/up of `to` in the tangent frame at `from`; `enu` receives three values.
#[no_mangle]
pub extern "C" fn bt_enu_between(
    from_lat: f64,
    from_lon: f64,
    from_alt: f64,
    to_lat: f64,
    to_lon: f64,
    to_alt: f64,
    enu: *mut f64,
) -> BtStatus {
    guard(|| {
        if enu.is_null() {
            return Err(Failure(BtStatus::NullArgument, "enu is null".into()));
        }
        let v =
            geodesy::enu_between(&fix(from_lat, from_lon, from_alt)?, &fix(to_lat, to_lon, to_alt)?).map_err(|e| invalid(e.to_string()))?;
        // SAFETY: caller provides room for three doubles
        unsafe { ptr::copy_nonoverlapping([v.e_m, v.n_m, v.u_m].as_ptr(), enu, 3) };
        Ok(())
    })
}

/// Line-of-sight bearing (degrees clockwise from north) and elevation.
#[no_mangle]
pub extern "C" fn bt_bearing_elevation(
    from_lat: f64,
    from_lon: f64,
    from_alt: f64,
    to_lat: f64,
    to_lon: f64,
    to_alt: f64,
    yaw_deg: *mut f64,
    pitch_deg: *mut f64,
) -> BtStatus {
    guard(|| {
        let (y, p) = (nonnull(yaw_deg, "yaw_deg")?, nonnull(pitch_deg, "pitch_deg")?);
        let los = geodesy::bearing_elevation(&fix(from_lat, from_lon, from_alt)?, &fix(to_lat, to_lon, to_alt)?)
            .map_err(|e| invalid(e.to_string()))?;
        (*y, *p) = (los.yaw_deg, los.pitch_deg);
        Ok(())
    })
}

/// Great-circle angle between a boresight and a line of sight, degrees.
#[no_mangle]
pub extern "C" fn bt_pointing_error_deg(mount_yaw: f64, mount_pitch: f64, los_yaw: f64, los_pitch: f64) -> f64 {
    pointing::pointing_error_deg((mount_yaw, mount_pitch), &LosAngles::new(los_yaw, los_pitch))
}

/// Gain of the default horn antenna at an off-axis angle, dBi.
#[no_mangle]
pub extern "C" fn bt_antenna_gain_dbi(offaxis_deg: f64) -> f64 {
    pointing::gain_dbi(&AntennaPattern::default(), offaxis_deg)
}

/// Clock offset (server minus client) and round-trip delay from one
/// four-timestamp exchange.
#[no_mangle]
pub extern "C" fn bt_sync_offset(t1: i64, t2: i64, t3: i64, t4: i64, offset_ns: *mut i64, delay_ns: *mut i64) -> BtStatus {
    guard(|| {
        let (o, d) = (nonnull(offset_ns, "offset_ns")?, nonnull(delay_ns, "delay_ns")?);
        (*o, *d) = sync_offset(&SyncSample { t1, t2, t3, t4 }).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}

/// Writes the ±1 chips of the default m-sequence with `stages` stages.
/// `len` always receives the period; `chips` may be null to query it.
#[no_mangle]
pub extern "C" fn bt_pn_sequence(stages: u32, chips: *mut i8, cap: usize, len: *mut usize) -> BtStatus {
    guard(|| {
        let cfg = PnConfig::with_stages(stages).ok_or_else(|| invalid(format!("no default taps for {stages} stages")))?;
        let seq = pn_sequence(&cfg).map_err(|e| invalid(e.to_string()))?;
        *nonnull(len, "len")? = seq.len();
        if chips.is_null() || cap < seq.len() {
            return Err(Failure(BtStatus::BufferTooSmall, format!("need {} chips, have {cap}", seq.len())));
        }
        // SAFETY: chips holds at least cap >= seq.len() bytes
        unsafe { ptr::copy_nonoverlapping(seq.as_ptr(), chips, seq.len()) };
        Ok(())
    })
}

/// Time-dilation factor of the default sounder configuration.
#[no_mangle]
pub extern "C" fn bt_slide_factor(out: *mut f64) -> BtStatus {
    guard(|| {
        *nonnull(out, "out")? = slide_factor(&PnConfig::default()).map_err(|e| invalid(e.to_string()))?;
        Ok(())
    })
}

// ---- scenarios -----------------------------------------------------------

/// Runs a scenario file in virtual time, writes its outputs under
/// `out_dir` and copies the stats report (JSON) into `buf`.
#[no_mangle]
pub extern "C" fn bt_run_scenario(
    scenario_path: *const c_char,
    out_dir: *const c_char,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> BtStatus {
    guard(|| {
        let sc = Scenario::load(Path::new(cstr(scenario_path, "scenario_path")?))?;
        let out = orchestrator::run_scenario(&sc, Path::new(cstr(out_dir, "out_dir")?))?;
        let json = serde_json::to_string(&out.stats).map_err(|e| Failure(BtStatus::Parse, e.to_string()))?;
        write_str(&json, buf, cap, needed)
    })
}

/// Builds a world from a scenario file. `out_dir` may be null, in which
/// case recorded segments are not written to disk.
#[no_mangle]
pub extern "C" fn bt_world_new(scenario_path: *const c_char, out_dir: *const c_char, world: *mut *mut BtWorld) -> BtStatus {
    guard(|| {
        let slot = nonnull(world, "world")?;
        *slot = ptr::null_mut();
        let sc = Scenario::load(Path::new(cstr(scenario_path, "scenario_path")?))?;
        let out = if out_dir.is_null() { None } else { Some(Path::new(cstr(out_dir, "out_dir")?)) };
        let inner = World::new(&sc, out)?;
        *slot = Box::into_raw(Box::new(BtWorld { inner }));
        Ok(())
    })
}

/// Releases a world; null is ignored.
#[no_mangle]
pub extern "C" fn bt_world_free(world: *mut BtWorld) {
    if !world.is_null() {
        // SAFETY: produced by Box::into_raw in bt_world_new and not yet freed
        drop(unsafe { Box::from_raw(world) });
    }
}

/// Processes every event due at or before `t_ns` (simulated nanoseconds).
#[no_mangle]
pub extern "C" fn bt_world_step_until(world: *mut BtWorld, t_ns: i64) -> BtStatus {
    guard(|| Ok(nonnull(world, "world")?.inner.step_until(t_ns)?))
}

/// Runs to the end of the scenario.
#[no_mangle]
pub extern "C" fn bt_world_run(world: *mut BtWorld) -> BtStatus {
    guard(|| Ok(nonnull(world, "world")?.inner.run()?))
}

#[no_mangle]
pub extern "C" fn bt_world_now_ns(world: *mut BtWorld, t_ns: *mut i64) -> BtStatus {
    guard(|| {
        *nonnull(t_ns, "t_ns")? = nonnull(world, "world")?.inner.now_ns();
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn bt_world_status(world: *mut BtWorld, status: *mut BtRunStatus) -> BtStatus {
    guard(|| {
        *nonnull(status, "status")? = match nonnull(world, "world")?.inner.status() {
            RunStatus::Idle => BtRunStatus::Idle,
            RunStatus::Running => BtRunStatus::Running,
            RunStatus::Finished => BtRunStatus::Finished,
        };
        Ok(())
    })
}

/// Copies the operator state snapshot (JSON).
#[no_mangle]
pub extern "C" fn bt_world_snapshot(world: *mut BtWorld, buf: *mut c_char, cap: usize, needed: *mut usize) -> BtStatus {
    guard(|| {
        let snap = nonnull(world, "world")?.inner.snapshot().to_string();
        write_str(&snap, buf, cap, needed)
    })
}

/// Submits an operator command or fault given as JSON, e.g.
/// `{"target":"rx","action":"recalibrate"}`; the command id is copied out.
#[no_mangle]
pub extern "C" fn bt_world_submit(
    world: *mut BtWorld,
    command_json: *const c_char,
    buf: *mut c_char,
    cap: usize,
    needed: *mut usize,
) -> BtStatus {
    guard(|| {
        let w = nonnull(world, "world")?;
        let body: serde_json::Value =
            serde_json::from_str(cstr(command_json, "command_json")?).map_err(|e| Failure(BtStatus::Parse, e.to_string()))?;
        let cmd = ApiCommand::parse(&body).map_err(invalid)?;
        let id = w.inner.submit(cmd)?;
        write_str(&id, buf, cap, needed)
    })
}
