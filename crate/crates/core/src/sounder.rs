//! Sliding-correlator channel sounder synthesis.
//!
//! The correlator output is generated directly in dilated time: every tap
//! shows up as a triangular PN autocorrelation peak, stretched by the slide
//! factor, repeating once per sweep.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{bearing_elevation, distance_3d, GeoError, GeoFix};
use crate::pointing::{gain_dbi, pointing_error_deg, AntennaPattern};
use crate::rng::SimRng;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const SEGMENT_SAMPLES: usize = 1_000_000;
pub const SAMPLE_RATE_HZ: f64 = 2.0e6;
pub const CENTER_FREQ_HZ: f64 = 2.5e9;
pub const SEGMENT_BYTES: u64 = SEGMENT_SAMPLES as u64 * 8;

#[derive(Debug, Error)]
pub enum SounderError {
    #[error("taps {taps:?} do not give a maximal-length sequence for n={n}")]
    NotMaximal { n: u32, taps: Vec<u32> },
    #[error("PN stages must be in 2..=24, got {0}")]
    Stages(u32),
    #[error("tx chip rate must exceed rx chip rate (alpha={alpha}, beta={beta})")]
    ChipRates { alpha: f64, beta: f64 },
    #[error("invalid segment metadata: {0}")]
    Meta(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Known primitive feedback taps per register length.
pub fn default_taps(n: u32) -> Option<Vec<u32>> {
    let taps: &[u32] = match n {
        3 => &[3, 2],
        4 => &[4, 3],
        5 => &[5, 3],
        6 => &[6, 5],
        7 => &[7, 6],
        8 => &[8, 6, 5, 4],
        9 => &[9, 5],
        10 => &[10, 7],
        11 => &[11, 9],
        _ => return None,
    };
    Some(taps.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PnConfig {
    pub stages: u32,
    pub taps: Vec<u32>,
    pub tx_chip_rate_hz: f64,
    pub rx_chip_rate_hz: f64,
}

impl Default for PnConfig {
    fn default() -> Self {
        Self { stages: 11, taps: vec![11, 9], tx_chip_rate_hz: 4.0e8, rx_chip_rate_hz: 3.9995e8 }
    }
}

impl PnConfig {
    pub fn with_stages(n: u32) -> Option<Self> {
        Some(Self { stages: n, taps: default_taps(n)?, ..Self::default() })
    }

    pub fn length(&self) -> usize {
        (1usize << self.stages) - 1
    }

    /// Dilated samples per chip: half-width of the correlation triangle.
    pub fn chip_samples(&self, sample_rate_hz: f64) -> Result<f64, SounderError> {
        Ok(slide_factor(self)? * sample_rate_hz / self.tx_chip_rate_hz)
    }

    /// Samples per PDP sweep, L * gamma / alpha * fs.
    pub fn sweep_samples(&self, sample_rate_hz: f64) -> Result<f64, SounderError> {
        Ok(self.length() as f64 * self.chip_samples(sample_rate_hz)?)
    }
}

/// Fibonacci LFSR from the all-ones state, output bit mapped 0 -> +1, 1 -> -1.
pub fn pn_sequence(cfg: &PnConfig) -> Result<Vec<i8>, SounderError> {
    let n = cfg.stages;
    if !(2..=24).contains(&n) {
        return Err(SounderError::Stages(n));
    }
    let bad = || SounderError::NotMaximal { n, taps: cfg.taps.clone() };
    if !cfg.taps.contains(&n) || cfg.taps.iter().any(|&t| t == 0 || t > n) {
        return Err(bad());
    }
    let mask: u32 = cfg.taps.iter().fold(0, |m, &t| m | 1 << (t - 1));
    let full = (1u32 << n) - 1;
    let len = full as usize;
    let start = full;
    let mut state = start;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        out.push(if state >> (n - 1) & 1 == 0 { 1 } else { -1 });
        let fb = (state & mask).count_ones() & 1;
        state = ((state << 1) | fb) & full;
        if state == start && i + 1 < len {
            return Err(bad());
        }
    }
    if state != start {
        return Err(bad());
    }
    Ok(out)
}

/// Circular autocorrelation at every lag.
pub fn circular_autocorrelation(chips: &[i8]) -> Vec<i64> {
    let l = chips.len();
    (0..l).map(|k| (0..l).map(|i| chips[i] as i64 * chips[(i + k) % l] as i64).sum()).collect()
}

pub fn slide_factor(cfg: &PnConfig) -> Result<f64, SounderError> {
    let (a, b) = (cfg.tx_chip_rate_hz, cfg.rx_chip_rate_hz);
    if !(a > b && b > 0.0) {
        return Err(SounderError::ChipRates { alpha: a, beta: b });
    }
    Ok(a / (a - b))
}

/// Free-space path loss in dB.
pub fn fspl_db(distance_m: f64, freq_hz: f64) -> f64 {
    20.0 * (4.0 * PI * distance_m * freq_hz / SPEED_OF_LIGHT).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelTap {
    pub delay_s: f64,
    /// Received power of the tap, dBm.
    pub gain_db: f64,
    pub phase_rad: f64,
}

/// A point scatterer that adds one specular path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflector {
    pub position: GeoFix,
    pub loss_db: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scene {
    pub tx_power_dbm: f64,
    pub reflectors: Vec<Reflector>,
}

/// One end of the link: position, world-frame boresight (yaw, pitch) and horn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Terminal {
    pub fix: GeoFix,
    pub boresight: (f64, f64),
    pub pattern: AntennaPattern,
}

fn path_tap(tx: &Terminal, rx: &Terminal, via: Option<&Reflector>, scene: &Scene, f_hz: f64) -> Result<ChannelTap, GeoError> {
    let first = via.map_or(rx.fix, |r| r.position);
    let last = via.map_or(tx.fix, |r| r.position);
    let d = match via {
        None => distance_3d(&tx.fix, &rx.fix)?,
        Some(r) => distance_3d(&tx.fix, &r.position)? + distance_3d(&r.position, &rx.fix)?,
    };
    let theta_t = pointing_error_deg(tx.boresight, &bearing_elevation(&tx.fix, &first)?);
    let theta_r = pointing_error_deg(rx.boresight, &bearing_elevation(&rx.fix, &last)?);
    let loss = via.map_or(0.0, |r| r.loss_db);
    let gain_db = scene.tx_power_dbm + gain_dbi(&tx.pattern, theta_t) + gain_dbi(&rx.pattern, theta_r) - fspl_db(d, f_hz) - loss;
    let carrier_phase = -2.0 * PI * (d * f_hz / SPEED_OF_LIGHT).fract();
    let phase_rad = (carrier_phase + if via.is_some() { PI } else { 0.0 }).rem_euclid(2.0 * PI);
    Ok(ChannelTap { delay_s: d / SPEED_OF_LIGHT, gain_db, phase_rad })
}

/// Line-of-sight tap plus one tap per scene reflector, sorted by delay.
pub fn channel_taps(tx: &Terminal, rx: &Terminal, scene: &Scene, f_hz: f64) -> Result<Vec<ChannelTap>, GeoError> {
    let mut taps = vec![path_tap(tx, rx, None, scene, f_hz)?];
    for r in &scene.reflectors {
        taps.push(path_tap(tx, rx, Some(r), scene, f_hz)?);
    }
    taps.sort_by(|a, b| a.delay_s.total_cmp(&b.delay_s));
    Ok(taps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub node_id: String,
    pub seq: u64,
    pub t_start_ns: i64,
    pub sample_rate_hz: f64,
    pub center_freq_hz: f64,
    pub gain_db: u32,
    pub n_samples: usize,
}

impl SegmentMeta {
    pub fn new(node_id: &str, seq: u64, t_start_ns: i64, gain_db: u32) -> Self {
        Self {
            node_id: node_id.to_string(),
            seq,
            t_start_ns,
            sample_rate_hz: SAMPLE_RATE_HZ,
            center_freq_hz: CENTER_FREQ_HZ,
            gain_db,
            n_samples: SEGMENT_SAMPLES,
        }
    }

    pub fn validate(&self) -> Result<(), SounderError> {
        let bad = |m: &str| Err(SounderError::Meta(m.to_string()));
        if self.n_samples != SEGMENT_SAMPLES {
            return bad("n_samples must be 1000000");
        }
        if self.sample_rate_hz != SAMPLE_RATE_HZ {
            return bad("sample_rate_hz must be 2e6");
        }
        if self.center_freq_hz != CENTER_FREQ_HZ {
            return bad("center_freq_hz must be 2.5e9");
        }
        if !matches!(self.gain_db, 0 | 76) {
            return bad("gain_db must be 0 or 76");
        }
        if self.node_id.is_empty() || self.node_id.contains(['/', '\\']) {
            return bad("node_id must be a plain name");
        }
        Ok(())
    }

    pub fn duration_ns(&self) -> i64 {
        (self.n_samples as f64 / self.sample_rate_hz * 1e9).round() as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IqSegment {
    pub samples: Vec<Complex32>,
    pub meta: SegmentMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SounderConfig {
    pub pn: PnConfig,
    pub carrier_hz: f64,
    /// Complex noise power per sample at the correlator output; `None` for a
    /// noiseless synthesis.
    pub noise_floor_dbm: Option<f64>,
    pub pattern: AntennaPattern,
    pub scene: Scene,
}

impl Default for SounderConfig {
    fn default() -> Self {
        Self {
            pn: PnConfig::default(),
            carrier_hz: 28e9,
            noise_floor_dbm: Some(-90.0),
            pattern: AntennaPattern::default(),
            scene: Scene::default(),
        }
    }
}

impl SounderConfig {
    pub fn validate(&self) -> Result<(), SounderError> {
        pn_sequence(&self.pn)?;
        slide_factor(&self.pn)?;
        Ok(())
    }
}

fn db_to_mw(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Correlator output for one segment. Sample `i` sits at absolute sample
/// index `t_start * fs + i` so consecutive segments continue the same sweep
/// phase. The front-end gain scales signal and noise alike. Returns the
/// samples and whether a full sweep fits in the segment.
pub fn correlator_output(
    pn: &PnConfig,
    taps: &[ChannelTap],
    meta: &SegmentMeta,
    noise_floor_dbm: Option<f64>,
    rng: &mut SimRng,
) -> Result<(Vec<Complex32>, bool), SounderError> {
    let fs = meta.sample_rate_hz;
    let gamma = slide_factor(pn)?;
    let h = pn.chip_samples(fs)?;
    let period = pn.sweep_samples(fs)?;
    let n = meta.n_samples;
    let origin = (meta.t_start_ns as f64 * 1e-9 * fs).rem_euclid(period);
    let mut acc = vec![num_complex::Complex64::new(0.0, 0.0); n];
    for tap in taps {
        let amp = db_to_mw(tap.gain_db).sqrt();
        let rot = num_complex::Complex64::from_polar(amp, tap.phase_rad);
        let offset = gamma * tap.delay_s * fs;
        let mut c = (offset - origin).rem_euclid(period) - period;
        while c - h < n as f64 {
            let lo = (c - h).ceil().max(0.0) as usize;
            let hi = ((c + h).floor() as i64).min(n as i64 - 1);
            for i in lo as i64..=hi {
                let w = 1.0 - (i as f64 - c).abs() / h;
                if w > 0.0 {
                    acc[i as usize] += rot * w;
                }
            }
            c += period;
        }
    }
    let scale = db_to_mw(meta.gain_db as f64).sqrt();
    let sigma = noise_floor_dbm.map(|p| (db_to_mw(p) / 2.0).sqrt());
    let samples = acc
        .into_iter()
        .map(|mut z| {
            if let Some(s) = sigma {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                z += num_complex::Complex64::new(s * re, s * im);
            }
            Complex32::new((z.re * scale) as f32, (z.im * scale) as f32)
        })
        .collect();
    Ok((samples, period <= n as f64))
}

pub fn synthesize_segment(
    cfg: &SounderConfig,
    taps: &[ChannelTap],
    meta: SegmentMeta,
    rng: &mut SimRng,
) -> Result<IqSegment, SounderError> {
    meta.validate()?;
    let (samples, full_sweep) = correlator_output(&cfg.pn, taps, &meta, cfg.noise_floor_dbm, rng)?;
    if !full_sweep {
        log::warn!("sweep longer than segment {}/{}", meta.node_id, meta.seq);
    }
    Ok(IqSegment { samples, meta })
}

pub fn segment_paths(root: &Path, node_id: &str, seq: u64) -> (PathBuf, PathBuf) {
    let dir = root.join(node_id);
    (dir.join(format!("{seq}.iq")), dir.join(format!("{seq}.meta.json")))
}

/// Writes `<root>/<node>/<seq>.iq` (interleaved f32 LE I/Q) and its sidecar.
pub fn record_segment(root: &Path, seg: &IqSegment) -> Result<PathBuf, SounderError> {
    seg.meta.validate()?;
    if seg.samples.len() != seg.meta.n_samples {
        return Err(SounderError::Meta(format!("{} samples, expected {}", seg.samples.len(), seg.meta.n_samples)));
    }
    let (iq, meta) = segment_paths(root, &seg.meta.node_id, seg.meta.seq);
    fs::create_dir_all(iq.parent().expect("segment path has a parent"))?;
    let mut w = BufWriter::new(fs::File::create(&iq)?);
    for z in &seg.samples {
        w.write_all(&z.re.to_le_bytes())?;
        w.write_all(&z.im.to_le_bytes())?;
    }
    w.flush()?;
    fs::write(&meta, serde_json::to_vec_pretty(&seg.meta)?)?;
    Ok(iq)
}

pub fn read_iq(path: &Path) -> Result<Vec<Complex32>, SounderError> {
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(SounderError::Meta(format!("{}: length {} is not a whole number of samples", path.display(), bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex32::new(re, im)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_abs_diff_eq;

    #[test]
    fn short_sequence_is_balanced() {
        let s = pn_sequence(&PnConfig::with_stages(3).unwrap()).unwrap();
        assert_eq!(s.len(), 7);
        let plus = s.iter().filter(|&&c| c == 1).count();
        assert!(plus == 3 || plus == 4);
    }

    #[test]
    fn non_maximal_taps_are_rejected() {
        let cfg = PnConfig { stages: 4, taps: vec![4, 2], ..PnConfig::default() };
        assert!(matches!(pn_sequence(&cfg), Err(SounderError::NotMaximal { .. })));
        let cfg = PnConfig { stages: 4, taps: vec![3], ..PnConfig::default() };
        assert!(pn_sequence(&cfg).is_err());
    }

    #[test]
    fn slide_factor_examples() {
        assert_abs_diff_eq!(slide_factor(&PnConfig::default()).unwrap(), 8000.0, epsilon = 1e-6);
        let half = PnConfig { rx_chip_rate_hz: 2.0e8, ..PnConfig::default() };
        assert_eq!(slide_factor(&half).unwrap(), 2.0);
        let bad = PnConfig { rx_chip_rate_hz: 4.0e8, ..PnConfig::default() };
        assert!(slide_factor(&bad).is_err());
        assert_abs_diff_eq!(PnConfig::default().sweep_samples(SAMPLE_RATE_HZ).unwrap(), 81_880.0, epsilon = 1e-3);
    }

    #[test]
    fn single_tap_peaks_once_per_sweep() {
        let pn = PnConfig::default();
        let taps = [ChannelTap { delay_s: 0.0, gain_db: -60.0, phase_rad: 0.0 }];
        let meta = SegmentMeta::new("rx", 0, 0, 0);
        let (s, full) = correlator_output(&pn, &taps, &meta, None, &mut rng::stream(1, 1)).unwrap();
        assert!(full);
        let peaks: Vec<usize> = (0..s.len()).filter(|&i| s[i].norm_sqr() > 0.99e-6).collect();
        assert_eq!(&peaks[..3], &[0, 81_880, 163_760]);
        assert_eq!(peaks.len(), 13);
    }
}
