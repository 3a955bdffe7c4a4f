//! Post-processing of recorded sounder segments: PDP extraction and cleanup,
//! calibrated received power, geo-coupling with telemetry, GeoJSON export.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex32;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::controller::TelemetryMessage;
use crate::geodesy::{distance_3d, GeoFix};
use crate::rng;
use crate::sounder::{self, ChannelTap, PnConfig, SegmentMeta, SounderConfig, SounderError, SEGMENT_BYTES};

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("calibration has no entry for gain {0} dB")]
    MissingGain(u32),
    #[error(transparent)]
    Sounder(#[from] SounderError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocConfig {
    /// Moving-average length of the power pre-filter.
    pub filter_len: usize,
    /// Bins kept either side of each sweep peak.
    pub half_span: usize,
    pub tukey_alpha: f64,
    /// Retained bins must exceed the noise floor by this much.
    pub threshold_db: f64,
    pub rx_match_ns: i64,
    pub tx_match_ns: i64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self { filter_len: 5, half_span: 2048, tukey_alpha: 0.25, threshold_db: 10.0, rx_match_ns: 100_000_000, tx_match_ns: 1_000_000_000 }
    }
}

/// A cleaned power-delay profile: linear power (mW at the recorder input)
/// over dilated-time bins, zero where noise was eliminated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pdp {
    pub bins_mw: Vec<f64>,
    pub bin_dt_s: f64,
    /// Time of the first bin.
    pub t_start_ns: i64,
    /// Index of the sweep peak within `bins_mw`.
    pub peak_bin: usize,
    pub floor_mw: f64,
    pub noise_only: bool,
}

impl Pdp {
    pub fn bins_dbm(&self) -> Vec<f64> {
        self.bins_mw.iter().map(|p| 10.0 * p.log10()).collect()
    }

    pub fn peak_t_ns(&self) -> i64 {
        self.t_start_ns + (self.peak_bin as f64 * self.bin_dt_s * 1e9).round() as i64
    }
}

/// Centered moving average; the window shrinks at the edges.
pub fn moving_average(x: &[f64], len: usize) -> Vec<f64> {
    let len = len.max(1);
    let before = (len - 1) / 2;
    let after = len - 1 - before;
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(before);
            let hi = (i + after + 1).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Tukey window of length `n`; `alpha` is the tapered fraction.
pub fn tukey(n: usize, alpha: f64) -> Vec<f64> {
    if n <= 1 || alpha <= 0.0 {
        return vec![1.0; n];
    }
    let m = (n - 1) as f64;
    let edge = alpha * m / 2.0;
    (0..n)
        .map(|i| {
            let x = i as f64;
            let d = x.min(m - x);
            if d >= edge {
                1.0
            } else {
                0.5 * (1.0 - (std::f64::consts::PI * d / edge).cos())
            }
        })
        .collect()
}

/// Median of the lowest quarter of the values.
pub fn noise_floor(bins: &[f64]) -> f64 {
    let mut v = bins.to_vec();
    v.sort_by(f64::total_cmp);
    let q = (v.len() / 4).max(1).min(v.len());
    let low = &v[..q];
    if low.is_empty() {
        return 0.0;
    }
    if q % 2 == 1 {
        low[q / 2]
    } else {
        (low[q / 2 - 1] + low[q / 2]) / 2.0
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Splits a segment into cleaned PDPs, one per complete sweep.
pub fn process_segment(samples: &[Complex32], meta: &SegmentMeta, pn: &PnConfig, cfg: &PostprocConfig) -> Result<Vec<Pdp>, PostprocError> {
    let fs = meta.sample_rate_hz;
    let period = pn.sweep_samples(fs)?;
    let power: Vec<f64> = samples.iter().map(|z| z.norm_sqr() as f64).collect();
    let y = moving_average(&power, cfg.filter_len);
    let n = y.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let first = &y[..(period.ceil() as usize).min(n)];
    let anchor = argmax(first) as f64;
    let window = tukey(2 * cfg.half_span + 1, cfg.tukey_alpha);
    let gate = 10f64.powf(cfg.threshold_db / 10.0);
    let mut out = Vec::new();
    let mut k = 0.0;
    loop {
        let centre = anchor + k * period;
        k += 1.0;
        let lo = (centre - period / 2.0).ceil().max(0.0) as usize;
        if lo >= n {
            break;
        }
        let hi = ((centre + period / 2.0).ceil() as usize).min(n);
        let peak = lo + argmax(&y[lo..hi]);
        if peak < cfg.half_span || peak + cfg.half_span >= n {
            continue;
        }
        let start = peak - cfg.half_span;
        let span = &y[start..=peak + cfg.half_span];
        // the tapered edges would drag a post-window estimate toward zero
        let floor = noise_floor(span);
        let mut bins: Vec<f64> = span.iter().zip(&window).map(|(p, w)| p * w * w).collect();
        let threshold = floor * gate;
        let peak_bin = cfg.half_span;
        let noise_only = !(bins[peak_bin] > 0.0 && bins[peak_bin] >= threshold);
        for b in bins.iter_mut() {
            if noise_only || *b < threshold {
                *b = 0.0;
            }
        }
        out.push(Pdp {
            bins_mw: bins,
            bin_dt_s: 1.0 / fs,
            t_start_ns: meta.t_start_ns + (start as f64 / fs * 1e9).round() as i64,
            peak_bin,
            floor_mw: floor,
            noise_only,
        });
    }
    Ok(out)
}

/// Energy, in bin-seconds, of a unit-power tap's correlation peak: the sum
/// of the sampled squared triangle times the bin width.
pub fn sweep_energy_normalization(pn: &PnConfig, sample_rate_hz: f64) -> Result<f64, PostprocError> {
    let h = pn.chip_samples(sample_rate_hz)?;
    let reach = h.ceil() as i64;
    let e: f64 = (-reach..=reach).map(|d| (1.0 - d.abs() as f64 / h).max(0.0).powi(2)).sum();
    Ok(e / sample_rate_hz)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Offset added to the raw power for each front-end gain.
    pub offsets_db: BTreeMap<u32, f64>,
    /// Injected power of the reference segment used to derive the offsets.
    #[serde(default)]
    pub reference_dbm: Option<f64>,
}

impl Calibration {
    /// Offsets that exactly undo the nominal front-end gain.
    pub fn nominal() -> Self {
        Self { offsets_db: [(0, 0.0), (76, -76.0)].into_iter().collect(), reference_dbm: None }
    }

    pub fn identity() -> Self {
        Self { offsets_db: [(0, 0.0), (76, 0.0)].into_iter().collect(), reference_dbm: None }
    }

    pub fn offset(&self, gain_db: u32) -> Result<f64, PostprocError> {
        self.offsets_db.get(&gain_db).copied().ok_or(PostprocError::MissingGain(gain_db))
    }

    pub fn load(path: &Path) -> Result<Self, PostprocError> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "dbm")]
pub enum PowerReading {
    Dbm(f64),
    BelowSensitivity,
}

impl PowerReading {
    pub fn dbm(self) -> Option<f64> {
        match self {
            PowerReading::Dbm(v) => Some(v),
            PowerReading::BelowSensitivity => None,
        }
    }
}

pub fn received_power_dbm(pdp: &Pdp, cal: &Calibration, gain_db: u32, norm_s: f64) -> Result<PowerReading, PostprocError> {
    let offset = cal.offset(gain_db)?;
    if pdp.noise_only {
        return Ok(PowerReading::BelowSensitivity);
    }
    let energy: f64 = pdp.bins_mw.iter().sum::<f64>() * pdp.bin_dt_s;
    if energy <= 0.0 {
        return Ok(PowerReading::BelowSensitivity);
    }
    Ok(PowerReading::Dbm(10.0 * (energy / norm_s).log10() + offset))
}

/// Local maxima of the retained bins at least `min_sep` bins apart,
/// strongest first. Returns (bin, power).
pub fn detect_peaks(pdp: &Pdp, min_sep: usize) -> Vec<(usize, f64)> {
    let b = &pdp.bins_mw;
    let mut cands: Vec<(usize, f64)> = (0..b.len())
        .filter(|&i| b[i] > 0.0 && (i == 0 || b[i] >= b[i - 1]) && (i + 1 == b.len() || b[i] > b[i + 1]))
        .map(|i| (i, b[i]))
        .collect();
    cands.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut kept: Vec<(usize, f64)> = Vec::new();
    for c in cands {
        if kept.iter().all(|k| k.0.abs_diff(c.0) > min_sep) {
            kept.push(c);
        }
    }
    kept
}

/// Derives per-gain offsets by running a noiseless reference tap through
/// the chain at every gain setting.
pub fn calibrate(sounder_cfg: &SounderConfig, cfg: &PostprocConfig, reference_dbm: f64) -> Result<Calibration, PostprocError> {
    let tap = [ChannelTap { delay_s: 0.0, gain_db: reference_dbm, phase_rad: 0.0 }];
    let norm = sweep_energy_normalization(&sounder_cfg.pn, sounder::SAMPLE_RATE_HZ)?;
    let identity = Calibration::identity();
    let mut offsets_db = BTreeMap::new();
    for gain in [0u32, 76] {
        let meta = SegmentMeta::new("cal", 0, 0, gain);
        let (samples, _) = sounder::correlator_output(&sounder_cfg.pn, &tap, &meta, None, &mut rng::stream(0, 0))?;
        let pdps = process_segment(&samples, &meta, &sounder_cfg.pn, cfg)?;
        let vals: Vec<f64> = pdps.iter().filter_map(|p| received_power_dbm(p, &identity, gain, norm).ok()?.dbm()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        offsets_db.insert(gain, reference_dbm - mean);
    }
    Ok(Calibration { offsets_db, reference_dbm: Some(reference_dbm) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub message: String,
}

impl Diagnostic {
    fn new(kind: &str, path: Option<&Path>, message: impl Into<String>) -> Self {
        Self { kind: kind.into(), path: path.map(|p| p.display().to_string()), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexedSegment {
    pub meta: SegmentMeta,
    pub iq_path: PathBuf,
    pub meta_path: PathBuf,
}

fn sidecars(dir: &Path, out: &mut Vec<PathBuf>, depth: usize) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() && depth > 0 {
            sidecars(&p, out, depth - 1)?;
        } else if p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".meta.json")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Finds `<node>/<seq>.meta.json` sidecars with their `.iq` files, ordered
/// by start time. Invalid entries are skipped with a diagnostic; for a
/// repeated (node, seq) the lexicographically later path wins.
pub fn index_segments(dir: &Path) -> Result<(Vec<IndexedSegment>, Vec<Diagnostic>), PostprocError> {
    let mut paths = Vec::new();
    if dir.exists() {
        sidecars(dir, &mut paths, 1)?;
    }
    paths.sort();
    let mut diags = Vec::new();
    let mut by_key: BTreeMap<(String, u64), IndexedSegment> = BTreeMap::new();
    for meta_path in paths {
        let meta: SegmentMeta = match fs::read(&meta_path).map_err(PostprocError::from).and_then(|b| Ok(serde_json::from_slice(&b)?)) {
            Ok(m) => m,
            Err(e) => {
                diags.push(Diagnostic::new("corrupt_sidecar", Some(&meta_path), e.to_string()));
                continue;
            }
        };
        if let Err(e) = meta.validate() {
            diags.push(Diagnostic::new("corrupt_sidecar", Some(&meta_path), e.to_string()));
            continue;
        }
        let name = meta_path.file_name().unwrap().to_string_lossy();
        let iq_path = meta_path.with_file_name(format!("{}.iq", name.trim_end_matches(".meta.json")));
        match fs::metadata(&iq_path) {
            Ok(m) if m.len() == SEGMENT_BYTES => {}
            Ok(m) => {
                diags.push(Diagnostic::new("bad_segment", Some(&iq_path), format!("{} bytes, expected {SEGMENT_BYTES}", m.len())));
                continue;
            }
            Err(e) => {
                diags.push(Diagnostic::new("missing_segment", Some(&iq_path), e.to_string()));
                continue;
            }
        }
        let key = (meta.node_id.clone(), meta.seq);
        if let Some(prev) = by_key.get(&key) {
            diags.push(Diagnostic::new(
                "duplicate_seq",
                Some(&meta_path),
                format!("replaces {} for {}/{}", prev.meta_path.display(), key.0, key.1),
            ));
        }
        by_key.insert(key, IndexedSegment { meta, iq_path, meta_path });
    }
    let mut index: Vec<IndexedSegment> = by_key.into_values().collect();
    index.sort_by(|a, b| (a.meta.t_start_ns, &a.meta.node_id, a.meta.seq).cmp(&(b.meta.t_start_ns, &b.meta.node_id, b.meta.seq)));
    Ok((index, diags))
}

/// A calibrated PDP power, before geo-coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdpPower {
    pub node_id: String,
    pub seq: u64,
    pub t_ns: i64,
    pub power: PowerReading,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub t_ns: i64,
    pub rx_power_dbm: f64,
    pub fix: GeoFix,
    pub tx_fix: GeoFix,
    pub distance_m: f64,
    pub seq: u64,
}

fn nearest(fixes: &[(i64, GeoFix)], t: i64, tol: i64) -> Option<GeoFix> {
    let i = fixes.partition_point(|(ft, _)| *ft < t);
    [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter_map(|j| fixes.get(j))
        .filter(|(ft, _)| (ft - t).abs() <= tol)
        .min_by_key(|(ft, _)| (ft - t).abs())
        .map(|(_, f)| *f)
}

/// Pairs each PDP with the nearest fix of its own node (RX) and of any other
/// node (TX) within the configured tolerances.
pub fn geo_couple(powers: &[PdpPower], telemetry: &[TelemetryMessage], cfg: &PostprocConfig) -> (Vec<PowerSample>, Vec<Diagnostic>) {
    let mut by_node: BTreeMap<&str, Vec<(i64, GeoFix)>> = BTreeMap::new();
    for m in telemetry {
        by_node.entry(m.node_id.as_str()).or_default().push((m.t_ns, m.fix()));
    }
    for v in by_node.values_mut() {
        v.sort_by_key(|(t, _)| *t);
    }
    let mut samples = Vec::new();
    let mut diags = Vec::new();
    for p in powers {
        let Some(dbm) = p.power.dbm() else {
            diags.push(Diagnostic::new("below_sensitivity", None, format!("{}/{} at {}", p.node_id, p.seq, p.t_ns)));
            continue;
        };
        let rx = by_node.get(p.node_id.as_str()).and_then(|f| nearest(f, p.t_ns, cfg.rx_match_ns));
        let tx = by_node
            .iter()
            .filter(|(n, _)| **n != p.node_id)
            .filter_map(|(_, f)| nearest(f, p.t_ns, cfg.tx_match_ns))
            .min_by_key(|f| (f.t_ns - p.t_ns).abs());
        match (rx, tx) {
            (Some(fix), Some(tx_fix)) => {
                let distance_m = distance_3d(&fix, &tx_fix).unwrap_or(f64::NAN);
                samples.push(PowerSample { t_ns: p.t_ns, rx_power_dbm: dbm, fix, tx_fix, distance_m, seq: p.seq });
            }
            (rx, _) => {
                let which = if rx.is_none() { "rx" } else { "tx" };
                diags.push(Diagnostic::new("unmatched", None, format!("{}/{} at {}: no {which} fix in range", p.node_id, p.seq, p.t_ns)));
            }
        }
    }
    (samples, diags)
}

fn point(f: &GeoFix) -> Value {
    json!({ "type": "Point", "coordinates": [f.lon_deg, f.lat_deg, f.alt_m] })
}

/// FeatureCollection of RX power points plus the TX site as a diamond marker.
pub fn export_geojson(samples: &[PowerSample], tx: Option<&GeoFix>) -> Value {
    let mut features = Vec::with_capacity(samples.len() + 1);
    if let Some(tx) = tx {
        features.push(json!({
            "type": "Feature",
            "geometry": point(tx),
            "properties": { "role": "tx", "marker-symbol": "diamond", "marker-color": "#800080" },
        }));
    }
    for s in samples {
        features.push(json!({
            "type": "Feature",
            "geometry": point(&s.fix),
            "properties": { "rx_power_dbm": s.rx_power_dbm, "t_ns": s.t_ns, "distance_m": s.distance_m, "seq": s.seq },
        }));
    }
    json!({ "type": "FeatureCollection", "features": features })
}

/// Parses a telemetry NDJSON log; unreadable lines become diagnostics.
pub fn read_telemetry(path: &Path) -> Result<(Vec<TelemetryMessage>, Vec<Diagnostic>), PostprocError> {
    let mut msgs = Vec::new();
    let mut diags = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TelemetryMessage>(&line) {
            Ok(m) => msgs.push(m),
            Err(e) => diags.push(Diagnostic::new("bad_telemetry", Some(path), format!("line {}: {e}", i + 1))),
        }
    }
    msgs.sort_by_key(|m| m.t_ns);
    Ok((msgs, diags))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PostprocSummary {
    pub segments: usize,
    pub pdps: usize,
    pub noise_only: usize,
    pub samples: usize,
    pub diagnostics: usize,
    pub mean_rx_power_dbm: Option<f64>,
}

/// Computes calibrated PDP powers for every indexed segment.
pub fn segment_powers(
    index: &[IndexedSegment],
    pn: &PnConfig,
    cal: &Calibration,
    cfg: &PostprocConfig,
) -> Result<(Vec<PdpPower>, Vec<Diagnostic>), PostprocError> {
    let mut out = Vec::new();
    let mut diags = Vec::new();
    for seg in index {
        let samples = match sounder::read_iq(&seg.iq_path) {
            Ok(s) => s,
            Err(e) => {
                diags.push(Diagnostic::new("bad_segment", Some(&seg.iq_path), e.to_string()));
                continue;
            }
        };
        let norm = sweep_energy_normalization(pn, seg.meta.sample_rate_hz)?;
        for pdp in process_segment(&samples, &seg.meta, pn, cfg)? {
            out.push(PdpPower {
                node_id: seg.meta.node_id.clone(),
                seq: seg.meta.seq,
                t_ns: pdp.peak_t_ns(),
                power: received_power_dbm(&pdp, cal, seg.meta.gain_db, norm)?,
            });
        }
    }
    Ok((out, diags))
}

/// The full chain over a recorded directory. Writes `results.geojson`,
/// `power.csv` and `diagnostics.ndjson` to `out`.
pub fn run_postproc(
    segments_dir: &Path,
    telemetry_path: &Path,
    cal: &Calibration,
    pn: &PnConfig,
    cfg: &PostprocConfig,
    out: &Path,
) -> Result<PostprocSummary, PostprocError> {
    fs::create_dir_all(out)?;
    let (index, mut diags) = index_segments(segments_dir)?;
    let (telemetry, tdiags) = read_telemetry(telemetry_path)?;
    diags.extend(tdiags);
    let (powers, pdiags) = segment_powers(&index, pn, cal, cfg)?;
    diags.extend(pdiags);
    let (samples, cdiags) = geo_couple(&powers, &telemetry, cfg);
    diags.extend(cdiags);

    let rx_nodes: Vec<&str> = index.iter().map(|s| s.meta.node_id.as_str()).collect();
    let tx = telemetry.iter().find(|m| !rx_nodes.contains(&m.node_id.as_str()) && m.node_id.starts_with("tx")).map(|m| m.fix());
    let doc = export_geojson(&samples, tx.as_ref());
    fs::write(out.join("results.geojson"), serde_json::to_vec_pretty(&doc)?)?;

    let mut csv = String::from("t_ns,lat,lon,alt,rx_power_dbm,distance_m\n");
    for s in &samples {
        csv.push_str(&format!(
            "{},{:.9},{:.9},{:.3},{:.3},{:.3}\n",
            s.t_ns, s.fix.lat_deg, s.fix.lon_deg, s.fix.alt_m, s.rx_power_dbm, s.distance_m
        ));
    }
    fs::write(out.join("power.csv"), csv)?;

    let mut f = fs::File::create(out.join("diagnostics.ndjson"))?;
    for d in &diags {
        writeln!(f, "{}", serde_json::to_string(d)?)?;
    }
    let mean = (!samples.is_empty()).then(|| samples.iter().map(|s| s.rx_power_dbm).sum::<f64>() / samples.len() as f64);
    Ok(PostprocSummary {
        segments: index.len(),
        pdps: powers.len(),
        noise_only: powers.iter().filter(|p| p.power == PowerReading::BelowSensitivity).count(),
        samples: samples.len(),
        diagnostics: diags.len(),
        mean_rx_power_dbm: mean,
    })
}
