//! PSD matrices, square-tile segmentation, scaling to `[0, 1]`, a synthetic
//! spectrum generator and readers/writers for the on-disk matrix formats.
//!
//! A PSD matrix is stored frequency-major: row `b` holds the time series of
//! FFT bin `b`. Segments keep that orientation, so pixel `(row, col)` of the
//! segment at `(freq_region, time_index)` is matrix entry
//! `(freq_region * W + row, time_index * W + col)`.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdMeta {
    pub center_freq_hz: f64,
    pub bandwidth_hz: f64,
    /// Measurements per second.
    pub sample_rate: f64,
}

impl Default for PsdMeta {
    fn default() -> Self {
        // 868 MHz license-free band, 192 kHz wide, 5 PSD measurements/s.
        PsdMeta {
            center_freq_hz: 868.0e6,
            bandwidth_hz: 192.0e3,
            sample_rate: 5.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PsdMatrix {
    bins: usize,
    time_len: usize,
    values: Vec<f32>,
    pub meta: PsdMeta,
}

impl PsdMatrix {
    /// Builds a matrix from row-major `bins × time_len` values.
    pub fn new(bins: usize, time_len: usize, values: Vec<f32>, meta: PsdMeta) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Structure("matrix needs at least one bin".into()));
        }
        if bins.checked_mul(time_len) != Some(values.len()) {
            return Err(Error::Structure(format!(
                "{} values do not form a {bins} x {time_len} matrix",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry (bin {}, t {}) = {}",
                i / time_len.max(1),
                i % time_len.max(1),
                values[i]
            )));
        }
        Ok(PsdMatrix {
            bins,
            time_len,
            values,
            meta,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn time_len(&self) -> usize {
        self.time_len
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, bin: usize, t: usize) -> f32 {
        self.values[bin * self.time_len + t]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingMode {
    #[default]
    GlobalMinmax,
    PerSegmentMinmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub window: usize,
    pub scaling_mode: ScalingMode,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            window: 128,
            scaling_mode: ScalingMode::GlobalMinmax,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::InvalidConfig(format!(
                "window must be at least 2, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// One `W × W` tile of a PSD matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrogramSegment {
    pub window: usize,
    /// Row-major; rows are frequency offsets, columns time offsets.
    pub pixels: Vec<f64>,
    pub freq_region: usize,
    pub time_index: usize,
    pub segment_id: usize,
}

impl SpectrogramSegment {
    pub fn pixel(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.window + col]
    }
}

/// Number of frequency regions a matrix with `bins` rows yields.
pub fn region_count(bins: usize, window: usize) -> usize {
    bins / window
}

/// Number of complete tiles `segment` produces.
pub fn segment_count(bins: usize, time_len: usize, window: usize) -> usize {
    (bins / window) * (time_len / window)
}

/// Cuts the matrix into non-overlapping `W × W` tiles. Partial windows at the
/// high-frequency and late-time edges are discarded. Segment ids run
/// time-major: all regions of time window 0, then time window 1, and so on.
pub fn segment(matrix: &PsdMatrix, cfg: &SegmentationConfig) -> Result<Vec<SpectrogramSegment>> {
    cfg.validate()?;
    let w = cfg.window;
    if w > matrix.bins {
        return Err(Error::InvalidConfig(format!(
            "window {w} exceeds matrix bins {}",
            matrix.bins
        )));
    }
    let regions = matrix.bins / w;
    let windows = matrix.time_len / w;
    let mut out = Vec::with_capacity(regions * windows);
    for time_index in 0..windows {
        for freq_region in 0..regions {
            let mut pixels = Vec::with_capacity(w * w);
            for row in 0..w {
                let start = (freq_region * w + row) * matrix.time_len + time_index * w;
                pixels.extend(matrix.values[start..start + w].iter().map(|&v| v as f64));
            }
            out.push(SpectrogramSegment {
                window: w,
                pixels,
                freq_region,
                time_index,
                segment_id: time_index * regions + freq_region,
            });
        }
    }
    Ok(out)
}

fn minmax<'a>(values: impl Iterator<Item = &'a f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

fn rescale(pixels: &mut [f64], lo: f64, hi: f64) {
    let range = hi - lo;
    if range > 0.0 {
        for p in pixels {
            *p = ((*p - lo) / range).clamp(0.0, 1.0);
        }
    } else {
        pixels.fill(0.0);
    }
}

/// Min-max scales pixel values to `[0, 1]`, either over all segments jointly
/// or per segment. A degenerate range maps everything to 0.
pub fn scale_segments(
    segments: &[SpectrogramSegment],
    cfg: &SegmentationConfig,
) -> Vec<SpectrogramSegment> {
    let mut out = segments.to_vec();
    match cfg.scaling_mode {
        ScalingMode::GlobalMinmax => {
            let (lo, hi) = minmax(segments.iter().flat_map(|s| s.pixels.iter()));
            for s in &mut out {
                rescale(&mut s.pixels, lo, hi);
            }
        }
        ScalingMode::PerSegmentMinmax => {
            for s in &mut out {
                let (lo, hi) = minmax(s.pixels.iter());
                rescale(&mut s.pixels, lo, hi);
            }
        }
    }
    out
}

/// Segments and scales in one step.
pub fn prepare_segments(
    matrix: &PsdMatrix,
    cfg: &SegmentationConfig,
) -> Result<Vec<SpectrogramSegment>> {
    Ok(scale_segments(&segment(matrix, cfg)?, cfg))
}

/// Plain-text greyscale image (PGM P2), pixel values mapped from `[0, 1]` to
/// `0..=255`.
pub fn to_pgm(pixels: &[f64], width: usize, height: usize) -> String {
    let mut s = format!("P2\n{width} {height}\n255\n");
    for row in pixels.chunks(width) {
        let line: Vec<String> = row
            .iter()
            .map(|p| ((p.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Synthetic spectrum

/// Activity family that dominates a tile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    NoiseOnly,
    Burst,
    Narrowband,
    BurstOverNarrowband,
}

impl Archetype {
    pub const ALL: [Archetype; 4] = [
        Archetype::NoiseOnly,
        Archetype::Burst,
        Archetype::Narrowband,
        Archetype::BurstOverNarrowband,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Archetype::NoiseOnly => "noise_only",
            Archetype::Burst => "burst",
            Archetype::Narrowband => "narrowband",
            Archetype::BurstOverNarrowband => "burst_over_narrowband",
        }
    }

    pub fn has_burst(self) -> bool {
        matches!(self, Archetype::Burst | Archetype::BurstOverNarrowband)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub bins: usize,
    pub window: usize,
    /// Number of time samples `T`.
    pub duration: usize,
    /// Expected wideband bursts per `W × W` tile.
    pub burst_rate: f64,
    /// Burst level above the noise floor, dB.
    pub burst_power: f64,
    /// Inclusive range of burst durations in time samples.
    pub burst_len: (usize, usize),
    /// Continuous single-bin transmissions as `(bin, dB above floor)`.
    pub narrowband_channels: Vec<(usize, f64)>,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// How many archetypes the generator may emit: 1 = noise only,
    /// 2 = + bursts, 3 = + narrowband, 4 = + bursts over narrowband as a
    /// class of its own.
    pub n_classes: usize,
}

impl SynthConfig {
    /// Full-scale geometry: 1024 bins cut by 128-pixel windows.
    pub fn wide(duration: usize, seed: u64) -> Self {
        SynthConfig {
            bins: 1024,
            window: 128,
            duration,
            burst_rate: std::f64::consts::LN_2,
            burst_power: 25.0,
            burst_len: (4, 32),
            narrowband_channels: (0..4).map(|i| (128 * (2 * i + 1) + 40 + 8 * i, 20.0)).collect(),
            noise_mean: -100.0,
            noise_std: 2.0,
            seed,
            n_classes: 4,
        }
    }

    /// Small tiles for single-core experiments: 128 bins, W = 16 (8 regions),
    /// 4000 samples (2000 tiles), balanced across the four archetypes.
    pub fn desk(seed: u64) -> Self {
        SynthConfig {
            bins: 128,
            window: 16,
            duration: 4000,
            burst_rate: std::f64::consts::LN_2,
            burst_power: 25.0,
            burst_len: (2, 4),
            narrowband_channels: (0..4).map(|i| (16 * (2 * i + 1) + 4 + 2 * i, 20.0)).collect(),
            noise_mean: -100.0,
            noise_std: 2.0,
            seed,
            n_classes: 4,
        }
    }

    /// Re-targets the preset to `bins × window` tiles: one narrowband line in
    /// every odd frequency region and burst lengths clamped to the window.
    pub fn with_geometry(mut self, bins: usize, window: usize) -> Self {
        let power = self.narrowband_channels.first().map_or(20.0, |c| c.1);
        let regions = bins.checked_div(window).unwrap_or(0);
        self.narrowband_channels = (1..regions)
            .step_by(2)
            .enumerate()
            .map(|(i, r)| (window * r + window / 4 + (i * window / 8) % (window / 2).max(1), power))
            .collect();
        let hi = self.burst_len.1.min(window).max(1);
        self.burst_len = (self.burst_len.0.min(hi).max(1), hi);
        self.bins = bins;
        self.window = window;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.window < 2 || self.window > self.bins {
            return bad(format!("window {} must lie in 2..={}", self.window, self.bins));
        }
        if !(self.burst_rate >= 0.0 && self.burst_rate.is_finite()) {
            return bad(format!("burst_rate must be >= 0, got {}", self.burst_rate));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise std must be > 0, got {}", self.noise_std));
        }
        if !self.noise_mean.is_finite() || !self.burst_power.is_finite() {
            return bad("noise mean and burst power must be finite".into());
        }
        let (lo, hi) = self.burst_len;
        if lo == 0 || lo > hi || hi > self.window {
            return bad(format!(
                "burst_len ({lo}, {hi}) must satisfy 1 <= min <= max <= window"
            ));
        }
        if !(1..=4).contains(&self.n_classes) {
            return bad(format!("n_classes must be 1..=4, got {}", self.n_classes));
        }
        for &(bin, power) in &self.narrowband_channels {
            if bin >= self.bins || !power.is_finite() {
                return bad(format!("narrowband channel ({bin}, {power}) out of range"));
            }
        }
        Ok(())
    }
}

/// A wideband burst: all bins of one frequency region for a short run of
/// time samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BurstEvent {
    pub freq_region: usize,
    pub time_index: usize,
    /// First absolute time sample.
    pub start: usize,
    pub len: usize,
}

impl BurstEvent {
    /// Column range within its tile.
    pub fn tile_cols(&self, window: usize) -> std::ops::Range<usize> {
        let c = self.start - self.time_index * window;
        c..c + self.len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileLabel {
    pub segment_id: usize,
    pub freq_region: usize,
    pub time_index: usize,
    pub archetype: Archetype,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub matrix: PsdMatrix,
    /// One entry per complete tile, in segment-id order.
    pub labels: Vec<TileLabel>,
    pub bursts: Vec<BurstEvent>,
}

/// Draws a synthetic PSD matrix: Gaussian background, continuous narrowband
/// lines and Poisson-distributed wideband bursts confined to single tiles.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let (bins, t_len, w) = (cfg.bins, cfg.duration, cfg.window);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(cfg.noise_mean, cfg.noise_std).expect("validated std");

    let mut values: Vec<f32> = (0..bins * t_len)
        .map(|_| noise.sample(&mut rng) as f32)
        .collect();

    let channels: &[(usize, f64)] = if cfg.n_classes >= 3 {
        &cfg.narrowband_channels
    } else {
        &[]
    };
    for &(bin, power) in channels {
        for v in &mut values[bin * t_len..(bin + 1) * t_len] {
            *v += power as f32;
        }
    }

    let regions = bins / w;
    let windows = t_len / w;
    let mut bursts = Vec::new();
    let mut labels = Vec::with_capacity(regions * windows);
    let poisson = (cfg.n_classes >= 2 && cfg.burst_rate > 0.0)
        .then(|| Poisson::new(cfg.burst_rate).expect("validated rate"));
    for time_index in 0..windows {
        for freq_region in 0..regions {
            let count = poisson
                .as_ref()
                .map_or(0, |p| p.sample(&mut rng) as usize);
            for _ in 0..count {
                let len = rng.gen_range(cfg.burst_len.0..=cfg.burst_len.1);
                let offset = rng.gen_range(0..=w - len);
                let start = time_index * w + offset;
                for bin in freq_region * w..(freq_region + 1) * w {
                    for v in &mut values[bin * t_len + start..bin * t_len + start + len] {
                        *v += cfg.burst_power as f32;
                    }
                }
                bursts.push(BurstEvent {
                    freq_region,
                    time_index,
                    start,
                    len,
                });
            }
            let band = freq_region * w..(freq_region + 1) * w;
            let narrowband = channels.iter().any(|(b, _)| band.contains(b));
            let archetype = match (count > 0, narrowband) {
                (true, true) if cfg.n_classes >= 4 => Archetype::BurstOverNarrowband,
                (true, _) => Archetype::Burst,
                (false, true) => Archetype::Narrowband,
                (false, false) => Archetype::NoiseOnly,
            };
            labels.push(TileLabel {
                segment_id: time_index * regions + freq_region,
                freq_region,
                time_index,
                archetype,
            });
        }
    }

    let matrix = PsdMatrix::new(bins, t_len, values, PsdMeta::default())?;
    Ok(SynthOutput {
        matrix,
        labels,
        bursts,
    })
}

pub fn labels_csv(labels: &[TileLabel]) -> String {
    let mut s = String::from("segment_id,freq_region,time_index,label,label_name\n");
    for l in labels {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            l.segment_id,
            l.freq_region,
            l.time_index,
            l.archetype.id(),
            l.archetype.name()
        );
    }
    s
}

pub fn bursts_csv(bursts: &[BurstEvent]) -> String {
    let mut s = String::from("freq_region,time_index,start,len\n");
    for b in bursts {
        let _ = writeln!(s, "{},{},{},{}", b.freq_region, b.time_index, b.start, b.len);
    }
    s
}

// ---------------------------------------------------------------------------
// File formats

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsdFormat {
    /// One frequency bin per line, comma-separated, with an optional
    /// `#psd ...` header line.
    Csv,
    /// 16-byte header (`PSDF`, u32 bins, u64 time samples) followed by
    /// row-major little-endian f32 values.
    RawF32Le,
}

impl PsdFormat {
    /// Guesses from the file extension: `.csv` is CSV, anything else raw.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => PsdFormat::Csv,
            _ => PsdFormat::RawF32Le,
        }
    }
}

pub const RAW_MAGIC: [u8; 4] = *b"PSDF";
pub const RAW_HEADER_LEN: usize = 16;

pub fn encode_raw(m: &PsdMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + 4 * m.values.len());
    out.extend_from_slice(&RAW_MAGIC);
    out.extend_from_slice(&(m.bins as u32).to_le_bytes());
    out.extend_from_slice(&(m.time_len as u64).to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(data: &[u8]) -> Result<PsdMatrix> {
    if data.len() < RAW_HEADER_LEN {
        return Err(Error::parse(
            format!("offset {}", data.len()),
            "truncated header",
        ));
    }
    if data[..4] != RAW_MAGIC {
        return Err(Error::parse("offset 0", "bad magic"));
    }
    let bins = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let time_len = u64::from_le_bytes(data[8..16].try_into().unwrap());
    let payload = &data[RAW_HEADER_LEN..];
    if payload.len() % 4 != 0 {
        return Err(Error::parse(
            format!("offset {}", data.len()),
            "payload is not a whole number of f32 values",
        ));
    }
    let expected = usize::try_from(time_len)
        .ok()
        .and_then(|t| t.checked_mul(bins))
        .and_then(|n| n.checked_mul(4));
    if expected != Some(payload.len()) {
        return Err(Error::Structure(format!(
            "header declares {bins} x {time_len} values, payload holds {}",
            payload.len() / 4
        )));
    }
    let mut values = Vec::with_capacity(payload.len() / 4);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::parse(
                format!("offset {}", RAW_HEADER_LEN + 4 * i),
                format!("non-finite value {v}"),
            ));
        }
        values.push(v);
    }
    PsdMatrix::new(bins, time_len as usize, values, PsdMeta::default())
}

pub fn encode_csv(m: &PsdMatrix) -> String {
    let mut s = format!(
        "#psd bins={} time={} center_hz={} bandwidth_hz={} sample_rate={}\n",
        m.bins, m.time_len, m.meta.center_freq_hz, m.meta.bandwidth_hz, m.meta.sample_rate
    );
    for row in m.values.chunks(m.time_len.max(1)).take(m.bins) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    if m.time_len == 0 {
        for _ in 0..m.bins {
            s.push('\n');
        }
    }
    s
}

#[derive(Default)]
struct CsvHeader {
    bins: Option<usize>,
    time: Option<usize>,
    meta: PsdMeta,
}

fn parse_csv_header(line: &str, lineno: usize) -> Result<CsvHeader> {
    let mut h = CsvHeader::default();
    for field in line.trim_start_matches("#psd").split_whitespace() {
        let (key, value) = field
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("line {lineno}"), format!("bad header field `{field}`")))?;
        let bad = || Error::parse(format!("line {lineno}"), format!("bad value for `{key}`"));
        match key {
            "bins" => h.bins = Some(value.parse().map_err(|_| bad())?),
            "time" => h.time = Some(value.parse().map_err(|_| bad())?),
            "center_hz" => h.meta.center_freq_hz = value.parse().map_err(|_| bad())?,
            "bandwidth_hz" => h.meta.bandwidth_hz = value.parse().map_err(|_| bad())?,
            "sample_rate" => h.meta.sample_rate = value.parse().map_err(|_| bad())?,
            _ => {}
        }
    }
    Ok(h)
}

pub fn decode_csv(text: &str) -> Result<PsdMatrix> {
    let mut header: Option<CsvHeader> = None;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = line.trim_end_matches('\r');
        if line.starts_with("#psd") && rows.is_empty() && header.is_none() {
            header = Some(parse_csv_header(line, lineno)?);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let row = if line.trim().is_empty() {
            Vec::new()
        } else {
            line.split(',')
                .enumerate()
                .map(|(col, cell)| {
                    let v: f32 = cell.trim().parse().map_err(|_| {
                        Error::parse(
                            format!("line {lineno}, column {}", col + 1),
                            format!("not a number: `{}`", cell.trim()),
                        )
                    })?;
                    if !v.is_finite() {
                        return Err(Error::parse(
                            format!("line {lineno}, column {}", col + 1),
                            format!("non-finite value {v}"),
                        ));
                    }
                    Ok(v)
                })
                .collect::<Result<Vec<f32>>>()?
        };
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Structure(format!(
                    "line {lineno} has {} values, earlier rows have {}",
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    let header = header.unwrap_or_default();
    // Without a header a trailing blank line is just a line terminator.
    if header.bins.is_none() {
        while rows.last().is_some_and(|r| r.is_empty()) {
            rows.pop();
        }
    }
    let bins = rows.len();
    let time_len = rows.first().map_or(0, |r| r.len());
    if let Some(b) = header.bins {
        if b != bins {
            return Err(Error::Structure(format!(
                "header declares {b} bins, file has {bins} rows"
            )));
        }
    }
    if let Some(t) = header.time {
        if t != time_len {
            return Err(Error::Structure(format!(
                "header declares {t} time samples, rows have {time_len} values"
            )));
        }
    }
    PsdMatrix::new(bins, time_len, rows.concat(), header.meta)
}

pub fn read_psd_file(path: &Path, format: PsdFormat) -> Result<PsdMatrix> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        PsdFormat::RawF32Le => decode_raw(&bytes),
        PsdFormat::Csv => {
            let text = std::str::from_utf8(&bytes).map_err(|e| {
                Error::parse(format!("offset {}", e.valid_up_to()), "invalid UTF-8")
            })?;
            decode_csv(text)
        }
    }
}

pub fn write_psd_file(path: &Path, matrix: &PsdMatrix, format: PsdFormat) -> Result<()> {
    let bytes = match format {
        PsdFormat::RawF32Le => encode_raw(matrix),
        PsdFormat::Csv => encode_csv(matrix).into_bytes(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(bins: usize, t: usize) -> PsdMatrix {
        let values = (0..bins * t).map(|i| i as f32).collect();
        PsdMatrix::new(bins, t, values, PsdMeta::default()).unwrap()
    }

    fn cfg(window: usize) -> SegmentationConfig {
        SegmentationConfig {
            window,
            scaling_mode: ScalingMode::GlobalMinmax,
        }
    }

    #[test]
    fn eight_regions_for_full_band() {
        let m = PsdMatrix::new(1024, 128, vec![0.0; 1024 * 128], PsdMeta::default()).unwrap();
        let segs = segment(&m, &cfg(128)).unwrap();
        assert_eq!(segs.len(), 8);
        let regions: Vec<usize> = segs.iter().map(|s| s.freq_region).collect();
        assert_eq!(regions, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn incomplete_time_window_yields_nothing() {
        let m = PsdMatrix::new(1024, 127, vec![0.0; 1024 * 127], PsdMeta::default()).unwrap();
        assert!(segment(&m, &cfg(128)).unwrap().is_empty());
    }

    #[test]
    fn segments_carry_origin() {
        let m = ramp(256, 384);
        let segs = segment(&m, &cfg(128)).unwrap();
        assert_eq!(segs.len(), 6);
        for s in &segs {
            assert!(s.freq_region < 2 && s.time_index < 3);
            assert_eq!(
                s.pixel(5, 7) as f32,
                m.get(s.freq_region * 128 + 5, s.time_index * 128 + 7)
            );
        }
    }

    #[test]
    fn window_larger_than_bins_rejected() {
        let m = ramp(8, 64);
        assert!(matches!(
            segment(&m, &cfg(16)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(segment(&m, &cfg(1)).is_err());
    }

    #[test]
    fn constant_segment_scales_to_zero() {
        let m = PsdMatrix::new(4, 4, vec![7.0; 16], PsdMeta::default()).unwrap();
        let segs = prepare_segments(&m, &cfg(4)).unwrap();
        assert!(segs[0].pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn global_scaling_maps_endpoints() {
        let mk = |v: f64, id| SpectrogramSegment {
            window: 1,
            pixels: vec![v],
            freq_region: 0,
            time_index: id,
            segment_id: id,
        };
        let out = scale_segments(&[mk(-100.0, 0), mk(-40.0, 1)], &cfg(2));
        assert_eq!(out[0].pixels, vec![0.0]);
        assert_eq!(out[1].pixels, vec![1.0]);
        assert!(scale_segments(&[], &cfg(2)).is_empty());
    }

    #[test]
    fn per_segment_scaling_is_independent() {
        let m = ramp(4, 8);
        let c = SegmentationConfig {
            window: 4,
            scaling_mode: ScalingMode::PerSegmentMinmax,
        };
        for s in prepare_segments(&m, &c).unwrap() {
            let (lo, hi) = minmax(s.pixels.iter());
            assert_eq!((lo, hi), (0.0, 1.0));
        }
    }

    #[test]
    fn geometry_retarget_matches_the_desk_preset() {
        let desk = SynthConfig::desk(0);
        let again = SynthConfig::wide(desk.duration, 0).with_geometry(128, 16);
        assert_eq!(again.narrowband_channels, desk.narrowband_channels);
        assert_eq!(again.burst_len, (4, 16));
        let small = desk.with_geometry(48, 12);
        assert!(small.validate().is_ok());
        assert_eq!(small.narrowband_channels.len(), 2);
    }

    #[test]
    fn quiet_generator_labels_everything_noise() {
        let mut c = SynthConfig::desk(3);
        c.duration = 160;
        c.burst_rate = 0.0;
        c.narrowband_channels.clear();
        let out = synth_generate(&c).unwrap();
        assert_eq!(out.labels.len(), 8 * 10);
        assert!(out.labels.iter().all(|l| l.archetype == Archetype::NoiseOnly));
        assert!(out.bursts.is_empty());
    }

    #[test]
    fn generator_is_deterministic() {
        let c = SynthConfig::desk(7);
        let a = synth_generate(&c).unwrap();
        let b = synth_generate(&c).unwrap();
        assert_eq!(a.matrix, b.matrix);
        assert_eq!(a.labels, b.labels);
        let other = synth_generate(&SynthConfig::desk(8)).unwrap();
        assert_ne!(a.matrix, other.matrix);
    }

    #[test]
    fn burst_counts_follow_poisson_mean() {
        let mut c = SynthConfig::desk(11);
        c.burst_rate = 1.0;
        c.duration = 100 * c.window;
        let out = synth_generate(&c).unwrap();
        for region in 0..8 {
            let n = out.bursts.iter().filter(|b| b.freq_region == region).count() as f64;
            // Poisson(100): sigma = 10.
            assert!((n - 100.0).abs() <= 30.0, "region {region}: {n} bursts");
        }
    }

    #[test]
    fn archetype_gating_by_class_count() {
        let mut c = SynthConfig::desk(5);
        c.duration = 320;
        c.n_classes = 2;
        let out = synth_generate(&c).unwrap();
        assert!(out
            .labels
            .iter()
            .all(|l| matches!(l.archetype, Archetype::NoiseOnly | Archetype::Burst)));
        c.n_classes = 3;
        let out = synth_generate(&c).unwrap();
        assert!(out
            .labels
            .iter()
            .all(|l| l.archetype != Archetype::BurstOverNarrowband));
    }

    #[test]
    fn bursts_stay_inside_their_tile() {
        let c = SynthConfig::desk(9);
        let out = synth_generate(&c).unwrap();
        for b in &out.bursts {
            let cols = b.tile_cols(c.window);
            assert!(cols.end <= c.window);
            let label = out.labels[b.time_index * 8 + b.freq_region];
            assert!(label.archetype.has_burst());
        }
    }

    #[test]
    fn invalid_synth_configs() {
        let mut c = SynthConfig::desk(0);
        c.noise_std = 0.0;
        assert!(synth_generate(&c).is_err());
        let mut c = SynthConfig::desk(0);
        c.burst_rate = -1.0;
        assert!(synth_generate(&c).is_err());
        let mut c = SynthConfig::desk(0);
        c.n_classes = 5;
        assert!(synth_generate(&c).is_err());
    }

    #[test]
    fn csv_of_zeros() {
        let text = "0,0,0,0\n0,0,0,0\n0,0,0,0\n0,0,0,0\n";
        let m = decode_csv(text).unwrap();
        assert_eq!((m.bins(), m.time_len()), (4, 4));
    }

    #[test]
    fn csv_header_row_mismatch() {
        let mut text = String::from("#psd bins=1024 time=1024\n");
        for _ in 0..1023 {
            text.push_str(&vec!["1"; 1024].join(","));
            text.push('\n');
        }
        assert!(matches!(decode_csv(&text), Err(Error::Structure(_))));

        let ragged = "1,2,3\n4,5\n";
        assert!(matches!(decode_csv(ragged), Err(Error::Structure(_))));
    }

    #[test]
    fn csv_parse_errors_name_the_line() {
        let err = decode_csv("1,2\n3,x\n").unwrap_err();
        match err {
            Error::Parse { location, .. } => assert_eq!(location, "line 2, column 2"),
            e => panic!("unexpected {e:?}"),
        }
        assert!(decode_csv("1,NaN\n").is_err());
        assert!(decode_csv("1,inf\n").is_err());
    }

    #[test]
    fn raw_structure_errors() {
        let m = ramp(4, 3);
        let mut bytes = encode_raw(&m);
        bytes.truncate(bytes.len() - 4);
        assert!(matches!(decode_raw(&bytes), Err(Error::Structure(_))));
        assert!(matches!(decode_raw(&bytes[..10]), Err(Error::Parse { .. })));
        let mut bad = encode_raw(&m);
        bad[0] = b'X';
        assert!(decode_raw(&bad).is_err());
        let mut nan = encode_raw(&m);
        nan[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode_raw(&nan).is_err());
    }

    #[test]
    fn file_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(&SynthConfig {
            duration: 64,
            ..SynthConfig::desk(2)
        })
        .unwrap()
        .matrix;
        for fmt in [PsdFormat::Csv, PsdFormat::RawF32Le] {
            let p = dir.path().join(format!("m.{fmt:?}"));
            write_psd_file(&p, &m, fmt).unwrap();
            assert_eq!(read_psd_file(&p, fmt).unwrap(), m);
        }
        assert!(read_psd_file(&dir.path().join("missing"), PsdFormat::Csv).is_err());
    }

    #[test]
    fn pgm_layout() {
        let pgm = to_pgm(&[0.0, 1.0, 0.5, 0.25], 2, 2);
        assert_eq!(pgm, "P2\n2 2\n255\n0 255\n128 64\n");
    }
}
