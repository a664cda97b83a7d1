//! Dataset ingestion, binning and the synthetic generators.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::likelihood::softplus;
use crate::spatial::SpaceTimePoint;

const COAL_CSV: &str = include_str!("../../data/coal.csv");
const MOTORCYCLE_CSV: &str = include_str!("../../data/motorcycle.csv");
const BANANA_CSV: &str = include_str!("../../data/banana.csv");

/// Built-in dataset identifiers.
pub const DATASET_IDS: [&str; 6] = [
    "motorcycle",
    "coal",
    "banana",
    "binary-synthetic",
    "cox2d-synthetic",
    "audio-synthetic",
];

/// Observations as loaded, before binning or cross-validation.
#[derive(Clone, Debug, PartialEq)]
pub enum RawData {
    /// Event times of a point process.
    Events(Vec<f64>),
    /// Event locations `(t, r)` of a two-dimensional point process.
    Events2d(Vec<(f64, f64)>),
    Series { t: Vec<f64>, y: Vec<f64> },
    Spatial(Vec<SpaceTimePoint>),
}

impl RawData {
    pub fn len(&self) -> usize {
        match self {
            RawData::Events(e) => e.len(),
            RawData::Events2d(e) => e.len(),
            RawData::Series { t, .. } => t.len(),
            RawData::Spatial(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Sizes and seeds for the synthetic generators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorOptions {
    pub n: Option<usize>,
    pub seed: u64,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        GeneratorOptions { n: None, seed: 0 }
    }
}

/// Load a built-in dataset by id or a CSV file by path.
pub fn load_dataset(id_or_path: &str, opts: GeneratorOptions) -> Result<RawData> {
    match id_or_path {
        "coal" => parse_csv(COAL_CSV),
        "motorcycle" => parse_csv(MOTORCYCLE_CSV),
        "banana" => parse_csv(BANANA_CSV),
        "binary-synthetic" => Ok(binary_synthetic(opts.n.unwrap_or(1000), opts.seed)),
        "cox2d-synthetic" => Ok(cox2d_synthetic(opts.seed)),
        "audio-synthetic" => Ok(audio_synthetic(opts.n.unwrap_or(2000), opts.seed).0),
        other => {
            let path = Path::new(other);
            if !path.exists() {
                return Err(Error::UnknownDataset(other.to_string()));
            }
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                return read_wav(path);
            }
            let text = std::fs::read_to_string(path)?;
            parse_csv(&text).map_err(|e| e.context(format!("reading {}", path.display())))
        }
    }
}

/// Mono 16-bit PCM WAV as a series with `t` in seconds and `y` scaled to
/// `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<RawData> {
    let bad = |msg: String| Error::Config(format!("{}: {msg}", path.display()));
    let mut reader = hound::WavReader::open(path).map_err(|e| bad(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(bad(format!(
            "expected mono 16-bit PCM, got {} channel(s), {} bits, {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let fs = spec.sample_rate as f64;
    let y = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<f64>, _>>()
        .map_err(|e| bad(e.to_string()))?;
    let t = (0..y.len()).map(|i| i as f64 / fs).collect();
    Ok(RawData::Series { t, y })
}

fn parse_field(s: &str, line: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Csv {
        line,
        message: format!("cannot parse {s:?} as a number"),
    })
}

/// Parse a CSV with a header of `t`, `t,y`, `r,t,y` or `r1,r2,y`.
pub fn parse_csv(text: &str) -> Result<RawData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Csv {
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let cols: Vec<&str> = header.iter().map(String::as_str).collect();
    let width = cols.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Csv {
            line: e.position().map(|p| p.line() as usize).unwrap_or(line),
            message: e.to_string(),
        })?;
        if rec.len() != width {
            return Err(Error::Csv {
                line,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        let vals = rec.iter().map(|s| parse_field(s, line)).collect::<Result<Vec<f64>>>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Csv {
                line,
                message: "non-finite value".into(),
            });
        }
        rows.push(vals);
    }
    match cols.as_slice() {
        ["t"] => Ok(RawData::Events(rows.into_iter().map(|r| r[0]).collect())),
        ["t", "y"] => Ok(RawData::Series {
            t: rows.iter().map(|r| r[0]).collect(),
            y: rows.iter().map(|r| r[1]).collect(),
        }),
        ["r", "t", "y"] => Ok(RawData::Spatial(
            rows.iter()
                .map(|v| SpaceTimePoint {
                    r: vec![v[0]],
                    t: v[1],
                    y: v[2],
                })
                .collect(),
        )),
        // gridded tasks: the first axis is swept sequentially
        ["r1", "r2", "y"] => Ok(RawData::Spatial(
            rows.iter()
                .map(|v| SpaceTimePoint {
                    r: vec![v[1]],
                    t: v[0],
                    y: v[2],
                })
                .collect(),
        )),
        _ => Err(Error::Csv {
            line: 1,
            message: format!("unsupported header {:?}; expected t | t,y | r,t,y | r1,r2,y", header),
        }),
    }
}

/// Equal-width bins over `[min, max]`; returns bin centres and counts.
pub fn bin_events(events: &[f64], bins: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(bins >= 1, "at least one bin is required");
    if events.is_empty() {
        return ((0..bins).map(|i| i as f64 + 0.5).collect(), vec![0.0; bins]);
    }
    let lo = events.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = events.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (edges_lo, width) = bin_range(lo, hi, bins);
    let mut counts = vec![0.0; bins];
    for &e in events {
        counts[bin_index(e, edges_lo, width, bins)] += 1.0;
    }
    let centres = (0..bins).map(|i| edges_lo + (i as f64 + 0.5) * width).collect();
    (centres, counts)
}

fn bin_range(lo: f64, hi: f64, bins: usize) -> (f64, f64) {
    if hi > lo {
        (lo, (hi - lo) / bins as f64)
    } else {
        // a single distinct value gets a unit-width range around it
        (lo - 0.5, 1.0 / bins as f64)
    }
}

fn bin_index(x: f64, lo: f64, width: f64, bins: usize) -> usize {
    (((x - lo) / width).floor().max(0.0) as usize).min(bins - 1)
}

/// Counts of `(t, r)` events on a `bins_t × bins_r` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid2d {
    pub t_centres: Vec<f64>,
    pub r_centres: Vec<f64>,
    /// `counts[i][j]` for time bin `i` and space bin `j`.
    pub counts: Vec<Vec<f64>>,
}

impl Grid2d {
    pub fn shape(&self) -> (usize, usize) {
        (self.t_centres.len(), self.r_centres.len())
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn bin_events_2d(events: &[(f64, f64)], bins_t: usize, bins_r: usize) -> Grid2d {
    assert!(bins_t >= 1 && bins_r >= 1, "at least one bin per axis is required");
    let range = |xs: &mut dyn Iterator<Item = f64>| {
        let v: Vec<f64> = xs.collect();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if v.is_empty() {
            (0.0, 1.0)
        } else {
            (lo, hi)
        }
    };
    let (tl, th) = range(&mut events.iter().map(|e| e.0));
    let (rl, rh) = range(&mut events.iter().map(|e| e.1));
    let (t0, tw) = bin_range(tl, th, bins_t);
    let (r0, rw) = bin_range(rl, rh, bins_r);
    let mut counts = vec![vec![0.0; bins_r]; bins_t];
    for &(t, r) in events {
        counts[bin_index(t, t0, tw, bins_t)][bin_index(r, r0, rw, bins_r)] += 1.0;
    }
    Grid2d {
        t_centres: (0..bins_t).map(|i| t0 + (i as f64 + 0.5) * tw).collect(),
        r_centres: (0..bins_r).map(|j| r0 + (j as f64 + 0.5) * rw).collect(),
        counts,
    }
}

/// `y(t) = sign(12 sin(4πt) / (0.25πt + 1) + ε)`, `ε ~ N(0, 0.25²)`, on an
/// even grid over `[0, 5]`. Labels are ±1.
pub fn binary_synthetic(n: usize, seed: u64) -> RawData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.25).expect("valid normal");
    let span = 5.0;
    let t: Vec<f64> = (0..n).map(|i| span * i as f64 / (n.max(2) - 1) as f64).collect();
    let y = t
        .iter()
        .map(|&t| {
            let pi = std::f64::consts::PI;
            let g = 12.0 * (4.0 * pi * t).sin() / (0.25 * pi * t + 1.0) + noise.sample(&mut rng);
            if g >= 0.0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    RawData::Series { t, y }
}

/// Log-Gaussian-Cox-style events on the unit square by thinning a
/// homogeneous process with a smooth known intensity.
pub fn cox2d_synthetic(seed: u64) -> RawData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pi = std::f64::consts::PI;
    let intensity = |t: f64, r: f64| 1500.0 * (1.2 * (2.0 * pi * t).sin() * (pi * r).cos() - 0.8).exp();
    let max = 1500.0 * (0.4f64).exp();
    let n = {
        // Poisson(max) by inversion in log space
        let poisson = rand_distr::Poisson::new(max).expect("valid rate");
        poisson.sample(&mut rng) as usize
    };
    let mut events = Vec::new();
    for _ in 0..n {
        let t: f64 = rng.random();
        let r: f64 = rng.random();
        if rng.random::<f64>() * max < intensity(t, r) {
            events.push((t, r));
        }
    }
    RawData::Events2d(events)
}

/// Ground truth of the synthetic audio signal.
#[derive(Clone, Debug)]
pub struct AudioTruth {
    pub subbands: Vec<Vec<f64>>,
    pub amplitudes: Vec<Vec<f64>>,
    pub noise_sd: f64,
}

/// Three modulated carriers, `y = Σ subᵢ · softplus(ampᵢ) + ε`, sampled at
/// 4 kHz. Carrier frequencies 150, 420 and 900 Hz.
pub fn audio_synthetic(n: usize, seed: u64) -> (RawData, AudioTruth) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = 4000.0;
    let pi = std::f64::consts::PI;
    let freqs = [150.0, 420.0, 900.0];
    let noise_sd = 0.05;
    let eps = Normal::new(0.0, noise_sd).expect("valid normal");
    let t: Vec<f64> = (0..n).map(|i| i as f64 / fs).collect();
    let phases: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..2.0 * pi)).collect();
    let env: Vec<(f64, f64)> = (0..3).map(|_| (rng.random_range(4.0..12.0), rng.random_range(0.0..2.0 * pi))).collect();
    let mut subbands = vec![Vec::with_capacity(n); 3];
    let mut amplitudes = vec![Vec::with_capacity(n); 3];
    let mut y = Vec::with_capacity(n);
    for &ti in &t {
        let mut v = 0.0;
        for i in 0..3 {
            let s = (2.0 * pi * freqs[i] * ti + phases[i]).cos();
            let a = 0.5 + (2.0 * pi * env[i].0 * ti + env[i].1).sin();
            subbands[i].push(s);
            amplitudes[i].push(a);
            v += s * softplus(a);
        }
        y.push(v + eps.sample(&mut rng));
    }
    (
        RawData::Series { t, y },
        AudioTruth {
            subbands,
            amplitudes,
            noise_sd,
        },
    )
}
