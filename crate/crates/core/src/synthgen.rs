//! Synthetic whole/parts generators: the 1D sine-mixture problem and the 2D
//! color-gradient problem.
//!
//! Both generators are pure functions of `(spec, seed, K)`; [`BatchStream`]
//! wraps them into an infinite, seeded stream with a uniformly drawn part
//! count per batch.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side of the square images of the 2D problem.
pub const IMAGE_SIZE: usize = 32;

/// RGB triples of the 2D palette, indexed by [`Color`].
pub const PALETTE: [[f64; 3]; 5] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red = 0,
    Green = 1,
    Blue = 2,
    Black = 3,
    White = 4,
}

impl Color {
    pub const ALL: [Color; 5] = [
        Color::Red,
        Color::Green,
        Color::Blue,
        Color::Black,
        Color::White,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn from_id(id: u32) -> Result<Self> {
        Self::ALL
            .get(id as usize)
            .copied()
            .ok_or_else(|| Error::Label(format!("unknown color id {id}")))
    }

    pub fn rgb(self) -> [f64; 3] {
        PALETTE[self as usize]
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Black => "black",
            Color::White => "white",
        }
    }
}

/// Category of one part of a whole.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartLabel {
    /// 1D problem: the integer frequency of a sine component.
    Frequency(u32),
    /// 2D problem: a colored anchor at a location in `[-1, 1]^2`.
    Site { color: Color, location: [f64; 2] },
}

impl PartLabel {
    pub fn frequency(&self) -> Option<u32> {
        match *self {
            PartLabel::Frequency(f) => Some(f),
            PartLabel::Site { .. } => None,
        }
    }
}

impl fmt::Display for PartLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartLabel::Frequency(freq) => write!(f, "{freq}"),
            PartLabel::Site { color, location } => {
                write!(f, "{}@{},{}", color.name(), location[0], location[1])
            }
        }
    }
}

/// Parses `"3"` as a frequency and `"red@0.2,-0.4"` as a colored site.
impl FromStr for PartLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some((color, loc)) = s.split_once('@') {
            let color = Color::ALL
                .iter()
                .copied()
                .find(|c| c.name() == color.to_ascii_lowercase())
                .ok_or_else(|| Error::Label(format!("unknown color {color:?}")))?;
            let (lx, ly) = loc
                .split_once(',')
                .ok_or_else(|| Error::Label(format!("location must be `x,y`, got {loc:?}")))?;
            let parse = |v: &str| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Label(format!("bad coordinate {v:?}")))
            };
            let location = [parse(lx)?, parse(ly)?];
            if location.iter().any(|c| !(-1.0..=1.0).contains(c)) {
                return Err(Error::Label(format!("location {loc:?} outside [-1,1]^2")));
            }
            Ok(PartLabel::Site { color, location })
        } else {
            s.parse::<u32>()
                .map(PartLabel::Frequency)
                .map_err(|_| Error::Label(format!("cannot parse part label {s:?}")))
        }
    }
}

/// Intrinsic random variation of a part, drawn by the generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PartDraw {
    Sine { amplitude: f64, phase: f64 },
    Site { intensity: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SineBatchSpec {
    pub batch_size: usize,
    /// Inclusive range of frequencies.
    pub freq_range: (u32, u32),
    /// Inclusive range of the part count K.
    pub parts_range: (usize, usize),
    pub timesteps: usize,
    /// Samples per fundamental period.
    pub resolution: f64,
    /// Non-linearity factor C.
    pub nonlinearity: f64,
    pub amplitude_mean: f64,
    pub amplitude_std: f64,
    pub phase_std: f64,
    pub seed: u64,
}

impl Default for SineBatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 256,
            freq_range: (1, 10),
            parts_range: (1, 16),
            timesteps: 200,
            resolution: 100.0,
            nonlinearity: 3.0,
            amplitude_mean: 1.0,
            amplitude_std: 0.3,
            // The reference generator code uses 0.8; the prose states pi/2.
            phase_std: 0.8,
            seed: 0,
        }
    }
}

impl SineBatchSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.freq_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "freq_range must be a non-empty range of positive integers, got [{lo}, {hi}]"
            )));
        }
        check_parts_range(self.parts_range)?;
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be >= 1".into()));
        }
        if !(self.resolution > 0.0) {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if !(self.nonlinearity > 0.0) {
            return Err(Error::Config("nonlinearity C must be positive".into()));
        }
        if !(self.amplitude_std >= 0.0) || !(self.phase_std >= 0.0) {
            return Err(Error::Config("standard deviations must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn num_freqs(&self) -> usize {
        (self.freq_range.1 - self.freq_range.0 + 1) as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradientBatchSpec {
    pub batch_size: usize,
    pub anchor_count_range: (usize, usize),
    pub intensity_range: (f64, f64),
    /// Per-axis range of anchor locations.
    pub location_range: (f64, f64),
    pub gamma: f64,
    pub seed: u64,
}

impl Default for GradientBatchSpec {
    fn default() -> Self {
        Self {
            batch_size: 256,
            anchor_count_range: (1, 8),
            intensity_range: (5.0, 10.0),
            location_range: (-0.9, 0.9),
            gamma: 1.0 / 2.4,
            seed: 0,
        }
    }
}

impl GradientBatchSpec {
    pub fn validate(&self) -> Result<()> {
        check_parts_range(self.anchor_count_range)?;
        let (lo, hi) = self.location_range;
        if !(-1.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "location_range must lie in [-1, 1], got [{lo}, {hi}]"
            )));
        }
        let (ilo, ihi) = self.intensity_range;
        if !(0.0 <= ilo && ilo <= ihi) {
            return Err(Error::Config("intensity_range must be non-negative".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_parts_range((lo, hi): (usize, usize)) -> Result<()> {
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!(
            "part-count range must satisfy 1 <= min <= max, got [{lo}, {hi}]"
        )));
    }
    Ok(())
}

fn check_k(k: usize, range: (usize, usize)) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("number of parts K must be >= 1".into()));
    }
    if k < range.0 || k > range.1 {
        return Err(Error::Config(format!(
            "K = {k} outside the configured range [{}, {}]",
            range.0, range.1
        )));
    }
    Ok(())
}

/// Generator output: wholes plus the label multiset of each example.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    /// Row-major data, `(batch, T)` or `(batch, 3, 32, 32)`.
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    /// One label list of length K per example.
    pub labels: Vec<Vec<PartLabel>>,
    /// The intrinsic draws behind each label, same layout as `labels`.
    pub draws: Vec<Vec<PartDraw>>,
}

impl LabeledBatch {
    pub fn batch_size(&self) -> usize {
        self.shape[0]
    }

    pub fn parts(&self) -> usize {
        self.labels.first().map_or(0, Vec::len)
    }

    pub fn example_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let n = self.example_len();
        &self.data[i * n..(i + 1) * n]
    }
}

/// Evaluates `K tanh(C/K * sum_i a_i cos(2 pi l_i t / resolution + kappa_i))`
/// at `t = 0..timesteps`.
pub fn sine_curve(
    freqs: &[u32],
    amplitudes: &[f64],
    phases: &[f64],
    timesteps: usize,
    resolution: f64,
    nonlinearity: f64,
) -> Vec<f64> {
    let k = freqs.len() as f64;
    (0..timesteps)
        .map(|t| {
            let time = t as f64 / resolution;
            let inner: f64 = freqs
                .iter()
                .zip(amplitudes)
                .zip(phases)
                .map(|((&f, &a), &p)| a * (2.0 * std::f64::consts::PI * f as f64 * time + p).cos())
                .sum();
            k * (nonlinearity * inner / k).tanh()
        })
        .collect()
}

pub fn generate_sine_batch(spec: &SineBatchSpec, k: usize) -> Result<LabeledBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sample_sine_batch(spec, k, &mut rng)
}

/// Draws one batch with exactly `k` parts per example from `rng`.
pub fn sample_sine_batch<R: Rng + ?Sized>(
    spec: &SineBatchSpec,
    k: usize,
    rng: &mut R,
) -> Result<LabeledBatch> {
    spec.validate()?;
    check_k(k, spec.parts_range)?;
    let b = spec.batch_size;
    let freq_dist = Uniform::new_inclusive(spec.freq_range.0, spec.freq_range.1)
        .map_err(|e| Error::Config(e.to_string()))?;
    let amp_dist = Normal::new(spec.amplitude_mean, spec.amplitude_std)
        .map_err(|e| Error::Config(e.to_string()))?;
    let phase_dist = Normal::new(0.0, spec.phase_std).map_err(|e| Error::Config(e.to_string()))?;

    let freqs: Vec<u32> = (0..b * k).map(|_| freq_dist.sample(rng)).collect();
    let amps: Vec<f64> = (0..b * k).map(|_| amp_dist.sample(rng)).collect();
    let phases: Vec<f64> = (0..b * k).map(|_| phase_dist.sample(rng)).collect();

    let mut data = Vec::with_capacity(b * spec.timesteps);
    let mut labels = Vec::with_capacity(b);
    let mut draws = Vec::with_capacity(b);
    for i in 0..b {
        let r = i * k..(i + 1) * k;
        data.extend(sine_curve(
            &freqs[r.clone()],
            &amps[r.clone()],
            &phases[r.clone()],
            spec.timesteps,
            spec.resolution,
            spec.nonlinearity,
        ));
        labels.push(
            freqs[r.clone()]
                .iter()
                .map(|&f| PartLabel::Frequency(f))
                .collect(),
        );
        draws.push(
            r.map(|j| PartDraw::Sine {
                amplitude: amps[j],
                phase: phases[j],
            })
            .collect(),
        );
    }
    Ok(LabeledBatch {
        data,
        shape: vec![b, spec.timesteps],
        labels,
        draws,
    })
}

/// Pixel-grid coordinate of index `i`, spanning `[-1, 1]` in 32 steps.
pub fn grid_coord(i: usize) -> f64 {
    i as f64 * 2.0 / (IMAGE_SIZE as f64 - 1.0) - 1.0
}

/// Blends anchor colors with a per-pixel softmax over
/// `-intensity * squared_distance`. Returns the pre-gamma image `(3, 32, 32)`,
/// row index = y, column index = x.
pub fn draw_gradient(locations: &[[f64; 2]], colors: &[Color], intensities: &[f64]) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let mut img = vec![0.0; 3 * n * n];
    let mut logits = vec![0.0; locations.len()];
    for row in 0..n {
        let y = grid_coord(row);
        for col in 0..n {
            let x = grid_coord(col);
            for (a, loc) in locations.iter().enumerate() {
                let d2 = (x - loc[0]).powi(2) + (y - loc[1]).powi(2);
                logits[a] = -intensities[a] * d2;
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for (a, color) in colors.iter().enumerate() {
                let weight = (logits[a] - m).exp() / z;
                let rgb = color.rgb();
                for c in 0..3 {
                    img[c * n * n + row * n + col] += weight * rgb[c];
                }
            }
        }
    }
    img
}

pub fn gamma_correct(img: &mut [f64], gamma: f64) {
    for v in img.iter_mut() {
        *v = v.max(0.0).powf(gamma).clamp(0.0, 1.0);
    }
}

pub fn generate_gradient_batch(spec: &GradientBatchSpec, k: usize) -> Result<LabeledBatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    sample_gradient_batch(spec, k, &mut rng)
}

pub fn sample_gradient_batch<R: Rng + ?Sized>(
    spec: &GradientBatchSpec,
    k: usize,
    rng: &mut R,
) -> Result<LabeledBatch> {
    spec.validate()?;
    check_k(k, spec.anchor_count_range)?;
    let b = spec.batch_size;
    let n = IMAGE_SIZE;
    let color_dist = Uniform::new(0u32, PALETTE.len() as u32).expect("non-empty palette");
    let (lo, hi) = spec.location_range;

    let colors: Vec<Color> = (0..b * k)
        .map(|_| Color::from_id(color_dist.sample(rng)).expect("id < 5"))
        .collect();
    let locations: Vec<[f64; 2]> = (0..b * k)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            [lo + u * (hi - lo), lo + v * (hi - lo)]
        })
        .collect();
    let (ilo, ihi) = spec.intensity_range;
    let intensities: Vec<f64> = (0..b * k)
        .map(|_| ilo + rng.random::<f64>() * (ihi - ilo))
        .collect();

    let mut data = Vec::with_capacity(b * 3 * n * n);
    let mut labels = Vec::with_capacity(b);
    let mut draws = Vec::with_capacity(b);
    for i in 0..b {
        let r = i * k..(i + 1) * k;
        let mut img = draw_gradient(
            &locations[r.clone()],
            &colors[r.clone()],
            &intensities[r.clone()],
        );
        gamma_correct(&mut img, spec.gamma);
        data.extend(img);
        labels.push(
            r.clone()
                .map(|j| PartLabel::Site {
                    color: colors[j],
                    location: locations[j],
                })
                .collect(),
        );
        draws.push(
            r.map(|j| PartDraw::Site {
                intensity: intensities[j],
            })
            .collect(),
        );
    }
    Ok(LabeledBatch {
        data,
        shape: vec![b, 3, n, n],
        labels,
        draws,
    })
}

/// Generator parameters of either problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "lowercase")]
pub enum DataSpec {
    Sine1d(SineBatchSpec),
    Gradient2d(GradientBatchSpec),
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            DataSpec::Sine1d(s) => s.validate(),
            DataSpec::Gradient2d(s) => s.validate(),
        }
    }

    pub fn parts_range(&self) -> (usize, usize) {
        match self {
            DataSpec::Sine1d(s) => s.parts_range,
            DataSpec::Gradient2d(s) => s.anchor_count_range,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            DataSpec::Sine1d(s) => s.seed,
            DataSpec::Gradient2d(s) => s.seed,
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            DataSpec::Sine1d(s) => s.batch_size,
            DataSpec::Gradient2d(s) => s.batch_size,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Result<LabeledBatch> {
        match self {
            DataSpec::Sine1d(s) => sample_sine_batch(s, k, rng),
            DataSpec::Gradient2d(s) => sample_gradient_batch(s, k, rng),
        }
    }
}

/// Infinite seeded stream of batches. Each batch draws its part count
/// uniformly in `[min_parts, curriculum_k]`; data is generated on the fly.
///
/// A stream is not meant to be shared between threads; use distinct seeds for
/// parallel streams.
#[derive(Clone, Debug)]
pub struct BatchStream {
    spec: DataSpec,
    rng: ChaCha8Rng,
    curriculum_k: usize,
}

impl BatchStream {
    pub fn new(spec: DataSpec, curriculum_k: usize) -> Result<Self> {
        spec.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(spec.seed());
        let mut stream = Self {
            spec,
            rng,
            curriculum_k: 1,
        };
        stream.set_curriculum_k(curriculum_k)?;
        Ok(stream)
    }

    pub fn spec(&self) -> &DataSpec {
        &self.spec
    }

    pub fn curriculum_k(&self) -> usize {
        self.curriculum_k
    }

    pub fn set_curriculum_k(&mut self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(Error::Config("curriculum K must be >= 1".into()));
        }
        self.curriculum_k = k;
        Ok(())
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn set_rng(&mut self, rng: ChaCha8Rng) {
        self.rng = rng;
    }

    /// Draws the part count for the next batch.
    pub fn draw_k(&mut self) -> usize {
        let (lo, hi) = self.spec.parts_range();
        let hi = self.curriculum_k.min(hi).max(lo);
        self.rng.random_range(lo..=hi)
    }

    pub fn next_batch(&mut self) -> Result<LabeledBatch> {
        let k = self.draw_k();
        self.spec.sample(k, &mut self.rng)
    }
}

impl Iterator for BatchStream {
    type Item = Result<LabeledBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}
