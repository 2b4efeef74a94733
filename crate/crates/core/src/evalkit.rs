//! Oracles and desk-scale metrics: a Monte Carlo KL oracle built from an
//! explicit Cholesky factor, empirical covariances, FFT frequency recovery
//! for 1D wholes, the amplitude-versus-K probe and the 2D color-field error.
//!
//! The frequency-recovery and color-field numbers are quantitative stand-ins
//! for visual inspection of generated samples.

use candle_core::DType;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::compose::generate_means;
use crate::error::{Error, Result};
use crate::latentcorr::{CorrGaussianFamily, DiagGaussian};
use crate::nets::CompVae;
use crate::synthgen::{
    draw_gradient, gamma_correct, sample_gradient_batch, sample_sine_batch, sine_curve,
    GradientBatchSpec, PartDraw, PartLabel, SineBatchSpec, IMAGE_SIZE,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

fn values(t: &candle_core::Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

/// Per-coordinate covariance `D S S^T D` with `S = I - rho 1^T`, built as an
/// explicit K x K matrix for each coordinate `j`.
pub fn family_covariances(q: &CorrGaussianFamily) -> Result<Vec<DMatrix<f64>>> {
    let dims = q.mu.dims();
    if dims.len() != 2 {
        return Err(Error::Shape(format!(
            "expected a (K, d) family, got {dims:?}"
        )));
    }
    let (k, d) = (dims[0], dims[1]);
    let sigma = values(&q.sigma()?)?;
    let rho = values(&q.rho()?)?;
    Ok((0..d)
        .map(|j| {
            let s = DMatrix::from_fn(k, k, |i, c| f64::from(u8::from(i == c)) - rho[i * d + j]);
            let dm = DMatrix::from_fn(k, k, |i, c| if i == c { sigma[i * d + j] } else { 0.0 });
            &dm * &s * s.transpose() * &dm
        })
        .collect())
}

/// Estimates `E_q[log q(w) - log p(w)]` by sampling `w = mu + L xi` where `L`
/// is the Cholesky factor of each coordinate's covariance. `q` and `p` are
/// `(K, d)`.
pub fn mc_kl_oracle<R: Rng + ?Sized>(
    q: &CorrGaussianFamily,
    p: &DiagGaussian,
    n_samples: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n_samples < 2 {
        return Err(Error::Config(
            "the Monte Carlo oracle needs at least 2 samples".into(),
        ));
    }
    if p.mu.dims() != q.mu.dims() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            p.mu.dims(),
            q.mu.dims()
        )));
    }
    let covs = family_covariances(q)?;
    let (k, d) = (q.mu.dims()[0], q.mu.dims()[1]);
    let mu_q = values(&q.mu)?;
    let mu_p = values(&p.mu)?;
    let nu_p = values(&p.log_var)?;
    // lower-triangular factors, row-major, plus log-determinants
    let mut factors = Vec::with_capacity(d);
    let mut log_dets = Vec::with_capacity(d);
    for (j, cov) in covs.into_iter().enumerate() {
        let chol = cov.cholesky().ok_or(Error::NotPositiveDefinite(j))?;
        let l = chol.l();
        let ld: f64 = (0..k).map(|i| 2.0 * l[(i, i)].ln()).sum();
        if !ld.is_finite() {
            return Err(Error::NotPositiveDefinite(j));
        }
        log_dets.push(ld);
        factors.push(
            (0..k * k)
                .map(|idx| l[(idx / k, idx % k)])
                .collect::<Vec<f64>>(),
        );
    }
    let inv_var_p: Vec<f64> = nu_p.iter().map(|v| (-v).exp()).collect();
    let mut xi = vec![0.0; k];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n_samples {
        let mut total = 0.0;
        for j in 0..d {
            let l = &factors[j];
            let mut xi_sq = 0.0;
            for x in xi.iter_mut() {
                *x = StandardNormal.sample(rng);
                xi_sq += *x * *x;
            }
            // (w - mu_q)^T Sigma^-1 (w - mu_q) = |xi|^2 when w - mu_q = L xi
            let log_q = -0.5 * (k as f64 * LN_2PI + log_dets[j] + xi_sq);
            let mut log_p = 0.0;
            for i in 0..k {
                let row = &l[i * k..i * k + i + 1];
                let dev: f64 = row.iter().zip(&xi).map(|(a, b)| a * b).sum();
                let w = mu_q[i * d + j] + dev;
                let e = i * d + j;
                let diff = w - mu_p[e];
                log_p += -0.5 * (LN_2PI + nu_p[e] + diff * diff * inv_var_p[e]);
            }
            total += log_q - log_p;
        }
        sum += total;
        sum_sq += total * total;
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_err: (var / n).sqrt(),
        samples: n_samples,
    })
}

/// A seeded random `(q, p)` pair of shape `(K, d)` for oracle comparisons:
/// means and log-scales are normal draws, correlation logits are shifted
/// down so that `sum_i rho_ij` spreads over `(0, 1)`.
pub fn random_family<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    d: usize,
) -> Result<(CorrGaussianFamily, DiagGaussian)> {
    let dev = &candle_core::Device::Cpu;
    let mut draw = |scale: f64, shift: f64| -> Result<candle_core::Tensor> {
        let v: Vec<f64> = (0..k * d)
            .map(|_| {
                let e: f64 = StandardNormal.sample(rng);
                shift + scale * e
            })
            .collect();
        Ok(candle_core::Tensor::from_vec(v, (k, d), dev)?)
    };
    let q = CorrGaussianFamily::new(
        draw(1.0, 0.0)?,
        draw(0.4, 0.0)?,
        draw(1.0, -(k as f64).ln())?,
    )?;
    let p = DiagGaussian::new(draw(1.0, 0.0)?, draw(0.5, 0.0)?)?;
    Ok((q, p))
}

/// Monte Carlo `Var(sum_i w_ij)` per coordinate, sampling through the
/// Cholesky factor of the explicit covariance rather than the family's own
/// reparametrization.
pub fn mc_variance_of_sum<R: Rng + ?Sized>(
    q: &CorrGaussianFamily,
    n_samples: usize,
    rng: &mut R,
) -> Result<Vec<McEstimate>> {
    if n_samples < 2 {
        return Err(Error::Config(
            "the Monte Carlo oracle needs at least 2 samples".into(),
        ));
    }
    let covs = family_covariances(q)?;
    let k = q.parts();
    let n = n_samples as f64;
    covs.into_iter()
        .enumerate()
        .map(|(j, cov)| {
            let l = cov.cholesky().ok_or(Error::NotPositiveDefinite(j))?.l();
            // column sums of L: sum_i w_i - mean = (1^T L) xi
            let c: Vec<f64> = (0..k)
                .map(|col| (0..k).map(|row| l[(row, col)]).sum())
                .collect();
            let (mut s1, mut s2, mut s4) = (0.0, 0.0, 0.0);
            let mut sums = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let s: f64 = c
                    .iter()
                    .map(|ci| {
                        let e: f64 = StandardNormal.sample(rng);
                        ci * e
                    })
                    .sum();
                s1 += s;
                sums.push(s);
            }
            let mean = s1 / n;
            for s in &sums {
                let dv = (s - mean).powi(2);
                s2 += dv;
                s4 += dv * dv;
            }
            let var = s2 / (n - 1.0);
            let m4 = s4 / n;
            Ok(McEstimate {
                mean: var,
                std_err: ((m4 - (s2 / n).powi(2)).max(0.0) / n).sqrt(),
                samples: n_samples,
            })
        })
        .collect()
}

/// Sample covariance of `samples` (rows are draws) together with the standard
/// error of every entry.
pub fn empirical_covariance(samples: &[Vec<f64>]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = samples.len();
    let k = samples.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; k];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(k, k);
    let mut sq = DMatrix::<f64>::zeros(k, k);
    for s in samples {
        for a in 0..k {
            for b in 0..k {
                let prod = (s[a] - mean[a]) * (s[b] - mean[b]);
                cov[(a, b)] += prod;
                sq[(a, b)] += prod * prod;
            }
        }
    }
    let nf = n as f64;
    let mut se = DMatrix::<f64>::zeros(k, k);
    for a in 0..k {
        for b in 0..k {
            let m = cov[(a, b)] / nf;
            let var = (sq[(a, b)] / nf - m * m).max(0.0);
            se[(a, b)] = (var / nf).sqrt();
            cov[(a, b)] = cov[(a, b)] / (nf - 1.0);
        }
    }
    (cov, se)
}

/// Outcome of matching spectral peaks to the conditioning frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqRecoveryReport {
    pub target_freqs: Vec<u32>,
    pub detected_freqs: Vec<u32>,
    /// `|target ∩ detected| / |target|` as multisets.
    pub matched_fraction: f64,
}

/// Magnitude spectrum of the mean-removed curve over bins `1..=T/2`
/// (index 0 of the result is bin 1).
pub fn magnitude_spectrum(curve: &[f64]) -> Vec<f64> {
    let n = curve.len();
    if n < 2 {
        return Vec::new();
    }
    let mean = curve.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = curve.iter().map(|v| Complex::new(v - mean, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[1..=n / 2].iter().map(|c| c.norm()).collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Bins (1-based) that are local maxima of the magnitude spectrum and lie
/// above `median + mad_factor * MAD`.
pub fn spectral_peaks(curve: &[f64], mad_factor: f64) -> Vec<usize> {
    let mags = magnitude_spectrum(curve);
    if mags.is_empty() {
        return Vec::new();
    }
    let peak = mags.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) || !peak.is_finite() {
        return Vec::new();
    }
    let med = median(&mut mags.clone());
    let mut dev: Vec<f64> = mags.iter().map(|m| (m - med).abs()).collect();
    let mad = median(&mut dev);
    let floor = (med + mad_factor * mad).max(1e-9 * peak);
    (0..mags.len())
        .filter(|&i| {
            let left = if i == 0 { 0.0 } else { mags[i - 1] };
            let right = mags.get(i + 1).copied().unwrap_or(0.0);
            mags[i] > floor && mags[i] > left && mags[i] >= right
        })
        .map(|i| i + 1)
        .collect()
}

/// Detects spectral peaks (threshold median + 3 MAD) and greedily matches
/// them to `targets` within half a bin. Bin `b` corresponds to frequency
/// `b * resolution / T`.
pub fn freq_recovery(curve: &[f64], targets: &[u32], resolution: f64) -> FreqRecoveryReport {
    let t = curve.len() as f64;
    let peaks = spectral_peaks(curve, 3.0);
    let bins_per_freq = t / resolution;
    let mut used = vec![false; peaks.len()];
    let mut matched = 0usize;
    for &f in targets {
        let want = f as f64 * bins_per_freq;
        let best = peaks
            .iter()
            .enumerate()
            .filter(|(i, &b)| !used[*i] && (b as f64 - want).abs() <= 0.5)
            .min_by(|a, b| {
                (*a.1 as f64 - want)
                    .abs()
                    .total_cmp(&(*b.1 as f64 - want).abs())
            });
        if let Some((i, _)) = best {
            used[i] = true;
            matched += 1;
        }
    }
    let detected_freqs = peaks
        .iter()
        .map(|&b| (b as f64 / bins_per_freq).round() as u32)
        .collect();
    FreqRecoveryReport {
        target_freqs: targets.to_vec(),
        detected_freqs,
        matched_fraction: if targets.is_empty() {
            0.0
        } else {
            matched as f64 / targets.len() as f64
        },
    }
}

/// `k` distinct frequency labels drawn uniformly from the inclusive range.
pub fn distinct_frequencies<R: Rng + ?Sized>(
    k: usize,
    freq_range: (u32, u32),
    rng: &mut R,
) -> Result<Vec<PartLabel>> {
    let span = (freq_range.1 - freq_range.0 + 1) as usize;
    if k == 0 || k > span {
        return Err(Error::Config(format!(
            "cannot draw {k} distinct frequencies from {}..={}",
            freq_range.0, freq_range.1
        )));
    }
    let mut picked: Vec<u32> = rand::seq::index::sample(rng, span, k)
        .into_iter()
        .map(|i| freq_range.0 + i as u32)
        .collect();
    picked.sort_unstable();
    Ok(picked.into_iter().map(PartLabel::Frequency).collect())
}

/// Scores `n` conditioned generations: each label set holds `K` distinct
/// frequencies with `K` uniform in `1..=max_k`, and the decoder mean is run
/// through [`freq_recovery`].
pub fn freq_recovery_probe<R: Rng + ?Sized>(
    model: &CompVae,
    resolution: f64,
    freq_range: (u32, u32),
    max_k: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<FreqRecoveryReport>> {
    (0..n)
        .map(|_| {
            let k = rng.random_range(1..=max_k);
            let labels = distinct_frequencies(k, freq_range, rng)?;
            let mean = generate_means(model, std::slice::from_ref(&labels), rng)?.remove(0);
            let targets: Vec<u32> = labels.iter().filter_map(PartLabel::frequency).collect();
            Ok(freq_recovery(&mean, &targets, resolution))
        })
        .collect()
}

pub fn mean_matched_fraction(reports: &[FreqRecoveryReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().map(|r| r.matched_fraction).sum::<f64>() / reports.len() as f64
}

/// One 2D probe: the model's error against the expected image and the same
/// error for an actual ground-truth sample of the labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorFieldRow {
    pub labels: Vec<PartLabel>,
    pub error: f64,
    pub ground_truth_error: f64,
}

/// Scores `n` generations with label sets drawn by the 2D generator, `K`
/// uniform in `1..=max_k`.
pub fn color_field_probe<R: Rng + ?Sized>(
    model: &CompVae,
    spec: &GradientBatchSpec,
    max_k: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ColorFieldRow>> {
    let spec = GradientBatchSpec {
        batch_size: 1,
        ..spec.clone()
    };
    (0..n)
        .map(|_| {
            let k = rng.random_range(spec.anchor_count_range.0..=max_k);
            let truth = sample_gradient_batch(&spec, k, rng)?;
            let labels = truth.labels[0].clone();
            let mean = generate_means(model, std::slice::from_ref(&labels), rng)?.remove(0);
            let expected = expected_gradient_image(&labels, &spec, 64, rng)?;
            Ok(ColorFieldRow {
                error: rgb_distance(&mean, &expected)?,
                ground_truth_error: rgb_distance(truth.example(0), &expected)?,
                labels,
            })
        })
        .collect()
}

/// Anything that turns label multisets of one size into flattened wholes.
pub trait WholeGenerator {
    fn generate(&mut self, labels: &[Vec<PartLabel>]) -> Result<Vec<Vec<f64>>>;
}

/// The reference 1D generator with its own random stream.
pub struct GroundTruthSine<R> {
    pub spec: SineBatchSpec,
    pub rng: R,
}

impl<R: Rng> WholeGenerator for GroundTruthSine<R> {
    fn generate(&mut self, labels: &[Vec<PartLabel>]) -> Result<Vec<Vec<f64>>> {
        let k = labels.first().map_or(0, Vec::len);
        let spec = SineBatchSpec {
            batch_size: labels.len(),
            ..self.spec.clone()
        };
        // draw amplitudes and phases from the generator, then impose labels
        let batch = sample_sine_batch(&spec, k, &mut self.rng)?;
        labels
            .iter()
            .zip(&batch.draws)
            .map(|(ls, draws)| {
                let freqs = ls
                    .iter()
                    .map(|l| {
                        l.frequency()
                            .ok_or_else(|| Error::Label(format!("{l} is not a frequency label")))
                    })
                    .collect::<Result<Vec<u32>>>()?;
                let (amps, phases): (Vec<f64>, Vec<f64>) = draws
                    .iter()
                    .map(|d| match *d {
                        PartDraw::Sine { amplitude, phase } => (amplitude, phase),
                        PartDraw::Site { .. } => unreachable!("sine batches carry sine draws"),
                    })
                    .unzip();
                Ok(sine_curve(
                    &freqs,
                    &amps,
                    &phases,
                    spec.timesteps,
                    spec.resolution,
                    spec.nonlinearity,
                ))
            })
            .collect()
    }
}

/// A trained model generating decoder means.
pub struct ModelGenerator<'a, R> {
    pub model: &'a CompVae,
    pub rng: R,
}

impl<R: Rng> WholeGenerator for ModelGenerator<'_, R> {
    fn generate(&mut self, labels: &[Vec<PartLabel>]) -> Result<Vec<Vec<f64>>> {
        generate_means(self.model, labels, &mut self.rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeRow {
    pub k: usize,
    pub mean_abs: f64,
    pub all_finite: bool,
}

/// Mean absolute value of `n` wholes for each part count in `ks`, with label
/// multisets drawn uniformly (with replacement) from `freq_range`.
pub fn amplitude_vs_k_probe<G: WholeGenerator, R: Rng + ?Sized>(
    gen: &mut G,
    ks: &[usize],
    n: usize,
    freq_range: (u32, u32),
    rng: &mut R,
) -> Result<Vec<AmplitudeRow>> {
    let dist = Uniform::new_inclusive(freq_range.0, freq_range.1)
        .map_err(|e| Error::Config(e.to_string()))?;
    ks.iter()
        .map(|&k| {
            let labels: Vec<Vec<PartLabel>> = (0..n)
                .map(|_| {
                    (0..k)
                        .map(|_| PartLabel::Frequency(dist.sample(rng)))
                        .collect()
                })
                .collect();
            let wholes = gen.generate(&labels)?;
            let all: Vec<f64> = wholes.into_iter().flatten().collect();
            let all_finite = all.iter().all(|v| v.is_finite());
            let mean_abs = all.iter().map(|v| v.abs()).sum::<f64>() / all.len().max(1) as f64;
            Ok(AmplitudeRow {
                k,
                mean_abs,
                all_finite,
            })
        })
        .collect()
}

/// Ground-truth expected image for site labels: the average of `n` gamma
/// corrected renderings with fresh intensity draws.
pub fn expected_gradient_image<R: Rng + ?Sized>(
    labels: &[PartLabel],
    spec: &GradientBatchSpec,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut locations = Vec::with_capacity(labels.len());
    let mut colors = Vec::with_capacity(labels.len());
    for l in labels {
        let PartLabel::Site { color, location } = *l else {
            return Err(Error::Label(format!("{l} is not a site label")));
        };
        colors.push(color);
        locations.push(location);
    }
    let dist = Uniform::new(spec.intensity_range.0, spec.intensity_range.1)
        .map_err(|e| Error::Config(e.to_string()))?;
    let size = 3 * IMAGE_SIZE * IMAGE_SIZE;
    let mut acc = vec![0.0; size];
    for _ in 0..n {
        let intensities: Vec<f64> = (0..labels.len()).map(|_| dist.sample(rng)).collect();
        let mut img = draw_gradient(&locations, &colors, &intensities);
        gamma_correct(&mut img, spec.gamma);
        for (a, v) in acc.iter_mut().zip(&img) {
            *a += v / n as f64;
        }
    }
    Ok(acc)
}

/// Mean over pixels of the Euclidean RGB distance between two `(3, 32, 32)`
/// images; lies in `[0, sqrt(3)]` for images in `[0, 1]`.
pub fn rgb_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    if a.len() != 3 * plane || b.len() != 3 * plane {
        return Err(Error::Shape(format!(
            "images must hold 3 x {IMAGE_SIZE} x {IMAGE_SIZE} values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let total: f64 = (0..plane)
        .map(|p| {
            (0..3)
                .map(|c| (a[c * plane + p] - b[c * plane + p]).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / plane as f64)
}

/// Distance between a generated image and the ground-truth expected image of
/// the same labels (64 intensity draws).
pub fn color_field_error<R: Rng + ?Sized>(
    generated: &[f64],
    labels: &[PartLabel],
    spec: &GradientBatchSpec,
    rng: &mut R,
) -> Result<f64> {
    let expected = expected_gradient_image(labels, spec, 64, rng)?;
    rgb_distance(generated, &expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::Color;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_frequency_is_recovered() {
        let curve = sine_curve(&[4], &[1.0], &[0.0], 200, 100.0, 3.0);
        let r = freq_recovery(&curve, &[4], 100.0);
        assert_eq!(r.matched_fraction, 1.0);
        assert!(r.detected_freqs.contains(&4));
    }

    #[test]
    fn zero_curve_detects_nothing() {
        let r = freq_recovery(&[0.0; 200], &[3], 100.0);
        assert!(r.detected_freqs.is_empty());
        assert_eq!(r.matched_fraction, 0.0);
    }

    #[test]
    fn near_linear_mixture_shows_both_peaks() {
        let curve = sine_curve(&[2, 7], &[1.0, 0.8], &[0.3, -1.0], 200, 100.0, 0.1);
        assert_eq!(freq_recovery(&curve, &[2, 7], 100.0).matched_fraction, 1.0);
    }

    #[test]
    fn duplicate_targets_match_at_most_once_per_peak() {
        let curve = sine_curve(&[3, 3], &[1.0, 1.0], &[0.0, 0.5], 200, 100.0, 0.5);
        let r = freq_recovery(&curve, &[3, 3], 100.0);
        assert_eq!(r.matched_fraction, 0.5);
    }

    #[test]
    fn gray_versus_white_field_is_closed_form() {
        let spec = GradientBatchSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let label = [PartLabel::Site {
            color: Color::White,
            location: [0.2, 0.3],
        }];
        let gray = vec![0.5; 3 * 32 * 32];
        let e = color_field_error(&gray, &label, &spec, &mut rng).unwrap();
        assert!((e - 0.75f64.sqrt()).abs() < 1e-12);
        let white = vec![1.0; 3 * 32 * 32];
        assert_eq!(
            color_field_error(&white, &label, &spec, &mut rng).unwrap(),
            0.0
        );
        assert!(rgb_distance(&gray, &white[..10]).is_err());
    }

    #[test]
    fn ground_truth_amplitude_grows_with_k() {
        let spec = SineBatchSpec::default();
        let mut gen = GroundTruthSine {
            spec: spec.clone(),
            rng: ChaCha8Rng::seed_from_u64(1),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows =
            amplitude_vs_k_probe(&mut gen, &[1, 2, 4, 8], 400, spec.freq_range, &mut rng).unwrap();
        assert!(
            rows.windows(2).all(|w| w[1].mean_abs > w[0].mean_abs),
            "{rows:?}"
        );
        let ratio = rows[1].mean_abs / rows[0].mean_abs;
        assert!(ratio > 1.2 && ratio < 2.2, "{ratio}");
    }

    #[test]
    fn ground_truth_generator_imposes_labels() {
        let spec = SineBatchSpec {
            nonlinearity: 0.1,
            ..SineBatchSpec::default()
        };
        let mut gen = GroundTruthSine {
            spec,
            rng: ChaCha8Rng::seed_from_u64(3),
        };
        let labels = vec![vec![PartLabel::Frequency(6)]];
        let w = gen.generate(&labels).unwrap();
        assert_eq!(freq_recovery(&w[0], &[6], 100.0).matched_fraction, 1.0);
    }
}
