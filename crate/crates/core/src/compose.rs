//! Generation from label multisets, including incremental ("add one part at a
//! time") composition.

use std::cmp::Ordering;

use candle_core::{DType, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nets::CompVae;
use crate::noise::standard_normal;
use crate::synthgen::PartLabel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ComposeMode {
    /// One whole per prefix `{l_1}, {l_1, l_2}, ...`; earlier parts keep their
    /// latent draws as parts are added.
    Incremental,
    /// A single whole from the full multiset.
    Single,
}

/// One generated whole.
#[derive(Clone, Debug)]
pub struct Generated {
    pub labels: Vec<PartLabel>,
    /// Decoder mean, flattened observation.
    pub mean: Vec<f64>,
    /// Draws from the decoder distribution.
    pub samples: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct Composition {
    /// Each part generated on its own.
    pub parts: Vec<Generated>,
    /// Wholes: one per prefix (incremental) or a single one.
    pub wholes: Vec<Generated>,
}

/// Total order on labels used to canonicalize multisets.
pub fn label_order(a: &PartLabel, b: &PartLabel) -> Ordering {
    match (a, b) {
        (PartLabel::Frequency(x), PartLabel::Frequency(y)) => x.cmp(y),
        (
            PartLabel::Site {
                color: c1,
                location: l1,
            },
            PartLabel::Site {
                color: c2,
                location: l2,
            },
        ) => c1
            .id()
            .cmp(&c2.id())
            .then(l1[0].total_cmp(&l2[0]))
            .then(l1[1].total_cmp(&l2[1])),
        (PartLabel::Frequency(_), PartLabel::Site { .. }) => Ordering::Less,
        (PartLabel::Site { .. }, PartLabel::Frequency(_)) => Ordering::Greater,
    }
}

fn to_vecs(t: &Tensor, rows: usize) -> Result<Vec<Vec<f64>>> {
    let flat: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let n = flat.len() / rows;
    Ok(flat.chunks(n).map(<[f64]>::to_vec).collect())
}

/// Per-part latents `(B, K, dim_w)` drawn from `p(w_i | l_i)`.
fn sample_parts<R: Rng + ?Sized>(
    model: &CompVae,
    labels: &[Vec<PartLabel>],
    rng: &mut R,
) -> Result<Tensor> {
    let lt = model.label_tensors(labels)?;
    let pw = model.prior_w(&lt)?;
    let eps = standard_normal(rng, pw.mu.shape(), model.dtype(), model.device())?;
    pw.sample(&eps)
}

/// Decodes wholes from `w~` of shape `(B, dim_w)`: `z ~ p(z | w~)`, then the
/// decoder mean and `samples` draws from `p(x | z, w~)`.
fn decode_from_w_tilde<R: Rng + ?Sized>(
    model: &CompVae,
    w_tilde: &Tensor,
    z_eps: &Tensor,
    samples: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
    let b = w_tilde.dim(0)?;
    let z = model.prior_z(w_tilde)?.sample(z_eps)?;
    let px = model.decode(&z, w_tilde)?;
    let mean = to_vecs(&px.mu, b)?;
    let mut draws = vec![Vec::with_capacity(samples); b];
    for _ in 0..samples {
        let eps = standard_normal(rng, px.mu.shape(), model.dtype(), model.device())?;
        let x = (&px.mu + px.std()?.broadcast_mul(&eps)?)?;
        for (d, row) in draws.iter_mut().zip(to_vecs(&x, b)?) {
            d.push(row);
        }
    }
    Ok((mean, draws))
}

/// Decoder means for a batch of label multisets sharing one size K.
pub fn generate_means<R: Rng + ?Sized>(
    model: &CompVae,
    labels: &[Vec<PartLabel>],
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    let w = sample_parts(model, labels, rng)?;
    let w_tilde = CompVae::aggregate(&w)?;
    let z_eps = standard_normal(
        rng,
        (labels.len(), model.config().dim_z),
        model.dtype(),
        model.device(),
    )?;
    Ok(decode_from_w_tilde(model, &w_tilde, &z_eps, 0, rng)?.0)
}

/// Composes wholes from `labels`. In `Single` mode the labels are first put
/// in canonical order, so any permutation of the same multiset gives
/// identical output for a given random stream.
pub fn compose<R: Rng + ?Sized>(
    model: &CompVae,
    labels: &[PartLabel],
    mode: ComposeMode,
    samples: usize,
    rng: &mut R,
) -> Result<Composition> {
    if labels.is_empty() {
        return Err(Error::Label("composition needs at least one label".into()));
    }
    let mut labels = labels.to_vec();
    if mode == ComposeMode::Single {
        labels.sort_by(label_order);
    }
    let k = labels.len();
    let w = sample_parts(model, &[labels.clone()], rng)?.squeeze(0)?;
    let dz = model.config().dim_z;
    let z_eps = standard_normal(rng, (1, dz), model.dtype(), model.device())?;

    // each part alone, with its own latent draw
    let (part_means, part_draws) = decode_from_w_tilde(
        model,
        &w,
        &z_eps.broadcast_as((k, dz))?.contiguous()?,
        samples,
        rng,
    )?;
    let parts = labels
        .iter()
        .zip(part_means.into_iter().zip(part_draws))
        .map(|(l, (mean, samples))| Generated {
            labels: vec![*l],
            mean,
            samples,
        })
        .collect();

    let prefixes: Vec<usize> = match mode {
        ComposeMode::Incremental => (1..=k).collect(),
        ComposeMode::Single => vec![k],
    };
    // cumulative sums give every prefix's w~ at once
    let mut sums = Vec::with_capacity(prefixes.len());
    for &p in &prefixes {
        sums.push(w.narrow(0, 0, p)?.sum_keepdim(0)?);
    }
    let w_tilde = Tensor::cat(&sums, 0)?;
    let n = prefixes.len();
    let (means, draws) = decode_from_w_tilde(
        model,
        &w_tilde,
        &z_eps.broadcast_as((n, dz))?.contiguous()?,
        samples,
        rng,
    )?;
    let wholes = prefixes
        .iter()
        .zip(means.into_iter().zip(draws))
        .map(|(&p, (mean, samples))| Generated {
            labels: labels[..p].to_vec(),
            mean,
            samples,
        })
        .collect();
    Ok(Composition { parts, wholes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ModelConfig;
    use crate::synthgen::Color;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn freqs(v: &[u32]) -> Vec<PartLabel> {
        v.iter().map(|&f| PartLabel::Frequency(f)).collect()
    }

    #[test]
    fn incremental_yields_one_whole_per_prefix() {
        let m = CompVae::new(ModelConfig::sine_tiny(100, 5), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = compose(
            &m,
            &freqs(&[3, 1, 4]),
            ComposeMode::Incremental,
            2,
            &mut rng,
        )
        .unwrap();
        assert_eq!(c.parts.len(), 3);
        assert_eq!(c.wholes.len(), 3);
        assert_eq!(c.wholes[1].labels, freqs(&[3, 1]));
        assert!(c
            .wholes
            .iter()
            .all(|g| g.mean.len() == 100 && g.samples.len() == 2));
        // the first prefix has the same w~ as the first part alone
        for (a, b) in c.wholes[0].mean.iter().zip(&c.parts[0].mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_mode_ignores_label_order() {
        let m = CompVae::new(ModelConfig::sine_tiny(100, 5), 0).unwrap();
        let a = compose(
            &m,
            &freqs(&[2, 5, 1]),
            ComposeMode::Single,
            1,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let b = compose(
            &m,
            &freqs(&[5, 1, 2]),
            ComposeMode::Single,
            1,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        assert_eq!(a.wholes[0].mean, b.wholes[0].mean);
        assert_eq!(a.wholes[0].samples, b.wholes[0].samples);
    }

    #[test]
    fn two_d_composition_and_errors() {
        let m = CompVae::new(ModelConfig::gradient_tiny(), 0).unwrap();
        let labels = vec![
            PartLabel::Site {
                color: Color::Red,
                location: [0.0, 0.0],
            },
            PartLabel::Site {
                color: Color::Green,
                location: [0.5, 0.5],
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = compose(&m, &labels, ComposeMode::Incremental, 0, &mut rng).unwrap();
        assert_eq!(c.wholes[1].mean.len(), 3 * 32 * 32);
        assert!(compose(&m, &[], ComposeMode::Single, 0, &mut rng).is_err());
        assert!(compose(&m, &freqs(&[1]), ComposeMode::Single, 0, &mut rng).is_err());
    }

    #[test]
    fn generate_means_is_batched() {
        let m = CompVae::new(ModelConfig::sine_tiny(100, 5), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = generate_means(&m, &[freqs(&[1, 2]), freqs(&[3, 3])], &mut rng).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().flatten().all(|v| v.is_finite()));
    }
}
