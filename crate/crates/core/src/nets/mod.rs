//! Learned distributions of the compositional VAE.
//!
//! Generative side: `p(w_i | l_i)`, `p(z | w~)` and `p(x | z, w~)` with
//! `w~ = sum_i w_i`. Inference side: `q(z | x)` and the fully connected graph
//! network producing the correlated family `q({w_i} | x, z, {l_i})`. Both
//! encoders share one preprocessing block `pre(x)`.
//!
//! All generative-side standard deviations are floored at `sigma_floor`;
//! inference-side ones are not.

mod arch;
pub mod layers;
pub mod params;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latentcorr::{CorrGaussianFamily, DiagGaussian};
use crate::synthgen::{PartLabel, IMAGE_SIZE};

pub use arch::{GradientArch, SineArch};
pub use params::ParamStore;

use arch::{Decoder, GraphEncoder, LabelEncoder, Preprocess, PriorW, PriorZ, ZHead};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Problem-specific layer widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "lowercase")]
pub enum Architecture {
    Sine1d(SineArch),
    Gradient2d(GradientArch),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim_w: usize,
    pub dim_z: usize,
    pub graph_layers: usize,
    pub graph_width: usize,
    /// Minimum standard deviation of generative-side Gaussians.
    pub sigma_floor: f64,
    /// Scale of the symmetry-breaking node noise added to label embeddings.
    pub noise_scale: f64,
    pub precision: Precision,
    pub arch: Architecture,
}

impl ModelConfig {
    /// Full-scale 1D configuration.
    pub fn sine_reference() -> Self {
        Self {
            dim_w: 256,
            dim_z: 128,
            graph_layers: 3,
            graph_width: 2048,
            sigma_floor: 1e-2,
            noise_scale: 0.1,
            precision: Precision::F32,
            arch: Architecture::Sine1d(SineArch::reference()),
        }
    }

    /// Full-scale 2D configuration.
    pub fn gradient_reference() -> Self {
        Self {
            dim_w: 2048,
            dim_z: 1024,
            graph_layers: 3,
            graph_width: 2048,
            sigma_floor: 1e-2,
            noise_scale: 0.1,
            precision: Precision::F32,
            arch: Architecture::Gradient2d(GradientArch::reference()),
        }
    }

    /// Test-scale 1D configuration: every width at most 8.
    pub fn sine_tiny(timesteps: usize, num_freqs: usize) -> Self {
        Self {
            dim_w: 4,
            dim_z: 3,
            graph_layers: 2,
            graph_width: 8,
            sigma_floor: 1e-2,
            noise_scale: 0.1,
            precision: Precision::F64,
            arch: Architecture::Sine1d(SineArch::tiny(timesteps, num_freqs)),
        }
    }

    /// Test-scale 2D configuration.
    pub fn gradient_tiny() -> Self {
        Self {
            dim_w: 16,
            dim_z: 4,
            graph_layers: 2,
            graph_width: 8,
            sigma_floor: 1e-2,
            noise_scale: 0.1,
            precision: Precision::F64,
            arch: Architecture::Gradient2d(GradientArch::tiny()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("dim_w", self.dim_w),
            ("dim_z", self.dim_z),
            ("graph_layers", self.graph_layers),
            ("graph_width", self.graph_width),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(self.sigma_floor > 0.0) {
            return Err(Error::Config("sigma_floor must be positive".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be >= 0".into()));
        }
        match &self.arch {
            Architecture::Sine1d(a) => a.validate(),
            Architecture::Gradient2d(a) => a.validate(self.dim_w),
        }
    }

    pub fn problem_name(&self) -> &'static str {
        match self.arch {
            Architecture::Sine1d(_) => "sine1d",
            Architecture::Gradient2d(_) => "gradient2d",
        }
    }

    /// Shape of one observation.
    pub fn x_shape(&self) -> Vec<usize> {
        match &self.arch {
            Architecture::Sine1d(a) => vec![a.timesteps],
            Architecture::Gradient2d(_) => vec![3, IMAGE_SIZE, IMAGE_SIZE],
        }
    }

    /// Width of the label embedding, which is also the node-noise width.
    pub fn label_dim(&self) -> usize {
        match &self.arch {
            Architecture::Sine1d(a) => a.label_embed,
            Architecture::Gradient2d(a) => a.pos_hidden + a.color_embed,
        }
    }
}

/// Labels of a batch as tensors. K is shared within a batch.
#[derive(Clone, Debug)]
pub enum LabelTensors {
    /// Zero-based frequency index, `(B, K)` u32.
    Frequencies(Tensor),
    /// Color ids `(B, K)` u32 and locations `(B, K, 2)`.
    Sites { colors: Tensor, locations: Tensor },
}

impl LabelTensors {
    pub fn parts(&self) -> usize {
        match self {
            LabelTensors::Frequencies(t) => t.dims()[1],
            LabelTensors::Sites { colors, .. } => colors.dims()[1],
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            LabelTensors::Frequencies(t) => t.dims()[0],
            LabelTensors::Sites { colors, .. } => colors.dims()[0],
        }
    }

    /// Reorders parts with the same permutation for every example.
    pub fn permute_parts(&self, perm: &[u32]) -> Result<Self> {
        let idx = Tensor::new(perm, &Device::Cpu)?;
        Ok(match self {
            LabelTensors::Frequencies(t) => LabelTensors::Frequencies(t.index_select(&idx, 1)?),
            LabelTensors::Sites { colors, locations } => LabelTensors::Sites {
                colors: colors.index_select(&idx, 1)?,
                locations: locations.index_select(&idx, 1)?,
            },
        })
    }
}

/// The full model: parameters plus every sub-network.
#[derive(Debug)]
pub struct CompVae {
    config: ModelConfig,
    params: ParamStore,
    prior_w: PriorW,
    prior_z: PriorZ,
    decoder: Decoder,
    pre: Preprocess,
    z_head: ZHead,
    labels_q: LabelEncoder,
    graph: GraphEncoder,
}

impl CompVae {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamStore::new(config.precision.dtype(), seed);
        let prior_w = PriorW::new(&mut ps, &config)?;
        let prior_z = PriorZ::new(&mut ps, &config)?;
        let decoder = Decoder::new(&mut ps, &config)?;
        let pre = Preprocess::new(&mut ps, &config)?;
        let z_head = ZHead::new(&mut ps, &config, pre.out_dim())?;
        let labels_q = LabelEncoder::new(&mut ps, &config)?;
        let node_dim = pre.out_dim() + config.dim_z + config.label_dim();
        let graph = GraphEncoder::new(&mut ps, &config, node_dim)?;
        Ok(Self {
            config,
            params: ps,
            prior_w,
            prior_z,
            decoder,
            pre,
            z_head,
            labels_q,
            graph,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Converts label lists into tensors, validating them against the
    /// configured problem.
    pub fn label_tensors(&self, labels: &[Vec<PartLabel>]) -> Result<LabelTensors> {
        let b = labels.len();
        let k = labels.first().map_or(0, Vec::len);
        if b == 0 || k == 0 {
            return Err(Error::Label(
                "at least one example with one part is required".into(),
            ));
        }
        if labels.iter().any(|l| l.len() != k) {
            return Err(Error::Label(
                "part count must be shared within a batch".into(),
            ));
        }
        let dev = self.device();
        match &self.config.arch {
            Architecture::Sine1d(a) => {
                let mut idx = Vec::with_capacity(b * k);
                for l in labels.iter().flatten() {
                    let PartLabel::Frequency(f) = *l else {
                        return Err(Error::Label(format!("{l} is not a frequency label")));
                    };
                    if f < a.freq_min || f >= a.freq_min + a.num_freqs as u32 {
                        return Err(Error::Label(format!(
                            "frequency {f} outside [{}, {}]",
                            a.freq_min,
                            a.freq_min + a.num_freqs as u32 - 1
                        )));
                    }
                    idx.push(f - a.freq_min);
                }
                Ok(LabelTensors::Frequencies(Tensor::from_vec(
                    idx,
                    (b, k),
                    dev,
                )?))
            }
            Architecture::Gradient2d(_) => {
                let mut colors = Vec::with_capacity(b * k);
                let mut locs = Vec::with_capacity(b * k * 2);
                for l in labels.iter().flatten() {
                    let PartLabel::Site { color, location } = *l else {
                        return Err(Error::Label(format!("{l} is not a site label")));
                    };
                    colors.push(color.id());
                    locs.extend(location);
                }
                Ok(LabelTensors::Sites {
                    colors: Tensor::from_vec(colors, (b, k), dev)?,
                    locations: Tensor::from_vec(locs, (b, k, 2), dev)?.to_dtype(self.dtype())?,
                })
            }
        }
    }

    /// Observations as a model-dtype tensor of shape `(B, ...)`.
    pub fn x_tensor(&self, data: &[f64], batch: usize) -> Result<Tensor> {
        let mut shape = vec![batch];
        shape.extend(self.config.x_shape());
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "data of length {} cannot be viewed as {shape:?}",
                data.len()
            )));
        }
        Ok(Tensor::from_slice(data, shape, self.device())?.to_dtype(self.dtype())?)
    }

    /// `p(w_i | l_i)` for every part, shape `(B, K, dim_w)`.
    pub fn prior_w(&self, labels: &LabelTensors) -> Result<DiagGaussian> {
        self.prior_w
            .forward(labels)?
            .with_sigma_floor(self.config.sigma_floor)
    }

    /// `p(w | l)` for a single label, shape `(dim_w,)`.
    pub fn prior_w_single(&self, label: &PartLabel) -> Result<DiagGaussian> {
        let lt = self.label_tensors(&[vec![*label]])?;
        let p = self.prior_w(&lt)?;
        DiagGaussian::new(p.mu.flatten_all()?, p.log_var.flatten_all()?)
    }

    /// `p(z | w~)`, input `(B, dim_w)`.
    pub fn prior_z(&self, w_tilde: &Tensor) -> Result<DiagGaussian> {
        self.prior_z
            .forward(w_tilde)?
            .with_sigma_floor(self.config.sigma_floor)
    }

    /// `p(x | z, w~)`. For the 2D problem the log-variance has one channel,
    /// shared by the three color channels.
    pub fn decode(&self, z: &Tensor, w_tilde: &Tensor) -> Result<DiagGaussian> {
        self.decoder
            .forward(z, w_tilde)?
            .with_sigma_floor(self.config.sigma_floor)
    }

    /// Shared preprocessing block `pre(x)`, output `(B, P)`.
    pub fn preprocess(&self, x: &Tensor) -> Result<Tensor> {
        let expect = self.config.x_shape();
        if x.dims().len() != expect.len() + 1 || x.dims()[1..] != expect[..] {
            return Err(Error::Shape(format!(
                "observation batch {:?}, expected (B, {:?})",
                x.dims(),
                expect
            )));
        }
        self.pre.forward(x)
    }

    /// `q(z | x)` from the preprocessed observation.
    pub fn encode_z(&self, pre: &Tensor) -> Result<DiagGaussian> {
        self.z_head.forward(pre)
    }

    /// `q({w_i} | x, z, {l_i})` through the fully connected graph network.
    /// `node_noise` is `(B, K, label_dim)` standard normal noise; it is scaled
    /// by `noise_scale` before being added to the label embeddings.
    pub fn encode_w(
        &self,
        pre: &Tensor,
        z: &Tensor,
        labels: &LabelTensors,
        node_noise: &Tensor,
    ) -> Result<CorrGaussianFamily> {
        let k = labels.parts();
        if k == 0 {
            return Err(Error::Label("K = 0 parts".into()));
        }
        let b = labels.batch();
        let e = self.labels_q.forward(labels)?;
        if node_noise.dims() != e.dims() {
            return Err(Error::Shape(format!(
                "node noise {:?}, expected {:?}",
                node_noise.dims(),
                e.dims()
            )));
        }
        let e = (e + (node_noise * self.config.noise_scale)?)?;
        let p = pre.dim(1)?;
        let pre_k = pre.unsqueeze(1)?.broadcast_as((b, k, p))?;
        let z_k = z.unsqueeze(1)?.broadcast_as((b, k, self.config.dim_z))?;
        let h0 = Tensor::cat(&[&pre_k, &z_k, &e], D::Minus1)?;
        let out = self.graph.forward(&h0)?;
        let dw = self.config.dim_w;
        let mu = out.narrow(D::Minus1, 0, dw)?;
        let log_var = out.narrow(D::Minus1, dw, dw)?;
        let rho_pre = out.narrow(D::Minus1, 2 * dw, dw)?;
        CorrGaussianFamily::new(mu, (log_var * 0.5)?, rho_pre)
    }

    /// Order-invariant aggregation `w~ = sum_i w_i` over the parts axis.
    pub fn aggregate(w: &Tensor) -> Result<Tensor> {
        Ok(w.sum(D::Minus2)?)
    }
}
