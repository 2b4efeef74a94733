use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Embedding, Linear};
use serde::{Deserialize, Serialize};

use super::layers::{
    conv1d, conv2d, elu, embedding, linear, sum_over_others, upsample_bilinear2x, Conv1d, Residual,
    TransposedConv1d,
};
use super::params::ParamStore;
use super::{Architecture, LabelTensors, ModelConfig};
use crate::error::{Error, Result};
use crate::latentcorr::DiagGaussian;
use crate::synthgen::PALETTE;

/// Widths of the 1D (sine mixture) networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineArch {
    pub timesteps: usize,
    pub freq_min: u32,
    pub num_freqs: usize,
    /// Width of the inference-side label embedding.
    pub label_embed: usize,
    pub pz_hidden: usize,
    /// Channels after the dense-to-sequence reshape, then after each
    /// transposed convolution.
    pub dec_channels: [usize; 4],
    /// Sequence length right after the reshape.
    pub dec_base_len: usize,
    pub dec_residuals: usize,
    pub enc_channels: [usize; 3],
    pub qz_hidden: usize,
    pub qz_residuals: usize,
}

impl SineArch {
    pub fn reference() -> Self {
        Self {
            timesteps: 200,
            freq_min: 1,
            num_freqs: 10,
            label_embed: 1024,
            pz_hidden: 1280,
            dec_channels: [160, 80, 40, 20],
            dec_base_len: 5,
            dec_residuals: 3,
            enc_channels: [40, 80, 160],
            qz_hidden: 512,
            qz_residuals: 2,
        }
    }

    pub fn tiny(timesteps: usize, num_freqs: usize) -> Self {
        // the decoder must produce at least `timesteps` samples before cropping
        let dec_base_len = (2..)
            .find(|&l| decoder_len(l) >= timesteps)
            .expect("unbounded search");
        let c0 = (8 / dec_base_len).max(1);
        Self {
            timesteps,
            freq_min: 1,
            num_freqs,
            label_embed: 4,
            pz_hidden: 8,
            dec_channels: [c0, 4, 4, 2],
            dec_base_len,
            dec_residuals: 1,
            enc_channels: [4, 4, 4],
            qz_hidden: 8,
            qz_residuals: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_freqs == 0 || self.freq_min == 0 {
            return Err(Error::Config(
                "frequency vocabulary must be non-empty and positive".into(),
            ));
        }
        if encoder_len(self.timesteps).is_none() {
            return Err(Error::Config(format!(
                "timesteps = {} is too short for the 1D preprocessing convolutions",
                self.timesteps
            )));
        }
        if self.dec_base_len == 0 || decoder_len(self.dec_base_len) < self.timesteps {
            return Err(Error::Config(format!(
                "decoder base length {} produces {} < {} samples",
                self.dec_base_len,
                decoder_len(self.dec_base_len),
                self.timesteps
            )));
        }
        let widths = [
            self.label_embed,
            self.pz_hidden,
            self.qz_hidden,
            self.dec_channels[0],
            self.dec_channels[1],
            self.dec_channels[2],
            self.dec_channels[3],
            self.enc_channels[0],
            self.enc_channels[1],
            self.enc_channels[2],
        ];
        if widths.contains(&0) {
            return Err(Error::Config("all layer widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Output length of the 1D preprocessing convolutions, if positive.
fn encoder_len(t: usize) -> Option<usize> {
    let l1 = t.checked_sub(10)? / 5 + 1;
    let l3 = l1.checked_sub(6)? / 3 + 1;
    let l5 = l3.checked_sub(4)? / 2 + 1;
    Some(l5)
}

/// Length produced by the 1D transposed-convolution stack before cropping.
fn decoder_len(base: usize) -> usize {
    let l = (base.max(1) - 1) * 2 + 4;
    let l = (l - 1) * 4 + 8;
    (l - 1) * 5 + 15
}

/// Widths of the 2D (color gradient) networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientArch {
    pub pos_hidden: usize,
    pub color_embed: usize,
    pub pw_hidden: usize,
    pub pz_hidden: usize,
    /// Channels after the 8x8, 16x16 and 32x32 convolutions; the 4x4 seed has
    /// `dim_w / 16` channels.
    pub dec_channels: [usize; 3],
    pub enc_channels: [usize; 5],
}

impl GradientArch {
    pub fn reference() -> Self {
        Self {
            pos_hidden: 32,
            color_embed: 32,
            pw_hidden: 1024,
            pz_hidden: 1024,
            dec_channels: [64, 32, 16],
            enc_channels: [16, 32, 32, 48, 64],
        }
    }

    pub fn tiny() -> Self {
        Self {
            pos_hidden: 4,
            color_embed: 4,
            pw_hidden: 8,
            pz_hidden: 8,
            dec_channels: [4, 4, 4],
            enc_channels: [4, 4, 4, 4, 1],
        }
    }

    pub fn validate(&self, dim_w: usize) -> Result<()> {
        if dim_w % 16 != 0 {
            return Err(Error::Config(format!(
                "2D decoder reshapes w~ to (dim_w / 16, 4, 4); dim_w = {dim_w} is not a multiple of 16"
            )));
        }
        let widths = [
            self.pos_hidden,
            self.color_embed,
            self.pw_hidden,
            self.pz_hidden,
        ];
        if widths.contains(&0) || self.dec_channels.contains(&0) || self.enc_channels.contains(&0) {
            return Err(Error::Config("all layer widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Site labels -> `elu(dense(location)) ++ embed(color)`.
#[derive(Clone, Debug)]
pub(super) struct SiteEmbed {
    pos: Linear,
    color: Embedding,
}

impl SiteEmbed {
    fn new(ps: &mut ParamStore, path: &str, a: &GradientArch) -> Result<Self> {
        Ok(Self {
            pos: linear(ps, &format!("{path}.pos"), 2, a.pos_hidden)?,
            color: embedding(ps, &format!("{path}.color"), PALETTE.len(), a.color_embed)?,
        })
    }

    fn forward(&self, colors: &Tensor, locations: &Tensor) -> Result<Tensor> {
        let p = elu(&self.pos.forward(locations)?)?;
        let c = self.color.forward(colors)?;
        Ok(Tensor::cat(&[&p, &c], D::Minus1)?)
    }
}

fn label_mismatch() -> Error {
    Error::Label("label kind does not match the model's problem".into())
}

#[derive(Clone, Debug)]
pub(super) enum PriorW {
    Sine(Embedding),
    Gradient {
        site: SiteEmbed,
        hidden: Linear,
        out: Linear,
    },
}

impl PriorW {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(match &cfg.arch {
            Architecture::Sine1d(a) => {
                PriorW::Sine(embedding(ps, "p_w.embed", a.num_freqs, 2 * cfg.dim_w)?)
            }
            Architecture::Gradient2d(a) => PriorW::Gradient {
                site: SiteEmbed::new(ps, "p_w.site", a)?,
                hidden: linear(ps, "p_w.hidden", a.pos_hidden + a.color_embed, a.pw_hidden)?,
                out: linear(ps, "p_w.out", a.pw_hidden, 2 * cfg.dim_w)?,
            },
        })
    }

    pub fn forward(&self, labels: &LabelTensors) -> Result<DiagGaussian> {
        let raw = match (self, labels) {
            (PriorW::Sine(e), LabelTensors::Frequencies(idx)) => e.forward(idx)?,
            (PriorW::Gradient { site, hidden, out }, LabelTensors::Sites { colors, locations }) => {
                let h = site.forward(colors, locations)?;
                out.forward(&elu(&hidden.forward(&h)?)?)?
            }
            _ => return Err(label_mismatch()),
        };
        DiagGaussian::from_chunks(&raw)
    }
}

#[derive(Clone, Debug)]
pub(super) struct PriorZ {
    hidden: Linear,
    residual: Option<Residual>,
    out: Linear,
}

impl PriorZ {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let (width, residual) = match &cfg.arch {
            Architecture::Sine1d(a) => (a.pz_hidden, false),
            Architecture::Gradient2d(a) => (a.pz_hidden, true),
        };
        Ok(Self {
            hidden: linear(ps, "p_z.hidden", cfg.dim_w, width)?,
            residual: residual
                .then(|| Residual::new(ps, "p_z.residual", width))
                .transpose()?,
            out: linear(ps, "p_z.out", width, 2 * cfg.dim_z)?,
        })
    }

    pub fn forward(&self, w_tilde: &Tensor) -> Result<DiagGaussian> {
        let mut h = elu(&self.hidden.forward(w_tilde)?)?;
        if let Some(r) = &self.residual {
            h = elu(&r.forward(&h)?)?;
        }
        DiagGaussian::from_chunks(&self.out.forward(&h)?)
    }
}

#[derive(Clone, Debug)]
pub(super) enum Decoder {
    Sine {
        input: Linear,
        residuals: Vec<Residual>,
        channels: usize,
        base_len: usize,
        up: [TransposedConv1d; 3],
        smooth: [Conv1d; 2],
        out: Conv1d,
        timesteps: usize,
    },
    Gradient {
        w_res: Residual,
        z_in: Linear,
        res_tanh: Residual,
        res_elu: Residual,
        seed_channels: usize,
        convs: [Conv2d; 3],
        out: Conv2d,
    },
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(match &cfg.arch {
            Architecture::Sine1d(a) => {
                let [c0, c1, c2, c3] = a.dec_channels;
                let width = c0 * a.dec_base_len;
                Decoder::Sine {
                    input: linear(ps, "p_x.input", cfg.dim_w + cfg.dim_z, width)?,
                    residuals: (0..a.dec_residuals)
                        .map(|i| Residual::new(ps, &format!("p_x.residual{i}"), width))
                        .collect::<Result<_>>()?,
                    channels: c0,
                    base_len: a.dec_base_len,
                    up: [
                        TransposedConv1d::new(ps, "p_x.up0", c0, c1, 4, 2)?,
                        TransposedConv1d::new(ps, "p_x.up1", c1, c2, 8, 4)?,
                        TransposedConv1d::new(ps, "p_x.up2", c2, c3, 15, 5)?,
                    ],
                    smooth: [
                        conv1d(ps, "p_x.smooth0", c1, c1, 7, 1, 3)?,
                        conv1d(ps, "p_x.smooth1", c2, c2, 7, 1, 3)?,
                    ],
                    out: conv1d(ps, "p_x.out", c3, 2, 7, 1, 3)?,
                    timesteps: a.timesteps,
                }
            }
            Architecture::Gradient2d(a) => {
                let seed_channels = cfg.dim_w / 16;
                let [c1, c2, c3] = a.dec_channels;
                Decoder::Gradient {
                    w_res: Residual::new(ps, "p_x.w_res", cfg.dim_w)?,
                    z_in: linear(ps, "p_x.z_in", cfg.dim_z, cfg.dim_w)?,
                    res_tanh: Residual::new(ps, "p_x.res_tanh", cfg.dim_w)?,
                    res_elu: Residual::new(ps, "p_x.res_elu", cfg.dim_w)?,
                    seed_channels,
                    convs: [
                        conv2d(ps, "p_x.conv0", seed_channels, c1, 5, 1, 2)?,
                        conv2d(ps, "p_x.conv1", c1, c2, 5, 1, 2)?,
                        conv2d(ps, "p_x.conv2", c2, c3, 5, 1, 2)?,
                    ],
                    out: conv2d(ps, "p_x.out", c3, 4, 5, 1, 2)?,
                }
            }
        })
    }

    pub fn forward(&self, z: &Tensor, w_tilde: &Tensor) -> Result<DiagGaussian> {
        match self {
            Decoder::Sine {
                input,
                residuals,
                channels,
                base_len,
                up,
                smooth,
                out,
                timesteps,
            } => {
                let b = z.dim(0)?;
                let mut h = elu(&input.forward(&Tensor::cat(&[w_tilde, z], D::Minus1)?)?)?;
                for r in residuals {
                    h = elu(&r.forward(&h)?)?;
                }
                let h = h.reshape((b, *channels, *base_len))?;
                let h = elu(&up[0].forward(&h)?)?;
                let h = elu(&smooth[0].forward(&h)?)?;
                let h = elu(&up[1].forward(&h)?)?;
                let h = elu(&smooth[1].forward(&h)?)?;
                let h = elu(&up[2].forward(&h)?)?;
                let h = out.forward(&h)?;
                let len = h.dim(2)?;
                let start = (len - timesteps) / 2;
                let h = h.narrow(2, start, *timesteps)?;
                let mu = h.narrow(1, 0, 1)?.squeeze(1)?;
                let log_var = h.narrow(1, 1, 1)?.squeeze(1)?;
                DiagGaussian::new(mu, log_var)
            }
            Decoder::Gradient {
                w_res,
                z_in,
                res_tanh,
                res_elu,
                seed_channels,
                convs,
                out,
            } => {
                let b = z.dim(0)?;
                let h = elu(&(w_res.forward(w_tilde)? + z_in.forward(z)?)?)?;
                let h = res_tanh.forward(&h)?.tanh()?;
                let h = elu(&res_elu.forward(&h)?)?;
                let mut h = h.reshape((b, *seed_channels, 4, 4))?;
                for conv in convs {
                    h = elu(&conv.forward(&upsample_bilinear2x(&h)?)?)?;
                }
                let h = out.forward(&h)?;
                let mu = h.narrow(1, 0, 3)?;
                let log_var = h.narrow(1, 3, 1)?;
                Ok(DiagGaussian { mu, log_var })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(super) enum Preprocess {
    Sine {
        convs: [Conv1d; 5],
        residual: Residual,
        out_dim: usize,
    },
    Gradient {
        convs: [Conv2d; 5],
        residual: Residual,
        out_dim: usize,
    },
}

impl Preprocess {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(match &cfg.arch {
            Architecture::Sine1d(a) => {
                let [e1, e2, e3] = a.enc_channels;
                let len = encoder_len(a.timesteps)
                    .ok_or_else(|| Error::Config("timesteps too short".into()))?;
                let out_dim = e3 * len;
                Preprocess::Sine {
                    convs: [
                        conv1d(ps, "pre.conv0", 1, e1, 10, 5, 0)?,
                        conv1d(ps, "pre.conv1", e1, e1, 7, 1, 3)?,
                        conv1d(ps, "pre.conv2", e1, e2, 6, 3, 0)?,
                        conv1d(ps, "pre.conv3", e2, e2, 7, 1, 3)?,
                        conv1d(ps, "pre.conv4", e2, e3, 4, 2, 0)?,
                    ],
                    residual: Residual::new(ps, "pre.residual", out_dim)?,
                    out_dim,
                }
            }
            Architecture::Gradient2d(a) => {
                let [c1, c2, c3, c4, c5] = a.enc_channels;
                let out_dim = c5 * 16;
                Preprocess::Gradient {
                    convs: [
                        conv2d(ps, "pre.conv0", 3, c1, 5, 1, 2)?,
                        conv2d(ps, "pre.conv1", c1, c2, 4, 2, 1)?,
                        conv2d(ps, "pre.conv2", c2, c3, 5, 1, 2)?,
                        conv2d(ps, "pre.conv3", c3, c4, 4, 2, 1)?,
                        conv2d(ps, "pre.conv4", c4, c5, 4, 2, 1)?,
                    ],
                    residual: Residual::new(ps, "pre.residual", out_dim)?,
                    out_dim,
                }
            }
        })
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Preprocess::Sine { out_dim, .. } | Preprocess::Gradient { out_dim, .. } => *out_dim,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = x.dim(0)?;
        let flat = match self {
            Preprocess::Sine { convs, .. } => {
                let mut h = x.unsqueeze(1)?;
                for c in convs {
                    h = elu(&c.forward(&h)?)?;
                }
                h.reshape((b, ()))?
            }
            Preprocess::Gradient { convs, .. } => {
                let mut h = x.clone();
                for c in convs {
                    h = elu(&c.forward(&h)?)?;
                }
                h.reshape((b, ()))?
            }
        };
        let residual = match self {
            Preprocess::Sine { residual, .. } | Preprocess::Gradient { residual, .. } => residual,
        };
        elu(&residual.forward(&flat)?)
    }
}

/// Dense head of `q(z | x)` on top of the preprocessing block.
#[derive(Clone, Debug)]
pub(super) struct ZHead {
    input: Option<Linear>,
    residuals: Vec<Residual>,
    out: Linear,
}

impl ZHead {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, pre_dim: usize) -> Result<Self> {
        match &cfg.arch {
            Architecture::Sine1d(a) => Ok(Self {
                input: Some(linear(ps, "q_z.input", pre_dim, a.qz_hidden)?),
                residuals: (0..a.qz_residuals)
                    .map(|i| Residual::new(ps, &format!("q_z.residual{i}"), a.qz_hidden))
                    .collect::<Result<_>>()?,
                out: linear(ps, "q_z.out", a.qz_hidden, 2 * cfg.dim_z)?,
            }),
            Architecture::Gradient2d(_) => Ok(Self {
                input: None,
                residuals: vec![Residual::new(ps, "q_z.residual0", pre_dim)?],
                out: linear(ps, "q_z.out", pre_dim, 2 * cfg.dim_z)?,
            }),
        }
    }

    pub fn forward(&self, pre: &Tensor) -> Result<DiagGaussian> {
        let mut h = match &self.input {
            Some(l) => elu(&l.forward(pre)?)?,
            None => pre.clone(),
        };
        for r in &self.residuals {
            h = elu(&r.forward(&h)?)?;
        }
        DiagGaussian::from_chunks(&self.out.forward(&h)?)
    }
}

/// Inference-side label embedding `e(l_i)`.
#[derive(Clone, Debug)]
pub(super) enum LabelEncoder {
    Sine(Embedding),
    Gradient(SiteEmbed),
}

impl LabelEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        Ok(match &cfg.arch {
            Architecture::Sine1d(a) => {
                LabelEncoder::Sine(embedding(ps, "q_w.label", a.num_freqs, a.label_embed)?)
            }
            Architecture::Gradient2d(a) => {
                LabelEncoder::Gradient(SiteEmbed::new(ps, "q_w.label", a)?)
            }
        })
    }

    pub fn forward(&self, labels: &LabelTensors) -> Result<Tensor> {
        match (self, labels) {
            (LabelEncoder::Sine(e), LabelTensors::Frequencies(idx)) => Ok(e.forward(idx)?),
            (LabelEncoder::Gradient(s), LabelTensors::Sites { colors, locations }) => {
                s.forward(colors, locations)
            }
            _ => Err(label_mismatch()),
        }
    }
}

/// One round of fully connected message passing,
/// `h'_i = f(h_i, sum_{j != i} g(h_j))`.
#[derive(Clone, Debug)]
struct GraphBlock {
    g: [Residual; 2],
    f_res: Residual,
    f_mix: Linear,
    f_out: Residual,
}

impl GraphBlock {
    fn new(ps: &mut ParamStore, path: &str, n: usize, m: usize) -> Result<Self> {
        Ok(Self {
            g: [
                Residual::new(ps, &format!("{path}.g0"), n)?,
                Residual::new(ps, &format!("{path}.g1"), n)?,
            ],
            f_res: Residual::new(ps, &format!("{path}.f_res"), n)?,
            f_mix: linear(ps, &format!("{path}.f_mix"), 2 * n, m)?,
            f_out: Residual::new(ps, &format!("{path}.f_out"), m)?,
        })
    }

    /// `h` is `(B, K, N)`; returns `(B, K, M)`.
    fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let g = self.g[1].forward(&elu(&self.g[0].forward(h)?)?)?;
        let messages = sum_over_others(&g)?.tanh()?;
        let a = self.f_res.forward(&messages)?;
        let mixed = elu(&self.f_mix.forward(&Tensor::cat(&[&a, h], D::Minus1)?)?)?;
        self.f_out.forward(&mixed)
    }
}

#[derive(Clone, Debug)]
pub(super) struct GraphEncoder {
    blocks: Vec<GraphBlock>,
    out: Linear,
}

impl GraphEncoder {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, node_dim: usize) -> Result<Self> {
        let mut blocks = Vec::with_capacity(cfg.graph_layers);
        let mut width = node_dim;
        for i in 0..cfg.graph_layers {
            blocks.push(GraphBlock::new(
                ps,
                &format!("q_w.graph{i}"),
                width,
                cfg.graph_width,
            )?);
            width = cfg.graph_width;
        }
        Ok(Self {
            blocks,
            out: linear(ps, "q_w.out", width, 3 * cfg.dim_w)?,
        })
    }

    pub fn forward(&self, h0: &Tensor) -> Result<Tensor> {
        let mut h = h0.clone();
        for block in &self.blocks {
            h = elu(&block.forward(&h)?)?;
        }
        Ok(self.out.forward(&h)?)
    }
}
