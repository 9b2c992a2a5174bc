//! 2D projection backbone: a small strided convolutional stack producing
//! grid features, flattened to tokens, plus the residual block used for
//! modal-specific interaction.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{init_bias, init_conv, Graph, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::Var;

#[derive(Clone, Copy, Debug)]
pub struct ConvStage {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvStage {
    /// Same-style padding k/2; odd kernels keep centering exact.
    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Clone, Debug)]
pub struct ConvStackConfig {
    pub stages: Vec<ConvStage>,
}

impl ConvStackConfig {
    pub fn out_channels(&self) -> usize {
        self.stages.last().map(|s| s.out_channels).unwrap_or(0)
    }

    /// (H', W', token count) after all strides; rejects dims the strides
    /// do not divide cleanly.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = (h, w);
        for (i, s) in self.stages.iter().enumerate() {
            if s.stride == 0 || s.kernel == 0 || s.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "conv stage {i}: kernel must be odd and stride >= 1"
                )));
            }
            if h % s.stride != 0 || w % s.stride != 0 {
                return Err(Error::shape(
                    "conv_stack",
                    format!("stage {i}: stride {} does not divide {h}x{w}", s.stride),
                ));
            }
            h /= s.stride;
            w /= s.stride;
            if h == 0 || w == 0 {
                return Err(Error::shape("conv_stack", format!("stage {i} collapses the grid")));
            }
        }
        Ok((h, w, h * w))
    }
}

pub struct ConvStackIds {
    pub stages: Vec<(ParamId, ParamId)>,
}

impl ConvStackIds {
    pub fn create<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_channels: usize,
        cfg: &ConvStackConfig,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(cfg.stages.len());
        let mut cin = in_channels;
        for (i, s) in cfg.stages.iter().enumerate() {
            let k = store.add(
                &format!("{prefix}.c{i}.k"),
                init_conv(rng, s.kernel, s.kernel, cin, s.out_channels),
            )?;
            let b = store.add(&format!("{prefix}.c{i}.b"), init_bias(s.out_channels))?;
            stages.push((k, b));
            cin = s.out_channels;
        }
        Ok(Self { stages })
    }
}

/// Staged conv + rectified-linear over an [H, W, Cin] image variable;
/// returns row-major tokens (H'·W') x C and the output grid dims.
pub fn encode2d<S: Scalar>(
    g: &mut Graph<S>,
    img: Var,
    cfg: &ConvStackConfig,
    ids: &ConvStackIds,
) -> Result<(Var, (usize, usize))> {
    let shape = g.tape.value(img).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("encode2d", format!("expected [H, W, C] image, got {shape:?}")));
    }
    let (oh, ow, tokens) = cfg.out_dims(shape[0], shape[1])?;
    let mut x = img;
    for (stage, &(k, b)) in cfg.stages.iter().zip(&ids.stages) {
        let kv = g.param(k);
        let bv = g.param(b);
        let y = g.tape.conv2d(x, kv, bv, stage.stride, stage.padding())?;
        x = g.tape.relu(y);
    }
    let flat = g.tape.reshape(x, &[tokens, cfg.out_channels()])?;
    Ok((flat, (oh, ow)))
}

pub struct ResBlockIds {
    pub k1: ParamId,
    pub b1: ParamId,
    pub k2: ParamId,
    pub b2: ParamId,
}

impl ResBlockIds {
    pub fn create<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            k1: store.add(&format!("{prefix}.k1"), init_conv(rng, 3, 3, channels, channels))?,
            b1: store.add(&format!("{prefix}.b1"), init_bias(channels))?,
            k2: store.add(&format!("{prefix}.k2"), init_conv(rng, 3, 3, channels, channels))?,
            b2: store.add(&format!("{prefix}.b2"), init_bias(channels))?,
        })
    }
}

/// Basic residual block over tokens laid out as an (h x w) grid:
/// out = x + conv2(relu(conv1(x))), both convolutions 3x3 stride 1 with
/// same padding. No activation after the skip, so zeroed weights give the
/// exact identity.
pub fn res_block<S: Scalar>(
    g: &mut Graph<S>,
    tokens: Var,
    grid: (usize, usize),
    ids: &ResBlockIds,
) -> Result<Var> {
    let shape = g.tape.value(tokens).shape().to_vec();
    let (h, w) = grid;
    if shape.len() != 2 || shape[0] != h * w {
        return Err(Error::shape(
            "res_block",
            format!("{:?} tokens do not form a {h}x{w} grid", shape),
        ));
    }
    let c = shape[1];
    let x = g.tape.reshape(tokens, &[h, w, c])?;
    let k1 = g.param(ids.k1);
    let b1 = g.param(ids.b1);
    let k2 = g.param(ids.k2);
    let b2 = g.param(ids.b2);
    let y = g.tape.conv2d(x, k1, b1, 1, 1)?;
    let y = g.tape.relu(y);
    let y = g.tape.conv2d(y, k2, b2, 1, 1)?;
    let out = g.tape.add(x, y)?;
    g.tape.reshape(out, &[h * w, c])
}
