//! The candidate operations placed on every cell edge.
//!
//! All candidates map `[B, C, D, H, W]` to the same shape: stride 1 and
//! "same" zero padding. Convolutional candidates are blocks
//! `conv -> normalize3d -> relu`; the separable variants use a depthwise
//! convolution followed by a pointwise one inside the block. Pooling, skip
//! and zero carry no parameters.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvGeom, PoolMode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec, ParamStore};
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const DILATION: usize = 2;
pub const POOL_KERNEL: usize = 3;

/// Candidate operation. The declaration order is the index order of every
/// architecture logit vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Conv3,
    Conv5,
    SepConv3,
    SepConv5,
    DilConv3,
    DilConv5,
    MaxPool3,
    AvgPool3,
    Skip,
    Zero,
}

impl OpKind {
    pub const ALL: [OpKind; 10] = [
        OpKind::Conv3,
        OpKind::Conv5,
        OpKind::SepConv3,
        OpKind::SepConv5,
        OpKind::DilConv3,
        OpKind::DilConv5,
        OpKind::MaxPool3,
        OpKind::AvgPool3,
        OpKind::Skip,
        OpKind::Zero,
    ];

    pub const COUNT: usize = Self::ALL.len();

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv3 => "conv3",
            OpKind::Conv5 => "conv5",
            OpKind::SepConv3 => "sep_conv3",
            OpKind::SepConv5 => "sep_conv5",
            OpKind::DilConv3 => "dil_conv3",
            OpKind::DilConv5 => "dil_conv5",
            OpKind::MaxPool3 => "max_pool3",
            OpKind::AvgPool3 => "avg_pool3",
            OpKind::Skip => "skip",
            OpKind::Zero => "zero",
        }
    }

    /// Spatial kernel size, for operations that have one.
    pub fn kernel(self) -> Option<usize> {
        match self {
            OpKind::Conv3 | OpKind::SepConv3 | OpKind::DilConv3 => Some(3),
            OpKind::Conv5 | OpKind::SepConv5 | OpKind::DilConv5 => Some(5),
            OpKind::MaxPool3 | OpKind::AvgPool3 => Some(POOL_KERNEL),
            OpKind::Skip | OpKind::Zero => None,
        }
    }

    pub fn has_params(self) -> bool {
        !op_param_shapes(self, 1).is_empty()
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Genotype(format!("unknown operation `{s}`")))
    }
}

/// Learnable tensors of one operation on `channels` channels, as
/// `(suffix, shape)` pairs. Empty for parameter-free operations.
pub fn op_param_shapes(kind: OpKind, channels: usize) -> Vec<(&'static str, Vec<usize>)> {
    let c = channels;
    let affine = [("gamma", vec![c]), ("beta", vec![c])];
    match kind {
        OpKind::Conv3 | OpKind::Conv5 | OpKind::DilConv3 | OpKind::DilConv5 => {
            let k = kind.kernel().unwrap();
            let mut v = vec![("weight", vec![c, c, k, k, k])];
            v.extend(affine);
            v
        }
        OpKind::SepConv3 | OpKind::SepConv5 => {
            let k = kind.kernel().unwrap();
            let mut v = vec![("depthwise", vec![c, 1, k, k, k]), ("pointwise", vec![c, c, 1, 1, 1])];
            v.extend(affine);
            v
        }
        OpKind::MaxPool3 | OpKind::AvgPool3 | OpKind::Skip | OpKind::Zero => Vec::new(),
    }
}

fn init_for(suffix: &str) -> Init {
    match suffix {
        "gamma" => Init::Ones,
        "beta" => Init::Zeros,
        _ => Init::FanInUniform,
    }
}

/// Parameter declarations of `kind` under `<prefix>/<op name>/...`.
pub fn op_param_specs(prefix: &str, kind: OpKind, channels: usize) -> Vec<ParamSpec> {
    op_param_shapes(kind, channels)
        .into_iter()
        .map(|(suffix, shape)| ParamSpec::new(format!("{prefix}/{kind}/{suffix}"), shape, init_for(suffix)))
        .collect()
}

/// Parameters of one operation, bound to a tape.
#[derive(Debug, Clone)]
pub struct OpParams {
    kind: OpKind,
    channels: usize,
    vars: Vec<Var>,
}

impl OpParams {
    /// Looks up the parameters of `kind` under `prefix`, checking their
    /// shapes against [`op_param_shapes`].
    pub fn bind(tape: &mut Tape, store: &ParamStore, prefix: &str, kind: OpKind, channels: usize) -> Result<Self> {
        let vars = op_param_shapes(kind, channels)
            .into_iter()
            .map(|(suffix, shape)| tape.param_shaped(store, &format!("{prefix}/{kind}/{suffix}"), &shape))
            .collect::<Result<_>>()?;
        Ok(Self { kind, channels, vars })
    }

    /// Parameters for an operation that has none.
    pub fn empty(kind: OpKind, channels: usize) -> Self {
        Self {
            kind,
            channels,
            vars: Vec::new(),
        }
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }
}

/// Applies one candidate operation.
pub fn apply_op(tape: &mut Tape, kind: OpKind, x: Var, params: &OpParams) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 5 {
        return Err(Error::InvalidShape {
            shape,
            reason: "operations expect [B, C, D, H, W]".into(),
        });
    }
    let c = shape[1];
    if params.kind != kind || params.channels != c || params.vars.len() != op_param_shapes(kind, c).len() {
        return Err(Error::Config(format!(
            "parameters for {} on {} channels cannot drive {kind} on {c} channels",
            params.kind, params.channels
        )));
    }
    let p = &params.vars;
    let conv_block = |tape: &mut Tape, y: Var, gamma: Var, beta: Var| -> Result<Var> {
        let y = tape.normalize3d(y, gamma, beta, NORM_EPS)?;
        Ok(tape.relu(y))
    };
    match kind {
        OpKind::Conv3 | OpKind::Conv5 => {
            let y = tape.conv3d(x, p[0], ConvGeom::same(kind.kernel().unwrap(), 1))?;
            conv_block(tape, y, p[1], p[2])
        }
        OpKind::DilConv3 | OpKind::DilConv5 => {
            let y = tape.conv3d(x, p[0], ConvGeom::same(kind.kernel().unwrap(), DILATION))?;
            conv_block(tape, y, p[1], p[2])
        }
        OpKind::SepConv3 | OpKind::SepConv5 => {
            let geom = ConvGeom::same(kind.kernel().unwrap(), 1).depthwise(c);
            let y = tape.conv3d(x, p[0], geom)?;
            let y = tape.conv3d(y, p[1], ConvGeom::strided(1))?;
            conv_block(tape, y, p[2], p[3])
        }
        OpKind::MaxPool3 => tape.pool3d(x, POOL_KERNEL, PoolMode::Max),
        OpKind::AvgPool3 => tape.pool3d(x, POOL_KERNEL, PoolMode::Avg),
        OpKind::Skip => Ok(x),
        OpKind::Zero => Ok(tape.constant(Tensor::zeros(shape)?)),
    }
}
