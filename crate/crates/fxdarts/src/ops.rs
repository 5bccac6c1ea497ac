//! Candidate operator set and parameterized operator instances.
//!
//! Three operator kinds exist: skip-connect, 3x3 depthwise-separable
//! convolution, and 5x5 dilated depthwise-separable convolution. The
//! separable blocks run relu -> depthwise -> pointwise -> channel-affine
//! norm, applied once. A skip-connect that must change stride or channel
//! count becomes a strided 1x1 projection; otherwise it is a free identity.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Binder, ParamId, ParamStore, Tape, Tensor, TensorError, TensorId};

#[derive(Debug, Error)]
pub enum OpError {
    #[error("unsupported stride {0} (expected 1, 2, or 4)")]
    UnsupportedStride(usize),

    #[error("channel counts must be positive (got {in_channels} -> {out_channels})")]
    BadChannels {
        in_channels: usize,
        out_channels: usize,
    },

    #[error("operator expects {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The candidate operator kinds. Serialized with the same short tags used
/// in genotype JSON.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperatorKind {
    #[serde(rename = "skip")]
    SkipConnect,
    #[serde(rename = "sep3")]
    SepConv3x3,
    #[serde(rename = "dil5")]
    DilConv5x5,
}

impl OperatorKind {
    /// Short name used in genotype JSON and DOT labels.
    pub fn tag(self) -> &'static str {
        match self {
            OperatorKind::SkipConnect => "skip",
            OperatorKind::SepConv3x3 => "sep3",
            OperatorKind::DilConv5x5 => "dil5",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "skip" => Some(OperatorKind::SkipConnect),
            "sep3" => Some(OperatorKind::SepConv3x3),
            "dil5" => Some(OperatorKind::DilConv5x5),
            _ => None,
        }
    }
}

/// Preset operator spaces, ordered by inclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpaceId {
    O1,
    O2,
    O3,
}

impl SpaceId {
    pub fn as_str(self) -> &'static str {
        match self {
            SpaceId::O1 => "O1",
            SpaceId::O2 => "O2",
            SpaceId::O3 => "O3",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "O1" => Some(SpaceId::O1),
            "O2" => Some(SpaceId::O2),
            "O3" => Some(SpaceId::O3),
            _ => None,
        }
    }
}

/// An ordered, duplicate-free list of candidate operators.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorSpace {
    pub id: SpaceId,
    kinds: Vec<OperatorKind>,
}

impl OperatorSpace {
    pub fn preset(id: SpaceId) -> Self {
        let kinds = match id {
            SpaceId::O1 => vec![OperatorKind::SkipConnect],
            SpaceId::O2 => vec![OperatorKind::SkipConnect, OperatorKind::SepConv3x3],
            SpaceId::O3 => vec![
                OperatorKind::SkipConnect,
                OperatorKind::SepConv3x3,
                OperatorKind::DilConv5x5,
            ],
        };
        Self { id, kinds }
    }

    pub fn kinds(&self) -> &[OperatorKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }
}

/// Channel-affine normalization parameters (gain, bias), tracked separately
/// from the convolution kernels so `parameters` matches `op_param_count`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

/// A concrete operator on one edge, owning handles to its parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OperatorInstance {
    pub kind: OperatorKind,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Convolution kernels only; empty for an identity skip.
    pub parameters: Vec<ParamId>,
    pub norm: Option<NormParams>,
}

impl OperatorInstance {
    pub fn is_identity(&self) -> bool {
        self.parameters.is_empty()
    }
}

fn validate(in_channels: usize, out_channels: usize, stride: usize) -> Result<(), OpError> {
    if in_channels == 0 || out_channels == 0 {
        return Err(OpError::BadChannels {
            in_channels,
            out_channels,
        });
    }
    // Stride 4 bridges the resolution gap that appears when the two
    // reduction cells are adjacent (small L) and an edge leaves node 1.
    if !matches!(stride, 1 | 2 | 4) {
        return Err(OpError::UnsupportedStride(stride));
    }
    Ok(())
}

fn uniform_init(rng: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor { shape, data }
}

fn register_norm(
    store: &mut ParamStore,
    path: &str,
    channels: usize,
) -> NormParams {
    let gain = store.register(
        format!("{path}.norm.gain"),
        Tensor::new(vec![channels], vec![1.0; channels]).unwrap(),
    );
    let bias = store.register(format!("{path}.norm.bias"), Tensor::zeros(&[channels]));
    NormParams { gain, bias }
}

/// Builds an operator instance with freshly initialized parameters.
/// Kernel weights draw from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in));
/// norm gains start at 1 and biases at 0.
pub fn build_operator(
    kind: OperatorKind,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    store: &mut ParamStore,
    path: &str,
    rng: &mut impl Rng,
) -> Result<OperatorInstance, OpError> {
    validate(in_channels, out_channels, stride)?;
    let mut parameters = Vec::new();
    let mut norm = None;
    match kind {
        OperatorKind::SkipConnect => {
            if stride != 1 || in_channels != out_channels {
                let w = uniform_init(rng, vec![out_channels, in_channels, 1, 1], in_channels);
                parameters.push(store.register(format!("{path}.proj"), w));
                norm = Some(register_norm(store, path, out_channels));
            }
        }
        OperatorKind::SepConv3x3 => {
            let dw = uniform_init(rng, vec![in_channels, 1, 3, 3], 9);
            let pw = uniform_init(rng, vec![out_channels, in_channels, 1, 1], in_channels);
            parameters.push(store.register(format!("{path}.dw"), dw));
            parameters.push(store.register(format!("{path}.pw"), pw));
            norm = Some(register_norm(store, path, out_channels));
        }
        OperatorKind::DilConv5x5 => {
            let dw = uniform_init(rng, vec![in_channels, 1, 5, 5], 25);
            let pw = uniform_init(rng, vec![out_channels, in_channels, 1, 1], in_channels);
            parameters.push(store.register(format!("{path}.dw"), dw));
            parameters.push(store.register(format!("{path}.pw"), pw));
            norm = Some(register_norm(store, path, out_channels));
        }
    }
    Ok(OperatorInstance {
        kind,
        stride,
        in_channels,
        out_channels,
        parameters,
        norm,
    })
}

/// Applies an operator to a tape value.
pub fn apply(
    op: &OperatorInstance,
    tape: &mut Tape,
    binder: &mut Binder,
    store: &ParamStore,
    x: TensorId,
) -> Result<TensorId, OpError> {
    let got = tape.value(x).shape[1];
    if got != op.in_channels {
        return Err(OpError::ChannelMismatch {
            expected: op.in_channels,
            got,
        });
    }
    let out = match op.kind {
        OperatorKind::SkipConnect => {
            if op.is_identity() {
                return Ok(x);
            }
            let w = binder.bind(tape, store, op.parameters[0]);
            tape.conv2d(x, w, op.stride, 0, 1, 1)?
        }
        OperatorKind::SepConv3x3 => {
            let dw = binder.bind(tape, store, op.parameters[0]);
            let pw = binder.bind(tape, store, op.parameters[1]);
            let a = tape.relu(x);
            let d = tape.conv2d(a, dw, op.stride, 1, 1, op.in_channels)?;
            tape.conv2d(d, pw, 1, 0, 1, 1)?
        }
        OperatorKind::DilConv5x5 => {
            let dw = binder.bind(tape, store, op.parameters[0]);
            let pw = binder.bind(tape, store, op.parameters[1]);
            let a = tape.relu(x);
            let d = tape.conv2d(a, dw, op.stride, 4, 2, op.in_channels)?;
            tape.conv2d(d, pw, 1, 0, 1, 1)?
        }
    };
    let out = match &op.norm {
        Some(n) => {
            let g = binder.bind(tape, store, n.gain);
            let b = binder.bind(tape, store, n.bias);
            tape.affine_channel_norm(out, g, b)?
        }
        None => out,
    };
    Ok(out)
}

/// Convolution-kernel scalar count of an operator (norm excluded).
pub fn op_param_count(
    kind: OperatorKind,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
) -> usize {
    match kind {
        OperatorKind::SkipConnect => {
            if stride == 1 && in_channels == out_channels {
                0
            } else {
                in_channels * out_channels
            }
        }
        OperatorKind::SepConv3x3 => 9 * in_channels + in_channels * out_channels,
        OperatorKind::DilConv5x5 => 25 * in_channels + in_channels * out_channels,
    }
}

/// Number of channel-affine norm scalars the built instance carries.
pub fn op_norm_param_count(
    kind: OperatorKind,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
) -> usize {
    match kind {
        OperatorKind::SkipConnect if stride == 1 && in_channels == out_channels => 0,
        _ => 2 * out_channels,
    }
}

/// FLOPs at the 2x multiply-accumulate convention. Identity skips cost 0;
/// every convolution costs 2 * kernel-scalars * output area. Norms, relu,
/// and additions are not counted.
pub fn op_flop_count(
    kind: OperatorKind,
    in_channels: usize,
    out_channels: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> u64 {
    2 * op_param_count(kind, in_channels, out_channels, stride) as u64 * (out_h * out_w) as u64
}
