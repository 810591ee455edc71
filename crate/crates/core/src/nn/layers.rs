use super::{Activation, Init, NormKind, ParamId, ParamStore};
use crate::error::Result;
use crate::tensor::{self, Element, Tensor, NORM_EPS};

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    weight: ParamId,
    bias: Option<ParamId>,
    stride: usize,
    padding: usize,
}

impl Conv {
    /// Kernel `k` with "same" padding; `stride` 2 halves the extents.
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        let weight = init.conv_weight(format!("{name}.weight"), cin, cout, k);
        let bias = bias.then(|| init.constant(format!("{name}.bias"), cout, 0.0));
        Conv {
            weight,
            bias,
            stride,
            padding: k / 2,
        }
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        tensor::conv3d(
            x,
            p.get(self.weight),
            self.bias.map(|b| p.get(b)),
            self.stride,
            self.padding,
        )
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    kind: NormKind,
    scale: ParamId,
    shift: ParamId,
}

impl Norm {
    pub fn new<T: Element>(init: &mut Init<'_, T>, name: &str, kind: NormKind, channels: usize) -> Self {
        Norm {
            kind,
            scale: init.constant(format!("{name}.scale"), channels, 1.0),
            shift: init.constant(format!("{name}.shift"), channels, 0.0),
        }
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let normed = match self.kind {
            NormKind::Instance => tensor::instance_norm(x, NORM_EPS)?,
            NormKind::Group { groups } => tensor::group_norm(x, groups, NORM_EPS)?,
        };
        tensor::channel_affine(&normed, p.get(self.scale), p.get(self.shift))
    }
}

pub(crate) fn activate<T: Element>(act: Activation, x: &Tensor<T>) -> Tensor<T> {
    match act {
        Activation::Relu => tensor::relu(x),
        Activation::LeakyRelu { slope } => tensor::leaky_relu(x, T::from_f64_lossy(slope)),
    }
}

/// conv → norm → activation. The conv has no bias since the norm removes it.
#[derive(Debug, Clone)]
pub(crate) struct ConvNormAct {
    conv: Conv,
    norm: Norm,
    act: Activation,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        norm: NormKind,
        act: Activation,
    ) -> Self {
        ConvNormAct {
            conv: Conv::new(init, &format!("{name}.conv"), cin, cout, 3, stride, false),
            norm: Norm::new(init, &format!("{name}.norm"), norm, cout),
            act,
        }
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.conv.forward(p, x)?;
        let y = self.norm.forward(p, &y)?;
        Ok(activate(self.act, &y))
    }
}

/// Pre-activation residual block:
/// `x + conv(act(norm(conv(act(norm(x))))))`.
#[derive(Debug, Clone)]
pub(crate) struct ResidualBlock {
    norm1: Norm,
    conv1: Conv,
    norm2: Norm,
    conv2: Conv,
    act: Activation,
}

impl ResidualBlock {
    pub fn new<T: Element>(
        init: &mut Init<'_, T>,
        name: &str,
        channels: usize,
        norm: NormKind,
        act: Activation,
    ) -> Self {
        ResidualBlock {
            norm1: Norm::new(init, &format!("{name}.norm1"), norm, channels),
            conv1: Conv::new(init, &format!("{name}.conv1"), channels, channels, 3, 1, false),
            norm2: Norm::new(init, &format!("{name}.norm2"), norm, channels),
            conv2: Conv::new(init, &format!("{name}.conv2"), channels, channels, 3, 1, false),
            act,
        }
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = activate(self.act, &self.norm1.forward(p, x)?);
        let y = self.conv1.forward(p, &y)?;
        let y = activate(self.act, &self.norm2.forward(p, &y)?);
        let y = self.conv2.forward(p, &y)?;
        tensor::add(x, &y)
    }
}
