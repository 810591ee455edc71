//! Plain 3-D UNet: two conv-norm-act layers per level, strided convs instead
//! of pooling, and a decoder that reduces channels with a 1x1x1 conv before
//! trilinear upsampling and concatenation with the skip.

use super::{ArchKind, Conv, ConvNormAct, Init, Layout, NetConfig, Network, ParamStore};
use crate::error::{Error, Result};
use crate::nn::{Activation, NormKind};
use crate::tensor::{self, Element, Tensor};

#[derive(Debug, Clone)]
struct UpLevel {
    reduce: Conv,
    convs: [ConvNormAct; 2],
}

#[derive(Debug, Clone)]
pub(crate) struct UnetLayout {
    encoder: Vec<[ConvNormAct; 2]>,
    /// Deepest first.
    decoder: Vec<UpLevel>,
    head: Conv,
}

impl UnetLayout {
    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut y = x.clone();
        for [a, b] in &self.encoder {
            y = b.forward(p, &a.forward(p, &y)?)?;
            skips.push(y.clone());
        }
        skips.pop();
        for up in &self.decoder {
            let reduced = up.reduce.forward(p, &y)?;
            let upsampled = tensor::upsample_trilinear2x(&reduced)?;
            let skip = skips.pop().expect("one skip per decoder level");
            let joined = tensor::concat(&[upsampled, skip], 1)?;
            y = up.convs[1].forward(p, &up.convs[0].forward(p, &joined)?)?;
        }
        self.head.forward(p, &y)
    }
}

/// Builds the plain UNet. Requires leaky ReLU and instance norm.
pub fn build_unet<T: Element>(cfg: &NetConfig) -> Result<Network<T>> {
    cfg.validate()?;
    if cfg.norm != NormKind::Instance || !matches!(cfg.activation, Activation::LeakyRelu { .. }) {
        return Err(Error::InvalidArgument(
            "unet requires instance norm and leaky ReLU".into(),
        ));
    }
    let (norm, act) = (cfg.norm, cfg.activation);
    let mut params = ParamStore::new();
    let mut init = Init::new(&mut params, cfg.seed);

    let mut encoder = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let cout = cfg.channels(level);
        let (cin, stride) = if level == 0 {
            (cfg.in_modalities, 1)
        } else {
            (cfg.channels(level - 1), 2)
        };
        encoder.push([
            ConvNormAct::new(&mut init, &format!("enc{level}.0"), cin, cout, stride, norm, act),
            ConvNormAct::new(&mut init, &format!("enc{level}.1"), cout, cout, 1, norm, act),
        ]);
    }

    let mut decoder = Vec::with_capacity(cfg.levels - 1);
    for level in (0..cfg.levels - 1).rev() {
        let c = cfg.channels(level);
        decoder.push(UpLevel {
            reduce: Conv::new(&mut init, &format!("dec{level}.reduce"), 2 * c, c, 1, 1, false),
            convs: [
                ConvNormAct::new(&mut init, &format!("dec{level}.0"), 2 * c, c, 1, norm, act),
                ConvNormAct::new(&mut init, &format!("dec{level}.1"), c, c, 1, norm, act),
            ],
        });
    }
    let head = Conv::new(&mut init, "head", cfg.base_channels, cfg.out_regions, 1, 1, true);

    Ok(Network {
        kind: ArchKind::Unet,
        cfg: *cfg,
        params,
        layout: Layout::Unet(UnetLayout { encoder, decoder, head }),
    })
}
