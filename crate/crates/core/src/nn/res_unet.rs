//! Residual UNet with a deep encoder and a one-block-per-level decoder. This
//! is the student architecture; it has no autoencoder branch.

use super::layers::{activate, Norm};
use super::{ArchKind, Conv, Init, Layout, NetConfig, Network, ParamStore, ResidualBlock};
use crate::error::{Error, Result};
use crate::nn::{Activation, NormKind};
use crate::tensor::{self, Element, Tensor};

/// Residual blocks per encoder level, shallowest first.
pub const RES_UNET_ENCODER_BLOCKS: [usize; 4] = [1, 2, 2, 4];

#[derive(Debug, Clone)]
struct EncoderLevel {
    /// Stride-2 conv into this level; absent at full resolution.
    down: Option<Conv>,
    blocks: Vec<ResidualBlock>,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    reduce: Conv,
    block: ResidualBlock,
}

#[derive(Debug, Clone)]
pub(crate) struct ResUnetLayout {
    stem: Conv,
    encoder: Vec<EncoderLevel>,
    /// Deepest first.
    decoder: Vec<DecoderLevel>,
    /// Pre-activation blocks leave the stream un-normalized; it is normalized
    /// and activated once more before the head.
    out_norm: Norm,
    act: Activation,
    head: Conv,
}

impl ResUnetLayout {
    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = self.stem.forward(p, x)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        for level in &self.encoder {
            if let Some(down) = &level.down {
                y = down.forward(p, &y)?;
            }
            for block in &level.blocks {
                y = block.forward(p, &y)?;
            }
            skips.push(y.clone());
        }
        skips.pop();
        for level in &self.decoder {
            let up = tensor::upsample_trilinear2x(&level.reduce.forward(p, &y)?)?;
            let skip = skips.pop().expect("one skip per decoder level");
            y = level.block.forward(p, &tensor::add(&up, &skip)?)?;
        }
        let y = activate(self.act, &self.out_norm.forward(p, &y)?);
        self.head.forward(p, &y)
    }

    pub fn census(&self) -> (usize, usize) {
        (self.encoder.iter().map(|l| l.blocks.len()).sum(), self.decoder.len())
    }
}

/// Builds the residual UNet. Requires group norm, ReLU and exactly 4 levels.
pub fn build_res_unet<T: Element>(cfg: &NetConfig) -> Result<Network<T>> {
    cfg.validate()?;
    if cfg.levels != RES_UNET_ENCODER_BLOCKS.len() {
        return Err(Error::InvalidArgument(format!(
            "res_unet has a fixed block schedule {RES_UNET_ENCODER_BLOCKS:?} and needs 4 levels, got {}",
            cfg.levels
        )));
    }
    if !matches!(cfg.norm, NormKind::Group { .. }) || cfg.activation != Activation::Relu {
        return Err(Error::InvalidArgument("res_unet requires group norm and ReLU".into()));
    }
    let (norm, act) = (cfg.norm, cfg.activation);
    let mut params = ParamStore::new();
    let mut init = Init::new(&mut params, cfg.seed);

    let stem = Conv::new(&mut init, "stem", cfg.in_modalities, cfg.base_channels, 3, 1, false);
    let encoder = RES_UNET_ENCODER_BLOCKS
        .iter()
        .enumerate()
        .map(|(level, &count)| {
            let c = cfg.channels(level);
            let down = (level > 0).then(|| Conv::new(&mut init, &format!("enc{level}.down"), c / 2, c, 3, 2, false));
            let blocks = (0..count)
                .map(|b| ResidualBlock::new(&mut init, &format!("enc{level}.block{b}"), c, norm, act))
                .collect();
            EncoderLevel { down, blocks }
        })
        .collect();
    let decoder = (0..cfg.levels - 1)
        .rev()
        .map(|level| {
            let c = cfg.channels(level);
            DecoderLevel {
                reduce: Conv::new(&mut init, &format!("dec{level}.reduce"), 2 * c, c, 1, 1, false),
                block: ResidualBlock::new(&mut init, &format!("dec{level}.block"), c, norm, act),
            }
        })
        .collect();
    let out_norm = Norm::new(&mut init, "out.norm", norm, cfg.base_channels);
    let head = Conv::new(&mut init, "head", cfg.base_channels, cfg.out_regions, 1, 1, true);

    Ok(Network {
        kind: ArchKind::ResUnet,
        cfg: *cfg,
        params,
        layout: Layout::ResUnet(ResUnetLayout {
            stem,
            encoder,
            decoder,
            out_norm,
            act,
            head,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_census() {
        let net = build_res_unet::<f32>(&NetConfig::res_unet(8)).unwrap();
        assert_eq!(net.residual_block_census(), Some((9, 3)));
    }

    #[test]
    fn fixed_depth() {
        let mut cfg = NetConfig::res_unet(8);
        cfg.levels = 3;
        let err = build_res_unet::<f32>(&cfg).unwrap_err();
        assert!(err.to_string().contains("4 levels"), "{err}");
    }

    #[test]
    fn shape_contract() {
        let net = build_res_unet::<f32>(&NetConfig::res_unet(8)).unwrap();
        let y = net.forward(&Tensor::zeros(&[1, 4, 8, 16, 8])).unwrap();
        assert_eq!(y.shape(), &[1, 3, 8, 16, 8]);
    }
}
