//! Cascade of multi-encoder UNets.
//!
//! Every stage has one encoder per input modality (parameters not shared).
//! At each level the modality features are fused with an elementwise maximum
//! and fed to a single decoder. Stage `s` of `S` sees the input average-pooled
//! `S - 1 - s` times; every stage after the first also receives the previous
//! stage's sigmoid probabilities, upsampled 2x, as three extra channels on
//! each modality encoder. The last stage's logits are the network output.

use super::layers::{activate, Norm};
use super::{ArchKind, Conv, Init, Layout, NetConfig, Network, ParamStore, ResidualBlock};
use crate::error::{Error, Result};
use crate::nn::{Activation, NormKind};
use crate::tensor::{self, Element, Tensor};

#[derive(Debug, Clone)]
struct ModalityEncoder {
    stem: Conv,
    /// `(stride-2 conv into the level, block)`; no conv at level 0.
    levels: Vec<(Option<Conv>, ResidualBlock)>,
}

impl ModalityEncoder {
    fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut y = self.stem.forward(p, x)?;
        let mut out = Vec::with_capacity(self.levels.len());
        for (down, block) in &self.levels {
            if let Some(down) = down {
                y = down.forward(p, &y)?;
            }
            y = block.forward(p, &y)?;
            out.push(y.clone());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    reduce: Conv,
    block: ResidualBlock,
}

#[derive(Debug, Clone)]
pub(crate) struct Stage {
    encoders: Vec<ModalityEncoder>,
    decoder: Vec<DecoderLevel>,
    out_norm: Norm,
    act: Activation,
    head: Conv,
}

impl Stage {
    fn encode<T: Element>(
        &self,
        p: &ParamStore<T>,
        x: &Tensor<T>,
        prior: Option<&Tensor<T>>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut fused: Option<Vec<Tensor<T>>> = None;
        for (m, enc) in self.encoders.iter().enumerate() {
            let mut input = tensor::narrow(x, 1, m, 1)?;
            if let Some(prior) = prior {
                input = tensor::concat(&[input, prior.clone()], 1)?;
            }
            let feats = enc.forward(p, &input)?;
            fused = Some(match fused {
                None => feats,
                Some(acc) => acc
                    .iter()
                    .zip(&feats)
                    .map(|(a, b)| tensor::elementwise_max(a, b))
                    .collect::<Result<_>>()?,
            });
        }
        Ok(fused.expect("at least one modality"))
    }

    fn decode<T: Element>(&self, p: &ParamStore<T>, mut fused: Vec<Tensor<T>>) -> Result<Tensor<T>> {
        let mut y = fused.pop().expect("deepest level");
        for level in &self.decoder {
            let up = tensor::upsample_trilinear2x(&level.reduce.forward(p, &y)?)?;
            let skip = fused.pop().expect("one skip per decoder level");
            y = level.block.forward(p, &tensor::add(&up, &skip)?)?;
        }
        let y = activate(self.act, &self.out_norm.forward(p, &y)?);
        self.head.forward(p, &y)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct CascadeLayout {
    pub stages: Vec<Stage>,
}

impl CascadeLayout {
    /// Input pyramid, coarsest first.
    fn pyramid<T: Element>(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut levels = vec![x.clone()];
        for _ in 1..self.stages.len() {
            let next = tensor::avg_pool2x(levels.last().expect("non-empty"))?;
            levels.push(next);
        }
        levels.reverse();
        Ok(levels)
    }

    fn run<T: Element>(
        &self,
        p: &ParamStore<T>,
        x: &Tensor<T>,
        mut on_fused: impl FnMut(&[Tensor<T>]),
    ) -> Result<Tensor<T>> {
        let inputs = self.pyramid(x)?;
        let mut prior: Option<Tensor<T>> = None;
        let mut logits = None;
        for (stage, input) in self.stages.iter().zip(&inputs) {
            let fused = stage.encode(p, input, prior.as_ref())?;
            on_fused(&fused);
            let out = stage.decode(p, fused)?;
            prior = Some(tensor::upsample_trilinear2x(&tensor::sigmoid(&out))?);
            logits = Some(out);
        }
        Ok(logits.expect("at least one stage"))
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(p, x, |_| {})
    }

    pub fn fused_features<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<Vec<Tensor<T>>>> {
        let mut all = Vec::new();
        self.run(p, x, |f| all.push(f.to_vec()))?;
        Ok(all)
    }
}

/// Builds a cascade of `stages` multi-encoder UNets. Requires ReLU and
/// instance norm.
pub fn build_cascaded_unet<T: Element>(cfg: &NetConfig, stages: usize) -> Result<Network<T>> {
    cfg.validate()?;
    if stages < 1 {
        return Err(Error::InvalidArgument("cascade needs at least one stage".into()));
    }
    if cfg.norm != NormKind::Instance || cfg.activation != Activation::Relu {
        return Err(Error::InvalidArgument(
            "cascaded_unet requires instance norm and ReLU".into(),
        ));
    }
    let (norm, act) = (cfg.norm, cfg.activation);
    let mut params = ParamStore::new();
    let mut init = Init::new(&mut params, cfg.seed);

    let built = (0..stages)
        .map(|s| {
            let in_ch = if s == 0 { 1 } else { 1 + cfg.out_regions };
            let encoders = (0..cfg.in_modalities)
                .map(|m| {
                    let prefix = format!("stage{s}.enc{m}");
                    let stem = Conv::new(
                        &mut init,
                        &format!("{prefix}.stem"),
                        in_ch,
                        cfg.base_channels,
                        3,
                        1,
                        false,
                    );
                    let levels = (0..cfg.levels)
                        .map(|level| {
                            let c = cfg.channels(level);
                            let down = (level > 0).then(|| {
                                Conv::new(&mut init, &format!("{prefix}.l{level}.down"), c / 2, c, 3, 2, false)
                            });
                            let block =
                                ResidualBlock::new(&mut init, &format!("{prefix}.l{level}.block"), c, norm, act);
                            (down, block)
                        })
                        .collect();
                    ModalityEncoder { stem, levels }
                })
                .collect();
            let decoder = (0..cfg.levels - 1)
                .rev()
                .map(|level| {
                    let c = cfg.channels(level);
                    DecoderLevel {
                        reduce: Conv::new(&mut init, &format!("stage{s}.dec{level}.reduce"), 2 * c, c, 1, 1, false),
                        block: ResidualBlock::new(&mut init, &format!("stage{s}.dec{level}.block"), c, norm, act),
                    }
                })
                .collect();
            let out_norm = Norm::new(&mut init, &format!("stage{s}.out.norm"), norm, cfg.base_channels);
            let head = Conv::new(
                &mut init,
                &format!("stage{s}.head"),
                cfg.base_channels,
                cfg.out_regions,
                1,
                1,
                true,
            );
            Stage {
                encoders,
                decoder,
                out_norm,
                act,
                head,
            }
        })
        .collect();

    Ok(Network {
        kind: ArchKind::CascadedUnet { stages },
        cfg: *cfg,
        params,
        layout: Layout::Cascaded(CascadeLayout { stages: built }),
    })
}
