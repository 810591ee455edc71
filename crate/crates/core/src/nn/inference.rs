//! Whole-volume inference by overlapping sliding windows.

use super::Segmenter;
use crate::error::{Error, Result};
use crate::regions::RegionProbs;
use crate::tensor::{sigmoid_scalar, Tensor};

pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Window start offsets covering `extent` with windows of `patch`
/// (`patch <= extent`). The last window is flush with the end.
pub fn tile_starts(extent: usize, patch: usize, overlap: f64) -> Vec<usize> {
    debug_assert!(patch <= extent && patch > 0);
    let step = ((patch as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + patch < extent {
        starts.push(s);
        s += step;
    }
    starts.push(extent - patch);
    starts
}

fn copy_box(src: &[f32], channels: usize, src_ext: [usize; 3], origin: [usize; 3], dst_ext: [usize; 3]) -> Vec<f32> {
    let [sd, sh, sw] = src_ext;
    let [dd, dh, dw] = dst_ext;
    let mut out = Vec::with_capacity(channels * dd * dh * dw);
    for c in 0..channels {
        for z in 0..dd {
            for y in 0..dh {
                let row = ((c * sd + origin[0] + z) * sh + origin[1] + y) * sw + origin[2];
                out.extend_from_slice(&src[row..row + dw]);
            }
        }
    }
    out
}

/// Tiles `scan` (`[1, C, D, H, W]`) with windows of `patch`, averages the
/// logits of overlapping windows uniformly, then applies a sigmoid. Axes
/// shorter than the patch are zero-padded for inference and cropped after.
pub fn forward_full_volume(
    net: &dyn Segmenter,
    scan: &Tensor<f32>,
    patch: [usize; 3],
    overlap: f64,
) -> Result<RegionProbs> {
    let s = scan.shape();
    if s.len() != 5 || s[0] != 1 {
        return Err(Error::shape(
            "forward_full_volume",
            format!("expected [1, C, D, H, W], got {s:?}"),
        ));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::InvalidArgument(format!("overlap {overlap} not in [0, 1)")));
    }
    if patch.contains(&0) {
        return Err(Error::InvalidArgument(format!("patch {patch:?} has a zero extent")));
    }
    let channels = s[1];
    let ext = [s[2], s[3], s[4]];
    let padded: [usize; 3] = std::array::from_fn(|i| ext[i].max(patch[i]));

    let volume: Vec<f32> = if padded == ext {
        scan.data().to_vec()
    } else {
        let mut v = vec![0.0f32; channels * padded.iter().product::<usize>()];
        for c in 0..channels {
            for z in 0..ext[0] {
                for y in 0..ext[1] {
                    let src = ((c * ext[0] + z) * ext[1] + y) * ext[2];
                    let dst = ((c * padded[0] + z) * padded[1] + y) * padded[2];
                    v[dst..dst + ext[2]].copy_from_slice(&scan.data()[src..src + ext[2]]);
                }
            }
        }
        v
    };

    let pvox: usize = padded.iter().product();
    let mut sum = vec![0.0f64; 3 * pvox];
    let mut count = vec![0u32; pvox];
    let starts: Vec<Vec<usize>> = (0..3).map(|i| tile_starts(padded[i], patch[i], overlap)).collect();
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let input = copy_box(&volume, channels, padded, [z0, y0, x0], patch);
                let input = Tensor::new(input, &[1, channels, patch[0], patch[1], patch[2]])?;
                let logits = net.logits(&input)?;
                if logits.shape() != [1, 3, patch[0], patch[1], patch[2]] {
                    return Err(Error::shape(
                        "forward_full_volume",
                        format!("network returned {:?} for patch {patch:?}", logits.shape()),
                    ));
                }
                let out = logits.data();
                for z in 0..patch[0] {
                    for y in 0..patch[1] {
                        let vrow = ((z0 + z) * padded[1] + y0 + y) * padded[2] + x0;
                        let prow = (z * patch[1] + y) * patch[2];
                        for x in 0..patch[2] {
                            count[vrow + x] += 1;
                            for c in 0..3 {
                                sum[c * pvox + vrow + x] += out[c * patch.iter().product::<usize>() + prow + x] as f64;
                            }
                        }
                    }
                }
            }
        }
    }

    let mut probs = Vec::with_capacity(3 * ext.iter().product::<usize>());
    for c in 0..3 {
        for z in 0..ext[0] {
            for y in 0..ext[1] {
                for x in 0..ext[2] {
                    let v = (z * padded[1] + y) * padded[2] + x;
                    let mean = (sum[c * pvox + v] / count[v] as f64) as f32;
                    probs.push(sigmoid_scalar(mean));
                }
            }
        }
    }
    RegionProbs::new(ext, probs)
}
