//! Central finite-difference checks of the analytic gradients.
//!
//! Every check runs in `f64`. A vector-valued output is reduced to a scalar
//! by a fixed random projection, so one backward pass yields the gradient
//! that the perturbed forward passes are compared against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::combined_loss;
use crate::nn::{build_cascaded_unet, build_res_unet, build_unet, NetConfig, Network, NormKind};
use crate::tensor::{self, BackwardCtx, Element, Function, Tensor};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Denominator floor of the relative error. Gradient entries smaller than
/// this are compared in absolute terms, since rounding in the differenced
/// forward passes alone is on the order of 1e-11 relative to the loss.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Relative error used by every check.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Something whose leaf gradients can be checked: it exposes its leaves, lets
/// the checker overwrite one, and rebuilds its output from the current ones.
pub trait Probe: Send {
    fn name(&self) -> &str;
    fn leaves(&self) -> Vec<Tensor<f64>>;
    fn replace_leaf(&mut self, index: usize, data: Vec<f64>) -> Result<()>;
    fn output(&self) -> Result<Tensor<f64>>;
    /// Entries checked per leaf; larger leaves are sampled.
    fn entries_per_leaf(&self) -> usize {
        usize::MAX
    }
}

type OpFn = Box<dyn Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + Send + Sync>;

/// A function of a few leaf tensors.
pub struct OpProbe {
    name: String,
    leaves: Vec<Tensor<f64>>,
    f: OpFn,
}

impl OpProbe {
    pub fn new(
        name: impl Into<String>,
        leaves: Vec<Tensor<f64>>,
        f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>> + Send + Sync + 'static,
    ) -> Self {
        OpProbe {
            name: name.into(),
            leaves,
            f: Box::new(f),
        }
    }
}

impl Probe for OpProbe {
    fn name(&self) -> &str {
        &self.name
    }

    fn leaves(&self) -> Vec<Tensor<f64>> {
        self.leaves.clone()
    }

    fn replace_leaf(&mut self, index: usize, data: Vec<f64>) -> Result<()> {
        let shape = self.leaves[index].shape().to_vec();
        self.leaves[index] = Tensor::param(data, &shape)?;
        Ok(())
    }

    fn output(&self) -> Result<Tensor<f64>> {
        (self.f)(&self.leaves)
    }
}

/// A whole network under the combined loss against fixed random masks.
pub struct NetworkProbe {
    name: String,
    net: Network<f64>,
    input: Tensor<f64>,
    target: Tensor<f64>,
    entries: usize,
}

impl NetworkProbe {
    pub fn new(name: impl Into<String>, net: Network<f64>, extents: [usize; 3], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [d, h, w] = extents;
        let vox = d * h * w;
        let input = Tensor::new(uniform(&mut rng, 4 * vox, -1.0, 1.0), &[1, 4, d, h, w])?;
        let target = (0..3 * vox)
            .map(|_| f64::from(u8::from(rng.random_bool(0.5))))
            .collect();
        Ok(NetworkProbe {
            name: name.into(),
            net,
            input,
            target: Tensor::new(target, &[1, 3, d, h, w])?,
            entries: 3,
        })
    }
}

impl Probe for NetworkProbe {
    fn name(&self) -> &str {
        &self.name
    }

    fn leaves(&self) -> Vec<Tensor<f64>> {
        self.net.params().iter().map(|p| p.value.clone()).collect()
    }

    fn replace_leaf(&mut self, index: usize, data: Vec<f64>) -> Result<()> {
        self.net.params_mut().set(index, data)
    }

    fn output(&self) -> Result<Tensor<f64>> {
        let probs = tensor::sigmoid(&self.net.forward(&self.input)?);
        Ok(combined_loss(&probs, &self.target)?.total)
    }

    fn entries_per_leaf(&self) -> usize {
        self.entries
    }
}

/// Outcome of one probe.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Gradient entries compared.
    pub entries: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < MAX_REL_ERROR
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, so that no finite-difference step crosses
/// the kink of a piecewise-linear op.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(0.05..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn projected(out: &Tensor<f64>, proj: &[f64]) -> f64 {
    out.data().iter().zip(proj).map(|(a, b)| a * b).sum()
}

/// Compares analytic and central-difference gradients for every leaf of
/// `probe` (or a seeded sample of entries of each).
pub fn check(probe: &mut dyn Probe, seed: u64) -> Result<GradReport> {
    debug_assert_eq!(<f64 as Element>::DTYPE, "f64");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let leaves = probe.leaves();
    leaves.iter().for_each(Tensor::zero_grad);
    let out = probe.output()?;
    let proj = uniform(&mut rng, out.numel(), 0.5, 1.5);
    let proj_t = Tensor::new(proj.clone(), out.shape())?;
    tensor::sum(&tensor::mul(&out, &proj_t)?).backward()?;
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect();

    let mut max_err = 0.0f64;
    let mut entries = 0;
    for (i, leaf) in leaves.iter().enumerate() {
        let original = leaf.to_vec();
        let n = original.len();
        let picks: Vec<usize> = if n <= probe.entries_per_leaf() {
            (0..n).collect()
        } else {
            (0..probe.entries_per_leaf()).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let mut data = original.clone();
            data[j] = original[j] + FD_STEP;
            probe.replace_leaf(i, data.clone())?;
            let plus = projected(&probe.output()?, &proj);
            data[j] = original[j] - FD_STEP;
            probe.replace_leaf(i, data)?;
            let minus = projected(&probe.output()?, &proj);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            max_err = max_err.max(relative_error(analytic[i][j], numeric));
            entries += 1;
        }
        probe.replace_leaf(i, original)?;
    }
    Ok(GradReport {
        name: probe.name().to_string(),
        max_rel_error: max_err,
        entries,
    })
}

fn leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(uniform(rng, n, -1.0, 1.0), shape).expect("shape matches")
}

fn kinked_leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(away_from_zero(rng, n), shape).expect("shape matches")
}

fn prob_leaf(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::param(uniform(rng, n, 0.05, 0.95), shape).expect("shape matches")
}

fn mask(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
    Tensor::new(data, shape).expect("shape matches")
}

/// One probe per differentiable op plus a tiny instance of each architecture.
pub fn standard_suite() -> Result<Vec<Box<dyn Probe>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let r = &mut rng;
    let mut probes: Vec<Box<dyn Probe>> = Vec::new();
    let mut op = |name: &str, leaves: Vec<Tensor<f64>>, f: fn(&[Tensor<f64>]) -> Result<Tensor<f64>>| {
        probes.push(Box::new(OpProbe::new(name, leaves, f)));
    };

    op(
        "conv3d",
        vec![leaf(r, &[2, 2, 4, 5, 3]), leaf(r, &[3, 2, 3, 3, 3]), leaf(r, &[3])],
        |l| tensor::conv3d(&l[0], &l[1], Some(&l[2]), 1, 1),
    );
    op(
        "conv3d[stride=2]",
        vec![leaf(r, &[1, 2, 6, 4, 5]), leaf(r, &[2, 2, 3, 3, 3])],
        |l| tensor::conv3d(&l[0], &l[1], None, 2, 1),
    );
    op(
        "conv3d[1x1x1]",
        vec![leaf(r, &[2, 3, 3, 2, 4]), leaf(r, &[2, 3, 1, 1, 1]), leaf(r, &[2])],
        |l| tensor::conv3d(&l[0], &l[1], Some(&l[2]), 1, 0),
    );
    op("upsample_trilinear2x", vec![leaf(r, &[1, 2, 3, 2, 4])], |l| {
        tensor::upsample_trilinear2x(&l[0])
    });
    op("avg_pool2x", vec![leaf(r, &[1, 2, 4, 2, 6])], |l| {
        tensor::avg_pool2x(&l[0])
    });
    op("instance_norm", vec![leaf(r, &[2, 3, 3, 2, 3])], |l| {
        tensor::instance_norm(&l[0], tensor::NORM_EPS)
    });
    op("group_norm", vec![leaf(r, &[2, 4, 2, 3, 2])], |l| {
        tensor::group_norm(&l[0], 2, tensor::NORM_EPS)
    });
    op(
        "channel_affine",
        vec![leaf(r, &[2, 3, 2, 2, 3]), leaf(r, &[3]), leaf(r, &[3])],
        |l| tensor::channel_affine(&l[0], &l[1], &l[2]),
    );
    op("relu", vec![kinked_leaf(r, &[2, 3, 4])], |l| Ok(tensor::relu(&l[0])));
    op("leaky_relu", vec![kinked_leaf(r, &[2, 3, 4])], |l| {
        Ok(tensor::leaky_relu(&l[0], 1e-2))
    });
    op("sigmoid", vec![leaf(r, &[2, 3, 4])], |l| Ok(tensor::sigmoid(&l[0])));
    {
        // operands differ by at least 0.05 everywhere, away from the tie
        let a = leaf(r, &[3, 4]);
        let gap = away_from_zero(r, 12);
        let b = Tensor::param(a.data().iter().zip(&gap).map(|(x, g)| x + g).collect(), &[3, 4])?;
        op("elementwise_max", vec![a, b], |l| tensor::elementwise_max(&l[0], &l[1]));
    }
    op("add", vec![leaf(r, &[2, 5]), leaf(r, &[2, 5])], |l| {
        tensor::add(&l[0], &l[1])
    });
    op("sub", vec![leaf(r, &[2, 5]), leaf(r, &[2, 5])], |l| {
        tensor::sub(&l[0], &l[1])
    });
    op("mul", vec![leaf(r, &[2, 5]), leaf(r, &[2, 5])], |l| {
        tensor::mul(&l[0], &l[1])
    });
    op("scale", vec![leaf(r, &[7])], |l| Ok(tensor::scale(&l[0], -1.7)));
    op("square", vec![leaf(r, &[7])], |l| Ok(tensor::square(&l[0])));
    op("sum", vec![leaf(r, &[2, 3])], |l| Ok(tensor::sum(&l[0])));
    op("mean", vec![leaf(r, &[2, 3])], |l| Ok(tensor::mean(&l[0])));
    op(
        "concat",
        vec![leaf(r, &[1, 2, 2, 2, 2]), leaf(r, &[1, 3, 2, 2, 2])],
        |l| tensor::concat(&l[..2], 1),
    );
    op("narrow", vec![leaf(r, &[2, 4, 3])], |l| tensor::narrow(&l[0], 1, 1, 2));
    op("reshape", vec![leaf(r, &[2, 6])], |l| l[0].reshape(&[3, 4]));

    let shape = [1, 3, 4, 4, 4];
    let g1 = mask(r, &shape);
    let g2 = g1.clone();
    let g3 = g1.clone();
    probes.push(Box::new(OpProbe::new(
        "soft_dice_loss",
        vec![prob_leaf(r, &shape)],
        move |l| crate::loss::soft_dice_loss(&l[0], &g1),
    )));
    probes.push(Box::new(OpProbe::new(
        "bce_loss",
        vec![prob_leaf(r, &shape)],
        move |l| crate::loss::bce_loss(&l[0], &g2),
    )));
    probes.push(Box::new(OpProbe::new(
        "combined_loss[logits]",
        vec![leaf(r, &shape)],
        move |l| Ok(combined_loss(&tensor::sigmoid(&l[0]), &g3)?.total),
    )));

    let unet = build_unet::<f64>(&NetConfig::unet(2, 2).with_seed(11))?;
    probes.push(Box::new(NetworkProbe::new("unet", unet, [4, 4, 4], 21)?));
    let mut res_cfg = NetConfig::res_unet(2).with_seed(12);
    res_cfg.norm = NormKind::Group { groups: 2 };
    let res = build_res_unet::<f64>(&res_cfg)?;
    probes.push(Box::new(NetworkProbe::new("res_unet", res, [8, 8, 8], 22)?));
    // 8^3 keeps the coarsest stage's deepest level above a single voxel, where
    // normalization would pin every activation onto the ReLU kink.
    let cascade = build_cascaded_unet::<f64>(&NetConfig::cascaded(2, 2).with_seed(13), 2)?;
    probes.push(Box::new(NetworkProbe::new("cascaded_unet", cascade, [8, 8, 8], 23)?));
    Ok(probes)
}

/// Runs every probe of the standard suite followed by `extra`.
pub fn run_suite(extra: Vec<Box<dyn Probe>>) -> Result<Vec<GradReport>> {
    let mut probes = standard_suite()?;
    probes.extend(extra);
    probes
        .iter_mut()
        .enumerate()
        .map(|(i, p)| check(p.as_mut(), 1000 + i as u64))
        .collect()
}

/// `2 * x` whose backward deliberately returns `3 * grad`. Used as the
/// negative control of the checker.
struct MisScaled;

impl Function<f64> for MisScaled {
    fn name(&self) -> &str {
        "corrupted_double"
    }

    fn backward(&self, ctx: &BackwardCtx<'_, f64>) -> Vec<Option<Vec<f64>>> {
        vec![Some(ctx.grad.iter().map(|g| 3.0 * g).collect())]
    }
}

/// A probe over an op with a wrong backward; its check must fail.
pub fn corrupted_probe() -> Box<dyn Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    Box::new(OpProbe::new("corrupted_double", vec![leaf(&mut rng, &[5])], |l| {
        let data = l[0].data().iter().map(|v| 2.0 * v).collect();
        Ok(Tensor::from_op(data, l[0].shape(), vec![l[0].clone()], MisScaled))
    }))
}
