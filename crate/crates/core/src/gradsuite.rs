//! Finite-difference gradient suite over every differentiable op and the full detector loss.
//!
//! Each case runs in double precision on several random small shapes and reports the worst
//! relative error it saw. The suite is shared by the integration tests and the `grad-check`
//! command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::{
    build_targets, total_loss, Detector, DetectorConfig, GroundTruth, LossConfig, Variant,
};
use crate::geometry::{BBox, PoseRanges, ShaftPose};
use crate::nn::{
    concat_channels, max_relative_error, numeric_gradient, params_mut, smooth_l1, smooth_l1_grad,
    softmax_cross_entropy, split_channels, zero_grads, BatchNorm, Conv2d, Dense, HasParams,
    MaxPool2, Mode, Param, Relu, Tanh, Tensor,
};

/// Tolerance for single ops.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for the end-to-end detector loss on one sample.
pub const LOSS_TOLERANCE: f64 = 1e-3;

const SHAPES: u64 = 10;

/// A named check returning its worst relative error.
#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub run: fn() -> f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: String,
    pub worst: f64,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance
    }
}

/// Every registered check, each listed once.
pub fn registered_cases() -> Vec<GradCase> {
    let op = |name, run| GradCase {
        name,
        tolerance: OP_TOLERANCE,
        run,
    };
    let loss = |name, run| GradCase {
        name,
        tolerance: LOSS_TOLERANCE,
        run,
    };
    vec![
        op("conv2d", conv2d),
        op("batchnorm", batchnorm),
        op("dense", dense),
        op("relu", relu),
        op("tanh", tanh),
        op("maxpool2", maxpool),
        op("concat_split", concat_split),
        op("softmax_cross_entropy", cross_entropy),
        op("smooth_l1", smooth_l1_op),
        loss("detector_loss_c", || detector_loss(Variant::C, 21)),
        loss("detector_loss_d", || detector_loss(Variant::D, 22)),
    ]
}

pub fn run_cases(cases: &[GradCase]) -> Vec<CaseResult> {
    cases
        .iter()
        .map(|c| CaseResult {
            name: c.name.to_string(),
            worst: (c.run)(),
            tolerance: c.tolerance,
        })
        .collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn collect<L: HasParams<f64>>(layer: &mut L) -> Vec<(String, &mut Param<f64>)> {
    let mut out = Vec::new();
    layer.named_params("", &mut out);
    out
}

fn with_param<L: HasParams<f64>, R>(layer: &mut L, name: &str, f: impl FnOnce(&mut Param<f64>) -> R) -> R {
    let params = collect(layer);
    let p = params.into_iter().find(|(n, _)| n == name).expect("parameter exists").1;
    f(p)
}

/// Checks input and parameter gradients of a layer under the scalar loss `sum(out * r)` for a
/// random `r`. `forward` runs the layer; `backward` returns the input gradient and leaves
/// parameter gradients in the layer.
pub fn check_layer<L: HasParams<f64>>(
    layer: &mut L,
    x: &Tensor<f64>,
    forward: impl Fn(&mut L, &Tensor<f64>) -> Tensor<f64>,
    backward: impl Fn(&mut L, &Tensor<f64>) -> Tensor<f64>,
    rng: &mut ChaCha8Rng,
) -> f64 {
    let y = forward(layer, x);
    let r = random_tensor(rng, y.shape());
    for (_, p) in collect(layer) {
        p.zero_grad();
    }
    let dx = backward(layer, &r);

    let coords: Vec<usize> = (0..x.len()).collect();
    let numeric = numeric_gradient(
        |v| {
            let xt = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            dot(&forward(layer, &xt), &r)
        },
        x.data(),
        &coords,
    );
    let mut worst = max_relative_error(dx.data(), &numeric);

    let names: Vec<String> = collect(layer).into_iter().map(|(n, _)| n).collect();
    for name in names {
        let (analytic, values) =
            with_param(layer, &name, |p| (p.grad.data().to_vec(), p.value.data().to_vec()));
        let coords: Vec<usize> = (0..values.len()).collect();
        let numeric = numeric_gradient(
            |v| {
                with_param(layer, &name, |p| p.value.data_mut().copy_from_slice(v));
                dot(&forward(layer, x), &r)
            },
            &values,
            &coords,
        );
        with_param(layer, &name, |p| p.value.data_mut().copy_from_slice(&values));
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Parameterless layers wrapped so they fit [`check_layer`].
pub struct NoParams<L>(pub L);

impl<L> HasParams<f64> for NoParams<L> {
    fn named_params<'a>(&'a mut self, _: &str, _: &mut Vec<(String, &'a mut Param<f64>)>) {}
}

fn random_dims(rng: &mut ChaCha8Rng) -> [usize; 4] {
    [
        rng.random_range(1..3),
        rng.random_range(2..6),
        rng.random_range(2..6),
        rng.random_range(1..4),
    ]
}

/// Keeps inputs away from the ReLU kink, where central differences are not meaningful.
fn nudge_away(x: &mut Tensor<f64>, min_abs: f64) {
    for v in x.data_mut() {
        if v.abs() < min_abs {
            *v = if *v < 0.0 { -min_abs } else { min_abs };
        }
    }
}

fn worst_over_shapes(seed: u64, mut one: impl FnMut(&mut ChaCha8Rng, u64) -> f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..SHAPES).map(|i| one(&mut rng, i)).fold(0.0, f64::max)
}

pub fn conv2d() -> f64 {
    worst_over_shapes(10, |rng, _| {
        let dims = random_dims(rng);
        let kernel = if rng.random_bool(0.7) { 3 } else { 1 };
        let stride = rng.random_range(1..3);
        let c_out = rng.random_range(1..4);
        let mut conv = Conv2d::<f64>::new(dims[3], c_out, kernel, stride, rng);
        for b in conv.bias.value.data_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
        let x = random_tensor(rng, &dims);
        check_layer(&mut conv, &x, |l, x| l.forward(x).unwrap(), |l, g| l.backward(g).unwrap(), rng)
    })
}

/// Alternates training and inference mode across shapes.
pub fn batchnorm() -> f64 {
    worst_over_shapes(11, |rng, i| {
        let mut dims = random_dims(rng);
        dims[0] = 2;
        let mut bn = BatchNorm::<f64>::new(dims[3]);
        for v in bn.gamma.value.data_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in bn.beta.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let mode = if i % 2 == 0 { Mode::Train } else { Mode::Eval };
        let x = random_tensor(rng, &dims);
        check_layer(&mut bn, &x, |l, x| l.forward(x, mode).unwrap(), |l, g| l.backward(g).unwrap(), rng)
    })
}

pub fn dense() -> f64 {
    worst_over_shapes(12, |rng, _| {
        let n = rng.random_range(1..4);
        let fin = rng.random_range(1..7);
        let fout = rng.random_range(1..5);
        let mut dense = Dense::<f64>::new(fin, fout, rng);
        let x = random_tensor(rng, &[n, fin]);
        check_layer(&mut dense, &x, |l, x| l.forward(x).unwrap(), |l, g| l.backward(g).unwrap(), rng)
    })
}

pub fn relu() -> f64 {
    worst_over_shapes(13, |rng, _| {
        let dims = random_dims(rng);
        let mut x = random_tensor(rng, &dims);
        nudge_away(&mut x, 1e-3);
        let mut relu = NoParams(Relu::new());
        check_layer(&mut relu, &x, |l, x| l.0.forward(x).unwrap(), |l, g| l.0.backward(g).unwrap(), rng)
    })
}

pub fn tanh() -> f64 {
    worst_over_shapes(14, |rng, _| {
        let dims = random_dims(rng);
        let x = random_tensor(rng, &dims).map(|v| v * 2.0);
        let mut tanh = NoParams(Tanh::new());
        check_layer(&mut tanh, &x, |l, x| l.0.forward(x).unwrap(), |l, g| l.0.backward(g).unwrap(), rng)
    })
}

pub fn maxpool() -> f64 {
    worst_over_shapes(15, |rng, _| {
        let dims = random_dims(rng);
        // distinct, well-separated values so no window has a near tie
        let n: usize = dims.iter().product();
        let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        for i in (1..n).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let x = Tensor::from_vec(&dims, vals).unwrap();
        let mut pool = NoParams(MaxPool2::new());
        check_layer(&mut pool, &x, |l, x| l.0.forward(x).unwrap(), |l, g| l.0.backward(g).unwrap(), rng)
    })
}

/// Concat is linear with split as its exact adjoint; halves are swapped so the map is not the
/// identity.
pub fn concat_split() -> f64 {
    worst_over_shapes(16, |rng, _| {
        let mut dims = random_dims(rng);
        let widths = [rng.random_range(1..4), rng.random_range(1..4)];
        dims[3] = widths[0] + widths[1];
        let x = random_tensor(rng, &dims);
        check_layer(
            &mut NoParams(()),
            &x,
            |_, x| {
                let parts = split_channels(x, &widths).unwrap();
                concat_channels(&[&parts[1], &parts[0]]).unwrap()
            },
            |_, g| {
                let parts = split_channels(g, &[widths[1], widths[0]]).unwrap();
                concat_channels(&[&parts[1], &parts[0]]).unwrap()
            },
            rng,
        )
    })
}

/// Weighted sum of per-row cross-entropies, some rows masked out.
pub fn cross_entropy() -> f64 {
    worst_over_shapes(17, |rng, _| {
        let rows = rng.random_range(1..6);
        let classes = rng.random_range(2..5);
        let targets: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        let mask: Vec<bool> = (0..rows).map(|_| rng.random_bool(0.7)).collect();
        let weights: Vec<f64> = (0..rows).map(|_| rng.random_range(0.1..2.0)).collect();
        let logits: Vec<f64> = (0..rows * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
        let value = |l: &[f64]| {
            let ce = softmax_cross_entropy(l, classes, &targets, &mask).unwrap();
            ce.losses.iter().zip(&weights).map(|(a, w)| a * w).sum::<f64>()
        };
        let analytic = softmax_cross_entropy(&logits, classes, &targets, &mask)
            .unwrap()
            .backward(&weights);
        let coords: Vec<usize> = (0..logits.len()).collect();
        max_relative_error(&analytic, &numeric_gradient(value, &logits, &coords))
    })
}

/// Both branches of smooth L1, away from the `|x| = 1` seam.
pub fn smooth_l1_op() -> f64 {
    worst_over_shapes(18, |rng, _| {
        let mut x: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
        for v in &mut x {
            if (v.abs() - 1.0).abs() < 1e-3 {
                *v *= 1.01;
            }
        }
        let analytic: Vec<f64> = x.iter().map(|&v| smooth_l1_grad(v)).collect();
        let coords: Vec<usize> = (0..x.len()).collect();
        let numeric = numeric_gradient(|p| p.iter().map(|&v| smooth_l1(v)).sum(), &x, &coords);
        max_relative_error(&analytic, &numeric)
    })
}

/// Smallest pyramid that still has two levels, a stem and both head variants.
pub fn tiny_detector_config(variant: Variant) -> DetectorConfig {
    DetectorConfig {
        variant,
        input_size: 16,
        level_sizes: vec![4, 2],
        channels: 4,
        pose_channels: 4,
        ..DetectorConfig::default()
    }
}

fn flatten(model: &mut Detector<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut values = Vec::new();
    let mut grads = Vec::new();
    for p in params_mut(model) {
        values.extend_from_slice(p.value.data());
        grads.extend_from_slice(p.grad.data());
    }
    (values, grads)
}

fn assign(model: &mut Detector<f64>, values: &[f64]) {
    let mut off = 0;
    for p in params_mut(model) {
        let n = p.value.len();
        p.value.data_mut().copy_from_slice(&values[off..off + n]);
        off += n;
    }
}

/// End-to-end check of the composite loss with respect to every weight, on one image with one
/// pose-labeled shaft, in training mode.
pub fn detector_loss(variant: Variant, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = tiny_detector_config(variant);
    let mut model = Detector::<f64>::new(&config, &mut rng).unwrap();
    let anchors = config.build_anchors().unwrap();
    let ranges = PoseRanges::default();
    let d = ranges.dims();
    let pose = ShaftPose::from_array(std::array::from_fn(|k| rng.random_range(d[k].min..d[k].max)));
    let gt = GroundTruth {
        boxes: vec![BBox::new(3.0, 4.0, 11.0, 9.0)],
        poses: Some(vec![pose]),
    };
    let targets = [build_targets(&anchors, &gt, &ranges, 0.5).unwrap()];
    let x = random_tensor(&mut rng, &[1, 16, 16, 3]);
    let cfg = LossConfig::default();

    let loss_at = |m: &mut Detector<f64>| {
        let out = m.forward(&x, Mode::Train).unwrap();
        total_loss(&out, &anchors, &targets, &cfg).unwrap()
    };
    zero_grads(&mut model);
    let (_, grads) = loss_at(&mut model);
    model.backward(&grads).unwrap();
    let (values, analytic) = flatten(&mut model);

    let mut probe = model.clone();
    let coords: Vec<usize> = (0..values.len()).collect();
    let numeric = numeric_gradient(
        |v| {
            assign(&mut probe, v);
            loss_at(&mut probe).0.total
        },
        &values,
        &coords,
    );
    max_relative_error(&analytic, &numeric)
}
