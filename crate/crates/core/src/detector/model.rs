//! Backbone pyramid and per-level heads for both architecture variants.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DetectorConfig, DetectorError};
use crate::geometry::POSE_DIM;
use crate::nn::tensor::join;
use crate::nn::{
    concat_channels, split_channels, BatchNorm, Conv2d, HasParams, Mode, NnError, Param, Relu,
    Scalar, Tanh, Tensor,
};

pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Pose branch reads backbone features only.
    C,
    /// Pose branch reads backbone features concatenated with the class and box maps.
    D,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseActivation {
    Tanh,
    Linear,
}

/// Per-level head maps, NHWC with the anchor's box index as the slow channel index.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutput<T> {
    pub cls: Tensor<T>,
    pub boxes: Tensor<T>,
    pub pose: Tensor<T>,
}

/// One image's outputs as per-anchor rows: `NUM_CLASSES` logits, 4 box offsets and `POSE_DIM`
/// pose values per anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorRows<T> {
    pub cls: Vec<T>,
    pub boxes: Vec<T>,
    pub pose: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<T> {
    pub levels: Vec<LevelOutput<T>>,
}

impl<T: Scalar> HeadOutputs<T> {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            levels: other
                .levels
                .iter()
                .map(|l| LevelOutput {
                    cls: Tensor::zeros(l.cls.shape()),
                    boxes: Tensor::zeros(l.boxes.shape()),
                    pose: Tensor::zeros(l.pose.shape()),
                })
                .collect(),
        }
    }

    pub fn batch(&self) -> usize {
        self.levels.first().map_or(0, |l| l.cls.shape()[0])
    }

    /// Image `i`'s maps flattened to per-anchor rows in global anchor order.
    pub fn image_rows(&self, i: usize) -> AnchorRows<T> {
        let b = self.batch();
        let mut rows = AnchorRows {
            cls: Vec::new(),
            boxes: Vec::new(),
            pose: Vec::new(),
        };
        for l in &self.levels {
            for (dst, t) in [(&mut rows.cls, &l.cls), (&mut rows.boxes, &l.boxes), (&mut rows.pose, &l.pose)] {
                let len = t.len() / b;
                dst.extend_from_slice(&t.data()[i * len..(i + 1) * len]);
            }
        }
        rows
    }
}

#[derive(Debug, Clone)]
struct ConvBnRelu<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
    relu: Relu,
}

impl<T: Scalar> ConvBnRelu<T> {
    fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, stride: usize, rng: &mut R) -> Self {
        Self {
            conv: Conv2d::new(c_in, c_out, 3, stride, rng),
            bn: BatchNorm::new(c_out),
            relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>, NnError> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y, mode)?;
        self.relu.forward(&y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        let d = self.relu.backward(dy)?;
        let d = self.bn.backward(&d)?;
        self.conv.backward(&d)
    }
}

impl<T: Scalar> HasParams<T> for ConvBnRelu<T> {
    fn named_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.conv.named_params(&join(prefix, "conv"), out);
        self.bn.named_params(&join(prefix, "bn"), out);
    }

    fn named_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.bn.named_buffers(&join(prefix, "bn"), out);
    }
}

#[derive(Debug, Clone)]
struct LevelHead<T> {
    cls: Conv2d<T>,
    boxes: Conv2d<T>,
    pose_in: ConvBnRelu<T>,
    pose_out: Conv2d<T>,
    tanh: Option<Tanh<T>>,
    /// Channel widths of the pose branch input: features, then (variant D) class and box maps.
    fusion_widths: Vec<usize>,
}

impl<T: Scalar> HasParams<T> for LevelHead<T> {
    fn named_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        self.cls.named_params(&join(prefix, "cls"), out);
        self.boxes.named_params(&join(prefix, "box"), out);
        self.pose_in.named_params(&join(prefix, "pose_in"), out);
        self.pose_out.named_params(&join(prefix, "pose_out"), out);
    }

    fn named_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.pose_in.named_buffers(&join(prefix, "pose_in"), out);
    }
}

/// The full single-shot network.
#[derive(Debug, Clone)]
pub struct Detector<T> {
    config: DetectorConfig,
    stem: Vec<ConvBnRelu<T>>,
    /// `downs[k]` maps level `k` to level `k + 1`.
    downs: Vec<ConvBnRelu<T>>,
    heads: Vec<LevelHead<T>>,
}

/// Name prefix shared by every pose-branch parameter.
pub fn is_pose_branch_param(name: &str) -> bool {
    name.contains(".pose_in.") || name.contains(".pose_out.")
}

impl<T: Scalar> Detector<T> {
    pub fn new<R: Rng + ?Sized>(config: &DetectorConfig, rng: &mut R) -> Result<Self, DetectorError> {
        config.validate()?;
        let c = config.channels;
        let n = config.anchors.boxes_per_location();
        let stem_convs = config.stem_depth();
        let mut stem = Vec::new();
        let mut c_in = 3;
        for i in 0..stem_convs {
            let c_out = if i + 1 == stem_convs { c } else { (c / 2).max(4) };
            stem.push(ConvBnRelu::new(c_in, c_out, 2, rng));
            stem.push(ConvBnRelu::new(c_out, c_out, 1, rng));
            c_in = c_out;
        }
        stem.push(ConvBnRelu::new(c_in, c, 1, rng));
        let downs = (1..config.level_sizes.len())
            .map(|_| ConvBnRelu::new(c, c, 2, rng))
            .collect();
        let heads = (0..config.level_sizes.len())
            .map(|_| {
                let fusion_widths = match config.variant {
                    Variant::C => vec![c],
                    Variant::D => vec![c, NUM_CLASSES * n, 4 * n],
                };
                LevelHead {
                    cls: Conv2d::new(c, NUM_CLASSES * n, 3, 1, rng),
                    boxes: Conv2d::new(c, 4 * n, 3, 1, rng),
                    pose_in: ConvBnRelu::new(fusion_widths.iter().sum(), config.pose_channels, 1, rng),
                    pose_out: Conv2d::new(config.pose_channels, POSE_DIM * n, 3, 1, rng),
                    tanh: (config.pose_activation == PoseActivation::Tanh).then(Tanh::new),
                    fusion_widths,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            stem,
            downs,
            heads,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    /// `x` is `[batch, size, size, 3]` already scaled to `[-1, 1]`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<HeadOutputs<T>, DetectorError> {
        let [_, h, w, c] = x.dims4()?;
        let s = self.config.input_size as usize;
        if h != s || w != s || c != 3 {
            return Err(DetectorError::Nn(NnError::Shape(format!(
                "detector expects [batch, {s}, {s}, 3] input, got {:?}",
                x.shape()
            ))));
        }
        let mut feat = x.clone();
        for layer in &mut self.stem {
            feat = layer.forward(&feat, mode)?;
        }
        let mut levels = Vec::with_capacity(self.heads.len());
        for k in 0..self.heads.len() {
            if k > 0 {
                feat = self.downs[k - 1].forward(&feat, mode)?;
            }
            let head = &mut self.heads[k];
            let cls = head.cls.forward(&feat)?;
            let boxes = head.boxes.forward(&feat)?;
            let pose_input = if head.fusion_widths.len() > 1 {
                concat_channels(&[&feat, &cls, &boxes])?
            } else {
                feat.clone()
            };
            let p = head.pose_in.forward(&pose_input, mode)?;
            let mut pose = head.pose_out.forward(&p)?;
            if let Some(t) = &mut head.tanh {
                pose = t.forward(&pose)?;
            }
            levels.push(LevelOutput { cls, boxes, pose });
        }
        Ok(HeadOutputs { levels })
    }

    /// Accumulates parameter gradients for the upstream gradients of the last `forward`.
    pub fn backward(&mut self, grads: &HeadOutputs<T>) -> Result<(), DetectorError> {
        if grads.levels.len() != self.heads.len() {
            return Err(DetectorError::Nn(NnError::Shape(
                "gradient has the wrong number of levels".into(),
            )));
        }
        let mut from_deeper: Option<Tensor<T>> = None;
        for k in (0..self.heads.len()).rev() {
            let head = &mut self.heads[k];
            let g = &grads.levels[k];
            let mut dpose = g.pose.clone();
            if let Some(t) = &mut head.tanh {
                dpose = t.backward(&dpose)?;
            }
            let dp = head.pose_out.backward(&dpose)?;
            let dpose_input = head.pose_in.backward(&dp)?;
            let (mut dfeat, dcls, dbox) = if head.fusion_widths.len() > 1 {
                let mut parts = split_channels(&dpose_input, &head.fusion_widths)?.into_iter();
                let df = parts.next().unwrap();
                let mut dc = parts.next().unwrap();
                let mut db = parts.next().unwrap();
                add_assign(&mut dc, &g.cls);
                add_assign(&mut db, &g.boxes);
                (df, dc, db)
            } else {
                (dpose_input, g.cls.clone(), g.boxes.clone())
            };
            add_assign(&mut dfeat, &head.cls.backward(&dcls)?);
            add_assign(&mut dfeat, &head.boxes.backward(&dbox)?);
            if let Some(d) = from_deeper.take() {
                add_assign(&mut dfeat, &d);
            }
            if k > 0 {
                from_deeper = Some(self.downs[k - 1].backward(&dfeat)?);
            } else {
                let mut d = dfeat;
                for layer in self.stem.iter_mut().rev() {
                    d = layer.backward(&d)?;
                }
            }
        }
        Ok(())
    }

    /// Zeroes the weights through which variant D's pose branch reads the class and box maps.
    /// With these weights at zero the pose branch computes what variant C's would.
    pub fn sever_fusion(&mut self) {
        for head in &mut self.heads {
            if head.fusion_widths.len() < 2 {
                continue;
            }
            let c_feat = head.fusion_widths[0];
            let c_in: usize = head.fusion_widths.iter().sum();
            let c_out = head.pose_in.conv.c_out();
            for (i, w) in head.pose_in.conv.weight.value.data_mut().iter_mut().enumerate() {
                let ci = (i / c_out) % c_in;
                if ci >= c_feat {
                    *w = T::zero();
                }
            }
        }
    }

    pub fn param_count(&mut self) -> usize {
        crate::nn::params_mut(self).iter().map(|p| p.value.len()).sum()
    }
}

fn add_assign<T: Scalar>(a: &mut Tensor<T>, b: &Tensor<T>) {
    debug_assert_eq!(a.shape(), b.shape());
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
}

impl<T: Scalar> HasParams<T> for Detector<T> {
    fn named_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, l) in self.stem.iter_mut().enumerate() {
            l.named_params(&join(prefix, &format!("stem{i}")), out);
        }
        for (i, l) in self.downs.iter_mut().enumerate() {
            l.named_params(&join(prefix, &format!("down{}", i + 1)), out);
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.named_params(&join(prefix, &format!("head{i}")), out);
        }
    }

    fn named_buffers<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, l) in self.stem.iter_mut().enumerate() {
            l.named_buffers(&join(prefix, &format!("stem{i}")), out);
        }
        for (i, l) in self.downs.iter_mut().enumerate() {
            l.named_buffers(&join(prefix, &format!("down{}", i + 1)), out);
        }
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.named_buffers(&join(prefix, &format!("head{i}")), out);
        }
    }
}

/// Converts 8-bit RGB images to the network input scale `p / 127.5 - 1`.
pub fn images_to_tensor<T: Scalar>(images: &[&image::RgbImage], size: u32) -> Result<Tensor<T>, DetectorError> {
    let mut data = Vec::with_capacity(images.len() * (size * size * 3) as usize);
    for img in images {
        if img.width() != size || img.height() != size {
            return Err(DetectorError::Nn(NnError::Shape(format!(
                "image is {}x{}, detector expects {size}x{size}",
                img.width(),
                img.height()
            ))));
        }
        data.extend(img.as_raw().iter().map(|&p| T::of(p as f64 / 127.5 - 1.0)));
    }
    Ok(Tensor::from_vec(&[images.len(), size as usize, size as usize, 3], data)?)
}
