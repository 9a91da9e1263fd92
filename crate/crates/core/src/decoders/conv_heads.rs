//! Convolutional heads: Linear, SegFormer, DA, ResNet and UNet.

use candle_core::{Tensor, D};

use super::{check_maps, DecodeOutput, Decoder, DecoderKind};
use crate::backbones::FeatureStack;
use crate::error::Result;
use crate::nn::{resize_bilinear, softmax_last, BatchNorm2d, Conv2d};
use crate::params::{Builder, Init};

fn conv_seg(b: &Builder, in_c: usize, k: usize) -> Result<Conv2d> {
    let mut c = Conv2d::with_init(b, in_c, k, 1, 1, 0, false, Init::Normal { std: 0.01 })?;
    c.bias = Some(b.param("bias", &[k], Init::Zeros)?);
    Ok(c)
}

fn upsample_to_input(x: &Tensor, f: &FeatureStack) -> Result<Tensor> {
    let (h, w) = f.source_hw;
    resize_bilinear(x, h, w)
}

/// Convolution without bias followed by batch norm and ReLU.
#[derive(Debug, Clone)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new(b: &Builder, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&b.pp("conv"), in_c, out_c, kernel, 1, kernel / 2, false)?,
            bn: BatchNorm2d::new(&b.pp("bn"), out_c)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x)?, train)?.relu()?)
    }
}

/// Two 3×3 conv/BN layers with an identity skip.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ResBlock {
    fn new(b: &Builder, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&b.pp("conv1"), c, c, 3, 1, 1, false)?,
            bn1: BatchNorm2d::new(&b.pp("bn1"), c)?,
            conv2: Conv2d::new(&b.pp("conv2"), c, c, 3, 1, 1, false)?,
            bn2: BatchNorm2d::new(&b.pp("bn2"), c)?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.bn1.forward(&self.conv1.forward(x)?, train)?.relu()?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        Ok((y + x)?.relu()?)
    }
}

fn res_blocks(b: &Builder, c: usize, m: usize) -> Result<Vec<ResBlock>> {
    (0..m).map(|i| ResBlock::new(&b.pp(i), c)).collect()
}

fn run_blocks(blocks: &[ResBlock], mut x: Tensor, train: bool) -> Result<Tensor> {
    for blk in blocks {
        x = blk.forward(&x, train)?;
    }
    Ok(x)
}

/// Batch norm and a 1×1 convolution over the channel-concatenated tap maps.
#[derive(Debug, Clone)]
pub struct LinearHead {
    bn: BatchNorm2d,
    conv_seg: Conv2d,
}

impl LinearHead {
    pub fn new(b: &Builder, embed: usize, taps: usize, k: usize) -> Result<Self> {
        let c = embed * taps;
        Ok(Self {
            bn: BatchNorm2d::new(&b.pp("bn"), c)?,
            conv_seg: conv_seg(&b.pp("conv_seg"), c, k)?,
        })
    }
}

impl Decoder for LinearHead {
    fn kind(&self) -> DecoderKind {
        DecoderKind::Linear
    }

    fn forward(&self, f: &FeatureStack, train: bool) -> Result<DecodeOutput> {
        check_maps(f, 1, self.kind())?;
        let x = Tensor::cat(&f.maps, 1)?;
        let y = self.conv_seg.forward(&self.bn.forward(&x, train)?)?;
        Ok(DecodeOutput {
            logits: upsample_to_input(&y, f)?,
            aux_logits: None,
        })
    }
}

/// Per-tap projection to a shared width, concatenation and a fusion layer.
#[derive(Debug, Clone)]
pub struct SegFormerHead {
    linear_c: Vec<ConvBnRelu>,
    fuse: ConvBnRelu,
    conv_seg: Conv2d,
}

impl SegFormerHead {
    pub fn new(b: &Builder, embed: usize, taps: usize, c: usize, k: usize) -> Result<Self> {
        Ok(Self {
            linear_c: (0..taps)
                .map(|i| ConvBnRelu::new(&b.pp(format!("linear_c.{i}")), embed, c, 1))
                .collect::<Result<_>>()?,
            fuse: ConvBnRelu::new(&b.pp("linear_fuse"), taps * c, c, 1)?,
            conv_seg: conv_seg(&b.pp("conv_seg"), c, k)?,
        })
    }

    pub fn fusion_in_channels(&self) -> usize {
        self.fuse.conv.weight.dims()[1]
    }
}

impl Decoder for SegFormerHead {
    fn kind(&self) -> DecoderKind {
        DecoderKind::Segformer
    }

    fn forward(&self, f: &FeatureStack, train: bool) -> Result<DecodeOutput> {
        check_maps(f, self.linear_c.len(), self.kind())?;
        let (mut th, mut tw) = (0, 0);
        for m in &f.maps {
            let (_, _, h, w) = m.dims4()?;
            th = th.max(h);
            tw = tw.max(w);
        }
        let projected = self
            .linear_c
            .iter()
            .zip(&f.maps)
            .map(|(l, m)| resize_bilinear(&l.forward(m, train)?, th, tw))
            .collect::<Result<Vec<_>>>()?;
        let x = self.fuse.forward(&Tensor::cat(&projected, 1)?, train)?;
        let y = self.conv_seg.forward(&x)?;
        Ok(DecodeOutput {
            logits: upsample_to_input(&y, f)?,
            aux_logits: None,
        })
    }
}

/// Spatial attention weights (`B×hw×hw`, rows sum to one) of the position
/// attention module for query/key projections `q` (`B×c'×h×w`) and `k`.
pub fn pam_attention(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = q.dims4()?;
    let q = q.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
    let k = k.reshape((b, c, h * w))?.contiguous()?;
    softmax_last(&q.matmul(&k)?)
}

#[derive(Debug, Clone)]
struct Pam {
    query: Conv2d,
    key: Conv2d,
    value: Conv2d,
    gamma: Tensor,
}

impl Pam {
    fn new(b: &Builder, c: usize) -> Result<Self> {
        Ok(Self {
            query: Conv2d::new(&b.pp("query_project"), c, c / 8, 1, 1, 0, true)?,
            key: Conv2d::new(&b.pp("key_project"), c, c / 8, 1, 1, 0, true)?,
            value: Conv2d::new(&b.pp("value_project"), c, c, 1, 1, 0, true)?,
            gamma: b.param("gamma", &[1], Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let att = pam_attention(&self.query.forward(x)?, &self.key.forward(x)?)?;
        let v = self.value.forward(x)?.reshape((b, c, h * w))?;
        let out = v.matmul(&att.transpose(1, 2)?)?.reshape((b, c, h, w))?;
        Ok((out.broadcast_mul(&self.gamma)? + x)?)
    }
}

#[derive(Debug, Clone)]
struct Cam {
    gamma: Tensor,
}

impl Cam {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = x.reshape((b, c, h * w))?;
        let energy = flat.matmul(&flat.t()?)?;
        let energy = energy
            .max_keepdim(D::Minus1)?
            .broadcast_sub(&energy)?;
        let att = softmax_last(&energy)?;
        let out = att.matmul(&flat)?.reshape((b, c, h, w))?;
        Ok((out.broadcast_mul(&self.gamma)? + x)?)
    }
}

/// Dual attention: position and channel attention branches on the last map.
#[derive(Debug, Clone)]
pub struct DaHead {
    pam_in: ConvBnRelu,
    pam: Pam,
    pam_out: ConvBnRelu,
    cam_in: ConvBnRelu,
    cam: Cam,
    cam_out: ConvBnRelu,
    conv_seg: Conv2d,
}

impl DaHead {
    pub fn new(b: &Builder, embed: usize, c: usize, k: usize) -> Result<Self> {
        Ok(Self {
            pam_in: ConvBnRelu::new(&b.pp("pam_in_conv"), embed, c, 3)?,
            pam: Pam::new(&b.pp("pam"), c)?,
            pam_out: ConvBnRelu::new(&b.pp("pam_out_conv"), c, c, 3)?,
            cam_in: ConvBnRelu::new(&b.pp("cam_in_conv"), embed, c, 3)?,
            cam: Cam {
                gamma: b.pp("cam").param("gamma", &[1], Init::Zeros)?,
            },
            cam_out: ConvBnRelu::new(&b.pp("cam_out_conv"), c, c, 3)?,
            conv_seg: conv_seg(&b.pp("conv_seg"), c, k)?,
        })
    }

    /// Output of the position-attention module alone.
    pub fn position_attention(&self, x: &Tensor) -> Result<Tensor> {
        self.pam.forward(x)
    }
}

impl Decoder for DaHead {
    fn kind(&self) -> DecoderKind {
        DecoderKind::Da
    }

    fn forward(&self, f: &FeatureStack, train: bool) -> Result<DecodeOutput> {
        check_maps(f, 1, self.kind())?;
        let x = f.last();
        let p = self.pam_out.forward(&self.pam.forward(&self.pam_in.forward(x, train)?)?, train)?;
        let c = self.cam_out.forward(&self.cam.forward(&self.cam_in.forward(x, train)?)?, train)?;
        let y = self.conv_seg.forward(&(p + c)?)?;
        Ok(DecodeOutput {
            logits: upsample_to_input(&y, f)?,
            aux_logits: None,
        })
    }
}

fn stage_width(hidden: usize, s: usize) -> usize {
    (hidden >> s).max(1)
}

#[derive(Debug, Clone)]
struct UpStage {
    up: crate::nn::ConvTranspose2d,
    blocks: Vec<ResBlock>,
}

/// Repeated ×2 transposed-convolution upsampling with residual blocks.
#[derive(Debug, Clone)]
pub struct ResNetHead {
    stages: Vec<UpStage>,
    conv_seg: Conv2d,
}

impl ResNetHead {
    pub fn new(b: &Builder, embed: usize, hidden: usize, m: usize, stages: usize, k: usize) -> Result<Self> {
        let mut in_c = embed;
        let mut out = Vec::with_capacity(stages);
        for s in 0..stages {
            let c = stage_width(hidden, s);
            let sb = b.pp(format!("stages.{s}"));
            out.push(UpStage {
                up: crate::nn::ConvTranspose2d::new(&sb.pp("up"), in_c, c, 2, true)?,
                blocks: res_blocks(&sb.pp("blocks"), c, m)?,
            });
            in_c = c;
        }
        Ok(Self {
            stages: out,
            conv_seg: conv_seg(&b.pp("conv_seg"), in_c, k)?,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }
}

impl Decoder for ResNetHead {
    fn kind(&self) -> DecoderKind {
        DecoderKind::Resnet
    }

    fn forward(&self, f: &FeatureStack, train: bool) -> Result<DecodeOutput> {
        check_maps(f, 1, self.kind())?;
        let mut x = f.last().clone();
        for st in &self.stages {
            x = run_blocks(&st.blocks, st.up.forward(&x)?, train)?;
        }
        let y = self.conv_seg.forward(&x)?;
        Ok(DecodeOutput {
            logits: upsample_to_input(&y, f)?,
            aux_logits: None,
        })
    }
}

#[derive(Debug, Clone)]
struct UNetStage {
    conv_in: ConvBnRelu,
    blocks: Vec<ResBlock>,
    /// Index into the tap maps concatenated at this stage.
    skip: Option<usize>,
}

/// Deep-to-shallow decoder with skip connections from earlier taps.
///
/// Stage 0 runs on the deepest map. Each later stage upsamples ×2,
/// concatenates the next shallower tap (resized to the current grid) while
/// taps remain, then applies a 3×3 conv and residual blocks.
#[derive(Debug, Clone)]
pub struct UNetHead {
    stages: Vec<UNetStage>,
    conv_seg: Conv2d,
}

impl UNetHead {
    pub fn new(
        b: &Builder,
        embed: usize,
        taps: usize,
        hidden: usize,
        m: usize,
        upsamples: usize,
        k: usize,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(upsamples + 1);
        let mut prev = 0;
        for s in 0..=upsamples {
            let c = stage_width(hidden, s);
            let skip = if s == 0 { Some(taps - 1) } else { (taps - 1).checked_sub(s) };
            let in_c = prev + if skip.is_some() { embed } else { 0 };
            let sb = b.pp(format!("stages.{s}"));
            stages.push(UNetStage {
                conv_in: ConvBnRelu::new(&sb.pp("conv_in"), in_c, c, 3)?,
                blocks: res_blocks(&sb.pp("blocks"), c, m)?,
                skip,
            });
            prev = c;
        }
        Ok(Self {
            stages,
            conv_seg: conv_seg(&b.pp("conv_seg"), prev, k)?,
        })
    }

    /// Input width of every stage that concatenates a skip map, in order.
    pub fn concat_widths(&self) -> Vec<usize> {
        self.stages
            .iter()
            .skip(1)
            .filter(|s| s.skip.is_some())
            .map(|s| s.conv_in.conv.weight.dims()[1])
            .collect()
    }

    /// Decoder width entering each concatenating stage.
    pub fn stage_widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.conv_in.conv.out_channels()).collect()
    }
}

impl Decoder for UNetHead {
    fn kind(&self) -> DecoderKind {
        DecoderKind::Unet
    }

    fn forward(&self, f: &FeatureStack, train: bool) -> Result<DecodeOutput> {
        check_maps(f, 4, self.kind())?;
        let mut x: Option<Tensor> = None;
        for st in &self.stages {
            let input = match (x.take(), st.skip) {
                (None, Some(i)) => f.maps[i].clone(),
                (Some(prev), skip) => {
                    let (_, _, h, w) = prev.dims4()?;
                    let up = resize_bilinear(&prev, 2 * h, 2 * w)?;
                    match skip {
                        Some(i) => {
                            let s = resize_bilinear(&f.maps[i], 2 * h, 2 * w)?;
                            Tensor::cat(&[&up, &s], 1)?
                        }
                        None => up,
                    }
                }
                (None, None) => unreachable!("stage 0 always reads the deepest tap"),
            };
            x = Some(run_blocks(&st.blocks, st.conv_in.forward(&input, train)?, train)?);
        }
        let y = self.conv_seg.forward(&x.expect("at least one stage"))?;
        Ok(DecodeOutput {
            logits: upsample_to_input(&y, f)?,
            aux_logits: None,
        })
    }
}
