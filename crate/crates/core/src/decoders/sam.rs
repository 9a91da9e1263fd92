//! Prompt-free SAM-style mask decoders: plain, HQ, hierarchical, and HQ
//! with the hierarchical second stage.
//!
//! Stage-1 parameter names are shared by every variant so that weights of a
//! plain or HQ decoder map one-to-one onto the first stage of the
//! hierarchical variants; second-stage parameters live under `stage2`.

use candle_core::{DType, Device, Tensor, Var};

use super::{check_maps, DecodeOutput, Decoder, DecoderKind};
use crate::backbones::FeatureStack;
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, softmax_last, Conv2d, ConvTranspose2d, LayerNorm, LayerNorm2d, Linear};
use crate::params::{Builder, Init};

/// Widths of the SAM-family transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamDims {
    pub dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub depth: usize,
    pub attn_downsample: usize,
    pub stage2_blocks: usize,
}

impl SamDims {
    pub fn for_width(dim: usize) -> Self {
        Self {
            dim,
            heads: if dim >= 64 { 8 } else { 4 },
            mlp_dim: 8 * dim,
            depth: 2,
            attn_downsample: 2,
            stage2_blocks: 4,
        }
    }
}

#[derive(Debug, Clone)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    fn new(b: &Builder, dim: usize, heads: usize, downsample: usize) -> Result<Self> {
        let inner = dim / downsample;
        Ok(Self {
            q: Linear::new(&b.pp("q_proj"), dim, inner, true)?,
            k: Linear::new(&b.pp("k_proj"), dim, inner, true)?,
            v: Linear::new(&b.pp("v_proj"), dim, inner, true)?,
            out: Linear::new(&b.pp("out_proj"), inner, dim, true)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        Ok(x.reshape((b, n, self.heads, c / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `bias`, when given, is added to the `B×heads×Nq×Nk` attention logits.
    fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let q = self.split(&self.q.forward(q)?)?;
        let k = self.split(&self.k.forward(k)?)?;
        let v = self.split(&self.v.forward(v)?)?;
        let (b, h, n, hd) = q.dims4()?;
        let mut att = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        if let Some(bias) = bias {
            att = att.broadcast_add(bias)?;
        }
        let y = softmax_last(&att)?.matmul(&v)?;
        let y = y.transpose(1, 2)?.reshape((b, n, h * hd))?;
        self.out.forward(&y)
    }
}

/// Stack of linear layers with ReLU between them.
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn new(b: &Builder, dims: &[usize]) -> Result<Self> {
        Ok(Self {
            layers: dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| Linear::new(&b.pp(format!("layers.{i}")), w[0], w[1], true))
                .collect::<Result<_>>()?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(&x)?;
            if i + 1 < self.layers.len() {
                x = x.relu()?;
            }
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    norm1: LayerNorm,
    cross_t2i: Attention,
    norm2: LayerNorm,
    mlp: Mlp,
    norm3: LayerNorm,
    norm4: LayerNorm,
    cross_i2t: Attention,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn new(b: &Builder, d: &SamDims, skip_first_pe: bool) -> Result<Self> {
        let dim = d.dim;
        Ok(Self {
            self_attn: Attention::new(&b.pp("self_attn"), dim, d.heads, 1)?,
            norm1: LayerNorm::new(&b.pp("norm1"), dim, 1e-5)?,
            cross_t2i: Attention::new(&b.pp("cross_attn_token_to_image"), dim, d.heads, d.attn_downsample)?,
            norm2: LayerNorm::new(&b.pp("norm2"), dim, 1e-5)?,
            mlp: Mlp {
                layers: vec![
                    Linear::new(&b.pp("mlp.lin1"), dim, d.mlp_dim, true)?,
                    Linear::new(&b.pp("mlp.lin2"), d.mlp_dim, dim, true)?,
                ],
            },
            norm3: LayerNorm::new(&b.pp("norm3"), dim, 1e-5)?,
            norm4: LayerNorm::new(&b.pp("norm4"), dim, 1e-5)?,
            cross_i2t: Attention::new(&b.pp("cross_attn_image_to_token"), dim, d.heads, d.attn_downsample)?,
            skip_first_pe,
        })
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
        t2i_bias: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries, None)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries, None)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = keys.broadcast_add(key_pe)?;
        let a = self.cross_t2i.forward(&q, &k, keys, t2i_bias)?;
        let queries = self.norm2.forward(&(queries + a)?)?;

        let m = self.mlp.forward(&queries)?;
        let queries = self.norm3.forward(&(queries + m)?)?;

        let q = (&queries + query_pe)?;
        let a = self.cross_i2t.forward(&k, &q, &queries, None)?;
        let keys = self.norm4.forward(&(keys + a)?)?;
        Ok((queries, keys))
    }
}

/// ConvT ×2, LayerNorm2d, GELU, ConvT ×2 (optionally followed by GELU).
#[derive(Debug, Clone)]
struct Upscale {
    up1: ConvTranspose2d,
    norm: LayerNorm2d,
    up2: ConvTranspose2d,
    final_gelu: bool,
}

impl Upscale {
    fn new(b: &Builder, in_c: usize, mid: usize, out: usize, final_gelu: bool) -> Result<Self> {
        Ok(Self {
            up1: ConvTranspose2d::new(&b.pp("0"), in_c, mid, 2, true)?,
            norm: LayerNorm2d::new(&b.pp("1"), mid)?,
            up2: ConvTranspose2d::new(&b.pp("3"), mid, out, 2, true)?,
            final_gelu,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.norm.forward(&self.up1.forward(x)?)?.gelu_erf()?;
        let y = self.up2.forward(&y)?;
        if self.final_gelu {
            Ok(y.gelu_erf()?)
        } else {
            Ok(y)
        }
    }
}

/// The `image tokens × hypernetwork weights` product: `B×K×c` by `B×c×H×W`.
fn hyper_product(weights: &Tensor, feats: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = feats.dims4()?;
    let k = weights.dim(1)?;
    Ok(weights
        .matmul(&feats.reshape((b, c, h * w))?)?
        .reshape((b, k, h, w))?)
}

#[derive(Debug, Clone)]
struct PromptEncoder {
    sparse: Tensor,
    dense: Tensor,
    gaussian: Tensor,
}

impl PromptEncoder {
    fn new(b: &Builder, dim: usize) -> Result<Self> {
        let gaussian = b
            .buffer("pe_layer.positional_encoding_gaussian_matrix", &[2, dim / 2], Init::Normal { std: 1.0 })?
            .map(|v: Var| v.as_tensor().detach())
            .unwrap_or(Tensor::zeros((2, dim / 2), DType::F32, &Device::Cpu)?);
        Ok(Self {
            sparse: b.param("not_a_point_embed.weight", &[1, dim], Init::Zeros)?,
            dense: b.param("no_mask_embed.weight", &[1, dim], Init::Zeros)?,
            gaussian,
        })
    }

    /// Random-Fourier positional encoding of an `h×w` grid, `1×d×h×w`.
    fn image_pe(&self, h: usize, w: usize) -> Result<Tensor> {
        let dev = self.gaussian.device();
        let mut coords = Vec::with_capacity(h * w * 2);
        for i in 0..h {
            for j in 0..w {
                coords.push(2.0 * ((j as f32 + 0.5) / w as f32) - 1.0);
                coords.push(2.0 * ((i as f32 + 0.5) / h as f32) - 1.0);
            }
        }
        let c = Tensor::from_vec(coords, (h * w, 2), dev)?;
        let proj = (c.matmul(&self.gaussian)? * (2.0 * std::f64::consts::PI))?;
        let pe = Tensor::cat(&[proj.sin()?, proj.cos()?], 1)?;
        let d = pe.dim(1)?;
        Ok(pe.t()?.reshape((1, d, h, w))?)
    }
}

#[derive(Debug, Clone)]
struct HqParts {
    token: Tensor,
    mlp: Mlp,
    compress: Upscale,
    embedding_encoder: Upscale,
    mask_feature: (Conv2d, LayerNorm2d, Conv2d),
}

#[derive(Debug, Clone)]
struct GuidedBlock {
    image_attn: Attention,
    image_norm: LayerNorm,
    block: TwoWayBlock,
    alpha: Tensor,
    beta: Tensor,
}

#[derive(Debug, Clone)]
struct Stage2 {
    mask_tokens: Tensor,
    refine: Conv2d,
    refine_norm: LayerNorm2d,
    blocks: Vec<GuidedBlock>,
    final_attn: Attention,
    norm_final: LayerNorm,
    upscaling: Upscale,
    hypernets: Vec<Mlp>,
}

/// How the second stage obtains its mask prior.
#[derive(Debug, Clone)]
pub enum PriorMode {
    /// Detached class probabilities of the first stage (normal operation).
    FromStage1,
    /// No attention bias at all.
    Disabled,
    /// An explicit `B×K×h×w` probability map on the token grid.
    Given(Tensor),
}

struct Stage1Out {
    masks: Tensor,
    tokens: Tensor,
    keys: Tensor,
    image_pe: Tensor,
    hq_features: Option<Tensor>,
    grid: (usize, usize),
}

/// SAM mask decoder family.
#[derive(Debug, Clone)]
pub struct SamDecoder {
    kind: DecoderKind,
    dims: SamDims,
    k: usize,
    proj: Conv2d,
    prompt: PromptEncoder,
    mask_tokens: Tensor,
    layers: Vec<TwoWayBlock>,
    final_attn: Attention,
    norm_final: LayerNorm,
    upscaling: Upscale,
    hypernets: Vec<Mlp>,
    hq: Option<HqParts>,
    stage2: Option<Stage2>,
}

impl SamDecoder {
    pub fn new(b: &Builder, kind: DecoderKind, embed: usize, d: SamDims, k: usize) -> Result<Self> {
        if !kind.is_sam_family() {
            return Err(Error::Build(format!("{kind} is not a SAM-family decoder")));
        }
        let dim = d.dim;
        let c8 = dim / 8;
        let prompt_b = b.pp("prompt_encoder").with_trainable(kind != DecoderKind::SammdFpe);
        let prompt = PromptEncoder::new(&prompt_b, dim)?;
        let t = b.pp("transformer");
        let layers = (0..d.depth)
            .map(|i| TwoWayBlock::new(&t.pp(format!("layers.{i}")), &d, i == 0))
            .collect::<Result<Vec<_>>>()?;
        let hypernets = |b: &Builder| -> Result<Vec<Mlp>> {
            (0..k)
                .map(|i| Mlp::new(&b.pp(format!("output_hypernetworks_mlps.{i}")), &[dim, dim, dim, c8]))
                .collect()
        };
        let hq = if matches!(kind, DecoderKind::Hqsam | DecoderKind::Hqhsam) {
            let mf = b.pp("embedding_maskfeature");
            Some(HqParts {
                token: b.param("hf_token.weight", &[1, dim], Init::Normal { std: 1.0 })?,
                mlp: Mlp::new(&b.pp("hf_mlp"), &[dim, dim, dim, k * c8])?,
                compress: Upscale::new(&b.pp("compress_vit_feat"), 2 * embed, dim, c8, false)?,
                embedding_encoder: Upscale::new(&b.pp("embedding_encoder"), dim, dim / 4, c8, false)?,
                mask_feature: (
                    Conv2d::new(&mf.pp("0"), c8, dim / 4, 3, 1, 1, true)?,
                    LayerNorm2d::new(&mf.pp("1"), dim / 4)?,
                    Conv2d::new(&mf.pp("3"), dim / 4, c8, 3, 1, 1, true)?,
                ),
            })
        } else {
            None
        };
        let stage2 = if kind.has_aux() {
            let s = b.pp("stage2");
            let blocks = (0..d.stage2_blocks)
                .map(|i| {
                    let gb = s.pp(format!("blocks.{i}"));
                    Ok(GuidedBlock {
                        image_attn: Attention::new(&gb.pp("image_attn"), dim, d.heads, 1)?,
                        image_norm: LayerNorm::new(&gb.pp("image_norm"), dim, 1e-5)?,
                        block: TwoWayBlock::new(&gb.pp("block"), &d, false)?,
                        alpha: gb.param("alpha", &[d.heads], Init::Ones)?,
                        beta: gb.param("beta", &[d.heads], Init::Ones)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(Stage2 {
                mask_tokens: s.param("mask_tokens.weight", &[k, dim], Init::Normal { std: 1.0 })?,
                refine: Conv2d::new(&s.pp("refine"), dim, dim, 3, 1, 1, true)?,
                refine_norm: LayerNorm2d::new(&s.pp("refine_norm"), dim)?,
                blocks,
                final_attn: Attention::new(&s.pp("final_attn_token_to_image"), dim, d.heads, d.attn_downsample)?,
                norm_final: LayerNorm::new(&s.pp("norm_final_attn"), dim, 1e-5)?,
                upscaling: Upscale::new(&s.pp("output_upscaling"), dim, dim / 4, c8, true)?,
                hypernets: hypernets(&s)?,
            })
        } else {
            None
        };
        Ok(Self {
            kind,
            dims: d,
            k,
            proj: Conv2d::new(&b.pp("proj"), embed, dim, 1, 1, 0, true)?,
            prompt,
            mask_tokens: b.param("mask_tokens.weight", &[k, dim], Init::Normal { std: 1.0 })?,
            layers,
            final_attn: Attention::new(&t.pp("final_attn_token_to_image"), dim, d.heads, d.attn_downsample)?,
            norm_final: LayerNorm::new(&t.pp("norm_final_attn"), dim, 1e-5)?,
            upscaling: Upscale::new(&b.pp("output_upscaling"), dim, dim / 4, c8, true)?,
            hypernets: hypernets(b)?,
            hq,
            stage2,
        })
    }

    pub fn dims(&self) -> SamDims {
        self.dims
    }

    /// Number of output tokens that produce masks (mask tokens plus the HQ token).
    pub fn output_token_count(&self) -> usize {
        self.k + usize::from(self.hq.is_some())
    }

    fn hyper_weights(nets: &[Mlp], tokens: &Tensor) -> Result<Tensor> {
        let per = nets
            .iter()
            .enumerate()
            .map(|(i, n)| n.forward(&tokens.narrow(1, i, 1)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&per, 1)?)
    }

    fn stage1(&self, f: &FeatureStack) -> Result<Stage1Out> {
        let x = f.last();
        let (bsz, _, h, w) = x.dims4()?;
        let dim = self.dims.dim;
        let src = self
            .proj
            .forward(x)?
            .broadcast_add(&self.prompt.dense.reshape((1, dim, 1, 1))?)?;
        let image_pe = self.prompt.image_pe(h, w)?;

        let mut toks = vec![self.mask_tokens.clone()];
        if let Some(hq) = &self.hq {
            toks.push(hq.token.clone());
        }
        toks.push(self.prompt.sparse.clone());
        let tokens = Tensor::cat(&toks, 0)?;
        let n_tok = tokens.dim(0)?;
        let tokens = tokens.unsqueeze(0)?.broadcast_as((bsz, n_tok, dim))?.contiguous()?;

        let keys = src.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let key_pe = image_pe.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let mut q = tokens.clone();
        let mut k = keys;
        for layer in &self.layers {
            (q, k) = layer.forward(&q, &k, &tokens, &key_pe, None)?;
        }
        let a = self.final_attn.forward(&(&q + &tokens)?, &k.broadcast_add(&key_pe)?, &k, None)?;
        let q = self.norm_final.forward(&(q + a)?)?;

        let grid = k.transpose(1, 2)?.reshape((bsz, dim, h, w))?;
        let up = self.upscaling.forward(&grid)?;
        let hw = Self::hyper_weights(&self.hypernets, &q.narrow(1, 0, self.k)?)?;
        let mut masks = hyper_product(&hw, &up)?;

        let mut hq_features = None;
        if let Some(hq) = &self.hq {
            let early = Tensor::cat(&[&f.maps[0], x], 1)?;
            let fused = (hq.embedding_encoder.forward(&src)? + hq.compress.forward(&early)?)?;
            let (c1, n1, c2) = &hq.mask_feature;
            let refined = c2.forward(&n1.forward(&c1.forward(&up)?)?.gelu_erf()?)?;
            let hq_feat = (refined + &fused)?;
            let c8 = dim / 8;
            let wts = hq
                .mlp
                .forward(&q.narrow(1, self.k, 1)?)?
                .reshape((bsz, self.k, c8))?;
            masks = (masks + hyper_product(&wts, &hq_feat)?)?;
            hq_features = Some(fused);
        }
        Ok(Stage1Out {
            masks,
            tokens: q,
            keys: k,
            image_pe: key_pe,
            hq_features,
            grid: (h, w),
        })
    }

    fn stage2(&self, s2: &Stage2, s1: &Stage1Out, prior: Option<&Tensor>) -> Result<Tensor> {
        let (h, w) = s1.grid;
        let dim = self.dims.dim;
        let heads = self.dims.heads;
        let k = self.k;
        let bsz = s1.tokens.dim(0)?;
        let n_tok = s1.tokens.dim(1)?;

        let mask_part = s1.tokens.narrow(1, 0, k)?.broadcast_add(&s2.mask_tokens)?;
        let tokens = if n_tok > k {
            Tensor::cat(&[&mask_part, &s1.tokens.narrow(1, k, n_tok - k)?], 1)?
        } else {
            mask_part
        };
        let grid = s1.keys.transpose(1, 2)?.reshape((bsz, dim, h, w))?;
        let grid = s2.refine_norm.forward(&s2.refine.forward(&grid)?)?;
        let mut keys = grid.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let key_pe = &s1.image_pe;

        // centered priors: uniform probabilities give exactly zero bias
        let centered = match prior {
            Some(p) => {
                let p = p.reshape((bsz, k, h * w))?;
                Some((p - 1.0 / k as f64)?)
            }
            None => None,
        };
        let affinity = match &centered {
            Some(c) => Some((c.t()?.matmul(c)? * k as f64)?.unsqueeze(1)?),
            None => None,
        };
        let token_bias = match &centered {
            Some(c) => {
                let c = (c * k as f64)?;
                let c = if n_tok > k {
                    let pad = Tensor::zeros((bsz, n_tok - k, h * w), c.dtype(), c.device())?;
                    Tensor::cat(&[&c, &pad], 1)?
                } else {
                    c
                };
                Some(c.unsqueeze(1)?)
            }
            None => None,
        };

        let mut q = tokens.clone();
        for blk in &s2.blocks {
            let img_bias = match &affinity {
                Some(a) => Some(a.broadcast_mul(&blk.beta.reshape((1, heads, 1, 1))?)?),
                None => None,
            };
            let kq = keys.broadcast_add(key_pe)?;
            let a = blk.image_attn.forward(&kq, &kq, &keys, img_bias.as_ref())?;
            keys = blk.image_norm.forward(&(keys + a)?)?;
            let t_bias = match &token_bias {
                Some(t) => Some(t.broadcast_mul(&blk.alpha.reshape((1, heads, 1, 1))?)?),
                None => None,
            };
            (q, keys) = blk.block.forward(&q, &keys, &tokens, key_pe, t_bias.as_ref())?;
        }
        let a = s2.final_attn.forward(&(&q + &tokens)?, &keys.broadcast_add(key_pe)?, &keys, None)?;
        let q = s2.norm_final.forward(&(q + a)?)?;

        let grid = keys.transpose(1, 2)?.reshape((bsz, dim, h, w))?;
        let mut feats = s2.upscaling.forward(&grid)?;
        if let Some(hq) = &s1.hq_features {
            feats = (feats + hq)?;
        }
        let hw = Self::hyper_weights(&s2.hypernets, &q.narrow(1, 0, k)?)?;
        hyper_product(&hw, &feats)
    }

    /// Decode with an explicit choice of second-stage prior.
    pub fn forward_with_prior(&self, f: &FeatureStack, mode: PriorMode) -> Result<DecodeOutput> {
        check_maps(f, self.kind.min_taps(), self.kind)?;
        let (ih, iw) = f.source_hw;
        let s1 = self.stage1(f)?;
        let Some(s2) = &self.stage2 else {
            return Ok(DecodeOutput {
                logits: resize_bilinear(&s1.masks, ih, iw)?,
                aux_logits: None,
            });
        };
        let (h, _) = s1.grid;
        let prior = match mode {
            PriorMode::Disabled => None,
            PriorMode::Given(p) => Some(p),
            PriorMode::FromStage1 => {
                let (_, _, mh, _) = s1.masks.dims4()?;
                let probs = softmax_over_classes(&s1.masks.detach())?;
                Some(probs.avg_pool2d(mh / h)?.detach())
            }
        };
        let masks2 = self.stage2(s2, &s1, prior.as_ref())?;
        Ok(DecodeOutput {
            logits: resize_bilinear(&masks2, ih, iw)?,
            aux_logits: Some(vec![resize_bilinear(&s1.masks, ih, iw)?]),
        })
    }
}

fn softmax_over_classes(x: &Tensor) -> Result<Tensor> {
    let t = x.permute((0, 2, 3, 1))?.contiguous()?;
    Ok(softmax_last(&t)?.permute((0, 3, 1, 2))?.contiguous()?)
}

impl Decoder for SamDecoder {
    fn kind(&self) -> DecoderKind {
        self.kind
    }

    fn forward(&self, f: &FeatureStack, _train: bool) -> Result<DecodeOutput> {
        self.forward_with_prior(f, PriorMode::FromStage1)
    }
}
