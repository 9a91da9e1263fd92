//! Plain ViT encoders for the supported foundation-model families.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, softmax_last, LayerNorm, Linear};
use crate::params::{Builder, Init, ParamGroup, ParamStore, ParameterPartition, WeightSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Dinov2,
    Sam,
    Medsam,
    Mae,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Size {
    Small,
    Base,
    Large,
    HugeOrGiant,
    Toy,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Dinov2 => "dinov2",
            Family::Sam => "sam",
            Family::Medsam => "medsam",
            Family::Mae => "mae",
            Family::Toy => "toy",
        };
        f.write_str(s)
    }
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Size::Small => "small",
            Size::Base => "base",
            Size::Large => "large",
            Size::HugeOrGiant => "huge_or_giant",
            Size::Toy => "toy",
        };
        f.write_str(s)
    }
}

/// Layout of a stored positional encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeLayout {
    /// `1×(1+h0·w0)×E`, first row belongs to the class token.
    WithCls,
    /// `1×h0×w0×E`.
    Grid,
}

/// Fixed architecture of a named preset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Preset {
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    /// Image side the positional encoding was trained at.
    pub image_size: usize,
    pub cls_token: bool,
    pub layer_scale: bool,
}

pub fn preset(family: Family, size: Size) -> Result<Preset> {
    let p = |embed_dim, depth, heads, patch_size, image_size, cls_token, layer_scale| Preset {
        embed_dim,
        depth,
        heads,
        patch_size,
        image_size,
        cls_token,
        layer_scale,
    };
    Ok(match (family, size) {
        (Family::Dinov2, Size::Small) => p(384, 12, 6, 14, 518, true, true),
        (Family::Dinov2, Size::Base) => p(768, 12, 12, 14, 518, true, true),
        (Family::Dinov2, Size::Large) => p(1024, 24, 16, 14, 518, true, true),
        (Family::Dinov2, Size::HugeOrGiant) => p(1536, 40, 24, 14, 518, true, true),
        (Family::Sam | Family::Medsam, Size::Base) => p(768, 12, 12, 16, 1024, false, false),
        (Family::Sam, Size::Large) => p(1024, 24, 16, 16, 1024, false, false),
        (Family::Sam, Size::HugeOrGiant) => p(1280, 32, 16, 16, 1024, false, false),
        (Family::Mae, Size::Base) => p(768, 12, 12, 16, 224, true, false),
        (Family::Mae, Size::Large) => p(1024, 24, 16, 16, 224, true, false),
        (Family::Mae, Size::HugeOrGiant) => p(1280, 32, 16, 14, 224, true, false),
        (Family::Toy, Size::Toy) => p(64, 4, 4, 16, 64, true, false),
        (f, s) => return Err(Error::Build(format!("unknown backbone preset {f}/{s}"))),
    })
}

/// Four evenly spaced block indices ending at the last block.
pub fn default_taps(depth: usize) -> Vec<usize> {
    if depth <= 4 {
        return (0..depth).collect();
    }
    let mut taps: Vec<usize> = (1..=4).map(|i| (i * depth + 2) / 4 - 1).collect();
    taps.dedup();
    taps
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub family: Family,
    pub size: Size,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    /// Only the `toy` family may override the preset's width, depth and heads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tap_depths: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_source: Option<PathBuf>,
}

/// A spec with every preset value filled in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneDims {
    pub family: Family,
    pub size: Size,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub tap_depths: Vec<usize>,
    pub pe_grid: (usize, usize),
    pub cls_token: bool,
    pub layer_scale: bool,
}

impl BackboneSpec {
    pub fn new(family: Family, size: Size) -> Self {
        Self {
            family,
            size,
            patch_size: None,
            embed_dim: None,
            depth: None,
            heads: None,
            tap_depths: None,
            pretrained_source: None,
        }
    }

    pub fn toy() -> Self {
        Self::new(Family::Toy, Size::Toy)
    }

    pub fn with_patch(mut self, patch: usize) -> Self {
        self.patch_size = Some(patch);
        self
    }

    pub fn with_taps(mut self, taps: Vec<usize>) -> Self {
        self.tap_depths = Some(taps);
        self
    }

    /// Resolve against the preset table, collecting every violation.
    pub fn dims(&self) -> Result<BackboneDims> {
        let p = preset(self.family, self.size)?;
        let mut errs = Vec::new();
        let overridable = self.family == Family::Toy;
        let mut pick = |name: &str, v: Option<usize>, d: usize| match v {
            Some(0) => {
                errs.push(format!("backbone.{name} must be positive"));
                d
            }
            Some(v) if v != d && !overridable => {
                errs.push(format!(
                    "backbone.{name} = {v} conflicts with the {}/{} preset value {d}",
                    self.family, self.size
                ));
                d
            }
            Some(v) => v,
            None => d,
        };
        let embed_dim = pick("embed_dim", self.embed_dim, p.embed_dim);
        let depth = pick("depth", self.depth, p.depth);
        let heads = pick("heads", self.heads, p.heads);
        let patch_size = match self.patch_size {
            Some(0) => {
                errs.push("backbone.patch_size must be positive".into());
                p.patch_size
            }
            Some(v) => v,
            None => p.patch_size,
        };
        if heads > 0 && embed_dim % heads != 0 {
            errs.push(format!("backbone.embed_dim {embed_dim} not divisible by heads {heads}"));
        }
        let tap_depths = self.tap_depths.clone().unwrap_or_else(|| default_taps(depth));
        if tap_depths.is_empty() {
            errs.push("backbone.tap_depths must not be empty".into());
        } else {
            if tap_depths.windows(2).any(|w| w[0] >= w[1]) {
                errs.push(format!("backbone.tap_depths {tap_depths:?} must be strictly increasing"));
            }
            if *tap_depths.last().expect("non-empty") != depth - 1 {
                errs.push(format!(
                    "backbone.tap_depths {tap_depths:?} must end at the final block {}",
                    depth - 1
                ));
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let g = (p.image_size / patch_size).max(1);
        Ok(BackboneDims {
            family: self.family,
            size: self.size,
            patch_size,
            embed_dim,
            depth,
            heads,
            tap_depths,
            pe_grid: (g, g),
            cls_token: p.cls_token,
            layer_scale: p.layer_scale,
        })
    }

    /// The same spec with every optional field made explicit.
    pub fn resolved(&self) -> Result<Self> {
        let d = self.dims()?;
        Ok(Self {
            family: self.family,
            size: self.size,
            patch_size: Some(d.patch_size),
            embed_dim: Some(d.embed_dim),
            depth: Some(d.depth),
            heads: Some(d.heads),
            tap_depths: Some(d.tap_depths),
            pretrained_source: self.pretrained_source.clone(),
        })
    }
}

/// Multi-depth feature maps emitted by a backbone.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    /// One `B×E×h×w` map per tap depth, shallow to deep.
    pub maps: Vec<Tensor>,
    pub cls_tokens: Option<Vec<Tensor>>,
    pub source_hw: (usize, usize),
}

impl FeatureStack {
    pub fn grid(&self) -> Result<(usize, usize)> {
        let (_, _, h, w) = self.maps[0].dims4()?;
        Ok((h, w))
    }

    pub fn batch(&self) -> Result<usize> {
        Ok(self.maps[0].dim(0)?)
    }

    pub fn last(&self) -> &Tensor {
        self.maps.last().expect("feature stack is never empty")
    }
}

/// Bilinearly resize a stored positional encoding to a new token grid.
///
/// Class-token rows pass through unchanged; the result keeps the input dtype
/// and is bit-identical to the input when the grid does not change.
pub fn interpolate_positional_encoding(
    pe: &Tensor,
    layout: PeLayout,
    source: (usize, usize),
    target: (usize, usize),
) -> Result<Tensor> {
    let (h0, w0) = source;
    let (h, w) = target;
    if h0 == 0 || w0 == 0 || h == 0 || w == 0 {
        return Err(Error::Shape(format!("grids must be non-empty, got {source:?} -> {target:?}")));
    }
    let dtype = pe.dtype();
    let resize = |grid: &Tensor| -> Result<Tensor> {
        // grid: 1×h0×w0×E
        if (h0, w0) == (h, w) {
            return Ok(grid.clone());
        }
        let x = grid.to_dtype(DType::F32)?.permute((0, 3, 1, 2))?.contiguous()?;
        let y = resize_bilinear(&x, h, w)?;
        Ok(y.permute((0, 2, 3, 1))?.contiguous()?.to_dtype(dtype)?)
    };
    match layout {
        PeLayout::WithCls => {
            let (one, n, e) = pe.dims3()?;
            if one != 1 || n != 1 + h0 * w0 {
                return Err(Error::Shape(format!(
                    "positional encoding has {n} rows, expected 1 + {h0}·{w0} = {}",
                    1 + h0 * w0
                )));
            }
            let cls = pe.narrow(1, 0, 1)?;
            let grid = pe.narrow(1, 1, h0 * w0)?.reshape((1, h0, w0, e))?;
            let out = resize(&grid)?.reshape((1, h * w, e))?;
            Ok(Tensor::cat(&[&cls, &out], 1)?)
        }
        PeLayout::Grid => {
            let dims = pe.dims();
            if dims.len() != 4 || dims[0] != 1 || dims[1] != h0 || dims[2] != w0 {
                return Err(Error::Shape(format!(
                    "positional encoding shape {dims:?} does not match grid {h0}×{w0}"
                )));
            }
            resize(pe)
        }
    }
}

/// Called after every transformer block with the full token sequence
/// (`B×N×E`, class token first when present). Returns the tokens fed onward.
pub trait BlockHook {
    fn after_block(&self, block: usize, tokens: &Tensor) -> Result<Tensor>;
}

#[derive(Debug, Clone)]
struct Attention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl Attention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, e) = x.dims3()?;
        let hd = e / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = (q.matmul(&k.t()?)? * (1.0 / (hd as f64).sqrt()))?;
        let att = softmax_last(&att)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((b, n, e))?;
        self.proj.forward(&y)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    attn: Attention,
    ls1: Option<Tensor>,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    ls2: Option<Tensor>,
}

impl Block {
    fn new(b: &Builder, dims: &BackboneDims) -> Result<Self> {
        let e = dims.embed_dim;
        let lin = |b: &Builder, i, o| {
            Linear::with_init(b, i, o, true, Init::TruncNormal { std: 0.02 }, Init::Zeros)
        };
        let ls = |b: &Builder| -> Result<Option<Tensor>> {
            if dims.layer_scale {
                Ok(Some(b.param("gamma", &[e], Init::Ones)?))
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            norm1: LayerNorm::new(&b.pp("norm1"), e, 1e-6)?,
            attn: Attention {
                qkv: lin(&b.pp("attn.qkv"), e, 3 * e)?,
                proj: lin(&b.pp("attn.proj"), e, e)?,
                heads: dims.heads,
            },
            ls1: ls(&b.pp("ls1"))?,
            norm2: LayerNorm::new(&b.pp("norm2"), e, 1e-6)?,
            fc1: lin(&b.pp("mlp.fc1"), e, 4 * e)?,
            fc2: lin(&b.pp("mlp.fc2"), 4 * e, e)?,
            ls2: ls(&b.pp("ls2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let scale = |y: Tensor, g: &Option<Tensor>| -> Result<Tensor> {
            match g {
                Some(g) => Ok(y.broadcast_mul(g)?),
                None => Ok(y),
            }
        };
        let a = scale(self.attn.forward(&self.norm1.forward(x)?)?, &self.ls1)?;
        let x = (x + a)?;
        let m = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        let m = scale(m, &self.ls2)?;
        Ok((x + m)?)
    }
}

const PIXEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const PIXEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// A ViT feature extractor.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub dims: BackboneDims,
    prefix: String,
    patch_w: Tensor,
    patch_b: Tensor,
    cls: Option<Tensor>,
    pos: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Backbone {
    /// Build under `b` (whose prefix names the backbone). Parameters are
    /// loaded from `spec.pretrained_source` when present.
    pub fn new(spec: &BackboneSpec, b: &Builder) -> Result<Self> {
        let dims = spec.dims()?;
        let source = match &spec.pretrained_source {
            Some(path) if !b.store().is_shape_only() => {
                let na = container::load(path)?;
                Some(Arc::new(WeightSource {
                    arrays: na.arrays.into_iter().collect(),
                    strict: true,
                }))
            }
            _ => None,
        };
        let b = b.with_source(source);
        let (e, p) = (dims.embed_dim, dims.patch_size);
        let patch_w = b.param(
            "patch_embed.proj.weight",
            &[e, 3, p, p],
            Init::FanIn(3 * p * p),
        )?;
        let patch_b = b.param("patch_embed.proj.bias", &[e], Init::Zeros)?;
        let cls = if dims.cls_token {
            Some(b.param("cls_token", &[1, 1, e], Init::TruncNormal { std: 0.02 })?)
        } else {
            None
        };
        let (h0, w0) = dims.pe_grid;
        let pos_shape: Vec<usize> = if dims.cls_token {
            vec![1, 1 + h0 * w0, e]
        } else {
            vec![1, h0, w0, e]
        };
        let pos = b.param("pos_embed", &pos_shape, Init::TruncNormal { std: 0.02 })?;
        let blocks = (0..dims.depth)
            .map(|i| Block::new(&b.pp(format!("blocks.{i}")), &dims))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(&b.pp("norm"), e, 1e-6)?;
        Ok(Self {
            spec: spec.clone(),
            dims,
            prefix: b.prefix().to_string(),
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn pe_layout(&self) -> PeLayout {
        if self.dims.cls_token {
            PeLayout::WithCls
        } else {
            PeLayout::Grid
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.dims.embed_dim
    }

    pub fn patch_size(&self) -> usize {
        self.dims.patch_size
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.dims.patch_size;
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "input {h}×{w} is not divisible by patch size {p}"
            )));
        }
        Ok((h / p, w / p))
    }

    fn embed(&self, images: &Tensor) -> Result<(Tensor, (usize, usize))> {
        let (bsz, c, h, w) = images.dims4()?;
        let (gh, gw) = self.check_input(h, w)?;
        let dev = images.device();
        let x = match c {
            1 => images.broadcast_as((bsz, 3, h, w))?.contiguous()?,
            3 => images.clone(),
            _ => return Err(Error::Shape(format!("expected 1 or 3 channels, got {c}"))),
        };
        let mean = Tensor::new(&PIXEL_MEAN, dev)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&PIXEL_STD, dev)?.reshape((1, 3, 1, 1))?;
        let x = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let (e, p) = (self.dims.embed_dim, self.dims.patch_size);
        let patches = x
            .reshape((bsz, 3, gh, p, gw, p))?
            .permute((0, 2, 4, 1, 3, 5))?
            .contiguous()?
            .reshape((bsz * gh * gw, 3 * p * p))?;
        let tok = patches
            .matmul(&self.patch_w.reshape((e, 3 * p * p))?.t()?)?
            .broadcast_add(&self.patch_b)?
            .reshape((bsz, gh * gw, e))?;
        let pos = interpolate_positional_encoding(&self.pos, self.pe_layout(), self.dims.pe_grid, (gh, gw))?;
        let x = match &self.cls {
            Some(cls) => {
                let pos = pos.reshape((1, 1 + gh * gw, e))?;
                Tensor::cat(&[&cls.broadcast_as((bsz, 1, e))?, &tok], 1)?.broadcast_add(&pos)?
            }
            None => tok.broadcast_add(&pos.reshape((1, gh * gw, e))?)?,
        };
        Ok((x, (gh, gw)))
    }

    /// Run the encoder, optionally refining tokens after every block.
    pub fn forward(&self, images: &Tensor, hook: Option<&dyn BlockHook>) -> Result<FeatureStack> {
        let (_, _, h, w) = images.dims4()?;
        let (mut x, (gh, gw)) = self.embed(images)?;
        let bsz = x.dim(0)?;
        let e = self.dims.embed_dim;
        let offset = usize::from(self.dims.cls_token);
        let mut maps = Vec::with_capacity(self.dims.tap_depths.len());
        let mut cls_tokens = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(&x)?;
            if let Some(hook) = hook {
                x = hook.after_block(i, &x)?;
            }
            if self.dims.tap_depths.contains(&i) {
                let y = self.norm.forward(&x)?;
                if offset == 1 {
                    cls_tokens.push(y.narrow(1, 0, 1)?.reshape((bsz, e))?);
                }
                let grid = y
                    .narrow(1, offset, gh * gw)?
                    .transpose(1, 2)?
                    .contiguous()?
                    .reshape((bsz, e, gh, gw))?;
                maps.push(grid);
            }
        }
        Ok(FeatureStack {
            maps,
            cls_tokens: (offset == 1).then_some(cls_tokens),
            source_hw: (h, w),
        })
    }
}

/// Build a frozen backbone under the `backbone` prefix.
pub fn build_backbone(spec: &BackboneSpec, store: &ParamStore) -> Result<(Backbone, ParameterPartition)> {
    let b = store.root(ParamGroup::Backbone).frozen().pp("backbone");
    let bb = Backbone::new(spec, &b)?;
    Ok((bb, store.partition_prefix("backbone")))
}

pub fn extract_features(backbone: &Backbone, images: &Tensor) -> Result<FeatureStack> {
    backbone.forward(images, None)
}

/// Parameter count of a backbone without allocating it.
pub fn count_backbone(spec: &BackboneSpec) -> Result<ParameterPartition> {
    let mut spec = spec.clone();
    spec.pretrained_source = None;
    let store = ParamStore::shape_only();
    build_backbone(&spec, &store).map(|(_, p)| p)
}
