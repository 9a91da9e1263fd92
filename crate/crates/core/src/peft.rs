//! Parameter-efficient adapters around a frozen backbone: Freeze, Rein,
//! Rein-LoRA and Ladder.

use std::fmt;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, BackboneSpec, BlockHook, Family, FeatureStack, Size};
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, softmax_last, Conv2d};
use crate::params::{Builder, Init, ParamGroup, ParamStore, ParameterPartition};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftKind {
    Freeze,
    Rein,
    ReinLora,
    Ladder,
}

impl PeftKind {
    pub const ALL: [PeftKind; 4] = [PeftKind::Freeze, PeftKind::Rein, PeftKind::ReinLora, PeftKind::Ladder];

    pub fn as_str(self) -> &'static str {
        match self {
            PeftKind::Freeze => "freeze",
            PeftKind::Rein => "rein",
            PeftKind::ReinLora => "rein_lora",
            PeftKind::Ladder => "ladder",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PeftKind::Freeze => "Freeze",
            PeftKind::Rein => "Rein",
            PeftKind::ReinLora => "Rein-LoRA",
            PeftKind::Ladder => "Ladder",
        }
    }
}

impl fmt::Display for PeftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_m() -> usize {
    100
}

fn default_r() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeftSpec {
    pub kind: PeftKind,
    #[serde(default = "default_m")]
    pub token_count_m: usize,
    #[serde(default = "default_r")]
    pub lora_rank_r: usize,
    /// Parallel encoder for `ladder`; defaults to the small DinoV2 preset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder_encoder: Option<BackboneSpec>,
}

impl PeftSpec {
    pub fn new(kind: PeftKind) -> Self {
        Self {
            kind,
            token_count_m: default_m(),
            lora_rank_r: default_r(),
            ladder_encoder: None,
        }
    }

    pub fn ladder_spec(&self) -> BackboneSpec {
        self.ladder_encoder
            .clone()
            .unwrap_or_else(|| BackboneSpec::new(Family::Dinov2, Size::Small))
    }

    pub fn check(&self, embed_dim: usize) -> Vec<String> {
        let mut errs = Vec::new();
        match self.kind {
            PeftKind::Rein | PeftKind::ReinLora if self.token_count_m == 0 => {
                errs.push("peft.token_count_m must be ≥ 1".into());
            }
            _ => {}
        }
        if self.kind == PeftKind::ReinLora {
            let bound = self.token_count_m.min(embed_dim);
            if self.lora_rank_r == 0 || self.lora_rank_r >= bound {
                errs.push(format!(
                    "peft.lora_rank_r {} must satisfy 0 < r < min(m, embed_dim) = {bound}",
                    self.lora_rank_r
                ));
            }
        }
        if self.kind == PeftKind::Ladder {
            if let Err(e) = self.ladder_spec().dims() {
                errs.push(format!("peft.ladder_encoder: {e}"));
            }
        }
        errs
    }

    pub fn resolved(&self) -> Result<Self> {
        let mut s = self.clone();
        if s.kind == PeftKind::Ladder {
            s.ladder_encoder = Some(self.ladder_spec().resolved()?);
        }
        Ok(s)
    }
}

/// Exact product `A·B` of the low-rank token factors.
pub fn lora_reconstruct(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, r) = a.dims2()?;
    let (r2, _) = b.dims2()?;
    if r != r2 {
        return Err(Error::Shape(format!("lora factors {:?} and {:?} do not conform", a.dims(), b.dims())));
    }
    Ok(a.matmul(b)?)
}

/// Residual token refinement of one block's output.
///
/// `x: B×N×E`, `tokens: m×E`, `w: E×E`, `bias: E`. Computes
/// `x + softmax(x·Tᵀ/√E)·(T·W + b)`.
pub fn rein_refine(x: &Tensor, tokens: &Tensor, w: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, n, e) = x.dims3()?;
    let (_, e2) = tokens.dims2()?;
    if e != e2 || w.dims() != [e, e] || bias.dims() != [e] {
        return Err(Error::Shape(format!(
            "rein refine shapes x {:?}, tokens {:?}, w {:?}, b {:?}",
            x.dims(),
            tokens.dims(),
            w.dims(),
            bias.dims()
        )));
    }
    let flat = x.reshape((b * n, e))?;
    let sim = (flat.matmul(&tokens.t()?)? * (1.0 / (e as f64).sqrt()))?;
    let weights = softmax_last(&sim)?;
    let values = tokens.matmul(w)?.broadcast_add(bias)?;
    let delta = weights.matmul(&values)?.reshape((b, n, e))?;
    Ok((x + delta)?)
}

#[derive(Debug, Clone)]
enum Tokens {
    Full(Tensor),
    LowRank { a: Tensor, b: Tensor },
}

#[derive(Debug, Clone)]
struct ReinLayer {
    tokens: Tokens,
    w: Tensor,
    bias: Tensor,
}

/// Per-block token banks.
#[derive(Debug, Clone)]
pub struct ReinBank {
    layers: Vec<ReinLayer>,
}

impl ReinBank {
    pub fn new(b: &Builder, depth: usize, embed: usize, m: usize, rank: Option<usize>) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| {
                let lb = b.pp(format!("layers.{i}"));
                let tokens = match rank {
                    None => Tokens::Full(lb.param(
                        "tokens",
                        &[m, embed],
                        Init::Uniform { bound: (6.0 / (m + embed) as f32).sqrt() },
                    )?),
                    Some(r) => Tokens::LowRank {
                        a: lb.param("lora_a", &[m, r], Init::Uniform { bound: (6.0 / (m + r) as f32).sqrt() })?,
                        b: lb.param("lora_b", &[r, embed], Init::Uniform { bound: (6.0 / (r + embed) as f32).sqrt() })?,
                    },
                };
                Ok(ReinLayer {
                    tokens,
                    w: lb.param("proj.weight", &[embed, embed], Init::Zeros)?,
                    bias: lb.param("proj.bias", &[embed], Init::Zeros)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn is_low_rank(&self) -> bool {
        matches!(self.layers.first().map(|l| &l.tokens), Some(Tokens::LowRank { .. }))
    }

    /// Effective `m×E` token matrix of block `i`.
    pub fn tokens(&self, i: usize) -> Result<Tensor> {
        match &self.layers[i].tokens {
            Tokens::Full(t) => Ok(t.clone()),
            Tokens::LowRank { a, b } => lora_reconstruct(a, b),
        }
    }
}

impl BlockHook for ReinBank {
    fn after_block(&self, block: usize, tokens: &Tensor) -> Result<Tensor> {
        let l = &self.layers[block];
        rein_refine(tokens, &self.tokens(block)?, &l.w, &l.bias)
    }
}

/// Trainable parallel encoder whose features are fused into the main stack.
#[derive(Debug, Clone)]
pub struct Ladder {
    pub encoder: Backbone,
    proj: Vec<Conv2d>,
    fuse: Vec<Conv2d>,
}

impl Ladder {
    pub fn new(spec: &BackboneSpec, main_embed: usize, levels: usize, enc_b: &Builder, b: &Builder) -> Result<Self> {
        let encoder = Backbone::new(spec, enc_b)?;
        let ep = encoder.embed_dim();
        let e = main_embed;
        let mut identity = vec![0f32; e * 2 * e];
        for c in 0..e {
            identity[c * 2 * e + c] = 1.0;
        }
        let mut proj = Vec::with_capacity(levels);
        let mut fuse = Vec::with_capacity(levels);
        for i in 0..levels {
            proj.push(Conv2d::new(&b.pp(format!("proj.{i}")), ep, e, 1, 1, 0, true)?);
            let fb = b.pp(format!("fuse.{i}"));
            let mut f = Conv2d::with_init(&fb, 2 * e, e, 1, 1, 0, false, Init::Data(identity.clone()))?;
            f.bias = Some(fb.param("bias", &[e], Init::Zeros)?);
            fuse.push(f);
        }
        Ok(Self { encoder, proj, fuse })
    }

    /// Run the parallel encoder on `images` resized so its grid matches `grid`.
    pub fn parallel_features(&self, images: &Tensor, grid: (usize, usize)) -> Result<FeatureStack> {
        let p = self.encoder.patch_size();
        let x = resize_bilinear(images, grid.0 * p, grid.1 * p)?;
        self.encoder.forward(&x, None)
    }

    pub fn combine(&self, main: &FeatureStack, parallel: &FeatureStack) -> Result<FeatureStack> {
        ladder_combine(main, parallel, &self.proj, &self.fuse)
    }
}

/// Fuse parallel-encoder maps into the main stack, level by level.
///
/// Parallel maps are resized to the main grid, projected to the main width,
/// concatenated after the main map and fused by a 1×1 convolution. When the
/// parallel stack has fewer levels its last map is repeated.
pub fn ladder_combine(
    main: &FeatureStack,
    parallel: &FeatureStack,
    proj: &[Conv2d],
    fuse: &[Conv2d],
) -> Result<FeatureStack> {
    if parallel.maps.is_empty() || proj.len() < main.maps.len() || fuse.len() < main.maps.len() {
        return Err(Error::Shape(format!(
            "ladder has {} fusion levels for {} main maps and {} parallel maps",
            fuse.len(),
            main.maps.len(),
            parallel.maps.len()
        )));
    }
    let maps = main
        .maps
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let (_, _, h, w) = m.dims4()?;
            let p = &parallel.maps[i.min(parallel.maps.len() - 1)];
            let p = proj[i].forward(&resize_bilinear(p, h, w)?)?;
            fuse[i].forward(&Tensor::cat(&[m, &p], 1)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureStack {
        maps,
        cls_tokens: main.cls_tokens.clone(),
        source_hw: main.source_hw,
    })
}

#[derive(Debug, Clone)]
pub enum Adapter {
    Freeze,
    Rein(ReinBank),
    Ladder(Ladder),
}

impl Adapter {
    pub fn kind(&self) -> PeftKind {
        match self {
            Adapter::Freeze => PeftKind::Freeze,
            Adapter::Rein(bank) if bank.is_low_rank() => PeftKind::ReinLora,
            Adapter::Rein(_) => PeftKind::Rein,
            Adapter::Ladder(_) => PeftKind::Ladder,
        }
    }

    /// Features of the adapted backbone.
    pub fn features(&self, backbone: &Backbone, images: &Tensor) -> Result<FeatureStack> {
        match self {
            Adapter::Freeze => backbone.forward(images, None),
            Adapter::Rein(bank) => backbone.forward(images, Some(bank)),
            Adapter::Ladder(l) => {
                let main = backbone.forward(images, None)?;
                let par = l.parallel_features(images, main.grid()?)?;
                l.combine(&main, &par)
            }
        }
    }
}

/// Attach an adapter to `backbone`. The returned partition covers the
/// backbone and everything the adapter added.
pub fn apply_peft(backbone: &Backbone, spec: &PeftSpec, store: &ParamStore) -> Result<(Adapter, ParameterPartition)> {
    let e = backbone.embed_dim();
    let errs = spec.check(e);
    if !errs.is_empty() {
        return Err(Error::Build(errs.join("; ")));
    }
    let b = store.root(ParamGroup::Peft).pp("peft");
    let adapter = match spec.kind {
        PeftKind::Freeze => Adapter::Freeze,
        PeftKind::Rein => Adapter::Rein(ReinBank::new(&b, backbone.dims.depth, e, spec.token_count_m, None)?),
        PeftKind::ReinLora => Adapter::Rein(ReinBank::new(
            &b,
            backbone.dims.depth,
            e,
            spec.token_count_m,
            Some(spec.lora_rank_r),
        )?),
        PeftKind::Ladder => {
            let enc_b = store.root(ParamGroup::LadderEncoder).pp("ladder");
            Adapter::Ladder(Ladder::new(
                &spec.ladder_spec(),
                e,
                backbone.dims.tap_depths.len(),
                &enc_b,
                &b,
            )?)
        }
    };
    let partition = store.partition_where(|en| {
        ["backbone.", "peft.", "ladder."].iter().any(|p| en.name.starts_with(p))
    });
    Ok((adapter, partition))
}
