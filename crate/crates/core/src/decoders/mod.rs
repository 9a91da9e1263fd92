//! Segmentation heads mapping a [`FeatureStack`] to per-pixel class logits.

mod conv_heads;
mod sam;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbones::{BackboneDims, BackboneSpec, FeatureStack};
use crate::container;
use crate::error::{Error, Result};
use crate::params::{Builder, ParamGroup, ParamStore, ParameterPartition, WeightSource};

pub use conv_heads::{
    pam_attention, DaHead, LinearHead, ResNetHead, SegFormerHead, UNetHead,
};
pub use sam::{PriorMode, SamDecoder, SamDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Linear,
    Resnet,
    Unet,
    Da,
    Segformer,
    SammdPe,
    SammdFpe,
    Hqsam,
    Hsam,
    Hqhsam,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 10] = [
        DecoderKind::Linear,
        DecoderKind::Segformer,
        DecoderKind::SammdFpe,
        DecoderKind::SammdPe,
        DecoderKind::Hqsam,
        DecoderKind::Da,
        DecoderKind::Hsam,
        DecoderKind::Hqhsam,
        DecoderKind::Resnet,
        DecoderKind::Unet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::Linear => "linear",
            DecoderKind::Resnet => "resnet",
            DecoderKind::Unet => "unet",
            DecoderKind::Da => "da",
            DecoderKind::Segformer => "segformer",
            DecoderKind::SammdPe => "sammd_pe",
            DecoderKind::SammdFpe => "sammd_fpe",
            DecoderKind::Hqsam => "hqsam",
            DecoderKind::Hsam => "hsam",
            DecoderKind::Hqhsam => "hqhsam",
        }
    }

    /// Display name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            DecoderKind::Linear => "Linear",
            DecoderKind::Resnet => "ResNet",
            DecoderKind::Unet => "UNet",
            DecoderKind::Da => "DA",
            DecoderKind::Segformer => "SegFormer",
            DecoderKind::SammdPe => "SAMMD-PE",
            DecoderKind::SammdFpe => "SAMMD-FPE",
            DecoderKind::Hqsam => "HQSAM",
            DecoderKind::Hsam => "HSAM",
            DecoderKind::Hqhsam => "HQHSAM",
        }
    }

    pub fn is_sam_family(self) -> bool {
        matches!(
            self,
            DecoderKind::SammdPe
                | DecoderKind::SammdFpe
                | DecoderKind::Hqsam
                | DecoderKind::Hsam
                | DecoderKind::Hqhsam
        )
    }

    pub fn has_aux(self) -> bool {
        matches!(self, DecoderKind::Hsam | DecoderKind::Hqhsam)
    }

    /// Minimum number of tap maps the head consumes.
    pub fn min_taps(self) -> usize {
        match self {
            DecoderKind::Unet => 4,
            DecoderKind::Segformer | DecoderKind::Hqsam | DecoderKind::Hqhsam => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_repeat() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    pub num_classes: usize,
    /// Residual blocks per stage in the ResNet and UNet heads.
    #[serde(default = "default_repeat")]
    pub resnet_repeat_m: usize,
    /// Head width; defaults depend on the kind and on the backbone width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_dim: Option<usize>,
    /// SAM-family heads: one mask token per class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_token_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_source: Option<PathBuf>,
}

/// Backbones at least this wide use the full-size head widths.
const FULL_WIDTH_MIN_EMBED: usize = 256;

impl DecoderSpec {
    pub fn new(kind: DecoderKind, num_classes: usize) -> Self {
        Self {
            kind,
            num_classes,
            resnet_repeat_m: 2,
            hidden_dim: None,
            mask_token_count: None,
            pretrained_source: None,
        }
    }

    pub fn default_hidden(kind: DecoderKind, embed_dim: usize) -> usize {
        let full = embed_dim >= FULL_WIDTH_MIN_EMBED;
        match (kind, full) {
            (DecoderKind::Linear, _) => 0,
            (DecoderKind::Segformer, true) => 768,
            (DecoderKind::Da, true) => 376,
            (DecoderKind::Resnet, true) => 664,
            (DecoderKind::Unet, true) => 740,
            (_, true) => 256,
            (_, false) => 32,
        }
    }

    pub fn hidden(&self, embed_dim: usize) -> usize {
        self.hidden_dim
            .unwrap_or_else(|| Self::default_hidden(self.kind, embed_dim))
    }

    /// Violations of this spec against a backbone.
    pub fn check(&self, bb: &BackboneDims) -> Vec<String> {
        let mut errs = Vec::new();
        if self.num_classes < 2 {
            errs.push(format!("decoder.num_classes must be ≥ 2, got {}", self.num_classes));
        }
        if self.resnet_repeat_m == 0 {
            errs.push("decoder.resnet_repeat_m must be ≥ 1".into());
        }
        if self.hidden_dim == Some(0) {
            errs.push("decoder.hidden_dim must be positive".into());
        }
        let taps = bb.tap_depths.len();
        let need = self.kind.min_taps();
        if taps < need {
            errs.push(format!(
                "decoder {} needs at least {need} tap depths, backbone exports {taps}",
                self.kind
            ));
        }
        if matches!(self.kind, DecoderKind::Resnet | DecoderKind::Unet)
            && !bb.patch_size.is_power_of_two()
        {
            errs.push(format!(
                "decoder {} upsamples by ×2 stages and needs a power-of-two patch size; \
                 patch {} would need a factor of {}",
                self.kind, bb.patch_size, bb.patch_size
            ));
        }
        if self.kind.is_sam_family() {
            if let Some(m) = self.mask_token_count {
                if m != self.num_classes {
                    errs.push(format!(
                        "decoder.mask_token_count {m} must equal num_classes {}",
                        self.num_classes
                    ));
                }
            }
            let d = self.hidden(bb.embed_dim);
            if d % 8 != 0 || d < 16 {
                errs.push(format!("SAM-family decoder width {d} must be a multiple of 8 and ≥ 16"));
            }
        }
        if self.kind == DecoderKind::Da && self.hidden(bb.embed_dim) < 8 {
            errs.push("DA head width must be ≥ 8".into());
        }
        errs
    }

    pub fn resolved(&self, bb: &BackboneDims) -> Self {
        let mut s = self.clone();
        if s.kind != DecoderKind::Linear {
            s.hidden_dim = Some(self.hidden(bb.embed_dim));
        }
        if s.kind.is_sam_family() {
            s.mask_token_count = Some(self.num_classes);
        }
        s
    }
}

/// Decoder output at input resolution.
#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub logits: Tensor,
    /// First-stage logits of the two-stage heads.
    pub aux_logits: Option<Vec<Tensor>>,
}

pub trait Decoder: Send + Sync {
    fn kind(&self) -> DecoderKind;
    fn forward(&self, features: &FeatureStack, train: bool) -> Result<DecodeOutput>;
}

/// Build a decoder under the `decoder` prefix.
pub fn build_decoder(
    spec: &DecoderSpec,
    backbone: &BackboneSpec,
    store: &ParamStore,
) -> Result<(Box<dyn Decoder>, ParameterPartition)> {
    let bb = backbone.dims()?;
    let errs = spec.check(&bb);
    if !errs.is_empty() {
        return Err(Error::Build(errs.join("; ")));
    }
    let source = match &spec.pretrained_source {
        Some(path) if !store.is_shape_only() => {
            let na = container::load(path)?;
            Some(Arc::new(WeightSource {
                arrays: na.arrays.into_iter().collect(),
                strict: false,
            }))
        }
        _ => None,
    };
    let b = store
        .root(ParamGroup::Decoder)
        .pp("decoder")
        .with_source(source);
    let dec = new_decoder(spec, &bb, &b)?;
    Ok((dec, store.partition_prefix("decoder")))
}

pub fn new_decoder(spec: &DecoderSpec, bb: &BackboneDims, b: &Builder) -> Result<Box<dyn Decoder>> {
    let e = bb.embed_dim;
    let k = spec.num_classes;
    let taps = bb.tap_depths.len();
    let h = spec.hidden(e);
    let m = spec.resnet_repeat_m;
    let stages = bb.patch_size.trailing_zeros() as usize;
    Ok(match spec.kind {
        DecoderKind::Linear => Box::new(LinearHead::new(b, e, taps, k)?),
        DecoderKind::Segformer => Box::new(SegFormerHead::new(b, e, taps, h, k)?),
        DecoderKind::Da => Box::new(DaHead::new(b, e, h, k)?),
        DecoderKind::Resnet => Box::new(ResNetHead::new(b, e, h, m, stages, k)?),
        DecoderKind::Unet => Box::new(UNetHead::new(b, e, taps, h, m, stages, k)?),
        kind => Box::new(SamDecoder::new(b, kind, e, SamDims::for_width(h), k)?),
    })
}

/// Trainable-parameter count of a head without allocating it.
pub fn count_decoder(spec: &DecoderSpec, backbone: &BackboneSpec) -> Result<ParameterPartition> {
    let mut spec = spec.clone();
    spec.pretrained_source = None;
    let store = ParamStore::shape_only();
    build_decoder(&spec, backbone, &store).map(|(_, p)| p)
}

pub(crate) fn check_maps(f: &FeatureStack, need: usize, kind: DecoderKind) -> Result<()> {
    if f.maps.len() < need {
        return Err(Error::Shape(format!(
            "decoder {kind} needs {need} feature maps, got {}",
            f.maps.len()
        )));
    }
    Ok(())
}
