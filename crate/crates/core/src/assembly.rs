//! A backbone, an adapter and a decoder wired together over one parameter store.

use candle_core::{Device, Tensor};

use crate::backbones::{build_backbone, Backbone, BackboneSpec, FeatureStack};
use crate::decoders::{build_decoder, DecodeOutput, Decoder, DecoderSpec};
use crate::error::Result;
use crate::params::{ParamStore, ParameterPartition};
use crate::peft::{apply_peft, Adapter, PeftSpec};
use crate::seed::SeedTree;

#[derive(Debug, Clone, PartialEq)]
pub struct AssemblySpec {
    pub backbone: BackboneSpec,
    pub peft: PeftSpec,
    pub decoder: DecoderSpec,
}

impl AssemblySpec {
    /// Short identifier such as `toy-toy/freeze/hqhsam`.
    pub fn id(&self) -> String {
        format!(
            "{}-{}/{}/{}",
            self.backbone.family, self.backbone.size, self.peft.kind, self.decoder.kind
        )
    }
}

pub struct ModelAssembly {
    pub spec: AssemblySpec,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub adapter: Adapter,
    pub decoder: Box<dyn Decoder>,
}

impl std::fmt::Debug for ModelAssembly {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelAssembly").field("id", &self.spec.id()).finish()
    }
}

impl ModelAssembly {
    /// Build every component. Weight initialisation draws from `seeds`.
    pub fn build(spec: &AssemblySpec, device: &Device, seeds: SeedTree) -> Result<Self> {
        Self::build_in(spec, ParamStore::new(device.clone(), seeds))
    }

    /// Build against a shape-only store: exact counts, no weight memory.
    pub fn build_shapes(spec: &AssemblySpec) -> Result<Self> {
        let mut spec = spec.clone();
        spec.backbone.pretrained_source = None;
        spec.decoder.pretrained_source = None;
        if let Some(l) = spec.peft.ladder_encoder.as_mut() {
            l.pretrained_source = None;
        }
        Self::build_in(&spec, ParamStore::shape_only())
    }

    fn build_in(spec: &AssemblySpec, store: ParamStore) -> Result<Self> {
        let (backbone, _) = build_backbone(&spec.backbone, &store)?;
        let (adapter, _) = apply_peft(&backbone, &spec.peft, &store)?;
        let (decoder, _) = build_decoder(&spec.decoder, &spec.backbone, &store)?;
        Ok(Self {
            spec: spec.clone(),
            store,
            backbone,
            adapter,
            decoder,
        })
    }

    pub fn partition(&self) -> ParameterPartition {
        self.store.partition()
    }

    pub fn features(&self, images: &Tensor) -> Result<FeatureStack> {
        self.adapter.features(&self.backbone, images)
    }

    pub fn forward(&self, images: &Tensor, train: bool) -> Result<DecodeOutput> {
        let f = self.features(images)?;
        self.decoder.forward(&f, train)
    }
}
