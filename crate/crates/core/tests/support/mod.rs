//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use candle_core::{Device, Tensor};
use segdg::assembly::{AssemblySpec, ModelAssembly};
use segdg::backbones::BackboneSpec;
use segdg::decoders::{DecoderKind, DecoderSpec};
use segdg::peft::{PeftKind, PeftSpec};
use segdg::seed::SeedTree;
use segdg::training::{cross_entropy, AdamW};

/// Name, trainable flag and raw bits of one parameter.
pub type Snapshot = Vec<(String, bool, Vec<u32>)>;

pub fn spec(kind: PeftKind) -> AssemblySpec {
    let mut peft = PeftSpec::new(kind);
    peft.ladder_encoder = Some(BackboneSpec::toy().with_patch(8));
    AssemblySpec {
        backbone: BackboneSpec::toy().with_patch(8),
        peft,
        decoder: DecoderSpec::new(DecoderKind::Segformer, 3),
    }
}

pub fn batch() -> (Tensor, Tensor) {
    use rand::Rng;
    let mut rng = SeedTree::new(9).rng();
    let x: Vec<f32> = (0..2 * 32 * 32).map(|_| rng.random()).collect();
    let m: Vec<u32> = (0..2 * 32 * 32).map(|_| rng.random_range(0..3)).collect();
    (
        Tensor::from_vec(x, (2, 1, 32, 32), &Device::Cpu).unwrap(),
        Tensor::from_vec(m, (2, 32, 32), &Device::Cpu).unwrap(),
    )
}

pub fn bits(t: &Tensor) -> Vec<u32> {
    t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect()
}

pub fn values(m: &ModelAssembly) -> Snapshot {
    m.store
        .params()
        .into_iter()
        .map(|e| (e.name.clone(), e.trainable, bits(&e.value())))
        .collect()
}

pub fn changed(before: &Snapshot, after: &Snapshot) -> BTreeSet<String> {
    before
        .iter()
        .zip(after)
        .filter(|(a, b)| a.2 != b.2)
        .map(|(a, _)| a.0.clone())
        .collect()
}

pub fn step(m: &ModelAssembly, opt: &mut AdamW) {
    let (x, masks) = batch();
    let out = m.forward(&x, true).unwrap();
    let loss = cross_entropy(&out.logits, &masks).unwrap();
    opt.step(&loss.backward().unwrap(), 1e-3, None).unwrap();
}

/// Add small noise to every trainable parameter, moving the model off its
/// initial point where zero or identity inits block some gradients.
pub fn perturb_trainable(m: &ModelAssembly, seed: u64) {
    use rand::Rng;
    let mut rng = SeedTree::new(seed).rng();
    for e in m.store.params().into_iter().filter(|e| e.trainable) {
        let v = e.value().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let r: Vec<f32> = v.iter().map(|x| x + rng.random_range(-0.02..0.02)).collect();
        let t = Tensor::from_vec(r, e.value().dims(), &Device::Cpu).unwrap();
        m.store.assign(&e.name, &t).unwrap();
    }
}
