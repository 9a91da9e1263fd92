use candle_core::{DType, Device, Tensor};
use segdg::assembly::{AssemblySpec, ModelAssembly};
use segdg::backbones::{BackboneSpec, FeatureStack};
use segdg::decoders::{DecoderKind, DecoderSpec, PriorMode, SamDecoder, SamDims};
use segdg::params::{ParamGroup, ParamStore};
use segdg::peft::{PeftKind, PeftSpec};
use segdg::seed::SeedTree;

fn toy(kind: DecoderKind, k: usize) -> AssemblySpec {
    AssemblySpec {
        backbone: BackboneSpec::toy().with_patch(8),
        peft: PeftSpec::new(PeftKind::Freeze),
        decoder: DecoderSpec::new(kind, k),
    }
}

fn images(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let data: Vec<f32> = {
        use rand::Rng;
        let mut rng = SeedTree::new(seed).rng();
        (0..b * h * w).map(|_| rng.random::<f32>()).collect()
    };
    Tensor::from_vec(data, (b, 1, h, w), &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap()
}

#[test]
fn every_head_maps_to_input_resolution() {
    for kind in DecoderKind::ALL {
        let m = ModelAssembly::build(&toy(kind, 3), &Device::Cpu, SeedTree::new(1)).unwrap();
        for (h, w) in [(64, 64), (48, 80)] {
            let out = m.forward(&images(2, h, w, 0), true).unwrap();
            assert_eq!(out.logits.dims(), &[2, 3, h, w], "{kind}");
            let finite = out.logits.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(finite.iter().all(|x| x.is_finite()), "{kind}");
            assert_eq!(out.aux_logits.is_some(), kind.has_aux(), "{kind}");
            if let Some(aux) = out.aux_logits {
                assert_eq!(aux[0].dims(), &[2, 3, h, w]);
            }
        }
    }
}

#[test]
fn every_trainable_decoder_weight_receives_gradient() {
    for kind in DecoderKind::ALL {
        let m = ModelAssembly::build(&toy(kind, 3), &Device::Cpu, SeedTree::new(2)).unwrap();
        let out = m.forward(&images(2, 32, 32, 1), true).unwrap();
        let mut loss = out.logits.sqr().unwrap().mean_all().unwrap();
        if let Some(aux) = out.aux_logits {
            loss = (loss + aux[0].sqr().unwrap().mean_all().unwrap()).unwrap();
        }
        let grads = loss.backward().unwrap();
        for (name, var) in m.store.trainable_vars() {
            assert!(grads.get(var.as_tensor()).is_some(), "{kind}: no gradient for {name}");
        }
    }
}

#[test]
fn frozen_backbone_is_outside_the_graph() {
    let m = ModelAssembly::build(&toy(DecoderKind::Linear, 2), &Device::Cpu, SeedTree::new(3)).unwrap();
    let p = m.partition();
    assert_eq!(p.group(ParamGroup::Backbone).trainable, 0);
    assert!(p.group(ParamGroup::Backbone).frozen > 0);
    assert!(m.store.trainable_vars().iter().all(|(n, _)| n.starts_with("decoder.")));
}

#[test]
fn two_stage_heads_expose_stage_one_logits() {
    // With shared stage-one names, an HQSAM built on the same seed is the HQHSAM first stage.
    let spec = toy(DecoderKind::Hqhsam, 3);
    let full = ModelAssembly::build(&spec, &Device::Cpu, SeedTree::new(4)).unwrap();
    let single = ModelAssembly::build(&toy(DecoderKind::Hqsam, 3), &Device::Cpu, SeedTree::new(4)).unwrap();
    for e in single.store.params() {
        if e.name.starts_with("decoder.") {
            full.store.get(&e.name).expect("shared stage-one weight");
            single.store.assign(&e.name, &full.store.get(&e.name).unwrap().value()).unwrap();
        }
    }
    let x = images(1, 64, 64, 5);
    let a = full.forward(&x, false).unwrap();
    let b = single.forward(&x, false).unwrap();
    assert_eq!(max_abs_diff(&a.aux_logits.unwrap()[0], &b.logits), 0.0);
}

fn sam_stack(seed: u64) -> (SamDecoder, FeatureStack) {
    let store = ParamStore::new(Device::Cpu, SeedTree::new(seed));
    let b = store.root(ParamGroup::Decoder).pp("decoder");
    let dec = SamDecoder::new(&b, DecoderKind::Hsam, 32, SamDims::for_width(32), 3).unwrap();
    let map = images(1, 32 * 4, 4, seed).reshape((1, 32, 4, 4)).unwrap();
    let f = FeatureStack {
        maps: vec![map.clone(), map],
        cls_tokens: None,
        source_hw: (32, 32),
    };
    (dec, f)
}

#[test]
fn uniform_prior_equals_no_prior() {
    let (dec, f) = sam_stack(6);
    let uniform = Tensor::full(1f32 / 3.0, (1, 3, 4, 4), &Device::Cpu).unwrap();
    let a = dec.forward_with_prior(&f, PriorMode::Given(uniform)).unwrap();
    let b = dec.forward_with_prior(&f, PriorMode::Disabled).unwrap();
    assert!(max_abs_diff(&a.logits, &b.logits) < 1e-6);
    // Class k owns columns k..; a spatially constant prior would only shift the softmax.
    let peaked = Tensor::from_vec(
        (0..48)
            .map(|i| if (i % 4).min(2) == i / 16 { 0.98f32 } else { 0.01 })
            .collect::<Vec<_>>(),
        (1, 3, 4, 4),
        &Device::Cpu,
    )
    .unwrap();
    let c = dec.forward_with_prior(&f, PriorMode::Given(peaked)).unwrap();
    assert!(max_abs_diff(&a.logits, &c.logits) > 1e-6);
}

#[test]
fn outputs_are_f32() {
    let m = ModelAssembly::build(&toy(DecoderKind::Segformer, 2), &Device::Cpu, SeedTree::new(7)).unwrap();
    assert_eq!(m.forward(&images(1, 32, 32, 2), false).unwrap().logits.dtype(), DType::F32);
}
