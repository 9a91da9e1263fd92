mod support;

use std::collections::BTreeSet;

use candle_core::{Device, Tensor};
use segdg::assembly::ModelAssembly;
use segdg::peft::{lora_reconstruct, rein_refine, PeftKind};
use segdg::seed::SeedTree;
use segdg::training::AdamW;
use support::{batch, bits, changed, spec, step, values};

#[test]
fn optimizer_steps_touch_exactly_the_trainable_partition() {
    for kind in PeftKind::ALL {
        let m = ModelAssembly::build(&spec(kind), &Device::Cpu, SeedTree::new(3)).unwrap();
        let trainable: BTreeSet<String> = m
            .store
            .params()
            .into_iter()
            .filter(|e| e.trainable)
            .map(|e| e.name)
            .collect();
        let expected_prefixes: &[&str] = match kind {
            PeftKind::Freeze => &["decoder."],
            PeftKind::Rein | PeftKind::ReinLora => &["peft.", "decoder."],
            PeftKind::Ladder => &["ladder.", "peft.", "decoder."],
        };
        for name in &trainable {
            assert!(expected_prefixes.iter().any(|p| name.starts_with(p)), "{kind}: {name}");
        }
        for p in expected_prefixes {
            assert!(trainable.iter().any(|n| n.starts_with(p)), "{kind}: nothing under {p}");
        }

        let before = values(&m);
        let mut opt = AdamW::new(m.store.trainable_vars(), 0.0).unwrap();
        step(&m, &mut opt);
        let after1 = values(&m);
        let c1 = changed(&before, &after1);
        assert!(c1.is_subset(&trainable), "{kind}: {:?}", c1.difference(&trainable).collect::<Vec<_>>());
        step(&m, &mut opt);
        let c2 = changed(&before, &values(&m));
        assert_eq!(c2, trainable, "{kind}");
        for (name, trainable, v) in &values(&m) {
            if !trainable {
                let orig = &before.iter().find(|b| &b.0 == name).unwrap().2;
                assert_eq!(orig, v, "{kind}: frozen {name} moved");
            }
        }
    }
}

#[test]
fn zero_initialised_rein_matches_freeze_bitwise() {
    let (x, _) = batch();
    let base = ModelAssembly::build(&spec(PeftKind::Freeze), &Device::Cpu, SeedTree::new(5)).unwrap();
    let want = bits(&base.forward(&x, false).unwrap().logits);
    for kind in [PeftKind::Rein, PeftKind::ReinLora] {
        let m = ModelAssembly::build(&spec(kind), &Device::Cpu, SeedTree::new(5)).unwrap();
        for e in m.store.params().into_iter().filter(|e| !e.name.starts_with("peft.")) {
            assert_eq!(bits(&e.value()), bits(&base.store.get(&e.name).unwrap().value()), "{}", e.name);
        }
        assert_eq!(bits(&m.forward(&x, false).unwrap().logits), want, "{kind}");
    }
}

#[test]
fn full_rank_lora_tokens_match_rein() {
    use rand::Rng;
    let mut rng = SeedTree::new(11).rng();
    let mut t = |shape: (usize, usize)| {
        let v: Vec<f32> = (0..shape.0 * shape.1).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    };
    let (m, e) = (6, 8);
    let a = t((m, e));
    let b = t((e, e));
    let w = t((e, e));
    let bias = t((1, e)).squeeze(0).unwrap();
    let x = t((5, e)).reshape((1, 5, e)).unwrap();
    // Full rank: the factors reconstruct the token matrix exactly.
    let tokens = a.matmul(&b).unwrap();
    let via_lora = rein_refine(&x, &lora_reconstruct(&a, &b).unwrap(), &w, &bias).unwrap();
    let direct = rein_refine(&x, &tokens, &w, &bias).unwrap();
    let diff = (via_lora - direct).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    assert!(diff <= 1e-6, "{diff}");
}

#[test]
fn rein_refine_matches_hand_computation() {
    // One token, one position: the attention weight is 1 so the update is T·W + b.
    let x = Tensor::new(&[[[1f32, 2.0]]], &Device::Cpu).unwrap();
    let tok = Tensor::new(&[[3f32, -1.0]], &Device::Cpu).unwrap();
    let w = Tensor::new(&[[1f32, 0.0], [0.0, 2.0]], &Device::Cpu).unwrap();
    let b = Tensor::new(&[0.5f32, 0.25], &Device::Cpu).unwrap();
    let y = rein_refine(&x, &tok, &w, &b).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    assert_eq!(y, vec![1.0 + 3.0 + 0.5, 2.0 - 2.0 + 0.25]);
}
