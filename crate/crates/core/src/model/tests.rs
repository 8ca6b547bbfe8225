use super::*;
use crate::autograd::Tape;
use crate::grid::Image;
use crate::prompt::{BoxPrompt, PointPrompt, Polarity, PromptSet};
use crate::rng::seeded;
use rand::Rng;

pub(crate) fn tiny(kind: DecoderKind) -> ModelConfig {
    ModelConfig {
        image_size: (32, 32),
        patch_size: 8,
        embed_dim: 16,
        encoder_layers: 2,
        attention_heads: 2,
        mlp_ratio: 2,
        decoder_kind: kind,
        lora_rank: 2,
        skip_channels: 3,
        up_channels: 2,
        head_channels: 4,
        ..ModelConfig::default()
    }
}

fn image(seed: u64) -> Image {
    let mut rng = seeded(seed);
    Image::from_fn(32, 32, |_, _| rng.gen_range(0.0..255.0))
}

#[test]
fn shapes_follow_config() {
    for kind in [DecoderKind::PlainConvHead, DecoderKind::PromptDecoder] {
        let m = ModelState::new(tiny(kind), 1).unwrap();
        let z = m.encode_image(&image(3)).unwrap();
        assert_eq!(z.shape(), (4, 4, 16));
        let logits = m.predict(&image(3), None).unwrap();
        assert_eq!((logits.height, logits.width, logits.values.len()), (32, 32, 1024));
    }
}

#[test]
fn rejects_wrong_image_size_and_decoder() {
    let m = ModelState::new(tiny(DecoderKind::PlainConvHead), 1).unwrap();
    assert!(matches!(m.encode_image(&Image::filled(16, 32, 0.0)), Err(Error::ShapeMismatch { .. })));
    let z = m.encode_image(&image(1)).unwrap();
    let e = PromptEmbedding { tokens: Tensor::zeros(&[1, 16]) };
    assert!(matches!(m.decode_mask(&z, &e), Err(Error::WrongDecoder { .. })));
    let bad = ModelConfig { patch_size: 5, ..tiny(DecoderKind::PlainConvHead) };
    assert!(ModelState::new(bad, 0).is_err());
}

#[test]
fn staged_calls_match_predict() {
    let m = ModelState::new(tiny(DecoderKind::PromptDecoder), 2).unwrap();
    let img = image(5);
    let prompts = PromptSet {
        boxes: vec![BoxPrompt { row_min: 3, col_min: 4, row_max: 20, col_max: 9 }],
        points: vec![],
    };
    let z = m.encode_image(&img).unwrap();
    let e = m.encode_prompts(&prompts).unwrap();
    assert_eq!(e.len(), 2);
    let staged = m.decode_mask(&z, &e).unwrap();
    let direct = m.predict(&img, Some(&prompts)).unwrap();
    assert_eq!(staged, direct);
}

#[test]
fn empty_prompts_give_the_no_prompt_token() {
    let m = ModelState::new(tiny(DecoderKind::PromptDecoder), 2).unwrap();
    let e = m.encode_prompts(&PromptSet::default()).unwrap();
    assert_eq!(e.len(), 1);
    let row = &m.param("prm.type").unwrap().value.data()[4 * 16..5 * 16];
    assert_eq!(e.tokens.data(), row);
}

#[test]
fn zero_adapters_leave_outputs_unchanged() {
    for kind in [DecoderKind::PlainConvHead, DecoderKind::PromptDecoder] {
        let base = ModelState::new(tiny(kind), 4).unwrap();
        let mut adapted = base.clone();
        adapted.attach_lora(2, 1.0, 9).unwrap();
        assert!(adapted.has_lora());
        for s in 0..3 {
            let img = image(s);
            assert_eq!(base.predict(&img, None).unwrap(), adapted.predict(&img, None).unwrap());
        }
        assert!(matches!(adapted.attach_lora(2, 1.0, 9), Err(Error::AdaptersAlreadyAttached)));
    }
}

#[test]
fn attach_marks_only_adapters_and_heads_trainable() {
    let mut m = ModelState::new(tiny(DecoderKind::PromptDecoder), 4).unwrap();
    m.attach_lora(2, 1.0, 1).unwrap();
    for p in m.params().values() {
        assert_eq!(p.trainable, p.group != ParamGroup::Encoder);
    }
    m.freeze_adapters();
    assert!(m.group(ParamGroup::Lora).all(|(_, p)| !p.trainable));
    assert!(m.group(ParamGroup::Decoder).all(|(_, p)| p.trainable));
    m.freeze_all();
    assert_eq!(m.trainable_count(), 0);
}

#[test]
fn lora_delta_has_bounded_rank_shape() {
    let mut m = ModelState::new(tiny(DecoderKind::PlainConvHead), 4).unwrap();
    m.attach_lora(2, 1.0, 1).unwrap();
    let mut rng = seeded(3);
    for p in m.params_mut().values_mut().filter(|p| p.group == ParamGroup::Lora) {
        for v in p.value.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let w = m.param("enc.0.attn.q.w").unwrap().value.clone();
    let eff = m.effective_projection(0, "q").unwrap();
    let a = &m.param("lora.0.q.a").unwrap().value;
    let b = &m.param("lora.0.q.b").unwrap().value;
    let mut delta = b.matmul(a);
    delta.scale_assign(0.5);
    for ((e, w), d) in eff.data().iter().zip(w.data()).zip(delta.data()) {
        assert!((e - w - d).abs() < 1e-5);
    }
}

#[test]
fn same_type_prompt_order_is_irrelevant() {
    let m = ModelState::new(tiny(DecoderKind::PromptDecoder), 6).unwrap();
    let z = m.encode_image(&image(8)).unwrap();
    let pts = [(2, 3), (10, 20), (30, 1), (17, 17)];
    let mk = |order: &[usize]| PromptSet {
        boxes: vec![],
        points: order
            .iter()
            .map(|&i| PointPrompt { row: pts[i].0, col: pts[i].1, polarity: Polarity::Positive })
            .collect(),
    };
    let a = m.decode_mask(&z, &m.encode_prompts(&mk(&[0, 1, 2, 3])).unwrap()).unwrap();
    let b = m.decode_mask(&z, &m.encode_prompts(&mk(&[3, 1, 0, 2])).unwrap()).unwrap();
    for (x, y) in a.values.iter().zip(&b.values) {
        assert!((x - y).abs() <= 1e-4 * (1.0 + x.abs()), "{x} vs {y}");
    }
}

#[test]
fn binarize_threshold_behaviour() {
    let l = MaskLogits { height: 1, width: 3, values: vec![0.0, -10.0, 3.0] };
    assert_eq!(binarize(&l, 0.5).unwrap().data(), &[1, 0, 1]);
    let low = MaskLogits { height: 1, width: 2, values: vec![-10.0; 2] };
    assert_eq!(binarize(&low, 0.5).unwrap().foreground_count(), 0);
    assert!(binarize(&l, 1.0).is_err());
    let mut rng = seeded(4);
    let vals: Vec<f32> = (0..200).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let l = MaskLogits { height: 10, width: 20, values: vals };
    let mut prev = usize::MAX;
    for t in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let n = binarize(&l, t).unwrap().foreground_count();
        assert!(n <= prev);
        prev = n;
    }
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let mut m = ModelState::new(tiny(DecoderKind::PromptDecoder), 7).unwrap();
    m.attach_lora(2, 1.0, 1).unwrap();
    m.freeze_adapters();
    let bytes = write_checkpoint(&m);
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, m);
    assert_eq!(write_checkpoint(&back), bytes);
    assert_eq!(checkpoint_digest(&back), checkpoint_digest(&m));
    assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
    assert!(read_checkpoint(b"garbage garbage garbage").is_err());
}

#[test]
fn clones_share_no_storage() {
    let a = ModelState::new(tiny(DecoderKind::PlainConvHead), 7).unwrap();
    let mut b = a.clone();
    b.params_mut().get_mut("dec.out.b").unwrap().value.data_mut()[0] = 5.0;
    assert_ne!(a.param("dec.out.b").unwrap().value.data()[0], 5.0);
}

/// Directional finite difference of a scalar objective against the tape gradient.
#[test]
fn full_network_gradient_matches_finite_difference() {
    for kind in [DecoderKind::PlainConvHead, DecoderKind::PromptDecoder] {
        let mut m = ModelState::new(tiny(kind), 11).unwrap();
        m.attach_lora(2, 1.0, 3).unwrap();
        let mut rng = seeded(12);
        for p in m.params_mut().values_mut().filter(|p| p.group == ParamGroup::Lora) {
            for v in p.value.data_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        let img = image(13);
        let prompts = PromptSet {
            boxes: vec![BoxPrompt { row_min: 4, col_min: 4, row_max: 25, col_max: 12 }],
            points: vec![PointPrompt { row: 7, col: 7, polarity: Polarity::Negative }],
        };
        let weights: Vec<f32> = (0..1024).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |s: &ModelState| -> f64 {
            let l = s.predict(&img, Some(&prompts)).unwrap();
            l.values.iter().zip(&weights).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let mut tape = Tape::new();
        let mut binder = Binder::trainable(&m);
        let out = binder.forward(&mut tape, &img, Some(&prompts));
        let seed = Tensor::from_rows(1, 1024, weights.clone());
        let grads = binder.grads(&tape.backward(&[(out.logits, &seed)]));
        assert!(grads.keys().all(|k| m.param(k).unwrap().trainable));
        assert!(grads.contains_key("lora.1.v.b"));
        for name in ["lora.0.q.a", "lora.1.v.b", "dec.out.w", "dec.up.w", "prm.type", "dec.mlp.fc1.b"] {
            let Some(g) = grads.get(name) else {
                assert_eq!(kind, DecoderKind::PlainConvHead);
                continue;
            };
            let mut dir = Tensor::randn(g.shape(), 1.0, &mut rng);
            let norm = dir.sum_sq().sqrt() as f32;
            dir.scale_assign(1.0 / norm);
            let analytic: f64 = g.data().iter().zip(dir.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
            let h = 1e-2f32;
            let shifted = |sign: f32| {
                let mut s = m.clone();
                let t = &mut s.params_mut().get_mut(name).unwrap().value;
                for (v, d) in t.data_mut().iter_mut().zip(dir.data()) {
                    *v += sign * h * d;
                }
                objective(&s)
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h as f64);
            assert!(
                (fd - analytic).abs() <= 3e-2 * (1.0 + fd.abs()),
                "{kind:?} {name}: analytic {analytic} vs fd {fd}"
            );
        }
    }
}

#[test]
fn prompts_steer_the_prompt_decoder() {
    let m = ModelState::new(tiny(DecoderKind::PromptDecoder), 2).unwrap();
    let img = image(4);
    let boxed = PromptSet {
        boxes: vec![BoxPrompt { row_min: 2, col_min: 2, row_max: 10, col_max: 12 }],
        points: vec![],
    };
    let pointed = PromptSet {
        boxes: vec![],
        points: vec![PointPrompt { row: 20, col: 25, polarity: Polarity::Positive }],
    };
    let none = m.predict(&img, None).unwrap();
    assert_ne!(none, m.predict(&img, Some(&boxed)).unwrap());
    assert_ne!(m.predict(&img, Some(&boxed)).unwrap(), m.predict(&img, Some(&pointed)).unwrap());
}

#[test]
fn foundation_tensors_carry_over_except_adapters() {
    let mut f = ModelState::new(tiny(DecoderKind::PromptDecoder), 11).unwrap();
    let mut rng = seeded(12);
    for p in f.params_mut().values_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    f.attach_lora(2, 1.0, 3).unwrap();
    for kind in [DecoderKind::PromptDecoder, DecoderKind::PlainConvHead] {
        let m = ModelState::from_foundation(tiny(kind), &f, 99).unwrap();
        assert!(!m.has_lora());
        for (name, p) in m.params() {
            let src = f.param(name).unwrap();
            if src.value.shape() == p.value.shape() {
                assert_eq!(p.value, src.value, "{name}");
            }
        }
        assert!(m.params().values().all(|p| p.trainable));
    }
    let wider = ModelConfig { embed_dim: 32, ..tiny(DecoderKind::PromptDecoder) };
    assert!(matches!(ModelState::from_foundation(wider, &f, 1), Err(Error::Checkpoint(_))));
}
