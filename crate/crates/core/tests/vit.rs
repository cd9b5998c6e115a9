//! Classifier structure: sequence bookkeeping, parameter accounting,
//! gradients through the whole network, and checkpoint stability.

mod common;

use common::*;
use linvit::attention::AttentionMode;
use linvit::gradcheck::finite_diff_check;
use linvit::vit::{closed_form_params, count_params, patchify, per_block_params, unpatchify};
use linvit::{Checkpoint, Tape, Task, Tensor, ViTConfig, ViTModel};
use proptest::prelude::*;

fn toy(mode: AttentionMode) -> ViTConfig {
    ViTConfig {
        layers: 2,
        hidden_size: 8,
        mlp_size: 16,
        heads: 2,
        patch_size: 4,
        image_size: 8,
        channels: 3,
        num_classes: 3,
        proj_rank: 3,
        attention_mode: mode,
        ..ViTConfig::binary()
    }
}

/// Written out term by term from the layer shapes.
fn expected_params(c: &ViTConfig) -> u64 {
    let (d, m, n) = (c.hidden_size, c.mlp_size, c.seq_len());
    let p = c.channels * c.patch_size * c.patch_size;
    let e = match (c.attention_mode, c.share_kv) {
        (AttentionMode::Standard, _) => 0,
        (AttentionMode::Linear, true) => c.proj_rank * n,
        (AttentionMode::Linear, false) => 2 * c.proj_rank * n,
    };
    let block = 2 * d + 2 * d + 4 * d * d + 4 * d + e + d * m + m + m * d + d;
    (p * d + d + d + n * d + c.layers * block + 2 * d + d * c.num_classes + c.num_classes) as u64
}

#[test]
fn presets_sequence_length() {
    for task in [Task::Binary, Task::Multiclass] {
        let c = task.preset();
        assert_eq!(c.n_patches(), 49);
        assert_eq!(c.patch_dim(), 3072);
        assert_eq!(c.seq_len(), 50);
        let img = Tensor::<f32>::zeros([3, 224, 224]);
        assert_eq!(patchify(&img, c.patch_size).unwrap().shape(), &[49, 3072]);
    }
    assert_eq!(ViTConfig::binary().layers, 12);
    assert_eq!(ViTConfig::multiclass().layers, 32);
}

#[test]
fn preset_counts_match_the_closed_form() {
    for task in [Task::Binary, Task::Multiclass] {
        let c = task.preset();
        let actual = ViTModel::<f32>::init(&c, 0).unwrap().num_params();
        assert_eq!(actual, count_params(&c).unwrap());
        assert_eq!(actual, closed_form_params(&c));
        assert_eq!(actual, expected_params(&c));
    }
}

#[test]
fn depth_adds_whole_blocks() {
    let c = ViTConfig::binary();
    let deeper = ViTConfig { layers: 24, ..c.clone() };
    assert_eq!(closed_form_params(&deeper) - closed_form_params(&c), 12 * per_block_params(&c));
}

#[test]
fn patch_round_trip() {
    let img = Tensor::<f32>::from_fn([3, 8, 12], |i| i as f32);
    let p = patchify(&img, 4).unwrap();
    assert_eq!(p.shape(), &[6, 48]);
    assert_eq!(unpatchify(&p, 3, 8, 12, 4).unwrap(), img);
    let single = Tensor::<f32>::from_fn([3, 4, 4], |i| i as f32);
    assert_eq!(patchify(&single, 4).unwrap().data(), single.data());
    assert!(patchify(&img, 5).is_err());
}

/// Parameters drawn at unit scale so every path carries signal.
fn scrambled(c: &ViTConfig, seed: u64) -> ViTModel<f64> {
    let mut m = ViTModel::<f64>::init(c, seed).unwrap();
    let mut r = rng(seed);
    for t in m.params_mut().values_mut() {
        let noise = Tensor::<f64>::randn(t.shape().to_vec(), 0.5, &mut r);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    m
}

#[test]
fn toy_network_gradients_match_central_differences() {
    for mode in [AttentionMode::Linear, AttentionMode::Standard] {
        let c = toy(mode);
        let m = scrambled(&c, 3);
        let x = randn(&[2, 3, 8, 8], 4);
        // Exact attention is invariant to its key biases, so their true
        // gradient is zero and they are held constant here.
        let mut params = m.params().clone();
        let frozen: Vec<String> = match mode {
            AttentionMode::Standard => (0..c.layers).map(|i| format!("blocks.{i}.attn.b_k")).collect(),
            AttentionMode::Linear => Vec::new(),
        };
        for n in &frozen {
            params.shift_remove(n);
        }
        let rep = finite_diff_check(&params, H, |t: &mut Tape<f64>, v| {
            let mut all = v.clone();
            for n in &frozen {
                all.insert(n.clone(), t.constant(m.params()[n].clone()));
            }
            let enc = m.encode_with(t, &all, &x)?;
            t.cross_entropy(enc.logits, &[2, 0], Some(&[1.0, 0.5, 0.25]))
        })
        .unwrap();
        assert!(rep.max_rel_error < TOL, "{mode}: {rep:?}");
    }
}

#[test]
fn forward_is_head_of_embed() {
    let c = toy(AttentionMode::Linear);
    let m = ViTModel::<f32>::init(&c, 5).unwrap();
    let x = Tensor::<f32>::randn([3, 3, 8, 8], 1.0, &mut rng(6));
    let a = m.forward(&x).unwrap();
    let b = m.head(&m.embed(&x).unwrap()).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-6);
    assert_eq!(m.embed(&x).unwrap().shape(), &[3, 8]);
}

#[test]
fn identical_images_give_identical_rows() {
    let c = toy(AttentionMode::Linear);
    let m = ViTModel::<f32>::init(&c, 5).unwrap();
    let one = Tensor::<f32>::randn([1, 3, 8, 8], 1.0, &mut rng(7));
    let mut data = one.data().to_vec();
    data.extend_from_slice(one.data());
    let two = Tensor::new([2, 3, 8, 8], data).unwrap();
    let y = m.forward(&two).unwrap();
    assert_eq!(y.row(0), y.row(1));
}

#[test]
fn initialization_is_seeded() {
    let c = toy(AttentionMode::Linear);
    let a = ViTModel::<f32>::init(&c, 1).unwrap();
    let b = ViTModel::<f32>::init(&c, 1).unwrap();
    let other = ViTModel::<f32>::init(&c, 2).unwrap();
    assert!(a.params().values().zip(b.params().values()).all(|(x, y)| x.bitwise_eq(y)));
    assert_ne!(a.params()["blocks.0.attn.w_q"], other.params()["blocks.0.attn.w_q"]);
    let preset = ViTModel::<f32>::init(&ViTConfig::binary(), 0).unwrap();
    let x = Tensor::<f32>::randn([2, 3, 224, 224], 1.0, &mut rng(8));
    assert!(preset.forward(&x).unwrap().data().iter().all(|v| v.abs() < 10.0));
}

#[test]
fn checkpoints_are_reproducible() {
    let c = toy(AttentionMode::Linear);
    let names = vec!["a".to_string(), "b".into(), "c".into()];
    let bytes = |seed| Checkpoint::new(ViTModel::init(&c, seed).unwrap(), names.clone()).to_bytes().unwrap();
    assert_eq!(bytes(3), bytes(3));
    assert_ne!(bytes(3), bytes(4));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pocf");
    let ck = Checkpoint::new(ViTModel::init(&c, 3).unwrap(), names.clone());
    ck.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes(3));
    let back = Checkpoint::load(&path).unwrap();
    assert!(back
        .model
        .params()
        .values()
        .zip(ck.model.params().values())
        .all(|(x, y)| x.bitwise_eq(y)));
    assert_eq!(back.model.config(), ck.model.config());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn counts_agree_on_random_configs(
        layers in 1usize..4, heads in 1usize..4, per_head in 1usize..5, mlp in 1usize..20,
        patch in 1usize..5, side in 1usize..4, channels in 1usize..4, classes in 2usize..5,
        linear in any::<bool>(), share in any::<bool>(), rank in 1usize..20,
    ) {
        let mut c = ViTConfig {
            layers,
            hidden_size: heads * per_head,
            mlp_size: mlp,
            heads,
            patch_size: patch,
            image_size: patch * side,
            channels,
            num_classes: classes,
            proj_rank: 1,
            attention_mode: if linear { AttentionMode::Linear } else { AttentionMode::Standard },
            share_kv: share,
            ..ViTConfig::binary()
        };
        c.proj_rank = rank.min(c.seq_len());
        let m = ViTModel::<f32>::init(&c, 0).unwrap();
        prop_assert_eq!(m.num_params(), closed_form_params(&c));
        prop_assert_eq!(m.num_params(), expected_params(&c));
    }
}
