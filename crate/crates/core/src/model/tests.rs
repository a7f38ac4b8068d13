use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

fn mnist_cnn() -> ModelGraph {
    build_model("cnn-small", 10, [1, 28, 28], &mut rng()).unwrap()
}

fn random_batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, shape[0], shape[1], shape[2]], |_| r.random_range(-1.0..1.0))
}

#[test]
fn cnn_small_layout() {
    let m = mnist_cnn();
    assert_eq!(m.prunable_channels(), vec![16, 32, 32, 64]);
    for p in m.prunable() {
        assert_eq!(m.layers()[p.conv].kind, LayerKind::Conv);
        assert_eq!(m.layers()[p.bn].kind, LayerKind::Bn);
        assert_eq!(m.layers()[p.mask_site].kind, LayerKind::Relu);
    }
    let convs = m.layers().iter().filter(|l| l.kind == LayerKind::Conv).count();
    assert_eq!(convs, 4);
    assert_eq!(m.layers().last().unwrap().out_shape, [10, 1, 1]);
}

#[test]
fn resnet_tiny_adds_are_aligned() {
    let m: ModelGraph = build_model("resnet-tiny", 10, [1, 28, 28], &mut rng()).unwrap();
    assert_eq!(m.prunable_channels(), vec![16, 32, 64]);
    let adds: Vec<_> = m.layers().iter().filter(|l| l.kind == LayerKind::Add).collect();
    assert_eq!(adds.len(), 3);
    for a in adds {
        let (x, y) = (a.inputs[0], a.inputs[1]);
        assert_eq!(m.layers()[x].out_shape, m.layers()[y].out_shape);
    }
    // only block-opening convs are prunable
    for l in m.layers().iter().filter(|l| l.prunable) {
        let consumer = m.layers().iter().find(|c| c.inputs.contains(&l.id)).unwrap();
        assert_eq!(consumer.kind, LayerKind::Bn);
    }
    let full = m.exact_model_flops(&m.prunable_channels()).unwrap();
    assert_eq!(full, m.total_flops());
    assert!(m.exact_model_flops(&[1, 1, 1]).unwrap() < full);
}

#[test]
fn unknown_model_is_rejected() {
    let err = build_model::<f32>("vgg", 10, [1, 28, 28], &mut rng()).unwrap_err();
    assert!(matches!(err, Error::UnknownModel(n) if n == "vgg"));
}

#[test]
fn parameter_count_matches_tensor_sizes() {
    let m = mnist_cnn();
    // conv weights + bn gamma/beta + linear weight/bias
    let expected = (16 * 9 + 32) + (32 * 16 * 9 + 64) + (32 * 32 * 9 + 64) + (64 * 32 * 9 + 128) + (64 * 10 + 10);
    assert_eq!(m.num_parameters(), expected);
    let r: ModelGraph = build_model("resnet-tiny", 10, [3, 32, 32], &mut rng()).unwrap();
    let summed: usize = r
        .params()
        .iter()
        .flat_map(|p| p.tensors())
        .filter(|(role, _)| role.is_trainable())
        .map(|(_, t)| t.len())
        .sum();
    assert_eq!(r.num_parameters(), summed);
}

#[test]
fn layer_flops_examples() {
    let m: ModelGraph = build_model("cnn-small", 10, [1, 16, 16], &mut rng()).unwrap();
    let conv2 = m.prunable()[1].conv;
    assert_eq!(m.layers()[conv2].out_shape, [32, 8, 8]);
    assert_eq!(m.layer_flops()[conv2], 589_824);
    assert_eq!(*m.layer_flops().last().unwrap(), 1_280);
    assert_eq!(m.total_flops(), m.layer_flops().iter().sum::<u64>());
}

#[test]
fn exact_flops_by_hand() {
    let m = mnist_cnn();
    let conv1 = 2 * 9 * 16 * 28 * 28;
    let conv2 = 2 * 9 * 16 * 32 * 14 * 14;
    let conv3 = 2 * 9 * 32 * 32 * 7 * 7;
    let conv4 = 2 * 9 * 32 * 64 * 7 * 7;
    let head = 2 * 64 * 10;
    assert_eq!(m.total_flops(), conv1 + conv2 + conv3 + conv4 + head);
    assert_eq!(m.exact_model_flops(&[16, 32, 32, 64]).unwrap(), m.total_flops());

    // halving conv2 halves its own output and conv3's input
    let halved = m.exact_model_flops(&[16, 16, 32, 64]).unwrap();
    assert_eq!(halved, conv1 + conv2 / 2 + conv3 / 2 + conv4 + head);

    assert_eq!(
        m.exact_model_flops(&[1, 1, 1, 1]).unwrap(),
        2 * 9 * 28 * 28 + 2 * 9 * 14 * 14 + 2 * 9 * 7 * 7 + 2 * 9 * 7 * 7 + 2 * 10
    );
    assert!(m.exact_model_flops(&[0, 32, 32, 64]).is_err());
    assert!(m.exact_model_flops(&[16, 33, 32, 64]).is_err());
    assert!(m.exact_model_flops(&[16, 32]).is_err());
}

proptest! {
    #[test]
    fn fpr_is_monotone(kept in prop::collection::vec(1usize..=16, 4), layer in 0usize..4) {
        let m = mnist_cnn();
        let caps = m.prunable_channels();
        let full = m.total_flops() as f64;
        let mut k: Vec<usize> = kept.iter().zip(&caps).map(|(&a, &c)| a.min(c)).collect();
        let fpr = 1.0 - m.exact_model_flops(&k).unwrap() as f64 / full;
        prop_assert!((0.0..1.0).contains(&fpr));
        if k[layer] < caps[layer] {
            k[layer] += 1;
            let fpr_more = 1.0 - m.exact_model_flops(&k).unwrap() as f64 / full;
            prop_assert!(fpr_more < fpr);
        }
    }
}

fn logits(m: &ModelGraph, x: &Tensor, masks: Option<&[Vec<f32>]>) -> Tensor {
    m.predict(x, masks).unwrap()
}

#[test]
fn all_ones_mask_is_bit_identical_to_no_mask() {
    let m = mnist_cnn();
    let x = random_batch(3, [1, 28, 28], 1);
    let ones: Vec<Vec<f32>> = m.prunable_channels().iter().map(|&c| vec![1.0; c]).collect();
    assert_eq!(logits(&m, &x, None).data(), logits(&m, &x, Some(&ones)).data());
}

#[test]
fn zero_mask_silences_layer() {
    let m = mnist_cnn();
    let x = random_batch(2, [1, 28, 28], 2);
    let mut masks: Vec<Vec<f32>> = m.prunable_channels().iter().map(|&c| vec![1.0; c]).collect();
    masks[2] = vec![0.0; 32];

    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let input = g.constant(x.clone());
    let mvars: Vec<Var> = masks
        .iter()
        .map(|v| g.constant(Tensor::new([v.len()], v.clone()).unwrap()))
        .collect();
    let pass = m
        .forward(&mut g, &bound, input, Some(&mvars), BatchNormMode::Eval)
        .unwrap();
    let site = m.prunable()[2].mask_site;
    assert!(g.value(pass.outputs[site]).data().iter().all(|&v| v == 0.0));

    // masking the last block leaves only the linear bias
    masks[2] = vec![1.0; 32];
    masks[3] = vec![0.0; 64];
    let out = logits(&m, &x, Some(&masks));
    let LayerParams::Linear { bias, .. } = m.params().last().unwrap() else {
        panic!("head is not linear")
    };
    for row in out.data().chunks(10) {
        assert_eq!(row, bias.data());
    }
}

#[test]
fn forward_rejects_bad_masks_and_inputs() {
    let m = mnist_cnn();
    let x = random_batch(1, [1, 28, 28], 3);
    let short: Vec<Vec<f32>> = vec![vec![1.0; 16]; 3];
    assert!(matches!(m.predict(&x, Some(&short)), Err(Error::MaskMismatch(_))));
    let mut wrong: Vec<Vec<f32>> = m.prunable_channels().iter().map(|&c| vec![1.0; c]).collect();
    wrong[1] = vec![1.0; 31];
    assert!(matches!(m.predict(&x, Some(&wrong)), Err(Error::MaskMismatch(_))));
    let bad = random_batch(1, [1, 27, 28], 3);
    assert!(matches!(m.predict(&bad, None), Err(Error::Shape { .. })));
}

#[test]
fn forward_is_deterministic() {
    let a = mnist_cnn();
    let b = mnist_cnn();
    let x = random_batch(4, [1, 28, 28], 4);
    assert_eq!(logits(&a, &x, None).data(), logits(&b, &x, None).data());
}

#[test]
fn running_stats_update() {
    let mut m = mnist_cnn();
    let x = random_batch(4, [1, 28, 28], 5);
    let mut g = Graph::new();
    let bound = m.bind(&mut g, true);
    let input = g.constant(x);
    let pass = m.forward(&mut g, &bound, input, None, BatchNormMode::Train).unwrap();
    assert_eq!(pass.bn_stats.len(), 4);
    let (layer, stats) = &pass.bn_stats[0];
    m.update_running_stats(&pass.bn_stats, 0.1);
    let LayerParams::Bn {
        running_mean,
        running_var,
        ..
    } = &m.params()[*layer]
    else {
        panic!("not a bn layer")
    };
    let unbias = stats.count as f32 / (stats.count - 1) as f32;
    for c in 0..running_mean.len() {
        assert!((running_mean.data()[c] - 0.1 * stats.mean[c]).abs() < 1e-6);
        let want = 0.9 + 0.1 * stats.var[c] * unbias;
        assert!((running_var.data()[c] - want).abs() < 1e-5);
    }
}

#[test]
fn from_parts_validates() {
    let m = mnist_cnn();
    let arch = m.architecture().clone();
    let mut params = m.params().to_vec();
    params[0] = LayerParams::Conv {
        weight: Tensor::zeros([15, 1, 3, 3]),
    };
    assert!(ModelGraph::from_parts(arch.clone(), params).is_err());
    assert!(ModelGraph::from_parts(arch.clone(), m.params()[1..].to_vec()).is_err());

    // a prunable conv must be followed by bn -> relu
    let mut broken = arch.clone();
    let head = broken.layers.len() - 1;
    broken.layers[head].prunable = true;
    assert!(ModelGraph::from_parts(broken, m.params().to_vec()).is_err());
    assert!(ModelGraph::from_parts(arch, m.params().to_vec()).is_ok());
}

#[test]
fn architecture_roundtrips_through_json() {
    let m: ModelGraph = build_model("resnet-tiny", 10, [3, 32, 32], &mut rng()).unwrap();
    let json = serde_json::to_string(m.architecture()).unwrap();
    let back: Architecture = serde_json::from_str(&json).unwrap();
    assert_eq!(&back, m.architecture());
}

#[test]
fn describe_lists_every_layer() {
    let m = mnist_cnn();
    let text = m.describe();
    assert_eq!(text.lines().count(), m.layers().len() + 2);
    assert!(text.contains("cnn-small"));
    assert_eq!(text.matches("yes").count(), 4);
}

#[test]
fn residual_pruning_of_block_output_is_refused() {
    let m: ModelGraph = build_model("resnet-tiny", 10, [1, 28, 28], &mut rng()).unwrap();
    let mut arch = m.architecture().clone();
    // mark the stem prunable: it feeds an add through the identity shortcut
    let stem = 0;
    arch.layers[stem].prunable = true;
    let model = ModelGraph::from_parts(arch, m.params().to_vec()).unwrap();
    let mut kept: Vec<Vec<usize>> = model.prunable_channels().iter().map(|&c| (0..c).collect()).collect();
    kept[0] = (0..8).collect();
    assert!(matches!(
        model.propagate_channels(&kept),
        Err(Error::ResidualAlignment(_))
    ));
}
