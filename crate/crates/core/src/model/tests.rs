use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{Graph, Var};
use crate::tensor::Tensor;
use crate::traversal::Direction;
use crate::verify::{central_difference, max_relative_error};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn micro(dim: usize, depth: usize) -> ViLConfig {
    ViLConfig::micro(dim, depth, 3)
}

fn image(size: usize, seed: u64) -> Tensor<f64> {
    Tensor::standard_normal([size, size, 3], &mut rng(seed))
}

/// Moves every parameter off its structured initialisation.
fn jitter(model: &mut Model<f64>, seed: u64) {
    let mut r = rng(seed);
    for t in model.params_mut().tensors_mut() {
        let noise = Tensor::<f64>::randn(t.shape().to_vec(), 0.3, &mut r);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
}

#[test]
fn patchify_token_counts() {
    let mut cfg = ViLConfig::preset(Preset::Tiny);
    let img = Tensor::<f32>::zeros([224, 224, 3]);
    assert_eq!(patchify(&img, &cfg).unwrap().data.shape(), &[196, 768]);
    cfg.patch_stride = Some(8);
    let p = patchify(&img, &cfg).unwrap();
    assert_eq!(p.data.shape(), &[729, 768]);
    assert_eq!(p.grid, (27, 27));
    let small = micro(8, 1);
    assert_eq!(patchify(&Tensor::<f32>::zeros([32, 32, 3]), &small).unwrap().grid, (2, 2));
}

#[test]
fn patchify_rejects_uncovered_images() {
    let cfg = ViLConfig::preset(Preset::Tiny);
    let err = patchify(&Tensor::<f32>::zeros([225, 225, 3]), &cfg).unwrap_err();
    assert!(matches!(err, VilError::Config(_)), "{err}");
    assert!(patchify(&Tensor::<f32>::zeros([224, 224, 1]), &cfg).is_err());
    assert!(patchify(&Tensor::<f32>::zeros([224, 224]), &cfg).is_err());
}

#[test]
fn patchify_layout() {
    let mut cfg = micro(8, 1);
    cfg.image_size = 4;
    cfg.patch_size = 2;
    cfg.channels = 1;
    let img = Tensor::<f64>::from_f64([4, 4, 1], &(0..16).map(f64::from).collect::<Vec<_>>()).unwrap();
    let p = patchify(&img, &cfg).unwrap();
    assert_eq!(&p.data.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    assert_eq!(&p.data.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
}

#[test]
fn patch_embedding_parameter_count() {
    let specs = layout(&ViLConfig::preset(Preset::Tiny)).unwrap();
    let n: usize = specs
        .iter()
        .filter(|s| s.name.starts_with("patch_embed"))
        .map(ParamSpec::numel)
        .sum();
    assert_eq!(n, 147_648);
}

#[test]
fn preset_counts_are_pinned() {
    let count = |p| count_params(&ViLConfig::preset(p)).unwrap();
    assert_eq!(count(Preset::Tiny), 6_188_008);
    assert_eq!(count(Preset::Small), 22_991_656);
    assert_eq!(count(Preset::Base), 88_449_448);
}

#[test]
fn shared_quad_matches_uni_count() {
    let mut cfg = ViLConfig::preset(Preset::Tiny);
    cfg.block_design = crate::traversal::BlockDesign::uni();
    let uni = count_params(&cfg).unwrap();
    cfg.block_design = crate::traversal::BlockDesign::quad(true);
    assert_eq!(count_params(&cfg).unwrap(), uni);
    cfg.block_design = crate::traversal::BlockDesign::quad(false);
    assert!(count_params(&cfg).unwrap() > uni);
}

#[test]
fn decay_flags_follow_rank() {
    let specs = layout(&micro(8, 1)).unwrap();
    for s in &specs {
        let expect = s.shape.len() >= 2 && s.name != "pos_embed";
        assert_eq!(s.decay, expect, "{}", s.name);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = micro(8, 1);
    cfg.heads = 3;
    assert!(cfg.validate().is_err());
    let mut cfg = micro(8, 1);
    cfg.drop_path_rate = 1.0;
    assert!(cfg.validate().is_err());
    let mut cfg = micro(8, 1);
    cfg.depth = 0;
    assert!(cfg.validate().is_err());
    let toml_err = toml::from_str::<ViLConfig>("dim = 8\nbogus = 1\n");
    assert!(toml_err.is_err());
}

#[test]
fn config_roundtrips_through_toml() {
    let cfg = ViLConfig::preset(Preset::Small);
    let text = toml::to_string(&cfg).unwrap();
    assert_eq!(toml::from_str::<ViLConfig>(&text).unwrap(), cfg);
}

#[test]
fn positional_addition() {
    let mut g = Graph::<f64>::new();
    let t = Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap().with_grad();
    let tok = g.leaf(&t);
    let zero = g.leaf(&Tensor::zeros([2, 2]).with_grad());
    let out = add_positional(&mut g, tok, zero).unwrap();
    assert_eq!(g.value(out), t.data());
    let loss = g.sum(out);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(tok).unwrap(), g.grad(zero).unwrap());

    let mut g = Graph::<f64>::new();
    let a = g.leaf(&Tensor::from_f64([1, 3], &[1.0, 1.0, 1.0]).unwrap());
    let b = g.leaf(&Tensor::from_f64([1, 3], &[0.5, -1.0, 2.0]).unwrap());
    let out = add_positional(&mut g, a, b).unwrap();
    assert_eq!(g.value(out), &[1.5, 0.0, 3.0]);
    let c = g.leaf(&Tensor::zeros([2, 3]));
    assert!(matches!(add_positional(&mut g, a, c), Err(VilError::Dimension(_))));
}

#[test]
fn positional_interpolation() {
    let pos = Tensor::<f64>::standard_normal([4, 3], &mut rng(1));
    assert_eq!(interpolate_positional(&pos, (2, 2), (2, 2)).unwrap(), pos);

    let constant = Tensor::<f64>::full([9, 2], 0.7);
    let up = interpolate_positional(&constant, (3, 3), (5, 4)).unwrap();
    assert_eq!(up.shape(), &[20, 2]);
    assert!(up.data().iter().all(|x| (x - 0.7).abs() < 1e-12));

    // A linear ramp is reproduced exactly, corners aligned.
    let ramp = Tensor::<f64>::from_f64([4, 1], &[0.0, 1.0, 1.0, 2.0]).unwrap();
    let up = interpolate_positional(&ramp, (2, 2), (4, 4)).unwrap();
    for r in 0..4 {
        for c in 0..4 {
            let want = (r + c) as f64 / 3.0;
            assert!((up.data()[r * 4 + c] - want).abs() < 1e-5);
        }
    }
    assert!(matches!(interpolate_positional(&ramp, (2, 2), (0, 4)), Err(VilError::Config(_))));
    assert!(interpolate_positional(&ramp, (3, 2), (4, 4)).is_err());
}

#[test]
fn pooling_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(&Tensor::from_f64([3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let concat = pool(&mut g, x, Pooling::BilateralConcat, None).unwrap();
    assert_eq!(g.value(concat), &[1.0, 2.0, 5.0, 6.0]);
    let mid = pool(&mut g, x, Pooling::MiddlePatch, None).unwrap();
    assert_eq!(g.value(mid), &[3.0, 4.0]);
    let avg = pool(&mut g, x, Pooling::Avg, None).unwrap();
    assert_eq!(g.value(avg), &[3.0, 4.0]);
    let bavg = pool(&mut g, x, Pooling::BilateralAvg, None).unwrap();
    assert_eq!(g.value(bavg), &[3.0, 4.0]);
    let cls = pool(&mut g, x, Pooling::MiddleCls, Some(0)).unwrap();
    assert_eq!(g.value(cls), &[1.0, 2.0]);
    assert!(pool(&mut g, x, Pooling::MiddleCls, None).is_err());
    assert!(pool(&mut g, x, Pooling::MiddleCls, Some(3)).is_err());
    assert!(pool(&mut g, x, Pooling::Avg, Some(1)).is_err());
    assert_eq!(Pooling::BilateralConcat.feature_dim(192), 384);
    assert_eq!(Pooling::Avg.feature_dim(192), 192);
}

#[test]
fn drop_path_decisions() {
    let mut r = rng(3);
    assert_eq!(drop_path(0.0, true, &mut r).unwrap(), Some(1.0));
    assert_eq!(drop_path(0.5, false, &mut r).unwrap(), Some(1.0));
    assert!(drop_path(1.0, true, &mut r).is_err());
    assert!(drop_path(-0.1, true, &mut r).is_err());
    let n = 4000;
    let mut dropped = 0;
    for _ in 0..n {
        match drop_path(0.25, true, &mut r).unwrap() {
            None => dropped += 1,
            Some(s) => assert!((s - 1.0 / 0.75).abs() < 1e-12),
        }
    }
    assert!((dropped as f64 / n as f64 - 0.25).abs() < 0.03);
}

#[test]
fn linear_drop_schedule() {
    let mut cfg = micro(8, 5);
    cfg.drop_path_rate = 0.2;
    assert_eq!(drop_rates(&cfg), vec![0.0, 0.05, 0.1, 0.15000000000000002, 0.2]);
    cfg.drop_path_schedule = DropSchedule::Constant;
    assert!(drop_rates(&cfg).iter().all(|&r| r == 0.2));
}

#[test]
fn training_forward_skips_dropped_blocks() {
    let mut cfg = micro(8, 4);
    cfg.drop_path_rate = 0.9;
    cfg.drop_path_schedule = DropSchedule::Constant;
    let model = Model::<f64>::new(cfg, &mut rng(0)).unwrap();
    let img = image(32, 1);
    let mut eval = Graph::new();
    let vars = model.bind(&mut eval);
    model.forward(&mut eval, &vars, &img, ForwardOptions::eval()).unwrap();
    let mut r = rng(5);
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let out = model
        .forward(
            &mut g,
            &vars,
            &img,
            ForwardOptions {
                training: true,
                rng: Some(&mut r),
                trace: None,
            },
        )
        .unwrap();
    assert!(out.dropped.iter().any(|&d| d));
    assert!(g.macs() < eval.macs());
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let opts = ForwardOptions {
        training: true,
        ..ForwardOptions::eval()
    };
    assert!(matches!(model.forward(&mut g, &vars, &img, opts), Err(VilError::Context { .. } | VilError::Usage(_))));
}

#[test]
fn forward_shape_and_zero_head() {
    let mut model = Model::<f64>::new(micro(16, 2), &mut rng(0)).unwrap();
    let img = image(32, 0);
    assert_eq!(model.logits(&img).unwrap().len(), 3);
    for name in ["head.weight", "head.bias"] {
        model.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    assert_eq!(model.logits(&img).unwrap(), vec![0.0; 3]);
}

#[test]
fn forward_rejects_wrong_resolution() {
    let model = Model::<f64>::new(micro(8, 1), &mut rng(0)).unwrap();
    let err = model.logits(&image(48, 0)).unwrap_err();
    assert!(err.to_string().contains("with_resolution"), "{err}");
}

#[test]
fn argmax_invariant_to_positive_head_scale() {
    let mut model = Model::<f64>::new(micro(16, 2), &mut rng(2)).unwrap();
    jitter(&mut model, 9);
    for seed in 0..5 {
        let img = image(32, seed);
        let before = model.predict(&img).unwrap();
        let mut scaled = model.clone();
        for name in ["head.weight", "head.bias"] {
            scaled.params_mut().get_mut(name).unwrap().data_mut().iter_mut().for_each(|x| *x *= 3.5);
        }
        assert_eq!(scaled.predict(&img).unwrap(), before);
    }
}

#[test]
fn eval_is_deterministic() {
    let model = Model::<f32>::new(micro(16, 2), &mut rng(4)).unwrap();
    let img = Tensor::<f32>::standard_normal([32, 32, 3], &mut rng(1));
    let a = model.logits(&img).unwrap();
    let b = model.logits(&img).unwrap();
    assert_eq!(a, b);
    let again = Model::<f32>::new(micro(16, 2), &mut rng(4)).unwrap();
    assert_eq!(again.logits(&img).unwrap(), a);
}

fn tokens(len: usize, dim: usize, seed: u64) -> Tensor<f64> {
    Tensor::standard_normal([len, dim], &mut rng(seed))
}

#[test]
fn shape_contract_over_lengths() {
    let mut cfg = micro(8, 1);
    cfg.heads = 2;
    cfg.conv_kind = ConvKind::Causal1d;
    let model = Model::<f64>::new(cfg, &mut rng(0)).unwrap();
    for len in [4, 196, 729] {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let x = g.leaf(&tokens(len, 8, len as u64));
        let y = model.layer_at(&mut g, &vars, x, 0, 0, (len, 1), None).unwrap();
        assert_eq!(g.shape(y), &[len, 8]);
        assert!(g.value(y).iter().all(|v| v.is_finite()));
    }
}

#[test]
fn zero_down_projection_gives_identity_residual() {
    let mut model = Model::<f64>::new(micro(8, 2), &mut rng(0)).unwrap();
    jitter(&mut model, 1);
    let names: Vec<String> = model.params().names().filter(|n| n.contains(".down.")).map(String::from).collect();
    for n in names {
        model.params_mut().get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let x = g.leaf(&tokens(4, 8, 3));
    let dirs = model.schedule()[0].clone();
    let branch = model.block_branch(&mut g, &vars, x, 0, &dirs, (2, 2), None, None).unwrap();
    let out = g.add(x, branch).unwrap();
    assert_eq!(g.value(out), g.value(x));
}

fn layer_loss(model: &Model<f64>, x: &Tensor<f64>, w: &Tensor<f64>, grid: (usize, usize)) -> f64 {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let xv = g.leaf(x);
    let y = model.layer_at(&mut g, &vars, xv, 0, 0, grid, None).unwrap();
    let wv = g.leaf(w);
    let p = g.mul(y, wv).unwrap();
    let loss = g.sum(p);
    g.value(loss)[0]
}

#[test]
fn layer_gradients_match_finite_differences() {
    let mut cfg = micro(8, 1);
    cfg.heads = 1;
    cfg.block_design = crate::traversal::BlockDesign::uni();
    let mut model = Model::<f64>::new(cfg, &mut rng(0)).unwrap();
    jitter(&mut model, 2);
    let grid = (2, 3);
    let x = tokens(6, 8, 4);
    let w = tokens(6, 8, 5);

    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let xv = g.leaf(&x.clone().with_grad());
    let y = model.layer_at(&mut g, &vars, xv, 0, 0, grid, None).unwrap();
    let wv = g.leaf(&w);
    let p = g.mul(y, wv).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();

    let numeric = central_difference(
        |d| layer_loss(&model, &Tensor::from_f64([6, 8], d).unwrap(), &w, grid),
        x.data(),
        1e-5,
    );
    let err = max_relative_error(g.grad(xv).unwrap(), &numeric);
    assert!(err < 1e-4, "input grad err {err}");

    for (i, spec) in model.params().specs().iter().enumerate() {
        if !spec.name.starts_with("blocks.") {
            continue;
        }
        let numeric = central_difference(
            |d| {
                let mut m = model.clone();
                m.params_mut().tensors_mut()[i].data_mut().copy_from_slice(d);
                layer_loss(&m, &x, &w, grid)
            },
            model.params().tensors()[i].data(),
            1e-5,
        );
        let err = max_relative_error(g.grad(vars.get(i)).unwrap(), &numeric);
        assert!(err < 1e-4, "{}: {err}", spec.name);
    }
}

#[test]
fn forward_block_equals_layer() {
    let mut cfg = micro(8, 1);
    cfg.block_design = crate::traversal::BlockDesign::uni();
    let mut model = Model::<f64>::new(cfg, &mut rng(0)).unwrap();
    jitter(&mut model, 3);
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let x = g.leaf(&tokens(4, 8, 1));
    let block = model
        .block_branch(&mut g, &vars, x, 0, &[Direction::RowForward], (2, 2), None, None)
        .unwrap();
    let layer = model.layer_at(&mut g, &vars, x, 0, 0, (2, 2), None).unwrap();
    assert_eq!(g.value(block), g.value(layer));
}

#[test]
fn backward_block_on_palindrome_is_flipped_forward() {
    let mut cfg = micro(8, 1);
    cfg.block_design = crate::traversal::BlockDesign::bi(true);
    cfg.conv_kind = ConvKind::Causal1d;
    let mut model = Model::<f64>::new(cfg, &mut rng(0)).unwrap();
    jitter(&mut model, 4);
    let half = tokens(2, 8, 2);
    let mut rows = half.data().to_vec();
    rows.extend_from_slice(&half.data()[8..]);
    rows.extend_from_slice(&half.data()[..8]);
    let pal = Tensor::from_f64([4, 8], &rows).unwrap();
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let x = g.leaf(&pal);
    let rb = model
        .block_branch(&mut g, &vars, x, 0, &[Direction::RowBackward], (2, 2), None, None)
        .unwrap();
    let rf = model.layer_at(&mut g, &vars, x, 0, 0, (4, 1), None).unwrap();
    let rf = g.value(rf).to_vec();
    let rb = g.value(rb);
    for t in 0..4 {
        assert_eq!(&rb[t * 8..(t + 1) * 8], &rf[(3 - t) * 8..(4 - t) * 8]);
    }
}

#[test]
fn shared_quad_accumulates_gradients() {
    let mut cfg = micro(8, 1);
    cfg.block_design = crate::traversal::BlockDesign::quad(true);
    let mut model = Model::<f64>::new(cfg, &mut rng(0)).unwrap();
    jitter(&mut model, 5);
    let x = tokens(4, 8, 6);
    let w = tokens(4, 8, 7);
    let grads = |dirs: &[Direction]| {
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let xv = g.leaf(&x);
        let y = model.block_branch(&mut g, &vars, xv, 0, dirs, (2, 2), None, None).unwrap();
        let wv = g.leaf(&w);
        let p = g.mul(y, wv).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        let i = model.params().index_of("blocks.0.mlstm.down.weight").unwrap();
        g.grad(vars.get(i)).unwrap().to_vec()
    };
    let all = grads(&Direction::ALL);
    let mut summed = vec![0.0; all.len()];
    for d in Direction::ALL {
        for (s, v) in summed.iter_mut().zip(grads(&[d])) {
            *s += v;
        }
    }
    let err = all.iter().zip(&summed).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
}

#[test]
fn trace_restores_canonical_order() {
    for (pooling, design) in [
        (Pooling::BilateralConcat, crate::traversal::BlockDesign::alternating_quad()),
        (Pooling::MiddleCls, crate::traversal::BlockDesign::quad(false)),
    ] {
        let mut cfg = micro(8, 4);
        cfg.image_size = 48;
        cfg.pooling = pooling;
        cfg.block_design = design;
        let model = Model::<f64>::new(cfg.clone(), &mut rng(0)).unwrap();
        let mut trace = Vec::new();
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let opts = ForwardOptions {
            trace: Some(&mut trace),
            ..ForwardOptions::eval()
        };
        model.forward(&mut g, &vars, &image(48, 0), opts).unwrap();
        let len = cfg.seq_len().unwrap();
        assert!(!trace.is_empty());
        for ev in &trace {
            assert_eq!(ev.order_out, (0..len).collect::<Vec<_>>(), "{:?}", ev.direction);
            if let Some(c) = cfg.cls_position().unwrap() {
                assert_eq!(ev.order_in[c], c);
            }
        }
        if pooling == Pooling::BilateralConcat {
            let dirs: Vec<_> = trace.iter().map(|e| e.direction).collect();
            assert_eq!(dirs, Direction::ALL.to_vec());
        }
    }
}

#[test]
fn kernel_modes_agree_in_f64() {
    let mut cfg = micro(16, 2);
    cfg.image_size = 48;
    let mut base = Model::<f64>::new(cfg.clone(), &mut rng(8)).unwrap();
    jitter(&mut base, 6);
    let img = image(48, 3);
    let reference = base.logits(&img).unwrap();
    for mode in [KernelMode::Recurrent, KernelMode::Chunkwise(1), KernelMode::Chunkwise(4), KernelMode::Chunkwise(9)] {
        let mut c = cfg.clone();
        c.kernel = mode;
        let m = Model::from_params(c, base.params().clone()).unwrap();
        let out = m.logits(&img).unwrap();
        let dev = reference.iter().zip(&out).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dev < 1e-10, "{mode:?}: {dev}");
    }
}

#[test]
fn resolution_change_resamples_positions() {
    let model = Model::<f64>::new(micro(8, 1), &mut rng(0)).unwrap();
    let big = model.with_resolution(48).unwrap();
    assert_eq!(big.params().get("pos_embed").unwrap().shape(), &[9, 8]);
    assert_eq!(big.logits(&image(48, 0)).unwrap().len(), 3);
    assert!(model.with_resolution(40).is_err());
    let same = model.with_resolution(32).unwrap();
    assert_eq!(same.params(), model.params());
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut model = Model::<f64>::new(micro(8, 1), &mut rng(0)).unwrap();
    let i = model.params().index_of("pos_embed").unwrap();
    model.params_mut().set_frozen(i, true);
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let out = model.forward(&mut g, &vars, &image(32, 0), ForwardOptions::eval()).unwrap();
    let loss = g.cross_entropy(out.logits, 1).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(vars.get(i)).is_none());
    assert!(g.grad(vars.get(0)).is_some());
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = micro(16, 2);
    let model = Model::<f32>::new(cfg.clone(), &mut rng(1)).unwrap();
    save_checkpoint(&path, &cfg, model.params()).unwrap();
    let loaded = load_checkpoint::<f32>(&path, &cfg).unwrap();
    assert_eq!(&loaded, model.params());
    let img = Tensor::<f32>::standard_normal([32, 32, 3], &mut rng(2));
    let a = model.logits(&img).unwrap();
    let b = Model::from_params(cfg.clone(), loaded).unwrap().logits(&img).unwrap();
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());

    let (digest, entries) = read_checkpoint(&path).unwrap();
    assert_eq!(digest, config_digest(&cfg));
    assert_eq!(entries.len(), model.params().len());
    assert_eq!(entries[0].name, "patch_embed.weight");
}

#[test]
fn checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = micro(8, 1);
    let model = Model::<f32>::new(cfg.clone(), &mut rng(1)).unwrap();
    save_checkpoint(&path, &cfg, model.params()).unwrap();

    let other = micro(8, 2);
    assert!(matches!(load_checkpoint::<f32>(&path, &other), Err(VilError::Format(_))));

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&cut, &cfg), Err(VilError::Format(_))));

    let mut junk = bytes.clone();
    junk.push(0);
    std::fs::write(&cut, &junk).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&cut, &cfg), Err(VilError::Format(_))));

    let mut magic = bytes;
    magic[0] = b'X';
    std::fs::write(&cut, &magic).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&cut, &cfg), Err(VilError::Format(_))));

    assert!(load_checkpoint::<f32>(dir.path().join("missing"), &cfg).is_err());
}

#[test]
fn cast_preserves_logits_approximately() {
    let model = Model::<f64>::new(micro(8, 1), &mut rng(0)).unwrap();
    let img = image(32, 1);
    let a = model.logits(&img).unwrap();
    let b = model.cast::<f32>().logits(&img.cast()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - *y as f64).abs() < 1e-4);
    }
}

#[test]
fn argmax_picks_first_maximum() {
    assert_eq!(forward::argmax(&[1.0f32, 3.0, 3.0, 2.0]), 1);
    let _ = Var::index;
}
