use msfan_core::layers::{self, block_params, ca_params, group_params, init_params};
use msfan_core::model::{backbone_flops, count_flops, head_flops};
use msfan_core::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rand_input(shape: Shape, seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn registry_matches_closed_form_over_the_matrix() {
    for g in [2, 5, 10] {
        for b in [1, 3, 20] {
            for ca in [false, true] {
                for mf in [false, true] {
                    if mf && g < 3 {
                        continue;
                    }
                    let cfg = ModelConfig {
                        groups: g,
                        blocks: b,
                        use_ca: ca,
                        use_multifan: mf,
                        ..ModelConfig::default()
                    };
                    let store = init_params(&cfg, 1).unwrap();
                    assert_eq!(store.scalar_count(), param_count(&cfg), "g={g} b={b} ca={ca} mf={mf}");
                }
            }
        }
    }
}

#[test]
fn multifan_needs_three_groups() {
    let cfg = ModelConfig::rirn(2, 1).with_multifan();
    assert!(matches!(Model::build(cfg, 0), Err(Error::Config(_))));
}

#[test]
fn published_table_counts() {
    let table = [
        (ModelConfig::rcan(5, 3), 1_376_253),
        (ModelConfig::rirn(5, 3), 1_367_553),
        (ModelConfig::rirn(5, 3).with_multifan(), 1_533_845),
        (ModelConfig::rcan(10, 20), 15_331_553),
        (ModelConfig::rirn(10, 20), 15_215_553),
        (ModelConfig::rirn(10, 20).with_multifan(), 15_566_165),
    ];
    for (cfg, n) in table {
        assert_eq!(param_count(&cfg), n, "{}", cfg.label());
    }
}

#[test]
fn block_and_group_counts() {
    assert_eq!(ca_params(64, 16), 580);
    assert_eq!(block_params(64, false, 16), 73_856);
    assert_eq!(block_params(64, true, 16), 74_436);
    assert_eq!(group_params(64, 3, false, 16), 258_496);
    assert_eq!(group_params(64, 20, true, 16), 1_525_648);
}

#[test]
fn toggling_ca_changes_only_the_ca_term() {
    for (g, b, c) in [(5, 3, 64), (3, 2, 32), (10, 20, 64)] {
        let off = ModelConfig {
            groups: g,
            blocks: b,
            channels: c,
            ..ModelConfig::default()
        };
        let on = ModelConfig { use_ca: true, ..off };
        let r = 16;
        let delta = g * b * (c * c * 2 / r + c / r + c);
        assert_eq!(param_count(&on) - param_count(&off), delta);
        let (a, b) = (init_params(&off, 0).unwrap(), init_params(&on, 0).unwrap());
        let non_ca: Vec<_> = b.iter().filter(|(k, _)| !k.contains(".ca.")).map(|(k, v)| (k.clone(), v.shape())).collect();
        let all_off: Vec<_> = a.iter().map(|(k, v)| (k.clone(), v.shape())).collect();
        assert_eq!(non_ca, all_off);
    }
}

#[test]
fn weights_are_3x3_except_ca() {
    let store = init_params(&ModelConfig::rcan(3, 2).with_multifan(), 0).unwrap();
    for (k, v) in store.iter().filter(|(k, _)| k.ends_with(".weight")) {
        let s = v.shape();
        if k.contains(".ca.") {
            assert_eq!((s.h, s.w), (1, 1), "{k}");
        } else {
            assert_eq!((s.h, s.w), (3, 3), "{k}");
        }
    }
}

#[test]
fn zero_parameters_give_identity_units() {
    let cfg = ModelConfig {
        channels: 16,
        use_ca: true,
        ..ModelConfig::default()
    };
    let mut store = init_params(&cfg, 2).unwrap();
    store.zero_under("rg1.");
    let mut g = Eager;
    let p = store.bind(&mut g);
    let f = g.input(rand_input(Shape::new(1, 16, 8, 8), 3));
    let rb = layers::residual_block(&mut g, &p, "rg1.rb1", &f, true).unwrap();
    assert_eq!(rb.data(), f.data());
    let rg = layers::residual_group(&mut g, &p, "rg1", &f, cfg.blocks, true).unwrap();
    assert_eq!(rg.data(), f.data());
}

#[test]
fn channel_attention_bounds() {
    let cfg = ModelConfig {
        channels: 16,
        use_ca: true,
        ..ModelConfig::default()
    };
    let mut store = init_params(&cfg, 5).unwrap();
    let mut g = Eager;
    {
        let p = store.bind(&mut g);
        let u = g.input(Tensor::uniform(Shape::new(2, 16, 5, 5), -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let out = layers::channel_attention(&mut g, &p, "rg1.rb1.ca", &u).unwrap();
        for (o, x) in out.data().iter().zip(u.data()) {
            assert!(o.abs() <= x.abs());
        }
        let zero = g.input(Tensor::zeros(Shape::new(1, 16, 3, 3)));
        let out = layers::channel_attention(&mut g, &p, "rg1.rb1.ca", &zero).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
    store.zero_under("rg1.rb1.ca");
    let p = store.bind(&mut g);
    let u = g.input(rand_input(Shape::new(1, 16, 4, 4), 9));
    let out = layers::channel_attention(&mut g, &p, "rg1.rb1.ca", &u).unwrap();
    for (o, x) in out.data().iter().zip(u.data()) {
        assert_eq!(*o, 0.5 * x);
    }
}

#[test]
fn zero_backbone_gives_long_skip_identity() {
    let cfg = ModelConfig {
        groups: 3,
        blocks: 2,
        channels: 16,
        use_ca: true,
        use_multifan: true,
        ..ModelConfig::default()
    };
    let mut model = Model::build(cfg, 4).unwrap();
    for i in 1..=3 {
        model.params.zero_under(&format!("rg{i}."));
    }
    model.params.zero_under("body.");
    let x = rand_input(Shape::new(1, 1, 8, 12), 1);
    let out = model.infer(&x).unwrap();
    let mut g = Eager;
    let p = model.params.bind(&mut g);
    let xi = g.input(x);
    let f0 = layers::conv(&mut g, &p, "head", &xi, 1).unwrap();
    assert_eq!(out.f_final.data(), f0.data());
}

#[test]
fn output_shapes_and_contract_errors() {
    let model = Model::build(ModelConfig { groups: 3, blocks: 1, channels: 8, ca_reduction: 4, use_ca: true, use_multifan: true, ..ModelConfig::default() }, 0).unwrap();
    let out = model.infer(&rand_input(Shape::new(2, 1, 8, 4), 0)).unwrap();
    for head in out.heads() {
        assert_eq!(head.shape(), Shape::new(2, 1, 24, 12));
    }
    assert_eq!(out.rg_features.len(), 3);
    assert!(matches!(model.infer(&rand_input(Shape::new(1, 1, 6, 8), 0)), Err(Error::Contract(_))));
    assert!(model.infer(&rand_input(Shape::new(1, 2, 8, 8), 0)).is_err());
}

#[test]
fn aggregation_width_is_g_minus_one_times_c() {
    for g in [3, 5, 10] {
        let cfg = ModelConfig {
            groups: g,
            blocks: 1,
            channels: 8,
            ca_reduction: 4,
            use_multifan: true,
            ..ModelConfig::default()
        };
        let model = Model::build(cfg, 0).unwrap();
        let out = model.infer(&rand_input(Shape::new(1, 1, 4, 4), 0)).unwrap();
        assert_eq!(out.aggregate.unwrap().shape().c, (g - 1) * 8);
    }
}

#[test]
fn head_is_independent_of_backbone_output() {
    let with = Model::build(ModelConfig::rirn(3, 1).with_multifan(), 7).unwrap();
    let mut backbone = ParamStore::new();
    for (k, v) in with.params.iter() {
        if !k.starts_with("mfan.") && !k.starts_with("merge.") {
            backbone.insert(k.clone(), v.clone()).unwrap();
        }
    }
    let without = Model::from_parts(ModelConfig::rirn(3, 1), backbone).unwrap();
    let x = rand_input(Shape::new(1, 1, 8, 8), 2);
    assert_eq!(with.infer(&x).unwrap().sr1, without.infer(&x).unwrap().sr1);
}

#[test]
fn every_parameter_receives_gradient() {
    let cfg = ModelConfig {
        groups: 3,
        blocks: 2,
        channels: 16,
        use_ca: true,
        // a one-unit bottleneck can sit entirely in the dead ReLU region
        ca_reduction: 4,
        use_multifan: true,
        ..ModelConfig::default()
    };
    let model = Model::build(cfg, 11).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape);
    let x = tape.input(rand_input(Shape::new(2, 1, 8, 8), 1));
    let y = tape.input(rand_input(Shape::new(2, 1, 24, 24), 2));
    let out = model.forward(&mut tape, &p, &x).unwrap();
    let loss = msfan_core::loss::total_loss(&mut tape, &Default::default(), &out, &y).unwrap();
    let grads = tape.backward(loss).unwrap();
    for (name, v) in p.iter() {
        let g = grads.get(*v).unwrap_or_else(|| panic!("no gradient for {name}"));
        assert!(g.data().iter().any(|&x| x != 0.0), "zero gradient for {name}");
    }
}

#[test]
fn activation_scale_stays_sane() {
    let model = Model::build(ModelConfig::rirn(5, 3), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // unit-variance input
    let x = Tensor::uniform(Shape::new(1, 1, 32, 32), -3f64.sqrt(), 3f64.sqrt(), &mut rng);
    let out = model.infer(&x).unwrap();
    for (i, f) in out.rg_features.iter().enumerate() {
        let s = f.std();
        assert!((0.1..=10.0).contains(&s), "RG{} std {s}", i + 1);
    }
}

#[test]
fn init_is_deterministic() {
    let cfg = ModelConfig::rcan(3, 1);
    assert_eq!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 5).unwrap());
    assert_ne!(init_params(&cfg, 5).unwrap(), init_params(&cfg, 6).unwrap());
}

#[test]
fn flop_ordering_and_closed_forms() {
    let shape = Shape::new(1, 1, 320, 640);
    // layer-by-layer oracle for RIRN(1, 1) on 320x640
    let hw = 320 * 640u64;
    let oracle = hw * 64 * 9 // head conv3x3(1->64)
        + 3 * hw * 64 * 64 * 9 // block conv1, conv2, group conv
        + hw * 64 * 64 * 9 // body
        + hw * 64 * 64 * 9 // tail convT, k = s = 3
        + 9 * hw * 64 * 9; // tail out on the 960x1920 grid
    assert_eq!(hw * 64 * 9, 117_964_800);
    assert_eq!(count_flops(&ModelConfig::rirn(1, 1), shape), oracle);
    for (g, b) in [(5, 3), (10, 20), (3, 1)] {
        let rirn = ModelConfig::rirn(g, b);
        let rcan = ModelConfig::rcan(g, b);
        let mf = rirn.with_multifan();
        assert!(count_flops(&rirn, shape) < count_flops(&rcan, shape));
        assert_eq!(count_flops(&mf, shape), backbone_flops(&mf, shape) + head_flops(&mf, shape));
        assert_eq!(backbone_flops(&mf, shape), count_flops(&rirn, shape));
        assert!(head_flops(&mf, shape) > 0);
    }
}

#[test]
fn small_rirn_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        groups: 2,
        blocks: 1,
        channels: 4,
        ..ModelConfig::default()
    };
    let model = Model::build(cfg, 5).unwrap();
    let x = rand_input(Shape::new(1, 1, 8, 8), 6);
    let y = rand_input(Shape::new(1, 1, 24, 24), 7);
    let loss = |params: &ParamStore| {
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.input(x.clone());
        let yv = tape.input(y.clone());
        let sr1 = model.forward(&mut tape, &p, &xv).unwrap().sr1;
        let l = tape.smooth_l1(&sr1, &yv).unwrap();
        (tape, p, l)
    };
    let (tape, p, l) = loss(&model.params);
    let mut grads = tape.backward(l).unwrap();
    let analytic: Vec<(String, Tensor)> = p.iter().map(|(k, v)| (k.clone(), grads.take(*v).unwrap())).collect();

    // near the cube-root-of-epsilon optimum for central differences
    let h = 1e-5;
    let value = |params: &ParamStore| {
        let (tape, _, l) = loss(params);
        tape.value(&l).data()[0]
    };
    let mut params = model.params.clone();
    for (name, an) in &analytic {
        for i in 0..an.len() {
            let orig = params.get(name).unwrap().data()[i];
            params.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = value(&params);
            params.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = value(&params);
            params.get_mut(name).unwrap().data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * h);
            let a = an.data()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-4, "{name}[{i}]: analytic {a:e}, fd {fd:e}");
        }
    }
}
