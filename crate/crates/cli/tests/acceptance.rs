//! Acceptance criteria 1-9, one PASS/FAIL line each.
//!
//! The lines go to stderr even under output capture; the test fails if any
//! criterion fails.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use msfan_core::checkpoint::Checkpoint;
use msfan_core::config::RunConfig;
use msfan_core::dataset::{synth_dataset, Dataset, Split};
use msfan_core::loss::{total_loss, LossBase, LossSpec};
use msfan_core::metrics::{psnr, psnr_live_mosaic, ssim_per_channel};
use msfan_core::model::{backbone_flops, count_flops, head_flops};
use msfan_core::mosaic::{cube_to_mosaic, mosaic_to_cube, MosaicLayout, SpectralCube, BANDS};
use msfan_core::train::{evaluate, evaluate_bicubic, kfold_split, train, LAST_CKPT, BEST_CKPT};
use msfan_core::{Graph, Model, ModelConfig, ParamStore, Shape, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn msfan(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_msfan")).args(args).output().expect("binary runs")
}

fn json_lines(out: &[u8]) -> Vec<Value> {
    String::from_utf8_lossy(out).lines().map(|l| serde_json::from_str(l).expect("json line")).collect()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_cube(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> SpectralCube {
    SpectralCube::new(c, h, w, (0..c * h * w).map(|_| rng.gen()).collect()).unwrap()
}

// 1 -------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let cases = [(5, 3, [1_376_253, 1_367_553, 1_533_845], [1.37, 1.36, 1.54]), (10, 20, [15_331_553, 15_215_553, 15_566_165], [15.33, 15.21, 15.57])];
    let mut worst = 0.0f64;
    for (g, b, exact, published) in cases {
        let out = msfan(&["params", "--model-groups", &g.to_string(), "--model-blocks", &b.to_string()]);
        if !out.status.success() {
            return Err(String::from_utf8_lossy(&out.stderr).into_owned());
        }
        let rows = json_lines(&out.stdout);
        for ((row, want), m) in rows.iter().zip(exact).zip(published) {
            let got = row["params"].as_u64().unwrap() as usize;
            let registry = ModelConfig {
                use_ca: row["model"].as_str().unwrap().starts_with("RCAN"),
                use_multifan: row["model"].as_str().unwrap().ends_with("Multi-FAN"),
                ..ModelConfig::rirn(g, b)
            }
            .param_count();
            if got != want || registry != want {
                return Err(format!("{} g={g} b={b}: cli {got}, registry {registry}, expected {want}", row["model"]));
            }
            worst = worst.max((got as f64 / 1e6 - m).abs() / m);
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(worst <= 0.01 && secs < 1.0, format!("six exact counts; max deviation from published millions {:.2}%; {secs:.2}s", 100.0 * worst))
}

// 2 -------------------------------------------------------------------------

fn loss_specs() -> [(&'static str, LossSpec); 3] {
    [
        ("smooth_l1", LossSpec::default()),
        (
            "log_l1",
            LossSpec {
                log_scale: true,
                ..LossSpec::default()
            },
        ),
        (
            "ssim",
            LossSpec {
                base: LossBase::Ssim,
                ..LossSpec::default()
            },
        ),
    ]
}

/// Loss value of each spec for the given parameters.
fn losses_at(model: &Model, params: &ParamStore, x: &Tensor, y: &Tensor) -> [f64; 3] {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.input(x.clone());
    let yv = tape.input(y.clone());
    let out = model.forward(&mut tape, &p, &xv).unwrap();
    loss_specs().map(|(_, spec)| {
        let l = total_loss(&mut tape, &spec, &out, &yv).unwrap();
        tape.value(&l).data()[0]
    })
}

fn criterion_2() -> Outcome {
    let cfg = ModelConfig {
        groups: 3,
        blocks: 1,
        channels: 8,
        ca_reduction: 4,
        use_multifan: true,
        ..ModelConfig::default()
    };
    let model = Model::build(cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let x = Tensor::uniform(Shape::new(1, 1, 12, 12), 0.0, 1.0, &mut rng);
    let y = Tensor::uniform(Shape::new(1, 1, 36, 36), 0.0, 1.0, &mut rng);

    let analytic: Vec<_> = loss_specs()
        .iter()
        .map(|(_, spec)| {
            let mut tape = Tape::new();
            let p = model.params.bind(&mut tape);
            let xv = tape.input(x.clone());
            let yv = tape.input(y.clone());
            let out = model.forward(&mut tape, &p, &xv).unwrap();
            let l = total_loss(&mut tape, spec, &out, &yv).unwrap();
            let mut grads = tape.backward(l).unwrap();
            p.iter().map(|(k, v)| (k.clone(), grads.take(*v).unwrap())).collect::<Vec<_>>()
        })
        .collect();

    // The network is piecewise linear through its ReLUs; steps of 1e-5 already
    // cross kinks for some weights, so stay at 1e-6 and accept its roundoff
    // (about 1e-9 absolute on these losses).
    let h = 1e-6;
    // per loss: worst tensor-level relative error and the tensor it came from
    let mut worst = [(0.0f64, String::new()), (0.0, String::new()), (0.0, String::new())];
    let mut worst_scalar = [0.0f64; 3];
    let mut checked = 0usize;
    let mut params = model.params.clone();
    let names: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
    for (pi, name) in names.iter().enumerate() {
        let n = model.params.get(name).unwrap().len();
        let (mut diff, mut an_sq, mut fd_sq) = ([0.0f64; 3], [0.0f64; 3], [0.0f64; 3]);
        for i in 0..n {
            let orig = params.get(name).unwrap().data()[i];
            params.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let plus = losses_at(&model, &params, &x, &y);
            params.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let minus = losses_at(&model, &params, &x, &y);
            params.get_mut(name).unwrap().data_mut()[i] = orig;
            for s in 0..3 {
                let fd = (plus[s] - minus[s]) / (2.0 * h);
                let an = analytic[s][pi].1.data()[i];
                diff[s] += (an - fd).powi(2);
                an_sq[s] += an * an;
                fd_sq[s] += fd * fd;
                let floor = 1e-5;
                worst_scalar[s] = worst_scalar[s].max((an - fd).abs() / an.abs().max(fd.abs()).max(floor));
            }
            checked += 1;
        }
        for s in 0..3 {
            let scale = an_sq[s].sqrt().max(fd_sq[s].sqrt());
            let rel = if scale == 0.0 { 0.0 } else { diff[s].sqrt() / scale };
            if rel > worst[s].0 {
                worst[s] = (rel, name.clone());
            }
        }
    }
    let labels = loss_specs().map(|(n, _)| n);
    let per_loss: Vec<String> = (0..3)
        .map(|s| format!("{}={:.1e} at {}", labels[s], worst[s].0, worst[s].1))
        .collect();
    let detail = format!(
        "{checked} scalars in {} tensors, h=1e-6; max per-tensor rel err {}; per-scalar info (denominator floor 1e-5): {:.1e}/{:.1e}/{:.1e}",
        names.len(),
        per_loss.join(", "),
        worst_scalar[0],
        worst_scalar[1],
        worst_scalar[2]
    );
    check(worst.iter().all(|w| w.0 < 1e-4), detail)
}

// 3 -------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layout = MosaicLayout::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let cube = random_cube(BANDS, h, w, &mut rng);
        let mosaic = cube_to_mosaic(&cube, &layout).unwrap();
        let back = mosaic_to_cube(&mosaic, &layout).unwrap();
        if back.data.iter().zip(&cube.data).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err("round trip is not bit-identical".into());
        }
        let other = random_cube(BANDS, h, w, &mut rng);
        let om = cube_to_mosaic(&other, &layout).unwrap();
        let a = psnr(&cube, &other, 1.0).unwrap();
        let b = psnr_live_mosaic(&mosaic, &om, &layout, 1.0).unwrap();
        worst = worst.max((a - b).abs());
    }
    check(worst < 1e-10, format!("100 cubes bit-identical; max |PSNR_cube - PSNR_live| {worst:.1e} dB"))
}

// 4 -------------------------------------------------------------------------

/// Steps used by the overfit run (one step per epoch: two images, batch 2).
const OVERFIT_STEPS: usize = 2000;

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let data = tempfile::tempdir().unwrap();
    synth_dataset(2, 48, 96, 7, data.path()).unwrap();
    let ds = Dataset::open(data.path()).unwrap();
    let ids = ds.manifest.ids(Split::Train);
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig {
        groups: 3,
        blocks: 1,
        channels: 16,
        use_multifan: true,
        ..ModelConfig::default()
    };
    cfg.train.batch_size = 2;
    cfg.train.crop_lr = 48;
    cfg.train.epochs = OVERFIT_STEPS;
    cfg.train.lr0 = 2e-3;
    cfg.train.halve_every = 600;
    // memorizing two images: no rotation or flip
    cfg.train.rotation_p = 0.0;
    cfg.train.hflip_p = 0.0;
    let out = tempfile::tempdir().unwrap();
    let summary = train(&cfg, &ds, &ids, &[], out.path(), None).map_err(|e| e.to_string())?;
    let model = Checkpoint::load(&summary.last).unwrap().model;
    let (_, net) = evaluate(&model, &ds, &ids, &cfg.layout().unwrap()).unwrap();
    let (_, bic) = evaluate_bicubic(&ds, &ids).unwrap();
    let gain = net.psnr_db.mean - bic.psnr_db.mean;
    check(
        gain >= 1.0,
        format!(
            "{OVERFIT_STEPS} steps: model {:.2} dB vs bicubic {:.2} dB (gain {gain:+.2} dB); {:.0}s",
            net.psnr_db.mean,
            bic.psnr_db.mean,
            t.elapsed().as_secs_f64()
        ),
    )
}

// 5 -------------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let cfg = ModelConfig {
        groups: 3,
        blocks: 1,
        channels: 8,
        ca_reduction: 4,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::uniform(Shape::new(2, 1, 8, 8), 0.0, 1.0, &mut rng);
    let y = Tensor::uniform(Shape::new(2, 1, 24, 24), 0.0, 1.0, &mut rng);
    let plain = LossSpec::default();
    let logged = LossSpec {
        log_scale: true,
        ..plain
    };
    let mut values = Vec::with_capacity(50);
    let mut worst_spread = 0.0f64;
    for c in 0..50 {
        let model = Model::build(cfg, 1000 + c).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape);
        let xv = tape.input(x.clone());
        let yv = tape.input(y.clone());
        let out = model.forward(&mut tape, &p, &xv).unwrap();
        let l1 = total_loss(&mut tape, &plain, &out, &yv).unwrap();
        let lg = total_loss(&mut tape, &logged, &out, &yv).unwrap();
        let (v1, vg) = (tape.value(&l1).data()[0], tape.value(&lg).data()[0]);
        values.push((v1, vg));
        let mut g1 = tape.backward(l1).unwrap();
        let mut gg = tape.backward(lg).unwrap();
        let expected = 1.0 / ((v1 + plain.epsilon) * std::f64::consts::LN_10);
        for (_, v) in p.iter() {
            let (a, b) = (gg.take(*v).unwrap(), g1.take(*v).unwrap());
            for (ga, gb) in a.data().iter().zip(b.data()) {
                if *gb != 0.0 {
                    worst_spread = worst_spread.max((ga / gb - expected).abs() / expected);
                }
            }
        }
    }
    let argmin = |f: fn(&(f64, f64)) -> f64| (0..values.len()).min_by(|&i, &j| f(&values[i]).total_cmp(&f(&values[j]))).unwrap();
    let (a, b) = (argmin(|v| v.0), argmin(|v| v.1));
    check(
        a == b && worst_spread < 1e-8,
        format!("argmin L1 = candidate {a}, argmin log = candidate {b}; max gradient-ratio deviation {worst_spread:.1e}"),
    )
}

// 6 -------------------------------------------------------------------------

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::uniform(Shape::new(1, 1, 8, 8), 0.0, 1.0, &mut rng);
    let mut widths = Vec::new();
    for g in [3, 5, 10] {
        let cfg = ModelConfig {
            groups: g,
            blocks: 1,
            channels: 16,
            use_multifan: true,
            ..ModelConfig::default()
        };
        let with = Model::build(cfg, g as u64).unwrap();
        let out = with.infer(&x).unwrap();
        let c = out.aggregate.as_ref().unwrap().shape().c;
        if c != (g - 1) * 16 {
            return Err(format!("g={g}: aggregation has {c} channels"));
        }
        widths.push(c);
        let mut backbone = ParamStore::new();
        for (k, v) in with.params.iter().filter(|(k, _)| !k.starts_with("mfan.") && !k.starts_with("merge.")) {
            backbone.insert(k.clone(), v.clone()).unwrap();
        }
        let without = Model::from_parts(ModelConfig { use_multifan: false, ..cfg }, backbone).unwrap();
        let sr1 = without.infer(&x).unwrap().sr1;
        if sr1.data().iter().zip(out.sr1.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("g={g}: SR1 differs without the head"));
        }
    }
    Ok(format!("aggregation widths {widths:?} = (g-1)C for g in [3, 5, 10]; SR1 bit-identical without head"))
}

// 7 -------------------------------------------------------------------------

fn brute_ssim(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = 7;
    let (c1, c2) = (1e-4, 9e-4);
    let n = 49.0;
    let mut total = 0.0;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let at = |img: &[f64], i: usize| img[(y0 + i / k) * w + x0 + i % k];
            let ma = (0..49).map(|i| at(a, i)).sum::<f64>() / n;
            let mb = (0..49).map(|i| at(b, i)).sum::<f64>() / n;
            let va = (0..49).map(|i| (at(a, i) - ma).powi(2)).sum::<f64>() / n;
            let vb = (0..49).map(|i| (at(b, i) - mb).powi(2)).sum::<f64>() / n;
            let cov = (0..49).map(|i| (at(a, i) - ma) * (at(b, i) - mb)).sum::<f64>() / n;
            total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / ((h - k + 1) * (w - k + 1)) as f64
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let a = random_cube(14, 32, 32, &mut rng);
        let b = random_cube(14, 32, 32, &mut rng);
        let fast = ssim_per_channel(&a, &b, 7, 1.0).unwrap();
        for (c, f) in fast.iter().enumerate() {
            worst = worst.max((f - brute_ssim(a.plane(c), b.plane(c), 32, 32)).abs());
        }
        if ssim_per_channel(&a, &a, 7, 1.0).unwrap().iter().any(|&s| s != 1.0) {
            return Err("SSIM(a, a) is not exactly 1".into());
        }
    }
    check(worst < 1e-9, format!("20 pairs; max |fast - brute force| {worst:.1e}; identical inputs exactly 1.0"))
}

// 8 -------------------------------------------------------------------------

fn run_train(data: &Path, out: &Path) -> Result<(), String> {
    let o = msfan(&[
        "train",
        "--paths-dataset",
        data.to_str().unwrap(),
        "--paths-out",
        out.to_str().unwrap(),
        "--model-groups",
        "3",
        "--model-blocks",
        "1",
        "--model-channels",
        "8",
        "--model-ca-reduction",
        "4",
        "--model-use-multifan",
        "true",
        "--train-batch-size",
        "2",
        "--train-crop-lr",
        "16",
        "--train-epochs",
        "3",
        "--train-lr0",
        "1e-3",
        "--train-seed",
        "42",
    ]);
    if o.status.success() {
        Ok(())
    } else {
        Err(String::from_utf8_lossy(&o.stderr).into_owned())
    }
}

fn criterion_8() -> Outcome {
    let data = tempfile::tempdir().unwrap();
    synth_dataset(6, 24, 24, 8, data.path()).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_train(data.path(), a.path())?;
    run_train(data.path(), b.path())?;
    for f in [LAST_CKPT, BEST_CKPT] {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
    }
    let ids: Vec<String> = (0..330).map(|i| format!("{i:04}")).collect();
    let folds = kfold_split(&ids, 11, 42, Some(&ids[300..])).map_err(|e| e.to_string())?;
    let mut all: Vec<&String> = folds.iter().flat_map(|f| &f.val).collect();
    all.sort();
    all.dedup();
    let sizes_ok = folds.len() == 11 && folds.iter().all(|f| f.val.len() == 30 && f.train.len() == 300);
    check(
        sizes_ok && all.len() == 330,
        "two cmd_train runs: last/best checkpoints bit-identical; kfold 11 x 30 partition of 330 ids".into(),
    )
}

// 9 -------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let shape = Shape::new(1, 1, 320, 640);
    let (rirn, rcan) = (ModelConfig::rirn(5, 3), ModelConfig::rcan(5, 3));
    let mf = rirn.with_multifan();
    let (fr, fc, fm) = (count_flops(&rirn, shape), count_flops(&rcan, shape), count_flops(&mf, shape));
    let fm_total = backbone_flops(&mf, shape) + head_flops(&mf, shape);
    if !(fr < fc && fc < fm_total && fm == fm_total) {
        return Err(format!("MACs RIRN {fr}, RCAN {fc}, RIRN+MF {fm}"));
    }
    let o = msfan(&["bench", "--model-groups", "5", "--model-blocks", "3", "--shape", "32x32", "--repeats", "3"]);
    if !o.status.success() {
        return Err(String::from_utf8_lossy(&o.stderr).into_owned());
    }
    let rows = json_lines(&o.stdout);
    let median = |label: &str| rows.iter().find(|r| r["model"] == label).unwrap()["median_s"].as_f64().unwrap();
    let (tr, tc) = (median("RIRN"), median("RCAN"));
    Ok(format!(
        "MACs at 320x640: RIRN {fr} < RCAN {fc} < RIRN+MF {fm}; bench 32x32 median RIRN {tr:.4}s, RCAN {tc:.4}s (logged, {})",
        if tr <= tc { "RIRN faster" } else { "RIRN not faster on this run" }
    ))
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("parameter counts", criterion_1),
        ("gradient correctness", criterion_2),
        ("codec exactness", criterion_3),
        ("overfit beats bicubic", criterion_4),
        ("log-loss argmin preservation", criterion_5),
        ("Multi-FAN wiring", criterion_6),
        ("SSIM oracle equivalence", criterion_7),
        ("determinism", criterion_8),
        ("FLOP/time ordering", criterion_9),
    ];
    // written to the stderr handle directly so the lines survive output capture
    let mut log = std::io::stderr();
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(d) => writeln!(log, "ACCEPTANCE {} {name}: PASS ({d})", i + 1).unwrap(),
            Err(d) => {
                writeln!(log, "ACCEPTANCE {} {name}: FAIL ({d})", i + 1).unwrap();
                failed.push(i + 1);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
