//! `msfan`: dataset synthesis, format conversion, training, evaluation,
//! parameter audit and inference benchmarking.
//!
//! Reports go to stdout as one JSON object per line. Failures print a single
//! `error: <CODE>: <message>` line to stderr and exit with 2 (config),
//! 3 (I/O) or 4 (contract violation).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{value_parser, Arg, ArgMatches, Command};
use msfan_core::checkpoint::Checkpoint;
use msfan_core::config::RunConfig;
use msfan_core::cubefile::{cube_as_mosaic, load_cube, mosaic_as_cube, save_cube};
use msfan_core::dataset::{synth_dataset, Dataset, Split};
use msfan_core::metrics::{Aggregate, MeanStd};
use msfan_core::model::count_flops;
use msfan_core::mosaic::{cube_to_mosaic, mosaic_to_cube, MosaicLayout};
use msfan_core::train::{evaluate, evaluate_bicubic, kfold_split, train, BEST_CKPT};
use msfan_core::{Error, Model, ModelConfig, Result, Shape, Tensor};
use serde_json::{json, Value};

fn emit(v: &Value) {
    println!("{v}");
}

fn db(v: f64) -> Value {
    if v.is_infinite() {
        json!(if v > 0.0 { "inf" } else { "-inf" })
    } else {
        json!(v)
    }
}

fn mean_std(m: &MeanStd) -> Value {
    json!({ "mean": db(m.mean), "std": m.std })
}

fn aggregate(a: &Aggregate) -> Value {
    json!({ "count": a.count, "psnr_db": mean_std(&a.psnr_db), "ssim": mean_std(&a.ssim) })
}

// ---------------------------------------------------------------------------
// Command-line surface.

/// `--config` plus one flag per configuration key.
fn with_config_flags(cmd: Command) -> Command {
    let cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help("TOML run configuration; flags below override its keys"),
    );
    RunConfig::keys().into_iter().fold(cmd, |cmd, key| {
        let flag = RunConfig::flag_for_key(&key);
        cmd.arg(
            Arg::new(flag.clone())
                .long(flag)
                .value_name("VALUE")
                .help(format!("override `{key}`")),
        )
    })
}

fn cli() -> Command {
    Command::new("msfan")
        .about("Multi-spectral mosaic super-resolution (RCAN / RIRN / Multi-FAN)")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("synth")
                .about("Generate a synthetic HR/LR dataset with a train/val/test manifest")
                .arg(Arg::new("count").long("count").required(true).value_parser(value_parser!(usize)).help("number of samples"))
                .arg(Arg::new("dims").long("dims").default_value("240x480").help("HR cube size HxW; both multiples of 12"))
                .arg(Arg::new("seed").long("seed").default_value("0").value_parser(value_parser!(u64)).help("generator seed"))
                .arg(Arg::new("out").long("out").required(true).value_parser(value_parser!(PathBuf)).help("output directory")),
        )
        .subcommand(
            Command::new("convert")
                .about("Convert a 14-band cube file to a mosaic or a mosaic back to a cube")
                .arg(Arg::new("in").long("in").required(true).value_parser(value_parser!(PathBuf)).help("input .msic file; 1 channel means mosaic"))
                .arg(Arg::new("layout").long("layout").value_parser(value_parser!(PathBuf)).help("4x4 layout table file (default built-in)"))
                .arg(Arg::new("out").long("out").required(true).value_parser(value_parser!(PathBuf)).help("output .msic file")),
        )
        .subcommand(
            with_config_flags(Command::new("train").about("Train on the train split, selecting on the val split"))
                .arg(Arg::new("resume").long("resume").value_name("CHECKPOINT").value_parser(value_parser!(PathBuf)).help("continue from a checkpoint with training state")),
        )
        .subcommand(
            Command::new("eval")
                .about("Per-image PSNR/SSIM of a checkpoint on one split, plus the bicubic baseline")
                .arg(Arg::new("checkpoint").long("checkpoint").required(true).value_parser(value_parser!(PathBuf)).help("checkpoint file"))
                .arg(Arg::new("dataset").long("dataset").required(true).value_parser(value_parser!(PathBuf)).help("dataset directory"))
                .arg(Arg::new("split").long("split").default_value("test").value_parser(["train", "val", "test"]).help("split to evaluate"))
                .arg(Arg::new("layout").long("layout").value_parser(value_parser!(PathBuf)).help("4x4 layout table file (default built-in)")),
        )
        .subcommand(
            with_config_flags(Command::new("kfold").about("k-fold cross-validation over train+val; fold 0 is the original split"))
                .arg(Arg::new("k").long("k").default_value("11").value_parser(value_parser!(usize)).help("number of folds")),
        )
        .subcommand(with_config_flags(
            Command::new("params").about("Exact parameter counts of RCAN, RIRN and RIRN+Multi-FAN at the configured size"),
        ))
        .subcommand(
            with_config_flags(Command::new("bench").about("Inference wall time and multiply-accumulate count per variant"))
                .arg(Arg::new("shape").long("shape").default_value("64x64").help("LR mosaic input HxW (multiples of 4)"))
                .arg(Arg::new("repeats").long("repeats").default_value("5").value_parser(value_parser!(usize)).help("timed runs after one warmup"))
                .arg(Arg::new("seed").long("seed").default_value("0").value_parser(value_parser!(u64)).help("seed for weights and input")),
        )
}

fn parse_dims(text: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("expected HxW, got {text:?}"));
    let (h, w) = text.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn run_config(m: &ArgMatches) -> Result<RunConfig> {
    let base = match m.get_one::<PathBuf>("config") {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let keys = RunConfig::keys();
    let overrides: Vec<(&str, &str)> = keys
        .iter()
        .filter_map(|k| {
            m.get_one::<String>(&RunConfig::flag_for_key(k))
                .map(|v| (k.as_str(), v.as_str()))
        })
        .collect();
    base.with_overrides(overrides)
}

fn layout_from(path: Option<&PathBuf>) -> Result<MosaicLayout> {
    match path {
        None => Ok(MosaicLayout::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            MosaicLayout::parse(&text)
        }
    }
}

fn require_path<'a>(value: &'a str, key: &str) -> Result<&'a Path> {
    if value.is_empty() {
        return Err(Error::Config(format!(
            "`{key}` is not set (use --{})",
            RunConfig::flag_for_key(key)
        )));
    }
    Ok(Path::new(value))
}

// ---------------------------------------------------------------------------
// Commands.

fn cmd_synth(m: &ArgMatches) -> Result<()> {
    let count = *m.get_one::<usize>("count").expect("required");
    let (h, w) = parse_dims(m.get_one::<String>("dims").expect("defaulted"))?;
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let out = m.get_one::<PathBuf>("out").expect("required");
    let manifest = synth_dataset(count, h, w, seed, out)?;
    emit(&json!({
        "out": out.display().to_string(),
        "count": count,
        "hr_dims": [manifest.bands, h, w],
        "train": manifest.ids(Split::Train).len(),
        "val": manifest.ids(Split::Val).len(),
        "test": manifest.ids(Split::Test).len(),
    }));
    Ok(())
}

fn cmd_convert(m: &ArgMatches) -> Result<()> {
    let input = m.get_one::<PathBuf>("in").expect("required");
    let out = m.get_one::<PathBuf>("out").expect("required");
    let layout = layout_from(m.get_one::<PathBuf>("layout"))?;
    let file = load_cube(input)?;
    let (direction, result) = if file.channels == 1 {
        let cube = mosaic_to_cube(&cube_as_mosaic(&file)?, &layout)?;
        ("mosaic_to_cube", cube)
    } else {
        ("cube_to_mosaic", mosaic_as_cube(&cube_to_mosaic(&file, &layout)?))
    };
    save_cube(&result, out)?;
    emit(&json!({
        "direction": direction,
        "in": file.dims(),
        "out": result.dims(),
        "path": out.display().to_string(),
    }));
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let dataset = Dataset::open(require_path(&cfg.paths.dataset, "paths.dataset")?)?;
    let out = require_path(&cfg.paths.out, "paths.out")?;
    let resume = m.get_one::<PathBuf>("resume").map(Checkpoint::load).transpose()?;
    let train_ids = dataset.manifest.ids(Split::Train);
    let val_ids = dataset.manifest.ids(Split::Val);
    let summary = train(&cfg, &dataset, &train_ids, &val_ids, out, resume)?;
    let last = summary.records.last();
    emit(&json!({
        "run": cfg.model.label(),
        "epochs": last.map(|r| r.epoch),
        "steps": last.map(|r| r.step),
        "final_loss": last.map(|r| r.loss),
        "best_val_psnr": summary.best_val_psnr.map(db),
        "last": summary.last.display().to_string(),
        "best": summary.best.display().to_string(),
    }));
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let ck = Checkpoint::load(m.get_one::<PathBuf>("checkpoint").expect("required"))?;
    let dataset = Dataset::open(m.get_one::<PathBuf>("dataset").expect("required"))?;
    let layout = layout_from(m.get_one::<PathBuf>("layout"))?;
    let split = match m.get_one::<String>("split").expect("defaulted").as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    };
    let ids = dataset.manifest.ids(split);
    if ids.is_empty() {
        return Err(Error::Config(format!("split {split:?} is empty")));
    }
    let (reports, agg) = evaluate(&ck.model, &dataset, &ids, &layout)?;
    for r in &reports {
        emit(&serde_json::to_value(r).expect("reports serialize"));
    }
    let (_, bicubic) = evaluate_bicubic(&dataset, &ids)?;
    emit(&json!({
        "model": ck.model.config.label(),
        "aggregate": aggregate(&agg),
        "bicubic": aggregate(&bicubic),
    }));
    Ok(())
}

fn cmd_kfold(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let k = *m.get_one::<usize>("k").expect("defaulted");
    let dataset = Dataset::open(require_path(&cfg.paths.dataset, "paths.dataset")?)?;
    let out = require_path(&cfg.paths.out, "paths.out")?;
    let layout = cfg.layout()?;
    let original = dataset.manifest.ids(Split::Val);
    let mut pool = dataset.manifest.ids(Split::Train);
    pool.extend(original.iter().cloned());
    let folds = kfold_split(&pool, k, cfg.train.seed, Some(&original))?;
    let mut psnrs = Vec::with_capacity(k);
    let mut ssims = Vec::with_capacity(k);
    for (i, fold) in folds.iter().enumerate() {
        let dir = out.join(format!("fold{i:02}"));
        train(&cfg, &dataset, &fold.train, &fold.val, &dir, None)?;
        let best = Checkpoint::load(dir.join(BEST_CKPT))?;
        let (_, agg) = evaluate(&best.model, &dataset, &fold.val, &layout)?;
        psnrs.push(agg.psnr_db.mean);
        ssims.push(agg.ssim.mean);
        emit(&json!({
            "fold": i,
            "val_count": fold.val.len(),
            "psnr_db": db(agg.psnr_db.mean),
            "ssim": agg.ssim.mean,
        }));
    }
    emit(&json!({
        "run": cfg.model.label(),
        "folds": k,
        "psnr_db": mean_std(&MeanStd::of(&psnrs)),
        "ssim": mean_std(&MeanStd::of(&ssims)),
    }));
    Ok(())
}

/// RCAN, RIRN and RIRN+Multi-FAN sharing the configured size.
fn variants(cfg: &ModelConfig) -> [ModelConfig; 3] {
    let rirn = ModelConfig {
        use_ca: false,
        use_multifan: false,
        ..*cfg
    };
    [
        ModelConfig { use_ca: true, ..rirn },
        rirn,
        ModelConfig {
            use_multifan: true,
            ..rirn
        },
    ]
}

/// Millions, truncated (not rounded) to two decimals.
fn millions(n: usize) -> String {
    let hundredths = n / 10_000;
    format!("{}.{:02}M", hundredths / 100, hundredths % 100)
}

fn cmd_params(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    for v in variants(&cfg.model) {
        v.validate()?;
        let n = v.param_count();
        emit(&json!({
            "model": v.label(),
            "groups": v.groups,
            "blocks": v.blocks,
            "channels": v.channels,
            "params": n,
            "millions": millions(n),
        }));
    }
    Ok(())
}

fn cmd_bench(m: &ArgMatches) -> Result<()> {
    let cfg = run_config(m)?;
    let (h, w) = parse_dims(m.get_one::<String>("shape").expect("defaulted"))?;
    let repeats = (*m.get_one::<usize>("repeats").expect("defaulted")).max(1);
    let seed = *m.get_one::<u64>("seed").expect("defaulted");
    let shape = Shape::new(1, 1, h, w);
    let input = {
        use rand::SeedableRng;
        Tensor::uniform(shape, 0.0, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    };
    for v in variants(&cfg.model) {
        let model = Model::build(v, seed)?;
        model.predict(&input)?;
        let mut times: Vec<f64> = (0..repeats)
            .map(|_| {
                let t = Instant::now();
                model.predict(&input).map(|_| t.elapsed().as_secs_f64())
            })
            .collect::<Result<_>>()?;
        times.sort_by(f64::total_cmp);
        emit(&json!({
            "model": v.label(),
            "shape": [h, w],
            "params": v.param_count(),
            "macs": count_flops(&v, shape),
            "repeats": repeats,
            "median_s": times[times.len() / 2],
            "min_s": times[0],
        }));
    }
    Ok(())
}

fn dispatch(m: &ArgMatches) -> Result<()> {
    match m.subcommand() {
        Some(("synth", s)) => cmd_synth(s),
        Some(("convert", s)) => cmd_convert(s),
        Some(("train", s)) => cmd_train(s),
        Some(("eval", s)) => cmd_eval(s),
        Some(("kfold", s)) => cmd_kfold(s),
        Some(("params", s)) => cmd_params(s),
        Some(("bench", s)) => cmd_bench(s),
        _ => unreachable!("subcommand_required"),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("bad arguments");
            eprintln!("error: E_CONFIG: {}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    match dispatch(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.class();
            eprintln!("error: {}: {}", class.tag(), one_line(&e.to_string()));
            ExitCode::from(class.exit_code() as u8)
        }
    }
}
