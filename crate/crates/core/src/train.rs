//! ADAM training on mosaic patches, evaluation, and k-fold splitting.
//!
//! Batch composition is a pure function of `(seed, epoch, step)`, so a run
//! can be resumed from a checkpoint and continue bit-identically.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Graph, Tape};
use crate::checkpoint::{AdamState, Checkpoint, TrainState};
use crate::config::RunConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::loss::{total_loss, LossSpec};
use crate::metrics::{Aggregate, MetricReport};
use crate::model::Model;
use crate::mosaic::{bicubic_upsample_cube, cube_to_mosaic, mosaic_to_cube, MosaicImage, MosaicLayout, PATTERN};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Side of the square LR mosaic crop; a multiple of 4.
    pub crop_lr: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Epochs between learning-rate halvings.
    pub halve_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Probability of each of the 90, 180 and 270 degree rotations.
    pub rotation_p: f64,
    pub hflip_p: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Validate (and consider for best-checkpoint selection) every N epochs.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            crop_lr: 60,
            lr0: 1e-4,
            halve_every: 2500,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            rotation_p: 0.25,
            hflip_p: 0.5,
            epochs: 100,
            seed: 0,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.crop_lr == 0 || self.crop_lr % PATTERN != 0 {
            return bad("crop_lr must be a positive multiple of 4");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if self.halve_every == 0 || self.val_every == 0 {
            return bad("halve_every and val_every must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("ADAM betas must lie in [0, 1) and epsilon must be positive");
        }
        if !(0.0..=1.0 / 3.0).contains(&self.rotation_p) || !(0.0..=1.0).contains(&self.hflip_p) {
            return bad("rotation_p must lie in [0, 1/3] and hflip_p in [0, 1]");
        }
        Ok(())
    }
}

/// `lr0 * 0.5^floor(epoch / halve_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * 0.5f64.powi((epoch / cfg.halve_every) as i32)
}

/// One bias-corrected ADAM update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state
            .m
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("no optimizer state for {name}")))?;
        let v = state
            .v
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("no optimizer state for {name}")))?;
        if g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::dim("adam_step", format!("shapes disagree for {name}")));
        }
        let (pd, gd) = (p.data_mut(), g.data());
        let (md, vd) = (m.data_mut(), v.data_mut());
        for i in 0..pd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for a tuple of tags under one run seed.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mixed = tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)));
    ChaCha8Rng::seed_from_u64(mixed)
}

fn sub_image(img: &MosaicImage, y0: usize, x0: usize, h: usize, w: usize) -> MosaicImage {
    let mut data = Vec::with_capacity(h * w);
    for y in y0..y0 + h {
        data.extend_from_slice(&img.data[y * img.width + x0..y * img.width + x0 + w]);
    }
    MosaicImage { height: h, width: w, data }
}

/// Aligned random crop: LR offset `(4i, 4j)`, HR offset `scale` times that,
/// so both patches keep the mosaic phase.
pub fn crop_pair<R: Rng>(
    lr: &MosaicImage,
    hr: &MosaicImage,
    crop_lr: usize,
    scale: usize,
    rng: &mut R,
) -> Result<(MosaicImage, MosaicImage)> {
    if crop_lr % PATTERN != 0 || crop_lr == 0 {
        return Err(Error::Config(format!("crop {crop_lr} is not a positive multiple of 4")));
    }
    if crop_lr > lr.height || crop_lr > lr.width {
        return Err(Error::Contract(format!(
            "crop {crop_lr} exceeds LR mosaic {}x{}",
            lr.height, lr.width
        )));
    }
    if hr.height != lr.height * scale || hr.width != lr.width * scale {
        return Err(Error::Contract("HR mosaic is not scale x LR mosaic".into()));
    }
    let i = rng.gen_range(0..=(lr.height - crop_lr) / PATTERN);
    let j = rng.gen_range(0..=(lr.width - crop_lr) / PATTERN);
    Ok(crop_at(lr, hr, crop_lr, scale, i, j))
}

/// Crop at LR block offset `(i, j)`.
pub fn crop_at(lr: &MosaicImage, hr: &MosaicImage, crop_lr: usize, scale: usize, i: usize, j: usize) -> (MosaicImage, MosaicImage) {
    let (y, x) = (PATTERN * i, PATTERN * j);
    (
        sub_image(lr, y, x, crop_lr, crop_lr),
        sub_image(hr, y * scale, x * scale, crop_lr * scale, crop_lr * scale),
    )
}

/// Element of the dihedral group acting on square patches: rotate by
/// `quarter_turns * 90` degrees counter-clockwise, then optionally mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Transform {
    pub quarter_turns: u8,
    pub hflip: bool,
}

impl Transform {
    pub const IDENTITY: Transform = Transform {
        quarter_turns: 0,
        hflip: false,
    };

    pub fn all() -> impl Iterator<Item = Transform> {
        (0..4).flat_map(|q| [false, true].map(|f| Transform { quarter_turns: q, hflip: f }))
    }

    pub fn sample<R: Rng>(rng: &mut R, cfg: &TrainConfig) -> Self {
        let u: f64 = rng.gen();
        let quarter_turns = if u < cfg.rotation_p {
            1
        } else if u < 2.0 * cfg.rotation_p {
            2
        } else if u < 3.0 * cfg.rotation_p {
            3
        } else {
            0
        };
        let hflip = rng.gen::<f64>() < cfg.hflip_p;
        Transform { quarter_turns, hflip }
    }

    /// Source coordinate that lands at `(y, x)` of an `n x n` output.
    pub fn source(&self, y: usize, x: usize, n: usize) -> (usize, usize) {
        let x = if self.hflip { n - 1 - x } else { x };
        // inverse rotation
        match self.quarter_turns % 4 {
            0 => (y, x),
            1 => (x, n - 1 - y),
            2 => (n - 1 - y, n - 1 - x),
            _ => (n - 1 - x, y),
        }
    }

    pub fn apply(&self, img: &MosaicImage) -> Result<MosaicImage> {
        if img.height != img.width {
            return Err(Error::Contract(format!(
                "rotation needs a square patch, got {}x{}",
                img.height, img.width
            )));
        }
        let n = img.height;
        let mut data = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let (sy, sx) = self.source(y, x, n);
                data.push(img.at(sy, sx));
            }
        }
        Ok(MosaicImage { height: n, width: n, data })
    }
}

/// Same random rotation and flip on both patches of a pair.
pub fn augment<R: Rng>(pair: (MosaicImage, MosaicImage), rng: &mut R, cfg: &TrainConfig) -> Result<(MosaicImage, MosaicImage)> {
    let t = Transform::sample(rng, cfg);
    Ok((t.apply(&pair.0)?, t.apply(&pair.1)?))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Partition `ids` into `k` equal validation folds. When `original_val` is
/// given and has exactly one fold's worth of ids, it becomes fold 0.
pub fn kfold_split(ids: &[String], k: usize, seed: u64, original_val: Option<&[String]>) -> Result<Vec<Fold>> {
    if k < 2 || ids.len() % k != 0 {
        return Err(Error::Config(format!("{k} folds do not divide {} ids", ids.len())));
    }
    let size = ids.len() / k;
    let mut rng = derive_rng(seed, &[0x6b66_6f6c_64]);
    let mut groups: Vec<Vec<String>> = Vec::with_capacity(k);
    let pinned = original_val.filter(|v| v.len() == size && v.iter().all(|id| ids.contains(id)));
    let mut rest: Vec<String> = match pinned {
        Some(v) => {
            groups.push(v.to_vec());
            ids.iter().filter(|id| !v.contains(id)).cloned().collect()
        }
        None => ids.to_vec(),
    };
    rest.shuffle(&mut rng);
    for chunk in rest.chunks(size) {
        groups.push(chunk.to_vec());
    }
    Ok((0..k)
        .map(|f| Fold {
            val: groups[f].clone(),
            train: groups
                .iter()
                .enumerate()
                .filter(|(g, _)| *g != f)
                .flat_map(|(_, v)| v.iter().cloned())
                .collect(),
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Data and steps.

/// Mosaics of a split held in memory.
#[derive(Clone, Debug)]
pub struct MosaicSet {
    pub ids: Vec<String>,
    pub lr: Vec<MosaicImage>,
    pub hr: Vec<MosaicImage>,
}

impl MosaicSet {
    pub fn load(dataset: &Dataset, ids: &[String], layout: &MosaicLayout) -> Result<Self> {
        let mut set = MosaicSet {
            ids: ids.to_vec(),
            lr: Vec::with_capacity(ids.len()),
            hr: Vec::with_capacity(ids.len()),
        };
        for id in ids {
            let (hr, lr) = dataset.load_pair(id)?;
            set.lr.push(cube_to_mosaic(&lr, layout)?);
            set.hr.push(cube_to_mosaic(&hr, layout)?);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn mosaics_to_tensor(items: &[MosaicImage]) -> Result<Tensor> {
    let parts: Vec<Tensor> = items.iter().map(MosaicImage::to_tensor).collect();
    Tensor::stack(&parts)
}

pub fn steps_per_epoch(n: usize, cfg: &TrainConfig) -> usize {
    n.div_ceil(cfg.batch_size)
}

/// Sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive_rng(seed, &[1, epoch as u64]));
    order
}

/// `(lr, hr)` batch tensors for `step` (within `epoch`).
pub fn make_batch(data: &MosaicSet, cfg: &TrainConfig, scale: usize, epoch: usize, step: usize) -> Result<(Tensor, Tensor)> {
    let order = epoch_order(data.len(), cfg.seed, epoch);
    let start = step * cfg.batch_size;
    let end = (start + cfg.batch_size).min(order.len());
    let mut lrs = Vec::with_capacity(end - start);
    let mut hrs = Vec::with_capacity(end - start);
    for (slot, &idx) in order[start..end].iter().enumerate() {
        let mut rng = derive_rng(cfg.seed, &[2, epoch as u64, step as u64, slot as u64]);
        let pair = crop_pair(&data.lr[idx], &data.hr[idx], cfg.crop_lr, scale, &mut rng)?;
        let (l, h) = augment(pair, &mut rng, cfg)?;
        lrs.push(l);
        hrs.push(h);
    }
    Ok((mosaics_to_tensor(&lrs)?, mosaics_to_tensor(&hrs)?))
}

/// Loss value and per-parameter gradients on one batch.
pub fn loss_and_grads(model: &Model, spec: &LossSpec, lr: &Tensor, hr: &Tensor) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let x = tape.input(lr.clone());
    let y = tape.input(hr.clone());
    let out = model.forward(&mut tape, &bound, &x)?;
    let loss = total_loss(&mut tape, spec, &out, &y)?;
    let value = tape.value(&loss).data()[0];
    let mut grads = tape.backward(loss)?;
    let mut named = BTreeMap::new();
    for (name, var) in bound.iter() {
        let g = grads
            .take(*var)
            .unwrap_or_else(|| Tensor::zeros(model.params.get(name).expect("bound from store").shape()));
        named.insert(name.clone(), g);
    }
    Ok((value, named))
}

/// Loss value only.
pub fn loss_value(model: &Model, spec: &LossSpec, lr: &Tensor, hr: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let x = tape.input(lr.clone());
    let y = tape.input(hr.clone());
    let out = model.forward(&mut tape, &bound, &x)?;
    let loss = total_loss(&mut tape, spec, &out, &y)?;
    Ok(tape.value(&loss).data()[0])
}

// ---------------------------------------------------------------------------
// Evaluation.

/// Super-resolve one LR cube: mosaic, network, clamp to `[0, 1]`, back to a cube.
pub fn super_resolve(model: &Model, lr: &crate::mosaic::SpectralCube, layout: &MosaicLayout) -> Result<crate::mosaic::SpectralCube> {
    let input = cube_to_mosaic(lr, layout)?.to_tensor();
    let pred = model.predict(&input)?;
    let mut mosaic = MosaicImage::from_tensor(&pred, 0)?;
    mosaic.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    mosaic_to_cube(&mosaic, layout)
}

pub fn evaluate(model: &Model, dataset: &Dataset, ids: &[String], layout: &MosaicLayout) -> Result<(Vec<MetricReport>, Aggregate)> {
    if model.config.scale != dataset.manifest.scale {
        return Err(Error::Contract(format!(
            "checkpoint scale {} does not match dataset scale {}",
            model.config.scale, dataset.manifest.scale
        )));
    }
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let (hr, lr) = dataset.load_pair(id)?;
        let pred = super_resolve(model, &lr, layout)?;
        reports.push(MetricReport::compute(id.clone(), &pred, &hr)?);
    }
    let agg = Aggregate::of(&reports);
    Ok((reports, agg))
}

/// Bicubic baseline on the same images.
pub fn evaluate_bicubic(dataset: &Dataset, ids: &[String]) -> Result<(Vec<MetricReport>, Aggregate)> {
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let (hr, lr) = dataset.load_pair(id)?;
        let mut up = bicubic_upsample_cube(&lr, dataset.manifest.scale);
        up.clamp_unit();
        reports.push(MetricReport::compute(id.clone(), &up, &hr)?);
    }
    let agg = Aggregate::of(&reports);
    Ok((reports, agg))
}

// ---------------------------------------------------------------------------
// Training loop.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    pub last: PathBuf,
    pub best: PathBuf,
    pub best_val_psnr: Option<f64>,
}

pub const LOG_FILE: &str = "train.jsonl";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

fn json_db(v: Option<f64>) -> serde_json::Value {
    match v {
        None => serde_json::Value::Null,
        Some(x) if x.is_infinite() => json!(if x > 0.0 { "inf" } else { "-inf" }),
        Some(x) => json!(x),
    }
}

fn open_log(path: &Path, append: bool) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

fn write_line(log: &mut File, path: &Path, value: &serde_json::Value) -> Result<()> {
    writeln!(log, "{value}").map_err(|e| Error::io(path, e))
}

/// Train on `train_ids`, validating on `val_ids`, writing checkpoints and a
/// line-delimited log under `out`. With `resume`, training continues from the
/// stored epoch and optimizer state.
pub fn train(
    cfg: &RunConfig,
    dataset: &Dataset,
    train_ids: &[String],
    val_ids: &[String],
    out: &Path,
    resume: Option<Checkpoint>,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let layout = cfg.layout()?;
    let tc = &cfg.train;
    let scale = cfg.model.scale;
    if dataset.manifest.scale != scale {
        return Err(Error::Config(format!(
            "model scale {scale} does not match dataset scale {}",
            dataset.manifest.scale
        )));
    }
    if train_ids.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let (lh, lw) = dataset.manifest.lr_dims();
    if tc.crop_lr > PATTERN * lh.min(lw) {
        return Err(Error::Config(format!(
            "crop_lr {} exceeds the LR mosaic size {}x{}",
            tc.crop_lr,
            PATTERN * lh,
            PATTERN * lw
        )));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = MosaicSet::load(dataset, train_ids, &layout)?;
    let last_path = out.join(LAST_CKPT);
    let best_path = out.join(BEST_CKPT);
    let log_path = out.join(LOG_FILE);

    let resuming = resume.is_some();
    let (mut model, mut state) = match resume {
        Some(ck) => {
            if ck.model.config != cfg.model {
                return Err(Error::Config("checkpoint topology differs from the configured model".into()));
            }
            let ts = ck
                .train
                .ok_or_else(|| Error::Config("checkpoint carries no training state".into()))?;
            (ck.model, ts)
        }
        None => {
            let model = Model::build(cfg.model, tc.seed)?;
            let adam = AdamState::for_params(&model.params);
            (model, TrainState { epoch: 0, step: 0, adam })
        }
    };

    let mut best_val_psnr = None;
    if resuming && !val_ids.is_empty() && best_path.exists() {
        let best = Checkpoint::load(&best_path)?;
        best_val_psnr = Some(evaluate(&best.model, dataset, val_ids, &layout)?.1.psnr_db.mean);
    }

    let mut log = open_log(&log_path, resuming)?;
    let header = if resuming {
        json!({ "resume_from_epoch": state.epoch, "step": state.step })
    } else {
        json!({
            "run": cfg.model.label(),
            "params": model.params.scalar_count(),
            "model": cfg.model,
            "train": tc,
            "loss": cfg.loss,
            "train_count": train_ids.len(),
            "val_count": val_ids.len(),
        })
    };
    write_line(&mut log, &log_path, &header)?;

    let steps = steps_per_epoch(data.len(), tc);
    let mut records = Vec::new();
    for epoch in state.epoch as usize..tc.epochs {
        let lr = lr_at(epoch, tc);
        let mut loss_sum = 0.0;
        for s in 0..steps {
            let (x, y) = make_batch(&data, tc, scale, epoch, s)?;
            let (loss, grads) = loss_and_grads(&model, &cfg.loss, &x, &y)?;
            if !loss.is_finite() {
                return Err(Error::Contract(format!("loss became {loss} at epoch {epoch}, step {s}")));
            }
            adam_step(&mut model.params, &grads, &mut state.adam, lr, tc)?;
            state.step += 1;
            loss_sum += loss;
        }
        state.epoch = epoch as u64 + 1;

        let validate = !val_ids.is_empty() && ((epoch + 1) % tc.val_every == 0 || epoch + 1 == tc.epochs);
        let (val_psnr, val_ssim) = if validate {
            let (_, agg) = evaluate(&model, dataset, val_ids, &layout)?;
            (Some(agg.psnr_db.mean), Some(agg.ssim.mean))
        } else {
            (None, None)
        };

        let ck = Checkpoint {
            model: model.clone(),
            train: Some(state.clone()),
        };
        ck.save(&last_path)?;
        let improved = match (val_psnr, best_val_psnr) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => val_ids.is_empty(),
        };
        if improved {
            if val_psnr.is_some() {
                best_val_psnr = val_psnr;
            }
            Checkpoint {
                model: model.clone(),
                train: None,
            }
            .save(&best_path)?;
        }

        let record = EpochRecord {
            epoch: epoch + 1,
            step: state.step,
            lr,
            loss: loss_sum / steps as f64,
            val_psnr,
            val_ssim,
        };
        write_line(
            &mut log,
            &log_path,
            &json!({
                "epoch": record.epoch,
                "step": record.step,
                "lr": record.lr,
                "loss": record.loss,
                "val_psnr": json_db(record.val_psnr),
                "val_ssim": record.val_ssim,
            }),
        )?;
        records.push(record);
    }

    Ok(TrainSummary {
        records,
        last: last_path,
        best: best_path,
        best_val_psnr,
    })
}

/// Ids of a split, with a readable error when it is empty.
pub fn split_ids(dataset: &Dataset, split: Split) -> Vec<String> {
    dataset.manifest.ids(split)
}
