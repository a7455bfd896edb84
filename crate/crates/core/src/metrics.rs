//! PSNR and per-band SSIM in cube space.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::loss::SSIM_WINDOW;
use crate::mosaic::{MosaicImage, MosaicLayout, SpectralCube};
use crate::ssim_kernel::{ssim_plane, SsimConstants};

/// `10 log10(R^2 / MSE)` over every value of both cubes. Identical inputs
/// give `f64::INFINITY`.
pub fn psnr(pred: &SpectralCube, target: &SpectralCube, data_range: f64) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::dim("psnr", format!("{:?} vs {:?}", pred.dims(), target.dims())));
    }
    Ok(psnr_from_mse(mse(&pred.data, &target.data), data_range))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// PSNR over the live cells of two mosaics; dead cells are ignored.
pub fn psnr_live_mosaic(pred: &MosaicImage, target: &MosaicImage, layout: &MosaicLayout, data_range: f64) -> Result<f64> {
    if (pred.height, pred.width) != (target.height, target.width) {
        return Err(Error::dim("psnr", "mosaic sizes differ"));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 0..pred.height {
        for x in 0..pred.width {
            if !layout.is_dead(y, x) {
                acc += (pred.at(y, x) - target.at(y, x)).powi(2);
                n += 1;
            }
        }
    }
    Ok(psnr_from_mse(acc / n as f64, data_range))
}

/// Uniform-window SSIM of every band, with stabilizers `(0.01 R)^2`, `(0.03 R)^2`.
pub fn ssim_per_channel(pred: &SpectralCube, target: &SpectralCube, window: usize, data_range: f64) -> Result<Vec<f64>> {
    if pred.dims() != target.dims() {
        return Err(Error::dim("ssim", format!("{:?} vs {:?}", pred.dims(), target.dims())));
    }
    if pred.height < window || pred.width < window {
        return Err(Error::Contract(format!(
            "image {}x{} smaller than the {window}x{window} SSIM window",
            pred.height, pred.width
        )));
    }
    let consts = SsimConstants::for_range(data_range);
    Ok((0..pred.channels)
        .map(|c| ssim_plane(pred.plane(c), target.plane(c), pred.height, pred.width, window, consts, false).0)
        .collect())
}

pub fn ssim(pred: &SpectralCube, target: &SpectralCube, window: usize, data_range: f64) -> Result<f64> {
    let per = ssim_per_channel(pred, target, window, data_range)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) if t == "-inf" => Ok(f64::NEG_INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad dB value {t:?}"))),
    }
}

/// Quality of one reconstructed image. `psnr_db` serializes as `"inf"` for
/// an exact reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id: String,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub per_channel_ssim: Vec<f64>,
}

impl MetricReport {
    pub fn compute(id: impl Into<String>, pred: &SpectralCube, target: &SpectralCube) -> Result<Self> {
        let per_channel_ssim = ssim_per_channel(pred, target, SSIM_WINDOW, 1.0)?;
        let ssim = per_channel_ssim.iter().sum::<f64>() / per_channel_ssim.len() as f64;
        Ok(MetricReport {
            id: id.into(),
            psnr_db: psnr(pred, target, 1.0)?,
            ssim,
            per_channel_ssim,
        })
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if !mean.is_finite() {
            return MeanStd { mean, std: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub psnr_db: MeanStd,
    pub ssim: MeanStd,
}

impl Aggregate {
    pub fn of(reports: &[MetricReport]) -> Self {
        let p: Vec<f64> = reports.iter().map(|r| r.psnr_db).collect();
        let s: Vec<f64> = reports.iter().map(|r| r.ssim).collect();
        Aggregate {
            count: reports.len(),
            psnr_db: MeanStd::of(&p),
            ssim: MeanStd::of(&s),
        }
    }
}
