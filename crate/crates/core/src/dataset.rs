//! Synthetic multi-spectral datasets on disk.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! manifest.json
//! hr/0000.msic   14 x H x W ground truth
//! lr/0000.msic   14 x H/3 x W/3 box-decimated input
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cubefile::{load_cube, save_cube};
use crate::error::{Error, Result};
use crate::mosaic::{downsample_cube, SpectralCube, BANDS};

pub const MANIFEST: &str = "manifest.json";
/// HR/LR ratio of generated pairs.
pub const SCALE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub split: Split,
    /// Smallest Pearson correlation between adjacent bands of the HR cube.
    #[serde(default)]
    pub min_adjacent_corr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub bands: usize,
    pub hr_height: usize,
    pub hr_width: usize,
    pub scale: usize,
    /// The `val` split is the dataset's original division; k-fold uses it as fold 0.
    pub original_split: bool,
    pub samples: Vec<SampleEntry>,
}

impl Manifest {
    pub fn ids(&self, split: Split) -> Vec<String> {
        self.samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.id.clone())
            .collect()
    }

    pub fn lr_dims(&self) -> (usize, usize) {
        (self.hr_height / self.scale, self.hr_width / self.scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands != BANDS {
            return Err(Error::Config(format!("manifest has {} bands, expected {BANDS}", self.bands)));
        }
        if self.scale == 0 || self.hr_height % self.scale != 0 || self.hr_width % self.scale != 0 {
            return Err(Error::Config("manifest HR dims not divisible by scale".into()));
        }
        let mut ids: Vec<&str> = self.samples.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("manifest lists a sample id twice".into()));
        }
        Ok(())
    }
}

/// Train / val / test sizes in the 300 : 30 : 20 proportion.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let val = (count as f64 * 30.0 / 350.0).round() as usize;
    let test = (count as f64 * 20.0 / 350.0).round() as usize;
    (count - val - test, val, test)
}

fn blur_axis(src: &[f64], h: usize, w: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, &kv) in kernel.iter().enumerate() {
                let d = k as isize - r;
                // periodic boundary keeps statistics stationary
                let (yy, xx) = if horizontal {
                    (y, (x as isize + d).rem_euclid(w as isize) as usize)
                } else {
                    ((y as isize + d).rem_euclid(h as isize) as usize, x)
                };
                acc += kv * src[yy * w + xx];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Zero-mean, unit-variance random field low-passed by a Gaussian of width `sigma`.
fn smooth_field<R: Rng>(h: usize, w: usize, sigma: f64, rng: &mut R) -> Vec<f64> {
    let noise: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let f = blur_axis(&noise, h, w, &kernel, true);
    let mut f = blur_axis(&f, h, w, &kernel, false);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / f.len() as f64).sqrt();
    f.iter_mut().for_each(|v| *v = (*v - mean) / std.max(1e-12));
    f
}

/// Spatial scales (HR pixels) of the latent fields every band mixes.
const FIELD_SIGMAS: [f64; 3] = [1.5, 3.0, 8.0];

/// One HR cube: shared latent fields mixed with band-smooth gains.
pub fn synth_cube<R: Rng>(h: usize, w: usize, rng: &mut R) -> SpectralCube {
    let fields: Vec<Vec<f64>> = FIELD_SIGMAS.iter().map(|&s| smooth_field(h, w, s, rng)).collect();
    let base = rng.gen_range(0.35..0.65);
    let params: Vec<(f64, f64, f64)> = FIELD_SIGMAS
        .iter()
        .map(|_| (rng.gen_range(0.04..0.10), rng.gen_range(0.5..1.5), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let mut cube = SpectralCube::zeros(BANDS, h, w);
    for band in 0..BANDS {
        let lambda = band as f64 / (BANDS - 1) as f64;
        let tilt = 0.1 * (lambda - 0.5);
        let gains: Vec<f64> = params
            .iter()
            .map(|&(amp, freq, phase)| amp * (1.0 + 0.5 * (std::f64::consts::PI * freq * lambda + phase).cos()))
            .collect();
        let plane = cube.plane_mut(band);
        for (p, v) in plane.iter_mut().enumerate() {
            let s: f64 = gains.iter().zip(&fields).map(|(g, f)| g * f[p]).sum();
            *v = (base + tilt + s).clamp(0.0, 1.0);
        }
    }
    cube
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

pub fn min_adjacent_correlation(cube: &SpectralCube) -> f64 {
    (1..cube.channels)
        .map(|c| pearson(cube.plane(c - 1), cube.plane(c)))
        .fold(f64::INFINITY, f64::min)
}

/// Write `count` HR/LR pairs and a manifest under `out`.
pub fn synth_dataset(count: usize, hr_height: usize, hr_width: usize, seed: u64, out: &Path) -> Result<Manifest> {
    if hr_height == 0 || hr_width == 0 || hr_height % 12 != 0 || hr_width % 12 != 0 {
        return Err(Error::Config(format!(
            "HR dims {hr_height}x{hr_width} must be positive multiples of 12"
        )));
    }
    if count == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    for dir in ["hr", "lr"] {
        fs::create_dir_all(out.join(dir)).map_err(|e| Error::io(out.join(dir), e))?;
    }
    let (n_train, n_val, _) = split_sizes(count);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let hr = synth_cube(hr_height, hr_width, &mut rng);
        let lr = downsample_cube(&hr, SCALE)?;
        let id = format!("{i:04}");
        save_cube(&hr, out.join("hr").join(format!("{id}.msic")))?;
        save_cube(&lr, out.join("lr").join(format!("{id}.msic")))?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        samples.push(SampleEntry {
            id,
            split,
            min_adjacent_corr: Some(min_adjacent_correlation(&hr)),
        });
    }
    let manifest = Manifest {
        version: 1,
        seed,
        bands: BANDS,
        hr_height,
        hr_width,
        scale: SCALE,
        original_split: true,
        samples,
    };
    write_manifest(&manifest, out)?;
    Ok(manifest)
}

pub fn write_manifest(m: &Manifest, dir: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
}

/// A dataset directory opened for reading.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(Dataset { root, manifest })
    }

    pub fn hr_path(&self, id: &str) -> PathBuf {
        self.root.join("hr").join(format!("{id}.msic"))
    }

    pub fn lr_path(&self, id: &str) -> PathBuf {
        self.root.join("lr").join(format!("{id}.msic"))
    }

    /// `(hr, lr)` cubes of one sample, checked against the manifest geometry.
    pub fn load_pair(&self, id: &str) -> Result<(SpectralCube, SpectralCube)> {
        let hr = load_cube(self.hr_path(id))?;
        let lr = load_cube(self.lr_path(id))?;
        let m = &self.manifest;
        let (lh, lw) = m.lr_dims();
        if hr.dims() != (m.bands, m.hr_height, m.hr_width) || lr.dims() != (m.bands, lh, lw) {
            return Err(Error::Contract(format!(
                "sample {id}: cube dims {:?}/{:?} disagree with the manifest",
                hr.dims(),
                lr.dims()
            )));
        }
        Ok((hr, lr))
    }
}
