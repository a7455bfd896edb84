//! Spectral cubes, 4x4 mosaic layouts, and the codec between them.
//!
//! A mosaic stores one wavelength per pixel. Each 4x4 block of the mosaic
//! corresponds to one spatial position of the cube; the layout says which
//! band sits in which cell. Two cells carry no band and are always zero.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Side length of the repeating filter pattern.
pub const PATTERN: usize = 4;
/// Bands recorded by the sensor.
pub const BANDS: usize = 14;
const CELLS: usize = PATTERN * PATTERN;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Band(usize),
    Dead,
}

/// Which band occupies each cell of the 4x4 pattern.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MosaicLayout {
    cells: [[Cell; PATTERN]; PATTERN],
}

impl Default for MosaicLayout {
    /// Bands 0..13 in row-major order, last two cells dead.
    fn default() -> Self {
        let mut cells = [[Cell::Dead; PATTERN]; PATTERN];
        for (i, cell) in cells.iter_mut().flatten().enumerate().take(BANDS) {
            *cell = Cell::Band(i);
        }
        MosaicLayout { cells }
    }
}

impl MosaicLayout {
    /// Every band index `0..14` appears exactly once and exactly two cells are dead.
    pub fn new(cells: [[Cell; PATTERN]; PATTERN]) -> Result<Self> {
        let mut seen = [false; BANDS];
        let mut dead = 0;
        for cell in cells.iter().flatten() {
            match *cell {
                Cell::Dead => dead += 1,
                Cell::Band(b) if b >= BANDS => {
                    return Err(Error::Config(format!("layout band {b} out of range 0..{BANDS}")));
                }
                Cell::Band(b) if seen[b] => {
                    return Err(Error::Config(format!("layout band {b} appears twice")));
                }
                Cell::Band(b) => seen[b] = true,
            }
        }
        if dead != CELLS - BANDS {
            return Err(Error::Config(format!(
                "layout must have exactly {} dead cells, found {dead}",
                CELLS - BANDS
            )));
        }
        Ok(MosaicLayout { cells })
    }

    /// Parse four whitespace-separated rows of four tokens; a token is a
    /// band index or `x` for a dead cell. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let rows: Vec<&str> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .collect();
        if rows.len() != PATTERN {
            return Err(Error::Config(format!("layout needs {PATTERN} rows, found {}", rows.len())));
        }
        let mut cells = [[Cell::Dead; PATTERN]; PATTERN];
        for (r, row) in rows.iter().enumerate() {
            let tokens: Vec<&str> = row.split_whitespace().collect();
            if tokens.len() != PATTERN {
                return Err(Error::Config(format!(
                    "layout row {r} needs {PATTERN} cells, found {}",
                    tokens.len()
                )));
            }
            for (c, tok) in tokens.iter().enumerate() {
                cells[r][c] = match *tok {
                    "x" | "X" | "-" => Cell::Dead,
                    t => Cell::Band(
                        t.parse()
                            .map_err(|_| Error::Config(format!("bad layout cell {t:?}")))?,
                    ),
                };
            }
        }
        MosaicLayout::new(cells)
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row % PATTERN][col % PATTERN]
    }

    pub fn cells(&self) -> &[[Cell; PATTERN]; PATTERN] {
        &self.cells
    }

    /// `(row, col)` of the cell holding `band`.
    pub fn position(&self, band: usize) -> Option<(usize, usize)> {
        (0..CELLS)
            .map(|i| (i / PATTERN, i % PATTERN))
            .find(|&(r, c)| self.cells[r][c] == Cell::Band(band))
    }

    pub fn is_dead(&self, row: usize, col: usize) -> bool {
        self.cell(row, col) == Cell::Dead
    }

    /// Relabel bands: cell holding `b` now holds `perm[b]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        let mut cells = self.cells;
        for cell in cells.iter_mut().flatten() {
            if let Cell::Band(b) = cell {
                *b = *perm
                    .get(*b)
                    .ok_or_else(|| Error::Config("permutation too short".into()))?;
            }
        }
        MosaicLayout::new(cells)
    }
}

impl fmt::Display for MosaicLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.cells {
            let toks: Vec<String> = row
                .iter()
                .map(|c| match c {
                    Cell::Band(b) => b.to_string(),
                    Cell::Dead => "x".to_string(),
                })
                .collect();
            writeln!(f, "{}", toks.join(" "))?;
        }
        Ok(())
    }
}

/// `channels x height x width` image, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralCube {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SpectralCube {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(
                "cube",
                format!("{} values for {channels}x{height}x{width}", data.len()),
            ));
        }
        Ok(SpectralCube {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        SpectralCube {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        SpectralCube {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn clamp_unit(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}

/// Single-channel mosaic of size `4h x 4w`.
#[derive(Clone, Debug, PartialEq)]
pub struct MosaicImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl MosaicImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("mosaic", format!("{} values for {height}x{width}", data.len())));
        }
        Ok(MosaicImage { height, width, data })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, self.height, self.width), self.data.clone())
            .expect("mosaic shape")
    }

    /// Batch item `n` of a single-channel tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 1 || n >= s.n {
            return Err(Error::dim("mosaic", format!("cannot take item {n} of {s} as a mosaic")));
        }
        MosaicImage::new(s.h, s.w, t.item(n).to_vec())
    }
}

/// Place every cube value at its band's cell; dead cells are zero.
pub fn cube_to_mosaic(cube: &SpectralCube, layout: &MosaicLayout) -> Result<MosaicImage> {
    if cube.channels != BANDS {
        return Err(Error::Contract(format!(
            "mosaic layout expects {BANDS} bands, cube has {}",
            cube.channels
        )));
    }
    if cube.height == 0 || cube.width == 0 {
        return Err(Error::Contract("cube has an empty spatial extent".into()));
    }
    let (h, w) = (cube.height * PATTERN, cube.width * PATTERN);
    let mut data = vec![0.0; h * w];
    for r in 0..PATTERN {
        for c in 0..PATTERN {
            let Cell::Band(band) = layout.cell(r, c) else {
                continue;
            };
            let plane = cube.plane(band);
            for y in 0..cube.height {
                let row = (PATTERN * y + r) * w;
                for x in 0..cube.width {
                    data[row + PATTERN * x + c] = plane[y * cube.width + x];
                }
            }
        }
    }
    MosaicImage::new(h, w, data)
}

/// Exact inverse of [`cube_to_mosaic`] on live cells.
pub fn mosaic_to_cube(mosaic: &MosaicImage, layout: &MosaicLayout) -> Result<SpectralCube> {
    if mosaic.height % PATTERN != 0 || mosaic.width % PATTERN != 0 || mosaic.height == 0 || mosaic.width == 0 {
        return Err(Error::Contract(format!(
            "mosaic {}x{} is not a positive multiple of {PATTERN}",
            mosaic.height, mosaic.width
        )));
    }
    let (h, w) = (mosaic.height / PATTERN, mosaic.width / PATTERN);
    let mut cube = SpectralCube::zeros(BANDS, h, w);
    for r in 0..PATTERN {
        for c in 0..PATTERN {
            let Cell::Band(band) = layout.cell(r, c) else {
                continue;
            };
            let plane = cube.plane_mut(band);
            for y in 0..h {
                for x in 0..w {
                    plane[y * w + x] = mosaic.at(PATTERN * y + r, PATTERN * x + c);
                }
            }
        }
    }
    Ok(cube)
}

/// Per-band `factor x factor` box-average decimation.
pub fn downsample_cube(hr: &SpectralCube, factor: usize) -> Result<SpectralCube> {
    if factor == 0 || hr.height % factor != 0 || hr.width % factor != 0 {
        return Err(Error::Contract(format!(
            "cube {}x{} not divisible by {factor}",
            hr.height, hr.width
        )));
    }
    let (h, w) = (hr.height / factor, hr.width / factor);
    let norm = (factor * factor) as f64;
    let mut out = SpectralCube::zeros(hr.channels, h, w);
    for ch in 0..hr.channels {
        let src = hr.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in 0..factor {
                    let row = (y * factor + dy) * hr.width + x * factor;
                    acc += src[row..row + factor].iter().sum::<f64>();
                }
                dst[y * w + x] = acc / norm;
            }
        }
    }
    Ok(out)
}

/// Catmull-Rom weights for the four taps around fractional offset `t`.
fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Taps and weights for resampling a length-`n` axis by `factor`, with
/// pixel centres aligned and edges clamped.
fn axis_taps(n: usize, factor: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..n * factor)
        .map(|i| {
            let src = (i as f64 + 0.5) / factor as f64 - 0.5;
            let base = src.floor();
            let wts = catmull_rom(src - base);
            let idx = [-1isize, 0, 1, 2].map(|d| (base as isize + d).clamp(0, n as isize - 1) as usize);
            (idx, wts)
        })
        .collect()
}

/// Separable Catmull-Rom bicubic upsampling of every band.
pub fn bicubic_upsample_cube(lr: &SpectralCube, factor: usize) -> SpectralCube {
    let (h, w) = (lr.height * factor, lr.width * factor);
    let ty = axis_taps(lr.height, factor);
    let tx = axis_taps(lr.width, factor);
    let mut out = SpectralCube::zeros(lr.channels, h, w);
    let mut rows = vec![0.0; lr.height * w];
    for ch in 0..lr.channels {
        let src = lr.plane(ch);
        for y in 0..lr.height {
            for (x, (idx, wts)) in tx.iter().enumerate() {
                rows[y * w + x] = (0..4).map(|k| wts[k] * src[y * lr.width + idx[k]]).sum();
            }
        }
        let dst = out.plane_mut(ch);
        for (y, (idx, wts)) in ty.iter().enumerate() {
            for x in 0..w {
                dst[y * w + x] = (0..4).map(|k| wts[k] * rows[idx[k] * w + x]).sum();
            }
        }
    }
    out
}
