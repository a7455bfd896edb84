//! Uniform-window SSIM on a single plane, with its exact gradient.
//!
//! Statistics use population moments over each `k x k` window that fits
//! entirely inside the plane; the index is averaged over those windows.

/// Stabilizing constants for a given data range.
#[derive(Clone, Copy, Debug)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    pub fn for_range(data_range: f64) -> Self {
        SsimConstants {
            c1: (0.01 * data_range).powi(2),
            c2: (0.03 * data_range).powi(2),
        }
    }
}

/// Sum over every `k x k` window fully inside an `h x w` plane.
fn box_valid(src: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = line[x..x + k].iter().sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`box_valid`]: every pixel receives the sum of the window
/// values whose footprint covers it.
fn box_adjoint(map: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut cols = vec![0.0; h * ow];
    for y in 0..h {
        let lo = y.saturating_sub(k - 1);
        let hi = y.min(oh - 1);
        for x in 0..ow {
            cols[y * ow + x] = (lo..=hi).map(|t| map[t * ow + x]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(k - 1);
            let hi = x.min(ow - 1);
            out[y * w + x] = (lo..=hi).map(|t| cols[y * ow + t]).sum();
        }
    }
    out
}

/// Gradients of the mean SSIM with respect to both planes.
pub struct SsimGrad {
    pub d_x: Vec<f64>,
    pub d_y: Vec<f64>,
}

/// Mean SSIM of two `h x w` planes; optionally its gradient.
pub fn ssim_plane(
    x: &[f64],
    y: &[f64],
    h: usize,
    w: usize,
    k: usize,
    consts: SsimConstants,
    want_grad: bool,
) -> (f64, Option<SsimGrad>) {
    assert!(h >= k && w >= k, "plane smaller than window");
    let n = (k * k) as f64;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let sx = box_valid(x, h, w, k);
    let sy = box_valid(y, h, w, k);
    let sxx = box_valid(&xx, h, w, k);
    let syy = box_valid(&yy, h, w, k);
    let sxy = box_valid(&xy, h, w, k);

    let windows = sx.len();
    let mut total = 0.0;
    let mut coef = if want_grad {
        Some([(); 6].map(|_| vec![0.0; windows]))
    } else {
        None
    };
    for i in 0..windows {
        let mx = sx[i] / n;
        let my = sy[i] / n;
        let vx = sxx[i] / n - mx * mx;
        let vy = syy[i] / n - my * my;
        let cxy = sxy[i] / n - mx * my;
        let a1 = 2.0 * mx * my + consts.c1;
        let a2 = 2.0 * cxy + consts.c2;
        let b1 = mx * mx + my * my + consts.c1;
        let b2 = vx + vy + consts.c2;
        let s = (a1 * a2) / (b1 * b2);
        total += s;
        if let Some(c) = coef.as_mut() {
            let d_cov = 2.0 * a1 / (b1 * b2);
            let d_var = -s / b2;
            let d_mx = 2.0 * my * a2 / (b1 * b2) - 2.0 * mx * s / b1;
            let d_my = 2.0 * mx * a2 / (b1 * b2) - 2.0 * my * s / b1;
            // dS/dx_p = (alpha + beta * x_p + gamma * y_p) / n over covering windows
            c[0][i] = d_mx - 2.0 * d_var * mx - d_cov * my;
            c[1][i] = 2.0 * d_var;
            c[2][i] = d_cov;
            c[3][i] = d_my - 2.0 * d_var * my - d_cov * mx;
            c[4][i] = 2.0 * d_var;
            c[5][i] = d_cov;
        }
    }
    let mean = total / windows as f64;
    let grad = coef.map(|c| {
        let scale = 1.0 / (n * windows as f64);
        let [ax, bx, gx, ay, by, gy] = c.map(|m| box_adjoint(&m, h, w, k));
        let d_x = (0..h * w)
            .map(|p| (ax[p] + bx[p] * x[p] + gx[p] * y[p]) * scale)
            .collect();
        let d_y = (0..h * w)
            .map(|p| (ay[p] + by[p] * y[p] + gy[p] * x[p]) * scale)
            .collect();
        SsimGrad { d_x, d_y }
    });
    (mean, grad)
}
