//! Input-transformation defenses applied before classification: bit-depth
//! reduction, total-variation minimization, bilateral filtering, and a
//! JPEG-style DCT quantization round-trip.
//!
//! All defenses are pure functions mapping `[0, 1]` images to `[0, 1]`
//! images of the same shape, applied per channel.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ITU T.81 Annex K luminance quantization table.
const JPEG_LUMA_BASE: [i32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

const TV_SMOOTH_EPS: f64 = 1e-6;

/// A defense with every hyperparameter explicit.
#[derive(Debug, Clone, PartialEq)]
pub enum DefenseSpec {
    Jpeg { quality: u32 },
    Tvm { weight: f64, iters: usize, step: f64 },
    BitReduction { depth: u32 },
    Bilateral { window: usize, sigma_spatial: f64, sigma_range: f64 },
}

impl DefenseSpec {
    /// Stable identifier used in report rows and file names.
    pub fn id(&self) -> String {
        match self {
            Self::Jpeg { quality } => format!("jpeg_q{quality}"),
            Self::Tvm { weight, .. } => format!("tvm_w{weight}"),
            Self::BitReduction { depth } => format!("bit_d{depth}"),
            Self::Bilateral { window, .. } => format!("bilateral_w{window}"),
        }
    }

    /// Parse `kind:primary` or `kind:key=value,...` forms, e.g. `jpeg:90`,
    /// `tvm:3`, `tvm:weight=3,iters=25,step=0.1`, `bit:4`, `bilateral:5`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |detail: &str| Error::InvalidArgument(format!("defense `{text}`: {detail}"));
        let (kind, rest) = text.split_once(':').ok_or_else(|| bad("expected kind:params"))?;
        let mut kv: Vec<(&str, &str)> = Vec::new();
        let mut primary: Option<&str> = None;
        for part in rest.split(',') {
            match part.split_once('=') {
                Some((k, v)) => kv.push((k.trim(), v.trim())),
                None if primary.is_none() && kv.is_empty() => primary = Some(part.trim()),
                None => return Err(bad("positional value after key=value")),
            }
        }
        let get = |key: &str| kv.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
        let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad("bad number"));
        let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| bad("bad integer"));

        let spec = match kind {
            "jpeg" => {
                let q = primary.or_else(|| get("quality")).ok_or_else(|| bad("needs quality"))?;
                Self::Jpeg { quality: q.parse().map_err(|_| bad("bad quality"))? }
            }
            "tvm" => {
                let weight = parse_f64(primary.or_else(|| get("weight")).ok_or_else(|| bad("needs weight"))?)?;
                let iters = get("iters").map(parse_usize).transpose()?.unwrap_or(25);
                let step = get("step").map(parse_f64).transpose()?.unwrap_or(0.1);
                Self::Tvm { weight, iters, step }
            }
            "bit" | "bit-reduction" => {
                let d = primary.or_else(|| get("depth")).ok_or_else(|| bad("needs depth"))?;
                Self::BitReduction { depth: d.parse().map_err(|_| bad("bad depth"))? }
            }
            "bilateral" => {
                let window =
                    parse_usize(primary.or_else(|| get("window")).ok_or_else(|| bad("needs window"))?)?;
                let sigma_spatial = get("sigma_spatial")
                    .map(parse_f64)
                    .transpose()?
                    .unwrap_or(window as f64 / 3.0);
                let sigma_range = get("sigma_range").map(parse_f64).transpose()?.unwrap_or(0.1);
                Self::Bilateral { window, sigma_spatial, sigma_range }
            }
            other => return Err(bad(&format!("unknown kind `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Jpeg { quality } => {
                if !(1..=100).contains(&quality) {
                    return Err(Error::InvalidArgument(format!("jpeg quality {quality} outside 1..=100")));
                }
            }
            Self::Tvm { weight, step, .. } => {
                if weight <= 0.0 {
                    return Err(Error::InvalidArgument(format!("tvm weight {weight} must be > 0")));
                }
                if step <= 0.0 {
                    return Err(Error::InvalidArgument(format!("tvm step {step} must be > 0")));
                }
            }
            Self::BitReduction { depth } => {
                if !(1..=8).contains(&depth) {
                    return Err(Error::InvalidArgument(format!("bit depth {depth} outside 1..=8")));
                }
            }
            Self::Bilateral { window, sigma_spatial, sigma_range } => {
                if window < 3 || window % 2 == 0 {
                    return Err(Error::InvalidArgument(format!(
                        "bilateral window {window} must be odd and >= 3"
                    )));
                }
                if sigma_spatial <= 0.0 || sigma_range <= 0.0 {
                    return Err(Error::InvalidArgument("bilateral sigmas must be > 0".into()));
                }
            }
        }
        Ok(())
    }

    /// Apply to one `(C, H, W)` image.
    pub fn apply(&self, image: &Tensor) -> Result<Tensor> {
        match *self {
            Self::Jpeg { quality } => jpeg_like(image, quality),
            Self::Tvm { weight, iters, step } => tv_minimize(image, weight, iters, step),
            Self::BitReduction { depth } => bit_reduce(image, depth),
            Self::Bilateral { window, sigma_spatial, sigma_range } => {
                bilateral(image, window, sigma_spatial, sigma_range)
            }
        }
    }

    /// Apply to a `(N, C, H, W)` batch, image by image.
    pub fn apply_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let s = batch.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch { op: "apply_batch", lhs: s, rhs: vec![0; 4] });
        }
        let (n, rest) = (s[0], s[1] * s[2] * s[3]);
        let mut out = Vec::with_capacity(batch.numel());
        for i in 0..n {
            let img = Tensor::new(
                vec![s[1], s[2], s[3]],
                batch.data()[i * rest..(i + 1) * rest].to_vec(),
            )?;
            out.extend_from_slice(self.apply(&img)?.data());
        }
        Tensor::new(s, out)
    }
}

fn check_image(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![0, 0, 0] });
    }
    Ok((s[0], s[1], s[2]))
}

/// Quantize each pixel to `2^depth` levels: `round(x * L) / L` with
/// `L = 2^depth - 1`, rounding half away from zero (half-up for pixels).
pub fn bit_reduce(x: &Tensor, depth: u32) -> Result<Tensor> {
    check_image(x, "bit_reduce")?;
    if !(1..=8).contains(&depth) {
        return Err(Error::InvalidArgument(format!("bit depth {depth} outside 1..=8")));
    }
    let levels = (2u32.pow(depth) - 1) as f64;
    Ok(x.map(|v| (v * levels).round() / levels))
}

/// ROF-style smoothing: gradient descent on
/// `E(u) = ||u - x||^2 + weight * TV(u)` with smoothed isotropic TV.
/// Each step starts at `step` and backtracks (halving) until the energy
/// does not increase, so the energy trajectory is monotone by construction.
/// The output is clipped to `[0, 1]`.
pub fn tv_minimize(x: &Tensor, weight: f64, iters: usize, step: f64) -> Result<Tensor> {
    tv_minimize_traced(x, weight, iters, step).map(|(img, _)| img)
}

/// As [`tv_minimize`], also returning the energy after the initial state and
/// after every iteration.
pub fn tv_minimize_traced(
    x: &Tensor,
    weight: f64,
    iters: usize,
    step: f64,
) -> Result<(Tensor, Vec<f64>)> {
    let (c, h, w) = check_image(x, "tv_minimize")?;
    if weight <= 0.0 {
        return Err(Error::InvalidArgument(format!("tvm weight {weight} must be > 0")));
    }
    let mut u = x.clone();
    let mut energies = Vec::with_capacity(iters + 1);
    let mut current = tv_energy_inner(u.data(), x.data(), c, h, w, weight);
    if !current.is_finite() {
        return Err(Error::InvalidArgument("tvm: non-finite energy".into()));
    }
    energies.push(current);
    for _ in 0..iters {
        let grad = tv_energy_grad(u.data(), x.data(), c, h, w, weight);
        let mut s = step;
        let mut candidate = None;
        for _ in 0..40 {
            let trial: Vec<f64> = u.data().iter().zip(&grad).map(|(v, g)| v - s * g).collect();
            let e = tv_energy_inner(&trial, x.data(), c, h, w, weight);
            if !e.is_finite() {
                return Err(Error::InvalidArgument("tvm: non-finite energy".into()));
            }
            if e <= current {
                candidate = Some((trial, e));
                break;
            }
            s *= 0.5;
        }
        match candidate {
            Some((trial, e)) => {
                u.data_mut().copy_from_slice(&trial);
                current = e;
            }
            None => {} // numerically stationary; keep u
        }
        energies.push(current);
    }
    Ok((u.clamp(0.0, 1.0), energies))
}

/// The TVM objective for an arbitrary candidate; exposed so tests can check
/// monotone descent independently.
pub fn tv_energy(u: &Tensor, x: &Tensor, weight: f64) -> Result<f64> {
    let (c, h, w) = check_image(x, "tv_energy")?;
    if u.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "tv_energy",
            lhs: u.shape().to_vec(),
            rhs: x.shape().to_vec(),
        });
    }
    Ok(tv_energy_inner(u.data(), x.data(), c, h, w, weight))
}

fn tv_energy_inner(u: &[f64], x: &[f64], c: usize, h: usize, w: usize, weight: f64) -> f64 {
    let fidelity: f64 = u.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    let mut tv = 0.0;
    for ch in 0..c {
        let plane = &u[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let dx = if xx + 1 < w { plane[y * w + xx + 1] - plane[y * w + xx] } else { 0.0 };
                let dy = if y + 1 < h { plane[(y + 1) * w + xx] - plane[y * w + xx] } else { 0.0 };
                tv += (dx * dx + dy * dy + TV_SMOOTH_EPS).sqrt();
            }
        }
    }
    fidelity + weight * tv
}

fn tv_energy_grad(u: &[f64], x: &[f64], c: usize, h: usize, w: usize, weight: f64) -> Vec<f64> {
    let mut grad: Vec<f64> = u.iter().zip(x).map(|(a, b)| 2.0 * (a - b)).collect();
    let phi = |plane: &[f64], y: usize, xx: usize| -> (f64, f64, f64) {
        let dx = if xx + 1 < w { plane[y * w + xx + 1] - plane[y * w + xx] } else { 0.0 };
        let dy = if y + 1 < h { plane[(y + 1) * w + xx] - plane[y * w + xx] } else { 0.0 };
        (dx, dy, (dx * dx + dy * dy + TV_SMOOTH_EPS).sqrt())
    };
    for ch in 0..c {
        let base = ch * h * w;
        let plane = &u[base..base + h * w];
        for y in 0..h {
            for xx in 0..w {
                let (dx, dy, p) = phi(plane, y, xx);
                let mut g = -(dx + dy) / p;
                if xx > 0 {
                    let (dxl, _, pl) = phi(plane, y, xx - 1);
                    g += dxl / pl;
                }
                if y > 0 {
                    let (_, dyu, pu) = phi(plane, y - 1, xx);
                    g += dyu / pu;
                }
                grad[base + y * w + xx] += weight * g;
            }
        }
    }
    grad
}

/// Edge-preserving smoothing: per pixel, a Gaussian-weighted average over a
/// square window with spatial and intensity terms; coordinates are clamped
/// at the borders.
pub fn bilateral(x: &Tensor, window: usize, sigma_spatial: f64, sigma_range: f64) -> Result<Tensor> {
    let (c, h, w) = check_image(x, "bilateral")?;
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "bilateral window {window} must be odd and >= 3"
        )));
    }
    if sigma_spatial <= 0.0 || sigma_range <= 0.0 {
        return Err(Error::InvalidArgument("bilateral sigmas must be > 0".into()));
    }
    let half = (window / 2) as i64;
    let inv2ss = 1.0 / (2.0 * sigma_spatial * sigma_spatial);
    let inv2sr = 1.0 / (2.0 * sigma_range * sigma_range);
    let mut out = vec![0.0; x.numel()];
    for ch in 0..c {
        let base = ch * h * w;
        let plane = &x.data()[base..base + h * w];
        for y in 0..h as i64 {
            for xx in 0..w as i64 {
                let center = plane[(y as usize) * w + xx as usize];
                let mut num = 0.0;
                let mut den = 0.0;
                for dy in -half..=half {
                    for dx in -half..=half {
                        let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                        let xc = (xx + dx).clamp(0, w as i64 - 1) as usize;
                        let v = plane[yy * w + xc];
                        let ws = (-((dy * dy + dx * dx) as f64) * inv2ss).exp();
                        let wr = (-(v - center) * (v - center) * inv2sr).exp();
                        num += ws * wr * v;
                        den += ws * wr;
                    }
                }
                out[base + (y as usize) * w + xx as usize] = num / den;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut d = [[0.0; 8]; 8];
    for j in 0..8 {
        d[0][j] = (1.0 / 8.0_f64).sqrt();
    }
    for k in 1..8 {
        for j in 0..8 {
            d[k][j] = (2.0 / 8.0_f64).sqrt()
                * ((std::f64::consts::PI * (2.0 * j as f64 + 1.0) * k as f64) / 16.0).cos();
        }
    }
    d
}

fn quant_table(quality: u32) -> [f64; 64] {
    let scale = if quality < 50 { 5000.0 / quality as f64 } else { 200.0 - 2.0 * quality as f64 };
    let mut q = [1.0; 64];
    for (dst, &base) in q.iter_mut().zip(&JPEG_LUMA_BASE) {
        *dst = ((base as f64 * scale / 100.0).round()).max(1.0);
    }
    q
}

/// Apply the 8x8 DCT / quantize / dequantize / inverse-DCT round-trip to one
/// padded channel plane, returning the quantized coefficients per block to
/// the visitor.
fn jpeg_plane(
    plane: &[f64],
    h: usize,
    w: usize,
    q: &[f64; 64],
    mut coeff_visitor: impl FnMut(&[f64; 64]),
) -> Vec<f64> {
    let dct = dct_matrix();
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    // Edge-replicated padding, shifted to the signed 255-range JPEG domain.
    let mut padded = vec![0.0; ph * pw];
    for y in 0..ph {
        for x in 0..pw {
            let sy = y.min(h - 1);
            let sx = x.min(w - 1);
            padded[y * pw + x] = plane[sy * w + sx] * 255.0 - 128.0;
        }
    }
    for by in (0..ph).step_by(8) {
        for bx in (0..pw).step_by(8) {
            let mut block = [0.0; 64];
            for y in 0..8 {
                for x in 0..8 {
                    block[y * 8 + x] = padded[(by + y) * pw + bx + x];
                }
            }
            // C = D * B * D^T
            let mut tmp = [0.0; 64];
            for i in 0..8 {
                for j in 0..8 {
                    let mut s = 0.0;
                    for k in 0..8 {
                        s += dct[i][k] * block[k * 8 + j];
                    }
                    tmp[i * 8 + j] = s;
                }
            }
            let mut coef = [0.0; 64];
            for i in 0..8 {
                for j in 0..8 {
                    let mut s = 0.0;
                    for k in 0..8 {
                        s += tmp[i * 8 + k] * dct[j][k];
                    }
                    coef[i * 8 + j] = s;
                }
            }
            for (cv, qv) in coef.iter_mut().zip(q) {
                *cv = (*cv / qv).round() * qv;
            }
            coeff_visitor(&coef);
            // B = D^T * C * D
            for i in 0..8 {
                for j in 0..8 {
                    let mut s = 0.0;
                    for k in 0..8 {
                        s += dct[k][i] * coef[k * 8 + j];
                    }
                    tmp[i * 8 + j] = s;
                }
            }
            for i in 0..8 {
                for j in 0..8 {
                    let mut s = 0.0;
                    for k in 0..8 {
                        s += tmp[i * 8 + k] * dct[k][j];
                    }
                    padded[(by + i) * pw + bx + j] = s;
                }
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = ((padded[y * pw + x] + 128.0) / 255.0).clamp(0.0, 1.0);
        }
    }
    out
}

/// JPEG-style lossy round-trip: per channel, 8x8 block DCT-II, quantization
/// by the standard luminance table under the conventional quality scaling
/// (`5000/q` below 50, else `200 - 2q`; entries floored at 1), dequantize,
/// inverse DCT, clip. No chroma subsampling or entropy coding; the
/// information loss that matters for classification is the quantization.
pub fn jpeg_like(x: &Tensor, quality: u32) -> Result<Tensor> {
    let (c, h, w) = check_image(x, "jpeg_like")?;
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("jpeg quality {quality} outside 1..=100")));
    }
    let q = quant_table(quality);
    let mut out = Vec::with_capacity(x.numel());
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        out.extend(jpeg_plane(plane, h, w, &q, |_| {}));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Total squared quantized AC energy across all blocks and channels; the
/// spectral content a given quality setting lets through.
pub fn jpeg_quantized_ac_energy(x: &Tensor, quality: u32) -> Result<f64> {
    let (c, h, w) = check_image(x, "jpeg_quantized_ac_energy")?;
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("jpeg quality {quality} outside 1..=100")));
    }
    let q = quant_table(quality);
    let mut energy = 0.0;
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        jpeg_plane(plane, h, w, &q, |coef| {
            // All but the DC coefficient at flat index 0.
            energy += coef.iter().skip(1).map(|v| v * v).sum::<f64>();
        });
    }
    Ok(energy)
}
