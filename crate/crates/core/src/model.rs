//! The reference restoration network and its optimizer.
//!
//! The image is cut into 8×8 cells. Each cell is embedded by a linear layer,
//! mixed with its neighbours by a 3×3 convolution over the cell grid and
//! conditioned on a pooled global code. A linear head then predicts a
//! per-cell, per-channel affine colour correction:
//!
//! `y = clamp(x · (1 + a) + b, 0, 1)`
//!
//! The head starts at zero, so a fresh network is the identity map.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::image::{Image, CHANNELS};

pub const ARCHITECTURE_ID: &str = "cell-affine-48";

const CELL: usize = 8;
const CELL_IN: usize = CELL * CELL * CHANNELS;
const HIDDEN: usize = 48;
const GLOBAL: usize = 192;
const HEAD: usize = 2 * CHANNELS;
const TAPS: usize = 9;

/// Offsets of each parameter block in the flat vector.
struct Layout {
    w1: usize,
    b1: usize,
    wg1: usize,
    bg1: usize,
    wg2: usize,
    bg2: usize,
    wc: usize,
    bc: usize,
    wh: usize,
    bh: usize,
    len: usize,
}

const fn layout() -> Layout {
    let w1 = 0;
    let b1 = w1 + HIDDEN * CELL_IN;
    let wg1 = b1 + HIDDEN;
    let bg1 = wg1 + GLOBAL * HIDDEN;
    let wg2 = bg1 + GLOBAL;
    let bg2 = wg2 + HIDDEN * GLOBAL;
    let wc = bg2 + HIDDEN;
    let bc = wc + TAPS * HIDDEN * HIDDEN;
    let wh = bc + HIDDEN;
    let bh = wh + HEAD * HIDDEN;
    Layout {
        w1,
        b1,
        wg1,
        bg1,
        wg2,
        bg2,
        wc,
        bc,
        wh,
        bh,
        len: bh + HEAD,
    }
}

const L: Layout = layout();
pub const PARAM_COUNT: usize = L.len;

/// `out[r] += Σ_c m[r, c] · v[c]` for a row-major `rows × v.len()` matrix.
#[inline]
fn matvec_acc(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &m[r * cols..(r + 1) * cols];
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out[c] += Σ_r m[r, c] · v[r]`.
#[inline]
fn matvec_t_acc(m: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (r, &vr) in v.iter().enumerate() {
        if vr == 0.0 {
            continue;
        }
        let row = &m[r * cols..(r + 1) * cols];
        for (o, a) in out.iter_mut().zip(row) {
            *o += a * vr;
        }
    }
}

/// `g[r, c] += u[r] · v[c]`.
#[inline]
fn outer_acc(g: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    for (r, &ur) in u.iter().enumerate() {
        if ur == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for (a, b) in row.iter_mut().zip(v) {
            *a += ur * b;
        }
    }
}

fn relu(v: &mut [f64]) {
    for x in v {
        *x = x.max(0.0);
    }
}

/// Intermediate values kept for the backward pass.
pub struct Tape {
    rows: usize,
    cols: usize,
    width: usize,
    input: Vec<f64>,
    cells: Vec<f64>,
    h1: Vec<f64>,
    pooled: Vec<f64>,
    g1: Vec<f64>,
    h2: Vec<f64>,
    pre: Vec<f64>,
}

impl Tape {
    /// The clamped network output.
    pub fn output(&self) -> Result<Image> {
        Image::from_clamped(self.pre.len() / (self.width * CHANNELS), self.width, self.pre.clone())
    }
}

fn cell_grid(image: &Image) -> Result<(usize, usize)> {
    let (h, w) = image.shape();
    if h % CELL != 0 || w % CELL != 0 {
        return Err(Error::Domain(format!("image sides must be multiples of {CELL}, got {h}x{w}")));
    }
    Ok((h / CELL, w / CELL))
}

#[inline]
fn pixel_index(width: usize, row: usize, col: usize, k: usize) -> usize {
    let (p, ch) = (k / CHANNELS, k % CHANNELS);
    let (py, px) = (p / CELL, p % CELL);
    ((row * CELL + py) * width + col * CELL + px) * CHANNELS + ch
}

/// A parameter vector bound to the cell-affine architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct RestorationModel {
    params: Vec<f64>,
}

impl RestorationModel {
    pub fn architecture_id(&self) -> &'static str {
        ARCHITECTURE_ID
    }

    pub fn init<R: Rng>(rng: &mut R) -> Self {
        let mut params = vec![0.0; PARAM_COUNT];
        let mut fill = |start: usize, len: usize, std: f64| {
            let normal = Normal::new(0.0, std).expect("valid std");
            for p in &mut params[start..start + len] {
                *p = normal.sample(rng);
            }
        };
        fill(L.w1, HIDDEN * CELL_IN, (2.0 / CELL_IN as f64).sqrt());
        fill(L.wg1, GLOBAL * HIDDEN, (2.0 / HIDDEN as f64).sqrt());
        fill(L.wg2, HIDDEN * GLOBAL, (1.0 / GLOBAL as f64).sqrt());
        fill(L.wc, TAPS * HIDDEN * HIDDEN, (2.0 / (TAPS * HIDDEN) as f64).sqrt());
        Self { params }
    }

    pub fn from_params(params: Vec<f64>) -> Result<Self> {
        if params.len() != PARAM_COUNT {
            return Err(Error::Validation(format!(
                "{ARCHITECTURE_ID} has {PARAM_COUNT} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn forward(&self, image: &Image) -> Result<Image> {
        let tape = self.forward_tape(image)?;
        Image::from_clamped(image.height(), image.width(), tape.pre)
    }

    pub fn forward_tape(&self, image: &Image) -> Result<Tape> {
        let (rows, cols) = cell_grid(image)?;
        let p = &self.params;
        let n = rows * cols;
        let width = image.width();
        let input = image.as_slice();

        let mut cells = vec![0.0; n * CELL_IN];
        for c in 0..n {
            let (r, q) = (c / cols, c % cols);
            for k in 0..CELL_IN {
                cells[c * CELL_IN + k] = input[pixel_index(width, r, q, k)];
            }
        }

        let mut h1 = vec![0.0; n * HIDDEN];
        for c in 0..n {
            let out = &mut h1[c * HIDDEN..(c + 1) * HIDDEN];
            out.copy_from_slice(&p[L.b1..L.b1 + HIDDEN]);
            matvec_acc(&p[L.w1..L.b1], &cells[c * CELL_IN..(c + 1) * CELL_IN], out);
            relu(out);
        }

        let mut pooled = vec![0.0; HIDDEN];
        for c in 0..n {
            for (m, v) in pooled.iter_mut().zip(&h1[c * HIDDEN..(c + 1) * HIDDEN]) {
                *m += v / n as f64;
            }
        }
        let mut g1 = p[L.bg1..L.bg1 + GLOBAL].to_vec();
        matvec_acc(&p[L.wg1..L.bg1], &pooled, &mut g1);
        relu(&mut g1);
        let mut bias = p[L.bg2..L.bg2 + HIDDEN].to_vec();
        matvec_acc(&p[L.wg2..L.bg2], &g1, &mut bias);
        for (b, c) in bias.iter_mut().zip(&p[L.bc..L.bc + HIDDEN]) {
            *b += c;
        }

        let mut h2 = vec![0.0; n * HIDDEN];
        for c in 0..n {
            let (r, q) = (c / cols, c % cols);
            let out = &mut h2[c * HIDDEN..(c + 1) * HIDDEN];
            out.copy_from_slice(&bias);
            for t in 0..TAPS {
                let (rr, qq) = (r as isize + t as isize / 3 - 1, q as isize + t as isize % 3 - 1);
                if rr < 0 || qq < 0 || rr >= rows as isize || qq >= cols as isize {
                    continue;
                }
                let nb = rr as usize * cols + qq as usize;
                let w = &p[L.wc + t * HIDDEN * HIDDEN..L.wc + (t + 1) * HIDDEN * HIDDEN];
                matvec_acc(w, &h1[nb * HIDDEN..(nb + 1) * HIDDEN], out);
            }
            relu(out);
        }

        let mut coeffs = vec![0.0; n * HEAD];
        for c in 0..n {
            let out = &mut coeffs[c * HEAD..(c + 1) * HEAD];
            out.copy_from_slice(&p[L.bh..L.bh + HEAD]);
            matvec_acc(&p[L.wh..L.bh], &h2[c * HIDDEN..(c + 1) * HIDDEN], out);
        }

        let mut pre = vec![0.0; input.len()];
        for c in 0..n {
            let (r, q) = (c / cols, c % cols);
            let co = &coeffs[c * HEAD..(c + 1) * HEAD];
            for k in 0..CELL_IN {
                let i = pixel_index(width, r, q, k);
                let ch = k % CHANNELS;
                pre[i] = input[i] * (1.0 + co[ch]) + co[CHANNELS + ch];
            }
        }
        if pre.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training("non-finite network output".into()));
        }
        Ok(Tape {
            rows,
            cols,
            width,
            input: input.to_vec(),
            cells,
            h1,
            pooled,
            g1,
            h2,
            pre,
        })
    }

    /// Parameter gradient given the gradient w.r.t. the clamped output pixels.
    pub fn backward(&self, tape: &Tape, grad_out: &[f64]) -> Result<Vec<f64>> {
        if grad_out.len() != tape.pre.len() {
            return Err(Error::Domain("output gradient has the wrong length".into()));
        }
        let p = &self.params;
        let (rows, cols) = (tape.rows, tape.cols);
        let n = rows * cols;
        let mut g = vec![0.0; PARAM_COUNT];

        let mut d_coeffs = vec![0.0; n * HEAD];
        for c in 0..n {
            let (r, q) = (c / cols, c % cols);
            let d = &mut d_coeffs[c * HEAD..(c + 1) * HEAD];
            for k in 0..CELL_IN {
                let i = pixel_index(tape.width, r, q, k);
                if !(0.0..=1.0).contains(&tape.pre[i]) {
                    continue;
                }
                let ch = k % CHANNELS;
                d[ch] += grad_out[i] * tape.input[i];
                d[CHANNELS + ch] += grad_out[i];
            }
        }

        let mut d_h2 = vec![0.0; n * HIDDEN];
        for c in 0..n {
            let dc = &d_coeffs[c * HEAD..(c + 1) * HEAD];
            outer_acc(&mut g[L.wh..L.bh], dc, &tape.h2[c * HIDDEN..(c + 1) * HIDDEN]);
            for (gb, d) in g[L.bh..L.bh + HEAD].iter_mut().zip(dc) {
                *gb += d;
            }
            matvec_t_acc(&p[L.wh..L.bh], dc, &mut d_h2[c * HIDDEN..(c + 1) * HIDDEN]);
        }
        for (d, h) in d_h2.iter_mut().zip(&tape.h2) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }

        let mut d_bias = vec![0.0; HIDDEN];
        let mut d_h1 = vec![0.0; n * HIDDEN];
        for c in 0..n {
            let (r, q) = (c / cols, c % cols);
            let dz = &d_h2[c * HIDDEN..(c + 1) * HIDDEN];
            for (b, d) in d_bias.iter_mut().zip(dz) {
                *b += d;
            }
            for t in 0..TAPS {
                let (rr, qq) = (r as isize + t as isize / 3 - 1, q as isize + t as isize % 3 - 1);
                if rr < 0 || qq < 0 || rr >= rows as isize || qq >= cols as isize {
                    continue;
                }
                let nb = rr as usize * cols + qq as usize;
                let off = L.wc + t * HIDDEN * HIDDEN;
                outer_acc(&mut g[off..off + HIDDEN * HIDDEN], dz, &tape.h1[nb * HIDDEN..(nb + 1) * HIDDEN]);
                matvec_t_acc(&p[off..off + HIDDEN * HIDDEN], dz, &mut d_h1[nb * HIDDEN..(nb + 1) * HIDDEN]);
            }
        }
        for (gb, d) in g[L.bc..L.bc + HIDDEN].iter_mut().zip(&d_bias) {
            *gb += d;
        }

        for (gb, d) in g[L.bg2..L.bg2 + HIDDEN].iter_mut().zip(&d_bias) {
            *gb += d;
        }
        outer_acc(&mut g[L.wg2..L.bg2], &d_bias, &tape.g1);
        let mut d_g1 = vec![0.0; GLOBAL];
        matvec_t_acc(&p[L.wg2..L.bg2], &d_bias, &mut d_g1);
        for (d, h) in d_g1.iter_mut().zip(&tape.g1) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        for (gb, d) in g[L.bg1..L.bg1 + GLOBAL].iter_mut().zip(&d_g1) {
            *gb += d;
        }
        outer_acc(&mut g[L.wg1..L.bg1], &d_g1, &tape.pooled);
        let mut d_pooled = vec![0.0; HIDDEN];
        matvec_t_acc(&p[L.wg1..L.bg1], &d_g1, &mut d_pooled);
        for c in 0..n {
            for (d, dp) in d_h1[c * HIDDEN..(c + 1) * HIDDEN].iter_mut().zip(&d_pooled) {
                *d += dp / n as f64;
            }
        }

        for (d, h) in d_h1.iter_mut().zip(&tape.h1) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }
        for c in 0..n {
            let dz = &d_h1[c * HIDDEN..(c + 1) * HIDDEN];
            outer_acc(&mut g[L.w1..L.b1], dz, &tape.cells[c * CELL_IN..(c + 1) * CELL_IN]);
            for (gb, d) in g[L.b1..L.b1 + HIDDEN].iter_mut().zip(dz) {
                *gb += d;
            }
        }
        Ok(g)
    }

    /// Runs the network over many images; results keep input order.
    pub fn forward_batch(&self, images: &[&Image], exec: Exec) -> Result<Vec<Image>> {
        exec.map(images, |img| self.forward(img)).into_iter().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * self.params.len());
        for v in &self.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::Codec("parameter file length is not a multiple of 8".into()));
        }
        Self::from_params(f64s_from_le(bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn f64s_from_le(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

pub(crate) fn f64s_to_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Domain("optimizer state and gradient lengths differ".into()));
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        Ok(())
    }

    /// `step`, then the first and second moment vectors, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.step.to_le_bytes().to_vec();
        out.extend(f64s_to_le(&self.m));
        out.extend(f64s_to_le(&self.v));
        out
    }

    pub fn from_bytes(lr: f64, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || !(bytes.len() - 8).is_multiple_of(16) {
            return Err(Error::Codec("malformed optimizer state".into()));
        }
        let step = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let vals = f64s_from_le(&bytes[8..]);
        let half = vals.len() / 2;
        let mut adam = Adam::new(lr, half);
        adam.step = step;
        adam.m = vals[..half].to_vec();
        adam.v = vals[half..].to_vec();
        Ok(adam)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    fn textured(seed: u64) -> Image {
        let mut rng = seeded_rng(seed);
        let data: Vec<f64> = (0..16 * 24 * 3).map(|_| rng.random_range(0.1..0.9)).collect();
        Image::new(16, 24, data).unwrap()
    }

    #[test]
    fn parameter_count_is_about_fifty_thousand() {
        assert!((45_000..55_000).contains(&PARAM_COUNT), "{PARAM_COUNT}");
    }

    #[test]
    fn fresh_network_is_identity() {
        let m = RestorationModel::init(&mut seeded_rng(0));
        let img = textured(1);
        assert_eq!(m.forward(&img).unwrap(), img);
    }

    #[test]
    fn rejects_sides_off_the_cell_grid() {
        let m = RestorationModel::init(&mut seeded_rng(0));
        assert!(m.forward(&Image::filled(12, 16, 0.5).unwrap()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seeded_rng(3);
        let mut m = RestorationModel::init(&mut rng);
        // non-zero head so every block receives gradient
        for p in &mut m.params_mut()[L.wh..] {
            *p = rng.random_range(-0.05..0.05);
        }
        let img = textured(4);
        let weights: Vec<f64> = (0..img.as_slice().len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |model: &RestorationModel| -> f64 {
            let t = model.forward_tape(&img).unwrap();
            t.pre.iter().map(|v| v.clamp(0.0, 1.0)).zip(&weights).map(|(a, b)| a * b).sum()
        };
        let tape = m.forward_tape(&img).unwrap();
        let grad = m.backward(&tape, &weights).unwrap();
        let blocks = [L.w1, L.b1, L.wg1, L.bg1, L.wg2, L.bg2, L.wc, L.bc, L.wh, L.bh];
        let mut checked = 0;
        for (b, &start) in blocks.iter().enumerate() {
            let end = blocks.get(b + 1).copied().unwrap_or(PARAM_COUNT);
            for _ in 0..4 {
                let i = rng.random_range(start..end);
                let h = 1e-6;
                let mut plus = m.clone();
                plus.params_mut()[i] += h;
                let mut minus = m.clone();
                minus.params_mut()[i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let scale = fd.abs().max(grad[i].abs()).max(1e-8);
                assert!((fd - grad[i]).abs() / scale < 1e-4 || (fd - grad[i]).abs() < 1e-9, "param {i}: fd {fd} vs {}", grad[i]);
                checked += 1;
            }
        }
        assert_eq!(checked, 40);
    }

    #[test]
    fn adam_moves_against_gradient_and_round_trips() {
        let mut adam = Adam::new(0.1, 2);
        let mut p = vec![1.0, -1.0];
        adam.update(&mut p, &[2.0, -3.0]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-9 && (p[1] + 0.9).abs() < 1e-9);
        let back = Adam::from_bytes(0.1, &adam.to_bytes()).unwrap();
        assert_eq!(back, adam);
    }

    #[test]
    fn params_round_trip() {
        let m = RestorationModel::init(&mut seeded_rng(9));
        assert_eq!(RestorationModel::from_bytes(&m.to_bytes()).unwrap(), m);
    }
}
