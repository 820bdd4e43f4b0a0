//! Perceptual similarity metrics in two routes.
//!
//! The differentiable route builds tape graphs: Sobel edge magnitude,
//! quantile soft-binarization, SoftDice overlap, and a soft HOG descriptor
//! whose orientation binning is temperature-smoothed so every stage admits
//! gradients (to second order — these graphs sit inside losses that are
//! themselves differentiated).
//!
//! The hard route (`hard_*`) is an independent, non-differentiable
//! reimplementation over plain slices — nearest-bin HOG with two-bin linear
//! interpolation, percentile-thresholded edge IoU — used for analysis
//! reports and as the oracle the soft route must approach in its sharp
//! limits (binarization sharpness k → ∞, HOG softness → 0).
//!
//! All batched node functions take `[n, h, w]` tensors: one single-channel
//! plane per image. Multi-channel features are reduced to a plane by the
//! caller (channel mean) before entering.

use std::sync::Arc;

use crate::error::{Result, TriqError};
use crate::tape::{maps, NodeId, Tape};
use crate::tensor::Tensor;

/// Inside the Sobel magnitude: `sqrt(gx^2 + gy^2 + SOBEL_EPS)`, so the
/// square root stays differentiable on flat regions.
pub const SOBEL_EPS: f64 = 1e-12;
/// Inside the HOG gradient magnitude, with `sqrt(eps)` subtracted back out
/// so a constant image yields exactly zero magnitude (and descriptor).
const HOG_MAG_EPS: f64 = 1e-20;
/// Added to squared block norms before the square root: block vectors are
/// divided by `sqrt(|v|^2 + BLOCK_NORM_EPS^2)`.
pub const BLOCK_NORM_EPS: f64 = 1e-6;
/// Denominator guard in cosine similarity.
const COSINE_EPS: f64 = 1e-12;
/// SoftDice denominator guard.
pub const DICE_EPS: f64 = 1e-6;

// ── parameters ─────────────────────────────────────────────────────────

/// Quantile soft-binarization: `sigmoid(k * (a - tau))` with `tau` the
/// q-th percentile of each image, treated as a constant under
/// differentiation (the percentile is piecewise constant almost
/// everywhere, so this is the only gradient convention that stays
/// well-defined).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoftBinarizeParams {
    /// Percentile in (0, 100) used as the threshold.
    pub q: f64,
    /// Sigmoid sharpness; the k -> inf limit is the hard indicator.
    pub k: f64,
}

impl Default for SoftBinarizeParams {
    fn default() -> Self {
        Self { q: 85.0, k: 100.0 }
    }
}

impl SoftBinarizeParams {
    fn validate(&self) -> Result<()> {
        if !(0.0 < self.q && self.q < 100.0) || !self.q.is_finite() {
            return Err(TriqError::InvalidArg(format!(
                "binarization percentile must lie in (0,100), got {}",
                self.q
            )));
        }
        if !(self.k > 0.0) || !self.k.is_finite() {
            return Err(TriqError::InvalidArg(format!(
                "binarization sharpness must be positive, got {}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Histogram-of-oriented-gradients layout shared by the soft and hard
/// routes: square cells, square blocks of cells with stride one cell,
/// unsigned orientations in [0, pi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HogParams {
    /// Pixels per cell side.
    pub cell: usize,
    /// Cells per block side (blocks overlap, stride one cell).
    pub block: usize,
    /// Orientation bins over [0, pi).
    pub bins: usize,
    /// Soft-assignment temperature. The classic descriptor splits each
    /// pixel's magnitude linearly between its two nearest bins — a tent
    /// function `max(0, 1 - d/binwidth)` of the wrapped angular distance d
    /// to each bin center. The soft route replaces the hard max with a
    /// softplus at this temperature, so the assignment is smooth
    /// everywhere and recovers the classic split exactly as
    /// softness -> 0. Only meaningful for the soft route.
    pub softness: f64,
}

impl Default for HogParams {
    fn default() -> Self {
        Self { cell: 4, block: 2, bins: 9, softness: 1.0 }
    }
}

impl HogParams {
    fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(TriqError::InvalidArg(format!(
                "HOG needs at least 2 orientation bins, got {}",
                self.bins
            )));
        }
        if self.cell == 0 || self.block == 0 {
            return Err(TriqError::InvalidArg(
                "HOG cell and block sizes must be positive".into(),
            ));
        }
        if !(self.softness > 0.0) || !self.softness.is_finite() {
            return Err(TriqError::InvalidArg(format!(
                "HOG softness must be positive, got {}",
                self.softness
            )));
        }
        Ok(())
    }

    fn bin_width(&self) -> f64 {
        std::f64::consts::PI / self.bins as f64
    }

    /// Grid this layout induces on an h x w plane, after center-cropping
    /// to a multiple of the cell size.
    fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h < 2 * self.cell || w < 2 * self.cell {
            return Err(TriqError::InvalidArg(format!(
                "plane {h}x{w} too small for HOG with {}-pixel cells \
                 (needs at least {} per side)",
                self.cell,
                2 * self.cell
            )));
        }
        let (ch, cw) = (h / self.cell, w / self.cell);
        if ch < self.block || cw < self.block {
            return Err(TriqError::InvalidArg(format!(
                "cell grid {ch}x{cw} smaller than a {}x{} block",
                self.block, self.block
            )));
        }
        Ok((ch, cw))
    }
}

// ── shared small pieces ────────────────────────────────────────────────

fn dims3(tape: &Tape, x: NodeId, what: &str) -> Result<(usize, usize, usize)> {
    let s = tape.shape_of(x);
    if s.len() != 3 {
        return Err(TriqError::InvalidArg(format!(
            "{what} expects an [images, height, width] tensor, got shape {s:?}"
        )));
    }
    Ok((s[0], s[1], s[2]))
}

/// Linear-interpolation percentile of `values` (q in (0,100)): the value at
/// fractional rank `q/100 * (len-1)` of the sorted data.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let r = q / 100.0 * (v.len() - 1) as f64;
    let lo = r.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    let frac = r - lo as f64;
    v[lo] + (v[hi] - v[lo]) * frac
}

/// Plain cosine of two equal-length slices; zero vectors give 0.
pub fn cosine_of(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv + COSINE_EPS)
}

/// Replicate-pads each plane of `[n,h,w]` by one pixel and cross-correlates
/// with a stack of 3x3 kernels, giving `[n, kernels, h, w]`.
fn pad_and_filter3(
    tape: &mut Tape,
    x: NodeId,
    n: usize,
    h: usize,
    w: usize,
    kernels: &[[f64; 9]],
) -> Result<NodeId> {
    let as_images = tape.reshape(x, &[n, 1, h, w])?;
    let pad_map = Arc::new(maps::replicate_pad(n, 1, h, w, 1));
    let padded = tape.gather(as_images, pad_map, vec![n, 1, h + 2, w + 2])?;
    let flat: Vec<f64> = kernels.iter().flatten().copied().collect();
    let k = tape.constant(Tensor::new(vec![kernels.len(), 1, 3, 3], flat)?);
    tape.conv2d(padded, k, 0)
}

fn slice_channel(
    tape: &mut Tape,
    x: NodeId,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ch: usize,
) -> Result<NodeId> {
    let map = Arc::new(maps::channel_slice(n, c, h, w, ch));
    tape.gather(x, map, vec![n, h, w])
}

// ── differentiable route ───────────────────────────────────────────────

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
/// Central differences along columns / rows.
const CDIFF_X: [f64; 9] = [0.0, 0.0, 0.0, -0.5, 0.0, 0.5, 0.0, 0.0, 0.0];
const CDIFF_Y: [f64; 9] = [0.0, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5, 0.0];

/// Sobel edge magnitude of each plane: `sqrt(gx^2 + gy^2 + 1e-12)` with
/// replicate padding, so the output has the input's spatial extent and a
/// constant plane maps to the numerically-zero floor `1e-6`.
pub fn sobel_magnitude(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let (n, h, w) = dims3(tape, x, "sobel_magnitude")?;
    if h < 3 || w < 3 {
        return Err(TriqError::InvalidArg(format!(
            "sobel_magnitude needs at least a 3x3 plane, got {h}x{w}"
        )));
    }
    let g = pad_and_filter3(tape, x, n, h, w, &[SOBEL_X, SOBEL_Y])?;
    let gx = slice_channel(tape, g, n, 2, h, w, 0)?;
    let gy = slice_channel(tape, g, n, 2, h, w, 1)?;
    let gx2 = tape.square(gx)?;
    let gy2 = tape.square(gy)?;
    let ss = tape.add(gx2, gy2)?;
    let guarded = tape.add_scalar(ss, SOBEL_EPS)?;
    tape.sqrt(guarded)
}

/// Per-pixel central-difference gradients `(gx, gy)` of each plane, with
/// replicate padding (border gradients use one-sided half differences).
pub fn central_gradients(tape: &mut Tape, x: NodeId) -> Result<(NodeId, NodeId)> {
    let (n, h, w) = dims3(tape, x, "central_gradients")?;
    let g = pad_and_filter3(tape, x, n, h, w, &[CDIFF_X, CDIFF_Y])?;
    let gx = slice_channel(tape, g, n, 2, h, w, 0)?;
    let gy = slice_channel(tape, g, n, 2, h, w, 1)?;
    Ok((gx, gy))
}

/// Soft-binarizes each plane at its own q-th percentile:
/// `sigmoid(k * (x - tau_image))`. The thresholds are computed from the
/// current values and frozen as constants.
pub fn soft_binarize(tape: &mut Tape, x: NodeId, p: &SoftBinarizeParams) -> Result<NodeId> {
    p.validate()?;
    let (n, h, w) = dims3(tape, x, "soft_binarize")?;
    let hw = h * w;
    let v = tape.value(x).data();
    let taus: Vec<f64> = (0..n).map(|i| percentile(&v[i * hw..(i + 1) * hw], p.q)).collect();
    let tau = tape.constant(Tensor::new(vec![n], taus)?);
    let tau_rows = tape.row_broadcast(tau, hw)?;
    let tau_bc = tape.reshape(tau_rows, &[n, h, w])?;
    let centered = tape.sub(x, tau_bc)?;
    let sharpened = tape.mul_scalar(centered, p.k)?;
    tape.sigmoid(sharpened)
}

/// SoftDice overlap `2*sum(a*b) / (sum(a) + sum(b) + 1e-6)` over the whole
/// batch, as a scalar node in [0, 1].
pub fn soft_dice(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let ab = tape.mul(a, b)?;
    let inter = tape.sum_all(ab)?;
    let num = tape.mul_scalar(inter, 2.0)?;
    let sa = tape.sum_all(a)?;
    let sb = tape.sum_all(b)?;
    let s = tape.add(sa, sb)?;
    let den = tape.add_scalar(s, DICE_EPS)?;
    tape.div(num, den)
}

/// SoftDice per image: `[n,h,w]` x `[n,h,w]` -> `[n]`, each entry the
/// overlap of one image pair.
pub fn soft_dice_per_image(tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (n, h, w) = dims3(tape, a, "soft_dice_per_image")?;
    let ab = tape.mul(a, b)?;
    let flat_ab = tape.reshape(ab, &[n, h * w])?;
    let inter = tape.row_sum(flat_ab)?;
    let num = tape.mul_scalar(inter, 2.0)?;
    let fa = tape.reshape(a, &[n, h * w])?;
    let fb = tape.reshape(b, &[n, h * w])?;
    let sa = tape.row_sum(fa)?;
    let sb = tape.row_sum(fb)?;
    let s = tape.add(sa, sb)?;
    let den = tape.add_scalar(s, DICE_EPS)?;
    tape.div(num, den)
}

/// Soft HOG descriptor of each plane: central-difference gradients,
/// temperature-smoothed assignment of gradient magnitude to orientation
/// bins (wrapped over the half-circle), cell pooling, overlapping block
/// L2 normalization. Returns `[n, descriptor_len]`; a constant plane
/// gives an exactly-zero descriptor row.
pub fn soft_hog(tape: &mut Tape, x: NodeId, p: &HogParams) -> Result<NodeId> {
    p.validate()?;
    let (n, h, w) = dims3(tape, x, "soft_hog")?;
    let (ch, cw) = p.grid(h, w)?;

    let (gx, gy) = central_gradients(tape, x)?;
    // Magnitude with the guard subtracted back out: flat regions give
    // exactly 0 while the square root stays differentiable there.
    let gx2 = tape.square(gx)?;
    let gy2 = tape.square(gy)?;
    let ss = tape.add(gx2, gy2)?;
    let guarded = tape.add_scalar(ss, HOG_MAG_EPS)?;
    let root = tape.sqrt(guarded)?;
    let mag = tape.add_scalar(root, -HOG_MAG_EPS.sqrt())?;
    let theta = tape.atan2(gy, gx)?;

    // Unnormalized bin weights. The classic assignment gives each bin the
    // tent weight max(0, 1 - d/binwidth) of the wrapped angular distance d
    // to its center (the half-circle wrap folds an orientation and its
    // opposite together); smoothing the max with a softplus at the given
    // temperature keeps every weight positive and differentiable while
    // converging to the classic split as softness -> 0. The softplus is
    // assembled in its overflow-safe form relu(z) + log(1 + exp(-|z|)).
    let bw = p.bin_width();
    let mut weights = Vec::with_capacity(p.bins);
    let mut total = None;
    for b in 0..p.bins {
        let center = (b as f64 + 0.5) * bw;
        let shifted = tape.add_scalar(theta, -center)?;
        let delta = tape.angle_wrap(shifted, std::f64::consts::PI)?;
        let dist = tape.abs(delta)?;
        let scaled = tape.mul_scalar(dist, -1.0 / bw)?;
        let tent = tape.add_scalar(scaled, 1.0)?;
        let z = tape.mul_scalar(tent, 1.0 / p.softness)?;
        let zpos = tape.relu(z)?;
        let zabs = tape.abs(z)?;
        let zneg = tape.mul_scalar(zabs, -1.0)?;
        let tail = tape.exp(zneg)?;
        let tail1 = tape.add_scalar(tail, 1.0)?;
        let logt = tape.log(tail1)?;
        let sp = tape.add(zpos, logt)?;
        let wgt = tape.mul_scalar(sp, p.softness)?;
        total = Some(match total {
            None => wgt,
            Some(t) => tape.add(t, wgt)?,
        });
        weights.push(wgt);
    }
    let total = total.unwrap();

    // Vote each pixel's magnitude into its bins and pool over cells.
    let mut cells = None;
    for (b, wgt) in weights.into_iter().enumerate() {
        let frac = tape.div(wgt, total)?;
        let vote = tape.mul(mag, frac)?;
        let (map, cshape) = maps::hog_cell_scatter(n, h, w, p.cell, p.bins, b);
        let sc = tape.scatter_add(vote, Arc::new(map), cshape)?;
        cells = Some(match cells {
            None => sc,
            Some(c) => tape.add(c, sc)?,
        });
    }
    let cells = cells.unwrap();

    // Overlapping blocks, each L2-normalized with a floor so empty blocks
    // stay exactly zero.
    let (bmap, bshape) = maps::hog_block_gather(n, p.bins, ch, cw, p.block);
    let nblocks = bshape[1];
    let blen = bshape[2];
    let blocks = tape.gather(cells, Arc::new(bmap), bshape)?;
    let rows = tape.reshape(blocks, &[n * nblocks, blen])?;
    let r2 = tape.square(rows)?;
    let ssq = tape.row_sum(r2)?;
    let guarded = tape.add_scalar(ssq, BLOCK_NORM_EPS * BLOCK_NORM_EPS)?;
    let norms = tape.sqrt(guarded)?;
    let norms_bc = tape.row_broadcast(norms, blen)?;
    let normed = tape.div(rows, norms_bc)?;
    tape.reshape(normed, &[n, nblocks * blen])
}

/// Row-wise cosine similarity of two `[n,d]` tensors -> `[n]`. Zero rows
/// give 0.
pub fn cosine_rows(tape: &mut Tape, u: NodeId, v: NodeId) -> Result<NodeId> {
    let su = tape.shape_of(u).to_vec();
    let sv = tape.shape_of(v).to_vec();
    if su.len() != 2 || su != sv {
        return Err(TriqError::ShapeMismatch { op: "cosine_rows", lhs: su, rhs: sv });
    }
    let uv = tape.mul(u, v)?;
    let dot = tape.row_sum(uv)?;
    let u2 = tape.square(u)?;
    let v2 = tape.square(v)?;
    let su2 = tape.row_sum(u2)?;
    let sv2 = tape.row_sum(v2)?;
    let gu = tape.add_scalar(su2, COSINE_EPS * COSINE_EPS)?;
    let gv = tape.add_scalar(sv2, COSINE_EPS * COSINE_EPS)?;
    let nu = tape.sqrt(gu)?;
    let nv = tape.sqrt(gv)?;
    let nn = tape.mul(nu, nv)?;
    let den = tape.add_scalar(nn, COSINE_EPS)?;
    tape.div(dot, den)
}

/// Cosine similarity of two flat vectors as a scalar node.
pub fn cosine_similarity(tape: &mut Tape, u: NodeId, v: NodeId) -> Result<NodeId> {
    let lu = tape.value(u).numel();
    let lv = tape.value(v).numel();
    if lu != lv {
        return Err(TriqError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: tape.shape_of(u).to_vec(),
            rhs: tape.shape_of(v).to_vec(),
        });
    }
    let ru = tape.reshape(u, &[1, lu])?;
    let rv = tape.reshape(v, &[1, lv])?;
    let c = cosine_rows(tape, ru, rv)?;
    tape.reshape(c, &[])
}

// ── hard route (analysis only) ─────────────────────────────────────────

/// Sobel magnitude of one plane by direct loops — independent of the tape
/// implementation, same replicate padding and guard.
pub fn hard_sobel(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(img.len(), h * w, "plane size mismatch");
    let at = |i: isize, j: isize| {
        let ii = i.clamp(0, h as isize - 1) as usize;
        let jj = j.clamp(0, w as isize - 1) as usize;
        img[ii * w + jj]
    };
    let mut out = vec![0.0; h * w];
    for i in 0..h as isize {
        for j in 0..w as isize {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for a in 0..3isize {
                for b in 0..3isize {
                    let v = at(i + a - 1, j + b - 1);
                    gx += v * SOBEL_X[(a * 3 + b) as usize];
                    gy += v * SOBEL_Y[(a * 3 + b) as usize];
                }
            }
            out[(i * w as isize + j) as usize] = (gx * gx + gy * gy + SOBEL_EPS).sqrt();
        }
    }
    out
}

/// Intersection-over-union of the two planes' edge masks, each binarized
/// at its own q-th percentile of Sobel magnitude (strictly above). An
/// empty union counts as perfect agreement, 1.
pub fn hard_edge_iou(a: &[f64], b: &[f64], h: usize, w: usize, q: f64) -> Result<f64> {
    if a.len() != b.len() || a.len() != h * w {
        return Err(TriqError::InvalidArg(format!(
            "edge IoU needs two {h}x{w} planes, got {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let ea = hard_sobel(a, h, w);
    let eb = hard_sobel(b, h, w);
    let ta = percentile(&ea, q);
    let tb = percentile(&eb, q);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in ea.iter().zip(&eb) {
        let ma = *x > ta;
        let mb = *y > tb;
        inter += (ma && mb) as usize;
        union += (ma || mb) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Classic HOG descriptor of one plane: central differences, unsigned
/// orientation, magnitude split linearly between the two nearest bins,
/// cell pooling and overlapping-block L2 normalization. Layout matches
/// [`soft_hog`] (blocks row-major; within a block: cell row, cell column,
/// bin).
pub fn hard_hog(img: &[f64], h: usize, w: usize, p: &HogParams) -> Result<Vec<f64>> {
    p.validate()?;
    let (ch, cw) = p.grid(h, w)?;
    if img.len() != h * w {
        return Err(TriqError::InvalidArg(format!(
            "HOG expects a {h}x{w} plane, got {} values",
            img.len()
        )));
    }
    let at = |i: isize, j: isize| {
        let ii = i.clamp(0, h as isize - 1) as usize;
        let jj = j.clamp(0, w as isize - 1) as usize;
        img[ii * w + jj]
    };
    let bw = p.bin_width();
    let (off_h, off_w) = ((h - ch * p.cell) / 2, (w - cw * p.cell) / 2);
    let mut cells = vec![0.0; p.bins * ch * cw];
    for cy in 0..ch {
        for cx in 0..cw {
            for dy in 0..p.cell {
                for dx in 0..p.cell {
                    let i = (off_h + cy * p.cell + dy) as isize;
                    let j = (off_w + cx * p.cell + dx) as isize;
                    let gx = 0.5 * (at(i, j + 1) - at(i, j - 1));
                    let gy = 0.5 * (at(i + 1, j) - at(i - 1, j));
                    let m = (gx * gx + gy * gy).sqrt();
                    if m == 0.0 {
                        continue;
                    }
                    let theta = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
                    let c = theta / bw - 0.5;
                    let b0 = c.floor();
                    let frac = c - b0;
                    let lo = (b0 as i64).rem_euclid(p.bins as i64) as usize;
                    let hi = (lo + 1) % p.bins;
                    cells[(lo * ch + cy) * cw + cx] += m * (1.0 - frac);
                    cells[(hi * ch + cy) * cw + cx] += m * frac;
                }
            }
        }
    }
    let nby = ch + 1 - p.block;
    let nbx = cw + 1 - p.block;
    let blen = p.block * p.block * p.bins;
    let mut out = Vec::with_capacity(nby * nbx * blen);
    for by in 0..nby {
        for bx in 0..nbx {
            let start = out.len();
            for dy in 0..p.block {
                for dx in 0..p.block {
                    for b in 0..p.bins {
                        out.push(cells[(b * ch + by + dy) * cw + bx + dx]);
                    }
                }
            }
            let ss: f64 = out[start..].iter().map(|v| v * v).sum();
            let norm = (ss + BLOCK_NORM_EPS * BLOCK_NORM_EPS).sqrt();
            for v in &mut out[start..] {
                *v /= norm;
            }
        }
    }
    Ok(out)
}

/// Cosine similarity between the classic HOG descriptors of two planes.
pub fn hard_hog_cosine(a: &[f64], b: &[f64], h: usize, w: usize, p: &HogParams) -> Result<f64> {
    if a.len() != b.len() {
        return Err(TriqError::InvalidArg(format!(
            "HOG cosine needs equal-size planes, got {} and {} values",
            a.len(),
            b.len()
        )));
    }
    let da = hard_hog(a, h, w, p)?;
    let db = hard_hog(b, h, w, p)?;
    Ok(cosine_of(&da, &db))
}

// ── tests ──────────────────────────────────────────────────────────────
