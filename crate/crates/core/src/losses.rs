//! Training objective for the multi-bit defense: perceptual disalignment
//! penalties that push the quantized bit variants to disagree about edge
//! structure and gradient texture, plus the total loss coupling them with
//! each variant's clean cross-entropy.
//!
//! Both penalties share one shape. For every unordered pair of variants,
//! score how *aligned* the pair still is — soft edge-mask overlap
//! (weighted by `alpha`) plus HOG cosine similarity (weighted by `beta`)
//! — per image, then average over the batch. The feature penalty sums
//! this over a set of tapped activation maps evaluated on patched
//! inputs; the gradient penalty applies the same score to input
//! gradients obtained with [`Tape::grad_as_node`], so its backward pass
//! differentiates through a differentiation.

use crate::perceptual::{self, HogParams, SoftBinarizeParams};
use crate::tape::{NodeId, Tape};
use crate::{Result, TriqError};

/// Scalar weights of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the edge-overlap (soft dice) half of each pair term.
    pub alpha: f64,
    /// Weight of the texture (HOG cosine) half of each pair term.
    pub beta: f64,
    /// Weight of the feature disalignment penalty in the total loss.
    pub lambda_fdp: f64,
    /// Weight of the gradient disalignment penalty in the total loss.
    pub lambda_gpdp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 1.0,
            lambda_fdp: 0.8,
            lambda_gpdp: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("lambda_fdp", self.lambda_fdp),
            ("lambda_gpdp", self.lambda_gpdp),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(TriqError::InvalidArg(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Ordered, named activation sites the feature penalty reads. A forward
/// pass yields exactly one map per site, in this order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerTapSet {
    names: Vec<String>,
}

impl LayerTapSet {
    pub fn new<S: Into<String>>(names: Vec<S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(TriqError::InvalidArg(
                "a tap set needs at least one site".into(),
            ));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(TriqError::InvalidArg(format!(
                    "duplicate tap site name {n:?}"
                )));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty() // always false by construction
    }
}

/// One bit variant's tapped activation maps, in tap-set order.
#[derive(Debug, Clone)]
pub struct VariantTaps {
    pub bits: u8,
    pub taps: Vec<NodeId>,
}

/// One bit variant's gradient w.r.t. the model input.
#[derive(Debug, Clone, Copy)]
pub struct VariantGrad {
    pub bits: u8,
    pub grad: NodeId,
}

/// The HOG layout adapted to an `h` x `w` plane: the cell size shrinks
/// until at least one block fits, so small tap maps keep a meaningful
/// descriptor instead of failing layout validation. Errors when even
/// one-pixel cells cannot fill a block.
pub fn hog_params_for_plane(base: &HogParams, h: usize, w: usize) -> Result<HogParams> {
    let need = base.block.max(2);
    let cap = h.min(w) / need;
    if cap == 0 {
        return Err(TriqError::InvalidArg(format!(
            "plane {h}x{w} too small to hold a {need}x{need}-cell HOG layout"
        )));
    }
    Ok(HogParams {
        cell: base.cell.min(cap),
        ..*base
    })
}

/// Processing order that makes the losses independent of the order the
/// variants are supplied in: ascending bit width, ties keeping supply
/// order. With the order fixed, the floating-point summation order is
/// fixed too, so permuted inputs give bit-identical results.
fn canonical_order(bits: impl Iterator<Item = u8>) -> Vec<usize> {
    let b: Vec<u8> = bits.collect();
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.sort_by_key(|&i| (b[i], i));
    order
}

/// Sum over unordered pairs of `alpha * dice + beta * cosine`, kept
/// per-image as an `[n]` node. `maps` are `[n,c,h,w]` activations (or
/// input gradients) of the same batch, one per variant; each is reduced
/// to per-image planes by a channel mean before the perceptual metrics.
fn disalignment(
    tape: &mut Tape,
    maps: &[NodeId],
    site: &str,
    bin: &SoftBinarizeParams,
    hog: &HogParams,
    w: &LossWeights,
) -> Result<NodeId> {
    let shape = tape.shape_of(maps[0]).to_vec();
    if shape.len() != 4 {
        return Err(TriqError::InvalidArg(format!(
            "{site}: expected [images, channels, height, width] maps, got {shape:?}"
        )));
    }
    for &m in maps {
        let s = tape.shape_of(m);
        if s != shape.as_slice() {
            return Err(TriqError::InvalidArg(format!(
                "{site}: variant shapes disagree: {shape:?} vs {s:?}"
            )));
        }
    }
    let hog_here = hog_params_for_plane(hog, shape[2], shape[3])?;

    let mut masks = Vec::with_capacity(maps.len());
    let mut descriptors = Vec::with_capacity(maps.len());
    for &m in maps {
        let plane = tape.channel_mean(m)?;
        let edges = perceptual::sobel_magnitude(tape, plane)?;
        masks.push(perceptual::soft_binarize(tape, edges, bin)?);
        descriptors.push(perceptual::soft_hog(tape, plane, &hog_here)?);
    }

    let mut acc: Option<NodeId> = None;
    for i in 0..maps.len() {
        for j in i + 1..maps.len() {
            let dice = perceptual::soft_dice_per_image(tape, masks[i], masks[j])?;
            let cos = perceptual::cosine_rows(tape, descriptors[i], descriptors[j])?;
            let da = tape.mul_scalar(dice, w.alpha)?;
            let cb = tape.mul_scalar(cos, w.beta)?;
            let term = tape.add(da, cb)?;
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
    }
    Ok(acc.expect("caller guarantees at least two maps"))
}

/// Feature disalignment penalty: for every tap site and every unordered
/// pair of bit variants, the alignment score of the two variants' maps,
/// summed over sites and pairs and averaged over the batch. All maps
/// must come from the same (patched) input batch. Lower means the
/// variants perceive patched inputs less alike.
pub fn fdp_loss(
    tape: &mut Tape,
    taps: &LayerTapSet,
    variants: &[VariantTaps],
    bin: &SoftBinarizeParams,
    hog: &HogParams,
    w: &LossWeights,
) -> Result<NodeId> {
    w.validate()?;
    if variants.len() < 2 {
        return Err(TriqError::InvalidArg(format!(
            "feature disalignment needs at least two bit variants, got {}",
            variants.len()
        )));
    }
    for v in variants {
        if v.taps.len() != taps.len() {
            return Err(TriqError::InvalidArg(format!(
                "variant at {} bits taps {} sites, expected {} ({:?})",
                v.bits,
                v.taps.len(),
                taps.len(),
                taps.names()
            )));
        }
        if v.taps.iter().any(|&t| !tape.owns(t)) {
            return Err(TriqError::InvalidArg(
                "feature disalignment: tap node is not on this tape".into(),
            ));
        }
    }

    let order = canonical_order(variants.iter().map(|v| v.bits));
    let mut per_image: Option<NodeId> = None;
    for (t, name) in taps.names().iter().enumerate() {
        let site: Vec<NodeId> = order.iter().map(|&vi| variants[vi].taps[t]).collect();
        let term = disalignment(tape, &site, name, bin, hog, w)?;
        per_image = Some(match per_image {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    tape.mean_all(per_image.expect("tap set is non-empty"))
}

/// Gradient disalignment penalty: the alignment score over unordered
/// pairs of per-variant input gradients, averaged over the batch. Each
/// gradient should be produced by [`Tape::grad_as_node`] of that
/// variant's cross-entropy on the patched batch, so this loss remains
/// differentiable into the weights through the double-backward path.
pub fn gpdp_loss(
    tape: &mut Tape,
    grads: &[VariantGrad],
    bin: &SoftBinarizeParams,
    hog: &HogParams,
    w: &LossWeights,
) -> Result<NodeId> {
    w.validate()?;
    if grads.len() < 2 {
        return Err(TriqError::InvalidArg(format!(
            "gradient disalignment needs at least two bit variants, got {}",
            grads.len()
        )));
    }
    if grads.iter().any(|g| !tape.owns(g.grad)) {
        return Err(TriqError::InvalidArg(
            "gradient disalignment: gradient node is not on this tape".into(),
        ));
    }
    let order = canonical_order(grads.iter().map(|g| g.bits));
    let maps: Vec<NodeId> = order.iter().map(|&i| grads[i].grad).collect();
    let term = disalignment(tape, &maps, "input gradients", bin, hog, w)?;
    tape.mean_all(term)
}

/// The combined training objective: clean cross-entropy summed over bit
/// variants, plus the weighted disalignment penalties. With both lambdas
/// zero this reduces exactly to the summed cross-entropy.
pub fn total_loss(
    tape: &mut Tape,
    clean_ce: &[(u8, NodeId)],
    fdp: NodeId,
    gpdp: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    w.validate()?;
    if clean_ce.is_empty() {
        return Err(TriqError::InvalidArg(
            "total loss needs at least one clean cross-entropy term".into(),
        ));
    }
    for &(bits, node) in clean_ce {
        check_scalar(tape, node, &format!("clean cross-entropy at {bits} bits"))?;
    }
    check_scalar(tape, fdp, "feature penalty")?;
    check_scalar(tape, gpdp, "gradient penalty")?;

    let order = canonical_order(clean_ce.iter().map(|&(b, _)| b));
    let mut acc = clean_ce[order[0]].1;
    for &i in &order[1..] {
        acc = tape.add(acc, clean_ce[i].1)?;
    }
    let f = tape.mul_scalar(fdp, w.lambda_fdp)?;
    let g = tape.mul_scalar(gpdp, w.lambda_gpdp)?;
    let with_f = tape.add(acc, f)?;
    tape.add(with_f, g)
}

fn check_scalar(tape: &Tape, node: NodeId, what: &str) -> Result<()> {
    if !tape.owns(node) {
        return Err(TriqError::InvalidArg(format!(
            "{what}: node is not on this tape"
        )));
    }
    if !tape.value(node).is_scalar() {
        return Err(TriqError::InvalidArg(format!(
            "{what}: expected a scalar, got shape {:?}",
            tape.shape_of(node)
        )));
    }
    Ok(())
}

// ── tests ──────────────────────────────────────────────────────────────
