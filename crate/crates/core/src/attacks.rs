//! Localized adversarial patches: crafting, application, and scoring.
//!
//! A patch is a small pixel block pasted over a fixed or random
//! rectangle of each input. Crafting runs projected sign-gradient ascent
//! on the block — maximizing the true-label cross-entropy, or the
//! target-class log-probability in targeted mode — against any frozen
//! classifier that can build its logits on a tape. Success is counted on
//! the clean-correct subset, the convention under which a 100% rate
//! means every input the model got right was flipped.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TriqError};
use crate::models::{forward_with_taps, ModelDef, ParamSet, VariantSpecs};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

// ── patch data ─────────────────────────────────────────────────────────

/// How a patch was crafted: against the supplied images at one location,
/// or as one block reused across a dataset (optionally at random
/// locations during crafting).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchFamily {
    PerImage,
    Universal,
}

impl PatchFamily {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "per-image" => Ok(Self::PerImage),
            "universal" => Ok(Self::Universal),
            other => Err(TriqError::Config(format!(
                "unknown patch family {other:?}: expected per-image or universal"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::PerImage => "per-image",
            Self::Universal => "universal",
        }
    }
}

/// A crafted patch: its pixel block, where it sits, which bit-width
/// variant it was crafted against, and (for targeted patches) the class
/// it pushes toward.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSpec {
    /// `[c, ph, pw]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub row: usize,
    pub col: usize,
    pub source_bits: u8,
    pub family: PatchFamily,
    pub target_class: Option<usize>,
}

impl PatchSpec {
    pub fn size(&self) -> (usize, usize) {
        (self.pixels.shape()[1], self.pixels.shape()[2])
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.rank() != 3 {
            return Err(TriqError::InvalidArg(format!(
                "patch pixels must be [c, h, w], got {:?}",
                self.pixels.shape()
            )));
        }
        if self.pixels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(TriqError::InvalidArg("patch pixel outside [0, 1]".into()));
        }
        Ok(())
    }

    /// The 0/1 coverage mask on an `h x w` image plane.
    pub fn mask(&self, h: usize, w: usize) -> Result<Tensor> {
        let (ph, pw) = self.size();
        check_fit(h, w, ph, pw, self.row, self.col)?;
        let mut m = vec![0.0; h * w];
        for y in self.row..self.row + ph {
            for x in self.col..self.col + pw {
                m[y * w + x] = 1.0;
            }
        }
        Ok(Tensor::new(vec![h, w], m).unwrap())
    }
}

fn check_fit(h: usize, w: usize, ph: usize, pw: usize, row: usize, col: usize) -> Result<()> {
    if row + ph > h || col + pw > w {
        return Err(TriqError::InvalidArg(format!(
            "{ph}x{pw} patch at ({row}, {col}) exceeds the {h}x{w} image bounds"
        )));
    }
    Ok(())
}

/// Crafting hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub targeted: bool,
    /// Universal crafting re-draws each image's patch location every
    /// iteration instead of using the fixed one.
    pub random_location: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 40,
            step_size: 0.05,
            targeted: true,
            random_location: false,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(TriqError::InvalidArg("crafting needs at least one iteration".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(TriqError::InvalidArg(format!(
                "step size must be positive and finite, got {}",
                self.step_size
            )));
        }
        Ok(())
    }
}

// ── attack targets ─────────────────────────────────────────────────────

/// Anything a patch can be crafted against or scored on: a classifier
/// that can lay its logits onto a caller's tape.
pub trait Classifier {
    fn classes(&self) -> usize;
    /// Expected input planes as `(channels, height, width)`.
    fn input_chw(&self) -> (usize, usize, usize);
    fn logits(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId>;
}

/// One quantized variant of the shared-weight ensemble, frozen for
/// attack crafting or evaluation.
pub struct VariantModel<'a> {
    def: &'a ModelDef,
    params: &'a ParamSet,
    specs: VariantSpecs,
}

impl<'a> VariantModel<'a> {
    pub fn new(def: &'a ModelDef, params: &'a ParamSet, specs: VariantSpecs) -> Self {
        Self { def, params, specs }
    }

    pub fn bits(&self) -> u8 {
        self.specs.bits()
    }
}

impl Classifier for VariantModel<'_> {
    fn classes(&self) -> usize {
        self.def.classes()
    }

    fn input_chw(&self) -> (usize, usize, usize) {
        let (h, w) = self.def.input_hw();
        (self.def.in_channels(), h, w)
    }

    fn logits(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let bound = self.params.bind(tape);
        let (logits, _) = forward_with_taps(tape, self.def, &bound, &self.specs, x)?;
        Ok(logits)
    }
}

// ── application ────────────────────────────────────────────────────────

/// Pastes the patch over its rectangle in every image of a batch. Pixels
/// outside the rectangle are copied bit-identically.
pub fn apply_patch(x: &Tensor, p: &PatchSpec) -> Result<Tensor> {
    p.validate()?;
    let s = x.shape();
    if s.len() != 4 || s[1] != p.channels() {
        return Err(TriqError::ShapeMismatch {
            op: "apply_patch",
            lhs: s.to_vec(),
            rhs: p.pixels.shape().to_vec(),
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = p.size();
    check_fit(h, w, ph, pw, p.row, p.col)?;
    let mut out = x.data().to_vec();
    for im in 0..n {
        for ch in 0..c {
            for dy in 0..ph {
                for dx in 0..pw {
                    out[((im * c + ch) * h + p.row + dy) * w + p.col + dx] =
                        p.pixels.data()[(ch * ph + dy) * pw + dx];
                }
            }
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out).unwrap())
}

/// Gather map embedding a `[c, ph, pw]` block into `[n, c, h, w]` at
/// per-image locations (−1 entries read as zero), plus the complementary
/// keep-mask for the surrounding pixels.
fn embed_map(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ph: usize,
    pw: usize,
    locs: &[(usize, usize)],
) -> (Vec<i64>, Vec<f64>) {
    let mut map = vec![-1i64; n * c * h * w];
    let mut keep = vec![1.0; n * c * h * w];
    for im in 0..n {
        let (r0, c0) = locs[im];
        for ch in 0..c {
            for dy in 0..ph {
                for dx in 0..pw {
                    let at = ((im * c + ch) * h + r0 + dy) * w + c0 + dx;
                    map[at] = ((ch * ph + dy) * pw + dx) as i64;
                    keep[at] = 0.0;
                }
            }
        }
    }
    (map, keep)
}

/// Builds `x ⊙ (1−M) + P ⊙ M` on the tape so the objective can be
/// differentiated with respect to the patch leaf.
fn patched_batch(
    tape: &mut Tape,
    x: &Tensor,
    p_leaf: NodeId,
    locs: &[(usize, usize)],
) -> Result<NodeId> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ps = tape.shape_of(p_leaf).to_vec();
    let (map, keep) = embed_map(n, c, h, w, ps[1], ps[2], locs);
    let xc = tape.constant(x.clone());
    let keep_c = tape.constant(Tensor::new(s.to_vec(), keep).unwrap());
    let kept = tape.mul(xc, keep_c)?;
    let placed = tape.gather(p_leaf, Arc::new(map), s.to_vec())?;
    tape.add(kept, placed)
}

// ── crafting ───────────────────────────────────────────────────────────

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Crafts a patch against `model` on the given batch with projected
/// sign-gradient ascent. Targeted mode drives the batch toward
/// `target_class`; untargeted mode drives it off the true labels. The
/// same seed always yields the same patch, bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn craft_patch(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    size: (usize, usize),
    location: (usize, usize),
    family: PatchFamily,
    source_bits: u8,
    target_class: Option<usize>,
) -> Result<PatchSpec> {
    cfg.validate()?;
    let (c, h, w) = model.input_chw();
    let s = x.shape();
    if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w || s[0] == 0 {
        return Err(TriqError::ShapeMismatch {
            op: "craft_patch",
            lhs: s.to_vec(),
            rhs: vec![0, c, h, w],
        });
    }
    let n = s[0];
    if labels.len() != n {
        return Err(TriqError::InvalidArg(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let (ph, pw) = size;
    if ph == 0 || pw == 0 {
        return Err(TriqError::InvalidArg("patch size must be nonzero".into()));
    }
    check_fit(h, w, ph, pw, location.0, location.1)?;
    let objective_labels: Vec<usize> = if cfg.targeted {
        let t = target_class.ok_or_else(|| {
            TriqError::InvalidArg("targeted crafting needs a target class".into())
        })?;
        if t >= model.classes() {
            return Err(TriqError::InvalidArg(format!(
                "target class {t} out of range for {} classes",
                model.classes()
            )));
        }
        vec![t; n]
    } else {
        labels.to_vec()
    };
    // Ascend the true-label loss, or descend the target-class loss.
    let direction = if cfg.targeted { -1.0 } else { 1.0 };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pixels: Vec<f64> = (0..c * ph * pw).map(|_| rng.gen_range(0.0..1.0)).collect();

    for _ in 0..cfg.iterations {
        let locs: Vec<(usize, usize)> = if family == PatchFamily::Universal && cfg.random_location
        {
            (0..n)
                .map(|_| {
                    (
                        rng.gen_range(0..=h - ph),
                        rng.gen_range(0..=w - pw),
                    )
                })
                .collect()
        } else {
            vec![location; n]
        };
        let mut tape = Tape::new();
        let p_leaf = tape.leaf(
            Tensor::new(vec![c, ph, pw], pixels.clone()).unwrap(),
            true,
        );
        let xadv = patched_batch(&mut tape, x, p_leaf, &locs)?;
        let logits = model.logits(&mut tape, xadv)?;
        let ce = tape.softmax_cross_entropy(logits, &objective_labels)?;
        let grads = tape.backward(ce)?;
        let g = tape.grad_tensor(&grads, p_leaf);
        for (p, gv) in pixels.iter_mut().zip(g.data()) {
            *p = (*p + direction * cfg.step_size * sign(*gv)).clamp(0.0, 1.0);
        }
    }

    Ok(PatchSpec {
        pixels: Tensor::new(vec![c, ph, pw], pixels).unwrap(),
        row: location.0,
        col: location.1,
        source_bits,
        family,
        target_class,
    })
}

// ── scoring ────────────────────────────────────────────────────────────

pub(crate) fn predictions(model: &dyn Classifier, x: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let xc = tape.constant(x.clone());
    let logits = model.logits(&mut tape, xc)?;
    let v = tape.value(logits);
    let k = v.shape()[1];
    Ok(v.data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect())
}

/// Fraction of clean-correct inputs the patch defeats: sent to the
/// patch's target class (targeted), or knocked off the true label
/// (untargeted). Returns 0 when the model gets nothing right cleanly.
pub fn attack_success_rate(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    patch: &PatchSpec,
    targeted: bool,
) -> Result<f64> {
    let (hits, denom) = success_counts(model, x, labels, patch, targeted)?;
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(hits as f64 / denom as f64)
}

/// The raw (successes, clean-correct) pair behind the success rate, so
/// callers sweeping a dataset in chunks can pool counts before dividing.
pub(crate) fn success_counts(
    model: &dyn Classifier,
    x: &Tensor,
    labels: &[usize],
    patch: &PatchSpec,
    targeted: bool,
) -> Result<(usize, usize)> {
    let n = x.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(TriqError::InvalidArg(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    let target = if targeted {
        Some(patch.target_class.ok_or_else(|| {
            TriqError::InvalidArg("targeted scoring needs a patch with a target class".into())
        })?)
    } else {
        None
    };
    let clean = predictions(model, x)?;
    let adv = predictions(model, &apply_patch(x, patch)?)?;
    let mut denom = 0usize;
    let mut hits = 0usize;
    for i in 0..n {
        if clean[i] != labels[i] {
            continue;
        }
        denom += 1;
        let hit = match target {
            Some(t) => adv[i] == t,
            None => adv[i] != labels[i],
        };
        hits += usize::from(hit);
    }
    Ok((hits, denom))
}

// ── tests ──────────────────────────────────────────────────────────────
