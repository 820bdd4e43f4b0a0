//! The training loop: shared-weight multi-bit QAT with the optional
//! perceptual disalignment penalties, under the bit-activation
//! curriculum.
//!
//! Each step samples a batch and (in patch modes) a pool patch, runs a
//! clean forward per active bit for the cross-entropy terms, a patched
//! forward per active bit for the feature penalty taps and the
//! per-variant input gradients, assembles the total objective, and takes
//! one SGD-with-momentum step on the master weights. Everything is
//! driven by a single seeded stream, so a fixed config reproduces the
//! run bit for bit.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{apply_patch, PatchSpec};
use crate::config::{DefenseMode, RunConfig};
use crate::curriculum::{pair_count, EnsembleMode, EnsembleState};
use crate::data::Dataset;
use crate::error::{Result, TriqError};
use crate::losses::{fdp_loss, gpdp_loss, total_loss, VariantGrad, VariantTaps};
use crate::models::{forward_traced, BoundParams, ModelDef, ParamSet, VariantSpecs};
use crate::perceptual::{HogParams, SoftBinarizeParams};
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;

/// One metrics log line; the training log is newline-delimited JSON of
/// these, one object per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub active_bits: Vec<u8>,
    pub l_clean: f64,
    pub l_fdp: f64,
    pub l_gpdp: f64,
    pub l_total: f64,
    /// Feature-penalty terms this step: tap sites x variant pairs.
    pub fdp_terms: usize,
    /// Gradient-penalty pairs this step: C(active bits, 2).
    pub gpdp_pairs: usize,
}

/// Momentum buffers aligned with a parameter set's entries.
type Buffers = Vec<Tensor>;

/// Training state: the ensemble, optimizer buffers, RNG, and progress
/// counters. Run it to completion with [`Trainer::run`]; persistence
/// snapshots and restores the whole struct.
#[derive(Debug)]
pub struct Trainer {
    pub(crate) cfg: RunConfig,
    pub(crate) ensemble: EnsembleState,
    pub(crate) shared_momentum: Buffers,
    pub(crate) per_bit_momentum: BTreeMap<u8, Buffers>,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) epoch: usize,
    pub(crate) step: usize,
}

impl Trainer {
    /// Fresh state at epoch zero: seeded weights, zero momentum, and
    /// the loop RNG on its own stream so it never replays the
    /// initialization draws.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (channels, h, w, classes) = cfg.image_geometry();
        let def = ModelDef::new(cfg.architecture, channels, h, w, classes)?;
        let params = ParamSet::init(&def, cfg.seed);
        let shared_momentum = zero_buffers(&params);
        let ensemble = EnsembleState::new(
            def,
            params,
            cfg.curriculum.ensemble,
            &cfg.bits,
            cfg.curriculum.act_warmup_epochs,
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            cfg,
            ensemble,
            shared_momentum,
            per_bit_momentum: BTreeMap::new(),
            rng,
            epoch: 0,
            step: 0,
        })
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn ensemble(&self) -> &EnsembleState {
        &self.ensemble
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// The learning rate at an epoch: the base rate decayed tenfold at
    /// half and at three quarters of the budget.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut lr = self.cfg.optimizer.lr;
        if epoch >= self.cfg.epochs / 2 {
            lr *= 0.1;
        }
        if epoch >= self.cfg.epochs * 3 / 4 {
            lr *= 0.1;
        }
        lr
    }

    /// Runs from the current epoch to the configured budget, writing
    /// one JSON metrics object per step to `log`.
    pub fn run(&mut self, data: &Dataset, pool: &[PatchSpec], log: &mut dyn Write) -> Result<()> {
        self.run_until(data, pool, log, self.cfg.epochs)
    }

    /// Runs up to (not past) `stop_epoch`, leaving the state resumable
    /// at an epoch boundary.
    ///
    /// With `refresh_epochs > 0` the pool is re-crafted from the
    /// highest-precision live variant's current weights at every
    /// boundary epoch that is a multiple of the interval; `pool` then
    /// only seeds the first interval. A resumed run re-creates the same
    /// refreshed pools when it resumes at such a boundary (the default,
    /// 0, keeps resumption bit-identical from any epoch).
    pub fn run_until(
        &mut self,
        data: &Dataset,
        pool: &[PatchSpec],
        log: &mut dyn Write,
        stop_epoch: usize,
    ) -> Result<()> {
        if self.cfg.mode.uses_patches() && pool.is_empty() {
            return Err(TriqError::InvalidArg(format!(
                "mode {} trains on patched inputs but the patch pool is empty",
                self.cfg.mode.name()
            )));
        }
        if data.is_empty() {
            return Err(TriqError::InvalidArg("training split is empty".into()));
        }
        let schedule = self.cfg.schedule()?;
        let mut live_pool = pool.to_vec();
        while self.epoch < self.cfg.epochs.min(stop_epoch) {
            for bits in schedule.active_bits(self.epoch)? {
                if !self.ensemble.is_active(bits) {
                    self.ensemble.activate(bits)?;
                    if self.ensemble.mode() == EnsembleMode::Independent {
                        let bufs = zero_buffers(self.ensemble.params(bits)?);
                        self.per_bit_momentum.insert(bits, bufs);
                    }
                }
            }
            let refresh = self.cfg.attack.refresh_epochs;
            if self.cfg.mode.uses_patches()
                && refresh > 0
                && self.epoch > 0
                && self.epoch % refresh == 0
            {
                let source = *self.ensemble.active_bits().iter().max().ok_or_else(|| {
                    TriqError::InvalidArg("pool refresh with no live bit widths".into())
                })?;
                live_pool = craft_pool(
                    &self.cfg,
                    self.ensemble.def(),
                    self.ensemble.params(source)?,
                    data,
                    self.cfg.batch_size,
                )?;
            }
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.cfg.batch_size.min(data.len())) {
                let (x, labels) = data.batch(chunk);
                let patch = if self.cfg.mode.uses_patches() {
                    Some(&live_pool[self.rng.gen_range(0..live_pool.len())])
                } else {
                    None
                };
                let metrics = self.training_step(&x, &labels, patch)?;
                serde_json::to_writer(&mut *log, &metrics)?;
                log.write_all(b"\n")?;
            }
            self.ensemble.advance_epoch();
            self.epoch += 1;
        }
        log.flush()?;
        Ok(())
    }

    /// One optimization step on one batch. Returns the logged metrics.
    fn training_step(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        patch: Option<&PatchSpec>,
    ) -> Result<StepMetrics> {
        let active = self.ensemble.active_bits();
        let w_eff = self.cfg.mode.effective_weights(&self.cfg.loss);
        let bin = SoftBinarizeParams::default();
        let hog = HogParams::default();

        let mut tape = Tape::new();
        let bound = self.bind_all(&mut tape, &active)?;
        let mut specs: BTreeMap<u8, VariantSpecs> = BTreeMap::new();
        for &b in &active {
            specs.insert(b, self.ensemble.variant_specs(b)?);
        }

        // Clean passes: one cross-entropy per active bit, and the
        // running activation maxima for the quantizer calibration.
        let def = self.ensemble.def().clone();
        let xc = tape.constant(x.clone());
        let mut clean_terms: Vec<(u8, NodeId)> = Vec::with_capacity(active.len());
        let mut maxima: Vec<(u8, Vec<f64>)> = Vec::with_capacity(active.len());
        for &b in &active {
            let fwd = forward_traced(&mut tape, &def, &bound[&b], &specs[&b], xc)?;
            let ce = tape.softmax_cross_entropy(fwd.logits, labels)?;
            clean_terms.push((b, ce));
            maxima.push((b, fwd.act_abs_max));
        }

        // Patched passes: taps for the feature penalty, per-variant
        // input gradients for the gradient penalty, and (for the
        // augmentation baseline) extra cross-entropy terms.
        let want_fdp = w_eff.lambda_fdp > 0.0 && active.len() >= 2;
        let want_gpdp = w_eff.lambda_gpdp > 0.0 && active.len() >= 2;
        let augment = self.cfg.mode == DefenseMode::PatchAugmented;
        let zero = tape.constant(Tensor::new(vec![], vec![0.0]).unwrap());
        let mut fdp = zero;
        let mut gpdp = zero;
        let mut fdp_terms = 0;
        let mut gpdp_pairs = 0;
        if let Some(p) = patch {
            let x_adv = tape.constant(apply_patch(x, p)?);
            let mut taps: Vec<VariantTaps> = Vec::new();
            let mut grads: Vec<VariantGrad> = Vec::new();
            let mut adv_ce: Vec<(u8, NodeId)> = Vec::new();
            for &b in &active {
                let fwd = forward_traced(&mut tape, &def, &bound[&b], &specs[&b], x_adv)?;
                if want_fdp {
                    taps.push(VariantTaps { bits: b, taps: fwd.taps });
                }
                if want_gpdp || augment {
                    let ce = tape.softmax_cross_entropy(fwd.logits, labels)?;
                    if want_gpdp {
                        let g = tape.grad_as_node(ce, x_adv)?;
                        grads.push(VariantGrad { bits: b, grad: g });
                    }
                    if augment {
                        adv_ce.push((b, ce));
                    }
                }
            }
            if want_fdp {
                fdp = fdp_loss(&mut tape, def.taps(), &taps, &bin, &hog, &w_eff)?;
                fdp_terms = def.taps().len() * pair_count(active.len());
            }
            if want_gpdp {
                gpdp = gpdp_loss(&mut tape, &grads, &bin, &hog, &w_eff)?;
                gpdp_pairs = pair_count(active.len());
            }
            for (b, ce) in adv_ce {
                let at = clean_terms.iter().position(|&(cb, _)| cb == b).unwrap();
                let combined = tape.add(clean_terms[at].1, ce)?;
                clean_terms[at] = (b, combined);
            }
        }

        let l_clean: f64 = clean_terms
            .iter()
            .map(|&(_, n)| tape.value(n).data()[0])
            .sum();
        let total = total_loss(&mut tape, &clean_terms, fdp, gpdp, &w_eff)?;
        let metrics = StepMetrics {
            step: self.step,
            epoch: self.epoch,
            active_bits: active.clone(),
            l_clean,
            l_fdp: tape.value(fdp).data()[0],
            l_gpdp: tape.value(gpdp).data()[0],
            l_total: tape.value(total).data()[0],
            fdp_terms,
            gpdp_pairs,
        };
        for (what, v) in [
            ("total", metrics.l_total),
            ("clean", metrics.l_clean),
            ("feature-penalty", metrics.l_fdp),
            ("gradient-penalty", metrics.l_gpdp),
        ] {
            if !v.is_finite() {
                return Err(TriqError::Numerical(format!(
                    "step {} epoch {}: non-finite {what} loss {v}",
                    self.step, self.epoch
                )));
            }
        }

        let grads = tape.backward(total)?;
        let lr = self.lr_at(self.epoch);
        match self.ensemble.mode() {
            EnsembleMode::Shared => {
                let b = &bound[&active[0]];
                let o = self.cfg.optimizer;
                sgd_step(
                    self.ensemble.shared_params_mut(),
                    &mut self.shared_momentum,
                    b,
                    &tape,
                    &grads,
                    lr,
                    o.momentum,
                    o.weight_decay,
                    self.step,
                )?;
            }
            EnsembleMode::Independent => {
                for &bits in &active {
                    let o = self.cfg.optimizer;
                    let bufs = self.per_bit_momentum.get_mut(&bits).ok_or_else(|| {
                        TriqError::InvalidArg(format!("no momentum buffers for {bits} bits"))
                    })?;
                    sgd_step(
                        self.ensemble.params_mut(bits)?,
                        bufs,
                        &bound[&bits],
                        &tape,
                        &grads,
                        lr,
                        o.momentum,
                        o.weight_decay,
                        self.step,
                    )?;
                }
            }
        }
        for (b, m) in maxima {
            self.ensemble.observe_activations(b, &m)?;
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Parameter leaves per active bit. Shared mode binds the masters
    /// once and reuses them, which is what couples every variant's
    /// gradients into the same accumulators.
    fn bind_all(&self, tape: &mut Tape, active: &[u8]) -> Result<BTreeMap<u8, BoundParams>> {
        let mut out = BTreeMap::new();
        match self.ensemble.mode() {
            EnsembleMode::Shared => {
                let b = self.ensemble.shared_params().bind(tape);
                for &bits in active {
                    out.insert(bits, b.clone());
                }
            }
            EnsembleMode::Independent => {
                for &bits in active {
                    out.insert(bits, self.ensemble.params(bits)?.bind(tape));
                }
            }
        }
        Ok(out)
    }
}

fn zero_buffers(params: &ParamSet) -> Buffers {
    params
        .entries()
        .iter()
        .map(|e| Tensor::zeros(e.tensor.shape()))
        .collect()
}

/// One SGD-with-momentum update: `g += wd*w; v = mu*v + g; w -= lr*v`,
/// failing loudly if any weight stops being finite.
#[allow(clippy::too_many_arguments)]
fn sgd_step(
    params: &mut ParamSet,
    bufs: &mut Buffers,
    bound: &BoundParams,
    tape: &Tape,
    grads: &Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    step: usize,
) -> Result<()> {
    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        let g = tape.grad_tensor(grads, bound.nodes()[i]);
        let v = bufs[i].data_mut();
        let w = entry.tensor.data_mut();
        for j in 0..w.len() {
            let gj = g.data()[j] + weight_decay * w[j];
            v[j] = momentum * v[j] + gj;
            w[j] -= lr * v[j];
            if !w[j].is_finite() {
                return Err(TriqError::Numerical(format!(
                    "step {step}: parameter {} diverged at element {j}",
                    entry.name
                )));
            }
        }
    }
    Ok(())
}

/// Crafts the training patch pool in a warm-up pass, before any
/// training: one patch per configured (size, location, source bits)
/// slot, each with its own derived seed. Quantized source variants get
/// their activation scales from a single full-precision calibration
/// forward over the crafting batch.
pub fn craft_pool(
    cfg: &RunConfig,
    def: &ModelDef,
    params: &ParamSet,
    data: &Dataset,
    batch: usize,
) -> Result<Vec<PatchSpec>> {
    use crate::attacks::{craft_patch, AttackConfig, PatchFamily, VariantModel};
    use crate::quant::FULL_PRECISION_BITS;
    let idx: Vec<usize> = (0..data.len().min(batch)).collect();
    let (x, labels) = data.batch(&idx);

    let act_max = {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xc = tape.constant(x.clone());
        let specs = VariantSpecs::full_precision(def, params);
        forward_traced(&mut tape, def, &bound, &specs, xc)?.act_abs_max
    };

    let mut out = Vec::new();
    for (i, entry) in cfg.pool_entries().into_iter().enumerate() {
        let specs = if entry.source_bits == FULL_PRECISION_BITS {
            VariantSpecs::full_precision(def, params)
        } else {
            VariantSpecs::calibrated(def, params, entry.source_bits, &act_max)?
        };
        let model = VariantModel::new(def, params, specs);
        let attack = AttackConfig {
            iterations: cfg.attack.iterations,
            step_size: cfg.attack.step_size,
            targeted: cfg.attack.targeted,
            random_location: cfg.attack.random_location,
            seed: cfg.seed.wrapping_add(1000 + i as u64),
        };
        let target = cfg.attack.targeted.then_some(cfg.attack.target_class);
        out.push(craft_patch(
            &model,
            &x,
            &labels,
            &attack,
            entry.size,
            entry.location,
            PatchFamily::Universal,
            entry.source_bits,
            target,
        )?);
    }
    Ok(out)
}

// ── tests ──────────────────────────────────────────────────────────────
