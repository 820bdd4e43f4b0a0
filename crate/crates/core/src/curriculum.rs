//! Staged activation of bit-widths over a training run.
//!
//! Training starts with the two highest-precision variants and folds the
//! remaining bit-widths in one stage at a time, either on an even epoch
//! split (`staircase`) or at evenly spaced boundaries (`linear`). The
//! [`EnsembleState`] tracks which bits are live, owns the master weights
//! (one shared set, or one copy per bit), and keeps the per-bit
//! activation-quantizer statistics: a running maximum per site that
//! freezes after a configurable number of warm-up epochs.

use std::collections::BTreeMap;

use crate::error::{Result, TriqError};
use crate::models::{ModelDef, ParamSet, VariantSpecs};
use crate::quant::FULL_PRECISION_BITS;

// ── schedules ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleMode {
    Staircase,
    Linear,
}

impl ScheduleMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "staircase" => Ok(Self::Staircase),
            "linear" => Ok(Self::Linear),
            other => Err(TriqError::Config(format!(
                "unknown schedule mode {other:?}: expected staircase or linear"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Staircase => "staircase",
            Self::Linear => "linear",
        }
    }
}

/// One stage: the epoch it opens at and the bit-widths it folds in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage {
    pub start_epoch: usize,
    pub bits_added: Vec<u8>,
}

/// The full activation plan for a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurriculumSchedule {
    total_epochs: usize,
    mode: ScheduleMode,
    stages: Vec<Stage>,
}

fn check_bit_set(bits: &[u8]) -> Result<()> {
    if bits.is_empty() {
        return Err(TriqError::Config("bit set must not be empty".into()));
    }
    for &b in bits {
        if b != FULL_PRECISION_BITS && !(2..=8).contains(&b) {
            return Err(TriqError::Config(format!(
                "unsupported bit width {b}: expected 2..=8 or 32"
            )));
        }
    }
    if !bits.windows(2).all(|w| w[0] > w[1]) {
        return Err(TriqError::Config(format!(
            "bit set must be strictly descending, got {bits:?}"
        )));
    }
    Ok(())
}

/// Builds the staged plan: the top two bit-widths open at epoch 0, each
/// remaining one gets its own later stage. `staircase` splits the epoch
/// budget evenly (earlier stages absorb the remainder); `linear` opens
/// stage `i` of `s` at `floor(i * total / s)`.
pub fn build_schedule(
    total_epochs: usize,
    bits: &[u8],
    mode: ScheduleMode,
) -> Result<CurriculumSchedule> {
    check_bit_set(bits)?;
    let mut groups: Vec<Vec<u8>> = Vec::new();
    if bits.len() <= 2 {
        groups.push(bits.to_vec());
    } else {
        groups.push(bits[..2].to_vec());
        for &b in &bits[2..] {
            groups.push(vec![b]);
        }
    }
    let s = groups.len();
    if total_epochs < s {
        return Err(TriqError::Config(format!(
            "{total_epochs} epochs cannot host {s} curriculum stages"
        )));
    }
    let starts: Vec<usize> = match mode {
        ScheduleMode::Staircase => {
            let base = total_epochs / s;
            let rem = total_epochs % s;
            let mut acc = 0;
            (0..s)
                .map(|i| {
                    let here = acc;
                    acc += base + usize::from(i < rem);
                    here
                })
                .collect()
        }
        ScheduleMode::Linear => (0..s).map(|i| i * total_epochs / s).collect(),
    };
    let stages = starts
        .into_iter()
        .zip(groups)
        .map(|(start_epoch, bits_added)| Stage {
            start_epoch,
            bits_added,
        })
        .collect();
    Ok(CurriculumSchedule {
        total_epochs,
        mode,
        stages,
    })
}

impl CurriculumSchedule {
    /// A degenerate plan with every bit-width live from epoch 0 — what a
    /// run uses when the curriculum is switched off.
    pub fn all_at_once(total_epochs: usize, bits: &[u8]) -> Result<Self> {
        check_bit_set(bits)?;
        if total_epochs == 0 {
            return Err(TriqError::Config("0 epochs cannot host a stage".into()));
        }
        Ok(Self {
            total_epochs,
            mode: ScheduleMode::Staircase,
            stages: vec![Stage {
                start_epoch: 0,
                bits_added: bits.to_vec(),
            }],
        })
    }

    pub fn total_epochs(&self) -> usize {
        self.total_epochs
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    /// Every bit-width whose stage has opened by `epoch`, descending.
    pub fn active_bits(&self, epoch: usize) -> Result<Vec<u8>> {
        if epoch >= self.total_epochs {
            return Err(TriqError::InvalidArg(format!(
                "epoch {epoch} outside the {}-epoch schedule",
                self.total_epochs
            )));
        }
        let mut bits: Vec<u8> = self
            .stages
            .iter()
            .filter(|st| st.start_epoch <= epoch)
            .flat_map(|st| st.bits_added.iter().copied())
            .collect();
        bits.sort_unstable_by(|a, b| b.cmp(a));
        Ok(bits)
    }

    /// The full configured bit set, descending.
    pub fn all_bits(&self) -> Vec<u8> {
        let mut bits: Vec<u8> = self
            .stages
            .iter()
            .flat_map(|st| st.bits_added.iter().copied())
            .collect();
        bits.sort_unstable_by(|a, b| b.cmp(a));
        bits
    }
}

// ── ensemble state ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnsembleMode {
    /// One master weight set read by every variant (default).
    Shared,
    /// A separate weight copy per bit-width; late activations clone the
    /// nearest higher-precision copy, realising the warm start by hand.
    Independent,
}

impl EnsembleMode {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "shared" => Ok(Self::Shared),
            "independent" => Ok(Self::Independent),
            other => Err(TriqError::Config(format!(
                "unknown ensemble mode {other:?}: expected shared or independent"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Shared => "shared",
            Self::Independent => "independent",
        }
    }
}

/// Running |activation| maximum for one quantizer site of one variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActTracker {
    pub max_abs: f64,
    pub frozen: bool,
}

#[derive(Debug, Clone)]
struct BitState {
    activated_at: usize,
    trackers: Vec<ActTracker>,
    /// Present only in independent mode.
    own_weights: Option<ParamSet>,
}

/// Everything the training loop mutates: the master weights, the set of
/// live bit-widths with their activation epochs, and the per-bit
/// activation statistics.
#[derive(Debug, Clone)]
pub struct EnsembleState {
    def: ModelDef,
    mode: EnsembleMode,
    universe: Vec<u8>,
    act_warmup_epochs: usize,
    shared: ParamSet,
    bits: BTreeMap<u8, BitState>,
    epoch: usize,
}

impl EnsembleState {
    /// `universe` is the full configured bit set; only those bits can
    /// ever activate. `params` seeds the shared masters (and, in
    /// independent mode, the first activation's copy).
    pub fn new(
        def: ModelDef,
        params: ParamSet,
        mode: EnsembleMode,
        universe: &[u8],
        act_warmup_epochs: usize,
    ) -> Result<Self> {
        check_bit_set(universe)?;
        Ok(Self {
            def,
            mode,
            universe: universe.to_vec(),
            act_warmup_epochs,
            shared: params,
            bits: BTreeMap::new(),
            epoch: 0,
        })
    }

    pub fn def(&self) -> &ModelDef {
        &self.def
    }

    pub fn mode(&self) -> EnsembleMode {
        self.mode
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn universe(&self) -> &[u8] {
        &self.universe
    }

    /// Live bit-widths, descending.
    pub fn active_bits(&self) -> Vec<u8> {
        self.bits.keys().rev().copied().collect()
    }

    pub fn is_active(&self, bits: u8) -> bool {
        self.bits.contains_key(&bits)
    }

    /// Folds a new bit-width into the ensemble: fresh activation
    /// statistics start their warm-up now, and in independent mode the
    /// new variant's weights are cloned from the nearest
    /// higher-precision copy (the seed masters for the first stage).
    pub fn activate(&mut self, bits: u8) -> Result<()> {
        if self.bits.contains_key(&bits) {
            return Err(TriqError::InvalidArg(format!("bit width {bits} is already active")));
        }
        if !self.universe.contains(&bits) {
            return Err(TriqError::InvalidArg(format!(
                "bit width {bits} is not in the configured set {:?}",
                self.universe
            )));
        }
        let own_weights = match self.mode {
            EnsembleMode::Shared => None,
            EnsembleMode::Independent => {
                let source = self
                    .bits
                    .range(bits..)
                    .next()
                    .map(|(_, st)| st.own_weights.as_ref().expect("independent state"))
                    .unwrap_or(&self.shared);
                Some(source.clone())
            }
        };
        let sites = self.def.act_sites().len();
        self.bits.insert(
            bits,
            BitState {
                activated_at: self.epoch,
                trackers: vec![
                    ActTracker {
                        max_abs: 0.0,
                        frozen: false,
                    };
                    sites
                ],
                own_weights,
            },
        );
        Ok(())
    }

    /// The weights the given variant reads: the shared masters, or its
    /// own copy in independent mode.
    pub fn params(&self, bits: u8) -> Result<&ParamSet> {
        let st = self.state(bits)?;
        Ok(st.own_weights.as_ref().unwrap_or(&self.shared))
    }

    pub fn params_mut(&mut self, bits: u8) -> Result<&mut ParamSet> {
        self.state(bits)?;
        let st = self.bits.get_mut(&bits).unwrap();
        Ok(match st.own_weights.as_mut() {
            Some(own) => own,
            None => &mut self.shared,
        })
    }

    /// The shared masters, regardless of which bits are live.
    pub fn shared_params(&self) -> &ParamSet {
        &self.shared
    }

    pub fn shared_params_mut(&mut self) -> &mut ParamSet {
        &mut self.shared
    }

    /// Current quantizers for one live variant: weight scales freshly
    /// calibrated from that variant's current weights, activation scales
    /// from the tracked maxima.
    pub fn variant_specs(&self, bits: u8) -> Result<VariantSpecs> {
        let st = self.state(bits)?;
        let maxima: Vec<f64> = st.trackers.iter().map(|t| t.max_abs).collect();
        let params = st.own_weights.as_ref().unwrap_or(&self.shared);
        VariantSpecs::calibrated(&self.def, params, bits, &maxima)
    }

    /// Feeds one batch's per-site |activation| maxima into the running
    /// statistics. Frozen sites ignore the observation.
    pub fn observe_activations(&mut self, bits: u8, site_maxima: &[f64]) -> Result<()> {
        let sites = self.def.act_sites().len();
        if site_maxima.len() != sites {
            return Err(TriqError::InvalidArg(format!(
                "expected {sites} activation maxima, got {}",
                site_maxima.len()
            )));
        }
        self.state(bits)?;
        let st = self.bits.get_mut(&bits).unwrap();
        for (t, &m) in st.trackers.iter_mut().zip(site_maxima) {
            if !t.frozen {
                t.max_abs = t.max_abs.max(m.abs());
            }
        }
        Ok(())
    }

    /// Closes an epoch: bits whose warm-up has elapsed freeze their
    /// activation scales.
    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
        for st in self.bits.values_mut() {
            if self.epoch - st.activated_at >= self.act_warmup_epochs {
                for t in &mut st.trackers {
                    t.frozen = true;
                }
            }
        }
    }

    pub fn trackers(&self, bits: u8) -> Result<&[ActTracker]> {
        Ok(&self.state(bits)?.trackers)
    }

    /// Restores one bit's bookkeeping from a checkpoint.
    pub fn restore_bit(
        &mut self,
        bits: u8,
        activated_at: usize,
        trackers: Vec<ActTracker>,
        own_weights: Option<ParamSet>,
    ) -> Result<()> {
        if trackers.len() != self.def.act_sites().len() {
            return Err(TriqError::InvalidArg(
                "tracker count does not match the model's activation sites".into(),
            ));
        }
        if (own_weights.is_some()) != (self.mode == EnsembleMode::Independent) {
            return Err(TriqError::InvalidArg(
                "per-bit weights must be present exactly in independent mode".into(),
            ));
        }
        self.bits.insert(
            bits,
            BitState {
                activated_at,
                trackers,
                own_weights,
            },
        );
        Ok(())
    }

    pub fn activation_epoch(&self, bits: u8) -> Result<usize> {
        Ok(self.state(bits)?.activated_at)
    }

    /// Restores the epoch counter from a checkpoint.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    fn state(&self, bits: u8) -> Result<&BitState> {
        self.bits.get(&bits).ok_or_else(|| {
            TriqError::InvalidArg(format!(
                "bit width {bits} is not active (live: {:?})",
                self.active_bits()
            ))
        })
    }
}

/// How many unordered variant pairs the disalignment losses see.
pub fn pair_count(active: usize) -> usize {
    active * active.saturating_sub(1) / 2
}

// ── tests ──────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Architecture;
    use crate::quant;

    fn starts(s: &CurriculumSchedule) -> Vec<usize> {
        s.stages().iter().map(|st| st.start_epoch).collect()
    }

    #[test]
    fn four_stage_hundred_epoch_plan_opens_quarterly() {
        let s = build_schedule(100, &[32, 8, 5, 4, 2], ScheduleMode::Staircase).unwrap();
        assert_eq!(starts(&s), [0, 25, 50, 75]);
        let groups: Vec<Vec<u8>> = s.stages().iter().map(|st| st.bits_added.clone()).collect();
        assert_eq!(groups, [vec![32, 8], vec![5], vec![4], vec![2]]);

        assert_eq!(s.active_bits(0).unwrap(), [32, 8]);
        assert_eq!(s.active_bits(24).unwrap(), [32, 8]);
        assert_eq!(s.active_bits(25).unwrap(), [32, 8, 5]);
        assert_eq!(s.active_bits(99).unwrap(), [32, 8, 5, 4, 2]);
        assert!(s.active_bits(100).is_err());
        assert_eq!(s.all_bits(), [32, 8, 5, 4, 2]);
    }

    #[test]
    fn tight_and_degenerate_budgets_still_split() {
        let s = build_schedule(4, &[32, 8, 5, 4, 2], ScheduleMode::Staircase).unwrap();
        assert_eq!(starts(&s), [0, 1, 2, 3]);

        let single = build_schedule(60, &[32], ScheduleMode::Staircase).unwrap();
        assert_eq!(starts(&single), [0]);
        assert_eq!(single.active_bits(59).unwrap(), [32]);

        let pair = build_schedule(10, &[32, 4], ScheduleMode::Linear).unwrap();
        assert_eq!(starts(&pair), [0]);
        assert_eq!(pair.active_bits(0).unwrap(), [32, 4]);
    }

    #[test]
    fn staircase_remainder_goes_to_earlier_stages() {
        let s = build_schedule(10, &[32, 8, 5, 4, 2], ScheduleMode::Staircase).unwrap();
        // lengths 3, 3, 2, 2
        assert_eq!(starts(&s), [0, 3, 6, 8]);
    }

    #[test]
    fn linear_mode_spaces_boundaries_by_flooring() {
        let s = build_schedule(10, &[32, 8, 5, 4, 2], ScheduleMode::Linear).unwrap();
        assert_eq!(starts(&s), [0, 2, 5, 7]);
    }

    #[test]
    fn malformed_plans_are_rejected() {
        assert!(build_schedule(3, &[32, 8, 5, 4, 2], ScheduleMode::Staircase).is_err());
        assert!(build_schedule(50, &[8, 32], ScheduleMode::Staircase).is_err());
        assert!(build_schedule(50, &[32, 4, 4], ScheduleMode::Staircase).is_err());
        assert!(build_schedule(50, &[32, 9], ScheduleMode::Staircase).is_err());
        assert!(build_schedule(50, &[32, 1], ScheduleMode::Staircase).is_err());
        assert!(build_schedule(50, &[], ScheduleMode::Staircase).is_err());
        assert!(CurriculumSchedule::all_at_once(0, &[32, 4]).is_err());
    }

    #[test]
    fn active_set_only_grows() {
        for mode in [ScheduleMode::Staircase, ScheduleMode::Linear] {
            let s = build_schedule(17, &[32, 8, 4, 2], mode).unwrap();
            let mut prev: Vec<u8> = Vec::new();
            for e in 0..17 {
                let now = s.active_bits(e).unwrap();
                assert!(prev.iter().all(|b| now.contains(b)), "bit dropped at epoch {e}");
                prev = now;
            }
            assert_eq!(prev, s.all_bits());
        }
    }

    #[test]
    fn switched_off_curriculum_opens_everything_at_once() {
        let s = CurriculumSchedule::all_at_once(5, &[32, 4, 2]).unwrap();
        assert_eq!(starts(&s), [0]);
        assert_eq!(s.active_bits(0).unwrap(), [32, 4, 2]);
    }

    fn tiny_state(mode: EnsembleMode) -> EnsembleState {
        let def = ModelDef::new(Architecture::TinyCnnS, 1, 8, 8, 2).unwrap();
        let params = ParamSet::init(&def, 7);
        EnsembleState::new(def, params, mode, &[32, 5, 4, 2], 1).unwrap()
    }

    #[test]
    fn activation_bookkeeping_guards_its_invariants() {
        let mut st = tiny_state(EnsembleMode::Shared);
        assert!(st.active_bits().is_empty());
        st.activate(32).unwrap();
        st.activate(4).unwrap();
        assert_eq!(st.active_bits(), [32, 4]);
        assert!(st.activate(4).is_err(), "double activation");
        assert!(st.activate(3).is_err(), "outside the configured set");
        assert!(st.variant_specs(2).is_err(), "specs for a dormant bit");
        assert_eq!(st.activation_epoch(4).unwrap(), 0);
    }

    #[test]
    fn running_maxima_warm_up_then_freeze() {
        let mut st = tiny_state(EnsembleMode::Shared);
        st.activate(4).unwrap();
        let sites = st.def().act_sites().len();
        st.observe_activations(4, &vec![0.5; sites]).unwrap();
        st.observe_activations(4, &vec![0.8; sites]).unwrap();
        st.observe_activations(4, &vec![0.3; sites]).unwrap();
        assert!(st.trackers(4).unwrap().iter().all(|t| t.max_abs == 0.8 && !t.frozen));
        let spec = st.variant_specs(4).unwrap();
        assert!((spec.act_specs()[0].scale - 0.8 / 7.0).abs() < 1e-15);

        st.advance_epoch();
        assert!(st.trackers(4).unwrap().iter().all(|t| t.frozen));
        st.observe_activations(4, &vec![5.0; sites]).unwrap();
        assert!(st.trackers(4).unwrap().iter().all(|t| t.max_abs == 0.8));

        // A bit activated later warms up on its own clock.
        st.activate(2).unwrap();
        assert_eq!(st.activation_epoch(2).unwrap(), 1);
        st.observe_activations(2, &vec![0.6; sites]).unwrap();
        assert!(st.trackers(2).unwrap().iter().all(|t| t.max_abs == 0.6 && !t.frozen));
        st.advance_epoch();
        assert!(st.trackers(2).unwrap().iter().all(|t| t.frozen));

        assert!(st.observe_activations(4, &[1.0]).is_err(), "wrong site count");
    }

    #[test]
    fn weight_scales_recalibrate_from_current_masters() {
        let mut st = tiny_state(EnsembleMode::Shared);
        st.activate(4).unwrap();
        let before = st.variant_specs(4).unwrap().weight_specs()[0].unwrap().scale;
        let w = st.shared_params().get("conv1.w").unwrap();
        assert!((before - w.max_abs() / 7.0).abs() < 1e-15);

        for e in st.shared_params_mut().entries_mut() {
            if e.name == "conv1.w" {
                let doubled: Vec<f64> = e.tensor.data().iter().map(|v| v * 2.0).collect();
                e.tensor = crate::Tensor::new(e.tensor.shape().to_vec(), doubled).unwrap();
            }
        }
        let after = st.variant_specs(4).unwrap().weight_specs()[0].unwrap().scale;
        assert!((after - 2.0 * before).abs() < 1e-12);
    }

    #[test]
    fn full_precision_specs_are_identities() {
        let mut st = tiny_state(EnsembleMode::Shared);
        st.activate(32).unwrap();
        let specs = st.variant_specs(32).unwrap();
        assert_eq!(specs.bits(), 32);
        for s in specs.weight_specs().iter().flatten() {
            assert_eq!(s.bits, 32);
        }
        // 32-bit fake quantization is the identity, so this variant IS
        // the master model; the forward equivalence is asserted in the
        // model tests.
        let q = quant::quantize_values(
            st.shared_params().get("conv1.w").unwrap(),
            &specs.weight_specs()[0].unwrap(),
        );
        assert_eq!(q, *st.shared_params().get("conv1.w").unwrap());
    }

    #[test]
    fn independent_copies_diverge_and_warm_start_from_higher_bits() {
        let mut st = tiny_state(EnsembleMode::Independent);
        st.activate(32).unwrap();
        st.activate(4).unwrap();

        // Nudge only the 4-bit copy.
        for e in st.params_mut(4).unwrap().entries_mut() {
            if e.name == "conv1.b" {
                e.tensor = crate::Tensor::full(e.tensor.shape(), 0.25);
            }
        }
        let b32 = st.params(32).unwrap().get("conv1.b").unwrap().clone();
        let b4 = st.params(4).unwrap().get("conv1.b").unwrap().clone();
        assert!(b32.data().iter().all(|&v| v == 0.0));
        assert!(b4.data().iter().all(|&v| v == 0.25));

        // The next activation clones the nearest higher-precision copy:
        // 2-bit starts from the 4-bit weights, not the 32-bit ones.
        st.activate(2).unwrap();
        let b2 = st.params(2).unwrap().get("conv1.b").unwrap().clone();
        assert_eq!(b2, b4);
    }

    #[test]
    fn shared_mode_hands_every_bit_the_same_tensors() {
        let mut st = tiny_state(EnsembleMode::Shared);
        st.activate(32).unwrap();
        st.activate(2).unwrap();
        for e in st.params_mut(2).unwrap().entries_mut() {
            if e.name == "dense.b" {
                e.tensor = crate::Tensor::full(e.tensor.shape(), 1.5);
            }
        }
        assert_eq!(
            st.params(32).unwrap().get("dense.b").unwrap(),
            st.params(2).unwrap().get("dense.b").unwrap()
        );
    }

    #[test]
    fn pair_counts_follow_the_handshake_formula() {
        assert_eq!(pair_count(0), 0);
        assert_eq!(pair_count(1), 0);
        assert_eq!(pair_count(2), 1);
        assert_eq!(pair_count(4), 6);
    }
}
