//! Run configuration: a flat `key = value` text format with `[section]`
//! headers and `#` comments, parsed into a fully-typed [`RunConfig`]
//! and rendered back canonically (parse ∘ render is the identity).
//!
//! Every key has a default except `run.seed`, which is mandatory so no
//! run is ever accidentally unseeded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::curriculum::{CurriculumSchedule, EnsembleMode, ScheduleMode};
use crate::data::{cifar10_subset, data_dir, synthetic_shapes, Dataset};
use crate::error::{Result, TriqError};
use crate::losses::LossWeights;
use crate::models::Architecture;

// ── enums ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetChoice {
    SyntheticShapes,
    Cifar10Subset,
}

impl DatasetChoice {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic-shapes" => Ok(Self::SyntheticShapes),
            "cifar10-subset" => Ok(Self::Cifar10Subset),
            other => Err(TriqError::Config(format!(
                "unknown dataset {other:?}: expected synthetic-shapes or cifar10-subset"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SyntheticShapes => "synthetic-shapes",
            Self::Cifar10Subset => "cifar10-subset",
        }
    }
}

/// The training recipe: the undefended multi-bit baseline, adversarial
/// patch augmentation, the full defense, or its single-penalty
/// ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseMode {
    StandardQat,
    PatchAugmented,
    Triqdef,
    TriqdefNoFdp,
    TriqdefNoGpdp,
}

impl DefenseMode {
    pub const ALL: [DefenseMode; 5] = [
        Self::StandardQat,
        Self::PatchAugmented,
        Self::Triqdef,
        Self::TriqdefNoFdp,
        Self::TriqdefNoGpdp,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard-qat" => Ok(Self::StandardQat),
            "patch-augmented" => Ok(Self::PatchAugmented),
            "triqdef" => Ok(Self::Triqdef),
            "triqdef-no-fdp" => Ok(Self::TriqdefNoFdp),
            "triqdef-no-gpdp" => Ok(Self::TriqdefNoGpdp),
            other => Err(TriqError::Config(format!(
                "unknown mode {other:?}: expected standard-qat, patch-augmented, triqdef, triqdef-no-fdp or triqdef-no-gpdp"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::StandardQat => "standard-qat",
            Self::PatchAugmented => "patch-augmented",
            Self::Triqdef => "triqdef",
            Self::TriqdefNoFdp => "triqdef-no-fdp",
            Self::TriqdefNoGpdp => "triqdef-no-gpdp",
        }
    }

    /// Whether this mode trains on patched inputs at all.
    pub fn uses_patches(self) -> bool {
        !matches!(self, Self::StandardQat)
    }

    /// Effective penalty weights: ablation modes zero one of the two.
    pub fn effective_weights(self, w: &LossWeights) -> LossWeights {
        match self {
            Self::StandardQat | Self::PatchAugmented => LossWeights {
                lambda_fdp: 0.0,
                lambda_gpdp: 0.0,
                ..*w
            },
            Self::Triqdef => *w,
            Self::TriqdefNoFdp => LossWeights { lambda_fdp: 0.0, ..*w },
            Self::TriqdefNoGpdp => LossWeights { lambda_gpdp: 0.0, ..*w },
        }
    }
}

// ── sub-configs ────────────────────────────────────────────────────────

/// Image geometry and split sizes. For CIFAR only the split sizes
/// apply; the rest is fixed by the format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataConfig {
    pub classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub train: usize,
    pub eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            channels: 3,
            height: 32,
            width: 32,
            train: 2000,
            eval: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CurriculumConfig {
    pub enabled: bool,
    pub schedule: ScheduleMode,
    pub ensemble: EnsembleMode,
    /// Epochs a bit's activation scales keep adapting after it joins.
    pub act_warmup_epochs: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            schedule: ScheduleMode::Staircase,
            ensemble: EnsembleMode::Shared,
            act_warmup_epochs: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// The training patch pool: the cartesian product of sizes, locations,
/// and source bit-widths, each crafted with the same budget.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackPoolConfig {
    /// Side lengths of square patches.
    pub sizes: Vec<usize>,
    /// Upper-left corners as (row, col).
    pub locations: Vec<(usize, usize)>,
    /// Bit-width variants the patches are crafted against.
    pub source_bits: Vec<u8>,
    pub iterations: usize,
    pub step_size: f64,
    pub targeted: bool,
    pub target_class: usize,
    pub random_location: bool,
    /// Re-craft the pool from the current weights every this many
    /// epochs; 0 keeps the single pre-training pool for the whole run.
    pub refresh_epochs: usize,
}

impl Default for AttackPoolConfig {
    fn default() -> Self {
        Self {
            sizes: vec![5, 6],
            locations: vec![(2, 2), (20, 20)],
            source_bits: vec![32, 4],
            iterations: 40,
            step_size: 0.05,
            targeted: true,
            target_class: 0,
            random_location: false,
            refresh_epochs: 0,
        }
    }
}

/// One pool slot: the crafting geometry and source variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PoolEntry {
    pub size: (usize, usize),
    pub location: (usize, usize),
    pub source_bits: u8,
}

// ── the run configuration ──────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetChoice,
    pub mode: DefenseMode,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub data: DataConfig,
    pub architecture: Architecture,
    pub bits: Vec<u8>,
    pub curriculum: CurriculumConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub attack: AttackPoolConfig,
}

impl RunConfig {
    /// The desk-scale default run; only the seed has no default.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            dataset: DatasetChoice::SyntheticShapes,
            mode: DefenseMode::Triqdef,
            seed,
            epochs: 30,
            batch_size: 64,
            data: DataConfig::default(),
            architecture: Architecture::TinyCnnS,
            bits: vec![32, 5, 4, 2],
            curriculum: CurriculumConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            attack: AttackPoolConfig::default(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TriqError::Data {
            path: path.display().to_string(),
            offset: 0,
            msg: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Image geometry of this run as `(channels, height, width, classes)`.
    pub fn image_geometry(&self) -> (usize, usize, usize, usize) {
        match self.dataset {
            DatasetChoice::SyntheticShapes => (
                self.data.channels,
                self.data.height,
                self.data.width,
                self.data.classes,
            ),
            DatasetChoice::Cifar10Subset => (3, 32, 32, 10),
        }
    }

    /// The bit-activation schedule this run trains under.
    pub fn schedule(&self) -> Result<CurriculumSchedule> {
        if self.curriculum.enabled {
            crate::curriculum::build_schedule(self.epochs, &self.bits, self.curriculum.schedule)
        } else {
            CurriculumSchedule::all_at_once(self.epochs, &self.bits)
        }
    }

    /// Loads the train and eval splits this config names.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            DatasetChoice::SyntheticShapes => synthetic_shapes(
                self.data.classes,
                self.data.channels,
                self.data.height,
                self.data.width,
                self.data.train,
                self.data.eval,
                self.seed,
            ),
            DatasetChoice::Cifar10Subset => {
                cifar10_subset(&data_dir()?, self.data.train, self.data.eval, self.seed)
            }
        }
    }

    /// The pool slots: sizes x locations x source bits, in that
    /// nesting order.
    pub fn pool_entries(&self) -> Vec<PoolEntry> {
        let mut out = Vec::new();
        for &s in &self.attack.sizes {
            for &loc in &self.attack.locations {
                for &b in &self.attack.source_bits {
                    out.push(PoolEntry {
                        size: (s, s),
                        location: loc,
                        source_bits: b,
                    });
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TriqError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TriqError::Config("batch_size must be at least 1".into()));
        }
        self.schedule()?; // validates the bit set and the epoch budget
        self.loss.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(TriqError::Config(format!("lr must be positive, got {}", o.lr)));
        }
        if !(0.0..1.0).contains(&o.momentum) {
            return Err(TriqError::Config(format!(
                "momentum must be in [0, 1), got {}",
                o.momentum
            )));
        }
        if !(o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(TriqError::Config(format!(
                "weight_decay must be non-negative, got {}",
                o.weight_decay
            )));
        }
        let (channels, h, w, classes) = self.image_geometry();
        // The architecture must fit the image geometry (pooling depth).
        crate::models::ModelDef::new(self.architecture, channels, h, w, classes)?;
        if self.dataset == DatasetChoice::Cifar10Subset {
            let d = DataConfig::default();
            let fixed = DataConfig {
                train: self.data.train,
                eval: self.data.eval,
                ..d
            };
            if self.data != fixed {
                return Err(TriqError::Config(
                    "cifar10-subset fixes classes/channels/height/width; only data.train and data.eval apply".into(),
                ));
            }
        }
        let a = &self.attack;
        if a.sizes.is_empty() || a.locations.is_empty() || a.source_bits.is_empty() {
            return Err(TriqError::Config(
                "attack sizes, locations and source_bits must each be non-empty".into(),
            ));
        }
        for &s in &a.sizes {
            if s == 0 || s > h.min(w) {
                return Err(TriqError::Config(format!(
                    "patch size {s} does not fit a {h}x{w} image"
                )));
            }
            for &(r, c) in &a.locations {
                if r + s > h || c + s > w {
                    return Err(TriqError::Config(format!(
                        "patch size {s} at ({r}, {c}) exceeds the {h}x{w} image"
                    )));
                }
            }
        }
        for &b in &a.source_bits {
            if !self.bits.contains(&b) {
                return Err(TriqError::Config(format!(
                    "source bit-width {b} is not in the trained set {:?}",
                    self.bits
                )));
            }
        }
        if a.iterations == 0 {
            return Err(TriqError::Config("attack iterations must be at least 1".into()));
        }
        if !(a.step_size > 0.0 && a.step_size.is_finite()) {
            return Err(TriqError::Config(format!(
                "attack step_size must be positive, got {}",
                a.step_size
            )));
        }
        if a.targeted && a.target_class >= classes {
            return Err(TriqError::Config(format!(
                "target_class {} out of range for {classes} classes",
                a.target_class
            )));
        }
        Ok(())
    }

    // ── parsing ────────────────────────────────────────────────────────

    pub fn parse(text: &str) -> Result<Self> {
        let entries = collect_entries(text)?;
        let mut get = Fields::new(entries);

        let seed = get
            .take("run.seed")?
            .ok_or_else(|| TriqError::Config("run.seed is mandatory".into()))?;
        let seed = parse_num::<u64>(&seed)?;
        let mut cfg = RunConfig::with_seed(seed);

        if let Some(v) = get.take("run.dataset")? {
            cfg.dataset = DatasetChoice::parse(&v)?;
        }
        if let Some(v) = get.take("run.mode")? {
            cfg.mode = DefenseMode::parse(&v)?;
        }
        if let Some(v) = get.take("run.epochs")? {
            cfg.epochs = parse_num(&v)?;
        }
        if let Some(v) = get.take("run.batch_size")? {
            cfg.batch_size = parse_num(&v)?;
        }

        for (key, field) in [
            ("data.classes", &mut cfg.data.classes),
            ("data.channels", &mut cfg.data.channels),
            ("data.height", &mut cfg.data.height),
            ("data.width", &mut cfg.data.width),
            ("data.train", &mut cfg.data.train),
            ("data.eval", &mut cfg.data.eval),
        ] {
            if let Some(v) = get.take(key)? {
                *field = parse_num(&v)?;
            }
        }

        if let Some(v) = get.take("model.architecture")? {
            cfg.architecture = Architecture::parse(&v)?;
        }
        if let Some(v) = get.take("model.bits")? {
            cfg.bits = parse_list::<u8>(&v)?;
        }

        if let Some(v) = get.take("curriculum.enabled")? {
            cfg.curriculum.enabled = parse_bool(&v)?;
        }
        if let Some(v) = get.take("curriculum.schedule")? {
            cfg.curriculum.schedule = ScheduleMode::parse(&v)?;
        }
        if let Some(v) = get.take("curriculum.ensemble")? {
            cfg.curriculum.ensemble = EnsembleMode::parse(&v)?;
        }
        if let Some(v) = get.take("curriculum.act_warmup_epochs")? {
            cfg.curriculum.act_warmup_epochs = parse_num(&v)?;
        }

        for (key, field) in [
            ("loss.alpha", &mut cfg.loss.alpha),
            ("loss.beta", &mut cfg.loss.beta),
            ("loss.lambda_fdp", &mut cfg.loss.lambda_fdp),
            ("loss.lambda_gpdp", &mut cfg.loss.lambda_gpdp),
            ("optimizer.lr", &mut cfg.optimizer.lr),
            ("optimizer.momentum", &mut cfg.optimizer.momentum),
            ("optimizer.weight_decay", &mut cfg.optimizer.weight_decay),
            ("attack.step_size", &mut cfg.attack.step_size),
        ] {
            if let Some(v) = get.take(key)? {
                *field = parse_num(&v)?;
            }
        }

        if let Some(v) = get.take("attack.sizes")? {
            cfg.attack.sizes = parse_list::<usize>(&v)?;
        }
        if let Some(v) = get.take("attack.locations")? {
            cfg.attack.locations = parse_locations(&v)?;
        }
        if let Some(v) = get.take("attack.source_bits")? {
            cfg.attack.source_bits = parse_list::<u8>(&v)?;
        }
        if let Some(v) = get.take("attack.iterations")? {
            cfg.attack.iterations = parse_num(&v)?;
        }
        if let Some(v) = get.take("attack.targeted")? {
            cfg.attack.targeted = parse_bool(&v)?;
        }
        if let Some(v) = get.take("attack.target_class")? {
            cfg.attack.target_class = parse_num(&v)?;
        }
        if let Some(v) = get.take("attack.random_location")? {
            cfg.attack.random_location = parse_bool(&v)?;
        }
        if let Some(v) = get.take("attack.refresh_epochs")? {
            cfg.attack.refresh_epochs = parse_num(&v)?;
        }

        get.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders the full configuration in canonical form: every key
    /// explicit, sections and keys in fixed order. `parse` of the
    /// result reproduces `self` exactly.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "dataset = {}", self.dataset.name());
        let _ = writeln!(s, "mode = {}", self.mode.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "classes = {}", self.data.classes);
        let _ = writeln!(s, "channels = {}", self.data.channels);
        let _ = writeln!(s, "height = {}", self.data.height);
        let _ = writeln!(s, "width = {}", self.data.width);
        let _ = writeln!(s, "train = {}", self.data.train);
        let _ = writeln!(s, "eval = {}", self.data.eval);
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "architecture = {}", self.architecture.name());
        let _ = writeln!(s, "bits = {}", join(&self.bits));
        let _ = writeln!(s, "\n[curriculum]");
        let _ = writeln!(s, "enabled = {}", self.curriculum.enabled);
        let _ = writeln!(s, "schedule = {}", self.curriculum.schedule.name());
        let _ = writeln!(s, "ensemble = {}", self.curriculum.ensemble.name());
        let _ = writeln!(s, "act_warmup_epochs = {}", self.curriculum.act_warmup_epochs);
        let _ = writeln!(s, "\n[loss]");
        let _ = writeln!(s, "alpha = {}", self.loss.alpha);
        let _ = writeln!(s, "beta = {}", self.loss.beta);
        let _ = writeln!(s, "lambda_fdp = {}", self.loss.lambda_fdp);
        let _ = writeln!(s, "lambda_gpdp = {}", self.loss.lambda_gpdp);
        let _ = writeln!(s, "\n[optimizer]");
        let _ = writeln!(s, "lr = {}", self.optimizer.lr);
        let _ = writeln!(s, "momentum = {}", self.optimizer.momentum);
        let _ = writeln!(s, "weight_decay = {}", self.optimizer.weight_decay);
        let _ = writeln!(s, "\n[attack]");
        let _ = writeln!(s, "sizes = {}", join(&self.attack.sizes));
        let _ = writeln!(
            s,
            "locations = {}",
            self.attack
                .locations
                .iter()
                .map(|(r, c)| format!("{r}:{c}"))
                .collect::<Vec<_>>()
                .join(",")
        );
        let _ = writeln!(s, "source_bits = {}", join(&self.attack.source_bits));
        let _ = writeln!(s, "iterations = {}", self.attack.iterations);
        let _ = writeln!(s, "step_size = {}", self.attack.step_size);
        let _ = writeln!(s, "targeted = {}", self.attack.targeted);
        let _ = writeln!(s, "target_class = {}", self.attack.target_class);
        let _ = writeln!(s, "random_location = {}", self.attack.random_location);
        let _ = writeln!(s, "refresh_epochs = {}", self.attack.refresh_epochs);
        s
    }
}

// ── grammar ────────────────────────────────────────────────────────────

const SECTIONS: [&str; 7] = ["run", "data", "model", "curriculum", "loss", "optimizer", "attack"];

/// Lexes the text into `section.key -> (line, value)` with strict
/// errors: unknown sections, keys outside any section, duplicates, and
/// malformed lines all fail with their line number.
fn collect_entries(text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut entries = BTreeMap::new();
    let mut section: Option<&str> = None;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = match raw.find('#') {
            Some(at) => &raw[..at],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let name = inner.strip_suffix(']').ok_or_else(|| {
                TriqError::Config(format!("line {line_no}: unterminated section header {raw:?}"))
            })?;
            section = Some(
                SECTIONS
                    .iter()
                    .find(|&&s| s == name)
                    .copied()
                    .ok_or_else(|| {
                        TriqError::Config(format!("line {line_no}: unknown section [{name}]"))
                    })?,
            );
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            TriqError::Config(format!("line {line_no}: expected `key = value`, got {raw:?}"))
        })?;
        let section = section.ok_or_else(|| {
            TriqError::Config(format!("line {line_no}: key before any [section] header"))
        })?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() || value.is_empty() {
            return Err(TriqError::Config(format!(
                "line {line_no}: empty key or value in {raw:?}"
            )));
        }
        let full = format!("{section}.{key}");
        if let Some((first, _)) = entries.get(&full) {
            return Err(TriqError::Config(format!(
                "line {line_no}: duplicate key {full} (first set on line {first})"
            )));
        }
        entries.insert(full, (line_no, value.to_string()));
    }
    Ok(entries)
}

struct Fields {
    entries: BTreeMap<String, (usize, String)>,
}

impl Fields {
    fn new(entries: BTreeMap<String, (usize, String)>) -> Self {
        Self { entries }
    }

    fn take(&mut self, key: &str) -> Result<Option<String>> {
        Ok(self.entries.remove(key).map(|(_, v)| v))
    }

    /// Errors on the first key no field consumed.
    fn finish(self) -> Result<()> {
        if let Some((key, (line, _))) = self.entries.into_iter().next() {
            return Err(TriqError::Config(format!("line {line}: unknown key {key}")));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| TriqError::Config(format!("cannot parse number {v:?}")))
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(TriqError::Config(format!(
            "cannot parse boolean {other:?}: expected true or false"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_num(p.trim())).collect()
}

/// `row:col` pairs separated by commas, e.g. `2:2,20:20`.
fn parse_locations(v: &str) -> Result<Vec<(usize, usize)>> {
    v.split(',')
        .map(|p| {
            let (r, c) = p.trim().split_once(':').ok_or_else(|| {
                TriqError::Config(format!("location {p:?} is not of the form row:col"))
            })?;
            Ok((parse_num(r.trim())?, parse_num(c.trim())?))
        })
        .collect()
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

// ── tests ──────────────────────────────────────────────────────────────
