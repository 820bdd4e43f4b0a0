//! Post-training measurement: per-bit clean accuracy, patch transfer
//! matrices with a seen/unseen split, and cross-variant alignment
//! diagnostics over tap features and input gradients.
//!
//! Everything here reads a trained [`EnsembleState`] and produces plain
//! data: serializable report structs with stable cell ordering, plus CSV
//! renderings whose headers name the unit of every column.

use serde::{Deserialize, Serialize};

use crate::attacks::{self, apply_patch, Classifier, PatchSpec, VariantModel};
use crate::config::PoolEntry;
use crate::curriculum::EnsembleState;
use crate::data::Dataset;
use crate::error::{Result, TriqError};
use crate::models::forward_with_taps;
use crate::patch_io::PoolManifest;
use crate::perceptual::{cosine_of, hard_edge_iou, hard_hog_cosine, HogParams};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Images scored per forward pass when sweeping a whole dataset, so the
/// tape for one chunk stays small no matter how large the split is.
const EVAL_CHUNK: usize = 64;

/// Percentile at which Sobel magnitudes are binarized for the hard edge
/// IoU — the same threshold the soft binarizer defaults to.
const EDGE_PERCENTILE: f64 = 85.0;

/// Surface name used for the input-gradient rows of an alignment
/// report, alongside the model's tap names.
pub const INPUT_GRADIENT_SURFACE: &str = "input-gradient";

/// The three similarity metrics every alignment cell is scored with, in
/// report order.
pub const ALIGNMENT_METRICS: [&str; 3] = ["cosine", "edge-iou", "hog-cosine"];

const SCHEMA_VERSION: u32 = 1;

// ── clean accuracy ─────────────────────────────────────────────────────

/// Top-1 accuracy of one classifier over a whole dataset.
pub fn accuracy_of(model: &dyn Classifier, data: &Dataset) -> Result<f64> {
    accuracy_chunked(model, data, EVAL_CHUNK)
}

fn accuracy_chunked(model: &dyn Classifier, data: &Dataset, chunk: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(TriqError::InvalidArg(
            "cannot score accuracy on an empty dataset".into(),
        ));
    }
    let mut right = 0usize;
    for start in (0..data.len()).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk.max(1)).min(data.len())).collect();
        let (x, labels) = data.batch(&idx);
        let preds = attacks::predictions(model, &x)?;
        right += preds
            .iter()
            .zip(&labels)
            .filter(|(p, l)| *p == *l)
            .count();
    }
    Ok(right as f64 / data.len() as f64)
}

/// Per-bit clean accuracy of a trained ensemble. Each requested width
/// must be live in the ensemble — an unknown width has no calibrated
/// quantizers to evaluate and is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanAccuracy {
    pub bits: u8,
    pub accuracy: f64,
}

pub fn evaluate_clean(
    ens: &EnsembleState,
    data: &Dataset,
    bits: &[u8],
) -> Result<Vec<CleanAccuracy>> {
    if bits.is_empty() {
        return Err(TriqError::InvalidArg(
            "clean evaluation needs at least one bit width".into(),
        ));
    }
    let mut out = Vec::with_capacity(bits.len());
    for &b in bits {
        let specs = ens.variant_specs(b)?;
        let model = VariantModel::new(ens.def(), ens.params(b)?, specs);
        out.push(CleanAccuracy {
            bits: b,
            accuracy: accuracy_of(&model, data)?,
        });
    }
    Ok(out)
}

// ── transfer matrix ────────────────────────────────────────────────────

/// One (patch, target width) measurement: the success rate of a patch
/// crafted against `source_bits` when replayed on the `target_bits`
/// variant, and whether its (size, location, source bits) triple was in
/// the training-time pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub patch_id: usize,
    pub source_bits: u8,
    pub target_bits: u8,
    pub seen: bool,
    pub asr: f64,
}

/// Patch transferability across the ensemble's bit widths: every patch
/// in the pool replayed on every requested variant, plus the per-width
/// clean accuracies the success rates are conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub schema_version: u32,
    pub targeted: bool,
    pub clean: Vec<CleanAccuracy>,
    pub cells: Vec<TransferCell>,
}

impl TransferReport {
    /// Mean success rate over all patches crafted on `source` and
    /// replayed on `target`, or `None` when no cell matches.
    pub fn mean_for_pair(&self, source: u8, target: u8) -> Option<f64> {
        mean_of(
            self.cells
                .iter()
                .filter(|c| c.source_bits == source && c.target_bits == target)
                .map(|c| c.asr),
        )
    }

    /// Mean success rate, optionally restricted to seen or unseen
    /// patches and to cross-width cells (source != target).
    pub fn mean_asr(&self, seen: Option<bool>, cross_bit_only: bool) -> Option<f64> {
        mean_of(
            self.cells
                .iter()
                .filter(|c| seen.is_none_or(|s| c.seen == s))
                .filter(|c| !cross_bit_only || c.source_bits != c.target_bits)
                .map(|c| c.asr),
        )
    }

    /// Cell table as CSV; success rates are fractions in [0, 1].
    pub fn csv(&self) -> String {
        let mut s = String::from(
            "patch_id,source_bits,target_bits,seen,attack_success_rate_fraction\n",
        );
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.patch_id, c.source_bits, c.target_bits, c.seen, c.asr
            ));
        }
        s
    }

    /// Clean-accuracy table as CSV; accuracies are fractions in [0, 1].
    pub fn clean_csv(&self) -> String {
        let mut s = String::from("bits,clean_accuracy_fraction\n");
        for c in &self.clean {
            s.push_str(&format!("{},{}\n", c.bits, c.accuracy));
        }
        s
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn entry_of(p: &PatchSpec) -> PoolEntry {
    let s = p.pixels.shape();
    PoolEntry {
        size: (s[1], s[2]),
        location: (p.row, p.col),
        source_bits: p.source_bits,
    }
}

/// Replays every patch in `pool` on every requested bit width of a
/// trained ensemble and scores the success rate over `data`. A patch is
/// marked `seen` exactly when its (size, location, source bits) triple
/// appears in `training_pool`; with no manifest everything counts as
/// unseen. Cells are ordered patch-major, then by the order of `bits`.
pub fn transfer_matrix(
    ens: &EnsembleState,
    data: &Dataset,
    pool: &[PatchSpec],
    training_pool: Option<&PoolManifest>,
    bits: &[u8],
    targeted: bool,
) -> Result<TransferReport> {
    let clean = evaluate_clean(ens, data, bits)?;
    let mut cells = Vec::with_capacity(pool.len() * bits.len());
    for (id, patch) in pool.iter().enumerate() {
        patch.validate()?;
        let seen = training_pool.is_some_and(|m| m.contains(&entry_of(patch)));
        for &tb in bits {
            let specs = ens.variant_specs(tb)?;
            let model = VariantModel::new(ens.def(), ens.params(tb)?, specs);
            cells.push(TransferCell {
                patch_id: id,
                source_bits: patch.source_bits,
                target_bits: tb,
                seen,
                asr: asr_chunked(&model, data, patch, targeted)?,
            });
        }
    }
    Ok(TransferReport {
        schema_version: SCHEMA_VERSION,
        targeted,
        clean,
        cells,
    })
}

fn asr_chunked(
    model: &dyn Classifier,
    data: &Dataset,
    patch: &PatchSpec,
    targeted: bool,
) -> Result<f64> {
    let (mut hits, mut denom) = (0usize, 0usize);
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x, labels) = data.batch(&idx);
        let (h, d) = attacks::success_counts(model, &x, &labels, patch, targeted)?;
        hits += h;
        denom += d;
    }
    if denom == 0 {
        return Ok(0.0);
    }
    Ok(hits as f64 / denom as f64)
}

// ── alignment diagnostics ──────────────────────────────────────────────

/// One (bit pair, surface, metric) mean similarity over the eval batch.
/// Surfaces are the model's tap names plus [`INPUT_GRADIENT_SURFACE`];
/// metrics are [`ALIGNMENT_METRICS`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCell {
    pub bits_a: u8,
    pub bits_b: u8,
    pub surface: String,
    pub metric: String,
    pub value: f64,
}

/// How alike the ensemble's variants look from the inside: for every
/// unordered pair of bit widths (diagonal included), the mean per-image
/// similarity of tapped feature maps and of input CE gradients, under a
/// raw cosine and two perception-shaped metrics (edge-mask IoU and HOG
/// cosine on channel-mean planes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub schema_version: u32,
    pub batch: usize,
    pub patched: bool,
    pub cells: Vec<SimilarityCell>,
}

impl AlignmentReport {
    /// Looks a cell up by pair, surface and metric; pair order does not
    /// matter, so the report always reads as a symmetric matrix.
    pub fn value(&self, a: u8, b: u8, surface: &str, metric: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| {
                c.surface == surface
                    && c.metric == metric
                    && ((c.bits_a == a && c.bits_b == b) || (c.bits_a == b && c.bits_b == a))
            })
            .map(|c| c.value)
    }

    /// Cell table as CSV; similarities are unitless, cosines in [-1, 1]
    /// and IoU in [0, 1].
    pub fn csv(&self) -> String {
        let mut s = String::from("bits_a,bits_b,surface,metric,mean_similarity_unitless\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                c.bits_a, c.bits_b, c.surface, c.metric, c.value
            ));
        }
        s
    }
}

/// Everything one variant exposes on one surface: per image, the full
/// flattened tensor (for the raw cosine) and the channel-mean plane
/// (for the edge and HOG metrics).
struct SurfaceData {
    name: String,
    h: usize,
    w: usize,
    full: Vec<Vec<f64>>,
    plane: Vec<Vec<f64>>,
}

fn surface_data(name: &str, t: &Tensor) -> SurfaceData {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (hw, row) = (h * w, c * h * w);
    let mut full = Vec::with_capacity(n);
    let mut plane = Vec::with_capacity(n);
    for i in 0..n {
        let img = &t.data()[i * row..(i + 1) * row];
        full.push(img.to_vec());
        let mut p = vec![0.0; hw];
        for ch in 0..c {
            for (acc, v) in p.iter_mut().zip(&img[ch * hw..(ch + 1) * hw]) {
                *acc += v / c as f64;
            }
        }
        plane.push(p);
    }
    SurfaceData {
        name: name.to_string(),
        h,
        w,
        full,
        plane,
    }
}

/// One variant's surfaces on a fixed batch: the tapped feature maps and
/// the gradient of the mean CE loss with respect to the input.
fn variant_surfaces(
    ens: &EnsembleState,
    bits: u8,
    x: &Tensor,
    labels: &[usize],
    tap_names: &[String],
) -> Result<Vec<SurfaceData>> {
    let mut tape = Tape::new();
    let xl = tape.leaf(x.clone(), true);
    let bound = ens.params(bits)?.bind(&mut tape);
    let specs = ens.variant_specs(bits)?;
    let (logits, taps) = forward_with_taps(&mut tape, ens.def(), &bound, &specs, xl)?;
    let ce = tape.softmax_cross_entropy(logits, labels)?;
    let grads = tape.backward(ce)?;
    let gx = tape.grad_tensor(&grads, xl);
    let mut out = Vec::with_capacity(tap_names.len() + 1);
    for (name, node) in tap_names.iter().zip(&taps) {
        out.push(surface_data(name, tape.value(*node)));
    }
    out.push(surface_data(INPUT_GRADIENT_SURFACE, &gx));
    Ok(out)
}

/// Shrinks the HOG cell size until the descriptor grid fits the plane,
/// so the same metric works on full-resolution inputs and on small
/// late-stage feature maps alike.
fn hog_for_plane(h: usize, w: usize) -> HogParams {
    let mut p = HogParams::default();
    while p.cell > 1 && (h / p.cell < p.block || w / p.cell < p.block || h < 2 * p.cell || w < 2 * p.cell)
    {
        p.cell /= 2;
    }
    p
}

/// Compares the ensemble's variants pairwise on the first `batch` eval
/// images (patched when a patch is given): per bit pair and surface,
/// the mean per-image raw cosine, hard edge IoU and hard HOG cosine.
/// Cells appear pair-major in the order of `bits` (i <= j), surfaces in
/// tap order with the input gradient last, metrics in
/// [`ALIGNMENT_METRICS`] order.
pub fn alignment_report(
    ens: &EnsembleState,
    data: &Dataset,
    patch: Option<&PatchSpec>,
    bits: &[u8],
    batch: usize,
) -> Result<AlignmentReport> {
    if bits.is_empty() {
        return Err(TriqError::InvalidArg(
            "alignment needs at least one bit width".into(),
        ));
    }
    for (i, b) in bits.iter().enumerate() {
        if bits[..i].contains(b) {
            return Err(TriqError::InvalidArg(format!(
                "bit width {b} listed twice; the pair matrix needs distinct widths"
            )));
        }
    }
    if data.is_empty() || batch == 0 {
        return Err(TriqError::InvalidArg(
            "alignment needs a non-empty eval batch".into(),
        ));
    }
    let idx: Vec<usize> = (0..batch.min(data.len())).collect();
    let (mut x, labels) = data.batch(&idx);
    if let Some(p) = patch {
        x = apply_patch(&x, p)?;
    }
    let tap_names = ens.def().taps().names().to_vec();
    let per_bit: Vec<Vec<SurfaceData>> = bits
        .iter()
        .map(|&b| variant_surfaces(ens, b, &x, &labels, &tap_names))
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for i in 0..bits.len() {
        for j in i..bits.len() {
            for (sa, sb) in per_bit[i].iter().zip(&per_bit[j]) {
                let hp = hog_for_plane(sa.h, sa.w);
                let n = sa.full.len() as f64;
                let (mut cos, mut iou, mut hog) = (0.0, 0.0, 0.0);
                for k in 0..sa.full.len() {
                    cos += cosine_of(&sa.full[k], &sb.full[k]);
                    iou += hard_edge_iou(&sa.plane[k], &sb.plane[k], sa.h, sa.w, EDGE_PERCENTILE)?;
                    hog += hard_hog_cosine(&sa.plane[k], &sb.plane[k], sa.h, sa.w, &hp)?;
                }
                for (metric, total) in ALIGNMENT_METRICS.iter().zip([cos, iou, hog]) {
                    cells.push(SimilarityCell {
                        bits_a: bits[i],
                        bits_b: bits[j],
                        surface: sa.name.clone(),
                        metric: metric.to_string(),
                        value: total / n,
                    });
                }
            }
        }
    }
    Ok(AlignmentReport {
        schema_version: SCHEMA_VERSION,
        batch: idx.len(),
        patched: patch.is_some(),
        cells,
    })
}

// ── tests ──────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::PatchFamily;
    use crate::config::{DatasetChoice, DefenseMode, RunConfig};
    use crate::data::synthetic_shapes;
    use crate::tape::NodeId;
    use crate::train::Trainer;

    /// Ignores its input and always votes for one fixed class.
    struct ConstModel {
        classes: usize,
        favorite: usize,
        chw: (usize, usize, usize),
    }

    impl Classifier for ConstModel {
        fn classes(&self) -> usize {
            self.classes
        }
        fn input_chw(&self) -> (usize, usize, usize) {
            self.chw
        }
        fn logits(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
            let n = tape.shape_of(x).to_vec()[0];
            let mut row = vec![0.0; self.classes];
            row[self.favorite] = 1.0;
            let data: Vec<f64> = row.iter().cycle().take(n * self.classes).copied().collect();
            Ok(tape.constant(Tensor::new(vec![n, self.classes], data)?))
        }
    }

    fn tiny_cfg(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::with_seed(seed);
        cfg.mode = DefenseMode::StandardQat;
        cfg.dataset = DatasetChoice::SyntheticShapes;
        cfg.data.classes = 3;
        cfg.data.channels = 1;
        cfg.data.height = 12;
        cfg.data.width = 12;
        cfg.data.train = 18;
        cfg.data.eval = 9;
        cfg.epochs = 2;
        cfg.batch_size = 6;
        cfg.bits = vec![32, 4];
        cfg.curriculum.act_warmup_epochs = 1;
        cfg.attack.sizes = vec![3];
        cfg.attack.locations = vec![(1, 1)];
        cfg.attack.source_bits = vec![32];
        cfg.attack.iterations = 2;
        cfg.attack.target_class = 0;
        cfg
    }

    fn trained(seed: u64) -> (Trainer, Dataset, Dataset) {
        let cfg = tiny_cfg(seed);
        let (train, eval) = synthetic_shapes(
            cfg.data.classes,
            cfg.data.channels,
            cfg.data.height,
            cfg.data.width,
            cfg.data.train,
            cfg.data.eval,
            cfg.seed,
        )
        .unwrap();
        let mut t = Trainer::new(cfg).unwrap();
        let mut log = Vec::new();
        t.run(&train, &[], &mut log).unwrap();
        (t, train, eval)
    }

    fn flat_patch(size: usize, row: usize, col: usize, source_bits: u8, level: f64) -> PatchSpec {
        PatchSpec {
            pixels: Tensor::full(&[1, size, size], level),
            row,
            col,
            source_bits,
            family: PatchFamily::PerImage,
            target_class: Some(0),
        }
    }

    #[test]
    fn constant_model_accuracy_is_the_favorite_class_frequency() {
        let (images, labels) = (
            Tensor::full(&[7, 1, 8, 8], 0.5),
            vec![1, 0, 1, 2, 1, 0, 1],
        );
        let data = Dataset {
            images,
            labels,
            classes: 3,
        };
        let model = ConstModel {
            classes: 3,
            favorite: 1,
            chw: (1, 8, 8),
        };
        let acc = accuracy_of(&model, &data).unwrap();
        assert!((acc - 4.0 / 7.0).abs() < 1e-12);
        // Chunking must not change the count, including ragged tails.
        for chunk in [1, 2, 3, 100] {
            assert_eq!(accuracy_chunked(&model, &data, chunk).unwrap(), acc);
        }
        let empty = Dataset {
            images: Tensor::zeros(&[0, 1, 8, 8]),
            labels: vec![],
            classes: 3,
        };
        assert!(accuracy_of(&model, &empty).is_err());
    }

    #[test]
    fn clean_evaluation_covers_live_bits_and_rejects_dead_ones() {
        let (t, _, eval) = trained(7);
        let ens = t.ensemble();
        let report = evaluate_clean(ens, &eval, &[32, 4]).unwrap();
        assert_eq!(report.len(), 2);
        for c in &report {
            assert!((0.0..=1.0).contains(&c.accuracy), "{c:?}");
        }
        // The 32-bit row is the plain full-precision model, so scoring
        // an independently assembled identity variant must agree.
        let specs = crate::models::VariantSpecs::full_precision(ens.def(), ens.shared_params());
        let fp = VariantModel::new(ens.def(), ens.shared_params(), specs);
        assert_eq!(report[0].accuracy, accuracy_of(&fp, &eval).unwrap());
        assert!(evaluate_clean(ens, &eval, &[5]).is_err());
        assert!(evaluate_clean(ens, &eval, &[]).is_err());
    }

    #[test]
    fn transfer_cells_cover_every_patch_and_width_with_seen_marking() {
        let (t, _, eval) = trained(11);
        let ens = t.ensemble();
        let pool = vec![
            flat_patch(3, 1, 1, 32, 1.0),
            flat_patch(3, 4, 4, 4, 0.0),
        ];
        let dir = tempfile::tempdir().unwrap();
        crate::patch_io::write_pool(dir.path(), &pool[..1]).unwrap();
        let manifest = crate::patch_io::read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.entries(), vec![entry_of(&pool[0])]);
        let rep =
            transfer_matrix(ens, &eval, &pool, Some(&manifest), &[32, 4], true).unwrap();
        assert_eq!(rep.schema_version, 1);
        assert!(rep.targeted);
        assert_eq!(rep.clean, evaluate_clean(ens, &eval, &[32, 4]).unwrap());
        assert_eq!(rep.cells.len(), 4);
        let order: Vec<(usize, u8, bool)> = rep
            .cells
            .iter()
            .map(|c| (c.patch_id, c.target_bits, c.seen))
            .collect();
        assert_eq!(
            order,
            vec![(0, 32, true), (0, 4, true), (1, 32, false), (1, 4, false)]
        );
        for c in &rep.cells {
            assert!((0.0..=1.0).contains(&c.asr), "{c:?}");
            assert_eq!(c.source_bits, pool[c.patch_id].source_bits);
        }
        // Chunked scoring must agree with the one-shot rate.
        let specs = ens.variant_specs(4).unwrap();
        let model = VariantModel::new(ens.def(), ens.params(4).unwrap(), specs);
        let (x, labels) = eval.batch(&(0..eval.len()).collect::<Vec<_>>());
        let direct =
            attacks::attack_success_rate(&model, &x, &labels, &pool[0], true).unwrap();
        assert_eq!(rep.cells[1].asr, direct);
        // No manifest: everything is unseen.
        let rep2 = transfer_matrix(ens, &eval, &pool, None, &[4], true).unwrap();
        assert!(rep2.cells.iter().all(|c| !c.seen));
    }

    #[test]
    fn transfer_aggregates_average_the_right_cells() {
        let cells = vec![
            TransferCell { patch_id: 0, source_bits: 32, target_bits: 32, seen: true, asr: 1.0 },
            TransferCell { patch_id: 0, source_bits: 32, target_bits: 4, seen: true, asr: 0.5 },
            TransferCell { patch_id: 1, source_bits: 4, target_bits: 32, seen: false, asr: 0.25 },
            TransferCell { patch_id: 1, source_bits: 4, target_bits: 4, seen: false, asr: 0.75 },
        ];
        let rep = TransferReport {
            schema_version: 1,
            targeted: true,
            clean: vec![],
            cells,
        };
        assert_eq!(rep.mean_for_pair(32, 4), Some(0.5));
        assert_eq!(rep.mean_for_pair(2, 4), None);
        assert_eq!(rep.mean_asr(None, false), Some(0.625));
        assert_eq!(rep.mean_asr(Some(false), true), Some(0.25));
        assert_eq!(rep.mean_asr(Some(true), true), Some(0.5));
        let csv = rep.csv();
        assert!(csv.starts_with("patch_id,source_bits,target_bits,seen,attack_success_rate_fraction\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().ends_with(",true,1"));
        let round: TransferReport =
            serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        assert_eq!(round, rep);
    }

    #[test]
    fn alignment_diagonal_is_unit_and_lookup_is_symmetric() {
        let (t, _, eval) = trained(3);
        let ens = t.ensemble();
        let rep = alignment_report(ens, &eval, None, &[32, 4], 4).unwrap();
        assert_eq!(rep.batch, 4);
        assert!(!rep.patched);
        let taps = ens.def().taps().names().len();
        // 3 unordered pairs (incl. both diagonals) x surfaces x metrics.
        assert_eq!(rep.cells.len(), 3 * (taps + 1) * 3);
        for c in rep.cells.iter().filter(|c| c.bits_a == c.bits_b) {
            assert!(
                (c.value - 1.0).abs() < 1e-6,
                "self-similarity should be 1, got {c:?}"
            );
        }
        for name in ens
            .def()
            .taps()
            .names()
            .iter()
            .map(String::as_str)
            .chain([INPUT_GRADIENT_SURFACE])
        {
            for m in ALIGNMENT_METRICS {
                let ab = rep.value(32, 4, name, m).unwrap();
                let ba = rep.value(4, 32, name, m).unwrap();
                assert_eq!(ab, ba);
                assert!(ab.is_finite());
            }
        }
        assert!(rep.value(32, 5, INPUT_GRADIENT_SURFACE, "cosine").is_none());
        let csv = rep.csv();
        assert!(csv.starts_with("bits_a,bits_b,surface,metric,mean_similarity_unitless\n"));
        assert_eq!(csv.lines().count(), rep.cells.len() + 1);
        let round: AlignmentReport =
            serde_json::from_str(&serde_json::to_string(&rep).unwrap()).unwrap();
        assert_eq!(round, rep);
    }

    #[test]
    fn alignment_rejects_duplicates_and_reacts_to_the_patch() {
        let (t, _, eval) = trained(5);
        let ens = t.ensemble();
        assert!(alignment_report(ens, &eval, None, &[4, 4], 4).is_err());
        assert!(alignment_report(ens, &eval, None, &[], 4).is_err());
        assert!(alignment_report(ens, &eval, None, &[32], 0).is_err());
        let clean = alignment_report(ens, &eval, None, &[32, 4], 4).unwrap();
        let patch = flat_patch(4, 2, 2, 32, 1.0);
        let patched = alignment_report(ens, &eval, Some(&patch), &[32, 4], 4).unwrap();
        assert!(patched.patched);
        assert_ne!(clean.cells, patched.cells);
    }

    #[test]
    fn hog_cells_shrink_to_fit_small_planes() {
        let p = hog_for_plane(32, 32);
        assert_eq!(p.cell, 4);
        let p = hog_for_plane(6, 6);
        assert_eq!(p.cell, 2);
        let p = hog_for_plane(3, 3);
        assert_eq!(p.cell, 1);
        // The shrunken grid must satisfy the descriptor's own checks.
        let plane = vec![0.5; 36];
        assert!(hard_hog_cosine(&plane, &plane, 6, 6, &hog_for_plane(6, 6)).is_ok());
    }
}
