//! Datasets: a seeded synthetic shape-classification generator and a
//! reader for the CIFAR-10 binary batch format with stratified
//! subsampling.
//!
//! Both loaders are deterministic under their seed, down to the byte.
//! The CIFAR root directory comes from the `TRIQDEF_DATA_DIR`
//! environment variable.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TriqError};
use crate::tensor::Tensor;

/// A labeled image set in `[n, c, h, w]` layout, pixels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copies the selected rows into a batch tensor plus its labels.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let s = self.images.shape();
        let row = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(idx.len() * row);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.images.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![idx.len(), s[1], s[2], s[3]], data).unwrap(),
            labels,
        )
    }
}

/// Root directory for on-disk datasets, from `TRIQDEF_DATA_DIR`.
pub fn data_dir() -> Result<PathBuf> {
    std::env::var_os("TRIQDEF_DATA_DIR")
        .map(PathBuf::from)
        .ok_or_else(|| {
            TriqError::Config(
                "TRIQDEF_DATA_DIR is not set; point it at the dataset root".into(),
            )
        })
}

/// Loads a named dataset at its default size: `synthetic-shapes` is
/// 2000/500 images of 3x32x32 over 4 classes; `cifar10-subset` is a
/// stratified 5000/1000 subset of the binary batches under
/// [`data_dir`].
pub fn load_dataset(name: &str, seed: u64) -> Result<(Dataset, Dataset)> {
    match name {
        "synthetic-shapes" => synthetic_shapes(4, 3, 32, 32, 2000, 500, seed),
        "cifar10-subset" => cifar10_subset(&data_dir()?, 5000, 1000, seed),
        other => Err(TriqError::Config(format!(
            "unknown dataset {other:?}: expected synthetic-shapes or cifar10-subset"
        ))),
    }
}

// ── synthetic shapes ───────────────────────────────────────────────────

/// The shape vocabulary, by class index.
const KINDS: [&str; 6] = ["square", "disk", "cross", "ring", "hstripes", "vstripes"];

/// Generates two splits of shape images: class `k` draws the `k`-th
/// entry of a fixed shape vocabulary with jittered position, size, and
/// intensity over low uniform noise. Labels cycle through the classes,
/// so per-class counts are equal up to one. One seeded stream drives
/// both splits, making the whole byte stream a function of the seed.
pub fn synthetic_shapes(
    classes: usize,
    channels: usize,
    h: usize,
    w: usize,
    train_n: usize,
    eval_n: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if !(2..=KINDS.len()).contains(&classes) {
        return Err(TriqError::InvalidArg(format!(
            "synthetic shapes supports 2..={} classes, got {classes}",
            KINDS.len()
        )));
    }
    if channels == 0 {
        return Err(TriqError::InvalidArg("images need at least one channel".into()));
    }
    if h < 8 || w < 8 {
        return Err(TriqError::InvalidArg(format!(
            "synthetic images must be at least 8x8, got {h}x{w}"
        )));
    }
    if train_n == 0 || eval_n == 0 {
        return Err(TriqError::InvalidArg("both splits need at least one image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = render_split(classes, channels, h, w, train_n, &mut rng);
    let eval = render_split(classes, channels, h, w, eval_n, &mut rng);
    Ok((train, eval))
}

fn render_split(
    classes: usize,
    channels: usize,
    h: usize,
    w: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let mut data = Vec::with_capacity(n * channels * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % classes;
        labels.push(class);
        render_image(class, channels, h, w, rng, &mut data);
    }
    Dataset {
        images: Tensor::new(vec![n, channels, h, w], data).unwrap(),
        labels,
        classes,
    }
}

fn render_image(
    class: usize,
    channels: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<f64>,
) {
    let m = h.min(w) as f64;
    let tints: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.7..1.0)).collect();
    let fg = rng.gen_range(0.8..1.0);
    let coverage = rasterize(class, h, w, m, rng);
    for &tint in &tints {
        for &c in &coverage {
            let noise = rng.gen_range(0.0..0.2);
            out.push((noise + c * fg * tint).clamp(0.0, 1.0));
        }
    }
}

/// 0/1 coverage plane for one shape instance.
fn rasterize(class: usize, h: usize, w: usize, m: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut plane = vec![0.0; h * w];
    // Jittered center kept far enough from the border for every kind.
    let cy = h as f64 / 2.0 + rng.gen_range(-0.1..0.1) * h as f64;
    let cx = w as f64 / 2.0 + rng.gen_range(-0.1..0.1) * w as f64;
    let mut fill = |pred: &dyn Fn(f64, f64) -> bool| {
        for y in 0..h {
            for x in 0..w {
                if pred(y as f64 - cy, x as f64 - cx) {
                    plane[y * w + x] = 1.0;
                }
            }
        }
    };
    match KINDS[class] {
        "square" => {
            let half = rng.gen_range(0.18..0.3) * m;
            fill(&|dy, dx| dy.abs() <= half && dx.abs() <= half);
        }
        "disk" => {
            let r = rng.gen_range(0.2..0.33) * m;
            fill(&|dy, dx| dy * dy + dx * dx <= r * r);
        }
        "cross" => {
            let t = (0.07 * m).max(0.9);
            let arm = rng.gen_range(0.28..0.42) * m;
            fill(&|dy, dx| {
                (dy.abs() <= t && dx.abs() <= arm) || (dx.abs() <= t && dy.abs() <= arm)
            });
        }
        "ring" => {
            let r = rng.gen_range(0.24..0.36) * m;
            let t = (0.09 * m).max(1.0);
            fill(&|dy, dx| ((dy * dy + dx * dx).sqrt() - r).abs() <= t);
        }
        "hstripes" => {
            let band = ((0.12 * m).round() as usize).max(1);
            let phase = rng.gen_range(0..2 * band);
            for y in 0..h {
                if ((y + phase) / band) % 2 == 0 {
                    plane[y * w..(y + 1) * w].fill(1.0);
                }
            }
        }
        "vstripes" => {
            let band = ((0.12 * m).round() as usize).max(1);
            let phase = rng.gen_range(0..2 * band);
            for y in 0..h {
                for x in 0..w {
                    if ((x + phase) / band) % 2 == 0 {
                        plane[y * w + x] = 1.0;
                    }
                }
            }
        }
        _ => unreachable!("class validated against the vocabulary"),
    }
    plane
}

// ── CIFAR-10 binary batches ────────────────────────────────────────────

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 10;

/// Reads the standard binary batches (`data_batch_1..5.bin`,
/// `test_batch.bin`) under `dir` and takes seeded stratified subsets:
/// per-class counts equal up to one for both splits. Pixel bytes scale
/// to `[0, 1]` by division with 255.
pub fn cifar10_subset(
    dir: &Path,
    train_n: usize,
    eval_n: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if train_n == 0 || eval_n == 0 {
        return Err(TriqError::InvalidArg("both splits need at least one image".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_records = Vec::new();
    for i in 1..=5 {
        read_batch(&dir.join(format!("data_batch_{i}.bin")), &mut train_records)?;
    }
    let mut eval_records = Vec::new();
    read_batch(&dir.join("test_batch.bin"), &mut eval_records)?;
    let train = stratified(&train_records, train_n, &mut rng)?;
    let eval = stratified(&eval_records, eval_n, &mut rng)?;
    Ok((train, eval))
}

/// Parses one batch file of back-to-back records (1 label byte + 3072
/// planar RGB pixel bytes) into `(label, pixels)` pairs.
fn read_batch(path: &Path, out: &mut Vec<(usize, Vec<u8>)>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| TriqError::Data {
        path: path.display().to_string(),
        offset: 0,
        msg: e.to_string(),
    })?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(TriqError::Data {
            path: path.display().to_string(),
            offset: (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
            msg: format!(
                "truncated record: {} trailing bytes of a {CIFAR_RECORD}-byte record",
                bytes.len() % CIFAR_RECORD
            ),
        });
    }
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(TriqError::Data {
                path: path.display().to_string(),
                offset: (r * CIFAR_RECORD) as u64,
                msg: format!("label byte {label} outside 0..{CIFAR_CLASSES}"),
            });
        }
        out.push((label, rec[1..].to_vec()));
    }
    Ok(())
}

/// Takes `n` records with per-class quotas `n/10` (+1 for the first
/// `n mod 10` classes), each class seeded-shuffled, and shuffles the
/// final order so batches stay mixed.
fn stratified(records: &[(usize, Vec<u8>)], n: usize, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); CIFAR_CLASSES];
    for (i, (label, _)) in records.iter().enumerate() {
        by_class[*label].push(i);
    }
    let mut picked = Vec::with_capacity(n);
    for (class, pool) in by_class.iter_mut().enumerate() {
        let quota = n / CIFAR_CLASSES + usize::from(class < n % CIFAR_CLASSES);
        if pool.len() < quota {
            return Err(TriqError::InvalidArg(format!(
                "class {class} has {} records, stratified subset needs {quota}",
                pool.len()
            )));
        }
        pool.shuffle(rng);
        picked.extend_from_slice(&pool[..quota]);
    }
    picked.shuffle(rng);

    let mut data = Vec::with_capacity(picked.len() * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(picked.len());
    for &i in &picked {
        labels.push(records[i].0);
        data.extend(records[i].1.iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(Dataset {
        images: Tensor::new(vec![picked.len(), 3, 32, 32], data).unwrap(),
        labels,
        classes: CIFAR_CLASSES,
    })
}

// ── tests ──────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_generation_is_deterministic_and_seed_sensitive() {
        let (a_train, a_eval) = synthetic_shapes(4, 3, 16, 16, 24, 8, 7).unwrap();
        let (b_train, b_eval) = synthetic_shapes(4, 3, 16, 16, 24, 8, 7).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_eval, b_eval);

        let (c_train, _) = synthetic_shapes(4, 3, 16, 16, 24, 8, 8).unwrap();
        assert_ne!(a_train.images, c_train.images);

        // The eval split continues the stream rather than repeating it.
        assert_ne!(
            a_train.images.data()[..8 * 3 * 16 * 16],
            a_eval.images.data()[..]
        );
    }

    #[test]
    fn synthetic_images_are_balanced_bounded_and_contain_a_shape() {
        let (train, eval) = synthetic_shapes(6, 2, 12, 12, 27, 9, 3).unwrap();
        assert_eq!(train.len(), 27);
        assert_eq!(eval.len(), 9);
        assert_eq!(train.classes, 6);

        let mut counts = vec![0usize; 6];
        for &l in &train.labels {
            counts[l] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "per-class counts {counts:?}");

        assert!(train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let row = 2 * 12 * 12;
        for i in 0..train.len() {
            let max = train.images.data()[i * row..(i + 1) * row]
                .iter()
                .cloned()
                .fold(0.0, f64::max);
            assert!(max >= 0.5, "image {i} has no foreground (max {max})");
        }
    }

    #[test]
    fn synthetic_parameters_are_validated() {
        assert!(synthetic_shapes(1, 3, 16, 16, 8, 4, 0).is_err());
        assert!(synthetic_shapes(7, 3, 16, 16, 8, 4, 0).is_err());
        assert!(synthetic_shapes(4, 0, 16, 16, 8, 4, 0).is_err());
        assert!(synthetic_shapes(4, 3, 4, 16, 8, 4, 0).is_err());
        assert!(synthetic_shapes(4, 3, 16, 16, 0, 4, 0).is_err());
        assert!(load_dataset("no-such-set", 0).is_err());
    }

    #[test]
    fn dataset_batching_copies_the_selected_rows() {
        let (train, _) = synthetic_shapes(4, 1, 8, 8, 6, 2, 9).unwrap();
        let (x, y) = train.batch(&[4, 1]);
        assert_eq!(x.shape(), &[2, 1, 8, 8]);
        assert_eq!(y, vec![train.labels[4], train.labels[1]]);
        assert_eq!(x.data()[..64], train.images.data()[4 * 64..5 * 64]);
        assert_eq!(x.data()[64..], train.images.data()[64..2 * 64]);
    }

    /// Writes a fake batch file of sequentially labeled records whose
    /// first pixel byte encodes the record index.
    fn write_batch(path: &Path, labels: &[u8]) {
        let mut bytes = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            bytes.push(l);
            let mut px = vec![0u8; CIFAR_RECORD - 1];
            px[0] = i as u8;
            px[1] = 128;
            bytes.extend_from_slice(&px);
        }
        std::fs::write(path, bytes).unwrap();
    }

    fn fake_cifar_dir(per_class_train: usize, per_class_eval: usize) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        // Spread the train records over the five batch files.
        let labels: Vec<u8> = (0..CIFAR_CLASSES as u8)
            .flat_map(|c| std::iter::repeat(c).take(per_class_train))
            .collect();
        for (i, chunk) in labels.chunks(labels.len().div_ceil(5)).enumerate() {
            write_batch(&dir.path().join(format!("data_batch_{}.bin", i + 1)), chunk);
        }
        for i in labels.chunks(labels.len().div_ceil(5)).len()..5 {
            write_batch(&dir.path().join(format!("data_batch_{}.bin", i + 1)), &[]);
        }
        let eval_labels: Vec<u8> = (0..CIFAR_CLASSES as u8)
            .flat_map(|c| std::iter::repeat(c).take(per_class_eval))
            .collect();
        write_batch(&dir.path().join("test_batch.bin"), &eval_labels);
        dir
    }

    #[test]
    fn cifar_reader_parses_labels_scales_pixels_and_stratifies() {
        let dir = fake_cifar_dir(4, 2);
        let (train, eval) = cifar10_subset(dir.path(), 20, 10, 5).unwrap();
        assert_eq!(train.len(), 20);
        assert_eq!(eval.len(), 10);
        assert_eq!(train.classes, 10);

        let mut counts = vec![0usize; 10];
        for &l in &train.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c == 2), "per-class counts {counts:?}");

        // Byte 128 scales exactly to 128/255.
        let row = 3 * 32 * 32;
        for i in 0..train.len() {
            assert_eq!(train.images.data()[i * row + 1].to_bits(), (128.0f64 / 255.0).to_bits());
        }

        // Determinism and seed sensitivity.
        let (again, _) = cifar10_subset(dir.path(), 20, 10, 5).unwrap();
        assert_eq!(train, again);
        let (other, _) = cifar10_subset(dir.path(), 20, 10, 6).unwrap();
        assert!(
            train.images != other.images || train.labels != other.labels,
            "different seeds picked the identical subset in the identical order"
        );
    }

    #[test]
    fn uneven_subset_sizes_stay_within_one_per_class() {
        let dir = fake_cifar_dir(4, 2);
        let (train, eval) = cifar10_subset(dir.path(), 23, 7, 1).unwrap();
        assert_eq!(train.len(), 23);
        assert_eq!(eval.len(), 7);
        let mut counts = vec![0usize; 10];
        for &l in &train.labels {
            counts[l] += 1;
        }
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        assert!(hi - lo <= 1, "per-class counts {counts:?}");
    }

    #[test]
    fn corrupt_batches_are_reported_with_file_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        let missing = cifar10_subset(dir.path(), 10, 10, 0).unwrap_err();
        assert!(missing.to_string().contains("data_batch_1.bin"), "{missing}");

        // A truncated record: one full record plus five stray bytes.
        for i in 1..=5 {
            write_batch(&dir.path().join(format!("data_batch_{i}.bin")), &[0]);
        }
        let path = dir.path().join("data_batch_2.bin");
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5]);
        std::fs::write(&path, bytes).unwrap();
        let truncated = cifar10_subset(dir.path(), 1, 1, 0).unwrap_err();
        let msg = truncated.to_string();
        assert!(
            msg.contains("data_batch_2.bin") && msg.contains(&CIFAR_RECORD.to_string()),
            "{msg}"
        );

        // An out-of-range label in the second record of the test batch.
        write_batch(&path, &[0]);
        write_batch(&dir.path().join("test_batch.bin"), &[1]);
        let tb = dir.path().join("test_batch.bin");
        let mut bytes = std::fs::read(&tb).unwrap();
        let mut second = vec![11u8];
        second.extend_from_slice(&vec![0u8; CIFAR_RECORD - 1]);
        bytes.extend_from_slice(&second);
        std::fs::write(&tb, bytes).unwrap();
        let bad_label = cifar10_subset(dir.path(), 1, 1, 0).unwrap_err();
        let msg = bad_label.to_string();
        assert!(
            msg.contains("test_batch.bin") && msg.contains(&CIFAR_RECORD.to_string()),
            "{msg}"
        );

        // Too few records for the requested quota.
        write_batch(&tb, &[1]);
        let few = cifar10_subset(dir.path(), 400, 1, 0).unwrap_err();
        assert!(few.to_string().contains("stratified"), "{few}");
    }

    #[test]
    fn dataset_root_comes_from_the_environment() {
        let key = "TRIQDEF_DATA_DIR";
        let old = std::env::var_os(key);
        std::env::set_var(key, "/tmp/triqdef-data-root");
        assert_eq!(data_dir().unwrap(), PathBuf::from("/tmp/triqdef-data-root"));
        std::env::remove_var(key);
        assert!(data_dir().is_err());
        if let Some(v) = old {
            std::env::set_var(key, v);
        }
    }
}
