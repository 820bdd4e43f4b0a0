//! Training checkpoints in the `TQCKPT01` container: an 8-byte magic, a
//! length-prefixed JSON header (config echo, progress counters, RNG
//! coordinates, per-bit curriculum state, and the payload section
//! table), then every tensor as little-endian 64-bit floats.
//!
//! The contract is exact: serialize → deserialize → serialize
//! reproduces the bytes, and a run resumed from a checkpoint continues
//! bit-identically to one that never stopped.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::curriculum::{ActTracker, EnsembleMode, EnsembleState};
use crate::error::{Result, TriqError};
use crate::models::{ModelDef, ParamSet};
use crate::tensor::Tensor;
use crate::train::Trainer;

const MAGIC: &[u8; 8] = b"TQCKPT01";

#[derive(Debug, Serialize, Deserialize)]
struct RngState {
    /// 32 seed bytes, hex-encoded.
    seed: String,
    /// The 128-bit word position as (low, high) halves.
    word_pos: [u64; 2],
    stream: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackerState {
    max_abs: f64,
    frozen: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct BitEntry {
    bits: u8,
    activated_at: usize,
    trackers: Vec<TrackerState>,
    own_weights: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Section {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    config: String,
    epoch: usize,
    step: usize,
    rng: RngState,
    bits: Vec<BitEntry>,
    sections: Vec<Section>,
}

fn data_err(path: &Path, offset: u64, msg: impl Into<String>) -> TriqError {
    TriqError::Data {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    }
}

// ── serialization ──────────────────────────────────────────────────────

/// Serializes the full training state into the container byte layout.
pub fn checkpoint_bytes(t: &Trainer) -> Result<Vec<u8>> {
    let mut sections = Vec::new();
    let mut tensors: Vec<&Tensor> = Vec::new();
    let push = |name: String, tensor: &'_ Tensor, sections: &mut Vec<Section>| {
        sections.push(Section {
            name,
            shape: tensor.shape().to_vec(),
        });
    };

    let shared = t.ensemble.shared_params();
    for e in shared.entries() {
        push(format!("shared.{}", e.name), &e.tensor, &mut sections);
        tensors.push(&e.tensor);
    }
    for (e, buf) in shared.entries().iter().zip(&t.shared_momentum) {
        push(format!("shared_momentum.{}", e.name), buf, &mut sections);
        tensors.push(buf);
    }
    let mut bits_entries = Vec::new();
    for bits in t.ensemble.active_bits().iter().rev() {
        let bits = *bits;
        let trackers = t
            .ensemble
            .trackers(bits)?
            .iter()
            .map(|tr| TrackerState {
                max_abs: tr.max_abs,
                frozen: tr.frozen,
            })
            .collect();
        let own = t.ensemble.mode() == EnsembleMode::Independent;
        bits_entries.push(BitEntry {
            bits,
            activated_at: t.ensemble.activation_epoch(bits)?,
            trackers,
            own_weights: own,
        });
        if own {
            let params = t.ensemble.params(bits)?;
            for e in params.entries() {
                push(format!("weights.{bits}.{}", e.name), &e.tensor, &mut sections);
                tensors.push(&e.tensor);
            }
            let bufs = t.per_bit_momentum.get(&bits).ok_or_else(|| {
                TriqError::InvalidArg(format!("no momentum buffers for {bits} bits"))
            })?;
            for (e, buf) in params.entries().iter().zip(bufs) {
                push(format!("momentum.{bits}.{}", e.name), buf, &mut sections);
                tensors.push(buf);
            }
        }
    }

    let word_pos = t.rng.get_word_pos();
    let header = Header {
        schema_version: 1,
        config: t.cfg.render(),
        epoch: t.epoch,
        step: t.step,
        rng: RngState {
            seed: hex(&t.rng.get_seed()),
            word_pos: [word_pos as u64, (word_pos >> 64) as u64],
            stream: t.rng.get_stream(),
        },
        bits: bits_entries,
        sections,
    };
    let head = serde_json::to_vec(&header)?;
    let payload: usize = tensors.iter().map(|t| t.numel() * 8).sum();
    let mut out = Vec::with_capacity(12 + head.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32::try_from(head.len()).unwrap().to_le_bytes());
    out.extend_from_slice(&head);
    for tensor in tensors {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, t: &Trainer) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(t)?)?;
    Ok(())
}

// ── deserialization ────────────────────────────────────────────────────

/// Reconstructs the full training state from container bytes read at
/// `path` (the path is only used in error messages).
pub fn trainer_from_bytes(path: &Path, bytes: &[u8]) -> Result<Trainer> {
    if bytes.len() < 12 {
        return Err(data_err(path, bytes.len() as u64, "file ends before the header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(data_err(path, 0, "bad magic: not a TQCKPT01 container"));
    }
    let head_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_at = 12 + head_len;
    if bytes.len() < payload_at {
        return Err(data_err(path, 12, format!("truncated header: {head_len} bytes declared")));
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_at])
        .map_err(|e| data_err(path, 12, format!("malformed header: {e}")))?;
    if header.schema_version != 1 {
        return Err(data_err(
            path,
            12,
            format!("unsupported schema version {}", header.schema_version),
        ));
    }
    let cfg = RunConfig::parse(&header.config)
        .map_err(|e| data_err(path, 12, format!("embedded config rejected: {e}")))?;

    // Cut the payload into the declared sections.
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut at = payload_at;
    for s in &header.sections {
        let count: usize = s.shape.iter().product();
        let end = at + count * 8;
        if bytes.len() < end {
            return Err(data_err(
                path,
                at as u64,
                format!("payload ends inside section {}", s.name),
            ));
        }
        let data: Vec<f64> = bytes[at..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(s.shape.clone(), data)
            .map_err(|e| data_err(path, at as u64, format!("section {}: {e}", s.name)))?;
        if tensors.insert(s.name.clone(), tensor).is_some() {
            return Err(data_err(path, at as u64, format!("duplicate section {}", s.name)));
        }
        at = end;
    }
    if at != bytes.len() {
        return Err(data_err(
            path,
            at as u64,
            format!("{} trailing bytes after the last section", bytes.len() - at),
        ));
    }

    let (channels, h, w, classes) = cfg.image_geometry();
    let def = ModelDef::new(cfg.architecture, channels, h, w, classes)?;
    let shared = take_set(path, &mut tensors, "shared", &def)?;
    let shared_momentum: Vec<Tensor> = {
        let mut list = Vec::new();
        for (name, _, _) in def.layout() {
            let key = format!("shared_momentum.{name}");
            list.push(
                tensors
                    .remove(&key)
                    .ok_or_else(|| data_err(path, 0, format!("missing section {key}")))?,
            );
        }
        list
    };

    let mut ensemble = EnsembleState::new(
        def.clone(),
        shared,
        cfg.curriculum.ensemble,
        &cfg.bits,
        cfg.curriculum.act_warmup_epochs,
    )?;
    ensemble.set_epoch(header.epoch);
    let mut per_bit_momentum = BTreeMap::new();
    for be in &header.bits {
        let trackers: Vec<ActTracker> = be
            .trackers
            .iter()
            .map(|tr| ActTracker {
                max_abs: tr.max_abs,
                frozen: tr.frozen,
            })
            .collect();
        let own = if be.own_weights {
            let set = take_set(path, &mut tensors, &format!("weights.{}", be.bits), &def)?;
            let mut bufs = Vec::new();
            for (name, _, _) in def.layout() {
                let key = format!("momentum.{}.{name}", be.bits);
                bufs.push(
                    tensors
                        .remove(&key)
                        .ok_or_else(|| data_err(path, 0, format!("missing section {key}")))?,
                );
            }
            per_bit_momentum.insert(be.bits, bufs);
            Some(set)
        } else {
            None
        };
        ensemble.restore_bit(be.bits, be.activated_at, trackers, own)?;
    }
    if let Some(name) = tensors.into_keys().next() {
        return Err(data_err(path, 0, format!("unexpected section {name}")));
    }

    let seed_bytes = unhex(&header.rng.seed)
        .ok_or_else(|| data_err(path, 12, "rng seed is not 64 hex characters"))?;
    let mut rng = ChaCha8Rng::from_seed(seed_bytes);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(u128::from(header.rng.word_pos[0]) | (u128::from(header.rng.word_pos[1]) << 64));

    Ok(Trainer {
        cfg,
        ensemble,
        shared_momentum,
        per_bit_momentum,
        rng,
        epoch: header.epoch,
        step: header.step,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| data_err(path, 0, e.to_string()))?;
    trainer_from_bytes(path, &bytes)
}

/// Pulls one named parameter set out of the section map, validating
/// each tensor against the model layout.
fn take_set(
    path: &Path,
    tensors: &mut BTreeMap<String, Tensor>,
    prefix: &str,
    def: &ModelDef,
) -> Result<ParamSet> {
    let mut list = Vec::new();
    for (name, shape, _) in def.layout() {
        let key = format!("{prefix}.{name}");
        let tensor = tensors
            .remove(&key)
            .ok_or_else(|| data_err(path, 0, format!("missing section {key}")))?;
        if tensor.shape() != &shape[..] {
            return Err(data_err(
                path,
                0,
                format!("section {key} has shape {:?}, expected {shape:?}", tensor.shape()),
            ));
        }
        list.push(tensor);
    }
    ParamSet::load(def, list)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.bytes().all(|b| b.is_ascii_hexdigit()) {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks_exact(2).enumerate() {
        out[i] = u8::from_str_radix(std::str::from_utf8(chunk).unwrap(), 16).ok()?;
    }
    Some(out)
}

// ── tests ──────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DatasetChoice, DefenseMode};
    use crate::data::synthetic_shapes;
    use crate::train::craft_pool;

    fn tiny_cfg(mode: DefenseMode, seed: u64) -> RunConfig {
        let mut cfg = RunConfig::with_seed(seed);
        cfg.mode = mode;
        cfg.dataset = DatasetChoice::SyntheticShapes;
        cfg.data.classes = 3;
        cfg.data.channels = 1;
        cfg.data.height = 12;
        cfg.data.width = 12;
        cfg.data.train = 18;
        cfg.data.eval = 6;
        cfg.epochs = 4;
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

    fn setup(cfg: &RunConfig) -> (crate::data::Dataset, Vec<crate::attacks::PatchSpec>, Trainer) {
        let (train, _) = synthetic_shapes(
            cfg.data.classes,
            cfg.data.channels,
            cfg.data.height,
            cfg.data.width,
            cfg.data.train,
            cfg.data.eval,
            cfg.seed,
        )
        .unwrap();
        let t = Trainer::new(cfg.clone()).unwrap();
        let pool = if cfg.mode.uses_patches() {
            let e = t.ensemble();
            craft_pool(cfg, e.def(), e.shared_params(), &train, 6).unwrap()
        } else {
            Vec::new()
        };
        (train, pool, t)
    }

    fn weights_bits(t: &Trainer) -> Vec<u64> {
        t.ensemble()
            .shared_params()
            .entries()
            .iter()
            .flat_map(|e| e.tensor.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn serialize_deserialize_serialize_is_byte_identical() {
        let cfg = tiny_cfg(DefenseMode::Triqdef, 21);
        let (train, pool, mut t) = setup(&cfg);
        t.run_until(&train, &pool, &mut Vec::new(), 2).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&path, &t).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(checkpoint_bytes(&back).unwrap(), first);
        assert_eq!(back.epoch(), 2);
        assert_eq!(back.step(), t.step());
        assert_eq!(weights_bits(&back), weights_bits(&t));
        assert_eq!(back.cfg(), &cfg);
    }

    #[test]
    fn resumed_training_matches_an_uninterrupted_run() {
        let cfg = tiny_cfg(DefenseMode::Triqdef, 22);
        let (train, pool, mut straight) = setup(&cfg);
        let mut full_log = Vec::new();
        straight.run(&train, &pool, &mut full_log).unwrap();

        let (_, _, mut half) = setup(&cfg);
        let mut first_half = Vec::new();
        half.run_until(&train, &pool, &mut first_half, 2).unwrap();
        let bytes = checkpoint_bytes(&half).unwrap();
        let mut resumed = trainer_from_bytes(Path::new("mem"), &bytes).unwrap();
        let mut second_half = Vec::new();
        resumed.run(&train, &pool, &mut second_half).unwrap();

        assert_eq!(weights_bits(&resumed), weights_bits(&straight));
        let stitched = [
            String::from_utf8(first_half).unwrap(),
            String::from_utf8(second_half).unwrap(),
        ]
        .concat();
        assert_eq!(stitched, String::from_utf8(full_log).unwrap());
        // The optimizer and curriculum state carried over too.
        assert_eq!(
            resumed.ensemble().trackers(4).unwrap(),
            straight.ensemble().trackers(4).unwrap()
        );
    }

    #[test]
    fn independent_ensembles_round_trip_their_per_bit_state() {
        let mut cfg = tiny_cfg(DefenseMode::StandardQat, 23);
        cfg.curriculum.ensemble = crate::curriculum::EnsembleMode::Independent;
        let (train, pool, mut t) = setup(&cfg);
        t.run_until(&train, &pool, &mut Vec::new(), 3).unwrap();

        let bytes = checkpoint_bytes(&t).unwrap();
        let back = trainer_from_bytes(Path::new("mem"), &bytes).unwrap();
        assert_eq!(checkpoint_bytes(&back).unwrap(), bytes);
        for bits in [32u8, 4] {
            let a = t.ensemble().params(bits).unwrap();
            let b = back.ensemble().params(bits).unwrap();
            for (ea, eb) in a.entries().iter().zip(b.entries()) {
                assert_eq!(ea.tensor, eb.tensor, "{bits}-bit {}", ea.name);
            }
        }

        let mut resumed = trainer_from_bytes(Path::new("mem"), &bytes).unwrap();
        let mut log = Vec::new();
        resumed.run(&train, &pool, &mut log).unwrap();
        assert_eq!(resumed.epoch(), 4);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected_with_locations() {
        let cfg = tiny_cfg(DefenseMode::StandardQat, 24);
        let (train, pool, mut t) = setup(&cfg);
        t.run_until(&train, &pool, &mut Vec::new(), 1).unwrap();
        let good = checkpoint_bytes(&t).unwrap();
        let p = Path::new("test.ckpt");

        let mut bad_magic = good.clone();
        bad_magic[3] = b'X';
        let err = trainer_from_bytes(p, &bad_magic).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let err = trainer_from_bytes(p, &good[..good.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("section"), "{err}");

        let mut longer = good.clone();
        longer.extend_from_slice(&[0; 16]);
        let err = trainer_from_bytes(p, &longer).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");

        let err = trainer_from_bytes(p, &good[..6]).unwrap_err();
        assert!(err.to_string().contains("header"), "{err}");

        // A checkpoint whose embedded config fails validation is refused.
        let mut rotten = good.clone();
        let needle = b"epochs = 4";
        let at = rotten
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        rotten[at..at + needle.len()].copy_from_slice(b"epochs = 0");
        let err = trainer_from_bytes(p, &rotten).unwrap_err();
        assert!(err.to_string().contains("config"), "{err}");
    }
}
