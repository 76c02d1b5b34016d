//! Single-file checkpoint archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes   b"I2PCKPT\x01"
//! u64                 manifest length in bytes
//! manifest            UTF-8 JSON (see [`Manifest`])
//! u64                 tensor count
//! per tensor, sorted by key:
//!   u32 + bytes       key, e.g. "mapping.fc0.weight" or "opt.mapping.m.fc0.weight"
//!   u32               rank
//!   u64 × rank        dims
//!   f64 × prod(dims)  values, row-major
//! ```
//!
//! Model parameters live under `<collection>.<param>`; optimizer moments under
//! `opt.<collection>.{m,v}.<param>`; the loss history (train-state files) under
//! `history`, one row per step.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::nets::ArchConfig;
use crate::optim::{Adam, AdamConfig};
use crate::params::{ModelBundle, ParamCollection, COLLECTIONS};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"I2PCKPT\x01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    /// Pretrained source generator + discriminator.
    Source,
    /// Adapted target bundle, for sampling and evaluation.
    Target,
    /// Everything needed to resume adaptation.
    TrainState,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        ensure!(self.seed.len() == 64, Config, "rng seed must be 32 hex bytes");
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::Config(format!("bad rng seed: {e}")))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(
            self.word_pos
                .parse::<u128>()
                .map_err(|e| Error::Config(format!("bad rng word position: {e}")))?,
        );
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub arch: ArchConfig,
    pub seed: u64,
    pub step: u64,
    pub trainable: BTreeMap<String, bool>,
    #[serde(default)]
    pub optimizer_steps: BTreeMap<String, u64>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub rng: Option<RngState>,
    /// Free-form provenance (domain id, resolved config hash, ...).
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_bundle(kind: CheckpointKind, arch: &ArchConfig, seed: u64, step: u64, bundle: &ModelBundle) -> Self {
        let mut tensors = BTreeMap::new();
        let mut trainable = BTreeMap::new();
        for (cname, coll) in bundle.collections() {
            trainable.insert(cname.to_string(), coll.trainable);
            for (pname, t) in coll.iter() {
                tensors.insert(format!("{cname}.{pname}"), t.clone());
            }
        }
        Checkpoint {
            manifest: Manifest {
                format_version: 1,
                kind,
                arch: arch.clone(),
                seed,
                step,
                trainable,
                optimizer_steps: BTreeMap::new(),
                learning_rate: None,
                rng: None,
                notes: BTreeMap::new(),
            },
            tensors,
        }
    }

    pub fn bundle(&self) -> Result<ModelBundle> {
        let mut colls: BTreeMap<&str, ParamCollection> = COLLECTIONS
            .iter()
            .map(|&c| {
                let trainable = self.manifest.trainable.get(c).copied().unwrap_or(true);
                (c, ParamCollection::new(trainable))
            })
            .collect();
        for (key, t) in &self.tensors {
            if key.starts_with("opt.") || key.starts_with("source_mapping.") || key == "history" {
                continue;
            }
            let (cname, pname) = key
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("malformed tensor key `{key}`")))?;
            colls
                .get_mut(cname)
                .ok_or_else(|| Error::Config(format!("unknown collection in key `{key}`")))?
                .insert(pname, t.clone());
        }
        let mut take = |n: &str| colls.remove(n).expect("known collection");
        let bundle = ModelBundle {
            mapping: take("mapping"),
            synthesis: take("synthesis"),
            discriminator: take("discriminator"),
            decoupler: take("decoupler"),
        };
        let reference = ModelBundle::init(&self.manifest.arch, 0)?;
        for (name, coll) in bundle.collections() {
            let expected = reference.collection(name).expect("known collection");
            ensure!(
                coll.len() == expected.len(),
                Config,
                "checkpoint collection `{name}` has {} tensors, architecture needs {}",
                coll.len(),
                expected.len()
            );
            for (pname, t) in expected.iter() {
                let got = coll
                    .get(pname)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks `{name}.{pname}`")))?;
                ensure!(
                    got.shape() == t.shape(),
                    Config,
                    "`{name}.{pname}` has shape {:?}, architecture needs {:?}",
                    got.shape(),
                    t.shape()
                );
            }
        }
        Ok(bundle)
    }

    pub fn put_optimizer(&mut self, collection: &str, opt: &Adam) {
        self.manifest.optimizer_steps.insert(collection.to_string(), opt.t);
        self.manifest.learning_rate = Some(opt.cfg.lr);
        for (k, t) in &opt.m {
            self.tensors.insert(format!("opt.{collection}.m.{k}"), t.clone());
        }
        for (k, t) in &opt.v {
            self.tensors.insert(format!("opt.{collection}.v.{k}"), t.clone());
        }
    }

    pub fn optimizer(&self, collection: &str, cfg: AdamConfig, params: &ParamCollection) -> Result<Adam> {
        let t = *self
            .manifest
            .optimizer_steps
            .get(collection)
            .ok_or_else(|| Error::Config(format!("checkpoint has no optimizer state for `{collection}`")))?;
        let mut opt = Adam::new(cfg, params);
        opt.t = t;
        for (name, _) in params.iter() {
            for (moment, store) in [("m", &mut opt.m), ("v", &mut opt.v)] {
                let key = format!("opt.{collection}.{moment}.{name}");
                let tensor = self
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks `{key}`")))?;
                store.insert(name.clone(), tensor.clone());
            }
        }
        Ok(opt)
    }

    /// Errors unless the stored architecture equals `arch`.
    pub fn validate_arch(&self, arch: &ArchConfig) -> Result<()> {
        ensure!(
            &self.manifest.arch == arch,
            Config,
            "checkpoint architecture {:?} does not match requested {:?}",
            self.manifest.arch,
            arch
        );
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let manifest = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| Error::Config(format!("manifest serialisation: {e}")))?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&manifest).map_err(io)?;
        w.write_all(&(self.tensors.len() as u64).to_le_bytes()).map_err(io)?;
        for (key, t) in &self.tensors {
            w.write_all(&(key.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(key.as_bytes()).map_err(io)?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes()).map_err(io)?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        ensure!(&magic == MAGIC, Config, "{} is not a checkpoint archive", path.display());
        let mlen = read_u64(&mut r).map_err(io)? as usize;
        let mut manifest = vec![0u8; mlen];
        r.read_exact(&mut manifest).map_err(io)?;
        let manifest: Manifest = serde_json::from_slice(&manifest)
            .map_err(|e| Error::Config(format!("{}: bad manifest: {e}", path.display())))?;
        let count = read_u64(&mut r).map_err(io)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let klen = read_u32(&mut r).map_err(io)? as usize;
            let mut key = vec![0u8; klen];
            r.read_exact(&mut key).map_err(io)?;
            let key = String::from_utf8(key)
                .map_err(|_| Error::Config(format!("{}: non-UTF-8 tensor key", path.display())))?;
            let rank = read_u32(&mut r).map_err(io)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r).map_err(io)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes).map_err(io)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.insert(key, Tensor::new(shape, data)?);
        }
        Ok(Checkpoint { manifest, tensors })
    }
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    #[test]
    fn bundle_round_trip_is_exact() {
        let arch = ArchConfig::micro();
        let bundle = ModelBundle::init(&arch, 3).unwrap();
        let ck = Checkpoint::from_bundle(CheckpointKind::Source, &arch, 3, 0, &bundle);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.bundle().unwrap().checksum(), bundle.checksum());
    }

    #[test]
    fn architecture_mismatch_is_a_config_error() {
        let arch = ArchConfig::micro();
        let bundle = ModelBundle::init(&arch, 3).unwrap();
        let ck = Checkpoint::from_bundle(CheckpointKind::Source, &arch, 3, 0, &bundle);
        let mut other = arch.clone();
        other.w_dim += 1;
        assert!(matches!(ck.validate_arch(&other), Err(Error::Config(_))));
        let mut broken = ck.clone();
        broken.manifest.arch = other;
        assert!(broken.bundle().is_err());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..37 {
            rng.next_u32();
        }
        let saved = RngState::capture(&rng);
        let expected: Vec<u32> = (0..10).map(|_| rng.next_u32()).collect();
        let mut restored = saved.restore().unwrap();
        let got: Vec<u32> = (0..10).map(|_| restored.next_u32()).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn garbage_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(Checkpoint::load(&path).is_err());
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing.bin")),
            Err(Error::Io { .. })
        ));
    }
}
