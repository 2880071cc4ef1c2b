//! Binary checkpoint container.
//!
//! Layout (little endian): magic, `u32` schema version, `u64` config length
//! and config JSON, `u64` tensor count, then per tensor `u32` name length,
//! name, `u8` element type (0 = f64, 1 = f32), `u64` rows, `u64` cols and
//! row-major data. A SHA-256 digest of everything before it closes the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::autodiff::ParamSet;
use crate::embedding::{Embedder, EmbedderConfig, Vocabulary};
use crate::error::{Error, Result};
use crate::graph::Lexicon;
use crate::motion::FeatureNorm;
use crate::pipeline::{DenoiserConfig, Exemplar, HierarchicalDenoiser, LatentStats, Models, Precision};
use crate::tensor::Mat;
use crate::vae::{Level, MotionVae, VaeConfig, VaeSet};

pub const MAGIC: &[u8; 8] = b"ACTGUIDE";
pub const SCHEMA_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

pub const EMBEDDER_FILE: &str = "embedder.ckpt";
pub const VAE_FILE: &str = "vae.ckpt";
pub const DIFFUSION_FILE: &str = "diffusion.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    pub tensors: Vec<(String, Mat)>,
    pub element: Precision,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn new(config: Value) -> Self {
        Self { config, tensors: Vec::new(), element: Precision::F64 }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Mat) {
        self.tensors.push((name.into(), m));
    }

    pub fn push_params(&mut self, prefix: &str, ps: &ParamSet) {
        for (name, m) in ps.iter() {
            self.push(format!("{prefix}{name}"), m.clone());
        }
    }

    /// Tensors under `prefix`, in stored order, with the prefix removed.
    pub fn params(&self, prefix: &str) -> ParamSet {
        ParamSet::from_pairs(self.tensors.iter().filter_map(|(n, m)| n.strip_prefix(prefix).map(|s| (s.to_string(), m.clone()))))
    }

    pub fn tensor(&self, name: &str) -> Result<&Mat> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = serde_json::to_vec(&self.config)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, m) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match self.element {
                Precision::F64 => 0,
                Precision::F32 => 1,
            });
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                match self.element {
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                    Precision::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != SCHEMA_VERSION {
            return Err(Error::Version { found: version, expected: SCHEMA_VERSION });
        }
        let n = r.len()?;
        let config: Value = serde_json::from_slice(r.take(n)?)?;
        let count = r.len()?;
        let mut tensors = Vec::new();
        let mut element = Precision::F64;
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
            let kind = r.u8()?;
            let rows = r.len()?;
            let cols = r.len()?;
            let len = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint(format!("tensor {name} is too large")))?;
            let data: Vec<f64> = match kind {
                0 => r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
                1 => {
                    element = Precision::F32;
                    r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect()
                }
                other => return Err(Error::Checkpoint(format!("unknown element type {other} for {name}"))),
            };
            tensors.push((name, Mat::from_vec(rows, cols, data)));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { config, tensors, element })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn kind(&self) -> Option<&str> {
        self.config.get("kind").and_then(Value::as_str)
    }

    fn expect_kind(&self, kind: &str) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {other:?}"))),
        }
    }

    fn section<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self.config.get(key).ok_or_else(|| Error::Checkpoint(format!("config is missing {key}")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

#[derive(Serialize, Deserialize)]
struct EmbedderMeta {
    config: EmbedderConfig,
    vocab: Vocabulary,
    norm: FeatureNorm,
}

pub fn embedder_checkpoint(e: &Embedder) -> Result<Checkpoint> {
    let meta = EmbedderMeta { config: e.config.clone(), vocab: e.vocab.clone(), norm: e.norm.clone() };
    let mut ck = Checkpoint::new(serde_json::json!({ "kind": "embedder", "embedder": serde_json::to_value(meta)? }));
    ck.push_params("", &e.params);
    Ok(ck)
}

pub fn embedder_from_checkpoint(ck: &Checkpoint) -> Result<Embedder> {
    ck.expect_kind("embedder")?;
    let meta: EmbedderMeta = ck.section("embedder")?;
    Embedder::from_parts(meta.config, meta.vocab, meta.norm, ck.params(""))
}

#[derive(Serialize, Deserialize)]
struct VaeMeta {
    level: Level,
    config: VaeConfig,
    norm: FeatureNorm,
}

/// All three levels, each stored under its own prefix.
pub fn vae_checkpoint(set: &VaeSet) -> Result<Checkpoint> {
    let metas: Vec<VaeMeta> = Level::ALL.iter().map(|&l| VaeMeta { level: l, config: set.get(l).config.clone(), norm: set.get(l).norm.clone() }).collect();
    let mut ck = Checkpoint::new(serde_json::json!({ "kind": "vae", "levels": serde_json::to_value(metas)? }));
    for l in Level::ALL {
        ck.push_params(&format!("{l}."), &set.get(l).params);
    }
    Ok(ck)
}

pub fn vae_from_checkpoint(ck: &Checkpoint) -> Result<VaeSet> {
    ck.expect_kind("vae")?;
    let metas: Vec<VaeMeta> = ck.section("levels")?;
    let mut built = Vec::with_capacity(3);
    for l in Level::ALL {
        let meta = metas.iter().find(|m| m.level == l).ok_or_else(|| Error::Checkpoint(format!("missing {l} vae")))?;
        built.push(MotionVae::from_parts(l, meta.config.clone(), meta.norm.clone(), ck.params(&format!("{l}.")))?);
    }
    let specific = built.pop().expect("three levels");
    let action = built.pop().expect("three levels");
    let motion = built.pop().expect("three levels");
    let set = VaeSet { motion, action, specific };
    set.validate()?;
    Ok(set)
}

#[derive(Serialize, Deserialize)]
struct ExemplarMeta {
    description: String,
    entry_id: String,
    segment: usize,
}

#[derive(Serialize, Deserialize)]
struct DenoiserMeta {
    config: DenoiserConfig,
    node_dim: usize,
    latent_dim: usize,
    stats: [LatentStats; 3],
    lexicon: Lexicon,
    exemplars: Vec<ExemplarMeta>,
}

pub fn diffusion_checkpoint(den: &HierarchicalDenoiser, exemplars: &[Exemplar], lexicon: &Lexicon) -> Result<Checkpoint> {
    let meta = DenoiserMeta {
        config: den.config.clone(),
        node_dim: den.node_dim,
        latent_dim: den.latent_dim,
        stats: den.stats,
        lexicon: lexicon.clone(),
        exemplars: exemplars.iter().map(|e| ExemplarMeta { description: e.description.clone(), entry_id: e.entry_id.clone(), segment: e.segment }).collect(),
    };
    let mut ck = Checkpoint::new(serde_json::json!({ "kind": "diffusion", "diffusion": serde_json::to_value(meta)? }));
    ck.push_params("model.", &den.params);
    for (i, e) in exemplars.iter().enumerate() {
        ck.push(format!("exemplar.{i}.text"), Mat::row_vector(&e.text_feature));
        ck.push(format!("exemplar.{i}.latent"), e.latent.clone());
    }
    Ok(ck)
}

pub fn diffusion_from_checkpoint(ck: &Checkpoint) -> Result<(HierarchicalDenoiser, Vec<Exemplar>, Lexicon)> {
    ck.expect_kind("diffusion")?;
    let meta: DenoiserMeta = ck.section("diffusion")?;
    let den = HierarchicalDenoiser::from_parts(meta.config, meta.node_dim, meta.latent_dim, meta.stats, ck.params("model."))?;
    let exemplars = meta
        .exemplars
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            Ok(Exemplar {
                description: m.description,
                entry_id: m.entry_id,
                segment: m.segment,
                text_feature: ck.tensor(&format!("exemplar.{i}.text"))?.data().to_vec(),
                latent: ck.tensor(&format!("exemplar.{i}.latent"))?.clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((den, exemplars, meta.lexicon))
}

impl Models {
    /// Writes the three checkpoint files into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        embedder_checkpoint(&self.embedder)?.save(dir.join(EMBEDDER_FILE))?;
        vae_checkpoint(&self.vaes)?.save(dir.join(VAE_FILE))?;
        diffusion_checkpoint(&self.denoiser, &self.exemplars, &self.lexicon)?.save(dir.join(DIFFUSION_FILE))?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let embedder = embedder_from_checkpoint(&Checkpoint::load(dir.join(EMBEDDER_FILE))?)?;
        let vaes = vae_from_checkpoint(&Checkpoint::load(dir.join(VAE_FILE))?)?;
        let (denoiser, exemplars, lexicon) = diffusion_from_checkpoint(&Checkpoint::load(dir.join(DIFFUSION_FILE))?)?;
        let models = Self { embedder, vaes, denoiser, exemplars, lexicon };
        models.validate()?;
        Ok(models)
    }
}
