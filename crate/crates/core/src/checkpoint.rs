//! On-disk checkpoints: a directory holding `manifest.toml` plus one binary
//! blob per network.
//!
//! Blob layout, little-endian throughout: magic `FFW1`, `u32` tensor count,
//! then per tensor `u32` name length, UTF-8 name, `u8` trainable flag, `u32`
//! rank, `u64` dims, `f32` values.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, Stage};
use crate::networks::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, Parser, ParserSpec};
use crate::nn::{Param, Sequential};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FFW1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Completion,
    Parser,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub kind: CheckpointKind,
    pub model_tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
    pub step: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<LossWeights>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_discriminator: Option<DiscriminatorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_discriminator: Option<DiscriminatorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parser: Option<ParserSpec>,
    /// Parameter digest of the parser that produced the parsing targets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parser_digest: Option<String>,
    #[serde(default)]
    pub blobs: BTreeMap<String, BlobEntry>,
}

impl Manifest {
    pub fn new(kind: CheckpointKind, model_tag: impl Into<String>, step: u64, seed: u64) -> Self {
        Self {
            format: FORMAT_VERSION,
            kind,
            model_tag: model_tag.into(),
            stage: None,
            step,
            seed,
            weights: None,
            generator: None,
            local_discriminator: None,
            global_discriminator: None,
            parser: None,
            parser_digest: None,
            blobs: BTreeMap::new(),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode_params<'a>(params: impl IntoIterator<Item = &'a Param>) -> Vec<u8> {
    let params: Vec<&Param> = params.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.trainable as u8);
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated parameter blob".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params(bytes: &[u8]) -> Result<Vec<Param>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a parameter blob".into()));
    }
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let value = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let mut p = Param::new(name, shape, value);
        p.trainable = trainable;
        params.push(p);
    }
    if r.at != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameter blob".into()));
    }
    Ok(params)
}

/// Copies stored tensors into `net`. Every tensor of `net` must be present
/// with a matching shape.
pub fn load_into(net: &mut Sequential, stored: &[Param]) -> Result<()> {
    let by_name: BTreeMap<&str, &Param> = stored.iter().map(|p| (p.name.as_str(), p)).collect();
    for p in net.state_mut() {
        let src = by_name
            .get(p.name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
        if src.shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, network expects {:?}",
                p.name, src.shape, p.shape
            )));
        }
        p.value.clone_from(&src.value);
    }
    Ok(())
}

/// Writes a checkpoint directory atomically: everything goes to a sibling
/// temporary directory that is renamed into place at the end.
pub fn write_checkpoint(dir: impl AsRef<Path>, manifest: &Manifest, nets: &[(&str, &Sequential)]) -> Result<String> {
    let dir = dir.as_ref();
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Checkpoint(format!("bad checkpoint path {}", dir.display())))?
        .to_string_lossy();
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let mut manifest = manifest.clone();
    manifest.blobs.clear();
    for (net_name, net) in nets {
        let bytes = encode_params(net.state());
        let file = format!("{net_name}.bin");
        let path = tmp.join(&file);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        manifest.blobs.insert(
            net_name.to_string(),
            BlobEntry {
                file,
                sha256: sha256_hex(&bytes),
            },
        );
    }
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let path = tmp.join(MANIFEST_FILE);
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;

    if dir.exists() {
        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        std::fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        std::fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(sha256_hex(text.as_bytes()))
}

/// An opened checkpoint directory.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub dir: PathBuf,
    pub manifest: Manifest,
    /// SHA-256 of the manifest file.
    pub digest: String,
}

impl Checkpoint {
    /// Opens a checkpoint directory, or the one named by the `latest` file of
    /// a training output directory.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let mut dir = dir.as_ref().to_path_buf();
        if !dir.join(MANIFEST_FILE).is_file() {
            if let Ok(name) = std::fs::read_to_string(dir.join("latest")) {
                dir = dir.join(name.trim());
            }
        }
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if manifest.format != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
                manifest.format
            )));
        }
        Ok(Self {
            dir,
            digest: sha256_hex(text.as_bytes()),
            manifest,
        })
    }

    /// Reads and verifies one blob.
    pub fn tensors(&self, net_name: &str) -> Result<Vec<Param>> {
        let entry = self
            .manifest
            .blobs
            .get(net_name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no {net_name} weights")))?;
        let path = self.dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Checkpoint(format!("{} does not match its recorded digest", path.display())));
        }
        decode_params(&bytes)
    }

    fn require<'a, T>(&self, spec: &'a Option<T>, what: &str) -> Result<&'a T> {
        spec.as_ref()
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint manifest has no {what} spec")))
    }

    pub fn generator(&self) -> Result<Generator> {
        let spec = self.require(&self.manifest.generator, "generator")?;
        let mut g = Generator::new(spec.clone(), 0)?;
        load_into(g.net_mut(), &self.tensors("generator")?)?;
        Ok(g)
    }

    pub fn discriminator(&self, local: bool) -> Result<Discriminator> {
        let (spec, name) = if local {
            (&self.manifest.local_discriminator, "d_local")
        } else {
            (&self.manifest.global_discriminator, "d_global")
        };
        let mut d = Discriminator::new(self.require(spec, name)?.clone(), 0)?;
        load_into(d.net_mut(), &self.tensors(name)?)?;
        Ok(d)
    }

    pub fn parser(&self) -> Result<Parser> {
        let spec = self.require(&self.manifest.parser, "parser")?;
        let mut p = Parser::new(spec.clone(), 0)?;
        load_into(p.net_mut(), &self.tensors("parser")?)?;
        p.set_frozen(true);
        Ok(p)
    }

    pub fn has_parser(&self) -> bool {
        self.manifest.parser.is_some() && self.manifest.blobs.contains_key("parser")
    }
}

/// Writes a parser-only checkpoint.
pub fn save_parser(dir: impl AsRef<Path>, parser: &Parser, step: u64, seed: u64) -> Result<String> {
    let mut m = Manifest::new(CheckpointKind::Parser, "parser", step, seed);
    m.parser = Some(parser.spec().clone());
    m.parser_digest = Some(parser.digest());
    write_checkpoint(dir, &m, &[("parser", parser.net())])
}

/// Everything inference needs from a completion checkpoint.
#[derive(Debug, Clone)]
pub struct Model {
    pub generator: Generator,
    pub parser: Option<Parser>,
    pub model_tag: String,
    pub stage: Option<Stage>,
    pub digest: String,
}

impl Model {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::open(dir)?;
        if ck.manifest.kind != CheckpointKind::Completion {
            return Err(Error::Checkpoint(format!(
                "{} is a {:?} checkpoint, not a completion model",
                ck.dir.display(),
                ck.manifest.kind
            )));
        }
        let generator = ck.generator()?;
        let parser = if ck.has_parser() { Some(ck.parser()?) } else { None };
        Ok(Self {
            generator,
            parser,
            model_tag: ck.manifest.model_tag.clone(),
            stage: ck.manifest.stage,
            digest: ck.digest,
        })
    }
}
