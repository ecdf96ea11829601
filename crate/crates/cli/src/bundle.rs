//! On-disk layout shared by `embed`, `index`, `datagen` and `upgrade`
//! outputs: `vocab.jsonl`, one NVEM matrix per entry kind bound to the
//! vocabulary hash, and an optional `manifest.json` naming the encoder.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use narravoc::datagen::{make_world, World, WorldSpec};
use narravoc::embed::{load_matrix_bound, save_matrix, ExternalEncoder, StubEncoder, TextEncoder, VocabMatrices};
use narravoc::transport::Endpoint;
use narravoc::vocab::{EntryKind, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::error::{CliResult, Failure};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EncoderSpec {
    Stub { dim: usize },
    External { endpoint: Endpoint, dim: usize },
    /// The synthetic world's encoder, rebuilt from `world.json`.
    World,
}

impl EncoderSpec {
    /// `stub` or an endpoint (`cmd:...`, `http://...`).
    pub fn parse(spec: &str, dim: usize) -> CliResult<Self> {
        if spec == "stub" {
            return Ok(EncoderSpec::Stub { dim });
        }
        Endpoint::parse(spec)
            .map(|endpoint| EncoderSpec::External { endpoint, dim })
            .ok_or_else(|| Failure::Usage(format!("--encoder {spec:?}: expected stub, cmd:<program>, or an http(s) URL")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub scene: usize,
    pub prefix: usize,
    pub postfix: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub dim: usize,
    pub encoder: Option<EncoderSpec>,
    pub vocab_sha256: String,
    pub counts: Counts,
}

pub struct Bundle {
    pub vocab: Arc<Vocabulary>,
    pub matrices: VocabMatrices,
    pub encoder: Option<EncoderSpec>,
    pub world: Option<WorldSpec>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn matrix_path(dir: &Path, kind: EntryKind) -> PathBuf {
    dir.join(format!("{}.nvem", kind.as_str()))
}

/// `path` itself when it is a file, `path/vocab.jsonl` when a directory.
pub fn vocab_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("vocab.jsonl")
    } else {
        path.to_path_buf()
    }
}

impl Bundle {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let vocab = Arc::new(Vocabulary::load(&dir.join("vocab.jsonl"))?);
        let hash = vocab.content_hash();
        let m = |kind| load_matrix_bound(&matrix_path(dir, kind), &hash);
        let matrices = VocabMatrices { scene: m(EntryKind::Scene)?, prefix: m(EntryKind::Prefix)?, postfix: m(EntryKind::Postfix)? };
        let world_path = dir.join("world.json");
        let world: Option<WorldSpec> =
            if world_path.exists() { Some(serde_json::from_slice(&fs::read(&world_path)?)?) } else { None };
        let manifest_path = dir.join("manifest.json");
        let encoder = if manifest_path.exists() {
            let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
            if manifest.vocab_sha256 != hex(&hash) {
                return Err(Failure::domain("cli.manifest_mismatch", "manifest.json does not describe vocab.jsonl"));
            }
            manifest.encoder
        } else {
            world.as_ref().map(|_| EncoderSpec::World)
        };
        Ok(Bundle { vocab, matrices, encoder, world })
    }

    pub fn manifest(&self) -> Manifest {
        let v = &self.vocab;
        Manifest {
            schema_version: MANIFEST_VERSION,
            dim: self.matrices.dim(),
            encoder: self.encoder.clone(),
            vocab_sha256: hex(&v.content_hash()),
            counts: Counts {
                scene: v.count(EntryKind::Scene),
                prefix: v.count(EntryKind::Prefix),
                postfix: v.count(EntryKind::Postfix),
            },
        }
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        fs::create_dir_all(dir)?;
        self.vocab.save(&dir.join("vocab.jsonl"))?;
        let hash = self.vocab.content_hash();
        for kind in EntryKind::ALL {
            save_matrix(&matrix_path(dir, kind), self.matrices.get(kind), &hash)?;
        }
        if let Some(spec) = &self.world {
            fs::write(dir.join("world.json"), serde_json::to_vec_pretty(spec)?)?;
        }
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&self.manifest())?)?;
        Ok(())
    }

    pub fn world(&self) -> CliResult<World> {
        let spec = self.world.as_ref().ok_or_else(|| Failure::domain("cli.no_world", "bundle has no world.json"))?;
        Ok(make_world(spec)?.1)
    }

    pub fn text_encoder(&self, timeout: Duration) -> CliResult<Box<dyn TextEncoder>> {
        let spec = self.encoder.as_ref().ok_or_else(|| Failure::domain("cli.no_encoder", "bundle does not record its encoder"))?;
        let enc = make_encoder(spec, timeout, self.world.as_ref())?;
        if enc.dim() != self.matrices.dim() {
            return Err(Failure::domain(
                "cli.manifest_mismatch",
                format!("encoder dimension {} differs from matrix dimension {}", enc.dim(), self.matrices.dim()),
            ));
        }
        Ok(enc)
    }
}

pub fn make_encoder(spec: &EncoderSpec, timeout: Duration, world: Option<&WorldSpec>) -> CliResult<Box<dyn TextEncoder>> {
    Ok(match spec {
        EncoderSpec::Stub { dim } => Box::new(StubEncoder::new(*dim)?),
        EncoderSpec::External { endpoint, dim } => Box::new(ExternalEncoder::new(endpoint.clone(), *dim, timeout)),
        EncoderSpec::World => {
            let spec = world.ok_or_else(|| Failure::domain("cli.no_world", "world encoder needs world.json"))?;
            Box::new(make_world(spec)?.1.encoder)
        }
    })
}
