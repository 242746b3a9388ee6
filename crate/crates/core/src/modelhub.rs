//! `from_pretrained`: resolve a model id through a JSON registry, download
//! its tar archive, verify the sha256, and unpack it into a content-keyed
//! cache directory.
//!
//! Cache layout under the cache root:
//!
//! ```text
//! models/<id>/.lock             serializes concurrent fetches of one id
//! models/<id>/<sha12>.partial   download in progress (kept for resume)
//! models/<id>/<sha12>/          unpacked bundle, renamed into place whole
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const ENV_HOME: &str = "EZ_HOME";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileRole {
    Config,
    Weights,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub path: String,
    pub role: FileRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryEntry {
    pub url: String,
    pub sha256: String,
    pub files: Vec<ModelFile>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelRef {
    pub id: String,
    pub url: String,
    pub sha256: String,
    pub files: Vec<ModelFile>,
}

impl ModelRef {
    fn file(&self, role: FileRole) -> &ModelFile {
        self.files
            .iter()
            .find(|f| f.role == role)
            .expect("validated refs carry each role once")
    }

    /// First 12 hex digits of the archive digest.
    pub fn cache_key(&self) -> &str {
        &self.sha256[..12]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelBundle {
    pub root: PathBuf,
    pub config_path: PathBuf,
    pub weights_path: PathBuf,
    pub resolved_ref: ModelRef,
}

/// Model id → entry.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Registry(pub BTreeMap<String, RegistryEntry>);

fn valid_sha256(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase())
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn valid_relative(path: &str) -> bool {
    let p = Path::new(path);
    !path.is_empty() && p.components().all(|c| matches!(c, std::path::Component::Normal(_)))
}

impl Registry {
    pub fn parse(json: &str) -> Result<Self> {
        let reg: Registry = serde_json::from_str(json).map_err(|e| Error::MalformedRegistry(e.to_string()))?;
        for (id, entry) in &reg.0 {
            check_entry(id, entry)?;
        }
        Ok(reg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }

    pub fn resolve(&self, id: &str) -> Result<ModelRef> {
        let entry = self.0.get(id).ok_or_else(|| Error::UnknownModel(id.to_string()))?;
        Ok(ModelRef {
            id: id.to_string(),
            url: entry.url.clone(),
            sha256: entry.sha256.clone(),
            files: entry.files.clone(),
        })
    }
}

fn check_entry(id: &str, entry: &RegistryEntry) -> Result<()> {
    let bad = |m: String| Err(Error::MalformedRegistry(format!("`{id}`: {m}")));
    if !valid_id(id) {
        return bad("id must be non-empty [A-Za-z0-9._-]".into());
    }
    if !valid_sha256(&entry.sha256) {
        return bad(format!("sha256 `{}` is not 64 lowercase hex digits", entry.sha256));
    }
    for role in [FileRole::Config, FileRole::Weights] {
        let n = entry.files.iter().filter(|f| f.role == role).count();
        if n != 1 {
            return bad(format!("expected exactly one {role:?} file, found {n}"));
        }
    }
    if let Some(f) = entry.files.iter().find(|f| !valid_relative(&f.path)) {
        return bad(format!("file path `{}` must be relative", f.path));
    }
    Ok(())
}

/// Byte transport for registries and archives.
pub trait Transport: Send + Sync {
    /// Streams the resource at `url`, starting at byte `offset`, into `sink`.
    fn fetch(&self, url: &str, offset: u64, sink: &mut dyn Write) -> std::result::Result<(), String>;
}

/// `http://` via ureq; `file://` URLs and bare paths via the filesystem.
#[derive(Debug, Default, Clone, Copy)]
pub struct DefaultTransport;

impl Transport for DefaultTransport {
    fn fetch(&self, url: &str, offset: u64, sink: &mut dyn Write) -> std::result::Result<(), String> {
        if url.starts_with("http://") || url.starts_with("https://") {
            let mut req = ureq::get(url);
            if offset > 0 {
                req = req.set("Range", &format!("bytes={offset}-"));
            }
            let resp = req.call().map_err(|e| e.to_string())?;
            let partial = resp.status() == 206;
            let mut reader = resp.into_reader();
            if offset > 0 && !partial {
                // Server ignored the range; skip what we already have.
                io::copy(&mut (&mut reader).take(offset), &mut io::sink()).map_err(|e| e.to_string())?;
            }
            io::copy(&mut reader, sink).map_err(|e| e.to_string())?;
            Ok(())
        } else {
            let path = url.strip_prefix("file://").unwrap_or(url);
            let mut f = File::open(path).map_err(|e| format!("{path}: {e}"))?;
            f.seek(SeekFrom::Start(offset)).map_err(|e| e.to_string())?;
            io::copy(&mut f, sink).map_err(|e| e.to_string())?;
            Ok(())
        }
    }
}

fn is_remote(location: &str) -> bool {
    location.contains("://")
}

/// Reads the registry at `location`: a local path is read directly, a URL
/// through `transport`.
pub fn load_registry(location: &str, transport: &dyn Transport) -> Result<Registry> {
    let text = if is_remote(location) {
        let mut buf = Vec::new();
        transport
            .fetch(location, 0, &mut buf)
            .map_err(|reason| Error::DownloadError {
                url: location.to_string(),
                reason,
            })?;
        String::from_utf8(buf).map_err(|e| Error::MalformedRegistry(e.to_string()))?
    } else {
        fs::read_to_string(location).map_err(|e| Error::io(location, e))?
    };
    Registry::parse(&text)
}

pub fn resolve_model(id: &str, registry: &str, transport: &dyn Transport) -> Result<ModelRef> {
    load_registry(registry, transport)?.resolve(id)
}

/// `$EZ_HOME`, else `$XDG_CACHE_HOME/ez`, else `$HOME/.cache/ez`.
pub fn default_cache_root() -> PathBuf {
    if let Some(home) = std::env::var_os(ENV_HOME).filter(|v| !v.is_empty()) {
        return PathBuf::from(home);
    }
    if let Some(xdg) = std::env::var_os("XDG_CACHE_HOME").filter(|v| !v.is_empty()) {
        return PathBuf::from(xdg).join("ez");
    }
    match std::env::var_os("HOME") {
        Some(home) => PathBuf::from(home).join(".cache").join("ez"),
        None => std::env::temp_dir().join("ez"),
    }
}

pub fn model_dir(cache_root: &Path, model: &ModelRef) -> PathBuf {
    cache_root.join("models").join(&model.id).join(model.cache_key())
}

fn bundle_if_complete(dir: &Path, model: &ModelRef) -> Option<ModelBundle> {
    let config_path = dir.join(&model.file(FileRole::Config).path);
    let weights_path = dir.join(&model.file(FileRole::Weights).path);
    (config_path.is_file() && weights_path.is_file()).then(|| ModelBundle {
        root: dir.to_path_buf(),
        config_path,
        weights_path,
        resolved_ref: model.clone(),
    })
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    io::copy(&mut f, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(h.finalize()))
}

/// Resolves `id`, downloading and unpacking on a cold cache. A warm cache
/// is served without touching `transport` (when `registry` is a local path).
pub fn from_pretrained(
    id: &str,
    cache_root: impl AsRef<Path>,
    registry: &str,
    transport: &dyn Transport,
) -> Result<ModelBundle> {
    let model = resolve_model(id, registry, transport)?;
    fetch_model(&model, cache_root.as_ref(), transport)
}

pub fn fetch_model(model: &ModelRef, cache_root: &Path, transport: &dyn Transport) -> Result<ModelBundle> {
    let dir = model_dir(cache_root, model);
    if let Some(bundle) = bundle_if_complete(&dir, model) {
        return Ok(bundle);
    }

    let id_dir = dir.parent().expect("model dir has a parent").to_path_buf();
    fs::create_dir_all(&id_dir).map_err(|e| Error::io(&id_dir, e))?;
    let lock_path = id_dir.join(".lock");
    let lock = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(&lock_path)
        .map_err(|e| Error::io(&lock_path, e))?;
    lock.lock().map_err(|e| Error::io(&lock_path, e))?;

    // Another process may have finished while we waited.
    if let Some(bundle) = bundle_if_complete(&dir, model) {
        return Ok(bundle);
    }
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let partial = id_dir.join(format!("{}.partial", model.cache_key()));
    {
        let mut out = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&partial)
            .map_err(|e| Error::io(&partial, e))?;
        let offset = out.metadata().map_err(|e| Error::io(&partial, e))?.len();
        transport
            .fetch(&model.url, offset, &mut out)
            .map_err(|reason| Error::DownloadError {
                url: model.url.clone(),
                reason,
            })?;
        out.sync_all().map_err(|e| Error::io(&partial, e))?;
    }

    let actual = sha256_file(&partial)?;
    if actual != model.sha256 {
        let _ = fs::remove_file(&partial);
        return Err(Error::ChecksumMismatch {
            id: model.id.clone(),
            expected: model.sha256.clone(),
            actual,
        });
    }

    let staging = tempfile::Builder::new()
        .prefix(".staging-")
        .tempdir_in(&id_dir)
        .map_err(|e| Error::io(&id_dir, e))?;
    let archive = File::open(&partial).map_err(|e| Error::io(&partial, e))?;
    tar::Archive::new(archive)
        .unpack(staging.path())
        .map_err(|e| Error::DownloadError {
            url: model.url.clone(),
            reason: format!("bad archive: {e}"),
        })?;
    if bundle_if_complete(staging.path(), model).is_none() {
        return Err(Error::DownloadError {
            url: model.url.clone(),
            reason: "archive lacks the registered config or weights file".into(),
        });
    }
    let staged = staging.keep();
    fs::rename(&staged, &dir).map_err(|e| Error::io(&dir, e))?;
    let _ = fs::remove_file(&partial);

    bundle_if_complete(&dir, model).ok_or_else(|| Error::DownloadError {
        url: model.url.clone(),
        reason: "bundle vanished after unpacking".into(),
    })
}
