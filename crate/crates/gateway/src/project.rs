//! Project files: a tar archive holding `manifest.json` and one PNG per
//! layer under `layers/`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::RgbaImage;
use pigment_core::palette::PaletteState;
use pigment_core::session::GenerationConfig;
use serde::{Deserialize, Serialize};

use crate::protocol::AxisSpec;
use crate::wire::{decode_png_bytes, png_bytes};

pub const SCHEMA_VERSION: u64 = 1;
const MANIFEST: &str = "manifest.json";
const MAX_ENTRY: u64 = 256 << 20;
const EXTENSION: &str = "pigment";

#[derive(Debug, thiserror::Error)]
pub enum ProjectError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt project: {0}")]
    Corrupt(String),
    #[error("project schema version {found} needs migration to {supported}")]
    Migration { found: u64, supported: u64 },
    #[error("invalid id {0:?}")]
    InvalidId(String),
    #[error("no project {0:?}")]
    NotFound(String),
}

fn corrupt(e: impl ToString) -> ProjectError {
    ProjectError::Corrupt(e.to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub id: String,
    pub name: String,
    pub visible: bool,
    pub raster: RgbaImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Project {
    pub name: String,
    /// Bottom layer first.
    pub layers: Vec<Layer>,
    pub palette: PaletteState,
    pub axes: Vec<AxisSpec>,
    pub config: GenerationConfig,
}

impl Project {
    pub fn empty(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            layers: Vec::new(),
            palette: PaletteState::new(),
            axes: Vec::new(),
            config: GenerationConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ProjectError> {
        let mut ids = HashSet::new();
        for l in &self.layers {
            check_id(&l.id)?;
            if !ids.insert(l.id.as_str()) {
                return Err(corrupt(format!("duplicate layer id {:?}", l.id)));
            }
        }
        if let Some(first) = self.layers.first() {
            if self
                .layers
                .iter()
                .any(|l| l.raster.dimensions() != first.raster.dimensions())
            {
                return Err(corrupt("layers differ in size"));
            }
        }
        let mut axis_ids = HashSet::new();
        if self.axes.iter().any(|a| !axis_ids.insert(a.id.as_str())) {
            return Err(corrupt("duplicate axis id"));
        }
        self.palette.check().map_err(corrupt)?;
        self.config.validate().map_err(corrupt)
    }
}

fn check_id(id: &str) -> Result<(), ProjectError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(ProjectError::InvalidId(id.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema_version: u64,
    name: String,
    layers: Vec<LayerEntry>,
    palette: PaletteState,
    axes: Vec<AxisSpec>,
    config: GenerationConfig,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    id: String,
    name: String,
    visible: bool,
    file: String,
}

fn append(builder: &mut tar::Builder<Vec<u8>>, path: &str, data: &[u8]) -> io::Result<()> {
    let mut header = tar::Header::new_ustar();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_entry_type(tar::EntryType::Regular);
    builder.append_data(&mut header, path, data)
}

/// Serializes a project to archive bytes. Identical projects give identical
/// bytes.
pub fn to_archive(project: &Project) -> Result<Vec<u8>, ProjectError> {
    project.validate()?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        name: project.name.clone(),
        layers: project
            .layers
            .iter()
            .map(|l| LayerEntry {
                id: l.id.clone(),
                name: l.name.clone(),
                visible: l.visible,
                file: format!("layers/{}.png", l.id),
            })
            .collect(),
        palette: project.palette.clone(),
        axes: project.axes.clone(),
        config: project.config.clone(),
    };
    let mut builder = tar::Builder::new(Vec::new());
    append(
        &mut builder,
        MANIFEST,
        &serde_json::to_vec_pretty(&manifest).map_err(corrupt)?,
    )?;
    for (entry, layer) in manifest.layers.iter().zip(&project.layers) {
        append(&mut builder, &entry.file, &png_bytes(&layer.raster))?;
    }
    Ok(builder.into_inner()?)
}

/// Parses archive bytes. Nothing is returned unless every part is valid.
pub fn from_archive(bytes: &[u8]) -> Result<Project, ProjectError> {
    let mut archive = tar::Archive::new(bytes);
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for entry in archive.entries().map_err(corrupt)? {
        let entry = entry.map_err(corrupt)?;
        let path = entry
            .path()
            .map_err(corrupt)?
            .to_string_lossy()
            .into_owned();
        if entry.size() > MAX_ENTRY {
            return Err(corrupt(format!("{path} too large")));
        }
        let mut data = Vec::new();
        entry
            .take(MAX_ENTRY)
            .read_to_end(&mut data)
            .map_err(corrupt)?;
        files.insert(path, data);
    }
    let raw = files
        .get(MANIFEST)
        .ok_or_else(|| corrupt("missing manifest"))?;
    let value: serde_json::Value = serde_json::from_slice(raw).map_err(corrupt)?;
    let version = value
        .get("schema_version")
        .ok_or_else(|| corrupt("manifest has no schema_version"))?
        .as_u64()
        .ok_or_else(|| corrupt("schema_version is not an integer"))?;
    if version != SCHEMA_VERSION {
        return Err(ProjectError::Migration {
            found: version,
            supported: SCHEMA_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value).map_err(corrupt)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in manifest.layers {
        let data = files
            .get(&entry.file)
            .ok_or_else(|| corrupt(format!("missing {}", entry.file)))?;
        layers.push(Layer {
            raster: decode_png_bytes(data).map_err(corrupt)?.into_rgba8(),
            id: entry.id,
            name: entry.name,
            visible: entry.visible,
        });
    }
    let project = Project {
        name: manifest.name,
        layers,
        palette: manifest.palette,
        axes: manifest.axes,
        config: manifest.config,
    };
    project.validate()?;
    Ok(project)
}

/// Directory of project archives. Writes to one id are serialized; each
/// save replaces the file atomically.
#[derive(Debug)]
pub struct ProjectStore {
    root: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ProjectStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ProjectError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        let mut locks = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        locks.entry(id.to_string()).or_default().clone()
    }

    pub fn path_of(&self, id: &str) -> Result<PathBuf, ProjectError> {
        check_id(id)?;
        Ok(self.root.join(format!("{id}.{EXTENSION}")))
    }

    pub fn save(&self, id: &str, project: &Project) -> Result<PathBuf, ProjectError> {
        let path = self.path_of(id)?;
        let bytes = to_archive(project)?;
        let lock = self.lock(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let tmp = self.root.join(format!(".{id}.{EXTENSION}.tmp"));
        fs::write(&tmp, &bytes)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(&self, id: &str) -> Result<Project, ProjectError> {
        let path = self.path_of(id)?;
        let lock = self.lock(id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(ProjectError::NotFound(id.to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        from_archive(&bytes)
    }

    /// Stored project ids, sorted.
    pub fn list(&self) -> Result<Vec<String>, ProjectError> {
        let mut ids = Vec::new();
        for entry in fs::read_dir(&self.root)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) == Some(EXTENSION) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    if check_id(stem).is_ok() {
                        ids.push(stem.to_string());
                    }
                }
            }
        }
        ids.sort();
        Ok(ids)
    }
}

/// Reads a project archive from a file path.
pub fn load_file(path: &Path) -> Result<Project, ProjectError> {
    from_archive(&fs::read(path)?)
}
