//! On-disk datasets: one directory per scene plus a TOML manifest.

use std::fs;
use std::path::Path;

use csr_core::synthdata::{Scene, SceneRecord, Split};
use serde::{Deserialize, Serialize};

use crate::io::{read_raw, write_map};
use crate::CliError;

pub const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    id: String,
    seed: u64,
    split: String,
    light_color: [f64; 3],
    normalization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    scene: Vec<ManifestEntry>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

/// Writes every scene's maps (raw, plus PNG previews if asked) and the manifest.
pub fn write_dataset(dir: &Path, records: &[SceneRecord], png: bool) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for r in records {
        let sd = dir.join(&r.id);
        fs::create_dir_all(&sd).map_err(|e| io_err(&sd, e))?;
        let s = &r.scene;
        let maps = [
            ("image", &s.image),
            ("albedo", &s.albedo),
            ("shading", &s.shading_gray),
            ("mask", &s.violation_mask),
        ];
        for (stem, t) in maps {
            write_map(&sd, stem, t, png.then_some(t)).map_err(|e| io_err(&sd.join(stem), e))?;
        }
        entries.push(ManifestEntry {
            id: r.id.clone(),
            seed: r.seed,
            split: r.split.as_str().into(),
            light_color: s.light_color,
            normalization: s.normalization,
        });
    }
    let text = toml::to_string(&Manifest { scene: entries }).map_err(|e| CliError::Data(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, text).map_err(|e| io_err(&path, e))
}

/// Loads a dataset written by [`write_dataset`], checking map shapes.
pub fn load_dataset(dir: &Path) -> Result<Vec<SceneRecord>, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| io_err(&path, e))?;
    let mut out = Vec::with_capacity(manifest.scene.len());
    for e in manifest.scene {
        let split = match e.split.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(io_err(&path, format!("scene {} has unknown split '{other}'", e.id))),
        };
        let sd = dir.join(&e.id);
        let read = |stem: &str| {
            let p = sd.join(format!("{stem}.csrf"));
            read_raw(&p).map_err(|err| io_err(&p, err))
        };
        let image = read("image")?;
        let albedo = read("albedo")?;
        let shading_gray = read("shading")?;
        let violation_mask = read("mask")?;
        let (h, w, _) = image.shape();
        if image.channels() != 3
            || albedo.shape() != (h, w, 3)
            || shading_gray.shape() != (h, w, 1)
            || violation_mask.shape() != (h, w, 1)
        {
            return Err(io_err(&sd, "scene maps have inconsistent shapes"));
        }
        let scene = Scene { image, albedo, shading_gray, light_color: e.light_color, violation_mask, normalization: e.normalization };
        out.push(SceneRecord { id: e.id, seed: e.seed, split, scene });
    }
    if out.is_empty() {
        return Err(io_err(&path, "manifest lists no scenes"));
    }
    Ok(out)
}
