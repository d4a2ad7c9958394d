//! Loading a gesture library from a directory.
//!
//! Layout: `<id>.model.json` and `<id>.cal.json` per gesture, plus an
//! optional `library.json` listing `{"id", "display_name", "uses_object"}`
//! entries. Gestures without a `library.json` entry use their id as the
//! display name and `uses_object = false`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use gesture_core::scoring::Calibration;
use gesture_core::session::{GestureEntry, GestureLibrary};
use gesture_core::GmmModel;
use serde::Deserialize;

const MODEL_SUFFIX: &str = ".model.json";
const CALIBRATION_SUFFIX: &str = ".cal.json";

#[derive(Debug, Deserialize)]
struct LibraryEntry {
    id: String,
    display_name: Option<String>,
    #[serde(default)]
    uses_object: bool,
}

pub fn load_library(dir: &Path, reference_frames: usize) -> Result<GestureLibrary> {
    let meta: BTreeMap<String, LibraryEntry> = match fs::read_to_string(dir.join("library.json")) {
        Ok(text) => serde_json::from_str::<Vec<LibraryEntry>>(&text)
            .context("library.json")?
            .into_iter()
            .map(|e| (e.id.clone(), e))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(e).context("library.json"),
    };

    let mut ids: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(MODEL_SUFFIX)).map(str::to_owned))
        .collect();
    ids.sort();
    if ids.is_empty() {
        bail!("no *{MODEL_SUFFIX} files in {}", dir.display());
    }

    let mut library = GestureLibrary::new();
    for id in ids {
        let model_path = dir.join(format!("{id}{MODEL_SUFFIX}"));
        let cal_path = dir.join(format!("{id}{CALIBRATION_SUFFIX}"));
        let model = GmmModel::from_json(&fs::read_to_string(&model_path).with_context(|| model_path.display().to_string())?)
            .with_context(|| model_path.display().to_string())?;
        let calibration = Calibration::from_json(&fs::read_to_string(&cal_path).with_context(|| cal_path.display().to_string())?)
            .with_context(|| cal_path.display().to_string())?;
        let (display_name, uses_object) = match meta.get(&id) {
            Some(e) => (e.display_name.clone().unwrap_or_else(|| id.clone()), e.uses_object),
            None => (id.clone(), false),
        };
        library.insert(GestureEntry::new(id, display_name, uses_object, model, calibration, reference_frames)?)?;
    }
    Ok(library)
}
