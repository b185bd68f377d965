//! Degradation, procedural datasets and persistence.

pub mod io;
pub mod resize;
pub mod synth;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use io::{load_checkpoint, load_png, load_tensor, save_checkpoint, save_png, save_tensor};
pub use resize::bicubic_resize;
pub use synth::make_synthetic_dataset;

/// An aligned (LR, reference, HR) triplet of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub id: String,
    pub lr: ImageTensor,
    pub reference: ImageTensor,
    pub hr: ImageTensor,
}

/// Write `<root>/<id>/{lr,ref,hr}.wdtn`.
pub fn save_dataset(root: impl AsRef<Path>, pairs: &[SamplePair]) -> Result<()> {
    let root = root.as_ref();
    for p in pairs {
        let dir = root.join(&p.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        save_tensor(dir.join("lr.wdtn"), &p.lr)?;
        save_tensor(dir.join("ref.wdtn"), &p.reference)?;
        save_tensor(dir.join("hr.wdtn"), &p.hr)?;
    }
    Ok(())
}

/// Read every sample directory under `root`, sorted by id.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Vec<SamplePair>> {
    let root = root.as_ref();
    let mut ids = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::Precondition(format!("no samples under {}", root.display())));
    }
    ids.into_iter()
        .map(|id| {
            let dir = root.join(&id);
            Ok(SamplePair {
                lr: load_tensor(dir.join("lr.wdtn"))?,
                reference: load_tensor(dir.join("ref.wdtn"))?,
                hr: load_tensor(dir.join("hr.wdtn"))?,
                id,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = make_synthetic_dataset(2, 3, 16, 1).unwrap();
        save_dataset(dir.path(), &set).unwrap();
        assert!(dir.path().join(&set[0].id).join("ref.wdtn").exists());
        assert_eq!(load_dataset(dir.path()).unwrap(), set);
    }
}
