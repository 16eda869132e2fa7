//! On-disk datasets: `<root>/images/<id>.pgm`, `<root>/masks/<id>.pgm`, and
//! `<root>/manifest.txt` listing ids one per line.

use std::fs;
use std::path::Path;

use vseg_core::data::{resize_image, resize_mask, Sample};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::pgm;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub samples: Vec<Sample>,
}

/// Write samples under ids `00000`, `00001`, ...
pub fn write_dataset(root: &Path, samples: &[Sample]) -> Result<Vec<String>> {
    for sub in ["images", "masks"] {
        let d = root.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let ids: Vec<String> = (0..samples.len()).map(|i| format!("{i:05}")).collect();
    for (id, s) in ids.iter().zip(samples) {
        pgm::save_image(&s.image, &root.join("images").join(format!("{id}.pgm")))?;
        pgm::save_mask(&s.mask, &root.join("masks").join(format!("{id}.pgm")))?;
    }
    let mut manifest = ids.join("\n");
    manifest.push('\n');
    write_atomic(&root.join(MANIFEST), manifest.as_bytes())?;
    Ok(ids)
}

/// Ids come from the manifest when present, otherwise from the sorted
/// `images/*.pgm` listing.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = root.join(MANIFEST);
    let ids: Vec<String> = if manifest.exists() {
        fs::read_to_string(&manifest)
            .map_err(|e| Error::io(&manifest, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    } else {
        let dir = root.join("images");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let p = e.path();
                (p.extension()? == "pgm").then(|| p.file_stem()?.to_str().map(String::from))?
            })
            .collect();
        ids.sort();
        ids
    };
    if ids.is_empty() {
        return Err(Error::Data(format!("{}: dataset has no samples", root.display())));
    }
    let mut samples = Vec::with_capacity(ids.len());
    for id in &ids {
        let image = pgm::load_image(&root.join("images").join(format!("{id}.pgm")))?;
        let mask = pgm::load_mask(&root.join("masks").join(format!("{id}.pgm")))?;
        let s = Sample::new(image, mask).map_err(|e| Error::Data(format!("sample {id}: {e}")))?;
        samples.push(s);
    }
    Ok(Dataset { ids, samples })
}

/// Resize every sample to `extent × extent` (bilinear images, nearest masks).
pub fn resize_samples(samples: &[Sample], extent: usize) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            if s.image.width() == extent && s.image.height() == extent {
                return Ok(s.clone());
            }
            let image = resize_image(&s.image, extent)?;
            let mask = resize_mask(&s.mask, extent)?;
            Ok(Sample::new(image, mask)?)
        })
        .collect()
}
