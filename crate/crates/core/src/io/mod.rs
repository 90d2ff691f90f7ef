//! File formats: checkpoints, netpbm images and masks, run configuration
//! and CSV reports, plus the on-disk dataset layout.

pub mod checkpoint;
pub mod config;
pub mod pnm;
pub mod report;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::data::SegmentationSample;

pub use config::{RunConfig, Task};

/// Image and mask paths of sample `index` under a dataset directory.
pub fn sample_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (
        dir.join("images").join(format!("{index:05}.ppm")),
        dir.join("masks").join(format!("{index:05}.pgm")),
    )
}

/// Writes `images/NNNNN.ppm` and `masks/NNNNN.pgm` for every sample.
pub fn save_dataset(dir: &Path, samples: &[SegmentationSample]) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let (img, mask) = sample_paths(dir, i);
        pnm::write_planar(img, &s.image)?;
        pnm::write_pgm(mask, &s.mask)?;
    }
    Ok(())
}

/// Loads every `images/*.ppm` with its same-named `masks/*.pgm`, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<SegmentationSample>> {
    let images = dir.join("images");
    let entries = std::fs::read_dir(&images).map_err(|e| Error::io(&images, e))?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(&images, err))?;
        let p = e.path();
        if p.extension().is_some_and(|x| x == "ppm") {
            names.push(p);
        }
    }
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyDataset);
    }
    names
        .into_iter()
        .map(|img| {
            let stem = img.file_stem().expect("listed files have names").to_owned();
            let mask = dir.join("masks").join(&stem).with_extension("pgm");
            SegmentationSample::new(
                pnm::read_planar(&img)?,
                pnm::read_pgm(&mask)?,
                stem.to_string_lossy().into_owned(),
            )
        })
        .collect()
}
