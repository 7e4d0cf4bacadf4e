//! Dataset layout: `root/<seq>/frames/%05d.pgm` and
//! `root/<seq>/masks/%05d.pgm`, numbered from `00001`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::mask::Mask;

use super::pgm::{read_mask, read_pgm, write_mask, write_pgm, GrayImage};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<GrayImage>,
    pub masks: Vec<Mask>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.len() != self.masks.len() {
            return Err(Error::Input(format!(
                "sequence {} has {} frames but {} masks",
                self.name,
                self.frames.len(),
                self.masks.len()
            )));
        }
        let Some(first) = self.frames.first() else {
            return Err(Error::Input(format!("sequence {} is empty", self.name)));
        };
        for (f, m) in self.frames.iter().zip(&self.masks) {
            if (f.width, f.height) != (first.width, first.height)
                || (m.width(), m.height()) != (first.width, first.height)
            {
                return Err(Error::Input(format!(
                    "sequence {} mixes frame sizes",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// `00001.pgm` for index 1.
pub fn frame_file_name(index: usize) -> String {
    format!("{index:05}.pgm")
}

/// Files `00001.pgm..` of `dir`, checked to be contiguous.
pub fn numbered_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut numbers = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".pgm")) else {
            continue;
        };
        if stem.len() == 5 && stem.bytes().all(|b| b.is_ascii_digit()) {
            numbers.push(stem.parse::<usize>().expect("five digits"));
        }
    }
    numbers.sort_unstable();
    let Some(&last) = numbers.last() else {
        return Err(Error::MissingFiles(vec![dir
            .join(frame_file_name(1))
            .display()
            .to_string()]));
    };
    let missing: Vec<String> = (1..=last)
        .filter(|n| numbers.binary_search(n).is_err())
        .map(|n| dir.join(frame_file_name(n)).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok((1..=last).map(|n| dir.join(frame_file_name(n))).collect())
}

pub fn load_frames(seq_dir: &Path) -> Result<Vec<GrayImage>> {
    numbered_files(&seq_dir.join("frames"))?
        .iter()
        .map(|p| read_pgm(p))
        .collect()
}

pub fn load_sequence(seq_dir: &Path) -> Result<Sequence> {
    let name = seq_dir
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Input(format!("bad sequence directory {}", seq_dir.display())))?
        .to_string();
    let frames = load_frames(seq_dir)?;
    let mask_dir = seq_dir.join("masks");
    let missing: Vec<String> = (1..=frames.len())
        .map(|i| mask_dir.join(frame_file_name(i)))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let masks = (1..=frames.len())
        .map(|i| read_mask(&mask_dir.join(frame_file_name(i))))
        .collect::<Result<_>>()?;
    let seq = Sequence {
        name,
        frames,
        masks,
    };
    seq.validate()?;
    Ok(seq)
}

/// Sequence directories of `root` in lexicographic order.
pub fn sequence_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() && !entry.file_name().to_string_lossy().starts_with('.') {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_dataset(root: &Path) -> Result<Vec<Sequence>> {
    let seqs = sequence_dirs(root)?
        .iter()
        .map(|d| load_sequence(d))
        .collect::<Result<Vec<_>>>()?;
    if seqs.is_empty() {
        return Err(Error::Input(format!(
            "no sequences under {}",
            root.display()
        )));
    }
    Ok(seqs)
}

/// Writes sequences into the existing directory `root`.
pub fn save_dataset(seqs: &[Sequence], root: &Path) -> Result<()> {
    for seq in seqs {
        seq.validate()?;
        let frames = root.join(&seq.name).join("frames");
        let masks = root.join(&seq.name).join("masks");
        for dir in [&frames, &masks] {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        for (i, (f, m)) in seq.frames.iter().zip(&seq.masks).enumerate() {
            write_pgm(&frames.join(frame_file_name(i + 1)), f)?;
            write_mask(&masks.join(frame_file_name(i + 1)), m)?;
        }
    }
    Ok(())
}
