//! On-disk dataset layouts.
//!
//! * `sysu-like`: `root/cam{1..6}/<person_id>/<frame>.png`; cameras 3 and 6
//!   are infrared. Optional identity lists `root/exp/{train,val,test}_id.txt`.
//! * `regdb-like`: `root/{visible,thermal}/<person_id>/<idx>.png` plus
//!   `root/splits/trial_{0..9}.txt` naming the training identities of each
//!   trial. Visible images are camera 0, thermal camera 1.
//! * `synthetic`: `root/manifest.tsv` (`path id modality camera`),
//!   `root/keypoints.tsv` (`path` then `x y v` per joint) and PNG images.
//!
//! Any layout may carry a `keypoints.tsv` sidecar. Infrared images are
//! stored with one channel and replicated to three on load.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{Dataset, Keypoint, Modality, Sample};
use crate::error::{Error, Result};
use crate::substrate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    SysuLike,
    RegdbLike,
    Synthetic,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sysu-like" => Ok(Layout::SysuLike),
            "regdb-like" => Ok(Layout::RegdbLike),
            "synthetic" => Ok(Layout::Synthetic),
            other => Err(Error::Parse(format!(
                "unknown layout '{other}' (expected sysu-like, regdb-like or synthetic)"
            ))),
        }
    }
}

impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Layout::SysuLike => "sysu-like",
            Layout::RegdbLike => "regdb-like",
            Layout::Synthetic => "synthetic",
        })
    }
}

pub const SYSU_IR_CAMERAS: [usize; 2] = [3, 6];
pub const REGDB_TRIALS: usize = 10;

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a PNG (or any format the decoder knows) into `3 x H x W` in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut t = Tensor::zeros(vec![3, h, w]);
    for (x, y, p) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            t.data_mut()[c * plane + i] = p.0[c] as f32 / 255.0;
        }
    }
    Ok(t)
}

/// Writes RGB images as 8-bit colour and IR images as 8-bit gray (first
/// channel).
pub fn write_image(path: &Path, image: &Tensor<f32>, modality: Modality) -> Result<()> {
    let (h, w) = (image.dim(1), image.dim(2));
    let plane = h * w;
    let d = image.data();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    match modality {
        Modality::Rgb => RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            image::Rgb([to_u8(d[i]), to_u8(d[plane + i]), to_u8(d[2 * plane + i])])
        })
        .save(path)?,
        Modality::Ir => GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([to_u8(d[y as usize * w + x as usize])]))
            .save(path)?,
    }
    Ok(())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::ingestion(dir, e.to_string()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    out.sort();
    Ok(out)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

fn parse_id(dir: &Path) -> Result<usize> {
    dir.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::ingestion(dir, "directory name is not a numeric person id"))
}

/// Images under `dir/<person_id>/`, tagged with the given modality/camera.
fn scan_person_dirs(root: &Path, dir: &Path, modality: Modality, camera: usize, out: &mut Vec<Sample>) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::ingestion(dir, "expected directory is missing"));
    }
    for person in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let identity = parse_id(&person)?;
        for file in sorted_entries(&person)?.into_iter().filter(|p| is_image(p)) {
            out.push(Sample {
                image: read_image(&file)?,
                identity,
                modality,
                camera,
                keypoints: None,
                path: file.strip_prefix(root).unwrap_or(&file).to_path_buf(),
            });
        }
    }
    Ok(())
}

fn parse_keypoint_line(line: &str, path: &Path, lineno: usize) -> Result<(PathBuf, Vec<Keypoint>)> {
    let mut fields = line.split('\t');
    let rel = PathBuf::from(fields.next().unwrap_or_default());
    let nums: Vec<&str> = fields.collect();
    if nums.len() % 3 != 0 {
        return Err(Error::ingestion(path, format!("line {lineno}: keypoint fields not in x y v triples")));
    }
    let bad = |what: &str| Error::ingestion(path, format!("line {lineno}: bad {what}"));
    let kps = nums
        .chunks(3)
        .map(|t| {
            Ok(Keypoint {
                x: t[0].parse().map_err(|_| bad("x"))?,
                y: t[1].parse().map_err(|_| bad("y"))?,
                visible: match t[2] {
                    "1" => true,
                    "0" => false,
                    _ => return Err(bad("visibility")),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rel, kps))
}

/// Attaches `root/keypoints.tsv` when present; returns the joint count.
fn attach_keypoints(root: &Path, samples: &mut [Sample]) -> Result<Option<usize>> {
    let path = root.join("keypoints.tsv");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    let mut table = HashMap::new();
    let mut count = None;
    for (n, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let (rel, kps) = parse_keypoint_line(line, &path, n + 1)?;
        if *count.get_or_insert(kps.len()) != kps.len() {
            return Err(Error::ingestion(&path, format!("line {}: inconsistent joint count", n + 1)));
        }
        table.insert(rel, kps);
    }
    for s in samples.iter_mut() {
        s.keypoints = table.remove(&s.path);
    }
    Ok(count)
}

fn load_sysu(root: &Path, out: &mut Vec<Sample>) -> Result<()> {
    for cam in 1..=6 {
        let m = if SYSU_IR_CAMERAS.contains(&cam) { Modality::Ir } else { Modality::Rgb };
        scan_person_dirs(root, &root.join(format!("cam{cam}")), m, cam, out)?;
    }
    Ok(())
}

fn load_regdb(root: &Path, out: &mut Vec<Sample>) -> Result<()> {
    scan_person_dirs(root, &root.join("visible"), Modality::Rgb, 0, out)?;
    scan_person_dirs(root, &root.join("thermal"), Modality::Ir, 1, out)?;
    for t in 0..REGDB_TRIALS {
        let split = root.join("splits").join(format!("trial_{t}.txt"));
        if !split.is_file() {
            return Err(Error::ingestion(&split, "trial split file is missing"));
        }
    }
    Ok(())
}

fn load_synthetic(root: &Path, out: &mut Vec<Sample>) -> Result<()> {
    let manifest = root.join("manifest.tsv");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::ingestion(&manifest, e.to_string()))?;
    for (n, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::ingestion(&manifest, format!("line {}: {what}", n + 1));
        if f.len() != 4 {
            return Err(bad("expected 4 tab-separated columns"));
        }
        let rel = PathBuf::from(f[0]);
        let identity = f[1].parse().map_err(|_| bad("bad id"))?;
        let modality = f[2].parse().map_err(|_| bad("bad modality"))?;
        let camera = f[3].parse().map_err(|_| bad("bad camera"))?;
        out.push(Sample {
            image: read_image(&root.join(&rel))?,
            identity,
            modality,
            camera,
            keypoints: None,
            path: rel,
        });
    }
    Ok(())
}

/// Loads every image of a layout. `keypoint_count` is taken from the
/// sidecar when present, else `default_keypoints`.
pub fn load_dataset(root: &Path, layout: Layout, default_keypoints: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::ingestion(root, "dataset root is not a directory"));
    }
    let mut samples = Vec::new();
    match layout {
        Layout::SysuLike => load_sysu(root, &mut samples)?,
        Layout::RegdbLike => load_regdb(root, &mut samples)?,
        Layout::Synthetic => load_synthetic(root, &mut samples)?,
    }
    if samples.is_empty() {
        return Err(Error::ingestion(root, "no images found"));
    }
    let count = attach_keypoints(root, &mut samples)?.unwrap_or(default_keypoints);
    let data = Dataset::new(samples, count)?;
    log::info!("loaded {} ({layout}): {}", root.display(), data.summary());
    Ok(data)
}

/// Writes the synthetic layout: PNGs, `manifest.tsv`, `keypoints.tsv`.
pub fn export_synthetic(data: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut manifest = String::from("path\tid\tmodality\tcamera\n");
    let mut kps = String::from("path");
    for k in 0..data.keypoint_count {
        kps.push_str(&format!("\tx{k}\ty{k}\tv{k}"));
    }
    kps.push('\n');
    for s in &data.samples {
        let rel = s.path.to_string_lossy();
        write_image(&root.join(&s.path), &s.image, s.modality)?;
        manifest.push_str(&format!("{rel}\t{}\t{}\t{}\n", s.identity, s.modality, s.camera));
        if let Some(points) = &s.keypoints {
            kps.push_str(&rel);
            for p in points {
                kps.push_str(&format!("\t{}\t{}\t{}", p.x, p.y, u8::from(p.visible)));
            }
            kps.push('\n');
        }
    }
    fs::write(root.join("manifest.tsv"), manifest)?;
    fs::write(root.join("keypoints.tsv"), kps)?;
    Ok(())
}

/// Parses an identity list: integers separated by commas and/or whitespace.
pub fn read_id_list(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::ingestion(path, format!("'{t}' is not an identity"))))
        .collect()
}

/// Training identities of a RegDB-style trial.
pub fn regdb_train_ids(root: &Path, trial: usize) -> Result<Vec<usize>> {
    read_id_list(&root.join("splits").join(format!("trial_{trial}.txt")))
}

/// SYSU-style identity list (`train`, `val` or `test`), if present.
pub fn sysu_ids(root: &Path, split: &str) -> Result<Option<Vec<usize>>> {
    let path = root.join("exp").join(format!("{split}_id.txt"));
    if path.is_file() {
        read_id_list(&path).map(Some)
    } else {
        Ok(None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Loads one split of a dataset root.
///
/// * synthetic: `root/<split>` when that directory exists, else `root`.
/// * sysu-like: identities from `exp/train_id.txt` (plus `val_id.txt`) or
///   `exp/test_id.txt`; without lists every identity is used.
/// * regdb-like: the training identities of `trial`, or their complement.
pub fn load_split(root: &Path, layout: Layout, split: Split, trial: usize, default_keypoints: usize) -> Result<Dataset> {
    match layout {
        Layout::Synthetic => {
            let sub = root.join(split.to_string());
            let dir = if sub.join("manifest.tsv").is_file() { sub } else { root.to_path_buf() };
            load_dataset(&dir, layout, default_keypoints)
        }
        Layout::SysuLike => {
            let data = load_dataset(root, layout, default_keypoints)?;
            let ids = match split {
                Split::Train => match sysu_ids(root, "train")? {
                    Some(mut ids) => {
                        ids.extend(sysu_ids(root, "val")?.unwrap_or_default());
                        Some(ids)
                    }
                    None => None,
                },
                Split::Test => sysu_ids(root, "test")?,
            };
            match ids {
                Some(ids) => Ok(data.restrict(&ids)),
                None => {
                    log::warn!("{}: no identity lists, using every identity for {split}", root.display());
                    Ok(data)
                }
            }
        }
        Layout::RegdbLike => {
            let data = load_dataset(root, layout, default_keypoints)?;
            let train = regdb_train_ids(root, trial)?;
            let ids: Vec<usize> = match split {
                Split::Train => train,
                Split::Test => data.identities().into_iter().filter(|i| !train.contains(i)).collect(),
            };
            Ok(data.restrict(&ids))
        }
    }
}
