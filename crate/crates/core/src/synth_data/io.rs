//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/images/<id>.png      8-bit RGB
//! <root>/<split>/annotations.json     {"<id>": [{"class_id": c, "box": [x1,y1,x2,y2]}, ...]}
//! ```
//! with `<split>` one of `source_train`, `target_train`, `source_eval`,
//! `target_eval`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetConfig, LabeledSplit, SceneObject, TargetSplit};
use crate::error::{CmtError, Result};
use crate::numerics::Tensor;

pub const SPLITS: [&str; 4] = ["source_train", "target_train", "source_eval", "target_eval"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDigest {
    pub count: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub config: DatasetConfig,
    pub splits: BTreeMap<String, SplitDigest>,
}

pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let file = File::create(path).map_err(|e| CmtError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| CmtError::format(path, e))?;
    writer
        .write_image_data(&to_rgb8(img))
        .map_err(|e| CmtError::format(path, e))?;
    Ok(())
}

pub fn to_rgb8(img: &Tensor) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((img.at3(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    bytes
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| CmtError::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| CmtError::format(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| CmtError::format(path, e))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(CmtError::format(path, "expected 8-bit RGB"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[(c * h + y) * w + x] = buf[(y * w + x) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn image_path(root: &Path, split: &str, id: u64) -> PathBuf {
    root.join(split)
        .join("images")
        .join(format!("{id:010}.png"))
}

fn write_split(
    root: &Path,
    split: &str,
    ids: &[u64],
    images: &[Tensor],
    ann: &[Vec<SceneObject>],
) -> Result<SplitDigest> {
    let dir = root.join(split).join("images");
    fs::create_dir_all(&dir).map_err(|e| CmtError::io(&dir, e))?;
    let mut hasher = Sha256::new();
    let mut map = BTreeMap::new();
    for ((id, img), objs) in ids.iter().zip(images).zip(ann) {
        write_png(&image_path(root, split, *id), img)?;
        hasher.update(id.to_le_bytes());
        hasher.update(to_rgb8(img));
        map.insert(format!("{id:010}"), objs.clone());
    }
    let ann_path = root.join(split).join("annotations.json");
    let text = serde_json::to_string_pretty(&map).map_err(|e| CmtError::format(&ann_path, e))?;
    hasher.update(text.as_bytes());
    fs::write(&ann_path, text).map_err(|e| CmtError::io(&ann_path, e))?;
    Ok(SplitDigest {
        count: ids.len(),
        sha256: hex(&hasher.finalize()),
    })
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes all four splits and `manifest.json`; returns the manifest.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| CmtError::io(root, e))?;
    let mut splits = BTreeMap::new();
    let st = &ds.source_train;
    splits.insert(
        "source_train".into(),
        write_split(root, "source_train", &st.ids, &st.images, &st.annotations)?,
    );
    let se = &ds.source_eval;
    splits.insert(
        "source_eval".into(),
        write_split(root, "source_eval", &se.ids, &se.images, &se.annotations)?,
    );
    for (name, split) in [
        ("target_train", &ds.target_train),
        ("target_eval", &ds.target_eval),
    ] {
        let digest = write_split(
            root,
            name,
            &split.ids,
            &split.images,
            split.annotations_for_storage(),
        )?;
        splits.insert(name.to_string(), digest);
    }
    let manifest = DatasetManifest {
        format_version: 1,
        config: ds.config.clone(),
        splits,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CmtError::format(&path, e))?;
    fs::write(&path, text).map_err(|e| CmtError::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<DatasetManifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| CmtError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CmtError::format(&path, e))
}

fn read_split(root: &Path, split: &str) -> Result<(Vec<u64>, Vec<Tensor>, Vec<Vec<SceneObject>>)> {
    let ann_path = root.join(split).join("annotations.json");
    let text = fs::read_to_string(&ann_path).map_err(|e| CmtError::io(&ann_path, e))?;
    let map: BTreeMap<String, Vec<SceneObject>> =
        serde_json::from_str(&text).map_err(|e| CmtError::format(&ann_path, e))?;
    let mut ids = Vec::with_capacity(map.len());
    let mut images = Vec::with_capacity(map.len());
    let mut ann = Vec::with_capacity(map.len());
    for (key, objs) in map {
        let id: u64 = key
            .parse()
            .map_err(|_| CmtError::format(&ann_path, format!("bad image id {key:?}")))?;
        images.push(read_png(&image_path(root, split, id))?);
        ids.push(id);
        ann.push(objs);
    }
    Ok((ids, images, ann))
}

/// Loads a dataset written by [`write_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(root)?;
    let labeled = |split| -> Result<LabeledSplit> {
        let (ids, images, annotations) = read_split(root, split)?;
        Ok(LabeledSplit {
            ids,
            images,
            annotations,
        })
    };
    let target = |split| -> Result<TargetSplit> {
        let (ids, images, annotations) = read_split(root, split)?;
        Ok(TargetSplit::new(ids, images, annotations))
    };
    Ok(Dataset {
        config: manifest.config,
        source_train: labeled("source_train")?,
        target_train: target("target_train")?,
        source_eval: labeled("source_eval")?,
        target_eval: target("target_eval")?,
    })
}

/// SHA-256 of the manifest file contents.
pub fn manifest_hash(root: &Path) -> Result<String> {
    let path = root.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| CmtError::io(&path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}
