//! On-disk dataset format: JSONL scene and annotation files.
//!
//! Scenes carry their channel stack as nested run-length encoding
//! (channel → row → run lengths, each row starting with the length of its
//! leading zero run). Annotations are stored per (scene, class) pair with
//! continuous boxes. Both files are written atomically — temp file in the
//! target directory, then rename — so a crashed writer never leaves a
//! half-written dataset behind.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scene::{AnnotationSet, Annotation, ClassId, Dataset, Label, Scene, Split};

/// Run-length encodes one binary row: `[z0, o1, z2, ...]` alternating
/// zero/one run lengths, always starting with the zero-run length (possibly
/// zero) and summing to the row width.
fn rle_encode_row(row: &[u8]) -> Vec<u32> {
    let mut runs = Vec::new();
    let mut current: u8 = 0;
    let mut len: u32 = 0;
    for &v in row {
        if v == current {
            len += 1;
        } else {
            runs.push(len);
            current = v;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn rle_decode_row(runs: &[u32], width: u32) -> Result<Vec<u8>> {
    let mut row = Vec::with_capacity(width as usize);
    for (i, &len) in runs.iter().enumerate() {
        let value = (i % 2) as u8;
        row.extend(std::iter::repeat(value).take(len as usize));
    }
    if row.len() != width as usize {
        return Err(Error::Parse(format!(
            "run-length row decodes to {} cells, expected {width}",
            row.len()
        )));
    }
    Ok(row)
}

/// Encodes a scene's full channel stack: channel → row → runs.
pub fn rle_encode(scene: &Scene) -> Vec<Vec<Vec<u32>>> {
    let size = scene.image_size() as usize;
    (0..scene.num_channels())
        .map(|c| {
            let ch = scene.channel(c);
            (0..size).map(|y| rle_encode_row(&ch[y * size..(y + 1) * size])).collect()
        })
        .collect()
}

/// Decodes a channel stack produced by [`rle_encode`].
pub fn rle_decode(
    rle: &[Vec<Vec<u32>>],
    image_size: u32,
    num_channels: usize,
) -> Result<Vec<Vec<u8>>> {
    if rle.len() != num_channels {
        return Err(Error::Parse(format!(
            "grid encoding has {} channels, expected {num_channels}",
            rle.len()
        )));
    }
    let mut channels = Vec::with_capacity(num_channels);
    for rows in rle {
        if rows.len() != image_size as usize {
            return Err(Error::Parse(format!(
                "grid channel has {} rows, expected {image_size}",
                rows.len()
            )));
        }
        let mut ch = Vec::with_capacity((image_size * image_size) as usize);
        for runs in rows {
            ch.extend(rle_decode_row(runs, image_size)?);
        }
        channels.push(ch);
    }
    Ok(channels)
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    scene_id: String,
    image_size: u32,
    num_classes: u32,
    seed: u64,
    split: Split,
    grid_rle: Vec<Vec<Vec<u32>>>,
}

#[derive(Serialize, Deserialize)]
struct AnnotationRecord {
    scene_id: String,
    image_size: u32,
    class: u32,
    split: Split,
    annotations: Vec<BoxRecord>,
}

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    bbox: [f64; 4],
    label: Label,
}

/// Writes `bytes` to `path` atomically: temp file in the same directory,
/// flush, then rename over the destination.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let mut tmp = dir.join(file_name);
    tmp.set_extension("tmp-write");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes every split's scenes to one JSONL file, one record per line, in
/// the order the datasets are given.
pub fn write_scenes(path: &Path, datasets: &[&Dataset]) -> Result<()> {
    let mut buf = Vec::new();
    for dataset in datasets {
        for scene in &dataset.scenes {
            let record = SceneRecord {
                scene_id: scene.scene_id().to_string(),
                image_size: scene.image_size(),
                num_classes: scene.num_classes(),
                seed: scene.seed(),
                split: dataset.split,
                grid_rle: rle_encode(scene),
            };
            serde_json::to_writer(&mut buf, &record)?;
            buf.push(b'\n');
        }
    }
    atomic_write(path, &buf)
}

/// Writes every split's annotation sets to one JSONL file.
pub fn write_annotations(path: &Path, datasets: &[&Dataset]) -> Result<()> {
    let mut buf = Vec::new();
    for dataset in datasets {
        let image_size = dataset.scenes.first().map_or(0, Scene::image_size);
        for set in &dataset.sets {
            let record = AnnotationRecord {
                scene_id: set.scene_id.clone(),
                image_size,
                class: set.class.0,
                split: dataset.split,
                annotations: set
                    .annotations
                    .iter()
                    .map(|a| BoxRecord {
                        bbox: [a.bbox.x1, a.bbox.y1, a.bbox.x2, a.bbox.y2],
                        label: a.label,
                    })
                    .collect(),
            };
            serde_json::to_writer(&mut buf, &record)?;
            buf.push(b'\n');
        }
    }
    atomic_write(path, &buf)
}

/// Reads the scene and annotation files back into (train, test) datasets.
/// Every scene and box is re-validated on the way in.
pub fn read_datasets(scenes_path: &Path, annotations_path: &Path) -> Result<(Dataset, Dataset)> {
    let mut scenes: Vec<(Scene, Split)> = Vec::new();
    for (lineno, line) in fs::read_to_string(scenes_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SceneRecord = serde_json::from_str(line).map_err(|e| {
            Error::Parse(format!("{}:{}: {e}", scenes_path.display(), lineno + 1))
        })?;
        let channels = rle_decode(
            &record.grid_rle,
            record.image_size,
            record.num_classes as usize + 2,
        )?;
        let scene = Scene::from_channels(
            record.scene_id,
            record.image_size,
            record.num_classes,
            record.seed,
            channels,
        )?;
        scenes.push((scene, record.split));
    }

    let mut sets: Vec<(AnnotationSet, Split)> = Vec::new();
    for (lineno, line) in fs::read_to_string(annotations_path)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(line).map_err(|e| {
            Error::Parse(format!("{}:{}: {e}", annotations_path.display(), lineno + 1))
        })?;
        let annotations = record
            .annotations
            .iter()
            .map(|b| {
                Ok(Annotation {
                    bbox: BBox::new(
                        b.bbox[0],
                        b.bbox[1],
                        b.bbox[2],
                        b.bbox[3],
                        record.image_size,
                    )?,
                    label: b.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        sets.push((
            AnnotationSet {
                scene_id: record.scene_id,
                class: ClassId(record.class),
                annotations,
            },
            record.split,
        ));
    }

    let pick = |split: Split| -> Result<Dataset> {
        Dataset::new(
            split,
            scenes.iter().filter(|(_, s)| *s == split).map(|(sc, _)| sc.clone()).collect(),
            sets.iter().filter(|(_, s)| *s == split).map(|(st, _)| st.clone()).collect(),
        )
    };
    Ok((pick(Split::Train)?, pick(Split::Test)?))
}
