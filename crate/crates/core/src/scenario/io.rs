//! Directory layout:
//!
//! ```text
//! <dir>/meta.json           {format_version, name, seed, params}
//! <dir>/annotations.jsonl   {split, index, present, cx, cy} per frame
//! <dir>/train/000001.png    RGB8 frames, indices from 1
//! <dir>/test/000001.png
//! ```

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Annotation, Frame, GenParams, Scenario};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    name: String,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    params: Option<GenParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Split {
    Train,
    Test,
}

impl Split {
    fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    split: Split,
    index: usize,
    present: bool,
    cx: Option<f64>,
    cy: Option<f64>,
}

fn frame_path(dir: &Path, split: Split, index: usize) -> PathBuf {
    dir.join(split.dir()).join(format!("{index:06}.png"))
}

fn write_png(path: &Path, frame: &Frame) -> Result<()> {
    let img = image::RgbImage::from_raw(
        frame.width as u32,
        frame.height as u32,
        frame.pixels.clone(),
    )
    .ok_or_else(|| Error::Usage(format!("frame {} buffer size", frame.index)))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn read_png(path: &Path, index: usize) -> Result<Frame> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Frame::new(index, w as usize, h as usize, img.into_raw())
}

/// Writes `scenario` under `dir`, creating it if needed.
pub fn save_scenario(scenario: &Scenario, dir: &Path) -> Result<()> {
    scenario.validate()?;
    for split in [Split::Train, Split::Test] {
        fs::create_dir_all(dir.join(split.dir()))?;
    }
    let meta = Meta {
        format_version: FORMAT_VERSION,
        name: scenario.name.clone(),
        seed: scenario.origin.as_ref().map(|o| o.0),
        params: scenario.origin.as_ref().map(|o| o.1.clone()),
    };
    fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;

    let mut out = BufWriter::new(fs::File::create(dir.join("annotations.jsonl"))?);
    for (split, frames) in [
        (Split::Train, &scenario.train),
        (Split::Test, &scenario.test),
    ] {
        for (frame, ann) in frames {
            write_png(&frame_path(dir, split, frame.index), frame)?;
            let record = Record {
                split,
                index: frame.index,
                present: ann.present,
                cx: ann.center.map(|c| c.0),
                cy: ann.center.map(|c| c.1),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

fn parse_record(path: &Path, line_no: usize, line: &str) -> Result<Record> {
    let err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let record: Record = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
    let center = match (record.cx, record.cy) {
        (Some(u), Some(v)) => Some((u, v)),
        (None, None) => None,
        _ => return Err(err("cx and cy must both be set or both be null".into())),
    };
    Annotation {
        present: record.present,
        center,
    }
    .validate()
    .map_err(|e| err(e.to_string()))?;
    if record.index == 0 {
        return Err(err("frame indices start at 1".into()));
    }
    Ok(record)
}

/// Reads a scenario directory and validates it.
pub fn load_scenario(dir: &Path) -> Result<Scenario> {
    let meta_path = dir.join("meta.json");
    let meta: Meta =
        serde_json::from_str(&fs::read_to_string(&meta_path)?).map_err(|e| Error::Parse {
            path: meta_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Validation(format!(
            "unsupported scenario format version {}",
            meta.format_version
        )));
    }

    let ann_path = dir.join("annotations.jsonl");
    let reader = BufReader::new(fs::File::open(&ann_path)?);
    let mut records: [Vec<(usize, Annotation)>; 2] = [Vec::new(), Vec::new()];
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = parse_record(&ann_path, i + 1, &line)?;
        let ann = Annotation {
            present: r.present,
            center: r.cx.zip(r.cy),
        };
        records[(r.split == Split::Test) as usize].push((r.index, ann));
    }

    let mut splits: [Vec<(Frame, Annotation)>; 2] = [Vec::new(), Vec::new()];
    for (slot, split) in [Split::Train, Split::Test].into_iter().enumerate() {
        let recs = &mut records[slot];
        recs.sort_by_key(|r| r.0);
        for (pos, (index, ann)) in recs.iter().enumerate() {
            if *index != pos + 1 {
                return Err(Error::Validation(format!(
                    "{} annotations are not contiguous: expected index {}, found {index}",
                    split.dir(),
                    pos + 1
                )));
            }
            splits[slot].push((read_png(&frame_path(dir, split, *index), *index)?, *ann));
        }
    }
    let [train, test] = splits;
    let scenario = Scenario {
        name: meta.name,
        train,
        test,
        origin: meta.seed.zip(meta.params),
    };
    scenario.validate()?;
    Ok(scenario)
}
