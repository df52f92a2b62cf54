//! On-disk corpus: `images/*.png` (8-bit grayscale), optional `masks/*.png`
//! and one `annotations.jsonl` record per image.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedImage, GrayImage, Mask};
use crate::{BBox, Error, GtBox, Result};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image: String,
    subject: String,
    slice: usize,
    class: usize,
    #[serde(rename = "box")]
    bbox: [f32; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
}

/// Subject and slice counts of a loaded corpus.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CorpusSummary {
    pub images: usize,
    pub subjects: usize,
    pub subjects_per_class: BTreeMap<usize, usize>,
    /// Slice count shared by every subject, if uniform.
    pub slices_per_subject: Option<usize>,
}

impl CorpusSummary {
    pub fn of(corpus: &[AnnotatedImage]) -> Self {
        let mut slices: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for s in corpus {
            slices.entry(&s.subject_id).or_insert((s.class_id(), 0)).1 += 1;
        }
        let mut subjects_per_class = BTreeMap::new();
        for (class, _) in slices.values() {
            *subjects_per_class.entry(*class).or_insert(0) += 1;
        }
        let first = slices.values().next().map(|v| v.1);
        let uniform = slices.values().all(|v| Some(v.1) == first);
        CorpusSummary {
            images: corpus.len(),
            subjects: slices.len(),
            subjects_per_class,
            slices_per_subject: if uniform { first } else { None },
        }
    }
}

fn write_png(path: &Path, width: usize, height: usize, bytes: Vec<u8>) -> Result<()> {
    let buf = image::GrayImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::shape("png", "buffer size mismatch"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?.into_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

pub fn save_gray_png(path: &Path, img: &GrayImage) -> Result<()> {
    let bytes = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_png(path, img.width, img.height, bytes)
}

pub fn load_gray_png(path: &Path) -> Result<GrayImage> {
    let (w, h, bytes) = read_png(path)?;
    GrayImage::new(w, h, bytes.into_iter().map(|b| b as f32 / 255.0).collect())
}

/// Writes the corpus under `dir`, creating it if needed.
pub fn save_corpus(dir: &Path, corpus: &[AnnotatedImage]) -> Result<()> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut out = BufWriter::new(file);
    for s in corpus {
        s.validate()?;
        let stem = format!("{}_{:02}", s.subject_id, s.slice_index);
        let image = format!("images/{stem}.png");
        save_gray_png(&dir.join(&image), &s.image)?;
        let mask = match &s.gt_region_mask {
            Some(m) => {
                let rel = format!("masks/{stem}.png");
                write_png(&dir.join(&rel), m.width, m.height, m.data.iter().map(|&b| if b { 255 } else { 0 }).collect())?;
                Some(rel)
            }
            None => None,
        };
        let b = s.boxes[0];
        let rec = Record {
            image,
            subject: s.subject_id.clone(),
            slice: s.slice_index,
            class: b.class_id,
            bbox: b.bbox.to_array(),
            mask,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(&ann_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&ann_path, e))
}

/// Reads a corpus written by [`save_corpus`] (or by hand in the same layout).
/// Errors name the offending record as `annotations.jsonl:<line>`.
pub fn load_corpus(dir: &Path) -> Result<Vec<AnnotatedImage>> {
    let ann_path = dir.join(ANNOTATIONS_FILE);
    let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let mut corpus = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&ann_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = format!("{ANNOTATIONS_FILE}:{}", i + 1);
        let bad = |detail: String| Error::Dataset { record: record.clone(), detail };
        let rec: Record = serde_json::from_str(&line).map_err(|e| bad(format!("malformed record: {e}")))?;
        if rec.class > 1 {
            return Err(bad(format!("class {} is not 0 or 1", rec.class)));
        }
        let [x1, y1, x2, y2] = rec.bbox;
        if !(x2 > x1 && y2 > y1) {
            return Err(bad(format!("degenerate box {:?}", rec.bbox)));
        }
        let img_path = dir.join(&rec.image);
        if !img_path.is_file() {
            return Err(bad(format!("missing image file {}", img_path.display())));
        }
        let image = load_gray_png(&img_path).map_err(|e| bad(e.to_string()))?;
        let gt_region_mask = match &rec.mask {
            Some(rel) => {
                let (w, h, bytes) = read_png(&dir.join(rel)).map_err(|e| bad(e.to_string()))?;
                Some(Mask { width: w, height: h, data: bytes.into_iter().map(|b| b >= 128).collect() })
            }
            None => None,
        };
        let sample = AnnotatedImage {
            image,
            subject_id: rec.subject,
            slice_index: rec.slice,
            boxes: vec![GtBox { class_id: rec.class, bbox: BBox::new(x1, y1, x2, y2) }],
            gt_region_mask,
        };
        sample.validate().map_err(|e| bad(e.to_string()))?;
        corpus.push(sample);
    }
    super::subject_classes(&corpus)?;
    Ok(corpus)
}
