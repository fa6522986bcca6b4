//! Point annotations, image records and the on-disk dataset layout.
//!
//! A dataset root looks like
//!
//! ```text
//! root/
//!   images/<id>.png          8-bit RGB
//!   annotations/<id>.csv     header `x,y,label`, one row per cell
//!   splits/train.txt         one id per line
//!   splits/test.txt
//! ```
//!
//! Coordinates are `x` = column, `y` = row, origin at the top-left pixel.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest image side the network contract accepts.
pub const MIN_IMAGE_SIDE: usize = 32;

/// Cell class `l`. `Tumor` is the positive-tumor class (`l = 1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellClass {
    Other,
    Tumor,
}

impl CellClass {
    pub const ALL: [CellClass; 2] = [CellClass::Other, CellClass::Tumor];

    pub fn index(self) -> usize {
        match self {
            CellClass::Other => 0,
            CellClass::Tumor => 1,
        }
    }

    pub fn from_index(index: i64) -> Option<Self> {
        match index {
            0 => Some(CellClass::Other),
            1 => Some(CellClass::Tumor),
            _ => None,
        }
    }

    /// Short report tag: `P` for positive-tumor, `N` for the rest.
    pub fn tag(self) -> &'static str {
        match self {
            CellClass::Other => "N",
            CellClass::Tumor => "P",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "N" => Some(CellClass::Other),
            "P" => Some(CellClass::Tumor),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PointAnnotation {
    pub x: i64,
    pub y: i64,
    pub label: CellClass,
}

impl PointAnnotation {
    pub fn new(x: i64, y: i64, label: CellClass) -> Self {
        Self { x, y, label }
    }

    pub fn in_bounds(&self, rows: usize, cols: usize) -> bool {
        self.x >= 0 && self.y >= 0 && (self.x as u64) < cols as u64 && (self.y as u64) < rows as u64
    }
}

/// Removes exact duplicate `(x, y, label)` triples, keeping first occurrences in order.
///
/// Fails if any point lies outside a `rows` x `cols` grid; the error lists every offender.
pub fn validate_annotations(
    annotations: &[PointAnnotation],
    rows: usize,
    cols: usize,
) -> Result<Vec<PointAnnotation>> {
    let offenders: Vec<PointAnnotation> = annotations
        .iter()
        .filter(|a| !a.in_bounds(rows, cols))
        .copied()
        .collect();
    if !offenders.is_empty() {
        return Err(Error::OutOfBounds {
            rows,
            cols,
            offenders,
        });
    }
    let mut seen = HashSet::with_capacity(annotations.len());
    Ok(annotations
        .iter()
        .filter(|a| seen.insert(**a))
        .copied()
        .collect())
}

/// One image with its point annotations. Pixels are `(3, rows, cols)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Array3<f32>,
    pub annotations: Vec<PointAnnotation>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, pixels: Array3<f32>, annotations: Vec<PointAnnotation>) -> Result<Self> {
        let id = id.into();
        let (channels, rows, cols) = pixels.dim();
        if channels != 3 {
            return Err(Error::Dataset(format!("image '{id}' has {channels} channels, expected 3")));
        }
        if rows < MIN_IMAGE_SIDE || cols < MIN_IMAGE_SIDE {
            return Err(Error::Dataset(format!(
                "image '{id}' is {rows}x{cols}, minimum side is {MIN_IMAGE_SIDE}"
            )));
        }
        let annotations = validate_annotations(&annotations, rows, cols)?;
        Ok(Self {
            id,
            pixels,
            annotations,
        })
    }

    pub fn rows(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn cols(&self) -> usize {
        self.pixels.dim().2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}' (expected train or test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<ImageRecord>,
    pub split: Split,
}

impl Dataset {
    /// Sorts records by id and rejects duplicate ids.
    pub fn new(mut records: Vec<ImageRecord>, split: Split) -> Result<Self> {
        records.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = records.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Dataset(format!("duplicate image id '{}'", w[0].id)));
        }
        Ok(Self { records, split })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageRecord> {
        self.records
            .binary_search_by(|r| r.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.records[i])
    }
}

pub fn images_dir(root: &Path) -> std::path::PathBuf {
    root.join("images")
}

pub fn annotations_dir(root: &Path) -> std::path::PathBuf {
    root.join("annotations")
}

pub fn split_file(root: &Path, split: Split) -> std::path::PathBuf {
    root.join("splits").join(format!("{}.txt", split.as_str()))
}

/// Reads the ids listed for `split`, in file order.
pub fn read_split_ids(root: &Path, split: Split) -> Result<Vec<String>> {
    let path = split_file(root, split);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn load_dataset(root: &Path, split: Split) -> Result<Dataset> {
    let mut ids = read_split_ids(root, split)?;
    ids.sort();
    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let image_path = images_dir(root).join(format!("{id}.png"));
        let ann_path = annotations_dir(root).join(format!("{id}.csv"));
        if !ann_path.is_file() {
            return Err(Error::MissingAnnotation { id });
        }
        let pixels = read_png(&image_path)?;
        let (_, rows, cols) = pixels.dim();
        let annotations = read_annotations(&ann_path)?;
        let annotations = validate_annotations(&annotations, rows, cols)?;
        records.push(ImageRecord::new(id, pixels, annotations)?);
    }
    Dataset::new(records, split)
}

/// Writes images, annotation files and the split list for `dataset.split`.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let images = images_dir(root);
    let annotations = annotations_dir(root);
    let splits = root.join("splits");
    for dir in [&images, &annotations, &splits] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut listing = String::new();
    for record in &dataset.records {
        write_png(&images.join(format!("{}.png", record.id)), &record.pixels)?;
        write_annotations(&annotations.join(format!("{}.csv", record.id)), &record.annotations)?;
        listing.push_str(&record.id);
        listing.push('\n');
    }
    let path = split_file(root, dataset.split);
    fs::write(&path, listing).map_err(|e| Error::io(&path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<PointAnnotation>> {
    let malformed = |line: u64, reason: String| Error::MalformedRow {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(file);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 1;
        let row = row.map_err(|e| malformed(line, e.to_string()))?;
        if i == 0 {
            // Empty files are legal; a non-empty file must start with the header.
            if row.iter().collect::<Vec<_>>() != ["x", "y", "label"] {
                return Err(malformed(line, "expected header `x,y,label`".into()));
            }
            continue;
        }
        if row.len() != 3 {
            return Err(malformed(line, format!("expected 3 fields, found {}", row.len())));
        }
        let field = |k: usize| -> Result<i64> {
            row[k]
                .parse::<i64>()
                .map_err(|_| malformed(line, format!("'{}' is not an integer", &row[k])))
        };
        let (x, y, label) = (field(0)?, field(1)?, field(2)?);
        let label = CellClass::from_index(label).ok_or_else(|| malformed(line, format!("label {label} is not 0 or 1")))?;
        out.push(PointAnnotation::new(x, y, label));
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[PointAnnotation]) -> Result<()> {
    let mut text = String::from("x,y,label\n");
    for a in annotations {
        text.push_str(&format!("{},{},{}\n", a.x, a.y, a.label.index()));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_png(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (cols, rows) = img.dimensions();
    let mut pixels = Array3::<f32>::zeros((3, rows as usize, cols as usize));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            pixels[[c, y as usize, x as usize]] = p[c] as f32 / 255.0;
        }
    }
    Ok(pixels)
}

pub fn write_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (_, rows, cols) = pixels.dim();
    let img = image::RgbImage::from_fn(cols as u32, rows as u32, |x, y| {
        image::Rgb(std::array::from_fn(|c| quantize(pixels[[c, y as usize, x as usize]])))
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a 0/1 map as a grayscale PNG with values 0/255.
pub fn write_binary_png(path: &Path, map: &ndarray::Array2<u8>) -> Result<()> {
    let (rows, cols) = map.dim();
    let img = image::GrayImage::from_fn(cols as u32, rows as u32, |x, y| {
        image::Luma([if map[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_binary_png(path: &Path) -> Result<ndarray::Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (cols, rows) = img.dimensions();
    Ok(ndarray::Array2::from_shape_fn((rows as usize, cols as usize), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] >= 128)
    }))
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
