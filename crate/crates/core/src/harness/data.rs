//! Image sets, PNG ingestion and dataset directories.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

/// Where a set came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Provenance {
    pub source: String,
    pub seed: Option<u64>,
    pub note: Option<String>,
}

/// Equally sized grayscale images in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    height: usize,
    width: usize,
    ids: Vec<String>,
    images: Vec<Vec<f64>>,
    masks: Option<Vec<Vec<bool>>>,
    labels: Option<Vec<Label>>,
    pub provenance: Provenance,
}

impl ImageSet {
    pub fn new(
        height: usize,
        width: usize,
        ids: Vec<String>,
        images: Vec<Vec<f64>>,
        masks: Option<Vec<Vec<bool>>>,
        labels: Option<Vec<Label>>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = images.len();
        let px = height * width;
        if ids.len() != n {
            return Err(Error::Shape(format!("{} ids for {n} images", ids.len())));
        }
        if let Some(i) = images.iter().position(|im| im.len() != px) {
            return Err(Error::Shape(format!(
                "image {} has {} pixels, expected {height}x{width}",
                ids[i],
                images[i].len()
            )));
        }
        if images.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain("pixel values must lie in [0, 1]".into()));
        }
        if let Some(m) = &masks {
            if m.len() != n || m.iter().any(|mk| mk.len() != px) {
                return Err(Error::Shape("masks do not match the images".into()));
            }
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Shape(format!("{} labels for {n} images", l.len())));
            }
            if let Some(m) = &masks {
                for (i, (lab, mk)) in l.iter().zip(m).enumerate() {
                    let marked = mk.iter().any(|&b| b);
                    if marked != (*lab == Label::Anomalous) {
                        return Err(Error::Shape(format!(
                            "image {} is labelled {lab:?} but its mask is {}",
                            ids[i],
                            if marked { "non-empty" } else { "empty" }
                        )));
                    }
                }
            }
        }
        Ok(Self {
            height,
            width,
            ids,
            images,
            masks,
            labels,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn images(&self) -> &[Vec<f64>] {
        &self.images
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.images[i]
    }

    pub fn masks(&self) -> Option<&[Vec<bool>]> {
        self.masks.as_deref()
    }

    pub fn labels(&self) -> Option<&[Label]> {
        self.labels.as_deref()
    }

    pub fn label(&self, i: usize) -> Option<Label> {
        self.labels.as_ref().map(|l| l[i])
    }

    pub fn indices_with(&self, label: Label) -> Vec<usize> {
        match &self.labels {
            Some(l) => (0..l.len()).filter(|&i| l[i] == label).collect(),
            None if label == Label::Normal => (0..self.len()).collect(),
            None => Vec::new(),
        }
    }

    /// Images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let pick = |v: &Vec<Vec<bool>>| indices.iter().map(|&i| v[i].clone()).collect();
        ImageSet {
            height: self.height,
            width: self.width,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            masks: self.masks.as_ref().map(pick),
            labels: self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect()),
            provenance: self.provenance.clone(),
        }
    }

    /// Concatenation of two sets with the same image size.
    pub fn concat(&self, other: &ImageSet) -> Result<ImageSet> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape("cannot join sets of different image sizes".into()));
        }
        let join_opt = |a: Option<Vec<Vec<bool>>>, b: Option<Vec<Vec<bool>>>, na: usize, nb: usize, px: usize| {
            if a.is_none() && b.is_none() {
                return None;
            }
            let mut a = a.unwrap_or_else(|| vec![vec![false; px]; na]);
            a.extend(b.unwrap_or_else(|| vec![vec![false; px]; nb]));
            Some(a)
        };
        let px = self.height * self.width;
        let labels = match (&self.labels, &other.labels) {
            (None, None) => None,
            (a, b) => {
                let mut l = a.clone().unwrap_or_else(|| vec![Label::Normal; self.len()]);
                l.extend(b.clone().unwrap_or_else(|| vec![Label::Normal; other.len()]));
                Some(l)
            }
        };
        ImageSet::new(
            self.height,
            self.width,
            self.ids.iter().chain(&other.ids).cloned().collect(),
            self.images.iter().chain(&other.images).cloned().collect(),
            join_opt(self.masks.clone(), other.masks.clone(), self.len(), other.len(), px),
            labels,
            self.provenance.clone(),
        )
    }

    /// `[n, 1, H, W]` tensor of the images at `indices`.
    pub fn tensor(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.height * self.width);
        for &i in indices {
            data.extend_from_slice(&self.images[i]);
        }
        Tensor::new(vec![indices.len(), 1, self.height, self.width], data).expect("consistent image sizes")
    }

    pub fn all_tensor(&self) -> Tensor {
        self.tensor(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// Non-overlapping tiles cut from one source image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub source: String,
    pub tile: usize,
    /// Top-left `(row, col)` of every tile.
    pub coords: Vec<(usize, usize)>,
}

impl PatchGrid {
    pub fn new(source: impl Into<String>, height: usize, width: usize, tile: usize) -> Self {
        let mut coords = Vec::new();
        if tile > 0 {
            for r in 0..height / tile {
                for c in 0..width / tile {
                    coords.push((r * tile, c * tile));
                }
            }
        }
        Self {
            source: source.into(),
            tile,
            coords,
        }
    }
}

fn crop<T: Copy>(src: &[T], width: usize, (r0, c0): (usize, usize), tile: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(tile * tile);
    for r in r0..r0 + tile {
        out.extend_from_slice(&src[r * width + c0..r * width + c0 + tile]);
    }
    out
}

/// Decodes an 8-bit grayscale, gray-alpha, RGB or RGBA PNG to luminance in
/// `[0, 1]`; returns `(height, width, pixels)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let ingest = |reason: String| Error::Ingest {
        path: path.display().to_string(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| ingest(e.to_string()))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| ingest(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| ingest("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| ingest(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ingest(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let channels = info.color_type.samples();
    let stride = info.line_size;
    let mut px = Vec::with_capacity(w * h);
    for r in 0..h {
        let row = &bytes[r * stride..r * stride + w * channels];
        for p in row.chunks_exact(channels) {
            let v = match info.color_type {
                png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => f64::from(p[0]),
                png::ColorType::Rgb | png::ColorType::Rgba => {
                    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
                }
                png::ColorType::Indexed => return Err(ingest("unexpanded palette".into())),
            };
            px.push(v / 255.0);
        }
    }
    Ok((h, w, px))
}

/// Rounds `[0, 1]` values to 8-bit gray levels.
pub fn to_gray8(pixels: &[f64]) -> Vec<u8> {
    pixels.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn write_gray_png(path: &Path, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    writer.finish().map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn write_image_png(path: &Path, height: usize, width: usize, pixels: &[f64]) -> Result<()> {
    write_gray_png(path, height, width, &to_gray8(pixels))
}

pub fn write_mask_png(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_gray_png(path, height, width, &bytes)
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

/// Loads every PNG of a directory in lexicographic order and cuts each into
/// non-overlapping `tile × tile` patches, dropping borders. `tile = 0`
/// keeps whole images, which must then share one size.
pub fn load_image_dir(path: &Path, tile: usize) -> Result<(ImageSet, Vec<PatchGrid>)> {
    let files = png_files(path)?;
    if files.is_empty() {
        return Err(Error::EmptyInput(format!("no PNG files in {}", path.display())));
    }
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut grids = Vec::new();
    let mut size = None;
    for f in &files {
        let (h, w, px) = read_png(f)?;
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if tile == 0 {
            if *size.get_or_insert((h, w)) != (h, w) {
                return Err(Error::Ingest {
                    path: f.display().to_string(),
                    reason: format!("size {h}x{w} differs from the first image"),
                });
            }
            grids.push(PatchGrid {
                source: name.clone(),
                tile: 0,
                coords: vec![(0, 0)],
            });
            ids.push(name);
            images.push(px);
            continue;
        }
        let grid = PatchGrid::new(name.clone(), h, w, tile);
        for &(r, c) in &grid.coords {
            ids.push(format!("{name}@{r},{c}"));
            images.push(crop(&px, w, (r, c), tile));
        }
        grids.push(grid);
    }
    let (h, w) = if tile == 0 { size.unwrap_or((0, 0)) } else { (tile, tile) };
    if images.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no {tile}x{tile} tiles fit in the images of {}",
            path.display()
        )));
    }
    let set = ImageSet::new(
        h,
        w,
        ids,
        images,
        None,
        None,
        Provenance {
            source: path.display().to_string(),
            seed: None,
            note: Some(format!("tile {tile}")),
        },
    )?;
    Ok((set, grids))
}

/// Keeps every normal image and a seeded subset of `round(ratio·n_normal)`
/// anomalous images. Order: normals first, then the chosen anomalies in
/// their original order.
pub fn subsample_anomalies(set: &ImageSet, ratio: f64, rng: &mut SeededRng) -> Result<ImageSet> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::Config(format!("anomaly ratio {ratio} must be positive")));
    }
    let normals = set.indices_with(Label::Normal);
    let mut anomalies = set.indices_with(Label::Anomalous);
    let want = (ratio * normals.len() as f64).round() as usize;
    if want > anomalies.len() {
        log::warn!(
            "requested {want} anomalies but only {} are available; keeping all",
            anomalies.len()
        );
    } else {
        rng.shuffle(&mut anomalies);
        anomalies.truncate(want);
        anomalies.sort_unstable();
    }
    let mut idx = normals;
    idx.extend(anomalies);
    Ok(set.subset(&idx))
}

/// Index lists of a train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffles the normal images and cuts them at `round(train·n)` and
/// `round(val·n)`; the remaining normals go to test. Anomalous images go
/// to test unless `contaminate` is set, in which case they are cut with the
/// same fractions. Each list is returned in ascending order.
pub fn split_indices(set: &ImageSet, train: f64, val: f64, contaminate: bool, rng: &mut SeededRng) -> Result<Splits> {
    if !(train >= 0.0 && val >= 0.0 && train + val <= 1.0) {
        return Err(Error::Config(format!(
            "split fractions train {train}, val {val} must be nonnegative and sum to at most 1"
        )));
    }
    let mut out = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let mut cut = |mut idx: Vec<usize>, rng: &mut SeededRng| {
        rng.shuffle(&mut idx);
        let n = idx.len() as f64;
        let a = ((train * n).round() as usize).min(idx.len());
        let b = (a + (val * n).round() as usize).min(idx.len());
        out.train.extend_from_slice(&idx[..a]);
        out.val.extend_from_slice(&idx[a..b]);
        out.test.extend_from_slice(&idx[b..]);
    };
    cut(set.indices_with(Label::Normal), rng);
    let anomalies = set.indices_with(Label::Anomalous);
    if contaminate {
        cut(anomalies, rng);
    } else {
        out.test.extend(anomalies);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    if out.train.is_empty() {
        return Err(Error::EmptyInput("the training split is empty".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub image: String,
    pub mask: Option<String>,
    pub label: Label,
}

/// `index.json` of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub height: usize,
    pub width: usize,
    pub provenance: Provenance,
    pub spec: serde_json::Value,
    pub files: Vec<IndexEntry>,
}

/// Writes `images/NNNNN.png`, `masks/NNNNN.png` (anomalous images only) and
/// `index.json`.
pub fn write_dataset(dir: &Path, set: &ImageSet, spec: serde_json::Value) -> Result<DatasetIndex> {
    let img_dir = dir.join("images");
    let mask_dir = dir.join("masks");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let (h, w) = (set.height, set.width);
    let mut files = Vec::with_capacity(set.len());
    for i in 0..set.len() {
        let stem = format!("{i:05}.png");
        write_image_png(&img_dir.join(&stem), h, w, &set.images[i])?;
        let label = set.label(i).unwrap_or(Label::Normal);
        let mask = match (&set.masks, label) {
            (Some(m), Label::Anomalous) => {
                fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
                write_mask_png(&mask_dir.join(&stem), h, w, &m[i])?;
                Some(format!("masks/{stem}"))
            }
            _ => None,
        };
        files.push(IndexEntry {
            id: set.ids[i].clone(),
            image: format!("images/{stem}"),
            mask,
            label,
        });
    }
    let index = DatasetIndex {
        height: h,
        width: w,
        provenance: set.provenance.clone(),
        spec,
        files,
    };
    let path = dir.join("index.json");
    let mut text = serde_json::to_string_pretty(&index).map_err(|e| Error::State(e.to_string()))?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Reads a directory written by [`write_dataset`].
pub fn load_dataset(dir: &Path) -> Result<ImageSet> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::Ingest {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if index.files.is_empty() {
        return Err(Error::EmptyInput(format!("{} lists no files", path.display())));
    }
    let px = index.height * index.width;
    let mut ids = Vec::new();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut labels = Vec::new();
    for e in &index.files {
        let (h, w, im) = read_png(&dir.join(&e.image))?;
        if (h, w) != (index.height, index.width) {
            return Err(Error::Ingest {
                path: e.image.clone(),
                reason: format!("size {h}x{w}, index says {}x{}", index.height, index.width),
            });
        }
        let mask = match &e.mask {
            Some(m) => read_png(&dir.join(m))?.2.iter().map(|v| *v >= 0.5).collect(),
            None => vec![false; px],
        };
        ids.push(e.id.clone());
        images.push(im);
        masks.push(mask);
        labels.push(e.label);
    }
    ImageSet::new(
        index.height,
        index.width,
        ids,
        images,
        Some(masks),
        Some(labels),
        index.provenance,
    )
}

/// Loads either a dataset directory (with `index.json`) or a plain
/// directory of PNGs tiled at `tile`.
pub fn load_any(dir: &Path, tile: usize) -> Result<ImageSet> {
    if dir.join("index.json").is_file() {
        load_dataset(dir)
    } else {
        Ok(load_image_dir(dir, tile)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_png(dir: &Path, name: &str, h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> Vec<u8> {
        let bytes: Vec<u8> = (0..h * w).map(|i| f(i / w, i % w)).collect();
        write_gray_png(&dir.join(name), h, w, &bytes).unwrap();
        bytes
    }

    #[test]
    fn tiles_drop_borders() {
        let dir = tempfile::tempdir().unwrap();
        gray_png(dir.path(), "a.png", 256, 256, |r, c| ((r + c) % 256) as u8);
        let (set, grids) = load_image_dir(dir.path(), 128).unwrap();
        assert_eq!(set.len(), 4);
        assert_eq!(grids[0].coords.len(), 4);
        let dir2 = tempfile::tempdir().unwrap();
        gray_png(dir2.path(), "b.png", 300, 300, |_, _| 7);
        assert_eq!(load_image_dir(dir2.path(), 128).unwrap().0.len(), 4);
    }

    #[test]
    fn ingestion_is_lossless_for_gray_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let src = gray_png(dir.path(), "x.png", 9, 13, |r, c| (r * 29 + c * 17) as u8);
        let (set, _) = load_image_dir(dir.path(), 0).unwrap();
        assert_eq!(to_gray8(set.image(0)), src);
    }

    #[test]
    fn files_load_in_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.png", "c.png"] {
            gray_png(dir.path(), name, 4, 4, |_, _| 0);
        }
        let (set, _) = load_image_dir(dir.path(), 0).unwrap();
        assert_eq!(set.ids(), &["a.png", "b.png", "c.png"]);
    }

    #[test]
    fn ingestion_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_image_dir(dir.path(), 0), Err(Error::EmptyInput(_))));
        fs::write(dir.path().join("bad.png"), b"not a png").unwrap();
        match load_image_dir(dir.path(), 0) {
            Err(Error::Ingest { path, .. }) => assert!(path.ends_with("bad.png")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rgb_is_converted_to_luminance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let file = fs::File::create(&path).unwrap();
        let mut enc = png::Encoder::new(BufWriter::new(file), 1, 1);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&[255, 0, 0]).unwrap();
        let (_, _, px) = read_png(&path).unwrap();
        assert!((px[0] - 0.299).abs() < 1e-12);
    }

    fn labelled(n_norm: usize, n_anom: usize) -> ImageSet {
        let n = n_norm + n_anom;
        let masks = (0..n).map(|i| vec![i >= n_norm; 4]).collect();
        let labels = (0..n)
            .map(|i| if i >= n_norm { Label::Anomalous } else { Label::Normal })
            .collect();
        ImageSet::new(
            2,
            2,
            (0..n).map(|i| i.to_string()).collect(),
            vec![vec![0.5; 4]; n],
            Some(masks),
            Some(labels),
            Provenance::default(),
        )
        .unwrap()
    }

    #[test]
    fn subsampling_keeps_the_requested_ratio() {
        let set = labelled(100, 40);
        let a = subsample_anomalies(&set, 0.1, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a.indices_with(Label::Anomalous).len(), 10);
        assert_eq!(a.indices_with(Label::Normal).len(), 100);
        let b = subsample_anomalies(&set, 0.1, &mut SeededRng::new(3)).unwrap();
        assert_eq!(a, b);
        let all = subsample_anomalies(&set, 0.4, &mut SeededRng::new(3)).unwrap();
        assert_eq!(all, set);
        let more = subsample_anomalies(&set, 5.0, &mut SeededRng::new(3)).unwrap();
        assert_eq!(more, set);
    }

    #[test]
    fn labels_must_agree_with_masks() {
        let r = ImageSet::new(
            1,
            1,
            vec!["a".into()],
            vec![vec![0.0]],
            Some(vec![vec![true]]),
            Some(vec![Label::Normal]),
            Provenance::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn dataset_directories_round_trip() {
        let set = labelled(3, 2);
        let dir = tempfile::tempdir().unwrap();
        let index = write_dataset(dir.path(), &set, serde_json::Value::Null).unwrap();
        assert_eq!(index.files.iter().filter(|f| f.mask.is_some()).count(), 2);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.labels(), set.labels());
        assert_eq!(back.masks(), set.masks());
        assert_eq!(to_gray8(back.image(0)), to_gray8(set.image(0)));
    }

    #[test]
    fn splits_partition_the_set() {
        let set = labelled(20, 4);
        let s = split_indices(&set, 0.5, 0.25, false, &mut SeededRng::new(1)).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (10, 5, 9));
        let mut all = [s.train.clone(), s.val.clone(), s.test.clone()].concat();
        all.sort_unstable();
        assert_eq!(all, (0..24).collect::<Vec<_>>());
        assert!(s.train.iter().chain(&s.val).all(|&i| set.label(i) == Some(Label::Normal)));
        assert_eq!(s, split_indices(&set, 0.5, 0.25, false, &mut SeededRng::new(1)).unwrap());
        let c = split_indices(&set, 0.5, 0.25, true, &mut SeededRng::new(1)).unwrap();
        assert_eq!(c.train.iter().filter(|&&i| set.label(i) == Some(Label::Anomalous)).count(), 2);
        assert!(split_indices(&set, 0.8, 0.3, false, &mut SeededRng::new(1)).is_err());
    }
}
