//! Fundus samples, masks, single-channel fields and the dataset layout.
//!
//! A dataset directory holds `images/`, `masks/` and optionally `fov/`, with
//! files paired by stem (`01_test.tif` pairs with `01_test.gif`, etc.).

use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use log::warn;

use crate::error::{ensure, Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "tif", "tiff", "jpg", "jpeg", "gif", "ppm"];

/// Three-channel image in planar RGB order with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ColorImage {
    pub fn new(height: usize, width: usize) -> Self {
        ColorImage {
            height,
            width,
            data: vec![0.0; 3 * height * width],
        }
    }

    /// `data` is planar: all of R, then G, then B.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        ensure!(
            data.len() == 3 * height * width,
            "color image {height}x{width} needs {} values, got {}",
            3 * height * width,
            data.len()
        );
        Ok(ColorImage { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut img = ColorImage::new(height, width);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for (c, v) in px.into_iter().enumerate() {
                    img.set(c, y, x, v);
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    fn to_rgb8(&self) -> RgbImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([0, 1, 2].map(|c| to_u8(self.get(c, y, x) as f64)))
        })
    }
}

/// Strictly binary 2-D mask stored as 0/1 bytes, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        BinaryMask {
            height,
            width,
            pixels: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x) as u8);
            }
        }
        BinaryMask { height, width, pixels }
    }

    /// Rejects any value other than 0 or 1.
    pub fn from_vec(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        ensure!(
            pixels.len() == height * width,
            "mask {height}x{width} needs {} pixels, got {}",
            height * width,
            pixels.len()
        );
        ensure!(pixels.iter().all(|&p| p <= 1), "mask values must be 0 or 1");
        Ok(BinaryMask { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] == 1
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.pixels[y * self.width + x] = v as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.pixels.iter().map(|&p| p as usize).sum()
    }

    fn to_gray8(&self) -> GrayImage {
        ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([self.pixels[y as usize * self.width + x as usize] * 255])
        })
    }
}

/// Single-channel real field (row-major).
#[derive(Clone, Debug, PartialEq)]
pub struct GrayField {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl GrayField {
    pub fn zeros(height: usize, width: usize) -> Self {
        GrayField {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        ensure!(
            pixels.len() == height * width,
            "field {height}x{width} needs {} values, got {}",
            height * width,
            pixels.len()
        );
        ensure!(pixels.iter().all(|v| v.is_finite()), "field values must be finite");
        Ok(GrayField { height, width, pixels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x));
            }
        }
        GrayField { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GrayField {
        GrayField {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.pixels
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Written after clamping to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let img: GrayImage = ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([to_u8(self.get(y as usize, x as usize))])
        });
        save_dynamic(DynamicImage::ImageLuma8(img), path)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FundusSample {
    pub id: String,
    pub image: ColorImage,
    pub vessel_mask: BinaryMask,
    pub fov_mask: BinaryMask,
    pub source_dataset: String,
    pub synthetic: bool,
}

impl FundusSample {
    pub fn new(
        id: impl Into<String>,
        image: ColorImage,
        vessel_mask: BinaryMask,
        fov_mask: BinaryMask,
    ) -> Result<Self> {
        let s = FundusSample {
            id: id.into(),
            image,
            vessel_mask,
            fov_mask,
            source_dataset: String::new(),
            synthetic: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source_dataset = source.into();
        self
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.image.height, self.image.width);
        for (name, m) in [("vessel mask", &self.vessel_mask), ("fov mask", &self.fov_mask)] {
            ensure!(
                m.height == h && m.width == w,
                "{}: {name} is {}x{} but the image is {h}x{w}",
                self.id,
                m.height,
                m.width
            );
        }
        Ok(())
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    })
}

fn save_dynamic(img: DynamicImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })
}

pub fn load_color(path: &Path) -> Result<ColorImage> {
    let rgb = open(path)?.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = ColorImage::new(h, w);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, px.0[c]);
        }
    }
    Ok(img)
}

/// Decode a mask file, taking the first channel and thresholding at half scale.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let gray = open(path)?.to_luma32f();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let pixels = gray.pixels().map(|p| (p.0[0] >= 0.5) as u8).collect();
    Ok(BinaryMask {
        height: h,
        width: w,
        pixels,
    })
}

/// Load one registered triple. Without a FOV file the whole frame counts as FOV.
pub fn load_sample(image_path: &Path, mask_path: &Path, fov_path: Option<&Path>) -> Result<FundusSample> {
    let image = load_color(image_path)?;
    let vessel_mask = load_mask(mask_path)?;
    let fov_mask = match fov_path {
        Some(p) => load_mask(p)?,
        None => {
            warn!("{}: no FOV mask given, using the full frame", image_path.display());
            BinaryMask::ones(image.height, image.width)
        }
    };
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FundusSample::new(id, image, vessel_mask, fov_mask)
}

pub fn save_color_png(img: &ColorImage, path: &Path) -> Result<()> {
    save_dynamic(DynamicImage::ImageRgb8(img.to_rgb8()), path)
}

pub fn save_mask_png(mask: &BinaryMask, path: &Path) -> Result<()> {
    save_dynamic(DynamicImage::ImageLuma8(mask.to_gray8()), path)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn find_by_stem(files: &[PathBuf], stem: &str) -> Option<PathBuf> {
    files
        .iter()
        .find(|p| p.file_stem().is_some_and(|s| s.to_string_lossy() == stem))
        .cloned()
}

/// Paths of one sample inside a dataset directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SamplePaths {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub fov: Option<PathBuf>,
}

/// Pair up `images/`, `masks/` and (optional) `fov/` by file stem.
pub fn discover_dataset(root: &Path) -> Result<Vec<SamplePaths>> {
    discover_dataset_with_fov(root, None)
}

/// Like [`discover_dataset`], but FOV masks come from `fov_dir` when given.
pub fn discover_dataset_with_fov(root: &Path, fov_dir: Option<&Path>) -> Result<Vec<SamplePaths>> {
    let images = list_images(&root.join("images"))?;
    let masks = list_images(&root.join("masks"))?;
    let fov_dir = fov_dir.map_or_else(|| root.join("fov"), Path::to_path_buf);
    let fovs = if fov_dir.is_dir() {
        list_images(&fov_dir)?
    } else {
        Vec::new()
    };
    ensure!(!images.is_empty(), "{}: no images found under images/", root.display());
    let mut out = Vec::with_capacity(images.len());
    for image in images {
        let id = image
            .file_stem()
            .expect("listed file has a stem")
            .to_string_lossy()
            .into_owned();
        let mask = find_by_stem(&masks, &id)
            .ok_or_else(|| Error::Validation(format!("{}: no mask with stem {id:?}", root.display())))?;
        let fov = find_by_stem(&fovs, &id);
        out.push(SamplePaths { id, image, mask, fov });
    }
    Ok(out)
}

/// Load every sample of a dataset directory; the directory name becomes the source.
pub fn load_dataset(root: &Path) -> Result<Vec<FundusSample>> {
    load_dataset_with_fov(root, None)
}

pub fn load_dataset_with_fov(root: &Path, fov_dir: Option<&Path>) -> Result<Vec<FundusSample>> {
    let source = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    discover_dataset_with_fov(root, fov_dir)?
        .into_iter()
        .map(|p| {
            let mut s = load_sample(&p.image, &p.mask, p.fov.as_deref())?;
            s.id = p.id;
            Ok(s.with_source(source.clone()))
        })
        .collect()
}

/// Write a sample in the dataset layout so it can be reloaded with [`load_dataset`].
pub fn save_sample(sample: &FundusSample, root: &Path) -> Result<()> {
    let name = format!("{}.png", sample.id);
    save_color_png(&sample.image, &root.join("images").join(&name))?;
    save_mask_png(&sample.vessel_mask, &root.join("masks").join(&name))?;
    save_mask_png(&sample.fov_mask, &root.join("fov").join(&name))
}

/// Bilinear sample with pixel centers at integer coordinates; `None` outside the frame.
pub(crate) fn bilinear_at(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> Option<f32> {
    if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
        return None;
    }
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

fn source_coord(dst: usize, dst_len: usize, src_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

fn resize_color(img: &ColorImage, h: usize, w: usize) -> ColorImage {
    let mut out = ColorImage::new(h, w);
    for c in 0..3 {
        let src = img.channel(c);
        for y in 0..h {
            let sy = source_coord(y, h, img.height);
            for x in 0..w {
                let sx = source_coord(x, w, img.width);
                let v = bilinear_at(src, img.height, img.width, sy, sx).unwrap_or(0.0);
                out.set(c, y, x, v);
            }
        }
    }
    out
}

pub(crate) fn resize_mask(mask: &BinaryMask, h: usize, w: usize) -> BinaryMask {
    let near = |dst: usize, dst_len: usize, src_len: usize| ((dst * src_len) / dst_len).min(src_len - 1);
    BinaryMask::from_fn(h, w, |y, x| mask.get(near(y, h, mask.height), near(x, w, mask.width)))
}

/// Resize to `(height, width)`; both must be multiples of 8.
pub fn resize_sample(sample: &FundusSample, target: (usize, usize)) -> Result<FundusSample> {
    let (h, w) = target;
    crate::model::check_spatial_dims(h, w)?;
    sample.validate()?;
    ensure!(sample.height() > 0 && sample.width() > 0, "{}: empty image", sample.id);
    Ok(FundusSample {
        id: sample.id.clone(),
        image: resize_color(&sample.image, h, w),
        vessel_mask: resize_mask(&sample.vessel_mask, h, w),
        fov_mask: resize_mask(&sample.fov_mask, h, w),
        source_dataset: sample.source_dataset.clone(),
        synthetic: sample.synthetic,
    })
}

pub fn green_channel(sample: &FundusSample) -> GrayField {
    GrayField {
        height: sample.height(),
        width: sample.width(),
        pixels: sample.image.channel(1).iter().map(|&v| v as f64).collect(),
    }
}

/// `1 - |a ∩ b| / |a ∪ b|`, with two empty masks at distance 0.
pub fn jaccard_distance(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    ensure!(
        a.height == b.height && a.width == b.width,
        "jaccard distance needs equal mask sizes, got {}x{} and {}x{}",
        a.height,
        a.width,
        b.height,
        b.width
    );
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &q) in a.pixels.iter().zip(&b.pixels) {
        inter += (p & q) as u64;
        union += (p | q) as u64;
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(1.0 - inter as f64 / union as f64)
}
