//! Procedural scenes, the crop pipeline and the on-disk sample format.
//!
//! A dataset directory holds `samples.jsonl` (one annotation object per
//! line) and `images.exai` (the resized crops, same order).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{imageops, ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{categorize, containment_filter, crop_update_center, BoundingBox, ClassId, ExpandedFrame, FaceCategory};

pub const IMAGE_MAGIC: &[u8; 4] = b"EXAI";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const IMAGES_FILE: &str = "images.exai";

/// 8-bit RGB raster, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        Image {
            height,
            width,
            pixels: rgb.iter().copied().cycle().take(height * width * 3).collect(),
        }
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the window `[x0, x0+w) x [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::Input(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let row = 3 * (y * self.width + x0);
            pixels.extend_from_slice(&self.pixels[row..row + 3 * w]);
        }
        Ok(Image {
            height: h,
            width: w,
            pixels,
        })
    }

    /// Triangle-filter resampling to `size x size`.
    pub fn resize_square(&self, size: usize) -> Image {
        let buf: ImageBuffer<Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
                .expect("pixel buffer matches dimensions");
        let out = imageops::resize(&buf, size as u32, size as u32, imageops::FilterType::Triangle);
        Image {
            height: size,
            width: size,
            pixels: out.into_raw(),
        }
    }

    /// Channel-major floats in `[0, 1]`, shape `[3, h, w]`.
    pub fn to_chw(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut out = vec![0.0f32; 3 * n];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f32 / 255.0;
            }
        }
        out
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// One annotated person in source-image pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Person {
    pub face: BoundingBox,
    pub body: Option<BoundingBox>,
    pub pair: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneAnnotation {
    pub id: u64,
    pub height: usize,
    pub width: usize,
    pub persons: Vec<Person>,
}

/// Scene generator parameters. Lengths are fractions of the image height
/// unless stated otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_persons: usize,
    pub max_persons: usize,
    /// Torso rectangle height range.
    pub torso_height: (f64, f64),
    /// Torso width over torso height.
    pub torso_aspect: f64,
    /// Face diameter over torso width.
    pub face_ratio: f64,
    /// Vertical position of the ground line where torsos stand.
    pub ground: f64,
    /// Horizontal jitter of each person as a fraction of the spacing.
    pub jitter: f64,
    /// Upper bound on unannotated props per scene.
    pub max_props: usize,
    /// Amplitude of per-pixel noise in 8-bit levels.
    pub noise: u8,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            height: 160,
            width: 160,
            min_persons: 4,
            max_persons: 4,
            torso_height: (0.6, 0.6),
            torso_aspect: 0.4,
            face_ratio: 0.45,
            ground: 0.9,
            jitter: 0.0,
            max_props: 2,
            noise: 6,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene: {m}")));
        if self.height < 16 || self.width < 16 {
            return bad("image must be at least 16x16");
        }
        if self.min_persons > self.max_persons {
            return bad("min_persons exceeds max_persons");
        }
        let (lo, hi) = self.torso_height;
        if !(0.0 < lo && lo <= hi && hi < self.ground && self.ground <= 1.0) {
            return bad("torso_height must satisfy 0 < lo <= hi < ground <= 1");
        }
        if !(self.torso_aspect > 0.0 && self.face_ratio > 0.0 && (0.0..0.5).contains(&self.jitter)) {
            return bad("torso_aspect, face_ratio must be positive and jitter in [0, 0.5)");
        }
        Ok(())
    }
}

fn sky(x: f64, y: f64, w: f64, h: f64) -> [f64; 3] {
    [70.0 + 110.0 * x / w, 110.0 + 70.0 * y / h, 215.0 - 40.0 * x / w]
}

const GROUND: [f64; 3] = [96.0, 84.0, 60.0];
const SKIN: [u8; 3] = [236, 196, 160];

/// Renders a row of people standing on a ground line. Faces are discs
/// centered on the top edge of each torso.
pub fn generate_scene(rng: &mut impl Rng, cfg: &SceneConfig, id: u64) -> Result<(Image, SceneAnnotation)> {
    cfg.validate()?;
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let ground_y = (cfg.ground * h).round();
    let mut img = Image::filled(cfg.height, cfg.width, [0, 0, 0]);
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let base = if (y as f64) < ground_y {
                sky(x as f64 + 0.5, y as f64 + 0.5, w, h)
            } else {
                GROUND
            };
            let n = if cfg.noise > 0 {
                rng.gen_range(-(cfg.noise as i32)..=cfg.noise as i32) as f64
            } else {
                0.0
            };
            img.put(y, x, base.map(|c| (c + n).clamp(0.0, 255.0) as u8));
        }
    }

    for _ in 0..rng.gen_range(0..=cfg.max_props) {
        let s = rng.gen_range(0.03..0.08) * h;
        let x0 = rng.gen_range(0.0..w - s);
        let y0 = rng.gen_range(0.0..(ground_y - s).max(1.0));
        let color = [rng.gen_range(40..120u8), rng.gen_range(140..220u8), rng.gen_range(40..120u8)];
        fill_rect(&mut img, x0, y0, x0 + s, y0 + s, color);
    }

    let count = rng.gen_range(cfg.min_persons..=cfg.max_persons);
    let torso_h = rng.gen_range(cfg.torso_height.0..=cfg.torso_height.1) * h;
    let torso_w = (cfg.torso_aspect * torso_h).min(w);
    let face_d = cfg.face_ratio * torso_w;
    let pitch = if count > 0 { w / count as f64 } else { w };
    let top = ground_y - torso_h;
    let mut persons = Vec::with_capacity(count);
    for i in 0..count {
        let jitter = if cfg.jitter > 0.0 {
            rng.gen_range(-cfg.jitter..cfg.jitter) * pitch
        } else {
            0.0
        };
        let cx = ((i as f64 + 0.5) * pitch + jitter).clamp(0.5 * torso_w, w - 0.5 * torso_w);
        let color = [rng.gen_range(20..200u8), rng.gen_range(20..90u8), rng.gen_range(60..240u8)];
        fill_rect(&mut img, cx - 0.5 * torso_w, top, cx + 0.5 * torso_w, ground_y, color);
        fill_disc(&mut img, cx, top, 0.5 * face_d, SKIN);
        let face = BoundingBox::new(cx, top, face_d, face_d, ClassId::Face)?;
        let body = BoundingBox::from_corners(cx - 0.5 * torso_w, top - 0.5 * face_d, cx + 0.5 * torso_w, ground_y, ClassId::Body)?;
        persons.push(Person {
            face,
            body: Some(body),
            pair: i as u32,
        });
    }
    Ok((
        img,
        SceneAnnotation {
            id,
            height: cfg.height,
            width: cfg.width,
            persons,
        },
    ))
}

/// Fills pixels whose centers fall in `[x0, x1) x [y0, y1)`.
fn fill_rect(img: &mut Image, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [u8; 3]) {
    let cols = pixel_span(x0, x1, img.width);
    let rows = pixel_span(y0, y1, img.height);
    for y in rows {
        for x in cols.clone() {
            img.put(y, x, rgb);
        }
    }
}

fn fill_disc(img: &mut Image, cx: f64, cy: f64, r: f64, rgb: [u8; 3]) {
    for y in pixel_span(cy - r, cy + r, img.height) {
        for x in pixel_span(cx - r, cx + r, img.width) {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                img.put(y, x, rgb);
            }
        }
    }
}

fn pixel_span(lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
    let a = (lo - 0.5).ceil().max(0.0) as usize;
    let b = ((hi - 0.5).ceil().max(0.0) as usize).min(n);
    a.min(b)..b
}

/// Crop window in source pixels. The center is `top-left + size/2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Crop {
    pub h: u32,
    pub w: u32,
    pub cx: f64,
    pub cy: f64,
}

impl Crop {
    pub fn x0(&self) -> f64 {
        self.cx - 0.5 * self.w as f64
    }

    pub fn y0(&self) -> f64 {
        self.cy - 0.5 * self.h as f64
    }
}

/// Draws a crop: height uniform in `[0.3H, 0.6H]`, aspect uniform in
/// `[0.5, 2]`, width clamped to `[8, W]`, top-left corner uniform over
/// integer positions that keep the crop inside the image.
pub fn sample_crop(rng: &mut impl Rng, height: usize, width: usize) -> Result<Crop> {
    if width < 8 {
        return Err(Error::Input(format!("image width {width} is below the minimum crop width 8")));
    }
    if height == 0 {
        return Err(Error::Input("image height is zero".into()));
    }
    let (hf, wf) = (height as f64, width as f64);
    let ch = rng.gen_range(0.3 * hf..=0.6 * hf).round_ties_even().clamp(1.0, hf);
    let aspect = rng.gen_range(0.5..=2.0);
    let cw = (aspect * ch).round_ties_even().clamp(8.0, wf);
    let x0 = rng.gen_range(0..=width - cw as usize);
    let y0 = rng.gen_range(0..=height - ch as usize);
    Ok(Crop {
        h: ch as u32,
        w: cw as u32,
        cx: x0 as f64 + 0.5 * cw,
        cy: y0 as f64 + 0.5 * ch,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class: ClassId,
    /// Set for faces only.
    pub category: Option<FaceCategory>,
    pub pair: u32,
}

impl SampleBox {
    pub fn bbox(&self) -> BoundingBox {
        BoundingBox {
            cx: self.cx,
            cy: self.cy,
            w: self.w,
            h: self.h,
            class: self.class,
            score: 1.0,
        }
    }
}

/// Annotation record of one sample; the image lives in the sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub id: u64,
    pub crop: Crop,
    pub k: u32,
    pub input_size: u32,
    pub boxes: Vec<SampleBox>,
}

impl SampleMeta {
    /// Expanded frame in model-input pixels.
    pub fn frame(&self) -> ExpandedFrame {
        let s = self.input_size as f64;
        ExpandedFrame {
            inner_w: s,
            inner_h: s,
            k: self.k,
        }
    }

    pub fn faces(&self) -> impl Iterator<Item = &SampleBox> {
        self.boxes.iter().filter(|b| b.class == ClassId::Face)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub meta: SampleMeta,
    pub image: Image,
}

/// Crops, resizes, and re-expresses the scene's boxes in the expanded
/// frame of the resized crop.
pub fn make_sample(scene: &SceneAnnotation, image: &Image, crop: Crop, k: u32, input_size: usize, id: u64) -> Result<Sample> {
    let (x0, y0) = (crop.x0(), crop.y0());
    if x0 < 0.0 || y0 < 0.0 || x0.fract() != 0.0 || y0.fract() != 0.0 {
        return Err(Error::Input(format!("crop corner ({x0}, {y0}) is not a non-negative pixel")));
    }
    let pixels = image.crop(x0 as usize, y0 as usize, crop.w as usize, crop.h as usize)?;
    let resized = pixels.resize_square(input_size);
    let src_frame = ExpandedFrame::new(crop.w as f64, crop.h as f64, k)?;
    let in_frame = ExpandedFrame::new(input_size as f64, input_size as f64, k)?;
    let (sx, sy) = (input_size as f64 / crop.w as f64, input_size as f64 / crop.h as f64);
    let to_input = |b: &BoundingBox| {
        let e = crop_update_center(b, (crop.cx, crop.cy), &src_frame);
        BoundingBox {
            cx: e.cx * sx,
            cy: e.cy * sy,
            w: e.w * sx,
            h: e.h * sy,
            ..e
        }
    };
    let mut boxes = Vec::new();
    for p in &scene.persons {
        let face = to_input(&p.face);
        let body = p.body.as_ref().map(to_input);
        if containment_filter(&face, &in_frame) {
            boxes.push(SampleBox {
                cx: face.cx,
                cy: face.cy,
                w: face.w,
                h: face.h,
                class: ClassId::Face,
                category: Some(categorize(&face, &in_frame, body.as_ref())),
                pair: p.pair,
            });
        }
        if let Some(b) = body.filter(|b| containment_filter(b, &in_frame)) {
            boxes.push(SampleBox {
                cx: b.cx,
                cy: b.cy,
                w: b.w,
                h: b.h,
                class: ClassId::Body,
                category: None,
                pair: p.pair,
            });
        }
    }
    Ok(Sample {
        meta: SampleMeta {
            id,
            crop,
            k,
            input_size: input_size as u32,
            boxes,
        },
        image: resized,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub scenes: usize,
    pub crops_per_image: usize,
    pub k: u32,
    pub input_size: usize,
    pub scene: SceneConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scenes: 2000,
            crops_per_image: 4,
            k: 3,
            input_size: 48,
            scene: SceneConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crops_per_image == 0 {
            return Err(Error::Config("crops_per_image must be at least 1".into()));
        }
        if self.k == 0 || self.input_size == 0 {
            return Err(Error::Config("k and input_size must be positive".into()));
        }
        self.scene.validate()
    }
}

/// Independent stream for one scene of a master seed.
pub fn scene_rng(seed: u64, scene: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scene);
    rng
}

/// Samples of scene `scene`, ids `scene·crops + j`.
pub fn scene_samples(cfg: &DatasetConfig, seed: u64, scene: u64) -> Result<Vec<Sample>> {
    let mut rng = scene_rng(seed, scene);
    let (img, ann) = generate_scene(&mut rng, &cfg.scene, scene)?;
    (0..cfg.crops_per_image)
        .map(|j| {
            let crop = sample_crop(&mut rng, ann.height, ann.width)?;
            make_sample(&ann, &img, crop, cfg.k, cfg.input_size, scene * cfg.crops_per_image as u64 + j as u64)
        })
        .collect()
}

pub fn build_dataset(cfg: &DatasetConfig, seed: u64) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let per_scene: Vec<Vec<Sample>> = (0..cfg.scenes as u64)
        .into_par_iter()
        .map(|s| scene_samples(cfg, seed, s))
        .collect::<Result<_>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

pub fn category_histogram<'a>(metas: impl IntoIterator<Item = &'a SampleMeta>) -> BTreeMap<FaceCategory, usize> {
    let mut hist: BTreeMap<FaceCategory, usize> = FaceCategory::ALL.iter().map(|&c| (c, 0)).collect();
    for m in metas {
        for b in m.faces() {
            if let Some(c) = b.category {
                *hist.entry(c).or_default() += 1;
            }
        }
    }
    hist
}

pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(SAMPLES_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(&s.meta).expect("sample metadata serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    write_images(&dir.join(IMAGES_FILE), &images)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let metas = read_metas(&dir.join(SAMPLES_FILE))?;
    let images = read_images(&dir.join(IMAGES_FILE))?;
    if images.len() != metas.len() {
        return Err(Error::format(
            dir.join(IMAGES_FILE),
            format!("{} images for {} samples", images.len(), metas.len()),
        ));
    }
    Ok(metas
        .into_iter()
        .zip(images)
        .map(|(meta, image)| Sample { meta, image })
        .collect())
}

pub fn read_metas(path: &Path) -> Result<Vec<SampleMeta>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let meta: SampleMeta = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(meta);
    }
    Ok(out)
}

/// Layout: magic, then `count`, `channels`, `height`, `width` as
/// little-endian `u32`, then the interleaved pixels of every image.
pub fn write_images(path: &Path, images: &[&Image]) -> Result<()> {
    let (h, w) = images.first().map(|i| (i.height, i.width)).unwrap_or((0, 0));
    if images.iter().any(|i| (i.height, i.width) != (h, w)) {
        return Err(Error::Input("sidecar images must share one size".into()));
    }
    let mut out = Vec::with_capacity(20 + images.len() * h * w * 3);
    out.extend_from_slice(IMAGE_MAGIC);
    for d in [images.len(), 3, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for img in images {
        out.extend_from_slice(&img.pixels);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_images(path: &Path) -> Result<Vec<Image>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 20 || &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::format(path, "missing EXAI header"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (count, ch, h, w) = (dim(0), dim(1), dim(2), dim(3));
    if ch != 3 {
        return Err(Error::format(path, format!("expected 3 channels, found {ch}")));
    }
    let each = h * w * 3;
    if bytes.len() != 20 + count * each {
        return Err(Error::format(path, "pixel payload length does not match header"));
    }
    Ok(bytes[20..]
        .chunks_exact(each.max(1))
        .take(count)
        .map(|p| Image {
            height: h,
            width: w,
            pixels: p.to_vec(),
        })
        .collect())
}
