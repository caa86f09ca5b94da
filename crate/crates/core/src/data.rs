//! Synthetic detection scenes, desk-scale augmentation, and dataset IO.
//!
//! A scene is a textured-noise background with 1-5 colored shapes; the
//! class *is* the shape type, so detection is learnable from geometry
//! alone. Images travel as 8-bit RGB (the PPM representation) and are
//! converted to `[0, 1]` float tensors at batch time, which keeps on-disk
//! and in-memory pipelines bit-identical.

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor};
use std::io::{BufRead, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// Shape classes in label order; class id `k` (1-based) is
/// `SHAPE_CLASS_NAMES[k - 1]`.
pub const SHAPE_CLASS_NAMES: [&str; 8] = [
    "disk", "square", "triangle", "ring", "cross", "diamond", "frame", "xmark",
];

/// Minimum annotation area in square pixels.
pub const MIN_BOX_AREA: f64 = 16.0;

/// One image with its object annotations. Pixels are interleaved 8-bit RGB
/// rows (PPM order); annotation coordinates are quantized to 2 decimals so
/// the text format round-trips exactly.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
    pub objects: Vec<(BBox, u32)>,
}

impl Scene {
    /// `(1, 3, h, w)` tensor with values in `[0, 1]`.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let mut t = Tensor::zeros(Shape4::new(1, 3, self.height, self.width));
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let v = self.rgb[(y * self.width + x) * 3 + c] as f64 / 255.0;
                    *t.at_mut(0, c, y, x) = F::from_f64(v);
                }
            }
        }
        t
    }

    pub fn validate(&self, file: &str, line: usize) -> Result<()> {
        for (b, label) in &self.objects {
            let inside = b.xmin >= 0.0
                && b.ymin >= 0.0
                && b.xmax <= self.width as f64
                && b.ymax <= self.height as f64;
            if !inside || !b.is_valid() || b.area() < MIN_BOX_AREA {
                return Err(Error::Parse {
                    file: file.to_string(),
                    line,
                    msg: format!("invalid annotation {b:?} (label {label})"),
                });
            }
            if *label == 0 {
                return Err(Error::Parse {
                    file: file.to_string(),
                    line,
                    msg: "label 0 is reserved for background".into(),
                });
            }
        }
        Ok(())
    }
}

// ---- synthetic generation ----

/// Generator knobs. Object scale is clamped so shapes fit the image.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_pair_iou: f64,
}

impl SynthConfig {
    pub fn new(size: usize, num_classes: usize) -> Self {
        SynthConfig {
            size,
            num_classes,
            min_objects: 1,
            max_objects: 5,
            min_scale: 12.0,
            max_scale: 96.0_f64.min(size as f64 * 0.75),
            max_pair_iou: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.num_classes) {
            return Err(Error::invalid(format!(
                "num_classes {} outside 2..=8",
                self.num_classes
            )));
        }
        if self.size < 32 {
            return Err(Error::invalid("scene size below 32"));
        }
        Ok(())
    }
}

fn quantize2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

/// Shape membership in canonical coordinates `u, v` in `[-1, 1]`; every
/// shape touches all four edges of its box, so the box is tight.
fn shape_contains(class: u32, u: f64, v: f64) -> bool {
    match class {
        1 => u * u + v * v <= 1.0,                              // disk
        2 => true,                                              // square fills its box
        3 => v >= -1.0 && u.abs() <= (v + 1.0) / 2.0,           // triangle, apex up
        4 => {
            let r = (u * u + v * v).sqrt();                     // ring
            (0.55..=1.0).contains(&r)
        }
        5 => u.abs() <= 0.33 || v.abs() <= 0.33,                // cross
        6 => u.abs() + v.abs() <= 1.0,                          // diamond
        7 => u.abs().max(v.abs()) >= 0.6,                       // frame
        8 => (u - v).abs() <= 0.35 || (u + v).abs() <= 0.35,    // xmark
        _ => false,
    }
}

/// Smooth value-noise background plus per-pixel jitter.
fn paint_background(size: usize, rgb: &mut [u8], rng: &mut RngState) {
    const GRID: usize = 8;
    let mut base = [0.0f64; 3];
    for b in &mut base {
        *b = rng.range(0.15, 0.85);
    }
    let mut grid = vec![0.0f64; (GRID + 1) * (GRID + 1) * 3];
    for g in grid.iter_mut() {
        *g = rng.range(-0.12, 0.12);
    }
    let cell = size as f64 / GRID as f64;
    for y in 0..size {
        for x in 0..size {
            let gx = x as f64 / cell;
            let gy = y as f64 / cell;
            let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
            let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
            let jitter = rng.range(-0.02, 0.02);
            for c in 0..3 {
                let g00 = grid[(y0 * (GRID + 1) + x0) * 3 + c];
                let g10 = grid[(y0 * (GRID + 1) + x0 + 1) * 3 + c];
                let g01 = grid[((y0 + 1) * (GRID + 1) + x0) * 3 + c];
                let g11 = grid[((y0 + 1) * (GRID + 1) + x0 + 1) * 3 + c];
                let noise = g00 * (1.0 - fx) * (1.0 - fy)
                    + g10 * fx * (1.0 - fy)
                    + g01 * (1.0 - fx) * fy
                    + g11 * fx * fy;
                let v = (base[c] + noise + jitter).clamp(0.0, 1.0);
                rgb[(y * size + x) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
}

/// Generates one scene: background, then 1-5 rejection-sampled shapes with
/// pairwise box IoU at most 0.3. Deterministic in `rng`.
pub fn generate_synthetic_scene(
    rng: &mut RngState,
    cfg: &SynthConfig,
    image_id: impl Into<String>,
) -> Scene {
    let size = cfg.size;
    let mut rgb = vec![0u8; size * size * 3];
    paint_background(size, &mut rgb, rng);

    let target = cfg.min_objects as u64
        + rng.below((cfg.max_objects - cfg.min_objects + 1) as u64);
    let mut objects: Vec<(BBox, u32)> = Vec::new();

    'objects: for _ in 0..target {
        for _try in 0..100 {
            let class = 1 + rng.below(cfg.num_classes as u64) as u32;
            let scale = rng.range(cfg.min_scale, cfg.max_scale);
            let aspect = rng.range(0.5_f64, 2.0);
            let w = (scale * aspect.sqrt()).clamp(8.0, cfg.max_scale);
            let h = (scale / aspect.sqrt()).clamp(8.0, cfg.max_scale);
            if w >= size as f64 - 2.0 || h >= size as f64 - 2.0 {
                continue;
            }
            let cx = rng.range(w / 2.0 + 1.0, size as f64 - w / 2.0 - 1.0);
            let cy = rng.range(h / 2.0 + 1.0, size as f64 - h / 2.0 - 1.0);
            let bbox = BBox {
                xmin: quantize2(cx - w / 2.0),
                ymin: quantize2(cy - h / 2.0),
                xmax: quantize2(cx + w / 2.0),
                ymax: quantize2(cy + h / 2.0),
            };
            if objects.iter().any(|(b, _)| b.iou(&bbox) > cfg.max_pair_iou) {
                continue;
            }

            // A color with some contrast against the local background.
            let px = ((bbox.ymin as usize).min(size - 1) * size
                + (bbox.xmin as usize).min(size - 1))
                * 3;
            let mut color = [0u8; 3];
            for _ in 0..8 {
                for c in &mut color {
                    *c = (rng.uniform() * 255.0) as u8;
                }
                let contrast = color
                    .iter()
                    .zip(&rgb[px..px + 3])
                    .map(|(a, b)| (*a as i32 - *b as i32).abs())
                    .max()
                    .unwrap_or(0);
                if contrast >= 64 {
                    break;
                }
            }

            draw_shape(&mut rgb, size, &bbox, class, color);
            objects.push((bbox, class));
            continue 'objects;
        }
        // Could not place another non-overlapping object; stop early.
        break;
    }

    Scene {
        image_id: image_id.into(),
        width: size,
        height: size,
        rgb,
        objects,
    }
}

fn draw_shape(rgb: &mut [u8], size: usize, bbox: &BBox, class: u32, color: [u8; 3]) {
    let (cx, cy) = bbox.center();
    let (hw, hh) = (bbox.width() / 2.0, bbox.height() / 2.0);
    let y0 = bbox.ymin.floor().max(0.0) as usize;
    let y1 = (bbox.ymax.ceil() as usize).min(size);
    let x0 = bbox.xmin.floor().max(0.0) as usize;
    let x1 = (bbox.xmax.ceil() as usize).min(size);
    for y in y0..y1 {
        for x in x0..x1 {
            let u = (x as f64 + 0.5 - cx) / hw;
            let v = (y as f64 + 0.5 - cy) / hh;
            if u.abs() <= 1.0 && v.abs() <= 1.0 && shape_contains(class, u, v) {
                let p = (y * size + x) * 3;
                rgb[p..p + 3].copy_from_slice(&color);
            }
        }
    }
}

// ---- augmentation ----

#[derive(Clone, Copy, Debug)]
pub struct AugmentConfig {
    pub horizontal_flip_prob: f64,
    pub crop_prob: f64,
    pub crop_scale_range: (f64, f64),
    /// Fraction of a box's area that must survive the crop.
    pub min_box_visibility: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            horizontal_flip_prob: 0.5,
            crop_prob: 0.5,
            crop_scale_range: (0.6, 1.0),
            min_box_visibility: 0.5,
        }
    }
}

fn flip_horizontal(scene: &Scene) -> Scene {
    let (w, h) = (scene.width, scene.height);
    let mut rgb = vec![0u8; scene.rgb.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + (w - 1 - x)) * 3;
            let dst = (y * w + x) * 3;
            rgb[dst..dst + 3].copy_from_slice(&scene.rgb[src..src + 3]);
        }
    }
    let objects = scene
        .objects
        .iter()
        .map(|(b, l)| {
            (
                BBox::new(w as f64 - b.xmax, b.ymin, w as f64 - b.xmin, b.ymax),
                *l,
            )
        })
        .collect();
    Scene {
        image_id: scene.image_id.clone(),
        width: w,
        height: h,
        rgb,
        objects,
    }
}

/// Crops `(x0, y0, cw, ch)` and bilinearly rescales back to the original
/// size; boxes are clipped to the window, rescaled, and dropped when too
/// little of them survives. Returns `None` if every box would be dropped.
fn crop_and_resize(scene: &Scene, x0: usize, y0: usize, cw: usize, ch: usize, min_vis: f64) -> Option<Scene> {
    let (w, h) = (scene.width, scene.height);
    let window = BBox::new(x0 as f64, y0 as f64, (x0 + cw) as f64, (y0 + ch) as f64);
    let sx = w as f64 / cw as f64;
    let sy = h as f64 / ch as f64;

    let mut objects = Vec::new();
    for (b, l) in &scene.objects {
        let clipped = BBox::new(
            b.xmin.max(window.xmin),
            b.ymin.max(window.ymin),
            b.xmax.min(window.xmax),
            b.ymax.min(window.ymax),
        );
        if !clipped.is_valid() || clipped.area() < min_vis * b.area() {
            continue;
        }
        let moved = BBox::new(
            (clipped.xmin - window.xmin) * sx,
            (clipped.ymin - window.ymin) * sy,
            (clipped.xmax - window.xmin) * sx,
            (clipped.ymax - window.ymin) * sy,
        );
        if moved.area() >= MIN_BOX_AREA {
            objects.push((moved, *l));
        }
    }
    if objects.is_empty() && !scene.objects.is_empty() {
        return None;
    }

    let mut rgb = vec![0u8; scene.rgb.len()];
    for y in 0..h {
        for x in 0..w {
            // Sample the crop window bilinearly.
            let fx = (x as f64 + 0.5) / sx - 0.5 + x0 as f64;
            let fy = (y as f64 + 0.5) / sy - 0.5 + y0 as f64;
            let xf = fx.floor().clamp(0.0, (w - 1) as f64);
            let yf = fy.floor().clamp(0.0, (h - 1) as f64);
            let (ix, iy) = (xf as usize, yf as usize);
            let (dx, dy) = ((fx - xf).clamp(0.0, 1.0), (fy - yf).clamp(0.0, 1.0));
            let ix1 = (ix + 1).min(w - 1);
            let iy1 = (iy + 1).min(h - 1);
            for c in 0..3 {
                let p00 = scene.rgb[(iy * w + ix) * 3 + c] as f64;
                let p10 = scene.rgb[(iy * w + ix1) * 3 + c] as f64;
                let p01 = scene.rgb[(iy1 * w + ix) * 3 + c] as f64;
                let p11 = scene.rgb[(iy1 * w + ix1) * 3 + c] as f64;
                let v = p00 * (1.0 - dx) * (1.0 - dy)
                    + p10 * dx * (1.0 - dy)
                    + p01 * (1.0 - dx) * dy
                    + p11 * dx * dy;
                rgb[(y * w + x) * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Some(Scene {
        image_id: scene.image_id.clone(),
        width: w,
        height: h,
        rgb,
        objects,
    })
}

/// Applies the augmentation pipeline: optional horizontal flip, then an
/// optional random crop rescaled back to the input size. A crop that would
/// drop every box is resampled up to 10 times, then skipped.
pub fn augment(scene: &Scene, cfg: &AugmentConfig, rng: &mut RngState) -> Scene {
    let mut out = if rng.chance(cfg.horizontal_flip_prob) {
        flip_horizontal(scene)
    } else {
        scene.clone()
    };
    if rng.chance(cfg.crop_prob) {
        for _ in 0..10 {
            let s = rng.range(cfg.crop_scale_range.0, cfg.crop_scale_range.1);
            let cw = ((out.width as f64 * s).round() as usize).clamp(1, out.width);
            let ch = ((out.height as f64 * s).round() as usize).clamp(1, out.height);
            let x0 = rng.below((out.width - cw + 1) as u64) as usize;
            let y0 = rng.below((out.height - ch + 1) as u64) as usize;
            if let Some(cropped) = crop_and_resize(&out, x0, y0, cw, ch, cfg.min_box_visibility) {
                out = cropped;
                break;
            }
        }
    }
    out
}

// ---- PPM IO ----

pub fn write_ppm<W: Write>(scene_rgb: &[u8], width: usize, height: usize, out: &mut W) -> Result<()> {
    write!(out, "P6\n{} {}\n255\n", width, height)?;
    out.write_all(scene_rgb)?;
    Ok(())
}

/// Reads a binary PPM (P6, maxval 255). Comments and arbitrary whitespace
/// in the header are accepted.
pub fn read_ppm<R: Read>(input: &mut R, name: &str) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Parse {
        file: name.to_string(),
        line: 0,
        msg: msg.to_string(),
    };

    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() {
            let b = bytes[pos];
            if b == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                pos += 1;
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Parse {
                file: name.to_string(),
                line: 0,
                msg: "truncated header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token(&bytes)? != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let width: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    if token(&bytes)? != "255" {
        return Err(bad("maxval must be 255"));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated pixel data"));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

// ---- dataset on disk ----

/// A dataset directory: `manifest.txt` (header `K=<n>`, then
/// `image_file annotation_count` lines), `annotations.txt`
/// (`image_id class_id xmin ymin xmax ymax`, 2 decimals), and the PPM
/// images.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// `(image file, annotation count)` in manifest order.
    pub entries: Vec<(String, usize)>,
    annotations: std::collections::HashMap<String, Vec<(BBox, u32)>>,
}

fn image_id_of(file: &str) -> String {
    Path::new(file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.to_string())
}

pub fn write_dataset(dir: &Path, scenes: &[Scene], num_classes: usize) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    let mut manifest = BufWriter::new(std::fs::File::create(dir.join("manifest.txt"))?);
    writeln!(manifest, "K={num_classes}")?;
    let mut ann = BufWriter::new(std::fs::File::create(dir.join("annotations.txt"))?);
    for scene in scenes {
        let rel = format!("images/{}.ppm", scene.image_id);
        let mut img = BufWriter::new(std::fs::File::create(dir.join(&rel))?);
        write_ppm(&scene.rgb, scene.width, scene.height, &mut img)?;
        writeln!(manifest, "{} {}", rel, scene.objects.len())?;
        for (b, label) in &scene.objects {
            writeln!(
                ann,
                "{} {} {:.2} {:.2} {:.2} {:.2}",
                scene.image_id, label, b.xmin, b.ymin, b.xmax, b.ymax
            )?;
        }
    }
    manifest.flush()?;
    ann.flush()?;
    Ok(())
}

/// Loads and validates a manifest: every referenced image must exist and
/// annotation counts must match.
pub fn load_dataset(manifest_path: &Path) -> Result<DatasetManifest> {
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mfile = manifest_path.to_string_lossy().into_owned();
    let text = std::fs::read_to_string(manifest_path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        file: mfile.clone(),
        line: 1,
        msg: "empty manifest".into(),
    })?;
    let num_classes: usize = header
        .strip_prefix("K=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse {
            file: mfile.clone(),
            line: 1,
            msg: format!("expected header K=<int>, got {header:?}"),
        })?;

    let mut entries = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (file, count) = match (parts.next(), parts.next(), parts.next()) {
            (Some(f), Some(c), None) => (f, c),
            _ => {
                return Err(Error::Parse {
                    file: mfile.clone(),
                    line: i + 1,
                    msg: format!("expected `image_file annotation_count`, got {line:?}"),
                })
            }
        };
        let count: usize = count.parse().map_err(|_| Error::Parse {
            file: mfile.clone(),
            line: i + 1,
            msg: format!("bad annotation count {count:?}"),
        })?;
        if !root.join(file).exists() {
            return Err(Error::Parse {
                file: mfile.clone(),
                line: i + 1,
                msg: format!("missing image file {file}"),
            });
        }
        entries.push((file.to_string(), count));
    }

    // Annotations, grouped by image id.
    let afile = root.join("annotations.txt");
    let aname = afile.to_string_lossy().into_owned();
    let mut annotations: std::collections::HashMap<String, Vec<(BBox, u32)>> =
        std::collections::HashMap::new();
    if afile.exists() {
        let reader = std::io::BufReader::new(std::fs::File::open(&afile)?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 6 {
                return Err(Error::Parse {
                    file: aname.clone(),
                    line: i + 1,
                    msg: format!("expected 6 fields, got {}", fields.len()),
                });
            }
            let parse_f = |s: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    file: aname.clone(),
                    line: i + 1,
                    msg: format!("bad coordinate {s:?}"),
                })
            };
            let label: u32 = fields[1].parse().map_err(|_| Error::Parse {
                file: aname.clone(),
                line: i + 1,
                msg: format!("bad class id {:?}", fields[1]),
            })?;
            if label == 0 || label as usize > num_classes {
                return Err(Error::Parse {
                    file: aname.clone(),
                    line: i + 1,
                    msg: format!("class id {label} outside 1..={num_classes}"),
                });
            }
            let b = BBox::new(
                parse_f(fields[2])?,
                parse_f(fields[3])?,
                parse_f(fields[4])?,
                parse_f(fields[5])?,
            );
            annotations.entry(fields[0].to_string()).or_default().push((b, label));
        }
    }

    for (i, (file, count)) in entries.iter().enumerate() {
        let have = annotations.get(&image_id_of(file)).map_or(0, Vec::len);
        if have != *count {
            return Err(Error::Parse {
                file: mfile.clone(),
                line: i + 2,
                msg: format!("{file}: manifest promises {count} annotations, found {have}"),
            });
        }
    }

    let class_names = SHAPE_CLASS_NAMES
        .iter()
        .take(num_classes)
        .map(|s| s.to_string())
        .collect();
    Ok(DatasetManifest {
        root,
        num_classes,
        class_names,
        entries,
        annotations,
    })
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load_scene(&self, index: usize) -> Result<Scene> {
        let (file, _) = &self.entries[index];
        let path = self.root.join(file);
        let mut f = std::fs::File::open(&path)?;
        let (width, height, rgb) = read_ppm(&mut f, &path.to_string_lossy())?;
        let image_id = image_id_of(file);
        let objects = self.annotations.get(&image_id).cloned().unwrap_or_default();
        let scene = Scene {
            image_id,
            width,
            height,
            rgb,
            objects,
        };
        scene.validate(file, index + 1)?;
        Ok(scene)
    }

    pub fn load_all(&self) -> Result<Vec<Scene>> {
        (0..self.len()).map(|i| self.load_scene(i)).collect()
    }
}

// ---- batching ----

/// A training batch: images stacked into one tensor plus per-image
/// annotations.
pub struct Batch<F: Scalar> {
    pub images: Tensor<F>,
    pub annotations: Vec<Vec<(BBox, u32)>>,
    pub image_ids: Vec<String>,
}

pub fn make_batch<F: Scalar>(scenes: &[&Scene]) -> Result<Batch<F>> {
    if scenes.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let (h, w) = (scenes[0].height, scenes[0].width);
    let mut images = Tensor::zeros(Shape4::new(scenes.len(), 3, h, w));
    for (b, scene) in scenes.iter().enumerate() {
        if scene.height != h || scene.width != w {
            return Err(Error::ShapeMismatch {
                op: "make_batch",
                lhs: format!("({h}x{w})"),
                rhs: format!("({}x{})", scene.height, scene.width),
            });
        }
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = scene.rgb[(y * w + x) * 3 + c] as f64 / 255.0;
                    *images.at_mut(b, c, y, x) = F::from_f64(v);
                }
            }
        }
    }
    Ok(Batch {
        images,
        annotations: scenes.iter().map(|s| s.objects.clone()).collect(),
        image_ids: scenes.iter().map(|s| s.image_id.clone()).collect(),
    })
}

/// Seeded shuffle of `0..count` chunked into batches; the final partial
/// batch is kept.
pub fn batch_order(count: usize, batch_size: usize, rng: &mut RngState) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..count).collect();
    rng.shuffle(&mut idx);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
