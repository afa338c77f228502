//! Deterministic synthetic defect dataset: value-noise backgrounds with
//! scratch, blob, and crack defects, written as PGM pairs plus a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Tensor;
use crate::pgm::{read_pgm, write_pgm, GrayImage};
use crate::real::Real;
use crate::rng::SeededRng;

pub const NUM_DEFECT_CLASSES: usize = 3;
pub const LABEL_SCRATCH: u8 = 1;
pub const LABEL_BLOB: u8 = 2;
pub const LABEL_CRACK: u8 = 3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub size: usize,
    pub classes: usize,
    pub splits: Splits,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: GrayImage,
    pub mask: GrayImage,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.display().to_string(),
        source: e,
    }
}

/// Three-octave bilinear value noise in [0,1].
fn value_noise(size: usize, rng: &mut SeededRng) -> Vec<f64> {
    let mut field = vec![0.0f64; size * size];
    let mut amplitude = 0.5;
    let mut cells = 4usize;
    for _ in 0..3 {
        let nodes = cells + 1;
        let lattice: Vec<f64> = (0..nodes * nodes).map(|_| rng.next_f64()).collect();
        let cell_px = size as f64 / cells as f64;
        for y in 0..size {
            let fy = y as f64 / cell_px;
            let iy = (fy as usize).min(cells - 1);
            let ty = fy - iy as f64;
            for x in 0..size {
                let fx = x as f64 / cell_px;
                let ix = (fx as usize).min(cells - 1);
                let tx = fx - ix as f64;
                let v00 = lattice[iy * nodes + ix];
                let v01 = lattice[iy * nodes + ix + 1];
                let v10 = lattice[(iy + 1) * nodes + ix];
                let v11 = lattice[(iy + 1) * nodes + ix + 1];
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                field[y * size + x] += amplitude * (top + (bot - top) * ty);
            }
        }
        amplitude *= 0.5;
        cells *= 2;
    }
    // octave amplitudes sum to 0.875
    for v in field.iter_mut() {
        *v /= 0.875;
    }
    field
}

/// Anti-aliased coverage of a line segment of the given width, applied to the
/// image as an intensity offset; pixels with coverage > 0.5 get the label.
fn draw_segment(
    img: &mut [f64],
    mask: &mut [u8],
    size: usize,
    (x0, y0): (f64, f64),
    (x1, y1): (f64, f64),
    width: f64,
    offset: f64,
    label: u8,
) {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let pad = width / 2.0 + 1.5;
    let xmin = (x0.min(x1) - pad).floor().max(0.0) as usize;
    let xmax = ((x0.max(x1) + pad).ceil() as usize).min(size - 1);
    let ymin = (y0.min(y1) - pad).floor().max(0.0) as usize;
    let ymax = ((y0.max(y1) + pad).ceil() as usize).min(size - 1);
    for y in ymin..=ymax {
        for x in xmin..=xmax {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
            };
            let (cx, cy) = (x0 + t * dx, y0 + t * dy);
            let dist = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
            let coverage = (width / 2.0 + 0.5 - dist).clamp(0.0, 1.0);
            if coverage > 0.0 {
                let i = y * size + x;
                img[i] += offset * coverage;
                if coverage > 0.5 {
                    mask[i] = label;
                }
            }
        }
    }
}

fn draw_scratch(img: &mut [f64], mask: &mut [u8], size: usize, offset: f64, rng: &mut SeededRng) {
    let s = size as f64;
    let len = rng.uniform(s / 4.0, s / 2.0);
    let angle = rng.uniform(0.0, std::f64::consts::PI);
    let cx = rng.uniform(s * 0.2, s * 0.8);
    let cy = rng.uniform(s * 0.2, s * 0.8);
    let (dx, dy) = (angle.cos() * len / 2.0, angle.sin() * len / 2.0);
    let width = rng.uniform(1.0, 2.5);
    draw_segment(
        img,
        mask,
        size,
        (cx - dx, cy - dy),
        (cx + dx, cy + dy),
        width,
        offset,
        LABEL_SCRATCH,
    );
}

fn draw_blob(img: &mut [f64], mask: &mut [u8], size: usize, offset: f64, rng: &mut SeededRng) {
    let s = size as f64;
    let rx = rng.uniform(s / 16.0, s / 8.0);
    let ry = rng.uniform(s / 16.0, s / 8.0);
    let cx = rng.uniform(rx, s - rx);
    let cy = rng.uniform(ry, s - ry);
    for y in 0..size {
        for x in 0..size {
            let nx = (x as f64 + 0.5 - cx) / rx;
            let ny = (y as f64 + 0.5 - cy) / ry;
            let r = (nx * nx + ny * ny).sqrt();
            // soft one-pixel edge in normalized units
            let edge = 1.0 / rx.min(ry);
            let coverage = ((1.0 + edge - r) / (2.0 * edge)).clamp(0.0, 1.0);
            if coverage > 0.0 {
                let i = y * size + x;
                img[i] += offset * coverage;
                if coverage > 0.5 {
                    mask[i] = LABEL_BLOB;
                }
            }
        }
    }
}

fn draw_crack(img: &mut [f64], mask: &mut [u8], size: usize, offset: f64, rng: &mut SeededRng) {
    let s = size as f64;
    let steps = 8 + rng.next_below(13) as usize;
    let mut x = rng.uniform(s * 0.2, s * 0.8);
    let mut y = rng.uniform(s * 0.2, s * 0.8);
    let mut angle = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let step = s / 16.0;
    for _ in 0..steps {
        angle += rng.uniform(-0.8, 0.8);
        let nx = (x + angle.cos() * step).clamp(1.0, s - 1.0);
        let ny = (y + angle.sin() * step).clamp(1.0, s - 1.0);
        draw_segment(img, mask, size, (x, y), (nx, ny), 1.2, offset, LABEL_CRACK);
        x = nx;
        y = ny;
    }
}

/// One sample, a pure function of (size, contrast, seed, index).
pub fn generate_sample(size: usize, contrast: f64, seed: u64, index: u64) -> Sample {
    let mut rng = SeededRng::substream(seed, index);
    let noise = value_noise(size, &mut rng);
    // keep the background mid-range so defect offsets rarely clip
    let mut img: Vec<f64> = noise.iter().map(|&v| 64.0 + 128.0 * v).collect();
    let mut mask = vec![0u8; size * size];
    let offset_mag = contrast * 0.5 * 255.0;
    // one sign per image so overlapping defects never cancel in the mean
    let sign = if rng.next_below(2) == 0 { 1.0 } else { -1.0 };
    let offset = sign * offset_mag;
    let n_defects = 1 + rng.next_below(3) as usize;
    for _ in 0..n_defects {
        match rng.next_below(3) {
            0 => draw_scratch(&mut img, &mut mask, size, offset, &mut rng),
            1 => draw_blob(&mut img, &mut mask, size, offset, &mut rng),
            _ => draw_crack(&mut img, &mut mask, size, offset, &mut rng),
        }
    }
    let pixels: Vec<u8> = img.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    Sample {
        id: format!("{index:05}"),
        image: GrayImage {
            width: size,
            height: size,
            pixels,
        },
        mask: GrayImage {
            width: size,
            height: size,
            pixels: mask,
        },
    }
}

/// Generate `count` samples into `dir` and write the manifest. The train
/// split is the first 70% of ids (rounded down, at least one when count > 1).
pub fn generate_dataset(
    dir: &Path,
    count: usize,
    size: usize,
    contrast: f64,
    seed: u64,
) -> Result<Manifest> {
    if count == 0 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!(
            "dataset size {size} must be a positive multiple of 32"
        )));
    }
    if !(contrast > 0.0 && contrast <= 1.0) {
        return Err(Error::Config(format!(
            "contrast {contrast} must be in (0, 1]"
        )));
    }
    let images = dir.join("images");
    let masks = dir.join("masks");
    fs::create_dir_all(&images).map_err(io_err(&images))?;
    fs::create_dir_all(&masks).map_err(io_err(&masks))?;
    let mut ids = Vec::with_capacity(count);
    for index in 0..count as u64 {
        let sample = generate_sample(size, contrast, seed, index);
        write_pgm(&images.join(format!("{}.pgm", sample.id)), &sample.image)?;
        write_pgm(&masks.join(format!("{}.pgm", sample.id)), &sample.mask)?;
        ids.push(sample.id);
    }
    let train_count = if count == 1 { 1 } else { (count * 7 / 10).max(1) };
    let manifest = Manifest {
        size,
        classes: NUM_DEFECT_CLASSES + 1,
        splits: Splits {
            train: ids[..train_count].to_vec(),
            test: ids[train_count..].to_vec(),
        },
        seed,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: invalid manifest: {e}", path.display())))
}

pub fn load_sample(dir: &Path, id: &str) -> Result<Sample> {
    let image = read_pgm(&dir.join("images").join(format!("{id}.pgm")))?;
    let mask = read_pgm(&dir.join("masks").join(format!("{id}.pgm")))?;
    if image.width != mask.width || image.height != mask.height {
        return Err(Error::Data(format!(
            "sample {id}: image {}x{} and mask {}x{} differ",
            image.width, image.height, mask.width, mask.height
        )));
    }
    Ok(Sample {
        id: id.to_string(),
        image,
        mask,
    })
}

pub fn load_split(dir: &Path, ids: &[String]) -> Result<Vec<Sample>> {
    ids.iter().map(|id| load_sample(dir, id)).collect()
}

/// Batch of samples as a [B,3,H,W] tensor in [0,1] (grayscale replicated to
/// three channels) plus flat class targets.
pub fn batch_tensors<R: Real>(samples: &[&Sample]) -> Result<(Tensor<R>, Vec<i64>)> {
    let b = samples.len();
    if b == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let (w, h) = (samples[0].image.width, samples[0].image.height);
    let mut data = Vec::with_capacity(b * 3 * h * w);
    let mut targets = Vec::with_capacity(b * h * w);
    for s in samples {
        if s.image.width != w || s.image.height != h {
            return Err(Error::Data(format!(
                "sample {}: size {}x{} differs from batch {}x{}",
                s.id, s.image.width, s.image.height, w, h
            )));
        }
        for _ in 0..3 {
            data.extend(
                s.image
                    .pixels
                    .iter()
                    .map(|&p| R::from_f64(p as f64 / 255.0)),
            );
        }
        targets.extend(s.mask.pixels.iter().map(|&p| p as i64));
    }
    Ok((Tensor::new(vec![b, 3, h, w], data)?, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate_sample(64, 0.5, 9, 3);
        let b = generate_sample(64, 0.5, 9, 3);
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        let c = generate_sample(64, 0.5, 10, 3);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn masks_in_range_and_defects_present() {
        let mut saw_defect = false;
        for index in 0..20 {
            let s = generate_sample(64, 0.8, 1, index);
            assert!(s.mask.pixels.iter().all(|&p| p < 4));
            if s.mask.pixels.iter().any(|&p| p != 0) {
                saw_defect = true;
            }
        }
        assert!(saw_defect);
    }

    #[test]
    fn full_contrast_separates_defects_from_background() {
        let mut good = 0;
        let total = 100;
        for index in 0..total {
            let s = generate_sample(64, 1.0, 77, index);
            let (mut dsum, mut dn, mut bsum, mut bn) = (0.0f64, 0usize, 0.0f64, 0usize);
            for (i, &m) in s.mask.pixels.iter().enumerate() {
                let v = s.image.pixels[i] as f64;
                if m != 0 {
                    dsum += v;
                    dn += 1;
                } else {
                    bsum += v;
                    bn += 1;
                }
            }
            if dn > 0 && (dsum / dn as f64 - bsum / bn as f64).abs() > 20.0 {
                good += 1;
            }
        }
        assert!(good * 100 >= total * 95, "only {good}/{total} images separate");
    }

    #[test]
    fn directory_round_trip_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_dataset(dir.path(), 10, 32, 0.5, 5).unwrap();
        assert_eq!(manifest.splits.train.len(), 7);
        assert_eq!(manifest.splits.test.len(), 3);
        assert_eq!(manifest.classes, 4);
        let loaded = load_manifest(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        let samples = load_split(dir.path(), &manifest.splits.train).unwrap();
        assert_eq!(samples.len(), 7);
        let reference = generate_sample(32, 0.5, 5, 0);
        assert_eq!(samples[0].image, reference.image);
        assert_eq!(samples[0].mask, reference.mask);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(a.path(), 4, 32, 0.3, 11).unwrap();
        generate_dataset(b.path(), 4, 32, 0.3, 11).unwrap();
        for sub in ["images/00000.pgm", "masks/00003.pgm", "manifest.json"] {
            assert_eq!(
                fs::read(a.path().join(sub)).unwrap(),
                fs::read(b.path().join(sub)).unwrap(),
                "{sub}"
            );
        }
    }

    #[test]
    fn batch_tensor_layout() {
        let s = generate_sample(32, 0.5, 2, 0);
        let (t, targets) = batch_tensors::<f32>(&[&s, &s]).unwrap();
        assert_eq!(t.shape, vec![2, 3, 32, 32]);
        assert_eq!(targets.len(), 2 * 32 * 32);
        // channels replicated
        let hw = 32 * 32;
        assert_eq!(t.data[..hw], t.data[hw..2 * hw]);
        assert!(t.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(targets[0], s.mask.pixels[0] as i64);
    }
}
