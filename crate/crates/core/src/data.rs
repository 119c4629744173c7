//! Synthetic shapes dataset and its on-disk form.
//!
//! Layout of a dataset directory:
//!
//! ```text
//! images/00000.ppm   binary P6, 8-bit RGB
//! labels/00000.txt   one `class_id cx cy w h` line per box, normalized
//! ```

use crate::boxes::GroundTruthBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];

/// One `[3,S,S]` image with its labels. Pixels are multiples of 1/255.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: Vec<GroundTruthBox>,
}

impl Sample {
    pub fn size(&self) -> usize {
        self.image.dim(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape extent in pixels, inclusive.
    pub min_px: usize,
    pub max_px: usize,
}

impl SynthConfig {
    pub fn new(image_size: usize) -> Self {
        Self { image_size, min_shapes: 1, max_shapes: 4, min_px: 6, max_px: 24 }
    }
}

fn quantize(v: f64) -> f32 {
    (v * 255.0).round().clamp(0.0, 255.0) as f32 / 255.0
}

/// Pixel mask of `class` drawn in the `side × side` square at `(x0, y0)`.
fn inside(class: usize, side: usize, px: usize, py: usize) -> bool {
    let s = side as f64;
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    match class {
        0 => {
            let r = s / 2.0;
            (x - r).powi(2) + (y - r).powi(2) <= r * r
        }
        1 => true,
        _ => {
            // apex at the top centre, base along the bottom edge
            let half = (s / 2.0) * (y / s);
            (x - s / 2.0).abs() <= half
        }
    }
}

fn render(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Sample {
    let s = cfg.image_size;
    let plane = s * s;
    let mut img: Vec<f32> = (0..3 * plane).map(|_| quantize(rng.gen_range(0.0..0.4))).collect();
    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let mut placed: Vec<[usize; 4]> = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..count {
        let class = rng.gen_range(0..CLASS_NAMES.len());
        let color: [f32; 3] = std::array::from_fn(|_| quantize(rng.gen_range(0.5..1.0)));
        // rejection-sample a free spot with a one-pixel gap to earlier shapes
        for _attempt in 0..50 {
            let side = rng.gen_range(cfg.min_px..=cfg.max_px);
            let x0 = rng.gen_range(0..=s - side);
            let y0 = rng.gen_range(0..=s - side);
            let rect = [x0, y0, x0 + side, y0 + side];
            if placed.iter().any(|p| rect[0] <= p[2] && p[0] <= rect[2] && rect[1] <= p[3] && p[1] <= rect[3]) {
                continue;
            }
            let (mut lo, mut hi) = ([usize::MAX; 2], [0usize; 2]);
            for py in 0..side {
                for px in 0..side {
                    if !inside(class, side, px, py) {
                        continue;
                    }
                    let (x, y) = (x0 + px, y0 + py);
                    for (c, &v) in color.iter().enumerate() {
                        img[c * plane + y * s + x] = v;
                    }
                    lo = [lo[0].min(x), lo[1].min(y)];
                    hi = [hi[0].max(x), hi[1].max(y)];
                }
            }
            placed.push(rect);
            let n = s as f64;
            labels.push(GroundTruthBox::from_corners(
                class,
                lo[0] as f64 / n,
                lo[1] as f64 / n,
                (hi[0] + 1) as f64 / n,
                (hi[1] + 1) as f64 / n,
            ));
            break;
        }
    }
    Sample { image: Tensor::new(&[3, s, s], img).expect("image shape"), labels }
}

/// `n_images` samples, each drawn from its own stream derived from `seed`.
pub fn synth_dataset(n_images: usize, cfg: &SynthConfig, seed: u64) -> Vec<Sample> {
    (0..n_images)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            render(&mut rng, cfg)
        })
        .collect()
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:05}.ppm"))
}

fn label_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("labels").join(format!("{i:05}.txt"))
}

pub fn encode_ppm(image: &Tensor<f32>) -> Vec<u8> {
    let (h, w) = (image.dim(1), image.dim(2));
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..plane {
        for c in 0..3 {
            out.push((d[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn decode_ppm(bytes: &[u8], what: &Path) -> Result<Tensor<f32>> {
    let bad = |m: &str| Error::Format(format!("{}: {m}", what.display()));
    // header: magic, width, height, maxval separated by whitespace, then one byte
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PPM header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII PPM header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PPM header number"));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 || w == 0 || h == 0 {
        return Err(bad("only 8-bit PPM with positive size is supported"));
    }
    let body = bytes.get(pos + 1..).ok_or_else(|| bad("truncated PPM"))?;
    if body.len() != 3 * w * h {
        return Err(bad(&format!("expected {} pixel bytes, found {}", 3 * w * h, body.len())));
    }
    let plane = w * h;
    let mut data = vec![0f32; 3 * plane];
    for (i, px) in body.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn format_labels(labels: &[GroundTruthBox]) -> String {
    let mut s = String::new();
    for b in labels {
        writeln!(s, "{} {} {} {} {}", b.class_id, b.cx, b.cy, b.w, b.h).expect("string write");
    }
    s
}

pub fn parse_labels(text: &str, what: &Path) -> Result<Vec<GroundTruthBox>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |m: &str| Error::Format(format!("{} line {}: {m}", what.display(), i + 1));
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 5 {
                return Err(bad("expected `class_id cx cy w h`"));
            }
            let class_id = parts[0].parse().map_err(|_| bad("bad class id"))?;
            let v: Vec<f64> = parts[1..].iter().map(|p| p.parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad("bad number"))?;
            let b = GroundTruthBox::new(class_id, v[0], v[1], v[2], v[3]);
            if !b.is_valid(1e-9) {
                return Err(bad("box outside [0,1]² or with non-positive size"));
            }
            Ok(b)
        })
        .collect()
}

pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("labels"))?;
    for (i, s) in samples.iter().enumerate() {
        std::fs::write(image_path(dir, i), encode_ppm(&s.image))?;
        std::fs::write(label_path(dir, i), format_labels(&s.labels))?;
    }
    Ok(())
}

/// Reads `images/*.ppm` in name order with their matching label files.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let images = dir.join("images");
    let mut names: Vec<PathBuf> = std::fs::read_dir(&images)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", images.display()))))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    names.sort();
    names
        .iter()
        .map(|img_path| {
            let stem = img_path.file_stem().expect("file stem");
            let lbl_path = dir.join("labels").join(stem).with_extension("txt");
            let read = |p: &Path| std::fs::read(p).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", p.display()))));
            let image = decode_ppm(&read(img_path)?, img_path)?;
            let text = String::from_utf8(read(&lbl_path)?).map_err(|_| Error::Format(format!("{}: not utf-8", lbl_path.display())))?;
            Ok(Sample { image, labels: parse_labels(&text, &lbl_path)? })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let cfg = SynthConfig::new(64);
        assert_eq!(synth_dataset(8, &cfg, 5), synth_dataset(8, &cfg, 5));
        assert_ne!(synth_dataset(2, &cfg, 5), synth_dataset(2, &cfg, 6));
    }

    #[test]
    fn labels_valid_and_tight() {
        let cfg = SynthConfig::new(64);
        for s in synth_dataset(50, &cfg, 1) {
            assert!((1..=4).contains(&s.labels.len()));
            for b in &s.labels {
                assert!(b.is_valid(1e-12));
                assert!(b.w * 64.0 >= 4.0 - 1e-9 && b.h * 64.0 >= 4.0 - 1e-9);
                // the box edges touch shape pixels (brighter than any background)
                let [x0, y0, x1, y1] = b.corners().map(|v| (v * 64.0).round() as usize);
                let bright = |x: usize, y: usize| (0..3).any(|c| s.image.data()[c * 4096 + y * 64 + x] >= 0.5);
                assert!((y0..y1).any(|y| bright(x0, y)) && (y0..y1).any(|y| bright(x1 - 1, y)));
                assert!((x0..x1).any(|x| bright(x, y0)) && (x0..x1).any(|x| bright(x, y1 - 1)));
            }
        }
    }

    #[test]
    fn class_balance() {
        let samples = synth_dataset(1200, &SynthConfig::new(64), 7);
        let mut counts = [0usize; 3];
        for b in samples.iter().flat_map(|s| &s.labels).take(3000) {
            counts[b.class_id] += 1;
        }
        let total: usize = counts.iter().sum();
        assert_eq!(total, 3000);
        for c in counts {
            assert!((c as f64 / total as f64 - 1.0 / 3.0).abs() <= 0.05, "{counts:?}");
        }
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = synth_dataset(5, &SynthConfig::new(64), 3);
        write_dataset(dir.path(), &samples).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), samples);
    }

    #[test]
    fn malformed_files_are_named() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &synth_dataset(2, &SynthConfig::new(64), 3)).unwrap();
        std::fs::write(dir.path().join("labels/00001.txt"), "0 0.5 0.5 banana 0.1\n").unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Format(m)) => assert!(m.contains("00001.txt"), "{m}"),
            other => panic!("{:?}", other.map(|v| v.len())),
        }
        std::fs::write(dir.path().join("images/00000.ppm"), b"P6\n64 64\n255\n\x00").unwrap();
        match read_dataset(dir.path()) {
            Err(Error::Format(m)) => assert!(m.contains("00000.ppm"), "{m}"),
            other => panic!("{:?}", other.map(|v| v.len())),
        }
    }
}
