//! Manifest-driven image ingestion, the PPM codec, bilinear resizing, the
//! synthetic pedestrian generator, and video-frame aggregation.
//!
//! PPM (P6) is the only image codec: bit-exact, zero-dependency, adequate
//! at desk scale. Real datasets must be pre-converted.

use std::collections::HashSet;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub identity: usize,
    pub camera: usize,
    pub frame: Option<usize>,
}

/// Channel-major [3, h, w] image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl RawImage {
    pub fn new(h: usize, w: usize) -> Self {
        RawImage {
            h,
            w,
            data: vec![0.0; 3 * h * w],
        }
    }

    pub fn at(&self, c: usize, r: usize, col: usize) -> f32 {
        self.data[(c * self.h + r) * self.w + col]
    }

    pub fn at_mut(&mut self, c: usize, r: usize, col: usize) -> &mut f32 {
        &mut self.data[(c * self.h + r) * self.w + col]
    }
}

/// Parses `path,identity,camera[,frame]`; `#` comments and blank lines are
/// skipped; duplicate paths and unresolvable files are rejected.
pub fn load_manifest(csv_path: &Path) -> Result<Vec<SampleRecord>> {
    let text = fs::read_to_string(csv_path)
        .map_err(|e| Error::Data(format!("cannot read manifest {}: {e}", csv_path.display())))?;
    let base = csv_path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(Error::Data(format!(
                "manifest line {}: expected 3 or 4 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let identity: usize = fields[1].parse().map_err(|_| {
            Error::Data(format!(
                "manifest line {}: field 2 (identity) is not an integer: {:?}",
                lineno + 1,
                fields[1]
            ))
        })?;
        let camera: usize = fields[2].parse().map_err(|_| {
            Error::Data(format!(
                "manifest line {}: field 3 (camera) is not an integer: {:?}",
                lineno + 1,
                fields[2]
            ))
        })?;
        let frame = match fields.get(3) {
            Some(f) => Some(f.parse::<usize>().map_err(|_| {
                Error::Data(format!(
                    "manifest line {}: field 4 (frame) is not an integer: {:?}",
                    lineno + 1,
                    f
                ))
            })?),
            None => None,
        };
        let path = base.join(fields[0]);
        if !seen.insert(path.clone()) {
            return Err(Error::Data(format!(
                "manifest line {}: duplicate path {}",
                lineno + 1,
                path.display()
            )));
        }
        if !path.is_file() {
            return Err(Error::Data(format!(
                "manifest line {}: missing file {}",
                lineno + 1,
                path.display()
            )));
        }
        records.push(SampleRecord {
            path,
            identity,
            camera,
            frame,
        });
    }
    Ok(records)
}

pub fn read_ppm(path: &Path) -> Result<RawImage> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    parse_ppm(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_ppm(bytes: &[u8]) -> Result<RawImage> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        // skip whitespace and '#' comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Data("truncated PPM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token(bytes)?;
    if magic != "P6" {
        return Err(Error::Data(format!("not a binary PPM (P6): magic {magic:?}")));
    }
    let w: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Data("bad PPM width".into()))?;
    let h: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Data("bad PPM height".into()))?;
    let maxval: usize = token(bytes)?
        .parse()
        .map_err(|_| Error::Data("bad PPM maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Data(format!("unsupported PPM maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(Error::Data(format!(
            "truncated PPM payload: need {need} bytes, have {}",
            bytes.len().saturating_sub(pos)
        )));
    }
    let mut img = RawImage::new(h, w);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let v = bytes[pos + (r * w + c) * 3 + ch];
                *img.at_mut(ch, r, c) = v as f32 / 255.0;
            }
        }
    }
    Ok(img)
}

pub fn write_ppm(path: &Path, img: &RawImage) -> Result<()> {
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    out.reserve(3 * img.w * img.h);
    for r in 0..img.h {
        for c in 0..img.w {
            for ch in 0..3 {
                let v = (img.at(ch, r, c).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(v);
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

/// Bilinear resize with half-pixel centers.
pub fn bilinear_resize(img: &RawImage, out_h: usize, out_w: usize) -> RawImage {
    if img.h == out_h && img.w == out_w {
        return img.clone();
    }
    let mut out = RawImage::new(out_h, out_w);
    let sy = img.h as f32 / out_h as f32;
    let sx = img.w as f32 / out_w as f32;
    for r in 0..out_h {
        let fy = ((r as f32 + 0.5) * sy - 0.5).clamp(0.0, (img.h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.h - 1);
        let wy = fy - y0 as f32;
        for c in 0..out_w {
            let fx = ((c as f32 + 0.5) * sx - 0.5).clamp(0.0, (img.w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.w - 1);
            let wx = fx - x0 as f32;
            for ch in 0..3 {
                let v = img.at(ch, y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + img.at(ch, y0, x1) * (1.0 - wy) * wx
                    + img.at(ch, y1, x0) * wy * (1.0 - wx)
                    + img.at(ch, y1, x1) * wy * wx;
                *out.at_mut(ch, r, c) = v;
            }
        }
    }
    out
}

/// Decode, resize to the network input extent, keep values in [0,1].
/// Mean subtraction happens at batch assembly (the mean is a training-set
/// statistic carried in the checkpoint).
pub fn load_image(path: &Path) -> Result<RawImage> {
    let img = read_ppm(path)?;
    Ok(bilinear_resize(&img, INPUT_HEIGHT, INPUT_WIDTH))
}

/// Per-channel mean over a set of images.
pub fn channel_mean(images: &[RawImage]) -> [f64; 3] {
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for img in images {
        let plane = img.h * img.w;
        for ch in 0..3 {
            sums[ch] += img.data[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>();
        }
        count += plane;
    }
    if count == 0 {
        return [0.0; 3];
    }
    [
        sums[0] / count as f64,
        sums[1] / count as f64,
        sums[2] / count as f64,
    ]
}

/// Converts an input-sized image to a normalized network tensor.
pub fn to_input_tensor<S: Scalar>(img: &RawImage, mean: &[f64; 3]) -> Tensor<S> {
    debug_assert_eq!((img.h, img.w), (INPUT_HEIGHT, INPUT_WIDTH));
    let plane = img.h * img.w;
    let mut data = Vec::with_capacity(3 * plane);
    for ch in 0..3 {
        for &v in &img.data[ch * plane..(ch + 1) * plane] {
            data.push(S::from_f64(v as f64 - mean[ch]));
        }
    }
    Tensor::from_vec(&[INPUT_CHANNELS, INPUT_HEIGHT, INPUT_WIDTH], data).expect("sized")
}

/// In-memory dataset: manifest records plus decoded, input-sized images.
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub images: Vec<RawImage>,
}

impl Dataset {
    pub fn load(manifest: &Path) -> Result<Self> {
        let records = load_manifest(manifest)?;
        let images = records
            .iter()
            .map(|r| load_image(&r.path))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { records, images })
    }

    pub fn identities(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn cameras(&self) -> Vec<usize> {
        let mut cams: Vec<usize> = self.records.iter().map(|r| r.camera).collect();
        cams.sort_unstable();
        cams.dedup();
        cams
    }
}

/// Elementwise max over per-frame feature vectors (video aggregation).
pub fn aggregate_sequence<S: Scalar>(frames: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Data("aggregate_sequence: empty frame list".into()))?;
    let mut out = first.clone();
    for f in &frames[1..] {
        if f.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "aggregate_sequence: {:?} vs {:?}",
                f.shape(),
                first.shape()
            )));
        }
        for (o, &v) in out.data_mut().iter_mut().zip(f.data()) {
            if v > *o {
                *o = v;
            }
        }
    }
    Ok(out)
}

struct IdentityStyle {
    head: [f32; 3],
    torso: [f32; 3],
    legs: [f32; 3],
    glyph_color: [f32; 3],
    glyph_row: usize,
    glyph_col: usize,
    glyph_bits: [[bool; 4]; 4],
}

fn sample_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.random_range(0.1..0.9f32),
        rng.random_range(0.1..0.9f32),
        rng.random_range(0.1..0.9f32),
    ]
}

fn identity_style(rng: &mut ChaCha8Rng) -> IdentityStyle {
    IdentityStyle {
        head: sample_color(rng),
        torso: sample_color(rng),
        legs: sample_color(rng),
        glyph_color: sample_color(rng),
        glyph_row: rng.random_range(45..85),
        glyph_col: rng.random_range(8..40),
        glyph_bits: std::array::from_fn(|_| std::array::from_fn(|_| rng.random::<bool>())),
    }
}

fn render_identity(style: &IdentityStyle) -> RawImage {
    let mut img = RawImage::new(INPUT_HEIGHT, INPUT_WIDTH);
    for r in 0..INPUT_HEIGHT {
        for c in 0..INPUT_WIDTH {
            let color: [f32; 3] = if (12..38).contains(&r) && (20..40).contains(&c) {
                style.head
            } else if (40..95).contains(&r) && (8..52).contains(&c) {
                style.torso
            } else if (95..150).contains(&r) && (14..46).contains(&c) {
                style.legs
            } else {
                [0.82, 0.82, 0.82]
            };
            for ch in 0..3 {
                *img.at_mut(ch, r, c) = color[ch];
            }
        }
    }
    // per-identity local glyph: a 12x12 block of 3x3 cells
    for (gi, row) in style.glyph_bits.iter().enumerate() {
        for (gj, &bit) in row.iter().enumerate() {
            if !bit {
                continue;
            }
            for dr in 0..3 {
                for dc in 0..3 {
                    let r = style.glyph_row + gi * 3 + dr;
                    let c = style.glyph_col + gj * 3 + dc;
                    for ch in 0..3 {
                        *img.at_mut(ch, r, c) = style.glyph_color[ch];
                    }
                }
            }
        }
    }
    img
}

/// Translates by (dy, dx) with edge replication: output (r,c) sources from
/// clamp(r-dy, c-dx).
pub fn shift_image(img: &RawImage, dy: isize, dx: isize) -> RawImage {
    let mut out = RawImage::new(img.h, img.w);
    for ch in 0..3 {
        for r in 0..img.h {
            let sr = (r as isize - dy).clamp(0, img.h as isize - 1) as usize;
            for c in 0..img.w {
                let sc = (c as isize - dx).clamp(0, img.w as isize - 1) as usize;
                *out.at_mut(ch, r, c) = img.at(ch, sr, sc);
            }
        }
    }
    out
}

pub const SYNTH_NOISE_STD: f64 = 0.02;

/// Writes a deterministic synthetic corpus: `num_ids` identities, each with
/// `imgs_per_id_per_cam` images under two cameras, plus `manifest.csv`.
/// Camera 1 applies a brightness drop and a fixed shift on top of the
/// per-image jitter, mimicking a second viewpoint.
pub fn synth_generate(
    num_ids: usize,
    imgs_per_id_per_cam: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<PathBuf> {
    if num_ids < 2 {
        return Err(Error::Config(format!(
            "synthetic corpus needs at least 2 identities, got {num_ids}"
        )));
    }
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = String::from("# path,identity,camera\n");
    for id in 0..num_ids {
        let style = identity_style(&mut rng);
        let base = render_identity(&style);
        for cam in 0..2usize {
            for j in 0..imgs_per_id_per_cam {
                let dy = rng.random_range(-2..=2i64) as isize;
                let dx = rng.random_range(-2..=2i64) as isize;
                let (dy, dx) = if cam == 1 { (dy + 4, dx + 2) } else { (dy, dx) };
                let mut img = shift_image(&base, dy, dx);
                let gain = if cam == 1 { 0.85f32 } else { 1.0 };
                for v in &mut img.data {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    *v = (*v * gain + (noise * SYNTH_NOISE_STD) as f32).clamp(0.0, 1.0);
                }
                let name = format!("id_{id}_cam{cam}_{j}.ppm");
                write_ppm(&out_dir.join(&name), &img)?;
                manifest.push_str(&format!("{name},{id},{cam}\n"));
            }
        }
    }
    let manifest_path = out_dir.join("manifest.csv");
    fs::write(&manifest_path, manifest)
        .map_err(|e| Error::Data(format!("cannot write manifest: {e}")))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = RawImage::new(5, 4);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 256) as f32 / 255.0;
        }
        let p = dir.path().join("t.ppm");
        write_ppm(&p, &img).unwrap();
        let back = read_ppm(&p).unwrap();
        assert_eq!(back.h, 5);
        assert_eq!(back.w, 4);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() < 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn ppm_rejects_truncation_and_magic() {
        assert!(parse_ppm(b"P5\n2 2\n255\n....").is_err());
        assert!(parse_ppm(b"P6\n4 4\n255\nxx").is_err());
    }

    #[test]
    fn bilinear_preserves_constants() {
        let mut img = RawImage::new(320, 120);
        img.data.fill(0.37);
        let out = bilinear_resize(&img, 160, 60);
        assert!(out.data.iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn bilinear_corners_on_integer_aligned_upsample() {
        // 2x2 checkerboard upsampled 2x: corner pixels preserve sources.
        let mut img = RawImage::new(2, 2);
        for ch in 0..3 {
            *img.at_mut(ch, 0, 0) = 1.0;
            *img.at_mut(ch, 1, 1) = 1.0;
        }
        let out = bilinear_resize(&img, 4, 4);
        assert_eq!(out.at(0, 0, 0), 1.0);
        assert_eq!(out.at(0, 0, 3), 0.0);
        assert_eq!(out.at(0, 3, 0), 0.0);
        assert_eq!(out.at(0, 3, 3), 1.0);
    }

    #[test]
    fn manifest_errors_name_the_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("img.ppm"), b"").unwrap();
        let m = dir.path().join("m.csv");
        std::fs::write(&m, "img.ppm,abc,0\n").unwrap();
        let err = load_manifest(&m).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
        assert!(err.contains("field 2"), "{err}");
    }

    #[test]
    fn manifest_skips_comments_and_rejects_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.ppm"), b"").unwrap();
        let m = dir.path().join("m.csv");
        std::fs::write(&m, "# header\n\na.ppm,0,0\n").unwrap();
        assert_eq!(load_manifest(&m).unwrap().len(), 1);
        std::fs::write(&m, "a.ppm,0,0\na.ppm,0,1\n").unwrap();
        assert!(load_manifest(&m).unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn aggregate_is_elementwise_max_and_order_free() {
        let a = Tensor::<f32>::from_vec(&[2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::<f32>::from_vec(&[2], vec![0.0, 1.0]).unwrap();
        let m1 = aggregate_sequence(&[a.clone(), b.clone()]).unwrap();
        let m2 = aggregate_sequence(&[b, a.clone()]).unwrap();
        assert_eq!(m1.data(), &[1.0, 1.0]);
        assert_eq!(m1, m2);
        assert_eq!(aggregate_sequence(&[a.clone()]).unwrap(), a);
        assert!(aggregate_sequence::<f32>(&[]).is_err());
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        synth_generate(2, 1, 5, d1.path()).unwrap();
        synth_generate(2, 1, 5, d2.path()).unwrap();
        for name in ["id_0_cam0_0.ppm", "id_1_cam1_0.ppm"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }
}
