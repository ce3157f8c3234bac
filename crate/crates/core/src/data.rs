//! Phantom generation, raw image/sinogram files, PNG export and dataset
//! splits.
//!
//! The on-disk format is a short ASCII header followed by row-major
//! little-endian f32 samples:
//!
//! ```text
//! rawf32 1
//! kind image
//! rows 64
//! cols 64
//! spacing_mm 2.6564
//! dose 10%
//! data
//! <rows*cols little-endian f32>
//! ```
//!
//! `dose` is optional; `spacing_mm` is the pixel size for images and the
//! detector pitch for sinograms.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{ImageGrid, Sinogram};

const MIN_PHANTOM_SIDE: usize = 16;

/// Test-object family for simulation studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    /// The classic head phantom with soft-tissue contrast levels.
    SheppLogan,
    /// A seeded arrangement of one body ellipse plus internal features.
    RandomEllipses,
}

// value, a, b, x0, y0, rotation in degrees; coordinates on [-1, 1].
const SHEPP_LOGAN: [(f64, f64, f64, f64, f64, f64); 10] = [
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
];

struct Ellipse {
    value: f64,
    a: f64,
    b: f64,
    x0: f64,
    y0: f64,
    phi_rad: f64,
}

fn render_ellipses(rows: usize, cols: usize, ellipses: &[Ellipse]) -> Array2<f64> {
    let mut img = Array2::zeros((rows, cols));
    for r in 0..rows {
        // Row 0 is the top of the image, y = +1 edge.
        let y = (rows as f64 / 2.0 - r as f64 - 0.5) * 2.0 / rows as f64;
        for c in 0..cols {
            let x = (c as f64 + 0.5 - cols as f64 / 2.0) * 2.0 / cols as f64;
            let mut v = 0.0;
            for e in ellipses {
                let dx = x - e.x0;
                let dy = y - e.y0;
                let (s, co) = e.phi_rad.sin_cos();
                let xr = dx * co + dy * s;
                let yr = -dx * s + dy * co;
                if (xr / e.a).powi(2) + (yr / e.b).powi(2) <= 1.0 {
                    v += e.value;
                }
            }
            img[[r, c]] = v.clamp(0.0, 1.0);
        }
    }
    img
}

/// Render a phantom on a `rows x cols` grid with values in [0, 1].
/// The unit square is stretched over the grid, so non-square grids stretch
/// the phantom with them. `seed` only affects `RandomEllipses`.
pub fn make_phantom(kind: PhantomKind, rows: usize, cols: usize, seed: u64) -> Result<ImageGrid> {
    if rows < MIN_PHANTOM_SIDE || cols < MIN_PHANTOM_SIDE {
        return Err(Error::input(format!(
            "phantom must be at least {MIN_PHANTOM_SIDE}x{MIN_PHANTOM_SIDE}, got {rows}x{cols}"
        )));
    }
    let ellipses = match kind {
        PhantomKind::SheppLogan => SHEPP_LOGAN
            .iter()
            .map(|&(value, a, b, x0, y0, deg)| Ellipse {
                value,
                a,
                b,
                x0,
                y0,
                phi_rad: deg.to_radians(),
            })
            .collect::<Vec<_>>(),
        PhantomKind::RandomEllipses => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let count = rng.random_range(5..=12usize);
            let mut es = Vec::with_capacity(count);
            // Body outline first, features sit inside it.
            es.push(Ellipse {
                value: rng.random_range(0.4..0.7),
                a: rng.random_range(0.6..0.85),
                b: rng.random_range(0.6..0.85),
                x0: rng.random_range(-0.1..0.1),
                y0: rng.random_range(-0.1..0.1),
                phi_rad: rng.random_range(0.0..std::f64::consts::PI),
            });
            for _ in 1..count {
                let magnitude = rng.random_range(0.05..0.25);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                es.push(Ellipse {
                    value: sign * magnitude,
                    a: rng.random_range(0.05..0.3),
                    b: rng.random_range(0.05..0.3),
                    x0: rng.random_range(-0.45..0.45),
                    y0: rng.random_range(-0.45..0.45),
                    phi_rad: rng.random_range(0.0..std::f64::consts::PI),
                });
            }
            es
        }
    };
    Ok(ImageGrid {
        values: render_ellipses(rows, cols, &ellipses),
    })
}

/// What a raw file stores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawKind {
    Image,
    Sinogram,
}

impl RawKind {
    fn tag(self) -> &'static str {
        match self {
            RawKind::Image => "image",
            RawKind::Sinogram => "sinogram",
        }
    }
}

/// Header of a raw f32 file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawHeader {
    pub kind: RawKind,
    pub rows: usize,
    pub cols: usize,
    /// Pixel size for images, detector pitch for sinograms.
    pub spacing_mm: f64,
    pub dose: Option<String>,
}

const RAW_MAGIC: &str = "rawf32 1";

fn parse_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset,
        message: message.into(),
    }
}

/// Write a header plus row-major little-endian f32 payload.
pub fn save_raw(values: &Array2<f64>, header: &RawHeader, path: &Path) -> Result<()> {
    if values.dim() != (header.rows, header.cols) {
        return Err(Error::input(format!(
            "raw header says {}x{} but data is {:?}",
            header.rows,
            header.cols,
            values.dim()
        )));
    }
    if !(header.spacing_mm > 0.0) || !header.spacing_mm.is_finite() {
        return Err(Error::input(format!(
            "raw spacing must be positive and finite, got {}",
            header.spacing_mm
        )));
    }
    if let Some(dose) = &header.dose {
        if dose.is_empty() || dose.contains(['\n', '\r']) {
            return Err(Error::input("dose tag must be a non-empty single line"));
        }
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::input(format!("refusing to save non-finite value {bad}")));
    }
    let mut out = String::new();
    out.push_str(RAW_MAGIC);
    out.push('\n');
    out.push_str(&format!("kind {}\n", header.kind.tag()));
    out.push_str(&format!("rows {}\n", header.rows));
    out.push_str(&format!("cols {}\n", header.cols));
    out.push_str(&format!("spacing_mm {}\n", header.spacing_mm));
    if let Some(dose) = &header.dose {
        out.push_str(&format!("dose {dose}\n"));
    }
    out.push_str("data\n");
    let mut bytes = out.into_bytes();
    bytes.reserve(values.len() * 4);
    for v in values.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a raw f32 file back; errors carry the byte offset of the problem.
pub fn load_raw(path: &Path) -> Result<(Array2<f64>, RawHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;

    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        if *pos >= bytes.len() {
            return Err(parse_err(path, *pos, "unexpected end of file inside header"));
        }
        let start = *pos;
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(path, start, "header line is missing its newline"))?;
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| parse_err(path, start, "header line is not valid utf-8"))?;
        *pos = start + rel + 1;
        Ok((start, line.to_string()))
    };

    let (magic_at, magic) = next_line(&mut pos)?;
    if magic != RAW_MAGIC {
        return Err(parse_err(
            path,
            magic_at,
            format!("expected magic line {RAW_MAGIC:?}, got {magic:?}"),
        ));
    }

    let mut kind: Option<RawKind> = None;
    let mut rows: Option<usize> = None;
    let mut cols: Option<usize> = None;
    let mut spacing: Option<f64> = None;
    let mut dose: Option<String> = None;
    let payload_at;
    loop {
        let (at, line) = next_line(&mut pos)?;
        if line == "data" {
            payload_at = pos;
            break;
        }
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| parse_err(path, at, format!("malformed header line {line:?}")))?;
        let dup = |field: &str| parse_err(path, at, format!("duplicate header field {field}"));
        match key {
            "kind" => {
                if kind.is_some() {
                    return Err(dup("kind"));
                }
                kind = Some(match value {
                    "image" => RawKind::Image,
                    "sinogram" => RawKind::Sinogram,
                    other => {
                        return Err(parse_err(path, at, format!("unknown kind {other:?}")));
                    }
                });
            }
            "rows" | "cols" => {
                let n: usize = value
                    .parse()
                    .map_err(|_| parse_err(path, at, format!("bad {key} count {value:?}")))?;
                if n == 0 {
                    return Err(parse_err(path, at, format!("{key} must be positive")));
                }
                let slot = if key == "rows" { &mut rows } else { &mut cols };
                if slot.is_some() {
                    return Err(dup(key));
                }
                *slot = Some(n);
            }
            "spacing_mm" => {
                if spacing.is_some() {
                    return Err(dup("spacing_mm"));
                }
                let v: f64 = value
                    .parse()
                    .map_err(|_| parse_err(path, at, format!("bad spacing {value:?}")))?;
                if !(v > 0.0) || !v.is_finite() {
                    return Err(parse_err(path, at, format!("spacing must be positive, got {v}")));
                }
                spacing = Some(v);
            }
            "dose" => {
                if dose.is_some() {
                    return Err(dup("dose"));
                }
                dose = Some(value.to_string());
            }
            other => {
                return Err(parse_err(path, at, format!("unknown header field {other:?}")));
            }
        }
    }

    let header = RawHeader {
        kind: kind.ok_or_else(|| parse_err(path, payload_at, "header is missing kind"))?,
        rows: rows.ok_or_else(|| parse_err(path, payload_at, "header is missing rows"))?,
        cols: cols.ok_or_else(|| parse_err(path, payload_at, "header is missing cols"))?,
        spacing_mm: spacing
            .ok_or_else(|| parse_err(path, payload_at, "header is missing spacing_mm"))?,
        dose,
    };

    let expected = header
        .rows
        .checked_mul(header.cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| parse_err(path, payload_at, "image dimensions overflow"))?;
    let payload = &bytes[payload_at..];
    if payload.len() != expected {
        return Err(parse_err(
            path,
            payload_at,
            format!("payload has {} bytes, expected {expected}", payload.len()),
        ));
    }
    let mut values = Array2::zeros((header.rows, header.cols));
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(parse_err(
                path,
                payload_at + 4 * i,
                format!("non-finite sample {v} at index {i}"),
            ));
        }
        values[[i / header.cols, i % header.cols]] = v as f64;
    }
    Ok((values, header))
}

/// Save an image with its pixel size and optional dose tag.
pub fn save_image(
    img: &ImageGrid,
    pixel_size_mm: f64,
    dose: Option<&str>,
    path: &Path,
) -> Result<()> {
    let header = RawHeader {
        kind: RawKind::Image,
        rows: img.rows(),
        cols: img.cols(),
        spacing_mm: pixel_size_mm,
        dose: dose.map(str::to_string),
    };
    save_raw(&img.values, &header, path)
}

/// Load an image file; rejects files tagged as sinograms.
pub fn load_image(path: &Path) -> Result<(ImageGrid, RawHeader)> {
    let (values, header) = load_raw(path)?;
    if header.kind != RawKind::Image {
        return Err(Error::input(format!(
            "{} holds a {}, expected an image",
            path.display(),
            header.kind.tag()
        )));
    }
    Ok((ImageGrid { values }, header))
}

/// Save a sinogram with its detector pitch and optional dose tag.
pub fn save_sinogram(
    sino: &Sinogram,
    detector_pitch_mm: f64,
    dose: Option<&str>,
    path: &Path,
) -> Result<()> {
    let header = RawHeader {
        kind: RawKind::Sinogram,
        rows: sino.n_views(),
        cols: sino.n_detectors(),
        spacing_mm: detector_pitch_mm,
        dose: dose.map(str::to_string),
    };
    save_raw(&sino.values, &header, path)
}

/// Load a sinogram file; rejects files tagged as images.
pub fn load_sinogram(path: &Path) -> Result<(Sinogram, RawHeader)> {
    let (values, header) = load_raw(path)?;
    if header.kind != RawKind::Sinogram {
        return Err(Error::input(format!(
            "{} holds a {}, expected a sinogram",
            path.display(),
            header.kind.tag()
        )));
    }
    Ok((Sinogram { values }, header))
}

/// Linear display window for PNG export; values at or below `lo` map to
/// black, at or above `hi` to white.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplayWindow {
    pub lo: f64,
    pub hi: f64,
}

/// Optional affine rescale applied before windowing, `display = slope * v +
/// intercept`. With attenuation images, `slope = 1000 / mu_water` and
/// `intercept = -1000` gives Hounsfield units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineRescale {
    pub slope: f64,
    pub intercept: f64,
}

/// Export an image as an 8-bit grayscale PNG.
pub fn export_png(
    img: &ImageGrid,
    window: DisplayWindow,
    rescale: Option<AffineRescale>,
    path: &Path,
) -> Result<()> {
    if !(window.hi > window.lo) || !window.lo.is_finite() || !window.hi.is_finite() {
        return Err(Error::input(format!(
            "display window needs finite hi > lo, got [{}, {}]",
            window.lo, window.hi
        )));
    }
    let (rows, cols) = img.values.dim();
    let mut png = image::GrayImage::new(cols as u32, rows as u32);
    for r in 0..rows {
        for c in 0..cols {
            let mut v = img.values[[r, c]];
            if let Some(a) = rescale {
                v = a.slope * v + a.intercept;
            }
            let t = ((v - window.lo) / (window.hi - window.lo)).clamp(0.0, 1.0);
            png.put_pixel(c as u32, r as u32, image::Luma([(t * 255.0).round() as u8]));
        }
    }
    png.save(path)
        .map_err(|e| Error::input(format!("png write to {}: {e}", path.display())))
}

/// A collection of phantoms split into train and test parts, with a
/// labeled flag for every training item.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub items: Vec<(String, ImageGrid)>,
    /// Indices into `items`, in shuffled order.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    /// Parallel to `train`.
    pub labeled: Vec<bool>,
}

impl Dataset {
    pub fn labeled_count(&self) -> usize {
        self.labeled.iter().filter(|&&l| l).count()
    }
}

/// Shuffle items with a seeded generator and split them. The train part
/// takes `ceil(train_fraction * n)` items and the first
/// `ceil(labeled_fraction * |train|)` of those are marked labeled, so a
/// 10% fraction of a 40-item train set labels exactly 4 items.
pub fn split_dataset(
    items: Vec<(String, ImageGrid)>,
    train_fraction: f64,
    labeled_fraction: f64,
    seed: u64,
) -> Result<Dataset> {
    if items.is_empty() {
        return Err(Error::input("cannot split an empty dataset"));
    }
    for frac in [train_fraction, labeled_fraction] {
        if !(0.0..=1.0).contains(&frac) || !frac.is_finite() {
            return Err(Error::input(format!(
                "fractions must lie in [0, 1], got {frac}"
            )));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for (id, _) in &items {
        if !seen.insert(id.as_str()) {
            return Err(Error::input(format!("duplicate dataset id {id:?}")));
        }
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_train = ((train_fraction * items.len() as f64).ceil() as usize).min(items.len());
    let train: Vec<usize> = order[..n_train].to_vec();
    let test: Vec<usize> = order[n_train..].to_vec();
    let n_labeled = ((labeled_fraction * n_train as f64).ceil() as usize).min(n_train);
    let labeled: Vec<bool> = (0..n_train).map(|i| i < n_labeled).collect();
    Ok(Dataset {
        items,
        train,
        test,
        labeled,
    })
}

/// Resolve a path for an item inside a run directory.
pub fn item_path(dir: &Path, id: &str, suffix: &str) -> PathBuf {
    dir.join(format!("{id}.{suffix}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageGrid;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn shepp_logan_known_levels() {
        let img = make_phantom(PhantomKind::SheppLogan, 64, 64, 0).unwrap();
        // Just off-center: inside the outer shell and the interior, 1.0 - 0.8.
        assert!((img.values[[31, 31]] - 0.2).abs() < 1e-12);
        // Corner is outside the head outline.
        assert_eq!(img.values[[0, 0]], 0.0);
        // Top interior ellipse adds 0.1: y = 0.35 maps to row ~ 20.
        let r = (32.0 - 0.35 * 32.0 - 0.5f64).round() as usize;
        assert!((img.values[[r, 31]] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn shepp_logan_ignores_seed() {
        let a = make_phantom(PhantomKind::SheppLogan, 32, 32, 1).unwrap();
        let b = make_phantom(PhantomKind::SheppLogan, 32, 32, 99).unwrap();
        assert_eq!(a.values, b.values);
    }

    #[test]
    fn phantoms_stay_in_unit_range() {
        for seed in 0..8 {
            for kind in [PhantomKind::SheppLogan, PhantomKind::RandomEllipses] {
                let img = make_phantom(kind, 32, 32, seed).unwrap();
                assert!(img
                    .values
                    .iter()
                    .all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
            }
        }
    }

    #[test]
    fn random_phantom_deterministic_per_seed() {
        let a = make_phantom(PhantomKind::RandomEllipses, 32, 32, 7).unwrap();
        let b = make_phantom(PhantomKind::RandomEllipses, 32, 32, 7).unwrap();
        let c = make_phantom(PhantomKind::RandomEllipses, 32, 32, 8).unwrap();
        assert_eq!(a.values, b.values);
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn random_phantom_has_body() {
        // The body ellipse should occupy a sizable part of the field.
        for seed in 0..4 {
            let img = make_phantom(PhantomKind::RandomEllipses, 64, 64, seed).unwrap();
            let occupied = img.values.iter().filter(|&&v| v > 0.0).count();
            assert!(
                occupied > 64 * 64 / 4,
                "seed {seed}: only {occupied} non-zero pixels"
            );
        }
    }

    #[test]
    fn phantom_rejects_tiny_grids() {
        assert!(make_phantom(PhantomKind::SheppLogan, 15, 32, 0).is_err());
        assert!(make_phantom(PhantomKind::RandomEllipses, 32, 15, 0).is_err());
    }

    #[test]
    fn image_round_trip_preserves_f32_values() {
        let dir = tmpdir();
        let path = dir.path().join("img.raw");
        let img = make_phantom(PhantomKind::RandomEllipses, 32, 32, 3).unwrap();
        save_image(&img, 2.5, Some("10%"), &path).unwrap();
        let (back, header) = load_image(&path).unwrap();
        assert_eq!(header.rows, 32);
        assert_eq!(header.cols, 32);
        assert_eq!(header.spacing_mm, 2.5);
        assert_eq!(header.dose.as_deref(), Some("10%"));
        for (a, b) in img.values.iter().zip(back.values.iter()) {
            assert_eq!(*a as f32 as f64, *b);
        }
    }

    #[test]
    fn sinogram_round_trip_and_kind_check() {
        let dir = tmpdir();
        let path = dir.path().join("sino.raw");
        let sino = Sinogram {
            values: Array2::from_shape_fn((6, 5), |(v, t)| (v * 5 + t) as f64 / 10.0),
        };
        save_sinogram(&sino, 1.2, None, &path).unwrap();
        let (back, header) = load_sinogram(&path).unwrap();
        assert_eq!(header.kind, RawKind::Sinogram);
        assert_eq!(back.values.dim(), (6, 5));
        assert!(load_image(&path).is_err());
    }

    #[test]
    fn load_rejects_bad_magic_at_offset_zero() {
        let dir = tmpdir();
        let path = dir.path().join("bad.raw");
        fs::write(&path, b"rawf64 1\ndata\n").unwrap();
        match load_raw(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_unknown_field_with_line_offset() {
        let dir = tmpdir();
        let path = dir.path().join("bad.raw");
        let header = "rawf32 1\nkind image\nbogus 3\ndata\n";
        fs::write(&path, header).unwrap();
        match load_raw(&path) {
            Err(Error::Parse { offset, message, .. }) => {
                assert_eq!(offset, "rawf32 1\nkind image\n".len());
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_short_payload() {
        let dir = tmpdir();
        let path = dir.path().join("short.raw");
        let mut bytes =
            b"rawf32 1\nkind image\nrows 2\ncols 2\nspacing_mm 1\ndata\n".to_vec();
        let payload_at = bytes.len();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        match load_raw(&path) {
            Err(Error::Parse { offset, message, .. }) => {
                assert_eq!(offset, payload_at);
                assert!(message.contains("payload"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn load_rejects_non_finite_sample_at_its_offset() {
        let dir = tmpdir();
        let path = dir.path().join("nan.raw");
        let mut bytes =
            b"rawf32 1\nkind image\nrows 1\ncols 2\nspacing_mm 1\ndata\n".to_vec();
        let payload_at = bytes.len();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        match load_raw(&path) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, payload_at + 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn save_rejects_non_finite_values() {
        let dir = tmpdir();
        let img = ImageGrid {
            values: Array2::from_elem((16, 16), f64::NAN),
        };
        assert!(save_image(&img, 1.0, None, &dir.path().join("nan.raw")).is_err());
    }

    #[test]
    fn png_export_applies_window_and_rescale() {
        let dir = tmpdir();
        let path = dir.path().join("out.png");
        let mut values = Array2::zeros((16, 16));
        values[[0, 0]] = 0.02; // water-equivalent level
        values[[0, 1]] = 1.0;
        values[[0, 2]] = -5.0;
        let img = ImageGrid { values };
        // 0.02 -> 0 HU, which is the middle of a [-100, 100] window.
        let rescale = AffineRescale {
            slope: 1000.0 / 0.02,
            intercept: -1000.0,
        };
        export_png(
            &img,
            DisplayWindow { lo: -100.0, hi: 100.0 },
            Some(rescale),
            &path,
        )
        .unwrap();
        let png = image::open(&path).unwrap().to_luma8();
        assert_eq!(png.dimensions(), (16, 16));
        assert_eq!(png.get_pixel(0, 0).0[0], 128);
        assert_eq!(png.get_pixel(1, 0).0[0], 255);
        assert_eq!(png.get_pixel(2, 0).0[0], 0);
    }

    #[test]
    fn png_rejects_degenerate_window() {
        let dir = tmpdir();
        let img = ImageGrid {
            values: Array2::zeros((16, 16)),
        };
        let r = export_png(
            &img,
            DisplayWindow { lo: 1.0, hi: 1.0 },
            None,
            &dir.path().join("w.png"),
        );
        assert!(r.is_err());
    }

    fn toy_items(n: usize) -> Vec<(String, ImageGrid)> {
        (0..n)
            .map(|i| {
                (
                    format!("item{i:03}"),
                    ImageGrid {
                        values: Array2::from_elem((16, 16), i as f64),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn split_counts_follow_ceiling_rule() {
        let ds = split_dataset(toy_items(40), 1.0, 0.1, 0).unwrap();
        assert_eq!(ds.train.len(), 40);
        assert_eq!(ds.test.len(), 0);
        assert_eq!(ds.labeled_count(), 4);

        let ds = split_dataset(toy_items(25), 0.8, 0.3, 0).unwrap();
        assert_eq!(ds.train.len(), 20);
        assert_eq!(ds.test.len(), 5);
        assert_eq!(ds.labeled_count(), 6);
    }

    #[test]
    fn split_is_a_seeded_permutation() {
        let ds = split_dataset(toy_items(13), 0.6, 0.5, 42).unwrap();
        let mut all: Vec<usize> = ds.train.iter().chain(ds.test.iter()).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..13).collect::<Vec<_>>());
        assert_eq!(ds.labeled.len(), ds.train.len());

        let again = split_dataset(toy_items(13), 0.6, 0.5, 42).unwrap();
        assert_eq!(ds.train, again.train);
        assert_eq!(ds.test, again.test);

        let other = split_dataset(toy_items(13), 0.6, 0.5, 43).unwrap();
        assert_ne!(ds.train, other.train);
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(split_dataset(vec![], 0.5, 0.5, 0).is_err());
        assert!(split_dataset(toy_items(4), 1.5, 0.5, 0).is_err());
        assert!(split_dataset(toy_items(4), 0.5, -0.1, 0).is_err());
        let mut dup = toy_items(3);
        dup[2].0 = "item000".to_string();
        assert!(split_dataset(dup, 0.5, 0.5, 0).is_err());
    }
}
