//! Slide rasters: in-memory or file-backed 8-bit RGB planes with
//! magnification metadata, plus the deterministic synthetic slide generator
//! used as the test substrate.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Rgb = [u8; 3];

/// Sidecar record stored next to a serialized slide as `<file>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideMetadata {
    pub slide_id: String,
    pub width_px: u32,
    pub height_px: u32,
    pub base_magnification: f64,
}

enum PixelSource {
    Memory(Vec<u8>),
    RawFile { path: PathBuf, file: Mutex<File> },
}

/// Row-major 8-bit RGB raster, no alpha. Cheap to clone; read-only after
/// construction and safe to share between threads.
#[derive(Clone)]
pub struct SlideRaster {
    meta: SlideMetadata,
    source: Arc<PixelSource>,
}

impl std::fmt::Debug for SlideRaster {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let backing = match &*self.source {
            PixelSource::Memory(_) => "memory".to_string(),
            PixelSource::RawFile { path, .. } => path.display().to_string(),
        };
        f.debug_struct("SlideRaster")
            .field("meta", &self.meta)
            .field("backing", &backing)
            .finish()
    }
}

fn check_meta(meta: &SlideMetadata) -> Result<()> {
    if meta.width_px == 0 || meta.height_px == 0 {
        return Err(Error::InvalidSpec(format!(
            "slide {} has empty dimensions {}x{}",
            meta.slide_id, meta.width_px, meta.height_px
        )));
    }
    if !(meta.base_magnification > 0.0 && meta.base_magnification.is_finite()) {
        return Err(Error::InvalidSpec(format!(
            "base magnification must be positive, got {}",
            meta.base_magnification
        )));
    }
    Ok(())
}

impl SlideRaster {
    pub fn from_rgb(meta: SlideMetadata, data: Vec<u8>) -> Result<Self> {
        check_meta(&meta)?;
        let expected = meta.width_px as usize * meta.height_px as usize * 3;
        if data.len() != expected {
            return Err(Error::shape("SlideRaster buffer", expected, data.len()));
        }
        Ok(Self {
            meta,
            source: Arc::new(PixelSource::Memory(data)),
        })
    }

    /// A raster filled with one colour.
    pub fn solid(meta: SlideMetadata, color: Rgb) -> Result<Self> {
        let n = meta.width_px as usize * meta.height_px as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&color);
        }
        Self::from_rgb(meta, data)
    }

    pub fn metadata(&self) -> &SlideMetadata {
        &self.meta
    }

    pub fn slide_id(&self) -> &str {
        &self.meta.slide_id
    }

    pub fn width_px(&self) -> u32 {
        self.meta.width_px
    }

    pub fn height_px(&self) -> u32 {
        self.meta.height_px
    }

    pub fn base_magnification(&self) -> f64 {
        self.meta.base_magnification
    }

    /// The whole pixel buffer, when held in memory.
    pub fn as_bytes(&self) -> Option<&[u8]> {
        match &*self.source {
            PixelSource::Memory(d) => Some(d),
            PixelSource::RawFile { .. } => None,
        }
    }

    /// Reads a `w x h` window at `(x, y)` as row-major RGB bytes. The window
    /// must lie fully inside the slide; there is no clamping.
    pub fn read_window(&self, x: u32, y: u32, w: u32, h: u32) -> Result<Vec<u8>> {
        let (width, height) = (self.meta.width_px, self.meta.height_px);
        let oob = || Error::OutOfBounds {
            x: x as u64,
            y: y as u64,
            w: w as u64,
            h: h as u64,
            width,
            height,
        };
        if w == 0 || h == 0 {
            return Err(oob());
        }
        if x as u64 + w as u64 > width as u64 || y as u64 + h as u64 > height as u64 {
            return Err(oob());
        }
        let stride = width as usize * 3;
        let row_len = w as usize * 3;
        let mut out = vec![0u8; row_len * h as usize];
        match &*self.source {
            PixelSource::Memory(data) => {
                for (r, dst) in out.chunks_exact_mut(row_len).enumerate() {
                    let start = (y as usize + r) * stride + x as usize * 3;
                    dst.copy_from_slice(&data[start..start + row_len]);
                }
            }
            PixelSource::RawFile { file, .. } => {
                let mut f = file.lock().unwrap_or_else(|p| p.into_inner());
                for (r, dst) in out.chunks_exact_mut(row_len).enumerate() {
                    let start = (y as u64 + r as u64) * stride as u64 + x as u64 * 3;
                    f.seek(SeekFrom::Start(start))?;
                    f.read_exact(dst)?;
                }
            }
        }
        Ok(out)
    }

    pub fn pixel(&self, x: u32, y: u32) -> Result<Rgb> {
        let b = self.read_window(x, y, 1, 1)?;
        Ok([b[0], b[1], b[2]])
    }

    fn write_sidecar(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(sidecar_path(path))?);
        serde_json::to_writer_pretty(f, &self.meta)?;
        Ok(())
    }

    /// Writes a PNG plus a `<path>.json` metadata sidecar.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut enc = png::Encoder::new(
            BufWriter::new(File::create(path)?),
            self.meta.width_px,
            self.meta.height_px,
        );
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(png_err)?;
        let mut stream = writer.stream_writer().map_err(png_err)?;
        let band = 256u32;
        let mut y = 0;
        while y < self.meta.height_px {
            let h = band.min(self.meta.height_px - y);
            let rows = self.read_window(0, y, self.meta.width_px, h)?;
            std::io::Write::write_all(&mut stream, &rows)?;
            y += h;
        }
        stream.finish().map_err(png_err)?;
        self.write_sidecar(path)
    }

    /// Loads a PNG (RGB or RGBA, 8-bit) using its metadata sidecar.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta = read_sidecar(path)?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(png_err)?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("png too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        if info.width != meta.width_px || info.height != meta.height_px {
            return Err(Error::Format(format!(
                "png is {}x{}, sidecar says {}x{}",
                info.width, info.height, meta.width_px, meta.height_px
            )));
        }
        buf.truncate(info.buffer_size());
        let data = match info.color_type {
            png::ColorType::Rgb => buf,
            png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            png::ColorType::Indexed => return Err(Error::Format("unexpanded indexed png".into())),
        };
        Self::from_rgb(meta, data)
    }

    /// Writes raw row-major RGB bytes plus a `<path>.json` metadata sidecar.
    pub fn save_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = BufWriter::new(File::create(path)?);
        let band = 256u32;
        let mut y = 0;
        while y < self.meta.height_px {
            let h = band.min(self.meta.height_px - y);
            std::io::Write::write_all(&mut f, &self.read_window(0, y, self.meta.width_px, h)?)?;
            y += h;
        }
        std::io::Write::flush(&mut f)?;
        self.write_sidecar(path)
    }

    /// Opens a raw RGB file without loading it; windows are read on demand.
    pub fn open_raw(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta = read_sidecar(path)?;
        check_meta(&meta)?;
        let file = File::open(path)?;
        let expected = meta.width_px as u64 * meta.height_px as u64 * 3;
        let len = file.metadata()?.len();
        if len != expected {
            return Err(Error::Format(format!(
                "raw slide {} is {len} bytes, sidecar implies {expected}",
                path.display()
            )));
        }
        Ok(Self {
            meta,
            source: Arc::new(PixelSource::RawFile {
                path: path.to_path_buf(),
                file: Mutex::new(file),
            }),
        })
    }

    /// Opens `.png` via [`Self::load_png`] and anything else as raw RGB.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("png") => Self::load_png(path),
            _ => Self::open_raw(path),
        }
    }
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("png: {e}"))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_sidecar(path: &Path) -> Result<SlideMetadata> {
    let f = File::open(sidecar_path(path))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}

/// An axis-aligned elliptical tissue blob. A pixel belongs to the blob when
/// its centre lies inside the ellipse.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Blob {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    /// Pixel rows/columns that can contain blob pixels, clipped to the slide.
    fn bounds(&self, width: u32, height: u32) -> (u32, u32, u32, u32) {
        let clip = |v: f64, hi: u32| v.max(0.0).min(hi as f64) as u32;
        (
            clip((self.cx - self.rx).floor() - 1.0, width),
            clip((self.cx + self.rx).ceil() + 1.0, width),
            clip((self.cy - self.ry).floor() - 1.0, height),
            clip((self.cy + self.ry).ceil() + 1.0, height),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlideSpec {
    pub slide_id: String,
    pub seed: u64,
    pub width_px: u32,
    pub height_px: u32,
    pub blob_count: u32,
    /// Inclusive `(min, max)` radius range for both ellipse semi-axes.
    pub blob_radius_px: (u32, u32),
    pub tissue_color: Rgb,
    pub background_color: Rgb,
    pub base_magnification: f64,
}

/// H&E-like pink for tissue and near-white glass.
pub const DEFAULT_TISSUE: Rgb = [214, 120, 186];
pub const DEFAULT_BACKGROUND: Rgb = [242, 242, 242];

impl SyntheticSlideSpec {
    pub fn new(seed: u64, width_px: u32, height_px: u32, blob_count: u32) -> Self {
        Self {
            slide_id: format!("synthetic-{seed}"),
            seed,
            width_px,
            height_px,
            blob_count,
            blob_radius_px: (256, 1536),
            tissue_color: DEFAULT_TISSUE,
            background_color: DEFAULT_BACKGROUND,
            base_magnification: 40.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width_px < 512 || self.height_px < 512 {
            return Err(Error::InvalidSpec(format!(
                "synthetic slide must be at least 512x512, got {}x{}",
                self.width_px, self.height_px
            )));
        }
        let (lo, hi) = self.blob_radius_px;
        if lo == 0 || lo > hi {
            return Err(Error::InvalidSpec(format!("bad blob radius range {lo}..={hi}")));
        }
        if !(self.base_magnification > 0.0) {
            return Err(Error::InvalidSpec("base magnification must be positive".into()));
        }
        Ok(())
    }

    /// The blob geometry this spec paints; a pure function of the spec.
    pub fn blobs(&self) -> Vec<Blob> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = self.blob_radius_px;
        (0..self.blob_count)
            .map(|_| Blob {
                cx: rng.random_range(0.0..self.width_px as f64),
                cy: rng.random_range(0.0..self.height_px as f64),
                rx: rng.random_range(lo..=hi) as f64,
                ry: rng.random_range(lo..=hi) as f64,
            })
            .collect()
    }

    pub fn metadata(&self) -> SlideMetadata {
        SlideMetadata {
            slide_id: self.slide_id.clone(),
            width_px: self.width_px,
            height_px: self.height_px,
            base_magnification: self.base_magnification,
        }
    }
}

/// Paints `blob_count` elliptical tissue blobs over background.
pub fn generate_synthetic_slide(spec: &SyntheticSlideSpec) -> Result<SlideRaster> {
    spec.validate()?;
    paint_blobs(spec.metadata(), &spec.blobs(), spec.tissue_color, spec.background_color)
}

/// Paints arbitrary blobs; used for hand-placed fixtures.
pub fn paint_blobs(meta: SlideMetadata, blobs: &[Blob], tissue: Rgb, background: Rgb) -> Result<SlideRaster> {
    check_meta(&meta)?;
    let (w, h) = (meta.width_px, meta.height_px);
    let mut data = Vec::with_capacity(w as usize * h as usize * 3);
    for _ in 0..w as usize * h as usize {
        data.extend_from_slice(&background);
    }
    let stride = w as usize * 3;
    for blob in blobs {
        let (x0, x1, y0, y1) = blob.bounds(w, h);
        for y in y0..y1 {
            let row = &mut data[y as usize * stride..(y as usize + 1) * stride];
            for x in x0..x1 {
                if blob.contains(x, y) {
                    row[x as usize * 3..x as usize * 3 + 3].copy_from_slice(&tissue);
                }
            }
        }
    }
    SlideRaster::from_rgb(meta, data)
}
