//! Spectral cube I/O, spectral response functions, RGB simulation, synthetic
//! scene generation, dataset manifests, and augmentation.
//!
//! Cube files (`.hsic`) are little-endian binary: magic `HSIC`, u16 version,
//! u32 height/width/bands, `bands` float32 wavelengths in strictly increasing
//! order, then height*width*bands float32 samples stored band-major (each
//! band's image contiguous). In memory, cubes are kept `[H, W, B]` row-major
//! so they convert to tensors without copying work; the layout transposition
//! happens at the file boundary.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::quantize_f32;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const CUBE_VERSION: u16 = 1;

// ── Cubes ───────────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    /// Strictly increasing, one per band.
    pub wavelengths: Vec<f64>,
    /// `[H, W, B]` row-major.
    pub data: Vec<f64>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, wavelengths: Vec<f64>, data: Vec<f64>) -> Result<HsiCube> {
        if height == 0 || width == 0 || wavelengths.is_empty() {
            return Err(Error::invalid("cube", "empty dimensions"));
        }
        if !wavelengths.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::invalid("cube", "wavelengths must be strictly increasing"));
        }
        if data.len() != height * width * wavelengths.len() {
            return Err(Error::invalid(
                "cube",
                format!(
                    "data length {} does not match {}x{}x{}",
                    data.len(),
                    height,
                    width,
                    wavelengths.len()
                ),
            ));
        }
        Ok(HsiCube {
            height,
            width,
            wavelengths,
            data,
        })
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[self.height, self.width, self.bands()])
            .expect("cube invariants guarantee the shape")
    }

    pub fn from_tensor(t: &Tensor, wavelengths: Vec<f64>) -> Result<HsiCube> {
        let shape = t.shape();
        if shape.len() != 3 || shape[2] != wavelengths.len() {
            return Err(Error::invalid(
                "cube",
                format!("tensor {shape:?} does not carry {} bands", wavelengths.len()),
            ));
        }
        HsiCube::new(shape[0], shape[1], wavelengths, t.data().to_vec())
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Writes a cube file. Values are rounded to float32 by the format.
pub fn write_cube(path: &Path, cube: &HsiCube) -> Result<()> {
    let (h, w, b) = (cube.height, cube.width, cube.bands());
    let mut buf = Vec::with_capacity(4 + 2 + 12 + 4 * b + 4 * h * w * b);
    buf.extend_from_slice(CUBE_MAGIC);
    buf.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(b as u32).to_le_bytes());
    for &wl in &cube.wavelengths {
        buf.extend_from_slice(&(wl as f32).to_le_bytes());
    }
    // Band-major on disk: each band's image is contiguous.
    for band in 0..b {
        for pix in 0..h * w {
            buf.extend_from_slice(&(cube.data[pix * b + band] as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads and validates a cube file.
pub fn read_cube(path: &Path) -> Result<HsiCube> {
    let bytes = fs::read(path)?;
    let take = |off: usize, len: usize| -> Result<&[u8]> {
        bytes
            .get(off..off + len)
            .ok_or_else(|| format_err(path, "file truncated"))
    };
    if take(0, 4)? != CUBE_MAGIC {
        return Err(format_err(path, "bad magic; not a cube file"));
    }
    let version = u16::from_le_bytes(take(4, 2)?.try_into().unwrap());
    if version != CUBE_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let read_u32 =
        |off: usize| -> Result<u32> { Ok(u32::from_le_bytes(take(off, 4)?.try_into().unwrap())) };
    let h = read_u32(6)? as usize;
    let w = read_u32(10)? as usize;
    let b = read_u32(14)? as usize;
    if h == 0 || w == 0 || b == 0 {
        return Err(format_err(path, "zero dimension in header"));
    }
    let need = 18 + 4 * b + 4 * h * w * b;
    if bytes.len() != need {
        return Err(format_err(
            path,
            format!("expected {need} bytes for {h}x{w}x{b}, found {}", bytes.len()),
        ));
    }
    let f32_at = |off: usize| -> f64 {
        f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64
    };
    let wavelengths: Vec<f64> = (0..b).map(|i| f32_at(18 + 4 * i)).collect();
    if !wavelengths.windows(2).all(|p| p[0] < p[1]) {
        return Err(format_err(path, "wavelengths not strictly increasing"));
    }
    let base = 18 + 4 * b;
    let mut data = vec![0.0f64; h * w * b];
    for band in 0..b {
        for pix in 0..h * w {
            data[pix * b + band] = f32_at(base + 4 * (band * h * w + pix));
        }
    }
    HsiCube::new(h, w, wavelengths, data)
}

// ── Spectral response functions ─────────────────────────────────────────────

/// One tabulated response sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrfSample {
    pub wavelength: f64,
    pub r: f64,
    pub g: f64,
    pub b: f64,
}

/// A camera's spectral response, tabulated over wavelength. Responses are
/// linearly interpolated between samples and zero outside the table.
#[derive(Clone, Debug, PartialEq)]
pub struct Srf {
    pub samples: Vec<SrfSample>,
}

impl Srf {
    pub fn new(samples: Vec<SrfSample>) -> Result<Srf> {
        if samples.is_empty() {
            return Err(Error::invalid("srf", "no samples"));
        }
        if !samples.windows(2).all(|p| p[0].wavelength < p[1].wavelength) {
            return Err(Error::invalid("srf", "wavelengths must be strictly increasing"));
        }
        Ok(Srf { samples })
    }

    /// Linear interpolation; zero outside the tabulated range.
    pub fn response_at(&self, wavelength: f64) -> [f64; 3] {
        let s = &self.samples;
        if wavelength < s[0].wavelength || wavelength > s[s.len() - 1].wavelength {
            return [0.0; 3];
        }
        let idx = s.partition_point(|p| p.wavelength <= wavelength);
        if idx == 0 {
            return [s[0].r, s[0].g, s[0].b];
        }
        if idx == s.len() {
            let last = &s[s.len() - 1];
            return [last.r, last.g, last.b];
        }
        let (lo, hi) = (&s[idx - 1], &s[idx]);
        let t = (wavelength - lo.wavelength) / (hi.wavelength - lo.wavelength);
        [
            lo.r + t * (hi.r - lo.r),
            lo.g + t * (hi.g - lo.g),
            lo.b + t * (hi.b - lo.b),
        ]
    }
}

/// Built-in response: Gaussian channels peaking at 610 nm (red), 540 nm
/// (green) and 470 nm (blue), each with a 35 nm standard deviation and unit
/// peak, tabulated at 1 nm from 380 to 730 nm.
pub fn default_srf() -> Srf {
    let gauss = |lambda: f64, mu: f64| (-((lambda - mu) * (lambda - mu)) / (2.0 * 35.0 * 35.0)).exp();
    let samples = (380..=730)
        .map(|nm| {
            let l = nm as f64;
            SrfSample {
                wavelength: l,
                r: gauss(l, 610.0),
                g: gauss(l, 540.0),
                b: gauss(l, 470.0),
            }
        })
        .collect();
    Srf::new(samples).expect("built-in table is valid")
}

/// Parses the text format: header `# srf v1`, then `wavelength r g b` per
/// line. Blank lines and further `#` comments are ignored.
pub fn read_srf(path: &Path) -> Result<Srf> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = loop {
        match lines.next() {
            Some(l) if l.trim().is_empty() => continue,
            Some(l) => break l.trim().to_string(),
            None => return Err(format_err(path, "empty file")),
        }
    };
    if header != "# srf v1" {
        return Err(format_err(path, format!("expected header '# srf v1', found '{header}'")));
    }
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(format_err(
                path,
                format!("line {}: expected 'wavelength r g b', found '{line}'", lineno + 2),
            ));
        }
        let mut vals = [0.0f64; 4];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f
                .parse()
                .map_err(|_| format_err(path, format!("line {}: bad number '{f}'", lineno + 2)))?;
        }
        samples.push(SrfSample {
            wavelength: vals[0],
            r: vals[1],
            g: vals[2],
            b: vals[3],
        });
    }
    Srf::new(samples).map_err(|e| format_err(path, e.to_string()))
}

/// Writes the text format read by [`read_srf`].
pub fn write_srf(path: &Path, srf: &Srf) -> Result<()> {
    let mut out = String::from("# srf v1\n");
    for s in &srf.samples {
        out.push_str(&format!("{} {} {} {}\n", s.wavelength, s.r, s.g, s.b));
    }
    fs::write(path, out)?;
    Ok(())
}

// ── RGB simulation ──────────────────────────────────────────────────────────

/// Raw camera responses `[H, W, 3]` in (r, g, b) channel order: per pixel,
/// each channel is the response-weighted sum over bands. Linear in the cube.
pub fn hsi_to_rgb_raw(cube: &HsiCube, srf: &Srf) -> Tensor {
    let b = cube.bands();
    let weights: Vec<[f64; 3]> = cube.wavelengths.iter().map(|&wl| srf.response_at(wl)).collect();
    let mut out = vec![0.0f64; cube.height * cube.width * 3];
    for pix in 0..cube.height * cube.width {
        let mut acc = [0.0f64; 3];
        for band in 0..b {
            let v = cube.data[pix * b + band];
            for c in 0..3 {
                acc[c] += weights[band][c] * v;
            }
        }
        out[pix * 3..pix * 3 + 3].copy_from_slice(&acc);
    }
    Tensor::from_vec(out, &[cube.height, cube.width, 3]).expect("shape matches construction")
}

/// Simulated RGB image `[H, W, 3]` in (r, g, b) order, normalized to `[0, 1]`
/// by the image maximum. An all-zero response stays all-zero.
pub fn hsi_to_rgb(cube: &HsiCube, srf: &Srf) -> Tensor {
    let raw = hsi_to_rgb_raw(cube, srf);
    let max = raw.data().iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return raw;
    }
    raw.affine(1.0 / max, 0.0).expect("scaling preserves shape")
}

/// Stores an (r, g, b) image as a cube. Band order follows the format's
/// ascending-wavelength rule, so the channels are stored blue (470 nm),
/// green (540 nm), red (610 nm).
pub fn rgb_image_to_cube(rgb: &Tensor) -> Result<HsiCube> {
    let shape = rgb.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::invalid("cube", format!("expected [H, W, 3], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    let d = rgb.data();
    let mut data = vec![0.0f64; h * w * 3];
    for pix in 0..h * w {
        data[pix * 3] = d[pix * 3 + 2]; // blue
        data[pix * 3 + 1] = d[pix * 3 + 1]; // green
        data[pix * 3 + 2] = d[pix * 3]; // red
    }
    HsiCube::new(h, w, vec![470.0, 540.0, 610.0], data)
}

// ── Synthetic scenes ────────────────────────────────────────────────────────

/// Evenly spaced wavelengths over 400..700 nm (550 nm for a single band).
pub fn default_wavelengths(bands: usize) -> Vec<f64> {
    if bands == 1 {
        return vec![550.0];
    }
    (0..bands)
        .map(|i| 400.0 + 300.0 * i as f64 / (bands - 1) as f64)
        .collect()
}

/// Generates a synthetic scene: a handful of materials with smooth Gaussian
/// mixture spectra, blended across the image by smooth random fields, clamped
/// to `[0.05, 1]`. Values are rounded to float32 so files round-trip
/// bit-exactly. Deterministic in the seed.
pub fn gen_synthetic_hsi(height: usize, width: usize, bands: usize, seed: u64) -> Result<HsiCube> {
    if height == 0 || width == 0 || bands == 0 {
        return Err(Error::invalid("gen", "dimensions must be positive"));
    }
    let mut rng = SplitMix64::new(seed);
    let wavelengths = default_wavelengths(bands);

    let n_mat = 3 + rng.below(4); // 3..=6 materials
    let mut spectra: Vec<Vec<f64>> = Vec::with_capacity(n_mat);
    for _ in 0..n_mat {
        let base = rng.uniform(0.05, 0.3);
        let n_gauss = 2 + rng.below(3); // 2..=4 bumps
        let bumps: Vec<(f64, f64, f64)> = (0..n_gauss)
            .map(|_| {
                (
                    rng.uniform(0.2, 1.0),
                    rng.uniform(400.0, 700.0),
                    rng.uniform(20.0, 80.0),
                )
            })
            .collect();
        spectra.push(
            wavelengths
                .iter()
                .map(|&wl| {
                    base + bumps
                        .iter()
                        .map(|&(a, c, sd)| a * (-((wl - c) * (wl - c)) / (2.0 * sd * sd)).exp())
                        .sum::<f64>()
                })
                .collect(),
        );
    }

    // Smooth mixing fields: a coarse random grid per material, bilinearly
    // upsampled, then softmaxed across materials with a sharpening
    // temperature so the scene forms soft patches.
    const GRID: usize = 4;
    const TEMPERATURE: f64 = 0.15;
    let grids: Vec<Vec<f64>> = (0..n_mat)
        .map(|_| (0..GRID * GRID).map(|_| rng.uniform(0.0, 1.0)).collect())
        .collect();
    let lerp_coord = |i: usize, n: usize| -> (usize, usize, f64) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (GRID - 1) as f64 / (n - 1) as f64;
        let lo = (pos.floor() as usize).min(GRID - 2);
        (lo, lo + 1, pos - lo as f64)
    };

    let mut data = vec![0.0f64; height * width * bands];
    for y in 0..height {
        let (y0, y1, ty) = lerp_coord(y, height);
        for x in 0..width {
            let (x0, x1, tx) = lerp_coord(x, width);
            let fields: Vec<f64> = grids
                .iter()
                .map(|g| {
                    let top = g[y0 * GRID + x0] + tx * (g[y0 * GRID + x1] - g[y0 * GRID + x0]);
                    let bot = g[y1 * GRID + x0] + tx * (g[y1 * GRID + x1] - g[y1 * GRID + x0]);
                    top + ty * (bot - top)
                })
                .collect();
            let mx = fields.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = fields.iter().map(|&v| ((v - mx) / TEMPERATURE).exp()).collect();
            let norm: f64 = exps.iter().sum();
            let pix = y * width + x;
            for band in 0..bands {
                let mut v = 0.0;
                for (m, spec) in spectra.iter().enumerate() {
                    v += exps[m] / norm * spec[band];
                }
                data[pix * bands + band] = quantize_f32(v.clamp(0.05, 1.0));
            }
        }
    }
    HsiCube::new(height, width, wavelengths, data)
}

// ── Manifests ───────────────────────────────────────────────────────────────

/// Dataset manifest: generation settings plus (hsi, rgb) file name pairs,
/// stored as `manifest.txt` in a dataset directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    /// `default` or the path the responses were loaded from.
    pub srf: String,
    pub pairs: Vec<(String, String)>,
}

pub const MANIFEST_NAME: &str = "manifest.txt";

pub fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let mut out = String::from("# ccnet dataset v1\n");
    out.push_str(&format!("seed {}\n", m.seed));
    out.push_str(&format!("size {}x{}\n", m.height, m.width));
    out.push_str(&format!("bands {}\n", m.bands));
    out.push_str(&format!("srf {}\n", m.srf));
    for (hsi, rgb) in &m.pairs {
        out.push_str(&format!("pair {hsi} {rgb}\n"));
    }
    fs::write(dir.join(MANIFEST_NAME), out)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("# ccnet dataset v1") {
        return Err(format_err(&path, "expected header '# ccnet dataset v1'"));
    }
    let mut seed = None;
    let mut size = None;
    let mut bands = None;
    let mut srf = None;
    let mut pairs = Vec::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (keyword, rest) = line.split_once(' ').unwrap_or((line, ""));
        match keyword {
            "seed" => {
                seed = Some(rest.parse::<u64>().map_err(|_| format_err(&path, "bad seed"))?)
            }
            "size" => {
                let (h, w) = rest
                    .split_once('x')
                    .ok_or_else(|| format_err(&path, "size must be HxW"))?;
                let h = h.parse().map_err(|_| format_err(&path, "bad height"))?;
                let w = w.parse().map_err(|_| format_err(&path, "bad width"))?;
                size = Some((h, w));
            }
            "bands" => {
                bands = Some(rest.parse::<usize>().map_err(|_| format_err(&path, "bad bands"))?)
            }
            "srf" => srf = Some(rest.to_string()),
            "pair" => {
                let (hsi, rgb) = rest
                    .split_once(' ')
                    .ok_or_else(|| format_err(&path, "pair needs two file names"))?;
                pairs.push((hsi.to_string(), rgb.to_string()));
            }
            other => return Err(format_err(&path, format!("unknown manifest line '{other}'"))),
        }
    }
    let (height, width) =
        size.ok_or_else(|| format_err(&path, "missing size"))?;
    Ok(Manifest {
        seed: seed.ok_or_else(|| format_err(&path, "missing seed"))?,
        height,
        width,
        bands: bands.ok_or_else(|| format_err(&path, "missing bands"))?,
        srf: srf.ok_or_else(|| format_err(&path, "missing srf"))?,
        pairs,
    })
}

// ── Augmentation ────────────────────────────────────────────────────────────

/// Applies one of the eight axis-aligned symmetries to `[H, W, C]` data:
/// `op & 3` counterclockwise quarter turns after an optional horizontal flip
/// (`op & 4`). Pure data movement.
pub fn dihedral(x: &Tensor, op: u8) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::invalid("augment", format!("expected rank 3, got {shape:?}")));
    }
    if op >= 8 {
        return Err(Error::invalid("augment", format!("op must be 0..8, got {op}")));
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let rot = (op & 3) as usize;
    let flip = op & 4 != 0;
    let (oh, ow) = if rot % 2 == 0 { (h, w) } else { (w, h) };
    let d = x.data();
    let mut out = vec![0.0f64; d.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            // Invert the rotation to find the source pixel, then the flip.
            let (sy, mut sx) = match rot {
                0 => (oy, ox),
                1 => (ox, w - 1 - oy),
                2 => (h - 1 - oy, w - 1 - ox),
                3 => (h - 1 - ox, oy),
                _ => unreachable!(),
            };
            if flip {
                sx = w - 1 - sx;
            }
            let src = (sy * w + sx) * c;
            let dst = (oy * ow + ox) * c;
            out[dst..dst + c].copy_from_slice(&d[src..src + c]);
        }
    }
    Tensor::from_vec(out, &[oh, ow, c])
}

/// Draws one symmetry and applies it to both cubes of a training pair.
pub fn augment_pair(rgb: &Tensor, hsi: &Tensor, rng: &mut SplitMix64) -> Result<(Tensor, Tensor)> {
    let op = rng.below(8) as u8;
    Ok((dihedral(rgb, op)?, dihedral(hsi, op)?))
}
