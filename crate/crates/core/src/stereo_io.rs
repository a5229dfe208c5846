//! Stereo frames, PNM/PFM files and synthetic sequences with exact ground
//! truth.
//!
//! Shift convention shared with the feature volume and the warp: a left pixel
//! `u` with disparity `d` sees the right pixel `u - d`, so the right view is
//! rendered as `R(x) = L(x + d(x))`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_same_shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct StereoFrame {
    pub left: Tensor,
    pub right: Tensor,
    /// Left-reference disparity in pixels.
    pub gt_disparity: Option<Tensor>,
    /// 1 where the ground truth is usable, 0 elsewhere.
    pub gt_valid: Option<Tensor>,
    pub t: usize,
}

impl StereoFrame {
    pub fn new(left: Tensor, right: Tensor, t: usize) -> Result<Self> {
        if left.rank() != 3 {
            return Err(Error::rank("stereo frame", 3, left.rank()));
        }
        check_same_shape("stereo frame views", left.shape(), right.shape())?;
        Ok(StereoFrame {
            left,
            right,
            gt_disparity: None,
            gt_valid: None,
            t,
        })
    }

    /// Attaches ground truth; without a mask every pixel counts as valid.
    pub fn with_ground_truth(mut self, disparity: Tensor, valid: Option<Tensor>) -> Result<Self> {
        let hw = [self.height(), self.width()];
        check_same_shape("ground-truth disparity", &hw, disparity.shape())?;
        let valid = match valid {
            Some(m) => {
                check_same_shape("ground-truth mask", &hw, m.shape())?;
                m
            }
            None => Tensor::ones(&hw),
        };
        let w = self.width() as f64;
        for (d, m) in disparity.data().iter().zip(valid.data()) {
            if *m > 0.0 && !(*d >= 0.0 && *d < w) {
                return Err(Error::InvalidArgument(format!(
                    "ground-truth disparity {d} outside [0, {w}) at a valid pixel"
                )));
            }
        }
        self.gt_disparity = Some(disparity);
        self.gt_valid = Some(valid);
        Ok(self)
    }

    pub fn height(&self) -> usize {
        self.left.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.left.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.left.shape()[2]
    }
}

/// Channel mean; single-channel input is returned unchanged.
pub fn to_grayscale(image: &Tensor) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::rank("to_grayscale", 3, image.rank()));
    }
    let s = image.shape();
    let c = s[2];
    if c == 1 {
        return Ok(image.clone());
    }
    Ok(Tensor::from_fn(&[s[0], s[1], 1], |i| {
        (0..c).map(|ch| image.get(&[i[0], i[1], ch])).sum::<f64>() / c as f64
    }))
}

// ---------------------------------------------------------------------------
// PNM / PFM

struct Header<'a> {
    tokens: Vec<(usize, &'a str)>,
    payload: usize,
}

/// Reads `count` whitespace-separated header tokens (skipping `#` comments)
/// followed by exactly one whitespace byte.
fn read_header(bytes: &[u8], count: usize) -> Result<Header<'_>> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(count);
    while tokens.len() < count {
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' if !tokens.is_empty() => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        if pos >= bytes.len() {
            return Err(Error::Format {
                offset: pos,
                message: "truncated header".into(),
            });
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let token = std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format {
            offset: start,
            message: "header token is not ASCII".into(),
        })?;
        tokens.push((start, token));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format {
            offset: pos,
            message: "expected a single whitespace byte after the header".into(),
        });
    }
    Ok(Header {
        tokens,
        payload: pos + 1,
    })
}

fn parse_token<T: std::str::FromStr>(token: (usize, &str), what: &str) -> Result<T> {
    token.1.parse().map_err(|_| Error::Format {
        offset: token.0,
        message: format!("invalid {what} {:?}", token.1),
    })
}

fn parse_extent(token: (usize, &str), what: &str) -> Result<usize> {
    let n: usize = parse_token(token, what)?;
    if n == 0 {
        return Err(Error::Format {
            offset: token.0,
            message: format!("{what} must be positive"),
        });
    }
    Ok(n)
}

/// Decodes binary P5 (gray) or P6 (RGB) with maxval up to 255 into `H×W×C`
/// values in [0, 1].
pub fn parse_pnm(bytes: &[u8]) -> Result<Tensor> {
    let header = read_header(bytes, 4)?;
    let t = &header.tokens;
    let channels = match t[0].1 {
        "P5" => 1,
        "P6" => 3,
        other => {
            return Err(Error::Format {
                offset: 0,
                message: format!("unsupported magic {other:?}; expected P5 or P6"),
            })
        }
    };
    let width = parse_extent(t[1], "width")?;
    let height = parse_extent(t[2], "height")?;
    let maxval: u32 = parse_token(t[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format {
            offset: t[3].0,
            message: format!("maxval {maxval} is not an 8-bit range"),
        });
    }
    let n = width * height * channels;
    let payload = &bytes[header.payload..];
    if payload.len() < n {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated payload: expected {n} bytes, found {}", payload.len()),
        });
    }
    let maxval = maxval as f64;
    let data = payload[..n].iter().map(|&b| b as f64 / maxval).collect();
    Tensor::new(&[height, width, channels], data)
}

/// Encodes `H×W×1` as P5 or `H×W×3` as P6, rounding to the 1/255 grid.
pub fn encode_pnm(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 {
        return Err(Error::rank("encode_pnm", 3, image.rank()));
    }
    let s = image.shape();
    let magic = match s[2] {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::shape("encode_pnm channels (1 or 3)", 2, 1, c)),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn read_image_pnm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_pnm(&bytes).map_err(|e| e.in_file(path))
}

pub fn write_image_pnm(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), encode_pnm(image)?).map_err(|e| Error::from(e).in_file(path.as_ref()))
}

/// Decodes a grayscale `Pf` file into `H×W`, top row first.
pub fn parse_pfm(bytes: &[u8]) -> Result<Tensor> {
    let header = read_header(bytes, 4)?;
    let t = &header.tokens;
    match t[0].1 {
        "Pf" => {}
        "PF" => {
            return Err(Error::Format {
                offset: 0,
                message: "color PFM is not supported".into(),
            })
        }
        other => {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad PFM magic {other:?}"),
            })
        }
    }
    let width = parse_extent(t[1], "width")?;
    let height = parse_extent(t[2], "height")?;
    let scale: f64 = parse_token(t[3], "scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Format {
            offset: t[3].0,
            message: "scale must be finite and nonzero".into(),
        });
    }
    let little = scale < 0.0;
    let payload = &bytes[header.payload..];
    let n = width * height;
    if payload.len() < 4 * n {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated payload: expected {} bytes, found {}", 4 * n, payload.len()),
        });
    }
    let mut data = vec![0.0; n];
    for (i, chunk) in payload[..4 * n].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (i / width, i % width);
        data[(height - 1 - row) * width + col] = v as f64;
    }
    Tensor::new(&[height, width], data)
}

/// Little-endian grayscale PFM, rows written bottom-up.
pub fn encode_pfm(disparity: &Tensor) -> Result<Vec<u8>> {
    if disparity.rank() != 2 {
        return Err(Error::rank("encode_pfm", 2, disparity.rank()));
    }
    let (h, w) = (disparity.shape()[0], disparity.shape()[1]);
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for v in (0..h).rev() {
        for u in 0..w {
            out.extend((disparity.get(&[v, u]) as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    parse_pfm(&bytes).map_err(|e| e.in_file(path))
}

pub fn write_pfm(disparity: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), encode_pfm(disparity)?).map_err(|e| Error::from(e).in_file(path.as_ref()))
}

// ---------------------------------------------------------------------------
// Sequence directories

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameFile {
    Left,
    Right,
    Disparity,
}

/// `{dir}/{frame:06}_{left|right|disp}.{pgm|pfm}`
pub fn frame_path(dir: impl AsRef<Path>, frame: usize, kind: FrameFile) -> PathBuf {
    let name = match kind {
        FrameFile::Left => format!("{frame:06}_left.pgm"),
        FrameFile::Right => format!("{frame:06}_right.pgm"),
        FrameFile::Disparity => format!("{frame:06}_disp.pfm"),
    };
    dir.as_ref().join(name)
}

/// Writes both views and, when present, the ground truth with invalid pixels
/// stored as +inf.
pub fn write_frame(dir: impl AsRef<Path>, index: usize, frame: &StereoFrame) -> Result<()> {
    let dir = dir.as_ref();
    write_image_pnm(&frame.left, frame_path(dir, index, FrameFile::Left))?;
    write_image_pnm(&frame.right, frame_path(dir, index, FrameFile::Right))?;
    if let Some(gt) = &frame.gt_disparity {
        let stored = match &frame.gt_valid {
            Some(valid) => gt.zip_map(valid, |d, m| if m > 0.0 { d } else { f64::INFINITY })?,
            None => gt.clone(),
        };
        write_pfm(&stored, frame_path(dir, index, FrameFile::Disparity))?;
    }
    Ok(())
}

/// Splits a stored disparity map into values and a validity mask; non-finite
/// or negative entries are invalid.
pub fn split_ground_truth(stored: &Tensor) -> (Tensor, Tensor) {
    let valid = stored.map(|d| if d.is_finite() && d >= 0.0 { 1.0 } else { 0.0 });
    let values = stored.map(|d| if d.is_finite() && d >= 0.0 { d } else { 0.0 });
    (values, valid)
}

/// Number of consecutive frames `0..n` whose left image exists in `dir`.
pub fn count_frames(dir: impl AsRef<Path>) -> usize {
    (0..).take_while(|&i| frame_path(dir.as_ref(), i, FrameFile::Left).is_file()).count()
}

/// Loads frame `index`, converting color input to grayscale.
pub fn read_frame(dir: impl AsRef<Path>, index: usize) -> Result<StereoFrame> {
    let dir = dir.as_ref();
    let left = to_grayscale(&read_image_pnm(frame_path(dir, index, FrameFile::Left))?)?;
    let right_path = frame_path(dir, index, FrameFile::Right);
    let right = to_grayscale(&read_image_pnm(&right_path)?)?;
    let frame = StereoFrame::new(left, right, index).map_err(|e| e.in_file(&right_path))?;
    let disp_path = frame_path(dir, index, FrameFile::Disparity);
    if !disp_path.is_file() {
        return Ok(frame);
    }
    let (gt, mut valid) = split_ground_truth(&read_pfm(&disp_path)?);
    let w = frame.width() as f64;
    for (m, d) in valid.data_mut().iter_mut().zip(gt.data()) {
        if *d >= w {
            *m = 0.0;
        }
    }
    frame.with_ground_truth(gt, Some(valid)).map_err(|e| e.in_file(&disp_path))
}

/// Loads every frame of a sequence directory; all frames must share extents.
pub fn read_sequence(dir: impl AsRef<Path>) -> Result<Vec<StereoFrame>> {
    let dir = dir.as_ref();
    let n = count_frames(dir);
    if n == 0 {
        return Err(Error::InvalidArgument("no frames found".into()).in_file(frame_path(dir, 0, FrameFile::Left)));
    }
    let mut frames: Vec<StereoFrame> = Vec::with_capacity(n);
    for i in 0..n {
        let frame = read_frame(dir, i)?;
        if let Some(first) = frames.first() {
            if first.left.shape() != frame.left.shape() {
                return Err(Error::InvalidArgument(format!(
                    "frame extents {:?} differ from the first frame's {:?}",
                    frame.left.shape(),
                    first.left.shape()
                ))
                .in_file(frame_path(dir, i, FrameFile::Left)));
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

// ---------------------------------------------------------------------------
// Synthetic scenes

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub disparity: f64,
}

/// Left-reference disparity as a function of `(u, v, t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisparityField {
    Constant { value: f64 },
    /// `base + du*u + dv*v + dt*t`
    Planar { base: f64, du: f64, dv: f64, dt: f64 },
    /// Later regions paint over earlier ones.
    Regions { background: f64, regions: Vec<Region> },
}

impl DisparityField {
    pub fn eval(&self, u: f64, v: f64, t: usize) -> f64 {
        match self {
            DisparityField::Constant { value } => *value,
            DisparityField::Planar { base, du, dv, dt } => base + du * u + dv * v + dt * t as f64,
            DisparityField::Regions { background, regions } => regions
                .iter()
                .rev()
                .find(|r| {
                    v >= r.top as f64
                        && v < (r.top + r.height) as f64
                        && u >= r.left as f64
                        && u < (r.left + r.width) as f64
                })
                .map_or(*background, |r| r.disparity),
        }
    }

    fn at(&self, u: f64, v: f64, t: usize, fractional: bool) -> f64 {
        let d = self.eval(u, v, t).max(0.0);
        if fractional {
            d
        } else {
            d.round()
        }
    }

    /// Rejects negative or too-large disparities over frames `0..num_frames`.
    fn validate(&self, height: usize, width: usize, num_frames: usize) -> Result<()> {
        let limit = width as f64 / 4.0;
        let last = num_frames.saturating_sub(1);
        // Every supported field is affine in t, so the end frames bound it.
        for t in [0, last] {
            for v in 0..height {
                for u in 0..width {
                    let d = self.eval(u as f64, v as f64, t);
                    if !(d >= 0.0 && d < limit) {
                        return Err(Error::InvalidConfig(format!(
                            "disparity {d} at (u={u}, v={v}, t={t}) must lie in [0, W/4 = {limit})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn max_value(&self, height: usize, width: usize, num_frames: usize) -> f64 {
        let last = num_frames.saturating_sub(1);
        let mut m: f64 = 0.0;
        for t in [0, last] {
            for v in 0..height {
                for u in 0..width {
                    m = m.max(self.eval(u as f64, v as f64, t));
                }
            }
        }
        m
    }
}

/// Ground truth and validity for the rendering rule `R(x) = L(x + d(x))`:
/// a left pixel is valid when its match `x = u - d(u)` is inside the image
/// and maps back to it.
fn ground_truth(field: &DisparityField, h: usize, w: usize, t: usize, fractional: bool) -> (Tensor, Tensor) {
    let gt = Tensor::from_fn(&[h, w], |i| field.at(i[1] as f64, i[0] as f64, t, fractional));
    let valid = Tensor::from_fn(&[h, w], |i| {
        let d = gt.get(i);
        let x = i[1] as f64 - d;
        if x < 0.0 {
            return 0.0;
        }
        let back = field.at(x, i[0] as f64, t, fractional);
        let consistent = if fractional { (back - d).abs() < 0.5 } else { back == d };
        if consistent {
            1.0
        } else {
            0.0
        }
    });
    (gt, valid)
}

fn frame_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdsConfig {
    pub height: usize,
    pub width: usize,
    pub disparity: DisparityField,
    /// Probability that a pixel is a white dot.
    pub density: f64,
    pub seed: u64,
    /// Keep non-integer disparities and render with linear interpolation.
    #[serde(default)]
    pub fractional: bool,
}

impl RdsConfig {
    pub fn constant(height: usize, width: usize, disparity: f64, seed: u64) -> Self {
        RdsConfig {
            height,
            width,
            disparity: DisparityField::Constant { value: disparity },
            density: 0.5,
            seed,
            fractional: false,
        }
    }
}

/// Random-dot stereo sequence; frames are pure functions of `(config, t)`.
#[derive(Clone, Debug)]
pub struct RdsSequence {
    config: RdsConfig,
    num_frames: usize,
    next: usize,
}

pub fn gen_rds_sequence(config: RdsConfig, num_frames: usize) -> Result<RdsSequence> {
    if config.height == 0 || config.width == 0 {
        return Err(Error::InvalidConfig("image extents must be >= 1".into()));
    }
    if !(config.density > 0.0 && config.density < 1.0) {
        return Err(Error::InvalidConfig(format!("dot density {} must lie in (0, 1)", config.density)));
    }
    config.disparity.validate(config.height, config.width, num_frames)?;
    Ok(RdsSequence {
        config,
        num_frames,
        next: 0,
    })
}

impl RdsSequence {
    pub fn len(&self) -> usize {
        self.num_frames
    }

    pub fn is_empty(&self) -> bool {
        self.num_frames == 0
    }

    pub fn config(&self) -> &RdsConfig {
        &self.config
    }

    pub fn frame(&self, t: usize) -> StereoFrame {
        let c = &self.config;
        let (h, w) = (c.height, c.width);
        let mut rng = frame_rng(c.seed, t);
        let dot = |rng: &mut ChaCha8Rng| if rng.gen::<f64>() < c.density { 1.0 } else { 0.0 };
        let left = Tensor::from_fn(&[h, w, 1], |_| dot(&mut rng));
        let right = Tensor::from_fn(&[h, w, 1], |i| {
            let (v, x) = (i[0], i[1]);
            let src = x as f64 + c.disparity.at(x as f64, v as f64, t, c.fractional);
            if src > (w - 1) as f64 {
                return dot(&mut rng);
            }
            let x0 = src.floor() as usize;
            let f = src - x0 as f64;
            let a = left.get(&[v, x0, 0]);
            if f == 0.0 {
                a
            } else {
                (1.0 - f) * a + f * left.get(&[v, x0 + 1, 0])
            }
        });
        let (gt, valid) = ground_truth(&c.disparity, h, w, t, c.fractional);
        StereoFrame {
            left,
            right,
            gt_disparity: Some(gt),
            gt_valid: Some(valid),
            t,
        }
    }
}

impl Iterator for RdsSequence {
    type Item = StereoFrame;

    fn next(&mut self) -> Option<StereoFrame> {
        (self.next < self.num_frames).then(|| {
            self.next += 1;
            self.frame(self.next - 1)
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureFamily {
    /// Two octaves of value noise with 6 and 3 pixel cells.
    #[default]
    Blobs,
    /// Two octaves with 3 and 1.5 pixel cells.
    Grain,
}

/// Rendering regime applied to frames `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub start: usize,
    pub end: usize,
    /// Multiplies intensities after the contrast stretch.
    pub brightness: f64,
    /// Stretch about mid-gray.
    pub contrast: f64,
    /// Std-dev of per-view Gaussian noise.
    pub noise: f64,
    pub texture: TextureFamily,
}

impl Regime {
    pub fn neutral(start: usize, end: usize) -> Self {
        Regime {
            start,
            end,
            brightness: 1.0,
            contrast: 1.0,
            noise: 0.0,
            texture: TextureFamily::Blobs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TexturedConfig {
    pub height: usize,
    pub width: usize,
    pub disparity: DisparityField,
    pub seed: u64,
    /// Horizontal camera pan in pixels per frame.
    #[serde(default)]
    pub pan: f64,
    #[serde(default)]
    pub fractional: bool,
}

fn hash_unit(seed: u64, ix: i64, iy: i64) -> f64 {
    let mut z = seed
        ^ (ix as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (x0, y0) = (gx.floor(), gy.floor());
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let (fx, fy) = (smooth(gx - x0), smooth(gy - y0));
    let (ix, iy) = (x0 as i64, y0 as i64);
    let top = (1.0 - fx) * hash_unit(seed, ix, iy) + fx * hash_unit(seed, ix + 1, iy);
    let bottom = (1.0 - fx) * hash_unit(seed, ix, iy + 1) + fx * hash_unit(seed, ix + 1, iy + 1);
    (1.0 - fy) * top + fy * bottom
}

fn texture(seed: u64, family: TextureFamily, x: f64, y: f64) -> f64 {
    let (coarse, fine, salt) = match family {
        TextureFamily::Blobs => (6.0, 3.0, 0x5EED_0001),
        TextureFamily::Grain => (3.0, 1.5, 0x5EED_0002),
    };
    let s = seed ^ salt;
    0.6 * value_noise(s, x, y, coarse) + 0.4 * value_noise(s.rotate_left(17), x, y, fine)
}

/// Value-noise scenes rendered under a regime schedule; the geometry (and so
/// the ground truth) ignores the regime.
#[derive(Clone, Debug)]
pub struct TexturedSequence {
    config: TexturedConfig,
    schedule: Vec<Regime>,
    num_frames: usize,
    next: usize,
}

pub fn gen_textured_sequence(config: TexturedConfig, num_frames: usize, schedule: Vec<Regime>) -> Result<TexturedSequence> {
    if config.height == 0 || config.width == 0 {
        return Err(Error::InvalidConfig("image extents must be >= 1".into()));
    }
    config.disparity.validate(config.height, config.width, num_frames)?;
    let mut sorted = schedule.clone();
    sorted.sort_by_key(|r| r.start);
    for r in &sorted {
        if r.start >= r.end {
            return Err(Error::InvalidConfig(format!("empty regime range {}..{}", r.start, r.end)));
        }
        if !(r.brightness >= 0.0 && r.contrast >= 0.0 && r.noise >= 0.0) {
            return Err(Error::InvalidConfig(format!("regime parameters must be nonnegative: {r:?}")));
        }
    }
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(Error::InvalidConfig(format!(
                "regime ranges {}..{} and {}..{} overlap",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            )));
        }
    }
    Ok(TexturedSequence {
        config,
        schedule: sorted,
        num_frames,
        next: 0,
    })
}

impl TexturedSequence {
    pub fn len(&self) -> usize {
        self.num_frames
    }

    pub fn is_empty(&self) -> bool {
        self.num_frames == 0
    }

    pub fn config(&self) -> &TexturedConfig {
        &self.config
    }

    pub fn schedule(&self) -> &[Regime] {
        &self.schedule
    }

    /// Regime in force at frame `t` (neutral outside the schedule).
    pub fn regime_at(&self, t: usize) -> Regime {
        self.schedule
            .iter()
            .copied()
            .find(|r| (r.start..r.end).contains(&t))
            .unwrap_or_else(|| Regime::neutral(t, t + 1))
    }

    pub fn frame(&self, t: usize) -> StereoFrame {
        let c = &self.config;
        let (h, w) = (c.height, c.width);
        let regime = self.regime_at(t);
        let offset = c.pan * t as f64;
        let shade = |x: f64, y: f64| {
            let base = texture(c.seed, regime.texture, x + offset, y);
            regime.brightness * (0.5 + regime.contrast * (base - 0.5))
        };
        let mut rng = frame_rng(c.seed ^ 0x0123_4567_89AB_CDEF, t);
        let normal = Normal::new(0.0, regime.noise.max(f64::MIN_POSITIVE)).expect("valid std-dev");
        let mut finish = |x: f64| {
            let n = if regime.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            (x + n).clamp(0.0, 1.0)
        };
        let left = Tensor::from_fn(&[h, w, 1], |i| finish(shade(i[1] as f64, i[0] as f64)));
        let right = Tensor::from_fn(&[h, w, 1], |i| {
            let (v, x) = (i[0] as f64, i[1] as f64);
            finish(shade(x + c.disparity.at(x, v, t, c.fractional), v))
        });
        let (gt, valid) = ground_truth(&c.disparity, h, w, t, c.fractional);
        StereoFrame {
            left,
            right,
            gt_disparity: Some(gt),
            gt_valid: Some(valid),
            t,
        }
    }
}

impl Iterator for TexturedSequence {
    type Item = StereoFrame;

    fn next(&mut self) -> Option<StereoFrame> {
        (self.next < self.num_frames).then(|| {
            self.next += 1;
            self.frame(self.next - 1)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_scaling_rule() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend([0u8, 255, 128, 64]);
        let t = parse_pnm(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 2, 1]);
        assert_eq!(t.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn pnm_header_comments_and_errors() {
        let mut bytes = b"P5 # gray\n# size\n2 1\n255\n".to_vec();
        bytes.extend([10u8, 20]);
        assert_eq!(parse_pnm(&bytes).unwrap().shape(), &[1, 2, 1]);

        let mut short = b"P5\n2 2\n255\n".to_vec();
        short.extend([1u8, 2, 3]);
        match parse_pnm(&short).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, short.len()),
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(parse_pnm(b"P2\n1 1\n255\n0").unwrap_err(), Error::Format { offset: 0, .. }));
        assert!(matches!(parse_pnm(b"P5\n1 x\n255\n0").unwrap_err(), Error::Format { offset: 5, .. }));
    }

    #[test]
    fn ppm_to_gray() {
        let mut bytes = b"P6\n1 1\n255\n".to_vec();
        bytes.extend([30u8, 60, 90]);
        let rgb = parse_pnm(&bytes).unwrap();
        assert_eq!(rgb.shape(), &[1, 1, 3]);
        let g = to_grayscale(&rgb).unwrap();
        assert!((g.data()[0] - 60.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn pfm_bottom_up_both_endians() {
        let mut le = b"Pf\n2 1\n-1.0\n".to_vec();
        le.extend(1.5f32.to_le_bytes());
        le.extend(2.5f32.to_le_bytes());
        assert_eq!(parse_pfm(&le).unwrap().data(), &[1.5, 2.5]);

        let mut be = b"Pf\n1 2\n1.0\n".to_vec();
        be.extend(1.5f32.to_be_bytes());
        be.extend(2.5f32.to_be_bytes());
        let t = parse_pfm(&be).unwrap();
        assert_eq!(t.shape(), &[2, 1]);
        assert_eq!(t.data(), &[2.5, 1.5]);

        assert!(parse_pfm(b"PF\n1 1\n-1.0\n0000").is_err());
        assert!(parse_pfm(b"P7\n1 1\n-1.0\n0000").is_err());
    }

    #[test]
    fn rds_identity_and_shift() {
        let frame = gen_rds_sequence(RdsConfig::constant(8, 16, 0.0, 1), 1).unwrap().frame(0);
        assert_eq!(frame.left, frame.right);
        assert!(frame.gt_valid.unwrap().data().iter().all(|&m| m == 1.0));

        let frame = gen_rds_sequence(RdsConfig::constant(8, 16, 2.0, 1), 1).unwrap().frame(0);
        for v in 0..8 {
            for u in 0..14 {
                assert_eq!(frame.right.get(&[v, u, 0]), frame.left.get(&[v, u + 2, 0]));
            }
        }
        let valid = frame.gt_valid.unwrap();
        assert_eq!(valid.get(&[3, 1]), 0.0);
        assert_eq!(valid.get(&[3, 2]), 1.0);
    }

    #[test]
    fn rds_reproducible() {
        let seq = gen_rds_sequence(RdsConfig::constant(8, 16, 3.0, 9), 4).unwrap();
        assert_eq!(seq.frame(2), seq.frame(2));
        assert_ne!(seq.frame(1).left, seq.frame(2).left);
        let again: Vec<_> = gen_rds_sequence(RdsConfig::constant(8, 16, 3.0, 9), 4).unwrap().collect();
        assert_eq!(again[3], seq.frame(3));
    }

    #[test]
    fn rejects_large_disparity() {
        assert!(gen_rds_sequence(RdsConfig::constant(8, 16, 4.0, 0), 1).is_err());
        let planar = RdsConfig {
            disparity: DisparityField::Planar {
                base: 1.0,
                du: 0.0,
                dv: 0.0,
                dt: 1.0,
            },
            ..RdsConfig::constant(8, 16, 0.0, 0)
        };
        assert!(gen_rds_sequence(planar.clone(), 3).is_ok());
        assert!(gen_rds_sequence(planar, 4).is_err());
    }

    fn textured(schedule: Vec<Regime>) -> TexturedSequence {
        let config = TexturedConfig {
            height: 16,
            width: 32,
            disparity: DisparityField::Regions {
                background: 2.0,
                regions: vec![Region {
                    top: 4,
                    left: 8,
                    height: 6,
                    width: 10,
                    disparity: 5.0,
                }],
            },
            seed: 4,
            pan: 0.0,
            fractional: false,
        };
        gen_textured_sequence(config, 20, schedule).unwrap()
    }

    #[test]
    fn regime_switch_changes_mean_not_geometry() {
        let mut dim = Regime::neutral(10, 20);
        dim.brightness = 0.6;
        let seq = textured(vec![Regime::neutral(0, 10), dim]);
        let m9 = seq.frame(9).left.mean();
        let m10 = seq.frame(10).left.mean();
        assert!((m10 / m9 - 0.6).abs() < 1e-12);
        assert!((seq.frame(3).left.mean() - m9).abs() < 0.02);
        assert_eq!(seq.frame(9).gt_disparity, seq.frame(10).gt_disparity);
    }

    #[test]
    fn overlapping_regimes_rejected() {
        let config = textured(vec![]).config().clone();
        let err = gen_textured_sequence(config, 20, vec![Regime::neutral(0, 10), Regime::neutral(9, 20)]);
        assert!(err.is_err());
    }

    #[test]
    fn gt_write_read_keeps_invalid_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let frame = gen_rds_sequence(RdsConfig::constant(4, 16, 3.0, 2), 1).unwrap().frame(0);
        write_frame(dir.path(), 0, &frame).unwrap();
        let back = read_frame(dir.path(), 0).unwrap();
        assert_eq!(back.left, frame.left);
        assert_eq!(back.gt_valid, frame.gt_valid);
        assert_eq!(count_frames(dir.path()), 1);
    }
}
