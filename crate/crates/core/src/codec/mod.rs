//! Seed bitstream: header, seed quantization and the entropy-coded payload.
//!
//! Layout (all multi-byte fields little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 4 | magic `SPC1` |
//! | 1 | version (1) |
//! | 1 | level `l` |
//! | 1 | flags, bit 0 = colors present |
//! | 1 | geometry bits `q` |
//! | 1 | color bits |
//! | 1 | diffusion steps `T` |
//! | 16 | center x, y, z and radius as `f32` |
//! | `l³` | rounds per cell in canonical cell order, 0 = empty |
//! | 4 | payload length `u32` |
//! | … | payload |
//!
//! The header is therefore `30 + l³` bytes.

pub mod arith;
pub mod octree;

use thiserror::Error;

use crate::patching::MAX_LEVEL;
use crate::pointset::NormalizationScale;
use crate::tensor::Mat;

pub use octree::PayloadError;

pub const MAGIC: &[u8; 4] = b"SPC1";
pub const VERSION: u8 = 1;
pub const DEFAULT_GEOMETRY_BITS: u8 = 12;
pub const DEFAULT_COLOR_BITS: u8 = 8;
pub const MAX_GEOMETRY_BITS: u8 = 16;
pub const MAX_COLOR_BITS: u8 = 8;
/// Header bytes besides the `l³` cell table.
pub const FIXED_HEADER_BYTES: usize = 30;

const FLAG_COLORS: u8 = 1;
const SLACK: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("unsupported stream: {0}")]
    UnsupportedStream(String),
    #[error("decode error at byte {offset}: {message}")]
    Decode { offset: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Seeds on the integer grid, in canonical order once decoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedSeeds {
    /// Per-axis indices in `[0, 2^q)`.
    pub positions: Vec<[u32; 3]>,
    /// Per-channel indices in `[0, 2^color_bits)`, when colors are coded.
    pub colors: Option<Vec<[u32; 3]>>,
}

impl QuantizedSeeds {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Reorders into canonical order (Morton key of the cell, then color).
    pub fn canonicalize(&mut self, q: u8) {
        let order = octree::canonical_order(&self.positions, self.colors.as_deref(), q);
        self.positions = order.iter().map(|&i| self.positions[i]).collect();
        if let Some(c) = &mut self.colors {
            *c = order.iter().map(|&i| c[i]).collect();
        }
    }

    /// Sorted copy, for comparing as multisets.
    pub fn sorted(&self) -> Vec<([u32; 3], [u32; 3])> {
        let mut v: Vec<_> = match &self.colors {
            Some(c) => self.positions.iter().copied().zip(c.iter().copied()).collect(),
            None => self.positions.iter().map(|&p| (p, [0; 3])).collect(),
        };
        v.sort_unstable();
        v
    }
}

/// Grid index of `x ∈ [lo, lo + span]` on `2^bits` cells.
fn quantize_value(x: f64, lo: f64, span: f64, bits: u8) -> u32 {
    let levels = 1u64 << bits;
    let v = ((x - lo) / span * levels as f64).floor();
    v.clamp(0.0, (levels - 1) as f64) as u32
}

fn dequantize_value(i: u32, lo: f64, span: f64, bits: u8) -> f64 {
    (i as f64 + 0.5) / (1u64 << bits) as f64 * span + lo
}

pub fn quantize_position(x: f64, q: u8) -> u32 {
    quantize_value(x, -1.0, 2.0, q)
}

pub fn dequantize_position(i: u32, q: u8) -> f64 {
    dequantize_value(i, -1.0, 2.0, q)
}

pub fn quantize_color(c: f64, bits: u8) -> u32 {
    quantize_value(c, 0.0, 1.0, bits)
}

pub fn dequantize_color(i: u32, bits: u8) -> f64 {
    dequantize_value(i, 0.0, 1.0, bits)
}

fn check_bits(q: u8, color_bits: u8) -> Result<(), CodecError> {
    if !(1..=MAX_GEOMETRY_BITS).contains(&q) {
        return Err(CodecError::InvalidArgument(format!(
            "geometry bits {q} outside [1, {MAX_GEOMETRY_BITS}]"
        )));
    }
    if !(1..=MAX_COLOR_BITS).contains(&color_bits) {
        return Err(CodecError::InvalidArgument(format!(
            "color bits {color_bits} outside [1, {MAX_COLOR_BITS}]"
        )));
    }
    Ok(())
}

/// Quantizes S×6 seeds (positions in `[-1, 1]³`, colors in `[0, 1]`).
/// Colors are dropped when `with_colors` is false.
pub fn quantize_seeds(seeds: &Mat, q: u8, color_bits: u8, with_colors: bool) -> Result<QuantizedSeeds, CodecError> {
    check_bits(q, color_bits)?;
    if seeds.cols() != 6 {
        return Err(CodecError::InvalidArgument(format!(
            "seeds must have 6 columns, got {}",
            seeds.cols()
        )));
    }
    let mut positions = Vec::with_capacity(seeds.rows());
    let mut colors = Vec::with_capacity(seeds.rows());
    for (i, r) in seeds.iter_rows().enumerate() {
        if r[..3].iter().any(|v| !(v.abs() <= 1.0 + SLACK)) {
            return Err(CodecError::InvalidArgument(format!(
                "seed {i} position {:?} outside the normalized box",
                &r[..3]
            )));
        }
        if r[3..].iter().any(|v| !v.is_finite()) {
            return Err(CodecError::InvalidArgument(format!("seed {i} has a non-finite color")));
        }
        positions.push([0, 1, 2].map(|a| quantize_position(r[a], q)));
        colors.push([3, 4, 5].map(|a| quantize_color(r[a].clamp(0.0, 1.0), color_bits)));
    }
    Ok(QuantizedSeeds {
        positions,
        colors: with_colors.then_some(colors),
    })
}

/// S×6 cell-center seeds; white when colors are absent.
pub fn dequantize_seeds(seeds: &QuantizedSeeds, q: u8, color_bits: u8) -> Mat {
    let mut data = Vec::with_capacity(seeds.len() * 6);
    for (i, p) in seeds.positions.iter().enumerate() {
        data.extend(p.iter().map(|&v| dequantize_position(v, q)));
        match &seeds.colors {
            Some(c) => data.extend(c[i].iter().map(|&v| dequantize_color(v, color_bits))),
            None => data.extend([1.0; 3]),
        }
    }
    Mat::from_vec(seeds.len(), 6, data)
}

/// Every field of a seed stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedStream {
    pub level: u8,
    /// Sampling rounds per cell (`l³` entries, 0 = empty cell).
    pub cell_rounds: Vec<u8>,
    pub scale: [f32; 4],
    pub steps: u8,
    pub geometry_bits: u8,
    pub color_bits: u8,
    pub seeds: QuantizedSeeds,
}

impl SeedStream {
    pub fn has_colors(&self) -> bool {
        self.seeds.colors.is_some()
    }

    pub fn normalization(&self) -> NormalizationScale {
        NormalizationScale::from_f32(self.scale)
    }

    /// Dequantized S×6 seeds.
    pub fn seed_rows(&self) -> Mat {
        dequantize_seeds(&self.seeds, self.geometry_bits, self.color_bits)
    }

    fn validate(&self) -> Result<(), CodecError> {
        check_bits(self.geometry_bits, self.color_bits)?;
        let level = self.level as usize;
        if !(1..=MAX_LEVEL).contains(&level) {
            return Err(CodecError::InvalidArgument(format!("level {level} outside [1, {MAX_LEVEL}]")));
        }
        if self.cell_rounds.len() != level.pow(3) {
            return Err(CodecError::InvalidArgument(format!(
                "{} cell entries for level {level}",
                self.cell_rounds.len()
            )));
        }
        if self.steps == 0 {
            return Err(CodecError::InvalidArgument("step count must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(CodecError::InvalidArgument("no seeds to code".into()));
        }
        let limit = 1u32 << self.geometry_bits;
        if self.seeds.positions.iter().flatten().any(|&v| v >= limit) {
            return Err(CodecError::InvalidArgument("seed index beyond the geometry grid".into()));
        }
        if let Some(c) = &self.seeds.colors {
            if c.len() != self.seeds.len() {
                return Err(CodecError::InvalidArgument("color count differs from seed count".into()));
            }
            let climit = 1u32 << self.color_bits;
            if c.iter().flatten().any(|&v| v >= climit) {
                return Err(CodecError::InvalidArgument("color index beyond the color grid".into()));
            }
        }
        Ok(())
    }
}

/// Serializes a stream; seeds are coded in canonical order.
pub fn encode(stream: &SeedStream) -> Result<Vec<u8>, CodecError> {
    stream.validate()?;
    let mut seeds = stream.seeds.clone();
    seeds.canonicalize(stream.geometry_bits);
    let payload = octree::encode_payload(
        &seeds.positions,
        seeds.colors.as_deref(),
        stream.geometry_bits,
        stream.color_bits,
    );
    let mut out = Vec::with_capacity(FIXED_HEADER_BYTES + stream.cell_rounds.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(stream.level);
    out.push(if stream.has_colors() { FLAG_COLORS } else { 0 });
    out.push(stream.geometry_bits);
    out.push(stream.color_bits);
    out.push(stream.steps);
    for v in stream.scale {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&stream.cell_rounds);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses a stream; seeds come back in canonical order.
pub fn decode(bytes: &[u8]) -> Result<SeedStream, CodecError> {
    let short = |offset: usize, what: &str| CodecError::Decode {
        offset,
        message: format!("stream ends inside the {what}"),
    };
    if bytes.len() < 5 {
        return Err(short(bytes.len(), "magic and version"));
    }
    if &bytes[..4] != MAGIC {
        return Err(CodecError::UnsupportedStream("missing SPC1 magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(CodecError::UnsupportedStream(format!("version {}", bytes[4])));
    }
    if bytes.len() < 26 {
        return Err(short(bytes.len(), "header"));
    }
    let (level, flags, q, cb, steps) = (bytes[5], bytes[6], bytes[7], bytes[8], bytes[9]);
    let bad = |offset: usize, message: String| CodecError::Decode { offset, message };
    if !(1..=MAX_LEVEL).contains(&(level as usize)) {
        return Err(bad(5, format!("level {level} outside [1, {MAX_LEVEL}]")));
    }
    if flags & !FLAG_COLORS != 0 {
        return Err(bad(6, format!("unknown flag bits {flags:#04x}")));
    }
    if !(1..=MAX_GEOMETRY_BITS).contains(&q) {
        return Err(bad(7, format!("geometry bits {q}")));
    }
    if !(1..=MAX_COLOR_BITS).contains(&cb) {
        return Err(bad(8, format!("color bits {cb}")));
    }
    if steps == 0 {
        return Err(bad(9, "zero diffusion steps".into()));
    }
    let mut scale = [0f32; 4];
    for (i, s) in scale.iter_mut().enumerate() {
        let o = 10 + 4 * i;
        *s = f32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    }
    if scale.iter().any(|v| !v.is_finite()) || !(scale[3] > 0.0) {
        return Err(bad(10, format!("invalid normalization {scale:?}")));
    }
    let cells = (level as usize).pow(3);
    let table_end = 26 + cells;
    if bytes.len() < table_end + 4 {
        return Err(short(bytes.len(), "cell table or payload length"));
    }
    let cell_rounds = bytes[26..table_end].to_vec();
    let len_bytes = &bytes[table_end..table_end + 4];
    let payload_len = u32::from_le_bytes([len_bytes[0], len_bytes[1], len_bytes[2], len_bytes[3]]) as usize;
    let start = table_end + 4;
    if bytes.len() - start != payload_len {
        return Err(bad(
            table_end,
            format!("payload length {payload_len} but {} bytes follow", bytes.len() - start),
        ));
    }
    let (positions, colors) = octree::decode_payload(&bytes[start..], q, flags & FLAG_COLORS != 0, cb)
        .map_err(|e| CodecError::Decode {
            offset: start + e.offset,
            message: e.message,
        })?;
    Ok(SeedStream {
        level,
        cell_rounds,
        scale,
        steps,
        geometry_bits: q,
        color_bits: cb,
        seeds: QuantizedSeeds { positions, colors },
    })
}

/// Size of a stream in bits.
pub fn measure_bits(bytes: &[u8]) -> u64 {
    8 * bytes.len() as u64
}
