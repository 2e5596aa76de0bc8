//! Octree occupancy coding of quantized seeds, with duplicate counts and
//! color residuals.
//!
//! Seeds are visited in canonical order: by Morton key of their grid cell
//! (child index `x | y<<1 | z<<2` at every level, coarse levels first), then
//! by color. Breadth-first occupancy bytes are coded bit by bit with one
//! adaptive model per `(depth, child)` pair.

use super::arith::{BitModel, Decoder, Encoder};

/// Largest number of seeds sharing one grid cell the decoder accepts.
const MAX_DUPLICATES: usize = 1 << 20;
/// Largest number of octree nodes per level the decoder accepts.
const MAX_NODES: usize = 1 << 24;
const DUP_CONTEXTS: usize = 3;

/// Why a payload could not be decoded, and where.
#[derive(Clone, Debug, PartialEq)]
pub struct PayloadError {
    pub offset: usize,
    pub message: String,
}

pub fn morton_key(p: &[u32; 3], q: u8) -> u64 {
    let mut key = 0u64;
    for b in (0..q).rev() {
        let child = ((p[0] >> b) & 1) | (((p[1] >> b) & 1) << 1) | (((p[2] >> b) & 1) << 2);
        key = (key << 3) | child as u64;
    }
    key
}

pub fn morton_decode(key: u64, q: u8) -> [u32; 3] {
    let mut p = [0u32; 3];
    for level in 0..q {
        let child = (key >> (3 * level as u64)) & 7;
        p[0] |= ((child & 1) as u32) << level;
        p[1] |= (((child >> 1) & 1) as u32) << level;
        p[2] |= (((child >> 2) & 1) as u32) << level;
    }
    p
}

/// Canonical permutation: ascending Morton key, then color.
pub fn canonical_order(positions: &[[u32; 3]], colors: Option<&[[u32; 3]]>, q: u8) -> Vec<usize> {
    let keys: Vec<u64> = positions.iter().map(|p| morton_key(p, q)).collect();
    let mut order: Vec<usize> = (0..positions.len()).collect();
    order.sort_by(|&a, &b| {
        keys[a].cmp(&keys[b]).then_with(|| match colors {
            Some(c) => c[a].cmp(&c[b]),
            None => std::cmp::Ordering::Equal,
        })
    });
    order
}

struct Models {
    occupancy: Vec<[BitModel; 8]>,
    duplicates: [BitModel; DUP_CONTEXTS],
    colors: [Vec<BitModel>; 3],
}

impl Models {
    fn new(q: u8, color_bits: u8) -> Self {
        let tree = 1usize << color_bits;
        Self {
            occupancy: vec![[BitModel::default(); 8]; q as usize],
            duplicates: [BitModel::default(); DUP_CONTEXTS],
            colors: std::array::from_fn(|_| vec![BitModel::default(); tree]),
        }
    }
}

/// Codes seeds already in canonical order. `positions` hold `q`-bit grid
/// indices; `colors`, when present, `color_bits`-bit channel values.
pub fn encode_payload(
    positions: &[[u32; 3]],
    colors: Option<&[[u32; 3]]>,
    q: u8,
    color_bits: u8,
) -> Vec<u8> {
    let mut enc = Encoder::new();
    let mut models = Models::new(q, color_bits);
    let keys: Vec<u64> = positions.iter().map(|p| morton_key(p, q)).collect();
    debug_assert!(keys.windows(2).all(|w| w[0] <= w[1]), "seeds not in canonical order");
    let mut leaves: Vec<(u64, usize)> = Vec::new();
    for &k in &keys {
        match leaves.last_mut() {
            Some((last, n)) if *last == k => *n += 1,
            _ => leaves.push((k, 1)),
        }
    }

    for depth in 0..q {
        let shift = 3 * (q - depth - 1) as u64;
        let mut children: Vec<u64> = leaves.iter().map(|(k, _)| k >> shift).collect();
        children.dedup();
        let mut i = 0;
        while i < children.len() {
            let parent = children[i] >> 3;
            let mut occupancy = 0u8;
            while i < children.len() && children[i] >> 3 == parent {
                occupancy |= 1 << (children[i] & 7);
                i += 1;
            }
            let ctx = &mut models.occupancy[depth as usize];
            for (c, model) in ctx.iter_mut().enumerate() {
                enc.encode_with(occupancy >> c & 1 == 1, model);
            }
        }
    }

    for &(_, n) in &leaves {
        for j in 0..n {
            let more = j + 1 < n;
            enc.encode_with(more, &mut models.duplicates[j.min(DUP_CONTEXTS - 1)]);
        }
    }

    if let Some(colors) = colors {
        let mask = (1u32 << color_bits) - 1;
        let mut prev = [0u32; 3];
        for c in colors {
            for ch in 0..3 {
                let delta = c[ch].wrapping_sub(prev[ch]) & mask;
                let tree = &mut models.colors[ch];
                let mut node = 1usize;
                for b in (0..color_bits).rev() {
                    let bit = (delta >> b) & 1 == 1;
                    enc.encode_with(bit, &mut tree[node]);
                    node = node * 2 + bit as usize;
                }
            }
            prev = *c;
        }
    }
    enc.finish()
}

/// Positions and, when present, colors.
pub type DecodedPayload = (Vec<[u32; 3]>, Option<Vec<[u32; 3]>>);

/// Inverse of [`encode_payload`]: seeds in canonical order.
pub fn decode_payload(
    payload: &[u8],
    q: u8,
    with_colors: bool,
    color_bits: u8,
) -> Result<DecodedPayload, PayloadError> {
    let mut dec = Decoder::new(payload);
    let mut models = Models::new(q, color_bits);
    // the encoder's final byte plus the 4-byte look-ahead bound honest reads
    let limit = payload.len() + 4;
    let overrun = |dec: &Decoder| -> Result<(), PayloadError> {
        if dec.position() > limit {
            Err(PayloadError {
                offset: payload.len(),
                message: "payload ended before the seed set was complete".into(),
            })
        } else {
            Ok(())
        }
    };

    let mut nodes: Vec<u64> = vec![0];
    for depth in 0..q {
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for &parent in &nodes {
            let ctx = &mut models.occupancy[depth as usize];
            let mut occupancy = 0u8;
            for (c, model) in ctx.iter_mut().enumerate() {
                if dec.decode_with(model) {
                    occupancy |= 1 << c;
                }
            }
            if occupancy == 0 {
                return Err(PayloadError {
                    offset: dec.position().saturating_sub(4).min(payload.len()),
                    message: format!("empty occupancy at depth {depth}"),
                });
            }
            for c in 0..8 {
                if occupancy >> c & 1 == 1 {
                    next.push((parent << 3) | c as u64);
                }
            }
            overrun(&dec)?;
        }
        if next.len() > MAX_NODES {
            return Err(PayloadError {
                offset: dec.position().min(payload.len()),
                message: format!("{} nodes at depth {} exceeds the limit", next.len(), depth + 1),
            });
        }
        nodes = next;
    }

    let mut positions = Vec::with_capacity(nodes.len());
    for &key in &nodes {
        let p = morton_decode(key, q);
        let mut n = 1;
        while dec.decode_with(&mut models.duplicates[(n - 1).min(DUP_CONTEXTS - 1)]) {
            n += 1;
            overrun(&dec)?;
            if n > MAX_DUPLICATES {
                return Err(PayloadError {
                    offset: dec.position().min(payload.len()),
                    message: "duplicate count exceeds the limit".into(),
                });
            }
        }
        positions.extend(std::iter::repeat_n(p, n));
    }

    let colors = if with_colors {
        let mask = (1u32 << color_bits) - 1;
        let mut prev = [0u32; 3];
        let mut out = Vec::with_capacity(positions.len());
        for _ in 0..positions.len() {
            let mut c = [0u32; 3];
            for (ch, value) in c.iter_mut().enumerate() {
                let tree = &mut models.colors[ch];
                let mut node = 1usize;
                for _ in 0..color_bits {
                    let bit = dec.decode_with(&mut tree[node]);
                    node = node * 2 + bit as usize;
                }
                let delta = node as u32 - (1 << color_bits);
                *value = prev[ch].wrapping_add(delta) & mask;
            }
            overrun(&dec)?;
            out.push(c);
            prev = c;
        }
        Some(out)
    } else {
        None
    };
    Ok((positions, colors))
}
