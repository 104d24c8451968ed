//! HMGE episode files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `HMGE` |
//! | 4 | 4 | format version (u32) |
//! | 8 | 4 | T, rows (u32) |
//! | 12 | 4 | D_obs (u32) |
//! | 16 | 4 | D_act (u32) |
//! | 20 | 12 | reserved, zero |
//! | 32 | 4·T·D_obs | observations, f32 row-major |
//! | … | 4·T·D_act | actions, f32 row-major |

use super::DatasetError;

pub const MAGIC: [u8; 4] = *b"HMGE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;

/// Decoded episode contents at stored (32-bit) precision.
#[derive(Clone, Debug, PartialEq)]
pub struct Frames {
    pub len: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    /// `len × obs_dim`, row-major.
    pub observations: Vec<f32>,
    /// `len × act_dim`, row-major.
    pub actions: Vec<f32>,
}

impl Frames {
    /// Rounds 64-bit rows to storage precision. Rows must be rectangular.
    pub fn from_rows(observations: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<Self, DatasetError> {
        if observations.len() != actions.len() {
            return Err(DatasetError::DimensionMismatch {
                what: "action rows",
                expected: observations.len(),
                got: actions.len(),
            });
        }
        let obs_dim = observations.first().map_or(0, Vec::len);
        let act_dim = actions.first().map_or(0, Vec::len);
        let flatten = |rows: &[Vec<f64>], dim: usize, what: &'static str| -> Result<Vec<f32>, DatasetError> {
            let mut out = Vec::with_capacity(rows.len() * dim);
            for r in rows {
                if r.len() != dim {
                    return Err(DatasetError::DimensionMismatch {
                        what,
                        expected: dim,
                        got: r.len(),
                    });
                }
                out.extend(r.iter().map(|&v| v as f32));
            }
            Ok(out)
        };
        Ok(Self {
            len: observations.len(),
            obs_dim,
            act_dim,
            observations: flatten(observations, obs_dim, "observation width")?,
            actions: flatten(actions, act_dim, "action width")?,
        })
    }

    pub fn obs_row(&self, t: usize) -> &[f32] {
        &self.observations[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn act_row(&self, t: usize) -> &[f32] {
        &self.actions[t * self.act_dim..(t + 1) * self.act_dim]
    }
}

pub fn encode(frames: &Frames) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (frames.observations.len() + frames.actions.len()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for n in [frames.len, frames.obs_dim, frames.act_dim] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    out.resize(HEADER_LEN, 0);
    for v in frames.observations.iter().chain(&frames.actions) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses an HMGE file. Never panics on malformed input.
pub fn decode(bytes: &[u8]) -> Result<Frames, DatasetError> {
    if bytes.len() < HEADER_LEN {
        return Err(DatasetError::Truncated {
            expected: HEADER_LEN,
            got: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(DatasetError::BadMagic);
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4-byte slice"));
    let version = word(4);
    if version != VERSION {
        return Err(DatasetError::UnsupportedVersion(version));
    }
    if bytes[20..HEADER_LEN].iter().any(|&b| b != 0) {
        return Err(DatasetError::Corrupt("reserved header bytes are not zero".into()));
    }
    let (len, obs_dim, act_dim) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let body = len
        .checked_mul(obs_dim.checked_add(act_dim).ok_or(DatasetError::Corrupt("dimension overflow".into()))?)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(DatasetError::Corrupt("size overflow".into()))?;
    if bytes.len() != body {
        return Err(DatasetError::Truncated {
            expected: body,
            got: bytes.len(),
        });
    }
    let floats: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    if floats.iter().any(|v| !v.is_finite()) {
        return Err(DatasetError::Corrupt("non-finite value".into()));
    }
    let split = len * obs_dim;
    Ok(Frames {
        len,
        obs_dim,
        act_dim,
        actions: floats[split..].to_vec(),
        observations: floats[..split].to_vec(),
    })
}
