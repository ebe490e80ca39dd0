//! One-bit matrices packed into 64-bit words and the AND/popcount kernel.
//!
//! Element `j` of a row lives in word `j / 64`, bit `j % 64` (LSB first).
//! Rows start on a word boundary; unused high bits of a row's last word are
//! always zero.
//!
//! On-disk layout (all little-endian):
//!
//! ```text
//! magic  "BPK1"          4 bytes
//! rows   u64
//! cols   u64
//! words  u64 x rows * ceil(cols / 64)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

pub const PACKED_MAGIC: &[u8; 4] = b"BPK1";
const WORD_BITS: usize = 64;

/// Which values a packed bit stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alphabet {
    /// Spikes: bit 1 is `1`, bit 0 is `0`.
    Spikes,
    /// Binary weights: bit 1 is `+1`, bit 0 is `-1`.
    Signs,
}

impl Alphabet {
    fn name(self) -> &'static str {
        match self {
            Alphabet::Spikes => "{0,1}",
            Alphabet::Signs => "{-1,+1}",
        }
    }

    fn encode<F: Scalar>(self, v: F) -> Option<bool> {
        let (zero, one) = match self {
            Alphabet::Spikes => (F::zero(), F::one()),
            Alphabet::Signs => (-F::one(), F::one()),
        };
        if v == one {
            Some(true)
        } else if v == zero {
            Some(false)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedBits {
    rows: usize,
    cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl PackedBits {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(WORD_BITS);
        Self {
            rows,
            cols,
            words_per_row,
            words: vec![0; rows * words_per_row],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Storage in bytes of the packed words.
    pub fn storage_bytes(&self) -> usize {
        self.words.len() * 8
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        let w = self.words[r * self.words_per_row + c / WORD_BITS];
        (w >> (c % WORD_BITS)) & 1 == 1
    }

    pub fn set(&mut self, r: usize, c: usize, bit: bool) {
        let w = &mut self.words[r * self.words_per_row + c / WORD_BITS];
        let mask = 1u64 << (c % WORD_BITS);
        if bit {
            *w |= mask;
        } else {
            *w &= !mask;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Packs a tensor viewed as `[rows, last_dim]`.
    pub fn pack<F: Scalar>(m: &Tensor<F>, alphabet: Alphabet) -> Result<Self> {
        let cols = m.last_dim();
        let rows = m.rows();
        let mut out = Self::zeros(rows, cols);
        for (i, &v) in m.data().iter().enumerate() {
            match alphabet.encode(v) {
                Some(true) => {
                    let (r, c) = (i / cols, i % cols);
                    out.words[r * out.words_per_row + c / WORD_BITS] |= 1u64 << (c % WORD_BITS);
                }
                Some(false) => {}
                None => {
                    return Err(Error::Encoding {
                        index: i,
                        value: v.to_f32().unwrap_or(f32::NAN),
                        alphabet: alphabet.name(),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Unpacks to a `[rows, cols]` tensor in the given alphabet.
    pub fn unpack(&self, alphabet: Alphabet) -> Tensor {
        let (zero, one) = match alphabet {
            Alphabet::Spikes => (0.0, 1.0),
            Alphabet::Signs => (-1.0, 1.0),
        };
        Tensor::from_fn(&[self.rows, self.cols], |i| {
            if self.get(i / self.cols, i % self.cols) {
                one
            } else {
                zero
            }
        })
    }

    /// True when every padding bit is zero.
    pub fn padding_is_clean(&self) -> bool {
        let tail = self.cols % WORD_BITS;
        if tail == 0 {
            return true;
        }
        let mask = !((1u64 << tail) - 1);
        (0..self.rows).all(|r| self.words[(r + 1) * self.words_per_row - 1] & mask == 0)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(PACKED_MAGIC)?;
        w.write_all(&(self.rows as u64).to_le_bytes())?;
        w.write_all(&(self.cols as u64).to_le_bytes())?;
        for word in &self.words {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PACKED_MAGIC {
            return Err(Error::Data(format!("bad packed-bits magic {magic:?}")));
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let rows = u64::from_le_bytes(b) as usize;
        r.read_exact(&mut b)?;
        let cols = u64::from_le_bytes(b) as usize;
        let mut out = Self::zeros(rows, cols);
        for word in out.words.iter_mut() {
            r.read_exact(&mut b)?;
            *word = u64::from_le_bytes(b);
        }
        if !out.padding_is_clean() {
            return Err(Error::Data("packed-bits padding is not zero".into()));
        }
        Ok(out)
    }
}

/// Binary linear kernel: `out[i][o] = sum_j s[i][j] * w[o][j]` with spikes
/// `s` in {0,1} and weights `w` in {-1,+1}, evaluated wordwise as
/// `2 * popcount(s & w) - popcount(s)`.
///
/// Returns a row-major `[spikes.rows, weights.rows]` matrix of integers.
pub fn packed_linear(spikes: &PackedBits, weights: &PackedBits) -> Result<Vec<i32>> {
    if spikes.cols != weights.cols {
        return Err(Error::dim(
            "packed_linear",
            &[spikes.rows, spikes.cols],
            &[weights.rows, weights.cols],
        ));
    }
    let mut out = vec![0i32; spikes.rows * weights.rows];
    for i in 0..spikes.rows {
        let s = spikes.row_words(i);
        let active: u32 = s.iter().map(|w| w.count_ones()).sum();
        let orow = &mut out[i * weights.rows..(i + 1) * weights.rows];
        if active == 0 {
            continue;
        }
        for (o, dst) in orow.iter_mut().enumerate() {
            let w = weights.row_words(o);
            let both: u32 = s.iter().zip(w).map(|(a, b)| (a & b).count_ones()).sum();
            *dst = 2 * both as i32 - active as i32;
        }
    }
    Ok(out)
}
