//! COCO run-length encoding.
//!
//! Runs are counted in column-major order and always start with a
//! background run (possibly zero). The compressed string form stores each
//! count (delta-coded against the count two positions back from the third
//! one onward) in 5-bit little-endian groups offset by ASCII 48.

use serde::{Deserialize, Serialize};

use crate::raster::BinaryMask;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u32>,
}

impl Rle {
    pub fn encode(mask: &BinaryMask) -> Self {
        let (w, h) = mask.dimensions();
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for x in 0..w {
            for y in 0..h {
                let v = mask.get(x, y);
                if v != current {
                    counts.push(run);
                    run = 0;
                    current = v;
                }
                run += 1;
            }
        }
        counts.push(run);
        Self {
            height: h,
            width: w,
            counts,
        }
    }

    pub fn decode(&self) -> Result<BinaryMask> {
        let total = self.width as u64 * self.height as u64;
        let sum: u64 = self.counts.iter().map(|&c| c as u64).sum();
        if sum != total {
            return Err(Error::Dataset(format!(
                "RLE counts sum to {sum}, expected {total} for {}x{}",
                self.width, self.height
            )));
        }
        let mut mask = BinaryMask::new(self.width, self.height);
        let mut pos = 0u64;
        for (i, &c) in self.counts.iter().enumerate() {
            if i % 2 == 1 {
                for p in pos..pos + c as u64 {
                    let x = (p / self.height as u64) as u32;
                    let y = (p % self.height as u64) as u32;
                    mask.set(x, y, true);
                }
            }
            pos += c as u64;
        }
        Ok(mask)
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| c as u64).sum()
    }

    pub fn to_compressed(&self) -> String {
        let mut s = String::new();
        for i in 0..self.counts.len() {
            let mut x = self.counts[i] as i64;
            if i > 2 {
                x -= self.counts[i - 2] as i64;
            }
            loop {
                let mut c = (x & 0x1f) as u8;
                x >>= 5;
                let more = if c & 0x10 != 0 { x != -1 } else { x != 0 };
                if more {
                    c |= 0x20;
                }
                s.push((c + 48) as char);
                if !more {
                    break;
                }
            }
        }
        s
    }

    pub fn from_compressed(height: u32, width: u32, s: &str) -> Result<Self> {
        let bytes = s.as_bytes();
        let mut counts: Vec<u32> = Vec::new();
        let mut p = 0;
        while p < bytes.len() {
            let mut x: i64 = 0;
            let mut k = 0;
            loop {
                let b = bytes[p];
                if !(48..48 + 64).contains(&b) || k > 12 {
                    return Err(Error::Dataset(format!("invalid RLE byte {b:#x} at {p}")));
                }
                let c = (b - 48) as i64;
                x |= (c & 0x1f) << (5 * k);
                p += 1;
                k += 1;
                if c & 0x20 == 0 {
                    if c & 0x10 != 0 {
                        x |= -1i64 << (5 * k);
                    }
                    break;
                }
                if p >= bytes.len() {
                    return Err(Error::Dataset("truncated RLE string".into()));
                }
            }
            let m = counts.len();
            if m > 2 {
                x += counts[m - 2] as i64;
            }
            let count = u32::try_from(x)
                .map_err(|_| Error::Dataset(format!("RLE count {x} out of range")))?;
            counts.push(count);
        }
        Ok(Self {
            height,
            width,
            counts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn column_major_runs() {
        // 2 wide, 3 tall; foreground at (0,1), (0,2), (1,0)
        let mut m = BinaryMask::new(2, 3);
        m.set(0, 1, true);
        m.set(0, 2, true);
        m.set(1, 0, true);
        let r = Rle::encode(&m);
        assert_eq!(r.counts, vec![1, 3, 2]);
        assert_eq!(r.area(), 3);
        assert_eq!(r.decode().unwrap(), m);
    }

    #[test]
    fn leading_foreground_gets_zero_run() {
        let m = BinaryMask::filled(2, 2, true);
        assert_eq!(Rle::encode(&m).counts, vec![0, 4]);
    }

    #[test]
    fn hand_encoded_strings() {
        let r = Rle {
            height: 1,
            width: 43,
            counts: vec![3, 40],
        };
        assert_eq!(r.to_compressed(), "3X1");
        assert_eq!(Rle::from_compressed(1, 43, "3X1").unwrap(), r);
    }

    #[test]
    fn bad_counts_rejected() {
        let r = Rle {
            height: 2,
            width: 2,
            counts: vec![1, 1],
        };
        assert!(r.decode().is_err());
        assert!(Rle::from_compressed(2, 2, "\u{7f}").is_err());
    }

    proptest! {
        #[test]
        fn roundtrips(w in 1u32..20, h in 1u32..20, bits in proptest::collection::vec(any::<bool>(), 400)) {
            let m = BinaryMask::from_fn(w, h, |x, y| bits[(y * 20 + x) as usize]);
            let r = Rle::encode(&m);
            let back = r.decode().unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(Rle::encode(&back), r.clone());
            let s = r.to_compressed();
            prop_assert_eq!(Rle::from_compressed(h, w, &s).unwrap(), r);
        }
    }
}
