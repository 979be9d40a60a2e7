//! Baseline-JPEG entropy-coded size, computed without emitting a file.
//!
//! Every channel is coded on its own: 8x8 blocks (edges replicated), fixed-point
//! DCT-II, the Annex K luminance quantization table at quality 75, zigzag
//! scan, DC differences and AC run-lengths priced with the standard luminance
//! Huffman tables. Everything after the level shift is integer arithmetic.

use crate::data::Image;

/// `round(8192 * a(u) * cos((2x + 1) u pi / 16))`, `a(0) = sqrt(1/8)`, `a(u) = 1/2`.
const DCT: [[i64; 8]; 8] = [
    [2896, 2896, 2896, 2896, 2896, 2896, 2896, 2896],
    [4017, 3406, 2276, 799, -799, -2276, -3406, -4017],
    [3784, 1567, -1567, -3784, -3784, -1567, 1567, 3784],
    [3406, -799, -4017, -2276, 2276, 4017, 799, -3406],
    [2896, -2896, -2896, 2896, 2896, -2896, -2896, 2896],
    [2276, -4017, 799, 3406, -3406, -799, 4017, -2276],
    [1567, -3784, 3784, -1567, -1567, 3784, -3784, 1567],
    [799, -2276, 3406, -4017, 4017, -3406, 2276, -799],
];
const DCT_SHIFT: u32 = 26;

const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Zigzag position -> natural (row-major) coefficient index.
const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, //
    12, 19, 26, 33, 40, 48, 41, 34, 27, 20, 13, 6, 7, 14, 21, 28, //
    35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, //
    58, 59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

const DC_BITS: [u8; 16] = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
const DC_VALS: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];
const AC_BITS: [u8; 16] = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d];
const AC_VALS: [u8; 162] = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xA1, 0x08, 0x23, 0x42, 0xB1, 0xC1, 0x15, 0x52, 0xD1, 0xF0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0A, 0x16, 0x17, 0x18, 0x19, 0x1A, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2A, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3A, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4A, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5A, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6A, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7A, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8A, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9A, 0xA2, 0xA3, 0xA4, 0xA5, 0xA6, 0xA7,
    0xA8, 0xA9, 0xAA, 0xB2, 0xB3, 0xB4, 0xB5, 0xB6, 0xB7, 0xB8, 0xB9, 0xBA, 0xC2, 0xC3, 0xC4, 0xC5,
    0xC6, 0xC7, 0xC8, 0xC9, 0xCA, 0xD2, 0xD3, 0xD4, 0xD5, 0xD6, 0xD7, 0xD8, 0xD9, 0xDA, 0xE1, 0xE2,
    0xE3, 0xE4, 0xE5, 0xE6, 0xE7, 0xE8, 0xE9, 0xEA, 0xF1, 0xF2, 0xF3, 0xF4, 0xF5, 0xF6, 0xF7, 0xF8,
    0xF9, 0xFA,
];

const EOB: u8 = 0x00;
const ZRL: u8 = 0xF0;

pub const DEFAULT_QUALITY: u8 = 75;

/// Code length in bits for every symbol of a canonical Huffman table.
fn code_lengths(bits: &[u8; 16], vals: &[u8]) -> [u8; 256] {
    let mut lengths = [0u8; 256];
    let mut k = 0;
    for (len_minus_one, &count) in bits.iter().enumerate() {
        for _ in 0..count {
            lengths[vals[k] as usize] = len_minus_one as u8 + 1;
            k += 1;
        }
    }
    lengths
}

/// IJG quality scaling of the base table, clamped to `1..=255`.
fn quant_table(quality: u8) -> [i64; 64] {
    let q = u32::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0i64; 64];
    for (o, &base) in out.iter_mut().zip(LUMA_QUANT.iter()) {
        *o = ((u32::from(base) * scale + 50) / 100).clamp(1, 255) as i64;
    }
    out
}

/// Number of magnitude bits JPEG uses for `v` (its "category").
fn category(v: i64) -> u8 {
    (64 - v.unsigned_abs().leading_zeros()) as u8
}

fn div_round(num: i64, den: i64) -> i64 {
    let q = (num.abs() + den / 2) / den;
    if num < 0 {
        -q
    } else {
        q
    }
}

/// Quantized coefficients of one level-shifted 8x8 block, natural order.
fn quantize_block(block: &[i64; 64], quant: &[i64; 64]) -> [i64; 64] {
    let mut rows = [0i64; 64];
    for y in 0..8 {
        for u in 0..8 {
            rows[y * 8 + u] = (0..8).map(|x| DCT[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0i64; 64];
    for v in 0..8 {
        for u in 0..8 {
            let s: i64 = (0..8).map(|y| DCT[v][y] * rows[y * 8 + u]).sum();
            out[v * 8 + u] = div_round(s, quant[v * 8 + u] << DCT_SHIFT);
        }
    }
    out
}

struct SizeCoder {
    dc: [u8; 256],
    ac: [u8; 256],
    quant: [i64; 64],
}

impl SizeCoder {
    fn new(quality: u8) -> Self {
        Self {
            dc: code_lengths(&DC_BITS, &DC_VALS),
            ac: code_lengths(&AC_BITS, &AC_VALS),
            quant: quant_table(quality),
        }
    }

    /// Entropy-coded bits for one block given the previous block's DC.
    fn block_bits(&self, coeffs: &[i64; 64], prev_dc: i64) -> u64 {
        let diff = coeffs[0] - prev_dc;
        let cat = category(diff);
        let mut bits = u64::from(self.dc[cat as usize]) + u64::from(cat);

        let mut run = 0u8;
        for &natural in &ZIGZAG[1..] {
            let c = coeffs[natural];
            if c == 0 {
                run += 1;
                continue;
            }
            while run >= 16 {
                bits += u64::from(self.ac[ZRL as usize]);
                run -= 16;
            }
            let size = category(c);
            bits += u64::from(self.ac[((run << 4) | size) as usize]) + u64::from(size);
            run = 0;
        }
        if run > 0 {
            bits += u64::from(self.ac[EOB as usize]);
        }
        bits
    }

    fn channel_bits(&self, img: &Image, channel: usize) -> u64 {
        let (w, h) = (img.width(), img.height());
        let mut total = 0u64;
        let mut prev_dc = 0i64;
        let mut block = [0i64; 64];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for y in 0..8 {
                    for x in 0..8 {
                        let px = img.at_q((bx + x).min(w - 1), (by + y).min(h - 1), channel);
                        block[y * 8 + x] = i64::from(px) - 128;
                    }
                }
                let coeffs = quantize_block(&block, &self.quant);
                total += self.block_bits(&coeffs, prev_dc);
                prev_dc = coeffs[0];
            }
        }
        total
    }
}

/// Entropy-coded payload size in bytes at the given quality.
pub fn jpeg_length_with_quality(img: &Image, quality: u8) -> u64 {
    let coder = SizeCoder::new(quality);
    (0..img.channels())
        .map(|c| coder.channel_bits(img, c).div_ceil(8))
        .sum()
}

/// Entropy-coded payload size in bytes at quality 75.
pub fn jpeg_length(img: &Image) -> u64 {
    jpeg_length_with_quality(img, DEFAULT_QUALITY)
}
