//! Wire format of the codec.
//!
//! A stream carries the masked VQ index map and the LIC payload, nothing
//! else. Which grid positions survive masking is a pure function of the
//! schedule and the grid size, so only the schedule id is transmitted.
//!
//! Layout, little-endian:
//!
//! ```text
//! "HDC1" | u8 version | u16 H | u16 W | u8 n | u16 K | u8 schedule_id
//!        | u32 kept_count | kept ids, ceil(log2 K) bits each, MSB first,
//!          zero-padded to a byte | u32 lic_len | lic bytes | u32 crc32
//! ```
//!
//! The CRC-32 covers every byte before it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const MAGIC: [u8; 4] = *b"HDC1";
pub const VERSION: u8 = 1;

/// Bytes of fixed overhead: header through kept_count, lic_len and crc.
pub const FIXED_OVERHEAD_BYTES: usize = 4 + 1 + 2 + 2 + 1 + 2 + 1 + 4 + 4 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaskSchedule {
    #[serde(rename = "FULL_MASK")]
    FullMask,
    #[serde(rename = "KEEP_1_OF_4")]
    Keep1Of4,
    #[serde(rename = "KEEP_1_OF_2")]
    Keep1Of2,
    #[serde(rename = "NO_MASK")]
    NoMask,
}

impl MaskSchedule {
    pub const ALL: [MaskSchedule; 4] = [
        MaskSchedule::FullMask,
        MaskSchedule::Keep1Of4,
        MaskSchedule::Keep1Of2,
        MaskSchedule::NoMask,
    ];

    /// Schedules sampled while training the token predictor.
    pub const TRAINING: [MaskSchedule; 3] = [
        MaskSchedule::Keep1Of2,
        MaskSchedule::Keep1Of4,
        MaskSchedule::FullMask,
    ];

    pub fn id(self) -> u8 {
        match self {
            MaskSchedule::FullMask => 0,
            MaskSchedule::Keep1Of4 => 1,
            MaskSchedule::Keep1Of2 => 2,
            MaskSchedule::NoMask => 3,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.id() == id)
            .ok_or_else(|| Error::CorruptStream(format!("unknown schedule id {id}")))
    }

    /// Fraction of grid positions transmitted, as (numerator, denominator).
    pub fn keep_ratio(self) -> (u32, u32) {
        match self {
            MaskSchedule::FullMask => (0, 1),
            MaskSchedule::Keep1Of4 => (1, 4),
            MaskSchedule::Keep1Of2 => (1, 2),
            MaskSchedule::NoMask => (1, 1),
        }
    }

    pub fn is_kept(self, row: usize, col: usize) -> bool {
        match self {
            MaskSchedule::FullMask => false,
            MaskSchedule::Keep1Of4 => row.is_multiple_of(2) && col.is_multiple_of(2),
            MaskSchedule::Keep1Of2 => (row + col).is_multiple_of(2),
            MaskSchedule::NoMask => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskSchedule::FullMask => "FULL_MASK",
            MaskSchedule::Keep1Of4 => "KEEP_1_OF_4",
            MaskSchedule::Keep1Of2 => "KEEP_1_OF_2",
            MaskSchedule::NoMask => "NO_MASK",
        }
    }
}

impl fmt::Display for MaskSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaskSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        let schedule = match norm.as_str() {
            "FULL_MASK" | "FULL" | "0" => MaskSchedule::FullMask,
            "KEEP_1_OF_4" | "1_4" | "1" => MaskSchedule::Keep1Of4,
            "KEEP_1_OF_2" | "1_2" | "2" => MaskSchedule::Keep1Of2,
            "NO_MASK" | "NONE" | "3" => MaskSchedule::NoMask,
            _ => return Err(Error::Config(format!("unknown mask schedule '{s}'"))),
        };
        Ok(schedule)
    }
}

/// Row-major keep/drop grid; `true` means the id at that position is transmitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub schedule: MaskSchedule,
    pub grid_h: usize,
    pub grid_w: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.grid_w + col]
    }

    /// Flat row-major positions of kept entries.
    pub fn kept_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| !b).map(|(i, _)| i)
    }
}

/// Strided deterministic mask. KEEP_1_OF_4 keeps (even row, even col),
/// KEEP_1_OF_2 keeps a checkerboard anchored at (0, 0).
pub fn make_mask(schedule: MaskSchedule, grid_h: usize, grid_w: usize) -> BinaryMask {
    let bits = (0..grid_h)
        .flat_map(|r| (0..grid_w).map(move |c| schedule.is_kept(r, c)))
        .collect();
    BinaryMask {
        schedule,
        grid_h,
        grid_w,
        bits,
    }
}

/// Number of ids a schedule transmits on a grid, without building the mask.
pub fn kept_count(schedule: MaskSchedule, grid_h: usize, grid_w: usize) -> usize {
    let half_up = |x: usize| x.div_ceil(2);
    match schedule {
        MaskSchedule::FullMask => 0,
        MaskSchedule::Keep1Of4 => half_up(grid_h) * half_up(grid_w),
        MaskSchedule::Keep1Of2 => (grid_h * grid_w).div_ceil(2),
        MaskSchedule::NoMask => grid_h * grid_w,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub ids: Vec<u32>,
}

impl IndexMap {
    pub fn new(grid_h: usize, grid_w: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != grid_h * grid_w {
            return Err(shape_err(format!(
                "index map {grid_h}x{grid_w} needs {} ids, got {}",
                grid_h * grid_w,
                ids.len()
            )));
        }
        Ok(Self {
            grid_h,
            grid_w,
            ids,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.ids[row * self.grid_w + col]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn check_range(&self, codebook_size: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= codebook_size) {
            Some(&id) => Err(Error::Range {
                id,
                codebook_size: codebook_size as u32,
            }),
            None => Ok(()),
        }
    }
}

/// The transmitted part of an index map: kept ids in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedIndexMap {
    pub schedule: MaskSchedule,
    pub grid_h: usize,
    pub grid_w: usize,
    pub kept_ids: Vec<u32>,
}

impl MaskedIndexMap {
    pub fn mask(&self) -> BinaryMask {
        make_mask(self.schedule, self.grid_h, self.grid_w)
    }

    /// Scatter kept ids back onto the grid; masked cells get `fill`.
    pub fn scatter(&self, fill: u32) -> Vec<u32> {
        let mask = self.mask();
        let mut out = vec![fill; self.grid_h * self.grid_w];
        for (pos, &id) in mask.kept_positions().zip(&self.kept_ids) {
            out[pos] = id;
        }
        out
    }
}

pub fn apply_mask(map: &IndexMap, mask: &BinaryMask) -> Result<MaskedIndexMap> {
    if map.grid_h != mask.grid_h || map.grid_w != mask.grid_w {
        return Err(shape_err(format!(
            "mask {}x{} does not match index map {}x{}",
            mask.grid_h, mask.grid_w, map.grid_h, map.grid_w
        )));
    }
    Ok(MaskedIndexMap {
        schedule: mask.schedule,
        grid_h: map.grid_h,
        grid_w: map.grid_w,
        kept_ids: mask.kept_positions().map(|p| map.ids[p]).collect(),
    })
}

/// Bits per transmitted id: ceil(log2 K).
pub fn id_bits(codebook_size: usize) -> u32 {
    if codebook_size <= 1 {
        0
    } else {
        usize::BITS - (codebook_size - 1).leading_zeros()
    }
}

/// MSB-first bit writer.
#[derive(Debug, Default)]
pub struct BitWriter {
    bytes: Vec<u8>,
    filled: u32,
}

impl BitWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, value: u64, bits: u32) {
        for i in (0..bits).rev() {
            if self.filled == 0 {
                self.bytes.push(0);
            }
            let bit = ((value >> i) & 1) as u8;
            let last = self.bytes.last_mut().expect("pushed above");
            *last |= bit << (7 - self.filled);
            self.filled = (self.filled + 1) % 8;
        }
    }

    /// Zero-pads to the next byte boundary.
    pub fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

#[derive(Debug)]
pub struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn read(&mut self, bits: u32) -> Option<u64> {
        let mut value = 0u64;
        for _ in 0..bits {
            let byte = *self.bytes.get(self.pos / 8)?;
            let bit = (byte >> (7 - self.pos % 8)) & 1;
            value = (value << 1) | bit as u64;
            self.pos += 1;
        }
        Some(value)
    }

    pub fn bits_consumed(&self) -> usize {
        self.pos
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamHeader {
    pub version: u8,
    pub height: u16,
    pub width: u16,
    /// VQ downsampling factor n.
    pub patch_size: u8,
    pub codebook_size: u16,
}

impl StreamHeader {
    pub fn new(height: usize, width: usize, patch_size: usize, codebook_size: usize) -> Result<Self> {
        let fits = |v: usize, max: usize| v >= 1 && v <= max;
        if !fits(height, u16::MAX as usize)
            || !fits(width, u16::MAX as usize)
            || !fits(patch_size, u8::MAX as usize)
            || !fits(codebook_size, u16::MAX as usize)
        {
            return Err(Error::Config(format!(
                "header fields out of range: {height}x{width}, n={patch_size}, K={codebook_size}"
            )));
        }
        Ok(Self {
            version: VERSION,
            height: height as u16,
            width: width as u16,
            patch_size: patch_size as u8,
            codebook_size: codebook_size as u16,
        })
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        let n = self.patch_size as usize;
        let (h, w) = (self.height as usize, self.width as usize);
        if n == 0 || h % n != 0 || w % n != 0 {
            return Err(shape_err(format!("{h}x{w} is not divisible by n={n}")));
        }
        Ok((h / n, w / n))
    }
}

/// A decoded stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitstream {
    pub header: StreamHeader,
    pub masked: MaskedIndexMap,
    pub lic_payload: Vec<u8>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        pack_stream(&self.masked, &self.lic_payload, &self.header)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (masked, lic_payload, header) = unpack_stream(bytes)?;
        Ok(Self {
            header,
            masked,
            lic_payload,
        })
    }

    pub fn budget(&self) -> BitBudget {
        BitBudget::for_parts(
            self.masked.kept_ids.len(),
            self.header.codebook_size as usize,
            self.lic_payload.len(),
        )
    }
}

pub fn pack_stream(
    masked: &MaskedIndexMap,
    lic_payload: &[u8],
    header: &StreamHeader,
) -> Result<Vec<u8>> {
    let (grid_h, grid_w) = header.grid()?;
    if (grid_h, grid_w) != (masked.grid_h, masked.grid_w) {
        return Err(shape_err(format!(
            "masked map is {}x{} but header implies {grid_h}x{grid_w}",
            masked.grid_h, masked.grid_w
        )));
    }
    let expected = kept_count(masked.schedule, grid_h, grid_w);
    if masked.kept_ids.len() != expected {
        return Err(shape_err(format!(
            "{} keeps {expected} ids on a {grid_h}x{grid_w} grid, got {}",
            masked.schedule,
            masked.kept_ids.len()
        )));
    }
    let k = header.codebook_size as usize;
    let bits = id_bits(k);
    let mut writer = BitWriter::new();
    for &id in &masked.kept_ids {
        if id as usize >= k {
            return Err(Error::Range {
                id,
                codebook_size: k as u32,
            });
        }
        writer.write(id as u64, bits);
    }
    let packed = writer.finish();
    let lic_len = u32::try_from(lic_payload.len())
        .map_err(|_| Error::Config("LIC payload exceeds 4 GiB".into()))?;

    let mut out = Vec::with_capacity(FIXED_OVERHEAD_BYTES + packed.len() + lic_payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(header.version);
    out.extend_from_slice(&header.height.to_le_bytes());
    out.extend_from_slice(&header.width.to_le_bytes());
    out.push(header.patch_size);
    out.extend_from_slice(&header.codebook_size.to_le_bytes());
    out.push(masked.schedule.id());
    out.extend_from_slice(&(masked.kept_ids.len() as u32).to_le_bytes());
    out.extend_from_slice(&packed);
    out.extend_from_slice(&lic_len.to_le_bytes());
    out.extend_from_slice(lic_payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptStream("truncated stream".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn unpack_stream(bytes: &[u8]) -> Result<(MaskedIndexMap, Vec<u8>, StreamHeader)> {
    let corrupt = |m: String| Error::CorruptStream(m);
    if bytes.len() < FIXED_OVERHEAD_BYTES {
        return Err(corrupt(format!("{} bytes is shorter than any stream", bytes.len())));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    if bytes[..4] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(corrupt(format!(
            "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }

    let mut cur = Cursor { bytes: body, pos: 4 };
    let version = cur.u8()?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let header = StreamHeader {
        version,
        height: cur.u16()?,
        width: cur.u16()?,
        patch_size: cur.u8()?,
        codebook_size: cur.u16()?,
    };
    if header.codebook_size == 0 {
        return Err(corrupt("codebook size 0".into()));
    }
    let (grid_h, grid_w) = header
        .grid()
        .map_err(|e| corrupt(format!("bad dimensions: {e}")))?;
    let schedule = MaskSchedule::from_id(cur.u8()?)?;
    let count = cur.u32()? as usize;
    let expected = kept_count(schedule, grid_h, grid_w);
    if count != expected {
        return Err(corrupt(format!(
            "kept count {count} disagrees with {schedule} on {grid_h}x{grid_w} ({expected})"
        )));
    }

    let k = header.codebook_size as usize;
    let bits = id_bits(k);
    let packed_len = (count * bits as usize).div_ceil(8);
    let packed = cur.take(packed_len)?;
    let mut reader = BitReader::new(packed);
    let mut kept_ids = Vec::with_capacity(count);
    for _ in 0..count {
        let id = reader.read(bits).expect("length checked above") as u32;
        if id as usize >= k {
            return Err(Error::Range {
                id,
                codebook_size: k as u32,
            });
        }
        kept_ids.push(id);
    }
    let pad = packed_len * 8 - reader.bits_consumed();
    if pad > 0 && reader.read(pad as u32) != Some(0) {
        return Err(corrupt("non-zero index padding".into()));
    }

    let lic_len = cur.u32()? as usize;
    let lic_payload = cur.take(lic_len)?.to_vec();
    if cur.pos != body.len() {
        return Err(corrupt(format!(
            "{} trailing bytes before checksum",
            body.len() - cur.pos
        )));
    }
    let masked = MaskedIndexMap {
        schedule,
        grid_h,
        grid_w,
        kept_ids,
    };
    Ok((masked, lic_payload, header))
}

/// Bit accounting of one stream. `overhead_bits` holds everything that is
/// neither an index bit nor a LIC payload bit: header fields, length
/// prefixes, the checksum and index padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitBudget {
    pub index_bits: u64,
    pub lic_bits: u64,
    pub overhead_bits: u64,
}

impl BitBudget {
    pub fn for_parts(kept: usize, codebook_size: usize, lic_bytes: usize) -> Self {
        let index_bits = kept as u64 * id_bits(codebook_size) as u64;
        let packed_bytes = index_bits.div_ceil(8);
        let total = 8 * (FIXED_OVERHEAD_BYTES as u64 + packed_bytes + lic_bytes as u64);
        let lic_bits = 8 * lic_bytes as u64;
        Self {
            index_bits,
            lic_bits,
            overhead_bits: total - index_bits - lic_bits,
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.index_bits + self.lic_bits + self.overhead_bits
    }

    pub fn counted_bits(&self, include_header: bool) -> u64 {
        self.index_bits + self.lic_bits + if include_header { self.overhead_bits } else { 0 }
    }
}

pub fn compute_bpp(budget: &BitBudget, height: usize, width: usize, include_header: bool) -> f64 {
    budget.counted_bits(include_header) as f64 / (height * width) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn masks_trivial_cases() {
        assert!(make_mask(MaskSchedule::NoMask, 2, 2).bits.iter().all(|&b| b));
        assert_eq!(make_mask(MaskSchedule::FullMask, 3, 5).popcount(), 0);
        assert_eq!(make_mask(MaskSchedule::Keep1Of4, 16, 16).popcount(), 64);
        assert_eq!(make_mask(MaskSchedule::Keep1Of2, 16, 16).popcount(), 128);
    }

    #[test]
    fn kept_count_matches_mask_on_odd_grids() {
        for h in 1..9 {
            for w in 1..9 {
                for s in MaskSchedule::ALL {
                    assert_eq!(kept_count(s, h, w), make_mask(s, h, w).popcount(), "{s} {h}x{w}");
                }
            }
        }
    }

    #[test]
    fn apply_mask_identity_and_zero() {
        let map = IndexMap::new(2, 2, vec![7, 3, 1, 9]).unwrap();
        let all = apply_mask(&map, &make_mask(MaskSchedule::NoMask, 2, 2)).unwrap();
        assert_eq!(all.kept_ids, vec![7, 3, 1, 9]);
        let none = apply_mask(&map, &make_mask(MaskSchedule::FullMask, 2, 2)).unwrap();
        assert!(none.kept_ids.is_empty());
    }

    #[test]
    fn apply_mask_keep_quarter_against_walk() {
        let map = IndexMap::new(4, 4, (0..16).collect()).unwrap();
        let got = apply_mask(&map, &make_mask(MaskSchedule::Keep1Of4, 4, 4)).unwrap();
        let mut expected = Vec::new();
        for r in (0..4).step_by(2) {
            for c in (0..4).step_by(2) {
                expected.push((r * 4 + c) as u32);
            }
        }
        assert_eq!(got.kept_ids, expected);
        assert_eq!(got.kept_ids, vec![0, 2, 8, 10]);
    }

    #[test]
    fn apply_mask_shape_error() {
        let map = IndexMap::new(2, 2, vec![0; 4]).unwrap();
        assert!(matches!(
            apply_mask(&map, &make_mask(MaskSchedule::NoMask, 2, 3)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn id_bit_widths() {
        assert_eq!(id_bits(1024), 10);
        assert_eq!(id_bits(1025), 11);
        assert_eq!(id_bits(64), 6);
        assert_eq!(id_bits(2), 1);
        assert_eq!(id_bits(3), 2);
    }

    fn header(h: usize, w: usize, k: usize) -> StreamHeader {
        StreamHeader::new(h, w, 16, k).unwrap()
    }

    #[test]
    fn empty_stream_round_trips() {
        let masked = MaskedIndexMap {
            schedule: MaskSchedule::FullMask,
            grid_h: 1,
            grid_w: 1,
            kept_ids: vec![],
        };
        let bytes = pack_stream(&masked, &[], &header(16, 16, 1024)).unwrap();
        assert_eq!(bytes.len(), FIXED_OVERHEAD_BYTES);
        let (m, p, _) = unpack_stream(&bytes).unwrap();
        assert_eq!(m, masked);
        assert!(p.is_empty());
    }

    #[test]
    fn single_max_id_uses_ten_bits() {
        let masked = MaskedIndexMap {
            schedule: MaskSchedule::NoMask,
            grid_h: 1,
            grid_w: 1,
            kept_ids: vec![1023],
        };
        let bytes = pack_stream(&masked, &[], &header(16, 16, 1024)).unwrap();
        let budget = Bitstream::from_bytes(&bytes).unwrap().budget();
        assert_eq!(budget.index_bits, 10);
        // 10 bits occupy two bytes; 6 padding bits land in the overhead.
        assert_eq!(bytes.len(), FIXED_OVERHEAD_BYTES + 2);
        assert_eq!(&bytes[17..19], &[0b1111_1111, 0b1100_0000]);
    }

    #[test]
    fn out_of_range_id_rejected() {
        let masked = MaskedIndexMap {
            schedule: MaskSchedule::NoMask,
            grid_h: 1,
            grid_w: 1,
            kept_ids: vec![64],
        };
        assert!(matches!(
            pack_stream(&masked, &[], &header(16, 16, 64)),
            Err(Error::Range { id: 64, .. })
        ));
    }

    #[test]
    fn corruption_detected() {
        let masked = MaskedIndexMap {
            schedule: MaskSchedule::NoMask,
            grid_h: 1,
            grid_w: 2,
            kept_ids: vec![5, 6],
        };
        let good = pack_stream(&masked, &[1, 2, 3], &header(16, 32, 64)).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(unpack_stream(&bad_magic), Err(Error::CorruptStream(_))));
        for i in 4..good.len() {
            let mut flipped = good.clone();
            flipped[i] ^= 0x10;
            assert!(unpack_stream(&flipped).is_err(), "flip at byte {i} went unnoticed");
        }
        assert!(unpack_stream(&good[..good.len() - 1]).is_err());
    }

    #[test]
    fn bpp_reference_values() {
        let full = BitBudget::for_parts(256, 1024, 0);
        assert_eq!(compute_bpp(&full, 256, 256, false), 10.0 / 256.0);
        let empty = BitBudget::for_parts(0, 1024, 0);
        assert_eq!(compute_bpp(&empty, 256, 256, false), 0.0);
        let quarter = BitBudget::for_parts(kept_count(MaskSchedule::Keep1Of4, 16, 16), 1024, 0);
        assert_eq!(compute_bpp(&quarter, 256, 256, false), 10.0 / 256.0 / 4.0);
    }

    #[test]
    fn schedule_names_parse() {
        for s in MaskSchedule::ALL {
            assert_eq!(s.name().parse::<MaskSchedule>().unwrap(), s);
            assert_eq!(s.id().to_string().parse::<MaskSchedule>().unwrap(), s);
        }
        assert_eq!("1_4".parse::<MaskSchedule>().unwrap(), MaskSchedule::Keep1Of4);
        assert!("3_4".parse::<MaskSchedule>().is_err());
    }

    fn arb_stream() -> impl Strategy<Value = Bitstream> {
        (1usize..6, 1usize..6, 1usize..13, 0usize..4)
            .prop_flat_map(|(gh, gw, kbits, sched)| {
                let k = (1usize << kbits) - (kbits > 3) as usize;
                let schedule = MaskSchedule::ALL[sched];
                let count = kept_count(schedule, gh, gw);
                (
                    Just((gh, gw, k, schedule)),
                    proptest::collection::vec(0..k as u32, count),
                    proptest::collection::vec(any::<u8>(), 0..64),
                )
            })
            .prop_map(|((gh, gw, k, schedule), kept_ids, lic_payload)| Bitstream {
                header: StreamHeader::new(gh * 16, gw * 16, 16, k).unwrap(),
                masked: MaskedIndexMap {
                    schedule,
                    grid_h: gh,
                    grid_w: gw,
                    kept_ids,
                },
                lic_payload,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn pack_unpack_round_trip(stream in arb_stream()) {
            let bytes = stream.to_bytes().unwrap();
            prop_assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), stream.clone());
            prop_assert_eq!(stream.budget().total_bits(), 8 * bytes.len() as u64);
        }

        #[test]
        fn bpp_monotone_in_keep_ratio(gh in 1usize..20, gw in 1usize..20) {
            let ordered = [MaskSchedule::FullMask, MaskSchedule::Keep1Of4, MaskSchedule::Keep1Of2, MaskSchedule::NoMask];
            let bpps: Vec<f64> = ordered
                .iter()
                .map(|&s| compute_bpp(&BitBudget::for_parts(kept_count(s, gh, gw), 1024, 100), gh * 16, gw * 16, true))
                .collect();
            prop_assert!(bpps.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
