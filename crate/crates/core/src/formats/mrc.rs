//! MRC2014 image stacks, mode 2 (32-bit IEEE real) only.
//!
//! Layout: a fixed 1024-byte header of 4-byte words, an optional extended
//! header of `NSYMBT` bytes, then `nx * ny * nz` samples stored row-major.
//! Files are always written little-endian; either byte order is accepted on
//! read, as indicated by the machine stamp at byte 212.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};

use super::FormatError;
use crate::image::Image;

pub const MRC_HEADER_LEN: usize = 1024;
const MODE_FLOAT32: i32 = 2;
const STAMP_LE: [u8; 4] = [0x44, 0x44, 0x00, 0x00];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endianness {
    Little,
    Big,
}

/// All MRC2014 header words. Statistics (`dmin`, `dmax`, `dmean`, `rms`)
/// are recomputed on write.
#[derive(Debug, Clone, PartialEq)]
pub struct MrcHeader {
    pub nx: i32,
    pub ny: i32,
    pub nz: i32,
    pub mode: i32,
    pub start: [i32; 3],
    pub sampling: [i32; 3],
    pub cell_lengths: [f32; 3],
    pub cell_angles: [f32; 3],
    pub axis_map: [i32; 3],
    pub dmin: f32,
    pub dmax: f32,
    pub dmean: f32,
    pub ispg: i32,
    pub nsymbt: i32,
    pub extra1: [u8; 8],
    pub exttyp: [u8; 4],
    pub nversion: i32,
    pub extra2: [u8; 84],
    pub origin: [f32; 3],
    pub map: [u8; 4],
    pub machst: [u8; 4],
    pub rms: f32,
    pub nlabl: i32,
    pub labels: [[u8; 80]; 10],
}

impl MrcHeader {
    /// Header for a fresh stack of `n` square images.
    pub fn for_stack(side: usize, n: usize, pixel_size: f64) -> Self {
        let side_i = side as i32;
        let mut labels = [[b' '; 80]; 10];
        let text = b"cryo2d";
        labels[0][..text.len()].copy_from_slice(text);
        Self {
            nx: side_i,
            ny: side_i,
            nz: n as i32,
            mode: MODE_FLOAT32,
            start: [0; 3],
            sampling: [side_i, side_i, 1],
            cell_lengths: [
                (pixel_size * side as f64) as f32,
                (pixel_size * side as f64) as f32,
                pixel_size as f32,
            ],
            cell_angles: [90.0; 3],
            axis_map: [1, 2, 3],
            dmin: 0.0,
            dmax: 0.0,
            dmean: 0.0,
            ispg: 0,
            nsymbt: 0,
            extra1: [0; 8],
            exttyp: [0; 4],
            nversion: 20140,
            extra2: [0; 84],
            origin: [0.0; 3],
            map: *b"MAP ",
            machst: STAMP_LE,
            rms: 0.0,
            nlabl: 1,
            labels,
        }
    }

    fn parse<B: ByteOrder>(buf: &[u8]) -> Self {
        let i = |off: usize| B::read_i32(&buf[off..off + 4]);
        let f = |off: usize| B::read_f32(&buf[off..off + 4]);
        let mut labels = [[0u8; 80]; 10];
        for (k, label) in labels.iter_mut().enumerate() {
            label.copy_from_slice(&buf[224 + 80 * k..304 + 80 * k]);
        }
        Self {
            nx: i(0),
            ny: i(4),
            nz: i(8),
            mode: i(12),
            start: [i(16), i(20), i(24)],
            sampling: [i(28), i(32), i(36)],
            cell_lengths: [f(40), f(44), f(48)],
            cell_angles: [f(52), f(56), f(60)],
            axis_map: [i(64), i(68), i(72)],
            dmin: f(76),
            dmax: f(80),
            dmean: f(84),
            ispg: i(88),
            nsymbt: i(92),
            extra1: buf[96..104].try_into().unwrap(),
            exttyp: buf[104..108].try_into().unwrap(),
            nversion: i(108),
            extra2: buf[112..196].try_into().unwrap(),
            origin: [f(196), f(200), f(204)],
            map: buf[208..212].try_into().unwrap(),
            machst: buf[212..216].try_into().unwrap(),
            rms: f(216),
            nlabl: i(220),
            labels,
        }
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MRC_HEADER_LEN);
        let put_i = |out: &mut Vec<u8>, v: i32| out.write_i32::<LittleEndian>(v).unwrap();
        for v in [self.nx, self.ny, self.nz, self.mode] {
            put_i(&mut out, v);
        }
        for v in self.start.iter().chain(&self.sampling) {
            put_i(&mut out, *v);
        }
        for v in self.cell_lengths.iter().chain(&self.cell_angles) {
            out.write_f32::<LittleEndian>(*v).unwrap();
        }
        for v in self.axis_map {
            put_i(&mut out, v);
        }
        for v in [self.dmin, self.dmax, self.dmean] {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        put_i(&mut out, self.ispg);
        put_i(&mut out, self.nsymbt);
        out.extend_from_slice(&self.extra1);
        out.extend_from_slice(&self.exttyp);
        put_i(&mut out, self.nversion);
        out.extend_from_slice(&self.extra2);
        for v in self.origin {
            out.write_f32::<LittleEndian>(v).unwrap();
        }
        out.extend_from_slice(&self.map);
        out.extend_from_slice(&self.machst);
        out.write_f32::<LittleEndian>(self.rms).unwrap();
        put_i(&mut out, self.nlabl);
        for label in &self.labels {
            out.extend_from_slice(label);
        }
        debug_assert_eq!(out.len(), MRC_HEADER_LEN);
        out
    }
}

/// A stack of square mode-2 images.
#[derive(Debug, Clone, PartialEq)]
pub struct MrcStack {
    pub header: MrcHeader,
    pub extended_header: Vec<u8>,
    data: Vec<f32>,
}

impl MrcStack {
    pub fn new(side: usize, pixel_size: f64, data: Vec<f32>) -> Result<Self, FormatError> {
        let per = side * side;
        if side == 0 || data.is_empty() || data.len() % per != 0 {
            return Err(FormatError::Invalid(format!(
                "{} samples do not form a non-empty stack of {side}x{side} images",
                data.len()
            )));
        }
        let n = data.len() / per;
        Ok(Self { header: MrcHeader::for_stack(side, n, pixel_size), extended_header: Vec::new(), data })
    }

    pub fn from_images(images: &[Image], pixel_size: f64) -> Result<Self, FormatError> {
        let side = images.first().map(Image::side).unwrap_or(0);
        if images.iter().any(|im| im.side() != side) {
            return Err(FormatError::Invalid("images in a stack must share one size".into()));
        }
        let data = images.iter().flat_map(|im| im.data().iter().map(|&v| v as f32)).collect();
        Self::new(side, pixel_size, data)
    }

    pub fn n_images(&self) -> usize {
        self.header.nz as usize
    }

    pub fn side(&self) -> usize {
        self.header.nx as usize
    }

    /// Å per pixel, from the cell length and sampling along x (1.0 if unset).
    pub fn pixel_size(&self) -> f64 {
        let mx = self.header.sampling[0];
        let len = self.header.cell_lengths[0];
        if mx > 0 && len > 0.0 {
            len as f64 / mx as f64
        } else {
            1.0
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn image_data(&self, index: usize) -> &[f32] {
        let per = self.side() * self.side();
        &self.data[index * per..(index + 1) * per]
    }

    pub fn image(&self, index: usize) -> Image {
        let data = self.image_data(index).iter().map(|&v| v as f64).collect();
        Image::from_vec(self.side(), data).expect("stack images are square")
    }

    pub fn images(&self) -> Vec<Image> {
        (0..self.n_images()).map(|i| self.image(i)).collect()
    }

    /// (min, max, mean, rms) over non-NaN samples.
    fn statistics(&self) -> (f32, f32, f32, f32) {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let (mut sum, mut count) = (0.0f64, 0usize);
        for &v in self.data.iter().filter(|v| !v.is_nan()) {
            let v = v as f64;
            min = min.min(v);
            max = max.max(v);
            sum += v;
            count += 1;
        }
        if count == 0 {
            return (0.0, 0.0, 0.0, 0.0);
        }
        let mean = sum / count as f64;
        let var = self
            .data
            .iter()
            .filter(|v| !v.is_nan())
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / count as f64;
        (min as f32, max as f32, mean as f32, var.sqrt() as f32)
    }
}

fn detect_endianness(buf: &[u8]) -> Result<Endianness, FormatError> {
    match buf[212] {
        0x44 => return Ok(Endianness::Little),
        0x11 => return Ok(Endianness::Big),
        _ => {}
    }
    // Older writers leave the stamp blank; fall back on a plausible mode word.
    let plausible = |mode: i32, nx: i32| (0..=16).contains(&mode) && nx > 0;
    if plausible(LittleEndian::read_i32(&buf[12..16]), LittleEndian::read_i32(&buf[0..4])) {
        Ok(Endianness::Little)
    } else if plausible(BigEndian::read_i32(&buf[12..16]), BigEndian::read_i32(&buf[0..4])) {
        Ok(Endianness::Big)
    } else {
        Err(FormatError::MalformedHeader {
            offset: 212,
            reason: format!("unrecognized machine stamp {:02x?}", &buf[212..216]),
        })
    }
}

pub(crate) fn decode_mrc(bytes: &[u8]) -> Result<MrcStack, FormatError> {
    if bytes.len() < MRC_HEADER_LEN {
        return Err(FormatError::Truncated { expected: MRC_HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    let endian = detect_endianness(bytes)?;
    let header = match endian {
        Endianness::Little => MrcHeader::parse::<LittleEndian>(&bytes[..MRC_HEADER_LEN]),
        Endianness::Big => MrcHeader::parse::<BigEndian>(&bytes[..MRC_HEADER_LEN]),
    };
    for (offset, name, v) in [(0, "nx", header.nx), (4, "ny", header.ny), (8, "nz", header.nz)] {
        if v <= 0 {
            return Err(FormatError::MalformedHeader { offset, reason: format!("{name} = {v} must be positive") });
        }
    }
    if header.mode != MODE_FLOAT32 {
        return Err(FormatError::UnsupportedMode { mode: header.mode, offset: 12 });
    }
    if header.nx != header.ny {
        return Err(FormatError::MalformedHeader {
            offset: 4,
            reason: format!("images must be square, found {}x{}", header.nx, header.ny),
        });
    }
    if header.nsymbt < 0 {
        return Err(FormatError::MalformedHeader {
            offset: 92,
            reason: format!("negative extended header length {}", header.nsymbt),
        });
    }
    let ext_len = header.nsymbt as usize;
    let n_samples = header.nx as u64 * header.ny as u64 * header.nz as u64;
    let data_start = (MRC_HEADER_LEN + ext_len) as u64;
    let expected = data_start + 4 * n_samples;
    if (bytes.len() as u64) < expected {
        return Err(FormatError::Truncated { expected, actual: bytes.len() as u64 });
    }
    if (bytes.len() as u64) > expected {
        log::warn!("ignoring {} trailing bytes after MRC data section", bytes.len() as u64 - expected);
    }
    let extended_header = bytes[MRC_HEADER_LEN..MRC_HEADER_LEN + ext_len].to_vec();
    let raw = &bytes[data_start as usize..expected as usize];
    let mut data = vec![0f32; n_samples as usize];
    match endian {
        Endianness::Little => LittleEndian::read_f32_into(raw, &mut data),
        Endianness::Big => BigEndian::read_f32_into(raw, &mut data),
    }
    Ok(MrcStack { header, extended_header, data })
}

pub(crate) fn encode_mrc(stack: &MrcStack) -> Result<Vec<u8>, FormatError> {
    if stack.data.is_empty() {
        return Err(FormatError::Invalid("cannot write an empty stack".into()));
    }
    let mut header = stack.header.clone();
    let (dmin, dmax, dmean, rms) = stack.statistics();
    header.dmin = dmin;
    header.dmax = dmax;
    header.dmean = dmean;
    header.rms = rms;
    header.mode = MODE_FLOAT32;
    header.nsymbt = stack.extended_header.len() as i32;
    header.machst = STAMP_LE;
    header.map = *b"MAP ";

    let mut out = header.encode();
    out.extend_from_slice(&stack.extended_header);
    out.reserve(stack.data.len() * 4);
    for &v in &stack.data {
        out.write_f32::<LittleEndian>(v).unwrap();
    }
    Ok(out)
}

/// Read a mode-2 MRC/MRCS stack, honoring the machine stamp.
pub fn read_mrc_stack(path: impl AsRef<Path>) -> Result<MrcStack, FormatError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FormatError::Io { path: path.to_path_buf(), source })?;
    decode_mrc(&bytes)
}

/// Write a stack little-endian with freshly computed statistics.
/// NaN samples are written unchanged and ignored by the statistics.
pub fn write_mrc_stack(stack: &MrcStack, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    let bytes = encode_mrc(stack)?;
    let io_err = |source| FormatError::Io { path: path.to_path_buf(), source };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(io_err)?;
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_header(nx: i32, ny: i32, nz: i32, mode: i32) -> Vec<u8> {
        let mut h = vec![0u8; MRC_HEADER_LEN];
        LittleEndian::write_i32(&mut h[0..4], nx);
        LittleEndian::write_i32(&mut h[4..8], ny);
        LittleEndian::write_i32(&mut h[8..12], nz);
        LittleEndian::write_i32(&mut h[12..16], mode);
        h[208..212].copy_from_slice(b"MAP ");
        h[212..216].copy_from_slice(&STAMP_LE);
        h
    }

    #[test]
    fn zero_payload_reads_as_zero_image() {
        let mut bytes = raw_header(4, 4, 1, 2);
        bytes.extend(std::iter::repeat(0u8).take(64));
        let stack = decode_mrc(&bytes).unwrap();
        assert_eq!(stack.n_images(), 1);
        assert_eq!(stack.side(), 4);
        assert!(stack.image(0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mode_zero_is_rejected_by_name() {
        let mut bytes = raw_header(4, 4, 1, 0);
        bytes.extend(std::iter::repeat(0u8).take(16));
        let err = decode_mrc(&bytes).unwrap_err();
        match err {
            FormatError::UnsupportedMode { mode, offset } => {
                assert_eq!(mode, 0);
                assert_eq!(offset, 12);
            }
            other => panic!("unexpected error {other}"),
        }
        assert!(decode_mrc(&bytes).unwrap_err().to_string().contains("mode 0"));
    }

    #[test]
    fn truncated_data_reports_offset() {
        let mut bytes = raw_header(4, 4, 2, 2);
        bytes.extend(std::iter::repeat(0u8).take(100));
        match decode_mrc(&bytes).unwrap_err() {
            FormatError::Truncated { expected, actual } => {
                assert_eq!(expected, 1024 + 128);
                assert_eq!(actual, 1124);
            }
            other => panic!("unexpected error {other}"),
        }
        assert!(matches!(decode_mrc(&bytes[..500]), Err(FormatError::Truncated { expected: 1024, .. })));
    }

    #[test]
    fn extended_header_is_skipped() {
        let mut bytes = raw_header(2, 2, 1, 2);
        LittleEndian::write_i32(&mut bytes[92..96], 8);
        bytes.extend([7u8; 8]);
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend(v.to_le_bytes());
        }
        let stack = decode_mrc(&bytes).unwrap();
        assert_eq!(stack.extended_header, vec![7u8; 8]);
        assert_eq!(stack.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(encode_mrc(&stack).unwrap(), bytes_with_stats(&bytes, &stack));
    }

    fn bytes_with_stats(original: &[u8], stack: &MrcStack) -> Vec<u8> {
        let mut expect = original.to_vec();
        let (mn, mx, mean, rms) = stack.statistics();
        LittleEndian::write_f32(&mut expect[76..80], mn);
        LittleEndian::write_f32(&mut expect[80..84], mx);
        LittleEndian::write_f32(&mut expect[84..88], mean);
        LittleEndian::write_f32(&mut expect[216..220], rms);
        expect
    }

    #[test]
    fn ones_stack_has_expected_payload() {
        let stack = MrcStack::new(3, 1.5, vec![1.0; 9]).unwrap();
        let bytes = encode_mrc(&stack).unwrap();
        assert_eq!(bytes.len(), MRC_HEADER_LEN + 4 * 9);
        for chunk in bytes[MRC_HEADER_LEN..].chunks(4) {
            assert_eq!(chunk, 1.0f32.to_le_bytes());
        }
        assert_eq!(LittleEndian::read_f32(&bytes[84..88]), 1.0);
        assert!((decode_mrc(&bytes).unwrap().pixel_size() - 1.5).abs() < 1e-6);
    }

    #[test]
    fn nan_passes_through_and_is_ignored_by_stats() {
        let stack = MrcStack::new(2, 1.0, vec![1.0, f32::NAN, 3.0, 5.0]).unwrap();
        let bytes = encode_mrc(&stack).unwrap();
        let back = decode_mrc(&bytes).unwrap();
        assert!(back.data()[1].is_nan());
        assert_eq!(back.header.dmin, 1.0);
        assert_eq!(back.header.dmax, 5.0);
        assert_eq!(back.header.dmean, 3.0);
    }

    #[test]
    fn big_endian_twin_reads_identically() {
        let values = [0.5f32, -2.25, 1e-3, 7.0];
        let stack = MrcStack::new(2, 2.0, values.to_vec()).unwrap();
        let le = encode_mrc(&stack).unwrap();
        // byte-swap every 4-byte word except the raw byte fields
        let mut be = le.clone();
        let raw_ranges = [(96usize, 108usize), (112, 196), (208, 216), (224, 1024)];
        for off in (0..le.len()).step_by(4) {
            if raw_ranges.iter().any(|&(a, b)| off >= a && off < b) {
                continue;
            }
            be[off..off + 4].reverse();
        }
        be[212..216].copy_from_slice(&[0x11, 0x11, 0x00, 0x00]);
        let a = decode_mrc(&le).unwrap();
        let b = decode_mrc(&be).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(b.side(), 2);
        assert_eq!(a.pixel_size(), b.pixel_size());
    }
}
