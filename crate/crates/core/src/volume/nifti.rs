//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Little-endian only. Supported datatypes: uint8, int16, float32. Vector
//! volumes use `dim[0] = 4` with `dim[4]` channels. Only the sform affine is
//! honoured; a set qform is ignored with a warning.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{Affine, Grid, LabelVolume, Tissue, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataType {
    Uint8,
    Int16,
    Float32,
}

impl DataType {
    fn code(self) -> i16 {
        match self {
            DataType::Uint8 => 2,
            DataType::Int16 => 4,
            DataType::Float32 => 16,
        }
    }

    fn bytes(self) -> usize {
        match self {
            DataType::Uint8 => 1,
            DataType::Int16 => 2,
            DataType::Float32 => 4,
        }
    }

    fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(DataType::Uint8),
            4 => Ok(DataType::Int16),
            16 => Ok(DataType::Float32),
            other => Err(Error::UnsupportedType(format!(
                "NIfTI datatype code {other}"
            ))),
        }
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().map(|e| e == "gz").unwrap_or(false)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("gzip stream in {}: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    if is_gz(path) {
        let mut enc = GzEncoder::new(Vec::new(), Compression::new(6));
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        let gz = enc.finish().map_err(|e| Error::io(path, e))?;
        f.write_all(&gz).map_err(|e| Error::io(path, e))
    } else {
        f.write_all(bytes).map_err(|e| Error::io(path, e))
    }
}

struct Parsed {
    grid: Grid,
    channels: usize,
    dtype: DataType,
    values: Vec<f64>,
}

fn parse(buf: &[u8]) -> Result<Parsed> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::Format(format!(
            "file too short for a NIfTI-1 header ({} bytes)",
            buf.len()
        )));
    }
    let h = &buf[..HEADER_SIZE];
    if LittleEndian::read_i32(&h[0..4]) != HEADER_SIZE as i32 {
        return Err(Error::Format(
            "sizeof_hdr is not 348 (big-endian or not NIfTI-1)".into(),
        ));
    }
    if &h[344..348] != b"n+1\0" {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"n+1\"",
            &h[344..348]
        )));
    }
    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = LittleEndian::read_i16(&h[40 + 2 * i..42 + 2 * i]);
    }
    let ndim = dim[0];
    if !(1..=4).contains(&ndim) {
        return Err(Error::Format(format!("unsupported dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for a in 0..3 {
        if (a as i16) < ndim {
            if dim[a + 1] <= 0 {
                return Err(Error::Format(format!(
                    "dim[{}] = {} must be positive",
                    a + 1,
                    dim[a + 1]
                )));
            }
            dims[a] = dim[a + 1] as usize;
        }
    }
    let channels = if ndim == 4 {
        if dim[4] <= 0 {
            return Err(Error::Format("dim[4] must be positive".into()));
        }
        dim[4] as usize
    } else {
        1
    };
    let dtype = DataType::from_code(LittleEndian::read_i16(&h[70..72]))?;
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = LittleEndian::read_f32(&h[76 + 4 * i..80 + 4 * i]);
    }
    let spacing = [
        pixdim[1].abs().max(f32::MIN_POSITIVE) as f64,
        pixdim[2].abs().max(f32::MIN_POSITIVE) as f64,
        pixdim[3].abs().max(f32::MIN_POSITIVE) as f64,
    ];
    let vox_offset = LittleEndian::read_f32(&h[108..112]);
    let slope = LittleEndian::read_f32(&h[112..116]);
    let inter = LittleEndian::read_f32(&h[116..120]);
    let qform_code = LittleEndian::read_i16(&h[252..254]);
    let sform_code = LittleEndian::read_i16(&h[254..256]);
    if qform_code > 0 {
        log::warn!("NIfTI qform present (code {qform_code}); ignored, sform is authoritative");
    }
    let affine = if sform_code > 0 {
        let mut rows = [[0.0f64; 4]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                let off = 280 + 16 * r + 4 * c;
                *v = LittleEndian::read_f32(&h[off..off + 4]) as f64;
            }
        }
        Affine::new(rows)?
    } else {
        log::warn!("NIfTI sform not set; using pixdim scaling as the affine");
        Affine::scaled(spacing, [0.0; 3])
    };
    let grid = Grid::new(dims, spacing, affine)?;
    let n = grid.n_voxels() * channels;
    let start = vox_offset as usize;
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Format(format!(
            "vox_offset {vox_offset} inside the header"
        )));
    }
    let need = start + n * dtype.bytes();
    if buf.len() < need {
        return Err(Error::Format(format!(
            "truncated data: need {need} bytes, have {}",
            buf.len()
        )));
    }
    let raw = &buf[start..need];
    let mut file_order = Vec::with_capacity(n);
    match dtype {
        DataType::Uint8 => file_order.extend(raw.iter().map(|&b| b as f64)),
        DataType::Int16 => file_order.extend(
            raw.chunks_exact(2)
                .map(|c| LittleEndian::read_i16(c) as f64),
        ),
        DataType::Float32 => file_order.extend(
            raw.chunks_exact(4)
                .map(|c| LittleEndian::read_f32(c) as f64),
        ),
    }
    if slope != 0.0 && !(slope == 1.0 && inter == 0.0) && slope.is_finite() {
        for v in file_order.iter_mut() {
            *v = *v * slope as f64 + inter as f64;
        }
    }
    // file order: spatial block per channel; memory: channel interleaved
    let nvox = grid.n_voxels();
    let mut values = vec![0.0; n];
    for c in 0..channels {
        for v in 0..nvox {
            values[v * channels + c] = file_order[c * nvox + v];
        }
    }
    Ok(Parsed {
        grid,
        channels,
        dtype,
        values,
    })
}

fn encode(grid: &Grid, channels: usize, values: &[f64], dtype: DataType) -> Result<Vec<u8>> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    let mut dim = [1i16; 8];
    dim[0] = if channels > 1 { 4 } else { 3 };
    for a in 0..3 {
        dim[a + 1] = i16::try_from(grid.dims[a]).map_err(|_| {
            Error::InvalidArgument(format!("dimension {} exceeds NIfTI-1 limit", grid.dims[a]))
        })?;
    }
    dim[4] = i16::try_from(channels).map_err(|_| {
        Error::InvalidArgument(format!("{channels} channels exceeds NIfTI-1 limit"))
    })?;
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..42 + 2 * i], *d);
    }
    LittleEndian::write_i16(&mut h[70..72], dtype.code());
    LittleEndian::write_i16(&mut h[72..74], (dtype.bytes() * 8) as i16);
    let pixdim = [
        1.0f32,
        grid.spacing[0] as f32,
        grid.spacing[1] as f32,
        grid.spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..80 + 4 * i], *p);
    }
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    h[123] = 2; // xyzt_units: mm
    LittleEndian::write_i16(&mut h[254..256], 2); // sform_code: aligned anat
    for (r, row) in grid.affine.rows().iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let off = 280 + 16 * r + 4 * c;
            LittleEndian::write_f32(&mut h[off..off + 4], *v as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let nvox = grid.n_voxels();
    if values.len() != nvox * channels {
        return Err(Error::Shape("value count does not match grid".into()));
    }
    let mut out = h;
    out.reserve(values.len() * dtype.bytes());
    for c in 0..channels {
        for v in 0..nvox {
            let x = values[v * channels + c];
            match dtype {
                DataType::Uint8 => {
                    if !(0.0..=255.0).contains(&x) || x.fract() != 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "value {x} not representable as uint8"
                        )));
                    }
                    out.push(x as u8);
                }
                DataType::Int16 => {
                    if !(-32768.0..=32767.0).contains(&x) || x.fract() != 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "value {x} not representable as int16"
                        )));
                    }
                    let mut b = [0u8; 2];
                    LittleEndian::write_i16(&mut b, x as i16);
                    out.extend_from_slice(&b);
                }
                DataType::Float32 => {
                    let mut b = [0u8; 4];
                    LittleEndian::write_f32(&mut b, x as f32);
                    out.extend_from_slice(&b);
                }
            }
        }
    }
    Ok(out)
}

/// Read a NIfTI-1 volume; returns the values and the on-disk datatype.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<(Volume, DataType)> {
    let path = path.as_ref();
    let p = parse(&read_bytes(path)?)?;
    Ok((Volume::new(p.grid, p.channels, p.values)?, p.dtype))
}

pub fn write_nifti(vol: &Volume, path: impl AsRef<Path>, dtype: DataType) -> Result<()> {
    let bytes = encode(vol.grid(), vol.channels(), vol.data(), dtype)?;
    write_bytes(path.as_ref(), &bytes)
}

/// Read an integer tissue-label volume (codes 0..=4).
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume> {
    let path = path.as_ref();
    let p = parse(&read_bytes(path)?)?;
    if p.dtype == DataType::Float32 {
        return Err(Error::UnsupportedType(
            "label volumes must be uint8 or int16".into(),
        ));
    }
    if p.channels != 1 {
        return Err(Error::Format(
            "label volume must have a single channel".into(),
        ));
    }
    let labels = p
        .values
        .iter()
        .map(|&v| {
            Tissue::from_code(v as i64)
                .ok_or_else(|| Error::Format(format!("invalid tissue label {v}")))
        })
        .collect::<Result<Vec<_>>>()?;
    LabelVolume::new(p.grid, labels)
}

pub fn write_labels(lv: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    let values: Vec<f64> = lv.labels().iter().map(|t| *t as u8 as f64).collect();
    let bytes = encode(lv.grid(), 1, &values, DataType::Uint8)?;
    write_bytes(path.as_ref(), &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(channels: usize) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let affine = Affine::new([
            [1.2, 0.1, 0.0, -30.5],
            [0.0, 1.1, 0.05, 12.25],
            [0.0, 0.0, 1.3, 4.0],
        ])
        .unwrap();
        let grid = Grid::new([5, 4, 3], [1.2, 1.1, 1.3], affine).unwrap();
        let data = (0..grid.n_voxels() * channels)
            .map(|_| (rng.gen::<f32>() * 10.0 - 5.0) as f64)
            .collect();
        Volume::new(grid, channels, data).unwrap()
    }

    #[test]
    fn float32_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for (name, ch) in [("a.nii", 1), ("b.nii.gz", 3)] {
            let v = random_volume(ch);
            let path = dir.path().join(name);
            write_nifti(&v, &path, DataType::Float32).unwrap();
            let (back, dt) = read_nifti(&path).unwrap();
            assert_eq!(dt, DataType::Float32);
            assert_eq!(back.dims(), v.dims());
            assert_eq!(back.channels(), ch);
            for (a, b) in back.data().iter().zip(v.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            for (ra, rb) in back.grid().affine.rows().iter().zip(v.grid().affine.rows()) {
                for (a, b) in ra.iter().zip(rb) {
                    assert_eq!(*a as f32, *b as f32);
                }
            }
        }
    }

    #[test]
    fn header_layout_parsed() {
        // Hand-built 348-byte header, dim[0]=3, 2x3x4 uint8.
        let mut buf = vec![0u8; 352 + 24];
        LittleEndian::write_i32(&mut buf[0..4], 348);
        for (i, d) in [3i16, 2, 3, 4, 1, 1, 1, 1].iter().enumerate() {
            LittleEndian::write_i16(&mut buf[40 + 2 * i..], *d);
        }
        LittleEndian::write_i16(&mut buf[70..], 2);
        LittleEndian::write_i16(&mut buf[72..], 8);
        for (i, p) in [1.0f32, 0.5, 0.75, 2.0].iter().enumerate() {
            LittleEndian::write_f32(&mut buf[76 + 4 * i..], *p);
        }
        LittleEndian::write_f32(&mut buf[108..], 352.0);
        buf[344..348].copy_from_slice(b"n+1\0");
        for (i, b) in buf[352..].iter_mut().enumerate() {
            *b = i as u8;
        }
        let p = parse(&buf).unwrap();
        assert_eq!(p.grid.dims, [2, 3, 4]);
        assert_eq!(p.grid.spacing, [0.5, 0.75, 2.0]);
        assert_eq!(p.dtype, DataType::Uint8);
        assert_eq!(p.values[5], 5.0);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(1);
        let path = dir.path().join("t.nii");
        write_nifti(&v, &path, DataType::Float32).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let truncated = &bytes[..bytes.len() - 7];
        assert!(matches!(parse(truncated), Err(Error::Format(_))));
        bytes[344] = b'x';
        assert!(matches!(parse(&bytes), Err(Error::Format(_))));
        assert!(matches!(parse(&bytes[..100]), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_datatype() {
        let v = random_volume(1);
        let mut bytes = encode(v.grid(), 1, v.data(), DataType::Float32).unwrap();
        LittleEndian::write_i16(&mut bytes[70..72], 64);
        assert!(matches!(parse(&bytes), Err(Error::UnsupportedType(_))));
    }

    #[test]
    fn labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let grid = Grid::axis_aligned([3, 2, 2], [1.0; 3], [0.0; 3]).unwrap();
        let labels = (0..12).map(|i| Tissue::from_code(i % 5).unwrap()).collect();
        let lv = LabelVolume::new(grid, labels).unwrap();
        let path = dir.path().join("l.nii.gz");
        write_labels(&lv, &path).unwrap();
        assert_eq!(read_labels(&path).unwrap(), lv);
    }
}
