//! MRtrix `.tck` streamline files: an ASCII header ended by `END`, then
//! little-endian float32 triplets with a NaN row after every streamline and
//! an Inf row at the end.

use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volume::Point3;

const MAGIC: &str = "mrtrix tracks";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TckFile {
    pub streamlines: Vec<Vec<Point3>>,
    /// Header entries other than `count`, `datatype` and `file`, in file order.
    pub properties: Vec<(String, String)>,
}

fn header_text(count: usize, props: &[(String, String)], offset: usize) -> String {
    let mut h = format!("{MAGIC}\n");
    for (k, v) in props {
        h.push_str(&format!(
            "{}: {}\n",
            k.replace(['\n', ':'], " "),
            v.replace('\n', " ")
        ));
    }
    h.push_str(&format!(
        "count: {count}\ndatatype: Float32LE\nfile: . {offset}\nEND\n"
    ));
    h
}

/// Serialises streamlines to TCK bytes.
pub fn encode_tck<'a, I>(streamlines: I, props: &[(String, String)]) -> Vec<u8>
where
    I: IntoIterator<Item = &'a [Point3]>,
{
    let mut body = Vec::new();
    let mut count = 0usize;
    let push = |v: [f32; 3], body: &mut Vec<u8>| {
        let mut b = [0u8; 12];
        LittleEndian::write_f32_into(&v, &mut b);
        body.extend_from_slice(&b);
    };
    for line in streamlines {
        count += 1;
        for p in line {
            push([p[0] as f32, p[1] as f32, p[2] as f32], &mut body);
        }
        push([f32::NAN; 3], &mut body);
    }
    push([f32::INFINITY; 3], &mut body);
    // The offset is part of the header, so iterate until its digit count settles.
    let mut offset = 0;
    let header = loop {
        let h = header_text(count, props, offset);
        if h.len() == offset {
            break h;
        }
        offset = h.len();
    };
    let mut out = header.into_bytes();
    out.extend_from_slice(&body);
    out
}

pub fn write_tck<'a, I>(path: &Path, streamlines: I, props: &[(String, String)]) -> Result<()>
where
    I: IntoIterator<Item = &'a [Point3]>,
{
    let bytes = encode_tck(streamlines, props);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_tck(bytes: &[u8]) -> Result<TckFile> {
    let end = find_end(bytes).ok_or_else(|| Error::Format("tck header has no END line".into()))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::Format("tck header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim_end) != Some(MAGIC) {
        return Err(Error::Format("missing 'mrtrix tracks' magic".into()));
    }
    let mut props = Vec::new();
    let (mut datatype, mut offset, mut count) = (None, None, None);
    for line in lines {
        let Some((k, v)) = line.split_once(':') else {
            continue;
        };
        let (k, v) = (k.trim(), v.trim());
        match k {
            "datatype" => datatype = Some(v.to_string()),
            "count" => count = v.parse::<usize>().ok(),
            "file" => {
                let off = v
                    .strip_prefix('.')
                    .map(str::trim)
                    .and_then(|o| o.parse::<usize>().ok());
                offset =
                    Some(off.ok_or_else(|| {
                        Error::Format(format!("unsupported tck file entry '{v}'"))
                    })?);
            }
            _ => props.push((k.to_string(), v.to_string())),
        }
    }
    match datatype.as_deref() {
        Some("Float32LE") => {}
        Some(other) => return Err(Error::UnsupportedType(format!("tck datatype {other}"))),
        None => return Err(Error::Format("tck header lacks datatype".into())),
    }
    let offset = offset.ok_or_else(|| Error::Format("tck header lacks file offset".into()))?;
    if offset > bytes.len() {
        return Err(Error::Format("tck data offset beyond end of file".into()));
    }
    let data = &bytes[offset..];
    let mut streamlines = Vec::new();
    let mut cur = Vec::new();
    let mut terminated = false;
    for chunk in data.chunks_exact(12) {
        let x = LittleEndian::read_f32(&chunk[0..4]);
        let y = LittleEndian::read_f32(&chunk[4..8]);
        let z = LittleEndian::read_f32(&chunk[8..12]);
        if x.is_infinite() {
            terminated = true;
            break;
        }
        if x.is_nan() {
            streamlines.push(std::mem::take(&mut cur));
        } else {
            cur.push([x as f64, y as f64, z as f64]);
        }
    }
    if !cur.is_empty() {
        streamlines.push(cur);
    }
    if !terminated {
        log::warn!("tck data has no Inf terminator");
    }
    if let Some(c) = count {
        if c != streamlines.len() {
            log::warn!(
                "tck header count {c} but {} streamlines found",
                streamlines.len()
            );
        }
    }
    Ok(TckFile {
        streamlines,
        properties: props,
    })
}

pub fn read_tck(path: &Path) -> Result<TckFile> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tck(&bytes)
}

fn find_end(bytes: &[u8]) -> Option<usize> {
    let mut start = 0;
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'\n' {
            let line = &bytes[start..i];
            if line == b"END" || line == b"END\r" {
                return Some(i + 1);
            }
            start = i + 1;
        }
    }
    None
}
