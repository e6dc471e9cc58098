//! "MIGL" latent files.
//!
//! Layout, all little-endian: the magic `MIGL`, a `u32` version, then
//! `N`, `l`, `d` as `u32`, then `N·l·d` `f32` values, frame-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"MIGL";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct LatentFile {
    pub l: usize,
    pub d: usize,
    pub frames: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub frames: usize,
    pub l: usize,
    pub d: usize,
}

fn to_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Parameter(format!("{what} = {value} does not fit in u32")))
}

pub fn write_header<W: Write>(w: &mut W, header: Header) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (v, what) in [(header.frames, "N"), (header.l, "l"), (header.d, "d")] {
        w.write_all(&to_u32(v, what)?.to_le_bytes())?;
    }
    Ok(())
}

/// Reads exactly `buf.len()` bytes, reporting a short read as a format error
/// at the offset where the data ran out.
pub(crate) fn read_exact_at<R: Read>(r: &mut R, buf: &mut [u8], offset: &mut u64, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::Format {
                    offset: *offset + filled as u64,
                    reason: format!("unexpected end of data in {what}"),
                })
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Stream(e)),
        }
    }
    *offset += buf.len() as u64;
    Ok(())
}

pub(crate) fn read_u32_at<R: Read>(r: &mut R, offset: &mut u64, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_at(r, &mut b, offset, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_header<R: Read>(r: &mut R, offset: &mut u64) -> Result<Header> {
    let start = *offset;
    let mut magic = [0u8; 4];
    read_exact_at(r, &mut magic, offset, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: start,
            reason: format!("bad magic {magic:?}, expected \"MIGL\""),
        });
    }
    let at = *offset;
    let version = read_u32_at(r, offset, "version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: at,
            reason: format!("unsupported version {version}"),
        });
    }
    let frames = read_u32_at(r, offset, "frame count")? as usize;
    let l = read_u32_at(r, offset, "token count")? as usize;
    let d = read_u32_at(r, offset, "channel count")? as usize;
    if l == 0 || d == 0 {
        return Err(Error::Format {
            offset: at + 8,
            reason: format!("empty latent shape {l}x{d}"),
        });
    }
    Ok(Header { frames, l, d })
}

pub fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

pub fn read_f32s<R: Read>(r: &mut R, len: usize, offset: &mut u64) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; len * 4];
    read_exact_at(r, &mut bytes, offset, "payload")?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_latents<W: Write, F: AsRef<[f32]>>(w: &mut W, frames: &[F], l: usize, d: usize) -> Result<()> {
    if let Some(bad) = frames.iter().position(|f| f.as_ref().len() != l * d) {
        return Err(Error::Shape(format!(
            "frame {} has {} values, expected {l}x{d}",
            bad + 1,
            frames[bad].as_ref().len()
        )));
    }
    write_header(
        w,
        Header {
            frames: frames.len(),
            l,
            d,
        },
    )?;
    for f in frames {
        write_f32s(w, f.as_ref())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a whole file; trailing bytes after the payload are rejected.
pub fn read_latents<R: Read>(r: &mut R) -> Result<LatentFile> {
    let mut offset = 0u64;
    let header = read_header(r, &mut offset)?;
    let frame_len = header.l * header.d;
    let mut frames = Vec::with_capacity(header.frames.min(1 << 16));
    for _ in 0..header.frames {
        frames.push(read_f32s(r, frame_len, &mut offset)?);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::Format {
            offset,
            reason: "trailing bytes after payload".into(),
        });
    }
    Ok(LatentFile {
        l: header.l,
        d: header.d,
        frames,
    })
}

pub fn write_latent_file<F: AsRef<[f32]>>(path: &Path, frames: &[F], l: usize, d: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_latents(&mut BufWriter::new(file), frames, l, d).map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })
}

pub fn read_latent_file(path: &Path) -> Result<LatentFile> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_latents(&mut BufReader::new(file)).map_err(|e| match e {
        Error::Stream(io) => Error::io(path, io),
        other => other,
    })
}
