//! Byte protocol for attaching an out-of-process denoiser.
//!
//! The server speaks first with a handshake: `MIGH`, `u32` version, then
//! `l`, `d`, `f0`. Each request is a `MIGL` header for the window, then one
//! `(tau, level, frame_index, condition)` quadruple of `u32` per frame, then
//! the `f32` payload. The response is a `MIGL` header and the predicted
//! noise. Everything is little-endian. One request is in flight at a time.

use std::io::{self, Read, Write};
use std::sync::Mutex;

use thiserror::Error;

use crate::conditioning::ConditionId;
use crate::denoiser::{DenoiseRequest, Denoiser};
use crate::error::{DenoiseError, Error};
use crate::io::{read_f32s, read_header, read_u32_at, write_f32s, write_header, Header};
use crate::latent::FrameLatent;
use crate::schedule::NoiseSchedule;

pub const HANDSHAKE_MAGIC: [u8; 4] = *b"MIGH";
pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("handshake rejected: {0}")]
    Handshake(String),
    #[error("bridge shape mismatch: {0}")]
    Shape(String),
    #[error("bridge protocol: {0}")]
    Protocol(#[source] Error),
    #[error("bridge transport: {0}")]
    Transport(#[from] io::Error),
}

impl From<Error> for BridgeError {
    fn from(e: Error) -> Self {
        match e {
            Error::Stream(io) => BridgeError::Transport(io),
            other => BridgeError::Protocol(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Handshake {
    pub l: usize,
    pub d: usize,
    pub f0: usize,
}

pub fn write_handshake<W: Write>(w: &mut W, hs: Handshake) -> Result<(), BridgeError> {
    w.write_all(&HANDSHAKE_MAGIC)?;
    for v in [PROTOCOL_VERSION as usize, hs.l, hs.d, hs.f0] {
        let v = u32::try_from(v).map_err(|_| BridgeError::Handshake(format!("{v} exceeds u32")))?;
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_handshake<R: Read>(r: &mut R) -> Result<Handshake, BridgeError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != HANDSHAKE_MAGIC {
        return Err(BridgeError::Handshake(format!("bad magic {magic:?}")));
    }
    let mut offset = 4;
    let version = read_u32_at(r, &mut offset, "handshake")?;
    if version != PROTOCOL_VERSION {
        return Err(BridgeError::Handshake(format!("protocol version {version}")));
    }
    let l = read_u32_at(r, &mut offset, "handshake")? as usize;
    let d = read_u32_at(r, &mut offset, "handshake")? as usize;
    let f0 = read_u32_at(r, &mut offset, "handshake")? as usize;
    Ok(Handshake { l, d, f0 })
}

/// A decoded request as the server sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct WireRequest {
    pub taus: Vec<u32>,
    pub latents: Vec<FrameLatent>,
    pub conditions: Vec<ConditionId>,
}

pub fn write_request<W: Write>(
    w: &mut W,
    request: &DenoiseRequest<'_>,
    schedule: &NoiseSchedule,
    l: usize,
    d: usize,
) -> Result<(), BridgeError> {
    let n = request.latents.len();
    if request.conditions.len() != n {
        return Err(BridgeError::Shape(format!(
            "{n} latents but {} conditions",
            request.conditions.len()
        )));
    }
    let mut buf = Vec::with_capacity(20 + n * (16 + 4 * l * d));
    write_header(&mut buf, Header { frames: n, l, d })?;
    for (z, c) in request.latents.iter().zip(request.conditions) {
        if z.data.len() != l * d {
            return Err(BridgeError::Shape(format!(
                "frame {} has {} values, expected {l}x{d}",
                z.frame_index,
                z.data.len()
            )));
        }
        for v in [schedule.tau(z.level) as usize, z.level, z.frame_index, c.0] {
            let v = u32::try_from(v).map_err(|_| BridgeError::Shape(format!("{v} exceeds u32")))?;
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for z in request.latents {
        write_f32s(&mut buf, &z.data)?;
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Reads one request; `Ok(None)` on a clean end of stream between requests.
pub fn read_request<R: Read>(r: &mut R, l: usize, d: usize) -> Result<Option<WireRequest>, BridgeError> {
    let mut first = [0u8; 1];
    loop {
        match r.read(&mut first) {
            Ok(0) => return Ok(None),
            Ok(_) => break,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let mut offset = 0;
    let header = read_header(&mut (&first[..]).chain(&mut *r), &mut offset)?;
    if (header.l, header.d) != (l, d) {
        return Err(BridgeError::Shape(format!(
            "request is {}x{}, server expects {l}x{d}",
            header.l, header.d
        )));
    }
    let mut taus = Vec::with_capacity(header.frames);
    let mut meta = Vec::with_capacity(header.frames);
    for _ in 0..header.frames {
        taus.push(read_u32_at(r, &mut offset, "frame metadata")?);
        let level = read_u32_at(r, &mut offset, "frame metadata")? as usize;
        let frame_index = read_u32_at(r, &mut offset, "frame metadata")? as usize;
        let condition = read_u32_at(r, &mut offset, "frame metadata")? as usize;
        meta.push((level, frame_index, condition));
    }
    let mut latents = Vec::with_capacity(header.frames);
    let mut conditions = Vec::with_capacity(header.frames);
    for (level, frame_index, condition) in meta {
        latents.push(FrameLatent::new(read_f32s(r, l * d, &mut offset)?, frame_index, level));
        conditions.push(ConditionId(condition));
    }
    Ok(Some(WireRequest {
        taus,
        latents,
        conditions,
    }))
}

pub fn write_response<W: Write>(w: &mut W, eps: &[Vec<f32>], l: usize, d: usize) -> Result<(), BridgeError> {
    let mut buf = Vec::new();
    write_header(
        &mut buf,
        Header {
            frames: eps.len(),
            l,
            d,
        },
    )?;
    for e in eps {
        if e.len() != l * d {
            return Err(BridgeError::Shape(format!("prediction has {} values", e.len())));
        }
        write_f32s(&mut buf, e)?;
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_response<R: Read>(r: &mut R, frames: usize, l: usize, d: usize) -> Result<Vec<Vec<f32>>, BridgeError> {
    let mut offset = 0;
    let header = read_header(r, &mut offset)?;
    if header != (Header { frames, l, d }) {
        return Err(BridgeError::Shape(format!(
            "response is {} frames of {}x{}, expected {frames} of {l}x{d}",
            header.frames, header.l, header.d
        )));
    }
    (0..frames)
        .map(|_| read_f32s(r, l * d, &mut offset).map_err(BridgeError::from))
        .collect()
}

/// Serves `denoiser` over `stream` until the client hangs up. Returns the
/// number of requests answered.
pub fn serve<S: Read + Write>(stream: &mut S, denoiser: &dyn Denoiser, l: usize, d: usize) -> Result<usize, BridgeError> {
    write_handshake(
        stream,
        Handshake {
            l,
            d,
            f0: denoiser.max_window(),
        },
    )?;
    let mut served = 0;
    while let Some(req) = read_request(stream, l, d)? {
        let eps = denoiser
            .predict(&DenoiseRequest {
                latents: &req.latents,
                conditions: &req.conditions,
            })
            .map_err(|e| BridgeError::Protocol(Error::Parameter(e.to_string())))?;
        write_response(stream, &eps, l, d)?;
        served += 1;
    }
    Ok(served)
}

/// Client side: a [`Denoiser`] backed by a byte stream.
pub struct StreamDenoiser<S> {
    stream: Mutex<S>,
    schedule: NoiseSchedule,
    handshake: Handshake,
}

impl<S: Read + Write + Send> StreamDenoiser<S> {
    /// Reads the server handshake and rejects it unless it advertises the
    /// expected latent shape and a window of at least `min_window`.
    pub fn connect(
        mut stream: S,
        schedule: NoiseSchedule,
        l: usize,
        d: usize,
        min_window: usize,
    ) -> Result<Self, BridgeError> {
        let hs = read_handshake(&mut stream)?;
        if (hs.l, hs.d) != (l, d) {
            return Err(BridgeError::Handshake(format!(
                "server latents are {}x{}, scheduler expects {l}x{d}",
                hs.l, hs.d
            )));
        }
        if hs.f0 < min_window {
            return Err(BridgeError::Handshake(format!(
                "server window {} is smaller than f0 = {min_window}",
                hs.f0
            )));
        }
        Ok(Self {
            stream: Mutex::new(stream),
            schedule,
            handshake: hs,
        })
    }

    pub fn handshake(&self) -> Handshake {
        self.handshake
    }
}

impl<S: Read + Write + Send> Denoiser for StreamDenoiser<S> {
    fn max_window(&self) -> usize {
        self.handshake.f0
    }

    fn predict(&self, request: &DenoiseRequest<'_>) -> Result<Vec<Vec<f32>>, DenoiseError> {
        let Handshake { l, d, f0 } = self.handshake;
        if request.latents.len() > f0 {
            return Err(DenoiseError::TooWide {
                got: request.latents.len(),
                max: f0,
            });
        }
        let mut stream = self.stream.lock().unwrap_or_else(|p| p.into_inner());
        write_request(&mut *stream, request, &self.schedule, l, d)
            .and_then(|()| read_response(&mut *stream, request.latents.len(), l, d))
            .map_err(|e| DenoiseError::External(Box::new(e)))
    }
}
