//! Framed TCP message protocol for intraoperative exchange of transforms,
//! images and status messages.
//!
//! Every message is a 58-byte big-endian header followed by `body_size`
//! body bytes:
//!
//! | field       | bytes |
//! |-------------|-------|
//! | version     | 2     |
//! | type name   | 12    |
//! | device name | 20    |
//! | timestamp   | 8     |
//! | body size   | 8     |
//! | body CRC-64 | 8     |
//!
//! Names are ASCII, NUL-padded. The body checksum is CRC-64/ECMA-182
//! (initial value 0, no reflection, no final xor).

use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crc::{Crc, CRC_64_ECMA_182};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registration::{RegistrationError, RigidTransform};
use crate::volume::{DType, Grid, ScalarVolume, VolumeError};

pub const HEADER_SIZE: usize = 58;
pub const VERSION: u16 = 1;
pub const TYPE_NAME_LEN: usize = 12;
pub const DEVICE_NAME_LEN: usize = 20;
pub const STATUS_NAME_LEN: usize = 20;
pub const DEFAULT_PORT: u16 = 18944;
pub const DEFAULT_MAX_BODY: u64 = 1 << 30;
pub const MAX_BODY_ENV: &str = "BRACHY_IGTL_MAX_BODY";
/// dims (3×u16) + spacing (3×f32) + dtype + pad
pub const IMAGE_SUBHEADER: usize = 20;

pub const TRANSFORM: &str = "TRANSFORM";
pub const STATUS: &str = "STATUS";
pub const IMAGE: &str = "IMAGE";

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

pub fn body_crc(body: &[u8]) -> u64 {
    CRC64.checksum(body)
}

#[derive(Debug, Error)]
pub enum IgtlError {
    #[error("{field} {value:?} does not fit in {width} ASCII bytes")]
    FieldOverflow { field: &'static str, value: String, width: usize },
    #[error("{field} must be ASCII without NUL bytes")]
    InvalidName { field: &'static str },
    #[error("invalid message body: {0}")]
    InvalidBody(String),
    #[error("volume dimension {0} exceeds the u16 range")]
    DimsOverflow(usize),
    #[error("decode error: {0}")]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error("connection closed before a complete message arrived")]
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    /// The body checksum does not match; the message was skipped.
    #[error("body CRC mismatch (expected {expected:#018x}, found {found:#018x})")]
    CrcMismatch { expected: u64, found: u64, consumed: usize },
    #[error("malformed header: {reason}")]
    MalformedHeader { reason: String, consumed: usize },
    #[error("malformed {type_name} body: {reason}")]
    MalformedBody { type_name: String, reason: String, consumed: usize },
    /// Declared body size above the configured limit; the stream can no
    /// longer be trusted.
    #[error("declared body size {size} exceeds the limit of {limit} bytes")]
    Oversize { size: u64, limit: u64 },
}

impl DecodeError {
    /// Bytes to skip to stay framed, or `None` when framing is lost.
    pub fn consumed(&self) -> Option<usize> {
        match self {
            DecodeError::CrcMismatch { consumed, .. }
            | DecodeError::MalformedHeader { consumed, .. }
            | DecodeError::MalformedBody { consumed, .. } => Some(*consumed),
            DecodeError::Oversize { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageHeader {
    pub version: u16,
    pub type_name: [u8; TYPE_NAME_LEN],
    pub device_name: [u8; DEVICE_NAME_LEN],
    pub timestamp: u64,
    pub body_size: u64,
    pub body_crc: u64,
}

impl MessageHeader {
    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut out = [0u8; HEADER_SIZE];
        out[0..2].copy_from_slice(&self.version.to_be_bytes());
        out[2..14].copy_from_slice(&self.type_name);
        out[14..34].copy_from_slice(&self.device_name);
        out[34..42].copy_from_slice(&self.timestamp.to_be_bytes());
        out[42..50].copy_from_slice(&self.body_size.to_be_bytes());
        out[50..58].copy_from_slice(&self.body_crc.to_be_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; HEADER_SIZE]) -> Self {
        let u64_at = |o: usize| u64::from_be_bytes(b[o..o + 8].try_into().unwrap());
        MessageHeader {
            version: u16::from_be_bytes([b[0], b[1]]),
            type_name: b[2..14].try_into().unwrap(),
            device_name: b[14..34].try_into().unwrap(),
            timestamp: u64_at(34),
            body_size: u64_at(42),
            body_crc: u64_at(50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusBody {
    pub code: u16,
    pub subcode: i64,
    pub error_name: String,
    pub message: String,
}

/// Simplified IMAGE body: dims, spacing, dtype code, pad byte, then the
/// big-endian voxel payload in x-fastest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBody {
    pub dims: [u16; 3],
    pub spacing: [f32; 3],
    pub dtype: DType,
    pub voxels: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Body {
    /// Row-major 3×4 matrix.
    Transform { matrix: [f32; 12] },
    Status(StatusBody),
    Image(ImageBody),
    Unknown { raw: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub type_name: String,
    pub device_name: String,
    pub timestamp: u64,
    pub body: Body,
}

impl Message {
    pub fn transform(device: &str, timestamp: u64, t: &RigidTransform) -> Self {
        let m = t.to_row_major();
        Message {
            type_name: TRANSFORM.into(),
            device_name: device.into(),
            timestamp,
            body: Body::Transform { matrix: m.map(|x| x as f32) },
        }
    }

    pub fn status(device: &str, timestamp: u64, code: u16, error_name: &str, message: &str) -> Self {
        Message {
            type_name: STATUS.into(),
            device_name: device.into(),
            timestamp,
            body: Body::Status(StatusBody { code, subcode: 0, error_name: error_name.into(), message: message.into() }),
        }
    }

    pub fn unknown(type_name: &str, device: &str, timestamp: u64, raw: Vec<u8>) -> Self {
        Message { type_name: type_name.into(), device_name: device.into(), timestamp, body: Body::Unknown { raw } }
    }

    /// The transform carried by a TRANSFORM message, snapped to the nearest
    /// rotation to absorb single-precision rounding.
    pub fn as_rigid_transform(&self) -> Option<Result<RigidTransform, RegistrationError>> {
        match &self.body {
            Body::Transform { matrix } => {
                let m = matrix.map(|x| x as f64);
                let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
                Some(RigidTransform::from_approximate(r, Vector3::new(m[3], m[7], m[11]), 1e-4))
            }
            _ => None,
        }
    }
}

fn pack_name<const N: usize>(field: &'static str, s: &str) -> Result<[u8; N], IgtlError> {
    if !s.is_ascii() || s.bytes().any(|b| b == 0) {
        return Err(IgtlError::InvalidName { field });
    }
    if s.len() > N {
        return Err(IgtlError::FieldOverflow { field, value: s.into(), width: N });
    }
    let mut out = [0u8; N];
    out[..s.len()].copy_from_slice(s.as_bytes());
    Ok(out)
}

/// Reverses `pack_name`; rejects non-ASCII bytes and bytes after the first NUL.
fn unpack_name(raw: &[u8]) -> Result<String, String> {
    let end = raw.iter().position(|&b| b == 0).unwrap_or(raw.len());
    if raw[end..].iter().any(|&b| b != 0) {
        return Err("bytes after NUL terminator".into());
    }
    let s = &raw[..end];
    if !s.is_ascii() {
        return Err("non-ASCII name".into());
    }
    Ok(String::from_utf8(s.to_vec()).unwrap())
}

fn encode_body(msg: &Message) -> Result<Vec<u8>, IgtlError> {
    let expect = |name: &str| {
        if msg.type_name == name {
            Ok(())
        } else {
            Err(IgtlError::InvalidBody(format!("{name} body under type {:?}", msg.type_name)))
        }
    };
    match &msg.body {
        Body::Transform { matrix } => {
            expect(TRANSFORM)?;
            Ok(matrix.iter().flat_map(|x| x.to_be_bytes()).collect())
        }
        Body::Status(s) => {
            expect(STATUS)?;
            let mut out = Vec::with_capacity(30 + s.message.len());
            out.extend(s.code.to_be_bytes());
            out.extend(s.subcode.to_be_bytes());
            out.extend(pack_name::<STATUS_NAME_LEN>("error name", &s.error_name)?);
            out.extend(s.message.as_bytes());
            Ok(out)
        }
        Body::Image(img) => {
            expect(IMAGE)?;
            let n: usize = img.dims.iter().map(|&d| d as usize).product();
            if img.voxels.len() != n {
                return Err(IgtlError::InvalidBody(format!("{} voxels for dims {:?}", img.voxels.len(), img.dims)));
            }
            let mut out = Vec::with_capacity(IMAGE_SUBHEADER + n * img.dtype.size());
            for d in img.dims {
                out.extend(d.to_be_bytes());
            }
            for s in img.spacing {
                out.extend(s.to_be_bytes());
            }
            out.push(dtype_code(img.dtype));
            out.push(0);
            for &v in &img.voxels {
                match img.dtype {
                    DType::Float32 => out.extend(v.to_be_bytes()),
                    DType::Uint8 => {
                        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                            return Err(IgtlError::InvalidBody(format!("{v} is not a uint8 value")));
                        }
                        out.push(v as u8);
                    }
                    DType::Int16 => {
                        if v.fract() != 0.0 || !(-32768.0..=32767.0).contains(&v) {
                            return Err(IgtlError::InvalidBody(format!("{v} is not an int16 value")));
                        }
                        out.extend((v as i16).to_be_bytes());
                    }
                }
            }
            Ok(out)
        }
        Body::Unknown { raw } => {
            if [TRANSFORM, STATUS, IMAGE].contains(&msg.type_name.as_str()) {
                return Err(IgtlError::InvalidBody(format!("raw body under known type {}", msg.type_name)));
            }
            Ok(raw.clone())
        }
    }
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::Uint8 => 3,
        DType::Int16 => 4,
        DType::Float32 => 10,
    }
}

fn dtype_of(code: u8) -> Option<DType> {
    match code {
        3 => Some(DType::Uint8),
        4 => Some(DType::Int16),
        10 => Some(DType::Float32),
        _ => None,
    }
}

/// Header ‖ body; body size and checksum are always recomputed.
pub fn encode(msg: &Message) -> Result<Vec<u8>, IgtlError> {
    let type_name = pack_name::<TYPE_NAME_LEN>("type name", &msg.type_name)?;
    if msg.type_name.is_empty() {
        return Err(IgtlError::InvalidName { field: "type name" });
    }
    let device_name = pack_name::<DEVICE_NAME_LEN>("device name", &msg.device_name)?;
    let body = encode_body(msg)?;
    let header = MessageHeader {
        version: VERSION,
        type_name,
        device_name,
        timestamp: msg.timestamp,
        body_size: body.len() as u64,
        body_crc: body_crc(&body),
    };
    let head = header.to_bytes();
    assert_eq!(head.len(), HEADER_SIZE);
    let mut out = Vec::with_capacity(HEADER_SIZE + body.len());
    out.extend_from_slice(&head);
    out.extend(body);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    Message { message: Message, consumed: usize },
    /// At least `needed` more bytes are required.
    NeedMore { needed: usize },
}

fn decode_body(type_name: &str, body: &[u8]) -> Result<Body, String> {
    match type_name {
        TRANSFORM => {
            if body.len() != 48 {
                return Err(format!("expected 48 bytes, found {}", body.len()));
            }
            let mut matrix = [0f32; 12];
            for (i, m) in matrix.iter_mut().enumerate() {
                *m = f32::from_be_bytes(body[4 * i..4 * i + 4].try_into().unwrap());
            }
            Ok(Body::Transform { matrix })
        }
        STATUS => {
            if body.len() < 30 {
                return Err(format!("expected at least 30 bytes, found {}", body.len()));
            }
            let code = u16::from_be_bytes([body[0], body[1]]);
            let subcode = i64::from_be_bytes(body[2..10].try_into().unwrap());
            let error_name = unpack_name(&body[10..30])?;
            let message = String::from_utf8(body[30..].to_vec()).map_err(|_| "message is not UTF-8".to_string())?;
            Ok(Body::Status(StatusBody { code, subcode, error_name, message }))
        }
        IMAGE => {
            if body.len() < IMAGE_SUBHEADER {
                return Err(format!("sub-header needs {IMAGE_SUBHEADER} bytes, found {}", body.len()));
            }
            let dims = [0, 1, 2].map(|a| u16::from_be_bytes([body[2 * a], body[2 * a + 1]]));
            let spacing = [0, 1, 2].map(|a| f32::from_be_bytes(body[6 + 4 * a..10 + 4 * a].try_into().unwrap()));
            let dtype = dtype_of(body[18]).ok_or_else(|| format!("unknown dtype code {}", body[18]))?;
            let n: usize = dims.iter().map(|&d| d as usize).product();
            let payload = &body[IMAGE_SUBHEADER..];
            if payload.len() != n * dtype.size() {
                return Err(format!("payload of {} bytes for {n} voxels of {dtype}", payload.len()));
            }
            let voxels = match dtype {
                DType::Float32 => payload.chunks_exact(4).map(|c| f32::from_be_bytes(c.try_into().unwrap())).collect(),
                DType::Uint8 => payload.iter().map(|&b| b as f32).collect(),
                DType::Int16 => payload.chunks_exact(2).map(|c| i16::from_be_bytes([c[0], c[1]]) as f32).collect(),
            };
            Ok(Body::Image(ImageBody { dims, spacing, dtype, voxels }))
        }
        _ => Ok(Body::Unknown { raw: body.to_vec() }),
    }
}

/// Decodes one message from the front of `buf` with the default body limit.
pub fn decode(buf: &[u8]) -> Result<Decoded, DecodeError> {
    decode_with_limit(buf, DEFAULT_MAX_BODY)
}

/// Never reads past the declared body and never panics.
pub fn decode_with_limit(buf: &[u8], max_body: u64) -> Result<Decoded, DecodeError> {
    if buf.len() < HEADER_SIZE {
        return Ok(Decoded::NeedMore { needed: HEADER_SIZE - buf.len() });
    }
    let header = MessageHeader::from_bytes(buf[..HEADER_SIZE].try_into().unwrap());
    if header.body_size > max_body {
        return Err(DecodeError::Oversize { size: header.body_size, limit: max_body });
    }
    let total = HEADER_SIZE + header.body_size as usize;
    if buf.len() < total {
        return Ok(Decoded::NeedMore { needed: total - buf.len() });
    }
    let body = &buf[HEADER_SIZE..total];
    let found = body_crc(body);
    if found != header.body_crc {
        return Err(DecodeError::CrcMismatch { expected: header.body_crc, found, consumed: total });
    }
    let malformed = |reason: String| DecodeError::MalformedHeader { reason, consumed: total };
    if header.version != VERSION {
        return Err(malformed(format!("unsupported version {}", header.version)));
    }
    let type_name = unpack_name(&header.type_name).map_err(|r| malformed(format!("type name: {r}")))?;
    if type_name.is_empty() {
        return Err(malformed("empty type name".into()));
    }
    let device_name = unpack_name(&header.device_name).map_err(|r| malformed(format!("device name: {r}")))?;
    let body = decode_body(&type_name, body).map_err(|reason| DecodeError::MalformedBody {
        type_name: type_name.clone(),
        reason,
        consumed: total,
    })?;
    Ok(Decoded::Message {
        message: Message { type_name, device_name, timestamp: header.timestamp, body },
        consumed: total,
    })
}

/// Body limit from `BRACHY_IGTL_MAX_BODY`, falling back to 1 GiB.
pub fn max_body_from_env() -> u64 {
    std::env::var(MAX_BODY_ENV).ok().and_then(|v| v.trim().parse().ok()).unwrap_or(DEFAULT_MAX_BODY)
}

/// Incremental decoder over a byte stream.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    max_body: u64,
    broken: bool,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_BODY)
    }
}

impl FrameDecoder {
    pub fn new(max_body: u64) -> Self {
        FrameDecoder { buf: Vec::new(), max_body, broken: false }
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if !self.broken {
            self.buf.extend_from_slice(bytes);
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// True once framing has been lost; the decoder yields nothing further.
    pub fn is_broken(&self) -> bool {
        self.broken
    }

    /// Next message or error, or `None` when more bytes are needed.
    pub fn next_message(&mut self) -> Option<Result<Message, DecodeError>> {
        if self.broken {
            return None;
        }
        match decode_with_limit(&self.buf, self.max_body) {
            Ok(Decoded::NeedMore { .. }) => None,
            Ok(Decoded::Message { message, consumed }) => {
                self.buf.drain(..consumed);
                Some(Ok(message))
            }
            Err(e) => {
                match e.consumed() {
                    Some(n) => {
                        self.buf.drain(..n);
                    }
                    None => {
                        self.broken = true;
                        self.buf.clear();
                    }
                }
                Some(Err(e))
            }
        }
    }
}

pub fn send_message(w: &mut impl Write, msg: &Message) -> Result<(), IgtlError> {
    w.write_all(&encode(msg)?)?;
    Ok(())
}

/// Blocks until one full message has been read.
pub fn read_message(r: &mut impl Read, max_body: u64) -> Result<Message, IgtlError> {
    let mut head = [0u8; HEADER_SIZE];
    read_exact_or_closed(r, &mut head)?;
    let header = MessageHeader::from_bytes(&head);
    if header.body_size > max_body {
        return Err(DecodeError::Oversize { size: header.body_size, limit: max_body }.into());
    }
    let mut buf = head.to_vec();
    buf.resize(HEADER_SIZE + header.body_size as usize, 0);
    read_exact_or_closed(r, &mut buf[HEADER_SIZE..])?;
    match decode_with_limit(&buf, max_body)? {
        Decoded::Message { message, .. } => Ok(message),
        Decoded::NeedMore { .. } => Err(IgtlError::Closed),
    }
}

fn read_exact_or_closed(r: &mut impl Read, buf: &mut [u8]) -> Result<(), IgtlError> {
    r.read_exact(buf).map_err(|e| if e.kind() == ErrorKind::UnexpectedEof { IgtlError::Closed } else { e.into() })
}

/// Image message for a volume plus the TRANSFORM carrying its orientation
/// and origin, both under `device_name`.
pub fn volume_messages(vol: &ScalarVolume, device_name: &str, timestamp: u64) -> Result<[Message; 2], IgtlError> {
    let mut dims = [0u16; 3];
    for (d, &n) in dims.iter_mut().zip(&vol.grid.dims) {
        *d = u16::try_from(n).map_err(|_| IgtlError::DimsOverflow(n))?;
    }
    let image = Message {
        type_name: IMAGE.into(),
        device_name: device_name.into(),
        timestamp,
        body: Body::Image(ImageBody {
            dims,
            spacing: vol.grid.spacing.map(|s| s as f32),
            dtype: vol.dtype,
            voxels: vol.voxels.clone(),
        }),
    };
    let o = &vol.grid.orientation;
    let p = vol.grid.origin;
    let matrix = [
        o[0][0], o[0][1], o[0][2], p[0], o[1][0], o[1][1], o[1][2], p[1], o[2][0], o[2][1], o[2][2], p[2],
    ]
    .map(|x| x as f32);
    let pose = Message {
        type_name: TRANSFORM.into(),
        device_name: device_name.into(),
        timestamp,
        body: Body::Transform { matrix },
    };
    Ok([image, pose])
}

/// Writes the IMAGE and TRANSFORM pair for a volume.
pub fn push_volume(conn: &mut impl Write, vol: &ScalarVolume, device_name: &str, timestamp: u64) -> Result<(), IgtlError> {
    let [image, pose] = volume_messages(vol, device_name, timestamp)?;
    let mut bytes = encode(&image)?;
    bytes.extend(encode(&pose)?);
    conn.write_all(&bytes)?;
    conn.flush()?;
    Ok(())
}

/// Rebuilds a volume from an IMAGE message and its pose TRANSFORM.
pub fn volume_from_messages(image: &Message, pose: &Message) -> Result<ScalarVolume, IgtlError> {
    let Body::Image(img) = &image.body else {
        return Err(IgtlError::InvalidBody("expected an IMAGE message".into()));
    };
    let Body::Transform { matrix } = &pose.body else {
        return Err(IgtlError::InvalidBody("expected a TRANSFORM message".into()));
    };
    let m = matrix.map(|x| x as f64);
    let grid = Grid::new(
        img.dims.map(|d| d as usize),
        img.spacing.map(|s| s as f64),
        [m[3], m[7], m[11]],
        [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
    )?;
    Ok(ScalarVolume::new(grid, img.dtype, img.voxels.clone(), "")?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Peer {
    /// Connection number in accept order, starting at 1.
    pub id: u64,
    pub addr: SocketAddr,
}

/// Connection-level events besides decoded messages.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerEvent {
    Message(Message),
    /// A message failed its checksum and was skipped.
    Skipped(DecodeError),
    /// The connection was closed because of a decode error.
    Closed(Option<DecodeError>),
}

pub type Handler = Arc<dyn Fn(Peer, ServerEvent) + Send + Sync>;

#[derive(Debug, Clone, Copy)]
pub struct ServerConfig {
    pub max_body: u64,
    pub poll_interval: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { max_body: max_body_from_env(), poll_interval: Duration::from_millis(20) }
    }
}

/// Running listener; dropping it shuts the server down.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, delivers every complete message already received
    /// and joins all connection threads.
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

/// Listens on `addr` and feeds every connection's events to `handler`, in
/// order per connection.
pub fn serve(addr: impl ToSocketAddrs, handler: Handler, config: ServerConfig) -> Result<ServerHandle, IgtlError> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_accept = stop.clone();
    let accept = std::thread::Builder::new().name("igtl-accept".into()).spawn(move || {
        let next_id = AtomicU64::new(1);
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !stop_accept.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, addr)) => {
                    let peer = Peer { id: next_id.fetch_add(1, Ordering::SeqCst), addr };
                    let handler = handler.clone();
                    let stop = stop_accept.clone();
                    if let Ok(h) = std::thread::Builder::new()
                        .name(format!("igtl-conn-{}", peer.id))
                        .spawn(move || connection_loop(stream, peer, handler, stop, config))
                    {
                        workers.push(h);
                    }
                    workers.retain(|w| !w.is_finished());
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(config.poll_interval),
                Err(_) => std::thread::sleep(config.poll_interval),
            }
        }
        for w in workers {
            let _ = w.join();
        }
    })?;
    Ok(ServerHandle { addr: local, stop, accept: Some(accept) })
}

fn connection_loop(mut stream: TcpStream, peer: Peer, handler: Handler, stop: Arc<AtomicBool>, config: ServerConfig) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_read_timeout(Some(config.poll_interval));
    let mut decoder = FrameDecoder::new(config.max_body);
    let mut chunk = vec![0u8; 64 * 1024];
    loop {
        let stopping = stop.load(Ordering::SeqCst);
        if stopping {
            // take whatever the peer already sent, then finish
            let _ = stream.set_nonblocking(true);
        }
        let eof = match stream.read(&mut chunk) {
            Ok(0) => true,
            Ok(n) => {
                decoder.push(&chunk[..n]);
                false
            }
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => stopping,
            Err(_) => true,
        };
        while let Some(item) = decoder.next_message() {
            match item {
                Ok(m) => handler(peer, ServerEvent::Message(m)),
                Err(e @ DecodeError::CrcMismatch { .. }) => handler(peer, ServerEvent::Skipped(e)),
                Err(e) => {
                    handler(peer, ServerEvent::Closed(Some(e)));
                    return;
                }
            }
        }
        if eof {
            handler(peer, ServerEvent::Closed(None));
            return;
        }
    }
}
