//! Framed binary protocol between the trusted client and the untrusted host.
//!
//! Every message is an envelope: `AVOF`, version `1`, message type, session
//! id, frame id, payload length (all little endian), then the payload. The
//! host only ever receives the session configuration and noisy offloaded
//! latents; it answers with the decoded offloaded planes.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::codec::{Codec, PathKind};
use crate::error::{Error, Result};
use crate::pipeline::{host_decode, OffloadModel, OffloadTransport};
use crate::privacy::NoiseCalibration;

pub const MAGIC: &[u8; 4] = b"AVOF";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 26;
pub const MAX_PAYLOAD: usize = 64 << 20;
pub const DEFAULT_FRAME_TIMEOUT: Duration = Duration::from_secs(5);
pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    Ack = 2,
    OffloadLatent = 3,
    ReturnComponents = 4,
    Error = 5,
    Bye = 6,
}

impl MsgType {
    pub const ALL: [MsgType; 6] = [
        MsgType::Hello,
        MsgType::Ack,
        MsgType::OffloadLatent,
        MsgType::ReturnComponents,
        MsgType::Error,
        MsgType::Bye,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == v)
    }
}

/// Codes carried by `Error` messages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    HashMismatch = 1,
    ConfigMismatch = 2,
    FrameOrder = 3,
    LatentLength = 4,
    BadMessage = 5,
    Internal = 6,
}

impl ErrorCode {
    pub fn error(self, message: impl Into<String>) -> Error {
        Error::Protocol { code: self as u16, message: message.into() }
    }
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::Format { format: "envelope", reason: reason.into() }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub msg_type: MsgType,
    pub session_id: u64,
    pub frame_id: u64,
    pub payload: Vec<u8>,
}

struct Header {
    msg_type: MsgType,
    session_id: u64,
    frame_id: u64,
    len: usize,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header> {
    if &h[0..4] != MAGIC {
        return Err(malformed("bad magic"));
    }
    if h[4] != VERSION {
        return Err(malformed(format!("unsupported version {}", h[4])));
    }
    let msg_type = MsgType::from_u8(h[5]).ok_or_else(|| malformed(format!("unknown message type {}", h[5])))?;
    let session_id = u64::from_le_bytes(h[6..14].try_into().unwrap());
    let frame_id = u64::from_le_bytes(h[14..22].try_into().unwrap());
    let len = u32::from_le_bytes(h[22..26].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(malformed(format!("payload of {len} bytes exceeds {MAX_PAYLOAD}")));
    }
    Ok(Header { msg_type, session_id, frame_id, len })
}

impl Envelope {
    pub fn new(msg_type: MsgType, session_id: u64, frame_id: u64, payload: Vec<u8>) -> Self {
        Self { msg_type, session_id, frame_id, payload }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(malformed(format!("payload of {} bytes exceeds {MAX_PAYLOAD}", self.payload.len())));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&self.session_id.to_le_bytes());
        out.extend_from_slice(&self.frame_id.to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Parses exactly one envelope occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header: &[u8; HEADER_LEN] =
            bytes.get(..HEADER_LEN).and_then(|h| h.try_into().ok()).ok_or_else(|| malformed("truncated header"))?;
        let h = parse_header(header)?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != h.len {
            return Err(malformed(format!("payload length {} does not match header {}", payload.len(), h.len)));
        }
        Ok(Self::new(h.msg_type, h.session_id, h.frame_id, payload.to_vec()))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        let h = parse_header(&header)?;
        let mut payload = vec![0u8; h.len];
        r.read_exact(&mut payload)?;
        Ok(Self::new(h.msg_type, h.session_id, h.frame_id, payload))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.encode()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn error(session_id: u64, frame_id: u64, code: ErrorCode, message: &str) -> Self {
        let mut payload = (code as u16).to_le_bytes().to_vec();
        payload.extend_from_slice(message.as_bytes());
        Self::new(MsgType::Error, session_id, frame_id, payload)
    }

    /// `(code, message)` of an `Error` envelope.
    pub fn error_parts(&self) -> Result<(u16, String)> {
        if self.msg_type != MsgType::Error || self.payload.len() < 2 {
            return Err(malformed("not an error message"));
        }
        let code = u16::from_le_bytes([self.payload[0], self.payload[1]]);
        Ok((code, String::from_utf8_lossy(&self.payload[2..]).into_owned()))
    }
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(malformed("float payload length is not a multiple of 4"));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Session parameters announced in `Hello`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SessionConfig {
    pub block: usize,
    pub offloaded_ids: Vec<usize>,
    pub latent_dim: usize,
    pub codec_hash: u64,
    pub calib_hash: u64,
    /// Rows and columns of one component plane.
    pub plane_dims: (usize, usize),
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.block * self.block;
        if self.block == 0 || self.offloaded_ids.is_empty() {
            return Err(ErrorCode::ConfigMismatch.error("empty offloaded set"));
        }
        if self.offloaded_ids.windows(2).any(|w| w[0] >= w[1]) || self.offloaded_ids.iter().any(|&k| k >= n) {
            return Err(ErrorCode::ConfigMismatch.error("offloaded ids must be sorted, unique and below B²"));
        }
        if self.codec_hash == 0 || self.calib_hash == 0 {
            return Err(ErrorCode::ConfigMismatch.error("hashes must be nonzero"));
        }
        if self.latent_dim == 0 || self.plane_dims.0 == 0 || self.plane_dims.1 == 0 {
            return Err(ErrorCode::ConfigMismatch.error("zero latent or plane dimension"));
        }
        Ok(())
    }

    /// Configuration announcing `model`'s offloaded path under calibration `cal`.
    pub fn for_model(model: &OffloadModel, cal: &NoiseCalibration) -> Result<Self> {
        let codec = model.offloaded_codec()?;
        let (h, w) = model.dims();
        let b = model.plan.block;
        Ok(Self {
            block: b,
            offloaded_ids: model.plan.offloaded_ids.clone(),
            latent_dim: codec.latent_dim(),
            codec_hash: codec.content_hash(),
            calib_hash: cal.content_hash(),
            plane_dims: (h / b, w / b),
        })
    }

    /// Float count of one `ReturnComponents` payload.
    pub fn return_len(&self) -> usize {
        self.offloaded_ids.len() * self.plane_dims.0 * self.plane_dims.1 * crate::frequency::CHANNELS
    }

    pub fn to_payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        p.extend_from_slice(&(self.block as u32).to_le_bytes());
        p.extend_from_slice(&(self.offloaded_ids.len() as u32).to_le_bytes());
        for &k in &self.offloaded_ids {
            p.extend_from_slice(&(k as u32).to_le_bytes());
        }
        p.extend_from_slice(&(self.latent_dim as u32).to_le_bytes());
        p.extend_from_slice(&self.codec_hash.to_le_bytes());
        p.extend_from_slice(&self.calib_hash.to_le_bytes());
        p.extend_from_slice(&(self.plane_dims.0 as u32).to_le_bytes());
        p.extend_from_slice(&(self.plane_dims.1 as u32).to_le_bytes());
        p
    }

    pub fn from_payload(p: &[u8]) -> Result<Self> {
        let mut c = Cursor { p, pos: 0 };
        let block = c.u32()?;
        let m = c.u32()?;
        if m > 64 * 64 {
            return Err(malformed("offloaded id count too large"));
        }
        let offloaded_ids = (0..m).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let latent_dim = c.u32()?;
        let codec_hash = c.u64()?;
        let calib_hash = c.u64()?;
        let plane_dims = (c.u32()?, c.u32()?);
        if c.pos != p.len() {
            return Err(malformed("trailing bytes after hello"));
        }
        Ok(Self { block, offloaded_ids, latent_dim, codec_hash, calib_hash, plane_dims })
    }
}

struct Cursor<'a> {
    p: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self.p.get(self.pos..self.pos + N).ok_or_else(|| malformed("truncated hello"))?;
        self.pos += N;
        Ok(s.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
}

/// Offloaded-path codecs the host can serve, keyed by content hash.
#[derive(Clone, Debug, Default)]
pub struct CodecStore {
    codecs: HashMap<u64, Arc<Codec>>,
}

impl CodecStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, codec: Codec) -> Result<u64> {
        if codec.path() != PathKind::Offloaded {
            return Err(crate::error::invalid("host only serves offloaded-path codecs"));
        }
        let h = codec.content_hash();
        self.codecs.insert(h, Arc::new(codec));
        Ok(h)
    }

    pub fn get(&self, hash: u64) -> Option<&Arc<Codec>> {
        self.codecs.get(&hash)
    }

    pub fn len(&self) -> usize {
        self.codecs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codecs.is_empty()
    }
}

/// Sees every envelope the host receives.
pub trait Recorder: Send + Sync {
    fn record(&self, envelope: &Envelope);
}

#[derive(Debug, Default)]
pub struct MemoryRecorder {
    pub received: Mutex<Vec<Envelope>>,
}

impl Recorder for MemoryRecorder {
    fn record(&self, envelope: &Envelope) {
        self.received.lock().unwrap().push(envelope.clone());
    }
}

#[derive(Clone)]
pub struct HostOptions {
    pub idle_timeout: Duration,
    /// Stop accepting after this many sessions and return once they finish.
    pub max_sessions: Option<usize>,
    pub recorder: Option<Arc<dyn Recorder>>,
}

impl Default for HostOptions {
    fn default() -> Self {
        Self { idle_timeout: DEFAULT_IDLE_TIMEOUT, max_sessions: None, recorder: None }
    }
}

pub struct Host {
    listener: TcpListener,
    store: Arc<CodecStore>,
    options: HostOptions,
    stop: Arc<AtomicBool>,
}

pub struct HostHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: JoinHandle<Result<()>>,
}

impl HostHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, waits for running sessions, and returns the host result.
    pub fn shutdown(self) -> Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        self.join()
    }

    pub fn join(self) -> Result<()> {
        self.thread.join().map_err(|_| ErrorCode::Internal.error("host thread panicked"))?
    }
}

impl Host {
    pub fn bind(addr: impl ToSocketAddrs, store: CodecStore, options: HostOptions) -> Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            store: Arc::new(store),
            options,
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts sessions, one thread each, until stopped or `max_sessions` is reached.
    pub fn run(self) -> Result<()> {
        let mut workers = Vec::new();
        let mut accepted = 0;
        for conn in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let store = Arc::clone(&self.store);
            let options = self.options.clone();
            workers.push(thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = handle_session(stream, &store, &options) {
                    log::info!("session from {peer:?} ended: {e}");
                }
            }));
            accepted += 1;
            if self.options.max_sessions.is_some_and(|m| accepted >= m) {
                break;
            }
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }

    pub fn spawn(self) -> Result<HostHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::clone(&self.stop);
        let thread = thread::spawn(move || self.run());
        Ok(HostHandle { addr, stop, thread })
    }
}

fn is_timeout(e: &Error) -> bool {
    matches!(e, Error::Io(io) if matches!(io.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut))
}

fn is_eof(e: &Error) -> bool {
    matches!(e, Error::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof)
}

/// Sends an `Error` reply and returns the matching local error.
fn reject(stream: &mut TcpStream, session: u64, frame: u64, code: ErrorCode, message: String) -> Result<()> {
    let _ = Envelope::error(session, frame, code, &message).write_to(stream);
    Err(code.error(message))
}

fn handle_session(mut stream: TcpStream, store: &CodecStore, options: &HostOptions) -> Result<()> {
    stream.set_read_timeout(Some(options.idle_timeout))?;
    stream.set_nodelay(true)?;
    let record = |e: &Envelope| {
        if let Some(r) = &options.recorder {
            r.record(e);
        }
    };

    let hello = Envelope::read_from(&mut stream)?;
    record(&hello);
    let session = hello.session_id;
    if hello.msg_type != MsgType::Hello {
        return reject(&mut stream, session, hello.frame_id, ErrorCode::BadMessage, "expected hello".into());
    }
    let config = match SessionConfig::from_payload(&hello.payload).and_then(|c| c.validate().map(|_| c)) {
        Ok(c) => c,
        Err(e) => return reject(&mut stream, session, 0, ErrorCode::ConfigMismatch, e.to_string()),
    };
    let Some(codec) = store.get(config.codec_hash) else {
        return reject(
            &mut stream,
            session,
            0,
            ErrorCode::HashMismatch,
            format!("no codec with hash {:016x}", config.codec_hash),
        );
    };
    if codec.latent_dim() != config.latent_dim || codec.input_dim() != config.return_len() {
        return reject(&mut stream, session, 0, ErrorCode::ConfigMismatch, "codec shape disagrees with hello".into());
    }
    Envelope::new(MsgType::Ack, session, 0, Vec::new()).write_to(&mut stream)?;

    let mut last_frame: Option<u64> = None;
    loop {
        let env = match Envelope::read_from(&mut stream) {
            Ok(e) => e,
            Err(e) if is_timeout(&e) || is_eof(&e) => return Ok(()),
            Err(e) => return Err(e),
        };
        record(&env);
        match env.msg_type {
            MsgType::Bye => return Ok(()),
            MsgType::OffloadLatent => {}
            other => {
                return reject(&mut stream, session, env.frame_id, ErrorCode::BadMessage, format!("unexpected {other:?}"))
            }
        }
        if env.session_id != session {
            return reject(&mut stream, session, env.frame_id, ErrorCode::BadMessage, "session id changed".into());
        }
        if last_frame.is_some_and(|l| env.frame_id <= l) {
            return reject(
                &mut stream,
                session,
                env.frame_id,
                ErrorCode::FrameOrder,
                format!("frame {} not after {}", env.frame_id, last_frame.unwrap()),
            );
        }
        last_frame = Some(env.frame_id);
        if env.payload.len() != 4 * config.latent_dim {
            return reject(
                &mut stream,
                session,
                env.frame_id,
                ErrorCode::LatentLength,
                format!("latent of {} bytes, expected {}", env.payload.len(), 4 * config.latent_dim),
            );
        }
        let planes = host_decode(codec, &bytes_to_f32s(&env.payload)?)?;
        Envelope::new(MsgType::ReturnComponents, session, env.frame_id, f32s_to_bytes(&planes)).write_to(&mut stream)?;
    }
}

/// Client end of one offload session.
pub struct OffloadClient {
    stream: TcpStream,
    session_id: u64,
    config: SessionConfig,
}

impl OffloadClient {
    /// Connects, announces `config`, and waits for the host's `Ack`.
    pub fn connect(addr: impl ToSocketAddrs, config: SessionConfig, session_id: u64, timeout: Duration) -> Result<Self> {
        config.validate()?;
        let mut last_err = None;
        let mut stream = None;
        for a in addr.to_socket_addrs()? {
            match TcpStream::connect_timeout(&a, timeout) {
                Ok(s) => {
                    stream = Some(s);
                    break;
                }
                Err(e) => last_err = Some(e),
            }
        }
        let mut stream = match stream {
            Some(s) => s,
            None => {
                return Err(last_err
                    .map(Error::Io)
                    .unwrap_or_else(|| ErrorCode::Internal.error("address resolved to nothing")))
            }
        };
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        stream.set_nodelay(true)?;
        Envelope::new(MsgType::Hello, session_id, 0, config.to_payload()).write_to(&mut stream)?;
        let reply = Envelope::read_from(&mut stream)?;
        match reply.msg_type {
            MsgType::Ack if reply.session_id == session_id => Ok(Self { stream, session_id, config }),
            MsgType::Error => {
                let (code, message) = reply.error_parts()?;
                Err(Error::Protocol { code, message })
            }
            other => Err(ErrorCode::BadMessage.error(format!("expected ack, got {other:?}"))),
        }
    }

    pub fn session_id(&self) -> u64 {
        self.session_id
    }

    /// Sends `Bye` and closes the connection.
    pub fn close(mut self) -> Result<()> {
        Envelope::new(MsgType::Bye, self.session_id, 0, Vec::new()).write_to(&mut self.stream)
    }
}

impl OffloadTransport for OffloadClient {
    fn offload(&mut self, frame_id: u64, latent: &[f32]) -> Result<Vec<f32>> {
        if latent.len() != self.config.latent_dim {
            return Err(Error::DimensionMismatch { expected: self.config.latent_dim, actual: latent.len() });
        }
        Envelope::new(MsgType::OffloadLatent, self.session_id, frame_id, f32s_to_bytes(latent)).write_to(&mut self.stream)?;
        let reply = Envelope::read_from(&mut self.stream)?;
        match reply.msg_type {
            MsgType::ReturnComponents => {}
            MsgType::Error => {
                let (code, message) = reply.error_parts()?;
                return Err(Error::Protocol { code, message });
            }
            other => return Err(ErrorCode::BadMessage.error(format!("expected components, got {other:?}"))),
        }
        if reply.session_id != self.session_id || reply.frame_id != frame_id {
            return Err(ErrorCode::BadMessage.error("reply for a different session or frame"));
        }
        let planes = bytes_to_f32s(&reply.payload)?;
        if planes.len() != self.config.return_len() {
            return Err(ErrorCode::BadMessage.error(format!(
                "returned {} floats, expected {}",
                planes.len(),
                self.config.return_len()
            )));
        }
        Ok(planes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golden_config() -> SessionConfig {
        SessionConfig {
            block: 4,
            offloaded_ids: (2..16).collect(),
            latent_dim: 256,
            codec_hash: 0x0123_4567_89ab_cdef,
            calib_hash: 0xfedc_ba98_7654_3210,
            plane_dims: (16, 16),
        }
    }

    #[test]
    fn round_trip_every_type() {
        for t in MsgType::ALL {
            let e = Envelope::new(t, 7, 42, vec![1, 2, 3, t as u8]);
            let bytes = e.encode().unwrap();
            assert_eq!(bytes.len(), HEADER_LEN + 4);
            assert_eq!(Envelope::decode(&bytes).unwrap(), e);
            assert_eq!(Envelope::read_from(&mut bytes.as_slice()).unwrap(), e);
        }
    }

    #[test]
    fn rejects_corruption() {
        let good = Envelope::new(MsgType::Ack, 1, 2, vec![9; 5]).encode().unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(Envelope::decode(&bad).is_err());
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(Envelope::decode(&bad).is_err());
        let mut bad = good.clone();
        bad[5] = 99;
        assert!(Envelope::decode(&bad).is_err());
        assert!(Envelope::decode(&good[..good.len() - 1]).is_err());
        assert!(Envelope::decode(&good[..10]).is_err());
        let mut big = good.clone();
        big[22..26].copy_from_slice(&((MAX_PAYLOAD + 1) as u32).to_le_bytes());
        assert!(Envelope::read_from(&mut big.as_slice()).is_err());
        assert!(Envelope::read_from(&mut &good[..20]).is_err());
    }

    #[test]
    fn hello_golden_bytes() {
        let e = Envelope::new(MsgType::Hello, 1, 0, golden_config().to_payload());
        let hex: String = e.encode().unwrap().iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, GOLDEN_HELLO);
        let back = SessionConfig::from_payload(&Envelope::decode(&e.encode().unwrap()).unwrap().payload).unwrap();
        assert_eq!(back, golden_config());
    }

    const GOLDEN_HELLO: &str = concat!(
        "41564f460101010000000000000000000000000000005c000000",
        "040000000e00000002000000030000000400000005000000060000000700000008000000",
        "090000000a0000000b0000000c0000000d0000000e0000000f00000000010000",
        "efcdab89674523011032547698badcfe1000000010000000",
    );

    #[test]
    fn config_validation() {
        let mut c = golden_config();
        assert!(c.validate().is_ok());
        c.offloaded_ids = vec![3, 2];
        assert!(c.validate().is_err());
        let mut c = golden_config();
        c.codec_hash = 0;
        assert!(c.validate().is_err());
        let mut c = golden_config();
        c.offloaded_ids.push(16);
        assert!(c.validate().is_err());
        let mut p = golden_config().to_payload();
        p.push(0);
        assert!(SessionConfig::from_payload(&p).is_err());
    }

    #[test]
    fn error_payload() {
        let e = Envelope::error(3, 4, ErrorCode::FrameOrder, "late");
        assert_eq!(e.error_parts().unwrap(), (3, "late".to_string()));
    }
}
