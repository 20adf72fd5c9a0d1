//! Framed request/reply protocol between a trace-generating server and a
//! training client.
//!
//! Every frame is
//!
//! ```text
//! "ICWP"  version:u16  msg_type:u8  payload_len:u32  payload  crc32:u32
//! ```
//!
//! little-endian, with the CRC taken over header and payload. A session is
//! `Hello -> HelloAck`, then any number of `GenBatch -> Batch`, then `Bye`.
//! The server answers protocol violations with an `Error` frame and closes
//! the connection.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};

use log::{debug, info, warn};
use thiserror::Error;

use crate::compiler::{seeds, SourceError, TraceGenerator, TraceSource, TrainingBatch, TrainingTrace};
use crate::distributions::{ProposalType, SampleValue};
use crate::runtime::ModelProgram;
use crate::trace::{Address, Observations, TraceEntry};

pub const MAGIC: &[u8; 4] = b"ICWP";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 11;
/// Upper bound on accepted payloads, so a corrupted length cannot trigger a
/// huge allocation.
pub const MAX_PAYLOAD: u32 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    HelloAck = 2,
    GenBatch = 3,
    Batch = 4,
    Error = 5,
    Bye = 6,
}

impl MsgType {
    pub const ALL: [MsgType; 6] =
        [MsgType::Hello, MsgType::HelloAck, MsgType::GenBatch, MsgType::Batch, MsgType::Error, MsgType::Bye];

    pub fn from_u8(b: u8) -> Option<Self> {
        MsgType::ALL.get((b as usize).wrapping_sub(1)).copied()
    }
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad frame magic")]
    BadMagic,
    #[error("protocol version {got}, expected {VERSION}")]
    Version { got: u16 },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("frame checksum mismatch")]
    Checksum,
    #[error("frame or payload truncated")]
    Truncated,
    #[error("payload of {0} bytes exceeds the limit")]
    TooLarge(u32),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("expected {expected:?}, received {got:?}")]
    Unexpected { expected: MsgType, got: MsgType },
    #[error("peer reported: {0}")]
    Remote(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub version: u16,
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: Vec<u8>) -> Self {
        Frame { version: VERSION, msg_type, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.msg_type as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
        if bytes.len() < HEADER_LEN + 4 {
            return Err(WireError::Truncated);
        }
        let len = u32::from_le_bytes(bytes[7..11].try_into().unwrap());
        if bytes.len() as u64 != HEADER_LEN as u64 + len as u64 + 4 {
            return Err(WireError::Truncated);
        }
        let (body, crc) = bytes.split_at(bytes.len() - 4);
        Self::check(body, u32::from_le_bytes(crc.try_into().unwrap()))
    }

    fn check(body: &[u8], crc: u32) -> Result<Frame, WireError> {
        if crc32fast::hash(body) != crc {
            return Err(WireError::Checksum);
        }
        if &body[..4] != MAGIC {
            return Err(WireError::BadMagic);
        }
        let version = u16::from_le_bytes([body[4], body[5]]);
        let msg_type = MsgType::from_u8(body[6]).ok_or(WireError::UnknownType(body[6]))?;
        Ok(Frame { version, msg_type, payload: body[HEADER_LEN..].to_vec() })
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Frame, WireError> {
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)?;
        if &header[..4] != MAGIC {
            return Err(WireError::BadMagic);
        }
        let len = u32::from_le_bytes(header[7..11].try_into().unwrap());
        if len > MAX_PAYLOAD {
            return Err(WireError::TooLarge(len));
        }
        let mut body = Vec::with_capacity(HEADER_LEN + len as usize);
        body.extend_from_slice(&header);
        body.resize(HEADER_LEN + len as usize, 0);
        r.read_exact(&mut body[HEADER_LEN..])?;
        let mut crc = [0u8; 4];
        r.read_exact(&mut crc)?;
        Self::check(&body, u32::from_le_bytes(crc))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }
}

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn value(&mut self, v: &SampleValue) {
        match *v {
            SampleValue::Real(x) => {
                self.u8(0);
                self.f64(x);
            }
            SampleValue::Category(c) => {
                self.u8(1);
                self.u32(c);
            }
            SampleValue::Point([x, y]) => {
                self.u8(2);
                self.f64(x);
                self.f64(y);
            }
        }
    }
    fn proposal_type(&mut self, t: &ProposalType) {
        match *t {
            ProposalType::Normal => self.u8(0),
            ProposalType::UniformContinuous { low, high } => {
                self.u8(1);
                self.f64(low);
                self.f64(high);
            }
            ProposalType::Categorical { categories } => {
                self.u8(2);
                self.u32(categories);
            }
        }
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Dec { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(WireError::Truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String, WireError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| WireError::Malformed("invalid UTF-8".into()))
    }
    fn value(&mut self) -> Result<SampleValue, WireError> {
        Ok(match self.u8()? {
            0 => SampleValue::Real(self.f64()?),
            1 => SampleValue::Category(self.u32()?),
            2 => SampleValue::Point([self.f64()?, self.f64()?]),
            t => return Err(WireError::Malformed(format!("unknown value tag {t}"))),
        })
    }
    fn proposal_type(&mut self) -> Result<ProposalType, WireError> {
        Ok(match self.u8()? {
            0 => ProposalType::Normal,
            1 => ProposalType::UniformContinuous { low: self.f64()?, high: self.f64()? },
            2 => ProposalType::Categorical { categories: self.u32()? },
            t => return Err(WireError::Malformed(format!("unknown proposal type tag {t}"))),
        })
    }
    fn finish(&self) -> Result<(), WireError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(WireError::Malformed(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hello {
    pub model_id: String,
    pub seed: u64,
}

impl Hello {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::default();
        e.str(&self.model_id);
        e.u64(self.seed);
        e.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut d = Dec::new(bytes);
        let h = Hello { model_id: d.str()?, seed: d.u64()? };
        d.finish()?;
        Ok(h)
    }
}

/// The server's handshake reply: the observation count and the address
/// table that batch entries index into.
#[derive(Debug, Clone, PartialEq)]
pub struct HelloAck {
    pub observe_count: u32,
    pub addresses: Vec<(Address, ProposalType)>,
}

impl HelloAck {
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::default();
        e.u32(self.observe_count);
        e.u16(self.addresses.len() as u16);
        for (a, t) in &self.addresses {
            e.str(a.as_str());
            e.proposal_type(t);
        }
        e.0
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut d = Dec::new(bytes);
        let observe_count = d.u32()?;
        let n = d.u16()?;
        let mut addresses = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let a = Address::new(d.str()?).map_err(|e| WireError::Malformed(e.to_string()))?;
            addresses.push((a, d.proposal_type()?));
        }
        d.finish()?;
        Ok(HelloAck { observe_count, addresses })
    }
}

pub fn encode_count(m: u32) -> Vec<u8> {
    m.to_le_bytes().to_vec()
}

pub fn decode_count(bytes: &[u8]) -> Result<u32, WireError> {
    let mut d = Dec::new(bytes);
    let m = d.u32()?;
    d.finish()?;
    Ok(m)
}

/// Encodes a batch against an address table. Entries at addresses missing
/// from the table are an error.
pub fn encode_batch(batch: &TrainingBatch, table: &[(Address, ProposalType)]) -> Result<Vec<u8>, WireError> {
    let mut e = Enc::default();
    e.u32(batch.len() as u32);
    for t in &batch.traces {
        e.u32(t.entries.len() as u32);
        for entry in &t.entries {
            let id = table
                .iter()
                .position(|(a, ty)| *a == entry.address && *ty == entry.proposal_type)
                .ok_or_else(|| WireError::Malformed(format!("address {} not in the address table", entry.address)))?;
            e.u16(id as u16);
            e.u32(entry.instance);
            e.value(&entry.value);
            e.f64(entry.prior_log_pdf);
        }
        e.u32(t.observations.len() as u32);
        for v in &t.observations.values {
            e.value(v);
        }
    }
    Ok(e.0)
}

pub fn decode_batch(bytes: &[u8], table: &[(Address, ProposalType)]) -> Result<TrainingBatch, WireError> {
    let mut d = Dec::new(bytes);
    let m = d.u32()?;
    let mut traces = Vec::with_capacity((m as usize).min(1 << 16));
    for _ in 0..m {
        let t = d.u32()?;
        let mut entries = Vec::with_capacity((t as usize).min(1 << 16));
        for _ in 0..t {
            let id = d.u16()? as usize;
            let (address, proposal_type) =
                table.get(id).cloned().ok_or_else(|| WireError::Malformed(format!("address id {id} out of range")))?;
            entries.push(TraceEntry {
                address,
                proposal_type,
                instance: d.u32()?,
                value: d.value()?,
                prior_log_pdf: d.f64()?,
                proposal_log_pdf: None,
            });
        }
        let n = d.u32()?;
        let mut values = Vec::with_capacity((n as usize).min(1 << 16));
        for _ in 0..n {
            values.push(d.value()?);
        }
        traces.push(TrainingTrace { entries, observations: Observations::new(values) });
    }
    d.finish()?;
    Ok(TrainingBatch { traces })
}

fn expect(frame: &Frame, expected: MsgType) -> Result<(), WireError> {
    if frame.msg_type == MsgType::Error {
        return Err(WireError::Remote(String::from_utf8_lossy(&frame.payload).into_owned()));
    }
    if frame.msg_type != expected {
        return Err(WireError::Unexpected { expected, got: frame.msg_type });
    }
    Ok(())
}

fn send_error<W: Write>(w: &mut W, msg: &str) {
    if let Err(e) = Frame::new(MsgType::Error, msg.as_bytes().to_vec()).write_to(w) {
        debug!("could not deliver error frame: {e}");
    }
}

/// Serves one client until `Bye`, end of stream, or a protocol error.
pub fn serve_connection<S: Read + Write>(stream: S, model: &dyn ModelProgram) -> Result<(), WireError> {
    let mut stream = stream;
    let table = model.address_table();
    let mut generator: Option<TraceGenerator<'_>> = None;
    loop {
        let frame = match Frame::read_from(&mut stream) {
            Ok(f) => f,
            Err(WireError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => {
                send_error(&mut stream, &e.to_string());
                return Err(e);
            }
        };
        if frame.version != VERSION {
            let e = WireError::Version { got: frame.version };
            send_error(&mut stream, &e.to_string());
            return Err(e);
        }
        let reply = match frame.msg_type {
            MsgType::Hello => {
                let hello = Hello::decode(&frame.payload);
                match hello {
                    Ok(h) if h.model_id == model.id() => {
                        debug!("session for {} with seed {}", h.model_id, h.seed);
                        generator = Some(TraceGenerator::new(model, h.seed));
                        let ack = HelloAck { observe_count: model.observe_count() as u32, addresses: table.clone() };
                        Frame::new(MsgType::HelloAck, ack.encode())
                    }
                    Ok(h) => {
                        let msg = format!("unknown model id {}; serving {}", h.model_id, model.id());
                        send_error(&mut stream, &msg);
                        return Err(WireError::Remote(msg));
                    }
                    Err(e) => {
                        send_error(&mut stream, &e.to_string());
                        return Err(e);
                    }
                }
            }
            MsgType::GenBatch => {
                let Some(gen) = generator.as_mut() else {
                    let msg = "GenBatch before Hello";
                    send_error(&mut stream, msg);
                    return Err(WireError::Malformed(msg.into()));
                };
                let m = match decode_count(&frame.payload) {
                    Ok(m) => m,
                    Err(e) => {
                        send_error(&mut stream, &e.to_string());
                        return Err(e);
                    }
                };
                let encoded = gen
                    .generate(m as usize)
                    .map_err(|e| WireError::Malformed(e.to_string()))
                    .and_then(|b| encode_batch(&b, &table));
                match encoded {
                    Ok(payload) => Frame::new(MsgType::Batch, payload),
                    Err(e) => {
                        send_error(&mut stream, &e.to_string());
                        return Err(e);
                    }
                }
            }
            MsgType::Bye => return Ok(()),
            other => {
                let e = WireError::Malformed(format!("unexpected {other:?} from client"));
                send_error(&mut stream, &e.to_string());
                return Err(e);
            }
        };
        reply.write_to(&mut stream)?;
    }
}

/// Accepts connections one at a time. Stops after `max_connections` if
/// given, otherwise runs until the listener fails.
pub fn serve_traces(
    listener: &TcpListener,
    model: &dyn ModelProgram,
    max_connections: Option<usize>,
) -> Result<(), WireError> {
    let mut served = 0usize;
    while max_connections.is_none_or(|m| served < m) {
        let (stream, peer) = listener.accept()?;
        info!("trace client connected from {peer}");
        stream.set_nodelay(true)?;
        if let Err(e) = serve_connection(Duplex::new(stream)?, model) {
            warn!("session with {peer} ended: {e}");
        }
        served += 1;
    }
    Ok(())
}

/// Buffered read and write halves of one TCP stream.
struct Duplex {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Duplex {
    fn new(stream: TcpStream) -> io::Result<Self> {
        Ok(Duplex { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream) })
    }
}

impl Read for Duplex {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.reader.read(buf)
    }
}

impl Write for Duplex {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.writer.write(buf)
    }
    fn flush(&mut self) -> io::Result<()> {
        self.writer.flush()
    }
}

struct Session {
    stream: Duplex,
    table: Vec<(Address, ProposalType)>,
}

/// Training batches fetched from a trace server.
///
/// The first connection uses `seed` unchanged, so its batches equal those of
/// an in-process source with the same seed. Each reconnect starts a new seed
/// epoch.
pub struct RemoteTraceSource {
    endpoint: String,
    model_id: String,
    seed: u64,
    epoch: u64,
    session: Option<Session>,
}

impl RemoteTraceSource {
    pub fn new(endpoint: impl Into<String>, model_id: impl Into<String>, seed: u64) -> Self {
        RemoteTraceSource { endpoint: endpoint.into(), model_id: model_id.into(), seed, epoch: 0, session: None }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn epoch_seed(&self) -> u64 {
        if self.epoch == 0 {
            self.seed
        } else {
            seeds::derive(self.seed, self.epoch)
        }
    }

    /// Opens a connection and performs the handshake.
    pub fn connect(&mut self) -> Result<(), WireError> {
        let addr = self
            .endpoint
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| WireError::Malformed(format!("cannot resolve {}", self.endpoint)))?;
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let mut stream = Duplex::new(stream)?;
        let hello = Hello { model_id: self.model_id.clone(), seed: self.epoch_seed() };
        Frame::new(MsgType::Hello, hello.encode()).write_to(&mut stream)?;
        let reply = Frame::read_from(&mut stream)?;
        expect(&reply, MsgType::HelloAck)?;
        if reply.version != VERSION {
            return Err(WireError::Version { got: reply.version });
        }
        let ack = HelloAck::decode(&reply.payload)?;
        self.session = Some(Session { stream, table: ack.addresses });
        Ok(())
    }

    fn fetch(&mut self, size: usize) -> Result<TrainingBatch, WireError> {
        if self.session.is_none() {
            self.connect()?;
        }
        let s = self.session.as_mut().expect("connected above");
        Frame::new(MsgType::GenBatch, encode_count(size as u32)).write_to(&mut s.stream)?;
        let reply = Frame::read_from(&mut s.stream)?;
        expect(&reply, MsgType::Batch)?;
        let batch = decode_batch(&reply.payload, &s.table)?;
        if batch.len() != size {
            return Err(WireError::Malformed(format!("asked for {size} traces, got {}", batch.len())));
        }
        Ok(batch)
    }

    /// Sends `Bye` and drops the connection.
    pub fn close(&mut self) {
        if let Some(mut s) = self.session.take() {
            let _ = Frame::new(MsgType::Bye, Vec::new()).write_to(&mut s.stream);
        }
    }
}

impl Drop for RemoteTraceSource {
    fn drop(&mut self) {
        self.close();
    }
}

fn classify(e: WireError) -> SourceError {
    match e {
        WireError::Io(_) | WireError::Checksum | WireError::Truncated => SourceError::Retriable(e.to_string()),
        _ => SourceError::Fatal(e.to_string()),
    }
}

impl TraceSource for RemoteTraceSource {
    fn next_batch(&mut self, size: usize) -> Result<TrainingBatch, SourceError> {
        self.fetch(size).map_err(|e| {
            self.session = None;
            classify(e)
        })
    }

    fn reconnect(&mut self) -> Result<(), SourceError> {
        self.session = None;
        self.epoch += 1;
        info!("reconnecting to {} (seed epoch {})", self.endpoint, self.epoch);
        self.connect().map_err(classify)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ConjugateGaussian, GaussianMixture};
    use proptest::prelude::*;
    use std::io::Cursor;

    fn value_strategy() -> impl Strategy<Value = SampleValue> {
        prop_oneof![
            any::<f64>().prop_map(SampleValue::Real),
            any::<u32>().prop_map(SampleValue::Category),
            (any::<f64>(), any::<f64>()).prop_map(|(x, y)| SampleValue::Point([x, y])),
        ]
    }

    fn table() -> Vec<(Address, ProposalType)> {
        vec![
            (Address::new("a").unwrap(), ProposalType::Normal),
            (Address::new("b").unwrap(), ProposalType::UniformContinuous { low: -1.0, high: 2.0 }),
            (Address::new("c").unwrap(), ProposalType::Categorical { categories: 4 }),
        ]
    }

    fn batch_strategy() -> impl Strategy<Value = TrainingBatch> {
        let entry = (0usize..3, 1u32..100, value_strategy(), any::<f64>()).prop_map(|(id, instance, value, lp)| {
            let (address, proposal_type) = table()[id].clone();
            TraceEntry { value, address, instance, proposal_type, prior_log_pdf: lp, proposal_log_pdf: None }
        });
        let trace = (prop::collection::vec(entry, 0..6), prop::collection::vec(value_strategy(), 0..4))
            .prop_map(|(entries, obs)| TrainingTrace { entries, observations: Observations::new(obs) });
        prop::collection::vec(trace, 0..4).prop_map(|traces| TrainingBatch { traces })
    }

    /// Bitwise comparison, since NaN payloads must survive the round trip.
    fn same_bits(a: &TrainingBatch, b: &TrainingBatch) -> bool {
        let enc = |x: &TrainingBatch| encode_batch(x, &table()).unwrap();
        a.len() == b.len() && enc(a) == enc(b)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn frame_round_trip(t in 0usize..6, version in any::<u16>(), payload in prop::collection::vec(any::<u8>(), 0..64)) {
            let f = Frame { version, msg_type: MsgType::ALL[t], payload };
            let bytes = f.encode();
            prop_assert_eq!(Frame::decode(&bytes).unwrap(), f.clone());
            prop_assert_eq!(Frame::read_from(&mut Cursor::new(&bytes)).unwrap(), f);
        }

        #[test]
        fn single_bit_flip_detected(t in 0usize..6, payload in prop::collection::vec(any::<u8>(), 0..64), bit in any::<prop::sample::Index>()) {
            let bytes = Frame::new(MsgType::ALL[t], payload).encode();
            let i = bit.index(bytes.len() * 8);
            let mut corrupt = bytes.clone();
            corrupt[i / 8] ^= 1 << (i % 8);
            prop_assert!(Frame::decode(&corrupt).is_err());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2_000))]

        #[test]
        fn batch_round_trip(batch in batch_strategy()) {
            let bytes = encode_batch(&batch, &table()).unwrap();
            let back = decode_batch(&bytes, &table()).unwrap();
            prop_assert!(same_bits(&batch, &back));
        }
    }

    #[test]
    fn handshake_messages_round_trip() {
        let h = Hello { model_id: "conjugate(x)".into(), seed: u64::MAX - 3 };
        assert_eq!(Hello::decode(&h.encode()).unwrap(), h);
        let a = HelloAck { observe_count: 100, addresses: table() };
        assert_eq!(HelloAck::decode(&a.encode()).unwrap(), a);
        assert!(Hello::decode(&[1, 0, 0]).is_err());
        assert_eq!(decode_count(&encode_count(77)).unwrap(), 77);
    }

    #[test]
    fn decode_rejects_garbage() {
        let mut bytes = Frame::new(MsgType::Bye, vec![]).encode();
        assert!(matches!(Frame::decode(&bytes[..5]), Err(WireError::Truncated)));
        bytes[0] = b'X';
        let crc = crc32fast::hash(&bytes[..HEADER_LEN]);
        bytes[HEADER_LEN..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Frame::decode(&bytes), Err(WireError::BadMagic)));
        assert!(decode_batch(&[1, 0, 0, 0, 1, 0, 0, 0, 9, 0], &table()).is_err());
    }

    /// In-memory duplex: reads scripted client frames, records replies.
    struct Script {
        input: Cursor<Vec<u8>>,
        output: Vec<u8>,
    }

    impl Read for Script {
        fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
            self.input.read(buf)
        }
    }

    impl Write for Script {
        fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
            self.output.write(buf)
        }
        fn flush(&mut self) -> io::Result<()> {
            Ok(())
        }
    }

    fn script(frames: &[Frame]) -> Script {
        Script { input: Cursor::new(frames.iter().flat_map(Frame::encode).collect()), output: Vec::new() }
    }

    fn replies(s: &Script) -> Vec<Frame> {
        let mut c = Cursor::new(s.output.as_slice());
        let mut out = Vec::new();
        while (c.position() as usize) < s.output.len() {
            out.push(Frame::read_from(&mut c).unwrap());
        }
        out
    }

    #[test]
    fn server_session_in_memory() {
        let model = ConjugateGaussian::default();
        let hello = Hello { model_id: model.id(), seed: 9 };
        let mut s = script(&[
            Frame::new(MsgType::Hello, hello.encode()),
            Frame::new(MsgType::GenBatch, encode_count(0)),
            Frame::new(MsgType::GenBatch, encode_count(3)),
            Frame::new(MsgType::Bye, vec![]),
        ]);
        serve_connection(&mut s, &model).unwrap();
        let r = replies(&s);
        assert_eq!(
            r.iter().map(|f| f.msg_type).collect::<Vec<_>>(),
            [MsgType::HelloAck, MsgType::Batch, MsgType::Batch]
        );
        let ack = HelloAck::decode(&r[0].payload).unwrap();
        assert_eq!(ack.observe_count, 3);
        assert_eq!(ack.addresses, model.address_table());
        assert!(decode_batch(&r[1].payload, &ack.addresses).unwrap().is_empty());
        let batch = decode_batch(&r[2].payload, &ack.addresses).unwrap();
        let local = TraceGenerator::new(&model, 9).generate(3).unwrap();
        assert_eq!(batch, local);
    }

    #[test]
    fn server_rejects_unknown_model_and_bad_frames() {
        let model = GaussianMixture::fixed(3);
        let mut s = script(&[Frame::new(MsgType::Hello, Hello { model_id: "nope".into(), seed: 1 }.encode())]);
        assert!(serve_connection(&mut s, &model).is_err());
        assert_eq!(replies(&s)[0].msg_type, MsgType::Error);

        let mut s = script(&[Frame::new(MsgType::GenBatch, encode_count(1))]);
        assert!(serve_connection(&mut s, &model).is_err());
        assert_eq!(replies(&s)[0].msg_type, MsgType::Error);

        let mut s = script(&[Frame { version: 99, msg_type: MsgType::Hello, payload: vec![] }]);
        assert!(matches!(serve_connection(&mut s, &model), Err(WireError::Version { got: 99 })));
    }
}
