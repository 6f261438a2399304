//! Enclave boundary: mock attestation, the encrypted channel, the
//! send/recv host calls with padding and quotas, and host framing.

use std::collections::{HashSet, VecDeque};
use std::io::{self, Read, Write};

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use hkdf::Hkdf;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::bundle::{decode_bundle, BundleError, CodeProofBundle, PolicyManifest, ServiceMode};
use crate::emulator::{ExecutionOutcome, Host, RunConfig};
use crate::loader::{EnclaveLayout, LayoutConfig};
use crate::pipeline::{admit, PipelineError};

pub const BUILD_ID: &str = concat!("cat-consumer/", env!("CARGO_PKG_VERSION"));
/// Nonce prefix plus Poly1305 tag.
pub const AEAD_OVERHEAD: usize = 12 + 16;
/// Length header inside every padded message.
pub const LENGTH_HEADER: usize = 4;
const TEST_KEY_SEED: [u8; 32] = *b"cat mock attestation signing key";
const QUOTE_TAG: &[u8; 4] = b"CATQ";
const SESSION_INFO: &[u8] = b"cat session key";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("nonce was already used")]
    NonceReplay,
    #[error("quote signature does not verify")]
    BadSignature,
    #[error("quote measurement does not match the expected build")]
    MeasurementMismatch,
    #[error("quote is bound to a different nonce or key")]
    QuoteBindingMismatch,
    #[error("authenticated decryption failed")]
    AuthFailure,
    #[error("payload of {size} bytes exceeds the {capacity}-byte data region")]
    DataTooLarge { size: usize, capacity: u64 },
    #[error("send quota of {0} exhausted")]
    SendQuotaExceeded(u32),
    #[error("output of {bits} bits exceeds the remaining budget of {remaining} bits")]
    OutputBudgetExceeded { bits: u64, remaining: u64 },
    #[error("message of {size} bytes exceeds the pad length {pad}")]
    MessageTooLong { size: usize, pad: u32 },
    #[error("recv is not permitted in CDaaS mode")]
    RecvNotAllowed,
    #[error("no queued host message")]
    QueueEmpty,
    #[error("bundle manifest differs from the attested manifest")]
    ManifestMismatch,
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error("malformed frame: {0}")]
    BadFrame(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Digest of the consumer build, its layout configuration, and the manifest.
pub fn measure(build_id: &str, layout: &LayoutConfig, manifest: &PolicyManifest) -> Measurement {
    let mut h = Sha256::new();
    for part in [build_id.to_string(), layout.canonical_text(), format!("{manifest:?}")] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part.as_bytes());
    }
    Measurement(h.finalize().into())
}

/// The repository-local signing key standing in for a hardware quoting key.
pub fn test_signing_key() -> SigningKey {
    SigningKey::from_bytes(&TEST_KEY_SEED)
}

pub fn test_verifying_key() -> VerifyingKey {
    test_signing_key().verifying_key()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClientHello {
    pub nonce: [u8; 32],
    pub client_public: [u8; 32],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quote {
    pub measurement: Measurement,
    pub nonce: [u8; 32],
    pub client_public: [u8; 32],
    pub enclave_public: [u8; 32],
    pub signature: [u8; 64],
}

pub const QUOTE_LEN: usize = 32 * 4 + 64;

impl Quote {
    fn signed_bytes(&self) -> Vec<u8> {
        let mut v = QUOTE_TAG.to_vec();
        v.extend_from_slice(&self.measurement.0);
        v.extend_from_slice(&self.nonce);
        v.extend_from_slice(&self.client_public);
        v.extend_from_slice(&self.enclave_public);
        v
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = self.signed_bytes()[QUOTE_TAG.len()..].to_vec();
        v.extend_from_slice(&self.signature);
        v
    }

    pub fn from_bytes(b: &[u8]) -> Result<Quote, GatewayError> {
        if b.len() != QUOTE_LEN {
            return Err(GatewayError::BadFrame(format!("quote of {} bytes", b.len())));
        }
        let arr = |i: usize| -> [u8; 32] { b[i * 32..(i + 1) * 32].try_into().expect("32 bytes") };
        Ok(Quote {
            measurement: Measurement(arr(0)),
            nonce: arr(1),
            client_public: arr(2),
            enclave_public: arr(3),
            signature: b[128..].try_into().expect("64 bytes"),
        })
    }
}

fn derive_key(shared: &[u8; 32], nonce: &[u8; 32], measurement: &Measurement) -> [u8; 32] {
    let hk = Hkdf::<Sha256>::new(Some(nonce), shared);
    let mut info = SESSION_INFO.to_vec();
    info.extend_from_slice(&measurement.0);
    let mut key = [0u8; 32];
    hk.expand(&info, &mut key).expect("32 bytes is a valid output length");
    key
}

/// Message direction, part of every AEAD nonce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    ToEnclave = 1,
    ToClient = 2,
}

/// Symmetric channel shared by the client and the enclave.
#[derive(Clone)]
struct Channel {
    cipher: ChaCha20Poly1305,
    counters: [u64; 2],
}

impl Channel {
    fn new(key: &[u8; 32]) -> Channel {
        Channel { cipher: ChaCha20Poly1305::new(Key::from_slice(key)), counters: [0; 2] }
    }

    fn seal(&mut self, dir: Direction, plaintext: &[u8]) -> Vec<u8> {
        let ctr = &mut self.counters[dir as usize - 1];
        let mut nonce = [0u8; 12];
        nonce[0] = dir as u8;
        nonce[4..].copy_from_slice(&ctr.to_le_bytes());
        *ctr += 1;
        let mut out = nonce.to_vec();
        out.extend(self.cipher.encrypt(Nonce::from_slice(&nonce), plaintext).expect("in-memory encryption"));
        out
    }

    fn open(&self, ciphertext: &[u8]) -> Result<Vec<u8>, GatewayError> {
        if ciphertext.len() < AEAD_OVERHEAD {
            return Err(GatewayError::AuthFailure);
        }
        let (nonce, body) = ciphertext.split_at(12);
        self.cipher.decrypt(Nonce::from_slice(nonce), body).map_err(|_| GatewayError::AuthFailure)
    }
}

fn pad(message: &[u8], pad_length: u32) -> Result<Vec<u8>, GatewayError> {
    if message.len() > pad_length as usize {
        return Err(GatewayError::MessageTooLong { size: message.len(), pad: pad_length });
    }
    let mut out = Vec::with_capacity(LENGTH_HEADER + pad_length as usize);
    out.extend_from_slice(&(message.len() as u32).to_le_bytes());
    out.extend_from_slice(message);
    out.resize(LENGTH_HEADER + pad_length as usize, 0);
    Ok(out)
}

fn unpad(padded: &[u8]) -> Result<Vec<u8>, GatewayError> {
    let len = padded
        .get(..LENGTH_HEADER)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
        .ok_or(GatewayError::AuthFailure)?;
    padded.get(LENGTH_HEADER..LENGTH_HEADER + len).map(<[u8]>::to_vec).ok_or(GatewayError::AuthFailure)
}

/// Fixed length of every padded ciphertext for a given pad length.
pub fn padded_ciphertext_len(pad_length: u32) -> usize {
    pad_length as usize + LENGTH_HEADER + AEAD_OVERHEAD
}

/// The attested consumer before any session exists.
pub struct Enclave {
    signing_key: SigningKey,
    pub measurement: Measurement,
    pub manifest: PolicyManifest,
    pub layout: EnclaveLayout,
    seen_nonces: HashSet<[u8; 32]>,
    rng: ChaCha20Rng,
}

impl Enclave {
    pub fn new(layout: EnclaveLayout, manifest: PolicyManifest, seed: u64) -> Enclave {
        Enclave {
            signing_key: test_signing_key(),
            measurement: measure(BUILD_ID, &layout.config, &manifest),
            manifest,
            layout,
            seen_nonces: HashSet::new(),
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    /// Answers a client hello with a signed quote and opens a session.
    pub fn attest(&mut self, hello: &ClientHello) -> Result<(Quote, EnclaveSession), GatewayError> {
        if !self.seen_nonces.insert(hello.nonce) {
            return Err(GatewayError::NonceReplay);
        }
        let secret = StaticSecret::random_from_rng(&mut self.rng);
        let enclave_public = PublicKey::from(&secret).to_bytes();
        let shared = secret.diffie_hellman(&PublicKey::from(hello.client_public));
        let key = derive_key(shared.as_bytes(), &hello.nonce, &self.measurement);
        let mut quote = Quote {
            measurement: self.measurement,
            nonce: hello.nonce,
            client_public: hello.client_public,
            enclave_public,
            signature: [0; 64],
        };
        quote.signature = self.signing_key.sign(&quote.signed_bytes()).to_bytes();
        let session = EnclaveSession::new(&key, self.manifest, self.layout.data.size);
        Ok((quote, session))
    }
}

/// The data owner / code provider side of the handshake.
pub struct Client {
    secret: StaticSecret,
    pub hello: ClientHello,
    expected: Measurement,
    verifying_key: VerifyingKey,
}

impl Client {
    pub fn new(expected: Measurement, verifying_key: VerifyingKey, rng: &mut (impl RngCore + rand::CryptoRng)) -> Client {
        let secret = StaticSecret::random_from_rng(&mut *rng);
        let mut nonce = [0u8; 32];
        rng.fill_bytes(&mut nonce);
        let hello = ClientHello { nonce, client_public: PublicKey::from(&secret).to_bytes() };
        Client { secret, hello, expected, verifying_key }
    }

    /// Checks the quote and derives the session key.
    pub fn finish(&self, quote: &Quote) -> Result<ClientSession, GatewayError> {
        let sig = Signature::from_bytes(&quote.signature);
        self.verifying_key.verify(&quote.signed_bytes(), &sig).map_err(|_| GatewayError::BadSignature)?;
        if quote.measurement != self.expected {
            return Err(GatewayError::MeasurementMismatch);
        }
        if quote.nonce != self.hello.nonce || quote.client_public != self.hello.client_public {
            return Err(GatewayError::QuoteBindingMismatch);
        }
        let shared = self.secret.diffie_hellman(&PublicKey::from(quote.enclave_public));
        let key = derive_key(shared.as_bytes(), &quote.nonce, &quote.measurement);
        Ok(ClientSession { channel: Channel::new(&key), key })
    }
}

pub struct ClientSession {
    channel: Channel,
    pub key: [u8; 32],
}

impl ClientSession {
    /// Encrypts a code or data upload.
    pub fn seal_upload(&mut self, plaintext: &[u8]) -> Vec<u8> {
        self.channel.seal(Direction::ToEnclave, plaintext)
    }

    /// Encrypts a message the host will queue for `ocall_recv`.
    pub fn seal_message(&mut self, plaintext: &[u8], pad_length: u32) -> Result<Vec<u8>, GatewayError> {
        Ok(self.channel.seal(Direction::ToEnclave, &pad(plaintext, pad_length)?))
    }

    /// Decrypts and unpads one output emitted by `ocall_send`.
    pub fn open_output(&self, ciphertext: &[u8]) -> Result<Vec<u8>, GatewayError> {
        unpad(&self.channel.open(ciphertext)?)
    }
}

/// Enclave-side session state: keys, mode, quotas and host queues.
pub struct EnclaveSession {
    channel: Channel,
    pub session_key: [u8; 32],
    pub mode: ServiceMode,
    pub pad_length: u32,
    pub sends_used: u32,
    pub max_sends: u32,
    pub output_bits_used: u64,
    pub output_bits_budget: u64,
    manifest: PolicyManifest,
    data_capacity: u64,
    /// Ciphertexts queued by the host for `ocall_recv`.
    pub inbox: VecDeque<Vec<u8>>,
    /// Ciphertexts emitted to the host by `ocall_send`.
    pub outbox: Vec<Vec<u8>>,
    pub last_error: Option<GatewayError>,
}

impl EnclaveSession {
    fn new(key: &[u8; 32], manifest: PolicyManifest, data_capacity: u64) -> EnclaveSession {
        EnclaveSession {
            channel: Channel::new(key),
            session_key: *key,
            mode: manifest.mode,
            pad_length: manifest.pad_length,
            sends_used: 0,
            max_sends: manifest.max_sends,
            output_bits_used: 0,
            output_bits_budget: manifest.max_output_bits as u64,
            manifest,
            data_capacity,
            inbox: VecDeque::new(),
            outbox: Vec::new(),
            last_error: None,
        }
    }

    pub fn ecall_receive_binary(&mut self, ciphertext: &[u8]) -> Result<CodeProofBundle, GatewayError> {
        let plain = self.channel.open(ciphertext)?;
        let bundle = decode_bundle(&plain)?;
        if bundle.manifest != self.manifest {
            return Err(GatewayError::ManifestMismatch);
        }
        Ok(bundle)
    }

    pub fn ecall_receive_userdata(&mut self, ciphertext: &[u8]) -> Result<Vec<u8>, GatewayError> {
        let plain = self.channel.open(ciphertext)?;
        if plain.len() as u64 > self.data_capacity {
            return Err(GatewayError::DataTooLarge { size: plain.len(), capacity: self.data_capacity });
        }
        Ok(plain)
    }

    pub fn ocall_send(&mut self, plaintext: &[u8]) -> Result<Vec<u8>, GatewayError> {
        if self.mode == ServiceMode::CDaaS {
            if self.sends_used >= self.max_sends {
                return Err(GatewayError::SendQuotaExceeded(self.max_sends));
            }
            let bits = 8 * plaintext.len() as u64;
            let remaining = self.output_bits_budget - self.output_bits_used;
            if bits > remaining {
                return Err(GatewayError::OutputBudgetExceeded { bits, remaining });
            }
        }
        let padded = pad(plaintext, self.pad_length)?;
        self.sends_used += 1;
        if self.mode == ServiceMode::CDaaS {
            self.output_bits_used += 8 * plaintext.len() as u64;
        }
        let ct = self.channel.seal(Direction::ToClient, &padded);
        self.outbox.push(ct.clone());
        Ok(ct)
    }

    pub fn ocall_recv(&mut self) -> Result<Vec<u8>, GatewayError> {
        if self.mode == ServiceMode::CDaaS {
            return Err(GatewayError::RecvNotAllowed);
        }
        let ct = self.inbox.pop_front().ok_or(GatewayError::QueueEmpty)?;
        unpad(&self.channel.open(&ct)?)
    }

    fn record<T>(&mut self, r: Result<T, GatewayError>) -> Result<T, String> {
        r.map_err(|e| {
            let msg = e.to_string();
            self.last_error = Some(e);
            msg
        })
    }
}

impl Host for EnclaveSession {
    fn send(&mut self, message: &[u8]) -> Result<(), String> {
        let r = self.ocall_send(message).map(|_| ());
        self.record(r)
    }

    fn recv(&mut self, capacity: usize) -> Result<Vec<u8>, String> {
        let r = self.ocall_recv();
        let mut m = self.record(r)?;
        m.truncate(capacity);
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

/// Ingests encrypted code and data, admits the code, and runs it with the
/// session as its host.
pub fn serve(
    session: &mut EnclaveSession,
    layout: &EnclaveLayout,
    code_ciphertext: &[u8],
    data_ciphertext: &[u8],
    config: &RunConfig,
) -> Result<ExecutionOutcome, ServiceError> {
    let bundle = session.ecall_receive_binary(code_ciphertext)?;
    let data = session.ecall_receive_userdata(data_ciphertext)?;
    let admitted = admit(&bundle, layout)?;
    let outcome = crate::emulator::run(&admitted.image, &data, session, config).map_err(PipelineError::from)?;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    Quote = 1,
    Code = 2,
    Data = 3,
    Send = 4,
    Recv = 5,
}

impl FrameType {
    fn from_u8(b: u8) -> Option<FrameType> {
        Some(match b {
            1 => FrameType::Quote,
            2 => FrameType::Code,
            3 => FrameType::Data,
            4 => FrameType::Send,
            5 => FrameType::Recv,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameType,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameType, payload: Vec<u8>) -> Frame {
        Frame { kind, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + self.payload.len());
        out.push(self.kind as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.encode())
}

/// Reads one frame; `Ok(None)` at a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> Result<Option<Frame>, GatewayError> {
    let mut header = [0u8; 5];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(GatewayError::BadFrame("truncated header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(GatewayError::BadFrame(e.to_string())),
        }
    }
    let kind = FrameType::from_u8(header[0]).ok_or_else(|| GatewayError::BadFrame(format!("type {}", header[0])))?;
    let len = u32::from_le_bytes(header[1..].try_into().expect("4 bytes")) as usize;
    let mut payload = Vec::new();
    r.take(len as u64).read_to_end(&mut payload).map_err(|e| GatewayError::BadFrame(e.to_string()))?;
    if payload.len() != len {
        return Err(GatewayError::BadFrame("truncated payload".into()));
    }
    Ok(Some(Frame { kind, payload }))
}

pub fn read_frames(mut bytes: &[u8]) -> Result<Vec<Frame>, GatewayError> {
    let mut out = Vec::new();
    while let Some(f) = read_frame(&mut bytes)? {
        out.push(f);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{encode_bundle, Policy, PolicySet};
    use crate::instrument::build_bundle;

    fn cdaas() -> PolicyManifest {
        PolicyManifest { mode: ServiceMode::CDaaS, ..PolicyManifest::with_policies(PolicySet::up_to(Policy::P5)) }
    }

    fn handshake(manifest: PolicyManifest, seed: u64) -> (Enclave, EnclaveSession, ClientSession) {
        let mut enclave = Enclave::new(EnclaveLayout::default(), manifest, seed);
        let mut rng = ChaCha20Rng::seed_from_u64(seed + 1000);
        let client = Client::new(enclave.measurement, test_verifying_key(), &mut rng);
        let (quote, es) = enclave.attest(&client.hello).unwrap();
        let cs = client.finish(&quote).unwrap();
        (enclave, es, cs)
    }

    #[test]
    fn handshakes_agree_and_differ() {
        let (e1, s1, c1) = handshake(cdaas(), 1);
        let (e2, s2, _) = handshake(cdaas(), 2);
        assert_eq!(s1.session_key, c1.key);
        assert_eq!(e1.measurement, e2.measurement);
        assert_ne!(s1.session_key, s2.session_key);
    }

    #[test]
    fn replayed_nonce_and_tampered_quote() {
        let mut enclave = Enclave::new(EnclaveLayout::default(), cdaas(), 7);
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let client = Client::new(enclave.measurement, test_verifying_key(), &mut rng);
        let (mut quote, _) = enclave.attest(&client.hello).unwrap();
        assert!(matches!(enclave.attest(&client.hello), Err(GatewayError::NonceReplay)));
        quote.measurement.0[0] ^= 1;
        assert!(matches!(client.finish(&quote), Err(GatewayError::BadSignature)));
        assert_eq!(Quote::from_bytes(&quote.to_bytes()).unwrap(), quote);
    }

    #[test]
    fn binary_ingestion_authenticates() {
        let (_, mut es, mut cs) = handshake(cdaas(), 3);
        let bundle = build_bundle("main:\n ret\n", &cdaas()).unwrap();
        let ct = cs.seal_upload(&encode_bundle(&bundle));
        assert_eq!(es.ecall_receive_binary(&ct).unwrap(), bundle);
        let mut flipped = ct.clone();
        flipped[20] ^= 0x40;
        assert!(matches!(es.ecall_receive_binary(&flipped), Err(GatewayError::AuthFailure)));
        let (_, mut other, _) = handshake(cdaas(), 4);
        assert!(matches!(other.ecall_receive_binary(&ct), Err(GatewayError::AuthFailure)));
    }

    #[test]
    fn cdaas_quotas() {
        let (_, mut es, cs) = handshake(cdaas(), 5);
        assert!(matches!(es.ocall_send(b"ab"), Err(GatewayError::OutputBudgetExceeded { bits: 16, .. })));
        let ct = es.ocall_send(b"\x01").unwrap();
        assert_eq!(cs.open_output(&ct).unwrap(), b"\x01");
        assert_eq!(es.ocall_send(b""), Err(GatewayError::SendQuotaExceeded(1)));
        assert_eq!(es.ocall_recv(), Err(GatewayError::RecvNotAllowed));
    }

    #[test]
    fn padded_lengths_are_constant() {
        let m = PolicyManifest { max_sends: 10, ..PolicyManifest::default() };
        let (_, mut es, _) = handshake(m, 6);
        let a = es.ocall_send(b"").unwrap();
        let b = es.ocall_send(&[7; 200]).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a.len(), padded_ciphertext_len(m.pad_length));
    }

    #[test]
    fn ccaas_recv_queue() {
        let (_, mut es, mut cs) = handshake(PolicyManifest::default(), 8);
        assert_eq!(es.ocall_recv(), Err(GatewayError::QueueEmpty));
        es.inbox.push_back(cs.seal_message(b"hello", 256).unwrap());
        assert_eq!(es.ocall_recv().unwrap(), b"hello");
        let mut bad = cs.seal_message(b"x", 256).unwrap();
        bad[15] ^= 1;
        es.inbox.push_back(bad);
        assert_eq!(es.ocall_recv(), Err(GatewayError::AuthFailure));
    }

    #[test]
    fn userdata_size_limit() {
        let cfg = LayoutConfig { data_size: 0x1000, ..LayoutConfig::default() };
        let layout = crate::loader::build_layout(&cfg).unwrap();
        let mut enclave = Enclave::new(layout, PolicyManifest::default(), 1);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let client = Client::new(enclave.measurement, test_verifying_key(), &mut rng);
        let (q, mut es) = enclave.attest(&client.hello).unwrap();
        let mut cs = client.finish(&q).unwrap();
        assert_eq!(es.ecall_receive_userdata(&cs.seal_upload(&[1; 1024])).unwrap().len(), 1024);
        assert!(matches!(
            es.ecall_receive_userdata(&cs.seal_upload(&[1; 0x1001])),
            Err(GatewayError::DataTooLarge { .. })
        ));
    }

    #[test]
    fn frames_round_trip() {
        let frames = vec![Frame::new(FrameType::Quote, vec![1, 2, 3]), Frame::new(FrameType::Send, vec![])];
        let bytes: Vec<u8> = frames.iter().flat_map(Frame::encode).collect();
        assert_eq!(read_frames(&bytes).unwrap(), frames);
        assert!(read_frames(&bytes[..bytes.len() - 6]).is_err());
        assert!(read_frames(&[9, 0, 0, 0, 0]).is_err());
    }
}
