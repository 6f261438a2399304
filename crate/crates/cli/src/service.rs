//! One complete consumer session as seen from the data owner: attest,
//! upload code and data, run, and decrypt whatever the enclave sent.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use cat_core::bundle::{encode_bundle, CodeProofBundle};
use cat_core::emulator::{ExecutionOutcome, RunConfig};
use cat_core::gateway::{
    serve, test_verifying_key, Client, Enclave, Frame, FrameType, GatewayError, ServiceError,
};
use cat_core::loader::EnclaveLayout;

#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub outcome: ExecutionOutcome,
    /// Every frame that crossed the host boundary, in order.
    pub frames: Vec<Frame>,
    /// Outputs as decrypted by the client.
    pub decrypted: Vec<Vec<u8>>,
    /// The gateway error that stopped a send or recv, if any.
    pub gateway_error: Option<GatewayError>,
}

#[derive(Debug, Clone, Default)]
pub struct SessionOptions {
    pub seed: u64,
    pub run: RunConfig,
    /// Plaintexts the client queues for `ocall_recv`.
    pub queued: Vec<Vec<u8>>,
    /// Flip one ciphertext bit of the code upload.
    pub tamper_code: bool,
}

/// Runs attestation, upload, admission and execution for `bundle`.
pub fn run_session(
    bundle: &CodeProofBundle,
    data: &[u8],
    layout: &EnclaveLayout,
    opts: &SessionOptions,
) -> Result<SessionRecord, ServiceError> {
    let mut enclave = Enclave::new(layout.clone(), bundle.manifest, opts.seed);
    let mut rng = ChaCha20Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let client = Client::new(enclave.measurement, test_verifying_key(), &mut rng);
    let (quote, mut session) = enclave.attest(&client.hello)?;
    let mut frames = vec![Frame::new(FrameType::Quote, quote.to_bytes())];
    let mut channel = client.finish(&quote)?;

    let mut code = channel.seal_upload(&encode_bundle(bundle));
    if opts.tamper_code {
        let last = code.len() - 1;
        code[last / 2] ^= 0x01;
    }
    let data_ct = channel.seal_upload(data);
    frames.push(Frame::new(FrameType::Code, code.clone()));
    frames.push(Frame::new(FrameType::Data, data_ct.clone()));
    for m in &opts.queued {
        let ct = channel.seal_message(m, bundle.manifest.pad_length)?;
        frames.push(Frame::new(FrameType::Recv, ct.clone()));
        session.inbox.push_back(ct);
    }

    let outcome = serve(&mut session, layout, &code, &data_ct, &opts.run)?;
    let mut decrypted = Vec::new();
    for ct in &session.outbox {
        frames.push(Frame::new(FrameType::Send, ct.clone()));
        decrypted.push(channel.open_output(ct)?);
    }
    Ok(SessionRecord { outcome, frames, decrypted, gateway_error: session.last_error.clone() })
}
