//! The remote verifier: builds authorized update requests, checks
//! acknowledgments, tracks the confirmed version, and drives the
//! timeout/retransmission policy.
//!
//! One verifier serves one device and keeps at most one request outstanding.
//! Timeouts are counted in simulator ticks. The first timeout of a request
//! re-sends the identical bytes (covering a lost acknowledgment, which the
//! device answers from its stored copy); the next escalates to a fresh
//! request with a bumped version number (covering an acknowledgment lost to a
//! reset, where re-authentication under the old version would be rejected).

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::crypto::{self, MacTag, SecretKey};
use crate::image::SoftwareImage;

pub const DEFAULT_TIMEOUT_TICKS: u64 = 1000;
pub const DEFAULT_MAX_RETRIES: u32 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VerifierError {
    #[error("an update request is already outstanding")]
    PendingOutstanding,
    #[error("no update request is outstanding")]
    NoPending,
    #[error("timeout handler invoked before the timeout elapsed")]
    TimeoutNotElapsed,
}

/// A request ready for transmission: the image and its authorization token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateRequest {
    pub image: SoftwareImage,
    pub atok: MacTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerifyOutcome {
    /// The acknowledgment matches the outstanding (version, nonce) pair.
    Confirmed,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NextAction {
    /// Re-send the outstanding request, byte-identical.
    ResendSame,
    /// Give up on the outstanding version and push the same payload under a
    /// new version number and nonce.
    EscalateNewVersion(UpdateRequest),
    GiveUp,
}

#[derive(Debug, Clone)]
struct Pending {
    image: SoftwareImage,
    atok: MacTag,
    resent_once: bool,
}

/// Verifier-side protocol state.
#[derive(Debug, Clone)]
pub struct SessionState {
    key: SecretKey,
    confirmed_version: u16,
    pending: Option<Pending>,
    rng: ChaCha20Rng,
    timeout_ticks: u64,
    max_retries: u32,
    timeouts: u32,
    last_send_tick: u64,
}

impl SessionState {
    pub fn new(key: SecretKey, confirmed_version: u16, rng_seed: u64) -> SessionState {
        SessionState {
            key,
            confirmed_version,
            pending: None,
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            timeout_ticks: DEFAULT_TIMEOUT_TICKS,
            max_retries: DEFAULT_MAX_RETRIES,
            timeouts: 0,
            last_send_tick: 0,
        }
    }

    pub fn set_timeout_ticks(&mut self, ticks: u64) {
        self.timeout_ticks = ticks;
    }

    pub fn set_max_retries(&mut self, retries: u32) {
        self.max_retries = retries;
    }

    pub fn timeout_ticks(&self) -> u64 {
        self.timeout_ticks
    }

    pub fn confirmed_version(&self) -> u16 {
        self.confirmed_version
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }

    pub fn pending_image(&self) -> Option<&SoftwareImage> {
        self.pending.as_ref().map(|p| &p.image)
    }

    pub fn pending_request(&self) -> Option<UpdateRequest> {
        self.pending.as_ref().map(|p| UpdateRequest {
            image: p.image.clone(),
            atok: p.atok,
        })
    }

    fn fresh_nonce(&mut self) -> [u8; 16] {
        let mut nonce = [0u8; 16];
        self.rng.fill_bytes(&mut nonce);
        nonce
    }

    fn make_request(&mut self, version: u16, bin: Vec<u8>, ivt: [u8; 32]) -> UpdateRequest {
        let image = SoftwareImage::new(version, self.fresh_nonce(), bin, ivt);
        let atok = crypto::tag_request(
            &self.key,
            &image.serialize().expect("image within length bounds"),
        );
        self.pending = Some(Pending {
            image: image.clone(),
            atok,
            resent_once: false,
        });
        UpdateRequest { image, atok }
    }

    /// Assemble a request for the next version with a fresh nonce. A rollback
    /// is expressed the same way: the old binary under a new version number.
    pub fn build_update(
        &mut self,
        bin: Vec<u8>,
        ivt: [u8; 32],
    ) -> Result<UpdateRequest, VerifierError> {
        if self.pending.is_some() {
            return Err(VerifierError::PendingOutstanding);
        }
        let version = self.confirmed_version + 1;
        self.timeouts = 0;
        Ok(self.make_request(version, bin, ivt))
    }

    /// Record when the outstanding request (or its re-send) went out, for the
    /// timeout precondition.
    pub fn note_sent(&mut self, tick: u64) {
        self.last_send_tick = tick;
    }

    /// Check an incoming acknowledgment against the outstanding request.
    pub fn verify_ack(&mut self, ack: &[u8; 32]) -> Result<VerifyOutcome, VerifierError> {
        let pending = self.pending.as_ref().ok_or(VerifierError::NoPending)?;
        let gamma = crypto::tag_ack(&self.key, pending.image.version, &pending.image.nonce);
        if gamma.ct_eq(ack) {
            self.confirmed_version = pending.image.version;
            self.pending = None;
            self.timeouts = 0;
            Ok(VerifyOutcome::Confirmed)
        } else {
            Ok(VerifyOutcome::Invalid)
        }
    }

    /// Decide what to do after the response window closed.
    pub fn on_timeout(&mut self, now_tick: u64) -> Result<NextAction, VerifierError> {
        let pending = self.pending.as_mut().ok_or(VerifierError::NoPending)?;
        if now_tick < self.last_send_tick + self.timeout_ticks {
            return Err(VerifierError::TimeoutNotElapsed);
        }
        self.timeouts += 1;
        if self.timeouts >= self.max_retries {
            self.pending = None;
            return Ok(NextAction::GiveUp);
        }
        if !pending.resent_once {
            pending.resent_once = true;
            return Ok(NextAction::ResendSame);
        }
        let version = pending.image.version + 1;
        let bin = pending.image.bin.clone();
        let ivt = pending.image.ivt;
        let request = self.make_request(version, bin, ivt);
        Ok(NextAction::EscalateNewVersion(request))
    }

    /// Fresh liveness challenge and the response expected from a device whose
    /// executable region holds `ar_bytes`.
    pub fn liveness_challenge(&mut self, ar_bytes: &[u8]) -> ([u8; 16], MacTag) {
        let mut chal = [0u8; 16];
        self.rng.fill_bytes(&mut chal);
        let expected = crypto::hmac(&crypto::kdf(&self.key, &chal), ar_bytes);
        (chal, expected)
    }
}
