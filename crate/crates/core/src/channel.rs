//! Wire framing and the adversarial channel between verifier and device.
//!
//! Messages are reliable ordered datagrams: one type byte followed by the
//! payload. The channel applies scripted directives to each transmission —
//! deliver, drop, substitute a replay of any earlier frame, flip a byte, or
//! inject raw bytes — and records every honest frame for later replay. The
//! directives operate on observed bytes only; no key material exists on this
//! side of the boundary.

use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

use crate::image::{Header, SoftwareImage};

pub const MSG_UPDATE: u8 = 0x01;
pub const MSG_ACK: u8 = 0x02;
pub const MSG_LIVENESS_CHAL: u8 = 0x03;
pub const MSG_LIVENESS_RESP: u8 = 0x04;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("empty frame")]
    Empty,
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("payload of {got} bytes, expected {want}")]
    BadLength { want: usize, got: usize },
    #[error("update payload shorter than its embedded image")]
    TruncatedUpdate,
}

/// A protocol message in parsed form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireMessage {
    /// Serialized image followed by its 32-byte authorization token.
    Update { image_bytes: Vec<u8>, atok: [u8; 32] },
    Ack([u8; 32]),
    LivenessChal([u8; 16]),
    LivenessResp([u8; 32]),
}

impl WireMessage {
    pub fn update(image: &SoftwareImage, atok: &[u8; 32]) -> WireMessage {
        WireMessage::Update {
            image_bytes: image.serialize().expect("image within length bounds"),
            atok: *atok,
        }
    }

    pub fn msg_type(&self) -> u8 {
        match self {
            WireMessage::Update { .. } => MSG_UPDATE,
            WireMessage::Ack(_) => MSG_ACK,
            WireMessage::LivenessChal(_) => MSG_LIVENESS_CHAL,
            WireMessage::LivenessResp(_) => MSG_LIVENESS_RESP,
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            WireMessage::Update { .. } => "update",
            WireMessage::Ack(_) => "ack",
            WireMessage::LivenessChal(_) => "liveness_chal",
            WireMessage::LivenessResp(_) => "liveness_resp",
        }
    }

    /// Version field of an update frame, when present and parseable.
    pub fn version(&self) -> Option<u16> {
        match self {
            WireMessage::Update { image_bytes, .. } => {
                Header::parse(image_bytes).ok().map(|h| h.version)
            }
            _ => None,
        }
    }
}

pub fn frame(msg: &WireMessage) -> Vec<u8> {
    let mut out = vec![msg.msg_type()];
    match msg {
        WireMessage::Update { image_bytes, atok } => {
            out.extend_from_slice(image_bytes);
            out.extend_from_slice(atok);
        }
        WireMessage::Ack(tag) | WireMessage::LivenessResp(tag) => out.extend_from_slice(tag),
        WireMessage::LivenessChal(chal) => out.extend_from_slice(chal),
    }
    out
}

pub fn unframe(bytes: &[u8]) -> Result<WireMessage, FrameError> {
    let (&msg_type, payload) = bytes.split_first().ok_or(FrameError::Empty)?;
    match msg_type {
        MSG_UPDATE => {
            let header = Header::parse(payload).map_err(|_| FrameError::TruncatedUpdate)?;
            let image_len = header.len as usize;
            if payload.len() != image_len + 32 {
                return Err(FrameError::BadLength {
                    want: image_len + 32,
                    got: payload.len(),
                });
            }
            let mut atok = [0u8; 32];
            atok.copy_from_slice(&payload[image_len..]);
            Ok(WireMessage::Update {
                image_bytes: payload[..image_len].to_vec(),
                atok,
            })
        }
        MSG_ACK | MSG_LIVENESS_RESP => {
            let tag: [u8; 32] =
                payload
                    .try_into()
                    .map_err(|_| FrameError::BadLength { want: 32, got: payload.len() })?;
            Ok(if msg_type == MSG_ACK {
                WireMessage::Ack(tag)
            } else {
                WireMessage::LivenessResp(tag)
            })
        }
        MSG_LIVENESS_CHAL => {
            let chal: [u8; 16] =
                payload
                    .try_into()
                    .map_err(|_| FrameError::BadLength { want: 16, got: payload.len() })?;
            Ok(WireMessage::LivenessChal(chal))
        }
        other => Err(FrameError::UnknownType(other)),
    }
}

/// One scripted interference action, consumed per transmission. An exhausted
/// script delivers everything unchanged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directive {
    DeliverNext,
    DropNext,
    /// Substitute the recorded frame at `index` (0-based, transmission order).
    ReplayStored { index: usize },
    /// Deliver the frame with one byte XORed.
    TamperByte { offset: usize, xor: u8 },
    /// Substitute arbitrary attacker bytes.
    InjectRaw { bytes: Vec<u8> },
}

/// The scripted Dolev-Yao channel. Both directions share one script; each
/// call to [`Channel::transmit`] consumes the next directive.
#[derive(Debug, Clone, Default)]
pub struct Channel {
    script: VecDeque<Directive>,
    history: Vec<Vec<u8>>,
}

impl Channel {
    pub fn new(script: impl IntoIterator<Item = Directive>) -> Channel {
        Channel {
            script: script.into_iter().collect(),
            history: Vec::new(),
        }
    }

    pub fn push_directives(&mut self, script: impl IntoIterator<Item = Directive>) {
        self.script.extend(script);
    }

    /// Every frame ever handed to the channel, in transmission order.
    pub fn history(&self) -> &[Vec<u8>] {
        &self.history
    }

    /// Pass one frame through the adversary. Returns what the receiver
    /// observes, if anything.
    pub fn transmit(&mut self, frame: Vec<u8>) -> Option<Vec<u8>> {
        self.history.push(frame.clone());
        match self.script.pop_front().unwrap_or(Directive::DeliverNext) {
            Directive::DeliverNext => Some(frame),
            Directive::DropNext => None,
            Directive::ReplayStored { index } => self.history.get(index).cloned(),
            Directive::TamperByte { offset, xor } => {
                let mut tampered = frame;
                if tampered.is_empty() {
                    return Some(tampered);
                }
                let at = offset % tampered.len();
                tampered[at] ^= xor;
                Some(tampered)
            }
            Directive::InjectRaw { bytes } => Some(bytes),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::make_app_bin;
    use proptest::prelude::*;

    fn sample_update() -> WireMessage {
        let img = SoftwareImage::new(3, [9; 16], make_app_bin(40, 3), [1; 32]);
        WireMessage::update(&img, &[0xaa; 32])
    }

    #[test]
    fn unknown_type_rejected() {
        assert_eq!(unframe(&[0xff, 1, 2]), Err(FrameError::UnknownType(0xff)));
        assert_eq!(unframe(&[]), Err(FrameError::Empty));
    }

    #[test]
    fn truncated_update_rejected() {
        let bytes = frame(&sample_update());
        assert!(matches!(
            unframe(&bytes[..bytes.len() - 5]),
            Err(FrameError::BadLength { .. })
        ));
        assert!(matches!(
            unframe(&bytes[..10]),
            Err(FrameError::TruncatedUpdate)
        ));
    }

    #[test]
    fn identity_channel_delivers_unchanged() {
        let mut ch = Channel::new([Directive::DeliverNext]);
        let bytes = frame(&sample_update());
        assert_eq!(ch.transmit(bytes.clone()), Some(bytes.clone()));
        // Exhausted script keeps delivering.
        assert_eq!(ch.transmit(bytes.clone()), Some(bytes));
    }

    #[test]
    fn drop_and_replay() {
        let mut ch = Channel::new([
            Directive::DeliverNext,
            Directive::DropNext,
            Directive::ReplayStored { index: 0 },
        ]);
        let first = frame(&sample_update());
        let second = frame(&WireMessage::Ack([7; 32]));
        assert_eq!(ch.transmit(first.clone()), Some(first.clone()));
        assert_eq!(ch.transmit(second.clone()), None, "dropped");
        // The third transmission is substituted by a replay of the first.
        let third = frame(&WireMessage::Ack([8; 32]));
        assert_eq!(ch.transmit(third), Some(first));
        assert_eq!(ch.history().len(), 3);
    }

    #[test]
    fn tamper_flips_exactly_one_byte() {
        let mut ch = Channel::new([Directive::TamperByte { offset: 6, xor: 0x80 }]);
        let bytes = frame(&sample_update());
        let delivered = ch.transmit(bytes.clone()).unwrap();
        let diffs: Vec<usize> = (0..bytes.len()).filter(|&i| bytes[i] != delivered[i]).collect();
        assert_eq!(diffs, vec![6]);
    }

    #[test]
    fn inject_substitutes_frame() {
        let mut ch = Channel::new([Directive::InjectRaw { bytes: vec![0x02, 1, 2, 3] }]);
        let delivered = ch.transmit(frame(&WireMessage::Ack([7; 32]))).unwrap();
        assert_eq!(delivered, vec![0x02, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn frame_roundtrip(
            kind in 0u8..4,
            tag in any::<[u8; 32]>(),
            chal in any::<[u8; 16]>(),
            bin in proptest::collection::vec(any::<u8>(), 4..128),
        ) {
            let msg = match kind {
                0 => {
                    let img = SoftwareImage::new(2, chal, bin, [3; 32]);
                    WireMessage::update(&img, &tag)
                }
                1 => WireMessage::Ack(tag),
                2 => WireMessage::LivenessChal(chal),
                _ => WireMessage::LivenessResp(tag),
            };
            let bytes = frame(&msg);
            prop_assert_eq!(unframe(&bytes).unwrap(), msg);
        }
    }
}
