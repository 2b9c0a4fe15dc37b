//! Bit-exact serialization of the software-update image.
//!
//! An image is the record `L || V || N || BIN || IVT` with little-endian
//! integer fields: total length (2 bytes), version (2 bytes), a 16-byte
//! nonce, the variable-length binary, and a 32-byte interrupt vector table
//! (16 little-endian vectors). This byte layout is simultaneously the wire
//! payload of an update request and the at-rest format the device keeps in
//! program memory, so the authorization MAC is computed over identical bytes
//! on both sides.

use thiserror::Error;

/// Header length: L (2) + V (2) + N (16).
pub const HEADER_LEN: usize = 20;
/// IVT length: 16 vectors of 2 bytes.
pub const IVT_LEN: usize = 32;
/// Minimum serialized size (empty binary).
pub const MIN_IMAGE_LEN: usize = HEADER_LEN + IVT_LEN;

/// Index of the reset vector inside the 16-slot IVT (the last slot).
pub const RESET_VECTOR_SLOT: usize = 15;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MalformedImage {
    #[error("image truncated: {0} bytes, need at least {MIN_IMAGE_LEN}")]
    Truncated(usize),
    #[error("length field {field} does not match actual length {actual}")]
    LengthMismatch { field: u16, actual: usize },
    #[error("image larger than the 16-bit length field can express: {0} bytes")]
    TooLarge(usize),
}

/// A parsed (or to-be-serialized) software image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SoftwareImage {
    pub version: u16,
    pub nonce: [u8; 16],
    pub bin: Vec<u8>,
    pub ivt: [u8; IVT_LEN],
}

impl SoftwareImage {
    pub fn new(version: u16, nonce: [u8; 16], bin: Vec<u8>, ivt: [u8; IVT_LEN]) -> Self {
        SoftwareImage {
            version,
            nonce,
            bin,
            ivt,
        }
    }

    /// Total serialized length (the value of the `L` field).
    pub fn len(&self) -> usize {
        MIN_IMAGE_LEN + self.bin.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the header and IVT are always present
    }

    /// Entry offsets of the `download` and `acknowledge` subroutines,
    /// recorded by convention in the binary's first two little-endian words.
    pub fn entry_offsets(&self) -> Option<(u16, u16)> {
        if self.bin.len() < 4 {
            return None;
        }
        let download = u16::from_le_bytes([self.bin[0], self.bin[1]]);
        let acknowledge = u16::from_le_bytes([self.bin[2], self.bin[3]]);
        Some((download, acknowledge))
    }

    pub fn serialize(&self) -> Result<Vec<u8>, MalformedImage> {
        let total = self.len();
        let len_field =
            u16::try_from(total).map_err(|_| MalformedImage::TooLarge(total))?;
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(&len_field.to_le_bytes());
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.bin);
        out.extend_from_slice(&self.ivt);
        Ok(out)
    }

    pub fn parse(bytes: &[u8]) -> Result<SoftwareImage, MalformedImage> {
        let header = Header::parse(bytes)?;
        if bytes.len() != header.len as usize {
            return Err(MalformedImage::LengthMismatch {
                field: header.len,
                actual: bytes.len(),
            });
        }
        let bin_len = bytes.len() - MIN_IMAGE_LEN;
        let bin = bytes[HEADER_LEN..HEADER_LEN + bin_len].to_vec();
        let mut ivt = [0u8; IVT_LEN];
        ivt.copy_from_slice(&bytes[HEADER_LEN + bin_len..]);
        Ok(SoftwareImage {
            version: header.version,
            nonce: header.nonce,
            bin,
            ivt,
        })
    }
}

/// The fixed-size leading fields of an image, parseable without the body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub len: u16,
    pub version: u16,
    pub nonce: [u8; 16],
}

impl Header {
    pub fn parse(bytes: &[u8]) -> Result<Header, MalformedImage> {
        if bytes.len() < MIN_IMAGE_LEN {
            return Err(MalformedImage::Truncated(bytes.len()));
        }
        let len = u16::from_le_bytes([bytes[0], bytes[1]]);
        if (len as usize) < MIN_IMAGE_LEN {
            return Err(MalformedImage::LengthMismatch {
                field: len,
                actual: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[2], bytes[3]]);
        let mut nonce = [0u8; 16];
        nonce.copy_from_slice(&bytes[4..20]);
        Ok(Header {
            len,
            version,
            nonce,
        })
    }
}

/// Build an application binary of `total_len` bytes whose first two words
/// record the download/acknowledge entry offsets, followed by a deterministic
/// filler pattern. `total_len` must be at least 4.
pub fn make_app_bin(total_len: usize, seed: u8) -> Vec<u8> {
    assert!(total_len >= 4, "binary needs room for its two entry words");
    let mut bin = vec![0u8; total_len];
    // Both subroutines at conventional offsets right after the entry words.
    bin[..2].copy_from_slice(&4u16.to_le_bytes());
    let ack_off = if total_len > 8 { 8u16 } else { 4u16 };
    bin[2..4].copy_from_slice(&ack_off.to_le_bytes());
    for (i, b) in bin.iter_mut().enumerate().skip(4) {
        *b = (i as u8).wrapping_mul(31).wrapping_add(seed);
    }
    bin
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(bin_len: usize) -> SoftwareImage {
        let mut ivt = [0u8; IVT_LEN];
        for (i, b) in ivt.iter_mut().enumerate() {
            *b = 0x80 + i as u8;
        }
        SoftwareImage::new(7, [0xA5; 16], make_app_bin(bin_len.max(4), 1), ivt)
    }

    #[test]
    fn bin_250_serializes_to_302() {
        let img = sample(250);
        assert_eq!(img.serialize().unwrap().len(), 302);
    }

    #[test]
    fn length_field_mismatch_rejected() {
        let mut bytes = sample(16).serialize().unwrap();
        bytes[0] = bytes[0].wrapping_add(1);
        assert!(matches!(
            SoftwareImage::parse(&bytes),
            Err(MalformedImage::LengthMismatch { .. })
        ));
    }

    #[test]
    fn truncated_rejected() {
        let bytes = sample(16).serialize().unwrap();
        assert!(matches!(
            SoftwareImage::parse(&bytes[..MIN_IMAGE_LEN - 1]),
            Err(MalformedImage::Truncated(_))
        ));
        // Cut mid-binary: length field no longer matches.
        assert!(SoftwareImage::parse(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn entry_offsets_read_from_first_words() {
        let img = sample(32);
        assert_eq!(img.entry_offsets(), Some((4, 8)));
        let tiny = SoftwareImage::new(1, [0; 16], vec![1, 2, 3], [0; IVT_LEN]);
        assert_eq!(tiny.entry_offsets(), None);
    }

    proptest! {
        #[test]
        fn roundtrip_identity(
            version in any::<u16>(),
            nonce in any::<[u8; 16]>(),
            bin in proptest::collection::vec(any::<u8>(), 0..2048),
            ivt in any::<[u8; 32]>(),
        ) {
            let img = SoftwareImage::new(version, nonce, bin, ivt);
            let bytes = img.serialize().unwrap();
            prop_assert_eq!(bytes.len(), img.len());
            let back = SoftwareImage::parse(&bytes).unwrap();
            prop_assert_eq!(&back, &img);
            prop_assert_eq!(back.serialize().unwrap(), bytes);
        }

        #[test]
        fn mac_input_stable_under_reparse(
            bin in proptest::collection::vec(any::<u8>(), 0..512),
        ) {
            use crate::crypto::{tag_request, SecretKey};
            let key = SecretKey::new([0x42; 32]);
            let img = SoftwareImage::new(3, [9; 16], bin, [1; 32]);
            let bytes = img.serialize().unwrap();
            let reparsed = SoftwareImage::parse(&bytes).unwrap().serialize().unwrap();
            prop_assert_eq!(tag_request(&key, &bytes).0, tag_request(&key, &reparsed).0);
        }
    }
}
