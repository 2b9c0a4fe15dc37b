//! Cross-module protocol invariants driven by randomized event sequences:
//! the installed version never goes backwards, key bytes never leave the key
//! region, and retransmissions are byte-identical.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use casu_core::app::{self, AdversaryAction, DownloadOutcome, ExecCtx};
use casu_core::channel::{frame, WireMessage};
use casu_core::crypto::{tag_request, MacTag, SecretKey};
use casu_core::image::{make_app_bin, SoftwareImage};
use casu_core::layout::MemoryLayout;
use casu_core::mem::Machine;
use casu_core::trusted::{self, AuthOutcome, ControlTransfer, InstallRun};
use casu_core::verifier::{NextAction, SessionState, UpdateRequest, VerifyOutcome};

fn random_key(rng: &mut ChaCha20Rng) -> [u8; 32] {
    let mut key = [0u8; 32];
    rng.fill_bytes(&mut key);
    key
}

fn booted(key: [u8; 32]) -> Machine {
    let app = SoftwareImage::new(1, [1; 16], make_app_bin(64, 1), [2; 32]);
    let mut machine =
        Machine::new(MemoryLayout::default_layout(), &[0x0f; 64], &app, key).unwrap();
    trusted::boot(&mut machine);
    machine
}

/// Full device-side handling of one update request; returns the ack, if any.
fn push_update(machine: &mut Machine, request: &UpdateRequest) -> Option<[u8; 32]> {
    match app::download(machine, request) {
        Ok(DownloadOutcome::InvokedTcb) => {
            assert_eq!(
                trusted::casu_entry(machine, false),
                ControlTransfer::IntoAuthenticate
            );
            if trusted::casu_authenticate(machine) == AuthOutcome::Accept {
                match trusted::casu_install(machine) {
                    InstallRun::Completed(_) => {}
                    InstallRun::Interrupted => {
                        trusted::boot(machine);
                    }
                    InstallRun::Aborted => {}
                }
            }
            app::acknowledge(machine)
        }
        Ok(DownloadOutcome::RepliedStoredAck) => app::acknowledge(machine),
        _ => None,
    }
}

#[test]
fn installed_version_never_decreases() {
    for seed in 0..40u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let key = random_key(&mut rng);
        let mut machine = booted(key);
        let mut vrf = SessionState::new(SecretKey::new(key), 1, seed);
        let mut old_updates: Vec<UpdateRequest> = Vec::new();
        let mut last_version = 1u16;

        for round in 0..24 {
            match rng.next_u32() % 5 {
                // Honest update, delivered and confirmed.
                0 | 1 => {
                    if vrf.has_pending() {
                        continue;
                    }
                    let request = vrf
                        .build_update(make_app_bin(32 + (round % 7) * 16, round as u8), [7; 32])
                        .unwrap();
                    old_updates.push(request.clone());
                    if let Some(ack) = push_update(&mut machine, &request) {
                        let _ = vrf.verify_ack(&ack);
                    }
                }
                // Replay of a previously issued update.
                2 => {
                    if let Some(request) =
                        old_updates.get(rng.next_u32() as usize % old_updates.len().max(1))
                    {
                        push_update(&mut machine, &request.clone());
                    }
                }
                // Tampered current update.
                3 => {
                    if let Some(request) = old_updates.last() {
                        let mut bytes = request.image.serialize().unwrap();
                        let at = rng.next_u32() as usize % bytes.len();
                        bytes[at] ^= 0x40;
                        if let Ok(image) = SoftwareImage::parse(&bytes) {
                            let forged = UpdateRequest {
                                image,
                                atok: request.atok,
                            };
                            push_update(&mut machine, &forged);
                        }
                    }
                }
                // Adversary memory action, then reboot if it reset.
                _ => {
                    let er = machine.er_region();
                    let action = AdversaryAction::CoreWrite {
                        addr: er.min + (rng.next_u32() % er.len() as u32) as u16,
                        value: rng.next_u32() as u8,
                        ctx: ExecCtx::Er,
                    };
                    app::inject(&mut machine, &action);
                    trusted::boot(&mut machine);
                }
            }
            let version = machine.er_header().unwrap().version;
            assert!(
                version >= last_version,
                "seed {seed} round {round}: version went {last_version} -> {version}"
            );
            last_version = version;
        }
    }
}

#[test]
fn key_bytes_never_leave_the_key_region() {
    let mut rng = ChaCha20Rng::seed_from_u64(0xfeed);
    let key = random_key(&mut rng);
    let mut machine = booted(key);
    let mut vrf = SessionState::new(SecretKey::new(key), 1, 5);
    let mut wire: Vec<Vec<u8>> = Vec::new();

    // A benign update, a rejected tamper, a liveness round, and an attack.
    let request = vrf.build_update(make_app_bin(96, 2), [3; 32]).unwrap();
    wire.push(frame(&WireMessage::update(
        &request.image,
        request.atok.as_bytes(),
    )));
    let ack = push_update(&mut machine, &request).expect("benign update acks");
    wire.push(frame(&WireMessage::Ack(ack)));
    assert_eq!(vrf.verify_ack(&ack), Ok(VerifyOutcome::Confirmed));

    let mut tampered = request.clone();
    tampered.image.version += 1;
    push_update(&mut machine, &tampered);

    let (chal, _) = vrf.liveness_challenge(&request.image.serialize().unwrap());
    wire.push(frame(&WireMessage::LivenessChal(chal)));
    if let Some(resp) = app::handle_liveness(&mut machine, &chal) {
        wire.push(frame(&WireMessage::LivenessResp(resp)));
    }

    let action = AdversaryAction::ReadAddr {
        addr: machine.layout().kr().min,
        ctx: ExecCtx::Er,
    };
    app::inject(&mut machine, &action);
    trusted::boot(&mut machine);

    // No 8-byte window of the key may appear in volatile memory while the
    // application is running, nor in any frame that crossed the wire.
    let windows: Vec<&[u8]> = key.windows(8).collect();
    let dmem = machine.layout().dmem();
    let volatile = machine.read_region(dmem);
    for w in &windows {
        assert!(
            !contains(volatile, w),
            "key fragment found in data memory"
        );
        for f in &wire {
            assert!(!contains(f, w), "key fragment found on the wire");
        }
    }
    // Registers were scrubbed on every exit from trusted code.
    assert_eq!(machine.regs(), &[0u16; 16]);
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

#[test]
fn resend_is_byte_identical() {
    let key = [9u8; 32];
    let mut vrf = SessionState::new(SecretKey::new(key), 1, 77);
    let request = vrf.build_update(make_app_bin(128, 4), [5; 32]).unwrap();
    let original = frame(&WireMessage::update(
        &request.image,
        request.atok.as_bytes(),
    ));

    vrf.note_sent(0);
    let action = vrf.on_timeout(vrf.timeout_ticks()).unwrap();
    assert_eq!(action, NextAction::ResendSame);
    let resent_request = vrf.pending_request().unwrap();
    let resent = frame(&WireMessage::update(
        &resent_request.image,
        resent_request.atok.as_bytes(),
    ));
    assert_eq!(original, resent);
}

#[test]
fn authentication_reject_is_response_silent() {
    let key = [0x51u8; 32];
    let mut machine = booted(key);

    // A forged token: correct structure, wrong MAC key.
    let image = SoftwareImage::new(2, [8; 16], make_app_bin(96, 6), [1; 32]);
    let wrong_key = SecretKey::new([0x52; 32]);
    let atok = tag_request(&wrong_key, &image.serialize().unwrap());
    let request = UpdateRequest {
        image,
        atok: MacTag(*atok.as_bytes()),
    };

    let atr_after_download_holds_token = request.atok;
    assert_eq!(
        app::download(&mut machine, &request).unwrap(),
        DownloadOutcome::InvokedTcb
    );
    trusted::casu_entry(&mut machine, false);
    assert_eq!(
        trusted::casu_authenticate(&mut machine),
        AuthOutcome::RejectTag
    );
    // The token buffer still holds the (bad) incoming token: nothing was
    // written back, and the application has nothing to send.
    assert_eq!(
        machine.atr_bytes(),
        *atr_after_download_holds_token.as_bytes()
    );
    assert_eq!(machine.er_header().unwrap().version, 1);
}
