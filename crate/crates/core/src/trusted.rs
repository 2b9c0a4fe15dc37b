//! The trusted ROM routines: boot entry, token authentication, the atomic
//! install with status-flag crash recovery, and the exit back to application
//! code.
//!
//! The routines are modeled as native operations that drive the machine
//! through the same bus cycles real trusted code would issue — instruction
//! fetches inside the trusted region, strobed reads of the key region, and
//! one write cycle per protected byte — so the monitor screens every effect
//! exactly as it would on hardware. Control arrives only through the region's
//! first address (the monitor resets on any other entry) and leaves through
//! [`casu_exit`], which clears the register file before jumping to the
//! application.

use crate::crypto::{self, MacTag, SecretKey};
use crate::image::{self, SoftwareImage};
use crate::layout::Address;
use crate::mem::{Machine, StepOutcome};

/// Where control goes after [`casu_entry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlTransfer {
    /// Nothing pending: registers cleared, application running.
    ToEr,
    /// Invoked by the application to validate a staged update.
    IntoAuthenticate,
    /// Boot found an interrupted install to resume.
    IntoInstall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthOutcome {
    /// Token matched; control proceeds to install without leaving ROM.
    Accept,
    /// Staged version does not exceed the installed one.
    RejectVersion,
    /// Token mismatch or unparseable staging area.
    RejectTag,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InstallRun {
    /// All sub-steps landed; the acknowledgment tag is also stored in the
    /// token buffer and the application is running.
    Completed(MacTag),
    /// A reset fired mid-install; the status flag stays set and boot will
    /// re-run the whole sequence.
    Interrupted,
    /// The staging area did not hold an image (unreachable through the
    /// protocol; the flag is cleared and control returns to the application).
    Aborted,
}

/// Number of write cycles one uninterrupted install issues: the status flag
/// on, four pointer bytes, thirty vector-table bytes (the reset slot is never
/// rewritten), the 32-byte acknowledgment, and the status flag off.
pub const INSTALL_WRITE_COUNT: usize = 1 + 4 + 30 + 32 + 1;

/// The only legal entry point. `at_boot` distinguishes the reset path from an
/// application-invoked update.
pub fn casu_entry(machine: &mut Machine, at_boot: bool) -> ControlTransfer {
    let tcr = machine.layout().tcr();
    debug_assert!(
        tcr.contains(machine.pc()),
        "entry reached with pc outside the trusted region"
    );
    // Walk one fetch into the routine body.
    if tcr.min + 2 <= tcr.max {
        machine.step_exec(tcr.min + 2);
    }

    if at_boot {
        if machine.sf() == 1 {
            ControlTransfer::IntoInstall
        } else {
            casu_exit(machine);
            ControlTransfer::ToEr
        }
    } else {
        ControlTransfer::IntoAuthenticate
    }
}

/// Validate the staged image against the token in the buffer: version first,
/// then the MAC over the bytes the staging pointer designates. Rejections
/// write nothing and produce no response; control returns to the application
/// via the exit path taken here.
pub fn casu_authenticate(machine: &mut Machine) -> AuthOutcome {
    let staged_region = machine.bep_region();
    let staged: Vec<u8> = machine.read_region(staged_region).to_vec();

    let image = match SoftwareImage::parse(&staged) {
        Ok(img) => img,
        Err(_) => return reject_tag(machine),
    };

    // Installed version lives in the header at the start of the executable
    // region, where the monitor keeps it immutable.
    let er = machine.er_bytes();
    if er.len() < 4 {
        return reject_tag(machine);
    }
    let installed_version = u16::from_le_bytes([er[2], er[3]]);
    if image.version <= installed_version {
        machine.stats_mut().auth_rejects += 1;
        casu_exit(machine);
        return AuthOutcome::RejectVersion;
    }

    let Some(key) = read_key(machine) else {
        return reject_tag(machine);
    };
    let sigma = crypto::tag_request(&key, &staged);
    load_scratch(machine, sigma.as_bytes());

    if sigma.ct_eq(&machine.atr_bytes()) {
        machine.stats_mut().auth_accepts += 1;
        AuthOutcome::Accept
    } else {
        reject_tag(machine)
    }
}

fn reject_tag(machine: &mut Machine) -> AuthOutcome {
    machine.stats_mut().auth_rejects += 1;
    casu_exit(machine);
    AuthOutcome::RejectTag
}

/// Apply the staged update: flag on, pointer swap, vector table, stored
/// acknowledgment, flag off, jump to the new software. Any reset in between
/// leaves the flag set so boot repeats the whole sequence; every sub-step is
/// idempotent.
pub fn casu_install(machine: &mut Machine) -> InstallRun {
    machine.stats_mut().installs_started += 1;
    if let Some(after) = machine.take_install_fault() {
        machine.arm_write_fault(after);
    }

    let layout = machine.layout().clone();
    let staged_region = machine.bep_region();
    let staged: Vec<u8> = machine.read_region(staged_region).to_vec();
    let image = match SoftwareImage::parse(&staged) {
        Ok(img) => img,
        Err(_) => {
            // Not reachable through the protocol: the flag only goes up after
            // authentication and the staging area persists across resets.
            let _ = machine.step_core_write(layout.sf(), 0);
            casu_exit(machine);
            return InstallRun::Aborted;
        }
    };

    let Some(key) = read_key(machine) else {
        return InstallRun::Interrupted;
    };
    let ack = crypto::tag_ack(&key, image.version, &image.nonce);
    load_scratch(machine, ack.as_bytes());

    macro_rules! put {
        ($addr:expr, $byte:expr) => {
            if machine.step_core_write($addr, $byte) == StepOutcome::Reset {
                return InstallRun::Interrupted;
            }
        };
    }

    put!(layout.sf(), 1);

    let bep = layout.bep().min;
    let pointer_bytes: [u8; 4] = std::array::from_fn(|i| machine.read_byte(bep + i as Address));
    for (i, b) in pointer_bytes.into_iter().enumerate() {
        put!(layout.ep().min + i as Address, b);
    }

    for (i, b) in image.ivt[..image::RESET_VECTOR_SLOT * 2].iter().enumerate() {
        put!(layout.ivtr().min + i as Address, *b);
    }

    for (i, b) in ack.as_bytes().iter().enumerate() {
        put!(layout.atr().min + i as Address, *b);
    }

    put!(layout.sf(), 0);

    machine.stats_mut().installs_completed += 1;
    casu_exit(machine);
    InstallRun::Completed(ack)
}

/// Clear the register file and jump to the application's first address.
pub fn casu_exit(machine: &mut Machine) {
    machine.set_regs([0; 16]);
    let er = machine.er_region();
    machine.step_exec(er.min);
}

/// Liveness response: a MAC under a challenge-derived one-time key over the
/// bytes currently in the executable region.
pub fn attest(machine: &mut Machine, chal: &[u8]) -> Option<MacTag> {
    let key = read_key(machine)?;
    let derived = crypto::kdf(&key, chal);
    let tag = crypto::hmac(&derived, machine.er_bytes());
    load_scratch(machine, tag.as_bytes());
    Some(tag)
}

/// Full boot pump: re-enter execution, resume an interrupted install if the
/// status flag says so, and hand control to the application. Returns the
/// acknowledgment when a resumed install completed during this boot.
pub fn boot(machine: &mut Machine) -> Option<MacTag> {
    loop {
        machine.boot_fetch();
        match casu_entry(machine, true) {
            ControlTransfer::ToEr => return None,
            ControlTransfer::IntoInstall => match casu_install(machine) {
                InstallRun::Completed(ack) => return Some(ack),
                InstallRun::Interrupted => continue,
                InstallRun::Aborted => return None,
            },
            ControlTransfer::IntoAuthenticate => unreachable!("boot entry"),
        }
    }
}

/// Strobed read of the key region. The monitor resets the machine if this is
/// attempted from outside the trusted region, in which case no key material
/// is returned.
fn read_key(machine: &mut Machine) -> Option<SecretKey> {
    let kr = machine.layout().kr();
    if machine.step_core_read(kr.min) == StepOutcome::Reset {
        return None;
    }
    if machine.step_core_read(kr.max) == StepOutcome::Reset {
        return None;
    }
    let mut key = [0u8; 32];
    for (i, b) in key.iter_mut().enumerate() {
        *b = machine.read_byte(kr.min + i as Address);
    }
    // Model the key schedule living in registers while ROM code runs; the
    // exit path must wipe it.
    let mut regs = *machine.regs();
    regs[12] = u16::from_le_bytes([key[0], key[1]]);
    regs[13] = u16::from_le_bytes([key[2], key[3]]);
    machine.set_regs(regs);
    Some(SecretKey::new(key))
}

/// Working values a real implementation would hold in registers.
fn load_scratch(machine: &mut Machine, bytes: &[u8; 32]) {
    let mut regs = *machine.regs();
    for i in 0..8 {
        regs[i + 4] = u16::from_le_bytes([bytes[2 * i], bytes[2 * i + 1]]);
    }
    machine.set_regs(regs);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::make_app_bin;
    use crate::layout::MemoryLayout;
    use crate::mem::Machine;

    fn key() -> [u8; 32] {
        let mut k = [0u8; 32];
        for (i, b) in k.iter_mut().enumerate() {
            *b = (i * 3 + 1) as u8;
        }
        k
    }

    fn machine_with_app(version: u16) -> Machine {
        let app = SoftwareImage::new(version, [0x33; 16], make_app_bin(64, 2), [0x44; 32]);
        let mut m =
            Machine::new(MemoryLayout::default_layout(), &[0xa5; 128], &app, key()).unwrap();
        assert!(boot(&mut m).is_none());
        m
    }

    /// Stage `img` and its token the way the download routine would, then
    /// jump to the trusted entry.
    fn stage_and_enter(m: &mut Machine, img: &SoftwareImage, atok: &[u8; 32]) {
        let bytes = img.serialize().unwrap();
        let (_, slot_b) = m.layout().slots();
        let er = m.er_region();
        m.step_exec(er.min + 20); // application context
        for (i, b) in bytes.iter().enumerate() {
            assert_eq!(
                m.step_core_write(slot_b.min + i as u16, *b),
                StepOutcome::Applied
            );
        }
        let bep = m.layout().bep().min;
        let lo = slot_b.min.to_le_bytes();
        let hi = (slot_b.min + (bytes.len() - 1) as u16).to_le_bytes();
        for (i, b) in [lo[0], lo[1], hi[0], hi[1]].into_iter().enumerate() {
            assert_eq!(m.step_core_write(bep + i as u16, b), StepOutcome::Applied);
        }
        let atr = m.layout().atr().min;
        for (i, b) in atok.iter().enumerate() {
            assert_eq!(m.step_core_write(atr + i as u16, *b), StepOutcome::Applied);
        }
        assert_eq!(m.step_exec(m.layout().tcr().min), StepOutcome::Applied);
    }

    fn next_image(m: &Machine, bump: u16) -> SoftwareImage {
        let installed = m.er_header().unwrap().version;
        SoftwareImage::new(
            installed + bump,
            [0x77; 16],
            make_app_bin(96, 9),
            [0x55; 32],
        )
    }

    #[test]
    fn boot_with_clear_flag_runs_app() {
        let m = machine_with_app(1);
        assert_eq!(m.pc(), m.er_region().min);
        assert_eq!(m.regs(), &[0u16; 16]);
    }

    #[test]
    fn entry_dispatches_on_flag_and_caller() {
        let mut m = machine_with_app(1);
        m.step_exec(m.layout().tcr().min);
        assert_eq!(casu_entry(&mut m, false), ControlTransfer::IntoAuthenticate);

        // Raise the flag through the trusted path and reboot.
        m.step_exec(m.layout().tcr().min);
        assert_eq!(m.step_core_write(m.layout().sf(), 1), StepOutcome::Applied);
        m.hard_reset();
        m.boot_fetch();
        assert_eq!(casu_entry(&mut m, true), ControlTransfer::IntoInstall);
    }

    #[test]
    fn authenticate_accepts_valid_token() {
        let mut m = machine_with_app(1);
        let img = next_image(&m, 1);
        let atok = crypto::tag_request(&SecretKey::new(key()), &img.serialize().unwrap());
        stage_and_enter(&mut m, &img, atok.as_bytes());
        assert_eq!(casu_entry(&mut m, false), ControlTransfer::IntoAuthenticate);
        assert_eq!(casu_authenticate(&mut m), AuthOutcome::Accept);
        // Accept stays inside the trusted region.
        assert!(m.layout().tcr().contains(m.pc()));
    }

    #[test]
    fn authenticate_rejects_stale_version_silently() {
        let mut m = machine_with_app(5);
        let mut img = next_image(&m, 1);
        img.version = 5; // equal to installed
        let atok = crypto::tag_request(&SecretKey::new(key()), &img.serialize().unwrap());
        stage_and_enter(&mut m, &img, atok.as_bytes());
        let atr_before = m.atr_bytes();
        casu_entry(&mut m, false);
        assert_eq!(casu_authenticate(&mut m), AuthOutcome::RejectVersion);
        assert_eq!(
            m.atr_bytes(),
            atr_before,
            "reject path must not touch the token buffer"
        );
        assert_eq!(m.pc(), m.er_region().min, "reject returns to the application");
    }

    #[test]
    fn authenticate_rejects_flipped_bit() {
        let mut m = machine_with_app(1);
        let img = next_image(&m, 1);
        let mut bytes = img.serialize().unwrap();
        let atok = crypto::tag_request(&SecretKey::new(key()), &bytes);
        bytes[40] ^= 0x01; // one bit of the binary
        let tampered = SoftwareImage::parse(&bytes).unwrap();
        stage_and_enter(&mut m, &tampered, atok.as_bytes());
        casu_entry(&mut m, false);
        assert_eq!(casu_authenticate(&mut m), AuthOutcome::RejectTag);
    }

    #[test]
    fn authenticate_rejects_garbage_staging_area() {
        let mut m = machine_with_app(1);
        let er = m.er_region();
        m.step_exec(er.min + 20);
        // Application scribbles junk bounds into the staging pointer.
        let bep = m.layout().bep().min;
        for (i, b) in [0xff, 0x7f, 0x10, 0x80].into_iter().enumerate() {
            assert_eq!(m.step_core_write(bep + i as u16, b), StepOutcome::Applied);
        }
        m.step_exec(m.layout().tcr().min);
        casu_entry(&mut m, false);
        assert_eq!(casu_authenticate(&mut m), AuthOutcome::RejectTag);
    }

    #[test]
    fn install_updates_pointer_vectors_ack_and_flag() {
        let mut m = machine_with_app(1);
        let img = next_image(&m, 1);
        let atok = crypto::tag_request(&SecretKey::new(key()), &img.serialize().unwrap());
        stage_and_enter(&mut m, &img, atok.as_bytes());
        casu_entry(&mut m, false);
        assert_eq!(casu_authenticate(&mut m), AuthOutcome::Accept);
        let staged = m.bep_region();

        let InstallRun::Completed(ack) = casu_install(&mut m) else {
            panic!("install should complete");
        };
        assert_eq!(m.er_region(), staged, "pointer register adopts the staged bounds");
        assert_eq!(m.sf(), 0);
        assert_eq!(
            ack,
            crypto::tag_ack(&SecretKey::new(key()), img.version, &img.nonce)
        );
        assert_eq!(m.atr_bytes(), *ack.as_bytes());
        // Vector table carries the new vectors, reset slot still boots ROM.
        let ivtr = m.layout().ivtr().min;
        assert_eq!(m.read_byte(ivtr), img.ivt[0]);
        assert_eq!(m.read_word(m.layout().ivtr().max - 1), m.layout().pc_init());
        assert_eq!(m.pc(), m.er_region().min);
        assert_eq!(m.regs(), &[0u16; 16]);
    }

    #[test]
    fn interrupted_install_resumes_to_identical_state() {
        // Reference: uninterrupted run.
        let mut clean = machine_with_app(1);
        let img = next_image(&clean, 1);
        let atok = crypto::tag_request(&SecretKey::new(key()), &img.serialize().unwrap());
        stage_and_enter(&mut clean, &img, atok.as_bytes());
        casu_entry(&mut clean, false);
        assert_eq!(casu_authenticate(&mut clean), AuthOutcome::Accept);
        assert!(matches!(casu_install(&mut clean), InstallRun::Completed(_)));
        let want = clean.mem_snapshot();

        for fault_at in [0usize, 1, 3, 17, 40, 66, 67] {
            let mut m = machine_with_app(1);
            stage_and_enter(&mut m, &img, atok.as_bytes());
            casu_entry(&mut m, false);
            assert_eq!(casu_authenticate(&mut m), AuthOutcome::Accept);
            m.schedule_install_fault(fault_at as u64);
            let first = casu_install(&mut m);
            assert_eq!(first, InstallRun::Interrupted, "fault index {fault_at}");

            if m.sf() == 1 {
                assert!(boot(&mut m).is_some(), "resume completes the install");
            } else {
                // Fault before the flag went up: nothing to resume, the old
                // software still runs; re-running the update from the start
                // converges to the same state.
                assert!(boot(&mut m).is_none());
                stage_and_enter(&mut m, &img, atok.as_bytes());
                casu_entry(&mut m, false);
                assert_eq!(casu_authenticate(&mut m), AuthOutcome::Accept);
                assert!(matches!(casu_install(&mut m), InstallRun::Completed(_)));
            }
            assert_eq!(m.mem_snapshot(), want, "fault index {fault_at}");
        }
    }

    #[test]
    fn exit_scrubs_registers() {
        let mut m = machine_with_app(1);
        m.step_exec(m.layout().tcr().min);
        // Pull the key into registers, then leave.
        let chal = [7u8; 16];
        let tag = attest(&mut m, &chal).unwrap();
        assert!(m.regs().iter().any(|&r| r != 0), "scratch state present in ROM");
        casu_exit(&mut m);
        assert_eq!(m.regs(), &[0u16; 16]);
        // Device-side liveness equals the verifier-side computation.
        let expected = crypto::hmac(&crypto::kdf(&SecretKey::new(key()), &chal), m.er_bytes());
        assert_eq!(tag, expected);
    }
}
