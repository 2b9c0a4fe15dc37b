//! The untrusted application resident in the executable region: the
//! `download` and `acknowledge` subroutines every image must carry, plus the
//! memory-level actions an adversary performs when it has compromised that
//! code.
//!
//! Everything here executes from application context (program counter inside
//! the executable region) and goes through the monitored bus, so it can stage
//! images, write the staging pointer, and fill the token buffer — but any
//! touch of a protected region comes back as a reset. The trusted region is
//! deliberately not part of this code's interface except for the jump to its
//! entry point.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Header;
use crate::layout::{Address, Region};
use crate::mem::{Machine, StepOutcome};
use crate::verifier::UpdateRequest;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DeviceError {
    #[error("incoming image of {need} bytes exceeds the {have}-byte free slot")]
    NoSpace { need: usize, have: usize },
    #[error("device reset while handling the request")]
    ResetDuringDownload,
}

/// What the download subroutine did with a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DownloadOutcome {
    /// Image staged, pointer and token written, control at the trusted entry.
    InvokedTcb,
    /// Duplicate of the installed version answered from the stored
    /// acknowledgment without involving trusted code.
    RepliedStoredAck,
    /// Stale version; request discarded.
    Ignored,
}

/// Application-visible view of the device state.
#[derive(Debug, Clone)]
pub struct AppContext {
    pub er_header: Header,
    pub free_slot: Region,
    pub stored_ack_present: bool,
}

/// Derive the application context: the installed image's header, the staging
/// slot (the half of the application area not holding the running image, so
/// successive updates alternate), and whether the token buffer holds a
/// stored acknowledgment.
pub fn context(machine: &Machine) -> Option<AppContext> {
    let er_header = machine.er_header().ok()?;
    let (slot_a, slot_b) = machine.layout().slots();
    let er = machine.er_region();
    let free_slot = if er.overlaps(&slot_a) { slot_b } else { slot_a };
    Some(AppContext {
        er_header,
        free_slot,
        stored_ack_present: machine.atr_nonzero(),
    })
}

/// The `download` subroutine: version screening, then staging.
///
/// Fresh versions are written to the free slot, the staging pointer and the
/// token buffer are filled, and control jumps to the trusted entry point.
/// A duplicate of the running version is answered from the stored
/// acknowledgment when one exists; older versions are discarded.
pub fn download(
    machine: &mut Machine,
    request: &UpdateRequest,
) -> Result<DownloadOutcome, DeviceError> {
    let Some(ctx) = context(machine) else {
        return Ok(DownloadOutcome::Ignored);
    };

    if request.image.version == ctx.er_header.version && ctx.stored_ack_present {
        return Ok(DownloadOutcome::RepliedStoredAck);
    }
    if request.image.version < ctx.er_header.version {
        return Ok(DownloadOutcome::Ignored);
    }

    let bytes = request
        .image
        .serialize()
        .map_err(|_| DeviceError::NoSpace { need: usize::MAX, have: ctx.free_slot.len() })?;
    if bytes.len() > ctx.free_slot.len() {
        return Err(DeviceError::NoSpace {
            need: bytes.len(),
            have: ctx.free_slot.len(),
        });
    }

    run_from_app(machine)?;

    let slot = ctx.free_slot;
    for (i, b) in bytes.iter().enumerate() {
        put(machine, slot.min + i as Address, *b)?;
    }
    let staged_max = slot.min + (bytes.len() - 1) as Address;
    let bep = machine.layout().bep().min;
    let bounds = [
        slot.min.to_le_bytes()[0],
        slot.min.to_le_bytes()[1],
        staged_max.to_le_bytes()[0],
        staged_max.to_le_bytes()[1],
    ];
    for (i, b) in bounds.into_iter().enumerate() {
        put(machine, bep + i as Address, b)?;
    }
    let atr = machine.layout().atr().min;
    for (i, b) in request.atok.as_bytes().iter().enumerate() {
        put(machine, atr + i as Address, *b)?;
    }

    // Hand over to trusted code through its only legal entry.
    let entry = machine.layout().tcr().min;
    if machine.step_exec(entry) == StepOutcome::Reset {
        return Err(DeviceError::ResetDuringDownload);
    }
    Ok(DownloadOutcome::InvokedTcb)
}

/// The `acknowledge` subroutine: forward the stored acknowledgment, if the
/// token buffer survived since the install.
pub fn acknowledge(machine: &mut Machine) -> Option<[u8; 32]> {
    if !machine.atr_nonzero() {
        return None;
    }
    let _ = run_from_app(machine);
    Some(machine.atr_bytes())
}

/// Compute the liveness response by entering trusted code, and return to the
/// application. `None` when the machine reset instead (entry misused).
pub fn handle_liveness(machine: &mut Machine, chal: &[u8; 16]) -> Option<[u8; 32]> {
    run_from_app(machine).ok()?;
    let entry = machine.layout().tcr().min;
    if machine.step_exec(entry) == StepOutcome::Reset {
        return None;
    }
    let tag = crate::trusted::attest(machine, chal)?;
    crate::trusted::casu_exit(machine);
    Some(*tag.as_bytes())
}

fn run_from_app(machine: &mut Machine) -> Result<(), DeviceError> {
    let er = machine.er_region();
    if er.contains(machine.pc()) {
        return Ok(());
    }
    if machine.step_exec(er.min) == StepOutcome::Reset {
        return Err(DeviceError::ResetDuringDownload);
    }
    Ok(())
}

fn put(machine: &mut Machine, addr: Address, byte: u8) -> Result<(), DeviceError> {
    if machine.step_core_write(addr, byte) == StepOutcome::Reset {
        return Err(DeviceError::ResetDuringDownload);
    }
    Ok(())
}

/// Where an adversary action claims to execute from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExecCtx {
    /// Compromised application code (program counter inside the executable
    /// region).
    #[default]
    Er,
    /// Entered trusted code through its legal entry point first.
    Tcr,
    /// An arbitrary address (the placement fetch itself may reset).
    At(Address),
}

/// A memory-level action performed by the adversary in control of the
/// application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryAction {
    CoreWrite {
        addr: Address,
        value: u8,
        #[serde(default)]
        ctx: ExecCtx,
    },
    DmaWrite {
        addr: Address,
        value: u8,
        #[serde(default)]
        ctx: ExecCtx,
    },
    JumpTo {
        addr: Address,
        #[serde(default)]
        ctx: ExecCtx,
    },
    RaiseIrq {
        #[serde(default)]
        ctx: ExecCtx,
    },
    ReadAddr {
        addr: Address,
        #[serde(default)]
        ctx: ExecCtx,
    },
}

impl AdversaryAction {
    fn ctx(&self) -> ExecCtx {
        match self {
            AdversaryAction::CoreWrite { ctx, .. }
            | AdversaryAction::DmaWrite { ctx, .. }
            | AdversaryAction::JumpTo { ctx, .. }
            | AdversaryAction::RaiseIrq { ctx }
            | AdversaryAction::ReadAddr { ctx, .. } => *ctx,
        }
    }
}

/// Place the program counter per the action's declared context and feed the
/// action through the monitored bus. A reset is an outcome, not an error.
pub fn inject(machine: &mut Machine, action: &AdversaryAction) -> StepOutcome {
    let placement = match action.ctx() {
        ExecCtx::Er => {
            let er = machine.er_region();
            if er.contains(machine.pc()) {
                StepOutcome::Applied
            } else {
                machine.step_exec(er.min)
            }
        }
        ExecCtx::Tcr => {
            let entry = machine.layout().tcr().min;
            machine.step_exec(entry)
        }
        ExecCtx::At(addr) => machine.step_exec(addr),
    };
    if placement == StepOutcome::Reset {
        return StepOutcome::Reset;
    }

    match *action {
        AdversaryAction::CoreWrite { addr, value, .. } => machine.step_core_write(addr, value),
        AdversaryAction::DmaWrite { addr, value, .. } => machine.step_dma_write(addr, value),
        AdversaryAction::JumpTo { addr, .. } => machine.step_exec(addr),
        AdversaryAction::RaiseIrq { .. } => machine.step_interrupt(),
        AdversaryAction::ReadAddr { addr, .. } => machine.step_core_read(addr),
    }
}
