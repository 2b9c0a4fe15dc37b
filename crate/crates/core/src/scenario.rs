//! Scenario driver: loads a JSON description of a protocol run, executes it
//! lock-step against one machine, one verifier session, and one scripted
//! channel, and emits a deterministic report.
//!
//! A step is exchange-granular: sending an update pumps the whole round trip
//! (channel, download, trusted routines, acknowledgment, channel again) so
//! scenario files stay short. Faults are armed by dedicated steps and consumed
//! by the device pump. Identical (scenario, seed) pairs produce byte-identical
//! reports; transcripts redact MAC tags to their first four bytes.

use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::app::{self, AdversaryAction, DeviceError, DownloadOutcome};
use crate::channel::{self, frame, unframe, Channel, Directive, WireMessage};
use crate::crypto::{MacTag, SecretKey};
use crate::image::{make_app_bin, SoftwareImage, MIN_IMAGE_LEN};
use crate::layout::{LayoutConfig, MemoryLayout};
use crate::mem::{Machine, StepOutcome};
use crate::trusted::{self, AuthOutcome, ControlTransfer, InstallRun};
use crate::verifier::{NextAction, SessionState, UpdateRequest, VerifyOutcome};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse scenario: {0}")]
    Json(#[from] serde_json::Error),
    #[error("key_hex must be 64 hex characters")]
    BadKey,
    #[error(transparent)]
    Layout(#[from] crate::layout::LayoutError),
    #[error("scenario setup failed: {0}")]
    Setup(String),
}

/// Initial application installed at deployment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppSpec {
    pub bin_len: usize,
    #[serde(default = "default_version")]
    pub version: u16,
}

fn default_version() -> u16 {
    1
}

/// Behavior switches for a compromised application.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct DeviceBehavior {
    /// Download receives requests but never hands them to trusted code.
    #[serde(default)]
    pub refuse_tcb: bool,
    /// Acknowledge never transmits.
    #[serde(default)]
    pub skip_ack: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Device,
    Verifier,
}

/// One scenario step.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// Build the next-version update carrying a fresh binary of `bin_len`
    /// bytes and run the full exchange.
    VrfUpdate { bin_len: usize },
    /// Let the response window lapse and act on the timeout policy.
    VrfTimeout,
    /// Challenge the device and check the response against the verifier's
    /// copy of the software.
    VrfLiveness,
    /// Memory-level adversary action on the device.
    Adversary { action: AdversaryAction },
    /// Deliver a recorded frame (by transmission index) straight to one end.
    AdversaryReplay { index: usize, to: Endpoint },
    /// Deliver raw attacker bytes straight to one end.
    AdversaryInject { bytes: Vec<u8>, to: Endpoint },
    /// Queue channel directives for the following transmissions.
    Script { directives: Vec<Directive> },
    /// Reset the device at the given write index of the next install run.
    FaultInstallWrite { index: u64 },
    /// Reset the device after the next install completes, before the
    /// acknowledgment is sent.
    CrashBeforeAck,
    /// Power-cycle the device and run the boot path.
    Reboot,
}

/// Observable end-state predicates.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expectation {
    ConfirmedVersion { equals: u16 },
    ErVersion { equals: u16 },
    ResetsEqual { count: u64 },
    ResetsAtLeast { count: u64 },
    /// Executable region, pointer registers, status flag, and vector table
    /// are byte-identical to the scenario start.
    ProtectedUnchanged,
    InstallsCompleted { equals: u64 },
    AcksSent { equals: u64 },
    GaveUp { equals: bool },
    /// Some transcript entry finished with this outcome label.
    TranscriptContains { outcome: String },
    /// The step at `index` reported this outcome.
    StepOutcome { index: usize, equals: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub layout: Option<LayoutConfig>,
    pub initial_app: AppSpec,
    /// 64 hex chars; derived from the seed when absent.
    #[serde(default)]
    pub key_hex: Option<String>,
    #[serde(default)]
    pub timeout_ticks: Option<u64>,
    #[serde(default)]
    pub max_retries: Option<u32>,
    #[serde(default)]
    pub device: DeviceBehavior,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub expectations: Vec<Expectation>,
}

impl Scenario {
    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TranscriptEntry {
    pub tick: u64,
    pub direction: &'static str,
    pub msg_type: String,
    pub v: Option<u16>,
    pub outcome: String,
    /// First four bytes of a transported tag, when the frame carried one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tag4: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepReport {
    pub index: usize,
    pub step: Step,
    pub outcome: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalState {
    pub confirmed_version: u16,
    pub er_version: Option<u16>,
    pub sf: u8,
    pub er_digest: String,
    pub ep_words: String,
    pub ivtr_digest: String,
    pub resets: u64,
    pub installs_started: u64,
    pub installs_completed: u64,
    pub auth_accepts: u64,
    pub auth_rejects: u64,
    pub acks_sent: u64,
    pub gave_up: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExpectationReport {
    pub expectation: Expectation,
    pub pass: bool,
    pub actual: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub name: String,
    pub seed: u64,
    pub steps: Vec<StepReport>,
    pub transcript: Vec<TranscriptEntry>,
    pub final_state: FinalState,
    pub expectations: Vec<ExpectationReport>,
    pub passed: bool,
}

/// Execute a scenario start to finish.
pub fn run(scenario: &Scenario) -> Result<RunReport, ScenarioError> {
    let mut driver = Driver::new(scenario)?;
    for (index, step) in scenario.steps.iter().enumerate() {
        let outcome = driver.execute(step);
        driver.steps.push(StepReport {
            index,
            step: step.clone(),
            outcome,
        });
    }
    Ok(driver.finish(scenario))
}

fn scenario_key(scenario: &Scenario) -> Result<[u8; 32], ScenarioError> {
    match &scenario.key_hex {
        Some(hex_str) => {
            let bytes = hex::decode(hex_str).map_err(|_| ScenarioError::BadKey)?;
            bytes.try_into().map_err(|_| ScenarioError::BadKey)
        }
        None => {
            let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed.wrapping_add(0xca5d));
            let mut key = [0u8; 32];
            rng.fill_bytes(&mut key);
            Ok(key)
        }
    }
}

struct Driver {
    machine: Machine,
    vrf: SessionState,
    channel: Channel,
    behavior: DeviceBehavior,
    crash_before_ack: bool,
    idle_ticks: u64,
    acks_sent: u64,
    gave_up: bool,
    vrf_expected_er: Vec<u8>,
    pending_liveness: Option<MacTag>,
    baseline_protected: [u8; 32],
    transcript: Vec<TranscriptEntry>,
    steps: Vec<StepReport>,
    update_counter: u8,
}

impl Driver {
    fn new(scenario: &Scenario) -> Result<Driver, ScenarioError> {
        let layout = match &scenario.layout {
            Some(cfg) => cfg.validate()?,
            None => MemoryLayout::default_layout(),
        };
        let key = scenario_key(scenario)?;
        if scenario.initial_app.bin_len < 4 {
            return Err(ScenarioError::Setup(
                "initial_app.bin_len must be at least 4".into(),
            ));
        }
        let app = SoftwareImage::new(
            scenario.initial_app.version,
            [0xc5; 16],
            make_app_bin(scenario.initial_app.bin_len, 0xa5),
            [0x0f; 32],
        );
        let mut machine = Machine::new(layout, &[0x0f; 64], &app, key)?;
        trusted::boot(&mut machine);

        let mut vrf = SessionState::new(
            SecretKey::new(key),
            scenario.initial_app.version,
            scenario.seed,
        );
        if let Some(ticks) = scenario.timeout_ticks {
            vrf.set_timeout_ticks(ticks);
        }
        if let Some(retries) = scenario.max_retries {
            vrf.set_max_retries(retries);
        }

        let vrf_expected_er = app
            .serialize()
            .map_err(|e| ScenarioError::Setup(e.to_string()))?;
        let baseline_protected = machine.protected_digest();

        Ok(Driver {
            machine,
            vrf,
            channel: Channel::default(),
            behavior: scenario.device,
            crash_before_ack: false,
            idle_ticks: 0,
            acks_sent: 0,
            gave_up: false,
            vrf_expected_er,
            pending_liveness: None,
            baseline_protected,
            transcript: Vec::new(),
            steps: Vec::new(),
            update_counter: 0,
        })
    }

    fn now(&self) -> u64 {
        self.machine.ticks() + self.idle_ticks
    }

    fn execute(&mut self, step: &Step) -> String {
        match step {
            Step::VrfUpdate { bin_len } => {
                if *bin_len < 4 {
                    return "error: bin_len must be at least 4".into();
                }
                self.update_counter = self.update_counter.wrapping_add(1);
                let bin = make_app_bin(*bin_len, self.update_counter);
                let ivt = [self.update_counter; 32];
                match self.vrf.build_update(bin, ivt) {
                    Ok(request) => {
                        let version = request.image.version;
                        self.send_update(&request);
                        format!("sent v{version}")
                    }
                    Err(e) => format!("error: {e}"),
                }
            }
            Step::VrfTimeout => {
                self.idle_ticks += self.vrf.timeout_ticks();
                match self.vrf.on_timeout(self.now()) {
                    Ok(NextAction::ResendSame) => {
                        let request = self
                            .vrf
                            .pending_request()
                            .expect("resend implies a pending request");
                        self.send_update(&request);
                        "resent_same".into()
                    }
                    Ok(NextAction::EscalateNewVersion(request)) => {
                        let version = request.image.version;
                        self.send_update(&request);
                        format!("escalated to v{version}")
                    }
                    Ok(NextAction::GiveUp) => {
                        self.gave_up = true;
                        "gave_up".into()
                    }
                    Err(e) => format!("error: {e}"),
                }
            }
            Step::VrfLiveness => {
                let expected_er = self.vrf_expected_er.clone();
                let (chal, expected) = self.vrf.liveness_challenge(&expected_er);
                self.pending_liveness = Some(expected);
                self.transmit_to_device(frame(&WireMessage::LivenessChal(chal)));
                "challenged".into()
            }
            Step::Adversary { action } => {
                let outcome = app::inject(&mut self.machine, action);
                if outcome == StepOutcome::Reset {
                    // Hardware reboots; the boot path runs before anything else.
                    trusted::boot(&mut self.machine);
                    "reset".into()
                } else {
                    "applied".into()
                }
            }
            Step::AdversaryReplay { index, to } => {
                match self.channel.history().get(*index).cloned() {
                    Some(bytes) => {
                        self.deliver_raw(bytes, *to);
                        "replayed".into()
                    }
                    None => format!("error: no recorded frame {index}"),
                }
            }
            Step::AdversaryInject { bytes, to } => {
                self.deliver_raw(bytes.clone(), *to);
                "injected".into()
            }
            Step::Script { directives } => {
                self.channel.push_directives(directives.iter().cloned());
                format!("queued {} directives", directives.len())
            }
            Step::FaultInstallWrite { index } => {
                self.machine.schedule_install_fault(*index);
                format!("armed install fault at write {index}")
            }
            Step::CrashBeforeAck => {
                self.crash_before_ack = true;
                "armed crash before ack".into()
            }
            Step::Reboot => {
                self.machine.hard_reset();
                let resumed = trusted::boot(&mut self.machine);
                if resumed.is_some() {
                    "rebooted (resumed install)".into()
                } else {
                    "rebooted".into()
                }
            }
        }
    }

    fn send_update(&mut self, request: &UpdateRequest) {
        self.vrf.note_sent(self.now());
        self.transmit_to_device(frame(&WireMessage::update(
            &request.image,
            request.atok.as_bytes(),
        )));
    }

    /// Verifier-to-device transmission through the adversarial channel.
    fn transmit_to_device(&mut self, bytes: Vec<u8>) {
        let sent = describe(&bytes);
        match self.channel.transmit(bytes) {
            None => self.record("vrf_to_prv", sent, "dropped".into()),
            Some(delivered) => self.deliver_to_device(delivered, sent),
        }
    }

    /// Device-to-verifier transmission through the adversarial channel.
    fn transmit_to_vrf(&mut self, bytes: Vec<u8>) {
        let sent = describe(&bytes);
        match self.channel.transmit(bytes) {
            None => self.record("prv_to_vrf", sent, "dropped".into()),
            Some(delivered) => self.deliver_to_vrf(delivered, sent),
        }
    }

    /// Direct (adversary-initiated) delivery, bypassing the script.
    fn deliver_raw(&mut self, bytes: Vec<u8>, to: Endpoint) {
        let sent = describe(&bytes);
        match to {
            Endpoint::Device => self.deliver_to_device(bytes, sent),
            Endpoint::Verifier => self.deliver_to_vrf(bytes, sent),
        }
    }

    fn deliver_to_device(&mut self, bytes: Vec<u8>, sent: FrameDesc) {
        let (outcome, reply) = self.device_handle(&bytes);
        self.record("vrf_to_prv", sent, outcome);
        if let Some(reply) = reply {
            self.transmit_to_vrf(reply);
        }
    }

    fn deliver_to_vrf(&mut self, bytes: Vec<u8>, sent: FrameDesc) {
        let outcome = self.vrf_handle(&bytes);
        self.record("prv_to_vrf", sent, outcome);
    }

    /// The device side of one delivered frame: download, trusted routines,
    /// and the application's reply, if any.
    fn device_handle(&mut self, bytes: &[u8]) -> (String, Option<Vec<u8>>) {
        let msg = match unframe(bytes) {
            Ok(msg) => msg,
            Err(_) => return ("garbled_ignored".into(), None),
        };
        match msg {
            WireMessage::Update { image_bytes, atok } => {
                if self.behavior.refuse_tcb {
                    return ("refused_by_app".into(), None);
                }
                let image = match SoftwareImage::parse(&image_bytes) {
                    Ok(img) => img,
                    Err(_) => return ("malformed_ignored".into(), None),
                };
                let request = UpdateRequest {
                    image,
                    atok: MacTag(atok),
                };
                match app::download(&mut self.machine, &request) {
                    Err(DeviceError::NoSpace { .. }) => ("no_space_ignored".into(), None),
                    Err(DeviceError::ResetDuringDownload) => {
                        trusted::boot(&mut self.machine);
                        ("reset_during_download".into(), None)
                    }
                    Ok(DownloadOutcome::Ignored) => ("ignored_stale".into(), None),
                    Ok(DownloadOutcome::RepliedStoredAck) => {
                        ("replied_stored_ack".into(), self.app_ack())
                    }
                    Ok(DownloadOutcome::InvokedTcb) => self.run_tcb_update(),
                }
            }
            WireMessage::LivenessChal(chal) => {
                match app::handle_liveness(&mut self.machine, &chal) {
                    Some(tag) => (
                        "attested".into(),
                        Some(frame(&WireMessage::LivenessResp(tag))),
                    ),
                    None => {
                        trusted::boot(&mut self.machine);
                        ("reset".into(), None)
                    }
                }
            }
            WireMessage::Ack(_) | WireMessage::LivenessResp(_) => {
                ("ignored_unexpected".into(), None)
            }
        }
    }

    /// Trusted-code part of an update: authenticate, install, recover.
    fn run_tcb_update(&mut self) -> (String, Option<Vec<u8>>) {
        match trusted::casu_entry(&mut self.machine, false) {
            ControlTransfer::IntoAuthenticate => {}
            other => return (format!("unexpected entry {other:?}"), None),
        }
        match trusted::casu_authenticate(&mut self.machine) {
            AuthOutcome::RejectVersion => ("rejected_version".into(), None),
            AuthOutcome::RejectTag => ("rejected_tag".into(), None),
            AuthOutcome::Accept => match trusted::casu_install(&mut self.machine) {
                InstallRun::Completed(_) => {
                    if self.crash_before_ack {
                        self.crash_before_ack = false;
                        self.machine.hard_reset();
                        trusted::boot(&mut self.machine);
                        ("installed_then_reset".into(), None)
                    } else {
                        ("installed".into(), self.app_ack())
                    }
                }
                InstallRun::Interrupted => {
                    if trusted::boot(&mut self.machine).is_some() {
                        ("install_resumed_at_boot".into(), self.app_ack())
                    } else {
                        ("install_interrupted".into(), None)
                    }
                }
                InstallRun::Aborted => ("install_aborted".into(), None),
            },
        }
    }

    fn app_ack(&mut self) -> Option<Vec<u8>> {
        if self.behavior.skip_ack {
            return None;
        }
        let tag = app::acknowledge(&mut self.machine)?;
        self.acks_sent += 1;
        Some(frame(&WireMessage::Ack(tag)))
    }

    /// The verifier side of one delivered frame.
    fn vrf_handle(&mut self, bytes: &[u8]) -> String {
        let msg = match unframe(bytes) {
            Ok(msg) => msg,
            Err(_) => return "garbled_ignored".into(),
        };
        match msg {
            WireMessage::Ack(tag) => {
                if !self.vrf.has_pending() {
                    return "unsolicited_ack".into();
                }
                let pending_bytes = self
                    .vrf
                    .pending_image()
                    .and_then(|img| img.serialize().ok());
                match self.vrf.verify_ack(&tag) {
                    Ok(VerifyOutcome::Confirmed) => {
                        if let Some(bytes) = pending_bytes {
                            self.vrf_expected_er = bytes;
                        }
                        "confirmed".into()
                    }
                    Ok(VerifyOutcome::Invalid) => "ack_invalid".into(),
                    Err(e) => format!("error: {e}"),
                }
            }
            WireMessage::LivenessResp(tag) => match self.pending_liveness.take() {
                Some(expected) if expected.ct_eq(&tag) => "liveness_ok".into(),
                Some(_) => "liveness_mismatch".into(),
                None => "unsolicited_liveness".into(),
            },
            _ => "ignored_unexpected".into(),
        }
    }

    fn record(&mut self, direction: &'static str, sent: FrameDesc, outcome: String) {
        self.transcript.push(TranscriptEntry {
            tick: self.now(),
            direction,
            msg_type: sent.msg_type,
            v: sent.version,
            outcome,
            tag4: sent.tag4,
        });
    }

    fn finish(mut self, scenario: &Scenario) -> RunReport {
        let er_version = self.machine.er_header().ok().map(|h| h.version);
        let stats = *self.machine.stats();
        let final_state = FinalState {
            confirmed_version: self.vrf.confirmed_version(),
            er_version,
            sf: self.machine.sf(),
            er_digest: hex::encode(self.machine.er_digest()),
            ep_words: hex::encode(self.machine.read_region(self.machine.layout().ep())),
            ivtr_digest: hex::encode(crate::crypto::sha256(
                self.machine.read_region(self.machine.layout().ivtr()),
            )),
            resets: stats.resets,
            installs_started: stats.installs_started,
            installs_completed: stats.installs_completed,
            auth_accepts: stats.auth_accepts,
            auth_rejects: stats.auth_rejects,
            acks_sent: self.acks_sent,
            gave_up: self.gave_up,
        };

        let expectations: Vec<ExpectationReport> = scenario
            .expectations
            .iter()
            .map(|e| self.evaluate(e, &final_state))
            .collect();
        let passed = expectations.iter().all(|e| e.pass);

        RunReport {
            name: scenario.name.clone(),
            seed: scenario.seed,
            steps: std::mem::take(&mut self.steps),
            transcript: std::mem::take(&mut self.transcript),
            final_state,
            expectations,
            passed,
        }
    }

    fn evaluate(&self, expectation: &Expectation, state: &FinalState) -> ExpectationReport {
        let (pass, actual) = match expectation {
            Expectation::ConfirmedVersion { equals } => (
                state.confirmed_version == *equals,
                state.confirmed_version.to_string(),
            ),
            Expectation::ErVersion { equals } => (
                state.er_version == Some(*equals),
                format!("{:?}", state.er_version),
            ),
            Expectation::ResetsEqual { count } => {
                (state.resets == *count, state.resets.to_string())
            }
            Expectation::ResetsAtLeast { count } => {
                (state.resets >= *count, state.resets.to_string())
            }
            Expectation::ProtectedUnchanged => {
                let digest = self.machine.protected_digest();
                (
                    digest == self.baseline_protected,
                    hex::encode(&digest[..8]),
                )
            }
            Expectation::InstallsCompleted { equals } => (
                state.installs_completed == *equals,
                state.installs_completed.to_string(),
            ),
            Expectation::AcksSent { equals } => {
                (state.acks_sent == *equals, state.acks_sent.to_string())
            }
            Expectation::GaveUp { equals } => {
                (state.gave_up == *equals, state.gave_up.to_string())
            }
            Expectation::TranscriptContains { outcome } => {
                let hit = self.transcript.iter().any(|t| &t.outcome == outcome);
                (hit, format!("{} entries", self.transcript.len()))
            }
            Expectation::StepOutcome { index, equals } => {
                let actual = self
                    .steps
                    .get(*index)
                    .map(|s| s.outcome.clone())
                    .unwrap_or_else(|| "<no such step>".into());
                (&actual == equals, actual)
            }
        };
        ExpectationReport {
            expectation: expectation.clone(),
            pass,
            actual,
        }
    }
}

/// Redacted description of a frame for the transcript.
struct FrameDesc {
    msg_type: String,
    version: Option<u16>,
    tag4: Option<String>,
}

fn describe(bytes: &[u8]) -> FrameDesc {
    match unframe(bytes) {
        Ok(msg) => {
            let tag4 = match &msg {
                WireMessage::Update { atok, .. } => Some(hex::encode(&atok[..4])),
                WireMessage::Ack(tag) | WireMessage::LivenessResp(tag) => {
                    Some(hex::encode(&tag[..4]))
                }
                WireMessage::LivenessChal(_) => None,
            };
            FrameDesc {
                msg_type: msg.type_name().into(),
                version: msg.version(),
                tag4,
            }
        }
        Err(_) => FrameDesc {
            msg_type: "raw".into(),
            version: None,
            tag4: None,
        },
    }
}

/// One row of the scaling measurement.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub size: usize,
    pub auth_compressions: u64,
    pub install_compressions: u64,
}

/// Count hash-compression invocations in the authenticate and install phases
/// of a benign update whose serialized image is exactly `size` bytes.
pub fn measure_scaling(sizes: &[usize]) -> Result<Vec<ScalingRow>, ScenarioError> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size < MIN_IMAGE_LEN {
            return Err(ScenarioError::Setup(format!(
                "size {size} below the minimum image of {MIN_IMAGE_LEN} bytes"
            )));
        }
        let key = [0x42u8; 32];
        let app = SoftwareImage::new(1, [1; 16], make_app_bin(64, 1), [2; 32]);
        let mut machine = Machine::new(MemoryLayout::default_layout(), &[0; 64], &app, key)?;
        trusted::boot(&mut machine);

        // Binaries below four bytes cannot carry the entry-word convention,
        // but hash-work measurement only needs the length to be exact.
        let bin_len = size - MIN_IMAGE_LEN;
        let bin = if bin_len >= 4 {
            make_app_bin(bin_len, 3)
        } else {
            vec![0u8; bin_len]
        };
        let mut vrf = SessionState::new(SecretKey::new(key), 1, 7);
        let request = vrf
            .build_update(bin, [4; 32])
            .expect("no pending request");
        assert_eq!(request.image.len(), size);

        match app::download(&mut machine, &request) {
            Ok(DownloadOutcome::InvokedTcb) => {}
            other => return Err(ScenarioError::Setup(format!("staging failed: {other:?}"))),
        }
        trusted::casu_entry(&mut machine, false);

        crate::crypto::reset_compression_count();
        let auth = trusted::casu_authenticate(&mut machine);
        let auth_compressions = crate::crypto::compression_count();
        if auth != AuthOutcome::Accept {
            return Err(ScenarioError::Setup(format!(
                "authentication failed: {auth:?}"
            )));
        }

        crate::crypto::reset_compression_count();
        let install = trusted::casu_install(&mut machine);
        let install_compressions = crate::crypto::compression_count();
        if !matches!(install, InstallRun::Completed(_)) {
            return Err(ScenarioError::Setup("install failed".into()));
        }

        rows.push(ScalingRow {
            size,
            auth_compressions,
            install_compressions,
        });
    }
    Ok(rows)
}

/// Outcome of one randomized forgery attempt.
#[derive(Debug, Clone, Copy)]
pub struct ForgeryOutcome {
    /// The verifier confirmed the target version, or the device installed it,
    /// without an honest update delivery. Must never happen.
    pub forged: bool,
    pub adversary_events: u32,
}

/// One seeded adversarial run: an honest update establishes history, the
/// verifier prepares (but never successfully delivers) the next version, and
/// a script of replay/tamper/inject events tries to confirm it anyway.
pub fn forgery_trial(seed: u64) -> ForgeryOutcome {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let key = [0x24u8; 32];

    let app = SoftwareImage::new(1, [9; 16], make_app_bin(48, 1), [3; 32]);
    let mut machine =
        Machine::new(MemoryLayout::default_layout(), &[0; 64], &app, key).expect("layout");
    trusted::boot(&mut machine);
    let mut vrf = SessionState::new(SecretKey::new(key), 1, seed ^ 0x5eed);
    let mut history: Vec<Vec<u8>> = Vec::new();

    // Honest update to version 2 so the adversary has real frames to replay.
    let request = vrf.build_update(make_app_bin(56, 2), [5; 32]).unwrap();
    let update_frame = frame(&WireMessage::update(&request.image, request.atok.as_bytes()));
    history.push(update_frame.clone());
    let outcome = app::download(&mut machine, &request).expect("download");
    assert_eq!(outcome, DownloadOutcome::InvokedTcb);
    trusted::casu_entry(&mut machine, false);
    assert_eq!(trusted::casu_authenticate(&mut machine), AuthOutcome::Accept);
    let InstallRun::Completed(_) = trusted::casu_install(&mut machine) else {
        panic!("benign install");
    };
    let ack = app::acknowledge(&mut machine).expect("stored ack");
    history.push(frame(&WireMessage::Ack(ack)));
    assert_eq!(vrf.verify_ack(&ack), Ok(VerifyOutcome::Confirmed));
    assert_eq!(vrf.confirmed_version(), 2);

    // Target: version 3. The pristine frame below is never delivered.
    let target = vrf.build_update(make_app_bin(64, 3), [6; 32]).unwrap();
    let target_version = target.image.version;
    let pristine = frame(&WireMessage::update(&target.image, target.atok.as_bytes()));

    let events = 1 + (rng.next_u32() % 8);
    for _ in 0..events {
        let reply = match rng.next_u32() % 6 {
            // Replay a recorded frame to the device.
            0 => {
                let idx = rng.next_u32() as usize % history.len();
                let bytes = history[idx].clone();
                device_consume(&mut machine, &bytes, &mut history)
            }
            // Replay a recorded frame to the verifier.
            1 => {
                let idx = rng.next_u32() as usize % history.len();
                let bytes = history[idx].clone();
                vrf_consume(&mut vrf, &bytes);
                None
            }
            // Tamper the pristine target frame and deliver it.
            2 | 3 => {
                let mut bytes = pristine.clone();
                let flips = 1 + rng.next_u32() % 4;
                for _ in 0..flips {
                    let at = rng.next_u32() as usize % bytes.len();
                    let xor = (rng.next_u32() % 255 + 1) as u8;
                    bytes[at] ^= xor;
                }
                if bytes == pristine {
                    None // double flip cancelled out; skip rather than leak it
                } else {
                    device_consume(&mut machine, &bytes, &mut history)
                }
            }
            // Random junk to the device.
            4 => {
                let len = (rng.next_u32() % 400) as usize;
                let mut junk = vec![0u8; len];
                rng.fill_bytes(&mut junk);
                device_consume(&mut machine, &junk, &mut history)
            }
            // A guessed acknowledgment to the verifier.
            _ => {
                let mut guess = vec![channel::MSG_ACK];
                let mut tag = [0u8; 32];
                rng.fill_bytes(&mut tag);
                guess.extend_from_slice(&tag);
                vrf_consume(&mut vrf, &guess);
                None
            }
        };
        // Honest device replies travel back; they only widen the attack
        // surface for the verifier check.
        if let Some(reply) = reply {
            history.push(reply.clone());
            vrf_consume(&mut vrf, &reply);
        }
    }

    let er_version = machine.er_header().ok().map(|h| h.version);
    ForgeryOutcome {
        forged: vrf.confirmed_version() == target_version
            || er_version == Some(target_version),
        adversary_events: events,
    }
}

/// Device handling for the forgery harness; returns any reply frame.
fn device_consume(
    machine: &mut Machine,
    bytes: &[u8],
    history: &mut Vec<Vec<u8>>,
) -> Option<Vec<u8>> {
    let Ok(WireMessage::Update { image_bytes, atok }) = unframe(bytes) else {
        return None;
    };
    let image = SoftwareImage::parse(&image_bytes).ok()?;
    let request = UpdateRequest {
        image,
        atok: MacTag(atok),
    };
    history.push(bytes.to_vec());
    match app::download(machine, &request) {
        Ok(DownloadOutcome::InvokedTcb) => {
            trusted::casu_entry(machine, false);
            if trusted::casu_authenticate(machine) == AuthOutcome::Accept {
                let _ = trusted::casu_install(machine);
            }
            app::acknowledge(machine).map(|tag| frame(&WireMessage::Ack(tag)))
        }
        Ok(DownloadOutcome::RepliedStoredAck) => {
            app::acknowledge(machine).map(|tag| frame(&WireMessage::Ack(tag)))
        }
        _ => None,
    }
}

fn vrf_consume(vrf: &mut SessionState, bytes: &[u8]) {
    if let Ok(WireMessage::Ack(tag)) = unframe(bytes) {
        if vrf.has_pending() {
            let _ = vrf.verify_ack(&tag);
        }
    }
}
