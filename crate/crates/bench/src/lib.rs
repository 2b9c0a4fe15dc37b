//! Shared input builders for the criterion benches.

use casu_core::image::{make_app_bin, SoftwareImage};
use casu_core::layout::MemoryLayout;
use casu_core::mem::Machine;
use casu_core::scenario::{AppSpec, DeviceBehavior, Expectation, Scenario, Step};
use casu_core::trusted;

pub const BENCH_KEY: [u8; 32] = [0x42; 32];

/// A booted machine running a `bin_len`-byte application.
pub fn booted_machine(bin_len: usize) -> Machine {
    let app = SoftwareImage::new(1, [7; 16], make_app_bin(bin_len, 1), [9; 32]);
    let mut machine = Machine::new(MemoryLayout::default_layout(), &[0x0f; 64], &app, BENCH_KEY)
        .expect("default layout fits");
    trusted::boot(&mut machine);
    machine
}

/// The benign single-update scenario used as the end-to-end baseline.
pub fn benign_scenario(bin_len: usize) -> Scenario {
    Scenario {
        name: "bench_benign".into(),
        seed: 42,
        layout: None,
        initial_app: AppSpec {
            bin_len: 250,
            version: 1,
        },
        key_hex: None,
        timeout_ticks: None,
        max_retries: None,
        device: DeviceBehavior::default(),
        steps: vec![Step::VrfUpdate { bin_len }],
        expectations: vec![Expectation::ConfirmedVersion { equals: 2 }],
    }
}
