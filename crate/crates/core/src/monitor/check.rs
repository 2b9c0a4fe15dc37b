//! Exhaustive re-verification of the monitor's safety properties.
//!
//! The FSM's predicates are interval-membership tests, so enumerating one
//! representative per region, the region boundaries, the addresses adjacent
//! to each boundary, and one free address covers every branch of every
//! predicate; booleans take both values. Full per-address enumeration is
//! available behind a flag for compact layouts.
//!
//! Expected outputs are recomputed here from the property formulas, written
//! out independently of the FSM implementation, so a mutated or miswired
//! monitor shows up as an `expected != got` counterexample. Two scripted
//! probes run per sample on top of the sweep: the recovery probe (from the
//! reset state, the boot fetch must re-enter execution in one step) and the
//! false-reset probe (the benign fetch right after recovery must not reset).

use std::collections::BTreeSet;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::layout::{Address, MemoryLayout, Region};
use crate::mem::BusSignals;
use crate::monitor::{monitor_step_with_rules, MonitorConfig, MonitorState, Phase, RuleSet};

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Enumerate every address up to the top of the layout instead of the
    /// equivalence classes. Only practical for small synthetic layouts.
    pub full_enumeration: bool,
    /// Rules the monitor under test enforces (mutation hook).
    pub rules: RuleSet,
    /// Cap on recorded counterexamples; violations beyond it are counted
    /// but not materialized.
    pub max_counterexamples: usize,
    /// Abandon the sweep at the first counterexample (mutation checks only
    /// need existence).
    pub stop_on_first: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            full_enumeration: false,
            rules: RuleSet::all(),
            max_counterexamples: 16,
            stop_on_first: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckError {
    #[error("no executable-region samples supplied")]
    EmptySamples,
    #[error("sample {min:#06x}..{max:#06x} lies outside program memory")]
    SampleOutsidePmem { min: Address, max: Address },
    #[error("property check failed on {0}")]
    Failed(Box<Counterexample>),
}

/// State the monitor was in when a counterexample was found.
#[derive(Debug, Clone, Serialize)]
pub struct StateDesc {
    pub phase: Phase,
    pub prev_pc_in_tcr: bool,
    pub er: Region,
}

#[derive(Debug, Clone, Serialize)]
pub struct Counterexample {
    pub state: StateDesc,
    pub signals: BusSignals,
    pub expected: &'static str,
    pub got: &'static str,
    pub property: &'static str,
}

impl std::fmt::Display for Counterexample {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: expected {}, got {} (phase {:?}, pc {:#06x})",
            self.property, self.expected, self.got, self.state.phase, self.signals.pc
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub cases: u64,
    pub counterexamples: Vec<Counterexample>,
    /// Total mismatches per property, including ones beyond the recording cap.
    pub violations: std::collections::BTreeMap<&'static str, u64>,
    pub elapsed_ms: u64,
}

impl CheckReport {
    pub fn is_clean(&self) -> bool {
        self.counterexamples.is_empty() && self.violations.is_empty()
    }

    pub fn ensure_clean(self) -> Result<CheckReport, CheckError> {
        match self.counterexamples.first() {
            Some(first) => Err(CheckError::Failed(Box::new(first.clone()))),
            None => Ok(self),
        }
    }
}

/// Property labels used in reports.
pub mod property {
    /// Protected-region writes from untrusted code must reset.
    pub const IMMUTABILITY: &str = "immutability";
    /// Execution outside the executable/trusted regions must reset.
    pub const EXEC_PREVENTION: &str = "exec_prevention";
    /// Interrupts or DMA during trusted execution must reset.
    pub const PREEMPT_TRUSTED: &str = "preempt_trusted";
    /// Key reads from untrusted context must reset.
    pub const KEY_READ: &str = "key_read";
    /// Trusted code entered off its first address must reset.
    pub const SIDE_ENTRY: &str = "side_entry";
    /// No reset may fire when no rule's antecedent holds.
    pub const NO_FALSE_RESET: &str = "no_false_reset";
    /// The boot fetch must leave the reset state in exactly one step.
    pub const RECOVERY: &str = "recovery";
}

fn in_region(r: &Region, a: Address) -> bool {
    r.min <= a && a <= r.max
}

/// The property formulas, spelled out. Returns the label of the first
/// antecedent that holds, or `None` when no reset is justified.
fn expected_cause(
    cfg: &MonitorConfig,
    er: &Region,
    sig: &BusSignals,
    prev_pc_in_tcr: bool,
) -> Option<&'static str> {
    let pc_in_tcr = in_region(&cfg.tcr, sig.pc);
    let writes = |r: &Region| {
        (sig.wen && in_region(r, sig.daddr)) || (sig.dmaen && sig.dma_wen && in_region(r, sig.dmaaddr))
    };

    if !pc_in_tcr && (writes(er) || writes(&cfg.ep) || writes(&cfg.sf) || writes(&cfg.ivtr)) {
        return Some(property::IMMUTABILITY);
    }
    if !in_region(er, sig.pc) && !pc_in_tcr {
        return Some(property::EXEC_PREVENTION);
    }
    if pc_in_tcr && (sig.irq || sig.dmaen) {
        return Some(property::PREEMPT_TRUSTED);
    }
    let reads_key = (sig.ren && in_region(&cfg.kr, sig.daddr))
        || (sig.dmaen && !sig.dma_wen && in_region(&cfg.kr, sig.dmaaddr));
    if !pc_in_tcr && reads_key {
        return Some(property::KEY_READ);
    }
    if pc_in_tcr && !prev_pc_in_tcr && sig.pc != cfg.tcr.min {
        return Some(property::SIDE_ENTRY);
    }
    None
}

fn address_classes(
    cfg: &MonitorConfig,
    er: Region,
    pmem: Region,
    full: bool,
) -> Vec<Address> {
    let regions = [cfg.tcr, cfg.ivtr, cfg.ep, cfg.bep, cfg.sf, cfg.kr, er, pmem];
    if full {
        let top = regions
            .iter()
            .map(|r| r.max)
            .max()
            .unwrap_or(u16::MAX)
            .saturating_add(1);
        return (0..=top).collect();
    }
    let mut set = BTreeSet::new();
    for r in regions {
        if r.is_empty() {
            continue;
        }
        set.insert(r.min);
        set.insert(r.max);
        set.insert(r.min + (r.max - r.min) / 2);
        if r.min > 0 {
            set.insert(r.min - 1);
        }
        if r.max < u16::MAX {
            set.insert(r.max + 1);
        }
    }
    let free = (0..=u16::MAX).find(|&a| !regions.iter().any(|r| r.contains(a)));
    if let Some(a) = free {
        set.insert(a);
    }
    set.into_iter().collect()
}

/// Eight executable-region samples spread over both staging slots of the
/// given layout, from a single byte up to the whole application area.
pub fn default_er_samples(layout: &MemoryLayout) -> Vec<Region> {
    let app = layout.app_area();
    let (slot_a, slot_b) = layout.slots();
    let clamp = |min: Address, len: usize| {
        let max = (min as usize + len - 1).min(app.max as usize) as Address;
        Region { min, max }
    };
    vec![
        clamp(app.min, 1),
        clamp(app.min, 52),
        clamp(app.min, 302),
        clamp(slot_a.min + 0x400, 474),
        clamp(slot_b.min, 786),
        clamp(slot_b.min + 0x200, 2048),
        clamp(app.min, app.len() / 4),
        app,
    ]
}

/// Sweep the monitor over every (state, input-class) pair for each sample
/// and compare against the property formulas.
pub fn check_properties(
    cfg: &MonitorConfig,
    pmem: Region,
    er_samples: &[Region],
    opts: &CheckOptions,
) -> Result<CheckReport, CheckError> {
    if er_samples.is_empty() {
        return Err(CheckError::EmptySamples);
    }
    for s in er_samples {
        if s.is_empty() || !pmem.contains_region(s) {
            return Err(CheckError::SampleOutsidePmem { min: s.min, max: s.max });
        }
    }

    let start = Instant::now();
    let mut report = CheckReport {
        cases: 0,
        counterexamples: Vec::new(),
        violations: Default::default(),
        elapsed_ms: 0,
    };

    let record = |report: &mut CheckReport,
                      property: &'static str,
                      state: StateDesc,
                      signals: BusSignals,
                      expected: &'static str,
                      got: &'static str,
                      cap: usize| {
        *report.violations.entry(property).or_insert(0) += 1;
        if report.counterexamples.len() < cap {
            report.counterexamples.push(Counterexample {
                state,
                signals,
                expected,
                got,
                property,
            });
        }
    };

    'sweep: for &er in er_samples {
        // Scripted probes: recovery out of reset, then a benign fetch.
        let boot = BusSignals::exec(cfg.pc_init);
        let st1 = monitor_step_with_rules(MonitorState::reset(), cfg, er, &boot, opts.rules);
        report.cases += 1;
        if st1.phase != Phase::Exec || st1.reset_out {
            record(
                &mut report,
                property::RECOVERY,
                StateDesc { phase: Phase::Reset, prev_pc_in_tcr: true, er },
                boot,
                "exec",
                "reset",
                opts.max_counterexamples,
            );
            if opts.stop_on_first {
                break 'sweep;
            }
        } else {
            report.cases += 1;
            let st2 = monitor_step_with_rules(st1, cfg, er, &boot, opts.rules);
            if st2.reset_out {
                record(
                    &mut report,
                    property::NO_FALSE_RESET,
                    StateDesc {
                        phase: Phase::Exec,
                        prev_pc_in_tcr: st1.prev_pc_in_tcr,
                        er,
                    },
                    boot,
                    "no_reset",
                    "reset",
                    opts.max_counterexamples,
                );
                if opts.stop_on_first {
                    break 'sweep;
                }
            }
        }

        let addrs = address_classes(cfg, er, pmem, opts.full_enumeration);
        let wen_ren = [(false, false), (true, false), (false, true)];
        let bools = [false, true];

        for phase in [Phase::Reset, Phase::Exec] {
            for prev_pc_in_tcr in bools {
                let state = MonitorState {
                    phase,
                    reset_out: matches!(phase, Phase::Reset),
                    prev_pc_in_tcr,
                };
                for &pc in &addrs {
                    for &daddr in &addrs {
                        for &dmaaddr in &addrs {
                            for (wen, ren) in wen_ren {
                                for dmaen in bools {
                                    for dma_wen in bools {
                                        for irq in bools {
                                            let sig = BusSignals {
                                                pc,
                                                wen,
                                                daddr,
                                                ren,
                                                dmaen,
                                                dmaaddr,
                                                dma_wen,
                                                irq,
                                            };
                                            report.cases += 1;
                                            let next = monitor_step_with_rules(
                                                state, cfg, er, &sig, opts.rules,
                                            );
                                            let (expected_reset, cause) = match phase {
                                                Phase::Reset => {
                                                    let recovers = pc == cfg.pc_init;
                                                    (!recovers, property::RECOVERY)
                                                }
                                                Phase::Exec => {
                                                    match expected_cause(
                                                        cfg,
                                                        &er,
                                                        &sig,
                                                        prev_pc_in_tcr,
                                                    ) {
                                                        Some(p) => (true, p),
                                                        None => {
                                                            (false, property::NO_FALSE_RESET)
                                                        }
                                                    }
                                                }
                                            };
                                            if next.reset_out != expected_reset {
                                                let (exp, got) = if expected_reset {
                                                    ("reset", "no_reset")
                                                } else {
                                                    ("no_reset", "reset")
                                                };
                                                record(
                                                    &mut report,
                                                    cause,
                                                    StateDesc {
                                                        phase,
                                                        prev_pc_in_tcr,
                                                        er,
                                                    },
                                                    sig,
                                                    exp,
                                                    got,
                                                    opts.max_counterexamples,
                                                );
                                                if opts.stop_on_first {
                                                    break 'sweep;
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    report.elapsed_ms = start.elapsed().as_millis() as u64;
    Ok(report)
}
