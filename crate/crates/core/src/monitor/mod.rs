//! The hardware security monitor: a two-state Mealy machine that watches one
//! cycle's bus signals and raises the reset line on any violation.
//!
//! The monitor enforces five rules while execution is live:
//!
//! * [`Rule::ProtectedWrite`] — code outside the trusted region must not
//!   modify the executable region, the pointer register, the status flag, or
//!   the vector table (core or DMA writes alike).
//! * [`Rule::IllegalExec`] — the program counter must stay inside the
//!   executable region or the trusted region.
//! * [`Rule::PreemptTrusted`] — interrupts and DMA are forbidden while the
//!   trusted code is executing.
//! * [`Rule::KeyRead`] — only trusted code may read the key region.
//! * [`Rule::SideEntry`] — the trusted region is entered only through its
//!   first address.
//!
//! [`check`] re-verifies these properties by exhaustive enumeration over an
//! equivalence-class partition of the input space.

pub mod check;

use serde::{Deserialize, Serialize};

use crate::layout::{Address, MemoryLayout, Region};
use crate::mem::BusSignals;

pub use check::{
    check_properties, default_er_samples, CheckError, CheckOptions, CheckReport, Counterexample,
};

/// FSM state label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Reset,
    Exec,
}

/// Full monitor state: the phase, the Mealy output for the cycle just
/// consumed, and whether the previous cycle executed inside the trusted
/// region (needed for the single-entry rule).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorState {
    pub phase: Phase,
    pub reset_out: bool,
    pub prev_pc_in_tcr: bool,
}

impl MonitorState {
    /// The post-reset state: output held high until execution restarts.
    pub fn reset() -> MonitorState {
        MonitorState {
            phase: Phase::Reset,
            reset_out: true,
            prev_pc_in_tcr: true,
        }
    }
}

/// The fixed regions the monitor compares addresses against. The executable
/// region is not part of the config; it is re-derived from the pointer words
/// every cycle and passed to [`monitor_step`] separately.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub tcr: Region,
    pub ivtr: Region,
    pub ep: Region,
    pub bep: Region,
    pub sf: Region,
    pub kr: Region,
    pub pc_init: Address,
}

impl MonitorConfig {
    pub fn from_layout(layout: &MemoryLayout) -> MonitorConfig {
        MonitorConfig {
            tcr: layout.tcr(),
            ivtr: layout.ivtr(),
            ep: layout.ep(),
            bep: layout.bep(),
            sf: layout.config().sf,
            kr: layout.kr(),
            pc_init: layout.pc_init(),
        }
    }
}

/// The monitor's violation rules, in the order they are evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// Write to a protected region from untrusted code.
    ProtectedWrite,
    /// Execution outside the executable and trusted regions.
    IllegalExec,
    /// Interrupt or DMA while trusted code runs.
    PreemptTrusted,
    /// Key-region read from untrusted context.
    KeyRead,
    /// Trusted region entered somewhere other than its first address.
    SideEntry,
}

impl Rule {
    pub const ALL: [Rule; 5] = [
        Rule::ProtectedWrite,
        Rule::IllegalExec,
        Rule::PreemptTrusted,
        Rule::KeyRead,
        Rule::SideEntry,
    ];

    fn index(self) -> usize {
        match self {
            Rule::ProtectedWrite => 0,
            Rule::IllegalExec => 1,
            Rule::PreemptTrusted => 2,
            Rule::KeyRead => 3,
            Rule::SideEntry => 4,
        }
    }
}

/// Which rules a monitor instance enforces. Production monitors enforce all
/// five; the mutation tests disable one at a time to show each rule is
/// load-bearing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleSet {
    enabled: [bool; 5],
}

impl RuleSet {
    pub fn all() -> RuleSet {
        RuleSet { enabled: [true; 5] }
    }

    pub fn without(rule: Rule) -> RuleSet {
        let mut set = RuleSet::all();
        set.enabled[rule.index()] = false;
        set
    }

    pub fn enabled(&self, rule: Rule) -> bool {
        self.enabled[rule.index()]
    }
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet::all()
    }
}

/// Write-detection predicate: true when the core or the DMA engine is
/// writing to an address inside `region` this cycle.
pub fn mod_mem(sig: &BusSignals, region: &Region) -> bool {
    (sig.wen && region.contains(sig.daddr))
        || (sig.dmaen && sig.dma_wen && region.contains(sig.dmaaddr))
}

/// First violated rule this cycle, if any. Only meaningful in `Exec`.
pub fn violation(
    cfg: &MonitorConfig,
    er: Region,
    sig: &BusSignals,
    prev_pc_in_tcr: bool,
    rules: RuleSet,
) -> Option<Rule> {
    let pc_in_tcr = cfg.tcr.contains(sig.pc);

    if rules.enabled(Rule::ProtectedWrite) && !pc_in_tcr {
        let protected = [&er, &cfg.ep, &cfg.sf, &cfg.ivtr];
        if protected.iter().any(|r| mod_mem(sig, r)) {
            return Some(Rule::ProtectedWrite);
        }
    }
    if rules.enabled(Rule::IllegalExec) && !er.contains(sig.pc) && !pc_in_tcr {
        return Some(Rule::IllegalExec);
    }
    if rules.enabled(Rule::PreemptTrusted) && pc_in_tcr && (sig.irq || sig.dmaen) {
        return Some(Rule::PreemptTrusted);
    }
    if rules.enabled(Rule::KeyRead) && !pc_in_tcr {
        let core_read = sig.ren && cfg.kr.contains(sig.daddr);
        let dma_read = sig.dmaen && !sig.dma_wen && cfg.kr.contains(sig.dmaaddr);
        if core_read || dma_read {
            return Some(Rule::KeyRead);
        }
    }
    if rules.enabled(Rule::SideEntry) && pc_in_tcr && !prev_pc_in_tcr && sig.pc != cfg.tcr.min {
        return Some(Rule::SideEntry);
    }
    None
}

/// One transition of the monitor FSM with the production rule set.
pub fn monitor_step(
    st: MonitorState,
    cfg: &MonitorConfig,
    er: Region,
    sig: &BusSignals,
) -> MonitorState {
    monitor_step_with_rules(st, cfg, er, sig, RuleSet::all())
}

/// One transition with an explicit rule set (mutation-testing hook).
pub fn monitor_step_with_rules(
    st: MonitorState,
    cfg: &MonitorConfig,
    er: Region,
    sig: &BusSignals,
    rules: RuleSet,
) -> MonitorState {
    match st.phase {
        Phase::Reset => {
            if sig.pc == cfg.pc_init {
                MonitorState {
                    phase: Phase::Exec,
                    reset_out: false,
                    prev_pc_in_tcr: cfg.tcr.contains(sig.pc),
                }
            } else {
                MonitorState {
                    phase: Phase::Reset,
                    reset_out: true,
                    prev_pc_in_tcr: st.prev_pc_in_tcr,
                }
            }
        }
        Phase::Exec => {
            if violation(cfg, er, sig, st.prev_pc_in_tcr, rules).is_some() {
                MonitorState {
                    phase: Phase::Reset,
                    reset_out: true,
                    prev_pc_in_tcr: cfg.tcr.contains(sig.pc),
                }
            } else {
                MonitorState {
                    phase: Phase::Exec,
                    reset_out: false,
                    prev_pc_in_tcr: cfg.tcr.contains(sig.pc),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::MemoryLayout;
    use proptest::prelude::*;

    fn cfg() -> MonitorConfig {
        MonitorConfig::from_layout(&MemoryLayout::default_layout())
    }

    fn er() -> Region {
        Region::raw(0x4000, 0x42dd) // a 734-byte binary wrapped in its image
    }

    fn exec_state() -> MonitorState {
        MonitorState {
            phase: Phase::Exec,
            reset_out: false,
            prev_pc_in_tcr: false,
        }
    }

    #[test]
    fn mod_mem_core_and_dma_branches() {
        let region = er();
        let sig = BusSignals::core_write(0x4000, region.min);
        assert!(mod_mem(&sig, &region));

        let idle = BusSignals::exec(0x4000);
        for r in [er(), cfg().ep, cfg().sf, cfg().ivtr] {
            assert!(!mod_mem(&idle, &r));
        }

        let dma = BusSignals::dma_write(0x4000, cfg().ep.min);
        assert!(mod_mem(&dma, &cfg().ep));
        // A DMA read is not a write.
        let dma_read = BusSignals::dma_read(0x4000, cfg().ep.min);
        assert!(!mod_mem(&dma_read, &cfg().ep));
    }

    #[test]
    fn exec_in_dmem_resets() {
        let sig = BusSignals::exec(0x0300);
        let next = monitor_step(exec_state(), &cfg(), er(), &sig);
        assert!(next.reset_out);
        assert_eq!(next.phase, Phase::Reset);
    }

    #[test]
    fn unprotected_write_from_er_allowed() {
        let sig = BusSignals::core_write(er().min, 0x9000);
        let next = monitor_step(exec_state(), &cfg(), er(), &sig);
        assert!(!next.reset_out);
        assert_eq!(next.phase, Phase::Exec);
    }

    #[test]
    fn trusted_code_may_update_pointer_register() {
        let mut st = exec_state();
        st.prev_pc_in_tcr = true;
        let sig = BusSignals::core_write(cfg().tcr.min + 4, cfg().ep.min);
        let next = monitor_step(st, &cfg(), er(), &sig);
        assert!(!next.reset_out);
    }

    #[test]
    fn mid_trusted_region_jump_resets() {
        let sig = BusSignals::exec(cfg().tcr.min + 2);
        let next = monitor_step(exec_state(), &cfg(), er(), &sig);
        assert!(next.reset_out);
    }

    #[test]
    fn entry_at_first_address_allowed() {
        let sig = BusSignals::exec(cfg().tcr.min);
        let next = monitor_step(exec_state(), &cfg(), er(), &sig);
        assert!(!next.reset_out);
        assert!(next.prev_pc_in_tcr);
    }

    #[test]
    fn recovery_reaches_exec_in_one_step() {
        let sig = BusSignals::exec(cfg().pc_init);
        let next = monitor_step(MonitorState::reset(), &cfg(), er(), &sig);
        assert_eq!(next.phase, Phase::Exec);
        assert!(!next.reset_out);
    }

    #[test]
    fn reset_holds_until_boot_address() {
        let sig = BusSignals::exec(0x4000);
        let next = monitor_step(MonitorState::reset(), &cfg(), er(), &sig);
        assert_eq!(next.phase, Phase::Reset);
        assert!(next.reset_out);
    }

    #[test]
    fn irq_during_trusted_execution_resets() {
        let mut st = exec_state();
        st.prev_pc_in_tcr = true;
        let sig = BusSignals::interrupt(cfg().tcr.min + 8);
        assert!(monitor_step(st, &cfg(), er(), &sig).reset_out);
    }

    #[test]
    fn key_read_from_untrusted_context_resets() {
        let sig = BusSignals::core_read(er().min, cfg().kr.min);
        assert!(monitor_step(exec_state(), &cfg(), er(), &sig).reset_out);
        let dma = BusSignals::dma_read(er().min, cfg().kr.min + 3);
        assert!(monitor_step(exec_state(), &cfg(), er(), &dma).reset_out);
    }

    proptest! {
        // Pure function: identical inputs give identical outputs.
        #[test]
        fn deterministic(pc in any::<u16>(), daddr in any::<u16>(), wen in any::<bool>()) {
            let sig = BusSignals { wen, daddr, ..BusSignals::exec(pc) };
            let a = monitor_step(exec_state(), &cfg(), er(), &sig);
            let b = monitor_step(exec_state(), &cfg(), er(), &sig);
            prop_assert_eq!(a, b);
        }

        // Growing the executable region never turns a write-rule reset into
        // a pass: writes inside the old region stay inside the new one.
        #[test]
        fn monotone_protection(
            daddr in 0x4000u16..0xffd6,
            grow_lo in 0u16..16,
            grow_hi in 0u16..16,
        ) {
            let small = er();
            let big = Region::raw(small.min.saturating_sub(grow_lo).max(0x4000),
                                  (small.max + grow_hi).min(0xffd6));
            let sig = BusSignals::core_write(small.min, daddr);
            let fired_small = violation(&cfg(), small, &sig, false, RuleSet::all())
                == Some(Rule::ProtectedWrite) && small.contains(daddr);
            if fired_small {
                let v = violation(&cfg(), big, &sig, false, RuleSet::all());
                prop_assert_eq!(v, Some(Rule::ProtectedWrite));
            }
        }
    }
}
