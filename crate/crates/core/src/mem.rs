//! The simulated MCU: a 64 KiB byte-addressable memory, a register file, and
//! a program counter, with every bus cycle screened by the hardware monitor
//! before it takes effect.
//!
//! The machine is an exclusively-owned value and fully deterministic. Writes
//! are modeled one octet per cycle (multi-byte stores are sequences of octet
//! events); flash is treated as plain writable memory, while the trusted code
//! and key regions are ROM and silently ignore writes.

use serde::{Deserialize, Serialize};

use crate::image::{self, SoftwareImage};
use crate::layout::{Address, LayoutError, MemoryLayout, Region};
use crate::monitor::{self, MonitorConfig, MonitorState};

/// One cycle's monitor inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BusSignals {
    /// Address of the instruction being fetched/executed this cycle.
    pub pc: Address,
    /// Core write strobe.
    pub wen: bool,
    /// Core data address (valid when `wen` or `ren`).
    pub daddr: Address,
    /// Core read strobe. At most one of `wen`/`ren` is set per cycle.
    pub ren: bool,
    /// DMA active this cycle (may coincide with core activity).
    pub dmaen: bool,
    /// DMA address (valid when `dmaen`).
    pub dmaaddr: Address,
    /// DMA direction: set for a DMA write, clear for a DMA read.
    pub dma_wen: bool,
    /// Interrupt request line.
    pub irq: bool,
}

impl BusSignals {
    /// A plain instruction fetch with no data activity.
    pub fn exec(pc: Address) -> BusSignals {
        BusSignals {
            pc,
            wen: false,
            daddr: 0,
            ren: false,
            dmaen: false,
            dmaaddr: 0,
            dma_wen: false,
            irq: false,
        }
    }

    pub fn core_write(pc: Address, daddr: Address) -> BusSignals {
        BusSignals {
            wen: true,
            daddr,
            ..BusSignals::exec(pc)
        }
    }

    pub fn core_read(pc: Address, daddr: Address) -> BusSignals {
        BusSignals {
            ren: true,
            daddr,
            ..BusSignals::exec(pc)
        }
    }

    pub fn dma_write(pc: Address, dmaaddr: Address) -> BusSignals {
        BusSignals {
            dmaen: true,
            dma_wen: true,
            dmaaddr,
            ..BusSignals::exec(pc)
        }
    }

    pub fn dma_read(pc: Address, dmaaddr: Address) -> BusSignals {
        BusSignals {
            dmaen: true,
            dmaaddr,
            ..BusSignals::exec(pc)
        }
    }

    pub fn interrupt(pc: Address) -> BusSignals {
        BusSignals {
            irq: true,
            ..BusSignals::exec(pc)
        }
    }
}

/// A memory-visible effect requested this cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusEvent {
    CoreWrite { addr: Address, data: u8 },
    CoreRead { addr: Address },
    CoreExec { addr: Address },
    DmaWrite { addr: Address, data: u8 },
    DmaRead { addr: Address },
    Interrupt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepOutcome {
    /// The monitor allowed the cycle and the event took effect.
    Applied,
    /// The monitor fired: the event did not land, data memory was cleared,
    /// and the core restarted from the reset vector.
    Reset,
}

/// Counters exposed to scenario reports.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MachineStats {
    pub resets: u64,
    pub installs_started: u64,
    pub installs_completed: u64,
    pub auth_accepts: u64,
    pub auth_rejects: u64,
}

/// The simulated device.
#[derive(Clone)]
pub struct Machine {
    mem: Vec<u8>,
    layout: MemoryLayout,
    monitor_cfg: MonitorConfig,
    monitor: MonitorState,
    pc: Address,
    regs: [u16; 16],
    ticks: u64,
    stats: MachineStats,
    fault_countdown: Option<u64>,
    install_fault: Option<u64>,
}

impl Machine {
    /// Build a machine with `rom` in the trusted code region, `key` in the
    /// key region, and `app` installed in the first staging slot with the
    /// pointer registers and reset vector set up accordingly.
    pub fn new(
        layout: MemoryLayout,
        rom: &[u8],
        app: &SoftwareImage,
        key: [u8; 32],
    ) -> Result<Machine, LayoutError> {
        if rom.len() > layout.tcr().len() {
            return Err(LayoutError::RomTooLarge {
                actual: rom.len(),
                capacity: layout.tcr().len(),
            });
        }
        if layout.kr().len() < key.len() {
            return Err(LayoutError::BadSize {
                name: "kr",
                expected: key.len(),
                actual: layout.kr().len(),
            });
        }
        if app.bin.len() < 4 {
            return Err(LayoutError::EmptyApp);
        }
        let app_bytes = app
            .serialize()
            .map_err(|_| LayoutError::AppTooLarge {
                actual: app.len(),
                capacity: u16::MAX as usize,
            })?;
        let (slot_a, _) = layout.slots();
        if app_bytes.len() > slot_a.len() {
            return Err(LayoutError::AppTooLarge {
                actual: app_bytes.len(),
                capacity: slot_a.len(),
            });
        }

        let mut mem = vec![0u8; 0x1_0000];
        mem[layout.tcr().min as usize..][..rom.len()].copy_from_slice(rom);
        mem[layout.kr().min as usize..][..key.len()].copy_from_slice(&key);

        let er = Region {
            min: slot_a.min,
            max: slot_a.min + (app_bytes.len() - 1) as Address,
        };
        mem[er.min as usize..=er.max as usize].copy_from_slice(&app_bytes);

        let ep = layout.ep().min as usize;
        mem[ep..ep + 2].copy_from_slice(&er.min.to_le_bytes());
        mem[ep + 2..ep + 4].copy_from_slice(&er.max.to_le_bytes());
        let bep = layout.bep().min as usize;
        mem[bep..bep + 2].copy_from_slice(&er.min.to_le_bytes());
        mem[bep + 2..bep + 4].copy_from_slice(&er.max.to_le_bytes());
        mem[layout.sf() as usize] = 0;

        // Application vectors fill the table; the reset vector (last slot)
        // permanently targets the trusted entry point so recovery code always
        // runs first after a reset.
        let ivtr = layout.ivtr().min as usize;
        mem[ivtr..ivtr + image::RESET_VECTOR_SLOT * 2]
            .copy_from_slice(&app.ivt[..image::RESET_VECTOR_SLOT * 2]);
        mem[ivtr + image::RESET_VECTOR_SLOT * 2..ivtr + 32]
            .copy_from_slice(&layout.pc_init().to_le_bytes());

        let monitor_cfg = MonitorConfig::from_layout(&layout);
        Ok(Machine {
            mem,
            pc: layout.pc_init(),
            layout,
            monitor_cfg,
            monitor: MonitorState::reset(),
            regs: [0; 16],
            ticks: 0,
            stats: MachineStats::default(),
            fault_countdown: None,
            install_fault: None,
        })
    }

    pub fn layout(&self) -> &MemoryLayout {
        &self.layout
    }

    pub fn monitor_config(&self) -> &MonitorConfig {
        &self.monitor_cfg
    }

    pub fn monitor_state(&self) -> MonitorState {
        self.monitor
    }

    pub fn pc(&self) -> Address {
        self.pc
    }

    pub fn regs(&self) -> &[u16; 16] {
        &self.regs
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn stats(&self) -> &MachineStats {
        &self.stats
    }

    pub(crate) fn stats_mut(&mut self) -> &mut MachineStats {
        &mut self.stats
    }

    pub(crate) fn set_regs(&mut self, regs: [u16; 16]) {
        self.regs = regs;
    }

    /// Arm a fault: the `n`-th subsequent write cycle (0-based) triggers a
    /// hard reset instead of landing. Used by the crash-recovery sweeps.
    pub fn arm_write_fault(&mut self, n: u64) {
        self.fault_countdown = Some(n);
    }

    pub fn fault_armed(&self) -> bool {
        self.fault_countdown.is_some()
    }

    /// Schedule a write fault to be armed when the next install run starts,
    /// counting only that run's own writes.
    pub fn schedule_install_fault(&mut self, write_index: u64) {
        self.install_fault = Some(write_index);
    }

    pub(crate) fn take_install_fault(&mut self) -> Option<u64> {
        self.install_fault.take()
    }

    /// Feed one cycle through the monitor and, if it passes, apply the event.
    pub fn step(&mut self, signals: BusSignals, event: Option<BusEvent>) -> StepOutcome {
        self.ticks += 1;

        if matches!(
            event,
            Some(BusEvent::CoreWrite { .. }) | Some(BusEvent::DmaWrite { .. })
        ) {
            match self.fault_countdown {
                Some(0) => {
                    self.fault_countdown = None;
                    self.hard_reset();
                    return StepOutcome::Reset;
                }
                Some(n) => self.fault_countdown = Some(n - 1),
                None => {}
            }
        }

        let er = self.er_region();
        let next = monitor::monitor_step(self.monitor, &self.monitor_cfg, er, &signals);
        self.monitor = next;
        if next.reset_out {
            self.reset_from_vector();
            return StepOutcome::Reset;
        }
        if let Some(ev) = event {
            self.apply_event(ev);
        }
        StepOutcome::Applied
    }

    pub fn step_exec(&mut self, pc: Address) -> StepOutcome {
        self.step(BusSignals::exec(pc), Some(BusEvent::CoreExec { addr: pc }))
    }

    pub fn step_core_write(&mut self, addr: Address, data: u8) -> StepOutcome {
        self.step(
            BusSignals::core_write(self.pc, addr),
            Some(BusEvent::CoreWrite { addr, data }),
        )
    }

    pub fn step_core_read(&mut self, addr: Address) -> StepOutcome {
        self.step(
            BusSignals::core_read(self.pc, addr),
            Some(BusEvent::CoreRead { addr }),
        )
    }

    pub fn step_dma_write(&mut self, addr: Address, data: u8) -> StepOutcome {
        self.step(
            BusSignals::dma_write(self.pc, addr),
            Some(BusEvent::DmaWrite { addr, data }),
        )
    }

    pub fn step_dma_read(&mut self, addr: Address) -> StepOutcome {
        self.step(
            BusSignals::dma_read(self.pc, addr),
            Some(BusEvent::DmaRead { addr }),
        )
    }

    pub fn step_interrupt(&mut self) -> StepOutcome {
        self.step(BusSignals::interrupt(self.pc), Some(BusEvent::Interrupt))
    }

    fn apply_event(&mut self, event: BusEvent) {
        match event {
            BusEvent::CoreWrite { addr, data } | BusEvent::DmaWrite { addr, data } => {
                if !self.layout.is_rom(addr) {
                    self.mem[addr as usize] = data;
                }
            }
            BusEvent::CoreRead { .. } | BusEvent::DmaRead { .. } => {}
            BusEvent::CoreExec { addr } => self.pc = addr,
            BusEvent::Interrupt => {
                // Vector through the first table slot.
                self.pc = self.read_word(self.layout.ivtr().min);
            }
        }
    }

    /// Power-cycle the device: data memory and registers are lost, program
    /// memory and the pointer registers persist, execution restarts at the
    /// trusted entry point.
    pub fn hard_reset(&mut self) {
        self.clear_volatile();
        self.pc = self.layout.pc_init();
        self.monitor = MonitorState::reset();
        self.stats.resets += 1;
    }

    fn reset_from_vector(&mut self) {
        let vector = self.layout.ivtr().max - 1;
        let target = self.read_word(vector);
        self.clear_volatile();
        self.pc = target;
        self.stats.resets += 1;
    }

    fn clear_volatile(&mut self) {
        let dmem = self.layout.dmem();
        self.mem[dmem.min as usize..=dmem.max as usize].fill(0);
        self.regs = [0; 16];
    }

    /// Re-enter execution after a reset: the boot fetch at the reset target.
    pub fn boot_fetch(&mut self) -> StepOutcome {
        self.step_exec(self.layout.pc_init())
    }

    pub fn read_byte(&self, addr: Address) -> u8 {
        self.mem[addr as usize]
    }

    pub fn read_word(&self, addr: Address) -> u16 {
        u16::from_le_bytes([self.mem[addr as usize], self.mem[addr as usize + 1]])
    }

    pub fn read_region(&self, region: Region) -> &[u8] {
        if region.is_empty() {
            &[]
        } else {
            &self.mem[region.min as usize..=region.max as usize]
        }
    }

    /// Direct memory poke bypassing the monitor. Construction-time and
    /// test-harness use only; protocol actors always go through `step`.
    pub fn poke(&mut self, addr: Address, data: u8) {
        self.mem[addr as usize] = data;
    }

    pub fn mem_snapshot(&self) -> Vec<u8> {
        self.mem.clone()
    }

    /// The executable region as currently defined by the pointer words.
    pub fn er_region(&self) -> Region {
        let ep = self.layout.ep().min;
        Region::raw(self.read_word(ep), self.read_word(ep + 2))
    }

    /// The staging region as currently defined by the buffer pointer words.
    pub fn bep_region(&self) -> Region {
        let bep = self.layout.bep().min;
        Region::raw(self.read_word(bep), self.read_word(bep + 2))
    }

    pub fn sf(&self) -> u8 {
        self.mem[self.layout.sf() as usize]
    }

    pub fn atr_bytes(&self) -> [u8; 32] {
        let atr = self.layout.atr().min as usize;
        self.mem[atr..atr + 32].try_into().unwrap()
    }

    pub fn atr_nonzero(&self) -> bool {
        self.atr_bytes().iter().any(|&b| b != 0)
    }

    pub fn er_bytes(&self) -> &[u8] {
        self.read_region(self.er_region())
    }

    pub fn er_header(&self) -> Result<image::Header, image::MalformedImage> {
        image::Header::parse(self.er_bytes())
    }

    /// Digest of the bytes the monitor currently protects: the executable
    /// region, both pointer registers, the status flag, and the vector table.
    pub fn protected_digest(&self) -> [u8; 32] {
        let mut h = crate::crypto::Sha256::new();
        h.update(self.er_bytes());
        h.update(self.read_region(self.layout.ep()));
        h.update(self.read_region(self.layout.bep()));
        h.update(&[self.sf()]);
        h.update(self.read_region(self.layout.ivtr()));
        h.finalize()
    }

    pub fn er_digest(&self) -> [u8; 32] {
        crate::crypto::sha256(self.er_bytes())
    }
}

impl std::fmt::Debug for Machine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Machine")
            .field("pc", &format_args!("{:#06x}", self.pc))
            .field("monitor", &self.monitor)
            .field("er", &self.er_region())
            .field("sf", &self.sf())
            .field("ticks", &self.ticks)
            .field("stats", &self.stats)
            .finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::make_app_bin;
    use proptest::prelude::*;

    pub(crate) fn test_app(bin_len: usize, version: u16) -> SoftwareImage {
        SoftwareImage::new(version, [0x11; 16], make_app_bin(bin_len, 7), [0x22; 32])
    }

    pub(crate) fn boot_machine(bin_len: usize) -> Machine {
        let layout = MemoryLayout::default_layout();
        let mut m = Machine::new(layout, &[0x5a; 64], &test_app(bin_len, 1), [0x42; 32]).unwrap();
        assert_eq!(m.boot_fetch(), StepOutcome::Applied);
        m
    }

    #[test]
    fn new_machine_derives_er_from_app() {
        let m = boot_machine(250);
        let er = m.er_region();
        assert_eq!(er.len(), 302); // 20-byte header + 250 + 32-byte IVT
        let header = m.er_header().unwrap();
        assert_eq!(header.len, 302);
        assert_eq!(header.len as usize - crate::image::MIN_IMAGE_LEN, 250);
        assert_eq!(header.version, 1);
    }

    #[test]
    fn empty_app_rejected() {
        let layout = MemoryLayout::default_layout();
        let app = SoftwareImage::new(1, [0; 16], vec![], [0; 32]);
        assert_eq!(
            Machine::new(layout, &[], &app, [0; 32]).unwrap_err(),
            LayoutError::EmptyApp
        );
    }

    #[test]
    fn oversized_app_rejected() {
        let layout = MemoryLayout::default_layout();
        let (slot_a, _) = layout.slots();
        let app = test_app(slot_a.len(), 1); // header+IVT push it past the slot
        assert!(matches!(
            Machine::new(layout, &[], &app, [0; 32]).unwrap_err(),
            LayoutError::AppTooLarge { .. }
        ));
    }

    #[test]
    fn oversized_rom_rejected() {
        let layout = MemoryLayout::default_layout();
        let rom = vec![0u8; layout.tcr().len() + 1];
        assert!(matches!(
            Machine::new(layout, &rom, &test_app(16, 1), [0; 32]).unwrap_err(),
            LayoutError::RomTooLarge { .. }
        ));
    }

    #[test]
    fn write_to_free_pmem_applies() {
        let mut m = boot_machine(64);
        let er = m.er_region();
        m.step_exec(er.min); // run from the app
        let target = er.max + 0x100;
        assert_eq!(m.step_core_write(target, 0xab), StepOutcome::Applied);
        assert_eq!(m.read_byte(target), 0xab);
    }

    #[test]
    fn write_into_er_resets_and_leaves_byte() {
        let mut m = boot_machine(64);
        let er = m.er_region();
        m.step_exec(er.min);
        let before = m.read_byte(er.min + 5);
        assert_eq!(m.step_core_write(er.min + 5, before ^ 0xff), StepOutcome::Reset);
        assert_eq!(m.read_byte(er.min + 5), before);
        assert_eq!(m.pc(), m.layout().pc_init());
    }

    #[test]
    fn dma_write_to_ep_resets() {
        let mut m = boot_machine(64);
        let er = m.er_region();
        m.step_exec(er.min);
        let ep = m.layout().ep().min;
        let before = m.read_word(ep);
        assert_eq!(m.step_dma_write(ep, 0x00), StepOutcome::Reset);
        assert_eq!(m.read_word(ep), before);
    }

    #[test]
    fn hard_reset_preserves_sf_clears_atr() {
        let mut m = boot_machine(64);
        // SF is trusted-write-only; emulate the trusted path directly.
        let sf = m.layout().sf();
        m.poke(sf, 1);
        let atr = m.layout().atr().min;
        m.poke(atr, 0xcc);
        m.hard_reset();
        assert_eq!(m.sf(), 1);
        assert_eq!(m.atr_bytes(), [0u8; 32]);
        assert_eq!(m.pc(), m.layout().pc_init());
    }

    #[test]
    fn hard_reset_idempotent_on_pmem() {
        let mut m = boot_machine(64);
        m.hard_reset();
        let snap1 = m.mem_snapshot();
        m.hard_reset();
        assert_eq!(m.mem_snapshot(), snap1);
    }

    #[test]
    fn rom_ignores_writes() {
        let mut m = boot_machine(64);
        let tcr_entry = m.layout().tcr().min;
        m.step_exec(tcr_entry); // trusted context may write anywhere
        let kr = m.layout().kr().min;
        let before = m.read_byte(kr);
        assert_eq!(m.step_core_write(kr, before ^ 0xff), StepOutcome::Applied);
        assert_eq!(m.read_byte(kr), before);
    }

    #[test]
    fn write_fault_fires_once() {
        let mut m = boot_machine(64);
        let er = m.er_region();
        m.step_exec(er.min);
        let target = er.max + 0x80;
        m.arm_write_fault(1);
        assert_eq!(m.step_core_write(target, 1), StepOutcome::Applied);
        assert_eq!(m.step_core_write(target + 1, 2), StepOutcome::Reset);
        assert!(!m.fault_armed());
        assert_eq!(m.read_byte(target + 1), 0);
    }

    fn arbitrary_signals() -> impl Strategy<Value = (BusSignals, Option<BusEvent>)> {
        (
            any::<u16>(),
            any::<u16>(),
            any::<u16>(),
            0u8..5,
            any::<u8>(),
        )
            .prop_map(|(pc, a, b, kind, data)| {
                let (signals, event) = match kind {
                    0 => (
                        BusSignals::core_write(pc, a),
                        BusEvent::CoreWrite { addr: a, data },
                    ),
                    1 => (BusSignals::core_read(pc, a), BusEvent::CoreRead { addr: a }),
                    2 => (BusSignals::exec(pc), BusEvent::CoreExec { addr: pc }),
                    3 => (
                        BusSignals::dma_write(pc, b),
                        BusEvent::DmaWrite { addr: b, data },
                    ),
                    _ => (BusSignals::dma_read(pc, b), BusEvent::DmaRead { addr: b }),
                };
                (signals, Some(event))
            })
    }

    proptest! {
        // Reset outcomes must leave persistent memory untouched and clear
        // data memory; applied writes must change at most their target byte.
        #[test]
        fn persistence_split_holds(
            steps in proptest::collection::vec(arbitrary_signals(), 1..40),
        ) {
            let mut m = boot_machine(64);
            let er = m.er_region();
            m.step_exec(er.min);
            for (signals, event) in steps {
                let before = m.mem_snapshot();
                let outcome = m.step(signals, event);
                let after = m.mem_snapshot();
                let dmem = m.layout().dmem();
                match outcome {
                    StepOutcome::Reset => {
                        for addr in 0..=0xffffu32 {
                            let addr = addr as u16;
                            if dmem.contains(addr) {
                                prop_assert_eq!(after[addr as usize], 0);
                            } else {
                                prop_assert_eq!(after[addr as usize], before[addr as usize]);
                            }
                        }
                    }
                    StepOutcome::Applied => {
                        let target = match event {
                            Some(BusEvent::CoreWrite { addr, .. })
                            | Some(BusEvent::DmaWrite { addr, .. }) => Some(addr),
                            _ => None,
                        };
                        for addr in 0..=0xffffu32 {
                            let addr = addr as u16;
                            if Some(addr) != target {
                                prop_assert_eq!(after[addr as usize], before[addr as usize]);
                            }
                        }
                    }
                }
            }
        }

        // After any applied step the monitor's view of the executable region
        // equals the words stored in the pointer register.
        #[test]
        fn er_tracks_pointer_words(
            steps in proptest::collection::vec(arbitrary_signals(), 1..40),
        ) {
            let mut m = boot_machine(64);
            let er = m.er_region();
            m.step_exec(er.min);
            for (signals, event) in steps {
                let _ = m.step(signals, event);
                let ep = m.layout().ep().min;
                let derived = m.er_region();
                prop_assert_eq!(derived.min, m.read_word(ep));
                prop_assert_eq!(derived.max, m.read_word(ep + 2));
            }
        }
    }
}
