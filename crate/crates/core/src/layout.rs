//! Memory-map description: named regions, the JSON layout config, and the
//! validated layout a machine is built from.
//!
//! The address space is the 16-bit byte-addressable map of a small MCU. The
//! protected bookkeeping registers (`EP`, `bEP`, `SF`) live at the top of
//! program memory, the interrupt vector table above them, and the trusted
//! code plus key in ROM at the bottom. The 32-byte token buffer `ATR` is
//! ordinary data memory and is lost on reset.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A byte address in the 16-bit space.
pub type Address = u16;

/// An inclusive byte range `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub min: Address,
    pub max: Address,
}

impl Region {
    /// A validated region; fails if the bounds are inverted.
    pub fn new(min: Address, max: Address) -> Result<Region, LayoutError> {
        if min > max {
            return Err(LayoutError::InvertedBounds { min, max });
        }
        Ok(Region { min, max })
    }

    /// A region taken verbatim from untrusted pointer words. Inverted bounds
    /// are representable and behave as an empty region.
    pub fn raw(min: Address, max: Address) -> Region {
        Region { min, max }
    }

    pub fn contains(&self, addr: Address) -> bool {
        self.min <= addr && addr <= self.max
    }

    pub fn contains_region(&self, other: &Region) -> bool {
        self.min <= other.min && other.max <= self.max && other.min <= other.max
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.min <= other.max && other.min <= self.max
    }

    pub fn len(&self) -> usize {
        if self.min > self.max {
            0
        } else {
            (self.max - self.min) as usize + 1
        }
    }

    pub fn is_empty(&self) -> bool {
        self.min > self.max
    }

    pub fn iter(&self) -> impl Iterator<Item = Address> {
        self.min..=self.max
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("region bounds inverted: min {min:#06x} > max {max:#06x}")]
    InvertedBounds { min: Address, max: Address },
    #[error("region {name} has {actual} bytes, expected {expected}")]
    BadSize {
        name: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("regions {a} and {b} overlap")]
    Overlap { a: &'static str, b: &'static str },
    #[error("region {inner} must lie inside {outer}")]
    NotContained {
        inner: &'static str,
        outer: &'static str,
    },
    #[error("{name} registers must sit above the application area of program memory")]
    ReservedNotAtTail { name: &'static str },
    #[error("ROM image of {actual} bytes exceeds the {capacity}-byte trusted code region")]
    RomTooLarge { actual: usize, capacity: usize },
    #[error("application image of {actual} bytes exceeds the {capacity}-byte slot")]
    AppTooLarge { actual: usize, capacity: usize },
    #[error("application binary is empty or lacks its entry words")]
    EmptyApp,
}

/// The JSON-facing layout description: one `{min, max}` object per region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub dmem: Region,
    pub pmem: Region,
    pub ivtr: Region,
    pub tcr: Region,
    pub ep: Region,
    pub bep: Region,
    pub sf: Region,
    pub atr: Region,
    pub kr: Region,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            tcr: Region { min: 0x0000, max: 0x01ff },
            dmem: Region { min: 0x0200, max: 0x1fff },
            atr: Region { min: 0x0200, max: 0x021f },
            kr: Region { min: 0x2000, max: 0x201f },
            pmem: Region { min: 0x4000, max: 0xffdf },
            sf: Region { min: 0xffd7, max: 0xffd7 },
            ep: Region { min: 0xffd8, max: 0xffdb },
            bep: Region { min: 0xffdc, max: 0xffdf },
            ivtr: Region { min: 0xffe0, max: 0xffff },
        }
    }
}

impl LayoutConfig {
    pub fn from_json(json: &str) -> Result<LayoutConfig, serde_json::Error> {
        serde_json::from_str(json)
    }

    pub fn validate(&self) -> Result<MemoryLayout, LayoutError> {
        MemoryLayout::new(self.clone())
    }
}

/// A validated memory layout.
///
/// Beyond the raw regions this fixes the derived facts the rest of the
/// simulator relies on: the application area of program memory, its two
/// staging slots, and the boot address.
#[derive(Debug, Clone)]
pub struct MemoryLayout {
    cfg: LayoutConfig,
    app_area: Region,
}

impl MemoryLayout {
    pub fn new(cfg: LayoutConfig) -> Result<MemoryLayout, LayoutError> {
        let named: [(&'static str, Region); 9] = [
            ("dmem", cfg.dmem),
            ("pmem", cfg.pmem),
            ("ivtr", cfg.ivtr),
            ("tcr", cfg.tcr),
            ("ep", cfg.ep),
            ("bep", cfg.bep),
            ("sf", cfg.sf),
            ("atr", cfg.atr),
            ("kr", cfg.kr),
        ];
        for (_, r) in &named {
            Region::new(r.min, r.max)?;
        }

        for (name, region, expected) in [
            ("atr", cfg.atr, 32usize),
            ("ep", cfg.ep, 4),
            ("bep", cfg.bep, 4),
            ("sf", cfg.sf, 1),
            ("ivtr", cfg.ivtr, 32),
        ] {
            if region.len() != expected {
                return Err(LayoutError::BadSize {
                    name,
                    expected,
                    actual: region.len(),
                });
            }
        }

        // The protected register set must be pairwise disjoint.
        let protected: [(&'static str, Region); 7] = [
            ("tcr", cfg.tcr),
            ("ivtr", cfg.ivtr),
            ("ep", cfg.ep),
            ("bep", cfg.bep),
            ("sf", cfg.sf),
            ("kr", cfg.kr),
            ("atr", cfg.atr),
        ];
        for (i, (a_name, a)) in protected.iter().enumerate() {
            for (b_name, b) in &protected[i + 1..] {
                if a.overlaps(b) {
                    return Err(LayoutError::Overlap { a: a_name, b: b_name });
                }
            }
        }

        if cfg.dmem.overlaps(&cfg.pmem) {
            return Err(LayoutError::Overlap { a: "dmem", b: "pmem" });
        }
        // ROM (trusted code and key) sits outside both writable memories.
        for (name, rom) in [("tcr", cfg.tcr), ("kr", cfg.kr)] {
            if rom.overlaps(&cfg.pmem) {
                return Err(LayoutError::Overlap { a: name, b: "pmem" });
            }
            if rom.overlaps(&cfg.dmem) {
                return Err(LayoutError::Overlap { a: name, b: "dmem" });
            }
        }
        if cfg.ivtr.overlaps(&cfg.dmem) {
            return Err(LayoutError::Overlap { a: "ivtr", b: "dmem" });
        }
        if !cfg.dmem.contains_region(&cfg.atr) {
            return Err(LayoutError::NotContained { inner: "atr", outer: "dmem" });
        }
        for (name, r) in [("ep", cfg.ep), ("bep", cfg.bep), ("sf", cfg.sf)] {
            if !cfg.pmem.contains_region(&r) {
                return Err(LayoutError::NotContained { inner: name, outer: "pmem" });
            }
        }

        // The reserved registers pack the top of program memory; everything
        // below them is the application area.
        let reserved_min = cfg.sf.min.min(cfg.ep.min).min(cfg.bep.min);
        if reserved_min <= cfg.pmem.min {
            return Err(LayoutError::ReservedNotAtTail { name: "sf/ep/bep" });
        }
        let app_area = Region {
            min: cfg.pmem.min,
            max: reserved_min - 1,
        };

        Ok(MemoryLayout { cfg, app_area })
    }

    pub fn default_layout() -> MemoryLayout {
        LayoutConfig::default()
            .validate()
            .expect("default layout is valid")
    }

    pub fn config(&self) -> &LayoutConfig {
        &self.cfg
    }

    pub fn dmem(&self) -> Region {
        self.cfg.dmem
    }
    pub fn pmem(&self) -> Region {
        self.cfg.pmem
    }
    pub fn ivtr(&self) -> Region {
        self.cfg.ivtr
    }
    pub fn tcr(&self) -> Region {
        self.cfg.tcr
    }
    pub fn ep(&self) -> Region {
        self.cfg.ep
    }
    pub fn bep(&self) -> Region {
        self.cfg.bep
    }
    pub fn sf(&self) -> Address {
        self.cfg.sf.min
    }
    pub fn atr(&self) -> Region {
        self.cfg.atr
    }
    pub fn kr(&self) -> Region {
        self.cfg.kr
    }

    /// Where execution starts after a reset: the trusted entry point.
    pub fn pc_init(&self) -> Address {
        self.cfg.tcr.min
    }

    /// Program memory available to application images.
    pub fn app_area(&self) -> Region {
        self.app_area
    }

    /// The two staging slots the application area is split into, so an
    /// incoming image never overwrites the running one.
    pub fn slots(&self) -> (Region, Region) {
        let len = self.app_area.len();
        let a_max = self.app_area.min + (len / 2) as Address - 1;
        (
            Region { min: self.app_area.min, max: a_max },
            Region { min: a_max + 1, max: self.app_area.max },
        )
    }

    /// Bytes of storage reserved for the update machinery
    /// (token buffer + both pointer registers + status flag).
    pub fn reserved_bytes(&self) -> usize {
        self.cfg.atr.len() + self.cfg.ep.len() + self.cfg.bep.len() + self.cfg.sf.len()
    }

    /// Addresses that survive a reset: everything except data memory.
    pub fn persists(&self, addr: Address) -> bool {
        !self.cfg.dmem.contains(addr)
    }

    /// Addresses backed by ROM; writes to them never take effect.
    pub fn is_rom(&self, addr: Address) -> bool {
        self.cfg.tcr.contains(addr) || self.cfg.kr.contains(addr)
    }
}
