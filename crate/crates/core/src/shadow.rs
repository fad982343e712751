//! Shadow memory model.
//!
//! Each 8-byte granule of a live allocation owns one [`ShadowCell`]. The
//! cell's shadow value packs a 16-bit base value in the low word and the tag
//! word in the high word. The base is always 0 here (no red zones), so the
//! sanitizer-style check `shadow != 0` fires exactly for leak-tagged memory.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

/// Bytes of application memory per shadow cell.
pub const GRANULE: u64 = 8;

/// Tag word written into every cell of a tracked leak.
pub const LEAK_TAG: u16 = 0xe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ShadowCell {
    pub base: u16,
    pub tag: u16,
}

impl ShadowCell {
    /// Combined shadow value, tag word in the high 16 bits.
    pub fn value(self) -> u32 {
        (u32::from(self.tag) << 16) | u32::from(self.base)
    }

    pub fn is_leak_tagged(self) -> bool {
        self.tag == LEAK_TAG
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShadowError {
    OverlappingRegion { addr: u64, size: u64 },
    NotALiveRegion(u64),
    AddressOverflow { addr: u64, size: u64 },
}

impl fmt::Display for ShadowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShadowError::OverlappingRegion { addr, size } => {
                write!(f, "region {addr:#x}+{size} overlaps a live region")
            }
            ShadowError::NotALiveRegion(addr) => write!(f, "{addr:#x} is not a live region start"),
            ShadowError::AddressOverflow { addr, size } => {
                write!(f, "region {addr:#x}+{size} wraps the address space")
            }
        }
    }
}

impl std::error::Error for ShadowError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionInfo {
    pub size: u64,
    pub was_tagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessOutcome {
    NotShadowed,
    Live { tagged: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub start: u64,
    pub size: u64,
}

impl Region {
    /// Bytes the region occupies in shadow. Zero-sized allocations still
    /// own their start byte.
    fn extent(self) -> u64 {
        self.size.max(1)
    }

    fn granules(self) -> std::ops::RangeInclusive<u64> {
        self.start / GRANULE..=(self.start + self.extent() - 1) / GRANULE
    }
}

/// Sparse shadow of one process's heap.
#[derive(Debug, Default, Clone)]
pub struct ShadowMap {
    cells: HashMap<u64, ShadowCell>,
    regions: BTreeMap<u64, u64>,
}

impl ShadowMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks `[addr, addr+size)` live with untagged cells.
    ///
    /// Regions may not share a granule with another live region, since a
    /// shared cell would carry one region's tag into the other.
    pub fn register_region(&mut self, addr: u64, size: u64) -> Result<(), ShadowError> {
        let region = Region { start: addr, size };
        if addr.checked_add(region.extent()).is_none() {
            return Err(ShadowError::AddressOverflow { addr, size });
        }
        let first = *region.granules().start();
        let end = addr + region.extent();
        if let Some((&start, &sz)) = self.regions.range(..end).next_back() {
            let other = Region { start, size: sz };
            if *other.granules().end() >= first {
                return Err(ShadowError::OverlappingRegion { addr, size });
            }
        }
        // a region starting past `addr` whose first granule is shared
        if let Some((&start, _)) = self.regions.range(addr..).next() {
            if start / GRANULE <= *region.granules().end() {
                return Err(ShadowError::OverlappingRegion { addr, size });
            }
        }
        self.regions.insert(addr, size);
        for g in region.granules() {
            self.cells.insert(g, ShadowCell::default());
        }
        Ok(())
    }

    /// Writes the leak tag into every granule of the region starting at `addr`.
    pub fn tag_region(&mut self, addr: u64) -> Result<(), ShadowError> {
        let region = self.live(addr)?;
        for g in region.granules() {
            self.cells.entry(g).or_default().tag = LEAK_TAG;
        }
        Ok(())
    }

    /// Unmaps the region starting at `addr`. Fails on an invalid or repeated free.
    pub fn clear_region(&mut self, addr: u64) -> Result<RegionInfo, ShadowError> {
        let region = self.live(addr)?;
        let mut was_tagged = false;
        for g in region.granules() {
            if let Some(cell) = self.cells.remove(&g) {
                was_tagged |= cell.is_leak_tagged();
            }
        }
        self.regions.remove(&addr);
        Ok(RegionInfo {
            size: region.size,
            was_tagged,
        })
    }

    /// The check run before every read or write.
    pub fn on_access(&self, addr: u64) -> AccessOutcome {
        if self.region_containing(addr).is_none() {
            return AccessOutcome::NotShadowed;
        }
        let cell = self
            .cells
            .get(&(addr / GRANULE))
            .copied()
            .unwrap_or_default();
        if cell.value() != 0 {
            AccessOutcome::Live {
                tagged: cell.is_leak_tagged(),
            }
        } else {
            AccessOutcome::Live { tagged: false }
        }
    }

    pub fn region_containing(&self, addr: u64) -> Option<Region> {
        let (&start, &size) = self.regions.range(..=addr).next_back()?;
        let region = Region { start, size };
        (addr - start < region.extent()).then_some(region)
    }

    pub fn cell(&self, addr: u64) -> Option<ShadowCell> {
        self.cells.get(&(addr / GRANULE)).copied()
    }

    pub fn is_live(&self, addr: u64) -> bool {
        self.regions.contains_key(&addr)
    }

    pub fn live_regions(&self) -> impl Iterator<Item = Region> + '_ {
        self.regions
            .iter()
            .map(|(&start, &size)| Region { start, size })
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    fn live(&self, addr: u64) -> Result<Region, ShadowError> {
        self.regions
            .get(&addr)
            .map(|&size| Region { start: addr, size })
            .ok_or(ShadowError::NotALiveRegion(addr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn register_creates_untagged_cells() {
        let mut m = ShadowMap::new();
        m.register_region(0x1000, 8).unwrap();
        assert_eq!(m.cell_count(), 1);
        assert_eq!(m.cell(0x1000), Some(ShadowCell::default()));
        assert_eq!(
            m.register_region(0x1000, 8),
            Err(ShadowError::OverlappingRegion {
                addr: 0x1000,
                size: 8
            })
        );
    }

    #[test]
    fn register_covers_ceil_granules() {
        let mut m = ShadowMap::new();
        m.register_region(0x1000, 20).unwrap();
        // ceil(20 / 8) = 3
        assert_eq!(m.cell_count(), 3);
        for a in [0x1000, 0x1008, 0x1010] {
            assert!(m.cell(a).is_some());
        }
        assert!(m.cell(0x1018).is_none());
    }

    #[test]
    fn shared_granule_is_overlap() {
        let mut m = ShadowMap::new();
        m.register_region(0x1000, 4).unwrap();
        assert!(m.register_region(0x1004, 4).is_err());
        m.register_region(0x1008, 8).unwrap();
        assert!(m.register_region(0xffc, 8).is_err());
        m.register_region(0xffc, 4).unwrap();
        m.register_region(0xff0, 8).unwrap();
        assert!(m.register_region(0xff8, 1).is_err());
    }

    #[test]
    fn tag_region_tags_every_granule() {
        let mut m = ShadowMap::new();
        m.register_region(0x1000, 16).unwrap();
        m.tag_region(0x1000).unwrap();
        assert_eq!(m.cell(0x1000).unwrap().tag, LEAK_TAG);
        assert_eq!(m.cell(0x1008).unwrap().tag, LEAK_TAG);
        assert_eq!(m.cell(0x1000).unwrap().value(), 0x000e_0000);
        m.tag_region(0x1000).unwrap();
        assert_eq!(m.cell(0x1008).unwrap().tag, LEAK_TAG);
        assert_eq!(
            m.tag_region(0x2000),
            Err(ShadowError::NotALiveRegion(0x2000))
        );
    }

    #[test]
    fn clear_reports_and_unmaps() {
        let mut m = ShadowMap::new();
        m.register_region(0x1000, 8).unwrap();
        m.tag_region(0x1000).unwrap();
        assert_eq!(
            m.clear_region(0x1000),
            Ok(RegionInfo {
                size: 8,
                was_tagged: true
            })
        );
        assert_eq!(m.on_access(0x1000), AccessOutcome::NotShadowed);
        assert_eq!(
            m.clear_region(0x1000),
            Err(ShadowError::NotALiveRegion(0x1000))
        );

        m.register_region(0x1000, 8).unwrap();
        assert_eq!(
            m.clear_region(0x1000),
            Ok(RegionInfo {
                size: 8,
                was_tagged: false
            })
        );
    }

    #[test]
    fn access_outcomes() {
        let mut m = ShadowMap::new();
        m.register_region(0x1000, 8).unwrap();
        m.register_region(0x2000, 8).unwrap();
        m.tag_region(0x1000).unwrap();
        assert_eq!(m.on_access(0x1004), AccessOutcome::Live { tagged: true });
        assert_eq!(m.on_access(0x2004), AccessOutcome::Live { tagged: false });
        assert_eq!(m.on_access(0x9000), AccessOutcome::NotShadowed);
        assert_eq!(m.on_access(0x1008), AccessOutcome::NotShadowed);
    }

    #[test]
    fn reuse_after_clear_is_untagged() {
        let mut m = ShadowMap::new();
        m.register_region(0x1000, 24).unwrap();
        m.tag_region(0x1000).unwrap();
        m.clear_region(0x1000).unwrap();
        m.register_region(0x1000, 24).unwrap();
        for a in 0x1000..0x1018 {
            assert_eq!(m.on_access(a), AccessOutcome::Live { tagged: false });
        }
    }

    #[test]
    fn zero_sized_region_owns_its_start() {
        let mut m = ShadowMap::new();
        m.register_region(0x1000, 0).unwrap();
        assert_eq!(m.on_access(0x1000), AccessOutcome::Live { tagged: false });
        assert!(m.register_region(0x1000, 8).is_err());
        assert_eq!(m.clear_region(0x1000).unwrap().size, 0);
    }

    #[test]
    fn overflow_rejected() {
        let mut m = ShadowMap::new();
        assert!(matches!(
            m.register_region(u64::MAX - 3, 8),
            Err(ShadowError::AddressOverflow { .. })
        ));
    }

    #[derive(Debug, Clone)]
    enum Op {
        Register(u64, u64),
        Tag(u64),
        Clear(u64),
    }

    fn op() -> impl Strategy<Value = Op> {
        // 16 granules of address space
        prop_oneof![
            (0u64..128, 1u64..40).prop_map(|(a, s)| Op::Register(a, s)),
            (0u64..128).prop_map(Op::Tag),
            (0u64..128).prop_map(Op::Clear),
        ]
    }

    proptest! {
        #[test]
        fn regions_never_overlap(ops in prop::collection::vec(op(), 0..60)) {
            let mut m = ShadowMap::new();
            let mut tagged: std::collections::HashSet<u64> = Default::default();
            for o in ops {
                match o {
                    Op::Register(a, s) => { let _ = m.register_region(a, s); }
                    Op::Tag(a) => if m.tag_region(a).is_ok() { tagged.insert(a); },
                    Op::Clear(a) => if m.clear_region(a).is_ok() { tagged.remove(&a); },
                }
                // byte-level ownership: every byte in at most one live region
                let mut owner = [None::<u64>; 200];
                for r in m.live_regions() {
                    for b in r.start..r.start + r.extent() {
                        prop_assert!(owner[b as usize].is_none());
                        owner[b as usize] = Some(r.start);
                    }
                }
                // every tagged granule lies in exactly one live region
                for r in m.live_regions() {
                    let want = tagged.contains(&r.start);
                    for b in r.start..r.start + r.extent() {
                        prop_assert_eq!(m.on_access(b), AccessOutcome::Live { tagged: want });
                    }
                }
                for b in 0..200u64 {
                    if owner[b as usize].is_none() {
                        prop_assert_eq!(m.on_access(b), AccessOutcome::NotShadowed);
                    }
                }
            }
        }
    }
}
