use std::collections::HashMap;

use proptest::prelude::*;
use ssdtee::flash::{FlashArray, FlashGeometry, FlashTimings};
use ssdtee::ftl::{Ftl, FtlConfig, MappingPlacement};

const LOGICAL: u32 = 96;

fn small_ftl(cache_entries: Option<u32>, placement: MappingPlacement) -> Ftl {
    let g = FlashGeometry {
        channels: 2,
        chips_per_channel: 1,
        dies_per_chip: 2,
        planes_per_die: 1,
        blocks_per_plane: 8,
        pages_per_block: 8,
        page_size: 256,
    };
    let flash = FlashArray::new(g, FlashTimings::default()).unwrap();
    let cfg = FtlConfig { logical_pages: LOGICAL, cache_entries, wear_level_threshold: 2, placement, ..Default::default() };
    Ftl::new(flash, cfg).unwrap()
}

#[derive(Debug, Clone)]
enum Op {
    Write(u32, u8),
    Gc,
    Wear,
    Flush,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        8 => (0..LOGICAL, any::<u8>()).prop_map(|(l, b)| Op::Write(l, b)),
        1 => Just(Op::Gc),
        1 => Just(Op::Wear),
        1 => Just(Op::Flush),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matches_key_value_oracle(ops in proptest::collection::vec(op(), 1..600)) {
        let mut ftl = small_ftl(Some(16), MappingPlacement::ProtectedRegion);
        let mut oracle: HashMap<u32, Vec<u8>> = HashMap::new();
        let mut now = 0;
        for o in ops {
            match o {
                Op::Write(l, b) => {
                    let page = vec![b ^ l as u8; 256];
                    now = ftl.secure_write(l, &page, now).unwrap();
                    oracle.insert(l, page);
                }
                Op::Gc => { ftl.garbage_collect(now).unwrap(); }
                Op::Wear => { ftl.wear_level(now).unwrap(); }
                Op::Flush => ftl.flush_cache(),
            }
        }
        let lpas: Vec<u32> = oracle.keys().copied().collect();
        ftl.set_id_bits(1, &lpas).unwrap();
        for (&l, want) in &oracle {
            let t = ftl.translate(1, l, now).unwrap();
            prop_assert_eq!(&ftl.flash_mut().read_page(t.ppa, now).unwrap().data, want);
            prop_assert_eq!(ftl.valid_copies(l), 1);
        }
    }

    #[test]
    fn flushing_the_cache_keeps_translations(writes in proptest::collection::vec((0..LOGICAL, any::<u8>()), 1..300)) {
        let mut ftl = small_ftl(Some(8), MappingPlacement::ProtectedRegion);
        let mut now = 0;
        for (l, b) in &writes {
            now = ftl.secure_write(*l, &[*b; 256], now).unwrap();
        }
        let mut lpas: Vec<u32> = writes.iter().map(|w| w.0).collect();
        lpas.sort_unstable();
        lpas.dedup();
        ftl.set_id_bits(2, &lpas).unwrap();
        let before: Vec<_> = lpas.iter().map(|&l| ftl.translate(2, l, now).unwrap().ppa).collect();
        ftl.flush_cache();
        let after: Vec<_> = lpas.iter().map(|&l| ftl.translate(2, l, now).unwrap().ppa).collect();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn translation_switches_equal_misses(lookups in proptest::collection::vec(0..LOGICAL, 1..400), cache in 1u32..64) {
        let mut ftl = small_ftl(Some(cache), MappingPlacement::ProtectedRegion);
        let all: Vec<u32> = (0..LOGICAL).collect();
        for &l in &all {
            ftl.secure_write(l, &[l as u8; 256], 0).unwrap();
        }
        ftl.set_id_bits(3, &all).unwrap();
        ftl.flush_cache();
        ftl.reset_stats();
        for chunk in lookups.chunks(7) {
            ftl.translate_batch(3, chunk, 0).unwrap();
        }
        let s = ftl.stats();
        prop_assert_eq!(s.round_trips, s.cache_misses);
        prop_assert_eq!(s.world_switches, 2 * s.cache_misses);
    }
}
