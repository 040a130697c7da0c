use super::*;
use crate::device::DeviceConfig;

fn sim(capacity: u64) -> Device {
    Device::open(DeviceConfig::simulated(capacity), None).unwrap()
}

fn opts(algo: LogAlgorithm, capacity: u64) -> LogOptions {
    LogOptions::new(algo, 0, capacity)
}

const ALGOS: [LogAlgorithm; 4] = [
    LogAlgorithm::Classic,
    LogAlgorithm::Header,
    LogAlgorithm::HeaderDance,
    LogAlgorithm::Zero,
];

#[test]
fn fresh_log_starts_at_lsn_one() {
    let dev = sim(8192);
    let log = Log::create(&dev, opts(LogAlgorithm::Zero, 8192)).unwrap();
    assert_eq!(log.next_lsn(), 1);
    assert_eq!(log.tail(), 0);
}

#[test]
fn header_dance_entries_start_after_field_lines() {
    let dev = sim(8192);
    let log = Log::create(&dev, opts(LogAlgorithm::HeaderDance, 8192)).unwrap();
    assert_eq!(log.options().entries_start(), 64 * 64);
    assert_eq!(log.tail(), 4096);
    let log = Log::create(&dev, opts(LogAlgorithm::Header, 8192)).unwrap();
    assert_eq!(log.tail(), 64);
}

#[test]
fn region_validation() {
    let dev = sim(8192);
    let bad_len = LogOptions::new(LogAlgorithm::Zero, 0, 32);
    assert!(matches!(Log::create(&dev, bad_len), Err(Error::BadLogRegion { .. })));
    let bad_offset = LogOptions::new(LogAlgorithm::Zero, 10, 256);
    assert!(matches!(Log::create(&dev, bad_offset), Err(Error::BadLogRegion { .. })));
    let beyond = LogOptions::new(LogAlgorithm::Zero, 8192, 256);
    assert!(matches!(Log::create(&dev, beyond), Err(Error::BadLogRegion { .. })));
    let zero_k = LogOptions::new(LogAlgorithm::HeaderDance, 0, 8192).dance_k(0);
    assert!(matches!(Log::create(&dev, zero_k), Err(Error::BadLogRegion { .. })));
    // All header lines but no entry space.
    let no_room = LogOptions::new(LogAlgorithm::HeaderDance, 0, 4096).dance_k(64);
    assert!(matches!(Log::create(&dev, no_room), Err(Error::BadLogRegion { .. })));
}

#[test]
fn barrier_budget_per_append() {
    for flavor in [StoreFlavor::Streaming, StoreFlavor::PlainWriteBack] {
        for (algo, fences) in [
            (LogAlgorithm::Classic, 2),
            (LogAlgorithm::Header, 2),
            (LogAlgorithm::HeaderDance, 2),
            (LogAlgorithm::Zero, 1),
        ] {
            let dev = sim(16384);
            let mut log = Log::create(&dev, opts(algo, 16384).flavor(flavor)).unwrap();
            for payload_len in [0usize, 40, 200] {
                dev.reset_stats();
                log.append(&vec![0xcd; payload_len]).unwrap();
                assert_eq!(
                    dev.stats().barriers,
                    fences,
                    "{algo:?} {flavor:?} payload {payload_len}"
                );
            }
        }
    }
}

#[test]
fn footprint_arithmetic() {
    // Hand-computed layout table.
    let cases = [
        (LogAlgorithm::Zero, false, 40, 64),    // 24 + 40
        (LogAlgorithm::Zero, true, 40, 64),     // lands exactly on a line
        (LogAlgorithm::Zero, true, 41, 128),    // 65 rounds up
        (LogAlgorithm::Zero, true, 0, 64),      // header-only entry
        (LogAlgorithm::Classic, false, 40, 64), // 16 + 40 + 8
        (LogAlgorithm::Classic, true, 40, 128), // entry line + footer line
        (LogAlgorithm::Classic, true, 0, 128),  // 16 -> 64, + footer line
        (LogAlgorithm::Classic, false, 0, 24),
        (LogAlgorithm::Header, false, 0, 16),
        (LogAlgorithm::Header, true, 56, 128), // 72 rounds up
        (LogAlgorithm::HeaderDance, true, 48, 64),
    ];
    for (algo, aligned, payload, expected) in cases {
        assert_eq!(
            entry_footprint(algo, aligned, payload),
            expected,
            "{algo:?} aligned={aligned} payload={payload}"
        );
    }
}

#[test]
fn popcount_examples() {
    // lsn = 1 contributes a single set bit; empty payload adds nothing.
    let header = zero_header_bytes(1, 0, 0);
    assert_eq!(popcount_entry(&header, &[]), 1);
    // A 0xff payload byte contributes 8.
    assert_eq!(popcount_entry(&header, &[0xff]), 9);
    // Pure: the pop_cnt field itself is ignored.
    let with_count = zero_header_bytes(1, 0, u64::MAX);
    assert_eq!(popcount_entry(&with_count, &[]), 1);
    assert_eq!(popcount_entry(&header, b"abc"), popcount_entry(&header, b"abc"));
}

#[test]
fn three_appends_recover() {
    for algo in ALGOS {
        let dev = sim(8192);
        let mut log = Log::create(&dev, opts(algo, 8192)).unwrap();
        for (i, payload) in [b"one".as_ref(), b"two", b"three"].iter().enumerate() {
            assert_eq!(log.append(payload).unwrap(), i as u64 + 1);
        }
        let (entries, next_lsn) = log_recover(&dev, &opts(algo, 8192)).unwrap();
        assert_eq!(next_lsn, 4, "{algo:?}");
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[0], LogEntry { lsn: 1, payload: b"one".to_vec() });
        assert_eq!(entries[2], LogEntry { lsn: 3, payload: b"three".to_vec() });
    }
}

#[test]
fn round_trip_payload_sizes() {
    let sizes = [0usize, 1, 7, 8, 63, 64, 65, 512];
    for algo in ALGOS {
        for aligned in [false, true] {
            let dev = sim(1 << 16);
            let options = opts(algo, 1 << 16).aligned(aligned);
            let mut log = Log::create(&dev, options.clone()).unwrap();
            let payloads: Vec<Vec<u8>> = sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| (0..n).map(|j| (i * 31 + j) as u8).collect())
                .collect();
            for p in &payloads {
                log.append(p).unwrap();
            }
            let (entries, next_lsn) = log_recover(&dev, &options).unwrap();
            assert_eq!(next_lsn, sizes.len() as u64 + 1, "{algo:?} aligned={aligned}");
            for (i, entry) in entries.iter().enumerate() {
                assert_eq!(entry.lsn, i as u64 + 1);
                assert_eq!(&entry.payload, &payloads[i], "{algo:?} aligned={aligned} #{i}");
            }
        }
    }
}

#[test]
fn header_dance_rotation_and_max_rule() {
    let dev = sim(8192);
    let options = opts(LogAlgorithm::HeaderDance, 8192).dance_k(4);
    let mut log = Log::create(&dev, options.clone()).unwrap();
    let payload = [7u8; 16]; // footprint 32 unaligned
    for _ in 0..6 {
        log.append(&payload).unwrap();
    }
    // Field i holds the cumulative size as of the latest append with
    // (lsn-1) % 4 == i: appends 5,6,3,4 -> sizes 160,192,96,128.
    let field = |i: u64| {
        let b = dev.read(i * 64, 8).unwrap();
        u64::from_le_bytes(b.try_into().unwrap())
    };
    assert_eq!([field(0), field(1), field(2), field(3)], [160, 192, 96, 128]);
    let (entries, next_lsn) = log_recover(&dev, &options).unwrap();
    assert_eq!(entries.len(), 6);
    assert_eq!(next_lsn, 7);
}

#[test]
fn log_full_and_payload_too_large() {
    let dev = sim(256);
    let mut log = Log::create(&dev, opts(LogAlgorithm::Zero, 256)).unwrap();
    // 24 + 200 = 224 fits once.
    log.append(&[1; 200]).unwrap();
    assert!(matches!(log.append(&[1; 200]), Err(Error::LogFull { .. })));
    // Small appends still fit in the remainder.
    log.append(&[2; 8]).unwrap();
    assert!(matches!(log.append(&[3; 500]), Err(Error::PayloadTooLarge { .. })));
}

#[test]
fn create_on_used_region_resumes() {
    for algo in ALGOS {
        let dev = sim(8192);
        let options = opts(algo, 8192);
        let mut log = Log::create(&dev, options.clone()).unwrap();
        log.append(b"first").unwrap();
        log.append(b"second").unwrap();
        drop(log);

        let mut log = Log::create(&dev, options.clone()).unwrap();
        assert_eq!(log.next_lsn(), 3, "{algo:?}");
        log.append(b"third").unwrap();
        let (entries, _) = log_recover(&dev, &options).unwrap();
        assert_eq!(entries.len(), 3);
        assert_eq!(entries[2].payload, b"third");
    }
}

#[test]
fn aligned_appends_never_repeat_a_line() {
    for algo in ALGOS {
        let dev = sim(1 << 16);
        let mut log = Log::create(&dev, opts(algo, 1 << 16).aligned(true)).unwrap();
        for payload_len in [0usize, 1, 40, 64, 65, 200, 512] {
            dev.reset_stats();
            log.append(&vec![0x3c; payload_len]).unwrap();
            assert_eq!(
                dev.stats().repeat_persist_lines,
                0,
                "{algo:?} payload {payload_len}"
            );
        }
    }
}

#[test]
fn unaligned_classic_repersists_the_tail_line() {
    let dev = sim(8192);
    let mut log = Log::create(&dev, opts(LogAlgorithm::Classic, 8192)).unwrap();
    dev.reset_stats();
    // 16 + 40 = 56: the footer lands on the payload's tail line in the next
    // fence epoch.
    log.append(&[9u8; 40]).unwrap();
    assert!(dev.stats().repeat_persist_lines >= 1);
}

#[test]
fn zero_rejects_entry_with_missing_payload_line() {
    let dev = sim(8192);
    let options = opts(LogAlgorithm::Zero, 8192);
    let mut log = Log::create(&dev, options.clone()).unwrap();
    log.append(&[1; 30]).unwrap();
    log.append(&[2; 30]).unwrap();
    let third_tail = log.tail();
    log.append(&[0xff; 100]).unwrap();

    // Wipe one payload line of entry 3, as a crash image could.
    let lost_line = (third_tail + ZERO_HEADER_LEN + 70) / 64 * 64;
    let mut content = dev.read(0, 8192).unwrap();
    content[lost_line as usize..lost_line as usize + 64].fill(0);
    let image =
        Device::open_simulated_with_content(DeviceConfig::simulated(8192), &content).unwrap();

    let (entries, next_lsn) = log_recover(&image, &options).unwrap();
    assert_eq!(entries.len(), 2);
    assert_eq!(next_lsn, 3);
}

#[test]
fn recovery_on_fresh_region_is_empty() {
    for algo in ALGOS {
        let dev = sim(8192);
        let (entries, next_lsn) = log_recover(&dev, &opts(algo, 8192)).unwrap();
        assert!(entries.is_empty());
        assert_eq!(next_lsn, 1);
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    /// Naive bit loop, independent of the popcnt path used by the
    /// implementation.
    fn slow_popcount(bytes: impl Iterator<Item = u8>) -> u64 {
        let mut count = 0;
        for mut b in bytes {
            while b != 0 {
                count += (b & 1) as u64;
                b >>= 1;
            }
        }
        count
    }

    proptest! {
        #[test]
        fn popcount_matches_bit_loop(
            lsn in 1u64..u64::MAX,
            payload in proptest::collection::vec(any::<u8>(), 0..300),
        ) {
            let header = zero_header_bytes(lsn, payload.len() as u32, 0);
            let expected = slow_popcount(
                header[..16].iter().copied().chain(payload.iter().copied()),
            );
            prop_assert_eq!(popcount_entry(&header, &payload), expected);
        }

        /// Appending then recovering reproduces payload bytes exactly.
        #[test]
        fn append_recover_round_trip(
            payloads in proptest::collection::vec(
                proptest::collection::vec(any::<u8>(), 0..120),
                0..8,
            ),
            aligned in any::<bool>(),
            algo_idx in 0usize..4,
        ) {
            let algo = ALGOS[algo_idx];
            let dev = sim(1 << 14);
            let options = opts(algo, 1 << 14).aligned(aligned);
            let mut log = Log::create(&dev, options.clone()).unwrap();
            for p in &payloads {
                log.append(p).unwrap();
            }
            let (entries, next_lsn) = log_recover(&dev, &options).unwrap();
            prop_assert_eq!(next_lsn, payloads.len() as u64 + 1);
            prop_assert_eq!(entries.len(), payloads.len());
            for (entry, expected) in entries.iter().zip(&payloads) {
                prop_assert_eq!(&entry.payload, expected);
            }
        }
    }
}
