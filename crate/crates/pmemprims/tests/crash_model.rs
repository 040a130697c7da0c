//! Crash-image model checks: the spec'd examples, and set equality against an
//! independent brute-force generator that tries every per-line persist-seq
//! assignment and filters by the model invariants.

use std::collections::HashSet;

use pmemprims::crash::{crash_images, CrashCheck, CrashPoints, ImageMode};
use pmemprims::device::{Device, DeviceConfig, EventKind, EventTrace, CACHE_LINE_SIZE};
use pmemprims::{check_crash_consistency, Error};

fn sim(capacity: u64) -> Device {
    Device::open(DeviceConfig::simulated(capacity), None).unwrap()
}

/// Replay the volatile content of one line up to persist seq `p`.
fn replay_line(trace: &EventTrace, line: u64, p: u64) -> Vec<u8> {
    let start = (line * CACHE_LINE_SIZE) as usize;
    let mut content = trace.baseline[start..start + CACHE_LINE_SIZE as usize].to_vec();
    for event in &trace.events {
        if event.seq > p {
            break;
        }
        if let EventKind::Store { offset, data } | EventKind::StreamingStore { offset, data } =
            &event.kind
        {
            if offset / CACHE_LINE_SIZE == line {
                let rel = (offset - line * CACHE_LINE_SIZE) as usize;
                content[rel..rel + data.len()].copy_from_slice(data.as_slice());
            }
        }
    }
    content
}

/// The enforced floor per the recursive definition: the last fence preceded
/// by a write-back of (or streaming store into) the line issued after the
/// line's previous enforced floor.
fn floor_of(trace: &EventTrace, line: u64, crash: u64) -> u64 {
    let mut floor = 0;
    let mut pending = false;
    for event in &trace.events {
        if event.seq > crash {
            break;
        }
        match &event.kind {
            EventKind::StreamingStore { offset, .. } if offset / CACHE_LINE_SIZE == line => {
                pending = true;
            }
            EventKind::WriteBack { line_offset } if line_offset / CACHE_LINE_SIZE == line => {
                pending = true;
            }
            EventKind::Fence => {
                if pending {
                    floor = event.seq;
                    pending = false;
                }
            }
            _ => {}
        }
    }
    floor
}

/// Every legal image content, by trying all per-line persist-seq assignments.
fn brute_force_images(trace: &EventTrace, crash: u64) -> HashSet<Vec<u8>> {
    let lines = trace.capacity / CACHE_LINE_SIZE;
    // Per line: the set of reachable contents over legal seqs.
    let per_line: Vec<Vec<Vec<u8>>> = (0..lines)
        .map(|line| {
            let floor = floor_of(trace, line, crash);
            let mut seen = Vec::new();
            for p in floor..=crash {
                let content = replay_line(trace, line, p);
                if !seen.contains(&content) {
                    seen.push(content);
                }
            }
            seen
        })
        .collect();

    let mut images = HashSet::new();
    let mut odometer = vec![0usize; lines as usize];
    loop {
        let mut image = Vec::with_capacity(trace.capacity as usize);
        for (line, &idx) in odometer.iter().enumerate() {
            image.extend_from_slice(&per_line[line][idx]);
        }
        images.insert(image);
        let mut i = odometer.len();
        let mut done = true;
        while i > 0 {
            i -= 1;
            odometer[i] += 1;
            if odometer[i] < per_line[i].len() {
                done = false;
                break;
            }
            odometer[i] = 0;
        }
        if done {
            return images;
        }
    }
}

fn enumerate_contents(trace: &EventTrace, crash: u64) -> HashSet<Vec<u8>> {
    crash_images(trace, crash, &ImageMode::exhaustive())
        .unwrap()
        .map(|img| img.content)
        .collect()
}

#[test]
fn persisted_store_is_durable_in_every_image() {
    let dev = sim(256);
    dev.store(0, &[0x42; 8]).unwrap();
    dev.write_back(0).unwrap();
    dev.fence();
    let trace = dev.trace().unwrap();
    let images: Vec<_> = crash_images(&trace, 3, &ImageMode::exhaustive()).unwrap().collect();
    assert_eq!(images.len(), 1);
    assert_eq!(&images[0].content[0..8], &[0x42; 8]);
    assert_eq!(images[0].per_line_persist_seq.get(&0), Some(&3));
}

#[test]
fn unfenced_store_may_or_may_not_survive() {
    let dev = sim(256);
    dev.store(0, &[7; 8]).unwrap();
    let trace = dev.trace().unwrap();
    let contents = enumerate_contents(&trace, 1);
    assert_eq!(contents.len(), 2);
    assert!(contents.contains(&vec![0u8; 256]));
    let mut with_store = vec![0u8; 256];
    with_store[0..8].copy_from_slice(&[7; 8]);
    assert!(contents.contains(&with_store));
}

#[test]
fn independent_lines_multiply() {
    let dev = sim(256);
    dev.store(0, &[1; 8]).unwrap();
    dev.store(64, &[2; 8]).unwrap();
    let trace = dev.trace().unwrap();
    assert_eq!(enumerate_contents(&trace, 2).len(), 4);
}

#[test]
fn streaming_store_durable_after_fence() {
    let dev = sim(256);
    dev.store_streaming(0, &[0xaa; 64]).unwrap();
    dev.fence();
    let trace = dev.trace().unwrap();
    let contents = enumerate_contents(&trace, trace.len());
    assert_eq!(contents.len(), 1);
    assert_eq!(&contents.iter().next().unwrap()[0..64], &[0xaa; 64]);
}

#[test]
fn streaming_store_without_fence_is_undetermined() {
    let dev = sim(256);
    dev.store_streaming(0, &[0xaa; 8]).unwrap();
    let trace = dev.trace().unwrap();
    assert_eq!(enumerate_contents(&trace, trace.len()).len(), 2);
}

#[test]
fn intra_store_tearing_at_atom_granularity() {
    // One 16-byte store decomposes into two atoms; the line can hold any
    // replay prefix: none, first atom, both.
    let dev = sim(256);
    dev.store(0, &[0xff; 16]).unwrap();
    let trace = dev.trace().unwrap();
    let contents = enumerate_contents(&trace, trace.len());
    assert_eq!(contents.len(), 3);
}

#[test]
fn crash_point_beyond_trace_is_rejected() {
    let dev = sim(256);
    dev.store(0, &[1]).unwrap();
    let trace = dev.trace().unwrap();
    assert!(matches!(
        crash_images(&trace, 99, &ImageMode::exhaustive()),
        Err(Error::BadCrashPoint { .. })
    ));
}

#[test]
fn exhaustive_cap_is_enforced() {
    let dev = sim(512);
    // 8 lines x 3 candidates each = 6561 images.
    for line in 0..8u64 {
        dev.store(line * 64, &[1; 8]).unwrap();
        dev.store(line * 64, &[2; 8]).unwrap();
    }
    let trace = dev.trace().unwrap();
    let err = match crash_images(&trace, trace.len(), &ImageMode::Exhaustive { cap: 100 }) {
        Err(e) => e,
        Ok(_) => panic!("expected the cap to refuse"),
    };
    assert!(matches!(err, Error::ImageCountAboveCap { count: 6561, cap: 100 }));
    assert!(crash_images(&trace, trace.len(), &ImageMode::Exhaustive { cap: 6561 }).is_ok());
}

#[test]
fn sampled_mode_is_deterministic() {
    let dev = sim(512);
    for line in 0..4u64 {
        dev.store(line * 64, &[line as u8 + 1; 24]).unwrap();
    }
    dev.write_back(0).unwrap();
    dev.fence();
    let trace = dev.trace().unwrap();
    let run = |seed| -> Vec<Vec<u8>> {
        crash_images(&trace, trace.len(), &ImageMode::sampled(50, seed))
            .unwrap()
            .map(|i| i.content)
            .collect()
    };
    assert_eq!(run(7), run(7));
    assert_ne!(run(7), run(8));
    assert_eq!(run(7).len(), 50);
}

#[test]
fn post_fence_stability() {
    // A range written back and fenced, with no later stores, is identical in
    // every image at every later crash point.
    let dev = sim(256);
    dev.store(0, &[0x11; 64]).unwrap();
    dev.persist(0, 64).unwrap();
    dev.store(128, &[0x22; 8]).unwrap(); // unrelated later traffic
    dev.store(128, &[0x33; 8]).unwrap();
    let trace = dev.trace().unwrap();
    let fence_seq = trace
        .events
        .iter()
        .find(|e| matches!(e.kind, EventKind::Fence))
        .unwrap()
        .seq;
    for crash in fence_seq..=trace.len() {
        for content in enumerate_contents(&trace, crash) {
            assert_eq!(&content[0..64], &[0x11; 64], "crash at {crash}");
        }
    }
}

#[test]
fn matches_brute_force_on_small_traces() {
    // Deterministic pseudo-random traces over 4 lines, <= 20 events, compared
    // at every crash point against the brute-force generator.
    let mut state = 0x243f_6a88_85a3_08d3u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        state
    };
    for case in 0..60 {
        let dev = sim(256);
        let events = 4 + (next() % 17) as usize;
        for _ in 0..events {
            match next() % 5 {
                0 | 1 => {
                    let offset = next() % 250;
                    let len = 1 + (next() % 6).min(255 - offset);
                    let byte = (next() % 256) as u8;
                    let data = vec![byte; len as usize];
                    if next() % 2 == 0 {
                        dev.store(offset, &data).unwrap();
                    } else {
                        dev.store_streaming(offset, &data).unwrap();
                    }
                }
                2 => dev.write_back(next() % 256).unwrap(),
                _ => dev.fence(),
            }
        }
        let trace = dev.trace().unwrap();
        for crash in 0..=trace.len() {
            let ours = enumerate_contents(&trace, crash);
            let brute = brute_force_images(&trace, crash);
            assert_eq!(ours, brute, "case {case}, crash at {crash}");
        }
    }
}

#[test]
fn harness_empty_workload_checks_one_image() {
    let check = CrashCheck {
        capacity: 256,
        crash_points: CrashPoints::All,
        mode: ImageMode::exhaustive(),
    };
    let report = check_crash_consistency(
        &check,
        |_dev, _rec| Ok(()),
        |dev| dev.read(0, 256),
        |content, oracle| {
            if content.iter().all(|&b| b == 0) && oracle.completed_steps() == 0 {
                Ok(())
            } else {
                Err("expected pristine region".into())
            }
        },
    )
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.images_checked, 1);
}

#[test]
fn harness_oracle_tracks_steps_and_in_flight() {
    let check = CrashCheck {
        capacity: 256,
        crash_points: CrashPoints::All,
        mode: ImageMode::exhaustive(),
    };
    // Two steps of persisted stores; the predicate cross-checks the oracle
    // against what recovery sees.
    let report = check_crash_consistency(
        &check,
        |dev, rec| {
            dev.store_streaming(0, &[1; 8])?;
            dev.fence();
            rec.step_done()?;
            dev.store_streaming(64, &[2; 8])?;
            dev.fence();
            rec.step_done()?;
            Ok(())
        },
        |dev| dev.read(0, 256),
        |content, oracle| {
            let done = oracle.completed_steps();
            assert!(oracle.total_steps() == 2);
            // A completed step's bytes must be durable.
            if done >= 1 && content[0] != 1 {
                return Err("step 1 lost after completion".into());
            }
            if done >= 2 && content[64] != 2 {
                return Err("step 2 lost after completion".into());
            }
            // Bytes from steps that never started must be absent.
            if done == 0 && oracle.in_flight_step().is_none() && content[0] != 0 {
                return Err("step 1 bytes before it started".into());
            }
            Ok(())
        },
    )
    .unwrap();
    assert!(report.passed(), "{report}");
    // 5 events -> 6 boundaries; points mid-step have 2 images each.
    assert!(report.images_checked >= 6);
}

#[test]
fn harness_reports_failures_with_diagnostics() {
    let check = CrashCheck {
        capacity: 256,
        crash_points: CrashPoints::All,
        mode: ImageMode::exhaustive(),
    };
    let report = check_crash_consistency(
        &check,
        |dev, rec| {
            dev.store(0, &[9; 8])?; // never persisted
            rec.step_done()?;
            Ok(())
        },
        |dev| dev.read(0, 256),
        |content, oracle| {
            // Deliberately wrong: claims unfenced bytes are always durable.
            if oracle.completed_steps() == 1 && content[0] != 9 {
                return Err("lost unfenced store".into());
            }
            Ok(())
        },
    )
    .unwrap();
    assert!(!report.passed());
    assert!(report.failed_count >= 1);
    let text = report.to_string();
    assert!(text.contains("lost unfenced store"));
    assert!(text.lines().last().unwrap().starts_with("checked="));
}

#[test]
fn harness_sampled_points_subset() {
    let check = CrashCheck {
        capacity: 256,
        crash_points: CrashPoints::At(vec![0, 1]),
        mode: ImageMode::sampled(100, 3),
    };
    let report = check_crash_consistency(
        &check,
        |dev, rec| {
            dev.store_streaming(0, &[1; 8])?;
            dev.fence();
            rec.step_done()?;
            Ok(())
        },
        |dev| dev.read(0, 256),
        |_content, _oracle| Ok(()),
    )
    .unwrap();
    assert!(report.passed());
    assert_eq!(report.images_checked, 200);
}
