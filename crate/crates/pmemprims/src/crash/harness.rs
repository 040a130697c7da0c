//! Drives recovery procedures over crash images and checks a predicate on
//! every one.
//!
//! The workload runs once, uninterrupted, on a live simulated device while a
//! [`StepRecorder`] marks logical step boundaries. The recorded trace is then
//! crash-enumerated offline: for every chosen crash point, each legal image
//! is materialized on a scratch device, the caller's `recover` function runs
//! on it, and the predicate judges the recovered state against a
//! [`StepOracle`] describing which steps had completed at that point.
//!
//! Sampled runs use an observational shortcut: a recovery run that provably
//! never read any byte the images at a crash point disagree on (tracked at
//! byte granularity, self-written bytes excluded) behaves identically on all
//! of them, so one representative verdict covers the whole batch. Points
//! where recovery does observe contested bytes fall back to checking every
//! sampled image individually.

use rand::Rng;

use crate::device::{Device, DeviceConfig};
use crate::device::tracker::ByteBitmap;
use crate::error::{Error, Result};

use super::{
    point_rng, CrashFailure, CrashPoints, CrashReport, ImageMode, Walker, hex, LINE,
};

/// Most failures kept verbatim in a report; the rest are only counted.
const MAX_RECORDED_FAILURES: usize = 64;
/// Most differing lines dumped per failure.
const MAX_DIFF_LINES: usize = 16;

/// Crash-check parameters.
#[derive(Debug, Clone)]
pub struct CrashCheck {
    /// Capacity of the simulated device the workload runs on.
    pub capacity: u64,
    pub crash_points: CrashPoints,
    pub mode: ImageMode,
}

/// Marks logical step boundaries while the workload runs.
pub struct StepRecorder<'d> {
    device: &'d Device,
    watermarks: Vec<u64>,
}

impl StepRecorder<'_> {
    /// End the setup phase: clears the trace and adopts the current content
    /// as the durable baseline. Crash points only cover what follows.
    pub fn setup_done(&mut self) -> Result<()> {
        assert!(self.watermarks.is_empty(), "setup_done must precede all steps");
        self.device.reset_trace()
    }

    /// Mark the end of one logical workload step.
    pub fn step_done(&mut self) -> Result<()> {
        let mark = self.device.trace_len()?;
        self.watermarks.push(mark);
        Ok(())
    }
}

/// Which workload steps had completed at a crash point.
pub struct StepOracle<'a> {
    pub crash_seq: u64,
    watermarks: &'a [u64],
}

impl StepOracle<'_> {
    /// Steps whose final event lies at or before the crash.
    pub fn completed_steps(&self) -> usize {
        self.watermarks.iter().take_while(|w| **w <= self.crash_seq).count()
    }

    /// Step the crash interrupts, if it had begun.
    pub fn in_flight_step(&self) -> Option<usize> {
        let done = self.completed_steps();
        if done == self.watermarks.len() {
            return None;
        }
        let start = if done == 0 { 0 } else { self.watermarks[done - 1] };
        (self.crash_seq > start).then_some(done)
    }

    pub fn total_steps(&self) -> usize {
        self.watermarks.len()
    }
}

/// Run `workload` on a fresh simulated device, then check `predicate` on the
/// state `recover` produces from every crash image at every chosen point.
/// A recovery error counts as a failed image. Deterministic for a given
/// sampled-mode seed.
pub fn check_crash_consistency<R>(
    check: &CrashCheck,
    workload: impl FnOnce(&Device, &mut StepRecorder<'_>) -> Result<()>,
    recover: impl Fn(&Device) -> Result<R>,
    predicate: impl Fn(&R, &StepOracle<'_>) -> std::result::Result<(), String>,
) -> Result<CrashReport> {
    let device = Device::open(DeviceConfig::simulated(check.capacity), None)?;
    let mut recorder = StepRecorder { device: &device, watermarks: Vec::new() };
    workload(&device, &mut recorder)?;
    let trace = device.trace()?;
    let watermarks = recorder.watermarks;
    let final_content = device.read(0, check.capacity)?;

    let points: Vec<u64> = match &check.crash_points {
        CrashPoints::All => (0..=trace.len()).collect(),
        CrashPoints::At(set) => {
            let mut v: Vec<u64> = set.clone();
            v.sort_unstable();
            v.dedup();
            if let Some(&last) = v.last() {
                if last > trace.len() {
                    return Err(Error::BadCrashPoint { crash_seq: last, len: trace.len() });
                }
            }
            v
        }
    };

    let scratch = Device::sim_untraced(check.capacity)?;
    let mut loaded = trace.baseline.clone();
    scratch.sim_patch(0, &loaded);
    // Lines recovery has written on the scratch device since they were last
    // loaded; they must be re-patched regardless of the mirror diff.
    let mut stale_lines: std::collections::BTreeSet<u64> = std::collections::BTreeSet::new();

    let mut walker = Walker::new(&trace);
    let mut images_checked: u64 = 0;
    let mut failed_count: u64 = 0;
    let mut failures: Vec<CrashFailure> = Vec::new();

    let mut target = trace.baseline.clone();

    for &point in &points {
        walker.advance_to(point);
        let oracle = StepOracle { crash_seq: point, watermarks: &watermarks };

        // Reachable distinct contents per open line; lines not listed are
        // fixed at their floor content (already in walker.base()).
        let open_lines: Vec<u64> = walker.open.keys().copied().collect();
        let candidates: Vec<Vec<[u8; LINE]>> =
            open_lines.iter().map(|&l| walker.distinct_candidates(l)).collect();

        target.copy_from_slice(walker.base());

        let run_one = |content: &[u8],
                           track: bool,
                           loaded: &mut Vec<u8>,
                           stale: &mut std::collections::BTreeSet<u64>|
         -> (std::result::Result<(), String>, ByteBitmap) {
            patch_scratch(&scratch, loaded, content, stale);
            scratch.sim_install_tracker();
            let verdict = match recover(&scratch) {
                Ok(state) => predicate(&state, &oracle),
                Err(e) => Err(format!("recovery error: {e}")),
            };
            let tracker = scratch.sim_take_tracker().expect("tracker installed");
            stale.extend(tracker.written.nonzero_lines());
            let observed = if track { tracker.observed } else { ByteBitmap::new(0) };
            (verdict, observed)
        };

        let record = |verdict: std::result::Result<(), String>,
                          weight: u64,
                          content: &[u8],
                          images_checked: &mut u64,
                          failed_count: &mut u64,
                          failures: &mut Vec<CrashFailure>| {
            *images_checked += weight;
            if let Err(diag) = verdict {
                *failed_count += weight;
                if failures.len() < MAX_RECORDED_FAILURES {
                    failures.push(CrashFailure {
                        crash_seq: point,
                        diagnostic: diag,
                        differing_lines: diff_lines(content, &final_content),
                    });
                }
            }
        };

        match &check.mode {
            ImageMode::Exhaustive { cap } => {
                let count: u128 =
                    candidates.iter().map(|c| c.len() as u128).product();
                if count > *cap {
                    return Err(Error::ImageCountAboveCap { count, cap: *cap });
                }
                let mut odometer = vec![0usize; open_lines.len()];
                loop {
                    for (i, &line) in open_lines.iter().enumerate() {
                        let start = line as usize * LINE;
                        target[start..start + LINE].copy_from_slice(&candidates[i][odometer[i]]);
                    }
                    let (verdict, _) = run_one(&target, false, &mut loaded, &mut stale_lines);
                    record(
                        verdict,
                        1,
                        &target,
                        &mut images_checked,
                        &mut failed_count,
                        &mut failures,
                    );
                    // Advance, last line fastest.
                    let mut i = odometer.len();
                    let mut done = true;
                    while i > 0 {
                        i -= 1;
                        odometer[i] += 1;
                        if odometer[i] < candidates[i].len() {
                            done = false;
                            break;
                        }
                        odometer[i] = 0;
                    }
                    if done {
                        break;
                    }
                }
            }
            ImageMode::Sampled { count, seed } => {
                // Bytes on which the images at this point can disagree.
                let mut varied = ByteBitmap::new(check.capacity);
                for (i, &line) in open_lines.iter().enumerate() {
                    let base = &candidates[i][0];
                    for cand in &candidates[i][1..] {
                        for (b, (x, y)) in base.iter().zip(cand.iter()).enumerate() {
                            if x != y {
                                varied.set_range(line * LINE as u64 + b as u64, 1);
                            }
                        }
                    }
                }

                let mut rng = point_rng(*seed, point);
                let draw =
                    |rng: &mut rand_chacha::ChaCha8Rng, target: &mut Vec<u8>| {
                        for &line in &open_lines {
                            let floor = walker.floor(line);
                            let seq = rng.gen_range(floor..=point);
                            let start = line as usize * LINE;
                            target[start..start + LINE]
                                .copy_from_slice(&walker.content_at(line, seq));
                        }
                    };

                draw(&mut rng, &mut target);
                let (verdict, observed) = run_one(&target, true, &mut loaded, &mut stale_lines);
                if !observed.intersects(&varied) {
                    // Recovery never read a contested byte: identical verdict
                    // for every sample at this point.
                    record(
                        verdict,
                        *count,
                        &target,
                        &mut images_checked,
                        &mut failed_count,
                        &mut failures,
                    );
                } else {
                    // Re-draw all samples from the point seed so sample 1 is
                    // reproduced exactly, then check each individually.
                    let mut rng = point_rng(*seed, point);
                    for _ in 0..*count {
                        draw(&mut rng, &mut target);
                        let (verdict, _) = run_one(&target, false, &mut loaded, &mut stale_lines);
                        record(
                            verdict,
                            1,
                            &target,
                            &mut images_checked,
                            &mut failed_count,
                            &mut failures,
                        );
                    }
                }
            }
        }
    }

    Ok(CrashReport { images_checked, failures, failed_count, mode: check.mode })
}

/// Bring the scratch device's content to `target`, rewriting only lines that
/// differ from the mirror or were dirtied by a recovery run.
fn patch_scratch(
    scratch: &Device,
    loaded: &mut [u8],
    target: &[u8],
    stale_lines: &mut std::collections::BTreeSet<u64>,
) {
    for line in std::mem::take(stale_lines) {
        let start = line as usize * LINE;
        scratch.sim_patch(start as u64, &target[start..start + LINE]);
        loaded[start..start + LINE].copy_from_slice(&target[start..start + LINE]);
    }
    let mut start = 0usize;
    while start < target.len() {
        let end = start + LINE;
        if loaded[start..end] != target[start..end] {
            scratch.sim_patch(start as u64, &target[start..end]);
            loaded[start..end].copy_from_slice(&target[start..end]);
        }
        start = end;
    }
}

fn diff_lines(image: &[u8], final_content: &[u8]) -> Vec<(u64, String)> {
    let mut out = Vec::new();
    let mut start = 0usize;
    while start < image.len() && out.len() < MAX_DIFF_LINES {
        let end = start + LINE;
        if image[start..end] != final_content[start..end] {
            out.push(((start / LINE) as u64, hex(&image[start..end])));
        }
        start = end;
    }
    out
}
