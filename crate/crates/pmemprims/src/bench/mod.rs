//! Benchmark harness behind the `pmemprims bench` command.
//!
//! Five experiment shapes: `bandwidth` (random block-aligned accesses of 1-12
//! adjacent cache lines), `latency` (dependent-load chains and per-store
//! persists), `log` (append throughput across entry sizes), `flush` (page
//! flushes across dirty-line counts), and `ycsb` (write-heavy key-value loop,
//! one log append per transaction).
//!
//! Real-backend rows report timing; simulated rows report structural metrics
//! (fences per op, bytes stored per op, repeated line persists), which makes
//! simulated CSV output byte-identical for identical spec and seed.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::device::{Device, DeviceConfig, BLOCK_SIZE, CACHE_LINE_SIZE};
use crate::error::{Error, Result};
use crate::page::{DirtyMask, PageStore, PageStoreConfig};
use crate::wal::{entry_footprint, Log, LogAlgorithm, LogOptions, StoreFlavor};

pub const CSV_HEADER: &str = "experiment,algo,threads,param,ops_per_s,bytes_per_s,ns_mean,ns_p50,ns_p99,fences_per_op,bytes_per_op,repeat_lines";

/// Default entry-size sweep for `log` (payload bytes).
pub const LOG_SWEEP: &[u32] = &[56, 64, 128, 192, 256, 320, 384, 448, 512];
/// Default dirty-line sweep for `flush`.
pub const FLUSH_SWEEP: &[u32] = &[1, 16, 32, 48, 64, 80, 96, 112, 128, 160, 192, 224, 256];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Bandwidth,
    Latency,
    Log,
    Flush,
    Ycsb,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::Bandwidth => "bandwidth",
            Experiment::Latency => "latency",
            Experiment::Log => "log",
            Experiment::Flush => "flush",
            Experiment::Ycsb => "ycsb",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "bandwidth" => Ok(Experiment::Bandwidth),
            "latency" => Ok(Experiment::Latency),
            "log" => Ok(Experiment::Log),
            "flush" => Ok(Experiment::Flush),
            "ycsb" => Ok(Experiment::Ycsb),
            other => Err(format!("unknown experiment {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchBackend {
    Real,
    Sim,
}

impl std::str::FromStr for BenchBackend {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(BenchBackend::Real),
            "sim" | "simulated" => Ok(BenchBackend::Sim),
            other => Err(format!("unknown backend {other:?}")),
        }
    }
}

/// Store/load flavor for bandwidth and latency runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Plain,
    PlainWriteback,
    Streaming,
    Load,
}

impl Flavor {
    pub fn name(&self) -> &'static str {
        match self {
            Flavor::Plain => "plain",
            Flavor::PlainWriteback => "plain+writeback",
            Flavor::Streaming => "streaming",
            Flavor::Load => "load",
        }
    }
}

impl std::str::FromStr for Flavor {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "plain" => Ok(Flavor::Plain),
            "plain+writeback" | "plain_writeback" | "clwb" => Ok(Flavor::PlainWriteback),
            "streaming" => Ok(Flavor::Streaming),
            "load" => Ok(Flavor::Load),
            other => Err(format!("unknown flavor {other:?}")),
        }
    }
}

/// Flush technique selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushAlgo {
    Cow,
    MicroLog,
    Hybrid,
}

impl FlushAlgo {
    pub fn name(&self) -> &'static str {
        match self {
            FlushAlgo::Cow => "cow",
            FlushAlgo::MicroLog => "mulog",
            FlushAlgo::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for FlushAlgo {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "cow" => Ok(FlushAlgo::Cow),
            "mulog" | "micro-log" | "microlog" => Ok(FlushAlgo::MicroLog),
            "hybrid" => Ok(FlushAlgo::Hybrid),
            other => Err(format!("unknown flush algorithm {other:?}")),
        }
    }
}

/// One benchmark request.
#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub experiment: Experiment,
    pub backend: BenchBackend,
    pub threads: u32,
    /// Bandwidth: sweep 1..=adjacent_lines.
    pub adjacent_lines: u32,
    pub flavor: Flavor,
    /// Log/ycsb payload bytes; `None` sweeps [`LOG_SWEEP`].
    pub entry_size: Option<u32>,
    pub aligned: bool,
    pub algo: LogAlgorithm,
    pub flush_algo: FlushAlgo,
    /// Flush dirty-line count; `None` sweeps [`FLUSH_SWEEP`].
    pub dirty: Option<u32>,
    pub ops: u64,
    pub seed: u64,
    /// Total bandwidth/latency working set in bytes.
    pub working_set: u64,
    /// Backing file for the real backend; a file under the system temp
    /// directory is used (and removed) when absent.
    pub path: Option<PathBuf>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            experiment: Experiment::Log,
            backend: BenchBackend::Sim,
            threads: 1,
            adjacent_lines: 12,
            flavor: Flavor::Streaming,
            entry_size: None,
            aligned: false,
            algo: LogAlgorithm::Zero,
            flush_algo: FlushAlgo::Cow,
            dirty: None,
            ops: 1000,
            seed: 42,
            working_set: 10 << 30,
            path: None,
        }
    }
}

impl BenchSpec {
    /// Range checks mirroring the experiment sweeps.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSpec(msg));
        if !(1..=31).contains(&self.threads) {
            return bad(format!("threads must be in [1,31], got {}", self.threads));
        }
        if !(1..=12).contains(&self.adjacent_lines) {
            return bad(format!("adjacent-lines must be in [1,12], got {}", self.adjacent_lines));
        }
        if let Some(size) = self.entry_size {
            if !(56..=512).contains(&size) {
                return bad(format!("entry-size must be in [56,512], got {size}"));
            }
        }
        if let Some(dirty) = self.dirty {
            if !(1..=256).contains(&dirty) {
                return bad(format!("dirty must be in [1,256], got {dirty}"));
            }
        }
        if self.ops == 0 && self.experiment != Experiment::Ycsb {
            return bad("ops must be positive".into());
        }
        match self.experiment {
            Experiment::Bandwidth | Experiment::Latency => {
                if self.backend == BenchBackend::Sim {
                    return bad(format!(
                        "{} is a timing experiment; the simulated backend has no timing",
                        self.experiment.name()
                    ));
                }
            }
            Experiment::Log | Experiment::Ycsb | Experiment::Flush => {
                if matches!(self.flavor, Flavor::Plain | Flavor::Load) {
                    return bad(format!(
                        "{} requires a persisting flavor (streaming or plain+writeback)",
                        self.experiment.name()
                    ));
                }
            }
        }
        Ok(())
    }

    fn store_flavor(&self) -> StoreFlavor {
        match self.flavor {
            Flavor::PlainWriteback => StoreFlavor::PlainWriteBack,
            _ => StoreFlavor::Streaming,
        }
    }
}

/// One CSV row. `None` fields print empty.
#[derive(Debug, Clone, Default)]
pub struct BenchRow {
    pub experiment: String,
    pub algo: String,
    pub threads: u32,
    pub param: u64,
    pub ops_per_s: Option<f64>,
    pub bytes_per_s: Option<f64>,
    pub ns_mean: Option<f64>,
    pub ns_p50: Option<f64>,
    pub ns_p99: Option<f64>,
    pub fences_per_op: Option<f64>,
    pub bytes_per_op: Option<f64>,
    pub repeat_lines: Option<u64>,
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => String::new(),
    }
}

impl BenchRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.algo,
            self.threads,
            self.param,
            fmt_opt_f64(self.ops_per_s),
            fmt_opt_f64(self.bytes_per_s),
            fmt_opt_f64(self.ns_mean),
            fmt_opt_f64(self.ns_p50),
            fmt_opt_f64(self.ns_p99),
            fmt_opt_f64(self.fences_per_op),
            fmt_opt_f64(self.bytes_per_op),
            self.repeat_lines.map(|v| v.to_string()).unwrap_or_default(),
        )
    }
}

/// Render header plus rows.
pub fn write_csv(rows: &[BenchRow], out: &mut dyn std::io::Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for row in rows {
        writeln!(out, "{}", row.to_csv_line())?;
    }
    Ok(())
}

/// Run a benchmark spec to completion.
pub fn run(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    match spec.experiment {
        Experiment::Bandwidth => run_bandwidth(spec),
        Experiment::Latency => run_latency(spec),
        Experiment::Log => run_log(spec),
        Experiment::Flush => run_flush(spec),
        Experiment::Ycsb => run_ycsb(spec),
    }
}

fn block_round(n: u64) -> u64 {
    n.div_ceil(BLOCK_SIZE) * BLOCK_SIZE
}

/// Backing file for real-backend runs, removed on drop when temporary.
struct BackingFile {
    path: PathBuf,
    temporary: bool,
}

impl BackingFile {
    fn new(spec: &BenchSpec, tag: &str) -> BackingFile {
        match &spec.path {
            Some(p) => BackingFile { path: p.clone(), temporary: false },
            None => BackingFile {
                path: std::env::temp_dir()
                    .join(format!("pmemprims-bench-{}-{tag}.dat", std::process::id())),
                temporary: true,
            },
        }
    }
}

impl Drop for BackingFile {
    fn drop(&mut self) {
        if self.temporary {
            let _ = std::fs::remove_file(&self.path);
        }
    }
}

fn open_device(spec: &BenchSpec, capacity: u64, tag: &str) -> Result<(Device, Option<BackingFile>)> {
    match spec.backend {
        BenchBackend::Sim => {
            Ok((Device::open(DeviceConfig::simulated(capacity), None)?, None))
        }
        BenchBackend::Real => {
            let file = BackingFile::new(spec, tag);
            // Timing runs skip per-line stat tracking.
            let config = DeviceConfig::real(capacity).with_detailed_stats(false);
            let device = Device::open(config, Some(&file.path))?;
            Ok((device, Some(file)))
        }
    }
}

fn percentile(sorted: &[u64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx] as f64
}

/// Random block-aligned stores/loads of `k` adjacent cache lines, one row per
/// k in `1..=adjacent_lines`.
fn run_bandwidth(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    let capacity = block_round(spec.working_set.max(BLOCK_SIZE * 16));
    let file = BackingFile::new(spec, "bandwidth");
    let config = DeviceConfig::real(capacity).with_detailed_stats(false);
    let device = Device::open(config, Some(&file.path))?;

    let mut rows = Vec::new();
    for k in 1..=spec.adjacent_lines {
        let span = k as u64 * CACHE_LINE_SIZE;
        let blocks = capacity / BLOCK_SIZE - span.div_ceil(BLOCK_SIZE);
        let ops_per_thread = spec.ops / spec.threads as u64;
        let start = Instant::now();
        std::thread::scope(|scope| {
            for t in 0..spec.threads {
                let device = &device;
                let spec = spec;
                scope.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (t as u64) << 32 ^ k as u64);
                    let buf = vec![0xa5u8; span as usize];
                    let mut sink = vec![0u8; span as usize];
                    for _ in 0..ops_per_thread {
                        let offset = rng.gen_range(0..blocks) * BLOCK_SIZE;
                        match spec.flavor {
                            Flavor::Plain => device.store(offset, &buf).unwrap(),
                            Flavor::PlainWriteback => {
                                device.store(offset, &buf).unwrap();
                                device.write_back_range(offset, span).unwrap();
                            }
                            Flavor::Streaming => device.store_streaming(offset, &buf).unwrap(),
                            Flavor::Load => device.read_into(offset, &mut sink).unwrap(),
                        }
                    }
                    device.fence();
                });
            }
        });
        let elapsed = start.elapsed().as_secs_f64();
        let total_ops = ops_per_thread * spec.threads as u64;
        rows.push(BenchRow {
            experiment: "bandwidth".into(),
            algo: spec.flavor.name().into(),
            threads: spec.threads,
            param: k as u64,
            ops_per_s: Some(total_ops as f64 / elapsed),
            bytes_per_s: Some((total_ops * span) as f64 / elapsed),
            ..BenchRow::default()
        });
    }
    Ok(rows)
}

/// Dependent-load chain latency plus persistent-store latency for same-line,
/// sequential, and random targets.
fn run_latency(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    let capacity = block_round(spec.working_set.max(BLOCK_SIZE * 16));
    let (device, _file) = open_device(spec, capacity, "latency")?;
    let mut rows = Vec::new();

    // Pointer chain over block-aligned cells: a random cycle, each cell
    // holding the byte offset of the next. The chained loads prevent
    // out-of-order overlap, so elapsed/ops is the raw access latency.
    {
        let cells = (capacity / BLOCK_SIZE).min(1 << 20);
        let mut order: Vec<u64> = (0..cells).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for w in 0..cells as usize {
            let here = order[w] * BLOCK_SIZE;
            let next = order[(w + 1) % cells as usize] * BLOCK_SIZE;
            device.store(here, &next.to_le_bytes())?;
        }
        let mut at = order[0] * BLOCK_SIZE;
        let mut buf = [0u8; 8];
        let start = Instant::now();
        for _ in 0..spec.ops {
            device.read_into(at, &mut buf)?;
            at = u64::from_le_bytes(buf);
        }
        let elapsed = start.elapsed().as_nanos() as f64;
        std::hint::black_box(at);
        rows.push(BenchRow {
            experiment: "latency".into(),
            algo: "read_chain".into(),
            threads: 1,
            param: 0,
            ns_mean: Some(elapsed / spec.ops as f64),
            ..BenchRow::default()
        });
    }

    let line = vec![0x5au8; CACHE_LINE_SIZE as usize];
    let lines_total = capacity / CACHE_LINE_SIZE;
    for (name, mode) in [("same_line", 0u8), ("sequential", 1), ("random", 2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x77);
        let mut samples = Vec::with_capacity(spec.ops.min(1 << 20) as usize);
        let mut seq = 0u64;
        for _ in 0..spec.ops {
            let offset = match mode {
                0 => 0,
                1 => {
                    let o = (seq % lines_total) * CACHE_LINE_SIZE;
                    seq += 1;
                    o
                }
                _ => rng.gen_range(0..lines_total) * CACHE_LINE_SIZE,
            };
            let t0 = Instant::now();
            match spec.flavor {
                Flavor::Streaming => device.store_streaming(offset, &line)?,
                Flavor::Load => unreachable!("validated out"),
                Flavor::Plain => device.store(offset, &line)?,
                Flavor::PlainWriteback => {
                    device.store(offset, &line)?;
                    device.write_back(offset)?;
                }
            }
            device.fence();
            samples.push(t0.elapsed().as_nanos() as u64);
        }
        samples.sort_unstable();
        let mean = samples.iter().sum::<u64>() as f64 / samples.len() as f64;
        rows.push(BenchRow {
            experiment: "latency".into(),
            algo: format!("write_{name}_{}", spec.flavor.name()),
            threads: 1,
            param: 0,
            ns_mean: Some(mean),
            ns_p50: Some(percentile(&samples, 0.50)),
            ns_p99: Some(percentile(&samples, 0.99)),
            ..BenchRow::default()
        });
    }
    Ok(rows)
}

fn seeded_payload(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut buf = vec![0u8; len];
    rng.fill(&mut buf[..]);
    buf
}

/// Append throughput / structural cost across entry sizes.
fn run_log(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    let sizes: Vec<u32> = match spec.entry_size {
        Some(s) => vec![s],
        None => LOG_SWEEP.to_vec(),
    };
    let mut rows = Vec::new();
    for &size in &sizes {
        let footprint = entry_footprint(spec.algo, spec.aligned, size as u64);
        let header_area = 64u64 * 64; // covers HeaderDance(64)
        let capacity = block_round(header_area + (spec.ops + 1) * footprint);
        let (device, _file) = open_device(spec, capacity, &format!("log{size}"))?;
        let opts = LogOptions::new(spec.algo, 0, capacity)
            .aligned(spec.aligned)
            .flavor(spec.store_flavor());
        let mut log = Log::create(&device, opts)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ size as u64);
        let payload = seeded_payload(&mut rng, size as usize);
        device.reset_stats();
        let start = Instant::now();
        for _ in 0..spec.ops {
            log.append(&payload)?;
        }
        let elapsed = start.elapsed().as_secs_f64();
        let stats = device.stats();
        let mut row = BenchRow {
            experiment: "log".into(),
            algo: spec.algo.name().into(),
            threads: 1,
            param: size as u64,
            ..BenchRow::default()
        };
        match spec.backend {
            BenchBackend::Real => {
                row.ops_per_s = Some(spec.ops as f64 / elapsed);
                row.bytes_per_s = Some(stats.bytes_stored as f64 / elapsed);
            }
            BenchBackend::Sim => {
                row.fences_per_op = Some(stats.barriers as f64 / spec.ops as f64);
                row.bytes_per_op = Some(stats.bytes_stored as f64 / spec.ops as f64);
                row.repeat_lines = Some(stats.repeat_persist_lines);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Page-flush throughput / structural cost across dirty-line counts.
fn run_flush(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    let dirty_counts: Vec<u32> = match spec.dirty {
        Some(d) => vec![d],
        None => FLUSH_SWEEP.to_vec(),
    };
    let mut rows = Vec::new();
    for &d in &dirty_counts {
        let threads = if spec.backend == BenchBackend::Sim { 1 } else { spec.threads };
        let config = PageStoreConfig::new(threads as usize * 3, threads as usize)
            .flavor(spec.store_flavor());
        let capacity = block_round(config.required_capacity());
        let (device, _file) = open_device(spec, capacity, &format!("flush{d}"))?;
        let store = PageStore::create(&device, config.clone())?;

        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ d as u64);
        let image = seeded_payload(&mut rng, config.page_size as usize);
        let mask = DirtyMask::from_lines(0..d as u16);
        // Every pid needs a durable slot before micro-log flushes apply.
        for t in 0..threads {
            store.flush_cow(t as u64 + 1, &image)?;
        }
        device.reset_stats();

        let ops_per_thread = spec.ops / threads as u64;
        let start = Instant::now();
        std::thread::scope(|scope| {
            for t in 0..threads {
                let store = &store;
                let image = &image;
                scope.spawn(move || {
                    let pid = t as u64 + 1;
                    for _ in 0..ops_per_thread {
                        match spec.flush_algo {
                            FlushAlgo::Cow => store.flush_cow(pid, image).unwrap(),
                            FlushAlgo::MicroLog => {
                                store.flush_mulog(t as usize, pid, image, &mask).unwrap()
                            }
                            FlushAlgo::Hybrid => {
                                store.flush_hybrid(t as usize, pid, image, &mask).map(|_| ()).unwrap()
                            }
                        }
                    }
                });
            }
        });
        let elapsed = start.elapsed().as_secs_f64();
        let total_ops = ops_per_thread * threads as u64;
        let stats = device.stats();
        let mut row = BenchRow {
            experiment: "flush".into(),
            algo: spec.flush_algo.name().into(),
            threads,
            param: d as u64,
            ..BenchRow::default()
        };
        match spec.backend {
            BenchBackend::Real => {
                row.ops_per_s = Some(total_ops as f64 / elapsed);
                row.bytes_per_s = Some(stats.bytes_stored as f64 / elapsed);
            }
            BenchBackend::Sim => {
                row.fences_per_op = Some(stats.barriers as f64 / total_ops as f64);
                row.bytes_per_op = Some(stats.bytes_stored as f64 / total_ops as f64);
                row.repeat_lines = Some(stats.repeat_persist_lines);
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Write-heavy key-value loop: every update appends one log entry.
fn run_ycsb(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    if spec.ops == 0 {
        return Ok(Vec::new());
    }
    const KEYS: usize = 1024;
    const VALUE_LEN: usize = 100;
    let payload_len = 8 + VALUE_LEN as u64;
    let footprint = entry_footprint(spec.algo, spec.aligned, payload_len);
    let capacity = block_round(64 * 64 + (spec.ops + 1) * footprint);
    let (device, _file) = open_device(spec, capacity, "ycsb")?;
    let opts = LogOptions::new(spec.algo, 0, capacity)
        .aligned(spec.aligned)
        .flavor(spec.store_flavor());
    let mut log = Log::create(&device, opts)?;

    let mut table = vec![[0u8; VALUE_LEN]; KEYS];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut entry = vec![0u8; 8 + VALUE_LEN];
    device.reset_stats();
    let start = Instant::now();
    for _ in 0..spec.ops {
        let key = rng.gen_range(0..KEYS);
        let mut value = [0u8; VALUE_LEN];
        rng.fill(&mut value[..]);
        table[key] = value;
        entry[0..8].copy_from_slice(&(key as u64).to_le_bytes());
        entry[8..].copy_from_slice(&value);
        log.append(&entry)?;
    }
    let elapsed = start.elapsed().as_secs_f64();
    std::hint::black_box(&table);
    let stats = device.stats();

    let mut row = BenchRow {
        experiment: "ycsb".into(),
        algo: spec.algo.name().into(),
        threads: 1,
        param: payload_len,
        ..BenchRow::default()
    };
    match spec.backend {
        BenchBackend::Real => {
            row.ops_per_s = Some(spec.ops as f64 / elapsed);
            row.bytes_per_s = Some(stats.bytes_stored as f64 / elapsed);
        }
        BenchBackend::Sim => {
            row.fences_per_op = Some(stats.barriers as f64 / spec.ops as f64);
            row.bytes_per_op = Some(stats.bytes_stored as f64 / spec.ops as f64);
            row.repeat_lines = Some(stats.repeat_persist_lines);
        }
    }
    Ok(vec![row])
}

#[cfg(test)]
mod tests;
