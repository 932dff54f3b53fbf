//! Per-epoch guest access traces, synthetic or read from a trace file.
//!
//! Every generator is a pure function of `(spec, epoch)`: the page layout is
//! derived from the spec seed once, and each epoch draws from its own RNG
//! stream keyed by the epoch index.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mem::{GvaPage, PAGES_PER_REGION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Access {
    pub gva: GvaPage,
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AccessTrace {
    pub epoch: u64,
    pub accesses: Vec<Access>,
}

impl AccessTrace {
    pub fn len(&self) -> usize {
        self.accesses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accesses.is_empty()
    }
}

/// `regions` huge regions, each with `hot_pages` hot base pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScatterGroup {
    pub regions: u64,
    pub hot_pages: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadKind {
    /// Uniform accesses over a random `hot_fraction` of the mapped pages.
    UniformHot { hot_fraction: f64 },
    /// Gaussian key popularity over `keys` keys placed on shuffled pages.
    GaussianKv { keys: u64, gaussian_sigma: f64 },
    /// `pages_hot_per_region` hot pages in each of `hot_regions` regions.
    MasimSkew { hot_regions: u64, pages_hot_per_region: u32 },
    /// Explicit hot-set sizes per region group.
    ScatterSet { groups: Vec<ScatterGroup> },
    /// Replay of a trace file.
    Trace { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub rss_pages: u64,
    pub accesses_per_epoch: u64,
    #[serde(default)]
    pub write_fraction: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("cannot read trace {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
}

fn mix(seed: u64, salt: u64) -> u64 {
    crate::mem::content_token(seed, GvaPage(salt))
}

/// A validated workload with its page layout resolved.
#[derive(Debug, Clone)]
pub struct Workload {
    spec: WorkloadSpec,
    layout: Layout,
}

#[derive(Debug, Clone)]
enum Layout {
    /// Sampled uniformly each epoch.
    Uniform(Vec<GvaPage>),
    /// Key index to page.
    Keys { pages: Vec<GvaPage>, normal: Normal<f64> },
    /// Visited round-robin, continuing where the previous epoch stopped.
    Cycle(Vec<GvaPage>),
    Replay(Vec<AccessTrace>),
}

impl Workload {
    pub fn new(spec: WorkloadSpec) -> Result<Self, WorkloadError> {
        let invalid = |m: String| Err(WorkloadError::Invalid(m));
        if spec.accesses_per_epoch == 0 {
            return invalid("accesses_per_epoch must be positive".into());
        }
        if spec.rss_pages < PAGES_PER_REGION {
            return invalid(format!("rss_pages must be at least {PAGES_PER_REGION}"));
        }
        if !(0.0..=1.0).contains(&spec.write_fraction) {
            return invalid("write_fraction must lie in [0, 1]".into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.rng_seed, u64::MAX));
        let full_regions = spec.rss_pages / PAGES_PER_REGION;
        let layout = match &spec.kind {
            WorkloadKind::UniformHot { hot_fraction } => {
                if !(*hot_fraction > 0.0 && *hot_fraction <= 1.0) {
                    return invalid("hot_fraction must lie in (0, 1]".into());
                }
                let n = ((spec.rss_pages as f64 * hot_fraction).round() as u64).max(1);
                let mut pages: Vec<GvaPage> = index::sample(&mut rng, spec.rss_pages as usize, n as usize)
                    .into_iter()
                    .map(|i| GvaPage(i as u64))
                    .collect();
                pages.sort_unstable();
                Layout::Uniform(pages)
            }
            WorkloadKind::GaussianKv { keys, gaussian_sigma } => {
                if *keys == 0 || *keys > spec.rss_pages {
                    return invalid("keys must lie in [1, rss_pages]".into());
                }
                if !(*gaussian_sigma > 0.0 && gaussian_sigma.is_finite()) {
                    return invalid("gaussian_sigma must be positive".into());
                }
                let pages = index::sample(&mut rng, spec.rss_pages as usize, *keys as usize)
                    .into_iter()
                    .map(|i| GvaPage(i as u64))
                    .collect();
                let normal = Normal::new(*keys as f64 / 2.0, *gaussian_sigma)
                    .map_err(|e| WorkloadError::Invalid(e.to_string()))?;
                Layout::Keys { pages, normal }
            }
            WorkloadKind::MasimSkew { hot_regions, pages_hot_per_region } => {
                if *hot_regions == 0 || *hot_regions > full_regions {
                    return invalid(format!("hot_regions must lie in [1, {full_regions}]"));
                }
                if !(1..=PAGES_PER_REGION as u32).contains(pages_hot_per_region) {
                    return invalid("pages_hot_per_region must lie in [1, 512]".into());
                }
                let hot = hot_regions * u64::from(*pages_hot_per_region);
                if spec.accesses_per_epoch < hot {
                    return invalid(format!("accesses_per_epoch must cover all {hot} hot pages"));
                }
                let groups = [ScatterGroup { regions: *hot_regions, hot_pages: *pages_hot_per_region }];
                Layout::Cycle(scatter_pages(&mut rng, full_regions, &groups))
            }
            WorkloadKind::ScatterSet { groups } => {
                let total: u64 = groups.iter().map(|g| g.regions).sum();
                if groups.is_empty() || total == 0 {
                    return invalid("scatter_set needs at least one region".into());
                }
                if total > full_regions {
                    return invalid(format!("scatter_set uses {total} regions but rss holds {full_regions}"));
                }
                if groups.iter().any(|g| !(1..=PAGES_PER_REGION as u32).contains(&g.hot_pages)) {
                    return invalid("hot_pages must lie in [1, 512]".into());
                }
                Layout::Cycle(scatter_pages(&mut rng, full_regions, groups))
            }
            WorkloadKind::Trace { path } => {
                let traces = ingest_trace(path)?;
                let beyond = traces.iter().flat_map(|t| &t.accesses).find(|a| a.gva.0 >= spec.rss_pages);
                if let Some(a) = beyond {
                    return invalid(format!("trace touches page {} beyond rss_pages {}", a.gva, spec.rss_pages));
                }
                Layout::Replay(traces)
            }
        };
        Ok(Self { spec, layout })
    }

    /// Wraps already-parsed traces. Epochs past the end are empty.
    pub fn from_traces(rss_pages: u64, traces: Vec<AccessTrace>) -> Self {
        let spec = WorkloadSpec {
            kind: WorkloadKind::Trace { path: PathBuf::new() },
            rss_pages,
            accesses_per_epoch: traces.iter().map(|t| t.len() as u64).max().unwrap_or(0),
            write_fraction: 0.0,
            rng_seed: 0,
        };
        Self { spec, layout: Layout::Replay(traces) }
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    /// Distinct pages the generator can touch, when it has a fixed hot set.
    pub fn hot_set(&self) -> Option<&[GvaPage]> {
        match &self.layout {
            Layout::Uniform(p) | Layout::Cycle(p) => Some(p),
            _ => None,
        }
    }

    pub fn generate_epoch(&self, epoch: u64) -> AccessTrace {
        let n = self.spec.accesses_per_epoch as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.spec.rng_seed, epoch));
        let wf = self.spec.write_fraction;
        let op = |rng: &mut ChaCha8Rng| if wf > 0.0 && rng.random::<f64>() < wf { Op::Write } else { Op::Read };
        let accesses = match &self.layout {
            Layout::Uniform(pages) => (0..n)
                .map(|_| {
                    let gva = pages[rng.random_range(0..pages.len())];
                    Access { gva, op: op(&mut rng) }
                })
                .collect(),
            Layout::Keys { pages, normal } => (0..n)
                .map(|_| {
                    let key = loop {
                        let k = normal.sample(&mut rng).floor();
                        if k >= 0.0 && (k as usize) < pages.len() {
                            break k as usize;
                        }
                    };
                    Access { gva: pages[key], op: op(&mut rng) }
                })
                .collect(),
            Layout::Cycle(pages) => {
                let start = (epoch as u128 * n as u128 % pages.len() as u128) as usize;
                (0..n)
                    .map(|i| Access { gva: pages[(start + i) % pages.len()], op: op(&mut rng) })
                    .collect()
            }
            Layout::Replay(traces) => {
                return traces
                    .get(epoch as usize)
                    .cloned()
                    .map(|mut t| {
                        t.epoch = epoch;
                        t
                    })
                    .unwrap_or(AccessTrace { epoch, accesses: Vec::new() });
            }
        };
        AccessTrace { epoch, accesses }
    }
}

/// Validates `spec` and generates one epoch.
pub fn generate_epoch(spec: &WorkloadSpec, epoch: u64) -> Result<AccessTrace, WorkloadError> {
    Ok(Workload::new(spec.clone())?.generate_epoch(epoch))
}

/// Picks distinct full regions for the groups in shuffled order, then distinct
/// hot offsets inside each. Returned pages are sorted.
fn scatter_pages(rng: &mut ChaCha8Rng, full_regions: u64, groups: &[ScatterGroup]) -> Vec<GvaPage> {
    let total: u64 = groups.iter().map(|g| g.regions).sum();
    let regions = index::sample(rng, full_regions as usize, total as usize).into_vec();
    let mut pages = Vec::new();
    let mut next = regions.into_iter();
    for g in groups {
        for _ in 0..g.regions {
            let r = next.next().expect("region count checked") as u64;
            for off in index::sample(rng, PAGES_PER_REGION as usize, g.hot_pages as usize) {
                pages.push(GvaPage(r * PAGES_PER_REGION + off as u64));
            }
        }
    }
    pages.sort_unstable();
    pages
}

/// Largest epoch number a trace file may use.
pub const MAX_TRACE_EPOCH: u64 = 1 << 20;

/// Parses `<epoch> <gva_page> <R|W>` lines. `#` starts a comment.
///
/// The result is indexed by epoch; epochs absent from the file yield empty traces.
pub fn parse_trace(text: &str) -> Result<Vec<AccessTrace>, TraceError> {
    let mut traces: Vec<AccessTrace> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| TraceError::Parse { line: line_no, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(format!("expected 3 fields, found {}", fields.len())));
        }
        let epoch: u64 = fields[0].parse().map_err(|_| parse_err(format!("bad epoch {:?}", fields[0])))?;
        let gva: u64 = fields[1].parse().map_err(|_| parse_err(format!("bad page {:?}", fields[1])))?;
        let op = match fields[2] {
            "R" => Op::Read,
            "W" => Op::Write,
            other => return Err(parse_err(format!("bad op {other:?}"))),
        };
        if epoch > MAX_TRACE_EPOCH {
            return Err(parse_err(format!("epoch {epoch} exceeds {MAX_TRACE_EPOCH}")));
        }
        let e = epoch as usize;
        if e >= traces.len() {
            let start = traces.len() as u64;
            traces.extend((start..=epoch).map(|epoch| AccessTrace { epoch, accesses: Vec::new() }));
        }
        traces[e].accesses.push(Access { gva: GvaPage(gva), op });
    }
    Ok(traces)
}

pub fn ingest_trace(path: &Path) -> Result<Vec<AccessTrace>, TraceError> {
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io { path: path.to_owned(), source })?;
    parse_trace(&text)
}
