//! Meltdown signatures and Prime+Probe malware sequences.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cfg::{distances_from, Cfg};
use crate::dependence::{AbstractLoc, DefUse, UseRole};
use crate::ir::{InstId, InstKind, Program};
use crate::spectre::SpecWindow;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheGeometry {
    pub num_sets: u64,
    pub ways: u32,
    pub line_size: u64,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum GeometryError {
    #[error("cache geometry must be SETS:WAYS:LINESIZE, got `{0}`")]
    Format(String),
    #[error("cache geometry fields must be at least 1")]
    Zero,
    #[error("number of cache sets must be a power of two, got {0}")]
    NotPowerOfTwo(u64),
}

impl CacheGeometry {
    pub fn new(num_sets: u64, ways: u32, line_size: u64) -> Result<Self, GeometryError> {
        if num_sets == 0 || ways == 0 || line_size == 0 {
            return Err(GeometryError::Zero);
        }
        if !num_sets.is_power_of_two() {
            return Err(GeometryError::NotPowerOfTwo(num_sets));
        }
        Ok(CacheGeometry { num_sets, ways, line_size })
    }

    /// Global line index of an address.
    pub fn line_of(&self, addr: u64) -> u64 {
        addr / self.line_size
    }

    pub fn set_of(&self, addr: u64) -> u64 {
        self.line_of(addr) % self.num_sets
    }
}

impl FromStr for CacheGeometry {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || GeometryError::Format(s.to_string());
        if parts.len() != 3 {
            return Err(bad());
        }
        let sets = parts[0].trim().parse().map_err(|_| bad())?;
        let ways = parts[1].trim().parse().map_err(|_| bad())?;
        let line = parts[2].trim().parse().map_err(|_| bad())?;
        CacheGeometry::new(sets, ways, line)
    }
}

impl fmt::Display for CacheGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.num_sets, self.ways, self.line_size)
    }
}

/// set(addr) for a location with an exact offset; `None` otherwise.
pub fn cache_set_of(g: &CacheGeometry, p: &Program, loc: &AbstractLoc) -> Option<u64> {
    loc.exact_addr(p).map(|a| g.set_of(a))
}

/// Regions whose base is not line aligned under `g`.
pub fn alignment_warnings(p: &Program, g: &CacheGeometry) -> Vec<String> {
    p.regions
        .iter()
        .filter(|r| r.base % g.line_size != 0)
        .map(|r| format!("region `{}` base {:#x} is not aligned to {}-byte lines", r.name, r.base, g.line_size))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MalwareKind {
    #[serde(rename = "MELTDOWN")]
    Meltdown,
    #[serde(rename = "PRIME_PROBE")]
    PrimeProbe,
}

/// A probe: timing read, memory access, timing read.
pub type Probe = (InstId, InstId, InstId);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalwareFinding {
    pub kind: MalwareKind,
    /// L1 for Meltdown, the unauthorized access for Prime+Probe.
    pub ua: InstId,
    /// IM1 for Meltdown, the secret-dependent access for Prime+Probe.
    pub ls: InstId,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prime_seq: Vec<InstId>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub probe_seq: Vec<Probe>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_set: Option<u64>,
}

/// KA: regions carrying the protected attribute plus `extra`.
pub fn protected_set(p: &Program, extra: &[String]) -> BTreeSet<String> {
    p.regions
        .iter()
        .filter(|r| r.protected)
        .map(|r| r.name.clone())
        .chain(extra.iter().cloned())
        .collect()
}

fn touches_protected(loc: &AbstractLoc, ka: &BTreeSet<String>) -> bool {
    if ka.is_empty() {
        return false;
    }
    loc.is_unbounded() || loc.region.as_ref().is_some_and(|r| ka.contains(r))
}

/// Loads whose address may fall in KA, paired with memory accesses whose
/// address depends on the loaded value.
pub fn detect_meltdown(cfg: &Cfg, du: &DefUse, ka: &BTreeSet<String>) -> Vec<MalwareFinding> {
    let mut out = Vec::new();
    for l1 in cfg.instructions().filter(|i| i.is_load()) {
        if !du.loc(l1.id).is_some_and(|l| touches_protected(l, ka)) {
            continue;
        }
        let closure = du.forward_closure(l1.id);
        for im1 in cfg.instructions().filter(|i| i.is_mem() && i.id != l1.id) {
            if du.dep_in(l1.id, &closure, im1.id, Some(UseRole::Address)) {
                out.push(MalwareFinding {
                    kind: MalwareKind::Meltdown,
                    ua: l1.id,
                    ls: im1.id,
                    prime_seq: Vec::new(),
                    probe_seq: Vec::new(),
                    cache_set: None,
                });
            }
        }
    }
    out
}

/// Exact-address memory accesses, with their line index, mapping to `set`.
fn accesses_in_set(cfg: &Cfg, du: &DefUse, g: &CacheGeometry, set: u64) -> Vec<(InstId, u64)> {
    let p = cfg.program();
    cfg.instructions()
        .filter(|i| i.is_mem())
        .filter_map(|i| {
            let a = du.loc(i.id)?.exact_addr(p)?;
            (g.set_of(a) == set).then_some((i.id, g.line_of(a)))
        })
        .collect()
}

struct Reach<'a> {
    cfg: &'a Cfg,
    cache: BTreeMap<InstId, Vec<Option<u32>>>,
}

impl Reach<'_> {
    /// Whether `b` executes strictly after `a` on some path.
    fn after(&mut self, a: InstId, b: InstId) -> bool {
        if a == b {
            return false;
        }
        let cfg = self.cfg;
        self.cache.entry(a).or_insert_with(|| distances_from(cfg, a, false))[b.index()].is_some()
    }
}

/// Greedily extends chains of items ordered by reachability until `ways`
/// distinct lines are covered.
fn chains<T: Copy + Ord>(
    items: &[(T, InstId, u64)],
    ways: usize,
    reach: &mut Reach<'_>,
) -> Vec<Vec<T>> {
    let mut out = BTreeSet::new();
    for start in 0..items.len() {
        let mut seq = vec![items[start].0];
        let mut lines = BTreeSet::from([items[start].2]);
        let mut last = items[start].1;
        for it in &items[start + 1..] {
            if lines.len() >= ways {
                break;
            }
            if !lines.contains(&it.2) && reach.after(last, it.1) {
                seq.push(it.0);
                lines.insert(it.2);
                last = it.1;
            }
        }
        if lines.len() == ways {
            out.insert(seq);
        }
    }
    out.into_iter().collect()
}

fn prime_with(cfg: &Cfg, du: &DefUse, g: &CacheGeometry, set: u64, reach: &mut Reach<'_>) -> Vec<Vec<InstId>> {
    let items: Vec<(InstId, InstId, u64)> =
        accesses_in_set(cfg, du, g, set).into_iter().map(|(i, l)| (i, i, l)).collect();
    chains(&items, g.ways as usize, reach)
}

/// Instruction sequences along a path that fill every way of `set`.
pub fn detect_prime(cfg: &Cfg, du: &DefUse, g: &CacheGeometry, set: u64) -> Vec<Vec<InstId>> {
    prime_with(cfg, du, g, set, &mut Reach { cfg, cache: BTreeMap::new() })
}

/// Accesses to `set` bracketed by timing reads in the same block, with no
/// other memory access inside the bracket.
fn probe_triplets(cfg: &Cfg, du: &DefUse, g: &CacheGeometry, set: u64) -> Vec<(Probe, InstId, u64)> {
    let mut out = Vec::new();
    for (m, line) in accesses_in_set(cfg, du, g, set) {
        let (b, pos) = cfg.location(m);
        let insts = cfg.block_insts(b);
        let before = insts[..pos].iter().rev().find(|i| i.is_time() || i.is_mem());
        let after = insts[pos + 1..].iter().find(|i| i.is_time() || i.is_mem());
        if let (Some(ts), Some(te)) = (before, after) {
            if ts.is_time() && te.is_time() {
                out.push(((ts.id, m, te.id), m, line));
            }
        }
    }
    out
}

fn probe_with(cfg: &Cfg, du: &DefUse, g: &CacheGeometry, set: u64, reach: &mut Reach<'_>) -> Vec<Vec<Probe>> {
    chains(&probe_triplets(cfg, du, g, set), g.ways as usize, reach)
}

/// Timed probe sequences covering every way of `set`.
pub fn detect_probe(cfg: &Cfg, du: &DefUse, g: &CacheGeometry, set: u64) -> Vec<Vec<Probe>> {
    probe_with(cfg, du, g, set, &mut Reach { cfg, cache: BTreeMap::new() })
}

/// Unauthorized reads: loads that may touch X_sup and privileged register
/// reads.
fn unauthorized(cfg: &Cfg, du: &DefUse, xsup: &BTreeSet<String>) -> Vec<InstId> {
    cfg.instructions()
        .filter(|i| {
            matches!(i.kind, InstKind::ReadSys { .. })
                || (i.is_load() && du.loc(i.id).is_some_and(|l| touches_protected(l, xsup)))
        })
        .map(|i| i.id)
        .collect()
}

/// Prime, then an unauthorized read feeding a memory access, then a probe,
/// all on one cache set. At most one finding per set.
pub fn detect_malware(
    cfg: &Cfg,
    du: &DefUse,
    g: &CacheGeometry,
    xsup: &BTreeSet<String>,
    w: SpecWindow,
) -> Vec<MalwareFinding> {
    let mut secrets = Vec::new();
    for ua in unauthorized(cfg, du, xsup) {
        let closure = du.forward_closure(ua);
        let dist = distances_from(cfg, ua, true);
        for ls in cfg.instructions().filter(|i| i.is_mem() && i.id != ua) {
            let near = dist[ls.id.index()].is_some_and(|d| d <= w.sew);
            if near && du.dep_in(ua, &closure, ls.id, Some(UseRole::Address)) {
                secrets.push((ua, ls.id));
            }
        }
    }
    if secrets.is_empty() {
        return Vec::new();
    }

    let mut reach = Reach { cfg, cache: BTreeMap::new() };
    let mut out = Vec::new();
    for set in 0..g.num_sets {
        let primes = prime_with(cfg, du, g, set, &mut reach);
        if primes.is_empty() {
            continue;
        }
        let probes = probe_with(cfg, du, g, set, &mut reach);
        'found: for prime in &primes {
            let pend = *prime.last().unwrap();
            for &(ua, ls) in &secrets {
                if !reach.after(pend, ua) {
                    continue;
                }
                for probe in &probes {
                    if reach.after(ls, probe[0].0) {
                        out.push(MalwareFinding {
                            kind: MalwareKind::PrimeProbe,
                            ua,
                            ls,
                            prime_seq: prime.clone(),
                            probe_seq: probe.clone(),
                            cache_set: Some(set),
                        });
                        break 'found;
                    }
                }
            }
        }
    }
    out
}
