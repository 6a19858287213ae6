//! Spectre v1, v1.1 and v1.2 victim patterns within the speculation window.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::cfg::{distances_from, Cfg};
use crate::dependence::{DefUse, UseRole};
use crate::ir::{InstId, Instruction};
use crate::taint::{TaintState, WitnessStep};

/// Default window: twice a 224-entry reorder buffer.
pub const DEFAULT_SEW: u32 = 448;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecWindow {
    pub sew: u32,
}

impl SpecWindow {
    pub fn new(sew: u32) -> Option<Self> {
        (sew >= 1).then_some(SpecWindow { sew })
    }

    /// Window of a machine with a reorder buffer of `rob` entries.
    pub fn from_rob(rob: u32) -> Self {
        SpecWindow { sew: rob.saturating_mul(2).max(1) }
    }

    fn admits(self, d: Option<u32>) -> Option<u32> {
        d.filter(|d| *d <= self.sew)
    }
}

impl Default for SpecWindow {
    fn default() -> Self {
        SpecWindow { sew: DEFAULT_SEW }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectionKind {
    #[serde(rename = "V1")]
    V1,
    #[serde(rename = "V1_WEAK")]
    V1Weak,
    #[serde(rename = "V1_1")]
    V1_1,
    #[serde(rename = "V1_2")]
    V1_2,
}

impl fmt::Display for DetectionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectionKind::V1 => "V1",
            DetectionKind::V1Weak => "V1_WEAK",
            DetectionKind::V1_1 => "V1_1",
            DetectionKind::V1_2 => "V1_2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub kind: DetectionKind,
    pub tb: InstId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rs: Option<InstId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ls: Option<InstId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sw: Option<InstId>,
    pub deltas: BTreeMap<String, u32>,
    pub witness: BTreeMap<String, Vec<WitnessStep>>,
}

impl Detection {
    fn sort_key(&self) -> (InstId, InstId, Option<InstId>, DetectionKind) {
        (self.tb, self.rs.or(self.sw).unwrap_or(self.tb), self.ls, self.kind)
    }

    /// The instruction a fence must precede: RS for v1 kinds, SW otherwise.
    pub fn anchor(&self) -> InstId {
        self.rs.or(self.sw).expect("every detection has RS or SW")
    }
}

fn sort(mut v: Vec<Detection>) -> Vec<Detection> {
    v.sort_by_key(Detection::sort_key);
    v.dedup_by_key(|d| d.sort_key());
    v
}

fn tainted_branches<'a>(cfg: &'a Cfg, ts: &'a TaintState) -> impl Iterator<Item = &'a Instruction> {
    cfg.instructions().filter(|i| i.is_branch() && ts.is_inst_tainted(i.id))
}

fn addr_witness(ts: &TaintState, inst: &Instruction) -> Vec<WitnessStep> {
    inst.mem_ref()
        .and_then(|m| m.index.as_ref())
        .map(|r| ts.reg_witness(inst.id, r))
        .unwrap_or_default()
}

/// RS candidates: loads with a tainted address within the window of `tb`.
fn read_candidates<'a>(
    cfg: &'a Cfg,
    ts: &'a TaintState,
    w: SpecWindow,
    dist: &'a [Option<u32>],
) -> impl Iterator<Item = (&'a Instruction, u32)> {
    cfg.instructions().filter_map(move |i| {
        let ok = i.is_load() && ts.is_addr_tainted(i.id);
        ok.then(|| w.admits(dist[i.id.index()]).map(|d| (i, d))).flatten()
    })
}

/// Tainted branch, tainted-address read and a dependent tainted-address
/// access, both within the window of the branch.
pub fn detect_v1(cfg: &Cfg, ts: &TaintState, du: &DefUse, w: SpecWindow) -> Vec<Detection> {
    let mut out = Vec::new();
    let mut closures: BTreeMap<InstId, (BTreeSet<InstId>, Vec<Option<u32>>)> = BTreeMap::new();
    for tb in tainted_branches(cfg, ts) {
        let dist = distances_from(cfg, tb.id, true);
        for (rs, d_rs) in read_candidates(cfg, ts, w, &dist) {
            let (closure, from_rs) = closures
                .entry(rs.id)
                .or_insert_with(|| (du.forward_closure(rs.id), distances_from(cfg, rs.id, true)));
            for ls in cfg.instructions() {
                if ls.id == rs.id || !ls.is_mem() || !ts.is_addr_tainted(ls.id) {
                    continue;
                }
                let Some(d_ls) = w.admits(dist[ls.id.index()]) else { continue };
                let Some(d_rl) = from_rs[ls.id.index()] else { continue };
                if !du.dep_in(rs.id, closure, ls.id, Some(UseRole::Address)) {
                    continue;
                }
                out.push(Detection {
                    kind: DetectionKind::V1,
                    tb: tb.id,
                    rs: Some(rs.id),
                    ls: Some(ls.id),
                    sw: None,
                    deltas: BTreeMap::from([
                        ("tb_rs".into(), d_rs),
                        ("tb_ls".into(), d_ls),
                        ("rs_ls".into(), d_rl),
                    ]),
                    witness: BTreeMap::from([
                        ("tb".into(), ts.witness(tb.id)),
                        ("rs_addr".into(), addr_witness(ts, rs)),
                        ("ls_addr".into(), addr_witness(ts, ls)),
                    ]),
                });
            }
        }
    }
    sort(out)
}

/// Tainted branch and tainted-address read within its window.
pub fn detect_v1_weak(cfg: &Cfg, ts: &TaintState, w: SpecWindow) -> Vec<Detection> {
    let mut out = Vec::new();
    for tb in tainted_branches(cfg, ts) {
        let dist = distances_from(cfg, tb.id, true);
        for (rs, d) in read_candidates(cfg, ts, w, &dist) {
            out.push(Detection {
                kind: DetectionKind::V1Weak,
                tb: tb.id,
                rs: Some(rs.id),
                ls: None,
                sw: None,
                deltas: BTreeMap::from([("tb_rs".into(), d)]),
                witness: BTreeMap::from([
                    ("tb".into(), ts.witness(tb.id)),
                    ("rs_addr".into(), addr_witness(ts, rs)),
                ]),
            });
        }
    }
    sort(out)
}

/// Tainted branch and tainted-address store within its window. Stores into
/// a read-only region are v1.2, others v1.1.
pub fn detect_v1_1(cfg: &Cfg, ts: &TaintState, du: &DefUse, w: SpecWindow) -> Vec<Detection> {
    let p = cfg.program();
    let mut out = Vec::new();
    for tb in tainted_branches(cfg, ts) {
        let dist = distances_from(cfg, tb.id, true);
        for sw in cfg.instructions() {
            if !sw.is_store() || !ts.is_addr_tainted(sw.id) {
                continue;
            }
            let Some(d) = w.admits(dist[sw.id.index()]) else { continue };
            let readonly = du
                .loc(sw.id)
                .and_then(|l| l.region.as_deref())
                .and_then(|r| p.region(r))
                .is_some_and(|r| r.readonly);
            out.push(Detection {
                kind: if readonly { DetectionKind::V1_2 } else { DetectionKind::V1_1 },
                tb: tb.id,
                rs: None,
                ls: None,
                sw: Some(sw.id),
                deltas: BTreeMap::from([("tb_sw".into(), d)]),
                witness: BTreeMap::from([
                    ("tb".into(), ts.witness(tb.id)),
                    ("sw_addr".into(), addr_witness(ts, sw)),
                ]),
            });
        }
    }
    sort(out)
}

/// All Spectre detections, with weak pairs already explained by a v1 triple
/// of the same branch dropped: a weak pair whose read is the RS or LS of such
/// a triple adds nothing.
pub fn detect_spectre(cfg: &Cfg, ts: &TaintState, du: &DefUse, w: SpecWindow) -> Vec<Detection> {
    let v1 = detect_v1(cfg, ts, du, w);
    let covered: BTreeSet<(InstId, InstId)> = v1
        .iter()
        .flat_map(|d| [(d.tb, d.rs.unwrap()), (d.tb, d.ls.unwrap())])
        .collect();
    let weak = detect_v1_weak(cfg, ts, w)
        .into_iter()
        .filter(|d| !covered.contains(&(d.tb, d.rs.unwrap())));
    let mut all: Vec<Detection> = v1.into_iter().chain(weak).collect();
    all.extend(detect_v1_1(cfg, ts, du, w));
    sort(all)
}
