//! Machine-readable and text reports.

use std::collections::BTreeSet;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::analysis::{Analysis, AnalysisConfig};
use crate::meltdown::{MalwareFinding, MalwareKind};
use crate::spectre::Detection;
use crate::taint::TaintMode;

pub const TOOL: &str = "specguard";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub conditional_branches: usize,
    pub tb: usize,
    pub tb_rs: usize,
    pub tb_sw: usize,
    pub meltdown: usize,
    pub malware: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub program: String,
    pub mode: TaintMode,
    pub sew: u32,
    pub counts: Counts,
    pub detections: Vec<Detection>,
    pub malware: Vec<MalwareFinding>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Json,
    Text,
}

impl Counts {
    pub fn from_findings(branches: usize, dets: &[Detection], malware: &[MalwareFinding]) -> Self {
        let tb: BTreeSet<_> = dets.iter().map(|d| d.tb).collect();
        let tb_rs: BTreeSet<_> = dets.iter().filter_map(|d| Some((d.tb, d.rs?))).collect();
        let tb_sw: BTreeSet<_> = dets.iter().filter_map(|d| Some((d.tb, d.sw?))).collect();
        let count = |k| malware.iter().filter(|m| m.kind == k).count();
        Counts {
            conditional_branches: branches,
            tb: tb.len(),
            tb_rs: tb_rs.len(),
            tb_sw: tb_sw.len(),
            meltdown: count(MalwareKind::Meltdown),
            malware: count(MalwareKind::PrimeProbe),
        }
    }
}

impl Report {
    pub fn new(program: &str, config: &AnalysisConfig, a: &Analysis) -> Self {
        let branches = a.cfg.instructions().filter(|i| i.is_branch()).count();
        let malware: Vec<MalwareFinding> = a.meltdown.iter().chain(&a.malware).cloned().collect();
        Report {
            tool: TOOL.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            program: program.to_string(),
            mode: config.taint.mode,
            sew: config.window.sew,
            counts: Counts::from_findings(branches, &a.spectre, &malware),
            detections: a.spectre.clone(),
            malware,
            warnings: a.warnings.clone(),
        }
    }

    pub fn has_findings(&self) -> bool {
        !self.detections.is_empty() || !self.malware.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let c = &self.counts;
        let _ = writeln!(out, "{}: mode {} sew {}", self.program, self.mode, self.sew);
        let _ = writeln!(
            out,
            "  branches {}  TB {}  <TB,RS> {}  <TB,SW> {}  meltdown {}  malware {}",
            c.conditional_branches, c.tb, c.tb_rs, c.tb_sw, c.meltdown, c.malware
        );
        for d in &self.detections {
            let _ = write!(out, "  {} tb={}", d.kind, d.tb);
            for (name, id) in [("rs", d.rs), ("ls", d.ls), ("sw", d.sw)] {
                if let Some(id) = id {
                    let _ = write!(out, " {name}={id}");
                }
            }
            for (k, v) in &d.deltas {
                let _ = write!(out, " d[{k}]={v}");
            }
            out.push('\n');
        }
        for m in &self.malware {
            match m.kind {
                MalwareKind::Meltdown => {
                    let _ = writeln!(out, "  MELTDOWN l1={} im1={}", m.ua, m.ls);
                }
                MalwareKind::PrimeProbe => {
                    let prime: Vec<String> = m.prime_seq.iter().map(|i| i.to_string()).collect();
                    let probe: Vec<String> =
                        m.probe_seq.iter().map(|(a, b, c)| format!("<{a},{b},{c}>")).collect();
                    let _ = writeln!(
                        out,
                        "  PRIME_PROBE set={} ua={} ls={} prime=[{}] probe=[{}]",
                        m.cache_set.unwrap_or_default(),
                        m.ua,
                        m.ls,
                        prime.join(" "),
                        probe.join(" ")
                    );
                }
            }
        }
        for w in &self.warnings {
            let _ = writeln!(out, "  warning: {w}");
        }
        out
    }

    pub fn emit(&self, format: Format) -> String {
        match format {
            Format::Json => self.to_json(),
            Format::Text => self.to_text(),
        }
    }
}
