//! The end-to-end pipeline: parse results in, detections and repairs out.

use serde::{Deserialize, Serialize};

use crate::cdg::{control_dependence, Cdg};
use crate::cfg::{build_cfg, Cfg, CfgError};
use crate::dependence::{reaching_definitions, value_set_analysis, DefUse, ValueSet};
use crate::ir::Program;
use crate::meltdown::{alignment_warnings, detect_malware, detect_meltdown, protected_set, CacheGeometry, MalwareFinding};
use crate::repair::{apply_fences, plan_fences, PatchPlan, RepairError};
use crate::spectre::{detect_spectre, Detection, SpecWindow};
use crate::taint::{analyze_taint, TaintConfig, TaintState};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub taint: TaintConfig,
    pub window: SpecWindow,
    /// Malware scanning needs a geometry; without one it is skipped.
    pub geometry: Option<CacheGeometry>,
    /// Regions treated as protected in addition to those marked so.
    pub protected: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Cfg(#[from] CfgError),
    #[error(transparent)]
    Repair(#[from] RepairError),
    #[error("unknown region `{0}` given as protected")]
    UnknownProtected(String),
    #[error("repair did not converge after {0} rounds")]
    NoConvergence(usize),
}

pub struct Analysis {
    pub cfg: Cfg,
    pub cdg: Cdg,
    pub values: ValueSet,
    pub defuse: DefUse,
    pub taint: TaintState,
    pub spectre: Vec<Detection>,
    pub meltdown: Vec<MalwareFinding>,
    pub malware: Vec<MalwareFinding>,
    pub warnings: Vec<String>,
}

impl Analysis {
    pub fn has_findings(&self) -> bool {
        !(self.spectre.is_empty() && self.meltdown.is_empty() && self.malware.is_empty())
    }
}

/// Runs every analysis and detector on `p`.
pub fn analyze(p: &Program, config: &AnalysisConfig) -> Result<Analysis, AnalysisError> {
    if let Some(r) = config.protected.iter().find(|r| p.region(r).is_none()) {
        return Err(AnalysisError::UnknownProtected(r.clone()));
    }
    let cfg = build_cfg(p)?;
    let cdg = control_dependence(&cfg);
    let values = value_set_analysis(&cfg);
    let defuse = reaching_definitions(&cfg, &values);
    let taint = analyze_taint(&cfg, &defuse, &cdg, &config.taint);
    let spectre = detect_spectre(&cfg, &taint, &defuse, config.window);
    let ka = protected_set(cfg.program(), &config.protected);
    let meltdown = detect_meltdown(&cfg, &defuse, &ka);

    let mut warnings: Vec<String> = cfg.warnings().to_vec();
    warnings.extend(cdg.warnings.iter().cloned());
    warnings.extend(values.warnings.iter().cloned());
    warnings.extend(taint.warnings.iter().cloned());
    let malware = match &config.geometry {
        Some(g) => {
            warnings.extend(alignment_warnings(cfg.program(), g));
            detect_malware(&cfg, &defuse, g, &ka, config.window)
        }
        None => Vec::new(),
    };
    Ok(Analysis { cfg, cdg, values, defuse, taint, spectre, meltdown, malware, warnings })
}

/// Maximum plan/apply rounds in [`repair_program`].
pub const MAX_REPAIR_ROUNDS: usize = 8;

#[derive(Clone, Debug)]
pub struct Repaired {
    pub program: Program,
    /// One plan per round, each against the program of that round.
    pub plans: Vec<PatchPlan>,
    /// Detections each round's plan was made from.
    pub detections: Vec<Vec<Detection>>,
}

impl Repaired {
    pub fn fences(&self) -> usize {
        self.plans.iter().map(|p| p.patches.len()).sum()
    }
}

/// Plans and applies fences until no Spectre detection remains.
pub fn repair_program(p: &Program, config: &AnalysisConfig) -> Result<Repaired, AnalysisError> {
    let mut cur = p.clone();
    cur.renumber();
    let mut plans = Vec::new();
    let mut detections = Vec::new();
    for _ in 0..MAX_REPAIR_ROUNDS {
        let a = analyze(&cur, config)?;
        if a.spectre.is_empty() {
            return Ok(Repaired { program: cur, plans, detections });
        }
        let plan = plan_fences(&a.spectre);
        cur = apply_fences(&cur, &plan)?;
        plans.push(plan);
        detections.push(a.spectre);
    }
    if analyze(&cur, config)?.spectre.is_empty() {
        Ok(Repaired { program: cur, plans, detections })
    } else {
        Err(AnalysisError::NoConvergence(MAX_REPAIR_ROUNDS))
    }
}
