//! Static detection and fence-based repair of speculative-execution victim
//! code (bounds-check bypass loads and stores) and Meltdown-style attack code,
//! over a small RISC-like IR. A concrete simulator with a branch
//! misprediction model serves as a leakage oracle.

pub mod analysis;
pub mod cdg;
pub mod cfg;
pub mod corpus;
pub mod dependence;
pub mod ir;
pub mod meltdown;
pub mod repair;
pub mod report;
pub mod sim;
pub mod spectre;
pub mod taint;

pub use analysis::{analyze, repair_program, Analysis, AnalysisConfig, AnalysisError, Repaired};
pub use cdg::{control_dependence, Cdg};
pub use cfg::{build_cfg, instruction_distance, speculative_distance, Cfg};
pub use dependence::{reaching_definitions, resolve_addr, value_set_analysis, AbstractLoc, DefUse, Summary, ValueSet};
pub use ir::{parse_program, print_program, InstId, Program};
pub use meltdown::{cache_set_of, CacheGeometry, MalwareFinding, MalwareKind};
pub use repair::{apply_fences, plan_fences, PatchPlan};
pub use report::{Counts, Format, Report};
pub use sim::{
    differential_check, leaks_secret, simulate, DiffConfig, MispredictPolicy, SimConfig, SimError, SimInput, SpecTrace,
    Verdict,
};
pub use spectre::{Detection, DetectionKind, SpecWindow, DEFAULT_SEW};
pub use taint::{TaintConfig, TaintMode, TaintState};
