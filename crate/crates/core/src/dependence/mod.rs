//! Data dependence: value sets, abstract locations and def-use chains.

mod defuse;
mod vsa;

pub use defuse::{reaching_definitions, DefUse, Entity, Use, UseRole};
pub use vsa::{
    eval_binop, eval_unop, resolve_addr, resolve_memref, transfer, value_set_analysis, AbstractLoc,
    RegState, Summary, ValueSet, WIDEN_AFTER,
};
