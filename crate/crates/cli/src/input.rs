//! Simulation input files.
//!
//! One entry per line, `#` starts a comment:
//!
//! ```text
//! fread: 04 01 00 00 00 00 00 00   # bytes returned by calls to fread
//! @secret: 2a 2a 2a                # initial bytes of a region
//! %cr3: 0x1234                     # privileged register value
//! ```

use anyhow::{anyhow, bail, Context, Result};
use specguard_core::SimInput;

fn hex_bytes(s: &str) -> Result<Vec<u8>> {
    s.split_whitespace()
        .map(|b| u8::from_str_radix(b.trim_start_matches("0x"), 16).with_context(|| format!("bad hex byte `{b}`")))
        .collect()
}

fn number(s: &str) -> Result<u64> {
    let s = s.trim();
    match s.strip_prefix("0x") {
        Some(h) => u64::from_str_radix(h, 16),
        None => s.parse(),
    }
    .with_context(|| format!("bad number `{s}`"))
}

pub fn parse_input(text: &str) -> Result<SimInput> {
    let mut input = SimInput::default();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once(':').ok_or_else(|| anyhow!("line {}: expected `name: bytes`", no + 1))?;
        let key = key.trim();
        let ctx = || format!("line {}", no + 1);
        if let Some(region) = key.strip_prefix('@') {
            input.memory.insert(region.to_string(), hex_bytes(value).with_context(ctx)?);
        } else if let Some(class) = key.strip_prefix('%') {
            input.sysregs.insert(class.to_string(), number(value).with_context(ctx)?);
        } else if key.is_empty() {
            bail!("line {}: missing source name", no + 1);
        } else {
            input.sources.entry(key.to_string()).or_default().extend(hex_bytes(value).with_context(ctx)?);
        }
    }
    Ok(input)
}
