//! AVR instruction subset, assembly front end and execution-path flattening.
//!
//! Programs are written in the small dialect used by the bundled fixtures:
//! one instruction per line, `label:` lines and `;` comments. Instructions
//! before a `loop:` label form the setup block; everything from `loop:` on
//! is the loop body that gets fingerprinted.

mod catalog;
mod path;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) use catalog::hex;
pub use catalog::{Catalog, CatalogEntry, OpClass};
pub use path::{
    flatten_paths, flatten_paths_with_cap, inject, remove, Branch, ExecutionPath, DEFAULT_PATH_CAP,
};

/// Label that marks the start of the loop body.
pub const LOOP_LABEL: &str = "loop";
/// Conventional label for the setup block. Never a branch target.
pub const SETUP_LABEL: &str = "setup";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Instruction {
    pub mnemonic: String,
    pub operands: Vec<String>,
    /// Effective duration. For a conditional branch inside an
    /// [`ExecutionPath`] this is already the taken/not-taken duration.
    pub cycles: u32,
    pub op_class: OpClass,
    pub taken_cycles: Option<u32>,
    /// Set on conditional branches once a path has fixed their outcome.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<Branch>,
}

impl Instruction {
    pub fn is_conditional_branch(&self) -> bool {
        self.op_class == OpClass::Branch && self.taken_cycles.is_some()
    }

    pub fn is_unconditional_branch(&self) -> bool {
        self.op_class == OpClass::Branch && self.taken_cycles.is_none()
    }

    pub fn branch_target(&self) -> Option<&str> {
        if self.op_class == OpClass::Branch {
            self.operands.first().map(String::as_str)
        } else {
            None
        }
    }

    pub fn is_taken_branch(&self) -> bool {
        self.resolved == Some(Branch::Taken)
    }

    pub(crate) fn resolved(&self, taken: bool) -> Instruction {
        let mut ins = self.clone();
        if let Some(t) = self.taken_cycles {
            if taken {
                ins.cycles = t;
            }
            ins.resolved = Some(if taken {
                Branch::Taken
            } else {
                Branch::NotTaken
            });
        }
        ins
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.mnemonic)?;
        if !self.operands.is_empty() {
            write!(f, " {}", self.operands.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Program {
    pub name: String,
    pub setup: Vec<Instruction>,
    pub loop_body: Vec<Instruction>,
    /// Label name to loop-body index. Always contains [`LOOP_LABEL`] at 0.
    pub labels: BTreeMap<String, usize>,
}

impl Program {
    pub fn loop_cycles(&self) -> u64 {
        self.loop_body.iter().map(|i| i.cycles as u64).sum()
    }

    /// Loop-body indices of the conditional branches.
    pub fn branch_sites(&self) -> Vec<usize> {
        self.loop_body
            .iter()
            .enumerate()
            .filter(|(_, i)| i.is_conditional_branch())
            .map(|(idx, _)| idx)
            .collect()
    }

    /// Assembly text that [`parse_program`] maps back to this program.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if !self.setup.is_empty() {
            out.push_str(&format!("{SETUP_LABEL}:\n"));
            for ins in &self.setup {
                out.push_str(&format!("    {ins}\n"));
            }
        }
        let mut by_index: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (name, &idx) in &self.labels {
            by_index.entry(idx).or_default().push(name);
        }
        for names in by_index.values_mut() {
            names.sort_by_key(|n| (*n != LOOP_LABEL, *n));
        }
        for idx in 0..=self.loop_body.len() {
            if let Some(names) = by_index.get(&idx) {
                for name in names {
                    out.push_str(&format!("{name}:\n"));
                }
            }
            if let Some(ins) = self.loop_body.get(idx) {
                out.push_str(&format!("    {ins}\n"));
            }
        }
        out
    }
}

/// Parses assembly source into a [`Program`].
pub fn parse_program(name: &str, source: &str, catalog: &Catalog) -> Result<Program> {
    let mut items: Vec<(Instruction, usize)> = Vec::new();
    let mut all_labels: BTreeMap<String, usize> = BTreeMap::new();
    let mut loop_pos: Option<usize> = None;

    for (idx, raw) in source.lines().enumerate() {
        let line = idx + 1;
        let mut text = raw.split(';').next().unwrap_or("").trim();
        // A label may share its line with an instruction: `loop: nop`.
        while let Some(colon) = text.find(':') {
            let label = text[..colon].trim();
            if !is_identifier(label) {
                return Err(Error::Parse {
                    line,
                    msg: format!("malformed label `{label}`"),
                });
            }
            if all_labels.insert(label.to_string(), items.len()).is_some() {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate label `{label}`"),
                });
            }
            if label == LOOP_LABEL {
                loop_pos = Some(items.len());
            }
            text = text[colon + 1..].trim();
        }
        if text.is_empty() {
            continue;
        }
        let (mnemonic, rest) = match text.find(char::is_whitespace) {
            Some(pos) => (&text[..pos], text[pos..].trim()),
            None => (text, ""),
        };
        let operands: Vec<String> = if rest.is_empty() {
            Vec::new()
        } else {
            rest.split(',').map(|s| s.trim().to_string()).collect()
        };
        let ins = catalog.instruction(mnemonic, operands)?;
        validate_operands(&ins, line)?;
        items.push((ins, line));
    }

    // Instructions before `loop:` are setup; labels there are not targets.
    let split = loop_pos.unwrap_or(0);
    let body = items.split_off(split);
    let setup = items;
    let mut labels: BTreeMap<String, usize> = all_labels
        .into_iter()
        .filter(|(n, pos)| *pos >= split && n != SETUP_LABEL)
        .map(|(n, pos)| (n, pos - split))
        .collect();
    labels.insert(LOOP_LABEL.to_string(), 0);

    if body.is_empty() {
        return Err(Error::EmptyLoop(name.to_string()));
    }
    for (ins, line) in setup.iter().chain(body.iter()) {
        if let Some(target) = ins.branch_target() {
            match labels.get(target) {
                Some(&idx) if idx < body.len() => {}
                _ => {
                    return Err(Error::Parse {
                        line: *line,
                        msg: format!("unresolved label `{target}`"),
                    })
                }
            }
        }
    }

    Ok(Program {
        name: name.to_string(),
        setup: setup.into_iter().map(|(i, _)| i).collect(),
        loop_body: body.into_iter().map(|(i, _)| i).collect(),
        labels,
    })
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn is_immediate(s: &str) -> bool {
    let s = s.strip_prefix('-').unwrap_or(s);
    if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        !hex.is_empty() && hex.chars().all(|c| c.is_ascii_hexdigit())
    } else if let Some(bin) = s.strip_prefix("0b").or_else(|| s.strip_prefix("0B")) {
        !bin.is_empty() && bin.chars().all(|c| c == '0' || c == '1')
    } else {
        !s.is_empty() && s.chars().all(|c| c.is_ascii_digit())
    }
}

fn register_number(s: &str) -> Option<Option<u32>> {
    let digits = s.strip_prefix('r').or_else(|| s.strip_prefix('R'))?;
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    Some(digits.parse().ok().filter(|n| *n < 32))
}

fn validate_operands(ins: &Instruction, line: usize) -> Result<()> {
    let bad = |msg: String| Error::Parse { line, msg };
    if ins.op_class == OpClass::Branch {
        return match ins.operands.as_slice() {
            [target] if is_identifier(target) => Ok(()),
            _ => Err(bad(format!("`{}` expects one label operand", ins.mnemonic))),
        };
    }
    for op in &ins.operands {
        match register_number(op) {
            Some(Some(_)) => continue,
            Some(None) => return Err(bad(format!("register `{op}` out of range"))),
            None => {}
        }
        if !(is_immediate(op) || is_identifier(op)) {
            return Err(bad(format!("malformed operand `{op}`")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    fn cat() -> Catalog {
        Catalog::avr_default()
    }

    #[test]
    fn parses_program_b_listing() {
        let p = parse_program("b", corpus::PROGRAM_B_SRC, &cat()).unwrap();
        assert_eq!(p.setup.len(), 1);
        assert_eq!(p.setup[0].to_string(), "sbi ddrb, 6");
        assert_eq!(p.loop_body.len(), 18);
        assert_eq!(p.labels["loop"], 0);
        assert_eq!(p.labels["first_label"], 7);
        assert_eq!(p.branch_sites(), vec![5]);
    }

    #[test]
    fn empty_loop_is_rejected() {
        let err = parse_program("e", "setup:\n sbi ddrb, 6\nloop:\n", &cat()).unwrap_err();
        assert!(matches!(err, Error::EmptyLoop(_)));
    }

    #[test]
    fn unknown_mnemonic_is_named() {
        let err = parse_program("x", "loop:\n xyz r1\n", &cat()).unwrap_err();
        assert!(matches!(err, Error::UnknownMnemonic(ref m) if m == "xyz"));
    }

    #[test]
    fn unresolved_label_reports_line() {
        let err = parse_program("x", "loop:\n nop\n\n rjmp nowhere\n", &cat()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
    }

    #[test]
    fn malformed_operand_reports_line() {
        let err = parse_program("x", "loop:\n add r1, r2\n add r1, $$\n", &cat()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_program("x", "loop:\n add r1, r40\n", &cat()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_program("x", "loop:\n add r1,\n", &cat()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn listing_without_loop_label_loops_entirely() {
        let p = parse_program("x", "nop\nstart: add r1, r2\nrjmp start\n", &cat()).unwrap();
        assert!(p.setup.is_empty());
        assert_eq!(p.loop_body.len(), 3);
        assert_eq!(p.labels["start"], 1);
        assert_eq!(p.labels["loop"], 0);
    }

    #[test]
    fn render_round_trips_fixtures() {
        for (name, src) in corpus::SOURCES {
            let p = parse_program(name, src, &cat()).unwrap();
            let again = parse_program(name, &p.render(), &cat()).unwrap();
            assert_eq!(p, again, "{name}");
        }
    }
}
