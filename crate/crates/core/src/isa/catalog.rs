use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::Instruction;

const AVR_CATALOG: &str = include_str!("../../fixtures/avr_catalog.csv");
const CALIBRATED_CATALOG: &str = include_str!("../../fixtures/calibrated_catalog.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpClass {
    Arithmetic,
    Logic,
    Flag,
    Branch,
    Transfer,
    Io,
    Nop,
}

impl OpClass {
    pub const ALL: [OpClass; 7] = [
        OpClass::Arithmetic,
        OpClass::Logic,
        OpClass::Flag,
        OpClass::Branch,
        OpClass::Transfer,
        OpClass::Io,
        OpClass::Nop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpClass::Arithmetic => "arithmetic",
            OpClass::Logic => "logic",
            OpClass::Flag => "flag",
            OpClass::Branch => "branch",
            OpClass::Transfer => "transfer",
            OpClass::Io => "io",
            OpClass::Nop => "nop",
        }
    }
}

impl fmt::Display for OpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        OpClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown op class `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CatalogEntry {
    pub cycles: u32,
    pub op_class: OpClass,
    /// Duration when a conditional branch is taken. `None` for everything
    /// that is not a conditional branch.
    pub taken_cycles: Option<u32>,
}

/// Data-driven instruction table: `mnemonic,cycles,op_class[,taken_cycles]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    entries: BTreeMap<String, CatalogEntry>,
}

impl Catalog {
    /// Datasheet timings (one cycle per ALU/flag op, two for `sbi`,
    /// `rjmp` and a taken `breq`).
    pub fn avr_default() -> Self {
        Self::parse(AVR_CATALOG).expect("bundled catalog is valid")
    }

    /// Tick table used together with one sample per cycle to reproduce the
    /// reference capture lengths exactly.
    pub fn calibrated() -> Self {
        Self::parse(CALIBRATED_CATALOG).expect("bundled calibrated catalog is valid")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Catalog { line, msg };
            let fields: Vec<&str> = content.split(',').map(str::trim).collect();
            if fields.len() == 3 && fields[0] == "mnemonic" {
                continue; // header
            }
            if !(3..=4).contains(&fields.len()) {
                return Err(err(format!("expected 3 or 4 fields, got {}", fields.len())));
            }
            let mnemonic = fields[0].to_ascii_lowercase();
            if mnemonic.is_empty() || !mnemonic.chars().all(|c| c.is_ascii_alphanumeric()) {
                return Err(err(format!("bad mnemonic `{}`", fields[0])));
            }
            let cycles: u32 = fields[1]
                .parse()
                .map_err(|_| err(format!("bad cycle count `{}`", fields[1])))?;
            if cycles == 0 {
                return Err(err("cycle count must be at least 1".into()));
            }
            let op_class: OpClass = fields[2].parse().map_err(err)?;
            let taken_cycles = match fields.get(3) {
                Some(t) => {
                    let t: u32 = t
                        .parse()
                        .map_err(|_| err(format!("bad taken cycle count `{t}`")))?;
                    if t == 0 || op_class != OpClass::Branch {
                        return Err(err("taken_cycles only valid (and >= 1) for branches".into()));
                    }
                    Some(t)
                }
                None => None,
            };
            if entries
                .insert(
                    mnemonic.clone(),
                    CatalogEntry {
                        cycles,
                        op_class,
                        taken_cycles,
                    },
                )
                .is_some()
            {
                return Err(err(format!("duplicate mnemonic `{mnemonic}`")));
            }
        }
        Ok(Catalog { entries })
    }

    pub fn get(&self, mnemonic: &str) -> Option<&CatalogEntry> {
        self.entries.get(mnemonic)
    }

    pub fn contains(&self, mnemonic: &str) -> bool {
        self.entries.contains_key(mnemonic)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn mnemonics(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Builds an [`Instruction`] for `mnemonic`, failing if the catalog does
    /// not know it.
    pub fn instruction<S: Into<String>>(
        &self,
        mnemonic: &str,
        operands: impl IntoIterator<Item = S>,
    ) -> Result<Instruction> {
        let key = mnemonic.to_ascii_lowercase();
        let entry = self
            .get(&key)
            .ok_or_else(|| Error::UnknownMnemonic(key.clone()))?;
        Ok(Instruction {
            mnemonic: key,
            operands: operands.into_iter().map(Into::into).collect(),
            cycles: entry.cycles,
            op_class: entry.op_class,
            taken_cycles: entry.taken_cycles,
            resolved: None,
        })
    }

    /// Canonical text form, one entry per line in mnemonic order.
    pub fn render(&self) -> String {
        let mut out = String::from("mnemonic,cycles,op_class\n");
        for (m, e) in &self.entries {
            out.push_str(&format!("{m},{},{}", e.cycles, e.op_class));
            if let Some(t) = e.taken_cycles {
                out.push_str(&format!(",{t}"));
            }
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical rendering, hex encoded.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.render().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
