//! Database of instruction-pair-conditioned signal blocks.
//!
//! A block is the stretch of a capture belonging to one instruction, keyed
//! by that instruction and the one executed immediately before it. Blocks
//! are harvested from fingerprint programs: a pair surrounded by `nop`
//! padding, looped and captured many times.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::isa::{
    flatten_paths, Branch, Catalog, ExecutionPath, Instruction, OpClass, Program, LOOP_LABEL,
};
use crate::sim::{capture_set, derive_seed, EmissionConfig};

/// Default number of `nop`s on each side of a fingerprinted pair.
pub const DEFAULT_PAD: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PairKey {
    pub prev: String,
    pub cur: String,
    /// `cur` is a conditional branch that is taken. Taken and fall-through
    /// branches differ in duration, so they are stored separately.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub taken: bool,
}

impl PairKey {
    pub fn new(prev: impl Into<String>, cur: impl Into<String>) -> Self {
        PairKey {
            prev: prev.into(),
            cur: cur.into(),
            taken: false,
        }
    }

    pub fn taken(mut self) -> Self {
        self.taken = true;
        self
    }

    pub fn of(prev: &Instruction, cur: &Instruction) -> Self {
        PairKey {
            prev: prev.mnemonic.clone(),
            cur: cur.mnemonic.clone(),
            taken: cur.is_taken_branch(),
        }
    }

    /// File-name-safe form, e.g. `cp__breq_taken`.
    pub fn file_stem(&self) -> String {
        let suffix = if self.taken { "_taken" } else { "" };
        format!("{}__{}{suffix}", self.prev, self.cur)
    }

    fn validate(&self, catalog: &Catalog) -> Result<()> {
        for m in [&self.prev, &self.cur] {
            if !catalog.contains(m) {
                return Err(Error::UnknownMnemonic(m.clone()));
            }
        }
        if self.taken
            && catalog
                .get(&self.cur)
                .and_then(|e| e.taken_cycles)
                .is_none()
        {
            return Err(Error::Parameter(format!(
                "`{}` is not a conditional branch and cannot be taken",
                self.cur
            )));
        }
        Ok(())
    }
}

impl fmt::Display for PairKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}|{}", self.prev, self.cur)?;
        if self.taken {
            f.write_str(" taken")?;
        }
        f.write_str(")")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalBlock {
    pub key: PairKey,
    pub samples: Vec<f64>,
    pub capture_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub catalog_digest: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockLibrary {
    pub samples_per_cycle: usize,
    pub entries: BTreeMap<PairKey, Vec<SignalBlock>>,
    pub provenance: Provenance,
}

impl BlockLibrary {
    pub fn get(&self, key: &PairKey) -> Option<&[SignalBlock]> {
        self.entries.get(key).map(Vec::as_slice)
    }

    pub fn contains(&self, key: &PairKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn block_len(&self, key: &PairKey) -> Option<usize> {
        self.get(key)
            .and_then(|b| b.first())
            .map(|b| b.samples.len())
    }

    /// Keys from `keys` that the library lacks, in first-seen order.
    pub fn missing<'a>(&self, keys: impl IntoIterator<Item = &'a PairKey>) -> Vec<PairKey> {
        let mut seen = BTreeSet::new();
        keys.into_iter()
            .filter(|k| !self.contains(k) && seen.insert((*k).clone()))
            .cloned()
            .collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        for (key, blocks) in &self.entries {
            let Some(first) = blocks.first() else {
                return Err(Error::Format(format!("entry {key} is empty")));
            };
            let len = first.samples.len();
            if len == 0 || len % self.samples_per_cycle != 0 {
                return Err(Error::Format(format!(
                    "entry {key}: block length {len} is not a whole number of cycles"
                )));
            }
            if blocks
                .iter()
                .any(|b| b.samples.len() != len || &b.key != key)
            {
                return Err(Error::Format(format!(
                    "entry {key} has inconsistent blocks"
                )));
            }
        }
        Ok(())
    }
}

/// Consecutive instruction pairs of a loop iteration. Element `i` pairs
/// instruction `i` with its predecessor; the first instruction's
/// predecessor is the last one since the loop runs continuously.
pub fn pairs_of(path: &ExecutionPath) -> Vec<PairKey> {
    let n = path.len();
    (0..n)
        .map(|i| PairKey::of(&path.instructions[(i + n - 1) % n], &path.instructions[i]))
        .collect()
}

/// Every ordered pair of catalog mnemonics, plus the taken variant of each
/// conditional branch as `cur`.
pub fn full_pairs(catalog: &Catalog) -> BTreeSet<PairKey> {
    let mut out = BTreeSet::new();
    for prev in catalog.mnemonics() {
        for cur in catalog.mnemonics() {
            let key = PairKey::new(prev, cur);
            if catalog.get(cur).is_some_and(|e| e.taken_cycles.is_some()) {
                out.insert(key.clone().taken());
            }
            out.insert(key);
        }
    }
    out
}

/// Pairs occurring in any of `paths`.
pub fn corpus_pairs<'a>(paths: impl IntoIterator<Item = &'a ExecutionPath>) -> BTreeSet<PairKey> {
    paths.into_iter().flat_map(pairs_of).collect()
}

fn placeholder_operands(ins: &Instruction) -> Vec<String> {
    let ops: &[&str] = match (ins.mnemonic.as_str(), ins.op_class) {
        ("sbi", _) => &["pinb", "6"],
        ("ldi", _) => &["r16", "1"],
        ("ser", _) => &["r16"],
        ("clr" | "com" | "lsl" | "lsr" | "asr", _) => &["r1"],
        (_, OpClass::Arithmetic | OpClass::Logic | OpClass::Transfer) => &["r1", "r2"],
        _ => &[],
    };
    ops.iter().map(|s| s.to_string()).collect()
}

/// Loop programs isolating each pair between `pad` `nop`s on both sides,
/// in key order. Branches in the pair jump to the instruction right after
/// them so the layout is the same taken or not.
pub fn fingerprint_programs(
    pairs: &BTreeSet<PairKey>,
    pad: usize,
    catalog: &Catalog,
) -> Result<Vec<Program>> {
    if pad < 2 {
        return Err(Error::Parameter(format!(
            "nop pad must be at least 2, got {pad}"
        )));
    }
    pairs
        .iter()
        .map(|key| {
            key.validate(catalog)?;
            let nop = catalog.instruction("nop", Vec::<String>::new())?;
            let mut body: Vec<Instruction> = vec![nop.clone(); pad];
            let mut labels = BTreeMap::from([(LOOP_LABEL.to_string(), 0)]);
            for (slot, mnemonic) in [("prev", &key.prev), ("cur", &key.cur)] {
                let mut ins = catalog.instruction(mnemonic, Vec::<String>::new())?;
                if ins.op_class == OpClass::Branch {
                    let label = format!("after_{slot}");
                    labels.insert(label.clone(), body.len() + 1);
                    ins.operands = vec![label];
                } else {
                    ins.operands = placeholder_operands(&ins);
                }
                body.push(ins);
            }
            body.extend(std::iter::repeat_n(nop, pad));
            Ok(Program {
                name: format!("fp_{}", key.file_stem()),
                setup: Vec::new(),
                loop_body: body,
                labels,
            })
        })
        .collect()
}

/// Flattens a fingerprint program with the branch outcomes `key` needs.
fn fingerprint_path(program: &Program, key: &PairKey, pad: usize) -> Result<ExecutionPath> {
    let mut resolutions = BTreeMap::new();
    for (site, taken) in [(pad, true), (pad + 1, key.taken)] {
        if program.loop_body[site].is_conditional_branch() {
            resolutions.insert(
                site,
                if taken {
                    Branch::Taken
                } else {
                    Branch::NotTaken
                },
            );
        }
    }
    let mut paths = flatten_paths(program, &resolutions)?;
    debug_assert_eq!(paths.len(), 1);
    Ok(paths.remove(0))
}

/// Captures `examples_per_pair` fingerprint traces per pair and cuts out
/// the `cur` block of each one.
///
/// Every pair gets its own seed derived from the config seed and the pair's
/// position, so the result does not depend on evaluation order.
pub fn build_library(
    pairs: &BTreeSet<PairKey>,
    config: &EmissionConfig,
    examples_per_pair: usize,
    catalog: &Catalog,
) -> Result<BlockLibrary> {
    build_library_padded(pairs, config, examples_per_pair, catalog, DEFAULT_PAD)
}

pub fn build_library_padded(
    pairs: &BTreeSet<PairKey>,
    config: &EmissionConfig,
    examples_per_pair: usize,
    catalog: &Catalog,
    pad: usize,
) -> Result<BlockLibrary> {
    if examples_per_pair == 0 {
        return Err(Error::Parameter(
            "examples_per_pair must be at least 1".into(),
        ));
    }
    config.validate()?;
    let spc = config.samples_per_cycle;
    let programs = fingerprint_programs(pairs, pad, catalog)?;
    let mut entries = BTreeMap::new();
    for (idx, (key, program)) in pairs.iter().zip(&programs).enumerate() {
        let path = fingerprint_path(program, key, pad)?;
        let offset: usize = path.instructions[..=pad]
            .iter()
            .map(|i| i.cycles as usize * spc)
            .sum();
        let block_len = path.instructions[pad + 1].cycles as usize * spc;
        let pair_config = config
            .clone()
            .with_seed(derive_seed(config.seed, idx as u64 + 1));
        let traces = capture_set(&path, &pair_config, examples_per_pair)?;
        let blocks = traces
            .into_iter()
            .enumerate()
            .map(|(capture_id, trace)| {
                let len = trace.len();
                if block_len > len {
                    return Err(Error::Segmentation(format!(
                        "{key}: block of {block_len} samples in a {len}-sample capture"
                    )));
                }
                let start = trace.alignment.unwrap_or(0) + offset;
                let samples = (0..block_len)
                    .map(|j| trace.samples[(start + j) % len])
                    .collect();
                Ok(SignalBlock {
                    key: key.clone(),
                    samples,
                    capture_id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entries.insert(key.clone(), blocks);
    }
    Ok(BlockLibrary {
        samples_per_cycle: spc,
        entries,
        provenance: Provenance {
            config_digest: config.digest(),
            catalog_digest: catalog.digest(),
            seed: config.seed,
        },
    })
}

/// Uniform draw among the blocks stored under `key`.
pub fn sample_block<'a, R: Rng + ?Sized>(
    library: &'a BlockLibrary,
    key: &PairKey,
    rng: &mut R,
) -> Result<&'a SignalBlock> {
    let blocks = library
        .get(key)
        .filter(|b| !b.is_empty())
        .ok_or_else(|| Error::Coverage(vec![key.clone()]))?;
    Ok(&blocks[rng.random_range(0..blocks.len())])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, Class};
    use crate::isa::ExecutionPath;
    use crate::sim::emit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cat() -> Catalog {
        Catalog::avr_default()
    }

    #[test]
    fn pairs_wrap_around() {
        let c = cat();
        let ins = |m: &str| c.instruction(m, Vec::<String>::new()).unwrap();
        let p = ExecutionPath::new("t", 0, vec![ins("nop"), ins("ses"), ins("cls")]);
        assert_eq!(
            pairs_of(&p),
            vec![
                PairKey::new("cls", "nop"),
                PairKey::new("nop", "ses"),
                PairKey::new("ses", "cls")
            ]
        );
        let single = ExecutionPath::new("t", 0, vec![ins("nop")]);
        assert_eq!(pairs_of(&single), vec![PairKey::new("nop", "nop")]);
    }

    #[test]
    fn program_b_pairs() {
        let b = corpus::path(Class::B, &cat());
        let pairs = pairs_of(&b);
        assert_eq!(pairs.len(), 17);
        assert_eq!(pairs[0], PairKey::new("rjmp", "sbi"));
        assert_eq!(pairs[5], PairKey::new("cp", "breq").taken());
        assert_eq!(pairs[6], PairKey::new("breq", "ldi"));
        assert_eq!(pairs[16], PairKey::new("clr", "rjmp"));
    }

    #[test]
    fn fingerprint_program_layout() {
        let c = cat();
        let progs =
            fingerprint_programs(&BTreeSet::from([PairKey::new("lsr", "ses")]), 2, &c).unwrap();
        assert_eq!(progs.len(), 1);
        let m: Vec<&str> = progs[0]
            .loop_body
            .iter()
            .map(|i| i.mnemonic.as_str())
            .collect();
        assert_eq!(m, vec!["nop", "nop", "lsr", "ses", "nop", "nop"]);
        assert!(fingerprint_programs(&BTreeSet::new(), 4, &c)
            .unwrap()
            .is_empty());
        assert!(fingerprint_programs(&BTreeSet::new(), 1, &c).is_err());
    }

    #[test]
    fn full_cross_product_size() {
        let c = cat();
        let plain: BTreeSet<PairKey> = full_pairs(&c).into_iter().filter(|k| !k.taken).collect();
        assert_eq!(plain.len(), 23 * 23);
        let progs = fingerprint_programs(&plain, DEFAULT_PAD, &c).unwrap();
        assert_eq!(progs.len(), 529);
    }

    #[test]
    fn branch_pairs_fingerprint_with_requested_outcome() {
        let c = cat();
        let lib = build_library(
            &BTreeSet::from([
                PairKey::new("cp", "breq").taken(),
                PairKey::new("cp", "breq"),
                PairKey::new("breq", "ldi"),
                PairKey::new("clr", "rjmp"),
                PairKey::new("rjmp", "sbi"),
            ]),
            &EmissionConfig::noiseless(),
            1,
            &c,
        )
        .unwrap();
        assert_eq!(lib.block_len(&PairKey::new("cp", "breq").taken()), Some(62));
        assert_eq!(lib.block_len(&PairKey::new("cp", "breq")), Some(31));
        assert_eq!(lib.block_len(&PairKey::new("clr", "rjmp")), Some(62));
        assert_eq!(lib.block_len(&PairKey::new("breq", "ldi")), Some(31));
        lib.check_invariants().unwrap();
    }

    #[test]
    fn block_length_follows_cycle_table() {
        let c = cat();
        let key = PairKey::new("clr", "ldi");
        let lib = build_library(
            &BTreeSet::from([key.clone()]),
            &EmissionConfig::default(),
            3,
            &c,
        )
        .unwrap();
        assert_eq!(
            lib.block_len(&key),
            Some(c.get("ldi").unwrap().cycles as usize * 31)
        );
        assert_eq!(lib.get(&key).unwrap().len(), 3);
    }

    #[test]
    fn noiseless_blocks_are_identical_and_match_direct_emit() {
        let c = cat();
        let key = PairKey::new("add", "eor");
        let cfg = EmissionConfig::noiseless();
        let lib = build_library(&BTreeSet::from([key.clone()]), &cfg, 4, &c).unwrap();
        let blocks = lib.get(&key).unwrap();
        assert!(blocks.iter().all(|b| b.samples == blocks[0].samples));

        let prog =
            &fingerprint_programs(&BTreeSet::from([key.clone()]), DEFAULT_PAD, &c).unwrap()[0];
        let path = fingerprint_path(prog, &key, DEFAULT_PAD).unwrap();
        let trace = emit(&path, &cfg, 0).unwrap();
        let start = (DEFAULT_PAD + 1) * 31;
        assert_eq!(blocks[0].samples, trace.samples[start..start + 31]);
    }

    #[test]
    fn segmentation_undoes_drift() {
        let c = cat();
        let key = PairKey::new("sbi", "clr");
        let quiet = EmissionConfig::noiseless();
        let drifting = EmissionConfig {
            drift_max: 15,
            ..quiet.clone()
        };
        let a = build_library(&BTreeSet::from([key.clone()]), &quiet, 1, &c).unwrap();
        let b = build_library(&BTreeSet::from([key.clone()]), &drifting, 8, &c).unwrap();
        for blk in b.get(&key).unwrap() {
            assert_eq!(blk.samples, a.get(&key).unwrap()[0].samples);
        }
    }

    #[test]
    fn sample_block_contract() {
        let c = cat();
        let key = PairKey::new("ses", "cls");
        let lib = build_library(
            &BTreeSet::from([key.clone()]),
            &EmissionConfig::default(),
            1,
            &c,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_block(&lib, &key, &mut rng).unwrap(),
            &lib.get(&key).unwrap()[0]
        );
        let err = sample_block(&lib, &PairKey::new("nop", "nop"), &mut rng).unwrap_err();
        assert!(matches!(&err, Error::Coverage(k) if k == &[PairKey::new("nop", "nop")]));
        assert!(err.to_string().contains("(nop|nop)"));
    }

    #[test]
    fn sample_block_is_reproducible() {
        let c = cat();
        let key = PairKey::new("ses", "cls");
        let lib = build_library(
            &BTreeSet::from([key.clone()]),
            &EmissionConfig::default(),
            50,
            &c,
        )
        .unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..100)
                .map(|_| sample_block(&lib, &key, &mut rng).unwrap().capture_id)
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn unknown_pair_mnemonic_is_rejected() {
        let err = fingerprint_programs(&BTreeSet::from([PairKey::new("xyz", "nop")]), 4, &cat())
            .unwrap_err();
        assert!(matches!(err, Error::UnknownMnemonic(m) if m == "xyz"));
    }
}
