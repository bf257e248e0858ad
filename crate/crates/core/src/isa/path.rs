use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Instruction, Program};

/// Default limit on the number of enumerated paths.
pub const DEFAULT_PATH_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Taken,
    NotTaken,
}

/// One loop iteration as executed by the CPU for a fixed branch resolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionPath {
    pub program: String,
    pub path_id: usize,
    pub instructions: Vec<Instruction>,
}

impl ExecutionPath {
    pub fn new(program: impl Into<String>, path_id: usize, instructions: Vec<Instruction>) -> Self {
        ExecutionPath {
            program: program.into(),
            path_id,
            instructions,
        }
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn cycles(&self) -> u64 {
        self.instructions.iter().map(|i| i.cycles as u64).sum()
    }

    pub fn mnemonics(&self) -> Vec<&str> {
        self.instructions
            .iter()
            .map(|i| i.mnemonic.as_str())
            .collect()
    }
}

/// [`flatten_paths_with_cap`] with [`DEFAULT_PATH_CAP`].
pub fn flatten_paths(
    program: &Program,
    resolutions: &BTreeMap<usize, Branch>,
) -> Result<Vec<ExecutionPath>> {
    flatten_paths_with_cap(program, resolutions, DEFAULT_PATH_CAP)
}

/// Enumerates the execution paths of one loop iteration.
///
/// Branch sites are loop-body indices of conditional branches. Resolved
/// sites follow their resolution; unresolved ones are explored both ways
/// (fall-through first). An iteration ends when control jumps back to the
/// loop start or falls off the end of the body.
pub fn flatten_paths_with_cap(
    program: &Program,
    resolutions: &BTreeMap<usize, Branch>,
    cap: usize,
) -> Result<Vec<ExecutionPath>> {
    let unresolved = program
        .branch_sites()
        .into_iter()
        .filter(|s| !resolutions.contains_key(s))
        .count();

    let mut paths: Vec<Vec<Instruction>> = Vec::new();
    let mut seen: HashSet<Vec<Instruction>> = HashSet::new();
    // (pc, instructions so far, visited pcs)
    let mut stack: Vec<(usize, Vec<Instruction>, Vec<bool>)> =
        vec![(0, Vec::new(), vec![false; program.loop_body.len()])];

    while let Some((mut pc, mut acc, mut visited)) = stack.pop() {
        while let Some(ins) = program.loop_body.get(pc) {
            if visited[pc] {
                return Err(Error::NonTerminating(pc));
            }
            visited[pc] = true;
            let target = ins.branch_target().map(|label| program.labels[label]);
            if ins.is_conditional_branch() {
                let target = target.expect("validated at parse time");
                let choices: &[Branch] = match resolutions.get(&pc) {
                    Some(Branch::Taken) => &[Branch::Taken],
                    Some(Branch::NotTaken) => &[Branch::NotTaken],
                    None => &[Branch::NotTaken, Branch::Taken],
                };
                // Explore the first choice inline and defer the rest, last
                // pushed first so fall-through stays first overall.
                for choice in choices[1..].iter().rev() {
                    let mut alt = acc.clone();
                    alt.push(ins.resolved(true));
                    debug_assert_eq!(*choice, Branch::Taken);
                    stack.push((target, alt, visited.clone()));
                }
                match choices[0] {
                    Branch::Taken => {
                        acc.push(ins.resolved(true));
                        pc = target;
                    }
                    Branch::NotTaken => {
                        acc.push(ins.resolved(false));
                        pc += 1;
                    }
                }
            } else if let Some(target) = target {
                acc.push(ins.clone());
                pc = target;
            } else {
                acc.push(ins.clone());
                pc += 1;
            }
            if pc == 0 {
                break;
            }
        }
        if seen.insert(acc.clone()) {
            paths.push(acc);
            if paths.len() > cap {
                return Err(Error::PathExplosion {
                    branches: unresolved,
                    cap,
                });
            }
        }
    }

    Ok(paths
        .into_iter()
        .enumerate()
        .map(|(id, instructions)| ExecutionPath::new(&program.name, id, instructions))
        .collect())
}

/// Splices `payload` into a copy of `path` before index `position`.
pub fn inject(
    path: &ExecutionPath,
    position: usize,
    payload: &[Instruction],
) -> Result<ExecutionPath> {
    if position > path.len() {
        return Err(Error::Position {
            position,
            len: path.len(),
        });
    }
    let mut out = path.clone();
    out.instructions
        .splice(position..position, payload.iter().cloned());
    Ok(out)
}

/// Removes `count` instructions starting at `position`. Inverse of [`inject`].
pub fn remove(path: &ExecutionPath, position: usize, count: usize) -> Result<ExecutionPath> {
    let end = position.checked_add(count).filter(|&e| e <= path.len());
    let Some(end) = end else {
        return Err(Error::Position {
            position: position.saturating_add(count),
            len: path.len(),
        });
    };
    let mut out = path.clone();
    out.instructions.drain(position..end);
    Ok(out)
}
