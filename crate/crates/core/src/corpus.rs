//! The bundled test programs: an original benign program (A), its update
//! (B) and two code-injected variants of B.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::isa::{flatten_paths, parse_program, Branch, Catalog, ExecutionPath, Program};

pub const PROGRAM_A_SRC: &str = include_str!("../fixtures/program_a.s");
pub const PROGRAM_B_SRC: &str = include_str!("../fixtures/program_b.s");
pub const MALICIOUS_EASY_SRC: &str = include_str!("../fixtures/malicious_easy.s");
pub const MALICIOUS_HARD_SRC: &str = include_str!("../fixtures/malicious_hard.s");

pub const SOURCES: [(&str, &str); 4] = [
    ("program_a", PROGRAM_A_SRC),
    ("program_b", PROGRAM_B_SRC),
    ("malicious_easy", MALICIOUS_EASY_SRC),
    ("malicious_hard", MALICIOUS_HARD_SRC),
];

/// Loop-body index of the `breq` that always jumps to `first_label`.
pub const DECISION_SITE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    A,
    B,
    MaliciousEasy,
    MaliciousHard,
}

impl Class {
    pub const ALL: [Class; 4] = [
        Class::A,
        Class::B,
        Class::MaliciousEasy,
        Class::MaliciousHard,
    ];

    pub fn name(self) -> &'static str {
        SOURCES[self as usize].0
    }

    pub fn source(self) -> &'static str {
        SOURCES[self as usize].1
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Branch resolution shared by all bundled programs.
pub fn resolutions() -> BTreeMap<usize, Branch> {
    BTreeMap::from([(DECISION_SITE, Branch::Taken)])
}

pub fn program(class: Class, catalog: &Catalog) -> Program {
    parse_program(class.name(), class.source(), catalog).expect("bundled program parses")
}

/// The single execution path the bundled programs take every iteration.
pub fn path(class: Class, catalog: &Catalog) -> ExecutionPath {
    let mut paths =
        flatten_paths(&program(class, catalog), &resolutions()).expect("bundled program flattens");
    assert_eq!(paths.len(), 1);
    paths.remove(0)
}
