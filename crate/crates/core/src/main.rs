use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use emsynth::archive::{self, BaselineFile, PathBaseline, TraceSet};
use emsynth::detector::{
    fingerprint, preprocess, strangeness, vote, BenignSet, PValueMode, Status,
};
use emsynth::eval::{
    run_experiment, similarity_csv, similarity_study, similarity_summary_csv, tau_grid,
    AnomalyCase, Dataset, Experiment, ExperimentParams, FoldSpec, DEFAULT_KAPPA, DEFAULT_NEIGHBORS,
};
use emsynth::isa::{flatten_paths, parse_program, Branch, Catalog, ExecutionPath};
use emsynth::library::{build_library_padded, corpus_pairs, full_pairs, DEFAULT_PAD};
use emsynth::sim::{capture_set, EmissionConfig, Origin};
use emsynth::synth::synthesize_set;
use emsynth::{corpus, Error};

#[derive(Parser)]
#[command(
    name = "emsynth",
    version,
    about = "Synthetic EM fingerprinting and injection detection"
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Instruction catalog (`mnemonic,cycles,op_class[,taken_cycles]`);
    /// defaults to the bundled AVR subset.
    #[arg(long, global = true)]
    catalog: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairScope {
    Corpus,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExperimentArg {
    Real,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum CaseArg {
    Easy,
    Hard,
}

#[derive(clap::Args)]
struct PathSelect {
    /// Branch resolution `SITE=taken|not-taken`, SITE being the loop-body
    /// index of a conditional branch. Repeatable.
    #[arg(long = "resolve", value_parser = parse_resolution)]
    resolve: Vec<(usize, Branch)>,

    /// Which enumerated path to use when several remain.
    #[arg(long)]
    path_id: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Fingerprint instruction pairs on the simulated device and store the
    /// block library.
    BuildLibrary {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "corpus")]
        pairs: PairScope,
        /// Programs whose pairs make up the corpus; defaults to the bundled
        /// four programs.
        #[arg(long = "program")]
        programs: Vec<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        examples: usize,
        #[arg(long, default_value_t = DEFAULT_PAD)]
        pad: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthesize traces of a program path from a block library.
    Synth {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        library: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[command(flatten)]
        select: PathSelect,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate device captures of a program path.
    Capture {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[command(flatten)]
        select: PathSelect,
        #[arg(long)]
        out: PathBuf,
    },
    /// Import external captures from CSV plus a trigger-index sidecar.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        triggers: PathBuf,
        #[arg(long)]
        path_cycles: usize,
        #[arg(long)]
        samples_per_cycle: usize,
        #[arg(long, default_value = "ingested")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute one baseline per benign trace archive (one per path).
    Fingerprint {
        #[arg(long, num_args = 1.., required = true)]
        benign: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_KAPPA)]
        kappa: usize,
        /// Use the reversed-orientation p-value (comparison only).
        #[arg(long)]
        literal_p: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score query traces against fitted baselines and vote.
    Detect {
        #[arg(long)]
        baselines: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        benign: Vec<PathBuf>,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a full evaluation corpus (A, B, synthetic B, both injections).
    MakeCorpus {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        library_examples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated detection experiment over a corpus directory.
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        experiment: ExperimentArg,
        #[arg(long = "case", value_enum)]
        case: CaseArg,
        #[arg(long, default_value_t = DEFAULT_KAPPA)]
        kappa: usize,
        #[arg(long, default_value_t = 0.001)]
        tau_step: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write ROC points as CSV.
        #[arg(long)]
        roc_csv: Option<PathBuf>,
    },
    /// Mean k-nearest NED of synthetic traces to each reference set.
    Similarity {
        #[arg(long)]
        synthetic: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        real: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_NEIGHBORS)]
        neighbors: usize,
        #[arg(long)]
        out: PathBuf,
        /// Box-plot statistics per set as CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

fn parse_resolution(s: &str) -> Result<(usize, Branch), String> {
    let (site, outcome) = s
        .split_once('=')
        .ok_or_else(|| format!("expected SITE=taken|not-taken, got `{s}`"))?;
    let site = site
        .trim()
        .parse()
        .map_err(|_| format!("bad site `{site}`"))?;
    let outcome = match outcome.trim() {
        "taken" | "t" => Branch::Taken,
        "not-taken" | "nt" => Branch::NotTaken,
        other => return Err(format!("bad branch outcome `{other}`")),
    };
    Ok((site, outcome))
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = Result<T, Failure>;

fn require(path: &Path, what: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{what} `{}` does not exist",
            path.display()
        )))
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| {
        Failure::Runtime(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| {
            Failure::Runtime(Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })
        })?;
    }
    fs::write(path, text).map_err(|e| {
        Failure::Runtime(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<EmissionConfig> {
    require(path, "config")?;
    let config = EmissionConfig::from_json(&read_text(path)?)?;
    Ok(match seed {
        Some(s) => config.with_seed(s),
        None => config,
    })
}

fn load_catalog(path: Option<&Path>) -> CliResult<Catalog> {
    match path {
        Some(p) => {
            require(p, "catalog")?;
            Ok(Catalog::parse(&read_text(p)?)?)
        }
        None => Ok(Catalog::avr_default()),
    }
}

fn program_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "program".into())
}

fn load_path(file: &Path, catalog: &Catalog, select: &PathSelect) -> CliResult<ExecutionPath> {
    require(file, "program")?;
    let program = parse_program(&program_name(file), &read_text(file)?, catalog)?;
    let resolutions: BTreeMap<usize, Branch> = select.resolve.iter().copied().collect();
    let mut paths = flatten_paths(&program, &resolutions)?;
    match (select.path_id, paths.len()) {
        (None, 1) => Ok(paths.remove(0)),
        (None, n) => Err(Failure::Runtime(Error::Parameter(format!(
            "`{}` has {n} execution paths (branch sites {:?}); pass --resolve or --path-id",
            file.display(),
            program.branch_sites()
        )))),
        (Some(id), n) => {
            if id < n {
                Ok(paths.swap_remove(id))
            } else {
                Err(Failure::Runtime(Error::Parameter(format!(
                    "path id {id} out of range ({n} paths)"
                ))))
            }
        }
    }
}

fn load_sets(dirs: &[PathBuf]) -> CliResult<Vec<TraceSet>> {
    dirs.iter()
        .map(|d| {
            require(d, "trace archive")?;
            Ok(archive::load_traces(d)?)
        })
        .collect()
}

fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed;
    let catalog = load_catalog(cli.catalog.as_deref())?;
    match cli.command {
        Command::BuildLibrary {
            config,
            pairs,
            programs,
            examples,
            pad,
            out,
        } => {
            let config = load_config(&config, seed)?;
            let keys = match pairs {
                PairScope::Full => full_pairs(&catalog),
                PairScope::Corpus if programs.is_empty() => {
                    let paths: Vec<_> = corpus::Class::ALL
                        .iter()
                        .map(|&c| corpus::path(c, &catalog))
                        .collect();
                    corpus_pairs(&paths)
                }
                PairScope::Corpus => {
                    let mut keys = BTreeSet::new();
                    for file in &programs {
                        require(file, "program")?;
                        let p = parse_program(&program_name(file), &read_text(file)?, &catalog)?;
                        keys.extend(corpus_pairs(&flatten_paths(&p, &BTreeMap::new())?));
                    }
                    keys
                }
            };
            let library = build_library_padded(&keys, &config, examples, &catalog, pad)?;
            archive::save_library(&out, &library)?;
            eprintln!(
                "{} pairs x {examples} blocks -> {}",
                keys.len(),
                out.display()
            );
        }
        Command::Synth {
            program,
            library,
            n,
            select,
            out,
        } => {
            let path = load_path(&program, &catalog, &select)?;
            require(&library, "library")?;
            let library = archive::load_library(&library)?;
            let traces = synthesize_set(&path, &library, n, seed.unwrap_or(0))?;
            archive::save_traces(
                &out,
                &TraceSet {
                    program: path.program.clone(),
                    origin: Origin::Synthetic,
                    path_id: Some(path.path_id),
                    path_cycles: path.cycles() as usize,
                    samples_per_cycle: library.samples_per_cycle,
                    config_digest: Some(library.provenance.config_digest.clone()),
                    traces,
                },
            )?;
        }
        Command::Capture {
            program,
            config,
            n,
            select,
            out,
        } => {
            let config = load_config(&config, seed)?;
            let path = load_path(&program, &catalog, &select)?;
            let traces = capture_set(&path, &config, n)?;
            archive::save_traces(
                &out,
                &TraceSet {
                    program: path.program.clone(),
                    origin: Origin::Simulated,
                    path_id: Some(path.path_id),
                    path_cycles: path.cycles() as usize,
                    samples_per_cycle: config.samples_per_cycle,
                    config_digest: Some(config.digest()),
                    traces,
                },
            )?;
        }
        Command::Ingest {
            csv,
            triggers,
            path_cycles,
            samples_per_cycle,
            name,
            out,
        } => {
            require(&csv, "csv")?;
            require(&triggers, "trigger sidecar")?;
            let set = archive::ingest_csv(
                &read_text(&csv)?,
                &read_text(&triggers)?,
                &name,
                path_cycles,
                samples_per_cycle,
            )?;
            archive::save_traces(&out, &set)?;
        }
        Command::Fingerprint {
            benign,
            kappa,
            literal_p,
            out,
        } => {
            let sets = load_sets(&benign)?;
            let benign_sets: Vec<BenignSet> = sets
                .iter()
                .zip(&benign)
                .enumerate()
                .map(|(i, (s, dir))| BenignSet {
                    path_id: i,
                    vectors: s
                        .traces
                        .iter()
                        .map(|t| preprocess(t, s.path_cycles, s.samples_per_cycle))
                        .collect(),
                    source: dir.display().to_string(),
                })
                .collect();
            let baselines = fingerprint(&benign_sets, kappa)?;
            let mode = if literal_p {
                PValueMode::Literal
            } else {
                PValueMode::Standard
            };
            let file = BaselineFile::new(
                kappa,
                mode,
                sets.iter()
                    .zip(baselines)
                    .map(|(s, baseline)| PathBaseline {
                        path_cycles: s.path_cycles,
                        samples_per_cycle: s.samples_per_cycle,
                        baseline,
                    })
                    .collect(),
            );
            file.save(&out)?;
        }
        Command::Detect {
            baselines,
            benign,
            queries,
            tau,
            out,
        } => {
            require(&baselines, "baselines")?;
            let file = BaselineFile::load(&baselines)?;
            let sets = load_sets(&benign)?;
            if sets.len() != file.baselines.len() {
                return Err(Failure::Usage(format!(
                    "{} benign archives for {} baselines",
                    sets.len(),
                    file.baselines.len()
                )));
            }
            require(&queries, "query archive")?;
            let queries = archive::load_traces(&queries)?;
            let benign_vectors: Vec<Vec<_>> = sets
                .iter()
                .zip(&file.baselines)
                .map(|(s, b)| {
                    s.traces
                        .iter()
                        .map(|t| preprocess(t, b.path_cycles, b.samples_per_cycle))
                        .collect()
                })
                .collect();
            let mut csv = String::from("trace_id");
            for b in &file.baselines {
                csv.push_str(&format!(",p_path{}", b.baseline.path_id));
            }
            csv.push_str(",status\n");
            for (id, trace) in queries.traces.iter().enumerate() {
                let ps = file
                    .baselines
                    .iter()
                    .zip(&benign_vectors)
                    .map(|(b, x)| {
                        let q = preprocess(trace, b.path_cycles, b.samples_per_cycle);
                        let score = strangeness(x, std::slice::from_ref(&q), file.kappa)?[0];
                        Ok((
                            b.baseline.path_id,
                            b.baseline.p_value(score, file.p_value_mode),
                        ))
                    })
                    .collect::<emsynth::Result<Vec<_>>>()?;
                let verdict = vote(&ps, tau)?;
                csv.push_str(&id.to_string());
                for v in &verdict.votes {
                    csv.push_str(&format!(",{}", v.p_value));
                }
                csv.push_str(match verdict.status {
                    Status::Normal => ",normal\n",
                    Status::Anomalous => ",anomalous\n",
                });
            }
            write_text(&out, &csv)?;
        }
        Command::MakeCorpus {
            config,
            n,
            library_examples,
            out,
        } => {
            let config = match config {
                Some(p) => load_config(&p, seed)?,
                None => {
                    let c = EmissionConfig::default();
                    match seed {
                        Some(s) => c.with_seed(s),
                        None => c,
                    }
                }
            };
            let data = Dataset::generate(&config, &catalog, n, library_examples)?;
            archive::save_dataset(&out, &data, Some(config.digest()))?;
        }
        Command::Evaluate {
            corpus,
            experiment,
            case,
            kappa,
            tau_step,
            out,
            roc_csv,
        } => {
            require(&corpus, "corpus")?;
            if !(tau_step > 0.0 && tau_step <= 1.0) {
                return Err(Failure::Usage(format!(
                    "tau step must be in (0, 1], got {tau_step}"
                )));
            }
            let data = archive::load_dataset(&corpus)?;
            let params = ExperimentParams {
                kappa,
                tau_grid: tau_grid(tau_step),
                folds: FoldSpec::default(),
                seed: seed.unwrap_or(0),
                mode: PValueMode::Standard,
            };
            let experiment = match experiment {
                ExperimentArg::Real => Experiment::RealTrained,
                ExperimentArg::Synthetic => Experiment::SyntheticTrained,
            };
            let case = match case {
                CaseArg::Easy => AnomalyCase::Easy,
                CaseArg::Hard => AnomalyCase::Hard,
            };
            let report = run_experiment(&data, experiment, case, &params)?;
            write_text(
                &out,
                &serde_json::to_string_pretty(&report).map_err(Error::from)?,
            )?;
            if let Some(path) = roc_csv {
                write_text(&path, &report.roc_csv())?;
            }
            eprintln!(
                "{experiment} / {case}: AUC {:.4}  ACC {:.4}  F1 {:.4}",
                report.averages.auc, report.averages.acc, report.averages.f1
            );
        }
        Command::Similarity {
            synthetic,
            real,
            neighbors,
            out,
            summary,
        } => {
            require(&synthetic, "synthetic archive")?;
            let synth = archive::load_traces(&synthetic)?;
            let (cycles, spc) = (synth.path_cycles, synth.samples_per_cycle);
            let peaks = |set: &TraceSet| -> Vec<_> {
                set.traces
                    .iter()
                    .map(|t| preprocess(t, cycles, spc))
                    .collect()
            };
            let reals = load_sets(&real)?;
            let named: Vec<(String, Vec<_>)> = reals
                .iter()
                .zip(&real)
                .map(|(s, dir)| (program_name(dir), peaks(s)))
                .collect();
            let results = similarity_study(&peaks(&synth), &named, neighbors)?;
            write_text(&out, &similarity_csv(&results))?;
            if let Some(path) = summary {
                write_text(&path, &similarity_summary_csv(&results))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
