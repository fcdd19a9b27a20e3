//! The `protogap` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::TokenCorpus;
use crate::error::{Error, Result};
use crate::evaluator::{
    evaluate_intervention, prompt_stability, sliding_window_ppl, EvalContract, PplReport, BUILTIN_CONTRACTS,
};
use crate::fixtures::{random_model, random_prompts, FixtureSpec};
use crate::jacobian::{jacobian_report, PowerConfig};
use crate::metrics::{
    protocol_gap_report, rope_counterfactual, BootstrapConfig, DistanceMatrix, DistanceProbe, GapReport, GapStats,
    PairFilter, Positions, PromptSet, Protocol, Regime, RegimeConfig,
};
use crate::model::{hash_file, load_checkpoint, Checkpoint, InterventionSpec};
use crate::report::{Format, JsonReport, PlotPoint, Report, RunManifest, RunWriter, TableReport};
use crate::selectors::{
    beam_select, bi_scores, budget_sweep, cka_adjacent, greedy_select_in, layer_scores_from_pairs, random_select,
    sleb_select, BudgetLedger, BudgetRow, ContractOracle, PplOracle, ScoreMode, SelectionResult, SlebVariant,
    SweepMethod,
};

const ALL_FORMATS: [Format; 3] = [Format::Json, Format::Csv, Format::Plotdata];

#[derive(Debug, Parser)]
#[command(
    name = "protogap",
    version,
    about = "Swap-based layer-equivalence diagnostics and layer pruning for decoder-only transformers"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Model container file.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Token corpus (`<path>` plus `<path>.json` sidecar).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Prompt-set JSON; without it prompts are cut from the corpus.
    #[arg(long, global = true)]
    prompts: Option<PathBuf>,
    /// Number of corpus chunks used as prompts when `--prompts` is absent.
    #[arg(long, global = true, default_value_t = 32)]
    prompt_count: usize,
    /// Length of each corpus chunk used as a prompt.
    #[arg(long, global = true, default_value_t = 64)]
    prompt_len: usize,
    /// Built-in contract name or a contract JSON file.
    #[arg(long, global = true)]
    contract: Option<String>,
    /// `adjacent`, `gap:<k>` or `all`.
    #[arg(long, global = true, default_value = "adjacent")]
    pairs: String,
    #[arg(long, global = true, value_enum)]
    protocol: Option<ProtocolArg>,
    #[arg(long, global = true, value_enum, default_value_t = PositionsArg::Last)]
    positions: PositionsArg,
    #[arg(long, global = true)]
    method: Option<String>,
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Minimum spacing: selected layers must be more than this far apart.
    #[arg(long, global = true, default_value_t = 1)]
    delta: usize,
    /// Evaluator-call budget for PPL-driven selectors.
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Root directory for run artifacts.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Bootstrap resamples for confidence intervals (off when absent).
    #[arg(long, global = true)]
    bootstrap: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    Replacement,
    Interchange,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PositionsArg {
    Last,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScoreModeArg {
    MinAny,
    MinNeighbor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Preset {
    Gpt2,
    Llama,
    Qwen,
    Bloom,
    Neox,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pairwise swap distances under one or both protocols.
    Distances,
    /// Choose layers to remove.
    Prune {
        #[arg(long, value_enum, default_value_t = ScoreModeArg::MinAny)]
        score_mode: ScoreModeArg,
        /// Restrict greedy selection to layers `lo:hi` (inclusive).
        #[arg(long)]
        window: Option<String>,
        #[arg(long, default_value_t = 3)]
        width: usize,
        /// Number of lowest-score layers that seed the beam.
        #[arg(long, default_value_t = 3)]
        beam_seeds: usize,
        /// Corpus for the selection oracle, if different from the evaluator's.
        #[arg(long)]
        oracle_corpus: Option<PathBuf>,
        #[arg(long)]
        oracle_contract: Option<String>,
    },
    /// Perplexity under a contract, with optional interventions.
    Evaluate {
        /// Intervention such as `delete:5`, `interchange:4,5`, `replace:3<-5`.
        #[arg(long = "intervention")]
        interventions: Vec<String>,
        /// Delete the layers of a selection.json.
        #[arg(long)]
        selection: Option<PathBuf>,
        /// Previously computed baseline report.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Both protocols, the protocol gap, and the regime verdict.
    Diagnose {
        /// I/R figure to use instead of the pooled distance ratio.
        #[arg(long)]
        ir_override: Option<f64>,
        #[arg(long, default_value = "pruning-dppl")]
        ir_level: String,
    },
    /// Residual-block Jacobian spectral norms.
    Jacobian {
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        iterations: usize,
        #[arg(long, default_value_t = 1e-3)]
        epsilon: f64,
    },
    /// Pair-ranking stability over prompt subsets.
    Stability {
        #[arg(long, value_delimiter = ',', default_value = "20,50,100")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
    /// Protocol gap with rotary embeddings on and off.
    Counterfactual,
    /// Matched-budget comparison of PPL-driven selectors.
    BudgetSweep {
        #[arg(long, value_delimiter = ',', default_value = "50,100,200,400,800")]
        budgets: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "sleb-greedy,sleb-iterative,beam")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 3)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        beam_seeds: usize,
        #[arg(long)]
        oracle_corpus: Option<PathBuf>,
        #[arg(long)]
        oracle_contract: Option<String>,
    },
    /// `diagnose` over a series of checkpoints.
    Trajectory {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Compare the checkpoint's logits with a golden-logit fixture.
    CheckGolden {
        golden: PathBuf,
        #[arg(long, default_value_t = crate::golden::DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Write a small random checkpoint, corpus and prompt set.
    MakeFixture {
        #[arg(long, value_enum, default_value_t = Preset::Gpt2)]
        preset: Preset,
        #[arg(long, default_value_t = 4)]
        layers: usize,
        #[arg(long, default_value_t = 4096)]
        corpus_tokens: usize,
        #[arg(long, default_value = "fixture")]
        dest: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Distances => "distances",
            Command::Prune { .. } => "prune",
            Command::Evaluate { .. } => "evaluate",
            Command::Diagnose { .. } => "diagnose",
            Command::Jacobian { .. } => "jacobian",
            Command::Stability { .. } => "stability",
            Command::Counterfactual => "counterfactual",
            Command::BudgetSweep { .. } => "budget-sweep",
            Command::Trajectory { .. } => "trajectory",
            Command::CheckGolden { .. } => "check-golden",
            Command::MakeFixture { .. } => "make-fixture",
        }
    }
}

/// Exit code for an error: 3 for a contract mismatch, 4 for a non-finite
/// result, 1 otherwise. Usage errors exit with 2 before anything runs.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ContractMismatch { .. } => 3,
        Error::NonFinite(_) => 4,
        _ => 1,
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_threads();
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, args) {
        Ok(Some(m)) => {
            use std::io::Write;
            let _ = writeln!(std::io::stdout(), "run {} -> {}", m.run_id, cli.out.join(&m.run_id).display());
            0
        }
        Ok(None) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_threads() {
    if let Some(n) = std::env::var("PROTOGAP_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        // Fails harmlessly if the pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn run_id(command: &str, args: &[String], hashes: &[String]) -> String {
    let mut h = Sha256::new();
    for a in args {
        h.update(a.as_bytes());
        h.update([0]);
    }
    for x in hashes {
        h.update(x.as_bytes());
        h.update([1]);
    }
    let d = h.finalize();
    let hex: String = d.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("{command}-{hex}")
}

struct Loaded {
    model: Checkpoint,
    hash: String,
}

fn load_model_at(path: &Path) -> Result<Loaded> {
    let hash = hash_file(path)?;
    Ok(Loaded {
        model: load_checkpoint(path)?,
        hash,
    })
}

fn require<'a, T>(v: &'a Option<T>, flag: &str) -> Result<&'a T> {
    v.as_ref().ok_or_else(|| Error::Config(format!("--{flag} is required for this command")))
}

impl Cli {
    fn load_model(&self) -> Result<Loaded> {
        load_model_at(require(&self.checkpoint, "checkpoint")?)
    }

    fn load_corpus(&self) -> Result<TokenCorpus> {
        TokenCorpus::load(require(&self.corpus, "corpus")?)
    }

    fn load_prompts(&self) -> Result<PromptSet> {
        match (&self.prompts, &self.corpus) {
            (Some(p), _) => PromptSet::load(p),
            (None, Some(c)) => PromptSet::from_corpus(&TokenCorpus::load(c)?, self.prompt_count, self.prompt_len),
            (None, None) => Err(Error::Config("--prompts or --corpus is required for this command".into())),
        }
    }

    fn positions(&self) -> Positions {
        match self.positions {
            PositionsArg::Last => Positions::Last,
            PositionsArg::All => Positions::All,
        }
    }

    fn pair_filter(&self) -> Result<PairFilter> {
        self.pairs.parse()
    }

    fn bootstrap_cfg(&self) -> Option<BootstrapConfig> {
        self.bootstrap.map(|resamples| BootstrapConfig {
            resamples,
            level: 0.95,
            seed: self.seed,
        })
    }

    fn protocols(&self, default: ProtocolArg) -> Vec<Protocol> {
        match self.protocol.unwrap_or(default) {
            ProtocolArg::Replacement => vec![Protocol::Replacement],
            ProtocolArg::Interchange => vec![Protocol::Interchange],
            ProtocolArg::Both => vec![Protocol::Replacement, Protocol::Interchange],
        }
    }
}

fn load_contract(spec: &str, corpus: &TokenCorpus) -> Result<EvalContract> {
    if let Some(c) = EvalContract::builtin(spec, &corpus.id) {
        return Ok(c);
    }
    let path = Path::new(spec);
    if path.exists() {
        return EvalContract::load(path);
    }
    Err(Error::Config(format!(
        "`{spec}` is neither a built-in contract ({}) nor a contract file",
        BUILTIN_CONTRACTS.join(", ")
    )))
}

fn execute(cli: &Cli, args: Vec<String>) -> Result<Option<RunManifest>> {
    match &cli.command {
        Command::MakeFixture {
            preset,
            layers,
            corpus_tokens,
            dest,
        } => {
            make_fixture(cli, *preset, *layers, *corpus_tokens, dest)?;
            Ok(None)
        }
        Command::Trajectory { checkpoints } => {
            let loaded = checkpoints.iter().map(|p| load_model_at(p)).collect::<Result<Vec<_>>>()?;
            let hashes: Vec<String> = loaded.iter().map(|l| l.hash.clone()).collect();
            let mut w = RunWriter::create(&cli.out, run_id("trajectory", &args, &hashes), "trajectory", args)?;
            for h in hashes {
                w.add_checkpoint_hash(h);
            }
            trajectory(cli, &mut w, checkpoints, &loaded)?;
            Ok(Some(w.finish()?))
        }
        cmd => {
            let loaded = cli.load_model()?;
            let name = cmd.name();
            let mut w = RunWriter::create(&cli.out, run_id(name, &args, std::slice::from_ref(&loaded.hash)), name, args)?;
            w.add_checkpoint_hash(loaded.hash.clone());
            let outcome = match cmd {
                Command::Distances => distances(cli, &mut w, &loaded.model),
                Command::Prune {
                    score_mode,
                    window,
                    width,
                    beam_seeds,
                    oracle_corpus,
                    oracle_contract,
                } => prune(
                    cli,
                    &mut w,
                    &loaded.model,
                    *score_mode,
                    window.as_deref(),
                    (*width, *beam_seeds),
                    (oracle_corpus.as_deref(), oracle_contract.as_deref()),
                ),
                Command::Evaluate {
                    interventions,
                    selection,
                    baseline,
                } => evaluate(cli, &mut w, &loaded.model, interventions, selection.as_deref(), baseline.as_deref()),
                Command::Diagnose { ir_override, ir_level } => {
                    diagnose(cli, &mut w, &loaded.model, *ir_override, ir_level)
                }
                Command::Jacobian {
                    layers,
                    iterations,
                    epsilon,
                } => jacobian(cli, &mut w, &loaded.model, layers, *iterations, *epsilon),
                Command::Stability { sizes, top_k } => stability(cli, &mut w, &loaded.model, sizes, *top_k),
                Command::Counterfactual => counterfactual(cli, &mut w, &loaded.model),
                Command::CheckGolden { golden, tolerance } => check_golden(&mut w, &loaded.model, golden, *tolerance),
                Command::BudgetSweep {
                    budgets,
                    methods,
                    width,
                    beam_seeds,
                    oracle_corpus,
                    oracle_contract,
                } => sweep(
                    cli,
                    &mut w,
                    &loaded.model,
                    budgets,
                    methods,
                    (*width, *beam_seeds),
                    (oracle_corpus.as_deref(), oracle_contract.as_deref()),
                ),
                Command::MakeFixture { .. } | Command::Trajectory { .. } => unreachable!(),
            };
            // Artifacts written so far are kept even when the command fails.
            let manifest = w.finish()?;
            outcome.map(|()| Some(manifest))
        }
    }
}

fn flagged_error(matrices: &[&DistanceMatrix]) -> Result<()> {
    let flagged: Vec<String> = matrices
        .iter()
        .flat_map(|m| m.records.iter().filter(|r| r.is_flagged()).map(move |r| format!("{}:({},{})", m.protocol, r.i, r.j)))
        .collect();
    if flagged.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("flagged pairs: {}", flagged.join(" "))))
    }
}

fn print_matrix_summary(m: &DistanceMatrix) {
    let best = m
        .records
        .iter()
        .filter_map(|r| Some((r.distance()?, r.i, r.j)))
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let best = best.map_or_else(|| "n/a".to_string(), |(d, i, j)| format!("{i}<->{j} {d:.4}"));
    println!(
        "{:<12} pairs={} strong={} conditional={} flagged={} best={best}",
        m.protocol.to_string(),
        m.records.len(),
        m.strong_count,
        m.conditional_count,
        m.flagged_count
    );
}

fn distances(cli: &Cli, w: &mut RunWriter, model: &Checkpoint) -> Result<()> {
    let prompts = cli.load_prompts()?;
    let filter = cli.pair_filter()?;
    let probe = DistanceProbe::new(model, &prompts, cli.positions())?.with_bootstrap(cli.bootstrap_cfg());
    let mut mats = Vec::new();
    for p in cli.protocols(ProtocolArg::Both) {
        let m = probe.sweep(filter, p)?;
        print_matrix_summary(&m);
        w.emit(&format!("distances_{p}"), &m, &ALL_FORMATS)?;
        mats.push(m);
    }
    if let [r, i] = mats.as_slice() {
        let gap = protocol_gap_report(r, i, probe.thresholds(), &RegimeConfig::default())?;
        w.emit("gap", &gap, &ALL_FORMATS)?;
    }
    flagged_error(&mats.iter().collect::<Vec<_>>())
}

fn parse_window(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("window `{s}` must look like lo:hi")))?;
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|_| Error::Config(format!("bad window bound `{x}`")));
    Ok((parse(a)?, parse(b)?))
}

/// Evaluator (and selection oracle) built from the corpus/contract flags.
struct Evaluators {
    corpus: TokenCorpus,
    contract: EvalContract,
    oracle: Option<(TokenCorpus, EvalContract)>,
}

impl Evaluators {
    fn load(cli: &Cli, oracle_corpus: Option<&Path>, oracle_contract: Option<&str>) -> Result<Self> {
        let corpus = cli.load_corpus()?;
        let contract = load_contract(require(&cli.contract, "contract")?, &corpus)?;
        let oracle = match (oracle_corpus, oracle_contract) {
            (None, None) => None,
            (c, k) => {
                let oc = match c {
                    Some(p) => TokenCorpus::load(p)?,
                    None => corpus.clone(),
                };
                let ok = load_contract(k.unwrap_or(require(&cli.contract, "contract")?), &oc)?;
                Some((oc, ok))
            }
        };
        Ok(Self {
            corpus,
            contract,
            oracle,
        })
    }

    fn evaluator<'a>(&'a self, model: &'a Checkpoint) -> ContractOracle<'a> {
        ContractOracle {
            model,
            corpus: &self.corpus,
            contract: &self.contract,
        }
    }

    fn oracle<'a>(&'a self, model: &'a Checkpoint) -> ContractOracle<'a> {
        match &self.oracle {
            Some((c, k)) => ContractOracle {
                model,
                corpus: c,
                contract: k,
            },
            None => self.evaluator(model),
        }
    }

    fn record_ids(&self, w: &mut RunWriter) {
        w.add_contract_id(self.contract.id());
        if let Some((_, k)) = &self.oracle {
            w.add_contract_id(k.id());
        }
    }
}

fn ledger(cli: &Cli) -> BudgetLedger {
    cli.budget.map_or_else(BudgetLedger::unlimited, BudgetLedger::new)
}

fn interchange_scores(cli: &Cli, w: &mut RunWriter, model: &Checkpoint) -> Result<Vec<f64>> {
    let prompts = cli.load_prompts()?;
    let m = DistanceProbe::new(model, &prompts, cli.positions())?.sweep(cli.pair_filter()?, Protocol::Interchange)?;
    w.emit("distances_interchange", &m, &ALL_FORMATS)?;
    layer_scores_from_pairs(&m, ScoreMode::MinAny)
}

#[allow(clippy::too_many_arguments)]
fn prune(
    cli: &Cli,
    w: &mut RunWriter,
    model: &Checkpoint,
    score_mode: ScoreModeArg,
    window: Option<&str>,
    (width, beam_seeds): (usize, usize),
    (oracle_corpus, oracle_contract): (Option<&Path>, Option<&str>),
) -> Result<()> {
    let method = require(&cli.method, "method")?.as_str();
    let n = *require(&cli.n, "n")?;
    let l = model.config.n_layers;
    let mode = match score_mode {
        ScoreModeArg::MinAny => ScoreMode::MinAny,
        ScoreModeArg::MinNeighbor => ScoreMode::MinNeighbor,
    };
    let (lo, hi) = window.map(parse_window).transpose()?.unwrap_or((0, l.saturating_sub(1)));
    let greedy = |s: &[f64], name: &str| {
        let mut r = greedy_select_in(s, n, cli.delta, |k| (lo..=hi).contains(&k));
        r.method = name.to_string();
        r
    };
    let needs_eval = cli.corpus.is_some() && cli.contract.is_some();
    let evals = if needs_eval || matches!(method, "sleb-greedy" | "sleb-iterative" | "beam") {
        Some(Evaluators::load(cli, oracle_corpus, oracle_contract)?)
    } else {
        None
    };
    let mut result = match method {
        "greedy-replacement" | "greedy-interchange" => {
            let protocol = if method == "greedy-replacement" {
                Protocol::Replacement
            } else {
                Protocol::Interchange
            };
            let prompts = cli.load_prompts()?;
            let m = DistanceProbe::new(model, &prompts, cli.positions())?.sweep(cli.pair_filter()?, protocol)?;
            w.emit(&format!("distances_{protocol}"), &m, &ALL_FORMATS)?;
            greedy(&layer_scores_from_pairs(&m, mode)?, method)
        }
        "bi" => greedy(&bi_scores(model, &cli.load_prompts()?)?.scores, "bi"),
        "cka" => {
            let c = cka_adjacent(model, &cli.load_prompts()?)?;
            w.write_json("cka.json", &c)?;
            greedy(&c.removal_scores(), "cka")
        }
        "random" => random_select(l, n, cli.delta, cli.seed)?,
        "sleb-greedy" | "sleb-iterative" => {
            let e = evals.as_ref().expect("loaded above");
            let variant = if method == "sleb-greedy" {
                SlebVariant::Greedy
            } else {
                SlebVariant::Iterative
            };
            let mut led = ledger(cli);
            let r = sleb_select(&e.oracle(model), n, variant, &mut led)?;
            w.write_json("ledger.json", &led)?;
            r
        }
        "beam" => {
            let e = evals.as_ref().expect("loaded above");
            let scores = interchange_scores(cli, w, model)?;
            let mut led = ledger(cli);
            let mut sizes = beam_select(&e.oracle(model), &scores, n, width, beam_seeds, &mut led)?;
            w.write_json("ledger.json", &led)?;
            w.write_json("beam.json", &sizes)?;
            let mut last = sizes.pop().unwrap_or_else(|| SelectionResult::new("beam", n, Vec::new()));
            last.n = n;
            last.shortfall = last.layers.len() < n;
            last.scores = Some(scores);
            last
        }
        other => {
            return Err(Error::Config(format!(
                "unknown method `{other}` (greedy-replacement, greedy-interchange, bi, cka, random, \
                 sleb-greedy, sleb-iterative, beam)"
            )))
        }
    };
    if let Some(e) = evals.as_ref().filter(|_| needs_eval) {
        e.record_ids(w);
        let ev = e.evaluator(model);
        let base = ev.ppl(&[])?;
        result.evaluate(&ev, base)?;
    }
    println!(
        "{}: layers {:?}{}{}",
        result.method,
        result.layers,
        if result.shortfall { " (shortfall)" } else { "" },
        result.delta_ppl_pct.map_or(String::new(), |d| format!(", dPPL {d:+.2}%"))
    );
    w.write_json("selection.json", &result)?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluationOutput<'a> {
    report: &'a PplReport,
    baseline_ppl: f64,
    delta_ppl_pct: f64,
}

fn evaluate(
    cli: &Cli,
    w: &mut RunWriter,
    model: &Checkpoint,
    interventions: &[String],
    selection: Option<&Path>,
    baseline: Option<&Path>,
) -> Result<()> {
    let corpus = cli.load_corpus()?;
    let contract = load_contract(require(&cli.contract, "contract")?, &corpus)?;
    w.add_contract_id(contract.id());
    let with_ci = |r: PplReport| match cli.bootstrap {
        Some(n) => r.with_ci(n, 0.95, cli.seed),
        None => Ok(r),
    };
    let base = match baseline {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_slice::<PplReport>(&bytes)?
        }
        None => with_ci(sliding_window_ppl(model, &corpus, &contract, &[])?)?,
    };
    w.write_json("baseline.json", &base)?;
    let mut ivs = interventions
        .iter()
        .map(|s| s.parse::<InterventionSpec>())
        .collect::<Result<Vec<_>>>()?;
    if let Some(p) = selection {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        let sel: SelectionResult = serde_json::from_slice(&bytes)?;
        if !sel.layers.is_empty() {
            ivs.push(InterventionSpec::delete(sel.layers.iter().copied()));
        }
    }
    let (report, delta) = evaluate_intervention(model, &corpus, &ivs, &contract, &base)?;
    let report = with_ci(report)?;
    println!(
        "contract {}: baseline PPL {:.4}, PPL {:.4}, dPPL {delta:+.3}% ({} windows, {} tokens)",
        report.contract_id, base.ppl, report.ppl, report.windows, report.scored_tokens
    );
    w.write_json(
        "ppl.json",
        &EvaluationOutput {
            report: &report,
            baseline_ppl: base.ppl,
            delta_ppl_pct: delta,
        },
    )?;
    Ok(())
}

fn gap_for(
    cli: &Cli,
    model: &Checkpoint,
    prompts: &PromptSet,
    regime: &RegimeConfig,
) -> Result<(DistanceMatrix, DistanceMatrix, GapReport)> {
    let probe = DistanceProbe::new(model, prompts, cli.positions())?.with_bootstrap(cli.bootstrap_cfg());
    let filter = cli.pair_filter()?;
    let r = probe.sweep(filter, Protocol::Replacement)?;
    let i = probe.sweep(filter, Protocol::Interchange)?;
    let gap = protocol_gap_report(&r, &i, probe.thresholds(), regime)?;
    Ok((r, i, gap))
}

fn print_verdict(gap: &GapReport) {
    println!("verdict: {}", gap.verdict);
    println!("evidence: {}", gap.evidence);
    println!("decision rule: {}", gap.verdict.advice());
    if !gap.interchange_exceeds_replacement.is_empty() {
        println!("note: interchange exceeds replacement on {:?}", gap.interchange_exceeds_replacement);
    }
}

fn diagnose(
    cli: &Cli,
    w: &mut RunWriter,
    model: &Checkpoint,
    ir_override: Option<f64>,
    ir_level: &str,
) -> Result<()> {
    let prompts = cli.load_prompts()?;
    let regime = match ir_override {
        Some(v) => RegimeConfig::with_override(v, ir_level),
        None => RegimeConfig::default(),
    };
    let (r, i, gap) = gap_for(cli, model, &prompts, &regime)?;
    print_matrix_summary(&r);
    print_matrix_summary(&i);
    print_verdict(&gap);
    w.emit("distances_replacement", &r, &ALL_FORMATS)?;
    w.emit("distances_interchange", &i, &ALL_FORMATS)?;
    w.emit("gap", &gap, &ALL_FORMATS)?;
    flagged_error(&[&r, &i])
}

fn jacobian(
    cli: &Cli,
    w: &mut RunWriter,
    model: &Checkpoint,
    layers: &[usize],
    iterations: usize,
    epsilon: f64,
) -> Result<()> {
    let prompts = cli.load_prompts()?;
    let layers = if layers.is_empty() {
        (0..model.config.n_layers).collect()
    } else {
        layers.to_vec()
    };
    let cfg = PowerConfig {
        iterations,
        epsilon,
        seed: cli.seed,
    };
    let rep = jacobian_report(model, &layers, &prompts, &cfg)?;
    for r in &rep.rows {
        let f = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.4}"));
        println!("layer {:>3}: mean {} max {} min {}", r.layer, f(r.mean), f(r.max), f(r.min));
    }
    w.emit("jacobian", &TableReport(&rep, rep.to_csv()), &[Format::Json, Format::Csv])?;
    let flagged: Vec<String> = rep
        .rows
        .iter()
        .filter(|r| !r.flagged_prompts.is_empty())
        .map(|r| format!("layer {} prompts {:?}", r.layer, r.flagged_prompts))
        .collect();
    if flagged.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("non-finite Jacobian estimates: {}", flagged.join("; "))))
    }
}

fn stability(cli: &Cli, w: &mut RunWriter, model: &Checkpoint, sizes: &[usize], top_k: usize) -> Result<()> {
    let prompts = cli.load_prompts()?;
    let protocol = cli.protocols(ProtocolArg::Replacement)[0];
    let pairs = crate::metrics::enumerate_pairs(model.config.n_layers, cli.pair_filter()?);
    let table = prompt_stability(model, &pairs, protocol, &prompts, cli.positions(), sizes, top_k, cli.seed)?;
    for r in &table.rows {
        let f = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.3}"));
        println!(
            "N={:<4} spearman {} kendall {} top-{} overlap {} max rel dev {:.3}",
            r.size,
            f(r.spearman),
            f(r.kendall),
            r.top_k,
            r.top_k_overlap,
            r.max_rel_deviation
        );
    }
    w.emit("stability", &TableReport(&table, table.to_csv()), &[Format::Json, Format::Csv])?;
    Ok(())
}

fn counterfactual(cli: &Cli, w: &mut RunWriter, model: &Checkpoint) -> Result<()> {
    let prompts = cli.load_prompts()?;
    let pairs = crate::metrics::enumerate_pairs(model.config.n_layers, cli.pair_filter()?);
    let t = crate::metrics::ClassifierThresholds::default();
    let rep = rope_counterfactual(model, &pairs, &prompts, cli.positions(), &t, &RegimeConfig::default())?;
    let f = |v: Option<f64>| v.map_or("n/a".into(), |x| format!("{x:.4}"));
    println!("baseline divergence (rope vs no rope): {:.4}", rep.baseline_divergence);
    println!(
        "I/R with rope {} without {}; larger gap without rope on {}/{} pairs",
        f(rep.with_rope.ir),
        f(rep.without_rope.ir),
        rep.larger_gap_without_rope,
        pairs.len()
    );
    if let Some(s) = &rep.sign_test {
        println!("sign test: one-sided p {:.4}, two-sided p {:.4}", s.p_one_sided, s.p_two_sided);
    }
    let mut csv = String::from("i,j,ir_rope,ir_no_rope,ir_shift,gap_rope,gap_no_rope\n");
    for s in &rep.shifts {
        let g = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.i,
            s.j,
            g(s.ir_rope),
            g(s.ir_no_rope),
            g(s.ir_shift),
            g(s.gap_rope),
            g(s.gap_no_rope)
        ));
    }
    w.emit("counterfactual", &TableReport(&rep, csv), &[Format::Json, Format::Csv])?;
    Ok(())
}

fn check_golden(w: &mut RunWriter, model: &Checkpoint, path: &Path, tolerance: f64) -> Result<()> {
    let golden = crate::golden::GoldenFixture::load(path)?;
    let cmp = golden.compare(model, tolerance)?;
    println!(
        "{} vs {}: max |diff| {:.3e} over {} sequences ({})",
        cmp.model_id,
        golden.source,
        cmp.max_abs_diff,
        cmp.per_sequence.len(),
        if cmp.passed { "pass" } else { "FAIL" }
    );
    w.write_json("golden.json", &cmp)?;
    if cmp.passed {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "logits differ from the golden fixture by {:.3e} (tolerance {tolerance:e})",
            cmp.max_abs_diff
        )))
    }
}

fn parse_method(s: &str, width: usize, seeds: usize) -> Result<SweepMethod> {
    match s {
        "sleb-greedy" => Ok(SweepMethod::SlebGreedy),
        "sleb-iterative" => Ok(SweepMethod::SlebIterative),
        "beam" => Ok(SweepMethod::Beam { width, seeds }),
        _ => Err(Error::Config(format!(
            "unknown sweep method `{s}` (sleb-greedy, sleb-iterative, beam)"
        ))),
    }
}

fn sweep(
    cli: &Cli,
    w: &mut RunWriter,
    model: &Checkpoint,
    budgets: &[usize],
    methods: &[String],
    (width, seeds): (usize, usize),
    (oracle_corpus, oracle_contract): (Option<&Path>, Option<&str>),
) -> Result<()> {
    let methods = methods
        .iter()
        .map(|m| parse_method(m, width, seeds))
        .collect::<Result<Vec<_>>>()?;
    let e = Evaluators::load(cli, oracle_corpus, oracle_contract)?;
    e.record_ids(w);
    let scores = if methods.iter().any(|m| matches!(m, SweepMethod::Beam { .. })) {
        Some(interchange_scores(cli, w, model)?)
    } else {
        None
    };
    let n_max = cli.n.unwrap_or(model.config.n_layers.saturating_sub(1));
    let rows = budget_sweep(&methods, budgets, n_max, &e.oracle(model), &e.evaluator(model), scores.as_deref())?;
    let mut csv = String::from(BudgetRow::csv_header());
    csv.push('\n');
    for r in &rows {
        println!(
            "{:<16} B={:<5} evals={:<5} removed={:<3} PPL {:.4} ({:+.2}%)",
            r.method, r.budget, r.evals_used, r.layers_removed, r.ppl, r.delta_ppl_pct
        );
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    w.emit("budget_sweep", &TableReport(&rows, csv), &[Format::Json, Format::Csv])?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct TrajectoryRow {
    checkpoint: String,
    checkpoint_hash: String,
    model_id: String,
    pooled: Option<GapStats>,
    ir: Option<f64>,
    verdict: Regime,
}

fn trajectory(cli: &Cli, w: &mut RunWriter, paths: &[PathBuf], loaded: &[Loaded]) -> Result<()> {
    let prompts = cli.load_prompts()?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    let mut flagged = Vec::new();
    for (k, (path, l)) in paths.iter().zip(loaded).enumerate() {
        let (r, i, gap) = gap_for(cli, &l.model, &prompts, &RegimeConfig::default())?;
        if let Err(e) = flagged_error(&[&r, &i]) {
            flagged.push(format!("{}: {e}", path.display()));
        }
        w.emit(&format!("gap_{k:03}"), &gap, &[Format::Json, Format::Csv])?;
        if let Some(s) = gap.pooled {
            for (series, y) in [("mean", s.mean), ("median", s.median), ("p75", s.p75), ("max", s.max)] {
                points.push(PlotPoint {
                    series: series.into(),
                    x: k as f64,
                    y,
                    value: None,
                });
            }
        }
        println!(
            "{}: verdict {} mean gap {}",
            path.display(),
            gap.verdict,
            gap.pooled.map_or("n/a".into(), |s| format!("{:.4}", s.mean))
        );
        rows.push(TrajectoryRow {
            checkpoint: path.display().to_string(),
            checkpoint_hash: l.hash.clone(),
            model_id: l.model.config.model_id(),
            pooled: gap.pooled,
            ir: gap.ir,
            verdict: gap.verdict,
        });
    }
    let mut csv = String::from("index,checkpoint,mean,median,p75,max,ir,verdict\n");
    for (k, r) in rows.iter().enumerate() {
        let p = |f: fn(&GapStats) -> f64| r.pooled.as_ref().map(|s| format!("{:.9}", f(s))).unwrap_or_default();
        csv.push_str(&format!(
            "{k},{},{},{},{},{},{},{}\n",
            r.checkpoint,
            p(|s| s.mean),
            p(|s| s.median),
            p(|s| s.p75),
            p(|s| s.max),
            r.ir.map(|x| format!("{x:.9}")).unwrap_or_default(),
            r.verdict
        ));
    }
    w.emit("trajectory", &TableReport(&rows, csv), &[Format::Json, Format::Csv])?;
    w.write_text("trajectory.plot.csv", &crate::report::plot_csv(&points))?;
    if flagged.is_empty() {
        Ok(())
    } else {
        Err(Error::NonFinite(flagged.join("; ")))
    }
}

fn make_fixture(cli: &Cli, preset: Preset, layers: usize, corpus_tokens: usize, dest: &Path) -> Result<()> {
    let spec = match preset {
        Preset::Gpt2 => FixtureSpec::gpt2(layers),
        Preset::Llama => FixtureSpec::llama(layers),
        Preset::Qwen => FixtureSpec::qwen(layers),
        Preset::Bloom => FixtureSpec::bloom(layers),
        Preset::Neox => FixtureSpec::neox(layers),
    };
    // Long enough for the built-in contracts' windows.
    let spec = FixtureSpec {
        max_position: spec.max_position.max(1024),
        ..spec
    };
    let mut model = random_model(&spec, cli.seed)?;
    let tag = format!("{preset:?}").to_lowercase();
    model.config.name = Some(format!("fixture-{tag}-L{layers}-s{}", cli.seed));
    std::fs::create_dir_all(dest).map_err(|e| Error::io(dest, e))?;
    model.save(dest.join("model.ckpt"))?;
    let tokens: Vec<u32> = random_prompts(spec.vocab_size, 1, corpus_tokens, cli.seed ^ 0x5eed)
        .pop()
        .unwrap_or_default();
    let corpus = TokenCorpus::new(
        format!("fixture-{tag}-s{}", cli.seed),
        "uniform random tokens",
        spec.vocab_size,
        tokens,
    )?;
    corpus.save(dest.join("corpus.tokens"))?;
    let prompts = PromptSet::new(
        format!("fixture-random-s{}", cli.seed),
        random_prompts(spec.vocab_size, cli.prompt_count, cli.prompt_len, cli.seed),
    )?;
    prompts.save(dest.join("prompts.json"))?;
    println!("wrote fixture to {}", dest.display());
    Ok(())
}

/// Lets library users print any report as JSON without a run directory.
pub fn to_json(report: &dyn Report) -> Result<String> {
    Ok(serde_json::to_string_pretty(&report.to_json_value()?)?)
}

#[allow(dead_code)]
fn _assert_json_report(x: &SelectionResult) -> JsonReport<'_, SelectionResult> {
    JsonReport(x)
}
