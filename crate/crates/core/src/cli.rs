//! Command-line stages. Each stage reads and writes plain files and leaves
//! a `<output>.manifest.json` with content digests next to its output.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{self, DirectionCheck, ExperimentKind, ExperimentSpec};
use crate::checkpoint::{decode_checkpoint, encode_checkpoint};
use crate::config::{digest16, validate_config, M3PParams, RunConfig, RunParams};
use crate::dpo::{train, FingerprintCheck};
use crate::error::{Error, Result};
use crate::policy::{generate_candidates, ToyPolicy};
use crate::records::{self, read_bytes, read_text, write_output};
use crate::rng::SeededRng;
use crate::scoring::{apply_external_scores, parse_score_records, score_pool, ScoringTask};
use crate::selection::build_preference_dataset;
use crate::types::CandidatePool;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_DEGENERATE: i32 = 2;
pub const EXIT_FINGERPRINT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_ASSERTION: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "m3po", version, about = "Confidence-aware preference mining and DPO on a toy policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a synthetic world: prompts, tasks, base policy and a config.
    World(WorldArgs),
    /// Sample a candidate pool per prompt.
    Generate(GenerateArgs),
    /// Attach MAS values from tasks or from an external score file.
    Score(ScoreArgs),
    /// Mine one preference pair per pool.
    Select(SelectArgs),
    /// DPO-train the adapter on preference pairs.
    Train(TrainArgs),
    /// Run an ablation or sweep described by an experiment file.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct WorldArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = bench::DEFAULT_TASKS)]
    tasks: usize,
    #[arg(long, default_value_t = bench::DEFAULT_BIAS)]
    bias: f64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    prompts: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the sampling seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    pools: PathBuf,
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    pools: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    policy: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Overrides the DPO shuffle seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Train even if the pairs were mined under a different config.
    #[arg(long)]
    allow_fingerprint_mismatch: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Exit with status 5 unless the full configuration beats the α = 0
    /// arm in at least four fifths of the seeds (ablation only).
    #[arg(long)]
    assert_direction: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    /// Path → SHA-256 of the file content.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub config_fingerprint: String,
    pub duration_ms: u64,
    pub tool_version: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(OsString::from).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Collects digests while a stage runs and writes its manifest last.
struct Stage {
    name: &'static str,
    started: Instant,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    force: bool,
}

impl Stage {
    fn new(name: &'static str, force: bool) -> Self {
        Self {
            name,
            started: Instant::now(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            force,
        }
    }

    fn read_text(&mut self, path: &Path) -> Result<String> {
        let text = read_text(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(text.as_bytes()));
        Ok(text)
    }

    fn read_bytes(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = read_bytes(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_output(path, bytes, self.force)?;
        self.outputs.insert(path.display().to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn finish(self, manifest: &Path, config_fingerprint: String) -> Result<()> {
        let m = StageManifest {
            stage: self.name.to_string(),
            inputs: self.inputs,
            outputs: self.outputs,
            config_fingerprint,
            duration_ms: self.started.elapsed().as_millis() as u64,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        let mut text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        text.push('\n');
        write_output(manifest, text.as_bytes(), true)
    }
}

fn run_fingerprint(cfg: &RunConfig) -> String {
    digest16(&cfg.serialize())
}

fn load_config(stage: &mut Stage, path: &Path) -> Result<RunConfig> {
    let text = stage.read_text(path)?;
    RunConfig::parse(&text, &path.display().to_string())
}

fn load_policy(stage: &mut Stage, path: &Path) -> Result<ToyPolicy> {
    let bytes = stage.read_bytes(path)?;
    decode_checkpoint(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Parses `args` (program name first) and runs the stage; returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::World(a) => cmd_world(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Score(a) => cmd_score(a),
        Command::Select(a) => cmd_select(a),
        Command::Train(a) => cmd_train(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_world(a: WorldArgs) -> Result<i32> {
    let world = bench::make_world(a.seed, a.tasks, a.bias)?;
    let mut stage = Stage::new("world", a.force);
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let train: Vec<_> = world.train_tasks().iter().map(|t| t.prompt().clone()).collect();
    let mut params = RunParams::default();
    params.sampling.max_tokens = world.recipe.answer_len as i64;
    let cfg = validate_config(params)?;
    let dir = &a.out_dir;
    stage.write(&dir.join("prompts.jsonl"), records::encode_prompts(&train).as_bytes())?;
    stage.write(&dir.join("tasks.jsonl"), records::encode_tasks(world.train_tasks()).as_bytes())?;
    stage.write(
        &dir.join("heldout_tasks.jsonl"),
        records::encode_tasks(world.heldout_tasks()).as_bytes(),
    )?;
    stage.write(&dir.join("policy.ckpt"), &encode_checkpoint(world.base_policy()))?;
    stage.write(&dir.join("config.kv"), cfg.serialize().as_bytes())?;
    stage.finish(&dir.join("world.manifest.json"), run_fingerprint(&cfg))?;
    eprintln!(
        "world: {} training prompts, {} held-out tasks, bias {}",
        world.train_tasks().len(),
        world.heldout_tasks().len(),
        a.bias
    );
    Ok(EXIT_OK)
}

fn cmd_generate(a: GenerateArgs) -> Result<i32> {
    let mut stage = Stage::new("generate", a.force);
    let mut cfg = load_config(&mut stage, &a.config)?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    let prompts_text = stage.read_text(&a.prompts)?;
    let prompts = records::parse_prompts(&prompts_text, &a.prompts.display().to_string())?;
    let policy_bytes = stage.read_bytes(&a.policy)?;
    let policy_digest = sha256_hex(&policy_bytes);
    let policy =
        decode_checkpoint(&policy_bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", a.policy.display())))?;
    let n = cfg.m3p.n();
    let pools = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = SeededRng::child(cfg.sampling.seed, i as u64);
            generate_candidates(&policy, p, n, &cfg.sampling, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let flagged = pools.iter().filter(|p| p.is_degenerate()).count();
    if !pools.is_empty() && flagged == pools.len() {
        return Err(Error::DegenerateWorld(format!(
            "all {flagged} pools have duplicate candidates; the policy is too peaked for N = {n}"
        )));
    }
    let fingerprint = digest16(&format!(
        "generate/v1;{};n={n};policy={policy_digest}",
        cfg.sampling.fingerprint()
    ));
    stage.write(&a.out, records::encode_pools(&pools, &fingerprint).as_bytes())?;
    stage.finish(&manifest_path(&a.out), run_fingerprint(&cfg))?;
    eprintln!("generate: {} pools of {n} candidates ({flagged} flagged degenerate)", pools.len());
    Ok(EXIT_OK)
}

fn cmd_score(a: ScoreArgs) -> Result<i32> {
    let mut stage = Stage::new("score", a.force);
    let source = match (&a.tasks, &a.scores) {
        (Some(t), None) => t.clone(),
        (None, Some(s)) => s.clone(),
        _ => {
            return Err(Error::invalid(
                "arguments",
                "give exactly one of --tasks or --scores",
            ))
        }
    };
    let pools_text = stage.read_text(&a.pools)?;
    let (fingerprint, pools) = records::parse_pools(&pools_text, &a.pools.display().to_string())?;
    let source_text = stage.read_text(&source)?;
    let scored: Vec<CandidatePool> = if a.tasks.is_some() {
        let tasks = records::parse_tasks(&source_text, &source.display().to_string())?;
        let by_id: HashMap<&str, &ScoringTask> = tasks.iter().map(|t| (t.prompt().id(), t)).collect();
        pools
            .iter()
            .map(|p| {
                by_id
                    .get(p.prompt().id())
                    .map(|t| score_pool(p, t))
                    .ok_or_else(|| Error::invalid("tasks", format!("no task for prompt `{}`", p.prompt().id())))
            })
            .collect::<Result<_>>()?
    } else {
        let recs = parse_score_records(&source_text)?;
        apply_external_scores(&pools, &recs)?
    };
    stage.write(&a.out, records::encode_pools(&scored, &fingerprint).as_bytes())?;
    stage.finish(&manifest_path(&a.out), fingerprint)?;
    eprintln!("score: {} pools scored", scored.len());
    Ok(EXIT_OK)
}

fn cmd_select(a: SelectArgs) -> Result<i32> {
    let mut stage = Stage::new("select", a.force);
    let cfg = load_config(&mut stage, &a.config)?;
    let text = stage.read_text(&a.pools)?;
    let (_, pools) = records::parse_pools(&text, &a.pools.display().to_string())?;
    if let Some(p) = pools.iter().find(|p| !p.is_scored()) {
        return Err(Error::UnscoredPool(p.prompt().id().to_string()));
    }
    let dataset = build_preference_dataset(&pools, &cfg.m3p);
    let mut reasons: BTreeMap<&str, usize> = BTreeMap::new();
    for s in &dataset.skipped {
        *reasons.entry(s.reason.as_str()).or_default() += 1;
    }
    eprintln!(
        "select: {} pairs from {} pools, {} skipped",
        dataset.pairs.len(),
        pools.len(),
        dataset.skipped.len()
    );
    for (reason, count) in &reasons {
        eprintln!("  skipped {count}: {reason}");
    }
    if dataset.pairs.is_empty() {
        return Err(Error::DegenerateWorld("no pool yields a preference pair".into()));
    }
    stage.write(&a.out, records::encode_pairs(&dataset).as_bytes())?;
    stage.finish(&manifest_path(&a.out), dataset.fingerprint.clone())?;
    Ok(EXIT_OK)
}

fn cmd_train(a: TrainArgs) -> Result<i32> {
    let mut stage = Stage::new("train", a.force);
    let mut cfg = load_config(&mut stage, &a.config)?;
    if let Some(seed) = a.seed {
        cfg = cfg.with_seed(seed);
    }
    let text = stage.read_text(&a.pairs)?;
    let dataset = records::parse_pairs(&text, &a.pairs.display().to_string())?;
    let policy = load_policy(&mut stage, &a.policy)?;
    let expected = cfg.m3p.fingerprint();
    let check = if a.allow_fingerprint_mismatch {
        if expected != dataset.fingerprint {
            eprintln!(
                "warning: training on pairs with fingerprint {} under config fingerprint {expected}",
                dataset.fingerprint
            );
        }
        FingerprintCheck::Override
    } else {
        FingerprintCheck::Require(&expected)
    };
    let (trained, report) = train(&dataset, &policy, &cfg.dpo, check)?;
    stage.write(&a.out, &encode_checkpoint(&trained))?;
    stage.write(&a.report, report.to_metrics_text().as_bytes())?;
    stage.finish(&manifest_path(&a.out), run_fingerprint(&cfg))?;
    eprintln!(
        "train: {} steps, final loss {:.6}, accuracy {:.4}",
        report.steps,
        report.losses.last().copied().unwrap_or(f64::NAN),
        report.final_accuracy
    );
    Ok(EXIT_OK)
}

fn cmd_bench(a: BenchArgs) -> Result<i32> {
    let mut stage = Stage::new("bench", a.force);
    let text = stage.read_text(&a.spec)?;
    let spec = ExperimentSpec::parse(&text, &a.spec.display().to_string())?;
    if a.assert_direction && spec.kind != ExperimentKind::Ablation {
        return Err(Error::invalid("arguments", "--assert-direction applies to ablation experiments"));
    }
    let cfg = validate_config(spec.run)?;
    let world = bench::make_world(spec.world_seed, spec.n_tasks, spec.bias)?;
    std::fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let dir = &a.out_dir;
    let mut code = EXIT_OK;
    match spec.kind {
        ExperimentKind::Ablation => {
            let ablated = M3PParams {
                alpha: 0.0,
                ..cfg.m3p.params()
            }
            .validate()?;
            let (full, abl) = bench::run_ablation(&world, &cfg.m3p, &ablated, &cfg.dpo, &cfg.sampling, &spec.seeds)?;
            let check = DirectionCheck::new(&full, &abl);
            stage.write(&dir.join("ablation.csv"), bench::ablation_table(&full, &abl).as_bytes())?;
            stage.write(
                &dir.join("per_seed.jsonl"),
                bench::per_seed_log(&[full, abl]).as_bytes(),
            )?;
            eprintln!(
                "bench: R_l log-prob higher in {}/{} seeds, accuracy higher in {}/{} (need {})",
                check.rl_wins,
                check.seeds,
                check.accuracy_wins,
                check.seeds,
                check.required()
            );
            if a.assert_direction && !(check.rl_holds() && check.accuracy_holds()) {
                eprintln!("bench: direction assertion failed");
                code = EXIT_ASSERTION;
            }
        }
        ExperimentKind::Sweep => {
            let sweep = bench::run_sweep(
                &world,
                &spec.alphas,
                &spec.deltas,
                &cfg.m3p,
                &cfg.dpo,
                &cfg.sampling,
                &spec.seeds,
            )?;
            stage.write(&dir.join("sweep_alpha.csv"), bench::sweep_table("alpha", &sweep.alpha_rows).as_bytes())?;
            stage.write(&dir.join("sweep_delta.csv"), bench::sweep_table("delta", &sweep.delta_rows).as_bytes())?;
            stage.write(&dir.join("sweep_grid.csv"), bench::sweep_table("grid", &sweep.grid).as_bytes())?;
            stage.write(&dir.join("per_seed.jsonl"), bench::per_seed_log(&sweep.grid).as_bytes())?;
        }
    }
    stage.finish(&dir.join("bench.manifest.json"), run_fingerprint(&cfg))?;
    Ok(code)
}
