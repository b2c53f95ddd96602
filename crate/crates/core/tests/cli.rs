use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use m3po::checkpoint::{decode_checkpoint, encode_checkpoint};
use m3po::cli::{sha256_hex, StageManifest};
use m3po::config::RunParams;
use m3po::dpo::{train, FingerprintCheck};
use m3po::policy::{generate_candidates, ModelShape};
use m3po::records;
use m3po::scoring::{score_pool, ScoringTask};
use m3po::selection::build_preference_dataset;
use m3po::{validate_config, Prompt, RunConfig, SeededRng, ToyPolicy};

const N_PROMPTS: usize = 10;

struct Fixture {
    dir: tempfile::TempDir,
    tasks: Vec<ScoringTask>,
    policy: ToyPolicy,
}

impl Fixture {
    fn new() -> Self {
        Self::with_params(RunParams::default())
    }

    fn with_params(mut params: RunParams) -> Self {
        params.sampling.max_tokens = 3;
        let dir = tempfile::tempdir().unwrap();
        let shape = ModelShape {
            vocab_size: 40,
            context_window: 8,
            embed_dim: 4,
            hidden_dim: 8,
        };
        let policy = ToyPolicy::random(shape, 2, 1.0, None, 7).unwrap();
        let tasks: Vec<ScoringTask> = (0..N_PROMPTS as u32)
            .map(|i| {
                let prompt = Prompt::new(format!("p{i}"), vec![1 + i, 2 + i], format!("prompt {i}")).unwrap();
                ScoringTask::new(prompt, vec![10 + i, 20 + i, 30 + i], vec![vec![11 + i, 21 + i, 31 + i]]).unwrap()
            })
            .collect();
        let prompts: Vec<Prompt> = tasks.iter().map(|t| t.prompt().clone()).collect();
        let f = Fixture { dir, tasks, policy };
        std::fs::write(f.path("policy.ckpt"), encode_checkpoint(&f.policy)).unwrap();
        std::fs::write(f.path("prompts.jsonl"), records::encode_prompts(&prompts)).unwrap();
        std::fs::write(f.path("tasks.jsonl"), records::encode_tasks(&f.tasks)).unwrap();
        std::fs::write(f.path("run.kv"), validate_config(params).unwrap().serialize()).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_m3po"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "m3po {args:?} exited {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }

    fn read(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.path(name)).unwrap()
    }

    fn generate(&self, out: &str) {
        self.ok(&["generate", "--config", "run.kv", "--prompts", "prompts.jsonl", "--policy", "policy.ckpt", "--out", out]);
    }

    fn pipeline(&self) {
        self.generate("pools.jsonl");
        self.ok(&["score", "--pools", "pools.jsonl", "--tasks", "tasks.jsonl", "--out", "scored.jsonl"]);
        self.ok(&["select", "--pools", "scored.jsonl", "--config", "run.kv", "--out", "pairs.jsonl"]);
        self.ok(&["train", "--pairs", "pairs.jsonl", "--policy", "policy.ckpt", "--config", "run.kv", "--out", "trained.ckpt", "--report", "report.txt"]);
    }
}

fn code(out: &Output) -> Option<i32> {
    out.status.code()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn manifest(path: &Path) -> StageManifest {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn generate_writes_one_full_pool_per_prompt() {
    let f = Fixture::new();
    f.generate("pools.jsonl");
    let (_, pools) = records::parse_pools(&String::from_utf8(f.read("pools.jsonl")).unwrap(), "pools").unwrap();
    assert_eq!(pools.len(), N_PROMPTS);
    assert!(pools.iter().all(|p| p.len() == 32));

    let m = manifest(&f.path("pools.jsonl.manifest.json"));
    assert_eq!(m.stage, "generate");
    assert_eq!(m.outputs.values().next().unwrap(), &sha256_hex(&f.read("pools.jsonl")));
    assert_eq!(m.inputs.len(), 3);
}

#[test]
fn generate_is_deterministic_and_seed_flag_overrides() {
    let f = Fixture::new();
    f.generate("a.jsonl");
    f.generate("b.jsonl");
    assert_eq!(f.read("a.jsonl"), f.read("b.jsonl"));
    f.ok(&["generate", "--config", "run.kv", "--prompts", "prompts.jsonl", "--policy", "policy.ckpt", "--out", "c.jsonl", "--seed", "99"]);
    assert_ne!(f.read("a.jsonl"), f.read("c.jsonl"));
}

#[test]
fn missing_prompts_file_is_an_input_error_naming_the_path() {
    let f = Fixture::new();
    let out = f.run(&["generate", "--config", "run.kv", "--prompts", "nope.jsonl", "--policy", "policy.ckpt", "--out", "x.jsonl"]);
    assert_eq!(code(&out), Some(1));
    assert!(stderr(&out).contains("nope.jsonl"), "{}", stderr(&out));
    assert!(!f.path("x.jsonl").exists());
}

#[test]
fn bad_config_and_bad_checkpoint_are_input_errors() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.kv"), "m3p.alpha = -2\n").unwrap();
    let out = f.run(&["generate", "--config", "bad.kv", "--prompts", "prompts.jsonl", "--policy", "policy.ckpt", "--out", "x.jsonl"]);
    assert_eq!(code(&out), Some(1));
    assert!(stderr(&out).contains("alpha"), "{}", stderr(&out));
    std::fs::write(f.path("junk.ckpt"), b"not a checkpoint").unwrap();
    let out = f.run(&["generate", "--config", "run.kv", "--prompts", "prompts.jsonl", "--policy", "junk.ckpt", "--out", "x.jsonl"]);
    assert_eq!(code(&out), Some(1));
    let out = f.run(&["frobnicate"]);
    assert_eq!(code(&out), Some(1));
}

#[test]
fn score_needs_exactly_one_source() {
    let f = Fixture::new();
    f.generate("pools.jsonl");
    let both = f.run(&["score", "--pools", "pools.jsonl", "--tasks", "tasks.jsonl", "--scores", "s.jsonl", "--out", "o.jsonl"]);
    assert_eq!(code(&both), Some(1));
    let neither = f.run(&["score", "--pools", "pools.jsonl", "--out", "o.jsonl"]);
    assert_eq!(code(&neither), Some(1));
    assert!(!f.path("o.jsonl").exists());
}

#[test]
fn oracle_scoring_populates_every_candidate() {
    let f = Fixture::new();
    f.generate("pools.jsonl");
    f.ok(&["score", "--pools", "pools.jsonl", "--tasks", "tasks.jsonl", "--out", "scored.jsonl"]);
    let (_, scored) = records::parse_pools(&String::from_utf8(f.read("scored.jsonl")).unwrap(), "s").unwrap();
    let (_, pools) = records::parse_pools(&String::from_utf8(f.read("pools.jsonl")).unwrap(), "p").unwrap();
    for ((s, p), t) in scored.iter().zip(&pools).zip(&f.tasks) {
        assert!(s.is_scored());
        assert_eq!(s, &score_pool(p, t));
    }
}

fn external_scores(f: &Fixture, skip: Option<(usize, usize)>) -> String {
    let (_, pools) = records::parse_pools(&String::from_utf8(f.read("pools.jsonl")).unwrap(), "p").unwrap();
    let mut lines = String::new();
    for (pi, pool) in pools.iter().enumerate() {
        for ci in 0..pool.len() {
            if skip == Some((pi, ci)) {
                continue;
            }
            let mas = ((pi * 7 + ci * 13) % 17) as f64 / 16.0;
            lines.push_str(&format!(
                "{{\"prompt_id\":\"{}\",\"candidate_index\":{ci},\"mas\":{mas}}}\n",
                pool.prompt().id()
            ));
        }
    }
    lines
}

#[test]
fn external_scores_are_applied_verbatim() {
    let f = Fixture::new();
    f.generate("pools.jsonl");
    std::fs::write(f.path("scores.jsonl"), external_scores(&f, None)).unwrap();
    f.ok(&["score", "--pools", "pools.jsonl", "--scores", "scores.jsonl", "--out", "scored.jsonl"]);
    let (_, scored) = records::parse_pools(&String::from_utf8(f.read("scored.jsonl")).unwrap(), "s").unwrap();
    for (pi, pool) in scored.iter().enumerate() {
        for (ci, c) in pool.candidates().iter().enumerate() {
            assert_eq!(c.mas(), Some(((pi * 7 + ci * 13) % 17) as f64 / 16.0));
        }
    }
}

#[test]
fn incomplete_external_scores_name_the_gap() {
    let f = Fixture::new();
    f.generate("pools.jsonl");
    std::fs::write(f.path("scores.jsonl"), external_scores(&f, Some((3, 5)))).unwrap();
    let out = f.run(&["score", "--pools", "pools.jsonl", "--scores", "scores.jsonl", "--out", "scored.jsonl"]);
    assert_eq!(code(&out), Some(1));
    let err = stderr(&out);
    assert!(err.contains("p3") && err.contains('5'), "{err}");
}

#[test]
fn outputs_are_not_overwritten_without_force() {
    let f = Fixture::new();
    f.generate("pools.jsonl");
    std::fs::write(f.path("scored.jsonl"), "keep me").unwrap();
    let out = f.run(&["score", "--pools", "pools.jsonl", "--tasks", "tasks.jsonl", "--out", "scored.jsonl"]);
    assert_eq!(code(&out), Some(1));
    assert_eq!(f.read("scored.jsonl"), b"keep me");
    f.ok(&["score", "--pools", "pools.jsonl", "--tasks", "tasks.jsonl", "--out", "scored.jsonl", "--force"]);
    assert_ne!(f.read("scored.jsonl"), b"keep me");
}

#[test]
fn select_rejects_unscored_pools() {
    let f = Fixture::new();
    f.generate("pools.jsonl");
    let out = f.run(&["select", "--pools", "pools.jsonl", "--config", "run.kv", "--out", "pairs.jsonl"]);
    assert_eq!(code(&out), Some(1));
}

#[test]
fn select_with_alpha_zero_matches_a_gap_only_oracle() {
    let mut params = RunParams::default();
    params.m3p.alpha = 0.0;
    let f = Fixture::with_params(params);
    f.generate("pools.jsonl");
    f.ok(&["score", "--pools", "pools.jsonl", "--tasks", "tasks.jsonl", "--out", "scored.jsonl"]);
    let out = f.ok(&["select", "--pools", "scored.jsonl", "--config", "run.kv", "--out", "pairs.jsonl"]);
    assert!(stderr(&out).contains("pairs from 10 pools"), "{}", stderr(&out));
    let (_, pools) = records::parse_pools(&String::from_utf8(f.read("scored.jsonl")).unwrap(), "s").unwrap();
    let dataset = records::parse_pairs(&String::from_utf8(f.read("pairs.jsonl")).unwrap(), "pairs").unwrap();
    assert!(dataset.pairs.len() + dataset.skipped.len() == pools.len());
    for pair in &dataset.pairs {
        let pool = pools.iter().find(|p| p.prompt() == pair.prompt()).unwrap();
        let c = pool.candidates();
        let mas = |i: usize| c[i].mas().unwrap();
        let mut w = 0;
        for i in 1..c.len() {
            if mas(i) > mas(w) {
                w = i;
            }
        }
        let mut l = None;
        for j in 0..c.len() {
            if j != w && c[j].tokens() != c[w].tokens() && l.is_none_or(|b| mas(j) < mas(b)) {
                l = Some(j);
            }
        }
        assert_eq!((pair.preferred_index(), Some(pair.dispreferred_index())), (w, l));
    }

    let first = manifest(&f.path("pairs.jsonl.manifest.json"));
    f.ok(&["select", "--pools", "scored.jsonl", "--config", "run.kv", "--out", "pairs.jsonl", "--force"]);
    let second = manifest(&f.path("pairs.jsonl.manifest.json"));
    assert_eq!(first.outputs, second.outputs);
    assert_eq!(first.inputs, second.inputs);
}

#[test]
fn outputs_start_with_a_versioned_header() {
    let f = Fixture::new();
    f.pipeline();
    for name in ["pools.jsonl", "scored.jsonl", "pairs.jsonl"] {
        let text = String::from_utf8(f.read(name)).unwrap();
        let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(header["version"], 1, "{name}");
        assert!(header["fingerprint"].is_string(), "{name}");
    }
    let report = String::from_utf8(f.read("report.txt")).unwrap();
    assert!(report.starts_with("# m3po-metrics v1 dataset_fingerprint="));
}

#[test]
fn training_report_starts_at_ln_2() {
    let f = Fixture::new();
    f.pipeline();
    let report = String::from_utf8(f.read("report.txt")).unwrap();
    let first = report.lines().find(|l| l.starts_with("step=0 ")).unwrap();
    let loss: f64 = first
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("loss="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
    decode_checkpoint(&f.read("trained.ckpt")).unwrap();
}

#[test]
fn fingerprint_mismatch_exits_3_unless_overridden() {
    let f = Fixture::new();
    f.pipeline();
    let mut other = RunConfig::parse(&String::from_utf8(f.read("run.kv")).unwrap(), "run.kv")
        .unwrap()
        .serialize();
    other = other.replace("m3p.delta = 0.1", "m3p.delta = 0.2");
    std::fs::write(f.path("other.kv"), other).unwrap();
    let args = ["train", "--pairs", "pairs.jsonl", "--policy", "policy.ckpt", "--config", "other.kv", "--out", "t2.ckpt", "--report", "r2.txt"];
    let out = f.run(&args);
    assert_eq!(code(&out), Some(3));
    let dataset = records::parse_pairs(&String::from_utf8(f.read("pairs.jsonl")).unwrap(), "pairs").unwrap();
    assert!(stderr(&out).contains(&dataset.fingerprint), "{}", stderr(&out));
    assert!(!f.path("t2.ckpt").exists());

    let mut forced = args.to_vec();
    forced.push("--allow-fingerprint-mismatch");
    f.ok(&forced);
}

#[test]
fn zero_epochs_leave_the_checkpoint_unchanged() {
    let mut params = RunParams::default();
    params.dpo.epochs = 0;
    let f = Fixture::with_params(params);
    f.pipeline();
    assert_eq!(f.read("trained.ckpt"), f.read("policy.ckpt"));
}

#[test]
fn chained_stages_equal_the_in_process_pipeline() {
    let f = Fixture::new();
    f.pipeline();
    let cfg = RunConfig::parse(&String::from_utf8(f.read("run.kv")).unwrap(), "run.kv").unwrap();
    let pools: Vec<_> = f
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut rng = SeededRng::child(cfg.sampling.seed, i as u64);
            let pool = generate_candidates(&f.policy, t.prompt(), cfg.m3p.n(), &cfg.sampling, &mut rng).unwrap();
            score_pool(&pool, t)
        })
        .collect();
    let dataset = build_preference_dataset(&pools, &cfg.m3p);
    assert_eq!(records::encode_pairs(&dataset).into_bytes(), f.read("pairs.jsonl"));
    let (trained, report) = train(&dataset, &f.policy, &cfg.dpo, FingerprintCheck::Require(&cfg.m3p.fingerprint())).unwrap();
    assert_eq!(encode_checkpoint(&trained), f.read("trained.ckpt"));
    assert_eq!(report.to_metrics_text().into_bytes(), f.read("report.txt"));
}

#[test]
fn bench_writes_tables_and_rejects_bad_specs() {
    let f = Fixture::new();
    std::fs::write(
        f.path("ablation.kv"),
        "experiment = ablation\nworld.n_tasks = 32\nworld.bias = 4\nm3p.n_candidates = 8\n",
    )
    .unwrap();
    f.ok(&["bench", "--spec", "ablation.kv", "--out-dir", "abl"]);
    let table = String::from_utf8(f.read("abl/ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3, "{table}");
    assert!(rows[1].starts_with("full,0.5,") && rows[2].starts_with("no_confidence_term,0,"), "{table}");
    assert_eq!(String::from_utf8(f.read("abl/per_seed.jsonl")).unwrap().lines().count(), 10);

    std::fs::write(
        f.path("sweep.kv"),
        "experiment = sweep\nworld.n_tasks = 32\nsweep.alphas = 0, 0.1, 0.25, 0.5, 0.75, 1\nsweep.deltas = 0.1\nm3p.n_candidates = 8\n",
    )
    .unwrap();
    let out = f.run(&["bench", "--spec", "sweep.kv", "--out-dir", "sw", "--assert-direction"]);
    assert_eq!(code(&out), Some(1));
    f.ok(&["bench", "--spec", "sweep.kv", "--out-dir", "sw"]);
    let alpha = String::from_utf8(f.read("sw/sweep_alpha.csv")).unwrap();
    assert_eq!(alpha.lines().count(), 7, "{alpha}");

    std::fs::write(f.path("bad.kv"), "experiment = race\n").unwrap();
    assert_eq!(code(&f.run(&["bench", "--spec", "bad.kv", "--out-dir", "bad"])), Some(1));
    std::fs::write(f.path("few.kv"), "seeds = 1, 2\n").unwrap();
    assert_eq!(code(&f.run(&["bench", "--spec", "few.kv", "--out-dir", "few"])), Some(1));
}
