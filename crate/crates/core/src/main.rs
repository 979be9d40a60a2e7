use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use density_rank::analysis::{rank_by_score, Ranking, RankingJson, Stat};
use density_rank::data::encode_ppm;
use density_rank::estimators::ScoreTable;
use density_rank::harness::{
    emit_rank_strip, expect_flow, fit_model, perturb_inputs, run_base, run_dominance, run_ldt, run_perturbation, run_proxy_matrix,
    score_model, with_proxies, write_matrices, BaseScores, ExperimentConfig, HarnessError, Manifest, RunArtifacts,
    RunDir, Splits,
};
use density_rank::models::{checkpoint_load, Model};

#[derive(Parser)]
#[command(name = "density-rank", version, about = "Density rankings of trained networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the full training split and emit scores, ranking and strip.
    Train(Common),
    /// Score one split under a saved checkpoint.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "eval")]
        split: String,
    },
    /// Turn a score CSV into a ranking JSON.
    Rank {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain on the lowest-density subset found by a finished `train` run.
    Ldt {
        #[command(flatten)]
        common: Common,
        /// Output directory of the Base run.
        #[arg(long)]
        base: PathBuf,
    },
    /// Noise perturbation of a simple set under a flow trained on the config dataset.
    Perturb {
        #[command(flatten)]
        common: Common,
        /// Trained flow; trained from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rank agreement of the flow likelihood with its latent and Jacobian terms.
    Dominance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Correlation matrix of score tables and the complexity proxies.
    Matrix {
        #[command(flatten)]
        common: Common,
        /// `label=path` of an evaluation score CSV; repeatable.
        #[arg(long = "scores", value_parser = parse_labeled)]
        scores: Vec<(String, PathBuf)>,
        /// Also emit the Kendall matrix.
        #[arg(long)]
        kendall: bool,
    },
    /// Stratified rank strip of the evaluation split from a score CSV.
    Strip {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
    },
    /// Verify the hashes of a finished run and summarize its manifest.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_labeled(s: &str) -> Result<(String, PathBuf), String> {
    let (label, path) = s.split_once('=').ok_or_else(|| format!("expected label=path, got {s:?}"))?;
    if label.is_empty() {
        return Err("empty label".into());
    }
    Ok((label.to_string(), PathBuf::from(path)))
}

fn load_config(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(out) = &c.out {
        cfg.output = out.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|e| HarnessError::Io(path.display().to_string(), e))
}

fn read_scores(path: &Path) -> Result<ScoreTable, HarnessError> {
    Ok(ScoreTable::read_csv(path)?)
}

fn manifest(cfg: &ExperimentConfig, operation: &str) -> Manifest {
    let mut m = Manifest::new(operation, cfg.family.as_str(), cfg.regime.as_str());
    m.name = cfg.name.clone();
    m.config = cfg.echo();
    m.seeds.insert("global".into(), cfg.seed);
    m
}

/// A checkpoint when given, otherwise a model trained on the training split.
fn model_for(cfg: &ExperimentConfig, splits: &Splits, checkpoint: Option<&Path>, m: &mut Manifest) -> Result<Model, HarnessError> {
    match checkpoint {
        Some(p) => {
            m.notes.push(format!("model loaded from {}", p.file_name().unwrap_or_default().to_string_lossy()));
            Ok(checkpoint_load(p)?)
        }
        None => {
            let (init, train) = (cfg.derived_seed("init"), cfg.derived_seed("train"));
            m.seeds.insert("init".into(), init);
            m.seeds.insert("train".into(), train);
            let fit = fit_model(cfg, &splits.train, init, train)?;
            m.divergence = fit.divergence;
            Ok(fit.model)
        }
    }
}

fn summary(run: &RunArtifacts) -> serde_json::Value {
    json!({
        "ok": true,
        "out": run.root.display().to_string(),
        "operation": run.manifest.operation,
        "files": run.manifest.files.len(),
    })
}

fn execute(command: Command) -> Result<serde_json::Value, HarnessError> {
    match command {
        Command::Train(c) => {
            let cfg = load_config(&c)?;
            let base = run_base(&cfg)?;
            let mut s = summary(&base.artifacts);
            s["lowest_density_id"] = json!(base.lowest_density_id);
            Ok(s)
        }
        Command::Score {
            common,
            checkpoint,
            split,
        } => {
            let cfg = load_config(&common)?;
            let splits = Splits::load(&cfg)?;
            let ds = match split.as_str() {
                "eval" => &splits.eval,
                "train" => &splits.train,
                other => return Err(HarnessError::Config(format!("unknown split {other:?}"))),
            };
            let mut dir = RunDir::create(&cfg.output)?;
            let mut m = manifest(&cfg, "score");
            m.seeds.insert("data".into(), cfg.derived_seed("data"));
            let table = score_model(&checkpoint_load(&checkpoint)?, ds)?;
            dir.write(&format!("scores_{split}.csv"), table.to_csv().as_bytes())?;
            Ok(summary(&dir.finish(m)?))
        }
        Command::Rank { scores, out } => {
            let table = read_scores(&scores)?;
            let mut dir = RunDir::create(&out)?;
            dir.write_json("ranking.json", &rank_by_score(&table)?.to_json())?;
            Ok(summary(&dir.finish(Manifest::new("rank", "", ""))?))
        }
        Command::Ldt { common, base } => {
            let cfg = load_config(&common)?;
            let json: RankingJson = serde_json::from_str(&read(&base.join("ranking_eval.json"))?)
                .map_err(|e| HarnessError::Corrupt(format!("ranking_eval.json: {e}")))?;
            let scores = BaseScores {
                train: read_scores(&base.join("scores_train.csv"))?,
                eval_ranking: Ranking::from_json(&json)?,
            };
            let run = run_ldt(&cfg, &scores)?;
            let mut s = summary(&run.artifacts);
            s["report"] = serde_json::to_value(&run.report).expect("report serializes");
            Ok(s)
        }
        Command::Perturb { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let splits = Splits::load(&cfg)?;
            let mut dir = RunDir::create(&cfg.output)?;
            let mut m = manifest(&cfg, "perturb");
            let model = model_for(&cfg, &splits, checkpoint.as_deref(), &mut m)?;
            let (simple, spec, seeds) = perturb_inputs(&cfg)?;
            for (purpose, seed) in seeds {
                m.seeds.insert(purpose.into(), seed);
            }
            let report = run_perturbation(expect_flow(&model)?, &splits.train, &splits.eval, &simple, spec)?;
            dir.write_json("perturb.json", &report)?;
            dir.write("perturb.svg", report.histogram_svg().as_bytes())?;
            let mut s = summary(&dir.finish(m)?);
            s["reversal"] = json!(report.reversal);
            Ok(s)
        }
        Command::Dominance { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let splits = Splits::load(&cfg)?;
            let mut dir = RunDir::create(&cfg.output)?;
            let mut m = manifest(&cfg, "dominance");
            let model = model_for(&cfg, &splits, checkpoint.as_deref(), &mut m)?;
            let report = run_dominance(expect_flow(&model)?, &splits.eval)?;
            dir.write_json("dominance.json", &report)?;
            let mut s = summary(&dir.finish(m)?);
            s["report"] = serde_json::to_value(&report).expect("report serializes");
            Ok(s)
        }
        Command::Matrix {
            common,
            scores,
            kendall,
        } => {
            let cfg = load_config(&common)?;
            let splits = Splits::load(&cfg)?;
            let tables = scores
                .iter()
                .map(|(l, p)| Ok((l.clone(), read_scores(p)?)))
                .collect::<Result<Vec<_>, HarnessError>>()?;
            let tables = with_proxies(tables, &splits.eval)?;
            let stats: &[Stat] = if kendall { &[Stat::Spearman, Stat::Kendall] } else { &[Stat::Spearman] };
            let matrices = run_proxy_matrix(&tables, stats)?;
            let mut dir = RunDir::create(&cfg.output)?;
            write_matrices(&mut dir, &matrices)?;
            Ok(summary(&dir.finish(manifest(&cfg, "matrix"))?))
        }
        Command::Strip { common, scores } => {
            let cfg = load_config(&common)?;
            let splits = Splits::load(&cfg)?;
            let ranking = rank_by_score(&read_scores(&scores)?)?;
            let seed = cfg.derived_seed("strip");
            let strip = emit_rank_strip(&splits.eval, &ranking, cfg.strip.bins, cfg.strip.per_bin, seed)?;
            let mut dir = RunDir::create(&cfg.output)?;
            dir.write("strip_eval.ppm", &encode_ppm(&strip))?;
            let mut m = manifest(&cfg, "strip");
            m.seeds.insert("strip".into(), seed);
            Ok(summary(&dir.finish(m)?))
        }
        Command::Report { out } => {
            let run = RunArtifacts::load(&out)?;
            let bad = run.verify()?;
            if !bad.is_empty() {
                return Err(HarnessError::Corrupt(format!("hash mismatch: {}", bad.join(", "))));
            }
            let mut s = summary(&run);
            s["name"] = json!(run.manifest.name);
            s["regime"] = json!(run.manifest.regime);
            s["lowest_density_id"] = json!(run.manifest.lowest_density_id);
            s["divergence"] = serde_json::to_value(&run.manifest.divergence).expect("serializes");
            Ok(s)
        }
    }
}

fn fail(kind: &str, message: String) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", e.to_string()),
    };
    match execute(cli.command) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(e.kind(), e.to_string()),
    }
}
