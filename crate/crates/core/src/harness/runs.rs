use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::artifacts::{Divergence, Manifest, RunArtifacts, RunDir};
use super::config::{ConditionerKind, ExperimentConfig, Family, Regime};
use super::svg;
use super::HarnessError;
use crate::analysis::{
    correlation_matrix, log_density_hessian_diag, rank_by_score, second_order_gap, spearman, stratified_sample,
    AnalysisError, CorrelationMatrix, Ranking, Stat,
};
use crate::complexity::complexity_table;
use crate::data::{add_gaussian_noise, encode_ppm, pixel_moments, pixel_variance, Dataset, Image, NoiseSpec, PixelVariance};
use crate::estimators::{
    flow_log_density, score_dataset, ArScorer, EncoderScorer, FlowScorer, ProxyTag, ScoreTable, Term, JACOBIAN_EPS,
};
use crate::models::{
    encode_checkpoint, train_ar, train_autoencoder, train_flow, ArModel, ArSpec, Autoencoder, Conditioner, CouplingFlow, Encoder,
    FlowInit, FlowSpec, Mlp, MlpSpec, Model, TrainError, Trained,
};

/// Training and evaluation splits of one experiment.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Dataset,
}

impl Splits {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let (train, eval) = cfg.dataset.load(cfg.derived_seed("data"))?;
        if train.is_empty() || eval.is_empty() {
            return Err(HarnessError::Config("train and eval splits must be non-empty".into()));
        }
        if train.shape() != eval.shape() {
            return Err(HarnessError::Config("train and eval image shapes differ".into()));
        }
        Ok(Self { train, eval })
    }

    fn shape(&self) -> (usize, usize, usize) {
        self.train.shape().expect("non-empty")
    }
}

#[derive(Debug, Clone)]
enum Init {
    Flow(CouplingFlow),
    Ar(ArModel),
    Encoder(Autoencoder),
}

impl Init {
    fn new(cfg: &ExperimentConfig, (w, h, c): (usize, usize, usize), seed: u64) -> Result<Self, HarnessError> {
        let m = &cfg.model;
        Ok(match cfg.family {
            Family::Flow => {
                let mut spec = FlowSpec::for_image(w, h, c);
                spec.layers = m.flow_layers;
                if m.flow_conditioner == ConditionerKind::Dense {
                    spec.conditioner = Conditioner::Dense;
                    spec.hidden = 4 * w * h * c;
                } else {
                    spec.conditioner = Conditioner::Conv {
                        kernel: m.flow_kernel,
                        padding: m.flow_padding,
                    };
                }
                if m.flow_hidden > 0 {
                    spec.hidden = m.flow_hidden;
                }
                spec.activation = m.flow_activation;
                spec.log_scale_bound = m.log_scale_bound;
                Init::Flow(CouplingFlow::new(spec, seed, FlowInit::Zero)?)
            }
            Family::Ar => {
                let mut spec = ArSpec::for_image(w, h, c);
                spec.hidden = m.ar_hidden;
                spec.radius = m.ar_radius;
                Init::Ar(ArModel::new(spec, seed)?)
            }
            Family::Encoder => {
                let spec = MlpSpec {
                    input: w * h * c,
                    hidden: vec![m.encoder_hidden],
                    output: m.encoder_features,
                };
                Init::Encoder(Autoencoder::new(Mlp::new(spec, seed)?))
            }
        })
    }

    fn model(&self) -> Model {
        match self {
            Init::Flow(f) => Model::Flow(f.clone()),
            Init::Ar(a) => Model::Ar(a.clone()),
            Init::Encoder(ae) => Model::Encoder(Encoder::Mlp(ae.encoder())),
        }
    }
}

/// Outcome of one training run at the configured checkpoints.
#[derive(Debug, Clone)]
pub struct Fit {
    /// The final model (the last finite one after a divergence).
    pub model: Model,
    pub curve: Vec<f64>,
    /// Models at the checkpoint epochs, ascending; always ends with the final model.
    pub checkpoints: Vec<(usize, Model)>,
    pub divergence: Option<Divergence>,
}

fn collect<M: std::fmt::Debug>(
    result: Result<Trained<M>, TrainError<M>>,
    init: &Init,
    epochs: usize,
    to_model: impl Fn(&M) -> Model,
) -> Result<Fit, HarnessError> {
    match result {
        Ok(t) => {
            let mut checkpoints: Vec<(usize, Model)> = t.snapshots.iter().map(|(e, m)| (*e, to_model(m))).collect();
            let model = to_model(&t.model);
            if checkpoints.last().map(|c| c.0) != Some(epochs) {
                checkpoints.push((epochs, model.clone()));
            }
            Ok(Fit {
                model,
                curve: t.curve,
                checkpoints,
                divergence: None,
            })
        }
        Err(TrainError::Diverged {
            epoch,
            last_finite,
            curve,
        }) => {
            let model = if epoch == 1 { init.model() } else { to_model(&last_finite) };
            Ok(Fit {
                checkpoints: vec![(epoch - 1, model.clone())],
                model,
                curve,
                divergence: Some(Divergence {
                    epoch,
                    kept_epoch: epoch - 1,
                }),
            })
        }
        Err(TrainError::Empty) => Err(HarnessError::Config("training set is empty".into())),
        Err(TrainError::Model(e)) => Err(e.into()),
    }
}

/// Trains the configured family on `ds` from a fresh initialization.
pub fn fit_model(cfg: &ExperimentConfig, ds: &Dataset, init_seed: u64, train_seed: u64) -> Result<Fit, HarnessError> {
    let shape = ds.shape().ok_or_else(|| HarnessError::Config("training set is empty".into()))?;
    let init = Init::new(cfg, shape, init_seed)?;
    let mut tc = cfg.train.clone();
    tc.epochs = cfg.effective_epochs();
    tc.seed = train_seed;
    let wanted = cfg.checkpoints();
    let mut fit = match &init {
        Init::Flow(f) => collect(train_flow(f.clone(), ds, &tc, &wanted), &init, tc.epochs, |m| Model::Flow(m.clone()))?,
        Init::Ar(a) => collect(train_ar(a.clone(), ds, &tc, &wanted), &init, tc.epochs, |m| Model::Ar(m.clone()))?,
        Init::Encoder(ae) => collect(train_autoencoder(ae.clone(), ds, &tc, &wanted), &init, tc.epochs, |m| {
            Model::Encoder(Encoder::Mlp(m.encoder()))
        })?,
    };
    // the initialization is the epoch-0 checkpoint when one is requested
    if wanted.first() == Some(&0) && fit.checkpoints.first().map(|c| c.0) != Some(0) {
        fit.checkpoints.insert(0, (0, init.model()));
    }
    Ok(fit)
}

/// Scores every image of `ds` under a frozen model.
pub fn score_model(model: &Model, ds: &Dataset) -> Result<ScoreTable, HarnessError> {
    Ok(match model {
        Model::Flow(f) => score_dataset(&FlowScorer::new(f), ds)?,
        Model::Ar(a) => score_dataset(&ArScorer(a), ds)?,
        Model::Encoder(e) => score_dataset(
            &EncoderScorer {
                encoder: e,
                eps: JACOBIAN_EPS,
            },
            ds,
        )?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Selection {
    Fraction(f64),
    Count(usize),
}

/// Ids of the lowest-scored rows, lowest first; ties go to the smaller id.
pub fn select_lowest_density(table: &ScoreTable, selection: Selection) -> Result<Vec<u64>, HarnessError> {
    if table.is_empty() {
        return Err(AnalysisError::Empty.into());
    }
    let n = table.len();
    let k = match selection {
        Selection::Fraction(f) if f > 0.0 && f <= 1.0 => ((f * n as f64).ceil() as usize).clamp(1, n),
        Selection::Count(c) if c >= 1 => c.min(n),
        other => return Err(HarnessError::Config(format!("invalid selection {other:?}"))),
    };
    let mut rows: Vec<(u64, f64)> = table.iter().map(|(id, s)| (id, s.total)).collect();
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(rows.into_iter().take(k).map(|r| r.0).collect())
}

/// Contact sheet of stratified samples: one column per bin, highest density
/// on the left, 1 px white separators.
pub fn emit_rank_strip(
    ds: &Dataset,
    ranking: &Ranking,
    bins: usize,
    per_bin: usize,
    seed: u64,
) -> Result<Image, HarnessError> {
    let picks = stratified_sample(ranking, bins, per_bin, seed)?;
    let (w, h, c) = ds.shape().ok_or(AnalysisError::Empty)?;
    let (sw, sh) = (bins * (w + 1) - 1, per_bin * (h + 1) - 1);
    let mut buf = vec![255u8; sw * sh * c];
    for (col, ids) in picks.iter().enumerate() {
        for (row, &id) in ids.iter().enumerate() {
            let img = ds.get(id).ok_or(crate::data::DataError::UnknownId(id))?;
            let (x0, y0) = (col * (w + 1), row * (h + 1));
            for y in 0..h {
                let src = &img.pixels_q()[y * w * c..(y + 1) * w * c];
                let at = ((y0 + y) * sw + x0) * c;
                buf[at..at + w * c].copy_from_slice(src);
            }
        }
    }
    Ok(Image::from_q(sw, sh, c, buf)?)
}

fn seeds_of(cfg: &ExperimentConfig, purposes: &[&str]) -> BTreeMap<String, u64> {
    let mut seeds: BTreeMap<String, u64> = purposes.iter().map(|p| (p.to_string(), cfg.derived_seed(p))).collect();
    seeds.insert("global".into(), cfg.seed);
    seeds
}

fn manifest_for(cfg: &ExperimentConfig, operation: &str, regime: &str, seeds: BTreeMap<String, u64>) -> Manifest {
    let mut m = Manifest::new(operation, cfg.family.as_str(), regime);
    m.name = cfg.name.clone();
    m.config = cfg.echo();
    m.seeds = seeds;
    m
}

pub fn scores_file(epoch: usize) -> String {
    format!("scores_eval_e{epoch}.csv")
}

/// Everything a Base (or UT) run produced, in memory and on disk.
#[derive(Debug, Clone)]
pub struct BaseRun {
    pub artifacts: RunArtifacts,
    pub splits: Splits,
    pub model: Model,
    pub train_scores: ScoreTable,
    pub eval_scores: Vec<(usize, ScoreTable)>,
    pub ranking: Ranking,
    pub lowest_density_id: u64,
}

impl BaseRun {
    pub fn final_eval(&self) -> &ScoreTable {
        &self.eval_scores.last().expect("at least one checkpoint").1
    }
}

/// Trains on the full training split (no training under UT), scores the
/// evaluation split at every checkpoint and the training split at the end,
/// and emits ranking, rank strip, curve and checkpoint.
pub fn run_base(cfg: &ExperimentConfig) -> Result<BaseRun, HarnessError> {
    let splits = Splits::load(cfg)?;
    let mut dir = RunDir::create(&cfg.output)?;
    let seeds = seeds_of(cfg, &["data", "init", "train", "strip"]);
    let fit = fit_model(cfg, &splits.train, seeds["init"], seeds["train"])?;
    let regime = if cfg.effective_epochs() == 0 { Regime::Ut } else { Regime::Base };
    let mut manifest = manifest_for(cfg, "train", regime.as_str(), seeds.clone());

    dir.write("config.toml", cfg.echo().as_bytes())?;
    let mut eval_scores = Vec::new();
    for (epoch, model) in &fit.checkpoints {
        let table = score_model(model, &splits.eval)?;
        dir.write(&scores_file(*epoch), table.to_csv().as_bytes())?;
        eval_scores.push((*epoch, table));
    }
    let train_scores = score_model(&fit.model, &splits.train)?;
    dir.write("scores_train.csv", train_scores.to_csv().as_bytes())?;
    let ranking = rank_by_score(&eval_scores.last().expect("final checkpoint").1)?;
    dir.write_json("ranking_eval.json", &ranking.to_json())?;
    let strip = emit_rank_strip(&splits.eval, &ranking, cfg.strip.bins, cfg.strip.per_bin, seeds["strip"])?;
    dir.write("strip_eval.ppm", &encode_ppm(&strip))?;
    dir.write_json("curve.json", &fit.curve)?;
    dir.write("model.ckpt", &encode_checkpoint(&fit.model))?;

    let lowest = select_lowest_density(&train_scores, Selection::Count(1))?[0];
    manifest.lowest_density_id = Some(lowest);
    if let Some(d) = &fit.divergence {
        manifest
            .notes
            .push(format!("loss diverged in epoch {}; scored the epoch-{} model", d.epoch, d.kept_epoch));
    }
    manifest.divergence = fit.divergence.clone();
    manifest.notes.push(format!(
        "strip: {} bins x {} per bin",
        cfg.strip.bins, cfg.strip.per_bin
    ));
    let artifacts = dir.finish(manifest)?;
    Ok(BaseRun {
        artifacts,
        splits,
        model: fit.model,
        train_scores,
        eval_scores,
        ranking,
        lowest_density_id: lowest,
    })
}

/// The Base scores a retraining run is compared against.
#[derive(Debug, Clone)]
pub struct BaseScores {
    pub train: ScoreTable,
    pub eval_ranking: Ranking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointCorrelation {
    pub epoch: usize,
    /// Spearman with the Base ranking; `None` when undefined (all tied).
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdtReport {
    pub regime: Regime,
    pub subset_ids: Vec<u64>,
    pub checkpoints: Vec<CheckpointCorrelation>,
    /// The untrained model of the same family.
    pub ut_spearman: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LdtRun {
    pub artifacts: RunArtifacts,
    pub report: LdtReport,
}

fn defined(r: Result<f64, AnalysisError>) -> Result<Option<f64>, HarnessError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(AnalysisError::Undefined) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Retrains from a fresh initialization on the lowest-density training
/// subset and correlates each checkpoint's evaluation ranking with Base.
pub fn run_ldt(cfg: &ExperimentConfig, base: &BaseScores) -> Result<LdtRun, HarnessError> {
    let selection = match cfg.regime {
        Regime::Ldt10 => Selection::Fraction(cfg.ldt_fraction),
        Regime::Ldt1 => Selection::Count(1),
        other => {
            return Err(HarnessError::Config(format!(
                "retraining needs regime ldt10 or ldt1, got {}",
                other.as_str()
            )))
        }
    };
    let splits = Splits::load(cfg)?;
    let mut train_ids = splits.train.ids().to_vec();
    train_ids.sort_unstable();
    if base.train.ids() != train_ids {
        return Err(AnalysisError::IdMismatch.into());
    }
    let mut dir = RunDir::create(&cfg.output)?;
    let seeds = seeds_of(cfg, &["data", "ldt-init", "ldt-train"]);
    let subset_ids = select_lowest_density(&base.train, selection)?;
    let mut sorted = subset_ids.clone();
    sorted.sort_unstable();
    let subset = splits.train.subset(&sorted)?;

    let fit = fit_model(cfg, &subset, seeds["ldt-init"], seeds["ldt-train"])?;
    let mut manifest = manifest_for(cfg, "ldt", cfg.regime.as_str(), seeds.clone());
    dir.write("config.toml", cfg.echo().as_bytes())?;

    let ut_model = Init::new(cfg, splits.shape(), seeds["ldt-init"])?.model();
    let ut_table = score_model(&ut_model, &splits.eval)?;
    dir.write("scores_eval_ut.csv", ut_table.to_csv().as_bytes())?;
    let ut_spearman = defined(rank_by_score(&ut_table).and_then(|r| spearman(&r, &base.eval_ranking)))?;

    let mut checkpoints = Vec::new();
    for (epoch, model) in &fit.checkpoints {
        let table = score_model(model, &splits.eval)?;
        dir.write(&scores_file(*epoch), table.to_csv().as_bytes())?;
        let ranking = rank_by_score(&table)?;
        checkpoints.push(CheckpointCorrelation {
            epoch: *epoch,
            spearman: defined(spearman(&ranking, &base.eval_ranking))?,
        });
    }
    let report = LdtReport {
        regime: cfg.regime,
        subset_ids: subset_ids.clone(),
        checkpoints,
        ut_spearman,
    };
    dir.write_json("ldt.json", &report)?;
    dir.write_json("curve.json", &fit.curve)?;
    dir.write("model.ckpt", &encode_checkpoint(&fit.model))?;
    manifest.lowest_density_id = subset_ids.first().copied();
    manifest.divergence = fit.divergence.clone();
    manifest.notes.push(format!("retrained from a fresh initialization on {} images", subset_ids.len()));
    Ok(LdtRun {
        artifacts: dir.finish(manifest)?,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetSummary {
    pub label: String,
    pub mean_log_density: f64,
    pub pixel_variance: PixelVariance,
    /// Second-order prediction of `mean(this) - mean(complex eval)`.
    pub predicted_gap: f64,
    #[serde(skip)]
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbReport {
    pub noise_variance: f64,
    pub complex_eval: SetSummary,
    pub simple: SetSummary,
    pub simple_noisy: SetSummary,
    /// `|var(noisy simple) - var(simple)| / var(simple)`, pooled.
    pub relative_variance_change: f64,
    /// Clean simple above the complex eval mean and noisy simple below it.
    pub reversal: bool,
}

const HESSIAN_EPS: f64 = 1e-3;

/// The simple set and noise of a perturbation experiment, with the derived
/// seeds used to build them.
pub fn perturb_inputs(cfg: &ExperimentConfig) -> Result<(Dataset, NoiseSpec, [(&'static str, u64); 2]), HarnessError> {
    let simple_seed = cfg.derived_seed("simple");
    let noise_seed = cfg.derived_seed("noise") ^ cfg.perturb.noise_seed;
    let (_, simple) = cfg.perturb.simple.load(simple_seed)?;
    let spec = NoiseSpec::new(cfg.perturb.variance, noise_seed)?;
    Ok((simple, spec, [("simple", simple_seed), ("noise", noise_seed)]))
}

/// Scores the complex evaluation set, a simple set and its noisy copy under
/// a flow trained on the complex set; the second-order predictions expand
/// around the mean training image.
pub fn run_perturbation(
    flow: &CouplingFlow,
    train_a: &Dataset,
    eval_a: &Dataset,
    ds_b: &Dataset,
    spec: NoiseSpec,
) -> Result<PerturbReport, HarnessError> {
    let noisy = add_gaussian_noise(ds_b, spec);
    let (x0, _) = pixel_moments(train_a)?;
    let hess = log_density_hessian_diag(|x: &[f64]| flow_log_density(flow, x).map(|s| s.total), &x0, HESSIAN_EPS)?;
    let (_, var_a) = pixel_moments(eval_a)?;
    let scorer = FlowScorer::new(flow);
    let summarize = |label: &str, ds: &Dataset| -> Result<SetSummary, HarnessError> {
        let table = score_dataset(&scorer, ds)?;
        let (_, var) = pixel_moments(ds)?;
        Ok(SetSummary {
            label: label.into(),
            mean_log_density: table.mean_total().ok_or(AnalysisError::Empty)?,
            pixel_variance: pixel_variance(ds)?,
            predicted_gap: second_order_gap(&hess, &var, &var_a)?,
            scores: table.totals(),
        })
    };
    let a = summarize("complex_eval", eval_a)?;
    let b = summarize("simple", ds_b)?;
    let nb = summarize("simple_noisy", &noisy)?;
    let relative_variance_change = (nb.pixel_variance.pooled - b.pixel_variance.pooled).abs() / b.pixel_variance.pooled;
    let reversal = b.mean_log_density > a.mean_log_density && nb.mean_log_density < a.mean_log_density;
    Ok(PerturbReport {
        noise_variance: spec.variance(),
        complex_eval: a,
        simple: b,
        simple_noisy: nb,
        relative_variance_change,
        reversal,
    })
}

impl PerturbReport {
    pub fn histogram_svg(&self) -> String {
        svg::histograms(
            &[
                (&self.complex_eval.label, &self.complex_eval.scores),
                (&self.simple.label, &self.simple.scores),
                (&self.simple_noisy.label, &self.simple_noisy.scores),
            ],
            30,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub n: usize,
    pub rho_total_jacobian: Option<f64>,
    pub rho_total_latent: Option<f64>,
    pub rho_latent_jacobian: Option<f64>,
    pub std_latent: f64,
    pub std_jacobian: f64,
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Rank agreement of the flow likelihood with its two terms on `ds`.
pub fn run_dominance(flow: &CouplingFlow, ds: &Dataset) -> Result<DominanceReport, HarnessError> {
    dominance(&score_dataset(&FlowScorer::new(flow), ds)?)
}

/// [`run_dominance`] on an existing decomposed score table.
pub fn dominance(table: &ScoreTable) -> Result<DominanceReport, HarnessError> {
    let total = rank_by_score(table)?;
    let latent_t = table.term(Term::Latent);
    let jac_t = table.term(Term::Jacobian);
    if latent_t.len() != table.len() || jac_t.len() != table.len() {
        return Err(HarnessError::Config("score table lacks latent/jacobian terms".into()));
    }
    let latent = rank_by_score(&latent_t)?;
    let jac = rank_by_score(&jac_t)?;
    Ok(DominanceReport {
        n: table.len(),
        rho_total_jacobian: defined(spearman(&total, &jac))?,
        rho_total_latent: defined(spearman(&total, &latent))?,
        rho_latent_jacobian: defined(spearman(&latent, &jac))?,
        std_latent: std_dev(&latent_t.totals()),
        std_jacobian: std_dev(&jac_t.totals()),
    })
}

/// Appends the JPEG and gradient proxies of `eval` and, when a `flow`
/// table is present, the corrected `flow + jpeg` score.
pub fn with_proxies(
    mut tables: Vec<(String, ScoreTable)>,
    eval: &Dataset,
) -> Result<Vec<(String, ScoreTable)>, HarnessError> {
    let jpeg = complexity_table(eval, ProxyTag::Jpeg)?;
    let grad = complexity_table(eval, ProxyTag::Gradient)?;
    let corrected = match tables.iter().find(|(l, _)| l == "flow") {
        Some((_, flow)) => Some(flow.corrected_with(&jpeg)?),
        None => None,
    };
    tables.push(("jpeg".into(), jpeg));
    tables.push(("gradient".into(), grad));
    if let Some(c) = corrected {
        tables.push(("flow+jpeg".into(), c));
    }
    Ok(tables)
}

/// One correlation matrix per statistic over the labeled tables.
pub fn run_proxy_matrix(tables: &[(String, ScoreTable)], stats: &[Stat]) -> Result<Vec<CorrelationMatrix>, HarnessError> {
    let rankings = tables
        .iter()
        .map(|(l, t)| Ok((l.clone(), rank_by_score(t)?)))
        .collect::<Result<Vec<_>, AnalysisError>>()?;
    stats
        .iter()
        .map(|&s| Ok(correlation_matrix(&rankings, s)?))
        .collect()
}

/// Persists matrices as `matrix_<stat>.json` and `.svg`.
pub fn write_matrices(dir: &mut RunDir, matrices: &[CorrelationMatrix]) -> Result<(), HarnessError> {
    for m in matrices {
        dir.write_json(&format!("matrix_{}.json", m.stat), m)?;
        dir.write(&format!("matrix_{}.svg", m.stat), svg::correlation_heatmap(m).as_bytes())?;
    }
    Ok(())
}

/// Flow of `fit`, or a family error.
pub fn expect_flow(model: &Model) -> Result<&CouplingFlow, HarnessError> {
    match model {
        Model::Flow(f) => Ok(f),
        _ => Err(HarnessError::Family("flow")),
    }
}
