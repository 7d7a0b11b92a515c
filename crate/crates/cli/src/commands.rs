//! Subcommand bodies. Each stage reads its inputs from the output directory
//! and writes its own artifacts there, so stages can be re-run in isolation.

use std::path::{Path, PathBuf};

use bood_core::boundary::DistanceTable;
use bood_core::latent::{EncoderModel, LatentFeature};
use bood_core::par::Exec;
use bood_core::synthesis::{export_features, synthesize_batch, SynthesisConfig};
use bood_core::Error;
use thiserror::Error as ThisError;

use crate::config::{ConfigError, RunConfig};
use crate::manifest::RunManifest;
use crate::pipeline::{
    at, build_anchors, detector_view, evaluate, gen_data, load_data, load_detector, load_encoder, load_matrix_csv,
    load_selected, outlier_inputs, read_json, read_outliers, run_pipeline, save_data, save_detector, save_encoder,
    save_eval, save_matrix_csv, save_selected, select_features, train_detector, train_encoder, write_json, DataBundle,
    EvalOutput, Layout, RunArtifacts, StageError, SynthesisFile,
};
use crate::plot::{latent2d_svg, score_hist_svg, LatentScene, PlotError, Projection};
use crate::sweep::{run_sweep, sweep_svg, write_sweep_csv, SweepParam, SweepRow, SweepSpec};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error("plot failed: {0}")]
    Plot(#[from] PlotError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Stage(e) if e.is_io() => EXIT_IO,
            CliError::Stage(StageError { source: Error::Config(_), .. }) => EXIT_CONFIG,
            CliError::Stage(_) | CliError::Plot(_) => EXIT_STAGE,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Resolved configuration plus where and how to run.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: RunConfig,
    pub layout: Layout,
    pub exec: Exec,
}

impl Context {
    pub fn new(cfg: RunConfig, exec: Exec) -> Self {
        let layout = Layout::new(cfg.output_dir.clone());
        Context { cfg, layout, exec }
    }

    fn ensure(&self, stage: &'static str) -> CliResult<()> {
        Ok(at(stage, self.layout.ensure())?)
    }
}

pub fn cmd_gen_data(ctx: &Context) -> CliResult<DataBundle> {
    ctx.ensure("gen-data")?;
    let data = at("gen-data", gen_data(&ctx.cfg))?;
    at("gen-data", save_data(&ctx.layout, &data))?;
    Ok(data)
}

pub fn cmd_train_encoder(ctx: &Context) -> CliResult<EncoderModel> {
    const S: &str = "train-encoder";
    let data = at(S, load_data(&ctx.layout))?;
    let anchors = at("anchors", build_anchors(&ctx.cfg, &data.train.class_names))?;
    let (model, history) = at(S, train_encoder(&ctx.cfg, &data.train, anchors))?;
    at(S, save_encoder(&ctx.layout, &model))?;
    at(S, write_json(&ctx.layout.encoder_history(), &history))?;
    Ok(model)
}

fn training_features(ctx: &Context, stage: &'static str) -> CliResult<(DataBundle, EncoderModel, Vec<LatentFeature>)> {
    let data = at(stage, load_data(&ctx.layout))?;
    let encoder = at(stage, load_encoder(&ctx.layout, &ctx.cfg))?;
    let features = at(stage, encoder.encode(&data.train.x, &data.train.labels))?;
    Ok((data, encoder, features))
}

pub fn cmd_distances(ctx: &Context) -> CliResult<DistanceTable> {
    const S: &str = "distances";
    let (_, encoder, features) = training_features(ctx, S)?;
    let table = at(S, DistanceTable::build(&encoder.classifier, &features, &ctx.cfg.boundary, ctx.exec))?;
    at(S, table.save_csv(&ctx.layout.distances()))?;
    Ok(table)
}

pub fn cmd_select(ctx: &Context) -> CliResult<Vec<LatentFeature>> {
    const S: &str = "select";
    let (_, _, features) = training_features(ctx, S)?;
    let table = at(S, DistanceTable::read_csv(&ctx.layout.distances(), ctx.cfg.boundary.max_steps))?;
    let selected = at(S, select_features(&ctx.cfg, &table, &features))?;
    at(S, save_selected(&ctx.layout.selected(), &selected))?;
    Ok(selected)
}

fn selected_features(ctx: &Context, stage: &'static str) -> CliResult<(DataBundle, EncoderModel, Vec<LatentFeature>)> {
    let (data, encoder, features) = training_features(ctx, stage)?;
    let picks = at(stage, load_selected(&ctx.layout.selected()))?;
    let selected = picks
        .into_iter()
        .map(|i| {
            features.get(i).cloned().ok_or_else(|| StageError {
                stage,
                source: Error::Format(format!("selected index {i} out of range")),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((data, encoder, selected))
}

pub fn cmd_synthesize(ctx: &Context) -> CliResult<SynthesisFile> {
    const S: &str = "synthesize";
    let (_, encoder, selected) = selected_features(ctx, S)?;
    let batch = at(S, synthesize_batch(&encoder.classifier, &selected, &ctx.cfg.synthesis(), ctx.exec))?;
    at(S, export_features(&batch.outliers, &ctx.layout.outliers()))?;
    let summary = SynthesisFile::from(&batch);
    at(S, write_json(&ctx.layout.synthesis_summary(), &summary))?;
    Ok(summary)
}

pub fn cmd_decode(ctx: &Context) -> CliResult<usize> {
    const S: &str = "decode";
    let data = at(S, load_data(&ctx.layout))?;
    let encoder = at(S, load_encoder(&ctx.layout, &ctx.cfg))?;
    let zs: Vec<Vec<f64>> = at(S, read_outliers(&ctx.layout.outliers()))?.into_iter().map(|r| r.z).collect();
    let x = at(S, outlier_inputs(&ctx.cfg, &encoder, &data.train, &zs))?;
    at(S, save_matrix_csv(&ctx.layout.outlier_inputs(), &x))?;
    Ok(x.rows())
}

pub fn cmd_train_detector(ctx: &Context) -> CliResult<()> {
    const S: &str = "train-detector";
    let data = at(S, load_data(&ctx.layout))?;
    let encoder = at(S, load_encoder(&ctx.layout, &ctx.cfg))?;
    let id_x = at(S, detector_view(&ctx.cfg, &encoder, &data.train.x))?;
    let ood_x = at(S, load_matrix_csv(&ctx.layout.outlier_inputs(), id_x.cols()))?;
    let (model, history) = at(S, train_detector(&ctx.cfg, &id_x, &data.train.labels, data.train.num_classes(), &ood_x))?;
    at(S, save_detector(&ctx.layout, &model))?;
    at(S, write_json(&ctx.layout.detector_history(), &history))?;
    Ok(())
}

pub fn cmd_eval(ctx: &Context) -> CliResult<EvalOutput> {
    const S: &str = "eval";
    let data = at(S, load_data(&ctx.layout))?;
    let encoder = at(S, load_encoder(&ctx.layout, &ctx.cfg))?;
    let detector = at(S, load_detector(&ctx.layout, &ctx.cfg))?;
    let id_x = at(S, detector_view(&ctx.cfg, &encoder, &data.test.x))?;
    let ood = data
        .ood
        .iter()
        .map(|(n, d)| detector_view(&ctx.cfg, &encoder, &d.x).map(|x| (n.clone(), x)))
        .collect::<bood_core::Result<Vec<_>>>();
    let ood = at(S, ood)?;
    let out = at(S, evaluate(&ctx.cfg, &detector, &id_x, &data.test.labels, &ood, ctx.exec))?;
    at(S, save_eval(&ctx.layout, &out))?;
    Ok(out)
}

/// Full pipeline, manifest and default plots.
pub fn cmd_run_all(ctx: &Context) -> CliResult<(RunManifest, RunArtifacts)> {
    let run = run_pipeline(&ctx.cfg, ctx.exec, Some(&ctx.layout))?;
    let manifest = RunManifest::from_run(&ctx.cfg, &run, ctx.exec == Exec::Parallel);
    at("manifest", manifest.save(&ctx.layout.manifest()))?;
    write_run_plots(ctx, &run)?;
    Ok((manifest, run))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Latent scatter inputs: PCA of the training features (or the raw
/// coordinates when they are already 2D), boundary features and trajectories.
pub fn latent_scene(
    encoder: &EncoderModel,
    features: &[LatentFeature],
    selected: &[LatentFeature],
    synthesis: &SynthesisConfig,
    class_names: &[String],
    exec: Exec,
) -> CliResult<(LatentScene, Projection)> {
    let rows: Vec<Vec<f64>> = features.iter().map(|f| f.z.clone()).collect();
    let proj = if rows.first().is_some_and(|r| r.len() == 2) { Projection::identity2() } else { Projection::pca(&rows)? };
    let traced = SynthesisConfig { keep_trajectory: true, per_origin_count: 1, ..synthesis.clone() };
    let batch = at("plot", synthesize_batch(&encoder.classifier, selected, &traced, exec))?;
    let project_all = |zs: &[Vec<f64>]| zs.iter().map(|z| proj.project(z)).collect::<Result<Vec<_>, _>>();
    let scene = LatentScene {
        class_names: class_names.to_vec(),
        points: features
            .iter()
            .map(|f| proj.project(&f.z).map(|(x, y)| (x, y, f.label)))
            .collect::<Result<_, _>>()?,
        boundary: project_all(&selected.iter().map(|f| f.z.clone()).collect::<Vec<_>>())?,
        trajectories: batch
            .outliers
            .iter()
            .filter_map(|o| o.trajectory.as_deref())
            .map(project_all)
            .collect::<Result<_, _>>()?,
    };
    Ok((scene, proj))
}

fn score_hist_inputs(scores: &[crate::pipeline::ScoredSet]) -> (Vec<f64>, Vec<(String, Vec<f64>)>) {
    let id = scores.first().map(|s| s.scores.clone()).unwrap_or_default();
    let ood = scores.iter().skip(1).map(|s| (s.name.clone(), s.scores.clone())).collect();
    (id, ood)
}

pub const HIST_BINS: usize = 40;

fn write_run_plots(ctx: &Context, run: &RunArtifacts) -> CliResult<()> {
    let (scene, proj) = latent_scene(
        &run.encoder,
        &run.features,
        &run.selected,
        &ctx.cfg.synthesis(),
        &run.data.train.class_names,
        ctx.exec,
    )?;
    at("plot", write_json(&ctx.layout.path("projection.json"), &proj))?;
    write_text(&ctx.layout.path("latent2d.svg"), &latent2d_svg(&scene)?)?;
    let (id, ood) = score_hist_inputs(&run.eval.scores);
    write_text(&ctx.layout.path("score_hist.svg"), &score_hist_svg(&id, &ood, HIST_BINS)?)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    Latent2d,
    ScoreHist,
    SweepLine,
}

/// Renders a plot from artifacts already in the output directory.
pub fn cmd_plot(ctx: &Context, kind: PlotKind, input: Option<&Path>, output: Option<&Path>) -> CliResult<PathBuf> {
    let (svg, default_name) = match kind {
        PlotKind::Latent2d => {
            let (data, encoder, selected) = selected_features(ctx, "plot")?;
            let features = at("plot", encoder.encode(&data.train.x, &data.train.labels))?;
            let (scene, proj) =
                latent_scene(&encoder, &features, &selected, &ctx.cfg.synthesis(), &data.train.class_names, ctx.exec)?;
            at("plot", write_json(&ctx.layout.path("projection.json"), &proj))?;
            (latent2d_svg(&scene)?, "latent2d.svg".to_string())
        }
        PlotKind::ScoreHist => {
            let path = input.map(Path::to_path_buf).unwrap_or_else(|| ctx.layout.scores());
            let scores = at("plot", read_scores(&path))?;
            let (id, ood) = score_hist_inputs(&scores);
            (score_hist_svg(&id, &ood, HIST_BINS)?, "score_hist.svg".to_string())
        }
        PlotKind::SweepLine => {
            let path = input.ok_or_else(|| ConfigError::Invalid("sweep_line needs --input <sweep json>".into()))?;
            let (param, rows): (SweepParam, Vec<SweepRow>) = at("plot", read_json(path))?;
            (sweep_svg(param, &rows)?, format!("sweep_{}.svg", param.name()))
        }
    };
    let out = output.map(Path::to_path_buf).unwrap_or_else(|| ctx.layout.path(&default_name));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_text(&out, &svg)?;
    Ok(out)
}

/// Reads a `sample_id,split,score` file back into per-set score lists.
pub fn read_scores(path: &Path) -> bood_core::Result<Vec<crate::pipeline::ScoredSet>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut sets: Vec<crate::pipeline::ScoredSet> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| Error::Parse { line: i + 2, message: m.to_string() };
        let id = rec.get(0).ok_or_else(|| bad("missing sample_id"))?;
        let (set, _) = id.rsplit_once(':').ok_or_else(|| bad("sample_id is not set:row"))?;
        let score: f64 = rec.get(2).and_then(|s| s.trim().parse().ok()).ok_or_else(|| bad("bad score"))?;
        match sets.last_mut() {
            Some(s) if s.name == set => s.scores.push(score),
            _ => sets.push(crate::pipeline::ScoredSet { name: set.to_string(), scores: vec![score] }),
        }
    }
    Ok(sets)
}

pub fn cmd_sweep(ctx: &Context, param: SweepParam, values: Vec<f64>) -> CliResult<Vec<SweepRow>> {
    let spec = SweepSpec { param, values, base: ctx.cfg.clone() };
    let rows = run_sweep(&spec, ctx.exec)?;
    ctx.ensure("sweep")?;
    let stem = format!("sweep_{}", param.name());
    at("sweep", write_sweep_csv(&ctx.layout.path(&format!("{stem}.csv")), param, &rows))?;
    at("sweep", write_json(&ctx.layout.path(&format!("{stem}.json")), &(param, &rows)))?;
    if rows.iter().any(|r| r.error.is_none()) {
        write_text(&ctx.layout.path(&format!("{stem}.svg")), &sweep_svg(param, &rows)?)?;
    }
    Ok(rows)
}
