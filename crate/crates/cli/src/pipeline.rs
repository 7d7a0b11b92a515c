//! The pipeline stages as plain functions over in-memory artifacts, plus the
//! on-disk layout the CLI subcommands read and write between runs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use bood_core::boundary::{select_boundary, DistanceTable};
use bood_core::data::{
    gen_gaussian_mixture, gen_ood_testset, load_embeddings_csv, load_embeddings_csv_with_classes, DataKind, Dataset,
    GeneratorRecord, OodShift, Split, ToyDecoder,
};
use bood_core::detector::{DetectorEpoch, DetectorMode, DetectorModel, EnergyHead};
use bood_core::eval::{baseline_scores, evaluate_scores, id_accuracy, BaselineKind, MetricsReport};
use bood_core::latent::{AnchorSet, CosineClassifier, EncoderModel, EpochStats, LatentFeature};
use bood_core::nn::{checkpoint, Activation, Matrix, Mlp};
use bood_core::par::Exec;
use bood_core::rng::seeded;
use bood_core::synthesis::{export_features, read_feature_file, FeatureRecord, SynthesisBatch, SynthesisFailure};
use bood_core::Error;
use serde::{Deserialize, Serialize};
use thiserror::Error as ThisError;

use crate::config::{AnchorMode, RunConfig};

pub const STAGES: [&str; 9] = [
    "gen-data",
    "anchors",
    "train-encoder",
    "distances",
    "select",
    "synthesize",
    "decode",
    "train-detector",
    "eval",
];

#[derive(Debug, ThisError)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

impl StageError {
    pub fn is_io(&self) -> bool {
        self.source.is_io()
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

pub(crate) fn at<T>(stage: &'static str, r: bood_core::Result<T>) -> StageResult<T> {
    r.map_err(|source| StageError { stage, source })
}

/// ID splits, named OOD test sets and (for synthetic data) the generator record.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBundle {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Vec<(String, Dataset)>,
    pub record: Option<GeneratorRecord>,
}

pub fn gen_data(cfg: &RunConfig) -> bood_core::Result<DataBundle> {
    let spec = cfg.dataset_spec();
    spec.validate()?;
    if spec.kind == DataKind::FromCsv {
        let train = load_embeddings_csv(spec.train_csv.as_deref().expect("validated"), Split::Train)?;
        let test = load_embeddings_csv_with_classes(
            spec.test_csv.as_deref().expect("validated"),
            Split::IdTest,
            &train.class_names,
        )?;
        let mut ood = Vec::new();
        for p in &spec.ood_csv {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ood".into());
            ood.push((name, load_embeddings_csv(p, Split::OodTest)?));
        }
        return Ok(DataBundle { train, test, ood, record: None });
    }
    let (train, test, record) = gen_gaussian_mixture(&spec)?;
    let ood = OodShift::ALL
        .iter()
        .map(|&s| gen_ood_testset(&spec, s).map(|d| (s.name().to_string(), d)))
        .collect::<bood_core::Result<Vec<_>>>()?;
    Ok(DataBundle { train, test, ood, record: Some(record) })
}

pub fn build_anchors(cfg: &RunConfig, class_names: &[String]) -> bood_core::Result<AnchorSet> {
    match cfg.anchors.mode {
        AnchorMode::RandomOrthonormal => AnchorSet::random_orthonormal(
            class_names.to_vec(),
            cfg.encoder.latent_dim,
            &mut seeded(cfg.stage_seed("anchors")),
        ),
        AnchorMode::FromFile => {
            let a = AnchorSet::from_csv(cfg.anchors.path.as_deref().expect("validated"))?;
            if a.names() != class_names {
                return Err(Error::Config(format!(
                    "anchor classes {:?} do not match data classes {:?}",
                    a.names(),
                    class_names
                )));
            }
            if a.dim() != cfg.encoder.latent_dim {
                return Err(Error::dim("anchor dimension", cfg.encoder.latent_dim, a.dim()));
            }
            Ok(a)
        }
    }
}

pub fn train_encoder(
    cfg: &RunConfig,
    train: &Dataset,
    anchors: AnchorSet,
) -> bood_core::Result<(EncoderModel, Vec<EpochStats>)> {
    let spec = cfg.encoder_spec(train.dim())?;
    let mlp = Mlp::init(spec, &mut seeded(cfg.stage_seed("encoder/init")))?;
    let mut model = EncoderModel::new(mlp, CosineClassifier::new(anchors, cfg.encoder.temperature)?)?;
    let history = model.train(&train.x, &train.labels, &cfg.encoder_train())?;
    Ok((model, history))
}

/// Selected features, in selection order. Features the encoder already
/// misclassifies (k = 0) sit on the wrong side of their boundary and are not
/// candidates.
pub fn select_features(
    cfg: &RunConfig,
    table: &DistanceTable,
    features: &[LatentFeature],
) -> bood_core::Result<Vec<LatentFeature>> {
    let candidates = DistanceTable {
        max_steps: table.max_steps,
        records: table.records.iter().filter(|r| r.steps != Some(0)).cloned().collect(),
    };
    if candidates.records.is_empty() {
        return Err(Error::NoBoundaryFeatures);
    }
    let picks = select_boundary(&candidates, cfg.boundary.select_percent)?;
    picks
        .into_iter()
        .map(|i| {
            let src = candidates.records[i].source_index;
            features
                .iter()
                .find(|f| f.source_index == src)
                .cloned()
                .ok_or_else(|| Error::Format(format!("selected source index {src} has no feature")))
        })
        .collect()
}

/// Detector-side inputs for the synthesized outliers: decoded through a
/// least-squares linear map fitted on (encoder feature, input) pairs, or the
/// raw latent features.
pub fn outlier_inputs(
    cfg: &RunConfig,
    encoder: &EncoderModel,
    train: &Dataset,
    outliers: &[Vec<f64>],
) -> bood_core::Result<Matrix> {
    match cfg.detector.mode {
        DetectorMode::Latent => {
            if outliers.is_empty() {
                Ok(Matrix::zeros(0, encoder.mlp.output_width()))
            } else {
                Matrix::from_rows(outliers)
            }
        }
        DetectorMode::Decoded => {
            let feats = encoder.mlp.forward(&train.x)?;
            let decoder = ToyDecoder::fit(&feats, &train.x, cfg.detector.decoder_ridge)?;
            if outliers.is_empty() {
                Ok(Matrix::zeros(0, train.dim()))
            } else {
                decoder.decode_batch(outliers)
            }
        }
    }
}

/// Maps raw inputs into the detector's input space.
pub fn detector_view(cfg: &RunConfig, encoder: &EncoderModel, x: &Matrix) -> bood_core::Result<Matrix> {
    match cfg.detector.mode {
        DetectorMode::Decoded => Ok(x.clone()),
        DetectorMode::Latent => encoder.mlp.forward(x),
    }
}

pub fn train_detector(
    cfg: &RunConfig,
    id_x: &Matrix,
    id_y: &[usize],
    classes: usize,
    ood_x: &Matrix,
) -> bood_core::Result<(DetectorModel, Vec<DetectorEpoch>)> {
    let spec = cfg.detector_spec(id_x.cols(), classes)?;
    let mut model = DetectorModel::init(
        spec,
        cfg.detector.head_hidden,
        cfg.detector.mode,
        &mut seeded(cfg.stage_seed("detector/init")),
    )?;
    let history = model.train(id_x, id_y, ood_x, &cfg.detector_train())?;
    Ok((model, history))
}

/// Per-sample scores of one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub name: String,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub detector: MetricsReport,
    pub msp: MetricsReport,
    pub energy: MetricsReport,
    /// Detector scores; the first entry is the ID test set.
    pub scores: Vec<ScoredSet>,
}

pub const SCORE_CHUNK: usize = 256;

/// Scores the ID test set and every OOD set with the detector and with the
/// MSP and energy baselines computed from the same backbone's logits.
pub fn evaluate(
    cfg: &RunConfig,
    detector: &DetectorModel,
    id_x: &Matrix,
    id_y: &[usize],
    ood: &[(String, Matrix)],
    exec: Exec,
) -> bood_core::Result<EvalOutput> {
    let tpr = cfg.eval.tpr_target;
    let id_logits = detector.logits(id_x)?;
    let acc = id_accuracy(&id_logits, id_y)?;
    let id_scores = detector.ood_scores_chunked(id_x, SCORE_CHUNK, exec)?;
    let mut det_sets = Vec::new();
    let mut base_sets: [Vec<(String, Vec<f64>)>; 2] = [Vec::new(), Vec::new()];
    for (name, x) in ood {
        det_sets.push((name.clone(), detector.ood_scores_chunked(x, SCORE_CHUNK, exec)?));
        let logits = detector.logits(x)?;
        for (slot, kind) in [BaselineKind::Msp, BaselineKind::Energy].into_iter().enumerate() {
            base_sets[slot].push((name.clone(), baseline_scores(kind, &logits)));
        }
    }
    let msp_id = baseline_scores(BaselineKind::Msp, &id_logits);
    let energy_id = baseline_scores(BaselineKind::Energy, &id_logits);
    let detector_report = evaluate_scores(&id_scores, &det_sets, acc, tpr)?;
    let [msp_sets, energy_sets] = base_sets;
    let mut scores = vec![ScoredSet { name: "id_test".into(), scores: id_scores }];
    scores.extend(det_sets.into_iter().map(|(name, scores)| ScoredSet { name, scores }));
    Ok(EvalOutput {
        detector: detector_report,
        msp: evaluate_scores(&msp_id, &msp_sets, acc, tpr)?,
        energy: evaluate_scores(&energy_id, &energy_sets, acc, tpr)?,
        scores,
    })
}

/// File names inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Layout { dir: dir.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn train_csv(&self) -> PathBuf {
        self.path("train.csv")
    }
    pub fn test_csv(&self) -> PathBuf {
        self.path("id_test.csv")
    }
    pub fn ood_csv(&self, name: &str) -> PathBuf {
        self.path(&format!("ood_{name}.csv"))
    }
    pub fn ood_index(&self) -> PathBuf {
        self.path("ood_sets.json")
    }
    pub fn generator(&self) -> PathBuf {
        self.path("generator.json")
    }
    pub fn anchors(&self) -> PathBuf {
        self.path("anchors.csv")
    }
    pub fn encoder(&self) -> PathBuf {
        self.path("encoder.ckpt")
    }
    pub fn encoder_history(&self) -> PathBuf {
        self.path("encoder_history.json")
    }
    pub fn distances(&self) -> PathBuf {
        self.path("distances.csv")
    }
    pub fn selected(&self) -> PathBuf {
        self.path("selected.csv")
    }
    pub fn outliers(&self) -> PathBuf {
        self.path("outliers.bin")
    }
    pub fn synthesis_summary(&self) -> PathBuf {
        self.path("synthesis.json")
    }
    pub fn outlier_inputs(&self) -> PathBuf {
        self.path("outlier_inputs.csv")
    }
    pub fn backbone(&self) -> PathBuf {
        self.path("detector_backbone.ckpt")
    }
    pub fn head(&self) -> PathBuf {
        self.path("detector_head.ckpt")
    }
    pub fn detector_history(&self) -> PathBuf {
        self.path("detector_history.json")
    }
    pub fn scores(&self) -> PathBuf {
        self.path("scores.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.path("metrics.json")
    }
    pub fn baselines(&self) -> PathBuf {
        self.path("baselines.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.path("manifest.json")
    }

    pub fn ensure(&self) -> bood_core::Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        Ok(())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> bood_core::Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> bood_core::Result<T> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    Ok(serde_json::from_reader(f)?)
}

pub fn save_data(layout: &Layout, data: &DataBundle) -> bood_core::Result<()> {
    data.train.write_csv(&layout.train_csv())?;
    data.test.write_csv(&layout.test_csv())?;
    let names: Vec<&str> = data.ood.iter().map(|(n, _)| n.as_str()).collect();
    for (name, set) in &data.ood {
        set.write_csv(&layout.ood_csv(name))?;
    }
    write_json(&layout.ood_index(), &names)?;
    if let Some(rec) = &data.record {
        rec.save_json(&layout.generator())?;
    }
    Ok(())
}

pub fn load_data(layout: &Layout) -> bood_core::Result<DataBundle> {
    let train = load_embeddings_csv(&layout.train_csv(), Split::Train)?;
    let test = load_embeddings_csv_with_classes(&layout.test_csv(), Split::IdTest, &train.class_names)?;
    let names: Vec<String> = read_json(&layout.ood_index())?;
    let mut ood = Vec::new();
    for name in names {
        let set = load_embeddings_csv(&layout.ood_csv(&name), Split::OodTest)?;
        ood.push((name, set));
    }
    let record = if layout.generator().exists() { Some(read_json(&layout.generator())?) } else { None };
    Ok(DataBundle { train, test, ood, record })
}

pub fn save_encoder(layout: &Layout, model: &EncoderModel) -> bood_core::Result<()> {
    model.classifier.anchors.write_csv(&layout.anchors())?;
    checkpoint::save(&model.mlp, &layout.encoder())
}

pub fn load_encoder(layout: &Layout, cfg: &RunConfig) -> bood_core::Result<EncoderModel> {
    let anchors = AnchorSet::from_csv(&layout.anchors())?;
    let mlp = checkpoint::load(&layout.encoder(), cfg.encoder.activation)?;
    EncoderModel::new(mlp, CosineClassifier::new(anchors, cfg.encoder.temperature)?)
}

pub fn save_detector(layout: &Layout, model: &DetectorModel) -> bood_core::Result<()> {
    checkpoint::save(&model.backbone, &layout.backbone())?;
    checkpoint::save(&model.head.0, &layout.head())
}

pub fn load_detector(layout: &Layout, cfg: &RunConfig) -> bood_core::Result<DetectorModel> {
    Ok(DetectorModel {
        backbone: checkpoint::load(&layout.backbone(), cfg.detector.activation)?,
        head: EnergyHead::new(checkpoint::load(&layout.head(), Activation::Tanh)?)?,
        mode: cfg.detector.mode,
    })
}

pub fn save_selected(path: &Path, selected: &[LatentFeature]) -> bood_core::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source_index", "label"])?;
    for f in selected {
        w.write_record([f.source_index.to_string(), f.label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Source indices of a selection file.
pub fn load_selected(path: &Path) -> bood_core::Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let idx = rec.get(0).and_then(|s| s.trim().parse().ok()).ok_or_else(|| Error::Parse {
            line: i + 2,
            message: "bad source_index".into(),
        })?;
        out.push(idx);
    }
    Ok(out)
}

pub fn save_matrix_csv(path: &Path, m: &Matrix) -> bood_core::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for row in m.iter_rows() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_matrix_csv(path: &Path, cols: usize) -> bood_core::Result<Matrix> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(Error::Parse { line: i + 1, message: format!("expected {cols} values, got {}", rec.len()) });
        }
        for v in rec.iter() {
            data.push(v.trim().parse::<f64>().map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
        }
        rows += 1;
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn read_outliers(path: &Path) -> bood_core::Result<Vec<FeatureRecord>> {
    read_feature_file(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// `sample_id,split,score` rows; sample ids are `set:row`.
pub fn save_scores(path: &Path, scores: &[ScoredSet]) -> bood_core::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sample_id", "split", "score"])?;
    for (i, set) in scores.iter().enumerate() {
        let split = if i == 0 { "id_test" } else { "ood_test" };
        for (j, s) in set.scores.iter().enumerate() {
            w.write_record([format!("{}:{j}", set.name), split.to_string(), format!("{s:?}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Everything a full run produces in memory.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub data: DataBundle,
    pub encoder: EncoderModel,
    pub encoder_history: Vec<EpochStats>,
    pub features: Vec<LatentFeature>,
    pub distances: DistanceTable,
    pub selected: Vec<LatentFeature>,
    pub synthesis: SynthesisBatch,
    pub outlier_inputs: Matrix,
    pub detector: DetectorModel,
    pub detector_history: Vec<DetectorEpoch>,
    pub eval: EvalOutput,
    pub stage_seconds: Vec<(String, f64)>,
}

struct Timer(Vec<(String, f64)>);

impl Timer {
    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> bood_core::Result<T>) -> StageResult<T> {
        let t = Instant::now();
        let out = at(stage, f());
        self.0.push((stage.to_string(), t.elapsed().as_secs_f64()));
        out
    }
}

/// Runs every stage in memory. With a layout, each stage's artifacts are
/// written as soon as it finishes, so a failing run leaves the completed
/// stages on disk.
pub fn run_pipeline(cfg: &RunConfig, exec: Exec, sink: Option<&Layout>) -> StageResult<RunArtifacts> {
    at("config", cfg.validate().map_err(|e| Error::Config(e.to_string())))?;
    if let Some(l) = sink {
        at("config", l.ensure())?;
    }
    let persist = |stage: &'static str, f: &dyn Fn(&Layout) -> bood_core::Result<()>| match sink {
        Some(l) => at(stage, f(l)),
        None => Ok(()),
    };
    let mut timer = Timer(Vec::new());
    let data = timer.time("gen-data", || gen_data(cfg))?;
    persist("gen-data", &|l| save_data(l, &data))?;
    let anchors = timer.time("anchors", || build_anchors(cfg, &data.train.class_names))?;
    persist("anchors", &|l| anchors.write_csv(&l.anchors()))?;
    let (encoder, encoder_history) = timer.time("train-encoder", || train_encoder(cfg, &data.train, anchors))?;
    persist("train-encoder", &|l| {
        save_encoder(l, &encoder)?;
        write_json(&l.encoder_history(), &encoder_history)
    })?;
    let (features, distances) = timer.time("distances", || {
        let features = encoder.encode(&data.train.x, &data.train.labels)?;
        let table = DistanceTable::build(&encoder.classifier, &features, &cfg.boundary, exec)?;
        Ok((features, table))
    })?;
    persist("distances", &|l| distances.save_csv(&l.distances()))?;
    let selected = timer.time("select", || select_features(cfg, &distances, &features))?;
    persist("select", &|l| save_selected(&l.selected(), &selected))?;
    let synthesis = timer.time("synthesize", || {
        bood_core::synthesis::synthesize_batch(&encoder.classifier, &selected, &cfg.synthesis(), exec)
    })?;
    persist("synthesize", &|l| {
        export_features(&synthesis.outliers, &l.outliers())?;
        write_json(&l.synthesis_summary(), &SynthesisFile::from(&synthesis))
    })?;
    let outlier_inputs = timer.time("decode", || {
        let zs: Vec<Vec<f64>> = synthesis.outliers.iter().map(|o| o.z_ood.clone()).collect();
        outlier_inputs(cfg, &encoder, &data.train, &zs)
    })?;
    persist("decode", &|l| save_matrix_csv(&l.outlier_inputs(), &outlier_inputs))?;
    let (detector, detector_history) = timer.time("train-detector", || {
        let id_x = detector_view(cfg, &encoder, &data.train.x)?;
        train_detector(cfg, &id_x, &data.train.labels, data.train.num_classes(), &outlier_inputs)
    })?;
    persist("train-detector", &|l| {
        save_detector(l, &detector)?;
        write_json(&l.detector_history(), &detector_history)
    })?;
    let eval = timer.time("eval", || {
        let id_x = detector_view(cfg, &encoder, &data.test.x)?;
        let ood = data
            .ood
            .iter()
            .map(|(n, d)| detector_view(cfg, &encoder, &d.x).map(|x| (n.clone(), x)))
            .collect::<bood_core::Result<Vec<_>>>()?;
        evaluate(cfg, &detector, &id_x, &data.test.labels, &ood, exec)
    })?;
    persist("eval", &|l| save_eval(l, &eval))?;
    Ok(RunArtifacts {
        data,
        encoder,
        encoder_history,
        features,
        distances,
        selected,
        synthesis,
        outlier_inputs,
        detector,
        detector_history,
        eval,
        stage_seconds: timer.0,
    })
}

pub fn save_eval(layout: &Layout, eval: &EvalOutput) -> bood_core::Result<()> {
    save_scores(&layout.scores(), &eval.scores)?;
    write_json(&layout.metrics(), &eval.detector)?;
    write_json(&layout.baselines(), &Baselines { msp: eval.msp.clone(), energy: eval.energy.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub msp: MetricsReport,
    pub energy: MetricsReport,
}

/// Batch-level synthesis bookkeeping kept next to the feature file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisFile {
    pub outliers: usize,
    pub flipped_back: usize,
    pub failures: Vec<SynthesisFailure>,
}

impl From<&SynthesisBatch> for SynthesisFile {
    fn from(b: &SynthesisBatch) -> Self {
        SynthesisFile {
            outliers: b.outliers.len(),
            flipped_back: b.flipped_back,
            failures: b.failures.clone(),
        }
    }
}
