use std::path::{Path, PathBuf};

use isoform::fields::{AnalyticField, OccupancyField, VoxelGrid};
use isoform::geometry::{load_mesh, save_mesh, BoundingBox, MeshFormat, TriangleMesh};
use isoform::mesh_refine::RefineConfig;
use isoform::metrics::{self, MetricsReport};
use isoform::mise::{extract_mesh, ExtractionConfig, ExtractionStats};
use isoform::neural::{EncoderInput, ModelMetadata, OccupancyModel};
use isoform::sampling::{Strategy, DEFAULT_PADDING};
use isoform::training::{
    desk_corpus, run_protocol, train_protocol, Arch, Corpus, CorpusShape, ProtocolConfig, ProtocolKind,
    ProtocolRow,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::fieldspec::parse_field_spec;
use crate::output::{read_bytes, read_text, sibling, write_atomic, ManifestBuilder};
use crate::{AblateArgs, EvalArgs, ExtractArgs, Extraction, SampleArgs, TrainArgs};

/// Resolution of the marching cubes surface built for analytic ground
/// truth and analytic training shapes.
pub const ANALYTIC_SURFACE_RESOLUTION: usize = 128;

fn json_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        out.push('/');
        match seg {
            Segment::Seq { index } => out.push_str(&index.to_string()),
            Segment::Map { key } => out.push_str(&key.replace('~', "~0").replace('/', "~1")),
            Segment::Enum { variant } => out.push_str(variant),
            Segment::Unknown => out.push('?'),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Parses a JSON config, naming the offending location by JSON pointer.
pub fn parse_config<T: DeserializeOwned>(text: &str, what: &Path) -> CliResult<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        CliError::validation(format!("{}: {}: {}", what.display(), json_pointer(e.path()), e.inner()))
    })
}

/// Turns a `field: message` validation error into one rooted at `prefix`.
fn at_pointer(prefix: &str, e: isoform::Error) -> CliError {
    match e {
        isoform::Error::InvalidArgument(m) => match m.split_once(": ") {
            Some((field, rest)) if !field.is_empty() && field.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') => {
                CliError::validation(format!("{prefix}/{field}: {rest}"))
            }
            _ => CliError::validation(format!("{prefix}: {m}")),
        },
        other => CliError::from(other).context(prefix),
    }
}

fn validate_settings(s: &ProtocolConfig, root: &str) -> CliResult<()> {
    s.train.validate().map_err(|e| at_pointer(&format!("{root}/train"), e))?;
    s.decoder.validate().map_err(|e| at_pointer(&format!("{root}/decoder"), e))?;
    s.validate().map_err(|e| at_pointer(root, e))
}

fn mesh_format(path: &Path) -> CliResult<MeshFormat> {
    MeshFormat::from_path(path).ok_or_else(|| {
        CliError::validation(format!("{}: unknown mesh format (expected .off or .obj)", path.display()))
    })
}

fn read_mesh(path: &Path, manifest: &mut ManifestBuilder) -> CliResult<TriangleMesh> {
    let format = mesh_format(path)?;
    let bytes = read_bytes(path)?;
    manifest.input(path.display().to_string(), &bytes);
    Ok(load_mesh(path, format)?)
}

fn write_mesh(mesh: &TriangleMesh, path: &Path, format: MeshFormat) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("creating {}: {e}", dir.display())))?;
    let tmp = tempfile::Builder::new()
        .suffix(match format {
            MeshFormat::Off => ".off",
            MeshFormat::Obj => ".obj",
        })
        .tempfile_in(dir)
        .map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))?;
    save_mesh(mesh, tmp.path(), format)?;
    tmp.persist(path)
        .map_err(|e| CliError::runtime(format!("writing {}: {}", path.display(), e.error)))?;
    Ok(())
}

fn to_json_pretty(value: &impl Serialize) -> CliResult<Vec<u8>> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    text.push(b'\n');
    Ok(text)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeEntry {
    #[serde(default)]
    pub name: Option<String>,
    /// Field spec of an analytic solid.
    #[serde(default)]
    pub field: Option<String>,
    /// Watertight mesh, relative to the config file.
    #[serde(default)]
    pub mesh: Option<PathBuf>,
}

/// Contents of a training config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default = "default_protocol")]
    pub protocol: ProtocolKind,
    #[serde(default)]
    pub arch: Option<Arch>,
    pub shapes: Vec<ShapeEntry>,
    #[serde(default)]
    pub settings: ProtocolConfig,
}

fn default_protocol() -> ProtocolKind {
    ProtocolKind::ReprPower
}

fn load_corpus_entries(entries: &[ShapeEntry], base: &Path, manifest: &mut ManifestBuilder) -> CliResult<Corpus> {
    if entries.is_empty() {
        return Err(CliError::validation("/shapes: at least one shape is required"));
    }
    let mut shapes: Vec<CorpusShape> = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        let here = format!("/shapes/{i}");
        let mut part = match (&e.field, &e.mesh) {
            (Some(spec), None) => {
                let shape = parse_field_spec(spec).map_err(|err| err.context(&here))?;
                let name = e.name.clone().unwrap_or_else(|| spec.clone());
                Corpus::from_shapes(vec![(name, shape)], ANALYTIC_SURFACE_RESOLUTION)?
            }
            (None, Some(rel)) => {
                let path = base.join(rel);
                let mesh = read_mesh(&path, manifest)?;
                let name = e.name.clone().unwrap_or_else(|| {
                    rel.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
                });
                Corpus::from_meshes(vec![(name, mesh)])?
            }
            _ => return Err(CliError::validation(format!("{here}: give exactly one of `field` and `mesh`"))),
        };
        shapes.append(&mut part.shapes);
    }
    Ok(Corpus { shapes })
}

pub fn train(args: &TrainArgs, seed: Option<u64>) -> CliResult<()> {
    let text = read_text(&args.config)?;
    let mut file: TrainFile = parse_config(&text, &args.config)?;
    let s = &mut file.settings;
    if let Some(v) = seed {
        s.train.seed = v;
    }
    if let Some(v) = args.points {
        s.train.points = v;
    }
    if let Some(v) = args.cloud_points {
        s.cloud_points = v;
    }
    if let Some(v) = args.cloud_noise {
        s.cloud_noise = v;
    }
    if let Some(v) = args.max_steps {
        s.train.max_steps = v;
    }
    validate_settings(&file.settings, "/settings").map_err(|e| e.context(&args.config.display().to_string()))?;

    let mut manifest = ManifestBuilder::new("train", file.settings.train.seed);
    manifest.input(args.config.display().to_string(), text.as_bytes());
    manifest.config(&file)?;
    let base = args.config.parent().unwrap_or(Path::new("."));
    let corpus = load_corpus_entries(&file.shapes, base, &mut manifest)
        .map_err(|e| e.context(&args.config.display().to_string()))?;
    manifest.phase("load");

    let arch = file.arch.unwrap_or(Arch::Full);
    let strategy = file.settings.train.strategy;
    log::info!(
        "training {} on {} shapes ({strategy}, {arch})",
        file.protocol,
        corpus.len()
    );
    let t = train_protocol(file.protocol, &corpus, &file.settings, strategy, arch)?;
    manifest.phase("train");

    let metadata = ModelMetadata {
        seed: file.settings.train.seed,
        step: t.record.best_step,
        tau: t.tau,
        bbox: t.dataset.region,
        training: serde_json::to_value(&file).map_err(|e| CliError::runtime(e.to_string()))?,
    };
    let model = OccupancyModel::new(t.decoder, t.encoder, metadata)?;
    let weights = args.out.join("weights.json");
    write_atomic(&weights, model.to_json()?.as_bytes())?;
    manifest.output(&weights);

    let mut csv = csv::Writer::from_writer(Vec::new());
    for row in &t.record.rows {
        csv.serialize(row).map_err(|e| CliError::runtime(e.to_string()))?;
    }
    let csv = csv.into_inner().map_err(|e| CliError::runtime(e.to_string()))?;
    let record = args.out.join("train.csv");
    write_atomic(&record, &csv)?;
    manifest.output(&record);
    manifest.phase("write");
    manifest.write(&args.out.join("manifest.json"))
}

// ---------------------------------------------------------------- extract

fn refine_config(e: &Extraction, seed: u64) -> CliResult<RefineConfig> {
    let cfg = RefineConfig {
        lambda: e.lambda,
        samples_per_face: e.samples_per_face,
        steps: e.refine_steps,
        simplify_to: e.simplify_to,
        seed,
        ..RefineConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct ExtractReport<'a> {
    vertices: usize,
    faces: usize,
    watertight: bool,
    #[serde(flatten)]
    stats: &'a ExtractionStats,
}

fn run_extraction(
    field: &dyn OccupancyField,
    region: BoundingBox,
    tau: f64,
    e: &Extraction,
    seed: u64,
) -> CliResult<(TriangleMesh, ExtractionStats)> {
    let cfg = ExtractionConfig::new(region)
        .with_tau(tau)
        .with_resolution(e.initial_res, e.levels);
    cfg.validate()?;
    let (mesh, stats) = extract_mesh(field, &cfg, &refine_config(e, seed)?)?;
    if mesh.faces.is_empty() {
        log::warn!("the isosurface at tau = {tau} is empty");
    }
    Ok((mesh, stats))
}

fn load_model(path: &Path, manifest: &mut ManifestBuilder) -> CliResult<OccupancyModel> {
    let text = read_text(path)?;
    manifest.input(path.display().to_string(), text.as_bytes());
    OccupancyModel::from_json(&text).map_err(|e| CliError::from(e).context(&path.display().to_string()))
}

pub fn extract(args: &ExtractArgs, seed: Option<u64>) -> CliResult<()> {
    let seed = seed.unwrap_or(0);
    let format = mesh_format(&args.out)?;
    let mut manifest = ManifestBuilder::new("extract", seed);
    let e = &args.extraction;

    let (mesh, stats, tau) = if let Some(spec) = &args.field {
        let shape = parse_field_spec(spec)?;
        let mut field = AnalyticField::new(shape)?;
        if args.smooth > 0.0 {
            field = field.smoothed(args.smooth)?;
        } else if args.smooth < 0.0 || !args.smooth.is_finite() {
            return Err(CliError::validation(format!("--smooth must be >= 0, got {}", args.smooth)));
        }
        let region = field.bbox().padded(DEFAULT_PADDING);
        let field = field.with_bbox(region);
        manifest.phase("load");
        let (mesh, stats) = run_extraction(&field, region, e.tau, e, seed)?;
        (mesh, stats, e.tau)
    } else {
        let path = args.weights.as_ref().expect("clap requires weights or field");
        let model = load_model(path, &mut manifest)?;
        let grid;
        let cloud;
        let input = if let Some(id) = args.shape_id {
            EncoderInput::ShapeId(id)
        } else if let Some(p) = &args.points {
            cloud = read_mesh(p, &mut manifest)?.vertices;
            EncoderInput::Points(&cloud)
        } else if let Some(p) = &args.voxels {
            let text = read_text(p)?;
            manifest.input(p.display().to_string(), text.as_bytes());
            grid = VoxelGrid::from_json(&text).map_err(|err| CliError::from(err).context(&p.display().to_string()))?;
            EncoderInput::Voxels(&grid)
        } else {
            return Err(CliError::Usage(format!(
                "{} weights need an observation: --shape-id, --points or --voxels",
                model.encoder.kind()
            )));
        };
        let field = model.field_for(input)?;
        let tau = if e.model_tau { model.metadata.tau } else { e.tau };
        manifest.phase("load");
        let (mesh, stats) = run_extraction(&field, model.metadata.bbox, tau, e, seed)?;
        (mesh, stats, tau)
    };
    manifest.phase("extract");
    manifest.config(&serde_json::json!({
        "weights": args.weights,
        "field": args.field,
        "smooth": args.smooth,
        "shape_id": args.shape_id,
        "points": args.points,
        "voxels": args.voxels,
        "tau": tau,
        "extraction": e,
    }))?;

    write_mesh(&mesh, &args.out, format)?;
    manifest.output(&args.out);
    let stats_path = args.stats.clone().unwrap_or_else(|| sibling(&args.out, ".stats.json"));
    let report = ExtractReport {
        vertices: mesh.vertices.len(),
        faces: mesh.faces.len(),
        watertight: !mesh.faces.is_empty() && mesh.is_watertight(),
        stats: &stats,
    };
    write_atomic(&stats_path, &to_json_pretty(&report)?)?;
    manifest.output(&stats_path);
    manifest.phase("write");
    manifest.write(&sibling(&args.out, ".manifest.json"))
}

// ---------------------------------------------------------------- eval

/// Ground truth named on the command line: a mesh file when the argument
/// has a mesh extension, a field spec otherwise.
fn ground_truth(gt: &str, manifest: &mut ManifestBuilder) -> CliResult<CorpusShape> {
    let path = Path::new(gt);
    let corpus = if MeshFormat::from_path(path).is_some() {
        let mesh = read_mesh(path, manifest)?;
        Corpus::from_meshes(vec![(gt.to_string(), mesh)])?
    } else {
        let shape = parse_field_spec(gt)?;
        manifest.input(gt, gt.as_bytes());
        Corpus::from_shapes(vec![(gt.to_string(), shape)], ANALYTIC_SURFACE_RESOLUTION)?
    };
    Ok(corpus.shapes.into_iter().next().expect("one shape"))
}

pub fn eval(args: &EvalArgs, seed: Option<u64>) -> CliResult<()> {
    let seed = seed.unwrap_or(0);
    if args.n == 0 {
        return Err(CliError::validation("--n must be at least 1"));
    }
    let mut manifest = ManifestBuilder::new("eval", seed);
    let pred = read_mesh(&args.pred, &mut manifest)?;
    let gt = ground_truth(&args.gt, &mut manifest)?;
    manifest.config(&serde_json::json!({"pred": args.pred, "gt": args.gt, "n": args.n}))?;
    manifest.phase("load");
    let report = metrics::evaluate(&pred, gt.field.as_ref(), &gt.mesh, args.n, seed)?;
    manifest.phase("evaluate");
    match &args.out {
        Some(out) => {
            write_atomic(out, &to_json_pretty(&report)?)?;
            manifest.output(out);
            manifest.write(&sibling(out, ".manifest.json"))
        }
        None => {
            let text = String::from_utf8(to_json_pretty(&report)?).expect("json is utf-8");
            print!("{text}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- sample

#[derive(Debug, Serialize)]
struct SampleRecord {
    file: String,
    latent: Vec<f64>,
    vertices: usize,
    faces: usize,
}

pub fn sample(args: &SampleArgs, seed: Option<u64>) -> CliResult<()> {
    let seed = seed.unwrap_or(0);
    let format = match args.format.as_str() {
        "off" => MeshFormat::Off,
        "obj" => MeshFormat::Obj,
        other => return Err(CliError::Usage(format!("--format must be off or obj, got {other:?}"))),
    };
    let mut manifest = ManifestBuilder::new("sample", seed);
    let model = load_model(&args.weights, &mut manifest)?;
    if model.encoder.kind() != "variational_head" {
        return Err(isoform::Error::KindMismatch {
            expected: "variational_head".into(),
            got: model.encoder.kind().into(),
        }
        .into());
    }
    let e = &args.extraction;
    let tau = if e.model_tau { model.metadata.tau } else { e.tau };
    manifest.config(&serde_json::json!({
        "weights": args.weights,
        "count": args.count,
        "format": args.format,
        "tau": tau,
        "extraction": e,
    }))?;
    manifest.phase("load");

    let dim = model.decoder.condition_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ext = args.format.as_str();
    let mut records = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let z: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let field = model.field(z.clone())?;
        let (mesh, _) = run_extraction(&field, model.metadata.bbox, tau, e, seed.wrapping_add(i as u64))?;
        let name = format!("sample_{i:03}.{ext}");
        let path = args.out.join(&name);
        write_mesh(&mesh, &path, format)?;
        manifest.output(&path);
        records.push(SampleRecord {
            file: name,
            latent: z,
            vertices: mesh.vertices.len(),
            faces: mesh.faces.len(),
        });
    }
    let list = args.out.join("samples.json");
    write_atomic(&list, &to_json_pretty(&records)?)?;
    manifest.output(&list);
    manifest.phase("sample");
    manifest.write(&args.out.join("manifest.json"))
}

// ---------------------------------------------------------------- ablate

/// One (strategy, architecture) cell of an ablation table, averaged over
/// the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: Strategy,
    pub arch: Arch,
    pub shapes: usize,
    pub tau: f64,
    pub iou: f64,
    pub chamfer_l1: Option<f64>,
    pub accuracy: Option<f64>,
    pub completeness: Option<f64>,
    pub normal_consistency: Option<f64>,
    pub pred_volume: f64,
    pub gt_volume: f64,
}

impl TableRow {
    fn from_mean(row: &ProtocolRow, shapes: usize) -> Self {
        let m: &MetricsReport = &row.metrics;
        TableRow {
            strategy: row.strategy,
            arch: row.arch,
            shapes,
            tau: row.tau,
            iou: m.iou,
            chamfer_l1: m.chamfer_l1,
            accuracy: m.accuracy,
            completeness: m.completeness,
            normal_consistency: m.normal_consistency,
            pred_volume: m.pred_volume,
            gt_volume: m.gt_volume,
        }
    }
}

fn load_corpus_dir(dir: &Path, manifest: &mut ManifestBuilder) -> CliResult<Corpus> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::runtime(format!("reading {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| MeshFormat::from_path(p).is_some())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::validation(format!("{}: no .off or .obj meshes", dir.display())));
    }
    let mut named = Vec::with_capacity(paths.len());
    for p in &paths {
        let mesh = read_mesh(p, manifest)?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        named.push((name, mesh));
    }
    Ok(Corpus::from_meshes(named)?)
}

fn parse_list<T: std::str::FromStr<Err = isoform::Error>>(items: &[String], flag: &str) -> CliResult<Vec<T>> {
    items
        .iter()
        .map(|s| s.trim().parse::<T>().map_err(|e| CliError::Usage(format!("{flag}: {e}"))))
        .collect()
}

pub fn ablate(args: &AblateArgs, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = ProtocolConfig::default();
    let mut config_text = None;
    if let Some(p) = &args.config {
        let text = read_text(p)?;
        cfg = parse_config(&text, p)?;
        config_text = Some((p.display().to_string(), text));
    }
    if !args.strategies.is_empty() {
        cfg.strategies = parse_list(&args.strategies, "--strategies")?;
    }
    if !args.archs.is_empty() {
        cfg.archs = parse_list(&args.archs, "--archs")?;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    validate_settings(&cfg, "")?;

    let mut manifest = ManifestBuilder::new("ablate", cfg.train.seed);
    if let Some((name, text)) = &config_text {
        manifest.input(name.clone(), text.as_bytes());
    }
    let corpus = if args.corpus == "desk" {
        manifest.input("desk", b"desk");
        desk_corpus()?
    } else {
        load_corpus_dir(Path::new(&args.corpus), &mut manifest)?
    };
    manifest.config(&serde_json::json!({"corpus": args.corpus, "settings": cfg}))?;
    manifest.phase("load");

    let rows = run_protocol(ProtocolKind::Ablation, &corpus, &cfg)?;
    manifest.phase("train");
    let mut csv = csv::Writer::from_writer(Vec::new());
    for r in rows.iter().filter(|r| r.shape == "mean") {
        csv.serialize(TableRow::from_mean(r, corpus.len()))
            .map_err(|e| CliError::runtime(e.to_string()))?;
    }
    let csv = csv.into_inner().map_err(|e| CliError::runtime(e.to_string()))?;
    write_atomic(&args.out, &csv)?;
    manifest.output(&args.out);
    let detail = sibling(&args.out, ".rows.json");
    write_atomic(&detail, &to_json_pretty(&rows)?)?;
    manifest.output(&detail);
    manifest.phase("write");
    manifest.write(&sibling(&args.out, ".manifest.json"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_errors_name_the_field() {
        let text = r#"{"shapes": [{"field": "sphere:0.4"}], "settings": {"train": {"strategy": "random"}}}"#;
        let err = parse_config::<TrainFile>(text, Path::new("c.json")).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, CliError::Validation(_)));
        assert!(msg.contains("/settings/train/strategy"), "{msg}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let mut s = ProtocolConfig::default();
        s.train.points = 0;
        let msg = validate_settings(&s, "/settings").unwrap_err().to_string();
        assert!(msg.starts_with("/settings/train/points"), "{msg}");
        let mut s = ProtocolConfig::default();
        s.cloud_points = 0;
        let msg = validate_settings(&s, "/settings").unwrap_err().to_string();
        assert!(msg.starts_with("/settings/cloud_points"), "{msg}");
    }

    #[test]
    fn shape_entries_need_one_source() {
        let text = r#"{"shapes": [{"name": "x"}]}"#;
        let file: TrainFile = parse_config(text, Path::new("c.json")).unwrap();
        let mut m = ManifestBuilder::new("t", 0);
        let err = load_corpus_entries(&file.shapes, Path::new("."), &mut m).err().unwrap();
        assert!(err.to_string().contains("/shapes/0"));
    }
}
