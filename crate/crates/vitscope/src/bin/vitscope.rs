//! Command-line front end: per-image visualization, occlusion and shuffle
//! studies, dataset layer sweeps, t-SNE exports, attention-dynamics
//! verification, and weight-archive inspection.
//!
//! Every run writes `manifest.json` into the output directory capturing
//! the effective parameters (including defaulted ones) and the files
//! produced. All randomness is seeded, so re-running a command yields
//! byte-identical outputs.
//!
//! Exit codes: 0 success, 2 argument error, 3 input-format error,
//! 4 internal invariant failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use vitscope::archive::{load_archive, NamedTensorMap};
use vitscope::cluster::{
    layer_sweep, reports_to_csv, ClusterReport, EmbeddingSet, Metric, PurityDenominator,
    RatioMode, SweepSettings, REPORT_CSV_HEADER,
};
use vitscope::dynamics::{
    iterate_dynamics, make_clustered_instance, trajectory_to_csv, verify_bound,
    verify_contraction, AttentionMode,
};
use vitscope::error::{Error, Result};
use vitscope::image::{contact_sheet, load_image, load_mask_png, save_png, Rgb8Image};
use vitscope::labels::{label_patches, parse_sidecar, PatchLabel, PatchLabelMap, SegMask};
use vitscope::model::{
    forward_trace, normalized_black, preprocess, validate_weights, ForwardTrace, GeluKindConfig,
    ModelConfig,
};
use vitscope::perturb::{
    apply_mask, apply_shuffle, nonsalient_drop, random_drop, salient_drop, FillMode, ShuffleSpec,
};
use vitscope::rng::SplitMix64;
use vitscope::tensor::Tensor;
use vitscope::tsne::{tsne, tsne_csv, TsneParams};
use vitscope::vis::{
    coeff_field, layer0_embedding_overlay, layer0_filter_column, render, vis_filename,
    CoefficientField, OverlayMode, RenderedVis, TileBasis,
};

#[derive(Parser)]
#[command(
    name = "vitscope",
    version,
    about = "ViT-B/16 tracing, visualization, and clustering analysis"
)]
struct Cli {
    /// Weight archive path.
    #[arg(long, global = true)]
    weights: Option<PathBuf>,

    /// JSON config file; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (created if absent).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Base seed for every random choice in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads for dataset commands.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// GELU variant override (tanh or exact).
    #[arg(long, global = true)]
    gelu: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render neuron/embedding visualizations for one or more images.
    Visualize(VisualizeArgs),
    /// Occlude patches, then visualize and measure the clustering.
    Occlude(OccludeArgs),
    /// Shuffle grid cells of an image, then measure the clustering.
    Shuffle(ShuffleArgs),
    /// Layer sweep of clustering measures over a labeled image set.
    Cluster(ClusterArgs),
    /// Export 2-D t-SNE coordinates of patch embeddings.
    Tsne(TsneArgs),
    /// Verify the attention-dynamics contraction claims numerically.
    Theorem(TheoremArgs),
    /// List the tensors in a weight archive.
    InspectWeights(InspectArgs),
}

#[derive(Args)]
struct VisualizeArgs {
    /// Input image(s), PNG or binary PPM.
    #[arg(long, required = true, num_args = 1..)]
    image: Vec<PathBuf>,

    /// Token index for deep visualizations (0 = class token).
    #[arg(long)]
    token: Option<usize>,

    /// Filter index, 1-based.
    #[arg(long)]
    filter: Option<usize>,

    /// Comma-separated layer list (layer 0 = the token's own tile).
    #[arg(long, default_value = "")]
    layers: String,

    /// Emit the whole-image visualization of one filter column.
    #[arg(long)]
    filter_column: Option<usize>,

    /// Emit the layer-0 overlay of one patch embedding (1-based patch).
    #[arg(long)]
    embedding_overlay: Option<usize>,

    /// Overlay compositing: mean, sum, or max-abs.
    #[arg(long, default_value = "mean")]
    overlay_mode: String,

    /// Also emit one contact-sheet PNG per token (columns = layers).
    #[arg(long)]
    contact_sheet: bool,
}

#[derive(Args)]
struct OccludeArgs {
    #[arg(long)]
    image: PathBuf,

    /// random, salient, or nonsalient.
    #[arg(long)]
    mode: String,

    /// Drop ratio in [0, 1].
    #[arg(long)]
    ratio: Option<f64>,

    /// Sweep of drop ratios (comma separated), one output set per ratio.
    #[arg(long)]
    ratios: Option<String>,

    /// zero or noise.
    #[arg(long, default_value = "zero")]
    fill: String,

    /// What "zero" fills with: raw (black pixel) or normalized (mid-gray).
    #[arg(long, default_value = "raw")]
    zero_mode: String,

    /// Segmentation mask PNG (required for salient/nonsalient).
    #[arg(long)]
    mask: Option<PathBuf>,

    /// Token/filter/layers to visualize on the occluded input.
    #[arg(long)]
    token: Option<usize>,
    #[arg(long)]
    filter: Option<usize>,
    #[arg(long, default_value = "")]
    layers: String,

    #[command(flatten)]
    sweep: SweepFlags,
}

#[derive(Args)]
struct ShuffleArgs {
    #[arg(long)]
    image: PathBuf,

    /// Cells per side; one output set per grid.
    #[arg(long, required = true, num_args = 1..)]
    grid: Vec<usize>,

    /// Segmentation mask PNG for label-aware measures.
    #[arg(long)]
    mask: Option<PathBuf>,

    #[command(flatten)]
    sweep: SweepFlags,
}

#[derive(Args)]
struct ClusterArgs {
    /// Input images (parallel to --masks).
    #[arg(long, num_args = 1..)]
    images: Vec<PathBuf>,

    /// Segmentation masks, same order as --images.
    #[arg(long, num_args = 1..)]
    masks: Vec<PathBuf>,

    /// Directory of images (pairs with --mask-dir by file stem).
    #[arg(long)]
    image_dir: Option<PathBuf>,

    /// Directory of masks named <stem>.png.
    #[arg(long)]
    mask_dir: Option<PathBuf>,

    /// Selection rule: required object count.
    #[arg(long, default_value_t = 2)]
    min_objects: usize,

    /// Selection rule: patches per object.
    #[arg(long, default_value_t = 3)]
    min_patches: usize,

    /// Overlap threshold for patch labeling.
    #[arg(long, default_value_t = 0.4)]
    threshold: f64,

    /// Collapse instance ids sharing a class name (needs sidecars named
    /// <mask-stem>.json).
    #[arg(long)]
    class_level: bool,

    /// Comma-separated layers to export t-SNE coordinates for.
    #[arg(long)]
    tsne_layers: Option<String>,

    /// Shuffle each image with this grid before tracing (labels follow).
    #[arg(long)]
    shuffle_grid: Option<usize>,

    #[command(flatten)]
    sweep: SweepFlags,

    #[command(flatten)]
    tsne: TsneFlags,
}

#[derive(Args)]
struct TsneArgs {
    #[arg(long)]
    image: PathBuf,

    /// Segmentation mask for the label column.
    #[arg(long)]
    mask: Option<PathBuf>,

    /// Comma-separated layer list.
    #[arg(long, default_value = "0")]
    layers: String,

    #[command(flatten)]
    tsne: TsneFlags,
}

#[derive(Args)]
struct TheoremArgs {
    /// Contraction trials.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,

    #[arg(long, default_value_t = 32)]
    max_tokens: usize,

    #[arg(long, default_value_t = 16)]
    max_dim: usize,

    /// Cluster-size groups for bound checks, groups separated by ';'
    /// (e.g. "3,3;4,2,2").
    #[arg(long, default_value = "3,3;4,4;2,3,4")]
    sizes: String,

    /// Lower cross-cluster attention bounds to sweep.
    #[arg(long, default_value = "0,0.005,0.01")]
    eps_l: String,

    /// Upper cross-cluster attention bounds to sweep.
    #[arg(long, default_value = "0.01,0.02,0.05,0.5")]
    eps_u: String,

    /// Randomized feasible bound instances to verify.
    #[arg(long, default_value_t = 500)]
    bound_trials: usize,

    /// Embedding dimension for bound instances.
    #[arg(long, default_value_t = 8)]
    dim: usize,

    /// Trajectory length.
    #[arg(long, default_value_t = 10)]
    steps: usize,

    /// fixed or per-step attention along the trajectory.
    #[arg(long, default_value = "fixed")]
    mode: String,
}

#[derive(Args)]
struct InspectArgs {
    /// Validate shapes against the configured geometry too.
    #[arg(long)]
    check: bool,

    /// Emit the table as JSON instead of text.
    #[arg(long)]
    json: bool,
}

/// DBSCAN/measure flags shared by the measuring commands.
#[derive(Args)]
struct SweepFlags {
    /// Fixed DBSCAN eps (default: per-layer median 3-NN distance * 0.9).
    #[arg(long)]
    eps: Option<f64>,

    /// DBSCAN core threshold (default 3).
    #[arg(long)]
    min_pts: Option<usize>,

    /// euclidean or cosine (default cosine).
    #[arg(long)]
    metric: Option<String>,

    /// Purity denominator: clustered or all (default clustered).
    #[arg(long)]
    purity_mode: Option<String>,

    /// Unique-label-ratio denominator: objects-plus-background or
    /// objects-only (default objects-plus-background).
    #[arg(long)]
    ratio_mode: Option<String>,
}

#[derive(Args)]
struct TsneFlags {
    #[arg(long, default_value_t = 15.0)]
    perplexity: f64,

    #[arg(long, default_value_t = 1000)]
    iterations: usize,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out)?;
    let cfg = effective_config(&cli)?;
    match &cli.command {
        Command::Visualize(args) => cmd_visualize(&cli, &cfg, args),
        Command::Occlude(args) => cmd_occlude(&cli, &cfg, args),
        Command::Shuffle(args) => cmd_shuffle(&cli, &cfg, args),
        Command::Cluster(args) => cmd_cluster(&cli, &cfg, args),
        Command::Tsne(args) => cmd_tsne(&cli, &cfg, args),
        Command::Theorem(args) => cmd_theorem(&cli, args),
        Command::InspectWeights(args) => cmd_inspect(&cli, args),
    }
}

// ---------------------------------------------------------------------
// configuration plumbing
// ---------------------------------------------------------------------

#[derive(serde::Deserialize, Default)]
struct ConfigFile {
    model: Option<ModelConfig>,
    sweep: Option<SweepSettings>,
}

fn read_config_file(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("config file: {e}")))
}

/// Model config from the config file (or defaults) with CLI overrides on
/// top.
fn effective_config(cli: &Cli) -> Result<ModelConfig> {
    let mut cfg = match &cli.config {
        Some(path) => read_config_file(path)?.model.unwrap_or_default(),
        None => ModelConfig::default(),
    };
    if let Some(gelu) = &cli.gelu {
        cfg.gelu = match gelu.as_str() {
            "tanh" => GeluKindConfig::Tanh,
            "exact" => GeluKindConfig::Exact,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown gelu mode {other:?} (tanh or exact)"
                )))
            }
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn sweep_settings(cli: &Cli, flags: &SweepFlags) -> Result<SweepSettings> {
    let mut settings = match &cli.config {
        Some(path) => read_config_file(path)?.sweep.unwrap_or_default(),
        None => SweepSettings::default(),
    };
    if let Some(eps) = flags.eps {
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("eps must be > 0".into()));
        }
        settings.eps = Some(eps);
    }
    if let Some(min_pts) = flags.min_pts {
        settings.min_pts = min_pts;
    }
    if let Some(metric) = &flags.metric {
        settings.metric = match metric.as_str() {
            "euclidean" => Metric::Euclidean,
            "cosine" => Metric::Cosine,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown metric {other:?} (euclidean or cosine)"
                )))
            }
        };
    }
    if let Some(mode) = &flags.purity_mode {
        settings.purity_mode = match mode.as_str() {
            "clustered" => PurityDenominator::Clustered,
            "all" => PurityDenominator::AllPoints,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown purity mode {other:?} (clustered or all)"
                )))
            }
        };
    }
    if let Some(mode) = &flags.ratio_mode {
        settings.ratio_mode = match mode.as_str() {
            "objects-plus-background" => RatioMode::ObjectsPlusBackground,
            "objects-only" => RatioMode::ObjectsOnly,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown ratio mode {other:?}"
                )))
            }
        };
    }
    Ok(settings)
}

fn load_weights(cli: &Cli, cfg: &ModelConfig) -> Result<NamedTensorMap> {
    let path = cli
        .weights
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--weights is required".into()))?;
    let weights = load_archive(path)?;
    validate_weights(&weights, cfg)?;
    Ok(weights)
}

fn parse_usize_list(text: &str, what: &str) -> Result<Vec<usize>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} entry {part:?}")))
        })
        .collect()
}

fn parse_f64_list(text: &str, what: &str) -> Result<Vec<f64>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|part| {
            part.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidArgument(format!("bad {what} entry {part:?}")))
        })
        .collect()
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string())
}

// ---------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------

struct Manifest {
    command: &'static str,
    params: BTreeMap<String, Value>,
    files: Vec<String>,
}

impl Manifest {
    fn new(command: &'static str, cli: &Cli) -> Self {
        let mut params = BTreeMap::new();
        params.insert("seed".into(), json!(cli.seed));
        params.insert("jobs".into(), json!(cli.jobs));
        if let Some(w) = &cli.weights {
            params.insert("weights".into(), json!(w.display().to_string()));
        }
        Manifest {
            command,
            params,
            files: Vec::new(),
        }
    }

    fn set(&mut self, key: &str, value: Value) {
        self.params.insert(key.to_string(), value);
    }

    fn add_file(&mut self, name: impl Into<String>) {
        self.files.push(name.into());
    }

    fn write(&mut self, out_dir: &Path) -> Result<()> {
        self.files.sort();
        let doc = json!({
            "command": self.command,
            "parameters": self.params,
            "files": self.files,
        });
        let text = serde_json::to_string_pretty(&doc).expect("manifest serialization");
        std::fs::write(out_dir.join("manifest.json"), text)?;
        Ok(())
    }
}

fn write_text(out_dir: &Path, name: &str, text: &str, manifest: &mut Manifest) -> Result<()> {
    std::fs::write(out_dir.join(name), text)?;
    manifest.add_file(name);
    Ok(())
}

fn write_image(
    out_dir: &Path,
    name: &str,
    image: &Rgb8Image,
    manifest: &mut Manifest,
) -> Result<()> {
    save_png(image, out_dir.join(name))?;
    manifest.add_file(name);
    Ok(())
}

/// Measures as both the frozen-column CSV and full per-cluster JSON.
fn write_reports(
    out_dir: &Path,
    tag: &str,
    reports: &[ClusterReport],
    manifest: &mut Manifest,
) -> Result<()> {
    write_text(
        out_dir,
        &format!("measures_{tag}.csv"),
        &reports_to_csv(reports),
        manifest,
    )?;
    write_text(
        out_dir,
        &format!("measures_{tag}.json"),
        &serde_json::to_string_pretty(reports).expect("report serialization"),
        manifest,
    )
}

// ---------------------------------------------------------------------
// shared pipeline steps
// ---------------------------------------------------------------------

fn load_preprocessed(path: &Path, cfg: &ModelConfig) -> Result<Tensor> {
    let raw = load_image(path)?;
    preprocess(&raw, cfg)
}

fn load_segmask(path: &Path, cfg: &ModelConfig, class_level: bool) -> Result<SegMask> {
    let raster = load_mask_png(path)?;
    let mut mask = SegMask::from_raster(&raster).resized_to(cfg.image_side, cfg.image_side);
    if class_level {
        let sidecar_path = path.with_extension("json");
        let text = std::fs::read_to_string(&sidecar_path).map_err(|_| {
            Error::InvalidArgument(format!(
                "--class-level needs a sidecar at {}",
                sidecar_path.display()
            ))
        })?;
        mask = mask.collapse_classes(&parse_sidecar(&text)?);
    }
    Ok(mask)
}

fn load_labels(
    path: &Path,
    cfg: &ModelConfig,
    threshold: f64,
    class_level: bool,
) -> Result<PatchLabelMap> {
    let mask = load_segmask(path, cfg, class_level)?;
    label_patches(&mask, cfg.patch_side, threshold)
}

fn label_strings(labels: &PatchLabelMap) -> Vec<String> {
    labels
        .labels
        .iter()
        .map(|l| match l {
            PatchLabel::Background => "background".to_string(),
            PatchLabel::Object(id) => format!("object:{id}"),
            PatchLabel::Dropped => "dropped".to_string(),
        })
        .collect()
}

/// Undo the per-channel normalization to display a perturbed input.
fn denormalize(image: &Tensor, cfg: &ModelConfig) -> Result<Rgb8Image> {
    let side = cfg.image_side;
    let mut rgb = vec![0u8; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            for target in 0..3 {
                let c = target.min(cfg.channels - 1);
                let v = image.at3(y, x, c) * cfg.norm_std[c] + cfg.norm_mean[c];
                rgb[(y * side + x) * 3 + target] = (v * 255.0 + 0.5).clamp(0.0, 255.0) as u8;
            }
        }
    }
    Rgb8Image::new(side, side, rgb)
}

/// Coefficient field for a layer; layer 0 maps to a one-hot field over the
/// requested token's own tile (its layer-0 neuron visualization).
fn field_for_layer(trace: &ForwardTrace, layer: usize, token: usize) -> Result<CoefficientField> {
    if layer == 0 {
        let tokens = trace.tokens();
        if token == 0 {
            return Err(Error::InvalidArgument(
                "the class token has no layer-0 tile; pick a patch token".into(),
            ));
        }
        if token >= tokens {
            return Err(Error::InvalidArgument(format!(
                "token {token} out of range 0..={}",
                tokens - 1
            )));
        }
        let mut data = vec![0.0f32; tokens * (tokens - 1)];
        data[token * (tokens - 1) + (token - 1)] = 1.0;
        return Ok(CoefficientField {
            layer: 0,
            coeffs: Tensor::new(vec![tokens, tokens - 1], data)?,
        });
    }
    coeff_field(trace, layer)
}

fn render_layer_token(
    trace: &ForwardTrace,
    basis: &TileBasis,
    layer: usize,
    token: usize,
) -> Result<RenderedVis> {
    let field = field_for_layer(trace, layer, token)?;
    render(&field, basis, token)
}

// ---------------------------------------------------------------------
// visualize
// ---------------------------------------------------------------------

fn cmd_visualize(cli: &Cli, cfg: &ModelConfig, args: &VisualizeArgs) -> Result<()> {
    let weights = load_weights(cli, cfg)?;
    let layers = parse_usize_list(&args.layers, "layer")?;
    let overlay_mode = match args.overlay_mode.as_str() {
        "mean" => OverlayMode::Mean,
        "sum" => OverlayMode::Sum,
        "max-abs" => OverlayMode::MaxAbs,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown overlay mode {other:?}"
            )))
        }
    };
    let mut manifest = Manifest::new("visualize", cli);
    manifest.set("model", serde_json::to_value(cfg).unwrap());
    manifest.set(
        "images",
        json!(args
            .image
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()),
    );
    manifest.set("layers", json!(layers));
    manifest.set("token", json!(args.token));
    manifest.set("filter", json!(args.filter));
    manifest.set("filter_column", json!(args.filter_column));
    manifest.set("embedding_overlay", json!(args.embedding_overlay));
    manifest.set("overlay_mode", json!(args.overlay_mode));
    manifest.set("contact_sheet", json!(args.contact_sheet));

    for image_path in &args.image {
        let stem = stem_of(image_path);
        let image = load_preprocessed(image_path, cfg)?;

        if let Some(filter) = args.filter_column {
            let vis = layer0_filter_column(&image, &weights, filter)?;
            let name = format!("filtercol_F{filter}_{stem}.png");
            write_image(&cli.out, &name, &vis.display, &mut manifest)?;
        }

        if let Some(patch) = args.embedding_overlay {
            let vis = layer0_embedding_overlay(&image, &weights, patch, overlay_mode)?;
            let name = format!("overlay_T{patch}_{stem}.png");
            write_image(&cli.out, &name, &vis.display, &mut manifest)?;
        }

        match (args.token, args.filter) {
            (Some(token), Some(filter)) => {
                let trace = forward_trace(&image, &weights, cfg)?;
                let basis = TileBasis::new(&image, &weights, filter)?;
                let mut sheet_tiles = Vec::new();
                for &layer in &layers {
                    let vis = render_layer_token(&trace, &basis, layer, token)?;
                    let name = vis_filename(layer, token, filter);
                    write_image(&cli.out, &name, &vis.display, &mut manifest)?;
                    sheet_tiles.push(vis.display);
                }
                if args.contact_sheet && !sheet_tiles.is_empty() {
                    let sheet = contact_sheet(&sheet_tiles, sheet_tiles.len())?;
                    let name = format!("sheet_T{token}_F{filter}_{stem}.png");
                    write_image(&cli.out, &name, &sheet, &mut manifest)?;
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::InvalidArgument(
                    "--token and --filter must be given together".into(),
                ))
            }
        }
    }
    manifest.write(&cli.out)
}

// ---------------------------------------------------------------------
// occlude
// ---------------------------------------------------------------------

fn cmd_occlude(cli: &Cli, cfg: &ModelConfig, args: &OccludeArgs) -> Result<()> {
    let weights = load_weights(cli, cfg)?;
    let fill_mode = match args.fill.as_str() {
        "zero" => FillMode::Zero,
        "noise" => FillMode::Noise,
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown fill {other:?} (zero or noise)"
            )))
        }
    };
    let zero_fill = match args.zero_mode.as_str() {
        "raw" => normalized_black(cfg),
        "normalized" => vec![0.0; cfg.channels],
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown zero mode {other:?} (raw or normalized)"
            )))
        }
    };
    let ratios = match (&args.ratio, &args.ratios) {
        (Some(r), None) => vec![*r],
        (None, Some(list)) => parse_f64_list(list, "ratio")?,
        (Some(_), Some(_)) => {
            return Err(Error::InvalidArgument(
                "--ratio and --ratios are mutually exclusive".into(),
            ))
        }
        (None, None) => {
            return Err(Error::InvalidArgument(
                "one of --ratio/--ratios is required".into(),
            ))
        }
    };
    for &r in &ratios {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidArgument(format!("ratio {r} outside [0, 1]")));
        }
    }

    let needs_mask = matches!(args.mode.as_str(), "salient" | "nonsalient");
    if needs_mask && args.mask.is_none() {
        return Err(Error::InvalidArgument(format!(
            "mode {:?} requires --mask",
            args.mode
        )));
    }

    let image = load_preprocessed(&args.image, cfg)?;
    let labels = args
        .mask
        .as_ref()
        .map(|m| load_labels(m, cfg, 0.4, false))
        .transpose()?;
    let layers = parse_usize_list(&args.layers, "layer")?;
    let settings = sweep_settings(cli, &args.sweep)?;

    let mut manifest = Manifest::new("occlude", cli);
    manifest.set("model", serde_json::to_value(cfg).unwrap());
    manifest.set("image", json!(args.image.display().to_string()));
    manifest.set("mode", json!(args.mode));
    manifest.set("ratios", json!(ratios));
    manifest.set("fill", json!(args.fill));
    manifest.set("zero_mode", json!(args.zero_mode));
    manifest.set("layers", json!(layers));
    manifest.set("sweep", serde_json::to_value(&settings).unwrap());

    for &ratio in &ratios {
        let tag = format!("{}_r{}", args.mode, ratio);
        let mask = match args.mode.as_str() {
            "random" => random_drop(cfg.n_patches(), ratio, cli.seed, fill_mode)?,
            "salient" => salient_drop(labels.as_ref().unwrap(), ratio, cli.seed, fill_mode)?,
            "nonsalient" => nonsalient_drop(labels.as_ref().unwrap(), ratio, cli.seed, fill_mode)?,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown mode {other:?} (random, salient, nonsalient)"
                )))
            }
        };
        write_text(
            &cli.out,
            &format!("mask_{tag}.json"),
            &mask.to_json(),
            &mut manifest,
        )?;

        let occluded = apply_mask(&image, cfg.patch_side, &mask, &zero_fill)?;
        write_image(
            &cli.out,
            &format!("occluded_{tag}.png"),
            &denormalize(&occluded, cfg)?,
            &mut manifest,
        )?;

        let trace = forward_trace(&occluded, &weights, cfg)?;
        if let (Some(token), Some(filter)) = (args.token, args.filter) {
            let basis = TileBasis::new(&occluded, &weights, filter)?;
            for &layer in &layers {
                let vis = render_layer_token(&trace, &basis, layer, token)?;
                let name = format!("occluded_{tag}_{}", vis_filename(layer, token, filter));
                write_image(&cli.out, &name, &vis.display, &mut manifest)?;
            }
        }

        if let Some(base_labels) = &labels {
            let remapped = base_labels.remap_dropped(&mask)?;
            let reports = layer_sweep(&trace, &remapped, &settings, &tag)?;
            write_reports(&cli.out, &tag, &reports, &mut manifest)?;
        }
    }
    manifest.write(&cli.out)
}

// ---------------------------------------------------------------------
// shuffle
// ---------------------------------------------------------------------

fn cmd_shuffle(cli: &Cli, cfg: &ModelConfig, args: &ShuffleArgs) -> Result<()> {
    let weights = load_weights(cli, cfg)?;
    let image = load_preprocessed(&args.image, cfg)?;
    let mask = args
        .mask
        .as_ref()
        .map(|m| load_segmask(m, cfg, false))
        .transpose()?;
    let settings = sweep_settings(cli, &args.sweep)?;

    let mut manifest = Manifest::new("shuffle", cli);
    manifest.set("model", serde_json::to_value(cfg).unwrap());
    manifest.set("image", json!(args.image.display().to_string()));
    manifest.set("grids", json!(args.grid));
    manifest.set("sweep", serde_json::to_value(&settings).unwrap());

    for &grid in &args.grid {
        let spec = ShuffleSpec::random(grid, cli.seed)?;
        let shuffled = apply_shuffle(&image, &spec)?;
        write_text(
            &cli.out,
            &format!("shuffle_g{grid}.json"),
            &spec.to_json(),
            &mut manifest,
        )?;
        write_image(
            &cli.out,
            &format!("shuffled_g{grid}.png"),
            &denormalize(&shuffled, cfg)?,
            &mut manifest,
        )?;

        if let Some(mask) = &mask {
            let labels = label_patches(&mask.shuffled(&spec)?, cfg.patch_side, 0.4)?;
            let trace = forward_trace(&shuffled, &weights, cfg)?;
            let reports = layer_sweep(&trace, &labels, &settings, &format!("g{grid}"))?;
            write_reports(&cli.out, &format!("g{grid}"), &reports, &mut manifest)?;
        }
    }
    manifest.write(&cli.out)
}

// ---------------------------------------------------------------------
// cluster (dataset sweep)
// ---------------------------------------------------------------------

struct ImageJob {
    index: usize,
    image: PathBuf,
    mask: PathBuf,
    stem: String,
}

struct ImageOutcome {
    stem: String,
    reports: Option<Vec<ClusterReport>>,
    tsne_files: Vec<(String, String)>,
}

/// Everything a worker needs to process one image.
struct SweepContext<'a> {
    cfg: &'a ModelConfig,
    weights: &'a NamedTensorMap,
    args: &'a ClusterArgs,
    settings: &'a SweepSettings,
    tsne_layers: &'a [usize],
    tsne_params: &'a TsneParams,
    seed: u64,
}

fn collect_jobs(args: &ClusterArgs) -> Result<Vec<ImageJob>> {
    let mut jobs = Vec::new();
    if let (Some(image_dir), Some(mask_dir)) = (&args.image_dir, &args.mask_dir) {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(image_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "ppm")))
            .collect();
        entries.sort();
        for image in entries {
            let stem = stem_of(&image);
            let mask = mask_dir.join(format!("{stem}.png"));
            if mask.exists() {
                let index = jobs.len();
                jobs.push(ImageJob {
                    index,
                    image,
                    mask,
                    stem,
                });
            }
        }
    }
    if !args.images.is_empty() {
        if args.images.len() != args.masks.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} masks",
                args.images.len(),
                args.masks.len()
            )));
        }
        for (image, mask) in args.images.iter().zip(&args.masks) {
            jobs.push(ImageJob {
                index: jobs.len(),
                image: image.clone(),
                mask: mask.clone(),
                stem: stem_of(image),
            });
        }
    }
    if jobs.is_empty() {
        return Err(Error::InvalidArgument(
            "no images given (use --images/--masks or --image-dir/--mask-dir)".into(),
        ));
    }
    Ok(jobs)
}

fn process_image(job: &ImageJob, ctx: &SweepContext<'_>) -> Result<ImageOutcome> {
    let mut image = load_preprocessed(&job.image, ctx.cfg)?;
    let mut mask = load_segmask(&job.mask, ctx.cfg, ctx.args.class_level)?;

    // the ground truth mask is shuffled alongside the image and then
    // relabeled, which stays valid even when cells cut through patches
    if let Some(grid) = ctx.args.shuffle_grid {
        let spec = ShuffleSpec::random(grid, ctx.seed.wrapping_add(job.index as u64))?;
        image = apply_shuffle(&image, &spec)?;
        mask = mask.shuffled(&spec)?;
    }
    let labels = label_patches(&mask, ctx.cfg.patch_side, ctx.args.threshold)?;

    if !labels.select_image(ctx.args.min_objects, ctx.args.min_patches) {
        return Ok(ImageOutcome {
            stem: job.stem.clone(),
            reports: None,
            tsne_files: Vec::new(),
        });
    }

    let trace = forward_trace(&image, ctx.weights, ctx.cfg)?;
    let reports = layer_sweep(&trace, &labels, ctx.settings, &job.stem)?;

    let mut tsne_files = Vec::new();
    let class_attention = trace.class_attention();
    let names = label_strings(&labels);
    for &layer in ctx.tsne_layers {
        let set = EmbeddingSet::from_trace(&trace, layer, job.stem.clone())?;
        let result = tsne(&set, ctx.tsne_params)?;
        let csv = tsne_csv(&result.coords, &names, &class_attention);
        tsne_files.push((format!("tsne_L{layer}_{}.csv", job.stem), csv));
    }

    Ok(ImageOutcome {
        stem: job.stem.clone(),
        reports: Some(reports),
        tsne_files,
    })
}

fn mean_reports(per_image: &[&Vec<ClusterReport>]) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    if per_image.is_empty() {
        return out;
    }
    let layers = per_image[0].len();
    for layer in 0..layers {
        let mean_of = |extract: &dyn Fn(&ClusterReport) -> Option<f64>| -> String {
            let values: Vec<f64> = per_image
                .iter()
                .filter_map(|reports| reports.get(layer).and_then(extract))
                .collect();
            if values.is_empty() {
                String::new()
            } else {
                (values.iter().sum::<f64>() / values.len() as f64).to_string()
            }
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            layer,
            mean_of(&|r| r.purity),
            mean_of(&|r| r.silhouette),
            mean_of(&|r| r.in_cluster_cosine),
            mean_of(&|r| r.in_object_cosine),
            mean_of(&|r| Some(r.unique_label_ratio)),
        ));
    }
    out
}

fn cmd_cluster(cli: &Cli, cfg: &ModelConfig, args: &ClusterArgs) -> Result<()> {
    let weights = load_weights(cli, cfg)?;
    let settings = sweep_settings(cli, &args.sweep)?;
    let tsne_layers = match &args.tsne_layers {
        Some(list) => parse_usize_list(list, "t-SNE layer")?,
        None => Vec::new(),
    };
    let tsne_params = TsneParams {
        perplexity: args.tsne.perplexity,
        iterations: args.tsne.iterations,
        seed: cli.seed,
        ..TsneParams::default()
    };
    let jobs = collect_jobs(args)?;

    let mut manifest = Manifest::new("cluster", cli);
    manifest.set("model", serde_json::to_value(cfg).unwrap());
    manifest.set(
        "images",
        json!(jobs
            .iter()
            .map(|j| j.image.display().to_string())
            .collect::<Vec<_>>()),
    );
    manifest.set("min_objects", json!(args.min_objects));
    manifest.set("min_patches", json!(args.min_patches));
    manifest.set("threshold", json!(args.threshold));
    manifest.set("class_level", json!(args.class_level));
    manifest.set("tsne_layers", json!(tsne_layers));
    manifest.set("tsne_perplexity", json!(args.tsne.perplexity));
    manifest.set("tsne_iterations", json!(args.tsne.iterations));
    manifest.set("shuffle_grid", json!(args.shuffle_grid));
    manifest.set("sweep", serde_json::to_value(&settings).unwrap());

    let ctx = SweepContext {
        cfg,
        weights: &weights,
        args,
        settings: &settings,
        tsne_layers: &tsne_layers,
        tsne_params: &tsne_params,
        seed: cli.seed,
    };

    // shard across workers; outcomes keyed by job index so output order
    // is independent of scheduling
    let n_workers = cli.jobs.max(1);
    let outcomes: Mutex<Vec<Option<Result<ImageOutcome>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for worker in 0..n_workers {
            let jobs = &jobs;
            let outcomes = &outcomes;
            let ctx = &ctx;
            scope.spawn(move || {
                for idx in (worker..jobs.len()).step_by(n_workers) {
                    let outcome = process_image(&jobs[idx], ctx);
                    outcomes.lock().unwrap()[idx] = Some(outcome);
                }
            });
        }
    });

    let outcomes: Vec<ImageOutcome> = outcomes
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|o| o.expect("worker filled every slot"))
        .collect::<Result<_>>()?;

    let mut selected_reports: Vec<&Vec<ClusterReport>> = Vec::new();
    let mut selected_stems: Vec<&str> = Vec::new();
    for outcome in &outcomes {
        if let Some(reports) = &outcome.reports {
            write_reports(&cli.out, &outcome.stem, reports, &mut manifest)?;
            for (name, csv) in &outcome.tsne_files {
                write_text(&cli.out, name, csv, &mut manifest)?;
            }
            selected_reports.push(reports);
            selected_stems.push(&outcome.stem);
        }
    }

    let mean_csv = mean_reports(&selected_reports);
    write_text(&cli.out, "measures_mean.csv", &mean_csv, &mut manifest)?;
    let summary = json!({
        "total_images": outcomes.len(),
        "selected": selected_stems,
        "selected_count": selected_stems.len(),
    });
    write_text(
        &cli.out,
        "selection.json",
        &serde_json::to_string_pretty(&summary).unwrap(),
        &mut manifest,
    )?;
    if selected_stems.is_empty() {
        println!(
            "0 selected: no image met the rule of {} objects with {} patches each",
            args.min_objects, args.min_patches
        );
    } else {
        println!(
            "{} of {} images selected",
            selected_stems.len(),
            outcomes.len()
        );
    }
    manifest.write(&cli.out)
}

// ---------------------------------------------------------------------
// tsne
// ---------------------------------------------------------------------

fn cmd_tsne(cli: &Cli, cfg: &ModelConfig, args: &TsneArgs) -> Result<()> {
    let weights = load_weights(cli, cfg)?;
    let image = load_preprocessed(&args.image, cfg)?;
    let layers = parse_usize_list(&args.layers, "layer")?;
    let labels = args
        .mask
        .as_ref()
        .map(|m| load_labels(m, cfg, 0.4, false))
        .transpose()?;
    let params = TsneParams {
        perplexity: args.tsne.perplexity,
        iterations: args.tsne.iterations,
        seed: cli.seed,
        ..TsneParams::default()
    };

    let mut manifest = Manifest::new("tsne", cli);
    manifest.set("model", serde_json::to_value(cfg).unwrap());
    manifest.set("image", json!(args.image.display().to_string()));
    manifest.set("layers", json!(layers));
    manifest.set("perplexity", json!(params.perplexity));
    manifest.set("iterations", json!(params.iterations));

    let trace = forward_trace(&image, &weights, cfg)?;
    let names = labels
        .as_ref()
        .map(label_strings)
        .unwrap_or_else(|| vec![String::new(); cfg.n_patches()]);
    let class_attention = trace.class_attention();
    for &layer in &layers {
        let set = EmbeddingSet::from_trace(&trace, layer, stem_of(&args.image))?;
        let result = tsne(&set, &params)?;
        write_text(
            &cli.out,
            &format!("tsne_L{layer}.csv"),
            &tsne_csv(&result.coords, &names, &class_attention),
            &mut manifest,
        )?;
        let mut kl = String::from("iteration,kl\n");
        for (iter, value) in &result.kl_trajectory {
            kl.push_str(&format!("{iter},{value}\n"));
        }
        write_text(&cli.out, &format!("tsne_L{layer}_kl.csv"), &kl, &mut manifest)?;
    }
    manifest.write(&cli.out)
}

// ---------------------------------------------------------------------
// theorem
// ---------------------------------------------------------------------

fn cmd_theorem(cli: &Cli, args: &TheoremArgs) -> Result<()> {
    let mut manifest = Manifest::new("theorem", cli);
    manifest.set("trials", json!(args.trials));
    manifest.set("max_tokens", json!(args.max_tokens));
    manifest.set("max_dim", json!(args.max_dim));
    manifest.set("bound_trials", json!(args.bound_trials));
    manifest.set("dim", json!(args.dim));
    manifest.set("steps", json!(args.steps));
    manifest.set("mode", json!(args.mode));
    manifest.set("sizes", json!(args.sizes));
    manifest.set("eps_l", json!(args.eps_l));
    manifest.set("eps_u", json!(args.eps_u));

    let contraction = verify_contraction(args.trials, args.max_tokens, args.max_dim, cli.seed);
    println!(
        "contraction: {} trials, {} violations, max ratio {}",
        contraction.trials,
        contraction.violations.len(),
        contraction.max_ratio
    );

    // grid sweep of the intra-cluster bound
    let size_groups: Vec<Vec<usize>> = args
        .sizes
        .split(';')
        .map(|group| parse_usize_list(group, "cluster size"))
        .collect::<Result<_>>()?;
    if size_groups.is_empty() || size_groups.iter().any(|g| g.is_empty()) {
        return Err(Error::InvalidArgument("empty --sizes group".into()));
    }
    let eps_l_values = parse_f64_list(&args.eps_l, "eps_l")?;
    let eps_u_values = parse_f64_list(&args.eps_u, "eps_u")?;
    let mut bound_points = Vec::new();
    let mut skipped = Vec::new();
    let mut sweep_seed = cli.seed;
    for sizes in &size_groups {
        for &eps_l in &eps_l_values {
            for &eps_u in &eps_u_values {
                if eps_l > eps_u {
                    continue;
                }
                sweep_seed = sweep_seed.wrapping_add(1);
                match make_clustered_instance(sizes, args.dim, eps_l, eps_u, sweep_seed) {
                    Ok(instance) => {
                        let report = verify_bound(&instance)?;
                        bound_points.push(json!({
                            "sizes": sizes,
                            "eps_l": eps_l,
                            "eps_u": eps_u,
                            "report": report,
                        }));
                    }
                    Err(err) => {
                        skipped.push(json!({
                            "sizes": sizes,
                            "eps_l": eps_l,
                            "eps_u": eps_u,
                            "reason": err.to_string(),
                        }));
                    }
                }
            }
        }
    }

    // randomized feasible instances
    let mut rng = SplitMix64::new(cli.seed ^ 0xB0BA);
    let mut random_violations = 0usize;
    for trial in 0..args.bound_trials {
        let groups = 2 + rng.below(3);
        let sizes: Vec<usize> = (0..groups).map(|_| 2 + rng.below(4)).collect();
        let n: usize = sizes.iter().sum();
        let max_outside = sizes.iter().map(|s| n - s).max().unwrap() as f64;
        let eps_u = rng.uniform(0.0, 0.9 / max_outside);
        let eps_l = rng.uniform(0.0, eps_u);
        let instance =
            make_clustered_instance(&sizes, args.dim, eps_l, eps_u, cli.seed + trial as u64)?;
        let report = verify_bound(&instance)?;
        if !report.all_satisfied {
            random_violations += 1;
        }
    }
    println!(
        "bound: {} random feasible instances, {} violations; sweep {} points, {} infeasible skipped",
        args.bound_trials,
        random_violations,
        bound_points.len(),
        skipped.len()
    );

    // trajectory
    let mode = match args.mode.as_str() {
        "fixed" => AttentionMode::Fixed,
        "per-step" => AttentionMode::PerStep { seed: cli.seed },
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown mode {other:?} (fixed or per-step)"
            )))
        }
    };
    let mut traj_instance =
        make_clustered_instance(&size_groups[0], args.dim, 0.0, 0.01, cli.seed ^ 0x7EA)?;
    if matches!(mode, AttentionMode::PerStep { .. }) {
        // moderate norm keeps the recomputed softmax in its similarity-
        // driven regime
        for row in &mut traj_instance.z {
            for v in row.iter_mut() {
                *v /= 12.0;
            }
        }
    }
    let trajectory = iterate_dynamics(&traj_instance, args.steps, mode)?;
    write_text(
        &cli.out,
        "trajectory.csv",
        &trajectory_to_csv(&trajectory),
        &mut manifest,
    )?;

    let doc = json!({
        "contraction": contraction,
        "bound_sweep": bound_points,
        "bound_sweep_skipped": skipped,
        "random_bound_trials": args.bound_trials,
        "random_bound_violations": random_violations,
    });
    write_text(
        &cli.out,
        "theorem_report.json",
        &serde_json::to_string_pretty(&doc).unwrap(),
        &mut manifest,
    )?;
    manifest.write(&cli.out)
}

// ---------------------------------------------------------------------
// inspect-weights
// ---------------------------------------------------------------------

fn cmd_inspect(cli: &Cli, args: &InspectArgs) -> Result<()> {
    let path = cli
        .weights
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("--weights is required".into()))?;
    let weights = load_archive(path)?;
    let mut rows = Vec::new();
    for (name, tensor) in weights.iter() {
        let data = tensor.data();
        let min = data.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / data.len().max(1) as f64;
        rows.push((name.to_string(), tensor.shape().to_vec(), min, max, mean));
    }
    if args.json {
        let doc: Vec<Value> = rows
            .iter()
            .map(|(name, shape, min, max, mean)| {
                json!({"name": name, "shape": shape, "min": min, "max": max, "mean": mean})
            })
            .collect();
        println!("{}", serde_json::to_string_pretty(&doc).unwrap());
    } else {
        println!("{} tensors in {}", rows.len(), path.display());
        for (name, shape, min, max, mean) in &rows {
            println!("{name:<40} {shape:?} min {min:.5} max {max:.5} mean {mean:.5}");
        }
    }
    if args.check {
        let cfg = effective_config(cli)?;
        validate_weights(&weights, &cfg)?;
        println!("manifest check passed for the configured geometry");
    }
    Ok(())
}
