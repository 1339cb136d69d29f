use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use skelnoise::cm_moe::{ensemble_all, finetune_gate, fuse_all, load_fusion, save_fusion, FusionData, FusionModel};
use skelnoise::cross_training::{cross_train, write_selection_log, SelectionSchedule};
use skelnoise::global_select::{rank_by_loss, select_clean, SelectionManifest};
use skelnoise::harness::evaluate::{evaluate, evaluate_scores, AccuracyMetrics};
use skelnoise::harness::pipeline::split_peer_rows;
use skelnoise::harness::{emit_plots, run_ablation_suite, run_pipeline, ExperimentConfig, PeerEval, RunReport};
use skelnoise::model::{load_checkpoint, save_checkpoint, ReferenceStGcn};
use skelnoise::noise::{inject_symmetric_noise, NoiseManifest, NoisyDataset};
use skelnoise::skeleton::{
    derive, generate_synthetic_dataset, load_dataset, save_dataset, Dataset, DatasetFormat, Modality,
    SkeletonSequence, SkeletonTopology, SyntheticSpec,
};
use skelnoise::stream::ModalityStream;

#[derive(Parser)]
#[command(name = "skelnoise", version, about = "Skeleton action recognition under label noise")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Corrupt training labels and write the noise manifest.
    Inject(InjectArgs),
    /// Write the joint, bone or motion stream of a dataset.
    Derive(DeriveArgs),
    /// Co-teach two peers on one modality and keep the better one.
    CrossTrain(CrossTrainArgs),
    /// Build the clean set from three experts' loss rankings.
    Select(SelectArgs),
    /// Fine-tune the gate over frozen experts on the clean set.
    Fuse(FuseArgs),
    /// Score a checkpoint, an ensemble or a fusion bundle on clean data.
    Evaluate(EvaluateArgs),
    /// Run every stage end to end from a TOML config.
    Run(RunArgs),
    /// Run the four-arm ablation over the configured splits.
    Ablation(RunArgs),
    /// Tabulate finished runs and draw charts.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    ArrayContainer,
    SyntheticManifest,
}

impl From<Format> for DatasetFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::ArrayContainer => DatasetFormat::ArrayContainer,
            Format::SyntheticManifest => DatasetFormat::SyntheticManifest,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (or manifest file).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "array-container")]
    format: Format,
    /// Skip re-centering on the root joint of frame 0.
    #[arg(long)]
    no_center: bool,
}

impl DataArgs {
    fn load(&self) -> Result<(Dataset, SkeletonTopology)> {
        let mut data = load_dataset(&self.data, self.format.into())
            .with_context(|| format!("loading {}", self.data.display()))?;
        let topo = SkeletonTopology::default_for(data.joint_count);
        if !self.no_center {
            data.samples = data
                .samples
                .iter()
                .map(|s| s.centered_on(topo.root()))
                .collect::<skelnoise::Result<_>>()?;
        }
        Ok((data, topo))
    }

    /// Dataset with the manifest's labels applied.
    fn load_noisy(&self, manifest: &Path) -> Result<(NoisyDataset, SkeletonTopology)> {
        let (data, topo) = self.load()?;
        let manifest: NoiseManifest = read_json(manifest)?;
        let noisy = manifest.apply(&data).context("applying noise manifest")?;
        Ok((noisy, topo))
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    joints: Option<usize>,
    #[arg(long)]
    noise_scale: Option<f64>,
}

#[derive(Args)]
struct InjectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    noise_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_manifest: PathBuf,
    /// Record the injection time in the manifest (makes it non-reproducible byte for byte).
    #[arg(long)]
    stamp: bool,
}

#[derive(Args)]
struct DeriveArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    modality: Modality,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct HyperArgs {
    /// Experiment config supplying backbone and optimizer settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl HyperArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(e) = self.epochs {
            cfg.cross_train.epochs = e;
            cfg.fusion.hyper.epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.cross_train.seed = s;
            cfg.fusion.hyper.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct CrossTrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    modality: Modality,
    /// Receives `expert.{json,bin}`, `epochs.json` and `selection_log.csv`.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding `<modality>/expert` checkpoints.
    #[arg(long)]
    experts: PathBuf,
    /// Per-modality keep fraction; `1 - r` of the manifest when omitted.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    experts: PathBuf,
    /// Selection manifest written by `select`.
    #[arg(long)]
    selection: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    unfreeze_experts: bool,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Single-modality checkpoint stem.
    #[arg(long, conflicts_with_all = ["bundle", "experts"])]
    checkpoint: Option<PathBuf>,
    /// Fusion bundle directory.
    #[arg(long, conflicts_with = "experts")]
    bundle: Option<PathBuf>,
    /// Expert directory scored with the fixed-weight ensemble.
    #[arg(long)]
    experts: Option<PathBuf>,
    #[arg(long, num_args = 3, value_delimiter = ',', default_values_t = [0.6, 0.6, 0.4])]
    weights: Vec<f64>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write SVG charts next to the report.
    #[arg(long)]
    plots: bool,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories (or parents of them) holding `report.json`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Directory for SVG charts.
    #[arg(long)]
    plots: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec::default();
    if let Some(k) = args.classes {
        spec.class_count = k;
    }
    if let Some(n) = args.per_class {
        spec.samples_per_class = n;
    }
    if let Some(t) = args.frames {
        spec.frames = t;
    }
    if let Some(v) = args.joints {
        spec.joints = v;
    }
    if let Some(s) = args.noise_scale {
        spec.noise_scale = s;
    }
    let data = generate_synthetic_dataset(&spec, args.seed)?;
    save_dataset(&args.out, &data)?;
    println!("wrote {} samples ({} classes) to {}", data.len(), data.class_count, args.out.display());
    Ok(())
}

fn inject(args: InjectArgs) -> Result<()> {
    let (data, _) = args.data.load()?;
    let noisy = inject_symmetric_noise(&data, args.noise_ratio, args.seed)?;
    let mut manifest = noisy.manifest();
    if args.stamp {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH)?.as_secs();
        manifest.injected_at = Some(format!("unix:{secs}"));
    }
    write_json(&args.out_manifest, &manifest)?;
    println!(
        "corrupted {} of {} labels; manifest sha256 {}",
        noisy.corrupted_count(),
        noisy.len(),
        manifest.content_hash()?
    );
    Ok(())
}

fn derive_cmd(args: DeriveArgs) -> Result<()> {
    let (data, topo) = args.data.load()?;
    let samples = data
        .samples
        .iter()
        .map(|s| {
            Ok(SkeletonSequence {
                frames: derive(s, &topo, args.modality)?.data,
                ..s.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    save_dataset(&args.out, &Dataset { samples, ..data })?;
    println!("wrote {} stream to {}", args.modality, args.out.display());
    Ok(())
}

fn cross_train_cmd(args: CrossTrainArgs) -> Result<()> {
    let cfg = args.hyper.config()?;
    let (noisy, topo) = args.data.load_noisy(&args.manifest)?;
    if matches!(cfg.peer_eval, PeerEval::TestSplit) {
        bail!("standalone cross-train needs a held-out peer evaluation slice");
    }
    let (train_rows, peer_rows) = split_peer_rows(&cfg.peer_eval, noisy.len(), noisy.seed);
    let train = ModalityStream::from_noisy(&noisy.subset(&train_rows), &topo, args.modality)?;
    let peer = ModalityStream::from_noisy(&noisy.subset(&peer_rows), &topo, args.modality)?;
    let schedule = SelectionSchedule::new(noisy.noise_ratio, cfg.warmup_epochs)?;
    let hyper = &cfg.cross_train;
    let out = cross_train(&train, &peer, &schedule, hyper, &cfg.backbone, &topo)?;
    fs::create_dir_all(&args.out)?;
    save_checkpoint(&args.out.join("expert"), &out.expert, &format!("expert:{}", args.modality), hyper.seed, hyper.epochs)?;
    write_json(&args.out.join("epochs.json"), &out.epochs)?;
    write_selection_log(&args.out.join("selection_log.csv"), &out.selection_log)?;
    println!(
        "{}: kept peer {} (held-out accuracy {:.4} / {:.4})",
        args.modality, out.chosen_peer, out.peer_accuracy[0], out.peer_accuracy[1]
    );
    Ok(())
}

fn load_experts(dir: &Path) -> Result<[ReferenceStGcn; 3]> {
    let one = |m: Modality| -> Result<ReferenceStGcn> {
        let stem = dir.join(m.name()).join("expert");
        Ok(load_checkpoint(&stem).with_context(|| format!("loading {}", stem.display()))?.0)
    };
    Ok([one(Modality::Joint)?, one(Modality::Bone)?, one(Modality::Motion)?])
}

fn select_cmd(args: SelectArgs) -> Result<()> {
    let (noisy, topo) = args.data.load_noisy(&args.manifest)?;
    let experts = load_experts(&args.experts)?;
    let fraction = args.fraction.unwrap_or(1.0 - noisy.noise_ratio);
    let mut tables = Vec::with_capacity(3);
    for (m, model) in Modality::ALL.iter().zip(&experts) {
        let stream = ModalityStream::from_noisy(&noisy, &topo, *m)?;
        tables.push(rank_by_loss(model, &stream)?);
    }
    let tables: [_; 3] = tables.try_into().map_err(|_| anyhow::anyhow!("expected three loss tables"))?;
    let sel = select_clean(&tables, fraction)?;
    let manifest = sel.manifest(Some(&noisy.corrupted_mask))?;
    write_json(&args.out, &manifest)?;
    print!("clean set: {} of {} samples", manifest.union.len(), noisy.len());
    if let Some(q) = manifest.quality.as_ref().and_then(|q| q.get("union")) {
        print!(", precision {:.4}", q.precision);
    }
    println!();
    Ok(())
}

fn fuse_cmd(args: FuseArgs) -> Result<()> {
    let cfg = args.hyper.config()?;
    let (noisy, topo) = args.data.load_noisy(&args.manifest)?;
    let selection: SelectionManifest = read_json(&args.selection)?;
    let keep: HashSet<&str> = selection.union.iter().map(String::as_str).collect();
    let rows: Vec<usize> = (0..noisy.len()).filter(|&i| keep.contains(noisy.samples[i].sample_id.as_str())).collect();
    if rows.len() != keep.len() {
        bail!("selection lists {} samples, {} found in the dataset", keep.len(), rows.len());
    }
    let clean = noisy.subset(&rows);
    let data = FusionData::from_sequences(&clean.samples, noisy.class_count, &topo)?;
    let hyper = &cfg.fusion.hyper;
    let mut model = FusionModel::with_fresh_gate(load_experts(&args.experts)?, hyper.gate_width, hyper.seed, &data)?;
    model.frozen = [!(args.unfreeze_experts || cfg.fusion.unfreeze_experts); 3];
    let out = finetune_gate(model, &data, hyper)?;
    let sel_bytes = fs::read(&args.selection)?;
    save_fusion(&args.out, &out.model, hyper, Some(skelnoise::cm_moe::manifest_hash(&sel_bytes)))?;
    write_json(&args.out.join("gate_epochs.json"), &out.epochs)?;
    if let Some(last) = out.epochs.last() {
        println!("gate epoch {}: loss {:.4}, mean weights {:?}", last.epoch, last.mean_loss, last.mean_weights);
    }
    Ok(())
}

fn evaluate_cmd(args: EvaluateArgs) -> Result<()> {
    let (data, topo) = args.data.load()?;
    let metrics: AccuracyMetrics = if let Some(stem) = &args.checkpoint {
        let (model, header) = load_checkpoint(stem)?;
        let modality = header
            .role
            .rsplit(':')
            .next()
            .and_then(|m| m.parse::<Modality>().ok())
            .unwrap_or(Modality::Joint);
        let stream = ModalityStream::from_sequences(&data.samples, data.class_count, &topo, modality)?;
        evaluate(&model, &stream)?
    } else {
        let fusion_data = FusionData::from_sequences(&data.samples, data.class_count, &topo)?;
        let preds = if let Some(dir) = &args.bundle {
            fuse_all(&load_fusion(dir)?.0, &fusion_data)?
        } else if let Some(dir) = &args.experts {
            let w: [f64; 3] = args.weights.clone().try_into().map_err(|_| anyhow::anyhow!("need three weights"))?;
            ensemble_all(&load_experts(dir)?, w, &fusion_data)?
        } else {
            bail!("pass one of --checkpoint, --bundle or --experts");
        };
        evaluate_scores(preds.iter().map(|p| p.fused.as_slice()), &fusion_data.labels, data.class_count)?
    };
    println!("{}", serde_json::to_string_pretty(&metrics)?);
    if let Some(out) = &args.out {
        write_json(out, &metrics)?;
    }
    Ok(())
}

fn print_summary(report: &RunReport) {
    println!("split {} | r = {} | {} train / {} test", report.split, report.noise.ratio, report.train_count, report.test_count);
    for (arm, modality, m) in report.metric_rows() {
        println!("  {arm:<15} {modality:<18} top1 {:.4}  top5 {:.4}", m.top1, m.top5);
    }
}

fn run_cmd(args: RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let report = run_pipeline(&cfg)?;
    print_summary(&report);
    println!("report hash {}", report.content_hash()?);
    if args.plots {
        emit_plots(std::slice::from_ref(&report), &cfg.output_dir.join("plots"))?;
    }
    Ok(())
}

fn ablation_cmd(args: RunArgs) -> Result<()> {
    let cfg = args.config()?;
    let report = run_ablation_suite(&cfg)?;
    print!("{}", report.table());
    if args.plots {
        emit_plots(&report.runs, &cfg.output_dir.join("plots"))?;
    }
    Ok(())
}

fn find_reports(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let direct = root.join("report.json");
    if direct.is_file() {
        out.push(direct);
        return Ok(());
    }
    let mut children: Vec<PathBuf> = fs::read_dir(root)
        .with_context(|| format!("reading {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    children.sort();
    for c in children {
        find_reports(&c, out)?;
    }
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<()> {
    let mut paths = Vec::new();
    for r in &args.runs {
        find_reports(r, &mut paths)?;
    }
    if paths.is_empty() {
        bail!("no report.json under the given paths");
    }
    let reports = paths.iter().map(|p| Ok(RunReport::load(p)?)).collect::<Result<Vec<_>>>()?;
    for (p, r) in paths.iter().zip(&reports) {
        println!("{}", p.display());
        print_summary(r);
    }
    if let Some(dir) = &args.plots {
        for p in emit_plots(&reports, dir)? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Inject(a) => inject(a),
        Command::Derive(a) => derive_cmd(a),
        Command::CrossTrain(a) => cross_train_cmd(a),
        Command::Select(a) => select_cmd(a),
        Command::Fuse(a) => fuse_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Run(a) => run_cmd(a),
        Command::Ablation(a) => ablation_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}
