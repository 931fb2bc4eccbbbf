//! End-to-end operations behind the command line: training and evaluation
//! runs with their on-disk layout, standalone clustering, parameter reports
//! and attention-map export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::acl::{auto_lambda, cluster_floor, merges_per_stage, MemoryBank};
use crate::attention::export_attention_map;
use crate::backbone::{count_parameters, Backbone, BackboneConfig, ParamBreakdown};
use crate::checkpoint::Checkpoint;
use crate::config::{Lambda, RunConfig};
use crate::dataio::{load_image, load_split, DatasetIndex, LabeledSet, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, ItemSet, Metrics};
use crate::tensor::{write_tensor_file, Tensor};
use crate::trainer::{Monitor, StageRecord, TrainLog, Trainer};

pub const CONFIG_FILE: &str = "config.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const STAGES_FILE: &str = "stages.tsv";
pub const CLUSTERS_FILE: &str = "clusters.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const METRICS_KV_FILE: &str = "metrics.kv";
pub const METRICS_TEXT_FILE: &str = "metrics.txt";

const EMBED_CHUNK: usize = 64;

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::usage(format!("{what} {} is not a directory", path.display())))
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::usage(format!("{what} {} does not exist", path.display())))
    }
}

fn has_split(index: &DatasetIndex, split: Split) -> bool {
    index.split(split).next().is_some()
}

fn item_set<'a>(set: &'a LabeledSet, embeddings: &'a Tensor) -> ItemSet<'a> {
    ItemSet { embeddings, identities: &set.identities, cameras: &set.cameras }
}

/// Outcome of [`train_run`].
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub log: TrainLog,
    pub num_clusters: usize,
    /// Final retrieval metrics, when the dataset has query and gallery splits.
    pub metrics: Option<Metrics>,
    /// Final cluster assignment vs. training identities.
    pub nmi: Option<f64>,
}

/// Train on `data`'s training split and write a complete run directory:
/// resolved config, per-epoch log, per-stage log, cluster assignment,
/// checkpoints and (with query/gallery splits) metrics.
pub fn train_run(
    config: &RunConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(&StageRecord),
) -> Result<TrainSummary> {
    config.validate()?;
    require_dir(data, "data directory")?;
    if let Some(r) = resume {
        require_file(r, "checkpoint")?;
    }
    let index = DatasetIndex::open(data)?;
    let (h, w) = (config.model.height, config.model.width);
    let train = load_split(data, &index, Split::Train, h, w)?;
    let eval_sets = if has_split(&index, Split::Query) && has_split(&index, Split::Gallery) {
        Some((load_split(data, &index, Split::Query, h, w)?, load_split(data, &index, Split::Gallery, h, w)?))
    } else {
        None
    };

    let ckpt_dir = out.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ckpt_dir)?;
    fs::write(out.join(CONFIG_FILE), config.to_text())?;

    let mut trainer = match resume {
        Some(path) => Trainer::resume(config, train.images.clone(), &Checkpoint::load(path)?)?,
        None => Trainer::new(config, train.images.clone())?,
    };
    let train_identities = Some(train.identities.clone());
    let monitor = eval_sets.map(|(query, gallery)| Monitor { query, gallery, train_identities });
    if let Some(m) = monitor.clone() {
        trainer.set_monitor(m)?;
    }

    while trainer.stage < config.train.stages && !trainer.at_floor() {
        let record = trainer.run_stage()?.clone();
        trainer.save_checkpoints(&ckpt_dir)?;
        progress(&record);
    }
    if trainer.log.stages.is_empty() {
        trainer.save_checkpoints(&ckpt_dir)?;
    }

    fs::write(out.join(TRAIN_LOG_FILE), trainer.log.to_text())?;
    fs::write(out.join(STAGES_FILE), trainer.log.stages_text())?;
    fs::write(out.join(CLUSTERS_FILE), trainer.clusters.assignment_text())?;
    let (metrics, nmi) = match &monitor {
        Some(m) => {
            let (metrics, nmi) = m.measure(&trainer.model, &trainer.clusters)?;
            metrics.write(out)?;
            (Some(metrics), nmi)
        }
        None => (None, crate::eval::nmi(trainer.clusters.assignment(), &train.identities).ok()),
    };
    Ok(TrainSummary { log: trainer.log.clone(), num_clusters: trainer.clusters.num_clusters(), metrics, nmi })
}

/// Rebuild the configuration and model stored in a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(RunConfig, Backbone)> {
    let config = RunConfig::from_text(&ckpt.config_text)?;
    let mut model = Backbone::new(&config.model.backbone()?, config.train.seed)?;
    model.load_named_tensors(&|name| ckpt.get(name).cloned())?;
    Ok((config, model))
}

/// Evaluate a checkpoint on `data`'s query and gallery splits. Writes the
/// metrics, the checkpoint's config and the embeddings of every split.
pub fn eval_run(checkpoint: &Path, data: &Path, out: &Path) -> Result<Metrics> {
    require_file(checkpoint, "checkpoint")?;
    require_dir(data, "data directory")?;
    let (config, model) = load_model(&Checkpoint::load(checkpoint)?)?;
    let index = DatasetIndex::open(data)?;
    let (h, w) = (config.model.height, config.model.width);
    let query = load_split(data, &index, Split::Query, h, w)?;
    let gallery = load_split(data, &index, Split::Gallery, h, w)?;
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), config.to_text())?;
    let qe = model.embed(&query.images, EMBED_CHUNK)?;
    let ge = model.embed(&gallery.images, EMBED_CHUNK)?;
    let metrics = evaluate(&item_set(&query, &qe), &item_set(&gallery, &ge))?;
    metrics.write(out)?;
    write_tensor_file(&out.join("query_embeddings.gamt"), &qe)?;
    write_tensor_file(&out.join("gallery_embeddings.gamt"), &ge)?;
    if has_split(&index, Split::Train) {
        let train = load_split(data, &index, Split::Train, h, w)?;
        write_tensor_file(&out.join("train_embeddings.gamt"), &model.embed(&train.images, EMBED_CHUNK)?)?;
    }
    Ok(metrics)
}

/// Settings for [`cluster_run`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterOptions {
    pub lambda: Lambda,
    /// Pair merges per stage as a fraction of the row count.
    pub fraction: f64,
    /// Stop after this many stages; otherwise merge down to the floor.
    pub stages: Option<usize>,
    /// Floor on the cluster count (default `ceil(0.1 n)`).
    pub min_clusters: Option<usize>,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions { lambda: Lambda::Auto, fraction: 0.04, stages: None, min_clusters: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterResult {
    pub bank: MemoryBank,
    pub lambda: f64,
    /// Cluster count after each stage.
    pub trajectory: Vec<usize>,
}

impl ClusterResult {
    /// `stage<TAB>num_clusters` lines.
    pub fn trajectory_text(&self) -> String {
        let mut s = String::new();
        for (i, m) in self.trajectory.iter().enumerate() {
            let _ = writeln!(s, "{}\t{m}", i + 1);
        }
        s
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        fs::write(out.join("assignment.tsv"), self.bank.assignment_text())?;
        fs::write(out.join("trajectory.tsv"), self.trajectory_text())?;
        fs::write(out.join("lambda.txt"), format!("{}\n", self.lambda))?;
        write_tensor_file(&out.join("centroids.gamt"), self.bank.centroids())
    }
}

/// Bottom-up merging of fixed embedding rows (`[n, D]`), starting from one
/// singleton cluster per row.
pub fn cluster_run(embeddings: &Tensor, opts: &ClusterOptions) -> Result<ClusterResult> {
    if !(opts.fraction > 0.0 && opts.fraction <= 1.0) {
        return Err(Error::config(format!("merge fraction must be in (0, 1], got {}", opts.fraction)));
    }
    let mut bank = MemoryBank::singletons(embeddings)?;
    let n = bank.num_instances();
    if n < 2 {
        return Err(Error::usage("clustering needs at least two rows"));
    }
    let lambda = match opts.lambda {
        Lambda::Auto => auto_lambda(bank.centroids()),
        Lambda::Fixed(l) => l,
    };
    let floor = opts.min_clusters.unwrap_or_else(|| cluster_floor(n)).max(1);
    let per_stage = merges_per_stage(opts.fraction, n);
    let mut trajectory = Vec::new();
    while opts.stages.is_none_or(|s| trajectory.len() < s) {
        let merges = per_stage.min(bank.num_clusters().saturating_sub(floor));
        if merges == 0 {
            break;
        }
        bank.merge_step(merges, lambda)?;
        trajectory.push(bank.num_clusters());
    }
    Ok(ClusterResult { bank, lambda, trajectory })
}

/// Parameter count of a configuration next to its ungrouped reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub config: BackboneConfig,
    pub breakdown: ParamBreakdown,
    pub reference_name: String,
    pub reference: ParamBreakdown,
    /// Scalars in an actually constructed model, when requested.
    pub assembled: Option<usize>,
}

impl ParamReport {
    /// Fraction of the reference parameters removed.
    pub fn reduction(&self) -> f64 {
        1.0 - self.breakdown.total as f64 / self.reference.total as f64
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "preset {} groups {} embedding {}",
            self.config.preset, self.config.groups, self.config.embedding_dim
        );
        let _ = writeln!(s, "{}", self.breakdown);
        let _ = writeln!(s, "reference {} total {}", self.reference_name, self.reference.total);
        let _ = writeln!(s, "reduction {:.2}%", 100.0 * self.reduction());
        if let Some(a) = self.assembled {
            let _ = writeln!(s, "assembled {a} ({})", if a == self.breakdown.total { "matches" } else { "MISMATCH" });
        }
        s
    }
}

/// Count the parameters of `preset`. The reference is the plain ResNet-50
/// for the resnet presets and the ungrouped variant of any other preset.
pub fn parameter_report(
    preset: &str,
    groups: Option<usize>,
    embedding_dim: Option<usize>,
    assemble: bool,
) -> Result<ParamReport> {
    let config = BackboneConfig::preset(preset, groups, embedding_dim)?;
    let (reference_name, reference_cfg) = if preset.starts_with("resnet50") {
        ("resnet50-baseline".to_string(), BackboneConfig::preset("resnet50-baseline", Some(1), embedding_dim)?)
    } else {
        (format!("{preset} groups=1"), BackboneConfig::preset(preset, Some(1), embedding_dim)?)
    };
    let assembled = if assemble { Some(Backbone::new(&config, 0)?.store.num_scalars()) } else { None };
    Ok(ParamReport {
        breakdown: count_parameters(&config),
        reference: count_parameters(&reference_cfg),
        config,
        reference_name,
        assembled,
    })
}

/// Spatial attention map of block `layer` for one image, written as
/// `attention_layer<L>.pgm` (normalised to 0..255) and `.gamt` (raw).
pub fn export_attention(checkpoint: &Path, image: &Path, layer: usize, out: &Path) -> Result<PathBuf> {
    require_file(checkpoint, "checkpoint")?;
    require_file(image, "image")?;
    let (config, model) = load_model(&Checkpoint::load(checkpoint)?)?;
    let img = load_image(image, config.model.height, config.model.width)?;
    let batch = Tensor::stack(&[img])?;
    let maps = model.attention_maps(&batch, layer)?;
    fs::create_dir_all(out)?;
    let path = out.join(format!("attention_layer{layer}.pgm"));
    export_attention_map(&maps, 0, &path)?;
    write_tensor_file(&path.with_extension("gamt"), &maps)?;
    Ok(path)
}
