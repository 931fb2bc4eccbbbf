//! Joint optimisation of the instance and cluster losses with SGD, staged
//! bottom-up merging, per-epoch logging and resumable checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::acl::{acl_loss, auto_lambda, cluster_floor, merges_per_stage, MemoryBank};
use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::config::{Lambda, RunConfig};
use crate::dataio::LabeledSet;
use crate::error::{Error, Result};
use crate::eval::{evaluate, nmi, ItemSet, Metrics};
use crate::idl::{augment, idl_loss, InstanceBank};
use crate::nn::{Binding, Mode, ParamStore};
use crate::tensor::{Tape, Tensor};

const EMBED_CHUNK: usize = 64;
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

/// Classic momentum SGD with L2 decay:
/// `v <- m v + g + wd p`, `p <- p - lr v`.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if g.shape() != p.value.shape() || v.shape() != p.value.shape() {
            return Err(Error::shape(format!("{}: gradient/velocity shape mismatch", p.name)));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {}", p.name)));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((w, &gi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi + weight_decay * *w;
            *w -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub idl: f64,
    pub acl: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub idl: f64,
    pub acl: f64,
    pub total: f64,
    pub num_clusters: usize,
    pub lr: f64,
}

/// State after one stage's merge. Metrics are present only when the trainer
/// was given labelled monitoring data.
#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub stage: usize,
    pub num_clusters: usize,
    pub metrics: Option<Metrics>,
    /// Cluster assignment vs. held-back training identities.
    pub nmi: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub stages: Vec<StageRecord>,
}

impl TrainLog {
    /// `epoch<TAB>stage<TAB>J_idl<TAB>J_acl<TAB>J_total<TAB>num_clusters<TAB>lr`
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch, r.stage, r.idl, r.acl, r.total, r.num_clusters, r.lr
            );
        }
        s
    }

    /// `stage<TAB>num_clusters<TAB>rank1<TAB>rank5<TAB>rank10<TAB>mAP<TAB>nmi`,
    /// with `-` for values that were not measured.
    pub fn stages_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| x.to_string());
        let mut s = String::new();
        for r in &self.stages {
            let m = r.metrics.as_ref();
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.stage,
                r.num_clusters,
                opt(m.map(|m| m.rank1)),
                opt(m.map(|m| m.rank5)),
                opt(m.map(|m| m.rank10)),
                opt(m.map(|m| m.map)),
                opt(r.nmi)
            );
        }
        s
    }
}

/// Labelled data used only to report progress; it never influences training.
#[derive(Clone, Debug)]
pub struct Monitor {
    pub query: LabeledSet,
    pub gallery: LabeledSet,
    /// Identities of the training instances, in training order.
    pub train_identities: Option<Vec<i64>>,
}

impl Monitor {
    pub fn measure(&self, model: &Backbone, clusters: &MemoryBank) -> Result<(Metrics, Option<f64>)> {
        let qe = model.embed(&self.query.images, EMBED_CHUNK)?;
        let ge = model.embed(&self.gallery.images, EMBED_CHUNK)?;
        let metrics = evaluate(
            &ItemSet { embeddings: &qe, identities: &self.query.identities, cameras: &self.query.cameras },
            &ItemSet { embeddings: &ge, identities: &self.gallery.identities, cameras: &self.gallery.cameras },
        )?;
        let score = match &self.train_identities {
            Some(ids) => Some(nmi(clusters.assignment(), ids)?),
            None => None,
        };
        Ok((metrics, score))
    }
}

/// Training state: model, optimiser velocity and both banks.
pub struct Trainer {
    pub config: RunConfig,
    pub model: Backbone,
    velocity: Vec<Tensor>,
    pub instances: InstanceBank,
    pub clusters: MemoryBank,
    images: Tensor,
    lambda: f64,
    /// Global epochs completed.
    pub epoch: usize,
    /// Stages completed.
    pub stage: usize,
    pub log: TrainLog,
    monitor: Option<Monitor>,
}

fn image_rows(images: &Tensor, indices: &[usize]) -> Result<Vec<Tensor>> {
    let n = images.shape()[0];
    indices
        .iter()
        .map(|&i| {
            if i >= n {
                Err(Error::usage(format!("instance {i} outside {n} images")))
            } else {
                Ok(images.select(i))
            }
        })
        .collect()
}

impl Trainer {
    /// Fresh model and banks for `images` (`[n,3,H,W]`, unlabeled).
    pub fn new(config: &RunConfig, images: Tensor) -> Result<Self> {
        config.validate()?;
        let n = images.shape().first().copied().unwrap_or(0);
        if images.rank() != 4 || n == 0 {
            return Err(Error::shape(format!("training images must be [n,3,H,W], got {:?}", images.shape())));
        }
        if config.train.batch_size > n {
            return Err(Error::config(format!("batch size {} exceeds {n} instances", config.train.batch_size)));
        }
        let model = Backbone::new(&config.model.backbone()?, config.train.seed)?;
        let feats = model.embed(&images, EMBED_CHUNK)?;
        let lambda = match config.train.lambda {
            Lambda::Auto => auto_lambda(&feats),
            Lambda::Fixed(l) => l,
        };
        let velocity = model.store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Ok(Trainer {
            config: config.clone(),
            clusters: MemoryBank::singletons(&feats)?,
            instances: InstanceBank::new(feats)?,
            model,
            velocity,
            images,
            lambda,
            epoch: 0,
            stage: 0,
            log: TrainLog::default(),
            monitor: None,
        })
    }

    /// Attach labelled data evaluated after every stage.
    pub fn set_monitor(&mut self, monitor: Monitor) -> Result<()> {
        if let Some(ids) = &monitor.train_identities {
            if ids.len() != self.num_instances() {
                return Err(Error::shape(format!(
                    "{} monitor identities for {} instances",
                    ids.len(),
                    self.num_instances()
                )));
            }
        }
        self.monitor = Some(monitor);
        Ok(())
    }

    pub fn monitor(&self) -> Option<&Monitor> {
        self.monitor.as_ref()
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn num_instances(&self) -> usize {
        self.images.shape()[0]
    }

    /// One optimisation step on the given instances.
    pub fn step(&mut self, indices: &[usize], lr: f64) -> Result<StepLosses> {
        let b = indices.len();
        let mut batch = image_rows(&self.images, indices)?;
        for (k, &i) in indices.iter().enumerate() {
            batch.push(augment(&batch[k], &self.config.aug, self.epoch as u64, i as u64)?);
        }
        let stacked = Tensor::stack(&batch)?;
        let assignments: Vec<usize> = indices.iter().map(|&i| self.clusters.assignment()[i]).collect();
        let t = &self.config.train;

        let mut tape = Tape::new();
        let mut bind = Binding::new(&self.model.store, true);
        let x = tape.constant(stacked);
        let out = self.model.forward(&mut tape, &mut bind, x, Mode::Train)?;
        let originals = tape.slice_rows(out.embedding, 0, b)?;
        let augmented = tape.slice_rows(out.embedding, b, 2 * b)?;
        let j_idl = idl_loss(&mut tape, indices, augmented, originals, &self.instances, t.temperature, t.idl_reduction)?;
        let j_acl = acl_loss(&mut tape, originals, &assignments, &self.clusters, t.temperature, t.acl_reduction)?;
        let total = tape.add(j_idl, j_acl)?;
        let losses = StepLosses {
            idl: tape.value(j_idl).item(),
            acl: tape.value(j_acl).item(),
            total: tape.value(total).item(),
        };
        if !losses.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at epoch {}", self.epoch)));
        }
        let fresh = tape.value(originals).clone();
        let mut grads = tape.backward(total)?;
        let grads = bind.collect(&mut grads);
        drop(bind);
        sgd_step(&mut self.model.store, &grads, &mut self.velocity, lr, t.momentum, t.weight_decay)?;
        self.model.commit_batch_stats(&out.bn_stats)?;
        self.instances.update(indices, &fresh, t.bank_mixing)?;
        Ok(losses)
    }

    fn epoch_order(&self) -> Vec<usize> {
        let seed = self.config.train.seed ^ (self.epoch as u64 + 1).wrapping_mul(0xd1b5_4a32_d192_ed03);
        let mut order: Vec<usize> = (0..self.num_instances()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    /// One pass over a seeded permutation (last partial batch kept), then a
    /// centroid refresh from eval-mode embeddings.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let lr = self.config.train.learning_rate(self.epoch);
        let order = self.epoch_order();
        let mut sums = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for batch in order.chunks(self.config.train.batch_size) {
            let l = self.step(batch, lr)?;
            sums.0 += l.idl;
            sums.1 += l.acl;
            sums.2 += l.total;
            steps += 1;
        }
        let feats = self.model.embed(&self.images, EMBED_CHUNK)?;
        self.clusters.update(&feats)?;
        let k = steps as f64;
        let record = EpochRecord {
            epoch: self.epoch,
            stage: self.stage,
            idl: sums.0 / k,
            acl: sums.1 / k,
            total: sums.2 / k,
            num_clusters: self.clusters.num_clusters(),
            lr,
        };
        self.epoch += 1;
        self.log.epochs.push(record.clone());
        Ok(record)
    }

    /// Re-seed the instance bank, then run the configured number of epochs.
    pub fn train_stage(&mut self) -> Result<Vec<EpochRecord>> {
        if self.config.train.epochs_per_stage == 0 {
            return Ok(Vec::new());
        }
        self.instances = InstanceBank::new(self.model.embed(&self.images, EMBED_CHUNK)?)?;
        (0..self.config.train.epochs_per_stage).map(|_| self.train_epoch()).collect()
    }

    fn floor(&self) -> usize {
        self.config.train.min_clusters.unwrap_or_else(|| cluster_floor(self.num_instances())).max(1)
    }

    /// True once merging is enabled and the cluster count reached its floor.
    pub fn at_floor(&self) -> bool {
        self.config.train.merge_fraction > 0.0 && self.clusters.num_clusters() <= self.floor()
    }

    /// Merge `ceil(fraction n)` pairs, never going below the cluster floor.
    pub fn merge(&mut self) -> Result<usize> {
        let n = self.num_instances();
        let floor = self.floor();
        let wanted = merges_per_stage(self.config.train.merge_fraction, n);
        let merges = wanted.min(self.clusters.num_clusters().saturating_sub(floor));
        if merges > 0 {
            self.clusters.merge_step(merges, self.lambda)?;
        }
        Ok(merges)
    }

    /// Train, merge and (with a monitor) evaluate one stage.
    pub fn run_stage(&mut self) -> Result<&StageRecord> {
        self.train_stage()?;
        self.merge()?;
        self.stage += 1;
        let (metrics, score) = match &self.monitor {
            Some(m) => {
                let (metrics, score) = m.measure(&self.model, &self.clusters)?;
                (Some(metrics), score)
            }
            None => (None, None),
        };
        self.log.stages.push(StageRecord {
            stage: self.stage,
            num_clusters: self.clusters.num_clusters(),
            metrics,
            nmi: score,
        });
        Ok(self.log.stages.last().expect("just pushed"))
    }

    /// Alternate training stages and merges until the stage count is reached
    /// or the clusters hit their floor. After each stage a checkpoint is
    /// written to `checkpoint_dir` if given.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<&TrainLog> {
        while self.stage < self.config.train.stages && !self.at_floor() {
            self.run_stage()?;
            if let Some(dir) = checkpoint_dir {
                self.save_checkpoints(dir)?;
            }
        }
        Ok(&self.log)
    }

    /// Write `stageNNN.ckpt` for the current stage and refresh `latest.ckpt`.
    pub fn save_checkpoints(&self, dir: &Path) -> Result<()> {
        let ckpt = self.checkpoint();
        ckpt.save(&dir.join(format!("stage{:03}.ckpt", self.stage)))?;
        ckpt.save(&dir.join(LATEST_CHECKPOINT))
    }

    /// Complete state, including banks, velocity and progress counters.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors = self.model.named_tensors();
        for (p, v) in self.model.store.iter().zip(&self.velocity) {
            tensors.push((format!("velocity/{}", p.name), v.clone()));
        }
        let ints = |v: &[usize]| Tensor::new(vec![v.len()], v.iter().map(|&x| x as f64).collect()).expect("len");
        tensors.push(("instances".into(), self.instances.features().clone()));
        tensors.push(("clusters/centroids".into(), self.clusters.centroids().clone()));
        tensors.push(("clusters/sizes".into(), ints(self.clusters.sizes())));
        tensors.push(("clusters/assignment".into(), ints(self.clusters.assignment())));
        tensors.push(("state/lambda".into(), Tensor::scalar(self.lambda)));
        tensors.push(("state/epoch".into(), Tensor::scalar(self.epoch as f64)));
        tensors.push(("state/stage".into(), Tensor::scalar(self.stage as f64)));
        tensors.push(("log/epochs".into(), log_tensor(&self.log)));
        tensors.push(("log/stages".into(), stages_tensor(&self.log.stages)));
        Checkpoint { config_text: self.config.to_text(), tensors }
    }

    /// Rebuild a trainer from [`Trainer::checkpoint`] output. The checkpoint
    /// must have been written for the same model configuration.
    pub fn resume(config: &RunConfig, images: Tensor, ckpt: &Checkpoint) -> Result<Self> {
        let saved = RunConfig::from_text(&ckpt.config_text)?;
        if saved.model.backbone()? != config.model.backbone()? {
            return Err(Error::integrity("checkpoint was written for a different model configuration"));
        }
        let mut trainer = Trainer::new(config, images)?;
        let get = |name: &str| ckpt.get(name).cloned().ok_or_else(|| Error::integrity(format!("checkpoint lacks {name}")));
        trainer.model.load_named_tensors(&|name| ckpt.get(name).cloned())?;
        for (p, v) in trainer.model.store.iter().zip(trainer.velocity.iter_mut()) {
            let t = get(&format!("velocity/{}", p.name))?;
            if t.shape() != v.shape() {
                return Err(Error::integrity(format!("velocity/{} has the wrong shape", p.name)));
            }
            *v = t;
        }
        let n = trainer.num_instances();
        let instances = get("instances")?;
        if instances.shape() != [n, trainer.instances.dim()] {
            return Err(Error::integrity("instance bank does not match the training set"));
        }
        trainer.instances = InstanceBank::from_unit_rows(instances)?;
        let to_ints = |t: Tensor| -> Vec<usize> { t.data().iter().map(|&x| x as usize).collect() };
        let assignment = to_ints(get("clusters/assignment")?);
        if assignment.len() != n {
            return Err(Error::integrity("cluster assignment does not match the training set"));
        }
        trainer.clusters =
            MemoryBank::restore(get("clusters/centroids")?, to_ints(get("clusters/sizes")?), assignment)?;
        trainer.lambda = get("state/lambda")?.item();
        trainer.epoch = get("state/epoch")?.item() as usize;
        trainer.stage = get("state/stage")?.item() as usize;
        trainer.log = log_from_tensors(&get("log/epochs")?, &get("log/stages")?)?;
        Ok(trainer)
    }
}

const STAGE_FIELDS: usize = 10;

// Tensors cannot be empty, so logs are stored as a count followed by rows.
// Unmeasured values are stored as NaN.
fn stages_tensor(stages: &[StageRecord]) -> Tensor {
    let mut data = vec![stages.len() as f64];
    for r in stages {
        let m = r.metrics.as_ref();
        let f = |g: fn(&Metrics) -> f64| m.map_or(f64::NAN, g);
        data.extend([
            r.stage as f64,
            r.num_clusters as f64,
            f(|m| m.rank1),
            f(|m| m.rank5),
            f(|m| m.rank10),
            f(|m| m.map),
            f(|m| m.num_queries as f64),
            f(|m| m.num_skipped as f64),
            r.nmi.unwrap_or(f64::NAN),
            m.is_some() as u8 as f64,
        ]);
    }
    Tensor::new(vec![data.len()], data).expect("len")
}

fn log_tensor(log: &TrainLog) -> Tensor {
    let mut data = vec![log.epochs.len() as f64];
    for r in &log.epochs {
        data.extend([r.epoch as f64, r.stage as f64, r.idl, r.acl, r.total, r.num_clusters as f64, r.lr]);
    }
    Tensor::new(vec![data.len()], data).expect("len")
}

fn log_from_tensors(epochs: &Tensor, stages: &Tensor) -> Result<TrainLog> {
    let bad = || Error::integrity("malformed training log in checkpoint");
    let e = epochs.data();
    let count = *e.first().ok_or_else(bad)? as usize;
    if e.len() != 1 + 7 * count {
        return Err(bad());
    }
    let records = e[1..]
        .chunks(7)
        .map(|r| EpochRecord {
            epoch: r[0] as usize,
            stage: r[1] as usize,
            idl: r[2],
            acl: r[3],
            total: r[4],
            num_clusters: r[5] as usize,
            lr: r[6],
        })
        .collect();
    let s = stages.data();
    let k = *s.first().ok_or_else(bad)? as usize;
    if s.len() != 1 + STAGE_FIELDS * k {
        return Err(bad());
    }
    let stages = s[1..]
        .chunks(STAGE_FIELDS)
        .map(|r| StageRecord {
            stage: r[0] as usize,
            num_clusters: r[1] as usize,
            metrics: (r[9] != 0.0).then(|| Metrics {
                rank1: r[2],
                rank5: r[3],
                rank10: r[4],
                map: r[5],
                num_queries: r[6] as usize,
                num_skipped: r[7] as usize,
            }),
            nmi: (!r[8].is_nan()).then_some(r[8]),
        })
        .collect();
    Ok(TrainLog { epochs: records, stages })
}
