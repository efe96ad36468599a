//! Training loop, evaluation and sweeps.
//!
//! One step runs two encoder passes: the classification stream sees the full
//! image in the classification modality, the reconstruction stream sees the
//! visible patches of the masked modality and the decoder predicts every
//! reconstruction target. A single backward pass over the joint loss drives
//! one optimizer update.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::autodiff::{Graph, Var};
use crate::config::{ConfigurationTriplet, ExperimentConfig, Modality, TaskKind};
use crate::data::{split, Dataset, Label};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, macro_roc, RocPoint};
use crate::model::{classify, decode, encode, BoundParams, LssatModel, Mode, Stream};
use crate::objectives::{
    average_losses_graph, classification_loss_graph, cosine_lr, joint_loss_graph,
    reconstruction_loss_graph, Sgd,
};
use crate::patch::{gather_visible, patchify, sample_mask, ImageTensor};
use crate::report::{LossBreakdown, RunReport, SweepGrid};
use crate::rng::RngKey;
use crate::texture::ldp_tensor;

/// Per-channel statistics used to standardize every model input and
/// reconstruction target (the usual ImageNet constants).
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// `(x - mean) / std` per channel.
pub fn standardize(x: &ImageTensor) -> ImageTensor {
    let mut out = x.clone();
    if x.channels != 3 {
        return out;
    }
    for b in 0..x.batch {
        for t in 0..x.frames {
            for c in 0..3 {
                for v in out.plane_mut(b, t, c) {
                    *v = (*v - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
                }
            }
        }
    }
    out
}

/// Standardized RGB images with their LDP counterpart computed on demand.
struct Views {
    rgb: ImageTensor,
    ldp: Option<ImageTensor>,
}

impl Views {
    fn new(rgb: &ImageTensor, needed: &[Modality], k: usize) -> Result<Self> {
        let ldp = if needed.contains(&Modality::Ldp) {
            Some(standardize(&ldp_tensor(rgb, k)?))
        } else {
            None
        };
        Ok(Self {
            rgb: standardize(rgb),
            ldp,
        })
    }

    fn get(&self, m: Modality) -> &ImageTensor {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Ldp => self.ldp.as_ref().expect("LDP view computed"),
        }
    }
}

fn modalities_used(t: &ConfigurationTriplet) -> Vec<Modality> {
    let mut m = vec![t.mask, t.classify];
    m.extend(&t.reconstruct);
    m
}

/// Class indices for cross-entropy. Multi-attribute labels become one
/// two-way target per attribute, matching `[N * K, 2]` logits.
fn class_targets(labels: &[Label]) -> Vec<usize> {
    labels
        .iter()
        .flat_map(|l| match l {
            Label::Class(c) => vec![*c],
            Label::Attributes(a) => a.iter().map(|&b| usize::from(b)).collect(),
        })
        .collect()
}

fn logits_for_loss(g: &mut Graph, logits: Var, task: TaskKind) -> Result<Var> {
    match task {
        TaskKind::Multiclass => Ok(logits),
        TaskKind::MultiAttribute => {
            let n: usize = g.value(logits).numel();
            g.reshape(logits, vec![n / 2, 2])
        }
    }
}

struct Forward {
    graph: Graph,
    params: Vec<Var>,
    loss: Var,
    breakdown: LossBreakdown,
}

/// Joint-loss graph node plus its classification and reconstruction parts,
/// built on parameters already bound into `g`.
pub fn build_joint_loss(
    g: &mut Graph,
    model: &LssatModel,
    bound: &BoundParams,
    images: &ImageTensor,
    labels: &[Label],
    cfg: &ExperimentConfig,
    key: RngKey,
) -> Result<(Var, Var, Var)> {
    let t = &cfg.triplet;
    let views = Views::new(images, &modalities_used(t), cfg.k)?;
    let p = cfg.patch_size;

    let enc_c = model.encoder_vars(bound, Stream::Classification)?;
    let head = model.head_vars(bound)?;
    let x_c = g.constant(patchify(views.get(t.classify), p)?.to_tensor());
    let z_c = encode(g, &enc_c, x_c, None, Mode::Train(key.stream("cls")), cfg.drop_path)?;
    let logits = classify(g, &head, z_c)?;
    let logits = logits_for_loss(g, logits, cfg.task)?;
    let l_cls = classification_loss_graph(g, logits, &class_targets(labels))?;

    let masked_in = patchify(views.get(t.mask), p)?;
    let plan = sample_mask(images.batch, masked_in.tokens, cfg.mask_ratio, key.stream("mask"))?;
    let enc_r = model.encoder_vars(bound, Stream::Reconstruction)?;
    let dec = model.decoder_vars(bound)?;
    let x_r = g.constant(gather_visible(&masked_in, &plan)?.to_tensor());
    let z_r = encode(
        g,
        &enc_r,
        x_r,
        Some(&plan.visible),
        Mode::Train(key.stream("rec")),
        cfg.drop_path,
    )?;
    let mut rec_losses = Vec::new();
    for (m, pred) in decode(g, &dec, z_r, &plan)? {
        let target = g.constant(patchify(views.get(m), p)?.to_tensor());
        rec_losses.push(reconstruction_loss_graph(g, pred, target, &plan)?);
    }
    let l_rec = average_losses_graph(g, &rec_losses)?;
    let loss = joint_loss_graph(g, l_cls, l_rec, cfg.lambda)?;
    Ok((loss, l_cls, l_rec))
}

fn forward(
    model: &LssatModel,
    images: &ImageTensor,
    labels: &[Label],
    cfg: &ExperimentConfig,
    key: RngKey,
) -> Result<Forward> {
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g);
    let (loss, l_cls, l_rec) = build_joint_loss(&mut g, model, &bound, images, labels, cfg, key)?;
    let item = |v: Var| g.value(v).item().expect("scalar loss");
    let breakdown = LossBreakdown {
        classification: item(l_cls),
        reconstruction: item(l_rec),
        joint: item(loss),
    };
    if !breakdown.joint.is_finite() {
        return Err(Error::NumericFailure(format!(
            "joint loss {} (classification {}, reconstruction {})",
            breakdown.joint, breakdown.classification, breakdown.reconstruction
        )));
    }
    Ok(Forward {
        params: bound.vars().to_vec(),
        graph: g,
        loss,
        breakdown,
    })
}

/// Losses of one training-mode forward pass, without updating anything.
/// With the same `key`, masks and drop-path draws match [`train_step`].
pub fn step_losses(
    model: &LssatModel,
    images: &ImageTensor,
    labels: &[Label],
    cfg: &ExperimentConfig,
    key: RngKey,
) -> Result<LossBreakdown> {
    Ok(forward(model, images, labels, cfg, key)?.breakdown)
}

/// Model plus optimizer state and schedule position.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: LssatModel,
    pub optimizer: Sgd,
    pub step: usize,
    pub total_steps: usize,
}

impl TrainState {
    pub fn new(model: LssatModel, cfg: &ExperimentConfig, total_steps: usize) -> Self {
        Self {
            model,
            optimizer: Sgd::new(cfg.momentum, cfg.weight_decay),
            step: 0,
            total_steps,
        }
    }
}

/// One forward/backward/update. Returns the losses before the update.
pub fn train_step(
    state: &mut TrainState,
    images: &ImageTensor,
    labels: &[Label],
    cfg: &ExperimentConfig,
    key: RngKey,
) -> Result<LossBreakdown> {
    let lr = cosine_lr(
        state.step.min(state.total_steps),
        state.total_steps,
        cfg.lr_max,
        cfg.lr_min,
    )?;
    let fwd = forward(&state.model, images, labels, cfg, key)?;
    let mut grads = fwd.graph.backward(fwd.loss)?;
    let grads: Vec<_> = fwd
        .params
        .iter()
        .map(|&v| grads.take(v).expect("gradient for every parameter"))
        .collect();
    if grads.iter().any(|t| !t.is_finite()) {
        return Err(Error::NumericFailure(format!(
            "non-finite gradient at step {}",
            state.step
        )));
    }
    state.optimizer.step(state.model.params_mut(), &grads, lr)?;
    state.step += 1;
    Ok(fwd.breakdown)
}

/// Per-sample class probabilities (softmax over each two-way head for
/// multi-attribute tasks), computed in eval mode.
pub fn predict(model: &LssatModel, cfg: &ExperimentConfig, images: &ImageTensor) -> Result<Vec<Vec<f64>>> {
    let views = Views::new(images, &[cfg.triplet.classify], cfg.k)?;
    let logits = model.predict_logits(views.get(cfg.triplet.classify))?;
    let k = logits.shape()[1];
    let group = match cfg.task {
        TaskKind::Multiclass => k,
        TaskKind::MultiAttribute => 2,
    };
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            row.chunks(group)
                .flat_map(|g| {
                    let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = g.iter().map(|v| (v - max).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.into_iter().map(move |v| v / s)
                })
                .collect()
        })
        .collect())
}

/// Test-set metrics of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_class_accuracy: Vec<Option<f64>>,
    pub average_accuracy: f64,
    pub roc: Vec<RocPoint>,
    pub auc: Option<f64>,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

pub fn evaluate(model: &LssatModel, cfg: &ExperimentConfig, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut probs = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(cfg.batch_size.max(1) * 4) {
        let (images, _) = data.batch(chunk)?;
        probs.extend(predict(model, cfg, &images)?);
    }
    let labels: Vec<&Label> = data.samples.iter().map(|s| &s.label).collect();
    let (per_class, average, scores, positive): (_, _, Vec<Vec<f64>>, Vec<Vec<bool>>) = match data.task {
        TaskKind::Multiclass => {
            let y: Vec<usize> = labels
                .iter()
                .map(|l| match l {
                    Label::Class(c) => *c,
                    Label::Attributes(_) => unreachable!("multiclass dataset"),
                })
                .collect();
            let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
            let acc = accuracy(&pred, &y, data.num_classes)?;
            // Binary ROC scores the positive class only.
            let classes: Vec<usize> = if data.num_classes == 2 {
                vec![1]
            } else {
                (0..data.num_classes).collect()
            };
            let scores = classes.iter().map(|&c| probs.iter().map(|p| p[c]).collect()).collect();
            let positive = classes.iter().map(|&c| y.iter().map(|&l| l == c).collect()).collect();
            (acc.per_class, acc.average, scores, positive)
        }
        TaskKind::MultiAttribute => {
            let k = data.num_classes;
            let bits: Vec<&Vec<bool>> = labels
                .iter()
                .map(|l| match l {
                    Label::Attributes(a) => a,
                    Label::Class(_) => unreachable!("multi-attribute dataset"),
                })
                .collect();
            let per_class: Vec<Option<f64>> = (0..k)
                .map(|a| {
                    let correct = probs
                        .iter()
                        .zip(&bits)
                        .filter(|(p, b)| (p[2 * a + 1] > p[2 * a]) == b[a])
                        .count();
                    Some(correct as f64 / probs.len() as f64)
                })
                .collect();
            let average = per_class.iter().flatten().sum::<f64>() / k as f64;
            let scores = (0..k).map(|a| probs.iter().map(|p| p[2 * a + 1]).collect()).collect();
            let positive = (0..k).map(|a| bits.iter().map(|b| b[a]).collect()).collect();
            (per_class, average, scores, positive)
        }
    };
    let (roc, auc) = match macro_roc(&scores, &positive) {
        Ok((roc, auc)) => (roc, Some(auc)),
        Err(Error::SingleClass) => (Vec::new(), None),
        Err(e) => return Err(e),
    };
    Ok(Evaluation {
        per_class_accuracy: per_class,
        average_accuracy: average,
        roc,
        auc,
    })
}

fn check_dataset(cfg: &ExperimentConfig, data: &Dataset) -> Result<()> {
    if data.task != cfg.task || data.num_classes != cfg.num_classes {
        return Err(Error::Config(format!(
            "dataset is {:?} with {} outputs, config expects {:?} with {}",
            data.task, data.num_classes, cfg.task, cfg.num_classes
        )));
    }
    match data.resolution() {
        Some((h, w)) if h == cfg.image_size && w == cfg.image_size => Ok(()),
        Some((h, w)) => Err(Error::InconsistentDims(format!(
            "dataset images are {h}x{w}, config expects {}",
            cfg.image_size
        ))),
        None => Err(Error::EmptySplit("dataset")),
    }
}

/// Trains with seeded shuffling for the configured epochs, then evaluates on
/// the test split. Bit-identical for a fixed config and dataset.
pub fn run_experiment(cfg: &ExperimentConfig, data: &Dataset) -> Result<(RunReport, LssatModel)> {
    let start = Instant::now();
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let parts = split(data.len(), cfg.split, cfg.seed)?;
    let train = data.subset(&parts.train);
    let test = data.subset(&parts.test);

    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut state = TrainState::new(
        LssatModel::from_config(cfg)?,
        cfg,
        cfg.epochs * steps_per_epoch,
    );
    let root = RngKey::new(cfg.seed);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut root.stream("shuffle").child(epoch as u64).rng());
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let (images, labels) = train.batch(batch)?;
            let key = root.stream("step").child(state.step as u64);
            let l = train_step(&mut state, &images, &labels, cfg, key)?;
            sum.classification += l.classification;
            sum.reconstruction += l.reconstruction;
            sum.joint += l.joint;
        }
        let n = steps_per_epoch as f64;
        epoch_losses.push(LossBreakdown {
            classification: sum.classification / n,
            reconstruction: sum.reconstruction / n,
            joint: sum.joint / n,
        });
    }

    let eval = evaluate(&state.model, cfg, &test)?;
    let report = RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        per_class_accuracy: eval.per_class_accuracy,
        average_accuracy: eval.average_accuracy,
        roc: eval.roc,
        auc: eval.auc,
        final_losses: epoch_losses.last().copied().unwrap_or_default(),
        epoch_losses,
        train_size: train.len(),
        test_size: test.len(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((report, state.model))
}

/// Evaluates a trained model on the test split `cfg` selects from `data`.
/// The report carries no training losses.
pub fn evaluate_split(model: &LssatModel, cfg: &ExperimentConfig, data: &Dataset) -> Result<RunReport> {
    let start = Instant::now();
    cfg.validate()?;
    check_dataset(cfg, data)?;
    let parts = split(data.len(), cfg.split, cfg.seed)?;
    let eval = evaluate(model, cfg, &data.subset(&parts.test))?;
    Ok(RunReport {
        config: cfg.clone(),
        seed: cfg.seed,
        per_class_accuracy: eval.per_class_accuracy,
        average_accuracy: eval.average_accuracy,
        roc: eval.roc,
        auc: eval.auc,
        final_losses: LossBreakdown::default(),
        epoch_losses: Vec::new(),
        train_size: parts.train.len(),
        test_size: parts.test.len(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Test accuracy of the best single classifier on mean image intensity:
/// a fitted threshold for two classes, nearest class mean otherwise.
pub fn mean_intensity_baseline(cfg: &ExperimentConfig, data: &Dataset) -> Result<f64> {
    if data.task != TaskKind::Multiclass {
        return Err(Error::Config("intensity baseline needs a multiclass task".into()));
    }
    let parts = split(data.len(), cfg.split, cfg.seed)?;
    let feature = |i: usize| {
        let v = &data.samples[i].image.values;
        v.iter().sum::<f64>() / v.len() as f64
    };
    let label = |i: usize| match data.samples[i].label {
        Label::Class(c) => c,
        Label::Attributes(_) => unreachable!("multiclass dataset"),
    };
    let train: Vec<(f64, usize)> = parts.train.iter().map(|&i| (feature(i), label(i))).collect();
    let classifier: Box<dyn Fn(f64) -> usize> = if data.num_classes == 2 {
        let mut xs: Vec<f64> = train.iter().map(|t| t.0).collect();
        xs.sort_by(f64::total_cmp);
        let mut cuts = vec![f64::NEG_INFINITY];
        cuts.extend(xs.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        let y: Vec<usize> = train.iter().map(|t| t.1).collect();
        let (mut cut, mut flip, mut best) = (f64::NEG_INFINITY, false, f64::NEG_INFINITY);
        for &c in &cuts {
            for f in [false, true] {
                let pred: Vec<usize> = train.iter().map(|&(x, _)| usize::from((x > c) != f)).collect();
                let acc = accuracy(&pred, &y, 2)?.average;
                if acc > best {
                    (cut, flip, best) = (c, f, acc);
                }
            }
        }
        Box::new(move |x| usize::from((x > cut) != flip))
    } else {
        let mut sums = vec![(0.0, 0usize); data.num_classes];
        for &(x, y) in &train {
            sums[y].0 += x;
            sums[y].1 += 1;
        }
        let means: Vec<f64> = sums
            .iter()
            .map(|&(s, n)| if n > 0 { s / n as f64 } else { f64::INFINITY })
            .collect();
        Box::new(move |x| {
            let d: Vec<f64> = means.iter().map(|m| -(x - m).abs()).collect();
            argmax(&d)
        })
    };
    let pred: Vec<usize> = parts.test.iter().map(|&i| classifier(feature(i))).collect();
    let y: Vec<usize> = parts.test.iter().map(|&i| label(i)).collect();
    Ok(accuracy(&pred, &y, data.num_classes)?.average)
}

/// Runs every (triplet, preset) cell of `base` on `data`, at most `jobs`
/// cells at a time. Each cell uses the base seed, so results do not depend on
/// scheduling.
pub fn run_sweep(
    base: &ExperimentConfig,
    triplets: &[ConfigurationTriplet],
    presets: &[String],
    data: &Dataset,
    jobs: usize,
) -> Result<SweepGrid> {
    let cells: Vec<(usize, usize)> = (0..presets.len())
        .flat_map(|p| (0..triplets.len()).map(move |t| (t, p)))
        .collect();
    let run = |&(t, p): &(usize, usize)| -> Result<(usize, usize, RunReport)> {
        let cfg = ExperimentConfig {
            triplet: triplets[t].clone(),
            preset: presets[p].clone(),
            ..base.clone()
        };
        Ok((t, p, run_experiment(&cfg, data)?.0))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| cells.par_iter().map(run).collect::<Result<_>>())?;
    let mut grid = SweepGrid::new(triplets.to_vec(), presets.to_vec());
    for (t, p, r) in results {
        grid.set(t, p, r);
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SplitFractions;
    use crate::data::generate_synthetic;

    #[test]
    fn standardize_per_channel() {
        let x = ImageTensor::from_values([1, 1, 3, 1, 2], vec![0.485, 0.714, 0.456, 0.0, 0.406, 1.0]).unwrap();
        let y = standardize(&x);
        let expect = [0.0, 1.0, 0.0, -0.456 / 0.224, 0.0, 0.594 / 0.225];
        for (a, b) in y.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let gray = ImageTensor::from_values([1, 1, 1, 1, 1], vec![0.3]).unwrap();
        assert_eq!(standardize(&gray), gray);
    }

    pub(crate) fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            image_size: 16,
            epochs: 1,
            batch_size: 4,
            ..ExperimentConfig::desk_scale()
        }
    }

    #[test]
    fn targets_flatten_attributes() {
        let labels = [Label::Attributes(vec![true, false]), Label::Attributes(vec![false, true])];
        assert_eq!(class_targets(&labels), vec![1, 0, 0, 1]);
    }

    #[test]
    fn run_is_deterministic() {
        let cfg = tiny_config();
        let data = generate_synthetic(6, 2, 16, 1).unwrap();
        let (a, ma) = run_experiment(&cfg, &data).unwrap();
        let (b, mb) = run_experiment(&cfg, &data).unwrap();
        assert_eq!(a.without_timing(), b.without_timing());
        assert_eq!(ma, mb);
        assert_eq!(a.train_size + a.test_size, 12);
    }

    #[test]
    fn zero_epochs_reports_initial_model() {
        let cfg = ExperimentConfig {
            epochs: 0,
            ..tiny_config()
        };
        let data = generate_synthetic(10, 2, 16, 2).unwrap();
        let (r, m) = run_experiment(&cfg, &data).unwrap();
        assert!(r.epoch_losses.is_empty());
        assert_eq!(m, LssatModel::from_config(&cfg).unwrap());
        assert!((0.0..=1.0).contains(&r.average_accuracy));
    }

    #[test]
    fn lambda_one_leaves_decoder_untouched() {
        let cfg = ExperimentConfig {
            lambda: 1.0,
            weight_decay: 0.0,
            ..tiny_config()
        };
        let data = generate_synthetic(2, 2, 16, 3).unwrap();
        let model = LssatModel::from_config(&cfg).unwrap();
        let mut state = TrainState::new(model.clone(), &cfg, 10);
        let (images, labels) = data.batch(&[0, 1, 2, 3]).unwrap();
        train_step(&mut state, &images, &labels, &cfg, RngKey::new(0)).unwrap();
        let after = state.model.params();
        for (name, t) in model.params().names().iter().zip(model.params().tensors()) {
            if name.starts_with("decoder.") {
                assert_eq!(after.get(name).unwrap(), t, "{name}");
            }
        }
        assert_ne!(after.get("head.weight"), model.params().get("head.weight"));
    }

    #[test]
    fn dataset_mismatch_rejected() {
        let cfg = tiny_config();
        let data = generate_synthetic(4, 3, 16, 0).unwrap();
        assert!(run_experiment(&cfg, &data).is_err());
        let data = generate_synthetic(4, 2, 32, 0).unwrap();
        assert!(run_experiment(&cfg, &data).is_err());
        let cfg = ExperimentConfig {
            split: SplitFractions {
                train: 1.0,
                val: 0.0,
                test: 0.0,
            },
            ..tiny_config()
        };
        let data = generate_synthetic(4, 2, 16, 0).unwrap();
        assert!(matches!(run_experiment(&cfg, &data), Err(Error::EmptySplit("test"))));
    }

    #[test]
    fn baseline_is_near_chance_on_textures() {
        let cfg = ExperimentConfig::desk_scale();
        let data = generate_synthetic(100, 2, 32, 5).unwrap();
        assert!(mean_intensity_baseline(&cfg, &data).unwrap() <= 0.65);
    }
}
