use log::{debug, info, warn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::data::{PatchBank, Sampler};
use super::{BatchRecord, LossBundle, Result, SampleGrid, TrainConfig, TrainError, TrainReport};
use crate::datapipe::{PatchSet, Slide};
use crate::models::{
    noise_batch, ArchConfig, Autoencoder, Checkpoint, CheckpointMeta, Discriminator, FsVgg, Generator,
    GeneratorInput, ModelError, ModelKind, CLASS_COUNT,
};
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

const EVAL_CHUNK: usize = 256;

const STREAM_INIT: u64 = 0;
const STREAM_LABELED: u64 = 1;
const STREAM_UNLABELED: u64 = 2;
const STREAM_NOISE: u64 = 3;
const STREAM_SAMPLES: u64 = 4;

/// Best D snapshot plus the generator at the last iteration.
#[derive(Clone, Debug)]
pub struct AcganOutcome {
    pub report: TrainReport,
    pub generator: Checkpoint,
    pub samples: Vec<SampleGrid>,
}

struct Banks {
    labeled: PatchBank,
    unlabeled: Option<PatchBank>,
    test: PatchBank,
}

fn banks(arch: &ArchConfig, labeled: &PatchSet, unlabeled: Option<&PatchSet>, test: &PatchSet) -> Result<Banks> {
    if labeled.is_empty() {
        return Err(TrainError::Empty("labeled"));
    }
    if test.is_empty() {
        return Err(TrainError::Empty("test"));
    }
    if unlabeled.is_some_and(|u| u.is_empty()) {
        return Err(TrainError::Empty("unlabeled"));
    }
    let counts = labeled.class_counts();
    let missing: Vec<String> = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| crate::models::ClassLabel::ALL[i].to_string())
        .collect();
    if !missing.is_empty() {
        warn!("labeled patches lack classes: {}", missing.join(", "));
    }
    let b = Banks {
        labeled: PatchBank::from_set(labeled)?,
        unlabeled: unlabeled.map(PatchBank::from_set).transpose()?,
        test: PatchBank::from_set(test)?,
    };
    let sizes = [Some(&b.labeled), b.unlabeled.as_ref(), Some(&b.test)];
    if sizes.iter().flatten().any(|bank| bank.patch_size() != arch.patch_size) {
        return Err(TrainError::Config(format!("patches must be {0}×{0}", arch.patch_size)));
    }
    if (0..b.test.len()).any(|i| b.test.label(i).is_none()) || (0..b.labeled.len()).any(|i| b.labeled.label(i).is_none()) {
        return Err(TrainError::Config("labeled and test patches must all carry labels".into()));
    }
    Ok(b)
}

/// Fraction of test patches whose argmax class matches the label.
fn accuracy(test: &PatchBank, probs: impl Fn(&Tensor) -> Result<Tensor>) -> Result<f64> {
    let mut hits = 0usize;
    let mut start = 0;
    while start < test.len() {
        let end = (start + EVAL_CHUNK).min(test.len());
        let p = probs(&test.range(start, end))?;
        for (row, i) in p.data().chunks_exact(CLASS_COUNT).zip(start..end) {
            let arg = row
                .iter()
                .enumerate()
                .fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
            if Some(arg) == test.label(i).map(|l| l.index()) {
                hits += 1;
            }
        }
        start = end;
    }
    Ok(hits as f64 / test.len() as f64)
}

fn scalar(tape: &Tape, v: Var, iteration: u64, loss: &'static str) -> Result<f64> {
    let x = tape.value(v).data()[0] as f64;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(TrainError::Diverged { iteration, loss })
    }
}

/// Non-finite network outputs surface from the loss ops; report them with
/// the iteration.
fn guard<T>(r: std::result::Result<T, TensorError>, iteration: u64, loss: &'static str) -> Result<T> {
    match r {
        Err(TensorError::NonFinite { .. }) => Err(TrainError::Diverged { iteration, loss }),
        other => Ok(other?),
    }
}

fn labeled_sampler(bank: &PatchBank, cfg: &TrainConfig) -> Sampler {
    if cfg.balance_classes {
        Sampler::balanced(bank, cfg.augment, cfg.stream(STREAM_LABELED))
    } else {
        Sampler::new(bank.len(), cfg.augment, cfg.stream(STREAM_LABELED))
    }
}

fn is_eval_point(i: u64, cfg: &TrainConfig) -> bool {
    i % cfg.eval_every == 0 || i == cfg.iterations
}

/// Tracks the best evaluation; strictly better accuracy replaces it.
struct Selector {
    kind: ModelKind,
    arch: ArchConfig,
    best: Option<Checkpoint>,
}

impl Selector {
    fn snapshot(&self, iteration: u64, accuracy: Option<f64>, params: &ParamStore) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                kind: self.kind,
                arch: self.arch,
                iteration,
                accuracy,
            },
            params: params.clone(),
        }
    }

    fn offer(&mut self, iteration: u64, acc: f64, params: &ParamStore) {
        if self.best.as_ref().is_some_and(|b| b.meta.accuracy.unwrap_or(f64::NEG_INFINITY) >= acc) {
            return;
        }
        self.best = Some(self.snapshot(iteration, Some(acc), params));
    }

    /// Best and final snapshots; the final one carries its own evaluation.
    fn finish(self, iterations: u64, final_acc: Option<f64>, params: &ParamStore) -> (Checkpoint, Checkpoint) {
        let last = self.snapshot(iterations, final_acc, params);
        (self.best.expect("iteration 0 is always evaluated"), last)
    }
}

/// Fully supervised classifier training on labeled patches.
pub fn train_fs(arch: &ArchConfig, labeled: &PatchSet, test: &PatchSet, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate(false)?;
    let banks = banks(arch, labeled, None, test)?;
    let model = FsVgg::new(*arch)?;
    let mut params = model.init_params(&mut cfg.stream(STREAM_INIT))?;
    classifier_loop(ModelKind::FsVgg, arch, &banks, cfg, &mut params, |tape, params, x_lab, _| {
        let logits = model.logits_on_tape(tape, params, x_lab, true, true)?;
        Ok((logits, None))
    })
}

/// Autoencoder semi-supervised training: cross-entropy on the labeled
/// patches plus `recon_weight`·MSE on the whole batch.
pub fn train_ae_ssl(
    arch: &ArchConfig,
    labeled: &PatchSet,
    unlabeled: &PatchSet,
    test: &PatchSet,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate(true)?;
    let banks = banks(arch, labeled, Some(unlabeled), test)?;
    let model = Autoencoder::new(*arch)?;
    let mut params = model.init_params(&mut cfg.stream(STREAM_INIT))?;
    classifier_loop(ModelKind::AeSsl, arch, &banks, cfg, &mut params, |tape, params, x_lab, full| {
        let logits = model.classifier().logits_on_tape(tape, params, x_lab, true, true)?;
        // Encoder running statistics follow the classification pass; the
        // decoder's come from the reconstruction pass, its only user.
        let keep = tape.take_buffer_updates();
        let full = full.expect("semi-supervised batches carry unlabeled patches");
        let x_full = tape.constant(full.clone());
        let recon = model.reconstruct_on_tape(tape, params, x_full, true, true)?;
        let decoder: Vec<_> = tape
            .take_buffer_updates()
            .into_iter()
            .filter(|(name, _)| !keep.iter().any(|(k, _)| k == name))
            .collect();
        for (name, value) in keep.into_iter().chain(decoder) {
            tape.queue_buffer_update(name, value);
        }
        let mse = tape.mse(recon, full)?;
        Ok((logits, Some(mse)))
    })
}

type StepResult = std::result::Result<(Var, Option<Var>), ModelError>;

/// Shared loop for the classifier modes. `forward` records the labeled
/// logits and, for the autoencoder, the reconstruction loss on the full batch.
fn classifier_loop(
    kind: ModelKind,
    arch: &ArchConfig,
    banks: &Banks,
    cfg: &TrainConfig,
    params: &mut ParamStore,
    mut forward: impl FnMut(&mut Tape, &ParamStore, Var, Option<&Tensor>) -> StepResult,
) -> Result<TrainReport> {
    let adam = cfg.adam();
    let model = FsVgg::new(*arch)?;
    let mut lab = labeled_sampler(&banks.labeled, cfg);
    let mut unl = banks
        .unlabeled
        .as_ref()
        .map(|u| Sampler::new(u.len(), cfg.augment, cfg.stream(STREAM_UNLABELED)));
    let mut selector = Selector {
        kind,
        arch: *arch,
        best: None,
    };
    let eval = |params: &ParamStore| accuracy(&banks.test, |x| Ok(flatten(model.class_probs_grid(params, x)?)?));
    let acc0 = eval(params)?;
    selector.offer(0, acc0, params);
    let mut trace = vec![LossBundle {
        test_accuracy: Some(acc0),
        ..LossBundle::default()
    }];
    let mut batches = Vec::new();
    info!("{kind}: iteration 0 validation accuracy {acc0:.4}");

    for it in 1..=cfg.iterations {
        let lab_picks = lab.next_batch(cfg.labeled_batch);
        let x_lab_t = banks.labeled.batch(&lab_picks);
        let targets = banks.labeled.class_indices(&lab_picks)?;
        let unl_picks = match (&mut unl, &banks.unlabeled) {
            (Some(s), Some(_)) => s.next_batch(cfg.unlabeled_batch),
            _ => Vec::new(),
        };
        let full = banks
            .unlabeled
            .as_ref()
            .map(|u| Tensor::concat0(&[&x_lab_t, &u.batch(&unl_picks)]))
            .transpose()?;

        let mut tape = Tape::new();
        let x_lab = tape.constant(x_lab_t);
        let (logits, recon) = forward(&mut tape, params, x_lab, full.as_ref())?;
        let n = targets.len();
        let logits = tape.reshape(logits, [n, CLASS_COUNT])?;
        let ce = guard(tape.softmax_cross_entropy(logits, &targets), it, "class")?;
        let l_c = scalar(&tape, ce, it, "class")?;
        let (loss, recon_value) = match recon {
            Some(mse) => {
                let r = scalar(&tape, mse, it, "reconstruction")?;
                let weighted = tape.scale(mse, cfg.recon_weight);
                (tape.add(ce, weighted)?, Some(r))
            }
            None => (ce, None),
        };
        let grads = tape.backward(loss)?;
        grads.accumulate_into(&tape, params)?;
        tape.flush_buffers_into(params)?;
        params.adam_step(&adam)?;

        let mut row = LossBundle {
            iteration: it,
            l_s: None,
            l_c: Some(l_c),
            recon: recon_value,
            d_objective: Some(l_c),
            g_objective: None,
            test_accuracy: None,
        };
        if is_eval_point(it, cfg) {
            let acc = eval(params)?;
            selector.offer(it, acc, params);
            row.test_accuracy = Some(acc);
            info!("{kind}: iteration {it} loss {l_c:.4} validation accuracy {acc:.4}");
        }
        debug!("{kind}: iteration {it} L_C {l_c:.5}");
        trace.push(row);
        if cfg.record_batches {
            batches.push(BatchRecord {
                iteration: it,
                labeled: lab_picks,
                unlabeled: unl_picks,
            });
        }
    }
    let final_acc = trace.last().and_then(|r| r.test_accuracy);
    let (best, last) = selector.finish(cfg.iterations, final_acc, params);
    Ok(TrainReport {
        best,
        last,
        trace,
        batches,
    })
}

fn flatten(grid: Tensor) -> std::result::Result<Tensor, TensorError> {
    let n = grid.shape()[0];
    grid.reshape([n, CLASS_COUNT])
}

fn uniform_classes(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..CLASS_COUNT)).collect()
}

/// Alternating AC-GAN training. Each iteration takes one discriminator
/// step on real (labeled + unlabeled) and generated patches, then one
/// generator step on fresh samples. The discriminator is model-selected by
/// validation accuracy; the generator is returned as of the last step.
pub fn train_acgan(
    arch: &ArchConfig,
    labeled: &PatchSet,
    unlabeled: &PatchSet,
    test: &PatchSet,
    cfg: &TrainConfig,
) -> Result<AcganOutcome> {
    cfg.validate(true)?;
    let banks = banks(arch, labeled, Some(unlabeled), test)?;
    let unl_bank = banks.unlabeled.as_ref().expect("checked above");
    let adam = cfg.adam();
    let d = Discriminator::new(*arch)?;
    let g = Generator::new(*arch)?;
    let mut init = cfg.stream(STREAM_INIT);
    let mut d_params = d.init_params(&mut init)?;
    let mut g_params = g.init_params(&mut init)?;
    let mut lab = labeled_sampler(&banks.labeled, cfg);
    let mut unl = Sampler::new(unl_bank.len(), cfg.augment, cfg.stream(STREAM_UNLABELED));
    let mut noise = cfg.stream(STREAM_NOISE);
    let fixed_inputs = sample_inputs(arch, cfg);

    let n_lab = cfg.labeled_batch;
    let n_real = n_lab + cfg.unlabeled_batch;
    let n_fake = n_real;
    let src_targets: Vec<f32> = (0..n_real + n_fake).map(|i| if i < n_real { 1.0 } else { 0.0 }).collect();
    let ones = vec![1.0f32; n_fake];

    let mut selector = Selector {
        kind: ModelKind::AcganDiscriminator,
        arch: *arch,
        best: None,
    };
    let eval = |params: &ParamStore| accuracy(&banks.test, |x| Ok(d.evaluate(params, x)?.class_probs));
    let acc0 = eval(&d_params)?;
    selector.offer(0, acc0, &d_params);
    let mut trace = vec![LossBundle {
        test_accuracy: Some(acc0),
        ..LossBundle::default()
    }];
    let mut batches = Vec::new();
    let mut samples = Vec::new();
    if cfg.samples_per_class > 0 {
        samples.push(mosaic(&g, &g_params, &fixed_inputs, cfg.samples_per_class, arch.patch_size, 0)?);
    }
    info!("acgan: iteration 0 validation accuracy {acc0:.4}");

    for it in 1..=cfg.iterations {
        // Discriminator step.
        let lab_picks = lab.next_batch(n_lab);
        let unl_picks = unl.next_batch(cfg.unlabeled_batch);
        let targets = banks.labeled.class_indices(&lab_picks)?;
        let z = noise_batch(&mut noise, n_fake, arch.noise_dim);
        let fake_classes = uniform_classes(&mut noise, n_fake);
        let fake = {
            let mut tape = Tape::new();
            let out = g.forward_on_tape(&mut tape, &g_params, &z, &fake_classes, true, false)?;
            tape.value(out).clone()
        };
        let x = Tensor::concat0(&[&banks.labeled.batch(&lab_picks), &unl_bank.batch(&unl_picks), &fake])?;
        let mut tape = Tape::new();
        let x = tape.constant(x);
        let (src, cls) = d.forward_on_tape(&mut tape, &d_params, x, true, true)?;
        let ls = guard(tape.binary_cross_entropy(src, &src_targets), it, "source")?;
        let cls_real = tape.slice_rows(cls, 0, n_lab)?;
        let ce_real = guard(tape.softmax_cross_entropy(cls_real, &targets), it, "class")?;
        let cls_fake = tape.slice_rows(cls, n_real, n_real + n_fake)?;
        let ce_fake = guard(tape.softmax_cross_entropy(cls_fake, &fake_classes), it, "class")?;
        let lc = tape.add(ce_real, ce_fake)?;
        let d_loss = tape.add(ls, lc)?;
        let l_s = scalar(&tape, ls, it, "source")?;
        let l_c = scalar(&tape, lc, it, "class")?;
        let d_obj = scalar(&tape, d_loss, it, "discriminator")?;
        let grads = tape.backward(d_loss)?;
        grads.accumulate_into(&tape, &mut d_params)?;
        tape.flush_buffers_into(&mut d_params)?;
        d_params.adam_step(&adam)?;

        // Generator step: fakes should read as real and as their class.
        let g_obj = if cfg.freeze_generator {
            None
        } else {
            let z = noise_batch(&mut noise, n_fake, arch.noise_dim);
            let classes = uniform_classes(&mut noise, n_fake);
            let mut tape = Tape::new();
            let fake = g.forward_on_tape(&mut tape, &g_params, &z, &classes, true, true)?;
            let (src, cls) = d.forward_on_tape(&mut tape, &d_params, fake, false, false)?;
            let ls = guard(tape.binary_cross_entropy(src, &ones), it, "generator source")?;
            let lc = guard(tape.softmax_cross_entropy(cls, &classes), it, "generator class")?;
            let g_loss = tape.add(ls, lc)?;
            let value = scalar(&tape, g_loss, it, "generator")?;
            let grads = tape.backward(g_loss)?;
            grads.accumulate_into(&tape, &mut g_params)?;
            tape.flush_buffers_into(&mut g_params)?;
            g_params.adam_step(&adam)?;
            Some(value)
        };

        let mut row = LossBundle {
            iteration: it,
            l_s: Some(l_s),
            l_c: Some(l_c),
            recon: None,
            d_objective: Some(d_obj),
            g_objective: g_obj,
            test_accuracy: None,
        };
        if is_eval_point(it, cfg) {
            let acc = eval(&d_params)?;
            selector.offer(it, acc, &d_params);
            row.test_accuracy = Some(acc);
            if cfg.samples_per_class > 0 {
                samples.push(mosaic(&g, &g_params, &fixed_inputs, cfg.samples_per_class, arch.patch_size, it)?);
            }
            info!("acgan: iteration {it} L_S {l_s:.4} L_C {l_c:.4} validation accuracy {acc:.4}");
        }
        debug!("acgan: iteration {it} L_S {l_s:.5} L_C {l_c:.5} G {g_obj:?}");
        trace.push(row);
        if cfg.record_batches {
            batches.push(BatchRecord {
                iteration: it,
                labeled: lab_picks,
                unlabeled: unl_picks,
            });
        }
    }

    let final_acc = trace.last().and_then(|r| r.test_accuracy);
    let (best, last) = selector.finish(cfg.iterations, final_acc, &d_params);
    Ok(AcganOutcome {
        report: TrainReport {
            best,
            last,
            trace,
            batches,
        },
        generator: Checkpoint {
            meta: CheckpointMeta {
                kind: ModelKind::AcganGenerator,
                arch: *arch,
                iteration: cfg.iterations,
                accuracy: None,
            },
            params: g_params,
        },
        samples,
    })
}

/// Fixed noise for the sample mosaics, class-major.
fn sample_inputs(arch: &ArchConfig, cfg: &TrainConfig) -> Vec<GeneratorInput> {
    let mut rng = cfg.stream(STREAM_SAMPLES);
    crate::models::ClassLabel::ALL
        .iter()
        .flat_map(|&c| (0..cfg.samples_per_class).map(move |_| c))
        .map(|c| GeneratorInput::sample(&mut rng, arch.noise_dim, c))
        .collect()
}

fn mosaic(g: &Generator, params: &ParamStore, inputs: &[GeneratorInput], per_class: usize, p: usize, iteration: u64) -> Result<SampleGrid> {
    let images = g.generate(params, inputs)?;
    let (w, h) = (per_class * p, CLASS_COUNT * p);
    let mut image = Slide::filled(format!("samples_{iteration:06}"), w, h, [0, 0, 0]);
    let plane = p * p;
    for (n, chw) in images.data().chunks_exact(3 * plane).enumerate() {
        let (ox, oy) = ((n % per_class) * p, (n / per_class) * p);
        for y in 0..p {
            for x in 0..p {
                let px = |c: usize| ((chw[c * plane + y * p + x] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                image.set_rgb(ox + x, oy + y, [px(0), px(1), px(2)]);
            }
        }
    }
    Ok(SampleGrid { iteration, image })
}

/// Fraction of `real` judged real plus fresh generator samples (training-mode
/// batch statistics, as the discriminator sees them) judged fake.
pub fn discriminator_source_accuracy(
    arch: &ArchConfig,
    d_params: &ParamStore,
    g_params: &ParamStore,
    real: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let d = Discriminator::new(*arch)?;
    let g = Generator::new(*arch)?;
    let n = real.shape()[0];
    let z = noise_batch(rng, n, arch.noise_dim);
    let classes = uniform_classes(rng, n);
    let mut tape = Tape::new();
    let fake = g.forward_on_tape(&mut tape, g_params, &z, &classes, true, false)?;
    let fake = tape.value(fake).clone();
    let real_p = d.evaluate(d_params, real)?.source_prob;
    let fake_p = d.evaluate(d_params, &fake)?.source_prob;
    let correct = real_p.iter().filter(|&&p| p > 0.5).count() + fake_p.iter().filter(|&&p| p <= 0.5).count();
    Ok(correct as f64 / (2 * n) as f64)
}
