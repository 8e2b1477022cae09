//! Adam optimization and the supervised finetuning loop: cross-entropy on
//! labeled windows with early stopping on validation Macro F1.

use crate::adf::{predict_window_probs, LabeledWindows};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernel::Real;
use crate::metrics;
use crate::model::TransAppModel;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam over the model's parameters in visit order. Parameters that receive
/// no gradient in a step (an unused head, say) are left untouched.
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &TransAppModel<T>, cfg: AdamConfig) -> Self {
        let mut m = Vec::new();
        model.visit_params(&mut |_, t| m.push(Tensor::zeros(t.shape())));
        let v = m.clone();
        Adam { cfg, step: 0, m, v }
    }

    /// Consume the gradients of `param_ids` (bind order == visit order) and
    /// update the model in place.
    pub fn step(
        &mut self,
        g: &mut Graph<T>,
        model: &mut TransAppModel<T>,
        param_ids: &[NodeId],
    ) -> Result<()> {
        let grads: Vec<Option<Tensor<T>>> =
            param_ids.iter().map(|&id| g.take_grad(id)).collect();
        if grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "optimizer built for {} parameters, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - self.cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.cfg.beta2.powi(self.step as i32);
        let lr = T::from_f64(self.cfg.lr);
        let b1 = T::from_f64(self.cfg.beta1);
        let nb1 = T::from_f64(1.0 - self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let nb2 = T::from_f64(1.0 - self.cfg.beta2);
        let ic1 = T::from_f64(1.0 / c1);
        let ic2 = T::from_f64(1.0 / c2);
        let eps = T::from_f64(self.cfg.eps);

        let mut idx = 0usize;
        let mut err = None;
        model.visit_params_mut(&mut |name, p| {
            let i = idx;
            idx += 1;
            let Some(grad) = &grads[i] else { return };
            if grad.shape() != p.shape() && err.is_none() {
                err = Some(Error::shape(
                    &format!("adam update of {name}"),
                    p.shape(),
                    grad.shape(),
                ));
                return;
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for ((pi, gi), (mi, vi)) in
                pd.iter_mut().zip(grad.data()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = b1 * *mi + nb1 * *gi;
                *vi = b2 * *vi + nb2 * *gi * *gi;
                let mhat = *mi * ic1;
                let vhat = *vi * ic2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lr: 3e-4,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            eval_batch: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Clone, Debug)]
pub struct FinetuneReport {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

fn snapshot<T: Real>(model: &TransAppModel<T>) -> Vec<Tensor<T>> {
    let mut out = Vec::new();
    model.visit_params(&mut |_, t| out.push(t.clone()));
    model.visit_buffers(&mut |_, t| out.push(t.clone()));
    out
}

fn restore<T: Real>(model: &mut TransAppModel<T>, snap: &[Tensor<T>]) {
    let mut i = 0usize;
    model.visit_params_mut(&mut |_, t| {
        *t = snap[i].clone();
        i += 1;
    });
    model.visit_buffers_mut(&mut |_, t| {
        *t = snap[i].clone();
        i += 1;
    });
}

/// Build the [b, w, m] tensor for the given window indices.
fn gather_batch<T: Real>(w: &LabeledWindows, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
    let row = w.w * w.m;
    let mut data = Vec::with_capacity(idx.len() * row);
    let mut targets = Vec::with_capacity(idx.len());
    for &i in idx {
        data.extend(w.window(i).iter().map(|&v| T::from_f32(v)));
        targets.push(w.labels[i] as usize);
    }
    let t = Tensor::new(vec![idx.len(), w.w, w.m], data).expect("batch shape is consistent");
    (t, targets)
}

/// Window-level Macro F1 of the model on a labeled window set.
pub fn evaluate_window_f1<T: Real>(
    model: &TransAppModel<T>,
    windows: &LabeledWindows,
    batch: usize,
) -> Result<f64> {
    let probs =
        predict_window_probs(model, &windows.data, windows.n, windows.w, windows.m, batch)?;
    let preds: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
    metrics::macro_f1(&windows.labels, &preds)
}

/// One pass of cross-entropy minimization over shuffled train windows.
/// Returns the window-weighted mean batch loss.
fn train_epoch<T: Real>(
    model: &mut TransAppModel<T>,
    train: &LabeledWindows,
    adam: &mut Adam<T>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    ctx: &str,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.n).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0f64;
    for chunk in order.chunks(batch_size) {
        let (x_t, targets) = gather_batch::<T>(train, chunk);
        let mut g = Graph::training();
        let bound = model.bind(&mut g);
        let x = g.constant(x_t);
        let enc = bound.encode(&mut g, x, true, rng)?;
        let logits = bound.classify(&mut g, enc.z)?;
        let loss = g.cross_entropy(logits, &targets)?;
        let loss_val = g.value(loss).data()[0].to_f64();
        if !loss_val.is_finite() {
            return Err(Error::NonFinite { ctx: ctx.to_string() });
        }
        loss_sum += loss_val * chunk.len() as f64;
        g.backward(loss)?;
        adam.step(&mut g, model, &bound.param_ids)?;
        model.apply_bn_updates(&g, &enc);
    }
    Ok(loss_sum / train.n as f64)
}

/// Supervised finetuning with early stopping on validation window-level
/// Macro F1. The model is left holding the best-on-validation parameters.
pub fn finetune<T: Real>(
    model: &mut TransAppModel<T>,
    train: &LabeledWindows,
    val: &LabeledWindows,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport> {
    if train.n == 0 || val.n == 0 {
        return Err(Error::InvalidParam {
            name: "windows".to_string(),
            msg: "finetuning needs non-empty train and validation window sets".to_string(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, AdamConfig::with_lr(cfg.lr));
    let mut history = Vec::new();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_snap = snapshot(model);
    let mut stale = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let ctx = format!("finetune epoch {epoch}");
        let train_loss =
            train_epoch(model, train, &mut adam, cfg.batch_size.max(1), &mut rng, &ctx)?;
        let val_f1 = evaluate_window_f1(model, val, cfg.eval_batch.max(1))?;
        history.push(EpochStats { epoch, train_loss, val_macro_f1: val_f1 });

        if val_f1 > best_f1 {
            best_f1 = val_f1;
            best_epoch = epoch;
            best_snap = snapshot(model);
            stale = 0;
        } else {
            stale += 1;
        }
        // a perfect validation score cannot improve; stop early
        if best_f1 >= 1.0 || stale >= cfg.patience {
            break;
        }
    }
    restore(model, &best_snap);
    Ok(FinetuneReport { history, best_epoch, best_val_f1: best_f1 })
}

pub fn write_history_csv(history: &[EpochStats], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,train_loss,val_macro_f1")?;
    for h in history {
        writeln!(out, "{},{},{}", h.epoch, h.train_loss, h.val_macro_f1)?;
    }
    out.flush()?;
    Ok(())
}
