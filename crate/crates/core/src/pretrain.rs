//! Self-supervised pretraining: zero random load-channel segments and train
//! the reconstruction head to fill them back in under masked MAE. Operates
//! on unlabeled window stores only.

use crate::adf::WindowStore;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernel::Real;
use crate::model::TransAppModel;
use crate::tensor::Tensor;
use crate::train::{Adam, AdamConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct MaskSpec {
    /// Long-run fraction of positions masked.
    pub mask_ratio: f64,
    /// Mean masked-segment length in slots.
    pub mean_masked_len: f64,
    pub seed: u64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { mask_ratio: 0.5, mean_masked_len: 24.0, seed: 0 }
    }
}

impl MaskSpec {
    fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::InvalidParam {
                name: "mask_ratio".to_string(),
                msg: format!("must be in (0, 1), got {}", self.mask_ratio),
            });
        }
        if self.mean_masked_len < 1.0 {
            return Err(Error::InvalidParam {
                name: "mean_masked_len".to_string(),
                msg: format!("must be >= 1, got {}", self.mean_masked_len),
            });
        }
        Ok(())
    }

    /// Mean unmasked-segment length that yields the target mask ratio.
    fn mean_unmasked_len(&self) -> f64 {
        self.mean_masked_len * (1.0 - self.mask_ratio) / self.mask_ratio
    }
}

/// Geometric segment length with the given mean (support 1, 2, ...).
fn geometric_len(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 1.0 {
        return 1;
    }
    let u = 1.0 - rng.gen::<f64>(); // (0, 1]
    let k = (u.ln() / (1.0 - 1.0 / mean).ln()).ceil();
    (k as usize).max(1)
}

/// Alternating-state geometric mask over `w` positions: masked and unmasked
/// segment lengths are geometric with means l_m and l_u, the initial state
/// is masked with probability `mask_ratio`, truncated at w.
pub fn generate_mask(w: usize, spec: &MaskSpec, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    if w == 0 {
        return Err(Error::InvalidParam {
            name: "w".to_string(),
            msg: "mask length must be >= 1".to_string(),
        });
    }
    spec.validate()?;
    let l_u = spec.mean_unmasked_len();
    let mut mask = Vec::with_capacity(w);
    let mut masked = rng.gen::<f64>() < spec.mask_ratio;
    while mask.len() < w {
        let mean = if masked { spec.mean_masked_len } else { l_u };
        let len = geometric_len(rng, mean).min(w - mask.len());
        mask.extend(std::iter::repeat(masked).take(len));
        masked = !masked;
    }
    Ok(mask)
}

/// One mask per window, concatenated to [b*w].
pub fn generate_batch_masks(
    b: usize,
    w: usize,
    spec: &MaskSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(b * w);
    for _ in 0..b {
        out.extend(generate_mask(w, spec, rng)?);
    }
    Ok(out)
}

/// A corrupted batch ready for the reconstruction objective.
pub struct MaskedBatch<T> {
    /// [b, w, m]; load channel zeroed at masked positions, time channels
    /// untouched.
    pub corrupted: Tensor<T>,
    /// [b, w, 1]; the original load.
    pub target: Tensor<T>,
    /// [b*w] row-major.
    pub mask: Vec<bool>,
    /// [b, w, 1]; 1 where masked, 0 elsewhere.
    pub mask01: Tensor<T>,
    pub n_masked: usize,
}

/// Zero the load channel of `data` ([b, w, m] rows) wherever `mask` is set.
pub fn apply_mask<T: Real>(
    data: &[f32],
    b: usize,
    w: usize,
    m: usize,
    mask: &[bool],
) -> Result<MaskedBatch<T>> {
    if m == 0 {
        return Err(Error::Config("windows must have a load channel".to_string()));
    }
    if data.len() != b * w * m || mask.len() != b * w {
        return Err(Error::shape("apply_mask", &[b, w, m], &[data.len(), mask.len()]));
    }
    let mut corrupted = Vec::with_capacity(b * w * m);
    let mut target = Vec::with_capacity(b * w);
    let mut mask01 = Vec::with_capacity(b * w);
    let mut n_masked = 0usize;
    for (t, row) in data.chunks_exact(m).enumerate() {
        let hit = mask[t];
        target.push(T::from_f32(row[0]));
        mask01.push(if hit { T::ONE } else { T::ZERO });
        corrupted.push(if hit {
            n_masked += 1;
            T::ZERO
        } else {
            T::from_f32(row[0])
        });
        corrupted.extend(row[1..].iter().map(|&v| T::from_f32(v)));
    }
    Ok(MaskedBatch {
        corrupted: Tensor::new(vec![b, w, m], corrupted)?,
        target: Tensor::new(vec![b, w, 1], target)?,
        mask: mask.to_vec(),
        mask01: Tensor::new(vec![b, w, 1], mask01)?,
        n_masked,
    })
}

/// Mean absolute error over masked positions only; unmasked positions
/// contribute nothing to the value or the gradient.
pub fn masked_mae<T: Real>(
    g: &mut Graph<T>,
    pred: NodeId,
    target: &Tensor<T>,
    mask01: &Tensor<T>,
    n_masked: usize,
) -> Result<NodeId> {
    if n_masked == 0 {
        return Err(Error::EmptyMask);
    }
    let tgt = g.constant(target.clone());
    let msk = g.constant(mask01.clone());
    let diff = g.sub(pred, tgt)?;
    let mag = g.abs(diff);
    let hit = g.mul(mag, msk)?;
    let total = g.sum_all(hit);
    Ok(g.scale(total, T::from_f64(1.0 / n_masked as f64)))
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask: MaskSpec,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-4,
            batch_size: 32,
            epochs: 30,
            mask: MaskSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_mae: f64,
}

/// Masked-reconstruction pretraining over an unlabeled window store. The
/// store carries no labels, so no label can leak into this phase.
pub fn pretrain<T: Real>(
    model: &mut TransAppModel<T>,
    store: &WindowStore,
    cfg: &PretrainConfig,
) -> Result<Vec<PretrainEpoch>> {
    if store.n == 0 {
        return Err(Error::InvalidParam {
            name: "store".to_string(),
            msg: "pretraining needs at least one window".to_string(),
        });
    }
    cfg.mask.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, AdamConfig::with_lr(cfg.lr));
    let batch_size = cfg.batch_size.max(1);
    let row = store.w * store.m;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..store.n).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for chunk in order.chunks(batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * row);
            for &i in chunk {
                data.extend_from_slice(store.window(i));
            }
            let mask = generate_batch_masks(chunk.len(), store.w, &cfg.mask, &mut rng)?;
            let batch = apply_mask::<T>(&data, chunk.len(), store.w, store.m, &mask)?;
            if batch.n_masked == 0 {
                continue;
            }
            let mut g = Graph::training();
            let bound = model.bind(&mut g);
            let x = g.constant(batch.corrupted);
            let enc = bound.encode(&mut g, x, true, &mut rng)?;
            let pred = bound.reconstruct(&mut g, enc.z)?;
            let loss = masked_mae(&mut g, pred, &batch.target, &batch.mask01, batch.n_masked)?;
            let loss_val = g.value(loss).data()[0].to_f64();
            if !loss_val.is_finite() {
                return Err(Error::NonFinite { ctx: format!("pretrain epoch {epoch}") });
            }
            loss_sum += loss_val * chunk.len() as f64;
            seen += chunk.len();
            g.backward(loss)?;
            adam.step(&mut g, model, &bound.param_ids)?;
            model.apply_bn_updates(&g, &enc);
        }
        if seen == 0 {
            return Err(Error::EmptyMask);
        }
        trace.push(PretrainEpoch { epoch, train_mae: loss_sum / seen as f64 });
    }
    Ok(trace)
}

pub fn write_pretrain_trace_csv(trace: &[PretrainEpoch], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,train_mae")?;
    for row in trace {
        writeln!(out, "{},{}", row.epoch, row.train_mae)?;
    }
    out.flush()?;
    Ok(())
}
