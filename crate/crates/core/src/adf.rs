//! The appliance detection pipeline: tumbling-window slicing with calendar
//! channels, per-window probability prediction, quantile merging under a
//! tuned alpha, and the final rounded decision per series.

use crate::data::{ConsumptionSeries, LabeledDataset, Scaler};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernel::Real;
use crate::metrics;
use crate::model::TransAppModel;
use crate::tensor::Tensor;
use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

/// Sin/cos encoding of hour-of-day (period 24, hours numbered 1..=24) and
/// day-of-week (period 7, Monday=1).
pub fn time_encode(ts: NaiveDateTime) -> [f64; 4] {
    let hour = ts.time().hour();
    let i_h = if hour == 0 { 24 } else { hour } as f64;
    let i_d = ts.date().weekday().number_from_monday() as f64;
    [
        (TAU * i_h / 24.0).sin(),
        (TAU * i_h / 24.0).cos(),
        (TAU * i_d / 7.0).sin(),
        (TAU * i_d / 7.0).cos(),
    ]
}

/// How window channels are assembled.
#[derive(Clone, Copy, Debug)]
pub struct SliceOptions {
    /// Attach the four calendar channels (m=5); otherwise load only (m=1).
    pub time_channels: bool,
    pub scaler: Scaler,
}

impl SliceOptions {
    pub fn channels(&self) -> usize {
        if self.time_channels {
            5
        } else {
            1
        }
    }
}

impl Default for SliceOptions {
    fn default() -> Self {
        SliceOptions { time_channels: true, scaler: Scaler::identity() }
    }
}

/// Non-overlapping windows of one series, [n, w, m] row-major with channel
/// 0 the standardized load.
pub struct SubsequenceBatch {
    pub series_id: String,
    pub n: usize,
    pub w: usize,
    pub m: usize,
    pub data: Vec<f32>,
}

/// Tumbling-window slicing: exactly floor(l/w) windows, tail dropped.
pub fn slice(series: &ConsumptionSeries, w: usize, opts: &SliceOptions) -> Result<SubsequenceBatch> {
    if w == 0 {
        return Err(Error::InvalidParam {
            name: "window".to_string(),
            msg: "must be >= 1".to_string(),
        });
    }
    let l = series.values.len();
    let n = l / w;
    if n == 0 {
        return Err(Error::SeriesTooShort {
            series_id: series.series_id.clone(),
            len: l,
            window: w,
        });
    }
    let m = opts.channels();
    let mut data = Vec::with_capacity(n * w * m);
    for t in 0..n * w {
        data.push(opts.scaler.transform(series.values[t]) as f32);
        if opts.time_channels {
            let te = time_encode(series.timestamp_at(t));
            data.extend(te.iter().map(|&v| v as f32));
        }
    }
    Ok(SubsequenceBatch { series_id: series.series_id.clone(), n, w, m, data })
}

/// Windows pooled for self-supervised pretraining. Deliberately carries no
/// labels.
pub struct WindowStore {
    pub w: usize,
    pub m: usize,
    pub n: usize,
    pub data: Vec<f32>,
}

impl WindowStore {
    pub fn window(&self, i: usize) -> &[f32] {
        &self.data[i * self.w * self.m..(i + 1) * self.w * self.m]
    }
}

/// Slice every series in the pool; returns the store and how many series
/// were too short.
pub fn build_window_store(
    pool: &[ConsumptionSeries],
    w: usize,
    opts: &SliceOptions,
) -> Result<(WindowStore, usize)> {
    let m = opts.channels();
    let mut store = WindowStore { w, m, n: 0, data: Vec::new() };
    let mut skipped = 0usize;
    for s in pool {
        match slice(s, w, opts) {
            Ok(batch) => {
                store.n += batch.n;
                store.data.extend_from_slice(&batch.data);
            }
            Err(Error::SeriesTooShort { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((store, skipped))
}

/// Windows with the series label propagated to every row.
pub struct LabeledWindows {
    pub w: usize,
    pub m: usize,
    pub n: usize,
    pub data: Vec<f32>,
    pub labels: Vec<u8>,
}

impl LabeledWindows {
    pub fn window(&self, i: usize) -> &[f32] {
        &self.data[i * self.w * self.m..(i + 1) * self.w * self.m]
    }
}

/// Slice a labeled dataset and assign each window its series' label.
pub fn windows_for_training(
    ds: &LabeledDataset,
    w: usize,
    opts: &SliceOptions,
) -> Result<(LabeledWindows, usize)> {
    let m = opts.channels();
    let mut out = LabeledWindows { w, m, n: 0, data: Vec::new(), labels: Vec::new() };
    let mut skipped = 0usize;
    for s in &ds.series {
        let label = s.label.ok_or_else(|| Error::Ingestion {
            series_id: s.series_id.clone(),
            msg: "series in a labeled dataset has no label".to_string(),
        })?;
        match slice(s, w, opts) {
            Ok(batch) => {
                out.n += batch.n;
                out.data.extend_from_slice(&batch.data);
                out.labels.extend(std::iter::repeat(label).take(batch.n));
            }
            Err(Error::SeriesTooShort { .. }) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((out, skipped))
}

/// Positive-class probability for each window in `data` ([n, w, m] rows),
/// evaluated in inference mode in batches.
pub fn predict_window_probs<T: Real>(
    model: &TransAppModel<T>,
    data: &[f32],
    n: usize,
    w: usize,
    m: usize,
    batch_size: usize,
) -> Result<Vec<f64>> {
    debug_assert_eq!(data.len(), n * w * m);
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut probs = Vec::with_capacity(n);
    let mut start = 0usize;
    while start < n {
        let b = batch_size.min(n - start);
        let slab = &data[start * w * m..(start + b) * w * m];
        let x_t = Tensor::new(vec![b, w, m], slab.iter().map(|&v| T::from_f32(v)).collect())?;
        let mut g = Graph::inference();
        let bound = model.bind(&mut g);
        let x = g.constant(x_t);
        let enc = bound.encode(&mut g, x, false, &mut rng)?;
        let logits = bound.classify(&mut g, enc.z)?;
        let soft = g.softmax(logits)?;
        let sd = g.value(soft).data();
        for i in 0..b {
            probs.push(sd[i * 2 + 1].to_f64());
        }
        start += b;
    }
    Ok(probs)
}

/// Per-window probabilities for one series.
pub fn predict_series_probs<T: Real>(
    model: &TransAppModel<T>,
    series: &ConsumptionSeries,
    w: usize,
    opts: &SliceOptions,
    batch_size: usize,
) -> Result<Vec<f64>> {
    let batch = slice(series, w, opts)?;
    predict_window_probs(model, &batch.data, batch.n, batch.w, batch.m, batch_size)
}

/// The candidate grid {0.00, 0.05, ..., 0.95, 1.00}.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn merge_quantile(probs: &[f64], alpha: f64) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyMerge);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParam {
            name: "alpha".to_string(),
            msg: format!("must be in [0, 1], got {alpha}"),
        });
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("probabilities are ordered"));
    let h = alpha * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// Merge and round: label 1 iff the merged value is >= 0.5.
pub fn merge_and_label(probs: &[f64], alpha: f64) -> Result<(f64, u8)> {
    let merged = merge_quantile(probs, alpha)?;
    Ok((merged, u8::from(merged >= 0.5)))
}

/// A tuned quantile level for one appliance.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AlphaParameter {
    pub appliance: String,
    pub alpha_star: f64,
    pub grid: Vec<f64>,
    /// Macro F1 reached on the validation set at alpha_star.
    pub tuning_score: f64,
}

/// Grid-search alpha over precomputed per-series probabilities; ties go to
/// the smallest alpha.
pub fn tune_alpha_from_probs(
    appliance: &str,
    per_series: &[(Vec<f64>, u8)],
    grid: &[f64],
) -> Result<AlphaParameter> {
    if grid.is_empty() {
        return Err(Error::InvalidParam {
            name: "grid".to_string(),
            msg: "alpha grid must be non-empty".to_string(),
        });
    }
    let y_true: Vec<u8> = per_series.iter().map(|(_, l)| *l).collect();
    if y_true.iter().all(|&l| l == 0) || y_true.iter().all(|&l| l == 1) {
        return Err(Error::SingleClassValidation);
    }
    let mut sorted_grid = grid.to_vec();
    sorted_grid.sort_by(|a, b| a.partial_cmp(b).expect("grid values are ordered"));
    let mut best: Option<(f64, f64)> = None; // (alpha, score)
    let mut scores = Vec::with_capacity(sorted_grid.len());
    for &alpha in &sorted_grid {
        let y_pred: Vec<u8> = per_series
            .iter()
            .map(|(probs, _)| merge_and_label(probs, alpha).map(|(_, l)| l))
            .collect::<Result<_>>()?;
        let score = metrics::macro_f1(&y_true, &y_pred)?;
        scores.push(score);
        match best {
            Some((_, s)) if score <= s => {}
            _ => best = Some((alpha, score)),
        }
    }
    let (alpha_star, tuning_score) = best.expect("grid is non-empty");
    debug_assert!(scores.iter().all(|&s| s <= tuning_score));
    Ok(AlphaParameter {
        appliance: appliance.to_string(),
        alpha_star,
        grid: sorted_grid,
        tuning_score,
    })
}

/// Tune alpha on a labeled validation set; returns the parameter and how
/// many series were too short to score.
pub fn tune_alpha<T: Real>(
    model: &TransAppModel<T>,
    val: &LabeledDataset,
    w: usize,
    opts: &SliceOptions,
    grid: &[f64],
    batch_size: usize,
) -> Result<(AlphaParameter, usize)> {
    let mut per_series = Vec::with_capacity(val.series.len());
    let mut skipped = 0usize;
    let results: Vec<Result<Option<(Vec<f64>, u8)>>> = val
        .series
        .par_iter()
        .map(|s| {
            let label = s.label.ok_or_else(|| Error::Ingestion {
                series_id: s.series_id.clone(),
                msg: "validation series has no label".to_string(),
            })?;
            match predict_series_probs(model, s, w, opts, batch_size) {
                Ok(probs) => Ok(Some((probs, label))),
                Err(Error::SeriesTooShort { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    for r in results {
        match r? {
            Some(entry) => per_series.push(entry),
            None => skipped += 1,
        }
    }
    if per_series.is_empty() {
        return Err(Error::SingleClassValidation);
    }
    let param = tune_alpha_from_probs(&val.appliance, &per_series, grid)?;
    Ok((param, skipped))
}

/// Final per-series decision.
#[derive(Clone, Debug)]
pub struct DetectionResult {
    pub series_id: String,
    pub probs: Vec<f64>,
    pub merged: f64,
    pub label: u8,
    pub alpha_used: f64,
}

pub fn detect<T: Real>(
    model: &TransAppModel<T>,
    series: &ConsumptionSeries,
    alpha: &AlphaParameter,
    w: usize,
    opts: &SliceOptions,
    batch_size: usize,
) -> Result<DetectionResult> {
    let probs = predict_series_probs(model, series, w, opts, batch_size)?;
    let (merged, label) = merge_and_label(&probs, alpha.alpha_star)?;
    Ok(DetectionResult {
        series_id: series.series_id.clone(),
        probs,
        merged,
        label,
        alpha_used: alpha.alpha_star,
    })
}

/// Detect across many series in parallel, preserving order; too-short
/// series are skipped and counted.
pub fn detect_all<T: Real>(
    model: &TransAppModel<T>,
    series: &[ConsumptionSeries],
    alpha: &AlphaParameter,
    w: usize,
    opts: &SliceOptions,
    batch_size: usize,
) -> Result<(Vec<DetectionResult>, usize)> {
    let results: Vec<Result<Option<DetectionResult>>> = series
        .par_iter()
        .map(|s| match detect(model, s, alpha, w, opts, batch_size) {
            Ok(r) => Ok(Some(r)),
            Err(Error::SeriesTooShort { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect();
    let mut out = Vec::with_capacity(series.len());
    let mut skipped = 0usize;
    for r in results {
        match r? {
            Some(d) => out.push(d),
            None => skipped += 1,
        }
    }
    Ok((out, skipped))
}

pub fn write_results_csv(results: &[DetectionResult], appliance: &str, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "series_id,appliance,merged_prob,label,n_windows,alpha_used")?;
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.series_id,
            appliance,
            r.merged,
            r.label,
            r.probs.len(),
            r.alpha_used
        )?;
    }
    out.flush()?;
    Ok(())
}
