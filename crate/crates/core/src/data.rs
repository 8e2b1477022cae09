//! Smart-meter dataset handling: CSV ingestion and emission, the seeded
//! 70/10/20 split by household, class balancing by undersampling, the load
//! scaler, and a synthetic household generator used by tests and the demo
//! pipeline.

use crate::error::{Error, Result};
use chrono::{Duration, NaiveDateTime};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// One household's load series at a fixed sampling period.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsumptionSeries {
    pub series_id: String,
    pub start: NaiveDateTime,
    pub period_minutes: u32,
    /// Non-negative load readings in kW.
    pub values: Vec<f64>,
    /// Presence label for the dataset's appliance, when known.
    pub label: Option<u8>,
}

impl ConsumptionSeries {
    pub fn timestamp_at(&self, idx: usize) -> NaiveDateTime {
        self.start + Duration::minutes(self.period_minutes as i64 * idx as i64)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Series that all carry a {0,1} label for one appliance.
#[derive(Clone, Debug, Default)]
pub struct LabeledDataset {
    pub appliance: String,
    pub series: Vec<ConsumptionSeries>,
}

impl LabeledDataset {
    /// (negatives, positives)
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.series.iter().filter(|s| s.label == Some(1)).count();
        (self.series.len() - pos, pos)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(seed: u64) -> Self {
        SplitSpec { train_frac: 0.7, val_frac: 0.1, seed }
    }
}

// --- ingestion -----------------------------------------------------------------

fn ingestion(series_id: &str, msg: impl Into<String>) -> Error {
    Error::Ingestion { series_id: series_id.to_string(), msg: msg.into() }
}

/// Read a readings CSV (`series_id,timestamp,value`) and an optional labels
/// CSV (`series_id,appliance,label`). Series with a label for `appliance`
/// form the labeled dataset; the rest go to the unlabeled pool.
pub fn load_csv(
    series_path: &Path,
    labels_path: Option<&Path>,
    appliance: &str,
) -> Result<(LabeledDataset, Vec<ConsumptionSeries>)> {
    let mut reader = csv::ReaderBuilder::new().from_path(series_path)?;
    {
        let headers = reader.headers()?;
        let want = ["series_id", "timestamp", "value"];
        if headers.iter().ne(want) {
            return Err(Error::Config(format!(
                "readings header must be {want:?}, got {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
    }
    let mut grouped: BTreeMap<String, Vec<(NaiveDateTime, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record?;
        let id = record.get(0).unwrap_or("").to_string();
        let ts_raw = record.get(1).unwrap_or("");
        let ts = NaiveDateTime::parse_from_str(ts_raw, TIMESTAMP_FORMAT)
            .map_err(|e| ingestion(&id, format!("bad timestamp {ts_raw:?}: {e}")))?;
        let value: f64 = record
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|e| ingestion(&id, format!("bad value at {ts_raw}: {e}")))?;
        if !value.is_finite() || value < 0.0 {
            return Err(ingestion(&id, format!("load must be finite and >= 0, got {value} at {ts_raw}")));
        }
        grouped.entry(id).or_default().push((ts, value));
    }

    let mut labels: BTreeMap<String, u8> = BTreeMap::new();
    if let Some(path) = labels_path {
        let mut reader = csv::ReaderBuilder::new().from_path(path)?;
        {
            let headers = reader.headers()?;
            let want = ["series_id", "appliance", "label"];
            if headers.iter().ne(want) {
                return Err(Error::Config(format!(
                    "labels header must be {want:?}, got {:?}",
                    headers.iter().collect::<Vec<_>>()
                )));
            }
        }
        for record in reader.records() {
            let record = record?;
            if record.get(1).unwrap_or("") != appliance {
                continue;
            }
            let id = record.get(0).unwrap_or("").to_string();
            let label: u8 = record
                .get(2)
                .unwrap_or("")
                .parse()
                .map_err(|e| ingestion(&id, format!("bad label: {e}")))?;
            if label > 1 {
                return Err(ingestion(&id, format!("label must be 0 or 1, got {label}")));
            }
            labels.insert(id, label);
        }
    }

    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for (id, rows) in grouped {
        let label = labels.get(&id).copied();
        let series = validate_series(id, rows, label)?;
        if series.label.is_some() {
            labeled.push(series);
        } else {
            unlabeled.push(series);
        }
    }
    Ok((
        LabeledDataset { appliance: appliance.to_string(), series: labeled },
        unlabeled,
    ))
}

fn validate_series(
    id: String,
    rows: Vec<(NaiveDateTime, f64)>,
    label: Option<u8>,
) -> Result<ConsumptionSeries> {
    debug_assert!(!rows.is_empty());
    let start = rows[0].0;
    let mut period_minutes = 30u32;
    if rows.len() >= 2 {
        let gap = rows[1].0 - rows[0].0;
        let minutes = gap.num_minutes();
        if minutes <= 0 || gap != Duration::minutes(minutes) {
            return Err(ingestion(
                &id,
                format!("timestamps must be strictly increasing on a whole-minute period, got gap {gap} after {start}"),
            ));
        }
        period_minutes = minutes as u32;
        for pair in rows.windows(2) {
            let got = pair[1].0 - pair[0].0;
            if got != gap {
                return Err(ingestion(
                    &id,
                    format!("sampling period must stay constant: {gap} then {got} at {}", pair[0].0),
                ));
            }
        }
    }
    Ok(ConsumptionSeries {
        series_id: id,
        start,
        period_minutes,
        values: rows.into_iter().map(|(_, v)| v).collect(),
        label,
    })
}

/// Write readings in the same format `load_csv` reads.
pub fn write_series_csv(series: &[ConsumptionSeries], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "series_id,timestamp,value")?;
    for s in series {
        for (i, v) in s.values.iter().enumerate() {
            writeln!(
                out,
                "{},{},{}",
                s.series_id,
                s.timestamp_at(i).format(TIMESTAMP_FORMAT),
                v
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Write labels for every series that has one.
pub fn write_labels_csv(series: &[ConsumptionSeries], appliance: &str, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "series_id,appliance,label")?;
    for s in series {
        if let Some(label) = s.label {
            writeln!(out, "{},{},{}", s.series_id, appliance, label)?;
        }
    }
    out.flush()?;
    Ok(())
}

// --- split and balance ---------------------------------------------------------

/// Seeded shuffle split by series: floor(train · n) / floor(val · n) / rest.
pub fn split(
    ds: &LabeledDataset,
    spec: &SplitSpec,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let n = ds.series.len();
    if n < 10 {
        return Err(Error::TooFewSeries { min: 10, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let n_train = (spec.train_frac * n as f64).floor() as usize;
    let n_val = (spec.val_frac * n as f64).floor() as usize;
    let pick = |idx: &[usize]| LabeledDataset {
        appliance: ds.appliance.clone(),
        series: idx.iter().map(|&i| ds.series[i].clone()).collect(),
    };
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_val]),
        pick(&order[n_train + n_val..]),
    ))
}

/// Randomly drop majority-class series until the classes balance.
pub fn undersample(ds: &LabeledDataset, rng: &mut ChaCha8Rng) -> Result<LabeledDataset> {
    let (neg, pos) = ds.class_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::SingleClassTrain);
    }
    let (majority_label, keep) = if pos > neg { (1u8, neg) } else { (0u8, pos) };
    let majority_idx: Vec<usize> = ds
        .series
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Some(majority_label))
        .map(|(i, _)| i)
        .collect();
    let mut chosen = majority_idx.clone();
    chosen.shuffle(rng);
    chosen.truncate(keep);
    chosen.sort_unstable();
    let mut keep_set = vec![false; ds.series.len()];
    for &i in &chosen {
        keep_set[i] = true;
    }
    let series: Vec<_> = ds
        .series
        .iter()
        .enumerate()
        .filter(|(i, s)| s.label != Some(majority_label) || keep_set[*i])
        .map(|(_, s)| s.clone())
        .collect();
    Ok(LabeledDataset { appliance: ds.appliance.clone(), series })
}

// --- scaler ------------------------------------------------------------------

/// Global standardization of the load channel, fit on the training split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: f64,
    pub std: f64,
}

impl Scaler {
    pub fn identity() -> Self {
        Scaler { mean: 0.0, std: 1.0 }
    }

    pub fn fit(series: &[ConsumptionSeries]) -> Self {
        let mut n = 0usize;
        let mut sum = 0.0;
        for s in series {
            n += s.values.len();
            sum += s.values.iter().sum::<f64>();
        }
        if n == 0 {
            return Scaler::identity();
        }
        let mean = sum / n as f64;
        let mut ss = 0.0;
        for s in series {
            for &v in &s.values {
                ss += (v - mean) * (v - mean);
            }
        }
        let std = (ss / n as f64).sqrt().max(1e-8);
        Scaler { mean, std }
    }

    pub fn transform(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }
}

// --- synthesis -----------------------------------------------------------------

/// Generator settings for synthetic households: a daily-sinusoid base load
/// with Gaussian noise, plus rectangular appliance pulses for positives.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_households: usize,
    pub series_len: usize,
    pub period_minutes: u32,
    /// Uniform range for the per-household base level (kW).
    pub base_level: (f64, f64),
    /// Uniform range for the daily sinusoid amplitude (kW).
    pub daily_amplitude: (f64, f64),
    pub noise_sigma: f64,
    /// Appliance pulse height (kW), width (slots), and daily count.
    pub signature_kw: f64,
    pub signature_slots: usize,
    pub occurrences_per_day: usize,
    /// Start hours [lo, hi) the appliance prefers.
    pub hour_band: (u32, u32),
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_households: 200,
            series_len: 9600,
            period_minutes: 30,
            base_level: (0.45, 0.55),
            daily_amplitude: (0.1, 0.2),
            noise_sigma: 0.08,
            signature_kw: 2.0,
            signature_slots: 3,
            occurrences_per_day: 1,
            hour_band: (18, 22),
            positive_fraction: 0.5,
            seed: 0,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u clamped away from 0
    let u: f64 = rng.gen::<f64>().max(1e-12);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

/// Generate a fully labeled synthetic dataset; labels exactly reflect
/// signature injection.
pub fn synthesize(cfg: &SyntheticConfig) -> Result<LabeledDataset> {
    if cfg.n_households == 0 || cfg.series_len == 0 || cfg.period_minutes == 0 {
        return Err(Error::Config(
            "synthetic config needs households, length and period >= 1".to_string(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.positive_fraction) {
        return Err(Error::Config(format!(
            "positive_fraction must be in [0, 1], got {}",
            cfg.positive_fraction
        )));
    }
    let slots_per_hour = (60 / cfg.period_minutes).max(1) as usize;
    let slots_per_day = slots_per_hour * 24;
    if cfg.hour_band.0 >= cfg.hour_band.1 || cfg.hour_band.1 > 24 {
        return Err(Error::Config(format!(
            "hour_band must satisfy 0 <= lo < hi <= 24, got {:?}",
            cfg.hour_band
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_households;
    let n_pos = (cfg.positive_fraction * n as f64).round() as usize;
    let mut labels = vec![0u8; n];
    for l in labels.iter_mut().take(n_pos) {
        *l = 1;
    }
    labels.shuffle(&mut rng);

    let start = NaiveDateTime::parse_from_str("2024-01-01T00:00:00", TIMESTAMP_FORMAT)
        .expect("literal timestamp parses");
    let width = (n.max(2) - 1).to_string().len().max(4);
    let mut series = Vec::with_capacity(n);
    for (h, &label) in labels.iter().enumerate() {
        let b0 = rng.gen_range(cfg.base_level.0..=cfg.base_level.1);
        let amp = rng.gen_range(cfg.daily_amplitude.0..=cfg.daily_amplitude.1);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let mut values: Vec<f64> = (0..cfg.series_len)
            .map(|t| {
                let day_pos = (t % slots_per_day) as f64 / slots_per_day as f64;
                let base = b0 + amp * (std::f64::consts::TAU * day_pos + phase).sin();
                (base + cfg.noise_sigma * normal(&mut rng)).max(0.0)
            })
            .collect();
        if label == 1 {
            let days = cfg.series_len.div_ceil(slots_per_day);
            for day in 0..days {
                for _ in 0..cfg.occurrences_per_day {
                    let hour = rng.gen_range(cfg.hour_band.0..cfg.hour_band.1) as usize;
                    let offset = rng.gen_range(0..slots_per_hour);
                    let begin = day * slots_per_day + hour * slots_per_hour + offset;
                    for t in begin..(begin + cfg.signature_slots).min(cfg.series_len) {
                        values[t] += cfg.signature_kw;
                    }
                }
            }
        }
        series.push(ConsumptionSeries {
            series_id: format!("h{h:0width$}"),
            start,
            period_minutes: cfg.period_minutes,
            values,
            label: Some(label),
        });
    }
    Ok(LabeledDataset { appliance: "synthetic".to_string(), series })
}
