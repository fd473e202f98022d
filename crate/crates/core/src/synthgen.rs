//! Synthetic invoice streams with a planted dilution process.
//!
//! Every buyer-supplier pair draws a latent propensity and a typical
//! dilution fraction. An invoice dilutes with probability
//!
//! ```text
//! logit p = logit(base) + pair·z_pair + history·(recent_freq − base)
//!         + macro·f(month) + amount·(ln a − μ)/σ
//! ```
//!
//! clamped to `[0.001, 0.999]`. All random draws are made in a fixed order
//! that does not depend on realized outcomes, so runs that differ only in
//! effect sizes share common random numbers.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use chrono::{Datelike, Duration, Months, NaiveDate};
use rand::distr::weighted::WeightedIndex;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::data_model::{self, Indicator, InvoiceRecord, MacroObservation, Money};
use crate::error::{LabError, Result};

pub const PROBABILITY_FLOOR: f64 = 0.001;
pub const PROBABILITY_CEIL: f64 = 0.999;

/// Lookback of the planted "recent pair dilution frequency" driver.
const HISTORY_DAYS: i64 = 360;
/// Months of macro history generated before the first invoice date so that
/// year-over-year changes exist from the start.
const MACRO_LEAD_MONTHS: u32 = 14;
const PUBLICATION_LAG_DAYS: i64 = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_buyers: usize,
    pub n_suppliers: usize,
    pub n_invoices: usize,
    /// Inclusive issue-date range.
    pub date_range: (NaiveDate, NaiveDate),
    pub base_dilution_rate: f64,
    pub pair_effect_scale: f64,
    /// Weight of the pair's recent (360-day) dilution frequency; kept in
    /// `[0, 3]` so the process stays monotone in the base rate.
    pub history_effect_scale: f64,
    pub macro_effect_scale: f64,
    pub amount_effect_scale: f64,
    /// (μ, σ) of ln(approved amount in major units).
    pub amount_lognormal_params: (f64, f64),
    /// (mean, sd) of days between issue and payment.
    pub payment_lag_days: (f64, f64),
    /// Spread of the per-invoice dilution fraction around the pair's typical
    /// fraction, on the log scale.
    pub pct_log_sd: f64,
    pub currency: String,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_buyers: 40,
            n_suppliers: 400,
            n_invoices: 50_000,
            date_range: (
                NaiveDate::from_ymd_opt(2015, 1, 1).unwrap(),
                NaiveDate::from_ymd_opt(2024, 12, 31).unwrap(),
            ),
            base_dilution_rate: 0.25,
            pair_effect_scale: 2.0,
            history_effect_scale: 1.0,
            macro_effect_scale: 0.5,
            amount_effect_scale: 0.3,
            amount_lognormal_params: (8.0, 1.0),
            payment_lag_days: (45.0, 15.0),
            pct_log_sd: 0.3,
            currency: "USD".into(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(LabError::Config(format!("generator: {msg}")));
        let (start, end) = self.date_range;
        if end < start {
            return bad("date_range end precedes start");
        }
        let days = (end - start).num_days() + 1;
        if self.n_buyers == 0 || self.n_suppliers == 0 || self.n_invoices == 0 {
            return bad("n_buyers, n_suppliers and n_invoices must be positive");
        }
        if (self.n_invoices as i64) > days * 1000 {
            return bad("date_range too short to place n_invoices (max 1000 per day)");
        }
        if !(self.base_dilution_rate > 0.0 && self.base_dilution_rate < 1.0) {
            return bad("base_dilution_rate must lie in (0, 1)");
        }
        if !(0.0..=3.0).contains(&self.history_effect_scale) {
            return bad("history_effect_scale must lie in [0, 3]");
        }
        let scales = [
            self.pair_effect_scale,
            self.macro_effect_scale,
            self.amount_effect_scale,
            self.pct_log_sd,
        ];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("effect scales must be finite and non-negative");
        }
        let (mu, sigma) = self.amount_lognormal_params;
        if !mu.is_finite() || !(sigma > 0.0) {
            return bad("amount_lognormal_params need finite mu and sigma > 0");
        }
        let (lag_mean, lag_sd) = self.payment_lag_days;
        if !(lag_mean >= 0.0) || !(lag_sd >= 0.0) {
            return bad("payment_lag_days must be non-negative");
        }
        if self.currency.len() != 3 {
            return bad("currency must be a 3-letter code");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTruth {
    pub buyer_id: String,
    pub supplier_id: String,
    pub propensity: f64,
    pub typical_fraction: f64,
    pub activity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroFactor {
    pub period_end: NaiveDate,
    pub value: f64,
}

/// Latent quantities behind one invoice. The logit terms sum (with the
/// base-rate intercept) to the unclamped logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvoiceTruth {
    pub invoice_number: String,
    pub pair: usize,
    pub true_probability: f64,
    pub logit_intercept: f64,
    pub logit_pair: f64,
    pub logit_history: f64,
    pub logit_macro: f64,
    pub logit_amount: f64,
}

impl InvoiceTruth {
    /// Dilution probability with the macro driver removed.
    pub fn probability_without_macro(&self) -> f64 {
        clamp_probability(sigmoid(
            self.logit_intercept + self.logit_pair + self.logit_history + self.logit_amount,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GeneratorConfig,
    pub pairs: Vec<PairTruth>,
    pub macro_factor: Vec<MacroFactor>,
    /// Same order as the generated invoices.
    pub invoices: Vec<InvoiceTruth>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub invoices: Vec<InvoiceRecord>,
    pub macro_series: Vec<MacroObservation>,
    pub truth: GroundTruth,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn clamp_probability(p: f64) -> f64 {
    p.clamp(PROBABILITY_FLOOR, PROBABILITY_CEIL)
}

fn month_end(year: i32, month: u32) -> NaiveDate {
    let first = NaiveDate::from_ymd_opt(year, month, 1).unwrap();
    first + Months::new(1) - Duration::days(1)
}

/// Quasi-periodic mean-reverting walk (damped second-order autoregression),
/// standardized to zero mean and unit variance.
fn macro_walk(rng: &mut ChaCha8Rng, months: usize) -> Vec<f64> {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let burn_in = 36;
    let mut prev = [0.0f64; 2];
    let mut out = Vec::with_capacity(months);
    for t in 0..months + burn_in {
        let next = 1.6 * prev[0] - 0.8 * prev[1] + noise.sample(rng);
        prev = [next, prev[0]];
        if t >= burn_in {
            out.push(next);
        }
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let sd = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    out.iter().map(|v| (v - mean) / sd.max(1e-12)).collect()
}

/// Indicator levels and their sensitivity to the common factor.
fn indicator_profile(indicator: Indicator) -> (f64, f64) {
    match indicator {
        Indicator::Unemployment => (5.0, -0.12),
        Indicator::Pce => (14_000.0, 0.02),
        Indicator::Gdp => (21_000.0, 0.015),
        Indicator::IndustrialProduction => (102.0, 0.03),
        Indicator::RetailSales => (550.0, 0.025),
    }
}

pub fn generate(config: &GeneratorConfig) -> Result<SyntheticData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    // Pairs: each supplier sells to one or two buyers.
    let mut pairs = Vec::new();
    for s in 0..config.n_suppliers {
        let k = if config.n_buyers > 1 && rng.random::<f64>() < 0.5 { 2 } else { 1 };
        let mut buyers = index::sample(&mut rng, config.n_buyers, k).into_vec();
        buyers.sort_unstable();
        for b in buyers {
            let propensity = std_normal.sample(&mut rng);
            let typical_fraction = sigmoid(-2.0 + 0.6 * std_normal.sample(&mut rng));
            let activity = (0.5 * std_normal.sample(&mut rng)).exp();
            pairs.push(PairTruth {
                buyer_id: format!("B{:04}", b + 1),
                supplier_id: format!("S{:04}", s + 1),
                propensity,
                typical_fraction,
                activity,
            });
        }
    }

    // Monthly macro factor and the five published indicators.
    let (start, end) = config.date_range;
    let first_month = NaiveDate::from_ymd_opt(start.year(), start.month(), 1).unwrap()
        - Months::new(MACRO_LEAD_MONTHS);
    let n_months = {
        let months = |d: NaiveDate| d.year() as i64 * 12 + d.month0() as i64;
        (months(end) - months(first_month) + 1) as usize
    };
    let factor = macro_walk(&mut rng, n_months);
    let mut macro_factor = Vec::with_capacity(n_months);
    let mut macro_series = Vec::with_capacity(n_months * Indicator::ALL.len());
    for (m, &f) in factor.iter().enumerate() {
        let month_start = first_month + Months::new(m as u32);
        let period_end = month_end(month_start.year(), month_start.month());
        macro_factor.push(MacroFactor { period_end, value: f });
        for indicator in Indicator::ALL {
            let (level, loading) = indicator_profile(indicator);
            let jitter = 0.002 * std_normal.sample(&mut rng);
            let value = level * (1.0 + loading * f + jitter);
            // four decimals keeps files compact
            let value = (value * 1e4).round() / 1e4;
            macro_series.push(MacroObservation {
                indicator,
                period_end,
                publication_date: period_end + Duration::days(PUBLICATION_LAG_DAYS),
                value,
            });
        }
    }
    let macro_series = data_model::validate_macro(macro_series)?;
    // The driver is the latest factor value published strictly before `d`.
    let factor_at = |d: NaiveDate| -> f64 {
        let k = macro_factor
            .partition_point(|f: &MacroFactor| f.period_end + Duration::days(PUBLICATION_LAG_DAYS) < d);
        if k == 0 {
            0.0
        } else {
            macro_factor[k - 1].value
        }
    };

    // Per-invoice raw draws, all made before any outcome is decided.
    let span = (end - start).num_days() + 1;
    let mut offsets: Vec<i64> = (0..config.n_invoices)
        .map(|_| rng.random_range(0..span))
        .collect();
    offsets.sort_unstable();
    let pair_pick = WeightedIndex::new(pairs.iter().map(|p| p.activity))
        .map_err(|e| LabError::Config(format!("generator: pair weights: {e}")))?;
    let (mu, sigma) = config.amount_lognormal_params;
    let amount_dist = LogNormal::new(mu, sigma).unwrap();
    let lag_dist = Normal::new(config.payment_lag_days.0, config.payment_lag_days.1).unwrap();

    struct Draw {
        pair: usize,
        amount: Money,
        lag: i64,
        uniform: f64,
        pct_noise: f64,
    }
    let draws: Vec<Draw> = offsets
        .iter()
        .map(|_| {
            let pair = pair_pick.sample(&mut rng);
            let amount = Money((amount_dist.sample(&mut rng) * 100.0).round().max(100.0) as i64);
            let lag = lag_dist.sample(&mut rng).round().max(0.0) as i64;
            Draw {
                pair,
                amount,
                lag,
                uniform: rng.random::<f64>(),
                pct_noise: std_normal.sample(&mut rng),
            }
        })
        .collect();

    let intercept = (config.base_dilution_rate / (1.0 - config.base_dilution_rate)).ln();
    let mut history: Vec<VecDeque<(NaiveDate, bool)>> = vec![VecDeque::new(); pairs.len()];
    let mut invoices = Vec::with_capacity(config.n_invoices);
    let mut truths = Vec::with_capacity(config.n_invoices);
    for (i, (offset, d)) in offsets.iter().zip(&draws).enumerate() {
        let issue = start + Duration::days(*offset);
        let pair = &pairs[d.pair];

        let events = &mut history[d.pair];
        while events.front().is_some_and(|(date, _)| *date < issue - Duration::days(HISTORY_DAYS)) {
            events.pop_front();
        }
        let prior: Vec<bool> = events
            .iter()
            .filter(|(date, _)| *date < issue)
            .map(|(_, diluted)| *diluted)
            .collect();
        let logit_history = if prior.is_empty() {
            0.0
        } else {
            let freq = prior.iter().filter(|&&x| x).count() as f64 / prior.len() as f64;
            config.history_effect_scale * (freq - config.base_dilution_rate)
        };
        let logit_pair = config.pair_effect_scale * pair.propensity;
        let logit_macro = config.macro_effect_scale * factor_at(issue);
        let logit_amount =
            config.amount_effect_scale * ((d.amount.to_major()).ln() - mu) / sigma;
        let p = clamp_probability(sigmoid(
            intercept + logit_pair + logit_history + logit_macro + logit_amount,
        ));
        let diluted = d.uniform < p;
        events.push_back((issue, diluted));

        let invoice_number = format!("INV-{:07}", i + 1);
        let payment = issue + Duration::days(d.lag);
        let record = if payment > end {
            InvoiceRecord {
                buyer_id: pair.buyer_id.clone(),
                supplier_id: pair.supplier_id.clone(),
                invoice_number: invoice_number.clone(),
                currency: config.currency.clone(),
                approved_amount: d.amount,
                total_payment_amount: Money::ZERO,
                issue_date: issue,
                payment_date: None,
                dilution_amount: Money::ZERO,
            }
        } else {
            let dilution = if diluted {
                let pct = (pair.typical_fraction * (config.pct_log_sd * d.pct_noise).exp())
                    .clamp(0.0005, 1.0);
                Money(((d.amount.0 as f64 * pct).round() as i64).clamp(1, d.amount.0))
            } else {
                Money::ZERO
            };
            InvoiceRecord {
                buyer_id: pair.buyer_id.clone(),
                supplier_id: pair.supplier_id.clone(),
                invoice_number: invoice_number.clone(),
                currency: config.currency.clone(),
                approved_amount: d.amount,
                total_payment_amount: Money(d.amount.0 - dilution.0),
                issue_date: issue,
                payment_date: Some(payment),
                dilution_amount: dilution,
            }
        };
        invoices.push(record);
        truths.push(InvoiceTruth {
            invoice_number,
            pair: d.pair,
            true_probability: p,
            logit_intercept: intercept,
            logit_pair,
            logit_history,
            logit_macro,
            logit_amount,
        });
    }

    Ok(SyntheticData {
        invoices,
        macro_series,
        truth: GroundTruth {
            config: config.clone(),
            pairs,
            macro_factor,
            invoices: truths,
        },
    })
}

/// Writes `invoices.csv`, `macro.csv` and `ground_truth.json` into `dir`.
pub fn write_dataset(data: &SyntheticData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    data_model::write_invoices(&dir.join("invoices.csv"), &data.invoices)?;
    data_model::write_macro(&dir.join("macro.csv"), &data.macro_series)?;
    let path = dir.join("ground_truth.json");
    let json = serde_json::to_vec_pretty(&data.truth)?;
    fs::write(&path, json).map_err(|e| LabError::io(&path, e))?;
    Ok(())
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let bytes = fs::read(path).map_err(|e| LabError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
