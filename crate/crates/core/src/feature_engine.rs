//! Point-in-time feature engineering.
//!
//! For an invoice issued on day `t`, every historical statistic aggregates
//! only invoices issued strictly before `t` (same-day invoices never see
//! each other), and every macro value is the latest observation published
//! strictly before `t`.
//!
//! The engine is a single chronological sweep. Each invoice schedules
//! "add" and "expire" events on a timeline, per scope and horizon, and the
//! sweep applies all events due on or before the current day before
//! emitting that day's rows. Sums are kept in integers (minor units and
//! 2^-62 fixed-point fractions) so the result does not depend on the order
//! in which events are applied.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_model::{derive_labels, DilutionLabels, Indicator, InvoiceRecord, MacroObservation, Money};
use crate::error::{LabError, Result};
use crate::matrix::{FeatureMatrix, Matrix};

/// Scale of the fixed-point dilution fraction used inside running sums.
pub const PCT_SHIFT: u32 = 62;
pub const PCT_SCALE: f64 = (1u64 << PCT_SHIFT) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Horizon {
    D180,
    D360,
    D720,
    AllTime,
}

impl Horizon {
    pub const ALL: [Horizon; 4] = [Horizon::D180, Horizon::D360, Horizon::D720, Horizon::AllTime];

    pub fn days(self) -> Option<i64> {
        match self {
            Horizon::D180 => Some(180),
            Horizon::D360 => Some(360),
            Horizon::D720 => Some(720),
            Horizon::AllTime => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Horizon::D180 => "d180",
            Horizon::D360 => "d360",
            Horizon::D720 => "d720",
            Horizon::AllTime => "all_time",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Buyer,
    Pair,
}

impl Scope {
    pub const ALL: [Scope; 2] = [Scope::Buyer, Scope::Pair];

    pub fn name(self) -> &'static str {
        match self {
            Scope::Buyer => "buyer",
            Scope::Pair => "pair",
        }
    }
}

/// When a prior invoice's dilution outcome becomes usable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryKnowledge {
    /// Outcome usable from the day after issue.
    #[default]
    Issue,
    /// Outcome usable only from the day after payment.
    Payment,
}

impl FromStr for HistoryKnowledge {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "issue" => Ok(HistoryKnowledge::Issue),
            "payment" => Ok(HistoryKnowledge::Payment),
            other => Err(LabError::Config(format!(
                "history knowledge must be `issue` or `payment`, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    pub history_knowledge: HistoryKnowledge,
    /// Keep only invoices in this currency. Without it, mixed input is rejected.
    pub currency: Option<String>,
}

/// Aggregates over one scope and horizon.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WindowStats {
    pub invoice_count: u32,
    pub dilution_count: u32,
    pub dilution_frequency: Option<f64>,
    /// Mean over diluted invoices, in major units.
    pub mean_dilution_amount: Option<f64>,
    pub mean_dilution_pct: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Recency {
    pub days_since_last_invoice: Option<i64>,
    pub days_since_last_dilution: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScopeFeatures {
    /// Indexed like [`Horizon::ALL`].
    pub horizons: [WindowStats; 4],
    pub recency: Recency,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MacroFeatures {
    /// Indexed like [`Indicator::ALL`].
    pub level: [Option<f64>; 5],
    pub change_12m: [Option<f64>; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub buyer_id: String,
    pub supplier_id: String,
    pub invoice_number: String,
    pub issue_date: NaiveDate,
    pub approved_amount: Money,
    pub buyer: ScopeFeatures,
    pub pair: ScopeFeatures,
    pub log_approved_amount: f64,
    pub month: u32,
    /// Monday = 0.
    pub day_of_week: u32,
    pub macro_features: MacroFeatures,
    /// `None` for unpaid invoices.
    pub labels: Option<DilutionLabels>,
}

impl FeatureRow {
    pub fn scope(&self, scope: Scope) -> &ScopeFeatures {
        match scope {
            Scope::Buyer => &self.buyer,
            Scope::Pair => &self.pair,
        }
    }

    /// Model input values in [`feature_dictionary`] order. Missing values
    /// are encoded as 0 with the matching presence flag set to 0.
    pub fn values(&self) -> Vec<f64> {
        let mut values = Vec::with_capacity(DICTIONARY_LEN);
        let mut flags = Vec::with_capacity(N_MISSING_CAPABLE);
        let mut opt = |values: &mut Vec<f64>, v: Option<f64>| {
            values.push(v.unwrap_or(0.0));
            flags.push(if v.is_some() { 1.0 } else { 0.0 });
        };
        for scope in Scope::ALL {
            let s = self.scope(scope);
            for h in &s.horizons {
                values.push(h.invoice_count as f64);
                values.push(h.dilution_count as f64);
                opt(&mut values, h.dilution_frequency);
                opt(&mut values, h.mean_dilution_amount);
                opt(&mut values, h.mean_dilution_pct);
            }
            opt(&mut values, s.recency.days_since_last_invoice.map(|d| d as f64));
            opt(&mut values, s.recency.days_since_last_dilution.map(|d| d as f64));
        }
        values.push(self.log_approved_amount);
        values.push(self.month as f64);
        values.push(self.day_of_week as f64);
        for i in 0..Indicator::ALL.len() {
            opt(&mut values, self.macro_features.level[i]);
            opt(&mut values, self.macro_features.change_12m[i]);
        }
        values.extend(flags);
        values
    }

    fn check_invariants(&self) -> Result<()> {
        for scope in Scope::ALL {
            let h = &self.scope(scope).horizons;
            for w in h {
                if w.dilution_count > w.invoice_count {
                    return Err(LabError::Numeric(format!(
                        "{}: dilution_count exceeds invoice_count",
                        self.invoice_number
                    )));
                }
            }
            for pair in h.windows(2) {
                if pair[0].invoice_count > pair[1].invoice_count
                    || pair[0].dilution_count > pair[1].dilution_count
                {
                    return Err(LabError::Numeric(format!(
                        "{}: horizon counts not nested",
                        self.invoice_number
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    History,
    Invoice,
    Macro,
    Presence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    /// Standardized before entering the neural families.
    Continuous,
    /// 0/1 presence indicator.
    Flag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub description: String,
    pub missing_capable: bool,
    pub group: FeatureGroup,
    pub kind: FeatureKind,
}

const N_MISSING_CAPABLE: usize = 2 * (4 * 3 + 2) + 10;
const DICTIONARY_LEN: usize = 2 * (4 * 5 + 2) + 3 + 10 + N_MISSING_CAPABLE;

/// Ordered feature dictionary. The order defines the model input layout.
pub fn feature_dictionary() -> Vec<FeatureSpec> {
    let mut out = Vec::with_capacity(DICTIONARY_LEN);
    let push = |out: &mut Vec<FeatureSpec>, name: String, description: String, missing: bool, group| {
        out.push(FeatureSpec {
            name,
            description,
            missing_capable: missing,
            group,
            kind: FeatureKind::Continuous,
        });
    };
    for scope in Scope::ALL {
        let s = scope.name();
        for h in Horizon::ALL {
            let hn = h.name();
            let span = match h.days() {
                Some(d) => format!("issued in the {d} days before"),
                None => "issued at any time before".into(),
            };
            let g = FeatureGroup::History;
            push(&mut out, format!("{s}_{hn}_invoice_count"), format!("prior {s} invoices {span} the issue date"), false, g);
            push(&mut out, format!("{s}_{hn}_dilution_count"), format!("prior diluted {s} invoices {span} the issue date"), false, g);
            push(&mut out, format!("{s}_{hn}_dilution_frequency"), format!("dilution_count / invoice_count for {s} invoices {span}"), true, g);
            push(&mut out, format!("{s}_{hn}_mean_dilution_amount"), format!("mean dilution amount of diluted {s} invoices {span}"), true, g);
            push(&mut out, format!("{s}_{hn}_mean_dilution_pct"), format!("mean dilution fraction of diluted {s} invoices {span}"), true, g);
        }
        push(&mut out, format!("{s}_days_since_last_invoice"), format!("days since the most recent prior {s} invoice"), true, FeatureGroup::History);
        push(&mut out, format!("{s}_days_since_last_dilution"), format!("days since the most recent prior diluted {s} invoice"), true, FeatureGroup::History);
    }
    push(&mut out, "log_approved_amount".into(), "natural log of the approved amount".into(), false, FeatureGroup::Invoice);
    push(&mut out, "issue_month".into(), "calendar month of the issue date (1-12)".into(), false, FeatureGroup::Invoice);
    push(&mut out, "issue_day_of_week".into(), "weekday of the issue date (Monday = 0)".into(), false, FeatureGroup::Invoice);
    for ind in Indicator::ALL {
        let n = ind.name();
        push(&mut out, format!("macro_{n}_level"), format!("latest {n} value published before the issue date"), true, FeatureGroup::Macro);
        push(&mut out, format!("macro_{n}_change_12m"), format!("12-month relative change of the latest published {n} value"), true, FeatureGroup::Macro);
    }
    let flagged: Vec<(String, FeatureGroup)> = out
        .iter()
        .filter(|f| f.missing_capable)
        .map(|f| (f.name.clone(), f.group))
        .collect();
    for (name, group) in flagged {
        out.push(FeatureSpec {
            description: format!("1 when {name} is present, else 0"),
            name: format!("has_{name}"),
            missing_capable: false,
            group: if group == FeatureGroup::Macro { FeatureGroup::Macro } else { FeatureGroup::Presence },
            kind: FeatureKind::Flag,
        });
    }
    debug_assert_eq!(out.len(), DICTIONARY_LEN);
    out
}

/// A selection of dictionary columns used as model input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub columns: Vec<usize>,
    pub names: Vec<String>,
    pub continuous: Vec<bool>,
    pub fingerprint: String,
}

impl FeatureLayout {
    pub fn new(include_macro: bool) -> Self {
        let dict = feature_dictionary();
        let columns: Vec<usize> = dict
            .iter()
            .enumerate()
            .filter(|(_, f)| include_macro || f.group != FeatureGroup::Macro)
            .map(|(i, _)| i)
            .collect();
        let names: Vec<String> = columns.iter().map(|&i| dict[i].name.clone()).collect();
        let continuous = columns
            .iter()
            .map(|&i| dict[i].kind == FeatureKind::Continuous)
            .collect();
        let fingerprint = fingerprint(&names);
        Self {
            columns,
            names,
            continuous,
            fingerprint,
        }
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn row_values(&self, row: &FeatureRow) -> Vec<f64> {
        let all = row.values();
        self.columns.iter().map(|&i| all[i]).collect()
    }

    pub fn matrix<'a>(&self, rows: impl IntoIterator<Item = &'a FeatureRow>) -> FeatureMatrix {
        let mut data = Vec::new();
        let mut n = 0;
        for row in rows {
            data.extend(self.row_values(row));
            n += 1;
        }
        FeatureMatrix {
            fingerprint: self.fingerprint.clone(),
            x: Matrix::from_vec(n, self.len(), data),
        }
    }
}

/// Short hash identifying an ordered list of feature names.
pub fn fingerprint(names: &[String]) -> String {
    let mut hasher = Sha256::new();
    for n in names {
        hasher.update(n.as_bytes());
        hasher.update([0u8]);
    }
    hex::encode(&hasher.finalize()[..8])
}

/// As-of lookup over validated macro observations.
#[derive(Debug, Clone, Default)]
pub struct MacroIndex {
    /// Per indicator, sorted by (publication_date, period_end).
    by_publication: [Vec<MacroObservation>; 5],
    /// Per indicator, (year, month) of period_end → observation.
    by_period: [HashMap<(i32, u32), MacroObservation>; 5],
}

impl MacroIndex {
    pub fn new(series: &[MacroObservation]) -> Self {
        let mut index = MacroIndex::default();
        for o in series {
            let i = o.indicator.index();
            index.by_publication[i].push(*o);
            index.by_period[i].insert((o.period_end.year(), o.period_end.month()), *o);
        }
        for v in &mut index.by_publication {
            v.sort_by_key(|o| (o.publication_date, o.period_end));
        }
        index
    }

    pub fn is_empty(&self) -> bool {
        self.by_publication.iter().all(Vec::is_empty)
    }

    /// Latest observation published strictly before `date`.
    pub fn latest_before(&self, indicator: Indicator, date: NaiveDate) -> Option<&MacroObservation> {
        let series = &self.by_publication[indicator.index()];
        let k = series.partition_point(|o| o.publication_date < date);
        k.checked_sub(1).map(|i| &series[i])
    }

    pub fn asof(&self, indicator: Indicator, date: NaiveDate) -> Option<f64> {
        self.latest_before(indicator, date).map(|o| o.value)
    }

    /// Relative change between the as-of observation and the one twelve
    /// months earlier, when that one was also published before `date`.
    pub fn change_12m(&self, indicator: Indicator, date: NaiveDate) -> Option<f64> {
        let latest = self.latest_before(indicator, date)?;
        let (y, m) = (latest.period_end.year(), latest.period_end.month());
        let prior = self.by_period[indicator.index()].get(&(y - 1, m))?;
        if prior.publication_date >= date || prior.value == 0.0 {
            return None;
        }
        Some(latest.value / prior.value - 1.0)
    }

    pub fn features(&self, date: NaiveDate) -> MacroFeatures {
        let mut f = MacroFeatures::default();
        for ind in Indicator::ALL {
            f.level[ind.index()] = self.asof(ind, date);
            f.change_12m[ind.index()] = self.change_12m(ind, date);
        }
        f
    }
}

/// Value of `indicator` known strictly before `date`.
pub fn asof_macro(indicator: &str, date: NaiveDate, series: &[MacroObservation]) -> Result<Option<f64>> {
    let indicator: Indicator = indicator.parse()?;
    Ok(MacroIndex::new(series).asof(indicator, date))
}

/// Dilution fraction in 2^-62 fixed point, rounded to nearest.
pub fn pct_fixed(dilution: Money, approved: Money) -> i128 {
    let approved = approved.0 as i128;
    (((dilution.0 as i128) << PCT_SHIFT) + approved / 2) / approved
}

#[derive(Debug, Clone, Copy, Default)]
struct Running {
    invoices: u32,
    dilutions: u32,
    amount_sum: i64,
    pct_sum: i128,
}

impl Running {
    fn stats(&self) -> WindowStats {
        let frequency = (self.invoices > 0).then(|| self.dilutions as f64 / self.invoices as f64);
        let (amount, pct) = if self.dilutions > 0 {
            let n = self.dilutions as f64;
            (
                Some(self.amount_sum as f64 / n / 100.0),
                Some(self.pct_sum as f64 / n / PCT_SCALE),
            )
        } else {
            (None, None)
        };
        WindowStats {
            invoice_count: self.invoices,
            dilution_count: self.dilutions,
            dilution_frequency: frequency,
            mean_dilution_amount: amount,
            mean_dilution_pct: pct,
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ScopeState {
    horizons: [Running; 4],
    last_invoice: Option<NaiveDate>,
    last_dilution: Option<NaiveDate>,
}

impl ScopeState {
    fn features(&self, t: NaiveDate) -> ScopeFeatures {
        ScopeFeatures {
            horizons: [0, 1, 2, 3].map(|h| self.horizons[h].stats()),
            recency: Recency {
                days_since_last_invoice: self.last_invoice.map(|d| (t - d).num_days()),
                days_since_last_dilution: self.last_dilution.map(|d| (t - d).num_days()),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Contribution {
    Invoice { issue: NaiveDate },
    Dilution { issue: NaiveDate, amount: i64, pct: i128 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct TimelineEvent {
    date: NaiveDate,
    seq: u64,
    scope_state: usize,
    horizon: u8,
    add: bool,
    contribution: Contribution,
}

fn apply(state: &mut ScopeState, ev: &TimelineEvent) {
    let run = &mut state.horizons[ev.horizon as usize];
    let sign: i64 = if ev.add { 1 } else { -1 };
    match ev.contribution {
        Contribution::Invoice { issue } => {
            run.invoices = (run.invoices as i64 + sign) as u32;
            if ev.add && Horizon::ALL[ev.horizon as usize] == Horizon::AllTime {
                state.last_invoice = state.last_invoice.max(Some(issue));
            }
        }
        Contribution::Dilution { issue, amount, pct } => {
            run.dilutions = (run.dilutions as i64 + sign) as u32;
            run.amount_sum += sign * amount;
            run.pct_sum += sign as i128 * pct;
            if ev.add && Horizon::ALL[ev.horizon as usize] == Horizon::AllTime {
                state.last_dilution = state.last_dilution.max(Some(issue));
            }
        }
    }
}

/// Builds rows for one buyer's invoices, already in output order.
fn build_partition(
    invoices: &[&InvoiceRecord],
    macro_index: &MacroIndex,
    knowledge: HistoryKnowledge,
) -> Vec<FeatureRow> {
    let mut states: Vec<ScopeState> = vec![ScopeState::default()];
    let mut pair_slot: HashMap<&str, usize> = HashMap::new();
    let mut timeline: BinaryHeap<Reverse<TimelineEvent>> = BinaryHeap::new();
    let mut seq = 0u64;
    let mut out = Vec::with_capacity(invoices.len());

    let mut schedule = |timeline: &mut BinaryHeap<Reverse<TimelineEvent>>,
                        slot: usize,
                        start: NaiveDate,
                        issue: NaiveDate,
                        contribution: Contribution| {
        for (h, horizon) in Horizon::ALL.iter().enumerate() {
            // active for query dates in [start, issue + days]
            let expire = horizon.days().map(|d| issue + Duration::days(d + 1));
            if expire.is_some_and(|e| e <= start) {
                continue;
            }
            seq += 1;
            timeline.push(Reverse(TimelineEvent {
                date: start,
                seq,
                scope_state: slot,
                horizon: h as u8,
                add: true,
                contribution,
            }));
            if let Some(e) = expire {
                seq += 1;
                timeline.push(Reverse(TimelineEvent {
                    date: e,
                    seq,
                    scope_state: slot,
                    horizon: h as u8,
                    add: false,
                    contribution,
                }));
            }
        }
    };

    let mut i = 0;
    while i < invoices.len() {
        let t = invoices[i].issue_date;
        let day_end = i + invoices[i..].iter().take_while(|r| r.issue_date == t).count();

        while timeline.peek().is_some_and(|Reverse(ev)| ev.date <= t) {
            let Reverse(ev) = timeline.pop().unwrap();
            apply(&mut states[ev.scope_state], &ev);
        }

        let macro_features = macro_index.features(t);
        let mut slots = Vec::with_capacity(day_end - i);
        for rec in &invoices[i..day_end] {
            let next = states.len();
            let slot = *pair_slot.entry(rec.supplier_id.as_str()).or_insert(next);
            if slot == next {
                states.push(ScopeState::default());
            }
            slots.push(slot);
            out.push(FeatureRow {
                buyer_id: rec.buyer_id.clone(),
                supplier_id: rec.supplier_id.clone(),
                invoice_number: rec.invoice_number.clone(),
                issue_date: t,
                approved_amount: rec.approved_amount,
                buyer: states[0].features(t),
                pair: states[slot].features(t),
                log_approved_amount: rec.approved_amount.to_major().ln(),
                month: t.month(),
                day_of_week: t.weekday().num_days_from_monday(),
                macro_features,
                labels: derive_labels(rec),
            });
        }

        for (rec, &slot) in invoices[i..day_end].iter().zip(&slots) {
            let next_day = t + Duration::days(1);
            let invoice = Contribution::Invoice { issue: t };
            schedule(&mut timeline, 0, next_day, t, invoice);
            schedule(&mut timeline, slot, next_day, t, invoice);
            if let (Some(paid_on), true) = (rec.payment_date, rec.dilution_amount > Money::ZERO) {
                let known_from = match knowledge {
                    HistoryKnowledge::Issue => next_day,
                    HistoryKnowledge::Payment => paid_on.max(t) + Duration::days(1),
                };
                let dilution = Contribution::Dilution {
                    issue: t,
                    amount: rec.dilution_amount.0,
                    pct: pct_fixed(rec.dilution_amount, rec.approved_amount),
                };
                schedule(&mut timeline, 0, known_from, t, dilution);
                schedule(&mut timeline, slot, known_from, t, dilution);
            }
        }
        i = day_end;
    }
    out
}

/// Orders invoices by (issue_date, buyer, supplier, invoice_number), with the
/// remaining fields as a final tie-break.
pub fn sort_invoices(invoices: &mut [InvoiceRecord]) {
    invoices.sort_by(|a, b| {
        (a.issue_date, &a.buyer_id, &a.supplier_id, &a.invoice_number)
            .cmp(&(b.issue_date, &b.buyer_id, &b.supplier_id, &b.invoice_number))
            .then_with(|| {
                (a.approved_amount, a.total_payment_amount, a.payment_date, a.dilution_amount, &a.currency)
                    .cmp(&(b.approved_amount, b.total_payment_amount, b.payment_date, b.dilution_amount, &b.currency))
            })
    });
}

/// Applies the currency rule: filter when a code is given, otherwise
/// require a single currency.
pub fn select_currency(invoices: Vec<InvoiceRecord>, currency: Option<&str>) -> Result<Vec<InvoiceRecord>> {
    match currency {
        Some(code) => Ok(invoices.into_iter().filter(|r| r.currency == code).collect()),
        None => {
            let mut codes: Vec<&str> = invoices.iter().map(|r| r.currency.as_str()).collect();
            codes.sort_unstable();
            codes.dedup();
            if codes.len() > 1 {
                return Err(LabError::Data(format!(
                    "mixed currencies ({}); select one with a currency filter",
                    codes.join(", ")
                )));
            }
            Ok(invoices)
        }
    }
}

/// Computes one leakage-free row per invoice, ordered by
/// (issue_date, buyer_id, supplier_id, invoice_number).
pub fn build_features(
    invoices: &[InvoiceRecord],
    macro_series: &[MacroObservation],
    options: &FeatureOptions,
) -> Result<Vec<FeatureRow>> {
    let mut invoices = select_currency(invoices.to_vec(), options.currency.as_deref())?;
    sort_invoices(&mut invoices);
    let macro_index = MacroIndex::new(macro_series);

    let mut partitions: BTreeMap<&str, Vec<(usize, &InvoiceRecord)>> = BTreeMap::new();
    for (pos, rec) in invoices.iter().enumerate() {
        partitions.entry(rec.buyer_id.as_str()).or_default().push((pos, rec));
    }
    let partitions: Vec<Vec<(usize, &InvoiceRecord)>> = partitions.into_values().collect();
    let built: Vec<Vec<(usize, FeatureRow)>> = partitions
        .par_iter()
        .map(|part| {
            let recs: Vec<&InvoiceRecord> = part.iter().map(|(_, r)| *r).collect();
            let rows = build_partition(&recs, &macro_index, options.history_knowledge);
            part.iter().map(|(pos, _)| *pos).zip(rows).collect()
        })
        .collect();

    let mut slots: Vec<Option<FeatureRow>> = vec![None; invoices.len()];
    for (pos, row) in built.into_iter().flatten() {
        slots[pos] = Some(row);
    }
    let rows: Vec<FeatureRow> = slots.into_iter().map(|r| r.expect("every invoice featurized")).collect();
    for row in &rows {
        row.check_invariants()?;
    }
    Ok(rows)
}

pub const LABEL_COLUMNS: [&str; 3] = ["diluted", "dilution_amount", "dilution_pct"];
pub const KEY_COLUMNS: [&str; 4] = ["buyer_id", "supplier_id", "invoice_number", "issue_date"];

/// Writes rows as a delimited file: key columns, `layout` columns, labels.
/// Unpaid invoices leave the label fields empty.
pub fn write_feature_rows_to<W: Write>(writer: W, rows: &[FeatureRow], layout: &FeatureLayout) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let header: Vec<&str> = KEY_COLUMNS
        .iter()
        .copied()
        .chain(layout.names.iter().map(String::as_str))
        .chain(LABEL_COLUMNS)
        .collect();
    wtr.write_record(&header)?;
    for row in rows {
        let mut fields: Vec<String> = vec![
            row.buyer_id.clone(),
            row.supplier_id.clone(),
            row.invoice_number.clone(),
            row.issue_date.format("%Y-%m-%d").to_string(),
        ];
        fields.extend(layout.row_values(row).iter().map(|v| v.to_string()));
        match &row.labels {
            Some(l) => {
                fields.push(u8::from(l.diluted).to_string());
                fields.push(l.dilution_amount.to_string());
                fields.push(l.dilution_pct.to_string());
            }
            None => fields.extend(std::iter::repeat_n(String::new(), 3)),
        }
        wtr.write_record(&fields)?;
    }
    wtr.flush().map_err(|e| LabError::io("<feature writer>", e))?;
    Ok(())
}

pub fn write_feature_rows(path: &Path, rows: &[FeatureRow], layout: &FeatureLayout) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LabError::io(path, e))?;
    write_feature_rows_to(std::io::BufWriter::new(file), rows, layout)
}

impl fmt::Display for HistoryKnowledge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HistoryKnowledge::Issue => "issue",
            HistoryKnowledge::Payment => "payment",
        })
    }
}
