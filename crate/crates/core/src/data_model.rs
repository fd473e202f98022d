//! Invoice and macro-series schemas, record validation, and the canonical
//! delimited file formats.
//!
//! Money is carried as integer minor units ([`Money`]) so that the dilution
//! identity `dilution = max(approved - paid, 0)` can be checked exactly and
//! files round-trip bit-for-bit.

use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const INVOICE_HEADER: [&str; 9] = [
    "buyer_id",
    "supplier_id",
    "invoice_number",
    "currency",
    "approved_amount",
    "total_payment_amount",
    "issue_date",
    "payment_date",
    "dilution_amount",
];

pub const MACRO_HEADER: [&str; 4] = ["indicator", "period_end", "publication_date", "value"];

/// Allowed gap, in minor units, between the stored dilution and the one
/// implied by approved and paid amounts.
pub const DILUTION_TOLERANCE: Money = Money(1);

const DATE_FORMAT: &str = "%Y-%m-%d";

/// A monetary amount in minor currency units (cents).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Money(pub i64);

impl Money {
    pub const ZERO: Money = Money(0);

    pub fn from_minor(minor: i64) -> Self {
        Money(minor)
    }

    pub fn minor(self) -> i64 {
        self.0
    }

    /// Value in major units (e.g. dollars).
    pub fn to_major(self) -> f64 {
        self.0 as f64 / 100.0
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        write!(f, "{sign}{}.{:02}", abs / 100, abs % 100)
    }
}

impl FromStr for Money {
    type Err = String;

    /// Accepts `123`, `123.4` and `123.45`; more than two decimals is an error.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        let (neg, body) = match s.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let (whole, frac) = match body.split_once('.') {
            Some((w, f)) => (w, f),
            None => (body, ""),
        };
        if whole.is_empty()
            || !whole.bytes().all(|b| b.is_ascii_digit())
            || !frac.bytes().all(|b| b.is_ascii_digit())
            || frac.len() > 2
        {
            return Err(format!("invalid amount {s:?}"));
        }
        let whole: i64 = whole.parse().map_err(|_| format!("invalid amount {s:?}"))?;
        let frac_minor = match frac.len() {
            0 => 0,
            1 => frac.parse::<i64>().unwrap() * 10,
            _ => frac.parse::<i64>().unwrap(),
        };
        let minor = whole
            .checked_mul(100)
            .and_then(|w| w.checked_add(frac_minor))
            .ok_or_else(|| format!("amount out of range {s:?}"))?;
        Ok(Money(if neg { -minor } else { minor }))
    }
}

/// One funded invoice.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InvoiceRecord {
    pub buyer_id: String,
    pub supplier_id: String,
    pub invoice_number: String,
    pub currency: String,
    pub approved_amount: Money,
    pub total_payment_amount: Money,
    pub issue_date: NaiveDate,
    /// `None` while the invoice is unpaid.
    pub payment_date: Option<NaiveDate>,
    pub dilution_amount: Money,
}

impl InvoiceRecord {
    /// Checks the record invariants and returns the first violation.
    ///
    /// Unpaid invoices have no realized dilution yet, so only the amount
    /// bounds are checked for them.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.approved_amount <= Money::ZERO {
            return Err("approved_amount must be > 0".into());
        }
        if self.total_payment_amount < Money::ZERO {
            return Err("total_payment_amount must be >= 0".into());
        }
        if self.dilution_amount < Money::ZERO {
            return Err("dilution_amount must be >= 0".into());
        }
        if self.dilution_amount > self.approved_amount {
            return Err("dilution exceeds approved amount".into());
        }
        if self.currency.len() != 3 || !self.currency.bytes().all(|b| b.is_ascii_uppercase()) {
            return Err(format!("invalid currency code {:?}", self.currency));
        }
        if let Some(paid_on) = self.payment_date {
            if paid_on < self.issue_date {
                return Err("payment_date before issue_date".into());
            }
            let implied = (self.approved_amount.0 - self.total_payment_amount.0).max(0);
            if (self.dilution_amount.0 - implied).abs() > DILUTION_TOLERANCE.0 {
                return Err("dilution mismatch".into());
            }
        }
        Ok(())
    }

    pub fn is_paid(&self) -> bool {
        self.payment_date.is_some()
    }
}

/// Label triple derived from a paid invoice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DilutionLabels {
    pub diluted: bool,
    pub dilution_amount: Money,
    pub dilution_pct: f64,
}

/// Labels for a validated record; `None` for unpaid invoices, whose outcome
/// is not yet realized.
pub fn derive_labels(record: &InvoiceRecord) -> Option<DilutionLabels> {
    record.payment_date?;
    let amount = record.dilution_amount;
    Some(DilutionLabels {
        diluted: amount > Money::ZERO,
        dilution_amount: amount,
        dilution_pct: amount.0 as f64 / record.approved_amount.0 as f64,
    })
}

/// A per-line ingest failure in lenient mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedInvoices {
    pub records: Vec<InvoiceRecord>,
    pub rejections: Vec<Rejection>,
}

fn parse_date(field: &str, name: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(field.trim(), DATE_FORMAT)
        .map_err(|_| format!("malformed {name} {field:?}"))
}

fn parse_amount(field: &str, name: &str) -> std::result::Result<Money, String> {
    field.parse::<Money>().map_err(|e| format!("{name}: {e}"))
}

fn invoice_from_fields(rec: &csv::StringRecord) -> std::result::Result<InvoiceRecord, String> {
    if rec.len() != INVOICE_HEADER.len() {
        return Err(format!(
            "expected {} fields, found {}",
            INVOICE_HEADER.len(),
            rec.len()
        ));
    }
    let payment_date = match rec[7].trim() {
        "" => None,
        s => Some(parse_date(s, "payment_date")?),
    };
    let record = InvoiceRecord {
        buyer_id: rec[0].to_string(),
        supplier_id: rec[1].to_string(),
        invoice_number: rec[2].to_string(),
        currency: rec[3].to_string(),
        approved_amount: parse_amount(&rec[4], "approved_amount")?,
        total_payment_amount: parse_amount(&rec[5], "total_payment_amount")?,
        issue_date: parse_date(&rec[6], "issue_date")?,
        payment_date,
        dilution_amount: parse_amount(&rec[8], "dilution_amount")?,
    };
    record.validate()?;
    Ok(record)
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    if found.iter().ne(expected.iter().copied()) {
        return Err(LabError::Data(format!(
            "malformed header: expected `{}`, found `{}`",
            expected.join(","),
            found.iter().collect::<Vec<_>>().join(",")
        )));
    }
    Ok(())
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader)
}

/// Reads invoices from any reader in the canonical format.
pub fn read_invoices<R: Read>(reader: R, strict: bool) -> Result<ParsedInvoices> {
    let mut rdr = csv_reader(reader);
    check_header(rdr.headers()?, &INVOICE_HEADER)?;
    let mut out = ParsedInvoices::default();
    let mut row = csv::StringRecord::new();
    loop {
        let line = rdr.position().line() + 1;
        match rdr.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {
                let line = row.position().map_or(line, |p| p.line());
                match invoice_from_fields(&row) {
                    Ok(rec) => out.records.push(rec),
                    Err(reason) if strict => return Err(LabError::Rejected { line, reason }),
                    Err(reason) => out.rejections.push(Rejection { line, reason }),
                }
            }
            Err(e) => {
                if strict {
                    return Err(e.into());
                }
                out.rejections.push(Rejection {
                    line,
                    reason: e.to_string(),
                });
            }
        }
    }
    Ok(out)
}

/// Parses an invoice file. In strict mode the first rejected line aborts.
pub fn parse_invoices(path: &Path, strict: bool) -> Result<ParsedInvoices> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    read_invoices(file, strict).map_err(|e| e.context(path.display().to_string()))
}

pub fn write_invoices_to<W: Write>(writer: W, records: &[InvoiceRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(INVOICE_HEADER)?;
    for r in records {
        let approved = r.approved_amount.to_string();
        let paid = r.total_payment_amount.to_string();
        let issue = r.issue_date.format(DATE_FORMAT).to_string();
        let payment = r
            .payment_date
            .map(|d| d.format(DATE_FORMAT).to_string())
            .unwrap_or_default();
        let dilution = r.dilution_amount.to_string();
        wtr.write_record([
            r.buyer_id.as_str(),
            r.supplier_id.as_str(),
            r.invoice_number.as_str(),
            r.currency.as_str(),
            &approved,
            &paid,
            &issue,
            &payment,
            &dilution,
        ])?;
    }
    wtr.flush().map_err(|e| LabError::io("<invoice writer>", e))?;
    Ok(())
}

pub fn write_invoices(path: &Path, records: &[InvoiceRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    write_invoices_to(std::io::BufWriter::new(file), records)
}

/// The five macroeconomic series used as context features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    Unemployment,
    Pce,
    Gdp,
    IndustrialProduction,
    RetailSales,
}

impl Indicator {
    pub const ALL: [Indicator; 5] = [
        Indicator::Unemployment,
        Indicator::Pce,
        Indicator::Gdp,
        Indicator::IndustrialProduction,
        Indicator::RetailSales,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Indicator::Unemployment => "unemployment",
            Indicator::Pce => "pce",
            Indicator::Gdp => "gdp",
            Indicator::IndustrialProduction => "industrial_production",
            Indicator::RetailSales => "retail_sales",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Indicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Indicator {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Indicator::ALL
            .into_iter()
            .find(|i| i.name() == s)
            .ok_or_else(|| LabError::Data(format!("unknown indicator {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroObservation {
    pub indicator: Indicator,
    pub period_end: NaiveDate,
    pub publication_date: NaiveDate,
    pub value: f64,
}

/// Checks the per-series invariants and returns observations ordered by
/// (indicator, period_end).
pub fn validate_macro(mut obs: Vec<MacroObservation>) -> Result<Vec<MacroObservation>> {
    for o in &obs {
        if o.publication_date < o.period_end {
            return Err(LabError::Data(format!(
                "{} {}: publication_date before period_end",
                o.indicator, o.period_end
            )));
        }
        if !o.value.is_finite() {
            return Err(LabError::Data(format!(
                "{} {}: non-finite value",
                o.indicator, o.period_end
            )));
        }
    }
    obs.sort_by_key(|o| (o.indicator, o.period_end));
    if let Some(w) = obs
        .windows(2)
        .find(|w| w[0].indicator == w[1].indicator && w[0].period_end == w[1].period_end)
    {
        return Err(LabError::Data(format!(
            "{}: duplicate period_end {}",
            w[0].indicator, w[0].period_end
        )));
    }
    Ok(obs)
}

pub fn read_macro<R: Read>(reader: R) -> Result<Vec<MacroObservation>> {
    let mut rdr = csv_reader(reader);
    check_header(rdr.headers()?, &MACRO_HEADER)?;
    let mut obs = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let reject = |reason: String| LabError::Rejected { line, reason };
        if row.len() != MACRO_HEADER.len() {
            return Err(reject(format!("expected 4 fields, found {}", row.len())));
        }
        let indicator = row[0].parse::<Indicator>().map_err(|e| reject(e.to_string()))?;
        let period_end = parse_date(&row[1], "period_end").map_err(reject)?;
        let publication_date = parse_date(&row[2], "publication_date").map_err(reject)?;
        let value = row[3]
            .trim()
            .parse::<f64>()
            .map_err(|_| reject(format!("malformed value {:?}", &row[3])))?;
        obs.push(MacroObservation {
            indicator,
            period_end,
            publication_date,
            value,
        });
    }
    validate_macro(obs)
}

pub fn parse_macro(path: &Path) -> Result<Vec<MacroObservation>> {
    let file = File::open(path).map_err(|e| LabError::io(path, e))?;
    read_macro(file).map_err(|e| e.context(path.display().to_string()))
}

pub fn write_macro_to<W: Write>(writer: W, obs: &[MacroObservation]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(MACRO_HEADER)?;
    for o in obs {
        wtr.write_record([
            o.indicator.name().to_string(),
            o.period_end.format(DATE_FORMAT).to_string(),
            o.publication_date.format(DATE_FORMAT).to_string(),
            o.value.to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| LabError::io("<macro writer>", e))?;
    Ok(())
}

pub fn write_macro(path: &Path, obs: &[MacroObservation]) -> Result<()> {
    let file = File::create(path).map_err(|e| LabError::io(path, e))?;
    write_macro_to(std::io::BufWriter::new(file), obs)
}
