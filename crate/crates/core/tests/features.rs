mod common;

use chrono::{Duration, NaiveDate};
use dilution_core::data_model::{Indicator, InvoiceRecord, MacroObservation, Money};
use dilution_core::feature_engine::{build_features, FeatureOptions, HistoryKnowledge};
use proptest::prelude::*;

fn day(offset: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + Duration::days(offset)
}

prop_compose! {
    fn invoice(idx: usize)(
        buyer in 0..2u8,
        supplier in 0..3u8,
        issue in 0..900i64,
        approved in 1..50_000i64,
        paid_after in prop::option::of(0..120i64),
        diluted in any::<bool>(),
        share in 1..100i64,
    ) -> InvoiceRecord {
        let dilution = if diluted && paid_after.is_some() { (approved * share / 100).max(1) } else { 0 };
        InvoiceRecord {
            buyer_id: format!("B{buyer}"),
            supplier_id: format!("S{supplier}"),
            invoice_number: format!("N{idx:05}"),
            currency: "EUR".into(),
            approved_amount: Money(approved),
            total_payment_amount: Money(if paid_after.is_some() { approved - dilution } else { 0 }),
            issue_date: day(issue),
            payment_date: paid_after.map(|d| day(issue + d)),
            dilution_amount: Money(dilution),
        }
    }
}

fn invoices() -> impl Strategy<Value = Vec<InvoiceRecord>> {
    (1..80usize).prop_flat_map(|n| (0..n).map(invoice).collect::<Vec<_>>())
}

fn macro_series() -> Vec<MacroObservation> {
    let mut out = Vec::new();
    for m in 0..36u32 {
        let period_end = NaiveDate::from_ymd_opt(2019 + (m / 12) as i32, m % 12 + 1, 1).unwrap() + chrono::Months::new(1)
            - Duration::days(1);
        for (k, ind) in Indicator::ALL.into_iter().enumerate() {
            out.push(MacroObservation {
                indicator: ind,
                period_end,
                publication_date: period_end + Duration::days(20 + 3 * k as i64),
                value: 100.0 + m as f64 + k as f64 * 0.5,
            });
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn streaming_rows_equal_rescan(invoices in invoices(), payment in any::<bool>()) {
        let knowledge = if payment { HistoryKnowledge::Payment } else { HistoryKnowledge::Issue };
        let series = macro_series();
        let opts = FeatureOptions { history_knowledge: knowledge, currency: None };
        let rows = build_features(&invoices, &series, &opts).unwrap();
        prop_assert_eq!(rows.len(), invoices.len());
        for row in &rows {
            if let Err(e) = common::check_row(&invoices, &series, row, knowledge) {
                return Err(TestCaseError::fail(e));
            }
        }
    }

    #[test]
    fn input_order_does_not_matter(invoices in invoices(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let series = macro_series();
        let opts = FeatureOptions::default();
        let mut shuffled = invoices.clone();
        shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(
            build_features(&invoices, &series, &opts).unwrap(),
            build_features(&shuffled, &series, &opts).unwrap()
        );
    }
}
