use gabic::range_coder::{self, build_logistic_cdf, CdfTable, Decoder, Encoder, DEFAULT_PRECISION};
use proptest::prelude::*;

fn arbitrary_table() -> impl Strategy<Value = CdfTable> {
    (-20i32..20, prop::collection::vec(0.0f64..1.0, 1..40), 0.0f64..0.1, 10u32..=16).prop_map(
        |(offset, pmf, escape, precision)| {
            let total: f64 = pmf.iter().sum::<f64>() + escape + 1e-9;
            let pmf: Vec<f64> = pmf.iter().map(|p| p / total).collect();
            CdfTable::from_pmf(offset, &pmf, escape / total, precision).unwrap()
        },
    )
}

proptest! {
    #[test]
    fn arbitrary_tables_round_trip(
        tables in prop::collection::vec(arbitrary_table(), 1..4),
        picks in prop::collection::vec((0usize..4, -300i32..300), 0..400),
    ) {
        let refs: Vec<&CdfTable> = picks.iter().map(|&(t, _)| &tables[t % tables.len()]).collect();
        let syms: Vec<i32> = picks.iter().map(|&(_, s)| s).collect();
        let bytes = range_coder::encode(&syms, &refs).unwrap();
        prop_assert_eq!(range_coder::decode(&bytes, &refs, syms.len()).unwrap(), syms);
    }

    #[test]
    fn interleaved_streams_stay_independent(a in prop::collection::vec(-50i32..50, 1..200), b in prop::collection::vec(-50i32..50, 1..200)) {
        let t = build_logistic_cdf(0.3, 2.0, DEFAULT_PRECISION, 1e-6).unwrap();
        let (mut ea, mut eb) = (Encoder::new(), Encoder::new());
        for i in 0..a.len().max(b.len()) {
            if let Some(&s) = a.get(i) { ea.encode(s, &t); }
            if let Some(&s) = b.get(i) { eb.encode(s, &t); }
        }
        let (ba, bb) = (ea.finish(), eb.finish());
        let mut da = Decoder::new(&ba).unwrap();
        let got: Vec<i32> = a.iter().map(|_| da.decode(&t).unwrap()).collect();
        prop_assert!(da.finish().is_ok());
        prop_assert_eq!(got, a);
        prop_assert_eq!(range_coder::decode(&bb, &vec![&t; b.len()], b.len()).unwrap(), b);
    }
}
