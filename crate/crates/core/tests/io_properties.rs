use mplnet::io::{self, NamedMatrix};
use nalgebra::DMatrix;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matrices_survive_a_write_read_cycle(
        rows in 1usize..6,
        cols in 1usize..6,
        values in proptest::collection::vec(proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO, 36),
    ) {
        let m = NamedMatrix {
            corner: "feature".into(),
            row_names: (0..rows).map(|i| format!("r{i}")).collect(),
            col_names: (0..cols).map(|j| format!("c{j}")).collect(),
            values: DMatrix::from_fn(rows, cols, |i, j| values[i * 6 + j]),
        };
        let mut buf = Vec::new();
        io::write_matrix(&mut buf, &m).unwrap();
        let back = io::read_matrix(buf.as_slice()).unwrap();
        for (a, b) in m.values.iter().zip(back.values.iter()) {
            prop_assert!(a == b, "{a:e} came back as {b:e}");
        }
        prop_assert_eq!(back.row_names, m.row_names);
    }

    #[test]
    fn named_values_survive_a_write_read_cycle(values in proptest::collection::vec(-1e300f64..1e300, 1..20)) {
        let names: Vec<String> = (0..values.len()).map(|i| format!("s{i}")).collect();
        let mut buf = Vec::new();
        io::write_named_values(&mut buf, ("sample", "scaling"), &names, &values).unwrap();
        let (n2, v2) = io::read_named_values(buf.as_slice()).unwrap();
        prop_assert_eq!(n2, names);
        prop_assert_eq!(v2, values);
    }
}
