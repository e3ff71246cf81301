use proptest::prelude::*;
use tfm_core::neural::{Init, ParamStore, Tensor2D};
use tfm_core::tensor_io::{decode, encode, NamedTensors};

fn tensors() -> impl Strategy<Value = NamedTensors> {
    prop::collection::btree_map(
        "[a-z][a-z0-9_.]{0,12}",
        (0usize..5, 0usize..5).prop_flat_map(|(r, c)| {
            prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), r * c)
                .prop_map(move |d| Tensor2D::from_vec(r, c, d).unwrap())
        }),
        0..6,
    )
    .prop_map(|m| m.into_iter().collect())
}

proptest! {
    #[test]
    fn encode_decode_round_trips_bitwise(t in tensors()) {
        let bytes = encode(&t).unwrap();
        prop_assert_eq!(&bytes[..4], b"TFM1");
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), t.len());
        for ((na, a), (nb, b)) in back.iter().zip(&t) {
            prop_assert_eq!(na, nb);
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn truncation_is_always_detected(t in tensors(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&t).unwrap();
        let n = cut.index(bytes.len());
        prop_assert!(decode(&bytes[..n]).is_err());
    }

    #[test]
    fn initialization_ignores_registration_order(seed in any::<u64>(), names in prop::collection::btree_set("[a-z]{1,6}", 1..6)) {
        let names: Vec<String> = names.into_iter().collect();
        let mut a = ParamStore::new(seed);
        let mut b = ParamStore::new(seed);
        for n in &names {
            a.register(n, 3, 4, Init::XavierUniform).unwrap();
        }
        for n in names.iter().rev() {
            b.register(n, 3, 4, Init::XavierUniform).unwrap();
        }
        for n in &names {
            prop_assert_eq!(a.get(n).unwrap(), b.get(n).unwrap());
        }
    }
}
