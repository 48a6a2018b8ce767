use std::io::Write;

use climdiff_autograd::{read_checkpoint, write_checkpoint, NnError, Tensor};
use proptest::prelude::*;

fn tensors() -> impl Strategy<Value = Vec<(String, Tensor<f32>)>> {
    let one = (proptest::collection::vec(1usize..5, 0..4), "[a-z.]{1,12}").prop_flat_map(|(shape, name)| {
        let len: usize = shape.iter().product();
        proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), len)
            .prop_map(move |data| (name.clone(), Tensor::new(shape.clone(), data).unwrap()))
    });
    proptest::collection::vec(one, 0..6)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn round_trip_is_bit_exact(ts in tensors()) {
        let dir = std::env::temp_dir().join(format!("ckpt-prop-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("a.ckpt");
        write_checkpoint(&path, &ts).unwrap();
        let back: Vec<(String, Tensor<f32>)> = read_checkpoint(&path).unwrap();
        prop_assert_eq!(back.len(), ts.len());
        for ((n1, t1), (n2, t2)) in ts.iter().zip(&back) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            let b1: Vec<u32> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b2: Vec<u32> = t2.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(b1, b2);
        }
    }
}

#[test]
fn rejects_bad_magic_and_truncation() {
    let dir = std::env::temp_dir().join(format!("ckpt-bad-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("bad.ckpt");
    std::fs::File::create(&path).unwrap().write_all(b"NOPE\0\0\0\0").unwrap();
    assert!(matches!(read_checkpoint::<f32>(&path), Err(NnError::Malformed(_))));

    let good = vec![("w".to_string(), Tensor::new(vec![2], vec![1.0f32, 2.0]).unwrap())];
    write_checkpoint(&path, &good).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(matches!(read_checkpoint::<f32>(&path), Err(NnError::Malformed(_))));
}
