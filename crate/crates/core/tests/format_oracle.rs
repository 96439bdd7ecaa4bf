//! Cross-checks the model-file reader and writer against the `safetensors` crate.

use std::collections::HashMap;

use proptest::prelude::*;
use safetensors::tensor::{Dtype, SafeTensors, TensorView as StView};
use tensorvault::format::{
    parse_model, parse_model_with_metadata, write_model, write_model_with_metadata, DType, Metadata, TensorView,
};

fn st_dtype(d: DType) -> Dtype {
    match d {
        DType::F64 => Dtype::F64,
        DType::F32 => Dtype::F32,
        DType::F16 => Dtype::F16,
        DType::BF16 => Dtype::BF16,
        DType::I64 => Dtype::I64,
        DType::I32 => Dtype::I32,
        DType::I16 => Dtype::I16,
        DType::I8 => Dtype::I8,
        DType::U8 => Dtype::U8,
        DType::BOOL => Dtype::BOOL,
    }
}

type Spec = (String, DType, Vec<u64>, Vec<u8>);

fn tensor_specs() -> impl Strategy<Value = Vec<Spec>> {
    let one = (
        "[a-z][a-z0-9_.]{0,12}",
        prop::sample::select(DType::ALL.to_vec()),
        prop::collection::vec(0u64..5, 0..4),
        any::<u64>(),
    )
        .prop_map(|(name, dtype, shape, seed)| {
            let n: u64 = shape.iter().product();
            let bytes = tensorvault::synth::random_bytes(n as usize * dtype.size(), seed);
            (name, dtype, shape, bytes)
        });
    prop::collection::vec(one, 0..6).prop_map(|mut v| {
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v.dedup_by(|a, b| a.0 == b.0);
        v
    })
}

fn views(specs: &[Spec]) -> Vec<TensorView<'_>> {
    specs
        .iter()
        .map(|(n, d, s, b)| TensorView::new(n.clone(), *d, s.clone(), b).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn written_files_read_back_with_the_reference_reader(specs in tensor_specs()) {
        let bytes = write_model(&views(&specs)).unwrap();
        let st = SafeTensors::deserialize(&bytes).unwrap();
        prop_assert_eq!(st.len(), specs.len());
        for (name, dtype, shape, data) in &specs {
            let t = st.tensor(name).unwrap();
            prop_assert_eq!(t.dtype(), st_dtype(*dtype));
            prop_assert_eq!(t.shape().iter().map(|&x| x as u64).collect::<Vec<_>>(), shape.clone());
            prop_assert_eq!(t.data(), data.as_slice());
        }
    }

    #[test]
    fn reference_files_parse(specs in tensor_specs()) {
        let st_views: Vec<(String, StView<'_>)> = specs
            .iter()
            .map(|(n, d, s, b)| (n.clone(), StView::new(st_dtype(*d), s.iter().map(|&x| x as usize).collect(), b).unwrap()))
            .collect();
        let mut info = HashMap::new();
        info.insert("format".to_string(), "pt".to_string());
        let bytes = safetensors::serialize(st_views, &Some(info)).unwrap();
        let (parsed, meta) = parse_model_with_metadata(&bytes).unwrap();
        prop_assert_eq!(meta.get("format").map(String::as_str), Some("pt"));
        prop_assert_eq!(parsed.len(), specs.len());
        for (name, dtype, shape, data) in &specs {
            let t = parsed.iter().find(|t| &t.name == name).unwrap();
            prop_assert_eq!(t.dtype, *dtype);
            prop_assert_eq!(&t.shape, shape);
            prop_assert_eq!(t.bytes, data.as_slice());
        }
    }

    #[test]
    fn parse_of_write_is_identity(specs in tensor_specs()) {
        let mut meta = Metadata::new();
        meta.insert("k".into(), "v".into());
        let bytes = write_model_with_metadata(&views(&specs), Some(&meta)).unwrap();
        let (parsed, back) = parse_model_with_metadata(&bytes).unwrap();
        prop_assert_eq!(&back, &meta);
        let again = write_model_with_metadata(&parsed, Some(&meta)).unwrap();
        prop_assert_eq!(again, bytes);
    }
}

#[test]
fn malformed_input_is_rejected_by_both_readers() {
    // Header claims more bytes than the file holds.
    let mut bytes = 1000u64.to_le_bytes().to_vec();
    bytes.extend_from_slice(b"{}");
    assert!(parse_model(&bytes).is_err());
    assert!(SafeTensors::deserialize(&bytes).is_err());

    // Offsets that overlap.
    let header =
        br#"{"a":{"dtype":"U8","shape":[4],"data_offsets":[0,4]},"b":{"dtype":"U8","shape":[4],"data_offsets":[2,6]}}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header);
    bytes.extend_from_slice(&[0; 6]);
    assert!(parse_model(&bytes).is_err());
    assert!(SafeTensors::deserialize(&bytes).is_err());
}
