use augnet::encoder::{init_params, EncoderSpec};
use augnet::losses::LossKind;
use augnet::store::{
    checkpoint_from_bytes, checkpoint_to_bytes, embeddings_from_bytes, embeddings_to_bytes, pack_dataset, parse_config,
    parse_labels, unpack_dataset, Checkpoint, RunConfig,
};
use augnet::synth::textured_sources;
use augnet::{Error, Matrix};
use proptest::prelude::*;

fn checkpoint_bytes() -> Vec<u8> {
    let spec = EncoderSpec {
        n_blocks: 1,
        in_side: 4,
        block_channels: vec![2],
        embed_dim: 3,
        ..EncoderSpec::default()
    };
    let ckpt = Checkpoint {
        state: init_params(&spec).unwrap(),
        loss_kind: LossKind::Contrast,
        seed: 1,
    };
    checkpoint_to_bytes(&ckpt, true).unwrap()
}

fn embedding_bytes() -> Vec<u8> {
    let m = Matrix::new(3, 2, vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25]).unwrap();
    let ids = ["a", "b", "c"].map(String::from);
    embeddings_to_bytes(&ids, &m).unwrap()
}

fn dataset_bytes() -> Vec<u8> {
    pack_dataset(&textured_sources(2, 4, 0)).unwrap()
}

/// Every decode failure must surface as one of the typed store errors.
fn is_typed(e: &Error) -> bool {
    matches!(
        e,
        Error::BadMagic { .. }
            | Error::Truncated { .. }
            | Error::TrailingBytes { .. }
            | Error::Version { .. }
            | Error::Schema { .. }
            | Error::Shape(_)
            | Error::InvalidArgument(_)
            | Error::DuplicateId(_)
            | Error::NonFinite(_)
    )
}

#[derive(Debug, Clone)]
enum Mutation {
    Truncate(usize),
    Flip(usize, u8),
    Insert(usize, u8),
    Splice(usize, Vec<u8>),
}

fn mutation() -> impl Strategy<Value = Mutation> {
    prop_oneof![
        any::<usize>().prop_map(Mutation::Truncate),
        (any::<usize>(), 1u8..=255).prop_map(|(i, b)| Mutation::Flip(i, b)),
        (any::<usize>(), any::<u8>()).prop_map(|(i, b)| Mutation::Insert(i, b)),
        (any::<usize>(), prop::collection::vec(any::<u8>(), 1..8)).prop_map(|(i, b)| Mutation::Splice(i, b)),
    ]
}

fn apply(bytes: &[u8], m: &Mutation) -> Vec<u8> {
    let mut out = bytes.to_vec();
    let n = out.len();
    match m {
        Mutation::Truncate(i) => out.truncate(i % n),
        Mutation::Flip(i, b) => out[i % n] ^= b,
        Mutation::Insert(i, b) => out.insert(i % (n + 1), *b),
        Mutation::Splice(i, b) => {
            let at = i % n;
            let end = (at + b.len()).min(n);
            out.splice(at..end, b.iter().copied());
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn mutated_checkpoints_never_panic(m in mutation()) {
        // Flips inside float blobs can still decode; anything else must be a typed error.
        if let Err(e) = checkpoint_from_bytes(&apply(&checkpoint_bytes(), &m)) {
            prop_assert!(is_typed(&e), "{e:?}");
        }
    }

    #[test]
    fn mutated_embedding_stores_never_panic(m in mutation()) {
        if let Err(e) = embeddings_from_bytes(&apply(&embedding_bytes(), &m)) {
            prop_assert!(is_typed(&e), "{e:?}");
        }
    }

    #[test]
    fn mutated_datasets_never_panic(m in mutation()) {
        if let Err(e) = unpack_dataset(&apply(&dataset_bytes(), &m)) {
            prop_assert!(is_typed(&e), "{e:?}");
        }
    }

    #[test]
    fn random_bytes_are_rejected(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        prop_assert!(checkpoint_from_bytes(&bytes).is_err());
        prop_assert!(embeddings_from_bytes(&bytes).is_err());
        prop_assert!(unpack_dataset(&bytes).is_err());
    }

    #[test]
    fn mutated_configs_never_panic(m in mutation()) {
        let text = RunConfig::default().to_json();
        let bytes = apply(text.as_bytes(), &m);
        if let Ok(text) = String::from_utf8(bytes) {
            if let Err(e) = parse_config(&text) {
                prop_assert!(matches!(e, Error::Schema { .. }), "{e:?}");
            }
        }
    }

    #[test]
    fn arbitrary_label_text_never_panics(text in "[0-9a-z\\- \n]{0,64}") {
        if let Err(e) = parse_labels(&text) {
            prop_assert!(matches!(e, Error::Schema { .. }), "{e:?}");
        }
    }
}

#[test]
fn every_checkpoint_truncation_is_typed() {
    let bytes = checkpoint_bytes();
    for len in 0..bytes.len() {
        let e = checkpoint_from_bytes(&bytes[..len]).unwrap_err();
        assert!(is_typed(&e), "len {len}: {e:?}");
    }
}

#[test]
fn oversized_header_fields_are_typed() {
    let mut bytes = embedding_bytes();
    bytes[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
    bytes[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(is_typed(&embeddings_from_bytes(&bytes).unwrap_err()));
    let mut data = dataset_bytes();
    for off in [8, 12, 16, 20] {
        data[off..off + 4].copy_from_slice(&u32::MAX.to_le_bytes());
    }
    assert!(is_typed(&unpack_dataset(&data).unwrap_err()));

    let bytes = checkpoint_bytes();
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = std::str::from_utf8(&bytes[12..12 + header_len]).unwrap();
    let huge = header.replacen("\"block_channels\":[2]", "\"block_channels\":[4000000000000]", 1);
    assert_ne!(huge, header);
    let mut tampered = bytes[..8].to_vec();
    tampered.extend_from_slice(&(huge.len() as u32).to_le_bytes());
    tampered.extend_from_slice(huge.as_bytes());
    tampered.extend_from_slice(&bytes[12 + header_len..]);
    assert!(matches!(checkpoint_from_bytes(&tampered), Err(Error::Schema { .. })));
}
