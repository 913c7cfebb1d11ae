use exact_alloc::corpus::Document;
use exact_alloc::objective::CeDump;
use exact_alloc::packer::{pack_stream, PackPolicy, PackedStream};
use exact_alloc::toylm::ToyModel;
use exact_alloc::weights::{weights_for_stream, WeightFile, WeightKind, WeightPolicy};

fn two_segment_stream() -> PackedStream {
    let docs = vec![Document::new("a", vec![1; 5]), Document::new("b", vec![2; 3])];
    pack_stream(docs, &PackPolicy::new(8)).unwrap()
}

#[test]
fn decoded_stream_exposes_segment_blocks() {
    let s = two_segment_stream();
    let decoded = PackedStream::decode(&s.encode().unwrap()).unwrap();
    let blocks: Vec<usize> = decoded.sequences[0].segments().map(|(a, b)| b - a).collect();
    assert_eq!(blocks, vec![5, 3]);
    assert_eq!(decoded.sequences[0].effective_context, vec![0, 1, 2, 3, 4, 0, 1, 2]);
    assert_eq!(decoded.fingerprint().unwrap(), s.fingerprint().unwrap());
}

#[test]
fn identity_weight_file_is_all_ones() {
    let s = two_segment_stream();
    let policy = WeightPolicy::with_kind(WeightKind::Identity);
    let (table, tw) = weights_for_stream(&s, &policy).unwrap();
    let wf = WeightFile::decode(&WeightFile::new(&table, &s, &tw).encode().unwrap()).unwrap();
    wf.check_stream(&s).unwrap();
    assert!(wf.weights.iter().flatten().all(|&w| w == 1.0));
    assert_eq!(wf.policy.kind, WeightKind::Identity);
}

#[test]
fn weight_file_rejects_tampering() {
    let s = two_segment_stream();
    let policy = WeightPolicy {
        tau: 0,
        ..WeightPolicy::exact()
    };
    let (table, tw) = weights_for_stream(&s, &policy).unwrap();
    let bytes = WeightFile::new(&table, &s, &tw).encode().unwrap();
    // First fingerprint byte follows magic (4) and version (2).
    let mut tampered = bytes.clone();
    tampered[6] ^= 0xff;
    let wf = WeightFile::decode(&tampered).unwrap();
    assert_eq!(wf.check_stream(&s).unwrap_err().kind(), "fingerprint_mismatch");
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert_eq!(WeightFile::decode(&bad_magic).unwrap_err().kind(), "format");
    let mut bad_version = bytes;
    bad_version[4] = 9;
    assert_eq!(WeightFile::decode(&bad_version).unwrap_err().kind(), "format");
}

#[test]
fn stream_rejects_truncation_and_bad_magic() {
    let bytes = two_segment_stream().encode().unwrap();
    assert!(PackedStream::decode(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[1] = b'?';
    assert_eq!(PackedStream::decode(&bad).unwrap_err().kind(), "format");
}

#[test]
fn ce_dump_is_stream_aligned() {
    let d = CeDump {
        sequences: vec![vec![0.5; 8], vec![1.5; 8]],
    };
    let bytes = d.encode();
    assert_eq!(bytes.len(), 4 + 2 + 8 + 2 * 8 * 8);
    assert_eq!(CeDump::decode(&bytes, 8).unwrap(), d);
    assert!(CeDump::decode(&bytes[..bytes.len() - 8], 8).is_err());
}

#[test]
fn model_checkpoint_roundtrip() {
    let m = ToyModel::new(12, 4, 3);
    let bytes = m.encode();
    assert_eq!(ToyModel::decode(&bytes).unwrap(), m);
    assert!(ToyModel::decode(&bytes[..bytes.len() - 3]).is_err());
}
