use prefixmerge::model::{DecodeOptions, ModelConfig, Transformer};
use prefixmerge::prefix::{PrefixDesign, PrefixMatrix, Region};
use prefixmerge::tasks::{export_jsonl, generate, load_jsonl, FieldMap, TaskKind};
use prefixmerge::vocab::Vocab;

fn cfg() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 80,
        max_src_len: 40,
        max_tgt_len: 16,
    }
}

#[test]
fn model_checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Transformer::new(cfg(), 4).unwrap();
    let path = dir.path().join("m.bin");
    m.save(&path).unwrap();
    let back = Transformer::load(&path).unwrap();
    assert_eq!(back.checksum(), m.checksum());
    let src = [6, 40, 41, 42];
    let opts = DecodeOptions::new(5, 1);
    assert_eq!(back.greedy_decode(&src, None, opts).unwrap(), m.greedy_decode(&src, None, opts).unwrap());
}

#[test]
fn prefix_round_trip_keeps_maps_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    let p = PrefixMatrix::new(PrefixDesign::manual(3, 2, 2).unwrap(), &cfg(), 1).unwrap();
    let path = dir.path().join("p.bin");
    p.save(&path).unwrap();
    let back = PrefixMatrix::load(&path).unwrap();
    assert_eq!(back.checksum(), p.checksum());
    assert_eq!(back.task_maps(), p.task_maps());
    assert_eq!(back.active_mask(), p.active_mask());
    assert_eq!(back.merge_for_target(), (0..7).collect::<Vec<_>>());
    assert_eq!(back.region_of(0), Region::Shared);
    assert_eq!(back.region_of(5), Region::Unique(1));
}

#[test]
fn corrupt_prefix_is_rejected() {
    let p = PrefixMatrix::new(PrefixDesign::manual(2, 1, 2).unwrap(), &cfg(), 1).unwrap();
    let mut bytes = p.to_bytes().unwrap();
    assert!(PrefixMatrix::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    bytes[0] ^= 0xff;
    assert!(PrefixMatrix::from_bytes(&bytes).is_err());
}

#[test]
fn prefix_for_another_model_is_incompatible() {
    let p = PrefixMatrix::new(PrefixDesign::manual(2, 1, 2).unwrap(), &cfg(), 1).unwrap();
    let other = ModelConfig {
        d_model: 32,
        ..cfg()
    };
    assert!(p.check_compatible(&other).is_err());
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = Vocab::synthetic(200).unwrap();
    let ex = generate(TaskKind::Qfs, &Default::default(), 3, 10).unwrap();
    let path = dir.path().join("qfs.jsonl");
    export_jsonl(&ex, &vocab, &path).unwrap();
    let back = load_jsonl(&path, &FieldMap::default(), &vocab).unwrap();
    assert_eq!(back.skipped, 0);
    assert_eq!(back.examples.len(), ex.len());
    for (a, b) in back.examples.iter().zip(&ex) {
        assert_eq!(a.source, b.source);
        assert_eq!(a.target, b.target);
        assert_eq!(a.query, b.query);
    }
}
