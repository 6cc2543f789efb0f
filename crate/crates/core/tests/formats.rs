use std::fs;

use calltriage::autoenc::{Arch, Autoencoder};
use calltriage::embed::{
    decode_aemb, encode_aemb, export_embeddings, import_embeddings, manifest_path, BackendTag, EmbeddingMatrix,
};
use calltriage::fsutil::{atomic_write, temp_sibling};
use calltriage::Error;
use proptest::prelude::*;

fn matrix(rows: usize, dim: usize, data: Vec<f32>) -> EmbeddingMatrix {
    EmbeddingMatrix::new(
        (0..rows).map(|i| format!("w{i}")).collect(),
        dim,
        data,
        BackendTag::External,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn aemb_file_round_trip_is_bitwise(rows in 0usize..12, dim in 1usize..9, seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * dim).map(|_| f32::from_bits(rand::Rng::random::<u32>(&mut rng) & 0xBF7F_FFFF)).collect();
        let m = matrix(rows, dim, data);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.aemb");
        export_embeddings(&m, &path).unwrap();
        let back = import_embeddings(&path).unwrap();
        prop_assert_eq!(back.dim, dim);
        prop_assert_eq!(&back.window_ids, &m.window_ids);
        let a: Vec<u32> = back.data.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = m.data.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn truncation_is_detected(rows in 1usize..6, dim in 1usize..5, cut in 1usize..20) {
        let bytes = encode_aemb(dim, rows, &vec![0.5; rows * dim]).unwrap();
        let cut = cut.min(bytes.len());
        let is_format_error = matches!(decode_aemb(&bytes[..bytes.len() - cut]), Err(Error::Format { .. }));
        prop_assert!(is_format_error);
    }
}

#[test]
fn aemb_layout_is_little_endian() {
    let bytes = encode_aemb(2, 1, &[1.0, -2.0]).unwrap();
    assert_eq!(&bytes[..6], b"AEMB1\n");
    assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
    assert_eq!(&bytes[10..18], &1u64.to_le_bytes());
    assert_eq!(&bytes[18..22], &1.0f32.to_le_bytes());
    assert_eq!(&bytes[22..26], &(-2.0f32).to_le_bytes());
    let manifest = manifest_path(std::path::Path::new("x/emb.aemb"));
    assert_eq!(manifest, std::path::Path::new("x/emb.aemb.manifest.jsonl"));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let net = Autoencoder::<f32>::init(Arch::reduced(8), 5).unwrap();
    let bytes = net.to_checkpoint();
    assert_eq!(&bytes[..6], b"AECK1\n");
    let back = Autoencoder::<f32>::from_checkpoint(&bytes).unwrap();
    assert_eq!(back.to_checkpoint(), bytes);
    assert!(Autoencoder::<f32>::from_checkpoint(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn failed_write_keeps_previous_version() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.json");
    atomic_write(&path, b"old").unwrap();
    // a directory squatting on the temporary name makes the write fail midway
    fs::create_dir(temp_sibling(&path)).unwrap();
    assert!(atomic_write(&path, b"new").is_err());
    assert_eq!(fs::read(&path).unwrap(), b"old");
    fs::remove_dir(temp_sibling(&path)).unwrap();
    atomic_write(&path, b"new").unwrap();
    assert_eq!(fs::read(&path).unwrap(), b"new");
}

#[test]
fn crash_leftovers_do_not_affect_readers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.aemb");
    let m = matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    export_embeddings(&m, &path).unwrap();
    // a writer that died before renaming leaves a partial temporary file
    fs::write(temp_sibling(&path), &encode_aemb(2, 3, &[9.0; 6]).unwrap()[..20]).unwrap();
    let back = import_embeddings(&path).unwrap();
    assert_eq!(back.data, m.data);
}
