use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use canids::features::InputTensor;
use canids::model_io::{
    checkpoint_path, load_bundle, load_float_bundle, load_quant_bundle, read_manifest, save_float, save_quant, Bundle,
    BundleError, Dtype, ModelKind, MANIFEST,
};
use canids::nn::{ArchConfig, CnnModel};
use canids::quant::{calibrate, fold_batchnorm, quantize_model, QuantModel};
use canids::{Error, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn small() -> Model {
    let mut m = Model::new(ArchConfig::with_channels(&[4, 6]), 9).unwrap();
    // non-trivial batch-norm statistics
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for b in m.blocks_mut() {
        let bn = b.bn.as_mut().unwrap();
        for v in bn.gamma.iter_mut().chain(bn.beta.iter_mut()).chain(bn.running_mean.iter_mut()) {
            *v = rng.gen_range(-1.0..1.0);
        }
        for v in bn.running_var.iter_mut() {
            *v = rng.gen_range(0.1..2.0);
        }
    }
    m
}

fn inputs(n: usize, seed: u64) -> Vec<InputTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| InputTensor::from_ids([0; 4].map(|_: u16| rng.gen_range(0..2048))).unwrap())
        .collect()
}

fn quantized(m: &Model) -> QuantModel {
    let folded = fold_batchnorm(m).unwrap();
    let profile = calibrate(&folded, &inputs(64, 2)).unwrap();
    quantize_model(&folded, &profile).unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["", "tensors"] {
        for e in fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.is_file() {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn bundle_err(r: canids::Result<Bundle>) -> BundleError {
    match r {
        Err(Error::Bundle(b)) => b,
        Err(e) => panic!("expected a bundle error, got {e}"),
        Ok(_) => panic!("expected a bundle error"),
    }
}

#[test]
fn float_roundtrip_is_bit_exact() {
    let t = TempDir::new().unwrap();
    let m = small();
    save_float(&m, &t.path().join("f")).unwrap();
    let back = load_float_bundle(&t.path().join("f")).unwrap();
    assert_eq!(back, m);
    assert_eq!(back.digest(), m.digest());
    let xs = inputs(50, 3);
    assert_eq!(back.predict(&xs).unwrap(), m.predict(&xs).unwrap());
}

#[test]
fn folded_float_roundtrip() {
    let t = TempDir::new().unwrap();
    let f = fold_batchnorm(&small()).unwrap();
    save_float(&f, &t.path().join("f")).unwrap();
    let back = load_float_bundle(&t.path().join("f")).unwrap();
    assert!(back.is_folded());
    assert_eq!(back, f);
    assert_eq!(read_manifest(&t.path().join("f")).unwrap().folded, Some(true));
}

#[test]
fn f64_model_saves_as_float32() {
    let t = TempDir::new().unwrap();
    let m64: CnnModel<f64> = small().cast();
    save_float(&m64, &t.path().join("f")).unwrap();
    assert_eq!(load_float_bundle(&t.path().join("f")).unwrap(), small());
}

#[test]
fn quant_roundtrip_is_bit_exact() {
    let t = TempDir::new().unwrap();
    let q = quantized(&small());
    save_quant(&q, &t.path().join("q")).unwrap();
    let back = load_quant_bundle(&t.path().join("q")).unwrap();
    assert_eq!(back, q);
    assert_eq!(back.digest(), q.digest());
    let xs = inputs(50, 4);
    use canids::eval::Classifier;
    assert_eq!(back.scores(&xs).unwrap(), q.scores(&xs).unwrap());
}

#[test]
fn manifest_describes_every_tensor() {
    let t = TempDir::new().unwrap();
    let dir = t.path().join("q");
    let q = quantized(&small());
    save_quant(&q, &dir).unwrap();
    let m = read_manifest(&dir).unwrap();
    assert_eq!(m.kind, ModelKind::Quant);
    assert_eq!(m.input_frac, Some(q.input_frac()));
    assert_eq!(m.layer_scales.len(), 4);
    let names: Vec<&str> = m.tensors.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(
        names,
        ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "dense1.weight", "dense1.bias", "dense2.weight", "dense2.bias"]
    );
    for e in &m.tensors {
        let bytes = fs::read(dir.join(&e.file)).unwrap();
        assert_eq!(bytes.len(), e.shape.iter().product::<usize>() * e.dtype.size(), "{}", e.name);
        assert!(e.frac_bits.is_some());
        assert_eq!(e.dtype, if e.name.ends_with("weight") { Dtype::Int8 } else { Dtype::Int32 });
    }
    assert_eq!(m.tensors[0].shape, [4, 2, 3, 3]);
    assert_eq!(m.tensors[4].shape, [32, 6 * 22]);

    let f = t.path().join("f");
    save_float(&small(), &f).unwrap();
    let m = read_manifest(&f).unwrap();
    assert_eq!(m.kind, ModelKind::Float);
    assert_eq!(m.tensors.len(), 2 * 6 + 4);
    assert!(m.tensors.iter().all(|e| e.dtype == Dtype::Float32 && e.frac_bits.is_none()));
}

#[test]
fn saving_twice_gives_identical_bytes() {
    let t = TempDir::new().unwrap();
    let m = small();
    let q = quantized(&m);
    save_float(&m, &t.path().join("a")).unwrap();
    save_float(&m, &t.path().join("b")).unwrap();
    assert_eq!(files(&t.path().join("a")), files(&t.path().join("b")));
    save_quant(&q, &t.path().join("c")).unwrap();
    save_quant(&q, &t.path().join("d")).unwrap();
    assert_eq!(files(&t.path().join("c")), files(&t.path().join("d")));
}

#[test]
fn overwrite_replaces_old_bundle() {
    let t = TempDir::new().unwrap();
    let dir = t.path().join("m");
    save_quant(&quantized(&small()), &dir).unwrap();
    save_float(&small(), &dir).unwrap();
    assert!(matches!(load_bundle(&dir).unwrap(), Bundle::Float(_)));
    let leftovers: Vec<_> = fs::read_dir(t.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers, ["m"]);
    assert!(load_quant_bundle(&dir).is_err());
}

#[test]
fn tampered_blob_fails_checksum() {
    let t = TempDir::new().unwrap();
    let dir = t.path().join("f");
    save_float(&small(), &dir).unwrap();
    let blob = dir.join("tensors/conv2.weight.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[5] ^= 0x10;
    fs::write(&blob, bytes).unwrap();
    assert!(matches!(bundle_err(load_bundle(&dir)), BundleError::Checksum { tensor } if tensor == "conv2.weight"));
}

#[test]
fn missing_blob_is_reported() {
    let t = TempDir::new().unwrap();
    let dir = t.path().join("q");
    save_quant(&quantized(&small()), &dir).unwrap();
    fs::remove_file(dir.join("tensors/dense1.bias.bin")).unwrap();
    assert!(matches!(bundle_err(load_bundle(&dir)), BundleError::MissingBlob { tensor } if tensor == "dense1.bias"));
}

#[test]
fn unsupported_version_is_rejected() {
    let t = TempDir::new().unwrap();
    let dir = t.path().join("f");
    save_float(&small(), &dir).unwrap();
    let text = fs::read_to_string(dir.join(MANIFEST)).unwrap();
    fs::write(dir.join(MANIFEST), text.replace("\"format_version\": 1", "\"format_version\": 2")).unwrap();
    assert!(matches!(bundle_err(load_bundle(&dir)), BundleError::Version { found: 2, expected: 1 }));
}

#[test]
fn shape_mismatch_is_rejected() {
    let t = TempDir::new().unwrap();
    let dir = t.path().join("f");
    save_float(&small(), &dir).unwrap();
    let text = fs::read_to_string(dir.join(MANIFEST)).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["architecture"]["conv_channels"] = serde_json::json!([4, 7]);
    fs::write(dir.join(MANIFEST), serde_json::to_string(&v).unwrap()).unwrap();
    assert!(matches!(bundle_err(load_bundle(&dir)), BundleError::Shape(_)));
}

#[test]
fn full_architecture_roundtrip() {
    let t = TempDir::new().unwrap();
    let m = Model::new(ArchConfig::default(), 0).unwrap();
    assert_eq!(m.param_count(), 719_385);
    assert_eq!(m.arch().flatten_len(), 4400);
    save_float(&m, &t.path().join("f")).unwrap();
    let back = load_float_bundle(&t.path().join("f")).unwrap();
    assert_eq!(back.digest(), m.digest());
}

#[test]
fn checkpoint_names() {
    assert_eq!(checkpoint_path(Path::new("ck"), 3), Path::new("ck/epoch_003"));
    assert_eq!(checkpoint_path(Path::new("ck"), 12), Path::new("ck/epoch_012"));
}
