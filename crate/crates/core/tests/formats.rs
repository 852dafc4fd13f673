//! Byte-level checks of the on-disk formats. Expected bytes were produced by
//! a separate Python encoder (struct + zlib.crc32 + hashlib).

use std::path::Path;

use lorafit::checkpoint::{content_hash, Checkpoint};
use lorafit::data::image::{decode_image, encode_image};
use lorafit::data::manifest::{DatasetManifest, Split};
use lorafit::kv::KvMap;
use lorafit::report::{parse_results, render_results};
use lorafit::trainer::ResultRow;
use lorafit::{Error, Precision, Tensor};

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect()
}

const TWO_TENSOR_F64: &str = "504546540100020000000100000077010202000000000000000100000000000000000000000000f83f00000000000000c002000000626201010100000000000000000000000000d03f130000006b696e643d746573740a6e6f74653d6120620acdac6f22";
const TWO_TENSOR_HASH: &str = "d1f2f56ad2151ff27dde57a336d97d1b2274e5e06434e7dbe8cd602820bbb16c";
const ONE_TENSOR_F32: &str = "50454654010001000000010000007700010200000000000000cdcccc3d000000c00a0000006b696e643d746573740a1babc186";
const IMAGE_1X1X2: &str = "43595431010100000002000000000000000000403f22c2064b";

fn two_tensor() -> Checkpoint {
    let mut meta = KvMap::new();
    meta.set("note", "a b");
    meta.set("kind", "test");
    let mut ck = Checkpoint::new(meta);
    ck.push("w", Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap());
    ck.push("bb", Tensor::new(vec![1], vec![0.25]).unwrap());
    ck
}

#[test]
fn checkpoint_bytes_match_reference_encoder() {
    let bytes = two_tensor().to_bytes(Precision::F64);
    assert_eq!(bytes, unhex(TWO_TENSOR_F64));
    assert_eq!(content_hash(&bytes), TWO_TENSOR_HASH);
    let back = Checkpoint::from_bytes(&unhex(TWO_TENSOR_F64), Path::new("ref")).unwrap();
    assert_eq!(back, two_tensor());
}

#[test]
fn f32_checkpoint_matches_reference_encoder() {
    let mut meta = KvMap::new();
    meta.set("kind", "test");
    let mut ck = Checkpoint::new(meta);
    ck.push("w", Tensor::new(vec![2], vec![0.1, -2.0]).unwrap());
    assert_eq!(ck.to_bytes(Precision::F32), unhex(ONE_TENSOR_F32));
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let mut bytes = unhex(TWO_TENSOR_F64);
    bytes[30] ^= 1;
    let err = Checkpoint::from_bytes(&bytes, Path::new("bad")).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert_eq!(err.exit_code(), 3);

    let mut version = unhex(TWO_TENSOR_F64);
    version[4] = 2;
    assert!(Checkpoint::from_bytes(&version, Path::new("v2")).is_err());
    let mut magic = unhex(TWO_TENSOR_F64);
    magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&magic, Path::new("m")).is_err());
}

#[test]
fn image_bytes_match_reference_encoder() {
    let t = Tensor::new(vec![1, 1, 2], vec![0.0, 0.75]).unwrap();
    assert_eq!(encode_image(&t).unwrap(), unhex(IMAGE_1X1X2));
    assert_eq!(decode_image(&unhex(IMAGE_1X1X2), Path::new("i")).unwrap(), t);
    let mut bad = unhex(IMAGE_1X1X2);
    bad[14] ^= 0x10;
    assert!(matches!(
        decode_image(&bad, Path::new("i")),
        Err(Error::Format { .. })
    ));
    assert!(decode_image(b"CYT2", Path::new("i")).is_err());
}

const MANIFEST: &str = "#classes=cat;dog\n#norm=0.5,0.25|0.2,0.1\npath,label,split\na.cyt,0,train\nb.cyt,1,val\nc.cyt,1,test\n";

#[test]
fn manifest_headers_and_rows() {
    let m = DatasetManifest::parse(MANIFEST, "pets").unwrap();
    assert_eq!(m.classes, ["cat", "dog"]);
    assert_eq!(m.norm.mean, [0.5, 0.25]);
    assert_eq!(m.norm.std, [0.2, 0.1]);
    assert_eq!(m.indices(Split::Val), [1]);
    assert_eq!(m.render(), MANIFEST);
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let bad_label = MANIFEST.replace("b.cyt,1,val", "b.cyt,7,val");
    match DatasetManifest::parse(&bad_label, "p") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 5),
        other => panic!("{other:?}"),
    }
    let bad_split = MANIFEST.replace("c.cyt,1,test", "c.cyt,1,holdout");
    match DatasetManifest::parse(&bad_split, "p") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 6),
        other => panic!("{other:?}"),
    }
    let no_norm = MANIFEST.replace("#norm=0.5,0.25|0.2,0.1\n", "");
    assert!(matches!(DatasetManifest::parse(&no_norm, "p"), Err(Error::Parse { .. })));
}

#[test]
fn results_csv_column_order() {
    let row = ResultRow {
        mode: "lora".into(),
        dataset: "target".into(),
        k_or_fraction: "0.05".into(),
        lr: 0.005,
        seed: 2,
        test_top1: 0.5,
        params_trainable: 672,
        wall_ms: 17,
    };
    let text = render_results(std::slice::from_ref(&row));
    assert_eq!(
        text,
        "mode,dataset,k_or_fraction,lr,seed,test_top1,params_trainable,wall_ms\nlora,target,0.05,0.005,2,0.5,672,17\n"
    );
    assert_eq!(parse_results(&text).unwrap(), vec![row]);
}

#[test]
fn kv_canonical_form_is_sorted() {
    let kv = KvMap::parse("# comment\nz = 1\na=x=y\n\n").unwrap();
    assert_eq!(kv.to_canonical(), "a=x=y\nz=1\n");
    assert!(matches!(KvMap::parse("novalue\n"), Err(Error::Parse { line: 1, .. })));
}
