mod common;

use common::*;
use mafn_core::text::{self, positional_encoding, Vocabulary};
use mafn_core::Error;

fn encode(cfg: &mafn_core::RunConfig, p: &mafn_core::ParamStore<f64>, tokens: &[u32]) -> mafn_tensor::Tensor<f64> {
    eval(p, cfg, &[], |ctx, _| text::encode_text(ctx, tokens))
}

fn column(t: &mafn_tensor::Tensor<f64>, i: usize) -> Vec<f64> {
    let (d, m) = (t.shape()[0], t.shape()[1]);
    (0..d).map(|r| t.data()[r * m + i]).collect()
}

#[test]
fn single_token_gives_one_column() {
    let cfg = tiny();
    let out = encode(&cfg, &params(&cfg, 1), &[3]);
    assert_eq!(out.shape(), &[cfg.model.text_width, 1]);
}

#[test]
fn repeated_token_without_positions_gives_identical_columns() {
    let mut cfg = tiny();
    cfg.model.positional_encoding = false;
    let out = encode(&cfg, &params(&cfg, 2), &[5, 5]);
    assert_eq!(column(&out, 0), column(&out, 1));
}

#[test]
fn encoding_is_deterministic() {
    let cfg = tiny();
    let p = params(&cfg, 3);
    let a = encode(&cfg, &p, &[1, 6, 9]);
    let b = encode(&cfg, &p, &[1, 6, 9]);
    let bits = |t: &mafn_tensor::Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn swapping_tokens_changes_output_with_positions() {
    let cfg = tiny();
    let p = params(&cfg, 4);
    let a = encode(&cfg, &p, &[1, 6, 9]);
    let b = encode(&cfg, &p, &[6, 1, 9]);
    assert!(column(&a, 0) != column(&b, 1) || column(&a, 1) != column(&b, 0));
    assert!(a.max_abs_diff(&b) > 1e-6);
}

#[test]
fn rejects_bad_token_sequences() {
    let cfg = tiny();
    let p = params(&cfg, 5);
    let run = |tokens: &[u32]| mafn_core::verify::eval_graph(&p, &cfg, &[], |ctx, _| text::encode_text(ctx, tokens));
    assert!(matches!(run(&[]), Err(Error::Text(_))));
    assert!(matches!(run(&[1; 7]), Err(Error::Text(_))));
    assert!(matches!(run(&[12]), Err(Error::Text(_))));
}

#[test]
fn unknown_word_lists_vocabulary() {
    let v = Vocabulary::standard();
    let err = v.encode("purple circle").unwrap_err().to_string();
    assert!(err.contains("purple"), "{err}");
    for w in ["red", "circle", "left"] {
        assert!(err.contains(w), "{err}");
    }
}

#[test]
fn vocabulary_round_trips_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    let v = Vocabulary::standard();
    v.write(&path).unwrap();
    assert_eq!(Vocabulary::read(&path).unwrap(), v);
    let ids = v.encode("blue square right").unwrap();
    assert_eq!(v.decode(&ids), "blue square right");
}

#[test]
fn positional_table_starts_with_sin_cos_of_zero() {
    let pe = positional_encoding::<f64>(3, 6);
    assert_eq!(&pe.data()[..6], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    assert!((pe.data()[6] - 1f64.sin()).abs() < 1e-12);
    assert!((pe.data()[7] - 1f64.cos()).abs() < 1e-12);
}
