mod common;

use std::collections::HashMap;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::oracles::random_row;
use tartekit::embed::{NgramHasher, PowerTransform, StringEmbedder};
use tartekit::encoder::*;
use tartekit::numerics::{Tape, Tensor, LAYER_NORM_EPS};
use tartekit::Error;

fn small() -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        d_model: 8,
        d_ff: 16,
        d_lm: 6,
        matryoshka_dims: vec![4, 8],
        proj_hidden: 10,
        dropout: 0.1,
    }
}

fn model(seed: u64) -> EncoderModel<f64> {
    EncoderModel::new(small(), seed).unwrap()
}

fn param(m: &EncoderModel<f64>, name: &str) -> Vec<f64> {
    m.store().get(m.store().id(name).unwrap()).data().to_vec()
}

/// LayerNorm → ReLU → Linear from the stored weights, one vector at a time.
fn rho_by_hand(m: &EncoderModel<f64>, prefix: &str, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let (g, b) = (param(m, &format!("{prefix}.norm.gain")), param(m, &format!("{prefix}.norm.bias")));
    let h: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| ((v - mean) / (var + LAYER_NORM_EPS).sqrt() * g[i] + b[i]).max(0.0))
        .collect();
    let w = param(m, &format!("{prefix}.linear.weight"));
    let bias = param(m, &format!("{prefix}.linear.bias"));
    let out = bias.len();
    (0..out)
        .map(|j| bias[j] + h.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
        .collect()
}

#[test]
fn cell_pair_examples() {
    let e = StringEmbedder::hashed(16, NgramHasher::default()).unwrap();
    let identity = PowerTransform::identity("size");
    let num = ColumnSpec::new("size", ColumnKind::Numerical, &e).with_transform(identity);
    let zero = build_cell_pair(&num, &CellValue::Number(0.0), &e).unwrap().unwrap();
    assert!(zero.cell.iter().all(|&v| v == 0.0));
    let two = build_cell_pair(&num, &CellValue::Number(2.0), &e).unwrap().unwrap();
    for (x, c) in two.cell.iter().zip(&num.embedding) {
        assert_eq!(*x, 2.0 * c);
    }
    assert_eq!(two.column, num.embedding);

    let lang = ColumnSpec::new("Language", ColumnKind::CategoricalString, &e);
    let p = build_cell_pair(&lang, &CellValue::Text("English".into()), &e).unwrap().unwrap();
    assert_eq!(p.cell, e.embed("English").vector);
    assert!(build_cell_pair(&lang, &CellValue::Missing, &e).unwrap().is_none());
    assert!(build_cell_pair(&num, &CellValue::Text("abc".into()), &e).is_err());
}

#[test]
fn assemble_examples() {
    let m = model(1);
    let mut r = common::rng(1);
    let row = random_row(3, 6, &mut r);
    let z = m.assemble_input(&row).unwrap();
    assert_eq!(z.shape(), &[4, 8]);

    let mut dup = row.clone();
    dup.pairs[1] = dup.pairs[0].clone();
    let z = m.assemble_input(&dup).unwrap();
    assert_eq!(z.row(1), z.row(2));

    let z = m.assemble_input(&row).unwrap();
    assert_eq!(z.row(0), param(&m, "readout").as_slice());
    for (j, pair) in row.pairs.iter().enumerate() {
        let col = rho_by_hand(&m, "rho_column", &pair.column);
        let cell = rho_by_hand(&m, "rho_cell", &pair.cell);
        for (k, v) in z.row(j + 1).iter().enumerate() {
            assert!((v - (col[k] + cell[k])).abs() < 1e-12);
        }
    }
    assert!(matches!(m.assemble_input(&CellPairSequence::default()), Err(Error::EmptyRow)));
}

#[test]
fn zero_cell_map_leaves_only_columns() {
    let mut m = model(2);
    for name in ["rho_cell.linear.weight", "rho_cell.linear.bias"] {
        let id = m.store().id(name).unwrap();
        let shape = m.store().get(id).shape().to_vec();
        m.store_mut().set(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut r = common::rng(2);
    let a = random_row(4, 6, &mut r);
    let mut b = random_row(4, 6, &mut r);
    for (pb, pa) in b.pairs.iter_mut().zip(&a.pairs) {
        pb.column = pa.column.clone();
    }
    assert_eq!(m.assemble_input(&a).unwrap(), m.assemble_input(&b).unwrap());
}

#[test]
fn encode_examples() {
    let m = model(3);
    let mut r = common::rng(3);
    let row = random_row(1, 6, &mut r);
    let z = m.assemble_input(&row).unwrap();
    assert_eq!(m.encode_row(&z, None).unwrap(), m.encode_row(&z, None).unwrap());
    let mut rng = common::rng(9);
    let dropped = m.encode_row(&z, Some(DropoutCtx { rate: 0.5, rng: &mut rng })).unwrap();
    assert_ne!(dropped, m.encode_row(&z, None).unwrap());

    let mut twice = row.clone();
    twice.pairs.push(row.pairs[0].clone());
    let single = m.embed_rows(&[row], 1).unwrap();
    let double = m.embed_rows(&[twice], 1).unwrap();
    let gap = single[0].iter().zip(&double[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(gap > 1e-6, "{gap}");
}

#[test]
fn stacked_rows_match_single_rows() {
    let m = model(4);
    let mut r = common::rng(4);
    let rows: Vec<CellPairSequence> = (0..7).map(|i| random_row(1 + i % 4, 6, &mut r)).collect();
    let batched = m.embed_rows(&rows, 7).unwrap();
    for (row, b) in rows.iter().zip(&batched) {
        let z = m.assemble_input(row).unwrap();
        let one = m.encode_row(&z, None).unwrap();
        for (x, y) in one.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matryoshka_examples() {
    let m = EncoderModel::<f64>::new(EncoderConfig::default(), 0).unwrap();
    let p = m.project_matryoshka(&vec![0.1; 768]).unwrap();
    assert_eq!(p.iter().map(|(d, v)| (*d, v.len())).collect::<Vec<_>>(), vec![
        (64, 64),
        (128, 128),
        (256, 256),
        (512, 512),
        (768, 768)
    ]);

    let mut m = model(5);
    let head_ids: Vec<ParamId> = m.ids_in(ParamGroup::Heads);
    for &id in &head_ids {
        let shape = m.store().get(id).shape().to_vec();
        m.store_mut().set(id, Tensor::zeros(&shape)).unwrap();
    }
    for v in m.project_matryoshka(&[0.0; 8]).unwrap().values() {
        assert!(v.iter().all(|&x| x == 0.0));
    }

    let mut m = model(6);
    for &id in &head_ids {
        if m.store().name(id).ends_with(".bias") {
            let shape = m.store().get(id).shape().to_vec();
            m.store_mut().set(id, Tensor::zeros(&shape)).unwrap();
        }
    }
    let h: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
    let scaled: Vec<f64> = h.iter().map(|v| -2.5 * v).collect();
    let (a, b) = (m.project_matryoshka(&h).unwrap(), m.project_matryoshka(&scaled).unwrap());
    for (d, v) in &a {
        for (x, y) in v.iter().zip(&b[d]) {
            assert!((-2.5 * x - y).abs() < 1e-10);
        }
    }
}

#[test]
fn parameter_count_examples() {
    let micro = EncoderConfig {
        layers: 1,
        heads: 2,
        d_model: 4,
        d_ff: 8,
        d_lm: 3,
        matryoshka_dims: vec![],
        proj_hidden: 0,
        dropout: 0.0,
    };
    // ρ: norm 2·3 + linear 3·4+4, twice; readout 4; block: 4 linears 4·4+4,
    // 2 norms 2·4, ff 4·8+8 and 8·4+4; final norm 2·4
    let hand = 2 * (6 + 16) + 4 + (4 * 20 + 16 + 40 + 36) + 8;
    let m = EncoderModel::<f64>::new(micro.clone(), 0).unwrap();
    assert_eq!(m.parameter_count(), hand);
    assert_eq!(m.store().scalar_count(), hand);
    let deeper = EncoderConfig { layers: 2, ..micro };
    assert!(deeper.parameter_count() > hand);
    assert!(EncoderConfig::default().parameter_count() >= 25_000_000);
    assert!(EncoderConfig { heads: 5, ..EncoderConfig::default() }.validate().is_err());
}

#[test]
fn frozen_transformer_gets_no_gradient() {
    let m = model(7);
    let mut r = common::rng(7);
    let rows: Vec<CellPairSequence> = (0..3).map(|_| random_row(3, 6, &mut r)).collect();
    let mut tape = Tape::new();
    let b = m.bind_with(&mut tape, |id| m.group(id) == ParamGroup::Heads, &HashMap::new());
    let (z, segs) = m.assemble(&mut tape, &b, &rows).unwrap();
    let out = m.encode(&mut tape, &b, z, &segs, None).unwrap();
    let p = m.project_one(&mut tape, &b, out, 8).unwrap();
    let sq = tape.mul(p, p).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    for id in m.store().ids() {
        let g = grads.get(b.var(id));
        match m.group(id) {
            ParamGroup::Heads if m.store().name(id).starts_with("head8") => {
                assert!(g.is_some_and(|g| g.iter().any(|&v| v != 0.0)), "{}", m.store().name(id));
            }
            ParamGroup::Heads => {}
            _ => assert!(g.is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{}", m.store().name(id)),
        }
    }
}

#[test]
fn outputs_stay_finite_on_large_inputs() {
    let m = model(8);
    let mut r = common::rng(8);
    let rows: Vec<CellPairSequence> = (0..1000)
        .map(|_| {
            let mut row = random_row(r.random_range(1..6), 6, &mut r);
            let s = 10f64.powi(r.random_range(0..4));
            row.pairs.iter_mut().for_each(|p| p.cell.iter_mut().for_each(|v| *v *= s));
            row
        })
        .collect();
    for e in m.embed_rows(&rows, 64).unwrap() {
        assert!(e.iter().all(|v| v.is_finite()));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let m = model(9);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &m, None).unwrap();
    let (back, state) = load_checkpoint::<f64>(&path).unwrap();
    assert!(state.is_none());
    assert_eq!(back.config(), m.config());
    assert_eq!(checkpoint_id(&back), checkpoint_id(&m));
    let mut r = common::rng(9);
    let rows: Vec<CellPairSequence> = (0..5).map(|_| random_row(3, 6, &mut r)).collect();
    let (a, b) = (m.embed_rows(&rows, 5).unwrap(), back.embed_rows(&rows, 5).unwrap());
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }

    let mut bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"TARTEKIT");
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Checkpoint(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn readout_ignores_pair_order(seed in any::<u64>(), k in 1usize..9) {
        let m = model(seed % 4);
        let mut r = common::rng(seed);
        let row = random_row(k, 6, &mut r);
        let mut perm = row.clone();
        perm.pairs.shuffle(&mut r);
        let out = m.embed_rows(&[row, perm], 2).unwrap();
        for (a, b) in out[0].iter().zip(&out[1]) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }
}
