//! Finite-difference cases covering every differentiable operation.

use tartekit::encoder::{Bound, CellPair, CellPairSequence, EncoderConfig, EncoderModel};
use tartekit::numerics::{Segment, Tape, Var};
use tartekit::pretrain::{gaussian_kernel_on_tape, info_nce_on_tape};

use super::{gradcheck, gradcheck_params, random_tensor, rng};

pub type Case = (&'static str, fn(u64) -> f64);

pub fn cases() -> Vec<Case> {
    vec![
        ("matmul", matmul),
        ("elementwise", elementwise),
        ("add_row_scale", add_row_scale),
        ("relu_exp", relu_exp),
        ("layer_norm", layer_norm),
        ("softmax_rows", softmax_rows),
        ("transpose_concat_slice_gather", reshaping),
        ("sum_mean", reductions),
        ("sq_dist", sq_dist),
        ("attention", attention),
        ("partner_cross_entropy", partner_xent),
        ("mse_bce", regression_losses),
        ("kernel_info_nce", kernel_info_nce),
        ("encoder_forward", encoder_forward),
    ]
}

fn matmul(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random_tensor(&[4, 3], &mut r), random_tensor(&[3, 2], &mut r)];
    gradcheck(&inputs, seed, &|t, v| t.matmul(v[0], v[1]).unwrap())
}

fn elementwise(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random_tensor(&[3, 4], &mut r), random_tensor(&[3, 4], &mut r)];
    gradcheck(&inputs, seed, &|t, v| {
        let a = t.add(v[0], v[1]).unwrap();
        let s = t.sub(v[0], v[1]).unwrap();
        t.mul(a, s).unwrap()
    })
}

fn add_row_scale(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random_tensor(&[3, 4], &mut r), random_tensor(&[4], &mut r)];
    gradcheck(&inputs, seed, &|t, v| {
        let a = t.add_row(v[0], v[1]).unwrap();
        t.scale(a, -1.7)
    })
}

fn relu_exp(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random_tensor(&[3, 5], &mut r)];
    gradcheck(&inputs, seed, &|t, v| {
        let a = t.relu(v[0]);
        let e = t.exp(v[0]);
        t.add(a, e).unwrap()
    })
}

fn layer_norm(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [
        random_tensor(&[3, 4], &mut r),
        random_tensor(&[4], &mut r),
        random_tensor(&[4], &mut r),
    ];
    gradcheck(&inputs, seed, &|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap())
}

fn softmax_rows(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random_tensor(&[2, 5], &mut r)];
    gradcheck(&inputs, seed, &|t, v| t.softmax_rows(v[0]).unwrap())
}

fn reshaping(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random_tensor(&[3, 2], &mut r), random_tensor(&[1, 3], &mut r)];
    gradcheck(&inputs, seed, &|t, v| {
        let tr = t.transpose(v[0]).unwrap();
        let stacked = t.concat_rows(&[v[1], tr, v[1]]).unwrap();
        let mid = t.slice_rows(stacked, 1, 4).unwrap();
        t.gather_rows(mid, &[2, 0, 2, 1]).unwrap()
    })
}

fn reductions(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random_tensor(&[2, 3], &mut r)];
    gradcheck(&inputs, seed, &|t, v| {
        let sq = t.mul(v[0], v[0]).unwrap();
        let s = t.sum(sq);
        let m = t.mean(v[0]);
        t.mul(s, m).unwrap()
    })
}

fn sq_dist(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random_tensor(&[5, 3], &mut r)];
    gradcheck(&inputs, seed, &|t, v| t.sq_dist(v[0]).unwrap())
}

fn attention(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [
        random_tensor(&[5, 4], &mut r),
        random_tensor(&[5, 4], &mut r),
        random_tensor(&[5, 4], &mut r),
    ];
    let segs = [Segment { start: 0, len: 2 }, Segment { start: 2, len: 3 }];
    gradcheck(&inputs, seed, &|t, v| t.attention(v[0], v[1], v[2], &segs, 2).unwrap())
}

fn partner_xent(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random_tensor(&[4, 4], &mut r)];
    gradcheck(&inputs, seed, &|t, v| t.partner_cross_entropy(v[0], &[1, 0, 3, 2]).unwrap())
}

fn regression_losses(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random_tensor(&[6, 1], &mut r)];
    gradcheck(&inputs, seed, &|t, v| {
        let a = t.mse(v[0], &[0.3, -0.2, 1.0, 0.0, 0.5, -1.0]).unwrap();
        let b = t.bce_with_logits(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        t.add(a, b).unwrap()
    })
}

fn kernel_info_nce(seed: u64) -> f64 {
    let mut r = rng(seed);
    let inputs = [random_tensor(&[6, 3], &mut r)];
    // bandwidth is held fixed by design, so freeze it at the unperturbed value
    let bandwidth = tartekit::pretrain::median_bandwidth(&inputs[0]);
    gradcheck(&inputs, seed, &move |t: &mut Tape<f64>, v: &[Var]| {
        let k = gaussian_kernel_on_tape(t, v[0], bandwidth).unwrap();
        info_nce_on_tape(t, k, &[1, 0, 3, 2, 5, 4], 0.5).unwrap()
    })
}

/// Full encoder (ρ maps, readout, blocks, final norm, Matryoshka heads),
/// differentiated with respect to every parameter over two rows of
/// different lengths.
fn encoder_forward(seed: u64) -> f64 {
    let cfg = EncoderConfig {
        layers: 2,
        heads: 2,
        d_model: 4,
        d_ff: 6,
        d_lm: 3,
        matryoshka_dims: vec![2, 4],
        proj_hidden: 5,
        dropout: 0.0,
    };
    let model = EncoderModel::<f64>::new(cfg, seed).unwrap();
    let mut r = rng(seed);
    let rows: Vec<CellPairSequence> = [3, 2]
        .iter()
        .enumerate()
        .map(|(i, &k)| CellPairSequence {
            row: i,
            pairs: (0..k)
                .map(|_| CellPair {
                    column: random_tensor(&[3], &mut r).into_data(),
                    cell: random_tensor(&[3], &mut r).into_data(),
                })
                .collect(),
        })
        .collect();
    let w_readout = random_tensor(&[2, 4], &mut r);
    let w_head = random_tensor(&[2, 2], &mut r);
    gradcheck_params(&model, &|m: &EncoderModel<f64>, t: &mut Tape<f64>, b: &Bound| {
        let (z, segs) = m.assemble(t, b, &rows).unwrap();
        let out = m.encode(t, b, z, &segs, None).unwrap();
        let heads = m.project(t, b, out).unwrap();
        let w1 = t.constant(w_readout.clone());
        let w2 = t.constant(w_head.clone());
        let a = t.mul(out, w1).unwrap();
        let a = t.sum(a);
        let h = t.mul(heads[0].1, w2).unwrap();
        let h = t.sum(h);
        let big = t.sum(heads[1].1);
        let ah = t.add(a, h).unwrap();
        t.add(ah, big).unwrap()
    })
}
