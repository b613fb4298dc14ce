//! Tape ops against direct loop implementations.

mod common;

use auxdepth::adf::{compute_prototypes, enhance_features};
use auxdepth::tensor::{Conv2dParams, Real, Rng, Tape, Tensor};
use common::as_f64;

fn tol() -> f64 {
    if std::mem::size_of::<Real>() == 4 {
        2e-4
    } else {
        1e-10
    }
}

fn close(got: &Tensor, want: &[f64], what: &str) {
    assert_eq!(got.numel(), want.len(), "{what}: length");
    for (i, (&g, &w)) in got.data().iter().zip(want).enumerate() {
        let g = g as f64;
        assert!(
            (g - w).abs() <= tol() * (1.0 + w.abs()),
            "{what}[{i}]: {g} vs {w}"
        );
    }
}

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.tensor_uniform(shape, -1.0, 1.0)
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = Rng::seed(1);
    for &(b, m, k, n) in &[(1, 1, 1, 1), (1, 3, 5, 2), (2, 7, 4, 9), (3, 16, 33, 17)] {
        let a = rand_tensor(&mut rng, &[b, m, k]);
        let bm = rand_tensor(&mut rng, &[b, k, n]);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(bm.clone()));
        let out = tape.matmul(va, vb).unwrap();
        let (ad, bd) = (as_f64(&a), as_f64(&bm));
        let mut want = vec![0.0; b * m * n];
        for t in 0..b {
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        want[(t * m + i) * n + j] += ad[(t * m + i) * k + p] * bd[(t * k + p) * n + j];
                    }
                }
            }
        }
        close(tape.value(out), &want, "matmul");
    }
}

#[test]
fn conv2d_matches_sliding_window() {
    let mut rng = Rng::seed(2);
    let cases = [
        (3, 9, 11, 4, 3, 1, 1, 1, 1),
        (4, 8, 8, 6, 3, 2, 1, 1, 2),
        (2, 10, 7, 3, 3, 1, 4, 4, 1),
        (6, 12, 12, 6, 3, 2, 2, 2, 3),
        (2, 5, 6, 5, 1, 1, 0, 1, 1),
    ];
    for &(ci, h, w, co, k, stride, pad, dil, groups) in &cases {
        let p = Conv2dParams {
            stride,
            pad,
            dilation: dil,
            groups,
        };
        let x = rand_tensor(&mut rng, &[ci, h, w]);
        let wt = rand_tensor(&mut rng, &[co, ci / groups, k, k]);
        let mut tape = Tape::new();
        let (vx, vw) = (tape.constant(x.clone()), tape.constant(wt.clone()));
        let out = tape.conv2d(vx, vw, p).unwrap();
        let (xd, wd) = (as_f64(&x), as_f64(&wt));
        let span = dil * (k - 1) + 1;
        let ho = (h + 2 * pad - span) / stride + 1;
        let wo = (w + 2 * pad - span) / stride + 1;
        assert_eq!(tape.shape(out), &[co, ho, wo]);
        let (cig, cog) = (ci / groups, co / groups);
        let mut want = vec![0.0; co * ho * wo];
        for o in 0..co {
            let g = o / cog;
            for y in 0..ho {
                for xo in 0..wo {
                    let mut s = 0.0;
                    for c in 0..cig {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky * dil) as isize - pad as isize;
                                let ix = (xo * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = xd[((g * cig + c) * h + iy as usize) * w + ix as usize];
                                s += xv * wd[((o * cig + c) * k + ky) * k + kx];
                            }
                        }
                    }
                    want[(o * ho + y) * wo + xo] = s;
                }
            }
        }
        close(tape.value(out), &want, "conv2d");
    }
}

#[test]
fn layer_norm_matches_two_pass() {
    let mut rng = Rng::seed(3);
    let (rows, c) = (7, 13);
    let x = rng.tensor_uniform(&[rows, c], -3.0, 5.0);
    let gain = rand_tensor(&mut rng, &[c]);
    let bias = rand_tensor(&mut rng, &[c]);
    let eps = 1e-5;
    let mut tape = Tape::new();
    let (vx, vg, vb) = (
        tape.constant(x.clone()),
        tape.constant(gain.clone()),
        tape.constant(bias.clone()),
    );
    let out = tape.layer_norm(vx, vg, vb, eps as Real).unwrap();
    let (xd, gd, bd) = (as_f64(&x), as_f64(&gain), as_f64(&bias));
    let mut want = Vec::new();
    for r in 0..rows {
        let row = &xd[r * c..][..c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            want.push(gd[j] * (row[j] - mean) / (var + eps).sqrt() + bd[j]);
        }
    }
    close(tape.value(out), &want, "layer_norm");
}

#[test]
fn softmax_matches_per_element_formula() {
    let mut rng = Rng::seed(4);
    let shape = [3, 4, 5];
    let x = rng.tensor_uniform(&shape, -4.0, 4.0);
    let xd = as_f64(&x);
    for axis in 0..3 {
        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let out = tape.softmax(vx, axis).unwrap();
        let mut want = vec![0.0; xd.len()];
        for a in 0..3 {
            for b in 0..4 {
                for c in 0..5 {
                    let idx = |i: [usize; 3]| (i[0] * 4 + i[1]) * 5 + i[2];
                    let here = [a, b, c];
                    let den: f64 = (0..shape[axis])
                        .map(|t| {
                            let mut j = here;
                            j[axis] = t;
                            xd[idx(j)].exp()
                        })
                        .sum();
                    want[idx(here)] = xd[idx(here)].exp() / den;
                }
            }
        }
        close(tape.value(out), &want, &format!("softmax axis {axis}"));
    }
}

fn attention_inputs(rng: &mut Rng, [b, l, s, d, dv]: [usize; 5]) -> [Tensor; 3] {
    [
        rand_tensor(rng, &[b, l, d]),
        rand_tensor(rng, &[b, s, d]),
        rand_tensor(rng, &[b, s, dv]),
    ]
}

#[test]
fn softmax_attention_matches_loops() {
    let mut rng = Rng::seed(5);
    let dims = [2, 6, 9, 4, 3];
    let [q, k, v] = attention_inputs(&mut rng, dims);
    let mut tape = Tape::new();
    let (vq, vk, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = tape.softmax_attention(vq, vk, vv).unwrap();
    let want = common::softmax_attention(&as_f64(&q), &as_f64(&k), &as_f64(&v), dims);
    close(tape.value(out), &want, "softmax attention");
}

#[test]
fn linear_attention_matches_quadratic_form() {
    let mut rng = Rng::seed(6);
    let dims = [2, 5, 8, 4, 3];
    let [q, k, v] = attention_inputs(&mut rng, dims);
    let mut tape = Tape::new();
    let (vq, vk, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = tape.linear_attention(vq, vk, vv).unwrap();
    let want = common::linear_attention(&as_f64(&q), &as_f64(&k), &as_f64(&v), dims);
    close(tape.value(out), &want, "linear attention");
}

#[test]
fn prototype_pooling_and_projection_match_double_loop() {
    let mut rng = Rng::seed(7);
    let (c, d, h, w) = (5, 4, 3, 6);
    let f = rand_tensor(&mut rng, &[c, h, w]);
    let logits = rng.tensor_uniform(&[d, h, w], -2.0, 2.0);
    let mut tape = Tape::new();
    let vf = tape.constant(f.clone());
    let vl = tape.constant(logits);
    let dist = tape.softmax(vl, 0).unwrap();
    let protos = compute_prototypes(&mut tape, vf, dist).unwrap();
    let enhanced = enhance_features(&mut tape, protos, dist).unwrap();
    let pd = as_f64(tape.value(dist));
    let want_p = common::prototypes(&as_f64(&f), &pd, c, d, h * w);
    close(tape.value(protos), &want_p, "prototypes");
    close(tape.value(enhanced), &common::enhance(&pd, &want_p, c, d, h * w), "enhanced features");
}

#[test]
fn empty_bin_pools_uniformly() {
    let (c, h, w) = (2, 2, 2);
    let f = Tensor::from_fn(&[c, h, w], |i| i as Real);
    // Bin 1 carries no mass anywhere.
    let dist = Tensor::new(&[2, h, w], vec![1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let (vf, vd) = (tape.constant(f), tape.constant(dist));
    let protos = compute_prototypes(&mut tape, vf, vd).unwrap();
    // Channel means: (0+1+2+3)/4 and (4+5+6+7)/4 for both bins.
    close(tape.value(protos), &[1.5, 5.5, 1.5, 5.5], "uniform fallback");
}
