//! Finite-difference gradient checks for every differentiable tape operation.
//!
//! Each check registers the op's inputs as named parameters, reduces the op
//! output to a scalar against a fixed random target (so a permutation bug in
//! a backward pass cannot cancel out), and compares reverse-mode gradients
//! with central differences at every coordinate.

use catintell_core::gradcheck::{all_coords, check_coords, sample_coords};
use catintell_core::nn::Params;
use catintell_core::rng;
use catintell_core::tape::{Node, Tape};
use catintell_core::Arr;
use ndarray::IxDyn;
use rand::Rng;
use std::sync::Arc;

const STEP: f64 = 1e-3;
const TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-6;
const MAX_COORDS: usize = 400;

fn rand_arr(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Arr {
    let mut r = rng::seeded(seed);
    Arr::from_shape_fn(IxDyn(shape), |_| r.gen_range(lo..hi))
}

/// Random values whose magnitude stays in [0.1, 1.0] so a +-1e-3 nudge can
/// never cross the kink of a piecewise activation at zero.
fn rand_off_zero(shape: &[usize], seed: u64) -> Arr {
    let mut r = rng::seeded(seed);
    Arr::from_shape_fn(IxDyn(shape), |_| {
        let mag = r.gen_range(0.1..1.0);
        if r.gen_bool(0.5) {
            mag
        } else {
            -mag
        }
    })
}

/// Globally distinct values on a 1/n grid, so every pooling window has a
/// unique maximum with a margin far wider than the probe step.
fn distinct_arr(shape: &[usize]) -> Arr {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|i| ((i * 53) % n) as f64 / n as f64).collect();
    Arr::from_shape_vec(IxDyn(shape), vals).unwrap()
}

fn check_op<F>(inputs: &[(&str, Arr)], min_pass: f64, build: F)
where
    F: Fn(&mut Tape, &[Node]) -> Node,
{
    let mut params = Params::new();
    for (name, v) in inputs {
        params.add(*name, v.clone());
    }

    let target = {
        let mut probe = Tape::new_no_grad();
        let bind = params.bind(&mut probe);
        let out = build(&mut probe, bind.nodes());
        let shape = probe.shape(out).to_vec();
        let mut r = rng::seeded(0xA110);
        Arr::from_shape_fn(IxDyn(&shape), |_| r.gen_range(-0.7..0.7))
    };
    let scalar_out = target.ndim() == 0;

    let run = |p: &Params, want_grads: bool| -> (f64, Option<Vec<Option<Arr>>>) {
        let mut tape = if want_grads { Tape::new() } else { Tape::new_no_grad() };
        let bind = p.bind(&mut tape);
        let out = build(&mut tape, bind.nodes());
        let loss = if scalar_out {
            out
        } else {
            let tgt = tape.constant(target.clone());
            tape.mse_mean(out, tgt)
        };
        let value = tape.scalar(loss);
        if !want_grads {
            return (value, None);
        }
        let mut grads = tape.backward(loss);
        let per_param = bind.nodes().iter().map(|&n| grads.take(n)).collect();
        (value, Some(per_param))
    };

    let coords = if params.total_values() <= MAX_COORDS {
        all_coords(&params)
    } else {
        sample_coords(&params, MAX_COORDS, &mut rng::seeded(0xC0DA))
    };

    let stats = check_coords(
        &mut params,
        &coords,
        STEP,
        TOL,
        FLOOR,
        &mut |p| run(p, false).0,
        &mut |p| run(p, true).1.unwrap(),
    );
    assert!(
        stats.pass_fraction() >= min_pass,
        "{}/{} coords within tolerance (worst rel err {:.3e})",
        stats.within,
        stats.checked,
        stats.worst
    );
}

// ---- convolution ------------------------------------------------------------

#[test]
fn conv_dense_k3_padded() {
    check_op(
        &[
            ("x", rand_arr(&[2, 3, 5, 5], -1.0, 1.0, 1)),
            ("w", rand_arr(&[4, 3, 3, 3], -0.5, 0.5, 2)),
            ("b", rand_arr(&[4], -0.5, 0.5, 3)),
        ],
        1.0,
        |t, n| t.conv2d(n[0], n[1], Some(n[2]), 3, 3, 1, 1, 1),
    );
}

#[test]
fn conv_grouped_stride2() {
    check_op(
        &[
            ("x", rand_arr(&[1, 4, 6, 6], -1.0, 1.0, 4)),
            ("w", rand_arr(&[6, 2, 3, 3], -0.5, 0.5, 5)),
            ("b", rand_arr(&[6], -0.5, 0.5, 6)),
        ],
        1.0,
        |t, n| t.conv2d(n[0], n[1], Some(n[2]), 3, 3, 2, 0, 2),
    );
}

#[test]
fn conv_pointwise_fast_path() {
    check_op(
        &[
            ("x", rand_arr(&[1, 6, 4, 4], -1.0, 1.0, 7)),
            ("w", rand_arr(&[4, 6, 1, 1], -0.5, 0.5, 8)),
            ("b", rand_arr(&[4], -0.5, 0.5, 9)),
        ],
        1.0,
        |t, n| t.conv2d(n[0], n[1], Some(n[2]), 1, 1, 1, 0, 1),
    );
}

#[test]
fn conv_pointwise_grouped() {
    check_op(
        &[
            ("x", rand_arr(&[1, 6, 4, 4], -1.0, 1.0, 10)),
            ("w", rand_arr(&[4, 3, 1, 1], -0.5, 0.5, 11)),
            ("b", rand_arr(&[4], -0.5, 0.5, 12)),
        ],
        1.0,
        |t, n| t.conv2d(n[0], n[1], Some(n[2]), 1, 1, 1, 0, 2),
    );
}

#[test]
fn conv_even_kernel_downsample() {
    check_op(
        &[
            ("x", rand_arr(&[1, 3, 6, 6], -1.0, 1.0, 13)),
            ("w", rand_arr(&[5, 3, 2, 2], -0.5, 0.5, 14)),
            ("b", rand_arr(&[5], -0.5, 0.5, 15)),
        ],
        1.0,
        |t, n| t.conv2d(n[0], n[1], Some(n[2]), 2, 2, 2, 0, 1),
    );
}

#[test]
fn conv_without_bias() {
    check_op(
        &[
            ("x", rand_arr(&[1, 2, 5, 5], -1.0, 1.0, 16)),
            ("w", rand_arr(&[3, 2, 3, 3], -0.5, 0.5, 17)),
        ],
        1.0,
        |t, n| t.conv2d(n[0], n[1], None, 3, 3, 1, 1, 1),
    );
}

// ---- dense / norm / activations ----------------------------------------------

#[test]
fn linear_on_token_tensor() {
    check_op(
        &[
            ("x", rand_arr(&[2, 3, 4], -1.0, 1.0, 18)),
            ("w", rand_arr(&[5, 4], -0.5, 0.5, 19)),
            ("b", rand_arr(&[5], -0.5, 0.5, 20)),
        ],
        1.0,
        |t, n| t.linear(n[0], n[1], Some(n[2])),
    );
}

#[test]
fn linear_without_bias() {
    check_op(
        &[
            ("x", rand_arr(&[3, 4], -1.0, 1.0, 21)),
            ("w", rand_arr(&[2, 4], -0.5, 0.5, 22)),
        ],
        1.0,
        |t, n| t.linear(n[0], n[1], None),
    );
}

#[test]
fn layer_norm_over_channels() {
    check_op(
        &[
            ("x", rand_arr(&[2, 4, 3, 3], -1.5, 1.5, 23)),
            ("gamma", rand_arr(&[4], 0.5, 1.5, 24)),
            ("beta", rand_arr(&[4], -0.5, 0.5, 25)),
        ],
        1.0,
        |t, n| t.ln_channel(n[0], n[1], n[2], 1e-6),
    );
}

#[test]
fn layer_norm_over_last_axis() {
    check_op(
        &[
            ("x", rand_arr(&[2, 5, 6], -1.5, 1.5, 26)),
            ("gamma", rand_arr(&[6], 0.5, 1.5, 27)),
            ("beta", rand_arr(&[6], -0.5, 0.5, 28)),
        ],
        1.0,
        |t, n| t.ln_last(n[0], n[1], n[2], 1e-6),
    );
}

#[test]
fn gelu_activation() {
    check_op(
        &[("x", rand_arr(&[2, 3, 4, 4], -2.0, 2.0, 29))],
        1.0,
        |t, n| t.gelu(n[0]),
    );
}

#[test]
fn relu_away_from_kink() {
    check_op(&[("x", rand_off_zero(&[2, 3, 4, 4], 30))], 1.0, |t, n| {
        t.relu(n[0])
    });
}

// ---- pooling / resampling / layout -------------------------------------------

#[test]
fn maxpool_even_grid() {
    check_op(&[("x", distinct_arr(&[1, 2, 8, 8]))], 1.0, |t, n| {
        t.maxpool2(n[0])
    });
}

#[test]
fn maxpool_floors_odd_edges() {
    check_op(&[("x", distinct_arr(&[1, 2, 5, 7]))], 1.0, |t, n| {
        t.maxpool2(n[0])
    });
}

#[test]
fn global_average_pool() {
    check_op(
        &[("x", rand_arr(&[2, 3, 4, 4], -1.0, 1.0, 31))],
        1.0,
        |t, n| t.global_avgpool(n[0]),
    );
}

#[test]
fn nearest_upsample() {
    check_op(
        &[("x", rand_arr(&[1, 2, 3, 3], -1.0, 1.0, 32))],
        1.0,
        |t, n| t.upsample2(n[0]),
    );
}

#[test]
fn zero_pad_bottom_right() {
    check_op(
        &[("x", rand_arr(&[1, 2, 3, 4], -1.0, 1.0, 33))],
        1.0,
        |t, n| t.pad_zero_br(n[0], 2, 3),
    );
}

#[test]
fn crop_spatial_window() {
    check_op(
        &[("x", rand_arr(&[1, 2, 6, 7], -1.0, 1.0, 34))],
        1.0,
        |t, n| t.crop2d(n[0], 1, 2, 4, 4),
    );
}

#[test]
fn cyclic_roll() {
    check_op(
        &[("x", rand_arr(&[1, 2, 5, 6], -1.0, 1.0, 35))],
        1.0,
        |t, n| t.roll2d(n[0], 2, -1),
    );
}

#[test]
fn channel_concat() {
    check_op(
        &[
            ("a", rand_arr(&[1, 2, 3, 3], -1.0, 1.0, 36)),
            ("b", rand_arr(&[1, 3, 3, 3], -1.0, 1.0, 37)),
        ],
        1.0,
        |t, n| t.concat_c(n[0], n[1]),
    );
}

#[test]
fn reshape_preserves_gradients() {
    check_op(
        &[("x", rand_arr(&[2, 3, 4], -1.0, 1.0, 38))],
        1.0,
        |t, n| t.reshape(n[0], &[4, 6]),
    );
}

#[test]
fn narrow_last_axis() {
    check_op(
        &[("x", rand_arr(&[2, 3, 6], -1.0, 1.0, 39))],
        1.0,
        |t, n| t.narrow_last(n[0], 1, 3),
    );
}

// ---- attention plumbing --------------------------------------------------------

#[test]
fn window_partition_tokens() {
    check_op(
        &[("x", rand_arr(&[1, 3, 4, 6], -1.0, 1.0, 40))],
        1.0,
        |t, n| t.window_partition(n[0], 2),
    );
}

#[test]
fn window_merge_tokens() {
    check_op(
        &[("tokens", rand_arr(&[6, 4, 3], -1.0, 1.0, 41))],
        1.0,
        |t, n| t.window_merge(n[0], 1, 3, 4, 6, 2),
    );
}

#[test]
fn head_split_and_merge() {
    check_op(
        &[("x", rand_arr(&[2, 4, 6], -1.0, 1.0, 42))],
        1.0,
        |t, n| t.split_heads(n[0], 2),
    );
    check_op(
        &[("x", rand_arr(&[2, 2, 4, 3], -1.0, 1.0, 43))],
        1.0,
        |t, n| t.merge_heads(n[0]),
    );
}

#[test]
fn batched_matmul() {
    check_op(
        &[
            ("a", rand_arr(&[2, 3, 4], -1.0, 1.0, 44)),
            ("b", rand_arr(&[2, 4, 5], -1.0, 1.0, 45)),
        ],
        1.0,
        |t, n| t.bmm_nn(n[0], n[1]),
    );
    check_op(
        &[
            ("a", rand_arr(&[2, 3, 4], -1.0, 1.0, 46)),
            ("b", rand_arr(&[2, 5, 4], -1.0, 1.0, 47)),
        ],
        1.0,
        |t, n| t.bmm_nt(n[0], n[1]),
    );
}

#[test]
fn softmax_over_last_axis() {
    check_op(
        &[("x", rand_arr(&[2, 3, 5], -2.0, 2.0, 48))],
        1.0,
        |t, n| t.softmax_last(n[0]),
    );
}

#[test]
fn relative_position_bias_expansion() {
    // Pair-index map for 2x2 windows: token (y, x), relative offset bucketed
    // on a (2*2 - 1)^2 grid.
    let win = 2usize;
    let t_tokens = win * win;
    let span = 2 * win - 1;
    let mut index = Vec::with_capacity(t_tokens * t_tokens);
    for ti in 0..t_tokens {
        for tj in 0..t_tokens {
            let (yi, xi) = (ti / win, ti % win);
            let (yj, xj) = (tj / win, tj % win);
            let dy = yi as isize - yj as isize + (win as isize - 1);
            let dx = xi as isize - xj as isize + (win as isize - 1);
            index.push(dy as usize * span + dx as usize);
        }
    }
    let index = Arc::new(index);
    check_op(
        &[("table", rand_arr(&[span * span, 2], -0.5, 0.5, 49))],
        1.0,
        move |t, n| t.rpb_expand(n[0], Arc::clone(&index), t_tokens),
    );
}

#[test]
fn bias_add_broadcasts_over_windows() {
    check_op(
        &[
            ("scores", rand_arr(&[3, 2, 4, 4], -1.0, 1.0, 50)),
            ("bias", rand_arr(&[2, 4, 4], -0.5, 0.5, 51)),
        ],
        1.0,
        |t, n| t.add_rpb(n[0], n[1]),
    );
}

#[test]
fn mask_add_is_identity_on_scores() {
    let mask = Arr::from_shape_fn(IxDyn(&[2, 3, 3]), |ix| {
        if (ix[1] + ix[2]) % 2 == 0 {
            0.0
        } else {
            -3.0
        }
    });
    check_op(
        &[("scores", rand_arr(&[4, 2, 3, 3], -1.0, 1.0, 52))],
        1.0,
        move |t, n| t.add_mask(n[0], &mask),
    );
}

#[test]
fn masked_softmax_blocks_cross_group_gradients() {
    // Block-diagonal mask: tokens 0-1 and 2-3 attend only within their pair.
    let mask = Arr::from_shape_fn(IxDyn(&[1, 4, 4]), |ix| {
        if (ix[1] < 2) == (ix[2] < 2) {
            0.0
        } else {
            -1e9
        }
    });
    check_op(
        &[("scores", rand_arr(&[2, 1, 4, 4], -1.0, 1.0, 53))],
        1.0,
        move |t, n| {
            let m = t.add_mask(n[0], &mask);
            t.softmax_last(m)
        },
    );
}

// ---- losses & scalar plumbing ---------------------------------------------------

#[test]
fn mean_squared_error() {
    check_op(
        &[
            ("a", rand_arr(&[2, 3, 4], -1.0, 1.0, 54)),
            ("b", rand_arr(&[2, 3, 4], -1.0, 1.0, 55)),
        ],
        1.0,
        |t, n| t.mse_mean(n[0], n[1]),
    );
}

#[test]
fn smooth_l1_both_branches() {
    // Differences land in [0.2, 0.8] or [1.2, 2.0], far from the branch
    // switch at |d| = 1 relative to the probe step.
    let a = rand_arr(&[2, 3, 4], -0.4, 0.4, 56);
    let mut r = rng::seeded(57);
    let b = &a
        + &Arr::from_shape_fn(a.raw_dim(), |_| {
            let mag = if r.gen_bool(0.5) {
                r.gen_range(0.2..0.8)
            } else {
                r.gen_range(1.2..2.0)
            };
            if r.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        });
    check_op(&[("a", a), ("b", b)], 1.0, |t, n| {
        t.smooth_l1_mean(n[0], n[1])
    });
}

#[test]
fn binary_cross_entropy_on_logits() {
    let targets = Arr::from_shape_vec(IxDyn(&[6]), vec![0.0, 1.0, 0.25, 0.75, 1.0, 0.0]).unwrap();
    check_op(
        &[("logits", rand_arr(&[6], -2.0, 2.0, 58))],
        1.0,
        move |t, n| t.bce_logits_mean(n[0], &targets),
    );
}

#[test]
fn multiclass_cross_entropy() {
    let labels = [0usize, 2, 1, 1];
    check_op(
        &[("logits", rand_arr(&[4, 3], -2.0, 2.0, 59))],
        1.0,
        move |t, n| t.cross_entropy_logits(n[0], &labels),
    );
}

#[test]
fn scalar_arithmetic_composition() {
    check_op(
        &[
            ("a", rand_arr(&[2, 3], -1.0, 1.0, 60)),
            ("b", rand_arr(&[2, 3], -1.0, 1.0, 61)),
        ],
        1.0,
        |t, n| {
            let s = t.add(n[0], n[1]);
            let d = t.sub(n[0], n[1]);
            let s7 = t.scale(s, 0.7);
            let m1 = t.mean_all(s7);
            let m2 = t.mean_all(d);
            let m3 = t.mse_mean(n[0], n[1]);
            t.weighted_sum(&[(m1, 0.3), (m2, -1.2), (m3, 2.0)])
        },
    );
}
