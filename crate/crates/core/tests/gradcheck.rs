//! Reverse-mode gradients against central finite differences in f64.

use std::time::Instant;

use proptest::prelude::*;
use toyvla_core::gradcheck::{check_inputs, check_pipeline, tiny_pipeline};
use toyvla_core::graph::{AttnKind, AttnSegment};
use toyvla_core::integration::Variant;
use toyvla_core::{Graph, Rng, Tensor, Var};

const OP_TOL: f64 = 1e-6;
const H: f64 = 1e-3;

fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.range(-1.5, 1.5))
}

type Build = fn(&mut Graph<f64>, &[Var]) -> toyvla_core::Result<Var>;

/// `(name, input shapes, output shape, builder)` for each differentiable op.
fn cases(r: usize, c: usize) -> Vec<(&'static str, Vec<Vec<usize>>, Vec<usize>, Build)> {
    vec![
        ("matmul", vec![vec![r, c], vec![c, 3]], vec![r, 3], |g, x| {
            g.matmul(x[0], x[1])
        }),
        ("add", vec![vec![r, c]; 2], vec![r, c], |g, x| g.add(x[0], x[1])),
        ("sub", vec![vec![r, c]; 2], vec![r, c], |g, x| g.sub(x[0], x[1])),
        ("mul", vec![vec![r, c]; 2], vec![r, c], |g, x| g.mul(x[0], x[1])),
        ("add_row", vec![vec![r, c], vec![c]], vec![r, c], |g, x| {
            g.add_row(x[0], x[1])
        }),
        ("mul_row", vec![vec![r, c], vec![c]], vec![r, c], |g, x| {
            g.mul_row(x[0], x[1])
        }),
        ("scale", vec![vec![r, c]], vec![r, c], |g, x| Ok(g.scale(x[0], -0.7))),
        ("add_const", vec![vec![r, c]], vec![r, c], |g, x| {
            Ok(g.add_const(x[0], 0.3))
        }),
        ("normalize", vec![vec![r, c]], vec![r, c], |g, x| {
            Ok(g.normalize(x[0], 1e-5))
        }),
        ("gelu", vec![vec![r, c]], vec![r, c], |g, x| Ok(g.gelu(x[0]))),
        ("silu", vec![vec![r, c]], vec![r, c], |g, x| Ok(g.silu(x[0]))),
        ("square", vec![vec![r, c]], vec![r, c], |g, x| Ok(g.square(x[0]))),
        ("mean", vec![vec![r, c]], vec![1], |g, x| Ok(g.mean(x[0]))),
        ("sum", vec![vec![r, c]], vec![1], |g, x| Ok(g.sum(x[0]))),
        ("concat_rows", vec![vec![r, c], vec![2, c]], vec![r + 2, c], |g, x| {
            g.concat_rows(x)
        }),
        ("gather_rows", vec![vec![r, c]], vec![3, c], |g, x| {
            g.gather_rows(x[0], vec![0, 0, 1])
        }),
        ("group_rows", vec![vec![r, c]], vec![1, 2 * c], |g, x| {
            g.group_rows(x[0], vec![1, 0], 2)
        }),
        ("slice_cols", vec![vec![r, c]], vec![r, 1], |g, x| {
            g.slice_cols(x[0], 1, 1)
        }),
        ("repeat_rows", vec![vec![r, c]], vec![2 * r, c], |g, x| {
            Ok(g.repeat_rows(x[0], 2))
        }),
        ("linear", vec![vec![r, c], vec![c, 2], vec![2]], vec![r, 2], |g, x| {
            g.linear(x[0], x[1], x[2])
        }),
        ("layer_norm", vec![vec![r, c], vec![c], vec![c]], vec![r, c], |g, x| {
            g.layer_norm(x[0], x[1], x[2], 1e-5)
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>(), r in 2usize..6, c in 3usize..8) {
        let mut rng = Rng::new(seed);
        for (name, shapes, out, build) in cases(r, c) {
            let mut inputs: Vec<_> = shapes.iter().map(|s| rand(&mut rng, s)).collect();
            if name == "normalize" || name == "layer_norm" {
                // Near-equal rows make normalization a step function that no
                // stencil resolves; spread columns so the row variance stays away from zero.
                let x = &mut inputs[0];
                for (k, v) in x.data_mut().iter_mut().enumerate() {
                    *v += 4.0 * (k % c) as f64;
                }
            }
            let w = rand(&mut rng, &out);
            let err = check_inputs(&inputs, &w, H, &build).unwrap();
            prop_assert!(err < OP_TOL, "{name}: relative error {err:e}");
        }
    }

    #[test]
    fn packed_attention_matches_finite_differences(seed in any::<u64>(), heads in 1usize..3) {
        let mut rng = Rng::new(seed);
        let d = 4;
        // Two segments with different query and key counts.
        let inputs = vec![rand(&mut rng, &[5, d]), rand(&mut rng, &[7, d]), rand(&mut rng, &[7, d])];
        let w = rand(&mut rng, &[5, d]);
        let build = move |g: &mut Graph<f64>, x: &[Var]| {
            let segs = vec![
                AttnSegment { q_start: 0, q_len: 2, kv_start: 0, kv_len: 3 },
                AttnSegment { q_start: 2, q_len: 3, kv_start: 3, kv_len: 4 },
            ];
            g.attention(x[0], x[1], x[2], heads, segs, AttnKind::Generic, (x[0], x[1]))
        };
        let err = check_inputs(&inputs, &w, H, &build).unwrap();
        prop_assert!(err < OP_TOL, "attention: relative error {err:e}");
    }
}

#[test]
fn full_pipeline_gradients_for_every_variant() {
    for v in Variant::ALL {
        let t = Instant::now();
        let r = check_pipeline(&tiny_pipeline(v), 11).unwrap();
        assert!(r.entries > 1000, "{v}: only {} entries", r.entries);
        assert!(r.max_rel_error < 1e-5, "{v}: {:e} at {:?}", r.max_rel_error, r.worst);
        assert!(t.elapsed().as_secs() < 60, "{v}: {:?}", t.elapsed());
    }
}
