//! Layer building blocks on top of [`Graph`], plus eager tensor versions of
//! the same operators for direct use and testing.

use crate::error::{shape_err, Error, Result};
use crate::graph::{AttnKind, AttnSegment, Graph, Var};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// `y = xW + b`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let (xv, wv, bv) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.linear(xv, wv, bv)?;
    Ok(g.value(y).clone())
}

pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("layer norm eps {eps} must be > 0")));
    }
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(shape_err("layer_norm", x.shape(), gain.shape()));
    }
    let mut g = Graph::inference();
    let (xv, gv, bv) = (g.input(x.clone()), g.input(gain.clone()), g.input(bias.clone()));
    let y = g.layer_norm(xv, gv, bv, T::lit(eps))?;
    g.value(y).clone().reshape(x.shape())
}

/// Softmax along `axis` with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    let inner: usize = shape[axis + 1..].iter().product();
    let len = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[at(j)];
            }
            crate::graph::softmax_in_place(&mut buf, T::one());
            for (j, b) in buf.iter().enumerate() {
                data[at(j)] = *b;
            }
        }
    }
    Ok(out)
}

/// Interleaved `[sin(f₀t), cos(f₀t), sin(f₁t), …]` with frequencies
/// geometrically spaced over `[1, 10⁴]`.
pub fn sinusoidal_embedding<T: Scalar>(t: f64, dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "sinusoidal embedding dim {dim} must be even and positive"
        )));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let frac = if half == 1 { 0.0 } else { i as f64 / (half - 1) as f64 };
        let f = 10_000f64.powf(frac);
        out.push(T::lit((f * t).sin()));
        out.push(T::lit((f * t).cos()));
    }
    Ok(Tensor::vector(out))
}

// ---- parameter initialisation --------------------------------------------

/// Registers `{prefix}.w` (`d_in × d_out`, N(0, std²)) and a zero `{prefix}.b`.
pub fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    std: f64,
) -> Result<()> {
    store.insert_normal(&format!("{prefix}.w"), &[d_in, d_out], std, rng)?;
    store.insert_zeros(&format!("{prefix}.b"), &[d_out])?;
    Ok(())
}

/// Default fan-in scaled init.
pub fn init_linear_default<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    init_linear(store, rng, prefix, d_in, d_out, 1.0 / (d_in as f64).sqrt())
}

pub fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert_full(&format!("{prefix}.g"), &[d], 1.0)?;
    store.insert_zeros(&format!("{prefix}.b"), &[d])?;
    Ok(())
}

/// Query/key/value/output projections under `{prefix}.{q,k,v,o}`; the
/// output projection uses `out_std`.
pub fn init_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    d: usize,
    out_std: f64,
) -> Result<()> {
    for p in ["q", "k", "v"] {
        init_linear_default(store, rng, &format!("{prefix}.{p}"), d, d)?;
    }
    init_linear(store, rng, &format!("{prefix}.o"), d, d, out_std)
}

// ---- graph helpers --------------------------------------------------------

pub fn linear<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param_named(store, &format!("{prefix}.w"))?;
    let b = g.param_named(store, &format!("{prefix}.b"))?;
    g.linear(x, w, b)
}

pub fn layer_norm_node<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param_named(store, &format!("{prefix}.g"))?;
    let bias = g.param_named(store, &format!("{prefix}.b"))?;
    g.layer_norm(x, gain, bias, T::lit(LN_EPS))
}

/// Projected multi-head attention from `q_in` rows to `kv_in` rows.
#[allow(clippy::too_many_arguments)]
pub fn attention_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    heads: usize,
    segments: Vec<AttnSegment>,
    kind: AttnKind,
) -> Result<(Var, Var)> {
    let q = linear(g, store, &format!("{prefix}.q"), q_in)?;
    let k = linear(g, store, &format!("{prefix}.k"), kv_in)?;
    let v = linear(g, store, &format!("{prefix}.v"), kv_in)?;
    let a = g.attention(q, k, v, heads, segments, kind, (q_in, kv_in))?;
    let o = linear(g, store, &format!("{prefix}.o"), a)?;
    Ok((o, a))
}

pub fn mlp<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h);
    linear(g, store, &format!("{prefix}.fc2"), h)
}

pub fn init_mlp<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut Rng,
    prefix: &str,
    d: usize,
    hidden: usize,
    out_std: f64,
) -> Result<()> {
    init_linear_default(store, rng, &format!("{prefix}.fc1"), d, hidden)?;
    init_linear(store, rng, &format!("{prefix}.fc2"), hidden, d, out_std)
}

/// Result of [`multi_head_attention`].
#[derive(Clone, Debug)]
pub struct AttentionOutput<T> {
    pub output: Tensor<T>,
    /// One `Tq × Tkv` row-stochastic matrix per head.
    pub head_weights: Vec<Tensor<T>>,
}

/// Eager multi-head attention using projections stored under `prefix`.
pub fn multi_head_attention<T: Scalar>(
    q_in: &Tensor<T>,
    kv_in: &Tensor<T>,
    store: &ParamStore<T>,
    prefix: &str,
    heads: usize,
) -> Result<AttentionOutput<T>> {
    let d = q_in.cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let mut g = Graph::inference();
    let q = g.input(q_in.clone());
    let kv = g.input(kv_in.clone());
    let seg = vec![AttnSegment {
        q_start: 0,
        q_len: q_in.rows(),
        kv_start: 0,
        kv_len: kv_in.rows(),
    }];
    let (out, attn) = attention_block(&mut g, store, prefix, q, kv, heads, seg, AttnKind::Generic)?;
    let (probs, _, _) = g.attention_probs(attn).expect("attention node");
    let block = q_in.rows() * kv_in.rows();
    let head_weights = (0..heads)
        .map(|h| {
            Tensor::new(
                vec![q_in.rows(), kv_in.rows()],
                probs[h * block..(h + 1) * block].to_vec(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AttentionOutput {
        output: g.value(out).clone(),
        head_weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn identity_attention(store: &mut ParamStore<f64>, d: usize) {
        let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        for p in ["q", "k", "v", "o"] {
            store.insert(&format!("att.{p}.w"), eye.clone()).unwrap();
            store.insert_zeros(&format!("att.{p}.b"), &[d]).unwrap();
        }
    }

    #[test]
    fn linear_identity_and_hand_arithmetic() {
        let y = linear_forward(
            &m(&[&[1., 2.]]),
            &m(&[&[1., 0.], &[0., 1.]]),
            &Tensor::vector(vec![0., 0.]),
        )
        .unwrap();
        assert_eq!(y.data(), &[1., 2.]);
        let y = linear_forward(
            &m(&[&[1., 1.]]),
            &m(&[&[2., 0.], &[0., 3.]]),
            &Tensor::vector(vec![1., 1.]),
        )
        .unwrap();
        assert_eq!(y.data(), &[3., 4.]);
    }

    #[test]
    fn linear_matches_triple_loop_oracle() {
        let mut rng = Rng::new(7);
        let x: Tensor<f64> = crate::rng::sample_gaussian(&mut rng, &[4, 3]);
        let w: Tensor<f64> = crate::rng::sample_gaussian(&mut rng, &[3, 2]);
        let b: Tensor<f64> = crate::rng::sample_gaussian(&mut rng, &[2]);
        let y = linear_forward(&x, &w, &b).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut s = b.data()[j];
                for k in 0..3 {
                    s += x[[i, k]] * w[[k, j]];
                }
                assert!((y[[i, j]] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_shape_mismatch_is_structured() {
        let err = linear_forward(
            &m(&[&[1., 2., 3.]]),
            &m(&[&[1., 0.], &[0., 1.]]),
            &Tensor::vector(vec![0., 0.]),
        )
        .unwrap_err();
        match err {
            Error::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![1, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = |n| Tensor::full(&[n], 1.0);
        let zeros = |n| Tensor::zeros(&[n]);
        let y = layer_norm(&Tensor::vector(vec![5., 5., 5.]), &ones(3), &zeros(3), LN_EPS).unwrap();
        assert_eq!(y.data(), &[0., 0., 0.]);
        let y = layer_norm(&Tensor::vector(vec![1., -1.]), &ones(2), &zeros(2), LN_EPS).unwrap();
        for (a, b) in y.data().iter().zip([1.0f64, -1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
        // hand oracle: mean 2, var 2/3
        let y = layer_norm(
            &Tensor::vector(vec![1., 2., 3.]),
            &Tensor::full(&[3], 2.0),
            &ones(3),
            LN_EPS,
        )
        .unwrap();
        let rs = 1.0 / (2.0f64 / 3.0 + LN_EPS).sqrt();
        for (a, x) in y.data().iter().zip([1., 2., 3.]) {
            assert!((a - (2.0 * (x - 2.0) * rs + 1.0)).abs() < 1e-12);
        }
        assert!(layer_norm(&Tensor::vector(vec![1., 2.]), &ones(2), &zeros(2), 0.0).is_err());
    }

    #[test]
    fn layer_norm_and_softmax_finite_for_large_inputs() {
        let x = Tensor::vector(vec![1e4f32, -1e4, 3.0, 9999.0]);
        let y = layer_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), LN_EPS).unwrap();
        assert!(y.all_finite());
        assert!(softmax(&x, 0).unwrap().all_finite());
    }

    #[test]
    fn softmax_examples() {
        let y = softmax(&Tensor::vector(vec![0.0f64, 0.0]), 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax(&Tensor::vector(vec![1000.0f64, 0.0]), 0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && y.data()[1].abs() < 1e-6);
        let y = softmax(&Tensor::vector(vec![1.0f64, 2.0, 3.0]), 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (a, x) in y.data().iter().zip([1.0f64, 2.0, 3.0]) {
            assert!((a - x.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_first_axis() {
        let x = Tensor::new(vec![2, 3], vec![0.0f64, 1.0, 2.0, 0.0, 1.0, 2.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        let y = softmax(&x, 1).unwrap();
        for r in 0..2 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn sinusoidal_examples() {
        let e = sinusoidal_embedding::<f64>(0.0, 8).unwrap();
        for i in 0..4 {
            assert_eq!(e.data()[2 * i], 0.0);
            assert_eq!(e.data()[2 * i + 1], 1.0);
        }
        let e = sinusoidal_embedding::<f64>(0.5, 4).unwrap();
        let want = [0.5f64.sin(), 0.5f64.cos(), 5000f64.sin(), 5000f64.cos()];
        for (a, b) in e.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        for t in [0.0, 0.13, 0.77, 1.0] {
            let e = sinusoidal_embedding::<f32>(t, 64).unwrap();
            assert!(e.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert!(matches!(sinusoidal_embedding::<f64>(0.1, 3), Err(Error::Config(_))));
    }

    #[test]
    fn single_key_attention_returns_value_projection() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(1);
        init_attention(&mut store, &mut rng, "att", 4, 0.5).unwrap();
        let q = m(&[&[0.3, -1.0, 2.0, 0.1], &[1.0, 1.0, 1.0, 1.0]]);
        let kv = m(&[&[0.5, 0.2, -0.4, 0.9]]);
        let out = multi_head_attention(&q, &kv, &store, "att", 2).unwrap();
        for w in &out.head_weights {
            assert!(w.data().iter().all(|&p| p == 1.0));
        }
        let v = linear_forward(
            &kv,
            store.value(store.id("att.v.w").unwrap()),
            store.value(store.id("att.v.b").unwrap()),
        )
        .unwrap();
        let o = linear_forward(
            &v,
            store.value(store.id("att.o.w").unwrap()),
            store.value(store.id("att.o.b").unwrap()),
        )
        .unwrap();
        for r in 0..2 {
            for (a, b) in out.output.row(r).iter().zip(o.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_attention_matches_scalar_oracle() {
        let mut store = ParamStore::<f64>::new();
        identity_attention(&mut store, 2);
        let q = m(&[&[1., 0.]]);
        let kv = m(&[&[1., 0.], &[0., 1.]]);
        let out = multi_head_attention(&q, &kv, &store, "att", 1).unwrap();
        // oracle: scores [1/√2, 0]
        let s = [1.0 / 2f64.sqrt(), 0.0];
        let z = s[0].exp() + s[1].exp();
        let w = [s[0].exp() / z, s[1].exp() / z];
        let got = out.head_weights[0].data();
        assert!((got[0] - w[0]).abs() < 1e-12 && (got[1] - w[1]).abs() < 1e-12);
        assert!((out.output[[0, 0]] - w[0]).abs() < 1e-12);
        assert!((out.output[[0, 1]] - w[1]).abs() < 1e-12);
    }

    #[test]
    fn attention_is_invariant_to_kv_permutation() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = Rng::new(4);
        init_attention(&mut store, &mut rng, "att", 4, 0.5).unwrap();
        let q: Tensor<f64> = crate::rng::sample_gaussian(&mut rng, &[3, 4]);
        let kv: Tensor<f64> = crate::rng::sample_gaussian(&mut rng, &[5, 4]);
        let perm = kv.select_rows(&[3, 0, 4, 2, 1]);
        let a = multi_head_attention(&q, &kv, &store, "att", 2).unwrap();
        let b = multi_head_attention(&q, &perm, &store, "att", 2).unwrap();
        assert!(a.output.max_abs_diff(&b.output) < 1e-12);
    }

    #[test]
    fn attention_heads_must_divide_width() {
        let store = ParamStore::<f64>::new();
        let x = Tensor::<f64>::zeros(&[1, 6]);
        assert!(matches!(
            multi_head_attention(&x, &x, &store, "att", 4),
            Err(Error::Config(_))
        ));
    }
}
