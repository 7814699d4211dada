//! Dense tensors, the kernels behind them, and reverse-mode gradients.

mod backend;
mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use backend::{Backend, Eager, Param};
pub use gradcheck::{grad_check, GradCheck};
pub use kernels::Unary;
pub use tape::{sum_scalars, Gradients, Tape, Var};
pub use tensor::{DType, Storage, Tensor};

use crate::error::{shape_err, Result};
use crate::ssm::ConvState;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

pub fn elementwise(kind: Unary, x: &Tensor) -> Result<Tensor> {
    x.unary(kind)
}

pub fn rms_norm(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    x.rms_norm(gamma, eps)
}

pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    Ok(logits.cross_entropy(target)?.item())
}

/// Streaming causal depthwise convolution: `y[t,c] = Σ_i w[i,c]·x_ext[t+i,c] + bias[c]`
/// where `x_ext` is the carried left context followed by `x`.
pub fn causal_depthwise_conv1d(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    state: &ConvState,
) -> Result<(Tensor, ConvState)> {
    let mut b = Eager;
    let (xv, wv, bv) = (b.constant(x.clone()), b.constant(w.clone()), b.constant(bias.clone()));
    let sv = b.constant(state.frames().clone());
    let (y, next) = causal_conv(&mut b, &xv, &wv, &bv, &sv)?;
    Ok(((*y).clone(), ConvState::from_frames((*next).clone())?))
}

/// Backend-generic causal depthwise convolution. `ctx` holds the previous
/// `K-1` frames; returns the output and the updated context.
pub fn causal_conv<B: Backend>(
    b: &mut B,
    x: &B::Var,
    w: &B::Var,
    bias: &B::Var,
    ctx: &B::Var,
) -> Result<(B::Var, B::Var)> {
    let k = b.value(w).shape()[0];
    let ctx_rows = b.value(ctx).shape()[0];
    if ctx_rows + 1 != k {
        return Err(shape_err("causal_conv", format!("context has {ctx_rows} rows for kernel {k}")));
    }
    let xd = b.value(x).shape()[1];
    if b.value(ctx).shape()[1] != xd {
        return Err(shape_err("causal_conv", "channel-count mismatch"));
    }
    let xe = b.concat_rows(&[ctx.clone(), x.clone()])?;
    let y = b.depthwise_valid(&xe, w, bias)?;
    let total = b.value(&xe).shape()[0];
    let next = b.slice_rows(&xe, total - ctx_rows, ctx_rows)?;
    Ok((y, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_f64(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), DType::F64).unwrap()
    }

    fn p(name: &str, t: Tensor) -> Param {
        Param::new(name, t)
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&mut rng, &[3, 3]);
        let mut id = vec![0.0; 9];
        for i in 0..3 {
            id[i * 4] = 1.0;
        }
        let eye = Tensor::from_f64(&[3, 3], id, DType::F64).unwrap();
        assert_eq!(matmul(&eye, &x).unwrap(), x);

        let a = Tensor::from_f64(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], DType::F64).unwrap();
        let b = Tensor::from_f64(&[2, 1], vec![1.0, 1.0], DType::F64).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().to_f64_vec(), vec![3.0, 7.0]);
        assert!(matmul(&a, &x).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_t(&mut rng, &[7, 5]);
        let b = rand_t(&mut rng, &[5, 3]);
        let c = matmul(&a, &b).unwrap();
        let (av, bv) = (a.to_f64_vec(), b.to_f64_vec());
        for i in 0..7 {
            for j in 0..3 {
                // pairwise-summed oracle, different association than the kernel
                let terms: Vec<f64> = (0..5).map(|p| av[i * 5 + p] * bv[p * 3 + j]).collect();
                let s = (terms[0] + terms[1]) + (terms[2] + terms[3]) + terms[4];
                assert!((c.get(i * 3 + j) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn elementwise_closed_forms() {
        let x = Tensor::from_f64(&[2], vec![-1.0, 2.0], DType::F64).unwrap();
        assert_eq!(elementwise(Unary::Relu, &x).unwrap().to_f64_vec(), vec![0.0, 2.0]);
        let z = Tensor::from_f64(&[1], vec![0.0], DType::F64).unwrap();
        let sp = elementwise(Unary::Softplus, &z).unwrap().item();
        assert!((sp - std::f64::consts::LN_2).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = rand_t(&mut rng, &[16]).scale(4.0).unwrap();
        let y = elementwise(Unary::Silu, &v).unwrap();
        for i in 0..16 {
            let xi = v.get(i);
            let oracle = xi / (1.0 + (-xi).exp());
            assert!((y.get(i) - oracle).abs() < 1e-14);
        }
    }

    #[test]
    fn rms_norm_cases() {
        let g = Tensor::from_f64(&[2], vec![1.0, 1.0], DType::F64).unwrap();
        let zero = Tensor::zeros(&[2], DType::F64);
        assert_eq!(rms_norm(&zero, &g, 1e-6).unwrap().to_f64_vec(), vec![0.0, 0.0]);
        let x = Tensor::from_f64(&[2], vec![3.0, 4.0], DType::F64).unwrap();
        let y = rms_norm(&x, &g, 0.0).unwrap().to_f64_vec();
        assert!((y[0] - 0.848_528_137_423_857).abs() < 1e-12);
        assert!((y[1] - 1.131_370_849_898_476).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_t(&mut rng, &[9]);
        let gm = rand_t(&mut rng, &[9]);
        let y = rms_norm(&x, &gm, 1e-5).unwrap();
        let xs = x.to_f64_vec();
        let ms: f64 = xs.iter().map(|v| v * v).sum::<f64>() / 9.0;
        for i in 0..9 {
            let o = xs[i] / (ms + 1e-5).sqrt() * gm.get(i);
            assert!((y.get(i) - o).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let u = Tensor::zeros(&[10], DType::F64);
        assert!((cross_entropy(&u, 3).unwrap() - 10f64.ln()).abs() < 1e-12);
        let mut oh = vec![0.0; 10];
        oh[4] = 1e6;
        let t = Tensor::from_f64(&[10], oh, DType::F64).unwrap();
        assert!(cross_entropy(&t, 4).unwrap().abs() < 1e-12);
        assert!(cross_entropy(&t, 10).is_err());
    }

    #[test]
    fn cross_entropy_matches_frozen_high_precision_value() {
        // logits [0.5, -1.25, 2.0, 0.0, 3.5, -0.75, 1.0], target 2; reference
        // computed with 50-digit mpmath: log(sum(exp(l))) - l[2]
        let l = Tensor::from_f64(&[7], vec![0.5, -1.25, 2.0, 0.0, 3.5, -0.75, 1.0], DType::F64).unwrap();
        let v = cross_entropy(&l, 2).unwrap();
        assert!((v - 1.842_252_313_797_165).abs() < 1e-10, "{v}");
    }

    #[test]
    fn causal_conv_identity_kernel_and_substitution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_t(&mut rng, &[6, 3]);
        let mut w = vec![0.0; 4 * 3];
        for c in 0..3 {
            w[3 * 3 + c] = 1.0;
        }
        let w = Tensor::from_f64(&[4, 3], w, DType::F64).unwrap();
        let b = Tensor::zeros(&[3], DType::F64);
        let st = ConvState::zeros(4, 3, DType::F64);
        let (y, _) = causal_depthwise_conv1d(&x, &w, &b, &st).unwrap();
        assert_eq!(y, x);

        // T=1, K=3, state=[a,b], x=[c]
        let w = Tensor::from_f64(&[3, 1], vec![0.5, -2.0, 3.0], DType::F64).unwrap();
        let st = ConvState::from_frames(Tensor::from_f64(&[2, 1], vec![1.0, 2.0], DType::F64).unwrap()).unwrap();
        let xc = Tensor::from_f64(&[1, 1], vec![4.0], DType::F64).unwrap();
        let (y, next) = causal_depthwise_conv1d(&xc, &w, &Tensor::zeros(&[1], DType::F64), &st).unwrap();
        assert_eq!(y.item(), 0.5 * 1.0 - 2.0 * 2.0 + 3.0 * 4.0);
        assert_eq!(next.frames().to_f64_vec(), vec![2.0, 4.0]);
    }

    #[test]
    fn causal_conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 3], DType::F64);
        let w = Tensor::zeros(&[4, 3], DType::F64);
        let st = ConvState::zeros(4, 2, DType::F64);
        assert!(causal_depthwise_conv1d(&x, &w, &Tensor::zeros(&[3], DType::F64), &st).is_err());
    }

    #[test]
    fn causal_conv_chunked_equals_one_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_t(&mut rng, &[16, 5]);
        let w = rand_t(&mut rng, &[4, 5]);
        let b = rand_t(&mut rng, &[5]);
        let st0 = ConvState::zeros(4, 5, DType::F64);
        let (full, _) = causal_depthwise_conv1d(&x, &w, &b, &st0).unwrap();
        let mut st = st0.clone();
        let mut parts = Vec::new();
        for c in 0..4 {
            let (y, s) = causal_depthwise_conv1d(&x.slice_rows(c * 4, 4).unwrap(), &w, &b, &st).unwrap();
            parts.push(y);
            st = s;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        assert_eq!(Tensor::concat_rows(&refs).unwrap(), full);
    }

    #[test]
    fn grad_check_square() {
        let x = p("x", Tensor::from_f64(&[1], vec![3.0], DType::F64).unwrap());
        let r = grad_check(&[x], 1e-5, |t, ps| {
            let v = t.param(&ps[0]);
            let sq = t.mul(&v, &v)?;
            t.reshape(&sq, &[])
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn grad_check_cross_entropy_of_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = p("a", rand_t(&mut rng, &[4, 4]));
        let b = p("b", rand_t(&mut rng, &[4, 4]));
        let r = grad_check(&[a, b], 1e-5, |t, ps| {
            let a = t.param(&ps[0]);
            let b = t.param(&ps[1]);
            let m = t.matmul(&a, &b)?;
            let row = t.row(&m, 1)?;
            t.cross_entropy(&row, 2)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = p("a", rand_t(&mut rng, &[3]));
        let mut t = Tape::new();
        let v = t.param(&a);
        let e = t.exp(&v).unwrap();
        let s = t.silu(&v).unwrap();
        let m = t.mul(&e, &s).unwrap();
        let d = t.add(&m, &e).unwrap();
        let loss = t.cross_entropy(&d, 0).unwrap();
        let g = t.backward(loss).unwrap();
        // param, exp, silu, mul, add, cross_entropy
        assert_eq!(g.visited, 6);
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let l = rand_t(&mut rng, &[11]).scale(5.0).unwrap();
            let c: f64 = rng.random_range(-50.0..50.0);
            let shifted = Tensor::from_f64(&[11], l.to_f64_vec().iter().map(|v| v + c).collect(), DType::F64).unwrap();
            let t = rng.random_range(0..11usize);
            assert!((cross_entropy(&l, t).unwrap() - cross_entropy(&shifted, t).unwrap()).abs() < 1e-12);
        }
    }
}
