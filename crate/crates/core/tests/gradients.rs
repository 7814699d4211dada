//! Reverse-mode gradients against finite differences at f64: each primitive
//! over ten seeds, then the composite layers and the tiny language model.

use duplexssm::adapter::{adapter_vars, AdapterWeights};
use duplexssm::blocks::{
    bidirectional_vars, cnn_frontend_vars, conmamba_block_vars, encoder_vars, ConMambaBlockWeights, EncoderConfig,
    EncoderWeights, Frontend, MambaConfig, MambaMixer,
};
use duplexssm::init::{self, seeded, Rng};
use duplexssm::lm::{lm_logits_vars, LmConfig, LmWeights, StateToken, Vocab, VOCAB_SIZE};
use duplexssm::module::Module;
use duplexssm::numerics::{grad_check, Backend, DType, Param, Tape, Tensor, Unary, Var};
use duplexssm::ssm::{selective_scan_vars, ssm_step_vars, SsmParams};
use duplexssm::training::{duplex_loss_vars, response_loss_vars};
use duplexssm::Result;
use rand::RngExt;

const OP_TOL: f64 = 1e-6;
const LAYER_TOL: f64 = 1e-4;
const SEEDS: u64 = 10;

fn rand_t(rng: &mut Rng, shape: &[usize]) -> Tensor {
    init::uniform(rng, shape, 1.0, DType::F64)
}

fn p(name: &str, t: Tensor) -> Param {
    Param::new(name, t)
}

/// `sum(y * r)` with a fixed random `r`.
fn probe(t: &mut Tape, y: &Var, seed: u64) -> Result<Var> {
    let shape = t.value_of(*y).shape().to_vec();
    let n: usize = shape.iter().product();
    let r = t.constant(rand_t(&mut seeded(seed ^ 0xabc), &shape));
    let prod = t.mul(y, &r)?;
    let row = t.reshape(&prod, &[1, n])?;
    let ones = t.constant(Tensor::from_f64(&[n, 1], vec![1.0; n], DType::F64)?);
    let s = t.matmul(&row, &ones)?;
    t.reshape(&s, &[])
}

fn assert_op<F>(name: &str, tol: f64, eps: f64, params: Vec<Param>, f: F)
where
    F: Fn(&mut Tape, &[Param]) -> Result<Var>,
{
    let r = grad_check(&params, eps, f).unwrap();
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel_err < tol, "{name}: {r:?}");
}

/// Runs `build(seed, rng)` for every seed; `build` returns params and a body
/// producing a tensor that is probed into a scalar.
fn each_seed<B, F>(name: &str, build: B)
where
    B: Fn(&mut Rng) -> (Vec<Param>, F),
    F: Fn(&mut Tape, &[Param]) -> Result<Var>,
{
    for seed in 0..SEEDS {
        let mut rng = seeded(seed);
        let (params, body) = build(&mut rng);
        assert_op(&format!("{name} seed {seed}"), OP_TOL, 1e-6, params, |t, ps| {
            let y = body(t, ps)?;
            probe(t, &y, seed)
        });
    }
}

fn dims(rng: &mut Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

#[test]
fn matmul() {
    each_seed("matmul", |rng| {
        let (m, k, n) = dims(rng);
        (vec![p("a", rand_t(rng, &[m, k])), p("b", rand_t(rng, &[k, n]))], |t: &mut Tape, ps: &[Param]| {
            let (a, b) = (t.param(&ps[0]), t.param(&ps[1]));
            t.matmul(&a, &b)
        })
    });
}

#[test]
fn elementwise_binary() {
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        each_seed(name, |rng| {
            let (m, n, _) = dims(rng);
            let ps = vec![p("a", rand_t(rng, &[m, n])), p("b", rand_t(rng, &[m, n]))];
            (ps, move |t: &mut Tape, ps: &[Param]| {
                let (a, b) = (t.param(&ps[0]), t.param(&ps[1]));
                match which {
                    0 => t.add(&a, &b),
                    1 => t.sub(&a, &b),
                    _ => t.mul(&a, &b),
                }
            })
        });
    }
}

#[test]
fn scale_and_add_bias() {
    each_seed("scale", |rng| {
        let (m, n, _) = dims(rng);
        let c: f64 = rng.random_range(-2.0..2.0);
        (vec![p("a", rand_t(rng, &[m, n]))], move |t: &mut Tape, ps: &[Param]| {
            let a = t.param(&ps[0]);
            t.scale(&a, c)
        })
    });
    each_seed("add_bias", |rng| {
        let (m, n, _) = dims(rng);
        (vec![p("x", rand_t(rng, &[m, n])), p("b", rand_t(rng, &[n]))], |t: &mut Tape, ps: &[Param]| {
            let (x, b) = (t.param(&ps[0]), t.param(&ps[1]));
            t.add_bias(&x, &b)
        })
    });
}

#[test]
fn unary_functions() {
    for kind in [Unary::Silu, Unary::Relu, Unary::Softplus, Unary::Exp, Unary::Sigmoid, Unary::Neg] {
        each_seed(&format!("{kind:?}"), |rng| {
            let (m, n, _) = dims(rng);
            // keep relu inputs away from its kink
            let x = rand_t(rng, &[m, n]).to_f64_vec().iter().map(|v| v + 0.05 * v.signum()).collect();
            let x = Tensor::from_f64(&[m, n], x, DType::F64).unwrap();
            (vec![p("x", x)], move |t: &mut Tape, ps: &[Param]| {
                let x = t.param(&ps[0]);
                t.unary(kind, &x)
            })
        });
    }
}

#[test]
fn normalizations() {
    each_seed("rms_norm", |rng| {
        let (m, n, _) = dims(rng);
        let n = n + 2;
        (vec![p("x", rand_t(rng, &[m, n])), p("g", rand_t(rng, &[n]))], |t: &mut Tape, ps: &[Param]| {
            let (x, g) = (t.param(&ps[0]), t.param(&ps[1]));
            t.rms_norm(&x, &g, 1e-5)
        })
    });
    // two columns normalize to +-1 whatever the input, leaving only eps-sized gradients
    each_seed("layer_norm", |rng| {
        let (m, n, _) = dims(rng);
        let n = n + 2;
        let ps = vec![p("x", rand_t(rng, &[m, n])), p("g", rand_t(rng, &[n])), p("b", rand_t(rng, &[n]))];
        (ps, |t: &mut Tape, ps: &[Param]| {
            let (x, g, b) = (t.param(&ps[0]), t.param(&ps[1]), t.param(&ps[2]));
            t.layer_norm(&x, &g, &b, 1e-5)
        })
    });
}

#[test]
fn cross_entropy() {
    for seed in 0..SEEDS {
        let mut rng = seeded(seed);
        let v = rng.random_range(2..12);
        let target = rng.random_range(0..v);
        let logits = p("l", rand_t(&mut rng, &[v]).scale(3.0).unwrap());
        assert_op("cross_entropy", OP_TOL, 1e-6, vec![logits], |t, ps| {
            let l = t.param(&ps[0]);
            t.cross_entropy(&l, target)
        });
    }
    // the 4x4 composition
    let mut rng = seeded(44);
    let ps = vec![p("a", rand_t(&mut rng, &[4, 4])), p("b", rand_t(&mut rng, &[4, 4]))];
    assert_op("cross_entropy of matmul", OP_TOL, 1e-6, ps, |t, ps| {
        let (a, b) = (t.param(&ps[0]), t.param(&ps[1]));
        let m = t.matmul(&a, &b)?;
        let r = t.slice_rows(&m, 3, 1)?;
        let r = t.reshape(&r, &[4])?;
        t.cross_entropy(&r, 1)
    });
}

#[test]
fn convolutions() {
    each_seed("depthwise_valid", |rng| {
        let (t_len, d, _) = dims(rng);
        let k = rng.random_range(1..4);
        let ps = vec![
            p("x", rand_t(rng, &[t_len + k - 1, d])),
            p("w", rand_t(rng, &[k, d])),
            p("b", rand_t(rng, &[d])),
        ];
        (ps, |t: &mut Tape, ps: &[Param]| {
            let (x, w, b) = (t.param(&ps[0]), t.param(&ps[1]), t.param(&ps[2]));
            t.depthwise_valid(&x, &w, &b)
        })
    });
    each_seed("conv2d", |rng| {
        let (ci, co) = (rng.random_range(1..3), rng.random_range(1..3));
        let (h, w) = (rng.random_range(3..7), rng.random_range(3..7));
        let stride = (rng.random_range(1..3), rng.random_range(1..3));
        let ps = vec![
            p("x", rand_t(rng, &[ci, h, w])),
            p("w", rand_t(rng, &[co, ci, 3, 3])),
            p("b", rand_t(rng, &[co])),
        ];
        (ps, move |t: &mut Tape, ps: &[Param]| {
            let (x, w, b) = (t.param(&ps[0]), t.param(&ps[1]), t.param(&ps[2]));
            t.conv2d(&x, &w, &b, stride, (1, 1))
        })
    });
}

#[test]
fn shape_operations() {
    each_seed("channels_to_rows", |rng| {
        let (c, h, w) = dims(rng);
        (vec![p("x", rand_t(rng, &[c, h, w]))], |t: &mut Tape, ps: &[Param]| {
            let x = t.param(&ps[0]);
            t.channels_to_rows(&x)
        })
    });
    each_seed("concat_rows", |rng| {
        let (m1, m2, n) = dims(rng);
        (vec![p("a", rand_t(rng, &[m1, n])), p("b", rand_t(rng, &[m2, n]))], |t: &mut Tape, ps: &[Param]| {
            let (a, b) = (t.param(&ps[0]), t.param(&ps[1]));
            t.concat_rows(&[a, b, a])
        })
    });
    each_seed("slice_rows_cols", |rng| {
        let (m, n, _) = dims(rng);
        let (m, n) = (m + 2, n + 2);
        (vec![p("x", rand_t(rng, &[m, n]))], move |t: &mut Tape, ps: &[Param]| {
            let x = t.param(&ps[0]);
            let r = t.slice_rows(&x, 1, m - 2)?;
            t.slice_cols(&r, 1, n - 1)
        })
    });
    each_seed("reverse_reshape", |rng| {
        let (m, n, _) = dims(rng);
        (vec![p("x", rand_t(rng, &[m, n]))], move |t: &mut Tape, ps: &[Param]| {
            let x = t.param(&ps[0]);
            let r = t.reverse_rows(&x)?;
            t.reshape(&r, &[n, m])
        })
    });
    each_seed("gather_rows", |rng| {
        let (v, d, _) = dims(rng);
        let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..v)).collect();
        (vec![p("e", rand_t(rng, &[v, d]))], move |t: &mut Tape, ps: &[Param]| {
            let e = t.param(&ps[0]);
            t.gather_rows(&e, &ids)
        })
    });
}

#[test]
fn vector_products() {
    each_seed("outer", |rng| {
        let (m, n, _) = dims(rng);
        (vec![p("u", rand_t(rng, &[m])), p("v", rand_t(rng, &[n]))], |t: &mut Tape, ps: &[Param]| {
            let (u, v) = (t.param(&ps[0]), t.param(&ps[1]));
            t.outer(&u, &v)
        })
    });
    each_seed("mul_rows", |rng| {
        let (m, n, _) = dims(rng);
        (vec![p("m", rand_t(rng, &[m, n])), p("v", rand_t(rng, &[m]))], |t: &mut Tape, ps: &[Param]| {
            let (a, v) = (t.param(&ps[0]), t.param(&ps[1]));
            t.mul_rows(&a, &v)
        })
    });
    each_seed("matvec", |rng| {
        let (m, n, _) = dims(rng);
        (vec![p("m", rand_t(rng, &[m, n])), p("v", rand_t(rng, &[n]))], |t: &mut Tape, ps: &[Param]| {
            let (a, v) = (t.param(&ps[0]), t.param(&ps[1]));
            t.matvec(&a, &v)
        })
    });
}

fn rebind<M: Module + Clone>(m: &M, ps: &[Param]) -> M {
    let mut out = m.clone();
    out.visit_mut(&mut |q| {
        if let Some(src) = ps.iter().find(|s| s.name() == q.name()) {
            q.set(src.value().clone());
        }
    });
    out
}

fn params_of<M: Module>(m: &M) -> Vec<Param> {
    m.params().into_iter().cloned().collect()
}

fn condition<M: Module>(m: &mut M) {
    m.visit_mut(&mut |q| {
        if q.name().ends_with("delta_proj.bias") {
            let n = q.value().numel();
            q.set(init::full(&[n], 0.5, DType::F64));
        }
    });
}

/// Zero-initialized biases can leave whole frames dead after the frontend
/// relu, and layer norm of such a row has gradients near `1/sqrt(eps)`.
fn randomize_biases<M: Module>(m: &mut M, rng: &mut Rng) {
    m.visit_mut(&mut |q| {
        if q.name().ends_with(".bias") && !q.name().ends_with("delta_proj.bias") {
            let shape = q.value().shape().to_vec();
            q.set(init::uniform(rng, &shape, 0.5, DType::F64));
        }
    });
}

#[test]
fn ssm_step_and_scan() {
    for seed in 0..SEEDS {
        let mut rng = seeded(seed);
        let mut sp = SsmParams::init("ssm", 3, 2, true, DType::F64, &mut rng);
        condition(&mut sp);
        let h0 = rand_t(&mut rng, &[3, 2]);
        let xs = rand_t(&mut rng, &[4, 3]);
        assert_op("ssm_step", OP_TOL, 1e-5, params_of(&sp), |t, ps| {
            let v = rebind(&sp, ps).lift(t)?;
            let h = t.constant(h0.clone());
            let x = t.constant(xs.slice_rows(0, 1)?.reshape(&[3])?);
            let (h1, y) = ssm_step_vars(t, &v, &h, &x)?;
            let (lh, ly) = (probe(t, &h1, seed)?, probe(t, &y, seed + 100)?);
            t.add(&lh, &ly)
        });
        assert_op("selective_scan", OP_TOL, 1e-5, params_of(&sp), |t, ps| {
            let v = rebind(&sp, ps).lift(t)?;
            let h = t.constant(h0.clone());
            let x = t.constant(xs.clone());
            let (y, _) = selective_scan_vars(t, &v, &x, &h)?;
            probe(t, &y, seed)
        });
    }
}

#[test]
fn adapter_gradient() {
    for seed in 0..SEEDS {
        let mut rng = seeded(seed);
        let a = AdapterWeights::init(3, 2, Some(4), 3, DType::F64, &mut rng).unwrap();
        let h = rand_t(&mut rng, &[7, 2]);
        assert_op("adapter", OP_TOL, 1e-6, params_of(&a), |t, ps| {
            let w = rebind(&a, ps);
            let hv = t.constant(h.clone());
            let y = adapter_vars(t, &hv, &w)?;
            probe(t, &y, seed)
        });
    }
}

#[test]
fn bidirectional_mamba_gradient() {
    let mut rng = seeded(5);
    let cfg = MambaConfig::new(3, 2);
    let mut fwd = MambaMixer::init("bi.fwd", &cfg, DType::F64, &mut rng);
    let mut bwd = MambaMixer::init("bi.bwd", &cfg, DType::F64, &mut rng);
    condition(&mut fwd);
    condition(&mut bwd);
    let x = rand_t(&mut rng, &[4, 3]).scale(2.0).unwrap();
    let mut ps = params_of(&fwd);
    ps.extend(params_of(&bwd));
    assert_op("bidirectional", LAYER_TOL, 1e-4, ps, |t, ps| {
        let f = rebind(&fwd, ps).lift(t)?;
        let b = rebind(&bwd, ps).lift(t)?;
        let xv = t.constant(x.clone());
        let y = bidirectional_vars(t, &f, &b, &xv)?;
        probe(t, &y, 5)
    });
}

#[test]
fn conmamba_block_gradient() {
    let mut rng = seeded(6);
    let cfg = EncoderConfig {
        d_model: 4,
        d_state: 2,
        ffn_mult: 2,
        conv_kernel: 3,
        ..EncoderConfig::tiny()
    };
    let mut w = ConMambaBlockWeights::init("enc.layers.0", &cfg, DType::F64, &mut rng);
    condition(&mut w);
    let x = rand_t(&mut rng, &[5, 4]);
    assert_op("conmamba_block", LAYER_TOL, 1e-4, params_of(&w), |t, ps| {
        let b = rebind(&w, ps);
        let xv = t.constant(x.clone());
        let y = conmamba_block_vars(t, &b, &xv)?;
        probe(t, &y, 6)
    });
}

#[test]
fn frontend_and_encoder_gradient() {
    let mut rng = seeded(7);
    let cfg = EncoderConfig::tiny();
    let fe = Frontend::init("encoder.frontend", &cfg, DType::F64, &mut rng);
    let feats = rand_t(&mut rng, &[9, cfg.d_feat]);
    assert_op("cnn_frontend", LAYER_TOL, 1e-5, params_of(&fe), |t, ps| {
        let f = rebind(&fe, ps);
        let x = t.constant(feats.clone());
        let y = cnn_frontend_vars(t, &cfg, &f, &x)?;
        probe(t, &y, 7)
    });
    let mut enc = EncoderWeights::init(&cfg, DType::F64, &mut rng);
    condition(&mut enc);
    randomize_biases(&mut enc, &mut rng);
    assert_op("encoder", LAYER_TOL, 1e-5, params_of(&enc), |t, ps| {
        let e = rebind(&enc, ps);
        let x = t.constant(feats.clone());
        let y = encoder_vars(t, &cfg, &e, &x)?;
        probe(t, &y, 8)
    });
}

#[test]
fn tiny_lm_losses() {
    let mut rng = seeded(9);
    let mut lm = LmWeights::init(&LmConfig::tiny(), DType::F64, &mut rng).unwrap();
    condition(&mut lm);
    let ids: Vec<usize> = (0..7).map(|_| rng.random_range(0..VOCAB_SIZE)).collect();
    let targets = vec![ids[4], ids[5], ids[6], 3];
    assert_op("lm response loss", LAYER_TOL, 1e-4, params_of(&lm), |t, ps| {
        let w = rebind(&lm, ps);
        let v = w.lift(t)?;
        let logits = lm_logits_vars(t, &w, &v, &ids)?;
        response_loss_vars(t, &logits, &targets, 4)
    });
    assert_op("lm duplex loss", LAYER_TOL, 1e-4, params_of(&lm), |t, ps| {
        let w = rebind(&lm, ps);
        let v = w.lift(t)?;
        let logits = lm_logits_vars(t, &w, &v, &ids)?;
        Ok(duplex_loss_vars(t, &logits, 2, Vocab::new().state_id(StateToken::Response), &targets, 4)?.0)
    });
}


