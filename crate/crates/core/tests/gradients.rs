use planforge_core::calib::LayerState;
use planforge_core::diffmath::gradcheck::check_gradients;
use planforge_core::diffmath::{Tape, Tensor2, Var};
use planforge_core::policy::{entropy_taped, forward_taped, log_prob_taped, PolicyConfig, PolicyParams, PolicyVars};
use planforge_core::toyvlm::{block_forward_taped, init_model, BlockVars, ToyVlmConfig};
use planforge_core::{Budget, Preference, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

/// Entries bounded away from zero so kinks stay out of reach of `h`.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let t = random(rng, rows, cols, 0.1, 2.0);
    let signs = (0..rows * cols).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 });
    let data = t.data().iter().zip(signs).map(|(x, s)| x * s).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

/// `Σ out ∘ R` for a fixed random `R`, so every output entry matters.
fn weighted_sum(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(random(&mut rng, r, c, -1.0, 1.0));
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

fn assert_grad<F>(name: &str, inputs: &[Tensor2], f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let r = check_gradients(inputs, H, FLOOR, |t, v| {
        let out = f(t, v)?;
        weighted_sum(t, out, 99)
    })
    .unwrap();
    assert!(r.passes(TOL), "{}: {:?}", name, r);
}

type Unary = fn(&mut Tape, Var) -> Var;

#[test]
fn elementwise_unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ops: [(&str, Unary, bool); 6] = [
        ("tanh", |t, a| t.tanh(a), false),
        ("softplus", |t, a| t.softplus(a), false),
        ("exp", |t, a| t.exp(a), false),
        ("ln", |t, a| t.ln(a), true),
        ("relu", |t, a| t.relu(a), false),
        ("transpose", |t, a| t.transpose(a), false),
    ];
    for (name, op, positive) in ops {
        for _ in 0..4 {
            let x = if positive {
                random(&mut rng, 3, 4, 0.2, 3.0)
            } else {
                away_from_zero(&mut rng, 3, 4)
            };
            assert_grad(name, &[x], |t, v| Ok(op(t, v[0])));
        }
    }
}

#[test]
fn special_function_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..4 {
        let x = random(&mut rng, 2, 3, 0.05, 8.0);
        assert_grad("lgamma", std::slice::from_ref(&x), |t, v| t.lgamma(v[0]));
        assert_grad("digamma", &[x], |t, v| t.digamma(v[0]));
    }
}

#[test]
fn binary_and_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..4 {
        let a = random(&mut rng, 3, 4, -2.0, 2.0);
        let b = random(&mut rng, 3, 4, -2.0, 2.0);
        let row = random(&mut rng, 1, 4, -2.0, 2.0);
        let s = random(&mut rng, 1, 1, -2.0, 2.0);
        let m = random(&mut rng, 4, 2, -2.0, 2.0);
        let n = random(&mut rng, 5, 4, -2.0, 2.0);
        assert_grad("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
        assert_grad("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
        assert_grad("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
        assert_grad("mul_self", std::slice::from_ref(&a), |t, v| t.mul(v[0], v[0]));
        assert_grad("add_row", &[a.clone(), row.clone()], |t, v| t.add_row(v[0], v[1]));
        assert_grad("mul_row", &[a.clone(), row.clone()], |t, v| t.mul_row(v[0], v[1]));
        assert_grad("add_scalar", &[a.clone(), s.clone()], |t, v| t.add_scalar(v[0], v[1]));
        assert_grad("mul_scalar", &[a.clone(), s.clone()], |t, v| t.mul_scalar(v[0], v[1]));
        assert_grad("matmul", &[a.clone(), m], |t, v| t.matmul(v[0], v[1]));
        assert_grad("matmul_t", &[a.clone(), n], |t, v| t.matmul_t(v[0], v[1]));
        assert_grad("scale", std::slice::from_ref(&a), |t, v| Ok(t.scale(v[0], -1.7)));
        assert_grad("offset", &[a], |t, v| Ok(t.offset(v[0], 0.3)));
    }
}

#[test]
fn reduction_and_structural_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..4 {
        let a = random(&mut rng, 3, 5, -2.0, 2.0);
        let b = random(&mut rng, 3, 2, -2.0, 2.0);
        assert_grad("sum", std::slice::from_ref(&a), |t, v| Ok(t.sum(v[0])));
        assert_grad("mean_rows", std::slice::from_ref(&a), |t, v| Ok(t.mean_rows(v[0])));
        assert_grad("rms_norm_rows", std::slice::from_ref(&a), |t, v| Ok(t.rms_norm_rows(v[0], 1e-6)));
        assert_grad("softmax_rows", std::slice::from_ref(&a), |t, v| Ok(t.softmax_rows(v[0])));
        assert_grad("slice_cols", std::slice::from_ref(&a), |t, v| t.slice_cols(v[0], 1, 3));
        assert_grad("concat_cols", &[a.clone(), b], |t, v| t.concat_cols(&[v[0], v[1]]));
        assert_grad("entry", std::slice::from_ref(&a), |t, v| t.entry(v[0], 2, 3));
        assert_grad("select_row", std::slice::from_ref(&a), |t, v| t.select_row(v[0], 1));
        let logits = random(&mut rng, 1, 6, -3.0, 3.0);
        assert_grad("log_mass", &[logits], |t, v| t.log_mass(v[0], &[1, 4]));
    }
}

#[test]
fn masked_softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random(&mut rng, 3, 3, -1.0, 1.0);
    let mut mask = Tensor2::zeros(3, 3);
    mask.set(0, 1, f64::NEG_INFINITY);
    mask.set(0, 2, f64::NEG_INFINITY);
    mask.set(1, 2, f64::NEG_INFINITY);
    assert_grad("causal_softmax", &[a], |t, v| {
        let m = t.constant(mask.clone());
        let s = t.add(v[0], m)?;
        Ok(t.softmax_rows(s))
    });
}

fn states(n: usize, rng: &mut ChaCha8Rng) -> Vec<LayerState> {
    let w = Preference::normalized([rng.random(), rng.random(), rng.random()]).unwrap().0;
    (0..n)
        .map(|l| LayerState {
            layer_index: l as f64 / n as f64,
            layer_type: [1.0],
            weight_stats: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            act_rms: rng.random_range(0.5..2.0),
            visual_sensitivity: rng.random_range(0.0..1.0),
            budget_context: (Budget::default().c_min, Budget::default().c_max),
            preference: w,
        })
        .collect()
}

/// Perturbs every policy weight so the zero-initialized heads are active.
fn active_policy(seed: u64, hidden: usize) -> PolicyParams {
    let mut p = PolicyParams::init(PolicyConfig { hidden, seed }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for t in p.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-0.5..0.5);
        }
    }
    p
}

#[test]
fn policy_log_prob_and_entropy_gradients() {
    for seed in 0..6 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 + seed as usize % 3;
        let st = states(n, &mut rng);
        let policy = active_policy(seed, 5);
        let s = rng.random_range(0.05..0.95);
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let p: Vec<f64> = raw.iter().map(|x| x / total).collect();
        let inputs: Vec<Tensor2> = policy.tensors().iter().map(|t| (*t).clone()).collect();
        let r = check_gradients(&inputs, H, FLOOR, |t, v| {
            let vars = PolicyVars { vars: v.to_vec() };
            let heads = forward_taped(t, &vars, &st)?;
            let lp = log_prob_taped(t, &heads, s, &p)?;
            let h = entropy_taped(t, &heads)?;
            let h = t.scale(h, 0.3);
            t.add(lp, h)
        })
        .unwrap();
        assert!(r.passes(TOL), "policy seed {}: {:?}", seed, r);
    }
}

#[test]
fn taped_block_gradient() {
    let cfg = ToyVlmConfig {
        d_model: 8,
        n_heads: 2,
        n_blocks: 1,
        d_ff: 6,
        vocab_size: 10,
        n_vision_tokens: 2,
        max_seq: 5,
        seed: 3,
    };
    let params = init_model(&cfg).unwrap();
    let block = params.blocks[0].clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = random(&mut rng, 5, 8, -1.0, 1.0);
    let keep = Tensor2::row_vector(&[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    let inputs = vec![x0, block.gate.clone(), block.up.clone(), block.down.clone()];
    let r = check_gradients(&inputs, H, FLOOR, |t, v| {
        let mut vars = BlockVars::record(t, &block, false);
        vars.gate = v[1];
        vars.up = v[2];
        vars.down = v[3];
        let k = t.constant(keep.clone());
        let out = block_forward_taped(t, &cfg, &vars, k, v[0])?;
        weighted_sum(t, out, 7)
    })
    .unwrap();
    assert!(r.passes(TOL), "{:?}", r);
}
