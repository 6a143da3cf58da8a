use decoreg_core::autodiff::{grad_check, nn, Bindings, Expr, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

struct Probe {
    expr: Expr,
    values: Vec<(String, Tensor)>,
}

impl Probe {
    fn new() -> Self {
        Probe { expr: Expr::new(), values: vec![] }
    }

    fn leaf(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.expr.leaf(name, &value.shape().to_vec()).unwrap();
        self.values.push((name.to_string(), value));
        v
    }

    fn check(&self) -> f64 {
        self.check_with(EPS)
    }

    fn check_with(&self, eps: f64) -> f64 {
        let mut b = Bindings::new();
        for (n, t) in &self.values {
            b.bind(n.clone(), t);
        }
        let names: Vec<&str> = self.values.iter().map(|(n, _)| n.as_str()).collect();
        grad_check(&self.expr, &b, &names, eps).unwrap()
    }
}

#[test]
fn linear_function_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = Probe::new();
    let x = p.leaf("x", random(&mut rng, &[4, 3], -2.0, 2.0));
    let c = p.expr.constant(random(&mut rng, &[4, 3], -2.0, 2.0));
    let y = p.expr.mul(x, c).unwrap();
    let y = p.expr.scale(y, 3.0);
    p.expr.sum(y);
    // Central differences carry no truncation error here; a wide step keeps
    // round-off far below the bound.
    assert!(p.check_with(1e-2) < 1e-10);
}

#[test]
fn two_layer_mlp() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = Probe::new();
    let x = p.leaf("x", random(&mut rng, &[5, 3], -2.0, 2.0));
    for (name, shape) in [("l1.w", vec![3, 8]), ("l1.b", vec![8]), ("l2.w", vec![8, 1]), ("l2.b", vec![1])] {
        let t = random(&mut rng, &shape, -1.0, 1.0);
        p.values.push((name.into(), t));
    }
    let h = nn::linear(&mut p.expr, x, "l1", 3, 8).unwrap();
    let h = p.expr.relu(h);
    let o = nn::linear(&mut p.expr, h, "l2", 8, 1).unwrap();
    let o = p.expr.square(o);
    p.expr.mean(o);
    assert!(p.check() < TOL);
}

#[test]
fn softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = Probe::new();
    let logits = p.leaf("logits", random(&mut rng, &[6, 5], -2.0, 2.0));
    let lp = p.expr.log_softmax(logits);
    let picked = p.expr.pick(lp, vec![0, 4, 2, 2, 1, 3]).unwrap();
    let s = p.expr.mean(picked);
    p.expr.scale(s, -1.0);
    assert!(p.check() < TOL);
}

#[test]
fn attention_block_readout() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = Probe::new();
    let x = p.leaf("x", random(&mut rng, &[2, 4, 6], -2.0, 2.0));
    for w in ["wq", "wk", "wv", "wo"] {
        p.values.push((format!("att.{w}"), random(&mut rng, &[6, 6], -0.7, 0.7)));
    }
    let n = p.expr.layer_norm(x, 1e-5);
    let a = nn::causal_self_attention(&mut p.expr, n, "att", 2).unwrap();
    let r = p.expr.add(a, x).unwrap();
    let c = p.expr.constant(random(&mut rng, &[2, 4, 6], -1.0, 1.0));
    let r = p.expr.mul(r, c).unwrap();
    p.expr.sum(r);
    assert!(p.check() < TOL);
}

#[test]
fn mixture_density_nll() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = Probe::new();
    let (batch, m) = (4, 3);
    let pre_pi = p.leaf("pi", random(&mut rng, &[batch, m], -2.0, 2.0));
    let mu = p.leaf("mu", random(&mut rng, &[batch, m], -2.0, 2.0));
    let pre_sigma = p.leaf("sigma", random(&mut rng, &[batch, m], -2.0, 2.0));
    let targets = random(&mut rng, &[batch], -1.0, 1.0);
    let wide: Vec<f64> = targets.data().iter().flat_map(|&t| [t; 3]).collect();
    let yb = p.expr.constant(Tensor::new([batch, m], wide).unwrap());
    let e = &mut p.expr;
    let log_pi = e.log_softmax(pre_pi);
    let sigma = e.elu(pre_sigma);
    let sigma = e.add_scalar(sigma, 1.0);
    let z = e.sub(yb, mu).unwrap();
    let z = e.div(z, sigma).unwrap();
    let z2 = e.square(z);
    let z2 = e.scale(z2, -0.5);
    let ls = e.log(sigma);
    let t = e.sub(z2, ls).unwrap();
    let t = e.add(t, log_pi).unwrap();
    let t = e.add_scalar(t, -0.5 * (2.0 * std::f64::consts::PI).ln());
    let lse = e.logsumexp(t);
    let s = e.mean(lse);
    e.scale(s, -1.0);
    assert!(p.check() < TOL);
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    type Build = fn(&mut Expr, Var, Var) -> Var;
    let cases: Vec<(&str, Build, f64, f64)> = vec![
        ("add", |e, a, b| e.add(a, b).unwrap(), -2.0, 2.0),
        ("sub", |e, a, b| e.sub(a, b).unwrap(), -2.0, 2.0),
        ("mul", |e, a, b| e.mul(a, b).unwrap(), -2.0, 2.0),
        ("div", |e, a, b| e.div(a, b).unwrap(), 0.5, 2.0),
        ("relu", |e, a, _| e.relu(a), -2.0, 2.0),
        ("sigmoid", |e, a, _| e.sigmoid(a), -2.0, 2.0),
        ("elu", |e, a, _| e.elu(a), -2.0, 2.0),
        ("exp", |e, a, _| e.exp(a), -2.0, 2.0),
        ("log", |e, a, _| e.log(a), 0.1, 2.0),
        ("square", |e, a, _| e.square(a), -2.0, 2.0),
        ("softmax", |e, a, _| e.softmax(a), -2.0, 2.0),
        ("log_softmax", |e, a, _| e.log_softmax(a), -2.0, 2.0),
        ("logsumexp", |e, a, _| e.logsumexp(a), -2.0, 2.0),
        ("layer_norm", |e, a, _| e.layer_norm(a, 1e-5), -2.0, 2.0),
        ("matmul", |e, a, b| {
            let bt = e.permute(b, &[1, 0]).unwrap();
            e.matmul(a, bt).unwrap()
        }, -2.0, 2.0),
        ("concat", |e, a, b| e.concat(&[a, b], 1).unwrap(), -2.0, 2.0),
        ("slice", |e, a, _| e.slice(a, 1, 1, 3).unwrap(), -2.0, 2.0),
        ("reshape", |e, a, _| e.reshape(a, &[4, 3]).unwrap(), -2.0, 2.0),
        ("sum_last", |e, a, _| e.sum_last(a), -2.0, 2.0),
        ("scale", |e, a, _| e.scale(a, -1.5), -2.0, 2.0),
    ];
    for (name, build, lo, hi) in cases {
        for trial in 0..5 {
            let mut p = Probe::new();
            let a = p.leaf("a", random(&mut rng, &[3, 4], lo, hi));
            let b = p.leaf("b", random(&mut rng, &[3, 4], lo, hi));
            let out = build(&mut p.expr, a, b);
            let shape = p.expr.shape(out).to_vec();
            let w = p.expr.constant(random(&mut rng, &shape, -1.0, 1.0));
            let out = p.expr.mul(out, w).unwrap();
            let out = p.expr.sum(out);
            // `b` may be unused; bind it anyway by reading it into the root at zero weight.
            let zero = p.expr.scale(b, 0.0);
            let zero = p.expr.sum(zero);
            p.expr.add(out, zero).unwrap();
            let err = p.check();
            assert!(err < TOL, "{name} trial {trial}: {err}");
        }
    }
}

#[test]
fn embedding_and_batch_matmul_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = Probe::new();
    let table = p.leaf("table", random(&mut rng, &[5, 3], -2.0, 2.0));
    let rows = p.expr.embedding(table, vec![0, 4, 4, 1, 2, 0]).unwrap();
    let rows = p.expr.reshape(rows, &[2, 3, 3]).unwrap();
    let other = p.leaf("other", random(&mut rng, &[2, 3, 2], -2.0, 2.0));
    let prod = p.expr.batch_matmul(rows, other).unwrap();
    let prod = p.expr.permute(prod, &[2, 0, 1]).unwrap();
    let w = p.expr.constant(random(&mut rng, &[2, 2, 3], -1.0, 1.0));
    let prod = p.expr.mul(prod, w).unwrap();
    p.expr.sum(prod);
    assert!(p.check() < TOL);
}
