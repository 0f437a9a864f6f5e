//! Property suites run by `slpkit verify`.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slpkit::autodiff::Tensor;
use slpkit::linalg::RMatrix;
use slpkit::nnls::{self, NnlsOptions};
use slpkit::robust::{RslpnA, RslpnAConfig};
use slpkit::slpn::{Slpn, SlpnConfig};
use slpkit::te::{Ctx, Mode};

/// Outcome of one property check.
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn rand_t(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    ArrayD::from_shape_fn(IxDyn(shape), |_| r.random::<f64>() * 2.0 - 1.0)
}

fn permute(t: &Tensor, axis: usize, perm: &[usize]) -> Tensor {
    t.select(Axis(axis), perm)
}

fn shuffled(r: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(p.as_mut_slice(), r);
    p
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// User and symbol permutations through a fresh SLPN; user, antenna and
/// symbol permutations through a fresh RSLPN-A.
pub fn equivariance(trials: usize, seed: u64) -> Vec<Check> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let slpn = Slpn::new(SlpnConfig::default(), &mut r);
    let net_a = RslpnA::new(RslpnAConfig { width: 8, ..Default::default() }, &mut r).expect("valid config");
    let (mut user, mut sym, mut a_user, mut a_ant, mut a_sym) = (0f64, 0f64, 0f64, 0f64, 0f64);
    for _ in 0..trials {
        let (k, l) = (4, 5);
        let b = rand_t(&mut r, &[2, k, l, 4]);
        let c = rand_t(&mut r, &[2, k, k, l, 8]);
        let d = slpn.predict(&b, &c).expect("forward");
        let pk = shuffled(&mut r, k);
        let dk = slpn.predict(&permute(&b, 1, &pk), &permute(&permute(&c, 1, &pk), 2, &pk)).expect("forward");
        user = user.max(max_diff(&dk, &permute(&d, 1, &pk)));
        let pl = shuffled(&mut r, l);
        let dl = slpn.predict(&permute(&b, 2, &pl), &permute(&c, 3, &pl)).expect("forward");
        sym = sym.max(max_diff(&dl, &permute(&d, 2, &pl)));

        let x = rand_t(&mut r, &[1, 3, 4, 5, 8]);
        let y = net_a.predict(&x).expect("forward");
        let p = shuffled(&mut r, 3);
        a_user = a_user.max(max_diff(&net_a.predict(&permute(&x, 1, &p)).expect("forward"), &permute(&y, 1, &p)));
        let p = shuffled(&mut r, 4);
        a_ant = a_ant.max(max_diff(&net_a.predict(&permute(&x, 2, &p)).expect("forward"), &y));
        let p = shuffled(&mut r, 5);
        a_sym = a_sym.max(max_diff(&net_a.predict(&permute(&x, 3, &p)).expect("forward"), &permute(&y, 2, &p)));
    }
    [("slpn user permutation", user), ("slpn symbol permutation", sym), ("rslpn-a user permutation", a_user), ("rslpn-a antenna invariance", a_ant), ("rslpn-a symbol permutation", a_sym)]
        .into_iter()
        .map(|(name, dev)| Check { name: name.into(), passed: dev <= 1e-10, detail: format!("max deviation {dev:.3e}") })
        .collect()
}

/// Random NNLS instances must converge and satisfy the KKT conditions.
pub fn kkt(instances: usize, seed: u64) -> Vec<Check> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0f64;
    let mut failures = 0;
    for _ in 0..instances {
        let n = r.random_range(1..=8);
        let m = r.random_range(n..=n + 4);
        let a = RMatrix::from_fn(m, n, |_, _| r.random::<f64>() * 2.0 - 1.0);
        let b: Vec<f64> = (0..m).map(|_| r.random::<f64>() * 2.0 - 1.0).collect();
        match nnls::solve(&a, &b, NnlsOptions::default()) {
            Ok(sol) if sol.converged && sol.delta.iter().all(|&d| d >= 0.0) => {
                let scale = a.tr_mul_vec(&b).iter().fold(1.0f64, |s, v| s.max(v.abs()));
                let (st, sl) = nnls::kkt_residuals(&a, &b, &sol.delta);
                let rel = st.max(sl) / scale;
                worst = worst.max(rel);
                if rel > 1e-8 {
                    failures += 1;
                }
            }
            _ => failures += 1,
        }
    }
    vec![Check {
        name: "nnls kkt certification".into(),
        passed: failures == 0,
        detail: format!("{failures} failures, worst scaled residual {worst:.3e}"),
    }]
}

/// Finite-difference check of the SLPN input and parameter gradients in
/// eval mode.
pub fn gradients(points: usize, seed: u64) -> Vec<Check> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Slpn::new(SlpnConfig { blocks: 1, width: 3 }, &mut r);
    let b = rand_t(&mut r, &[1, 2, 3, 4]);
    let c = rand_t(&mut r, &[1, 2, 2, 3, 8]);
    let w = rand_t(&mut r, &[1, 2, 3, 2]);
    let loss = |m: &Slpn, b: &Tensor| -> f64 { m.predict(b, &c).expect("forward").iter().zip(w.iter()).map(|(p, q)| p * q).sum() };
    let analytic = |m: &Slpn| -> (Vec<Option<Tensor>>, Tensor) {
        let mut cx = Ctx::new(&m.store, Mode::Eval);
        let bv = cx.input(b.clone());
        let cv = cx.input(c.clone());
        let out = m.forward(&mut cx, bv, cv).expect("forward");
        let wv = cx.input(w.clone());
        let prod = cx.g.mul(out, wv).expect("shapes");
        let total = cx.g.sum(prod, &[0, 1, 2, 3]).expect("axes");
        let g = cx.g.backward(total).expect("tape");
        let db = g.get(bv).cloned().unwrap_or_else(|| Tensor::zeros(b.raw_dim()));
        (cx.backward(total).expect("tape"), db)
    };
    let (pgrads, db) = analytic(&model);
    let h = 1e-6;
    let rel = |num: f64, ana: f64| (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
    let mut worst = 0f64;
    for _ in 0..points {
        let i = r.random_range(0..b.len());
        let mut bp = b.clone();
        let mut bm = b.clone();
        bp.as_slice_mut().unwrap()[i] += h;
        bm.as_slice_mut().unwrap()[i] -= h;
        let num = (loss(&model, &bp) - loss(&model, &bm)) / (2.0 * h);
        worst = worst.max(rel(num, db.as_slice().unwrap()[i]));
    }
    let trainable: Vec<usize> = (0..model.store.len()).filter(|&id| model.store.is_trainable(id)).collect();
    for _ in 0..points {
        let id = trainable[r.random_range(0..trainable.len())];
        let j = r.random_range(0..model.store.value(id).len());
        let ana = pgrads[id].as_ref().map_or(0.0, |g| g.iter().nth(j).copied().unwrap_or(0.0));
        let orig = *model.store.value(id).iter().nth(j).unwrap();
        *model.store.value_mut(id).iter_mut().nth(j).unwrap() = orig + h;
        let up = loss(&model, &b);
        *model.store.value_mut(id).iter_mut().nth(j).unwrap() = orig - h;
        let down = loss(&model, &b);
        *model.store.value_mut(id).iter_mut().nth(j).unwrap() = orig;
        worst = worst.max(rel((up - down) / (2.0 * h), ana));
    }
    vec![Check { name: "slpn gradients".into(), passed: worst <= 1e-4, detail: format!("worst relative error {worst:.3e}") }]
}

pub fn run(suite: &str, seed: u64) -> Result<Vec<Check>, String> {
    Ok(match suite {
        "equivariance" => equivariance(10, seed),
        "kkt" => kkt(200, seed),
        "gradients" => gradients(10, seed),
        "all" => {
            let mut v = equivariance(10, seed);
            v.extend(kkt(200, seed));
            v.extend(gradients(10, seed));
            v
        }
        other => return Err(format!("unknown suite '{other}' (equivariance, kkt, gradients, all)")),
    })
}
