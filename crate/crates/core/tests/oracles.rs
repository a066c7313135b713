//! Forward passes checked against plain scalar-loop reimplementations that
//! read parameters by name.

use adc_core::actor::{Actor, ModelDims};
use adc_core::encdec_critic::EncDecCritic;
use adc_core::nn::{GruCell, LnLstmCell, ParamStore};
use adc_core::text::START;
use adc_core::value_critic::ValueCritic;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-12;
const EPS: f64 = 1e-5;

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a [f64] {
    &store.get(store.require(name).unwrap()).values
}

fn matvec(store: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = store.get(store.require(name).unwrap());
    (0..w.rows)
        .map(|r| (0..w.cols).map(|c| w.values[r * w.cols + c] * x[c]).sum())
        .collect()
}

fn affine(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let y = matvec(store, &format!("{prefix}.w"), x);
    y.iter().zip(p(store, &format!("{prefix}.b"))).map(|(a, b)| a + b).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

fn norm(store: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let g = p(store, &format!("{prefix}.gain"));
    let b = p(store, &format!("{prefix}.bias"));
    (0..x.len()).map(|i| g[i] * (x[i] - mu) / (var + EPS).sqrt() + b[i]).collect()
}

fn gru(store: &ParamStore, prefix: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let k = |leaf: &str| format!("{prefix}.{leaf}");
    let gate = |w: &str, u: &str, b: &str| {
        add(&add(&matvec(store, &k(w), x), &matvec(store, &k(u), h)), p(store, &k(b)))
    };
    let z: Vec<f64> = gate("w_z", "u_z", "b_z").into_iter().map(sig).collect();
    let r: Vec<f64> = gate("w_r", "u_r", "b_r").into_iter().map(sig).collect();
    let wx = matvec(store, &k("w_n"), x);
    let uh = matvec(store, &k("u_n"), h);
    let bn = p(store, &k("b_n"));
    (0..h.len())
        .map(|i| {
            let n = (wx[i] + r[i] * uh[i] + bn[i]).tanh();
            (1.0 - z[i]) * n + z[i] * h[i]
        })
        .collect()
}

fn ln_lstm(store: &ParamStore, prefix: &str, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = |leaf: &str| format!("{prefix}.{leaf}");
    let hs = h.len();
    let wx = norm(store, &k("ln_x"), &matvec(store, &k("w"), x));
    let uh = norm(store, &k("ln_h"), &matvec(store, &k("u"), h));
    let pre = add(&add(&wx, &uh), p(store, &k("b")));
    let mut c2 = vec![0.0; hs];
    for j in 0..hs {
        let (i, f, g) = (sig(pre[j]), sig(pre[hs + j]), pre[2 * hs + j].tanh());
        c2[j] = f * c[j] + i * g;
    }
    let cn = norm(store, &k("ln_c"), &c2);
    let h2 = (0..hs).map(|j| sig(pre[3 * hs + j]) * cn[j].tanh()).collect();
    (h2, c2)
}

fn scramble(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for m in store.iter_mut() {
        for v in m.values.iter_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
    }
}

fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < TOL, "index {i}: {x} vs {y}");
    }
}

const DIMS: ModelDims = ModelDims { feature_dim: 9, hidden: 6, vocab: 8 };

#[test]
fn gru_step_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let cell = GruCell::register(&mut store, "g", 4, 5, &mut rng).unwrap();
    scramble(&mut store, 2);
    let (x, h) = (random_vec(4, 3), random_vec(5, 4));
    close(&cell.step(&store, &x, &h).unwrap(), &gru(&store, "g", &x, &h));
}

#[test]
fn gru_with_saturated_update_gate_keeps_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let cell = GruCell::register(&mut store, "g", 3, 3, &mut rng).unwrap();
    store.get_mut(cell.b_z).values = vec![60.0; 3];
    let h = random_vec(3, 6);
    let out = cell.step(&store, &random_vec(3, 7), &h).unwrap();
    for (a, b) in out.iter().zip(&h) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ln_lstm_step_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::new();
    let cell = LnLstmCell::register(&mut store, "l", 4, 5, &mut rng).unwrap();
    scramble(&mut store, 9);
    let (x, h, c) = (random_vec(4, 10), random_vec(5, 11), random_vec(5, 12));
    let (h2, c2) = cell.step(&store, &x, &h, &c, 0.5, false, &mut rng).unwrap();
    let (eh, ec) = ln_lstm(&store, "l", &x, &h, &c);
    close(&h2, &eh);
    close(&c2, &ec);
}

#[test]
fn actor_init_and_steps_match_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut actor = Actor::new(DIMS, 0.2, &mut rng).unwrap();
    scramble(&mut actor.store, 14);
    let s = &actor.store;
    let x = random_vec(DIMS.feature_dim, 15);

    let f = relu(&norm(s, "proj_norm", &affine(s, "proj", &x)));
    let mut h_g = gru(s, "gru", &f, &vec![0.0; DIMS.hidden]);
    let (mut h_l, mut c_l) = (vec![0.0; DIMS.hidden], vec![0.0; DIMS.hidden]);

    let mut state = actor.init_state(&x).unwrap();
    close(&state.h_g, &h_g);
    assert_eq!(state.prev_token, START);
    for tok in [START, 4, 2, 7] {
        state.prev_token = tok;
        let (probs, next) = actor.step(&state).unwrap();
        let phi = &s.get(s.require("embed").unwrap()).row(tok).to_vec();
        h_g = gru(s, "gru", phi, &h_g);
        (h_l, c_l) = ln_lstm(s, "lstm", &h_g, &h_l, &c_l);
        let logits = affine(s, "out", &h_l);
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        let expect: Vec<f64> = logits.iter().map(|l| (l - m).exp() / z).collect();
        close(&probs, &expect);
        close(&next.h_l, &h_l);
        close(&next.c_l, &c_l);
        state = next;
    }
}

#[test]
fn value_critic_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut critic = ValueCritic::new(DIMS, &mut rng).unwrap();
    scramble(&mut critic.store, 17);
    let s = &critic.store;
    let x = random_vec(DIMS.feature_dim, 18);
    let tokens = [3, 5, 1, 2];
    let got = critic.values(&x, &tokens).unwrap();

    let mut h = affine(s, "proj", &x);
    let mut expect = vec![affine(s, "head", &h)[0].tanh()];
    for &tok in &tokens[..tokens.len() - 1] {
        let e = s.get(s.require("embed").unwrap()).row(tok).to_vec();
        h = gru(s, "gru", &e, &h);
        expect.push(affine(s, "head", &h)[0].tanh());
    }
    close(&got, &expect);
}

#[test]
fn reconstruction_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut critic = EncDecCritic::new(DIMS, &mut rng).unwrap();
    scramble(&mut critic.store, 20);
    let s = &critic.store;
    let x = random_vec(DIMS.feature_dim, 21);
    let sentence = [4, 6, 2];

    let f = relu(&norm(s, "proj_norm", &affine(s, "proj", &x)));
    close(&critic.feature_target(&x).unwrap(), &f);
    let mut h = f;
    for &tok in &sentence {
        let e = s.get(s.require("embed").unwrap()).row(tok).to_vec();
        h = gru(s, "enc", &e, &h);
    }
    let mut h_dec = relu(&affine(s, "psi2", &h));
    let mut input = relu(&affine(s, "psi1", &h));
    let mut sum = vec![0.0; DIMS.hidden];
    for _ in 0..sentence.len() {
        h_dec = gru(s, "dec", &input, &h_dec);
        input = affine(s, "dec_out", &h_dec);
        sum = add(&sum, &input);
    }
    let mean: Vec<f64> = sum.iter().map(|v| v / sentence.len() as f64).collect();
    close(&critic.reconstruct(&x, &sentence).unwrap(), &mean);
}
