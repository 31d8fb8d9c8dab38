use super::*;
use crate::graph::value_and_grad;
use crate::skeleton::{make_skeleton, Camera};

fn small_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        blocks: 2,
        heads: 2,
        time_dim: 8,
        initial_layers: 2,
        initial_channels: 8,
        prm_hidden: 4,
        ..ModelConfig::default()
    }
}

/// Parameters with every tensor random, including the zero-initialized ones.
fn dense_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut stream = RngStream::new(seed, 99);
    let map = cfg
        .parameter_shapes()
        .into_iter()
        .map(|(k, s)| {
            let fan = s[0] as f64;
            (k, stream.gaussian(&s).map(|v| v / fan.sqrt()))
        })
        .collect();
    ModelParams::from_map(map)
}

fn model(cfg: ModelConfig, params: ModelParams) -> RefineModel {
    RefineModel::new(cfg, params, InputNormalization::for_camera(&Camera::default()), &make_skeleton()).unwrap()
}

fn inputs(batch: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut s = RngStream::new(seed, 5);
    let ybar = s.gaussian(&[batch, 17, 3]).map(|v| 0.3 * v);
    let yt = s.gaussian(&[batch, 17, 3]);
    let x = s.gaussian(&[batch, 17, 2]).map(|v| 0.4 * v);
    (ybar, yt, x)
}

#[test]
fn default_config_is_desk_scale() {
    let p = ModelParams::init(&ModelConfig::default(), 1).unwrap();
    assert!(p.scalar_count() < 1_500_000, "{}", p.scalar_count());
    assert!(p.is_finite());
}

#[test]
fn fresh_model_returns_initial_pose() {
    let cfg = small_config();
    let m = model(cfg.clone(), ModelParams::init(&cfg, 3).unwrap());
    let (ybar, yt, x) = inputs(3, 1);
    let out = m.refine(&ybar, &yt, &x, &[1, 200, 1000]).unwrap();
    assert_eq!(out, ybar);
}

#[test]
fn refine_is_prm_after_sgct() {
    let cfg = small_config();
    let m = model(cfg.clone(), dense_params(&cfg, 4));
    let (ybar, yt, x) = inputs(2, 2);
    let t = [17, 640];
    let inter = m.sgct_forward(&ybar, &yt, &x, &t).unwrap();
    assert_eq!(inter.shape(), &[2, 17, 3]);
    let composed = m.prm_forward(&inter, &ybar).unwrap();
    assert!(m.refine(&ybar, &yt, &x, &t).unwrap().max_abs_diff(&composed) < 1e-12);
    assert_eq!(m.refine(&ybar, &yt, &x, &t).unwrap(), m.refine(&ybar, &yt, &x, &t).unwrap());
}

#[test]
fn wrong_input_shapes_are_rejected() {
    let cfg = small_config();
    let m = model(cfg.clone(), dense_params(&cfg, 4));
    let (ybar, yt, x) = inputs(2, 2);
    assert!(m.refine(&ybar, &yt, &x, &[1]).is_err());
    assert!(m.refine(&ybar, &yt, &ybar, &[1, 2]).is_err());
}

fn swap_rows(t: &Tensor, axis: usize, i: usize, j: usize) -> Tensor {
    let shape = t.shape().to_vec();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let mut d = t.data().to_vec();
    for o in 0..outer {
        for k in 0..inner {
            d.swap((o * dim + i) * inner + k, (o * dim + j) * inner + k);
        }
    }
    Tensor::new(shape, d).unwrap()
}

#[test]
fn sgct_is_joint_permutation_equivariant() {
    let cfg = small_config();
    let params = dense_params(&cfg, 8);
    let m = model(cfg.clone(), params.clone());
    let (ybar, yt, x) = inputs(2, 3);
    let t = [30, 200];
    let base = m.sgct_forward(&ybar, &yt, &x, &t).unwrap();

    let (i, j) = (3, 11);
    let mut p2 = params.clone();
    let pos = swap_rows(p2.get("sgct.pos").unwrap(), 0, i, j);
    p2.insert("sgct.pos", pos);
    // The pooled 2D projection reads joint k from rows 2k and 2k+1.
    let mut w = p2.get("sgct.cond2d.w").unwrap().clone();
    w = swap_rows(&w, 0, 2 * i, 2 * j);
    w = swap_rows(&w, 0, 2 * i + 1, 2 * j + 1);
    p2.insert("sgct.cond2d.w", w);
    for k in 0..cfg.blocks {
        let name = format!("sgct.block{k}.gcn.adj");
        let a = swap_rows(&swap_rows(p2.get(&name).unwrap(), 0, i, j), 1, i, j);
        p2.insert(name, a);
    }
    let adj = swap_rows(&swap_rows(m.adjacency(), 0, i, j), 1, i, j);
    let permuted = model(cfg, p2).with_adjacency(adj);
    let out = permuted
        .sgct_forward(&swap_rows(&ybar, 1, i, j), &swap_rows(&yt, 1, i, j), &swap_rows(&x, 1, i, j), &t)
        .unwrap();
    assert!(out.max_abs_diff(&swap_rows(&base, 1, i, j)) < 1e-10);
}

/// Mean of squared outputs of the SGCT (or the full network) and its gradient.
fn loss_and_grad(m: &RefineModel, full: bool, ybar: &Tensor, yt: &Tensor, x: &Tensor, ts: &[usize]) -> (f64, Gradients) {
    let tsin = sinusoidal_features(ts, m.config.time_dim);
    let mut g = Graph::new();
    let loss = {
        let mut c = m.ctx(&mut g, ybar.shape()[0]);
        let inp = RefineInputs::declare(c.g);
        let out = if full { build_refine(&mut c, &inp) } else { sgct::build(&mut c, &inp) };
        let sq = c.g.mul(out, out);
        c.g.mean(sq, None)
    };
    let mut b = Bindings::new();
    m.params.bind(&mut b);
    b.bind("y_bar", ybar).bind("y_t", yt).bind("x2d", x).bind("tsin", &tsin);
    let (e, grads) = value_and_grad(&g, loss, &b).unwrap();
    (e.value(loss).data()[0], grads)
}

use crate::graph::Gradients;

fn check_gradients(full: bool) {
    let cfg = ModelConfig { blocks: 1, ..small_config() };
    let base = dense_params(&cfg, 21);
    let (ybar, yt, x) = inputs(2, 9);
    let ts = [5, 730];
    let m = model(cfg.clone(), base.clone());
    let (_, grads) = loss_and_grad(&m, full, &ybar, &yt, &x, &ts);
    let prefixes: &[&str] = if full { &["sgct.", "prm."] } else { &["sgct."] };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (name, t) in base.iter().filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p))) {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        for idx in 0..t.numel() {
            let eval_at = |delta: f64| {
                let mut p = base.clone();
                p.get_mut(name).unwrap().data_mut()[idx] += delta;
                let m = model(cfg.clone(), p);
                loss_and_grad(&m, full, &ybar, &yt, &x, &ts).0
            };
            let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "{name}[{idx}]: analytic {a}, numeric {numeric}");
            checked += 1;
        }
    }
    assert!(checked > 500, "only {checked} entries checked");
    assert!(worst < 1e-4);
}

#[test]
fn sgct_gradients_match_finite_differences() {
    check_gradients(false);
}

#[test]
fn refine_gradients_match_finite_differences() {
    check_gradients(true);
}

#[test]
fn prm_gate_limits_and_envelope() {
    let cfg = small_config();
    let mut params = dense_params(&cfg, 12);
    let (ybar, inter, _) = inputs(2, 4);
    for (bias, expect) in [(60.0, &inter), (-60.0, &ybar)] {
        params.insert("prm.l2.b", Tensor::full(&[3], bias));
        let m = model(cfg.clone(), params.clone());
        let out = m.prm_forward(&inter, &ybar).unwrap();
        assert!(out.max_abs_diff(expect) < 1e-12, "bias {bias}");
    }
    let m = model(cfg.clone(), dense_params(&cfg, 13));
    let out = m.prm_forward(&inter, &ybar).unwrap();
    for ((o, a), b) in out.data().iter().zip(inter.data()).zip(ybar.data()) {
        assert!(*o >= a.min(*b) - 1e-12 && *o <= a.max(*b) + 1e-12);
    }
    let delta = m.prm_gate(&inter, &ybar).unwrap();
    assert!(delta.data().iter().all(|d| *d > 0.0 && *d < 1.0));
    assert_eq!(m.prm_forward(&ybar, &ybar).unwrap(), ybar);
}

#[test]
fn timestep_embeddings_are_pairwise_distinct() {
    let cfg = ModelConfig::default();
    let m = model(cfg.clone(), ModelParams::init(&cfg, 6).unwrap());
    let embs: Vec<Tensor> = (1..=1000).map(|t| m.embed_timestep(t).unwrap()).collect();
    assert!(embs.iter().all(|e| e.shape() == [cfg.time_dim]));
    let mut min = f64::INFINITY;
    for i in 0..embs.len() {
        for j in i + 1..embs.len() {
            min = min.min(embs[i].max_abs_diff(&embs[j]));
        }
    }
    assert!(min > 0.0, "closest pair differs by {min}");
    assert_eq!(m.embed_timestep(37).unwrap(), embs[36]);
}

#[test]
fn initial_prediction_is_rooted_and_deterministic() {
    let cfg = small_config();
    let m = model(cfg.clone(), dense_params(&cfg, 2));
    let (_, _, x) = inputs(3, 7);
    let a = m.initial_forward(&x).unwrap();
    assert_eq!(a, m.initial_forward(&x).unwrap());
    for b in 0..3 {
        assert_eq!(&a.data()[b * 51..b * 51 + 3], &[0.0, 0.0, 0.0]);
    }
}

#[test]
fn init_is_seeded() {
    let cfg = small_config();
    assert_eq!(ModelParams::init(&cfg, 5).unwrap(), ModelParams::init(&cfg, 5).unwrap());
    assert_ne!(ModelParams::init(&cfg, 5).unwrap(), ModelParams::init(&cfg, 6).unwrap());
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    use crate::model::checkpoint::{decode, encode, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint};
    use crate::train::OptimizerState;
    let cfg = small_config();
    let params = dense_params(&cfg, 30);
    let mut opt = OptimizerState::new(&params);
    opt.step = 7;
    opt.epochs_done = 2;
    let ck = Checkpoint {
        config: cfg.clone(),
        norm: InputNormalization::for_camera(&Camera::default()),
        params: params.clone(),
        optimizer: Some(opt),
    };
    let back = decode(&encode(&ck).unwrap()).unwrap();
    assert_eq!(back, ck);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.drpm");
    let plain = Checkpoint { optimizer: None, ..ck.clone() };
    save_checkpoint(&path, &plain).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), plain);

    let other = ModelConfig { num_joints: 16, ..cfg.clone() };
    match load_checkpoint_for(&path, &other) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains('`'), "{msg}"),
        r => panic!("expected checkpoint error, got {r:?}"),
    }

    let mut bytes = encode(&plain).unwrap();
    bytes[4] = 9;
    assert!(matches!(decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
}
