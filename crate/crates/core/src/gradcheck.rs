//! Central finite-difference checks of every analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::{self, Box3D, NormalizedResidual7, Residual7};
use crate::error::Result;
use crate::losses::{self, LossConfig, RegressionSample};
use crate::network::{HamConfig, Linear, Mlp, NetConfig, NetInput, RefineNet, RAW_FEATURES};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::pipeline::{self, Model, TrainConfig, Trainer};
use crate::scene::{generate_corpus, generate_proposals, rng_for};

pub const STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub worst_rel: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst_rel < self.tolerance
    }
}

/// `|a − b| / (max(|a|, |b|) + 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-6)
}

fn central(mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(STEP) - f(-STEP)) / (2.0 * STEP)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Worst error over at most `per_param` scalars of every parameter.
fn check_params(
    ps: &ParamStore,
    grads: &Gradients,
    per_param: usize,
    f: impl Fn(&ParamStore) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = ps.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let len = ps.value(id).len();
        for k in 0..len.min(per_param) {
            let j = if len <= per_param { k } else { (k * 7919 + 13) % len };
            let fd = central(|h| {
                let mut p = ps.clone();
                p.value_mut(id).data_mut()[j] += h;
                f(&p)
            });
            worst = worst.max(rel_err(fd, grads.get(id).data()[j]));
        }
    }
    worst
}

fn check_input(x: &[f64], dx: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..x.len() {
        let fd = central(|h| {
            let mut xp = x.to_vec();
            xp[j] += h;
            f(&xp)
        });
        worst = worst.max(rel_err(fd, dx[j]));
    }
    worst
}

fn small_net_config(enable_ham: bool, enable_tt: bool) -> NetConfig {
    NetConfig {
        ham: HamConfig {
            d: 8,
            heads: 2,
            tokens: 8,
            time_width: 6,
        },
        enable_ham,
        enable_tt,
    }
}

/// Network with every parameter drawn from `U(−0.6, 0.6)`, so that the
/// zero-initialised ones are exercised too.
fn randomized_net(cfg: NetConfig, seed: u64) -> Result<RefineNet> {
    let mut net = RefineNet::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let ids: Vec<ParamId> = net.params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        for v in net.params.value_mut(id).data_mut() {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
    Ok(net)
}

fn layer(name: &str, worst: f64) -> GradCheck {
    GradCheck {
        name: name.to_string(),
        worst_rel: worst,
        tolerance: LAYER_TOLERANCE,
    }
}

fn linear_check(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let lin = Linear::new(&mut ps, "lin", 5, 4, &mut rng)?;
    let x = rand_vec(&mut rng, 15);
    let w = rand_vec(&mut rng, 12);
    let f = |ps: &ParamStore, x: &[f64]| dot(&lin.forward(ps, x, 3).unwrap(), &w);
    let mut g = ps.zeros_like_grads();
    let dx = lin.backward(&ps, &mut g, &x, &w, 3);
    let worst = check_params(&ps, &g, usize::MAX, |p| f(p, &x)).max(check_input(&x, &dx, |xp| f(&ps, xp)));
    Ok(layer("linear", worst))
}

fn mlp_check(seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let mlp = Mlp::new(&mut ps, "mlp", 4, 6, 3, &mut rng)?;
    let x = rand_vec(&mut rng, 8);
    let w = rand_vec(&mut rng, 6);
    let f = |ps: &ParamStore, x: &[f64]| dot(&mlp.forward(ps, x, 2).unwrap().0, &w);
    let (_, cache) = mlp.forward(&ps, &x, 2)?;
    let mut g = ps.zeros_like_grads();
    let dx = mlp.backward(&ps, &mut g, &cache, &w);
    let worst = check_params(&ps, &g, usize::MAX, |p| f(p, &x)).max(check_input(&x, &dx, |xp| f(&ps, xp)));
    Ok(layer("mlp", worst))
}

fn embed_residual_check(seed: u64) -> Result<GradCheck> {
    let net = randomized_net(small_net_config(true, true), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let x = NormalizedResidual7(std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
    let w = rand_vec(&mut rng, net.d());
    let (_, cache) = net.embed_residual(&x)?;
    let mut g = net.params.zeros_like_grads();
    let dx = net.g.backward(&net.params, &mut g, &cache, &w);
    let f = |ps: &ParamStore, x: &[f64]| dot(&net.g.forward(ps, x, 1).unwrap().0, &w);
    let worst = check_params(&net.params, &g, 16, |p| f(p, x.as_array()))
        .max(check_input(x.as_array(), &dx, |xp| f(&net.params, xp)));
    Ok(layer("residual embedding g", worst))
}

fn attention_check(seed: u64) -> Result<GradCheck> {
    let net = randomized_net(small_net_config(true, true), seed)?;
    let (n, d) = (net.tokens(), net.d());
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let x = rand_vec(&mut rng, n * d);
    let qb = rand_vec(&mut rng, d);
    let w = rand_vec(&mut rng, n * d);
    let f = |ps: &ParamStore, x: &[f64], qb: &[f64]| {
        dot(&net.attn.forward(ps, x, n, qb).unwrap().0, &w)
    };
    let (_, cache) = net.attn.forward(&net.params, &x, n, &qb)?;
    let mut g = net.params.zeros_like_grads();
    let (dx, dqb) = net.attn.backward(&net.params, &mut g, &cache, &w);
    let worst = check_params(&net.params, &g, 16, |p| f(p, &x, &qb))
        .max(check_input(&x, &dx, |xp| f(&net.params, xp, &qb)))
        .max(check_input(&qb, &dqb, |qp| f(&net.params, &x, qp)));
    Ok(layer("self-attention", worst))
}

fn temporal_check(seed: u64) -> Result<GradCheck> {
    let net = randomized_net(small_net_config(true, true), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let a = rand_vec(&mut rng, net.d());
    let w = rand_vec(&mut rng, net.d());
    let t = 321;
    let f = |ps: &ParamStore, a: &[f64]| dot(&net.tt.forward(ps, a, t).unwrap().0, &w);
    let (_, cache) = net.tt.forward(&net.params, &a, t)?;
    let mut g = net.params.zeros_like_grads();
    let da = net.tt.backward(&net.params, &mut g, &cache, &w);
    let worst = check_params(&net.params, &g, 16, |p| f(p, &a))
        .max(check_input(&a, &da, |ap| f(&net.params, ap)));
    Ok(layer("temporal transformation", worst))
}

fn network_check(enable_ham: bool, enable_tt: bool, seed: u64) -> Result<GradCheck> {
    let cfg = small_net_config(enable_ham, enable_tt);
    let net = randomized_net(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let n = cfg.ham.tokens * RAW_FEATURES;
    let raw_p = rand_vec(&mut rng, n);
    let raw_h = rand_vec(&mut rng, n);
    let x_t = NormalizedResidual7(std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
    let wx: [f64; 7] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let wl = 0.7;
    let input = NetInput {
        raw_proposal: &raw_p,
        raw_hypothesis: &raw_h,
        x_t,
        t: 640,
        yaw: 0.9,
    };
    let objective = |net: &RefineNet| {
        let out = net.forward(&input).unwrap().0;
        dot(out.x0_hat.as_array(), &wx) + wl * out.logit
    };
    let (_, cache) = net.forward(&input)?;
    let mut g = net.params.zeros_like_grads();
    net.backward(&cache, &wx, wl, &mut g);
    let worst = check_params(&net.params, &g, 8, |p| {
        let mut m = net.clone();
        m.params = p.clone();
        objective(&m)
    });
    let name = match (enable_ham, enable_tt) {
        (true, true) => "network (attention + temporal)",
        (true, false) => "network (attention, no temporal)",
        _ => "network (detection head only)",
    };
    Ok(layer(name, worst))
}

/// Every layer, plus the full network in its three configurations.
pub fn layer_suite(seed: u64) -> Result<Vec<GradCheck>> {
    Ok(vec![
        linear_check(seed)?,
        mlp_check(seed + 1)?,
        embed_residual_check(seed + 2)?,
        attention_check(seed + 3)?,
        temporal_check(seed + 4)?,
        network_check(true, true, seed + 5)?,
        network_check(true, false, seed + 6)?,
        network_check(false, false, seed + 7)?,
    ])
}

fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D::new(
        rng.gen_range(-5.0..5.0),
        rng.gen_range(-5.0..5.0),
        rng.gen_range(0.0..2.0),
        rng.gen_range(1.5..4.5),
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.8..2.0),
        rng.gen_range(-3.0..3.0),
    )
    .expect("valid ranges")
}

/// Smooth-L1, regression (residual + corner), classification and focal
/// losses against their analytic gradients.
pub fn loss_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::default();
    let mut out = Vec::new();

    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (p, t) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        let fd = central(|h| losses::smooth_l1(p + h, t, cfg.smooth_l1_beta));
        worst = worst.max(rel_err(fd, losses::smooth_l1_grad(p, t, cfg.smooth_l1_beta)));
    }
    out.push(layer("smooth-L1", worst));

    let mut samples = Vec::new();
    for _ in 0..6 {
        let proposal = random_box(&mut rng);
        let target_box = boxes::decode(
            &proposal,
            &Residual7(std::array::from_fn(|_| rng.gen_range(-0.2..0.2))),
        )?;
        let target = boxes::normalize(&boxes::encode(&proposal, &target_box)?, &proposal);
        let pred = NormalizedResidual7(std::array::from_fn(|k| target[k] + rng.gen_range(-0.05..0.05)));
        samples.push(RegressionSample {
            pred,
            target,
            proposal,
            target_box,
            iou: rng.gen_range(0.56..1.0),
        });
    }
    let reg = losses::regression_loss(&samples, &cfg)?;
    let mut worst: f64 = 0.0;
    for i in 0..samples.len() {
        for k in 0..7 {
            let fd = central(|h| {
                let mut s = samples.clone();
                s[i].pred[k] += h;
                losses::regression_loss(&s, &cfg).unwrap().value
            });
            worst = worst.max(rel_err(fd, reg.grad[i][k]));
        }
    }
    out.push(layer("regression (residual + corner)", worst));

    let logits = rand_vec(&mut rng, 12).into_iter().map(|v| 3.0 * v).collect::<Vec<_>>();
    let ious: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
    let (_, grad) = losses::classification_loss_logits(&logits, &ious, &cfg)?;
    let worst = check_input(&logits, &grad, |z| {
        losses::classification_loss_logits(z, &ious, &cfg).unwrap().0
    });
    out.push(layer("classification (soft-target BCE)", worst));

    let scores: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.95)).collect();
    let labels: Vec<bool> = (0..12).map(|_| rng.gen_bool(0.5)).collect();
    let (_, grad) = losses::focal_loss(&scores, &labels, &cfg)?;
    let worst = check_input(&scores, &grad, |s| losses::focal_loss(s, &labels, &cfg).unwrap().0);
    out.push(layer("focal", worst));
    Ok(out)
}

/// Total training loss of a sampled batch against probe parameters of every
/// layer, on a model that has taken a few optimizer steps.
pub fn end_to_end(seed: u64) -> Result<GradCheck> {
    let cfg = TrainConfig {
        ham: HamConfig {
            d: 8,
            heads: 2,
            tokens: 27,
            time_width: 8,
        },
        batch_scenes: 2,
        epochs: 1,
        seed,
        ..TrainConfig::default()
    };
    let scenes = generate_corpus(seed, 0..3, &cfg.scene)?;
    let mut trainer = Trainer::new(&cfg)?;
    trainer.run_epoch(&scenes[1..], 0, |_| {})?;
    let model: Model = trainer.model;
    let batch = generate_proposals(&scenes[0], seed, &cfg.proposals, &cfg.scene)?;
    let samples = pipeline::prepare_samples(&model, &scenes[0], &batch, &mut rng_for(seed, 1))?;
    let (_, grads) = pipeline::batch_loss_and_grads(&model.net, &samples, &cfg.loss)?;
    let mut worst: f64 = 0.0;
    for name in [
        "head.reg.fc2.weight",
        "head.cls.fc1.bias",
        "ham.attn.q.weight",
        "ham.attn.v.bias",
        "ham.g.fc1.weight",
        "ham.s.fc1.weight",
        "proposal.fc.weight",
        "roi.embed.weight",
        "roi.pos",
    ] {
        let id = model.net.params.id(name)?;
        let len = model.net.params.value(id).len();
        for j in [0, len / 3, len - 1] {
            let fd = central(|h| {
                let mut m = model.net.clone();
                m.params.value_mut(id).data_mut()[j] += h;
                pipeline::batch_loss_and_grads(&m, &samples, &cfg.loss)
                    .unwrap()
                    .0
                    .total()
            });
            worst = worst.max(rel_err(fd, grads.get(id).data()[j]));
        }
    }
    Ok(GradCheck {
        name: "end-to-end training loss".into(),
        worst_rel: worst,
        tolerance: END_TO_END_TOLERANCE,
    })
}

pub fn full_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut all = layer_suite(seed)?;
    all.extend(loss_suite(seed + 100)?);
    all.push(end_to_end(seed + 200)?);
    Ok(all)
}
