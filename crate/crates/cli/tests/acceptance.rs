//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! The learning criteria train on 2000 scenes, so this target takes a few
//! minutes on one core.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use refine3d::commands::{
    eval_cmd, export_tt, gen_data, load_model, sweep, train_cmd, EvalArgs, EvalRun, ExportTtArgs,
    GenDataArgs, SweepArgs, SweepAxis, TrainArgs,
};
use refine3d::manifest::sha256_file;
use refine3d_core::boxes::{self, iou_3d, wrap_angle, Box3D, NormalizedResidual7};
use refine3d_core::diffusion::{ddim_step, q_sample, DiffusionConfig, NoiseSchedule};
use refine3d_core::gradcheck;
use refine3d_core::pipeline::{export_tt_norms, Ensemble};
use refine3d_core::scene::rng_for;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = Result<Outcome, String>;

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_box(rng: &mut impl Rng) -> Box3D {
    Box3D::new(
        rng.gen_range(-20.0..20.0),
        rng.gen_range(-20.0..20.0),
        rng.gen_range(-2.0..2.0),
        rng.gen_range(0.3..5.0),
        rng.gen_range(0.3..5.0),
        rng.gen_range(0.3..3.0),
        rng.gen_range(-PI..PI),
    )
    .unwrap()
}

fn near_box(b: &Box3D, rng: &mut impl Rng) -> Box3D {
    Box3D::new(
        b.x + rng.gen_range(-0.6..0.6) * b.w,
        b.y + rng.gen_range(-0.6..0.6) * b.h,
        b.z + rng.gen_range(-0.4..0.4) * b.l,
        b.w * rng.gen_range(0.6..1.5),
        b.h * rng.gen_range(0.6..1.5),
        b.l * rng.gen_range(0.6..1.5),
        b.theta + rng.gen_range(-1.0..1.0),
    )
    .unwrap()
}

/// Intersection estimated by uniform sampling inside `a`.
fn mc_iou(a: &Box3D, b: &Box3D, n: usize, rng: &mut impl Rng) -> f64 {
    let mut hit = 0usize;
    for _ in 0..n {
        let q = [
            rng.gen_range(-0.5..0.5) * a.w,
            rng.gen_range(-0.5..0.5) * a.h,
            rng.gen_range(-0.5..0.5) * a.l,
        ];
        hit += b.contains(a.to_world(q)) as usize;
    }
    let inter = hit as f64 / n as f64 * a.volume();
    inter / (a.volume() + b.volume() - inter)
}

fn algebra() -> Check {
    let mut rng = rng_for(2024, 1);
    let mut worst_rt = 0.0f64;
    let mut worst_norm = 0.0f64;
    for _ in 0..10_000 {
        let p = random_box(&mut rng);
        let t = if rng.gen_bool(0.5) {
            near_box(&p, &mut rng)
        } else {
            random_box(&mut rng)
        };
        let r = boxes::encode(&p, &t).map_err(e2s)?;
        let back = boxes::decode(&p, &r).map_err(e2s)?;
        let (a, b) = (back.to_array(), t.to_array());
        for i in 0..6 {
            worst_rt = worst_rt.max((a[i] - b[i]).abs());
        }
        worst_rt = worst_rt.max(wrap_angle(a[6] - b[6]).abs());
        let n = boxes::normalize(&r, &p);
        let rr = boxes::denormalize(&n, &p);
        for i in 0..7 {
            worst_norm = worst_norm.max((rr.0[i] - r.0[i]).abs());
        }
    }
    let mut worst_iou = 0.0f64;
    for k in 0..100 {
        let a = random_box(&mut rng);
        let b = if k % 10 == 9 {
            random_box(&mut rng)
        } else {
            near_box(&a, &mut rng)
        };
        worst_iou = worst_iou.max((iou_3d(&a, &b) - mc_iou(&a, &b, 200_000, &mut rng)).abs());
    }
    Ok(outcome(
        worst_rt < 1e-9 && worst_norm < 1e-9 && worst_iou < 0.01,
        format!(
            "round trip {worst_rt:.2e}, normalize {worst_norm:.2e}, iou vs sampling {worst_iou:.4}"
        ),
    ))
}

fn schedule() -> Check {
    let s = NoiseSchedule::cosine(1000, 0.008).map_err(e2s)?;
    let monotone = (1..=1000).all(|t| s.alpha_bar[t] < s.alpha_bar[t - 1]);
    let last = s.alpha_bar[1000];
    let cfg = DiffusionConfig {
        clamp_bound: 1e9,
        ..Default::default()
    };
    let x0 = NormalizedResidual7([0.3, -0.2, 0.15, 0.05, -0.4, 0.25, 0.1]);
    let mut worst = 0.0f64;
    for t in 1..=1000 {
        let x_t = q_sample(&x0, t, &[0.0; 7], &s, &cfg).map_err(e2s)?;
        for t_prev in 0..t {
            let next = ddim_step(&x_t, &x0, t, t_prev, &[0.0; 7], &s).map_err(e2s)?.next;
            let want = if t_prev == 0 {
                x0
            } else {
                q_sample(&x0, t_prev, &[0.0; 7], &s, &cfg).map_err(e2s)?
            };
            for i in 0..7 {
                worst = worst.max((next.0[i] - want.0[i]).abs());
            }
        }
    }
    let mut ab = s.alpha_bar.clone();
    ab[400] = 1.0;
    let forced = NoiseSchedule::from_alpha_bar(ab);
    let x_t = NormalizedResidual7([1.1, -0.7, 0.2, 2.0, -1.3, 0.4, 0.9]);
    let exact = ddim_step(&x_t, &x0, 900, 400, &[0.7; 7], &forced).map_err(e2s)?.next == x0;
    Ok(outcome(
        monotone && last < 0.01 && worst < 1e-9 && exact,
        format!(
            "monotone {monotone}, alpha_bar(T) {last:.2e}, noiseless path {worst:.2e}, forced step exact {exact}"
        ),
    ))
}

fn gradients() -> Check {
    let checks = gradcheck::full_suite(3).map_err(e2s)?;
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.clone()).collect();
    let worst = checks
        .iter()
        .map(|c| format!("{} {:.1e}", c.name, c.worst_rel))
        .collect::<Vec<_>>()
        .join(", ");
    Ok(outcome(
        failed.is_empty(),
        if failed.is_empty() {
            format!("{} checks: {worst}", checks.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    ))
}

struct Workspace {
    dir: PathBuf,
    train: PathBuf,
    eval: PathBuf,
    ckpt: PathBuf,
}

impl Workspace {
    fn eval(&self, steps: u64, ensemble: Ensemble, name: &str) -> Result<EvalRun, String> {
        let (_, run) = eval_cmd(
            &EvalArgs {
                ckpt: self.ckpt.clone(),
                data: Some(self.eval.clone()),
                steps: Some(steps),
                ensemble: Some(ensemble),
                seed: None,
                config: None,
                out: Some(self.dir.join(name)),
                trace: None,
                jobs: 1,
            },
            &self.dir,
        )
        .map_err(e2s)?;
        Ok(run)
    }
}

fn gen(dir: &Path, name: &str, seed: u64, scenes: u64, first_id: u64) -> Result<PathBuf, String> {
    let out = dir.join(name);
    gen_data(
        &GenDataArgs {
            seed,
            scenes,
            first_id,
            out: Some(out.clone()),
            config: None,
        },
        dir,
    )
    .map_err(e2s)?;
    Ok(out)
}

fn train_to(dir: &Path, config: Option<PathBuf>, data: &Path, ckpt: &Path) -> Result<(), String> {
    train_cmd(
        &TrainArgs {
            config,
            data: Some(data.to_path_buf()),
            out_ckpt: ckpt.to_path_buf(),
            log: None,
        },
        dir,
    )
    .map_err(e2s)?;
    Ok(())
}

fn learning(ws: &Workspace) -> Check {
    let start = Instant::now();
    train_to(&ws.dir, None, &ws.train, &ws.ckpt)?;
    let trained = start.elapsed().as_secs_f64();
    let run = ws.eval(1, Ensemble::Mean, "steps1.csv")?;
    let r = run.final_report();
    let gain = r.mean_iou_predictions - r.mean_iou_proposals;
    let secs = start.elapsed().as_secs_f64();
    Ok(outcome(
        gain >= 0.05 && secs < 600.0,
        format!(
            "proposal IoU {:.4}, prediction IoU {:.4}, gain {gain:+.4} over {} pairs; train {trained:.0} s, total {secs:.0} s",
            r.mean_iou_proposals, r.mean_iou_predictions, r.num_matched_proposals
        ),
    ))
}

fn sampling_trend(ws: &Workspace) -> Check {
    let one = ws.eval(1, Ensemble::Mean, "mean1.csv")?;
    let three = ws.eval(3, Ensemble::Mean, "mean3.csv")?;
    let (a, b) = (
        one.final_report().mean_iou_predictions,
        three.final_report().mean_iou_predictions,
    );
    let per_step: Vec<String> = three
        .final_report()
        .per_step_mean_iou
        .iter()
        .map(|v| format!("{v:.4}"))
        .collect();
    let mut identical = true;
    let reference = ws.eval(1, Ensemble::None, "none1.csv")?;
    for e in [Ensemble::Mean, Ensemble::Nms] {
        let other = ws.eval(1, e, &format!("{e}1.csv"))?;
        for (x, y) in reference.predictions.iter().zip(&other.predictions) {
            identical &= x.boxes == y.boxes && x.confidences == y.confidences;
        }
        let (x, y) = (reference.final_report(), other.final_report());
        identical &= x.mean_iou_predictions == y.mean_iou_predictions
            && x.ap_r40 == y.ap_r40
            && x.recall_at == y.recall_at;
    }
    Ok(outcome(
        b >= a && identical,
        format!(
            "mean IoU steps=1 {a:.4}, steps=3 {b:.4} (per step {}); single-step modes identical {identical}",
            per_step.join(" -> ")
        ),
    ))
}

fn ablations(ws: &Workspace) -> Check {
    let small_train = gen(&ws.dir, "sweep_train.jsonl", 11, 200, 0)?;
    let small_eval = gen(&ws.dir, "sweep_eval.jsonl", 11, 40, 100_000)?;
    let cfg = ws.dir.join("sweep.toml");
    std::fs::write(&cfg, "[train]\nepochs = 1\n").map_err(e2s)?;
    let mut notes = Vec::new();
    let mut ok = true;
    for (axis, want, values) in [
        (SweepAxis::Snr, 3, vec!["1", "2", "4"]),
        (SweepAxis::Steps, 5, vec!["1", "2", "3", "4", "5"]),
        (SweepAxis::Tt, 2, vec!["off", "on"]),
        (SweepAxis::Ensemble, 3, vec!["none", "mean", "nms"]),
    ] {
        let out = ws.dir.join(format!("sweep_{}.csv", axis.name()));
        let (_, rows) = sweep(
            &SweepArgs {
                axis,
                values: None,
                config: Some(cfg.clone()),
                data: Some(small_train.clone()),
                eval_data: Some(small_eval.clone()),
                ckpt: Some(ws.ckpt.clone()),
                out: out.clone(),
                jobs: 2,
            },
            &ws.dir,
        )
        .map_err(e2s)?;
        let text = std::fs::read_to_string(&out).map_err(e2s)?;
        let header = text.lines().nth(1).unwrap_or_default();
        let got: Vec<&str> = rows.iter().map(|r| r.value.as_str()).collect();
        let shaped = rows.len() == want
            && got == values
            && text.lines().count() == want + 2
            && header.contains("latency_ms_per_scene")
            && header.contains("mean_iou_predictions");
        ok &= shaped;
        let mut note = format!("{} {} rows", axis.name(), rows.len());
        if axis == SweepAxis::Steps {
            let lat: Vec<f64> = rows.iter().map(|r| r.report.latency_ms_per_scene).collect();
            let rising = lat.windows(2).all(|w| w[1] > w[0]);
            ok &= rising;
            note += &format!(
                " latency {} ms",
                lat.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>().join("<")
            );
            if !rising {
                note += " NOT increasing";
            }
        }
        if !shaped {
            note += " (shape mismatch)";
        }
        notes.push(note);
    }
    Ok(outcome(ok, notes.join("; ")))
}

fn tt_curve(ws: &Workspace) -> Check {
    let export = |name: &str| {
        export_tt(&ExportTtArgs {
            ckpt: ws.ckpt.clone(),
            out: ws.dir.join(name),
            timesteps: None,
        })
        .map_err(e2s)
    };
    let (_, norms) = export("tt_a.csv")?;
    export("tt_b.csv")?;
    let same = sha256_file(&ws.dir.join("tt_a.csv")).map_err(e2s)?
        == sha256_file(&ws.dir.join("tt_b.csv")).map_err(e2s)?;
    let model = load_model(&ws.ckpt).map_err(e2s)?;
    let t_max = model.schedule.timesteps;
    let ts: Vec<usize> = (1..=t_max).collect();
    let direct = export_tt_norms(&model, &ts).map_err(e2s)?;
    let finite = norms.iter().all(|(_, n)| n.is_finite());
    let falling = norms.windows(2).filter(|w| w[1].1 < w[0].1).count();
    Ok(outcome(
        same && finite && norms.len() == t_max && direct == norms,
        format!(
            "{} rows, finite {finite}, reproducible {same}; |W| at t=1 {:.4}, at t={t_max} {:.4}, decreasing on {falling}/{} steps (reported only)",
            norms.len(),
            norms[0].1,
            norms[t_max - 1].1,
            t_max - 1
        ),
    ))
}

fn determinism(ws: &Workspace) -> Check {
    let data = gen(&ws.dir, "det_train.jsonl", 21, 120, 0)?;
    let eval = gen(&ws.dir, "det_eval.jsonl", 21, 30, 100_000)?;
    let cfg = ws.dir.join("det.toml");
    std::fs::write(&cfg, "[train]\nepochs = 2\nseed = 5\n[infer]\nseed = 9\n").map_err(e2s)?;
    let mut hashes = Vec::new();
    for (k, jobs) in [(0, 1), (1, 4)] {
        let ckpt = ws.dir.join(format!("det{k}.ckpt"));
        train_to(&ws.dir, Some(cfg.clone()), &data, &ckpt)?;
        let out = ws.dir.join(format!("det{k}.csv"));
        eval_cmd(
            &EvalArgs {
                ckpt: ckpt.clone(),
                data: Some(eval.clone()),
                steps: None,
                ensemble: None,
                seed: None,
                config: Some(cfg.clone()),
                out: Some(out.clone()),
                trace: None,
                jobs,
            },
            &ws.dir,
        )
        .map_err(e2s)?;
        hashes.push((sha256_file(&ckpt).map_err(e2s)?, sha256_file(&out).map_err(e2s)?));
    }
    let same = hashes[0] == hashes[1];
    Ok(outcome(
        same,
        format!(
            "metrics csv {} vs {}, checkpoints equal {}",
            &hashes[0].1[..12],
            &hashes[1].1[..12],
            hashes[0].0 == hashes[1].0
        ),
    ))
}

fn report(n: usize, name: &str, limit_s: Option<f64>, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let result = f();
    let secs = start.elapsed().as_secs_f64();
    let (mut pass, mut detail) = match result {
        Ok(o) => (o.pass, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if let Some(limit) = limit_s {
        if secs >= limit {
            pass = false;
            detail += &format!("; over the {limit:.0} s budget");
        }
    }
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("criterion {n} {tag} {name}: {detail} [{secs:.1} s]");
    pass
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir = tmp.path().to_path_buf();
    let mut all = true;
    all &= report(1, "box algebra", Some(10.0), algebra);
    all &= report(2, "schedule and sampler", Some(5.0), schedule);
    all &= report(3, "gradients", Some(60.0), gradients);

    let setup = (|| -> Result<Workspace, String> {
        Ok(Workspace {
            train: gen(&dir, "train.jsonl", 1, 2000, 0)?,
            eval: gen(&dir, "eval.jsonl", 1, 200, 100_000)?,
            ckpt: dir.join("model.ckpt"),
            dir: dir.clone(),
        })
    })();
    match setup {
        Ok(ws) => {
            let learned = report(4, "desk-scale learning", Some(600.0), || learning(&ws));
            all &= learned;
            if ws.ckpt.exists() {
                all &= report(5, "iterative sampling", None, || sampling_trend(&ws));
                all &= report(6, "ablation tables", None, || ablations(&ws));
                all &= report(7, "temporal norm curve", None, || tt_curve(&ws));
            } else {
                for (n, name) in [(5, "iterative sampling"), (6, "ablation tables"), (7, "temporal norm curve")] {
                    println!("criterion {n} FAIL {name}: no trained checkpoint");
                    all = false;
                }
            }
            all &= report(8, "determinism", None, || determinism(&ws));
        }
        Err(e) => {
            println!("corpus generation failed: {e}");
            all = false;
        }
    }
    if !all {
        std::process::exit(1);
    }
}
