//! Acceptance run: every criterion prints one PASS/FAIL line, and the
//! process exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crossdsr::data::{
    augment_rotate180, compute_structure_gt, extract_patches, generate_toy_pairs, generate_toy_scene, read_depth,
    write_depth, DepthMap, RgbdPair, Scale, TrainingSample,
};
use crossdsr::distill::{
    affinity, affinity_space_loss_var, distill_loss_var, output_space_loss_var, select_roles, Role,
};
use crossdsr::eval::{evaluate, BICUBIC_METHOD, MODEL_METHOD};
use crossdsr::losses::{
    de_loss, de_loss_var, dsr_loss, dsr_loss_var, mad_metric, rmse_metric, ssim, total_student_loss_var, LossWeights,
    SsimConfig,
};
use crossdsr::networks::{bind, Bound, DeNet, DsrNet, NetworkParams, SpNet, UncertaintyConvs};
use crossdsr::supervision::{attention_fuse_var, structure_loss_var, uncertainty_var};
use crossdsr::train::{
    run_step1, run_step2, save_checkpoint, train, AdamState, Components, Dataset, Recorder, Silent, TrainConfig, TrainState,
};
use crossdsr_tensor::{Graph, Tensor, Var};
use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Job<'a, T> = Box<dyn FnOnce() -> T + Send + 'a>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn minutes(d: Duration) -> String {
    format!("{:.1} min", d.as_secs_f64() / 60.0)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Runs jobs on as many threads as the machine offers; results keep job order.
fn run_pool<T: Send>(jobs: Vec<Job<'_, T>>) -> Vec<T> {
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(jobs.len().max(1));
    let queue: Mutex<Vec<Option<Job<'_, T>>>> = Mutex::new(jobs.into_iter().map(Some).collect());
    let n = queue.lock().unwrap().len();
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let job = queue.lock().unwrap()[i].take().expect("job taken once");
                let out = job();
                results.lock().unwrap()[i] = Some(out);
            });
        }
    });
    results.into_inner().unwrap().into_iter().map(|r| r.expect("job finished")).collect()
}

// ---------------------------------------------------------------- criterion 1

fn brute_affinity(f: &Tensor<f64>) -> Array2<f64> {
    let s = f.shape();
    let (c, n) = (s[1], s[2] * s[3]);
    let x = f.data();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| (0..c).map(|k| x[k * n + i] * x[k * n + j]).sum()).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
        for j in 0..n {
            out[[i, j]] = (logits[j] - m).exp() / z;
        }
    }
    out
}

fn map_strategy(h: usize, w: usize) -> impl Strategy<Value = DepthMap> {
    proptest::collection::vec(0.0f64..1.0, h * w).prop_map(move |v| DepthMap::new(Array2::from_shape_vec((h, w), v).unwrap()).unwrap())
}

fn feature_strategy(c: usize, h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-2.0f64..2.0, c * h * w).prop_map(move |v| Tensor::from_vec(&[1, c, h, w], v).unwrap())
}

fn property<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let mut runner = TestRunner::new(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn criterion_properties() -> Outcome {
    let started = Instant::now();
    property("affinity rows and oracle", feature_strategy(3, 4, 4), |f| {
        let a = affinity(&f, 4).unwrap();
        let oracle = brute_affinity(&f);
        for row in a.values().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-5);
        }
        for (x, y) in a.values().iter().zip(oracle.iter()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
        Ok(())
    })?;
    property("affinity logit symmetry", feature_strategy(2, 3, 3), |f| {
        // log(a_ij / a_ii) - log(a_ji / a_jj) = (l_ij - l_ji) - l_ii + l_jj
        let a = affinity(&f, 3).unwrap();
        let v = a.values();
        let x = f.data();
        let l = |i: usize, j: usize| x[i] * x[j] + x[9 + i] * x[9 + j];
        for i in 0..9 {
            for j in 0..9 {
                let lhs = (v[[i, j]] / v[[i, i]]).ln() - (v[[j, i]] / v[[j, j]]).ln();
                let asym = lhs + l(i, i) - l(j, j);
                prop_assert!(asym.abs() < 1e-6);
            }
        }
        Ok(())
    })?;
    property("ssim identity, symmetry, range", (map_strategy(12, 12), map_strategy(12, 12)), |(a, b)| {
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let (ab, ba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!(ab.abs() <= 1.0);
        Ok(())
    })?;
    property("loss non-negativity and zero at identity", (map_strategy(11, 11), map_strategy(11, 11)), |(a, b)| {
        prop_assert!(dsr_loss(&a, &b).unwrap() >= 0.0);
        prop_assert!(de_loss(&a, &b, 0.2).unwrap() >= 0.0);
        prop_assert_eq!(dsr_loss(&a, &a).unwrap(), 0.0);
        prop_assert!(de_loss(&a, &a, 0.2).unwrap().abs() < 1e-12);
        Ok(())
    })?;
    let (rgb, depth) = generate_toy_scene(11, 64).unwrap();
    let pairs = vec![RgbdPair { name: "p".into(), rgb, depth }];
    property("augmentation involution", 0u64..10_000, |seed| {
        for s in extract_patches(&pairs, 32, 2, Scale::X4, seed).unwrap() {
            prop_assert_eq!(augment_rotate180(&augment_rotate180(&s)), s);
        }
        Ok(())
    })?;
    property("structure linearity and zero on constant", (map_strategy(7, 9), map_strategy(7, 9), -2.0f64..2.0, -2.0f64..2.0, 0.0f64..1.0), |(a, b, p, q, c)| {
        let mix = DepthMap::new(a.values() * p + b.values() * q).unwrap();
        let rhs = compute_structure_gt(&a).values() * p + compute_structure_gt(&b).values() * q;
        for (x, y) in compute_structure_gt(&mix).values().iter().zip(rhs.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        prop_assert!(compute_structure_gt(&DepthMap::constant(7, 9, c)).values().iter().all(|&v| v == 0.0));
        Ok(())
    })?;
    property("rmse dominates mad", (map_strategy(6, 6), map_strategy(6, 6), 0.5f64..500.0), |(a, b, u)| {
        prop_assert!(rmse_metric(&a, &b, u).unwrap() >= mad_metric(&a, &b, u).unwrap() * (1.0 - 1e-12));
        Ok(())
    })?;
    let elapsed = started.elapsed();
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:?}, bound 2 min"))?;
    Ok(format!("7 property groups x 64 cases in {:.1} s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 2

/// Largest per-entry relative error between analytic and central-difference
/// gradients over every tensor of `bag`.
fn gradcheck(bag: &NetworkParams<f64>, build: &dyn Fn(&mut Graph<f64>, &Bound) -> Var) -> f64 {
    let mut g = Graph::new();
    let bound = bind(&mut g, bag, true);
    let loss = build(&mut g, &bound);
    let grads = g.backward(loss);
    let eval = |p: &NetworkParams<f64>| {
        let mut g = Graph::new();
        let b = bind(&mut g, p, false);
        let l = build(&mut g, &b);
        g.value(l).item()
    };
    // five-point central stencil: the two-point form at a step small enough
    // for its truncation error leaves round-off near 1e-10, which is the
    // same order as the smallest gradients checked here
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (name, &v) in bound.iter() {
        let n = bag.get(name).unwrap().numel();
        let analytic: Vec<f64> = grads.get(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for k in 0..n {
            let at = |offset: f64| {
                let mut p = bag.clone();
                p.get_mut(name).unwrap().data_mut()[k] += offset;
                eval(&p)
            };
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            let denom = analytic[k].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[k] - numeric).abs() / denom);
        }
    }
    worst
}

fn bag(entries: Vec<(String, Tensor<f64>)>) -> NetworkParams<f64> {
    let mut p = NetworkParams::new(1, Scale::X2);
    for (k, t) in entries {
        p.insert(k, t);
    }
    p
}

/// Prediction/target pair whose residuals stay away from the L1 kink.
fn residual_pair(r: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>) {
    let gt = random_tensor(r, &[1, 1, 8, 8], 0.0, 1.0);
    let offsets: Vec<f64> = (0..gt.numel()).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 } * r.random_range(0.05..0.5)).collect();
    let pred = Tensor::from_vec(gt.shape(), gt.data().iter().zip(&offsets).map(|(g, o)| g + o).collect()).unwrap();
    (pred, gt)
}

fn criterion_gradients() -> Outcome {
    let started = Instant::now();
    let mut r = rng(2024);
    let w = LossWeights::default();
    // 8×8 maps cannot hold the default 11×11 window
    let ssim_cfg = SsimConfig { window: 7, ..SsimConfig::default() };
    let window = ssim_cfg.gaussian();
    let mut report = Vec::new();
    let mut record = |name: &str, err: f64| report.push((name.to_string(), err));

    let (pred, gt) = residual_pair(&mut r);
    let b = bag(vec![("pred".into(), pred.clone())]);
    let gt_c = gt.clone();
    record("super-resolution", gradcheck(&b, &|g, p| {
        let t = g.leaf(gt_c.clone(), false);
        dsr_loss_var(g, p.var("pred").unwrap(), t).unwrap()
    }));
    let gt_c = gt.clone();
    record("depth estimation", gradcheck(&b, &|g, p| {
        let t = g.leaf(gt_c.clone(), false);
        de_loss_var(g, p.var("pred").unwrap(), t, w.lambda, &ssim_cfg, &window).unwrap()
    }));

    // output-space: two stages, teacher side constant
    let teacher_sides: Vec<Tensor<f64>> = (0..2).map(|_| random_tensor(&mut r, &[1, 1, 8, 8], 0.0, 1.0)).collect();
    let student_sides: Vec<(String, Tensor<f64>)> = teacher_sides
        .iter()
        .enumerate()
        .map(|(i, t)| (format!("side{i}"), t.map(|v| v + 0.1 + 0.3 * (v * 7.0).sin().abs())))
        .collect();
    let ts = teacher_sides.clone();
    record("output space", gradcheck(&bag(student_sides.clone()), &|g, p| {
        let s: Vec<Var> = (0..2).map(|i| p.var(&format!("side{i}")).unwrap()).collect();
        let t: Vec<Var> = ts.iter().map(|x| g.leaf(x.clone(), false)).collect();
        output_space_loss_var(g, &s, &t).unwrap()
    }));

    // affinity-space: two stages of 4-channel 8×8 features pooled to 4×4
    let teacher_feats: Vec<Tensor<f64>> = (0..2).map(|_| random_tensor(&mut r, &[1, 4, 8, 8], -1.0, 1.0)).collect();
    let student_feats: Vec<(String, Tensor<f64>)> =
        (0..2).map(|i| (format!("feat{i}"), random_tensor(&mut r, &[1, 4, 8, 8], -1.0, 1.0))).collect();
    let tf = teacher_feats.clone();
    record("affinity space", gradcheck(&bag(student_feats.clone()), &|g, p| {
        let s: Vec<Var> = (0..2).map(|i| p.var(&format!("feat{i}")).unwrap()).collect();
        let t: Vec<Var> = tf.iter().map(|x| g.leaf(x.clone(), false)).collect();
        affinity_space_loss_var(g, &s, &t, 4).unwrap()
    }));

    // structure branch: uncertainty convs, fusion and the structure CNN
    let sp = SpNet::new(4, 3);
    // random values everywhere so that no layer starts silent
    let mut structure_entries: Vec<(String, Tensor<f64>)> = sp
        .init::<f64, _>(&mut rng(7), Scale::X2)
        .iter()
        .map(|(k, t)| (k.clone(), random_tensor(&mut r, t.shape(), -0.5, 0.5)))
        .collect();
    for (name, wgt, bias) in [(UncertaintyConvs::SR, 0.8, 0.1), (UncertaintyConvs::DE, 1.2, -0.2)] {
        structure_entries.push((format!("{name}.weight"), Tensor::from_vec(&[1, 1, 1, 1], vec![wgt]).unwrap()));
        structure_entries.push((format!("{name}.bias"), Tensor::from_vec(&[1], vec![bias]).unwrap()));
    }
    let (pred_de, _) = residual_pair(&mut r);
    structure_entries.push(("pred_sr".into(), pred.clone()));
    structure_entries.push(("pred_de".into(), pred_de));
    structure_entries.push(("f_de".into(), random_tensor(&mut r, &[1, 4, 8, 8], -1.0, 1.0)));
    let s_gt = random_tensor(&mut r, &[1, 1, 8, 8], -1.0, 1.0);
    let structure = |g: &mut Graph<f64>, p: &Bound, f_sr: Var, gt: Var| -> Var {
        let u_sr = uncertainty_var(g, p, UncertaintyConvs::SR, p.var("pred_sr").unwrap(), gt).unwrap();
        let u_de = uncertainty_var(g, p, UncertaintyConvs::DE, p.var("pred_de").unwrap(), gt).unwrap();
        let fused = attention_fuse_var(g, f_sr, p.var("f_de").unwrap(), u_sr, u_de).unwrap();
        let s = sp.forward(g, p, fused).unwrap();
        let target = g.leaf(s_gt.clone(), false);
        structure_loss_var(g, s, target).unwrap()
    };
    let mut with_fsr = structure_entries.clone();
    with_fsr.push(("f_sr".into(), random_tensor(&mut r, &[1, 4, 8, 8], -1.0, 1.0)));
    let gt_c = gt.clone();
    record("structure", gradcheck(&bag(with_fsr), &|g, p| {
        let t = g.leaf(gt_c.clone(), false);
        let f_sr = p.var("f_sr").unwrap();
        structure(g, p, f_sr, t)
    }));

    // full student objective with each network as the student
    let mut total_entries = structure_entries.clone();
    total_entries.extend(student_sides.iter().cloned());
    total_entries.extend(student_feats.iter().cloned());
    for student_is_dsr in [true, false] {
        let (gt_c, ts, tf) = (gt.clone(), teacher_sides.clone(), teacher_feats.clone());
        let err = gradcheck(&bag(total_entries.clone()), &|g, p| {
            let t = g.leaf(gt_c.clone(), false);
            let feats: Vec<Var> = (0..2).map(|i| p.var(&format!("feat{i}")).unwrap()).collect();
            let sides: Vec<Var> = (0..2).map(|i| p.var(&format!("side{i}")).unwrap()).collect();
            let task = if student_is_dsr {
                dsr_loss_var(g, p.var("pred_sr").unwrap(), t).unwrap()
            } else {
                de_loss_var(g, p.var("pred_de").unwrap(), t, w.lambda, &ssim_cfg, &window).unwrap()
            };
            let l_s = structure(g, p, feats[1], t);
            let t_sides: Vec<Var> = ts.iter().map(|x| g.leaf(x.clone(), false)).collect();
            let t_feats: Vec<Var> = tf.iter().map(|x| g.leaf(x.clone(), false)).collect();
            let l_o = output_space_loss_var(g, &sides, &t_sides).unwrap();
            let l_a = affinity_space_loss_var(g, &feats, &t_feats, 4).unwrap();
            let l_d = distill_loss_var(g, l_o, Some(l_a), w.gamma).unwrap();
            total_student_loss_var(g, task, Some(l_s), Some(l_d), &w).unwrap()
        });
        record(if student_is_dsr { "total (DSR student)" } else { "total (DE student)" }, err);
    }

    // stop-gradient: distillation never reaches the teacher
    let (dsr, de) = (DsrNet::new(2, 4, Scale::X2), DeNet::new(2, 4, 1, Scale::X2));
    let (pd, pe) = (dsr.init::<f64, _>(&mut rng(31)), de.init::<f64, _>(&mut rng(32)));
    let mut teacher_leak = 0.0f64;
    let mut student_signal = 0.0f64;
    for dsr_is_student in [true, false] {
        let mut g = Graph::new();
        let (bd, be) = (bind(&mut g, &pd, true), bind(&mut g, &pe, true));
        let x = g.leaf(random_tensor(&mut r, &[1, 1, 4, 4], 0.0, 1.0), false);
        let rgb = g.leaf(random_tensor(&mut r, &[1, 3, 8, 8], 0.0, 1.0), false);
        let a = dsr.forward(&mut g, &bd, x).unwrap();
        let b = de.forward(&mut g, &be, rgb).unwrap();
        let (s, t, teacher) = if dsr_is_student { (&a, &b, &be) } else { (&b, &a, &bd) };
        let student = if dsr_is_student { &bd } else { &be };
        let l_o = output_space_loss_var(&mut g, &s.side_outputs, &t.side_outputs).unwrap();
        let l_a = affinity_space_loss_var(&mut g, &s.features, &t.features, 4).unwrap();
        let l_d = distill_loss_var(&mut g, l_o, Some(l_a), w.gamma).unwrap();
        let grads = g.backward(l_d);
        for (_, &v) in teacher.iter() {
            if let Some(t) = grads.get(v) {
                teacher_leak = teacher_leak.max(t.data().iter().fold(0.0, |m, x| m.max(x.abs())));
            }
        }
        for (_, &v) in student.iter() {
            if let Some(t) = grads.get(v) {
                student_signal = student_signal.max(t.data().iter().fold(0.0, |m, x| m.max(x.abs())));
            }
        }
    }

    let elapsed = started.elapsed();
    let worst = report.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let summary: Vec<String> = report.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    ensure(worst <= 1e-4, || format!("relative error above 1e-4: {}", summary.join(", ")))?;
    ensure(teacher_leak == 0.0, || format!("teacher gradient {teacher_leak:e}"))?;
    ensure(student_signal > 0.0, || "student received no distillation gradient".into())?;
    ensure(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}, bound 5 min"))?;
    Ok(format!("{}; teacher gradient exactly 0; {:.1} s", summary.join(", "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 3

fn small_toy_samples(count: usize) -> Vec<TrainingSample> {
    let pairs = generate_toy_pairs(700, 4, 96).unwrap();
    extract_patches(&pairs, 64, count, Scale::X4, 3).unwrap()
}

fn criterion_protocol() -> Outcome {
    let table = [(0.1, 0.2, Role::Dsr), (0.3, 0.2, Role::De), (0.2, 0.2, Role::Dsr), (0.0, 0.0, Role::Dsr)];
    for (a, b, teacher) in table {
        let r = select_roles(a, b).map_err(|e| e.to_string())?;
        ensure(r.teacher == teacher && r.student == teacher.other(), || format!("({a}, {b}) gave {r:?}"))?;
    }
    ensure(select_roles(f64::NAN, 0.1).is_err(), || "NaN accepted".into())?;

    let data = Dataset::new(&small_toy_samples(32)).unwrap();
    let mut cfg = TrainConfig::toy();
    cfg.seed = 3;
    cfg.schedule.step1_epochs = 1;
    cfg.schedule.max_epochs = 2;
    let step1 = run_step1(TrainState::init(&cfg).unwrap(), &cfg, &data, None, &mut Silent).map_err(|e| e.to_string())?;

    // frozen teacher with the selected roles and with the opposite roles
    let mut frozen = Vec::new();
    for force in [None, Some(Role::Dsr), Some(Role::De)] {
        let mut c = cfg.clone();
        c.distill.force_student = force;
        let after = run_step2(step1.clone(), &c, &data, None, &mut Silent).map_err(|e| e.to_string())?;
        let teacher = after.role_history[0].teacher;
        let (t_before, t_after, s_before, s_after) = match teacher {
            Role::Dsr => (step1.dsr.checksum(), after.dsr.checksum(), step1.de.checksum(), after.de.checksum()),
            Role::De => (step1.de.checksum(), after.de.checksum(), step1.dsr.checksum(), after.dsr.checksum()),
        };
        ensure(t_before == t_after, || format!("teacher {teacher} changed during the epoch"))?;
        ensure(s_before != s_after, || format!("student {} did not change", teacher.other()))?;
        frozen.push(teacher.to_string());
    }

    // zero weights and a forced super-resolution student reduce to plain L1 training
    let mut zero = cfg.clone();
    zero.loss.rho1 = 0.0;
    zero.loss.rho2 = 0.0;
    zero.distill.force_student = Some(Role::Dsr);
    zero.schedule.max_epochs = 3;
    let mut plain = zero.clone();
    plain.components = Components { cross_task: false, ..Components::default() };
    let (mut rec_zero, mut rec_plain) = (Recorder::default(), Recorder::default());
    let a = run_step2(step1.clone(), &zero, &data, None, &mut rec_zero).map_err(|e| e.to_string())?;
    let b = run_step2(step1.clone(), &plain, &data, None, &mut rec_plain).map_err(|e| e.to_string())?;
    ensure(rec_zero.steps.len() == rec_plain.steps.len() && !rec_zero.steps.is_empty(), || "step counts differ".into())?;
    let mut worst = 0.0f64;
    for (x, y) in rec_zero.steps.iter().zip(&rec_plain.steps) {
        worst = worst.max((x.losses["task"] - y.losses["task"]).abs());
    }
    ensure(worst <= 1e-6, || format!("loss trajectories differ by {worst:e}"))?;
    ensure(a.dsr.checksum() == b.dsr.checksum(), || "final parameters differ".into())?;
    Ok(format!(
        "truth table incl. tie; frozen teacher ({}); rho=0 trajectory max diff {worst:.1e} over {} steps",
        frozen.join("/"),
        rec_zero.steps.len()
    ))
}

// ------------------------------------------------------------ criteria 4 and 6

const SEEDS: [u64; 3] = [0, 1, 2];
const RUNGS: [(&str, Components); 4] = [
    ("baseline (no cross-task)", Components { cross_task: false, output_space: false, affinity_space: false, structure: false }),
    ("+output space", Components { cross_task: true, output_space: true, affinity_space: false, structure: false }),
    ("+output +affinity", Components { cross_task: true, output_space: true, affinity_space: true, structure: false }),
    ("+structure (full)", Components { cross_task: true, output_space: true, affinity_space: true, structure: true }),
];

struct ToyBench {
    data: Dataset,
    test: Vec<RgbdPair>,
}

impl ToyBench {
    fn new() -> Self {
        let pairs = generate_toy_pairs(1000, 40, 128).unwrap();
        let samples = extract_patches(&pairs, 64, 500, Scale::X4, 7).unwrap();
        ToyBench {
            data: Dataset::new(&samples).unwrap(),
            test: generate_toy_pairs(5000, 8, 96).unwrap(),
        }
    }

    fn config(seed: u64, components: Components) -> TrainConfig {
        let mut cfg = TrainConfig::toy();
        cfg.seed = seed;
        cfg.components = components;
        cfg
    }

    fn test_mad(&self, state: &TrainState) -> f64 {
        let r = evaluate("toy", &self.test, Some(&state.dsr), Scale::X4, 1.0).unwrap();
        r.mean(MODEL_METHOD).unwrap().mad
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn teachers(state: &TrainState) -> String {
    state.role_history.iter().map(|r| if r.teacher == Role::Dsr { 'S' } else { 'D' }).collect()
}

fn criterion_ablation(bench: &ToyBench, full_runs: &Mutex<Vec<(u64, TrainState)>>) -> Outcome {
    let started = Instant::now();
    let step1_jobs: Vec<Job<'_, TrainState>> = SEEDS
        .iter()
        .map(|&seed| {
            Box::new(move || {
                let cfg = ToyBench::config(seed, RUNGS[3].1);
                run_step1(TrainState::init(&cfg).unwrap(), &cfg, &bench.data, None, &mut Silent).unwrap()
            }) as Job<'_, TrainState>
        })
        .collect();
    let step1 = run_pool(step1_jobs);

    let mut step2_jobs: Vec<Job<'_, (usize, usize, TrainState)>> = Vec::new();
    for (si, &seed) in SEEDS.iter().enumerate() {
        for (ri, &(_, comp)) in RUNGS.iter().enumerate() {
            let start = step1[si].clone();
            step2_jobs.push(Box::new(move || {
                let cfg = ToyBench::config(seed, comp);
                (si, ri, run_step2(start, &cfg, &bench.data, None, &mut Silent).unwrap())
            }));
        }
    }
    let mut mad = vec![vec![0.0; SEEDS.len()]; RUNGS.len()];
    let mut roles = Vec::new();
    for (si, ri, state) in run_pool(step2_jobs) {
        mad[ri][si] = bench.test_mad(&state);
        if ri == 3 {
            roles.push(format!("seed {} {}", SEEDS[si], teachers(&state)));
            full_runs.lock().unwrap().push((SEEDS[si], state));
        }
    }
    let elapsed = started.elapsed();

    let medians: Vec<f64> = mad.iter().map(|m| median(m.clone())).collect();
    for (ri, (name, _)) in RUNGS.iter().enumerate() {
        let per_seed: Vec<String> = mad[ri].iter().map(|v| format!("{v:.5}")).collect();
        println!("    {name:26} median MAD {:.5}  seeds [{}]", medians[ri], per_seed.join(", "));
    }
    println!("    teachers per step-2 epoch (S = super-resolution, D = depth estimation): {}", roles.join("; "));
    let gain = (medians[0] - medians[3]) / medians[0];
    let mut problems = Vec::new();
    if !(medians[3] < medians[0]) {
        problems.push(format!("full {:.5} not below baseline {:.5}", medians[3], medians[0]));
    }
    for i in 1..RUNGS.len() {
        if medians[i] > medians[i - 1] * 1.01 {
            problems.push(format!("rung '{}' {:.5} above '{}' {:.5} by more than 1%", RUNGS[i].0, medians[i], RUNGS[i - 1].0, medians[i - 1]));
        }
    }
    if gain < 0.03 {
        problems.push(format!("end-to-end improvement {:.2}% below 3%", gain * 100.0));
    }
    if elapsed > Duration::from_secs(30 * 60) {
        problems.push(format!("runtime {} exceeds 30 min", minutes(elapsed)));
    }
    let detail = format!("improvement {:.2}%, runtime {}", gain * 100.0, minutes(elapsed));
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}: {}", problems.join("; ")))
    }
}

fn criterion_determinism(bench: &ToyBench, full_runs: &Mutex<Vec<(u64, TrainState)>>) -> Outcome {
    let started = Instant::now();
    let seed = SEEDS[0];
    let cfg = ToyBench::config(seed, RUNGS[3].1);
    let mut runs: Vec<TrainState> = full_runs.lock().unwrap().iter().filter(|(s, _)| *s == seed).map(|(_, st)| st.clone()).collect();
    while runs.len() < 2 {
        runs.push(train(TrainState::init(&cfg).unwrap(), &cfg, &bench.data, None, &mut Silent).map_err(|e| e.to_string())?);
    }
    let sums = |s: &TrainState| {
        vec![
            s.dsr.checksum(),
            s.de.checksum(),
            s.sp.as_ref().map(|p| p.checksum()).unwrap_or_default(),
            s.uncertainty.as_ref().map(|p| p.checksum()).unwrap_or_default(),
        ]
    };
    ensure(runs[0].epoch == cfg.schedule.max_epochs, || format!("stopped at epoch {}", runs[0].epoch))?;
    ensure(sums(&runs[0]) == sums(&runs[1]), || "parameter checksums differ".into())?;
    ensure(runs[0].role_history == runs[1].role_history, || "role histories differ".into())?;
    Ok(format!(
        "{} epochs twice: checksums equal (dsr {}...), role history {} identical; {}",
        cfg.schedule.max_epochs,
        &runs[0].dsr.checksum()[..12],
        teachers(&runs[0]),
        minutes(started.elapsed())
    ))
}

// ---------------------------------------------------------------- criterion 5

fn criterion_depth_only() -> Outcome {
    let data = Dataset::new(&small_toy_samples(16)).unwrap();
    let mut cfg = TrainConfig::toy();
    cfg.schedule.step1_epochs = 1;
    cfg.schedule.max_epochs = 2;
    let state = train(TrainState::init(&cfg).unwrap(), &cfg, &data, None, &mut Silent).map_err(|e| e.to_string())?;
    ensure(state.sp.is_some() && !state.de.is_empty(), || "training produced no auxiliary networks".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    save_checkpoint(&state, &root.join("full.ckpt")).map_err(|e| e.to_string())?;
    let mut stripped = state.clone();
    stripped.de = NetworkParams::new(stripped.de.stage_count, stripped.de.scale);
    stripped.sp = None;
    stripped.uncertainty = None;
    stripped.opt_de = AdamState::new();
    stripped.opt_sp = AdamState::new();
    stripped.opt_uncertainty = AdamState::new();
    save_checkpoint(&stripped, &root.join("dsr_only.ckpt")).map_err(|e| e.to_string())?;

    let (_, depth) = generate_toy_scene(4242, 64).unwrap();
    let lr = crossdsr::data::bicubic_downsample(&depth, 4).unwrap();
    write_depth(&root.join("lr.pfm"), &lr).map_err(|e| e.to_string())?;
    let colour_files = std::fs::read_dir(root)
        .unwrap()
        .filter(|e| {
            let n = e.as_ref().unwrap().file_name().to_string_lossy().to_lowercase();
            n.contains("color") || n.ends_with(".png")
        })
        .count();
    ensure(colour_files == 0, || "colour file present".into())?;

    let run = |ckpt: &str, out: &str| -> Result<Vec<u8>, String> {
        let o = Command::new(env!("CARGO_BIN_EXE_crossdsr"))
            .args(["infer", "--checkpoint", ckpt, "--input", "lr.pfm", "--output", out])
            .current_dir(root)
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        std::fs::read(root.join(out)).map_err(|e| e.to_string())
    };
    let full = run("full.ckpt", "hr_full.pfm")?;
    let bare = run("dsr_only.ckpt", "hr_bare.pfm")?;
    let hr = read_depth(&root.join("hr_full.pfm")).map_err(|e| e.to_string())?;
    ensure(hr.dims() == (64, 64), || format!("output {:?}", hr.dims()))?;
    ensure(full == bare, || "stripping auxiliary networks changed the output".into())?;
    let png = run("dsr_only.ckpt", "hr.png")?;
    ensure(!png.is_empty(), || "empty PNG output".into())?;
    Ok(format!("16x16 -> 64x64 with no colour file on disk; {} output bytes identical with and without auxiliary networks", full.len()))
}

// ---------------------------------------------------------------- criterion 7

fn keys(x: f64) -> f64 {
    let t = x.abs();
    if t < 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

/// Direct 2-D resampling: every output pixel sums over its whole input
/// neighbourhood with clamp-to-edge indexing and one final normalization.
fn brute_resample(src: &[Vec<f64>], out_h: usize, out_w: usize, stretch: f64) -> Vec<Vec<f64>> {
    let (h, w) = (src.len(), src[0].len());
    let (ry, rx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let reach = (2.0 * stretch).ceil() as isize + 1;
    let mut out = vec![vec![0.0; out_w]; out_h];
    for (oy, row) in out.iter_mut().enumerate() {
        for (ox, cell) in row.iter_mut().enumerate() {
            let cy = (oy as f64 + 0.5) * ry - 0.5;
            let cx = (ox as f64 + 0.5) * rx - 0.5;
            let (mut acc, mut norm) = (0.0, 0.0);
            for jy in cy.floor() as isize - reach..=cy.floor() as isize + reach + 1 {
                for jx in cx.floor() as isize - reach..=cx.floor() as isize + reach + 1 {
                    let wgt = keys((jy as f64 - cy) / stretch) * keys((jx as f64 - cx) / stretch);
                    let sy = jy.clamp(0, h as isize - 1) as usize;
                    let sx = jx.clamp(0, w as isize - 1) as usize;
                    acc += wgt * src[sy][sx];
                    norm += wgt;
                }
            }
            *cell = acc / norm;
        }
    }
    out
}

fn criterion_metrics() -> Outcome {
    let (rgb, depth) = generate_toy_scene(9001, 96).unwrap();
    let scene = RgbdPair { name: "held-out".into(), rgb, depth };
    let report = evaluate("toy", std::slice::from_ref(&scene), None, Scale::X4, 1.0).map_err(|e| e.to_string())?;
    let row = report.rows.iter().find(|r| r.method == BICUBIC_METHOD && r.scene == "held-out").unwrap();

    let gt: Vec<Vec<f64>> = scene.depth.values().rows().into_iter().map(|r| r.to_vec()).collect();
    let lr = brute_resample(&gt, 24, 24, 4.0);
    let up = brute_resample(&lr, 96, 96, 1.0);
    let (mut abs, mut sq) = (0.0, 0.0);
    for y in 0..96 {
        for x in 0..96 {
            let d = up[y][x] - gt[y][x];
            abs += d.abs();
            sq += d * d;
        }
    }
    let n = (96 * 96) as f64;
    let (mad, rmse) = (abs / n, (sq / n).sqrt());
    let (dm, dr) = ((row.mad - mad).abs(), (row.rmse - rmse).abs());
    ensure(dm <= 1e-9 && dr <= 1e-9, || format!("MAD {} vs {mad}, RMSE {} vs {rmse}", row.mad, row.rmse))?;
    ensure(mad > 0.0, || "bicubic round trip was lossless".into())?;
    Ok(format!("MAD {mad:.6} RMSE {rmse:.6}; deviations {dm:.1e} / {dr:.1e}"))
}

// ---------------------------------------------------------------- driver

fn run_criterion(number: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = started.elapsed().as_secs_f64();
    match &outcome {
        Ok(detail) => println!("PASS criterion {number} {name}: {detail} [{secs:.1} s]"),
        Err(detail) => println!("FAIL criterion {number} {name}: {detail} [{secs:.1} s]"),
    }
    outcome.is_ok()
}

fn main() {
    let filter: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_default();
    let wanted = |n: usize| filter.is_empty() || filter.contains(&n);
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    println!("acceptance criteria");
    let mut passed = Vec::new();
    if wanted(1) {
        passed.push(run_criterion(1, "property suite", criterion_properties));
    }
    if wanted(2) {
        passed.push(run_criterion(2, "gradient verification", criterion_gradients));
    }
    if wanted(3) {
        passed.push(run_criterion(3, "training protocol", criterion_protocol));
    }
    if wanted(5) {
        passed.push(run_criterion(5, "depth-only inference", criterion_depth_only));
    }
    if wanted(7) {
        passed.push(run_criterion(7, "metric cross-check", criterion_metrics));
    }
    if wanted(4) || wanted(6) {
        let bench = ToyBench::new();
        let full_runs = Mutex::new(Vec::new());
        if wanted(4) {
            passed.push(run_criterion(4, "toy ablation ladder", || criterion_ablation(&bench, &full_runs)));
        }
        if wanted(6) {
            passed.push(run_criterion(6, "determinism", || criterion_determinism(&bench, &full_runs)));
        }
    }
    let failed = passed.iter().filter(|p| !**p).count();
    println!("{} of {} criteria passed", passed.len() - failed, passed.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
