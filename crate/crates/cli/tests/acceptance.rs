//! End-to-end acceptance run: one PASS/FAIL line per criterion on stderr.
//!
//! The desk-scale pipeline (500 episodes, two 30-epoch trainings, tuning and
//! closed-loop evaluation) takes on the order of twenty minutes on one core.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use dynexit::bo::{benchmark, optimize, random_search, BoState, Evaluation, ThresholdObjective};
use dynexit::cost::CostModel;
use dynexit::exit::{run_dynamic, trajectory_costs, ExitProfile, ExitThresholds, PreGate};
use dynexit::image::Image;
use dynexit::model::{Model, ModelConfig, NavInput};
use dynexit::navsim::{cosine_metrics, eval_closed_loop, load_dataset, make_dataset, ExpertPolicy, SimConfig};
use dynexit::tensor::{grad_check, Tape, Tensor, Var};
use dynexit::trainer::{end_to_end_grad_check, evaluate, evaluate_static};
use dynexit::Result;
use dynexit_cli::{
    closed_loop_worlds, cmd_eval, cmd_gen_data, cmd_train, cmd_tune, cmd_viz, EvalArgs, GenDataArgs, MetricsRow,
    RunConfig, TrainArgs, TuneArgs, VizArgs, VizRow,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    lines: Vec<(usize, bool)>,
}

impl Report {
    fn record(&mut self, n: usize, pass: bool, detail: String) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        // bypasses the test harness's output capture so the lines always show
        let _ = writeln!(std::io::stderr(), "criterion {n}: {verdict} {detail}");
        self.lines.push((n, pass));
    }
}

fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn probe(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type Primitive = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;

fn primitives(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<usize>, Primitive)> {
    let (r, c) = (5, 6);
    let other = rand_tensor(rng, &[r, c]);
    let gamma = rand_tensor(rng, &[c]);
    let beta = rand_tensor(rng, &[c]);
    let rhs = rand_tensor(rng, &[c, 4]);
    let bias = rand_tensor(rng, &[4]);
    let kernel = rand_tensor(rng, &[2, 2, 3, 4]);
    let kbias = rand_tensor(rng, &[4]);
    let (q, k) = (rand_tensor(rng, &[7, 8]), rand_tensor(rng, &[7, 8]));
    let o = move |t: &mut Tape, x: &Tensor| t.constant(x.clone());
    let rc = vec![r, c];
    let mut v: Vec<(&'static str, Vec<usize>, Primitive)> = Vec::new();
    let oc = other.clone();
    v.push(("add", rc.clone(), Box::new(move |t, x| { let b = o(t, &oc); t.add(x, b) })));
    let oc = other.clone();
    v.push(("sub", rc.clone(), Box::new(move |t, x| { let b = o(t, &oc); t.sub(b, x) })));
    let oc = other.clone();
    v.push(("mul", rc.clone(), Box::new(move |t, x| { let b = o(t, &oc); t.mul(x, b) })));
    v.push(("scale", rc.clone(), Box::new(|t, x| t.scale(x, -1.5))));
    v.push(("relu", rc.clone(), Box::new(|t, x| t.relu(x))));
    v.push(("exp", rc.clone(), Box::new(|t, x| t.exp(x))));
    v.push(("log", rc.clone(), Box::new(|t, x| { let e = t.exp(x)?; t.log(e) })));
    v.push(("softmax", rc.clone(), Box::new(|t, x| t.softmax(x, 1))));
    v.push(("layer_norm", rc.clone(), Box::new(move |t, x| { let (g, b) = (o(t, &gamma), o(t, &beta)); t.layer_norm(x, g, b) })));
    v.push(("concat", rc.clone(), Box::new(|t, x| { let y = t.exp(x)?; t.concat(&[x, y], 1) })));
    v.push(("slice", rc.clone(), Box::new(|t, x| t.slice(x, 1, 2, 3))));
    v.push(("split", rc.clone(), Box::new(|t, x| { let p = t.split(x, 1, &[2, 4])?; t.mul(p[1], p[1]) })));
    v.push(("reshape", rc.clone(), Box::new(move |t, x| t.reshape(x, &[c, r]))));
    v.push(("transpose", rc.clone(), Box::new(|t, x| t.transpose(x))));
    v.push(("tile_rows", vec![c], Box::new(|t, x| t.tile_rows(x, 3))));
    v.push(("gather_rows", rc.clone(), Box::new(|t, x| t.gather_rows(x, &[4, 0, 2, 4]))));
    v.push(("sum", rc.clone(), Box::new(|t, x| { let y = t.mul(x, x)?; t.sum(y) })));
    v.push(("mean", rc.clone(), Box::new(|t, x| { let y = t.exp(x)?; t.mean(y) })));
    v.push(("sum_axis", rc.clone(), Box::new(|t, x| t.sum_axis(x, 0))));
    v.push(("mean_axis", rc.clone(), Box::new(|t, x| t.mean_axis(x, 1))));
    v.push(("l2_norm", rc.clone(), Box::new(|t, x| t.l2_norm(x))));
    let oc = other.clone();
    v.push(("cosine", rc.clone(), Box::new(move |t, x| { let b = o(t, &oc); t.cosine(x, b) })));
    v.push(("normalize_rows", rc.clone(), Box::new(|t, x| t.normalize_rows(x, 1e-6))));
    let (rh, bi) = (rhs.clone(), bias.clone());
    v.push(("matmul", rc.clone(), Box::new(move |t, x| { let b = o(t, &rh); t.matmul(x, b) })));
    let oc = other.clone();
    v.push(("linear", vec![c, 4], Box::new(move |t, w| { let (x, b) = (o(t, &oc), o(t, &bi)); t.linear(x, w, b) })));
    v.push(("conv2d", vec![5, 5, 3], Box::new(move |t, x| { let (k, b) = (o(t, &kernel), o(t, &kbias)); t.conv2d(x, k, b, 2, 1) })));
    let (kq, v7) = (k.clone(), rand_tensor(rng, &[7, 8]));
    v.push(("attention_v", vec![7, 8], Box::new(move |t, x| { let (qq, kk) = (o(t, &q), o(t, &k)); t.attention(qq, kk, x, 2) })));
    v.push(("attention_q", vec![7, 8], Box::new(move |t, x| { let (kk, vv) = (o(t, &kq), o(t, &v7)); t.attention(x, kk, vv, 2) })));
    v
}

/// Straight-through forward values are constant in the input, so its gradient is
/// checked against central differences of the soft path it stands in for.
fn straight_through_error(rng: &mut ChaCha8Rng) -> f64 {
    let x = rand_tensor(rng, &[5, 6]);
    let hard = Tensor::new(vec![5, 6], (0..30).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
    let st = grad_check(|t, x| { let s = t.exp(x)?; let y = t.straight_through(hard.clone(), s)?; probe(t, y, 9) }, &x, 1e-5)
        .unwrap();
    let soft = grad_check(|t, x| { let y = t.exp(x)?; probe(t, y, 9) }, &x, 1e-5).unwrap();
    st.analytic
        .iter()
        .zip(&soft.numeric)
        .map(|(a, n)| if a == n { 0.0 } else { (a - n).abs() / a.abs().max(n.abs()).max(1e-6) })
        .fold(0.0, f64::max)
}

fn criterion_1(rep: &mut Report) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: (f64, &str) = (0.0, "");
    for (k, (name, shape, f)) in primitives(&mut rng).into_iter().enumerate() {
        let x = rand_tensor(&mut rng, &shape);
        let r = grad_check(|t, x| { let y = f(t, x)?; probe(t, y, 77 + k as u64) }, &x, 1e-5).unwrap();
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, name);
        }
    }
    let st = straight_through_error(&mut rng);
    if st >= worst.0 {
        worst = (st, "straight_through");
    }
    let cfg = ModelConfig {
        image_size: 2,
        enc_channels: vec![4],
        past_frames: 0,
        layers: 2,
        heads: 2,
        head_hidden: 8,
        selector_keep_bias: 1.0,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg.clone(), 11);
    let sim = SimConfig { image_size: 2, past_frames: 0, samples_per_episode: 1, ..SimConfig::default() };
    let ds = make_dataset(5, 3, 0.8, &sim).unwrap();
    let e2e = end_to_end_grad_check(&model, &ds.train[0], 0.7, 0.5, 5, 1e-6).unwrap();
    let elapsed = start.elapsed();
    let pass = worst.0 < 1e-4 && e2e.report.max_rel_err < 1e-3 && elapsed < Duration::from_secs(30);
    rep.record(
        1,
        pass,
        format!(
            "primitive max rel err {:.2e} ({}), end-to-end {:.2e} over {} parameters, {:.1}s",
            worst.0,
            worst.1,
            e2e.report.max_rel_err,
            e2e.report.rel_err.len(),
            elapsed.as_secs_f64()
        ),
    );
}

fn criterion_2(rep: &mut Report) {
    use dynexit::selector::{gumbel_noise, mask_from_logits, SelectMode, SelectionLogits, KEEP};
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = SelectionLogits::new(rand_tensor(&mut rng, &[25, 25, 16, 2])).unwrap();
    let mut worst_sum = 0.0f64;
    for mode in [SelectMode::Eval, SelectMode::Train] {
        let mask = mask_from_logits(&logits, 0.7, mode, &mut rng).unwrap();
        if mode == SelectMode::Eval {
            for (pair, &keep) in logits.values().data().chunks(2).zip(mask.soft.data()) {
                let drop = 1.0 / (1.0 + ((pair[KEEP] - pair[1 - KEEP]) / 0.7).exp());
                worst_sum = worst_sum.max((keep + drop - 1.0).abs());
            }
        }
    }
    let data: Vec<f64> = (0..10_000)
        .flat_map(|_| {
            let base: f64 = rng.gen_range(-3.0..3.0);
            let gap: f64 = rng.gen_range(1.0..4.0) * if rng.gen() { 1.0 } else { -1.0 };
            [base, base + gap]
        })
        .collect();
    let gapped = SelectionLogits::new(Tensor::new(vec![100, 100, 1, 2], data).unwrap()).unwrap();
    let mask = mask_from_logits(&gapped, 0.01, SelectMode::Eval, &mut rng).unwrap();
    let worst_gap = mask.soft.data().iter().zip(mask.hard.data()).map(|(s, h)| (s - h).abs()).fold(0.0, f64::max);
    let g = gumbel_noise(&[100_000], &mut rng).unwrap();
    let mean = g.data().iter().sum::<f64>() / 1e5;
    let gamma = 0.577_215_664_901_532_9;
    let pass = worst_sum < 1e-9 && worst_gap < 1e-6 && (mean - gamma).abs() < 0.02;
    rep.record(2, pass, format!("pair sum err {worst_sum:.1e}, |soft-hard| {worst_gap:.1e}, Gumbel mean {mean:.4}"));
}

fn random_input(cfg: &ModelConfig, seed: u64) -> NavInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = || Image::new(cfg.image_size, cfg.image_size, 3, (0..cfg.image_size * cfg.image_size * 3).map(|_| rng.gen()).collect()).unwrap();
    NavInput { frames: (0..=cfg.past_frames).map(|_| image()).collect(), goal: image() }
}

fn criterion_3(rep: &mut Report) {
    let cost = CostModel::default();
    let small = ModelConfig { image_size: 16, enc_channels: vec![4, 8], past_frames: 2, ..ModelConfig::default() };
    let configs = [
        ModelConfig::default(),
        ModelConfig { selector_keep_bias: 3.0, ..ModelConfig::default() },
        ModelConfig { selector_keep_bias: -1.5, ..ModelConfig::default() },
        small.clone(),
        ModelConfig { selector_enabled: false, ..small.clone() },
        ModelConfig { layers: 3, heads: 2, head_blocks: 2, conv_kernel: 3, conv_padding: 1, ..small },
    ];
    let mut seen = BTreeSet::new();
    let mut mismatches = 0;
    let mut monotone = true;
    for (k, cfg) in configs.into_iter().enumerate() {
        let model = Model::new(cfg.clone(), 20 + k as u64);
        let input = random_input(&cfg, 40 + k as u64);
        let (_, tape_flops) = model.forward_static(&input).unwrap();
        let full = run_dynamic(&model, &input, &ExitThresholds::disabled(cfg.layers), &cost).unwrap();
        let n = full.num_tokens;
        mismatches += (tape_flops != CostModel::static_flops(&cfg, n)) as usize;
        mismatches += (full.flops != tape_flops) as usize;
        seen.insert((n, cfg.layers, cfg.layers));
        let cap = cfg.pixels_per_map() * cfg.channels();
        let bypass = ExitThresholds {
            pre_gate: PreGate { feature_dist_threshold: f64::MAX, max_masked_obs: cap, max_masked_goal: cap },
            pre_decoder: true,
            ..ExitThresholds::disabled(cfg.layers)
        };
        let t = run_dynamic(&model, &input, &bypass, &cost).unwrap();
        mismatches += (t.exit_layer != 0 || t.flops != CostModel::exit_flops(&cfg, n, 0, false)) as usize;
        seen.insert((n, cfg.layers, 0));
        let mut flops = vec![t.flops];
        for i in 2..=cfg.layers {
            let mut eta = vec![0.0; cfg.layers - 1];
            eta[i - 2] = f64::MAX;
            let th = ExitThresholds { eta, layer_exit: true, ..ExitThresholds::disabled(cfg.layers) };
            let t = run_dynamic(&model, &input, &th, &cost).unwrap();
            mismatches += (t.exit_layer != i || t.flops != CostModel::exit_flops(&cfg, n, i, true)) as usize;
            seen.insert((n, cfg.layers, i));
            flops.push(t.flops);
        }
        monotone &= flops.windows(2).all(|w| w[0] < w[1]);
        for n in 1..=cfg.num_sources() * cfg.pixels_per_map() {
            let f: Vec<u64> = (0..=cfg.layers).map(|i| CostModel::exit_flops(&cfg, n, i, true)).collect();
            monotone &= f.windows(2).all(|w| w[0] < w[1]);
        }
    }
    let pass = mismatches == 0 && seen.len() >= 5 && monotone;
    rep.record(3, pass, format!("{} (tokens, exit) configs, {mismatches} mismatches, monotone {monotone}", seen.len()));
}

fn criterion_5(rep: &mut Report) {
    let start = Instant::now();
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        0.5 * (v[4] + v[5])
    };
    let grid = benchmark::grid_best(50);
    let (mut bo, mut rs) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        let mut obj = |x: &[f64]| -> Result<Evaluation> { Ok(benchmark::evaluate(x)) };
        let (_, state) = optimize(&benchmark::space(), 20, seed, BoState::default(), &mut obj, &mut |_| Ok(())).unwrap();
        bo.push(state.incumbent().unwrap().v);
        rs.push(random_search(&benchmark::space(), 20, seed, &mut obj).unwrap().1);
    }
    let (mb, mr) = (median(bo), median(rs));
    let elapsed = start.elapsed();
    let pass = (grid - mb).abs() <= 0.05 * grid.abs() && mb > mr && elapsed < Duration::from_secs(120);
    rep.record(5, pass, format!("median BO V {mb:.4}, grid {grid:.4}, random {mr:.4}, {:.1}s", elapsed.as_secs_f64()));
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("version = 1\n{body}")).unwrap();
    path
}

fn train(data: &Path, out: &Path, config: &Path) -> Duration {
    let start = Instant::now();
    cmd_train(&TrainArgs { data: data.into(), config: Some(config.into()), out: out.into(), log: None }).unwrap();
    start.elapsed()
}

fn tune(ckpt: &Path, data: &Path, config: &Path, out: &Path) {
    cmd_tune(&TuneArgs {
        ckpt: ckpt.into(),
        data: data.into(),
        config: Some(config.into()),
        budget: None,
        seed: None,
        out: out.into(),
        history: None,
        resume: false,
    })
    .unwrap();
}

fn eval(ckpt: &Path, data: &Path, config: &Path, thresholds: Option<&Path>, worlds: usize) -> MetricsRow {
    cmd_eval(&EvalArgs {
        ckpt: ckpt.into(),
        data: data.into(),
        config: Some(config.into()),
        thresholds: thresholds.map(Into::into),
        static_mode: thresholds.is_none(),
        csv: None,
        worlds: Some(worlds),
    })
    .unwrap()
}

fn viz(ckpt: &Path, data: &Path, config: &Path, thresholds: &Path, out: &Path) -> Vec<VizRow> {
    cmd_viz(&VizArgs {
        ckpt: ckpt.into(),
        data: data.into(),
        config: Some(config.into()),
        out: out.into(),
        thresholds: Some(thresholds.into()),
        samples: 2,
        force: false,
    })
    .unwrap()
}

fn load(ckpt: &Path, cfg: &RunConfig) -> Model {
    Model::load(fs::File::open(ckpt).unwrap(), cfg.model()).unwrap()
}

fn read_thresholds(path: &Path) -> ExitThresholds {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn dynexit_bin(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_dynexit")).args(args).env("DYNEXIT_THREADS", "1").output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn criterion_9(rep: &mut Report, root: &Path) {
    let cfg = write_config(
        root,
        "repro.toml",
        "image_size = 16\nenc_channels = [4, 8]\npast_frames = 2\nepochs = 2\nbatch_size = 8\nbo_budget = 8\n\
         closed_loop_worlds = 2\nclosed_loop_max_steps = 60\n",
    );
    let run = |tag: &str| -> Vec<Vec<u8>> {
        let dir = root.join(tag);
        fs::create_dir(&dir).unwrap();
        let (data, ckpt, th, csv) = (dir.join("data"), dir.join("m.ckpt"), dir.join("th.json"), dir.join("m.csv"));
        dynexit_bin(&["gen-data", "--episodes", "8", "--seed", "5", "--out", s(&data), "--config", s(&cfg)]);
        dynexit_bin(&["train", "--data", s(&data), "--out", s(&ckpt), "--config", s(&cfg)]);
        dynexit_bin(&["tune", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&th), "--config", s(&cfg)]);
        dynexit_bin(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--thresholds", s(&th), "--csv", s(&csv), "--config", s(&cfg)]);
        [ckpt, th, csv].iter().map(|p| fs::read(p).unwrap()).collect()
    };
    let (a, b) = (run("repro_a"), run("repro_b"));
    let same: Vec<bool> = a.iter().zip(&b).map(|(x, y)| x == y).collect();
    rep.record(9, same.iter().all(|&x| x), format!("checkpoint/thresholds/csv identical: {same:?}"));
}

/// Search-space vector of a threshold set: layer thresholds, then the gate distance.
fn as_point(th: &ExitThresholds) -> Vec<f64> {
    let mut x = th.eta.clone();
    x.push(th.pre_gate.feature_dist_threshold);
    x
}

#[test]
fn acceptance_criteria() {
    let mut rep = Report { lines: Vec::new() };
    criterion_1(&mut rep);
    criterion_2(&mut rep);
    criterion_3(&mut rep);
    criterion_5(&mut rep);

    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    // BO budgets at the 0.6 FLOPs target of the efficiency criterion
    let cfg_a = write_config(root, "selector.toml", "flops_ratio = 0.6\ntime_ratio = 0.6\n");
    let cfg_b = write_config(root, "no_selector.toml", "flops_ratio = 0.6\ntime_ratio = 0.6\nselector_enabled = false\n");
    // default budgets (0.46 of static)
    let cfg_d = write_config(root, "default.toml", "");
    let run_a = RunConfig::load(Some(&cfg_a)).unwrap();

    let data = root.join("data");
    cmd_gen_data(&GenDataArgs { episodes: 500, seed: 1, out: data.clone(), split: 0.8, config: Some(cfg_a.clone()), force: false })
        .unwrap();
    let ds = load_dataset(&data).unwrap();
    let (ckpt_a, ckpt_b) = (root.join("a.ckpt"), root.join("b.ckpt"));
    let time_a = train(&data, &ckpt_a, &cfg_a);
    let model_a = load(&ckpt_a, &run_a);

    // 4: static equivalence on the trained model
    let samples = &ds.test[..100.min(ds.test.len())];
    let cost = CostModel::default();
    let disabled = ExitThresholds::disabled(run_a.layers);
    let mut bitwise = samples.len() == 100;
    let mut preds = Vec::new();
    for s in samples {
        let (p, flops) = model_a.forward_static(&s.input).unwrap();
        let t = run_dynamic(&model_a, &s.input, &disabled, &cost).unwrap();
        bitwise &= t.prediction == p && t.flops == flops;
        preds.push(p);
    }
    let targets: Vec<_> = samples.iter().map(|s| s.target.clone()).collect();
    let direct = cosine_metrics(&preds, &targets).unwrap();
    let via_eval = evaluate(&model_a, samples, &disabled, &cost).unwrap();
    bitwise &= via_eval.metrics == direct;
    rep.record(4, bitwise, format!("{} samples, Sim(w) {:.4}", samples.len(), direct.sim_w));

    // 6: efficiency against static
    let th_a = root.join("th_a.json");
    tune(&ckpt_a, &data, &cfg_a, &th_a);
    let worlds = run_a.closed_loop_worlds;
    let stat = eval(&ckpt_a, &data, &cfg_a, None, worlds);
    let dynm = eval(&ckpt_a, &data, &cfg_a, Some(&th_a), worlds);
    let ratio = dynm.mean_flops / stat.mean_flops;
    let drop = stat.sim_w - dynm.sim_w;
    rep.record(
        6,
        ratio <= 0.6 && drop <= 1.0 && time_a < Duration::from_secs(1800),
        format!(
            "FLOPs {:.3}x static, Sim(w) {:.3} -> {:.3} (drop {drop:.3}), training {:.0}s",
            ratio,
            stat.sim_w,
            dynm.sim_w,
            time_a.as_secs_f64()
        ),
    );

    // 7a: tuned against untuned midpoint thresholds, scored by the same objective
    let profiles: Vec<ExitProfile> = ds.test.iter().map(|s| ExitProfile::build(&model_a, &s.input).unwrap()).collect();
    let all_targets: Vec<_> = ds.test.iter().map(|s| s.target.clone()).collect();
    let static_traces: Vec<_> = profiles.iter().map(|p| p.simulate(&model_a, &disabled, &cost)).collect();
    let objective = ThresholdObjective {
        model: &model_a,
        profiles: &profiles,
        targets: &all_targets,
        cost_model: &cost,
        constraints: run_a.constraints(&trajectory_costs(&static_traces).unwrap()),
        lambda: run_a.lambda,
        max_masked_obs: run_a.max_masked_obs,
        max_masked_goal: run_a.max_masked_goal,
        pre_decoder: run_a.pre_decoder,
        layer_exit: run_a.layer_exit,
    };
    let dists = profiles.iter().map(|p| p.gate.feature_dist);
    let (dmin, dmax) = (dists.clone().fold(f64::INFINITY, f64::min), dists.fold(0.0, f64::max));
    let mut midpoint = vec![0.5 * run_a.eta_max; run_a.layers - 1];
    midpoint.push(0.5 * (0.99 * dmin + dmax));
    let tuned = read_thresholds(&th_a);
    let v_tuned = objective.evaluate(&as_point(&tuned)).unwrap().v();
    let v_fixed = objective.evaluate(&midpoint).unwrap().v();
    rep.record(7, v_tuned >= v_fixed, format!("(a) V tuned {v_tuned:.4} vs midpoint thresholds {v_fixed:.4}"));

    // 7b: pre-decoder gate on and off under the default budgets
    let th_d = root.join("th_default.json");
    tune(&ckpt_a, &data, &cfg_d, &th_d);
    let with_gate = read_thresholds(&th_d);
    let without = ExitThresholds { pre_decoder: false, ..with_gate.clone() };
    let on = evaluate(&model_a, &ds.test, &with_gate, &cost).unwrap();
    let off = evaluate(&model_a, &ds.test, &without, &cost).unwrap();
    let gate_drop = off.metrics.sim_w - on.metrics.sim_w;
    rep.record(
        7,
        on.costs.mean_flops < off.costs.mean_flops && gate_drop <= 0.5,
        format!(
            "(b) FLOPs {:.4e} with gate vs {:.4e} without, Sim(w) drop {gate_drop:.3}",
            on.costs.mean_flops, off.costs.mean_flops
        ),
    );

    // 7c: selector against no selector at matched epochs
    let time_b = train(&data, &ckpt_b, &cfg_b);
    let run_b = RunConfig::load(Some(&cfg_b)).unwrap();
    let model_b = load(&ckpt_b, &run_b);
    let la = evaluate_static(&model_a, &ds.test, &cost).unwrap().metrics.loss_action;
    let lb = evaluate_static(&model_b, &ds.test, &cost).unwrap().metrics.loss_action;
    rep.record(
        7,
        la <= lb,
        format!("(c) L_action {la:.6} with selector vs {lb:.6} without ({:.0}s training)", time_b.as_secs_f64()),
    );

    // 8: closed loop
    let world_set = closed_loop_worlds(&run_a, worlds).unwrap();
    let expert = eval_closed_loop(&mut ExpertPolicy, &world_set, run_a.closed_loop_max_steps, &run_a.sim()).unwrap();
    let (ss, sd) = (stat.success_rate.unwrap(), dynm.success_rate.unwrap());
    rep.record(
        8,
        expert.success_rate == 1.0 && (ss - sd).abs() <= 0.05,
        format!("expert {:.3}, static {ss:.3}, dynamic {sd:.3} on {} worlds", expert.success_rate, world_set.len()),
    );

    criterion_9(&mut rep, root);

    // 10: exit depth with and without the selector, each with its own tuned thresholds
    let th_b = root.join("th_b.json");
    tune(&ckpt_b, &data, &cfg_b, &th_b);
    let rows_a = viz(&ckpt_a, &data, &cfg_a, &th_a, &root.join("viz_a"));
    let rows_b = viz(&ckpt_b, &data, &cfg_b, &th_b, &root.join("viz_b"));
    let mean = |r: &[VizRow]| r.iter().map(|x| x.exit_layer as f64).sum::<f64>() / r.len() as f64;
    let csv_ok = root.join("viz_a/kept_vs_exit.csv").exists() && root.join("viz_b/kept_vs_exit.csv").exists();
    let (ea, eb) = (mean(&rows_a), mean(&rows_b));
    rep.record(10, csv_ok && ea <= eb, format!("mean exit layer {ea:.3} with selector vs {eb:.3} without"));

    let failed: Vec<usize> = rep.lines.iter().filter(|(_, p)| !p).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
