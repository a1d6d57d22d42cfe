//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `ACCEPTANCE_ONLY=1,2,10` restricts the run to the listed criteria and
//! `ACCEPTANCE_DIR` overrides where the training runs are written.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svfreg::checkpoint::Checkpoint;
use svfreg::field::{exponentiate, jacobian_stats, FieldKind, VectorField, DEFAULT_INTEGRATION_STEPS};
use svfreg::graph::Graph;
use svfreg::losses::{lncc, loss_graph, LossVars, LossWeights};
use svfreg::metrics::{assd, Stage, StageSummary};
use svfreg::networks::tem::multi_head_attention;
use svfreg::networks::{AblationFlags, AttentionScale, Ctx, Model, NetConfig};
use svfreg::params::{ParamId, ParamStore};
use svfreg::real::Real;
use svfreg::synth::{generate_pair, smooth_velocity, SynthConfig};
use svfreg::tensor::Tensor;
use svfreg::training::{evaluate_pairs, infer, read_run, PreparedPair, RunManifest};
use svfreg::volume::{load_mask, load_volume, save_mask, save_volume, Dims, SegMask, Volume};
use svfreg_oracles::{compare_gradients, oracle_assd, oracle_attention, oracle_expm, oracle_grad, oracle_lncc, FiniteDiffSpec, Scaling};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn report(line: &str) {
    // Written to the raw handle so the line survives output capture.
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
}

fn work_dir() -> PathBuf {
    std::env::var_os("ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(rand_distr::StandardNormal)
}

fn matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| std * normal(rng)).collect()).collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let data = rows.iter().flatten().copied().collect();
    Tensor::from_vec(&[rows.len(), rows[0].len()], data).unwrap()
}

fn c1_attention() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for case in 0..50 {
        let heads = 1 + case % 2;
        let k = heads * rng.random_range(1..=16 / heads);
        let l = rng.random_range(1..=8);
        let scale = if case % 4 < 2 {
            AttentionScale::PerHead
        } else {
            AttentionScale::Model
        };
        let e = matrix(&mut rng, l, k, 1.0);
        let w: Vec<Vec<Vec<f64>>> = (0..3).map(|_| matrix(&mut rng, k, k, 1.0 / (k as f64).sqrt())).collect();
        let main = multi_head_attention(&tensor(&e), &tensor(&w[0]), &tensor(&w[1]), &tensor(&w[2]), heads, scale);
        let scaling = match scale {
            AttentionScale::PerHead => Scaling::SqrtHead,
            AttentionScale::Model => Scaling::SqrtWidth,
        };
        let want = ok(oracle_attention(&e, &w[0], &w[1], &w[2], heads, scaling))?;
        for (a, b) in main.data().iter().zip(want.iter().flatten()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst <= 1e-5, "max abs diff {worst:.3e} > 1e-5");
    Ok(format!("50 cases, max abs diff {worst:.2e}"))
}

fn random_volume(rng: &mut ChaCha8Rng, dims: Dims) -> Volume {
    let data = (0..dims.len()).map(|_| rng.random::<f32>()).collect();
    Volume::new(dims, [1.0; 3], data).unwrap()
}

fn c2_lncc() -> Outcome {
    let dims = Dims::new(8, 8, 8);
    let eps = LossWeights::default().epsilon;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut worst, mut worst_self) = (0.0f64, 0.0f64);
    for case in 0..20 {
        let n = [3, 5, 9][case % 3];
        let f = random_volume(&mut rng, dims);
        let noise = random_volume(&mut rng, dims);
        let w_data = f.data().iter().zip(noise.data()).map(|(a, b)| 0.6 * a + 0.4 * b).collect();
        let w = Volume::new(dims, [1.0; 3], w_data).unwrap();
        let as64 = |v: &Volume| v.data().iter().map(|&x| x as f64).collect::<Vec<_>>();
        let main = ok(lncc(&f, &w, n, eps))?;
        let want = ok(oracle_lncc(&as64(&f), &as64(&w), dims.as_array(), n, eps))?;
        worst = worst.max((main - want).abs());
        worst_self = worst_self.max((ok(lncc(&f, &f, n, eps))? - 1.0).abs());
    }
    ensure!(worst <= 1e-5, "max diff to oracle {worst:.3e} > 1e-5");
    ensure!(worst_self <= 1e-5, "lncc(f, f) off by {worst_self:.3e}");
    Ok(format!("20 pairs, max diff {worst:.2e}, max |lncc(f,f) - 1| {worst_self:.2e}"))
}

fn random_mask(rng: &mut ChaCha8Rng, dims: Dims, spacing: [f64; 3]) -> SegMask {
    let blobs: Vec<([f64; 3], [f64; 3])> = (0..rng.random_range(1..=3))
        .map(|_| {
            let c = [0, 1, 2].map(|a| rng.random_range(3.0..dims.as_array()[a] as f64 - 3.0));
            let r = [0; 3].map(|_| rng.random_range(2.0..6.0));
            (c, r)
        })
        .collect();
    let mut data = vec![false; dims.len()];
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                let p = [x as f64, y as f64, z as f64];
                let inside = blobs
                    .iter()
                    .any(|(c, r)| (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0);
                data[dims.index(x, y, z)] = inside ^ (rng.random::<f64>() < 0.02);
            }
        }
    }
    SegMask::new(dims, spacing, data).unwrap()
}

fn c3_assd() -> Outcome {
    let dims = Dims::new(16, 16, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let spacings = [[1.0, 1.0, 1.0], [2.0, 1.0, 1.0], [1.0, 2.0, 3.0]];
    let mut largest = 0.0f64;
    for case in 0..20 {
        let sp = spacings[case % 3];
        let a = random_mask(&mut rng, dims, sp);
        let b = random_mask(&mut rng, dims, sp);
        let main = ok(assd(&a, &b))?;
        let want = ok(oracle_assd(a.data(), b.data(), dims.as_array(), sp))?;
        ensure!(main == want, "case {case}: assd {main} vs oracle {want}");
        ensure!(ok(assd(&a, &a))? == 0.0, "case {case}: assd(a, a) is not zero");
        largest = largest.max(main);
    }
    Ok(format!("20 pairs match exactly (largest ASSD {largest:.3} mm)"))
}

#[derive(Clone, Copy, Debug)]
enum Term {
    AffineSim,
    DeformSim,
    Smooth,
    AffineSeg,
    DeformSeg,
    Total,
}

impl Term {
    const ALL: [Term; 6] = [
        Term::AffineSim,
        Term::DeformSim,
        Term::Smooth,
        Term::AffineSeg,
        Term::DeformSeg,
        Term::Total,
    ];

    fn pick(&self, v: &LossVars) -> svfreg::graph::Var {
        match self {
            Term::AffineSim => v.l_a,
            Term::DeformSim => v.l_d,
            Term::Smooth => v.l_smooth,
            Term::AffineSeg => v.l_a_seg.unwrap(),
            Term::DeformSeg => v.l_d_seg.unwrap(),
            Term::Total => v.total,
        }
    }
}

struct Batch {
    dims: Dims,
    f: Vec<f64>,
    m: Vec<f64>,
    f_seg: Vec<f64>,
    m_seg: Vec<f64>,
}

impl Batch {
    fn new(dims: Dims, seeds: &[u64]) -> Self {
        let mut b = Batch {
            dims,
            f: vec![],
            m: vec![],
            f_seg: vec![],
            m_seg: vec![],
        };
        for &s in seeds {
            let p = PreparedPair::from_synthetic("g", &generate_pair(s, dims, &SynthConfig::default()).unwrap());
            b.f.extend(p.fixed.data().iter().map(|&v| v as f64));
            b.m.extend(p.moving.data().iter().map(|&v| v as f64));
            b.f_seg.extend(p.fixed_mask.as_f32().iter().map(|&v| v as f64));
            b.m_seg.extend(p.moving_mask.as_f32().iter().map(|&v| v as f64));
        }
        b
    }

    fn t<T: Real>(&self, v: &[f64]) -> Tensor<T> {
        let n = v.len() / self.dims.len();
        Tensor::from_vec(&self.dims.shape(n, 1), v.iter().map(|&x| T::lit(x)).collect()).unwrap()
    }

    /// Builds the training graph and hands it to `k`.
    fn with_losses<T: Real, R>(&self, model: &Model, store: &ParamStore<T>, k: impl FnOnce(&Graph<T>, &LossVars) -> R) -> R {
        let g = Graph::<T>::new();
        let ctx = Ctx::new(&g, store, true);
        let f = g.constant(self.t(&self.f));
        let m = g.constant(self.t(&self.m));
        let seg = Some((g.constant(self.t(&self.f_seg)), g.constant(self.t(&self.m_seg))));
        let out = model.forward(&ctx, f, m);
        let vars = loss_graph(&g, &LossWeights::default(), f, &out, seg);
        k(&g, &vars)
    }
}

fn group_of(name: &str) -> &'static str {
    let head = name.split('.').next().unwrap_or("");
    match head {
        "affine" => "affine net",
        "encoder" => "encoder",
        "tokens" => "token projection",
        "sam_fixed" | "sam_moving" | "cam" => "TEMs",
        "decoder_s" | "decoder_c" | "decoder" => "decoders",
        "gfm" => "GFM",
        _ => "other",
    }
}

fn c4_gradients() -> Outcome {
    let dims = Dims::new(8, 8, 8);
    let cfg = NetConfig::small(dims);
    let (model, mut store) = ok(Model::init::<f32>(&cfg, 404))?;
    // Zero or near-zero initial tensors would hide most of the network from
    // the check; give them small random values.
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for &id in &ids {
        let t = store.get_mut(id);
        if t.data().iter().all(|v| v.abs() < 1e-3) {
            for v in t.data_mut() {
                *v = (0.05 * normal(&mut rng)) as f32;
            }
        }
    }
    let batch = Batch::new(dims, &[41, 42]);

    let mut sample: Vec<(ParamId, usize)> = Vec::new();
    for &id in &ids {
        let len = store.get(id).len();
        for _ in 0..3.min(len) {
            sample.push((id, rng.random_range(0..len)));
        }
    }
    sample.sort();
    sample.dedup();
    let mut groups: BTreeMap<&str, usize> = BTreeMap::new();
    for (id, _) in &sample {
        *groups.entry(group_of(&store.entry(*id).name)).or_default() += 1;
    }
    for g in ["affine net", "TEMs", "decoders", "GFM"] {
        ensure!(groups.get(g).copied().unwrap_or(0) > 0, "no sampled parameter in group {g}");
    }
    ensure!(sample.len() >= 200, "only {} coordinates sampled", sample.len());

    let spec = FiniteDiffSpec {
        h: 1e-5,
        ..FiniteDiffSpec::default()
    };
    let mut s64: ParamStore<f64> = store.cast();
    let mut lines = Vec::new();
    for term in Term::ALL {
        let analytic: Vec<f64> = batch.with_losses(&model, &store, |g, v| {
            let grads = g.backward(term.pick(v));
            sample
                .iter()
                .map(|&(id, j)| grads.param(id).map_or(0.0, |t| t.data()[j] as f64))
                .collect()
        });
        let mut numeric = Vec::with_capacity(sample.len());
        for &(id, j) in &sample {
            let orig = s64.get(id).data()[j];
            let d = ok(oracle_grad(
                |p: &[f64]| {
                    s64.get_mut(id).data_mut()[j] = p[0];
                    batch.with_losses(&model, &s64, |g, v| g.item(term.pick(v)))
                },
                &[orig],
                &spec,
            ))?;
            s64.get_mut(id).data_mut()[j] = orig;
            numeric.push(d[0]);
        }
        let r = ok(compare_gradients(&analytic, &numeric, &spec))?;
        if !r.passed() {
            let (id, j) = sample[r.failures[0]];
            return Err(format!(
                "{term:?}: {} of {} coordinates fail, first `{}`[{j}] analytic {:.6e} numeric {:.6e}",
                r.failures.len(),
                r.checked,
                store.entry(id).name,
                analytic[r.failures[0]],
                numeric[r.failures[0]]
            ));
        }
        lines.push(format!("{term:?} rel {:.1e}", r.max_rel));
    }
    Ok(format!("{} coordinates over {:?}; {}", sample.len(), groups, lines.join(", ")))
}

fn c5_integration() -> Outcome {
    let steps = DEFAULT_INTEGRATION_STEPS;
    let dims = Dims::new(24, 24, 24);
    let zero = exponentiate(&VectorField::zeros(dims, FieldKind::Velocity), steps);
    ensure!(zero.data().iter().all(|&v| v == 0.0), "exp(0) is not exactly zero displacement");

    let margin = 4;
    let interior = |x: usize, y: usize, z: usize| [x, y, z].iter().zip(dims.as_array()).all(|(&c, n)| c >= margin && c + margin < n);
    let shift = [1.5f32, -0.75, 0.25];
    let v = ok(VectorField::from_fn(dims, FieldKind::Velocity, |_, _, _| shift))?;
    let u = exponentiate(&v, steps);
    let mut worst_t = 0.0f64;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                if interior(x, y, z) {
                    let a = u.at(x, y, z);
                    for c in 0..3 {
                        worst_t = worst_t.max((a[c] - shift[c]).abs() as f64);
                    }
                }
            }
        }
    }
    ensure!(worst_t <= 1e-4, "translation error {worst_t:.3e}");

    let m = [[0.03, -0.02, 0.01], [0.015, -0.025, 0.02], [-0.01, 0.02, 0.03]];
    let c = [11.5, 11.5, 11.5];
    let v = ok(VectorField::from_fn(dims, FieldKind::Velocity, |x, y, z| {
        let p = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
        [0, 1, 2].map(|r| (m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2]) as f32)
    }))?;
    let u = exponentiate(&v, steps);
    let e = ok(oracle_expm(m))?;
    let mut worst_l = 0.0f64;
    for z in 0..dims.nz {
        for y in 0..dims.ny {
            for x in 0..dims.nx {
                if !interior(x, y, z) {
                    continue;
                }
                let p = [x as f64 - c[0], y as f64 - c[1], z as f64 - c[2]];
                let a = u.at(x, y, z);
                for r in 0..3 {
                    let want: f64 = (0..3).map(|k| (e[r][k] - if r == k { 1.0 } else { 0.0 }) * p[k]).sum();
                    worst_l = worst_l.max((a[r] as f64 - want).abs());
                }
            }
        }
    }
    ensure!(worst_l <= 1e-3, "linear-field error {worst_l:.3e}");

    let sc = SynthConfig::default();
    let dims = Dims::new(32, 32, 16);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let v = smooth_velocity(dims, sc.deform_amplitude, sc.deform_smoothness, &mut rng);
        let n = jacobian_stats(&exponentiate(&v, steps), [1.0; 3]).nonpos_count;
        ensure!(n == 0, "smooth velocity {seed} folds at {n} voxels");
    }
    Ok(format!(
        "translation err {worst_t:.1e}, linear err {worst_l:.1e}, 20 smooth fields fold-free"
    ))
}

fn c6_identity() -> Outcome {
    let dims = NetConfig::default().dims;
    let pairs: Vec<PreparedPair> = (0..2)
        .map(|i| PreparedPair::from_synthetic(format!("p{i}"), &generate_pair(600 + i, dims, &SynthConfig::default()).unwrap()))
        .collect();
    for flags in AblationFlags::ablation_variants() {
        let cfg = NetConfig {
            flags,
            ..NetConfig::default()
        };
        let (model, store) = ok(Model::init::<f32>(&cfg, 606))?;
        for p in &pairs {
            let r = ok(infer(&model, &store, &p.fixed, &p.moving))?;
            ensure!(r.m_a.data() == p.moving.data(), "{}: m_a differs from m", flags.label());
            ensure!(r.m_d.data() == r.m_a.data(), "{}: m_d differs from m_a", flags.label());
        }
        for e in ok(evaluate_pairs(&model, &store, &pairs, &Stage::ALL))? {
            let key = |s: usize| {
                let r = &e.reports[s];
                (r.dice, r.prec, r.rec, r.assd_mm)
            };
            ensure!(
                key(0) == key(1) && key(1) == key(2),
                "{}: stage metrics differ for {}",
                flags.label(),
                e.pair_id
            );
        }
    }
    Ok("4 variants, 2 pairs: m_a == m, m_d == m_a, stages identical".into())
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_svfreg"))
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = cli().args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`svfreg {}` failed with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

const DESK_ARGS: [&str; 11] = [
    "--deterministic",
    "--seed",
    "7",
    "--batch-size",
    "4",
    "--max-steps",
    "2000",
    "--train-pairs",
    "200",
    "--eval-pairs",
    "20",
];

fn stage<'a>(run: &'a RunManifest, s: Stage) -> Result<&'a StageSummary, String> {
    run.summary
        .iter()
        .find(|x| x.stage == s)
        .ok_or_else(|| format!("no {s} summary in run.json"))
}

fn c7_training() -> Outcome {
    let dir = work_dir().join("ablation").join("full");
    if dir.exists() {
        ok(fs::remove_dir_all(&dir))?;
    }
    let d = dir.to_string_lossy().to_string();
    let mut args: Vec<&str> = vec!["train"];
    args.extend(DESK_ARGS);
    args.extend(["--out", &d]);
    run_cli(&args)?;
    let run = ok(read_run(&dir))?;
    let (i, a, f) = (
        stage(&run, Stage::Initial)?,
        stage(&run, Stage::Affine)?,
        stage(&run, Stage::Final)?,
    );
    let jac = f.jac_nonpos_percent.unwrap_or(f64::NAN);
    let detail = format!(
        "dice {:.4} -> {:.4} -> {:.4}, assd {:.3} -> {:.3} -> {:.3} mm, nonpos {:.3}%",
        i.dice, a.dice, f.dice, i.assd_mm, a.assd_mm, f.assd_mm, jac
    );
    ensure!(f.dice >= i.dice + 0.10, "final dice below initial + 0.10: {detail}");
    ensure!(f.dice > a.dice, "final dice not above affine: {detail}");
    ensure!(f.assd_mm <= 0.6 * i.assd_mm, "final assd above 0.6 x initial: {detail}");
    ensure!(jac <= 5.0, "non-positive Jacobian share above 5%: {detail}");
    Ok(detail)
}

fn c8_ablation() -> Outcome {
    let dir = work_dir().join("ablation");
    let d = dir.to_string_lossy().to_string();
    let mut args: Vec<&str> = vec!["ablate"];
    args.extend(DESK_ARGS);
    args.extend(["--out", &d]);
    run_cli(&args)?;
    let table = ok(fs::read_to_string(dir.join(svfreg::training::ABLATION_FILE)))?;
    let rows: Vec<Vec<&str>> = table.lines().map(|l| l.split(',').collect()).collect();
    ensure!(rows.len() == 5, "expected header and 4 rows, got {} lines", rows.len());
    let labels: Vec<String> = AblationFlags::ablation_variants().iter().map(|f| f.label()).collect();
    for (row, label) in rows[1..].iter().zip(&labels) {
        ensure!(row[0] == label, "row label `{}` instead of `{label}`", row[0]);
        ensure!(row[1..5] == rows[1][1..5], "initial columns differ for `{label}`");
    }
    let final_dice = |slug: &str| -> Result<f64, String> { Ok(stage(&ok(read_run(&dir.join(slug)))?, Stage::Final)?.dice) };
    let (full, base) = (final_dice("full")?, final_dice("base")?);
    let others: Vec<String> = ["sam", "cam"]
        .iter()
        .map(|s| final_dice(s).map(|v| format!("{s} {v:.4}")))
        .collect::<Result<_, _>>()?;
    let detail = format!("final dice: base {base:.4}, {}, full {full:.4}", others.join(", "));
    ensure!(full >= base - 0.01, "full model below base - 0.01: {detail}");
    Ok(detail)
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn c9_determinism() -> Outcome {
    let tmp = ok(tempfile::tempdir())?;
    let cfg = tmp.path().join("small.json");
    let small = serde_json::json!({
        "train": {
            "network": NetConfig::small(Dims::new(16, 16, 8)),
            "batch_size": 2,
            "max_steps": 4,
            "train_pairs": 4,
            "eval_pairs": 2,
            "checkpoint_every": 2
        }
    });
    ok(fs::write(&cfg, small.to_string()))?;
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        run_cli(&[
            "--deterministic",
            "--config",
            &cfg.to_string_lossy(),
            "train",
            "--out",
            &out.to_string_lossy(),
        ])?;
        logs.push(out);
    }
    let compare = |rel: &Path| -> Result<(), String> {
        let a = ok(fs::read(logs[0].join(rel)))?;
        let b = ok(fs::read(logs[1].join(rel)))?;
        ensure!(a == b, "{} differs between runs", rel.display());
        Ok(())
    };
    compare(Path::new("loss.csv"))?;
    let mut n_files = 1;
    for ck in ["ckpt_2", "ckpt_4"] {
        for f in files_under(&logs[0].join(ck)) {
            compare(f.strip_prefix(&logs[0]).unwrap())?;
            n_files += 1;
        }
    }

    let (model, ck) = ok(Checkpoint::load(logs[0].join("ckpt_4")))?;
    let resaved = tmp.path().join("resaved");
    ok(ck.save(&resaved))?;
    for f in files_under(&logs[0].join("ckpt_4")) {
        let name = f.file_name().unwrap();
        ensure!(
            ok(fs::read(&f))? == ok(fs::read(resaved.join(name)))?,
            "checkpoint file {name:?} changed on re-save"
        );
    }
    let (_, again) = ok(Checkpoint::load(&resaved))?;
    for (a, b) in ck.params.entries().iter().zip(again.params.entries()) {
        ensure!(
            a.value
                .data()
                .iter()
                .map(|v| v.to_bits())
                .eq(b.value.data().iter().map(|v| v.to_bits())),
            "tensor `{}` changed",
            a.name
        );
    }
    ensure!(model.config == ck.config.network, "model config differs from stored config");

    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let dims = Dims::new(7, 5, 3);
    let vol = Volume::new(
        dims,
        [0.8, 1.25, 2.5],
        (0..dims.len()).map(|_| (normal(&mut rng) * 1e3) as f32).collect(),
    )
    .unwrap();
    ok(save_volume(&vol, tmp.path().join("v.volr")))?;
    let back = ok(load_volume(tmp.path().join("v.volr")))?;
    ensure!(
        back.data().iter().map(|v| v.to_bits()).eq(vol.data().iter().map(|v| v.to_bits())) && back.spacing() == vol.spacing(),
        "volume round trip"
    );
    let mask = SegMask::new(dims, [1.0; 3], (0..dims.len()).map(|_| rng.random()).collect()).unwrap();
    ok(save_mask(&mask, tmp.path().join("m.volr")))?;
    ensure!(ok(load_mask(tmp.path().join("m.volr")))? == mask, "mask round trip");
    let field = VectorField::new(
        dims,
        FieldKind::Displacement,
        (0..3 * dims.len()).map(|_| normal(&mut rng) as f32).collect(),
    )
    .unwrap();
    ok(field.save(tmp.path().join("u.volr"), [1.0; 3]))?;
    let fback = ok(VectorField::load(tmp.path().join("u.volr"), FieldKind::Displacement))?;
    ensure!(
        fback
            .data()
            .iter()
            .map(|v| v.to_bits())
            .eq(field.data().iter().map(|v| v.to_bits())),
        "field round trip"
    );
    Ok(format!(
        "{n_files} run files byte-identical; checkpoint and .volr round trips bit-exact"
    ))
}

fn c10_jacobian() -> Outcome {
    let dims = Dims::new(12, 10, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut folded = 0;
    for _ in 0..20 {
        let std = rng.random_range(0.1..1.0);
        let u = VectorField::new(
            dims,
            FieldKind::Displacement,
            (0..3 * dims.len()).map(|_| (std * normal(&mut rng)) as f32).collect(),
        )
        .unwrap();
        let s = jacobian_stats(&u, [1.0; 3]);
        ensure!(
            s.nonpos_percent == 100.0 * s.nonpos_count as f64 / dims.len() as f64,
            "percent {} vs count {}",
            s.nonpos_percent,
            s.nonpos_count
        );
        let from_map = s.det_map.data().iter().filter(|&&d| d <= 0.0).count();
        ensure!(from_map == s.nonpos_count, "count {} vs determinant map {from_map}", s.nonpos_count);
        folded += (s.nonpos_count > 0) as usize;
    }
    let c = [5.5, 4.5, 3.5];
    let u = ok(VectorField::from_fn(dims, FieldKind::Displacement, |x, y, z| {
        [
            (0.1 * (x as f64 - c[0])) as f32,
            (0.1 * (y as f64 - c[1])) as f32,
            (0.1 * (z as f64 - c[2])) as f32,
        ]
    }))?;
    let s = jacobian_stats(&u, [1.0; 3]);
    let worst = s.det_map.data().iter().map(|&d| (d as f64 - 1.331).abs()).fold(0.0, f64::max);
    ensure!(worst <= 1e-6, "dilation determinant off by {worst:.3e}");
    ensure!(s.nonpos_count == 0, "dilation reported folds");
    Ok(format!(
        "20 fields ({folded} with folds) consistent; dilation det error {worst:.1e}"
    ))
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Option<Duration>,
    check: fn() -> Outcome,
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let secs = |s: u64| Some(Duration::from_secs(s));
    let all = [
        Criterion {
            id: 1,
            name: "attention matches oracle",
            limit: secs(10),
            check: c1_attention,
        },
        Criterion {
            id: 2,
            name: "LNCC matches oracle",
            limit: secs(30),
            check: c2_lncc,
        },
        Criterion {
            id: 3,
            name: "ASSD matches oracle",
            limit: secs(30),
            check: c3_assd,
        },
        Criterion {
            id: 4,
            name: "gradient checks",
            limit: secs(300),
            check: c4_gradients,
        },
        Criterion {
            id: 5,
            name: "diffeomorphic integration",
            limit: secs(60),
            check: c5_integration,
        },
        Criterion {
            id: 6,
            name: "identity at initialization",
            limit: secs(60),
            check: c6_identity,
        },
        // Target of 30 min is stated for 8 cores; elapsed time is reported.
        Criterion {
            id: 7,
            name: "desk-scale training",
            limit: None,
            check: c7_training,
        },
        Criterion {
            id: 8,
            name: "ablation harness",
            limit: secs(9000),
            check: c8_ablation,
        },
        Criterion {
            id: 9,
            name: "determinism and round trips",
            limit: secs(300),
            check: c9_determinism,
        },
        Criterion {
            id: 10,
            name: "Jacobian arithmetic",
            limit: secs(10),
            check: c10_jacobian,
        },
    ];
    let mut failed = 0;
    for c in all.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let took = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(d), Some(l)) if took > l => Err(format!("{d}; took {:.1}s, limit {}s", took.as_secs_f64(), l.as_secs())),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(d) => ("PASS", d),
            Err(e) => ("FAIL", e),
        };
        failed += result.is_err() as usize;
        report(&format!(
            "criterion {:>2} {tag} [{}] ({:.1}s): {detail}",
            c.id,
            c.name,
            took.as_secs_f64()
        ));
    }
    if failed > 0 {
        report(&format!("{failed} acceptance criteria failed"));
        std::process::exit(1);
    }
}
