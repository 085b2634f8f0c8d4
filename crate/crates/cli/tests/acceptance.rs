//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use physmamba_core::model::profile_model;
use physmamba_core::signal::{diff_normalize, estimate_hr, neg_pearson};
use physmamba_core::synth::{read_dataset, write_dataset};
use physmamba_core::verify::{self, Sampling};
use physmamba_core::{Checkpoint, ModelConfig, NormMode, PhysMamba, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SCAN_TOL: f64 = 1e-8;
const SCAN_BUDGET: Duration = Duration::from_secs(10);
const ORACLE_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const GRAD_MIN_COORDS: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const PARAM_BAND: (f64, f64) = (0.45e6, 0.70e6);
const MAC_BAND: (f64, f64) = (38e9, 57e9);
const TOY_MAX_EPOCHS: usize = 10;
const TOY_MAE: f64 = 3.0;
const TOY_RHO: f64 = 0.9;
const TOY_BUDGET: Duration = Duration::from_secs(30 * 60);
const AFFINE_TOL: f64 = 1e-9;
const SCALE_TOL: f64 = 1e-6;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn scan_equivalence() -> Verdict {
    let r = verify::lti_equivalence(100, 0).map_err(err)?;
    check(
        r.cases == 100 && r.max_error <= SCAN_TOL && r.elapsed < SCAN_BUDGET,
        format!("{} systems, max relative error {:.2e} (≤ {SCAN_TOL:e}), {:.2?} (< 10 s)", r.cases, r.max_error, r.elapsed),
    )
}

fn selective_oracle() -> Verdict {
    let o = verify::selective_oracle(20, 1).map_err(err)?;
    let c = verify::constant_projection(20, 2).map_err(err)?;
    check(
        o.max_error <= ORACLE_TOL && c.max_error == 0.0,
        format!(
            "interpreter: {} cases, max error {:.2e} (≤ {ORACLE_TOL:e}); constant projection: {} cases, max difference {:e} (bitwise)",
            o.cases, o.max_error, c.cases, c.max_error
        ),
    )
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut reports = verify::op_suite(Sampling::Count(64), 0).map_err(err)?;
    let model = verify::model_check(Sampling::Count(130), 0).map_err(err)?;
    let model_coords = model.checked;
    reports.push(model);
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    let (fallbacks, kinks): (usize, usize) = reports.iter().fold((0, 0), |(f, k), r| (f + r.fallbacks, k + r.kinks));
    check(
        verify::TOLERANCE == GRAD_TOL && failed.is_empty() && model_coords >= GRAD_MIN_COORDS && elapsed < GRAD_BUDGET,
        format!(
            "{}/{} checks pass, {model_coords} network coordinates, worst relative error {worst:.2e} (≤ {GRAD_TOL:e}), \
             {fallbacks} step fallbacks, {kinks} kinks, {elapsed:.1?} (< 5 min){}",
            reports.len() - failed.len(),
            reports.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn shape_contract() -> Verdict {
    let start = Instant::now();
    let net = PhysMamba::new(ModelConfig::default()).map_err(err)?;
    let mut store = net.init_params(0).map_err(err)?;
    let x = Tensor::randn([1, 3, 128, 128, 128], &mut ChaCha8Rng::seed_from_u64(0));
    let y = net.predict(&mut store, &x, NormMode::Eval).map_err(err)?;
    let full_ok = y.shape() == [1, 128] && y.all_finite();
    let full_time = start.elapsed();

    let toy = ModelConfig { channels: 32, blocks: 2, head_width: 8, frames: 32, height: 16, width: 16, ..ModelConfig::default() };
    let mut toy_shapes = Vec::new();
    for (cfg, batch) in [(toy, 2), (verify::gradcheck_model_config(), 3)] {
        let net = PhysMamba::new(cfg.clone()).map_err(err)?;
        let mut store = net.init_params(1).map_err(err)?;
        let x = Tensor::randn([batch, 3, cfg.frames, cfg.height, cfg.width], &mut ChaCha8Rng::seed_from_u64(1));
        let y = net.predict(&mut store, &x, NormMode::Train).map_err(err)?;
        toy_shapes.push((y.shape() == [batch, cfg.frames] && y.all_finite(), format!("{:?}→{:?}", x.shape(), y.shape())));
    }
    check(
        full_ok && toy_shapes.iter().all(|(ok, _)| *ok),
        format!(
            "[1, 3, 128, 128, 128]→{:?} in {full_time:.1?}; toy {}",
            y.shape(),
            toy_shapes.iter().map(|(_, s)| s.as_str()).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn profile_bands() -> Verdict {
    let p = profile_model(&ModelConfig::default(), 128, 128, 128).map_err(err)?;
    let (params, macs) = (p.params as f64, p.macs as f64);
    check(
        (PARAM_BAND.0..=PARAM_BAND.1).contains(&params) && (MAC_BAND.0..=MAC_BAND.1).contains(&macs),
        format!(
            "{} parameters ({:+.1}% vs 0.56 M, band [0.45 M, 0.70 M]); {} MACs ({:+.1}% vs 47.3 G, band [38 G, 57 G])",
            p.params,
            100.0 * (params / 0.56e6 - 1.0),
            p.macs,
            100.0 * (macs / 47.3e9 - 1.0)
        ),
    )
}

// ---------------------------------------------------------------------------
// command-line helpers

fn physmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_physmamba"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> Result<String, String> {
    let out = physmamba(args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("`physmamba {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn metrics(dir: &Path) -> Result<BTreeMap<String, f64>, String> {
    let text = fs::read_to_string(dir.join("metrics.csv")).map_err(err)?;
    text.lines()
        .skip(1)
        .map(|l| {
            let (k, v) = l.split_once(',').ok_or_else(|| format!("bad metrics line `{l}`"))?;
            Ok((k.to_string(), v.parse::<f64>().map_err(err)?))
        })
        .collect()
}

fn toy_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.conf")
}

fn desk_scale_training() -> Verdict {
    let tmp = tempfile::tempdir().map_err(err)?;
    let conf = toy_config();
    let conf = p(&conf);
    let (train, held_out) = (tmp.path().join("train"), tmp.path().join("held_out"));
    let (run, baseline, eval) = (tmp.path().join("run"), tmp.path().join("baseline"), tmp.path().join("eval"));

    run_ok(&["synth", "--config", conf, "--out", p(&train)])?;
    run_ok(&["synth", "--config", conf, "--set", "synth.seed=1000", "--set", "synth.clips=10", "--out", p(&held_out)])?;
    let clips = read_dataset(&train).map_err(err)?.len();

    let untrained = tmp.path().join("untrained");
    run_ok(&["train", "--config", conf, "--set", "train.epochs=0", "--data", p(&train), "--out", p(&untrained)])?;
    run_ok(&["eval", "--ckpt", p(&untrained.join("checkpoints/final")), "--data", p(&held_out), "--out", p(&baseline)])?;
    let before = metrics(&baseline)?;

    let start = Instant::now();
    run_ok(&["train", "--config", conf, "--data", p(&train), "--out", p(&run)])?;
    run_ok(&["eval", "--ckpt", p(&run.join("checkpoints/final")), "--data", p(&held_out), "--out", p(&eval)])?;
    let elapsed = start.elapsed();
    let after = metrics(&eval)?;

    let ck = Checkpoint::load(&run.join("checkpoints/final")).map_err(err)?;
    let m = &ck.model;
    let toy_shape = (m.frames, m.height, m.width, m.blocks, m.channels) == (32, 16, 16, 2, 32);
    let (mae, rho) = (after["mae_bpm"], after["pearson_rho"]);
    check(
        toy_shape
            && clips == 30
            && ck.epoch <= TOY_MAX_EPOCHS
            && ck.train.windows_per_clip == 1
            && mae < TOY_MAE
            && rho > TOY_RHO
            && elapsed < TOY_BUDGET,
        format!(
            "{clips} clips, {} epochs: held-out MAE {mae:.3} bpm (< {TOY_MAE}), rho {rho:.4} (> {TOY_RHO}), \
             RMSE {:.3} bpm; untrained MAE {:.2} bpm, rho {:.3}; {elapsed:.1?} (< 30 min)",
            ck.epoch, after["rmse_bpm"], before["mae_bpm"], before["pearson_rho"]
        ),
    )
}

// ---------------------------------------------------------------------------

fn population_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn signal_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut range_ok, mut worst_affine) = (true, 0.0f64);
    for _ in 0..500 {
        let n = rng.gen_range(32..256);
        let x = Tensor::uniform([n], -5.0, 5.0, &mut rng);
        let y = Tensor::uniform([n], -5.0, 5.0, &mut rng);
        let base = neg_pearson(x.data(), y.data()).map_err(err)?;
        range_ok &= (0.0..=2.0).contains(&base);
        let (scale, shift) = (rng.gen_range(0.5..20.0), rng.gen_range(-10.0..10.0));
        let moved = neg_pearson(&x.map(|v| scale * v + shift).into_data(), y.data()).map_err(err)?;
        worst_affine = worst_affine.max((base - moved).abs());
    }

    let (fs, len): (f64, usize) = (30.0, 300);
    // bin width in bpm after zero-padding to 60 s
    let resolution = 60.0 * fs / (60.0 * fs).max(len as f64);
    let mut worst_hr = 0.0f64;
    let mut low_snr = 0;
    for i in 0..50 {
        let f = 0.8 + 1.6 * i as f64 / 49.0;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let trace: Vec<f64> = (0..len).map(|k| (2.0 * PI * f * k as f64 / fs + phase).sin()).collect();
        let est = estimate_hr(&trace, fs).map_err(err)?;
        worst_hr = worst_hr.max((est.bpm - 60.0 * f).abs());
        low_snr += est.low_snr as usize;
    }

    let (mut worst_scale, mut worst_std) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let (t, hw) = (rng.gen_range(3..12), rng.gen_range(1..4));
        let frames = Tensor::uniform([3, t, hw, hw], 0.1, 1.0, &mut rng);
        let scale = rng.gen_range(0.1..10.0);
        let a = diff_normalize(&frames).map_err(err)?;
        let b = diff_normalize(&frames.map(|v| v * scale)).map_err(err)?;
        worst_scale = worst_scale.max(a.max_abs_diff(&b));
        worst_std = worst_std.max((population_std(a.data()) - 1.0).abs());
    }
    check(
        range_ok && worst_affine <= AFFINE_TOL && worst_hr <= resolution && low_snr == 0 && worst_scale <= SCALE_TOL && worst_std <= SCALE_TOL,
        format!(
            "negative correlation in [0, 2] over 500 pairs, affine drift {worst_affine:.1e} (≤ {AFFINE_TOL:e}); \
             50 sinusoids 0.8-2.4 Hz, worst rate error {worst_hr:.3} bpm (≤ {resolution:.3}); \
             frame differences: scale drift {worst_scale:.1e}, std error {worst_std:.1e} (≤ {SCALE_TOL:e})"
        ),
    )
}

fn tree(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(err)? {
            let path = e.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(err)?;
                out.push((path.strip_prefix(dir).map_err(err)?.to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}

const TINY: [&str; 20] = [
    "--set", "model.channels=8",
    "--set", "model.blocks=1",
    "--set", "model.d_state=4",
    "--set", "model.ca_ratio=2",
    "--set", "model.head_width=4",
    "--set", "model.frames=8",
    "--set", "model.height=8",
    "--set", "model.width=8",
    "--set", "train.epochs=2",
    "--set", "train.batch_size=2",
];

fn determinism_and_formats() -> Verdict {
    let tmp = tempfile::tempdir().map_err(err)?;
    let root = tmp.path();
    let data = root.join("data");
    let small = ["--set", "synth.clips=3", "--set", "synth.height=16", "--set", "synth.width=16", "--set", "synth.duration_s=4"];
    let mut args = vec!["synth", "--out", p(&data)];
    args.extend(small);
    run_ok(&args)?;

    // seeded runs
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = root.join(name);
        let mut args = vec!["train", "--data", p(&data), "--out", p(&dir)];
        args.extend(TINY);
        run_ok(&args)?;
        runs.push(tree(&dir.join("checkpoints"))?);
        runs.push(vec![(PathBuf::from("loss.csv"), fs::read(dir.join("loss.csv")).map_err(err)?)]);
    }
    let seeded = runs[0] == runs[2] && runs[1] == runs[3];

    // round trips
    let copy = root.join("copy");
    write_dataset(&copy, &read_dataset(&data).map_err(err)?).map_err(err)?;
    let mut original = tree(&data)?;
    original.retain(|(p, _)| p != Path::new("resolved_config.txt"));
    let dataset_exact = original == tree(&copy)?;
    let ck_dir = root.join("a/checkpoints/final");
    let resaved = root.join("resaved");
    Checkpoint::load(&ck_dir).map_err(err)?.save(&resaved).map_err(err)?;
    let checkpoint_exact = tree(&ck_dir)? == tree(&resaved)?;

    // exit codes
    let missing = root.join("missing");
    let truncated = root.join("truncated");
    fs::create_dir_all(&truncated).map_err(err)?;
    for f in ["meta.json", "tensors.f32"] {
        fs::copy(ck_dir.join(f), truncated.join(f)).map_err(err)?;
    }
    let blob = truncated.join("tensors.f32");
    let bytes = fs::read(&blob).map_err(err)?;
    fs::write(&blob, &bytes[..bytes.len() / 2]).map_err(err)?;
    let diverging = root.join("diverging");
    let mut diverge = vec!["train", "--data", p(&data), "--out", p(&diverging), "--set", "train.lr=1e300", "--set", "train.epochs=3"];
    diverge.extend(&TINY[..16]);
    let out = root.join("out");
    let cases: Vec<(Vec<&str>, i32)> = vec![
        (vec!["scancheck"], 0),
        (diverge, 1),
        (vec!["profile", "--set", "model.unknown=1"], 2),
        (vec!["profile", "--set", "model.channels=6"], 2),
        (vec!["profile", "--input", "8x8"], 2),
        (vec!["eval", "--ckpt", p(&ck_dir), "--data", p(&data), "--out", p(&out), "--set", "model.channels=16"], 2),
        (vec!["no-such-command"], 2),
        (vec!["train", "--data", p(&missing), "--out", p(&out)], 3),
        (vec!["eval", "--ckpt", p(&truncated), "--data", p(&data), "--out", p(&out)], 3),
    ];
    let mut wrong = Vec::new();
    for (args, expected) in &cases {
        let got = physmamba(args).status.code();
        if got != Some(*expected) {
            wrong.push(format!("`{}` gave {got:?}, expected {expected}", args[0]));
        }
    }
    check(
        seeded && dataset_exact && checkpoint_exact && wrong.is_empty(),
        format!(
            "seeded runs identical: {seeded}; dataset rewrite byte-exact: {dataset_exact}; checkpoint resave byte-exact: {checkpoint_exact}; \
             exit codes {}/{} as expected{}",
            cases.len() - wrong.len(),
            cases.len(),
            if wrong.is_empty() { String::new() } else { format!(" ({})", wrong.join("; ")) }
        ),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("scan equivalence", scan_equivalence),
        ("selective-scan oracle", selective_oracle),
        ("gradient suite", gradient_suite),
        ("shape contract", shape_contract),
        ("profile bands", profile_bands),
        ("desk-scale end-to-end", desk_scale_training),
        ("signal properties", signal_properties),
        ("determinism and formats", determinism_and_formats),
    ];
    let mut failures = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (status, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {status}  {name}: {detail}", i + 1);
    }
    println!("{}/8 acceptance criteria pass", 8 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
