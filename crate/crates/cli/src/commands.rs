use std::fs;
use std::path::Path;
use std::time::Instant;

use physmamba_core::model::profile_model;
use physmamba_core::synth::{generate_dataset, read_dataset, write_dataset};
use physmamba_core::train::{evaluate, prepare_dataset, train as train_loop, Checkpoint, EvalReport};
use physmamba_core::verify::{self, Sampling};

use crate::error::{CliError, CliResult};
use crate::settings::Settings;
use crate::svg::{line_plot, Series};
use crate::ConfigArgs;

/// Reference parameter count and multiply-accumulates at 128×128×128.
pub const REFERENCE_PARAMS: f64 = 0.56e6;
pub const REFERENCE_MACS: f64 = 47.3e9;
pub const PARAM_BAND: (f64, f64) = (0.45e6, 0.70e6);
pub const MAC_BAND: (f64, f64) = (38e9, 57e9);

pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_ID: &str = "__summary__";

fn resolve(cfg: &ConfigArgs) -> CliResult<Settings> {
    Settings::resolve(cfg.config.as_deref(), &cfg.overrides)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn synth(cfg: &ConfigArgs, out: &Path) -> CliResult<()> {
    let settings = resolve(cfg)?;
    settings.synth.validate()?;
    let start = Instant::now();
    let clips = generate_dataset(&settings.synth)?;
    write_dataset(out, &clips)?;
    settings.write_snapshot(out)?;
    println!(
        "wrote {} clips of {} frames to {} in {:.1?}",
        clips.len(),
        settings.synth.frames(),
        out.display(),
        start.elapsed()
    );
    Ok(())
}

pub fn train(cfg: &ConfigArgs, data: &Path, out: &Path, resume: Option<&Path>) -> CliResult<()> {
    let settings = resolve(cfg)?;
    settings.model.validate()?;
    settings.train.validate()?;
    let records = read_dataset(data)?;
    if records.is_empty() {
        return Err(physmamba_core::Error::InsufficientData(format!("{} contains no clips", data.display())).into());
    }
    let clips = prepare_dataset(&records, &settings.model)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    settings.write_snapshot(out)?;

    let start = Instant::now();
    let outcome = train_loop(&settings.model, &settings.train, &clips, Some(out), resume)?;
    for (epoch, mean) in outcome.epoch_means() {
        println!("epoch {epoch:>3}  mean loss {mean:.6}");
    }
    let final_dir = out.join("checkpoints").join("final");
    outcome.checkpoint.save(&final_dir)?;

    let rows: Vec<(f64, f64)> = outcome.losses.iter().map(|r| (r.step as f64, r.loss)).collect();
    if !rows.is_empty() {
        let (x, y): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
        let svg = line_plot("training loss", "step", "loss", &[Series { label: "loss", x: &x, y: &y }]);
        write_text(&out.join("loss.svg"), &svg)?;
    }
    println!(
        "trained {} epochs on {} clips in {:.1?}; final checkpoint {}",
        outcome.checkpoint.epoch,
        clips.len(),
        start.elapsed(),
        final_dir.display()
    );
    Ok(())
}

pub fn eval(cfg: &ConfigArgs, ckpt: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let mut ck = Checkpoint::load(ckpt)?;
    if cfg.config.is_some() || !cfg.overrides.is_empty() {
        ck.check_model(&resolve(cfg)?.model)?;
    }
    let settings = Settings {
        model: ck.model.clone(),
        train: ck.train.clone(),
        ..Settings::default()
    };
    let records = read_dataset(data)?;
    if records.is_empty() {
        return Err(physmamba_core::Error::InsufficientData(format!("{} contains no clips", data.display())).into());
    }
    let clips = prepare_dataset(&records, &ck.model)?;
    let report = evaluate(&ck.model, &mut ck.params, &clips)?;
    settings.write_snapshot(out)?;
    write_report(&report, &clips.iter().map(|c| c.fs).collect::<Vec<_>>(), out)?;

    let m = &report.metrics;
    println!(
        "{} clips: MAE {:.3} bpm, RMSE {:.3} bpm, MAPE {:.3} %, rho {:.4}",
        report.clips.len(),
        m.mae_bpm,
        m.rmse_bpm,
        m.mape_percent,
        m.pearson_rho
    );
    Ok(())
}

/// `predictions.csv`, `metrics.csv` and one overlay plot per clip.
pub fn write_report(report: &EvalReport, fs_per_clip: &[f64], out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let path = out.join(PREDICTIONS_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::csv(&path, e))?;
    w.write_record(["clip_id", "pred_bpm", "gt_bpm"]).map_err(|e| CliError::csv(&path, e))?;
    for c in &report.clips {
        w.write_record([c.id.clone(), c.pred_bpm.to_string(), c.gt_bpm.to_string()])
            .map_err(|e| CliError::csv(&path, e))?;
    }
    let n = report.clips.len().max(1) as f64;
    let mean_pred = report.clips.iter().map(|c| c.pred_bpm).sum::<f64>() / n;
    let mean_gt = report.clips.iter().map(|c| c.gt_bpm).sum::<f64>() / n;
    w.write_record([SUMMARY_ID.to_string(), mean_pred.to_string(), mean_gt.to_string()])
        .map_err(|e| CliError::csv(&path, e))?;
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let path = out.join(METRICS_FILE);
    let m = &report.metrics;
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::csv(&path, e))?;
    w.write_record(["metric", "value"]).map_err(|e| CliError::csv(&path, e))?;
    for (k, v) in [
        ("clips", report.clips.len() as f64),
        ("mae_bpm", m.mae_bpm),
        ("rmse_bpm", m.rmse_bpm),
        ("mape_percent", m.mape_percent),
        ("pearson_rho", m.pearson_rho),
        ("rho_degenerate", m.rho_degenerate as u8 as f64),
    ] {
        w.write_record([k.to_string(), v.to_string()]).map_err(|e| CliError::csv(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    for (c, &fs) in report.clips.iter().zip(fs_per_clip) {
        let t: Vec<f64> = (0..c.pred_trace.len()).map(|i| i as f64 / fs).collect();
        let title = format!("{}: predicted {:.1} bpm, ground truth {:.1} bpm", c.id, c.pred_bpm, c.gt_bpm);
        let svg = line_plot(
            &title,
            "time (s)",
            "standardized pulse",
            &[
                Series { label: "predicted", x: &t, y: &c.pred_trace },
                Series { label: "ground truth", x: &t, y: &c.gt_trace },
            ],
        );
        write_text(&out.join("plots").join(format!("{}.svg", c.id)), &svg)?;
    }
    Ok(())
}

pub fn gradcheck(full: bool, seed: u64) -> CliResult<()> {
    let (op_sampling, model_sampling) = if full {
        (Sampling::All, Sampling::Count(400))
    } else {
        (Sampling::Count(64), Sampling::Count(130))
    };
    let start = Instant::now();
    let mut reports = verify::op_suite(op_sampling, seed)?;
    reports.push(verify::model_check(model_sampling, seed)?);
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<28} {:>6} coords  max rel err {:.2e}  fallback {:>3}  kink {:>3}  {:>8.2?}  {}",
            r.name,
            r.checked,
            r.max_rel_error,
            r.fallbacks,
            r.kinks,
            r.elapsed,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    println!(
        "{}/{} gradient checks within relative error {:e} in {:.1?}",
        reports.len() - failed.len(),
        reports.len(),
        verify::TOLERANCE,
        start.elapsed()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn scancheck(seed: u64) -> CliResult<()> {
    let reports = verify::scancheck(seed)?;
    for r in &reports {
        println!(
            "{:<24} {:>4} cases  max relative error {:.3e} (tolerance {:e})  {:>8.2?}  {}",
            r.name,
            r.cases,
            r.max_error,
            r.tolerance,
            r.elapsed,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let lti = &reports[0];
    if reports.iter().all(|r| r.passed()) {
        println!("max relative error ≤ {:e}", lti.tolerance);
        Ok(())
    } else {
        let bad: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        Err(CliError::Verification(format!("scan check failed for {}", bad.join(", "))))
    }
}

/// Parse `TxHxW`.
pub fn parse_extent(s: &str) -> CliResult<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split(['x', 'X']).collect();
    let bad = || CliError::Usage(format!("input `{s}` is not `TxHxW`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<usize> = parts.iter().map(|p| p.trim().parse().map_err(|_| bad())).collect::<CliResult<_>>()?;
    Ok((v[0], v[1], v[2]))
}

fn delta(value: f64, reference: f64) -> String {
    format!("{:+.1}%", 100.0 * (value - reference) / reference)
}

fn in_band(v: f64, band: (f64, f64)) -> &'static str {
    if v >= band.0 && v <= band.1 {
        "inside"
    } else {
        "outside"
    }
}

pub fn profile(cfg: &ConfigArgs, input: Option<&str>, layers: bool) -> CliResult<()> {
    let settings = resolve(cfg)?;
    let m = &settings.model;
    m.validate()?;
    let (t, h, w) = match input {
        Some(s) => parse_extent(s)?,
        None => (m.frames, m.height, m.width),
    };
    let p = profile_model(m, t, h, w)?;
    if layers {
        for l in &p.layers {
            println!("{:<24} {:>10} params  {:>16} MACs", l.name, l.params, l.macs);
        }
    }
    let (params, macs) = (p.params as f64, p.macs as f64);
    println!("input        {t}x{h}x{w}");
    println!(
        "parameters   {} ({:.3} M)  reference {:.2} M  delta {}  band [{:.2} M, {:.2} M] {}",
        p.params,
        params / 1e6,
        REFERENCE_PARAMS / 1e6,
        delta(params, REFERENCE_PARAMS),
        PARAM_BAND.0 / 1e6,
        PARAM_BAND.1 / 1e6,
        in_band(params, PARAM_BAND)
    );
    println!(
        "MACs         {} ({:.2} G)  reference {:.1} G  delta {}  band [{:.0} G, {:.0} G] {}",
        p.macs,
        macs / 1e9,
        REFERENCE_MACS / 1e9,
        delta(macs, REFERENCE_MACS),
        MAC_BAND.0 / 1e9,
        MAC_BAND.1 / 1e9,
        in_band(macs, MAC_BAND)
    );
    Ok(())
}

pub fn plot(csv_path: &Path, out: &Path, x: Option<&str>, y: Option<&str>) -> CliResult<()> {
    let mut r = csv::Reader::from_path(csv_path).map_err(|e| CliError::csv(csv_path, e))?;
    let headers = r.headers().map_err(|e| CliError::csv(csv_path, e))?.clone();
    if headers.len() < 2 {
        return Err(CliError::Usage(format!("{} needs at least two columns", csv_path.display())));
    }
    let column = |name: Option<&str>, default: usize| -> CliResult<usize> {
        match name {
            None => Ok(default),
            Some(n) => headers
                .iter()
                .position(|h| h == n)
                .ok_or_else(|| CliError::Usage(format!("no column `{n}` in {}", csv_path.display()))),
        }
    };
    let (xi, yi) = (column(x, 0)?, column(y, 1)?);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CliError::csv(csv_path, e))?;
        let num = |i: usize| -> Option<f64> { rec.get(i).and_then(|v| v.trim().parse().ok()) };
        match (num(xi), num(yi)) {
            (Some(a), Some(b)) => {
                xs.push(a);
                ys.push(b);
            }
            _ => log::warn!("{}: row {} is not numeric; skipped", csv_path.display(), line + 2),
        }
    }
    let svg = line_plot(
        &csv_path.display().to_string(),
        &headers[xi],
        &headers[yi],
        &[Series { label: &headers[yi], x: &xs, y: &ys }],
    );
    write_text(out, &svg)?;
    println!("plotted {} points to {}", xs.len(), out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extent_parsing() {
        assert_eq!(parse_extent("128x128x128").unwrap(), (128, 128, 128));
        assert_eq!(parse_extent("32X16x8").unwrap(), (32, 16, 8));
        for bad in ["128x128", "ax1x1", ""] {
            assert_eq!(parse_extent(bad).unwrap_err().exit_code(), crate::exit::USAGE);
        }
    }

    #[test]
    fn deltas_are_signed_percentages() {
        assert_eq!(delta(0.6e6, REFERENCE_PARAMS), "+7.1%");
        assert_eq!(delta(47.3e9 * 0.9, REFERENCE_MACS), "-10.0%");
    }
}
