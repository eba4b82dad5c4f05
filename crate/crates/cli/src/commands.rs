use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use optode::baselines::{BaselineKind, Calibrator};
use optode::data::{Dataset, DayDataset};
use optode::ensemble::{self, MemberSelection, PredictionWithUncertainty};
use optode::eval::{self, DoBin, Method, Role, SplitKind, SplitPlan, UsageLog};
use optode::io::{self, Provenance};
use optode::nn::diag;
use optode::nn::serialize::{self, ModelHeader};
use optode::nn::{ModelConfig, TrainedModel};
use optode::pixel_fit::{fit_all_pixels, FitOptions, PlateauStack, SvModel};
use optode::sim::{simulate, SimConfig};
use optode::{Error, Result};

use crate::{BaselineMethod, Cli, Command, NetKind, SplitArgs};

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(Error::Precondition("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Precondition(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Simulate { reduced } => cmd_simulate(cli, *reduced),
        Command::Fit { data, days } => cmd_fit(cli, data, days),
        Command::Baseline { data, method, ridge_lambda, split } => {
            cmd_baseline(cli, data, *method, *ridge_lambda, split)
        }
        Command::Train { data, kind, epochs, split } => cmd_train(cli, data, *kind, *epochs, split),
        Command::Ensemble { data, size, epochs, split } => cmd_ensemble(cli, data, *size, *epochs, split),
        Command::Evaluate { data, models, days, diagnostics } => cmd_evaluate(cli, data, models, days, *diagnostics),
        Command::Report { run, data } => cmd_report(cli, run, data.as_deref()),
    }
}

/// Arguments of this invocation without the output path, so identical runs
/// into different directories produce identical files.
fn command_line() -> String {
    let mut out = Vec::new();
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        if a == "--out" {
            args.next();
        } else if !a.starts_with("--out=") {
            out.push(a);
        }
    }
    out.join(" ")
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    cli.global.out.as_deref().ok_or_else(|| Error::Precondition("--out is required".into()))
}

/// Creates the output directory, refusing a non-empty one or one that lies
/// inside an input directory.
fn prepare_out(out: &Path, inputs: &[&Path]) -> Result<()> {
    if out.exists() {
        let mut it = std::fs::read_dir(out).map_err(|e| io_err(out, e))?;
        if it.next().is_some() {
            return Err(Error::Precondition(format!("output directory {} is not empty", out.display())));
        }
    }
    std::fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let o = out.canonicalize().map_err(|e| io_err(out, e))?;
    for i in inputs {
        let i = i.canonicalize().map_err(|e| io_err(i, e))?;
        if o.starts_with(&i) {
            return Err(Error::Precondition(format!("output {} lies inside input {}", o.display(), i.display())));
        }
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    io::write_atomic(&out.join(name), text.as_bytes())
}

fn load_or_default<C: serde::de::DeserializeOwned + Default>(cli: &Cli) -> Result<C> {
    match &cli.global.config {
        Some(p) => io::load_config(p),
        None => Ok(C::default()),
    }
}

fn provenance<C: serde::Serialize>(seed: u64, cfg: &C, inputs: &[(&str, &Path)]) -> Result<Provenance> {
    let mut p = Provenance::new(&command_line(), seed, cfg)?;
    for (role, path) in inputs {
        p.inputs.insert(role.to_string(), io::dir_digest(path)?);
    }
    Ok(p)
}

fn cmd_simulate(cli: &Cli, reduced: bool) -> Result<()> {
    let mut cfg: SimConfig = match &cli.global.config {
        Some(p) => io::load_config(p)?,
        None if reduced => SimConfig::reduced(),
        None => SimConfig::default(),
    };
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    let out = out_dir(cli)?;
    let ds = simulate(&cfg)?;
    io::write_dataset(&ds, out)?;
    provenance(cfg.seed, &cfg, &[])?.write(out)?;
    println!("wrote {} days of {}x{} frames to {}", ds.days.len(), cfg.width, cfg.height, out.display());
    Ok(())
}

fn select_days<'a>(ds: &'a Dataset, days: &[usize]) -> Result<Vec<&'a DayDataset>> {
    if days.is_empty() {
        Ok(ds.days.iter().collect())
    } else {
        ds.select(days)
    }
}

fn cmd_fit(cli: &Cli, data: &Path, days: &[usize]) -> Result<()> {
    let ds = io::read_dataset(data)?;
    let out = out_dir(cli)?;
    prepare_out(out, &[data])?;
    let sel = select_days(&ds, days)?;
    let maps = fit_all_pixels(&PlateauStack::<f64>::from_days(&ds.meta, &sel)?, &FitOptions::default())?;
    write(out, "maps.csv", &io::maps_csv(&maps))?;
    let (w, h) = (maps.width, maps.height);
    let film = &ds.meta.film_mask;
    let masked =
        |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..w * h).map(|p| if film[p] { f(p) } else { f64::NAN }).collect() };
    let lin = |p: usize| maps.metrics(SvModel::Linear, p);
    let layers: [(&str, Vec<f64>); 5] = [
        ("k_sv", masked(&|p| lin(p).k_sv)),
        ("i0", masked(&|p| lin(p).i0)),
        ("dr", masked(&|p| lin(p).dr)),
        ("lod", masked(&|p| lin(p).lod)),
        ("r2", masked(&|p| lin(p).r2)),
    ];
    for (name, v) in &layers {
        io::write_pgm(&out.join(format!("{name}.pgm")), w, h, v)?;
    }
    let fo = FitOptions::default();
    provenance(ds.meta.seed.unwrap_or(0), &fo, &[("data", data)])?.write(out)?;
    println!(
        "fitted {} pixels: {} linear ok, {} two-site ok",
        maps.n_pixels(),
        maps.ok_count(SvModel::Linear),
        maps.ok_count(SvModel::TwoSite)
    );
    Ok(())
}

/// Explicit day lists, or last day test, the one before validation and the
/// rest training.
fn make_plan(ds: &Dataset, s: &SplitArgs) -> Result<SplitPlan> {
    let days = ds.day_indices();
    let (train, val, test) = if s.train_days.is_empty() && s.val_days.is_empty() && s.test_days.is_empty() {
        if days.len() < 3 {
            return Err(Error::Precondition("the default split needs at least 3 days".into()));
        }
        let n = days.len();
        (days[..n - 2].to_vec(), vec![days[n - 2]], vec![days[n - 1]])
    } else {
        if s.train_days.is_empty() || s.test_days.is_empty() {
            return Err(Error::Precondition("explicit splits need --train-days and --test-days".into()));
        }
        (s.train_days.clone(), s.val_days.clone(), s.test_days.clone())
    };
    let last_fit = train.iter().chain(&val).max().copied().unwrap_or(0);
    let kind = if test.iter().all(|&t| t > last_fit) { SplitKind::Chronological } else { SplitKind::LoocvDay };
    let plan = SplitPlan { kind, train_days: train, val_days: val, test_days: test };
    plan.validate()?;
    ds.select(&plan.train_days)?;
    ds.select(&plan.val_days)?;
    ds.select(&plan.test_days)?;
    Ok(plan)
}

fn predictions_csv(rows: &[(usize, Vec<f64>, Vec<f64>)], ds: &Dataset, std: Option<&[f64]>) -> String {
    let mut s =
        String::from(if std.is_some() { "day,frame,timestamp,pred,gt,std\n" } else { "day,frame,timestamp,pred,gt\n" });
    let mut k = 0;
    for (day, p, g) in rows {
        let frames = &ds.day(*day).expect("predicted days come from the dataset").frames;
        for (i, (p, g)) in p.iter().zip(g).enumerate() {
            let _ = write!(s, "{day},{i},{},{p},{g}", frames[i].timestamp);
            if let Some(sd) = std {
                let _ = write!(s, ",{}", sd[k]);
            }
            s.push('\n');
            k += 1;
        }
    }
    s
}

fn write_report(out: &Path, report: &eval::EvalReport) -> Result<()> {
    write(out, "summary.csv", &report.summary_csv())?;
    write(out, "bins.csv", &report.bins_csv())?;
    write(out, "per_day.csv", &report.per_day_csv())?;
    write(out, "histogram.csv", &report.histogram_csv())?;
    write(out, "summary.txt", &report.text_summary())
}

fn guard(out: &Path, plan: &SplitPlan, log: &UsageLog) -> Result<()> {
    log.append_to(&out.join("usage.log"))?;
    let rep = eval::leakage_guard(plan, log);
    if !rep.passed() {
        return Err(Error::Precondition(format!("leakage guard failed: {}", rep.violations.join("; "))));
    }
    Ok(())
}

fn cmd_baseline(cli: &Cli, data: &Path, method: BaselineMethod, lambda: f64, split: &SplitArgs) -> Result<()> {
    let ds = io::read_dataset(data)?;
    let out = out_dir(cli)?;
    prepare_out(out, &[data])?;
    let plan = make_plan(&ds, split)?;
    let m = match method {
        BaselineMethod::GlobalAverage => Method::Baseline(BaselineKind::GlobalAverage),
        BaselineMethod::BestPixels => Method::BestPixelsSelected,
        BaselineMethod::Ridge => Method::Baseline(BaselineKind::FeatureRidge { lambda }),
    };
    let bins = eval::default_bins_for(&ds)?;
    let mut log = UsageLog::new();
    let r = eval::run_plan(&m, &ds, &plan, &bins, false, &mut log)?;
    guard(out, &plan, &log)?;
    write(out, "predictions.csv", &predictions_csv(&r.test, &ds, None))?;
    write_report(out, &r.report)?;
    // refit outside the plan runner to store the calibrator itself
    let kind = match (&m, &r.selected) {
        (Method::Baseline(k), _) => *k,
        _ => {
            let train = ds.select(&plan.train_days)?;
            let val = ds.select(&plan.val_days)?;
            eval::select_best_pixels(&ds.meta, &train, &val, &FitOptions::default())?.2
        }
    };
    let cal = Calibrator::<f64>::fit(&kind, &ds.meta, &ds.select(&plan.train_days)?, &FitOptions::default())?;
    write(out, "calibrator.txt", &cal.to_manifest())?;
    provenance(ds.meta.seed.unwrap_or(0), &(kind, &plan), &[("data", data)])?.write(out)?;
    println!("{}: test MAE {:.4} (val MAE {:.4})", Method::Baseline(kind).name(), r.report.mae, r.val_mae);
    Ok(())
}

fn model_config(cli: &Cli, epochs: Option<usize>) -> Result<ModelConfig> {
    let mut cfg: ModelConfig = load_or_default(cli)?;
    if let Some(s) = cli.global.seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    Ok(cfg)
}

fn history_csv(t: &TrainedModel) -> String {
    let mut s = String::from("epoch,l_data,l_physics,l_biofouling,l_total,val_mae,floored_frames,monitor_mae\n");
    for r in &t.history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.epoch, r.l_data, r.l_physics, r.l_biofouling, r.l_total, r.val_mae, r.floored_frames, r.monitor_mae
        );
    }
    s
}

fn header(t: &TrainedModel, test_mae: f64) -> ModelHeader {
    let mut h = ModelHeader { epoch: t.best_epoch, ..ModelHeader::default() };
    h.metrics.insert("val_mae".into(), t.best_val_mae);
    h.metrics.insert("test_mae".into(), test_mae);
    h
}

fn cmd_train(cli: &Cli, data: &Path, kind: NetKind, epochs: Option<usize>, split: &SplitArgs) -> Result<()> {
    let ds = io::read_dataset(data)?;
    let out = out_dir(cli)?;
    prepare_out(out, &[data])?;
    let cfg = model_config(cli, epochs)?;
    let plan = make_plan(&ds, split)?;
    let m = match kind {
        NetKind::Pinn => Method::Pinn(cfg.clone()),
        NetKind::Plain => Method::Plain(cfg.clone()),
        NetKind::Pgnn => Method::Pgnn(cfg.clone()),
    };
    let bins = eval::default_bins_for(&ds)?;
    let mut log = UsageLog::new();
    let oracle = cli.global.oracle_selection;
    let r = eval::run_plan(&m, &ds, &plan, &bins, oracle, &mut log)?;
    guard(out, &plan, &log)?;
    let t = r.trained.as_ref().expect("neural methods return their model");
    serialize::save(&out.join("model.bin"), &t.model, &header(t, r.report.mae))?;
    write(out, "history.csv", &history_csv(t))?;
    write(out, "predictions.csv", &predictions_csv(&r.test, &ds, None))?;
    write_report(out, &r.report)?;
    if let Some(o) = r.oracle_test_mae {
        write(
            out,
            "oracle_summary.csv",
            &format!("selection,test_mae\noracle_epoch,{o}\nvalidation_epoch,{}\n", r.report.mae),
        )?;
    }
    provenance(cfg.seed, &(&cfg, &plan, m.name()), &[("data", data)])?.write(out)?;
    println!("{}: test MAE {:.4}, best epoch {} (val MAE {:.4})", m.name(), r.report.mae, t.best_epoch, t.best_val_mae);
    Ok(())
}

fn flat_gts(days: &[&DayDataset]) -> Vec<f64> {
    days.iter().flat_map(|d| d.frames.iter().map(|f| f.do_gt)).collect()
}

fn uncertainty_outputs(out: &Path, preds: &[PredictionWithUncertainty], gts: &[f64]) -> Result<String> {
    let mut scatter = Vec::new();
    ensemble::write_scatter_csv(&mut scatter, preds, gts).map_err(|e| io_err(&out.join("scatter.csv"), e))?;
    io::write_atomic(&out.join("scatter.csv"), &scatter)?;
    let curve = ensemble::rejection_curve(preds, gts, &ensemble::default_fractions(0.05))?;
    let mut rej = Vec::new();
    ensemble::write_rejection_csv(&mut rej, &curve).map_err(|e| io_err(&out.join("rejection.csv"), e))?;
    io::write_atomic(&out.join("rejection.csv"), &rej)?;
    Ok(match ensemble::uncertainty_error_correlation(preds, gts) {
        Ok(r) => format!("{r}"),
        Err(_) => "NaN".into(),
    })
}

fn split_rows(days: &[&DayDataset], flat: &[f64]) -> Vec<(usize, Vec<f64>, Vec<f64>)> {
    let mut k = 0;
    days.iter()
        .map(|d| {
            let n = d.frames.len();
            let p = flat[k..k + n].to_vec();
            k += n;
            (d.day_index, p, d.frames.iter().map(|f| f.do_gt).collect())
        })
        .collect()
}

fn cmd_ensemble(cli: &Cli, data: &Path, size: usize, epochs: Option<usize>, split: &SplitArgs) -> Result<()> {
    let ds = io::read_dataset(data)?;
    let out = out_dir(cli)?;
    prepare_out(out, &[data])?;
    let cfg = model_config(cli, epochs)?;
    let plan = make_plan(&ds, split)?;
    let train = ds.select(&plan.train_days)?;
    let val = ds.select(&plan.val_days)?;
    let test = ds.select(&plan.test_days)?;
    let mut log = UsageLog::new();
    for (days, role) in [(&train, Role::Train), (&val, Role::Val)] {
        for d in days.iter() {
            log.record_day(d, role);
        }
    }
    let ens = ensemble::train_ensemble(&cfg, size, cfg.seed, &ds.meta, &train, &val)?;
    let mut preds = Vec::new();
    for d in &test {
        log.record_day(d, Role::Test);
        preds.extend(ens.predict_day(d)?);
    }
    guard(out, &plan, &log)?;
    let gts = flat_gts(&test);
    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let stds: Vec<f64> = preds.iter().map(|p| p.std).collect();
    let rows = split_rows(&test, &means);
    let report = eval::evaluate_days(&rows, &eval::default_bins_for(&ds)?)?;
    write(out, "predictions.csv", &predictions_csv(&rows, &ds, Some(&stds)))?;
    write_report(out, &report)?;
    let pcc = uncertainty_outputs(out, &preds, &gts)?;
    let mut members = String::from("member,seed,best_epoch,val_mae\n");
    for (i, (m, s)) in ens.members.iter().zip(&ens.seeds).enumerate() {
        serialize::save(&out.join(format!("member_{i}.bin")), &m.model, &header(m, f64::NAN))?;
        let _ = writeln!(members, "{i},{s},{},{}", m.best_epoch, m.best_val_mae);
    }
    write(out, "members.csv", &members)?;
    let (vi, vm) = ens.best_member(MemberSelection::Validation, &test)?;
    let mut best = format!("selection,member,test_mae\nvalidation,{vi},{vm}\n");
    if cli.global.oracle_selection {
        let (oi, om) = ens.best_member(MemberSelection::OracleTest, &test)?;
        let _ = writeln!(best, "oracle_test,{oi},{om}");
    }
    write(out, "best_member.csv", &best)?;
    write(out, "uncertainty.csv", &format!("pcc_std_abs_error\n{pcc}\n"))?;
    provenance(cfg.seed, &(&cfg, &plan, size), &[("data", data)])?.write(out)?;
    println!("ensemble of {size}: test MAE {:.4}, uncertainty/error PCC {pcc}", report.mae);
    Ok(())
}

fn cmd_evaluate(cli: &Cli, data: &Path, models: &[PathBuf], days: &[usize], diagnostics: bool) -> Result<()> {
    let ds = io::read_dataset(data)?;
    let out = out_dir(cli)?;
    prepare_out(out, &[data])?;
    let sel = select_days(&ds, days)?;
    let loaded = models.iter().map(|p| serialize::load(p)).collect::<Result<Vec<_>>>()?;
    let per_model = loaded
        .iter()
        .map(|(m, _)| sel.iter().map(|d| m.predict_day(d)).collect::<Result<Vec<_>>>().map(|v| v.concat()))
        .collect::<Result<Vec<_>>>()?;
    let n = per_model[0].len();
    let preds: Vec<PredictionWithUncertainty> =
        (0..n).map(|i| ensemble::aggregate(&per_model.iter().map(|p| p[i]).collect::<Vec<_>>())).collect();
    let gts = flat_gts(&sel);
    let means: Vec<f64> = preds.iter().map(|p| p.mean).collect();
    let rows = split_rows(&sel, &means);
    let report = eval::evaluate_days(&rows, &eval::default_bins_for(&ds)?)?;
    let std = (loaded.len() > 1).then(|| preds.iter().map(|p| p.std).collect::<Vec<_>>());
    write(out, "predictions.csv", &predictions_csv(&rows, &ds, std.as_deref()))?;
    write_report(out, &report)?;
    if loaded.len() > 1 {
        let pcc = uncertainty_outputs(out, &preds, &gts)?;
        write(out, "uncertainty.csv", &format!("pcc_std_abs_error\n{pcc}\n"))?;
    }
    if diagnostics {
        for d in &sel {
            let frame =
                d.frames.last().ok_or_else(|| Error::Precondition(format!("day {} has no frames", d.day_index)))?;
            let maps = diag::diagnostic_maps(&loaded[0].0, frame)?;
            io::write_diagnostics(out, &format!("diag_day{:02}", d.day_index), &maps)?;
        }
    }
    let cfg = &loaded[0].0.config;
    let mut p = provenance(cfg.seed, &(cfg, sel.iter().map(|d| d.day_index).collect::<Vec<_>>()), &[("data", data)])?;
    for (i, m) in models.iter().enumerate() {
        let bytes = std::fs::read(m).map_err(|e| io_err(m, e))?;
        p.inputs.insert(format!("model_{i}"), io::sha256_hex(&bytes));
    }
    p.write(out)?;
    println!("{}", report.text_summary().trim_end());
    Ok(())
}

/// `(day, preds, gts)` rows from a `predictions.csv`.
fn read_predictions(path: &Path) -> Result<Vec<(usize, Vec<f64>, Vec<f64>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let bad = |line: usize, d: &str| Error::Format { path: path.to_path_buf(), detail: format!("line {line}: {d}") };
    let mut lines = text.lines();
    let head = lines.next().ok_or_else(|| bad(1, "empty file"))?;
    if !head.starts_with("day,frame,timestamp,pred,gt") {
        return Err(bad(1, "unexpected header"));
    }
    let mut rows: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 5 {
            return Err(bad(i + 2, "expected at least 5 fields"));
        }
        let day: usize = f[0].parse().map_err(|_| bad(i + 2, "bad day"))?;
        let p: f64 = f[3].parse().map_err(|_| bad(i + 2, "bad prediction"))?;
        let g: f64 = f[4].parse().map_err(|_| bad(i + 2, "bad ground truth"))?;
        match rows.last_mut() {
            Some(r) if r.0 == day => {
                r.1.push(p);
                r.2.push(g);
            }
            _ => rows.push((day, vec![p], vec![g])),
        }
    }
    if rows.is_empty() {
        return Err(bad(2, "no prediction rows"));
    }
    Ok(rows)
}

fn cmd_report(cli: &Cli, run: &Path, data: Option<&Path>) -> Result<()> {
    let rows = read_predictions(&run.join("predictions.csv"))?;
    let bins: Vec<DoBin> = match data {
        Some(d) => eval::default_bins_for(&io::read_dataset(d)?)?,
        None => eval::default_bins(&SimConfig::default().plateaus)?,
    };
    let report = eval::evaluate_days(&rows, &bins)?;
    if let Some(out) = cli.global.out.as_deref() {
        let mut inputs = vec![run];
        inputs.extend(data);
        prepare_out(out, &inputs)?;
        write_report(out, &report)?;
    }
    print!("{}", report.text_summary());
    Ok(())
}
