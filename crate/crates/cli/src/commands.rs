use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use serde_json::json;

use neoseize::config::PipelineConfig;
use neoseize::explain::{
    build_explain_testset, channel_importance, explain_segment, importance_csv, read_importance_csv,
    render_scalp_svg, AttributionTensor,
};
use neoseize::mfcc::FeatureCache;
use neoseize::model::{init_params, load_checkpoint, save_checkpoint, SeizurePredictor};
use neoseize::pipeline::{featurize_all, subject_segments};
use neoseize::preprocess::{select_subjects, Class, MontageConfig, SegmentCache};
use neoseize::signal_io::{parse_edf, read_annotations_csv, synth_cohort, write_annotations_csv, write_edf};
use neoseize::training::{
    derive_seed, finetune, kfold_cv, lopo, train, History, MetricStats, Metrics, Sample, TrainConfig, METRIC_NAMES,
};

use crate::workspace::{cache_keys, raw_subjects, sha256_hex, write_cache, Run};
use crate::Command;

pub fn dispatch(cmd: Command, cfg: PipelineConfig, out: Option<&Path>, argv: Vec<String>) -> Result<PathBuf> {
    let mut run = Run::create(cmd.name(), cfg, out, argv)?;
    match cmd {
        Command::Synth => synth(&mut run)?,
        Command::Ingest => ingest(&mut run)?,
        Command::Featurize => featurize(&mut run)?,
        Command::TrainCv => train_cv(&mut run)?,
        Command::TrainLopo => train_lopo(&mut run)?,
        Command::Finetune => finetune_cmd(&mut run)?,
        Command::Explain => explain(&mut run)?,
        Command::ScalpPlot => scalp_plot(&mut run)?,
    }
    run.finish()
}

fn f(v: f64) -> String {
    format!("{v:.6}")
}

fn metric_cells(m: &Metrics) -> String {
    m.as_array().iter().map(|&v| f(v)).collect::<Vec<_>>().join(",")
}

fn metric_header(prefix: &str) -> String {
    METRIC_NAMES.iter().map(|n| format!("{prefix}{n}")).collect::<Vec<_>>().join(",")
}

fn history_csv(h: &History) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,lr\n");
    for e in &h.epochs {
        let _ = writeln!(s, "{},{},{},{:e}", e.epoch, f(e.train_loss), f(e.val_loss), e.lr);
    }
    s
}

fn stats_json(s: &MetricStats) -> serde_json::Value {
    let obj = |v: &[f64; 5]| {
        METRIC_NAMES.iter().zip(v).map(|(n, x)| ((*n).to_string(), json!(x))).collect::<serde_json::Map<_, _>>()
    };
    json!({ "mean": obj(&s.mean), "std": obj(&s.std) })
}

fn save_model(run: &Run, rel: &str, m: &SeizurePredictor) -> Result<()> {
    let path = run.path(rel);
    fs::create_dir_all(path.parent().expect("checkpoint paths have a parent"))?;
    save_checkpoint(m, &path)?;
    Ok(())
}

fn synth(run: &mut Run) -> Result<()> {
    let dir = run.cfg.paths.raw_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("paths.raw_dir: cannot create {}", dir.display()))?;
    let mut listing = String::from("subject,file,sha256\n");
    for (rec, ann) in synth_cohort(&run.cfg.cohort_config())? {
        let edf = write_edf(&rec)?;
        let csv = write_annotations_csv(&ann);
        for (ext, bytes) in [("edf", edf.as_slice()), ("csv", csv.as_bytes())] {
            let path = dir.join(format!("{}.{ext}", rec.subject_id));
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            let _ = writeln!(listing, "{},{},{}", rec.subject_id, path.display(), sha256_hex(bytes));
        }
        info!("wrote {}", rec.subject_id);
    }
    run.write("synth_files.csv", listing)?;
    Ok(())
}

fn ingest(run: &mut Run) -> Result<()> {
    let subjects = raw_subjects(&run.cfg)?;
    let pre = run.cfg.preprocess.to_config();
    let mut table = String::from("subject,n_preictal,n_interictal,cache,created\n");
    for s in subjects {
        let edf = run.read_input(&s.edf)?;
        let ann_bytes = run.read_input(&s.annotations)?;
        let keys = cache_keys(&run.cfg, &s.subject, &edf, &ann_bytes);
        let (n_pre, n_inter, created) = if keys.segments.is_file() {
            let cache = SegmentCache::from_bytes(&fs::read(&keys.segments)?)?;
            let n_pre = cache.segments.iter().filter(|x| x.label == Class::Preictal).count();
            (n_pre, cache.segments.len() - n_pre, false)
        } else {
            let rec = parse_edf(&edf, &s.subject).with_context(|| format!("parsing {}", s.edf.display()))?;
            if rec.fs != run.cfg.preprocess.fs {
                bail!("preprocess.fs: {} is sampled at {} Hz, configuration expects {}", s.edf.display(), rec.fs, run.cfg.preprocess.fs);
            }
            let text = String::from_utf8_lossy(&ann_bytes);
            let ann = read_annotations_csv(&text).with_context(|| format!("reading {}", s.annotations.display()))?;
            let segments = subject_segments(&rec, &ann, &pre, run.cfg.preprocess.min_overlap_s)?;
            let n_pre = segments.iter().filter(|x| x.label == Class::Preictal).count();
            let n_inter = segments.len() - n_pre;
            let cache = SegmentCache {
                subject_id: s.subject.clone(),
                fs: rec.fs / run.cfg.preprocess.downsample as u32,
                window_s: run.cfg.preprocess.window_s,
                segments,
            };
            let created = write_cache(&keys.segments, &cache.to_bytes()?)?;
            (n_pre, n_inter, created)
        };
        if n_pre == 0 || n_inter == 0 {
            warn!("subject {} lacks one class ({n_pre} preictal, {n_inter} interictal); excluded from training", s.subject);
        }
        let _ = writeln!(table, "{},{n_pre},{n_inter},{},{created}", s.subject, keys.segments.display());
    }
    run.write("segments.csv", table)?;
    Ok(())
}

fn featurize(run: &mut Run) -> Result<()> {
    let subjects = raw_subjects(&run.cfg)?;
    let fs_feat = run.cfg.preprocess.feature_fs();
    let mut table = String::from("subject,n_tensors,cache,created\n");
    for s in subjects {
        let edf = fs::read(&s.edf)?;
        let ann = fs::read(&s.annotations)?;
        let keys = cache_keys(&run.cfg, &s.subject, &edf, &ann);
        if !keys.segments.is_file() {
            bail!("no segment cache for {} ({}); run `ingest` first", s.subject, keys.segments.display());
        }
        let seg_bytes = run.read_input(&keys.segments)?;
        let (n, created) = if keys.features.is_file() {
            (FeatureCache::from_bytes(&fs::read(&keys.features)?)?.tensors.len(), false)
        } else {
            let cache = SegmentCache::from_bytes(&seg_bytes)?;
            let tensors = featurize_all(&cache.segments, &run.cfg.mfcc, fs_feat)?;
            let fc = FeatureCache { subject_id: s.subject.clone(), shape: neoseize::mfcc::MFCC_SHAPE, tensors };
            (fc.tensors.len(), write_cache(&keys.features, &fc.to_bytes()?)?)
        };
        let _ = writeln!(table, "{},{n},{},{created}", s.subject, keys.features.display());
    }
    run.write("features.csv", table)?;
    Ok(())
}

/// Feature tensors of every subject that has both classes.
fn load_dataset(run: &mut Run) -> Result<Vec<Sample>> {
    let mut per_subject: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for s in raw_subjects(&run.cfg)? {
        let edf = fs::read(&s.edf)?;
        let ann = fs::read(&s.annotations)?;
        let keys = cache_keys(&run.cfg, &s.subject, &edf, &ann);
        if !keys.features.is_file() {
            bail!("no feature cache for {} ({}); run `ingest` and `featurize` first", s.subject, keys.features.display());
        }
        let cache = FeatureCache::from_bytes(&run.read_input(&keys.features)?)?;
        per_subject.insert(s.subject, cache.tensors);
    }
    let keep = select_subjects(&per_subject);
    if keep.is_empty() {
        bail!("no subject has both preictal and interictal segments");
    }
    let data: Vec<Sample> = keep.iter().flat_map(|k| per_subject.remove(k).unwrap_or_default()).collect();
    info!("{} segments from {} subjects", data.len(), keep.len());
    Ok(data)
}

fn train_cv(run: &mut Run) -> Result<()> {
    let data = load_dataset(run)?;
    let cfg = run.cfg.train_config();
    let report = kfold_cv(&data, run.cfg.eval.folds, run.cfg.eval.trials, &cfg)?;
    let mut csv = format!("run_id,trial,fold,{},tp,fp,tn,fn\n", metric_header(""));
    for r in &report.folds {
        let c = r.metrics.confusion;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            run.run_id,
            r.trial,
            r.fold,
            metric_cells(&r.metrics),
            c.tp,
            c.fp,
            c.tn,
            c.fn_
        );
        run.write(&format!("history/trial{}_fold{}.csv", r.trial, r.fold), history_csv(&r.history))?;
        save_model(run, &format!("checkpoints/trial{}_fold{}.nsmodel", r.trial, r.fold), &r.model)?;
    }
    run.write("metrics.csv", csv)?;
    let summary = json!({
        "run_id": run.run_id,
        "folds": run.cfg.eval.folds,
        "trials": run.cfg.eval.trials,
        "n_segments": data.len(),
        "over_trials": stats_json(&report.summary),
        "over_folds": stats_json(&report.across_folds),
        "per_trial": report.per_trial.iter().map(stats_json).collect::<Vec<_>>(),
    });
    run.write("summary.json", serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn train_lopo(run: &mut Run) -> Result<()> {
    let data = load_dataset(run)?;
    let report = lopo(&data, &run.cfg.train_config())?;
    let mut csv = format!("run_id,subject,n_test,{}\n", metric_header(""));
    for r in &report.rounds {
        let _ = writeln!(csv, "{},{},{},{}", run.run_id, r.subject, r.n_test, metric_cells(&r.metrics));
        run.write(&format!("history/{}.csv", r.subject), history_csv(&r.history))?;
        save_model(run, &format!("checkpoints/lopo_{}.nsmodel", r.subject), &r.model)?;
    }
    let mean: Vec<String> = report.summary.mean.iter().map(|&v| f(v)).collect();
    let _ = writeln!(csv, "{},mean,,{}", run.run_id, mean.join(","));
    run.write("lopo.csv", csv)?;
    Ok(())
}

fn finetune_cmd(run: &mut Run) -> Result<()> {
    let dir = run.cfg.paths.pretrained_dir.clone();
    if dir.as_os_str().is_empty() {
        bail!("paths.pretrained_dir: not set; point it at a train-lopo run directory");
    }
    if !dir.join("checkpoints").is_dir() {
        bail!("paths.pretrained_dir: {} has no checkpoints directory", dir.display());
    }
    let data = load_dataset(run)?;
    let ft_cfg = TrainConfig { max_epochs: run.cfg.eval.finetune_epochs, ..run.cfg.train_config() };
    let mut subjects: Vec<String> = data.iter().map(|s| s.subject_id.clone()).collect();
    subjects.dedup();
    let mut csv = format!("run_id,subject,n_finetune,n_eval,{},{}\n", metric_header("before_"), metric_header("after_"));
    let mut rows = 0;
    for subject in &subjects {
        let ckpt = dir.join("checkpoints").join(format!("lopo_{subject}.nsmodel"));
        if !ckpt.is_file() {
            bail!("paths.pretrained_dir: no model for held-out subject {subject} ({})", ckpt.display());
        }
        run.read_input(&ckpt)?;
        let pretrained = load_checkpoint(&ckpt)?;
        let held_out: Vec<&Sample> = data.iter().filter(|s| &s.subject_id == subject).collect();
        for &n in &run.cfg.eval.finetune_sizes {
            let res = match finetune(&pretrained, &held_out, n, &ft_cfg) {
                Ok(r) => r,
                Err(e) => {
                    warn!("{subject}, {n} per class: {e}");
                    continue;
                }
            };
            let _ = writeln!(
                csv,
                "{},{subject},{},{},{},{}",
                run.run_id,
                res.split.finetune.len(),
                res.split.eval.len(),
                metric_cells(&res.before),
                metric_cells(&res.after)
            );
            save_model(run, &format!("checkpoints/ft{}_{subject}.nsmodel", 2 * n), &res.model)?;
            rows += 1;
        }
    }
    if rows == 0 {
        bail!("no subject had enough segments for any fine-tuning size in eval.finetune_sizes");
    }
    run.write("finetune.csv", csv)?;
    Ok(())
}

fn attribution_csv(a: &AttributionTensor) -> String {
    let [nc, nk, nt] = a.shape;
    let mut s = String::from("channel,coefficient,frame,value\n");
    for c in 0..nc {
        for k in 0..nk {
            for t in 0..nt {
                let _ = writeln!(s, "{c},{k},{t},{:e}", a.values[(c * nk + k) * nt + t]);
            }
        }
    }
    s
}

fn explain(run: &mut Run) -> Result<()> {
    let data = load_dataset(run)?;
    let ecfg = run.cfg.explain.clone();
    let seed = run.cfg.seed;
    let split = build_explain_testset(&data, &ecfg, seed)?;
    if split.test.is_empty() {
        bail!("no subject has {} segments per class to withhold", ecfg.n_per_class);
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| &data[i]).collect::<Vec<&Sample>>();
    let tcfg = run.cfg.train_config();
    let model = init_params(&tcfg.model_config(), derive_seed(seed, 0xE))?;
    let (model, history) = train(model, &pick(&split.train), &pick(&split.val), &tcfg)?;
    save_model(run, "checkpoints/explain.nsmodel", &model)?;
    run.write("history.csv", history_csv(&history))?;

    let mut testset = String::from("subject,label,t_start\n");
    let mut index = String::from("subject,index,t_start,f_x,f_baseline,sum,total_std_err,n_permutations,seed\n");
    let montage = MontageConfig::default();
    for (k, (subject, test)) in split.test.iter().enumerate() {
        for &i in test {
            let _ = writeln!(testset, "{subject},{},{}", data[i].label.as_u8(), data[i].t_start);
        }
        let mut attrs = Vec::new();
        for (j, &i) in test.iter().take(ecfg.n_average).enumerate() {
            let a_seed = derive_seed(seed, (k * 1000 + j) as u64);
            let a = explain_segment(&model, &data[i], ecfg.n_permutations, a_seed)?;
            run.write(&format!("attributions/{subject}_{j}.csv"), attribution_csv(&a))?;
            let _ = writeln!(
                index,
                "{subject},{j},{},{},{},{},{},{},{}",
                a.t_start,
                f(a.f_x),
                f(a.f_baseline),
                f(a.total()),
                f(a.total_std_err),
                a.n_permutations,
                a.seed
            );
            attrs.push(a);
        }
        let imp = channel_importance(&attrs, subject, ecfg.n_average)?;
        run.write(&format!("importance/{subject}.csv"), importance_csv(&imp, &montage))?;
    }
    run.write("testset.csv", testset)?;
    run.write("attributions/index.csv", index)?;
    if !split.skipped.is_empty() {
        run.write("skipped.txt", split.skipped.join("\n") + "\n")?;
    }
    Ok(())
}

fn scalp_plot(run: &mut Run) -> Result<()> {
    let dir = run.cfg.paths.explain_dir.clone();
    if dir.as_os_str().is_empty() {
        bail!("paths.explain_dir: not set; point it at an explain run directory");
    }
    let imp_dir = dir.join("importance");
    if !imp_dir.is_dir() {
        bail!("paths.explain_dir: {} has no importance directory", dir.display());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(&imp_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("paths.explain_dir: no importance tables in {}", imp_dir.display());
    }
    let montage = MontageConfig::default();
    for path in files {
        let subject = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let text = String::from_utf8(run.read_input(&path)?)?;
        let imp = read_importance_csv(&text, &subject)?;
        run.write(&format!("scalp/{subject}.svg"), render_scalp_svg(&imp, &montage)?)?;
    }
    Ok(())
}
