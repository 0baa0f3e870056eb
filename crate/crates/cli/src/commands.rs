use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use bitalign::ablation::{self, AblationRow, Suite};
use bitalign::checks::{gradient_suite, MODULES};
use bitalign::data::{dataset_hash, generate_synthetic, pnm, CueMode, Dataset, Sample, SyntheticSpec};
use bitalign::metrics::{self, evaluate};
use bitalign::pipeline::{count_params, fit_with, flop_estimate};
use bitalign::{BitAlignModel, ModelConfig};

use crate::{Ablate, Eval, Failure, Flops, GenData, Gradcheck, HeadStats, Infer, Params, Train};

type Outcome = Result<(), Failure>;

trait OrFail<T> {
    fn usage(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Display> OrFail<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.to_string()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.to_string()))
    }
}

fn guard(path: &Path, force: bool) -> Outcome {
    if path.exists() && !force {
        return Err(Failure::Usage(format!("{} already exists (pass --force to overwrite)", path.display())));
    }
    Ok(())
}

fn guard_dir(path: &Path, force: bool) -> Outcome {
    let occupied = std::fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(path.exists());
    if occupied && !force {
        return Err(Failure::Usage(format!("{} is not empty (pass --force to overwrite)", path.display())));
    }
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    std::fs::write(path, bytes).map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))
}

fn append_ext(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

/// Worker cap for evaluation; `BITALIGN_THREADS` overrides the core count.
fn eval_threads() -> Result<usize, Failure> {
    match std::env::var("BITALIGN_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Usage(format!("BITALIGN_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("reading {}: {e}", path.display())))
}

/// Keys assigned in config text.
fn keys_set(text: &str) -> BTreeSet<String> {
    text.lines()
        .filter_map(|l| l.split('#').next()?.split_once('='))
        .map(|(k, _)| k.trim().to_string())
        .collect()
}

/// Toy defaults, then the config file, then the dataset's classes.
fn dataset_config(config: Option<&Path>, ds: &Dataset) -> Result<(ModelConfig, BTreeSet<String>), Failure> {
    let mut cfg = ModelConfig::toy();
    let mut keys = BTreeSet::new();
    if let Some(path) = config {
        let text = read_text(path)?;
        cfg.apply_text(&text).usage()?;
        keys = keys_set(&text);
    }
    if keys.contains("text.labels") && cfg.labels != ds.meta.classes {
        eprintln!("note: text.labels replaced by the dataset classes {}", ds.meta.classes.join(", "));
    }
    cfg.labels = ds.meta.classes.clone();
    if !keys.contains("image.side") {
        cfg.image_side = ds.meta.side;
    }
    if cfg.image_side != ds.meta.side {
        return Err(Failure::Usage(format!(
            "image.side = {} but the dataset has {}-pixel images",
            cfg.image_side, ds.meta.side
        )));
    }
    Ok((cfg, keys))
}

fn open_dataset(root: &Path) -> Result<Dataset, Failure> {
    Dataset::open(root).usage()
}

fn load_split(ds: &Dataset, split: &str) -> Result<Vec<Sample>, Failure> {
    ds.load_split(split).usage()
}

fn load_model(path: &Path) -> Result<BitAlignModel, Failure> {
    BitAlignModel::load(path).usage()
}

fn check_vocabulary(model: &BitAlignModel, ds: &Dataset) -> Outcome {
    if model.config.labels != ds.meta.classes {
        return Err(Failure::Usage(format!(
            "checkpoint labels [{}] differ from dataset classes [{}]",
            model.config.labels.join(", "),
            ds.meta.classes.join(", ")
        )));
    }
    Ok(())
}

fn config_for(config: Option<&Path>, paper_scale: bool) -> Result<ModelConfig, Failure> {
    match (config, paper_scale) {
        (_, true) => Ok(ModelConfig::paper_scale()),
        (Some(p), false) => ModelConfig::parse(&read_text(p)?).usage(),
        (None, false) => Ok(ModelConfig::toy()),
    }
}

pub fn gen_data(a: GenData) -> Outcome {
    let mut spec = match &a.spec {
        Some(p) => SyntheticSpec::from_json(&read_text(p)?).usage()?,
        None => SyntheticSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(m) = &a.mode {
        spec.mode = m.parse::<CueMode>().usage()?;
    }
    if let Some(n) = a.train {
        spec.train = n;
    }
    if let Some(n) = a.val {
        spec.val = n;
    }
    spec.validate().usage()?;
    guard_dir(&a.out, a.force)?;
    let meta = generate_synthetic(&spec, &a.out).runtime()?;
    println!(
        "train={} val={} classes={} side={} mode={}",
        meta.train.len(),
        meta.val.len(),
        meta.classes.len(),
        meta.side,
        spec.mode.name()
    );
    println!("dataset sha256 {}", dataset_hash(&a.out).runtime()?);
    Ok(())
}

pub fn train(a: Train) -> Outcome {
    let ds = open_dataset(&a.data)?;
    let (mut cfg, keys) = dataset_config(a.config.as_deref(), &ds)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate().usage()?;
    let loss_path = append_ext(&a.out, ".loss.csv");
    guard(&a.out, a.force)?;
    guard(&loss_path, a.force)?;

    let tag = |key: &str| if keys.contains(key) { "" } else { " (default)" };
    println!("beta = {}{}", cfg.beta, tag("bpm.beta"));
    println!("alpha = {}{}", cfg.alpha, tag("fusion.alpha"));
    let lambda_set = ["loss.lambda_tcls", "loss.lambda_cos", "loss.lambda_c"].iter().any(|k| keys.contains(*k));
    println!(
        "lambda = ({}, {}, {}){}",
        cfg.lambda_tcls,
        cfg.lambda_cos,
        cfg.lambda_c,
        if lambda_set { "" } else { " (default)" }
    );

    let samples = load_split(&ds, "train")?;
    let mut model = BitAlignModel::build(&cfg).usage()?;
    let steps = cfg.steps;
    let every = (steps / 10).max(1);
    let trace = fit_with(&mut model, &samples, steps, |r| {
        if (r.step + 1) % every == 0 || r.step + 1 == steps {
            eprintln!("step {}/{steps} {}", r.step + 1, r.breakdown);
        }
    })
    .runtime()?;

    let ckpt = model.checkpoint();
    ckpt.save(&a.out).runtime()?;
    write(&loss_path, trace.to_csv())?;
    if let Some(last) = trace.smoothed(20).last() {
        println!("final smoothed loss {last:.6}");
    }
    println!("checkpoint sha256 {}", ckpt.sha256());
    Ok(())
}

pub fn eval(a: Eval) -> Outcome {
    let threads = eval_threads()?;
    let ds = open_dataset(&a.data)?;
    let model = load_model(&a.ckpt)?;
    check_vocabulary(&model, &ds)?;
    guard(&a.report, a.force)?;
    let samples = load_split(&ds, &a.split)?;
    let report = evaluate(&model, &samples, threads).runtime()?;
    write(&a.report, report.to_json().runtime()?)?;
    println!(
        "samples={} skipped={} kld={:.6} sim={:.6} nss={:.6}",
        report.count, report.skipped, report.mean_kld, report.mean_sim, report.mean_nss
    );
    Ok(())
}

pub fn infer(a: Infer) -> Outcome {
    let model = load_model(&a.ckpt)?;
    model.label_index(&a.label).usage()?;
    let read = |p: &Path| std::fs::read(p).map_err(|e| Failure::Usage(format!("reading {}: {e}", p.display())));
    let rgb = pnm::decode_ppm(&read(&a.image)?).map_err(|m| Failure::Usage(format!("{}: {m}", a.image.display())))?;
    let depth = pnm::decode_pgm(&read(&a.depth)?).map_err(|m| Failure::Usage(format!("{}: {m}", a.depth.display())))?;
    let side = model.config.image_side;
    if rgb.shape() != [3, side, side] || depth.shape() != [side, side] {
        return Err(Failure::Usage(format!(
            "model expects {side}×{side} inputs, got image {:?} and depth {:?}",
            &rgb.shape()[1..],
            depth.shape()
        )));
    }
    let depth = depth.reshape(vec![1, side, side]).runtime()?;
    let csv_path = a.out.with_extension("csv");
    guard(&a.out, a.force)?;
    guard(&csv_path, a.force)?;

    let map = model.infer(&rgb, &depth, &a.label).runtime()?;
    write(&a.out, pnm::encode_pgm(&map.to_tensor(), 255).runtime()?)?;
    let mut csv = String::new();
    for row in map.values.chunks(map.width) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    write(&csv_path, csv)?;
    let (r, c) = map.peak();
    println!("label={} source={} peak=({r}, {c})", map.label, map.source);
    Ok(())
}

pub fn gradcheck(a: Gradcheck) -> Outcome {
    if let Some(m) = &a.module {
        if !MODULES.contains(&m.as_str()) {
            return Err(Failure::Usage(format!("unknown module {m:?} (expected one of {})", MODULES.join(", "))));
        }
    }
    if a.seeds == 0 {
        return Err(Failure::Usage("--seeds must be at least 1".into()));
    }
    let (mut total, mut failed) = (0, 0);
    for seed in a.seed..a.seed + a.seeds {
        for r in gradient_suite(a.module.as_deref(), seed).runtime()? {
            total += 1;
            let verdict = if r.passed() { "PASS" } else { "FAIL" };
            if !r.passed() {
                failed += 1;
            }
            let rep = &r.report;
            match &rep.failure {
                Some(msg) => println!("{verdict} seed={seed} {}::{} {msg}", r.module, r.case),
                None => println!(
                    "{verdict} seed={seed} {}::{} max_rel_err={:.3e} tol={:.0e}",
                    r.module,
                    r.case,
                    rep.max_rel_err(),
                    rep.tol
                ),
            }
            if !r.passed() {
                for p in rep.params.iter().filter(|p| p.max_rel_err >= rep.tol) {
                    println!(
                        "    {} [{}] analytic={:e} numeric={:e} rel_err={:.3e}",
                        p.name, p.worst_index, p.analytic, p.numeric, p.max_rel_err
                    );
                }
            }
        }
    }
    println!("{} of {total} checks passed", total - failed);
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} gradient checks failed")));
    }
    Ok(())
}

pub fn params(a: Params) -> Outcome {
    let cfg = config_for(a.config.as_deref(), a.paper_scale)?;
    let counts = count_params(&cfg).runtime()?;
    print!("{}", counts.to_csv());
    println!("d = {}, L = {}, n = {}, beta = {}, d_down = {}, hw = {}", cfg.dim, cfg.depth, cfg.heads, cfg.beta, cfg.d_down(), cfg.hw());
    if let Some(block) = counts.bpm_block {
        let d = cfg.dim;
        let dd = cfg.d_down();
        let hw = cfg.hw();
        println!("bpm block = 2·({d}·{dd} + {dd}) + ({dd}·{d} + {d}) + {hw}·{dd} = {block}");
        let copies = if cfg.bpm_shared { 1 } else { cfg.bpm_positions.len() };
        println!("bpm chain = {copies} × {block} = {}", copies * block);
    }
    Ok(())
}

pub fn flops(a: Flops) -> Outcome {
    let cfg = config_for(a.config.as_deref(), a.paper_scale)?;
    let f = flop_estimate(&cfg).runtime()?;
    let mut rows = vec![("patch_embed".to_string(), f.patch_embed)];
    rows.extend(f.vit_blocks.iter().enumerate().map(|(i, &v)| (format!("vit_block_{}", i + 1), v)));
    rows.push(("depth_embed".into(), f.depth_embed));
    rows.extend(f.bypass.iter().enumerate().map(|(i, &v)| (format!("bypass_{}", i + 1), v)));
    rows.extend([
        ("text", f.text),
        ("fusion", f.fusion),
        ("head", f.head),
        ("backbone", f.backbone()),
        ("bpm", f.bpm()),
        ("total", f.total()),
    ].map(|(n, v)| (n.to_string(), v)));
    println!("part,flops,gflops");
    for (name, v) in rows {
        println!("{name},{v},{:.4}", v as f64 / 1e9);
    }
    Ok(())
}

pub fn head_stats(a: HeadStats) -> Outcome {
    let ds = open_dataset(&a.data)?;
    let model = load_model(&a.ckpt)?;
    check_vocabulary(&model, &ds)?;
    guard(&a.out, a.force)?;
    let samples = load_split(&ds, &a.split)?;
    let stats = metrics::head_stats(&model, &samples).runtime()?;
    write(&a.out, stats.to_csv())?;
    println!("labels={} max_spread={:.6}", stats.labels.len(), stats.max_spread());
    Ok(())
}

pub fn ablate(a: Ablate) -> Outcome {
    let suite: Suite = a.suite.parse().usage()?;
    if a.jobs == 0 {
        return Err(Failure::Usage("--jobs must be at least 1".into()));
    }
    let threads = (eval_threads()? / a.jobs).max(1);
    let ds = open_dataset(&a.data)?;
    let (mut base, _) = dataset_config(a.config.as_deref(), &ds)?;
    if let Some(s) = a.seed {
        base.seed = s;
    }
    base.steps = a.steps;
    base.validate().usage()?;
    let variants = ablation::variants(suite, &base);
    for v in &variants {
        v.config.validate().map_err(|e| Failure::Usage(format!("variant {}: {e}", v.name)))?;
    }
    let table = a.out.join(format!("{}.csv", a.suite));
    guard(&table, a.force)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::Runtime(format!("creating {}: {e}", a.out.display())))?;
    let train = load_split(&ds, "train")?;
    let val = load_split(&ds, "val")?;

    let rows: Mutex<Vec<Option<AblationRow>>> = Mutex::new(vec![None; variants.len()]);
    let next = AtomicUsize::new(0);
    let write_err: Mutex<Option<Failure>> = Mutex::new(None);
    write(&table, format!("{}\n", ablation::CSV_HEADER))?;
    std::thread::scope(|s| {
        for _ in 0..a.jobs.min(variants.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(v) = variants.get(i) else { break };
                eprintln!("[{}/{}] {}", i + 1, variants.len(), v.name);
                let row = ablation::run_variant(v, &train, &val, a.steps, threads);
                match &row.error {
                    None => eprintln!(
                        "{}: kld={:.4} sim={:.4} nss={:.4} params={}",
                        row.name, row.kld, row.sim, row.nss, row.trainable_params
                    ),
                    Some(e) => eprintln!("{}: failed: {e}", row.name),
                }
                let mut guard = rows.lock().unwrap();
                guard[i] = Some(row);
                let done: Vec<AblationRow> = guard.iter().flatten().cloned().collect();
                if let Err(f) = write(&table, ablation::to_csv(&done)) {
                    *write_err.lock().unwrap() = Some(f);
                }
            });
        }
    });
    if let Some(f) = write_err.into_inner().unwrap() {
        return Err(f);
    }
    let rows: Vec<AblationRow> = rows.into_inner().unwrap().into_iter().flatten().collect();
    print!("{}", ablation::to_csv(&rows));
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!(
            "{failed} of {} variants failed; partial table in {}",
            rows.len(),
            table.display()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keys_ignore_comments_and_blank_lines() {
        let k = keys_set("# bpm.beta = 3\nfusion.alpha = 0.5 # note\n\nseed=4\n");
        assert_eq!(k.into_iter().collect::<Vec<_>>(), ["fusion.alpha", "seed"]);
    }

    #[test]
    fn sidecar_names() {
        assert_eq!(append_ext(Path::new("run/m.bin"), ".loss.csv"), PathBuf::from("run/m.bin.loss.csv"));
    }
}
