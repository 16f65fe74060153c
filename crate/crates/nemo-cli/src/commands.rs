use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use nemo::config::{Profile, RunConfig};
use nemo::ddpm_core::LatentImage;
use nemo::localizer::{self, NeuronSet, SelectionResult};
use nemo::metrics::{
    classify_mem_type, diversity_proxy, generate, mean_pairwise_similarity, paired_similarity, quality_delta,
    random_baseline, reports_to_csv, sscd_gen_proxy, sscd_orig_proxy, EvalReport, QualityProbes,
};
use nemo::oracle::brute_force_minimal_sets;
use nemo::suite::{self, Calibration, Suite};
use nemo::toy_model::data::{holdout_prompts, memorized_image, memorized_prompt};
use nemo::toy_model::io::{load_model, model_hash, save_model};
use nemo::toy_model::train::train_with_progress;
use nemo::toy_model::{Ablation, DenoiserModel, NeuronMask, Prompt};
use serde::{Deserialize, Serialize};

use crate::rundir::{read_payload, RunDir};
use crate::settings;
use crate::{Common, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn config(common: &Common) -> Result<RunConfig> {
    let mut cfg = settings::load(common.config.as_deref())?;
    if let Some(p) = &common.seed_registry {
        cfg.seeds = settings::load_seed_registry(p)?;
    }
    if let Some(s) = common.scale {
        cfg.scale = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn model(common: &Common, cfg: &RunConfig) -> Result<DenoiserModel> {
    let path = common.model.as_ref().ok_or_else(|| usage("--model is required"))?;
    let m = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    if &m.arch != cfg.arch() {
        bail!("model {} was trained with a different architecture than the config's {:?} profile", path.display(), cfg.profile);
    }
    Ok(m)
}

/// A prompt the commands can address by id.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedPrompt {
    pub id: String,
    pub tokens: Vec<u32>,
    #[serde(skip)]
    pub prompt: Option<Prompt>,
    #[serde(skip)]
    pub image: Option<LatentImage>,
}

fn pool_prompt(cfg: &RunConfig, seed: u64, k: usize) -> Result<Prompt> {
    Ok(holdout_prompts(cfg.arch(), cfg.data(), k + 1, seed)?.pop().expect("k + 1 prompts"))
}

/// `mem<i>` duplicated prompt, `fresh<k>` / `cal<k>` / `det<k>` pool prompts.
fn resolve(cfg: &RunConfig, id: &str) -> Result<NamedPrompt> {
    let split = id.find(|c: char| c.is_ascii_digit()).ok_or_else(|| usage(format!("unknown prompt id '{id}'")))?;
    let (kind, num) = id.split_at(split);
    let k: usize = num.parse().map_err(|_| usage(format!("unknown prompt id '{id}'")))?;
    let arch = cfg.arch();
    let (prompt, image) = match kind {
        "mem" if k < cfg.data().n_memorized => (memorized_prompt(k, arch), Some(memorized_image(arch, cfg.data().seed, k))),
        "fresh" => (pool_prompt(cfg, cfg.seeds.fresh_prompts, k)?, None),
        "cal" => (pool_prompt(cfg, cfg.seeds.calibration_prompts, k)?, None),
        "det" => (pool_prompt(cfg, cfg.seeds.detection_prompts, k)?, None),
        _ => return Err(usage(format!("unknown prompt id '{id}'"))),
    };
    Ok(NamedPrompt { id: id.to_string(), tokens: prompt.tokens.clone(), prompt: Some(prompt), image })
}

fn prompts(common: &Common, cfg: &RunConfig) -> Result<Vec<NamedPrompt>> {
    if common.prompts.is_empty() {
        return (0..cfg.data().n_memorized).map(|i| resolve(cfg, &format!("mem{i}"))).collect();
    }
    common.prompts.iter().map(|id| resolve(cfg, id.trim())).collect()
}

fn run_dir(cfg: &RunConfig, command: &str) -> Result<RunDir> {
    let rd = RunDir::create(&cfg.out_dir, cfg, command)?;
    eprintln!("run directory {}", rd.path.display());
    Ok(rd)
}

fn calibration(common: &Common, m: &DenoiserModel, cfg: &RunConfig) -> Result<Calibration> {
    match &common.threshold {
        Some(p) => read_payload(p),
        None => Ok(suite::calibrate(m, cfg)?),
    }
}

#[derive(Serialize)]
struct TrainReport<'a> {
    model_file: PathBuf,
    model_hash: String,
    final_loss: f64,
    losses: &'a [(usize, f64)],
    duplicated_prompts: Vec<NamedPrompt>,
    seconds: f64,
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = config(common)?;
    let rd = run_dir(&cfg, "train")?;
    let t = Instant::now();
    let (m, log) = train_with_progress(&cfg.train, |step, loss| eprintln!("step {step:>6}  loss {loss:.5}"))?;
    let file = rd.path.join("model.bin");
    save_model(&m, &file)?;
    if let Some(extra) = &common.model {
        if let Some(dir) = extra.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        save_model(&m, extra)?;
    }
    let dup = (0..cfg.data().n_memorized).map(|i| resolve(&cfg, &format!("mem{i}"))).collect::<Result<Vec<_>>>()?;
    let report = TrainReport {
        model_file: file.clone(),
        model_hash: model_hash(&m),
        final_loss: log.final_loss,
        losses: &log.losses,
        duplicated_prompts: dup,
        seconds: t.elapsed().as_secs_f64(),
    };
    rd.write_report("train.json", &report)?;
    println!("{}", file.display());
    Ok(())
}

pub fn calibrate(common: &Common) -> Result<()> {
    let cfg = config(common)?;
    let m = model(common, &cfg)?;
    let rd = run_dir(&cfg, "calibrate")?;
    let c = suite::calibrate(&m, &cfg)?;
    let p = rd.write_report("threshold.json", &c)?;
    println!("tau_mem {:.6} (mean {:.6}, std {:.6})", c.tau.tau_mem, c.tau.mean, c.tau.std);
    println!("{}", p.display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
pub struct SelectionReport {
    pub prompt: NamedPrompt,
    pub result: SelectionResult,
}

pub fn localize(common: &Common) -> Result<()> {
    let cfg = config(common)?;
    let m = model(common, &cfg)?;
    let ps = prompts(common, &cfg)?;
    let calib = calibration(common, &m, &cfg)?;
    let rd = run_dir(&cfg, "localize")?;
    let loc = cfg.localizer();
    for p in ps {
        let r = localizer::localize(p.prompt.as_ref().expect("resolved"), &m, &calib.stats, &calib.tau, &loc)?;
        println!("{}: |s_initial| {} -> |s_final| {} {:?}", p.id, r.s_initial.len(), r.s_final.len(), r.s_final);
        rd.write_report(&format!("selection_{}.json", p.id), &SelectionReport { prompt: p, result: r })?;
    }
    println!("{}", rd.path.display());
    Ok(())
}

fn selection_for(common: &Common, m: &DenoiserModel, cfg: &RunConfig, p: &NamedPrompt, calib: &Option<Calibration>) -> Result<NeuronSet> {
    if let Some(dir) = &common.selections {
        let path = dir.join(format!("selection_{}.json", p.id));
        if !path.exists() {
            bail!("no selection report for {} in {}", p.id, dir.display());
        }
        let rep: SelectionReport = read_payload(&path)?;
        return Ok(rep.result.s_final);
    }
    let c = calib.as_ref().expect("calibration computed when no selections given");
    Ok(localizer::localize(p.prompt.as_ref().expect("resolved"), m, &c.stats, &c.tau, &cfg.localizer())?.s_final)
}

#[derive(Serialize, Deserialize)]
pub struct ImageRecord {
    pub prompt_id: String,
    /// "unmasked" or "masked"
    pub condition: String,
    pub seed: u64,
    pub scale: f64,
    pub image: LatentImage,
}

#[derive(Serialize)]
struct MitigationRow {
    prompt: NamedPrompt,
    scale: f64,
    neurons: NeuronSet,
    sscd_gen_proxy: f64,
    diversity_unmasked: f64,
    diversity_masked: f64,
    sscd_orig_unmasked: Option<f64>,
    sscd_orig_masked: Option<f64>,
}

pub fn mitigate(common: &Common) -> Result<()> {
    let cfg = config(common)?;
    let m = model(common, &cfg)?;
    let ps = prompts(common, &cfg)?;
    let calib = if common.selections.is_none() { Some(calibration(common, &m, &cfg)?) } else { None };
    let rd = run_dir(&cfg, "mitigate")?;
    let gen = cfg.gen();
    let none = Ablation::none(&m);
    let mut rows = Vec::new();
    let mut images = Vec::new();
    for p in ps {
        let set = selection_for(common, &m, &cfg, &p, &calib)?;
        let y = p.prompt.as_ref().expect("resolved");
        let mask = NeuronMask::scaled(&set, cfg.scale);
        let base = generate(&m, y, &none, &gen)?;
        let masked = generate(&m, y, &Ablation::from_mask(&m, &mask)?, &gen)?;
        let orig = |imgs: &[LatentImage]| p.image.as_ref().map(|r| nemo::metrics::max_similarity(imgs, r));
        let row = MitigationRow {
            scale: cfg.scale,
            neurons: set.clone(),
            sscd_gen_proxy: paired_similarity(&masked, &base),
            diversity_unmasked: mean_pairwise_similarity(&base),
            diversity_masked: mean_pairwise_similarity(&masked),
            sscd_orig_unmasked: orig(&base),
            sscd_orig_masked: orig(&masked),
            prompt: p.clone(),
        };
        println!(
            "{}: {} neurons at scale {}: sscd_gen {:.4}, diversity {:.4} -> {:.4}",
            p.id,
            set.len(),
            cfg.scale,
            row.sscd_gen_proxy,
            row.diversity_unmasked,
            row.diversity_masked
        );
        rows.push(row);
        for (condition, imgs) in [("unmasked", base), ("masked", masked)] {
            images.extend(gen.seeds.iter().zip(imgs).map(|(&seed, image)| ImageRecord {
                prompt_id: p.id.clone(),
                condition: condition.to_string(),
                seed,
                scale: cfg.scale,
                image,
            }));
        }
    }
    rd.write_report("mitigation.json", &rows)?;
    rd.write_report("images.json", &images)?;
    println!("{}", rd.path.display());
    Ok(())
}

fn eval_rows(s: &Suite, probes: &QualityProbes) -> Result<Vec<EvalReport>> {
    let gen = s.cfg.gen();
    let det = &s.cfg.seeds.localization;
    let mut rows = Vec::new();
    for (i, ((y, img), r)) in s.memorized.iter().zip(&s.results).enumerate() {
        let mem_type = classify_mem_type(s.model, y, Some(img), &s.calib.tau, det, &gen)?;
        let random = random_baseline(&s.model.arch, &r.s_final, s.cfg.seeds.baseline_start)?;
        for (condition, set) in [("unmasked", NeuronSet::new()), ("nemo", r.s_final.clone()), ("random", random)] {
            let mask = NeuronMask::scaled(&set, s.cfg.scale);
            rows.push(EvalReport {
                prompt_id: format!("mem{i}"),
                condition: condition.to_string(),
                sscd_orig_proxy: sscd_orig_proxy(s.model, y, img, &mask, &gen)?,
                sscd_gen_proxy: sscd_gen_proxy(s.model, y, &mask, &gen)?,
                diversity_proxy: diversity_proxy(s.model, y, &mask, &gen)?,
                quality_delta: quality_delta(s.model, &Ablation::from_mask(s.model, &mask)?, probes)?,
                deactivated_count: set.len(),
                mem_type,
            });
        }
    }
    Ok(rows)
}

/// Loads the tiny model from `path` or trains one with the tiny profile defaults.
fn tiny_model(path: Option<&Path>) -> Result<(DenoiserModel, RunConfig)> {
    let mut cfg = RunConfig::for_profile(Profile::Tiny);
    let m = match path {
        Some(p) => load_model(p).with_context(|| format!("loading tiny model {}", p.display()))?,
        None => {
            eprintln!("training tiny model for the oracle check");
            train_with_progress(&cfg.train, |_, _| {})?.0
        }
    };
    cfg.train.arch = m.arch.clone();
    Ok((m, cfg))
}

pub fn evaluate(common: &Common) -> Result<()> {
    let cfg = config(common)?;
    let m = model(common, &cfg)?;
    let (tiny, tiny_cfg) = tiny_model(common.tiny_model.as_deref())?;
    let rd = run_dir(&cfg, "evaluate")?;
    let s = Suite::new(&m, &cfg)?;
    let results = suite::run_criteria(&s, &tiny, &tiny_cfg);
    let text: String = results.iter().map(|r| r.line() + "\n").collect();
    print!("{text}");
    let rows = eval_rows(&s, &s.probes()?)?;
    rd.write_report("acceptance.json", &results)?;
    rd.write_new("acceptance.txt", text.as_bytes())?;
    rd.write_new("eval.csv", reports_to_csv(&rows)?.as_bytes())?;
    for (i, r) in s.results.iter().enumerate() {
        let p = resolve(&cfg, &format!("mem{i}"))?;
        rd.write_report(&format!("selection_{}.json", p.id), &SelectionReport { prompt: p, result: r.clone() })?;
    }
    println!("{}", rd.path.display());
    Ok(())
}

pub fn oracle(common: &Common) -> Result<()> {
    let cfg = config(common)?;
    if cfg.profile != Profile::Tiny {
        return Err(usage("the oracle runs on the tiny profile; pass a config with profile = \"tiny\""));
    }
    let m = model(common, &cfg)?;
    let ps = prompts(common, &cfg)?;
    let calib = calibration(common, &m, &cfg)?;
    let rd = run_dir(&cfg, "oracle")?;
    for p in ps {
        let cert = brute_force_minimal_sets(
            &p.id,
            p.prompt.as_ref().expect("resolved"),
            &m,
            &calib.tau,
            cfg.oracle_max_card,
            &cfg.seeds.localization,
        )?;
        println!(
            "{}: minimum cardinality {:?}, {} minimal sets, {} evaluations",
            p.id,
            cert.min_cardinality(),
            cert.minimal_sufficient_sets.len(),
            cert.evaluations
        );
        rd.write_report(&format!("oracle_{}.json", p.id), &cert)?;
    }
    println!("{}", rd.path.display());
    Ok(())
}

pub fn report(common: &Common) -> Result<()> {
    let cfg = config(common)?;
    let base = &cfg.out_dir;
    let mut dirs: Vec<PathBuf> = match std::fs::read_dir(base) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect(),
        Err(e) => bail!("reading {}: {e}", base.display()),
    };
    dirs.sort();
    for d in dirs {
        let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let mut files: Vec<String> = std::fs::read_dir(&d)?
            .filter_map(|e| e.ok().map(|e| e.file_name().to_string_lossy().into_owned()))
            .collect();
        files.sort();
        println!("{name}");
        let acc = d.join("acceptance.txt");
        if acc.exists() {
            for line in std::fs::read_to_string(&acc)?.lines() {
                println!("  {line}");
            }
        } else {
            println!("  {}", files.join(" "));
        }
    }
    Ok(())
}
