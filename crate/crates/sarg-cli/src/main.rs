//! Command-line orchestration: runs the experiment stages against a run
//! directory with provenance manifests, skipping stages whose artifacts
//! already match the current config. One run directory has one writer,
//! enforced by a lock file; every run appends to a JSONL event stream.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use sarg::armodel::{ArModel, SamplerParams};
use sarg::curation::{load_jsonl, save_jsonl, PreferenceTriplet};
use sarg::encoder::Encoder;
use sarg::error::Error;
use sarg::eval::{CellImage, Judge, MetricsReport, ProtocolOutput};
use sarg::pipeline::{
    self, default_arms, null_style_adherence, reference_metadata, RunConfig,
};
use sarg::procgen::{Image, StyleSpec, ALL_SHAPES, IMG_SIZE};
use sarg::resampler::style_enhanced_from_image;
use sarg::tokenizer::{ImageCodebook, MultimodalTokenizer, TextVocab};

#[derive(Parser)]
#[command(name = "sarg", about = "style-aligned autoregressive image generation, desk scale")]
struct Cli {
    /// path to a JSON run configuration (see presets/)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// run directory; defaults to $SARG_RUN_ROOT/<config stem> (run root
    /// defaults to ./runs)
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// override a config key by dotted path, e.g. --set pretrain.lr=1e-3
    #[arg(long = "set", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// draw the style split and persist it
    GenData,
    /// fit the patch codebook and assemble the tokenizer
    FitTokenizer,
    /// train and freeze the conditioning encoder
    TrainEncoder,
    /// train and freeze the evaluation judge
    TrainJudge,
    /// stage 1: text-to-image pretraining on raw pairs
    Pretrain,
    /// stage 2: LoRA + resampler style finetuning
    Finetune,
    /// generate and rank preference pairs
    BuildDpoData,
    /// stage 3: preference optimization
    Dpo,
    /// generate one image from a prompt and a style reference
    Infer {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        style_image: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        alpha: f32,
        #[arg(long, default_value_t = 0.05)]
        gamma: f32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        temperature: f32,
        #[arg(long, default_value_t = 1)]
        top_k: usize,
    },
    /// run the held-out evaluation protocol on the latest checkpoint
    Eval,
    /// train and evaluate every ablation arm
    Ablate {
        /// comma-separated seeds, e.g. 1,2,3 (defaults to the config seed)
        #[arg(long)]
        seeds: Option<String>,
    },
    /// run all stages in order
    Pipeline,
}

fn main() {
    let code = match run() {
        Ok(()) => 0,
        Err(e) => {
            // machine-readable error contract on stderr
            let kind = match &e {
                Error::InvalidSpec(_) => "invalid_spec",
                Error::ShapeMismatch(_) => "shape_mismatch",
                Error::InvalidArgument(_) => "invalid_argument",
                Error::StageContract(_) => "stage_contract",
                Error::TokenizerHashMismatch { .. } => "tokenizer_hash_mismatch",
                Error::UnknownWord(_) => "unknown_word",
                Error::EmptyDataset(_) => "empty_dataset",
                Error::Io(_) => "io",
                Error::Serde(_) => "serde",
            };
            eprintln!(
                "{}",
                serde_json::json!({"error": e.to_string(), "kind": kind})
            );
            1
        }
    };
    std::process::exit(code);
}

type Result<T> = std::result::Result<T, Error>;

fn run() -> Result<()> {
    let cli = Cli::parse();
    let cfg_path = cli
        .config
        .clone()
        .ok_or_else(|| Error::InvalidArgument("--config is required".into()))?;
    let cfg = load_config(&cfg_path, &cli.overrides)?;
    let run_dir = match &cli.run_dir {
        Some(d) => d.clone(),
        None => {
            let root =
                std::env::var("SARG_RUN_ROOT").unwrap_or_else(|_| "runs".to_string());
            let stem = cfg_path
                .file_stem()
                .map(|s| s.to_string_lossy().to_string())
                .unwrap_or_else(|| "run".to_string());
            PathBuf::from(root).join(stem)
        }
    };
    std::fs::create_dir_all(&run_dir)?;
    let _lock = LockGuard::acquire(&run_dir)?;
    // snapshot the effective config into the run directory
    std::fs::write(
        run_dir.join("config.json"),
        serde_json::to_vec_pretty(&cfg)?,
    )?;
    let mut runner = Runner {
        cfg,
        dir: run_dir,
    };
    match cli.cmd {
        Cmd::GenData => runner.gen_data().map(|_| ()),
        Cmd::FitTokenizer => runner.fit_tokenizer().map(|_| ()),
        Cmd::TrainEncoder => runner.train_encoder().map(|_| ()),
        Cmd::TrainJudge => runner.train_judge().map(|_| ()),
        Cmd::Pretrain => runner.pretrain().map(|_| ()),
        Cmd::Finetune => runner.finetune().map(|_| ()),
        Cmd::BuildDpoData => runner.build_dpo_data().map(|_| ()),
        Cmd::Dpo => runner.dpo().map(|_| ()),
        Cmd::Infer {
            prompt,
            style_image,
            alpha,
            gamma,
            out,
            temperature,
            top_k,
        } => runner.infer(&prompt, &style_image, alpha, gamma, &out, temperature, top_k),
        Cmd::Eval => runner.eval().map(|_| ()),
        Cmd::Ablate { seeds } => runner.ablate(seeds.as_deref()),
        Cmd::Pipeline => runner.pipeline(),
    }
}

/// Parse the config file, apply dotted-path overrides, then deserialize
/// strictly (unknown keys rejected).
fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut value: serde_json::Value = serde_json::from_str(&text)?;
    for ov in overrides {
        let (key, raw) = ov.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("override {ov:?} must look like key.path=value"))
        })?;
        let parsed: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut node = &mut value;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if i + 1 == parts.len() {
                node[part] = parsed.clone();
            } else {
                node = node
                    .get_mut(*part)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown config path {key}")))?;
            }
        }
    }
    let cfg: RunConfig = serde_json::from_value(value)?;
    cfg.validate()?;
    Ok(cfg)
}

/// One run directory, one writer.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<LockGuard> {
        let path = dir.join("run.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(LockGuard { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::InvalidArgument(
                format!(
                    "run directory is locked by another writer ({}); remove run.lock if stale",
                    path.display()
                ),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

struct Runner {
    cfg: RunConfig,
    dir: PathBuf,
}

fn sha(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl Runner {
    fn config_hash(&self) -> String {
        sha(&serde_json::to_vec(&self.cfg).expect("config serializes"))
    }

    fn event(&self, stage: &str, event: &str, data: serde_json::Value) {
        use std::io::Write;
        let ts = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let line = serde_json::json!({"ts": ts, "stage": stage, "event": event, "data": data});
        if let Ok(mut f) = std::fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(self.dir.join("events.jsonl"))
        {
            let _ = writeln!(f, "{line}");
        }
    }

    /// A stage is complete when its manifest records the current config
    /// hash. Returns true when the stage can be skipped.
    fn stage_done(&self, stage: &str) -> bool {
        let p = self.dir.join(stage).join("stage.json");
        let Ok(bytes) = std::fs::read(&p) else {
            return false;
        };
        let Ok(v) = serde_json::from_slice::<serde_json::Value>(&bytes) else {
            return false;
        };
        v["config_hash"].as_str() == Some(self.config_hash().as_str())
    }

    /// Write the stage manifest: config snapshot hash plus the hashes of the
    /// artifacts this stage depends on and produced (the provenance chain).
    fn finish_stage(&self, stage: &str, extra: serde_json::Value) -> Result<()> {
        let dir = self.dir.join(stage);
        std::fs::create_dir_all(&dir)?;
        let manifest = serde_json::json!({
            "config_hash": self.config_hash(),
            "seed": self.cfg.seed,
            "provenance": extra,
        });
        std::fs::write(dir.join("stage.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    fn gen_data(&mut self) -> Result<(Vec<StyleSpec>, Vec<StyleSpec>)> {
        if self.stage_done("data") {
            self.event("data", "skipped", serde_json::json!({}));
            return self.load_styles();
        }
        let t = Instant::now();
        let (train, held) = sarg::procgen::make_style_set(
            self.cfg.data.n_styles,
            sarg::rng::subseed(self.cfg.seed, "experiment-styles"),
            self.cfg.data.holdout_styles,
        )?;
        let dir = self.dir.join("data");
        std::fs::create_dir_all(&dir)?;
        std::fs::write(
            dir.join("styles.json"),
            serde_json::to_vec_pretty(&serde_json::json!({"train": train, "held": held}))?,
        )?;
        self.finish_stage(
            "data",
            serde_json::json!({"train_styles": train.len(), "held_styles": held.len()}),
        )?;
        self.event(
            "data",
            "done",
            serde_json::json!({"secs": t.elapsed().as_secs_f64()}),
        );
        Ok((train, held))
    }

    fn load_styles(&self) -> Result<(Vec<StyleSpec>, Vec<StyleSpec>)> {
        let v: serde_json::Value =
            serde_json::from_slice(&std::fs::read(self.dir.join("data/styles.json")).map_err(
                |_| Error::InvalidArgument("missing styles; run gen-data first".into()),
            )?)?;
        Ok((
            serde_json::from_value(v["train"].clone())?,
            serde_json::from_value(v["held"].clone())?,
        ))
    }

    fn fit_tokenizer(&mut self) -> Result<MultimodalTokenizer> {
        if self.stage_done("tokenizer") {
            self.event("tokenizer", "skipped", serde_json::json!({}));
            return self.load_tokenizer();
        }
        let t = Instant::now();
        let tok = pipeline::build_tokenizer(&self.cfg)?;
        tok.codebook.save(&self.dir.join("tokenizer"))?;
        self.finish_stage(
            "tokenizer",
            serde_json::json!({"tokenizer_hash": tok.hash(), "K": tok.codebook.k}),
        )?;
        self.event(
            "tokenizer",
            "done",
            serde_json::json!({"secs": t.elapsed().as_secs_f64(), "hash": tok.hash()}),
        );
        Ok(tok)
    }

    fn load_tokenizer(&self) -> Result<MultimodalTokenizer> {
        let cb = ImageCodebook::load(&self.dir.join("tokenizer")).map_err(|_| {
            Error::InvalidArgument("missing tokenizer; run fit-tokenizer first".into())
        })?;
        Ok(MultimodalTokenizer::new(
            TextVocab::default_vocab(),
            cb,
            self.cfg.model.style_tokens,
        ))
    }

    fn train_encoder(&mut self) -> Result<Encoder> {
        if self.stage_done("encoder") {
            self.event("encoder", "skipped", serde_json::json!({}));
            return Encoder::load(&self.dir.join("encoder"));
        }
        let t = Instant::now();
        let enc = pipeline::train_conditioning_encoder(&self.cfg)?;
        enc.save(&self.dir.join("encoder"))?;
        self.finish_stage(
            "encoder",
            serde_json::json!({"weights_hash": enc.weights_hash()}),
        )?;
        self.event(
            "encoder",
            "done",
            serde_json::json!({"secs": t.elapsed().as_secs_f64()}),
        );
        Ok(enc)
    }

    fn train_judge(&mut self) -> Result<Judge> {
        if self.stage_done("judge") {
            self.event("judge", "skipped", serde_json::json!({}));
            return Ok(Judge {
                enc: Encoder::load(&self.dir.join("judge"))?,
            });
        }
        let tok = self.fit_tokenizer()?;
        let t = Instant::now();
        let judge = pipeline::train_judge(&self.cfg, &tok)?;
        judge.enc.save(&self.dir.join("judge"))?;
        self.finish_stage(
            "judge",
            serde_json::json!({
                "weights_hash": judge.weights_hash(),
                "tokenizer_hash": tok.hash(),
            }),
        )?;
        self.event(
            "judge",
            "done",
            serde_json::json!({"secs": t.elapsed().as_secs_f64()}),
        );
        Ok(judge)
    }

    fn pretrain(&mut self) -> Result<ArModel> {
        if self.stage_done("pretrain") {
            self.event("pretrain", "skipped", serde_json::json!({}));
            return ArModel::load(&self.dir.join("pretrain"));
        }
        let tok = self.fit_tokenizer()?;
        let t = Instant::now();
        let model = pipeline::pretrain_stage(&self.cfg, &tok)?;
        model.save(&self.dir.join("pretrain"))?;
        self.finish_stage(
            "pretrain",
            serde_json::json!({
                "weights_hash": model.weights_hash(),
                "tokenizer_hash": tok.hash(),
            }),
        )?;
        self.event(
            "pretrain",
            "done",
            serde_json::json!({"secs": t.elapsed().as_secs_f64()}),
        );
        Ok(model)
    }

    fn finetune(&mut self) -> Result<ArModel> {
        if self.stage_done("finetune") {
            self.event("finetune", "skipped", serde_json::json!({}));
            return ArModel::load(&self.dir.join("finetune"));
        }
        let (train_styles, _) = self.gen_data()?;
        let tok = self.fit_tokenizer()?;
        let enc = self.train_encoder()?;
        let base = self.pretrain()?;
        let t = Instant::now();
        let model = pipeline::finetune_arm(
            &base,
            &self.cfg,
            &tok,
            &enc,
            &train_styles,
            self.cfg.data.ratio,
        )?;
        model.save(&self.dir.join("finetune"))?;
        self.finish_stage(
            "finetune",
            serde_json::json!({
                "weights_hash": model.weights_hash(),
                "parent_hash": model.parent_hash,
                "encoder_hash": enc.weights_hash(),
            }),
        )?;
        self.event(
            "finetune",
            "done",
            serde_json::json!({"secs": t.elapsed().as_secs_f64()}),
        );
        Ok(model)
    }

    fn build_dpo_data(&mut self) -> Result<Vec<PreferenceTriplet>> {
        let path = self.dir.join("dpo-data/triplets.jsonl");
        if self.stage_done("dpo-data") {
            self.event("dpo-data", "skipped", serde_json::json!({}));
            return load_jsonl(&path);
        }
        let (train_styles, _) = self.gen_data()?;
        let tok = self.fit_tokenizer()?;
        let enc = self.train_encoder()?;
        let judge = self.train_judge()?;
        let model = self.finetune()?;
        let t = Instant::now();
        let seed = sarg::rng::subseed(self.cfg.seed, "dpo");
        let refs: Vec<_> = train_styles
            .iter()
            .flat_map(|style| {
                (0..self.cfg.dpo.refs_per_style).map(move |j| {
                    let s = sarg::rng::subseed(seed, &format!("ref-{}-{j}", style.style_id));
                    let content = sarg::procgen::sample_content_for_shape(
                        ALL_SHAPES[j % ALL_SHAPES.len()],
                        &mut sarg::rng::rng_from(sarg::rng::subseed(s, "content")),
                    );
                    sarg::procgen::render_unchecked(style, &content, s)
                })
            })
            .collect();
        let prompts: Vec<String> = ALL_SHAPES
            .iter()
            .map(|s| format!("a {}", s.name()))
            .collect();
        let sampler = SamplerParams {
            temperature: self.cfg.dpo.temperature,
            top_k: self.cfg.dpo.top_k,
            seed: 0,
        };
        let (triplets, dropped) = sarg::curation::build_dpo_pairs(
            &model,
            &tok,
            &enc,
            &judge,
            &refs,
            &prompts,
            self.cfg.finetune.alpha,
            self.cfg.eval.gamma,
            &sampler,
            sarg::rng::subseed(seed, "pairs"),
            self.cfg.dpo.tie_threshold,
        )?;
        std::fs::create_dir_all(self.dir.join("dpo-data"))?;
        save_jsonl(&triplets, &path)?;
        self.finish_stage(
            "dpo-data",
            serde_json::json!({
                "triplets": triplets.len(),
                "ties_dropped": dropped,
                "model_hash": model.weights_hash(),
            }),
        )?;
        self.event(
            "dpo-data",
            "done",
            serde_json::json!({"secs": t.elapsed().as_secs_f64(), "triplets": triplets.len()}),
        );
        Ok(triplets)
    }

    fn dpo(&mut self) -> Result<ArModel> {
        if self.stage_done("dpo") {
            self.event("dpo", "skipped", serde_json::json!({}));
            return ArModel::load(&self.dir.join("dpo"));
        }
        let tok = self.fit_tokenizer()?;
        let model = self.finetune()?;
        let triplets = self.build_dpo_data()?;
        let t = Instant::now();
        let n_held = ((triplets.len() as f32 * self.cfg.dpo.holdout_fraction) as usize)
            .min(triplets.len().saturating_sub(1));
        let (held, train) = triplets.split_at(n_held);
        let dpo_cfg = sarg::dpo::DpoConfig {
            beta: self.cfg.dpo.beta,
            lr: self.cfg.dpo.lr,
            steps: self.cfg.dpo.steps,
            batch_size: self.cfg.dpo.batch,
            seed: sarg::rng::subseed(self.cfg.seed, "dpo-train"),
        };
        let (tuned, _curve) = sarg::dpo::dpo_train(&model, &tok, train, &dpo_cfg)?;
        let margin_set = if held.is_empty() { train } else { held };
        let margin =
            sarg::dpo::implicit_reward_margin(&tuned, &model, &tok, margin_set, self.cfg.dpo.beta)?;
        tuned.save(&self.dir.join("dpo"))?;
        self.finish_stage(
            "dpo",
            serde_json::json!({
                "weights_hash": tuned.weights_hash(),
                "parent_hash": tuned.parent_hash,
                "heldout_margin": margin,
            }),
        )?;
        self.event(
            "dpo",
            "done",
            serde_json::json!({"secs": t.elapsed().as_secs_f64(), "heldout_margin": margin}),
        );
        Ok(tuned)
    }

    /// The newest checkpoint: preference-optimized if present, otherwise the
    /// style finetune.
    fn latest_model(&mut self) -> Result<ArModel> {
        if self.stage_done("dpo") {
            ArModel::load(&self.dir.join("dpo"))
        } else if self.cfg.dpo.enabled {
            self.dpo()
        } else {
            self.finetune()
        }
    }

    fn eval(&mut self) -> Result<MetricsReport> {
        let (_, held_styles) = self.gen_data()?;
        let tok = self.fit_tokenizer()?;
        let enc = self.train_encoder()?;
        let judge = self.train_judge()?;
        let model = self.latest_model()?;
        let t = Instant::now();
        let out = pipeline::evaluate_arm(
            &model,
            &self.cfg,
            &tok,
            &enc,
            &judge,
            &held_styles,
            "heldout",
            true,
        )?;
        let report = MetricsReport {
            rows: vec![out.row.clone()],
            metadata: serde_json::json!({
                "model_hash": model.weights_hash(),
                "model_stage": format!("{:?}", model.stage),
                "judge_hash": judge.weights_hash(),
                "encoder_hash": enc.weights_hash(),
                "tokenizer_hash": tok.hash(),
                "config_hash": self.config_hash(),
            }),
        };
        self.write_report(&report, &out, "eval")?;
        self.event(
            "eval",
            "done",
            serde_json::json!({
                "secs": t.elapsed().as_secs_f64(),
                "pa": out.row.pa, "sc_emb": out.row.sc_emb,
                "sc_tex": out.row.sc_tex, "cl": out.row.cl,
            }),
        );
        Ok(report)
    }

    fn write_report(&self, report: &MetricsReport, out: &ProtocolOutput, stage: &str) -> Result<()> {
        let dir = self.dir.join(stage);
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
        std::fs::write(dir.join("report.csv"), report.to_csv())?;
        let sheet = contact_sheet(&out.images);
        save_png(&sheet, &dir.join("contact_sheet.png"))?;
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir)?;
        for c in &out.images {
            let name = format!(
                "s{}_{}_{:08x}.png",
                c.style_idx,
                c.prompt.replace(' ', "-"),
                c.seed as u32
            );
            save_png(&c.image, &img_dir.join(name))?;
        }
        self.finish_stage(
            stage,
            serde_json::json!({"rows": report.rows.len(), "images": out.images.len()}),
        )?;
        Ok(())
    }

    fn ablate(&mut self, seeds: Option<&str>) -> Result<()> {
        let seeds: Vec<u64> = match seeds {
            Some(s) => s
                .split(',')
                .map(|x| {
                    x.trim()
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad seed {x:?}")))
                })
                .collect::<Result<_>>()?,
            None => vec![self.cfg.seed],
        };
        let t = Instant::now();
        let report = pipeline::ablation_harness(&self.cfg, &default_arms(), &seeds)?;
        let dir = self.dir.join("ablate");
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&report)?)?;
        std::fs::write(dir.join("report.csv"), report.to_csv())?;
        self.finish_stage("ablate", serde_json::json!({"rows": report.rows.len()}))?;
        self.event(
            "ablate",
            "done",
            serde_json::json!({"secs": t.elapsed().as_secs_f64(), "rows": report.rows.len()}),
        );
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn infer(
        &mut self,
        prompt: &str,
        style_image: &Path,
        alpha: f32,
        gamma: f32,
        out: &Path,
        temperature: f32,
        top_k: usize,
    ) -> Result<()> {
        let tok = self.fit_tokenizer()?;
        let enc = self.train_encoder()?;
        let model = self.latest_model()?;
        let reference = load_png(style_image)?;
        let style = style_enhanced_from_image(
            &model.resampler,
            &model.params,
            &enc,
            &reference,
            alpha,
            gamma,
            sarg::rng::subseed(self.cfg.seed, "infer"),
        )?;
        let sampler = SamplerParams {
            temperature,
            top_k: top_k.max(1),
            seed: sarg::rng::subseed(self.cfg.seed, "infer-sample"),
        };
        let grid = model.generate(prompt, &style, &sampler, &tok)?;
        let img = tok.codebook.decode_image(&grid)?;
        save_png(&img, out)?;
        self.event(
            "infer",
            "done",
            serde_json::json!({
                "prompt": prompt, "alpha": alpha, "gamma": gamma,
                "model_hash": model.weights_hash(), "out": out.display().to_string(),
            }),
        );
        Ok(())
    }

    fn pipeline(&mut self) -> Result<()> {
        let t = Instant::now();
        self.gen_data()?;
        self.fit_tokenizer()?;
        self.train_encoder()?;
        let judge = self.train_judge()?;
        let base = self.pretrain()?;
        // stage-1 adherence check with the null style embedding
        let tok = self.fit_tokenizer()?;
        let pa1 = null_style_adherence(
            &base,
            &tok,
            &judge,
            2,
            self.cfg.eval.temperature,
            self.cfg.eval.top_k,
            sarg::rng::subseed(self.cfg.seed, "stage1-pa"),
        )?;
        self.event("pretrain", "adherence", serde_json::json!({"pa": pa1}));
        self.finetune()?;
        if self.cfg.dpo.enabled {
            self.build_dpo_data()?;
            self.dpo()?;
        }
        let report = self.eval()?;
        self.event(
            "pipeline",
            "done",
            serde_json::json!({
                "secs": t.elapsed().as_secs_f64(),
                "reference": reference_metadata()["note"],
                "rows": report.rows.len(),
            }),
        );
        Ok(())
    }
}

fn save_png(img: &Image, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut buf = image::RgbImage::new(img.w as u32, img.h as u32);
    for y in 0..img.h {
        for x in 0..img.w {
            let p = img.pixel(y, x);
            buf.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    (p[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (p[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                    (p[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                ]),
            );
        }
    }
    buf.save(path)
        .map_err(|e| Error::InvalidArgument(format!("png write failed: {e}")))
}

fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", path.display())))?
        .into_rgb8();
    if img.width() as usize != IMG_SIZE || img.height() as usize != IMG_SIZE {
        return Err(Error::ShapeMismatch(format!(
            "style image must be {IMG_SIZE}x{IMG_SIZE}, got {}x{}",
            img.width(),
            img.height()
        )));
    }
    let mut out = Image::new(IMG_SIZE, IMG_SIZE);
    for y in 0..IMG_SIZE {
        for x in 0..IMG_SIZE {
            let p = img.get_pixel(x as u32, y as u32);
            out.set_pixel(
                y,
                x,
                [
                    p[0] as f32 / 255.0,
                    p[1] as f32 / 255.0,
                    p[2] as f32 / 255.0,
                ],
            );
        }
    }
    Ok(out)
}

/// Grid of generations: one row per style, one column per prompt (first
/// sample of each cell), 2px gutters.
fn contact_sheet(cells: &[CellImage]) -> Image {
    let mut styles: Vec<usize> = cells.iter().map(|c| c.style_idx).collect();
    styles.sort_unstable();
    styles.dedup();
    let prompts: Vec<String> = ALL_SHAPES
        .iter()
        .map(|s| format!("a {}", s.name()))
        .collect();
    let pad = 2usize;
    let w = prompts.len() * (IMG_SIZE + pad) + pad;
    let h = styles.len() * (IMG_SIZE + pad) + pad;
    let mut sheet = Image::new(h, w);
    for v in sheet.data.iter_mut() {
        *v = 1.0;
    }
    for (ri, style_idx) in styles.iter().enumerate() {
        for (ci, prompt) in prompts.iter().enumerate() {
            let Some(cell) = cells
                .iter()
                .find(|c| c.style_idx == *style_idx && &c.prompt == prompt)
            else {
                continue;
            };
            let oy = pad + ri * (IMG_SIZE + pad);
            let ox = pad + ci * (IMG_SIZE + pad);
            for y in 0..IMG_SIZE {
                for x in 0..IMG_SIZE {
                    sheet.set_pixel(oy + y, ox + x, cell.image.pixel(y, x));
                }
            }
        }
    }
    sheet
}
