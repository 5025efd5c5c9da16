//! Pipeline stages. Each reads its inputs from the configured paths or from
//! earlier artifacts in the output directory, and writes its artifacts plus a
//! provenance record.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use clinforge_core::chat::{render, Message};
use clinforge_core::corpus::{load_manifest, sample_mixture, Domain, MixtureManifest, Ratio, SftRecord, SourceSpec};
use clinforge_core::dpo::{build_stage_pairs, pairs_file_name, train_stage, StageMeta};
use clinforge_core::eval::{evaluate, render_table, McqItem};
use clinforge_core::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelState};
use clinforge_core::packer::{pack, read_shard, write_shard};
use clinforge_core::prefs::{LengthPreference, PreferencePair, RankerSpec};
use clinforge_core::sft::train_sft;
use clinforge_core::{jsonl, seed, synth};

use crate::config::{CorpusSection, Paths, RunConfig};
use crate::provenance::Provenance;

pub const MIXTURE: &str = "mixture.jsonl";
pub const SHARD: &str = "train.shard";
pub const SFT_CKPT: &str = "sft.ckpt";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_TABLE: &str = "eval_table.txt";

pub fn stage_ckpt(stage: u32) -> String {
    format!("stage{stage}.ckpt")
}

pub fn stage_meta(stage: u32) -> String {
    format!("stage{stage}.meta.json")
}

/// One line of a prompt pool file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub prompt: Vec<Message>,
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub command: String,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.paths.out.join(name)
    }

    fn provenance(&self) -> Result<Provenance> {
        let bytes = serde_json::to_vec(&self.cfg)?;
        let hash = format!("{:016x}", clinforge_core::model::fnv1a64(&bytes));
        Ok(Provenance::new(&self.command, self.cfg.seed, hash))
    }

    fn model_seed(&self) -> u64 {
        seed::derive(self.cfg.seed, &[10])
    }

    fn sft_seed(&self) -> u64 {
        seed::derive(self.cfg.seed, &[11])
    }

    fn align_seed(&self) -> u64 {
        seed::derive(self.cfg.seed, &[12])
    }

    fn reference_ckpt(&self, stage: u32) -> PathBuf {
        if stage <= 1 {
            self.out(SFT_CKPT)
        } else {
            self.out(&stage_ckpt(stage - 1))
        }
    }

    fn check_stage(&self, stage: u32) -> Result<()> {
        if stage == 0 || stage > self.cfg.dpo.stages {
            bail!("stage must lie in 1..={}, got {stage}", self.cfg.dpo.stages);
        }
        Ok(())
    }
}

fn load_model(path: &Path) -> Result<ModelState> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_prompts(path: &Path) -> Result<Vec<Vec<Message>>> {
    let records: Vec<PromptRecord> = jsonl::read(path)?;
    Ok(records.into_iter().map(|r| r.prompt).collect())
}

pub fn mix(ctx: &Ctx) -> Result<()> {
    let manifest = load_manifest(&ctx.cfg.paths.manifest)?;
    let mixture = sample_mixture(&manifest, ctx.cfg.corpus.total)?;
    for d in mixture.draws.iter().filter(|d| d.with_replacement) {
        log::warn!("source {:?}: {} requested from {} records; reusing records", d.name, d.requested, d.available);
    }
    let out = ctx.out(MIXTURE);
    jsonl::write(&out, &mixture.records)?;
    write_json(&ctx.out("mixture.draws.json"), &mixture.draws)?;
    let mut prov = ctx.provenance()?;
    prov.input(&ctx.cfg.paths.manifest)?;
    for s in &manifest.sources {
        prov.input(&s.path)?;
    }
    prov.output(&out)?;
    prov.write_beside(&out)?;
    log::info!(
        "mixed {} records ({} medical) into {}",
        mixture.records.len(),
        mixture.domain_count(&manifest, Domain::Medical),
        out.display()
    );
    Ok(())
}

pub fn pack_cmd(ctx: &Ctx) -> Result<()> {
    let input = ctx.out(MIXTURE);
    let records: Vec<SftRecord> = jsonl::read(&input)?;
    let samples = records
        .iter()
        .enumerate()
        .map(|(i, r)| render(&r.conversation).with_context(|| format!("record {i}")))
        .collect::<Result<Vec<_>>>()?;
    let chunks = pack(&samples, ctx.cfg.sft.chunk_len)?;
    let out = ctx.out(SHARD);
    write_shard(&out, &chunks, ctx.cfg.sft.chunk_len)?;
    let mut prov = ctx.provenance()?;
    prov.input(&input)?;
    prov.output(&out)?;
    prov.write_beside(&out)?;
    log::info!("packed {} samples into {} chunks of {}", samples.len(), chunks.len(), ctx.cfg.sft.chunk_len);
    Ok(())
}

pub fn sft(ctx: &Ctx) -> Result<()> {
    let input = ctx.out(SHARD);
    let (chunk_len, chunks) = read_shard(&input)?;
    if chunk_len != ctx.cfg.sft.chunk_len {
        bail!("shard {} has chunk length {chunk_len}, config says {}", input.display(), ctx.cfg.sft.chunk_len);
    }
    let model = ModelState::init(ctx.cfg.model, ctx.model_seed())?;
    let outcome = train_sft(model, &chunks, &ctx.cfg.sft, ctx.sft_seed())?;
    let out = ctx.out(SFT_CKPT);
    save_checkpoint(&outcome.state, &out)?;
    jsonl::write(&ctx.out("sft.metrics.jsonl"), &outcome.metrics)?;
    let mut prov = ctx.provenance()?;
    prov.input(&input)?;
    prov.output(&out)?;
    prov.write_beside(&out)?;
    if let Some(last) = outcome.metrics.last() {
        log::info!("sft: {} steps, final loss {:.4}", outcome.metrics.len(), last.loss);
    }
    Ok(())
}

fn external_pairs(ctx: &Ctx) -> Result<Vec<PreferencePair>> {
    match &ctx.cfg.paths.external_pairs {
        Some(p) => Ok(jsonl::read(p)?),
        None => Ok(Vec::new()),
    }
}

fn gen_stage(ctx: &Ctx, stage: u32, reference: &ModelState, pool: &[Vec<Message>]) -> Result<PathBuf> {
    let external = if stage == 1 { external_pairs(ctx)? } else { Vec::new() };
    let report = build_stage_pairs(reference, pool, &ctx.cfg.prefs, &external, stage, ctx.align_seed())?;
    let out = ctx.out(&pairs_file_name(stage));
    jsonl::write(&out, &report.pairs)?;
    log::info!("stage {stage}: {} pairs, {} prompts skipped", report.pairs.len(), report.skipped.len());
    let mut prov = ctx.provenance()?;
    prov.input(&ctx.reference_ckpt(stage))?;
    prov.input(&ctx.cfg.paths.prompts)?;
    if let (1, Some(p)) = (stage, &ctx.cfg.paths.external_pairs) {
        prov.input(p)?;
    }
    prov.output(&out)?;
    prov.write_beside(&out)?;
    Ok(out)
}

pub fn gen_prefs(ctx: &Ctx, stage: u32) -> Result<()> {
    ctx.check_stage(stage)?;
    let reference = load_model(&ctx.reference_ckpt(stage))?;
    let pool = load_prompts(&ctx.cfg.paths.prompts)?;
    gen_stage(ctx, stage, &reference, &pool)?;
    Ok(())
}

fn train_one(ctx: &Ctx, stage: u32, reference: &ModelState) -> Result<ModelState> {
    let pairs_path = ctx.out(&pairs_file_name(stage));
    let pairs: Vec<PreferencePair> = jsonl::read(&pairs_path)?;
    let (outcome, meta): (_, StageMeta) = train_stage(reference, &pairs, &ctx.cfg.dpo, stage, ctx.align_seed())?;
    let out = ctx.out(&stage_ckpt(stage));
    save_checkpoint(&outcome.state, &out)?;
    write_json(&ctx.out(&stage_meta(stage)), &meta)?;
    jsonl::write(&ctx.out(&format!("stage{stage}.metrics.jsonl")), &outcome.metrics)?;
    let mut prov = ctx.provenance()?;
    prov.input(&ctx.reference_ckpt(stage))?;
    prov.input(&pairs_path)?;
    prov.output(&out)?;
    prov.write_beside(&out)?;
    log::info!("stage {stage}: {} DPO steps, reference {}", meta.steps, meta.ref_checkpoint_hash);
    Ok(outcome.state)
}

pub fn dpo(ctx: &Ctx, stage: u32) -> Result<()> {
    ctx.check_stage(stage)?;
    let reference = load_model(&ctx.reference_ckpt(stage))?;
    ctx.cfg.dpo.validate_for(&reference)?;
    train_one(ctx, stage, &reference)?;
    Ok(())
}

pub fn align(ctx: &Ctx) -> Result<()> {
    let pool = load_prompts(&ctx.cfg.paths.prompts)?;
    let mut reference = load_model(&ctx.out(SFT_CKPT))?;
    ctx.cfg.dpo.validate_for(&reference)?;
    for stage in 1..=ctx.cfg.dpo.stages {
        gen_stage(ctx, stage, &reference, &pool)?;
        reference = train_one(ctx, stage, &reference)?;
    }
    Ok(())
}

pub fn eval(ctx: &Ctx, checkpoint: Option<PathBuf>) -> Result<()> {
    let ckpt = checkpoint.unwrap_or_else(|| {
        let last = ctx.out(&stage_ckpt(ctx.cfg.dpo.stages));
        if last.is_file() {
            last
        } else {
            ctx.out(SFT_CKPT)
        }
    });
    let model = load_model(&ckpt)?;
    let items: Vec<McqItem> = jsonl::read(&ctx.cfg.paths.eval_items)?;
    let report = evaluate(&model, &items, &ctx.cfg.eval)?;
    let out = ctx.out(EVAL_REPORT);
    write_json(&out, &report)?;
    let table = render_table(&report);
    fs::write(ctx.out(EVAL_TABLE), &table)?;
    let mut prov = ctx.provenance()?;
    prov.input(&ckpt)?;
    prov.input(&ctx.cfg.paths.eval_items)?;
    prov.output(&out)?;
    prov.write_beside(&out)?;
    print!("{table}");
    Ok(())
}

pub fn e2e(ctx: &Ctx) -> Result<()> {
    mix(ctx)?;
    pack_cmd(ctx)?;
    sft(ctx)?;
    align(ctx)?;
    eval(ctx, None)
}

/// Writes the synthetic fixture set used by `e2e` and the tests.
pub fn fixtures(dir: &Path) -> Result<()> {
    let sources = dir.join("sources");
    fs::create_dir_all(&sources)?;
    let (train, held) = synth::split_words(600, 40, 4, 0xf1);
    let exclude: BTreeSet<String> = train.iter().chain(&held).cloned().collect();
    let filler_words = synth::random_words(300, 3, 0xf2, &exclude);

    let caps = |words: &[String], source: &str| -> Vec<SftRecord> {
        words.iter().map(|w| synth::capitalize_record(w, None, source)).collect()
    };
    let files = [
        ("caps-a", Domain::Medical, 5000, caps(&train[..300], "caps-a")),
        ("caps-b", Domain::Medical, 2350, caps(&train[300..], "caps-b")),
        ("filler", Domain::General, 2650, synth::filler_records(&filler_words[..200], 3..=10, "filler", 0xf3)),
    ];
    let mut specs = Vec::new();
    for (name, domain, hundredths, records) in files {
        let rel = PathBuf::from("sources").join(format!("{name}.jsonl"));
        jsonl::write(&dir.join(&rel), &records)?;
        specs.push(SourceSpec { name: name.into(), path: rel, domain, ratio_pct: Ratio::from_hundredths(hundredths) });
    }
    write_json(&dir.join("manifest.json"), &MixtureManifest { seed: 17, sources: specs })?;

    let prompts: Vec<PromptRecord> =
        filler_words[200..].iter().map(|w| PromptRecord { prompt: synth::filler_prompt(w) }).collect();
    jsonl::write(&dir.join("prompts.jsonl"), &prompts)?;
    jsonl::write(&dir.join("eval_items.jsonl"), &synth::capitalize_mcq(&held, 4, "capitalize", 0xf4))?;
    let external: Vec<PreferencePair> = filler_words[..8]
        .iter()
        .enumerate()
        .map(|(i, w)| PreferencePair {
            prompt: synth::filler_prompt(w),
            chosen: synth::filler_reply(3 + i % 2),
            rejected: synth::filler_reply(9 + i % 2),
            stage: 1,
            scores: Vec::new(),
        })
        .collect();
    jsonl::write(&dir.join("external_pairs.jsonl"), &external)?;
    write_json(&dir.join("e2e.json"), &fixture_config())?;
    Ok(())
}

/// The configuration shipped as `e2e.json`: small enough to finish in
/// seconds.
pub fn fixture_config() -> RunConfig {
    use clinforge_core::dpo::DpoConfig;
    use clinforge_core::eval::EvalOptions;
    use clinforge_core::prefs::PrefsConfig;
    use clinforge_core::sft::SftConfig;
    RunConfig {
        seed: 42,
        model: ModelConfig::new(32, 2, 2, 64),
        corpus: CorpusSection { total: 400 },
        sft: SftConfig { peak_lr: 3e-3, chunk_len: 64, batch_chunks: 8, ..SftConfig::default() },
        dpo: DpoConfig { lr: 3e-5, batch_pairs: 16, max_len: 64, ..DpoConfig::default() },
        prefs: PrefsConfig {
            k: 5,
            temperature: 1.0,
            max_new: 16,
            per_stage: 30,
            ranker: RankerSpec::LengthPenalty { prefer: LengthPreference::Short },
        },
        eval: EvalOptions { system_prompt: None, ..EvalOptions::default() },
        paths: Paths {
            manifest: "manifest.json".into(),
            prompts: "prompts.jsonl".into(),
            eval_items: "eval_items.jsonl".into(),
            external_pairs: Some("external_pairs.jsonl".into()),
            out: "../runs/e2e".into(),
        },
    }
}
