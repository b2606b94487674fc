//! Stage implementations. Each stage reads its inputs from files and writes
//! its outputs to files, so `pipeline` is literally the stages run in order.

use std::fs;
use std::path::{Path, PathBuf};

use wsireport::decoder::{self, feature_rows, generate_from_features, DecoderModel, EpochLog, TrainExample, Vocab};
use wsireport::evaluation::{self, KeywordLexicon};
use wsireport::features::{build_feature_matrix, read_store, write_store, FeatureMatrix, StubEncoder};
use wsireport::patching::{
    accepted_by_level, level_mask, parse_report, scan_slide, stratified_sample, write_report, PatchRecord,
};
use wsireport::pyramid::{write_synthetic_pyramid, SyntheticSlide};
use wsireport::pyramid::PyramidSource;
use wsireport::verification::{
    parse_corpus_tsv, verify_embedding, verify_or_replace, EmbeddingStore, MockEmbedder, ReferenceCorpus,
};

use crate::config::Config;
use crate::synthetic::write_dataset;
use crate::{CliError, Command, SyntheticCommand};

pub const MASK_SUMMARY: &str = "segmentation.txt";
pub const PATCHES_CSV: &str = "patches.csv";
pub const SELECTION_CSV: &str = "selection.csv";
pub const GENERATED_TSV: &str = "generated.tsv";
pub const VERIFIED_TSV: &str = "verified.tsv";
pub const PAIRS_TSV: &str = "pairs.tsv";
pub const SCORES_TSV: &str = "scores.tsv";
pub const REPORT_TXT: &str = "report.txt";
pub const VERIFIED_HEADER: &str = "id\taction\tbest_id\tsimilarity\treport";

fn write_file(path: &Path, content: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, content).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn emit(out: Option<&Path>, content: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, content),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn sorted_levels(cfg: &Config) -> Vec<u32> {
    let mut levels = cfg.quality.levels.clone();
    levels.sort_unstable();
    levels.dedup();
    levels
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelTissue {
    pub level: u32,
    pub width: u32,
    pub height: u32,
    pub fraction: f64,
}

/// Writes `mask_level_{l}.pgm` per configured level and a tissue summary.
pub fn cmd_segment(cfg: &Config, slide: &Path, out: &Path) -> Result<Vec<LevelTissue>, CliError> {
    let src = PyramidSource::load_manifest(slide)?;
    let mut summary = Vec::new();
    let mut text = String::new();
    for level in sorted_levels(cfg) {
        let mask = level_mask(&src, level, &cfg.segmentation)?;
        let path = out.join(format!("mask_level_{level}.pgm"));
        write_file(&path, mask.to_pgm())?;
        let t = LevelTissue { level, width: mask.width(), height: mask.height(), fraction: mask.fraction() };
        text.push_str(&format!("level {level} {}x{} tissue {:.1}%\n", t.width, t.height, 100.0 * t.fraction));
        summary.push(t);
    }
    write_file(&out.join(MASK_SUMMARY), &text)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchOutcome {
    pub records: Vec<PatchRecord>,
    pub selected: Vec<PatchRecord>,
}

/// Writes every evaluated candidate to `patches.csv` and the sampled
/// accepted patches to `selection.csv`.
pub fn cmd_patch(cfg: &Config, slide: &Path, out: &Path) -> Result<PatchOutcome, CliError> {
    let src = PyramidSource::load_manifest(slide)?;
    let records = scan_slide(&src, &cfg.segmentation, &cfg.quality)?;
    let sampled = stratified_sample(&accepted_by_level(&records), &cfg.quality);
    let selected: Vec<PatchRecord> = sampled.into_values().flatten().collect();
    write_file(&out.join(PATCHES_CSV), write_report(&records))?;
    write_file(&out.join(SELECTION_CSV), write_report(&selected))?;
    Ok(PatchOutcome { records, selected })
}

/// Encodes the selected patches with the stub encoder into a WSIF store.
pub fn cmd_extract(cfg: &Config, slide: &Path, selection: &Path, out: &Path) -> Result<FeatureMatrix, CliError> {
    let src = PyramidSource::load_manifest(slide)?;
    let records = parse_report(&read_text(selection)?)?;
    let encoder = StubEncoder::new(cfg.feature_dim);
    let matrix = build_feature_matrix(&records, &src, &encoder, cfg.quality.patch_size)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    write_store(&matrix, out)?;
    Ok(matrix)
}

/// `id \t store \t report` rows of a dataset's `reports.tsv`.
pub fn read_dataset(dataset: &Path) -> Result<Vec<(String, PathBuf, String)>, CliError> {
    let path = dataset.join("reports.tsv");
    let text = read_text(&path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(store), Some(report)) => rows.push((id.to_string(), dataset.join(store), report.to_string())),
            _ => {
                return Err(CliError::Validation(format!(
                    "{}:{}: expected id<TAB>store<TAB>report",
                    path.display(),
                    i + 1
                )))
            }
        }
    }
    if rows.is_empty() {
        return Err(CliError::Validation(format!("{} has no rows", path.display())));
    }
    Ok(rows)
}

pub fn train_log(logs: &[EpochLog]) -> String {
    let mut s = String::from("epoch\tlr\tloss\n");
    for l in logs {
        s.push_str(&format!("{}\t{}\t{}\n", l.epoch, l.lr, l.loss));
    }
    s
}

/// Trains a decoder on a dataset directory and writes the checkpoint, its
/// vocabulary (built from the reports when absent) and the epoch log.
pub fn cmd_train(cfg: &Config, dataset: &Path, checkpoint: &Path) -> Result<Vec<EpochLog>, CliError> {
    let rows = read_dataset(dataset)?;
    let vocab_path = cfg.vocab_path(checkpoint);
    let vocab = if vocab_path.exists() {
        Vocab::from_file(&vocab_path)?
    } else {
        let v = Vocab::build(rows.iter().map(|(_, _, r)| r.as_str()));
        write_file(&vocab_path, v.to_text())?;
        v
    };
    let mut examples = Vec::with_capacity(rows.len());
    let mut feat_dim = None;
    for (id, store, report) in &rows {
        let m = read_store(store)?;
        if m.n() == 0 {
            return Err(CliError::Validation(format!("example {id}: feature store {} is empty", store.display())));
        }
        if *feat_dim.get_or_insert(m.dim()) != m.dim() {
            return Err(CliError::Validation(format!("example {id}: feature dim {} differs", m.dim())));
        }
        examples.push(TrainExample { features: feature_rows(&m), tokens: vocab.tokenize(report) });
    }
    let model_cfg =
        decoder::DecoderConfig { vocab: vocab.len(), feat_dim: feat_dim.unwrap_or(cfg.feature_dim), ..cfg.decoder.clone() };
    let mut model = DecoderModel::xavier_init(&model_cfg, cfg.stage_seed("init"))?;
    let logs = decoder::train(&mut model, &examples, &cfg.train, |_| {})?;
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    model.save(checkpoint)?;
    write_file(&checkpoint.with_extension("log.tsv"), train_log(&logs))?;
    Ok(logs)
}

fn load_model(cfg: &Config) -> Result<(DecoderModel, Vocab), CliError> {
    let ckpt = cfg.paths.checkpoint.as_deref().ok_or_else(|| CliError::missing("paths.checkpoint"))?;
    let model = DecoderModel::load(ckpt)?;
    let vocab = Vocab::from_file(&cfg.vocab_path(ckpt))?;
    if vocab.len() != model.config.vocab {
        return Err(CliError::Validation(format!(
            "vocabulary has {} entries, checkpoint expects {}",
            vocab.len(),
            model.config.vocab
        )));
    }
    Ok((model, vocab))
}

fn store_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// `id \t report` per store; the id is the store's file stem.
pub fn cmd_generate(cfg: &Config, stores: &[PathBuf], out: Option<&Path>) -> Result<String, CliError> {
    let (model, vocab) = load_model(cfg)?;
    let mut text = String::new();
    for store in stores {
        let m = read_store(store)?;
        let ids = generate_from_features(&model, &m)?;
        text.push_str(&format!("{}\t{}\n", store_id(store), vocab.detokenize(&ids)?));
    }
    emit(out, &text)?;
    Ok(text)
}

/// Verifies `id \t report` rows against the reference corpus.
pub fn cmd_verify(cfg: &Config, generated: &Path, corpus: Option<&Path>, out: Option<&Path>) -> Result<String, CliError> {
    let corpus_path = corpus.or(cfg.paths.corpus.as_deref()).ok_or_else(|| CliError::missing("paths.corpus"))?;
    let rows = parse_corpus_tsv(&read_text(generated)?)?;
    let refs = parse_corpus_tsv(&read_text(corpus_path)?)?;
    let mut text = format!("{VERIFIED_HEADER}\n");
    let results = match &cfg.paths.embeddings {
        Some(p) => {
            let store = EmbeddingStore::read(p)?;
            let corpus = ReferenceCorpus::with_store(refs, &store)?;
            rows.iter()
                .map(|(id, g)| {
                    let q = store.get(id).ok_or_else(|| CliError::Validation(format!("no embedding for generated row {id}")))?;
                    Ok(verify_embedding(g, q, &corpus, cfg.tau)?)
                })
                .collect::<Result<Vec<_>, CliError>>()?
        }
        None => {
            let embedder = MockEmbedder { dim: cfg.embed_dim };
            let corpus = ReferenceCorpus::embed(refs, &embedder)?;
            rows.iter()
                .map(|(_, g)| verify_or_replace(g, &corpus, &embedder, cfg.tau))
                .collect::<Result<Vec<_>, _>>()?
        }
    };
    for ((id, _), r) in rows.iter().zip(results) {
        text.push_str(&format!("{id}\t{}\t{}\t{:.6}\t{}\n", r.action, r.best_id, r.best_similarity, r.final_text));
    }
    emit(out, &text)?;
    Ok(text)
}

/// `(id, generated, reference)` rows; blank lines skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, String)>, CliError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(g), Some(r)) => rows.push((id.to_string(), g.to_string(), r.to_string())),
            _ => return Err(CliError::Validation(format!("pairs line {}: expected id<TAB>generated<TAB>reference", i + 1))),
        }
    }
    Ok(rows)
}

/// Scores pairs. Empty input yields empty output.
pub fn cmd_score(cfg: &Config, pairs: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let rows = parse_pairs(&read_text(pairs)?)?;
    let mut text = String::new();
    if !rows.is_empty() {
        let lex = KeywordLexicon::from_files(cfg.paths.lexicon.as_deref(), cfg.paths.stopwords.as_deref())?;
        let scores = evaluation::score_pairs(&rows, &lex, &MockEmbedder { dim: cfg.embed_dim })?;
        text.push_str(&evaluation::metadata_line());
        text.push('\n');
        text.push_str(evaluation::SCORE_HEADER);
        text.push('\n');
        for ((id, _, _), s) in rows.iter().zip(&scores) {
            text.push_str(&evaluation::format_score_row(id, s));
            text.push('\n');
        }
    }
    emit(out, &text)?;
    Ok(text)
}

/// Output locations of a pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelinePaths {
    pub segmentation: PathBuf,
    pub root: PathBuf,
    pub store: PathBuf,
    pub generated: PathBuf,
    pub verified: PathBuf,
    pub pairs: PathBuf,
    pub scores: PathBuf,
    pub report: PathBuf,
}

impl PipelinePaths {
    pub fn new(slide: &Path, out: &Path) -> Self {
        let name = slide
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "slide".into());
        Self {
            segmentation: out.join("segmentation"),
            root: out.to_path_buf(),
            store: out.join(format!("{name}.wsif")),
            generated: out.join(GENERATED_TSV),
            verified: out.join(VERIFIED_TSV),
            pairs: out.join(PAIRS_TSV),
            scores: out.join(SCORES_TSV),
            report: out.join(REPORT_TXT),
        }
    }
}

/// Runs segment, patch, extract, generate, verify and score in order. The
/// final report is scored against `paths.reference`.
pub fn cmd_pipeline(cfg: &Config, slide: &Path, out: &Path) -> Result<PipelinePaths, CliError> {
    let reference_path = cfg.paths.reference.as_deref().ok_or_else(|| CliError::missing("paths.reference"))?;
    let p = PipelinePaths::new(slide, out);
    cmd_segment(cfg, slide, &p.segmentation)?;
    cmd_patch(cfg, slide, &p.root)?;
    cmd_extract(cfg, slide, &p.root.join(SELECTION_CSV), &p.store)?;
    cmd_generate(cfg, std::slice::from_ref(&p.store), Some(&p.generated))?;
    cmd_verify(cfg, &p.generated, None, Some(&p.verified))?;
    let verified = read_text(&p.verified)?;
    let row = verified.lines().nth(1).ok_or_else(|| CliError::Validation("verification produced no rows".into()))?;
    let fields: Vec<&str> = row.splitn(5, '\t').collect();
    let (id, report) = (fields[0], fields.get(4).copied().unwrap_or(""));
    let reference = read_text(reference_path)?;
    write_file(&p.report, format!("{report}\n"))?;
    write_file(&p.pairs, format!("{id}\t{report}\t{}\n", reference.trim()))?;
    cmd_score(cfg, &p.pairs, Some(&p.scores))?;
    Ok(p)
}

pub fn plan(cmd: &Command, cfg: &Config) -> Vec<String> {
    let levels: Vec<String> = sorted_levels(cfg).iter().map(u32::to_string).collect();
    let opt = |p: &Option<PathBuf>| p.as_ref().map_or("<unset>".to_string(), |p| p.display().to_string());
    let to = |p: Option<&PathBuf>| p.map_or("stdout".to_string(), |p| p.display().to_string());
    match cmd {
        Command::Segment { slide, out } => vec![format!(
            "segment {} levels {} -> {}/mask_level_*.pgm, {}",
            slide.display(),
            levels.join(","),
            out.display(),
            MASK_SUMMARY
        )],
        Command::Patch { slide, out } => vec![format!(
            "patch {} levels {} budget {} -> {}/{PATCHES_CSV}, {SELECTION_CSV}",
            slide.display(),
            levels.join(","),
            cfg.quality.max_patches,
            out.display()
        )],
        Command::Extract { slide, selection, out } => vec![format!(
            "extract {} selection {} dim {} -> {}",
            slide.display(),
            selection.display(),
            cfg.feature_dim,
            out.display()
        )],
        Command::Train { dataset, out } => vec![format!(
            "train {} epochs {} -> {}",
            dataset.display(),
            cfg.train.epochs,
            out.as_ref().or(cfg.paths.checkpoint.as_ref()).map_or("<unset>".into(), |p| p.display().to_string())
        )],
        Command::Generate { stores, out } => vec![format!(
            "generate {} store(s) with {} -> {}",
            stores.len(),
            opt(&cfg.paths.checkpoint),
            to(out.as_ref())
        )],
        Command::Score { pairs, out } => vec![format!("score {} -> {}", pairs.display(), to(out.as_ref()))],
        Command::Verify { generated, corpus, out } => vec![format!(
            "verify {} against {} tau {} -> {}",
            generated.display(),
            corpus.as_ref().map_or(opt(&cfg.paths.corpus), |c| c.display().to_string()),
            cfg.tau,
            to(out.as_ref())
        )],
        Command::Pipeline { slide, out } => {
            let p = PipelinePaths::new(slide, out);
            vec![
                format!("1 segment -> {}", p.segmentation.display()),
                format!("2 patch -> {}, {}", p.root.join(PATCHES_CSV).display(), p.root.join(SELECTION_CSV).display()),
                format!("3 extract -> {}", p.store.display()),
                format!("4 generate with {} -> {}", opt(&cfg.paths.checkpoint), p.generated.display()),
                format!("5 verify against {} -> {}", opt(&cfg.paths.corpus), p.verified.display()),
                format!("6 score against {} -> {}, {}", opt(&cfg.paths.reference), p.report.display(), p.scores.display()),
            ]
        }
        Command::MakeSynthetic(SyntheticCommand::Slide(a)) => {
            vec![format!("synthetic slide {}x{} levels {:?} -> {}", a.size, a.size, a.levels, a.out.display())]
        }
        Command::MakeSynthetic(SyntheticCommand::Dataset(a)) => {
            vec![format!("synthetic dataset of {} pairs, dim {} -> {}", a.count, cfg.feature_dim, a.out.display())]
        }
    }
}

pub fn execute(cmd: &Command, cfg: &Config) -> Result<(), CliError> {
    match cmd {
        Command::Segment { slide, out } => {
            for t in cmd_segment(cfg, slide, out)? {
                println!("level {} {}x{} tissue {:.1}%", t.level, t.width, t.height, 100.0 * t.fraction);
            }
        }
        Command::Patch { slide, out } => {
            let o = cmd_patch(cfg, slide, out)?;
            let accepted = o.records.iter().filter(|r| r.verdict.is_accepted()).count();
            println!("{} candidates, {accepted} accepted, {} selected", o.records.len(), o.selected.len());
        }
        Command::Extract { slide, selection, out } => {
            let m = cmd_extract(cfg, slide, selection, out)?;
            println!("{} patches x {} features -> {}", m.n(), m.dim(), out.display());
        }
        Command::Train { dataset, out } => {
            let ckpt = out.as_deref().or(cfg.paths.checkpoint.as_deref()).ok_or_else(|| CliError::missing("paths.checkpoint"))?;
            let logs = cmd_train(cfg, dataset, ckpt)?;
            print!("{}", train_log(&logs));
            if let Some(l) = logs.last() {
                println!("trained {} epochs, final loss {} -> {}", logs.len(), l.loss, ckpt.display());
            }
        }
        Command::Generate { stores, out } => {
            cmd_generate(cfg, stores, out.as_deref())?;
        }
        Command::Score { pairs, out } => {
            cmd_score(cfg, pairs, out.as_deref())?;
        }
        Command::Verify { generated, corpus, out } => {
            cmd_verify(cfg, generated, corpus.as_deref(), out.as_deref())?;
        }
        Command::Pipeline { slide, out } => {
            let p = cmd_pipeline(cfg, slide, out)?;
            print!("{}", read_text(&p.report)?);
        }
        Command::MakeSynthetic(SyntheticCommand::Slide(a)) => {
            let spec = SyntheticSlide::demo(a.size, a.levels.clone(), cfg.stage_seed("synthetic"));
            write_synthetic_pyramid(&spec, &a.out)?;
            println!("wrote {}", a.out.display());
        }
        Command::MakeSynthetic(SyntheticCommand::Dataset(a)) => {
            write_dataset(&a.out, a.count, cfg.feature_dim, cfg.stage_seed("dataset"))?;
            println!("wrote {}", a.out.display());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_parse_and_reject_short_rows() {
        let rows = parse_pairs("a\tx y\tz\r\n\n b \tq\tr\tmore\n").unwrap();
        assert_eq!(rows[0], ("a".into(), "x y".into(), "z".into()));
        assert_eq!(rows[1], (" b ".into(), "q".into(), "r\tmore".into()));
        assert!(matches!(parse_pairs("a\tb\n"), Err(CliError::Validation(_))));
    }

    #[test]
    fn pipeline_paths_use_slide_name() {
        let d = tempfile::tempdir().unwrap();
        let slide = d.path().join("case7");
        fs::create_dir(&slide).unwrap();
        let p = PipelinePaths::new(&slide, Path::new("out"));
        assert_eq!(p.store, Path::new("out/case7.wsif"));
        assert_eq!(p.scores, Path::new("out/scores.tsv"));
    }

    #[test]
    fn train_log_is_tab_separated() {
        let logs = [EpochLog { epoch: 0, lr: 0.5, loss: 2.25 }];
        assert_eq!(train_log(&logs), "epoch\tlr\tloss\n0\t0.5\t2.25\n");
    }
}
