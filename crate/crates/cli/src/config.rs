//! Flat `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Keys are namespaced by stage
//! (`patching.focus_min = 40`). Relative paths resolve against the directory
//! of the config file.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use wsireport::decoder::{DecoderConfig, TrainConfig};
use wsireport::hash::stage_seed;
use wsireport::patching::QualityParams;
use wsireport::segmentation::SegmentationParams;
use wsireport::verification::{DEFAULT_EMBED_DIM, DEFAULT_TAU};

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Paths {
    pub checkpoint: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub stopwords: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub segmentation: SegmentationParams,
    pub quality: QualityParams,
    pub feature_dim: usize,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub tau: f64,
    pub embed_dim: usize,
    pub paths: Paths,
}

impl Default for Config {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            segmentation: SegmentationParams::default(),
            quality: QualityParams::default(),
            feature_dim: 1024,
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            tau: DEFAULT_TAU,
            embed_dim: DEFAULT_EMBED_DIM,
            paths: Paths::default(),
        };
        cfg.set_seed(0);
        cfg
    }
}

fn value<T: FromStr>(key: &str, raw: &str, line: usize) -> Result<T, CliError>
where
    T::Err: Display,
{
    raw.parse().map_err(|e| CliError::Validation(format!("config line {line}: {key} = {raw:?}: {e}")))
}

impl Config {
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg = Config::default();
        let mut seed = 0;
        for (i, raw_line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw_line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, raw) = line
                .split_once('=')
                .ok_or_else(|| CliError::Validation(format!("config line {line_no}: expected key = value")))?;
            let (key, raw) = (key.trim(), raw.trim());
            let path = || Some(base.join(raw));
            macro_rules! set {
                ($field:expr) => {
                    $field = value(key, raw, line_no)?
                };
            }
            match key {
                "seed" => seed = value(key, raw, line_no)?,
                "segmentation.tau_s" => set!(cfg.segmentation.tau_s),
                "segmentation.tau_v" => set!(cfg.segmentation.tau_v),
                "segmentation.kernel" => set!(cfg.segmentation.kernel),
                "patching.patch_size" => set!(cfg.quality.patch_size),
                "patching.stride" => set!(cfg.quality.stride),
                "patching.min_tissue" => set!(cfg.quality.min_tissue),
                "patching.focus_min" => set!(cfg.quality.focus_min),
                "patching.v_min" => set!(cfg.quality.v_min),
                "patching.v_max" => set!(cfg.quality.v_max),
                "patching.s_min" => set!(cfg.quality.s_min),
                "patching.dark_intensity" => set!(cfg.quality.dark_intensity),
                "patching.dark_frac_max" => set!(cfg.quality.dark_frac_max),
                "patching.max_patches" => set!(cfg.quality.max_patches),
                "patching.levels" => {
                    cfg.quality.levels = raw
                        .split(',')
                        .map(|l| value(key, l.trim(), line_no))
                        .collect::<Result<Vec<u32>, _>>()?
                }
                "features.dim" => set!(cfg.feature_dim),
                "decoder.layers" => set!(cfg.decoder.layers),
                "decoder.heads" => set!(cfg.decoder.heads),
                "decoder.d_model" => set!(cfg.decoder.d_model),
                "decoder.d_ff" => set!(cfg.decoder.d_ff),
                "decoder.dropout" => set!(cfg.decoder.dropout),
                "decoder.max_len" => set!(cfg.decoder.max_len),
                "decoder.vocab" => set!(cfg.decoder.vocab),
                "train.warmup_epochs" => set!(cfg.train.warmup_epochs),
                "train.warmup_lr" => set!(cfg.train.warmup_lr),
                "train.base_lr" => set!(cfg.train.base_lr),
                "train.batch_size" => set!(cfg.train.batch_size),
                "train.epochs" => set!(cfg.train.epochs),
                "train.weight_decay" => set!(cfg.train.weight_decay),
                "train.beta1" => set!(cfg.train.betas.0),
                "train.beta2" => set!(cfg.train.betas.1),
                "train.eps" => set!(cfg.train.eps),
                "verification.tau" => set!(cfg.tau),
                "verification.embed_dim" => set!(cfg.embed_dim),
                "paths.checkpoint" => cfg.paths.checkpoint = path(),
                "paths.vocab" => cfg.paths.vocab = path(),
                "paths.corpus" => cfg.paths.corpus = path(),
                "paths.reference" => cfg.paths.reference = path(),
                "paths.lexicon" => cfg.paths.lexicon = path(),
                "paths.stopwords" => cfg.paths.stopwords = path(),
                "paths.embeddings" => cfg.paths.embeddings = path(),
                _ => return Err(CliError::Validation(format!("config line {line_no}: unknown key {key:?}"))),
            }
        }
        cfg.set_seed(seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Sets the root seed and re-derives every stage seed from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.quality.seed = stage_seed(seed, "patch");
        self.train.seed = stage_seed(seed, "train");
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        stage_seed(self.seed, stage)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.segmentation.validate().map_err(CliError::Validation)?;
        self.quality.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        if self.feature_dim == 0 || self.embed_dim == 0 {
            return Err(CliError::Validation("features.dim and verification.embed_dim must be positive".into()));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(CliError::Validation(format!("verification.tau {} outside [-1, 1]", self.tau)));
        }
        Ok(())
    }

    /// Vocabulary location: `paths.vocab`, else the checkpoint path with a
    /// `.vocab` extension.
    pub fn vocab_path(&self, checkpoint: &Path) -> PathBuf {
        self.paths.vocab.clone().unwrap_or_else(|| checkpoint.with_extension("vocab"))
    }

    /// Renders every setting in the accepted syntax.
    pub fn render(&self) -> String {
        let (s, q, d, t) = (&self.segmentation, &self.quality, &self.decoder, &self.train);
        let levels: Vec<String> = q.levels.iter().map(u32::to_string).collect();
        let mut out = format!(
            "seed = {}\n\
             segmentation.tau_s = {}\nsegmentation.tau_v = {}\nsegmentation.kernel = {}\n\
             patching.patch_size = {}\npatching.stride = {}\npatching.min_tissue = {}\npatching.focus_min = {}\n\
             patching.v_min = {}\npatching.v_max = {}\npatching.s_min = {}\npatching.dark_intensity = {}\n\
             patching.dark_frac_max = {}\npatching.max_patches = {}\npatching.levels = {}\n\
             features.dim = {}\n\
             decoder.layers = {}\ndecoder.heads = {}\ndecoder.d_model = {}\ndecoder.d_ff = {}\ndecoder.dropout = {}\n\
             decoder.max_len = {}\ndecoder.vocab = {}\n\
             train.warmup_epochs = {}\ntrain.warmup_lr = {}\ntrain.base_lr = {}\ntrain.batch_size = {}\ntrain.epochs = {}\n\
             train.weight_decay = {}\ntrain.beta1 = {}\ntrain.beta2 = {}\ntrain.eps = {}\n\
             verification.tau = {}\nverification.embed_dim = {}\n",
            self.seed,
            s.tau_s,
            s.tau_v,
            s.kernel,
            q.patch_size,
            q.stride,
            q.min_tissue,
            q.focus_min,
            q.v_min,
            q.v_max,
            q.s_min,
            q.dark_intensity,
            q.dark_frac_max,
            q.max_patches,
            levels.join(","),
            self.feature_dim,
            d.layers,
            d.heads,
            d.d_model,
            d.d_ff,
            d.dropout,
            d.max_len,
            d.vocab,
            t.warmup_epochs,
            t.warmup_lr,
            t.base_lr,
            t.batch_size,
            t.epochs,
            t.weight_decay,
            t.betas.0,
            t.betas.1,
            t.eps,
            self.tau,
            self.embed_dim,
        );
        let p = &self.paths;
        for (key, v) in [
            ("checkpoint", &p.checkpoint),
            ("vocab", &p.vocab),
            ("corpus", &p.corpus),
            ("reference", &p.reference),
            ("lexicon", &p.lexicon),
            ("stopwords", &p.stopwords),
            ("embeddings", &p.embeddings),
        ] {
            if let Some(path) = v {
                out.push_str(&format!("paths.{key} = {}\n", path.display()));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_tables() {
        let c = Config::default();
        assert_eq!(c.quality.levels, vec![6, 5, 4, 3]);
        assert_eq!(c.quality.max_patches, 2500);
        assert_eq!((c.segmentation.tau_s, c.segmentation.tau_v, c.segmentation.kernel), (20, 30, 5));
        assert_eq!((c.decoder.layers, c.decoder.heads, c.decoder.d_model, c.decoder.max_len), (6, 8, 1024, 64));
        assert_eq!((c.train.warmup_epochs, c.train.batch_size, c.train.epochs), (10, 64, 350));
        assert_eq!(c.tau, 0.85);
        assert_eq!(c.embed_dim, 384);
    }

    #[test]
    fn parses_and_round_trips() {
        let text = "# comment\nseed = 7\npatching.focus_min = 35.5 # inline\npatching.levels = 3, 4\n\npaths.corpus = corpus.tsv\n";
        let c = Config::parse(text, Path::new("/data")).unwrap();
        assert_eq!(c.quality.focus_min, 35.5);
        assert_eq!(c.quality.levels, vec![3, 4]);
        assert_eq!(c.paths.corpus.as_deref(), Some(Path::new("/data/corpus.tsv")));
        assert_eq!(c.quality.seed, stage_seed(7, "patch"));
        assert_eq!(Config::parse(&c.render(), Path::new("/")).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        for bad in ["nonsense", "unknown.key = 1", "patching.stride = -1", "segmentation.kernel = 4", "patching.levels = "] {
            assert!(matches!(Config::parse(bad, Path::new(".")), Err(CliError::Validation(_))), "{bad}");
        }
    }
}
