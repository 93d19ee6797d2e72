//! Run configuration: a line-oriented `key = value` format with
//! `[section]` headers and `#` comments. The loaded config is serialized
//! back into the run directory so every run is self-describing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {message}")]
    Syntax {
        path: String,
        line: usize,
        message: String,
    },
    #[error("config field [{section}] {key}: {message}")]
    Field {
        section: String,
        key: String,
        message: String,
    },
    #[error("config: {0}")]
    Other(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// Parsed sections in file order; keys keep their last assignment.
#[derive(Debug, Default, Clone)]
pub struct Ini {
    pub sections: Vec<(String, BTreeMap<String, String>)>,
}

impl Ini {
    pub fn parse(text: &str, path: &str) -> Result<Ini, ConfigError> {
        let mut ini = Ini::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| ConfigError::Syntax {
                    path: path.to_string(),
                    line: i + 1,
                    message: "unterminated section header".into(),
                })?;
                ini.sections.push((name.trim().to_string(), BTreeMap::new()));
            } else if let Some((k, v)) = line.split_once('=') {
                let Some(last) = ini.sections.last_mut() else {
                    return Err(ConfigError::Syntax {
                        path: path.to_string(),
                        line: i + 1,
                        message: "key before any [section]".into(),
                    });
                };
                last.1.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(ConfigError::Syntax {
                    path: path.to_string(),
                    line: i + 1,
                    message: format!("expected `key = value`, got {line:?}"),
                });
            }
        }
        Ok(ini)
    }

    pub fn load(path: &Path) -> Result<Ini, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ini::parse(&text, &path.display().to_string())
    }

    pub fn section(&self, name: &str) -> Option<&BTreeMap<String, String>> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, kv)| kv)
    }
}

/// Typed access into one section with field-naming errors.
pub struct SectionView<'a> {
    pub name: &'a str,
    map: Option<&'a BTreeMap<String, String>>,
}

impl<'a> SectionView<'a> {
    pub fn new(ini: &'a Ini, name: &'a str) -> Self {
        SectionView {
            name,
            map: ini.section(name),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&'a str> {
        self.map.and_then(|m| m.get(key)).map(|s| s.as_str())
    }

    fn field_err(&self, key: &str, message: String) -> ConfigError {
        ConfigError::Field {
            section: self.name.to_string(),
            key: key.to_string(),
            message,
        }
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| self.field_err(key, format!("cannot parse {s:?}"))),
        }
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        let s = self
            .raw(key)
            .ok_or_else(|| self.field_err(key, "missing".into()))?;
        s.parse()
            .map_err(|_| self.field_err(key, format!("cannot parse {s:?}")))
    }

    /// Whitespace-separated float list.
    pub fn floats(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        match self.raw(key) {
            None => Ok(None),
            Some(s) => {
                let mut out = Vec::new();
                for tok in s.split_whitespace() {
                    out.push(
                        tok.parse()
                            .map_err(|_| self.field_err(key, format!("bad float {tok:?}")))?,
                    );
                }
                Ok(Some(out))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoPopArt,
    NoInstructions,
    FullEpisodeTime,
}

impl Variant {
    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "none" | "full" => Some(Variant::Full),
            "no-popart" => Some(Variant::NoPopArt),
            "no-instructions" => Some(Variant::NoInstructions),
            "full-episode-time" => Some(Variant::FullEpisodeTime),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPopArt => "no-popart",
            Variant::NoInstructions => "no-instructions",
            Variant::FullEpisodeTime => "full-episode-time",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub max_trials: usize,
    pub action_repeat: usize,
}

#[derive(Debug, Clone)]
pub struct LangConfig {
    pub embed_dim: usize,
    pub oov_zero: bool,
    pub oov_seed: u64,
}

#[derive(Debug, Clone)]
pub struct PolicyHyper {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// None means "as long as the longest possible episode".
    pub memory_length: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct PopArtConfig {
    pub beta: f64,
    pub sigma_floor: f64,
}

#[derive(Debug, Clone)]
pub struct LearnerHyper {
    pub gamma: f64,
    pub n_step: usize,
    pub batch_size: usize,
    pub t_target: usize,
    pub lr: f64,
    /// Learning rate for the dual variables; they must track the
    /// constraint level much faster than the network weights move.
    pub dual_lr: f64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub eps_eta: f64,
    pub eps_alpha_mu: f64,
    pub eps_alpha_sigma: f64,
    pub eta_init: f64,
    pub alpha_init: f64,
}

/// Everything one training run needs; fully serialized into the output
/// directory at run start.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub workers: usize,
    pub out_dir: PathBuf,
    pub suite_path: PathBuf,
    pub embeddings_path: PathBuf,
    pub instructions_path: PathBuf,
    pub variant: Variant,
    pub protocol: ProtocolConfig,
    pub lang: LangConfig,
    pub policy: PolicyHyper,
    pub popart: PopArtConfig,
    pub learner: LearnerHyper,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let ini = Ini::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_ini(&ini, base)
    }

    pub fn from_ini(ini: &Ini, base: &Path) -> Result<RunConfig, ConfigError> {
        let run = SectionView::new(ini, "run");
        let paths = SectionView::new(ini, "paths");
        let protocol = SectionView::new(ini, "protocol");
        let lang = SectionView::new(ini, "lang");
        let policy = SectionView::new(ini, "policy");
        let popart = SectionView::new(ini, "popart");
        let learner = SectionView::new(ini, "learner");

        let resolve = |s: &str| -> PathBuf {
            let p = PathBuf::from(s);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        let variant_raw: String = run.parse("variant", "full".to_string())?;
        let variant = Variant::parse(&variant_raw).ok_or_else(|| ConfigError::Field {
            section: "run".into(),
            key: "variant".into(),
            message: format!("unknown variant {variant_raw:?}"),
        })?;

        let width: usize = policy.parse("width", 64)?;
        let cfg = RunConfig {
            seed: run.parse("seed", 1)?,
            total_steps: run.require("total_steps")?,
            eval_interval: run.parse("eval_interval", 50_000)?,
            eval_episodes: run.parse("eval_episodes", 10)?,
            workers: run.parse("workers", 1)?,
            out_dir: resolve(&run.parse("out_dir", "runs/out".to_string())?),
            suite_path: resolve(&paths.require::<String>("suite")?),
            embeddings_path: resolve(&paths.require::<String>("embeddings")?),
            instructions_path: resolve(&paths.require::<String>("instructions")?),
            variant,
            protocol: ProtocolConfig {
                max_trials: protocol.parse("max_trials", 3)?,
                action_repeat: protocol.parse("action_repeat", 2)?,
            },
            lang: LangConfig {
                embed_dim: lang.parse("embed_dim", 50)?,
                oov_zero: lang.parse("oov", "hashed".to_string())? == "zero",
                oov_seed: lang.parse("oov_seed", 42)?,
            },
            policy: PolicyHyper {
                layers: policy.parse("layers", 2)?,
                width,
                heads: policy.parse("heads", 2)?,
                mlp_hidden: policy.parse("mlp_hidden", 2 * width)?,
                memory_length: match policy.raw("memory_length") {
                    None => None,
                    Some(s) => Some(s.parse().map_err(|_| ConfigError::Field {
                        section: "policy".into(),
                        key: "memory_length".into(),
                        message: format!("cannot parse {s:?}"),
                    })?),
                },
            },
            popart: PopArtConfig {
                beta: popart.parse("beta", 3e-4)?,
                sigma_floor: popart.parse("sigma_floor", 1e-4)?,
            },
            learner: LearnerHyper {
                gamma: learner.parse("gamma", 0.99)?,
                n_step: learner.parse("n_step", 16)?,
                batch_size: learner.parse("batch_size", 16)?,
                t_target: learner.parse("t_target", 100)?,
                lr: learner.parse("lr", 5e-4)?,
                dual_lr: {
                    let lr: f64 = learner.parse("lr", 5e-4)?;
                    learner.parse("dual_lr", lr)?
                },
                adam_betas: (
                    learner.parse("adam_beta1", 0.9)?,
                    learner.parse("adam_beta2", 0.999)?,
                ),
                adam_eps: learner.parse("adam_eps", 1e-8)?,
                eps_eta: learner.parse("eps_eta", 0.1)?,
                eps_alpha_mu: learner.parse("eps_alpha_mu", 0.01)?,
                eps_alpha_sigma: learner.parse("eps_alpha_sigma", 5e-5)?,
                eta_init: learner.parse("eta_init", 1.0)?,
                alpha_init: learner.parse("alpha_init", 5.0)?,
            },
        };
        validate(&cfg)?;
        Ok(cfg)
    }

    /// Serialize to the same format `load` reads (the run manifest).
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[run]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "eval_interval = {}", self.eval_interval);
        let _ = writeln!(s, "eval_episodes = {}", self.eval_episodes);
        let _ = writeln!(s, "workers = {}", self.workers);
        let _ = writeln!(s, "out_dir = {}", self.out_dir.display());
        let _ = writeln!(s, "variant = {}", self.variant.name());
        let _ = writeln!(s, "[paths]");
        let _ = writeln!(s, "suite = {}", self.suite_path.display());
        let _ = writeln!(s, "embeddings = {}", self.embeddings_path.display());
        let _ = writeln!(s, "instructions = {}", self.instructions_path.display());
        let _ = writeln!(s, "[protocol]");
        let _ = writeln!(s, "max_trials = {}", self.protocol.max_trials);
        let _ = writeln!(s, "action_repeat = {}", self.protocol.action_repeat);
        let _ = writeln!(s, "[lang]");
        let _ = writeln!(s, "embed_dim = {}", self.lang.embed_dim);
        let _ = writeln!(
            s,
            "oov = {}",
            if self.lang.oov_zero { "zero" } else { "hashed" }
        );
        let _ = writeln!(s, "oov_seed = {}", self.lang.oov_seed);
        let _ = writeln!(s, "[policy]");
        let _ = writeln!(s, "layers = {}", self.policy.layers);
        let _ = writeln!(s, "width = {}", self.policy.width);
        let _ = writeln!(s, "heads = {}", self.policy.heads);
        let _ = writeln!(s, "mlp_hidden = {}", self.policy.mlp_hidden);
        if let Some(m) = self.policy.memory_length {
            let _ = writeln!(s, "memory_length = {m}");
        }
        let _ = writeln!(s, "[popart]");
        let _ = writeln!(s, "beta = {}", self.popart.beta);
        let _ = writeln!(s, "sigma_floor = {}", self.popart.sigma_floor);
        let _ = writeln!(s, "[learner]");
        let l = &self.learner;
        let _ = writeln!(s, "gamma = {}", l.gamma);
        let _ = writeln!(s, "n_step = {}", l.n_step);
        let _ = writeln!(s, "batch_size = {}", l.batch_size);
        let _ = writeln!(s, "t_target = {}", l.t_target);
        let _ = writeln!(s, "lr = {}", l.lr);
        let _ = writeln!(s, "dual_lr = {}", l.dual_lr);
        let _ = writeln!(s, "adam_beta1 = {}", l.adam_betas.0);
        let _ = writeln!(s, "adam_beta2 = {}", l.adam_betas.1);
        let _ = writeln!(s, "adam_eps = {}", l.adam_eps);
        let _ = writeln!(s, "eps_eta = {}", l.eps_eta);
        let _ = writeln!(s, "eps_alpha_mu = {}", l.eps_alpha_mu);
        let _ = writeln!(s, "eps_alpha_sigma = {}", l.eps_alpha_sigma);
        let _ = writeln!(s, "eta_init = {}", l.eta_init);
        let _ = writeln!(s, "alpha_init = {}", l.alpha_init);
        s
    }
}

fn validate(cfg: &RunConfig) -> Result<(), ConfigError> {
    let field = |section: &str, key: &str, message: String| ConfigError::Field {
        section: section.into(),
        key: key.into(),
        message,
    };
    if cfg.protocol.max_trials == 0 {
        return Err(field("protocol", "max_trials", "must be >= 1".into()));
    }
    if cfg.protocol.action_repeat == 0 {
        return Err(field("protocol", "action_repeat", "must be >= 1".into()));
    }
    if cfg.policy.width % cfg.policy.heads != 0 {
        return Err(field(
            "policy",
            "heads",
            format!(
                "width {} not divisible by heads {}",
                cfg.policy.width, cfg.policy.heads
            ),
        ));
    }
    if !(0.0 < cfg.learner.gamma && cfg.learner.gamma < 1.0) {
        return Err(field("learner", "gamma", "must be in (0, 1)".into()));
    }
    if !(0.0 < cfg.popart.beta && cfg.popart.beta <= 1.0) {
        return Err(field("popart", "beta", "must be in (0, 1]".into()));
    }
    if cfg.learner.batch_size == 0 || cfg.learner.t_target == 0 {
        return Err(field("learner", "batch_size", "must be >= 1".into()));
    }
    if cfg.workers == 0 {
        return Err(field("run", "workers", "must be >= 1".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_manifest_round_trip() {
        let text = "\
[run]
seed = 9
total_steps = 1000
[paths]
suite = s.txt
embeddings = e.txt
instructions = i.txt
[learner]
gamma = 0.9
";
        let ini = Ini::parse(text, "test").unwrap();
        let cfg = RunConfig::from_ini(&ini, Path::new("/tmp")).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.learner.gamma, 0.9);
        assert_eq!(cfg.suite_path, PathBuf::from("/tmp/s.txt"));

        let ini2 = Ini::parse(&cfg.manifest(), "manifest").unwrap();
        let cfg2 = RunConfig::from_ini(&ini2, Path::new("/tmp")).unwrap();
        assert_eq!(cfg2.seed, cfg.seed);
        assert_eq!(cfg2.learner.gamma, cfg.learner.gamma);
        assert_eq!(cfg2.variant, cfg.variant);
    }

    #[test]
    fn error_names_the_field() {
        let text = "\
[run]
total_steps = 1000
[paths]
suite = s.txt
embeddings = e.txt
instructions = i.txt
[learner]
gamma = 1.5
";
        let ini = Ini::parse(text, "test").unwrap();
        let err = RunConfig::from_ini(&ini, Path::new(".")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("gamma"), "{msg}");
    }

    #[test]
    fn syntax_error_reports_line() {
        let err = Ini::parse("[run]\nnot a kv line\n", "f.txt").unwrap_err();
        assert!(err.to_string().contains("f.txt:2"), "{err}");
    }
}
