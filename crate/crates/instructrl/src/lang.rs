//! Word embeddings and instruction templates.
//!
//! Embeddings load from the plain text format `token v1 .. vD`, one entry
//! per line. Instruction templates come from a config file mapping each
//! task to a block of instruction strings; they are tokenized and
//! pre-encoded into per-word vector sequences at load time.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::seeding;

#[derive(Debug, Error)]
pub enum LangError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("task {0:?} has no instruction templates")]
    NoTemplates(String),
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OovPolicy {
    /// Unknown tokens embed to the zero vector.
    Zero,
    /// Unknown tokens embed to a deterministic pseudo-random vector keyed
    /// by a hash of the token, so distinct unseen words stay distinguishable.
    HashedRandom { seed: u64 },
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    vocab: HashMap<String, Vec<f64>>,
    oov: OovPolicy,
    /// Number of duplicate tokens encountered at load (last entry wins).
    pub duplicates: usize,
}

impl EmbeddingTable {
    pub fn new(dim: usize, oov: OovPolicy) -> Self {
        EmbeddingTable {
            dim,
            vocab: HashMap::new(),
            oov,
            duplicates: 0,
        }
    }

    pub fn load(path: &Path, dim: usize, oov: OovPolicy) -> Result<Self, LangError> {
        let text = std::fs::read_to_string(path).map_err(|source| LangError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, &path.display().to_string(), dim, oov)
    }

    pub fn parse(text: &str, path: &str, dim: usize, oov: OovPolicy) -> Result<Self, LangError> {
        let mut table = EmbeddingTable::new(dim, oov);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let token = it.next().expect("non-empty line").to_string();
            let mut vec = Vec::with_capacity(dim);
            for tok in it {
                let v: f64 = tok.parse().map_err(|_| LangError::Parse {
                    path: path.to_string(),
                    line: i + 1,
                    message: format!("bad float {tok:?}"),
                })?;
                vec.push(v);
            }
            if vec.len() != dim {
                return Err(LangError::Parse {
                    path: path.to_string(),
                    line: i + 1,
                    message: format!("expected {dim} values, found {}", vec.len()),
                });
            }
            if table.vocab.insert(token, vec).is_some() {
                table.duplicates += 1;
            }
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vocab.contains_key(token)
    }

    /// Vector for a token; out-of-vocabulary tokens go through the OOV
    /// policy. The same token always yields the same vector.
    pub fn lookup(&self, token: &str) -> Vec<f64> {
        if let Some(v) = self.vocab.get(token) {
            return v.clone();
        }
        match self.oov {
            OovPolicy::Zero => vec![0.0; self.dim],
            OovPolicy::HashedRandom { seed } => {
                let key = seeding::mix(seed, seeding::fnv1a(token.as_bytes()));
                let mut rng = ChaCha8Rng::seed_from_u64(key);
                (0..self.dim).map(|_| rng.random_range(-0.5..0.5)).collect()
            }
        }
    }
}

/// Lowercase, split on whitespace, strip punctuation except underscores
/// and hyphens (so tokens like `goal_pos` and `pick-place` survive).
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|word| {
            let token: String = word
                .chars()
                .filter(|c| c.is_alphanumeric() || *c == '_' || *c == '-')
                .flat_map(|c| c.to_lowercase())
                .collect();
            if token.is_empty() {
                None
            } else {
                Some(token)
            }
        })
        .collect()
}

/// One vector per token, in order.
pub fn encode_instruction(tokens: &[String], table: &EmbeddingTable) -> Vec<Vec<f64>> {
    tokens.iter().map(|t| table.lookup(t)).collect()
}

/// All instruction templates of one task, tokenized and pre-encoded.
#[derive(Debug, Clone)]
pub struct InstructionSet {
    pub task: String,
    pub templates: Vec<Vec<String>>,
    pub encoded: Vec<Vec<Vec<f64>>>,
}

impl InstructionSet {
    pub fn new(
        task: String,
        instructions: &[String],
        table: &EmbeddingTable,
    ) -> Result<Self, LangError> {
        let templates: Vec<Vec<String>> = instructions.iter().map(|s| tokenize(s)).collect();
        if templates.is_empty() || templates.iter().any(|t| t.is_empty()) {
            return Err(LangError::NoTemplates(task));
        }
        let encoded = templates
            .iter()
            .map(|t| encode_instruction(t, table))
            .collect();
        Ok(InstructionSet {
            task,
            templates,
            encoded,
        })
    }

    /// Uniform choice among this task's templates.
    pub fn sample(&self, rng: &mut impl Rng) -> (usize, &[Vec<f64>]) {
        let i = rng.random_range(0..self.encoded.len());
        (i, &self.encoded[i])
    }

    pub fn max_len(&self) -> usize {
        self.templates.iter().map(|t| t.len()).max().unwrap_or(0)
    }
}

/// Instruction config file: one `[task]` block per task, one instruction
/// per line inside the block, `#` comments allowed:
///
/// ```text
/// [reach]
/// reach to goal_pos
/// reach goal_pos
/// ```
pub fn load_instructions(
    path: &Path,
    table: &EmbeddingTable,
) -> Result<BTreeMap<String, InstructionSet>, LangError> {
    let text = std::fs::read_to_string(path).map_err(|source| LangError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_instructions(&text, &path.display().to_string(), table)
}

pub fn parse_instructions(
    text: &str,
    path: &str,
    table: &EmbeddingTable,
) -> Result<BTreeMap<String, InstructionSet>, LangError> {
    let mut blocks: Vec<(String, Vec<String>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name.strip_suffix(']').ok_or_else(|| LangError::Parse {
                path: path.to_string(),
                line: i + 1,
                message: "unterminated task header".into(),
            })?;
            blocks.push((name.trim().to_string(), Vec::new()));
        } else {
            let Some(last) = blocks.last_mut() else {
                return Err(LangError::Parse {
                    path: path.to_string(),
                    line: i + 1,
                    message: "instruction before any [task] header".into(),
                });
            };
            last.1.push(line.to_string());
        }
    }
    let mut out = BTreeMap::new();
    for (task, strings) in blocks {
        let set = InstructionSet::new(task.clone(), &strings, table)?;
        out.insert(task, set);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_table() -> EmbeddingTable {
        let text = "push 0.1 0.2 0.3\nto 0.4 0.5 0.6\ngoal_pos 0.7 0.8 0.9\n";
        EmbeddingTable::parse(text, "test", 3, OovPolicy::HashedRandom { seed: 1 }).unwrap()
    }

    #[test]
    fn parse_basic_entry() {
        let table = small_table();
        assert_eq!(table.lookup("push"), vec![0.1, 0.2, 0.3]);
        assert_eq!(table.len(), 3);
    }

    #[test]
    fn fifty_dim_line() {
        let values: Vec<String> = (0..50).map(|i| format!("{}", i as f64 * 0.01)).collect();
        let text = format!("push {}\n", values.join(" "));
        let table = EmbeddingTable::parse(&text, "t", 50, OovPolicy::Zero).unwrap();
        assert_eq!(table.lookup("push").len(), 50);
    }

    #[test]
    fn empty_file_hits_oov_policy() {
        let table = EmbeddingTable::parse("", "t", 3, OovPolicy::Zero).unwrap();
        assert!(table.is_empty());
        assert_eq!(table.lookup("anything"), vec![0.0; 3]);

        let hashed =
            EmbeddingTable::parse("", "t", 3, OovPolicy::HashedRandom { seed: 5 }).unwrap();
        let a = hashed.lookup("anything");
        assert_eq!(a.len(), 3);
        assert_eq!(a, hashed.lookup("anything"));
        assert_ne!(a, hashed.lookup("something"));
    }

    #[test]
    fn duplicate_token_counts_once_last_wins() {
        let text = "push 1 1 1\npush 2 2 2\n";
        let table = EmbeddingTable::parse(text, "t", 3, OovPolicy::Zero).unwrap();
        assert_eq!(table.len(), 1);
        assert_eq!(table.duplicates, 1);
        assert_eq!(table.lookup("push"), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = EmbeddingTable::parse("ok 1 2 3\nbad 1 x 3\n", "emb.txt", 3, OovPolicy::Zero)
            .unwrap_err();
        assert!(err.to_string().contains("emb.txt:2"), "{err}");
    }

    #[test]
    fn wrong_width_is_an_error() {
        let err = EmbeddingTable::parse("short 1 2\n", "emb.txt", 3, OovPolicy::Zero).unwrap_err();
        assert!(err.to_string().contains("expected 3"), "{err}");
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Push to goal_pos"), vec!["push", "to", "goal_pos"]);
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(
            tokenize("Press button down."),
            vec!["press", "button", "down"]
        );
        assert_eq!(tokenize("pick-place it!"), vec!["pick-place", "it"]);
    }

    #[test]
    fn encode_preserves_length_and_values() {
        let table = small_table();
        let tokens = tokenize("push to goal_pos");
        let encoded = encode_instruction(&tokens, &table);
        assert_eq!(encoded.len(), 3);
        for (tok, vec) in tokens.iter().zip(&encoded) {
            assert_eq!(*vec, table.lookup(tok));
        }
        assert_eq!(encoded, encode_instruction(&tokens, &table));
    }

    #[test]
    fn sampling_single_template_is_constant() {
        let table = small_table();
        let set = InstructionSet::new("t".into(), &["push to goal_pos".into()], &table).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10 {
            assert_eq!(set.sample(&mut rng).0, 0);
        }
    }

    #[test]
    fn sampling_three_templates_is_roughly_uniform() {
        let table = small_table();
        let set = InstructionSet::new(
            "t".into(),
            &[
                "push goal_pos".into(),
                "push to goal_pos".into(),
                "to goal_pos".into(),
            ],
            &table,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut counts = [0usize; 3];
        for _ in 0..3000 {
            counts[set.sample(&mut rng).0] += 1;
        }
        for c in counts {
            assert!((850..=1150).contains(&c), "counts {counts:?}");
        }
    }
}
