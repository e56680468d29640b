//! Character-level tokenizer, deterministic textualized-tree generator with
//! the parent-child query task, and the generic JSONL prompt/completion
//! dataset format.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD_ID: usize = 0;
pub const STOP_ID: usize = 1;
pub const LABEL_TRUE_ID: usize = 2;
pub const LABEL_FALSE_ID: usize = 3;
pub const N_RESERVED: usize = 4;

const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 \n\t.,:;!?()[]{}<>-_='\"/\\+*#@%&|^~`$";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("n_nodes {0} out of range [2, 150]")]
    NodesOutOfRange(usize),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{malformed} of {total} lines malformed (> 1%); first errors: {summary}")]
    TooManyMalformed { malformed: usize, total: usize, summary: String },
}

/// Character-level tokenizer over a fixed ~100-symbol alphabet plus four
/// reserved ids (pad, stop, label-true, label-false). Raw-text encoding
/// never produces a reserved id.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    char_to_id: HashMap<char, usize>,
    id_to_char: Vec<char>,
    replacement: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut char_to_id = HashMap::new();
        let mut id_to_char = Vec::new();
        for (i, c) in ALPHABET.chars().enumerate() {
            char_to_id.insert(c, N_RESERVED + i);
            id_to_char.push(c);
        }
        let replacement = char_to_id[&'?'];
        Tokenizer { char_to_id, id_to_char, replacement }
    }

    pub fn vocab_size(&self) -> usize {
        N_RESERVED + self.id_to_char.len()
    }

    /// Encode text; unsupported characters map to the replacement id and are
    /// counted in the second return value.
    pub fn encode(&self, text: &str) -> (Vec<usize>, usize) {
        let mut warnings = 0;
        let ids = text
            .chars()
            .map(|c| match self.char_to_id.get(&c) {
                Some(&id) => id,
                None => {
                    warnings += 1;
                    self.replacement
                }
            })
            .collect();
        (ids, warnings)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| match id {
                PAD_ID | STOP_ID => String::new(),
                LABEL_TRUE_ID => "true".to_string(),
                LABEL_FALSE_ID => "false".to_string(),
                _ => self
                    .id_to_char
                    .get(id - N_RESERVED)
                    .map(|c| c.to_string())
                    .unwrap_or_default(),
            })
            .collect()
    }
}

/// A rooted ordered tree with an indentation rendering and a parent-child
/// query. `parents[i]` is the parent of node `i` (node 0 is the root).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeSample {
    pub parents: Vec<usize>,
    /// BFS-order display name of each node ("n0", "n1", ...).
    pub names: Vec<String>,
    pub text: String,
    pub query: (String, String),
    pub label: bool,
}

impl TreeSample {
    pub fn prompt(&self) -> String {
        format!("{}\n\nparent: {} child: {}?", self.text, self.query.0, self.query.1)
    }

    pub fn completion(&self) -> &'static str {
        if self.label {
            "true"
        } else {
            "false"
        }
    }
}

/// Deterministic uniform-attachment tree with a balanced parent-child query.
pub fn gen_tree(n_nodes: usize, seed: u64) -> Result<TreeSample, DataError> {
    if !(2..=150).contains(&n_nodes) {
        return Err(DataError::NodesOutOfRange(n_nodes));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // each new node attaches to a uniformly chosen existing node
    let mut parents = vec![0usize; n_nodes];
    for i in 1..n_nodes {
        parents[i] = rng.gen_range(0..i);
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for i in 1..n_nodes {
        children[parents[i]].push(i);
    }
    // names follow breadth-first order
    let mut names = vec![String::new(); n_nodes];
    let mut queue = std::collections::VecDeque::from([0usize]);
    let mut next_name = 0;
    while let Some(node) = queue.pop_front() {
        names[node] = format!("n{next_name}");
        next_name += 1;
        for &c in &children[node] {
            queue.push_back(c);
        }
    }
    // indentation rendering, depth-first, two spaces per level
    let mut lines = Vec::with_capacity(n_nodes);
    let mut stack = vec![(0usize, 0usize)];
    while let Some((node, depth)) = stack.pop() {
        lines.push(format!("{}{}", "  ".repeat(depth), names[node]));
        for &c in children[node].iter().rev() {
            stack.push((c, depth + 1));
        }
    }
    let text = lines.join("\n");

    let positive = rng.gen_bool(0.5);
    let (a, b) = if positive {
        let child = rng.gen_range(1..n_nodes);
        (parents[child], child)
    } else {
        loop {
            let a = rng.gen_range(0..n_nodes);
            let b = rng.gen_range(0..n_nodes);
            if a != b && !(b != 0 && parents[b] == a) {
                break (a, b);
            }
        }
    };
    Ok(TreeSample {
        query: (names[a].clone(), names[b].clone()),
        label: positive,
        parents,
        names,
        text,
    })
}

/// True iff `node_a` is the direct parent of `node_b`. Direction matters.
pub fn label_oracle(tree: &TreeSample, node_a: &str, node_b: &str) -> Result<bool, DataError> {
    let find = |n: &str| {
        tree.names
            .iter()
            .position(|x| x == n)
            .ok_or_else(|| DataError::UnknownNode(n.to_string()))
    };
    let a = find(node_a)?;
    let b = find(node_b)?;
    Ok(b != 0 && tree.parents[b] == a)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq, Default)]
pub struct SampleMeta {
    #[serde(default)]
    pub task: String,
    #[serde(default)]
    pub seed: u64,
}

/// Generic prompt/completion record, one JSON object per JSONL line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SampleRecord {
    pub prompt: String,
    pub completion: String,
    #[serde(default)]
    pub meta: SampleMeta,
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub records: Vec<SampleRecord>,
    /// (1-based line number, parse error) per malformed line.
    pub malformed: Vec<(usize, String)>,
}

/// Load a JSONL dataset, skipping (and reporting) malformed lines.
/// Aborts if more than 1% of nonempty lines are malformed.
pub fn load_jsonl(path: &Path) -> Result<LoadReport, DataError> {
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let reader = std::io::BufReader::new(file);
    let mut report = LoadReport::default();
    let mut total = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| DataError::Io { path: path.display().to_string(), source: e })?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match serde_json::from_str::<SampleRecord>(&line) {
            Ok(rec) if !rec.completion.is_empty() => report.records.push(rec),
            Ok(_) => report.malformed.push((i + 1, "empty completion".to_string())),
            Err(e) => report.malformed.push((i + 1, e.to_string())),
        }
    }
    if total > 0 && report.malformed.len() * 100 > total {
        let summary = report
            .malformed
            .iter()
            .take(3)
            .map(|(l, e)| format!("line {l}: {e}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(DataError::TooManyMalformed {
            malformed: report.malformed.len(),
            total,
            summary,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_node_tree() {
        let t = gen_tree(2, 1).unwrap();
        assert_eq!(t.parents, vec![0, 0]);
        assert_eq!(t.text.lines().count(), 2);
        assert!(label_oracle(&t, "n0", "n1").unwrap());
        assert!(!label_oracle(&t, "n1", "n0").unwrap());
    }

    #[test]
    fn five_node_tree_has_five_lines() {
        let t = gen_tree(5, 42).unwrap();
        assert_eq!(t.text.lines().count(), 5);
    }

    #[test]
    fn grandchild_is_not_direct_child() {
        // chain 0 -> 1 -> 2 by searching seeds
        for seed in 0..200 {
            let t = gen_tree(3, seed).unwrap();
            if t.parents[2] == 1 {
                assert!(!label_oracle(&t, "n0", &t.names[2].clone()).unwrap());
                return;
            }
        }
        panic!("no chain tree found");
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(gen_tree(10, 7).unwrap(), gen_tree(10, 7).unwrap());
        assert_ne!(gen_tree(10, 7).unwrap(), gen_tree(10, 8).unwrap());
    }

    #[test]
    fn nodes_out_of_range() {
        assert!(gen_tree(1, 0).is_err());
        assert!(gen_tree(151, 0).is_err());
    }

    #[test]
    fn unknown_node_is_error() {
        let t = gen_tree(3, 0).unwrap();
        assert!(label_oracle(&t, "n9", "n0").is_err());
    }

    #[test]
    fn tokenizer_roundtrip() {
        let tok = Tokenizer::new();
        assert_eq!(tok.encode("").0, Vec::<usize>::new());
        assert_eq!(tok.decode(&[]), "");
        let (ids, w) = tok.encode("ab");
        assert_eq!(ids.len(), 2);
        assert_eq!(w, 0);
        assert_eq!(tok.decode(&ids), "ab");
        let t = gen_tree(12, 3).unwrap();
        let (ids, w) = tok.encode(&t.prompt());
        assert_eq!(w, 0);
        assert_eq!(tok.decode(&ids), t.prompt());
    }

    #[test]
    fn tokenizer_replacement_warns() {
        let tok = Tokenizer::new();
        let (ids, w) = tok.encode("aé");
        assert_eq!(w, 1);
        assert_eq!(tok.decode(&ids), "a?");
    }

    #[test]
    fn reserved_ids_never_from_raw_text() {
        let tok = Tokenizer::new();
        let (ids, _) = tok.encode(ALPHABET);
        assert!(ids.iter().all(|&i| i >= N_RESERVED));
    }

    #[test]
    fn jsonl_roundtrip_and_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(
            &p,
            concat!(
                r#"{"prompt":"a","completion":"x"}"#,
                "\n",
                r#"{"prompt":"b","completion":"y","meta":{"task":"t","seed":3}}"#,
                "\n",
                r#"{"prompt":"c","completion":"z"}"#,
                "\n",
            ),
        )
        .unwrap();
        let r = load_jsonl(&p).unwrap();
        assert_eq!(r.records.len(), 3);
        assert_eq!(r.records[1].meta.seed, 3);
        assert!(r.malformed.is_empty());
    }

    #[test]
    fn jsonl_missing_completion_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut lines: Vec<String> = (0..200)
            .map(|i| format!(r#"{{"prompt":"p{i}","completion":"c{i}"}}"#))
            .collect();
        lines.push(r#"{"prompt":"only"}"#.to_string());
        std::fs::write(&p, lines.join("\n")).unwrap();
        let r = load_jsonl(&p).unwrap();
        assert_eq!(r.records.len(), 200);
        assert_eq!(r.malformed.len(), 1);
        assert_eq!(r.malformed[0].0, 201);
    }

    #[test]
    fn jsonl_aborts_over_one_percent() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "not json\n{\"prompt\":\"a\",\"completion\":\"b\"}\n").unwrap();
        assert!(matches!(load_jsonl(&p), Err(DataError::TooManyMalformed { .. })));
    }

    #[test]
    fn empty_file_is_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_jsonl(&p).unwrap().records.is_empty());
    }

    #[test]
    fn label_balance_over_stream() {
        let n = 10_000;
        let pos = (0..n).filter(|&i| gen_tree(5, i as u64).unwrap().label).count();
        let frac = pos as f64 / n as f64;
        assert!((0.49..=0.51).contains(&frac), "positive fraction {frac}");
    }

    #[test]
    fn generator_label_matches_oracle() {
        for seed in 0..500 {
            let t = gen_tree(8, seed).unwrap();
            assert_eq!(t.label, label_oracle(&t, &t.query.0, &t.query.1).unwrap());
        }
    }
}
