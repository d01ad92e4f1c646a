//! Deterministic synthetic corpora.
//!
//! * FactTable: the context lists `CTX e SEP v` bindings, the instruction
//!   queries some of the entities and the response lists their values. The
//!   correct answer is always recoverable from the context, so faithfulness
//!   can be scored exactly.
//! * MCQ: same context, one queried entity, lettered value options; the
//!   response is the single correct letter.

mod io;
pub mod vocab;

pub use io::{read_dataset, write_dataset};
pub use vocab::Vocabulary;

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use vocab::{ANS, BOS, CTX, EOS, QRY, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    FactTable,
    Mcq,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => invalid(format!("unknown split `{other}`")),
        }
    }
}

/// One tokenized (context, instruction, response) triple.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub split: Split,
    pub task_tag: TaskTag,
    pub context: Vec<usize>,
    pub instruction: Vec<usize>,
    pub response: Vec<usize>,
    /// Queried `(entity, value)` bindings in query order.
    pub gold_bindings: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub augmented: bool,
}

impl Example {
    /// `BOS context instruction`
    pub fn prompt(&self) -> Vec<usize> {
        let mut p = Vec::with_capacity(1 + self.context.len() + self.instruction.len());
        p.push(BOS);
        p.extend_from_slice(&self.context);
        p.extend_from_slice(&self.instruction);
        p
    }

    pub fn prompt_len(&self) -> usize {
        1 + self.context.len() + self.instruction.len()
    }

    /// Prompt followed by the response.
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.prompt();
        s.extend_from_slice(&self.response);
        s
    }

    pub fn seq_len(&self) -> usize {
        self.prompt_len() + self.response.len()
    }

    /// Teacher-forcing view: model inputs, next-token labels and a mask that
    /// is true exactly where the label is a response token.
    pub fn training_view(&self) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
        let seq = self.sequence();
        let n = seq.len() - 1;
        let inputs = seq[..n].to_vec();
        let labels = seq[1..].to_vec();
        let first = self.prompt_len() - 1;
        let mask = (0..n).map(|t| t >= first).collect();
        (inputs, labels, mask)
    }
}

/// A list of examples; each example carries its own split tag.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn split(&self, split: Split) -> Dataset {
        Dataset::new(
            self.examples
                .iter()
                .filter(|e| e.split == split)
                .cloned()
                .collect(),
        )
    }

    pub fn contains_split(&self, split: Split) -> bool {
        self.examples.iter().any(|e| e.split == split)
    }

    /// Errors when any example is tagged as training data.
    pub fn ensure_evaluation_split(&self) -> Result<()> {
        if self.contains_split(Split::Train) {
            return invalid("evaluation refuses training-split examples; use val or test");
        }
        Ok(())
    }

    pub fn max_seq_len(&self) -> usize {
        self.examples.iter().map(Example::seq_len).max().unwrap_or(0)
    }

    pub fn task(&self) -> Option<TaskTag> {
        self.examples.first().map(|e| e.task_tag)
    }

    /// Largest token id used plus one.
    pub fn vocab_extent(&self) -> usize {
        self.examples
            .iter()
            .flat_map(|e| e.sequence())
            .max()
            .map_or(0, |m| m + 1)
    }
}

/// Parameters of a synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub task: TaskTag,
    pub n_examples: usize,
    pub n_entities: usize,
    pub n_values: usize,
    pub facts_per_context: usize,
    pub queried_facts: usize,
    #[serde(default)]
    pub distractor_count: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub n_choices: Option<usize>,
    /// Upper bound on `BOS + context + instruction + response`.
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
}

fn default_max_seq_len() -> usize {
    64
}

impl CorpusSpec {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.n_entities, self.n_values)
    }

    fn context_facts(&self) -> usize {
        self.facts_per_context + self.distractor_count
    }

    /// Token count of one rendered example.
    pub fn sequence_len(&self) -> usize {
        let context = 4 * self.context_facts();
        match self.task {
            TaskTag::FactTable => 1 + context + (1 + self.queried_facts) + (self.queried_facts + 2),
            TaskTag::Mcq => 1 + context + (3 + 2 * self.n_choices.unwrap_or(0)) + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_examples == 0 {
            return invalid("n_examples must be positive");
        }
        if self.facts_per_context == 0 {
            return invalid("facts_per_context must be positive");
        }
        if self.queried_facts == 0 || self.queried_facts > self.facts_per_context {
            return invalid(format!(
                "queried_facts must be in 1..=facts_per_context ({}), got {}",
                self.facts_per_context, self.queried_facts
            ));
        }
        if self.context_facts() > self.n_entities {
            return invalid(format!(
                "context needs {} distinct entities but the pool has {}",
                self.context_facts(),
                self.n_entities
            ));
        }
        if self.context_facts() > self.n_values {
            return invalid(format!(
                "context needs {} distinct values but the pool has {}",
                self.context_facts(),
                self.n_values
            ));
        }
        if self.task == TaskTag::Mcq {
            let k = self.n_choices.unwrap_or(0);
            if !(2..=5).contains(&k) {
                return invalid(format!("n_choices must be between 2 and 5, got {k}"));
            }
            if self.queried_facts != 1 {
                return invalid("mcq examples query exactly one fact");
            }
            if k > self.n_values {
                return invalid("n_choices exceeds the value pool");
            }
        }
        if self.sequence_len() > self.max_seq_len {
            return invalid(format!(
                "rendered examples need {} tokens, exceeding max_seq_len {}",
                self.sequence_len(),
                self.max_seq_len
            ));
        }
        Ok(())
    }
}

/// Generates the corpus described by `spec` (either task).
pub fn generate(spec: &CorpusSpec) -> Result<Dataset> {
    match spec.task {
        TaskTag::FactTable => generate_fact_table(spec),
        TaskTag::Mcq => generate_mcq(spec),
    }
}

struct Table {
    /// `(entity, value)` token pairs in context order.
    facts: Vec<(usize, usize)>,
    /// Indices into `facts` eligible for querying.
    queryable: Vec<usize>,
    tokens: Vec<usize>,
}

fn sample_table(spec: &CorpusSpec, vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> Table {
    let n = spec.context_facts();
    let entities = index::sample(rng, spec.n_entities, n).into_vec();
    let values = index::sample(rng, spec.n_values, n).into_vec();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    // The first `facts_per_context` sampled bindings are queryable, the rest
    // are distractors; `order` interleaves them in the rendered context.
    let facts: Vec<(usize, usize)> = order
        .iter()
        .map(|&i| (vocab.entity(entities[i]), vocab.value(values[i])))
        .collect();
    let queryable = order
        .iter()
        .enumerate()
        .filter(|(_, &i)| i < spec.facts_per_context)
        .map(|(pos, _)| pos)
        .collect();
    let mut tokens = Vec::with_capacity(4 * n);
    for &(e, v) in &facts {
        tokens.extend([CTX, e, SEP, v]);
    }
    Table {
        facts,
        queryable,
        tokens,
    }
}

/// Ranks example indices by a fixed hash and cuts 80/10/10.
pub fn assign_splits(n: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (splitmix64(i as u64), i));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_fact_table(spec: &CorpusSpec) -> Result<Dataset> {
    if spec.task != TaskTag::FactTable {
        return invalid("spec is not a fact_table spec");
    }
    spec.validate()?;
    let vocab = spec.vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let splits = assign_splits(spec.n_examples);
    let mut examples = Vec::with_capacity(spec.n_examples);
    for (id, split) in splits.into_iter().enumerate() {
        let table = sample_table(spec, &vocab, &mut rng);
        let picks = index::sample(&mut rng, table.queryable.len(), spec.queried_facts).into_vec();
        let gold: Vec<(usize, usize)> = picks
            .iter()
            .map(|&k| table.facts[table.queryable[k]])
            .collect();
        let mut instruction = vec![QRY];
        instruction.extend(gold.iter().map(|&(e, _)| e));
        let mut response = vec![ANS];
        response.extend(gold.iter().map(|&(_, v)| v));
        response.push(EOS);
        examples.push(Example {
            id,
            split,
            task_tag: TaskTag::FactTable,
            context: table.tokens,
            instruction,
            response,
            gold_bindings: gold,
            augmented: false,
        });
    }
    Ok(Dataset::new(examples))
}

pub fn generate_mcq(spec: &CorpusSpec) -> Result<Dataset> {
    if spec.task != TaskTag::Mcq {
        return invalid("spec is not an mcq spec");
    }
    spec.validate()?;
    let vocab = spec.vocabulary();
    let n_choices = spec.n_choices.expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let splits = assign_splits(spec.n_examples);
    let mut examples = Vec::with_capacity(spec.n_examples);
    for (id, split) in splits.into_iter().enumerate() {
        let table = sample_table(spec, &vocab, &mut rng);
        let q = table.queryable[rng.gen_range(0..table.queryable.len())];
        let (entity, answer) = table.facts[q];

        // Wrong options prefer values bound elsewhere in the same context.
        let mut wrong: Vec<usize> = table
            .facts
            .iter()
            .map(|&(_, v)| v)
            .filter(|&v| v != answer)
            .collect();
        wrong.shuffle(&mut rng);
        wrong.truncate(n_choices - 1);
        while wrong.len() < n_choices - 1 {
            let v = vocab.value(rng.gen_range(0..spec.n_values));
            if v != answer && !wrong.contains(&v) {
                wrong.push(v);
            }
        }
        let correct_pos = rng.gen_range(0..n_choices);
        let mut options = wrong;
        options.insert(correct_pos, answer);

        let mut instruction = vec![QRY, entity];
        for (k, &v) in options.iter().enumerate() {
            instruction.extend([vocab.letter(k), v]);
        }
        instruction.push(ANS);
        examples.push(Example {
            id,
            split,
            task_tag: TaskTag::Mcq,
            context: table.tokens,
            instruction,
            response: vec![vocab.letter(correct_pos)],
            gold_bindings: vec![(entity, answer)],
            augmented: false,
        });
    }
    Ok(Dataset::new(examples))
}

/// `(letter token, value token)` options of an MCQ instruction.
pub fn mcq_options(example: &Example) -> Vec<(usize, usize)> {
    // QRY entity (letter value)* ANS
    let body = &example.instruction[2..example.instruction.len().saturating_sub(1)];
    body.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}
