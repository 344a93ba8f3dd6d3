//! Synthetic fictitious-author QA corpus with forget/retain/world splits.
//!
//! Every answer is produced from a closed template vocabulary, so the
//! downstream word-level tokenizer never sees an unknown word.

pub mod templates;

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::tokenizer::split_words;
use templates::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Forget,
    Retain,
    RealAuthorsAnalog,
    RealWorldAnalog,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Forget, Split::Retain, Split::RealAuthorsAnalog, Split::RealWorldAnalog];

    pub fn is_author(self) -> bool {
        matches!(self, Split::Forget | Split::Retain)
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::RealAuthorsAnalog => "real_authors_analog",
            Split::RealWorldAnalog => "real_world_analog",
        }
    }
}

/// One QA item. JSON keys match the usual benchmark field names.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub subject: String,
    pub question: String,
    pub answer: String,
    pub paraphrased_question: String,
    #[serde(rename = "perturbed_answer")]
    pub perturbed_answers: Vec<String>,
    pub split: Split,
}

impl QaRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.question.contains(&self.subject) {
            return Err(Error::Validation(format!(
                "record {}: subject `{}` not in question",
                self.id, self.subject
            )));
        }
        if self.perturbed_answers.len() < 2 {
            return Err(Error::Validation(format!(
                "record {}: needs at least two perturbed answers",
                self.id
            )));
        }
        if self.perturbed_answers.iter().any(|p| p == &self.answer) {
            return Err(Error::Validation(format!(
                "record {}: perturbed answer equals the answer",
                self.id
            )));
        }
        Ok(())
    }

    /// Answer words that carry the fact: those not shared by every perturbed
    /// answer. Template words and the subject are common to all perturbations.
    pub fn fact_tokens(&self) -> BTreeSet<String> {
        let mut common: Option<HashSet<String>> = None;
        for p in &self.perturbed_answers {
            let words: HashSet<String> = split_words(p).into_iter().collect();
            common = Some(match common {
                None => words,
                Some(c) => c.intersection(&words).cloned().collect(),
            });
        }
        let common = common.unwrap_or_default();
        split_words(&self.answer)
            .into_iter()
            .filter(|w| !common.contains(w))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_authors: usize,
    pub questions_per_author: usize,
    pub forget_fraction: f64,
    pub n_world_records: usize,
    pub perturbed_per_record: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 7,
            n_authors: 20,
            questions_per_author: 20,
            forget_fraction: 0.1,
            n_world_records: 50,
            perturbed_per_record: 3,
        }
    }
}

/// Number of authors in the forget split, or an error when the fraction does
/// not select a whole number of authors.
pub fn forget_author_count(n_authors: usize, forget_fraction: f64) -> Result<usize> {
    if !(forget_fraction > 0.0 && forget_fraction < 1.0) {
        return Err(Error::config("forget_fraction", "must lie strictly between 0 and 1"));
    }
    let exact = forget_fraction * n_authors as f64;
    let k = exact.round();
    if (exact - k).abs() > 1e-9 || k < 1.0 {
        return Err(Error::config(
            "forget_fraction",
            format!("{forget_fraction} x {n_authors} authors = {exact} is not a whole number of authors"),
        ));
    }
    Ok(k as usize)
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("n_authors", self.n_authors),
            ("questions_per_author", self.questions_per_author),
            ("n_world_records", self.n_world_records),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.perturbed_per_record < 2 {
            return Err(Error::config("perturbed_per_record", "must be at least 2"));
        }
        if self.questions_per_author > QUESTION_TEMPLATES.len() {
            return Err(Error::config(
                "questions_per_author",
                format!("at most {} question templates exist", QUESTION_TEMPLATES.len()),
            ));
        }
        if self.n_authors > FIRST_NAMES.len() * LAST_NAMES.len() {
            return Err(Error::config("n_authors", "exceeds the number of distinct names"));
        }
        let world_capacity = FAMOUS_BOOKS.len() * BOOK_TEMPLATES.len()
            + CAPITALS.len() * CAPITAL_TEMPLATES.len();
        if self.n_world_records > world_capacity {
            return Err(Error::config(
                "n_world_records",
                format!("at most {world_capacity} world records can be generated"),
            ));
        }
        forget_author_count(self.n_authors, self.forget_fraction)?;
        Ok(())
    }
}

struct Author {
    name: String,
    facts: Vec<String>,
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str]) -> &'a str {
    pool.choose(rng).expect("non-empty pool")
}

fn draw_fact(rng: &mut ChaCha8Rng, slot: Slot, birth_year: u32) -> String {
    match slot {
        Slot::Genre => pick(rng, GENRES).into(),
        Slot::BirthCity | Slot::HomeCity => pick(rng, CITIES).into(),
        Slot::BirthYear => birth_year.to_string(),
        Slot::DebutYear => (birth_year + rng.random_range(22..36)).to_string(),
        Slot::FatherJob | Slot::MotherJob | Slot::EarlyJob => pick(rng, PROFESSIONS).into(),
        Slot::FirstBook | Slot::SecondBook => format!(
            "{} {} {}",
            pick(rng, TITLE_ADJECTIVES),
            pick(rng, TITLE_NOUNS),
            pick(rng, TITLE_ENDINGS)
        ),
        Slot::Award => pick(rng, AWARDS).into(),
        Slot::Language => pick(rng, LANGUAGES).into(),
        Slot::Theme => pick(rng, THEMES).into(),
        Slot::NovelCount => pick(rng, COUNTS).into(),
        Slot::Publisher => pick(rng, PUBLISHERS).into(),
        Slot::Inspiration => pick(rng, INSPIRATIONS).into(),
        Slot::WritingTime => pick(rng, WRITING_TIMES).into(),
        Slot::Study => pick(rng, STUDIES).into(),
        Slot::Mentor => format!("{} {}", pick(rng, FIRST_NAMES), pick(rng, LAST_NAMES)),
        Slot::Hobby => pick(rng, HOBBIES).into(),
        Slot::Setting => pick(rng, SETTINGS).into(),
        Slot::Style => pick(rng, STYLES).into(),
    }
}

/// `count` distinct alternatives to `fact` drawn from the same slot.
fn perturb(rng: &mut ChaCha8Rng, slot: Slot, fact: &str, count: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        let year = rng.random_range(1940..1996);
        let alt = draw_fact(rng, slot, year);
        if alt != fact && !out.contains(&alt) {
            out.push(alt);
        }
        attempts += 1;
        assert!(attempts < 10_000, "slot pool too small to perturb");
    }
    out
}

fn distinct_others<'a>(rng: &mut ChaCha8Rng, pool: &[&'a str], exclude: &str, count: usize) -> Vec<&'a str> {
    let mut candidates: Vec<&str> = pool.iter().copied().filter(|x| *x != exclude).collect();
    // Duplicate authors (Tolstoy, Bronte) collapse to distinct strings.
    candidates.sort_unstable();
    candidates.dedup();
    candidates.shuffle(rng);
    candidates.truncate(count);
    candidates
}

/// Deterministically generate the corpus: `n_authors × questions_per_author`
/// author records followed by `n_world_records` world-analog records.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Vec<QaRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_forget = forget_author_count(config.n_authors, config.forget_fraction)?;

    let mut names: Vec<(usize, usize)> = (0..FIRST_NAMES.len())
        .flat_map(|f| (0..LAST_NAMES.len()).map(move |l| (f, l)))
        .collect();
    names.shuffle(&mut rng);
    // Avoid reusing either name part while the pools allow it.
    let mut chosen = Vec::with_capacity(config.n_authors);
    let (mut used_first, mut used_last) = (HashSet::new(), HashSet::new());
    for &(f, l) in &names {
        if chosen.len() == config.n_authors {
            break;
        }
        let fresh = !used_first.contains(&f) && !used_last.contains(&l);
        if fresh || used_first.len() >= FIRST_NAMES.len() || used_last.len() >= LAST_NAMES.len() {
            chosen.push((f, l));
            used_first.insert(f);
            used_last.insert(l);
        }
    }
    for &(f, l) in &names {
        if chosen.len() == config.n_authors {
            break;
        }
        if !chosen.contains(&(f, l)) {
            chosen.push((f, l));
        }
    }

    let authors: Vec<Author> = chosen
        .iter()
        .map(|&(f, l)| {
            let birth_year = rng.random_range(1940..1996);
            let facts = QUESTION_TEMPLATES
                .iter()
                .map(|t| draw_fact(&mut rng, t.slot, birth_year))
                .collect();
            Author {
                name: format!("{} {}", FIRST_NAMES[f], LAST_NAMES[l]),
                facts,
            }
        })
        .collect();

    let mut records = Vec::with_capacity(config.n_authors * config.questions_per_author + config.n_world_records);
    for (ai, author) in authors.iter().enumerate() {
        let split = if ai >= config.n_authors - n_forget {
            Split::Forget
        } else {
            Split::Retain
        };
        for (qi, t) in QUESTION_TEMPLATES.iter().take(config.questions_per_author).enumerate() {
            let fact = &author.facts[qi];
            let perturbed = perturb(&mut rng, t.slot, fact, config.perturbed_per_record)
                .iter()
                .map(|alt| fill(t.answer, &author.name, alt))
                .collect();
            records.push(QaRecord {
                id: format!("author{ai:03}-q{qi:02}"),
                subject: author.name.clone(),
                question: fill(t.question, &author.name, fact),
                answer: fill(t.answer, &author.name, fact),
                paraphrased_question: fill(t.paraphrase, &author.name, fact),
                perturbed_answers: perturbed,
                split,
            });
        }
    }

    let authors_pool: Vec<&str> = FAMOUS_BOOKS.iter().map(|(_, a)| *a).collect();
    let capitals_pool: Vec<&str> = CAPITALS.iter().map(|(_, c)| *c).collect();
    let mut book_order: Vec<usize> = (0..FAMOUS_BOOKS.len() * BOOK_TEMPLATES.len()).collect();
    let mut capital_order: Vec<usize> = (0..CAPITALS.len() * CAPITAL_TEMPLATES.len()).collect();
    // Primary phrasing first so small corpora cover many distinct facts.
    let book_keys: Vec<u32> = book_order.iter().map(|_| rng.random()).collect();
    let capital_keys: Vec<u32> = capital_order.iter().map(|_| rng.random()).collect();
    book_order.sort_by_key(|&i| (i / FAMOUS_BOOKS.len(), book_keys[i]));
    capital_order.sort_by_key(|&i| (i / CAPITALS.len(), capital_keys[i]));
    let (mut bi, mut ci) = (0, 0);
    for wi in 0..config.n_world_records {
        let use_books = (wi % 2 == 0 && bi < book_order.len()) || ci >= capital_order.len();
        let (split, template, subject, fact, pool) = if use_books {
            let i = book_order[bi];
            bi += 1;
            let (title, author) = FAMOUS_BOOKS[i % FAMOUS_BOOKS.len()];
            (Split::RealAuthorsAnalog, &BOOK_TEMPLATES[i / FAMOUS_BOOKS.len()], title, author, &authors_pool)
        } else {
            let i = capital_order[ci];
            ci += 1;
            let (country, capital) = CAPITALS[i % CAPITALS.len()];
            (Split::RealWorldAnalog, &CAPITAL_TEMPLATES[i / CAPITALS.len()], country, capital, &capitals_pool)
        };
        let perturbed = distinct_others(&mut rng, pool, fact, config.perturbed_per_record)
            .into_iter()
            .map(|alt| fill(template.answer, subject, alt))
            .collect();
        records.push(QaRecord {
            id: format!("world{wi:03}"),
            subject: subject.to_string(),
            question: fill(template.question, subject, fact),
            answer: fill(template.answer, subject, fact),
            paraphrased_question: fill(template.paraphrase, subject, fact),
            perturbed_answers: perturbed,
            split,
        });
    }
    Ok(records)
}

/// Partition the author records into (forget, retain) by author: the last
/// `forget_fraction` of authors, in order of first appearance, are forgotten.
pub fn split_sets(records: &[QaRecord], forget_fraction: f64) -> Result<(Vec<QaRecord>, Vec<QaRecord>)> {
    let mut authors: Vec<&str> = Vec::new();
    for r in records.iter().filter(|r| r.split.is_author()) {
        if !authors.contains(&r.subject.as_str()) {
            authors.push(&r.subject);
        }
    }
    if authors.is_empty() {
        return Err(Error::Precondition("no author records to split".into()));
    }
    let k = forget_author_count(authors.len(), forget_fraction)?;
    let forget_authors: HashSet<&str> = authors[authors.len() - k..].iter().copied().collect();
    let (forget, retain) = records
        .iter()
        .filter(|r| r.split.is_author())
        .cloned()
        .partition(|r| forget_authors.contains(r.subject.as_str()));
    Ok((forget, retain))
}

pub fn records_of(records: &[QaRecord], split: Split) -> Vec<QaRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

pub fn write_jsonl(path: &Path, records: &[QaRecord]) -> Result<()> {
    write_jsonl_items(path, records)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<QaRecord>> {
    let records: Vec<QaRecord> = read_jsonl_items(path)?;
    let mut seen = HashSet::new();
    for (i, r) in records.iter().enumerate() {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Validation(format!(
                "{}: duplicate id `{}` on line {}",
                path.display(),
                r.id,
                i + 1
            )));
        }
    }
    Ok(records)
}

/// Write any serializable items as one JSON object per line.
pub fn write_jsonl_items<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl_items<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        let cfg = CorpusConfig::default();
        let records = generate_corpus(&cfg).unwrap();
        let authors = records.iter().filter(|r| r.split.is_author()).count();
        assert_eq!(authors, 400);
        assert_eq!(records.len() - authors, 50);
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let cfg = CorpusConfig::default();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&CorpusConfig { seed: 8, ..cfg }).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.answer != y.answer));
    }

    #[test]
    fn records_satisfy_invariants() {
        let records = generate_corpus(&CorpusConfig::default()).unwrap();
        let mut ids = HashSet::new();
        for r in &records {
            r.validate().unwrap();
            assert!(ids.insert(r.id.clone()));
            let first = split_words(&r.answer)[0].clone();
            for p in &r.perturbed_answers {
                assert_eq!(split_words(p)[0], first, "{}", r.id);
            }
            assert!(!r.fact_tokens().is_empty(), "{}", r.id);
        }
    }

    #[test]
    fn split_by_author() {
        let records = generate_corpus(&CorpusConfig::default()).unwrap();
        let (forget, retain) = split_sets(&records, 0.1).unwrap();
        assert_eq!(forget.len(), 40);
        assert_eq!(retain.len(), 360);
        let f: HashSet<_> = forget.iter().map(|r| &r.subject).collect();
        assert_eq!(f.len(), 2);
        assert!(retain.iter().all(|r| !f.contains(&r.subject)));
        assert!(forget.iter().all(|r| r.split == Split::Forget));
        assert!(retain.iter().all(|r| r.split == Split::Retain));
    }

    #[test]
    fn non_integral_split_is_rejected() {
        let records = generate_corpus(&CorpusConfig::default()).unwrap();
        assert!(split_sets(&records, 0.15).is_ok());
        let err = split_sets(&records, 0.17).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "forget_fraction"));
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = CorpusConfig {
            questions_per_author: 0,
            ..CorpusConfig::default()
        };
        match generate_corpus(&cfg) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "questions_per_author"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
