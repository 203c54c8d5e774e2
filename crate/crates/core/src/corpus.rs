//! Document → paragraph → sentence hierarchy used as the sampling universe
//! for paragraph-membership pre-training.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub text: String,
    pub doc_id: u32,
    pub para_id: u32,
    pub sent_id: u32,
}

impl Sentence {
    /// Provenance triple `(doc_id, para_id, sent_id)`.
    pub fn key(&self) -> (u32, u32, u32) {
        (self.doc_id, self.para_id, self.sent_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Paragraph {
    pub para_id: u32,
    pub sentences: Vec<Sentence>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub doc_id: u32,
    pub paragraphs: Vec<Paragraph>,
}

/// Immutable corpus with dense ids and flat sentence indices.
///
/// Every sentence also has a global index in document/paragraph/sentence
/// order, so the sentences of one document (or one paragraph) occupy a
/// contiguous range of global indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    flat: Vec<(u32, u32, u32)>,
    doc_ranges: Vec<Range<usize>>,
    para_ranges: Vec<Vec<Range<usize>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_documents: usize,
    pub num_paragraphs: usize,
    pub num_sentences: usize,
    pub num_mspp_eligible_anchors: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    JsonlDocs,
    PlaintextDir,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl-docs" | "jsonl" => Ok(CorpusFormat::JsonlDocs),
            "plaintext-dir" | "plaintext" => Ok(CorpusFormat::PlaintextDir),
            other => Err(Error::InvalidConfig(format!("unknown corpus format {other:?}"))),
        }
    }
}

impl Corpus {
    /// Builds a corpus from raw nested text, assigning dense ids in order.
    ///
    /// Sentences are trimmed; empty sentences, paragraphs or documents are
    /// rejected so the id invariants hold.
    pub fn from_texts(docs: Vec<Vec<Vec<String>>>) -> Result<Self> {
        let mut documents = Vec::with_capacity(docs.len());
        for (d, paras) in docs.into_iter().enumerate() {
            if paras.is_empty() {
                return Err(Error::malformed(format!("document {d}"), "document has no paragraphs"));
            }
            let mut paragraphs = Vec::with_capacity(paras.len());
            for (p, sents) in paras.into_iter().enumerate() {
                if sents.is_empty() {
                    return Err(Error::malformed(
                        format!("document {d}, paragraph {p}"),
                        "paragraph has no sentences",
                    ));
                }
                let mut sentences = Vec::with_capacity(sents.len());
                for (s, text) in sents.into_iter().enumerate() {
                    let text = text.trim();
                    if text.is_empty() {
                        return Err(Error::malformed(
                            format!("document {d}, paragraph {p}, sentence {s}"),
                            "empty sentence",
                        ));
                    }
                    sentences.push(Sentence {
                        text: text.to_string(),
                        doc_id: d as u32,
                        para_id: p as u32,
                        sent_id: s as u32,
                    });
                }
                paragraphs.push(Paragraph {
                    para_id: p as u32,
                    sentences,
                });
            }
            documents.push(Document {
                doc_id: d as u32,
                paragraphs,
            });
        }
        Ok(Self::index(documents))
    }

    fn index(documents: Vec<Document>) -> Self {
        let mut flat = Vec::new();
        let mut doc_ranges = Vec::with_capacity(documents.len());
        let mut para_ranges = Vec::with_capacity(documents.len());
        for doc in &documents {
            let doc_start = flat.len();
            let mut ranges = Vec::with_capacity(doc.paragraphs.len());
            for para in &doc.paragraphs {
                let start = flat.len();
                flat.extend(para.sentences.iter().map(Sentence::key));
                ranges.push(start..flat.len());
            }
            doc_ranges.push(doc_start..flat.len());
            para_ranges.push(ranges);
        }
        Corpus {
            documents,
            flat,
            doc_ranges,
            para_ranges,
        }
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn num_sentences(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// Sentence at a global index.
    pub fn sentence(&self, global: usize) -> &Sentence {
        let (d, p, s) = self.flat[global];
        &self.documents[d as usize].paragraphs[p as usize].sentences[s as usize]
    }

    pub fn get(&self, doc_id: u32, para_id: u32, sent_id: u32) -> Option<&Sentence> {
        self.documents
            .get(doc_id as usize)?
            .paragraphs
            .get(para_id as usize)?
            .sentences
            .get(sent_id as usize)
    }

    /// Global index range of the sentences in a document.
    pub fn doc_range(&self, doc_id: u32) -> Range<usize> {
        self.doc_ranges[doc_id as usize].clone()
    }

    /// Global index range of the sentences in a paragraph.
    pub fn para_range(&self, doc_id: u32, para_id: u32) -> Range<usize> {
        self.para_ranges[doc_id as usize][para_id as usize].clone()
    }

    pub fn paragraphs_in(&self, doc_id: u32) -> &[Paragraph] {
        &self.documents[doc_id as usize].paragraphs
    }

    pub fn sentences_in(&self, doc_id: u32, para_id: u32) -> &[Sentence] {
        &self.documents[doc_id as usize].paragraphs[para_id as usize].sentences
    }

    pub fn iter_sentences(&self) -> impl Iterator<Item = &Sentence> {
        self.documents
            .iter()
            .flat_map(|d| d.paragraphs.iter())
            .flat_map(|p| p.sentences.iter())
    }

    pub fn stats(&self) -> CorpusStats {
        corpus_stats(self)
    }

    /// Writes the canonical jsonl-docs form, one document per line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for doc in &self.documents {
            let record = DocRecord {
                doc_id: Some(doc.doc_id as u64),
                paragraphs: doc
                    .paragraphs
                    .iter()
                    .map(|p| p.sentences.iter().map(|s| s.text.clone()).collect())
                    .collect(),
            };
            serde_json::to_writer(&mut out, &record).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        self.write_jsonl(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    doc_id: Option<u64>,
    paragraphs: Vec<Vec<String>>,
}

pub fn ingest_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    match format {
        CorpusFormat::JsonlDocs => {
            let file = fs::File::open(path)?;
            read_jsonl_docs(BufReader::new(file), &path.display().to_string())
        }
        CorpusFormat::PlaintextDir => ingest_plaintext(path),
    }
}

/// Parses jsonl-docs records. `source` names the input in error locations.
pub fn read_jsonl_docs<R: BufRead>(reader: R, source: &str) -> Result<Corpus> {
    let mut docs = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{source}:{}", lineno + 1);
        let record: DocRecord =
            serde_json::from_str(&line).map_err(|e| Error::malformed(&location, e))?;
        if let Some(id) = record.doc_id {
            if id != docs.len() as u64 {
                return Err(Error::malformed(
                    &location,
                    format!("doc_id {id} does not match record position {}", docs.len()),
                ));
            }
        }
        if record.paragraphs.is_empty() {
            return Err(Error::malformed(&location, "document has no paragraphs"));
        }
        for para in &record.paragraphs {
            if para.is_empty() {
                return Err(Error::malformed(&location, "paragraph has no sentences"));
            }
            if para.iter().any(|s| s.trim().is_empty()) {
                return Err(Error::malformed(&location, "empty sentence"));
            }
        }
        docs.push(record.paragraphs);
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Corpus::from_texts(docs)
}

fn ingest_plaintext(path: &Path) -> Result<Corpus> {
    let files = if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let mut docs = Vec::new();
    for file in files {
        let text = fs::read_to_string(&file)?;
        let paras = plaintext_paragraphs(&text);
        if !paras.is_empty() {
            docs.push(paras);
        }
    }
    if docs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Corpus::from_texts(docs)
}

/// Blank-line separated paragraphs, each split into sentences.
pub fn plaintext_paragraphs(text: &str) -> Vec<Vec<String>> {
    let mut paras = Vec::new();
    let mut current = String::new();
    let flush = |current: &mut String, paras: &mut Vec<Vec<String>>| {
        let sents = split_paragraph_into_sentences(current);
        if !sents.is_empty() {
            paras.push(sents);
        }
        current.clear();
    };
    for line in text.lines() {
        if line.trim().is_empty() {
            flush(&mut current, &mut paras);
        } else {
            if !current.is_empty() {
                current.push(' ');
            }
            current.push_str(line.trim());
        }
    }
    flush(&mut current, &mut paras);
    paras
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

/// Rule-based sentence splitter.
///
/// A boundary follows a run of `.`, `!` or `?` when the run is at the end of
/// the text or is followed by whitespace and then an uppercase letter.
/// Segments shorter than three characters are merged into the previous one
/// (or into the next one when there is no previous segment).
pub fn split_paragraph_into_sentences(text: &str) -> Vec<String> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut raw = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    while i < chars.len() {
        if !is_terminator(chars[i].1) {
            i += 1;
            continue;
        }
        let mut j = i;
        while j + 1 < chars.len() && is_terminator(chars[j + 1].1) {
            j += 1;
        }
        let end = chars[j].0 + chars[j].1.len_utf8();
        let mut w = j + 1;
        while w < chars.len() && chars[w].1.is_whitespace() {
            w += 1;
        }
        let at_end = w == chars.len();
        let boundary = at_end || (w > j + 1 && chars[w].1.is_uppercase());
        if boundary {
            raw.push(&text[start..end]);
            start = if at_end { text.len() } else { chars[w].0 };
        }
        i = j + 1;
    }
    if start < text.len() {
        raw.push(&text[start..]);
    }

    let mut out: Vec<String> = Vec::new();
    let mut pending: Option<String> = None;
    for seg in raw {
        let seg = seg.trim();
        if seg.is_empty() {
            continue;
        }
        let seg = match pending.take() {
            Some(p) => format!("{p} {seg}"),
            None => seg.to_string(),
        };
        if seg.chars().count() < 3 {
            match out.last_mut() {
                Some(prev) => {
                    prev.push(' ');
                    prev.push_str(&seg);
                }
                None => pending = Some(seg),
            }
        } else {
            out.push(seg);
        }
    }
    if let Some(p) = pending {
        out.push(p);
    }
    out
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut stats = CorpusStats {
        num_documents: corpus.documents.len(),
        ..Default::default()
    };
    for doc in &corpus.documents {
        stats.num_paragraphs += doc.paragraphs.len();
        for para in &doc.paragraphs {
            stats.num_sentences += para.sentences.len();
            if doc.paragraphs.len() >= 2 && para.sentences.len() >= 2 {
                stats.num_mspp_eligible_anchors += para.sentences.len();
            }
        }
    }
    stats
}

/// Number of generic filler words available to the synthetic generator.
pub const SYNTHETIC_FILLER_VOCAB: usize = 64;
/// Number of words associated with each synthetic topic besides the topic word.
pub const SYNTHETIC_RELATED_WORDS: usize = 4;

pub fn topic_word(i: usize) -> String {
    format!("topic{i}")
}

/// The `j`-th word associated with topic `i`.
pub fn related_word(i: usize, j: usize) -> String {
    format!("r{i}x{j}")
}

pub fn filler_word(i: usize) -> String {
    format!("w{i}")
}

/// Builds one synthetic sentence on `topic`: the topic word, one to three
/// words associated with the topic and at most one generic filler, in random
/// order, first letter capitalized, terminated by a period.
///
/// The associated words give every token of a sentence some topical signal;
/// with a lone topic word among generic fillers, a small encoder trained
/// from scratch does not discover same-paragraph matching in a few thousand
/// steps.
pub(crate) fn synthetic_sentence<R: Rng>(rng: &mut R, topic: usize) -> String {
    let mut words = vec![topic_word(topic)];
    for _ in 0..rng.random_range(1..=3) {
        words.push(related_word(topic, rng.random_range(0..SYNTHETIC_RELATED_WORDS)));
    }
    if rng.random_bool(0.5) {
        words.push(filler_word(rng.random_range(0..SYNTHETIC_FILLER_VOCAB)));
    }
    words.shuffle(rng);
    let mut text = words.join(" ");
    if let Some(first) = text.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    text.push('.');
    text
}

/// Deterministic topic corpus: every sentence of a paragraph carries that
/// paragraph's topic word, so paragraph membership is lexically detectable.
///
/// Topics are drawn without replacement inside a document while the topic
/// vocabulary allows it, so hard negatives usually carry a different topic.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_docs: usize,
    paras_per_doc: usize,
    sents_per_para: usize,
    topic_vocab_size: usize,
) -> Result<Corpus> {
    if n_docs == 0 || paras_per_doc == 0 || sents_per_para == 0 || topic_vocab_size == 0 {
        return Err(Error::InvalidConfig(
            "synthetic corpus counts must all be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut topics: Vec<usize> = (0..topic_vocab_size).collect();
    let mut docs = Vec::with_capacity(n_docs);
    for _ in 0..n_docs {
        topics.shuffle(&mut rng);
        let mut paras = Vec::with_capacity(paras_per_doc);
        for p in 0..paras_per_doc {
            let topic = if paras_per_doc <= topic_vocab_size {
                topics[p]
            } else {
                rng.random_range(0..topic_vocab_size)
            };
            let sents = (0..sents_per_para).map(|_| synthetic_sentence(&mut rng, topic)).collect();
            paras.push(sents);
        }
        docs.push(paras);
    }
    Corpus::from_texts(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn texts(docs: &[&[&[&str]]]) -> Vec<Vec<Vec<String>>> {
        docs.iter()
            .map(|d| {
                d.iter()
                    .map(|p| p.iter().map(|s| s.to_string()).collect())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn splitter_basic_rules() {
        assert_eq!(
            split_paragraph_into_sentences("Hello there. Bye now."),
            vec!["Hello there.", "Bye now."]
        );
        assert_eq!(
            split_paragraph_into_sentences("No terminal punctuation"),
            vec!["No terminal punctuation"]
        );
        assert!(split_paragraph_into_sentences("").is_empty());
        assert!(split_paragraph_into_sentences("   ").is_empty());
    }

    #[test]
    fn splitter_needs_uppercase_after_space() {
        assert_eq!(
            split_paragraph_into_sentences("Version 2.5 is out. see below. Next one!"),
            vec!["Version 2.5 is out. see below.", "Next one!"]
        );
        assert_eq!(
            split_paragraph_into_sentences("Really?! Yes."),
            vec!["Really?!", "Yes."]
        );
    }

    #[test]
    fn splitter_merges_short_segments() {
        assert_eq!(
            split_paragraph_into_sentences("This is long. A. Then more."),
            vec!["This is long. A.", "Then more."]
        );
        assert_eq!(
            split_paragraph_into_sentences("A. Then more."),
            vec!["A. Then more."]
        );
    }

    #[test]
    fn plaintext_layout() {
        let paras = plaintext_paragraphs("A b. C d.\n\nE f.");
        assert_eq!(paras, vec![vec!["A b.", "C d."], vec!["E f."]]);
        let paras = plaintext_paragraphs("line one\ncontinues. Next.\n\n\n\nLast.\n");
        assert_eq!(paras, vec![vec!["line one continues.", "Next."], vec!["Last."]]);
    }

    #[test]
    fn stats_eligibility() {
        let one = Corpus::from_texts(texts(&[&[&["Only one."]]])).unwrap();
        assert_eq!(one.stats().num_mspp_eligible_anchors, 0);

        let c = Corpus::from_texts(texts(&[&[&["A1.", "A2."], &["B1.", "B2."]]])).unwrap();
        let s = corpus_stats(&c);
        assert_eq!(
            s,
            CorpusStats {
                num_documents: 1,
                num_paragraphs: 2,
                num_sentences: 4,
                num_mspp_eligible_anchors: 4
            }
        );

        let empty = Corpus::index(Vec::new());
        assert_eq!(corpus_stats(&empty), CorpusStats::default());
    }

    #[test]
    fn ranges_are_contiguous() {
        let c = Corpus::from_texts(texts(&[
            &[&["a1.", "a2."], &["b1."]],
            &[&["c1.", "c2.", "c3."]],
        ]))
        .unwrap();
        assert_eq!(c.doc_range(0), 0..3);
        assert_eq!(c.doc_range(1), 3..6);
        assert_eq!(c.para_range(0, 1), 2..3);
        assert_eq!(c.sentence(4).text, "c2.");
        assert_eq!(c.sentence(4).key(), (1, 0, 1));
        assert_eq!(c.get(1, 0, 2).unwrap().text, "c3.");
        assert!(c.get(1, 1, 0).is_none());
    }

    #[test]
    fn jsonl_parsing_and_errors() {
        let data = "{\"paragraphs\": [[\"S one.\", \"S two.\"], [\"S three.\", \"S four.\"]]}\n";
        let c = read_jsonl_docs(data.as_bytes(), "mem").unwrap();
        let s = c.stats();
        assert_eq!((s.num_documents, s.num_paragraphs, s.num_sentences), (1, 2, 4));

        assert!(matches!(
            read_jsonl_docs("".as_bytes(), "mem"),
            Err(Error::EmptyCorpus)
        ));

        let bad = "{\"paragraphs\": [[\"ok.\"]]}\n{\"paragraphs\": 3}\n";
        match read_jsonl_docs(bad.as_bytes(), "mem") {
            Err(Error::MalformedRecord { location, .. }) => assert_eq!(location, "mem:2"),
            other => panic!("unexpected {other:?}"),
        }

        let wrong_id = "{\"doc_id\": 4, \"paragraphs\": [[\"ok.\"]]}\n";
        assert!(matches!(
            read_jsonl_docs(wrong_id.as_bytes(), "mem"),
            Err(Error::MalformedRecord { .. })
        ));
    }

    #[test]
    fn writer_is_canonical() {
        let c = Corpus::from_texts(texts(&[&[&["Hi there."]]])).unwrap();
        let mut buf = Vec::new();
        c.write_jsonl(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "{\"doc_id\":0,\"paragraphs\":[[\"Hi there.\"]]}\n"
        );
    }

    #[test]
    fn missing_path_is_reported() {
        let err = ingest_corpus(Path::new("/definitely/not/here.jsonl"), CorpusFormat::JsonlDocs)
            .unwrap_err();
        assert!(matches!(err, Error::MissingPath(_)));
    }

    #[test]
    fn synthetic_is_deterministic_and_topical() {
        let a = generate_synthetic_corpus(7, 3, 2, 3, 10).unwrap();
        let b = generate_synthetic_corpus(7, 3, 2, 3, 10).unwrap();
        assert_eq!(a, b);
        let mut ba = Vec::new();
        let mut bb = Vec::new();
        a.write_jsonl(&mut ba).unwrap();
        b.write_jsonl(&mut bb).unwrap();
        assert_eq!(ba, bb);

        let small = generate_synthetic_corpus(1, 1, 2, 3, 10).unwrap();
        assert_eq!(small.num_sentences(), 6);
        for para in small.paragraphs_in(0) {
            let sets: Vec<HashSet<String>> = para
                .sentences
                .iter()
                .map(|s| {
                    s.text
                        .to_lowercase()
                        .trim_end_matches('.')
                        .split(' ')
                        .map(str::to_string)
                        .collect()
                })
                .collect();
            let common: Vec<_> = sets[0]
                .iter()
                .filter(|w| w.starts_with("topic") && sets.iter().all(|s| s.contains(*w)))
                .collect();
            assert_eq!(common.len(), 1);
        }
    }

    #[test]
    fn synthetic_single_topic_collides() {
        let c = generate_synthetic_corpus(3, 2, 3, 2, 1).unwrap();
        assert!(c.iter_sentences().all(|s| s.text.to_lowercase().contains("topic0")));
    }

    #[test]
    fn synthetic_rejects_zero_counts() {
        assert!(generate_synthetic_corpus(0, 0, 1, 1, 1).is_err());
        assert!(generate_synthetic_corpus(0, 1, 1, 1, 0).is_err());
    }
}
