use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    clean_tweet, segment_sentences, CleanTweet, Deduplicator, EmojiTable, RawTweet, SentenceDoc,
    Verdict,
};

const CHUNK_LINES: usize = 8192;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("near-duplicate threshold {0} outside [0, 1]")]
    Threshold(f64),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
}

/// One line of the reject log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectRecord {
    pub line: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub reason: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl RejectRecord {
    fn new(line: usize, id: Option<String>, reason: &str, detail: impl Into<String>) -> Self {
        RejectRecord {
            line,
            id,
            reason: reason.to_string(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrepStats {
    pub lines_read: usize,
    pub rejected: usize,
    pub retweets: usize,
    pub exact_duplicates: usize,
    pub near_duplicates: usize,
    pub docs_written: usize,
    pub sentences_written: usize,
}

/// Reads newline-delimited JSON tweets. Blank lines are skipped; undecodable
/// lines come back as rejects tagged with their 1-based line number.
pub fn read_raw_tweets<R: BufRead>(
    reader: R,
) -> impl Iterator<Item = io::Result<Result<(usize, RawTweet), RejectRecord>>> {
    reader.split(b'\n').enumerate().filter_map(|(i, line)| {
        let line_no = i + 1;
        let bytes = match line {
            Ok(b) => b,
            Err(e) => return Some(Err(e)),
        };
        let bytes = bytes.strip_suffix(b"\r").unwrap_or(&bytes);
        if bytes.iter().all(u8::is_ascii_whitespace) {
            return None;
        }
        let parsed = match std::str::from_utf8(bytes) {
            Err(e) => Err(RejectRecord::new(
                line_no,
                None,
                "invalid_utf8",
                e.to_string(),
            )),
            Ok(s) => serde_json::from_str::<RawTweet>(s)
                .map(|t| (line_no, t))
                .map_err(|e| RejectRecord::new(line_no, None, "malformed_json", e.to_string())),
        };
        Some(Ok(parsed))
    })
}

/// Writes sentence documents as newline-delimited JSON.
/// Reads a file written by [`write_docs_jsonl`]; malformed lines are
/// `InvalidData` errors naming the line.
pub fn read_docs_jsonl<R: BufRead>(reader: R) -> io::Result<Vec<SentenceDoc>> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
        })?);
    }
    Ok(docs)
}

pub fn write_docs_jsonl<W: Write>(mut w: W, docs: &[SentenceDoc]) -> io::Result<()> {
    for d in docs {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Full preparation pass: read, clean (in parallel chunks), dedup (single
/// ordered index), segment, and write documents plus a reject log.
pub fn prep_corpus(
    input: &Path,
    output: &Path,
    reject_log: &Path,
    emoji: &EmojiTable,
    threshold: f64,
) -> Result<PrepStats, PrepError> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(PrepError::Threshold(threshold));
    }
    let io_err = |p: &Path| {
        let path = p.display().to_string();
        move |source| PrepError::Io {
            path: path.clone(),
            source,
        }
    };
    let reader = BufReader::new(File::open(input).map_err(io_err(input))?);
    let mut out = BufWriter::new(File::create(output).map_err(io_err(output))?);
    let mut rejects = BufWriter::new(File::create(reject_log).map_err(io_err(reject_log))?);

    let mut stats = PrepStats::default();
    let mut dedup = Deduplicator::new(threshold);
    let mut lines = read_raw_tweets(reader);

    loop {
        let mut chunk = Vec::with_capacity(CHUNK_LINES);
        for item in lines.by_ref().take(CHUNK_LINES) {
            chunk.push(item.map_err(io_err(input))?);
        }
        if chunk.is_empty() {
            break;
        }
        stats.lines_read += chunk.len();

        let cleaned: Vec<Result<CleanTweet, RejectRecord>> = chunk
            .into_par_iter()
            .map(|item| {
                let (line, raw) = item?;
                clean_tweet(&raw, emoji).map_err(|e| {
                    RejectRecord::new(line, Some(raw.id.clone()), e.reason(), e.to_string())
                })
            })
            .collect();

        for item in cleaned {
            let tweet = match item {
                Ok(t) => t,
                Err(rej) => {
                    write_reject(&mut rejects, &rej).map_err(io_err(reject_log))?;
                    stats.rejected += 1;
                    continue;
                }
            };
            match dedup.admit(&tweet) {
                Verdict::Keep => {}
                Verdict::Retweet => {
                    stats.retweets += 1;
                    continue;
                }
                Verdict::ExactDuplicate => {
                    stats.exact_duplicates += 1;
                    continue;
                }
                Verdict::NearDuplicate => {
                    stats.near_duplicates += 1;
                    continue;
                }
            }
            match segment_sentences(&tweet) {
                Ok(doc) => {
                    stats.docs_written += 1;
                    stats.sentences_written += doc.sentences.len();
                    write_docs_jsonl(&mut out, std::slice::from_ref(&doc))
                        .map_err(io_err(output))?;
                }
                Err(e) => {
                    let rej =
                        RejectRecord::new(0, Some(tweet.id.clone()), "empty_text", e.to_string());
                    write_reject(&mut rejects, &rej).map_err(io_err(reject_log))?;
                    stats.rejected += 1;
                }
            }
        }
    }
    out.flush().map_err(io_err(output))?;
    rejects.flush().map_err(io_err(reject_log))?;
    if stats.rejected > 0 {
        warn!(
            "event=prep_rejects rejected={} log={}",
            stats.rejected,
            reject_log.display()
        );
    }
    info!(
        "event=prep lines={} docs={} retweets={} exact_dups={} near_dups={}",
        stats.lines_read,
        stats.docs_written,
        stats.retweets,
        stats.exact_duplicates,
        stats.near_duplicates
    );
    Ok(stats)
}

fn write_reject<W: Write>(w: &mut W, rej: &RejectRecord) -> io::Result<()> {
    serde_json::to_writer(&mut *w, rej)?;
    w.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reader_flags_bad_lines() {
        let data = b"{\"id\":\"1\",\"text\":\"ok\"}\n\nnot json\n{\"id\":\"2\",\"text\":\"\xff\"}\n\xc3\x28\n";
        let items: Vec<_> = read_raw_tweets(&data[..]).map(Result::unwrap).collect();
        assert_eq!(items.len(), 4);
        assert_eq!(items[0].as_ref().unwrap().1.id, "1");
        assert_eq!(items[1].as_ref().unwrap_err().reason, "malformed_json");
        assert_eq!(items[1].as_ref().unwrap_err().line, 3);
        assert_eq!(items[2].as_ref().unwrap_err().reason, "invalid_utf8");
        assert_eq!(items[3].as_ref().unwrap_err().line, 5);
    }

    #[test]
    fn end_to_end_prep() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.jsonl");
        let lines = [
            r#"{"id":"1","text":"Hello @bob. Look at https://t.co/x!","created_at":"2020-02-01T00:00:00Z"}"#,
            r#"{"id":"2","text":"RT @bob: Hello again"}"#,
            r#"{"id":"3","text":"hello twitteruser. look at twitterurl"}"#,
            r#"{"id":"","text":"no id"}"#,
            r#"{"id":"5","text":"😄"}"#,
            r#"{"id":"6","text":"\u0007"}"#,
        ];
        std::fs::write(&input, lines.join("\n")).unwrap();
        let out = dir.path().join("docs.jsonl");
        let rej = dir.path().join("rejects.jsonl");
        let stats = prep_corpus(&input, &out, &rej, &EmojiTable::builtin(), 0.8).unwrap();
        assert_eq!(stats.lines_read, 6);
        assert_eq!(stats.retweets, 1);
        assert_eq!(stats.exact_duplicates, 1);
        assert_eq!(stats.docs_written, 2);
        assert_eq!(stats.rejected, 2);

        let docs: Vec<SentenceDoc> = std::fs::read_to_string(&out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(
            docs[0].sentences,
            ["hello twitteruser.", "look at twitterurl"]
        );
        assert_eq!(docs[1].sentences, [":smile:"]);

        let reasons: Vec<String> = std::fs::read_to_string(&rej)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<RejectRecord>(l).unwrap().reason)
            .collect();
        assert_eq!(reasons, ["empty_id", "empty_text"]);
    }
}
