use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::{clean_tweet, EmojiTable, RawTweet};
use crate::util::sha256_hex;

/// Epochs for a dataset not in the policy table.
pub const DEFAULT_EPOCHS: usize = 3;

/// Finetuning epochs per dataset: 3 for SST-2, CC and SE, 5 for VC and 10
/// for MVS. Matching is case-insensitive and ignores `-`/`_`.
pub fn epochs_for(name: &str) -> usize {
    let key: String = name
        .chars()
        .filter(|c| !matches!(c, '-' | '_' | ' '))
        .flat_map(char::to_lowercase)
        .collect();
    match key.as_str() {
        "sst2" | "cc" | "se" | "semeval" => 3,
        "vc" | "vs" => 5,
        "mvs" | "mvc" => 10,
        _ => DEFAULT_EPOCHS,
    }
}

/// A classification dataset with a fixed train/dev split. Texts are
/// normalized exactly like the pretraining corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub name: String,
    /// Ordered label list; examples store indices into it.
    pub classes: Vec<String>,
    pub train: Vec<(String, usize)>,
    pub dev: Vec<(String, usize)>,
    pub epochs: usize,
}

#[derive(Deserialize)]
struct CsvRecord {
    text: String,
    label: String,
}

impl LabeledDataset {
    /// Builds a dataset from raw `(text, label)` rows. Classes are the sorted
    /// train labels; every dev label must be among them, and no cleaned text
    /// may appear in both splits.
    pub fn from_rows(
        name: &str,
        train: Vec<(String, String)>,
        dev: Vec<(String, String)>,
    ) -> Result<Self, EvalError> {
        let err = |msg: String| EvalError::Dataset {
            name: name.to_string(),
            msg,
        };
        if train.is_empty() || dev.is_empty() {
            return Err(err("train and dev splits must both be non-empty".into()));
        }
        let classes: Vec<String> = train
            .iter()
            .map(|(_, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if classes.len() < 2 {
            return Err(err(format!(
                "needs at least 2 classes, found {}",
                classes.len()
            )));
        }
        let index: BTreeMap<&str, usize> = classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let emoji = EmojiTable::builtin();
        let convert = |split: &str, rows: Vec<(String, String)>| {
            rows.into_iter()
                .enumerate()
                .map(|(i, (text, label))| {
                    let raw = RawTweet::new(format!("{split}-{i}"), text);
                    let clean = clean_tweet(&raw, &emoji)
                        .map_err(|e| err(format!("{split} row {}: {e}", i + 1)))?;
                    let y = *index.get(label.as_str()).ok_or_else(|| {
                        err(format!(
                            "{split} row {}: label {label:?} not seen in train",
                            i + 1
                        ))
                    })?;
                    Ok((clean.text, y))
                })
                .collect::<Result<Vec<_>, EvalError>>()
        };
        let train = convert("train", train)?;
        let dev = convert("dev", dev)?;
        let seen: HashSet<&str> = train.iter().map(|(t, _)| t.as_str()).collect();
        if let Some((t, _)) = dev.iter().find(|(t, _)| seen.contains(t.as_str())) {
            return Err(err(format!("text {t:?} occurs in both train and dev")));
        }
        Ok(LabeledDataset {
            name: name.to_string(),
            classes,
            train,
            dev,
            epochs: epochs_for(name),
        })
    }

    fn read_csv(path: &Path) -> Result<Vec<(String, String)>, EvalError> {
        let csv_err = |msg: String| EvalError::Csv {
            path: path.to_path_buf(),
            msg,
        };
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(e.to_string()))?;
        let mut rows = Vec::new();
        for rec in rdr.deserialize::<CsvRecord>() {
            let rec = rec.map_err(|e| csv_err(e.to_string()))?;
            rows.push((rec.text, rec.label));
        }
        Ok(rows)
    }

    /// Loads `<dir>/<name>.train.csv` and `<dir>/<name>.dev.csv` (header
    /// `text,label`).
    pub fn load(dir: &Path, name: &str) -> Result<Self, EvalError> {
        let train = Self::read_csv(&dir.join(format!("{name}.train.csv")))?;
        let dev = Self::read_csv(&dir.join(format!("{name}.dev.csv")))?;
        Self::from_rows(name, train, dev)
    }

    /// Every dataset in `dir` that has both split files, sorted by name.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>, EvalError> {
        let mut names = BTreeSet::new();
        for entry in fs::read_dir(dir)? {
            let file = entry?.file_name();
            if let Some(name) = file.to_str().and_then(|f| f.strip_suffix(".train.csv")) {
                if dir.join(format!("{name}.dev.csv")).is_file() {
                    names.insert(name.to_string());
                }
            }
        }
        if names.is_empty() {
            return Err(EvalError::NoDatasets);
        }
        names.iter().map(|n| Self::load(dir, n)).collect()
    }

    /// Writes both splits as CSV (cleaned text, label names).
    pub fn save(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        for (split, rows) in [("train", &self.train), ("dev", &self.dev)] {
            let path = dir.join(format!("{}.{split}.csv", self.name));
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| EvalError::Csv {
                path: path.clone(),
                msg: e.to_string(),
            };
            w.write_record(["text", "label"]).map_err(csv_err)?;
            for (text, y) in rows {
                w.write_record([text.as_str(), self.classes[*y].as_str()])
                    .map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| EvalError::Csv {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            crate::util::write_atomic(&path, &bytes)?;
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("dataset serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter()
            .map(|(t, l)| (t.to_string(), l.to_string()))
            .collect()
    }

    #[test]
    fn epoch_policy() {
        assert_eq!(epochs_for("SST-2"), 3);
        assert_eq!(epochs_for("MVS"), 10);
        assert_eq!(epochs_for("vc"), 5);
        assert_eq!(epochs_for("cc"), 3);
        assert_eq!(epochs_for("SE"), 3);
        assert_eq!(epochs_for("toy"), DEFAULT_EPOCHS);
    }

    #[test]
    fn rows_are_cleaned_and_indexed() {
        let ds = LabeledDataset::from_rows(
            "cc",
            rows(&[("Hi @bob", "pos"), ("see http://x.y", "neg")]),
            rows(&[("Other", "neg")]),
        )
        .unwrap();
        assert_eq!(ds.classes, ["neg", "pos"]);
        assert_eq!(ds.train[0], ("hi twitteruser".to_string(), 1));
        assert_eq!(ds.train[1], ("see twitterurl".to_string(), 0));
        assert_eq!(ds.epochs, 3);
    }

    #[test]
    fn invalid_datasets() {
        let unknown =
            LabeledDataset::from_rows("x", rows(&[("a", "p"), ("b", "n")]), rows(&[("c", "z")]));
        assert!(matches!(unknown, Err(EvalError::Dataset { .. })));
        let overlap =
            LabeledDataset::from_rows("x", rows(&[("a", "p"), ("b", "n")]), rows(&[("A", "p")]));
        assert!(overlap.is_err());
        let single = LabeledDataset::from_rows("x", rows(&[("a", "p")]), rows(&[("b", "p")]));
        assert!(single.is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = LabeledDataset::from_rows(
            "toy",
            rows(&[("one, two", "a"), ("three \"q\"", "b")]),
            rows(&[("four", "b")]),
        )
        .unwrap();
        ds.save(dir.path()).unwrap();
        let loaded = LabeledDataset::load_dir(dir.path()).unwrap();
        assert_eq!(loaded, vec![ds]);
    }
}
