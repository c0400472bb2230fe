use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open character range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationInstance {
    pub chars: Vec<char>,
    pub head: Span,
    pub tail: Span,
    pub relation: String,
}

/// On-disk shape of one corpus line.
#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    text: String,
    head: Span,
    tail: Span,
    relation: String,
}

impl RelationInstance {
    pub fn new(text: &str, head: Span, tail: Span, relation: impl Into<String>) -> Result<Self> {
        let inst = RelationInstance {
            chars: text.chars().collect(),
            head,
            tail,
            relation: relation.into(),
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn text(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.chars.len();
        for (name, s) in [("head", self.head), ("tail", self.tail)] {
            if s.start >= s.end || s.end > n {
                return Err(Error::Validation(format!(
                    "{name} span [{}, {}) out of range for sentence of length {n}",
                    s.start, s.end
                )));
            }
        }
        if self.head == self.tail {
            return Err(Error::Validation("head and tail spans are identical".into()));
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> Result<String> {
        let rec = JsonRecord {
            text: self.text(),
            head: self.head,
            tail: self.tail,
            relation: self.relation.clone(),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json_line(line: &str) -> std::result::Result<Self, String> {
        let rec: JsonRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let inst = RelationInstance {
            chars: rec.text.chars().collect(),
            head: rec.head,
            tail: rec.tail,
            relation: rec.relation,
        };
        inst.validate().map_err(|e| e.to_string())?;
        Ok(inst)
    }
}

/// Reads a JSON-lines corpus. Blank lines are skipped; any malformed or
/// invalid line fails the whole load with its 1-based line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<RelationInstance>> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst = RelationInstance::from_json_line(&line).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        out.push(inst);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, instances: &[RelationInstance]) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        writeln!(w, "{}", inst.to_json_line()?).map_err(|e| Error::io(ctx(), e))?;
    }
    w.flush().map_err(|e| Error::io(ctx(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_example_line() {
        let line = r#"{"text":"ABCDE","head":{"start":0,"end":1},"tail":{"start":3,"end":5},"relation":"r1"}"#;
        let inst = RelationInstance::from_json_line(line).unwrap();
        assert_eq!(inst.chars, vec!['A', 'B', 'C', 'D', 'E']);
        assert_eq!(inst.head, Span::new(0, 1));
        assert_eq!(inst.tail, Span::new(3, 5));
        assert_eq!(inst.relation, "r1");
        assert_eq!(inst.to_json_line().unwrap(), line);
    }

    #[test]
    fn spans_count_unicode_scalars() {
        let inst = RelationInstance::new("南京市长江大桥", Span::new(0, 3), Span::new(3, 5), "r").unwrap();
        assert_eq!(inst.len(), 7);
    }

    #[test]
    fn invalid_spans_are_rejected() {
        assert!(RelationInstance::new("ABC", Span::new(0, 4), Span::new(1, 2), "r").is_err());
        assert!(RelationInstance::new("ABC", Span::new(1, 1), Span::new(0, 2), "r").is_err());
        assert!(RelationInstance::new("ABC", Span::new(0, 2), Span::new(0, 2), "r").is_err());
    }

    #[test]
    fn load_reports_line_number_of_bad_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"text":"ABCDE","head":{"start":0,"end":1},"tail":{"start":3,"end":5},"relation":"r1"}"#,
                "\n",
                r#"{"text":"AB","head":{"start":0,"end":3},"tail":{"start":1,"end":2},"relation":"r1"}"#,
                "\n"
            ),
        )
        .unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&path, "{not json\n").unwrap();
        assert!(matches!(load_jsonl(&path), Err(Error::Parse { line: 1, .. })));
    }
}
