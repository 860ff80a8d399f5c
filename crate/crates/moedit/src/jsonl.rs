//! Edit-record JSONL: one object per line with the fields
//! `edit_prompt`, `edit_target`, `paraphrase_prompt`, `locality_prompt`
//! (plus `locality_expected` once a session has captured it).

use std::fs;
use std::path::Path;

use anyhow::Context;
use moedit_core::editing::EditRecord;

pub fn write_records(path: &Path, records: &[EditRecord]) -> anyhow::Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn read_records(path: &Path) -> anyhow::Result<Vec<EditRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EditRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: malformed record", path.display(), i + 1))?;
        if record.edit_prompt.is_empty() || record.edit_target.is_empty() {
            anyhow::bail!(
                "{}:{}: record missing edit_prompt or edit_target",
                path.display(),
                i + 1
            );
        }
        records.push(record);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<EditRecord> {
        vec![
            EditRecord {
                edit_prompt: "a b".into(),
                edit_target: "c".into(),
                paraphrase_prompt: "b a".into(),
                locality_prompt: "d e".into(),
                locality_expected: vec![],
            },
            EditRecord {
                edit_prompt: "x".into(),
                edit_target: "y z".into(),
                paraphrase_prompt: "x x".into(),
                locality_prompt: "q".into(),
                locality_expected: vec![4, 2],
            },
        ]
    }

    #[test]
    fn round_trip_identity() {
        let dir = std::env::temp_dir().join("moedit-jsonl-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("records.jsonl");
        let records = sample();
        write_records(&path, &records).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
    }

    #[test]
    fn empty_file_is_empty_list() {
        let dir = std::env::temp_dir().join("moedit-jsonl-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_records(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = std::env::temp_dir().join("moedit-jsonl-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"edit_prompt\":\"a\",\"edit_target\":\"b\",\"paraphrase_prompt\":\"c\",\"locality_prompt\":\"d\"}\n{\"edit_prompt\":\"a\"}\n",
        )
        .unwrap();
        let err = read_records(&path).unwrap_err();
        assert!(format!("{err:#}").contains(":2:"), "error was: {err:#}");
    }
}
