//! JSONL interchange: one [`GraphRecord`] object per line.

use std::fs;
use std::path::Path;

use super::{DataError, DomainDataset, GraphRecord, Task};

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<DomainDataset, DataError> {
    load_jsonl_with(path, Task::Graph)
}

pub fn load_jsonl_with(path: impl AsRef<Path>, task: Task) -> Result<DomainDataset, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let fallback = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_jsonl(&text, task, &fallback)
}

/// Parses JSONL text. The dataset takes the domain of its first record, or
/// `fallback_name` when there are none.
pub fn parse_jsonl(
    text: &str,
    task: Task,
    fallback_name: &str,
) -> Result<DomainDataset, DataError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: GraphRecord = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        record
            .validate()
            .map_err(|(field, msg)| DataError::Invalid {
                line: line_no,
                field,
                msg,
            })?;
        if let Some(first) = records.first() {
            let first: &GraphRecord = first;
            if record.domain != first.domain {
                return Err(DataError::Invalid {
                    line: line_no,
                    field: "domain",
                    msg: format!("`{}` differs from `{}`", record.domain, first.domain),
                });
            }
            if record.feature_dim() != first.feature_dim() {
                return Err(DataError::Invalid {
                    line: line_no,
                    field: "features",
                    msg: format!(
                        "width {} differs from {}",
                        record.feature_dim(),
                        first.feature_dim()
                    ),
                });
            }
        }
        records.push(record);
    }
    let name = records
        .first()
        .map_or_else(|| fallback_name.to_string(), |r| r.domain.clone());
    DomainDataset::new(name, records, task)
}

pub fn to_jsonl(dataset: &DomainDataset) -> String {
    let mut out = String::new();
    for r in &dataset.records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl(dataset: &DomainDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, to_jsonl(dataset)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRIANGLE: &str = r#"{"num_nodes":3,"edges":[[0,1],[1,2],[2,0]],"features":[[1.0,0.0],[0.0,1.0],[0.5,0.5]],"label":1,"domain":"tri"}"#;

    #[test]
    fn minimal_file_loads() {
        let ds = parse_jsonl(TRIANGLE, Task::Graph, "x").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.name, "tri");
        assert_eq!(ds.feature_dim, 2);
        assert_eq!(ds.num_classes, 2);
    }

    #[test]
    fn out_of_range_edge_names_edges() {
        let bad = TRIANGLE.replace("[2,0]", "[0,5]");
        let err = parse_jsonl(&bad, Task::Graph, "x").unwrap_err();
        match err {
            DataError::Invalid {
                line: 1,
                field: "edges",
                ..
            } => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_string(&bad).contains("edges"));
    }

    fn err_string(text: &str) -> String {
        parse_jsonl(text, Task::Graph, "x").unwrap_err().to_string()
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = format!("{TRIANGLE}\n{{not json\n");
        assert!(matches!(
            parse_jsonl(&text, Task::Graph, "x"),
            Err(DataError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn unknown_key_is_rejected() {
        let bad = TRIANGLE.replace("\"label\":1", "\"label\":1,\"extra\":0");
        assert!(matches!(
            parse_jsonl(&bad, Task::Graph, "x"),
            Err(DataError::Parse { .. })
        ));
    }

    #[test]
    fn feature_rows_must_match_nodes() {
        let bad = TRIANGLE.replace(",[0.5,0.5]", "");
        let err = parse_jsonl(&bad, Task::Graph, "x").unwrap_err();
        assert!(matches!(
            err,
            DataError::Invalid {
                field: "features",
                ..
            }
        ));
    }

    #[test]
    fn mixed_domains_are_rejected() {
        let text = format!("{TRIANGLE}\n{}", TRIANGLE.replace("tri", "other"));
        assert!(matches!(
            parse_jsonl(&text, Task::Graph, "x"),
            Err(DataError::Invalid {
                line: 2,
                field: "domain",
                ..
            })
        ));
    }

    #[test]
    fn absent_label_serializes_as_null() {
        let text = TRIANGLE.replace("\"label\":1", "\"label\":null");
        let ds = parse_jsonl(&text, Task::Graph, "x").unwrap();
        assert_eq!(ds.records[0].label, None);
        assert!(to_jsonl(&ds).contains("\"label\":null"));
    }
}
