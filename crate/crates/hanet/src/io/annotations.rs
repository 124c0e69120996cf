//! Line-delimited JSON caption annotations.
//!
//! One caption per line: `{"video_id", "caption_id", "tokens", "verbs":
//! [{"idx"}], "nouns": [{"idx", "verb_idx", "role"}]}`. Strict mode fails on
//! the first malformed line; lenient mode skips it and reports the line
//! number.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CaptionAnnotation, NounRecord};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct VerbDto {
    idx: usize,
}

#[derive(Serialize, Deserialize)]
struct AnnotationDto {
    video_id: String,
    caption_id: String,
    tokens: Vec<String>,
    verbs: Vec<VerbDto>,
    nouns: Vec<NounRecord>,
}

impl From<&CaptionAnnotation> for AnnotationDto {
    fn from(ann: &CaptionAnnotation) -> Self {
        AnnotationDto {
            video_id: ann.video_id.clone(),
            caption_id: ann.caption_id.clone(),
            tokens: ann.tokens.clone(),
            verbs: ann.verbs.iter().map(|&idx| VerbDto { idx }).collect(),
            nouns: ann.nouns.clone(),
        }
    }
}

impl From<AnnotationDto> for CaptionAnnotation {
    fn from(dto: AnnotationDto) -> Self {
        CaptionAnnotation {
            video_id: dto.video_id,
            caption_id: dto.caption_id,
            tokens: dto.tokens,
            verbs: dto.verbs.into_iter().map(|v| v.idx).collect(),
            nouns: dto.nouns,
        }
    }
}

/// Parse and validate a JSONL annotation file. Returns the annotations plus
/// the warnings produced in lenient mode (always empty in strict mode).
pub fn load_annotations(path: &Path, lenient: bool) -> Result<(Vec<CaptionAnnotation>, Vec<String>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut annotations = Vec::new();
    let mut warnings = Vec::new();
    let mut seen_ids = HashSet::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<AnnotationDto, _> = serde_json::from_str(&line);
        let outcome = parsed
            .map_err(|e| Error::data(format!("annotation line {}: {e}", lineno + 1)))
            .map(CaptionAnnotation::from)
            .and_then(|ann| {
                ann.validate()
                    .map_err(|e| Error::data(format!("annotation line {}: {e}", lineno + 1)))?;
                if !seen_ids.insert(ann.caption_id.clone()) {
                    return Err(Error::data(format!(
                        "annotation line {}: duplicate caption_id {:?}",
                        lineno + 1,
                        ann.caption_id
                    )));
                }
                Ok(ann)
            });
        match outcome {
            Ok(ann) => annotations.push(ann),
            Err(e) if lenient => warnings.push(e.to_string()),
            Err(e) => return Err(e),
        }
    }
    Ok((annotations, warnings))
}

pub fn save_annotations(path: &Path, annotations: &[CaptionAnnotation]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ann in annotations {
        let dto = AnnotationDto::from(ann);
        serde_json::to_writer(&mut w, &dto).map_err(|e| Error::data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_valid_line_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        std::fs::write(
            &path,
            r#"{"video_id":"v0","caption_id":"c0","tokens":["man","sings","song"],"verbs":[{"idx":1}],"nouns":[{"idx":0,"verb_idx":1,"role":"arg"}]}"#,
        )
        .unwrap();
        let (anns, warnings) = load_annotations(&path, false).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(anns.len(), 1);
        assert_eq!(anns[0].verbs, vec![1]);
        assert_eq!(anns[0].nouns[0].verb_idx, Some(1));
    }

    #[test]
    fn governor_must_be_a_verb_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        std::fs::write(
            &path,
            r#"{"video_id":"v0","caption_id":"c0","tokens":["man","sings"],"verbs":[{"idx":1}],"nouns":[{"idx":0,"verb_idx":0,"role":"arg"}]}"#,
        )
        .unwrap();
        let err = load_annotations(&path, false).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");

        // Lenient mode skips the bad line and reports it.
        let (anns, warnings) = load_annotations(&path, true).unwrap();
        assert!(anns.is_empty());
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn empty_file_is_an_empty_stream() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        std::fs::write(&path, "").unwrap();
        let (anns, warnings) = load_annotations(&path, false).unwrap();
        assert!(anns.is_empty() && warnings.is_empty());
    }

    #[test]
    fn duplicate_caption_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let line = r#"{"video_id":"v0","caption_id":"c0","tokens":["man"],"verbs":[],"nouns":[]}"#;
        std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        let err = load_annotations(&path, false).unwrap_err().to_string();
        assert!(err.contains("duplicate caption_id"), "{err}");
    }

    #[test]
    fn round_trip_preserves_annotations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let ann = CaptionAnnotation {
            video_id: "v0".into(),
            caption_id: "c0".into(),
            tokens: vec!["a".into(), "man".into(), "sings".into()],
            verbs: vec![2],
            nouns: vec![NounRecord { idx: 1, verb_idx: Some(2), role: "arg".into() }],
        };
        save_annotations(&path, &[ann.clone()]).unwrap();
        let (loaded, _) = load_annotations(&path, false).unwrap();
        assert_eq!(loaded, vec![ann]);
    }
}
