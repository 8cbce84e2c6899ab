use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::text::vocab::Vocabulary;

/// Fixed word embeddings together with the vocabulary that indexes them.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub vocab: Vocabulary,
    /// `(|V|, dim)`; rows for padding and unknown are zero.
    pub matrix: Tensor<f32>,
}

impl Embeddings {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Reads `<token> <f1> ... <fdim>` lines. With `dim = None` the dimension is
/// taken from the first line. Duplicate tokens keep their first vector.
pub fn load_embeddings(path: &Path, dim: Option<usize>) -> Result<Embeddings> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut vocab = Vocabulary::new();
    let mut dim = dim;
    let mut rows: Vec<f32> = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(' ');
        let token = fields.next().unwrap_or_default();
        let values: Vec<&str> = fields.collect();
        let d = *dim.get_or_insert(values.len());
        if values.len() != d || d == 0 {
            return Err(parse_err(format!("expected {} fields, found {}", d + 1, values.len() + 1)));
        }
        if vocab.get(token).is_some() {
            log::warn!("{}:{}: duplicate token {token:?} ignored", path.display(), lineno + 1);
            continue;
        }
        if rows.is_empty() {
            rows.resize(2 * d, 0.0);
        }
        for v in values {
            rows.push(v.parse::<f32>().map_err(|e| parse_err(format!("bad float {v:?}: {e}")))?);
        }
        vocab.add(token);
    }
    let dim = dim.filter(|&d| d > 0).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: "no embedding dimension (empty file)".into(),
    })?;
    if rows.is_empty() {
        rows.resize(2 * dim, 0.0);
    }
    let matrix = Tensor::new(vec![vocab.len(), dim], rows)?;
    Ok(Embeddings { vocab, matrix })
}

/// Writes every non-reserved row in the loader's format.
pub fn write_embeddings(path: &Path, emb: &Embeddings) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for id in 2..emb.vocab.len() {
        let mut line = emb.vocab.token(id).to_string();
        for v in emb.matrix.row(id) {
            line.push(' ');
            line.push_str(&v.to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::{PAD_ID, UNK_ID};

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn two_lines_give_four_rows() {
        let f = write("cat 1 2 3\ndog 4 5 6\n");
        let e = load_embeddings(f.path(), Some(3)).unwrap();
        assert_eq!(e.matrix.shape(), &[4, 3]);
        assert_eq!(e.matrix.row(PAD_ID), &[0.0, 0.0, 0.0]);
        assert_eq!(e.matrix.row(UNK_ID), &[0.0, 0.0, 0.0]);
        assert_eq!(e.matrix.row(e.vocab.id("dog")), &[4.0, 5.0, 6.0]);
        assert_eq!(e.vocab.id("bird"), UNK_ID);
    }

    #[test]
    fn wrong_field_count_names_the_line() {
        let f = write("cat 1 2 3\ndog 4 5\n");
        match load_embeddings(f.path(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_keeps_first() {
        let f = write("cat 1 2\ncat 9 9\n");
        let e = load_embeddings(f.path(), None).unwrap();
        assert_eq!(e.matrix.shape(), &[3, 2]);
        assert_eq!(e.matrix.row(2), &[1.0, 2.0]);
    }

    #[test]
    fn write_then_load_round_trips() {
        let f = write("a 0.5 -1\nb 2 3.25\n");
        let e = load_embeddings(f.path(), None).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_embeddings(out.path(), &e).unwrap();
        let back = load_embeddings(out.path(), Some(2)).unwrap();
        assert_eq!(back.matrix, e.matrix);
        assert_eq!(back.vocab.fingerprint(), e.vocab.fingerprint());
    }
}
