//! Line-delimited corpus files.
//!
//! Line 1 is a header object carrying `schema_version`, the world(s), seed,
//! pairing ratio and the record counts. Every following line is one record
//! keyed `paired`, `image` or `report`. A file whose record counts disagree
//! with the header is rejected as truncated.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ConceptWorld, Corpus, ImageSample, PairedSample, Report};
use crate::error::{Error, Result};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;
const FORMAT_TAG: &str = "lgdea-corpus";

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    format: String,
    seed: u64,
    pairing_ratio: f64,
    n_paired: usize,
    n_unpaired_images: usize,
    n_unpaired_reports: usize,
    world: ConceptWorld,
    unpaired_image_world: Option<ConceptWorld>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Record {
    Paired(PairedSample),
    Image(ImageSample),
    Report(Report),
}

#[derive(Serialize)]
#[serde(rename_all = "snake_case")]
enum RecordRef<'a> {
    Paired(&'a PairedSample),
    Image(&'a ImageSample),
    Report(&'a Report),
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        schema_version: CORPUS_SCHEMA_VERSION,
        format: FORMAT_TAG.into(),
        seed: corpus.seed,
        pairing_ratio: corpus.pairing_ratio,
        n_paired: corpus.paired.len(),
        n_unpaired_images: corpus.unpaired_images.len(),
        n_unpaired_reports: corpus.unpaired_reports.len(),
        world: corpus.world.clone(),
        unpaired_image_world: corpus.unpaired_image_world.clone(),
    };
    let mut write_line = |value: &dyn erased::Line| -> Result<()> {
        value.write_to(&mut w).map_err(|e| Error::io(path, e))
    };
    write_line(&header)?;
    for p in &corpus.paired {
        write_line(&RecordRef::Paired(p))?;
    }
    for i in &corpus.unpaired_images {
        write_line(&RecordRef::Image(i))?;
    }
    for r in &corpus.unpaired_reports {
        write_line(&RecordRef::Report(r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

mod erased {
    use std::io::{self, Write};

    /// Object-safe "serialize as one JSON line".
    pub trait Line {
        fn write_to(&self, w: &mut dyn Write) -> io::Result<()>;
    }

    impl<T: serde::Serialize> Line for T {
        fn write_to(&self, w: &mut dyn Write) -> io::Result<()> {
            serde_json::to_writer(&mut *w, self)?;
            w.write_all(b"\n")
        }
    }
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();

    let first = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?
        .map_err(|e| Error::io(path, e))?;
    let probe: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| Error::format(path, format!("header: {e}")))?;
    match probe.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(CORPUS_SCHEMA_VERSION) => {}
        Some(v) => {
            return Err(Error::format(
                path,
                format!("schema_version {v}, expected {CORPUS_SCHEMA_VERSION}"),
            ))
        }
        None => return Err(Error::format(path, "header lacks schema_version")),
    }
    let header: Header =
        serde_json::from_value(probe).map_err(|e| Error::format(path, format!("header: {e}")))?;
    if header.format != FORMAT_TAG {
        return Err(Error::format(
            path,
            format!("not a corpus file ({})", header.format),
        ));
    }

    let mut corpus = Corpus {
        paired: Vec::with_capacity(header.n_paired),
        unpaired_images: Vec::with_capacity(header.n_unpaired_images),
        unpaired_reports: Vec::with_capacity(header.n_unpaired_reports),
        world: header.world,
        unpaired_image_world: header.unpaired_image_world,
        pairing_ratio: header.pairing_ratio,
        seed: header.seed,
    };
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("record {}: {e}", n + 1)))?;
        match rec {
            Record::Paired(p) => corpus.paired.push(p),
            Record::Image(i) => corpus.unpaired_images.push(i),
            Record::Report(r) => corpus.unpaired_reports.push(r),
        }
    }
    let got = (
        corpus.paired.len(),
        corpus.unpaired_images.len(),
        corpus.unpaired_reports.len(),
    );
    let want = (
        header.n_paired,
        header.n_unpaired_images,
        header.n_unpaired_reports,
    );
    if got != want {
        return Err(Error::format(
            path,
            format!("record counts {got:?} do not match header {want:?} (truncated?)"),
        ));
    }
    Ok(corpus)
}
