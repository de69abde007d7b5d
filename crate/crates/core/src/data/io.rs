use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde_json::{json, Map, Value};

use super::{Dataset, DatasetManifest, GroundingSample, PlacedShape, QuestionKind, ShapeKind, Vocabulary};
use crate::error::{Error, Result};
use crate::guidance::{BinaryGrid, GroundingMask, QuerySpan};
use crate::model::ImageGrid;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const IMAGES_FILE: &str = "images.bin";

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn words(vocab: &Vocabulary, ids: &[usize]) -> Result<Vec<String>> {
    ids.iter().map(|&i| vocab.word(i).map(str::to_owned)).collect()
}

fn record(sample: &GroundingSample, vocab: &Vocabulary, image_offset: usize) -> Result<Value> {
    Ok(json!({
        "id": sample.id,
        "prompt": words(vocab, &sample.prompt)?,
        "target": words(vocab, &sample.target)?,
        "query_span": [sample.query_span.start, sample.query_span.end],
        "kind": sample.kind,
        "queried": sample.queried,
        "shapes": sample.shapes,
        "image_offset": image_offset,
        "mask": sample.mask.as_ref().map(|m| m.full.to_rle()),
    }))
}

/// Writes `manifest.toml`, `vocab.txt`, `samples.jsonl` and `images.bin`
/// into `dir`, creating it if needed.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = toml::to_string(&ds.manifest).map_err(|e| Error::Data(e.to_string()))?;
    write_file(&dir.join(MANIFEST_FILE), manifest.as_bytes())?;
    let mut vocab = ds.vocab.words().join("\n");
    vocab.push('\n');
    write_file(&dir.join(&ds.manifest.vocabulary), vocab.as_bytes())?;

    let samples_path = dir.join(SAMPLES_FILE);
    let file = fs::File::create(&samples_path).map_err(|e| Error::io(&samples_path, e))?;
    let mut lines = BufWriter::new(file);
    let mut images = Vec::new();
    for sample in &ds.samples {
        let offset = images.len();
        sample
            .image
            .pixels
            .write_binary(&mut images)
            .map_err(|e| Error::io(dir.join(IMAGES_FILE), e))?;
        let line = record(sample, &ds.vocab, offset)?;
        writeln!(lines, "{line}").map_err(|e| Error::io(&samples_path, e))?;
    }
    lines.flush().map_err(|e| Error::io(&samples_path, e))?;
    write_file(&dir.join(IMAGES_FILE), &images)
}

struct LineCtx<'a> {
    path: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: &str, msg: impl Into<String>) -> Error {
        Error::Record {
            path: self.path.to_path_buf(),
            line: self.line,
            field: field.into(),
            msg: msg.into(),
        }
    }

    fn field<T: DeserializeOwned>(&self, obj: &Map<String, Value>, name: &str) -> Result<T> {
        let v = obj.get(name).ok_or_else(|| self.err(name, "missing"))?;
        serde_json::from_value(v.clone()).map_err(|e| self.err(name, e.to_string()))
    }

    fn tokens(&self, obj: &Map<String, Value>, name: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
        let words: Vec<String> = self.field(obj, name)?;
        words
            .iter()
            .map(|w| vocab.id(w).map_err(|e| self.err(name, e.to_string())))
            .collect()
    }
}

fn parse_sample(
    ctx: &LineCtx<'_>,
    text: &str,
    manifest: &DatasetManifest,
    vocab: &Vocabulary,
    images: &[u8],
) -> Result<GroundingSample> {
    let value: Value = serde_json::from_str(text).map_err(|e| ctx.err("<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ctx.err("<record>", "expected a JSON object"))?;
    let id: usize = ctx.field(obj, "id")?;
    let prompt = ctx.tokens(obj, "prompt", vocab)?;
    let target = ctx.tokens(obj, "target", vocab)?;
    if target.is_empty() {
        return Err(ctx.err("target", "empty"));
    }
    let [start, end]: [usize; 2] = ctx.field(obj, "query_span")?;
    if end > prompt.len() {
        return Err(ctx.err("query_span", "extends past the prompt"));
    }
    let query_span = QuerySpan::new(start, end).map_err(|e| ctx.err("query_span", e.to_string()))?;
    let kind: QuestionKind = ctx.field(obj, "kind")?;
    let queried: ShapeKind = ctx.field(obj, "queried")?;
    let shapes: Vec<PlacedShape> = ctx.field(obj, "shapes")?;

    let offset: usize = ctx.field(obj, "image_offset")?;
    let mut block = images
        .get(offset..)
        .ok_or_else(|| ctx.err("image_offset", format!("offset {offset} past end of images")))?;
    let pixels = Tensor::read_binary(&mut block).map_err(|e| ctx.err("image_offset", e.to_string()))?;
    let image = ImageGrid::new(pixels).map_err(|e| ctx.err("image_offset", e.to_string()))?;
    let [h, w] = manifest.image_size;
    if image.height() != h || image.width() != w {
        return Err(ctx.err("image_offset", "image size differs from manifest"));
    }

    let rle: Option<Vec<usize>> = ctx.field(obj, "mask")?;
    let mask = rle
        .map(|runs| {
            let full = BinaryGrid::from_rle(h, w, &runs)?;
            GroundingMask::new(full, manifest.grid)
        })
        .transpose()
        .map_err(|e| ctx.err("mask", e.to_string()))?;

    Ok(GroundingSample {
        id,
        image,
        prompt,
        target,
        query_span,
        mask,
        kind,
        queried,
        shapes,
    })
}

/// Reads a dataset written by [`write_dataset`]. Malformed records fail
/// with the file, line number and field.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = String::from_utf8(read_file(&manifest_path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    let manifest: DatasetManifest = toml::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;

    let vocab_path = dir.join(&manifest.vocabulary);
    let vocab_text = String::from_utf8(read_file(&vocab_path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", vocab_path.display())))?;
    let vocab = Vocabulary::from_words(vocab_text.lines().map(str::to_owned).collect())?;

    let images = read_file(&dir.join(IMAGES_FILE))?;
    let samples_path: PathBuf = dir.join(SAMPLES_FILE);
    let samples_text = String::from_utf8(read_file(&samples_path)?)
        .map_err(|e| Error::Data(format!("{}: {e}", samples_path.display())))?;
    let mut samples = Vec::with_capacity(manifest.count);
    for (i, line) in samples_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = LineCtx {
            path: &samples_path,
            line: i + 1,
        };
        samples.push(parse_sample(&ctx, line, &manifest, &vocab, &images)?);
    }
    if samples.len() != manifest.count {
        return Err(Error::Data(format!(
            "manifest lists {} samples, {} has {}",
            manifest.count,
            samples_path.display(),
            samples.len()
        )));
    }
    let guided = samples.iter().filter(|s| s.is_guided()).count();
    if guided != manifest.guided_count {
        return Err(Error::Data(format!(
            "manifest lists {} guided samples, found {guided}",
            manifest.guided_count
        )));
    }
    Ok(Dataset {
        manifest,
        vocab,
        samples,
    })
}
