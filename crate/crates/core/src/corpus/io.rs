//! Corpus and image files: binary PGM (P5), grayscale PNG, and the
//! `corpus.jsonl` + `images/NNNNNN.pgm` directory layout.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{render, CorpusError, MarkupDoc, RenderedImage};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CorpusError {
    CorpusError::Io(format!("{}: {e}", path.display()))
}

fn format_err(path: &Path, message: impl Into<String>) -> CorpusError {
    CorpusError::Format { path: path.display().to_string(), message: message.into() }
}

/// Pixel value in `[0, 1]` to an 8-bit sample.
pub fn to_u8(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM encoding, maxval 255, ink (1.0) written as 255.
pub fn encode_pgm(img: &RenderedImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|&p| to_u8(p)));
    out
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<RenderedImage, CorpusError> {
    // header: magic, width, height, maxval as whitespace-separated fields,
    // '#' comments allowed, then exactly one whitespace byte.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format_err(path, format!("expected P5 magic, found {}", fields[0])));
    }
    let parse = |s: &str, what: &str| s.parse::<usize>().map_err(|_| format_err(path, format!("bad {what} {s:?}")));
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1;
    let body = bytes.get(pos..pos + width * height).ok_or_else(|| format_err(path, "truncated pixel data"))?;
    let pixels = body.iter().map(|&b| f64::from(b) / maxval as f64).collect();
    Ok(RenderedImage::from_pixels(height, width, pixels))
}

pub fn write_pgm(path: &Path, img: &RenderedImage) -> Result<(), CorpusError> {
    fs::write(path, encode_pgm(img)).map_err(|e| io_err(path, e))
}

pub fn read_pgm(path: &Path) -> Result<RenderedImage, CorpusError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_pgm(&bytes, path)
}

/// Reads an 8-bit grayscale PNG.
pub fn read_png(path: &Path) -> Result<RenderedImage, CorpusError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| format_err(path, e.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| format_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format_err(path, e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(format_err(path, format!("expected 8-bit grayscale, got {:?} {:?}", info.color_type, info.bit_depth)));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut pixels = Vec::with_capacity(w * h);
    for row in buf[..info.buffer_size()].chunks(info.line_size) {
        pixels.extend(row[..w].iter().map(|&b| f64::from(b) / 255.0));
    }
    Ok(RenderedImage::from_pixels(h, w, pixels))
}

pub fn write_png(path: &Path, img: &RenderedImage) -> Result<(), CorpusError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| io_err(path, e))?;
    let data: Vec<u8> = img.pixels.iter().map(|&p| to_u8(p)).collect();
    writer.write_image_data(&data).map_err(|e| io_err(path, e))
}

/// PGM or PNG, chosen by extension.
pub fn read_image(path: &Path) -> Result<RenderedImage, CorpusError> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("pgm") => read_pgm(path),
        Some("png") => read_png(path),
        _ => Err(format_err(path, "unsupported image extension (expected .pgm or .png)")),
    }
}

/// One line of `corpus.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub seed: u64,
    pub source_text: String,
}

pub fn image_name(index: usize) -> String {
    format!("{index:06}.pgm")
}

/// Writes `corpus.jsonl` and the rendered `images/` under `dir`.
pub fn write_corpus(dir: &Path, docs: &[MarkupDoc]) -> Result<(), CorpusError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    let index_path = dir.join("corpus.jsonl");
    let file = fs::File::create(&index_path).map_err(|e| io_err(&index_path, e))?;
    let mut w = BufWriter::new(file);
    for (i, doc) in docs.iter().enumerate() {
        let rec = CorpusRecord { seed: doc.seed, source_text: doc.source_text.clone() };
        let line = serde_json::to_string(&rec).map_err(|e| io_err(&index_path, e))?;
        writeln!(w, "{line}").map_err(|e| io_err(&index_path, e))?;
        write_pgm(&images.join(image_name(i)), &render(doc))?;
    }
    w.flush().map_err(|e| io_err(&index_path, e))
}

/// Reads a corpus directory back, pairing each document with its stored
/// image.
pub fn read_corpus(dir: &Path) -> Result<Vec<(MarkupDoc, RenderedImage)>, CorpusError> {
    let index_path = dir.join("corpus.jsonl");
    let file = fs::File::open(&index_path).map_err(|e| io_err(&index_path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(&index_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord =
            serde_json::from_str(&line).map_err(|e| format_err(&index_path, format!("line {}: {e}", i + 1)))?;
        let mut doc = MarkupDoc::parse(&rec.source_text)?;
        doc.seed = rec.seed;
        let img = read_pgm(&dir.join("images").join(image_name(out.len())))?;
        out.push((doc, img));
    }
    Ok(out)
}
