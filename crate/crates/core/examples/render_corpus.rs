//! Generates a few markup documents, renders them and prints the glyph
//! rasters as text. Pass a directory to also write the corpus to disk.

use fsacdm::corpus::io::write_corpus;
use fsacdm::corpus::{generate, render};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let docs = generate(3, 4);
    for doc in &docs {
        let img = render(doc);
        println!("{}  ({} tokens, {} ink pixels)", doc.source_text, doc.len(), img.ink_pixels());
        for y in 4..28 {
            let row: String = (0..64).map(|x| if img.get(y, x) > 0.5 { '#' } else { '.' }).collect();
            println!("  {row}");
        }
    }
    if let Some(dir) = std::env::args().nth(1) {
        write_corpus(std::path::Path::new(&dir), &docs)?;
        println!("wrote {} documents to {dir}", docs.len());
    }
    Ok(())
}
