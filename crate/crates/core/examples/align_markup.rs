//! Encodes a markup string and its rendering, aligns the visual sequence
//! to the tokens and prints the alignment loss plus the strongest attended
//! column for each token.

use fsacdm::corpus::{render, MarkupDoc};
use fsacdm::encoders::{align_pair, init_encoders, EncoderConfig};
use fsacdm::numerics::{Binding, ParamStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = EncoderConfig::default();
    let mut store = ParamStore::new();
    init_encoders(&mut store, 0, &cfg)?;

    let doc = MarkupDoc::parse("x^{2}+\\frac{a}{b}")?;
    let img = render(&doc);
    let mut b = Binding::frozen(&store);
    let out = align_pair(&mut b, &cfg, &doc, &img)?;

    println!("tokens {:?}", b.tape.shape(out.t));
    println!("visual sequence {:?}", b.tape.shape(out.h));
    println!("alignment loss {:.4}", b.tape.value(out.l_fa).data()[0]);
    let w = b.tape.value(out.cam.weights);
    let (n, m) = w.dims2()?;
    for i in 0..n {
        let row = w.row(i);
        let (j, p) = row.iter().enumerate().fold((0, 0.0), |acc, (j, &p)| if p > acc.1 { (j, p) } else { acc });
        println!("  {:<8} -> column {j:>2} of {m} (weight {p:.3})", format!("{:?}", doc.tokens[i]));
    }
    Ok(())
}
