//! Evaluates every term of the training objective for one anchor over a
//! few training draws.

use fsacdm::corpus::{generate, render};
use fsacdm::model::{Model, ModelConfig};
use fsacdm::numerics::Binding;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = Model::new(ModelConfig::default())?;
    let store = model.init_params(0)?;
    let corpus: Vec<_> = generate(11, 8).into_iter().map(|d| { let i = render(&d); (d, i) }).collect();
    for step in 0..3 {
        let item = model.draw_item(&corpus, 0, 0, step)?;
        let mut b = Binding::frozen(&store);
        let (_, bundle) = model.example_loss(&mut b, &item)?;
        println!("step {step}, t={}", item.t);
        for (name, v) in bundle.components() {
            println!("  {name:<14} {v:+.4e}");
        }
    }
    Ok(())
}
