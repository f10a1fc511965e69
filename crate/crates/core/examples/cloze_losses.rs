//! Cloze rendering, verbalizer prediction and the few-shot training losses.
//!
//! ```bash
//! cargo run --example cloze_losses
//! ```

use cti_fewshot::backends::{MaskedLm, MockMaskedLm, Vocabulary};
use cti_fewshot::corpus::{Label, LabeledInstance};
use cti_fewshot::fewshot::{
    apply_pattern, classification_head_loss_grad, decoupled_label_loss, decoupled_label_loss_grad,
    label_conditioning_example, predict_label, Pattern, Verbalizer, DEFAULT_MASK_RATE,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pattern = Pattern::default();
    let verbalizer = Verbalizer::default();
    let post = LabeledInstance::new("p", "Attackers exploit unpatched VPN servers, patch now", Some(Label::Relevant));

    let cloze = apply_pattern(&pattern, &post.text)?;
    println!("{}", cloze.text);

    let vocab = Vocabulary::from_corpus([post.text.as_str()], 100, &["yes", "no"]);
    let model = MockMaskedLm::new(vocab, 1);
    let dist = model.mask_distribution(&cloze)?;
    println!(
        "p(yes) = {:.4}, p(no) = {:.4} -> {}",
        dist.prob(0, "yes").unwrap(),
        dist.prob(0, "no").unwrap(),
        predict_label(&dist, &verbalizer)?
    );

    println!("\ndecoupled label loss");
    println!("  [0.5, 0.5], correct 0       = {:.4}", decoupled_label_loss(&[0.5, 0.5], 0)?);
    println!("  [0.5, 0.25, 0.25], correct 0 = {:.4}", decoupled_label_loss(&[0.5, 0.25, 0.25], 0)?);
    println!("  one-hot on the correct token = {}", decoupled_label_loss(&[0.0, 1.0, 0.0], 1)?);
    let (loss, grad) = decoupled_label_loss_grad(&[2.0, 0.5, -1.0, 0.0], 0)?;
    println!("  logits [2, 0.5, -1, 0]: loss {loss:.4}, grad {grad:.3?}");

    let (loss, grad) = classification_head_loss_grad(&[0.2, 1.3], Label::Relevant)?;
    println!("\nhead cross-entropy: loss {loss:.4}, grad {grad:.3?}");

    println!("\nlabel conditioning");
    for candidate in Label::ALL {
        let ex = label_conditioning_example(&post, candidate, &pattern, &verbalizer, DEFAULT_MASK_RATE, 3)?;
        println!("  {candidate:<10} {}", ex.cloze.text);
        for t in &ex.targets {
            println!("    {:?} {:?}", t.direction, t.token);
        }
    }
    Ok(())
}
