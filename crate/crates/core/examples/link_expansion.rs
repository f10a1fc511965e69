//! Shortened links replaced by their redirect targets, with a persistent
//! cache. The resolver here is an in-memory table; `HttpResolver` does the
//! same over the network.
//!
//! ```bash
//! cargo run --example link_expansion
//! ```

use std::collections::HashMap;

use cti_fewshot::corpus::{Hop, LabeledInstance, LinkExpander, ResolveError, UrlResolver, META_EXPANDED_URLS};

struct Table(HashMap<&'static str, &'static str>);

impl UrlResolver for Table {
    fn next_hop(&self, url: &str) -> Result<Hop, ResolveError> {
        Ok(match self.0.get(url) {
            Some(next) => Hop::Redirect(next.to_string()),
            None => Hop::Final,
        })
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let table = Table(HashMap::from([
        ("https://t.co/a1", "https://bit.ly/x9"),
        ("https://bit.ly/x9", "https://www.cisa.gov/known-exploited-vulnerabilities"),
        ("https://t.co/b2", "https://example.org/blog/patch-notes"),
    ]));
    let dir = tempfile::tempdir()?;
    let expander = LinkExpander::new(table).with_max_redirects(5).with_cache_file(dir.path().join("links.json"))?;

    let mut post = LabeledInstance::new(
        "p1",
        "Actively exploited, patch now https://t.co/a1 (details: https://t.co/b2)",
        None,
    );
    let expansion = expander.expand_instance(&mut post);
    println!("{}", post.text);
    for (from, to) in &expansion.resolved {
        println!("  {from} -> {to}");
    }
    println!("meta: {}", post.meta[META_EXPANDED_URLS]);
    expander.save_cache()?;
    println!("cache: {}", std::fs::read_to_string(dir.path().join("links.json"))?);
    Ok(())
}
