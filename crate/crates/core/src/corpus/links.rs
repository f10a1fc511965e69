use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use regex::Regex;
use thiserror::Error;

use super::{CorpusError, LabeledInstance, META_EXPANDED_URLS};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Hop {
    Redirect(String),
    Final,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ResolveError {
    #[error("timed out resolving {0}")]
    Timeout(String),
    #[error("redirect chain for {url} exceeds {cap} hops")]
    TooManyRedirects { url: String, cap: usize },
    #[error("network error for {url}: {message}")]
    Network { url: String, message: String },
}

/// One step of redirect resolution. Implementations must be callable from
/// several threads at once.
pub trait UrlResolver: Send + Sync {
    fn next_hop(&self, url: &str) -> Result<Hop, ResolveError>;
}

/// Resolver that issues `HEAD` requests without following redirects itself.
pub struct HttpResolver {
    client: reqwest::blocking::Client,
}

impl HttpResolver {
    pub fn new(timeout: Duration) -> Result<Self, reqwest::Error> {
        let client = reqwest::blocking::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .timeout(timeout)
            .build()?;
        Ok(Self { client })
    }
}

impl UrlResolver for HttpResolver {
    fn next_hop(&self, url: &str) -> Result<Hop, ResolveError> {
        let resp = self.client.head(url).send().map_err(|e| {
            if e.is_timeout() {
                ResolveError::Timeout(url.to_string())
            } else {
                ResolveError::Network { url: url.to_string(), message: e.to_string() }
            }
        })?;
        if !resp.status().is_redirection() {
            return Ok(Hop::Final);
        }
        let Some(location) = resp.headers().get(reqwest::header::LOCATION) else {
            return Ok(Hop::Final);
        };
        let location = location.to_str().map_err(|e| ResolveError::Network {
            url: url.to_string(),
            message: e.to_string(),
        })?;
        let next = resp.url().join(location).map_err(|e| ResolveError::Network {
            url: url.to_string(),
            message: e.to_string(),
        })?;
        Ok(Hop::Redirect(next.to_string()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LinkExpansion {
    pub text: String,
    /// Original URL → final URL, for every URL that changed.
    pub resolved: BTreeMap<String, String>,
    pub unresolved: Vec<String>,
}

/// Replaces shortened URLs in post text by their redirect targets.
///
/// Successful resolutions are cached by original URL and can be persisted so
/// that re-runs do not touch the network.
pub struct LinkExpander<R> {
    resolver: R,
    max_redirects: usize,
    max_parallel: usize,
    cache: Mutex<BTreeMap<String, String>>,
    cache_path: Option<PathBuf>,
    url_pattern: Regex,
}

impl<R: UrlResolver> LinkExpander<R> {
    pub fn new(resolver: R) -> Self {
        Self {
            resolver,
            max_redirects: 10,
            max_parallel: 8,
            cache: Mutex::new(BTreeMap::new()),
            cache_path: None,
            url_pattern: Regex::new(r"https?://[^\s]+").expect("valid pattern"),
        }
    }

    pub fn with_max_redirects(mut self, cap: usize) -> Self {
        self.max_redirects = cap;
        self
    }

    pub fn with_max_parallel(mut self, n: usize) -> Self {
        self.max_parallel = n.max(1);
        self
    }

    /// Loads (if present) and later saves the resolution cache at `path`.
    pub fn with_cache_file(mut self, path: impl Into<PathBuf>) -> Result<Self, CorpusError> {
        let path = path.into();
        if path.exists() {
            let cached: BTreeMap<String, String> = serde_json::from_slice(&std::fs::read(&path)?)?;
            *self.cache.get_mut().expect("fresh mutex") = cached;
        }
        self.cache_path = Some(path);
        Ok(self)
    }

    pub fn save_cache(&self) -> Result<(), CorpusError> {
        if let Some(path) = &self.cache_path {
            let cache = self.cache.lock().expect("cache lock");
            let mut json = serde_json::to_vec_pretty(&*cache)?;
            json.push(b'\n');
            crate::util::write_atomic(path, &json)?;
        }
        Ok(())
    }

    pub fn cache_path(&self) -> Option<&Path> {
        self.cache_path.as_deref()
    }

    /// Follows the redirect chain of one URL.
    pub fn resolve(&self, url: &str) -> Result<String, ResolveError> {
        if let Some(hit) = self.cache.lock().expect("cache lock").get(url) {
            return Ok(hit.clone());
        }
        let mut current = url.to_string();
        let mut hops = 0;
        loop {
            match self.resolver.next_hop(&current)? {
                Hop::Final => break,
                Hop::Redirect(next) => {
                    hops += 1;
                    if hops > self.max_redirects {
                        return Err(ResolveError::TooManyRedirects {
                            url: url.to_string(),
                            cap: self.max_redirects,
                        });
                    }
                    current = next;
                }
            }
        }
        self.cache.lock().expect("cache lock").insert(url.to_string(), current.clone());
        Ok(current)
    }

    pub fn expand(&self, text: &str) -> LinkExpansion {
        let spans: Vec<(usize, usize)> = self
            .url_pattern
            .find_iter(text)
            .map(|m| {
                let trimmed = m.as_str().trim_end_matches(|c: char| ".,;:!?)]}'\"".contains(c));
                (m.start(), m.start() + trimmed.len())
            })
            .collect();
        if spans.is_empty() {
            return LinkExpansion { text: text.to_string(), ..Default::default() };
        }

        let mut distinct: Vec<&str> = spans.iter().map(|(s, e)| &text[*s..*e]).collect();
        distinct.sort_unstable();
        distinct.dedup();

        let mut answers: BTreeMap<&str, Result<String, ResolveError>> = BTreeMap::new();
        for chunk in distinct.chunks(self.max_parallel) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|url| (*url, scope.spawn(move || self.resolve(url))))
                    .collect();
                for (url, handle) in handles {
                    let result = handle.join().unwrap_or_else(|_| {
                        Err(ResolveError::Network { url: url.to_string(), message: "resolver panicked".into() })
                    });
                    answers.insert(url, result);
                }
            });
        }

        let mut out = LinkExpansion::default();
        for (url, answer) in &answers {
            match answer {
                Ok(target) if target != url => {
                    out.resolved.insert(url.to_string(), target.clone());
                }
                Ok(_) => {}
                Err(err) => {
                    log::warn!("keeping original URL: {err}");
                    out.unresolved.push(url.to_string());
                }
            }
        }

        let mut rewritten = String::with_capacity(text.len());
        let mut cursor = 0;
        for (start, end) in spans {
            rewritten.push_str(&text[cursor..start]);
            let url = &text[start..end];
            rewritten.push_str(out.resolved.get(url).map(String::as_str).unwrap_or(url));
            cursor = end;
        }
        rewritten.push_str(&text[cursor..]);
        out.text = rewritten;
        out
    }

    /// Expands the instance text in place and records the mapping in its meta.
    pub fn expand_instance(&self, instance: &mut LabeledInstance) -> LinkExpansion {
        let expansion = self.expand(&instance.text);
        instance.text = expansion.text.clone();
        if !expansion.resolved.is_empty() {
            let mapping = serde_json::to_string(&expansion.resolved).expect("string map serializes");
            instance.meta.insert(META_EXPANDED_URLS.to_string(), mapping);
        }
        expansion
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[derive(Default)]
    struct StubResolver {
        redirects: HashMap<String, String>,
        timeouts: Vec<String>,
        calls: AtomicUsize,
    }

    impl UrlResolver for StubResolver {
        fn next_hop(&self, url: &str) -> Result<Hop, ResolveError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if self.timeouts.iter().any(|t| t == url) {
                return Err(ResolveError::Timeout(url.into()));
            }
            Ok(self.redirects.get(url).map(|u| Hop::Redirect(u.clone())).unwrap_or(Hop::Final))
        }
    }

    fn stub(pairs: &[(&str, &str)]) -> StubResolver {
        StubResolver {
            redirects: pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect(),
            ..Default::default()
        }
    }

    #[test]
    fn no_url_is_identity() {
        let ex = LinkExpander::new(stub(&[]));
        let out = ex.expand("nothing to see here");
        assert_eq!(out.text, "nothing to see here");
        assert!(out.resolved.is_empty());
    }

    #[test]
    fn one_hop_redirect_is_substituted() {
        let ex = LinkExpander::new(stub(&[("https://t.co/abc", "https://example.org/advisory")]));
        let out = ex.expand("Patch now: https://t.co/abc.");
        assert_eq!(out.text, "Patch now: https://example.org/advisory.");
        assert_eq!(out.resolved["https://t.co/abc"], "https://example.org/advisory");
    }

    #[test]
    fn chain_longer_than_cap_keeps_original() {
        let chain: Vec<(String, String)> =
            (0..5).map(|i| (format!("http://s/{i}"), format!("http://s/{}", i + 1))).collect();
        let pairs: Vec<(&str, &str)> = chain.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let ex = LinkExpander::new(stub(&pairs)).with_max_redirects(3);
        let out = ex.expand("see http://s/0 now");
        assert_eq!(out.text, "see http://s/0 now");
        assert_eq!(out.unresolved, vec!["http://s/0".to_string()]);
    }

    #[test]
    fn timeout_keeps_original() {
        let mut resolver = stub(&[]);
        resolver.timeouts.push("https://t.co/slow".into());
        let ex = LinkExpander::new(resolver);
        let out = ex.expand("https://t.co/slow");
        assert_eq!(out.text, "https://t.co/slow");
        assert_eq!(out.unresolved.len(), 1);
    }

    #[test]
    fn cache_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("urls.json");
        let ex = LinkExpander::new(stub(&[("https://t.co/x", "https://final/x")]))
            .with_cache_file(&path)
            .unwrap();
        ex.expand("a https://t.co/x b https://t.co/x");
        ex.save_cache().unwrap();

        let offline = LinkExpander::new(stub(&[])).with_cache_file(&path).unwrap();
        let out = offline.expand("https://t.co/x");
        assert_eq!(out.text, "https://final/x");
        assert_eq!(offline.resolver.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn expansion_recorded_in_meta() {
        let ex = LinkExpander::new(stub(&[("https://t.co/a", "https://b")]));
        let mut inst = LabeledInstance::new("i", "x https://t.co/a", None);
        ex.expand_instance(&mut inst);
        assert_eq!(inst.text, "x https://b");
        assert!(inst.meta[META_EXPANDED_URLS].contains("https://b"));
    }
}
