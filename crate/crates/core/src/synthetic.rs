//! Seeded synthetic tweets about security events and everyday topics, for
//! fixtures, demos and tests.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{DatasetBundle, Label, LabeledInstance};

const CYBER_SUBJECTS: &[&str] = &[
    "attackers", "ransomware gang", "threat actors", "researchers", "hackers", "the botnet", "a new malware strain",
    "phishing campaign", "the exploit kit", "state sponsored group",
];
const CYBER_VERBS: &[&str] = &[
    "exploit", "breach", "target", "compromise", "encrypt", "leak data from", "scan for", "abuse", "hijack",
    "infect",
];
const CYBER_OBJECTS: &[&str] = &[
    "vpn servers", "exchange servers", "the vulnerability", "unpatched routers", "cloud accounts", "hospital networks",
    "the firmware", "admin credentials", "the zero-day", "log4j instances",
];
const CYBER_TAILS: &[&str] = &[
    "patch now", "CVE assigned", "update immediately", "indicators published", "advisory released",
    "mitigation available", "#infosec", "#cybersecurity", "exploit in the wild", "rotate your keys",
];
const OTHER_SUBJECTS: &[&str] = &[
    "my cat", "the team", "our neighbors", "the chef", "grandma", "the band", "my friends", "the coach",
    "the weather service", "the bakery",
];
const OTHER_VERBS: &[&str] = &[
    "loves", "cooked", "visited", "painted", "celebrated", "watched", "planned", "ordered", "cleaned", "sang about",
];
const OTHER_OBJECTS: &[&str] = &[
    "the garden", "a new recipe", "the beach", "the concert", "pancakes", "the game", "a road trip", "the museum",
    "birthday cake", "the sunset",
];
const OTHER_TAILS: &[&str] = &[
    "so happy", "what a day", "#weekend", "cannot wait", "love it", "best day ever", "#food", "see you soon",
    "lol", "amazing view",
];

fn sentence(rng: &mut ChaCha8Rng, label: Label) -> String {
    let (s, v, o, t) = match label {
        Label::Relevant => (CYBER_SUBJECTS, CYBER_VERBS, CYBER_OBJECTS, CYBER_TAILS),
        Label::Irrelevant => (OTHER_SUBJECTS, OTHER_VERBS, OTHER_OBJECTS, OTHER_TAILS),
    };
    let pick = |rng: &mut ChaCha8Rng, xs: &[&str]| -> String { xs.choose(rng).expect("non-empty").to_string() };
    let mut words = vec![pick(rng, s), pick(rng, v), pick(rng, o)];
    if rng.random_bool(0.7) {
        words.push(pick(rng, t));
    }
    if rng.random_bool(0.2) {
        // A little cross-topic noise keeps the task from being trivially separable.
        let other = match label {
            Label::Relevant => OTHER_TAILS,
            Label::Irrelevant => CYBER_TAILS,
        };
        words.push(pick(rng, other));
    }
    words.join(" ")
}

/// `n` labeled instances (`syn-00001`, ...), about 45 % relevant.
pub fn synthetic_bundle(n: usize, seed: u64) -> DatasetBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let instances = (0..n).map(|i| {
        let label = if rng.random_bool(0.45) { Label::Relevant } else { Label::Irrelevant };
        LabeledInstance::new(format!("syn-{:05}", i + 1), sentence(&mut rng, label), Some(label))
    });
    DatasetBundle::from_instances(instances).expect("synthetic ids are unique")
}

/// Unlabeled security-flavored documents for masked-modeling stages.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(2..=4);
            (0..k).map(|_| sentence(&mut rng, Label::Relevant)).collect::<Vec<_>>().join(". ")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_mixed() {
        let a = synthetic_bundle(200, 4);
        assert_eq!(a, synthetic_bundle(200, 4));
        let rel = a.instances.values().filter(|i| i.label == Some(Label::Relevant)).count();
        assert!((60..140).contains(&rel));
        assert!(a.instances.values().all(|i| i.validate().is_ok()));
        assert_eq!(synthetic_corpus(5, 1).len(), 5);
    }
}
