//! Templated many-to-one QA corpus: every answer sentence is paired with
//! several paraphrased questions.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;

use crate::data::corpus::CorpusRecord;
use crate::rng;

const ADJECTIVES: &[&str] = &[
    "red", "old", "quiet", "brave", "tiny", "green", "lazy", "clever", "silver", "young", "angry", "gentle",
    "tall", "wild", "proud", "shy", "golden", "dark", "happy", "noisy", "pale", "swift", "royal", "rusty",
];
const NOUNS: &[&str] = &[
    "farmer", "fox", "sailor", "robot", "teacher", "dragon", "miner", "baker", "pilot", "knight", "monk",
    "otter", "queen", "hunter", "poet", "wizard", "doctor", "goat", "painter", "giant", "clerk", "owl",
    "merchant", "tiger",
];
/// (base, past) forms.
const VERBS: &[(&str, &str)] = &[
    ("find", "found"), ("steal", "stole"), ("build", "built"), ("sell", "sold"), ("paint", "painted"),
    ("hide", "hid"), ("carry", "carried"), ("break", "broke"), ("buy", "bought"), ("bury", "buried"),
    ("guard", "guarded"), ("lose", "lost"), ("repair", "repaired"), ("throw", "threw"), ("draw", "drew"),
    ("catch", "caught"),
];
const OBJECTS: &[&str] = &[
    "lantern", "map", "crown", "boat", "ladder", "drum", "sword", "kettle", "bridge", "wagon", "mirror",
    "bell", "basket", "clock", "shield", "violin", "barrel", "anchor", "candle", "saddle", "rope", "helmet",
    "coin", "scroll",
];
const PLACES: &[&str] = &[
    "the river", "the market", "the castle", "the harbor", "the forest", "the mill", "the temple",
    "the bakery", "the station", "the canyon", "the library", "the orchard", "the tower", "the beach",
    "the village", "the mountain",
];
const PREFIXES: &[&str] = &["", "", "", "please ,", "quick question :", "i wonder ,", "do you know", "hey ,"];
const SUFFIXES: &[&str] = &["", "", "", "exactly", "again", "today", "by the way"];

struct Fact {
    adj: &'static str,
    noun: &'static str,
    verb: (&'static str, &'static str),
    obj: &'static str,
    place: &'static str,
}

fn question(f: &Fact, template: usize) -> String {
    let (adj, noun, obj, place) = (f.adj, f.noun, f.obj, f.place);
    let (base, past) = f.verb;
    match template {
        0 => format!("what did the {adj} {noun} {base} near {place} ?"),
        1 => format!("where did the {adj} {noun} {base} the {obj} ?"),
        2 => format!("who {past} the {obj} near {place} ?"),
        3 => format!("tell me what the {adj} {noun} {past} ."),
        4 => format!("near {place} , what did the {noun} that is {adj} {base} ?"),
        5 => format!("can you say where the {adj} {noun} {past} the {obj} ?"),
        6 => format!("the {adj} {noun} {past} what ?"),
        7 => format!("what was {past} by the {adj} {noun} ?"),
        8 => format!("which {noun} {past} the {obj} ?"),
        _ => format!("what happened to the {obj} near {place} ?"),
    }
}

const TEMPLATES: usize = 10;

/// `groups` answer sentences, each with `min_q..=max_q` distinct questions.
pub fn generate(seed: u64, groups: usize, min_q: usize, max_q: usize) -> Vec<CorpusRecord> {
    let mut r = rng::stream(seed, "synthetic", 0);
    let mut used_keys: HashSet<String> = HashSet::new();
    let mut out = Vec::new();
    let mut g = 0;
    while g < groups {
        let fact = Fact {
            adj: ADJECTIVES.choose(&mut r).expect("non-empty"),
            noun: NOUNS.choose(&mut r).expect("non-empty"),
            verb: *VERBS.choose(&mut r).expect("non-empty"),
            obj: OBJECTS.choose(&mut r).expect("non-empty"),
            place: PLACES.choose(&mut r).expect("non-empty"),
        };
        // Every template must identify its fact.
        let keys = [
            format!("anv {} {} {}", fact.adj, fact.noun, fact.verb.0),
            format!("vop {} {} {}", fact.verb.0, fact.obj, fact.place),
            format!("nvo {} {} {}", fact.noun, fact.verb.0, fact.obj),
            format!("op {} {}", fact.obj, fact.place),
        ];
        if keys.iter().any(|k| used_keys.contains(k)) {
            continue;
        }
        used_keys.extend(keys);
        let answer = format!(
            "the {} {} {} the {} near {} .",
            fact.adj, fact.noun, fact.verb.1, fact.obj, fact.place
        );
        let n = r.random_range(min_q..=max_q);
        let mut seen = HashSet::new();
        let mut templates: Vec<usize> = (0..TEMPLATES).collect();
        templates.shuffle(&mut r);
        let mut k = 0;
        while seen.len() < n {
            let body = question(&fact, templates[k % TEMPLATES]);
            k += 1;
            let pre = PREFIXES.choose(&mut r).expect("non-empty");
            let suf = SUFFIXES.choose(&mut r).expect("non-empty");
            let q = [*pre, body.as_str(), *suf]
                .iter()
                .filter(|s| !s.is_empty())
                .copied()
                .collect::<Vec<_>>()
                .join(" ");
            if seen.insert(q.clone()) {
                out.push(CorpusRecord {
                    pair_id: format!("syn-{g:03}-{:02}", seen.len() - 1),
                    question: q,
                    answer: answer.clone(),
                    answer_id: format!("g{g:03}"),
                });
            }
        }
        g += 1;
    }
    out
}
