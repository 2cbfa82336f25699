//! Template engine for listener text priors.
//!
//! A [`ListenerAnnotation`] (emotion, activated action units, optional head
//! motion) renders to a sentence of the form
//! `A person <emotion> and listens with <au> and <au> and <head motion>.`
//! Adjectives and adverbs are drawn from small synonym groups with a seeded
//! RNG, so the same annotation yields different but equivalent sentences.
//! [`parse_text_prior`] inverts the rendering.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_LEVEL: u8 = 5;

pub struct EmotionEntry {
    pub label: &'static str,
    pub phrases: [&'static str; 3],
}

pub const EMOTIONS: [EmotionEntry; 8] = [
    EmotionEntry { label: "happy", phrases: ["seems joyful", "looks happy", "appears cheerful"] },
    EmotionEntry { label: "sad", phrases: ["seems sorrowful", "looks sad", "appears downcast"] },
    EmotionEntry { label: "surprised", phrases: ["seems astonished", "looks surprised", "appears amazed"] },
    EmotionEntry { label: "angry", phrases: ["seems irritated", "looks angry", "appears furious"] },
    EmotionEntry { label: "neutral", phrases: ["seems calm", "looks neutral", "appears composed"] },
    EmotionEntry { label: "disgusted", phrases: ["seems repulsed", "looks disgusted", "appears revolted"] },
    EmotionEntry { label: "fearful", phrases: ["seems frightened", "looks fearful", "appears anxious"] },
    EmotionEntry { label: "confused", phrases: ["seems puzzled", "looks confused", "appears perplexed"] },
];

pub struct AuEntry {
    pub id: u32,
    pub name: &'static str,
    pub noun: &'static str,
    pub adjectives: [&'static str; 3],
}

pub const ACTION_UNITS: [AuEntry; 12] = [
    AuEntry { id: 1, name: "inner brow raiser", noun: "inner brows", adjectives: ["raised", "lifted", "elevated"] },
    AuEntry { id: 2, name: "outer brow raiser", noun: "outer brows", adjectives: ["raised", "lifted", "elevated"] },
    AuEntry { id: 4, name: "brow lowerer", noun: "brows", adjectives: ["lowered", "furrowed", "knitted"] },
    AuEntry { id: 5, name: "upper lid raiser", noun: "upper eyelids", adjectives: ["raised", "widened", "lifted"] },
    AuEntry { id: 6, name: "cheek raiser", noun: "cheeks", adjectives: ["raised", "lifted", "elevated"] },
    AuEntry { id: 7, name: "lid tightener", noun: "eyelids", adjectives: ["tightened", "narrowed", "squeezed"] },
    AuEntry { id: 9, name: "nose wrinkler", noun: "nose", adjectives: ["wrinkled", "scrunched", "crinkled"] },
    AuEntry { id: 12, name: "lip corner puller", noun: "lip corners", adjectives: ["raised", "lifted", "upturned"] },
    AuEntry { id: 15, name: "lip corner depressor", noun: "lip corners", adjectives: ["lowered", "depressed", "drooping"] },
    AuEntry { id: 17, name: "chin raiser", noun: "chin", adjectives: ["raised", "lifted", "pushed"] },
    AuEntry { id: 25, name: "lips part", noun: "lips", adjectives: ["parted", "separated", "opened"] },
    AuEntry { id: 26, name: "jaw drop", noun: "jaw", adjectives: ["dropped", "lowered", "opened"] },
];

/// Intensity adverbs, indexed by `level - 1`. The groups share no words so
/// the level can be read back from the adverb alone.
pub const ADVERBS: [[&str; 3]; 5] = [
    ["slightly", "faintly", "barely"],
    ["mildly", "gently", "softly"],
    ["fully", "clearly", "visibly"],
    ["strongly", "heavily", "markedly"],
    ["extremely", "intensely", "maximally"],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMotion {
    Nod,
    Shake,
}

impl HeadMotion {
    pub fn phrases(self) -> [&'static str; 3] {
        match self {
            HeadMotion::Nod => ["nods", "nods the head", "bobs the head"],
            HeadMotion::Shake => ["shakes the head", "shakes", "turns the head side to side"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AuActivation {
    pub id: u32,
    pub level: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListenerAnnotation {
    pub emotion: String,
    #[serde(default)]
    pub aus: Vec<AuActivation>,
    #[serde(default)]
    pub head_motion: Option<HeadMotion>,
}

impl ListenerAnnotation {
    pub fn validate(&self) -> Result<()> {
        emotion_entry(&self.emotion)?;
        let mut seen = BTreeSet::new();
        for au in &self.aus {
            au_entry(au.id)?;
            if !(1..=MAX_LEVEL).contains(&au.level) {
                return Err(Error::InvalidLevel { au: au.id, level: au.level });
            }
            if !seen.insert(au.id) {
                return Err(Error::DuplicateAu(au.id));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextPrior {
    pub text: String,
    pub source_annotation: ListenerAnnotation,
    pub rng_seed: u64,
}

pub fn emotion_labels() -> impl Iterator<Item = &'static str> {
    EMOTIONS.iter().map(|e| e.label)
}

pub fn au_ids() -> impl Iterator<Item = u32> {
    ACTION_UNITS.iter().map(|a| a.id)
}

fn emotion_entry(label: &str) -> Result<&'static EmotionEntry> {
    EMOTIONS
        .iter()
        .find(|e| e.label == label)
        .ok_or_else(|| Error::UnknownEmotion(label.to_string()))
}

fn au_entry(id: u32) -> Result<&'static AuEntry> {
    ACTION_UNITS.iter().find(|a| a.id == id).ok_or(Error::UnknownAu(id))
}

fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
    options[rng.random_range(0..options.len())]
}

/// Renders `ann` with synonym choices drawn from `seed`.
pub fn render_text_prior(ann: &ListenerAnnotation, seed: u64) -> Result<TextPrior> {
    ann.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emotion = pick(&mut rng, &emotion_entry(&ann.emotion)?.phrases);
    let mut text = format!("A person {emotion} and listens");
    for (i, au) in ann.aus.iter().enumerate() {
        let entry = au_entry(au.id)?;
        let adverb = pick(&mut rng, &ADVERBS[usize::from(au.level - 1)]);
        let adjective = pick(&mut rng, &entry.adjectives);
        text.push_str(if i == 0 { " with " } else { " and " });
        text.push_str(&format!("{adverb} {adjective} {}", entry.noun));
    }
    if let Some(hm) = ann.head_motion {
        text.push_str(" and ");
        text.push_str(pick(&mut rng, &hm.phrases()));
    }
    text.push('.');
    Ok(TextPrior {
        text,
        source_annotation: ann.clone(),
        rng_seed: seed,
    })
}

/// Recovers the annotation from a rendered sentence.
pub fn parse_text_prior(text: &str) -> Result<ListenerAnnotation> {
    let bad = || Error::UnparsableText(text.to_string());
    let body = text
        .trim()
        .strip_prefix("A person ")
        .and_then(|s| s.strip_suffix('.'))
        .ok_or_else(bad)?;
    let mut clauses = body.split(" and ");
    let emotion_phrase = clauses.next().ok_or_else(bad)?;
    let emotion = EMOTIONS
        .iter()
        .find(|e| e.phrases.contains(&emotion_phrase))
        .ok_or_else(bad)?
        .label
        .to_string();
    let listens = clauses.next().ok_or_else(bad)?;
    let mut aus = Vec::new();
    let mut head_motion = None;
    let mut rest: Vec<&str> = clauses.collect();
    match listens.strip_prefix("listens with ") {
        Some(first) => rest.insert(0, first),
        None if listens == "listens" => {}
        None => return Err(bad()),
    }
    for (i, clause) in rest.iter().enumerate() {
        if let Some(hm) = [HeadMotion::Nod, HeadMotion::Shake]
            .into_iter()
            .find(|hm| hm.phrases().contains(clause))
        {
            if i + 1 != rest.len() {
                return Err(bad());
            }
            head_motion = Some(hm);
            continue;
        }
        let (adverb, tail) = clause.split_once(' ').ok_or_else(bad)?;
        let level = ADVERBS
            .iter()
            .position(|g| g.contains(&adverb))
            .ok_or_else(bad)? as u8
            + 1;
        let (adjective, noun) = tail.split_once(' ').ok_or_else(bad)?;
        let entry = ACTION_UNITS
            .iter()
            .find(|a| a.noun == noun && a.adjectives.contains(&adjective))
            .ok_or_else(bad)?;
        aus.push(AuActivation { id: entry.id, level });
    }
    let ann = ListenerAnnotation { emotion, aus, head_motion };
    ann.validate()?;
    Ok(ann)
}

/// Lowercases, strips punctuation and splits on whitespace. Words that are
/// pure punctuation vanish.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Closed vocabulary over every word the template can produce. Id 0 is
/// reserved for out-of-vocabulary words.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

pub const OOV_ID: usize = 0;

impl Vocabulary {
    pub fn template() -> Self {
        let mut set = BTreeSet::new();
        let mut add = |s: &str| set.extend(words(s));
        add("A person and listens with");
        for e in &EMOTIONS {
            e.phrases.iter().for_each(|p| add(p));
        }
        for a in &ACTION_UNITS {
            add(a.noun);
            a.adjectives.iter().for_each(|p| add(p));
        }
        ADVERBS.iter().flatten().for_each(|p| add(p));
        for hm in [HeadMotion::Nod, HeadMotion::Shake] {
            hm.phrases().iter().for_each(|p| add(p));
        }
        let words: Vec<String> = std::iter::once("<oov>".to_string()).chain(set).collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(OOV_ID)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = words(text).iter().map(|w| self.id(w)).collect();
        if ids.is_empty() {
            return Err(Error::EmptyText);
        }
        Ok(ids)
    }
}
