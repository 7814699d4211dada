//! Synthetic state-discrimination task: token streams standing in for speech.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::init::seeded;
use crate::lm::{Special, StateToken, TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub words: Vec<String>,
    /// Ends every complete query.
    pub terminator: char,
    /// Prefixes speech not addressed to the assistant.
    pub marker: char,
    pub min_words: usize,
    pub max_words: usize,
    /// Response : Incomplete : Ignore.
    pub ratio: [usize; 3],
    /// Response tokens supervised per sample, before `<eos>`.
    pub reply_len: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        let words = "what is the time now where do you live can we go play tell me a story about cats and dogs how far \
                     sun moon rain today open door red blue"
            .split_whitespace()
            .map(str::to_string)
            .collect();
        SyntheticTaskSpec {
            words,
            terminator: '?',
            marker: '~',
            min_words: 2,
            max_words: 5,
            ratio: [2, 1, 1],
            reply_len: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub label: StateToken,
    /// The speech stand-in, as text.
    pub utterance: String,
    pub reply: String,
}

/// Canned replies per class; the query-dependent part of a real answer is
/// irrelevant to state discrimination.
fn reply_for(label: StateToken, first_word: &str) -> String {
    match label {
        StateToken::Response => format!("re {first_word}"),
        StateToken::Incomplete => "go on".into(),
        StateToken::Ignore => "...".into(),
    }
}

/// Token layout of one training sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSample {
    pub ids: Vec<TokenId>,
    /// Position of the state token.
    pub j: usize,
    pub state: TokenId,
    /// Position of the first reply token.
    pub prompt_len: usize,
    pub targets: Vec<TokenId>,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.words.is_empty() || self.words.iter().any(|w| w.is_empty()) {
            return Err(invalid("synthetic task needs a nonempty vocabulary of nonempty words"));
        }
        let reserved = [self.terminator, self.marker];
        if self.words.iter().any(|w| w.chars().any(|c| reserved.contains(&c) || !c.is_ascii())) {
            return Err(invalid("words must be ASCII and free of the terminator and marker"));
        }
        if self.terminator == self.marker || !self.terminator.is_ascii() || !self.marker.is_ascii() {
            return Err(invalid("terminator and marker must be distinct ASCII characters"));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(invalid("need 1 <= min_words <= max_words"));
        }
        if self.ratio.iter().sum::<usize>() == 0 {
            return Err(invalid("class ratio must not be all zero"));
        }
        Ok(())
    }

    /// Class counts for `n` samples, largest-remainder rounding.
    pub fn class_counts(&self, n: usize) -> [usize; 3] {
        let total: usize = self.ratio.iter().sum();
        let mut c = self.ratio.map(|r| n * r / total);
        let mut rem: Vec<usize> = (0..3).collect();
        rem.sort_by_key(|&i| std::cmp::Reverse((n * self.ratio[i]) % total));
        let short = n - c.iter().sum::<usize>();
        for &i in rem.iter().take(short) {
            c[i] += 1;
        }
        c
    }

    pub fn encode(&self, s: &Sample, v: &Vocab) -> EncodedSample {
        let mut ids = vec![v.id(Special::User), v.id(Special::BeginSpeech)];
        ids.extend(v.encode(&s.utterance));
        ids.push(v.id(Special::EndSpeech));
        let j = ids.len();
        let state = v.state_id(s.label);
        ids.extend([state, v.id(Special::EndUser), v.id(Special::Assistant)]);
        let prompt_len = ids.len();
        let mut targets = v.encode(&s.reply);
        targets.truncate(self.reply_len);
        targets.push(v.id(Special::Eos));
        ids.extend(&targets);
        EncodedSample {
            ids,
            j,
            state,
            prompt_len,
            targets,
        }
    }
}

/// `n` labeled samples in shuffled order, deterministic in `spec.seed`.
///
/// Incomplete samples are prefixes of a complete or ignored utterance cut
/// strictly before the terminator, so they never contain it.
pub fn gen_synthetic_dataset(spec: &SyntheticTaskSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(invalid("dataset size must be at least 1"));
    }
    let mut rng = seeded(spec.seed);
    let counts = spec.class_counts(n);
    let mut out = Vec::with_capacity(n);
    for (label, &count) in StateToken::ALL.iter().zip(&counts) {
        for _ in 0..count {
            let k = rng.random_range(spec.min_words..=spec.max_words);
            let words: Vec<&str> = (0..k).map(|_| spec.words.choose(&mut rng).expect("nonempty").as_str()).collect();
            let body = words.join(" ");
            let utterance = match label {
                StateToken::Response => format!("{body}{}", spec.terminator),
                StateToken::Ignore => format!("{} {body}{}", spec.marker, spec.terminator),
                StateToken::Incomplete => {
                    let full = if rng.random_bool(0.5) {
                        body.clone()
                    } else {
                        format!("{} {body}", spec.marker)
                    };
                    let cut = rng.random_range(1..=full.len());
                    full[..cut].to_string()
                }
            };
            out.push(Sample {
                label: *label,
                reply: reply_for(*label, words[0]),
                utterance,
            });
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

pub fn to_jsonl(samples: &[Sample]) -> String {
    samples
        .iter()
        .map(|s| serde_json::to_string(s).expect("plain data") + "\n")
        .collect()
}
