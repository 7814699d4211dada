use super::model::LmWeights;
use super::vocab::{Special, TokenId, Vocab};
use crate::adapter::SpeechEmbeddings;
use crate::error::{invalid, shape_err, Result};
use crate::numerics::Tensor;

/// One span of an assembled prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Span {
    Tokens(Vec<TokenId>),
    Speech(usize),
}

/// Position map of an assembled prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub spans: Vec<Span>,
}

impl PromptLayout {
    pub fn len(&self) -> usize {
        self.spans
            .iter()
            .map(|s| match s {
                Span::Tokens(t) => t.len(),
                Span::Speech(n) => *n,
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Token id at each position, `None` inside speech spans.
    pub fn positions(&self) -> Vec<Option<TokenId>> {
        let mut out = Vec::with_capacity(self.len());
        for s in &self.spans {
            match s {
                Span::Tokens(t) => out.extend(t.iter().map(|&i| Some(i))),
                Span::Speech(n) => out.extend(std::iter::repeat_n(None, *n)),
            }
        }
        out
    }

    /// Checks marker order: `<|user|>`, text, `<|beginofspeech|>`, speech,
    /// `<|endofspeech|>`, then optionally `<|endofuser|>`, `<|assistant|>`.
    pub fn check_template(&self, v: &Vocab) -> Result<()> {
        let pos = self.positions();
        let find = |s: Special| pos.iter().position(|p| *p == Some(v.id(s)));
        let count = |s: Special| pos.iter().filter(|p| **p == Some(v.id(s))).count();
        let user = find(Special::User).ok_or_else(|| invalid("prompt lacks <|user|>"))?;
        let bos = find(Special::BeginSpeech).ok_or_else(|| invalid("prompt lacks <|beginofspeech|>"))?;
        let eos = find(Special::EndSpeech).ok_or_else(|| invalid("prompt lacks <|endofspeech|>"))?;
        for s in [Special::User, Special::BeginSpeech, Special::EndSpeech] {
            if count(s) != 1 {
                return Err(invalid(format!("{} appears {} times", s.text(), count(s))));
            }
        }
        if !(user == 0 && user < bos && bos < eos) {
            return Err(invalid("template markers out of order"));
        }
        if (bos + 1..eos).any(|i| pos[i].is_some()) || (0..bos).chain(eos..pos.len()).any(|i| pos[i].is_none()) {
            return Err(invalid("speech must sit strictly between the speech markers"));
        }
        if eos == bos + 1 {
            return Err(invalid("empty speech span"));
        }
        let tail: Vec<_> = pos[eos + 1..].iter().map(|p| p.expect("token")).collect();
        let full = [v.id(Special::EndUser), v.id(Special::Assistant)];
        if !(tail.is_empty() || tail == full) {
            return Err(invalid("unexpected tokens after <|endofspeech|>"));
        }
        Ok(())
    }
}

fn layout(sentence: &str, speech_len: usize, v: &Vocab, probe: bool) -> Result<PromptLayout> {
    if speech_len == 0 {
        return Err(invalid("speech embeddings are empty"));
    }
    let mut head = vec![v.id(Special::User)];
    head.extend(v.encode(sentence));
    head.push(v.id(Special::BeginSpeech));
    let mut tail = vec![v.id(Special::EndSpeech)];
    if !probe {
        tail.extend([v.id(Special::EndUser), v.id(Special::Assistant)]);
    }
    Ok(PromptLayout {
        spans: vec![Span::Tokens(head), Span::Speech(speech_len), Span::Tokens(tail)],
    })
}

fn materialize(l: &PromptLayout, s: &SpeechEmbeddings, w: &LmWeights) -> Result<Tensor> {
    if s.s.shape().len() != 2 || s.s.shape()[1] != w.cfg.d_model {
        return Err(shape_err("assemble_prompt", format!("speech {:?}, d_lm {}", s.s.shape(), w.cfg.d_model)));
    }
    let s = s.s.to_dtype(w.dtype());
    let mut parts = Vec::with_capacity(l.spans.len());
    for span in &l.spans {
        parts.push(match span {
            Span::Tokens(t) => w.embed(t)?,
            Span::Speech(_) => s.clone(),
        });
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Tensor::concat_rows(&refs)
}

/// Embeds the full template:
/// `<|user|> sentence <|beginofspeech|> S <|endofspeech|> <|endofuser|> <|assistant|>`.
pub fn assemble_prompt(sentence: &str, s: &SpeechEmbeddings, w: &LmWeights, v: &Vocab) -> Result<(Tensor, PromptLayout)> {
    let l = layout(sentence, s.len(), v, false)?;
    Ok((materialize(&l, s, w)?, l))
}

/// Probing variant ending at `<|endofspeech|>`.
pub fn assemble_probe_prompt(sentence: &str, s: &SpeechEmbeddings, w: &LmWeights, v: &Vocab) -> Result<(Tensor, PromptLayout)> {
    let l = layout(sentence, s.len(), v, true)?;
    Ok((materialize(&l, s, w)?, l))
}
