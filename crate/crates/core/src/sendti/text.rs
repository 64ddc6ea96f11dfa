use crate::send::SendError;

/// Literal used for the separator in transcript files.
pub const SC_LITERAL: &str = "<sc>";

/// Token ids over a closed vocabulary `0..vocab_size`, where id
/// `vocab_size` is the speaker-change separator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
    sc_positions: Vec<usize>,
    vocab_size: usize,
}

impl TokenSequence {
    /// `sc_positions` must list exactly the indices holding the separator.
    pub fn new(tokens: Vec<usize>, sc_positions: Vec<usize>, vocab_size: usize) -> Result<Self, SendError> {
        if let Some(&t) = tokens.iter().find(|&&t| t > vocab_size) {
            return Err(SendError::Input(format!("token {t} outside vocabulary of {vocab_size}")));
        }
        let actual: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] == vocab_size).collect();
        if actual != sc_positions {
            return Err(SendError::Input(format!(
                "separator positions {sc_positions:?} do not match the tokens {actual:?}"
            )));
        }
        Ok(Self {
            tokens,
            sc_positions,
            vocab_size,
        })
    }

    /// Words only, no separators.
    pub fn plain(words: Vec<usize>, vocab_size: usize) -> Result<Self, SendError> {
        Self::new(words, vec![], vocab_size)
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn sc_positions(&self) -> &[usize] {
        &self.sc_positions
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn separator(&self) -> usize {
        self.vocab_size
    }
}

/// Inserts a separator between consecutive words of different speakers.
pub fn insert_sc_separators<S: PartialEq>(
    words: &[usize],
    speakers: &[S],
    vocab_size: usize,
) -> Result<TokenSequence, SendError> {
    if words.len() != speakers.len() {
        return Err(SendError::Input(format!(
            "{} words but {} speaker labels",
            words.len(),
            speakers.len()
        )));
    }
    let mut tokens = Vec::with_capacity(words.len() * 2);
    let mut sc = Vec::new();
    for (i, &w) in words.iter().enumerate() {
        if i > 0 && speakers[i] != speakers[i - 1] {
            sc.push(tokens.len());
            tokens.push(vocab_size);
        }
        tokens.push(w);
    }
    TokenSequence::new(tokens, sc, vocab_size)
}

/// One utterance per line, words written `w<id>`.
pub fn render_transcript(utterances: &[TokenSequence]) -> String {
    let mut out = String::new();
    for u in utterances {
        let line: Vec<String> = u
            .tokens
            .iter()
            .map(|&t| {
                if t == u.vocab_size {
                    SC_LITERAL.to_string()
                } else {
                    format!("w{t}")
                }
            })
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn parse_transcript(text: &str, vocab_size: usize) -> Result<Vec<TokenSequence>, SendError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let mut tokens = Vec::new();
        let mut sc = Vec::new();
        for word in line.split_whitespace() {
            if word == SC_LITERAL {
                sc.push(tokens.len());
                tokens.push(vocab_size);
                continue;
            }
            let id = word
                .strip_prefix('w')
                .and_then(|s| s.parse::<usize>().ok())
                .filter(|&id| id < vocab_size)
                .ok_or_else(|| SendError::Input(format!("line {}: unknown token {word:?}", n + 1)))?;
            tokens.push(id);
        }
        out.push(TokenSequence::new(tokens, sc, vocab_size)?);
    }
    Ok(out)
}
