//! Character-level tokenizer over lowercase a–z and space.

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SPACE: usize = 3;
const FIRST_LETTER: usize = 4;
pub const VOCAB_SIZE: usize = FIRST_LETTER + 26;

/// Symbols that can appear in lyrics: space plus the 26 letters.
pub const ALPHABET_SIZE: usize = 27;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("character {ch:?} at position {position} is outside the toy alphabet (a-z and space)")]
pub struct TokenizeError {
    pub ch: char,
    pub position: usize,
}

pub fn char_id(c: char) -> Option<usize> {
    match c {
        ' ' => Some(SPACE),
        'a'..='z' => Some(FIRST_LETTER + (c as usize - 'a' as usize)),
        _ => None,
    }
}

pub fn id_char(id: usize) -> Option<char> {
    match id {
        SPACE => Some(' '),
        i if (FIRST_LETTER..VOCAB_SIZE).contains(&i) => {
            Some((b'a' + (i - FIRST_LETTER) as u8) as char)
        }
        _ => None,
    }
}

/// `[BOS, chars..., EOS]`.
pub fn tokenize(text: &str) -> Result<Vec<usize>, TokenizeError> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BOS);
    for (position, ch) in text.chars().enumerate() {
        out.push(char_id(ch).ok_or(TokenizeError { ch, position })?);
    }
    out.push(EOS);
    Ok(out)
}

/// Text for the character tokens; specials are skipped.
pub fn detokenize(tokens: &[usize]) -> String {
    tokens.iter().filter_map(|&t| id_char(t)).collect()
}

/// Symbol ids without BOS/EOS, as used for feature rendering.
pub fn symbols(text: &str) -> Result<Vec<usize>, TokenizeError> {
    let t = tokenize(text)?;
    Ok(t[1..t.len() - 1].to_vec())
}
